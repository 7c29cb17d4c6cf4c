#include "cavlab/world.hpp"

#include <algorithm>
#include <cmath>

namespace cavlab {

void RoadConfig::validate() const {
    if (length < 2) throw ConfigError("road.length must be >= 2");
    if (lanes != 2) throw ConfigError("road.lanes must be 2");
    if (max_agent_speed < 1) throw ConfigError("road.max_agent_speed must be >= 1");
    if (static_cast<int>(lane_speed_limit.size()) != lanes)
        throw ConfigError("road.lane_speed_limit must have one entry per lane");
    for (int v : lane_speed_limit)
        if (v < 1 || v > max_agent_speed)
            throw ConfigError("road.lane_speed_limit entries must lie in [1, max_agent_speed]");
    if (scan_range < 1) throw ConfigError("road.scan_range must be >= 1");
    if (n_obstacles < 0) throw ConfigError("road.n_obstacles must be >= 0");
    if (max_steps < 0 || static_cast<long>(max_steps) * max_agent_speed < length)
        throw ConfigError("road.max_steps must be >= length / max_agent_speed");
}

void RewardConfig::validate() const {
    for (double v : {alive_or_goal, shift_penalty, crash_or_bump, speed_bonus_divisor, overspeed_factor})
        if (!std::isfinite(v)) throw ConfigError("reward values must be finite");
    if (speed_bonus_divisor == 0.0) throw ConfigError("reward.speed_bonus_divisor must be non-zero");
}

const VehicleState* WorldState::obstacle_at(int lane, int pos) const {
    for (const auto& o : obstacles)
        if (o.lane == lane && o.pos == pos) return &o;
    return nullptr;
}

namespace {

constexpr std::array<std::string_view, 3> kDirNames{"Left", "Stay", "Right"};
constexpr std::array<std::string_view, 3> kSpdNames{"Dec", "Keep", "Inc"};
constexpr std::array<std::string_view, 4> kEventNames{"Alive", "Goal", "Crash", "Bump"};

// Longitudinal and lateral step per cell for each ray; lateral rays are
// handled separately.
struct Ray {
    int dlane;
    int dpos;
};

constexpr std::array<Ray, kScanDirections> kRays{{
    {0, 1},    // front
    {-1, 1},   // front-left
    {1, 1},    // front-right
    {-1, 0},   // left
    {1, 0},    // right
    {-1, -1},  // rear-left
    {1, -1},   // rear-right
}};

struct RayHit {
    int free_cells;
    const VehicleState* vehicle;
};

// Walks one ray. Diagonal rays move to the adjacent lane and then advance
// one cell per step along it; the lateral rays keep moving sideways. Leaving
// the road sideways stops the ray (a wall). The longitudinal road ends are
// open: the destination lies beyond the far end.
RayHit walk_ray(const WorldState& world, const RoadConfig& cfg, ScanDir dir) {
    const auto& agent = world.agent;
    const Ray ray = kRays[static_cast<std::size_t>(dir)];
    const bool lateral = ray.dpos == 0;
    const int lane = agent.lane + ray.dlane;
    if (lane < 0 || lane >= cfg.lanes) return {0, nullptr};
    int free = 0;
    for (int k = 1; k <= cfg.scan_range; ++k) {
        const int l = lateral ? agent.lane + k * ray.dlane : lane;
        const int p = lateral ? agent.pos : agent.pos + k * ray.dpos;
        if (l < 0 || l >= cfg.lanes) return {free, nullptr};
        if (const auto* v = world.obstacle_at(l, p)) return {free, v};
        ++free;
    }
    return {free, nullptr};
}

}  // namespace

std::string to_string(ActionPair a) {
    std::string s(kDirNames[static_cast<std::size_t>(a.dir)]);
    s += '/';
    s += kSpdNames[static_cast<std::size_t>(a.spd)];
    return s;
}

std::optional<ActionPair> parse_action(std::string_view s) {
    for (int i = 0; i < kNumActions; ++i) {
        const auto a = ActionPair::from_index(i);
        if (to_string(a) == s) return a;
    }
    return std::nullopt;
}

std::string_view to_string(Event e) { return kEventNames[static_cast<std::size_t>(e)]; }

std::optional<Event> parse_event(std::string_view s) {
    for (std::size_t i = 0; i < kEventNames.size(); ++i)
        if (kEventNames[i] == s) return static_cast<Event>(i);
    return std::nullopt;
}

WorldState spawn_world(const RoadConfig& cfg, Rng& rng) {
    cfg.validate();
    WorldState world;
    world.agent = VehicleState{0, 0, 1};

    // Candidate cells: pos in [4, length-1], excluding the 3 cells ahead of
    // the agent in its lane (already implied by pos >= 4 for pos 0).
    std::vector<Cell> candidates;
    for (int pos = 4; pos < cfg.length; ++pos)
        for (int lane = 0; lane < cfg.lanes; ++lane) {
            if (lane == world.agent.lane && pos > world.agent.pos && pos <= world.agent.pos + 3) continue;
            candidates.push_back({lane, pos});
        }
    if (static_cast<std::size_t>(cfg.n_obstacles) > candidates.size())
        throw SpawnError("cannot place " + std::to_string(cfg.n_obstacles) + " obstacles in " +
                         std::to_string(candidates.size()) + " free cells");

    // Partial Fisher-Yates: first n entries become a uniform random subset.
    for (int i = 0; i < cfg.n_obstacles; ++i) {
        const auto j = static_cast<std::size_t>(i) + rng.below(candidates.size() - static_cast<std::size_t>(i));
        std::swap(candidates[static_cast<std::size_t>(i)], candidates[j]);
        const Cell c = candidates[static_cast<std::size_t>(i)];
        world.obstacles.push_back(VehicleState{c.lane, c.pos, cfg.limit(c.lane)});
    }
    return world;
}

ScannerReading scan(const WorldState& world, const RoadConfig& cfg) {
    ScannerReading r;
    for (int d = 0; d < kScanDirections; ++d)
        r.dist[static_cast<std::size_t>(d)] = walk_ray(world, cfg, static_cast<ScanDir>(d)).free_cells;
    return r;
}

NeighborSpeeds neighbor_speeds(const WorldState& world, const RoadConfig& cfg) {
    NeighborSpeeds out;
    for (int d = 0; d < kScanDirections; ++d) {
        const auto hit = walk_ray(world, cfg, static_cast<ScanDir>(d));
        if (hit.vehicle != nullptr) out[static_cast<std::size_t>(d)] = hit.vehicle->speed;
    }
    return out;
}

StepOutcome apply_action(const WorldState& world, ActionPair action, const RoadConfig& cfg) {
    StepOutcome out;
    WorldState& next = out.next;
    next.step = world.step + 1;

    next.obstacles.reserve(world.obstacles.size());
    for (auto o : world.obstacles) {
        o.pos += o.speed;
        if (o.pos < cfg.length) next.obstacles.push_back(o);
    }

    VehicleState agent = world.agent;
    agent.speed = std::clamp(agent.speed + action.speed_delta(), 0, cfg.max_agent_speed);
    const int lane = agent.lane + action.lane_delta();
    if (lane < 0 || lane >= cfg.lanes) {
        next.agent = agent;
        out.event = Event::Bump;
        return out;
    }
    agent.lane = lane;
    for (int k = 1; k <= agent.speed; ++k) out.traversed.push_back({lane, agent.pos + k});
    agent.pos += agent.speed;
    next.agent = agent;

    bool crash = next.obstacle_at(agent.lane, agent.pos) != nullptr;
    for (const auto& c : out.traversed) crash = crash || next.obstacle_at(c.lane, c.pos) != nullptr;

    if (crash)
        out.event = Event::Crash;
    else if (agent.pos >= cfg.length)
        out.event = Event::Goal;
    else
        out.event = Event::Alive;
    return out;
}

double reward_base(Event event, const RewardConfig& rc) {
    return (event == Event::Alive || event == Event::Goal) ? rc.alive_or_goal : rc.crash_or_bump;
}

double reward_shift(ActionPair action, const RewardConfig& rc) {
    return action.dir == Dir::Stay ? 0.0 : rc.shift_penalty;
}

double reward_speed(Event event, int speed, int limit, const RewardConfig& rc) {
    if (speed > limit) return -rc.overspeed_factor * speed;
    if (event == Event::Alive || event == Event::Goal) return speed / rc.speed_bonus_divisor;
    return -static_cast<double>(speed);
}

double reward(Event event, ActionPair action, int agent_speed, int agent_lane, const RewardConfig& rc,
              const RoadConfig& road) {
    const int lane = std::clamp(agent_lane, 0, road.lanes - 1);
    const int limit = rc.speed_limit > 0 ? rc.speed_limit : road.limit(lane);
    return reward_base(event, rc) + reward_shift(action, rc) + reward_speed(event, agent_speed, limit, rc);
}

}  // namespace cavlab
