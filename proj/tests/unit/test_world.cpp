#include <set>

#include "cavlab/world.hpp"
#include "doctest.h"

using namespace cavlab;

namespace {

WorldState agent_only(int lane, int pos, int speed) {
    WorldState w;
    w.agent = {lane, pos, speed};
    return w;
}

// Cell-by-cell reference for one scanner ray: lateral rays step sideways,
// the others step along the adjacent (or same) lane.
int reference_ray(const WorldState& w, const RoadConfig& cfg, int dir) {
    static constexpr int kLane[7] = {0, -1, 1, -1, 1, -1, 1};
    static constexpr int kPos[7] = {1, 1, 1, 0, 0, -1, -1};
    int count = 0;
    for (int k = 1; k <= cfg.scan_range; ++k) {
        const int lane = kPos[dir] == 0 ? w.agent.lane + k * kLane[dir] : w.agent.lane + kLane[dir];
        const int pos = w.agent.pos + k * kPos[dir];
        if (lane < 0 || lane >= cfg.lanes) break;
        bool hit = false;
        for (const auto& o : w.obstacles) hit = hit || (o.lane == lane && o.pos == pos);
        if (hit) break;
        ++count;
    }
    return count;
}

}  // namespace

TEST_CASE("road config validation") {
    RoadConfig c;
    CHECK_NOTHROW(c.validate());
    c.lanes = 3;
    c.lane_speed_limit = {1, 2, 3};
    CHECK_THROWS_AS(c.validate(), ConfigError);

    RoadConfig d;
    d.lane_speed_limit = {1, 4};
    CHECK_THROWS_AS(d.validate(), ConfigError);
    RoadConfig e;
    e.max_steps = 10;  // 10 * 3 < 66
    CHECK_THROWS_AS(e.validate(), ConfigError);
    RoadConfig f;
    f.length = 1;
    CHECK_THROWS_AS(f.validate(), ConfigError);
}

TEST_CASE("action indexing is dir-major and round-trips through names") {
    std::set<std::string> names;
    for (int i = 0; i < kNumActions; ++i) {
        const auto a = ActionPair::from_index(i);
        CHECK(a.index() == i);
        names.insert(to_string(a));
        CHECK(parse_action(to_string(a)) == a);
    }
    CHECK(names.size() == 9);
    CHECK(ActionPair::from_index(0) == ActionPair{Dir::Left, Spd::Dec});
    CHECK(ActionPair::from_index(4) == ActionPair{Dir::Stay, Spd::Keep});
    CHECK(ActionPair::from_index(8) == ActionPair{Dir::Right, Spd::Inc});
    CHECK_FALSE(parse_action("Up/Keep").has_value());
}

TEST_CASE("spawn_world") {
    RoadConfig cfg;

    SUBCASE("no obstacles") {
        cfg.n_obstacles = 0;
        Rng rng(5);
        const auto w = spawn_world(cfg, rng);
        CHECK(w.obstacles.empty());
        CHECK(w.agent == VehicleState{0, 0, 1});
        CHECK(w.step == 0);
    }

    SUBCASE("same seed gives the same world") {
        Rng a(99), b(99);
        CHECK(spawn_world(cfg, a) == spawn_world(cfg, b));
    }

    SUBCASE("post-conditions hold over many seeds") {
        for (std::uint64_t seed = 0; seed < 10000; ++seed) {
            Rng rng(seed);
            const auto w = spawn_world(cfg, rng);
            REQUIRE(w.obstacles.size() == 6);
            std::set<std::pair<int, int>> cells;
            for (const auto& o : w.obstacles) {
                CHECK(o.pos >= 4);
                CHECK(o.pos <= cfg.length - 1);
                CHECK((o.lane == 0 || o.lane == 1));
                CHECK(o.speed == cfg.limit(o.lane));
                CHECK_FALSE((o.lane == 0 && o.pos >= 1 && o.pos <= 3));
                cells.insert({o.lane, o.pos});
            }
            CHECK(cells.size() == 6);
        }
    }

    SUBCASE("infeasible obstacle count") {
        cfg.length = 6;
        cfg.n_obstacles = 5;  // only 2 x 2 cells available
        Rng rng(1);
        CHECK_THROWS_AS(spawn_world(cfg, rng), SpawnError);
    }
}

TEST_CASE("scan geometry on an empty road") {
    RoadConfig cfg;
    // Off-road directions read 0; the lateral ray towards the other lane sees
    // one free cell before the far edge.
    CHECK(scan(agent_only(0, 30, 1), cfg).dist == std::array<int, 7>{5, 0, 5, 0, 1, 0, 5});
    CHECK(scan(agent_only(1, 30, 1), cfg).dist == std::array<int, 7>{5, 5, 0, 1, 0, 5, 0});
    // Road ends are open in both directions.
    CHECK(scan(agent_only(0, 64, 1), cfg).dist[0] == 5);
    CHECK(scan(agent_only(1, 0, 1), cfg).dist[5] == 5);
}

TEST_CASE("scan distance counts free cells before an obstacle") {
    RoadConfig cfg;
    auto w = agent_only(0, 30, 1);
    w.obstacles.push_back({0, 32, 1});
    CHECK(scan(w, cfg).dist[0] == 1);
    w.obstacles.push_back({1, 30, 2});
    const auto r = scan(w, cfg);
    CHECK(r.dist[4] == 0);  // right, adjacent
    const auto n = neighbor_speeds(w, cfg);
    CHECK(n[0] == 1);
    CHECK(n[4] == 2);
    CHECK_FALSE(n[2].has_value());
}

TEST_CASE("scan agrees with a cell-walk reference on random worlds") {
    RoadConfig cfg;
    Rng rng(2024);
    for (int trial = 0; trial < 3000; ++trial) {
        WorldState w;
        w.agent = {static_cast<int>(rng.below(2)), static_cast<int>(rng.below(66)), 1};
        const int n = static_cast<int>(rng.below(20));
        for (int i = 0; i < n; ++i) {
            const int lane = static_cast<int>(rng.below(2));
            const int pos = static_cast<int>(rng.below(66));
            if ((lane == w.agent.lane && pos == w.agent.pos) || w.obstacle_at(lane, pos)) continue;
            w.obstacles.push_back({lane, pos, cfg.limit(lane)});
        }
        const auto r = scan(w, cfg);
        for (int d = 0; d < kScanDirections; ++d) {
            CHECK(r.dist[static_cast<std::size_t>(d)] == reference_ray(w, cfg, d));
            CHECK(r.dist[static_cast<std::size_t>(d)] >= 0);
            CHECK(r.dist[static_cast<std::size_t>(d)] <= cfg.scan_range);
        }
    }
}

TEST_CASE("apply_action transitions") {
    RoadConfig cfg;

    SUBCASE("unobstructed advance") {
        const auto out = apply_action(agent_only(0, 10, 1), {Dir::Stay, Spd::Keep}, cfg);
        CHECK(out.next.agent == VehicleState{0, 11, 1});
        CHECK(out.event == Event::Alive);
        CHECK(out.traversed == std::vector<Cell>{{0, 11}});
    }

    SUBCASE("bump leaves the agent in place") {
        const auto out = apply_action(agent_only(0, 10, 1), {Dir::Left, Spd::Keep}, cfg);
        CHECK(out.event == Event::Bump);
        CHECK(out.next.agent.pos == 10);
        CHECK(out.next.agent.lane == 0);
        CHECK(out.traversed.empty());
    }

    SUBCASE("crash into an obstacle that moved into the swept path") {
        auto w = agent_only(0, 10, 2);
        w.obstacles.push_back({0, 12, 1});
        const auto out = apply_action(w, {Dir::Stay, Spd::Inc}, cfg);
        CHECK(out.next.agent.speed == 3);
        CHECK(out.traversed == std::vector<Cell>{{0, 11}, {0, 12}, {0, 13}});
        CHECK(out.next.obstacles.front().pos == 13);
        CHECK(out.event == Event::Crash);
    }

    SUBCASE("goal when passing the end") {
        const auto out = apply_action(agent_only(1, 64, 2), {Dir::Stay, Spd::Keep}, cfg);
        CHECK(out.event == Event::Goal);
        CHECK(out.next.agent.pos == 66);
    }

    SUBCASE("bump takes precedence over crash") {
        auto w = agent_only(1, 10, 1);
        w.obstacles.push_back({1, 10, 2});  // would be hit if the agent moved
        CHECK(apply_action(w, {Dir::Right, Spd::Keep}, cfg).event == Event::Bump);
    }

    SUBCASE("obstacles despawn past the end") {
        auto w = agent_only(0, 0, 1);
        w.obstacles.push_back({1, 65, 2});
        CHECK(apply_action(w, {Dir::Stay, Spd::Keep}, cfg).next.obstacles.empty());
    }

    SUBCASE("speed clamps at both ends") {
        CHECK(apply_action(agent_only(0, 5, 0), {Dir::Stay, Spd::Dec}, cfg).next.agent.speed == 0);
        CHECK(apply_action(agent_only(0, 5, 3), {Dir::Stay, Spd::Inc}, cfg).next.agent.speed == 3);
    }
}

TEST_CASE("random rollouts keep the world invariants") {
    RoadConfig cfg;
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        Rng rng(seed);
        WorldState w = spawn_world(cfg, rng);
        std::vector<int> speeds;
        for (const auto& o : w.obstacles) speeds.push_back(o.speed);
        for (int t = 0; t < cfg.max_steps; ++t) {
            const auto a = ActionPair::from_index(static_cast<int>(rng.below(9)));
            const auto out = apply_action(w, a, cfg);
            CHECK(out.next.agent.pos >= w.agent.pos);
            CHECK(out.next.obstacles.size() <= w.obstacles.size());
            for (const auto& o : out.next.obstacles) CHECK(o.speed == cfg.limit(o.lane));
            if (out.event != Event::Bump) CHECK((out.next.agent.lane == 0 || out.next.agent.lane == 1));
            CHECK(apply_action(w, a, cfg).next == out.next);
            if (out.event == Event::Alive) {
                CHECK(out.next.obstacle_at(out.next.agent.lane, out.next.agent.pos) == nullptr);
                std::set<std::pair<int, int>> cells;
                for (const auto& o : out.next.obstacles) cells.insert({o.lane, o.pos});
                CHECK(cells.size() == out.next.obstacles.size());
            }
            if (is_terminal(out.event)) break;
            w = out.next;
        }
    }
}

TEST_CASE("reward rows") {
    const RoadConfig road;
    const RewardConfig rc;
    CHECK(reward(Event::Alive, {Dir::Stay, Spd::Keep}, 1, 0, rc, road) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(reward(Event::Crash, {Dir::Right, Spd::Keep}, 2, 1, rc, road) == doctest::Approx(-12.1).epsilon(1e-12));
    CHECK(reward(Event::Alive, {Dir::Stay, Spd::Keep}, 3, 1, rc, road) == doctest::Approx(-5.9).epsilon(1e-12));

    CHECK(reward_base(Event::Goal, rc) == 0.1);
    CHECK(reward_base(Event::Bump, rc) == -10.0);
    CHECK(reward_shift({Dir::Left, Spd::Dec}, rc) == -0.1);
    CHECK(reward_shift({Dir::Stay, Spd::Dec}, rc) == 0.0);
    CHECK(reward_speed(Event::Alive, 2, 2, rc) == doctest::Approx(0.2));  // at the limit counts as below
    CHECK(reward_speed(Event::Bump, 1, 2, rc) == -1.0);
    CHECK(reward_speed(Event::Goal, 3, 2, rc) == -6.0);

    RewardConfig fixed = rc;
    fixed.speed_limit = 3;
    CHECK(reward(Event::Alive, {Dir::Stay, Spd::Keep}, 3, 0, fixed, road) == doctest::Approx(0.4));
}

TEST_CASE("event names round-trip") {
    for (Event e : {Event::Alive, Event::Goal, Event::Crash, Event::Bump}) CHECK(parse_event(to_string(e)) == e);
    CHECK_FALSE(parse_event("Boom").has_value());
}
