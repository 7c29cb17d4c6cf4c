#pragma once

// Discrete two-lane road micro-simulation.
//
// The road is a grid of `length` cells by `lanes` lanes. Lane 0 is the left
// (normal speed) lane, lane 1 the overtaking lane. Vehicles are points that
// move `speed` cells forward per step. The learning agent starts each episode
// at (lane 0, pos 0, speed 1); obstacle vehicles drive at their lane's fixed
// speed and disappear once they pass the end of the road.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cavlab/rng.hpp"

namespace cavlab {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class SpawnError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RoadConfig {
    int length = 66;
    int lanes = 2;
    std::vector<int> lane_speed_limit{1, 2};
    int max_agent_speed = 3;
    int scan_range = 5;
    int n_obstacles = 6;
    int max_steps = 200;

    /// Throws ConfigError describing the first violated invariant.
    void validate() const;
    int limit(int lane) const { return lane_speed_limit.at(static_cast<std::size_t>(lane)); }
};

/// Immediate reward table. Rows are additive.
struct RewardConfig {
    double alive_or_goal = 0.1;
    double shift_penalty = -0.1;
    double crash_or_bump = -10.0;
    double speed_bonus_divisor = 10.0;
    double overspeed_factor = 2.0;
    /// Speed limit used by the speed rows. 0 selects the per-lane limit of
    /// the road (road.lane_speed_limit).
    int speed_limit = 0;

    void validate() const;
};

struct VehicleState {
    int lane = 0;
    int pos = 0;
    int speed = 0;

    friend bool operator==(const VehicleState&, const VehicleState&) = default;
};

struct WorldState {
    VehicleState agent;
    std::vector<VehicleState> obstacles;
    int step = 0;

    friend bool operator==(const WorldState&, const WorldState&) = default;

    /// Obstacle at (lane, pos), or nullptr.
    const VehicleState* obstacle_at(int lane, int pos) const;
};

enum class Dir : std::uint8_t { Left = 0, Stay = 1, Right = 2 };
enum class Spd : std::uint8_t { Dec = 0, Keep = 1, Inc = 2 };

inline constexpr int kNumActions = 9;

struct ActionPair {
    Dir dir = Dir::Stay;
    Spd spd = Spd::Keep;

    /// Index in 0..8, dir-major: (Left,Dec)=0, (Left,Keep)=1, ... (Right,Inc)=8.
    constexpr int index() const { return static_cast<int>(dir) * 3 + static_cast<int>(spd); }
    static constexpr ActionPair from_index(int i) {
        return ActionPair{static_cast<Dir>(i / 3), static_cast<Spd>(i % 3)};
    }
    constexpr int lane_delta() const { return static_cast<int>(dir) - 1; }
    constexpr int speed_delta() const { return static_cast<int>(spd) - 1; }

    friend constexpr bool operator==(ActionPair, ActionPair) = default;
};

std::string to_string(ActionPair a);
/// Parses the "Dir/Spd" form produced by to_string.
std::optional<ActionPair> parse_action(std::string_view s);

inline constexpr int kScanDirections = 7;

/// Ray order shared by the scanner and the V2V neighbour lookup.
enum class ScanDir : std::uint8_t { Front, FrontLeft, FrontRight, Left, Right, RearLeft, RearRight };

struct ScannerReading {
    std::array<int, kScanDirections> dist{};

    friend bool operator==(const ScannerReading&, const ScannerReading&) = default;
};

/// Speed of the nearest vehicle along each scanner ray, if one is in range.
using NeighborSpeeds = std::array<std::optional<int>, kScanDirections>;

enum class Event : std::uint8_t { Alive, Goal, Crash, Bump };

std::string_view to_string(Event e);
std::optional<Event> parse_event(std::string_view s);
inline bool is_terminal(Event e) { return e != Event::Alive; }

struct Cell {
    int lane = 0;
    int pos = 0;
    friend bool operator==(const Cell&, const Cell&) = default;
};

struct StepOutcome {
    WorldState next;
    Event event = Event::Alive;
    std::vector<Cell> traversed;
};

WorldState spawn_world(const RoadConfig& cfg, Rng& rng);

ScannerReading scan(const WorldState& world, const RoadConfig& cfg);
NeighborSpeeds neighbor_speeds(const WorldState& world, const RoadConfig& cfg);

StepOutcome apply_action(const WorldState& world, ActionPair action, const RoadConfig& cfg);

/// Base term of the reward table: outcome only.
double reward_base(Event event, const RewardConfig& rc);
/// Lateral-move term.
double reward_shift(ActionPair action, const RewardConfig& rc);
/// Speed term; `limit` is the speed limit of the lane the agent ends in.
double reward_speed(Event event, int speed, int limit, const RewardConfig& rc);

/// Sum of all applicable rows. `agent_speed` and `agent_lane` are post-step
/// values; on a bump the lane is the (unchanged) pre-step lane.
double reward(Event event, ActionPair action, int agent_speed, int agent_lane, const RewardConfig& rc,
              const RoadConfig& road);

}  // namespace cavlab
