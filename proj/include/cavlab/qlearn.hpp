#pragma once

// Tabular Q-learning on the two-lane road.

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cavlab/rng.hpp"
#include "cavlab/world.hpp"

namespace cavlab {

/// Marker stored in a key component when no vehicle was found on a ray.
inline constexpr int kNoNeighbor = -1;

/// Discretized observation used as the Q-table key. Components are small
/// integers; the layout depends on the encoder that produced the key.
class StateKey {
public:
    static constexpr std::size_t kMaxComponents = 1 + 2 * kScanDirections;

    StateKey() = default;
    explicit StateKey(std::span<const int> components);
    StateKey(std::initializer_list<int> components)
        : StateKey(std::span<const int>(components.begin(), components.size())) {}

    std::size_t size() const { return size_; }
    int operator[](std::size_t i) const { return values_[i]; }
    std::vector<int> components() const { return {values_.begin(), values_.begin() + size_}; }

    friend bool operator==(const StateKey& a, const StateKey& b) {
        return a.size_ == b.size_ && a.values_ == b.values_;
    }
    friend bool operator<(const StateKey& a, const StateKey& b);

    struct Hash {
        std::size_t operator()(const StateKey& k) const noexcept;
    };

private:
    std::array<std::int16_t, kMaxComponents> values_{};
    std::size_t size_ = 0;
};

/// speed + 7 scanner distances, and with `v2v` the 7 neighbour speeds
/// (kNoNeighbor where a ray saw nothing). Neighbour speeds are ignored when
/// `v2v` is false.
StateKey encode_state(int speed, const ScannerReading& scan, const NeighborSpeeds* neighbors, bool v2v);

/// Observation of `world` as seen by the agent's scanner (and V2V link).
StateKey observe(const WorldState& world, const RoadConfig& cfg, bool v2v);

/// (lane, pos, speed): the Markov state of an obstacle-free road. Used for
/// the exact value-iteration comparison.
StateKey encode_full_state(const VehicleState& agent);

using QRow = std::array<double, kNumActions>;

class QTable {
public:
    /// Row for `s`; all zeros when the state was never written.
    const QRow& row(const StateKey& s) const;
    QRow& row_mut(const StateKey& s) { return entries_[s]; }

    double value(const StateKey& s, ActionPair a) const { return row(s)[static_cast<std::size_t>(a.index())]; }
    double max_value(const StateKey& s) const;

    bool contains(const StateKey& s) const { return entries_.count(s) != 0; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    /// Entries sorted by key, for deterministic output.
    std::vector<std::pair<StateKey, QRow>> sorted_entries() const;

    const auto& entries() const { return entries_; }

private:
    std::unordered_map<StateKey, QRow, StateKey::Hash> entries_;
};

struct LearnConfig {
    double alpha = 0.4;
    double gamma = 0.95;
    long episodes = 100000;
    double epsilon_start = 1.0;
    double epsilon_end = 0.05;
    long epsilon_decay_episodes = 20000;
    std::uint64_t seed = 1;
    bool v2v = false;
    long bucket = 1000;

    void validate() const;
    /// Linear schedule, evaluated at 0-based episode index.
    double epsilon_at(long episode) const;
};

/// Q(s,a) <- (1-alpha) Q(s,a) + alpha (r + gamma max_a' Q(s',a')), with the
/// max term taken as 0 when `terminal`. Returns the new Q(s,a).
double q_update(QTable& q, const StateKey& s, ActionPair a, double r, const StateKey& s_next, bool terminal,
                double alpha, double gamma);

/// Epsilon-greedy; ties among maximal actions are broken uniformly. Always
/// consumes exactly two draws from `rng`.
ActionPair select_action(const QTable& q, const StateKey& s, double epsilon, Rng& rng);

/// Lowest-index maximal action. Used for greedy evaluation.
ActionPair greedy_action(const QTable& q, const StateKey& s);

struct EpisodeStats {
    int steps = 0;
    Event terminal = Event::Alive;
    bool quick = false;
    double total_reward = 0.0;

    bool timed_out() const { return terminal == Event::Alive; }
};

/// Episodes reaching the goal in fewer than this many steps count as quick.
inline constexpr int kQuickFinishSteps = 40;

struct TraceStep {
    int t = 0;
    VehicleState agent;  // before the action
    ScannerReading scan;  // before the action
    ActionPair action;
    double reward = 0.0;
    Event event = Event::Alive;
};

enum class Observation : std::uint8_t { Scanner, ScannerV2V, FullState };

struct EpisodeOptions {
    bool learn = true;
    double epsilon = 0.0;
    /// Learning rate override for the update; defaults to learn_cfg.alpha.
    std::optional<double> alpha;
    Observation observation = Observation::Scanner;
    std::function<void(const TraceStep&)> on_step;
};

/// Spawns a world from `world_rng` and plays until a terminal event or
/// road.max_steps. With learn=false the agent is greedy (lowest-index tie
/// break), does not update `q`, and `action_rng` is untouched.
EpisodeStats run_episode(const RoadConfig& road, const RewardConfig& reward_cfg, QTable& q,
                         const LearnConfig& learn_cfg, Rng& world_rng, Rng& action_rng, const EpisodeOptions& opts);

struct MetricsBucket {
    long bucket_index = 0;
    long episodes = 0;
    std::optional<double> avg_time_to_goal;
    double crash_rate = 0.0;
    double goal_rate = 0.0;
    double quick_rate = 0.0;
    double timeout_rate = 0.0;
    double epsilon = 0.0;  // at the bucket's last episode
};

struct TrainResult {
    QTable table;
    std::vector<MetricsBucket> buckets;
    std::vector<EpisodeStats> episodes;
};

/// Seeds for episode `e` of a run. World and exploration streams are
/// independent, so runs that differ only in the observation encoding see
/// identical worlds and identical per-step exploration draws.
Rng world_rng_for(std::uint64_t seed, long episode);
Rng action_rng_for(std::uint64_t seed, long episode);

TrainResult train(const RoadConfig& road, const RewardConfig& reward_cfg, const LearnConfig& learn_cfg);

/// Aggregates a contiguous slice of episodes into one metrics row.
MetricsBucket summarize(std::span<const EpisodeStats> episodes, long bucket_index, double epsilon);

struct ValueIterationResult {
    QTable q;  // keyed by encode_full_state
    double residual = 0.0;
    int iterations = 0;
};

/// Exact Q* of the obstacle-free road by synchronous Bellman backups over
/// every (lane, pos, speed). Throws ConfigError if obstacles are configured.
ValueIterationResult value_iteration_oracle(const RoadConfig& road, const RewardConfig& reward_cfg, double gamma,
                                            double tolerance = 1e-10, int max_iterations = 100000);

// ---- file formats ----

void write_metrics_csv(std::ostream& os, std::span<const MetricsBucket> buckets);

std::string qtable_to_json(const QTable& q, bool v2v);
/// Returns the table and its v2v flag. Throws std::runtime_error on bad input.
std::pair<QTable, bool> qtable_from_json(const std::string& text);

/// Shortest-round-trip decimal, locale independent.
std::string format_double(double v);

}  // namespace cavlab
