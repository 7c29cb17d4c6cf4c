#include "cavlab/qlearn.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "json.hpp"

namespace cavlab {

namespace {

constexpr std::uint64_t kWorldStream = 0x574f524c44ULL;   // "WORLD"
constexpr std::uint64_t kActionStream = 0x414354494fULL;  // "ACTIO"

const QRow kZeroRow{};

}  // namespace

// ---- StateKey ----

StateKey::StateKey(std::span<const int> components) {
    if (components.size() > kMaxComponents) throw std::invalid_argument("StateKey: too many components");
    for (std::size_t i = 0; i < components.size(); ++i) {
        if (components[i] < std::numeric_limits<std::int16_t>::min() ||
            components[i] > std::numeric_limits<std::int16_t>::max())
            throw std::invalid_argument("StateKey: component out of range");
        values_[i] = static_cast<std::int16_t>(components[i]);
    }
    size_ = components.size();
}

bool operator<(const StateKey& a, const StateKey& b) {
    return std::lexicographical_compare(a.values_.begin(), a.values_.begin() + a.size_, b.values_.begin(),
                                        b.values_.begin() + b.size_);
}

std::size_t StateKey::Hash::operator()(const StateKey& k) const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ k.size_;
    for (std::size_t i = 0; i < k.size_; ++i) {
        h ^= static_cast<std::uint16_t>(k.values_[i]);
        h *= 0x100000001b3ULL;
    }
    return static_cast<std::size_t>(h ^ (h >> 29));
}

StateKey encode_state(int speed, const ScannerReading& scan, const NeighborSpeeds* neighbors, bool v2v) {
    std::array<int, StateKey::kMaxComponents> c{};
    std::size_t n = 0;
    c[n++] = speed;
    for (int d : scan.dist) c[n++] = d;
    if (v2v) {
        for (int d = 0; d < kScanDirections; ++d) {
            const auto& v = neighbors != nullptr ? (*neighbors)[static_cast<std::size_t>(d)] : std::nullopt;
            c[n++] = v.value_or(kNoNeighbor);
        }
    }
    return StateKey(std::span<const int>(c.data(), n));
}

StateKey observe(const WorldState& world, const RoadConfig& cfg, bool v2v) {
    const ScannerReading s = scan(world, cfg);
    if (!v2v) return encode_state(world.agent.speed, s, nullptr, false);
    const NeighborSpeeds nb = neighbor_speeds(world, cfg);
    return encode_state(world.agent.speed, s, &nb, true);
}

StateKey encode_full_state(const VehicleState& agent) { return StateKey{agent.lane, agent.pos, agent.speed}; }

// ---- QTable ----

const QRow& QTable::row(const StateKey& s) const {
    const auto it = entries_.find(s);
    return it == entries_.end() ? kZeroRow : it->second;
}

double QTable::max_value(const StateKey& s) const {
    const auto& r = row(s);
    return *std::max_element(r.begin(), r.end());
}

std::vector<std::pair<StateKey, QRow>> QTable::sorted_entries() const {
    std::vector<std::pair<StateKey, QRow>> out(entries_.begin(), entries_.end());
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

// ---- LearnConfig ----

void LearnConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("learn.alpha must lie in [0, 1]");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("learn.gamma must lie in [0, 1)");
    if (!(epsilon_end >= 0.0 && epsilon_end <= epsilon_start && epsilon_start <= 1.0))
        throw ConfigError("learn.epsilon must satisfy 0 <= epsilon_end <= epsilon_start <= 1");
    if (episodes < 0) throw ConfigError("learn.episodes must be >= 0");
    if (epsilon_decay_episodes < 0) throw ConfigError("learn.epsilon_decay_episodes must be >= 0");
    if (bucket < 1) throw ConfigError("learn.bucket must be >= 1");
}

double LearnConfig::epsilon_at(long episode) const {
    if (epsilon_decay_episodes == 0 || episode >= epsilon_decay_episodes) return epsilon_end;
    const double frac = static_cast<double>(episode) / static_cast<double>(epsilon_decay_episodes);
    return epsilon_start + (epsilon_end - epsilon_start) * frac;
}

// ---- update and control ----

double q_update(QTable& q, const StateKey& s, ActionPair a, double r, const StateKey& s_next, bool terminal,
                double alpha, double gamma) {
    const double future = terminal ? 0.0 : q.max_value(s_next);
    const double sample = r + gamma * future;
    double& entry = q.row_mut(s)[static_cast<std::size_t>(a.index())];
    entry = (1.0 - alpha) * entry + alpha * sample;
    return entry;
}

ActionPair select_action(const QTable& q, const StateKey& s, double epsilon, Rng& rng) {
    const double coin = rng.uniform();
    const double pick = rng.uniform();
    if (coin < epsilon) return ActionPair::from_index(static_cast<int>(pick * kNumActions));

    const auto& r = q.row(s);
    const double best = *std::max_element(r.begin(), r.end());
    std::array<int, kNumActions> ties{};
    int n = 0;
    for (int i = 0; i < kNumActions; ++i)
        if (r[static_cast<std::size_t>(i)] == best) ties[static_cast<std::size_t>(n++)] = i;
    return ActionPair::from_index(ties[static_cast<std::size_t>(pick * n)]);
}

ActionPair greedy_action(const QTable& q, const StateKey& s) {
    const auto& r = q.row(s);
    return ActionPair::from_index(static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin()));
}

namespace {

StateKey observe_as(const WorldState& world, const RoadConfig& cfg, Observation obs) {
    switch (obs) {
        case Observation::Scanner: return observe(world, cfg, false);
        case Observation::ScannerV2V: return observe(world, cfg, true);
        case Observation::FullState: return encode_full_state(world.agent);
    }
    return {};
}

}  // namespace

EpisodeStats run_episode(const RoadConfig& road, const RewardConfig& reward_cfg, QTable& q,
                         const LearnConfig& learn_cfg, Rng& world_rng, Rng& action_rng, const EpisodeOptions& opts) {
    EpisodeStats stats;
    if (road.max_steps <= 0) return stats;
    WorldState world = spawn_world(road, world_rng);
    const double alpha = opts.alpha.value_or(learn_cfg.alpha);
    StateKey s = observe_as(world, road, opts.observation);

    while (stats.steps < road.max_steps) {
        const ActionPair a = opts.learn ? select_action(q, s, opts.epsilon, action_rng) : greedy_action(q, s);
        StepOutcome out = apply_action(world, a, road);
        const double r = reward(out.event, a, out.next.agent.speed, out.next.agent.lane, reward_cfg, road);
        ++stats.steps;
        stats.total_reward += r;

        if (opts.on_step) {
            opts.on_step(TraceStep{stats.steps - 1, world.agent, scan(world, road), a, r, out.event});
        }

        const bool done = is_terminal(out.event) || stats.steps >= road.max_steps;
        const StateKey s_next = observe_as(out.next, road, opts.observation);
        if (opts.learn) q_update(q, s, a, r, s_next, done, alpha, learn_cfg.gamma);

        world = std::move(out.next);
        s = s_next;
        if (is_terminal(out.event)) {
            stats.terminal = out.event;
            break;
        }
    }
    stats.quick = stats.terminal == Event::Goal && stats.steps < kQuickFinishSteps;
    return stats;
}

// ---- training ----

Rng world_rng_for(std::uint64_t seed, long episode) {
    return Rng(derive_seed(seed, kWorldStream, static_cast<std::uint64_t>(episode)));
}

Rng action_rng_for(std::uint64_t seed, long episode) {
    return Rng(derive_seed(seed, kActionStream, static_cast<std::uint64_t>(episode)));
}

MetricsBucket summarize(std::span<const EpisodeStats> episodes, long bucket_index, double epsilon) {
    MetricsBucket b;
    b.bucket_index = bucket_index;
    b.episodes = static_cast<long>(episodes.size());
    b.epsilon = epsilon;
    if (episodes.empty()) return b;
    long goals = 0, crashes = 0, quick = 0, timeouts = 0;
    double goal_time = 0.0;
    for (const auto& e : episodes) {
        switch (e.terminal) {
            case Event::Goal:
                ++goals;
                goal_time += e.steps;
                break;
            case Event::Crash:
            case Event::Bump: ++crashes; break;
            case Event::Alive: ++timeouts; break;
        }
        if (e.quick) ++quick;
    }
    const double n = static_cast<double>(episodes.size());
    if (goals > 0) b.avg_time_to_goal = goal_time / static_cast<double>(goals);
    b.crash_rate = static_cast<double>(crashes) / n;
    b.goal_rate = static_cast<double>(goals) / n;
    b.quick_rate = static_cast<double>(quick) / n;
    b.timeout_rate = static_cast<double>(timeouts) / n;
    return b;
}

TrainResult train(const RoadConfig& road, const RewardConfig& reward_cfg, const LearnConfig& learn_cfg) {
    road.validate();
    reward_cfg.validate();
    learn_cfg.validate();

    TrainResult result;
    result.episodes.reserve(static_cast<std::size_t>(learn_cfg.episodes));
    EpisodeOptions opts;
    opts.learn = true;
    opts.observation = learn_cfg.v2v ? Observation::ScannerV2V : Observation::Scanner;

    for (long e = 0; e < learn_cfg.episodes; ++e) {
        Rng world_rng = world_rng_for(learn_cfg.seed, e);
        Rng action_rng = action_rng_for(learn_cfg.seed, e);
        opts.epsilon = learn_cfg.epsilon_at(e);
        result.episodes.push_back(run_episode(road, reward_cfg, result.table, learn_cfg, world_rng, action_rng, opts));

        const bool bucket_full = (e + 1) % learn_cfg.bucket == 0;
        if (bucket_full || e + 1 == learn_cfg.episodes) {
            const long first = (e / learn_cfg.bucket) * learn_cfg.bucket;
            const auto slice = std::span<const EpisodeStats>(result.episodes).subspan(static_cast<std::size_t>(first));
            result.buckets.push_back(summarize(slice, e / learn_cfg.bucket, opts.epsilon));
        }
    }
    return result;
}

// ---- value iteration ----

ValueIterationResult value_iteration_oracle(const RoadConfig& road, const RewardConfig& reward_cfg, double gamma,
                                            double tolerance, int max_iterations) {
    road.validate();
    if (road.n_obstacles != 0) throw ConfigError("value iteration requires an obstacle-free road");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0, 1)");

    struct Transition {
        std::size_t next;  // index into states, or npos when terminal
        double reward;
    };
    constexpr auto npos = static_cast<std::size_t>(-1);

    const int speeds = road.max_agent_speed + 1;
    const auto index_of = [&](const VehicleState& v) {
        return static_cast<std::size_t>((v.lane * road.length + v.pos) * speeds + v.speed);
    };
    const std::size_t n_states = static_cast<std::size_t>(road.lanes * road.length * speeds);

    std::vector<VehicleState> states(n_states);
    std::vector<Transition> model(n_states * kNumActions);
    for (int lane = 0; lane < road.lanes; ++lane)
        for (int pos = 0; pos < road.length; ++pos)
            for (int speed = 0; speed < speeds; ++speed) {
                const VehicleState v{lane, pos, speed};
                const std::size_t si = index_of(v);
                states[si] = v;
                WorldState w;
                w.agent = v;
                for (int a = 0; a < kNumActions; ++a) {
                    const auto action = ActionPair::from_index(a);
                    const auto out = apply_action(w, action, road);
                    const double r =
                        reward(out.event, action, out.next.agent.speed, out.next.agent.lane, reward_cfg, road);
                    model[si * kNumActions + static_cast<std::size_t>(a)] =
                        Transition{is_terminal(out.event) ? npos : index_of(out.next.agent), r};
                }
            }

    std::vector<double> q(n_states * kNumActions, 0.0), next_q(q.size());
    std::vector<double> v(n_states, 0.0);
    ValueIterationResult res;
    res.residual = std::numeric_limits<double>::infinity();
    while (res.residual >= tolerance && res.iterations < max_iterations) {
        double residual = 0.0;
        for (std::size_t i = 0; i < q.size(); ++i) {
            const auto& t = model[i];
            next_q[i] = t.reward + (t.next == npos ? 0.0 : gamma * v[t.next]);
            residual = std::max(residual, std::abs(next_q[i] - q[i]));
        }
        q.swap(next_q);
        for (std::size_t s = 0; s < n_states; ++s)
            v[s] = *std::max_element(q.begin() + static_cast<long>(s * kNumActions),
                                     q.begin() + static_cast<long>((s + 1) * kNumActions));
        res.residual = residual;
        ++res.iterations;
    }

    for (std::size_t s = 0; s < n_states; ++s) {
        auto& row = res.q.row_mut(encode_full_state(states[s]));
        std::copy_n(q.begin() + static_cast<long>(s * kNumActions), kNumActions, row.begin());
    }
    return res;
}

// ---- file formats ----

std::string format_double(double v) {
    std::array<char, 64> buf{};
    const auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), end);
}

void write_metrics_csv(std::ostream& os, std::span<const MetricsBucket> buckets) {
    os << "bucket,episodes,avg_time_to_goal,crash_rate,quick_rate,timeout_rate,epsilon\n";
    for (const auto& b : buckets) {
        os << b.bucket_index << ',' << b.episodes << ','
           << (b.avg_time_to_goal ? format_double(*b.avg_time_to_goal) : std::string()) << ','
           << format_double(b.crash_rate) << ',' << format_double(b.quick_rate) << ','
           << format_double(b.timeout_rate) << ',' << format_double(b.epsilon) << '\n';
    }
}

std::string qtable_to_json(const QTable& q, bool v2v) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [key, row] : q.sorted_entries())
        entries.push_back({{"key", key.components()}, {"q", std::vector<double>(row.begin(), row.end())}});
    nlohmann::json doc{{"version", 1}, {"v2v", v2v}, {"entries", std::move(entries)}};
    return doc.dump() + "\n";
}

std::pair<QTable, bool> qtable_from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("qtable: invalid JSON: ") + e.what());
    }
    try {
        const int version = doc.at("version").get<int>();
        if (version != 1) throw std::runtime_error("qtable: unsupported version " + std::to_string(version));
        const bool v2v = doc.at("v2v").get<bool>();
        const std::size_t key_len = v2v ? 1 + 2 * kScanDirections : 1 + kScanDirections;
        QTable q;
        for (const auto& e : doc.at("entries")) {
            const auto key = e.at("key").get<std::vector<int>>();
            const auto vals = e.at("q").get<std::vector<double>>();
            if (key.size() != key_len) throw std::runtime_error("qtable: key has wrong length");
            if (vals.size() != kNumActions) throw std::runtime_error("qtable: entry must hold 9 values");
            QRow& row = q.row_mut(StateKey(key));
            for (std::size_t i = 0; i < vals.size(); ++i) {
                if (!std::isfinite(vals[i])) throw std::runtime_error("qtable: non-finite value");
                row[i] = vals[i];
            }
        }
        return {std::move(q), v2v};
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("qtable: malformed document: ") + e.what());
    }
}

}  // namespace cavlab
