// Acceptance checks. Usage: acceptance [A1 ... A10]; no arguments runs all.
// Prints one PASS/FAIL line per criterion and exits non-zero if any failed.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cavlab/cli.hpp"
#include "cavlab/config.hpp"
#include "cavlab/fcd.hpp"
#include "cavlab/imitation.hpp"
#include "cavlab/qlearn.hpp"
#include "cavlab/rnn.hpp"
#include "cavlab/rsu.hpp"
#include "cavlab/scenario.hpp"

using namespace cavlab;
namespace fs = std::filesystem;

namespace {

struct Result {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("cavlab_acc_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

int quiet_cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    if (code != 0) std::cerr << err.str();
    return code;
}

// ---------------------------------------------------------------------------

Result a1_q_update() {
    struct Case {
        double prior, next_max, r, alpha;
        bool terminal;
        double expected;
    };
    const StateKey s{1, 5, 0, 5, 0, 1, 0, 5}, t{2, 5, 0, 5, 0, 1, 0, 5};
    const Case cases[] = {
        {0.0, 1.0, 0.1, 0.4, false, 0.42},
        {0.7, 3.0, 5.0, 0.0, false, 0.7},
        {1.0, 100.0, -10.0, 0.4, true, -3.4},
    };
    double worst = 0.0;
    for (const auto& c : cases) {
        QTable q;
        q.row_mut(s)[4] = c.prior;
        q.row_mut(t)[0] = c.next_max;
        const double got = q_update(q, s, ActionPair::from_index(4), c.r, t, c.terminal, c.alpha, 0.95);
        worst = std::max(worst, std::abs(got - c.expected));
    }
    return {worst <= 1e-12, "max abs error " + fmt(worst)};
}

Result a2_oracle_equivalence() {
    RoadConfig road;
    road.length = 10;
    road.n_obstacles = 0;
    const RewardConfig rc;
    const double gamma = 0.95;
    const auto vi = value_iteration_oracle(road, rc, gamma);

    // epsilon = 1 Q-learning with 1/n step sizes. Terminal transitions restart
    // from a uniformly drawn state so that every state keeps being visited.
    Rng rng(derive_seed(1, 0x4132));
    const auto random_state = [&] {
        return VehicleState{static_cast<int>(rng.below(2)), static_cast<int>(rng.below(road.length)),
                            static_cast<int>(rng.below(road.max_agent_speed + 1))};
    };
    QTable q;
    std::map<std::pair<StateKey, int>, long> visits;
    WorldState w;
    w.agent = random_state();
    for (long step = 0; step < 500000; ++step) {
        const auto a = ActionPair::from_index(static_cast<int>(rng.below(kNumActions)));
        const auto out = apply_action(w, a, road);
        const double r = reward(out.event, a, out.next.agent.speed, out.next.agent.lane, rc, road);
        const auto s = encode_full_state(w.agent);
        const long n = ++visits[{s, a.index()}];
        q_update(q, s, a, r, encode_full_state(out.next.agent), is_terminal(out.event), 1.0 / static_cast<double>(n),
                 gamma);
        if (is_terminal(out.event)) {
            w = WorldState{};
            w.agent = random_state();
        } else {
            w = out.next;
        }
    }
    double sup = 0.0;
    for (const auto& [key, n] : visits)
        sup = std::max(sup, std::abs(q.value(key.first, ActionPair::from_index(key.second)) -
                                     vi.q.value(key.first, ActionPair::from_index(key.second))));
    return {sup <= 0.05, "sup-norm " + fmt(sup) + " over " + std::to_string(visits.size()) + " visited pairs"};
}

// Mean steps of goal episodes in [begin, end); NaN when none reached the goal.
double mean_time_to_goal(const std::vector<EpisodeStats>& eps, std::size_t begin, std::size_t end) {
    double sum = 0.0;
    long n = 0;
    for (std::size_t i = begin; i < end; ++i)
        if (eps[i].terminal == Event::Goal) {
            sum += eps[i].steps;
            ++n;
        }
    return n > 0 ? sum / static_cast<double>(n) : std::nan("");
}

std::vector<TrainResult> train_seeds(const SimConfig& base, const std::vector<std::uint64_t>& seeds) {
    std::vector<std::future<TrainResult>> jobs;
    for (auto seed : seeds)
        jobs.push_back(std::async(std::launch::async, [&base, seed] {
            LearnConfig lc = base.learn;
            lc.seed = seed;
            return train(base.road, base.reward, lc);
        }));
    std::vector<TrainResult> out;
    for (auto& j : jobs) out.push_back(j.get());
    return out;
}

Result a3_learning_curve() {
    SimConfig cfg;
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    const auto runs = train_seeds(cfg, seeds);
    double first_sum = 0.0, final_sum = 0.0;
    long first_n = 0, final_n = 0;
    std::string per_seed;
    for (const auto& r : runs) {
        const std::size_t n = r.episodes.size();
        for (std::size_t i = 0; i < 5000; ++i)
            if (r.episodes[i].terminal == Event::Goal) first_sum += r.episodes[i].steps, ++first_n;
        for (std::size_t i = n - 5000; i < n; ++i)
            if (r.episodes[i].terminal == Event::Goal) final_sum += r.episodes[i].steps, ++final_n;
        per_seed += " " + fmt(mean_time_to_goal(r.episodes, n - 5000, n), 3);
    }
    const double first = first_n ? first_sum / static_cast<double>(first_n) : std::nan("");
    const double final_mean = final_n ? final_sum / static_cast<double>(final_n) : std::nan("");
    const bool in_band = final_mean >= 17.0 && final_mean <= 33.0;
    const bool improved = std::isfinite(first) && final_mean <= 0.7 * first;
    return {in_band && improved, "final-5000 mean time-to-goal " + fmt(final_mean) + " (per seed:" + per_seed +
                                     "), first-5000 mean " + (first_n ? fmt(first) : "undefined (no goals)") +
                                     "; need final in [17, 33] and <= 70% of first"};
}

Result a4_v2v_trends() {
    SimConfig plain, v2v;
    v2v.learn.v2v = true;
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    auto a = std::async(std::launch::async, [&] { return train_seeds(plain, seeds); });
    const auto with = train_seeds(v2v, seeds);
    const auto without = a.get();
    int crash_ok = 0, quick_ok = 0;
    std::string detail;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        const auto& b0 = without[i].buckets.back();
        const auto& b1 = with[i].buckets.back();
        crash_ok += b1.crash_rate <= b0.crash_rate;
        quick_ok += b1.quick_rate >= b0.quick_rate;
        detail += " seed" + std::to_string(seeds[i]) + " crash " + fmt(b1.crash_rate, 3) + "/" + fmt(b0.crash_rate, 3) +
                  " quick " + fmt(b1.quick_rate, 3) + "/" + fmt(b0.quick_rate, 3) + ";";
    }
    return {crash_ok >= 4 && quick_ok >= 4, "crash<= in " + std::to_string(crash_ok) + "/5, quick>= in " +
                                                std::to_string(quick_ok) + "/5 (v2v/plain:" + detail + ")"};
}

Result a5_gradient_check() {
    Rng rng(derive_seed(5, 0x4135));
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const rnn::ModelConfig mc{1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4), rng.next()};
        auto model = rnn::SeqModel::initialized(mc);
        const std::size_t T = 1 + rng.below(5);
        rnn::Matrix x(T, mc.input_dim), y(T, mc.output_dim);
        for (auto& v : x.data) v = rng.uniform(-1.0, 1.0);
        for (auto& v : y.data) v = rng.uniform(-1.0, 1.0);
        const auto grads = rnn::backward(model, rnn::forward(model, x).cache, y);
        const auto gblocks = grads.blocks();
        auto blocks = model.params.blocks();
        for (std::size_t b = 0; b < blocks.size(); ++b)
            for (std::size_t i = 0; i < blocks[b].size(); ++i) {
                const double keep = blocks[b][i], h = 1e-5;
                blocks[b][i] = keep + h;
                const double up = rnn::mse_loss(rnn::predict(model, x), y);
                blocks[b][i] = keep - h;
                const double down = rnn::mse_loss(rnn::predict(model, x), y);
                blocks[b][i] = keep;
                const double numeric = (up - down) / (2.0 * h), analytic = gblocks[b][i];
                // Gradients below 1e-6 are compared on an absolute scale.
                const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
                worst = std::max(worst, std::abs(numeric - analytic) / denom);
            }
    }
    return {worst < 1e-4, "max relative error " + fmt(worst) + " over 20 instances"};
}

Result a6_memorization() {
    Rng rng(derive_seed(6, 0x4136));
    rnn::Sample s{rnn::Matrix(10, 3), rnn::Matrix(10, 2)};
    for (auto& v : s.input.data) v = rng.uniform(-1.0, 1.0);
    for (auto& v : s.target.data) v = rng.uniform(0.0, 1.0);
    const std::vector<rnn::Sample> one{s};
    rnn::FitConfig fc;
    fc.epochs = 2000;
    fc.adam.lr = 0.01;
    long reached = -1;
    fc.on_epoch = [&](long epoch, double train_mse, double) {
        if (reached < 0 && train_mse < 1e-3) reached = epoch + 1;
    };
    const auto r = rnn::fit(rnn::SeqModel::initialized({3, 16, 2, 6}), one, {}, fc);
    const double mse = rnn::dataset_mse(r.model, one);
    return {mse < 1e-3, "final training MSE " + fmt(mse) + ", below 1e-3 from epoch " + std::to_string(reached)};
}

Result a7_imitation_pipeline() {
    imitation::MergeScenarioConfig mc;
    mc.scenarios = 40;
    mc.seed = 7;
    const auto log = imitation::generate_merge_log(mc);
    const auto parsed = fcd::parse_fcd(fcd::write_fcd(log.timesteps));
    const auto trajs = imitation::extract_ego_sequences(parsed, imitation::merge_ego_selector());
    const imitation::EncoderConfig enc;
    std::vector<imitation::SequenceSample> samples;
    for (const auto& t : trajs)
        if (imitation::classify_positive(t, imitation::merge_filter_config()).positive)
            samples.push_back(imitation::encode_features(t, enc));

    imitation::TrainConfig tc;
    tc.seed = 7;
    tc.epochs = 200;
    tc.adam.lr = 0.005;
    const auto out = imitation::train_policy(samples, enc, tc);
    const std::set<std::string> held_out(out.validation_ids.begin(), out.validation_ids.end());
    std::vector<imitation::SequenceSample> val;
    for (const auto& s : samples)
        if (held_out.count(s.id)) val.push_back(s);
    const auto ev = imitation::evaluate_policy(out.artifact, val, enc);
    const double range = log.speed_max - log.speed_min;
    const double limit = 0.15 * range;
    return {ev.speed_rmse <= limit, std::to_string(samples.size()) + " positive sequences, " +
                                        std::to_string(val.size()) + " held out; speed RMSE " + fmt(ev.speed_rmse) +
                                        " m/s vs limit " + fmt(limit) + " (15% of range " + fmt(range) + " m/s)"};
}

Result a8_parser(const fs::path& data) {
    std::size_t round_trips = 0;
    for (const auto& e : fs::directory_iterator(data / "fcd")) {
        if (e.path().extension() != ".xml") continue;
        const auto first = fcd::parse_fcd(read_file(e.path().string()));
        const auto text = fcd::write_fcd(first);
        if (fcd::parse_fcd(text) != first || fcd::write_fcd(fcd::parse_fcd(text)) != text)
            return {false, "round trip differs for " + e.path().filename().string()};
        ++round_trips;
    }

    std::ifstream expected(data / "fcd" / "malformed" / "expected.csv");
    std::string line;
    std::getline(expected, line);
    std::size_t rejected = 0;
    while (std::getline(expected, line)) {
        std::stringstream ss(line);
        std::string file, l, c;
        std::getline(ss, file, ',');
        std::getline(ss, l, ',');
        std::getline(ss, c, ',');
        try {
            fcd::parse_fcd(read_file((data / "fcd" / "malformed" / file).string()));
            return {false, file + " was accepted"};
        } catch (const fcd::ParseError& err) {
            if (err.line() != std::stoul(l) || err.column() != std::stoul(c))
                return {false, file + ": got " + err.what() + ", expected line " + l + " column " + c};
        }
        ++rejected;
    }
    return {round_trips >= 3 && rejected >= 10, std::to_string(round_trips) + " fixtures round-trip, " +
                                                    std::to_string(rejected) + " malformed fixtures rejected at the expected position"};
}

Result a9_rsu() {
    TempDir dir("rsu");
    imitation::PolicyArtifact art;
    art.model = {9, 8, 2, 9};
    art.params = rnn::SeqModel::initialized(art.model).params;
    rsu::RsuConfig cfg;
    cfg.artifact_path = dir / "policy.json";
    imitation::save_artifact(art, cfg.artifact_path);
    cfg.geofence = {0.0, 500.0, -10.0, 10.0};
    cfg.max_connections = 16;
    rsu::Server server(cfg);
    server.start();
    const rsu::Endpoint ep{"127.0.0.1", server.port()};

    const auto got = rsu::fetch(ep, "probe", 250.0, 0.0);
    if (!got) return {false, "in-zone fetch returned none"};
    Rng rng(9);
    rnn::Matrix x(12, 9);
    for (auto& v : x.data) v = rng.uniform();
    const auto local = rnn::predict(got->artifact.seq_model(), x);
    const auto remote = rnn::predict(server.artifact().seq_model(), x);
    const bool bit_exact = local.data.size() == remote.data.size() &&
                           std::memcmp(local.data.data(), remote.data.data(), local.data.size() * sizeof(double)) == 0;
    const bool none_outside = !rsu::fetch(ep, "probe", 500.0, 0.0).has_value();

    std::vector<std::future<bool>> clients;
    for (int i = 0; i < 32; ++i)
        clients.push_back(std::async(std::launch::async, [&, i] {
            try {
                const auto f = rsu::fetch(ep, "soak" + std::to_string(i), 10.0 * i, 0.0, 20.0);
                return f.has_value() && f->text == server.artifact_text() && f->artifact == server.artifact();
            } catch (const std::exception&) {
                return false;
            }
        }));
    int good = 0;
    for (auto& c : clients) good += c.get();
    server.stop();
    return {bit_exact && none_outside && good == 32,
            std::string("inference ") + (bit_exact ? "bit-exact" : "DIFFERS") + ", out-of-zone " +
                (none_outside ? "none" : "NOT none") + ", soak " + std::to_string(good) + "/32 intact payloads"};
}

Result a10_replay() {
    TempDir dir("replay");
    const auto same_files = [&](const std::string& a, const std::string& b) { return read_file(a) == read_file(b); };

    if (quiet_cli({"sim-train", "--episodes", "3000", "--seed", "11", "--metrics-out", dir / "metrics.csv",
                   "--qtable-out", dir / "q.json"}) != 0)
        return {false, "sim-train failed"};
    fs::create_directories(dir.path / "r1");
    if (quiet_cli({"replay", "--manifest", dir / "metrics.csv.manifest.json", "--out-dir", dir / "r1"}) != 0)
        return {false, "sim-train replay failed"};
    const bool sim_ok = same_files(dir / "metrics.csv", dir / "r1/metrics.csv") && same_files(dir / "q.json", dir / "r1/q.json");

    if (quiet_cli({"synth-merge", "--scenarios", "12", "--seed", "3", "--out", dir / "log.xml"}) != 0 ||
        quiet_cli({"ingest", "--xml", dir / "log.xml", "--ego", "s\\d+_ego", "--out", dir / "data.jsonl"}) != 0 ||
        quiet_cli({"imitate-train", "--dataset", dir / "data.jsonl", "--epochs", "15", "--seed", "5", "--artifact-out",
                   dir / "policy.json", "--history-out", dir / "history.csv"}) != 0)
        return {false, "imitation pipeline failed"};
    fs::create_directories(dir.path / "r2");
    if (quiet_cli({"replay", "--manifest", dir / "policy.json.manifest.json", "--out-dir", dir / "r2"}) != 0)
        return {false, "imitate-train replay failed"};
    const bool im_ok = same_files(dir / "policy.json", dir / "r2/policy.json") &&
                       same_files(dir / "history.csv", dir / "r2/history.csv");
    return {sim_ok && im_ok, std::string("sim-train outputs ") + (sim_ok ? "identical" : "DIFFER") +
                                 ", imitate-train outputs " + (im_ok ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path data = CAVLAB_TEST_DATA_DIR;
    const std::vector<std::pair<std::string, std::function<Result()>>> criteria{
        {"A1", a1_q_update},
        {"A2", a2_oracle_equivalence},
        {"A3", a3_learning_curve},
        {"A4", a4_v2v_trends},
        {"A5", a5_gradient_check},
        {"A6", a6_memorization},
        {"A7", a7_imitation_pipeline},
        {"A8", [&] { return a8_parser(data); }},
        {"A9", a9_rsu},
        {"A10", a10_replay},
    };
    std::set<std::string> wanted(argv + 1, argv + argc);
    for (const auto& w : wanted)
        if (std::none_of(criteria.begin(), criteria.end(), [&](const auto& c) { return c.first == w; })) {
            std::cerr << "unknown criterion " << w << "\n";
            return 2;
        }

    int failed = 0;
    for (const auto& [id, check] : criteria) {
        if (!wanted.empty() && !wanted.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Result r;
        try {
            r = check();
        } catch (const std::exception& e) {
            r = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << id << " " << (r.pass ? "PASS" : "FAIL") << " (" << fmt(secs, 3) << " s): " << r.detail
                  << std::endl;
        failed += !r.pass;
    }
    return failed == 0 ? 0 : 1;
}
