#include "cavlab/cli.hpp"

#include <signal.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "cavlab/config.hpp"
#include "cavlab/fcd.hpp"
#include "cavlab/imitation.hpp"
#include "cavlab/qlearn.hpp"
#include "cavlab/rsu.hpp"
#include "cavlab/scenario.hpp"
#include "json.hpp"

namespace cavlab {

using nlohmann::json;
namespace fs = std::filesystem;
namespace im = imitation;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NoResult : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string absolute(const std::string& p) { return p.empty() ? p : fs::absolute(p).lexically_normal().string(); }

std::string manifest_path_for(const std::string& output) { return output + ".manifest.json"; }

json manifest_header(const char* subcommand) {
    return {{"tool", "cavlab"}, {"version", kToolVersion}, {"subcommand", subcommand}};
}

void write_manifest(const std::string& primary_output, json manifest) {
    write_file(manifest_path_for(primary_output), manifest.dump(2) + "\n");
}

// "run.csv" + 7 -> "run.seed7.csv"
std::string per_seed_path(const std::string& path, std::uint64_t seed) {
    fs::path p(path);
    const std::string tag = ".seed" + std::to_string(seed);
    return (p.parent_path() / (p.stem().string() + tag + p.extension().string())).string();
}

std::string opt_string(const json& j, const char* key) { return j.contains(key) ? j.at(key).get<std::string>() : ""; }

// ---------------------------------------------------------------------------
// sim-train

struct SimTrainOpts {
    SimConfig cfg;
    std::vector<std::uint64_t> seeds;
    std::string metrics_out;
    std::string qtable_out;
};

json to_manifest(const SimTrainOpts& o) {
    json m = manifest_header("sim-train");
    m["config"] = o.cfg;
    m["seeds"] = o.seeds;
    m["outputs"] = {{"metrics", o.metrics_out}, {"qtable", o.qtable_out}};
    return m;
}

SimTrainOpts sim_train_from_manifest(const json& m) {
    SimTrainOpts o;
    merge_json(m.at("config"), o.cfg);
    o.seeds = m.at("seeds").get<std::vector<std::uint64_t>>();
    o.metrics_out = opt_string(m.at("outputs"), "metrics");
    o.qtable_out = opt_string(m.at("outputs"), "qtable");
    return o;
}

int run_sim_train(const SimTrainOpts& o, std::ostream& out) {
    o.cfg.road.validate();
    o.cfg.reward.validate();
    o.cfg.learn.validate();
    if (o.seeds.empty()) throw UsageError("no seed given");

    std::vector<TrainResult> results(o.seeds.size());
    std::atomic<std::size_t> next{0};
    std::mutex error_mu;
    std::exception_ptr error;
    auto worker = [&] {
        for (std::size_t i; (i = next++) < o.seeds.size();) {
            try {
                LearnConfig lc = o.cfg.learn;
                lc.seed = o.seeds[i];
                results[i] = train(o.cfg.road, o.cfg.reward, lc);
            } catch (...) {
                std::lock_guard lock(error_mu);
                if (!error) error = std::current_exception();
            }
        }
    };
    const std::size_t n_threads =
        std::min<std::size_t>(o.seeds.size(), std::max(1u, std::thread::hardware_concurrency()));
    std::vector<std::thread> threads;
    for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);

    const bool multi = o.seeds.size() > 1;
    std::string merged = "seed,bucket,episodes,avg_time_to_goal,crash_rate,quick_rate,timeout_rate,epsilon\n";
    for (std::size_t i = 0; i < o.seeds.size(); ++i) {
        const auto seed = o.seeds[i];
        const auto& r = results[i];
        std::ostringstream csv;
        write_metrics_csv(csv, r.buckets);
        if (!o.metrics_out.empty()) {
            const std::string text = csv.str();
            write_file(multi ? per_seed_path(o.metrics_out, seed) : o.metrics_out, text);
            std::istringstream lines(text);
            std::string line;
            std::getline(lines, line);  // header
            while (std::getline(lines, line)) merged += std::to_string(seed) + "," + line + "\n";
        }
        if (!o.qtable_out.empty())
            write_file(multi ? per_seed_path(o.qtable_out, seed) : o.qtable_out,
                       qtable_to_json(r.table, o.cfg.learn.v2v));

        out << "seed " << seed << ": " << r.episodes.size() << " episodes, " << r.table.size() << " states";
        if (!r.buckets.empty()) {
            const auto& b = r.buckets.back();
            out << "; final bucket crash_rate=" << format_double(b.crash_rate)
                << " goal_rate=" << format_double(b.goal_rate) << " avg_time_to_goal="
                << (b.avg_time_to_goal ? format_double(*b.avg_time_to_goal) : std::string("n/a"));
        }
        out << "\n";
    }
    if (multi && !o.metrics_out.empty()) write_file(o.metrics_out, merged);

    const std::string primary = !o.metrics_out.empty() ? o.metrics_out : o.qtable_out;
    if (!primary.empty()) write_manifest(primary, to_manifest(o));
    return 0;
}

// ---------------------------------------------------------------------------
// sim-eval

struct SimEvalOpts {
    std::string qtable;
    SimConfig cfg;
    std::uint64_t seed = 1;
    long runs = 1;
    std::string trace_out;
};

json to_manifest(const SimEvalOpts& o) {
    json m = manifest_header("sim-eval");
    m["inputs"] = {{"qtable", o.qtable}};
    m["config"] = o.cfg;
    m["seed"] = o.seed;
    m["runs"] = o.runs;
    m["outputs"] = {{"trace", o.trace_out}};
    return m;
}

SimEvalOpts sim_eval_from_manifest(const json& m) {
    SimEvalOpts o;
    o.qtable = m.at("inputs").at("qtable").get<std::string>();
    merge_json(m.at("config"), o.cfg);
    o.seed = m.at("seed").get<std::uint64_t>();
    o.runs = m.at("runs").get<long>();
    o.trace_out = opt_string(m.at("outputs"), "trace");
    return o;
}

int run_sim_eval(const SimEvalOpts& o, std::ostream& out) {
    o.cfg.road.validate();
    o.cfg.reward.validate();
    auto [table, v2v] = qtable_from_json(read_file(o.qtable));

    std::string trace = "run,t,lane,pos,speed,scan0,scan1,scan2,scan3,scan4,scan5,scan6,action,reward,event\n";
    long goals = 0, crashes = 0, bumps = 0, timeouts = 0, goal_steps = 0;
    for (long run = 0; run < o.runs; ++run) {
        Rng world = world_rng_for(o.seed, run);
        Rng unused = action_rng_for(o.seed, run);
        EpisodeOptions eo;
        eo.learn = false;
        eo.observation = v2v ? Observation::ScannerV2V : Observation::Scanner;
        eo.on_step = [&](const TraceStep& s) {
            trace += std::to_string(run) + "," + std::to_string(s.t) + "," + std::to_string(s.agent.lane) + "," +
                     std::to_string(s.agent.pos) + "," + std::to_string(s.agent.speed);
            for (int d : s.scan.dist) trace += "," + std::to_string(d);
            trace += "," + to_string(s.action) + "," + format_double(s.reward) + "," + std::string(to_string(s.event)) +
                     "\n";
        };
        const EpisodeStats st = run_episode(o.cfg.road, o.cfg.reward, table, o.cfg.learn, world, unused, eo);
        switch (st.terminal) {
            case Event::Goal:
                ++goals;
                goal_steps += st.steps;
                break;
            case Event::Crash: ++crashes; break;
            case Event::Bump: ++bumps; break;
            case Event::Alive: ++timeouts; break;
        }
    }
    if (!o.trace_out.empty()) {
        write_file(o.trace_out, trace);
        write_manifest(o.trace_out, to_manifest(o));
    }
    out << "runs=" << o.runs << " goal=" << goals << " crash=" << crashes << " bump=" << bumps
        << " timeout=" << timeouts << " avg_time_to_goal="
        << (goals > 0 ? format_double(static_cast<double>(goal_steps) / static_cast<double>(goals)) : "n/a") << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// ingest

json filter_to_json(const im::FilterConfig& f) {
    return {{"d_min", f.d_min},
            {"merge_zone",
             {{"x_min", f.merge_zone.x_min}, {"x_max", f.merge_zone.x_max}, {"lane_prefix", f.merge_zone.lane_prefix}}},
            {"t_min", f.t_min},
            {"t_max", f.t_max}};
}

im::FilterConfig filter_from_json(const json& j) {
    static const std::set<std::string> known = {"d_min", "merge_zone", "t_min", "t_max"};
    if (!j.is_object()) throw ConfigError("filter config: expected an object");
    for (const auto& [k, _] : j.items())
        if (!known.count(k)) throw ConfigError("filter config: unknown field '" + k + "'");
    im::FilterConfig f;
    try {
        if (j.contains("d_min")) f.d_min = j.at("d_min").get<double>();
        if (j.contains("t_min")) f.t_min = j.at("t_min").get<std::size_t>();
        if (j.contains("t_max")) f.t_max = j.at("t_max").get<std::size_t>();
        if (j.contains("merge_zone")) {
            const json& z = j.at("merge_zone");
            for (const auto& [k, _] : z.items())
                if (k != "x_min" && k != "x_max" && k != "lane_prefix")
                    throw ConfigError("filter config: unknown field 'merge_zone." + k + "'");
            if (z.contains("x_min")) f.merge_zone.x_min = z.at("x_min").get<double>();
            if (z.contains("x_max")) f.merge_zone.x_max = z.at("x_max").get<double>();
            if (z.contains("lane_prefix")) f.merge_zone.lane_prefix = z.at("lane_prefix").get<std::string>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("filter config: ") + e.what());
    }
    f.validate();
    return f;
}

json encoder_to_json(const im::EncoderConfig& e) { return {{"k", e.k}, {"v_norm", e.v_norm}, {"d_norm", e.d_norm}}; }

struct IngestOpts {
    std::string xml;
    std::optional<std::string> ego_pattern;
    std::optional<std::string> entry_lane;
    im::TimeWindow window;
    im::FilterConfig filter;
    im::EncoderConfig encoder;
    std::string out;
    std::string report;
};

json to_manifest(const IngestOpts& o) {
    json m = manifest_header("ingest");
    m["inputs"] = {{"xml", o.xml}};
    json sel = json::object();
    if (o.ego_pattern) sel["id_pattern"] = *o.ego_pattern;
    if (o.entry_lane) sel["entry_lane"] = *o.entry_lane;
    m["ego"] = sel;
    json w = json::object();
    if (o.window.begin) w["begin"] = *o.window.begin;
    if (o.window.end) w["end"] = *o.window.end;
    m["window"] = w;
    m["filter"] = filter_to_json(o.filter);
    m["encoder"] = encoder_to_json(o.encoder);
    m["outputs"] = {{"dataset", o.out}, {"report", o.report}};
    return m;
}

IngestOpts ingest_from_manifest(const json& m) {
    IngestOpts o;
    o.xml = m.at("inputs").at("xml").get<std::string>();
    const json& sel = m.at("ego");
    if (sel.contains("id_pattern")) o.ego_pattern = sel.at("id_pattern").get<std::string>();
    if (sel.contains("entry_lane")) o.entry_lane = sel.at("entry_lane").get<std::string>();
    const json& w = m.at("window");
    if (w.contains("begin")) o.window.begin = w.at("begin").get<double>();
    if (w.contains("end")) o.window.end = w.at("end").get<double>();
    o.filter = filter_from_json(m.at("filter"));
    const json& e = m.at("encoder");
    o.encoder = {e.at("k").get<std::size_t>(), e.at("v_norm").get<double>(), e.at("d_norm").get<double>()};
    o.out = m.at("outputs").at("dataset").get<std::string>();
    o.report = opt_string(m.at("outputs"), "report");
    return o;
}

int run_ingest(const IngestOpts& o, std::ostream& out) {
    o.filter.validate();
    o.encoder.validate();
    std::vector<fcd::Timestep> log;
    try {
        log = fcd::parse_fcd(read_file(o.xml));
    } catch (const fcd::ParseError& e) {
        throw std::runtime_error(o.xml + ": " + e.what());
    }
    const auto trajs = im::extract_ego_sequences(log, im::EgoSelector{o.ego_pattern, o.entry_lane}, o.window);

    std::vector<im::SequenceSample> samples;
    std::string report = "ego_id,start_time,steps,reason,min_distance\n";
    std::size_t rejected = 0;
    for (const auto& t : trajs) {
        const auto c = im::classify_positive(t, o.filter);
        std::optional<im::Reason> reason = c.reason;
        if (c.positive && t.length() < 2) reason = im::Reason::TooShort;  // nothing to predict
        if (!reason) {
            samples.push_back(im::encode_features(t, o.encoder));
            continue;
        }
        ++rejected;
        report += t.ego_id + "," + format_double(t.steps.front().time) + "," + std::to_string(t.length()) + "," +
                  im::to_string(*reason) + "," + format_double(c.min_distance) + "\n";
    }
    write_file(o.out, im::dataset_to_jsonl(samples, o.encoder));
    if (!o.report.empty()) write_file(o.report, report);
    write_manifest(o.out, to_manifest(o));
    out << "timesteps=" << log.size() << " trajectories=" << trajs.size() << " positive=" << samples.size()
        << " rejected=" << rejected << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// imitate-train / imitate-eval

struct ImitateTrainOpts {
    std::string dataset;
    im::TrainConfig train;
    std::string artifact_out;
    std::string history_out;
};

json to_manifest(const ImitateTrainOpts& o) {
    json m = manifest_header("imitate-train");
    m["inputs"] = {{"dataset", o.dataset}};
    m["train"] = {{"split", o.train.split},         {"seed", o.train.seed},         {"hidden_dim", o.train.hidden_dim},
                  {"epochs", o.train.epochs},       {"patience", o.train.patience}, {"lr", o.train.adam.lr},
                  {"beta1", o.train.adam.beta1},    {"beta2", o.train.adam.beta2},  {"eps", o.train.adam.eps}};
    m["outputs"] = {{"artifact", o.artifact_out}, {"history", o.history_out}};
    return m;
}

ImitateTrainOpts imitate_train_from_manifest(const json& m) {
    ImitateTrainOpts o;
    o.dataset = m.at("inputs").at("dataset").get<std::string>();
    const json& t = m.at("train");
    o.train.split = t.at("split").get<double>();
    o.train.seed = t.at("seed").get<std::uint64_t>();
    o.train.hidden_dim = t.at("hidden_dim").get<std::size_t>();
    o.train.epochs = t.at("epochs").get<long>();
    o.train.patience = t.at("patience").get<long>();
    o.train.adam.lr = t.at("lr").get<double>();
    o.train.adam.beta1 = t.at("beta1").get<double>();
    o.train.adam.beta2 = t.at("beta2").get<double>();
    o.train.adam.eps = t.at("eps").get<double>();
    o.artifact_out = m.at("outputs").at("artifact").get<std::string>();
    o.history_out = opt_string(m.at("outputs"), "history");
    return o;
}

int run_imitate_train(const ImitateTrainOpts& o, std::ostream& out) {
    const im::Dataset ds = im::dataset_from_jsonl(read_file(o.dataset));
    if (ds.samples.empty()) throw std::runtime_error(o.dataset + ": dataset is empty");
    const auto result = im::train_policy(ds.samples, ds.encoder, o.train);
    im::save_artifact(result.artifact, o.artifact_out);
    if (!o.history_out.empty()) {
        std::string csv = "epoch,train_mse,validation_mse\n";
        for (std::size_t e = 0; e < result.history.train_mse.size(); ++e)
            csv += std::to_string(e) + "," + format_double(result.history.train_mse[e]) + "," +
                   format_double(result.history.validation_mse[e]) + "\n";
        write_file(o.history_out, csv);
    }
    write_manifest(o.artifact_out, to_manifest(o));
    out << "train_sequences=" << result.train_ids.size() << " validation_sequences=" << result.validation_ids.size()
        << " epochs=" << result.history.train_mse.size() << " best_epoch=" << result.best_epoch;
    if (result.best_epoch >= 0)
        out << " validation_mse="
            << format_double(result.history.validation_mse[static_cast<std::size_t>(result.best_epoch)]);
    out << "\n";
    return 0;
}

struct ImitateEvalOpts {
    std::string artifact;
    std::string dataset;
    std::string csv_out;
};

json to_manifest(const ImitateEvalOpts& o) {
    json m = manifest_header("imitate-eval");
    m["inputs"] = {{"artifact", o.artifact}, {"dataset", o.dataset}};
    m["outputs"] = {{"csv", o.csv_out}};
    return m;
}

ImitateEvalOpts imitate_eval_from_manifest(const json& m) {
    return {m.at("inputs").at("artifact").get<std::string>(), m.at("inputs").at("dataset").get<std::string>(),
            opt_string(m.at("outputs"), "csv")};
}

int run_imitate_eval(const ImitateEvalOpts& o, std::ostream& out) {
    const im::PolicyArtifact artifact = im::load_artifact(o.artifact);
    const im::Dataset ds = im::dataset_from_jsonl(read_file(o.dataset));
    const im::EncoderConfig enc = ds.samples.empty() ? artifact.encoder : ds.encoder;
    const auto ev = im::evaluate_policy(artifact, ds.samples, enc);
    if (!o.csv_out.empty()) {
        write_file(o.csv_out, im::profile_csv(ev.rows));
        write_manifest(o.csv_out, to_manifest(o));
    }
    out << "sequences=" << ds.samples.size() << " steps=" << ev.rows.size()
        << " speed_rmse=" << format_double(ev.speed_rmse) << " m/s angle_rmse=" << format_double(ev.angle_rmse)
        << " deg\n";
    return 0;
}

// ---------------------------------------------------------------------------
// synth-merge

struct SynthOpts {
    im::MergeScenarioConfig cfg;
    std::string out;
    std::string labels_out;
};

json to_manifest(const SynthOpts& o) {
    json m = manifest_header("synth-merge");
    m["scenario"] = {{"scenarios", o.cfg.scenarios},
                     {"seed", o.cfg.seed},
                     {"dt", o.cfg.dt},
                     {"accel_noise", o.cfg.accel_noise},
                     {"negative_every", o.cfg.negative_every}};
    m["outputs"] = {{"xml", o.out}, {"labels", o.labels_out}};
    return m;
}

SynthOpts synth_from_manifest(const json& m) {
    SynthOpts o;
    const json& s = m.at("scenario");
    o.cfg.scenarios = s.at("scenarios").get<std::size_t>();
    o.cfg.seed = s.at("seed").get<std::uint64_t>();
    o.cfg.dt = s.at("dt").get<double>();
    o.cfg.accel_noise = s.at("accel_noise").get<double>();
    o.cfg.negative_every = s.at("negative_every").get<std::size_t>();
    o.out = m.at("outputs").at("xml").get<std::string>();
    o.labels_out = opt_string(m.at("outputs"), "labels");
    return o;
}

int run_synth(const SynthOpts& o, std::ostream& out) {
    const auto log = im::generate_merge_log(o.cfg);
    write_file(o.out, fcd::write_fcd(log.timesteps));
    if (!o.labels_out.empty()) {
        std::string csv = "ego_id,expected\n";
        for (const auto& l : log.labels) csv += l.ego_id + "," + (l.expected ? im::to_string(*l.expected) : "positive") + "\n";
        write_file(o.labels_out, csv);
    }
    write_manifest(o.out, to_manifest(o));
    out << "scenarios=" << o.cfg.scenarios << " timesteps=" << log.timesteps.size()
        << " ego_speed_range=" << format_double(log.speed_min) << ".." << format_double(log.speed_max) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// rsu-serve / rsu-fetch

int run_rsu_serve(const std::string& config_path, const std::optional<std::string>& bind, long max_requests,
                  std::ostream& out) {
    rsu::RsuConfig cfg = rsu::load_rsu_config(config_path);
    if (bind) cfg.bind = rsu::parse_endpoint(*bind);

    // Block the shutdown signals before any thread exists so that only the
    // wait below receives them.
    sigset_t sigs, old;
    sigemptyset(&sigs);
    sigaddset(&sigs, SIGINT);
    sigaddset(&sigs, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &sigs, &old);

    int code = 0;
    try {
        rsu::Server server(cfg);
        server.start();
        out << "listening on " << rsu::to_string({cfg.bind.host, server.port()}) << std::endl;
        for (;;) {
            if (max_requests > 0 && server.requests_served() >= static_cast<std::uint64_t>(max_requests)) break;
            timespec ts{0, 100'000'000};
            const int sig = sigtimedwait(&sigs, nullptr, &ts);
            if (sig == SIGINT || sig == SIGTERM) break;
        }
        server.stop();
        out << "served " << server.requests_served() << " request(s)" << std::endl;
    } catch (...) {
        pthread_sigmask(SIG_SETMASK, &old, nullptr);
        throw;
    }
    pthread_sigmask(SIG_SETMASK, &old, nullptr);
    return code;
}

int run_rsu_fetch(const std::string& endpoint, const std::string& id, double x, double y, const std::string& out_path,
                  double timeout_s, std::ostream& out) {
    const auto ep = rsu::parse_endpoint(endpoint);
    const auto fetched = rsu::fetch(ep, id, x, y, timeout_s);
    if (!fetched) throw NoResult("no policy offered at (" + format_double(x) + ", " + format_double(y) + ")");
    write_file(out_path, fetched->text + "\n");
    out << "policy received: input_dim=" << fetched->artifact.model.input_dim
        << " hidden_dim=" << fetched->artifact.model.hidden_dim << " -> " << out_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// replay

std::string rebase(const std::string& path, const std::string& out_dir) {
    if (path.empty() || out_dir.empty()) return path;
    return (fs::path(out_dir) / fs::path(path).filename()).string();
}

int run_replay(const std::string& manifest_path, const std::string& out_dir, std::ostream& out) {
    json m;
    try {
        m = json::parse(read_file(manifest_path));
    } catch (const json::parse_error& e) {
        throw std::runtime_error(manifest_path + ": " + e.what());
    }
    if (!out_dir.empty()) fs::create_directories(out_dir);
    const std::string sub = m.at("subcommand").get<std::string>();
    try {
        if (sub == "sim-train") {
            auto o = sim_train_from_manifest(m);
            o.metrics_out = rebase(o.metrics_out, out_dir);
            o.qtable_out = rebase(o.qtable_out, out_dir);
            return run_sim_train(o, out);
        }
        if (sub == "sim-eval") {
            auto o = sim_eval_from_manifest(m);
            o.trace_out = rebase(o.trace_out, out_dir);
            return run_sim_eval(o, out);
        }
        if (sub == "ingest") {
            auto o = ingest_from_manifest(m);
            o.out = rebase(o.out, out_dir);
            o.report = rebase(o.report, out_dir);
            return run_ingest(o, out);
        }
        if (sub == "imitate-train") {
            auto o = imitate_train_from_manifest(m);
            o.artifact_out = rebase(o.artifact_out, out_dir);
            o.history_out = rebase(o.history_out, out_dir);
            return run_imitate_train(o, out);
        }
        if (sub == "imitate-eval") {
            auto o = imitate_eval_from_manifest(m);
            o.csv_out = rebase(o.csv_out, out_dir);
            return run_imitate_eval(o, out);
        }
        if (sub == "synth-merge") {
            auto o = synth_from_manifest(m);
            o.out = rebase(o.out, out_dir);
            o.labels_out = rebase(o.labels_out, out_dir);
            return run_synth(o, out);
        }
    } catch (const json::exception& e) {
        throw std::runtime_error(manifest_path + ": malformed manifest: " + e.what());
    }
    throw std::runtime_error(manifest_path + ": cannot replay subcommand '" + sub + "'");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Driving-policy learning lab: Q-learning on a two-lane road and imitation of merge manoeuvres.",
                 "cavlab"};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);
    std::function<int()> action;

    // sim-train
    auto* st = app.add_subcommand("sim-train", "Train a tabular Q-learning agent");
    std::string st_config, st_metrics, st_qtable;
    long st_episodes = 0;
    bool st_v2v = false;
    std::uint64_t st_seed = 1;
    std::vector<std::uint64_t> st_seeds;
    st->add_option("--config", st_config, "JSON config file (road, reward, learn)")->check(CLI::ExistingFile);
    auto* st_ep_opt = st->add_option("--episodes", st_episodes, "Number of training episodes")->check(CLI::PositiveNumber);
    auto* st_v2v_opt = st->add_flag("--v2v", st_v2v, "Add neighbour speeds (V2V) to the state");
    auto* st_seed_opt = st->add_option("--seed", st_seed, "Random seed");
    auto* st_seeds_opt = st->add_option("--seeds", st_seeds, "Comma-separated seeds, trained in parallel")->delimiter(',');
    st_seed_opt->excludes(st_seeds_opt);
    st->add_option("--metrics-out", st_metrics, "Per-bucket metrics CSV");
    st->add_option("--qtable-out", st_qtable, "Learned Q-table JSON");
    st->callback([&] {
        action = [&] {
            SimTrainOpts o;
            if (!st_config.empty()) o.cfg = load_sim_config(st_config);
            if (st_ep_opt->count()) o.cfg.learn.episodes = st_episodes;
            if (st_v2v_opt->count()) o.cfg.learn.v2v = st_v2v;
            if (st_seeds_opt->count()) o.seeds = st_seeds;
            else o.seeds = {st_seed_opt->count() ? st_seed : o.cfg.learn.seed};
            o.cfg.learn.seed = o.seeds.front();
            o.metrics_out = absolute(st_metrics);
            o.qtable_out = absolute(st_qtable);
            try {
                o.cfg.learn.validate();
            } catch (const ConfigError& e) {
                throw UsageError(e.what());
            }
            return run_sim_train(o, out);
        };
    });

    // sim-eval
    auto* se = app.add_subcommand("sim-eval", "Greedy rollouts of a learned Q-table");
    std::string se_qtable, se_config, se_trace;
    std::uint64_t se_seed = 1;
    long se_runs = 1;
    se->add_option("--qtable", se_qtable, "Q-table JSON")->required();
    se->add_option("--config", se_config, "JSON config file (road, reward)")->check(CLI::ExistingFile);
    se->add_option("--seed", se_seed, "Seed for the evaluation worlds");
    se->add_option("--runs", se_runs, "Number of rollouts")->check(CLI::PositiveNumber);
    se->add_option("--trace-out", se_trace, "Per-step trace CSV");
    se->callback([&] {
        action = [&] {
            SimEvalOpts o;
            o.qtable = absolute(se_qtable);
            if (!se_config.empty()) o.cfg = load_sim_config(se_config);
            o.seed = se_seed;
            o.runs = se_runs;
            o.trace_out = absolute(se_trace);
            return run_sim_eval(o, out);
        };
    });

    // ingest
    auto* in = app.add_subcommand("ingest", "Turn an FCD log into a training dataset");
    std::string in_xml, in_filter, in_out, in_report;
    std::optional<std::string> in_ego, in_entry;
    std::optional<double> in_begin, in_end;
    im::EncoderConfig in_enc;
    in->add_option("--xml", in_xml, "FCD XML log")->required();
    in->add_option("--ego", in_ego, "Ego vehicle id pattern (regex, full match)");
    in->add_option("--entry-lane", in_entry, "Select egos by the lane prefix where they first appear");
    in->add_option("--filter-config", in_filter, "Filter JSON (d_min, merge_zone, t_min, t_max)")
        ->check(CLI::ExistingFile);
    in->add_option("--begin", in_begin, "Ignore timesteps before this time");
    in->add_option("--end", in_end, "Ignore timesteps after this time");
    in->add_option("--neighbors", in_enc.k, "Neighbours per feature row")->check(CLI::PositiveNumber);
    in->add_option("--v-norm", in_enc.v_norm, "Speed normaliser, m/s")->check(CLI::PositiveNumber);
    in->add_option("--d-norm", in_enc.d_norm, "Distance normaliser, m")->check(CLI::PositiveNumber);
    in->add_option("--out", in_out, "Dataset (JSON lines)")->required();
    in->add_option("--report", in_report, "Rejection report CSV (default: <out>.rejections.csv)");
    in->callback([&] {
        action = [&] {
            IngestOpts o;
            o.xml = absolute(in_xml);
            o.ego_pattern = in_ego;
            o.entry_lane = in_entry;
            o.window = {in_begin, in_end};
            if (!in_filter.empty()) o.filter = filter_from_json(json::parse(read_file(in_filter)));
            o.encoder = in_enc;
            o.out = absolute(in_out);
            o.report = absolute(in_report.empty() ? in_out + ".rejections.csv" : in_report);
            return run_ingest(o, out);
        };
    });

    // imitate-train
    auto* it = app.add_subcommand("imitate-train", "Train the sequence policy on a dataset");
    ImitateTrainOpts it_opts;
    it->add_option("--dataset", it_opts.dataset, "Dataset (JSON lines)")->required();
    it->add_option("--epochs", it_opts.train.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
    it->add_option("--seed", it_opts.train.seed, "Seed for initialisation, split and shuffling");
    it->add_option("--hidden", it_opts.train.hidden_dim, "LSTM hidden units")->check(CLI::PositiveNumber);
    it->add_option("--lr", it_opts.train.adam.lr, "Adam learning rate")->check(CLI::PositiveNumber);
    it->add_option("--split", it_opts.train.split, "Training fraction")->check(CLI::Range(0.0, 1.0));
    it->add_option("--patience", it_opts.train.patience, "Early-stopping patience, 0 = off")
        ->check(CLI::NonNegativeNumber);
    it->add_option("--artifact-out", it_opts.artifact_out, "Policy artifact JSON")->required();
    it->add_option("--history-out", it_opts.history_out, "Loss history CSV");
    it->callback([&] {
        action = [&] {
            if (!(it_opts.train.split > 0.0 && it_opts.train.split < 1.0))
                throw UsageError("--split must be strictly between 0 and 1");
            ImitateTrainOpts o = it_opts;
            o.dataset = absolute(o.dataset);
            o.artifact_out = absolute(o.artifact_out);
            o.history_out = absolute(o.history_out);
            return run_imitate_train(o, out);
        };
    });

    // imitate-eval
    auto* ie = app.add_subcommand("imitate-eval", "Evaluate a policy artifact on a dataset");
    ImitateEvalOpts ie_opts;
    ie->add_option("--artifact", ie_opts.artifact, "Policy artifact JSON")->required();
    ie->add_option("--dataset", ie_opts.dataset, "Dataset (JSON lines)")->required();
    ie->add_option("--csv-out", ie_opts.csv_out, "Predicted-vs-actual profile CSV");
    ie->callback([&] {
        action = [&] {
            ImitateEvalOpts o{absolute(ie_opts.artifact), absolute(ie_opts.dataset), absolute(ie_opts.csv_out)};
            return run_imitate_eval(o, out);
        };
    });

    // synth-merge
    auto* sy = app.add_subcommand("synth-merge", "Write a scripted on-ramp merge log (FCD XML)");
    SynthOpts sy_opts;
    sy->add_option("--scenarios", sy_opts.cfg.scenarios, "Number of scenarios")->check(CLI::PositiveNumber);
    sy->add_option("--seed", sy_opts.cfg.seed, "Noise seed");
    sy->add_option("--noise", sy_opts.cfg.accel_noise, "Acceleration noise std, m/s^2")->check(CLI::NonNegativeNumber);
    sy->add_option("--negative-every", sy_opts.cfg.negative_every, "Make every n-th scenario a negative");
    sy->add_option("--out", sy_opts.out, "FCD XML output")->required();
    sy->add_option("--labels-out", sy_opts.labels_out, "Expected label per ego (CSV)");
    sy->callback([&] {
        action = [&] {
            SynthOpts o = sy_opts;
            o.out = absolute(o.out);
            o.labels_out = absolute(o.labels_out);
            return run_synth(o, out);
        };
    });

    // rsu-serve
    auto* rs = app.add_subcommand("rsu-serve", "Serve a policy artifact to vehicles inside a geofence");
    std::string rs_config;
    std::optional<std::string> rs_bind;
    long rs_max = 0;
    rs->add_option("--config", rs_config, "RSU config JSON")->required()->check(CLI::ExistingFile);
    rs->add_option("--bind", rs_bind, "Override the bind endpoint (host:port)");
    rs->add_option("--max-requests", rs_max, "Exit after serving this many requests (0 = run until signalled)")
        ->check(CLI::NonNegativeNumber);
    rs->callback([&] { action = [&] { return run_rsu_serve(rs_config, rs_bind, rs_max, out); }; });

    // rsu-fetch
    auto* rf = app.add_subcommand("rsu-fetch", "Request the policy from an RSU");
    std::string rf_endpoint, rf_id, rf_out;
    double rf_x = 0.0, rf_y = 0.0, rf_timeout = 5.0;
    rf->add_option("--endpoint", rf_endpoint, "host:port")->required();
    rf->add_option("--id", rf_id, "Vehicle id")->required();
    rf->add_option("--x", rf_x, "Vehicle x, m")->required();
    rf->add_option("--y", rf_y, "Vehicle y, m")->required();
    rf->add_option("--out", rf_out, "Where to write the artifact")->required();
    rf->add_option("--timeout", rf_timeout, "Seconds")->check(CLI::PositiveNumber);
    rf->callback([&] {
        action = [&] {
            try {
                rsu::parse_endpoint(rf_endpoint);
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
            return run_rsu_fetch(rf_endpoint, rf_id, rf_x, rf_y, rf_out, rf_timeout, out);
        };
    });

    // replay
    auto* rp = app.add_subcommand("replay", "Re-run a command from its manifest");
    std::string rp_manifest, rp_out_dir;
    rp->add_option("--manifest", rp_manifest, "Manifest JSON written next to an output")->required()
        ->check(CLI::ExistingFile);
    rp->add_option("--out-dir", rp_out_dir, "Write outputs here instead of the recorded paths");
    rp->callback([&] { action = [&] { return run_replay(rp_manifest, rp_out_dir, out); }; });

    std::vector<std::string> argv_store;
    argv_store.reserve(args.size() + 1);
    argv_store.push_back("cavlab");
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& a : argv_store) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        return action ? action() : 2;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const NoResult& e) {
        err << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace cavlab
