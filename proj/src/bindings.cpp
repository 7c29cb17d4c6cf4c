#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cavlab/cli.hpp"
#include "cavlab/config.hpp"
#include "cavlab/fcd.hpp"
#include "cavlab/imitation.hpp"
#include "cavlab/qlearn.hpp"
#include "cavlab/rnn.hpp"
#include "cavlab/rsu.hpp"
#include "cavlab/scenario.hpp"

namespace py = pybind11;
using namespace pybind11::literals;
using namespace cavlab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

rnn::Matrix to_matrix(const Array& a) {
    if (a.ndim() != 2) throw py::value_error("expected a 2-D array");
    rnn::Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), m.data.begin());
    return m;
}

Array to_array(const rnn::Matrix& m) {
    Array a({m.rows, m.cols});
    std::copy(m.data.begin(), m.data.end(), a.mutable_data());
    return a;
}

py::dict bucket_dict(const MetricsBucket& b) {
    return py::dict("bucket"_a = b.bucket_index, "episodes"_a = b.episodes,
                    "avg_time_to_goal"_a = b.avg_time_to_goal, "crash_rate"_a = b.crash_rate,
                    "goal_rate"_a = b.goal_rate, "quick_rate"_a = b.quick_rate, "timeout_rate"_a = b.timeout_rate,
                    "epsilon"_a = b.epsilon);
}

}  // namespace

PYBIND11_MODULE(_cavlab, m) {
    m.doc() = "Two-lane road Q-learning, sequence imitation and RSU policy service";
    m.attr("__version__") = kToolVersion;

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<fcd::ParseError>(m, "ParseError", PyExc_ValueError);
    py::register_exception<imitation::DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<imitation::ArtifactError>(m, "ArtifactError", PyExc_ValueError);
    py::register_exception<rsu::FetchError>(m, "FetchError", PyExc_RuntimeError);

    // ---- world ----

    py::class_<RoadConfig>(m, "RoadConfig")
        .def(py::init<>())
        .def_readwrite("length", &RoadConfig::length)
        .def_readwrite("lanes", &RoadConfig::lanes)
        .def_readwrite("lane_speed_limit", &RoadConfig::lane_speed_limit)
        .def_readwrite("max_agent_speed", &RoadConfig::max_agent_speed)
        .def_readwrite("scan_range", &RoadConfig::scan_range)
        .def_readwrite("n_obstacles", &RoadConfig::n_obstacles)
        .def_readwrite("max_steps", &RoadConfig::max_steps)
        .def("validate", &RoadConfig::validate);

    py::class_<RewardConfig>(m, "RewardConfig")
        .def(py::init<>())
        .def_readwrite("alive_or_goal", &RewardConfig::alive_or_goal)
        .def_readwrite("shift_penalty", &RewardConfig::shift_penalty)
        .def_readwrite("crash_or_bump", &RewardConfig::crash_or_bump)
        .def_readwrite("speed_bonus_divisor", &RewardConfig::speed_bonus_divisor)
        .def_readwrite("overspeed_factor", &RewardConfig::overspeed_factor)
        .def_readwrite("speed_limit", &RewardConfig::speed_limit);

    py::class_<LearnConfig>(m, "LearnConfig")
        .def(py::init<>())
        .def_readwrite("alpha", &LearnConfig::alpha)
        .def_readwrite("gamma", &LearnConfig::gamma)
        .def_readwrite("episodes", &LearnConfig::episodes)
        .def_readwrite("epsilon_start", &LearnConfig::epsilon_start)
        .def_readwrite("epsilon_end", &LearnConfig::epsilon_end)
        .def_readwrite("epsilon_decay_episodes", &LearnConfig::epsilon_decay_episodes)
        .def_readwrite("seed", &LearnConfig::seed)
        .def_readwrite("v2v", &LearnConfig::v2v)
        .def_readwrite("bucket", &LearnConfig::bucket)
        .def("epsilon_at", &LearnConfig::epsilon_at);

    py::class_<SimConfig>(m, "SimConfig")
        .def(py::init<>())
        .def_readwrite("road", &SimConfig::road)
        .def_readwrite("reward", &SimConfig::reward)
        .def_readwrite("learn", &SimConfig::learn);
    m.def("load_sim_config", &load_sim_config, "path"_a);

    py::class_<VehicleState>(m, "VehicleState")
        .def(py::init<int, int, int>(), "lane"_a = 0, "pos"_a = 0, "speed"_a = 0)
        .def_readwrite("lane", &VehicleState::lane)
        .def_readwrite("pos", &VehicleState::pos)
        .def_readwrite("speed", &VehicleState::speed)
        .def(py::self == py::self)
        .def("__repr__", [](const VehicleState& v) {
            return "VehicleState(lane=" + std::to_string(v.lane) + ", pos=" + std::to_string(v.pos) +
                   ", speed=" + std::to_string(v.speed) + ")";
        });

    py::class_<WorldState>(m, "WorldState")
        .def(py::init<>())
        .def_readwrite("agent", &WorldState::agent)
        .def_readwrite("obstacles", &WorldState::obstacles)
        .def_readwrite("step", &WorldState::step)
        .def(py::self == py::self);

    py::enum_<Event>(m, "Event")
        .value("Alive", Event::Alive)
        .value("Goal", Event::Goal)
        .value("Crash", Event::Crash)
        .value("Bump", Event::Bump);

    py::class_<ActionPair>(m, "ActionPair")
        .def_static("from_index", &ActionPair::from_index, "index"_a)
        .def_static("parse", [](const std::string& s) {
            const auto a = parse_action(s);
            if (!a) throw py::value_error("unknown action '" + s + "'");
            return *a;
        })
        .def_property_readonly("index", &ActionPair::index)
        .def(py::self == py::self)
        .def("__str__", [](ActionPair a) { return to_string(a); })
        .def("__repr__", [](ActionPair a) { return "ActionPair('" + to_string(a) + "')"; });

    m.def(
        "spawn_world", [](const RoadConfig& cfg, std::uint64_t seed) {
            Rng rng(seed);
            return spawn_world(cfg, rng);
        },
        "cfg"_a, "seed"_a);
    m.def(
        "scan", [](const WorldState& w, const RoadConfig& cfg) { return scan(w, cfg).dist; }, "world"_a, "cfg"_a);
    m.def(
        "apply_action",
        [](const WorldState& w, ActionPair a, const RoadConfig& cfg) {
            auto out = apply_action(w, a, cfg);
            std::vector<std::pair<int, int>> cells;
            for (const auto& c : out.traversed) cells.emplace_back(c.lane, c.pos);
            return py::make_tuple(out.next, out.event, cells);
        },
        "world"_a, "action"_a, "cfg"_a);
    m.def("reward", &reward, "event"_a, "action"_a, "agent_speed"_a, "agent_lane"_a, "reward_cfg"_a, "road"_a);

    // ---- qlearn ----

    py::class_<QTable>(m, "QTable")
        .def(py::init<>())
        .def("__len__", &QTable::size)
        .def("value", [](const QTable& q, const std::vector<int>& s, ActionPair a) { return q.value(StateKey(s), a); })
        .def("row", [](const QTable& q, const std::vector<int>& s) { return q.row(StateKey(s)); })
        .def("max_value", [](const QTable& q, const std::vector<int>& s) { return q.max_value(StateKey(s)); })
        .def("set", [](QTable& q, const std::vector<int>& s, ActionPair a,
                       double v) { q.row_mut(StateKey(s))[static_cast<std::size_t>(a.index())] = v; })
        .def("states", [](const QTable& q) {
            std::vector<std::vector<int>> keys;
            for (const auto& [k, row] : q.sorted_entries()) keys.push_back(k.components());
            return keys;
        })
        .def("to_json", &qtable_to_json, "v2v"_a = false)
        .def_static("from_json", [](const std::string& text) { return qtable_from_json(text).first; });

    m.def(
        "q_update",
        [](QTable& q, const std::vector<int>& s, ActionPair a, double r, const std::vector<int>& s_next, bool terminal,
           double alpha, double gamma) { return q_update(q, StateKey(s), a, r, StateKey(s_next), terminal, alpha, gamma); },
        "q"_a, "s"_a, "a"_a, "r"_a, "s_next"_a, "terminal"_a, "alpha"_a, "gamma"_a);
    m.def(
        "observe", [](const WorldState& w, const RoadConfig& cfg, bool v2v) { return observe(w, cfg, v2v).components(); },
        "world"_a, "cfg"_a, "v2v"_a = false);
    m.def(
        "train",
        [](const RoadConfig& road, const RewardConfig& rc, const LearnConfig& lc) {
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = train(road, rc, lc);
            }
            py::list buckets;
            for (const auto& b : r.buckets) buckets.append(bucket_dict(b));
            return py::make_tuple(std::move(r.table), buckets);
        },
        "road"_a, "reward_cfg"_a, "learn_cfg"_a, "Returns (table, buckets).");
    m.def(
        "value_iteration",
        [](const RoadConfig& road, const RewardConfig& rc, double gamma) {
            auto vi = value_iteration_oracle(road, rc, gamma);
            return py::make_tuple(std::move(vi.q), vi.residual, vi.iterations);
        },
        "road"_a, "reward_cfg"_a, "gamma"_a, "Returns (table keyed by (lane, pos, speed), residual, iterations).");

    // ---- rnn ----

    py::class_<rnn::ModelConfig>(m, "ModelConfig")
        .def(py::init([](std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed) {
                 return rnn::ModelConfig{in, hidden, out, seed};
             }),
             "input_dim"_a, "hidden_dim"_a = 32, "output_dim"_a = 1, "seed"_a = 0)
        .def_readwrite("input_dim", &rnn::ModelConfig::input_dim)
        .def_readwrite("hidden_dim", &rnn::ModelConfig::hidden_dim)
        .def_readwrite("output_dim", &rnn::ModelConfig::output_dim)
        .def_readwrite("seed", &rnn::ModelConfig::seed);

    py::class_<rnn::SeqModel>(m, "SeqModel")
        .def_static("initialized", &rnn::SeqModel::initialized, "cfg"_a)
        .def_readonly("config", &rnn::SeqModel::config)
        .def_property_readonly("parameter_count", [](const rnn::SeqModel& s) { return s.params.size(); })
        .def("predict", [](const rnn::SeqModel& s, const Array& x) { return to_array(rnn::predict(s, to_matrix(x))); })
        .def("loss", [](const rnn::SeqModel& s, const Array& x, const Array& y) {
            return rnn::mse_loss(rnn::predict(s, to_matrix(x)), to_matrix(y));
        })
        .def("gradient", [](const rnn::SeqModel& s, const Array& x, const Array& y) {
            const auto g = rnn::backward(s, rnn::forward(s, to_matrix(x)).cache, to_matrix(y));
            return py::dict("W"_a = g.W, "U"_a = g.U, "b"_a = g.b, "Wy"_a = g.Wy, "by"_a = g.by);
        })
        .def(
            "fit",
            [](const rnn::SeqModel& s, const std::vector<std::pair<Array, Array>>& data, long epochs, double lr,
               std::uint64_t seed) {
                std::vector<rnn::Sample> samples;
                for (const auto& [x, y] : data) samples.push_back({to_matrix(x), to_matrix(y)});
                rnn::FitConfig fc;
                fc.epochs = epochs;
                fc.seed = seed;
                fc.adam.lr = lr;
                py::gil_scoped_release release;
                auto r = rnn::fit(s, samples, {}, fc);
                return std::make_pair(std::move(r.model), std::move(r.history.train_mse));
            },
            "samples"_a, "epochs"_a = 200, "lr"_a = 1e-3, "seed"_a = 0, "Returns (model, training loss per epoch).");

    // ---- fcd / imitation ----

    py::class_<fcd::Snapshot>(m, "Snapshot")
        .def(py::init<>())
        .def_readwrite("vehicle_id", &fcd::Snapshot::vehicle_id)
        .def_readwrite("x", &fcd::Snapshot::x)
        .def_readwrite("y", &fcd::Snapshot::y)
        .def_readwrite("speed", &fcd::Snapshot::speed)
        .def_readwrite("angle", &fcd::Snapshot::angle)
        .def_readwrite("lane", &fcd::Snapshot::lane)
        .def(py::self == py::self);

    py::class_<fcd::Timestep>(m, "Timestep")
        .def(py::init<>())
        .def_readwrite("time", &fcd::Timestep::time)
        .def_readwrite("snapshots", &fcd::Timestep::snapshots)
        .def(py::self == py::self);

    m.def("parse_fcd", &fcd::parse_fcd, "document"_a);
    m.def("write_fcd", &fcd::write_fcd, "timesteps"_a);
    m.def(
        "generate_merge_log",
        [](std::size_t scenarios, std::uint64_t seed, std::size_t negative_every) {
            imitation::MergeScenarioConfig cfg;
            cfg.scenarios = scenarios;
            cfg.seed = seed;
            cfg.negative_every = negative_every;
            auto log = imitation::generate_merge_log(cfg);
            py::list labels;
            for (const auto& l : log.labels)
                labels.append(py::make_tuple(l.ego_id, l.expected ? py::cast(imitation::to_string(*l.expected))
                                                                  : py::none()));
            return py::make_tuple(std::move(log.timesteps), labels);
        },
        "scenarios"_a = 40, "seed"_a = 0, "negative_every"_a = 0, "Returns (timesteps, [(ego_id, reason or None)]).");

    py::class_<imitation::PolicyArtifact>(m, "PolicyArtifact")
        .def_static("parse", &imitation::parse_artifact, "text"_a)
        .def_static("load", &imitation::load_artifact, "path"_a)
        .def("serialize", &imitation::serialize_artifact)
        .def("save", [](const imitation::PolicyArtifact& a, const std::string& path) { imitation::save_artifact(a, path); })
        .def_property_readonly("model", &imitation::PolicyArtifact::seq_model)
        .def_property_readonly("feature_dim", [](const imitation::PolicyArtifact& a) { return a.encoder.feature_dim(); })
        .def("predict", [](const imitation::PolicyArtifact& a, const Array& x) {
            return to_array(rnn::predict(a.seq_model(), to_matrix(x)));
        });
    m.def(
        "random_artifact",
        [](std::size_t hidden, std::uint64_t seed) {
            imitation::PolicyArtifact a;
            a.model = {a.encoder.feature_dim(), hidden, imitation::kTargetDim, seed};
            a.params = rnn::SeqModel::initialized(a.model).params;
            return a;
        },
        "hidden_dim"_a = 32, "seed"_a = 0, "Untrained artifact with default encoder settings.");

    // ---- rsu ----

    py::class_<rsu::Server>(m, "RsuServer")
        .def(py::init([](const std::string& artifact_path, std::array<double, 4> fence, std::size_t max_connections) {
                 rsu::RsuConfig cfg;
                 cfg.artifact_path = artifact_path;
                 cfg.geofence = {fence[0], fence[1], fence[2], fence[3]};
                 cfg.max_connections = max_connections;
                 return std::make_unique<rsu::Server>(cfg);
             }),
             "artifact_path"_a, "geofence"_a, "max_connections"_a = 16,
             "geofence is (x_min, x_max, y_min, y_max); binds 127.0.0.1 on an ephemeral port.")
        .def("start", &rsu::Server::start)
        .def("stop", &rsu::Server::stop, py::call_guard<py::gil_scoped_release>())
        .def_property_readonly("port", &rsu::Server::port)
        .def_property_readonly("requests_served", &rsu::Server::requests_served)
        .def_property_readonly("artifact_text", &rsu::Server::artifact_text);

    m.def(
        "fetch",
        [](const std::string& endpoint, const std::string& vehicle_id, double x, double y,
           double timeout_s) -> std::optional<std::string> {
            const auto ep = rsu::parse_endpoint(endpoint);
            py::gil_scoped_release release;
            auto got = rsu::fetch(ep, vehicle_id, x, y, timeout_s);
            if (!got) return std::nullopt;
            return std::move(got->text);
        },
        "endpoint"_a, "vehicle_id"_a, "x"_a, "y"_a, "timeout_s"_a = 5.0,
        "Verified artifact text, or None outside the geofence.");

    // ---- cli ----

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code;
            {
                py::gil_scoped_release release;
                code = run_cli(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        "args"_a, "Runs the command-line tool in-process. Returns (exit_code, stdout, stderr).");
}
