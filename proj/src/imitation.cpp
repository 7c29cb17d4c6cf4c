#include "cavlab/imitation.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <regex>
#include <sstream>

#include "cavlab/qlearn.hpp"
#include "cavlab/rng.hpp"
#include "json.hpp"

namespace cavlab::imitation {

using nlohmann::json;

namespace {

constexpr std::uint64_t kSplitStream = 0x53504c4954ULL;  // "SPLIT"

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

double distance(const Snapshot& a, const Snapshot& b) { return std::hypot(a.x - b.x, a.y - b.y); }

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

// ---------------------------------------------------------------------------
// Extraction and filtering

std::vector<Trajectory> extract_ego_sequences(std::span<const Timestep> timesteps, const EgoSelector& selector,
                                              const TimeWindow& window) {
    std::optional<std::regex> pattern;
    if (selector.id_pattern) {
        try {
            pattern.emplace(*selector.id_pattern, std::regex::ECMAScript);
        } catch (const std::regex_error& e) {
            throw DataError("invalid ego pattern '" + *selector.id_pattern + "': " + e.what());
        }
    }

    std::vector<const Timestep*> in_window;
    for (const auto& ts : timesteps) {
        if (window.begin && ts.time < *window.begin) continue;
        if (window.end && ts.time > *window.end) continue;
        in_window.push_back(&ts);
    }

    // Selection is decided once per vehicle, at its first appearance in the window.
    std::map<std::string, bool> selected;
    std::map<std::string, Trajectory> open;  // runs still continuing
    std::vector<std::pair<std::size_t, Trajectory>> done;  // (start index, trajectory)
    std::map<std::string, std::size_t> open_start;

    for (std::size_t i = 0; i < in_window.size(); ++i) {
        const Timestep& ts = *in_window[i];
        std::map<std::string, const Snapshot*> present;
        for (const auto& s : ts.snapshots) present.emplace(s.vehicle_id, &s);

        for (auto it = open.begin(); it != open.end();) {
            if (!present.count(it->first)) {
                done.emplace_back(open_start[it->first], std::move(it->second));
                it = open.erase(it);
            } else {
                ++it;
            }
        }

        for (const auto& s : ts.snapshots) {
            auto [sel, inserted] = selected.emplace(s.vehicle_id, false);
            if (inserted) {
                bool ok = true;
                if (pattern) ok = std::regex_match(s.vehicle_id, *pattern);
                if (ok && selector.entry_lane) ok = s.lane && starts_with(*s.lane, *selector.entry_lane);
                sel->second = ok;
            }
            if (!sel->second) continue;

            TrajectoryStep step;
            step.time = ts.time;
            step.ego = s;
            for (const auto& other : ts.snapshots)
                if (other.vehicle_id != s.vehicle_id) step.neighbors.push_back(other);

            auto [run, fresh] = open.try_emplace(s.vehicle_id);
            if (fresh) {
                run->second.ego_id = s.vehicle_id;
                open_start[s.vehicle_id] = i;
            }
            run->second.steps.push_back(std::move(step));
        }
    }
    for (auto& [id, traj] : open) done.emplace_back(open_start[id], std::move(traj));

    std::stable_sort(done.begin(), done.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second.ego_id < b.second.ego_id;
    });
    std::vector<Trajectory> out;
    out.reserve(done.size());
    for (auto& [_, t] : done) out.push_back(std::move(t));
    return out;
}

void FilterConfig::validate() const {
    if (!(d_min > 0.0) || !std::isfinite(d_min)) throw std::invalid_argument("filter: d_min must be > 0");
    if (!(merge_zone.x_min < merge_zone.x_max)) throw std::invalid_argument("filter: merge_zone x_min must be < x_max");
    if (t_min > t_max) throw std::invalid_argument("filter: t_min must be <= t_max");
}

std::string to_string(Reason r) {
    switch (r) {
        case Reason::NearCollision: return "near_collision";
        case Reason::MergeIncomplete: return "merge_incomplete";
        case Reason::TooShort: return "too_short";
        case Reason::TooLong: return "too_long";
    }
    return "?";
}

std::optional<Reason> parse_reason(std::string_view s) {
    for (Reason r : {Reason::NearCollision, Reason::MergeIncomplete, Reason::TooShort, Reason::TooLong})
        if (to_string(r) == s) return r;
    return std::nullopt;
}

Classification classify_positive(const Trajectory& traj, const FilterConfig& cfg) {
    Classification c;
    c.min_distance = std::numeric_limits<double>::infinity();
    for (const auto& step : traj.steps)
        for (const auto& n : step.neighbors) c.min_distance = std::min(c.min_distance, distance(step.ego, n));

    if (c.min_distance < cfg.d_min) {
        c.reason = Reason::NearCollision;
    } else if (traj.steps.empty() || [&] {
                   const Snapshot& last = traj.steps.back().ego;
                   const auto& z = cfg.merge_zone;
                   const bool in_x = z.x_min <= last.x && last.x < z.x_max;
                   const bool in_lane = z.lane_prefix.empty() || (last.lane && starts_with(*last.lane, z.lane_prefix));
                   return !(in_x && in_lane);
               }()) {
        c.reason = Reason::MergeIncomplete;
    } else if (traj.length() < cfg.t_min) {
        c.reason = Reason::TooShort;
    } else if (traj.length() > cfg.t_max) {
        c.reason = Reason::TooLong;
    }
    c.positive = !c.reason.has_value();
    return c;
}

// ---------------------------------------------------------------------------
// Encoding

void EncoderConfig::validate() const {
    if (k == 0) throw std::invalid_argument("encoder: k must be >= 1");
    if (!(v_norm > 0.0) || !std::isfinite(v_norm)) throw std::invalid_argument("encoder: v_norm must be > 0");
    if (!(d_norm > 0.0) || !std::isfinite(d_norm)) throw std::invalid_argument("encoder: d_norm must be > 0");
}

double normalize_speed(double speed, const EncoderConfig& enc) { return speed / enc.v_norm; }
double denormalize_speed(double v, const EncoderConfig& enc) { return v * enc.v_norm; }
double normalize_angle(double degrees) { return degrees / 360.0; }
double denormalize_angle(double v) { return v * 360.0; }

std::vector<double> encode_step(const TrajectoryStep& step, const EncoderConfig& enc) {
    std::vector<std::pair<double, const Snapshot*>> by_distance;
    by_distance.reserve(step.neighbors.size());
    for (const auto& n : step.neighbors) by_distance.emplace_back(distance(step.ego, n), &n);
    std::sort(by_distance.begin(), by_distance.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second->vehicle_id < b.second->vehicle_id;
    });

    std::vector<double> row;
    row.reserve(enc.feature_dim());
    row.push_back(clamp01(normalize_speed(step.ego.speed, enc)));
    for (std::size_t k = 0; k < enc.k; ++k) {
        if (k < by_distance.size()) {
            row.push_back(clamp01(by_distance[k].first / enc.d_norm));
            row.push_back(clamp01(normalize_speed(by_distance[k].second->speed, enc)));
        } else {
            row.push_back(1.0);
            row.push_back(0.0);
        }
    }
    return row;
}

SequenceSample encode_features(const Trajectory& traj, const EncoderConfig& enc) {
    if (traj.length() < 2)
        throw DataError("trajectory '" + traj.ego_id + "' has " + std::to_string(traj.length()) +
                        " step(s); at least 2 are needed");
    const std::size_t T = traj.length() - 1;
    SequenceSample s;
    s.id = traj.ego_id + "@" + format_double(traj.steps.front().time);
    s.features = rnn::Matrix(T, enc.feature_dim());
    s.targets = rnn::Matrix(T, kTargetDim);
    for (std::size_t t = 0; t < T; ++t) {
        const auto row = encode_step(traj.steps[t], enc);
        std::copy(row.begin(), row.end(), s.features.row(t).begin());
        const Snapshot& next = traj.steps[t + 1].ego;
        s.targets(t, 0) = clamp01(normalize_speed(next.speed, enc));
        s.targets(t, 1) = clamp01(normalize_angle(next.angle));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Dataset files

namespace {

json matrix_to_json(const rnn::Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows; ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    return rows;
}

rnn::Matrix matrix_from_json(const json& j, std::size_t cols, const char* what) {
    if (!j.is_array() || j.empty()) throw DataError(std::string(what) + ": expected a non-empty array of rows");
    rnn::Matrix m(j.size(), cols);
    for (std::size_t r = 0; r < j.size(); ++r) {
        const json& row = j[r];
        if (!row.is_array() || row.size() != cols)
            throw DataError(std::string(what) + ": row " + std::to_string(r) + " must have " + std::to_string(cols) +
                            " values");
        for (std::size_t c = 0; c < cols; ++c) {
            if (!row[c].is_number()) throw DataError(std::string(what) + ": non-numeric value");
            m(r, c) = row[c].get<double>();
            if (!std::isfinite(m(r, c))) throw DataError(std::string(what) + ": non-finite value");
        }
    }
    return m;
}

json encoder_to_json(const EncoderConfig& e) { return {{"k", e.k}, {"v_norm", e.v_norm}, {"d_norm", e.d_norm}}; }

EncoderConfig encoder_from_json(const json& j) {
    EncoderConfig e;
    e.k = j.at("k").get<std::size_t>();
    e.v_norm = j.at("v_norm").get<double>();
    e.d_norm = j.at("d_norm").get<double>();
    e.validate();
    return e;
}

}  // namespace

std::string dataset_to_jsonl(std::span<const SequenceSample> samples, const EncoderConfig& enc) {
    std::string out;
    for (const auto& s : samples) {
        json line = {{"id", s.id},
                     {"encoder", encoder_to_json(enc)},
                     {"features", matrix_to_json(s.features)},
                     {"targets", matrix_to_json(s.targets)}};
        out += line.dump();
        out += '\n';
    }
    return out;
}

Dataset dataset_from_jsonl(std::string_view text) {
    Dataset ds;
    bool have_encoder = false;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        const std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;

        const std::string where = "dataset line " + std::to_string(line_no);
        try {
            const json j = json::parse(line);
            const EncoderConfig enc = encoder_from_json(j.at("encoder"));
            if (!have_encoder) {
                ds.encoder = enc;
                have_encoder = true;
            } else if (!(enc == ds.encoder)) {
                throw DataError(where + ": encoder differs from earlier lines");
            }
            SequenceSample s;
            s.id = j.at("id").get<std::string>();
            s.features = matrix_from_json(j.at("features"), enc.feature_dim(), "features");
            s.targets = matrix_from_json(j.at("targets"), kTargetDim, "targets");
            if (s.features.rows != s.targets.rows) throw DataError("features and targets differ in length");
            ds.samples.push_back(std::move(s));
        } catch (const DataError& e) {
            const std::string msg = e.what();
            throw DataError(starts_with(msg, "dataset line") ? msg : where + ": " + msg);
        } catch (const json::exception& e) {
            throw DataError(where + ": " + e.what());
        } catch (const std::invalid_argument& e) {
            throw DataError(where + ": " + e.what());
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Artifact

namespace {

std::string crc32_hex(std::string_view data) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size()));
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
    return buf;
}

json payload_of(const PolicyArtifact& a) {
    const auto& p = a.params;
    return {{"format", kArtifactFormat},
            {"version", kArtifactVersion},
            {"model",
             {{"input_dim", a.model.input_dim},
              {"hidden_dim", a.model.hidden_dim},
              {"output_dim", a.model.output_dim},
              {"seed", a.model.seed}}},
            {"encoder", encoder_to_json(a.encoder)},
            {"params", {{"W", p.W}, {"U", p.U}, {"b", p.b}, {"Wy", p.Wy}, {"by", p.by}}}};
}

std::vector<double> param_block(const json& params, const char* name, std::size_t expected) {
    const json& j = params.at(name);
    if (!j.is_array()) throw ArtifactError(ArtifactError::Kind::Malformed, std::string("params.") + name + " is not an array");
    if (j.size() != expected)
        throw ArtifactError(ArtifactError::Kind::Shape, std::string("params.") + name + " has " +
                                                            std::to_string(j.size()) + " values, expected " +
                                                            std::to_string(expected));
    std::vector<double> out;
    out.reserve(expected);
    for (const auto& v : j) {
        if (!v.is_number()) throw ArtifactError(ArtifactError::Kind::Malformed, std::string("params.") + name + ": non-numeric value");
        out.push_back(v.get<double>());
    }
    return out;
}

}  // namespace

std::string serialize_artifact(const PolicyArtifact& a) {
    json doc = payload_of(a);
    doc["checksum"] = crc32_hex(doc.dump());
    return doc.dump() + "\n";
}

PolicyArtifact parse_artifact(std::string_view text) {
    using Kind = ArtifactError::Kind;
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ArtifactError(Kind::Malformed, std::string("artifact is truncated or not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ArtifactError(Kind::Malformed, "artifact is not a JSON object");

    try {
        if (doc.value("format", std::string()) != kArtifactFormat)
            throw ArtifactError(Kind::Malformed, "not a policy artifact (format field)");
        const json& version = doc.at("version");
        if (!version.is_number_integer() || version.get<long long>() != kArtifactVersion)
            throw ArtifactError(Kind::UnsupportedVersion, "unsupported artifact version " + version.dump() +
                                                              " (this build reads version " +
                                                              std::to_string(kArtifactVersion) + ")");
        const std::string stored = doc.at("checksum").get<std::string>();
        json payload = doc;
        payload.erase("checksum");
        const std::string actual = crc32_hex(payload.dump());
        if (stored != actual)
            throw ArtifactError(Kind::Checksum, "artifact checksum mismatch (stored " + stored + ", computed " + actual + ")");

        PolicyArtifact a;
        const json& m = doc.at("model");
        a.model.input_dim = m.at("input_dim").get<std::size_t>();
        a.model.hidden_dim = m.at("hidden_dim").get<std::size_t>();
        a.model.output_dim = m.at("output_dim").get<std::size_t>();
        a.model.seed = m.at("seed").get<std::uint64_t>();
        try {
            a.model.validate();
            a.encoder = encoder_from_json(doc.at("encoder"));
        } catch (const std::invalid_argument& e) {
            throw ArtifactError(Kind::Shape, e.what());
        }
        if (a.model.input_dim != a.encoder.feature_dim() || a.model.output_dim != kTargetDim)
            throw ArtifactError(Kind::Shape, "model dimensions do not match the encoder");

        const std::size_t D = a.model.input_dim, H = a.model.hidden_dim, O = a.model.output_dim;
        const json& p = doc.at("params");
        a.params.W = param_block(p, "W", 4 * H * D);
        a.params.U = param_block(p, "U", 4 * H * H);
        a.params.b = param_block(p, "b", 4 * H);
        a.params.Wy = param_block(p, "Wy", O * H);
        a.params.by = param_block(p, "by", O);
        return a;
    } catch (const json::exception& e) {
        throw ArtifactError(Kind::Malformed, std::string("malformed artifact: ") + e.what());
    }
}

void save_artifact(const PolicyArtifact& a, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError(ArtifactError::Kind::Io, "cannot write " + path);
    out << serialize_artifact(a);
    if (!out) throw ArtifactError(ArtifactError::Kind::Io, "write failed: " + path);
}

PolicyArtifact load_artifact(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError(ArtifactError::Kind::Io, "cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_artifact(ss.str());
}

// ---------------------------------------------------------------------------
// Training and evaluation

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double split,
                                                                            std::uint64_t seed) {
    if (!(split > 0.0 && split < 1.0)) throw std::invalid_argument("split ratio must be in (0, 1)");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(derive_seed(seed, kSplitStream));
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);

    std::size_t n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * split));
    if (n >= 2) n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    else n_train = n;
    std::vector<std::size_t> train(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> val(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    return {train, val};
}

TrainOutcome train_policy(std::span<const SequenceSample> samples, const EncoderConfig& enc, const TrainConfig& cfg) {
    if (samples.size() < 2) throw DataError("insufficient data: need at least 2 sequences, got " +
                                            std::to_string(samples.size()));
    enc.validate();
    for (const auto& s : samples) {
        if (s.features.cols != enc.feature_dim() || s.targets.cols != kTargetDim || s.features.rows != s.targets.rows ||
            s.features.rows == 0)
            throw DataError("sample '" + s.id + "' does not match the encoder shape");
    }

    const auto [train_idx, val_idx] = split_indices(samples.size(), cfg.split, cfg.seed);
    std::vector<rnn::Sample> train, val;
    TrainOutcome out;
    for (auto i : train_idx) {
        train.push_back({samples[i].features, samples[i].targets});
        out.train_ids.push_back(samples[i].id);
    }
    for (auto i : val_idx) {
        val.push_back({samples[i].features, samples[i].targets});
        out.validation_ids.push_back(samples[i].id);
    }

    rnn::ModelConfig mc;
    mc.input_dim = enc.feature_dim();
    mc.hidden_dim = cfg.hidden_dim;
    mc.output_dim = kTargetDim;
    mc.seed = cfg.seed;
    mc.validate();

    rnn::FitConfig fc;
    fc.epochs = cfg.epochs;
    fc.patience = cfg.patience;
    fc.seed = cfg.seed;
    fc.adam = cfg.adam;
    fc.on_epoch = cfg.on_epoch;
    auto fit = rnn::fit(rnn::SeqModel::initialized(mc), train, val, fc);

    out.artifact = PolicyArtifact{fit.model.config, enc, std::move(fit.model.params)};
    out.history = std::move(fit.history);
    out.best_epoch = fit.best_epoch;
    return out;
}

Evaluation evaluate_policy(const PolicyArtifact& artifact, std::span<const SequenceSample> samples,
                           const EncoderConfig& samples_encoder) {
    if (!(samples_encoder == artifact.encoder))
        throw DataError("encoder config mismatch: dataset (k=" + std::to_string(samples_encoder.k) + ", v_norm=" +
                        format_double(samples_encoder.v_norm) + ", d_norm=" + format_double(samples_encoder.d_norm) +
                        ") vs artifact (k=" + std::to_string(artifact.encoder.k) + ", v_norm=" +
                        format_double(artifact.encoder.v_norm) + ", d_norm=" + format_double(artifact.encoder.d_norm) +
                        ")");
    const rnn::SeqModel model = artifact.seq_model();
    Evaluation ev;
    double se_speed = 0.0, se_angle = 0.0;
    std::size_t n = 0;
    for (const auto& s : samples) {
        if (s.features.cols != model.config.input_dim || s.targets.cols != model.config.output_dim ||
            s.features.rows != s.targets.rows)
            throw DataError("sample '" + s.id + "' does not match the model dimensions");
        const rnn::Matrix pred = rnn::predict(model, s.features);
        for (std::size_t t = 0; t < s.features.rows; ++t) {
            ProfileRow r;
            r.sequence_id = s.id;
            r.t = t;
            r.actual_speed = denormalize_speed(s.targets(t, 0), artifact.encoder);
            r.predicted_speed = denormalize_speed(pred(t, 0), artifact.encoder);
            r.actual_angle = denormalize_angle(s.targets(t, 1));
            double a = std::fmod(denormalize_angle(pred(t, 1)), 360.0);
            if (a < 0.0) a += 360.0;
            r.predicted_angle = a;

            const double ds = r.predicted_speed - r.actual_speed;
            double da = std::fabs(r.predicted_angle - r.actual_angle);
            da = std::min(da, 360.0 - da);
            se_speed += ds * ds;
            se_angle += da * da;
            ++n;
            ev.rows.push_back(std::move(r));
        }
    }
    if (n > 0) {
        ev.speed_rmse = std::sqrt(se_speed / static_cast<double>(n));
        ev.angle_rmse = std::sqrt(se_angle / static_cast<double>(n));
    }
    return ev;
}

std::string profile_csv(std::span<const ProfileRow> rows) {
    std::string out = "sequence_id,t,actual_speed,predicted_speed,actual_angle,predicted_angle\n";
    for (const auto& r : rows) {
        out += r.sequence_id + "," + std::to_string(r.t) + "," + format_double(r.actual_speed) + "," +
               format_double(r.predicted_speed) + "," + format_double(r.actual_angle) + "," +
               format_double(r.predicted_angle) + "\n";
    }
    return out;
}

}  // namespace cavlab::imitation
