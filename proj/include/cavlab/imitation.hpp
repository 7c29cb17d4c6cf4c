#pragma once

// Imitation-learning pipeline: FCD log -> ego trajectories -> positive
// filter -> fixed-width feature sequences -> LSTM policy -> evaluation.
//
// A policy predicts, at every step of a trajectory, the ego's speed and
// heading at the following step from what it sees now.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cavlab/fcd.hpp"
#include "cavlab/rnn.hpp"

namespace cavlab::imitation {

using fcd::Snapshot;
using fcd::Timestep;

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrajectoryStep {
    double time = 0.0;
    Snapshot ego;
    std::vector<Snapshot> neighbors;  // all other vehicles present at this step
};

struct Trajectory {
    std::string ego_id;
    std::vector<TrajectoryStep> steps;

    std::size_t length() const { return steps.size(); }
};

/// Which vehicles count as egos. Both rules apply when both are set; an empty
/// selector accepts every vehicle.
struct EgoSelector {
    std::optional<std::string> id_pattern;   // ECMAScript regex, full match
    std::optional<std::string> entry_lane;   // lane prefix at first appearance
};

/// Closed time interval; unset bounds are open.
struct TimeWindow {
    std::optional<double> begin;
    std::optional<double> end;
};

/// One trajectory per maximal run of consecutive timesteps (within the
/// window) in which a selected vehicle is present. Trajectories are ordered by
/// start time, then id. Throws DataError on an invalid id pattern.
std::vector<Trajectory> extract_ego_sequences(std::span<const Timestep> timesteps, const EgoSelector& selector,
                                              const TimeWindow& window = {});

struct MergeZone {
    double x_min = 0.0;
    double x_max = 1e9;
    std::string lane_prefix = "main_";
};

struct FilterConfig {
    double d_min = 2.0;
    MergeZone merge_zone;
    std::size_t t_min = 10;
    std::size_t t_max = 500;

    /// Throws std::invalid_argument.
    void validate() const;
};

enum class Reason { NearCollision, MergeIncomplete, TooShort, TooLong };

std::string to_string(Reason r);
std::optional<Reason> parse_reason(std::string_view s);

struct Classification {
    bool positive = false;
    std::optional<Reason> reason;  // first failed clause when negative
    double min_distance = 0.0;     // +inf without neighbours
};

/// Positive iff no neighbour ever comes closer than d_min, the ego's last
/// snapshot lies in the merge zone (x_min <= x < x_max, lane starting with the
/// prefix) and t_min <= length <= t_max. Clauses are checked in that order.
Classification classify_positive(const Trajectory& traj, const FilterConfig& cfg);

struct EncoderConfig {
    std::size_t k = 4;
    double v_norm = 30.0;  // m/s
    double d_norm = 50.0;  // m

    void validate() const;
    std::size_t feature_dim() const { return 1 + 2 * k; }
    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

constexpr std::size_t kTargetDim = 2;

struct SequenceSample {
    std::string id;
    rnn::Matrix features;  // T x (1 + 2K)
    rnn::Matrix targets;   // T x 2: next speed / V_norm, next angle / 360
};

/// Feature row for one step: [ego speed, (distance, speed) of the K nearest
/// neighbours ascending by distance, ties by id], padded with (1, 0) and
/// clamped to [0, 1].
std::vector<double> encode_step(const TrajectoryStep& step, const EncoderConfig& enc);

/// Row t holds encode_step(step t) and the targets taken from step t + 1, so a
/// trajectory of n steps yields T = n - 1 rows. Throws DataError when n < 2.
SequenceSample encode_features(const Trajectory& traj, const EncoderConfig& enc);

double normalize_speed(double speed, const EncoderConfig& enc);
double denormalize_speed(double v, const EncoderConfig& enc);
double normalize_angle(double degrees);
double denormalize_angle(double v);

/// JSON lines: {"id", "encoder", "features", "targets"} per sample.
std::string dataset_to_jsonl(std::span<const SequenceSample> samples, const EncoderConfig& enc);

struct Dataset {
    EncoderConfig encoder;
    std::vector<SequenceSample> samples;
};

/// Throws DataError on malformed lines, shape errors or mixed encoders.
Dataset dataset_from_jsonl(std::string_view text);

// ---------------------------------------------------------------------------
// Policy artifact

constexpr int kArtifactVersion = 1;
constexpr std::string_view kArtifactFormat = "cavlab-policy";

struct PolicyArtifact {
    rnn::ModelConfig model;
    EncoderConfig encoder;
    rnn::Params params;

    rnn::SeqModel seq_model() const { return {model, params}; }
    friend bool operator==(const PolicyArtifact&, const PolicyArtifact&) = default;
};

class ArtifactError : public std::runtime_error {
public:
    enum class Kind { Io, Malformed, UnsupportedVersion, Checksum, Shape };

    ArtifactError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

/// Canonical compact JSON document followed by a newline. The checksum is the
/// CRC32 (hex) of the document without its "checksum" member.
std::string serialize_artifact(const PolicyArtifact& a);
PolicyArtifact parse_artifact(std::string_view text);

void save_artifact(const PolicyArtifact& a, const std::string& path);
PolicyArtifact load_artifact(const std::string& path);

// ---------------------------------------------------------------------------
// Training and evaluation

struct TrainConfig {
    double split = 0.8;
    std::uint64_t seed = 0;
    std::size_t hidden_dim = 32;
    long epochs = 200;
    long patience = 0;
    rnn::AdamConfig adam;
    std::function<void(long, double, double)> on_epoch;
};

struct TrainOutcome {
    PolicyArtifact artifact;
    rnn::LossHistory history;
    long best_epoch = -1;
    std::vector<std::string> train_ids;
    std::vector<std::string> validation_ids;
};

/// Seeded split by sequence: round(n * split) training sequences, clamped so
/// both sides are non-empty. Returns (train indices, validation indices).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double split,
                                                                            std::uint64_t seed);

/// Throws DataError("insufficient data") with fewer than two samples.
TrainOutcome train_policy(std::span<const SequenceSample> samples, const EncoderConfig& enc, const TrainConfig& cfg);

struct ProfileRow {
    std::string sequence_id;
    std::size_t t = 0;
    double actual_speed = 0.0, predicted_speed = 0.0;
    double actual_angle = 0.0, predicted_angle = 0.0;
};

struct Evaluation {
    double speed_rmse = 0.0;  // m/s
    double angle_rmse = 0.0;  // degrees, shortest way round the circle
    std::vector<ProfileRow> rows;
};

/// Throws DataError when the sample encoder or shapes do not match the
/// artifact.
Evaluation evaluate_policy(const PolicyArtifact& artifact, std::span<const SequenceSample> samples,
                           const EncoderConfig& samples_encoder);

std::string profile_csv(std::span<const ProfileRow> rows);

}  // namespace cavlab::imitation
