#pragma once

// Single-layer LSTM with a linear read-out, trained with full backpropagation
// through time and Adam. Everything is float64.
//
// Cell, per time step t with input x_t:
//   a   = W x_t + U h_{t-1} + b            (4H pre-activations, gate order i f g o)
//   i,f,o = sigmoid(a_i, a_f, a_o);  g = tanh(a_g)
//   c_t = f * c_{t-1} + i * g
//   h_t = o * tanh(c_t)
//   y_t = Wy h_t + by

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cavlab::rnn {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, long epoch) : std::runtime_error(what), epoch_(epoch) {}
    /// Epoch at which training failed, or -1 outside an epoch loop.
    long epoch() const { return epoch_; }

private:
    long epoch_;
};

/// Dense row-major matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

struct ModelConfig {
    std::size_t input_dim = 1;
    std::size_t hidden_dim = 32;
    std::size_t output_dim = 1;
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Trainable parameters. Also used to hold gradients and Adam moments.
struct Params {
    std::vector<double> W;   // 4H x D
    std::vector<double> U;   // 4H x H
    std::vector<double> b;   // 4H
    std::vector<double> Wy;  // O x H
    std::vector<double> by;  // O

    static Params zeros(const ModelConfig& cfg);

    /// Blocks in fixed order W, U, b, Wy, by.
    std::vector<std::span<double>> blocks();
    std::vector<std::span<const double>> blocks() const;
    std::size_t size() const { return W.size() + U.size() + b.size() + Wy.size() + by.size(); }

    friend bool operator==(const Params&, const Params&) = default;
};

/// 4H(D + H + 1) + O(H + 1).
std::size_t parameter_count(const ModelConfig& cfg);

struct SeqModel {
    ModelConfig config;
    Params params;

    /// Uniform(-k, k) with k = 1/sqrt(H) from config.seed; forget-gate bias
    /// shifted by +1.
    static SeqModel initialized(const ModelConfig& cfg);
    static SeqModel zeros(const ModelConfig& cfg);

    friend bool operator==(const SeqModel&, const SeqModel&) = default;
};

struct ForwardCache {
    std::size_t steps = 0;
    std::size_t input_dim = 0, hidden_dim = 0, output_dim = 0;
    std::uint64_t params_fingerprint = 0;
    Matrix x;       // T x D
    Matrix gates;   // T x 4H, post-activation (i f g o)
    Matrix c;       // T x H
    Matrix h;       // T x H
    Matrix tanh_c;  // T x H
    Matrix y;       // T x O
};

struct ForwardResult {
    Matrix outputs;  // T x O
    ForwardCache cache;
};

ForwardResult forward(const SeqModel& model, const Matrix& sequence);
/// Outputs only.
Matrix predict(const SeqModel& model, const Matrix& sequence);

double mse_loss(const Matrix& pred, const Matrix& target);

/// Exact gradient of mse_loss(forward(model, x).outputs, target) with respect
/// to every parameter. Throws ShapeError when `cache` was produced by a
/// different model (or the model changed since) or target has the wrong shape.
Params backward(const SeqModel& model, const ForwardCache& cache, const Matrix& target);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig hyper;
    Params m;
    Params v;
    long step = 0;

    static AdamState for_model(const SeqModel& model, AdamConfig hyper = {});
};

/// One bias-corrected Adam update. Throws TrainingError on a non-finite
/// gradient, leaving model and state untouched.
void adam_step(SeqModel& model, const Params& grads, AdamState& state);

struct Sample {
    Matrix input;   // T x D
    Matrix target;  // T x O
};

struct LossHistory {
    std::vector<double> train_mse;
    std::vector<double> validation_mse;
};

struct FitConfig {
    long epochs = 200;
    /// Stop after this many epochs without validation improvement; 0 = never.
    long patience = 0;
    std::uint64_t seed = 0;
    AdamConfig adam;
    /// Called after every epoch with (epoch, train_mse, validation_mse).
    std::function<void(long, double, double)> on_epoch;
};

struct FitResult {
    SeqModel model;  // best-validation parameters
    LossHistory history;
    long best_epoch = -1;
};

/// Mean squared error over all elements of all samples.
double dataset_mse(const SeqModel& model, std::span<const Sample> samples);

/// One Adam step per sequence, sequences shuffled per epoch from cfg.seed.
/// With an empty validation set the training loss selects the best model.
FitResult fit(const SeqModel& model, std::span<const Sample> train, std::span<const Sample> validation,
              const FitConfig& cfg);

}  // namespace cavlab::rnn
