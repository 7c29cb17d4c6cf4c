#include "cavlab/rnn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "cavlab/rng.hpp"

namespace cavlab::rnn {

namespace {

constexpr std::uint64_t kInitStream = 0x494e4954ULL;     // "INIT"
constexpr std::uint64_t kShuffleStream = 0x5348554cULL;  // "SHUL"

double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

std::uint64_t fingerprint(const Params& p) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto block : p.blocks()) {
        h ^= block.size();
        h *= 0x100000001b3ULL;
        for (double v : block) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            h ^= bits;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

void check_finite(const Params& p, const char* what, long epoch) {
    for (auto block : p.blocks())
        for (double v : block)
            if (!std::isfinite(v)) throw TrainingError(std::string("non-finite ") + what, epoch);
}

}  // namespace

void ModelConfig::validate() const {
    if (input_dim < 1 || hidden_dim < 1 || output_dim < 1) throw ShapeError("model dimensions must be >= 1");
}

Params Params::zeros(const ModelConfig& cfg) {
    const std::size_t g = 4 * cfg.hidden_dim;
    Params p;
    p.W.assign(g * cfg.input_dim, 0.0);
    p.U.assign(g * cfg.hidden_dim, 0.0);
    p.b.assign(g, 0.0);
    p.Wy.assign(cfg.output_dim * cfg.hidden_dim, 0.0);
    p.by.assign(cfg.output_dim, 0.0);
    return p;
}

std::vector<std::span<double>> Params::blocks() { return {W, U, b, Wy, by}; }

std::vector<std::span<const double>> Params::blocks() const { return {W, U, b, Wy, by}; }

std::size_t parameter_count(const ModelConfig& cfg) {
    const std::size_t h = cfg.hidden_dim;
    return 4 * h * (cfg.input_dim + h + 1) + cfg.output_dim * (h + 1);
}

SeqModel SeqModel::zeros(const ModelConfig& cfg) {
    cfg.validate();
    return SeqModel{cfg, Params::zeros(cfg)};
}

SeqModel SeqModel::initialized(const ModelConfig& cfg) {
    SeqModel m = zeros(cfg);
    Rng rng(derive_seed(cfg.seed, kInitStream));
    const double k = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
    for (auto block : m.params.blocks())
        for (double& v : block) v = rng.uniform(-k, k);
    for (std::size_t j = 0; j < cfg.hidden_dim; ++j) m.params.b[cfg.hidden_dim + j] += 1.0;
    return m;
}

ForwardResult forward(const SeqModel& model, const Matrix& sequence) {
    const auto& cfg = model.config;
    const std::size_t D = cfg.input_dim, H = cfg.hidden_dim, O = cfg.output_dim, G = 4 * H;
    if (sequence.rows < 1) throw ShapeError("forward: empty sequence");
    if (sequence.cols != D)
        throw ShapeError("forward: input has " + std::to_string(sequence.cols) + " columns, model expects " +
                         std::to_string(D));
    const auto& p = model.params;
    const std::size_t T = sequence.rows;

    ForwardResult res;
    auto& cache = res.cache;
    cache.steps = T;
    cache.input_dim = D;
    cache.hidden_dim = H;
    cache.output_dim = O;
    cache.params_fingerprint = fingerprint(p);
    cache.x = sequence;
    cache.gates = Matrix(T, G);
    cache.c = Matrix(T, H);
    cache.h = Matrix(T, H);
    cache.tanh_c = Matrix(T, H);
    cache.y = Matrix(T, O);

    std::vector<double> a(G);
    std::vector<double> h_prev(H, 0.0), c_prev(H, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const auto x = sequence.row(t);
        for (std::size_t r = 0; r < G; ++r) {
            double s = p.b[r];
            const double* wr = &p.W[r * D];
            for (std::size_t k = 0; k < D; ++k) s += wr[k] * x[k];
            const double* ur = &p.U[r * H];
            for (std::size_t k = 0; k < H; ++k) s += ur[k] * h_prev[k];
            a[r] = s;
        }
        auto gates = cache.gates.row(t);
        for (std::size_t j = 0; j < H; ++j) {
            const double i = sigmoid(a[j]);
            const double f = sigmoid(a[H + j]);
            const double g = std::tanh(a[2 * H + j]);
            const double o = sigmoid(a[3 * H + j]);
            gates[j] = i;
            gates[H + j] = f;
            gates[2 * H + j] = g;
            gates[3 * H + j] = o;
            const double c = f * c_prev[j] + i * g;
            const double tc = std::tanh(c);
            cache.c(t, j) = c;
            cache.tanh_c(t, j) = tc;
            cache.h(t, j) = o * tc;
        }
        for (std::size_t r = 0; r < O; ++r) {
            double s = p.by[r];
            for (std::size_t k = 0; k < H; ++k) s += p.Wy[r * H + k] * cache.h(t, k);
            cache.y(t, r) = s;
        }
        const auto ht = cache.h.row(t);
        const auto ct = cache.c.row(t);
        std::copy(ht.begin(), ht.end(), h_prev.begin());
        std::copy(ct.begin(), ct.end(), c_prev.begin());
    }
    res.outputs = cache.y;
    return res;
}

Matrix predict(const SeqModel& model, const Matrix& sequence) { return forward(model, sequence).outputs; }

double mse_loss(const Matrix& pred, const Matrix& target) {
    if (pred.rows != target.rows || pred.cols != target.cols)
        throw ShapeError("mse_loss: prediction and target shapes differ");
    if (pred.data.empty()) throw ShapeError("mse_loss: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double d = pred.data[i] - target.data[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.data.size());
}

Params backward(const SeqModel& model, const ForwardCache& cache, const Matrix& target) {
    const auto& cfg = model.config;
    const std::size_t D = cfg.input_dim, H = cfg.hidden_dim, O = cfg.output_dim, G = 4 * H;
    if (cache.input_dim != D || cache.hidden_dim != H || cache.output_dim != O)
        throw ShapeError("backward: cache was produced by a model of different shape");
    if (cache.params_fingerprint != fingerprint(model.params))
        throw ShapeError("backward: stale cache (parameters changed since forward)");
    if (target.rows != cache.steps || target.cols != O) throw ShapeError("backward: target shape mismatch");

    const auto& p = model.params;
    const std::size_t T = cache.steps;
    const double scale = 2.0 / static_cast<double>(T * O);

    Params g = Params::zeros(cfg);
    std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0), dh(H), da(G), dy(O);

    for (std::size_t t = T; t-- > 0;) {
        for (std::size_t r = 0; r < O; ++r) {
            dy[r] = scale * (cache.y(t, r) - target(t, r));
            g.by[r] += dy[r];
            for (std::size_t k = 0; k < H; ++k) g.Wy[r * H + k] += dy[r] * cache.h(t, k);
        }
        for (std::size_t k = 0; k < H; ++k) {
            double s = dh_next[k];
            for (std::size_t r = 0; r < O; ++r) s += p.Wy[r * H + k] * dy[r];
            dh[k] = s;
        }
        const auto gates = cache.gates.row(t);
        for (std::size_t j = 0; j < H; ++j) {
            const double i = gates[j], f = gates[H + j], gg = gates[2 * H + j], o = gates[3 * H + j];
            const double tc = cache.tanh_c(t, j);
            const double c_prev = t > 0 ? cache.c(t - 1, j) : 0.0;
            const double dc = dh[j] * o * (1.0 - tc * tc) + dc_next[j];
            const double d_o = dh[j] * tc;
            da[j] = dc * gg * i * (1.0 - i);
            da[H + j] = dc * c_prev * f * (1.0 - f);
            da[2 * H + j] = dc * i * (1.0 - gg * gg);
            da[3 * H + j] = d_o * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        const auto x = cache.x.row(t);
        for (std::size_t r = 0; r < G; ++r) {
            const double d = da[r];
            g.b[r] += d;
            double* wr = &g.W[r * D];
            for (std::size_t k = 0; k < D; ++k) wr[k] += d * x[k];
            if (t > 0) {
                double* ur = &g.U[r * H];
                for (std::size_t k = 0; k < H; ++k) ur[k] += d * cache.h(t - 1, k);
            }
        }
        std::fill(dh_next.begin(), dh_next.end(), 0.0);
        for (std::size_t r = 0; r < G; ++r) {
            const double d = da[r];
            const double* ur = &p.U[r * H];
            for (std::size_t k = 0; k < H; ++k) dh_next[k] += ur[k] * d;
        }
    }
    return g;
}

AdamState AdamState::for_model(const SeqModel& model, AdamConfig hyper) {
    return AdamState{hyper, Params::zeros(model.config), Params::zeros(model.config), 0};
}

void adam_step(SeqModel& model, const Params& grads, AdamState& state) {
    if (grads.size() != model.params.size() || state.m.size() != model.params.size())
        throw ShapeError("adam_step: gradient shape mismatch");
    check_finite(grads, "gradient", -1);

    const auto& hp = state.hyper;
    const long t = state.step + 1;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));

    auto pb = model.params.blocks();
    auto mb = state.m.blocks();
    auto vb = state.v.blocks();
    const auto gb = grads.blocks();
    for (std::size_t blk = 0; blk < pb.size(); ++blk) {
        if (gb[blk].size() != pb[blk].size()) throw ShapeError("adam_step: gradient block shape mismatch");
        for (std::size_t i = 0; i < pb[blk].size(); ++i) {
            const double gi = gb[blk][i];
            mb[blk][i] = hp.beta1 * mb[blk][i] + (1.0 - hp.beta1) * gi;
            vb[blk][i] = hp.beta2 * vb[blk][i] + (1.0 - hp.beta2) * gi * gi;
            const double m_hat = mb[blk][i] / bc1;
            const double v_hat = vb[blk][i] / bc2;
            pb[blk][i] -= hp.lr * m_hat / (std::sqrt(v_hat) + hp.eps);
        }
    }
    state.step = t;
}

double dataset_mse(const SeqModel& model, std::span<const Sample> samples) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& s : samples) {
        const Matrix y = predict(model, s.input);
        if (y.rows != s.target.rows || y.cols != s.target.cols) throw ShapeError("dataset_mse: target shape mismatch");
        for (std::size_t i = 0; i < y.data.size(); ++i) {
            const double d = y.data[i] - s.target.data[i];
            sum += d * d;
        }
        n += y.data.size();
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

FitResult fit(const SeqModel& model, std::span<const Sample> train, std::span<const Sample> validation,
              const FitConfig& cfg) {
    if (train.empty()) throw std::invalid_argument("fit: empty training set");
    FitResult res{model, {}, -1};
    if (cfg.epochs <= 0) return res;

    SeqModel current = model;
    AdamState adam = AdamState::for_model(current, cfg.adam);
    std::vector<std::size_t> order(train.size());
    double best = std::numeric_limits<double>::infinity();
    long since_best = 0;

    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

        double train_sum = 0.0;
        std::size_t train_n = 0;
        for (std::size_t idx : order) {
            const Sample& s = train[idx];
            auto fw = forward(current, s.input);
            const double loss = mse_loss(fw.outputs, s.target);
            if (!std::isfinite(loss)) throw TrainingError("non-finite training loss", epoch);
            train_sum += loss * static_cast<double>(fw.outputs.data.size());
            train_n += fw.outputs.data.size();
            const Params grads = backward(current, fw.cache, s.target);
            try {
                adam_step(current, grads, adam);
            } catch (const TrainingError& e) {
                throw TrainingError(e.what(), epoch);
            }
        }
        const double train_mse = train_sum / static_cast<double>(train_n);
        const double val_mse = validation.empty() ? train_mse : dataset_mse(current, validation);
        if (!std::isfinite(val_mse)) throw TrainingError("non-finite validation loss", epoch);
        res.history.train_mse.push_back(train_mse);
        res.history.validation_mse.push_back(val_mse);
        if (cfg.on_epoch) cfg.on_epoch(epoch, train_mse, val_mse);

        if (val_mse < best) {
            best = val_mse;
            res.model = current;
            res.best_epoch = epoch;
            since_best = 0;
        } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
            break;
        }
    }
    return res;
}

}  // namespace cavlab::rnn
