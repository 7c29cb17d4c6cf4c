#include <cmath>

#include "cavlab/rng.hpp"
#include "cavlab/rnn.hpp"
#include "doctest.h"

using namespace cavlab;
using namespace cavlab::rnn;

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Straightforward per-element LSTM used as a reference for forward().
Matrix reference_forward(const SeqModel& m, const Matrix& x) {
    const std::size_t D = m.config.input_dim, H = m.config.hidden_dim, O = m.config.output_dim;
    const auto& p = m.params;
    std::vector<double> h(H, 0.0), c(H, 0.0);
    Matrix y(x.rows, O);
    for (std::size_t t = 0; t < x.rows; ++t) {
        std::vector<double> a(4 * H);
        for (std::size_t r = 0; r < 4 * H; ++r) {
            double s = p.b[r];
            for (std::size_t j = 0; j < D; ++j) s += p.W[r * D + j] * x(t, j);
            for (std::size_t j = 0; j < H; ++j) s += p.U[r * H + j] * h[j];
            a[r] = s;
        }
        for (std::size_t k = 0; k < H; ++k) {
            const double i = sigmoid(a[k]), f = sigmoid(a[H + k]), g = std::tanh(a[2 * H + k]),
                         o = sigmoid(a[3 * H + k]);
            c[k] = f * c[k] + i * g;
            h[k] = o * std::tanh(c[k]);
        }
        for (std::size_t r = 0; r < O; ++r) {
            double s = p.by[r];
            for (std::size_t k = 0; k < H; ++k) s += p.Wy[r * H + k] * h[k];
            y(t, r) = s;
        }
    }
    return y;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    Matrix m(r, c);
    for (auto& v : m.data) v = rng.uniform(-scale, scale);
    return m;
}

double loss_of(const SeqModel& m, const Matrix& x, const Matrix& y) { return mse_loss(predict(m, x), y); }

}  // namespace

TEST_CASE("parameter count") {
    ModelConfig c{9, 32, 2, 0};
    CHECK(parameter_count(c) == 4 * 32 * (9 + 32 + 1) + 2 * (32 + 1));
    CHECK(SeqModel::initialized(c).params.size() == parameter_count(c));
    CHECK(Params::zeros(c).size() == parameter_count(c));
}

TEST_CASE("initialization") {
    ModelConfig c{3, 8, 2, 42};
    const auto m = SeqModel::initialized(c);
    CHECK(m == SeqModel::initialized(c));
    c.seed = 43;
    CHECK_FALSE(m == SeqModel::initialized(c));
    const double k = 1.0 / std::sqrt(8.0);
    for (double w : m.params.W) CHECK(std::abs(w) <= k);
    for (std::size_t j = 0; j < 8; ++j) CHECK(m.params.b[8 + j] >= 1.0 - k);
}

TEST_CASE("zero weights give zero output") {
    const auto m = SeqModel::zeros({4, 6, 2, 0});
    Rng rng(1);
    const auto y = predict(m, random_matrix(5, 4, rng));
    CHECK(y.rows == 5);
    CHECK(y.cols == 2);
    for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("single unit single step by hand") {
    auto m = SeqModel::zeros({1, 1, 1, 0});
    // i = f = o = sigmoid(0) = 0.5, g = tanh(1)
    m.params.W = {0.0, 0.0, 1.0, 0.0};
    m.params.Wy = {2.0};
    m.params.by = {0.5};
    Matrix x(1, 1, 1.0);
    const double c = 0.5 * std::tanh(1.0);
    const double h = 0.5 * std::tanh(c);
    CHECK(predict(m, x)(0, 0) == doctest::Approx(2.0 * h + 0.5).epsilon(1e-14));
}

TEST_CASE("forward matches the reference cell") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        ModelConfig c{1 + rng.below(5), 1 + rng.below(7), 1 + rng.below(3), static_cast<std::uint64_t>(trial)};
        const auto m = SeqModel::initialized(c);
        const auto x = random_matrix(1 + rng.below(12), c.input_dim, rng, 2.0);
        const auto y = predict(m, x);
        const auto ref = reference_forward(m, x);
        REQUIRE(y.data.size() == ref.data.size());
        for (std::size_t i = 0; i < y.data.size(); ++i) CHECK(y.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-12));
    }
}

TEST_CASE("shape errors") {
    const auto m = SeqModel::initialized({3, 4, 2, 0});
    CHECK_THROWS_AS(forward(m, Matrix(5, 2)), ShapeError);
    const auto fw = forward(m, Matrix(5, 3));
    CHECK_THROWS_AS(backward(m, fw.cache, Matrix(4, 2)), ShapeError);
    auto changed = m;
    changed.params.by[0] += 1.0;
    CHECK_THROWS_AS(backward(changed, fw.cache, Matrix(5, 2)), ShapeError);
    CHECK_THROWS_AS(mse_loss(Matrix(2, 2), Matrix(2, 3)), ShapeError);
}

TEST_CASE("mse loss") {
    Matrix a(1, 2), b(1, 2);
    a.data = {1.0, 2.0};
    b.data = {1.0, 4.0};
    CHECK(mse_loss(a, b) == 2.0);
    CHECK(mse_loss(a, a) == 0.0);
}

TEST_CASE("backward") {
    SUBCASE("zero residual gives zero gradient") {
        const auto m = SeqModel::initialized({2, 3, 2, 5});
        Rng rng(2);
        const auto x = random_matrix(4, 2, rng);
        const auto fw = forward(m, x);
        const auto g = backward(m, fw.cache, fw.outputs);
        for (const auto& block : g.blocks())
            for (double v : block) CHECK(v == 0.0);
    }

    SUBCASE("output bias gradient is the mean residual times two") {
        const auto m = SeqModel::initialized({2, 3, 1, 5});
        Rng rng(3);
        const auto x = random_matrix(4, 2, rng);
        const auto fw = forward(m, x);
        Matrix target = fw.outputs;
        for (auto& v : target.data) v -= 1.0;  // residual +1 everywhere
        const auto g = backward(m, fw.cache, target);
        CHECK(g.by[0] == doctest::Approx(2.0).epsilon(1e-12));
    }

    SUBCASE("agrees with central differences") {
        Rng rng(4);
        for (int trial = 0; trial < 10; ++trial) {
            ModelConfig c{1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(3), static_cast<std::uint64_t>(100 + trial)};
            auto m = SeqModel::initialized(c);
            const auto x = random_matrix(1 + rng.below(8), c.input_dim, rng);
            const auto y = random_matrix(x.rows, c.output_dim, rng);
            const auto g = backward(m, forward(m, x).cache, y);
            const auto gblocks = g.blocks();
            auto blocks = m.params.blocks();
            for (std::size_t b = 0; b < blocks.size(); ++b) {
                for (std::size_t i = 0; i < blocks[b].size(); ++i) {
                    const double orig = blocks[b][i];
                    const double h = 1e-6;
                    blocks[b][i] = orig + h;
                    const double up = loss_of(m, x, y);
                    blocks[b][i] = orig - h;
                    const double down = loss_of(m, x, y);
                    blocks[b][i] = orig;
                    const double numeric = (up - down) / (2.0 * h);
                    const double analytic = gblocks[b][i];
                    CHECK(std::abs(numeric - analytic) <= 1e-6 * std::max(1.0, std::abs(numeric)));
                }
            }
        }
    }
}

TEST_CASE("adam step") {
    auto m = SeqModel::zeros({1, 1, 1, 0});
    auto state = AdamState::for_model(m, {0.1, 0.9, 0.999, 1e-8});
    auto g = Params::zeros(m.config);
    g.by[0] = 0.5;
    g.Wy[0] = -2.0;
    adam_step(m, g, state);
    // First bias-corrected step moves by lr * sign(g).
    CHECK(m.params.by[0] == doctest::Approx(-0.1).epsilon(1e-7));
    CHECK(m.params.Wy[0] == doctest::Approx(0.1).epsilon(1e-7));
    CHECK(m.params.W[0] == 0.0);
    CHECK(state.step == 1);

    // Second step with the same gradient: m_hat = g, v_hat = g^2 again.
    adam_step(m, g, state);
    CHECK(m.params.by[0] == doctest::Approx(-0.2).epsilon(1e-7));

    auto bad = Params::zeros(m.config);
    bad.U[0] = std::nan("");
    const auto before = m;
    const auto before_step = state.step;
    CHECK_THROWS_AS(adam_step(m, bad, state), TrainingError);
    CHECK(m == before);
    CHECK(state.step == before_step);
}

TEST_CASE("fit") {
    Rng rng(6);
    std::vector<Sample> data;
    for (int i = 0; i < 6; ++i) {
        Sample s{random_matrix(5, 2, rng), Matrix(5, 1)};
        for (std::size_t t = 0; t < 5; ++t) s.target(t, 0) = 0.5 * s.input(t, 0) - 0.25 * s.input(t, 1);
        data.push_back(s);
    }
    const auto init = SeqModel::initialized({2, 8, 1, 1});
    const std::span<const Sample> train(data.data(), 4);
    const std::span<const Sample> val(data.data() + 4, 2);

    SUBCASE("zero epochs returns the initial model") {
        FitConfig fc;
        fc.epochs = 0;
        const auto r = fit(init, train, val, fc);
        CHECK(r.model == init);
        CHECK(r.history.train_mse.empty());
    }

    SUBCASE("empty training set") {
        CHECK_THROWS_AS(fit(init, {}, val, {}), std::invalid_argument);
    }

    SUBCASE("patience stops a stalled run") {
        FitConfig fc;
        fc.epochs = 50;
        fc.patience = 1;
        fc.adam.lr = 0.0;
        const auto r = fit(init, train, val, fc);
        CHECK(r.history.validation_mse.size() == 2);
        CHECK(r.best_epoch == 0);
    }

    SUBCASE("same seed, same model") {
        FitConfig fc;
        fc.epochs = 20;
        fc.seed = 9;
        fc.adam.lr = 0.01;
        const auto a = fit(init, train, val, fc);
        const auto b = fit(init, train, val, fc);
        CHECK(a.model == b.model);
        CHECK(a.history.train_mse == b.history.train_mse);
    }

    SUBCASE("loss falls on a learnable mapping") {
        FitConfig fc;
        fc.epochs = 150;
        fc.adam.lr = 0.01;
        long calls = 0;
        fc.on_epoch = [&](long, double, double) { ++calls; };
        const auto r = fit(init, train, val, fc);
        CHECK(calls == 150);
        CHECK(r.history.train_mse.back() < 0.2 * r.history.train_mse.front());
        CHECK(dataset_mse(r.model, val) == doctest::Approx(r.history.validation_mse[static_cast<std::size_t>(r.best_epoch)]));
    }
}

TEST_CASE("memorizes a single short sequence") {
    Matrix x(6, 1), y(6, 1);
    const double targets[6] = {0.1, -0.4, 0.7, 0.2, -0.9, 0.5};
    for (std::size_t t = 0; t < 6; ++t) {
        x(t, 0) = t == 0 ? 1.0 : 0.0;
        y(t, 0) = targets[t];
    }
    const std::vector<Sample> one{{x, y}};
    FitConfig fc;
    fc.epochs = 2000;
    fc.adam.lr = 0.01;
    const auto r = fit(SeqModel::initialized({1, 16, 1, 3}), one, {}, fc);
    CHECK(dataset_mse(r.model, one) < 1e-4);
}
