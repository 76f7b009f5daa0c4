#include "ubench/checkpoint.hpp"
#include "ubench/netcore.hpp"
#include "ubench/oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace ubench;
using namespace ubench::net;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> n01;
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * n01(rng);
    return m;
}

double largest_singular_value(const Matrix& m) {
    Eigen::JacobiSVD<Matrix> svd(m);
    return svd.singularValues()(0);
}

// Mean cross-entropy of softmax(logits) against one-hot labels, and its
// derivative wrt the logits.
double cross_entropy(const Matrix& logits, const std::vector<int>& labels, Matrix* dlogits = nullptr) {
    const Matrix p = softmax_columns(logits);
    const double B = static_cast<double>(logits.cols());
    double loss = 0.0;
    if (dlogits) *dlogits = p / B;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        loss -= std::log(p(labels[c], c)) / B;
        if (dlogits) (*dlogits)(labels[c], c) -= 1.0 / B;
    }
    return loss;
}

PredictorConfig small_config(std::size_t in, std::vector<std::size_t> hidden, std::size_t k, std::size_t C) {
    PredictorConfig c;
    c.input_dim = in;
    c.hidden_widths = std::move(hidden);
    c.feature_dim = k;
    c.num_classes = C;
    return c;
}

}  // namespace

TEST(Forward, ZeroWeightsGiveZeroLogits) {
    Predictor p(small_config(3, {4}, 2, 3), 1);
    ParamSet zero = zeros_like(p.params());
    p.set_params(zero);
    Vector x(3);
    x << 0.3, -2.0, 5.0;
    EXPECT_TRUE(p.logits(x).isZero(0.0));
}

TEST(Forward, IdentityLayers) {
    Predictor p(small_config(2, {}, 2, 2), 1);
    ParamSet params = p.params();
    for (auto& l : params) {
        l.weight = Matrix::Identity(2, 2);
        l.bias.setZero();
    }
    p.set_params(params);
    Vector x(2);
    x << 1.0, 2.0;
    Vector z = p.logits(x);
    EXPECT_EQ(z(0), 1.0);
    EXPECT_EQ(z(1), 2.0);
}

TEST(Forward, MatchesNaiveReimplementation) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Predictor p(small_config(5, {7}, 4, 3), 100 + trial);
        ParamSet params = p.params();
        for (auto& l : params) l.bias = random_matrix(l.bias.size(), 1, rng, 0.3);
        p.set_params(params);
        Matrix x = random_matrix(5, 1, rng);
        std::vector<double> xv(x.data(), x.data() + 5);
        // featurizer output is ReLU'd before the head; the naive MLP applies
        // ReLU to every layer but the last, which matches.
        auto expect = oracle::naive_mlp_forward(p.params(), xv);
        Vector got = p.logits(x.col(0));
        for (int i = 0; i < 3; ++i) EXPECT_NEAR(got(i), expect[i], 1e-12);
    }
}

TEST(Forward, InputShapeError) {
    Predictor p(small_config(3, {4}, 2, 2), 1);
    EXPECT_THROW(p.forward(Matrix::Zero(4, 1), Mode::eval), ShapeError);
}

TEST(Forward, PureAndReplayable) {
    auto cfg = small_config(4, {8, 8}, 5, 3);
    cfg.dropout_rate = 0.3;
    Predictor p(cfg, 3);
    Rng rng(1);
    Matrix x = random_matrix(4, 6, rng);
    for (Mode mode : {Mode::train, Mode::eval}) {
        auto a = p.forward(x, mode, 99);
        auto b = p.forward(x, mode, 99);
        EXPECT_TRUE(a.logits == b.logits);
    }
    auto s1 = p.forward(x, Mode::eval, 5, true);
    auto s2 = p.forward(x, Mode::eval, 6, true);
    EXPECT_FALSE(s1.logits == s2.logits);
    EXPECT_TRUE(p.forward(x, Mode::eval, 5).logits == p.forward(x, Mode::eval, 6).logits);
}

TEST(Forward, MimoOutputWidth) {
    auto cfg = small_config(3, {6}, 4, 5);
    cfg.head = HeadKind::mimo;
    cfg.heads = 3;
    Predictor p(cfg, 2);
    auto t = p.forward(Matrix::Ones(9, 2), Mode::eval);
    EXPECT_EQ(t.logits.rows(), 15);
    cfg.heads = 0;
    EXPECT_THROW(cfg.validate(), ParameterError);
}

TEST(Softmax, Cases) {
    Vector z = Vector::Constant(3, 4.2);
    Vector p = softmax(z);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(p(i), 1.0 / 3.0, 1e-15);

    Vector z2(2);
    z2 << 0.0, std::log(2.0);
    Vector p2 = softmax(z2);
    EXPECT_NEAR(p2(0), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(p2(1), 2.0 / 3.0, 1e-15);

    Vector z3(4);
    z3 << 3.0, -100.0, 12.0, 0.5;
    Vector p3 = softmax(z3, 1e9);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(p3(i), 0.25, 1e-6);

    EXPECT_THROW(softmax(z3, 0.0), ParameterError);
    EXPECT_THROW(softmax(z3, -1.0), ParameterError);
    z3(1) = std::nan("");
    EXPECT_THROW(softmax(z3), NumericError);
}

TEST(Softmax, SimplexAndArgmaxInvarianceProperty) {
    Rng rng(11);
    std::uniform_real_distribution<double> mag(-1e4, 1e4);
    std::uniform_real_distribution<double> logtau(-5, 5);
    for (int trial = 0; trial < 500; ++trial) {
        Vector z(7);
        for (int i = 0; i < 7; ++i) z(i) = mag(rng);
        const double tau = std::exp(logtau(rng));
        Vector p = softmax(z, tau);
        EXPECT_NEAR(p.sum(), 1.0, 1e-12);
        EXPECT_TRUE((p.array() >= 0.0).all());
        Eigen::Index a, b;
        z.maxCoeff(&a);
        p.maxCoeff(&b);
        EXPECT_EQ(a, b);
    }
}

TEST(Backward, ZeroSeedGivesZeroGradients) {
    Predictor p(small_config(3, {5}, 4, 3), 9);
    Rng rng(2);
    auto t = p.forward(random_matrix(3, 4, rng), Mode::train);
    auto bp = p.backward(t, Matrix::Zero(3, 4));
    for (const auto& g : bp.grads) {
        EXPECT_TRUE(g.weight.isZero(0.0));
        EXPECT_TRUE(g.bias.isZero(0.0));
    }
}

TEST(Backward, Linearity) {
    Predictor p(small_config(3, {5}, 4, 3), 9);
    Rng rng(3);
    auto t = p.forward(random_matrix(3, 4, rng), Mode::train);
    Matrix g1 = random_matrix(3, 4, rng), g2 = random_matrix(3, 4, rng);
    auto a = p.backward(t, g1), b = p.backward(t, g2), ab = p.backward(t, g1 + g2);
    for (std::size_t l = 0; l < ab.grads.size(); ++l) {
        EXPECT_LT((ab.grads[l].weight - a.grads[l].weight - b.grads[l].weight).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LT((ab.grads[l].bias - a.grads[l].bias - b.grads[l].bias).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Backward, StaleTraceIsRejected) {
    Predictor p(small_config(3, {5}, 4, 3), 9);
    auto t = p.forward(Matrix::Ones(3, 1), Mode::train);
    p.mutable_params()[0].bias(0) += 1.0;
    EXPECT_THROW(p.backward(t, Matrix::Ones(3, 1)), ContractError);
}

// Gradient correctness for every layer kind against central differences.
TEST(Backward, FiniteDifferenceAllLayerKinds) {
    Rng rng(123);
    int instances = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const int kind = trial % 4;  // 0 linear, 1 dropout-in-train, 2 rbf, 3 spectral
        auto cfg = small_config(3, {5}, 4, 3);
        if (kind == 1) cfg.dropout_rate = 0.3;
        if (kind == 2) cfg.head = HeadKind::rbf;
        if (kind == 3) cfg.spectral_norm = true;
        Predictor p(cfg, 1000 + trial);
        // nonzero biases keep pre-activations off the ReLU kink
        ParamSet params = p.params();
        for (auto& l : params) l.bias = random_matrix(l.bias.size(), 1, rng, 0.5);
        p.set_params(params);
        Matrix x = random_matrix(3, 4, rng);
        std::vector<int> labels{0, 1, 2, static_cast<int>(trial % 3)};
        const std::uint64_t seed = 77 + trial;
        auto trace = p.forward(x, Mode::train, seed);
        Matrix dl;
        cross_entropy(trace.logits, labels, &dl);
        auto analytic = p.backward(trace, dl).grads;
        Predictor probe = p;
        auto numeric = oracle::finite_difference_gradient(
            [&](const ParamSet& params) {
                probe.set_params(params);
                return cross_entropy(probe.forward(x, Mode::train, seed).logits, labels);
            },
            p.params());
        EXPECT_LT(oracle::max_relative_error(analytic, numeric), 1e-4) << "kind " << kind << " trial " << trial;
        ++instances;
    }
    EXPECT_GE(instances, 50);
}

TEST(Sgd, Cases) {
    ParamSet w{{Matrix::Constant(1, 1, 1.0), Vector::Zero(1)}};
    ParamSet g{{Matrix::Constant(1, 1, 0.5), Vector::Zero(1)}};

    auto frozen = SgdState::for_params(w, 0.0, 0.9, 1e-4);
    ParamSet w0 = w;
    sgd_step(frozen, w0, g);
    EXPECT_EQ(w0[0].weight(0, 0), 1.0);

    auto plain = SgdState::for_params(w, 0.1, 0.0, 0.0);
    ParamSet w1 = w;
    sgd_step(plain, w1, g);
    EXPECT_NEAR(w1[0].weight(0, 0), 0.95, 1e-15);

    ParamSet z{{Matrix::Zero(1, 1), Vector::Zero(1)}};
    ParamSet one{{Matrix::Ones(1, 1), Vector::Zero(1)}};
    auto heavy = SgdState::for_params(z, 1.0, 0.9, 0.0);
    sgd_step(heavy, z, one);
    sgd_step(heavy, z, one);
    EXPECT_NEAR(z[0].weight(0, 0), -2.9, 1e-15);

    EXPECT_NEAR(scheduled_rate(0.1, 19, 20, 0.1), 0.1, 1e-15);
    EXPECT_NEAR(scheduled_rate(0.1, 20, 20, 0.1), 0.01, 1e-15);
    EXPECT_NEAR(scheduled_rate(0.1, 45, 20, 0.1), 0.001, 1e-15);
}

TEST(Spectral, AnalyticCases) {
    Rng rng(5);
    Matrix d = Matrix::Zero(2, 2);
    d(0, 0) = 3.0;
    d(1, 1) = 1.0;
    auto s = make_spectral_state(d, rng);
    Matrix n = spectral_normalize(d, 30, s);
    EXPECT_NEAR(n(0, 0), 1.0, 1e-6);
    EXPECT_NEAR(n(1, 1), 1.0 / 3.0, 1e-6);
    EXPECT_NEAR(n(0, 1), 0.0, 1e-6);

    Eigen::HouseholderQR<Matrix> qr(random_matrix(6, 6, rng));
    Matrix q = qr.householderQ();
    auto sq = make_spectral_state(q, rng);
    EXPECT_LT((spectral_normalize(q, 30, sq) - q).cwiseAbs().maxCoeff(), 1e-6);

    Matrix zero = Matrix::Zero(3, 4);
    auto sz = make_spectral_state(zero, rng);
    EXPECT_TRUE(spectral_normalize(zero, 5, sz) == zero);
}

// 5 iterations per call with the singular vectors carried between calls,
// while the matrix drifts the way it does under SGD.
TEST(Spectral, PersistentFiveIterationBound) {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix w = random_matrix(32, 32, rng, 0.2);
        auto state = make_spectral_state(w, rng);
        for (int step = 0; step < 200; ++step) {
            w += random_matrix(32, 32, rng, 1e-4);
            Matrix n = spectral_normalize(w, 5, state);
            if (step >= 100) EXPECT_LE(largest_singular_value(n), 1.0 + 1e-3) << "trial " << trial;
        }
    }
}

TEST(Spectral, PredictorForwardWeightsAreBounded) {
    for (int trial = 0; trial < 10; ++trial) {
        auto cfg = small_config(32, {32, 32}, 16, 4);
        cfg.spectral_norm = true;
        Predictor p(cfg, 500 + trial);
        for (std::size_t l = 0; l < cfg.featurizer_depth(); ++l)
            EXPECT_LE(largest_singular_value(p.effective_weight(l)), 1.0 + 1e-3);
    }
}

TEST(Dropout, Cases) {
    Rng rng(1);
    Vector a = Vector::LinSpaced(10, -1, 1);
    EXPECT_TRUE(apply_dropout(a, 0.0, rng) == a);

    Vector ones = Vector::Ones(1000000);
    Rng r2(42);
    const double mean = apply_dropout(ones, 0.5, r2).mean();
    EXPECT_NEAR(mean, 1.0, 0.01);

    Rng r3(9), r4(9);
    EXPECT_TRUE(apply_dropout(ones.head(100), 0.3, r3) == apply_dropout(ones.head(100), 0.3, r4));
    EXPECT_THROW(apply_dropout(a, 1.0, rng), ParameterError);
}

TEST(Jacobian, ConstantPredictorIsZero) {
    Predictor p(small_config(3, {4}, 2, 3), 1);
    ParamSet params = zeros_like(p.params());
    params.back().bias << 0.5, -1.0, 2.0;
    p.set_params(params);
    Vector x(3);
    x << 1, 2, 3;
    EXPECT_EQ(p.input_jacobian_sqnorm(x), 0.0);
}

TEST(Jacobian, MatchesFiniteDifferences) {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        auto cfg = small_config(4, {}, 6, 3);
        if (trial % 2 == 1) {
            cfg.head = HeadKind::mimo;
            cfg.heads = 2;
        }
        Predictor p(cfg, 40 + trial);
        Vector x = random_matrix(4, 1, rng).col(0);
        Matrix jac = p.prediction_jacobian(x);
        auto predict = [&](const Vector& xi) {
            Vector z = p.logits(replicate_input(xi, cfg.heads));
            Vector avg = Vector::Zero(3);
            for (std::size_t t = 0; t < cfg.heads; ++t) avg += softmax(z.segment(3 * t, 3));
            return Vector(avg / static_cast<double>(cfg.heads));
        };
        Matrix fd(3, 4);
        const double h = 1e-5;
        for (int d = 0; d < 4; ++d) {
            Vector xp = x, xm = x;
            xp(d) += h;
            xm(d) -= h;
            fd.col(d) = (predict(xp) - predict(xm)) / (2 * h);
        }
        EXPECT_LT(oracle::max_relative_error(jac, fd), 1e-4);
        EXPECT_NEAR(p.input_jacobian_sqnorm(x), fd.squaredNorm(), 1e-4 * fd.squaredNorm() + 1e-12);
    }
}

TEST(Jacobian, DuplicatedPredictorIsBitwiseEqual) {
    Predictor p(small_config(5, {8}, 4, 3), 8);
    Predictor q = p;
    Vector x = Vector::LinSpaced(5, -1, 2);
    EXPECT_EQ(p.input_jacobian_sqnorm(x), q.input_jacobian_sqnorm(x));
}

TEST(Checkpoint, PredictorRoundTrip) {
    auto cfg = small_config(4, {6}, 3, 3);
    cfg.spectral_norm = true;
    Predictor p(cfg, 12);
    Checkpoint ck;
    ck.meta["note"] = "x";
    store_predictor(ck, "predictor", p);
    const auto path = std::filesystem::temp_directory_path() / "ubench_ckpt_test.ckpt";
    write_checkpoint(path, ck);
    Predictor q = load_predictor(read_checkpoint(path), "predictor");
    Vector x = Vector::LinSpaced(4, -1, 1);
    EXPECT_TRUE(p.logits(x) == q.logits(x));
    std::filesystem::remove(path);
}
