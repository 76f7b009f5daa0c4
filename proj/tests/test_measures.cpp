#include "ubench/measures.hpp"
#include "ubench/oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

using namespace ubench;
using namespace ubench::measures;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

Vector random_simplex(Eigen::Index c, Rng& rng) {
    std::exponential_distribution<double> e(1.0);
    Vector p(c);
    for (Eigen::Index i = 0; i < c; ++i) p(i) = e(rng);
    return p / p.sum();
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
}

std::shared_ptr<algo::TrainedModel> random_model(algo::Algorithm a, std::size_t trial, std::uint64_t seed,
                                                 std::size_t dim = 4, std::size_t classes = 3) {
    net::PredictorConfig base;
    base.input_dim = dim;
    base.hidden_widths = {8};
    base.feature_dim = 6;
    base.num_classes = classes;
    auto m = std::make_shared<algo::TrainedModel>();
    m->algorithm = a;
    m->predictor = net::Predictor(algo::configure_for(a, base, m->hparams), seed);
    m->seeds = {seed, 0, trial};
    m->train_input_mean = Vector::Constant(static_cast<Eigen::Index>(dim), 0.3);
    m->train_label_mean = Vector::Constant(static_cast<Eigen::Index>(classes), 1.0 / static_cast<double>(classes));
    if (a == algo::Algorithm::rnd || a == algo::Algorithm::oc)
        m->auxiliary = algo::make_auxiliary(a == algo::Algorithm::oc, base.feature_dim, 5, 2, 0.0, seed + 1);
    return m;
}

data::Dataset validation_set(std::size_t classes, std::size_t per_class, std::size_t dim, Rng& rng) {
    data::Dataset ds;
    ds.features = random_matrix(static_cast<Eigen::Index>(classes * per_class), static_cast<Eigen::Index>(dim), rng);
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t i = 0; i < per_class; ++i) ds.labels.push_back(static_cast<int>(c));
    ds.class_count = classes;
    ds.role = data::Role::val;
    return ds;
}

std::vector<std::uint64_t> iota_ids(std::size_t n) {
    std::vector<std::uint64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = i;
    return ids;
}

}  // namespace

TEST(SoftmaxStatistics, HandCases) {
    EXPECT_DOUBLE_EQ(score_largest(vec({0.7, 0.2, 0.1})), -0.7);
    EXPECT_DOUBLE_EQ(score_largest(vec({0, 1, 0})), -1.0);
    EXPECT_DOUBLE_EQ(score_largest(vec({0.25, 0.25, 0.25, 0.25})), -0.25);
    EXPECT_DOUBLE_EQ(score_gap(vec({0, 0, 1})), -1.0);
    EXPECT_DOUBLE_EQ(score_gap(vec({0.25, 0.25, 0.25, 0.25})), 0.0);
    EXPECT_NEAR(score_gap(vec({0.7, 0.2, 0.1})), -0.5, 1e-15);
    EXPECT_DOUBLE_EQ(score_entropy(vec({0, 1, 0})), 0.0);
    EXPECT_NEAR(score_entropy(vec({0.25, 0.25, 0.25, 0.25})), 1.386294361119891, 1e-15);
    EXPECT_NEAR(score_entropy(vec({0.5, 0.5, 0, 0})), 0.6931471805599453, 1e-15);
}

TEST(SoftmaxStatistics, GapNeedsTwoClasses) { EXPECT_THROW(score_gap(vec({1.0})), ParameterError); }

TEST(SoftmaxStatistics, RejectsNonProbabilities) {
    EXPECT_THROW(score_entropy(vec({0.5, 0.6})), ParameterError);
    EXPECT_THROW(score_largest(vec({-0.5, 1.5})), ParameterError);
}

TEST(SoftmaxStatistics, SortedScoresDescend) {
    const Vector s = sorted_scores(vec({0.1, 0.6, 0.3}));
    EXPECT_EQ(s, vec({0.6, 0.3, 0.1}));
}

TEST(SoftmaxStatistics, OneHotAndUniformBoundEveryVector) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const Eigen::Index c = 2 + static_cast<Eigen::Index>(trial % 6);
        const Vector p = random_simplex(c, rng);
        Vector onehot = Vector::Zero(c);
        onehot(trial % c) = 1.0;
        const Vector uniform = Vector::Constant(c, 1.0 / static_cast<double>(c));
        for (auto score : {score_largest, score_gap, score_entropy}) {
            EXPECT_LE(score(onehot), score(p) + 1e-15);
            EXPECT_LE(score(p), score(uniform) + 1e-15);
        }
    }
}

TEST(Gmm, HandFitOneDimension) {
    Matrix f(1, 2);
    f << 0, 2;
    const std::vector<int> labels{0, 0};
    const auto g = fit_gmm(f, labels, 1);
    EXPECT_DOUBLE_EQ(g.means[0](0), 1.0);
    EXPECT_DOUBLE_EQ(g.epsilons[0], 1e-6);
    EXPECT_DOUBLE_EQ(g.covariances[0](0, 0), 1.0 + 1e-6);
    EXPECT_DOUBLE_EQ(g.weights[0], 1.0);
}

TEST(Gmm, MomentsMatchBruteForce) {
    Rng rng(2);
    const std::size_t classes = 3, k = 4;
    Matrix f = random_matrix(static_cast<Eigen::Index>(k), 60, rng, 2.0);
    std::vector<int> labels;
    for (int j = 0; j < 60; ++j) labels.push_back(j % 7 == 0 ? 2 : j % 2);
    const auto g = fit_gmm(f, labels, classes);
    double wsum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<std::vector<double>> rows;
        for (std::size_t j = 0; j < labels.size(); ++j)
            if (labels[j] == static_cast<int>(c)) {
                const Vector col = f.col(static_cast<Eigen::Index>(j));
                rows.emplace_back(col.data(), col.data() + col.size());
            }
        const auto ref = oracle::brute_moments(rows);
        for (std::size_t a = 0; a < k; ++a) {
            EXPECT_NEAR(g.means[c](static_cast<Eigen::Index>(a)), ref.mean[a], 1e-10);
            for (std::size_t b = 0; b < k; ++b) {
                const double ridge = a == b ? g.epsilons[c] : 0.0;
                EXPECT_NEAR(g.covariances[c](static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) - ridge,
                            ref.cov[a][b], 1e-10);
            }
        }
        EXPECT_DOUBLE_EQ(g.weights[c], static_cast<double>(rows.size()) / 60.0);
        wsum += g.weights[c];
    }
    EXPECT_NEAR(wsum, 1.0, 1e-12);
}

TEST(Gmm, SmallClassIsNamed) {
    Matrix f(2, 5);
    f.setRandom();
    const std::vector<int> labels{0, 0, 0, 1, 2};
    try {
        fit_gmm(f, labels, 3);
        FAIL() << "expected FitError";
    } catch (const FitError& e) {
        EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos) << e.what();
    }
}

TEST(Gmm, StandardNormalPeak) {
    GmmModel g;
    g.means = {vec({0.0})};
    g.covariances = {Matrix::Identity(1, 1)};
    g.weights = {1.0};
    g.epsilons = {0.0};
    g.prepare();
    EXPECT_NEAR(score_gmm(g, vec({0.0})), -1.0 / std::sqrt(2.0 * std::numbers::pi), 1e-15);
    const double far = score_gmm(g, vec({40.0}));
    EXPECT_LE(far, 0.0);
    EXPECT_GT(far, score_gmm(g, vec({0.5})));
}

TEST(Gmm, IncreasesAlongRays) {
    Rng rng(3);
    Matrix f = random_matrix(3, 40, rng);
    const std::vector<int> labels(40, 0);
    const auto g = fit_gmm(f, labels, 1);
    for (int ray = 0; ray < 10; ++ray) {
        const Vector dir = random_matrix(3, 1, rng).col(0).normalized();
        double prev = score_gmm(g, g.means[0]);
        for (int step = 1; step <= 30; ++step) {
            const double s = score_gmm(g, g.means[0] + 0.2 * step * dir);
            EXPECT_GT(s, prev) << "ray " << ray << " step " << step;
            prev = s;
        }
    }
}

TEST(Gmm, TwoClassesMatchDensityOracle) {
    Rng rng(4);
    Matrix f = random_matrix(2, 40, rng);
    std::vector<int> labels;
    for (int j = 0; j < 40; ++j) {
        labels.push_back(j < 20 ? 0 : 1);
        if (j >= 20) f.col(j) += vec({3.0, -1.0});
    }
    const auto g = fit_gmm(f, labels, 2);
    EXPECT_DOUBLE_EQ(g.weights[0], 0.5);
    auto to_std = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    auto cov_std = [](const Matrix& m) {
        std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)].push_back(m(i, j));
        return out;
    };
    const Vector at = g.means[0];
    const double peak = oracle::normal_density(to_std(at), to_std(g.means[0]), cov_std(g.covariances[0]));
    const double cross = oracle::normal_density(to_std(at), to_std(g.means[1]), cov_std(g.covariances[1]));
    EXPECT_NEAR(score_gmm(g, at), -0.5 * peak - 0.5 * cross, 1e-12);
}

TEST(Augment, ZeroNoiseIsLargest) {
    auto m = random_model(algo::Algorithm::erm, 0, 5);
    const ProbabilityFn f = [m](const Matrix& x) { return m->predict(x); };
    Rng rng(5);
    const Vector x = random_matrix(4, 1, rng).col(0);
    const double largest = score_largest(m->predict(Matrix(x)).col(0));
    for (std::size_t a : {1, 2, 7}) EXPECT_NEAR(score_augment(f, x, {a, 0.0, 9}), largest, 1e-15);
}

TEST(Augment, TwoPassHandAverage) {
    auto m = random_model(algo::Algorithm::erm, 0, 6);
    const ProbabilityFn f = [m](const Matrix& x) { return m->predict(x); };
    Rng rng(6);
    const Vector x = random_matrix(4, 1, rng).col(0);
    const AugmentSpec spec{2, 0.5, 1234};
    Vector sum = Vector::Zero(3);
    for (std::size_t a = 0; a < 2; ++a) {
        Rng draw(derive_seed(spec.seed, {a}));
        std::normal_distribution<double> g;
        Vector xa = x;
        for (Eigen::Index i = 0; i < xa.size(); ++i) xa(i) += 0.5 * g(draw);
        sum += net::softmax(m->predictor.logits(xa));
    }
    EXPECT_NEAR(score_augment(f, x, spec), -(sum / 2.0).maxCoeff(), 1e-12);
}

TEST(Augment, RequiresAtLeastOneCopy) {
    const ProbabilityFn f = [](const Matrix& x) { return Matrix::Constant(2, x.cols(), 0.5); };
    EXPECT_THROW(score_augment(f, vec({1.0}), {0, 0.1, 0}), ParameterError);
}

TEST(NativeMixup, ForcedLambdaOneIsZero) {
    auto m = random_model(algo::Algorithm::mixup, 0, 7);
    const ProbabilityFn f = [m](const Matrix& x) { return m->predict(x); };
    MixupContext ctx{m->train_input_mean, m->train_label_mean, 0.3, 8, 1, 1.0};
    Rng rng(7);
    EXPECT_EQ(native_mixup(f, random_matrix(4, 1, rng).col(0), ctx), 0.0);
}

TEST(NativeMixup, AffineFunctionSatisfiesCriterion) {
    const ProbabilityFn f = [](const Matrix& x) {
        Matrix p(2, x.cols());
        p.row(0) = (0.5 + 0.1 * x.row(0).array() - 0.05 * x.row(1).array()).matrix();
        p.row(1) = Eigen::RowVectorXd::Ones(x.cols()) - p.row(0);
        return p;
    };
    MixupContext ctx;
    ctx.x_mean = vec({0.4, -0.2});
    ctx.y_mean = f(Matrix(ctx.x_mean)).col(0);
    ctx.seed = 3;
    EXPECT_NEAR(native_mixup(f, vec({1.0, 2.0}), ctx), 0.0, 1e-28);
}

TEST(NativeMixup, HalfLambdaMatchesDirectEvaluation) {
    auto m = random_model(algo::Algorithm::mixup, 0, 8);
    const ProbabilityFn f = [m](const Matrix& x) { return m->predict(x); };
    Rng rng(8);
    const Vector x = random_matrix(4, 1, rng).col(0);
    MixupContext ctx{m->train_input_mean, vec({0.5, 0.3, 0.2}), 0.3, 8, 1, 0.5};
    auto naive = [&](const Vector& in) {
        const auto z = oracle::naive_mlp_forward(m->predictor.params(), std::vector<double>(in.data(), in.data() + 4));
        return net::softmax(Eigen::Map<const Vector>(z.data(), static_cast<Eigen::Index>(z.size())));
    };
    const Vector mixed = 0.5 * x + 0.5 * ctx.x_mean;
    const double expected = (0.5 * naive(x) + 0.5 * ctx.y_mean - naive(mixed)).squaredNorm();
    EXPECT_NEAR(native_mixup(f, x, ctx), expected, 1e-12);
}

TEST(NativeMixup, MissingMeansIsAnError) {
    const ProbabilityFn f = [](const Matrix& x) { return Matrix::Constant(2, x.cols(), 0.5); };
    EXPECT_THROW(native_mixup(f, vec({1.0}), MixupContext{}), ContractError);
}

TEST(NativeStudentTeacher, CopiedStudentIsZero) {
    auto m = random_model(algo::Algorithm::rnd, 0, 9);
    m->auxiliary->student = m->auxiliary->teacher;
    Rng rng(9);
    EXPECT_EQ(native_student_teacher(*m, random_matrix(4, 1, rng).col(0)), 0.0);
}

TEST(NativeStudentTeacher, OcStudentOutputsOnesGiveTwo) {
    auto m = random_model(algo::Algorithm::oc, 0, 10);
    algo::AuxiliaryPair pair;
    pair.zero_teacher = true;
    pair.student = {net::DenseLayer{Matrix::Zero(2, 6), vec({1.0, 1.0})}};
    m->auxiliary = pair;
    EXPECT_DOUBLE_EQ(native_student_teacher(*m, vec({0.1, 0.2, 0.3, 0.4})), 2.0);
}

TEST(NativeStudentTeacher, NonNegativeAndNeedsAuxiliary) {
    auto m = random_model(algo::Algorithm::oc, 0, 11);
    Rng rng(11);
    for (int i = 0; i < 20; ++i) EXPECT_GE(native_student_teacher(*m, random_matrix(4, 1, rng).col(0)), 0.0);
    auto erm = random_model(algo::Algorithm::erm, 0, 11);
    EXPECT_THROW(native_student_teacher(*erm, vec({0, 0, 0, 0})), MeasureIncompatible);
}

TEST(NativeSoftLabel, HandCases) {
    EXPECT_DOUBLE_EQ(native_softlabel(vec({0.8, 0.2}), 0.8), 0.0);
    EXPECT_NEAR(native_softlabel(vec({1.0, 0.0}), 0.8), 0.04, 1e-15);
    EXPECT_NEAR(native_softlabel(vec({0.6, 0.4}), 0.8), 0.04, 1e-15);
}

TEST(NativeJs, HandCasesAndBounds) {
    const std::vector<Vector> same{vec({0.2, 0.8}), vec({0.2, 0.8}), vec({0.2, 0.8})};
    EXPECT_EQ(native_js(same), 0.0);
    const std::vector<Vector> opposite{vec({1, 0}), vec({0, 1})};
    EXPECT_NEAR(native_js(opposite), std::log(2.0), 1e-15);
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Vector> members;
        const std::size_t k = 1 + trial % 6;
        for (std::size_t i = 0; i < k; ++i) members.push_back(random_simplex(4, rng));
        const double js = native_js(members);
        EXPECT_GE(js, 0.0);
        EXPECT_LE(js, std::log(static_cast<double>(k)) + 1e-12);
        std::reverse(members.begin(), members.end());
        EXPECT_NEAR(native_js(members), js, 1e-15);
    }
}

TEST(Dispatch, NativeFollowsAlgorithm) {
    using algo::Algorithm;
    const std::vector<std::pair<Algorithm, NativeKind>> ok{{Algorithm::mixup, NativeKind::mixup},
                                                           {Algorithm::rnd, NativeKind::student_teacher},
                                                           {Algorithm::oc, NativeKind::student_teacher},
                                                           {Algorithm::softlabeler, NativeKind::softlabel},
                                                           {Algorithm::mcdropout, NativeKind::jensen_shannon}};
    for (const auto& [a, kind] : ok) EXPECT_EQ(native_kind(posthoc::Ensemble({random_model(a, 0, 1)})), kind);
    for (auto a : {Algorithm::erm, Algorithm::rbf, Algorithm::mimo})
        EXPECT_THROW(native_kind(posthoc::Ensemble({random_model(a, 0, 1)})), MeasureIncompatible);
    for (auto a : algo::all_algorithms()) {
        std::vector<posthoc::ModelPtr> members;
        for (std::size_t t = 0; t < 5; ++t) members.push_back(random_model(a, t, 20 + t));
        EXPECT_EQ(native_kind(posthoc::Ensemble(members)), NativeKind::jensen_shannon);
    }
}

TEST(Dispatch, IncompatiblePairsRaise) {
    Rng rng(13);
    const auto val = validation_set(3, 5, 4, rng);
    posthoc::Ensemble erm({random_model(algo::Algorithm::erm, 0, 1)});
    EXPECT_THROW(prepare_measure(MeasureId::native, erm, val, 1), MeasureIncompatible);
    for (auto id : all_measures()) {
        if (id == MeasureId::native) continue;
        EXPECT_NO_THROW(prepare_measure(id, erm, val, 1)) << to_string(id);
    }
}

TEST(Dispatch, ContextCarriesStateOnlyWhenNeeded) {
    Rng rng(14);
    const auto val = validation_set(3, 5, 4, rng);
    posthoc::Ensemble mix({random_model(algo::Algorithm::mixup, 0, 1)});
    EXPECT_EQ(prepare_measure(MeasureId::gmm, mix, val, 1).gmm.size(), 1u);
    EXPECT_TRUE(prepare_measure(MeasureId::entropy, mix, val, 1).gmm.empty());
    const auto native = prepare_measure(MeasureId::native, mix, val, 1);
    ASSERT_TRUE(native.mixup.has_value());
    EXPECT_EQ(native.mixup->x_mean, mix.member(0).train_input_mean);
    MeasureContext bad;
    bad.id = MeasureId::gmm;
    EXPECT_THROW(bad.validate(), ContractError);
}

TEST(ScoreBatch, MatchesSingleExampleScores) {
    Rng rng(15);
    const Matrix x = random_matrix(4, 12, rng);
    const auto val = validation_set(3, 6, 4, rng);
    const auto ids = iota_ids(12);
    for (auto a : algo::all_algorithms()) {
        posthoc::Ensemble model({random_model(a, 0, 40)});
        const Matrix p = model.predict(x);
        const auto entropy = score_batch(prepare_measure(MeasureId::entropy, model, val, 3), model, x, ids);
        const auto jac = score_batch(prepare_measure(MeasureId::jacobian, model, val, 3), model, x, ids);
        for (Eigen::Index j = 0; j < 12; ++j) {
            EXPECT_DOUBLE_EQ(entropy(j), score_entropy(p.col(j)));
            EXPECT_DOUBLE_EQ(jac(j), model.jacobian(x.col(j)).squaredNorm());
        }
    }
}

TEST(ScoreBatch, SeededScoresFollowTheExampleNotThePosition) {
    Rng rng(16);
    const Matrix x = random_matrix(4, 6, rng);
    const auto val = validation_set(3, 6, 4, rng);
    posthoc::Ensemble model({random_model(algo::Algorithm::mixup, 0, 41)});
    const std::vector<std::uint64_t> ids{10, 11, 12, 13, 14, 15};
    const std::vector<std::uint64_t> rev{15, 14, 13, 12, 11, 10};
    const Matrix xr = x.rowwise().reverse();
    for (auto id : {MeasureId::augment, MeasureId::native}) {
        const auto ctx = prepare_measure(id, model, val, 77);
        const Vector a = score_batch(ctx, model, x, ids);
        const Vector b = score_batch(ctx, model, xr, rev);
        EXPECT_EQ(a, Vector(b.reverse())) << to_string(id);
        EXPECT_EQ(a, score_batch(ctx, model, x, ids)) << to_string(id);
    }
}

TEST(ScoreBatch, EnsembleGmmIsMeanOfMembers) {
    Rng rng(17);
    const Matrix x = random_matrix(4, 5, rng);
    const auto val = validation_set(3, 8, 4, rng);
    std::vector<posthoc::ModelPtr> members;
    for (std::size_t t = 0; t < 3; ++t) members.push_back(random_model(algo::Algorithm::erm, t, 60 + t));
    posthoc::Ensemble ens(members);
    const auto ids = iota_ids(5);
    const Vector s = score_batch(prepare_measure(MeasureId::gmm, ens, val, 1), ens, x, ids);
    Vector expected = Vector::Zero(5);
    for (std::size_t i = 0; i < 3; ++i) {
        posthoc::Ensemble single({members[i]});
        expected += score_batch(prepare_measure(MeasureId::gmm, single, val, 1), single, x, ids);
    }
    EXPECT_TRUE(s.isApprox(expected / 3.0, 1e-12));
}

TEST(Names, MeasureRoundTrip) {
    for (auto id : all_measures()) EXPECT_EQ(parse_measure(to_string(id)), id);
    EXPECT_EQ(parse_measure("Entropy"), MeasureId::entropy);
    EXPECT_THROW(parse_measure("energy"), ParameterError);
}

TEST(ScoreDump, RoundTripIsBitwise) {
    Rng rng(18);
    std::normal_distribution<double> g;
    std::vector<ScoreRecord> records;
    for (int i = 0; i < 50; ++i)
        records.push_back({"test:" + std::to_string(i), i % 3 ? Split::in : Split::out, i % 2 ? "entropy" : "gmm",
                           g(rng) * std::pow(10.0, i % 9 - 4)});
    const auto path = std::filesystem::temp_directory_path() / "ubench_scores.jsonl";
    write_score_dump(path, records);
    EXPECT_EQ(read_score_dump(path), records);
    const auto pools = pools_for(records, "entropy");
    EXPECT_EQ(pools.in.size() + pools.out.size(), 25u);
    std::filesystem::remove(path);
}

TEST(ScoreDump, BadLineNamesLocation) {
    const auto path = std::filesystem::temp_directory_path() / "ubench_bad_scores.jsonl";
    {
        std::ofstream os(path);
        os << R"({"example":"a","split":"in","measure":"gap","score":0.5})" << '\n';
        os << R"({"example":"b","split":"sideways","measure":"gap","score":0.5})" << '\n';
    }
    try {
        read_score_dump(path);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
    }
    std::filesystem::remove(path);
}
