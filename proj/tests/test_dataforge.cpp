#include "ubench/dataforge.hpp"
#include "ubench/oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

using namespace ubench;
using namespace ubench::data;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "ubench_test_dataforge";
    std::filesystem::create_directories(dir);
    return dir / name;
}

MergeTree manual_tree(std::size_t leaves, std::vector<std::pair<std::size_t, std::size_t>> merges) {
    MergeTree t;
    t.leaf_count = leaves;
    for (auto [a, b] : merges) {
        MergeNode n;
        n.left = a;
        n.right = b;
        t.internal.push_back(n);
        const std::size_t id = leaves + t.internal.size() - 1;
        t.internal.back().members = t.leaves(id);
    }
    return t;
}

}  // namespace

TEST(Blobs, CountsPerClass) {
    BlobSpec spec;
    spec.classes = 8;
    spec.per_class = 100;
    const auto ds = generate_blobs(spec, 1);
    ASSERT_EQ(ds.size(), 800u);
    std::vector<int> counts(8, 0);
    for (int y : ds.labels) ++counts[static_cast<std::size_t>(y)];
    for (int c : counts) EXPECT_EQ(c, 100);
    ds.validate();
}

TEST(Blobs, ZeroNoiseCollapsesToMeans) {
    BlobSpec spec;
    spec.noise = 0.0;
    spec.per_class = 5;
    const auto ds = generate_blobs(spec, 3);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::size_t first = static_cast<std::size_t>(ds.labels[i]) * spec.per_class;
        EXPECT_EQ(ds.features.row(static_cast<Eigen::Index>(i)), ds.features.row(static_cast<Eigen::Index>(first)));
    }
}

TEST(Blobs, DeterministicPerSeed) {
    BlobSpec spec;
    const auto a = generate_blobs(spec, 42);
    const auto b = generate_blobs(spec, 42);
    const auto c = generate_blobs(spec, 43);
    EXPECT_EQ(a.features, b.features);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_NE(a.features, c.features);
}

TEST(Blobs, TestSetSharesMeansButNotNoise) {
    BlobSpec spec;
    spec.noise = 0.0;
    const auto sets = generate_blob_sets(spec, 7, 5);
    EXPECT_EQ(sets.test.size(), 7 * spec.classes);
    EXPECT_EQ(sets.test.role, Role::test);
    EXPECT_LE((class_prototypes(sets.pool) - class_prototypes(sets.test)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Blobs, InvalidSpecs) {
    BlobSpec spec;
    spec.classes = 1;
    EXPECT_THROW(generate_blobs(spec, 0), ParameterError);
    spec = {};
    spec.per_class = 0;
    EXPECT_THROW(generate_blobs(spec, 0), ParameterError);
    spec = {};
    spec.dim = 0;
    EXPECT_THROW(generate_blobs(spec, 0), ParameterError);
}

TEST(Prototypes, SingleExampleAndMidpoint) {
    Dataset ds;
    ds.features.resize(3, 2);
    ds.features << 0, 0, 5, 5, 2, 4;
    ds.labels = {0, 1, 0};
    ds.class_count = 2;
    const Matrix p = class_prototypes(ds);
    EXPECT_DOUBLE_EQ(p(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(p(0, 1), 2.0);
    EXPECT_DOUBLE_EQ(p(1, 0), 5.0);
    EXPECT_DOUBLE_EQ(p(1, 1), 5.0);
}

TEST(Prototypes, MatchesPerClassMeanOracle) {
    BlobSpec spec;
    spec.classes = 6;
    spec.per_class = 17;
    spec.dim = 5;
    const auto ds = generate_blobs(spec, 9);
    const Matrix p = class_prototypes(ds);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        std::vector<std::vector<double>> rows;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            if (ds.labels[i] != static_cast<int>(c)) continue;
            rows.emplace_back();
            for (std::size_t d = 0; d < spec.dim; ++d)
                rows.back().push_back(ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)));
        }
        const auto m = oracle::brute_moments(rows);
        for (std::size_t d = 0; d < spec.dim; ++d)
            EXPECT_NEAR(p(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(d)), m.mean[d], 1e-12);
    }
}

TEST(Prototypes, EmptyClassNamed) {
    Dataset ds;
    ds.features = Matrix::Zero(2, 1);
    ds.labels = {0, 2};
    ds.class_count = 3;
    try {
        class_prototypes(ds);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos);
    }
}

TEST(Prototypes, FeaturizerOutputWidth) {
    net::PredictorConfig cfg;
    cfg.input_dim = 4;
    cfg.hidden_widths = {8};
    cfg.feature_dim = 3;
    cfg.num_classes = 2;
    const net::Predictor model(cfg, 1);
    BlobSpec spec;
    spec.classes = 3;
    spec.per_class = 4;
    spec.dim = 4;
    const auto p = class_prototypes(generate_blobs(spec, 2), &model);
    EXPECT_EQ(p.rows(), 3);
    EXPECT_EQ(p.cols(), 3);
}

TEST(Ward, TwoPointsCostTwo) {
    Matrix pts(2, 1);
    pts << 0, 2;
    const auto t = ward_tree(pts);
    ASSERT_EQ(t.internal.size(), 1u);
    EXPECT_DOUBLE_EQ(t.internal[0].cost, 2.0);
}

TEST(Ward, IdenticalPrototypesZeroCost) {
    const Matrix pts = Matrix::Constant(7, 3, 1.5);
    const auto t = ward_tree(pts);
    for (const auto& n : t.internal) EXPECT_EQ(n.cost, 0.0);
    t.validate();
}

TEST(Ward, TooFewRows) {
    EXPECT_THROW(ward_tree(Matrix::Zero(1, 3)), ParameterError);
}

TEST(Ward, MatchesBruteForceOracle) {
    Rng rng(77);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 25; ++trial) {
        Matrix pts(12, 3);
        for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = g(rng);
        const auto tree = ward_tree(pts);
        const auto ref = oracle::brute_force_ward(pts);
        ASSERT_EQ(tree.internal.size(), ref.size());
        for (std::size_t k = 0; k < ref.size(); ++k) {
            const auto& n = tree.internal[k];
            const auto left = tree.leaves(n.left);
            const auto right = tree.leaves(n.right);
            EXPECT_EQ(*std::min_element(left.begin(), left.end()), ref[k].a_min_leaf);
            EXPECT_EQ(*std::min_element(right.begin(), right.end()), ref[k].b_min_leaf);
            EXPECT_NEAR(n.cost, ref[k].cost, 1e-9);
        }
    }
}

TEST(Ward, MonotoneCostsAndValidTree) {
    Rng rng(5);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 20; ++trial) {
        Matrix pts(40, 4);
        for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = g(rng);
        const auto tree = ward_tree(pts);
        tree.validate();
        for (std::size_t k = 1; k < tree.internal.size(); ++k)
            EXPECT_GE(tree.internal[k].cost, tree.internal[k - 1].cost - 1e-9);
    }
}

TEST(Partition, BalancedFourLeaves) {
    const auto t = manual_tree(4, {{0, 1}, {2, 3}, {4, 5}});
    const auto p = root_partition(t);
    EXPECT_EQ(p.in_classes, (std::vector<int>{0, 1}));
    EXPECT_EQ(p.out_classes, (std::vector<int>{2, 3}));
}

TEST(Partition, UnevenSidesTakeFirstOfTraversal) {
    // root = ({3,1}, ({4,0},2)) -> L = [3,1], R = [4,0,2]
    const auto t = manual_tree(5, {{3, 1}, {4, 0}, {6, 2}, {5, 7}});
    const auto p = root_partition(t);
    EXPECT_EQ(p.in_classes, (std::vector<int>{3, 1}));
    EXPECT_EQ(p.out_classes, (std::vector<int>{4, 0}));
    EXPECT_EQ(p.in_label_map.at(3), 0);
    EXPECT_EQ(p.in_label_map.at(1), 1);
}

TEST(Partition, PropertiesOnRandomTrees) {
    Rng rng(11);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 30; ++trial) {
        const auto n = static_cast<Eigen::Index>(2 + trial % 15);
        Matrix pts(n, 2);
        for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = g(rng);
        const auto p = root_partition(ward_tree(pts));
        ASSERT_FALSE(p.in_classes.empty());
        EXPECT_EQ(p.in_classes.size(), p.out_classes.size());
        std::set<int> in(p.in_classes.begin(), p.in_classes.end());
        for (int c : p.out_classes) EXPECT_FALSE(in.count(c));
        for (int c : p.in_classes) EXPECT_LT(c, n);
        std::set<int> labels;
        for (auto [cls, label] : p.in_label_map) labels.insert(label);
        EXPECT_EQ(labels.size(), p.in_classes.size());
        EXPECT_EQ(*labels.rbegin(), static_cast<int>(p.in_classes.size()) - 1);
    }
}

TEST(Partition, ExportRoundTrip) {
    const auto p = root_partition(manual_tree(5, {{3, 1}, {4, 0}, {6, 2}, {5, 7}}));
    const auto path = temp_file("partition.txt");
    write_partition(path, p);
    const auto [in, out] = read_partition(path);
    EXPECT_EQ(in, p.in_classes);
    EXPECT_EQ(out, p.out_classes);
}

TEST(Partition, DomainViews) {
    BlobSpec spec;
    spec.classes = 4;
    spec.per_class = 3;
    const auto ds = generate_blobs(spec, 1);
    const auto p = root_partition(manual_tree(4, {{0, 3}, {1, 2}, {4, 5}}));
    const auto in = in_domain_view(ds, p);
    EXPECT_EQ(in.class_count, 2u);
    EXPECT_EQ(in.size(), 6u);
    for (int y : in.labels) EXPECT_TRUE(y == 0 || y == 1);
    const auto out = out_domain_view(ds, p);
    EXPECT_EQ(out.size(), 6u);
    for (int y : out.labels) EXPECT_TRUE(y == 1 || y == 2);
}

TEST(Assets, ClassListsAre266Each) {
    const auto dir = std::filesystem::path(UBENCH_DATA_DIR);
    const auto in = load_class_list(dir / "imagenot_in_domain.txt");
    const auto out = load_class_list(dir / "imagenot_out_domain.txt");
    EXPECT_EQ(in.size(), 266u);
    EXPECT_EQ(out.size(), 266u);
    std::set<std::string> all(in.begin(), in.end());
    all.insert(out.begin(), out.end());
    EXPECT_EQ(all.size(), 532u);
}

TEST(Split, NinetyTen) {
    Dataset ds;
    ds.features = Matrix::Zero(10, 1);
    ds.labels.assign(10, 0);
    ds.class_count = 1;
    const auto [tr, va] = split_train_val(ds, {1, 0.9});
    EXPECT_EQ(tr.size(), 9u);
    EXPECT_EQ(va.size(), 1u);
    EXPECT_EQ(tr.role, Role::train);
    EXPECT_EQ(va.role, Role::val);
}

TEST(Split, DisjointAndExhaustive) {
    Dataset ds;
    ds.features.resize(57, 1);
    for (int i = 0; i < 57; ++i) ds.features(i, 0) = i;
    ds.labels.assign(57, 0);
    ds.class_count = 1;
    const auto [tr, va] = split_train_val(ds, {3, 0.9});
    std::set<double> seen;
    for (Eigen::Index i = 0; i < tr.features.rows(); ++i) seen.insert(tr.features(i, 0));
    for (Eigen::Index i = 0; i < va.features.rows(); ++i) EXPECT_FALSE(seen.count(va.features(i, 0)));
    for (Eigen::Index i = 0; i < va.features.rows(); ++i) seen.insert(va.features(i, 0));
    EXPECT_EQ(seen.size(), 57u);
}

TEST(Split, SeedsGiveDifferentPermutations) {
    Dataset ds;
    ds.features.resize(1000, 1);
    for (int i = 0; i < 1000; ++i) ds.features(i, 0) = i;
    ds.labels.assign(1000, 0);
    ds.class_count = 1;
    const auto a = split_train_val(ds, {1, 0.9}).first;
    const auto b = split_train_val(ds, {2, 0.9}).first;
    const auto a2 = split_train_val(ds, {1, 0.9}).first;
    EXPECT_NE(a.features, b.features);
    EXPECT_EQ(a.features, a2.features);
}

TEST(Split, DegenerateFractions) {
    Dataset ds;
    ds.features = Matrix::Zero(3, 1);
    ds.labels.assign(3, 0);
    ds.class_count = 1;
    EXPECT_THROW(split_train_val(ds, {0, 0.0}), ParameterError);
    EXPECT_THROW(split_train_val(ds, {0, 1.0}), ParameterError);
    EXPECT_THROW(split_train_val(ds, {0, 0.99}), ParameterError);
}

TEST(Tabular, FirstAppearanceLabels) {
    const auto path = temp_file("three.csv");
    std::ofstream(path) << "f1,label,f2\n1.5,a,2\n3,b,4\n-1e-3,a,0\n";
    const auto ds = load_tabular(path);
    EXPECT_EQ(ds.labels, (std::vector<int>{0, 1, 0}));
    EXPECT_EQ(ds.class_count, 2u);
    EXPECT_EQ(ds.dim(), 2u);
    EXPECT_DOUBLE_EQ(ds.features(0, 0), 1.5);
    EXPECT_DOUBLE_EQ(ds.features(2, 0), -1e-3);
    EXPECT_DOUBLE_EQ(ds.features(1, 1), 4.0);
}

TEST(Tabular, RaggedRowNamesLine) {
    const auto path = temp_file("ragged.csv");
    std::ofstream(path) << "x,label\n1,a\n2,b,3\n";
    try {
        load_tabular(path);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
    }
}

TEST(Tabular, NonNumericAndMissingLabel) {
    const auto bad = temp_file("bad.csv");
    std::ofstream(bad) << "x,label\nabc,a\n";
    EXPECT_THROW(load_tabular(bad), ParseError);
    const auto nolabel = temp_file("nolabel.csv");
    std::ofstream(nolabel) << "x,y\n1,2\n";
    EXPECT_THROW(load_tabular(nolabel), ParseError);
}

TEST(Tabular, RoundTripBlobs) {
    BlobSpec spec;
    spec.classes = 5;
    spec.per_class = 20;
    spec.dim = 7;
    const auto ds = generate_blobs(spec, 8);
    const auto path = temp_file("blobs.csv");
    write_tabular(path, ds);
    const auto back = load_tabular(path);
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_LE((back.features - ds.features).cwiseAbs().maxCoeff(), 1e-12);
}
