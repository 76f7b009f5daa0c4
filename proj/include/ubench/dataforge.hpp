#pragma once

// Datasets, class prototypes, Ward clustering of prototypes, the root
// in/out class partition, and seeded train/validation splits.

#include "ubench/common.hpp"
#include "ubench/netcore.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace ubench::data {

enum class Role { train, val, test };
std::string to_string(Role role);

struct Dataset {
    Matrix features;  // N x d, one example per row
    std::vector<int> labels;
    std::size_t class_count = 0;
    Role role = Role::train;
    std::string provenance;
    std::vector<std::string> class_names;  // optional; index = class id

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }
    void validate() const;

    Dataset subset(std::span<const std::size_t> rows, Role role) const;
    /// Selected rows as a (d x B) column batch.
    Matrix columns(std::span<const std::size_t> rows) const;
    Matrix all_columns() const { return features.transpose(); }
    /// Content digest over features, labels and class count.
    std::uint64_t digest() const;
};

struct BlobSpec {
    std::size_t classes = 8;
    std::size_t per_class = 100;
    std::size_t dim = 16;
    std::size_t supercluster_count = 2;
    double spread = 1.0;       // std of class means around their super-cluster centre
    double separation = 8.0;   // distance scale between super-cluster centres
    double noise = 1.0;        // per-point isotropic std
};

/// Class-major rows; class c belongs to super-cluster c * S / classes.
Dataset generate_blobs(const BlobSpec& spec, std::uint64_t seed);

struct BlobSets {
    Dataset pool;  // role train; later split into train/val
    Dataset test;  // role test; same class means, fresh noise
};
BlobSets generate_blob_sets(const BlobSpec& spec, std::size_t test_per_class, std::uint64_t seed);

/// Row c = mean of phi(x) over class c (phi = identity without a featurizer).
Matrix class_prototypes(const Dataset& dataset, const net::Predictor* featurizer = nullptr);

struct MergeNode {
    std::size_t left = 0;   // node ids: leaves are 0..n-1, internal nodes n..2n-2
    std::size_t right = 0;
    double cost = 0.0;
    std::vector<std::size_t> members;
};

struct MergeTree {
    std::size_t leaf_count = 0;
    std::vector<MergeNode> internal;  // in merge order; node id = leaf_count + index

    std::size_t root() const { return leaf_count + internal.size() - 1; }
    bool is_leaf(std::size_t node) const { return node < leaf_count; }
    const MergeNode& node(std::size_t id) const { return internal.at(id - leaf_count); }
    /// Leaves under `node`, left subtree first.
    std::vector<std::size_t> leaves(std::size_t node) const;
    void validate() const;
};

/// Ward agglomeration with Lance-Williams updates; ties go to the
/// lexicographically smallest (min-leaf, min-leaf) pair.
MergeTree ward_tree(const Matrix& prototypes);

/// Merge cost of two clusters: |A||B|/(|A|+|B|) * ||mu_A - mu_B||^2.
double ward_linkage(std::size_t size_a, const Vector& mean_a, std::size_t size_b, const Vector& mean_b);

struct ClassPartition {
    std::vector<int> in_classes;
    std::vector<int> out_classes;
    MergeTree tree;
    std::map<int, int> in_label_map;  // original class id -> 0..C-1
};

/// Equal-size sets from the root's two children, in leaf-traversal order.
ClassPartition root_partition(const MergeTree& tree);

/// `[in]` / `[out]` sections, one class id per line.
void write_partition(const std::filesystem::path& path, const ClassPartition& partition);
std::pair<std::vector<int>, std::vector<int>> read_partition(const std::filesystem::path& path);

/// Rows of in-domain classes with labels remapped through in_label_map.
Dataset in_domain_view(const Dataset& dataset, const ClassPartition& partition);
/// Rows of out-domain classes (labels kept as original ids).
Dataset out_domain_view(const Dataset& dataset, const ClassPartition& partition);

struct SplitSpec {
    std::uint64_t data_seed = 0;
    double train_fraction = 0.9;
};

/// Seeded permutation; first ceil(f*N) rows train, the rest validation.
std::pair<Dataset, Dataset> split_train_val(const Dataset& dataset, const SplitSpec& spec);

/// CSV with a header; the `label` column is mapped to dense ids in order of
/// first appearance, every other column is a numeric feature.
Dataset load_tabular(const std::filesystem::path& path);
void write_tabular(const std::filesystem::path& path, const Dataset& dataset);

/// Non-empty, non-comment lines of a class-list asset (e.g. WordNet ids).
std::vector<std::string> load_class_list(const std::filesystem::path& path);

}  // namespace ubench::data
