#include "ubench/dataforge.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

namespace ubench::data {

std::string to_string(Role role) {
    switch (role) {
        case Role::train: return "train";
        case Role::val: return "val";
        case Role::test: return "test";
    }
    return "?";
}

void Dataset::validate() const {
    if (labels.empty()) throw DataError("dataset is empty");
    if (static_cast<std::size_t>(features.rows()) != labels.size())
        throw ShapeError("dataset has " + std::to_string(features.rows()) + " feature rows but " +
                         std::to_string(labels.size()) + " labels");
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count)
            throw DataError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                            " outside 0.." + std::to_string(class_count - 1));
    if (!features.allFinite()) throw DataError("dataset contains non-finite features");
}

Dataset Dataset::subset(std::span<const std::size_t> rows, Role new_role) const {
    Dataset out;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    out.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
        out.labels.push_back(labels.at(rows[i]));
    }
    out.class_count = class_count;
    out.role = new_role;
    out.provenance = provenance;
    out.class_names = class_names;
    return out;
}

Matrix Dataset::columns(std::span<const std::size_t> rows) const {
    Matrix out(features.cols(), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.col(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i])).transpose();
    return out;
}

std::uint64_t Dataset::digest() const {
    std::uint64_t h = fnv1a("dataset");
    auto mix_bytes = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    const Eigen::Index r = features.rows(), c = features.cols();
    mix_bytes(&r, sizeof r);
    mix_bytes(&c, sizeof c);
    mix_bytes(features.data(), sizeof(double) * static_cast<std::size_t>(features.size()));
    mix_bytes(labels.data(), sizeof(int) * labels.size());
    mix_bytes(&class_count, sizeof class_count);
    return h;
}

namespace {

void check_spec(const BlobSpec& spec) {
    if (spec.classes < 2) throw ParameterError("blobs: classes must be >= 2");
    if (spec.per_class < 1) throw ParameterError("blobs: per_class must be >= 1");
    if (spec.dim < 1) throw ParameterError("blobs: dim must be >= 1");
    if (spec.supercluster_count < 1 || spec.supercluster_count > spec.classes)
        throw ParameterError("blobs: supercluster_count must be in 1..classes");
    if (!(spec.spread >= 0) || !(spec.noise >= 0) || !(spec.separation >= 0))
        throw ParameterError("blobs: spread, separation and noise must be >= 0");
}

// Super-cluster s sits on axis (s mod dim), sign flipping each time the axes wrap.
Matrix class_means(const BlobSpec& spec, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {fnv1a("blob-means")}));
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix means(static_cast<Eigen::Index>(spec.classes), static_cast<Eigen::Index>(spec.dim));
    for (std::size_t c = 0; c < spec.classes; ++c) {
        const std::size_t s = c * spec.supercluster_count / spec.classes;
        Vector centre = Vector::Zero(static_cast<Eigen::Index>(spec.dim));
        if (spec.supercluster_count > 1) {
            const double sign = (s / spec.dim) % 2 == 0 ? 1.0 : -1.0;
            centre(static_cast<Eigen::Index>(s % spec.dim)) = sign * spec.separation;
        }
        for (std::size_t d = 0; d < spec.dim; ++d)
            means(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(d)) =
                centre(static_cast<Eigen::Index>(d)) + spec.spread * gauss(rng);
    }
    return means;
}

Dataset sample_points(const BlobSpec& spec, const Matrix& means, std::size_t per_class, Rng& rng, Role role,
                      std::string provenance) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Dataset ds;
    const auto n = static_cast<Eigen::Index>(spec.classes * per_class);
    ds.features.resize(n, static_cast<Eigen::Index>(spec.dim));
    ds.labels.reserve(static_cast<std::size_t>(n));
    Eigen::Index row = 0;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        for (std::size_t i = 0; i < per_class; ++i, ++row) {
            for (std::size_t d = 0; d < spec.dim; ++d) {
                const double eps = gauss(rng);
                ds.features(row, static_cast<Eigen::Index>(d)) =
                    means(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(d)) + spec.noise * eps;
            }
            ds.labels.push_back(static_cast<int>(c));
        }
    }
    ds.class_count = spec.classes;
    ds.role = role;
    ds.provenance = std::move(provenance);
    return ds;
}

std::string blob_provenance(const BlobSpec& spec, std::uint64_t seed) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "blobs(classes=%zu,per_class=%zu,dim=%zu,superclusters=%zu,spread=%g,separation=%g,noise=%g,seed=%llu)",
                  spec.classes, spec.per_class, spec.dim, spec.supercluster_count, spec.spread, spec.separation,
                  spec.noise, static_cast<unsigned long long>(seed));
    return buf;
}

}  // namespace

Dataset generate_blobs(const BlobSpec& spec, std::uint64_t seed) {
    check_spec(spec);
    const Matrix means = class_means(spec, seed);
    Rng rng(derive_seed(seed, {fnv1a("blob-pool")}));
    return sample_points(spec, means, spec.per_class, rng, Role::train, blob_provenance(spec, seed));
}

BlobSets generate_blob_sets(const BlobSpec& spec, std::size_t test_per_class, std::uint64_t seed) {
    if (test_per_class < 1) throw ParameterError("blobs: test_per_class must be >= 1");
    BlobSets sets{generate_blobs(spec, seed), {}};
    const Matrix means = class_means(spec, seed);
    Rng rng(derive_seed(seed, {fnv1a("blob-test")}));
    sets.test = sample_points(spec, means, test_per_class, rng, Role::test, blob_provenance(spec, seed) + "/test");
    return sets;
}

Matrix class_prototypes(const Dataset& dataset, const net::Predictor* featurizer) {
    Matrix phi;
    if (featurizer == nullptr) {
        phi = dataset.features;
    } else {
        phi = featurizer->features(dataset.all_columns()).transpose();
    }
    Matrix sums = Matrix::Zero(static_cast<Eigen::Index>(dataset.class_count), phi.cols());
    std::vector<std::size_t> counts(dataset.class_count, 0);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto c = static_cast<std::size_t>(dataset.labels[i]);
        sums.row(static_cast<Eigen::Index>(c)) += phi.row(static_cast<Eigen::Index>(i));
        ++counts[c];
    }
    for (std::size_t c = 0; c < dataset.class_count; ++c) {
        if (counts[c] == 0) throw DataError("class " + std::to_string(c) + " has no examples");
        sums.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(counts[c]);
    }
    return sums;
}

double ward_linkage(std::size_t size_a, const Vector& mean_a, std::size_t size_b, const Vector& mean_b) {
    const double na = static_cast<double>(size_a), nb = static_cast<double>(size_b);
    return na * nb / (na + nb) * (mean_a - mean_b).squaredNorm();
}

std::vector<std::size_t> MergeTree::leaves(std::size_t start) const {
    std::vector<std::size_t> out;
    std::vector<std::size_t> stack{start};
    while (!stack.empty()) {
        const std::size_t id = stack.back();
        stack.pop_back();
        if (is_leaf(id)) {
            out.push_back(id);
        } else {
            const auto& n = node(id);
            stack.push_back(n.right);
            stack.push_back(n.left);
        }
    }
    return out;
}

void MergeTree::validate() const {
    if (leaf_count < 2) throw ContractError("merge tree needs at least 2 leaves");
    if (internal.size() != leaf_count - 1) throw ContractError("merge tree must have leaf_count - 1 internal nodes");
    std::vector<bool> used(leaf_count + internal.size(), false);
    for (std::size_t k = 0; k < internal.size(); ++k) {
        const auto& n = internal[k];
        const std::size_t id = leaf_count + k;
        for (std::size_t child : {n.left, n.right}) {
            if (child >= id) throw ContractError("merge tree child refers to a later node");
            if (used[child]) throw ContractError("merge tree node used twice");
            used[child] = true;
        }
        if (!(n.cost >= 0)) throw ContractError("merge tree cost must be nonnegative");
        auto expect = leaves(id);
        auto got = n.members;
        std::sort(expect.begin(), expect.end());
        std::sort(got.begin(), got.end());
        if (expect != got) throw ContractError("merge tree members disagree with children");
    }
}

MergeTree ward_tree(const Matrix& prototypes) {
    const auto n = static_cast<std::size_t>(prototypes.rows());
    if (n < 2) throw ParameterError("ward_tree needs at least 2 prototypes");
    if (!prototypes.allFinite()) throw NumericError("ward_tree: non-finite prototype");

    // Slot i holds the cluster whose smallest leaf is i, so scanning slots in
    // order is the same as scanning by (min-leaf, min-leaf).
    Matrix dist = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = 0.5 * (prototypes.row(static_cast<Eigen::Index>(i)) -
                                    prototypes.row(static_cast<Eigen::Index>(j)))
                                       .squaredNorm();
            dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d;
            dist(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = d;
        }

    std::vector<std::size_t> active(n);
    std::iota(active.begin(), active.end(), 0);
    std::vector<std::size_t> node_of(n), size(n, 1);
    std::iota(node_of.begin(), node_of.end(), 0);
    std::vector<std::vector<std::size_t>> members(n);
    for (std::size_t i = 0; i < n; ++i) members[i] = {i};

    MergeTree tree;
    tree.leaf_count = n;
    tree.internal.reserve(n - 1);
    while (active.size() > 1) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t bi = 0, bj = 0;
        for (std::size_t a = 0; a < active.size(); ++a)
            for (std::size_t b = a + 1; b < active.size(); ++b) {
                const double d = dist(static_cast<Eigen::Index>(active[a]), static_cast<Eigen::Index>(active[b]));
                if (d < best) {
                    best = d;
                    bi = a;
                    bj = b;
                }
            }
        const std::size_t i = active[bi], j = active[bj];
        const double ni = static_cast<double>(size[i]), nj = static_cast<double>(size[j]);
        for (std::size_t k : active) {
            if (k == i || k == j) continue;
            const auto I = static_cast<Eigen::Index>(i), J = static_cast<Eigen::Index>(j),
                       K = static_cast<Eigen::Index>(k);
            const double nk = static_cast<double>(size[k]);
            const double updated =
                ((ni + nk) * dist(I, K) + (nj + nk) * dist(J, K) - nk * dist(I, J)) / (ni + nj + nk);
            dist(I, K) = updated;
            dist(K, I) = updated;
        }
        MergeNode node;
        node.left = node_of[i];
        node.right = node_of[j];
        node.cost = std::max(0.0, best);
        node.members = members[i];
        node.members.insert(node.members.end(), members[j].begin(), members[j].end());
        members[i] = node.members;
        members[j].clear();
        size[i] += size[j];
        node_of[i] = n + tree.internal.size();
        tree.internal.push_back(std::move(node));
        active.erase(active.begin() + static_cast<std::ptrdiff_t>(bj));
    }
    return tree;
}

ClassPartition root_partition(const MergeTree& tree) {
    tree.validate();
    const auto& root = tree.node(tree.root());
    const auto left = tree.leaves(root.left);
    const auto right = tree.leaves(root.right);
    const std::size_t m = std::min(left.size(), right.size());
    ClassPartition p;
    p.tree = tree;
    for (std::size_t i = 0; i < m; ++i) {
        p.in_classes.push_back(static_cast<int>(left[i]));
        p.out_classes.push_back(static_cast<int>(right[i]));
        p.in_label_map[static_cast<int>(left[i])] = static_cast<int>(i);
    }
    return p;
}

void write_partition(const std::filesystem::path& path, const ClassPartition& partition) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write partition file " + path.string());
    os << "[in]\n";
    for (int c : partition.in_classes) os << c << '\n';
    os << "[out]\n";
    for (int c : partition.out_classes) os << c << '\n';
}

std::pair<std::vector<int>, std::vector<int>> read_partition(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("cannot open partition file " + path.string());
    std::pair<std::vector<int>, std::vector<int>> out;
    std::vector<int>* section = nullptr;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line == "[in]") {
            section = &out.first;
            continue;
        }
        if (line == "[out]") {
            section = &out.second;
            continue;
        }
        int v = 0;
        const auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
        if (section == nullptr || ec != std::errc() || ptr != line.data() + line.size() || v < 0)
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": bad partition line '" + line + "'");
        section->push_back(v);
    }
    return out;
}

Dataset in_domain_view(const Dataset& dataset, const ClassPartition& partition) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        if (partition.in_label_map.count(dataset.labels[i])) rows.push_back(i);
    if (rows.empty()) throw DataError("no in-domain rows in " + to_string(dataset.role) + " set");
    Dataset out = dataset.subset(rows, dataset.role);
    for (int& y : out.labels) y = partition.in_label_map.at(y);
    out.class_count = partition.in_classes.size();
    if (!dataset.class_names.empty()) {
        out.class_names.clear();
        for (int c : partition.in_classes) out.class_names.push_back(dataset.class_names.at(static_cast<std::size_t>(c)));
    }
    return out;
}

Dataset out_domain_view(const Dataset& dataset, const ClassPartition& partition) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        if (std::find(partition.out_classes.begin(), partition.out_classes.end(), dataset.labels[i]) !=
            partition.out_classes.end())
            rows.push_back(i);
    if (rows.empty()) throw DataError("no out-domain rows in " + to_string(dataset.role) + " set");
    return dataset.subset(rows, dataset.role);
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& dataset, const SplitSpec& spec) {
    if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
        throw ParameterError("train_fraction must be in (0, 1)");
    const std::size_t n = dataset.size();
    if (n < 2) throw ParameterError("split needs at least 2 rows");
    const auto n_train = static_cast<std::size_t>(std::ceil(spec.train_fraction * static_cast<double>(n) - 1e-9));
    if (n_train == 0 || n_train >= n)
        throw ParameterError("train_fraction " + std::to_string(spec.train_fraction) + " leaves an empty side for N=" +
                             std::to_string(n));
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(spec.data_seed, {fnv1a("split")}));
    std::shuffle(perm.begin(), perm.end(), rng);
    std::span<const std::size_t> all(perm);
    return {dataset.subset(all.first(n_train), Role::train), dataset.subset(all.subspan(n_train), Role::val)};
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

}  // namespace

Dataset load_tabular(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open " + path.string());
    const std::string where = path.string() + ":";
    std::string line;
    if (!std::getline(is, line)) throw ParseError(where + "1: missing header");
    const auto header = split_commas(line);
    std::size_t label_col = header.size();
    for (std::size_t i = 0; i < header.size(); ++i)
        if (trim(header[i]) == "label") label_col = i;
    if (label_col == header.size()) throw ParseError(where + "1: no 'label' column");
    const std::size_t d = header.size() - 1;

    std::vector<double> values;
    std::vector<int> labels;
    std::vector<std::string> names;
    std::unordered_map<std::string, int> ids;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const auto cells = split_commas(line);
        if (cells.size() != header.size())
            throw ParseError(where + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                             " columns, found " + std::to_string(cells.size()));
        for (std::size_t i = 0; i < cells.size(); ++i) {
            const auto cell = trim(cells[i]);
            if (i == label_col) {
                std::string key(cell);
                if (key.empty()) throw ParseError(where + std::to_string(lineno) + ": empty label");
                auto [it, inserted] = ids.emplace(key, static_cast<int>(names.size()));
                if (inserted) names.push_back(key);
                labels.push_back(it->second);
                continue;
            }
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v))
                throw ParseError(where + std::to_string(lineno) + ": non-numeric feature '" + std::string(cell) +
                                 "' in column '" + std::string(trim(header[i])) + "'");
            values.push_back(v);
        }
    }
    if (labels.empty()) throw ParseError(where + " no data rows");

    Dataset ds;
    ds.features.resize(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(d));
    for (std::size_t r = 0; r < labels.size(); ++r)
        for (std::size_t c = 0; c < d; ++c)
            ds.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = values[r * d + c];
    ds.labels = std::move(labels);
    ds.class_count = names.size();
    ds.class_names = std::move(names);
    ds.role = Role::train;
    ds.provenance = "csv:" + path.filename().string() + "#" + hex64(ds.digest());
    return ds;
}

void write_tabular(const std::filesystem::path& path, const Dataset& dataset) {
    dataset.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + path.string());
    for (std::size_t c = 0; c < dataset.dim(); ++c) os << 'x' << c << ',';
    os << "label\n";
    char buf[32];
    for (std::size_t r = 0; r < dataset.size(); ++r) {
        for (std::size_t c = 0; c < dataset.dim(); ++c) {
            std::snprintf(buf, sizeof buf, "%.17g",
                          dataset.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
            os << buf << ',';
        }
        const auto y = static_cast<std::size_t>(dataset.labels[r]);
        if (y < dataset.class_names.size())
            os << dataset.class_names[y];
        else
            os << y;
        os << '\n';
    }
    if (!os) throw Error("error writing " + path.string());
}

std::vector<std::string> load_class_list(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("cannot open class list " + path.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(is, line)) {
        const auto t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        out.emplace_back(t);
    }
    return out;
}

}  // namespace ubench::data
