#include "ubench/pipeline.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace ubench::pipeline {

namespace {

struct KeySpec {
    std::function<void(SweepConfig&, const YAML::Node&)> set;
    std::function<std::string(const SweepConfig&)> get;
};

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

std::vector<std::string> list_of(const YAML::Node& n) {
    std::vector<std::string> out;
    if (n.IsSequence()) {
        for (const auto& item : n) {
            if (!item.IsScalar()) throw ConfigError("list items must be scalars");
            out.push_back(trim(item.Scalar()));
        }
        return out;
    }
    if (!n.IsScalar()) throw ConfigError("expected a scalar or a list");
    std::stringstream ss(n.Scalar());
    std::string item;
    while (std::getline(ss, item, ','))
        if (!trim(item).empty()) out.push_back(trim(item));
    return out;
}

template <class T>
T scalar(const YAML::Node& n) {
    if (!n.IsScalar()) throw ConfigError("expected a single value");
    try {
        return n.as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError("cannot read '" + n.Scalar() + "'");
    }
}

std::size_t count(const YAML::Node& n) {
    const auto v = scalar<long long>(n);
    if (v < 0) throw ConfigError("expected a non-negative integer");
    return static_cast<std::size_t>(v);
}

bool boolean(const std::string& s) {
    if (s == "true" || s == "yes" || s == "on" || s == "1") return true;
    if (s == "false" || s == "no" || s == "off" || s == "0") return false;
    throw ConfigError("expected true or false, got '" + s + "'");
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T, class F>
std::string join(const std::vector<T>& items, F name) {
    std::string out = "[";
    for (std::size_t i = 0; i < items.size(); ++i) out += (i ? ", " : "") + name(items[i]);
    return out + "]";
}

std::string quoted(const std::string& s) { return YAML::Dump(YAML::Node(s)); }

template <class T>
void unique_or_throw(const std::vector<T>& v, const char* what) {
    std::set<T> s(v.begin(), v.end());
    if (s.size() != v.size()) throw ConfigError(std::string(what) + " lists an entry twice");
}

#define UB_SIZE(key, field)                                                     \
    {key, {[](SweepConfig& c, const YAML::Node& n) { c.field = count(n); },    \
           [](const SweepConfig& c) { return std::to_string(c.field); }}}
#define UB_REAL(key, field)                                                             \
    {key, {[](SweepConfig& c, const YAML::Node& n) { c.field = scalar<double>(n); },   \
           [](const SweepConfig& c) { return num(c.field); }}}

const std::map<std::string, KeySpec>& key_table() {
    static const std::map<std::string, KeySpec> table{
        {"schema_version",
         {[](SweepConfig& c, const YAML::Node& n) { c.schema_version = scalar<int>(n); },
          [](const SweepConfig& c) { return std::to_string(c.schema_version); }}},
        {"seed",
         {[](SweepConfig& c, const YAML::Node& n) { c.seed = scalar<std::uint64_t>(n); },
          [](const SweepConfig& c) { return std::to_string(c.seed); }}},
        {"output_dir",
         {[](SweepConfig& c, const YAML::Node& n) { c.output_dir = scalar<std::string>(n); },
          [](const SweepConfig& c) { return quoted(c.output_dir.string()); }}},
        {"algorithms",
         {[](SweepConfig& c, const YAML::Node& n) {
              c.algorithms.clear();
              for (const auto& s : list_of(n)) c.algorithms.push_back(algo::parse_algorithm(s));
          },
          [](const SweepConfig& c) {
              return join(c.algorithms, [](algo::Algorithm a) { return algo::to_string(a); });
          }}},
        {"size_tiers",
         {[](SweepConfig& c, const YAML::Node& n) {
              c.size_tiers.clear();
              for (const auto& s : list_of(n)) c.size_tiers.push_back(net::parse_size_tier(s));
          },
          [](const SweepConfig& c) { return join(c.size_tiers, [](net::SizeTier t) { return net::to_string(t); }); }}},
        {"spectral",
         {[](SweepConfig& c, const YAML::Node& n) {
              c.spectral.clear();
              for (const auto& s : list_of(n)) c.spectral.push_back(boolean(s));
          },
          [](const SweepConfig& c) {
              return join(c.spectral, [](bool b) { return std::string(b ? "true" : "false"); });
          }}},
        UB_SIZE("trials", trials),
        UB_SIZE("data_seeds", data_seeds),
        {"measures",
         {[](SweepConfig& c, const YAML::Node& n) {
              c.measures.clear();
              for (const auto& s : list_of(n)) c.measures.push_back(measures::parse_measure(s));
          },
          [](const SweepConfig& c) {
              return join(c.effective_measures(), [](measures::MeasureId m) { return measures::to_string(m); });
          }}},
        UB_SIZE("epochs", schedule.epochs),
        UB_SIZE("batch_size", schedule.batch_size),
        UB_SIZE("decay_period", schedule.decay_period),
        UB_REAL("decay_factor", schedule.decay_factor),
        {"dataset.source",
         {[](SweepConfig& c, const YAML::Node& n) { c.dataset.source = scalar<std::string>(n); },
          [](const SweepConfig& c) { return c.dataset.source; }}},
        {"dataset.seed",
         {[](SweepConfig& c, const YAML::Node& n) { c.dataset.seed = scalar<std::uint64_t>(n); },
          [](const SweepConfig& c) { return std::to_string(c.dataset.seed); }}},
        UB_SIZE("dataset.classes", dataset.blobs.classes),
        UB_SIZE("dataset.per_class", dataset.blobs.per_class),
        UB_SIZE("dataset.test_per_class", dataset.test_per_class),
        UB_SIZE("dataset.dim", dataset.blobs.dim),
        UB_SIZE("dataset.superclusters", dataset.blobs.supercluster_count),
        UB_REAL("dataset.spread", dataset.blobs.spread),
        UB_REAL("dataset.separation", dataset.blobs.separation),
        UB_REAL("dataset.noise", dataset.blobs.noise),
        UB_REAL("dataset.train_fraction", dataset.train_fraction),
        {"dataset.pool_path",
         {[](SweepConfig& c, const YAML::Node& n) { c.dataset.pool_path = scalar<std::string>(n); },
          [](const SweepConfig& c) { return quoted(c.dataset.pool_path.string()); }}},
        {"dataset.test_path",
         {[](SweepConfig& c, const YAML::Node& n) { c.dataset.test_path = scalar<std::string>(n); },
          [](const SweepConfig& c) { return quoted(c.dataset.test_path.string()); }}},
        UB_SIZE("augment.copies", augment.copies),
        UB_REAL("augment.noise_scale", augment.noise_scale),
        {"dump_scores",
         {[](SweepConfig& c, const YAML::Node& n) { c.dump_scores = boolean(scalar<std::string>(n)); },
          [](const SweepConfig& c) { return std::string(c.dump_scores ? "true" : "false"); }}},
        UB_SIZE("workers", workers),
    };
    return table;
}

#undef UB_SIZE
#undef UB_REAL

void set_key(SweepConfig& c, const std::string& key, const YAML::Node& value, const std::string& where) {
    const auto& table = key_table();
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError(where + "unknown key '" + key + "'");
    try {
        it->second.set(c, value);
    } catch (const ConfigError& e) {
        throw ConfigError(where + key + ": " + e.what());
    } catch (const Error& e) {
        throw ConfigError(where + key + ": " + e.what());
    }
}

}  // namespace

void SweepConfig::validate() const {
    if (schema_version != kSchemaVersion)
        throw ConfigError("unsupported schema_version " + std::to_string(schema_version) + " (expected " +
                          std::to_string(kSchemaVersion) + ")");
    if (algorithms.empty()) throw ConfigError("algorithms must not be empty");
    if (size_tiers.empty()) throw ConfigError("size_tiers must not be empty");
    if (spectral.empty()) throw ConfigError("spectral must not be empty");
    unique_or_throw(algorithms, "algorithms");
    unique_or_throw(size_tiers, "size_tiers");
    unique_or_throw(spectral, "spectral");
    unique_or_throw(measures, "measures");
    if (trials < 1) throw ConfigError("trials must be >= 1");
    if (data_seeds < 1) throw ConfigError("data_seeds must be >= 1");
    try {
        schedule.validate();
    } catch (const Error& e) {
        throw ConfigError(std::string("schedule: ") + e.what());
    }
    if (dataset.source != "blobs" && dataset.source != "tabular")
        throw ConfigError("dataset.source must be 'blobs' or 'tabular'");
    if (dataset.source == "tabular" && (dataset.pool_path.empty() || dataset.test_path.empty()))
        throw ConfigError("tabular datasets need dataset.pool_path and dataset.test_path");
    if (dataset.source == "blobs") {
        if (dataset.blobs.classes < 2) throw ConfigError("dataset.classes must be >= 2");
        if (dataset.blobs.per_class < 2) throw ConfigError("dataset.per_class must be >= 2");
        if (dataset.test_per_class < 1) throw ConfigError("dataset.test_per_class must be >= 1");
        if (dataset.blobs.dim < 1) throw ConfigError("dataset.dim must be >= 1");
        if (dataset.blobs.supercluster_count < 1 || dataset.blobs.supercluster_count > dataset.blobs.classes)
            throw ConfigError("dataset.superclusters must be in [1, classes]");
        if (!(dataset.blobs.noise >= 0) || !(dataset.blobs.spread >= 0) || !std::isfinite(dataset.blobs.separation))
            throw ConfigError("dataset noise, spread and separation must be finite and non-negative");
    }
    if (!(dataset.train_fraction > 0.0 && dataset.train_fraction < 1.0))
        throw ConfigError("dataset.train_fraction must be in (0, 1)");
    if (augment.copies < 1) throw ConfigError("augment.copies must be >= 1");
    if (!(augment.noise_scale >= 0.0)) throw ConfigError("augment.noise_scale must be >= 0");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

std::size_t SweepConfig::run_count() const {
    return algorithms.size() * size_tiers.size() * spectral.size() * trials * data_seeds;
}

std::vector<measures::MeasureId> SweepConfig::effective_measures() const {
    if (measures.empty()) return {measures::all_measures().begin(), measures::all_measures().end()};
    return measures;
}

SweepConfig parse_config(const std::string& text, const std::string& origin) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError(origin + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
    }
    if (!root.IsMap()) throw ConfigError(origin + ": expected `key: value` lines");
    SweepConfig c;
    bool saw_schema = false;
    std::set<std::string> seen;
    for (const auto& kv : root) {
        const auto key = kv.first.as<std::string>();
        const auto where = origin + ":" + std::to_string(kv.first.Mark().line + 1) + ": ";
        if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
        if (kv.second.IsMap()) throw ConfigError(where + "nested sections are not supported; use dotted keys");
        set_key(c, key, kv.second, where);
        saw_schema = saw_schema || key == "schema_version";
    }
    if (!saw_schema) throw ConfigError(origin + ": missing schema_version");
    c.validate();
    return c;
}

SweepConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), path.string());
}

void apply_override(SweepConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    const auto key = trim(assignment.substr(0, eq));
    YAML::Node value;
    try {
        value = YAML::Load(assignment.substr(eq + 1));
    } catch (const YAML::Exception& e) {
        throw ConfigError("override " + key + ": " + e.msg);
    }
    if (value.IsNull()) value = YAML::Node(std::string());
    set_key(config, key, value, "override ");
}

std::string render_config(const SweepConfig& config) {
    std::string out;
    out += "schema_version: " + std::to_string(config.schema_version) + "\n";
    for (const auto& [key, spec] : key_table()) {
        if (key == "schema_version") continue;
        out += key + ": " + spec.get(config) + "\n";
    }
    return out;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& kv : key_table()) out.push_back(kv.first);
    return out;
}

algo::HyperParams sample_hparams(algo::Algorithm algorithm, std::size_t trial, std::uint64_t seed) {
    algo::HyperParams hp;
    if (trial == 0) return hp;
    Rng rng(derive_seed(seed, {fnv1a("hparams"), fnv1a(algo::to_string(algorithm)), trial}));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
    auto choice = [&](std::initializer_list<double> opts) {
        std::uniform_int_distribution<std::size_t> pick(0, opts.size() - 1);
        return *(opts.begin() + static_cast<long>(pick(rng)));
    };
    auto randint = [&](std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    hp.learning_rate = std::pow(10.0, uniform(-2.0, -0.3));
    hp.momentum = choice({0.5, 0.9, 0.99});
    hp.weight_decay = std::pow(10.0, uniform(-5.0, -3.0));
    hp.mixing_alpha = choice({0.1, 0.2, 0.3, 1.0, 2.0});
    hp.dropout_rate = choice({0.05, 0.1, 0.2});
    hp.num_passes = 10;
    hp.subnetworks = randint(2, 5);
    hp.input_repetition_prob = uniform(0.0, 1.0);
    hp.batch_repetition = randint(1, 5);
    hp.teacher_width = static_cast<std::size_t>(choice({64, 128, 256}));
    hp.teacher_depth = static_cast<std::size_t>(choice({2, 3, 4}));
    hp.regularization = std::pow(10.0, uniform(-2.0, 1.0));
    hp.soft_label_value = choice({0.7, 0.8, 0.9});
    return hp;
}

}  // namespace ubench::pipeline
