#include "ubench/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

namespace ubench::pipeline {

namespace fs = std::filesystem;

namespace {

/// Relabels `test` so that its class ids follow `pool`'s class names.
data::Dataset align_labels(const data::Dataset& pool, data::Dataset test) {
    if (pool.class_names.empty() || test.class_names.empty()) return test;
    std::map<std::string, int> id;
    for (std::size_t c = 0; c < pool.class_names.size(); ++c) id[pool.class_names[c]] = static_cast<int>(c);
    for (auto& y : test.labels) {
        const auto& name = test.class_names.at(static_cast<std::size_t>(y));
        const auto it = id.find(name);
        if (it == id.end()) throw DataError("test class '" + name + "' does not occur in the pool");
        y = it->second;
    }
    test.class_names = pool.class_names;
    test.class_count = pool.class_count;
    return test;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot write " + tmp.string());
        os << text;
        if (!os) throw Error("failed writing " + tmp.string());
    }
    fs::rename(tmp, path);
}

nlohmann::json log_json(const std::vector<algo::EpochLog>& log) {
    auto j = nlohmann::json::array();
    for (std::size_t e = 0; e < log.size(); ++e)
        j.push_back({{"epoch", e}, {"train_loss", log[e].train_loss}, {"val_nll", log[e].val_nll}});
    return j;
}

/// Non-finite doubles are stored as null and read back as NaN.
double number_or_nan(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

PreparedData prepare_data(const DatasetSpec& spec) {
    PreparedData d;
    if (spec.source == "blobs") {
        auto sets = data::generate_blob_sets(spec.blobs, spec.test_per_class, spec.seed);
        d.pool = std::move(sets.pool);
        d.test = std::move(sets.test);
    } else if (spec.source == "tabular") {
        d.pool = data::load_tabular(spec.pool_path);
        d.test = align_labels(d.pool, data::load_tabular(spec.test_path));
        d.test.role = data::Role::test;
        if (d.test.dim() != d.pool.dim()) throw DataError("pool and test files have different feature counts");
    } else {
        throw ConfigError("unknown dataset source '" + spec.source + "'");
    }
    const auto tree = data::ward_tree(data::class_prototypes(d.pool));
    d.partition = data::root_partition(tree);
    if (d.partition.in_classes.size() < 2)
        throw DataError("the class partition has " + std::to_string(d.partition.in_classes.size()) +
                        " in-domain class(es); the root split is too unbalanced to train a classifier");
    d.in_pool = data::in_domain_view(d.pool, d.partition);
    d.in_test = data::in_domain_view(d.test, d.partition);
    d.out_test = data::out_domain_view(d.test, d.partition);
    d.in_test.role = data::Role::test;
    d.out_test.role = data::Role::test;
    d.digest = derive_seed(d.pool.digest(), {d.test.digest()});
    return d;
}

std::uint64_t data_split_seed(std::uint64_t sweep_seed, std::size_t index) {
    return derive_seed(sweep_seed, {fnv1a("data-split"), index});
}

std::pair<data::Dataset, data::Dataset> split_for(const PreparedData& data, std::uint64_t sweep_seed,
                                                  std::size_t data_seed_index, double train_fraction) {
    return data::split_train_val(data.in_pool, {data_split_seed(sweep_seed, data_seed_index), train_fraction});
}

void export_partition(const PreparedData& data, const fs::path& dir) {
    fs::create_directories(dir);
    data::write_tabular(dir / "pool.csv", data.pool);
    data::write_tabular(dir / "test.csv", data.test);
    data::write_partition(dir / "partition.txt", data.partition);
}

std::string to_string(RunStatus s) {
    switch (s) {
        case RunStatus::pending: return "pending";
        case RunStatus::done: return "done";
        case RunStatus::failed: return "failed";
    }
    return "?";
}

RunStatus parse_run_status(std::string_view s) {
    if (s == "pending") return RunStatus::pending;
    if (s == "done") return RunStatus::done;
    if (s == "failed") return RunStatus::failed;
    throw ParseError("unknown run status '" + std::string(s) + "'");
}

nlohmann::json to_json(const RunRecord& r) {
    nlohmann::json j;
    j["run_id"] = r.run_id;
    j["algorithm"] = algo::to_string(r.key.algorithm);
    j["size_tier"] = net::to_string(r.key.tier);
    j["spectral"] = r.key.spectral;
    j["trial"] = r.key.trial;
    j["data_seed"] = r.key.data_seed;
    j["hparams"] = algo::to_json(r.hparams);
    j["seeds"] = {{"init_seed", r.seeds.init_seed}, {"data_seed", r.seeds.data_seed}, {"trial", r.seeds.trial}};
    j["schedule"] = {{"epochs", r.schedule.epochs},
                     {"batch_size", r.schedule.batch_size},
                     {"decay_period", r.schedule.decay_period},
                     {"decay_factor", r.schedule.decay_factor}};
    j["dataset_digest"] = hex64(r.dataset_digest);
    j["checkpoint"] = r.checkpoint;
    j["log"] = log_json(r.log);
    j["val_nll"] = r.val_nll;
    j["status"] = to_string(r.status);
    if (!r.error.empty()) j["error"] = r.error;
    return j;
}

RunRecord run_record_from_json(const nlohmann::json& j) {
    try {
        RunRecord r;
        r.run_id = j.at("run_id").get<std::string>();
        r.key.algorithm = algo::parse_algorithm(j.at("algorithm").get<std::string>());
        r.key.tier = net::parse_size_tier(j.at("size_tier").get<std::string>());
        r.key.spectral = j.at("spectral").get<bool>();
        r.key.trial = j.at("trial").get<std::size_t>();
        r.key.data_seed = j.at("data_seed").get<std::size_t>();
        r.hparams = algo::hyperparams_from_json(j.at("hparams"));
        const auto& s = j.at("seeds");
        r.seeds = {s.at("init_seed").get<std::uint64_t>(), s.at("data_seed").get<std::uint64_t>(),
                   s.at("trial").get<std::size_t>()};
        const auto& sc = j.at("schedule");
        r.schedule.epochs = sc.at("epochs").get<std::size_t>();
        r.schedule.batch_size = sc.at("batch_size").get<std::size_t>();
        r.schedule.decay_period = sc.at("decay_period").get<std::size_t>();
        r.schedule.decay_factor = sc.at("decay_factor").get<double>();
        r.dataset_digest = std::stoull(j.at("dataset_digest").get<std::string>(), nullptr, 16);
        r.checkpoint = j.at("checkpoint").get<std::string>();
        for (const auto& e : j.at("log"))
            r.log.push_back({number_or_nan(e.at("train_loss")), number_or_nan(e.at("val_nll"))});
        r.val_nll = number_or_nan(j.at("val_nll"));
        r.status = parse_run_status(j.at("status").get<std::string>());
        r.error = j.value("error", "");
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad run record: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw ParseError("bad run record: dataset digest is not hex");
    }
}

std::uint64_t run_init_seed(const RunKey& key, std::uint64_t sweep_seed) {
    return derive_seed(sweep_seed, {fnv1a(algo::to_string(key.algorithm)), static_cast<std::uint64_t>(key.tier),
                                    static_cast<std::uint64_t>(key.spectral), key.trial, key.data_seed});
}

std::string run_id(const RunKey& key, const SweepConfig& config, std::uint64_t dataset_digest) {
    const auto& s = config.schedule;
    const auto h = derive_seed(fnv1a("run"), {fnv1a(algo::to_string(key.algorithm)),
                                              static_cast<std::uint64_t>(key.tier),
                                              static_cast<std::uint64_t>(key.spectral), key.trial, key.data_seed,
                                              dataset_digest, config.seed, s.epochs, s.batch_size, s.decay_period,
                                              std::bit_cast<std::uint64_t>(s.decay_factor),
                                              std::bit_cast<std::uint64_t>(config.dataset.train_fraction)});
    return hex64(h);
}

std::vector<RunKey> enumerate_runs(const SweepConfig& config) {
    std::vector<RunKey> keys;
    for (auto a : config.algorithms)
        for (auto tier : config.size_tiers)
            for (bool spectral : config.spectral)
                for (std::size_t t = 0; t < config.trials; ++t)
                    for (std::size_t d = 0; d < config.data_seeds; ++d) keys.push_back({a, tier, spectral, t, d});
    return keys;
}

RunRecord execute_run(const RunKey& key, const SweepConfig& config, const PreparedData& data, const fs::path& out) {
    RunRecord r;
    r.key = key;
    r.run_id = run_id(key, config, data.digest);
    r.hparams = sample_hparams(key.algorithm, key.trial, config.seed);
    r.seeds = {run_init_seed(key, config.seed), data_split_seed(config.seed, key.data_seed), key.trial};
    r.schedule = config.schedule;
    r.dataset_digest = data.digest;
    r.checkpoint = (fs::path("checkpoints") / (r.run_id + ".ckpt")).string();
    fs::create_directories(out / "runs");
    fs::create_directories(out / "checkpoints");
    const fs::path record_path = out / "runs" / (r.run_id + ".json");
    write_text_atomic(record_path, to_json(r).dump() + "\n");
    try {
        auto [train, val] = split_for(data, config.seed, key.data_seed, config.dataset.train_fraction);
        auto base = net::PredictorConfig::for_tier(key.tier, data.in_pool.dim(), data.in_pool.class_count);
        base.spectral_norm = key.spectral;
        const auto model =
            algo::train_run(key.algorithm, base, r.hparams, train, val, r.seeds, config.schedule);
        model.save(out / r.checkpoint);
        r.log = model.log;
        r.val_nll = model.val_nll;
        r.status = RunStatus::done;
    } catch (const std::exception& e) {
        r.status = RunStatus::failed;
        r.error = e.what();
    }
    write_text_atomic(record_path, to_json(r).dump() + "\n");
    return r;
}

std::vector<RunRecord> load_run_records(const fs::path& out) {
    std::vector<RunRecord> records;
    const fs::path dir = out / "runs";
    if (!fs::is_directory(dir)) return records;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        std::ifstream is(f);
        std::string line;
        std::getline(is, line);
        try {
            records.push_back(run_record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(f.string() + ": " + e.what());
        } catch (const ParseError& e) {
            throw ParseError(f.string() + ": " + e.what());
        }
    }
    return records;
}

std::size_t resolve_workers(std::size_t configured) {
    if (configured > 0) return configured;
    if (const char* env = std::getenv("UBENCH_WORKERS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
        throw ConfigError("UBENCH_WORKERS must be a positive integer");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

SweepOutcome execute_sweep(const SweepConfig& config, const PreparedData& data, const SweepHooks& hooks) {
    config.validate();
    const fs::path out = config.output_dir;
    fs::create_directories(out / "runs");
    fs::create_directories(out / "checkpoints");

    const auto keys = enumerate_runs(config);
    SweepOutcome outcome;
    outcome.records.resize(keys.size());
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        const auto id = run_id(keys[i], config, data.digest);
        const fs::path record_path = out / "runs" / (id + ".json");
        if (fs::exists(record_path)) {
            std::ifstream is(record_path);
            std::string line;
            std::getline(is, line);
            try {
                auto r = run_record_from_json(nlohmann::json::parse(line));
                if (r.status == RunStatus::done && fs::exists(out / r.checkpoint)) {
                    outcome.records[i] = std::move(r);
                    ++outcome.reused;
                    continue;
                }
            } catch (const std::exception&) {
                // unreadable record: retrain
            }
        }
        todo.push_back(i);
    }

    std::mutex mu;
    auto log = [&](const std::string& msg) {
        if (!hooks.log) return;
        std::lock_guard lock(mu);
        hooks.log(msg);
    };
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            if (hooks.stop && hooks.stop->load()) return;
            const std::size_t n = next.fetch_add(1);
            if (n >= todo.size()) return;
            const auto i = todo[n];
            const auto& k = keys[i];
            auto r = execute_run(k, config, data, out);
            log("run " + r.run_id + " " + algo::to_string(k.algorithm) + "/" + net::to_string(k.tier) +
                (k.spectral ? "/spectral" : "/plain") + " trial " + std::to_string(k.trial) + " seed " +
                std::to_string(k.data_seed) + ": " + to_string(r.status) + (r.error.empty() ? "" : " (" + r.error + ")"));
            std::lock_guard lock(mu);
            outcome.records[i] = std::move(r);
            ++outcome.trained;
        }
    };
    const std::size_t width = std::min(resolve_workers(config.workers), std::max<std::size_t>(todo.size(), 1));
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < width; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::string lines;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        auto& r = outcome.records[i];
        if (r.run_id.empty()) {
            r.key = keys[i];
            r.run_id = run_id(keys[i], config, data.digest);
            r.status = RunStatus::pending;
        }
        if (r.status == RunStatus::failed) ++outcome.failed;
        lines += to_json(r).dump() + "\n";
    }
    write_text_atomic(out / "runs.jsonl", lines);
    return outcome;
}

}  // namespace ubench::pipeline
