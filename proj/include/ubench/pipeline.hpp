#pragma once

// Sweep orchestration: configuration, hyper-parameter sampling, the run
// matrix with resumable persistence, evaluation of every ablation cell and
// table rendering.

#include "ubench/algorithms.hpp"
#include "ubench/dataforge.hpp"
#include "ubench/measures.hpp"

#include <json.hpp>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace ubench::pipeline {

inline constexpr int kSchemaVersion = 1;

struct DatasetSpec {
    std::string source = "blobs";  // blobs | tabular
    data::BlobSpec blobs;
    std::size_t test_per_class = 50;
    std::uint64_t seed = 1;
    std::filesystem::path pool_path;  // tabular only
    std::filesystem::path test_path;  // tabular only
    double train_fraction = 0.9;
};

struct SweepConfig {
    int schema_version = kSchemaVersion;
    std::uint64_t seed = 0;
    std::vector<algo::Algorithm> algorithms{algo::Algorithm::erm};
    std::vector<net::SizeTier> size_tiers{net::SizeTier::small};
    std::vector<bool> spectral{false};
    std::size_t trials = 5;
    std::size_t data_seeds = 3;
    std::vector<measures::MeasureId> measures;  // empty means all
    algo::TrainSchedule schedule;
    DatasetSpec dataset;
    measures::AugmentSpec augment;
    bool dump_scores = true;
    std::size_t workers = 0;  // 0: UBENCH_WORKERS, else hardware concurrency
    std::filesystem::path output_dir = "ubench-out";

    void validate() const;
    std::size_t run_count() const;
    std::vector<measures::MeasureId> effective_measures() const;
};

/// Flat `key: value` document (YAML subset); `#` starts a comment. Every
/// key is optional except schema_version. Unknown keys are errors.
SweepConfig parse_config(const std::string& text, const std::string& origin = "<config>");
SweepConfig load_config(const std::filesystem::path& path);
/// `key=value` with the same keys and value syntax as the file.
void apply_override(SweepConfig& config, const std::string& assignment);
/// Every key with its current value, in a form parse_config accepts.
std::string render_config(const SweepConfig& config);
/// Names of all accepted keys.
std::vector<std::string> config_keys();

/// Trial 0 returns the defaults; later trials draw from the random-search
/// distributions with a generator seeded by (seed, algorithm, trial).
algo::HyperParams sample_hparams(algo::Algorithm algorithm, std::size_t trial, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Data.

struct PreparedData {
    data::Dataset pool;  // every class; split into train/val per data seed
    data::Dataset test;
    data::ClassPartition partition;
    data::Dataset in_pool;
    data::Dataset in_test;
    data::Dataset out_test;
    std::uint64_t digest = 0;
};

/// Loads or generates the data and partitions its classes by Ward
/// clustering of the pool's class prototypes.
PreparedData prepare_data(const DatasetSpec& spec);

/// Seed of data split `index`, derived from the sweep seed.
std::uint64_t data_split_seed(std::uint64_t sweep_seed, std::size_t index);
std::pair<data::Dataset, data::Dataset> split_for(const PreparedData& data, std::uint64_t sweep_seed,
                                                  std::size_t data_seed_index, double train_fraction);

/// Writes pool.csv, test.csv and partition.txt under `dir`.
void export_partition(const PreparedData& data, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Runs.

struct RunKey {
    algo::Algorithm algorithm = algo::Algorithm::erm;
    net::SizeTier tier = net::SizeTier::small;
    bool spectral = false;
    std::size_t trial = 0;
    std::size_t data_seed = 0;
    auto operator<=>(const RunKey&) const = default;
};

enum class RunStatus { pending, done, failed };
std::string to_string(RunStatus s);
RunStatus parse_run_status(std::string_view s);

struct RunRecord {
    std::string run_id;
    RunKey key;
    algo::HyperParams hparams;
    algo::RunSeeds seeds;
    algo::TrainSchedule schedule;
    std::uint64_t dataset_digest = 0;
    std::string checkpoint;  // relative to the output directory
    std::vector<algo::EpochLog> log;
    double val_nll = 0.0;
    RunStatus status = RunStatus::pending;
    std::string error;
};

nlohmann::json to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);

/// Content hash of everything that determines the run's result.
std::string run_id(const RunKey& key, const SweepConfig& config, std::uint64_t dataset_digest);
/// Initialization seed: hash of (sweep seed, algorithm, tier, spectral, trial, data seed).
std::uint64_t run_init_seed(const RunKey& key, std::uint64_t sweep_seed);

/// Every run of the config, in a fixed order.
std::vector<RunKey> enumerate_runs(const SweepConfig& config);

/// Trains one run and writes its checkpoint and record under `out`.
RunRecord execute_run(const RunKey& key, const SweepConfig& config, const PreparedData& data,
                      const std::filesystem::path& out);

struct SweepOutcome {
    std::vector<RunRecord> records;  // in enumerate_runs order
    std::size_t trained = 0;         // runs executed by this call
    std::size_t reused = 0;          // done records found on disk
    std::size_t failed = 0;
};

struct SweepHooks {
    std::function<void(const std::string&)> log;
    const std::atomic<bool>* stop = nullptr;  // no new runs start once set
};

/// Runs every missing or unfinished run in a worker pool. Records go to
/// runs/<id>.json while the sweep is in progress; runs.jsonl is written
/// once all workers have finished.
SweepOutcome execute_sweep(const SweepConfig& config, const PreparedData& data, const SweepHooks& hooks = {});

/// Records found under runs/ (any status).
std::vector<RunRecord> load_run_records(const std::filesystem::path& out);

/// Worker count: config value, else UBENCH_WORKERS, else hardware concurrency.
std::size_t resolve_workers(std::size_t configured);

// ---------------------------------------------------------------------------
// Evaluation.

enum class Calibration { initial, learned };
std::string to_string(Calibration c);

struct GroupKey {
    algo::Algorithm algorithm = algo::Algorithm::erm;
    net::SizeTier tier = net::SizeTier::small;
    bool spectral = false;
    Calibration calibration = Calibration::initial;
    std::size_t k = 1;
    auto operator<=>(const GroupKey&) const = default;
};

struct EvalRecord {
    GroupKey group;
    std::string measure;  // empty for in-domain metrics
    std::string metric;   // ACC@1, ACC@5, ECE, NLL, AUC, InAsIn, InAsOut, OutAsIn, OutAsOut
    std::vector<std::size_t> data_seeds;
    std::vector<double> values;
    double mean = 0.0;
    double std = 0.0;  // population
};

nlohmann::json to_json(const EvalRecord& r);
EvalRecord eval_record_from_json(const nlohmann::json& j);

/// Mean and population standard deviation.
std::pair<double, double> mean_std(std::span<const double> values);
EvalRecord make_eval_record(GroupKey group, std::string measure, std::string metric,
                            std::vector<std::size_t> seeds, std::vector<double> values);

struct SkippedPair {
    GroupKey group;
    std::string measure;
    std::string reason;
};

struct EvalOutcome {
    std::vector<EvalRecord> records;
    std::vector<SkippedPair> skipped;
    std::size_t failed_runs = 0;
    bool argmax_stable = true;            // calibration never changed a prediction
    double worst_threshold_coverage = 1;  // min fraction of validation scores <= theta
};

/// Builds the k = 1 and k = trials models of every cell, with and without
/// calibration, and evaluates every in-domain metric and every measure.
EvalOutcome evaluate_all(const SweepConfig& config, const std::vector<RunRecord>& records,
                         const PreparedData& data, const SweepHooks& hooks = {});

void write_eval_records(const std::filesystem::path& path, const std::vector<EvalRecord>& records);
std::vector<EvalRecord> read_eval_records(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Reports.

enum class ReportFormat { text, csv, latex };
std::string to_string(ReportFormat f);
ReportFormat parse_report_format(std::string_view s);

/// "m.mmm ± s.sss"
std::string format_value(double mean, double std);

struct ReportNotes {
    std::size_t failed_runs = 0;
    std::size_t skipped_pairs = 0;
};

struct Report {
    std::string in_domain;
    std::string out_domain;
};

/// In-domain tables per tier and out-domain tables per (tier, measure), rows
/// ordered algorithm, spectral, calibration, k.
Report render_report(const std::vector<EvalRecord>& records, ReportFormat format, const ReportNotes& notes = {});

/// Writes report/in_domain.<ext> and report/out_domain.<ext> for every format.
void write_reports(const std::filesystem::path& out, const std::vector<EvalRecord>& records,
                   const ReportNotes& notes);

}  // namespace ubench::pipeline
