#include "ubench/cli.hpp"

#include "ubench/oracles.hpp"
#include "ubench/pipeline.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>

namespace ubench::cli {

namespace fs = std::filesystem;
using namespace ubench::pipeline;

namespace {

struct Options {
    std::string config_path;
    std::string out;
    std::vector<std::string> overrides;
    int verbosity = 0;
    std::size_t workers = 0;
    // train
    std::string algorithm;
    std::string tier;
    bool spectral = false;
    std::size_t trial = 0;
    std::size_t data_seed = 0;
};

void log(const std::string& msg) { std::cerr << "ubench: " << msg << '\n'; }

SweepConfig resolve_config(const Options& o) {
    SweepConfig c = load_config(o.config_path);
    for (const auto& s : o.overrides) apply_override(c, s);
    if (!o.out.empty()) c.output_dir = o.out;
    if (o.workers > 0) c.workers = o.workers;
    c.validate();
    return c;
}

void write_resolved(const SweepConfig& c) {
    fs::create_directories(c.output_dir);
    std::ofstream os(c.output_dir / "config.yaml", std::ios::trunc);
    os << render_config(c);
    if (!os) throw Error("cannot write " + (c.output_dir / "config.yaml").string());
}

SweepHooks hooks_for(const Options& o) {
    SweepHooks h;
    if (o.verbosity > 0) h.log = [](const std::string& m) { log(m); };
    h.stop = &stop_flag();
    return h;
}

nlohmann::json summary_json(const EvalOutcome& e) {
    nlohmann::json j;
    j["failed_runs"] = e.failed_runs;
    j["records"] = e.records.size();
    j["argmax_stable"] = e.argmax_stable;
    j["worst_threshold_coverage"] = e.worst_threshold_coverage;
    j["skipped"] = nlohmann::json::array();
    for (const auto& s : e.skipped) {
        nlohmann::json sj;
        sj["algorithm"] = algo::to_string(s.group.algorithm);
        sj["size_tier"] = net::to_string(s.group.tier);
        sj["spectral"] = s.group.spectral;
        sj["calibration"] = to_string(s.group.calibration);
        sj["k"] = s.group.k;
        sj["measure"] = s.measure;
        sj["reason"] = s.reason;
        j["skipped"].push_back(sj);
    }
    return j;
}

ReportNotes notes_from(const fs::path& summary) {
    ReportNotes notes;
    std::ifstream is(summary);
    if (!is) return notes;
    try {
        const auto j = nlohmann::json::parse(is);
        notes.failed_runs = j.at("failed_runs").get<std::size_t>();
        notes.skipped_pairs = j.at("skipped").size();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(summary.string() + ": " + e.what());
    }
    return notes;
}

/// Evaluates, writes eval.jsonl, eval_summary.json and the reports.
int evaluate_and_report(const SweepConfig& c, const std::vector<RunRecord>& records, const PreparedData& data,
                        const Options& o) {
    const auto outcome = evaluate_all(c, records, data, hooks_for(o));
    if (stop_flag().load()) {
        log("interrupted during evaluation; rerun `evaluate` to finish");
        return kExitPartial;
    }
    write_eval_records(c.output_dir / "eval.jsonl", outcome.records);
    {
        std::ofstream os(c.output_dir / "eval_summary.json", std::ios::trunc);
        os << summary_json(outcome).dump(2) << '\n';
    }
    const ReportNotes notes{outcome.failed_runs, outcome.skipped.size()};
    write_reports(c.output_dir, outcome.records, notes);
    log("wrote " + std::to_string(outcome.records.size()) + " eval records and reports under " +
        c.output_dir.string());
    if (!outcome.skipped.empty())
        log(std::to_string(outcome.skipped.size()) + " (group, measure) pair(s) skipped as incompatible");
    if (!outcome.argmax_stable) log("warning: calibration changed a predicted class");
    return outcome.failed_runs > 0 ? kExitPartial : kExitOk;
}

int cmd_partition(const Options& o) {
    const auto c = resolve_config(o);
    write_resolved(c);
    const auto data = prepare_data(c.dataset);
    export_partition(data, c.output_dir / "partition");
    log("partition: " + std::to_string(data.partition.in_classes.size()) + " in-domain, " +
        std::to_string(data.partition.out_classes.size()) + " out-domain classes written to " +
        (c.output_dir / "partition").string());
    return kExitOk;
}

int cmd_sweep(const Options& o) {
    const auto c = resolve_config(o);
    write_resolved(c);
    const auto data = prepare_data(c.dataset);
    log("sweep: " + std::to_string(c.run_count()) + " runs, " + std::to_string(resolve_workers(c.workers)) +
        " worker(s)");
    const auto sweep = execute_sweep(c, data, hooks_for(o));
    log("trained " + std::to_string(sweep.trained) + ", reused " + std::to_string(sweep.reused) + ", failed " +
        std::to_string(sweep.failed));
    if (stop_flag().load()) {
        log("interrupted; rerun the same command to resume");
        return kExitPartial;
    }
    return evaluate_and_report(c, sweep.records, data, o);
}

int cmd_train(const Options& o) {
    const auto c = resolve_config(o);
    write_resolved(c);
    RunKey key;
    try {
        key.algorithm = o.algorithm.empty() ? c.algorithms.front() : algo::parse_algorithm(o.algorithm);
        key.tier = o.tier.empty() ? c.size_tiers.front() : net::parse_size_tier(o.tier);
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    key.spectral = o.spectral;
    key.trial = o.trial;
    key.data_seed = o.data_seed;
    const auto data = prepare_data(c.dataset);
    const auto r = execute_run(key, c, data, c.output_dir);
    log("run " + r.run_id + ": " + to_string(r.status) + (r.error.empty() ? "" : " (" + r.error + ")"));
    if (r.status != RunStatus::done) return kExitPartial;
    log("checkpoint " + (c.output_dir / r.checkpoint).string());
    return kExitOk;
}

int cmd_evaluate(const Options& o) {
    const auto c = resolve_config(o);
    const auto records = load_run_records(c.output_dir);
    if (records.empty()) {
        log("no run records under " + (c.output_dir / "runs").string() + "; run `sweep` or `train` first");
        return kExitConfig;
    }
    const auto data = prepare_data(c.dataset);
    return evaluate_and_report(c, records, data, o);
}

int cmd_report(const Options& o) {
    fs::path out = o.out;
    if (out.empty()) {
        if (o.config_path.empty()) {
            log("report needs --out or --config");
            return kExitConfig;
        }
        out = resolve_config(o).output_dir;
    }
    const fs::path eval = out / "eval.jsonl";
    if (!fs::exists(eval)) {
        log("no evaluation records at " + eval.string() + "; run `sweep` or `evaluate` first");
        return kExitConfig;
    }
    const auto records = read_eval_records(eval);
    const auto notes = notes_from(out / "eval_summary.json");
    write_reports(out, records, notes);
    log("wrote " + (out / "report").string());
    return notes.failed_runs > 0 ? kExitPartial : kExitOk;
}

int cmd_selftest(const Options&) {
    bool ok = true;
    for (const auto& r : oracle::run_selftest()) {
        std::cerr << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
        ok = ok && r.passed;
    }
    return ok ? kExitOk : kExitPartial;
}

extern "C" void on_signal(int) { stop_flag().store(true); }

}  // namespace

std::atomic<bool>& stop_flag() {
    static std::atomic<bool> flag{false};
    return flag;
}

void install_signal_handlers() {
    stop_flag();
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
}

int run(int argc, const char* const* argv) {
    CLI::App app{"Uncertainty benchmark: train, calibrate, ensemble and evaluate out-of-domain measures", "ubench"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* opt = sub->add_option("-c,--config", o.config_path, "Sweep config file")->check(CLI::ExistingFile);
        if (config_required) opt->required();
        sub->add_option("-o,--out", o.out, "Output directory (overrides output_dir)");
        sub->add_option("-s,--set", o.overrides, "Override a config key, key=value (repeatable)");
        sub->add_flag("-v,--verbose", o.verbosity, "Log every run");
        sub->add_option("-w,--workers", o.workers, "Worker threads (overrides workers and UBENCH_WORKERS)");
    };
    auto* partition = app.add_subcommand("partition", "Build the data and write the in/out class partition");
    add_common(partition, true);
    auto* sweep = app.add_subcommand("sweep", "Train every run, evaluate and write reports (resumable)");
    add_common(sweep, true);
    auto* train = app.add_subcommand("train", "Train a single run");
    add_common(train, true);
    train->add_option("--algorithm", o.algorithm, "Algorithm (default: first in config)");
    train->add_option("--tier", o.tier, "small or large (default: first in config)");
    train->add_flag("--spectral", o.spectral, "Spectral normalization");
    train->add_option("--trial", o.trial, "Hyper-parameter trial index");
    train->add_option("--data-seed", o.data_seed, "Data split index");
    auto* evaluate = app.add_subcommand("evaluate", "Evaluate finished runs and write reports");
    add_common(evaluate, true);
    auto* report = app.add_subcommand("report", "Render reports from eval.jsonl");
    add_common(report, false);
    auto* selftest = app.add_subcommand("selftest", "Run the oracle suites");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*partition) return cmd_partition(o);
        if (*sweep) return cmd_sweep(o);
        if (*train) return cmd_train(o);
        if (*evaluate) return cmd_evaluate(o);
        if (*report) return cmd_report(o);
        if (*selftest) return cmd_selftest(o);
    } catch (const ConfigError& e) {
        log(std::string("config error: ") + e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        log(std::string("error: ") + e.what());
        return kExitPartial;
    }
    return kExitConfig;
}

}  // namespace ubench::cli
