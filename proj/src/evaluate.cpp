#include "ubench/metrics.hpp"
#include "ubench/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>
#include <tuple>

namespace ubench::pipeline {

namespace fs = std::filesystem;

namespace {

struct CellKey {
    algo::Algorithm algorithm;
    net::SizeTier tier;
    bool spectral;
    auto operator<=>(const CellKey&) const = default;
};

// trial -> data seed -> record
using CellRuns = std::map<std::size_t, std::map<std::size_t, const RunRecord*>>;

struct Collected {
    // (group, measure, metric) -> data seed -> value
    std::map<std::tuple<GroupKey, std::string, std::string>, std::map<std::size_t, double>> values;
    std::vector<SkippedPair> skipped;
    bool argmax_stable = true;
    double worst_coverage = 1.0;
};

std::vector<Eigen::Index> argmax_columns(const Matrix& p) {
    std::vector<Eigen::Index> out(static_cast<std::size_t>(p.cols()));
    for (Eigen::Index j = 0; j < p.cols(); ++j) p.col(j).maxCoeff(&out[static_cast<std::size_t>(j)]);
    return out;
}

std::vector<std::uint64_t> example_ids(const std::string& prefix, std::size_t n) {
    std::vector<std::uint64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = fnv1a(prefix + ":" + std::to_string(i));
    return ids;
}

std::string cell_name(const GroupKey& g) {
    return algo::to_string(g.algorithm) + "-" + net::to_string(g.tier) + "-" + (g.spectral ? "spectral" : "plain") +
           "-" + to_string(g.calibration) + "-k" + std::to_string(g.k);
}

/// Everything measured for one (cell, data seed).
void evaluate_seed(const SweepConfig& config, const PreparedData& data, const CellKey& cell, const CellRuns& runs,
                   const std::vector<std::pair<std::size_t, posthoc::Selection>>& selections, std::size_t seed,
                   Collected& sink, std::mutex& mu) {
    const fs::path out = config.output_dir;
    auto [train, val] = split_for(data, config.seed, seed, config.dataset.train_fraction);
    const Matrix val_x = val.all_columns();
    const Matrix in_x = data.in_test.all_columns();
    const Matrix out_x = data.out_test.all_columns();
    const auto val_ids = example_ids("val", val.size());
    const auto in_ids = example_ids("in-test", data.in_test.size());
    const auto out_ids = example_ids("out-test", data.out_test.size());
    const auto measure_list = config.effective_measures();
    const std::uint64_t measure_seed = derive_seed(config.seed, {fnv1a("measures"), seed});

    std::map<std::size_t, posthoc::ModelPtr> loaded;
    auto model_for = [&](std::size_t trial) -> posthoc::ModelPtr {
        const auto t = runs.find(trial);
        if (t == runs.end()) return nullptr;
        const auto s = t->second.find(seed);
        if (s == t->second.end()) return nullptr;
        auto& slot = loaded[trial];
        if (!slot) slot = std::make_shared<algo::TrainedModel>(algo::TrainedModel::load(out / s->second->checkpoint));
        return slot;
    };

    std::map<std::tuple<GroupKey, std::string, std::string>, double> local;
    std::vector<SkippedPair> skipped;
    bool stable = true;
    double coverage = 1.0;

    for (const auto& [k, selection] : selections) {
        std::vector<posthoc::ModelPtr> members;
        for (auto trial : selection.trials)
            if (auto m = model_for(trial)) members.push_back(m);
        GroupKey base{cell.algorithm, cell.tier, cell.spectral, Calibration::initial, k};
        if (members.size() != selection.trials.size()) {
            for (auto c : {Calibration::initial, Calibration::learned}) {
                base.calibration = c;
                skipped.push_back({base, "", "data seed " + std::to_string(seed) + ": selected run unavailable"});
            }
            continue;
        }
        std::vector<Eigen::Index> initial_argmax;
        double initial_acc1 = 0.0;
        for (auto calibration : {Calibration::initial, Calibration::learned}) {
            GroupKey g = base;
            g.calibration = calibration;
            posthoc::Ensemble model(members, selection);
            if (calibration == Calibration::learned) model.calibrate(val_x, val.labels);

            const Matrix p = model.predict(in_x);
            const auto batch = metrics::from_columns(p, data.in_test.labels);
            const double acc1 = metrics::acc_topk(batch, 1);
            const auto top = std::min<std::size_t>(5, batch.classes());
            local[{g, "", "ACC@1"}] = acc1;
            local[{g, "", "ACC@5"}] = metrics::acc_topk(batch, top);
            local[{g, "", "ECE"}] = metrics::ece(batch);
            local[{g, "", "NLL"}] = metrics::nll(batch);
            const auto am = argmax_columns(p);
            if (calibration == Calibration::initial) {
                initial_argmax = am;
                initial_acc1 = acc1;
            } else if (am != initial_argmax || acc1 != initial_acc1) {
                stable = false;
            }

            std::vector<measures::ScoreRecord> dump;
            for (auto id : measure_list) {
                const auto name = measures::to_string(id);
                measures::MeasureContext ctx;
                try {
                    ctx = measures::prepare_measure(id, model, val, measure_seed, config.augment);
                } catch (const MeasureIncompatible& e) {
                    skipped.push_back({g, name, e.what()});
                    continue;
                } catch (const FitError& e) {
                    skipped.push_back({g, name, "data seed " + std::to_string(seed) + ": " + e.what()});
                    continue;
                }
                const Vector sv = measures::score_batch(ctx, model, val_x, val_ids);
                const Vector si = measures::score_batch(ctx, model, in_x, in_ids);
                const Vector so = measures::score_batch(ctx, model, out_x, out_ids);
                const std::vector<double> vs(sv.data(), sv.data() + sv.size());
                const std::vector<double> is(si.data(), si.data() + si.size());
                const std::vector<double> os(so.data(), so.data() + so.size());
                const double theta = metrics::quantile_threshold(vs, 0.95);
                const auto covered = std::count_if(vs.begin(), vs.end(), [&](double v) { return v <= theta; });
                coverage = std::min(coverage, static_cast<double>(covered) / static_cast<double>(vs.size()));
                const auto rates = metrics::confusion_rates(is, os, theta);
                local[{g, name, "AUC"}] = metrics::auc(is, os);
                local[{g, name, "InAsIn"}] = rates.in_as_in;
                local[{g, name, "InAsOut"}] = rates.in_as_out;
                local[{g, name, "OutAsIn"}] = rates.out_as_in;
                local[{g, name, "OutAsOut"}] = rates.out_as_out;
                if (config.dump_scores) {
                    for (std::size_t i = 0; i < is.size(); ++i)
                        dump.push_back({"in-test:" + std::to_string(i), measures::Split::in, name, is[i]});
                    for (std::size_t i = 0; i < os.size(); ++i)
                        dump.push_back({"out-test:" + std::to_string(i), measures::Split::out, name, os[i]});
                }
            }
            if (config.dump_scores && !dump.empty()) {
                fs::create_directories(out / "scores");
                measures::write_score_dump(out / "scores" / (cell_name(g) + "-seed" + std::to_string(seed) + ".jsonl"),
                                           dump);
            }
        }
    }

    std::lock_guard lock(mu);
    for (const auto& [key, v] : local) sink.values[key][seed] = v;
    sink.skipped.insert(sink.skipped.end(), skipped.begin(), skipped.end());
    sink.argmax_stable = sink.argmax_stable && stable;
    sink.worst_coverage = std::min(sink.worst_coverage, coverage);
}

/// InAsIn and OutAsIn means become 1 - mean of the complement record, within
/// a few ulps of the plain mean of their stored values.
void complement_means(std::vector<EvalRecord>& records) {
    std::map<std::tuple<GroupKey, std::string, std::string>, EvalRecord*> by;
    for (auto& r : records) by[{r.group, r.measure, r.metric}] = &r;
    for (const auto& [metric, partner] : {std::pair{"InAsIn", "InAsOut"}, {"OutAsIn", "OutAsOut"}})
        for (auto& r : records) {
            if (r.metric != metric) continue;
            const auto it = by.find({r.group, r.measure, partner});
            if (it != by.end() && it->second->values.size() == r.values.size()) r.mean = 1.0 - it->second->mean;
        }
}

}  // namespace

std::string to_string(Calibration c) { return c == Calibration::initial ? "initial" : "learned"; }

std::pair<double, double> mean_std(std::span<const double> values) {
    if (values.empty()) throw ParameterError("mean_std of no values");
    const auto n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / n)};
}

EvalRecord make_eval_record(GroupKey group, std::string measure, std::string metric, std::vector<std::size_t> seeds,
                            std::vector<double> values) {
    if (seeds.size() != values.size()) throw ShapeError("eval record: one value per data seed");
    EvalRecord r{group, std::move(measure), std::move(metric), std::move(seeds), std::move(values), 0.0, 0.0};
    std::tie(r.mean, r.std) = mean_std(r.values);
    return r;
}

nlohmann::json to_json(const EvalRecord& r) {
    nlohmann::json j;
    j["algorithm"] = algo::to_string(r.group.algorithm);
    j["size_tier"] = net::to_string(r.group.tier);
    j["spectral"] = r.group.spectral;
    j["calibration"] = to_string(r.group.calibration);
    j["k"] = r.group.k;
    j["measure"] = r.measure.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.measure);
    j["metric"] = r.metric;
    j["data_seeds"] = r.data_seeds;
    j["values"] = r.values;
    j["mean"] = r.mean;
    j["std"] = r.std;
    return j;
}

EvalRecord eval_record_from_json(const nlohmann::json& j) {
    try {
        EvalRecord r;
        r.group.algorithm = algo::parse_algorithm(j.at("algorithm").get<std::string>());
        r.group.tier = net::parse_size_tier(j.at("size_tier").get<std::string>());
        r.group.spectral = j.at("spectral").get<bool>();
        const auto cal = j.at("calibration").get<std::string>();
        if (cal != "initial" && cal != "learned") throw ParseError("calibration must be initial or learned");
        r.group.calibration = cal == "initial" ? Calibration::initial : Calibration::learned;
        r.group.k = j.at("k").get<std::size_t>();
        r.measure = j.at("measure").is_null() ? "" : j.at("measure").get<std::string>();
        r.metric = j.at("metric").get<std::string>();
        r.data_seeds = j.at("data_seeds").get<std::vector<std::size_t>>();
        r.values = j.at("values").get<std::vector<double>>();
        r.mean = j.at("mean").get<double>();
        r.std = j.at("std").get<double>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad eval record: ") + e.what());
    }
}

EvalOutcome evaluate_all(const SweepConfig& config, const std::vector<RunRecord>& records, const PreparedData& data,
                         const SweepHooks& hooks) {
    EvalOutcome outcome;
    std::map<CellKey, CellRuns> cells;
    for (const auto& r : records) {
        if (r.status != RunStatus::done) {
            ++outcome.failed_runs;
            continue;
        }
        if (r.dataset_digest != data.digest)
            throw DataError("run " + r.run_id + " was trained on a different dataset");
        cells[{r.key.algorithm, r.key.tier, r.key.spectral}][r.key.trial][r.key.data_seed] = &r;
    }

    struct Task {
        CellKey cell;
        std::vector<std::pair<std::size_t, posthoc::Selection>> selections;
        std::size_t seed;
    };
    std::vector<Task> tasks;
    std::vector<SkippedPair> selection_skips;
    for (const auto& [cell, runs] : cells) {
        std::vector<posthoc::Candidate> candidates;
        std::set<std::size_t> seeds;
        for (const auto& [trial, by_seed] : runs) {
            posthoc::Candidate c{trial, {}};
            for (const auto& [seed, r] : by_seed) {
                c.val_nll.push_back(r->val_nll);
                seeds.insert(seed);
            }
            candidates.push_back(std::move(c));
        }
        std::vector<std::size_t> ks{1};
        if (config.trials > 1) ks.push_back(config.trials);
        std::vector<std::pair<std::size_t, posthoc::Selection>> selections;
        for (auto k : ks) {
            try {
                selections.emplace_back(k, posthoc::ensemble_select(candidates, k));
            } catch (const SelectionError& e) {
                for (auto c : {Calibration::initial, Calibration::learned})
                    selection_skips.push_back({{cell.algorithm, cell.tier, cell.spectral, c, k}, "", e.what()});
            }
        }
        for (auto seed : seeds) tasks.push_back({cell, selections, seed});
    }

    Collected sink;
    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    auto worker = [&] {
        for (;;) {
            if (hooks.stop && hooks.stop->load()) return;
            const std::size_t n = next.fetch_add(1);
            if (n >= tasks.size()) return;
            const auto& t = tasks[n];
            try {
                evaluate_seed(config, data, t.cell, cells.at(t.cell), t.selections, t.seed, sink, mu);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
                return;
            }
            if (hooks.log) {
                std::lock_guard lock(mu);
                hooks.log("evaluated " + algo::to_string(t.cell.algorithm) + "/" + net::to_string(t.cell.tier) +
                          (t.cell.spectral ? "/spectral" : "/plain") + " data seed " + std::to_string(t.seed));
            }
        }
    };
    const std::size_t width = std::min(resolve_workers(config.workers), std::max<std::size_t>(tasks.size(), 1));
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < width; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);

    for (const auto& [key, by_seed] : sink.values) {
        std::vector<std::size_t> seeds;
        std::vector<double> values;
        for (const auto& [s, v] : by_seed) {
            seeds.push_back(s);
            values.push_back(v);
        }
        outcome.records.push_back(
            make_eval_record(std::get<0>(key), std::get<1>(key), std::get<2>(key), std::move(seeds), std::move(values)));
    }
    complement_means(outcome.records);
    outcome.skipped = std::move(selection_skips);
    // one skip entry per (group, measure), however many data seeds hit it
    std::map<std::pair<GroupKey, std::string>, SkippedPair> unique;
    for (auto& s : sink.skipped) unique.emplace(std::pair(s.group, s.measure), s);
    for (auto& [k, s] : unique) outcome.skipped.push_back(s);
    outcome.argmax_stable = sink.argmax_stable;
    outcome.worst_threshold_coverage = sink.worst_coverage;
    return outcome;
}

void write_eval_records(const fs::path& path, const std::vector<EvalRecord>& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + path.string());
    for (const auto& r : records) os << to_json(r).dump() << '\n';
    if (!os) throw Error("failed writing " + path.string());
}

std::vector<EvalRecord> read_eval_records(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot read " + path.string());
    std::vector<EvalRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(eval_record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const ParseError& e) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace ubench::pipeline
