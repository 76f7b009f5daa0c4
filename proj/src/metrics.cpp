#include "ubench/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ubench::metrics {

void PredictionBatch::validate() const {
    if (static_cast<std::size_t>(probabilities.rows()) != labels.size())
        throw ShapeError("prediction batch: row count differs from label count");
    const auto c = static_cast<int>(probabilities.cols());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= c) throw DataError("prediction batch: label out of range");
        const auto row = probabilities.row(static_cast<Eigen::Index>(i));
        if (std::abs(row.sum() - 1.0) > 1e-9 || row.minCoeff() < 0.0)
            throw NumericError("prediction batch: row " + std::to_string(i) + " is not on the simplex");
    }
}

PredictionBatch from_columns(const Matrix& probs, std::vector<int> labels) {
    PredictionBatch b{probs.transpose(), std::move(labels)};
    if (static_cast<std::size_t>(b.probabilities.rows()) != b.labels.size())
        throw ShapeError("prediction columns and labels differ in count");
    return b;
}

double acc_topk(const PredictionBatch& batch, std::size_t k) {
    const std::size_t c = batch.classes();
    if (k < 1 || k > c) throw ParameterError("acc_topk: k must be in 1..C");
    if (batch.size() == 0) throw ParameterError("acc_topk: empty batch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto row = batch.probabilities.row(static_cast<Eigen::Index>(i));
        const auto y = static_cast<Eigen::Index>(batch.labels[i]);
        const double py = row(y);
        // Rank of the true label: classes strictly above it, plus equal ones with a lower index.
        std::size_t ahead = 0;
        for (Eigen::Index j = 0; j < row.size(); ++j)
            if (row(j) > py || (row(j) == py && j < y)) ++ahead;
        if (ahead < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(batch.size());
}

double nll(const PredictionBatch& batch) {
    if (batch.size() == 0) throw ParameterError("nll: empty batch");
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double p = batch.probabilities(static_cast<Eigen::Index>(i), batch.labels[i]);
        total -= std::log(std::max(p, kNllFloor));
    }
    return total / static_cast<double>(batch.size());
}

namespace {

int bin_of(double c, int bins) {
    if (c >= 1.0) return bins - 1;
    int b = static_cast<int>(std::floor(c * bins));
    b = std::clamp(b, 0, bins - 1);
    while (b > 0 && c < static_cast<double>(b) / bins) --b;
    while (b < bins - 1 && c >= static_cast<double>(b + 1) / bins) ++b;
    return b;
}

}  // namespace

double ece(std::span<const double> confidence, std::span<const std::uint8_t> correct, int num_bins) {
    if (num_bins < 1) throw ParameterError("ece: num_bins must be >= 1");
    if (confidence.size() != correct.size()) throw ShapeError("ece: confidence and correctness differ in length");
    if (confidence.empty()) throw ParameterError("ece: empty batch");
    std::vector<double> count(static_cast<std::size_t>(num_bins), 0.0), acc(count), conf(count);
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        const auto b = static_cast<std::size_t>(bin_of(confidence[i], num_bins));
        count[b] += 1.0;
        acc[b] += correct[i] ? 1.0 : 0.0;
        conf[b] += confidence[i];
    }
    const double n = static_cast<double>(confidence.size());
    double total = 0.0;
    for (std::size_t b = 0; b < count.size(); ++b)
        if (count[b] > 0) total += (count[b] / n) * std::abs(acc[b] / count[b] - conf[b] / count[b]);
    return total;
}

double ece(const PredictionBatch& batch, int num_bins) {
    std::vector<double> confidence(batch.size());
    std::vector<std::uint8_t> correct(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Eigen::Index arg = 0;
        confidence[i] = batch.probabilities.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
        correct[i] = arg == batch.labels[i] ? 1 : 0;
    }
    return ece(confidence, correct, num_bins);
}

std::int64_t auc_twice_count(std::span<const double> in_scores, std::span<const double> out_scores) {
    if (in_scores.empty() || out_scores.empty()) throw ParameterError("auc: both pools must be nonempty");
    struct Item {
        double v;
        bool out;
    };
    std::vector<Item> all;
    all.reserve(in_scores.size() + out_scores.size());
    for (double v : in_scores) all.push_back({v, false});
    for (double v : out_scores) all.push_back({v, true});
    for (const auto& it : all)
        if (std::isnan(it.v)) throw NumericError("auc: NaN score");
    std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.v < b.v; });
    // Twice the midrank of a tie group spanning 1-based ranks [lo, hi] is lo + hi.
    std::int64_t rank_sum_twice = 0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        while (j + 1 < all.size() && all[j + 1].v == all[i].v) ++j;
        const auto twice_mid = static_cast<std::int64_t>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k)
            if (all[k].out) rank_sum_twice += twice_mid;
        i = j + 1;
    }
    const auto n_out = static_cast<std::int64_t>(out_scores.size());
    return rank_sum_twice - n_out * (n_out + 1);
}

double auc(std::span<const double> in_scores, std::span<const double> out_scores) {
    const auto twice = auc_twice_count(in_scores, out_scores);
    return static_cast<double>(twice) /
           (2.0 * static_cast<double>(in_scores.size()) * static_cast<double>(out_scores.size()));
}

double quantile_threshold(std::span<const double> val_scores, double level) {
    if (!(level > 0.0 && level < 1.0)) throw ParameterError("quantile level must be in (0, 1)");
    if (val_scores.empty()) throw ParameterError("quantile of an empty pool");
    std::vector<double> sorted(val_scores.begin(), val_scores.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    auto rank = static_cast<std::size_t>(std::ceil(level * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    return sorted[rank - 1];
}

ConfusionRates confusion_rates(std::span<const double> in_scores, std::span<const double> out_scores, double theta) {
    if (in_scores.empty() || out_scores.empty()) throw ParameterError("confusion_rates: both pools must be nonempty");
    const auto above = [theta](std::span<const double> s) {
        return static_cast<double>(std::count_if(s.begin(), s.end(), [theta](double u) { return u > theta; }));
    };
    ConfusionRates r;
    r.in_as_out = above(in_scores) / static_cast<double>(in_scores.size());
    r.in_as_in = 1.0 - r.in_as_out;
    r.out_as_out = above(out_scores) / static_cast<double>(out_scores.size());
    r.out_as_in = 1.0 - r.out_as_out;
    return r;
}

}  // namespace ubench::metrics
