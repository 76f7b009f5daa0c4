#pragma once

// In-domain metrics (accuracy, NLL, ECE) and out-domain metrics (AUC,
// validation-quantile threshold, confusion rates).

#include "ubench/common.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace ubench::metrics {

struct PredictionBatch {
    Matrix probabilities;  // N x C, rows on the simplex
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t classes() const { return static_cast<std::size_t>(probabilities.cols()); }
    void validate() const;
};

/// Builds a batch from a (C x N) column-major prediction matrix.
PredictionBatch from_columns(const Matrix& probs, std::vector<int> labels);

/// Ties between equal probabilities rank the lower class index first.
double acc_topk(const PredictionBatch& batch, std::size_t k);

inline constexpr double kNllFloor = 1e-12;
double nll(const PredictionBatch& batch);

/// Confidence = max probability; bins [b/B, (b+1)/B) with the last bin closed.
double ece(const PredictionBatch& batch, int num_bins = 15);
double ece(std::span<const double> confidence, std::span<const std::uint8_t> correct, int num_bins = 15);

/// 2 * (#{out > in} + 0.5 * #{out == in}) from midranks, exact in integers.
std::int64_t auc_twice_count(std::span<const double> in_scores, std::span<const double> out_scores);
double auc(std::span<const double> in_scores, std::span<const double> out_scores);

/// Nearest-rank upper quantile: the ceil(level * n)-th smallest value.
double quantile_threshold(std::span<const double> val_scores, double level = 0.95);

struct ConfusionRates {
    double in_as_in = 0;
    double in_as_out = 0;
    double out_as_in = 0;
    double out_as_out = 0;
};

/// Out-domain when u > theta. Each pair of complements sums to exactly 1.
ConfusionRates confusion_rates(std::span<const double> in_scores, std::span<const double> out_scores, double theta);

}  // namespace ubench::metrics
