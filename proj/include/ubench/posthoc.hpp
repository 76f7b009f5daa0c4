#pragma once

// Temperature calibration and best-k ensembles.

#include "ubench/algorithms.hpp"
#include "ubench/common.hpp"

#include <memory>
#include <span>
#include <vector>

namespace ubench::posthoc {

/// One golden-section iteration: the current bracket in log-tau.
struct SearchStep {
    double lo = 0.0;
    double hi = 0.0;
    double nll_lo = 0.0;
    double nll_hi = 0.0;
};

struct CalibrationResult {
    double tau = 1.0;
    double val_nll_before = 0.0;  // at tau = 1
    double val_nll_after = 0.0;   // at tau
    std::vector<SearchStep> trace;
};

inline constexpr double kLogTauMin = -3.0;
inline constexpr double kLogTauMax = 3.0;
inline constexpr double kLogTauTolerance = 1e-4;

/// Mean NLL of softmax(z / tau) over the columns of `logits` (C x N).
double temperature_nll(const Matrix& logits, std::span<const int> labels, double tau);

/// Golden-section search on log tau in [-3, 3]; falls back to tau = 1 if
/// that is no worse than the search result.
CalibrationResult calibrate_temperature(const Matrix& logits, std::span<const int> labels);

/// Logits whose softmax is `probs`: log(max(p, smallest normal)).
Matrix log_probabilities(const Matrix& probs);

struct Candidate {
    std::size_t trial = 0;
    std::vector<double> val_nll;  // one per data seed
    double mean_nll() const;
};

struct Selection {
    std::vector<std::size_t> trials;     // best first
    std::vector<double> mean_val_nll;   // aligned with trials
};

/// Ranks candidates by mean validation NLL, ties by lowest trial, keeps k.
Selection ensemble_select(std::span<const Candidate> candidates, std::size_t k);

/// Arithmetic mean of C x N member predictions.
Matrix average_predictions(std::span<const Matrix> members);

using ModelPtr = std::shared_ptr<const algo::TrainedModel>;

/// K trained models averaged into one predictor, with one temperature
/// applied to the averaged distribution. Members are kept in a canonical
/// order (trial, then init seed) so results do not depend on input order.
class Ensemble {
public:
    Ensemble(std::vector<ModelPtr> members, Selection provenance = {});

    std::size_t k() const { return members_.size(); }
    const algo::TrainedModel& member(std::size_t i) const { return *members_.at(i); }
    const Selection& provenance() const { return provenance_; }
    double tau() const { return tau_; }
    void set_tau(double tau);

    /// True for a single model with single-pass logits.
    bool single_plain() const;
    /// z for single plain models, log of the averaged prediction otherwise.
    Matrix calibration_logits(const Matrix& x) const;
    /// Averaged prediction (C x N); softmax(calibration_logits / tau) once tau != 1.
    Matrix predict(const Matrix& x) const;
    /// Member outputs with the ensemble temperature applied to each; for
    /// a single MC-Dropout model, its stochastic passes.
    std::vector<Matrix> member_outputs(const Matrix& x) const;
    /// Jacobian (C x d) of predict wrt one input. MC-Dropout members use
    /// their deterministic network.
    Matrix jacobian(const Vector& x) const;

    /// Fits tau on validation data and stores it.
    CalibrationResult calibrate(const Matrix& val_x, std::span<const int> val_labels);

private:
    std::vector<ModelPtr> members_;
    Selection provenance_;
    double tau_ = 1.0;
};

}  // namespace ubench::posthoc
