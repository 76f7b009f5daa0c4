#include "ubench/posthoc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <utility>

namespace ubench::posthoc {

double temperature_nll(const Matrix& logits, std::span<const int> labels, double tau) {
    if (logits.cols() == 0) throw ParameterError("temperature_nll: empty validation set");
    if (static_cast<std::size_t>(logits.cols()) != labels.size())
        throw ShapeError("temperature_nll: label count does not match logits");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ParameterError("temperature must be positive and finite");
    double total = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        const int y = labels[static_cast<std::size_t>(j)];
        if (y < 0 || y >= logits.rows()) throw ParameterError("temperature_nll: label out of range");
        const Vector z = logits.col(j) / tau;
        const double m = z.maxCoeff();
        const double lse = m + std::log((z.array() - m).exp().sum());
        total += lse - z(y);
    }
    const double out = total / static_cast<double>(logits.cols());
    if (!std::isfinite(out)) throw NumericError("temperature_nll: non-finite value");
    return out;
}

CalibrationResult calibrate_temperature(const Matrix& logits, std::span<const int> labels) {
    if (logits.cols() == 0) throw ParameterError("calibrate_temperature: empty validation set");
    auto f = [&](double s) { return temperature_nll(logits, labels, std::exp(s)); };
    const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;

    CalibrationResult r;
    r.val_nll_before = f(0.0);
    double a = kLogTauMin, b = kLogTauMax;
    double c = b - ratio * (b - a), d = a + ratio * (b - a);
    double fc = f(c), fd = f(d);
    while (b - a > kLogTauTolerance) {
        r.trace.push_back({a, b, fc, fd});
        if (fc <= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    const double s = 0.5 * (a + b);
    const double fs = f(s);
    if (fs < r.val_nll_before) {
        r.tau = std::exp(s);
        r.val_nll_after = fs;
    } else {
        r.tau = 1.0;
        r.val_nll_after = r.val_nll_before;
    }
    return r;
}

Matrix log_probabilities(const Matrix& probs) {
    const double floor = std::numeric_limits<double>::min();
    return probs.array().max(floor).log().matrix();
}

double Candidate::mean_nll() const {
    if (val_nll.empty()) throw SelectionError("candidate trial " + std::to_string(trial) + " has no runs");
    return std::accumulate(val_nll.begin(), val_nll.end(), 0.0) / static_cast<double>(val_nll.size());
}

Selection ensemble_select(std::span<const Candidate> candidates, std::size_t k) {
    if (k == 0) throw SelectionError("ensemble size must be >= 1");
    if (candidates.size() < k)
        throw SelectionError("need " + std::to_string(k) + " candidates, have " + std::to_string(candidates.size()));
    std::vector<std::pair<double, std::size_t>> ranked;
    for (const auto& c : candidates) ranked.emplace_back(c.mean_nll(), c.trial);
    std::sort(ranked.begin(), ranked.end());
    Selection s;
    for (std::size_t i = 0; i < k; ++i) {
        s.trials.push_back(ranked[i].second);
        s.mean_val_nll.push_back(ranked[i].first);
    }
    return s;
}

Matrix average_predictions(std::span<const Matrix> members) {
    if (members.empty()) throw ParameterError("average_predictions: no members");
    Matrix sum = members.front();
    for (std::size_t i = 1; i < members.size(); ++i) {
        if (members[i].rows() != sum.rows() || members[i].cols() != sum.cols())
            throw ShapeError("average_predictions: member shapes differ");
        sum += members[i];
    }
    return sum / static_cast<double>(members.size());
}

Ensemble::Ensemble(std::vector<ModelPtr> members, Selection provenance)
    : members_(std::move(members)), provenance_(std::move(provenance)) {
    if (members_.empty()) throw SelectionError("an ensemble needs at least one member");
    std::set<std::pair<std::size_t, std::uint64_t>> seen;
    for (const auto& m : members_) {
        if (!m) throw SelectionError("ensemble member is null");
        if (!seen.emplace(m->seeds.trial, m->seeds.init_seed).second)
            throw SelectionError("ensemble members must be distinct (trial " + std::to_string(m->seeds.trial) + ")");
    }
    std::sort(members_.begin(), members_.end(), [](const ModelPtr& a, const ModelPtr& b) {
        return std::pair(a->seeds.trial, a->seeds.init_seed) < std::pair(b->seeds.trial, b->seeds.init_seed);
    });
    const auto& first = members_.front()->predictor.config();
    for (const auto& m : members_) {
        const auto& cfg = m->predictor.config();
        if (cfg.input_dim != first.input_dim || cfg.num_classes != first.num_classes)
            throw SelectionError("ensemble members disagree on input or class count");
    }
}

void Ensemble::set_tau(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ParameterError("temperature must be positive and finite");
    tau_ = tau;
}

bool Ensemble::single_plain() const { return k() == 1 && members_.front()->has_plain_logits(); }

Matrix Ensemble::calibration_logits(const Matrix& x) const {
    if (single_plain()) return members_.front()->plain_logits(x);
    std::vector<Matrix> preds;
    for (const auto& m : members_) preds.push_back(m->predict(x));
    return log_probabilities(average_predictions(preds));
}

Matrix Ensemble::predict(const Matrix& x) const {
    if (tau_ != 1.0) return net::softmax_columns(calibration_logits(x), tau_);
    if (k() == 1) return members_.front()->predict(x);
    std::vector<Matrix> preds;
    for (const auto& m : members_) preds.push_back(m->predict(x));
    return average_predictions(preds);
}

std::vector<Matrix> Ensemble::member_outputs(const Matrix& x) const {
    auto scaled = [this](const Matrix& p) {
        return tau_ == 1.0 ? p : net::softmax_columns(log_probabilities(p), tau_);
    };
    std::vector<Matrix> out;
    if (k() == 1 && members_.front()->algorithm == algo::Algorithm::mcdropout) {
        for (const auto& p : members_.front()->stochastic_passes(x)) out.push_back(scaled(p));
        return out;
    }
    for (const auto& m : members_) {
        if (tau_ != 1.0 && m->has_plain_logits())
            out.push_back(net::softmax_columns(m->plain_logits(x), tau_));
        else
            out.push_back(scaled(m->predict(x)));
    }
    return out;
}

Matrix Ensemble::jacobian(const Vector& x) const {
    if (single_plain()) return members_.front()->predictor.prediction_jacobian(x, tau_);
    Matrix jbar = Matrix::Zero(static_cast<Eigen::Index>(members_.front()->predictor.config().num_classes), x.size());
    for (const auto& m : members_) jbar += m->predictor.prediction_jacobian(x, 1.0);
    jbar /= static_cast<double>(k());
    if (tau_ == 1.0) return jbar;
    // q = softmax(log pbar / tau): dq = (diag(q) - q q^T) diag(1/pbar) dpbar / tau
    std::vector<Matrix> preds;
    for (const auto& m : members_) preds.push_back(m->predict(Matrix(x)));
    const Vector pbar = log_probabilities(average_predictions(preds)).col(0).array().exp();
    const Vector q = net::softmax(pbar.array().log().matrix(), tau_);
    const Matrix dq = (Matrix(q.asDiagonal()) - q * q.transpose()) / tau_;
    return dq * pbar.cwiseInverse().asDiagonal() * jbar;
}

CalibrationResult Ensemble::calibrate(const Matrix& val_x, std::span<const int> val_labels) {
    auto r = calibrate_temperature(calibration_logits(val_x), val_labels);
    tau_ = r.tau;
    return r;
}

}  // namespace ubench::posthoc
