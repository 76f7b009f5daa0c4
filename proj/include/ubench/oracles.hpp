#pragma once

// Independent reference computations used by the test suites and the
// `selftest` subcommand. Nothing here calls into the optimized code paths
// it is meant to check (other than finite differences, which by nature
// evaluate the forward function).

#include "ubench/common.hpp"
#include "ubench/netcore.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace ubench::oracle {

/// Plain-loop forward pass of a ReLU MLP: hidden layers ReLU, last layer linear.
std::vector<double> naive_mlp_forward(const net::ParamSet& layers, const std::vector<double>& x);

/// Central finite differences of `loss` wrt every parameter.
net::ParamSet finite_difference_gradient(const std::function<double(const net::ParamSet&)>& loss,
                                         const net::ParamSet& at, double h = 1e-5);

/// |a - b| / max(|a|, |b|, floor), maximized over all entries.
double max_relative_error(const net::ParamSet& a, const net::ParamSet& b, double floor = 1e-5);
double max_relative_error(const Matrix& a, const Matrix& b, double floor = 1e-5);

/// Exact pairwise AUC count: returns 2 * (#{out > in} + 0.5 * #{out == in}).
std::int64_t pairwise_auc_twice_count(std::span<const double> in, std::span<const double> out);
double pairwise_auc(std::span<const double> in, std::span<const double> out);

struct OracleMerge {
    std::size_t a_min_leaf;  // smallest leaf id in each merged cluster
    std::size_t b_min_leaf;
    double cost;
};

/// O(n^3) agglomeration that recomputes every Ward linkage from centroids.
std::vector<OracleMerge> brute_force_ward(const Matrix& points);

/// ECE by direct per-bin summation over all rows.
double direct_ece(const std::vector<double>& confidence, const std::vector<bool>& correct, int bins);

/// Mean NLL of softmax(logits / tau) over columns.
double temperature_nll(const Matrix& logits, std::span<const int> labels, double tau);
/// argmin over a geometric grid of `points` temperatures in [lo, hi].
double grid_temperature(const Matrix& logits, std::span<const int> labels, double lo = 0.05, double hi = 20.0,
                        int points = 400);

/// Per-class mean and n-denominator covariance by explicit loops.
struct Moments {
    std::vector<double> mean;
    std::vector<std::vector<double>> cov;
};
Moments brute_moments(const std::vector<std::vector<double>>& rows);

/// Multivariate normal density evaluated from the textbook formula.
double normal_density(const std::vector<double>& x, const std::vector<double>& mean,
                      const std::vector<std::vector<double>>& cov);

struct GradientCheckReport {
    std::size_t instances = 0;
    double worst = 0.0;  // max relative error over every instance
    std::string worst_case;
    std::vector<std::string> cases;  // one label per instance
};

/// Reverse-mode vs. central differences for every algorithm's loss on small
/// random nets (plain and spectral layers, every head kind, dropout), plus the
/// RND / OC student losses.
GradientCheckReport gradient_check_suite(std::uint64_t seed, std::size_t per_algorithm = 6);

struct SelftestResult {
    std::string name;
    bool passed;
    std::string detail;
};

/// Oracle suites run by `ubench selftest`.
std::vector<SelftestResult> run_selftest(std::uint64_t seed = 2024);

}  // namespace ubench::oracle
