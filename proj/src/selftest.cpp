#include "ubench/dataforge.hpp"
#include "ubench/metrics.hpp"
#include "ubench/oracles.hpp"

#include <algorithm>
#include <cstdio>
#include <random>

namespace ubench::oracle {

namespace {

SelftestResult auc_suite(Rng& rng) {
    std::uniform_int_distribution<std::size_t> size(1, 500);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 100; ++trial) {
        // every third pool is drawn from 4 distinct values to force heavy ties
        const bool ties = trial % 3 == 0;
        std::uniform_int_distribution<int> few(0, 3);
        std::vector<double> in(size(rng)), out(size(rng));
        for (auto& v : in) v = ties ? few(rng) : g(rng);
        for (auto& v : out) v = ties ? few(rng) : g(rng) + 0.5;
        const auto fast = metrics::auc_twice_count(in, out);
        const auto slow = pairwise_auc_twice_count(in, out);
        if (fast != slow)
            return {"auc-pairwise", false,
                    "pool " + std::to_string(trial) + ": rank count " + std::to_string(fast) + " != pairwise " +
                        std::to_string(slow)};
    }
    return {"auc-pairwise", true, "100 pools, n <= 500, exact integer agreement"};
}

SelftestResult ward_suite(Rng& rng) {
    std::uniform_int_distribution<Eigen::Index> rows(2, 12), cols(1, 5);
    std::normal_distribution<double> g;
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        Matrix pts(rows(rng), cols(rng));
        for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = g(rng);
        const auto tree = data::ward_tree(pts);
        const auto ref = brute_force_ward(pts);
        for (std::size_t k = 0; k < ref.size(); ++k) {
            const auto& n = tree.internal[k];
            const auto l = tree.leaves(n.left);
            const auto r = tree.leaves(n.right);
            const auto lmin = *std::min_element(l.begin(), l.end());
            const auto rmin = *std::min_element(r.begin(), r.end());
            worst = std::max(worst, std::abs(n.cost - ref[k].cost));
            if (lmin != ref[k].a_min_leaf || rmin != ref[k].b_min_leaf || std::abs(n.cost - ref[k].cost) > 1e-9)
                return {"ward-brute-force", false,
                        "instance " + std::to_string(trial) + " merge " + std::to_string(k) + " differs"};
        }
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "100 instances, n <= 12, d <= 5, max cost diff %.3g", worst);
    return {"ward-brute-force", true, buf};
}

SelftestResult gradient_suite(std::uint64_t seed) {
    const auto report = gradient_check_suite(seed);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu instances, max relative error %.3g (%s)", report.instances, report.worst,
                  report.worst_case.c_str());
    return {"gradient-check", report.instances >= 50 && report.worst < 1e-4, buf};
}

}  // namespace

std::vector<SelftestResult> run_selftest(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<SelftestResult> out;
    out.push_back(auc_suite(rng));
    out.push_back(ward_suite(rng));
    out.push_back(gradient_suite(derive_seed(seed, {fnv1a("gradient")})));
    return out;
}

}  // namespace ubench::oracle
