#include "ubench/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ubench::oracle {

std::vector<double> naive_mlp_forward(const net::ParamSet& layers, const std::vector<double>& x) {
    std::vector<double> a = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& W = layers[l].weight;
        const auto& b = layers[l].bias;
        std::vector<double> next(static_cast<std::size_t>(W.rows()));
        for (Eigen::Index r = 0; r < W.rows(); ++r) {
            double s = b(r);
            for (Eigen::Index c = 0; c < W.cols(); ++c) s += W(r, c) * a[static_cast<std::size_t>(c)];
            const bool hidden = l + 1 < layers.size();
            next[static_cast<std::size_t>(r)] = hidden ? std::max(0.0, s) : s;
        }
        a = std::move(next);
    }
    return a;
}

net::ParamSet finite_difference_gradient(const std::function<double(const net::ParamSet&)>& loss,
                                         const net::ParamSet& at, double h) {
    net::ParamSet probe = at;
    net::ParamSet grad = net::zeros_like(at);
    for (std::size_t l = 0; l < at.size(); ++l) {
        for (Eigen::Index i = 0; i < at[l].weight.size(); ++i) {
            const double orig = at[l].weight.data()[i];
            probe[l].weight.data()[i] = orig + h;
            const double fp = loss(probe);
            probe[l].weight.data()[i] = orig - h;
            const double fm = loss(probe);
            probe[l].weight.data()[i] = orig;
            grad[l].weight.data()[i] = (fp - fm) / (2 * h);
        }
        for (Eigen::Index i = 0; i < at[l].bias.size(); ++i) {
            const double orig = at[l].bias(i);
            probe[l].bias(i) = orig + h;
            const double fp = loss(probe);
            probe[l].bias(i) = orig - h;
            const double fm = loss(probe);
            probe[l].bias(i) = orig;
            grad[l].bias(i) = (fp - fm) / (2 * h);
        }
    }
    return grad;
}

double max_relative_error(const Matrix& a, const Matrix& b, double floor) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        const double x = a.data()[i], y = b.data()[i];
        const double denom = std::max({std::abs(x), std::abs(y), floor});
        worst = std::max(worst, std::abs(x - y) / denom);
    }
    return worst;
}

double max_relative_error(const net::ParamSet& a, const net::ParamSet& b, double floor) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double worst = 0.0;
    for (std::size_t l = 0; l < a.size(); ++l) {
        worst = std::max(worst, max_relative_error(a[l].weight, b[l].weight, floor));
        worst = std::max(worst, max_relative_error(Matrix(a[l].bias), Matrix(b[l].bias), floor));
    }
    return worst;
}

std::int64_t pairwise_auc_twice_count(std::span<const double> in, std::span<const double> out) {
    std::int64_t twice = 0;
    for (double o : out)
        for (double i : in) twice += o > i ? 2 : (o == i ? 1 : 0);
    return twice;
}

double pairwise_auc(std::span<const double> in, std::span<const double> out) {
    return static_cast<double>(pairwise_auc_twice_count(in, out)) /
           (2.0 * static_cast<double>(in.size()) * static_cast<double>(out.size()));
}

std::vector<OracleMerge> brute_force_ward(const Matrix& points) {
    const auto n = static_cast<std::size_t>(points.rows());
    std::vector<std::vector<std::size_t>> clusters(n);
    for (std::size_t i = 0; i < n; ++i) clusters[i] = {i};
    std::vector<OracleMerge> merges;
    auto centroid = [&](const std::vector<std::size_t>& members) {
        std::vector<double> c(static_cast<std::size_t>(points.cols()), 0.0);
        for (std::size_t m : members)
            for (Eigen::Index d = 0; d < points.cols(); ++d) c[static_cast<std::size_t>(d)] += points(static_cast<Eigen::Index>(m), d);
        for (double& v : c) v /= static_cast<double>(members.size());
        return c;
    };
    while (clusters.size() > 1) {
        // keep clusters ordered by their smallest leaf
        std::sort(clusters.begin(), clusters.end(),
                  [](const auto& a, const auto& b) { return *std::min_element(a.begin(), a.end()) < *std::min_element(b.begin(), b.end()); });
        double best = std::numeric_limits<double>::infinity();
        std::size_t bi = 0, bj = 0;
        for (std::size_t i = 0; i < clusters.size(); ++i) {
            const auto ci = centroid(clusters[i]);
            for (std::size_t j = i + 1; j < clusters.size(); ++j) {
                const auto cj = centroid(clusters[j]);
                double sq = 0.0;
                for (std::size_t d = 0; d < ci.size(); ++d) sq += (ci[d] - cj[d]) * (ci[d] - cj[d]);
                const double na = static_cast<double>(clusters[i].size());
                const double nb = static_cast<double>(clusters[j].size());
                const double cost = na * nb / (na + nb) * sq;
                if (cost < best) {
                    best = cost;
                    bi = i;
                    bj = j;
                }
            }
        }
        const std::size_t amin = *std::min_element(clusters[bi].begin(), clusters[bi].end());
        const std::size_t bmin = *std::min_element(clusters[bj].begin(), clusters[bj].end());
        merges.push_back({amin, bmin, best});
        clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
        clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
    }
    return merges;
}

double direct_ece(const std::vector<double>& confidence, const std::vector<bool>& correct, int bins) {
    const double n = static_cast<double>(confidence.size());
    double total = 0.0;
    for (int b = 0; b < bins; ++b) {
        const double lo = static_cast<double>(b) / bins;
        const double hi = static_cast<double>(b + 1) / bins;
        double count = 0, acc = 0, conf = 0;
        for (std::size_t i = 0; i < confidence.size(); ++i) {
            const double c = confidence[i];
            const bool inside = (c >= lo && c < hi) || (b == bins - 1 && c == 1.0);
            if (!inside) continue;
            count += 1;
            acc += correct[i] ? 1.0 : 0.0;
            conf += c;
        }
        if (count > 0) total += (count / n) * std::abs(acc / count - conf / count);
    }
    return total;
}

double temperature_nll(const Matrix& logits, std::span<const int> labels, double tau) {
    double total = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        double mx = logits.col(c).maxCoeff();
        double s = 0.0;
        for (Eigen::Index k = 0; k < logits.rows(); ++k) s += std::exp((logits(k, c) - mx) / tau);
        const double logp = (logits(labels[static_cast<std::size_t>(c)], c) - mx) / tau - std::log(s);
        total -= logp;
    }
    return total / static_cast<double>(logits.cols());
}

double grid_temperature(const Matrix& logits, std::span<const int> labels, double lo, double hi, int points) {
    double best_tau = lo, best = std::numeric_limits<double>::infinity();
    const double step = std::log(hi / lo) / (points - 1);
    for (int i = 0; i < points; ++i) {
        const double tau = lo * std::exp(step * i);
        const double v = temperature_nll(logits, labels, tau);
        if (v < best) {
            best = v;
            best_tau = tau;
        }
    }
    return best_tau;
}

Moments brute_moments(const std::vector<std::vector<double>>& rows) {
    Moments m;
    const std::size_t k = rows.front().size();
    const double n = static_cast<double>(rows.size());
    m.mean.assign(k, 0.0);
    for (const auto& r : rows)
        for (std::size_t d = 0; d < k; ++d) m.mean[d] += r[d] / n;
    m.cov.assign(k, std::vector<double>(k, 0.0));
    for (const auto& r : rows)
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) m.cov[i][j] += (r[i] - m.mean[i]) * (r[j] - m.mean[j]) / n;
    return m;
}

double normal_density(const std::vector<double>& x, const std::vector<double>& mean,
                      const std::vector<std::vector<double>>& cov) {
    // Gauss-Jordan inverse and determinant; fine for the small k used in tests.
    const std::size_t k = x.size();
    std::vector<std::vector<double>> a = cov, inv(k, std::vector<double>(k, 0.0));
    for (std::size_t i = 0; i < k; ++i) inv[i][i] = 1.0;
    double det = 1.0;
    for (std::size_t col = 0; col < k; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < k; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        if (piv != col) {
            std::swap(a[piv], a[col]);
            std::swap(inv[piv], inv[col]);
            det = -det;
        }
        const double p = a[col][col];
        det *= p;
        for (std::size_t j = 0; j < k; ++j) {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for (std::size_t r = 0; r < k; ++r) {
            if (r == col) continue;
            const double f = a[r][col];
            for (std::size_t j = 0; j < k; ++j) {
                a[r][j] -= f * a[col][j];
                inv[r][j] -= f * inv[col][j];
            }
        }
    }
    double quad = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) quad += (x[i] - mean[i]) * inv[i][j] * (x[j] - mean[j]);
    const double pi = 3.14159265358979323846;
    return std::exp(-0.5 * quad) / std::sqrt(std::pow(2 * pi, static_cast<double>(k)) * det);
}

}  // namespace ubench::oracle
