#include "ubench/netcore.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace ubench::net {

namespace {

std::atomic<std::uint64_t> g_version_counter{1};

std::uint64_t next_version() { return g_version_counter.fetch_add(1, std::memory_order_relaxed); }

void check_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite value");
}

}  // namespace

std::string to_string(HeadKind kind) {
    switch (kind) {
        case HeadKind::linear: return "linear";
        case HeadKind::rbf: return "rbf";
        case HeadKind::mimo: return "mimo";
    }
    return "?";
}

std::string to_string(SizeTier tier) { return tier == SizeTier::small ? "small" : "large"; }

HeadKind parse_head_kind(std::string_view s) {
    if (s == "linear") return HeadKind::linear;
    if (s == "rbf") return HeadKind::rbf;
    if (s == "mimo") return HeadKind::mimo;
    throw ParameterError("unknown head kind '" + std::string(s) + "'");
}

SizeTier parse_size_tier(std::string_view s) {
    if (s == "small") return SizeTier::small;
    if (s == "large") return SizeTier::large;
    throw ParameterError("unknown size tier '" + std::string(s) + "'");
}

void PredictorConfig::validate() const {
    if (input_dim < 1) throw ParameterError("input_dim must be >= 1");
    if (feature_dim < 1) throw ParameterError("feature_dim must be >= 1");
    if (num_classes < 2) throw ParameterError("num_classes must be >= 2");
    for (std::size_t w : hidden_widths)
        if (w < 1) throw ParameterError("hidden widths must be >= 1");
    if (head == HeadKind::mimo && heads < 1) throw ParameterError("mimo head needs T >= 1");
    if (head != HeadKind::mimo && heads != 1) throw ParameterError("only mimo heads may have T != 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ParameterError("dropout_rate must be in [0,1)");
}

std::size_t PredictorConfig::network_input_dim() const { return input_dim * heads; }
std::size_t PredictorConfig::output_dim() const { return num_classes * heads; }

PredictorConfig PredictorConfig::for_tier(SizeTier tier, std::size_t input_dim, std::size_t num_classes) {
    PredictorConfig c;
    c.input_dim = input_dim;
    c.num_classes = num_classes;
    c.size_tier = tier;
    if (tier == SizeTier::small) {
        c.hidden_widths = {64, 64};
        c.feature_dim = 32;
    } else {
        c.hidden_widths = {256, 256, 256};
        c.feature_dim = 128;
    }
    return c;
}

ParamSet zeros_like(const ParamSet& params) {
    ParamSet out;
    out.reserve(params.size());
    for (const auto& l : params)
        out.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
    return out;
}

std::size_t parameter_count(const ParamSet& params) {
    std::size_t n = 0;
    for (const auto& l : params) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
}

std::vector<double> flatten(const ParamSet& params) {
    std::vector<double> out;
    out.reserve(parameter_count(params));
    for (const auto& l : params) {
        // row-major weights, then bias
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c) out.push_back(l.weight(r, c));
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) out.push_back(l.bias(i));
    }
    return out;
}

void unflatten(std::span<const double> flat, ParamSet& params) {
    if (flat.size() != parameter_count(params))
        throw ShapeError("parameter payload has " + std::to_string(flat.size()) + " values, expected " +
                         std::to_string(parameter_count(params)));
    std::size_t k = 0;
    for (auto& l : params) {
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = flat[k++];
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = flat[k++];
    }
}

DenseLayer glorot_layer(std::size_t in, std::size_t out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    DenseLayer l{Matrix(out, in), Vector::Zero(static_cast<Eigen::Index>(out))};
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = dist(rng);
    return l;
}

SpectralState make_spectral_state(const Matrix& w, Rng& rng) {
    std::normal_distribution<double> n01;
    SpectralState s{Vector(w.rows()), Vector(w.cols())};
    for (Eigen::Index i = 0; i < s.u.size(); ++i) s.u(i) = n01(rng);
    s.u.normalize();
    s.v = w.transpose() * s.u;
    const double vn = s.v.norm();
    if (vn > 0) s.v /= vn;
    return s;
}

double power_iterate(const Matrix& w, int power_iters, SpectralState& state) {
    if (power_iters < 1) throw ParameterError("power_iters must be >= 1");
    if (!w.allFinite()) throw NumericError("spectral_normalize: non-finite weight");
    for (int it = 0; it < power_iters; ++it) {
        Vector v = w.transpose() * state.u;
        const double vn = v.norm();
        if (vn < kSpectralEps) return 0.0;
        state.v = v / vn;
        Vector u = w * state.v;
        const double un = u.norm();
        if (un < kSpectralEps) return 0.0;
        state.u = u / un;
    }
    return state.u.dot(w * state.v);
}

Matrix spectral_normalize(const Matrix& w, int power_iters, SpectralState& state) {
    const double sigma = power_iterate(w, power_iters, state);
    if (sigma < kSpectralEps) return w;
    return w / sigma;
}

Vector softmax(const Vector& z, double tau) {
    if (!(tau > 0.0)) throw ParameterError("softmax: tau must be > 0");
    if (!z.allFinite()) throw NumericError("softmax: non-finite logits");
    Vector e = ((z.array() - z.maxCoeff()) / tau).exp().matrix();
    return e / e.sum();
}

Matrix softmax_columns(const Matrix& z, double tau) {
    if (!(tau > 0.0)) throw ParameterError("softmax: tau must be > 0");
    if (!z.allFinite()) throw NumericError("softmax: non-finite logits");
    Matrix out(z.rows(), z.cols());
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
        auto col = z.col(c);
        Vector e = ((col.array() - col.maxCoeff()) / tau).exp().matrix();
        out.col(c) = e / e.sum();
    }
    return out;
}

Vector rbf_transform(const Vector& z) { return (-z.array().square()).exp().matrix(); }

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout rate must be in [0,1)");
    Matrix m(rows, cols);
    if (rate == 0.0) {
        m.setOnes();
        return m;
    }
    const double keep_scale = 1.0 / (1.0 - rate);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = u01(rng) < rate ? 0.0 : keep_scale;
    return m;
}

Vector apply_dropout(const Vector& activations, double rate, Rng& rng) {
    Matrix mask = dropout_mask(activations.size(), 1, rate, rng);
    return activations.cwiseProduct(mask.col(0));
}

Predictor::Predictor(PredictorConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(init_seed);
    std::size_t in = config_.network_input_dim();
    for (std::size_t w : config_.hidden_widths) {
        params_.push_back(glorot_layer(in, w, rng));
        in = w;
    }
    params_.push_back(glorot_layer(in, config_.feature_dim, rng));
    params_.push_back(glorot_layer(config_.feature_dim, config_.output_dim(), rng));
    if (config_.spectral_norm) {
        Rng srng(derive_seed(init_seed, {0x5bec7ULL}));
        for (std::size_t l = 0; l < config_.featurizer_depth(); ++l)
            spectral_.push_back(make_spectral_state(params_[l].weight, srng));
        settle_spectral();
    }
    bump_version();
}

void Predictor::bump_version() { version_ = next_version(); }

void Predictor::set_params(ParamSet params) {
    if (params.size() != params_.size()) throw ShapeError("set_params: layer count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].weight.rows() != params_[i].weight.rows() ||
            params[i].weight.cols() != params_[i].weight.cols() ||
            params[i].bias.size() != params_[i].bias.size())
            throw ShapeError("set_params: shape mismatch at layer " + std::to_string(i));
    }
    params_ = std::move(params);
    bump_version();
}

void Predictor::set_spectral_state(std::vector<SpectralState> state) {
    if (!config_.spectral_norm) {
        if (!state.empty()) throw ShapeError("spectral state supplied for a non-spectral predictor");
        return;
    }
    if (state.size() != config_.featurizer_depth()) throw ShapeError("spectral state layer count mismatch");
    for (std::size_t l = 0; l < state.size(); ++l)
        if (state[l].u.size() != params_[l].weight.rows() || state[l].v.size() != params_[l].weight.cols())
            throw ShapeError("spectral state shape mismatch at layer " + std::to_string(l));
    spectral_ = std::move(state);
    bump_version();
}

ParamSet& Predictor::mutable_params() {
    bump_version();
    return params_;
}

bool Predictor::spectral_applies(std::size_t layer) const {
    if (!config_.spectral_norm || layer >= spectral_.size()) return false;
    const auto& s = spectral_[layer];
    return s.u.dot(params_[layer].weight * s.v) >= kSpectralEps;
}

double Predictor::spectral_sigma(std::size_t layer) const {
    if (!spectral_applies(layer)) return 1.0;
    const auto& s = spectral_[layer];
    return s.u.dot(params_[layer].weight * s.v);
}

Matrix Predictor::effective_weight(std::size_t layer) const {
    return params_.at(layer).weight / spectral_sigma(layer);
}

void Predictor::refresh_spectral(int power_iters) {
    if (!config_.spectral_norm) return;
    for (std::size_t l = 0; l < spectral_.size(); ++l) power_iterate(params_[l].weight, power_iters, spectral_[l]);
    bump_version();
}

void Predictor::settle_spectral() {
    if (!config_.spectral_norm) return;
    for (std::size_t l = 0; l < spectral_.size(); ++l) {
        const Matrix& w = params_[l].weight;
        double prev = power_iterate(w, 30, spectral_[l]);
        for (int it = 0; it < 20000; ++it) {
            const double cur = power_iterate(w, 1, spectral_[l]);
            if (std::abs(cur - prev) <= 1e-13 * std::max(cur, 1e-300)) break;
            prev = cur;
        }
    }
    bump_version();
}

ForwardTrace Predictor::forward(const Matrix& x, Mode mode, std::uint64_t dropout_seed, bool stochastic) const {
    if (static_cast<std::size_t>(x.rows()) != config_.network_input_dim())
        throw ShapeError("forward: input has " + std::to_string(x.rows()) + " rows, expected " +
                         std::to_string(config_.network_input_dim()));
    ForwardTrace t;
    t.mode = mode;
    t.dropout_seed = dropout_seed;
    t.param_version = version_;
    t.dropout_active = config_.dropout_rate > 0.0 && (mode == Mode::train || stochastic);
    Rng rng(dropout_seed);

    const std::size_t depth = config_.featurizer_depth();
    t.layers.reserve(depth + 1);
    Matrix a = x;
    for (std::size_t l = 0; l < depth; ++l) {
        LayerTrace lt;
        lt.sigma = spectral_sigma(l);
        lt.normalized = config_.spectral_norm && spectral_applies(l);
        lt.input = a;
        if (lt.normalized)
            lt.pre = (params_[l].weight / lt.sigma) * a;
        else
            lt.pre = params_[l].weight * a;
        lt.pre.colwise() += params_[l].bias;
        a = lt.pre.cwiseMax(0.0);
        if (t.dropout_active) {
            lt.mask = dropout_mask(a.rows(), a.cols(), config_.dropout_rate, rng);
            a = a.cwiseProduct(lt.mask);
        }
        t.layers.push_back(std::move(lt));
    }
    t.features = a;
    LayerTrace head;
    head.input = a;
    head.pre = params_[depth].weight * a;
    head.pre.colwise() += params_[depth].bias;
    t.raw_logits = head.pre;
    t.layers.push_back(std::move(head));
    if (config_.head == HeadKind::rbf)
        t.logits = (-t.raw_logits.array().square()).exp().matrix();
    else
        t.logits = t.raw_logits;
    return t;
}

Vector Predictor::logits(const Vector& x) const { return forward(x, Mode::eval).logits.col(0); }

Matrix Predictor::features(const Matrix& x) const { return forward(x, Mode::eval).features; }

Backprop Predictor::backward(const ForwardTrace& trace, const Matrix& dlogits, bool want_param_grads) const {
    if (trace.param_version != version_)
        throw ContractError("backward: trace is stale (parameters changed since forward)");
    if (dlogits.rows() != trace.logits.rows() || dlogits.cols() != trace.logits.cols())
        throw ShapeError("backward: dlogits shape does not match logits");
    check_finite(dlogits, "backward");

    Backprop out;
    if (want_param_grads) out.grads = zeros_like(params_);
    const std::size_t depth = config_.featurizer_depth();

    Matrix g = dlogits;
    if (config_.head == HeadKind::rbf) {
        // d/dz exp(-z^2) = -2 z exp(-z^2)
        g = g.cwiseProduct((-2.0 * trace.raw_logits.array() * trace.logits.array()).matrix());
    }
    {
        const LayerTrace& head = trace.layers[depth];
        if (want_param_grads) {
            out.grads[depth].weight.noalias() = g * head.input.transpose();
            out.grads[depth].bias = g.rowwise().sum();
        }
        g = params_[depth].weight.transpose() * g;
    }
    for (std::size_t li = depth; li-- > 0;) {
        const LayerTrace& lt = trace.layers[li];
        if (lt.mask.size() > 0) g = g.cwiseProduct(lt.mask);
        g = g.cwiseProduct((lt.pre.array() > 0.0).cast<double>().matrix());
        const bool normalized = lt.normalized;
        if (want_param_grads) {
            Matrix gw = g * lt.input.transpose();
            if (normalized) {
                // W_eff = W / sigma, sigma = u^T W v with (u, v) held fixed.
                const auto& s = spectral_[li];
                const double inner = gw.cwiseProduct(params_[li].weight).sum();
                out.grads[li].weight = gw / lt.sigma - (inner / (lt.sigma * lt.sigma)) * (s.u * s.v.transpose());
            } else {
                out.grads[li].weight = std::move(gw);
            }
            out.grads[li].bias = g.rowwise().sum();
        }
        if (normalized)
            g = (params_[li].weight.transpose() * g) / lt.sigma;
        else
            g = params_[li].weight.transpose() * g;
    }
    out.input_grad = std::move(g);
    return out;
}

Vector replicate_input(const Vector& x, std::size_t copies) {
    Vector out(x.size() * static_cast<Eigen::Index>(copies));
    for (std::size_t t = 0; t < copies; ++t) out.segment(static_cast<Eigen::Index>(t) * x.size(), x.size()) = x;
    return out;
}

Matrix Predictor::prediction_jacobian(const Vector& x, double tau) const {
    if (static_cast<std::size_t>(x.size()) != config_.input_dim)
        throw ShapeError("jacobian: input has wrong length");
    const auto C = static_cast<Eigen::Index>(config_.num_classes);
    const auto T = static_cast<Eigen::Index>(config_.heads);
    const Vector xin = replicate_input(x, config_.heads);
    // One column per output coordinate; the same input repeated C times.
    Matrix batch = xin.replicate(1, C);
    ForwardTrace trace = forward(batch, Mode::eval);
    const Vector z = trace.logits.col(0);

    Matrix seed = Matrix::Zero(z.size(), C);
    for (Eigen::Index t = 0; t < T; ++t) {
        const Vector p = softmax(z.segment(t * C, C), tau);
        for (Eigen::Index c = 0; c < C; ++c)
            for (Eigen::Index j = 0; j < C; ++j)
                seed(t * C + j, c) = p(c) * ((c == j ? 1.0 : 0.0) - p(j)) / (tau * static_cast<double>(T));
    }
    Backprop bp = backward(trace, seed, false);
    const auto d = static_cast<Eigen::Index>(config_.input_dim);
    Matrix jac = Matrix::Zero(C, d);
    for (Eigen::Index t = 0; t < T; ++t) jac += bp.input_grad.middleRows(t * d, d).transpose();
    return jac;
}

double Predictor::input_jacobian_sqnorm(const Vector& x, double tau) const {
    return prediction_jacobian(x, tau).squaredNorm();
}

SgdState SgdState::for_params(const ParamSet& params, double lr, double momentum, double weight_decay) {
    if (!(lr >= 0.0)) throw ParameterError("learning rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) throw ParameterError("weight decay must be >= 0");
    SgdState s;
    s.learning_rate = lr;
    s.momentum = momentum;
    s.weight_decay = weight_decay;
    s.velocity = zeros_like(params);
    return s;
}

double scheduled_rate(double base, std::size_t epoch, std::size_t period, double factor) {
    if (period == 0) return base;
    return base * std::pow(factor, static_cast<double>(epoch / period));
}

void sgd_step(SgdState& state, ParamSet& params, const ParamSet& grads) {
    if (state.velocity.size() != params.size() || grads.size() != params.size())
        throw ShapeError("sgd_step: layer count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& w = params[i];
        auto& v = state.velocity[i];
        const auto& g = grads[i];
        if (g.weight.rows() != w.weight.rows() || g.weight.cols() != w.weight.cols() ||
            v.weight.rows() != w.weight.rows() || v.weight.cols() != w.weight.cols() ||
            g.bias.size() != w.bias.size() || v.bias.size() != w.bias.size())
            throw ShapeError("sgd_step: shape mismatch at layer " + std::to_string(i));
        v.weight = state.momentum * v.weight + (g.weight + state.weight_decay * w.weight);
        v.bias = state.momentum * v.bias + (g.bias + state.weight_decay * w.bias);
        w.weight -= state.learning_rate * v.weight;
        w.bias -= state.learning_rate * v.bias;
    }
}

}  // namespace ubench::net
