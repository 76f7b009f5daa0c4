#pragma once

// Minimal feedforward engine: ReLU featurizer + linear/RBF/MIMO head,
// reverse-mode gradients, spectral normalization and SGD with momentum.
//
// Batches are column-major: a batch of B inputs is an (input_dim x B)
// matrix, one example per column.

#include "ubench/common.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ubench::net {

enum class HeadKind { linear, rbf, mimo };
enum class SizeTier { small, large };
enum class Mode { train, eval };

std::string to_string(HeadKind kind);
std::string to_string(SizeTier tier);
HeadKind parse_head_kind(std::string_view s);
SizeTier parse_size_tier(std::string_view s);

struct PredictorConfig {
    std::size_t input_dim = 1;
    std::vector<std::size_t> hidden_widths;
    std::size_t feature_dim = 1;
    std::size_t num_classes = 2;
    HeadKind head = HeadKind::linear;
    std::size_t heads = 1;  // T, only meaningful for HeadKind::mimo
    double dropout_rate = 0.0;
    bool spectral_norm = false;
    SizeTier size_tier = SizeTier::small;

    void validate() const;

    /// Width of the network's input layer; MIMO stacks T inputs.
    std::size_t network_input_dim() const;
    /// C for linear/rbf heads, T*C for MIMO.
    std::size_t output_dim() const;
    /// Number of featurizer layers (hidden widths plus the feature layer).
    std::size_t featurizer_depth() const { return hidden_widths.size() + 1; }

    /// Desk-scale stand-ins for the two backbone sizes.
    static PredictorConfig for_tier(SizeTier tier, std::size_t input_dim, std::size_t num_classes);
};

struct DenseLayer {
    Matrix weight;  // out x in
    Vector bias;    // out
};

/// Parameters (or gradients) in layer order: featurizer layers, then head.
using ParamSet = std::vector<DenseLayer>;

ParamSet zeros_like(const ParamSet& params);
std::size_t parameter_count(const ParamSet& params);
std::vector<double> flatten(const ParamSet& params);
void unflatten(std::span<const double> flat, ParamSet& params);

/// Glorot-uniform weights, zero biases.
DenseLayer glorot_layer(std::size_t in, std::size_t out, Rng& rng);

/// Persistent singular-vector estimate for one weight matrix.
struct SpectralState {
    Vector u;  // left, length = rows
    Vector v;  // right, length = cols
};

SpectralState make_spectral_state(const Matrix& w, Rng& rng);

/// Runs `power_iters` power iterations on W (updating `state`), returns the
/// estimate uᵀWv of the largest singular value.
double power_iterate(const Matrix& w, int power_iters, SpectralState& state);

/// W / max(sigma, eps) with sigma from `power_iters` power iterations.
/// Returns W unchanged when sigma < 1e-12.
Matrix spectral_normalize(const Matrix& w, int power_iters, SpectralState& state);

inline constexpr double kSpectralEps = 1e-12;

/// Max-subtracted softmax of z / tau.
Vector softmax(const Vector& z, double tau = 1.0);
/// Column-wise softmax.
Matrix softmax_columns(const Matrix& z, double tau = 1.0);

/// Elementwise z -> exp(-z^2).
Vector rbf_transform(const Vector& z);

/// Inverted dropout on a vector: survivors are scaled by 1/(1 - rate).
Vector apply_dropout(const Vector& activations, double rate, Rng& rng);
/// Mask with entries in {0, 1/(1-rate)}.
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng);

struct LayerTrace {
    Matrix input;  // activations entering the layer
    Matrix pre;    // W_eff * input + b
    Matrix mask;   // dropout mask, empty when dropout is off
    double sigma = 1.0;  // spectral divisor, 1 when not normalized
    bool normalized = false;
};

struct ForwardTrace {
    std::vector<LayerTrace> layers;  // featurizer layers, then the head
    Matrix features;                 // featurizer output after dropout
    Matrix raw_logits;               // head output
    Matrix logits;                   // head output after the RBF transform
    Mode mode = Mode::eval;
    bool dropout_active = false;
    std::uint64_t dropout_seed = 0;
    std::uint64_t param_version = 0;
};

struct Backprop {
    ParamSet grads;
    Matrix input_grad;  // dLoss/dX, same shape as the forward input
};

class Predictor {
public:
    Predictor() = default;
    Predictor(PredictorConfig config, std::uint64_t init_seed);

    const PredictorConfig& config() const { return config_; }
    const ParamSet& params() const { return params_; }
    const std::vector<SpectralState>& spectral_state() const { return spectral_; }
    std::uint64_t version() const { return version_; }

    /// Replace all parameters; shapes must match the config.
    void set_params(ParamSet params);
    void set_spectral_state(std::vector<SpectralState> state);
    /// Mutable access for optimizers. Invalidates outstanding traces.
    ParamSet& mutable_params();

    /// `stochastic` keeps dropout on in eval mode (MC-Dropout passes).
    /// Dropout masks come from `dropout_seed` alone; the call is pure.
    ForwardTrace forward(const Matrix& x, Mode mode, std::uint64_t dropout_seed = 0,
                         bool stochastic = false) const;
    Vector logits(const Vector& x) const;

    /// Featurizer output phi(x) in eval mode, one column per example.
    Matrix features(const Matrix& x) const;

    /// Gradients of a loss whose derivative wrt `trace.logits` is `dlogits`.
    Backprop backward(const ForwardTrace& trace, const Matrix& dlogits,
                      bool want_param_grads = true) const;

    /// Jacobian (C x input_dim) of the predictive softmax wrt x, eval mode.
    /// MIMO: gradient of the average over heads of the replicated input.
    Matrix prediction_jacobian(const Vector& x, double tau = 1.0) const;
    double input_jacobian_sqnorm(const Vector& x, double tau = 1.0) const;

    /// One power-iteration refresh per featurizer layer (training steps).
    void refresh_spectral(int power_iters);
    /// Static normalization: at least 30 iterations, continued to convergence.
    void settle_spectral();

    /// Weight matrix actually used in the forward pass for layer `i`.
    Matrix effective_weight(std::size_t layer) const;
    double spectral_sigma(std::size_t layer) const;

private:
    void bump_version();
    bool spectral_applies(std::size_t layer) const;

    PredictorConfig config_;
    ParamSet params_;
    std::vector<SpectralState> spectral_;
    std::uint64_t version_ = 0;
};

/// Stack T copies of x into a MIMO network input.
Vector replicate_input(const Vector& x, std::size_t copies);

struct SgdState {
    double learning_rate = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    ParamSet velocity;

    static SgdState for_params(const ParamSet& params, double lr, double momentum,
                               double weight_decay);
};

/// Step schedule: base * factor^(epoch / period), epochs 0-based.
double scheduled_rate(double base, std::size_t epoch, std::size_t period, double factor);

/// v <- m*v + (g + wd*w);  w <- w - lr*v
void sgd_step(SgdState& state, ParamSet& params, const ParamSet& grads);

}  // namespace ubench::net
