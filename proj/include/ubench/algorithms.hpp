#pragma once

// The eight training procedures: one shared SGD loop plus per-algorithm
// batch transforms (Mixup, soft labels, MIMO composition), loss terms and
// the RND / OC auxiliary networks.

#include "ubench/checkpoint.hpp"
#include "ubench/common.hpp"
#include "ubench/dataforge.hpp"
#include "ubench/netcore.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ubench::algo {

enum class Algorithm { erm, mixup, softlabeler, rbf, rnd, oc, mcdropout, mimo };

/// Canonical names: ERM, Mixup, SoftLabeler, RBF, RND, OC, MCDropout, MIMO.
std::string to_string(Algorithm a);
/// Case-insensitive; also accepts "mc-dropout" and "soft-labeler".
Algorithm parse_algorithm(std::string_view s);
const std::array<Algorithm, 8>& all_algorithms();

struct HyperParams {
    double learning_rate = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double mixing_alpha = 0.3;
    double dropout_rate = 0.05;
    std::size_t num_passes = 10;
    std::size_t subnetworks = 2;
    double input_repetition_prob = 0.6;
    std::size_t batch_repetition = 2;
    std::size_t teacher_width = 128;
    std::size_t teacher_depth = 3;
    double regularization = 0.0;
    double soft_label_value = 0.9;

    void validate(std::size_t num_classes) const;
    bool operator==(const HyperParams&) const = default;
};

nlohmann::json to_json(const HyperParams& hp);
HyperParams hyperparams_from_json(const nlohmann::json& j);

struct TrainSchedule {
    std::size_t epochs = 60;
    std::size_t batch_size = 64;
    std::size_t decay_period = 20;
    double decay_factor = 0.1;

    void validate() const;
};

struct RunSeeds {
    std::uint64_t init_seed = 0;  // root of every RNG stream used by the run
    std::uint64_t data_seed = 0;
    std::size_t trial = 0;
};

/// Test hooks; defaults leave training untouched.
struct TrainOptions {
    std::optional<double> forced_mixup_lambda;
    bool record_batch_losses = false;
};

// ---------------------------------------------------------------------------
// Small MLPs for the auxiliary pair: ReLU between layers, linear output.

struct MlpTrace {
    std::vector<Matrix> inputs;
    std::vector<Matrix> pre;
    Matrix output;
};

Matrix mlp_forward(const net::ParamSet& layers, const Matrix& x, MlpTrace* trace = nullptr);
net::ParamSet mlp_backward(const net::ParamSet& layers, const MlpTrace& trace, const Matrix& dout);

struct AuxiliaryPair {
    net::ParamSet teacher;  // unused when zero_teacher
    net::ParamSet student;
    double regularization = 0.0;
    bool zero_teacher = false;  // OC: the teacher is the zero function

    /// Teacher outputs (zeros for OC), one column per example.
    Matrix teacher_outputs(const Matrix& features) const;
    Matrix student_outputs(const Matrix& features) const;
};

/// feature_dim -> width x (depth - 1) -> feature_dim; teacher and student
/// draw from distinct streams of `seed`.
AuxiliaryPair make_auxiliary(bool zero_teacher, std::size_t feature_dim, std::size_t width, std::size_t depth,
                             double regularization, std::uint64_t seed);

/// ||student(phi) - teacher(phi)||^2 for one feature vector.
double student_teacher_loss(const Vector& features, const AuxiliaryPair& pair);
/// Same, one value per column.
Vector student_teacher_scores(const Matrix& features, const AuxiliaryPair& pair);

/// Sum over student weight matrices of ||W^T W - I||_F^2.
double oc_penalty(const net::ParamSet& student);
/// d oc_penalty / dW = 4 W (W^T W - I); biases get zero.
net::ParamSet oc_penalty_grad(const net::ParamSet& student);

struct AuxLoss {
    double loss = 0.0;
    net::ParamSet student_grads;
};

/// Mean squared student/teacher distance over the batch, plus
/// regularization * oc_penalty for OC. Features are constants.
AuxLoss auxiliary_loss(const AuxiliaryPair& pair, const Matrix& features);

// ---------------------------------------------------------------------------
// Batch transforms. Batches are column-major; targets are probability
// columns (C rows, or T*C stacked blocks for MIMO).

Matrix one_hot(std::span<const int> labels, std::size_t num_classes);

struct MixedBatch {
    Matrix inputs;
    Matrix targets;
    double lambda = 1.0;
    std::vector<std::size_t> partner;  // column j mixed with column partner[j]
};

/// Beta(alpha, alpha) draw via two Gamma draws.
double sample_beta(double alpha, Rng& rng);

/// One lambda per batch (drawn unless forced) and a seeded in-batch permutation.
MixedBatch mixup_batch(const Matrix& x, const Matrix& y, double alpha, Rng& rng,
                       std::optional<double> forced_lambda = std::nullopt);

/// The 1 becomes lmax, every 0 becomes (1 - lmax) / (C - 1).
Vector soften_labels(const Vector& onehot, double lmax);
Matrix soften_columns(const Matrix& onehot, double lmax);

struct MimoBatch {
    Matrix inputs;   // (T*d) x (B*rep)
    Matrix targets;  // (T*C) x (B*rep)
    std::vector<std::vector<std::size_t>> slots;  // per composed column, the source column of each slot
};

/// Repeats the batch `batch_repetition` times; slot 0 of each row is the row
/// itself, and with probability rho all slots copy it, otherwise slots
/// 1..T-1 are independent uniform draws from the batch.
MimoBatch mimo_compose(const Matrix& x, const Matrix& y, std::size_t heads, double rho,
                       std::size_t batch_repetition, Rng& rng);

/// Softmax of each C-block, averaged over the T heads. Input is T*C x N.
Matrix mimo_average(const Matrix& logits, std::size_t heads, double tau = 1.0);

/// Replicates x T times and averages the heads' softmaxes.
Vector mimo_predict(const net::Predictor& predictor, const Vector& x);

/// Elementwise exp(-z^2).
Matrix rbf_transform(const Matrix& logits);

// ---------------------------------------------------------------------------
// Losses.

struct LossResult {
    double loss = 0.0;             // predictor loss plus auxiliary loss
    double predictor_loss = 0.0;   // cross-entropy summed over heads, mean over columns
    double auxiliary_loss = 0.0;
    Matrix dlogits;                // d predictor_loss / d logits
    net::ParamSet student_grads;   // empty unless an auxiliary pair is given
};

/// Throws ContractError if any target block is off the simplex by > 1e-6.
void check_targets(const Matrix& targets, std::size_t heads);

/// Cross-entropy of every algorithm's predictor against probability targets
/// (MIMO sums over heads). RND / OC add the auxiliary term when `aux` and
/// `features` are supplied; it never reaches the predictor's gradient.
LossResult loss_for(Algorithm algorithm, const Matrix& logits, const Matrix& targets, std::size_t heads,
                    const AuxiliaryPair* aux = nullptr, const Matrix* features = nullptr);

// ---------------------------------------------------------------------------
// Training.

/// Head, T and dropout rate for `algorithm`, on top of a base architecture.
net::PredictorConfig configure_for(Algorithm algorithm, net::PredictorConfig base, const HyperParams& hp);

struct EpochLog {
    double train_loss = 0.0;
    double val_nll = 0.0;
};

struct TrainedModel {
    Algorithm algorithm = Algorithm::erm;
    HyperParams hparams;
    net::Predictor predictor;
    std::optional<AuxiliaryPair> auxiliary;
    RunSeeds seeds;
    TrainSchedule schedule;
    std::vector<EpochLog> log;
    std::vector<double> batch_losses;  // only with TrainOptions::record_batch_losses
    double val_nll = 0.0;
    Vector train_input_mean;  // x-bar, for the Mixup native measure
    Vector train_label_mean;  // y-bar

    /// Predictive distribution (C x N): softmax for single-head models, the
    /// head average for MIMO, the mean of T seeded dropout passes for MC-Dropout.
    Matrix predict(const Matrix& x) const;
    /// Per-pass distributions used by MC-Dropout (empty for other algorithms).
    std::vector<Matrix> stochastic_passes(const Matrix& x) const;
    /// Featurizer output; MIMO replicates the input first.
    Matrix features(const Matrix& x) const;
    /// Single-input network logits (linear/RBF) usable for temperature scaling.
    bool has_plain_logits() const;
    Matrix plain_logits(const Matrix& x) const;
    /// Network input for one unstacked example batch (MIMO replicates).
    Matrix network_input(const Matrix& x) const;

    void save(const std::filesystem::path& path) const;
    static TrainedModel load(const std::filesystem::path& path);
};

/// Seeded SGD over the training set; returns the final-epoch model.
TrainedModel train_run(Algorithm algorithm, const net::PredictorConfig& base, const HyperParams& hp,
                       const data::Dataset& train, const data::Dataset& val, const RunSeeds& seeds,
                       const TrainSchedule& schedule = {}, const TrainOptions& options = {});

}  // namespace ubench::algo
