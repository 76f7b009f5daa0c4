#pragma once

// Uncertainty measures u(f, x): small when the prediction can be trusted,
// large when the model should abstain.

#include "ubench/algorithms.hpp"
#include "ubench/common.hpp"
#include "ubench/dataforge.hpp"
#include "ubench/posthoc.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ubench::measures {

enum class MeasureId { largest, gap, entropy, jacobian, gmm, augment, native };

/// Names: largest, gap, entropy, jacobian, gmm, augment, native.
std::string to_string(MeasureId id);
MeasureId parse_measure(std::string_view s);
const std::array<MeasureId, 7>& all_measures();

/// Probability vector sorted in decreasing order.
Vector sorted_scores(const Vector& p);

/// -s(1).
double score_largest(const Vector& p);
/// s(2) - s(1); needs C >= 2.
double score_gap(const Vector& p);
/// -sum s log s over s > 0, natural log.
double score_entropy(const Vector& p);
/// Squared Frobenius norm of the prediction Jacobian wrt x.
double score_jacobian(const posthoc::Ensemble& model, const Vector& x);

struct GmmModel {
    std::vector<Vector> means;
    std::vector<Matrix> covariances;  // regularized
    std::vector<double> weights;
    std::vector<double> epsilons;  // ridge added to each class covariance

    /// Validates shapes and caches the Cholesky factors.
    void prepare();
    std::size_t classes() const { return means.size(); }
    double log_density(std::size_t c, const Vector& feature) const;
    double density(std::size_t c, const Vector& feature) const;

private:
    std::vector<Matrix> chol_;
    std::vector<double> log_norm_;
};

inline constexpr double kGmmEpsilonScale = 1e-6;

/// Class means, n-denominator covariances plus eps_c * I with
/// eps_c = eps_scale * trace(Sigma_c) / k (eps_scale when the trace is 0),
/// weights n_c / N.
/// `features` is k x N. Throws FitError naming any class with < 2 examples.
GmmModel fit_gmm(const Matrix& features, std::span<const int> labels, std::size_t num_classes,
                 double eps_scale = kGmmEpsilonScale);

/// -sum_c weight_c * N(feature; mu_c, Sigma_c), raw density.
double score_gmm(const GmmModel& gmm, const Vector& feature);

/// Maps a d x N input batch to C x N probabilities.
using ProbabilityFn = std::function<Matrix(const Matrix&)>;

struct AugmentSpec {
    std::size_t copies = 8;  // A
    double noise_scale = 0.1;
    std::uint64_t seed = 0;
};

/// Augmentation a of x: x + noise_scale * N(0, I) drawn from
/// Rng(derive_seed(seed, {a})), coordinates in order.
Vector augmented_input(const Vector& x, const AugmentSpec& spec, std::size_t a);

/// -max_c of the prediction averaged over the A augmentations.
double score_augment(const ProbabilityFn& f, const Vector& x, const AugmentSpec& spec);

struct MixupContext {
    Vector x_mean;  // x-bar
    Vector y_mean;  // y-bar
    double alpha = 0.3;
    std::size_t draws = 8;  // S
    std::uint64_t seed = 0;
    std::optional<double> forced_lambda;
};

/// Mean over S draws of ||l f(x) + (1-l) y-bar - f(l x + (1-l) x-bar)||^2,
/// l ~ Beta(alpha, alpha) from Rng(seed).
double native_mixup(const ProbabilityFn& f, const Vector& x, const MixupContext& ctx);
/// ||student(phi(x)) - teacher(phi(x))||^2; MeasureIncompatible without an auxiliary pair.
double native_student_teacher(const algo::TrainedModel& model, const Vector& x);
/// (s(1) - lmax)^2.
double native_softlabel(const Vector& p, double lmax);
/// H(mean) - mean(H) over the members.
double native_js(std::span<const Vector> members);

/// What the Native measure resolves to for a model.
enum class NativeKind { mixup, student_teacher, softlabel, jensen_shannon };
std::string to_string(NativeKind kind);
/// k > 1 ensembles and MC-Dropout use Jensen-Shannon; Mixup, RND, OC and
/// SoftLabeler their own measure; ERM, RBF and MIMO throw MeasureIncompatible.
NativeKind native_kind(const posthoc::Ensemble& model);

struct MeasureContext {
    MeasureId id = MeasureId::entropy;
    std::vector<GmmModel> gmm;  // one per ensemble member, only for gmm
    AugmentSpec augment;
    std::optional<NativeKind> native;
    double soft_label = 0.9;
    std::optional<MixupContext> mixup;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Builds the context for `id` on `model`, fitting any state on the
/// in-domain validation set. Throws MeasureIncompatible for unsupported pairs.
MeasureContext prepare_measure(MeasureId id, const posthoc::Ensemble& model, const data::Dataset& validation,
                               std::uint64_t seed, const AugmentSpec& augment = {});

/// One score per column of x (d x N). Seeded measures draw from
/// derive_seed(context seed, {example_ids[j]}), so a score depends only on
/// the example and not on its position in the batch.
Vector score_batch(const MeasureContext& ctx, const posthoc::Ensemble& model, const Matrix& x,
                   std::span<const std::uint64_t> example_ids);

// ---------------------------------------------------------------------------
// Score dumps: one JSON object per line,
// {"example": "...", "split": "in"|"out", "measure": "...", "score": <double>}.

enum class Split { in, out };

struct ScoreRecord {
    std::string example;
    Split split = Split::in;
    std::string measure;
    double score = 0.0;
    bool operator==(const ScoreRecord&) const = default;
};

void write_score_dump(const std::filesystem::path& path, std::span<const ScoreRecord> records);
std::vector<ScoreRecord> read_score_dump(const std::filesystem::path& path);

struct ScorePools {
    std::vector<double> in;
    std::vector<double> out;
};

/// In- and out-split scores of one measure, in file order.
ScorePools pools_for(std::span<const ScoreRecord> records, std::string_view measure);

}  // namespace ubench::measures
