#include "ubench/measures.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>

namespace ubench::measures {

namespace {

void check_simplex(const Vector& p, const char* who) {
    if (p.size() == 0) throw ParameterError(std::string(who) + ": empty probability vector");
    if (!p.allFinite() || p.minCoeff() < -1e-12 || std::abs(p.sum() - 1.0) > 1e-6)
        throw ParameterError(std::string(who) + ": input is not a probability vector");
}

double entropy(const Vector& p) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i)
        if (p(i) > 0.0) h -= p(i) * std::log(p(i));
    return h;
}

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace

std::string to_string(MeasureId id) {
    switch (id) {
        case MeasureId::largest: return "largest";
        case MeasureId::gap: return "gap";
        case MeasureId::entropy: return "entropy";
        case MeasureId::jacobian: return "jacobian";
        case MeasureId::gmm: return "gmm";
        case MeasureId::augment: return "augment";
        case MeasureId::native: return "native";
    }
    return "?";
}

MeasureId parse_measure(std::string_view s) {
    const auto name = lower(s);
    for (MeasureId id : all_measures())
        if (to_string(id) == name) return id;
    throw ParameterError("unknown measure '" + std::string(s) + "'");
}

const std::array<MeasureId, 7>& all_measures() {
    static const std::array<MeasureId, 7> ids{MeasureId::largest, MeasureId::gap,     MeasureId::entropy,
                                              MeasureId::jacobian, MeasureId::gmm, MeasureId::augment,
                                              MeasureId::native};
    return ids;
}

Vector sorted_scores(const Vector& p) {
    Vector s = p;
    std::sort(s.data(), s.data() + s.size(), std::greater<>());
    return s;
}

double score_largest(const Vector& p) {
    check_simplex(p, "score_largest");
    return -p.maxCoeff();
}

double score_gap(const Vector& p) {
    if (p.size() < 2) throw ParameterError("score_gap needs at least 2 classes");
    check_simplex(p, "score_gap");
    const Vector s = sorted_scores(p);
    return s(1) - s(0);
}

double score_entropy(const Vector& p) {
    check_simplex(p, "score_entropy");
    return entropy(p);
}

double score_jacobian(const posthoc::Ensemble& model, const Vector& x) { return model.jacobian(x).squaredNorm(); }

void GmmModel::prepare() {
    const std::size_t n = means.size();
    if (n == 0) throw FitError("GMM has no classes");
    if (covariances.size() != n || weights.size() != n || epsilons.size() != n)
        throw ShapeError("GMM: means, covariances, weights and epsilons differ in length");
    const auto k = means.front().size();
    double wsum = 0.0;
    chol_.clear();
    log_norm_.clear();
    for (std::size_t c = 0; c < n; ++c) {
        if (means[c].size() != k || covariances[c].rows() != k || covariances[c].cols() != k)
            throw ShapeError("GMM: class " + std::to_string(c) + " has inconsistent dimensions");
        if (!(weights[c] >= 0.0)) throw FitError("GMM: negative weight for class " + std::to_string(c));
        wsum += weights[c];
        Eigen::LLT<Matrix> llt(covariances[c]);
        if (llt.info() != Eigen::Success)
            throw FitError("GMM: covariance of class " + std::to_string(c) + " is not positive definite");
        const Matrix l = llt.matrixL();
        const double logdet = 2.0 * l.diagonal().array().log().sum();
        chol_.push_back(l);
        log_norm_.push_back(-0.5 * (static_cast<double>(k) * std::log(2.0 * std::numbers::pi) + logdet));
    }
    if (std::abs(wsum - 1.0) > 1e-12) throw FitError("GMM weights do not sum to 1");
}

double GmmModel::log_density(std::size_t c, const Vector& feature) const {
    if (chol_.size() != means.size()) throw ContractError("GMM used before prepare()");
    if (feature.size() != means.at(c).size()) throw ShapeError("GMM: feature has wrong length");
    const Vector z = chol_[c].triangularView<Eigen::Lower>().solve(feature - means[c]);
    return log_norm_[c] - 0.5 * z.squaredNorm();
}

double GmmModel::density(std::size_t c, const Vector& feature) const { return std::exp(log_density(c, feature)); }

GmmModel fit_gmm(const Matrix& features, std::span<const int> labels, std::size_t num_classes, double eps_scale) {
    if (static_cast<std::size_t>(features.cols()) != labels.size())
        throw ShapeError("fit_gmm: label count does not match features");
    if (num_classes == 0) throw ParameterError("fit_gmm: no classes");
    if (!(eps_scale >= 0.0)) throw ParameterError("fit_gmm: eps scale must be >= 0");
    const auto k = features.rows();
    std::vector<std::vector<Eigen::Index>> members(num_classes);
    for (std::size_t j = 0; j < labels.size(); ++j) {
        const int y = labels[j];
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw ParameterError("fit_gmm: label out of range");
        members[static_cast<std::size_t>(y)].push_back(static_cast<Eigen::Index>(j));
    }
    GmmModel g;
    const auto total = static_cast<double>(labels.size());
    for (std::size_t c = 0; c < num_classes; ++c) {
        const auto& rows = members[c];
        if (rows.size() < 2)
            throw FitError("GMM: class " + std::to_string(c) + " has " + std::to_string(rows.size()) +
                           " validation examples, need at least 2");
        const auto n = static_cast<double>(rows.size());
        Vector mu = Vector::Zero(k);
        for (auto j : rows) mu += features.col(j);
        mu /= n;
        Matrix cov = Matrix::Zero(k, k);
        for (auto j : rows) {
            const Vector d = features.col(j) - mu;
            cov.noalias() += d * d.transpose();
        }
        cov /= n;
        double eps = eps_scale * cov.trace() / static_cast<double>(k);
        if (eps == 0.0) eps = eps_scale;
        cov.diagonal().array() += eps;
        g.means.push_back(std::move(mu));
        g.covariances.push_back(std::move(cov));
        g.weights.push_back(n / total);
        g.epsilons.push_back(eps);
    }
    g.prepare();
    return g;
}

double score_gmm(const GmmModel& gmm, const Vector& feature) {
    double s = 0.0;
    for (std::size_t c = 0; c < gmm.classes(); ++c) s += gmm.weights[c] * gmm.density(c, feature);
    return -s;
}

Vector augmented_input(const Vector& x, const AugmentSpec& spec, std::size_t a) {
    Rng rng(derive_seed(spec.seed, {a}));
    std::normal_distribution<double> g;
    Vector out = x;
    for (Eigen::Index i = 0; i < out.size(); ++i) out(i) += spec.noise_scale * g(rng);
    return out;
}

double score_augment(const ProbabilityFn& f, const Vector& x, const AugmentSpec& spec) {
    if (spec.copies == 0) throw ParameterError("augmentation count must be >= 1");
    if (!(spec.noise_scale >= 0.0)) throw ParameterError("augmentation noise scale must be >= 0");
    Matrix batch(x.size(), static_cast<Eigen::Index>(spec.copies));
    for (std::size_t a = 0; a < spec.copies; ++a) batch.col(static_cast<Eigen::Index>(a)) = augmented_input(x, spec, a);
    const Matrix p = f(batch);
    const Vector avg = p.rowwise().sum() / static_cast<double>(spec.copies);
    return -avg.maxCoeff();
}

double native_mixup(const ProbabilityFn& f, const Vector& x, const MixupContext& ctx) {
    if (ctx.x_mean.size() == 0 || ctx.y_mean.size() == 0)
        throw ContractError("native Mixup needs the training input and label means");
    if (ctx.x_mean.size() != x.size()) throw ShapeError("native Mixup: x-bar has wrong length");
    if (ctx.draws == 0) throw ParameterError("native Mixup needs at least one lambda draw");
    Rng rng(ctx.seed);
    std::vector<double> lambdas;
    for (std::size_t s = 0; s < ctx.draws; ++s)
        lambdas.push_back(ctx.forced_lambda ? *ctx.forced_lambda : algo::sample_beta(ctx.alpha, rng));
    const auto S = static_cast<Eigen::Index>(ctx.draws);
    Matrix batch(x.size(), S + 1);
    batch.col(0) = x;
    for (Eigen::Index s = 0; s < S; ++s) {
        const double l = lambdas[static_cast<std::size_t>(s)];
        batch.col(s + 1) = l * x + (1.0 - l) * ctx.x_mean;
    }
    const Matrix p = f(batch);
    if (p.rows() != ctx.y_mean.size()) throw ShapeError("native Mixup: y-bar has wrong length");
    double total = 0.0;
    for (Eigen::Index s = 0; s < S; ++s) {
        const double l = lambdas[static_cast<std::size_t>(s)];
        total += (l * p.col(0) + (1.0 - l) * ctx.y_mean - p.col(s + 1)).squaredNorm();
    }
    return total / static_cast<double>(S);
}

double native_student_teacher(const algo::TrainedModel& model, const Vector& x) {
    if (!model.auxiliary)
        throw MeasureIncompatible("native student/teacher measure needs RND or OC, got " +
                                  algo::to_string(model.algorithm));
    return algo::student_teacher_scores(model.features(Matrix(x)), *model.auxiliary)(0);
}

double native_softlabel(const Vector& p, double lmax) {
    check_simplex(p, "native_softlabel");
    const double d = p.maxCoeff() - lmax;
    return d * d;
}

double native_js(std::span<const Vector> members) {
    if (members.empty()) throw ParameterError("native_js needs at least one member");
    Vector mean = Vector::Zero(members.front().size());
    double mean_h = 0.0;
    for (const auto& m : members) {
        if (m.size() != mean.size()) throw ShapeError("native_js: members differ in class count");
        check_simplex(m, "native_js");
        mean += m;
        mean_h += entropy(m);
    }
    const auto k = static_cast<double>(members.size());
    mean /= k;
    return std::max(0.0, entropy(mean) - mean_h / k);
}

std::string to_string(NativeKind kind) {
    switch (kind) {
        case NativeKind::mixup: return "mixup";
        case NativeKind::student_teacher: return "student-teacher";
        case NativeKind::softlabel: return "softlabel";
        case NativeKind::jensen_shannon: return "jensen-shannon";
    }
    return "?";
}

NativeKind native_kind(const posthoc::Ensemble& model) {
    if (model.k() > 1) return NativeKind::jensen_shannon;
    const auto a = model.member(0).algorithm;
    switch (a) {
        case algo::Algorithm::mixup: return NativeKind::mixup;
        case algo::Algorithm::rnd:
        case algo::Algorithm::oc: return NativeKind::student_teacher;
        case algo::Algorithm::softlabeler: return NativeKind::softlabel;
        case algo::Algorithm::mcdropout: return NativeKind::jensen_shannon;
        default: throw MeasureIncompatible(algo::to_string(a) + " has no native measure");
    }
}

void MeasureContext::validate() const {
    if ((id == MeasureId::gmm) != !gmm.empty()) throw ContractError("GMM state present iff the measure is gmm");
    if ((id == MeasureId::native) != native.has_value())
        throw ContractError("native kind present iff the measure is native");
    if (native == NativeKind::mixup && !mixup) throw ContractError("native Mixup needs its context");
}

MeasureContext prepare_measure(MeasureId id, const posthoc::Ensemble& model, const data::Dataset& validation,
                               std::uint64_t seed, const AugmentSpec& augment) {
    MeasureContext ctx;
    ctx.id = id;
    ctx.seed = seed;
    ctx.augment = augment;
    if (id == MeasureId::gmm) {
        const Matrix x = validation.all_columns();
        for (std::size_t i = 0; i < model.k(); ++i) {
            const auto& m = model.member(i);
            ctx.gmm.push_back(fit_gmm(m.features(x), validation.labels, m.predictor.config().num_classes));
        }
    }
    if (id == MeasureId::native) {
        ctx.native = native_kind(model);
        const auto& m = model.member(0);
        if (*ctx.native == NativeKind::softlabel) ctx.soft_label = m.hparams.soft_label_value;
        if (*ctx.native == NativeKind::mixup) {
            MixupContext mc;
            mc.x_mean = m.train_input_mean;
            mc.y_mean = m.train_label_mean;
            mc.alpha = m.hparams.mixing_alpha;
            ctx.mixup = mc;
        }
    }
    ctx.validate();
    return ctx;
}

Vector score_batch(const MeasureContext& ctx, const posthoc::Ensemble& model, const Matrix& x,
                   std::span<const std::uint64_t> example_ids) {
    ctx.validate();
    if (static_cast<std::size_t>(x.cols()) != example_ids.size())
        throw ShapeError("score_batch: one example id per column required");
    const auto n = x.cols();
    Vector out(n);
    auto probs = [&] { return model.predict(x); };
    const posthoc::Ensemble* mp = &model;
    const ProbabilityFn f = [mp](const Matrix& b) { return mp->predict(b); };
    switch (ctx.id) {
        case MeasureId::largest: {
            const Matrix p = probs();
            for (Eigen::Index j = 0; j < n; ++j) out(j) = score_largest(p.col(j));
            break;
        }
        case MeasureId::gap: {
            const Matrix p = probs();
            for (Eigen::Index j = 0; j < n; ++j) out(j) = score_gap(p.col(j));
            break;
        }
        case MeasureId::entropy: {
            const Matrix p = probs();
            for (Eigen::Index j = 0; j < n; ++j) out(j) = score_entropy(p.col(j));
            break;
        }
        case MeasureId::jacobian:
            for (Eigen::Index j = 0; j < n; ++j) out(j) = score_jacobian(model, x.col(j));
            break;
        case MeasureId::gmm: {
            out.setZero();
            for (std::size_t i = 0; i < model.k(); ++i) {
                const Matrix phi = model.member(i).features(x);
                for (Eigen::Index j = 0; j < n; ++j) out(j) += score_gmm(ctx.gmm[i], phi.col(j));
            }
            out /= static_cast<double>(model.k());
            break;
        }
        case MeasureId::augment:
            for (Eigen::Index j = 0; j < n; ++j) {
                AugmentSpec spec = ctx.augment;
                spec.seed = derive_seed(ctx.seed, {fnv1a("augment"), example_ids[static_cast<std::size_t>(j)]});
                out(j) = score_augment(f, x.col(j), spec);
            }
            break;
        case MeasureId::native:
            switch (*ctx.native) {
                case NativeKind::jensen_shannon: {
                    const auto outputs = model.member_outputs(x);
                    std::vector<Vector> cols(outputs.size());
                    for (Eigen::Index j = 0; j < n; ++j) {
                        for (std::size_t i = 0; i < outputs.size(); ++i) cols[i] = outputs[i].col(j);
                        out(j) = native_js(cols);
                    }
                    break;
                }
                case NativeKind::softlabel: {
                    const Matrix p = probs();
                    for (Eigen::Index j = 0; j < n; ++j) out(j) = native_softlabel(p.col(j), ctx.soft_label);
                    break;
                }
                case NativeKind::student_teacher:
                    out = algo::student_teacher_scores(model.member(0).features(x), *model.member(0).auxiliary);
                    break;
                case NativeKind::mixup:
                    for (Eigen::Index j = 0; j < n; ++j) {
                        MixupContext mc = *ctx.mixup;
                        mc.seed = derive_seed(ctx.seed, {fnv1a("mixup"), example_ids[static_cast<std::size_t>(j)]});
                        out(j) = native_mixup(f, x.col(j), mc);
                    }
                    break;
            }
            break;
    }
    return out;
}

void write_score_dump(const std::filesystem::path& path, std::span<const ScoreRecord> records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write score dump " + path.string());
    for (const auto& r : records) {
        if (!std::isfinite(r.score)) throw NumericError("score for example " + r.example + " is not finite");
        nlohmann::json j{{"example", r.example},
                         {"split", r.split == Split::in ? "in" : "out"},
                         {"measure", r.measure},
                         {"score", r.score}};
        os << j.dump() << '\n';
    }
    if (!os) throw DataError("failed writing score dump " + path.string());
}

std::vector<ScoreRecord> read_score_dump(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read score dump " + path.string());
    std::vector<ScoreRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto where = path.string() + ":" + std::to_string(lineno) + ": ";
        try {
            const auto j = nlohmann::json::parse(line);
            ScoreRecord r;
            r.example = j.at("example").get<std::string>();
            const auto split = j.at("split").get<std::string>();
            if (split == "in")
                r.split = Split::in;
            else if (split == "out")
                r.split = Split::out;
            else
                throw ParseError("split must be 'in' or 'out'");
            r.measure = j.at("measure").get<std::string>();
            r.score = j.at("score").get<double>();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(where + e.what());
        } catch (const ParseError& e) {
            throw ParseError(where + e.what());
        }
    }
    return out;
}

ScorePools pools_for(std::span<const ScoreRecord> records, std::string_view measure) {
    ScorePools p;
    for (const auto& r : records) {
        if (r.measure != measure) continue;
        (r.split == Split::in ? p.in : p.out).push_back(r.score);
    }
    return p;
}

}  // namespace ubench::measures
