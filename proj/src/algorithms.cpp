#include "ubench/algorithms.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <random>

namespace ubench::algo {

using nlohmann::json;

std::string to_string(Algorithm a) {
    switch (a) {
        case Algorithm::erm: return "ERM";
        case Algorithm::mixup: return "Mixup";
        case Algorithm::softlabeler: return "SoftLabeler";
        case Algorithm::rbf: return "RBF";
        case Algorithm::rnd: return "RND";
        case Algorithm::oc: return "OC";
        case Algorithm::mcdropout: return "MCDropout";
        case Algorithm::mimo: return "MIMO";
    }
    return "?";
}

Algorithm parse_algorithm(std::string_view s) {
    std::string key;
    for (char c : s)
        if (c != '-' && c != '_') key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    for (Algorithm a : all_algorithms()) {
        std::string name = to_string(a);
        for (auto& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (name == key) return a;
    }
    throw ParameterError("unknown algorithm '" + std::string(s) + "'");
}

const std::array<Algorithm, 8>& all_algorithms() {
    static const std::array<Algorithm, 8> all{Algorithm::erm, Algorithm::mixup, Algorithm::softlabeler,
                                              Algorithm::rbf, Algorithm::rnd,   Algorithm::oc,
                                              Algorithm::mcdropout, Algorithm::mimo};
    return all;
}

void HyperParams::validate(std::size_t num_classes) const {
    auto fail = [](const std::string& what) { throw ParameterError("hyper-parameter " + what); };
    if (!(learning_rate > 0)) fail("learning_rate must be > 0");
    if (!(momentum >= 0 && momentum < 1)) fail("momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
    if (!(mixing_alpha > 0)) fail("mixing_alpha must be > 0");
    if (!(dropout_rate >= 0 && dropout_rate < 1)) fail("dropout_rate must be in [0, 1)");
    if (num_passes < 1) fail("num_passes must be >= 1");
    if (subnetworks < 1) fail("subnetworks must be >= 1");
    if (!(input_repetition_prob >= 0 && input_repetition_prob <= 1)) fail("input_repetition_prob must be in [0, 1]");
    if (batch_repetition < 1) fail("batch_repetition must be >= 1");
    if (teacher_width < 1 || teacher_depth < 1) fail("teacher width and depth must be >= 1");
    if (!(regularization >= 0)) fail("regularization must be >= 0");
    if (num_classes >= 2 && !(soft_label_value > 1.0 / static_cast<double>(num_classes) && soft_label_value <= 1.0))
        fail("soft_label_value must be in (1/C, 1]");
}

json to_json(const HyperParams& hp) {
    return json{{"learning_rate", hp.learning_rate},
                {"momentum", hp.momentum},
                {"weight_decay", hp.weight_decay},
                {"mixing_alpha", hp.mixing_alpha},
                {"dropout_rate", hp.dropout_rate},
                {"num_passes", hp.num_passes},
                {"subnetworks", hp.subnetworks},
                {"input_repetition_prob", hp.input_repetition_prob},
                {"batch_repetition", hp.batch_repetition},
                {"teacher_width", hp.teacher_width},
                {"teacher_depth", hp.teacher_depth},
                {"regularization", hp.regularization},
                {"soft_label_value", hp.soft_label_value}};
}

HyperParams hyperparams_from_json(const json& j) {
    HyperParams hp;
    hp.learning_rate = j.at("learning_rate").get<double>();
    hp.momentum = j.at("momentum").get<double>();
    hp.weight_decay = j.at("weight_decay").get<double>();
    hp.mixing_alpha = j.at("mixing_alpha").get<double>();
    hp.dropout_rate = j.at("dropout_rate").get<double>();
    hp.num_passes = j.at("num_passes").get<std::size_t>();
    hp.subnetworks = j.at("subnetworks").get<std::size_t>();
    hp.input_repetition_prob = j.at("input_repetition_prob").get<double>();
    hp.batch_repetition = j.at("batch_repetition").get<std::size_t>();
    hp.teacher_width = j.at("teacher_width").get<std::size_t>();
    hp.teacher_depth = j.at("teacher_depth").get<std::size_t>();
    hp.regularization = j.at("regularization").get<double>();
    hp.soft_label_value = j.at("soft_label_value").get<double>();
    return hp;
}

void TrainSchedule::validate() const {
    if (epochs < 1) throw ParameterError("epochs must be >= 1");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (decay_period < 1) throw ParameterError("decay_period must be >= 1");
    if (!(decay_factor > 0)) throw ParameterError("decay_factor must be > 0");
}

// ---------------------------------------------------------------------------

Matrix mlp_forward(const net::ParamSet& layers, const Matrix& x, MlpTrace* trace) {
    Matrix a = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Matrix pre = layers[l].weight * a;
        pre.colwise() += layers[l].bias;
        if (trace) {
            trace->inputs.push_back(a);
            trace->pre.push_back(pre);
        }
        a = l + 1 < layers.size() ? Matrix(pre.cwiseMax(0.0)) : pre;
    }
    if (trace) trace->output = a;
    return a;
}

net::ParamSet mlp_backward(const net::ParamSet& layers, const MlpTrace& trace, const Matrix& dout) {
    net::ParamSet grads = net::zeros_like(layers);
    Matrix g = dout;
    for (std::size_t l = layers.size(); l-- > 0;) {
        if (l + 1 < layers.size()) g = g.cwiseProduct((trace.pre[l].array() > 0.0).cast<double>().matrix());
        grads[l].weight = g * trace.inputs[l].transpose();
        grads[l].bias = g.rowwise().sum();
        if (l > 0) g = layers[l].weight.transpose() * g;
    }
    return grads;
}

Matrix AuxiliaryPair::teacher_outputs(const Matrix& features) const {
    if (zero_teacher) {
        const Eigen::Index out = student.empty() ? features.rows() : student.back().weight.rows();
        return Matrix::Zero(out, features.cols());
    }
    return mlp_forward(teacher, features);
}

Matrix AuxiliaryPair::student_outputs(const Matrix& features) const { return mlp_forward(student, features); }

AuxiliaryPair make_auxiliary(bool zero_teacher, std::size_t feature_dim, std::size_t width, std::size_t depth,
                             double regularization, std::uint64_t seed) {
    if (feature_dim < 1 || width < 1 || depth < 1) throw ParameterError("auxiliary network dims must be >= 1");
    std::vector<std::size_t> dims{feature_dim};
    for (std::size_t i = 0; i + 1 < depth; ++i) dims.push_back(width);
    dims.push_back(feature_dim);
    auto build = [&dims](std::uint64_t s) {
        Rng rng(s);
        net::ParamSet p;
        for (std::size_t i = 0; i + 1 < dims.size(); ++i) p.push_back(net::glorot_layer(dims[i], dims[i + 1], rng));
        return p;
    };
    AuxiliaryPair pair;
    pair.zero_teacher = zero_teacher;
    pair.regularization = regularization;
    if (!zero_teacher) pair.teacher = build(derive_seed(seed, {fnv1a("teacher")}));
    pair.student = build(derive_seed(seed, {fnv1a("student")}));
    return pair;
}

Vector student_teacher_scores(const Matrix& features, const AuxiliaryPair& pair) {
    const Matrix diff = pair.student_outputs(features) - pair.teacher_outputs(features);
    return diff.colwise().squaredNorm().transpose();
}

double student_teacher_loss(const Vector& features, const AuxiliaryPair& pair) {
    if (!pair.student.empty() && features.size() != pair.student.front().weight.cols())
        throw ShapeError("auxiliary input width mismatch");
    return student_teacher_scores(Matrix(features), pair)(0);
}

double oc_penalty(const net::ParamSet& student) {
    double total = 0.0;
    for (const auto& layer : student) {
        const Matrix& w = layer.weight;
        total += (w.transpose() * w - Matrix::Identity(w.cols(), w.cols())).squaredNorm();
    }
    return total;
}

net::ParamSet oc_penalty_grad(const net::ParamSet& student) {
    net::ParamSet g = net::zeros_like(student);
    for (std::size_t l = 0; l < student.size(); ++l) {
        const Matrix& w = student[l].weight;
        g[l].weight = 4.0 * w * (w.transpose() * w - Matrix::Identity(w.cols(), w.cols()));
    }
    return g;
}

AuxLoss auxiliary_loss(const AuxiliaryPair& pair, const Matrix& features) {
    const auto b = static_cast<double>(features.cols());
    MlpTrace trace;
    const Matrix out = mlp_forward(pair.student, features, &trace);
    const Matrix diff = out - pair.teacher_outputs(features);
    AuxLoss r;
    r.loss = diff.squaredNorm() / b;
    r.student_grads = mlp_backward(pair.student, trace, 2.0 * diff / b);
    if (pair.zero_teacher && pair.regularization > 0.0) {
        r.loss += pair.regularization * oc_penalty(pair.student);
        const auto pg = oc_penalty_grad(pair.student);
        for (std::size_t l = 0; l < pg.size(); ++l) r.student_grads[l].weight += pair.regularization * pg[l].weight;
    }
    return r;
}

// ---------------------------------------------------------------------------

Matrix one_hot(std::span<const int> labels, std::size_t num_classes) {
    Matrix y = Matrix::Zero(static_cast<Eigen::Index>(num_classes), static_cast<Eigen::Index>(labels.size()));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
            throw DataError("label " + std::to_string(labels[i]) + " outside 0.." + std::to_string(num_classes - 1));
        y(labels[i], static_cast<Eigen::Index>(i)) = 1.0;
    }
    return y;
}

double sample_beta(double alpha, Rng& rng) {
    if (!(alpha > 0)) throw ParameterError("Beta parameter must be > 0");
    std::gamma_distribution<double> gamma(alpha, 1.0);
    const double a = gamma(rng);
    const double b = gamma(rng);
    if (a + b == 0.0) return 0.5;
    return a / (a + b);
}

MixedBatch mixup_batch(const Matrix& x, const Matrix& y, double alpha, Rng& rng, std::optional<double> forced_lambda) {
    if (!(alpha > 0)) throw ParameterError("mixup alpha must be > 0");
    if (x.cols() != y.cols()) throw ShapeError("mixup: inputs and targets differ in batch size");
    MixedBatch m;
    m.lambda = forced_lambda ? *forced_lambda : sample_beta(alpha, rng);
    if (!(m.lambda >= 0 && m.lambda <= 1)) throw ParameterError("mixup lambda must be in [0, 1]");
    m.partner.resize(static_cast<std::size_t>(x.cols()));
    std::iota(m.partner.begin(), m.partner.end(), 0);
    std::shuffle(m.partner.begin(), m.partner.end(), rng);
    m.inputs.resize(x.rows(), x.cols());
    m.targets.resize(y.rows(), y.cols());
    const double l = m.lambda;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const auto p = static_cast<Eigen::Index>(m.partner[static_cast<std::size_t>(j)]);
        m.inputs.col(j) = l * x.col(j) + (1.0 - l) * x.col(p);
        m.targets.col(j) = l * y.col(j) + (1.0 - l) * y.col(p);
    }
    return m;
}

Vector soften_labels(const Vector& onehot, double lmax) {
    const auto c = static_cast<double>(onehot.size());
    if (onehot.size() < 2) throw ParameterError("soften_labels needs C >= 2");
    if (!(lmax > 1.0 / c && lmax <= 1.0)) throw ParameterError("soft label value must be in (1/C, 1]");
    const double lmin = (1.0 - lmax) / (c - 1.0);
    Vector out(onehot.size());
    for (Eigen::Index i = 0; i < onehot.size(); ++i) out(i) = onehot(i) > 0.5 ? lmax : lmin;
    return out;
}

Matrix soften_columns(const Matrix& onehot, double lmax) {
    Matrix out(onehot.rows(), onehot.cols());
    for (Eigen::Index j = 0; j < onehot.cols(); ++j) out.col(j) = soften_labels(onehot.col(j), lmax);
    return out;
}

MimoBatch mimo_compose(const Matrix& x, const Matrix& y, std::size_t heads, double rho,
                       std::size_t batch_repetition, Rng& rng) {
    if (heads < 1) throw ParameterError("mimo_compose: T must be >= 1");
    if (batch_repetition < 1) throw ParameterError("mimo_compose: batch_repetition must be >= 1");
    if (!(rho >= 0 && rho <= 1)) throw ParameterError("mimo_compose: rho must be in [0, 1]");
    if (x.cols() != y.cols()) throw ShapeError("mimo_compose: inputs and targets differ in batch size");
    const auto b = static_cast<std::size_t>(x.cols());
    const Eigen::Index d = x.rows(), c = y.rows();
    const auto t = static_cast<Eigen::Index>(heads);
    MimoBatch out;
    const auto cols = static_cast<Eigen::Index>(b * batch_repetition);
    out.inputs.resize(d * t, cols);
    out.targets.resize(c * t, cols);
    out.slots.reserve(static_cast<std::size_t>(cols));
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, b - 1);
    Eigen::Index col = 0;
    for (std::size_t r = 0; r < batch_repetition; ++r) {
        for (std::size_t i = 0; i < b; ++i, ++col) {
            std::vector<std::size_t> slot(heads, i);
            if (heads > 1 && !(coin(rng) < rho))
                for (std::size_t s = 1; s < heads; ++s) slot[s] = pick(rng);
            for (Eigen::Index s = 0; s < t; ++s) {
                const auto src = static_cast<Eigen::Index>(slot[static_cast<std::size_t>(s)]);
                out.inputs.block(s * d, col, d, 1) = x.col(src);
                out.targets.block(s * c, col, c, 1) = y.col(src);
            }
            out.slots.push_back(std::move(slot));
        }
    }
    return out;
}

Matrix mimo_average(const Matrix& logits, std::size_t heads, double tau) {
    const auto t = static_cast<Eigen::Index>(heads);
    if (heads < 1 || logits.rows() % t != 0) throw ShapeError("mimo_average: rows not divisible by T");
    const Eigen::Index c = logits.rows() / t;
    Matrix avg = Matrix::Zero(c, logits.cols());
    for (Eigen::Index s = 0; s < t; ++s) avg += net::softmax_columns(logits.middleRows(s * c, c), tau);
    return avg / static_cast<double>(heads);
}

Vector mimo_predict(const net::Predictor& predictor, const Vector& x) {
    const auto& cfg = predictor.config();
    if (cfg.head != net::HeadKind::mimo) throw ContractError("mimo_predict needs a MIMO head");
    const Vector in = net::replicate_input(x, cfg.heads);
    return mimo_average(predictor.forward(in, net::Mode::eval).logits, cfg.heads).col(0);
}

Matrix rbf_transform(const Matrix& logits) { return (-logits.array().square()).exp().matrix(); }

// ---------------------------------------------------------------------------

void check_targets(const Matrix& targets, std::size_t heads) {
    const auto t = static_cast<Eigen::Index>(heads);
    if (heads < 1 || targets.rows() % t != 0) throw ShapeError("targets rows not divisible by T");
    const Eigen::Index c = targets.rows() / t;
    for (Eigen::Index j = 0; j < targets.cols(); ++j)
        for (Eigen::Index s = 0; s < t; ++s) {
            const auto block = targets.block(s * c, j, c, 1);
            if (block.minCoeff() < -1e-6 || std::abs(block.sum() - 1.0) > 1e-6)
                throw ContractError("target column " + std::to_string(j) + " is not a probability vector");
        }
}

LossResult loss_for(Algorithm algorithm, const Matrix& logits, const Matrix& targets, std::size_t heads,
                    const AuxiliaryPair* aux, const Matrix* features) {
    if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
        throw ShapeError("loss_for: logits and targets differ in shape");
    check_targets(targets, heads);
    const auto t = static_cast<Eigen::Index>(heads);
    const Eigen::Index c = logits.rows() / t;
    const auto b = static_cast<double>(logits.cols());
    LossResult r;
    r.dlogits.resize(logits.rows(), logits.cols());
    double total = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        for (Eigen::Index s = 0; s < t; ++s) {
            const auto z = logits.block(s * c, j, c, 1);
            const auto y = targets.block(s * c, j, c, 1);
            const double m = z.maxCoeff();
            const double lse = m + std::log((z.array() - m).exp().sum());
            const Vector logp = (z.array() - lse).matrix();
            total -= (y.array() * logp.array()).sum();
            r.dlogits.block(s * c, j, c, 1) = (logp.array().exp().matrix() - y) / b;
        }
    }
    r.predictor_loss = total / b;
    r.loss = r.predictor_loss;
    const bool auxiliary = algorithm == Algorithm::rnd || algorithm == Algorithm::oc;
    if (auxiliary && aux != nullptr && features != nullptr) {
        auto a = auxiliary_loss(*aux, *features);
        r.auxiliary_loss = a.loss;
        r.loss += a.loss;
        r.student_grads = std::move(a.student_grads);
    }
    return r;
}

// ---------------------------------------------------------------------------

net::PredictorConfig configure_for(Algorithm algorithm, net::PredictorConfig base, const HyperParams& hp) {
    base.head = net::HeadKind::linear;
    base.heads = 1;
    base.dropout_rate = 0.0;
    switch (algorithm) {
        case Algorithm::rbf: base.head = net::HeadKind::rbf; break;
        case Algorithm::mimo:
            base.head = net::HeadKind::mimo;
            base.heads = hp.subnetworks;
            break;
        case Algorithm::mcdropout: base.dropout_rate = hp.dropout_rate; break;
        default: break;
    }
    base.validate();
    return base;
}

Matrix TrainedModel::network_input(const Matrix& x) const {
    const auto& cfg = predictor.config();
    if (cfg.head != net::HeadKind::mimo || cfg.heads == 1) return x;
    Matrix out(x.rows() * static_cast<Eigen::Index>(cfg.heads), x.cols());
    for (std::size_t s = 0; s < cfg.heads; ++s) out.middleRows(static_cast<Eigen::Index>(s) * x.rows(), x.rows()) = x;
    return out;
}

bool TrainedModel::has_plain_logits() const {
    return algorithm != Algorithm::mimo && algorithm != Algorithm::mcdropout;
}

Matrix TrainedModel::plain_logits(const Matrix& x) const {
    if (!has_plain_logits()) throw ContractError(to_string(algorithm) + " has no single-pass logits");
    return predictor.forward(x, net::Mode::eval).logits;
}

std::vector<Matrix> TrainedModel::stochastic_passes(const Matrix& x) const {
    std::vector<Matrix> out;
    if (algorithm != Algorithm::mcdropout) return out;
    for (std::size_t p = 0; p < hparams.num_passes; ++p) {
        const auto seed = derive_seed(seeds.init_seed, {fnv1a("mc-pass"), p});
        out.push_back(net::softmax_columns(predictor.forward(x, net::Mode::eval, seed, true).logits));
    }
    return out;
}

Matrix TrainedModel::predict(const Matrix& x) const {
    switch (algorithm) {
        case Algorithm::mimo:
            return mimo_average(predictor.forward(network_input(x), net::Mode::eval).logits, predictor.config().heads);
        case Algorithm::mcdropout: {
            const auto passes = stochastic_passes(x);
            Matrix avg = Matrix::Zero(passes.front().rows(), passes.front().cols());
            for (const auto& p : passes) avg += p;
            return avg / static_cast<double>(passes.size());
        }
        default: return net::softmax_columns(predictor.forward(x, net::Mode::eval).logits);
    }
}

Matrix TrainedModel::features(const Matrix& x) const { return predictor.features(network_input(x)); }

namespace {

double mean_nll(const Matrix& probs, std::span<const int> labels) {
    double total = 0.0;
    for (std::size_t j = 0; j < labels.size(); ++j)
        total -= std::log(std::max(probs(labels[j], static_cast<Eigen::Index>(j)), 1e-12));
    return total / static_cast<double>(labels.size());
}

json seeds_json(const RunSeeds& s) {
    return json{{"init_seed", s.init_seed}, {"data_seed", s.data_seed}, {"trial", s.trial}};
}

json schedule_json(const TrainSchedule& s) {
    return json{{"epochs", s.epochs},
                {"batch_size", s.batch_size},
                {"decay_period", s.decay_period},
                {"decay_factor", s.decay_factor}};
}

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector from_vec(const std::vector<double>& v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = v[i];
    return out;
}

}  // namespace

void TrainedModel::save(const std::filesystem::path& path) const {
    Checkpoint ck;
    ck.meta["kind"] = "trained_model";
    ck.meta["algorithm"] = to_string(algorithm);
    ck.meta["hparams"] = to_json(hparams);
    ck.meta["seeds"] = seeds_json(seeds);
    ck.meta["schedule"] = schedule_json(schedule);
    ck.meta["val_nll"] = val_nll;
    json log_j = json::array();
    for (const auto& e : log) log_j.push_back({{"train_loss", e.train_loss}, {"val_nll", e.val_nll}});
    ck.meta["log"] = log_j;
    store_predictor(ck, "predictor", predictor);
    ck.put("train.x_mean", to_vec(train_input_mean));
    ck.put("train.y_mean", to_vec(train_label_mean));
    if (auxiliary) {
        ck.meta["auxiliary"] = {{"zero_teacher", auxiliary->zero_teacher},
                                {"regularization", auxiliary->regularization}};
        if (!auxiliary->zero_teacher) ck.put("aux.teacher", net::flatten(auxiliary->teacher));
        ck.put("aux.student", net::flatten(auxiliary->student));
    }
    write_checkpoint(path, ck);
}

TrainedModel TrainedModel::load(const std::filesystem::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    try {
        if (ck.meta.value("kind", "") != "trained_model") throw ParseError("not a trained-model checkpoint");
        TrainedModel m;
        m.algorithm = parse_algorithm(ck.meta.at("algorithm").get<std::string>());
        m.hparams = hyperparams_from_json(ck.meta.at("hparams"));
        const auto& s = ck.meta.at("seeds");
        m.seeds = {s.at("init_seed").get<std::uint64_t>(), s.at("data_seed").get<std::uint64_t>(),
                   s.at("trial").get<std::size_t>()};
        const auto& sc = ck.meta.at("schedule");
        m.schedule = {sc.at("epochs").get<std::size_t>(), sc.at("batch_size").get<std::size_t>(),
                      sc.at("decay_period").get<std::size_t>(), sc.at("decay_factor").get<double>()};
        m.val_nll = ck.meta.at("val_nll").get<double>();
        for (const auto& e : ck.meta.at("log"))
            m.log.push_back({e.at("train_loss").get<double>(), e.at("val_nll").get<double>()});
        m.predictor = load_predictor(ck, "predictor");
        m.train_input_mean = from_vec(ck.get("train.x_mean"));
        m.train_label_mean = from_vec(ck.get("train.y_mean"));
        if (ck.meta.contains("auxiliary")) {
            const auto& a = ck.meta.at("auxiliary");
            const auto k = m.predictor.config().feature_dim;
            AuxiliaryPair pair = make_auxiliary(a.at("zero_teacher").get<bool>(), k, m.hparams.teacher_width,
                                                m.hparams.teacher_depth, a.at("regularization").get<double>(), 0);
            if (!pair.zero_teacher) net::unflatten(ck.get("aux.teacher"), pair.teacher);
            net::unflatten(ck.get("aux.student"), pair.student);
            m.auxiliary = std::move(pair);
        }
        return m;
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": bad checkpoint metadata: " + e.what());
    }
}

TrainedModel train_run(Algorithm algorithm, const net::PredictorConfig& base, const HyperParams& hp,
                       const data::Dataset& train, const data::Dataset& val, const RunSeeds& seeds,
                       const TrainSchedule& schedule, const TrainOptions& options) {
    schedule.validate();
    hp.validate(base.num_classes);
    train.validate();
    val.validate();
    if (train.class_count != base.num_classes || train.dim() != base.input_dim)
        throw ShapeError("train_run: dataset shape does not match the predictor config");

    TrainedModel m;
    m.algorithm = algorithm;
    m.hparams = hp;
    m.seeds = seeds;
    m.schedule = schedule;
    const auto cfg = configure_for(algorithm, base, hp);
    m.predictor = net::Predictor(cfg, derive_seed(seeds.init_seed, {fnv1a("init")}));
    if (algorithm == Algorithm::rnd || algorithm == Algorithm::oc)
        m.auxiliary = make_auxiliary(algorithm == Algorithm::oc, cfg.feature_dim, hp.teacher_width, hp.teacher_depth,
                                     hp.regularization, derive_seed(seeds.init_seed, {fnv1a("aux")}));

    const std::size_t n = train.size();
    const std::size_t c = cfg.num_classes;
    m.train_input_mean = train.features.colwise().mean().transpose();
    m.train_label_mean = one_hot(train.labels, c).rowwise().mean();
    const Matrix val_x = val.all_columns();

    Rng shuffle_rng(derive_seed(seeds.init_seed, {fnv1a("shuffle")}));
    Rng algo_rng(derive_seed(seeds.init_seed, {fnv1a("algorithm")}));
    auto sgd = net::SgdState::for_params(m.predictor.params(), hp.learning_rate, hp.momentum, hp.weight_decay);
    std::optional<net::SgdState> aux_sgd;
    if (m.auxiliary)
        aux_sgd = net::SgdState::for_params(m.auxiliary->student, hp.learning_rate, hp.momentum, hp.weight_decay);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::uint64_t step = 0;
    for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
        const double lr = net::scheduled_rate(hp.learning_rate, epoch, schedule.decay_period, schedule.decay_factor);
        sgd.learning_rate = lr;
        if (aux_sgd) aux_sgd->learning_rate = lr;
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += schedule.batch_size, ++step, ++batches) {
            const std::size_t end = std::min(n, start + schedule.batch_size);
            const std::span<const std::size_t> rows(order.data() + start, end - start);
            Matrix x = train.columns(rows);
            std::vector<int> labels;
            labels.reserve(rows.size());
            for (auto r : rows) labels.push_back(train.labels[r]);
            Matrix y = one_hot(labels, c);

            switch (algorithm) {
                case Algorithm::mixup: {
                    auto mixed = mixup_batch(x, y, hp.mixing_alpha, algo_rng, options.forced_mixup_lambda);
                    x = std::move(mixed.inputs);
                    y = std::move(mixed.targets);
                    break;
                }
                case Algorithm::softlabeler: y = soften_columns(y, hp.soft_label_value); break;
                case Algorithm::mimo: {
                    auto composed = mimo_compose(x, y, cfg.heads, hp.input_repetition_prob, hp.batch_repetition,
                                                 algo_rng);
                    x = std::move(composed.inputs);
                    y = std::move(composed.targets);
                    break;
                }
                default: break;
            }

            const auto where = [&] {
                return to_string(algorithm) + " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches);
            };
            LossResult loss;
            try {
                const auto trace =
                    m.predictor.forward(x, net::Mode::train, derive_seed(seeds.init_seed, {fnv1a("dropout"), step}));
                loss = loss_for(algorithm, trace.logits, y, cfg.heads, m.auxiliary ? &*m.auxiliary : nullptr,
                                &trace.features);
                if (!std::isfinite(loss.loss)) throw NumericError("non-finite loss");
                const auto bp = m.predictor.backward(trace, loss.dlogits);
                net::sgd_step(sgd, m.predictor.mutable_params(), bp.grads);
                for (const auto& layer : m.predictor.params())
                    if (!layer.weight.allFinite() || !layer.bias.allFinite())
                        throw NumericError("non-finite parameters after the update");
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (" + where() + ")");
            }
            if (cfg.spectral_norm) m.predictor.refresh_spectral(1);
            if (m.auxiliary) net::sgd_step(*aux_sgd, m.auxiliary->student, loss.student_grads);
            epoch_loss += loss.loss;
            if (options.record_batch_losses) m.batch_losses.push_back(loss.predictor_loss);
        }
        EpochLog entry;
        entry.train_loss = epoch_loss / static_cast<double>(batches);
        try {
            entry.val_nll = mean_nll(m.predict(val_x), val.labels);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (" + to_string(algorithm) + " validation after epoch " +
                               std::to_string(epoch) + ")");
        }
        m.log.push_back(entry);
    }
    if (cfg.spectral_norm) m.predictor.settle_spectral();
    m.val_nll = mean_nll(m.predict(val_x), val.labels);
    if (!std::isfinite(m.val_nll)) throw NumericError(to_string(algorithm) + ": non-finite validation NLL");
    return m;
}

}  // namespace ubench::algo
