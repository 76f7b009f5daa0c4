#include "ubench/algorithms.hpp"
#include "ubench/oracles.hpp"

#include <random>

namespace ubench::oracle {

namespace {

using algo::Algorithm;

void randomize_biases(net::ParamSet& params, Rng& rng) {
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (auto& layer : params)
        for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = u(rng);
}

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> g;
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
}

struct Instance {
    net::Predictor model;
    Matrix inputs;
    Matrix targets;
    std::uint64_t dropout_seed = 0;
};

Instance make_instance(Algorithm a, std::size_t variant, Rng& rng) {
    std::uniform_int_distribution<std::size_t> dim(2, 5), cls(2, 4);
    net::PredictorConfig base;
    base.input_dim = dim(rng);
    base.hidden_widths.assign(variant % 3, dim(rng) + 1);
    base.feature_dim = dim(rng);
    base.num_classes = cls(rng);
    base.spectral_norm = variant % 2 == 1;
    algo::HyperParams hp;
    hp.subnetworks = 1 + variant % 3;
    hp.dropout_rate = 0.2;
    hp.soft_label_value = 0.8;
    const auto cfg = algo::configure_for(a, base, hp);

    Instance inst{net::Predictor(cfg, rng()), {}, {}, rng()};
    auto params = inst.model.params();
    randomize_biases(params, rng);
    inst.model.set_params(params);
    if (cfg.spectral_norm) inst.model.settle_spectral();

    const Eigen::Index batch = 3;
    Matrix x = random_matrix(static_cast<Eigen::Index>(base.input_dim), batch, rng);
    std::uniform_int_distribution<int> label(0, static_cast<int>(base.num_classes) - 1);
    std::vector<int> labels;
    for (Eigen::Index j = 0; j < batch; ++j) labels.push_back(label(rng));
    Matrix y = algo::one_hot(labels, base.num_classes);
    switch (a) {
        case Algorithm::mixup: {
            auto m = algo::mixup_batch(x, y, 1.0, rng);
            x = m.inputs;
            y = m.targets;
            break;
        }
        case Algorithm::softlabeler: y = algo::soften_columns(y, hp.soft_label_value); break;
        case Algorithm::mimo: {
            auto m = algo::mimo_compose(x, y, cfg.heads, 0.5, 1 + variant % 2, rng);
            x = m.inputs;
            y = m.targets;
            break;
        }
        default: break;
    }
    inst.inputs = x;
    inst.targets = y;
    return inst;
}

double predictor_loss(Algorithm a, const net::Predictor& model, const Instance& inst) {
    const auto trace = model.forward(inst.inputs, net::Mode::train, inst.dropout_seed);
    return algo::loss_for(a, trace.logits, inst.targets, model.config().heads).predictor_loss;
}

}  // namespace

GradientCheckReport gradient_check_suite(std::uint64_t seed, std::size_t per_algorithm) {
    GradientCheckReport report;
    Rng rng(seed);
    auto record = [&report](const std::string& label, double err) {
        report.cases.push_back(label);
        ++report.instances;
        if (err >= report.worst) {
            report.worst = err;
            report.worst_case = label;
        }
    };

    for (Algorithm a : algo::all_algorithms()) {
        for (std::size_t v = 0; v < per_algorithm; ++v) {
            const Instance inst = make_instance(a, v, rng);
            const auto trace = inst.model.forward(inst.inputs, net::Mode::train, inst.dropout_seed);
            const auto loss = algo::loss_for(a, trace.logits, inst.targets, inst.model.config().heads);
            const auto analytic = inst.model.backward(trace, loss.dlogits).grads;
            net::Predictor probe = inst.model;
            const auto numeric = finite_difference_gradient(
                [&](const net::ParamSet& p) {
                    probe.set_params(p);
                    return predictor_loss(a, probe, inst);
                },
                inst.model.params());
            const auto& cfg = inst.model.config();
            const std::string label = algo::to_string(a) + "/" + net::to_string(cfg.head) +
                                      (cfg.spectral_norm ? "/spectral" : "/plain") +
                                      (cfg.dropout_rate > 0 ? "/dropout" : "") + "/depth" +
                                      std::to_string(cfg.featurizer_depth() + 1);
            record(label, max_relative_error(analytic, numeric));
        }
    }

    // Student side of RND and OC: gradient of the auxiliary loss wrt the student.
    for (bool zero_teacher : {false, true}) {
        for (std::size_t v = 0; v < per_algorithm; ++v) {
            std::uniform_int_distribution<std::size_t> dim(2, 5);
            const std::size_t k = dim(rng);
            const double reg = zero_teacher ? 0.3 * static_cast<double>(v) : 0.0;
            auto pair = algo::make_auxiliary(zero_teacher, k, dim(rng), 1 + v % 3, reg, rng());
            randomize_biases(pair.student, rng);
            if (!zero_teacher) randomize_biases(pair.teacher, rng);
            const Matrix f = random_matrix(static_cast<Eigen::Index>(k), 4, rng).cwiseAbs();
            const auto analytic = algo::auxiliary_loss(pair, f).student_grads;
            auto probe = pair;
            const auto numeric = finite_difference_gradient(
                [&](const net::ParamSet& s) {
                    probe.student = s;
                    return algo::auxiliary_loss(probe, f).loss;
                },
                pair.student);
            record(std::string(zero_teacher ? "OC" : "RND") + "/student/depth" + std::to_string(pair.student.size()),
                   max_relative_error(analytic, numeric));
        }
    }
    return report;
}

}  // namespace ubench::oracle
