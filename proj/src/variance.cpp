#include "vshap/variance.hpp"

#include <cmath>

namespace vshap {

VarianceOutput exact_logit_variance(const std::vector<double>& w,
                                    const GaussianParams& params) {
    if (w.size() != params.log_var.size())
        throw ShapeError("exact_logit_variance: dimension mismatch");
    double v = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i)
        v += w[i] * w[i] * std::exp(params.log_var.at(i));
    return {v, VarianceMethod::exact_logit, -1};
}

VarianceOutput delta_variance(const std::function<Tensor(const Tensor&)>& f,
                              const GaussianParams& params) {
    Tensor g = gradient_of(f, params.mu.detach());
    double v = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g.at(i)))
            throw NumericError("delta_variance: non-finite gradient");
        v += std::exp(params.log_var.at(i)) * g.at(i) * g.at(i);
    }
    return {v, VarianceMethod::delta, -1};
}

VarianceOutput mc_variance(const std::function<Tensor(const Tensor&)>& f,
                           const GaussianParams& params, long n_samples,
                           std::uint64_t seed) {
    if (n_samples < 2) throw UsageError("mc_variance: n_samples must be >= 2");
    NoGradGuard ng;
    Rng rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t dim = params.mu.size();
    std::vector<double> z(dim);
    // Welford running variance
    double mean = 0.0, m2 = 0.0;
    for (long i = 0; i < n_samples; ++i) {
        for (std::size_t d = 0; d < dim; ++d)
            z[d] = params.mu.at(d) +
                   std::exp(0.5 * params.log_var.at(d)) * gauss(rng);
        const double y = f(Tensor::from({static_cast<int>(dim)}, z)).item();
        const double delta = y - mean;
        mean += delta / (i + 1);
        m2 += delta * (y - mean);
    }
    return {m2 / (n_samples - 1), VarianceMethod::monte_carlo, -1};
}

std::function<Tensor(const Tensor&)> classifier_function(const Vrnn& model,
                                                         bool logit_space,
                                                         int class_index) {
    Mlp clf = model.classifier_copy();
    const int num_classes = model.config().num_classes;
    return [clf, logit_space, class_index, num_classes](const Tensor& z) {
        Tensor logits = clf.forward(z);
        Tensor out = logit_space
                         ? logits
                         : (num_classes == 1 ? sigmoid(logits)
                                             : softmax(logits));
        if (out.size() == 1) return out;
        return slice(out, class_index, 1);
    };
}

double VarianceGame::operator()(const std::vector<double>& x, int T) const {
    GaussianParams at_step;
    {
        NoGradGuard ng;
        ForwardTrace tr = model->forward_sequence(x, T, ForwardMode::mean);
        const auto& post = tr.steps.back().posterior;
        at_step.mu = post.mu.detach();
        at_step.log_var = post.log_var.detach();
    }
    VarianceOutput out;
    if (method == VarianceMethod::exact_logit) {
        auto [w, b] = model->affine_head();
        std::vector<double> wv = w.data();  // [num_classes, z] row-major
        const int z_dim = model->config().latent_dim;
        std::vector<double> row(wv.begin() + class_index * z_dim,
                                wv.begin() + (class_index + 1) * z_dim);
        out = exact_logit_variance(row, at_step);
    } else {
        out = delta_variance(
            classifier_function(*model, logit_space, class_index), at_step);
    }
    return out.variance;
}

VarianceGame wrap_variance_model(const Vrnn& model, VarianceMethod method,
                                 bool logit_space, int class_index) {
    if (method == VarianceMethod::monte_carlo)
        throw UsageError(
            "monte_carlo is a test oracle, not an explanation path");
    if (method == VarianceMethod::exact_logit)
        model.affine_head();  // configuration check up front
    return VarianceGame{&model, method, logit_space, class_index};
}

}  // namespace vshap
