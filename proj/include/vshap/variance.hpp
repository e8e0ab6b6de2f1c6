#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vshap/data.hpp"
#include "vshap/vrnn.hpp"

namespace vshap {

enum class VarianceMethod { exact_logit, delta, monte_carlo };

struct VarianceOutput {
    double variance = 0.0;
    VarianceMethod method = VarianceMethod::delta;
    int at_step = -1;
};

/// var(w.z + b) for z ~ N(mu, diag(sigma^2)): sum_i w_i^2 sigma_i^2.
/// Only valid when the classifier is a single affine layer.
VarianceOutput exact_logit_variance(const std::vector<double>& w,
                                    const GaussianParams& params);

/// First-order Taylor expansion around mu: sum_i sigma_i^2 (df/dz_i|_mu)^2.
/// Computed purely from (mu, Sigma), never from sampled z.
VarianceOutput delta_variance(const std::function<Tensor(const Tensor&)>& f,
                              const GaussianParams& params);

/// Unbiased sample variance of f(z) over seeded draws. Test oracle only;
/// never part of the explanation path.
VarianceOutput mc_variance(const std::function<Tensor(const Tensor&)>& f,
                           const GaussianParams& params, long n_samples,
                           std::uint64_t seed);

/// The classifier composition z -> probability (or z -> logit) as a scalar
/// function, for binary heads or a chosen class of a softmax head.
std::function<Tensor(const Tensor&)> classifier_function(const Vrnn& model,
                                                         bool logit_space,
                                                         int class_index = 0);

/// Deterministic scalar-valued function of an input sequence: prediction
/// variance at the last step of the given prefix, with mean-mode recurrence.
/// Pure and thread-safe; the object KernelSHAP explains.
struct VarianceGame {
    const Vrnn* model;
    VarianceMethod method = VarianceMethod::delta;
    bool logit_space = false;
    int class_index = 0;

    /// x: row-major [T x input_dim]; returns variance at step T-1.
    double operator()(const std::vector<double>& x, int T) const;
};

VarianceGame wrap_variance_model(const Vrnn& model,
                                 VarianceMethod method = VarianceMethod::delta,
                                 bool logit_space = false,
                                 int class_index = 0);

}  // namespace vshap
