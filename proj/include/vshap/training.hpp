#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "vshap/data.hpp"
#include "vshap/vrnn.hpp"

namespace vshap {

inline constexpr double kSigmaMin = 1e-4;  // keeps the sigma-NLL finite at x_hat == x

struct LossBreakdown {
    double kld = 0, sigma_nll = 0, clf = 0, recon = 0, reg = 0, total = 0;
    double lambda = 0;
};

/// Closed-form KL between diagonal Gaussians, summed over dims.
Tensor kl_divergence(const GaussianParams& post, const GaussianParams& prior);

/// Gaussian NLL with per-element sigma = max(|x_hat - x|, sigma_min).
Tensor sigma_nll(const Tensor& x_hat, const Tensor& x,
                 double sigma_min = kSigmaMin);

/// Binary cross-entropy (probs clamped to [1e-7, 1-1e-7]) or, for
/// num_classes > 1, categorical cross-entropy on softmax probs.
Tensor clf_loss(const Tensor& probs, int label);

Tensor recon_loss(const Tensor& x_hat, const Tensor& x);

struct TotalLoss {
    Tensor total;  // graph-connected scalar
    LossBreakdown parts;
};

/// Each component averaged over timesteps; reg = sum of squared weights.
TotalLoss total_loss(const Vrnn& model, const ForwardTrace& trace,
                     const Episode& episode, double lambda);

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 5.0;
    double lambda = 1e-5;
    int max_epochs = 30;
    int patience = 5;  // early stopping on validation AUROC
    int batch_size = 16;
    int threads = 1;
    std::uint64_t seed = 0;
};

struct EpochLog {
    int epoch;
    std::string split;
    LossBreakdown loss;
    double auroc;
};

struct TrainResult {
    std::vector<EpochLog> logs;
    int best_epoch = -1;
    double best_auroc = 0.0;
};

/// Adam with gradient-norm clipping; early stopping restores the best
/// validation-AUROC weights. Per-episode gradients are reduced in episode
/// order, so results are identical for any thread count.
TrainResult train(Vrnn& model, const Dataset& ds, const TrainConfig& cfg,
                  std::ostream* ndjson_log = nullptr);

/// Rank-based AUROC with tie handling.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Mean-mode validation scores over every step of the given episodes.
double evaluate_auroc(const Vrnn& model, const std::vector<const Episode*>& eps);

}  // namespace vshap
