#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vshap/tensor.hpp"

namespace vshap {

using Rng = std::mt19937_64;

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct VrnnConfig {
    int input_dim = 1;
    int hidden_dim = 32;
    int latent_dim = 8;
    // hidden layer widths of the classifier head; empty = single affine
    // layer from z to the logits (the exact-variance path)
    std::vector<int> clf_hidden;
    int num_classes = 1;  // 1 = binary (single logit), >1 = softmax
    std::uint64_t seed = 0;

    void validate() const;
};

/// Diagonal Gaussian, covariance stored as log sigma^2.
struct GaussianParams {
    Tensor mu;       // [latent_dim]
    Tensor log_var;  // [latent_dim]
};

struct LatentSample {
    Tensor epsilon;  // [latent_dim]
    Tensor z;        // z = mu + exp(0.5 log_var) .* epsilon
};

struct StepTrace {
    GaussianParams posterior;
    GaussianParams prior;
    LatentSample latent;
    Tensor h;       // [hidden_dim]
    Tensor logits;  // [num_classes]
    Tensor probs;   // sigmoid(logit) or softmax(logits)
    Tensor x_hat;   // [input_dim]
};

struct ForwardTrace {
    std::vector<StepTrace> steps;
};

enum class ForwardMode { sample, mean };

/// Two-layer perceptron, tanh hidden activation, affine output.
struct Mlp {
    std::vector<Tensor> weights;  // [out,in] per layer
    std::vector<Tensor> biases;

    static Mlp init(const std::vector<int>& dims, Rng& rng, bool trainable);
    static Mlp zeros(const std::vector<int>& dims, bool trainable);
    Tensor forward(const Tensor& x) const;
    Mlp detached() const;  // value copy outside any graph
};

struct GruCell {
    // gates over [input; h_prev]
    Tensor w_reset, b_reset;
    Tensor w_update, b_update;
    Tensor w_cand, b_cand;

    static GruCell init(int input_dim, int hidden_dim, Rng& rng,
                        bool trainable);
    static GruCell zeros(int input_dim, int hidden_dim, bool trainable);
    Tensor forward(const Tensor& h_prev, const Tensor& input) const;
};

class Vrnn {
public:
    static Vrnn init(const VrnnConfig& cfg);
    static Vrnn zero_init(const VrnnConfig& cfg);  // test helper

    const VrnnConfig& config() const { return cfg_; }

    GaussianParams prior_net(const Tensor& h_prev) const;
    GaussianParams encode(const Tensor& h_prev, const Tensor& x_t) const;
    LatentSample reparameterize(const GaussianParams& params, Rng& rng) const;
    LatentSample reparameterize_mean(const GaussianParams& params) const;
    /// logits plus probabilities; final layer is always affine.
    std::pair<Tensor, Tensor> classify(const Tensor& z) const;
    Tensor recur(const Tensor& h_prev, const Tensor& x_t,
                 const Tensor& z_t) const;
    Tensor decode(const Tensor& h_prev, const Tensor& z_t) const;

    /// x: row-major [T x input_dim]; h_0 = 0. In mean mode z_t = mu_t and
    /// the trace is a deterministic function of (weights, x).
    ForwardTrace forward_sequence(const std::vector<double>& x, int T,
                                  ForwardMode mode, Rng* rng = nullptr) const;

    /// Same, continuing from a given recurrent state (prefix caching for
    /// repeated window evaluations).
    ForwardTrace forward_from(const Tensor& h0, const std::vector<double>& x,
                              int T, ForwardMode mode,
                              Rng* rng = nullptr) const;

    /// Affine classifier head (w, b); configuration error when the head has
    /// hidden layers.
    std::pair<Tensor, Tensor> affine_head() const;

    /// Detached copy of the classifier net (safe to differentiate through
    /// without touching the model's own weight gradients).
    Mlp classifier_copy() const;

    std::vector<std::pair<std::string, Tensor>> parameters() const;
    Vrnn clone() const;  // deep copy of weights, same config

    void save(const std::string& path) const;
    static Vrnn load(const std::string& path);

private:
    VrnnConfig cfg_;
    Mlp prior_, enc_, dec_, clf_;
    GruCell gru_;
};

}  // namespace vshap
