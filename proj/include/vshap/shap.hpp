#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vshap/data.hpp"
#include "vshap/variance.hpp"
#include "vshap/vrnn.hpp"

namespace vshap {

struct SolverError : std::runtime_error {
    explicit SolverError(const std::string& m) : std::runtime_error(m) {}
};

/// Deterministic scalar game over a flattened feature vector.
using Game = std::function<double(const std::vector<double>&)>;

/// Reference inputs used to marginalize absent features.
struct Background {
    std::vector<std::vector<double>> rows;
};

struct Attribution {
    std::string game;  // "prediction" | "variance" | test games
    int step = -1;
    double base_value = 0.0;        // E[game] over background
    std::vector<double> phi;        // per flattened feature
    long n_coalitions = 0;
    double residual = 0.0;          // weighted RSS of the kernel fit
    // feature-grid metadata for episode explanations (0/-1 otherwise)
    int window_start = -1;
    int window = 0;
    int n_vars = 0;

    double efficiency_gap(double value_at_x) const;
};

struct KernelShapConfig {
    long n_coalitions = 0;     // 0 = full enumeration (M <= 20)
    int bg_per_coalition = 0;  // 0 = average over the whole background
    std::uint64_t seed = 0;
    int threads = 1;
};

/// Weighted least squares with the Shapley kernel weight
/// (M-1) / (C(M,s) * s * (M-s)); the efficiency constraint is enforced
/// exactly. Absent features are replaced by background values (marginal
/// imputation, averaged over background rows). Deterministic given the seed
/// for any thread count.
Attribution kernel_shap(const Game& game, const std::vector<double>& x,
                        const Background& bg, const KernelShapConfig& cfg);

/// Classic Shapley formula over all 2^M coalitions (M <= 20). Test oracle;
/// serial reference implementation.
Attribution exact_shapley(const Game& game, const std::vector<double>& x,
                          const Background& bg);

struct ExplainConfig {
    int window = 8;            // trailing timesteps explained
    long n_coalitions = 512;   // 0 = full enumeration
    int bg_per_coalition = 16;
    std::uint64_t seed = 0;
    int threads = 1;
    bool logit_space = false;
    VarianceMethod method = VarianceMethod::delta;
    int class_index = 0;
};

/// One Attribution per requested game ("prediction", "variance") at the
/// given step. Features are the flattened (timestep x variable x channel)
/// grid of the trailing window; earlier history is always present.
std::vector<Attribution> explain_episode(
    const Vrnn& model, const Episode& episode, int step,
    const std::vector<std::string>& games,
    const std::vector<const Episode*>& background, const ExplainConfig& cfg);

}  // namespace vshap
