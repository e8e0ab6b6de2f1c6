#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vshap/vrnn.hpp"

namespace vshap {

// Feature layout per timestep: for each variable k the triplet
// (value, mask, interval), so feature_dim = 3K. Channel ids:
inline constexpr int kChannelValue = 0;
inline constexpr int kChannelMask = 1;
inline constexpr int kChannelInterval = 2;

struct Episode {
    std::string id;
    int T = 0;
    int K = 0;  // 0 for non-clinical sequences (MNIST rows)
    int feature_dim = 0;
    std::vector<double> features;  // T x feature_dim, row-major
    std::vector<int> labels;       // per step
    // raw channels, kept for analysis and persistence (clinical data only)
    std::vector<std::optional<double>> raw;  // T x K
    std::vector<std::uint8_t> masks;         // T x K
    std::vector<double> intervals;           // T x K, log24(1+dt)
    std::vector<double> severity;            // ground-truth latent, T

    double feature(int t, int k, int channel) const {
        return features[static_cast<std::size_t>(t) * feature_dim + 3 * k +
                        channel];
    }
};

struct NormStats {
    std::vector<double> mean, sd, median;  // per variable, train split only
};

struct Dataset {
    int K = 0;
    int feature_dim = 0;
    std::vector<Episode> episodes;
    NormStats norm;
    std::vector<int> split;  // 0 train, 1 val, 2 test; empty until split()
    std::string config_json;

    std::vector<const Episode*> split_episodes(int which) const;
};

struct GeneratorConfig {
    int n_variables = 10;
    int len_min = 20;
    int len_max = 40;
    double ar_coeff = 0.95;  // latent severity AR(1); stationary variance 1
    double event_threshold = 1.6;
    int horizon = 8;  // label = 1 iff severity crosses threshold within H
    std::vector<double> meas_rate;  // per-var hourly measurement probability
    std::vector<double> loading;    // per-var slope on severity
    std::vector<double> noise_sd;
    std::vector<double> staleness;  // per-var smoothing of its own trace
    bool severity_dependent_rate = true;
    double rate_sensitivity = 1.5;  // severity -> measurement-rate link
    bool first_step_measured = true;
    std::uint64_t seed = 0;

    void fill_defaults();
    void validate() const;
    std::string to_json() const;
    static GeneratorConfig from_json(const std::string& s);
};

/// Raw synthetic episodes (values/masks/labels/severity); features are
/// attached later by engineer_features. Episodes are generated from
/// independent per-episode seeds, in parallel when threads > 1, with
/// identical output either way.
Dataset generate(const GeneratorConfig& cfg, int n_episodes, int threads = 1);

/// Simulates the latent chain alone and returns the label prevalence;
/// independent oracle for generate().
double latent_event_rate(const GeneratorConfig& cfg, long n_steps);

/// Forward-fill imputation (train median before first measurement), z-score
/// normalization from train-split statistics only, mask and interval
/// channels. Requires split assignment.
void engineer_features(Dataset& ds);

struct SplitError : std::runtime_error {
    explicit SplitError(const std::string& m) : std::runtime_error(m) {}
};

/// Stratified on per-episode label rate and length. Post-conditions: per
/// split positive rate within +-1% of global, median length within +-10%.
void split_dataset(Dataset& ds, double train_ratio, double val_ratio,
                   double test_ratio, std::uint64_t seed);

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

/// MNIST IDX files: each image becomes a 28-step sequence of 28-dim rows,
/// pixels scaled to [0,1], class label at every step.
std::vector<Episode> load_mnist_rows(const std::string& images_path,
                                     const std::string& labels_path,
                                     int limit = 0);

}  // namespace vshap
