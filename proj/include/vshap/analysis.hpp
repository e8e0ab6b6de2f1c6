#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vshap/data.hpp"
#include "vshap/shap.hpp"

namespace vshap {

/// One exported attribution cell; the CSV schema is
/// (episode_id, step, game, timestep, variable, channel, phi, base_value).
struct AttributionRow {
    std::string episode_id;
    int step;
    std::string game;
    int timestep;
    int variable;
    int channel;
    double phi;
    double base_value;
};

std::vector<AttributionRow> attribution_rows(const std::string& episode_id,
                                             const Attribution& a);
void save_attribution_csv(const std::vector<AttributionRow>& rows,
                          const std::string& path);
void save_attribution_json(const std::vector<AttributionRow>& rows,
                           const std::string& path, std::uint64_t seed,
                           long n_coalitions, int window);
std::vector<AttributionRow> load_attribution_csv(const std::string& path);

struct SpearmanResult {
    double rho = 0.0;
    double p_value = 1.0;
    long n = 0;
};

SpearmanResult spearman(const std::vector<double>& x,
                        const std::vector<double>& y);

struct RelationRecord {
    std::string episode_id;
    int step;
    int variable;
    int channel;
    double x;    // interval (or value)
    double phi;  // variance-game attribution
};

struct VariableRelation {
    int variable = -1;
    SpearmanResult interval_rho;
    std::vector<double> quartile_mean_phi;  // binned by interval quartile
    std::vector<long> quartile_count;
    bool abnormal = false;  // rho < 0 candidate
    bool skipped = false;   // fewer than 30 records
};

struct RelationSummary {
    std::vector<RelationRecord> records;
    std::vector<VariableRelation> variables;
};

/// Per-variable Spearman correlation between the interval channel value and
/// the variable's variance-SHAP phi (summed over its value, mask, and
/// interval features) at the analyzed step.
RelationSummary relation_analysis(const std::vector<AttributionRow>& rows,
                                  const Dataset& ds, int at_step);

struct VariableReport {
    int variable;
    long n_avoidable, n_existing;
    double pct_avoidable;
    long n_should_have, n_missing;
    double pct_should_have;
};

struct MeasurementReport {
    int step;
    double tau_p, tau_v, tau_m;
    std::vector<VariableReport> variables;
};

/// avoidable: measured, |phi_pred| < tau_p and |phi_var| < tau_v (per
/// variable, channels summed). should-have: not measured, variance phi on
/// the mask or interval channel > tau_m. NaN thresholds default to the 25th
/// percentile of the respective |phi| distribution over the cohort.
MeasurementReport measurement_report(const std::vector<AttributionRow>& rows,
                                     const Dataset& ds, int at_step,
                                     double tau_p, double tau_v, double tau_m);

void save_report_csv(const MeasurementReport& rep, const std::string& path);
std::string format_report_table(const MeasurementReport& rep);

/// Plot-ready bundles: relation records and per-variable (phi_pred, phi_var)
/// scatter pairs. Pure serialization, no rendering.
void emit_plot_data(const RelationSummary& rel,
                    const std::vector<AttributionRow>& rows,
                    const std::string& dir);

/// FNV-1a of a string, hex; used for config hashes in run manifests.
std::string fnv1a_hex(const std::string& s);
void write_manifest(const std::string& dir, const std::string& subcommand,
                    std::uint64_t seed, const std::string& config_dump,
                    const std::vector<std::string>& args);

}  // namespace vshap
