#include "vshap/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace vshap {

std::vector<AttributionRow> attribution_rows(const std::string& episode_id,
                                             const Attribution& a) {
    std::vector<AttributionRow> out;
    if (a.n_vars <= 0)
        throw UsageError("attribution_rows: not an episode-grid attribution");
    const int d = 3 * a.n_vars;
    for (int t = 0; t < a.window; ++t)
        for (int k = 0; k < a.n_vars; ++k)
            for (int c = 0; c < 3; ++c)
                out.push_back({episode_id, a.step, a.game,
                               a.window_start + t, k, c,
                               a.phi[static_cast<std::size_t>(t) * d + 3 * k +
                                     c],
                               a.base_value});
    return out;
}

void save_attribution_csv(const std::vector<AttributionRow>& rows,
                          const std::string& path) {
    std::ofstream f(path);
    if (!f) throw UsageError("cannot write " + path);
    f.precision(17);
    f << "episode_id,step,game,timestep,variable,channel,phi,base_value\n";
    for (const auto& r : rows)
        f << r.episode_id << "," << r.step << "," << r.game << ","
          << r.timestep << "," << r.variable << "," << r.channel << ","
          << r.phi << "," << r.base_value << "\n";
}

void save_attribution_json(const std::vector<AttributionRow>& rows,
                           const std::string& path, std::uint64_t seed,
                           long n_coalitions, int window) {
    nlohmann::json j;
    j["metadata"] = {{"seed", seed},
                     {"n_coalitions", n_coalitions},
                     {"window", window}};
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows)
        arr.push_back({{"episode_id", r.episode_id},
                       {"step", r.step},
                       {"game", r.game},
                       {"timestep", r.timestep},
                       {"variable", r.variable},
                       {"channel", r.channel},
                       {"phi", r.phi},
                       {"base_value", r.base_value}});
    j["attributions"] = arr;
    std::ofstream f(path);
    if (!f) throw UsageError("cannot write " + path);
    f << j.dump(2) << "\n";
}

std::vector<AttributionRow> load_attribution_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw UsageError("cannot open " + path);
    std::string line;
    std::getline(f, line);
    std::vector<AttributionRow> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        AttributionRow r;
        std::string cell;
        std::getline(ss, r.episode_id, ',');
        std::getline(ss, cell, ',');
        r.step = std::stoi(cell);
        std::getline(ss, r.game, ',');
        std::getline(ss, cell, ',');
        r.timestep = std::stoi(cell);
        std::getline(ss, cell, ',');
        r.variable = std::stoi(cell);
        std::getline(ss, cell, ',');
        r.channel = std::stoi(cell);
        std::getline(ss, cell, ',');
        r.phi = std::stod(cell);
        std::getline(ss, cell, ',');
        r.base_value = std::stod(cell);
        out.push_back(std::move(r));
    }
    return out;
}

namespace {

// regularized incomplete beta via continued fraction
double betacf(double a, double b, double x) {
    const double eps = 3e-14, fpmin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::fabs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

double inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double lnb = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                       a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(lnb);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

// two-sided p-value of Student t with df degrees of freedom
double t_test_p(double t, double df) {
    return inc_beta(df / 2.0, 0.5, df / (df + t * t));
}

std::vector<double> ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * (i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

double percentile(std::vector<double> v, double pct) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = pct / 100.0 * (v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - lo;
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

}  // namespace

SpearmanResult spearman(const std::vector<double>& x,
                        const std::vector<double>& y) {
    if (x.size() != y.size()) throw UsageError("spearman: size mismatch");
    const std::size_t n = x.size();
    SpearmanResult out;
    out.n = static_cast<long>(n);
    if (n < 3) return out;
    const auto rx = ranks(x), ry = ranks(y);
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0) {
        out.rho = 0.0;
        out.p_value = 1.0;
        return out;
    }
    out.rho = sxy / std::sqrt(sxx * syy);
    const double df = static_cast<double>(n) - 2.0;
    const double denom = 1.0 - out.rho * out.rho;
    if (denom <= 0.0) {
        out.p_value = 0.0;
    } else {
        const double t = out.rho * std::sqrt(df / denom);
        out.p_value = t_test_p(t, df);
    }
    return out;
}

RelationSummary relation_analysis(const std::vector<AttributionRow>& rows,
                                  const Dataset& ds, int at_step) {
    std::map<std::string, const Episode*> by_id;
    for (const auto& ep : ds.episodes) by_id[ep.id] = &ep;

    RelationSummary out;
    // per (episode, variable): interval value at the analyzed step, and the
    // variable's phi summed over its three channels there
    std::map<std::pair<std::string, int>, std::pair<double, double>> cells;
    for (const auto& r : rows) {
        if (r.game != "variance" || r.step != at_step ||
            r.timestep != at_step)
            continue;
        auto it = by_id.find(r.episode_id);
        if (it == by_id.end() || it->second->T <= at_step) continue;
        const Episode& ep = *it->second;
        const double x = ep.feature(at_step, r.variable, r.channel);
        out.records.push_back({r.episode_id, r.step, r.variable, r.channel,
                               x, r.phi});
        auto& cell = cells[{r.episode_id, r.variable}];
        cell.first = ep.feature(at_step, r.variable, kChannelInterval);
        cell.second += r.phi;
    }
    std::map<int, std::pair<std::vector<double>, std::vector<double>>> pairs;
    for (const auto& [key, cell] : cells) {
        pairs[key.second].first.push_back(cell.first);
        pairs[key.second].second.push_back(cell.second);
    }
    for (auto& [var, xy] : pairs) {
        VariableRelation vr;
        vr.variable = var;
        if (xy.first.size() < 30) {
            vr.skipped = true;
            out.variables.push_back(vr);
            continue;
        }
        vr.interval_rho = spearman(xy.first, xy.second);
        vr.abnormal = vr.interval_rho.rho < 0.0;
        // quartile bins partition the records
        std::vector<double> qs = {percentile(xy.first, 25),
                                  percentile(xy.first, 50),
                                  percentile(xy.first, 75)};
        vr.quartile_mean_phi.assign(4, 0.0);
        vr.quartile_count.assign(4, 0);
        for (std::size_t i = 0; i < xy.first.size(); ++i) {
            const double x = xy.first[i];
            int b = 0;
            while (b < 3 && x > qs[b]) ++b;
            vr.quartile_mean_phi[b] += xy.second[i];
            vr.quartile_count[b] += 1;
        }
        for (int b = 0; b < 4; ++b)
            if (vr.quartile_count[b] > 0)
                vr.quartile_mean_phi[b] /= vr.quartile_count[b];
        out.variables.push_back(std::move(vr));
    }
    return out;
}

MeasurementReport measurement_report(const std::vector<AttributionRow>& rows,
                                     const Dataset& ds, int at_step,
                                     double tau_p, double tau_v,
                                     double tau_m) {
    std::map<std::string, const Episode*> by_id;
    for (const auto& ep : ds.episodes) by_id[ep.id] = &ep;

    // per (episode, variable): channel-summed phi per game at the step
    struct Cell {
        double phi_pred = 0, phi_var = 0;
        double phi_var_mask = 0, phi_var_interval = 0;
        bool has_pred = false, has_var = false;
    };
    std::map<std::pair<std::string, int>, Cell> cells;
    int n_vars = 0;
    for (const auto& r : rows) {
        if (r.step != at_step || r.timestep != at_step) continue;
        auto it = by_id.find(r.episode_id);
        if (it == by_id.end() || it->second->T <= at_step) continue;
        n_vars = std::max(n_vars, r.variable + 1);
        Cell& c = cells[{r.episode_id, r.variable}];
        if (r.game == "prediction") {
            c.phi_pred += r.phi;
            c.has_pred = true;
        } else if (r.game == "variance") {
            c.phi_var += r.phi;
            c.has_var = true;
            if (r.channel == kChannelMask) c.phi_var_mask = r.phi;
            if (r.channel == kChannelInterval) c.phi_var_interval = r.phi;
        }
    }
    // percentile defaults for unset thresholds
    std::vector<double> abs_pred, abs_var, abs_missing;
    for (const auto& [key, c] : cells) {
        if (c.has_pred) abs_pred.push_back(std::fabs(c.phi_pred));
        if (c.has_var) {
            abs_var.push_back(std::fabs(c.phi_var));
            abs_missing.push_back(std::fabs(c.phi_var_mask));
            abs_missing.push_back(std::fabs(c.phi_var_interval));
        }
    }
    MeasurementReport rep;
    rep.step = at_step;
    rep.tau_p = std::isnan(tau_p) ? percentile(abs_pred, 25) : tau_p;
    rep.tau_v = std::isnan(tau_v) ? percentile(abs_var, 25) : tau_v;
    rep.tau_m = std::isnan(tau_m) ? percentile(abs_missing, 25) : tau_m;

    rep.variables.assign(n_vars, VariableReport{});
    for (int k = 0; k < n_vars; ++k) rep.variables[k].variable = k;
    for (const auto& [key, c] : cells) {
        const Episode& ep = *by_id.at(key.first);
        const int k = key.second;
        VariableReport& vr = rep.variables[k];
        const bool measured = ep.feature(at_step, k, kChannelMask) > 0.5;
        if (measured) {
            vr.n_existing += 1;
            if (c.has_pred && c.has_var &&
                std::fabs(c.phi_pred) < rep.tau_p &&
                std::fabs(c.phi_var) < rep.tau_v)
                vr.n_avoidable += 1;
        } else {
            vr.n_missing += 1;
            if (c.has_var &&
                std::max(c.phi_var_mask, c.phi_var_interval) > rep.tau_m)
                vr.n_should_have += 1;
        }
    }
    for (auto& vr : rep.variables) {
        vr.pct_avoidable =
            vr.n_existing ? 100.0 * vr.n_avoidable / vr.n_existing : 0.0;
        vr.pct_should_have =
            vr.n_missing ? 100.0 * vr.n_should_have / vr.n_missing : 0.0;
    }
    return rep;
}

void save_report_csv(const MeasurementReport& rep, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw UsageError("cannot write " + path);
    f << "variable,n_avoidable,n_existing,pct_avoidable,n_should_have,"
         "n_missing,pct_should_have\n";
    f << std::fixed << std::setprecision(2);
    for (const auto& v : rep.variables)
        f << "v" << v.variable << "," << v.n_avoidable << "," << v.n_existing
          << "," << v.pct_avoidable << "," << v.n_should_have << ","
          << v.n_missing << "," << v.pct_should_have << "\n";
}

std::string format_report_table(const MeasurementReport& rep) {
    std::ostringstream os;
    os << "Avoidable and Should-have Measurements (step " << rep.step
       << ", tau_p=" << rep.tau_p << ", tau_v=" << rep.tau_v
       << ", tau_m=" << rep.tau_m << ")\n";
    os << "variable\t#avoidable\t#existing\t%\t#should-have\t#missing\t%\n";
    os << std::fixed << std::setprecision(2);
    for (const auto& v : rep.variables)
        os << "v" << v.variable << "\t" << v.n_avoidable << "\t"
           << v.n_existing << "\t" << v.pct_avoidable << "%\t"
           << v.n_should_have << "\t" << v.n_missing << "\t"
           << v.pct_should_have << "%\n";
    return os.str();
}

void emit_plot_data(const RelationSummary& rel,
                    const std::vector<AttributionRow>& rows,
                    const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream f(fs::path(dir) / "relation_records.csv");
        f.precision(17);
        f << "episode_id,step,variable,channel,x,phi\n";
        for (const auto& r : rel.records)
            f << r.episode_id << "," << r.step << "," << r.variable << ","
              << r.channel << "," << r.x << "," << r.phi << "\n";
    }
    {
        // (phi_pred, phi_var) pairs per (episode, variable), channel-summed
        std::map<std::pair<std::string, int>, std::pair<double, double>> m;
        std::set<std::pair<std::string, int>> has_pred, has_var;
        for (const auto& r : rows) {
            if (r.step != r.timestep) continue;
            auto key = std::make_pair(r.episode_id, r.variable);
            if (r.game == "prediction") {
                m[key].first += r.phi;
                has_pred.insert(key);
            } else if (r.game == "variance") {
                m[key].second += r.phi;
                has_var.insert(key);
            }
        }
        std::ofstream f(fs::path(dir) / "pred_var_scatter.csv");
        f.precision(17);
        f << "episode_id,variable,phi_pred,phi_var\n";
        for (const auto& [key, pv] : m) {
            if (!has_pred.count(key) || !has_var.count(key)) continue;
            f << key.first << "," << key.second << "," << pv.first << ","
              << pv.second << "\n";
        }
    }
}

std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

void write_manifest(const std::string& dir, const std::string& subcommand,
                    std::uint64_t seed, const std::string& config_dump,
                    const std::vector<std::string>& args) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json j;
    j["tool"] = "vshap";
    j["format_version"] = 1;
    j["subcommand"] = subcommand;
    j["seed"] = seed;
    j["config_hash"] = fnv1a_hex(config_dump);
    j["config"] = nlohmann::json::parse(config_dump.empty() ? "{}"
                                                            : config_dump);
    j["args"] = args;
    std::ofstream f(fs::path(dir) / "manifest.json");
    f << j.dump(2) << "\n";
}

}  // namespace vshap
