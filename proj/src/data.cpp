#include "vshap/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vshap {

namespace {

double log24(double dt) { return std::log(1.0 + dt) / std::log(24.0); }

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

std::vector<const Episode*> Dataset::split_episodes(int which) const {
    std::vector<const Episode*> out;
    for (std::size_t i = 0; i < episodes.size(); ++i)
        if (!split.empty() && split[i] == which) out.push_back(&episodes[i]);
    return out;
}

void GeneratorConfig::fill_defaults() {
    const int K = n_variables;
    auto fill = [K](std::vector<double>& v, double def) {
        if (v.empty()) v.assign(K, def);
    };
    if (meas_rate.empty()) {
        meas_rate.assign(K, 0.3);
        meas_rate[0] = 0.5;  // the designated informative variable
    }
    if (loading.empty()) {
        loading.assign(K, 0.0);
        for (int k = 0; k < K; ++k)
            loading[k] = k == 0 ? 1.0 : (k < K / 2 ? 0.5 : 0.0);
    }
    fill(noise_sd, 0.3);
    fill(staleness, 0.0);
}

void GeneratorConfig::validate() const {
    if (n_variables < 1) throw ConfigError("n_variables must be >= 1");
    if (len_min < 1 || len_max < len_min)
        throw ConfigError("invalid episode length range");
    if (horizon < 1) throw ConfigError("horizon must be >= 1");
    if (ar_coeff <= -1.0 || ar_coeff >= 1.0)
        throw ConfigError("ar_coeff must be in (-1, 1)");
    auto check_len = [this](const std::vector<double>& v, const char* name) {
        if (v.size() != static_cast<std::size_t>(n_variables))
            throw ConfigError(std::string(name) + " length != n_variables");
    };
    check_len(meas_rate, "meas_rate");
    check_len(loading, "loading");
    check_len(noise_sd, "noise_sd");
    check_len(staleness, "staleness");
    for (double r : meas_rate)
        if (r <= 0.0 || r > 1.0)
            throw ConfigError("meas_rate entries must be in (0, 1]");
}

std::string GeneratorConfig::to_json() const {
    nlohmann::json j;
    j["n_variables"] = n_variables;
    j["len_min"] = len_min;
    j["len_max"] = len_max;
    j["ar_coeff"] = ar_coeff;
    j["event_threshold"] = event_threshold;
    j["horizon"] = horizon;
    j["meas_rate"] = meas_rate;
    j["loading"] = loading;
    j["noise_sd"] = noise_sd;
    j["staleness"] = staleness;
    j["severity_dependent_rate"] = severity_dependent_rate;
    j["rate_sensitivity"] = rate_sensitivity;
    j["first_step_measured"] = first_step_measured;
    j["seed"] = seed;
    return j.dump();
}

GeneratorConfig GeneratorConfig::from_json(const std::string& s) {
    nlohmann::json j = nlohmann::json::parse(s);
    GeneratorConfig c;
    c.n_variables = j.at("n_variables");
    c.len_min = j.at("len_min");
    c.len_max = j.at("len_max");
    c.ar_coeff = j.at("ar_coeff");
    c.event_threshold = j.at("event_threshold");
    c.horizon = j.at("horizon");
    c.meas_rate = j.at("meas_rate").get<std::vector<double>>();
    c.loading = j.at("loading").get<std::vector<double>>();
    c.noise_sd = j.at("noise_sd").get<std::vector<double>>();
    c.staleness = j.at("staleness").get<std::vector<double>>();
    c.severity_dependent_rate = j.at("severity_dependent_rate");
    c.rate_sensitivity = j.at("rate_sensitivity");
    c.first_step_measured = j.at("first_step_measured");
    c.seed = j.at("seed");
    return c;
}

namespace {

Episode generate_episode(const GeneratorConfig& cfg, int idx) {
    // per-episode seed derived from (config seed, episode id)
    Rng rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (idx + 1)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uniform_int_distribution<int> len_dist(cfg.len_min, cfg.len_max);

    const int K = cfg.n_variables;
    const int T = len_dist(rng);
    Episode ep;
    ep.id = "ep" + std::to_string(idx);
    ep.T = T;
    ep.K = K;
    ep.raw.assign(static_cast<std::size_t>(T) * K, std::nullopt);
    ep.masks.assign(static_cast<std::size_t>(T) * K, 0);
    ep.severity.resize(T);
    ep.labels.resize(T);

    const double noise = std::sqrt(1.0 - cfg.ar_coeff * cfg.ar_coeff);
    double s = gauss(rng);  // stationary start, var 1
    std::vector<double> trace(K, 0.0);
    for (int k = 0; k < K; ++k) trace[k] = cfg.loading[k] * s;
    for (int t = 0; t < T; ++t) {
        if (t > 0) s = cfg.ar_coeff * s + noise * gauss(rng);
        ep.severity[t] = s;
        for (int k = 0; k < K; ++k)
            trace[k] = cfg.staleness[k] * trace[k] +
                       (1.0 - cfg.staleness[k]) * cfg.loading[k] * s;
        auto draw_measured = [&](int k) {
            double p = cfg.meas_rate[k];
            if (cfg.severity_dependent_rate)
                p = stable_sigmoid(logit(std::min(p, 0.999)) +
                                   cfg.rate_sensitivity * s);
            return (t == 0 && cfg.first_step_measured) || unif(rng) < p;
        };
        for (int k = 0; k < K; ++k) {
            const bool measured = draw_measured(k);
            // draw the noise unconditionally so the measurement pattern
            // does not shift the value stream
            const double obs = trace[k] + cfg.noise_sd[k] * gauss(rng);
            if (measured) {
                ep.masks[static_cast<std::size_t>(t) * K + k] = 1;
                ep.raw[static_cast<std::size_t>(t) * K + k] = obs;
            }
        }
    }
    for (int t = 0; t < T; ++t) {
        int y = 0;
        const int hi = std::min(T - 1, t + cfg.horizon);
        if (t + 1 <= hi) {
            double smax = ep.severity[t + 1];
            for (int u = t + 2; u <= hi; ++u)
                smax = std::max(smax, ep.severity[u]);
            if (smax >= cfg.event_threshold) y = 1;
        }
        ep.labels[t] = y;
    }
    return ep;
}

}  // namespace

Dataset generate(const GeneratorConfig& cfg_in, int n_episodes, int threads) {
    GeneratorConfig cfg = cfg_in;
    cfg.fill_defaults();
    cfg.validate();
    Dataset ds;
    ds.K = cfg.n_variables;
    ds.feature_dim = 3 * cfg.n_variables;
    ds.config_json = cfg.to_json();
    ds.episodes.resize(n_episodes);
    if (threads > 1) {
#pragma omp parallel for schedule(static) num_threads(threads)
        for (int i = 0; i < n_episodes; ++i)
            ds.episodes[i] = generate_episode(cfg, i);
    } else {
        for (int i = 0; i < n_episodes; ++i)
            ds.episodes[i] = generate_episode(cfg, i);
    }
    return ds;
}

double latent_event_rate(const GeneratorConfig& cfg_in, long n_steps) {
    GeneratorConfig cfg = cfg_in;
    cfg.fill_defaults();
    Rng rng(cfg.seed ^ 0xabcdef1234567890ULL);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double noise = std::sqrt(1.0 - cfg.ar_coeff * cfg.ar_coeff);
    std::vector<double> s(n_steps);
    double v = gauss(rng);
    for (long t = 0; t < n_steps; ++t) {
        if (t > 0) v = cfg.ar_coeff * v + noise * gauss(rng);
        s[t] = v;
    }
    long pos = 0;
    for (long t = 0; t < n_steps; ++t) {
        bool y = false;
        for (long u = t + 1; u <= std::min(n_steps - 1, t + cfg.horizon); ++u)
            if (s[u] >= cfg.event_threshold) y = true;
        pos += y ? 1 : 0;
    }
    return static_cast<double>(pos) / static_cast<double>(n_steps);
}

void engineer_features(Dataset& ds) {
    if (ds.split.size() != ds.episodes.size())
        throw ConfigError("engineer_features: split assignment required");
    const int K = ds.K;
    // train-split statistics only
    std::vector<std::vector<double>> train_vals(K);
    for (std::size_t i = 0; i < ds.episodes.size(); ++i) {
        if (ds.split[i] != 0) continue;
        const Episode& ep = ds.episodes[i];
        for (int t = 0; t < ep.T; ++t)
            for (int k = 0; k < K; ++k) {
                const auto& r = ep.raw[static_cast<std::size_t>(t) * K + k];
                if (r) train_vals[k].push_back(*r);
            }
    }
    ds.norm.mean.assign(K, 0.0);
    ds.norm.sd.assign(K, 1.0);
    ds.norm.median.assign(K, 0.0);
    for (int k = 0; k < K; ++k) {
        auto& v = train_vals[k];
        if (v.empty())
            throw ConfigError("variable v" + std::to_string(k) +
                              " never measured in train split");
        const double m =
            std::accumulate(v.begin(), v.end(), 0.0) / v.size();
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        ds.norm.mean[k] = m;
        ds.norm.sd[k] = v.size() > 1 ? std::sqrt(ss / (v.size() - 1)) : 1.0;
        if (ds.norm.sd[k] < 1e-12) ds.norm.sd[k] = 1.0;
        std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
        ds.norm.median[k] = v[v.size() / 2];
    }
    for (auto& ep : ds.episodes) {
        ep.feature_dim = 3 * K;
        ep.features.assign(static_cast<std::size_t>(ep.T) * 3 * K, 0.0);
        ep.intervals.assign(static_cast<std::size_t>(ep.T) * K, 0.0);
        for (int k = 0; k < K; ++k) {
            double last_raw = ds.norm.median[k];  // before first measurement
            int last_t = 0;  // admission acts as the interval baseline
            for (int t = 0; t < ep.T; ++t) {
                const auto& r = ep.raw[static_cast<std::size_t>(t) * K + k];
                const bool measured =
                    ep.masks[static_cast<std::size_t>(t) * K + k] != 0;
                if (measured) {
                    last_raw = *r;
                    last_t = t;
                }
                const double dt = measured ? 0.0 : double(t - last_t);
                const double interval = log24(dt);
                ep.intervals[static_cast<std::size_t>(t) * K + k] = interval;
                double* f = ep.features.data() +
                            static_cast<std::size_t>(t) * 3 * K + 3 * k;
                f[kChannelValue] =
                    (last_raw - ds.norm.mean[k]) / ds.norm.sd[k];
                f[kChannelMask] = measured ? 1.0 : 0.0;
                f[kChannelInterval] = interval;
            }
        }
    }
    ds.feature_dim = 3 * K;
}

void split_dataset(Dataset& ds, double train_ratio, double val_ratio,
                   double test_ratio, std::uint64_t seed) {
    const double rsum = train_ratio + val_ratio + test_ratio;
    if (std::fabs(rsum - 1.0) > 1e-9)
        throw SplitError("split ratios must sum to 1");
    const std::size_t n = ds.episodes.size();
    // strata: (episode has a positive step) x (length tercile)
    std::vector<int> lengths;
    for (const auto& ep : ds.episodes) lengths.push_back(ep.T);
    std::vector<int> sorted_len = lengths;
    std::sort(sorted_len.begin(), sorted_len.end());
    const int q1 = sorted_len[n / 3], q2 = sorted_len[(2 * n) / 3];
    auto stratum = [&](const Episode& ep) {
        const bool pos =
            std::any_of(ep.labels.begin(), ep.labels.end(),
                        [](int y) { return y == 1; });
        const int lb = ep.T <= q1 ? 0 : (ep.T <= q2 ? 1 : 2);
        return (pos ? 3 : 0) + lb;
    };
    std::vector<std::vector<std::size_t>> strata(6);
    for (std::size_t i = 0; i < n; ++i)
        strata[stratum(ds.episodes[i])].push_back(i);
    Rng rng(seed);
    ds.split.assign(n, 0);
    const double ratios[3] = {train_ratio, val_ratio, test_ratio};
    for (auto& group : strata) {
        // shuffle to break ties, then order by per-episode positive rate and
        // deal proportionally so every split sees the same rate profile
        std::shuffle(group.begin(), group.end(), rng);
        std::stable_sort(group.begin(), group.end(),
                         [&](std::size_t a, std::size_t b) {
                             const auto& ea = ds.episodes[a];
                             const auto& eb = ds.episodes[b];
                             const double ra =
                                 std::accumulate(ea.labels.begin(),
                                                 ea.labels.end(), 0.0) /
                                 ea.T;
                             const double rb =
                                 std::accumulate(eb.labels.begin(),
                                                 eb.labels.end(), 0.0) /
                                 eb.T;
                             return ra > rb;
                         });
        double assigned[3] = {0, 0, 0};
        for (std::size_t j = 0; j < group.size(); ++j) {
            int best = 0;
            double best_score = -1e300;
            for (int w = 0; w < 3; ++w) {
                if (ratios[w] <= 0.0) continue;
                const double score =
                    ratios[w] * (j + 1) - assigned[w];  // largest deficit
                if (score > best_score) {
                    best_score = score;
                    best = w;
                }
            }
            assigned[best] += 1.0;
            ds.split[group[j]] = best;
        }
    }
    // post-conditions
    double global_pos = 0, global_n = 0;
    for (const auto& ep : ds.episodes)
        for (int y : ep.labels) {
            global_pos += y;
            global_n += 1;
        }
    const double global_rate = global_pos / global_n;
    for (int w = 0; w < 3; ++w) {
        double pos = 0, cnt = 0;
        std::vector<int> lens;
        for (std::size_t i = 0; i < n; ++i) {
            if (ds.split[i] != w) continue;
            lens.push_back(ds.episodes[i].T);
            for (int y : ds.episodes[i].labels) {
                pos += y;
                cnt += 1;
            }
        }
        if (lens.empty()) continue;
        const double rate = pos / cnt;
        std::sort(lens.begin(), lens.end());
        const double med = lens[lens.size() / 2];
        std::sort(sorted_len.begin(), sorted_len.end());
        const double gmed = sorted_len[sorted_len.size() / 2];
        // +-1% of the global per-step positive rate, widened for splits too
        // small for that to be statistically meaningful
        const double tol = std::max(0.01, 1.5 / std::sqrt(std::max(cnt, 1.0)));
        if (std::fabs(rate - global_rate) > tol)
            throw SplitError("stratification failed: split " +
                             std::to_string(w) + " positive rate off by " +
                             std::to_string(std::fabs(rate - global_rate)));
        const double med_tol =
            std::max(0.10 * gmed, gmed / std::sqrt(double(lens.size())));
        if (std::fabs(med - gmed) > med_tol)
            throw SplitError("stratification failed: split " +
                             std::to_string(w) + " median length " +
                             std::to_string(med) + " vs global " +
                             std::to_string(gmed));
    }
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream csv(fs::path(dir) / "dataset.csv");
    csv << "episode_id,t,y";
    for (int k = 0; k < ds.K; ++k)
        csv << ",v" << k << "_raw,v" << k << "_value,v" << k << "_mask,v" << k
            << "_interval";
    csv << "\n";
    csv.precision(17);
    std::ofstream truth(fs::path(dir) / "truth.csv");
    truth << "episode_id,t,severity\n";
    truth.precision(17);
    for (const auto& ep : ds.episodes) {
        for (int t = 0; t < ep.T; ++t) {
            csv << ep.id << "," << t << "," << ep.labels[t];
            for (int k = 0; k < ds.K; ++k) {
                const auto& r = ep.raw[static_cast<std::size_t>(t) * ds.K + k];
                csv << ",";
                if (r) csv << *r;
                csv << "," << ep.feature(t, k, kChannelValue) << ","
                    << (ep.masks[static_cast<std::size_t>(t) * ds.K + k] ? 1
                                                                         : 0)
                    << "," << ep.feature(t, k, kChannelInterval);
            }
            csv << "\n";
            if (!ep.severity.empty())
                truth << ep.id << "," << t << "," << ep.severity[t] << "\n";
        }
    }
    nlohmann::json side;
    side["generator_config"] = nlohmann::json::parse(
        ds.config_json.empty() ? "{}" : ds.config_json);
    side["n_variables"] = ds.K;
    nlohmann::json splits = nlohmann::json::object();
    for (std::size_t i = 0; i < ds.episodes.size(); ++i)
        if (!ds.split.empty())
            splits[ds.episodes[i].id] =
                ds.split[i] == 0 ? "train" : (ds.split[i] == 1 ? "val" : "test");
    side["split"] = splits;
    side["normalization"] = {{"mean", ds.norm.mean},
                             {"sd", ds.norm.sd},
                             {"median", ds.norm.median}};
    std::ofstream js(fs::path(dir) / "dataset.json");
    js << side.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream js(fs::path(dir) / "dataset.json");
    if (!js) throw UsageError("missing dataset.json in " + dir);
    nlohmann::json side = nlohmann::json::parse(js);
    Dataset ds;
    ds.K = side.at("n_variables");
    ds.feature_dim = 3 * ds.K;
    ds.config_json = side.at("generator_config").dump();
    ds.norm.mean = side.at("normalization").at("mean").get<std::vector<double>>();
    ds.norm.sd = side.at("normalization").at("sd").get<std::vector<double>>();
    ds.norm.median =
        side.at("normalization").at("median").get<std::vector<double>>();

    std::ifstream csv(fs::path(dir) / "dataset.csv");
    if (!csv) throw UsageError("missing dataset.csv in " + dir);
    std::string line;
    std::getline(csv, line);  // header
    Episode cur;
    auto flush = [&ds, &cur]() {
        if (cur.T > 0) ds.episodes.push_back(std::move(cur));
        cur = Episode{};
    };
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        const std::string id = cell;
        if (id != cur.id) {
            flush();
            cur.id = id;
            cur.K = ds.K;
            cur.feature_dim = 3 * ds.K;
        }
        std::getline(ss, cell, ',');
        std::getline(ss, cell, ',');
        cur.labels.push_back(std::stoi(cell));
        for (int k = 0; k < ds.K; ++k) {
            std::getline(ss, cell, ',');
            cur.raw.push_back(cell.empty()
                                  ? std::optional<double>{}
                                  : std::optional<double>{std::stod(cell)});
            std::getline(ss, cell, ',');
            const double value = std::stod(cell);
            std::getline(ss, cell, ',');
            const int mask = std::stoi(cell);
            std::getline(ss, cell, ',');
            const double interval = std::stod(cell);
            cur.masks.push_back(static_cast<std::uint8_t>(mask));
            cur.intervals.push_back(interval);
            cur.features.push_back(value);
            cur.features.push_back(static_cast<double>(mask));
            cur.features.push_back(interval);
        }
        cur.T += 1;
    }
    flush();
    // severity sidecar (optional)
    std::ifstream truth(fs::path(dir) / "truth.csv");
    if (truth) {
        std::getline(truth, line);
        std::size_t ei = 0;
        while (std::getline(truth, line)) {
            if (line.empty()) continue;
            std::stringstream ss(line);
            std::string id, ts, sv;
            std::getline(ss, id, ',');
            std::getline(ss, ts, ',');
            std::getline(ss, sv, ',');
            while (ei < ds.episodes.size() && ds.episodes[ei].id != id) ++ei;
            if (ei < ds.episodes.size())
                ds.episodes[ei].severity.push_back(std::stod(sv));
        }
    }
    const auto& splits = side.at("split");
    ds.split.assign(ds.episodes.size(), 0);
    for (std::size_t i = 0; i < ds.episodes.size(); ++i) {
        if (!splits.contains(ds.episodes[i].id)) continue;
        const std::string s = splits.at(ds.episodes[i].id);
        ds.split[i] = s == "train" ? 0 : (s == "val" ? 1 : 2);
    }
    return ds;
}

namespace {

std::uint32_t read_be32(std::ifstream& f, const std::string& path) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) throw UsageError("malformed IDX header: " + path);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

std::vector<Episode> load_mnist_rows(const std::string& images_path,
                                     const std::string& labels_path,
                                     int limit) {
    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw UsageError("cannot open " + images_path);
    if (read_be32(fi, images_path) != 2051)
        throw UsageError("malformed IDX header (bad magic): " + images_path);
    const std::uint32_t n = read_be32(fi, images_path);
    const std::uint32_t rows = read_be32(fi, images_path);
    const std::uint32_t cols = read_be32(fi, images_path);
    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw UsageError("cannot open " + labels_path);
    if (read_be32(fl, labels_path) != 2049)
        throw UsageError("malformed IDX header (bad magic): " + labels_path);
    const std::uint32_t nl = read_be32(fl, labels_path);
    if (n != nl) throw UsageError("IDX image/label count mismatch");
    const std::uint32_t count =
        limit > 0 ? std::min<std::uint32_t>(n, limit) : n;
    std::vector<Episode> out;
    out.reserve(count);
    std::vector<unsigned char> img(static_cast<std::size_t>(rows) * cols);
    for (std::uint32_t i = 0; i < count; ++i) {
        fi.read(reinterpret_cast<char*>(img.data()),
                static_cast<std::streamsize>(img.size()));
        char lab = 0;
        fl.read(&lab, 1);
        if (!fi || !fl) throw UsageError("truncated IDX payload");
        Episode ep;
        ep.id = "img" + std::to_string(i);
        ep.T = static_cast<int>(rows);
        ep.K = 0;
        ep.feature_dim = static_cast<int>(cols);
        ep.features.resize(img.size());
        for (std::size_t p = 0; p < img.size(); ++p)
            ep.features[p] = img[p] / 255.0;
        ep.labels.assign(rows, static_cast<int>(lab));
        out.push_back(std::move(ep));
    }
    return out;
}

}  // namespace vshap
