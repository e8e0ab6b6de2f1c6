#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vshap/data.hpp"

using namespace vshap;

namespace {

Dataset make_ds(int n, std::uint64_t seed, bool severity_rate = true) {
    GeneratorConfig g;
    g.n_variables = 4;
    g.len_min = 12;
    g.len_max = 20;
    g.severity_dependent_rate = severity_rate;
    g.seed = seed;
    auto ds = generate(g, n);
    split_dataset(ds, 0.6, 0.2, 0.2, seed);
    engineer_features(ds);
    return ds;
}

}  // namespace

TEST_CASE("config validation and defaults") {
    GeneratorConfig g;
    g.n_variables = 5;
    g.fill_defaults();
    CHECK(g.meas_rate.size() == 5);
    CHECK(g.loading[0] == 1.0);
    g.meas_rate[2] = 0.0;
    CHECK_THROWS_AS(g.validate(), ConfigError);
    GeneratorConfig bad;
    bad.len_min = 5;
    bad.len_max = 3;
    CHECK_THROWS_AS(generate(bad, 10), ConfigError);
    // json round-trip
    GeneratorConfig g2 = GeneratorConfig::from_json(g.to_json());
    CHECK(g2.meas_rate == g.meas_rate);
    CHECK(g2.ar_coeff == g.ar_coeff);
}

TEST_CASE("generation is deterministic and thread-count independent") {
    GeneratorConfig g;
    g.n_variables = 3;
    g.seed = 42;
    auto a = generate(g, 50, 1);
    auto b = generate(g, 50, 4);
    REQUIRE(a.episodes.size() == b.episodes.size());
    for (std::size_t i = 0; i < a.episodes.size(); ++i) {
        CHECK(a.episodes[i].T == b.episodes[i].T);
        CHECK(a.episodes[i].severity == b.episodes[i].severity);  // bitwise
        CHECK(a.episodes[i].masks == b.episodes[i].masks);
        CHECK(a.episodes[i].labels == b.episodes[i].labels);
    }
    auto c = generate(g, 50, 1);
    for (std::size_t i = 0; i < a.episodes.size(); ++i)
        CHECK(a.episodes[i].severity == c.episodes[i].severity);
}

TEST_CASE("label prevalence matches the latent-chain oracle") {
    GeneratorConfig g;
    g.n_variables = 2;
    g.len_min = 30;
    g.len_max = 30;
    g.seed = 5;
    const double oracle = latent_event_rate(g, 2000000);
    auto ds = generate(g, 3000);
    double pos = 0, n = 0;
    for (const auto& ep : ds.episodes)
        for (int y : ep.labels) {
            pos += y;
            n += 1;
        }
    // episodes are finite windows of the chain; agree within 2 points
    CHECK(std::fabs(pos / n - oracle) <= 0.02);
    CHECK(oracle > 0.02);  // events actually happen
}

TEST_CASE("interval channel: log24 of time since measurement") {
    auto ds = make_ds(60, 9, false);
    const double denom = std::log(24.0);
    for (const auto* ep : ds.split_episodes(0)) {
        for (int k = 0; k < ds.K; ++k) {
            int last = 0;
            for (int t = 0; t < ep->T; ++t) {
                if (ep->masks[static_cast<std::size_t>(t) * ds.K + k]) last = t;
                const double expect = std::log(1.0 + (t - last)) / denom;
                CHECK(ep->feature(t, k, kChannelInterval) ==
                      doctest::Approx(expect).epsilon(1e-12));
            }
        }
        break;
    }
    // a 24-step gap maps to ~1
    CHECK(std::log(25.0) / denom == doctest::Approx(1.0127).epsilon(1e-3));
}

TEST_CASE("forward fill: value channel reconstructs from raw and masks") {
    auto ds = make_ds(60, 10);
    const auto* ep = ds.split_episodes(1).front();
    for (int k = 0; k < ds.K; ++k) {
        double last = ds.norm.median[k];
        for (int t = 0; t < ep->T; ++t) {
            const auto& r = ep->raw[static_cast<std::size_t>(t) * ds.K + k];
            if (ep->masks[static_cast<std::size_t>(t) * ds.K + k]) last = *r;
            const double z = (last - ds.norm.mean[k]) / ds.norm.sd[k];
            CHECK(ep->feature(t, k, kChannelValue) ==
                  doctest::Approx(z).epsilon(1e-12));
            CHECK(ep->feature(t, k, kChannelMask) ==
                  (ep->masks[static_cast<std::size_t>(t) * ds.K + k] ? 1.0
                                                                     : 0.0));
        }
    }
}

TEST_CASE("normalization statistics come from the train split only") {
    auto ds = make_ds(80, 21);
    // recompute means from the train split raw values
    std::vector<double> sum(ds.K, 0), cnt(ds.K, 0);
    for (std::size_t i = 0; i < ds.episodes.size(); ++i) {
        if (ds.split[i] != 0) continue;
        const auto& ep = ds.episodes[i];
        for (int t = 0; t < ep.T; ++t)
            for (int k = 0; k < ds.K; ++k) {
                const auto& r = ep.raw[static_cast<std::size_t>(t) * ds.K + k];
                if (r) {
                    sum[k] += *r;
                    cnt[k] += 1;
                }
            }
    }
    for (int k = 0; k < ds.K; ++k)
        CHECK(ds.norm.mean[k] == doctest::Approx(sum[k] / cnt[k]).epsilon(1e-12));
    // leak check: perturbing a test episode's raw values must not change
    // the statistics
    auto ds2 = make_ds(80, 21);
    for (std::size_t i = 0; i < ds2.episodes.size(); ++i) {
        if (ds2.split[i] != 2) continue;
        for (auto& r : ds2.episodes[i].raw)
            if (r) *r += 100.0;
    }
    engineer_features(ds2);
    for (int k = 0; k < ds2.K; ++k)
        CHECK(ds2.norm.mean[k] == doctest::Approx(ds.norm.mean[k]).epsilon(1e-12));
}

TEST_CASE("split invariants") {
    auto ds = make_ds(200, 17);
    REQUIRE(ds.split.size() == ds.episodes.size());
    int counts[3] = {0, 0, 0};
    for (int s : ds.split) {
        REQUIRE(s >= 0);
        REQUIRE(s <= 2);
        counts[s]++;
    }
    CHECK(counts[0] > counts[1]);
    CHECK(counts[1] > 0);
    CHECK(counts[2] > 0);
    CHECK(std::fabs(counts[0] / 200.0 - 0.6) < 0.05);
    CHECK_THROWS_AS(split_dataset(ds, 0.5, 0.4, 0.3, 1), SplitError);
}

TEST_CASE("severity-dependent regime measures sicker patients more") {
    GeneratorConfig g;
    g.n_variables = 3;
    g.len_min = 25;
    g.len_max = 25;
    g.seed = 33;
    auto ds = generate(g, 400);
    double hi = 0, hin = 0, lo = 0, lon = 0;
    for (const auto& ep : ds.episodes)
        for (int t = 1; t < ep.T; ++t)
            for (int k = 0; k < 3; ++k) {
                const bool m =
                    ep.masks[static_cast<std::size_t>(t) * 3 + k] != 0;
                if (ep.severity[t] > 0.5) {
                    hi += m;
                    hin += 1;
                } else if (ep.severity[t] < -0.5) {
                    lo += m;
                    lon += 1;
                }
            }
    CHECK(hi / hin > lo / lon + 0.1);
    g.severity_dependent_rate = false;
    auto flat = generate(g, 400);
    hi = hin = lo = lon = 0;
    for (const auto& ep : flat.episodes)
        for (int t = 1; t < ep.T; ++t)
            for (int k = 0; k < 3; ++k) {
                const bool m =
                    ep.masks[static_cast<std::size_t>(t) * 3 + k] != 0;
                if (ep.severity[t] > 0.5) {
                    hi += m;
                    hin += 1;
                } else if (ep.severity[t] < -0.5) {
                    lo += m;
                    lon += 1;
                }
            }
    CHECK(std::fabs(hi / hin - lo / lon) < 0.05);
}

TEST_CASE("dataset save / load round-trip") {
    namespace fs = std::filesystem;
    auto ds = make_ds(30, 25);
    const std::string dir = "ds_roundtrip_test";
    save_dataset(ds, dir);
    auto ds2 = load_dataset(dir);
    fs::remove_all(dir);
    REQUIRE(ds2.episodes.size() == ds.episodes.size());
    CHECK(ds2.K == ds.K);
    CHECK(ds2.split == ds.split);
    CHECK(ds2.norm.mean == ds.norm.mean);
    for (std::size_t i = 0; i < ds.episodes.size(); ++i) {
        const auto& a = ds.episodes[i];
        const auto& b = ds2.episodes[i];
        CHECK(a.id == b.id);
        CHECK(a.T == b.T);
        CHECK(a.labels == b.labels);
        CHECK(a.masks == b.masks);
        for (std::size_t j = 0; j < a.features.size(); ++j)
            CHECK(a.features[j] == b.features[j]);  // bitwise via %.17g
    }
}

TEST_CASE("idx loader round-trip on synthetic files") {
    namespace fs = std::filesystem;
    const std::string img = "idx_img_test", lab = "idx_lab_test";
    const int n = 3;
    {
        std::ofstream fi(img, std::ios::binary);
        auto be32 = [&](std::ofstream& f, std::uint32_t v) {
            unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                  static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v)};
            f.write(reinterpret_cast<char*>(b), 4);
        };
        be32(fi, 2051);
        be32(fi, n);
        be32(fi, 28);
        be32(fi, 28);
        for (int i = 0; i < n * 28 * 28; ++i) {
            unsigned char p = static_cast<unsigned char>(i % 256);
            fi.write(reinterpret_cast<char*>(&p), 1);
        }
        std::ofstream fl(lab, std::ios::binary);
        be32(fl, 2049);
        be32(fl, n);
        for (int i = 0; i < n; ++i) {
            unsigned char y = static_cast<unsigned char>(i % 10);
            fl.write(reinterpret_cast<char*>(&y), 1);
        }
    }
    auto eps = load_mnist_rows(img, lab);
    REQUIRE(eps.size() == 3);
    CHECK(eps[0].T == 28);
    CHECK(eps[0].feature_dim == 28);
    CHECK(eps[1].labels[0] == 1);
    CHECK(eps[0].features[5] == doctest::Approx(5.0 / 255.0));
    // limit parameter
    CHECK(load_mnist_rows(img, lab, 2).size() == 2);
    // bad magic rejected
    {
        std::ofstream fi(img, std::ios::binary | std::ios::trunc);
        fi << "garbage";
    }
    CHECK_THROWS(load_mnist_rows(img, lab));
    fs::remove(img);
    fs::remove(lab);
}
