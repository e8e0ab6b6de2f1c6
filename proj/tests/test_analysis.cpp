#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "vshap/analysis.hpp"

using namespace vshap;

namespace {

// dataset with hand-set masks/intervals at the analyzed step
Dataset toy_dataset(int n_episodes, int K, int T) {
    Dataset ds;
    ds.K = K;
    ds.feature_dim = 3 * K;
    for (int i = 0; i < n_episodes; ++i) {
        Episode ep;
        ep.id = "ep" + std::to_string(i);
        ep.T = T;
        ep.K = K;
        ep.feature_dim = 3 * K;
        ep.features.assign(static_cast<std::size_t>(T) * 3 * K, 0.0);
        ep.labels.assign(T, 0);
        ds.episodes.push_back(std::move(ep));
    }
    ds.split.assign(n_episodes, 2);
    return ds;
}

void set_feat(Episode& ep, int t, int k, int c, double v) {
    ep.features[static_cast<std::size_t>(t) * ep.feature_dim + 3 * k + c] = v;
}

}  // namespace

TEST_CASE("spearman: exact monotone and anti-monotone") {
    std::vector<double> x = {1, 2, 3, 4, 5, 6, 7, 8};
    std::vector<double> y = {2, 4, 6, 8, 10, 12, 14, 16};
    auto up = spearman(x, y);
    CHECK(up.rho == doctest::Approx(1.0));
    CHECK(up.p_value < 1e-6);
    std::vector<double> yr(y.rbegin(), y.rend());
    auto dn = spearman(x, yr);
    CHECK(dn.rho == doctest::Approx(-1.0));
    // independent noise: |rho| small, p large
    std::vector<double> xr, yn;
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 400; ++i) {
        xr.push_back(u(rng));
        yn.push_back(u(rng));
    }
    auto nil = spearman(xr, yn);
    CHECK(std::fabs(nil.rho) < 0.15);
    CHECK(nil.p_value > 0.01);
}

TEST_CASE("spearman handles ties and degenerate input") {
    auto tied = spearman({1, 1, 2, 2, 3, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(tied.rho > 0.8);
    auto flat = spearman({1, 1, 1, 1}, {1, 2, 3, 4});
    CHECK(flat.rho == 0.0);
    CHECK(flat.p_value == 1.0);
    CHECK_THROWS_AS(spearman({1, 2}, {1}), UsageError);
}

TEST_CASE("spearman p-value sanity against the large-sample normal") {
    // for n=100 and rho ~ 0.3 the t-based p should be near 0.0024
    std::vector<double> x, y;
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0, 1);
    for (int i = 0; i < 100; ++i) {
        const double e = g(rng);
        x.push_back(e);
        y.push_back(0.45 * e + g(rng));
    }
    auto r = spearman(x, y);
    CHECK(r.p_value < 0.05);
    CHECK(r.p_value > 1e-8);
}

TEST_CASE("attribution rows round-trip through csv and json") {
    namespace fs = std::filesystem;
    Attribution a;
    a.game = "variance";
    a.step = 5;
    a.base_value = 0.125;
    a.window_start = 2;
    a.window = 4;
    a.n_vars = 2;
    a.phi.assign(4 * 6, 0.0);
    for (std::size_t i = 0; i < a.phi.size(); ++i)
        a.phi[i] = 0.01 * double(i) - 0.1;
    auto rows = attribution_rows("ep7", a);
    CHECK(rows.size() == 24);
    CHECK(rows[0].timestep == 2);
    CHECK(rows.back().timestep == 5);
    CHECK(rows[5].channel == 2);
    const std::string csv = "attr_roundtrip_test.csv";
    save_attribution_csv(rows, csv);
    auto rows2 = load_attribution_csv(csv);
    fs::remove(csv);
    REQUIRE(rows2.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows2[i].episode_id == rows[i].episode_id);
        CHECK(rows2[i].phi == rows[i].phi);  // bitwise via max precision
        CHECK(rows2[i].channel == rows[i].channel);
    }
    const std::string js = "attr_roundtrip_test.json";
    save_attribution_json(rows, js, 9, 128, 4);
    std::ifstream f(js);
    std::string all((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
    fs::remove(js);
    CHECK(all.find("\"seed\": 9") != std::string::npos);
    CHECK(all.find("\"attributions\"") != std::string::npos);
}

TEST_CASE("relation analysis recovers a planted monotone relation") {
    const int n = 60, K = 2, T = 10, step = 6;
    auto ds = toy_dataset(n, K, T);
    std::vector<AttributionRow> rows;
    for (int i = 0; i < n; ++i) {
        auto& ep = ds.episodes[i];
        const double interval = double(i) / n;
        set_feat(ep, step, 0, kChannelInterval, interval);
        set_feat(ep, step, 1, kChannelInterval, interval);
        // variable 0: phi rises with interval; variable 1: falls
        rows.push_back({ep.id, step, "variance", step, 0, kChannelInterval,
                        interval * 2.0, 0.0});
        rows.push_back({ep.id, step, "variance", step, 1, kChannelInterval,
                        -interval, 0.0});
    }
    auto rel = relation_analysis(rows, ds, step);
    REQUIRE(rel.variables.size() == 2);
    CHECK(rel.variables[0].interval_rho.rho == doctest::Approx(1.0));
    CHECK(rel.variables[0].interval_rho.p_value < 0.05);
    CHECK(!rel.variables[0].abnormal);
    CHECK(rel.variables[1].interval_rho.rho == doctest::Approx(-1.0));
    CHECK(rel.variables[1].abnormal);
    // quartile means are monotone for variable 0
    const auto& q = rel.variables[0].quartile_mean_phi;
    CHECK(q[0] < q[1]);
    CHECK(q[1] < q[2]);
    CHECK(q[2] < q[3]);
    long total = 0;
    for (long c : rel.variables[0].quartile_count) total += c;
    CHECK(total == n);
}

TEST_CASE("relation analysis skips undersized cohorts") {
    auto ds = toy_dataset(10, 1, 8);
    std::vector<AttributionRow> rows;
    for (int i = 0; i < 10; ++i)
        rows.push_back({ds.episodes[i].id, 4, "variance", 4, 0,
                        kChannelInterval, 0.1, 0.0});
    auto rel = relation_analysis(rows, ds, 4);
    REQUIRE(rel.variables.size() == 1);
    CHECK(rel.variables[0].skipped);
}

TEST_CASE("measurement report: planted avoidable and should-have cases") {
    const int step = 3;
    auto ds = toy_dataset(4, 2, 6);
    // ep0: v0 measured, tiny attributions -> avoidable
    set_feat(ds.episodes[0], step, 0, kChannelMask, 1.0);
    // ep1: v0 measured, large attributions -> justified
    set_feat(ds.episodes[1], step, 0, kChannelMask, 1.0);
    // ep2: v0 missing, large variance phi on the mask channel -> should-have
    // ep3: v0 missing, tiny phi -> fine
    std::vector<AttributionRow> rows;
    auto push = [&](int epi, const std::string& game, int ch, double phi) {
        rows.push_back({"ep" + std::to_string(epi), step, game, step, 0, ch,
                        phi, 0.0});
    };
    for (int epi = 0; epi < 4; ++epi)
        for (int ch = 0; ch < 3; ++ch) {
            push(epi, "prediction", ch, epi == 1 ? 0.5 : 1e-4);
            push(epi, "variance", ch, (epi == 1 || epi == 2) ? 0.5 : 1e-4);
        }
    auto rep = measurement_report(rows, ds, step, 0.01, 0.01, 0.01);
    REQUIRE(rep.variables.size() >= 1);
    const auto& v0 = rep.variables[0];
    CHECK(v0.n_existing == 2);
    CHECK(v0.n_avoidable == 1);
    CHECK(v0.pct_avoidable == doctest::Approx(50.0));
    CHECK(v0.n_missing == 2);
    CHECK(v0.n_should_have == 1);
    CHECK(v0.pct_should_have == doctest::Approx(50.0));
    // tau = +inf: nothing should-have, everything measured is avoidable
    auto hard = measurement_report(rows, ds, step, 1e9, 1e9, 1e9);
    CHECK(hard.variables[0].n_avoidable == 2);
    CHECK(hard.variables[0].n_should_have == 0);
    // tau = 0 (strict <): nothing avoidable
    auto zero = measurement_report(rows, ds, step, 0.0, 0.0, 0.0);
    CHECK(zero.variables[0].n_avoidable == 0);
}

TEST_CASE("nan thresholds fall back to percentile defaults") {
    const int step = 2;
    auto ds = toy_dataset(8, 1, 4);
    std::vector<AttributionRow> rows;
    for (int i = 0; i < 8; ++i) {
        set_feat(ds.episodes[i], step, 0, kChannelMask, i % 2 ? 1.0 : 0.0);
        for (int ch = 0; ch < 3; ++ch) {
            rows.push_back({ds.episodes[i].id, step, "prediction", step, 0,
                            ch, 0.1 * (i + 1), 0.0});
            rows.push_back({ds.episodes[i].id, step, "variance", step, 0, ch,
                            0.05 * (i + 1), 0.0});
        }
    }
    auto rep = measurement_report(rows, ds, step, std::nan(""), std::nan(""),
                                  std::nan(""));
    CHECK(rep.tau_p > 0.0);
    CHECK(rep.tau_v > 0.0);
    CHECK(rep.tau_m > 0.0);
}

TEST_CASE("report table has the fixed column structure") {
    auto ds = toy_dataset(2, 2, 4);
    std::vector<AttributionRow> rows = {
        {"ep0", 2, "prediction", 2, 0, 0, 0.1, 0.0},
        {"ep0", 2, "variance", 2, 0, 0, 0.1, 0.0}};
    auto rep = measurement_report(rows, ds, 2, 0.5, 0.5, 0.5);
    const std::string table = format_report_table(rep);
    CHECK(table.find("variable\t#avoidable\t#existing\t%\t#should-have\t"
                     "#missing\t%") != std::string::npos);
    namespace fs = std::filesystem;
    const std::string csv = "report_test.csv";
    save_report_csv(rep, csv);
    std::ifstream f(csv);
    std::string header;
    std::getline(f, header);
    fs::remove(csv);
    CHECK(header ==
          "variable,n_avoidable,n_existing,pct_avoidable,n_should_have,"
          "n_missing,pct_should_have");
}

TEST_CASE("report recomputed from exported csv matches bit-for-bit") {
    const int step = 2;
    auto ds = toy_dataset(12, 2, 5);
    std::vector<AttributionRow> rows;
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (int i = 0; i < 12; ++i)
        for (int k = 0; k < 2; ++k) {
            set_feat(ds.episodes[i], step, k, kChannelMask,
                     (i + k) % 2 ? 1.0 : 0.0);
            for (int ch = 0; ch < 3; ++ch) {
                rows.push_back({ds.episodes[i].id, step, "prediction", step,
                                k, ch, u(rng), 0.0});
                rows.push_back({ds.episodes[i].id, step, "variance", step, k,
                                ch, u(rng), 0.0});
            }
        }
    namespace fs = std::filesystem;
    const std::string csv = "report_repro_test.csv";
    save_attribution_csv(rows, csv);
    auto rows2 = load_attribution_csv(csv);
    fs::remove(csv);
    auto a = measurement_report(rows, ds, step, std::nan(""), std::nan(""),
                                std::nan(""));
    auto b = measurement_report(rows2, ds, step, std::nan(""), std::nan(""),
                                std::nan(""));
    CHECK(a.tau_p == b.tau_p);  // bitwise
    CHECK(a.tau_v == b.tau_v);
    CHECK(a.tau_m == b.tau_m);
    CHECK(format_report_table(a) == format_report_table(b));
}

TEST_CASE("plot data files are written with headers") {
    namespace fs = std::filesystem;
    const std::string dir = "plotdata_test";
    emit_plot_data(RelationSummary{}, {}, dir);
    std::ifstream f1(fs::path(dir) / "relation_records.csv");
    std::string h1;
    std::getline(f1, h1);
    CHECK(h1 == "episode_id,step,variable,channel,x,phi");
    std::ifstream f2(fs::path(dir) / "pred_var_scatter.csv");
    std::string h2;
    std::getline(f2, h2);
    CHECK(h2 == "episode_id,variable,phi_pred,phi_var");
    fs::remove_all(dir);
}

TEST_CASE("manifest carries the config hash") {
    namespace fs = std::filesystem;
    CHECK(fnv1a_hex("") == "cbf29ce484222325");
    CHECK(fnv1a_hex("a") != fnv1a_hex("b"));
    const std::string dir = "manifest_test";
    write_manifest(dir, "generate", 7, "{\"episodes\":5}", {"generate"});
    std::ifstream f(fs::path(dir) / "manifest.json");
    std::string all((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
    fs::remove_all(dir);
    CHECK(all.find("\"subcommand\": \"generate\"") != std::string::npos);
    CHECK(all.find("\"config_hash\"") != std::string::npos);
    CHECK(all.find(fnv1a_hex("{\"episodes\":5}")) != std::string::npos);
}
