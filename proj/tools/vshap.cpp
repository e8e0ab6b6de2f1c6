// vshap: generate / train / explain / analyze / report pipeline driver.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "vshap/analysis.hpp"
#include "vshap/data.hpp"
#include "vshap/shap.hpp"
#include "vshap/training.hpp"
#include "vshap/variance.hpp"
#include "vshap/vrnn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void fail(const std::string& kind, const std::string& msg, int code) {
    json j = {{"error", kind}, {"message", msg}};
    std::cerr << j.dump() << "\n";
    std::exit(code);
}

std::vector<std::string> collect_args(int argc, char** argv) {
    return {argv + 1, argv + argc};
}

int split_id(const std::string& s) {
    if (s == "train") return 0;
    if (s == "val") return 1;
    if (s == "test") return 2;
    throw vshap::UsageError("unknown split '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"variance-SHAP pipeline for variational sequence models"};
    app.require_subcommand(1);
    const auto raw_args = collect_args(argc, argv);

    // ---- generate ----
    auto* gen = app.add_subcommand("generate", "synthesize a clinical-style dataset");
    std::string gen_out = "data";
    int gen_episodes = 1000, gen_vars = 10, gen_threads = 1;
    std::uint64_t gen_seed = 0;
    bool gen_clean = false;
    std::string gen_config;
    double gen_train = 0.7, gen_val = 0.15;
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--episodes", gen_episodes, "number of episodes")->check(CLI::PositiveNumber);
    gen->add_option("--vars", gen_vars, "number of clinical variables");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--threads", gen_threads, "generation threads");
    gen->add_option("--train-ratio", gen_train, "train split ratio");
    gen->add_option("--val-ratio", gen_val, "validation split ratio");
    gen->add_flag("--clean", gen_clean,
                  "measurement rate independent of severity");
    gen->add_option("--config", gen_config,
                    "generator config JSON file (overrides other options)");

    // ---- train ----
    auto* tr = app.add_subcommand("train", "fit the variational sequence model");
    std::string tr_data = "data", tr_out = "run";
    vshap::TrainConfig tcfg;
    int tr_hidden = 32, tr_latent = 8;
    tr->add_option("--data", tr_data, "dataset directory");
    tr->add_option("--out", tr_out, "output directory");
    tr->add_option("--hidden", tr_hidden, "recurrent state size");
    tr->add_option("--latent", tr_latent, "latent dimension");
    tr->add_option("--epochs", tcfg.max_epochs, "max epochs");
    tr->add_option("--patience", tcfg.patience, "early-stopping patience");
    tr->add_option("--batch", tcfg.batch_size, "batch size");
    tr->add_option("--lr", tcfg.lr, "Adam learning rate");
    tr->add_option("--lambda", tcfg.lambda, "weight-decay coefficient");
    tr->add_option("--clip", tcfg.clip_norm, "gradient-norm clip");
    tr->add_option("--threads", tcfg.threads, "gradient threads");
    tr->add_option("--seed", tcfg.seed, "training seed");

    // ---- explain ----
    auto* ex = app.add_subcommand("explain", "KernelSHAP attributions per episode");
    std::string ex_data = "data", ex_model = "run/model.bin", ex_out = "explain";
    std::string ex_split = "test", ex_method = "delta";
    int ex_step = 16, ex_limit = 0, ex_bg_episodes = 32;
    vshap::ExplainConfig ecfg;
    ex->add_option("--data", ex_data, "dataset directory");
    ex->add_option("--model", ex_model, "model checkpoint");
    ex->add_option("--out", ex_out, "output directory");
    ex->add_option("--split", ex_split, "split to explain (train|val|test)");
    ex->add_option("--step", ex_step, "timestep to explain");
    ex->add_option("--limit", ex_limit, "max episodes (0 = all eligible)");
    ex->add_option("--window", ecfg.window, "trailing window size");
    ex->add_option("--coalitions", ecfg.n_coalitions,
                   "coalition budget (0 = full enumeration)");
    ex->add_option("--bg", ecfg.bg_per_coalition,
                   "background rows per evaluation (0 = all)");
    ex->add_option("--bg-episodes", ex_bg_episodes,
                   "train episodes forming the background pool");
    ex->add_option("--seed", ecfg.seed, "sampling seed");
    ex->add_option("--threads", ecfg.threads, "coalition threads");
    ex->add_flag("--logit", ecfg.logit_space, "variance of the logit, not the probability");
    ex->add_option("--method", ex_method, "variance method: delta|exact");

    // ---- analyze ----
    auto* an = app.add_subcommand("analyze",
                                  "interval-vs-attribution relation analysis");
    std::string an_data = "data", an_attr = "explain/attributions.csv";
    std::string an_out = "analysis";
    int an_step = 16;
    an->add_option("--data", an_data, "dataset directory");
    an->add_option("--attributions", an_attr, "attribution CSV");
    an->add_option("--step", an_step, "analyzed timestep");
    an->add_option("--out", an_out, "output directory");

    // ---- report ----
    auto* rp = app.add_subcommand("report",
                                  "avoidable / should-have measurement report");
    std::string rp_data = "data", rp_attr = "explain/attributions.csv";
    std::string rp_out = "report";
    int rp_step = 16;
    double tau_p = std::nan(""), tau_v = std::nan(""), tau_m = std::nan("");
    rp->add_option("--data", rp_data, "dataset directory");
    rp->add_option("--attributions", rp_attr, "attribution CSV");
    rp->add_option("--step", rp_step, "analyzed timestep");
    rp->add_option("--out", rp_out, "output directory");
    rp->add_option("--tau-p", tau_p, "prediction-attribution threshold");
    rp->add_option("--tau-v", tau_v, "variance-attribution threshold");
    rp->add_option("--tau-m", tau_m, "should-have threshold");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::exit(app.exit(e));
    } catch (const CLI::ParseError& e) {
        fail("usage", e.what(), 2);
    }

    try {
        if (*gen) {
            vshap::GeneratorConfig cfg;
            if (!gen_config.empty()) {
                std::ifstream f(gen_config);
                if (!f) throw vshap::UsageError("cannot open " + gen_config);
                std::stringstream ss;
                ss << f.rdbuf();
                cfg = vshap::GeneratorConfig::from_json(ss.str());
            } else {
                cfg.n_variables = gen_vars;
                cfg.severity_dependent_rate = !gen_clean;
            }
            cfg.seed = gen_seed;
            cfg.fill_defaults();
            auto ds = vshap::generate(cfg, gen_episodes, gen_threads);
            vshap::split_dataset(ds, gen_train, gen_val,
                                 1.0 - gen_train - gen_val, gen_seed);
            vshap::engineer_features(ds);
            vshap::save_dataset(ds, gen_out);
            vshap::write_manifest(gen_out, "generate", gen_seed,
                                  cfg.to_json(), raw_args);
            long pos = 0, total = 0;
            for (const auto& ep : ds.episodes) {
                for (int y : ep.labels) pos += y;
                total += ep.T;
            }
            json out = {{"episodes", gen_episodes},
                        {"positive_rate", double(pos) / double(total)},
                        {"out", gen_out}};
            std::cout << out.dump() << "\n";
        } else if (*tr) {
            auto ds = vshap::load_dataset(tr_data);
            vshap::VrnnConfig mcfg;
            mcfg.input_dim = ds.feature_dim;
            mcfg.hidden_dim = tr_hidden;
            mcfg.latent_dim = tr_latent;
            mcfg.seed = tcfg.seed;
            auto model = vshap::Vrnn::init(mcfg);
            fs::create_directories(tr_out);
            std::ofstream log(fs::path(tr_out) / "train_log.ndjson");
            auto result = vshap::train(model, ds, tcfg, &log);
            model.save((fs::path(tr_out) / "model.bin").string());
            json cfg_dump = {{"hidden", tr_hidden},   {"latent", tr_latent},
                             {"lr", tcfg.lr},         {"lambda", tcfg.lambda},
                             {"batch", tcfg.batch_size},
                             {"epochs", tcfg.max_epochs},
                             {"patience", tcfg.patience},
                             {"seed", tcfg.seed}};
            vshap::write_manifest(tr_out, "train", tcfg.seed, cfg_dump.dump(),
                                  raw_args);
            json out = {{"best_epoch", result.best_epoch},
                        {"best_val_auroc", result.best_auroc},
                        {"model", (fs::path(tr_out) / "model.bin").string()}};
            std::cout << out.dump() << "\n";
        } else if (*ex) {
            if (ex_method == "delta")
                ecfg.method = vshap::VarianceMethod::delta;
            else if (ex_method == "exact")
                ecfg.method = vshap::VarianceMethod::exact_logit;
            else
                throw vshap::UsageError("unknown variance method '" +
                                        ex_method + "'");
            auto ds = vshap::load_dataset(ex_data);
            auto model = vshap::Vrnn::load(ex_model);
            auto eligible = ds.split_episodes(split_id(ex_split));
            std::erase_if(eligible, [&](const vshap::Episode* e) {
                return e->T <= ex_step;
            });
            if (eligible.empty())
                throw vshap::UsageError(
                    "no episodes in split '" + ex_split +
                    "' reach step " + std::to_string(ex_step));
            if (ex_limit > 0 &&
                static_cast<int>(eligible.size()) > ex_limit)
                eligible.resize(ex_limit);
            auto bg_pool = ds.split_episodes(0);
            std::erase_if(bg_pool, [&](const vshap::Episode* e) {
                return e->T <= ex_step;
            });
            if (ex_bg_episodes > 0 &&
                static_cast<int>(bg_pool.size()) > ex_bg_episodes)
                bg_pool.resize(ex_bg_episodes);
            std::vector<vshap::AttributionRow> rows;
            for (const auto* ep : eligible) {
                auto atts = vshap::explain_episode(
                    model, *ep, ex_step, {"prediction", "variance"}, bg_pool,
                    ecfg);
                for (const auto& a : atts) {
                    auto r = vshap::attribution_rows(ep->id, a);
                    rows.insert(rows.end(), r.begin(), r.end());
                }
            }
            fs::create_directories(ex_out);
            vshap::save_attribution_csv(
                rows, (fs::path(ex_out) / "attributions.csv").string());
            vshap::save_attribution_json(
                rows, (fs::path(ex_out) / "attributions.json").string(),
                ecfg.seed, ecfg.n_coalitions, ecfg.window);
            json cfg_dump = {{"step", ex_step},
                             {"window", ecfg.window},
                             {"coalitions", ecfg.n_coalitions},
                             {"bg", ecfg.bg_per_coalition},
                             {"method", ex_method},
                             {"logit", ecfg.logit_space},
                             {"seed", ecfg.seed}};
            vshap::write_manifest(ex_out, "explain", ecfg.seed,
                                  cfg_dump.dump(), raw_args);
            json out = {{"episodes_explained", eligible.size()},
                        {"rows", rows.size()},
                        {"out", ex_out}};
            std::cout << out.dump() << "\n";
        } else if (*an) {
            auto ds = vshap::load_dataset(an_data);
            auto rows = vshap::load_attribution_csv(an_attr);
            auto rel = vshap::relation_analysis(rows, ds, an_step);
            fs::create_directories(an_out);
            vshap::emit_plot_data(rel, rows, an_out);
            json vars = json::array();
            for (const auto& v : rel.variables) {
                json jv = {{"variable", v.variable},
                           {"skipped", v.skipped},
                           {"abnormal", v.abnormal}};
                if (!v.skipped) {
                    jv["interval_rho"] = v.interval_rho.rho;
                    jv["p_value"] = v.interval_rho.p_value;
                    jv["n"] = v.interval_rho.n;
                    jv["quartile_mean_phi"] = v.quartile_mean_phi;
                    jv["quartile_count"] = v.quartile_count;
                }
                vars.push_back(jv);
            }
            json summary = {{"step", an_step}, {"variables", vars}};
            std::ofstream f(fs::path(an_out) / "relation_summary.json");
            f << summary.dump(2) << "\n";
            json cfg_dump = {{"step", an_step}, {"attributions", an_attr}};
            vshap::write_manifest(an_out, "analyze", 0, cfg_dump.dump(),
                                  raw_args);
            std::cout << summary.dump() << "\n";
        } else if (*rp) {
            auto ds = vshap::load_dataset(rp_data);
            auto rows = vshap::load_attribution_csv(rp_attr);
            auto rep =
                vshap::measurement_report(rows, ds, rp_step, tau_p, tau_v,
                                          tau_m);
            fs::create_directories(rp_out);
            vshap::save_report_csv(
                rep, (fs::path(rp_out) / "report.csv").string());
            const std::string table = vshap::format_report_table(rep);
            {
                std::ofstream f(fs::path(rp_out) / "report.txt");
                f << table;
            }
            json cfg_dump = {{"step", rp_step},
                             {"tau_p", rep.tau_p},
                             {"tau_v", rep.tau_v},
                             {"tau_m", rep.tau_m},
                             {"attributions", rp_attr}};
            vshap::write_manifest(rp_out, "report", 0, cfg_dump.dump(),
                                  raw_args);
            std::cout << table;
        }
    } catch (const vshap::UsageError& e) {
        fail("usage", e.what(), 2);
    } catch (const vshap::ConfigError& e) {
        fail("config", e.what(), 2);
    } catch (const std::exception& e) {
        fail("runtime", e.what(), 1);
    }
    return 0;
}
