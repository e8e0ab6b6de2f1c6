// Benchmarks the OpenMP paths against their serial references:
// episode generation, batch gradients, KernelSHAP coalition evaluation.
#include <chrono>
#include <iostream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "vshap/data.hpp"
#include "vshap/shap.hpp"
#include "vshap/training.hpp"

using Clock = std::chrono::steady_clock;

namespace {

double seconds(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
}

template <typename F>
double timed(F&& f) {
    const auto t0 = Clock::now();
    f();
    return seconds(t0, Clock::now());
}

void row(const std::string& name, double serial, double parallel) {
    std::printf("%-28s %10.3fs %10.3fs %8.2fx\n", name.c_str(), serial,
                parallel, serial / parallel);
}

}  // namespace

int main() {
    int threads = 1;
#ifdef _OPENMP
    threads = omp_get_max_threads();
#endif
    std::printf("hardware threads: %d\n", threads);
    std::printf("%-28s %11s %11s %9s\n", "kernel", "serial", "parallel",
                "speedup");

    // --- episode generation ---
    vshap::GeneratorConfig gcfg;
    gcfg.n_variables = 10;
    gcfg.seed = 1;
    {
        vshap::Dataset a, b;
        const double ts = timed([&] { a = vshap::generate(gcfg, 2000, 1); });
        const double tp =
            timed([&] { b = vshap::generate(gcfg, 2000, threads); });
        row("generate (2000 episodes)", ts, tp);
    }

    // small model + data shared by the remaining benchmarks
    auto ds = vshap::generate(gcfg, 128, threads);
    vshap::split_dataset(ds, 0.7, 0.15, 0.15, 1);
    vshap::engineer_features(ds);
    vshap::VrnnConfig mcfg;
    mcfg.input_dim = ds.feature_dim;
    mcfg.hidden_dim = 24;
    mcfg.latent_dim = 6;
    mcfg.seed = 1;
    auto model = vshap::Vrnn::init(mcfg);

    // --- batch gradients (one epoch over the train split) ---
    {
        vshap::TrainConfig tcfg;
        tcfg.max_epochs = 1;
        tcfg.patience = 1;
        tcfg.seed = 1;
        double ts, tp;
        {
            auto m = model.clone();
            tcfg.threads = 1;
            ts = timed([&] { vshap::train(m, ds, tcfg); });
        }
        {
            auto m = model.clone();
            tcfg.threads = threads;
            tp = timed([&] { vshap::train(m, ds, tcfg); });
        }
        row("batch gradients (1 epoch)", ts, tp);
    }

    // --- KernelSHAP coalitions ---
    {
        const auto* ep = ds.split_episodes(2).front();
        const int step = std::min(15, ep->T - 1);
        auto bg = ds.split_episodes(0);
        vshap::ExplainConfig ecfg;
        ecfg.window = 4;
        ecfg.n_coalitions = 512;
        ecfg.bg_per_coalition = 8;
        ecfg.seed = 1;
        double ts, tp;
        ecfg.threads = 1;
        ts = timed([&] {
            vshap::explain_episode(model, *ep, step,
                                   {"prediction", "variance"}, bg, ecfg);
        });
        ecfg.threads = threads;
        tp = timed([&] {
            vshap::explain_episode(model, *ep, step,
                                   {"prediction", "variance"}, bg, ecfg);
        });
        row("kernel SHAP (512 coalitions)", ts, tp);
    }
    return 0;
}
