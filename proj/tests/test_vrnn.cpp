#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <random>

#include "helpers.hpp"
#include "vshap/vrnn.hpp"

using namespace vshap;

namespace {

VrnnConfig small_cfg() {
    VrnnConfig c;
    c.input_dim = 3;
    c.hidden_dim = 4;
    c.latent_dim = 2;
    c.seed = 5;
    return c;
}

std::vector<double> seq(int T, int d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return testutil::random_vec(static_cast<std::size_t>(T) * d, rng, -1, 1);
}

}  // namespace

TEST_CASE("config validation") {
    VrnnConfig c = small_cfg();
    c.latent_dim = 0;
    CHECK_THROWS_AS(Vrnn::init(c), ConfigError);
    c = small_cfg();
    c.num_classes = 0;
    CHECK_THROWS_AS(Vrnn::init(c), ConfigError);
}

TEST_CASE("zero-initialized model has known outputs") {
    auto m = Vrnn::zero_init(small_cfg());
    auto h0 = Tensor::zeros({4});
    auto pri = m.prior_net(h0);
    for (double v : pri.mu.data()) CHECK(v == 0.0);
    for (double v : pri.log_var.data()) CHECK(v == 0.0);  // sigma = 1
    auto [logits, probs] = m.classify(Tensor::zeros({2}));
    CHECK(logits.at(0) == 0.0);
    CHECK(probs.at(0) == doctest::Approx(0.5));
}

TEST_CASE("reparameterization: z = mu + sigma * eps exactly") {
    auto m = Vrnn::init(small_cfg());
    GaussianParams p{Tensor::from({2}, {1.0, -2.0}),
                     Tensor::from({2}, {0.0, std::log(4.0)})};  // sigma 1, 2
    Rng rng(9);
    auto s = m.reparameterize(p, rng);
    for (int i = 0; i < 2; ++i) {
        const double sigma = i == 0 ? 1.0 : 2.0;
        CHECK(s.z.at(i) ==
              doctest::Approx(p.mu.at(i) + sigma * s.epsilon.at(i))
                  .epsilon(1e-12));
    }
    auto sm = m.reparameterize_mean(p);
    CHECK(sm.z.at(0) == 1.0);
    CHECK(sm.z.at(1) == -2.0);
    for (double e : sm.epsilon.data()) CHECK(e == 0.0);
}

TEST_CASE("sampled z has the declared moments (law of large numbers)") {
    auto m = Vrnn::init(small_cfg());
    GaussianParams p{Tensor::from({2}, {0.5, -1.0}),
                     Tensor::from({2}, {std::log(0.25), 0.0})};
    Rng rng(17);
    const long N = 100000;
    std::vector<double> mean(2, 0), m2(2, 0);
    for (long i = 0; i < N; ++i) {
        NoGradGuard ng;
        auto s = m.reparameterize(p, rng);
        for (int d = 0; d < 2; ++d) {
            const double x = s.z.at(d);
            const double delta = x - mean[d];
            mean[d] += delta / (i + 1);
            m2[d] += delta * (x - mean[d]);
        }
    }
    CHECK(mean[0] == doctest::Approx(0.5).epsilon(0.02));
    CHECK(mean[1] == doctest::Approx(-1.0).epsilon(0.02));
    CHECK(m2[0] / (N - 1) == doctest::Approx(0.25).epsilon(0.03));
    CHECK(m2[1] / (N - 1) == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("log-variance is clamped") {
    auto m = Vrnn::init(small_cfg());
    auto big = Tensor::full({4}, 50.0);
    auto pri = m.prior_net(big);
    for (double v : pri.log_var.data()) {
        CHECK(v >= -10.0);
        CHECK(v <= 10.0);
    }
}

TEST_CASE("prior depends only on h, posterior also on x") {
    auto m = Vrnn::init(small_cfg());
    auto h = Tensor::from({4}, {0.1, -0.2, 0.3, 0.0});
    auto x1 = Tensor::from({3}, {1, 0, 0});
    auto x2 = Tensor::from({3}, {0, 1, 0});
    auto post1 = m.encode(h, x1), post2 = m.encode(h, x2);
    bool differs = false;
    for (int i = 0; i < 2; ++i)
        if (post1.mu.at(i) != post2.mu.at(i)) differs = true;
    CHECK(differs);
}

TEST_CASE("mean-mode forward is deterministic; sample mode matches its rng") {
    auto m = Vrnn::init(small_cfg());
    const auto x = seq(6, 3, 2);
    auto a = m.forward_sequence(x, 6, ForwardMode::mean);
    auto b = m.forward_sequence(x, 6, ForwardMode::mean);
    for (int t = 0; t < 6; ++t)
        CHECK(a.steps[t].probs.at(0) == b.steps[t].probs.at(0));  // bitwise
    Rng r1(4), r2(4);
    auto c = m.forward_sequence(x, 6, ForwardMode::sample, &r1);
    auto d = m.forward_sequence(x, 6, ForwardMode::sample, &r2);
    for (int t = 0; t < 6; ++t)
        CHECK(c.steps[t].latent.z.at(0) == d.steps[t].latent.z.at(0));
}

TEST_CASE("forward_from equals forward_sequence split at a prefix") {
    auto m = Vrnn::init(small_cfg());
    const auto x = seq(8, 3, 12);
    auto full = m.forward_sequence(x, 8, ForwardMode::mean);
    // run prefix of 5, continue 3 more from its h
    std::vector<double> head(x.begin(), x.begin() + 5 * 3);
    auto pre = m.forward_sequence(head, 5, ForwardMode::mean);
    std::vector<double> tail(x.begin() + 5 * 3, x.end());
    auto cont = m.forward_from(pre.steps.back().h, tail, 3, ForwardMode::mean);
    for (int t = 0; t < 3; ++t) {
        CHECK(cont.steps[t].probs.at(0) ==
              doctest::Approx(full.steps[5 + t].probs.at(0)).epsilon(1e-12));
        CHECK(cont.steps[t].posterior.mu.at(0) ==
              doctest::Approx(full.steps[5 + t].posterior.mu.at(0))
                  .epsilon(1e-12));
    }
}

TEST_CASE("parameter gradients through a 2-step unrolled sequence") {
    auto m = Vrnn::init(small_cfg());
    const int T = 2, d = 3;
    const auto x0 = seq(T, d, 21);
    auto run = [&] {
        auto tr = m.forward_sequence(x0, T, ForwardMode::mean);
        return tr.steps.back().probs;
    };
    auto prob = run();
    backward(prob);
    auto params = m.parameters();
    double worst = 0.0;
    for (auto& [name, p] : params) {
        std::vector<double> analytic =
            p.grad().empty() ? std::vector<double>(p.size(), 0.0) : p.grad();
        std::vector<double> fd(p.size());
        auto& data = p.mutable_data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = data[i];
            const double h = 1e-5;
            NoGradGuard ng;
            data[i] = orig + h;
            const double up = run().at(0);
            data[i] = orig - h;
            const double dn = run().at(0);
            data[i] = orig;
            fd[i] = (up - dn) / (2.0 * h);
        }
        INFO(name);
        worst = std::max(worst, testutil::max_rel_err(analytic, fd, 1e-5));
    }
    CHECK(worst <= 1e-3);
}

TEST_CASE("checkpoint round-trip preserves outputs bitwise") {
    auto m = Vrnn::init(small_cfg());
    const std::string path = "vrnn_ckpt_test.bin";
    m.save(path);
    auto m2 = Vrnn::load(path);
    std::remove(path.c_str());
    const auto x = seq(5, 3, 33);
    auto a = m.forward_sequence(x, 5, ForwardMode::mean);
    auto b = m2.forward_sequence(x, 5, ForwardMode::mean);
    for (int t = 0; t < 5; ++t) {
        CHECK(a.steps[t].probs.at(0) == b.steps[t].probs.at(0));
        CHECK(a.steps[t].x_hat.at(1) == b.steps[t].x_hat.at(1));
    }
    CHECK(m2.config().hidden_dim == 4);
}

TEST_CASE("corrupt checkpoint is rejected") {
    const std::string path = "vrnn_bad_ckpt.bin";
    {
        std::FILE* f = std::fopen(path.c_str(), "wb");
        std::fputs("NOTATALLACHECKPOINT", f);
        std::fclose(f);
    }
    CHECK_THROWS(Vrnn::load(path));
    std::remove(path.c_str());
}

TEST_CASE("clone is independent of the original") {
    auto m = Vrnn::init(small_cfg());
    auto c = m.clone();
    auto params = m.parameters();
    for (auto& [name, p] : params)  // perturb a net the probs depend on
        if (name.rfind("enc.", 0) == 0) p.mutable_data()[0] += 1.0;
    const auto x = seq(4, 3, 8);
    auto a = m.forward_sequence(x, 4, ForwardMode::mean);
    auto b = c.forward_sequence(x, 4, ForwardMode::mean);
    CHECK(a.steps.back().probs.at(0) != b.steps.back().probs.at(0));
}

TEST_CASE("affine head extraction") {
    auto m = Vrnn::init(small_cfg());  // clf_hidden empty -> affine
    auto [w, b] = m.affine_head();
    CHECK(w.size() == 2);
    VrnnConfig c = small_cfg();
    c.clf_hidden = {8};
    auto deep = Vrnn::init(c);
    CHECK_THROWS_AS(deep.affine_head(), ConfigError);
}
