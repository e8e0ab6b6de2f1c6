#include "vshap/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vshap {

namespace {
constexpr double kHalfLog2Pi = 0.9189385332046727;
}

Tensor kl_divergence(const GaussianParams& post, const GaussianParams& prior) {
    if (post.mu.size() != prior.mu.size())
        throw ShapeError("kl_divergence: dimension mismatch");
    Tensor var_post = exp(post.log_var);
    Tensor var_prior = exp(prior.log_var);
    Tensor diff = sub(post.mu, prior.mu);
    Tensor ratio = div(add(var_post, square(diff)), var_prior);
    Tensor term = add(sub(prior.log_var, post.log_var), ratio);
    return mul(Tensor::scalar(0.5), sum(sub(term, Tensor::scalar(1.0))));
}

Tensor sigma_nll(const Tensor& x_hat, const Tensor& x, double sigma_min) {
    if (x_hat.shape() != x.shape())
        throw ShapeError("sigma_nll: shape mismatch");
    Tensor diff = sub(x_hat, x);
    Tensor sigma =
        clamp(abs(diff), sigma_min, std::numeric_limits<double>::infinity());
    Tensor quad = div(square(diff), mul(Tensor::scalar(2.0), square(sigma)));
    Tensor per = add(add(log(sigma), quad), Tensor::scalar(kHalfLog2Pi));
    return sum(per);
}

Tensor clf_loss(const Tensor& probs, int label) {
    if (probs.size() == 1) {
        Tensor p = clamp(probs, 1e-7, 1.0 - 1e-7);
        if (label == 1) return neg(log(p));
        return neg(log(sub(Tensor::scalar(1.0), p)));
    }
    if (label < 0 || label >= static_cast<int>(probs.size()))
        throw UsageError("clf_loss: label out of range");
    Tensor p = clamp(slice(probs, label, 1), 1e-7, 1.0 - 1e-7);
    return neg(log(p));
}

Tensor recon_loss(const Tensor& x_hat, const Tensor& x) {
    if (x_hat.shape() != x.shape())
        throw ShapeError("recon_loss: shape mismatch");
    return mean(square(sub(x_hat, x)));
}

TotalLoss total_loss(const Vrnn& model, const ForwardTrace& trace,
                     const Episode& episode, double lambda) {
    const int T = static_cast<int>(trace.steps.size());
    if (T != episode.T) throw UsageError("total_loss: trace/episode mismatch");
    const int d = model.config().input_dim;
    std::vector<Tensor> klds, nlls, clfs, recons;
    for (int t = 0; t < T; ++t) {
        const StepTrace& st = trace.steps[t];
        Tensor x_t = Tensor::from(
            {d}, std::vector<double>(
                     episode.features.begin() + static_cast<std::size_t>(t) * d,
                     episode.features.begin() +
                         static_cast<std::size_t>(t + 1) * d));
        klds.push_back(kl_divergence(st.posterior, st.prior));
        nlls.push_back(sigma_nll(st.x_hat, x_t));
        clfs.push_back(clf_loss(st.probs, episode.labels[t]));
        recons.push_back(recon_loss(st.x_hat, x_t));
    }
    const Tensor inv_t = Tensor::scalar(1.0 / T);
    auto avg = [&inv_t](const std::vector<Tensor>& v) {
        Tensor s = v[0];
        for (std::size_t i = 1; i < v.size(); ++i) s = add(s, v[i]);
        return mul(s, inv_t);
    };
    auto component = [](const char* name, const std::function<Tensor()>& f) {
        try {
            return f();
        } catch (const NumericError& e) {
            throw NumericError(std::string("loss component '") + name +
                               "' diverged: " + e.what());
        }
    };
    Tensor kld = component("kld", [&] { return avg(klds); });
    Tensor nll = component("sigma_nll", [&] { return avg(nlls); });
    Tensor clf = component("clf", [&] { return avg(clfs); });
    Tensor recon = component("recon", [&] { return avg(recons); });
    Tensor reg = Tensor::scalar(0.0);
    for (const auto& [name, p] : model.parameters())
        reg = add(reg, sum(square(p)));
    Tensor total = add(add(add(add(kld, nll), clf), recon),
                       mul(Tensor::scalar(lambda), reg));
    TotalLoss out;
    out.total = total;
    out.parts.kld = kld.item();
    out.parts.sigma_nll = nll.item();
    out.parts.clf = clf.item();
    out.parts.recon = recon.item();
    out.parts.reg = reg.item();
    out.parts.lambda = lambda;
    out.parts.total = total.item();
    return out;
}

double auroc(const std::vector<double>& scores,
             const std::vector<int>& labels) {
    const std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&scores](std::size_t a, std::size_t b) {
        return scores[a] < scores[b];
    });
    // average ranks over ties
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double r = 0.5 * (i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
        i = j + 1;
    }
    double pos_rank = 0;
    long npos = 0;
    for (std::size_t k = 0; k < n; ++k)
        if (labels[k] == 1) {
            pos_rank += rank[k];
            ++npos;
        }
    const long nneg = static_cast<long>(n) - npos;
    if (npos == 0 || nneg == 0) return 0.5;
    return (pos_rank - npos * (npos + 1.0) / 2.0) / (double(npos) * nneg);
}

double evaluate_auroc(const Vrnn& model,
                      const std::vector<const Episode*>& eps) {
    NoGradGuard ng;
    std::vector<double> scores;
    std::vector<int> labels;
    for (const Episode* ep : eps) {
        ForwardTrace tr = model.forward_sequence(ep->features, ep->T,
                                                 ForwardMode::mean);
        for (int t = 0; t < ep->T; ++t) {
            scores.push_back(tr.steps[t].probs.at(0));
            labels.push_back(ep->labels[t]);
        }
    }
    return auroc(scores, labels);
}

namespace {

struct Adam {
    double lr, beta1, beta2, eps;
    std::vector<double> m, v;
    long t = 0;

    void step(std::vector<std::pair<std::string, Tensor>>& params,
              const std::vector<double>& grad) {
        if (m.empty()) {
            m.assign(grad.size(), 0.0);
            v.assign(grad.size(), 0.0);
        }
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, t);
        const double bc2 = 1.0 - std::pow(beta2, t);
        std::size_t off = 0;
        for (auto& [name, p] : params) {
            auto& d = p.mutable_data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                const double g = grad[off + i];
                m[off + i] = beta1 * m[off + i] + (1.0 - beta1) * g;
                v[off + i] = beta2 * v[off + i] + (1.0 - beta2) * g * g;
                d[i] -= lr * (m[off + i] / bc1) /
                        (std::sqrt(v[off + i] / bc2) + eps);
            }
            off += d.size();
        }
    }
};

// forward + backward on a private weight copy; grads flattened in
// parameter order
std::vector<double> episode_gradients(const Vrnn& model, const Episode& ep,
                                      double lambda, std::uint64_t ep_seed,
                                      LossBreakdown& parts,
                                      std::vector<double>& step_scores) {
    Vrnn local = model.clone();
    Rng rng(ep_seed);
    ForwardTrace tr =
        local.forward_sequence(ep.features, ep.T, ForwardMode::sample, &rng);
    TotalLoss tl = total_loss(local, tr, ep, lambda);
    parts = tl.parts;
    step_scores.clear();
    if (local.config().num_classes == 1)
        for (const auto& st : tr.steps) step_scores.push_back(st.probs.at(0));
    auto params = local.parameters();
    for (auto& [name, p] : params) p.zero_grad();
    backward(tl.total);
    std::vector<double> flat;
    for (const auto& [name, p] : params)
        flat.insert(flat.end(), p.grad().begin(), p.grad().end());
    return flat;
}

}  // namespace

TrainResult train(Vrnn& model, const Dataset& ds, const TrainConfig& cfg,
                  std::ostream* ndjson_log) {
    auto train_eps = ds.split_episodes(0);
    auto val_eps = ds.split_episodes(1);
    if (train_eps.empty()) throw UsageError("train: empty training split");

    TrainResult res;
    Adam adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, {}, {}, 0};
    Rng shuffle_rng(cfg.seed);
    Vrnn best = model.clone();
    int since_best = 0;

    auto log_line = [&](const EpochLog& el) {
        res.logs.push_back(el);
        if (!ndjson_log) return;
        nlohmann::json j;
        j["epoch"] = el.epoch;
        j["split"] = el.split;
        j["kld"] = el.loss.kld;
        j["sigma_nll"] = el.loss.sigma_nll;
        j["clf"] = el.loss.clf;
        j["recon"] = el.loss.recon;
        j["reg"] = el.loss.reg;
        j["total"] = el.loss.total;
        j["auroc"] = el.auroc;
        (*ndjson_log) << j.dump() << "\n";
    };

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order(train_eps.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        LossBreakdown epoch_mean{};
        std::vector<double> epoch_scores;
        std::vector<int> epoch_labels;
        long n_episodes = 0;
        auto params = model.parameters();

        for (std::size_t start = 0; start < order.size();
             start += cfg.batch_size) {
            const std::size_t nb =
                std::min<std::size_t>(cfg.batch_size, order.size() - start);
            std::vector<std::vector<double>> grads(nb);
            std::vector<LossBreakdown> parts(nb);
            std::vector<std::vector<double>> scores(nb);
            std::exception_ptr err;
#pragma omp parallel for schedule(dynamic) num_threads(cfg.threads) if (cfg.threads > 1)
            for (long b = 0; b < static_cast<long>(nb); ++b) {
                try {
                    const Episode& ep = *train_eps[order[start + b]];
                    const std::uint64_t ep_seed =
                        cfg.seed ^ (0x2545f4914f6cdd1dULL *
                                    (epoch * 131071ULL + order[start + b] + 1));
                    grads[b] = episode_gradients(model, ep, cfg.lambda,
                                                 ep_seed, parts[b], scores[b]);
                } catch (...) {
#pragma omp critical
                    if (!err) err = std::current_exception();
                }
            }
            if (err) std::rethrow_exception(err);

            // fixed-order reduction; identical for any thread count
            std::vector<double> acc(grads[0].size(), 0.0);
            for (std::size_t b = 0; b < nb; ++b) {
                for (std::size_t i = 0; i < acc.size(); ++i)
                    acc[i] += grads[b][i];
                epoch_mean.kld += parts[b].kld;
                epoch_mean.sigma_nll += parts[b].sigma_nll;
                epoch_mean.clf += parts[b].clf;
                epoch_mean.recon += parts[b].recon;
                epoch_mean.reg += parts[b].reg;
                epoch_mean.total += parts[b].total;
                const Episode& ep = *train_eps[order[start + b]];
                for (int t = 0; t < ep.T && t < (int)scores[b].size(); ++t) {
                    epoch_scores.push_back(scores[b][t]);
                    epoch_labels.push_back(ep.labels[t]);
                }
                ++n_episodes;
            }
            const double inv = 1.0 / static_cast<double>(nb);
            for (auto& g : acc) g *= inv;
            double norm = 0.0;
            for (double g : acc) norm += g * g;
            norm = std::sqrt(norm);
            if (norm > cfg.clip_norm)
                for (auto& g : acc) g *= cfg.clip_norm / norm;
            adam.step(params, acc);
        }

        const double inv_n = 1.0 / static_cast<double>(n_episodes);
        epoch_mean.kld *= inv_n;
        epoch_mean.sigma_nll *= inv_n;
        epoch_mean.clf *= inv_n;
        epoch_mean.recon *= inv_n;
        epoch_mean.reg *= inv_n;
        epoch_mean.total *= inv_n;
        epoch_mean.lambda = cfg.lambda;
        log_line({epoch, "train", epoch_mean,
                  auroc(epoch_scores, epoch_labels)});

        if (!val_eps.empty()) {
            const double va = evaluate_auroc(model, val_eps);
            EpochLog vl{epoch, "val", {}, va};
            vl.loss.lambda = cfg.lambda;
            log_line(vl);
            if (va > res.best_auroc) {
                res.best_auroc = va;
                res.best_epoch = epoch;
                best = model.clone();
                since_best = 0;
            } else if (++since_best >= cfg.patience) {
                break;
            }
        }
    }

    if (res.best_epoch >= 0) {
        auto src = best.parameters();
        auto dst = model.parameters();
        for (std::size_t i = 0; i < src.size(); ++i)
            dst[i].second.mutable_data() = src[i].second.data();
    }
    return res;
}

}  // namespace vshap
