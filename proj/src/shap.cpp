#include "vshap/shap.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vshap {

double Attribution::efficiency_gap(double value_at_x) const {
    const double s = std::accumulate(phi.begin(), phi.end(), 0.0);
    return std::fabs(base_value + s - value_at_x);
}

namespace {

struct Coalition {
    std::vector<int> members;  // sorted feature indices
    double weight;
};

// C(m, s) as double (saturating is fine; only compared against budgets)
double choose(int m, int s) {
    double c = 1.0;
    for (int i = 1; i <= s; ++i) c = c * (m - s + i) / i;
    return c;
}

// Shapley kernel weight of one coalition of size s out of m features
double kernel_weight(int m, int s) {
    return (m - 1.0) / (choose(m, s) * s * (m - s));
}

void enumerate_size(int m, int s, std::vector<Coalition>& out, double w) {
    std::vector<int> c(s);
    std::iota(c.begin(), c.end(), 0);
    while (true) {
        out.push_back({c, w});
        int i = s - 1;
        while (i >= 0 && c[i] == m - s + i) --i;
        if (i < 0) break;
        ++c[i];
        for (int j = i + 1; j < s; ++j) c[j] = c[j - 1] + 1;
    }
}

std::vector<Coalition> build_coalitions(int m, long budget, Rng& rng) {
    std::vector<Coalition> out;
    if (budget == 0) {
        if (m > 20)
            throw UsageError("full enumeration requires M <= 20 features");
        for (int s = 1; s <= m - 1; ++s)
            enumerate_size(m, s, out, kernel_weight(m, s));
        return out;
    }
    if (budget < m + 2)
        throw UsageError("n_coalitions must be >= M + 2 (or 0 for full)");
    // total kernel mass carried by each coalition size
    std::vector<double> size_mass(m, 0.0);
    for (int s = 1; s <= m - 1; ++s)
        size_mass[s] = (m - 1.0) / (double(s) * (m - s));
    std::vector<bool> fully(m, false);
    long remaining = budget;
    // fill complete size tiers (paired with complements) while the budget
    // allows; coalitions in a full tier carry their exact kernel weight
    for (int s = 1; s <= m / 2; ++s) {
        const int s2 = m - s;
        if (fully[s]) continue;
        const double cnt = choose(m, s) + (s2 != s ? choose(m, s2) : 0.0);
        if (cnt > double(remaining)) break;
        enumerate_size(m, s, out, kernel_weight(m, s));
        fully[s] = true;
        if (s2 != s) {
            enumerate_size(m, s2, out, kernel_weight(m, s2));
            fully[s2] = true;
        }
        remaining -= static_cast<long>(cnt);
    }
    // sample the rest from the open sizes, proportional to kernel mass;
    // duplicates merge into one coalition with a proportional weight
    std::vector<int> open_sizes;
    std::vector<double> open_mass;
    double left_mass = 0.0;
    for (int s = 1; s <= m - 1; ++s)
        if (!fully[s]) {
            open_sizes.push_back(s);
            open_mass.push_back(size_mass[s]);
            left_mass += size_mass[s];
        }
    if (remaining > 0 && !open_sizes.empty()) {
        std::discrete_distribution<int> pick(open_mass.begin(),
                                             open_mass.end());
        std::vector<int> idx(m);
        std::iota(idx.begin(), idx.end(), 0);
        std::map<std::vector<int>, long> counts;
        for (long i = 0; i < remaining; ++i) {
            const int s = open_sizes[pick(rng)];
            for (int j = 0; j < s; ++j) {
                std::uniform_int_distribution<int> u(j, m - 1);
                std::swap(idx[j], idx[u(rng)]);
            }
            std::vector<int> members(idx.begin(), idx.begin() + s);
            std::sort(members.begin(), members.end());
            ++counts[members];
        }
        for (auto& [members, cnt] : counts)
            out.push_back(
                {members, left_mass * double(cnt) / double(remaining)});
    }
    return out;
}

// solve A x = b (A symmetric positive definite, row-major)
std::vector<double> cholesky_solve(std::vector<double> A,
                                   std::vector<double> b, int n) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = A[static_cast<std::size_t>(i) * n + j];
            for (int k = 0; k < j; ++k)
                s -= A[static_cast<std::size_t>(i) * n + k] *
                     A[static_cast<std::size_t>(j) * n + k];
            if (i == j) {
                if (s <= 1e-12)
                    throw SolverError(
                        "singular kernel regression system; increase "
                        "n_coalitions");
                A[static_cast<std::size_t>(i) * n + i] = std::sqrt(s);
            } else {
                A[static_cast<std::size_t>(i) * n + j] =
                    s / A[static_cast<std::size_t>(j) * n + j];
            }
        }
    }
    for (int i = 0; i < n; ++i) {
        double s = b[i];
        for (int k = 0; k < i; ++k)
            s -= A[static_cast<std::size_t>(i) * n + k] * b[k];
        b[i] = s / A[static_cast<std::size_t>(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = b[i];
        for (int k = i + 1; k < n; ++k)
            s -= A[static_cast<std::size_t>(k) * n + i] * b[k];
        b[i] = s / A[static_cast<std::size_t>(i) * n + i];
    }
    return b;
}

std::vector<std::size_t> background_subset(std::size_t n_rows, int per_coal,
                                           Rng& rng) {
    std::vector<std::size_t> idx(n_rows);
    std::iota(idx.begin(), idx.end(), 0);
    if (per_coal > 0 && static_cast<std::size_t>(per_coal) < n_rows) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(per_coal);
        std::sort(idx.begin(), idx.end());
    }
    return idx;
}

double eval_members(const Game& game, const std::vector<double>& x,
                    const Background& bg,
                    const std::vector<std::size_t>& rows,
                    const std::vector<int>& members) {
    double acc = 0.0;
    std::vector<double> composite;
    for (std::size_t r : rows) {
        composite = bg.rows[r];
        for (int j : members) composite[j] = x[j];
        acc += game(composite);
    }
    return acc / double(rows.size());
}

}  // namespace

Attribution kernel_shap(const Game& game, const std::vector<double>& x,
                        const Background& bg, const KernelShapConfig& cfg) {
    const int m = static_cast<int>(x.size());
    if (m < 1) throw UsageError("kernel_shap: need at least one feature");
    if (bg.rows.empty()) throw UsageError("kernel_shap: empty background");
    for (const auto& row : bg.rows)
        if (row.size() != x.size())
            throw ShapeError("kernel_shap: background layout mismatch");
    Rng rng(cfg.seed);
    const auto rows =
        background_subset(bg.rows.size(), cfg.bg_per_coalition, rng);
    const double vx = game(x);
    const double v0 = eval_members(game, x, bg, rows, {});

    Attribution out;
    out.base_value = v0;
    out.phi.assign(m, 0.0);
    if (m == 1) {
        out.phi[0] = vx - v0;
        return out;
    }

    auto coalitions = build_coalitions(m, cfg.n_coalitions, rng);
    out.n_coalitions = static_cast<long>(coalitions.size());
    const long n = static_cast<long>(coalitions.size());
    std::vector<double> values(coalitions.size());
    // pure game calls over shared immutable state; results indexed by
    // coalition, so any thread count gives the same attribution
#pragma omp parallel for schedule(dynamic, 8) num_threads(cfg.threads) if (cfg.threads > 1)
    for (long i = 0; i < n; ++i)
        values[i] = eval_members(game, x, bg, rows, coalitions[i].members);

    // WLS with the efficiency constraint eliminated through the last
    // feature, so base + sum(phi) == game(x) holds exactly
    const int p = m - 1;
    std::vector<double> A(static_cast<std::size_t>(p) * p, 0.0);
    std::vector<double> rhs(p, 0.0);
    const double total = vx - v0;
    std::vector<char> member(m);
    for (long i = 0; i < n; ++i) {
        std::fill(member.begin(), member.end(), 0);
        for (int j : coalitions[i].members) member[j] = 1;
        const double w = coalitions[i].weight;
        const double zm = member[m - 1] ? 1.0 : 0.0;
        const double y = values[i] - v0 - zm * total;
        for (int j = 0; j < p; ++j) {
            const double zj = (member[j] ? 1.0 : 0.0) - zm;
            if (zj == 0.0) continue;
            rhs[j] += w * zj * y;
            for (int k = 0; k <= j; ++k) {
                const double zk = (member[k] ? 1.0 : 0.0) - zm;
                if (zk != 0.0)
                    A[static_cast<std::size_t>(j) * p + k] += w * zj * zk;
            }
        }
    }
    for (int j = 0; j < p; ++j)
        for (int k = j + 1; k < p; ++k)
            A[static_cast<std::size_t>(j) * p + k] =
                A[static_cast<std::size_t>(k) * p + j];
    std::vector<double> phi = cholesky_solve(std::move(A), rhs, p);
    double tail = total;
    for (int j = 0; j < p; ++j) {
        out.phi[j] = phi[j];
        tail -= phi[j];
    }
    out.phi[m - 1] = tail;
    double rss = 0.0;
    for (long i = 0; i < n; ++i) {
        double fit = 0.0;
        for (int j : coalitions[i].members) fit += out.phi[j];
        const double r = values[i] - v0 - fit;
        rss += coalitions[i].weight * r * r;
    }
    out.residual = rss;
    return out;
}

Attribution exact_shapley(const Game& game, const std::vector<double>& x,
                          const Background& bg) {
    const int m = static_cast<int>(x.size());
    if (m > 20) throw UsageError("exact_shapley: refusing M > 20");
    if (bg.rows.empty()) throw UsageError("exact_shapley: empty background");
    std::vector<std::size_t> rows(bg.rows.size());
    std::iota(rows.begin(), rows.end(), 0);
    const std::uint64_t n_sets = 1ULL << m;
    std::vector<double> v(n_sets);
    std::vector<double> composite;
    for (std::uint64_t s = 0; s < n_sets; ++s) {
        double acc = 0.0;
        for (std::size_t r : rows) {
            composite = bg.rows[r];
            for (int j = 0; j < m; ++j)
                if ((s >> j) & 1ULL) composite[j] = x[j];
            acc += game(composite);
        }
        v[s] = acc / double(rows.size());
    }
    // phi_i = sum_S |S|!(M-|S|-1)!/M! [v(S+i) - v(S)]
    //       = sum_S 1/(M * C(M-1,|S|)) [v(S+i) - v(S)]
    std::vector<double> w(m);
    for (int s = 0; s < m; ++s) w[s] = 1.0 / (m * choose(m - 1, s));
    Attribution out;
    out.base_value = v[0];
    out.phi.assign(m, 0.0);
    out.n_coalitions = static_cast<long>(n_sets);
    for (std::uint64_t s = 0; s < n_sets; ++s) {
        const int size = __builtin_popcountll(s);
        for (int i = 0; i < m; ++i) {
            if ((s >> i) & 1ULL) continue;
            out.phi[i] += w[size] * (v[s | (1ULL << i)] - v[s]);
        }
    }
    return out;
}

std::vector<Attribution> explain_episode(
    const Vrnn& model, const Episode& episode, int step,
    const std::vector<std::string>& games,
    const std::vector<const Episode*>& background, const ExplainConfig& cfg) {
    if (step < 0 || step >= episode.T)
        throw UsageError("explain_episode: step outside episode");
    const int d = episode.feature_dim;
    if (d != model.config().input_dim)
        throw UsageError("explain_episode: feature dim mismatch");
    const int W = std::min(cfg.window, step + 1);
    const int window_start = step + 1 - W;

    // the untouched prefix is shared by every coalition evaluation
    Tensor h0 = Tensor::zeros({model.config().hidden_dim});
    if (window_start > 0) {
        NoGradGuard ng;
        std::vector<double> prefix(
            episode.features.begin(),
            episode.features.begin() +
                static_cast<std::size_t>(window_start) * d);
        ForwardTrace tr =
            model.forward_from(h0, prefix, window_start, ForwardMode::mean);
        h0 = tr.steps.back().h.detach();
    }

    std::vector<double> x(
        episode.features.begin() + static_cast<std::size_t>(window_start) * d,
        episode.features.begin() + static_cast<std::size_t>(step + 1) * d);

    Background bg;
    for (const Episode* ep : background) {
        if (ep->T <= step || ep->feature_dim != d) continue;
        bg.rows.emplace_back(
            ep->features.begin() + static_cast<std::size_t>(window_start) * d,
            ep->features.begin() + static_cast<std::size_t>(step + 1) * d);
    }
    if (bg.rows.empty())
        throw UsageError(
            "explain_episode: no background episode covers the step");

    KernelShapConfig kcfg;
    kcfg.n_coalitions = cfg.n_coalitions;
    kcfg.bg_per_coalition = cfg.bg_per_coalition;
    kcfg.seed = cfg.seed;
    kcfg.threads = cfg.threads;

    std::vector<Attribution> out;
    for (const std::string& name : games) {
        Game game;
        if (name == "prediction") {
            const Vrnn* mp = &model;
            const int ci = cfg.class_index;
            game = [mp, h0, W, ci](const std::vector<double>& feats) {
                NoGradGuard ng;
                ForwardTrace tr =
                    mp->forward_from(h0, feats, W, ForwardMode::mean);
                const Tensor& probs = tr.steps.back().probs;
                return probs.size() == 1 ? probs.at(0) : probs.at(ci);
            };
        } else if (name == "variance") {
            wrap_variance_model(model, cfg.method, cfg.logit_space,
                                cfg.class_index);  // config check
            const Vrnn* mp = &model;
            const VarianceMethod method = cfg.method;
            const int ci = cfg.class_index;
            auto f = classifier_function(model, cfg.logit_space, ci);
            game = [mp, method, ci, f, h0, W](
                       const std::vector<double>& feats) {
                GaussianParams at_step;
                {
                    NoGradGuard ng;
                    ForwardTrace tr =
                        mp->forward_from(h0, feats, W, ForwardMode::mean);
                    at_step.mu = tr.steps.back().posterior.mu.detach();
                    at_step.log_var =
                        tr.steps.back().posterior.log_var.detach();
                }
                if (method == VarianceMethod::exact_logit) {
                    auto [w, b] = mp->affine_head();
                    const int z_dim = mp->config().latent_dim;
                    std::vector<double> row(
                        w.data().begin() + ci * z_dim,
                        w.data().begin() + (ci + 1) * z_dim);
                    return exact_logit_variance(row, at_step).variance;
                }
                return delta_variance(f, at_step).variance;
            };
        } else {
            throw UsageError("unknown game: " + name);
        }
        Attribution a = kernel_shap(game, x, bg, kcfg);
        a.game = name;
        a.step = step;
        a.window_start = window_start;
        a.window = W;
        a.n_vars = episode.K;
        out.push_back(std::move(a));
    }
    return out;
}

}  // namespace vshap
