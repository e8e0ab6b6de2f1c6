#include "vshap/vrnn.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace vshap {

namespace {

constexpr double kLogVarLo = -10.0;
constexpr double kLogVarHi = 10.0;

Tensor uniform_init(int rows, int cols, Rng& rng, bool trainable) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> d(static_cast<std::size_t>(rows) * cols);
    for (auto& v : d) v = dist(rng);
    return Tensor::from({rows, cols}, std::move(d), trainable);
}

Tensor bias_init(int rows, int fan_in, Rng& rng, bool trainable) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> d(rows);
    for (auto& v : d) v = dist(rng);
    return Tensor::from({rows}, std::move(d), trainable);
}

GaussianParams split_gaussian(const Tensor& out, int z_dim) {
    GaussianParams p;
    p.mu = slice(out, 0, z_dim);
    p.log_var = clamp(slice(out, z_dim, z_dim), kLogVarLo, kLogVarHi);
    return p;
}

}  // namespace

void VrnnConfig::validate() const {
    if (input_dim < 1 || hidden_dim < 1 || latent_dim < 1 || num_classes < 1)
        throw ConfigError("all dims must be >= 1");
    for (int w : clf_hidden)
        if (w < 1) throw ConfigError("classifier hidden widths must be >= 1");
}

Mlp Mlp::init(const std::vector<int>& dims, Rng& rng, bool trainable) {
    Mlp m;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        m.weights.push_back(uniform_init(dims[i + 1], dims[i], rng, trainable));
        m.biases.push_back(bias_init(dims[i + 1], dims[i], rng, trainable));
    }
    return m;
}

Mlp Mlp::zeros(const std::vector<int>& dims, bool trainable) {
    Mlp m;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        m.weights.push_back(Tensor::zeros({dims[i + 1], dims[i]}, trainable));
        m.biases.push_back(Tensor::zeros({dims[i + 1]}, trainable));
    }
    return m;
}

Mlp Mlp::detached() const {
    Mlp m;
    for (const auto& w : weights) m.weights.push_back(w.detach());
    for (const auto& b : biases) m.biases.push_back(b.detach());
    return m;
}

Tensor Mlp::forward(const Tensor& x) const {
    Tensor a = x;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        a = add(matmul(weights[i], a), biases[i]);
        if (i + 1 < weights.size()) a = tanh(a);
    }
    return a;
}

GruCell GruCell::init(int input_dim, int hidden_dim, Rng& rng,
                      bool trainable) {
    GruCell c;
    const int in = input_dim + hidden_dim;
    c.w_reset = uniform_init(hidden_dim, in, rng, trainable);
    c.b_reset = bias_init(hidden_dim, in, rng, trainable);
    c.w_update = uniform_init(hidden_dim, in, rng, trainable);
    c.b_update = bias_init(hidden_dim, in, rng, trainable);
    c.w_cand = uniform_init(hidden_dim, in, rng, trainable);
    c.b_cand = bias_init(hidden_dim, in, rng, trainable);
    return c;
}

GruCell GruCell::zeros(int input_dim, int hidden_dim, bool trainable) {
    GruCell c;
    const int in = input_dim + hidden_dim;
    c.w_reset = Tensor::zeros({hidden_dim, in}, trainable);
    c.b_reset = Tensor::zeros({hidden_dim}, trainable);
    c.w_update = Tensor::zeros({hidden_dim, in}, trainable);
    c.b_update = Tensor::zeros({hidden_dim}, trainable);
    c.w_cand = Tensor::zeros({hidden_dim, in}, trainable);
    c.b_cand = Tensor::zeros({hidden_dim}, trainable);
    return c;
}

Tensor GruCell::forward(const Tensor& h_prev, const Tensor& input) const {
    Tensor xh = concat({input, h_prev});
    Tensor r = sigmoid(add(matmul(w_reset, xh), b_reset));
    Tensor u = sigmoid(add(matmul(w_update, xh), b_update));
    Tensor xrh = concat({input, mul(r, h_prev)});
    Tensor cand = tanh(add(matmul(w_cand, xrh), b_cand));
    // h' = (1-u) .* h + u .* cand : convex mixing keeps coords in (-1,1)
    Tensor one = Tensor::scalar(1.0);
    return add(mul(sub(one, u), h_prev), mul(u, cand));
}

Vrnn Vrnn::init(const VrnnConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Vrnn m;
    m.cfg_ = cfg;
    const int d = cfg.input_dim, h = cfg.hidden_dim, z = cfg.latent_dim;
    m.prior_ = Mlp::init({h, h, 2 * z}, rng, true);
    m.enc_ = Mlp::init({h + d, h, 2 * z}, rng, true);
    m.dec_ = Mlp::init({h + z, h, d}, rng, true);
    std::vector<int> clf_dims{z};
    for (int w : cfg.clf_hidden) clf_dims.push_back(w);
    clf_dims.push_back(cfg.num_classes);
    m.clf_ = Mlp::init(clf_dims, rng, true);
    m.gru_ = GruCell::init(d + z, h, rng, true);
    return m;
}

Vrnn Vrnn::zero_init(const VrnnConfig& cfg) {
    cfg.validate();
    Vrnn m;
    m.cfg_ = cfg;
    const int d = cfg.input_dim, h = cfg.hidden_dim, z = cfg.latent_dim;
    m.prior_ = Mlp::zeros({h, h, 2 * z}, true);
    m.enc_ = Mlp::zeros({h + d, h, 2 * z}, true);
    m.dec_ = Mlp::zeros({h + z, h, d}, true);
    std::vector<int> clf_dims{z};
    for (int w : cfg.clf_hidden) clf_dims.push_back(w);
    clf_dims.push_back(cfg.num_classes);
    m.clf_ = Mlp::zeros(clf_dims, true);
    m.gru_ = GruCell::zeros(d + z, h, true);
    return m;
}

GaussianParams Vrnn::prior_net(const Tensor& h_prev) const {
    return split_gaussian(prior_.forward(h_prev), cfg_.latent_dim);
}

GaussianParams Vrnn::encode(const Tensor& h_prev, const Tensor& x_t) const {
    return split_gaussian(enc_.forward(concat({h_prev, x_t})),
                          cfg_.latent_dim);
}

LatentSample Vrnn::reparameterize(const GaussianParams& params,
                                  Rng& rng) const {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> eps(cfg_.latent_dim);
    for (auto& e : eps) e = dist(rng);
    LatentSample s;
    s.epsilon = Tensor::from({cfg_.latent_dim}, std::move(eps), false);
    Tensor sigma = exp(mul(Tensor::scalar(0.5), params.log_var));
    s.z = add(params.mu, mul(sigma, s.epsilon));
    return s;
}

LatentSample Vrnn::reparameterize_mean(const GaussianParams& params) const {
    LatentSample s;
    s.epsilon = Tensor::zeros({cfg_.latent_dim});
    s.z = params.mu;
    return s;
}

std::pair<Tensor, Tensor> Vrnn::classify(const Tensor& z) const {
    Tensor logits = clf_.forward(z);
    Tensor probs =
        cfg_.num_classes == 1 ? sigmoid(logits) : softmax(logits);
    return {logits, probs};
}

Tensor Vrnn::recur(const Tensor& h_prev, const Tensor& x_t,
                   const Tensor& z_t) const {
    return gru_.forward(h_prev, concat({x_t, z_t}));
}

Tensor Vrnn::decode(const Tensor& h_prev, const Tensor& z_t) const {
    return dec_.forward(concat({h_prev, z_t}));
}

ForwardTrace Vrnn::forward_sequence(const std::vector<double>& x, int T,
                                    ForwardMode mode, Rng* rng) const {
    return forward_from(Tensor::zeros({cfg_.hidden_dim}), x, T, mode, rng);
}

ForwardTrace Vrnn::forward_from(const Tensor& h0, const std::vector<double>& x,
                                int T, ForwardMode mode, Rng* rng) const {
    if (T < 1) throw UsageError("forward_sequence: sequence length must be >= 1");
    if (x.size() != static_cast<std::size_t>(T) * cfg_.input_dim)
        throw ShapeError("forward_sequence: input size mismatch");
    if (mode == ForwardMode::sample && rng == nullptr)
        throw UsageError("forward_sequence: sample mode needs an rng");
    ForwardTrace trace;
    trace.steps.reserve(T);
    Tensor h = h0;
    for (int t = 0; t < T; ++t) {
        try {
            Tensor x_t = Tensor::from(
                {cfg_.input_dim},
                std::vector<double>(x.begin() + static_cast<std::size_t>(t) *
                                                    cfg_.input_dim,
                                    x.begin() + static_cast<std::size_t>(t + 1) *
                                                    cfg_.input_dim));
            StepTrace st;
            st.prior = prior_net(h);
            st.posterior = encode(h, x_t);
            st.latent = mode == ForwardMode::sample
                            ? reparameterize(st.posterior, *rng)
                            : reparameterize_mean(st.posterior);
            auto [logits, probs] = classify(st.latent.z);
            st.logits = logits;
            st.probs = probs;
            st.x_hat = decode(h, st.latent.z);
            h = recur(h, x_t, st.latent.z);
            st.h = h;
            trace.steps.push_back(std::move(st));
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (timestep " +
                               std::to_string(t) + ")");
        }
    }
    return trace;
}

std::pair<Tensor, Tensor> Vrnn::affine_head() const {
    if (!cfg_.clf_hidden.empty())
        throw ConfigError(
            "exact logit variance requires a single affine classifier layer");
    return {clf_.weights[0], clf_.biases[0]};
}

Mlp Vrnn::classifier_copy() const { return clf_.detached(); }

std::vector<std::pair<std::string, Tensor>> Vrnn::parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto add_mlp = [&out](const std::string& name, const Mlp& m) {
        for (std::size_t i = 0; i < m.weights.size(); ++i) {
            out.emplace_back(name + ".w" + std::to_string(i), m.weights[i]);
            out.emplace_back(name + ".b" + std::to_string(i), m.biases[i]);
        }
    };
    add_mlp("prior", prior_);
    add_mlp("enc", enc_);
    add_mlp("dec", dec_);
    add_mlp("clf", clf_);
    out.emplace_back("gru.w_reset", gru_.w_reset);
    out.emplace_back("gru.b_reset", gru_.b_reset);
    out.emplace_back("gru.w_update", gru_.w_update);
    out.emplace_back("gru.b_update", gru_.b_update);
    out.emplace_back("gru.w_cand", gru_.w_cand);
    out.emplace_back("gru.b_cand", gru_.b_cand);
    return out;
}

Vrnn Vrnn::clone() const {
    Vrnn m = Vrnn::zero_init(cfg_);
    auto src = parameters();
    auto dst = m.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i].second.mutable_data() = src[i].second.data();
    }
    return m;
}

namespace {
constexpr char kMagic[8] = {'V', 'S', 'H', 'A', 'P', 'C', 'K', '1'};
}

void Vrnn::save(const std::string& path) const {
    nlohmann::json header;
    header["format_version"] = 1;
    header["config"] = {{"input_dim", cfg_.input_dim},
                        {"hidden_dim", cfg_.hidden_dim},
                        {"latent_dim", cfg_.latent_dim},
                        {"clf_hidden", cfg_.clf_hidden},
                        {"num_classes", cfg_.num_classes},
                        {"seed", cfg_.seed}};
    nlohmann::json plist = nlohmann::json::array();
    auto params = parameters();
    for (const auto& [name, t] : params)
        plist.push_back({{"name", name}, {"shape", t.shape()}});
    header["params"] = plist;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw UsageError("cannot open checkpoint for writing: " + path);
    f.write(kMagic, 8);
    const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
    f.write(reinterpret_cast<const char*>(&hlen), 4);  // little-endian host
    f.write(hs.data(), hs.size());
    for (const auto& [name, t] : params) {
        const auto& d = t.data();
        f.write(reinterpret_cast<const char*>(d.data()),
                static_cast<std::streamsize>(d.size() * sizeof(double)));
    }
    if (!f) throw UsageError("checkpoint write failed: " + path);
}

Vrnn Vrnn::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw UsageError("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw UsageError("not a checkpoint file: " + path);
    std::uint32_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 4);
    std::string hs(hlen, '\0');
    f.read(hs.data(), hlen);
    if (!f) throw UsageError("truncated checkpoint header: " + path);
    nlohmann::json header = nlohmann::json::parse(hs);
    VrnnConfig cfg;
    const auto& jc = header.at("config");
    cfg.input_dim = jc.at("input_dim");
    cfg.hidden_dim = jc.at("hidden_dim");
    cfg.latent_dim = jc.at("latent_dim");
    cfg.clf_hidden = jc.at("clf_hidden").get<std::vector<int>>();
    cfg.num_classes = jc.at("num_classes");
    cfg.seed = jc.at("seed");
    Vrnn m = Vrnn::zero_init(cfg);
    auto params = m.parameters();
    const auto& plist = header.at("params");
    if (plist.size() != params.size())
        throw UsageError("checkpoint parameter list mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (plist[i].at("name") != params[i].first)
            throw UsageError("checkpoint parameter order mismatch at " +
                             params[i].first);
        auto& d = params[i].second.mutable_data();
        f.read(reinterpret_cast<char*>(d.data()),
               static_cast<std::streamsize>(d.size() * sizeof(double)));
    }
    if (!f) throw UsageError("truncated checkpoint payload: " + path);
    return m;
}

}  // namespace vshap
