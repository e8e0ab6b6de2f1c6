#include "vshap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace vshap {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 1) throw ShapeError("dimension sizes must be >= 1");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x))
            throw NumericError(std::string(op) + ": non-finite result");
    }
}

std::vector<double>& grad_buf(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    return t.grad;
}

std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

// Trailing-aligned broadcast: strides are per output dim, 0 where the input
// dim is 1 (or missing).
struct Broadcast {
    std::vector<int> out_shape;
    std::vector<std::size_t> sa, sb;

    Broadcast(const std::vector<int>& a, const std::vector<int>& b) {
        const std::size_t nd = std::max(a.size(), b.size());
        out_shape.resize(nd);
        sa.resize(nd);
        sb.resize(nd);
        std::vector<int> ea(nd, 1), eb(nd, 1);
        std::copy(a.begin(), a.end(), ea.begin() + (nd - a.size()));
        std::copy(b.begin(), b.end(), eb.begin() + (nd - b.size()));
        for (std::size_t i = 0; i < nd; ++i) {
            if (ea[i] != eb[i] && ea[i] != 1 && eb[i] != 1)
                throw ShapeError("broadcast mismatch " + shape_str(a) +
                                 " vs " + shape_str(b));
            out_shape[i] = std::max(ea[i], eb[i]);
        }
        std::size_t ra = 1, rb = 1;
        for (std::size_t i = nd; i-- > 0;) {
            sa[i] = (ea[i] == 1) ? 0 : ra;
            sb[i] = (eb[i] == 1) ? 0 : rb;
            ra *= static_cast<std::size_t>(ea[i]);
            rb *= static_cast<std::size_t>(eb[i]);
        }
    }

    // Maps a flat output index to flat input indices.
    void map(std::size_t idx, std::size_t& ia, std::size_t& ib) const {
        ia = 0;
        ib = 0;
        for (std::size_t d = out_shape.size(); d-- > 0;) {
            const std::size_t c = idx % static_cast<std::size_t>(out_shape[d]);
            idx /= static_cast<std::size_t>(out_shape[d]);
            ia += c * sa[d];
            ib += c * sb[d];
        }
    }
};

}  // namespace

Tensor wrap_impl(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data,
                    bool requires_grad) {
    if (numel(shape) != data.size())
        throw ShapeError("data length does not match shape " +
                         shape_str(shape));
    check_finite("tensor", data);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return wrap_impl(std::move(impl));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    std::vector<double> d(numel(shape), 0.0);
    return from(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    std::vector<double> d(numel(shape), value);
    return from(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size() const { return impl_->data.size(); }
const std::vector<double>& Tensor::data() const { return impl_->data; }

std::vector<double>& Tensor::mutable_data() {
    if (impl_->backward_fn)
        throw UsageError("cannot mutate a graph-interior tensor");
    return impl_->data;
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

const std::vector<double>& Tensor::grad() const {
    // empty until backward reaches this node
    return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

double Tensor::item() const {
    if (size() != 1) throw UsageError("item() requires a size-1 tensor");
    return impl_->data[0];
}

Tensor Tensor::detach() const {
    return Tensor::from(impl_->shape, impl_->data, false);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

namespace {

Tensor make_node(const char* op, std::vector<int> shape,
                 std::vector<double> data, std::vector<Tensor> inputs,
                 std::function<void(TensorImpl&)> backward_fn) {
    check_finite(op, data);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& t : inputs) needs = needs || t.requires_grad();
    }
    if (needs) {
        impl->requires_grad = true;
        for (const auto& t : inputs) impl->parents.push_back(t.impl_ptr());
        impl->backward_fn = std::move(backward_fn);
    }
    return wrap_impl(std::move(impl));
}

using BinFwd = double (*)(double, double);
using BinPartial = double (*)(double, double);

Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, BinFwd f,
                 BinPartial dfda, BinPartial dfdb) {
    TensorImpl* ai = a.impl();
    TensorImpl* bi = b.impl();
    if (ai->shape == bi->shape) {
        const std::size_t n = ai->data.size();
        std::vector<double> out(n);
        for (std::size_t i = 0; i < n; ++i)
            out[i] = f(ai->data[i], bi->data[i]);
        auto bw = [ai, bi, dfda, dfdb](TensorImpl& self) {
            const std::size_t n = self.data.size();
            if (ai->requires_grad) {
                auto& ga = grad_buf(*ai);
                for (std::size_t i = 0; i < n; ++i)
                    ga[i] += self.grad[i] * dfda(ai->data[i], bi->data[i]);
            }
            if (bi->requires_grad) {
                auto& gb = grad_buf(*bi);
                for (std::size_t i = 0; i < n; ++i)
                    gb[i] += self.grad[i] * dfdb(ai->data[i], bi->data[i]);
            }
        };
        return make_node(op, ai->shape, std::move(out), {a, b}, bw);
    }
    Broadcast bc(ai->shape, bi->shape);
    const std::size_t n = numel(bc.out_shape);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t ia, ib;
        bc.map(i, ia, ib);
        out[i] = f(ai->data[ia], bi->data[ib]);
    }
    auto bw = [ai, bi, bc, dfda, dfdb](TensorImpl& self) {
        const std::size_t n = self.data.size();
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t ia, ib;
            bc.map(i, ia, ib);
            // broadcast adjoints sum over the broadcast dims
            if (ai->requires_grad)
                grad_buf(*ai)[ia] +=
                    self.grad[i] * dfda(ai->data[ia], bi->data[ib]);
            if (bi->requires_grad)
                grad_buf(*bi)[ib] +=
                    self.grad[i] * dfdb(ai->data[ia], bi->data[ib]);
        }
    };
    return make_node(op, bc.out_shape, std::move(out), {a, b}, bw);
}

using UnFwd = double (*)(double);
// partial receives (input value, output value)
using UnPartial = double (*)(double, double);

Tensor unary_op(const char* op, const Tensor& x, UnFwd f, UnPartial dfdx) {
    TensorImpl* xi = x.impl();
    const std::size_t n = xi->data.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(xi->data[i]);
    auto bw = [xi, dfdx](TensorImpl& self) {
        if (!xi->requires_grad) return;
        auto& gx = grad_buf(*xi);
        for (std::size_t i = 0; i < self.data.size(); ++i)
            gx[i] += self.grad[i] * dfdx(xi->data[i], self.data[i]);
    };
    return make_node(op, xi->shape, std::move(out), {x}, bw);
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    TensorImpl* ai = a.impl();
    TensorImpl* bi = b.impl();
    if (ai->shape.size() != 2)
        throw ShapeError("matmul: lhs must be 2-D, got " +
                         shape_str(ai->shape));
    const int m = ai->shape[0];
    const int n = ai->shape[1];
    const bool vec = bi->shape.size() == 1;
    if (vec ? (bi->shape[0] != n)
            : (bi->shape.size() != 2 || bi->shape[0] != n))
        throw ShapeError("matmul: inner dims mismatch " +
                         shape_str(ai->shape) + " x " + shape_str(bi->shape));
    const int p = vec ? 1 : bi->shape[1];
    std::vector<double> out(static_cast<std::size_t>(m) * p, 0.0);
    const double* A = ai->data.data();
    const double* B = bi->data.data();
    for (int i = 0; i < m; ++i)
        for (int k = 0; k < n; ++k) {
            const double aik = A[i * n + k];
            for (int j = 0; j < p; ++j) out[i * p + j] += aik * B[k * p + j];
        }
    std::vector<int> out_shape = vec ? std::vector<int>{m}
                                     : std::vector<int>{m, p};
    auto bw = [ai, bi, m, n, p](TensorImpl& self) {
        const double* G = self.grad.data();
        const double* A = ai->data.data();
        const double* B = bi->data.data();
        if (ai->requires_grad) {
            auto& ga = grad_buf(*ai);
            for (int i = 0; i < m; ++i)
                for (int k = 0; k < n; ++k) {
                    double s = 0.0;
                    for (int j = 0; j < p; ++j)
                        s += G[i * p + j] * B[k * p + j];
                    ga[i * n + k] += s;
                }
        }
        if (bi->requires_grad) {
            auto& gb = grad_buf(*bi);
            for (int k = 0; k < n; ++k)
                for (int j = 0; j < p; ++j) {
                    double s = 0.0;
                    for (int i = 0; i < m; ++i)
                        s += A[i * n + k] * G[i * p + j];
                    gb[k * p + j] += s;
                }
        }
    };
    return make_node("matmul", std::move(out_shape), std::move(out), {a, b},
                     bw);
}

Tensor exp(const Tensor& x) {
    return unary_op(
        "exp", x, [](double v) { return std::exp(v); },
        [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    for (double v : x.data())
        if (v <= 0.0) throw NumericError("log: non-positive input");
    return unary_op(
        "log", x, [](double v) { return std::log(v); },
        [](double v, double) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
    return unary_op(
        "tanh", x, [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        "sigmoid", x, [](double v) { return stable_sigmoid(v); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor square(const Tensor& x) {
    return unary_op(
        "square", x, [](double v) { return v * v; },
        [](double v, double) { return 2.0 * v; });
}

Tensor abs(const Tensor& x) {
    return unary_op(
        "abs", x, [](double v) { return std::fabs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor neg(const Tensor& x) {
    return unary_op(
        "neg", x, [](double v) { return -v; },
        [](double, double) { return -1.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    TensorImpl* xi = x.impl();
    const std::size_t n = xi->data.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = std::min(std::max(xi->data[i], lo), hi);
    auto bw = [xi, lo, hi](TensorImpl& self) {
        if (!xi->requires_grad) return;
        auto& gx = grad_buf(*xi);
        for (std::size_t i = 0; i < self.data.size(); ++i) {
            const double v = xi->data[i];
            if (v > lo && v < hi) gx[i] += self.grad[i];
        }
    };
    return make_node("clamp", xi->shape, std::move(out), {x}, bw);
}

Tensor softmax(const Tensor& x) {
    TensorImpl* xi = x.impl();
    const int last = xi->shape.back();
    const std::size_t rows = xi->data.size() / static_cast<std::size_t>(last);
    std::vector<double> out(xi->data.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xi->data.data() + r * last;
        double* o = out.data() + r * last;
        double mx = in[0];
        for (int j = 1; j < last; ++j) mx = std::max(mx, in[j]);
        double z = 0.0;
        for (int j = 0; j < last; ++j) {
            o[j] = std::exp(in[j] - mx);
            z += o[j];
        }
        for (int j = 0; j < last; ++j) o[j] /= z;
    }
    auto bw = [xi, last, rows](TensorImpl& self) {
        if (!xi->requires_grad) return;
        auto& gx = grad_buf(*xi);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * last;
            const double* g = self.grad.data() + r * last;
            double dot = 0.0;
            for (int j = 0; j < last; ++j) dot += g[j] * y[j];
            for (int j = 0; j < last; ++j)
                gx[r * last + j] += y[j] * (g[j] - dot);
        }
    };
    return make_node("softmax", xi->shape, std::move(out), {x}, bw);
}

Tensor sum(const Tensor& x) {
    TensorImpl* xi = x.impl();
    double s = 0.0;
    for (double v : xi->data) s += v;
    auto bw = [xi](TensorImpl& self) {
        if (!xi->requires_grad) return;
        auto& gx = grad_buf(*xi);
        for (auto& g : gx) g += self.grad[0];
    };
    return make_node("sum", {1}, {s}, {x}, bw);
}

Tensor mean(const Tensor& x) {
    TensorImpl* xi = x.impl();
    double s = 0.0;
    for (double v : xi->data) s += v;
    const double n = static_cast<double>(xi->data.size());
    auto bw = [xi, n](TensorImpl& self) {
        if (!xi->requires_grad) return;
        auto& gx = grad_buf(*xi);
        for (auto& g : gx) g += self.grad[0] / n;
    };
    return make_node("mean", {1}, {s / n}, {x}, bw);
}

Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw UsageError("concat: empty input");
    std::vector<int> shape = parts[0].shape();
    std::vector<double> out;
    std::vector<std::size_t> offsets;
    int dim0 = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        if (s.size() != shape.size() ||
            !std::equal(s.begin() + 1, s.end(), shape.begin() + 1))
            throw ShapeError("concat: trailing dims must match");
        offsets.push_back(out.size());
        out.insert(out.end(), p.data().begin(), p.data().end());
        dim0 += s[0];
    }
    shape[0] = dim0;
    std::vector<TensorImpl*> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    auto bw = [impls, offsets](TensorImpl& self) {
        for (std::size_t k = 0; k < impls.size(); ++k) {
            if (!impls[k]->requires_grad) continue;
            auto& g = grad_buf(*impls[k]);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += self.grad[offsets[k] + i];
        }
    };
    return make_node("concat", std::move(shape), std::move(out), parts, bw);
}

Tensor slice(const Tensor& x, int start, int len) {
    TensorImpl* xi = x.impl();
    if (start < 0 || len < 1 || start + len > xi->shape[0])
        throw ShapeError("slice: range out of bounds");
    const std::size_t row =
        xi->data.size() / static_cast<std::size_t>(xi->shape[0]);
    std::vector<int> shape = xi->shape;
    shape[0] = len;
    std::vector<double> out(xi->data.begin() + start * row,
                            xi->data.begin() + (start + len) * row);
    auto bw = [xi, start, row](TensorImpl& self) {
        if (!xi->requires_grad) return;
        auto& gx = grad_buf(*xi);
        for (std::size_t i = 0; i < self.data.size(); ++i)
            gx[start * row + i] += self.grad[i];
    };
    return make_node("slice", std::move(shape), std::move(out), {x}, bw);
}

void backward(const Tensor& loss) {
    if (loss.size() != 1) throw UsageError("backward: loss must be scalar");
    TensorImpl* root = loss.impl();
    if (!root->requires_grad)
        throw UsageError(
            "backward: value does not depend on any gradient-tracked tensor "
            "(was it computed under NoGradGuard?)");
    // iterative post-order DFS; reversed gives reverse topological order
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImpl* p = node->parents[idx++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    grad_buf(*root)[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn && !node->grad.empty())
            node->backward_fn(*node);
    }
}

Tensor gradient_of(const std::function<Tensor(const Tensor&)>& f,
                   const Tensor& at) {
    // runs on a private graph; re-enable recording even under NoGradGuard
    struct EnableGrad {
        bool prev;
        EnableGrad() : prev(g_grad_enabled) { g_grad_enabled = true; }
        ~EnableGrad() { g_grad_enabled = prev; }
    } guard;
    Tensor x = Tensor::from(at.shape(), at.data(), true);
    Tensor y = f(x);
    if (y.size() != 1)
        throw UsageError("gradient_of: function must be scalar-valued");
    backward(y);
    if (x.grad().empty())  // y does not depend on x
        return Tensor::zeros(at.shape());
    return Tensor::from(at.shape(), x.grad(), false);
}

}  // namespace vshap
