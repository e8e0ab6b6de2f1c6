#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace vshap {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TensorImpl;

/// Dense row-major array of doubles participating in a define-by-run
/// reverse-mode differentiation graph. Copies are shallow (shared storage).
/// Tensors with no graph attached are immutable after construction and safe
/// to share across threads; graph construction and backward are
/// single-threaded per graph instance.
class Tensor {
public:
    Tensor() = default;

    static Tensor from(std::vector<int> shape, std::vector<double> data,
                       bool requires_grad = false);
    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value,
                       bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    std::size_t size() const;
    const std::vector<double>& data() const;
    std::vector<double>& mutable_data();  // leaves only (no graph node)
    bool requires_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();

    /// Value of a size-1 tensor.
    double item() const;
    double at(std::size_t i) const { return data()[i]; }

    /// Detached copy: same values, no graph, no grad requirement.
    Tensor detach() const;

    TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

private:
    friend Tensor wrap_impl(std::shared_ptr<TensorImpl> impl);
    std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;
};

/// Thread-local switch: while disabled, ops do not record graph nodes.
/// Used for inference paths (mean-mode forwards inside SHAP games).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// Elementwise ops broadcast numpy-style over leading dims.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);  // (m,n)x(n,p) or (m,n)x(n)
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // strictly positive inputs
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);  // stable branch form
Tensor softmax(const Tensor& x);  // over last dim
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar
Tensor concat(const std::vector<Tensor>& parts);        // along dim 0
Tensor slice(const Tensor& x, int start, int len);      // along dim 0

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

/// Reverse pass from a scalar loss; populates grad on every requires_grad
/// node reachable in the graph. Deterministic: fixed reverse topological
/// order.
void backward(const Tensor& loss);

/// Gradient of a scalar-valued function at a point, on a private graph.
Tensor gradient_of(const std::function<Tensor(const Tensor&)>& f,
                   const Tensor& at);

}  // namespace vshap
