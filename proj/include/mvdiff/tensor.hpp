#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mvdiff/rng.hpp"

namespace mvdiff {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t numel_of(const Shape& s);

class TensorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// One recorded primitive application. `backward` receives the incoming
// gradient for this node and pointers to the gradient buffers of its
// parents (nullptr where a parent does not require grad) and accumulates
// local-rule contributions into them.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(const std::vector<double>& g, const std::vector<std::vector<double>*>& pg)>
        backward;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

// Thread-local switch: while disabled, ops do not record graph edges and
// results have requires_grad == false. Used by samplers and data prep.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();

private:
    bool prev_;
};

// Dense n-d tensor of 64-bit floats, row-major, immutable after creation
// (set_data is reserved for optimizer updates between graph lifetimes).
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(const Shape& s, bool requires_grad = false);
    static Tensor ones(const Shape& s);
    static Tensor full(const Shape& s, double v);
    static Tensor scalar(double v);
    static Tensor randn(const Shape& s, Rng& rng, double stddev = 1.0);
    static Tensor uniform(const Shape& s, Rng& rng, double lo, double hi);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int axis) const;  // negative axis counts from the back
    int64_t numel() const { return node_->numel(); }
    const std::vector<double>& data() const { return node_->data; }
    double item() const;
    double at(const std::vector<int64_t>& idx) const;
    bool requires_grad() const { return node_ && node_->requires_grad; }

    Tensor detach() const;
    // In-place data replacement for optimizers/tests. The caller must ensure
    // no live graph still refers to the old values.
    void set_data(const std::vector<double>& d);
    double* mutable_data() { return node_->data.data(); }

    std::shared_ptr<TensorNode> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<TensorNode> n);

private:
    std::shared_ptr<TensorNode> node_;
};

// Recorded applications reachable from one output, parents before children.
class Graph {
public:
    static Graph trace(const Tensor& output);
    const std::vector<TensorNode*>& nodes() const { return order_; }
    TensorNode* output() const { return output_.get(); }

private:
    std::shared_ptr<TensorNode> output_;
    std::vector<TensorNode*> order_;
};

class GradientMap {
public:
    bool contains(const Tensor& t) const;
    Tensor at(const Tensor& t) const;  // throws TensorError if absent

    std::unordered_map<const TensorNode*, std::vector<double>> grads;
};

GradientMap backward(const Graph& g, const Tensor& seed);
GradientMap backward(const Tensor& output, const Tensor& seed);
GradientMap backward(const Tensor& output);  // seed of ones

// ---- primitives --------------------------------------------------------
// Elementwise binaries broadcast by trailing-axis alignment: shapes align
// from the last axis; each aligned pair must match or be 1. Anything else
// is a shape error.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor matmul(const Tensor& a, const Tensor& b);  // [..., M, K] x [..., K, N]
Tensor reshape(const Tensor& a, Shape s);         // one axis may be -1
Tensor transpose(const Tensor& a, int ax0, int ax1);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor broadcast_to(const Tensor& a, const Shape& s);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);

Tensor reduce_sum(const Tensor& a, std::vector<int> axes, bool keepdims = false);
Tensor reduce_mean(const Tensor& a, std::vector<int> axes, bool keepdims = false);
Tensor reduce_sum_all(const Tensor& a);   // scalar
Tensor reduce_mean_all(const Tensor& a);  // scalar

Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// tanh approximation: 0.5*x*(1 + tanh(0.79788456080286536*(x + 0.044715*x^3)))
Tensor gelu(const Tensor& a);

Tensor softmax(const Tensor& a, int axis);
// Normalizes the last axis; gain/bias must have that axis length.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Scaled dot-product attention. q [..., Sq, Dk], k [..., Sk, Dk],
// v [..., Sk, Dv]; optional boolean mask (nonzero = attendable)
// broadcastable to [..., Sq, Sk]. Rows whose keys are all masked out
// return zeros.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const std::optional<Tensor>& mask = std::nullopt);

// Rotary embedding over the second-to-last axis: x [..., T, D], D even,
// positions.size() == T. Pair i of the feature axis is rotated by
// positions[t] * base^(-2i/D).
Tensor rope_apply(const Tensor& x, const std::vector<int64_t>& positions, double base = 10000.0);

Tensor one_hot(const std::vector<int64_t>& ids, int64_t depth);  // constant [n, depth]

}  // namespace mvdiff
