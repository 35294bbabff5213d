#include "mvdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

namespace mvdiff {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

static std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

[[noreturn]] static void fail(const std::string& msg) { throw TensorError(msg); }

static void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

// ---- grad mode ----------------------------------------------------------

static thread_local bool g_grad_enabled = true;

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tensor -------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    for (int64_t d : shape)
        check(d >= 1, "tensor: axis lengths must be >= 1, got " + shape_str(shape));
    check(numel_of(shape) == static_cast<int64_t>(data.size()),
          "tensor: shape " + shape_str(shape) + " does not match data length " +
              std::to_string(data.size()));
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad && g_grad_enabled;
}

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
    return Tensor(s, std::vector<double>(numel_of(s), 0.0), requires_grad);
}
Tensor Tensor::ones(const Shape& s) { return full(s, 1.0); }
Tensor Tensor::full(const Shape& s, double v) {
    return Tensor(s, std::vector<double>(numel_of(s), v));
}
Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::randn(const Shape& s, Rng& rng, double stddev) {
    std::vector<double> d(numel_of(s));
    for (auto& x : d) x = rng.normal() * stddev;
    return Tensor(s, std::move(d));
}

Tensor Tensor::uniform(const Shape& s, Rng& rng, double lo, double hi) {
    std::vector<double> d(numel_of(s));
    for (auto& x : d) x = rng.uniform(lo, hi);
    return Tensor(s, std::move(d));
}

int64_t Tensor::dim(int axis) const {
    int r = rank();
    if (axis < 0) axis += r;
    check(axis >= 0 && axis < r, "dim: axis out of range for " + shape_str(shape()));
    return node_->shape[axis];
}

double Tensor::item() const {
    check(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
}

double Tensor::at(const std::vector<int64_t>& idx) const {
    check(static_cast<int>(idx.size()) == rank(), "at: index rank mismatch");
    auto st = strides_of(shape());
    int64_t off = 0;
    for (size_t i = 0; i < idx.size(); ++i) {
        check(idx[i] >= 0 && idx[i] < shape()[i], "at: index out of range");
        off += idx[i] * st[i];
    }
    return node_->data[off];
}

Tensor Tensor::detach() const {
    return Tensor(node_->shape, node_->data, false);
}

void Tensor::set_data(const std::vector<double>& d) {
    check(static_cast<int64_t>(d.size()) == numel(), "set_data: length mismatch");
    node_->data = d;
}

Tensor Tensor::wrap(std::shared_ptr<TensorNode> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

// Creates the result node; parents and a backward hook are recorded only
// when grad mode is on and some parent requires grad.
static Tensor op_result(Shape shape, std::vector<double> data, const char* op,
                        std::vector<std::shared_ptr<TensorNode>> parents) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    bool rg = false;
    for (auto& p : parents) rg = rg || (p && p->requires_grad);
    if (g_grad_enabled && rg) {
        n->requires_grad = true;
        n->parents = std::move(parents);
    }
    return Tensor::wrap(std::move(n));
}

// ---- Graph / backward ---------------------------------------------------

Graph Graph::trace(const Tensor& output) {
    Graph g;
    g.output_ = output.node();
    if (!g.output_) return g;
    // iterative post-order over requires_grad nodes
    std::unordered_map<const TensorNode*, int> state;  // 0=new 1=open 2=done
    std::vector<TensorNode*> stack{g.output_.get()};
    while (!stack.empty()) {
        TensorNode* n = stack.back();
        int& st = state[n];
        if (st == 0) {
            st = 1;
            for (auto& p : n->parents)
                if (p && p->requires_grad && state[p.get()] == 0) stack.push_back(p.get());
        } else {
            stack.pop_back();
            if (st == 1) {
                st = 2;
                g.order_.push_back(n);
            }
        }
    }
    return g;
}

bool GradientMap::contains(const Tensor& t) const {
    return t.defined() && grads.count(t.node().get()) > 0;
}

Tensor GradientMap::at(const Tensor& t) const {
    auto it = grads.find(t.node().get());
    if (it == grads.end()) fail("gradient map: no gradient recorded for tensor");
    return Tensor(t.shape(), it->second);
}

GradientMap backward(const Graph& g, const Tensor& seed) {
    GradientMap out;
    TensorNode* root = g.output();
    check(root != nullptr, "backward: empty graph");
    check(root->requires_grad, "backward: output does not require grad");
    check(seed.shape() == root->shape,
          "backward: seed shape " + shape_str(seed.shape()) + " does not match output shape " +
              shape_str(root->shape));
    out.grads[root] = seed.data();
    const auto& order = g.nodes();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        auto git = out.grads.find(n);
        if (git == out.grads.end()) continue;
        if (!n->backward) continue;  // leaf
        std::vector<std::vector<double>*> pg(n->parents.size(), nullptr);
        for (size_t i = 0; i < n->parents.size(); ++i) {
            auto& p = n->parents[i];
            if (p && p->requires_grad) {
                auto ins = out.grads.try_emplace(p.get());
                if (ins.second) ins.first->second.assign(p->numel(), 0.0);
                pg[i] = &ins.first->second;
            }
        }
        n->backward(git->second, pg);
        out.grads.erase(git);  // intermediate grads are not part of the result
    }
    return out;
}

GradientMap backward(const Tensor& output, const Tensor& seed) {
    return backward(Graph::trace(output), seed);
}

GradientMap backward(const Tensor& output) {
    return backward(output, Tensor::ones(output.shape()));
}

// ---- broadcast machinery -------------------------------------------------

struct BcastPair {
    Shape out;
    std::vector<int64_t> sa, sb;  // per-out-axis element strides (0 on broadcast axes)
    bool same = false;            // equal shapes fast path
};

static BcastPair broadcast_pair(const Shape& a, const Shape& b, const char* op) {
    BcastPair bp;
    if (a == b) {
        bp.out = a;
        bp.same = true;
        return bp;
    }
    int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    int r = std::max(ra, rb);
    bp.out.resize(r);
    for (int i = 0; i < r; ++i) {
        int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
        int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1)
            fail(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                 " do not broadcast (trailing-axis alignment)");
        bp.out[i] = std::max(da, db);
    }
    auto sta = strides_of(a), stb = strides_of(b);
    bp.sa.assign(r, 0);
    bp.sb.assign(r, 0);
    for (int i = 0; i < r; ++i) {
        if (i >= r - ra && a[i - (r - ra)] > 1) bp.sa[i] = sta[i - (r - ra)];
        if (i >= r - rb && b[i - (r - rb)] > 1) bp.sb[i] = stb[i - (r - rb)];
    }
    return bp;
}

template <class F>  // F(int64_t io, int64_t ia, int64_t ib)
static void for_each_bcast(const BcastPair& bp, F&& f) {
    int64_t n = numel_of(bp.out);
    if (bp.same) {
        for (int64_t i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    int r = static_cast<int>(bp.out.size());
    if (r == 0) {
        f(0, 0, 0);
        return;
    }
    std::vector<int64_t> idx(r, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t io = 0; io < n; ++io) {
        f(io, ia, ib);
        for (int ax = r - 1; ax >= 0; --ax) {
            idx[ax]++;
            ia += bp.sa[ax];
            ib += bp.sb[ax];
            if (idx[ax] < bp.out[ax]) break;
            ia -= bp.sa[ax] * bp.out[ax];
            ib -= bp.sb[ax] * bp.out[ax];
            idx[ax] = 0;
        }
    }
}

// dfa/dfb compute the local partials given (a, b) element values
template <class FwdF, class DaF, class DbF>
static Tensor ew_binary(const Tensor& a, const Tensor& b, const char* op, FwdF fwd, DaF dfa,
                        DbF dfb) {
    auto bp = broadcast_pair(a.shape(), b.shape(), op);
    std::vector<double> out(numel_of(bp.out));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for_each_bcast(bp, [&](int64_t io, int64_t ia, int64_t ib) { out[io] = fwd(pa[ia], pb[ib]); });
    Tensor res = op_result(bp.out, std::move(out), op, {a.node(), b.node()});
    if (res.requires_grad()) {
        auto an = a.node(), bn = b.node();
        res.node()->backward = [bp, an, bn, dfa, dfb](const std::vector<double>& g,
                                                      const std::vector<std::vector<double>*>& pg) {
            const double* pa = an->data.data();
            const double* pb = bn->data.data();
            std::vector<double>* ga = pg[0];
            std::vector<double>* gb = pg[1];
            for_each_bcast(bp, [&](int64_t io, int64_t ia, int64_t ib) {
                if (ga) (*ga)[ia] += dfa(pa[ia], pb[ib]) * g[io];
                if (gb) (*gb)[ib] += dfb(pa[ia], pb[ib]) * g[io];
            });
        };
    }
    return res;
}

Tensor add(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

// ---- unary elementwise ----------------------------------------------------

// dfd computes df/dx from (x, y) where y = f(x)
template <class FwdF, class DF>
static Tensor ew_unary(const Tensor& a, const char* op, FwdF fwd, DF dfd) {
    const auto& ad = a.data();
    std::vector<double> out(ad.size());
    for (size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
    Tensor res = op_result(a.shape(), std::move(out), op, {a.node()});
    if (res.requires_grad()) {
        auto an = a.node();
        TensorNode* self = res.node().get();
        res.node()->backward = [an, self, dfd](const std::vector<double>& g,
                                               const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            const double* x = an->data.data();
            const double* y = self->data.data();
            auto& ga = *pg[0];
            for (size_t i = 0; i < g.size(); ++i) ga[i] += dfd(x[i], y[i]) * g[i];
        };
    }
    return res;
}

Tensor neg(const Tensor& a) {
    return ew_unary(
        a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double s) {
    return ew_unary(
        a, "scale", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return ew_unary(
        a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
    return ew_unary(
        a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor sqrt(const Tensor& a) {
    return ew_unary(
        a, "sqrt", [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

Tensor tanh(const Tensor& a) {
    return ew_unary(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return ew_unary(
        a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

static constexpr double kGeluC0 = 0.79788456080286536;  // sqrt(2/pi)
static constexpr double kGeluC1 = 0.044715;

Tensor gelu(const Tensor& a) {
    return ew_unary(
        a, "gelu",
        [](double x) {
            return 0.5 * x * (1.0 + std::tanh(kGeluC0 * (x + kGeluC1 * x * x * x)));
        },
        [](double x, double) {
            double u = kGeluC0 * (x + kGeluC1 * x * x * x);
            double t = std::tanh(u);
            double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        });
}

// ---- matmul ---------------------------------------------------------------

static void gemm_acc(double* C, const double* A, const double* B, int64_t M, int64_t K,
                     int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const double* Ai = A + i * K;
        double* Ci = C + i * N;
        for (int64_t k = 0; k < K; ++k) {
            double aik = Ai[k];
            const double* Bk = B + k * N;
            for (int64_t j = 0; j < N; ++j) Ci[j] += aik * Bk[j];
        }
    }
}

// dA[i,k] += sum_j G[i,j] * B[k,j]
static void gemm_gbt_acc(double* dA, const double* G, const double* B, int64_t M, int64_t N,
                         int64_t K) {
    for (int64_t i = 0; i < M; ++i) {
        const double* Gi = G + i * N;
        double* dAi = dA + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const double* Bk = B + k * N;
            double s = 0.0;
            for (int64_t j = 0; j < N; ++j) s += Gi[j] * Bk[j];
            dAi[k] += s;
        }
    }
}

// dB[k,j] += sum_i A[i,k] * G[i,j]
static void gemm_atg_acc(double* dB, const double* A, const double* G, int64_t M, int64_t K,
                         int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const double* Ai = A + i * K;
        const double* Gi = G + i * N;
        for (int64_t k = 0; k < K; ++k) {
            double aik = Ai[k];
            double* dBk = dB + k * N;
            for (int64_t j = 0; j < N; ++j) dBk[j] += aik * Gi[j];
        }
    }
}

struct BatchedMM {
    BcastPair batch;      // strides in units of matrices
    int64_t M, K, N;
    int64_t nbatch;
};

static BatchedMM matmul_plan(const Shape& a, const Shape& b) {
    check(a.size() >= 2 && b.size() >= 2,
          "matmul: operands must have rank >= 2, got " + shape_str(a) + " and " + shape_str(b));
    BatchedMM p;
    p.M = a[a.size() - 2];
    p.K = a[a.size() - 1];
    int64_t kb = b[b.size() - 2];
    p.N = b[b.size() - 1];
    check(p.K == kb, "matmul: inner dimensions mismatch " + shape_str(a) + " x " + shape_str(b));
    Shape ba(a.begin(), a.end() - 2), bb(b.begin(), b.end() - 2);
    p.batch = broadcast_pair(ba, bb, "matmul");
    p.nbatch = numel_of(p.batch.out);
    return p;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    BatchedMM p = matmul_plan(a.shape(), b.shape());
    Shape out_shape = p.batch.out;
    out_shape.push_back(p.M);
    out_shape.push_back(p.N);
    std::vector<double> out(numel_of(out_shape), 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    const int64_t asz = p.M * p.K, bsz = p.K * p.N, csz = p.M * p.N;
    for_each_bcast(p.batch, [&](int64_t io, int64_t ia, int64_t ib) {
        gemm_acc(out.data() + io * csz, pa + ia * asz, pb + ib * bsz, p.M, p.K, p.N);
    });
    Tensor res = op_result(std::move(out_shape), std::move(out), "matmul", {a.node(), b.node()});
    if (res.requires_grad()) {
        auto an = a.node(), bn = b.node();
        res.node()->backward = [p, an, bn, asz, bsz, csz](
                                   const std::vector<double>& g,
                                   const std::vector<std::vector<double>*>& pg) {
            const double* pa = an->data.data();
            const double* pb = bn->data.data();
            for_each_bcast(p.batch, [&](int64_t io, int64_t ia, int64_t ib) {
                if (pg[0])
                    gemm_gbt_acc(pg[0]->data() + ia * asz, g.data() + io * csz, pb + ib * bsz, p.M,
                                 p.N, p.K);
                if (pg[1])
                    gemm_atg_acc(pg[1]->data() + ib * bsz, pa + ia * asz, g.data() + io * csz, p.M,
                                 p.K, p.N);
            });
        };
    }
    return res;
}

// ---- shape ops ------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape s) {
    int64_t known = 1;
    int minus_one = -1;
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] == -1) {
            check(minus_one < 0, "reshape: more than one -1 in " + shape_str(s));
            minus_one = static_cast<int>(i);
        } else {
            known *= s[i];
        }
    }
    if (minus_one >= 0) {
        check(known > 0 && a.numel() % known == 0,
              "reshape: cannot infer axis for " + shape_str(a.shape()) + " -> " + shape_str(s));
        s[minus_one] = a.numel() / known;
    }
    check(numel_of(s) == a.numel(),
          "reshape: element count mismatch " + shape_str(a.shape()) + " -> " + shape_str(s));
    Tensor res = op_result(s, a.data(), "reshape", {a.node()});
    if (res.requires_grad()) {
        res.node()->backward = [](const std::vector<double>& g,
                                  const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            auto& ga = *pg[0];
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        };
    }
    return res;
}

static std::vector<int> normalize_axes(std::vector<int> axes, int rank, const char* op) {
    for (auto& ax : axes) {
        if (ax < 0) ax += rank;
        check(ax >= 0 && ax < rank, std::string(op) + ": axis out of range");
    }
    return axes;
}

Tensor permute(const Tensor& a, const std::vector<int>& axes_in) {
    int r = a.rank();
    auto axes = normalize_axes(axes_in, r, "permute");
    check(static_cast<int>(axes.size()) == r, "permute: axes size must equal rank");
    std::vector<bool> seen(r, false);
    for (int ax : axes) {
        check(!seen[ax], "permute: duplicate axis");
        seen[ax] = true;
    }
    Shape out_shape(r);
    for (int i = 0; i < r; ++i) out_shape[i] = a.shape()[axes[i]];
    auto in_st = strides_of(a.shape());
    std::vector<int64_t> gather_st(r);  // per-out-axis stride into the input
    for (int i = 0; i < r; ++i) gather_st[i] = in_st[axes[i]];

    auto gather = [r, oshape = out_shape](const std::vector<int64_t>& st, const double* src,
                                          double* dst, int64_t n, bool accumulate) {
        std::vector<int64_t> idx(r, 0);
        int64_t off = 0;
        for (int64_t io = 0; io < n; ++io) {
            if (accumulate)
                dst[off] += src[io];
            else
                dst[io] = src[off];
            for (int ax = r - 1; ax >= 0; --ax) {
                idx[ax]++;
                off += st[ax];
                if (idx[ax] < oshape[ax]) break;
                off -= st[ax] * oshape[ax];
                idx[ax] = 0;
            }
        }
    };

    int64_t n = a.numel();
    std::vector<double> out(n);
    gather(gather_st, a.data().data(), out.data(), n, false);
    Tensor res = op_result(std::move(out_shape), std::move(out), "permute", {a.node()});
    if (res.requires_grad()) {
        res.node()->backward = [gather, gather_st, n](const std::vector<double>& g,
                                                      const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            gather(gather_st, g.data(), pg[0]->data(), n, true);
        };
    }
    return res;
}

Tensor transpose(const Tensor& a, int ax0, int ax1) {
    int r = a.rank();
    if (ax0 < 0) ax0 += r;
    if (ax1 < 0) ax1 += r;
    check(ax0 >= 0 && ax0 < r && ax1 >= 0 && ax1 < r, "transpose: axis out of range");
    std::vector<int> axes(r);
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[ax0], axes[ax1]);
    return permute(a, axes);
}

Tensor broadcast_to(const Tensor& a, const Shape& s) {
    auto bp = broadcast_pair(a.shape(), s, "broadcast_to");
    check(bp.out == s,
          "broadcast_to: " + shape_str(a.shape()) + " does not broadcast to " + shape_str(s));
    if (bp.same) return reshape(a, s);
    std::vector<double> out(numel_of(s));
    const double* pa = a.data().data();
    for_each_bcast(bp, [&](int64_t io, int64_t ia, int64_t) { out[io] = pa[ia]; });
    Tensor res = op_result(s, std::move(out), "broadcast_to", {a.node()});
    if (res.requires_grad()) {
        res.node()->backward = [bp](const std::vector<double>& g,
                                    const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            auto& ga = *pg[0];
            for_each_bcast(bp, [&](int64_t io, int64_t ia, int64_t) { ga[ia] += g[io]; });
        };
    }
    return res;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    check(!parts.empty(), "concat: no inputs");
    int r = parts[0].rank();
    if (axis < 0) axis += r;
    check(axis >= 0 && axis < r, "concat: axis out of range");
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const auto& p : parts) {
        check(p.rank() == r, "concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis)
                check(p.shape()[i] == out_shape[i],
                      "concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                          shape_str(out_shape) + " on non-concat axis");
        total += p.shape()[axis];
    }
    out_shape[axis] = total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[i];
    for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];
    std::vector<double> out(numel_of(out_shape));
    int64_t row = total * inner;
    int64_t off = 0;
    std::vector<int64_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(off);
        int64_t len = p.shape()[axis] * inner;
        const double* pd = p.data().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + o * row + off, pd + o * len, len * sizeof(double));
        off += len;
    }
    std::vector<std::shared_ptr<TensorNode>> parents;
    for (const auto& p : parts) parents.push_back(p.node());
    Tensor res = op_result(std::move(out_shape), std::move(out), "concat", std::move(parents));
    if (res.requires_grad()) {
        std::vector<int64_t> lens;
        for (const auto& p : parts) lens.push_back(p.shape()[axis] * inner);
        res.node()->backward = [outer, row, offsets, lens](
                                   const std::vector<double>& g,
                                   const std::vector<std::vector<double>*>& pg) {
            for (size_t pi = 0; pi < lens.size(); ++pi) {
                if (!pg[pi]) continue;
                auto& gp = *pg[pi];
                for (int64_t o = 0; o < outer; ++o) {
                    const double* gsrc = g.data() + o * row + offsets[pi];
                    double* gdst = gp.data() + o * lens[pi];
                    for (int64_t i = 0; i < lens[pi]; ++i) gdst[i] += gsrc[i];
                }
            }
        };
    }
    return res;
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
    int r = a.rank();
    if (axis < 0) axis += r;
    check(axis >= 0 && axis < r, "slice: axis out of range for " + shape_str(a.shape()));
    check(start >= 0 && len >= 1 && start + len <= a.shape()[axis],
          "slice: window [" + std::to_string(start) + "," + std::to_string(start + len) +
              ") out of range for " + shape_str(a.shape()) + " axis " + std::to_string(axis));
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (int i = axis + 1; i < r; ++i) inner *= a.shape()[i];
    int64_t in_row = a.shape()[axis] * inner, out_row = len * inner, off = start * inner;
    std::vector<double> out(numel_of(out_shape));
    const double* pa = a.data().data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * out_row, pa + o * in_row + off, out_row * sizeof(double));
    Tensor res = op_result(std::move(out_shape), std::move(out), "slice", {a.node()});
    if (res.requires_grad()) {
        res.node()->backward = [outer, in_row, out_row, off](
                                   const std::vector<double>& g,
                                   const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            auto& ga = *pg[0];
            for (int64_t o = 0; o < outer; ++o) {
                double* gdst = ga.data() + o * in_row + off;
                const double* gsrc = g.data() + o * out_row;
                for (int64_t i = 0; i < out_row; ++i) gdst[i] += gsrc[i];
            }
        };
    }
    return res;
}

// ---- reductions -----------------------------------------------------------

static Tensor reduce_impl(const Tensor& a, std::vector<int> axes, bool keepdims, bool mean,
                          const char* op) {
    int r = a.rank();
    axes = normalize_axes(std::move(axes), r, op);
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    check(!axes.empty(), std::string(op) + ": no axes given");
    std::vector<bool> reduced(r, false);
    int64_t count = 1;
    for (int ax : axes) {
        reduced[ax] = true;
        count *= a.shape()[ax];
    }
    Shape out_shape;
    for (int i = 0; i < r; ++i) {
        if (!reduced[i])
            out_shape.push_back(a.shape()[i]);
        else if (keepdims)
            out_shape.push_back(1);
    }
    // per-input-axis stride into the output
    std::vector<int64_t> ost(r, 0);
    {
        auto full = strides_of(out_shape);
        int oi = 0;
        for (int i = 0; i < r; ++i) {
            if (!reduced[i])
                ost[i] = full[oi++];
            else if (keepdims)
                oi++;
        }
    }
    double f = mean ? 1.0 / static_cast<double>(count) : 1.0;
    std::vector<double> out(numel_of(out_shape), 0.0);
    const double* pa = a.data().data();
    const Shape& ish = a.shape();
    {
        std::vector<int64_t> idx(r, 0);
        int64_t io = 0;
        for (int64_t i = 0; i < a.numel(); ++i) {
            out[io] += pa[i] * f;
            for (int ax = r - 1; ax >= 0; --ax) {
                idx[ax]++;
                io += ost[ax];
                if (idx[ax] < ish[ax]) break;
                io -= ost[ax] * ish[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor res = op_result(std::move(out_shape), std::move(out), op, {a.node()});
    if (res.requires_grad()) {
        int64_t n = a.numel();
        res.node()->backward = [ost, ish, r, n, f](const std::vector<double>& g,
                                                   const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            auto& ga = *pg[0];
            std::vector<int64_t> idx(r, 0);
            int64_t io = 0;
            for (int64_t i = 0; i < n; ++i) {
                ga[i] += g[io] * f;
                for (int ax = r - 1; ax >= 0; --ax) {
                    idx[ax]++;
                    io += ost[ax];
                    if (idx[ax] < ish[ax]) break;
                    io -= ost[ax] * ish[ax];
                    idx[ax] = 0;
                }
            }
        };
    }
    return res;
}

Tensor reduce_sum(const Tensor& a, std::vector<int> axes, bool keepdims) {
    return reduce_impl(a, std::move(axes), keepdims, false, "reduce_sum");
}

Tensor reduce_mean(const Tensor& a, std::vector<int> axes, bool keepdims) {
    return reduce_impl(a, std::move(axes), keepdims, true, "reduce_mean");
}

static std::vector<int> all_axes(const Tensor& a) {
    std::vector<int> axes(a.rank());
    std::iota(axes.begin(), axes.end(), 0);
    return axes;
}

Tensor reduce_sum_all(const Tensor& a) {
    if (a.rank() == 0) return reshape(a, {});
    return reshape(reduce_sum(a, all_axes(a)), {});
}

Tensor reduce_mean_all(const Tensor& a) {
    if (a.rank() == 0) return reshape(a, {});
    return reshape(reduce_mean(a, all_axes(a)), {});
}

// ---- softmax / layer_norm ---------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    int r = a.rank();
    if (axis < 0) axis += r;
    check(axis >= 0 && axis < r, "softmax: invalid axis for " + shape_str(a.shape()));
    int64_t len = a.shape()[axis];
    int64_t inner = 1;
    for (int i = axis + 1; i < r; ++i) inner *= a.shape()[i];
    int64_t outer = a.numel() / (len * inner);
    std::vector<double> out(a.numel());
    const double* pa = a.data().data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * len * inner + in;
            double mx = pa[base];
            for (int64_t j = 1; j < len; ++j) mx = std::max(mx, pa[base + j * inner]);
            double sum = 0.0;
            for (int64_t j = 0; j < len; ++j) {
                double e = std::exp(pa[base + j * inner] - mx);
                out[base + j * inner] = e;
                sum += e;
            }
            double inv = 1.0 / sum;
            for (int64_t j = 0; j < len; ++j) out[base + j * inner] *= inv;
        }
    }
    Tensor res = op_result(a.shape(), std::move(out), "softmax", {a.node()});
    if (res.requires_grad()) {
        TensorNode* self = res.node().get();
        res.node()->backward = [self, outer, inner, len](
                                   const std::vector<double>& g,
                                   const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            auto& ga = *pg[0];
            const double* y = self->data.data();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (int64_t j = 0; j < len; ++j)
                        dot += g[base + j * inner] * y[base + j * inner];
                    for (int64_t j = 0; j < len; ++j) {
                        int64_t ix = base + j * inner;
                        ga[ix] += y[ix] * (g[ix] - dot);
                    }
                }
            }
        };
    }
    return res;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check(x.rank() >= 1, "layer_norm: input must have rank >= 1");
    int64_t D = x.shape()[x.rank() - 1];
    check(gain.rank() == 1 && gain.shape()[0] == D,
          "layer_norm: gain shape " + shape_str(gain.shape()) + " must be [" + std::to_string(D) +
              "]");
    check(bias.rank() == 1 && bias.shape()[0] == D,
          "layer_norm: bias shape " + shape_str(bias.shape()) + " must be [" + std::to_string(D) +
              "]");
    int64_t R = x.numel() / D;
    std::vector<double> out(x.numel());
    std::vector<double> mu(R), rstd(R);
    const double* px = x.data().data();
    const double* pgain = gain.data().data();
    const double* pbias = bias.data().data();
    for (int64_t r = 0; r < R; ++r) {
        const double* row = px + r * D;
        double m = 0.0;
        for (int64_t j = 0; j < D; ++j) m += row[j];
        m /= static_cast<double>(D);
        double v = 0.0;
        for (int64_t j = 0; j < D; ++j) {
            double d = row[j] - m;
            v += d * d;
        }
        v /= static_cast<double>(D);
        double rs = 1.0 / std::sqrt(v + eps);
        mu[r] = m;
        rstd[r] = rs;
        double* orow = out.data() + r * D;
        for (int64_t j = 0; j < D; ++j) orow[j] = (row[j] - m) * rs * pgain[j] + pbias[j];
    }
    Tensor res = op_result(x.shape(), std::move(out), "layer_norm",
                           {x.node(), gain.node(), bias.node()});
    if (res.requires_grad()) {
        auto xn = x.node();
        auto gn = gain.node();
        res.node()->backward = [xn, gn, mu, rstd, R, D](const std::vector<double>& g,
                                                        const std::vector<std::vector<double>*>& pg) {
            const double* px = xn->data.data();
            const double* pgain = gn->data.data();
            for (int64_t r = 0; r < R; ++r) {
                const double* row = px + r * D;
                const double* grow = g.data() + r * D;
                double m = mu[r], rs = rstd[r];
                double mean_h = 0.0, mean_hx = 0.0;
                for (int64_t j = 0; j < D; ++j) {
                    double xh = (row[j] - m) * rs;
                    double h = grow[j] * pgain[j];
                    mean_h += h;
                    mean_hx += h * xh;
                }
                mean_h /= static_cast<double>(D);
                mean_hx /= static_cast<double>(D);
                for (int64_t j = 0; j < D; ++j) {
                    double xh = (row[j] - m) * rs;
                    if (pg[0])
                        (*pg[0])[r * D + j] += rs * (grow[j] * pgain[j] - mean_h - xh * mean_hx);
                    if (pg[1]) (*pg[1])[j] += grow[j] * xh;
                    if (pg[2]) (*pg[2])[j] += grow[j];
                }
            }
        };
    }
    return res;
}

// ---- attention --------------------------------------------------------------

// softmax over the last axis with an attend mask; fully-masked rows yield zeros
static Tensor masked_softmax_last(const Tensor& scores, const Tensor& mask) {
    auto bp = broadcast_pair(scores.shape(), mask.shape(), "attention-mask");
    check(bp.out == scores.shape(), "attention: mask " + shape_str(mask.shape()) +
                                        " does not broadcast to scores " +
                                        shape_str(scores.shape()));
    std::vector<uint8_t> vis(scores.numel());
    const double* pm = mask.data().data();
    for_each_bcast(bp, [&](int64_t io, int64_t, int64_t ib) { vis[io] = pm[ib] > 0.5 ? 1 : 0; });

    int64_t len = scores.shape()[scores.rank() - 1];
    int64_t rows = scores.numel() / len;
    std::vector<double> out(scores.numel(), 0.0);
    const double* ps = scores.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* srow = ps + r * len;
        const uint8_t* mrow = vis.data() + r * len;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < len; ++j)
            if (mrow[j]) mx = std::max(mx, srow[j]);
        if (!std::isfinite(mx)) continue;  // all masked: zeros
        double sum = 0.0;
        double* orow = out.data() + r * len;
        for (int64_t j = 0; j < len; ++j) {
            if (!mrow[j]) continue;
            double e = std::exp(srow[j] - mx);
            orow[j] = e;
            sum += e;
        }
        double inv = 1.0 / sum;
        for (int64_t j = 0; j < len; ++j) orow[j] *= inv;
    }
    Tensor res =
        op_result(scores.shape(), std::move(out), "masked_softmax", {scores.node()});
    if (res.requires_grad()) {
        TensorNode* self = res.node().get();
        res.node()->backward = [self, vis, rows, len](const std::vector<double>& g,
                                                      const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            auto& ga = *pg[0];
            const double* y = self->data.data();
            for (int64_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (int64_t j = 0; j < len; ++j) dot += g[r * len + j] * y[r * len + j];
                for (int64_t j = 0; j < len; ++j) {
                    int64_t ix = r * len + j;
                    if (vis[ix]) ga[ix] += y[ix] * (g[ix] - dot);
                }
            }
        };
    }
    return res;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const std::optional<Tensor>& mask) {
    check(q.rank() >= 2 && k.rank() >= 2 && v.rank() >= 2,
          "attention: q/k/v must have rank >= 2");
    int64_t dk = q.shape()[q.rank() - 1];
    check(k.shape()[k.rank() - 1] == dk,
          "attention: key dim mismatch q " + shape_str(q.shape()) + " vs k " +
              shape_str(k.shape()));
    check(k.shape()[k.rank() - 2] == v.shape()[v.rank() - 2],
          "attention: k " + shape_str(k.shape()) + " and v " + shape_str(v.shape()) +
              " sequence lengths differ");
    Tensor scores = scale(matmul(q, transpose(k, -1, -2)), 1.0 / std::sqrt(static_cast<double>(dk)));
    Tensor probs = mask ? masked_softmax_last(scores, *mask) : softmax(scores, -1);
    return matmul(probs, v);
}

// ---- rotary position embedding ----------------------------------------------

Tensor rope_apply(const Tensor& x, const std::vector<int64_t>& positions, double base) {
    check(x.rank() >= 2, "rope_apply: input must have rank >= 2");
    int64_t D = x.shape()[x.rank() - 1];
    check(D % 2 == 0, "rope_apply: feature dimension must be even, got " + std::to_string(D));
    int64_t T = x.shape()[x.rank() - 2];
    check(static_cast<int64_t>(positions.size()) == T,
          "rope_apply: positions length " + std::to_string(positions.size()) +
              " != sequence length " + std::to_string(T));
    int64_t half = D / 2;
    std::vector<double> cs(T * half), sn(T * half);
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t i = 0; i < half; ++i) {
            double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(D));
            double ang = static_cast<double>(positions[t]) * freq;
            cs[t * half + i] = std::cos(ang);
            sn[t * half + i] = std::sin(ang);
        }
    }
    int64_t outer = x.numel() / (T * D);
    std::vector<double> out(x.numel());
    const double* px = x.data().data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t t = 0; t < T; ++t) {
            const double* row = px + (o * T + t) * D;
            double* orow = out.data() + (o * T + t) * D;
            for (int64_t i = 0; i < half; ++i) {
                double c = cs[t * half + i], s = sn[t * half + i];
                double x0 = row[2 * i], x1 = row[2 * i + 1];
                orow[2 * i] = x0 * c - x1 * s;
                orow[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    Tensor res = op_result(x.shape(), std::move(out), "rope", {x.node()});
    if (res.requires_grad()) {
        res.node()->backward = [cs, sn, outer, T, half](const std::vector<double>& g,
                                                        const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            auto& ga = *pg[0];
            int64_t D = half * 2;
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t t = 0; t < T; ++t) {
                    const double* grow = g.data() + (o * T + t) * D;
                    double* arow = ga.data() + (o * T + t) * D;
                    for (int64_t i = 0; i < half; ++i) {
                        double c = cs[t * half + i], s = sn[t * half + i];
                        double g0 = grow[2 * i], g1 = grow[2 * i + 1];
                        arow[2 * i] += g0 * c + g1 * s;
                        arow[2 * i + 1] += -g0 * s + g1 * c;
                    }
                }
            }
        };
    }
    return res;
}

Tensor one_hot(const std::vector<int64_t>& ids, int64_t depth) {
    check(depth >= 1, "one_hot: depth must be >= 1");
    int64_t n = static_cast<int64_t>(ids.size());
    check(n >= 1, "one_hot: empty id list");
    std::vector<double> d(n * depth, 0.0);
    for (int64_t i = 0; i < n; ++i) {
        check(ids[i] >= 0 && ids[i] < depth, "one_hot: id out of range");
        d[i * depth + ids[i]] = 1.0;
    }
    return Tensor({n, depth}, std::move(d));
}

}  // namespace mvdiff
