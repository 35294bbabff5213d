#include <cmath>
#include <map>

#include "doctest.h"
#include "fd_check.hpp"
#include "mvdiff/tensor.hpp"

using namespace mvdiff;

namespace {

Tensor leaf(const Tensor& t) { return Tensor(t.shape(), t.data(), true); }

// brute-force scaled dot-product attention, three nested loops, 2-d inputs
std::vector<double> attention_ref(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const std::vector<uint8_t>* mask = nullptr) {
    int64_t sq = q.shape()[0], dk = q.shape()[1];
    int64_t sk = k.shape()[0], dv = v.shape()[1];
    std::vector<double> out(sq * dv, 0.0);
    for (int64_t i = 0; i < sq; ++i) {
        std::vector<double> scores(sk, -std::numeric_limits<double>::infinity());
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < sk; ++j) {
            if (mask && !(*mask)[i * sk + j]) continue;
            double s = 0.0;
            for (int64_t d = 0; d < dk; ++d) s += q.data()[i * dk + d] * k.data()[j * dk + d];
            scores[j] = s / std::sqrt(static_cast<double>(dk));
            mx = std::max(mx, scores[j]);
        }
        if (!std::isfinite(mx)) continue;
        double denom = 0.0;
        std::vector<double> w(sk, 0.0);
        for (int64_t j = 0; j < sk; ++j) {
            if (!std::isfinite(scores[j])) continue;
            w[j] = std::exp(scores[j] - mx);
            denom += w[j];
        }
        for (int64_t j = 0; j < sk; ++j)
            for (int64_t d = 0; d < dv; ++d)
                out[i * dv + d] += w[j] / denom * v.data()[j * dv + d];
    }
    return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("matmul identity and 2x2 arithmetic") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor eye({2, 2}, {1, 0, 0, 1});
    auto r = matmul(a, eye);
    CHECK(r.data() == std::vector<double>{1, 2, 3, 4});

    Tensor b({2, 2}, {5, 6, 7, 8});
    auto r2 = matmul(a, b);
    CHECK(r2.data() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul gradient equals ones*B^T and matches finite differences") {
    Rng rng(7);
    auto A = leaf(Tensor::randn({3, 4}, rng));
    auto B = leaf(Tensor::randn({4, 5}, rng));
    auto out = reduce_sum_all(matmul(A, B));
    auto grads = backward(out);
    auto gA = grads.at(A);
    // d/dA sum(AB) = ones * B^T
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t k = 0; k < 4; ++k) {
            double expect = 0.0;
            for (int64_t j = 0; j < 5; ++j) expect += B.data()[k * 5 + j];
            CHECK(gA.data()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
        }
    auto rep = fd::check_gradients([&] { return reduce_sum_all(matmul(A, B)).item(); }, {A, B},
                                   {grads.at(A), grads.at(B)});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("shape errors name the op and both shapes") {
    Tensor a({2, 3}, std::vector<double>(6, 1.0));
    Tensor b({4, 5}, std::vector<double>(20, 1.0));
    CHECK_THROWS_WITH_AS(matmul(a, b),
                         doctest::Contains("matmul: inner dimensions mismatch [2,3] x [4,5]"),
                         TensorError);
    CHECK_THROWS_AS(add(Tensor({3}, {1, 2, 3}), Tensor({2}, {1, 2})), TensorError);
}

TEST_CASE("broadcast add/mul with trailing-axis alignment") {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor row({3}, {10, 20, 30});
    auto s = add(a, row);
    CHECK(s.data() == std::vector<double>{11, 22, 33, 14, 25, 36});
    Tensor col({2, 1}, {1, 2});
    auto p = mul(a, col);
    CHECK(p.data() == std::vector<double>{1, 2, 3, 8, 10, 12});
}

TEST_CASE("finite differences across randomized primitives up to rank 5") {
    Rng rng(11);
    // binary ops with broadcast
    {
        auto a = leaf(Tensor::randn({2, 1, 3, 2, 4}, rng));
        auto b = leaf(Tensor::randn({5, 1, 2, 4}, rng));
        auto fwd = [&] { return reduce_sum_all(mul(add(a, b), sub(a, b))).item(); };
        auto out = reduce_sum_all(mul(add(a, b), sub(a, b)));
        auto g = backward(out);
        auto rep = fd::check_gradients(fwd, {a, b}, {g.at(a), g.at(b)});
        CHECK(rep.max_rel_err < 1e-4);
    }
    {
        auto a = leaf(Tensor::uniform({3, 4}, rng, 0.5, 2.0));
        auto b = leaf(Tensor::uniform({3, 4}, rng, 0.5, 2.0));
        auto out = reduce_sum_all(div(a, b));
        auto g = backward(out);
        auto rep = fd::check_gradients([&] { return reduce_sum_all(div(a, b)).item(); }, {a, b},
                                       {g.at(a), g.at(b)});
        CHECK(rep.max_rel_err < 1e-4);
    }
    // unary chain: exp, sqrt, tanh, sigmoid, gelu
    {
        auto x = leaf(Tensor::uniform({2, 3, 4}, rng, 0.2, 1.5));
        auto fwd = [&] {
            auto y = gelu(add(sigmoid(x), tanh(mvdiff::sqrt(mvdiff::exp(x)))));
            return reduce_sum_all(y).item();
        };
        auto out = gelu(add(sigmoid(x), tanh(mvdiff::sqrt(mvdiff::exp(x)))));
        auto g = backward(reduce_sum_all(out));
        auto rep = fd::check_gradients(fwd, {x}, {g.at(x)});
        CHECK(rep.max_rel_err < 1e-4);
    }
    // structural ops: reshape, permute, slice, concat, broadcast_to, reductions
    {
        auto x = leaf(Tensor::randn({2, 3, 4}, rng));
        auto y = leaf(Tensor::randn({2, 3, 4}, rng));
        auto fwd = [&] {
            auto a1 = permute(reshape(x, {6, 4}), {1, 0});          // [4,6]
            auto a2 = slice(a1, 1, 1, 4);                           // [4,4]
            auto a3 = concat({a2, slice(permute(reshape(y, {6, 4}), {1, 0}), 1, 0, 4)}, 0);
            auto a4 = broadcast_to(reduce_mean(a3, {0}, true), {8, 4});
            return reduce_sum_all(mul(a4, a3)).item();
        };
        auto a1 = permute(reshape(x, {6, 4}), {1, 0});
        auto a2 = slice(a1, 1, 1, 4);
        auto a3 = concat({a2, slice(permute(reshape(y, {6, 4}), {1, 0}), 1, 0, 4)}, 0);
        auto a4 = broadcast_to(reduce_mean(a3, {0}, true), {8, 4});
        auto g = backward(reduce_sum_all(mul(a4, a3)));
        auto rep = fd::check_gradients(fwd, {x, y}, {g.at(x), g.at(y)});
        CHECK(rep.max_rel_err < 1e-4);
    }
    // batched matmul with broadcast batch dims
    {
        auto a = leaf(Tensor::randn({2, 1, 3, 4}, rng));
        auto b = leaf(Tensor::randn({5, 4, 2}, rng));
        auto out = reduce_sum_all(matmul(a, b));
        auto g = backward(out);
        auto rep = fd::check_gradients([&] { return reduce_sum_all(matmul(a, b)).item(); },
                                       {a, b}, {g.at(a), g.at(b)});
        CHECK(rep.max_rel_err < 1e-4);
    }
}

TEST_CASE("softmax basics") {
    Tensor u({4}, {2.5, 2.5, 2.5, 2.5});
    auto p = softmax(u, 0);
    for (double v : p.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

    Rng rng(3);
    auto x = Tensor::randn({5}, rng);
    auto shifted = add_scalar(x, 17.5);
    auto p1 = softmax(x, 0);
    auto p2 = softmax(shifted, 0);
    CHECK(max_abs_diff(p1.data(), p2.data()) < 1e-12);

    // rows sum to one
    auto m = Tensor::randn({3, 6}, rng);
    auto pm = softmax(m, 1);
    for (int64_t r = 0; r < 3; ++r) {
        double s = 0.0;
        for (int64_t j = 0; j < 6; ++j) s += pm.data()[r * 6 + j];
        CHECK(std::fabs(s - 1.0) < 1e-12);
    }

    CHECK_THROWS_AS(softmax(m, 2), TensorError);
}

TEST_CASE("softmax gradient matches finite differences") {
    Rng rng(5);
    auto x = leaf(Tensor::randn({3, 7}, rng));
    auto w = Tensor::randn({3, 7}, rng);  // fixed weights make the scalar nontrivial
    auto fwd = [&] { return reduce_sum_all(mul(softmax(x, 1), w)).item(); };
    auto g = backward(reduce_sum_all(mul(softmax(x, 1), w)));
    auto rep = fd::check_gradients(fwd, {x}, {g.at(x)});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("layer_norm constant row and zero mean") {
    Tensor x({2, 4}, {3, 3, 3, 3, -1, -1, -1, -1});
    auto gain = Tensor::ones({4});
    Tensor bias({4}, {0.5, 0.5, 0.5, 0.5});
    auto y = layer_norm(x, gain, bias);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-9));

    Rng rng(9);
    auto xr = Tensor::randn({6, 16}, rng);
    auto yr = layer_norm(xr, Tensor::ones({16}), Tensor::zeros({16}));
    for (int64_t r = 0; r < 6; ++r) {
        double mean = 0.0;
        for (int64_t j = 0; j < 16; ++j) mean += yr.data()[r * 16 + j];
        mean /= 16.0;
        CHECK(std::fabs(mean) < 1e-10);
    }

    CHECK_THROWS_AS(layer_norm(xr, Tensor::ones({5}), Tensor::zeros({16})), TensorError);
}

TEST_CASE("layer_norm gradient matches finite differences") {
    Rng rng(13);
    auto x = leaf(Tensor::randn({4, 8}, rng));
    auto gain = leaf(Tensor::uniform({8}, rng, 0.5, 1.5));
    auto bias = leaf(Tensor::randn({8}, rng));
    auto w = Tensor::randn({4, 8}, rng);
    auto fwd = [&] { return reduce_sum_all(mul(layer_norm(x, gain, bias), w)).item(); };
    auto g = backward(reduce_sum_all(mul(layer_norm(x, gain, bias), w)));
    auto rep = fd::check_gradients(fwd, {x, gain, bias}, {g.at(x), g.at(gain), g.at(bias)});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("attention degenerate and masked cases") {
    Rng rng(21);
    // single key/value: output equals the value row
    auto q = Tensor::randn({3, 4}, rng);
    auto k = Tensor::randn({1, 4}, rng);
    auto v = Tensor::randn({1, 5}, rng);
    auto out = attention(q, k, v);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t d = 0; d < 5; ++d)
            CHECK(out.data()[i * 5 + d] == doctest::Approx(v.data()[d]).epsilon(1e-12));

    // mask selecting exactly one key
    auto k4 = Tensor::randn({4, 4}, rng);
    auto v4 = Tensor::randn({4, 5}, rng);
    Tensor mask({3, 4}, {0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0});
    auto sel = attention(q, k4, v4, mask);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t d = 0; d < 5; ++d)
            CHECK(sel.data()[i * 5 + d] == doctest::Approx(v4.data()[2 * 5 + d]).epsilon(1e-12));

    // all-masked rows return zeros
    Tensor none({3, 4}, std::vector<double>(12, 0.0));
    auto z = attention(q, k4, v4, none);
    for (double val : z.data()) CHECK(val == 0.0);
}

TEST_CASE("attention equals the three-loop reference") {
    Rng rng(31);
    auto q = Tensor::randn({6, 8}, rng);
    auto k = Tensor::randn({9, 8}, rng);
    auto v = Tensor::randn({9, 3}, rng);
    auto out = attention(q, k, v);
    CHECK(max_abs_diff(out.data(), attention_ref(q, k, v)) < 1e-10);

    // with a random mask
    std::vector<uint8_t> mraw(6 * 9);
    std::vector<double> md(6 * 9);
    for (size_t i = 0; i < mraw.size(); ++i) {
        mraw[i] = rng.uniform() < 0.6 ? 1 : 0;
        md[i] = mraw[i];
    }
    auto outm = attention(q, k, v, Tensor({6, 9}, md));
    CHECK(max_abs_diff(outm.data(), attention_ref(q, k, v, &mraw)) < 1e-10);
}

TEST_CASE("attention with uniform scores equals the mean of values") {
    Rng rng(33);
    auto q = Tensor::zeros({4, 8});  // zero queries -> uniform scores
    auto k = Tensor::randn({5, 8}, rng);
    auto v = Tensor::randn({5, 3}, rng);
    auto out = attention(q, k, v);
    for (int64_t d = 0; d < 3; ++d) {
        double mean = 0.0;
        for (int64_t j = 0; j < 5; ++j) mean += v.data()[j * 3 + d] / 5.0;
        for (int64_t i = 0; i < 4; ++i)
            CHECK(out.data()[i * 3 + d] == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("attention gradient matches finite differences") {
    Rng rng(41);
    auto q = leaf(Tensor::randn({4, 6}, rng));
    auto k = leaf(Tensor::randn({5, 6}, rng));
    auto v = leaf(Tensor::randn({5, 4}, rng));
    std::vector<double> md(4 * 5);
    for (auto& m : md) m = rng.uniform() < 0.7 ? 1.0 : 0.0;
    Tensor mask({4, 5}, md);
    auto w = Tensor::randn({4, 4}, rng);
    auto fwd = [&] { return reduce_sum_all(mul(attention(q, k, v, mask), w)).item(); };
    auto g = backward(reduce_sum_all(mul(attention(q, k, v, mask), w)));
    auto rep = fd::check_gradients(fwd, {q, k, v}, {g.at(q), g.at(k), g.at(v)});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("rope identity at position zero and norm preservation") {
    Rng rng(51);
    auto x = Tensor::randn({1, 8}, rng);
    auto y = rope_apply(x, {0});
    CHECK(max_abs_diff(x.data(), y.data()) == 0.0);

    for (int64_t p : {1, 3, 17, 100}) {
        auto xp = Tensor::randn({1, 8}, rng);
        auto yp = rope_apply(xp, {p});
        double nx = 0.0, ny = 0.0;
        for (double v : xp.data()) nx += v * v;
        for (double v : yp.data()) ny += v * v;
        CHECK(std::fabs(std::sqrt(nx) - std::sqrt(ny)) < 1e-12);
    }

    CHECK_THROWS_AS(rope_apply(Tensor::randn({2, 5}, rng), {0, 1}), TensorError);
}

TEST_CASE("rope inner products depend only on relative position") {
    Rng rng(61);
    auto q = Tensor::randn({1, 4}, rng);
    auto k = Tensor::randn({1, 4}, rng);
    auto dot = [&](const Tensor& a, const Tensor& b) {
        double s = 0.0;
        for (int64_t i = 0; i < 4; ++i) s += a.data()[i] * b.data()[i];
        return s;
    };
    // enumerate all m, n in [0,8); bucket by m-n and compare within buckets
    std::map<int64_t, std::vector<double>> by_delta;
    for (int64_t m = 0; m < 8; ++m)
        for (int64_t n = 0; n < 8; ++n)
            by_delta[m - n].push_back(dot(rope_apply(q, {m}), rope_apply(k, {n})));
    for (auto& [delta, vals] : by_delta)
        for (double v : vals) CHECK(v == doctest::Approx(vals[0]).epsilon(1e-10));
}

TEST_CASE("rope gradient matches finite differences") {
    Rng rng(71);
    auto x = leaf(Tensor::randn({2, 3, 6}, rng));
    auto w = Tensor::randn({2, 3, 6}, rng);
    auto fwd = [&] {
        return reduce_sum_all(mul(rope_apply(x, {0, 4, 9}), w)).item();
    };
    auto g = backward(reduce_sum_all(mul(rope_apply(x, {0, 4, 9}), w)));
    auto rep = fd::check_gradients(fwd, {x}, {g.at(x)});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("backward seed semantics and fan-out accumulation") {
    // identity map: gradient equals the seed
    auto x = Tensor({2, 2}, {1, 2, 3, 4}, true);
    Tensor seed({2, 2}, {5, 6, 7, 8});
    auto g1 = backward(reshape(x, {2, 2}), seed);
    CHECK(g1.at(x).data() == seed.data());

    // y = x + x: gradient is twice the seed
    auto y = add(x, x);
    auto g2 = backward(y, seed);
    CHECK(g2.at(x).data() == std::vector<double>{10, 12, 14, 16});

    // seed shape mismatch is an error
    CHECK_THROWS_AS(backward(y, Tensor::ones({3})), TensorError);

    // tensors without requires_grad receive no gradient
    auto c = Tensor({2, 2}, {1, 1, 1, 1});
    auto z = add(x, c);
    auto g3 = backward(z, seed);
    CHECK_FALSE(g3.contains(c));
}

TEST_CASE("composite MLP gradient matches finite differences") {
    Rng rng(81);
    auto x = Tensor::randn({4, 6}, rng);
    auto w1 = leaf(Tensor::randn({6, 8}, rng, 0.5));
    auto b1 = leaf(Tensor::zeros({8}));
    auto w2 = leaf(Tensor::randn({8, 3}, rng, 0.5));
    auto b2 = leaf(Tensor::zeros({3}));
    auto run = [&] {
        auto h = gelu(add(matmul(x, w1), b1));
        return reduce_mean_all(mul(add(matmul(h, w2), b2), add(matmul(h, w2), b2)));
    };
    auto g = backward(run());
    auto rep = fd::check_gradients([&] { return run().item(); }, {w1, b1, w2, b2},
                                   {g.at(w1), g.at(b1), g.at(w2), g.at(b2)});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("primitives are deterministic") {
    Rng rng(91);
    auto a = Tensor::randn({3, 5, 7}, rng);
    auto b = Tensor::randn({5, 7}, rng);
    auto f = [&] {
        auto t = softmax(mul(add(a, b), a), -1);
        return layer_norm(t, Tensor::ones({7}), Tensor::zeros({7}));
    };
    auto r1 = f();
    auto r2 = f();
    CHECK(r1.data() == r2.data());  // bit-identical
}

TEST_CASE("no-grad mode records no graph") {
    auto x = Tensor({2}, {1, 2}, true);
    {
        NoGradGuard ng;
        auto y = add(x, x);
        CHECK_FALSE(y.requires_grad());
    }
    auto y = add(x, x);
    CHECK(y.requires_grad());
}
