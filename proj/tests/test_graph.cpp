#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "ul/graph.hpp"
#include "ul/rng.hpp"

using namespace ul;

namespace {

// Contract the output against a fixed iota tensor before summing. A plain
// sum would give position-independent gradients, letting a wrong index map
// in a layout op slip through the finite-difference comparison.
Ref weigh(Graph& g, Ref y) {
    Tensor k = Tensor::zeros(g.val(y).shape);
    for (size_t i = 0; i < k.data.size(); ++i) k.data[i] = 0.1 * static_cast<double>(i + 1);
    return g.sum_all(g.mul(y, g.input(std::move(k))));
}

using Builder = std::function<Ref(Graph&, const std::vector<Ref>&)>;

void gradcheck(const std::vector<Tensor>& inputs, const Builder& build, double tol = 1e-6) {
    Graph g;
    std::vector<Ref> refs;
    refs.reserve(inputs.size());
    for (const Tensor& t : inputs) refs.push_back(g.input(t, /*needs_grad=*/true));
    Ref out = build(g, refs);
    REQUIRE(g.val(out).numel() == 1);
    g.backward(out);

    auto eval = [&](const std::vector<Tensor>& xs) {
        Graph h;
        std::vector<Ref> rs;
        rs.reserve(xs.size());
        for (const Tensor& t : xs) rs.push_back(h.input(t));
        return h.val(build(h, rs)).data[0];
    };

    const double h = 1e-5;
    for (size_t k = 0; k < inputs.size(); ++k) {
        for (size_t i = 0; i < inputs[k].data.size(); ++i) {
            std::vector<Tensor> plus = inputs, minus = inputs;
            plus[k].data[i] += h;
            minus[k].data[i] -= h;
            const double fd = (eval(plus) - eval(minus)) / (2.0 * h);
            const double an = g.grad(refs[k]).data[i];
            CHECK(std::abs(an - fd) <= tol * std::max(1.0, std::abs(fd)));
        }
    }
}

std::vector<Tensor> randn(Rng& rng, std::initializer_list<std::vector<int>> shapes) {
    std::vector<Tensor> out;
    for (const auto& s : shapes) out.push_back(rng.normal_tensor(s));
    return out;
}

}  // namespace

TEST_CASE("elementwise ops backpropagate correctly") {
    Rng rng(100);
    auto xy = randn(rng, {{2, 3}, {2, 3}});
    gradcheck(xy, [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.add(r[0], r[1])); });
    gradcheck(xy, [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.sub(r[0], r[1])); });
    gradcheck(xy, [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.mul(r[0], r[1])); });
    auto x = randn(rng, {{5}});
    gradcheck(x, [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.scale(r[0], -1.7)); });
    gradcheck(x,
              [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.add_scalar(r[0], 2.5)); });
    gradcheck(x, [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.silu(r[0])); });
    gradcheck(x, [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.sigmoid(r[0])); });
    gradcheck(x, [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.exp(r[0])); });
    gradcheck(x, [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.softplus(r[0])); });
    // log needs positive inputs
    Tensor pos = Tensor::zeros({4});
    for (size_t i = 0; i < 4; ++i) pos.data[i] = 0.5 + 0.4 * static_cast<double>(i);
    gradcheck({pos}, [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.log(r[0])); });
}

TEST_CASE("matmul handles 2-d and batched 3-d left operands") {
    Rng rng(101);
    gradcheck(randn(rng, {{3, 4}, {4, 2}}),
              [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.matmul(r[0], r[1])); });
    gradcheck(randn(rng, {{2, 3, 4}, {4, 5}}),
              [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.matmul(r[0], r[1])); });
    Graph g;
    Ref a = g.input(Tensor::zeros({2, 3}));
    Ref b = g.input(Tensor::zeros({4, 2}));
    CHECK_THROWS_AS(g.matmul(a, b), std::invalid_argument);
}

TEST_CASE("bias add broadcasts over leading dims") {
    Rng rng(102);
    gradcheck(randn(rng, {{2, 3, 4}, {4}}),
              [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.add_bias(r[0], r[1])); });
    Graph g;
    Ref x = g.input(Tensor::zeros({2, 3}));
    Ref b = g.input(Tensor::zeros({2}));
    CHECK_THROWS_AS(g.add_bias(x, b), std::invalid_argument);
}

TEST_CASE("conv2d same-padding forward matches a hand computation") {
    // 1x1 image, 3x3 kernel: only the kernel center touches the pixel
    Graph g;
    Ref x = g.input(Tensor::full({1, 1, 1, 1}, 2.0));
    Tensor w = Tensor::zeros({3, 3, 1, 1});
    for (size_t i = 0; i < 9; ++i) w.data[i] = static_cast<double>(i + 1);
    Ref wr = g.input(w);
    Ref br = g.input(Tensor::full({1}, 0.25));
    Ref y = g.conv2d(x, wr, br);
    CHECK(g.val(y).data[0] == doctest::Approx(2.0 * 5.0 + 0.25).epsilon(1e-15));

    // 2x2 image of ones, all-ones kernel: each output counts its in-bounds taps
    Graph g2;
    Ref x2 = g2.input(Tensor::full({1, 2, 2, 1}, 1.0));
    Ref w2 = g2.input(Tensor::full({3, 3, 1, 1}, 1.0));
    Ref b2 = g2.input(Tensor::zeros({1}));
    const Tensor& v = g2.val(g2.conv2d(x2, w2, b2));
    for (double o : v.data) CHECK(o == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(103);
    gradcheck(randn(rng, {{2, 3, 3, 2}, {3, 3, 2, 2}, {2}}),
              [](Graph& g, const std::vector<Ref>& r) {
                  return weigh(g, g.conv2d(r[0], r[1], r[2]));
              });
    gradcheck(randn(rng, {{1, 2, 2, 3}, {1, 1, 3, 2}, {2}}),
              [](Graph& g, const std::vector<Ref>& r) {
                  return weigh(g, g.conv2d(r[0], r[1], r[2]));
              });
    Graph g;
    Ref x = g.input(Tensor::zeros({1, 2, 2, 3}));
    Ref w = g.input(Tensor::zeros({2, 2, 3, 1}));  // even kernel size
    Ref b = g.input(Tensor::zeros({1}));
    CHECK_THROWS_AS(g.conv2d(x, w, b), std::invalid_argument);
}

TEST_CASE("layout ops are exact permutations with exact adjoints") {
    Rng rng(104);
    gradcheck(randn(rng, {{2, 3, 4}}), [](Graph& g, const std::vector<Ref>& r) {
        return weigh(g, g.reshape(r[0], {4, 3, 2}));
    });
    gradcheck(randn(rng, {{2, 3, 4}}),
              [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.transpose_12(r[0])); });
    gradcheck(randn(rng, {{1, 4, 4, 2}}), [](Graph& g, const std::vector<Ref>& r) {
        return weigh(g, g.space_to_depth(r[0], 2));
    });
    gradcheck(randn(rng, {{1, 2, 2, 8}}), [](Graph& g, const std::vector<Ref>& r) {
        return weigh(g, g.depth_to_space(r[0], 2));
    });
    gradcheck(randn(rng, {{1, 2, 2, 3}}), [](Graph& g, const std::vector<Ref>& r) {
        return weigh(g, g.upsample_nearest(r[0], 2));
    });
    gradcheck(randn(rng, {{2, 2, 3}, {2, 2, 2}}), [](Graph& g, const std::vector<Ref>& r) {
        return weigh(g, g.concat_last(r[0], r[1]));
    });
    gradcheck(randn(rng, {{2, 2, 5}}), [](Graph& g, const std::vector<Ref>& r) {
        return weigh(g, g.slice_last(r[0], 1, 4));
    });
}

TEST_CASE("space_to_depth then depth_to_space is the identity") {
    Rng rng(105);
    Tensor x = rng.normal_tensor({2, 4, 6, 3});
    Graph g;
    Ref r = g.input(x);
    const Tensor& y = g.val(g.depth_to_space(g.space_to_depth(r, 2), 2));
    REQUIRE(y.shape == x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) CHECK(y.data[i] == x.data[i]);
}

TEST_CASE("layer norm normalizes rows and backpropagates through the statistics") {
    Rng rng(106);
    auto inputs = randn(rng, {{3, 6}, {6}, {6}});
    // keep gamma away from zero so the FD signal is healthy
    for (double& v : inputs[1].data) v = 1.0 + 0.2 * v;
    gradcheck(inputs, [](Graph& g, const std::vector<Ref>& r) {
        return weigh(g, g.layer_norm(r[0], r[1], r[2]));
    });

    Graph g;
    Ref x = g.input(rng.normal_tensor({4, 8}));
    Ref gamma = g.input(Tensor::full({8}, 1.0));
    Ref beta = g.input(Tensor::zeros({8}));
    const Tensor& y = g.val(g.layer_norm(x, gamma, beta));
    for (int n = 0; n < 4; ++n) {
        double m = 0.0, v = 0.0;
        for (int c = 0; c < 8; ++c) m += y.data[static_cast<size_t>(n * 8 + c)];
        m /= 8.0;
        for (int c = 0; c < 8; ++c) {
            double d = y.data[static_cast<size_t>(n * 8 + c)] - m;
            v += d * d;
        }
        CHECK(std::abs(m) < 1e-12);
        CHECK(v / 8.0 == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("per-sample conditioning vector broadcasts over middle dims") {
    Rng rng(107);
    gradcheck(randn(rng, {{2, 3, 4}, {2, 4}}), [](Graph& g, const std::vector<Ref>& r) {
        return weigh(g, g.add_bcast_mid(r[0], r[1]));
    });
    Graph g;
    Ref x = g.input(Tensor::zeros({2, 3, 4}));
    Ref v = g.input(Tensor::zeros({3, 4}));
    CHECK_THROWS_AS(g.add_bcast_mid(x, v), std::invalid_argument);
}

TEST_CASE("reductions") {
    Rng rng(108);
    gradcheck(randn(rng, {{3, 2, 2}}),
              [](Graph& g, const std::vector<Ref>& r) { return weigh(g, g.sum_per_sample(r[0])); });
    gradcheck(randn(rng, {{4}}), [](Graph& g, const std::vector<Ref>& r) {
        return g.weighted_mean(r[0], {0.5, 2.0, -1.0, 3.0});
    });
    gradcheck(randn(rng, {{2, 3}}),
              [](Graph& g, const std::vector<Ref>& r) { return g.sum_all(g.mul(r[0], r[0])); });

    Graph g;
    Ref x = g.input(Tensor::full({3}, 2.0));
    CHECK(g.val(g.weighted_mean(x, {1.0, 1.0, 1.0})).data[0] == doctest::Approx(2.0));
    CHECK_THROWS_AS(g.weighted_mean(x, {1.0, 1.0}), std::invalid_argument);
}

TEST_CASE("stop_grad blocks the gradient path") {
    // f = sum(x * sg(x)): treating sg(x) as a constant, df/dx must equal x itself
    Graph g;
    Tensor x = Tensor::zeros({3});
    x.data = {1.0, -2.0, 3.0};
    Ref r = g.input(x, true);
    Ref out = g.sum_all(g.mul(r, g.stop_grad(r)));
    g.backward(out);
    const Tensor& gx = g.grad(r);
    CHECK(gx.data[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(gx.data[1] == doctest::Approx(-2.0).epsilon(1e-15));
    CHECK(gx.data[2] == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("gradients accumulate across shared subexpressions") {
    // f = (x + x) . k  => df/dx = 2k
    Graph g;
    Ref r = g.input(Tensor::full({3}, 0.7), true);
    Ref out = weigh(g, g.add(r, r));
    g.backward(out);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(g.grad(r).data[i] == doctest::Approx(0.2 * static_cast<double>(i + 1)).epsilon(1e-15));
    }
}

TEST_CASE("graph guards its contract") {
    Graph g;
    Tensor nan = Tensor::zeros({2});
    nan.data[0] = std::nan("");
    CHECK_THROWS_AS(g.input(nan), std::invalid_argument);

    Ref x = g.input(Tensor::full({2}, 1.0), true);
    CHECK_THROWS_AS(g.backward(x), std::invalid_argument);  // non-scalar root

    Ref y = g.input(Tensor::scalar(1.0));
    CHECK_THROWS_AS(g.grad(y), std::logic_error);  // no gradient tracked

    Ref pos = g.input(Tensor::full({2}, -1.0));
    CHECK_THROWS_AS(g.log(pos), std::invalid_argument);
}

TEST_CASE("a small composite network passes end-to-end gradcheck") {
    Rng rng(109);
    // two-layer MLP with silu, squared-error loss against fixed targets
    std::vector<Tensor> params = randn(rng, {{4, 6}, {6}, {6, 3}, {3}});
    Tensor xin = rng.normal_tensor({5, 4});
    Tensor target = rng.normal_tensor({5, 3});
    gradcheck(params, [&](Graph& g, const std::vector<Ref>& p) {
        Ref x = g.input(xin);
        Ref h = g.silu(g.add_bias(g.matmul(x, p[0]), p[1]));
        Ref y = g.add_bias(g.matmul(h, p[2]), p[3]);
        Ref d = g.sub(y, g.input(target));
        return g.scale(g.sum_all(g.mul(d, d)), 1.0 / 5.0);
    });
}
