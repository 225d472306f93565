#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "segcam/gradcheck.hpp"
#include "segcam/graph.hpp"
#include "support.hpp"

using namespace segcam;
using testing::random_tensor;

TEST_SUITE("tensor") {
  TEST_CASE("shape validation and numel") {
    CHECK(Shape{2, 3, 4, 5}.numel() == 120);
    CHECK(Shape{7}.rank() == 1);
    CHECK_THROWS_AS(Shape({0, 3}), ShapeError);
    CHECK_THROWS_AS(Shape({1, 2, 3, 4, 5}), ShapeError);
    CHECK(Shape{1, 3, 8, 8}.to_string() == "[1,3,8,8]");
  }

  TEST_CASE("indexing is row-major NCHW") {
    TensorF t(Shape{1, 2, 3, 4});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i);
    CHECK(t.at(0, 1, 2, 3) == 23.0f);
    CHECK(t.at(0, 0, 1, 0) == 4.0f);
    const TensorF plane = channel_plane(t, 1);
    CHECK(plane.shape() == Shape{3, 4});
    CHECK(plane.at(2, 3) == 23.0f);
    CHECK_THROWS_AS(channel_plane(t, 2), ShapeError);
  }

  TEST_CASE("data length must match shape") {
    CHECK_THROWS_AS(TensorF(Shape{2, 2}, std::vector<float>(3)), ShapeError);
    CHECK_THROWS_AS(TensorF(Shape{2, 2}).reshaped(Shape{3}), ShapeError);
    CHECK(TensorF(Shape{2, 2}, 1.5f).reshaped(Shape{4})[3] == 1.5f);
  }
}

TEST_SUITE("graph") {
  TEST_CASE("conv2d matches direct loops") {
    SplitMix64 rng(11);
    struct Case {
      int cin, cout, h, w, k, stride, pad;
    };
    for (const Case c : {Case{1, 1, 5, 5, 3, 1, 1}, Case{3, 4, 8, 6, 3, 1, 1}, Case{2, 3, 9, 7, 3, 2, 1},
                         Case{2, 2, 6, 6, 1, 1, 0}, Case{3, 2, 7, 7, 5, 1, 2}, Case{2, 2, 8, 8, 3, 2, 0}}) {
      CAPTURE(c.cin);
      CAPTURE(c.stride);
      const auto x = random_tensor<float>(rng, Shape{1, c.cin, c.h, c.w});
      const auto k = random_tensor<float>(rng, Shape{c.cout, c.cin, c.k, c.k});
      const auto b = random_tensor<float>(rng, Shape{c.cout});
      Graph<float> g;
      const NodeId y = g.conv2d(g.leaf(x), g.leaf(k), g.leaf(b), c.stride, c.pad);
      const TensorF want = testing::conv2d_loops(x, k, b, c.stride, c.pad);
      REQUIRE(g.value(y).shape() == want.shape());
      for (std::size_t i = 0; i < want.size(); ++i) CHECK(g.value(y)[i] == doctest::Approx(want[i]).epsilon(1e-5));
    }
  }

  TEST_CASE("conv2d shape errors name the axis") {
    Graph<float> g;
    const NodeId x = g.leaf(TensorF(Shape{1, 3, 8, 8}));
    const NodeId b = g.leaf(TensorF(Shape{4}));
    try {
      g.conv2d(x, g.leaf(TensorF(Shape{4, 2, 3, 3})), b, 1, 1);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("axis 1") != std::string::npos);
    }
    CHECK_THROWS_AS(g.conv2d(x, g.leaf(TensorF(Shape{4, 3, 2, 2})), b, 1, 1), ShapeError);
    CHECK_THROWS_AS(g.conv2d(x, g.leaf(TensorF(Shape{4, 3, 3, 3})), g.leaf(TensorF(Shape{5})), 1, 1), ShapeError);
  }

  TEST_CASE("relu, upsample2, concat, add values") {
    Graph<float> g;
    TensorF x(Shape{1, 1, 2, 2}, std::vector<float>{-1.0f, 2.0f, 0.0f, -3.0f});
    const NodeId a = g.leaf(x);
    CHECK(g.value(g.relu(a)).values() == std::vector<float>{0, 2, 0, 0});
    const auto& up = g.value(g.upsample2(a));
    REQUIRE(up.shape() == Shape{1, 1, 4, 4});
    for (int y = 0; y < 4; ++y)
      for (int xx = 0; xx < 4; ++xx) CHECK(up.at(0, 0, y, xx) == x.at(0, 0, y / 2, xx / 2));
    const auto& cat = g.value(g.concat_channels(a, g.relu(a)));
    CHECK(cat.shape() == Shape{1, 2, 2, 2});
    CHECK(cat.at(0, 1, 0, 1) == 2.0f);
    CHECK(cat.at(0, 0, 1, 1) == -3.0f);
    CHECK(g.value(g.add(a, a)).values() == std::vector<float>{-2, 4, 0, -6});
    CHECK_THROWS_AS(g.add(a, g.leaf(TensorF(Shape{1, 1, 2, 3}))), ShapeError);
  }

  TEST_CASE("maxpool2 picks the first maximum in the window") {
    Graph<double> g;
    // window (0,0): all equal -> gradient goes to the top-left element
    TensorD x(Shape{1, 1, 2, 4}, std::vector<double>{5, 5, 1, 9, 5, 5, 9, 2});
    const NodeId a = g.leaf(x);
    const NodeId p = g.maxpool2(a);
    CHECK(g.value(p).values() == std::vector<double>{5, 9});
    const auto grads = g.backward(p, TensorD(Shape{1, 1, 1, 2}, 1.0));
    CHECK(grads.at(a).values() == std::vector<double>{1, 0, 0, 1, 0, 0, 0, 0});
    CHECK_THROWS_AS(g.maxpool2(g.leaf(TensorD(Shape{1, 1, 3, 4}))), ShapeError);
  }

  TEST_CASE("fan-out gradients accumulate") {
    Graph<double> g;
    const NodeId x = g.leaf(TensorD(Shape{1, 1, 1, 3}, std::vector<double>{1, -2, 3}));
    const NodeId y = g.add(g.add(x, x), g.relu(x));
    const auto grads = g.backward(y, TensorD(Shape{1, 1, 1, 3}, 1.0));
    CHECK(grads.at(x).values() == std::vector<double>{3, 2, 3});
  }

  TEST_CASE("select_sum gradient is the scaled indicator") {
    Graph<double> g;
    SplitMix64 rng(3);
    const NodeId y = g.leaf(random_tensor<double>(rng, Shape{1, 3, 4, 4}));
    const std::vector<std::int64_t> pos{0, 5, 15};
    const NodeId s = g.select_sum(y, 2, pos, 2.5);
    double want = 0.0;
    for (auto p : pos) want += 2.5 * g.value(y)[2 * 16 + p];
    CHECK(g.value(s)[0] == doctest::Approx(want));
    const auto grads = g.backward(s, TensorD(Shape{1}, 1.0));
    for (std::size_t i = 0; i < 48; ++i) {
      const bool hit = i >= 32 && std::find(pos.begin(), pos.end(), static_cast<std::int64_t>(i - 32)) != pos.end();
      CHECK(grads.at(y)[i] == (hit ? 2.5 : 0.0));
    }
    CHECK_THROWS_AS(g.select_sum(y, 3, pos, 1.0), ShapeError);
    CHECK_THROWS(g.select_sum(y, 0, std::vector<std::int64_t>{}, 1.0));
  }

  TEST_CASE("cross_entropy value and gradient match the softmax formula") {
    SplitMix64 rng(5);
    const int c = 4, h = 3, w = 5;
    const auto z = random_tensor<double>(rng, Shape{1, c, h, w}, -3.0, 3.0);
    std::vector<int> labels(h * w);
    for (auto& l : labels) l = static_cast<int>(rng.below(c));

    Graph<double> g;
    const NodeId zl = g.leaf(z);
    const NodeId loss = g.cross_entropy(zl, labels);
    const auto grads = g.backward(loss, TensorD(Shape{1}, 1.0));

    double want = 0.0;
    for (int p = 0; p < h * w; ++p) {
      double denom = 0.0;
      for (int k = 0; k < c; ++k) denom += std::exp(z[k * h * w + p]);
      want -= std::log(std::exp(z[labels[p] * h * w + p]) / denom);
      for (int k = 0; k < c; ++k) {
        const double soft = std::exp(z[k * h * w + p]) / denom;
        const double expect = (soft - (k == labels[p] ? 1.0 : 0.0)) / (h * w);
        CHECK(grads.at(zl)[k * h * w + p] == doctest::Approx(expect).epsilon(1e-12));
      }
    }
    CHECK(g.value(loss)[0] == doctest::Approx(want / (h * w)).epsilon(1e-12));
  }

  TEST_CASE("cross_entropy is stable for large logits") {
    Graph<float> g;
    TensorF z(Shape{1, 2, 1, 1}, std::vector<float>{1000.0f, -1000.0f});
    const NodeId loss = g.cross_entropy(g.leaf(z), std::vector<int>{1});
    CHECK(std::isfinite(g.value(loss)[0]));
    CHECK(g.value(loss)[0] == doctest::Approx(2000.0f));
  }

  TEST_CASE("every op passes a finite-difference check in double") {
    SplitMix64 rng(21);
    auto check = [&](const char* name, auto build, std::vector<TensorD> leaves) {
      CAPTURE(name);
      Graph<double> g;
      std::vector<NodeId> ids;
      for (const auto& l : leaves) ids.push_back(g.leaf(l));
      const NodeId out = build(g, ids);
      const auto proj = random_tensor<double>(rng, g.value(out).shape());
      const auto grads = g.backward(out, proj);
      for (std::size_t j = 0; j < leaves.size(); ++j) {
        auto f = [&](const TensorD& x) {
          Graph<double> h;
          std::vector<NodeId> hid;
          for (std::size_t k = 0; k < leaves.size(); ++k) hid.push_back(h.leaf(k == j ? x : leaves[k]));
          const auto& v = h.value(build(h, hid));
          double s = 0.0;
          for (std::size_t i = 0; i < v.size(); ++i) s += proj[i] * v[i];
          return Evaluation{s, h.activation_pattern()};
        };
        FiniteDiffOptions fo;
        const auto rep = finite_diff_check(f, grads.at(ids[j]), leaves[j], fo);
        CHECK(rep.checked > 0);
        CHECK(rep.max_relative_error < 1e-6);
      }
    };
    using Ids = std::span<const NodeId>;
    check("conv", [](Graph<double>& g, Ids in) { return g.conv2d(in[0], in[1], in[2], 1, 1); },
          {random_tensor<double>(rng, Shape{1, 2, 5, 4}), random_tensor<double>(rng, Shape{3, 2, 3, 3}),
           random_tensor<double>(rng, Shape{3})});
    check("conv stride 2", [](Graph<double>& g, Ids in) { return g.conv2d(in[0], in[1], in[2], 2, 1); },
          {random_tensor<double>(rng, Shape{1, 2, 6, 6}), random_tensor<double>(rng, Shape{2, 2, 3, 3}),
           random_tensor<double>(rng, Shape{2})});
    check("relu", [](Graph<double>& g, Ids in) { return g.relu(in[0]); },
          {random_tensor<double>(rng, Shape{1, 2, 3, 3})});
    check("maxpool", [](Graph<double>& g, Ids in) { return g.maxpool2(in[0]); },
          {random_tensor<double>(rng, Shape{1, 2, 4, 6})});
    check("upsample", [](Graph<double>& g, Ids in) { return g.upsample2(in[0]); },
          {random_tensor<double>(rng, Shape{1, 2, 3, 2})});
    check("concat", [](Graph<double>& g, Ids in) { return g.concat_channels(in[0], in[1]); },
          {random_tensor<double>(rng, Shape{1, 2, 3, 3}), random_tensor<double>(rng, Shape{1, 1, 3, 3})});
    const std::vector<int> labels{0, 2, 1, 1, 0, 2};
    check("cross entropy", [&](Graph<double>& g, Ids in) { return g.cross_entropy(in[0], labels); },
          {random_tensor<double>(rng, Shape{1, 3, 2, 3})});
  }

  TEST_CASE("taps, perturbations and unknown taps") {
    Graph<double> g;
    const NodeId x = g.leaf(TensorD(Shape{1, 1, 1, 2}, std::vector<double>{1, 2}));
    g.perturb_tap("t", TensorD(Shape{1, 1, 1, 2}, std::vector<double>{0.5, -1}));
    const NodeId t = g.tap("t", g.relu(x));
    CHECK(g.value(t).values() == std::vector<double>{1.5, 1});
    // tap_node is the unperturbed activation A; the returned node is A + delta
    CHECK(g.value(g.tap_node("t")).values() == std::vector<double>{1, 2});
    CHECK(g.has_tap("t"));
    CHECK_THROWS_AS(g.tap("t", x), GraphError);
    try {
      g.tap_node("nope");
      FAIL("expected UnknownTapError");
    } catch (const UnknownTapError& e) {
      CHECK(e.tap() == "nope");
      CHECK(e.valid_taps() == std::vector<std::string>{"t"});
    }
  }

  TEST_CASE("activation pattern tracks relu signs only") {
    auto pattern = [](double v) {
      Graph<double> g;
      g.relu(g.leaf(TensorD(Shape{1, 1, 1, 2}, std::vector<double>{v, 1.0})));
      return g.activation_pattern();
    };
    CHECK(pattern(0.3) == pattern(0.7));
    CHECK(pattern(0.3) != pattern(-0.3));
  }

  TEST_CASE("injected fault skews the kernel gradient") {
    SplitMix64 rng(8);
    const auto x = random_tensor<double>(rng, Shape{1, 1, 4, 4});
    const auto k = random_tensor<double>(rng, Shape{1, 1, 3, 3});
    auto kernel_grad = [&](Fault f) {
      Graph<double> g;
      g.inject_fault(f);
      const NodeId kl = g.leaf(k);
      const NodeId y = g.conv2d(g.leaf(x), kl, g.leaf(TensorD(Shape{1})), 1, 1);
      return g.backward(y, TensorD(Shape{1, 1, 4, 4}, 1.0)).at(kl);
    };
    const auto clean = kernel_grad(Fault::None), skewed = kernel_grad(Fault::ConvKernelGradSkew);
    for (std::size_t i = 0; i < clean.size(); ++i) CHECK(skewed[i] == doctest::Approx(clean[i] * 1.01));
  }

  TEST_CASE("backward rejects a mis-shaped seed") {
    Graph<float> g;
    const NodeId x = g.leaf(TensorF(Shape{1, 1, 2, 2}));
    CHECK_THROWS_AS(g.backward(x, TensorF(Shape{1})), ShapeError);
    CHECK_THROWS_AS(g.value(NodeId{99}), GraphError);
  }
}

TEST_SUITE("finite_diff") {
  TEST_CASE("smooth scalar function") {
    // f(x) = sum x_i^3, grad 3 x_i^2
    TensorD x(Shape{3}, std::vector<double>{0.5, -1.2, 2.0});
    TensorD grad(Shape{3});
    for (std::size_t i = 0; i < 3; ++i) grad[i] = 3 * x[i] * x[i];
    auto f = [](const TensorD& t) {
      double s = 0.0;
      for (double v : t.data()) s += v * v * v;
      return s;
    };
    CHECK(finite_diff_check(f, grad, x, 1e-3) < 1e-5);
    grad[1] *= 1.01;
    CHECK(finite_diff_check(f, grad, x, 1e-3) > 5e-3);
  }

  TEST_CASE("relative error floor") {
    CHECK(relative_error(0.0, 0.0) == 0.0);
    CHECK(relative_error(1e-10, 0.0) == doctest::Approx(1e-2));
    CHECK(relative_error(2.0, 1.0) == doctest::Approx(0.5));
  }

  TEST_CASE("fourth order stencil is exact on quartics") {
    TensorD x(Shape{1}, std::vector<double>{0.7});
    TensorD grad(Shape{1}, std::vector<double>{4 * 0.7 * 0.7 * 0.7});
    FiniteDiffOptions fo;
    fo.h = 1e-2;
    fo.fourth_order = true;
    const auto rep = finite_diff_check([](const TensorD& t) { return Evaluation{std::pow(t[0], 4), 0}; }, grad, x, fo);
    CHECK(rep.max_relative_error < 1e-10);
    fo.fourth_order = false;
    const auto rep2 =
        finite_diff_check([](const TensorD& t) { return Evaluation{std::pow(t[0], 4), 0}; }, grad, x, fo);
    CHECK(rep2.max_relative_error > 1e-5);
  }

  TEST_CASE("pattern changes are skipped") {
    TensorD x(Shape{2}, std::vector<double>{1e-4, 1.0});
    TensorD grad(Shape{2}, std::vector<double>{1.0, 1.0});
    auto f = [](const TensorD& t) {
      return Evaluation{std::max(t[0], 0.0) + t[1], static_cast<std::uint64_t>(t[0] > 0)};
    };
    FiniteDiffOptions fo;
    const auto rep = finite_diff_check(f, grad, x, fo);
    CHECK(rep.skipped == 1);
    CHECK(rep.checked == 1);
    CHECK(rep.max_relative_error < 1e-9);
  }

  TEST_CASE("non-finite function value throws") {
    TensorD x(Shape{1}, 1.0);
    CHECK_THROWS_AS(finite_diff_check([](const TensorD&) { return std::nan(""); }, x, x, 1e-3), std::runtime_error);
  }
}
