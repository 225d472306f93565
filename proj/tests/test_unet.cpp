#include <cmath>

#include "doctest.h"
#include "segcam/explainer.hpp"
#include "segcam/gradcheck.hpp"
#include "segcam/unet.hpp"
#include "support.hpp"

using namespace segcam;
using testing::random_tensor;

TEST_SUITE("unet") {
  TEST_CASE("tap order and shapes for depth 2") {
    UNet net(UNetConfig{3, 4, 8, 2}, 1);
    const std::vector<std::string> want{"enc0.conv1", "enc0.conv2", "enc1.conv1",       "enc1.conv2",
                                        "bottleneck.conv1", "bottleneck.conv2", "dec1.up", "dec1.conv1",
                                        "dec1.conv2", "dec0.up",    "dec0.conv1", "dec0.conv2", "logits"};
    CHECK(net.tap_names() == want);

    SplitMix64 rng(2);
    const auto image = random_tensor<float>(rng, Shape{1, 3, 16, 16}, 0.0, 1.0);
    const auto pass = net.forward(image);
    CHECK(pass.logits_value().shape() == Shape{1, 4, 16, 16});
    for (const auto& tap : want) {
      CAPTURE(tap);
      const auto& a = pass.graph.value(pass.graph.tap_node(tap));
      const int s = 16 >> net.tap_level(tap);
      CHECK(a.shape() == Shape{1, net.tap_channels(tap), s, s});
    }
    CHECK(net.tap_channels("bottleneck.conv2") == 32);
    CHECK(net.tap_level("bottleneck.conv1") == 2);
    CHECK_THROWS_AS(net.tap_level("nope"), UnknownTapError);
  }

  TEST_CASE("parameter names and count") {
    UNet net(UNetConfig{3, 4, 8, 2}, 1);
    const auto& ps = net.parameters();
    CHECK(ps.front().name == "enc0.conv1.weight");
    CHECK(ps.back().name == "logits.bias");
    // Closed form: 3x3 convs (cin*9+1)*cout, 1x1 logits (8+1)*4.
    auto conv = [](std::size_t cin, std::size_t cout) { return (cin * 9 + 1) * cout; };
    const std::size_t want = conv(3, 8) + conv(8, 8) + conv(8, 16) + conv(16, 16) + conv(16, 32) + conv(32, 32) +
                             conv(32, 16) + conv(32, 16) + conv(16, 16) + conv(16, 8) + conv(16, 8) + conv(8, 8) +
                             (8 + 1) * 4;
    CHECK(net.parameter_count() == want);
  }

  TEST_CASE("input checks name the divisor") {
    UNet net(UNetConfig{3, 4, 4, 2}, 1);
    try {
      net.check_input(Shape{1, 3, 30, 32});
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("divisible by 4") != std::string::npos);
    }
    CHECK_THROWS_AS(net.check_input(Shape{1, 1, 32, 32}), ShapeError);
    CHECK_NOTHROW(net.check_input(Shape{1, 3, 32, 8}));
  }

  TEST_CASE("config validation") {
    CHECK_THROWS_AS(UNetConfig({3, 1, 8, 2}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(UNetConfig({3, 4, 0, 2}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(UNetConfig({3, 4, 8, 0}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(UNetConfig({3, 4, 8, 9}).validate(), std::invalid_argument);
  }

  TEST_CASE("kaiming init statistics and determinism") {
    UNet a(UNetConfig{3, 4, 8, 2}, 42), b(UNetConfig{3, 4, 8, 2}, 42), c(UNetConfig{3, 4, 8, 2}, 43);
    CHECK(a.parameters()[2].value == b.parameters()[2].value);
    CHECK_FALSE(a.parameters()[2].value == c.parameters()[2].value);
    // enc1.conv1.weight: fan_in 8*9, std sqrt(2/72)
    const auto& w = a.parameters()[4];
    REQUIRE(w.name == "enc1.conv1.weight");
    double sum = 0.0, sq = 0.0;
    for (float v : w.value.data()) {
      sum += v;
      sq += static_cast<double>(v) * v;
    }
    const double n = static_cast<double>(w.value.size());
    const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);
    CHECK(std::abs(mean) < 0.03);
    CHECK(sd == doctest::Approx(std::sqrt(2.0 / 72.0)).epsilon(0.1));
    for (float v : a.parameters()[5].value.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("predict_mask uses argmax with lowest-index ties") {
    TensorF logits(Shape{1, 3, 1, 3}, std::vector<float>{1, 5, 2,  //
                                                         3, 5, 2,  //
                                                         0, 1, 2});
    CHECK(predict_mask(logits).values() == std::vector<float>{1, 0, 0});
  }

  TEST_CASE("float and double forward agree") {
    UNet net(UNetConfig{3, 4, 4, 2}, 3);
    SplitMix64 rng(4);
    const auto image = random_tensor<float>(rng, Shape{1, 3, 8, 8}, 0.0, 1.0);
    const auto p32 = net.forward(image);
    const auto ps = net.parameters64();
    const auto p64 = net.forward<double>(tensor_cast<double>(image), ps);
    for (std::size_t i = 0; i < p32.logits_value().size(); ++i) {
      CHECK(p32.logits_value()[i] == doctest::Approx(p64.logits_value()[i]).epsilon(1e-4));
    }
  }

  TEST_CASE("full-coverage gradient check on a narrow model") {
    // Every coordinate of every parameter, tap and the input of a base-2 U-Net.
    UNet net(UNetConfig{3, 3, 2, 2}, 9);
    SplitMix64 rng(10);
    const TensorD image = random_tensor<double>(rng, Shape{1, 3, 8, 8}, 0.0, 1.0);
    const auto params = net.parameters64();
    const std::vector<PixelIndex> pixels{{2, 3}, {2, 4}, {5, 1}};
    auto objective = [&](const TensorD& img, std::span<const TensorD> ps, const TapPerturbations<double>* pert) {
      auto pass = net.forward<double>(img, ps, pert);
      const NodeId o = objective_sum<double>(pass.graph, pass.logits, pixels, 1, 1.0);
      return std::pair{std::move(pass), o};
    };
    auto [pass, obj] = objective(image, params, nullptr);
    const auto grads = pass.graph.backward(obj, TensorD(Shape{1}, 1.0));

    std::size_t checked = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      CAPTURE(net.parameters()[i].name);
      auto f = [&](const TensorD& x) {
        auto ps = params;
        ps[i] = x;
        auto [p, o] = objective(image, ps, nullptr);
        return Evaluation{p.graph.value(o)[0], p.graph.activation_pattern()};
      };
      const auto rep = finite_diff_check(f, grads.at(pass.params[i]), params[i], FiniteDiffOptions{});
      CHECK(rep.max_relative_error < 1e-4);
      checked += rep.checked;
    }
    for (const auto& tap : net.tap_names()) {
      CAPTURE(tap);
      const NodeId node = pass.graph.tap_node(tap);
      const TensorD& a = pass.graph.value(node);
      auto f = [&](const TensorD& x) {
        TapPerturbations<double> pert;
        TensorD delta(a.shape());
        for (std::size_t k = 0; k < a.size(); ++k) delta[k] = x[k] - a[k];
        pert.emplace(tap, std::move(delta));
        auto [p, o] = objective(image, params, &pert);
        return Evaluation{p.graph.value(o)[0], p.graph.activation_pattern()};
      };
      const auto rep = finite_diff_check(f, grads.at(node), a, FiniteDiffOptions{});
      CHECK(rep.max_relative_error < 1e-4);
      checked += rep.checked;
    }
    auto f = [&](const TensorD& x) {
      auto [p, o] = objective(x, params, nullptr);
      return Evaluation{p.graph.value(o)[0], p.graph.activation_pattern()};
    };
    const auto rep = finite_diff_check(f, grads.at(pass.input), image, FiniteDiffOptions{});
    CHECK(rep.max_relative_error < 1e-4);
    checked += rep.checked;
    CHECK(checked > 500);
  }
}

TEST_SUITE("plain_conv") {
  TEST_CASE("taps and same padding") {
    PlainConvNet net(2, {{3, 3}, {2, 1}});
    CHECK(net.tap_names() == std::vector<std::string>{"conv0", "logits"});
    CHECK(net.num_classes() == 2);
    net.kernel(0).at(0, 0, 1, 1) = 1.0f;
    const auto pass = net.forward(TensorF(Shape{1, 2, 5, 7}, 1.0f));
    CHECK(pass.logits_value().shape() == Shape{1, 2, 5, 7});
    CHECK(pass.graph.value(pass.graph.tap_node("conv0")).at(0, 0, 2, 2) == 1.0f);
    CHECK_THROWS_AS(PlainConvNet(2, {{3, 2}}), std::invalid_argument);
  }
}

TEST_SUITE("gradcheck_suite") {
  TEST_CASE("short suite passes and the fault hook is caught") {
    GradcheckOptions opt;
    opt.seed = 5;
    opt.seeds = 2;
    const auto ok = run_gradcheck(opt);
    CHECK(ok.passed);
    CHECK(ok.max_relative_error < 1e-4);
    CHECK(ok.rows.size() >= 10);
    for (const auto& r : ok.rows) {
      CAPTURE(r.name);
      CHECK(r.checked > 0);
    }
    opt.fault = Fault::ConvKernelGradSkew;
    const auto bad = run_gradcheck(opt);
    CHECK_FALSE(bad.passed);
    CHECK(bad.max_relative_error > 1e-3);
  }
}
