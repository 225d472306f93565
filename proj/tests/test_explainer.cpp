#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "segcam/explainer.hpp"
#include "segcam/render.hpp"
#include "segcam/unet.hpp"
#include "support.hpp"

using namespace segcam;
using testing::random_tensor;

namespace {

int error_code(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ExplainError& e) {
    return static_cast<int>(e.code());
  }
  return -1;
}

}  // namespace

TEST_SUITE("pixel_set") {
  TEST_CASE("variants resolve to sorted row-major indices") {
    const TensorF logits(Shape{1, 2, 3, 4});
    CHECK(resolve_pixel_set(pixels::Single{1, 2}, logits, 3, 4) == std::vector<PixelIndex>{{1, 2}});
    const auto rect = resolve_pixel_set(pixels::Rect{0, 1, 1, 2}, logits, 3, 4);
    CHECK(rect == std::vector<PixelIndex>{{0, 1}, {0, 2}, {1, 1}, {1, 2}});
    CHECK(resolve_pixel_set(pixels::All{}, logits, 3, 4).size() == 12);
    pixels::Mask m{3, 4, std::vector<std::uint8_t>(12, 0)};
    m.bits[5] = 1;
    m.bits[11] = 1;
    CHECK(resolve_pixel_set(m, logits, 3, 4) == std::vector<PixelIndex>{{1, 1}, {2, 3}});
  }

  TEST_CASE("predicted class uses the argmax") {
    TensorF logits(Shape{1, 2, 1, 3});
    logits.at(0, 1, 0, 0) = 1.0f;
    logits.at(0, 1, 0, 2) = 2.0f;
    CHECK(resolve_pixel_set(pixels::PredictedClass{1}, logits, 1, 3) == std::vector<PixelIndex>{{0, 0}, {0, 2}});
    TensorF zero(Shape{1, 2, 1, 3});
    CHECK(error_code([&] { resolve_pixel_set(pixels::PredictedClass{1}, zero, 1, 3); }) ==
          static_cast<int>(ExplainError::Code::EmptyPixelSet));
    CHECK(error_code([&] { resolve_pixel_set(pixels::PredictedClass{2}, zero, 1, 3); }) ==
          static_cast<int>(ExplainError::Code::BadClass));
  }

  TEST_CASE("invalid sets") {
    const TensorF logits(Shape{1, 2, 3, 4});
    const int bad = static_cast<int>(ExplainError::Code::BadPixelSet);
    const int empty = static_cast<int>(ExplainError::Code::EmptyPixelSet);
    CHECK(error_code([&] { resolve_pixel_set(pixels::Single{3, 0}, logits, 3, 4); }) == bad);
    CHECK(error_code([&] { resolve_pixel_set(pixels::Single{0, -1}, logits, 3, 4); }) == bad);
    CHECK(error_code([&] { resolve_pixel_set(pixels::Rect{1, 1, 0, 2}, logits, 3, 4); }) == bad);
    CHECK(error_code([&] { resolve_pixel_set(pixels::Rect{0, 0, 3, 0}, logits, 3, 4); }) == bad);
    CHECK(error_code([&] { resolve_pixel_set(pixels::Mask{2, 4, std::vector<std::uint8_t>(8, 1)}, logits, 3, 4); }) ==
          bad);
    CHECK(error_code([&] { resolve_pixel_set(pixels::Mask{3, 4, std::vector<std::uint8_t>(12, 0)}, logits, 3, 4); }) ==
          empty);
  }
}

TEST_SUITE("explainer") {
  TEST_CASE("cam weights and map against loops") {
    SplitMix64 rng(30);
    const auto grad = random_tensor<double>(rng, Shape{1, 3, 4, 5});
    const auto act = random_tensor<double>(rng, Shape{1, 3, 4, 5}, 0.0, 2.0);
    const auto w = cam_weights(grad);
    CHECK(w.spatial_size == 20);
    for (int k = 0; k < 3; ++k) {
      double s = 0.0;
      for (int u = 0; u < 4; ++u)
        for (int v = 0; v < 5; ++v) s += grad.at(0, k, u, v);
      CHECK(w.alpha[k] == doctest::Approx(s / 20).epsilon(1e-14));
    }
    const auto cam = cam_heatmap(act, w);
    for (int u = 0; u < 4; ++u) {
      for (int v = 0; v < 5; ++v) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += w.alpha[k] * act.at(0, k, u, v);
        CHECK(cam.pre_relu.at(u, v) == doctest::Approx(s).epsilon(1e-14));
        CHECK(cam.raw.at(u, v) == doctest::Approx(std::max(s, 0.0)).epsilon(1e-14));
      }
    }
    CHECK_THROWS_AS(cam_heatmap(act, CamWeights<double>{{1.0}, 20}), ShapeError);
  }

  TEST_CASE("hand-derived chain on a one-conv model") {
    // conv0: 3x3, 1 -> 2 channels, then ReLU. Channel 0 copies the input
    // (center tap 1), channel 1 is the input shifted right by one column,
    // times 2, minus 0.5. logits: 1x1, 2 -> 2 with weights W.
    PlainConvNet net(1, {{2, 3}, {2, 1}});
    net.kernel(0).at(0, 0, 1, 1) = 1.0f;
    net.kernel(0).at(1, 0, 1, 0) = 2.0f;
    net.bias(0)[1] = -0.5f;
    const float W[2][2] = {{0.7f, -0.3f}, {0.4f, 1.5f}};
    for (int c = 0; c < 2; ++c)
      for (int k = 0; k < 2; ++k) net.kernel(1).at(c, k, 0, 0) = W[c][k];
    net.bias(1)[0] = 0.1f;

    const int H = 4, Wd = 5;
    TensorF image(Shape{1, 1, H, Wd});
    SplitMix64 rng(31);
    for (auto& v : image.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));

    // A_k by hand.
    double A[2][H][Wd];
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < Wd; ++x) {
        A[0][y][x] = std::max(0.0, static_cast<double>(image.at(0, 0, y, x)));
        const double left = x > 0 ? image.at(0, 0, y, x - 1) : 0.0;
        A[1][y][x] = std::max(0.0, 2.0 * left - 0.5);
      }
    }
    // y^c(i,j) = sum_k W[c][k] A_k(i,j) + b_c, so dy/dA_k is W[c][k] at (i,j)
    // and zero elsewhere; alpha_k = W[c][k] / N.
    const int cls = 1, pi = 2, pj = 3;
    ExplainRequest req;
    req.class_id = cls;
    req.tap = "conv0";
    req.pixel_set = pixels::Single{pi, pj};
    const Heatmap hm = seg_grad_cam(net, image, req);
    const double n = H * Wd;
    REQUIRE(hm.weights.alpha.size() == 2);
    CHECK(hm.weights.alpha[0] == doctest::Approx(W[cls][0] / n).epsilon(1e-6));
    CHECK(hm.weights.alpha[1] == doctest::Approx(W[cls][1] / n).epsilon(1e-6));
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < Wd; ++x) {
        const double l = std::max(0.0, (W[cls][0] * A[0][y][x] + W[cls][1] * A[1][y][x]) / n);
        CHECK(std::abs(hm.raw.at(y, x) - l) < 1e-6);
      }
    }
    // With the identity-size tap, upsampling is the identity.
    for (std::size_t i = 0; i < hm.raw.size(); ++i) CHECK(hm.upsampled[i] == doctest::Approx(hm.normalized[i]));
  }

  TEST_CASE("linearity in the pixel set and the scale") {
    UNet net(UNetConfig{3, 4, 4, 2}, 12);
    SplitMix64 rng(32);
    const auto image = random_tensor<float>(rng, Shape{1, 3, 16, 16}, 0.0, 1.0);
    ExplainRequest r;
    r.class_id = 2;
    r.tap = "bottleneck.conv2";
    r.pixel_set = pixels::Rect{0, 0, 3, 15};
    const Heatmap h1 = seg_grad_cam(net, image, r);
    r.pixel_set = pixels::Rect{4, 0, 15, 15};
    const Heatmap h2 = seg_grad_cam(net, image, r);
    r.pixel_set = pixels::All{};
    const Heatmap h12 = seg_grad_cam(net, image, r);
    for (std::size_t i = 0; i < h12.pre_relu.size(); ++i) {
      CHECK(std::abs(h12.pre_relu[i] - (h1.pre_relu[i] + h2.pre_relu[i])) < 1e-5);
    }
    r.objective_scale = 3.0f;
    const Heatmap h3 = seg_grad_cam(net, image, r);
    for (std::size_t i = 0; i < h3.raw.size(); ++i) {
      CHECK(h3.raw[i] == doctest::Approx(3.0f * h12.raw[i]).epsilon(1e-5));
      CHECK(std::abs(h3.normalized[i] - h12.normalized[i]) < 1e-6);
    }
  }

  TEST_CASE("sweep agrees with per-tap explanations") {
    UNet net(UNetConfig{3, 4, 4, 2}, 13);
    SplitMix64 rng(33);
    const auto image = random_tensor<float>(rng, Shape{1, 3, 16, 16}, 0.0, 1.0);
    const PixelSet ps = pixels::Rect{3, 3, 9, 12};
    const auto rows = layer_sweep(net, image, 1, ps);
    REQUIRE(rows.size() == net.tap_names().size());
    for (const auto& row : rows) {
      CAPTURE(row.tap);
      ExplainRequest r{1, row.tap, ps, 1.0f};
      const Heatmap h = seg_grad_cam(net, image, r);
      CHECK(h.raw == row.heatmap.raw);
      CHECK(h.upsampled == row.heatmap.upsampled);
      CHECK(std::isfinite(row.logit_similarity));
      CHECK(row.logit_similarity >= -1.0);
      CHECK(row.logit_similarity <= 1.0);
      CHECK(row.edge_similarity >= -1.0);
      CHECK(row.edge_similarity <= 1.0);
      CHECK(h.upsampled == upsample_bilinear(h.normalized, 16, 16));
    }
  }

  TEST_CASE("saliency matches finite differences of the input") {
    UNet net(UNetConfig{3, 3, 2, 1}, 14);
    SplitMix64 rng(34);
    const auto image = random_tensor<float>(rng, Shape{1, 3, 8, 8}, 0.0, 1.0);
    const std::vector<PixelIndex> m{{3, 3}, {3, 4}, {4, 4}};
    ExplainRequest r;
    r.class_id = 0;
    r.pixel_set = pixels::Mask{8, 8, [&] {
                                 std::vector<std::uint8_t> bits(64, 0);
                                 for (auto p : m) bits[p.row * 8 + p.col] = 1;
                                 return bits;
                               }()};
    const TensorF sal = saliency_map(net, image, r);

    const auto params = net.parameters64();
    auto f = [&](const TensorD& x) {
      auto pass = net.forward<double>(x, params);
      return pass.graph.value(objective_sum<double>(pass.graph, pass.logits, m, 0, 1.0))[0];
    };
    TensorD x = tensor_cast<double>(image);
    TensorF fd(Shape{8, 8});
    const double h = 1e-6;
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 8; ++y) {
        for (int xx = 0; xx < 8; ++xx) {
          const double x0 = x.at(0, c, y, xx);
          x.at(0, c, y, xx) = x0 + h;
          const double up = f(x);
          x.at(0, c, y, xx) = x0 - h;
          const double down = f(x);
          x.at(0, c, y, xx) = x0;
          fd.at(y, xx) = std::max(fd.at(y, xx), static_cast<float>(std::abs(up - down) / (2 * h)));
        }
      }
    }
    const TensorF want = normalize_min_max(fd);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(sal[i] - want[i]) < 1e-3);
  }

  TEST_CASE("request validation") {
    UNet net(UNetConfig{3, 4, 2, 1}, 15);
    const TensorF image(Shape{1, 3, 8, 8}, 0.5f);
    ExplainRequest r;
    r.tap = "nope";
    CHECK_THROWS_AS(seg_grad_cam(net, image, r), UnknownTapError);
    r.tap = "logits";
    r.class_id = 4;
    CHECK(error_code([&] { seg_grad_cam(net, image, r); }) == static_cast<int>(ExplainError::Code::BadClass));
    r.class_id = 0;
    r.pixel_set = pixels::Single{8, 0};
    CHECK(error_code([&] { seg_grad_cam(net, image, r); }) == static_cast<int>(ExplainError::Code::BadPixelSet));
    CHECK_THROWS_AS(seg_grad_cam(net, TensorF(Shape{1, 3, 7, 8}), ExplainRequest{}), ShapeError);
  }
}
