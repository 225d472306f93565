#pragma once

#include <cstdint>
#include <vector>

#include "segcam/network.hpp"

namespace segcam {

struct UNetConfig {
  int in_channels = 3;
  int num_classes = 4;
  int base_channels = 8;
  int depth = 2;  // number of 2x downsamplings

  void validate() const;
  bool operator==(const UNetConfig&) const = default;
};

/// Miniature U-Net.
///
/// Level l (0-based) works at resolution H/2^l with base*2^l channels.
///
///   enc{l}.conv1, enc{l}.conv2      3x3 conv + ReLU, then 2x2 max-pool
///   bottleneck.conv1, .conv2        3x3 conv + ReLU at H/2^depth
///   dec{l}.up                       nearest 2x upsample, 3x3 conv + ReLU
///   (concat with enc{l}.conv2)
///   dec{l}.conv1, dec{l}.conv2      3x3 conv + ReLU
///   logits                          1x1 conv, no activation
///
/// Every name above is a tap. ReLU layers are tapped after the activation,
/// logits before any softmax.
class UNet final : public Network {
 public:
  explicit UNet(const UNetConfig& config);
  UNet(const UNetConfig& config, std::uint64_t seed);

  const UNetConfig& config() const { return config_; }
  int in_channels() const override { return config_.in_channels; }
  int num_classes() const override { return config_.num_classes; }
  int size_divisor() const override { return 1 << config_.depth; }

  /// Tap resolution level: 0 for full resolution, depth for the bottleneck.
  int tap_level(const std::string& tap) const;
  /// Channel count of the activation at `tap`.
  int tap_channels(const std::string& tap) const;

 protected:
  NodeId trace(Graph<float>& g, NodeId input, std::span<const NodeId> params) const override;
  NodeId trace(Graph<double>& g, NodeId input, std::span<const NodeId> params) const override;

 private:
  template <typename T>
  NodeId trace_impl(Graph<T>& g, NodeId input, std::span<const NodeId> params) const;

  struct LayerInfo {
    std::string name;
    int in_channels;
    int out_channels;
    int kernel;
    int level;
  };
  std::vector<LayerInfo> layers_;
  UNetConfig config_;
};

/// Stack of same-padded convolutions with ReLU between them; the last layer
/// produces logits. Hidden layers are tapped as conv0, conv1, ...; the last
/// as "logits". Used for hand-checkable explanations and gradient checks.
class PlainConvNet final : public Network {
 public:
  struct Layer {
    int out_channels;
    int kernel;  // odd
  };

  PlainConvNet(int in_channels, std::vector<Layer> layers);

  int in_channels() const override { return in_channels_; }
  int num_classes() const override { return layers_.back().out_channels; }
  int size_divisor() const override { return 1; }

  // kernel / bias of layer i
  TensorF& kernel(std::size_t i) { return params_[2 * i].value; }
  TensorF& bias(std::size_t i) { return params_[2 * i + 1].value; }

 protected:
  NodeId trace(Graph<float>& g, NodeId input, std::span<const NodeId> params) const override;
  NodeId trace(Graph<double>& g, NodeId input, std::span<const NodeId> params) const override;

 private:
  template <typename T>
  NodeId trace_impl(Graph<T>& g, NodeId input, std::span<const NodeId> params) const;

  int in_channels_;
  std::vector<Layer> layers_;
};

}  // namespace segcam
