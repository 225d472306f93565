#include "segcam/unet.hpp"

#include <algorithm>

namespace segcam {

void UNetConfig::validate() const {
  if (in_channels < 1) throw std::invalid_argument("in_channels must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (base_channels < 1) throw std::invalid_argument("base_channels must be >= 1");
  if (depth < 1) throw std::invalid_argument("depth must be >= 1");
  if (depth > 8) throw std::invalid_argument("depth must be <= 8");
}

UNet::UNet(const UNetConfig& config) : config_(config) {
  config.validate();
  const int b = config.base_channels;
  auto add = [this](std::string name, int cin, int cout, int kernel, int level) {
    layers_.push_back({name, cin, cout, kernel, level});
    params_.push_back({name + ".weight", TensorF(Shape{cout, cin, kernel, kernel})});
    params_.push_back({name + ".bias", TensorF(Shape{cout})});
    tap_names_.push_back(std::move(name));
  };

  int cin = config.in_channels;
  for (int l = 0; l < config.depth; ++l) {
    const int c = b << l;
    const std::string p = "enc" + std::to_string(l);
    add(p + ".conv1", cin, c, 3, l);
    add(p + ".conv2", c, c, 3, l);
    cin = c;
  }
  const int cb = b << config.depth;
  add("bottleneck.conv1", cin, cb, 3, config.depth);
  add("bottleneck.conv2", cb, cb, 3, config.depth);
  cin = cb;
  for (int l = config.depth - 1; l >= 0; --l) {
    const int c = b << l;
    const std::string p = "dec" + std::to_string(l);
    add(p + ".up", cin, c, 3, l);
    add(p + ".conv1", 2 * c, c, 3, l);
    add(p + ".conv2", c, c, 3, l);
    cin = c;
  }
  add("logits", cin, config.num_classes, 1, 0);
}

UNet::UNet(const UNetConfig& config, std::uint64_t seed) : UNet(config) {
  kaiming_init(params_, seed);
}

int UNet::tap_level(const std::string& tap) const {
  for (const auto& l : layers_) {
    if (l.name == tap) return l.level;
  }
  throw UnknownTapError(tap, tap_names_);
}

int UNet::tap_channels(const std::string& tap) const {
  for (const auto& l : layers_) {
    if (l.name == tap) return l.out_channels;
  }
  throw UnknownTapError(tap, tap_names_);
}

NodeId UNet::trace(Graph<float>& g, NodeId input, std::span<const NodeId> params) const {
  return trace_impl(g, input, params);
}

NodeId UNet::trace(Graph<double>& g, NodeId input, std::span<const NodeId> params) const {
  return trace_impl(g, input, params);
}

template <typename T>
NodeId UNet::trace_impl(Graph<T>& g, NodeId input, std::span<const NodeId> params) const {
  std::size_t layer = 0;
  auto conv = [&](NodeId x, bool activate) {
    const auto& info = layers_[layer];
    const NodeId y = g.conv2d(x, params[2 * layer], params[2 * layer + 1], 1, info.kernel / 2);
    ++layer;
    return g.tap(info.name, activate ? g.relu(y) : y);
  };

  NodeId x = input;
  std::vector<NodeId> skips;
  for (int l = 0; l < config_.depth; ++l) {
    x = conv(x, true);
    x = conv(x, true);
    skips.push_back(x);
    x = g.maxpool2(x);
  }
  x = conv(x, true);
  x = conv(x, true);
  for (int l = config_.depth - 1; l >= 0; --l) {
    x = conv(g.upsample2(x), true);
    x = g.concat_channels(x, skips[static_cast<std::size_t>(l)]);
    x = conv(x, true);
    x = conv(x, true);
  }
  return conv(x, false);
}

PlainConvNet::PlainConvNet(int in_channels, std::vector<Layer> layers)
    : in_channels_(in_channels), layers_(std::move(layers)) {
  if (layers_.empty()) throw std::invalid_argument("PlainConvNet needs at least one layer");
  int cin = in_channels;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (l.kernel % 2 == 0) throw std::invalid_argument("PlainConvNet kernels must be odd");
    const bool last = i + 1 == layers_.size();
    std::string name = last ? "logits" : "conv" + std::to_string(i);
    params_.push_back({name + ".weight", TensorF(Shape{l.out_channels, cin, l.kernel, l.kernel})});
    params_.push_back({name + ".bias", TensorF(Shape{l.out_channels})});
    tap_names_.push_back(std::move(name));
    cin = l.out_channels;
  }
}

NodeId PlainConvNet::trace(Graph<float>& g, NodeId input, std::span<const NodeId> params) const {
  return trace_impl(g, input, params);
}

NodeId PlainConvNet::trace(Graph<double>& g, NodeId input, std::span<const NodeId> params) const {
  return trace_impl(g, input, params);
}

template <typename T>
NodeId PlainConvNet::trace_impl(Graph<T>& g, NodeId input, std::span<const NodeId> params) const {
  NodeId x = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const bool last = i + 1 == layers_.size();
    x = g.conv2d(x, params[2 * i], params[2 * i + 1], 1, layers_[i].kernel / 2);
    if (!last) x = g.relu(x);
    x = g.tap(tap_names_[i], x);
  }
  return x;
}

}  // namespace segcam
