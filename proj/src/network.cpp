#include "segcam/network.hpp"

#include <algorithm>
#include <cmath>

#include "segcam/rng.hpp"

namespace segcam {

bool Network::has_tap(const std::string& name) const {
  return std::find(tap_names_.begin(), tap_names_.end(), name) != tap_names_.end();
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<Tensor<double>> Network::parameters64() const {
  std::vector<Tensor<double>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(tensor_cast<double>(p.value));
  return out;
}

void Network::check_input(const Shape& image) const {
  if (image.rank() != 4) throw ShapeError("image must be rank 4 [1,C,H,W], got " + image.to_string());
  if (image[1] != in_channels()) {
    throw ShapeError("image axis 1 (channels) is " + std::to_string(image[1]) + ", model expects " +
                     std::to_string(in_channels()));
  }
  const int d = size_divisor();
  if (image[2] % d != 0) {
    throw ShapeError("image axis 2 (height) " + std::to_string(image[2]) + " must be divisible by " +
                     std::to_string(d));
  }
  if (image[3] % d != 0) {
    throw ShapeError("image axis 3 (width) " + std::to_string(image[3]) + " must be divisible by " +
                     std::to_string(d));
  }
}

ForwardPass<float> Network::forward(const TensorF& image) const {
  std::vector<TensorF> values;
  values.reserve(params_.size());
  for (const auto& p : params_) values.push_back(p.value);
  return forward<float>(image, values);
}

template <typename T>
ForwardPass<T> Network::forward(const Tensor<T>& image, std::span<const Tensor<T>> params,
                                const TapPerturbations<T>* perturbations) const {
  check_input(image.shape());
  if (params.size() != params_.size()) {
    throw ShapeError("expected " + std::to_string(params_.size()) + " parameter tensors, got " +
                     std::to_string(params.size()));
  }
  ForwardPass<T> pass;
  if (perturbations) {
    for (const auto& [name, delta] : *perturbations) pass.graph.perturb_tap(name, delta);
  }
  pass.input = pass.graph.leaf(image);
  pass.params.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != params_[i].value.shape()) {
      throw ShapeError("parameter " + params_[i].name + " has shape " + params[i].shape().to_string() +
                       ", expected " + params_[i].value.shape().to_string());
    }
    pass.params.push_back(pass.graph.leaf(params[i]));
  }
  pass.logits = trace(pass.graph, pass.input, pass.params);
  return pass;
}

template ForwardPass<float> Network::forward(const TensorF&, std::span<const TensorF>,
                                             const TapPerturbations<float>*) const;
template ForwardPass<double> Network::forward(const TensorD&, std::span<const TensorD>,
                                              const TapPerturbations<double>*) const;

template <typename T>
Tensor<T> predict_mask(const Tensor<T>& logits) {
  if (logits.rank() != 4 || logits.dim(0) != 1) {
    throw ShapeError("predict_mask expects [1,C,H,W] logits, got " + logits.shape().to_string());
  }
  const int c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  Tensor<T> mask(Shape{1, 1, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int best = 0;
      for (int k = 1; k < c; ++k) {
        if (logits.at(0, k, y, x) > logits.at(0, best, y, x)) best = k;
      }
      mask.at(0, 0, y, x) = static_cast<T>(best);
    }
  }
  return mask;
}

template TensorF predict_mask(const TensorF&);
template TensorD predict_mask(const TensorD&);

void kaiming_init(std::vector<Parameter>& params, std::uint64_t seed) {
  SplitMix64 rng(seed, rng_stream::kInit);
  for (auto& p : params) {
    auto& v = p.value;
    if (p.name.size() >= 5 && p.name.ends_with(".bias")) {
      std::fill(v.data().begin(), v.data().end(), 0.0f);
      continue;
    }
    const std::size_t fan_in = v.size() / static_cast<std::size_t>(v.dim(0));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& x : v.data()) x = static_cast<float>(rng.normal(0.0, stddev));
  }
}

}  // namespace segcam
