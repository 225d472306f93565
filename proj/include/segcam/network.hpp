#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "segcam/graph.hpp"
#include "segcam/tensor.hpp"

namespace segcam {

struct Parameter {
  std::string name;
  TensorF value;
};

/// One recorded forward evaluation: the graph plus the ids of its input,
/// parameter leaves and logits.
template <typename T>
struct ForwardPass {
  Graph<T> graph;
  NodeId input;
  std::vector<NodeId> params;
  NodeId logits;

  const Tensor<T>& logits_value() const { return graph.value(logits); }
};

template <typename T>
using TapPerturbations = std::map<std::string, Tensor<T>>;

/// A segmentation network whose forward pass is traced onto a Graph, with
/// named taps at its convolutional layers. Parameters are stored in 32-bit;
/// forward passes may run in either precision with caller-supplied values.
class Network {
 public:
  virtual ~Network() = default;

  virtual int in_channels() const = 0;
  virtual int num_classes() const = 0;
  // Input height and width must be multiples of this.
  virtual int size_divisor() const = 0;

  const std::vector<std::string>& tap_names() const { return tap_names_; }
  bool has_tap(const std::string& name) const;

  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter>& parameters() { return params_; }
  std::size_t parameter_count() const;
  std::vector<Tensor<double>> parameters64() const;

  ForwardPass<float> forward(const TensorF& image) const;

  template <typename T>
  ForwardPass<T> forward(const Tensor<T>& image, std::span<const Tensor<T>> params,
                         const TapPerturbations<T>* perturbations = nullptr) const;

  /// Throws ShapeError naming the required divisor or channel count.
  void check_input(const Shape& image) const;

 protected:
  virtual NodeId trace(Graph<float>& g, NodeId input, std::span<const NodeId> params) const = 0;
  virtual NodeId trace(Graph<double>& g, NodeId input, std::span<const NodeId> params) const = 0;

  std::vector<Parameter> params_;
  std::vector<std::string> tap_names_;
};

extern template ForwardPass<float> Network::forward(const TensorF&, std::span<const TensorF>,
                                                    const TapPerturbations<float>*) const;
extern template ForwardPass<double> Network::forward(const TensorD&, std::span<const TensorD>,
                                                     const TapPerturbations<double>*) const;

/// Per-pixel argmax over classes of [1,C,H,W] logits; ties go to the lowest
/// class index. Returns [1,1,H,W] class ids.
template <typename T>
Tensor<T> predict_mask(const Tensor<T>& logits);

extern template TensorF predict_mask(const TensorF&);
extern template TensorD predict_mask(const TensorD&);

/// Kaiming-normal kernels (std = sqrt(2 / fan_in)) and zero biases, drawn in
/// parameter order from SplitMix64(seed, init stream). Parameters whose
/// name ends in ".bias" are zeroed.
void kaiming_init(std::vector<Parameter>& params, std::uint64_t seed);

}  // namespace segcam
