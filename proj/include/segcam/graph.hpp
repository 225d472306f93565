#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "segcam/tensor.hpp"

namespace segcam {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnknownTapError : public GraphError {
 public:
  UnknownTapError(const std::string& name, const std::vector<std::string>& valid);
  const std::string& tap() const { return tap_; }
  const std::vector<std::string>& valid_taps() const { return valid_; }

 private:
  std::string tap_;
  std::vector<std::string> valid_;
};

struct NodeId {
  std::uint32_t index = 0;
  auto operator<=>(const NodeId&) const = default;
};

enum class OpKind { Leaf, Conv2d, Relu, MaxPool2, Upsample2, Concat, Add, SelectSum, CrossEntropy };

const char* op_name(OpKind kind);

/// Test hook: deliberately wrong backward rules for negative-control checks.
enum class Fault { None, ConvKernelGradSkew };

template <typename T>
class GradientStore {
 public:
  explicit GradientStore(std::size_t node_count) : grads_(node_count) {}

  bool contains(NodeId id) const { return id.index < grads_.size() && grads_[id.index].has_value(); }
  const Tensor<T>& at(NodeId id) const;

  // Used by Graph::backward.
  void accumulate(NodeId id, const Tensor<T>& contribution);
  std::optional<Tensor<T>>& slot(NodeId id) { return grads_[id.index]; }

 private:
  std::vector<std::optional<Tensor<T>>> grads_;
};

/// Append-only record of an eagerly evaluated forward computation. Every op
/// computes its output immediately and keeps what its backward rule needs.
/// Named taps expose intermediate activations for explanation.
template <typename T>
class Graph {
 public:
  NodeId leaf(Tensor<T> value);

  // Cross-correlation with zero padding. kernel [Cout, Cin, kh, kw], bias [Cout].
  NodeId conv2d(NodeId input, NodeId kernel, NodeId bias, int stride, int padding);
  NodeId relu(NodeId input);
  NodeId maxpool2(NodeId input);
  NodeId upsample2(NodeId input);
  NodeId concat_channels(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);

  // scale * sum of logits[0, class_id, p] over flat spatial positions p = row * W + col.
  NodeId select_sum(NodeId logits, int class_id, std::span<const std::int64_t> positions, T scale);

  // Mean per-pixel softmax cross-entropy; labels hold N*H*W class ids.
  NodeId cross_entropy(NodeId logits, std::span<const int> labels);

  /// Registers `node` under `name`. Returns the node downstream ops must
  /// consume, which differs from `node` only when a perturbation was
  /// registered for the tap.
  NodeId tap(const std::string& name, NodeId node);
  void perturb_tap(const std::string& name, Tensor<T> delta);

  NodeId tap_node(const std::string& name) const;
  bool has_tap(const std::string& name) const { return taps_.count(name) != 0; }
  const std::vector<std::string>& tap_names() const { return tap_order_; }

  const Tensor<T>& value(NodeId id) const { return node(id).value; }
  OpKind kind(NodeId id) const { return node(id).kind; }
  std::span<const NodeId> inputs(NodeId id) const { return node(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Hash of every ReLU on/off state and max-pool winner. Two evaluations
  /// with equal patterns lie on the same linear piece of the network.
  std::uint64_t activation_pattern() const;

  GradientStore<T> backward(NodeId seed, const Tensor<T>& seed_gradient) const;

  void inject_fault(Fault fault) { fault_ = fault; }

 private:
  struct ConvAttr {
    int stride;
    int padding;
  };
  struct PoolAttr {
    std::vector<std::uint32_t> argmax;  // flat input offset per output element
  };
  struct SelectAttr {
    int class_id;
    std::vector<std::int64_t> positions;
    T scale;
  };
  struct CrossEntropyAttr {
    Tensor<T> probs;
    std::vector<int> labels;
  };
  using Attr = std::variant<std::monostate, ConvAttr, PoolAttr, SelectAttr, CrossEntropyAttr>;

  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    Attr attr;
  };

  const Node& node(NodeId id) const;
  NodeId push(OpKind kind, std::vector<NodeId> inputs, Tensor<T> value, Attr attr = {});
  void propagate(const Node& n, const Tensor<T>& grad, GradientStore<T>& store) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> taps_;
  std::vector<std::string> tap_order_;
  std::map<std::string, Tensor<T>> perturbations_;
  Fault fault_ = Fault::None;
};

extern template class GradientStore<float>;
extern template class GradientStore<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace segcam
