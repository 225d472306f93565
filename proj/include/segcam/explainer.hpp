#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "segcam/network.hpp"
#include "segcam/tensor.hpp"

namespace segcam {

struct PixelIndex {
  int row;
  int col;
  auto operator<=>(const PixelIndex&) const = default;
};

// The pixel set M whose logits are summed into the explanation objective.
namespace pixels {
struct Single {
  int row;
  int col;
};
struct Rect {  // inclusive corners
  int row0;
  int col0;
  int row1;
  int col1;
};
struct Mask {
  int height;
  int width;
  std::vector<std::uint8_t> bits;  // row-major, nonzero = selected
};
struct PredictedClass {
  int class_id;
};
struct All {};
}  // namespace pixels

using PixelSet = std::variant<pixels::Single, pixels::Rect, pixels::Mask, pixels::PredictedClass, pixels::All>;

std::string describe(const PixelSet& ps);

class ExplainError : public std::runtime_error {
 public:
  enum class Code { EmptyPixelSet, BadClass, BadPixelSet };
  ExplainError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

/// Explicit row-major sorted indices of `ps` over an H x W output mask.
/// PredictedClass selects pixels whose argmax over `logits` equals the class.
std::vector<PixelIndex> resolve_pixel_set(const PixelSet& ps, const TensorF& logits, int height, int width);

/// Adds scale * sum_{(i,j) in M} logits[0, c, i, j] to the graph. Uses the raw
/// logits, never softmax outputs.
template <typename T>
NodeId objective_sum(Graph<T>& graph, NodeId logits, std::span<const PixelIndex> pixels, int class_id, T scale);

template <typename T>
struct CamWeights {
  std::vector<T> alpha;  // one per channel of the tapped layer
  int spatial_size = 0;  // N = U * V
};

/// alpha_k = (1/N) sum_{u,v} grad[0,k,u,v].
template <typename T>
CamWeights<T> cam_weights(const Tensor<T>& tap_gradient);

template <typename T>
struct CamMap {
  Tensor<T> pre_relu;  // [U,V] sum_k alpha_k A^k
  Tensor<T> raw;       // [U,V] max(pre_relu, 0)
};

template <typename T>
CamMap<T> cam_heatmap(const Tensor<T>& tap_activation, const CamWeights<T>& weights);

struct ExplainRequest {
  int class_id = 0;
  std::string tap = "bottleneck.conv2";
  PixelSet pixel_set = pixels::All{};
  float objective_scale = 1.0f;
};

struct Heatmap {
  TensorF raw;         // [U,V] at tap resolution, after ReLU
  TensorF pre_relu;    // [U,V]
  TensorF normalized;  // [U,V] in [0,1]
  TensorF upsampled;   // [H,W] in [0,1]
  CamWeights<float> weights;
  std::string tap;
  int class_id = 0;
  PixelSet pixel_set;
};

/// Gradient-weighted class activation map for the summed logits of class c
/// over the pixel set, taken at the requested tap. The map covers the whole
/// image; pixels outside the receptive field of M can still light up since M
/// only determines the channel weights.
Heatmap seg_grad_cam(const Network& model, const TensorF& image, const ExplainRequest& request);

/// max over input channels of |d objective / d image|, min-max normalized.
/// The request's tap is ignored. Returns [H,W].
TensorF saliency_map(const Network& model, const TensorF& image, const ExplainRequest& request);

struct SweepRow {
  std::string tap;
  Heatmap heatmap;
  double logit_similarity;  // cosine vs min-max normalized ReLU(logits of c)
  double edge_similarity;   // cosine vs Sobel edge magnitude of the image
};

/// Heatmaps for every tap in model order from a single forward/backward
/// pass, plus report-only similarity diagnostics.
std::vector<SweepRow> layer_sweep(const Network& model, const TensorF& image, int class_id, const PixelSet& ps,
                                  float objective_scale = 1.0f);

}  // namespace segcam
