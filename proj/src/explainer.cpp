#include "segcam/explainer.hpp"

#include <algorithm>

#include "segcam/render.hpp"

namespace segcam {

namespace {

template <class... Fs>
struct overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
overloaded(Fs...) -> overloaded<Fs...>;

void check_class(const Network& model, int class_id) {
  if (class_id < 0 || class_id >= model.num_classes()) {
    throw ExplainError(ExplainError::Code::BadClass, "class id " + std::to_string(class_id) + " outside [0, " +
                                                         std::to_string(model.num_classes()) + ")");
  }
}

void check_tap(const Network& model, const std::string& tap) {
  if (!model.has_tap(tap)) throw UnknownTapError(tap, model.tap_names());
}

ExplainError bad_set(const std::string& what) { return ExplainError(ExplainError::Code::BadPixelSet, what); }

// Forward pass plus the objective's gradients, shared by every explanation.
// Runs in 64-bit so heatmaps stay linear in the objective to float precision.
struct ObjectivePass {
  ForwardPass<double> pass;
  GradientStore<double> grads;
  TensorF logits;
};

ObjectivePass run_objective(const Network& model, const TensorF& image, int class_id, const PixelSet& ps,
                            float scale) {
  check_class(model, class_id);
  std::vector<TensorD> params;
  params.reserve(model.parameters().size());
  for (const auto& p : model.parameters()) params.push_back(tensor_cast<double>(p.value));
  auto pass = model.forward<double>(tensor_cast<double>(image), params);
  TensorF logits = tensor_cast<float>(pass.logits_value());
  const int h = image.dim(2), w = image.dim(3);
  const auto pixels = resolve_pixel_set(ps, logits, h, w);
  const NodeId objective = objective_sum<double>(pass.graph, pass.logits, pixels, class_id, scale);
  auto grads = pass.graph.backward(objective, TensorD(Shape{1}, 1.0));
  return {std::move(pass), std::move(grads), std::move(logits)};
}

Heatmap heatmap_at(const ObjectivePass& op, const std::string& tap, int class_id, const PixelSet& ps, int height,
                   int width) {
  const NodeId node = op.pass.graph.tap_node(tap);
  const auto& activation = op.pass.graph.value(node);
  const auto weights = cam_weights(op.grads.at(node));
  const auto cam = cam_heatmap(activation, weights);
  Heatmap hm;
  hm.weights.alpha.assign(weights.alpha.begin(), weights.alpha.end());
  hm.weights.spatial_size = weights.spatial_size;
  hm.pre_relu = tensor_cast<float>(cam.pre_relu);
  hm.raw = tensor_cast<float>(cam.raw);
  hm.normalized = tensor_cast<float>(normalize(cam.raw));
  hm.upsampled = upsample_bilinear(hm.normalized, height, width);
  hm.tap = tap;
  hm.class_id = class_id;
  hm.pixel_set = ps;
  return hm;
}

}  // namespace

std::string describe(const PixelSet& ps) {
  return std::visit(overloaded{
                        [](const pixels::Single& s) {
                          return "single(" + std::to_string(s.row) + "," + std::to_string(s.col) + ")";
                        },
                        [](const pixels::Rect& r) {
                          return "rect(" + std::to_string(r.row0) + "," + std::to_string(r.col0) + "," +
                                 std::to_string(r.row1) + "," + std::to_string(r.col1) + ")";
                        },
                        [](const pixels::Mask& m) {
                          return "mask(" + std::to_string(m.height) + "x" + std::to_string(m.width) + ")";
                        },
                        [](const pixels::PredictedClass& p) { return "predicted(" + std::to_string(p.class_id) + ")"; },
                        [](const pixels::All&) { return std::string("all"); },
                    },
                    ps);
}

std::vector<PixelIndex> resolve_pixel_set(const PixelSet& ps, const TensorF& logits, int height, int width) {
  if (height < 1 || width < 1) throw bad_set("pixel set resolved against an empty mask");
  auto in_bounds = [&](int r, int c) { return r >= 0 && r < height && c >= 0 && c < width; };
  std::vector<PixelIndex> out;

  std::visit(overloaded{
                 [&](const pixels::Single& s) {
                   if (!in_bounds(s.row, s.col)) {
                     throw bad_set("pixel (" + std::to_string(s.row) + "," + std::to_string(s.col) +
                                   ") outside " + std::to_string(height) + "x" + std::to_string(width));
                   }
                   out.push_back({s.row, s.col});
                 },
                 [&](const pixels::Rect& r) {
                   if (r.row0 > r.row1 || r.col0 > r.col1) throw bad_set("rect corners are not ordered");
                   if (!in_bounds(r.row0, r.col0) || !in_bounds(r.row1, r.col1)) {
                     throw bad_set("rect " + describe(ps) + " outside " + std::to_string(height) + "x" +
                                   std::to_string(width));
                   }
                   for (int i = r.row0; i <= r.row1; ++i)
                     for (int j = r.col0; j <= r.col1; ++j) out.push_back({i, j});
                 },
                 [&](const pixels::Mask& m) {
                   if (m.height != height || m.width != width) {
                     throw bad_set("mask is " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                                   ", output is " + std::to_string(height) + "x" + std::to_string(width));
                   }
                   if (m.bits.size() != static_cast<std::size_t>(height) * width) {
                     throw bad_set("mask bit count does not match its dimensions");
                   }
                   for (int i = 0; i < height; ++i)
                     for (int j = 0; j < width; ++j)
                       if (m.bits[static_cast<std::size_t>(i) * width + j]) out.push_back({i, j});
                 },
                 [&](const pixels::PredictedClass& p) {
                   if (logits.rank() != 4 || logits.dim(2) != height || logits.dim(3) != width) {
                     throw ShapeError("predicted-class pixel set needs [1,C,H,W] logits matching the output");
                   }
                   if (p.class_id < 0 || p.class_id >= logits.dim(1)) {
                     throw ExplainError(ExplainError::Code::BadClass,
                                        "predicted class id " + std::to_string(p.class_id) + " outside [0, " +
                                            std::to_string(logits.dim(1)) + ")");
                   }
                   const TensorF mask = predict_mask(logits);
                   for (int i = 0; i < height; ++i)
                     for (int j = 0; j < width; ++j)
                       if (static_cast<int>(mask.at(0, 0, i, j)) == p.class_id) out.push_back({i, j});
                 },
                 [&](const pixels::All&) {
                   for (int i = 0; i < height; ++i)
                     for (int j = 0; j < width; ++j) out.push_back({i, j});
                 },
             },
             ps);

  if (out.empty()) throw ExplainError(ExplainError::Code::EmptyPixelSet, "empty pixel set: " + describe(ps));
  return out;
}

template <typename T>
NodeId objective_sum(Graph<T>& graph, NodeId logits, std::span<const PixelIndex> pixels, int class_id, T scale) {
  if (pixels.empty()) throw ExplainError(ExplainError::Code::EmptyPixelSet, "empty pixel set");
  const int width = graph.value(logits).dim(3);
  std::vector<std::int64_t> positions;
  positions.reserve(pixels.size());
  for (const auto& p : pixels) positions.push_back(static_cast<std::int64_t>(p.row) * width + p.col);
  return graph.select_sum(logits, class_id, positions, scale);
}

template <typename T>
CamWeights<T> cam_weights(const Tensor<T>& g) {
  if (g.rank() != 4 || g.dim(0) != 1) {
    throw ShapeError("cam_weights expects a [1,K,U,V] gradient, got " + g.shape().to_string());
  }
  const int k = g.dim(1);
  const std::size_t n = static_cast<std::size_t>(g.dim(2)) * g.dim(3);
  CamWeights<T> w;
  w.spatial_size = static_cast<int>(n);
  w.alpha.resize(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    const T* p = g.data().data() + c * n;
    T sum{0};
    for (std::size_t i = 0; i < n; ++i) sum += p[i];
    w.alpha[c] = sum / static_cast<T>(n);
  }
  return w;
}

template <typename T>
CamMap<T> cam_heatmap(const Tensor<T>& a, const CamWeights<T>& w) {
  if (a.rank() != 4 || a.dim(0) != 1) {
    throw ShapeError("cam_heatmap expects a [1,K,U,V] activation, got " + a.shape().to_string());
  }
  if (static_cast<std::size_t>(a.dim(1)) != w.alpha.size()) {
    throw ShapeError("cam_heatmap: activation axis 1 (channels) is " + std::to_string(a.dim(1)) + ", have " +
                     std::to_string(w.alpha.size()) + " weights");
  }
  const int u = a.dim(2), v = a.dim(3);
  const std::size_t n = static_cast<std::size_t>(u) * v;
  CamMap<T> out{Tensor<T>(Shape{u, v}), Tensor<T>(Shape{u, v})};
  for (std::size_t k = 0; k < w.alpha.size(); ++k) {
    const T alpha = w.alpha[k];
    const T* p = a.data().data() + k * n;
    for (std::size_t i = 0; i < n; ++i) out.pre_relu[i] += alpha * p[i];
  }
  for (std::size_t i = 0; i < n; ++i) out.raw[i] = out.pre_relu[i] > T{0} ? out.pre_relu[i] : T{0};
  return out;
}

template NodeId objective_sum(Graph<float>&, NodeId, std::span<const PixelIndex>, int, float);
template NodeId objective_sum(Graph<double>&, NodeId, std::span<const PixelIndex>, int, double);
template CamWeights<float> cam_weights(const TensorF&);
template CamWeights<double> cam_weights(const TensorD&);
template CamMap<float> cam_heatmap(const TensorF&, const CamWeights<float>&);
template CamMap<double> cam_heatmap(const TensorD&, const CamWeights<double>&);

Heatmap seg_grad_cam(const Network& model, const TensorF& image, const ExplainRequest& request) {
  check_tap(model, request.tap);
  const auto op = run_objective(model, image, request.class_id, request.pixel_set, request.objective_scale);
  return heatmap_at(op, request.tap, request.class_id, request.pixel_set, image.dim(2), image.dim(3));
}

TensorF saliency_map(const Network& model, const TensorF& image, const ExplainRequest& request) {
  const auto op = run_objective(model, image, request.class_id, request.pixel_set, request.objective_scale);
  const auto& g = op.grads.at(op.pass.input);
  const int c = g.dim(1), h = g.dim(2), w = g.dim(3);
  TensorF map(Shape{h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double m = 0.0;
      for (int ch = 0; ch < c; ++ch) m = std::max(m, std::abs(g.at(0, ch, y, x)));
      map.at(y, x) = static_cast<float>(m);
    }
  }
  return normalize_min_max(map);
}

std::vector<SweepRow> layer_sweep(const Network& model, const TensorF& image, int class_id, const PixelSet& ps,
                                  float objective_scale) {
  const auto op = run_objective(model, image, class_id, ps, objective_scale);
  const int h = image.dim(2), w = image.dim(3);

  TensorF logit_map = channel_plane(op.logits, class_id);
  for (auto& v : logit_map.data()) v = std::max(v, 0.0f);
  logit_map = normalize_min_max(logit_map);
  const TensorF edges = sobel_edges(image);

  std::vector<SweepRow> rows;
  for (const auto& tap : model.tap_names()) {
    SweepRow row{tap, heatmap_at(op, tap, class_id, ps, h, w), 0.0, 0.0};
    row.logit_similarity = cosine_similarity(row.heatmap.upsampled, logit_map);
    row.edge_similarity = cosine_similarity(row.heatmap.upsampled, edges);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace segcam
