#include "segcam/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace segcam {

namespace {

std::string join(const std::vector<std::string>& names) {
  std::string out;
  for (const auto& n : names) {
    if (!out.empty()) out += ", ";
    out += n;
  }
  return out;
}

void require_rank4(const Shape& s, const char* what) {
  if (s.rank() != 4) {
    throw ShapeError(std::string(what) + ": expected rank-4 [N,C,H,W] tensor, got " + s.to_string());
  }
}

}  // namespace

UnknownTapError::UnknownTapError(const std::string& name, const std::vector<std::string>& valid)
    : GraphError("unknown tap '" + name + "'; valid taps: " + join(valid)), tap_(name), valid_(valid) {}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::MaxPool2: return "maxpool2";
    case OpKind::Upsample2: return "upsample2";
    case OpKind::Concat: return "concat";
    case OpKind::Add: return "add";
    case OpKind::SelectSum: return "select_sum";
    case OpKind::CrossEntropy: return "cross_entropy";
  }
  return "?";
}

template <typename T>
const Tensor<T>& GradientStore<T>::at(NodeId id) const {
  if (!contains(id)) {
    throw GraphError("no gradient recorded for node " + std::to_string(id.index));
  }
  return *grads_[id.index];
}

template <typename T>
void GradientStore<T>::accumulate(NodeId id, const Tensor<T>& contribution) {
  auto& slot = grads_[id.index];
  if (!slot) {
    slot = contribution;
    return;
  }
  auto dst = slot->data();
  auto src = contribution.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(NodeId id) const {
  if (id.index >= nodes_.size()) {
    throw GraphError("unknown node id " + std::to_string(id.index) + " (graph has " +
                     std::to_string(nodes_.size()) + " nodes)");
  }
  return nodes_[id.index];
}

template <typename T>
NodeId Graph<T>::push(OpKind kind, std::vector<NodeId> inputs, Tensor<T> value, Attr attr) {
  NodeId id{static_cast<std::uint32_t>(nodes_.size())};
  nodes_.push_back(Node{kind, std::move(inputs), std::move(value), std::move(attr)});
  return id;
}

template <typename T>
NodeId Graph<T>::leaf(Tensor<T> value) {
  return push(OpKind::Leaf, {}, std::move(value));
}

template <typename T>
NodeId Graph<T>::conv2d(NodeId input, NodeId kernel, NodeId bias, int stride, int padding) {
  const auto& x = value(input);
  const auto& k = value(kernel);
  const auto& b = value(bias);
  require_rank4(x.shape(), "conv2d input");
  require_rank4(k.shape(), "conv2d kernel");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  const int n_batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  if (k.dim(1) != cin) {
    throw ShapeError("conv2d: axis 1 (channels) mismatch: input has " + std::to_string(cin) +
                     ", kernel expects " + std::to_string(k.dim(1)));
  }
  if (kh % 2 == 0) throw ShapeError("conv2d: kernel axis 2 (height) must be odd, got " + std::to_string(kh));
  if (kw % 2 == 0) throw ShapeError("conv2d: kernel axis 3 (width) must be odd, got " + std::to_string(kw));
  if (b.rank() != 1 || b.dim(0) != cout) {
    throw ShapeError("conv2d: bias axis 0 must equal output channels " + std::to_string(cout) +
                     ", got shape " + b.shape().to_string());
  }
  const int span_h = h + 2 * padding - kh;
  const int span_w = w + 2 * padding - kw;
  if (span_h < 0) {
    throw ShapeError("conv2d: axis 2 (height) " + std::to_string(h) + " smaller than the padded kernel");
  }
  if (span_w < 0) {
    throw ShapeError("conv2d: axis 3 (width) " + std::to_string(w) + " smaller than the padded kernel");
  }
  const int ho = span_h / stride + 1, wo = span_w / stride + 1;

  Tensor<T> out(Shape{n_batch, cout, ho, wo});
  const T* xin = x.data().data();
  const T* kern = k.data().data();
  T* dst = out.data().data();
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;

  for (int n = 0; n < n_batch; ++n) {
    for (int co = 0; co < cout; ++co) {
      T* op = dst + (static_cast<std::size_t>(n) * cout + co) * out_plane;
      std::fill(op, op + out_plane, b[co]);
      for (int ci = 0; ci < cin; ++ci) {
        const T* ip = xin + (static_cast<std::size_t>(n) * cin + ci) * in_plane;
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            const T wv = kern[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx];
            // ox range with 0 <= ox*stride - padding + kx < w
            const int shift = kx - padding;
            int ox0 = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
            int ox1 = std::min(wo, (w - 1 - shift) / stride + 1);
            if (w - 1 - shift < 0) ox1 = 0;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride - padding + ky;
              if (iy < 0 || iy >= h) continue;
              T* orow = op + static_cast<std::size_t>(oy) * wo;
              const T* irow = ip + static_cast<std::size_t>(iy) * w;
              if (stride == 1) {
                for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * irow[ox + shift];
              } else {
                for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * irow[ox * stride + shift];
              }
            }
          }
        }
      }
    }
  }
  return push(OpKind::Conv2d, {input, kernel, bias}, std::move(out), ConvAttr{stride, padding});
}

template <typename T>
NodeId Graph<T>::relu(NodeId input) {
  const auto& x = value(input);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return push(OpKind::Relu, {input}, std::move(out));
}

template <typename T>
NodeId Graph<T>::maxpool2(NodeId input) {
  const auto& x = value(input);
  require_rank4(x.shape(), "maxpool2");
  const int nb = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0) throw ShapeError("maxpool2: axis 2 (height) must be even, got " + std::to_string(h));
  if (w % 2 != 0) throw ShapeError("maxpool2: axis 3 (width) must be even, got " + std::to_string(w));
  const int ho = h / 2, wo = w / 2;
  Tensor<T> out(Shape{nb, c, ho, wo});
  PoolAttr attr;
  attr.argmax.resize(out.size());
  std::size_t o = 0;
  for (int n = 0; n < nb; ++n) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(n) * c + ch) * h * w;
      for (int y = 0; y < ho; ++y) {
        for (int xx = 0; xx < wo; ++xx, ++o) {
          // Row-major window order; strict > keeps the first maximum.
          std::size_t best = base + static_cast<std::size_t>(2 * y) * w + 2 * xx;
          const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
          for (std::size_t idx : cand) {
            if (x[idx] > x[best]) best = idx;
          }
          out[o] = x[best];
          attr.argmax[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return push(OpKind::MaxPool2, {input}, std::move(out), std::move(attr));
}

template <typename T>
NodeId Graph<T>::upsample2(NodeId input) {
  const auto& x = value(input);
  require_rank4(x.shape(), "upsample2");
  const int nb = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out(Shape{nb, c, 2 * h, 2 * w});
  for (int n = 0; n < nb; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) out.at(n, ch, y, xx) = x.at(n, ch, y / 2, xx / 2);
  return push(OpKind::Upsample2, {input}, std::move(out));
}

template <typename T>
NodeId Graph<T>::concat_channels(NodeId a, NodeId b) {
  const auto& xa = value(a);
  const auto& xb = value(b);
  require_rank4(xa.shape(), "concat_channels");
  require_rank4(xb.shape(), "concat_channels");
  const char* axis_names[] = {"axis 0 (batch)", "", "axis 2 (height)", "axis 3 (width)"};
  for (int axis : {0, 2, 3}) {
    if (xa.dim(axis) != xb.dim(axis)) {
      throw ShapeError(std::string("concat_channels: ") + axis_names[axis] + " mismatch: " +
                       std::to_string(xa.dim(axis)) + " vs " + std::to_string(xb.dim(axis)));
    }
  }
  const int nb = xa.dim(0), ca = xa.dim(1), cb = xb.dim(1);
  const std::size_t plane = static_cast<std::size_t>(xa.dim(2)) * xa.dim(3);
  Tensor<T> out(Shape{nb, ca + cb, xa.dim(2), xa.dim(3)});
  for (int n = 0; n < nb; ++n) {
    auto dst = out.data().begin() + static_cast<std::ptrdiff_t>(n * (ca + cb) * plane);
    auto sa = xa.data().begin() + static_cast<std::ptrdiff_t>(n * ca * plane);
    auto sb = xb.data().begin() + static_cast<std::ptrdiff_t>(n * cb * plane);
    dst = std::copy(sa, sa + static_cast<std::ptrdiff_t>(ca * plane), dst);
    std::copy(sb, sb + static_cast<std::ptrdiff_t>(cb * plane), dst);
  }
  return push(OpKind::Concat, {a, b}, std::move(out));
}

template <typename T>
NodeId Graph<T>::add(NodeId a, NodeId b) {
  const auto& xa = value(a);
  const auto& xb = value(b);
  if (xa.shape() != xb.shape()) {
    throw ShapeError("add: shape mismatch " + xa.shape().to_string() + " vs " + xb.shape().to_string());
  }
  Tensor<T> out(xa.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[i] + xb[i];
  return push(OpKind::Add, {a, b}, std::move(out));
}

template <typename T>
NodeId Graph<T>::select_sum(NodeId logits, int class_id, std::span<const std::int64_t> positions, T scale) {
  const auto& y = value(logits);
  require_rank4(y.shape(), "select_sum");
  if (y.dim(0) != 1) throw ShapeError("select_sum: axis 0 (batch) must be 1");
  if (class_id < 0 || class_id >= y.dim(1)) {
    throw ShapeError("select_sum: class id " + std::to_string(class_id) + " outside axis 1 (classes) [0, " +
                     std::to_string(y.dim(1)) + ")");
  }
  if (positions.empty()) throw GraphError("select_sum: empty pixel set");
  const std::int64_t plane = static_cast<std::int64_t>(y.dim(2)) * y.dim(3);
  const T* base = y.data().data() + class_id * plane;
  T sum{0};
  for (std::int64_t p : positions) {
    if (p < 0 || p >= plane) throw ShapeError("select_sum: position " + std::to_string(p) + " out of range");
    sum += base[p];
  }
  Tensor<T> out(Shape{1}, std::vector<T>{scale * sum});
  return push(OpKind::SelectSum, {logits}, std::move(out),
              SelectAttr{class_id, std::vector<std::int64_t>(positions.begin(), positions.end()), scale});
}

template <typename T>
NodeId Graph<T>::cross_entropy(NodeId logits, std::span<const int> labels) {
  const auto& y = value(logits);
  require_rank4(y.shape(), "cross_entropy");
  const int nb = y.dim(0), c = y.dim(1);
  const std::size_t plane = static_cast<std::size_t>(y.dim(2)) * y.dim(3);
  const std::size_t pixels = nb * plane;
  if (labels.size() != pixels) {
    throw ShapeError("cross_entropy: label count " + std::to_string(labels.size()) + " != N*H*W " +
                     std::to_string(pixels));
  }
  CrossEntropyAttr attr{Tensor<T>(y.shape()), std::vector<int>(labels.begin(), labels.end())};
  double total = 0.0;
  for (int n = 0; n < nb; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const int label = labels[n * plane + p];
      if (label < 0 || label >= c) {
        throw ShapeError("cross_entropy: class id " + std::to_string(label) + " out of range [0, " +
                         std::to_string(c) + ")");
      }
      auto idx = [&](int ch) { return (static_cast<std::size_t>(n) * c + ch) * plane + p; };
      T m = y[idx(0)];
      for (int ch = 1; ch < c; ++ch) m = std::max(m, y[idx(ch)]);
      T z{0};
      for (int ch = 0; ch < c; ++ch) {
        const T e = std::exp(y[idx(ch)] - m);
        attr.probs[idx(ch)] = e;
        z += e;
      }
      for (int ch = 0; ch < c; ++ch) attr.probs[idx(ch)] /= z;
      total += static_cast<double>(m + std::log(z) - y[idx(label)]);
    }
  }
  Tensor<T> out(Shape{1}, std::vector<T>{static_cast<T>(total / static_cast<double>(pixels))});
  return push(OpKind::CrossEntropy, {logits}, std::move(out), std::move(attr));
}

template <typename T>
NodeId Graph<T>::tap(const std::string& name, NodeId id) {
  node(id);
  if (taps_.count(name)) throw GraphError("duplicate tap name '" + name + "'");
  taps_.emplace(name, id);
  tap_order_.push_back(name);
  auto it = perturbations_.find(name);
  if (it == perturbations_.end()) return id;
  if (it->second.shape() != value(id).shape()) {
    throw ShapeError("perturbation for tap '" + name + "' has shape " + it->second.shape().to_string() +
                     ", activation has " + value(id).shape().to_string());
  }
  return add(id, leaf(it->second));
}

template <typename T>
void Graph<T>::perturb_tap(const std::string& name, Tensor<T> delta) {
  perturbations_.insert_or_assign(name, std::move(delta));
}

template <typename T>
NodeId Graph<T>::tap_node(const std::string& name) const {
  auto it = taps_.find(name);
  if (it == taps_.end()) throw UnknownTapError(name, tap_order_);
  return it->second;
}

template <typename T>
std::uint64_t Graph<T>::activation_pattern() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  for (const auto& n : nodes_) {
    if (n.kind == OpKind::Relu) {
      for (T v : n.value.data()) mix(v > T{0} ? 1u : 0u);
    } else if (n.kind == OpKind::MaxPool2) {
      for (auto a : std::get<PoolAttr>(n.attr).argmax) mix(a);
    }
  }
  return h;
}

template <typename T>
GradientStore<T> Graph<T>::backward(NodeId seed, const Tensor<T>& seed_gradient) const {
  const Node& s = node(seed);
  if (seed_gradient.shape() != s.value.shape()) {
    throw ShapeError("backward: seed gradient shape " + seed_gradient.shape().to_string() +
                     " != node output shape " + s.value.shape().to_string());
  }
  GradientStore<T> store(nodes_.size());
  store.accumulate(seed, seed_gradient);
  for (std::int64_t i = seed.index; i >= 0; --i) {
    const NodeId id{static_cast<std::uint32_t>(i)};
    if (!store.contains(id)) continue;
    propagate(nodes_[id.index], store.at(id), store);
  }
  return store;
}

template <typename T>
void Graph<T>::propagate(const Node& n, const Tensor<T>& g, GradientStore<T>& store) const {
  switch (n.kind) {
    case OpKind::Leaf:
      return;

    case OpKind::Relu: {
      const auto& y = n.value;
      Tensor<T> gx(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i) gx[i] = y[i] > T{0} ? g[i] : T{0};
      store.accumulate(n.inputs[0], gx);
      return;
    }

    case OpKind::Add:
      store.accumulate(n.inputs[0], g);
      store.accumulate(n.inputs[1], g);
      return;

    case OpKind::MaxPool2: {
      const auto& attr = std::get<PoolAttr>(n.attr);
      Tensor<T> gx(value(n.inputs[0]).shape());
      for (std::size_t o = 0; o < attr.argmax.size(); ++o) gx[attr.argmax[o]] += g[o];
      store.accumulate(n.inputs[0], gx);
      return;
    }

    case OpKind::Upsample2: {
      const auto& x = value(n.inputs[0]);
      Tensor<T> gx(x.shape());
      const int nb = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
      for (int b = 0; b < nb; ++b)
        for (int ch = 0; ch < c; ++ch)
          for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx) gx.at(b, ch, y / 2, xx / 2) += g.at(b, ch, y, xx);
      store.accumulate(n.inputs[0], gx);
      return;
    }

    case OpKind::Concat: {
      const auto& xa = value(n.inputs[0]);
      const auto& xb = value(n.inputs[1]);
      Tensor<T> ga(xa.shape()), gb(xb.shape());
      const int nb = xa.dim(0), ca = xa.dim(1), cb = xb.dim(1);
      const std::size_t plane = static_cast<std::size_t>(xa.dim(2)) * xa.dim(3);
      for (int b = 0; b < nb; ++b) {
        auto src = g.data().begin() + static_cast<std::ptrdiff_t>(b * (ca + cb) * plane);
        std::copy(src, src + static_cast<std::ptrdiff_t>(ca * plane),
                  ga.data().begin() + static_cast<std::ptrdiff_t>(b * ca * plane));
        src += static_cast<std::ptrdiff_t>(ca * plane);
        std::copy(src, src + static_cast<std::ptrdiff_t>(cb * plane),
                  gb.data().begin() + static_cast<std::ptrdiff_t>(b * cb * plane));
      }
      store.accumulate(n.inputs[0], ga);
      store.accumulate(n.inputs[1], gb);
      return;
    }

    case OpKind::SelectSum: {
      const auto& attr = std::get<SelectAttr>(n.attr);
      const auto& y = value(n.inputs[0]);
      Tensor<T> gy(y.shape());
      const std::int64_t plane = static_cast<std::int64_t>(y.dim(2)) * y.dim(3);
      T* base = gy.data().data() + attr.class_id * plane;
      for (std::int64_t p : attr.positions) base[p] += attr.scale * g[0];
      store.accumulate(n.inputs[0], gy);
      return;
    }

    case OpKind::CrossEntropy: {
      const auto& attr = std::get<CrossEntropyAttr>(n.attr);
      const auto& y = value(n.inputs[0]);
      const int nb = y.dim(0), c = y.dim(1);
      const std::size_t plane = static_cast<std::size_t>(y.dim(2)) * y.dim(3);
      const T inv = g[0] / static_cast<T>(nb * plane);
      Tensor<T> gy(y.shape());
      for (int b = 0; b < nb; ++b) {
        for (std::size_t p = 0; p < plane; ++p) {
          const int label = attr.labels[b * plane + p];
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t idx = (static_cast<std::size_t>(b) * c + ch) * plane + p;
            gy[idx] = (attr.probs[idx] - (ch == label ? T{1} : T{0})) * inv;
          }
        }
      }
      store.accumulate(n.inputs[0], gy);
      return;
    }

    case OpKind::Conv2d: {
      const auto& attr = std::get<ConvAttr>(n.attr);
      const auto& x = value(n.inputs[0]);
      const auto& k = value(n.inputs[1]);
      const int nbatch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
      const int cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
      const int ho = g.dim(2), wo = g.dim(3);
      const int stride = attr.stride, padding = attr.padding;
      Tensor<T> gx(x.shape()), gk(k.shape()), gb(Shape{cout});
      const std::size_t in_plane = static_cast<std::size_t>(h) * w;
      const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
      const T* xin = x.data().data();
      const T* kern = k.data().data();
      const T* gout = g.data().data();
      T* gxin = gx.data().data();
      T* gkern = gk.data().data();

      for (int b = 0; b < nbatch; ++b) {
        for (int co = 0; co < cout; ++co) {
          const T* gp = gout + (static_cast<std::size_t>(b) * cout + co) * out_plane;
          T bsum{0};
          for (std::size_t i = 0; i < out_plane; ++i) bsum += gp[i];
          gb[co] += bsum;
          for (int ci = 0; ci < cin; ++ci) {
            const T* ip = xin + (static_cast<std::size_t>(b) * cin + ci) * in_plane;
            T* gip = gxin + (static_cast<std::size_t>(b) * cin + ci) * in_plane;
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                const std::size_t kidx = ((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx;
                const T wv = kern[kidx];
                const int shift = kx - padding;
                int ox0 = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
                int ox1 = std::min(wo, (w - 1 - shift) / stride + 1);
                if (w - 1 - shift < 0) ox1 = 0;
                T acc{0};
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - padding + ky;
                  if (iy < 0 || iy >= h) continue;
                  const T* grow = gp + static_cast<std::size_t>(oy) * wo;
                  const T* irow = ip + static_cast<std::size_t>(iy) * w;
                  T* girow = gip + static_cast<std::size_t>(iy) * w;
                  if (stride == 1) {
                    for (int ox = ox0; ox < ox1; ++ox) {
                      acc += grow[ox] * irow[ox + shift];
                      girow[ox + shift] += wv * grow[ox];
                    }
                  } else {
                    for (int ox = ox0; ox < ox1; ++ox) {
                      acc += grow[ox] * irow[ox * stride + shift];
                      girow[ox * stride + shift] += wv * grow[ox];
                    }
                  }
                }
                gkern[kidx] += acc;
              }
            }
          }
        }
      }
      if (fault_ == Fault::ConvKernelGradSkew) {
        for (auto& v : gk.data()) v *= static_cast<T>(1.01);
      }
      store.accumulate(n.inputs[0], gx);
      store.accumulate(n.inputs[1], gk);
      store.accumulate(n.inputs[2], gb);
      return;
    }
  }
}

template class GradientStore<float>;
template class GradientStore<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace segcam
