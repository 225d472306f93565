#include "segcam/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <vector>
#include <stdexcept>

namespace segcam {

namespace {

void require_plane(const TensorF& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + ": expected rank-2 [H,W] map, got " + t.shape().to_string());
}

}  // namespace

std::array<float, 3> colormap(float t) {
  t = std::clamp(t, 0.0f, 1.0f);
  std::size_t seg = 0;
  while (seg + 2 < kHeatColormap.size() && t > kHeatColormap[seg + 1].position) ++seg;
  const auto& lo = kHeatColormap[seg];
  const auto& hi = kHeatColormap[seg + 1];
  const float f = (t - lo.position) / (hi.position - lo.position);
  std::array<float, 3> out{};
  for (int c = 0; c < 3; ++c) {
    out[c] = static_cast<float>(lo.rgb[c]) + f * (static_cast<float>(hi.rgb[c]) - static_cast<float>(lo.rgb[c]));
  }
  return out;
}

template <typename T>
Tensor<T> normalize_peak(const Tensor<T>& raw) {
  Tensor<T> out(raw.shape());
  T peak = 0;
  for (T v : raw.data()) {
    if (v < 0) throw std::invalid_argument("normalize: negative value " + std::to_string(v));
    peak = std::max(peak, v);
  }
  if (peak == 0) return out;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] / peak;
  return out;
}

TensorF normalize(const TensorF& raw) { return normalize_peak(raw); }
TensorD normalize(const TensorD& raw) { return normalize_peak(raw); }

TensorF normalize_min_max(const TensorF& map) {
  TensorF out(map.shape());
  const float lo = map.min_value(), hi = map.max_value();
  if (hi == lo) {
    std::fill(out.data().begin(), out.data().end(), hi == 0.0f ? 0.0f : 1.0f);
    return out;
  }
  const float range = hi - lo;
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = (map[i] - lo) / range;
  return out;
}

TensorF upsample_bilinear(const TensorF& map, int height, int width) {
  require_plane(map, "upsample_bilinear");
  const int u = map.dim(0), v = map.dim(1);
  TensorF out(Shape{height, width});
  const double sy = height > 1 ? static_cast<double>(u - 1) / (height - 1) : 0.0;
  const double sx = width > 1 ? static_cast<double>(v - 1) / (width - 1) : 0.0;
  for (int y = 0; y < height; ++y) {
    const double fy = y * sy;
    const int y0 = std::min(static_cast<int>(fy), u - 1);
    const int y1 = std::min(y0 + 1, u - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = x * sx;
      const int x0 = std::min(static_cast<int>(fx), v - 1);
      const int x1 = std::min(x0 + 1, v - 1);
      const double wx = fx - x0;
      const double top = (1.0 - wx) * map.at(y0, x0) + wx * map.at(y0, x1);
      const double bottom = (1.0 - wx) * map.at(y1, x0) + wx * map.at(y1, x1);
      out.at(y, x) = static_cast<float>((1.0 - wy) * top + wy * bottom);
    }
  }
  return out;
}

TensorF colorize_overlay(const TensorF& image, const TensorF& heat) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) {
    throw ShapeError("colorize_overlay: image must be [1,3,H,W], got " + image.shape().to_string());
  }
  require_plane(heat, "colorize_overlay");
  if (heat.dim(0) != image.dim(2) || heat.dim(1) != image.dim(3)) {
    throw ShapeError("colorize_overlay: heat " + heat.shape().to_string() + " does not match image " +
                     image.shape().to_string());
  }
  TensorF out(image.shape());
  for (int y = 0; y < heat.dim(0); ++y) {
    for (int x = 0; x < heat.dim(1); ++x) {
      const float h = std::clamp(heat.at(y, x), 0.0f, 1.0f);
      const float a = 0.6f * h;
      const auto rgb = colormap(h);
      for (int c = 0; c < 3; ++c) {
        const float v = (1.0f - a) * image.at(0, c, y, x) + a * (rgb[c] / 255.0f);
        out.at(0, c, y, x) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

TensorF sobel_edges(const TensorF& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) {
    throw ShapeError("sobel_edges: image must be [1,3,H,W], got " + image.shape().to_string());
  }
  const int h = image.dim(2), w = image.dim(3);
  TensorF lum(Shape{h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      lum.at(y, x) = 0.299f * image.at(0, 0, y, x) + 0.587f * image.at(0, 1, y, x) + 0.114f * image.at(0, 2, y, x);

  static constexpr int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static constexpr int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  TensorF mag(Shape{h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double gx = 0.0, gy = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const double v = lum.at(yy, xx);
          gx += kx[dy + 1][dx + 1] * v;
          gy += ky[dy + 1][dx + 1] * v;
        }
      }
      mag.at(y, x) = static_cast<float>(std::sqrt(gx * gx + gy * gy));
    }
  }
  return normalize_min_max(mag);
}

double cosine_similarity(const TensorF& a, const TensorF& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("cosine_similarity: " + a.shape().to_string() + " vs " + b.shape().to_string());
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

void draw_dot(TensorF& image, int row, int col, int radius) {
  const int h = image.dim(2), w = image.dim(3);
  for (int y = std::max(0, row - radius); y <= std::min(h - 1, row + radius); ++y)
    for (int x = std::max(0, col - radius); x <= std::min(w - 1, col + radius); ++x)
      for (int c = 0; c < 3; ++c) image.at(0, c, y, x) = 1.0f;
}

std::string map_to_csv(const TensorF& map) {
  require_plane(map, "map_to_csv");
  std::string out;
  char buf[32];
  for (int y = 0; y < map.dim(0); ++y) {
    for (int x = 0; x < map.dim(1); ++x) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(map.at(y, x)));
      if (x) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

TensorF map_from_csv(std::string_view text) {
  std::vector<float> values;
  int rows = 0, cols = -1;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    int count = 0;
    std::size_t start = 0;
    while (start <= line.size()) {
      std::size_t comma = line.find(',', start);
      if (comma == std::string_view::npos) comma = line.size();
      const std::string cell(line.substr(start, comma - start));
      char* end = nullptr;
      const float v = std::strtof(cell.c_str(), &end);
      if (cell.empty() || end != cell.c_str() + cell.size()) {
        throw std::invalid_argument("map_from_csv: bad number '" + cell + "' on row " + std::to_string(rows));
      }
      values.push_back(v);
      ++count;
      start = comma + 1;
    }
    if (cols >= 0 && count != cols) throw std::invalid_argument("map_from_csv: ragged rows");
    cols = count;
    ++rows;
  }
  if (rows == 0) throw std::invalid_argument("map_from_csv: empty input");
  return TensorF(Shape{rows, cols}, std::move(values));
}

}  // namespace segcam
