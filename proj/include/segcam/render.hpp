#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "segcam/tensor.hpp"

namespace segcam {

struct ColorStop {
  float position;
  std::array<std::uint8_t, 3> rgb;
};

/// Blue, cyan, green, yellow, red at 0, 0.25, 0.5, 0.75, 1.
inline constexpr std::array<ColorStop, 5> kHeatColormap{{
    {0.00f, {0, 0, 255}},
    {0.25f, {0, 255, 255}},
    {0.50f, {0, 255, 0}},
    {0.75f, {255, 255, 0}},
    {1.00f, {255, 0, 0}},
}};

/// Linear interpolation between the colormap stops, channels in [0, 255].
/// Input is clamped to [0, 1].
std::array<float, 3> colormap(float t);

/// Divides a non-negative map by its maximum. An all-zero map stays zero.
/// Throws std::invalid_argument on negative entries.
TensorF normalize(const TensorF& raw);
TensorD normalize(const TensorD& raw);

/// (x - min) / (max - min). A constant map becomes all zeros when its value
/// is zero and all ones otherwise.
TensorF normalize_min_max(const TensorF& map);

/// Align-corners bilinear resize of an [U,V] map to [H,W].
TensorF upsample_bilinear(const TensorF& map, int height, int width);

/// out = (1 - a) * image + a * colormap(heat) / 255 with a = 0.6 * heat.
/// image [1,3,H,W] in [0,1]; heat [H,W] in [0,1].
TensorF colorize_overlay(const TensorF& image, const TensorF& heat);

/// Luminance 0.299 R + 0.587 G + 0.114 B, 3x3 Sobel gradient magnitude with
/// zero padding, min-max normalized. Returns [H,W].
TensorF sobel_edges(const TensorF& image);

/// Cosine similarity of two equally sized maps; 0 if either is all zero.
double cosine_similarity(const TensorF& a, const TensorF& b);

/// Paints a white dot of the given radius (Chebyshev) centered at (row, col)
/// into a [1,3,H,W] image.
void draw_dot(TensorF& image, int row, int col, int radius = 1);

/// Rank-2 map as CSV: one line per row, values printed with 9 significant
/// digits so float32 round-trips exactly.
std::string map_to_csv(const TensorF& map);
TensorF map_from_csv(std::string_view text);

}  // namespace segcam
