#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "segcam/tensor.hpp"

namespace segcam {

enum class ShapeClass : int { Background = 0, Circle = 1, Square = 2, Triangle = 3 };

inline constexpr int kSynthClassCount = 4;
const std::vector<std::string>& synth_class_names();
/// Display colors for class ids, 8-bit RGB.
const std::vector<std::array<std::uint8_t, 3>>& synth_palette();

/// Analytic geometry of one drawn shape. `extent` is the radius (circle),
/// half side (square) or half height/half base (upward triangle). Pixel
/// (row, col) belongs to a shape iff its center (row + 0.5, col + 0.5) does.
struct ShapeInstance {
  ShapeClass kind;
  double center_y;
  double center_x;
  double extent;
  std::array<float, 3> color;

  bool contains(double y, double x) const;
};

struct Sample {
  TensorF image;  // [1,3,H,W], multiples of 1/255 in [0,1]
  TensorF mask;   // [1,1,H,W], class ids
  std::string id;
  std::vector<ShapeInstance> shapes;  // draw order
};

struct DatasetSpec {
  std::uint64_t seed = 0;
  int count = 1;
  int size = 64;

  void validate() const;
};

/// Gray noise background (uniform in [0.35, 0.65] per pixel) with one to
/// three shapes of distinct classes. Circles are red, squares green,
/// triangles blue, each with per-instance brightness jitter. Later shapes
/// overwrite earlier ones in both image and mask. Sample i draws from
/// SplitMix64(seed, synth stream + i).
std::vector<Sample> generate(const DatasetSpec& spec);
Sample generate_sample(const DatasetSpec& spec, int index);

std::string sample_id(int index);

/// <dir>/images/<id>.ppm, <dir>/masks/<id>.pgm and <dir>/manifest.json.
/// Returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec,
                                    const std::vector<Sample>& samples);

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;
  int size = 0;
  std::uint64_t seed = 0;
};

/// Reads a dataset written by write_dataset. Shape geometry is not stored
/// on disk, so loaded samples have empty `shapes`.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace segcam
