#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "segcam/tensor.hpp"

namespace segcam {

using Bytes = std::vector<std::uint8_t>;

/// Malformed or truncated image data; `offset` is the byte position where
/// parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Binary P6, maxval 255. Image is [1,3,H,W] in [0,1]; values are clamped and
// rounded to the nearest 1/255.
Bytes write_ppm(const TensorF& image);
TensorF read_ppm(std::span<const std::uint8_t> bytes);

// Binary P5, maxval 255, gray value == class id. Mask is [1,1,H,W].
Bytes write_pgm(const TensorF& mask);
TensorF read_pgm(std::span<const std::uint8_t> bytes);

/// 8-bit quantization used on disk: round(clamp(v, 0, 1) * 255).
std::uint8_t quantize_unit(float v);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace segcam
