#include "segcam/netpbm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

namespace segcam {

namespace {

struct Header {
  int width;
  int height;
  std::size_t payload_offset;
};

class HeaderParser {
 public:
  explicit HeaderParser(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void expect_magic(const char* magic) {
    if (bytes_.size() < 2) throw FormatError("truncated header: missing magic", bytes_.size());
    if (bytes_[0] != magic[0] || bytes_[1] != magic[1]) {
      throw FormatError(std::string("bad magic, expected ") + magic, 0);
    }
    pos_ = 2;
  }

  int next_int(const char* field) {
    skip_whitespace_and_comments();
    if (pos_ >= bytes_.size()) throw FormatError(std::string("truncated header: missing ") + field, pos_);
    if (!std::isdigit(bytes_[pos_])) throw FormatError(std::string("expected digit for ") + field, pos_);
    long v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > 1'000'000) throw FormatError(std::string(field) + " too large", pos_);
      ++pos_;
    }
    return static_cast<int>(v);
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t end_of_header() {
    if (pos_ >= bytes_.size()) throw FormatError("truncated header: missing separator after maxval", pos_);
    if (!std::isspace(bytes_[pos_])) throw FormatError("expected whitespace after maxval", pos_);
    return pos_ + 1;
  }

  std::size_t pos() const { return pos_; }

 private:
  void skip_whitespace_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

Header parse_header(std::span<const std::uint8_t> bytes, const char* magic, std::size_t channels) {
  HeaderParser p(bytes);
  p.expect_magic(magic);
  const std::size_t width_at = p.pos();
  const int width = p.next_int("width");
  if (width < 1) throw FormatError("width must be positive", width_at);
  const std::size_t height_at = p.pos();
  const int height = p.next_int("height");
  if (height < 1) throw FormatError("height must be positive", height_at);
  const std::size_t maxval_at = p.pos();
  const int maxval = p.next_int("maxval");
  if (maxval != 255) throw FormatError("unsupported maxval " + std::to_string(maxval) + " (need 255)", maxval_at);
  const std::size_t offset = p.end_of_header();
  const std::size_t need = static_cast<std::size_t>(width) * height * channels;
  if (bytes.size() < offset + need) {
    throw FormatError("truncated payload: need " + std::to_string(need) + " bytes, have " +
                          std::to_string(bytes.size() - offset),
                      bytes.size());
  }
  if (bytes.size() > offset + need) {
    throw FormatError("trailing bytes after payload", offset + need);
  }
  return {width, height, offset};
}

Bytes header_bytes(const char* magic, int width, int height) {
  const std::string h = std::string(magic) + "\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  return Bytes(h.begin(), h.end());
}

}  // namespace

std::uint8_t quantize_unit(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

Bytes write_ppm(const TensorF& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) {
    throw ShapeError("write_ppm expects [1,3,H,W], got " + image.shape().to_string());
  }
  const int h = image.dim(2), w = image.dim(3);
  Bytes out = header_bytes("P6", w, h);
  out.reserve(out.size() + static_cast<std::size_t>(3) * h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) out.push_back(quantize_unit(image.at(0, c, y, x)));
  return out;
}

TensorF read_ppm(std::span<const std::uint8_t> bytes) {
  const Header hdr = parse_header(bytes, "P6", 3);
  TensorF image(Shape{1, 3, hdr.height, hdr.width});
  const std::uint8_t* p = bytes.data() + hdr.payload_offset;
  for (int y = 0; y < hdr.height; ++y)
    for (int x = 0; x < hdr.width; ++x)
      for (int c = 0; c < 3; ++c) image.at(0, c, y, x) = static_cast<float>(*p++) / 255.0f;
  return image;
}

Bytes write_pgm(const TensorF& mask) {
  if (mask.rank() != 4 || mask.dim(0) != 1 || mask.dim(1) != 1) {
    throw ShapeError("write_pgm expects [1,1,H,W], got " + mask.shape().to_string());
  }
  Bytes out = header_bytes("P5", mask.dim(3), mask.dim(2));
  for (float v : mask.data()) {
    if (!(v >= 0.0f && v <= 255.0f) || v != std::floor(v)) {
      throw ShapeError("write_pgm: mask value " + std::to_string(v) + " is not a class id in [0, 255]");
    }
    out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

TensorF read_pgm(std::span<const std::uint8_t> bytes) {
  const Header hdr = parse_header(bytes, "P5", 1);
  TensorF mask(Shape{1, 1, hdr.height, hdr.width});
  const std::uint8_t* p = bytes.data() + hdr.payload_offset;
  for (auto& v : mask.data()) v = static_cast<float>(*p++);
  return mask;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace segcam
