#include "segcam/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "segcam/netpbm.hpp"
#include "segcam/rng.hpp"

namespace segcam {

using nlohmann::json;

const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> names{"background", "circle", "square", "triangle"};
  return names;
}

const std::vector<std::array<std::uint8_t, 3>>& synth_palette() {
  static const std::vector<std::array<std::uint8_t, 3>> palette{
      {{40, 40, 40}}, {{230, 60, 60}}, {{60, 200, 60}}, {{70, 90, 240}}};
  return palette;
}

bool ShapeInstance::contains(double y, double x) const {
  const double dy = y - center_y, dx = x - center_x;
  switch (kind) {
    case ShapeClass::Circle:
      return dy * dy + dx * dx <= extent * extent;
    case ShapeClass::Square:
      return std::abs(dy) <= extent && std::abs(dx) <= extent;
    case ShapeClass::Triangle:
      // apex at (cy - e, cx), base row cy + e spanning cx - e .. cx + e
      return dy >= -extent && dy <= extent && std::abs(dx) <= (dy + extent) / 2.0;
    case ShapeClass::Background:
      return false;
  }
  return false;
}

void DatasetSpec::validate() const {
  if (count < 1) throw std::invalid_argument("dataset count must be >= 1");
  if (size < 8) throw std::invalid_argument("dataset size must be >= 8");
  if (size > 1024) throw std::invalid_argument("dataset size must be <= 1024");
}

std::string sample_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%05d", index);
  return buf;
}

Sample generate_sample(const DatasetSpec& spec, int index) {
  SplitMix64 rng(spec.seed, rng_stream::kSynthBase + static_cast<std::uint64_t>(index));
  const int n = spec.size;
  Sample s;
  s.id = sample_id(index);
  s.image = TensorF(Shape{1, 3, n, n});
  s.mask = TensorF(Shape{1, 1, n, n});

  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const float g = static_cast<float>(rng.uniform(0.35, 0.65));
      for (int c = 0; c < 3; ++c) s.image.at(0, c, y, x) = g;
    }
  }

  // Mostly three shapes so every class appears in most samples.
  const double u = rng.uniform();
  const int shape_count = u < 0.05 ? 1 : (u < 0.20 ? 2 : 3);
  std::array<int, 3> classes{1, 2, 3};
  for (int i = 2; i > 0; --i) {
    std::swap(classes[i], classes[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  }

  static constexpr std::array<std::array<float, 3>, 4> kHue{{
      {0.0f, 0.0f, 0.0f}, {1.0f, 0.2f, 0.2f}, {0.2f, 1.0f, 0.2f}, {0.2f, 0.2f, 1.0f}}};

  for (int k = 0; k < shape_count; ++k) {
    ShapeInstance shape{};
    shape.kind = static_cast<ShapeClass>(classes[k]);
    shape.extent = rng.uniform(0.08, 0.18) * n;
    shape.center_y = rng.uniform(shape.extent, n - shape.extent);
    shape.center_x = rng.uniform(shape.extent, n - shape.extent);
    const float brightness = static_cast<float>(rng.uniform(0.7, 1.0));
    for (int c = 0; c < 3; ++c) shape.color[c] = brightness * kHue[classes[k]][c];

    const int y0 = std::max(0, static_cast<int>(std::floor(shape.center_y - shape.extent)) - 1);
    const int y1 = std::min(n - 1, static_cast<int>(std::ceil(shape.center_y + shape.extent)) + 1);
    const int x0 = std::max(0, static_cast<int>(std::floor(shape.center_x - shape.extent)) - 1);
    const int x1 = std::min(n - 1, static_cast<int>(std::ceil(shape.center_x + shape.extent)) + 1);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (!shape.contains(y + 0.5, x + 0.5)) continue;
        for (int c = 0; c < 3; ++c) s.image.at(0, c, y, x) = shape.color[c];
        s.mask.at(0, 0, y, x) = static_cast<float>(classes[k]);
      }
    }
    s.shapes.push_back(shape);
  }

  // Store exactly what the on-disk format can represent.
  for (auto& v : s.image.data()) v = static_cast<float>(quantize_unit(v)) / 255.0f;
  return s;
}

std::vector<Sample> generate(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) out.push_back(generate_sample(spec, i));
  return out;
}

std::filesystem::path write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec,
                                    const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  json ids = json::array();
  for (const auto& s : samples) {
    write_file(dir / "images" / (s.id + ".ppm"), write_ppm(s.image));
    write_file(dir / "masks" / (s.id + ".pgm"), write_pgm(s.mask));
    ids.push_back(s.id);
  }
  json manifest{{"ids", ids},
                {"size", spec.size},
                {"count", static_cast<int>(samples.size())},
                {"class_names", synth_class_names()},
                {"seed", spec.seed}};
  const fs::path path = dir / "manifest.json";
  const std::string text = manifest.dump(2) + "\n";
  write_file(path, Bytes(text.begin(), text.end()));
  return path;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw std::runtime_error("manifest not found: " + path.string());
  const Bytes raw = read_file(path);
  json manifest;
  try {
    manifest = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw std::runtime_error("cannot parse " + path.string() + ": " + e.what());
  }
  Dataset ds;
  ds.size = manifest.at("size").get<int>();
  ds.seed = manifest.value("seed", std::uint64_t{0});
  ds.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  for (const auto& id : manifest.at("ids")) {
    Sample s;
    s.id = id.get<std::string>();
    s.image = read_ppm(read_file(dir / "images" / (s.id + ".ppm")));
    s.mask = read_pgm(read_file(dir / "masks" / (s.id + ".pgm")));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace segcam
