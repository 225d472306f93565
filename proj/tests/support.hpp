#pragma once

#include <chrono>
#include <filesystem>
#include <cstdio>
#include <string>

#include "segcam/rng.hpp"
#include "segcam/tensor.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("segcam_" + tag + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <typename T>
segcam::Tensor<T> random_tensor(segcam::SplitMix64& rng, segcam::Shape shape, double lo = -1.0, double hi = 1.0) {
  segcam::Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Direct six-loop convolution, zero padding; batch 1.
template <typename T>
segcam::Tensor<T> conv2d_loops(const segcam::Tensor<T>& x, const segcam::Tensor<T>& k, const segcam::Tensor<T>& b,
                               int stride, int pad) {
  const int cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  segcam::Tensor<T> y(segcam::Shape{1, cout, oh, ow});
  for (int o = 0; o < cout; ++o)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double s = b[o];
        for (int c = 0; c < cin; ++c)
          for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
              const int iy = oy * stride + dy - pad, ix = ox * stride + dx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              s += static_cast<double>(k.at(o, c, dy, dx)) * x.at(0, c, iy, ix);
            }
        y.at(0, o, oy, ox) = static_cast<T>(s);
      }
  return y;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::string out;
  if (FILE* f = std::fopen(p.string().c_str(), "rb")) {
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) out.append(buf, n);
    std::fclose(f);
  }
  return out;
}

}  // namespace testing
