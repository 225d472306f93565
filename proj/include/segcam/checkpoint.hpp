#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "segcam/netpbm.hpp"
#include "segcam/unet.hpp"

namespace segcam {

// Layout (all integers little-endian):
//   bytes 0..3   "SGCM"
//   u32          version (1)
//   u32          header length L
//   L bytes      UTF-8 JSON header: config, class_names, tap_names,
//                parameters [{name, shape}], training
//   payload      float32 LE values of every parameter in header order
inline constexpr char kCheckpointMagic[4] = {'S', 'G', 'C', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, Magic, Version, HeaderParse, ShapeMismatch, PayloadLength };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  UNet model;
  std::vector<std::string> class_names;
  nlohmann::json training = nlohmann::json::object();
};

Bytes encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a 64 of a byte string, as 16 hex digits.
std::string fnv1a_hex(std::span<const std::uint8_t> bytes);

}  // namespace segcam
