#include "segcam/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>

namespace segcam {

using nlohmann::json;

namespace {

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
  return v;
}

json header_json(const Checkpoint& ckpt) {
  const auto& cfg = ckpt.model.config();
  json params = json::array();
  for (const auto& p : ckpt.model.parameters()) {
    params.push_back({{"name", p.name}, {"shape", p.value.shape().to_vector()}});
  }
  return json{{"config",
               {{"in_channels", cfg.in_channels},
                {"num_classes", cfg.num_classes},
                {"base_channels", cfg.base_channels},
                {"depth", cfg.depth}}},
              {"class_names", ckpt.class_names},
              {"tap_names", ckpt.model.tap_names()},
              {"parameters", params},
              {"training", ckpt.training}};
}

}  // namespace

Bytes encode_checkpoint(const Checkpoint& ckpt) {
  const std::string header = header_json(ckpt).dump();
  Bytes out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  out.reserve(out.size() + 4 * ckpt.model.parameter_count());
  for (const auto& p : ckpt.model.parameters()) {
    for (float v : p.value.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < 12) throw CheckpointError(Kind::HeaderParse, "checkpoint shorter than its fixed preamble");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError(Kind::Magic, "bad checkpoint magic (expected SGCM)");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::Version, "unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t header_len = get_u32(bytes, 8);
  if (bytes.size() < 12ull + header_len) {
    throw CheckpointError(Kind::HeaderParse, "checkpoint header length exceeds file size");
  }

  json header;
  UNetConfig cfg;
  std::vector<std::pair<std::string, std::vector<int>>> declared;
  Checkpoint ckpt{UNet(UNetConfig{}), {}, json::object()};
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
    const auto& c = header.at("config");
    cfg.in_channels = c.at("in_channels").get<int>();
    cfg.num_classes = c.at("num_classes").get<int>();
    cfg.base_channels = c.at("base_channels").get<int>();
    cfg.depth = c.at("depth").get<int>();
    for (const auto& p : header.at("parameters")) {
      declared.emplace_back(p.at("name").get<std::string>(), p.at("shape").get<std::vector<int>>());
    }
    ckpt.class_names = header.at("class_names").get<std::vector<std::string>>();
    ckpt.training = header.at("training");
    header.at("tap_names").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw CheckpointError(Kind::HeaderParse, std::string("checkpoint header parse failure: ") + e.what());
  }

  try {
    ckpt.model = UNet(cfg);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(Kind::HeaderParse, std::string("invalid model config in header: ") + e.what());
  }
  if (header.at("tap_names").get<std::vector<std::string>>() != ckpt.model.tap_names()) {
    throw CheckpointError(Kind::ShapeMismatch, "tap names in header do not match the configured architecture");
  }
  auto& params = ckpt.model.parameters();
  if (declared.size() != params.size()) {
    throw CheckpointError(Kind::ShapeMismatch, "header lists " + std::to_string(declared.size()) +
                                                   " parameters, architecture has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (declared[i].first != params[i].name || declared[i].second != params[i].value.shape().to_vector()) {
      throw CheckpointError(Kind::ShapeMismatch, "parameter " + std::to_string(i) + " (" + declared[i].first +
                                                     ") does not match architecture entry " + params[i].name +
                                                     " " + params[i].value.shape().to_string());
    }
  }

  const std::size_t payload_at = 12 + header_len;
  const std::size_t expected = 4 * ckpt.model.parameter_count();
  if (bytes.size() - payload_at != expected) {
    throw CheckpointError(Kind::PayloadLength, "checkpoint payload is " + std::to_string(bytes.size() - payload_at) +
                                                   " bytes, expected " + std::to_string(expected));
  }
  std::size_t at = payload_at;
  for (auto& p : params) {
    for (auto& v : p.value.data()) {
      v = std::bit_cast<float>(get_u32(bytes, at));
      at += 4;
    }
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  try {
    write_file(path, encode_checkpoint(ckpt));
  } catch (const std::runtime_error& e) {
    throw CheckpointError(CheckpointError::Kind::Io, e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Bytes bytes;
  try {
    bytes = read_file(path);
  } catch (const std::runtime_error& e) {
    throw CheckpointError(CheckpointError::Kind::Io, e.what());
  }
  return decode_checkpoint(bytes);
}

std::string fnv1a_hex(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace segcam
