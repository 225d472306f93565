#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"
#include "segcam/checkpoint.hpp"
#include "segcam/explainer.hpp"
#include "segcam/synth.hpp"

namespace segcam {

struct ApiResponse {
  int status = 200;
  std::string body;
};

/// Error body carried by every non-2xx response:
///   {"status": <http status>, "code": "<CODE>", "message": "<text>"}
class ApiError : public std::runtime_error {
 public:
  ApiError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }
  nlohmann::json to_json() const;

 private:
  int status_;
  std::string code_;
};

/// Parses the wire form of a pixel set:
///   {"type":"single","i":I,"j":J}
///   {"type":"rect","i0":..,"j0":..,"i1":..,"j1":..}
///   {"type":"all"}
///   {"type":"predicted","class_id":C}
///   {"type":"mask","width":W,"height":H,"bits_base64":B}
/// Mask bits are packed row-major, most significant bit first, ceil(H*W/8)
/// bytes. Throws ApiError 400 BAD_PIXEL_SET.
PixelSet pixel_set_from_json(const nlohmann::json& j);

/// Raw heatmap floats as little-endian float32 bytes, row-major.
Bytes float32_le_bytes(const TensorF& map);
/// RGBA8 bytes (alpha 255) of a [1,3,H,W] image in [0,1].
Bytes rgba_bytes(const TensorF& image);

/// Request handlers over an immutable checkpoint and dataset. All handlers
/// are const and safe to call concurrently.
class Service {
 public:
  Service(Checkpoint checkpoint, Dataset dataset);

  ApiResponse info() const;
  ApiResponse images() const;
  ApiResponse image(const std::string& id) const;
  ApiResponse predict(const std::string& body) const;
  ApiResponse explain(const std::string& body) const;

  /// Routes a request to the handlers above; used by the HTTP layer and by
  /// socket-free tests.
  ApiResponse handle(const std::string& method, const std::string& path, const std::string& body) const;

  const Checkpoint& checkpoint() const { return ckpt_; }

 private:
  const Sample& sample(const std::string& id) const;
  ApiResponse guarded(const std::function<nlohmann::json()>& fn) const;

  Checkpoint ckpt_;
  Dataset data_;
  std::map<std::string, std::size_t> index_;
};

/// HTTP/1.1 front end. Optional static directory is mounted at "/".
class HttpServer {
 public:
  HttpServer(const Service& service, std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds host:port; port 0 picks a free port. Returns false if the port
  /// cannot be bound.
  bool bind(const std::string& host, int port);
  int port() const { return port_; }
  /// Serves until stop() is called.
  bool listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = -1;
};

}  // namespace segcam
