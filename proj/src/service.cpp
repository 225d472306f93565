#include "segcam/service.hpp"

#include <bit>

#include "httplib.h"
#include "segcam/base64.hpp"
#include "segcam/render.hpp"

namespace segcam {

using nlohmann::json;

json ApiError::to_json() const { return json{{"status", status_}, {"code", code_}, {"message", what()}}; }

namespace {

ApiError bad_request(const std::string& code, const std::string& message) { return ApiError(400, code, message); }

template <typename T>
T field(const json& j, const char* key, const char* code) {
  if (!j.is_object() || !j.contains(key)) throw bad_request(code, std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw bad_request(code, std::string("field '") + key + "' has the wrong type");
  }
}

json parse_body(const std::string& body) {
  try {
    json j = json::parse(body);
    if (!j.is_object()) throw bad_request("BAD_REQUEST", "request body must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw bad_request("BAD_REQUEST", std::string("malformed JSON body: ") + e.what());
  }
}

}  // namespace

PixelSet pixel_set_from_json(const json& j) {
  constexpr const char* kCode = "BAD_PIXEL_SET";
  if (!j.is_object()) throw bad_request(kCode, "pixel_set must be an object");
  const auto type = field<std::string>(j, "type", kCode);
  if (type == "single") return pixels::Single{field<int>(j, "i", kCode), field<int>(j, "j", kCode)};
  if (type == "rect") {
    return pixels::Rect{field<int>(j, "i0", kCode), field<int>(j, "j0", kCode), field<int>(j, "i1", kCode),
                        field<int>(j, "j1", kCode)};
  }
  if (type == "all") return pixels::All{};
  if (type == "predicted") return pixels::PredictedClass{field<int>(j, "class_id", kCode)};
  if (type == "mask") {
    pixels::Mask m{field<int>(j, "height", kCode), field<int>(j, "width", kCode), {}};
    if (m.height < 1 || m.width < 1 || m.height > 4096 || m.width > 4096) {
      throw bad_request(kCode, "mask dimensions out of range");
    }
    std::vector<std::uint8_t> packed;
    try {
      packed = base64_decode(field<std::string>(j, "bits_base64", kCode));
    } catch (const std::invalid_argument& e) {
      throw bad_request(kCode, std::string("bits_base64: ") + e.what());
    }
    const std::size_t n = static_cast<std::size_t>(m.height) * m.width;
    if (packed.size() != (n + 7) / 8) {
      throw bad_request(kCode, "bits_base64 must decode to ceil(height*width/8) = " + std::to_string((n + 7) / 8) +
                                   " bytes, got " + std::to_string(packed.size()));
    }
    m.bits.resize(n);
    for (std::size_t i = 0; i < n; ++i) m.bits[i] = (packed[i / 8] >> (7 - i % 8)) & 1u;
    return m;
  }
  throw bad_request(kCode, "unknown pixel_set type '" + type + "'");
}

Bytes float32_le_bytes(const TensorF& map) {
  Bytes out;
  out.reserve(4 * map.size());
  for (float v : map.data()) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  return out;
}

Bytes rgba_bytes(const TensorF& image) {
  const int h = image.dim(2), w = image.dim(3);
  Bytes out;
  out.reserve(static_cast<std::size_t>(4) * h * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) out.push_back(quantize_unit(image.at(0, c, y, x)));
      out.push_back(255);
    }
  }
  return out;
}

Service::Service(Checkpoint checkpoint, Dataset dataset) : ckpt_(std::move(checkpoint)), data_(std::move(dataset)) {
  for (std::size_t i = 0; i < data_.samples.size(); ++i) {
    ckpt_.model.check_input(data_.samples[i].image.shape());
    index_.emplace(data_.samples[i].id, i);
  }
}

const Sample& Service::sample(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw ApiError(404, "NOT_FOUND", "unknown image id '" + id + "'");
  return data_.samples[it->second];
}

ApiResponse Service::guarded(const std::function<json()>& fn) const {
  try {
    return {200, fn().dump()};
  } catch (const ApiError& e) {
    return {e.status(), e.to_json().dump()};
  } catch (const UnknownTapError& e) {
    return {400, ApiError(400, "UNKNOWN_TAP", e.what()).to_json().dump()};
  } catch (const ExplainError& e) {
    switch (e.code()) {
      case ExplainError::Code::EmptyPixelSet:
        return {422, ApiError(422, "EMPTY_PIXEL_SET", e.what()).to_json().dump()};
      case ExplainError::Code::BadClass:
        return {400, ApiError(400, "BAD_CLASS", e.what()).to_json().dump()};
      case ExplainError::Code::BadPixelSet:
        return {400, ApiError(400, "BAD_PIXEL_SET", e.what()).to_json().dump()};
    }
    return {400, ApiError(400, "BAD_REQUEST", e.what()).to_json().dump()};
  } catch (const std::exception& e) {
    return {500, ApiError(500, "INTERNAL", e.what()).to_json().dump()};
  }
}

ApiResponse Service::info() const {
  return guarded([&] {
    const auto& model = ckpt_.model;
    const auto& cfg = model.config();
    json shapes = json::object();
    for (const auto& tap : model.tap_names()) {
      const int s = data_.size >> model.tap_level(tap);
      shapes[tap] = {model.tap_channels(tap), s, s};
    }
    return json{{"classes", ckpt_.class_names},
                {"taps", model.tap_names()},
                {"tap_shapes", shapes},
                {"image_size", data_.size},
                {"num_classes", cfg.num_classes},
                {"checkpoint_meta",
                 {{"config",
                   {{"in_channels", cfg.in_channels},
                    {"num_classes", cfg.num_classes},
                    {"base_channels", cfg.base_channels},
                    {"depth", cfg.depth}}},
                  {"training", ckpt_.training}}}};
  });
}

ApiResponse Service::images() const {
  return guarded([&] {
    json ids = json::array();
    for (const auto& s : data_.samples) ids.push_back(s.id);
    return json{{"ids", ids}};
  });
}

ApiResponse Service::image(const std::string& id) const {
  return guarded([&] {
    const Sample& s = sample(id);
    return json{{"width", s.image.dim(3)}, {"height", s.image.dim(2)}, {"rgba_base64", base64_encode(rgba_bytes(s.image))}};
  });
}

ApiResponse Service::predict(const std::string& body) const {
  return guarded([&] {
    const json req = parse_body(body);
    const Sample& s = sample(field<std::string>(req, "image_id", "BAD_REQUEST"));
    const TensorF mask = predict_mask(ckpt_.model.forward(s.image).logits_value());
    Bytes ids;
    ids.reserve(mask.size());
    for (float v : mask.data()) ids.push_back(static_cast<std::uint8_t>(v));
    json palette = json::array();
    const auto& pal = synth_palette();
    for (int c = 0; c < ckpt_.model.num_classes(); ++c) {
      const auto& rgb = pal[static_cast<std::size_t>(c) % pal.size()];
      palette.push_back({rgb[0], rgb[1], rgb[2]});
    }
    return json{{"width", mask.dim(3)},
                {"height", mask.dim(2)},
                {"class_ids_base64", base64_encode(ids)},
                {"palette", palette}};
  });
}

ApiResponse Service::explain(const std::string& body) const {
  return guarded([&] {
    const json req = parse_body(body);
    const Sample& s = sample(field<std::string>(req, "image_id", "BAD_REQUEST"));
    ExplainRequest r;
    r.class_id = field<int>(req, "class_id", "BAD_CLASS");
    r.tap = field<std::string>(req, "tap", "UNKNOWN_TAP");
    if (!req.contains("pixel_set")) throw bad_request("BAD_PIXEL_SET", "missing field 'pixel_set'");
    r.pixel_set = pixel_set_from_json(req.at("pixel_set"));
    bool include_saliency = false;
    if (req.contains("include_saliency")) include_saliency = field<bool>(req, "include_saliency", "BAD_REQUEST");

    const Heatmap hm = seg_grad_cam(ckpt_.model, s.image, r);
    json out{{"tap_width", hm.raw.dim(1)},
             {"tap_height", hm.raw.dim(0)},
             {"raw_base64", base64_encode(float32_le_bytes(hm.raw))},
             {"overlay_rgba_base64", base64_encode(rgba_bytes(colorize_overlay(s.image, hm.upsampled)))},
             {"max_raw_value", hm.raw.max_value()}};
    if (include_saliency) {
      const TensorF sal = saliency_map(ckpt_.model, s.image, r);
      out["saliency_rgba_base64"] = base64_encode(rgba_bytes(colorize_overlay(s.image, sal)));
    }
    return out;
  });
}

ApiResponse Service::handle(const std::string& method, const std::string& path, const std::string& body) const {
  static const std::string kImagePrefix = "/api/images/";
  if (method == "GET" && path == "/api/info") return info();
  if (method == "GET" && path == "/api/images") return images();
  if (method == "GET" && path.starts_with(kImagePrefix) && path.size() > kImagePrefix.size()) {
    return image(path.substr(kImagePrefix.size()));
  }
  if (method == "POST" && path == "/api/predict") return predict(body);
  if (method == "POST" && path == "/api/explain") return explain(body);
  const ApiError err(404, "NOT_FOUND", "no route for " + method + " " + path);
  return {404, err.to_json().dump()};
}

struct HttpServer::Impl {
  httplib::Server server;
};

HttpServer::HttpServer(const Service& service, std::optional<std::filesystem::path> static_dir)
    : impl_(std::make_unique<Impl>()) {
  auto& srv = impl_->server;
  const Service* svc = &service;
  auto respond = [](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  // SO_REUSEADDR only: the default also sets SO_REUSEPORT, which would let a
  // second server share a busy port.
  srv.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof(yes));
  });
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  srv.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.Get("/api/info", [=](const httplib::Request&, httplib::Response& res) { respond(res, svc->info()); });
  srv.Get("/api/images", [=](const httplib::Request&, httplib::Response& res) { respond(res, svc->images()); });
  srv.Get(R"(/api/images/([^/]+))", [=](const httplib::Request& req, httplib::Response& res) {
    respond(res, svc->image(req.matches[1]));
  });
  srv.Post("/api/predict", [=](const httplib::Request& req, httplib::Response& res) {
    respond(res, svc->predict(req.body));
  });
  srv.Post("/api/explain", [=](const httplib::Request& req, httplib::Response& res) {
    respond(res, svc->explain(req.body));
  });
  if (static_dir) srv.set_mount_point("/", static_dir->string());
  srv.set_error_handler([=](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    const ApiError err(res.status, res.status == 404 ? "NOT_FOUND" : "HTTP_ERROR",
                       "no route for " + req.method + " " + req.path);
    res.set_content(err.to_json().dump(), "application/json");
  });
}

HttpServer::~HttpServer() { stop(); }

bool HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host);
    return port_ > 0;
  }
  if (!impl_->server.bind_to_port(host, port)) return false;
  port_ = port;
  return true;
}

bool HttpServer::listen() { return impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace segcam
