#include "mmfa/service.hpp"

#include <httplib.h>

#include <nlohmann/json.hpp>
#include <thread>

#include "mmfa/error.hpp"
#include "mmfa/image_io.hpp"
#include "mmfa/log.hpp"

namespace mmfa::service {

using nlohmann::json;

namespace {

// Request-level failure mapped to an HTTP status.
struct HttpError {
  int status;
  std::string code;
  std::string message;
};

Response error_response(int status, const std::string& code, const std::string& message) {
  return {status, json{{"code", code}, {"message", message}}.dump()};
}

Response ok(const json& body) { return {200, body.dump()}; }

torch::Tensor image_field(const json& req, const char* key) {
  if (!req.contains(key)) throw HttpError{400, "missing_field", std::string("missing field '") + key + "'"};
  if (!req[key].is_string()) throw HttpError{400, "bad_field", std::string("field '") + key + "' must be a string"};
  try {
    return io::decode_png(io::base64_decode(req[key].get<std::string>()));
  } catch (const Error& e) {
    throw HttpError{400, "bad_image", std::string("field '") + key + "': " + e.what()};
  }
}

std::optional<torch::Tensor> optional_image(const json& req, const char* key) {
  if (!req.contains(key) || req[key].is_null()) return std::nullopt;
  return image_field(req, key);
}

std::optional<double> optional_number(const json& req, const char* key) {
  if (!req.contains(key) || req[key].is_null()) return std::nullopt;
  if (!req[key].is_number()) throw HttpError{400, "bad_field", std::string("field '") + key + "' must be a number"};
  return req[key].get<double>();
}

std::optional<std::string> optional_string(const json& req, const char* key) {
  if (!req.contains(key) || req[key].is_null()) return std::nullopt;
  if (!req[key].is_string()) throw HttpError{400, "bad_field", std::string("field '") + key + "' must be a string"};
  return req[key].get<std::string>();
}

std::optional<face::FrameMeta> optional_pose(const json& req, const char* key) {
  if (!req.contains(key) || req[key].is_null()) return std::nullopt;
  const auto& p = req[key];
  if (!p.is_object()) throw HttpError{400, "bad_field", std::string("field '") + key + "' must be an object"};
  face::FrameMeta m;
  m.yaw = optional_number(p, "yaw").value_or(0.0);
  m.pitch = optional_number(p, "pitch").value_or(0.0);
  m.roll = optional_number(p, "roll").value_or(0.0);
  return m;
}

json keypoints_json(const torch::Tensor& kp) {
  auto k = kp.to(torch::kFloat64).contiguous();
  auto acc = k.accessor<double, 2>();
  json out = json::array();
  for (int64_t i = 0; i < k.size(0); ++i) out.push_back({acc[i][0], acc[i][1]});
  return out;
}

std::string image_json(const torch::Tensor& image) { return io::base64_encode(io::encode_png(image)); }

json parse_body(const std::string& body) {
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception& e) {
    throw HttpError{400, "malformed_json", std::string("request body is not valid JSON: ") + e.what()};
  }
  if (!req.is_object()) throw HttpError{400, "malformed_json", "request body must be a JSON object"};
  return req;
}

animator::EditRequest edit_request(const json& req) {
  animator::EditRequest r;
  r.source = image_field(req, "source");
  r.driving = optional_image(req, "driving");
  r.source_meta = optional_pose(req, "source_pose");
  r.driving_meta = optional_pose(req, "driving_pose");
  r.yaw = optional_number(req, "yaw");
  r.pitch = optional_number(req, "pitch");
  r.roll = optional_number(req, "roll");
  r.scale = optional_number(req, "scale");
  if (req.contains("translation") && !req["translation"].is_null()) {
    const auto& t = req["translation"];
    if (!t.is_array() || t.size() != 2 || !t[0].is_number() || !t[1].is_number()) {
      throw HttpError{400, "bad_field", "field 'translation' must be a 2-element number array"};
    }
    r.translation = std::array<double, 2>{t[0].get<double>(), t[1].get<double>()};
  }
  if (auto e = optional_string(req, "expression")) {
    try {
      r.expression = animator::parse_expression_source(*e);
    } catch (const InvalidArgument& err) {
      throw HttpError{400, "bad_field", err.what()};
    }
  }
  if (req.contains("latent") && !req["latent"].is_null()) {
    try {
      r.latent = req["latent"].get<std::vector<double>>();
    } catch (const json::exception&) {
      throw HttpError{400, "bad_field", "field 'latent' must be a number array"};
    }
  }
  r.alpha = optional_number(req, "alpha");
  return r;
}

}  // namespace

struct Service::Server {
  httplib::Server http;
  std::thread thread;
};

Service::Service(std::shared_ptr<const animator::Animator> animator, Loader loader)
    : animator_(std::move(animator)), loader_(std::move(loader)) {}

Service::~Service() { stop(); }

void Service::swap(std::shared_ptr<const animator::Animator> animator) {
  std::lock_guard lock(mutex_);
  animator_ = std::move(animator);
}

std::shared_ptr<const animator::Animator> Service::current() const {
  std::lock_guard lock(mutex_);
  return animator_;
}

Response Service::reload() const {
  if (!loader_) return error_response(409, "reload_unavailable", "service was started without a checkpoint path");
  auto fresh = loader_();
  const_cast<Service*>(this)->swap(fresh);
  return ok({{"checkpoint_hash", fresh->info().checkpoint_hash}});
}

Response Service::handle(const std::string& method, const std::string& path, const std::string& body) const {
  auto model = current();
  try {
    if (path == "/model/info") {
      if (method != "GET") return error_response(405, "method_not_allowed", "use GET for /model/info");
      const auto info = model->info();
      return ok({{"K", info.num_keypoints},
                 {"resolution", info.resolution},
                 {"checkpoint_hash", info.checkpoint_hash},
                 {"vae_loaded", info.vae_loaded}});
    }
    if (path == "/model/reload") {
      if (method != "POST") return error_response(405, "method_not_allowed", "use POST for /model/reload");
      return reload();
    }
    if (path != "/animate" && path != "/edit" && path != "/interpolate") {
      return error_response(404, "not_found", "no endpoint " + path);
    }
    if (method != "POST") return error_response(405, "method_not_allowed", "use POST for " + path);
    const auto req = parse_body(body);

    if (path == "/animate") {
      auto source = image_field(req, "source");
      auto driving = image_field(req, "driving");
      animator::ReenactOptions options;
      try {
        if (auto m = optional_string(req, "mode")) options.identity = animator::parse_identity_mode(*m);
        if (auto p = optional_string(req, "pose")) options.pose = animator::parse_pose_transfer(*p);
      } catch (const InvalidArgument& e) {
        throw HttpError{400, "bad_field", e.what()};
      }
      options.reference = optional_image(req, "reference");
      options.source_meta = optional_pose(req, "source_pose");
      options.driving_meta = optional_pose(req, "driving_pose");
      options.reference_meta = optional_pose(req, "reference_pose");
      if (options.pose == animator::PoseTransfer::kRelative && !options.reference) {
        throw HttpError{400, "missing_field", "relative pose transfer needs a 'reference' image"};
      }
      return ok({{"image", image_json(model->reenact(source, driving, options))}});
    }
    if (path == "/edit") {
      auto request = edit_request(req);
      try {
        request.validate();
      } catch (const InvalidArgument& e) {
        throw HttpError{400, "invalid_request", e.what()};
      }
      if (request.expression == animator::ExpressionSource::kVaeLatent && !model->has_vae()) {
        throw HttpError{409, "vae_unavailable", "no VAE checkpoint is loaded"};
      }
      auto result = model->edit(request);
      return ok({{"image", image_json(result.image)}, {"keypoints", keypoints_json(result.keypoints)}});
    }
    // /interpolate
    auto source = image_field(req, "source");
    auto driving = image_field(req, "driving");
    auto alpha = optional_number(req, "alpha");
    if (!alpha) throw HttpError{400, "missing_field", "missing field 'alpha'"};
    if (!(*alpha >= 0.0 && *alpha <= 1.0)) throw HttpError{400, "bad_field", "alpha must lie in [0, 1]"};
    if (!model->has_vae()) throw HttpError{409, "vae_unavailable", "no VAE checkpoint is loaded"};
    auto result = model->interpolate(source, driving, *alpha, optional_pose(req, "source_pose"),
                                     optional_pose(req, "driving_pose"));
    return ok({{"image", image_json(result.image)}, {"keypoints", keypoints_json(result.keypoints)}});
  } catch (const HttpError& e) {
    return error_response(e.status, e.code, e.message);
  } catch (const ShapeError& e) {
    return error_response(400, "bad_shape", e.what());
  } catch (const InvalidArgument& e) {
    return error_response(400, "invalid_request", e.what());
  } catch (const std::exception& e) {
    log::error(std::string("inference failure on ") + path + ": " + e.what());
    return error_response(500, "inference_failed", e.what());
  }
}

namespace {

void install_routes(httplib::Server& http, const Service& service) {
  auto forward = [&service](const httplib::Request& req, httplib::Response& res) {
    auto out = service.handle(req.method, req.path, req.body);
    res.status = out.status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(out.body, "application/json");
  };
  http.Get(R"(/.*)", forward);
  http.Post(R"(/.*)", forward);
  http.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

}  // namespace

bool Service::listen(const std::string& host, int port) {
  server_ = std::make_unique<Server>();
  install_routes(server_->http, *this);
  log::info("serving on " + host + ":" + std::to_string(port));
  return server_->http.listen(host, port);
}

int Service::start_background(const std::string& host) {
  server_ = std::make_unique<Server>();
  install_routes(server_->http, *this);
  const int port = server_->http.bind_to_any_port(host);
  if (port < 0) throw Error("cannot bind a port on " + host);
  server_->thread = std::thread([this] { server_->http.listen_after_bind(); });
  server_->http.wait_until_ready();
  return port;
}

void Service::stop() {
  if (!server_) return;
  server_->http.stop();
  if (server_->thread.joinable()) server_->thread.join();
  server_.reset();
}

}  // namespace mmfa::service
