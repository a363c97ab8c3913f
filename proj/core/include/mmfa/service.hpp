#pragma once

// JSON-over-HTTP front end for an Animator.
//
//   POST /animate      {source, driving[, mode, pose, reference]}     -> {image}
//   POST /edit         {source[, driving, yaw, pitch, roll, scale,
//                       translation, expression, latent, alpha]}      -> {image, keypoints}
//   POST /interpolate  {source, driving, alpha}                       -> {image, keypoints}
//   GET  /model/info                                                  -> {K, resolution, checkpoint_hash, vae_loaded}
//   POST /model/reload                                                -> {checkpoint_hash}
//
// Images are base64 PNG strings. Optional "source_pose" / "driving_pose"
// objects ({yaw, pitch, roll}) feed the pose provider. Errors are
// {"code", "message"} with 400 for malformed requests, 409 for /interpolate
// without a VAE and 500 for inference failures.

#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "mmfa/animator.hpp"

namespace mmfa::service {

struct Response {
  int status = 200;
  std::string body;
};

using Loader = std::function<std::shared_ptr<const animator::Animator>()>;

class Service {
 public:
  // `loader` backs /model/reload; may be empty.
  explicit Service(std::shared_ptr<const animator::Animator> animator, Loader loader = {});
  ~Service();

  // Dispatches one request; never throws.
  Response handle(const std::string& method, const std::string& path, const std::string& body) const;

  // Replaces the model between requests; in-flight requests keep the old one.
  void swap(std::shared_ptr<const animator::Animator> animator);
  std::shared_ptr<const animator::Animator> current() const;

  // Blocks serving on host:port until stop(). Returns false if binding fails.
  bool listen(const std::string& host, int port);
  // Binds to an ephemeral port and serves on a background thread; returns the port.
  int start_background(const std::string& host);
  void stop();

 private:
  struct Server;
  Response reload() const;

  mutable std::mutex mutex_;
  std::shared_ptr<const animator::Animator> animator_;
  Loader loader_;
  std::unique_ptr<Server> server_;
};

}  // namespace mmfa::service
