#pragma once

// Inference: reenactment, explicit motion-attribute editing, canonical faces
// and expression interpolation through the VAE latent space. Images enter
// and leave as [3, S, S] tensors in [0, 1]. An Animator is immutable after
// construction and safe to share between threads.

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mmfa/expr_vae.hpp"
#include "mmfa/face_model.hpp"
#include "mmfa/model.hpp"
#include "mmfa/nets.hpp"

namespace mmfa::animator {

enum class IdentityMode { kSame, kCross };
enum class PoseTransfer { kAbsolute, kRelative };
enum class ExpressionSource { kSource, kDriving, kVaeLatent, kNeutral };

IdentityMode parse_identity_mode(const std::string& name);
PoseTransfer parse_pose_transfer(const std::string& name);
ExpressionSource parse_expression_source(const std::string& name);
std::string to_string(ExpressionSource source);

struct EditRequest {
  torch::Tensor source;
  std::optional<torch::Tensor> driving;
  // Pose ground truth for the pose provider, when known.
  std::optional<face::FrameMeta> source_meta;
  std::optional<face::FrameMeta> driving_meta;

  std::optional<double> yaw;
  std::optional<double> pitch;
  std::optional<double> roll;
  std::optional<double> scale;
  std::optional<std::array<double, 2>> translation;
  // Defaults to kDriving with a driving image, kNeutral otherwise.
  std::optional<ExpressionSource> expression;
  std::optional<std::vector<double>> latent;  // z for kVaeLatent
  std::optional<double> alpha;                // or interpolate z_S -> z_D

  // The all-neutral request on `source`.
  static EditRequest neutral(const torch::Tensor& source);

  // Throws InvalidArgument on inconsistent fields.
  void validate() const;
};

struct EditResult {
  torch::Tensor image;      // [3, S, S] in [0, 1]
  torch::Tensor keypoints;  // [K, 2], projected driving keypoints
  torch::Tensor keypoints3d;  // [K, 3]
  torch::Tensor canonical;  // [K, 3], p_C of the source
};

struct ReenactOptions {
  IdentityMode identity = IdentityMode::kSame;
  PoseTransfer pose = PoseTransfer::kAbsolute;
  std::optional<torch::Tensor> reference;  // first driving frame, for relative transfer
  std::optional<face::FrameMeta> source_meta;
  std::optional<face::FrameMeta> driving_meta;
  std::optional<face::FrameMeta> reference_meta;
};

struct ModelInfo {
  int64_t num_keypoints = 0;
  int64_t resolution = 0;
  std::string checkpoint_hash;
  bool vae_loaded = false;
};

// Per-alpha deformations and decoded features of an interpolation sweep.
struct InterpolationTrace {
  std::vector<double> alphas;
  std::vector<torch::Tensor> deformations;  // [K, 3] each
  std::vector<torch::Tensor> features;      // [E] each
  torch::Tensor decoded_source;             // decode(z_S)
  torch::Tensor decoded_driving;            // decode(z_D)
};

class Animator {
 public:
  Animator(model::AnimationModel model, std::optional<vae::ExpressionVae> vae,
           std::shared_ptr<nets::PoseProvider> pose_provider, std::string checkpoint_hash = {});

  // Loads the main model and, when present, the VAE section. `vae_path`
  // overrides where the VAE is read from.
  static std::shared_ptr<const Animator> from_checkpoint(const std::filesystem::path& path,
                                                         const std::optional<std::filesystem::path>& vae_path = {},
                                                         const std::string& pose_provider = "auto");

  torch::Tensor reenact(const torch::Tensor& source, const torch::Tensor& driving,
                        const ReenactOptions& options = {}) const;
  EditResult edit(const EditRequest& request) const;
  EditResult canonical_face(const torch::Tensor& source) const;
  // Throws InvalidArgument without a VAE or for alpha outside [0, 1].
  EditResult interpolate(const torch::Tensor& source, const torch::Tensor& driving, double alpha,
                         const std::optional<face::FrameMeta>& source_meta = {},
                         const std::optional<face::FrameMeta>& driving_meta = {}) const;
  InterpolationTrace interpolation_trace(const torch::Tensor& source, const torch::Tensor& driving,
                                         const std::vector<double>& alphas,
                                         const std::optional<face::FrameMeta>& source_meta = {},
                                         const std::optional<face::FrameMeta>& driving_meta = {}) const;

  ModelInfo info() const;
  bool has_vae() const { return vae_.has_value(); }
  const nets::NetConfig& config() const { return model_->config(); }

 private:
  struct Frame {
    model::FrameAnalysis analysis;
    torch::Tensor images;  // internal [1, 3, S, S]
  };
  Frame analyze(const torch::Tensor& image, const std::optional<face::FrameMeta>& meta) const;
  torch::Tensor render(const Frame& source, const geometry::KeypointSet& source_kp,
                       const geometry::KeypointSet& driving_kp, const torch::Tensor& driving_rotation) const;
  geometry::KeypointSet source_keypoints(const Frame& source) const;
  vae::GaussianParams encode(const Frame& frame) const;

  mutable model::AnimationModel model_;
  mutable std::optional<vae::ExpressionVae> vae_;
  std::shared_ptr<nets::PoseProvider> pose_provider_;
  std::string checkpoint_hash_;
};

}  // namespace mmfa::animator
