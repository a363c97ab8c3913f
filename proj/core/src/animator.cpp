#include "mmfa/animator.hpp"

#include <cmath>

#include "mmfa/checkpoint.hpp"
#include "mmfa/error.hpp"
#include "mmfa/image_io.hpp"

namespace mmfa::animator {

IdentityMode parse_identity_mode(const std::string& name) {
  if (name == "same_identity" || name == "same") return IdentityMode::kSame;
  if (name == "cross_identity" || name == "cross") return IdentityMode::kCross;
  throw InvalidArgument("identity mode must be 'same_identity' or 'cross_identity', got '" + name + "'");
}

PoseTransfer parse_pose_transfer(const std::string& name) {
  if (name == "absolute") return PoseTransfer::kAbsolute;
  if (name == "relative") return PoseTransfer::kRelative;
  throw InvalidArgument("pose transfer must be 'absolute' or 'relative', got '" + name + "'");
}

ExpressionSource parse_expression_source(const std::string& name) {
  if (name == "source") return ExpressionSource::kSource;
  if (name == "driving") return ExpressionSource::kDriving;
  if (name == "vae_latent") return ExpressionSource::kVaeLatent;
  if (name == "neutral") return ExpressionSource::kNeutral;
  throw InvalidArgument("expression source must be one of source, driving, vae_latent, neutral; got '" + name + "'");
}

std::string to_string(ExpressionSource source) {
  switch (source) {
    case ExpressionSource::kSource: return "source";
    case ExpressionSource::kDriving: return "driving";
    case ExpressionSource::kVaeLatent: return "vae_latent";
    case ExpressionSource::kNeutral: return "neutral";
  }
  return "neutral";
}

EditRequest EditRequest::neutral(const torch::Tensor& source) {
  EditRequest r;
  r.source = source;
  r.yaw = 0.0;
  r.pitch = 0.0;
  r.roll = 0.0;
  r.scale = 1.0;
  r.translation = std::array<double, 2>{0.0, 0.0};
  r.expression = ExpressionSource::kNeutral;
  return r;
}

void EditRequest::validate() const {
  if (!source.defined()) throw InvalidArgument("edit request needs a source image");
  if (scale && !(*scale > 0.0 && std::isfinite(*scale))) throw InvalidArgument("scale override must be positive");
  for (const auto& angle : {yaw, pitch, roll}) {
    if (angle && !std::isfinite(*angle)) throw InvalidArgument("angle overrides must be finite");
  }
  if (translation && !(std::isfinite((*translation)[0]) && std::isfinite((*translation)[1]))) {
    throw InvalidArgument("translation override must be finite");
  }
  const auto expr = expression.value_or(driving ? ExpressionSource::kDriving : ExpressionSource::kNeutral);
  if (expr == ExpressionSource::kDriving && !driving) {
    throw InvalidArgument("expression source 'driving' requires a driving image");
  }
  if (expr == ExpressionSource::kVaeLatent) {
    if (!latent && !(alpha && driving)) {
      throw InvalidArgument("expression source 'vae_latent' requires a latent z or a driving image with alpha");
    }
  }
  if (alpha && !(*alpha >= 0.0 && *alpha <= 1.0)) throw InvalidArgument("alpha must lie in [0, 1]");
  if (alpha && !latent && !driving) throw InvalidArgument("interpolation requires a driving image");
}

Animator::Animator(model::AnimationModel model, std::optional<vae::ExpressionVae> vae,
                   std::shared_ptr<nets::PoseProvider> pose_provider, std::string checkpoint_hash)
    : model_(std::move(model)),
      vae_(std::move(vae)),
      pose_provider_(std::move(pose_provider)),
      checkpoint_hash_(std::move(checkpoint_hash)) {
  model_->eval();
  if (vae_) (*vae_)->eval();
}

std::shared_ptr<const Animator> Animator::from_checkpoint(const std::filesystem::path& path,
                                                          const std::optional<std::filesystem::path>& vae_path,
                                                          const std::string& pose_provider) {
  auto container = checkpoint::Container::read(path);
  const auto& cfg_bytes = container.get("config");
  auto config = pipeline::RunConfig::from_json(std::string(cfg_bytes.begin(), cfg_bytes.end()));
  model::AnimationModel model(config.net);
  checkpoint::decode_module(container.get("model"), *model);
  std::optional<vae::ExpressionVae> vae;
  const auto& vae_source = vae_path ? *vae_path : path;
  const auto vae_container = vae_path ? checkpoint::Container::read(*vae_path) : container;
  if (vae_container.has("vae")) {
    vae::ExpressionVae v(config.vae);
    checkpoint::decode_module(vae_container.get("vae"), *v);
    vae = v;
  } else if (vae_path) {
    throw CheckpointError("'" + vae_source.string() + "' holds no VAE weights");
  }
  return std::make_shared<const Animator>(std::move(model), std::move(vae), nets::make_pose_provider(pose_provider),
                                          io::sha256_file(path));
}

Animator::Frame Animator::analyze(const torch::Tensor& image, const std::optional<face::FrameMeta>& meta) const {
  auto images = image.dim() == 3 ? io::to_internal(image) : image * 2.0 - 1.0;
  nets::check_images(images, model_->config());
  auto rotation = pose_provider_->rotations(images, face::MetaList{meta});
  return {model_->analyze(images, rotation), images};
}

geometry::KeypointSet Animator::source_keypoints(const Frame& s) const {
  auto delta = model_->deformation(s.analysis.expression, s.analysis.canonical);
  return geometry::compose_keypoints(s.analysis.canonical, model::motion_params(s.analysis, delta));
}

torch::Tensor Animator::render(const Frame& source, const geometry::KeypointSet& source_kp,
                               const geometry::KeypointSet& driving_kp, const torch::Tensor& driving_rotation) const {
  auto synthesis = model_->synthesize(source.images, source_kp, driving_kp, source.analysis.rotation, driving_rotation);
  return io::to_external(synthesis.output.full());
}

torch::Tensor Animator::reenact(const torch::Tensor& source, const torch::Tensor& driving,
                                const ReenactOptions& options) const {
  torch::NoGradGuard no_grad;
  auto s = analyze(source, options.source_meta);
  auto d = analyze(driving, options.driving_meta);
  if (s.images.sizes() != d.images.sizes()) throw ShapeError("source and driving images differ in size");
  const auto& a_s = s.analysis;
  const auto& a_d = d.analysis;

  auto rotation = a_d.rotation;
  auto translation = a_d.affine.translation;
  auto scale = options.identity == IdentityMode::kCross ? a_s.affine.scale : a_d.affine.scale;
  if (options.pose == PoseTransfer::kRelative) {
    if (!options.reference) throw InvalidArgument("relative pose transfer needs a reference driving frame");
    auto r = analyze(*options.reference, options.reference_meta);
    rotation = torch::matmul(torch::matmul(a_d.rotation, r.analysis.rotation.transpose(1, 2)), a_s.rotation);
    translation = a_s.affine.translation + (a_d.affine.translation - r.analysis.affine.translation);
    scale = a_s.affine.scale * (a_d.affine.scale / r.analysis.affine.scale);
  }
  auto delta = model_->deformation(a_d.expression, a_s.canonical);
  auto kp_d = geometry::compose_keypoints(a_s.canonical, {rotation, translation, scale, delta});
  return render(s, source_keypoints(s), kp_d, rotation);
}

vae::GaussianParams Animator::encode(const Frame& frame) const {
  return vae::encode_latent(*vae_, frame.analysis.expression);
}

EditResult Animator::edit(const EditRequest& request) const {
  request.validate();
  torch::NoGradGuard no_grad;
  auto s = analyze(request.source, request.source_meta);
  std::optional<Frame> d;
  if (request.driving) {
    d = analyze(*request.driving, request.driving_meta);
    if (s.images.sizes() != d->images.sizes()) throw ShapeError("source and driving images differ in size");
  }
  const auto& a_s = s.analysis;
  const auto opts = a_s.canonical.points.options();

  // Unspecified fields follow the driving estimate, else neutral.
  torch::Tensor yaw, pitch, roll;
  if (d) {
    auto angles = geometry::euler_from_rotation(d->analysis.rotation);
    yaw = angles[0];
    pitch = angles[1];
    roll = angles[2];
  } else {
    yaw = pitch = roll = torch::zeros({1}, opts);
  }
  if (request.yaw) yaw = torch::full({1}, *request.yaw, opts);
  if (request.pitch) pitch = torch::full({1}, *request.pitch, opts);
  if (request.roll) roll = torch::full({1}, *request.roll, opts);
  torch::Tensor rotation;
  if (d && !request.yaw && !request.pitch && !request.roll) {
    rotation = d->analysis.rotation;
  } else if (!d && !request.yaw && !request.pitch && !request.roll) {
    rotation = torch::eye(3, opts).unsqueeze(0);
  } else {
    rotation = geometry::rotation_from_euler(yaw, pitch, roll);
  }

  auto scale = request.scale ? torch::full({1}, *request.scale, opts)
                             : (d ? d->analysis.affine.scale : torch::ones({1}, opts));
  auto translation = request.translation
                         ? torch::tensor({(*request.translation)[0], (*request.translation)[1]}, opts).view({1, 2})
                         : (d ? d->analysis.affine.translation : torch::zeros({1, 2}, opts));

  const auto expr = request.expression.value_or(d ? ExpressionSource::kDriving : ExpressionSource::kNeutral);
  torch::Tensor delta;
  switch (expr) {
    case ExpressionSource::kNeutral: delta = torch::zeros_like(a_s.canonical.points); break;
    case ExpressionSource::kSource: delta = model_->deformation(a_s.expression, a_s.canonical); break;
    case ExpressionSource::kDriving: delta = model_->deformation(d->analysis.expression, a_s.canonical); break;
    case ExpressionSource::kVaeLatent: {
      if (!vae_) throw InvalidArgument("expression source 'vae_latent' requires a loaded VAE");
      vae::LatentCode z;
      if (request.latent) {
        const auto dz = (*vae_)->config().latent_dim;
        if (static_cast<int64_t>(request.latent->size()) != dz) {
          throw InvalidArgument("latent z must have " + std::to_string(dz) + " entries");
        }
        z.z = torch::tensor(*request.latent, torch::kFloat64).to(opts).view({1, dz});
      } else {
        z = vae::interpolate({encode(s).mu}, {encode(*d).mu}, *request.alpha);
      }
      delta = model_->deformation(vae::decode_latent(*vae_, z), a_s.canonical);
      break;
    }
  }
  auto kp_d = geometry::compose_keypoints(a_s.canonical, {rotation, translation, scale, delta});
  EditResult out;
  out.image = render(s, source_keypoints(s), kp_d, rotation);
  out.keypoints3d = kp_d.points.squeeze(0);
  out.keypoints = geometry::project_orthographic(kp_d).squeeze(0);
  out.canonical = a_s.canonical.points.squeeze(0);
  return out;
}

EditResult Animator::canonical_face(const torch::Tensor& source) const { return edit(EditRequest::neutral(source)); }

EditResult Animator::interpolate(const torch::Tensor& source, const torch::Tensor& driving, double alpha,
                                 const std::optional<face::FrameMeta>& source_meta,
                                 const std::optional<face::FrameMeta>& driving_meta) const {
  if (!vae_) throw InvalidArgument("expression interpolation requires a VAE checkpoint");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must lie in [0, 1]");
  EditRequest r;
  r.source = source;
  r.driving = driving;
  r.source_meta = source_meta;
  r.driving_meta = driving_meta;
  r.expression = ExpressionSource::kVaeLatent;
  r.alpha = alpha;
  return edit(r);
}

InterpolationTrace Animator::interpolation_trace(const torch::Tensor& source, const torch::Tensor& driving,
                                                 const std::vector<double>& alphas,
                                                 const std::optional<face::FrameMeta>& source_meta,
                                                 const std::optional<face::FrameMeta>& driving_meta) const {
  if (!vae_) throw InvalidArgument("expression interpolation requires a VAE checkpoint");
  torch::NoGradGuard no_grad;
  auto s = analyze(source, source_meta);
  auto d = analyze(driving, driving_meta);
  const vae::LatentCode z_s{encode(s).mu};
  const vae::LatentCode z_d{encode(d).mu};
  InterpolationTrace trace;
  trace.alphas = alphas;
  trace.decoded_source = vae::decode_latent(*vae_, z_s).values.squeeze(0);
  trace.decoded_driving = vae::decode_latent(*vae_, z_d).values.squeeze(0);
  for (double a : alphas) {
    auto f = vae::decode_latent(*vae_, vae::interpolate(z_s, z_d, a));
    trace.features.push_back(f.values.squeeze(0));
    trace.deformations.push_back(model_->deformation(f, s.analysis.canonical).squeeze(0));
  }
  return trace;
}

ModelInfo Animator::info() const {
  return {model_->config().num_keypoints, model_->config().image_size, checkpoint_hash_, vae_.has_value()};
}

}  // namespace mmfa::animator
