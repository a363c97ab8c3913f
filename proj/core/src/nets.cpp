#include "mmfa/nets.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "mmfa/error.hpp"

namespace mmfa::nets {

namespace nn = torch::nn;

namespace {

int64_t groups_for(int64_t channels) { return std::gcd<int64_t>(channels, 8); }

nn::Conv2d conv2d(int64_t in, int64_t out, int64_t kernel, int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2));
}

nn::Conv3d conv3d(int64_t in, int64_t out, int64_t kernel) {
  return nn::Conv3d(nn::Conv3dOptions(in, out, kernel).padding(kernel / 2));
}

nn::GroupNorm group_norm(int64_t channels) {
  return nn::GroupNorm(nn::GroupNormOptions(groups_for(channels), channels));
}

// Flattens stacks into one; Sequential cannot hold another Sequential.
nn::Sequential chain(std::initializer_list<nn::Sequential> parts) {
  nn::Sequential out;
  for (const auto& part : parts) {
    for (const auto& m : *part) out->push_back(m);
  }
  return out;
}

nn::Sequential conv_norm_relu(int64_t in, int64_t out) {
  return nn::Sequential(conv2d(in, out, 3), group_norm(out), nn::ReLU());
}

nn::Sequential down_block(int64_t in, int64_t out) {
  return nn::Sequential(conv2d(in, out, 3), group_norm(out), nn::ReLU(), nn::AvgPool2d(nn::AvgPool2dOptions(2)));
}

nn::Sequential up_block(int64_t in, int64_t out) {
  return nn::Sequential(
      nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)),
      conv2d(in, out, 3), group_norm(out), nn::ReLU());
}

class ResBlock2dImpl : public nn::Module {
 public:
  explicit ResBlock2dImpl(int64_t channels)
      : norm1_(register_module("norm1", group_norm(channels))),
        conv1_(register_module("conv1", conv2d(channels, channels, 3))),
        norm2_(register_module("norm2", group_norm(channels))),
        conv2_(register_module("conv2", conv2d(channels, channels, 3))) {}

  torch::Tensor forward(const torch::Tensor& x) {
    auto h = conv1_(torch::relu(norm1_(x)));
    h = conv2_(torch::relu(norm2_(h)));
    return x + h;
  }

 private:
  nn::GroupNorm norm1_;
  nn::Conv2d conv1_;
  nn::GroupNorm norm2_;
  nn::Conv2d conv2_;
};
TORCH_MODULE(ResBlock2d);

class ResBottleneckImpl : public nn::Module {
 public:
  ResBottleneckImpl(int64_t in, int64_t out, int64_t stride) {
    const int64_t mid = std::max<int64_t>(out / 4, 4);
    body_ = register_module("body", nn::Sequential(conv2d(in, mid, 1), group_norm(mid), nn::ReLU(),
                                                   conv2d(mid, mid, 3, stride), group_norm(mid), nn::ReLU(),
                                                   conv2d(mid, out, 1), group_norm(out)));
    if (in != out || stride != 1) {
      skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto shortcut = skip_ ? skip_(x) : x;
    return torch::relu(body_->forward(x) + shortcut);
  }

 private:
  nn::Sequential body_{nullptr};
  nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(ResBottleneck);

std::string shape_of(const torch::Tensor& t) {
  std::ostringstream os;
  os << t.sizes();
  return os.str();
}

int64_t log2_exact(int64_t v) {
  int64_t n = 0;
  while ((int64_t{1} << n) < v) ++n;
  return n;
}

}  // namespace

void NetConfig::validate() const {
  if (image_size != 64 && image_size != 128 && image_size != 256) {
    throw InvalidArgument("image_size must be one of 64, 128, 256");
  }
  if (num_keypoints < 1) throw InvalidArgument("num_keypoints must be positive");
  if (expr_dim < 1 || volume_channels < 1 || base_width < 8 || motion_channels < 1 || motion_hidden < 1) {
    throw InvalidArgument("network widths must be positive (base_width >= 8)");
  }
  if (volume_depth < 2 || volume_depth % 2 != 0) throw InvalidArgument("volume_depth must be even and >= 2");
  if (!(heatmap_sigma > 0.0) || !(keypoint_temperature > 0.0)) {
    throw InvalidArgument("heatmap_sigma and keypoint_temperature must be positive");
  }
}

torch::Tensor positive_scale(const torch::Tensor& pre_activation) {
  return torch::exp(std::log(2.0) * torch::tanh(pre_activation));
}

void check_images(const torch::Tensor& images, const NetConfig& config) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != config.image_size ||
      images.size(3) != config.image_size) {
    throw ShapeError("expected images [B, 3, " + std::to_string(config.image_size) + ", " +
                     std::to_string(config.image_size) + "], got " + shape_of(images));
  }
}

// ---------------------------------------------------------------------------

KeypointDetectorImpl::KeypointDetectorImpl(const NetConfig& config) : config_(config) {
  config_.validate();
  const auto w = config.base_width;
  encoder_ = register_module("encoder", chain({conv_norm_relu(3, w), down_block(w, 2 * w),
                                                              down_block(2 * w, 4 * w)}));
  lift_ = register_module("lift", nn::Conv2d(nn::Conv2dOptions(4 * w, lifted_channels_ * config.volume_depth, 1)));
  heatmap_ = register_module("heatmap", conv3d(lifted_channels_, config.num_keypoints, 3));
}

geometry::KeypointSet KeypointDetectorImpl::forward(const torch::Tensor& images) {
  check_images(images, config_);
  const auto b = images.size(0);
  const auto v = config_.volume_size();
  const auto d = config_.volume_depth;
  auto h = lift_(encoder_->forward(images)).view({b, lifted_channels_, d, v, v});
  auto logits = heatmap_(torch::relu(h)).view({b, config_.num_keypoints, -1});
  auto prob = torch::softmax(logits / config_.keypoint_temperature, -1);
  const std::array<int64_t, 3> sizes{d, v, v};
  auto grid = geometry::identity_grid(sizes, images.options()).view({-1, 3});
  return {torch::matmul(prob, grid)};
}

AffineEstimatorImpl::AffineEstimatorImpl(const NetConfig& config) : config_(config) {
  config_.validate();
  const auto w = config.base_width;
  features_ = register_module("features", chain({conv_norm_relu(3, w), down_block(w, 2 * w), down_block(2 * w, 4 * w),
                                                 down_block(4 * w, 4 * w),
                                                 nn::Sequential(nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions(1)),
                                                                nn::Flatten())}));
  nn::Linear out(64, 3);
  head_ = register_module("head", nn::Sequential(nn::Linear(4 * w, 64), nn::ReLU(), out));
  torch::NoGradGuard no_grad;
  out->weight.zero_();
  out->bias.zero_();
}

AffineOutput AffineEstimatorImpl::forward(const torch::Tensor& images) {
  check_images(images, config_);
  auto pre = head_->forward(features_->forward(images));
  return {positive_scale(pre.select(1, 0)), torch::tanh(pre.narrow(1, 1, 2))};
}

ExpressionEncoderImpl::ExpressionEncoderImpl(const NetConfig& config) : config_(config) {
  config_.validate();
  const auto w = config.base_width;
  nn::Sequential seq(conv2d(3, w, 3), nn::ReLU(), nn::MaxPool2d(nn::MaxPool2dOptions(2)));
  // After max pooling the map is image/2; halve until 4x4.
  const int64_t blocks = log2_exact(config.image_size / 8);
  int64_t channels = w;
  for (int64_t i = 0; i < blocks; ++i) {
    const int64_t out = (i + 1 == blocks) ? 16 : std::min<int64_t>(channels * 2, 4 * w);
    seq->push_back(ResBottleneck(channels, out, 2));
    channels = out;
  }
  seq->push_back(nn::Flatten());
  features_ = register_module("features", seq);
  project_ = register_module("project", nn::Linear(16 * 4 * 4, config.expr_dim));
}

ExpressionLatent ExpressionEncoderImpl::forward(const torch::Tensor& images) {
  check_images(images, config_);
  return {project_(features_->forward(images))};
}

ExpressionDecoderImpl::ExpressionDecoderImpl(const NetConfig& config) : config_(config) {
  config_.validate();
  const auto k3 = 3 * config.num_keypoints;
  const auto h = config.decoder_hidden;
  nn::Linear out(h, k3);
  body_ = register_module("body", nn::Sequential(nn::Linear(config.expr_dim + k3, h), nn::BatchNorm1d(h), nn::ReLU(),
                                                 nn::Linear(h, h), nn::BatchNorm1d(h), nn::ReLU(), out));
  torch::NoGradGuard no_grad;
  out->weight.mul_(0.1);
  out->bias.zero_();
}

torch::Tensor ExpressionDecoderImpl::forward(const ExpressionLatent& latent, const geometry::KeypointSet& canonical) {
  const auto& f = latent.values;
  const auto& pc = canonical.points;
  if (f.dim() != 2 || f.size(1) != config_.expr_dim) {
    throw ShapeError("expression latent must be [B, " + std::to_string(config_.expr_dim) + "], got " + shape_of(f));
  }
  if (pc.dim() != 3 || pc.size(1) != config_.num_keypoints || pc.size(2) != 3 || pc.size(0) != f.size(0)) {
    throw ShapeError("canonical keypoints must be [B, K, 3] matching the latent batch, got " + shape_of(pc));
  }
  auto out = body_->forward(torch::cat({f, pc.flatten(1)}, 1));
  return out.view({f.size(0), config_.num_keypoints, 3});
}

AppearanceEncoderImpl::AppearanceEncoderImpl(const NetConfig& config) : config_(config) {
  config_.validate();
  const auto w = config.base_width;
  body_ = register_module(
      "body", chain({conv_norm_relu(3, w), down_block(w, 2 * w), down_block(2 * w, 4 * w),
                    nn::Sequential(nn::Conv2d(
                        nn::Conv2dOptions(4 * w, config.volume_channels * config.volume_depth, 1)))}));
}

torch::Tensor AppearanceEncoderImpl::forward(const torch::Tensor& images) {
  check_images(images, config_);
  const auto v = config_.volume_size();
  return body_->forward(images).view({images.size(0), config_.volume_channels, config_.volume_depth, v, v});
}

// ---------------------------------------------------------------------------

torch::Tensor keypoint_heatmaps(const torch::Tensor& grid, const torch::Tensor& keypoints, double sigma) {
  auto spatial = grid.sizes().vec();
  spatial.pop_back();
  auto g = grid.reshape({1, 1, -1, grid.size(-1)});
  auto d2 = (g - keypoints.unsqueeze(2)).pow(2).sum(-1);
  std::vector<int64_t> out{keypoints.size(0), keypoints.size(1)};
  out.insert(out.end(), spatial.begin(), spatial.end());
  return torch::exp(-d2 / (2.0 * sigma * sigma)).view(out);
}

DenseMotionNetImpl::DenseMotionNetImpl(const NetConfig& config) : config_(config) {
  config_.validate();
  const auto c = config.motion_channels;
  const auto hid = config.motion_hidden;
  const auto in = (config.num_keypoints + 1) * (c + 1);
  compress_ = register_module("compress", nn::Conv3d(nn::Conv3dOptions(config.volume_channels, c, 1)));
  hourglass_ = register_module(
      "hourglass",
      nn::Sequential(nn::AvgPool3d(nn::AvgPool3dOptions(2)), conv3d(in, hid, 3), group_norm(hid), nn::ReLU(),
                     conv3d(hid, hid, 3), group_norm(hid), nn::ReLU(),
                     nn::Upsample(nn::UpsampleOptions()
                                      .scale_factor(std::vector<double>{2.0, 2.0, 2.0})
                                      .mode(torch::kTrilinear)
                                      .align_corners(false))));
  mask_head_ = register_module("mask_head", nn::Conv3d(nn::Conv3dOptions(hid + in, config.num_keypoints + 1, 1)));
  occlusion_head_ = register_module("occlusion_head", conv2d(hid * config.volume_depth, 1, 3));
}

MotionInputs DenseMotionNetImpl::assemble(const torch::Tensor& volume, const geometry::KeypointSet& source,
                                          const geometry::KeypointSet& driving, const torch::Tensor& jacobian) {
  const auto k = config_.num_keypoints;
  if (source.points.dim() != 3 || source.count() != k || driving.points.sizes() != source.points.sizes()) {
    throw ShapeError("dense motion expects source and driving keypoints [B, " + std::to_string(k) + ", 3]");
  }
  const auto v = config_.volume_size();
  const auto d = config_.volume_depth;
  if (volume.dim() != 5 || volume.size(1) != config_.volume_channels || volume.size(2) != d || volume.size(3) != v ||
      volume.size(4) != v || volume.size(0) != source.batch()) {
    throw ShapeError("feature volume does not match the configuration, got " + shape_of(volume));
  }
  const auto b = volume.size(0);
  const std::array<int64_t, 3> sizes{d, v, v};
  auto grid = geometry::identity_grid(sizes, volume.options());
  auto sparse = geometry::sparse_motion(grid, source.points, driving.points, jacobian);
  auto identity = grid.unsqueeze(0).unsqueeze(0).expand({b, 1, d, v, v, 3});
  auto candidates = torch::cat({identity, sparse}, 1);

  auto compressed = compress_(volume);
  const auto c = compressed.size(1);
  auto repeated = compressed.unsqueeze(1).expand({b, k + 1, c, d, v, v}).reshape({b * (k + 1), c, d, v, v});
  auto deformed = geometry::warp(repeated, candidates.reshape({b * (k + 1), d, v, v, 3})).view({b, k + 1, c, d, v, v});

  auto heat = keypoint_heatmaps(grid, driving.points, config_.heatmap_sigma) -
              keypoint_heatmaps(grid, source.points, config_.heatmap_sigma);
  auto heatmaps = torch::cat({torch::zeros({b, 1, d, v, v}, heat.options()), heat}, 1);
  return {candidates, heatmaps, deformed};
}

MotionPrediction DenseMotionNetImpl::forward(const torch::Tensor& volume, const geometry::KeypointSet& source,
                                             const geometry::KeypointSet& driving, const torch::Tensor& jacobian) {
  auto inputs = assemble(volume, source, driving, jacobian);
  const auto b = volume.size(0);
  const auto v = config_.volume_size();
  auto in = torch::cat({inputs.heatmaps.unsqueeze(2), inputs.deformed}, 2).flatten(1, 2);
  auto hidden = hourglass_->forward(in);
  auto masks = torch::softmax(mask_head_(torch::cat({hidden, in}, 1)), 1);
  auto occlusion = torch::sigmoid(occlusion_head_(hidden.reshape({b, -1, v, v})));
  return {std::move(inputs), masks, occlusion};
}

// ---------------------------------------------------------------------------

GeneratorImpl::GeneratorImpl(const NetConfig& config) : config_(config) {
  config_.validate();
  const auto w = config.base_width;
  const std::vector<int64_t> channels{2 * w, w, std::max<int64_t>(w / 2, 8)};
  stem_ = register_module("stem", conv_norm_relu(config.volume_channels * config.volume_depth, channels[0]));
  for (size_t i = 0; i < channels.size(); ++i) {
    const auto tag = std::to_string(i);
    blocks_.push_back(register_module("block" + tag, nn::Sequential(ResBlock2d(channels[i]))));
    to_image_.push_back(register_module("to_image" + tag, nn::Sequential(conv2d(channels[i], 3, 3), nn::Tanh())));
    if (i + 1 < channels.size()) {
      upsample_.push_back(register_module("up" + tag, up_block(channels[i] + 3, channels[i + 1])));
    }
  }
}

GeneratorOutput GeneratorImpl::forward(const torch::Tensor& warped_volume) {
  const auto v = config_.volume_size();
  if (warped_volume.dim() != 5 || warped_volume.size(1) != config_.volume_channels ||
      warped_volume.size(2) != config_.volume_depth || warped_volume.size(3) != v || warped_volume.size(4) != v) {
    throw ShapeError("generator input does not match the configured volume, got " + shape_of(warped_volume));
  }
  auto x = stem_->forward(warped_volume.flatten(1, 2));
  GeneratorOutput out;
  for (size_t i = 0; i < blocks_.size(); ++i) {
    x = blocks_[i]->forward(x);
    auto image = to_image_[i]->forward(x);
    out.images.push_back(image);
    if (i < upsample_.size()) x = upsample_[i]->forward(torch::cat({x, image}, 1));
  }
  return out;
}

DiscriminatorImpl::DiscriminatorImpl(const NetConfig& config) : config_(config) {
  config_.validate();
  const auto w = config.base_width;
  auto lrelu = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); };
  auto down = [](int64_t in, int64_t out) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1));
  };
  blocks_.push_back(register_module("block0", nn::Sequential(down(3, w), lrelu())));
  blocks_.push_back(register_module("block1", nn::Sequential(down(w, 2 * w), group_norm(2 * w), lrelu())));
  blocks_.push_back(register_module("block2", nn::Sequential(down(2 * w, 4 * w), group_norm(4 * w), lrelu())));
  logits_ = register_module("logits", conv2d(4 * w, 1, 3));
}

DiscriminatorOutput DiscriminatorImpl::forward(const torch::Tensor& images) {
  check_images(images, config_);
  DiscriminatorOutput out;
  auto x = images;
  for (auto& block : blocks_) {
    x = block->forward(x);
    out.features.push_back(x);
  }
  out.logits = logits_(x);
  return out;
}

// ---------------------------------------------------------------------------

torch::Tensor OraclePoseProvider::rotations(const torch::Tensor& images, const face::MetaList& meta) const {
  if (static_cast<int64_t>(meta.size()) != images.size(0)) {
    throw ProviderError("oracle pose provider needs metadata for every frame");
  }
  std::vector<torch::Tensor> rs;
  for (const auto& m : meta) {
    if (!m) throw ProviderError("oracle pose provider: frame has no pose metadata");
    rs.push_back(geometry::rotation_from_euler(m->yaw, m->pitch, m->roll));
  }
  return torch::stack(rs).to(images.options());
}

torch::Tensor FixedPoseProvider::rotations(const torch::Tensor& images, const face::MetaList&) const {
  return torch::eye(3, images.options()).unsqueeze(0).repeat({images.size(0), 1, 1});
}

torch::Tensor MetadataOrFixedPoseProvider::rotations(const torch::Tensor& images, const face::MetaList& meta) const {
  const bool complete = static_cast<int64_t>(meta.size()) == images.size(0) &&
                        std::all_of(meta.begin(), meta.end(), [](const auto& m) { return m.has_value(); });
  if (complete) return OraclePoseProvider{}.rotations(images, meta);
  return FixedPoseProvider{}.rotations(images, meta);
}

std::shared_ptr<PoseProvider> make_pose_provider(const std::string& name) {
  if (name == "oracle") return std::make_shared<OraclePoseProvider>();
  if (name == "fixed") return std::make_shared<FixedPoseProvider>();
  if (name == "auto") return std::make_shared<MetadataOrFixedPoseProvider>();
  throw ProviderError("unknown pose provider '" + name + "'");
}

torch::Tensor OracleLandmarkProvider::detect(const torch::Tensor& images, const face::MetaList& meta) const {
  if (static_cast<int64_t>(meta.size()) != images.size(0)) {
    throw ProviderError("oracle landmark provider needs metadata for every frame");
  }
  auto out = torch::empty({images.size(0), face::kLandmarkCount, 2}, torch::kFloat64);
  auto acc = out.accessor<double, 3>();
  for (size_t i = 0; i < meta.size(); ++i) {
    if (!meta[i] || static_cast<int64_t>(meta[i]->landmarks.size()) != face::kLandmarkCount) {
      throw ProviderError("oracle landmark provider: frame has no landmark metadata");
    }
    for (int64_t j = 0; j < face::kLandmarkCount; ++j) {
      acc[static_cast<int64_t>(i)][j][0] = meta[i]->landmarks[static_cast<size_t>(j)][0];
      acc[static_cast<int64_t>(i)][j][1] = meta[i]->landmarks[static_cast<size_t>(j)][1];
    }
  }
  return out.to(images.options());
}

torch::Tensor MomentLandmarkProvider::region_weights(const torch::Tensor& images) const {
  auto protos = torch::empty({static_cast<int64_t>(face::kPrototypes.size()), 3}, torch::kFloat64);
  for (size_t i = 0; i < face::kPrototypes.size(); ++i) {
    for (size_t c = 0; c < 3; ++c) protos[static_cast<int64_t>(i)][static_cast<int64_t>(c)] = face::kPrototypes[i][c];
  }
  protos = protos.to(images.options());
  auto x = (images + 1.0) * 0.5;
  // [B, P, H, W]
  auto d2 = (x.unsqueeze(1) - protos.view({1, -1, 3, 1, 1})).pow(2).sum(2);
  return torch::softmax(-d2 / temperature_, 1);
}

torch::Tensor MomentLandmarkProvider::detect(const torch::Tensor& images, const face::MetaList&) const {
  if (images.dim() != 4 || images.size(1) != 3) throw ShapeError("landmark detection expects [B, 3, H, W]");
  auto weights = region_weights(images).flatten(2);  // [B, P, HW]
  const std::array<int64_t, 2> hw{images.size(2), images.size(3)};
  auto coords = geometry::identity_grid(hw, images.options()).view({-1, 2});  // [HW, 2]

  struct Moments {
    torch::Tensor center;      // [B, 2]
    torch::Tensor covariance;  // [B, 2, 2]
  };
  auto moments = [&](const torch::Tensor& w) {
    auto mass = w.sum(1, true) + 1e-6;
    auto center = torch::matmul(w, coords) / mass;
    auto diff = coords.unsqueeze(0) - center.unsqueeze(1);
    auto cov = torch::matmul((diff * w.unsqueeze(-1)).transpose(1, 2), diff) / mass.unsqueeze(-1);
    return Moments{center, cov};
  };

  auto face_w = 1.0 - weights.select(1, static_cast<int64_t>(face::Region::kBackground));
  auto mouth_w = weights.select(1, static_cast<int64_t>(face::Region::kMouth));
  auto pupil_w = weights.select(1, static_cast<int64_t>(face::Region::kPupil));

  auto face_m = moments(face_w);
  auto mouth_m = moments(mouth_w);
  auto face_pts = face::outline_points(face_m.center, 2.0 * face::sqrtm2x2(face_m.covariance), face::kFaceLandmarks);
  auto mouth_pts =
      face::outline_points(mouth_m.center, 2.0 * face::sqrtm2x2(mouth_m.covariance), face::kMouthLandmarks);

  // Split the pupils along the face's minor axis, oriented towards +x.
  auto a = face_m.covariance.select(1, 0).select(1, 0);
  auto c01 = face_m.covariance.select(1, 0).select(1, 1);
  auto d = face_m.covariance.select(1, 1).select(1, 1);
  auto lambda_min = 0.5 * (a + d) - torch::sqrt(0.25 * (a - d).pow(2) + c01.pow(2) + 1e-12);
  auto axis = torch::stack({d - lambda_min, -c01}, 1);
  axis = axis / (axis.norm(2, 1, true) + 1e-12);
  auto pupil_center = moments(pupil_w).center;
  auto side = torch::sigmoid(
      ((coords.unsqueeze(0) - pupil_center.unsqueeze(1)) * axis.unsqueeze(1)).sum(-1) / split_sharpness_);
  auto left = moments(pupil_w * (1.0 - side)).center;
  auto right = moments(pupil_w * side).center;
  auto pupil_pts = face::pupil_points(left, right);
  return torch::cat({face_pts, mouth_pts, pupil_pts}, 1);
}

std::shared_ptr<LandmarkProvider> make_landmark_provider(const std::string& name) {
  if (name == "oracle") return std::make_shared<OracleLandmarkProvider>();
  if (name == "moments") return std::make_shared<MomentLandmarkProvider>();
  throw ProviderError("unknown landmark provider '" + name + "'");
}

}  // namespace mmfa::nets
