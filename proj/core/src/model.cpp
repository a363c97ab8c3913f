#include "mmfa/model.hpp"

namespace mmfa::model {

AnimationModelImpl::AnimationModelImpl(const nets::NetConfig& config) : config_(config) {
  config_.validate();
  detector = register_module("detector", nets::KeypointDetector(config_));
  affine = register_module("affine", nets::AffineEstimator(config_));
  expression_encoder = register_module("expression_encoder", nets::ExpressionEncoder(config_));
  expression_decoder = register_module("expression_decoder", nets::ExpressionDecoder(config_));
  appearance = register_module("appearance", nets::AppearanceEncoder(config_));
  motion = register_module("motion", nets::DenseMotionNet(config_));
  generator = register_module("generator", nets::Generator(config_));
  discriminator = register_module("discriminator", nets::Discriminator(config_));
}

FrameAnalysis AnimationModelImpl::analyze(const torch::Tensor& images, const torch::Tensor& rotations) {
  return {detector->forward(images), affine->forward(images), expression_encoder->forward(images), rotations};
}

torch::Tensor AnimationModelImpl::deformation(const nets::ExpressionLatent& expression,
                                              const geometry::KeypointSet& canonical) {
  return expression_decoder->forward(expression, canonical);
}

torch::Tensor AnimationModelImpl::jacobian(const torch::Tensor& source_rotation,
                                           const torch::Tensor& driving_rotation) const {
  if (config_.jacobian == nets::JacobianMode::kIdentity) {
    return torch::eye(3, source_rotation.options()).unsqueeze(0).expand({source_rotation.size(0), 3, 3});
  }
  return torch::matmul(source_rotation, driving_rotation.transpose(1, 2));
}

Synthesis AnimationModelImpl::synthesize(const torch::Tensor& source_images,
                                         const geometry::KeypointSet& source_keypoints,
                                         const geometry::KeypointSet& driving_keypoints,
                                         const torch::Tensor& source_rotation, const torch::Tensor& driving_rotation) {
  nets::check_images(source_images, config_);
  auto volume = appearance->forward(source_images);
  auto prediction =
      motion->forward(volume, source_keypoints, driving_keypoints, jacobian(source_rotation, driving_rotation));
  auto flow = geometry::dense_flow(prediction.inputs.candidates, prediction.masks);
  auto warped = geometry::warp(volume, flow);
  if (config_.use_occlusion) {
    flow.occlusion = prediction.occlusion;
    warped = warped * prediction.occlusion.unsqueeze(2);
  }
  return {generator->forward(warped), std::move(prediction), std::move(flow)};
}

std::vector<torch::Tensor> AnimationModelImpl::generator_parameters() {
  std::vector<torch::Tensor> out;
  for (auto* m : std::initializer_list<torch::nn::Module*>{detector.get(), affine.get(), expression_encoder.get(),
                                                           expression_decoder.get(), appearance.get(), motion.get(),
                                                           generator.get()}) {
    for (auto& p : m->parameters()) out.push_back(p);
  }
  return out;
}

std::vector<torch::Tensor> AnimationModelImpl::discriminator_parameters() { return discriminator->parameters(); }

geometry::MotionParams motion_params(const FrameAnalysis& frame, const torch::Tensor& delta) {
  return {frame.rotation, frame.affine.translation, frame.affine.scale, delta};
}

}  // namespace mmfa::model
