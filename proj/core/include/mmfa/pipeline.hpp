#pragma once

// Training: run configuration, optimizer state, the main and VAE training
// steps, and the loops that drive them.

#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mmfa/dataset.hpp"
#include "mmfa/expr_vae.hpp"
#include "mmfa/losses.hpp"
#include "mmfa/model.hpp"
#include "mmfa/nets.hpp"

namespace mmfa::pipeline {

struct OptimizerConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.5;
  double beta2 = 0.9;
  // Cosine decay from learning_rate to learning_rate * final_lr_fraction over
  // the configured step count; 1 keeps the rate constant.
  double final_lr_fraction = 1.0;

  double rate_at(int64_t step, int64_t total_steps) const;
};

struct RunConfig {
  nets::NetConfig net;
  losses::LossConfig loss;
  vae::VaeConfig vae;
  vae::VaeWeights vae_weights;
  OptimizerConfig optimizer;
  OptimizerConfig vae_optimizer{1e-3, 0.5, 0.9};
  data::AugmentRanges augment;
  int64_t batch_size = 4;
  int64_t steps = 1000;
  int64_t vae_batch_size = 64;
  int64_t vae_steps = 2000;
  std::string dataset_path;
  uint64_t seed = 0;
  std::string pose_provider = "auto";
  std::string landmark_provider = "moments";  // applied to driving frames
  int64_t log_every = 10;
  int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints

  void validate() const;
  std::string to_json() const;
  // Keys absent from `text` keep their defaults; unknown keys are rejected.
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

// Named scalars of one step, ordered by name.
struct Metrics {
  int64_t step = 0;
  std::string phase;
  std::map<std::string, double> values;

  double at(const std::string& name) const;
  std::string to_json() const;
};

// Append-only JSONL sink.
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path);
  void append(const Metrics& metrics);

 private:
  std::ofstream out_;
};

struct TrainingState {
  explicit TrainingState(const RunConfig& config);

  RunConfig config;
  model::AnimationModel model{nullptr};
  vae::ExpressionVae vae{nullptr};
  std::unique_ptr<torch::optim::Adam> generator_optimizer;
  std::unique_ptr<torch::optim::Adam> discriminator_optimizer;
  std::unique_ptr<torch::optim::Adam> vae_optimizer;
  std::unique_ptr<torch::optim::Adam> vae_discriminator_optimizer;
  std::mt19937_64 rng;
  int64_t step = 0;
  int64_t vae_step = 0;
  bool vae_trained = false;

  std::shared_ptr<nets::PoseProvider> pose_provider;
  std::shared_ptr<nets::LandmarkProvider> driving_landmarks;
  std::shared_ptr<nets::MomentLandmarkProvider> generated_landmarks;
  std::shared_ptr<losses::MultiScalePerceptualLoss> perceptual;
};

// Parameter groups reported in gradient telemetry, in a fixed order.
std::vector<std::pair<std::string, std::vector<torch::Tensor>>> parameter_groups(model::AnimationModel& model);

// One generator step on the full objective followed by one discriminator
// step. Throws TrainingError (after logging every term) on a non-finite loss.
Metrics train_step(TrainingState& state, std::span<const data::FramePair> batch);

// Draws `batch_size` pairs: sequence uniformly, then two distinct frames.
std::vector<data::FramePair> sample_batch(const data::Dataset& dataset, std::mt19937_64& rng, int64_t batch_size);

using MetricsCallback = std::function<void(const Metrics&)>;

// Runs `steps` main training steps.
void train(TrainingState& state, const data::Dataset& dataset, int64_t steps, const MetricsCallback& on_step = {});

// Expression features of every frame under the (frozen) encoder, [N, E].
torch::Tensor expression_features(model::AnimationModel& model, const data::Dataset& dataset);

// One VAE step on frozen features [B, E]; the feature discriminator is
// updated afterwards when lambda_adv > 0.
Metrics train_vae_step(TrainingState& state, const torch::Tensor& features);

// Runs `steps` VAE steps on minibatches drawn from `features`.
void train_vae(TrainingState& state, const torch::Tensor& features, int64_t steps,
               const MetricsCallback& on_step = {});

// Stacks [3, S, S] images in [0, 1] into an internal [B, 3, S, S] batch.
torch::Tensor stack_internal(std::span<const torch::Tensor> images);

}  // namespace mmfa::pipeline
