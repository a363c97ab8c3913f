#include "mmfa/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "mmfa/error.hpp"
#include "mmfa/image_io.hpp"
#include "mmfa/log.hpp"

namespace mmfa::pipeline {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Run configuration

namespace {

// Copies known keys of `obj` into fields; any other key is an error.
class Reader {
 public:
  Reader(const json& obj, std::string scope) : obj_(obj), scope_(std::move(scope)) {
    if (!obj_.is_object()) throw InvalidArgument("config: '" + scope_ + "' must be an object");
  }
  template <typename T>
  void operator()(const char* key, T& field) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      field = obj_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw InvalidArgument("config: bad value for '" + scope_ + key + "': " + e.what());
    }
  }
  const json* child(const char* key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }
  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) throw InvalidArgument("config: unknown key '" + scope_ + key + "'");
    }
  }

 private:
  const json& obj_;
  std::string scope_;
  std::set<std::string> seen_;
};

json net_to_json(const nets::NetConfig& c) {
  return {{"image_size", c.image_size},
          {"num_keypoints", c.num_keypoints},
          {"expr_dim", c.expr_dim},
          {"volume_channels", c.volume_channels},
          {"volume_depth", c.volume_depth},
          {"base_width", c.base_width},
          {"motion_channels", c.motion_channels},
          {"motion_hidden", c.motion_hidden},
          {"decoder_hidden", c.decoder_hidden},
          {"heatmap_sigma", c.heatmap_sigma},
          {"keypoint_temperature", c.keypoint_temperature},
          {"use_occlusion", c.use_occlusion},
          {"jacobian", c.jacobian == nets::JacobianMode::kRotation ? "rotation" : "identity"}};
}

void net_from_json(const json& j, nets::NetConfig& c) {
  Reader r(j, "net.");
  r("image_size", c.image_size);
  r("num_keypoints", c.num_keypoints);
  r("expr_dim", c.expr_dim);
  r("volume_channels", c.volume_channels);
  r("volume_depth", c.volume_depth);
  r("base_width", c.base_width);
  r("motion_channels", c.motion_channels);
  r("motion_hidden", c.motion_hidden);
  r("decoder_hidden", c.decoder_hidden);
  r("heatmap_sigma", c.heatmap_sigma);
  r("keypoint_temperature", c.keypoint_temperature);
  r("use_occlusion", c.use_occlusion);
  std::string jac = c.jacobian == nets::JacobianMode::kRotation ? "rotation" : "identity";
  r("jacobian", jac);
  if (jac == "rotation") {
    c.jacobian = nets::JacobianMode::kRotation;
  } else if (jac == "identity") {
    c.jacobian = nets::JacobianMode::kIdentity;
  } else {
    throw InvalidArgument("config: net.jacobian must be 'rotation' or 'identity'");
  }
  r.finish();
}

json loss_to_json(const losses::LossConfig& c) {
  const auto& w = c.weights;
  return {{"weights",
           {{"perceptual", w.perceptual},
            {"gan", w.gan},
            {"equivariance", w.equivariance},
            {"keypoint_prior", w.keypoint_prior},
            {"deformation_prior", w.deformation_prior},
            {"expression", w.expression},
            {"canonical", w.canonical},
            {"landmark", w.landmark}}},
          {"feature_matching", c.feature_matching},
          {"lambda_face", c.lambda_face},
          {"lambda_mouth", c.lambda_mouth},
          {"lambda_pupil", c.lambda_pupil},
          {"distance_threshold", c.distance_threshold},
          {"depth_target", c.depth_target},
          {"pyramid_depth", c.pyramid_depth},
          {"identity_term", c.identity_term}};
}

void loss_from_json(const json& j, losses::LossConfig& c) {
  Reader r(j, "loss.");
  if (const auto* wj = r.child("weights")) {
    Reader w(*wj, "loss.weights.");
    w("perceptual", c.weights.perceptual);
    w("gan", c.weights.gan);
    w("equivariance", c.weights.equivariance);
    w("keypoint_prior", c.weights.keypoint_prior);
    w("deformation_prior", c.weights.deformation_prior);
    w("expression", c.weights.expression);
    w("canonical", c.weights.canonical);
    w("landmark", c.weights.landmark);
    w.finish();
  }
  r("feature_matching", c.feature_matching);
  r("lambda_face", c.lambda_face);
  r("lambda_mouth", c.lambda_mouth);
  r("lambda_pupil", c.lambda_pupil);
  r("distance_threshold", c.distance_threshold);
  r("depth_target", c.depth_target);
  r("pyramid_depth", c.pyramid_depth);
  r("identity_term", c.identity_term);
  r.finish();
}

json optim_to_json(const OptimizerConfig& o) {
  return {{"learning_rate", o.learning_rate},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"final_lr_fraction", o.final_lr_fraction}};
}

void optim_from_json(const json& j, OptimizerConfig& o, const std::string& scope) {
  Reader r(j, scope);
  r("learning_rate", o.learning_rate);
  r("beta1", o.beta1);
  r("beta2", o.beta2);
  r("final_lr_fraction", o.final_lr_fraction);
  r.finish();
}

}  // namespace

double OptimizerConfig::rate_at(int64_t step, int64_t total_steps) const {
  if (final_lr_fraction == 1.0 || total_steps <= 0) return learning_rate;
  const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
  return learning_rate * (final_lr_fraction + (1.0 - final_lr_fraction) * cosine);
}

void RunConfig::validate() const {
  net.validate();
  loss.validate();
  vae.validate();
  augment.validate();
  if (vae.feature_dim != net.expr_dim) throw InvalidArgument("config: vae.feature_dim must equal net.expr_dim");
  for (const auto* o : {&optimizer, &vae_optimizer}) {
    if (!(o->learning_rate > 0.0)) throw InvalidArgument("config: learning rate must be positive");
    if (!(o->beta1 >= 0.0 && o->beta1 < 1.0 && o->beta2 >= 0.0 && o->beta2 < 1.0)) {
      throw InvalidArgument("config: Adam betas must lie in [0, 1)");
    }
    if (!(o->final_lr_fraction > 0.0 && o->final_lr_fraction <= 1.0)) {
      throw InvalidArgument("config: final_lr_fraction must lie in (0, 1]");
    }
  }
  if (batch_size < 1 || vae_batch_size < 2) throw InvalidArgument("config: batch sizes too small");
  if (steps < 0 || vae_steps < 0 || log_every < 1 || checkpoint_every < 0) {
    throw InvalidArgument("config: step counts must be nonnegative");
  }
  if (!(vae_weights.reconstruction >= 0.0 && vae_weights.kl >= 0.0 && vae_weights.adversarial >= 0.0)) {
    throw InvalidArgument("config: VAE weights must be nonnegative");
  }
  nets::make_pose_provider(pose_provider);
  nets::make_landmark_provider(landmark_provider);
}

std::string RunConfig::to_json() const {
  json j{{"net", net_to_json(net)},
         {"loss", loss_to_json(loss)},
         {"vae",
          {{"feature_dim", vae.feature_dim},
           {"latent_dim", vae.latent_dim},
           {"hidden", vae.hidden},
           {"discriminator_hidden", vae.discriminator_hidden}}},
         {"vae_weights",
          {{"reconstruction", vae_weights.reconstruction},
           {"kl", vae_weights.kl},
           {"adversarial", vae_weights.adversarial}}},
         {"optimizer", optim_to_json(optimizer)},
         {"vae_optimizer", optim_to_json(vae_optimizer)},
         {"augment",
          {{"rotation", augment.rotation},
           {"scale_min", augment.scale_min},
           {"scale_max", augment.scale_max},
           {"translation", augment.translation}}},
         {"batch_size", batch_size},
         {"steps", steps},
         {"vae_batch_size", vae_batch_size},
         {"vae_steps", vae_steps},
         {"dataset_path", dataset_path},
         {"seed", seed},
         {"pose_provider", pose_provider},
         {"landmark_provider", landmark_provider},
         {"log_every", log_every},
         {"checkpoint_every", checkpoint_every}};
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: not valid JSON: ") + e.what());
  }
  RunConfig c;
  Reader r(j, "");
  if (const auto* n = r.child("net")) net_from_json(*n, c.net);
  if (const auto* l = r.child("loss")) loss_from_json(*l, c.loss);
  if (const auto* v = r.child("vae")) {
    Reader vr(*v, "vae.");
    vr("feature_dim", c.vae.feature_dim);
    vr("latent_dim", c.vae.latent_dim);
    vr("hidden", c.vae.hidden);
    vr("discriminator_hidden", c.vae.discriminator_hidden);
    vr.finish();
  } else {
    c.vae.feature_dim = c.net.expr_dim;
  }
  if (const auto* w = r.child("vae_weights")) {
    Reader wr(*w, "vae_weights.");
    wr("reconstruction", c.vae_weights.reconstruction);
    wr("kl", c.vae_weights.kl);
    wr("adversarial", c.vae_weights.adversarial);
    wr.finish();
  }
  if (const auto* o = r.child("optimizer")) optim_from_json(*o, c.optimizer, "optimizer.");
  if (const auto* o = r.child("vae_optimizer")) optim_from_json(*o, c.vae_optimizer, "vae_optimizer.");
  if (const auto* a = r.child("augment")) {
    Reader ar(*a, "augment.");
    ar("rotation", c.augment.rotation);
    ar("scale_min", c.augment.scale_min);
    ar("scale_max", c.augment.scale_max);
    ar("translation", c.augment.translation);
    ar.finish();
  }
  r("batch_size", c.batch_size);
  r("steps", c.steps);
  r("vae_batch_size", c.vae_batch_size);
  r("vae_steps", c.vae_steps);
  r("dataset_path", c.dataset_path);
  r("seed", c.seed);
  r("pose_provider", c.pose_provider);
  r("landmark_provider", c.landmark_provider);
  r("log_every", c.log_every);
  r("checkpoint_every", c.checkpoint_every);
  r.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config '" + path.string() + "'");
  std::stringstream text;
  text << in.rdbuf();
  return from_json(text.str());
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write config '" + path.string() + "'");
  out << to_json() << "\n";
}

// ---------------------------------------------------------------------------
// Metrics

double Metrics::at(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end()) throw InvalidArgument("no metric named '" + name + "'");
  return it->second;
}

std::string Metrics::to_json() const {
  json j{{"step", step}, {"phase", phase}};
  for (const auto& [k, v] : values) j[k] = std::isfinite(v) ? json(v) : json(nullptr);
  return j.dump();
}

MetricsLog::MetricsLog(const std::filesystem::path& path) : out_(path, std::ios::app) {
  if (!out_) throw Error("cannot open metrics log '" + path.string() + "'");
}

void MetricsLog::append(const Metrics& metrics) {
  out_ << metrics.to_json() << "\n";
  out_.flush();
}

// ---------------------------------------------------------------------------
// Training state

namespace {

std::unique_ptr<torch::optim::Adam> make_adam(std::vector<torch::Tensor> params, const OptimizerConfig& o) {
  return std::make_unique<torch::optim::Adam>(
      std::move(params), torch::optim::AdamOptions(o.learning_rate).betas({o.beta1, o.beta2}));
}

}  // namespace

TrainingState::TrainingState(const RunConfig& cfg) : config(cfg), rng(cfg.seed) {
  config.validate();
  torch::manual_seed(config.seed);
  model = model::AnimationModel(config.net);
  vae = vae::ExpressionVae(config.vae);
  generator_optimizer = make_adam(model->generator_parameters(), config.optimizer);
  discriminator_optimizer = make_adam(model->discriminator_parameters(), config.optimizer);
  vae_optimizer = make_adam([&] {
    auto p = vae->encoder->parameters();
    auto d = vae->decoder->parameters();
    p.insert(p.end(), d.begin(), d.end());
    return p;
  }(), config.vae_optimizer);
  vae_discriminator_optimizer = make_adam(vae->discriminator->parameters(), config.vae_optimizer);
  pose_provider = nets::make_pose_provider(config.pose_provider);
  driving_landmarks = nets::make_landmark_provider(config.landmark_provider);
  generated_landmarks = std::make_shared<nets::MomentLandmarkProvider>();
  perceptual = std::make_shared<losses::MultiScalePerceptualLoss>(config.loss.pyramid_depth, config.loss.identity_term);
}

std::vector<std::pair<std::string, std::vector<torch::Tensor>>> parameter_groups(model::AnimationModel& m) {
  return {{"detector", m->detector->parameters()},
          {"affine", m->affine->parameters()},
          {"expression_encoder", m->expression_encoder->parameters()},
          {"expression_decoder", m->expression_decoder->parameters()},
          {"appearance", m->appearance->parameters()},
          {"motion", m->motion->parameters()},
          {"generator", m->generator->parameters()},
          {"discriminator", m->discriminator->parameters()}};
}

torch::Tensor stack_internal(std::span<const torch::Tensor> images) {
  std::vector<torch::Tensor> v(images.begin(), images.end());
  return torch::stack(v) * 2.0 - 1.0;
}

namespace {

double grad_norm(const std::vector<torch::Tensor>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p.grad().defined()) sq += p.grad().pow(2).sum().item<double>();
  }
  return std::sqrt(sq);
}

model::FrameAnalysis slice(const model::FrameAnalysis& a, int64_t index, int64_t count) {
  auto part = [&](const torch::Tensor& t) { return t.narrow(0, index * count, count); };
  return {{part(a.canonical.points)},
          {part(a.affine.scale), part(a.affine.translation)},
          {part(a.expression.values)},
          part(a.rotation)};
}

[[noreturn]] void abort_non_finite(const Metrics& metrics) {
  std::ostringstream os;
  os << "non-finite loss at step " << metrics.step << ":";
  for (const auto& [k, v] : metrics.values) os << " " << k << "=" << v;
  log::error(os.str());
  throw TrainingError(os.str());
}

}  // namespace

Metrics train_step(TrainingState& st, std::span<const data::FramePair> batch) {
  if (batch.empty()) throw InvalidArgument("train_step needs a non-empty batch");
  const auto& cfg = st.config;
  auto& m = st.model;
  m->train();
  const auto b = static_cast<int64_t>(batch.size());

  std::vector<torch::Tensor> s_images, d_images;
  face::MetaList s_meta, d_meta, a_meta;
  std::vector<geometry::AugmentTransform> transforms;
  for (const auto& pair : batch) {
    s_images.push_back(pair.source);
    d_images.push_back(pair.driving);
    s_meta.push_back(pair.source_meta);
    d_meta.push_back(pair.driving_meta);
    transforms.push_back(data::sample_transform(st.rng, cfg.augment));
    a_meta.push_back(pair.driving_meta ? std::optional(data::augment_meta(*pair.driving_meta, transforms.back()))
                                       : std::nullopt);
  }
  auto source = stack_internal(s_images);
  auto driving = stack_internal(d_images);
  auto augmented = geometry::apply_augment(driving, transforms);

  face::MetaList all_meta = s_meta;
  all_meta.insert(all_meta.end(), d_meta.begin(), d_meta.end());
  all_meta.insert(all_meta.end(), a_meta.begin(), a_meta.end());
  auto all_images = torch::cat({source, driving, augmented}, 0);
  torch::Tensor rotations;
  {
    torch::NoGradGuard no_grad;
    rotations = st.pose_provider->rotations(all_images, all_meta);
  }
  auto all = m->analyze(all_images, rotations);
  auto an_s = slice(all, 0, b);
  auto an_d = slice(all, 1, b);
  auto an_a = slice(all, 2, b);

  // Reconstruction keypoints anchor on the source canonical set; the own-set
  // variants feed the equivariance term.
  auto deltas = m->deformation(
      {torch::cat({an_s.expression.values, an_d.expression.values, an_d.expression.values, an_a.expression.values})},
      {torch::cat({an_s.canonical.points, an_s.canonical.points, an_d.canonical.points, an_a.canonical.points})});
  auto delta_s = deltas.narrow(0, 0, b);
  auto delta_d = deltas.narrow(0, b, b);
  auto delta_d_own = deltas.narrow(0, 2 * b, b);
  auto delta_a = deltas.narrow(0, 3 * b, b);

  auto kp_s = geometry::compose_keypoints(an_s.canonical, model::motion_params(an_s, delta_s));
  auto kp_d = geometry::compose_keypoints(an_s.canonical, model::motion_params(an_d, delta_d));
  auto kp_d_own = geometry::compose_keypoints(an_d.canonical, model::motion_params(an_d, delta_d_own));
  auto kp_a = geometry::compose_keypoints(an_a.canonical, model::motion_params(an_a, delta_a));

  auto synthesis = m->synthesize(source, kp_s, kp_d, an_s.rotation, an_d.rotation);
  const auto& generated = synthesis.output.full();
  const auto scales = cfg.net.generator_scales();
  auto truth = losses::image_pyramid(driving, scales);

  losses::LossTerms terms;
  terms.perceptual = (*st.perceptual)(synthesis.output, truth);
  auto gan = losses::gan_losses(m->discriminator, driving, generated);
  terms.gan = gan.generator + cfg.loss.feature_matching * gan.feature_matching;
  terms.equivariance = losses::equivariance_loss(geometry::project_orthographic(kp_d_own),
                                                 geometry::project_orthographic(kp_a), transforms);
  terms.keypoint_prior = losses::keypoint_prior_loss(torch::cat({kp_s.points, kp_d.points}),
                                                     cfg.loss.distance_threshold, cfg.loss.depth_target);
  terms.deformation_prior = losses::deformation_prior_loss(torch::cat({delta_s, delta_d}));
  terms.expression = losses::expression_consistency_loss(an_d.expression, an_a.expression);
  terms.canonical = losses::canonical_consistency_loss(an_s.canonical, an_d.canonical);
  torch::Tensor driving_landmarks;
  {
    torch::NoGradGuard no_grad;
    driving_landmarks = st.driving_landmarks->detect(driving, d_meta);
  }
  terms.landmark = losses::landmark_loss(st.generated_landmarks->detect(generated, {}), driving_landmarks, cfg.loss);
  auto total = losses::total_loss(terms, cfg.loss.weights);

  Metrics metrics;
  metrics.step = st.step + 1;
  metrics.phase = "main";
  auto record = [&](const char* name, const std::optional<torch::Tensor>& t) {
    metrics.values[std::string("loss.") + name] = t->item<double>();
  };
  record("perceptual", terms.perceptual);
  record("gan", terms.gan);
  record("equivariance", terms.equivariance);
  record("keypoint_prior", terms.keypoint_prior);
  record("deformation_prior", terms.deformation_prior);
  record("expression", terms.expression);
  record("canonical", terms.canonical);
  record("landmark", terms.landmark);
  metrics.values["loss.total"] = total.item<double>();
  metrics.values["loss.feature_matching"] = gan.feature_matching.item<double>();
  metrics.values["reconstruction_l1"] = 0.5 * (generated - driving).abs().mean().item<double>();
  if (!std::isfinite(metrics.values["loss.total"]) || !std::isfinite(gan.discriminator.item<double>())) {
    metrics.values["loss.discriminator"] = gan.discriminator.item<double>();
    abort_non_finite(metrics);
  }

  const double lr = cfg.optimizer.rate_at(st.step, cfg.steps);
  for (auto* opt : {st.generator_optimizer.get(), st.discriminator_optimizer.get()}) {
    for (auto& group : opt->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
  metrics.values["learning_rate"] = lr;

  auto groups = parameter_groups(m);
  st.generator_optimizer->zero_grad();
  total.backward();
  for (const auto& [name, params] : groups) {
    if (name != "discriminator") metrics.values["grad_norm." + name] = grad_norm(params);
  }
  st.generator_optimizer->step();

  st.discriminator_optimizer->zero_grad();
  auto d_loss = cfg.loss.weights.gan * gan.discriminator;
  d_loss.backward();
  metrics.values["loss.discriminator"] = gan.discriminator.item<double>();
  metrics.values["grad_norm.discriminator"] = grad_norm(groups.back().second);
  st.discriminator_optimizer->step();

  ++st.step;
  return metrics;
}

std::vector<data::FramePair> sample_batch(const data::Dataset& dataset, std::mt19937_64& rng, int64_t batch_size) {
  if (dataset.sequences.empty()) throw DatasetError("cannot sample from an empty dataset");
  std::vector<data::FramePair> batch;
  std::uniform_int_distribution<size_t> pick(0, dataset.sequences.size() - 1);
  for (int64_t i = 0; i < batch_size; ++i) batch.push_back(data::sample_pair(dataset.sequences[pick(rng)], rng));
  return batch;
}

void train(TrainingState& state, const data::Dataset& dataset, int64_t steps, const MetricsCallback& on_step) {
  for (int64_t i = 0; i < steps; ++i) {
    auto batch = sample_batch(dataset, state.rng, state.config.batch_size);
    auto metrics = train_step(state, batch);
    if (on_step) on_step(metrics);
  }
}

torch::Tensor expression_features(model::AnimationModel& model, const data::Dataset& dataset) {
  torch::NoGradGuard no_grad;
  model->eval();
  std::vector<torch::Tensor> out;
  for (const auto& seq : dataset.sequences) {
    out.push_back(model->expression_encoder->forward(stack_internal(seq.frames)).values);
  }
  return torch::cat(out, 0);
}

Metrics train_vae_step(TrainingState& st, const torch::Tensor& features) {
  const auto& w = st.config.vae_weights;
  if (features.dim() != 2 || features.size(1) != st.config.vae.feature_dim) {
    throw ShapeError("VAE features must be [B, " + std::to_string(st.config.vae.feature_dim) + "]");
  }
  auto& v = st.vae;
  v->train();
  // Losses and the discriminator see standardized features.
  const nets::ExpressionLatent f{v->standardize(features.detach())};
  auto g = v->encoder->forward(f);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto eps = torch::empty(g.mu.sizes(), torch::kFloat64);
  auto* e = eps.data_ptr<double>();
  for (int64_t i = 0; i < eps.numel(); ++i) e[i] = normal(st.rng);
  auto z = vae::reparameterize(g, eps.to(g.mu.options()));
  auto f_hat = v->decoder->forward(z);
  auto terms = vae::vae_loss(f, f_hat, g, &v->discriminator, w);

  Metrics metrics;
  metrics.step = st.vae_step + 1;
  metrics.phase = "vae";
  metrics.values["vae.reconstruction"] = terms.reconstruction.item<double>();
  metrics.values["vae.kl"] = terms.kl.item<double>();
  metrics.values["vae.adversarial"] = terms.adversarial.item<double>();
  metrics.values["vae.total"] = terms.total.item<double>();
  if (!std::isfinite(metrics.values["vae.total"])) abort_non_finite(metrics);

  st.vae_optimizer->zero_grad();
  terms.total.backward();
  st.vae_optimizer->step();

  st.vae_discriminator_optimizer->zero_grad();
  if (w.adversarial > 0.0) {
    auto d_loss = vae::feature_discriminator_loss(v->discriminator, f.values, f_hat.values);
    (w.adversarial * d_loss).backward();
    metrics.values["vae.discriminator"] = d_loss.item<double>();
    st.vae_discriminator_optimizer->step();
  }
  ++st.vae_step;
  st.vae_trained = true;
  return metrics;
}

void train_vae(TrainingState& state, const torch::Tensor& features, int64_t steps, const MetricsCallback& on_step) {
  const auto n = features.size(0);
  const auto bs = std::min<int64_t>(state.config.vae_batch_size, n);
  if (bs < 2) throw InvalidArgument("VAE training needs at least two feature vectors");
  if (state.vae_step == 0) state.vae->fit_feature_statistics(features);
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = order.size();
  for (int64_t i = 0; i < steps; ++i) {
    std::vector<int64_t> idx;
    while (static_cast<int64_t>(idx.size()) < bs) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), state.rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    auto metrics = train_vae_step(state, features.index_select(0, torch::tensor(idx, torch::kLong)));
    if (on_step) on_step(metrics);
  }
}

}  // namespace mmfa::pipeline
