// Command-line front end. Exit codes: 0 ok, 1 usage, 2 runtime failure.

#include <CLI11.hpp>
#include <torch/torch.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "mmfa/animator.hpp"
#include "mmfa/checkpoint.hpp"
#include "mmfa/dataset.hpp"
#include "mmfa/error.hpp"
#include "mmfa/eval.hpp"
#include "mmfa/image_io.hpp"
#include "mmfa/log.hpp"
#include "mmfa/pipeline.hpp"
#include "mmfa/service.hpp"
#include "mmfa/synthetic.hpp"

namespace fs = std::filesystem;
using namespace mmfa;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;
constexpr const char* kCheckpointEnv = "MMFA_CHECKPOINT";

// A bad flag value detected after parsing; reported with exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PoseFlags {
  std::vector<double> source;
  std::vector<double> driving;

  static std::optional<face::FrameMeta> meta(const std::vector<double>& v, const char* flag) {
    if (v.empty()) return std::nullopt;
    if (v.size() != 3) throw UsageError(std::string(flag) + " expects yaw,pitch,roll");
    face::FrameMeta m;
    m.yaw = v[0];
    m.pitch = v[1];
    m.roll = v[2];
    return m;
  }
  void add(CLI::App* cmd) {
    cmd->add_option("--source-pose", source, "Known source pose yaw,pitch,roll (radians)")->delimiter(',');
    cmd->add_option("--driving-pose", driving, "Known driving pose yaw,pitch,roll (radians)")->delimiter(',');
  }
};

void write_bytes(const fs::path& path, const io::Bytes& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

void write_keypoints(const fs::path& path, const torch::Tensor& kp) {
  auto k = kp.to(torch::kFloat64).contiguous();
  auto acc = k.accessor<double, 2>();
  nlohmann::json out = nlohmann::json::array();
  for (int64_t i = 0; i < k.size(0); ++i) out.push_back({acc[i][0], acc[i][1]});
  std::ofstream(path) << out.dump() << "\n";
}

fs::path resolve_checkpoint(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kCheckpointEnv); env && *env) return env;
  throw UsageError(std::string("no checkpoint: pass --checkpoint or set ") + kCheckpointEnv);
}

data::Dataset load_dataset(const std::string& path) {
  if (path.empty()) throw UsageError("no dataset: pass --dataset");
  return data::ingest_dataset(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Face animation with decomposed 3D keypoint motion"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string checkpoint_flag;
  std::string vae_flag;
  std::string log_level = "info";
  int threads = 0;
  app.add_option("--checkpoint", checkpoint_flag, std::string("Checkpoint file (default: $") + kCheckpointEnv + ")");
  app.add_option("--vae", vae_flag, "Separate checkpoint to read the VAE from");
  app.add_option("--log-level", log_level, "debug, info, warn or error");
  app.add_option("--threads", threads, "Intra-op threads (0 keeps the default)");
  std::string pose_provider = "auto";
  app.add_option("--pose-provider", pose_provider, "auto, oracle or fixed");

  // animate
  auto* animate = app.add_subcommand("animate", "Reenact a source image with a driving image");
  std::string a_source, a_driving, a_out, a_mode = "same_identity", a_pose = "absolute", a_reference;
  PoseFlags a_poses;
  std::vector<double> a_reference_pose;
  animate->add_option("--source", a_source)->required();
  animate->add_option("--driving", a_driving)->required();
  animate->add_option("--out", a_out)->required();
  animate->add_option("--mode", a_mode, "same_identity or cross_identity");
  animate->add_option("--pose", a_pose, "absolute or relative");
  animate->add_option("--reference", a_reference, "First driving frame, for relative pose transfer");
  animate->add_option("--reference-pose", a_reference_pose)->delimiter(',');
  a_poses.add(animate);

  // edit
  auto* edit = app.add_subcommand("edit", "Render the source with explicit motion attributes");
  std::string e_source, e_driving, e_out, e_keypoints, e_expression;
  std::optional<double> e_yaw, e_pitch, e_roll, e_scale, e_alpha;
  std::vector<double> e_translation, e_latent;
  PoseFlags e_poses;
  edit->add_option("--source", e_source)->required();
  edit->add_option("--driving", e_driving);
  edit->add_option("--out", e_out)->required();
  edit->add_option("--keypoints-out", e_keypoints, "Write projected keypoints as JSON");
  edit->add_option("--yaw", e_yaw);
  edit->add_option("--pitch", e_pitch);
  edit->add_option("--roll", e_roll);
  edit->add_option("--scale", e_scale);
  edit->add_option("--translation", e_translation, "x,y")->delimiter(',');
  edit->add_option("--expression", e_expression, "source, driving, vae_latent or neutral");
  edit->add_option("--latent", e_latent, "Comma separated latent code")->delimiter(',');
  edit->add_option("--alpha", e_alpha, "Interpolate the latent from source to driving");
  e_poses.add(edit);

  // interpolate
  auto* interp = app.add_subcommand("interpolate", "Blend expressions through the VAE latent space");
  std::string i_source, i_driving, i_out, i_keypoints;
  double i_alpha = 0.5;
  PoseFlags i_poses;
  interp->add_option("--source", i_source)->required();
  interp->add_option("--driving", i_driving)->required();
  interp->add_option("--alpha", i_alpha)->required();
  interp->add_option("--out", i_out)->required();
  interp->add_option("--keypoints-out", i_keypoints);
  i_poses.add(interp);

  // canonical
  auto* canonical = app.add_subcommand("canonical", "Render the neutral-keypoint face of a source");
  std::string c_source, c_out, c_keypoints;
  canonical->add_option("--source", c_source)->required();
  canonical->add_option("--out", c_out)->required();
  canonical->add_option("--keypoints-out", c_keypoints);

  // train
  auto* train = app.add_subcommand("train", "Train the animation model");
  std::string t_config, t_dataset, t_out, t_resume, t_metrics;
  std::optional<int64_t> t_steps;
  train->add_option("--config", t_config, "Run configuration JSON");
  train->add_option("--dataset", t_dataset);
  train->add_option("--steps", t_steps);
  train->add_option("--out", t_out)->required();
  train->add_option("--resume", t_resume, "Continue from a checkpoint");
  train->add_option("--metrics", t_metrics, "Append per-step metrics as JSON lines");

  // train-vae
  auto* train_vae = app.add_subcommand("train-vae", "Train the expression VAE on a trained model");
  std::string v_dataset, v_out, v_metrics;
  std::optional<int64_t> v_steps;
  train_vae->add_option("--dataset", v_dataset);
  train_vae->add_option("--steps", v_steps);
  train_vae->add_option("--out", v_out, "Output checkpoint (default: overwrite the input)");
  train_vae->add_option("--metrics", v_metrics);

  // eval
  auto* evaluate = app.add_subcommand("eval", "Evaluate reconstruction and keypoint transfer");
  std::string ev_dataset, ev_protocol = "same_identity", ev_jsonl;
  evaluate->add_option("--dataset", ev_dataset)->required();
  evaluate->add_option("--protocol", ev_protocol, "same_identity or cross_identity");
  evaluate->add_option("--jsonl", ev_jsonl, "Write line-delimited records");

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP inference service");
  std::string s_host = "127.0.0.1";
  int s_port = 8080;
  serve->add_option("--host", s_host);
  serve->add_option("--port", s_port);

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
  synth::SynthConfig synth_config;
  std::string sy_out;
  synth->add_option("--out", sy_out)->required();
  synth->add_option("--sequences", synth_config.sequences);
  synth->add_option("--frames", synth_config.frames);
  synth->add_option("--size", synth_config.image_size);
  synth->add_option("--seed", synth_config.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    log::set_level(log::parse_level(log_level));
    if (threads > 0) torch::set_num_threads(threads);
    const std::optional<fs::path> vae_path = vae_flag.empty() ? std::nullopt : std::optional<fs::path>(vae_flag);
    auto load_animator = [&] {
      return animator::Animator::from_checkpoint(resolve_checkpoint(checkpoint_flag), vae_path, pose_provider);
    };

    if (*animate) {
      animator::ReenactOptions options;
      options.identity = animator::parse_identity_mode(a_mode);
      options.pose = animator::parse_pose_transfer(a_pose);
      options.source_meta = PoseFlags::meta(a_poses.source, "--source-pose");
      options.driving_meta = PoseFlags::meta(a_poses.driving, "--driving-pose");
      options.reference_meta = PoseFlags::meta(a_reference_pose, "--reference-pose");
      if (options.pose == animator::PoseTransfer::kRelative && a_reference.empty()) {
        throw UsageError("--pose relative needs --reference");
      }
      auto model = load_animator();
      if (!a_reference.empty()) options.reference = io::read_png(a_reference);
      auto image = model->reenact(io::read_png(a_source), io::read_png(a_driving), options);
      write_bytes(a_out, io::encode_png(image));
    } else if (*edit) {
      animator::EditRequest request;
      if (!e_translation.empty()) {
        if (e_translation.size() != 2) throw UsageError("--translation expects x,y");
        request.translation = std::array<double, 2>{e_translation[0], e_translation[1]};
      }
      if (!e_expression.empty()) request.expression = animator::parse_expression_source(e_expression);
      if (!e_latent.empty()) request.latent = e_latent;
      request.yaw = e_yaw;
      request.pitch = e_pitch;
      request.roll = e_roll;
      request.scale = e_scale;
      request.alpha = e_alpha;
      request.source_meta = PoseFlags::meta(e_poses.source, "--source-pose");
      request.driving_meta = PoseFlags::meta(e_poses.driving, "--driving-pose");
      request.source = io::read_png(e_source);
      if (!e_driving.empty()) request.driving = io::read_png(e_driving);
      request.validate();
      auto result = load_animator()->edit(request);
      write_bytes(e_out, io::encode_png(result.image));
      if (!e_keypoints.empty()) write_keypoints(e_keypoints, result.keypoints);
    } else if (*interp) {
      if (!(i_alpha >= 0.0 && i_alpha <= 1.0)) throw UsageError("--alpha must lie in [0, 1]");
      auto model = load_animator();
      if (!model->has_vae()) throw Error("checkpoint has no trained VAE; run train-vae first or pass --vae");
      auto result = model->interpolate(io::read_png(i_source), io::read_png(i_driving), i_alpha,
                                       PoseFlags::meta(i_poses.source, "--source-pose"),
                                       PoseFlags::meta(i_poses.driving, "--driving-pose"));
      write_bytes(i_out, io::encode_png(result.image));
      if (!i_keypoints.empty()) write_keypoints(i_keypoints, result.keypoints);
    } else if (*canonical) {
      auto result = load_animator()->canonical_face(io::read_png(c_source));
      write_bytes(c_out, io::encode_png(result.image));
      if (!c_keypoints.empty()) write_keypoints(c_keypoints, result.keypoints);
    } else if (*train) {
      std::unique_ptr<pipeline::TrainingState> state;
      if (!t_resume.empty()) {
        state = checkpoint::load_checkpoint(t_resume);
      } else {
        auto config = t_config.empty() ? pipeline::RunConfig{} : pipeline::RunConfig::load(t_config);
        if (!t_dataset.empty()) config.dataset_path = t_dataset;
        config.validate();
        state = std::make_unique<pipeline::TrainingState>(config);
      }
      if (!t_dataset.empty()) state->config.dataset_path = t_dataset;
      const auto dataset = load_dataset(state->config.dataset_path);
      const int64_t steps = t_steps.value_or(state->config.steps);
      std::optional<pipeline::MetricsLog> metrics;
      if (!t_metrics.empty()) metrics.emplace(t_metrics);
      const auto every = state->config.log_every;
      const auto ckpt_every = state->config.checkpoint_every;
      auto& st = *state;
      pipeline::train(st, dataset, steps, [&](const pipeline::Metrics& m) {
        if (metrics) metrics->append(m);
        if (every > 0 && m.step % every == 0) log::info(m.to_json());
        if (ckpt_every > 0 && m.step % ckpt_every == 0) checkpoint::save_checkpoint(st, t_out);
      });
      checkpoint::save_checkpoint(st, t_out);
      log::info("wrote " + t_out);
    } else if (*train_vae) {
      const auto input = resolve_checkpoint(checkpoint_flag);
      auto state = checkpoint::load_checkpoint(input);
      if (!v_dataset.empty()) state->config.dataset_path = v_dataset;
      const auto dataset = load_dataset(state->config.dataset_path);
      auto features = pipeline::expression_features(state->model, dataset);
      std::optional<pipeline::MetricsLog> metrics;
      if (!v_metrics.empty()) metrics.emplace(v_metrics);
      const auto every = state->config.log_every;
      pipeline::train_vae(*state, features, v_steps.value_or(state->config.vae_steps), [&](const pipeline::Metrics& m) {
        if (metrics) metrics->append(m);
        if (every > 0 && m.step % every == 0) log::info(m.to_json());
      });
      const fs::path out = v_out.empty() ? input : fs::path(v_out);
      checkpoint::save_checkpoint(*state, out);
      log::info("wrote " + out.string());
    } else if (*evaluate) {
      const auto path = resolve_checkpoint(checkpoint_flag);
      const auto protocol = eval::parse_protocol(ev_protocol);
      auto model = animator::Animator::from_checkpoint(path, vae_path, pose_provider);
      const auto dataset = load_dataset(ev_dataset);
      const auto config = checkpoint::read_config(path);
      auto landmarks = nets::make_landmark_provider(config.landmark_provider);
      animator::ReenactOptions options;
      options.identity =
          protocol == eval::Protocol::kSameIdentity ? animator::IdentityMode::kSame : animator::IdentityMode::kCross;
      auto reenactor = [&](const torch::Tensor& s, const torch::Tensor& d, const std::optional<face::FrameMeta>& sm,
                           const std::optional<face::FrameMeta>& dm) {
        auto opts = options;
        opts.source_meta = sm;
        opts.driving_meta = dm;
        return model->reenact(s, d, opts);
      };
      auto report = eval::evaluate(reenactor, dataset, protocol, *landmarks, model->info().checkpoint_hash);
      std::cout << report.to_table();
      if (!ev_jsonl.empty()) std::ofstream(ev_jsonl) << report.to_jsonl();
    } else if (*serve) {
      const auto path = resolve_checkpoint(checkpoint_flag);
      auto loader = [path, vae_path, pose_provider] {
        return animator::Animator::from_checkpoint(path, vae_path, pose_provider);
      };
      service::Service svc(loader(), loader);
      if (!svc.listen(s_host, s_port)) throw Error("cannot listen on " + s_host + ":" + std::to_string(s_port));
    } else if (*synth) {
      synth_config.validate();
      data::save_dataset(data::synthesize_dataset(synth_config), sy_out);
      log::info("wrote " + sy_out);
    }
    return kOk;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
