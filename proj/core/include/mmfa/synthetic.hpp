#pragma once

// Procedural faces: a textured ellipse with eyes, pupils, nose and mouth
// driven by a 3D head pose and a small expression vector. Every frame carries
// exact pose, landmark and keypoint ground truth.

#include <torch/torch.h>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mmfa/face_model.hpp"

namespace mmfa::synth {

struct Identity {
  double face_a = 0.54;  // horizontal semi-axis at scale 1
  double face_b = 0.70;  // vertical semi-axis at scale 1
  double eye_spacing = 0.2;
  face::Color skin = face::kPrototypes[1];
  face::Color background = face::kPrototypes[0];
  double texture_frequency = 9.0;
  double texture_angle = 0.0;
  double texture_phase = 0.0;
};

struct Expression {
  double smile = 0.0;   // [-1, 1]
  double open = 0.0;    // [0, 1]
  double gaze_x = 0.0;  // [-1, 1]
  double gaze_y = 0.0;  // [-1, 1]
};

struct Pose {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
  double scale = 1.0;
  face::Point2 translation{0.0, 0.0};
};

struct Frame {
  torch::Tensor image;  // [3, S, S] in [0, 1]
  face::FrameMeta meta;
};

struct SynthConfig {
  int64_t image_size = 64;
  int64_t supersample = 3;
  int64_t sequences = 8;
  int64_t frames = 8;
  uint64_t seed = 7;
  double yaw_range = 0.3;
  double pitch_range = 0.25;
  double roll_range = 0.1;
  double scale_min = 0.85;
  double scale_max = 1.0;
  double translation_range = 0.05;

  void validate() const;
};

Frame render(const Identity& identity, const Pose& pose, const Expression& expression, int64_t image_size,
             int64_t supersample = 3);

Identity sample_identity(std::mt19937_64& rng);
Pose sample_pose(std::mt19937_64& rng, const SynthConfig& config);
Expression sample_expression(std::mt19937_64& rng);

// Ground-truth 3D anchors of the face model (before posing).
std::vector<face::Point3> anchor_points(const Identity& identity);

}  // namespace mmfa::synth
