#pragma once

// Layout of the procedural faces used for training and evaluation, shared by
// the renderer and by the image-based landmark provider so that both describe
// landmarks the same way.
//
// Landmarks are 145 ordered 2D points: 120 on the face outline, 20 on the
// mouth outline, 5 for the pupils. An outline with centroid c and second
// moment C is sampled as c + M u_i with M = 2 sqrt(C) and u_i unit vectors at
// fixed angles; for a filled ellipse this lands exactly on its boundary.

#include <torch/torch.h>

#include <array>
#include <optional>
#include <vector>

namespace mmfa::face {

inline constexpr int64_t kFaceLandmarks = 120;
inline constexpr int64_t kMouthLandmarks = 20;
inline constexpr int64_t kPupilLandmarks = 5;
inline constexpr int64_t kLandmarkCount = kFaceLandmarks + kMouthLandmarks + kPupilLandmarks;

using Point2 = std::array<double, 2>;
using Point3 = std::array<double, 3>;
using Color = std::array<double, 3>;

// Color prototypes in [0, 1] RGB. Rendered colors stay near these.
enum class Region : int { kBackground = 0, kSkin, kMouth, kEyeWhite, kPupil, kCount };
inline constexpr std::array<Color, 5> kPrototypes{{
    {0.22, 0.30, 0.52},  // background
    {0.84, 0.64, 0.50},  // skin
    {0.66, 0.12, 0.16},  // mouth
    {0.95, 0.95, 0.95},  // eye white
    {0.08, 0.06, 0.10},  // pupil
}};

// Per-frame ground truth carried alongside synthetic images. Angles in
// radians, translation and landmarks in normalized image coordinates.
struct FrameMeta {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
  double scale = 1.0;
  Point2 translation{0.0, 0.0};
  std::vector<Point2> landmarks;  // kLandmarkCount entries when present
  std::vector<Point3> keypoints;  // posed ground-truth anchor points
};

using MetaList = std::vector<std::optional<FrameMeta>>;

// Unit directions for an outline of n samples, starting at the top and
// proceeding clockwise on screen.
std::vector<Point2> outline_directions(int64_t n);

// c + M u_i for a symmetric 2x2 M = {m00, m01, m11}.
std::vector<Point2> outline_points(const Point2& center, const std::array<double, 3>& shape, int64_t n);

// Symmetric shape matrix of an ellipse with semi-axes (a, b) rotated by angle.
std::array<double, 3> ellipse_shape(double a, double b, double angle);

// The five pupil landmarks from the two pupil centers (image-left first).
std::array<Point2, 5> pupil_points(const Point2& left, const Point2& right);

// Tensor forms used by the differentiable provider. centers [B, 2], shapes
// [B, 2, 2] -> [B, n, 2]; left/right [B, 2] -> [B, 5, 2].
torch::Tensor outline_points(const torch::Tensor& centers, const torch::Tensor& shapes, int64_t n);
torch::Tensor pupil_points(const torch::Tensor& left, const torch::Tensor& right);

// Symmetric square root of a batch of 2x2 SPD matrices [B, 2, 2].
torch::Tensor sqrtm2x2(const torch::Tensor& spd);

// Views into a [B, 145, 2] landmark tensor.
inline torch::Tensor face_part(const torch::Tensor& l) { return l.narrow(1, 0, kFaceLandmarks); }
inline torch::Tensor mouth_part(const torch::Tensor& l) { return l.narrow(1, kFaceLandmarks, kMouthLandmarks); }
inline torch::Tensor pupil_part(const torch::Tensor& l) {
  return l.narrow(1, kFaceLandmarks + kMouthLandmarks, kPupilLandmarks);
}

}  // namespace mmfa::face
