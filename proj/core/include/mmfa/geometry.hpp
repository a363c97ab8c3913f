#pragma once

// Keypoint algebra shared by training and inference: decomposed motion
// composition, orthographic projection, sparse affine motions, dense flow and
// backward warping. All tensors are batch-first and live in normalized
// coordinates: x and y span [-1, 1] across the image (x to the right, y down),
// z is depth. Grids follow the grid_sample convention, the last axis holds
// (x, y) for images and (x, y, z) for volumes.

#include <torch/torch.h>

#include <array>
#include <optional>
#include <span>
#include <vector>

namespace mmfa::geometry {

// Orthonormality tolerance applied to every rotation entering the algebra.
inline constexpr double kRotationTolerance = 1e-5;
// Allowed deviation of a mask stack's per-pixel sum from one.
inline constexpr double kMaskSumTolerance = 1e-4;

// K ordered 3D points, [B, K, 3].
struct KeypointSet {
  torch::Tensor points;

  int64_t batch() const { return points.size(0); }
  int64_t count() const { return points.size(1); }
};

// Decomposed motion of one frame (batched): rotation [B, 3, 3], translation
// [B, 2], scale [B], deformation [B, K, 3].
struct MotionParams {
  torch::Tensor rotation;
  torch::Tensor translation;
  torch::Tensor scale;
  torch::Tensor deformation;
};

// Dense backward flow. `grid` is [B, (D,) H, W, dims] sample coordinates into
// the source; `masks` is the [B, K+1, (D,) H, W] softmax stack that produced
// it; `occlusion` is an optional [B, 1, H, W] map in [0, 1].
struct FlowField {
  torch::Tensor grid;
  torch::Tensor masks;
  std::optional<torch::Tensor> occlusion;
};

// In-plane similarity transform T(p) = scale * Rot(angle) * p + translation.
struct AugmentTransform {
  double angle = 0.0;
  double scale = 1.0;
  std::array<double, 2> translation{0.0, 0.0};

  static AugmentTransform identity() { return {}; }
  bool invertible() const { return scale != 0.0; }
};

// R = Rz(roll) * Ry(yaw) * Rx(pitch). Batched angles [B] give [B, 3, 3].
torch::Tensor rotation_from_euler(const torch::Tensor& yaw, const torch::Tensor& pitch,
                                  const torch::Tensor& roll);
torch::Tensor rotation_from_euler(double yaw, double pitch, double roll,
                                  torch::TensorOptions options = torch::kFloat64);

// Inverse of rotation_from_euler for |yaw| < pi/2: [B, 3, 3] -> (yaw, pitch,
// roll), each [B].
std::array<torch::Tensor, 3> euler_from_rotation(const torch::Tensor& rotation);

// Throws InvalidArgument unless every rotation is orthonormal with det +1.
void check_rotation(const torch::Tensor& rotation, double tolerance = kRotationTolerance);

// p = R * f * (p_C + delta) + [t, 0], per keypoint.
KeypointSet compose_keypoints(const KeypointSet& canonical, const MotionParams& motion);

// Drops depth: [B, K, 3] -> [B, K, 2].
torch::Tensor project_orthographic(const KeypointSet& keypoints);

// Pairwise Euclidean distances [B, K, K].
torch::Tensor pairwise_distances(const torch::Tensor& points);

// Identity sampling grid with align_corners semantics. `sizes` is (H, W) or
// (D, H, W); the result is [sizes..., rank].
torch::Tensor identity_grid(std::span<const int64_t> sizes, torch::TensorOptions options);

// A^k(z) = p_S^k + J^k (z - p_D^k) for every grid point.
// grid [S..., d], source/driving [B, K, d], jacobian [B, K, d, d] or [B, d, d].
// Returns [B, K, S..., d].
torch::Tensor sparse_motion(const torch::Tensor& grid, const torch::Tensor& source,
                            const torch::Tensor& driving, const torch::Tensor& jacobian);

// Per-pixel convex combination of candidate flows [B, K+1, S..., d] with the
// mask stack [B, K+1, S...]. Candidate 0 is the identity (background) flow.
FlowField dense_flow(const torch::Tensor& candidates, const torch::Tensor& masks);

// Backward warp: output[p] = source[grid[p]], bilinear for [B, C, H, W],
// trilinear for [B, C, D, H, W], border clamping outside [-1, 1].
torch::Tensor warp(const torch::Tensor& source, const torch::Tensor& grid);
torch::Tensor warp(const torch::Tensor& source, const FlowField& flow);
// Same, additionally checking that the grid covers `output_size` (spatial).
torch::Tensor warp(const torch::Tensor& source, const torch::Tensor& grid,
                   std::span<const int64_t> output_size);

// Pixel index <-> normalized coordinate for an axis of `size` samples.
double to_normalized(double pixel, int64_t size);
double to_pixel(double normalized, int64_t size);

// Points [..., 2] mapped through T, and through T^-1.
torch::Tensor augment_points(const torch::Tensor& points, const AugmentTransform& transform);
torch::Tensor invert_augment_points(const torch::Tensor& points, const AugmentTransform& transform);
// Batched form: one transform per leading index.
torch::Tensor augment_points(const torch::Tensor& points, std::span<const AugmentTransform> transforms);
torch::Tensor invert_augment_points(const torch::Tensor& points,
                                    std::span<const AugmentTransform> transforms);

// Image [B, C, H, W] resampled so that out(T(p)) = in(p).
torch::Tensor apply_augment(const torch::Tensor& image, const AugmentTransform& transform);
torch::Tensor apply_augment(const torch::Tensor& image, std::span<const AugmentTransform> transforms);

}  // namespace mmfa::geometry
