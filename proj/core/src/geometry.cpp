#include "mmfa/geometry.hpp"

#include <cmath>
#include <sstream>

#include "mmfa/error.hpp"

namespace mmfa::geometry {

namespace F = torch::nn::functional;

namespace {

std::string shape_of(const torch::Tensor& t) {
  std::ostringstream os;
  os << t.sizes();
  return os.str();
}

// [B] angle tensors -> [B, 3, 3] rotations about a single axis.
torch::Tensor axis_rotation(const torch::Tensor& angle, int axis) {
  auto c = torch::cos(angle);
  auto s = torch::sin(angle);
  auto one = torch::ones_like(angle);
  auto zero = torch::zeros_like(angle);
  std::vector<torch::Tensor> rows;
  switch (axis) {
    case 0:  // x
      rows = {torch::stack({one, zero, zero}, -1), torch::stack({zero, c, -s}, -1),
              torch::stack({zero, s, c}, -1)};
      break;
    case 1:  // y
      rows = {torch::stack({c, zero, s}, -1), torch::stack({zero, one, zero}, -1),
              torch::stack({-s, zero, c}, -1)};
      break;
    default:  // z
      rows = {torch::stack({c, -s, zero}, -1), torch::stack({s, c, zero}, -1),
              torch::stack({zero, zero, one}, -1)};
      break;
  }
  return torch::stack(rows, -2);
}

// Per-transform linear part [B, 2, 2] and offset [B, 2].
std::pair<torch::Tensor, torch::Tensor> transform_tensors(std::span<const AugmentTransform> transforms,
                                                          bool inverse, torch::TensorOptions options) {
  const auto n = static_cast<int64_t>(transforms.size());
  auto linear = torch::empty({n, 2, 2}, torch::kFloat64);
  auto offset = torch::empty({n, 2}, torch::kFloat64);
  auto la = linear.accessor<double, 3>();
  auto oa = offset.accessor<double, 2>();
  for (int64_t i = 0; i < n; ++i) {
    const auto& t = transforms[static_cast<size_t>(i)];
    if (!t.invertible()) {
      throw InvalidArgument("augment transform is not invertible (scale == 0)");
    }
    const double c = std::cos(t.angle);
    const double s = std::sin(t.angle);
    if (!inverse) {
      la[i][0][0] = t.scale * c;
      la[i][0][1] = -t.scale * s;
      la[i][1][0] = t.scale * s;
      la[i][1][1] = t.scale * c;
      oa[i][0] = t.translation[0];
      oa[i][1] = t.translation[1];
    } else {
      // T^-1(q) = Rot(-angle) (q - tr) / scale
      const double k = 1.0 / t.scale;
      la[i][0][0] = k * c;
      la[i][0][1] = k * s;
      la[i][1][0] = -k * s;
      la[i][1][1] = k * c;
      oa[i][0] = -(la[i][0][0] * t.translation[0] + la[i][0][1] * t.translation[1]);
      oa[i][1] = -(la[i][1][0] * t.translation[0] + la[i][1][1] * t.translation[1]);
    }
  }
  return {linear.to(options), offset.to(options)};
}

torch::Tensor map_points(const torch::Tensor& points, std::span<const AugmentTransform> transforms,
                         bool inverse) {
  if (points.size(-1) != 2) {
    throw ShapeError("augment points expect a trailing axis of size 2, got " + shape_of(points));
  }
  const auto batch = points.size(0);
  if (static_cast<int64_t>(transforms.size()) != batch) {
    throw ShapeError("one augment transform per batch element is required");
  }
  auto [linear, offset] = transform_tensors(transforms, inverse, points.options());
  auto flat = points.reshape({batch, -1, 2});
  auto mapped = torch::matmul(flat, linear.transpose(1, 2)) + offset.unsqueeze(1);
  return mapped.reshape(points.sizes());
}

}  // namespace

torch::Tensor rotation_from_euler(const torch::Tensor& yaw, const torch::Tensor& pitch,
                                  const torch::Tensor& roll) {
  return torch::matmul(torch::matmul(axis_rotation(roll, 2), axis_rotation(yaw, 1)),
                       axis_rotation(pitch, 0));
}

torch::Tensor rotation_from_euler(double yaw, double pitch, double roll, torch::TensorOptions options) {
  auto wide = torch::TensorOptions().dtype(torch::kFloat64);
  auto r = rotation_from_euler(torch::tensor({yaw}, wide), torch::tensor({pitch}, wide),
                               torch::tensor({roll}, wide));
  return r.squeeze(0).to(options);
}

std::array<torch::Tensor, 3> euler_from_rotation(const torch::Tensor& rotation) {
  if (rotation.dim() != 3 || rotation.size(1) != 3 || rotation.size(2) != 3) {
    throw ShapeError("rotation must be [B, 3, 3], got " + shape_of(rotation));
  }
  auto at = [&](int i, int j) { return rotation.select(1, i).select(1, j); };
  auto yaw = torch::asin(-at(2, 0).clamp(-1.0, 1.0));
  auto pitch = torch::atan2(at(2, 1), at(2, 2));
  auto roll = torch::atan2(at(1, 0), at(0, 0));
  return {yaw, pitch, roll};
}

void check_rotation(const torch::Tensor& rotation, double tolerance) {
  if (rotation.dim() != 3 || rotation.size(1) != 3 || rotation.size(2) != 3) {
    throw ShapeError("rotation must be [B, 3, 3], got " + shape_of(rotation));
  }
  torch::NoGradGuard no_grad;
  auto r = rotation.to(torch::kFloat64);
  auto eye = torch::eye(3, r.options()).expand_as(r);
  const double ortho = (torch::matmul(r.transpose(1, 2), r) - eye).abs().max().item<double>();
  const double det = (torch::linalg_det(r) - 1.0).abs().max().item<double>();
  if (!(ortho <= tolerance) || !(det <= tolerance)) {
    std::ostringstream os;
    os << "rotation is not orthonormal with det +1 (|R^T R - I|=" << ortho << ", |det - 1|=" << det << ")";
    throw InvalidArgument(os.str());
  }
}

KeypointSet compose_keypoints(const KeypointSet& canonical, const MotionParams& motion) {
  const auto& pc = canonical.points;
  if (pc.dim() != 3 || pc.size(2) != 3) {
    throw ShapeError("canonical keypoints must be [B, K, 3], got " + shape_of(pc));
  }
  const auto batch = pc.size(0);
  check_rotation(motion.rotation);
  if (motion.rotation.size(0) != batch) throw ShapeError("rotation batch does not match keypoints");
  if (motion.translation.dim() != 2 || motion.translation.size(0) != batch || motion.translation.size(1) != 2) {
    throw ShapeError("translation must be [B, 2], got " + shape_of(motion.translation));
  }
  if (motion.scale.dim() != 1 || motion.scale.size(0) != batch) {
    throw ShapeError("scale must be [B], got " + shape_of(motion.scale));
  }
  {
    torch::NoGradGuard no_grad;
    if (!(motion.scale.min().item<double>() > 0.0)) throw InvalidArgument("scale f must be positive");
  }
  auto local = pc;
  if (motion.deformation.defined()) {
    if (motion.deformation.sizes() != pc.sizes()) {
      throw ShapeError("deformation must match canonical keypoints, got " + shape_of(motion.deformation));
    }
    local = pc + motion.deformation;
  }
  auto rotated = torch::matmul(local, motion.rotation.transpose(1, 2)) * motion.scale.view({batch, 1, 1});
  auto lifted = torch::cat({motion.translation, torch::zeros({batch, 1}, motion.translation.options())}, 1);
  return {rotated + lifted.unsqueeze(1)};
}

torch::Tensor project_orthographic(const KeypointSet& keypoints) {
  return keypoints.points.narrow(-1, 0, 2);
}

torch::Tensor pairwise_distances(const torch::Tensor& points) {
  auto diff = points.unsqueeze(2) - points.unsqueeze(1);
  return diff.pow(2).sum(-1).sqrt();
}

torch::Tensor identity_grid(std::span<const int64_t> sizes, torch::TensorOptions options) {
  if (sizes.size() != 2 && sizes.size() != 3) throw ShapeError("identity grid needs 2 or 3 spatial sizes");
  std::vector<torch::Tensor> axes;
  for (auto n : sizes) axes.push_back(n > 1 ? torch::linspace(-1.0, 1.0, n, options) : torch::zeros({1}, options));
  auto mesh = torch::meshgrid(axes, "ij");
  // grid_sample wants (x, y[, z]) ordering, i.e. reversed spatial axes.
  std::vector<torch::Tensor> coords(mesh.rbegin(), mesh.rend());
  return torch::stack(coords, -1);
}

torch::Tensor sparse_motion(const torch::Tensor& grid, const torch::Tensor& source, const torch::Tensor& driving,
                            const torch::Tensor& jacobian) {
  const auto d = grid.size(-1);
  if (source.dim() != 3 || source.size(-1) != d || driving.sizes() != source.sizes()) {
    throw ShapeError("sparse motion keypoints must be [B, K, " + std::to_string(d) + "]");
  }
  const auto batch = source.size(0);
  const auto k = source.size(1);
  torch::Tensor jac = jacobian;
  if (jac.dim() == 3) jac = jac.unsqueeze(1).expand({batch, k, d, d});
  if (jac.dim() != 4 || jac.size(0) != batch || jac.size(1) != k || jac.size(2) != d || jac.size(3) != d) {
    throw ShapeError("jacobian must be [B, K, d, d] or [B, d, d], got " + shape_of(jacobian));
  }
  auto spatial = grid.sizes().vec();
  spatial.pop_back();
  auto z = grid.reshape({1, 1, -1, d});
  auto rel = z - driving.unsqueeze(2);
  auto moved = torch::matmul(rel, jac.transpose(-1, -2)) + source.unsqueeze(2);
  std::vector<int64_t> out{batch, k};
  out.insert(out.end(), spatial.begin(), spatial.end());
  out.push_back(d);
  return moved.reshape(out);
}

FlowField dense_flow(const torch::Tensor& candidates, const torch::Tensor& masks) {
  auto expected = candidates.sizes().vec();
  expected.pop_back();
  if (masks.sizes().vec() != expected) {
    throw ShapeError("mask stack " + shape_of(masks) + " does not match candidates " + shape_of(candidates));
  }
  {
    torch::NoGradGuard no_grad;
    const double deviation = (masks.sum(1) - 1.0).abs().max().item<double>();
    if (!(deviation <= kMaskSumTolerance)) {
      throw InvalidArgument("mask stack must sum to 1 per pixel (max deviation " + std::to_string(deviation) + ")");
    }
    if (masks.min().item<double>() < -kMaskSumTolerance) throw InvalidArgument("mask stack must be nonnegative");
  }
  return {(candidates * masks.unsqueeze(-1)).sum(1), masks, std::nullopt};
}

torch::Tensor warp(const torch::Tensor& source, const torch::Tensor& grid) {
  const auto rank = source.dim() - 2;
  if (rank != 2 && rank != 3) throw ShapeError("warp source must be [B, C, H, W] or [B, C, D, H, W]");
  if (grid.dim() != source.dim() || grid.size(-1) != rank || grid.size(0) != source.size(0)) {
    throw ShapeError("flow grid " + shape_of(grid) + " does not fit source " + shape_of(source));
  }
  return F::grid_sample(source, grid,
                        F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(true));
}

torch::Tensor warp(const torch::Tensor& source, const FlowField& flow) { return warp(source, flow.grid); }

torch::Tensor warp(const torch::Tensor& source, const torch::Tensor& grid, std::span<const int64_t> output_size) {
  auto spatial = grid.sizes().vec();
  spatial.erase(spatial.begin());
  spatial.pop_back();
  if (spatial != std::vector<int64_t>(output_size.begin(), output_size.end())) {
    throw ShapeError("flow grid " + shape_of(grid) + " does not cover the requested output size");
  }
  return warp(source, grid);
}

double to_normalized(double pixel, int64_t size) {
  return size > 1 ? 2.0 * pixel / static_cast<double>(size - 1) - 1.0 : 0.0;
}

double to_pixel(double normalized, int64_t size) {
  return (normalized + 1.0) * 0.5 * static_cast<double>(size - 1);
}

torch::Tensor augment_points(const torch::Tensor& points, const AugmentTransform& transform) {
  std::vector<AugmentTransform> ts(1, transform);
  return map_points(points.unsqueeze(0), ts, false).squeeze(0);
}

torch::Tensor invert_augment_points(const torch::Tensor& points, const AugmentTransform& transform) {
  std::vector<AugmentTransform> ts(1, transform);
  return map_points(points.unsqueeze(0), ts, true).squeeze(0);
}

torch::Tensor augment_points(const torch::Tensor& points, std::span<const AugmentTransform> transforms) {
  return map_points(points, transforms, false);
}

torch::Tensor invert_augment_points(const torch::Tensor& points, std::span<const AugmentTransform> transforms) {
  return map_points(points, transforms, true);
}

torch::Tensor apply_augment(const torch::Tensor& image, const AugmentTransform& transform) {
  std::vector<AugmentTransform> ts(static_cast<size_t>(image.size(0)), transform);
  return apply_augment(image, ts);
}

torch::Tensor apply_augment(const torch::Tensor& image, std::span<const AugmentTransform> transforms) {
  if (image.dim() != 4) throw ShapeError("apply_augment expects [B, C, H, W], got " + shape_of(image));
  const auto batch = image.size(0);
  const std::array<int64_t, 2> hw{image.size(2), image.size(3)};
  auto base = identity_grid(hw, image.options()).unsqueeze(0).expand({batch, hw[0], hw[1], 2});
  auto grid = invert_augment_points(base.contiguous(), transforms);
  return warp(image, grid);
}

}  // namespace mmfa::geometry
