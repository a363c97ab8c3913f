#include "mmfa/face_model.hpp"

#include <cmath>
#include <numbers>

namespace mmfa::face {

std::vector<Point2> outline_directions(int64_t n) {
  std::vector<Point2> dirs;
  dirs.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n) -
                         0.5 * std::numbers::pi;
    dirs.push_back({std::cos(theta), std::sin(theta)});
  }
  return dirs;
}

std::vector<Point2> outline_points(const Point2& center, const std::array<double, 3>& shape, int64_t n) {
  std::vector<Point2> pts;
  pts.reserve(static_cast<size_t>(n));
  for (const auto& u : outline_directions(n)) {
    pts.push_back({center[0] + shape[0] * u[0] + shape[1] * u[1], center[1] + shape[1] * u[0] + shape[2] * u[1]});
  }
  return pts;
}

std::array<double, 3> ellipse_shape(double a, double b, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  // Rot * diag(a, b) * Rot^T
  return {a * c * c + b * s * s, (a - b) * c * s, a * s * s + b * c * c};
}

std::array<Point2, 5> pupil_points(const Point2& left, const Point2& right) {
  const Point2 mid{0.5 * (left[0] + right[0]), 0.5 * (left[1] + right[1])};
  return {left, right, mid, Point2{0.5 * (left[0] + mid[0]), 0.5 * (left[1] + mid[1])},
          Point2{0.5 * (right[0] + mid[0]), 0.5 * (right[1] + mid[1])}};
}

torch::Tensor outline_points(const torch::Tensor& centers, const torch::Tensor& shapes, int64_t n) {
  auto dirs = outline_directions(n);
  auto u = torch::empty({n, 2}, torch::kFloat64);
  for (int64_t i = 0; i < n; ++i) {
    u[i][0] = dirs[static_cast<size_t>(i)][0];
    u[i][1] = dirs[static_cast<size_t>(i)][1];
  }
  u = u.to(centers.options());
  // [B, n, 2] = u [n, 2] @ M^T [B, 2, 2]
  return torch::matmul(u.unsqueeze(0), shapes.transpose(1, 2)) + centers.unsqueeze(1);
}

torch::Tensor pupil_points(const torch::Tensor& left, const torch::Tensor& right) {
  auto mid = 0.5 * (left + right);
  return torch::stack({left, right, mid, 0.5 * (left + mid), 0.5 * (right + mid)}, 1);
}

torch::Tensor sqrtm2x2(const torch::Tensor& spd) {
  auto a = spd.select(1, 0).select(1, 0);
  auto b = spd.select(1, 0).select(1, 1);
  auto d = spd.select(1, 1).select(1, 1);
  auto det = (a * d - b * b).clamp_min(1e-12);
  auto s = det.sqrt();
  auto t = (a + d + 2.0 * s).clamp_min(1e-12).sqrt();
  auto eye = torch::eye(2, spd.options()).unsqueeze(0);
  return (spd + s.view({-1, 1, 1}) * eye) / t.view({-1, 1, 1});
}

}  // namespace mmfa::face
