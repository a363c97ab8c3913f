#include "mmfa/synthetic.hpp"

#include <cmath>
#include <numbers>

#include "mmfa/error.hpp"
#include "mmfa/geometry.hpp"

namespace mmfa::synth {

namespace {

constexpr double kEyeY = -0.18;
constexpr double kEyeZ = 0.35;
constexpr double kEyeHalfWidth = 0.09;
constexpr double kEyeHalfHeight = 0.06;
constexpr double kPupilRadius = 0.045;
constexpr double kMouthY = 0.3;
constexpr double kMouthZ = 0.38;
constexpr double kNoseY = 0.05;
constexpr double kNoseZ = 0.5;
constexpr double kNoseRadius = 0.05;

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 rotation(const Pose& pose) {
  auto r = geometry::rotation_from_euler(pose.yaw, pose.pitch, pose.roll).contiguous();
  auto acc = r.accessor<double, 2>();
  Mat3 m{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m[i][j] = acc[i][j];
  return m;
}

face::Point3 posed(const Mat3& r, const Pose& pose, const face::Point3& x) {
  face::Point3 out{};
  for (int i = 0; i < 3; ++i) out[i] = pose.scale * (r[i][0] * x[0] + r[i][1] * x[1] + r[i][2] * x[2]);
  out[0] += pose.translation[0];
  out[1] += pose.translation[1];
  return out;
}

// Inside test for an ellipse with semi-axes (a, b) rotated by `angle`.
struct Ellipse {
  face::Point2 center;
  double a;
  double b;
  double c;  // cos(angle)
  double s;  // sin(angle)

  Ellipse(face::Point2 center_, double a_, double b_, double angle)
      : center(center_), a(a_), b(b_), c(std::cos(angle)), s(std::sin(angle)) {}

  bool contains(double x, double y) const {
    const double dx = x - center[0];
    const double dy = y - center[1];
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
  face::Point2 local(double x, double y) const {
    const double dx = x - center[0];
    const double dy = y - center[1];
    return {c * dx + s * dy, -s * dx + c * dy};
  }
};

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

}  // namespace

void SynthConfig::validate() const {
  if (image_size < 8) throw InvalidArgument("synthetic image_size must be at least 8");
  if (supersample < 1) throw InvalidArgument("supersample must be at least 1");
  if (sequences < 1) throw InvalidArgument("need at least one sequence");
  if (frames < 2) throw InvalidArgument("sequences need at least two frames");
  if (!(scale_min > 0.0 && scale_min <= scale_max)) throw InvalidArgument("invalid synthetic scale range");
}

std::vector<face::Point3> anchor_points(const Identity& identity) {
  const double e = identity.eye_spacing;
  return {{-e, kEyeY, kEyeZ}, {e, kEyeY, kEyeZ}, {0.0, kNoseY, kNoseZ}, {0.0, kMouthY, kMouthZ},
             {-identity.face_a, 0.0, 0.0}, {identity.face_a, 0.0, 0.0}, {0.0, -identity.face_b, 0.0},
             {0.0, identity.face_b, 0.0}};
}

Frame render(const Identity& id, const Pose& pose, const Expression& expr, int64_t image_size, int64_t supersample) {
  if (image_size < 8 || supersample < 1) throw InvalidArgument("invalid render size");
  if (!(pose.scale > 0.0)) throw InvalidArgument("render scale must be positive");
  const auto r = rotation(pose);
  const double s = pose.scale;
  const double foreshorten = 0.6 + 0.4 * std::cos(pose.yaw);
  const double cr = std::cos(pose.roll);
  const double sr = std::sin(pose.roll);
  auto rot2 = [&](double x, double y) { return face::Point2{cr * x - sr * y, sr * x + cr * y}; };
  auto xy = [](const face::Point3& p) { return face::Point2{p[0], p[1]}; };

  const Ellipse head(pose.translation, s * id.face_a, s * id.face_b, pose.roll);
  const auto nose_c = xy(posed(r, pose, {0.0, kNoseY, kNoseZ}));
  std::array<face::Point2, 2> eye_c{xy(posed(r, pose, {-id.eye_spacing, kEyeY, kEyeZ})),
                                    xy(posed(r, pose, {id.eye_spacing, kEyeY, kEyeZ}))};
  const auto gaze = rot2(0.03 * s * expr.gaze_x, 0.015 * s * expr.gaze_y);
  std::array<face::Point2, 2> pupil_c{};
  std::vector<Ellipse> eyes;
  for (int i = 0; i < 2; ++i) {
    pupil_c[i] = {eye_c[i][0] + gaze[0], eye_c[i][1] + gaze[1]};
    eyes.emplace_back(eye_c[i], s * kEyeHalfWidth * foreshorten, s * kEyeHalfHeight, pose.roll);
  }
  const auto mouth_c = xy(posed(r, pose, {0.0, kMouthY, kMouthZ}));
  const double mouth_a = s * 0.17 * (1.0 + 0.35 * expr.smile) * foreshorten;
  const double mouth_b = s * (0.03 + 0.09 * expr.open);
  const Ellipse mouth(mouth_c, mouth_a, mouth_b, pose.roll);
  const double nose_r2 = std::pow(s * kNoseRadius, 2);
  const double pupil_r2 = std::pow(s * kPupilRadius, 2);
  const double tc = std::cos(id.texture_angle);
  const double ts = std::sin(id.texture_angle);

  auto shade = [&](double x, double y) -> face::Color {
    if (!head.contains(x, y)) return id.background;
    const auto q = head.local(x, y);
    const double tex = 1.0 + 0.04 * std::sin(id.texture_frequency * (tc * q[0] + ts * q[1]) / s + id.texture_phase);
    face::Color color{id.skin[0] * tex, id.skin[1] * tex, id.skin[2] * tex};
    if (std::pow(x - nose_c[0], 2) + std::pow(y - nose_c[1], 2) <= nose_r2) {
      for (auto& ch : color) ch *= 0.85;
    }
    for (int i = 0; i < 2; ++i) {
      if (std::pow(x - pupil_c[i][0], 2) + std::pow(y - pupil_c[i][1], 2) <= pupil_r2) {
        return face::kPrototypes[static_cast<int>(face::Region::kPupil)];
      }
      if (eyes[i].contains(x, y)) return face::kPrototypes[static_cast<int>(face::Region::kEyeWhite)];
    }
    if (mouth.contains(x, y)) return face::kPrototypes[static_cast<int>(face::Region::kMouth)];
    return color;
  };

  auto image = torch::zeros({3, image_size, image_size}, torch::kFloat32);
  auto acc = image.accessor<float, 3>();
  const double step = 2.0 / static_cast<double>(image_size - 1);
  const double n = static_cast<double>(supersample);
  for (int64_t i = 0; i < image_size; ++i) {
    for (int64_t j = 0; j < image_size; ++j) {
      std::array<double, 3> sum{0.0, 0.0, 0.0};
      for (int64_t a = 0; a < supersample; ++a) {
        for (int64_t b = 0; b < supersample; ++b) {
          const double y = geometry::to_normalized(static_cast<double>(i), image_size) + step * ((a + 0.5) / n - 0.5);
          const double x = geometry::to_normalized(static_cast<double>(j), image_size) + step * ((b + 0.5) / n - 0.5);
          const auto c = shade(x, y);
          for (int ch = 0; ch < 3; ++ch) sum[ch] += c[ch];
        }
      }
      for (int ch = 0; ch < 3; ++ch) acc[ch][i][j] = static_cast<float>(sum[ch] / (n * n));
    }
  }

  Frame frame;
  frame.image = image.clamp(0.0, 1.0);
  auto& meta = frame.meta;
  meta.yaw = pose.yaw;
  meta.pitch = pose.pitch;
  meta.roll = pose.roll;
  meta.scale = pose.scale;
  meta.translation = pose.translation;
  meta.landmarks = face::outline_points(pose.translation, face::ellipse_shape(s * id.face_a, s * id.face_b, pose.roll),
                                        face::kFaceLandmarks);
  auto mouth_pts = face::outline_points(mouth_c, face::ellipse_shape(mouth_a, mouth_b, pose.roll), face::kMouthLandmarks);
  meta.landmarks.insert(meta.landmarks.end(), mouth_pts.begin(), mouth_pts.end());
  for (const auto& p : face::pupil_points(pupil_c[0], pupil_c[1])) meta.landmarks.push_back(p);
  for (const auto& x : anchor_points(id)) meta.keypoints.push_back(posed(r, pose, x));
  return frame;
}

Identity sample_identity(std::mt19937_64& rng) {
  Identity id;
  id.face_a = uniform(rng, 0.5, 0.58);
  id.face_b = uniform(rng, 0.66, 0.74);
  id.eye_spacing = uniform(rng, 0.17, 0.21);
  for (int c = 0; c < 3; ++c) {
    id.skin[c] = face::kPrototypes[1][c] + uniform(rng, -0.03, 0.03);
    id.background[c] = face::kPrototypes[0][c] + uniform(rng, -0.02, 0.02);
  }
  id.texture_frequency = uniform(rng, 6.0, 12.0);
  id.texture_angle = uniform(rng, 0.0, std::numbers::pi);
  id.texture_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  return id;
}

Pose sample_pose(std::mt19937_64& rng, const SynthConfig& config) {
  Pose p;
  p.yaw = uniform(rng, -config.yaw_range, config.yaw_range);
  p.pitch = uniform(rng, -config.pitch_range, config.pitch_range);
  p.roll = uniform(rng, -config.roll_range, config.roll_range);
  p.scale = uniform(rng, config.scale_min, config.scale_max);
  p.translation = {uniform(rng, -config.translation_range, config.translation_range),
                   uniform(rng, -config.translation_range, config.translation_range)};
  return p;
}

Expression sample_expression(std::mt19937_64& rng) {
  return {uniform(rng, -1.0, 1.0), uniform(rng, 0.0, 1.0), uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0)};
}

}  // namespace mmfa::synth
