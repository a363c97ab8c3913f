#include "mmfa/eval.hpp"

#include <cmath>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>

#include "mmfa/error.hpp"

namespace mmfa::eval {

namespace F = torch::nn::functional;

namespace {

void same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ShapeError(std::string(what) + ": inputs differ in shape");
}

torch::Tensor as_batch(const torch::Tensor& t) { return t.dim() == 3 ? t.unsqueeze(0) : t; }

torch::Tensor gaussian_window(int64_t size, double sigma) {
  auto x = torch::arange(size, torch::kFloat64) - static_cast<double>(size / 2);
  auto g = torch::exp(-x.pow(2) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return torch::outer(g, g);
}

}  // namespace

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  same_shape(a, b, "psnr");
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  same_shape(a, b, "ssim");
  if (a.dim() != 3 && a.dim() != 4) throw ShapeError("ssim expects [C, H, W] or [B, C, H, W]");
  constexpr int64_t kWindow = 11;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  auto x = as_batch(a).to(torch::kFloat64);
  auto y = as_batch(b).to(torch::kFloat64);
  const auto channels = x.size(1);
  auto w = gaussian_window(kWindow, 1.5).view({1, 1, kWindow, kWindow}).repeat({channels, 1, 1, 1});
  auto filter = [&](const torch::Tensor& t) {
    return F::conv2d(t, w, F::Conv2dFuncOptions().padding(kWindow / 2).groups(channels));
  };
  auto mu_x = filter(x);
  auto mu_y = filter(y);
  auto sxx = filter(x * x) - mu_x.pow(2);
  auto syy = filter(y * y) - mu_y.pow(2);
  auto sxy = filter(x * y) - mu_x * mu_y;
  auto map = ((2.0 * mu_x * mu_y + kC1) * (2.0 * sxy + kC2)) /
             ((mu_x.pow(2) + mu_y.pow(2) + kC1) * (sxx + syy + kC2));
  return map.mean().item<double>();
}

double l1(const torch::Tensor& a, const torch::Tensor& b) {
  same_shape(a, b, "l1");
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().mean().item<double>();
}

double keypoint_distance(const torch::Tensor& predicted, const torch::Tensor& truth) {
  same_shape(predicted, truth, "keypoint_distance");
  if (predicted.dim() < 2) throw ShapeError("keypoint_distance expects [..., N, d]");
  return torch::linalg_vector_norm(predicted.to(torch::kFloat64) - truth.to(torch::kFloat64), 2, -1)
      .mean()
      .item<double>();
}

Protocol parse_protocol(const std::string& name) {
  if (name == "same_identity" || name == "same") return Protocol::kSameIdentity;
  if (name == "cross_identity" || name == "cross") return Protocol::kCrossIdentity;
  throw InvalidArgument("protocol must be 'same_identity' or 'cross_identity', got '" + name + "'");
}

std::string to_string(Protocol protocol) {
  return protocol == Protocol::kSameIdentity ? "same_identity" : "cross_identity";
}

EvalReport evaluate(const Reenactor& reenactor, const data::Dataset& dataset, Protocol protocol,
                    const nets::LandmarkProvider& landmarks, const std::string& config_hash) {
  if (dataset.sequences.empty()) throw DatasetError("cannot evaluate on an empty dataset");
  for (const auto& seq : dataset.sequences) {
    if (seq.frames.size() < 2) throw DatasetError("sequence '" + seq.name + "' has fewer than two frames");
  }
  if (protocol == Protocol::kCrossIdentity && dataset.sequences.size() < 2) {
    throw DatasetError("cross-identity evaluation needs at least two sequences");
  }
  torch::NoGradGuard no_grad;
  EvalReport report;
  report.protocol = protocol;
  report.sequences = static_cast<int64_t>(dataset.sequences.size());
  report.config_hash = config_hash;
  auto meta_of = [](const data::Sequence& s, size_t i) -> std::optional<face::FrameMeta> {
    return i < s.meta.size() ? s.meta[i] : std::nullopt;
  };
  bool all_truth = true;
  for (const auto& src : dataset.sequences) {
    for (const auto& drv : dataset.sequences) {
      const bool same = &src == &drv;
      if ((protocol == Protocol::kSameIdentity) != same) continue;
      for (size_t j = 1; j < drv.frames.size(); ++j) {
        const auto& driving = drv.frames[j];
        auto output = reenactor(src.frames[0], driving, meta_of(src, 0), meta_of(drv, j));
        if (output.sizes() != driving.sizes()) throw ShapeError("reenactor output does not match the driving frame");
        FrameRecord r;
        r.source_sequence = src.name;
        r.driving_sequence = drv.name;
        r.source_index = 0;
        r.driving_index = static_cast<int64_t>(j);
        r.psnr = psnr(output, driving);
        r.ssim = ssim(output, driving);
        r.l1 = l1(output, driving);
        auto lm_out = landmarks.detect(output.unsqueeze(0) * 2.0 - 1.0, {meta_of(drv, j)});
        auto lm_drv = landmarks.detect(driving.unsqueeze(0) * 2.0 - 1.0, {meta_of(drv, j)});
        r.keypoint_distance = keypoint_distance(lm_out, lm_drv);
        auto m = meta_of(drv, j);
        if (m && static_cast<int64_t>(m->landmarks.size()) == face::kLandmarkCount) {
          auto truth = torch::empty({1, face::kLandmarkCount, 2}, torch::kFloat64);
          for (int64_t k = 0; k < face::kLandmarkCount; ++k) {
            truth[0][k][0] = m->landmarks[static_cast<size_t>(k)][0];
            truth[0][k][1] = m->landmarks[static_cast<size_t>(k)][1];
          }
          r.keypoint_distance_truth = keypoint_distance(lm_out.to(torch::kFloat64), truth);
        } else {
          all_truth = false;
        }
        report.frames.push_back(r);
      }
    }
  }
  const double n = static_cast<double>(report.frames.size());
  double truth_sum = 0.0;
  for (const auto& r : report.frames) {
    report.psnr += r.psnr;
    report.ssim += r.ssim;
    report.l1 += r.l1;
    report.keypoint_distance += r.keypoint_distance;
    if (r.keypoint_distance_truth) truth_sum += *r.keypoint_distance_truth;
  }
  report.psnr /= n;
  report.ssim /= n;
  report.l1 /= n;
  report.keypoint_distance /= n;
  if (all_truth) report.keypoint_distance_truth = truth_sum / n;
  return report;
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  os << "protocol: " << to_string(protocol) << "  sequences: " << sequences << "  frames: " << frames.size() << "\n";
  os << std::left << std::setw(24) << "metric" << "value\n";
  os << std::setw(24) << "PSNR (dB)" << std::fixed << std::setprecision(3) << psnr << "\n";
  os << std::setw(24) << "SSIM" << ssim << "\n";
  os << std::setw(24) << "L1" << std::setprecision(5) << l1 << "\n";
  os << std::setw(24) << "keypoint distance" << keypoint_distance << "\n";
  os << std::setw(24) << "keypoint distance (gt)";
  if (keypoint_distance_truth) {
    os << *keypoint_distance_truth << "\n";
  } else {
    os << "unavailable\n";
  }
  for (const auto& name : unavailable) os << std::setw(24) << name << "unavailable\n";
  if (!config_hash.empty()) os << "config: " << config_hash << "\n";
  return os.str();
}

std::string EvalReport::to_jsonl() const {
  using nlohmann::json;
  std::ostringstream os;
  for (const auto& r : frames) {
    json j{{"type", "frame"},
           {"protocol", to_string(protocol)},
           {"source_sequence", r.source_sequence},
           {"driving_sequence", r.driving_sequence},
           {"source_index", r.source_index},
           {"driving_index", r.driving_index},
           {"psnr", r.psnr},
           {"ssim", r.ssim},
           {"l1", r.l1},
           {"keypoint_distance", r.keypoint_distance}};
    j["keypoint_distance_truth"] = r.keypoint_distance_truth ? json(*r.keypoint_distance_truth) : json(nullptr);
    os << j.dump() << "\n";
  }
  json agg{{"type", "aggregate"},
           {"protocol", to_string(protocol)},
           {"frames", frames.size()},
           {"sequences", sequences},
           {"psnr", psnr},
           {"ssim", ssim},
           {"l1", l1},
           {"keypoint_distance", keypoint_distance},
           {"config_hash", config_hash}};
  agg["keypoint_distance_truth"] = keypoint_distance_truth ? json(*keypoint_distance_truth) : json(nullptr);
  for (const auto& name : unavailable) agg[name] = "unavailable";
  os << agg.dump() << "\n";
  return os.str();
}

}  // namespace mmfa::eval
