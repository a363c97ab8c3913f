#pragma once

// Reconstruction and keypoint-transfer metrics that need no pretrained
// network. Images are [3, H, W] (or [B, 3, H, W]) with values in [0, 1].

#include <torch/torch.h>

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmfa/dataset.hpp"
#include "mmfa/nets.hpp"

namespace mmfa::eval {

inline constexpr double kPsnrCap = 100.0;

// 10 log10(1 / MSE), capped at 100 dB when MSE < 1e-10.
double psnr(const torch::Tensor& a, const torch::Tensor& b);

// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
// C2 = 0.03^2, zero padding, averaged over channels and pixels.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

double l1(const torch::Tensor& a, const torch::Tensor& b);

// Mean Euclidean distance between matching points [..., N, d].
double keypoint_distance(const torch::Tensor& predicted, const torch::Tensor& truth);

enum class Protocol { kSameIdentity, kCrossIdentity };
Protocol parse_protocol(const std::string& name);
std::string to_string(Protocol protocol);

struct FrameRecord {
  std::string source_sequence;
  std::string driving_sequence;
  int64_t source_index = 0;
  int64_t driving_index = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double l1 = 0.0;
  // Landmarks of the output vs. the driving frame, same detector on both.
  double keypoint_distance = 0.0;
  // Landmarks of the output vs. driving ground truth metadata (when present).
  std::optional<double> keypoint_distance_truth;
};

struct EvalReport {
  Protocol protocol = Protocol::kSameIdentity;
  std::vector<FrameRecord> frames;
  double psnr = 0.0;
  double ssim = 0.0;
  double l1 = 0.0;
  double keypoint_distance = 0.0;
  std::optional<double> keypoint_distance_truth;
  int64_t sequences = 0;
  std::string config_hash;
  // Metrics that require pretrained networks; reported, never approximated.
  std::vector<std::string> unavailable{"FID", "LPIPS", "CSIM", "AED", "APD"};

  std::string to_table() const;
  std::string to_jsonl() const;
};

// Produces the output frame for (source, driving) plus their metadata.
using Reenactor = std::function<torch::Tensor(const torch::Tensor& source, const torch::Tensor& driving,
                                              const std::optional<face::FrameMeta>& source_meta,
                                              const std::optional<face::FrameMeta>& driving_meta)>;

// First frame of each sequence is the source; every other frame drives it.
// Cross identity pairs each source with every other sequence's frames
// (excluding their first frame).
EvalReport evaluate(const Reenactor& reenactor, const data::Dataset& dataset, Protocol protocol,
                    const nets::LandmarkProvider& landmarks, const std::string& config_hash = {});

}  // namespace mmfa::eval
