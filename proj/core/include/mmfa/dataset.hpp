#pragma once

// Frame sequences on disk and in memory. A dataset directory holds one
// folder per video; each folder holds PNG frames (sorted by file name) and an
// optional meta.json with per-frame pose and landmark ground truth.

#include <torch/torch.h>

#include <filesystem>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmfa/face_model.hpp"
#include "mmfa/geometry.hpp"
#include "mmfa/synthetic.hpp"

namespace mmfa::data {

struct Sequence {
  std::string name;
  std::vector<torch::Tensor> frames;  // [3, S, S] in [0, 1]
  face::MetaList meta;                // one entry per frame
};

struct Dataset {
  std::vector<Sequence> sequences;

  int64_t image_size() const;
  size_t frame_count() const;
};

// Reads every sequence folder under `root`. Folders with fewer than two
// frames are skipped with a warning. Throws DatasetError when nothing usable
// remains or a frame cannot be read.
Dataset ingest_dataset(const std::filesystem::path& root);

// Writes `dataset` in the layout read by ingest_dataset.
void save_dataset(const Dataset& dataset, const std::filesystem::path& root);

// Deterministic procedural dataset: one identity per sequence.
Dataset synthesize_dataset(const synth::SynthConfig& config);

struct FramePair {
  torch::Tensor source;   // [3, S, S]
  torch::Tensor driving;  // [3, S, S]
  std::optional<face::FrameMeta> source_meta;
  std::optional<face::FrameMeta> driving_meta;
  int64_t source_index = 0;
  int64_t driving_index = 0;
};

// Two distinct frame indices drawn uniformly.
FramePair sample_pair(const Sequence& sequence, std::mt19937_64& rng);

struct AugmentRanges {
  double rotation = 15.0 * std::numbers::pi / 180.0;  // radians, symmetric
  double scale_min = 0.85;
  double scale_max = 1.15;
  double translation = 0.1;  // symmetric, per axis

  static AugmentRanges none() { return {0.0, 1.0, 1.0, 0.0}; }
  // Caps: rotation <= 45 deg, scale within [0.5, 2], translation <= 0.5.
  void validate() const;
};

struct Augmented {
  torch::Tensor image;  // same layout as the input
  geometry::AugmentTransform transform;
};

geometry::AugmentTransform sample_transform(std::mt19937_64& rng, const AugmentRanges& ranges);

// D' = T(D) for a single image [3, H, W] or a batch [B, 3, H, W] (one T).
Augmented augment_driving(const torch::Tensor& driving, std::mt19937_64& rng, const AugmentRanges& ranges);

// Ground truth of T(D): roll and scale compose with T, points map through T.
face::FrameMeta augment_meta(const face::FrameMeta& meta, const geometry::AugmentTransform& transform);

// JSON helpers for metadata files.
std::string meta_to_json(const face::MetaList& meta, const std::vector<std::string>& files);
face::MetaList meta_from_json(const std::string& text, const std::vector<std::string>& files);

}  // namespace mmfa::data
