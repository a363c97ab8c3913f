#include "mmfa/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>

#include "mmfa/error.hpp"
#include "mmfa/image_io.hpp"
#include "mmfa/log.hpp"

namespace mmfa::data {

namespace fs = std::filesystem;
using nlohmann::json;

int64_t Dataset::image_size() const {
  if (sequences.empty() || sequences.front().frames.empty()) throw DatasetError("dataset is empty");
  return sequences.front().frames.front().size(-1);
}

size_t Dataset::frame_count() const {
  size_t n = 0;
  for (const auto& s : sequences) n += s.frames.size();
  return n;
}

std::string meta_to_json(const face::MetaList& meta, const std::vector<std::string>& files) {
  json frames = json::array();
  for (size_t i = 0; i < meta.size(); ++i) {
    if (!meta[i]) continue;
    const auto& m = *meta[i];
    json lms = json::array();
    for (const auto& p : m.landmarks) lms.push_back({p[0], p[1]});
    json kps = json::array();
    for (const auto& p : m.keypoints) kps.push_back({p[0], p[1], p[2]});
    frames.push_back({{"file", files.at(i)},
                      {"yaw", m.yaw},
                      {"pitch", m.pitch},
                      {"roll", m.roll},
                      {"scale", m.scale},
                      {"translation", {m.translation[0], m.translation[1]}},
                      {"landmarks", lms},
                      {"keypoints", kps}});
  }
  return json{{"frames", frames}}.dump();
}

face::MetaList meta_from_json(const std::string& text, const std::vector<std::string>& files) {
  face::MetaList out(files.size());
  json doc;
  try {
    doc = json::parse(text);
    for (const auto& f : doc.at("frames")) {
      const auto name = f.at("file").get<std::string>();
      auto it = std::find(files.begin(), files.end(), name);
      if (it == files.end()) continue;
      face::FrameMeta m;
      m.yaw = f.at("yaw").get<double>();
      m.pitch = f.at("pitch").get<double>();
      m.roll = f.at("roll").get<double>();
      m.scale = f.value("scale", 1.0);
      if (f.contains("translation")) m.translation = {f["translation"][0].get<double>(), f["translation"][1].get<double>()};
      if (f.contains("landmarks")) {
        for (const auto& p : f["landmarks"]) m.landmarks.push_back({p[0].get<double>(), p[1].get<double>()});
        if (static_cast<int64_t>(m.landmarks.size()) != face::kLandmarkCount) {
          throw DatasetError("metadata for '" + name + "' has " + std::to_string(m.landmarks.size()) +
                             " landmarks, expected " + std::to_string(face::kLandmarkCount));
        }
      }
      if (f.contains("keypoints")) {
        for (const auto& p : f["keypoints"]) {
          m.keypoints.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
        }
      }
      out[static_cast<size_t>(it - files.begin())] = m;
    }
  } catch (const json::exception& e) {
    throw DatasetError(std::string("malformed metadata: ") + e.what());
  }
  return out;
}

Dataset ingest_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw DatasetError("dataset path '" + root.string() + "' is not a directory");
  std::vector<fs::path> folders;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) folders.push_back(entry.path());
  }
  std::sort(folders.begin(), folders.end());
  Dataset ds;
  int64_t size = -1;
  for (const auto& folder : folders) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(folder)) {
      if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path().filename().string());
    }
    std::sort(files.begin(), files.end());
    if (files.size() < 2) {
      log::warn("skipping sequence '" + folder.filename().string() + "': " + std::to_string(files.size()) +
                " frame(s), need at least 2");
      continue;
    }
    Sequence seq;
    seq.name = folder.filename().string();
    for (const auto& f : files) {
      torch::Tensor image;
      try {
        image = io::read_png(folder / f);
      } catch (const Error& e) {
        throw DatasetError(e.what());
      }
      if (image.size(1) != image.size(2)) throw DatasetError("frame '" + (folder / f).string() + "' is not square");
      if (size < 0) size = image.size(1);
      if (image.size(1) != size) throw DatasetError("frame '" + (folder / f).string() + "' has a different resolution");
      seq.frames.push_back(image);
    }
    const auto meta_path = folder / "meta.json";
    if (fs::exists(meta_path)) {
      std::ifstream in(meta_path);
      std::stringstream text;
      text << in.rdbuf();
      seq.meta = meta_from_json(text.str(), files);
    } else {
      seq.meta.assign(files.size(), std::nullopt);
    }
    ds.sequences.push_back(std::move(seq));
  }
  if (ds.sequences.empty()) throw DatasetError("dataset '" + root.string() + "' contains no usable sequence");
  return ds;
}

void save_dataset(const Dataset& dataset, const fs::path& root) {
  fs::create_directories(root);
  for (const auto& seq : dataset.sequences) {
    const auto folder = root / seq.name;
    fs::create_directories(folder);
    std::vector<std::string> files;
    for (size_t i = 0; i < seq.frames.size(); ++i) {
      std::ostringstream name;
      name << std::setw(4) << std::setfill('0') << i << ".png";
      files.push_back(name.str());
      io::write_png(folder / files.back(), seq.frames[i]);
    }
    std::ofstream out(folder / "meta.json");
    out << meta_to_json(seq.meta, files);
  }
}

Dataset synthesize_dataset(const synth::SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  Dataset ds;
  for (int64_t s = 0; s < config.sequences; ++s) {
    const auto identity = synth::sample_identity(rng);
    Sequence seq;
    std::ostringstream name;
    name << "seq" << std::setw(3) << std::setfill('0') << s;
    seq.name = name.str();
    for (int64_t f = 0; f < config.frames; ++f) {
      const auto pose = synth::sample_pose(rng, config);
      const auto expr = synth::sample_expression(rng);
      auto frame = synth::render(identity, pose, expr, config.image_size, config.supersample);
      seq.frames.push_back(frame.image);
      seq.meta.emplace_back(std::move(frame.meta));
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

FramePair sample_pair(const Sequence& sequence, std::mt19937_64& rng) {
  const auto n = static_cast<int64_t>(sequence.frames.size());
  if (n < 2) throw DatasetError("sequence '" + sequence.name + "' has fewer than two frames");
  const int64_t i = std::uniform_int_distribution<int64_t>(0, n - 1)(rng);
  int64_t j = std::uniform_int_distribution<int64_t>(0, n - 2)(rng);
  if (j >= i) ++j;
  FramePair pair;
  pair.source = sequence.frames[static_cast<size_t>(i)];
  pair.driving = sequence.frames[static_cast<size_t>(j)];
  if (static_cast<int64_t>(sequence.meta.size()) == n) {
    pair.source_meta = sequence.meta[static_cast<size_t>(i)];
    pair.driving_meta = sequence.meta[static_cast<size_t>(j)];
  }
  pair.source_index = i;
  pair.driving_index = j;
  return pair;
}

void AugmentRanges::validate() const {
  constexpr double kMaxRotation = 45.0 * std::numbers::pi / 180.0;
  if (!(rotation >= 0.0 && rotation <= kMaxRotation)) throw InvalidArgument("augmentation rotation must be in [0, 45] deg");
  if (!(scale_min >= 0.5 && scale_min <= scale_max && scale_max <= 2.0)) {
    throw InvalidArgument("augmentation scale range must lie within [0.5, 2]");
  }
  if (!(translation >= 0.0 && translation <= 0.5)) throw InvalidArgument("augmentation translation must be in [0, 0.5]");
}

geometry::AugmentTransform sample_transform(std::mt19937_64& rng, const AugmentRanges& ranges) {
  ranges.validate();
  auto uniform = [&](double lo, double hi) {
    return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  geometry::AugmentTransform t;
  t.angle = uniform(-ranges.rotation, ranges.rotation);
  t.scale = uniform(ranges.scale_min, ranges.scale_max);
  t.translation = {uniform(-ranges.translation, ranges.translation), uniform(-ranges.translation, ranges.translation)};
  return t;
}

Augmented augment_driving(const torch::Tensor& driving, std::mt19937_64& rng, const AugmentRanges& ranges) {
  const auto t = sample_transform(rng, ranges);
  const bool single = driving.dim() == 3;
  auto batch = single ? driving.unsqueeze(0) : driving;
  const bool identity = t.angle == 0.0 && t.scale == 1.0 && t.translation[0] == 0.0 && t.translation[1] == 0.0;
  auto out = identity ? batch.clone() : geometry::apply_augment(batch, t);
  return {single ? out.squeeze(0) : out, t};
}

face::FrameMeta augment_meta(const face::FrameMeta& meta, const geometry::AugmentTransform& transform) {
  const double c = std::cos(transform.angle);
  const double s = std::sin(transform.angle);
  auto map = [&](double x, double y) {
    return face::Point2{transform.scale * (c * x - s * y) + transform.translation[0],
                        transform.scale * (s * x + c * y) + transform.translation[1]};
  };
  face::FrameMeta out = meta;
  out.roll = meta.roll + transform.angle;
  out.scale = meta.scale * transform.scale;
  out.translation = map(meta.translation[0], meta.translation[1]);
  for (auto& p : out.landmarks) p = map(p[0], p[1]);
  for (auto& p : out.keypoints) {
    const auto q = map(p[0], p[1]);
    p = {q[0], q[1], transform.scale * p[2]};
  }
  return out;
}

}  // namespace mmfa::data
