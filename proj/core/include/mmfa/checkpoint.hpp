#pragma once

// Versioned single-file checkpoint container.
//
// Layout (little endian):
//   "MMFACKPT"  u32 version  u32 section_count
//   per section: u32 name_len, name, u64 payload_len, payload, u32 crc32(payload)
//
// Sections written by save_checkpoint: "config" (RunConfig JSON), "counters",
// "rng", "model", "optim.generator", "optim.discriminator" and, once the VAE
// has been trained, "vae", "optim.vae", "optim.vae_discriminator".

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mmfa/pipeline.hpp"

namespace mmfa::checkpoint {

inline constexpr char kMagic[8] = {'M', 'M', 'F', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

using Bytes = std::vector<std::uint8_t>;

// Raw sections of a container, in file order.
class Container {
 public:
  void set(const std::string& name, Bytes payload);
  bool has(const std::string& name) const;
  const Bytes& get(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }

  Bytes serialize() const;
  // Throws CheckpointError on bad magic, version mismatch, truncation or a
  // checksum failure.
  static Container parse(const Bytes& data);

  void write(const std::filesystem::path& path) const;
  static Container read(const std::filesystem::path& path);

 private:
  std::vector<std::string> order_;
  std::map<std::string, Bytes> sections_;
};

// Named tensors <-> section payload (dtype, shape, raw bytes).
Bytes encode_tensors(const std::vector<std::pair<std::string, torch::Tensor>>& tensors);
std::vector<std::pair<std::string, torch::Tensor>> decode_tensors(const Bytes& payload);

// Parameters and buffers of a module, by qualified name.
Bytes encode_module(const torch::nn::Module& module);
// Copies stored values into `module`; every parameter and buffer must be
// present with a matching shape.
void decode_module(const Bytes& payload, torch::nn::Module& module);

Bytes encode_adam(torch::optim::Adam& optimizer);
void decode_adam(const Bytes& payload, torch::optim::Adam& optimizer);

void save_checkpoint(const pipeline::TrainingState& state, const std::filesystem::path& path);

// Rebuilds a training state from a checkpoint, optimizer and RNG included.
std::unique_ptr<pipeline::TrainingState> load_checkpoint(const std::filesystem::path& path);

// Only the run configuration stored in a checkpoint.
pipeline::RunConfig read_config(const std::filesystem::path& path);

// True when the checkpoint carries trained VAE weights.
bool has_vae(const std::filesystem::path& path);

// Loads just the VAE section into `vae`.
void load_vae(const std::filesystem::path& path, vae::ExpressionVae& vae);

}  // namespace mmfa::checkpoint
