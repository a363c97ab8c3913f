#pragma once

// Lossless image interchange. Images cross this boundary as float tensors
// [3, H, W] with values in [0, 1]; files and payloads are 8-bit RGB PNG.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmfa::io {

using Bytes = std::vector<std::uint8_t>;

Bytes encode_png(const torch::Tensor& image);
torch::Tensor decode_png(std::span<const std::uint8_t> data);

torch::Tensor read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const torch::Tensor& image);

std::string base64_encode(std::span<const std::uint8_t> data);
Bytes base64_decode(std::string_view text);

// Lowercase hex SHA-256 of a file's contents.
std::string sha256_file(const std::filesystem::path& path);

// [0, 1] <-> [-1, 1] and [3, H, W] <-> [1, 3, H, W].
inline torch::Tensor to_internal(const torch::Tensor& image) { return image.unsqueeze(0) * 2.0 - 1.0; }
inline torch::Tensor to_external(const torch::Tensor& batch_image) {
  return ((batch_image.squeeze(0) + 1.0) * 0.5).clamp(0.0, 1.0);
}

}  // namespace mmfa::io
