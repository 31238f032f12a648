#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace lmdis {

/// Interleaved H x W x C raster with values nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c), pixels(static_cast<size_t>(w) * h * c, fill) {}

  bool empty() const { return pixels.empty(); }
  float& at(int x, int y, int c = 0) { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
  float at(int x, int y, int c = 0) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  /// [C, H, W] float32 copy.
  torch::Tensor to_tensor() const;
  /// Accepts [C, H, W] or [1, C, H, W].
  static Image from_tensor(const torch::Tensor& t);
};

/// Stacks same-sized images into a [B, C, H, W] float32 batch.
torch::Tensor stack_images(std::span<const Image> images);

/// PNG bytes with values clamped to [0,1] and quantized to 8 bits.
std::vector<uint8_t> encode_png(const Image& img);
/// Decodes any format OpenCV reads. Throws std::runtime_error on failure.
Image decode_image(std::span<const uint8_t> bytes, int channels = 0);
Image read_image(const std::filesystem::path& path, int channels = 0);
void write_png(const std::filesystem::path& path, const Image& img);

/// Nearest-neighbour upscale by `scale` with a colored dot per point.
/// Points are 1-based pixel coordinates of `img`.
Image draw_landmarks(const Image& img, const std::vector<std::array<double, 2>>& points, int scale = 4);
/// Area averaging when shrinking, bilinear when enlarging.
Image resize(const Image& img, int width, int height);
/// Places same-height images side by side (converted to 3 channels).
Image hconcat(const std::vector<Image>& images);

std::string base64_encode(std::span<const uint8_t> bytes);
/// Throws std::invalid_argument on malformed input.
std::vector<uint8_t> base64_decode(const std::string& text);

}  // namespace lmdis
