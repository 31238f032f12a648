#pragma once

#include <torch/torch.h>

#include <vector>

#include "json.hpp"

namespace lmdis {

/// Mirrored max-pool / nearest-upsample network with additive conv skip links.
/// Every conv is followed by batch norm and LeakyReLU except the 1x1 head.
struct HourglassSpec {
  int in_channels = 1;
  std::vector<int> channels{32, 64, 128, 256};  ///< per resolution level, finest first
  std::vector<int> skip_convs{3, 3, 2};         ///< conv count of each level's skip link
  int out_channels = 1;
  /// -1 pools once after the stem (maps at half the input size),
  /// +1 upsamples once before the head (output at twice the input size).
  int resample = 0;

  int depth() const { return static_cast<int>(channels.size()) - 1; }
  void validate() const;
};

void to_json(nlohmann::json& j, const HourglassSpec& s);
void from_json(const nlohmann::json& j, HourglassSpec& s);

/// conv3x3 -> batch norm -> LeakyReLU(0.2)
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int in, int out);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d norm_{nullptr};
};
TORCH_MODULE(ConvBlock);

class HourglassImpl : public torch::nn::Module {
 public:
  explicit HourglassImpl(HourglassSpec spec);

  torch::Tensor forward(torch::Tensor x);

  const HourglassSpec& spec() const { return spec_; }
  torch::nn::Conv2d& head() { return head_; }
  /// Output spatial size for a square input of side `input`.
  int64_t output_size(int64_t input) const;

 private:
  HourglassSpec spec_;
  ConvBlock stem_{nullptr};
  torch::nn::ModuleList skips_;
  torch::nn::ModuleList downs_;
  torch::nn::ModuleList ups_;
  ConvBlock bottom_{nullptr};
  ConvBlock upscale_{nullptr};
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(Hourglass);

}  // namespace lmdis
