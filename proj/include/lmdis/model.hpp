#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <vector>

#include "json.hpp"
#include "lmdis/archive.hpp"
#include "lmdis/heatmap.hpp"
#include "lmdis/hourglass.hpp"

namespace lmdis {

/// Shape of the landmark autoencoder. Sizes are square.
struct ModelConfig {
  int image_size = 80;       ///< padded network input side
  int image_channels = 3;
  int num_landmarks = 10;    ///< K
  int descriptor_dim = 8;    ///< C
  int feature_dim = 32;      ///< S
  bool use_descriptors = true;
  std::vector<double> decoder_sigmas{0.10, 0.02};  ///< edge-length units
  std::vector<int> hourglass_channels{32, 64, 128, 256};
  std::vector<int> skip_convs{3, 3, 2};
  int map_stride = 1;        ///< 2 emits half-resolution maps (128x128 inputs)

  int map_size() const { return image_size / map_stride; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class BnState { kRunning, kFinalized };

struct EncodeResult {
  ConfidenceMap detection;         ///< D, normalized, K+1 channels
  LandmarkSet landmarks;           ///< map pixels
  LandmarkStatistics stats;        ///< pixel units
  torch::Tensor features;          ///< F [B,S,h,w]; undefined without descriptors
  torch::Tensor descriptors;       ///< [B,K+1,C]; undefined without descriptors
};

struct DecodeResult {
  torch::Tensor mean;              ///< [B,Ch,H,W] in (0,1)
  torch::Tensor stddev;            ///< [B,Ch,H,W] per-pixel deviation head
  torch::Tensor out_of_bounds;     ///< [B,K] bool, landmark outside the map
  torch::Tensor coarse_foreground; ///< R~ foreground at the widest sigma, [B,K,h,w]
};

class LandmarkAutoencoderImpl : public torch::nn::Module {
 public:
  explicit LandmarkAutoencoderImpl(ModelConfig cfg);

  EncodeResult encode(const torch::Tensor& images);
  /// `descriptors` is ignored (may be undefined) for descriptor-free models.
  DecodeResult decode(const LandmarkSet& landmarks, const torch::Tensor& descriptors);

  const ModelConfig& config() const { return cfg_; }
  BnState bn_state() const { return bn_state_; }
  void set_bn_state(BnState s) { bn_state_ = s; }

  Hourglass& detector() { return detector_; }
  Hourglass& feature_net() { return features_; }
  Hourglass& decoder() { return decoder_; }
  torch::Tensor& projections() { return projections_; }
  torch::Tensor& back_projections() { return back_projections_; }

  /// Clears batch-norm population statistics and switches them to a plain
  /// cumulative average; forward passes in train mode then accumulate.
  void reset_batchnorm_statistics();
  std::vector<torch::nn::BatchNorm2d> batchnorm_layers();

  void write_to(TensorArchive& ar, const std::string& prefix = "model/") const;
  void read_from(const TensorArchive& ar, const std::string& prefix = "model/");

 private:
  ModelConfig cfg_;
  BnState bn_state_ = BnState::kRunning;
  Hourglass detector_{nullptr};
  Hourglass features_{nullptr};
  Hourglass decoder_{nullptr};
  torch::Tensor projections_;
  torch::Tensor back_projections_;
};
TORCH_MODULE(LandmarkAutoencoder);

/// Writes the model plus its config to a self-describing archive.
void save_checkpoint(const std::filesystem::path& path, LandmarkAutoencoder& model);
LandmarkAutoencoder load_checkpoint(const std::filesystem::path& path);

/// Model config stored in an archive's metadata.
ModelConfig config_from_archive(const TensorArchive& ar);

}  // namespace lmdis
