#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace lmdis {

/// What a confidence-map tensor currently holds.
enum class MapKind {
  kRawScores,       ///< unbounded detector scores, or decoder Gaussians with a ones background
  kNormalized,      ///< per-pixel distribution over the K+1 channels
  kGaussianApprox,  ///< (1/WH)-scaled isotropic Gaussians, foreground channels only
};

/// Batched per-landmark heatmaps, laid out [B, channels, H, W].
/// For detector/decoder maps the last channel is the background.
struct ConfidenceMap {
  torch::Tensor data;
  MapKind kind = MapKind::kRawScores;

  int64_t batch() const { return data.size(0); }
  int64_t channels() const { return data.size(1); }
  int64_t height() const { return data.size(2); }
  int64_t width() const { return data.size(3); }
};

/// K landmark coordinates per batch item, [B, K, 2] as (x, y) in map pixels.
/// Pixel centers sit at integers, x in [1, W] and y in [1, H].
struct LandmarkSet {
  torch::Tensor coords;
  int64_t width = 0;
  int64_t height = 0;

  int64_t count() const { return coords.size(1); }
  /// sqrt(W*H); the unit for every coordinate-based loss.
  double edge_length() const;
  torch::Tensor normalized() const;
  static LandmarkSet from_normalized(const torch::Tensor& norm, int64_t width, int64_t height);
};

/// Per-channel spatial mass and second moments of a normalized map, all [B, K].
struct LandmarkStatistics {
  torch::Tensor zeta;
  torch::Tensor var_u;
  torch::Tensor var_v;

  torch::Tensor sigma_det_sq() const { return (var_u + var_v) * 0.5; }
};

struct SoftArgmaxResult {
  LandmarkSet landmarks;
  torch::Tensor zeta;
};

enum class GaussianMode {
  kApproxDetection,  ///< (1/WH) N((u,v); (x,y), s^2 I), foreground only
  kDecoder,          ///< N((u,v); (x,y), s^2 I) plus an all-ones background channel
};

inline constexpr double kMassFloor = 1e-12;
inline constexpr double kLeakySlope = 0.2;

/// Softmax across channels at every pixel. Throws std::invalid_argument on
/// non-finite scores.
ConfidenceMap channel_softmax(const ConfidenceMap& raw);

/// Confidence-weighted mean coordinate of the first `count` channels
/// (all channels when count < 0). Throws std::domain_error when a channel's
/// mass is at or below kMassFloor.
SoftArgmaxResult soft_argmax(const ConfidenceMap& map, int64_t count = -1);

/// Axis variances of each channel's mass-normalized density about `centers`.
/// Returns {var_u, var_v}, each [B, K].
std::pair<torch::Tensor, torch::Tensor> spatial_variance(const ConfidenceMap& map,
                                                         const LandmarkSet& centers);

/// soft_argmax followed by spatial_variance over the foreground channels
/// (all but the last).
std::pair<LandmarkSet, LandmarkStatistics> landmark_statistics(const ConfidenceMap& normalized);

/// Renders one isotropic Gaussian per landmark on the landmark grid.
/// `sigma` is in map pixels and broadcasts against [B, K].
ConfidenceMap render_gaussian_maps(const LandmarkSet& landmarks, const torch::Tensor& sigma,
                                   GaussianMode mode);
ConfidenceMap render_gaussian_maps(const LandmarkSet& landmarks, double sigma, GaussianMode mode);

/// Divides decoder-mode maps by their per-pixel channel sum.
ConfidenceMap normalize_decoder_maps(const ConfidenceMap& raw);

/// Soft masks for descriptor pooling: the Gaussian approximations of the
/// foreground channels, then the background channel over its own mass.
torch::Tensor pooling_masks(const ConfidenceMap& detection, const LandmarkSet& landmarks,
                            const LandmarkStatistics& stats);

/// f_k = W_k * sum_{u,v} mask_k(u,v) F(u,v).
/// features [B,S,H,W], masks [B,K+1,H,W], projections [K+1,C,S] -> [B,K+1,C].
torch::Tensor masked_pool(const torch::Tensor& features, const torch::Tensor& masks,
                          const torch::Tensor& projections);

/// F~(u,v) = sum_k D~_k(u,v) * leaky_relu(W~_k f_k).
/// dmaps [B,K+1,H,W], descriptors [B,K+1,C], back_projections [K+1,S,C] -> [B,S,H,W].
torch::Tensor unpool(const ConfidenceMap& dmaps, const torch::Tensor& descriptors,
                     const torch::Tensor& back_projections, double negative_slope = kLeakySlope);

}  // namespace lmdis
