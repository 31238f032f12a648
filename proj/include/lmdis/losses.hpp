#pragma once

#include <torch/torch.h>

#include <span>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "lmdis/heatmap.hpp"
#include "lmdis/tps.hpp"

namespace lmdis::losses {

/// Weights of the composite objective. Coordinate terms are computed on
/// landmarks divided by the map edge length, so sigma_sep is in those units.
struct LossWeights {
  double recon = 1.0;
  double conc = 0.0;
  double sep = 0.0;
  double eqv = 0.0;
  double sigma_sep = 0.06;
  double sigma_color = 0.05;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

/// Dense motion from the warped frame back to the source frame, map pixels.
/// ox, oy are [B, H, W].
struct FlowField {
  torch::Tensor ox;
  torch::Tensor oy;

  torch::Tensor magnitude() const { return ox.square() + oy.square(); }
};

/// Sum over landmarks of 2*pi*e*(var_u + var_v)^2, mean over the batch.
/// Variances must already be in normalized units.
torch::Tensor concentration_loss(const LandmarkStatistics& normalized_stats);

/// Rescales pixel variances of `stats` into edge-length units.
LandmarkStatistics normalize_statistics(const LandmarkStatistics& stats, double edge_length);

/// Gaussian repulsion over ordered pairs k != k', mean over the batch.
/// Returns 0 (with a warning) when fewer than two landmarks are given.
torch::Tensor separation_loss(const torch::Tensor& normalized_landmarks, double sigma_sep);

/// sum_k |g(l'_k) - l_k|^2 in normalized units, mean over the batch.
/// One transform per batch item.
torch::Tensor equivariance_loss(const LandmarkSet& landmarks, const LandmarkSet& warped,
                                std::span<const tps::TpsTransform> transforms);

struct FlowEquivariance {
  torch::Tensor loss;
  bool clamped = false;  ///< some warped landmark sampled the flow outside the map
};

/// Flow variant: g(x', y') = (x', y') + bilinear flow sampled at (x', y').
FlowEquivariance equivariance_loss(const LandmarkSet& landmarks, const LandmarkSet& warped,
                                   const FlowField& flow);

/// Differentiable bilinear lookup of a [B,H,W] field at [B,K,2] map-pixel
/// coordinates (edge clamped). Sets *clamped if any lookup left the map.
torch::Tensor sample_bilinear(const torch::Tensor& field, const torch::Tensor& coords,
                              bool* clamped = nullptr);

/// -sum O_n * sum_k R~_k / sum O_n per item (0 for a flow-free item), mean over batch.
/// `foreground` is [B,K,H,W] decoder-mode Gaussians without the background.
torch::Tensor flow_preference_loss(const torch::Tensor& foreground, const torch::Tensor& flow_magnitude);

/// |I - I~|_F^2 / sigma^2 + ln(2 pi sigma^2) per item, mean over the batch.
torch::Tensor reconstruction_loss(const torch::Tensor& image, const torch::Tensor& recon,
                                  double sigma_color);

struct LossTerms {
  torch::Tensor recon;
  torch::Tensor conc;
  torch::Tensor sep;
  torch::Tensor eqv;
  torch::Tensor flow_prefer;  ///< undefined unless flows were used
};

struct LossBreakdown {
  torch::Tensor total;
  double recon = 0, conc = 0, sep = 0, eqv = 0, flow_prefer = 0;
  double w_recon = 0, w_conc = 0, w_sep = 0, w_eqv = 0, w_flow_prefer = 0;

  double total_value() const { return w_recon + w_conc + w_sep + w_eqv + w_flow_prefer; }
  nlohmann::json to_json() const;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Weighted sum. The flow preference term shares the equivariance weight.
/// Throws NonFiniteLoss naming every offending term.
LossBreakdown total_loss(const LossTerms& parts, const LossWeights& weights);

}  // namespace lmdis::losses
