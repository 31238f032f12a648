#pragma once

#include <Eigen/Dense>
#include "json.hpp"
#include <torch/torch.h>

#include <optional>
#include <random>

#include "lmdis/image.hpp"

namespace lmdis::tps {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 2>;

// Transforms live on the unit square: pixel center u of a W-wide raster sits
// at (u - 0.5) / W, so the image center is (0.5, 0.5) for every resolution.
double to_unit(double pixel, int64_t size);
double from_unit(double unit, int64_t size);

/// Thin-plate spline g(p) = A [p; 1] + sum_i w_i phi(|p - c_i|), phi(r) = r^2 log r.
struct TpsTransform {
  Eigen::Matrix<double, 2, 3> affine;
  Points control_points;
  Points kernel_weights;

  static TpsTransform identity();
  static TpsTransform from_affine(const Eigen::Matrix<double, 2, 3>& affine);

  Eigen::Vector2d apply(const Eigen::Vector2d& p) const;
};

/// Fits the spline taking src[i] to dst[i]. With reg = 0 the fit interpolates.
/// Throws std::domain_error("degenerate control configuration") when the
/// system is singular.
TpsTransform solve_tps(const Points& src, const Points& dst, double reg = 0.0);

Points apply_tps(const TpsTransform& t, const Points& coords);

/// Differentiable application to a [..., 2] tensor of unit-square coordinates.
torch::Tensor apply_tps(const TpsTransform& t, const torch::Tensor& coords);

struct TpsSampleConfig {
  double translate_range = 0.15;
  double rotation_std_deg = 10.0;
  double log2_scale_std = 1.25;
  double log2_scale_clip = 2.0;
  double grid_perturb_std = 0.1;
  double landmark_perturb_std = 0.05;
  int grid_size = 5;
  double landmark_mode_prob = 0.3;
  double reg = 1e-6;

  void validate() const;
};

void to_json(nlohmann::json& j, const TpsSampleConfig& c);
void from_json(const nlohmann::json& j, TpsSampleConfig& c);

enum class ControlMode { kGrid, kLandmark };

ControlMode choose_control_mode(double landmark_prob, std::mt19937_64& rng);

/// Random global affine about the image center, composed with a local
/// perturbation of either a regular grid or the given landmarks (unit square).
TpsTransform sample_random_tps(const TpsSampleConfig& cfg, ControlMode mode,
                               const std::optional<Points>& landmarks, std::mt19937_64& rng);

/// Draws the control mode with cfg.landmark_mode_prob, falling back to the
/// grid when no landmarks are supplied. Reports the chosen mode through `mode_out`.
TpsTransform sample_random_tps(const TpsSampleConfig& cfg, const std::optional<Points>& landmarks,
                               std::mt19937_64& rng, ControlMode* mode_out = nullptr);

/// Backward warp I'(p) = I(g(p)) with bilinear sampling and edge clamping.
Image warp_image(const Image& img, const TpsTransform& t);

/// Solves g(p) = q by Newton iteration from p = q. Returns nothing when the
/// iteration does not converge (folded or far-out-of-range regions).
std::optional<Eigen::Vector2d> invert_point(const TpsTransform& t, const Eigen::Vector2d& q,
                                            double tol = 1e-10, int max_iter = 50);

nlohmann::json to_json(const TpsTransform& t);
TpsTransform tps_from_json(const nlohmann::json& j);

}  // namespace lmdis::tps
