#include "lmdis/heatmap.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace lmdis {
namespace {

torch::Tensor axis_coords(int64_t n, const torch::Tensor& like) {
  return torch::arange(1, n + 1, like.options());
}

void require_rank4(const torch::Tensor& t, const char* what) {
  if (!t.defined() || t.dim() != 4) {
    throw std::invalid_argument(std::string(what) + ": expected a [B,C,H,W] tensor");
  }
}

}  // namespace

double LandmarkSet::edge_length() const {
  return std::sqrt(static_cast<double>(width) * static_cast<double>(height));
}

torch::Tensor LandmarkSet::normalized() const { return coords / edge_length(); }

LandmarkSet LandmarkSet::from_normalized(const torch::Tensor& norm, int64_t width, int64_t height) {
  LandmarkSet out{torch::Tensor(), width, height};
  out.coords = norm * out.edge_length();
  return out;
}

ConfidenceMap channel_softmax(const ConfidenceMap& raw) {
  require_rank4(raw.data, "channel_softmax");
  if (!torch::isfinite(raw.data).all().item<bool>()) {
    throw std::invalid_argument("channel_softmax: non-finite raw score");
  }
  return {torch::softmax(raw.data, 1), MapKind::kNormalized};
}

SoftArgmaxResult soft_argmax(const ConfidenceMap& map, int64_t count) {
  require_rank4(map.data, "soft_argmax");
  const int64_t k = count < 0 ? map.channels() : count;
  if (k > map.channels()) {
    throw std::invalid_argument("soft_argmax: more channels requested than present");
  }
  const auto dens = map.data.narrow(1, 0, k);
  const auto zeta = dens.sum({2, 3});
  if ((zeta <= kMassFloor).any().item<bool>()) {
    throw std::domain_error("soft_argmax: degenerate channel mass");
  }
  const auto u = axis_coords(map.width(), dens);
  const auto v = axis_coords(map.height(), dens);
  const auto x = (dens.sum(2) * u).sum(-1) / zeta;
  const auto y = (dens.sum(3) * v).sum(-1) / zeta;
  return {LandmarkSet{torch::stack({x, y}, -1), map.width(), map.height()}, zeta};
}

std::pair<torch::Tensor, torch::Tensor> spatial_variance(const ConfidenceMap& map,
                                                         const LandmarkSet& centers) {
  require_rank4(map.data, "spatial_variance");
  const int64_t k = centers.count();
  const auto dens = map.data.narrow(1, 0, k);
  const auto zeta = dens.sum({2, 3});
  if ((zeta <= kMassFloor).any().item<bool>()) {
    throw std::domain_error("spatial_variance: degenerate channel mass");
  }
  const auto du = axis_coords(map.width(), dens) - centers.coords.select(-1, 0).unsqueeze(-1);
  const auto dv = axis_coords(map.height(), dens) - centers.coords.select(-1, 1).unsqueeze(-1);
  const auto var_u = (dens.sum(2) * du.square()).sum(-1) / zeta;
  const auto var_v = (dens.sum(3) * dv.square()).sum(-1) / zeta;
  return {var_u, var_v};
}

std::pair<LandmarkSet, LandmarkStatistics> landmark_statistics(const ConfidenceMap& normalized) {
  auto [landmarks, zeta] = soft_argmax(normalized, normalized.channels() - 1);
  auto [var_u, var_v] = spatial_variance(normalized, landmarks);
  return {std::move(landmarks), LandmarkStatistics{zeta, var_u, var_v}};
}

ConfidenceMap render_gaussian_maps(const LandmarkSet& landmarks, const torch::Tensor& sigma,
                                   GaussianMode mode) {
  if ((sigma <= 0).any().item<bool>()) {
    throw std::invalid_argument("render_gaussian_maps: sigma must be positive");
  }
  const auto& c = landmarks.coords;
  const auto s = sigma.to(c.options()).expand({c.size(0), c.size(1)}).unsqueeze(-1);
  const auto u = axis_coords(landmarks.width, c);
  const auto v = axis_coords(landmarks.height, c);
  const auto gx = torch::exp(-(u - c.select(-1, 0).unsqueeze(-1)).square() / (2 * s.square()));
  const auto gy = torch::exp(-(v - c.select(-1, 1).unsqueeze(-1)).square() / (2 * s.square()));
  const auto peak = (2 * std::numbers::pi * s.square()).unsqueeze(-1);
  auto dens = gy.unsqueeze(-1) * gx.unsqueeze(-2) / peak;
  if (mode == GaussianMode::kApproxDetection) {
    const double area = static_cast<double>(landmarks.width * landmarks.height);
    return {dens / area, MapKind::kGaussianApprox};
  }
  auto background = torch::ones_like(dens.narrow(1, 0, 1));
  return {torch::cat({dens, background}, 1), MapKind::kRawScores};
}

ConfidenceMap render_gaussian_maps(const LandmarkSet& landmarks, double sigma, GaussianMode mode) {
  return render_gaussian_maps(landmarks, torch::full({1}, sigma, landmarks.coords.options()), mode);
}

ConfidenceMap normalize_decoder_maps(const ConfidenceMap& raw) {
  require_rank4(raw.data, "normalize_decoder_maps");
  return {raw.data / raw.data.sum(1, true), MapKind::kNormalized};
}

torch::Tensor pooling_masks(const ConfidenceMap& detection, const LandmarkSet& landmarks,
                            const LandmarkStatistics& stats) {
  const auto sigma = stats.sigma_det_sq().clamp_min(kMassFloor).sqrt();
  const auto fg = render_gaussian_maps(landmarks, sigma, GaussianMode::kApproxDetection).data;
  const auto bg = detection.data.narrow(1, detection.channels() - 1, 1);
  const auto bg_mass = bg.sum({2, 3}, true).clamp_min(kMassFloor);
  return torch::cat({fg, bg / bg_mass}, 1);
}

torch::Tensor masked_pool(const torch::Tensor& features, const torch::Tensor& masks,
                          const torch::Tensor& projections) {
  require_rank4(features, "masked_pool features");
  require_rank4(masks, "masked_pool masks");
  if (features.size(0) != masks.size(0) || features.size(2) != masks.size(2) ||
      features.size(3) != masks.size(3) || projections.dim() != 3 ||
      projections.size(0) != masks.size(1) || projections.size(2) != features.size(1)) {
    throw std::invalid_argument("masked_pool: shape mismatch");
  }
  const auto pooled = torch::einsum("bkhw,bshw->bks", {masks, features});
  return torch::einsum("kcs,bks->bkc", {projections, pooled});
}

torch::Tensor unpool(const ConfidenceMap& dmaps, const torch::Tensor& descriptors,
                     const torch::Tensor& back_projections, double negative_slope) {
  require_rank4(dmaps.data, "unpool");
  if (descriptors.dim() != 3 || back_projections.dim() != 3 ||
      descriptors.size(0) != dmaps.batch() || descriptors.size(1) != dmaps.channels() ||
      back_projections.size(0) != dmaps.channels() ||
      back_projections.size(2) != descriptors.size(2)) {
    throw std::invalid_argument("unpool: shape mismatch");
  }
  const auto lifted = torch::leaky_relu(
      torch::einsum("ksc,bkc->bks", {back_projections, descriptors}), negative_slope);
  return torch::einsum("bkhw,bks->bshw", {dmaps.data, lifted});
}

}  // namespace lmdis
