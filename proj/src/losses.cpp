#include "lmdis/losses.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "lmdis/log.hpp"

namespace lmdis::losses {

void LossWeights::validate() const {
  if (recon < 0 || conc < 0 || sep < 0 || eqv < 0) {
    throw std::invalid_argument("LossWeights: weights must be nonnegative");
  }
  if (sigma_sep <= 0 || sigma_color <= 0) {
    throw std::invalid_argument("LossWeights: sigma_sep and sigma_color must be positive");
  }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda_recon", w.recon}, {"lambda_conc", w.conc},   {"lambda_sep", w.sep},
       {"lambda_eqv", w.eqv},     {"sigma_sep", w.sigma_sep}, {"sigma_color", w.sigma_color}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  w.recon = j.value("lambda_recon", w.recon);
  w.conc = j.value("lambda_conc", w.conc);
  w.sep = j.value("lambda_sep", w.sep);
  w.eqv = j.value("lambda_eqv", w.eqv);
  w.sigma_sep = j.value("sigma_sep", w.sigma_sep);
  w.sigma_color = j.value("sigma_color", w.sigma_color);
  w.validate();
}

torch::Tensor concentration_loss(const LandmarkStatistics& normalized_stats) {
  const auto spread = normalized_stats.var_u + normalized_stats.var_v;
  return (2 * std::numbers::pi * std::numbers::e * spread.square()).sum(-1).mean();
}

LandmarkStatistics normalize_statistics(const LandmarkStatistics& stats, double edge_length) {
  const double area = edge_length * edge_length;
  return {stats.zeta, stats.var_u / area, stats.var_v / area};
}

torch::Tensor separation_loss(const torch::Tensor& normalized_landmarks, double sigma_sep) {
  const auto k = normalized_landmarks.size(1);
  if (k < 2) {
    log_warn("separation_loss: fewer than two landmarks, loss is zero");
    return torch::zeros({}, normalized_landmarks.options());
  }
  const auto diff = normalized_landmarks.unsqueeze(2) - normalized_landmarks.unsqueeze(1);
  const auto d2 = diff.square().sum(-1);
  const auto off_diag = 1 - torch::eye(k, normalized_landmarks.options());
  const auto kernel = torch::exp(-d2 / (2 * sigma_sep * sigma_sep)) * off_diag;
  return kernel.sum({1, 2}).mean();
}

namespace {

torch::Tensor to_unit(const torch::Tensor& coords, int64_t width, int64_t height) {
  const auto x = (coords.select(-1, 0) - 0.5) / static_cast<double>(width);
  const auto y = (coords.select(-1, 1) - 0.5) / static_cast<double>(height);
  return torch::stack({x, y}, -1);
}

torch::Tensor from_unit(const torch::Tensor& unit, int64_t width, int64_t height) {
  const auto x = unit.select(-1, 0) * static_cast<double>(width) + 0.5;
  const auto y = unit.select(-1, 1) * static_cast<double>(height) + 0.5;
  return torch::stack({x, y}, -1);
}

}  // namespace

torch::Tensor equivariance_loss(const LandmarkSet& landmarks, const LandmarkSet& warped,
                                std::span<const tps::TpsTransform> transforms) {
  const auto batch = landmarks.coords.size(0);
  if (static_cast<int64_t>(transforms.size()) != batch || warped.coords.size(0) != batch) {
    throw std::invalid_argument("equivariance_loss: need one transform per batch item");
  }
  std::vector<torch::Tensor> mapped;
  mapped.reserve(transforms.size());
  for (int64_t b = 0; b < batch; ++b) {
    const auto unit = to_unit(warped.coords[b], warped.width, warped.height);
    mapped.push_back(from_unit(tps::apply_tps(transforms[b], unit), warped.width, warped.height));
  }
  const auto diff = (torch::stack(mapped) - landmarks.coords) / landmarks.edge_length();
  return diff.square().sum({1, 2}).mean();
}

torch::Tensor sample_bilinear(const torch::Tensor& field, const torch::Tensor& coords,
                              bool* clamped) {
  const auto batch = field.size(0);
  const auto h = field.size(1);
  const auto w = field.size(2);
  auto x = coords.select(-1, 0) - 1.0;
  auto y = coords.select(-1, 1) - 1.0;
  if (clamped) {
    *clamped = ((x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)).any().item<bool>();
  }
  x = x.clamp(0, w - 1);
  y = y.clamp(0, h - 1);
  const auto x0 = x.detach().floor().to(torch::kLong);
  const auto y0 = y.detach().floor().to(torch::kLong);
  const auto x1 = (x0 + 1).clamp_max(w - 1);
  const auto y1 = (y0 + 1).clamp_max(h - 1);
  const auto fx = x - x0.to(x.scalar_type());
  const auto fy = y - y0.to(y.scalar_type());
  const auto flat = field.reshape({batch, h * w});
  auto at = [&](const torch::Tensor& yy, const torch::Tensor& xx) {
    return flat.gather(1, (yy * w + xx).reshape({batch, -1})).reshape(xx.sizes());
  };
  const auto top = (1 - fx) * at(y0, x0) + fx * at(y0, x1);
  const auto bottom = (1 - fx) * at(y1, x0) + fx * at(y1, x1);
  return (1 - fy) * top + fy * bottom;
}

FlowEquivariance equivariance_loss(const LandmarkSet& landmarks, const LandmarkSet& warped,
                                   const FlowField& flow) {
  FlowEquivariance out;
  bool cx = false;
  bool cy = false;
  const auto dx = sample_bilinear(flow.ox, warped.coords, &cx);
  const auto dy = sample_bilinear(flow.oy, warped.coords, &cy);
  out.clamped = cx || cy;
  if (out.clamped) log_warn("equivariance_loss: flow sampled outside the map, clamped");
  const auto mapped = warped.coords + torch::stack({dx, dy}, -1);
  const auto diff = (mapped - landmarks.coords) / landmarks.edge_length();
  out.loss = diff.square().sum({1, 2}).mean();
  return out;
}

torch::Tensor flow_preference_loss(const torch::Tensor& foreground,
                                   const torch::Tensor& flow_magnitude) {
  const auto weight = flow_magnitude.sum({1, 2});
  const auto corr = (flow_magnitude * foreground.sum(1)).sum({1, 2});
  const auto safe = torch::where(weight > 0, weight, torch::ones_like(weight));
  const auto per_item = torch::where(weight > 0, -corr / safe, torch::zeros_like(corr));
  return per_item.mean();
}

torch::Tensor reconstruction_loss(const torch::Tensor& image, const torch::Tensor& recon,
                                  double sigma_color) {
  if (image.sizes() != recon.sizes()) {
    throw std::invalid_argument("reconstruction_loss: shape mismatch");
  }
  const double var = sigma_color * sigma_color;
  const auto sq = (image - recon).square().flatten(1).sum(1);
  return (sq / var).mean() + std::log(2 * std::numbers::pi * var);
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"recon", recon},     {"conc", conc},         {"sep", sep},
          {"eqv", eqv},         {"flow_prefer", flow_prefer},
          {"w_recon", w_recon}, {"w_conc", w_conc},     {"w_sep", w_sep},
          {"w_eqv", w_eqv},     {"w_flow_prefer", w_flow_prefer}, {"total", total_value()}};
}

LossBreakdown total_loss(const LossTerms& parts, const LossWeights& weights) {
  LossBreakdown out;
  std::ostringstream bad;
  torch::Tensor total;
  auto add = [&](const char* name, const torch::Tensor& term, double lambda, double& raw,
                 double& weighted) {
    if (!term.defined()) return;
    raw = term.item<double>();
    weighted = lambda * raw;
    if (!std::isfinite(raw)) {
      bad << ' ' << name << '=' << raw;
      return;
    }
    if (lambda == 0.0) return;
    total = total.defined() ? total + lambda * term : lambda * term;
  };
  add("recon", parts.recon, weights.recon, out.recon, out.w_recon);
  add("conc", parts.conc, weights.conc, out.conc, out.w_conc);
  add("sep", parts.sep, weights.sep, out.sep, out.w_sep);
  add("eqv", parts.eqv, weights.eqv, out.eqv, out.w_eqv);
  add("flow_prefer", parts.flow_prefer, weights.eqv, out.flow_prefer, out.w_flow_prefer);
  if (!bad.str().empty()) throw NonFiniteLoss("non-finite loss terms:" + bad.str());
  if (!total.defined()) {
    // all weights zero: keep the graph attached so callers can still backprop
    for (const auto* t : {&parts.recon, &parts.conc, &parts.sep, &parts.eqv, &parts.flow_prefer}) {
      if (t->defined()) total = total.defined() ? total + 0.0 * *t : 0.0 * *t;
    }
    if (!total.defined()) total = torch::zeros({});
  }
  out.total = total;
  return out;
}

}  // namespace lmdis::losses
