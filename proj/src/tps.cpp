#include "lmdis/tps.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lmdis::tps {
namespace {

double kernel(double dist_sq) { return dist_sq > 0.0 ? 0.5 * dist_sq * std::log(dist_sq) : 0.0; }

// Snaps values within 1e-9 of an integer so identity warps sample exactly.
double snap(double x) {
  const double r = std::round(x);
  return std::abs(x - r) < 1e-9 ? r : x;
}

}  // namespace

double to_unit(double pixel, int64_t size) { return (pixel - 0.5) / static_cast<double>(size); }
double from_unit(double unit, int64_t size) { return unit * static_cast<double>(size) + 0.5; }

TpsTransform TpsTransform::identity() {
  Eigen::Matrix<double, 2, 3> a;
  a << 1, 0, 0, 0, 1, 0;
  return from_affine(a);
}

TpsTransform TpsTransform::from_affine(const Eigen::Matrix<double, 2, 3>& affine) {
  return {affine, Points(0, 2), Points(0, 2)};
}

Eigen::Vector2d TpsTransform::apply(const Eigen::Vector2d& p) const {
  Eigen::Vector2d out = affine.leftCols<2>() * p + affine.col(2);
  for (Eigen::Index i = 0; i < control_points.rows(); ++i) {
    const double d2 = (p - control_points.row(i).transpose()).squaredNorm();
    out += kernel(d2) * kernel_weights.row(i).transpose();
  }
  return out;
}

TpsTransform solve_tps(const Points& src, const Points& dst, double reg) {
  const Eigen::Index n = src.rows();
  if (n < 3 || dst.rows() != n) {
    throw std::invalid_argument("solve_tps: need at least 3 matching control pairs");
  }
  if (!src.allFinite() || !dst.allFinite()) {
    throw std::invalid_argument("solve_tps: non-finite control point");
  }
  Eigen::MatrixXd system = Eigen::MatrixXd::Zero(n + 3, n + 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      system(i, j) = kernel((src.row(i) - src.row(j)).squaredNorm());
    }
    system(i, i) += reg;
    system(i, n) = 1.0;
    system(i, n + 1) = src(i, 0);
    system(i, n + 2) = src(i, 1);
  }
  system.block(n, 0, 3, n) = system.block(0, n, n, 3).transpose();

  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 3, 2);
  rhs.topRows(n) = dst;

  Eigen::FullPivLU<Eigen::MatrixXd> lu(system);
  if (!lu.isInvertible()) throw std::domain_error("degenerate control configuration");
  const Eigen::MatrixXd sol = lu.solve(rhs);
  if (!sol.allFinite()) throw std::domain_error("degenerate control configuration");

  TpsTransform t;
  t.control_points = src;
  t.kernel_weights = sol.topRows(n);
  // rows of sol's tail: constant, x coefficient, y coefficient
  t.affine.col(0) = sol.row(n + 1).transpose();
  t.affine.col(1) = sol.row(n + 2).transpose();
  t.affine.col(2) = sol.row(n).transpose();
  return t;
}

Points apply_tps(const TpsTransform& t, const Points& coords) {
  Points out(coords.rows(), 2);
  for (Eigen::Index i = 0; i < coords.rows(); ++i) {
    out.row(i) = t.apply(coords.row(i).transpose()).transpose();
  }
  return out;
}

torch::Tensor apply_tps(const TpsTransform& t, const torch::Tensor& coords) {
  using RowPoints = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;
  const auto opts = coords.options().requires_grad(false);
  Eigen::Matrix<double, 2, 3, Eigen::RowMajor> a = t.affine;
  const auto affine = torch::from_blob(a.data(), {2, 3}, torch::kFloat64).clone().to(opts);
  auto out = torch::matmul(coords, affine.narrow(1, 0, 2).t()) + affine.select(1, 2);
  const auto n = t.control_points.rows();
  if (n == 0) return out;

  RowPoints c = t.control_points;
  RowPoints w = t.kernel_weights;
  const auto ctrl = torch::from_blob(c.data(), {n, 2}, torch::kFloat64).clone().to(opts);
  const auto weights = torch::from_blob(w.data(), {n, 2}, torch::kFloat64).clone().to(opts);
  const auto d2 = (coords.unsqueeze(-2) - ctrl).square().sum(-1);
  // clamp keeps log finite at control points, where d2 * log(.) is zero anyway
  const auto phi = 0.5 * d2 * torch::log(d2.clamp_min(1e-30));
  return out + torch::matmul(phi, weights);
}

void TpsSampleConfig::validate() const {
  if (translate_range < 0 || rotation_std_deg < 0 || log2_scale_std < 0 || log2_scale_clip < 0 ||
      grid_perturb_std < 0 || landmark_perturb_std < 0 || reg < 0) {
    throw std::invalid_argument("TpsSampleConfig: ranges and deviations must be nonnegative");
  }
  if (landmark_mode_prob < 0 || landmark_mode_prob > 1) {
    throw std::invalid_argument("TpsSampleConfig: landmark_mode_prob must lie in [0,1]");
  }
  if (grid_size < 2) throw std::invalid_argument("TpsSampleConfig: grid_size must be >= 2");
}

void to_json(nlohmann::json& j, const TpsSampleConfig& c) {
  j = {{"translate_range", c.translate_range},
       {"rotation_std_deg", c.rotation_std_deg},
       {"log2_scale_std", c.log2_scale_std},
       {"log2_scale_clip", c.log2_scale_clip},
       {"grid_perturb_std", c.grid_perturb_std},
       {"landmark_perturb_std", c.landmark_perturb_std},
       {"grid_size", c.grid_size},
       {"landmark_mode_prob", c.landmark_mode_prob},
       {"reg", c.reg}};
}

void from_json(const nlohmann::json& j, TpsSampleConfig& c) {
  c.translate_range = j.value("translate_range", c.translate_range);
  c.rotation_std_deg = j.value("rotation_std_deg", c.rotation_std_deg);
  c.log2_scale_std = j.value("log2_scale_std", c.log2_scale_std);
  c.log2_scale_clip = j.value("log2_scale_clip", c.log2_scale_clip);
  c.grid_perturb_std = j.value("grid_perturb_std", c.grid_perturb_std);
  c.landmark_perturb_std = j.value("landmark_perturb_std", c.landmark_perturb_std);
  c.grid_size = j.value("grid_size", c.grid_size);
  c.landmark_mode_prob = j.value("landmark_mode_prob", c.landmark_mode_prob);
  c.reg = j.value("reg", c.reg);
  c.validate();
}

ControlMode choose_control_mode(double landmark_prob, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(landmark_prob);
  return coin(rng) ? ControlMode::kLandmark : ControlMode::kGrid;
}

TpsTransform sample_random_tps(const TpsSampleConfig& cfg, ControlMode mode,
                               const std::optional<Points>& landmarks, std::mt19937_64& rng) {
  cfg.validate();
  if (mode == ControlMode::kLandmark && !landmarks) {
    throw std::invalid_argument("sample_random_tps: landmark mode needs landmarks");
  }
  auto gauss = [&rng](double std) {
    return std > 0 ? std::normal_distribution<double>(0.0, std)(rng) : 0.0;
  };
  auto uniform = [&rng](double range) {
    return range > 0 ? std::uniform_real_distribution<double>(-range, range)(rng) : 0.0;
  };

  const double tx = uniform(cfg.translate_range);
  const double ty = uniform(cfg.translate_range);
  const double angle = gauss(cfg.rotation_std_deg) * std::numbers::pi / 180.0;
  const double log_scale = std::clamp(gauss(cfg.log2_scale_std), -cfg.log2_scale_clip,
                                      cfg.log2_scale_clip);
  const double scale = std::exp2(log_scale);

  Eigen::Matrix2d linear;
  linear << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
  linear *= scale;
  const Eigen::Vector2d center(0.5, 0.5);
  Eigen::Matrix<double, 2, 3> affine;
  affine.leftCols<2>() = linear;
  affine.col(2) = center - linear * center + Eigen::Vector2d(tx, ty);

  Points src;
  double perturb = 0.0;
  if (mode == ControlMode::kGrid) {
    const int g = cfg.grid_size;
    src.resize(static_cast<Eigen::Index>(g) * g, 2);
    for (int i = 0; i < g; ++i) {
      for (int j = 0; j < g; ++j) {
        src(i * g + j, 0) = static_cast<double>(j) / (g - 1);
        src(i * g + j, 1) = static_cast<double>(i) / (g - 1);
      }
    }
    perturb = cfg.grid_perturb_std;
  } else {
    src = *landmarks;
    perturb = cfg.landmark_perturb_std;
  }

  Points dst(src.rows(), 2);
  bool local = false;
  for (Eigen::Index i = 0; i < src.rows(); ++i) {
    Eigen::Vector2d p = src.row(i).transpose();
    if (perturb > 0) {
      p += Eigen::Vector2d(gauss(perturb), gauss(perturb));
      local = true;
    }
    dst.row(i) = (linear * p + affine.col(2)).transpose();
  }
  if (!local) return TpsTransform::from_affine(affine);
  return solve_tps(src, dst, cfg.reg);
}

TpsTransform sample_random_tps(const TpsSampleConfig& cfg, const std::optional<Points>& landmarks,
                               std::mt19937_64& rng, ControlMode* mode_out) {
  auto mode = choose_control_mode(cfg.landmark_mode_prob, rng);
  if (!landmarks) mode = ControlMode::kGrid;
  if (mode_out) *mode_out = mode;
  return sample_random_tps(cfg, mode, landmarks, rng);
}

Image warp_image(const Image& img, const TpsTransform& t) {
  Image out(img.width, img.height, img.channels);
  const int w = img.width;
  const int h = img.height;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Eigen::Vector2d p(to_unit(x + 1, w), to_unit(y + 1, h));
      const Eigen::Vector2d q = t.apply(p);
      // zero-based source position, clamped to the border pixels
      const double sx = std::clamp(snap(from_unit(q.x(), w) - 1.0), 0.0, w - 1.0);
      const double sy = std::clamp(snap(from_unit(q.y(), h) - 1.0), 0.0, h - 1.0);
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, w - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - x0;
      const double fy = sy - y0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = (1 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c);
        const double bottom = (1 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c);
        out.at(x, y, c) = static_cast<float>((1 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

std::optional<Eigen::Vector2d> invert_point(const TpsTransform& t, const Eigen::Vector2d& q,
                                            double tol, int max_iter) {
  Eigen::Vector2d p = q;
  const double h = 1e-6;
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::Vector2d r = t.apply(p) - q;
    if (r.norm() < tol) return p;
    Eigen::Matrix2d jac;
    jac.col(0) = (t.apply(p + Eigen::Vector2d(h, 0)) - t.apply(p - Eigen::Vector2d(h, 0))) / (2 * h);
    jac.col(1) = (t.apply(p + Eigen::Vector2d(0, h)) - t.apply(p - Eigen::Vector2d(0, h))) / (2 * h);
    if (std::abs(jac.determinant()) < 1e-12) return std::nullopt;
    p -= jac.inverse() * r;
    if (!p.allFinite() || p.norm() > 1e3) return std::nullopt;
  }
  if ((t.apply(p) - q).norm() < tol) return p;
  return std::nullopt;
}

nlohmann::json to_json(const TpsTransform& t) {
  nlohmann::json j;
  j["affine"] = {{t.affine(0, 0), t.affine(0, 1), t.affine(0, 2)},
                 {t.affine(1, 0), t.affine(1, 1), t.affine(1, 2)}};
  auto rows = [](const Points& p) {
    auto arr = nlohmann::json::array();
    for (Eigen::Index i = 0; i < p.rows(); ++i) arr.push_back({p(i, 0), p(i, 1)});
    return arr;
  };
  j["control_points"] = rows(t.control_points);
  j["kernel_weights"] = rows(t.kernel_weights);
  return j;
}

TpsTransform tps_from_json(const nlohmann::json& j) {
  TpsTransform t;
  const auto& a = j.at("affine");
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) t.affine(r, c) = a.at(r).at(c).get<double>();
  auto points = [](const nlohmann::json& arr) {
    Points p(static_cast<Eigen::Index>(arr.size()), 2);
    for (size_t i = 0; i < arr.size(); ++i) {
      p(static_cast<Eigen::Index>(i), 0) = arr[i].at(0).get<double>();
      p(static_cast<Eigen::Index>(i), 1) = arr[i].at(1).get<double>();
    }
    return p;
  };
  t.control_points = points(j.at("control_points"));
  t.kernel_weights = points(j.at("kernel_weights"));
  if (t.control_points.rows() != t.kernel_weights.rows()) {
    throw std::invalid_argument("tps_from_json: control/weight count mismatch");
  }
  return t;
}

}  // namespace lmdis::tps
