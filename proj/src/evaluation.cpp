#include "lmdis/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "lmdis/log.hpp"

namespace lmdis::evaluation {

namespace fs = std::filesystem;

RegressionModel fit_regressor(const Matrix& discovered, const Matrix& annotated) {
  if (discovered.rows() != annotated.rows()) {
    throw std::invalid_argument("fit_regressor: row counts differ");
  }
  if (discovered.rows() == 0) throw std::invalid_argument("fit_regressor: no samples");
  if (!discovered.allFinite() || !annotated.allFinite()) {
    throw std::invalid_argument("fit_regressor: non-finite input");
  }
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(discovered);
  RegressionModel m;
  m.weights = cod.solve(annotated);
  m.rank = cod.rank();
  m.rank_deficient = m.rank < discovered.cols();
  if (m.rank_deficient) {
    log_warn("fit_regressor: design has rank " + std::to_string(m.rank) + " < " +
             std::to_string(discovered.cols()) + ", using the minimum-norm solution");
  }
  const Matrix r = discovered * m.weights - annotated;
  m.residual_rms = std::sqrt(r.squaredNorm() / static_cast<double>(r.size()));
  return m;
}

Normalizer parse_normalizer(const std::string& name) {
  if (name == "biocular") return Normalizer::kBiocular;
  if (name == "biwheel") return Normalizer::kBiwheel;
  if (name == "image_size") return Normalizer::kImageSize;
  throw std::invalid_argument("unknown normalizer '" + name + "' (biocular, biwheel, image_size)");
}

std::string to_string(Normalizer n) {
  switch (n) {
    case Normalizer::kBiocular: return "biocular";
    case Normalizer::kBiwheel: return "biwheel";
    case Normalizer::kImageSize: return "image_size";
  }
  return "?";
}

namespace {

double normalizer_of(const Eigen::RowVectorXd& gt, Normalizer kind, const NormalizerAux& aux) {
  if (kind == Normalizer::kImageSize) return aux.image_size;
  const auto [a, b] = aux.pair;
  const auto l = gt.size() / 2;
  if (a < 0 || b < 0 || a >= l || b >= l) {
    throw std::invalid_argument("nme: normalizer landmark pair missing or out of range");
  }
  return std::hypot(gt(2 * a) - gt(2 * b), gt(2 * a + 1) - gt(2 * b + 1));
}

double image_error(const Eigen::RowVectorXd& pred, const Eigen::RowVectorXd& gt) {
  const auto l = gt.size() / 2;
  double e = 0;
  for (Eigen::Index k = 0; k < l; ++k) e += std::hypot(pred(2 * k) - gt(2 * k), pred(2 * k + 1) - gt(2 * k + 1));
  return e / static_cast<double>(l);
}

void check_shapes(const Matrix& pred, const Matrix& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols() || gt.cols() % 2 != 0) {
    throw std::invalid_argument("nme: prediction and ground truth shapes differ");
  }
}

NmeResult finish(std::vector<double> per_image) {
  NmeResult r;
  double sum = 0;
  for (double v : per_image) {
    if (std::isnan(v)) {
      ++r.skipped;
    } else {
      sum += v;
      ++r.images;
    }
  }
  if (r.skipped > 0) log_warn("nme: skipped " + std::to_string(r.skipped) + " images with a zero normalizer");
  r.nme = r.images ? sum / static_cast<double>(r.images) : std::numeric_limits<double>::quiet_NaN();
  r.per_image = std::move(per_image);
  return r;
}

}  // namespace

NmeResult nme(const Matrix& pred, const Matrix& gt, Normalizer kind, const NormalizerAux& aux) {
  check_shapes(pred, gt);
  std::vector<double> per(gt.rows());
  for (Eigen::Index i = 0; i < gt.rows(); ++i) {
    const double norm = normalizer_of(gt.row(i), kind, aux);
    per[i] = norm > 1e-12 ? 100.0 * image_error(pred.row(i), gt.row(i)) / norm
                          : std::numeric_limits<double>::quiet_NaN();
  }
  return finish(std::move(per));
}

Matrix swap_sides(const Matrix& annotated, const std::vector<std::array<int, 2>>& mirror_pairs) {
  Matrix out = annotated;
  for (const auto& [l, r] : mirror_pairs) {
    out.col(2 * l) = annotated.col(2 * r);
    out.col(2 * l + 1) = annotated.col(2 * r + 1);
    out.col(2 * r) = annotated.col(2 * l);
    out.col(2 * r + 1) = annotated.col(2 * l + 1);
  }
  return out;
}

std::vector<bool> frontal_views(const Matrix& annotated, const std::vector<std::array<int, 2>>& mirror_pairs) {
  std::vector<bool> out(annotated.rows(), false);
  if (mirror_pairs.empty()) return out;
  for (Eigen::Index i = 0; i < annotated.rows(); ++i) {
    size_t crossed = 0;
    for (const auto& [l, r] : mirror_pairs) {
      if (annotated(i, 2 * l) > annotated(i, 2 * r)) ++crossed;
    }
    out[i] = 3 * crossed > 2 * mirror_pairs.size();
  }
  return out;
}

namespace {

Matrix select_rows(const Matrix& m, const std::vector<Eigen::Index>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

double row_sq_error(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) { return (a - b).squaredNorm(); }

}  // namespace

FlipFitResult flip_aware_fit(const Matrix& discovered, const Matrix& annotated,
                             const std::vector<std::array<int, 2>>& mirror_pairs, int max_iter) {
  if (mirror_pairs.empty()) throw std::invalid_argument("flip_aware_fit: no mirror pairs in the annotation schema");
  const auto frontal = frontal_views(annotated, mirror_pairs);
  std::vector<Eigen::Index> rows;
  for (size_t i = 0; i < frontal.size(); ++i) {
    if (frontal[i]) rows.push_back(static_cast<Eigen::Index>(i));
  }
  if (rows.empty()) throw std::runtime_error("flip_aware_fit: cannot bootstrap orientation, no frontal images");

  FlipFitResult res;
  res.model = fit_regressor(select_rows(discovered, rows), select_rows(annotated, rows));
  const Matrix swapped = swap_sides(annotated, mirror_pairs);
  std::vector<bool> flags(annotated.rows(), false);
  bool first = true;
  for (int it = 0; it < max_iter; ++it) {
    const Matrix pred = res.model.predict(discovered);
    std::vector<bool> next(flags.size());
    size_t changes = 0;
    for (Eigen::Index i = 0; i < annotated.rows(); ++i) {
      next[i] = row_sq_error(pred.row(i), swapped.row(i)) < row_sq_error(pred.row(i), annotated.row(i));
      if (next[i] != flags[i]) ++changes;
    }
    res.iterations = it + 1;
    if (!first && changes == 0) {
      res.converged = true;
      break;
    }
    first = false;
    res.changes.push_back(changes);
    flags = std::move(next);
    Matrix target = annotated;
    for (Eigen::Index i = 0; i < target.rows(); ++i) {
      if (flags[i]) target.row(i) = swapped.row(i);
    }
    res.model = fit_regressor(discovered, target);
  }
  if (!res.converged) log_warn("flip_aware_fit: flip assignments still changing after max iterations");
  res.flipped = std::move(flags);
  return res;
}

NmeResult flip_aware_nme(const Matrix& pred, const Matrix& gt, const std::vector<std::array<int, 2>>& mirror_pairs,
                         Normalizer kind, const NormalizerAux& aux) {
  check_shapes(pred, gt);
  const Matrix swapped = swap_sides(gt, mirror_pairs);
  std::vector<double> per(gt.rows());
  for (Eigen::Index i = 0; i < gt.rows(); ++i) {
    // the normalizer comes from the original annotation; a swap keeps the distance anyway
    const double norm = normalizer_of(gt.row(i), kind, aux);
    const double e = std::min(image_error(pred.row(i), gt.row(i)), image_error(pred.row(i), swapped.row(i)));
    per[i] = norm > 1e-12 ? 100.0 * e / norm : std::numeric_limits<double>::quiet_NaN();
  }
  return finish(std::move(per));
}

std::vector<LearningCurvePoint> learning_curve(const Matrix& train_discovered, const Matrix& train_annotated,
                                               const Matrix& eval_discovered, const Matrix& eval_annotated,
                                               const std::vector<size_t>& counts, Normalizer kind,
                                               const NormalizerAux& aux, uint64_t seed) {
  const auto n = static_cast<size_t>(train_discovered.rows());
  std::vector<LearningCurvePoint> out;
  for (size_t c : counts) {
    if (c == 0 || c > n) throw std::invalid_argument("learning_curve: sample count must be in [1, N]");
    std::vector<Eigen::Index> idx(n);
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    std::mt19937_64 rng(seed + c);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(c);
    std::sort(idx.begin(), idx.end());
    const auto model = fit_regressor(select_rows(train_discovered, idx), select_rows(train_annotated, idx));
    LearningCurvePoint p;
    p.count = c;
    p.seed = seed + c;
    p.underdetermined = c < static_cast<size_t>(train_discovered.cols());
    p.nme = nme(model.predict(eval_discovered), eval_annotated, kind, aux).nme;
    out.push_back(p);
  }
  return out;
}

torch::Tensor detect_landmarks(LandmarkAutoencoder& model, const torch::Tensor& images, int64_t batch) {
  torch::NoGradGuard ng;
  const bool was_training = model->is_training();
  model->eval();
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < images.size(0); i += batch) {
    const auto chunk = images.narrow(0, i, std::min(batch, images.size(0) - i));
    parts.push_back(model->encode(chunk).landmarks.coords.to(torch::kFloat64));
  }
  if (was_training) model->train();
  const double s = model->config().map_stride;
  return (torch::cat(parts) - 0.5) * s + 0.5;
}

double landmark_spread(const torch::Tensor& landmarks) {
  const auto k = landmarks.size(1);
  if (k < 2) return 0;
  const auto d = (landmarks.unsqueeze(2) - landmarks.unsqueeze(1)).square().sum(-1).sqrt();
  return (d.sum({1, 2}) / static_cast<double>(k * (k - 1))).mean().item<double>();
}

EquivarianceStats equivariance_error(LandmarkAutoencoder& model, const torch::Tensor& images,
                                     const tps::TpsSampleConfig& cfg, uint64_t seed, double margin) {
  std::mt19937_64 rng(seed);
  const auto n = images.size(0);
  const auto size = images.size(3);
  std::vector<tps::TpsTransform> ts;
  std::vector<Image> warped;
  for (int64_t i = 0; i < n; ++i) {
    ts.push_back(tps::sample_random_tps(cfg, tps::ControlMode::kGrid, std::nullopt, rng));
    warped.push_back(tps::warp_image(Image::from_tensor(images[i]), ts.back()));
  }
  const auto lm = detect_landmarks(model, images);
  const auto lw = detect_landmarks(model, stack_images(warped));
  std::vector<double> errs;
  EquivarianceStats st;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t k = 0; k < lm.size(1); ++k) {
      const Eigen::Vector2d l(lm[i][k][0].item<double>(), lm[i][k][1].item<double>());
      const Eigen::Vector2d w(lw[i][k][0].item<double>(), lw[i][k][1].item<double>());
      const Eigen::Vector2d lu(tps::to_unit(l.x(), size), tps::to_unit(l.y(), size));
      const auto pre = tps::invert_point(ts[i], lu);
      if (!pre || pre->minCoeff() < margin || pre->maxCoeff() > 1 - margin) {
        ++st.dropped;
        continue;
      }
      const Eigen::Vector2d g = ts[i].apply({tps::to_unit(w.x(), size), tps::to_unit(w.y(), size)});
      const Eigen::Vector2d gp(tps::from_unit(g.x(), size), tps::from_unit(g.y(), size));
      errs.push_back((gp - l).norm());
    }
  }
  st.count = errs.size();
  if (!errs.empty()) {
    st.mean = std::accumulate(errs.begin(), errs.end(), 0.0) / static_cast<double>(errs.size());
    std::sort(errs.begin(), errs.end());
    const size_t m = errs.size() / 2;
    st.median = errs.size() % 2 ? errs[m] : 0.5 * (errs[m - 1] + errs[m]);
  }
  return st;
}

RegressionData regression_data(LandmarkAutoencoder& model, const data::Dataset& ds, const data::Annotations& ann,
                               bool eval_split) {
  RegressionData rd;
  std::vector<Image> images;
  std::vector<const std::vector<std::array<double, 2>>*> points;
  const size_t n = eval_split ? ds.eval_size() : ds.size();
  for (size_t i = 0; i < n; ++i) {
    const auto& key = eval_split ? ds.eval_key(i) : ds.key(i);
    const auto it = ann.points.find(key);
    if (it == ann.points.end()) {
      ++rd.missing;
      continue;
    }
    if (it->second.size() != ann.count()) throw std::runtime_error("annotation count mismatch for " + key);
    images.push_back(ds.load_key(key));
    points.push_back(&it->second);
    rd.keys.push_back(key);
  }
  if (images.empty()) throw std::runtime_error("no annotated images in the split");
  const auto lm = detect_landmarks(model, stack_images(images));
  const double edge = ds.spec().padded_size;
  const auto rows = static_cast<Eigen::Index>(images.size());
  rd.discovered.resize(rows, 2 * lm.size(1));
  rd.annotated.resize(rows, 2 * static_cast<Eigen::Index>(ann.count()));
  const auto acc = lm.accessor<double, 3>();
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (int64_t k = 0; k < lm.size(1); ++k) {
      rd.discovered(i, 2 * k) = acc[i][k][0] / edge;
      rd.discovered(i, 2 * k + 1) = acc[i][k][1] / edge;
    }
    const auto& p = *points[i];
    for (size_t l = 0; l < p.size(); ++l) {
      rd.annotated(i, 2 * l) = p[l][0] / edge;
      rd.annotated(i, 2 * l + 1) = p[l][1] / edge;
    }
  }
  return rd;
}

nlohmann::json AnnotationReport::to_json() const {
  return {{"normalizer", evaluation::to_string(normalizer)},
          {"train_images", train_images},
          {"eval_images", eval_images},
          {"nme", result.nme},
          {"scored_images", result.images},
          {"skipped_images", result.skipped},
          {"flip_aware", flip_aware},
          {"regressor", {{"residual_rms", regressor.residual_rms},
                         {"rank", regressor.rank},
                         {"rank_deficient", regressor.rank_deficient}}}};
}

AnnotationReport evaluate_annotations(LandmarkAutoencoder& model, const data::Dataset& ds,
                                      const data::Annotations& ann, Normalizer kind, bool flip_aware) {
  NormalizerAux aux;
  if (kind == Normalizer::kImageSize) {
    aux.image_size = 1.0;  // coordinates are already divided by the image edge
  } else {
    const auto it = ann.normalizer_pairs.find(to_string(kind));
    if (it == ann.normalizer_pairs.end()) {
      throw std::invalid_argument("annotations define no '" + to_string(kind) + "' landmark pair");
    }
    aux.pair = it->second;
  }
  const auto train = regression_data(model, ds, ann, false);
  const auto test = regression_data(model, ds, ann, true);
  AnnotationReport rep;
  rep.normalizer = kind;
  rep.train_images = static_cast<size_t>(train.discovered.rows());
  rep.eval_images = static_cast<size_t>(test.discovered.rows());
  rep.flip_aware = flip_aware && !ann.mirror_pairs.empty();
  if (rep.flip_aware) {
    rep.regressor = flip_aware_fit(train.discovered, train.annotated, ann.mirror_pairs).model;
    rep.result = flip_aware_nme(rep.regressor.predict(test.discovered), test.annotated, ann.mirror_pairs, kind, aux);
  } else {
    rep.regressor = fit_regressor(train.discovered, train.annotated);
    rep.result = nme(rep.regressor.predict(test.discovered), test.annotated, kind, aux);
  }
  return rep;
}

void write_report(const AnnotationReport& report, const std::vector<std::string>& eval_keys,
                  const fs::path& json_path, const fs::path& csv_path) {
  std::ofstream(json_path) << report.to_json().dump(2) << '\n';
  std::ofstream csv(csv_path);
  csv << "key,error_percent\n";
  for (size_t i = 0; i < report.result.per_image.size(); ++i) {
    csv << (i < eval_keys.size() ? eval_keys[i] : std::to_string(i)) << ',' << report.result.per_image[i] << '\n';
  }
}

torch::Tensor eval_images(const data::Dataset& ds, size_t limit) {
  const size_t n = limit ? std::min(limit, ds.eval_size()) : ds.eval_size();
  if (n == 0) throw std::runtime_error("dataset has no evaluation split");
  std::vector<Image> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) out.push_back(ds.get_eval(i));
  return stack_images(out);
}

std::vector<AblationRow> ablation_run(const training::TrainConfig& base,
                                      const std::vector<std::set<std::string>>& variants,
                                      const AblationOptions& options) {
  const auto ds = data::Dataset::open(base.dataset);
  const auto images = eval_images(ds, options.eval_images);
  std::vector<AblationRow> rows;
  for (const auto& disabled : variants) {
    auto cfg = base;
    AblationRow row;
    row.disabled = disabled;
    row.variant = "full";
    std::string dir = "ablation";
    for (const auto& term : disabled) {
      if (term == "recon") {
        cfg.weights.recon = 0;
      } else if (term == "conc") {
        cfg.weights.conc = 0;
      } else if (term == "sep") {
        cfg.weights.sep = 0;
      } else if (term == "eqv") {
        cfg.weights.eqv = 0;
      } else {
        throw std::invalid_argument("ablation_run: unknown loss term '" + term + "'");
      }
      row.variant = (row.variant == "full" ? "w/o " : row.variant + ", ") + term;
      dir += "_" + term;
    }
    cfg.output_dir = base.output_dir / (disabled.empty() ? "ablation_full" : dir);
    const auto start = std::chrono::steady_clock::now();
    const auto ckpt = cfg.output_dir / "model.lmd";
    const auto cfg_file = cfg.output_dir / "config.json";
    const nlohmann::json cfg_json = cfg;
    LandmarkAutoencoder model{nullptr};
    if (options.reuse && fs::exists(ckpt) && fs::exists(cfg_file) &&
        nlohmann::json::parse(std::ifstream(cfg_file)) == cfg_json) {
      log_info("ablation: reusing " + ckpt.string());
      model = load_checkpoint(ckpt);
    } else {
      log_info("ablation: training variant " + row.variant);
      fs::create_directories(cfg.output_dir);
      fs::remove(cfg_file);
      training::Trainer trainer(cfg);
      data::BatchIterator batches(ds, cfg.batch_size, cfg.seed, cfg.use_flow);
      trainer.run(batches);
      trainer.finalize_batchnorm(ds, cfg.bn_finalize_batches, cfg.seed + 1);
      model = trainer.model();
      save_checkpoint(ckpt, model);
      std::ofstream(cfg_file) << cfg_json.dump(2) << "\n";
    }
    row.spread = landmark_spread(detect_landmarks(model, images));
    row.eqv = equivariance_error(model, images, options.eval_tps, options.eval_seed);
    if (options.annotations) {
      row.nme = evaluate_annotations(model, ds, *options.annotations, options.normalizer).result.nme;
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_table(const std::vector<AblationRow>& rows, const fs::path& csv_path) {
  std::ofstream csv(csv_path);
  csv << "losses,nme_percent,spread_px,eqv_mean_px,eqv_median_px,seconds\n";
  for (const auto& r : rows) {
    csv << '"' << r.variant << "\"," << (r.nme ? std::to_string(*r.nme) : "") << ',' << r.spread << ','
        << r.eqv.mean << ',' << r.eqv.median << ',' << r.seconds << '\n';
  }
}

}  // namespace lmdis::evaluation
