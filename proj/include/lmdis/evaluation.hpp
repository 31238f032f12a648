#pragma once

#include <Eigen/Dense>
#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "lmdis/data.hpp"
#include "lmdis/model.hpp"
#include "lmdis/tps.hpp"
#include "lmdis/training.hpp"

namespace lmdis::evaluation {

/// One row per image, coordinates interleaved as x0, y0, x1, y1, ...
using Matrix = Eigen::MatrixXd;

/// Bias-free linear map from discovered to annotated landmarks.
struct RegressionModel {
  Matrix weights;            ///< 2K x 2L
  double residual_rms = 0;   ///< over every fitted coordinate
  Eigen::Index rank = 0;
  bool rank_deficient = false;

  Matrix predict(const Matrix& discovered) const { return discovered * weights; }
};

/// Minimum-norm least squares via a complete orthogonal decomposition.
/// Rank-deficient designs still solve, with a warning.
RegressionModel fit_regressor(const Matrix& discovered, const Matrix& annotated);

enum class Normalizer { kBiocular, kBiwheel, kImageSize };

Normalizer parse_normalizer(const std::string& name);
std::string to_string(Normalizer n);

/// What the normalizer needs: the two ground-truth landmark indices whose
/// distance is the unit (biocular, biwheel), or the image edge length.
struct NormalizerAux {
  std::array<int, 2> pair{-1, -1};
  double image_size = 0;
};

struct NmeResult {
  double nme = 0;             ///< percent
  size_t images = 0;          ///< images that entered the mean
  size_t skipped = 0;         ///< images with a zero normalizer
  std::vector<double> per_image;  ///< NaN for skipped images
};

/// Mean over images and landmarks of |pred - gt| / normalizer * 100.
NmeResult nme(const Matrix& pred, const Matrix& gt, Normalizer kind, const NormalizerAux& aux);

/// Swaps the coordinates of every (left, right) pair in each row.
Matrix swap_sides(const Matrix& annotated, const std::vector<std::array<int, 2>>& mirror_pairs);

/// An image is frontal when more than 2/3 of its (left, right) pairs have
/// the left landmark to the right of the right one.
std::vector<bool> frontal_views(const Matrix& annotated, const std::vector<std::array<int, 2>>& mirror_pairs);

struct FlipFitResult {
  RegressionModel model;
  std::vector<bool> flipped;    ///< annotations used side-swapped
  int iterations = 0;
  bool converged = false;       ///< flags stopped changing
  std::vector<size_t> changes;  ///< flag changes per refit
};

/// Fits on frontal images, then alternates between choosing for every image
/// the orientation of its annotations that the model explains better and
/// refitting on all images, until the choices are stable (at most max_iter).
FlipFitResult flip_aware_fit(const Matrix& discovered, const Matrix& annotated,
                             const std::vector<std::array<int, 2>>& mirror_pairs, int max_iter = 20);

/// Per-image error against the better of the original and side-swapped annotations.
NmeResult flip_aware_nme(const Matrix& pred, const Matrix& gt, const std::vector<std::array<int, 2>>& mirror_pairs,
                         Normalizer kind, const NormalizerAux& aux);

struct LearningCurvePoint {
  size_t count = 0;
  double nme = 0;
  bool underdetermined = false;  ///< fewer samples than regression inputs
  uint64_t seed = 0;
};

/// Fits on random subsets of the training rows and scores the fixed evaluation rows.
std::vector<LearningCurvePoint> learning_curve(const Matrix& train_discovered, const Matrix& train_annotated,
                                               const Matrix& eval_discovered, const Matrix& eval_annotated,
                                               const std::vector<size_t>& counts, Normalizer kind,
                                               const NormalizerAux& aux, uint64_t seed);

/// Detected landmarks in input-image pixels, [N, K, 2], eval mode, no grad.
torch::Tensor detect_landmarks(LandmarkAutoencoder& model, const torch::Tensor& images, int64_t batch = 64);

/// Mean distance between distinct landmarks of an image, averaged over images.
double landmark_spread(const torch::Tensor& landmarks);

struct EquivarianceStats {
  double mean = 0;
  double median = 0;
  size_t count = 0;    ///< landmarks that entered the statistics
  size_t dropped = 0;  ///< landmarks whose preimage left the frame
};

/// |g(l') - l| in image pixels for random grid-controlled warps. Landmarks
/// whose preimage under the warp falls outside [margin, 1 - margin] of the
/// unit square are dropped: their true match is not in I'.
EquivarianceStats equivariance_error(LandmarkAutoencoder& model, const torch::Tensor& images,
                                     const tps::TpsSampleConfig& cfg, uint64_t seed, double margin = 0.05);

/// Discovered landmarks (normalized by the map edge) and annotations
/// (normalized by the image edge) for every annotated key of a split.
struct RegressionData {
  Matrix discovered;
  Matrix annotated;
  std::vector<std::string> keys;
  size_t missing = 0;  ///< keys without annotations
};

RegressionData regression_data(LandmarkAutoencoder& model, const data::Dataset& ds, const data::Annotations& ann,
                               bool eval_split);

struct AnnotationReport {
  Normalizer normalizer = Normalizer::kBiocular;
  size_t train_images = 0;
  size_t eval_images = 0;
  RegressionModel regressor;
  NmeResult result;
  bool flip_aware = false;

  nlohmann::json to_json() const;
};

/// Fits the regressor on the training split and reports NME on the
/// evaluation split (flip-aware when requested and mirror pairs exist).
AnnotationReport evaluate_annotations(LandmarkAutoencoder& model, const data::Dataset& ds,
                                      const data::Annotations& ann, Normalizer kind, bool flip_aware = false);

/// Writes the report as JSON plus a per-image CSV (key, error).
void write_report(const AnnotationReport& report, const std::vector<std::string>& eval_keys,
                  const std::filesystem::path& json_path, const std::filesystem::path& csv_path);

struct AblationRow {
  std::string variant;  ///< "full" or "w/o <term>[, <term>]"
  std::set<std::string> disabled;
  double spread = 0;
  EquivarianceStats eqv;
  std::optional<double> nme;
  double seconds = 0;
};

struct AblationOptions {
  std::optional<data::Annotations> annotations;
  Normalizer normalizer = Normalizer::kBiocular;
  tps::TpsSampleConfig eval_tps;  ///< warps for the equivariance metric
  uint64_t eval_seed = 1234;
  size_t eval_images = 0;         ///< cap on evaluation images (0: whole split)
  /// Skip training a variant whose output_dir already holds a model trained
  /// with the identical config.
  bool reuse = false;
};

/// Trains one model per variant with the named terms' weights set to zero
/// (terms: recon, conc, sep, eqv) and evaluates each the same way. Each
/// variant's finalized model and config land in its output directory.
std::vector<AblationRow> ablation_run(const training::TrainConfig& base,
                                      const std::vector<std::set<std::string>>& variants,
                                      const AblationOptions& options);

/// Rows as a CSV table: variant, NME, spread, equivariance error.
void write_ablation_table(const std::vector<AblationRow>& rows, const std::filesystem::path& csv_path);

/// Stacks the evaluation split (or the first `limit` images of it).
torch::Tensor eval_images(const data::Dataset& ds, size_t limit = 0);

}  // namespace lmdis::evaluation
