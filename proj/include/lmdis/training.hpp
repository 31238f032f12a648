#pragma once

#include <torch/torch.h>

#include <array>
#include <deque>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <string>

#include "json.hpp"
#include "lmdis/data.hpp"
#include "lmdis/losses.hpp"
#include "lmdis/model.hpp"
#include "lmdis/tps.hpp"

namespace lmdis::training {

/// Everything a training run needs, as one JSON document.
struct TrainConfig {
  ModelConfig model;
  data::DatasetSpec dataset;
  int batch_size = 16;
  int64_t iterations = 300000;
  uint64_t seed = 0;

  double lr = 1e-3;
  std::array<int64_t, 2> lr_decay_iters{100000, 200000};  ///< lr x0.1 at each
  /// weights.recon is the initial lambda_recon; it grows x10 at each of these
  std::array<int64_t, 2> recon_increase_iters{100000, 200000};
  losses::LossWeights weights;

  tps::TpsSampleConfig tps;
  int64_t landmark_control_warmup_iters = 5000;

  bool augment = true;  ///< brightness/contrast jitter, color images only
  double brightness = 0.12;
  std::array<double, 2> contrast{0.8, 1.25};

  bool use_flow = false;  ///< equivariance pairs come from flow sidecars instead of TPS

  std::filesystem::path output_dir = "run";
  int64_t log_every = 50;
  int64_t dump_every = 1000;      ///< landmark overlay PNGs (0: off)
  int64_t checkpoint_every = 5000;
  int bn_finalize_batches = 256;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Reads a config file; relative dataset roots and output dirs resolve
/// against the file's directory.
TrainConfig load_config(const std::filesystem::path& file);

struct Schedule {
  double lr = 0;
  double lambda_recon = 0;
  double landmark_mode_prob = 0;
};

Schedule schedule(int64_t iteration, const TrainConfig& cfg);

/// Brightness offset U(-b, b) and contrast gain U(lo, hi) about the image
/// mean, clipped to [0,1]. Works on [C,H,W] or [B,C,H,W] (one draw per item).
torch::Tensor augment(const torch::Tensor& images, double brightness, std::array<double, 2> contrast,
                      std::mt19937_64& rng);

struct StepResult {
  bool applied = false;         ///< false when the step was aborted
  std::string incident;         ///< why it was aborted
  losses::LossBreakdown losses;
  Schedule sched;
  int landmark_mode_items = 0;  ///< batch items warped with landmark control points
  bool flow_clamped = false;
};

/// Owns the model, the optimizer and every piece of state needed to resume.
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);

  const TrainConfig& config() const { return cfg_; }
  LandmarkAutoencoder& model() { return model_; }
  int64_t iteration() const { return iteration_; }
  std::mt19937_64& rng() { return rng_; }

  /// One optimization step on a preprocessed batch. On a non-finite loss or
  /// gradient the update is skipped and model, optimizer, rng and iteration
  /// are left as they were.
  StepResult step(const data::Batch& batch);

  /// Trains until `iterations` (or cfg.iterations), pulling from `batches`,
  /// with CSV logging, overlay dumps and periodic checkpoints.
  void run(data::BatchIterator& batches, std::optional<int64_t> until = std::nullopt);

  /// Recomputes batch-norm population statistics from `num_batches` batches
  /// of a fixed-seed stream and freezes them.
  void finalize_batchnorm(const data::Dataset& ds, int num_batches, uint64_t seed);

  /// Full resumable state: model, Adam moments, iteration, rng, iterator
  /// position and recent loss history.
  void save_state(const std::filesystem::path& path, const data::BatchIterator* batches = nullptr) const;
  /// Restores a state written by save_state; returns the stored iterator
  /// state (null when none was saved).
  nlohmann::json load_state(const std::filesystem::path& path);

  const std::deque<double>& loss_history() const { return history_; }

 private:
  void dump_overlay(const torch::Tensor& images, const torch::Tensor& landmarks, const torch::Tensor& recon);
  void log_csv(const StepResult& r, double seconds);

  TrainConfig cfg_;
  LandmarkAutoencoder model_{nullptr};
  std::unique_ptr<torch::optim::Adam> optimizer_;
  std::mt19937_64 rng_;
  int64_t iteration_ = 0;
  std::deque<double> history_;
  std::unique_ptr<std::ofstream> csv_;
};

inline constexpr size_t kHistorySize = 1000;

}  // namespace lmdis::training
