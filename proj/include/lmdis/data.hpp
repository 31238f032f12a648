#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "lmdis/image.hpp"
#include "lmdis/losses.hpp"

namespace lmdis::data {

enum class PadMode { kEdge, kWhite };

/// How raw images become network inputs: optional pre-resize plus center
/// crop, resize to image_size, pad to padded_size, remap [0,1] to value_range.
///
/// Two storage formats are understood:
///   "folder"    root/<manifest> lists image paths relative to root, one per line;
///               optional root/<pairs> lists "frame_a frame_b flow_file" triples.
///   "mnist-idx" root holds digit-<d>-idx3-ubyte.gz files; `digits` selects classes.
struct DatasetSpec {
  std::filesystem::path root;
  std::string format = "folder";
  int image_size = 80;
  int padded_size = 96;
  int pre_resize = 0;  ///< resize to this square first and center-crop image_size (0: off)
  PadMode pad_mode = PadMode::kEdge;
  std::array<float, 2> value_range{0.0f, 1.0f};
  int channels = 3;
  std::string manifest = "train.txt";
  std::string pairs;                     ///< flow-pair manifest, empty when unused
  std::optional<std::filesystem::path> flow_dir;  ///< base for flow files (default: root)
  std::string annotations;               ///< annotation sidecar relative to root
  std::vector<int> digits;               ///< mnist-idx only; empty = all ten
  int holdout = 0;                       ///< last N images form the evaluation split
  int limit = 0;                         ///< keep at most N training images (0: all)

  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// Presets for the datasets of the original experiments, keyed by lowercase
/// name (mnist, celeba, aflw, cat, shoes, car, animal, human).
DatasetSpec dataset_preset(const std::string& name);

/// Resize/crop, pad and remap one decoded image. An input already at
/// padded_size is taken as conforming and only clamped to the value range.
Image preprocess(const Image& raw, const DatasetSpec& spec);

/// Maps a 1-based pixel coordinate of the raw image into the padded frame.
std::array<double, 2> preprocess_point(std::array<double, 2> p, int raw_width, int raw_height,
                                       const DatasetSpec& spec);

/// Reads every image of a gzipped IDX3 file as 8-bit values scaled to [0,1].
std::vector<Image> read_idx_images(const std::filesystem::path& path);

/// Dense flow sidecar: 16-byte header ("LMFL", uint32 width, uint32 height,
/// uint32 version=1, little endian) then width*height (ox, oy) float32 pairs,
/// row-major. (ox, oy) at a pixel of frame b points to its source in frame a.
struct FlowImage {
  int width = 0;
  int height = 0;
  std::vector<float> data;  ///< interleaved ox, oy

  float ox(int x, int y) const { return data[2 * (static_cast<size_t>(y) * width + x)]; }
  float oy(int x, int y) const { return data[2 * (static_cast<size_t>(y) * width + x) + 1]; }
};

FlowImage read_flow(const std::filesystem::path& path);
void write_flow(const std::filesystem::path& path, const FlowImage& flow);

/// Landmark annotations in the padded frame (1-based pixel centers).
struct Annotations {
  std::vector<std::string> names;
  std::vector<std::array<int, 2>> mirror_pairs;   ///< (left, right) landmark indices
  std::map<std::string, std::array<int, 2>> normalizer_pairs;  ///< e.g. "biocular": eye indices
  std::map<std::string, std::vector<std::array<double, 2>>> points;  ///< keyed by manifest path

  size_t count() const { return names.size(); }
};

Annotations read_annotations(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& path, const Annotations& ann);

struct FlowPair {
  std::string frame_a;
  std::string frame_b;
  std::string flow;
};

/// A loaded dataset. MNIST is held in memory; folder datasets decode lazily.
class Dataset {
 public:
  static Dataset open(const DatasetSpec& spec);

  const DatasetSpec& spec() const { return spec_; }
  size_t size() const { return keys_.size(); }
  size_t eval_size() const { return eval_keys_.size(); }
  const std::string& key(size_t i) const { return keys_[i]; }
  const std::string& eval_key(size_t i) const { return eval_keys_[i]; }

  /// Preprocessed training image i. Throws std::runtime_error when undecodable.
  Image get(size_t i) const;
  Image get_eval(size_t i) const;
  Image load_key(const std::string& key) const;

  const std::vector<FlowPair>& pairs() const { return pairs_; }
  std::filesystem::path flow_path(const FlowPair& p) const;

 private:
  DatasetSpec spec_;
  std::vector<std::string> keys_;
  std::vector<std::string> eval_keys_;
  std::map<std::string, Image> memory_;
  std::vector<FlowPair> pairs_;
};

struct Batch {
  torch::Tensor images;                 ///< [B, C, H, W]
  torch::Tensor next;                   ///< frame b of flow pairs, else undefined
  std::optional<losses::FlowField> flow;
  std::vector<size_t> indices;
};

/// Shuffled epochs over a dataset. The order of epoch e depends only on
/// (seed, e), so a cursor position fully determines the remaining stream.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, int batch_size, uint64_t seed, bool pair_with_flow = false);

  /// Fills the next batch, crossing into a new epoch when one runs out.
  /// Items that fail to load are skipped and counted.
  Batch next();

  int64_t epoch() const { return epoch_; }
  size_t cursor() const { return cursor_; }
  size_t skipped() const { return skipped_; }
  /// Number of batches in one epoch: ceil(N / batch_size).
  size_t batches_per_epoch() const;

  nlohmann::json state() const;
  void restore(const nlohmann::json& state);

 private:
  void shuffle();

  const Dataset* ds_;
  int batch_size_;
  uint64_t seed_;
  bool flow_;
  int64_t epoch_ = 0;
  size_t cursor_ = 0;
  size_t skipped_ = 0;
  std::vector<size_t> order_;
};

/// Writes a flow-paired folder dataset of translating digits: each pair is a
/// digit and a sub-pixel shifted copy, with the exact inverse shift as flow.
/// Returns the per-pair shifts (dx, dy) in pixels.
std::vector<std::array<double, 2>> write_translating_digits(const std::filesystem::path& root,
                                                            const std::vector<Image>& digits,
                                                            const DatasetSpec& spec, double max_shift,
                                                            uint64_t seed);

struct ValidationReport {
  size_t images = 0;
  size_t undecodable = 0;
  size_t wrong_size = 0;
  size_t out_of_range = 0;
  size_t missing_annotations = 0;
  size_t pairs = 0;
  size_t missing_flow = 0;
  size_t bad_flow = 0;
  std::vector<std::string> problems;

  bool ok() const { return problems.empty(); }
  nlohmann::json to_json() const;
};

/// Checks manifests, decodability, sizes and value ranges after
/// preprocessing, annotation coverage and flow sidecars.
ValidationReport validate_dataset(const DatasetSpec& spec);

/// Reads root/dataset.json, resolving a relative root against its directory.
DatasetSpec load_dataset_spec(const std::filesystem::path& file);

}  // namespace lmdis::data
