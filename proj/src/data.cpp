#include "lmdis/data.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "lmdis/log.hpp"
#include "lmdis/tps.hpp"

namespace lmdis::data {

namespace fs = std::filesystem;

void DatasetSpec::validate() const {
  if (format != "folder" && format != "mnist-idx") {
    throw std::invalid_argument("DatasetSpec: unknown format '" + format + "'");
  }
  if (image_size <= 0 || padded_size <= image_size) {
    throw std::invalid_argument("DatasetSpec: need 0 < image_size < padded_size");
  }
  if (pre_resize != 0 && pre_resize < image_size) {
    throw std::invalid_argument("DatasetSpec: pre_resize must be at least image_size");
  }
  const auto [lo, hi] = value_range;
  if (!(0.0f <= lo && lo < hi && hi <= 1.0f)) {
    throw std::invalid_argument("DatasetSpec: value_range must satisfy 0 <= lo < hi <= 1");
  }
  if (channels != 1 && channels != 3) throw std::invalid_argument("DatasetSpec: channels is 1 or 3");
  for (int d : digits) {
    if (d < 0 || d > 9) throw std::invalid_argument("DatasetSpec: digits must be 0..9");
  }
  if (holdout < 0 || limit < 0) throw std::invalid_argument("DatasetSpec: holdout/limit must be >= 0");
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"root", s.root.string()},
       {"format", s.format},
       {"image_size", s.image_size},
       {"padded_size", s.padded_size},
       {"pre_resize", s.pre_resize},
       {"pad_mode", s.pad_mode == PadMode::kEdge ? "edge" : "white"},
       {"value_range", s.value_range},
       {"channels", s.channels},
       {"manifest", s.manifest},
       {"pairs", s.pairs},
       {"annotations", s.annotations},
       {"digits", s.digits},
       {"holdout", s.holdout},
       {"limit", s.limit}};
  if (s.flow_dir) j["flow_dir"] = s.flow_dir->string();
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  if (j.contains("preset")) s = dataset_preset(j.at("preset").get<std::string>());
  s.root = j.value("root", s.root.string());
  s.format = j.value("format", s.format);
  s.image_size = j.value("image_size", s.image_size);
  s.padded_size = j.value("padded_size", s.padded_size);
  s.pre_resize = j.value("pre_resize", s.pre_resize);
  if (j.contains("pad_mode")) {
    const auto m = j.at("pad_mode").get<std::string>();
    if (m != "edge" && m != "white") throw std::invalid_argument("DatasetSpec: pad_mode is edge or white");
    s.pad_mode = m == "edge" ? PadMode::kEdge : PadMode::kWhite;
  }
  s.value_range = j.value("value_range", s.value_range);
  s.channels = j.value("channels", s.channels);
  s.manifest = j.value("manifest", s.manifest);
  s.pairs = j.value("pairs", s.pairs);
  s.annotations = j.value("annotations", s.annotations);
  if (j.contains("flow_dir")) s.flow_dir = j.at("flow_dir").get<std::string>();
  s.digits = j.value("digits", s.digits);
  s.holdout = j.value("holdout", s.holdout);
  s.limit = j.value("limit", s.limit);
  s.validate();
}

DatasetSpec dataset_preset(const std::string& name) {
  DatasetSpec s;
  if (name == "mnist") {
    s.format = "mnist-idx";
    s.image_size = 28;
    s.padded_size = 56;
    s.channels = 1;
  } else if (name == "celeba") {
    s.pre_resize = 100;
  } else if (name == "aflw" || name == "cat") {
    // defaults: 80 -> 96, edge padding
  } else if (name == "shoes") {
    s.image_size = 64;
    s.padded_size = 80;
    s.pad_mode = PadMode::kWhite;
    s.value_range = {0.1f, 0.9f};
  } else if (name == "car") {
    s.image_size = 64;
    s.padded_size = 96;
  } else if (name == "animal") {
    s.image_size = 64;
    s.padded_size = 80;
  } else if (name == "human") {
    s.image_size = 128;
    s.padded_size = 192;
  } else {
    throw std::invalid_argument("unknown dataset preset '" + name + "'");
  }
  return s;
}

namespace {

cv::Mat as_mat(const Image& img) {
  return cv::Mat(img.height, img.width, CV_32FC(img.channels), const_cast<float*>(img.pixels.data()));
}

Image from_float_mat(const cv::Mat& m) {
  Image img(m.cols, m.rows, m.channels());
  cv::Mat dst(m.rows, m.cols, m.type(), img.pixels.data());
  m.copyTo(dst);
  return img;
}

cv::Mat resized(const cv::Mat& m, int w, int h) {
  if (m.cols == w && m.rows == h) return m.clone();
  cv::Mat out;
  const bool shrink = w < m.cols && h < m.rows;
  cv::resize(m, out, cv::Size(w, h), 0, 0, shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  return out;
}

Image match_channels(const Image& raw, int channels) {
  if (raw.channels == channels) return raw;
  cv::Mat out;
  if (raw.channels == 3 && channels == 1) {
    cv::cvtColor(as_mat(raw), out, cv::COLOR_RGB2GRAY);
  } else if (raw.channels == 1 && channels == 3) {
    cv::cvtColor(as_mat(raw), out, cv::COLOR_GRAY2RGB);
  } else {
    throw std::invalid_argument("preprocess: unsupported channel conversion");
  }
  return from_float_mat(out);
}

void clamp_to(Image& img, float lo, float hi) {
  for (auto& v : img.pixels) v = std::clamp(v, lo, hi);
}

}  // namespace

Image preprocess(const Image& raw, const DatasetSpec& spec) {
  if (raw.empty()) throw std::invalid_argument("preprocess: empty image");
  Image img = match_channels(raw, spec.channels);
  const auto [lo, hi] = spec.value_range;
  if (img.width == spec.padded_size && img.height == spec.padded_size) {
    clamp_to(img, lo, hi);
    return img;
  }
  clamp_to(img, 0.0f, 1.0f);
  cv::Mat m = as_mat(img);
  if (spec.pre_resize > 0) {
    m = resized(m, spec.pre_resize, spec.pre_resize);
    const int off = (spec.pre_resize - spec.image_size) / 2;
    m = m(cv::Rect(off, off, spec.image_size, spec.image_size)).clone();
  } else {
    m = resized(m, spec.image_size, spec.image_size);
  }
  const int total = spec.padded_size - spec.image_size;
  const int before = total / 2;
  const int after = total - before;
  cv::Mat padded;
  if (spec.pad_mode == PadMode::kEdge) {
    cv::copyMakeBorder(m, padded, before, after, before, after, cv::BORDER_REPLICATE);
  } else {
    cv::copyMakeBorder(m, padded, before, after, before, after, cv::BORDER_CONSTANT, cv::Scalar::all(1.0));
  }
  Image out = from_float_mat(padded);
  for (auto& v : out.pixels) v = std::clamp(lo + (hi - lo) * v, lo, hi);
  return out;
}

std::array<double, 2> preprocess_point(std::array<double, 2> p, int raw_width, int raw_height,
                                       const DatasetSpec& spec) {
  // work with pixel-edge coordinates (0 at the left edge of the first pixel)
  double x = p[0] - 0.5;
  double y = p[1] - 0.5;
  if (spec.pre_resize > 0) {
    x *= static_cast<double>(spec.pre_resize) / raw_width;
    y *= static_cast<double>(spec.pre_resize) / raw_height;
    const double off = (spec.pre_resize - spec.image_size) / 2;
    x -= off;
    y -= off;
  } else {
    x *= static_cast<double>(spec.image_size) / raw_width;
    y *= static_cast<double>(spec.image_size) / raw_height;
  }
  const double before = (spec.padded_size - spec.image_size) / 2;
  return {x + before + 0.5, y + before + 0.5};
}

std::vector<Image> read_idx_images(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<uint8_t> bytes;
  std::array<uint8_t, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
    bytes.insert(bytes.end(), buf.begin(), buf.begin() + n);
  }
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw std::runtime_error("corrupt gzip stream in " + path.string());
  auto be32 = [&](size_t off) {
    return static_cast<uint32_t>(bytes[off]) << 24 | static_cast<uint32_t>(bytes[off + 1]) << 16 |
           static_cast<uint32_t>(bytes[off + 2]) << 8 | static_cast<uint32_t>(bytes[off + 3]);
  };
  if (bytes.size() < 16 || be32(0) != 0x00000803) {
    throw std::runtime_error(path.string() + " is not an IDX3 ubyte file");
  }
  const uint32_t count = be32(4), rows = be32(8), cols = be32(12);
  if (bytes.size() != 16 + static_cast<size_t>(count) * rows * cols) {
    throw std::runtime_error(path.string() + ": truncated IDX payload");
  }
  std::vector<Image> out;
  out.reserve(count);
  const uint8_t* px = bytes.data() + 16;
  for (uint32_t i = 0; i < count; ++i) {
    Image img(static_cast<int>(cols), static_cast<int>(rows), 1);
    for (size_t k = 0; k < img.pixels.size(); ++k) img.pixels[k] = *px++ / 255.0f;
    out.push_back(std::move(img));
  }
  return out;
}

namespace {

constexpr char kFlowMagic[4] = {'L', 'M', 'F', 'L'};

void put_u32(std::ostream& os, uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

uint32_t get_u32(const unsigned char* b) {
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

static_assert(sizeof(float) == 4);

}  // namespace

FlowImage read_flow(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open flow file " + path.string());
  unsigned char header[16];
  if (!in.read(reinterpret_cast<char*>(header), 16) || std::memcmp(header, kFlowMagic, 4) != 0) {
    throw std::runtime_error(path.string() + ": not a flow file");
  }
  FlowImage f;
  f.width = static_cast<int>(get_u32(header + 4));
  f.height = static_cast<int>(get_u32(header + 8));
  if (get_u32(header + 12) != 1) throw std::runtime_error(path.string() + ": unsupported flow version");
  if (f.width <= 0 || f.height <= 0 || f.width > 1 << 14 || f.height > 1 << 14) {
    throw std::runtime_error(path.string() + ": bad flow dimensions");
  }
  const size_t n = 2 * static_cast<size_t>(f.width) * f.height;
  std::vector<unsigned char> raw(4 * n);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw std::runtime_error(path.string() + ": truncated flow payload");
  }
  f.data.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const uint32_t bits = get_u32(raw.data() + 4 * i);
    std::memcpy(&f.data[i], &bits, 4);
  }
  for (float v : f.data) {
    if (!std::isfinite(v)) throw std::runtime_error(path.string() + ": non-finite flow values");
  }
  return f;
}

void write_flow(const fs::path& path, const FlowImage& flow) {
  if (flow.data.size() != 2 * static_cast<size_t>(flow.width) * flow.height) {
    throw std::invalid_argument("write_flow: data size does not match dimensions");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kFlowMagic, 4);
  put_u32(out, static_cast<uint32_t>(flow.width));
  put_u32(out, static_cast<uint32_t>(flow.height));
  put_u32(out, 1);
  for (float v : flow.data) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
  }
}

Annotations read_annotations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open annotations " + path.string());
  const auto j = nlohmann::json::parse(in);
  Annotations a;
  a.names = j.at("landmarks").get<std::vector<std::string>>();
  a.mirror_pairs = j.value("mirror_pairs", a.mirror_pairs);
  a.normalizer_pairs = j.value("normalizer_pairs", a.normalizer_pairs);
  for (const auto& [key, pts] : j.at("points").items()) {
    auto v = pts.get<std::vector<std::array<double, 2>>>();
    if (v.size() != a.names.size()) {
      throw std::runtime_error("annotations: '" + key + "' has " + std::to_string(v.size()) +
                               " points, expected " + std::to_string(a.names.size()));
    }
    a.points.emplace(key, std::move(v));
  }
  return a;
}

void write_annotations(const fs::path& path, const Annotations& a) {
  nlohmann::json j = {{"landmarks", a.names},
                      {"mirror_pairs", a.mirror_pairs},
                      {"normalizer_pairs", a.normalizer_pairs},
                      {"points", a.points}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

namespace {

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty() && line[0] != '#') out.push_back(line);
  }
  return out;
}

}  // namespace

Dataset Dataset::open(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec_ = spec;
  std::vector<std::string> keys;
  if (spec.format == "mnist-idx") {
    auto digits = spec.digits;
    if (digits.empty()) {
      for (int d = 0; d < 10; ++d) digits.push_back(d);
    }
    for (int d : digits) {
      const auto file = spec.root / ("digit-" + std::to_string(d) + "-idx3-ubyte.gz");
      auto images = read_idx_images(file);
      // hold out the tail of every class so the split is stable per digit
      const size_t hold = std::min<size_t>(spec.holdout, images.size());
      for (size_t i = 0; i < images.size(); ++i) {
        const auto key = std::to_string(d) + "/" + std::to_string(i);
        ds.memory_.emplace(key, preprocess(images[i], spec));
        (i + hold >= images.size() ? ds.eval_keys_ : keys).push_back(key);
      }
    }
  } else {
    keys = read_lines(spec.root / spec.manifest);
    const size_t hold = std::min<size_t>(spec.holdout, keys.size());
    ds.eval_keys_.assign(keys.end() - static_cast<std::ptrdiff_t>(hold), keys.end());
    keys.resize(keys.size() - hold);
    if (!spec.pairs.empty()) {
      for (const auto& line : read_lines(spec.root / spec.pairs)) {
        std::istringstream ss(line);
        FlowPair p;
        if (!(ss >> p.frame_a >> p.frame_b >> p.flow)) {
          throw std::runtime_error("pair manifest: malformed line '" + line + "'");
        }
        ds.pairs_.push_back(std::move(p));
      }
    }
  }
  if (spec.limit > 0 && keys.size() > static_cast<size_t>(spec.limit)) keys.resize(spec.limit);
  ds.keys_ = std::move(keys);
  return ds;
}

Image Dataset::load_key(const std::string& key) const {
  if (auto it = memory_.find(key); it != memory_.end()) return it->second;
  return preprocess(read_image(spec_.root / key, spec_.channels), spec_);
}

Image Dataset::get(size_t i) const { return load_key(keys_.at(i)); }
Image Dataset::get_eval(size_t i) const { return load_key(eval_keys_.at(i)); }

fs::path Dataset::flow_path(const FlowPair& p) const {
  return spec_.flow_dir ? *spec_.flow_dir / p.flow : spec_.root / p.flow;
}

BatchIterator::BatchIterator(const Dataset& ds, int batch_size, uint64_t seed, bool pair_with_flow)
    : ds_(&ds), batch_size_(batch_size), seed_(seed), flow_(pair_with_flow) {
  if (batch_size <= 0) throw std::invalid_argument("BatchIterator: batch_size must be positive");
  const size_t n = flow_ ? ds.pairs().size() : ds.size();
  if (n == 0) throw std::invalid_argument(flow_ ? "BatchIterator: no flow pairs" : "BatchIterator: empty dataset");
  shuffle();
}

size_t BatchIterator::batches_per_epoch() const {
  const size_t n = order_.size();
  return (n + batch_size_ - 1) / batch_size_;
}

void BatchIterator::shuffle() {
  const size_t n = flow_ ? ds_->pairs().size() : ds_->size();
  order_.resize(n);
  for (size_t i = 0; i < n; ++i) order_[i] = i;
  std::seed_seq seq{static_cast<uint32_t>(seed_), static_cast<uint32_t>(seed_ >> 32),
                    static_cast<uint32_t>(epoch_), static_cast<uint32_t>(epoch_ >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(order_.begin(), order_.end(), rng);
}

Batch BatchIterator::next() {
  for (size_t attempts = 0;; ++attempts) {
    if (attempts > 2 * order_.size() + 2) throw std::runtime_error("BatchIterator: no loadable items");
    if (cursor_ >= order_.size()) {
      ++epoch_;
      cursor_ = 0;
      shuffle();
    }
    const size_t end = std::min(order_.size(), cursor_ + static_cast<size_t>(batch_size_));
    std::vector<Image> first, second;
    std::vector<torch::Tensor> ox, oy;
    Batch b;
    for (size_t i = cursor_; i < end; ++i) {
      const size_t idx = order_[i];
      try {
        if (!flow_) {
          first.push_back(ds_->get(idx));
        } else {
          const auto& p = ds_->pairs()[idx];
          const auto path = ds_->flow_path(p);
          if (!fs::exists(path)) {
            ++skipped_;
            log_warn("missing flow sidecar " + path.string());
            continue;
          }
          auto flow = read_flow(path);
          auto a = ds_->load_key(p.frame_a);
          auto c = ds_->load_key(p.frame_b);
          if (flow.width != c.width || flow.height != c.height) {
            throw std::runtime_error("flow size does not match frame size");
          }
          auto t = torch::from_blob(flow.data.data(), {flow.height, flow.width, 2}, torch::kFloat32).clone();
          ox.push_back(t.select(2, 0));
          oy.push_back(t.select(2, 1));
          first.push_back(std::move(a));
          second.push_back(std::move(c));
        }
        b.indices.push_back(idx);
      } catch (const std::exception& e) {
        ++skipped_;
        log_warn(std::string("skipping item: ") + e.what());
      }
    }
    cursor_ = end;
    if (first.empty()) continue;
    b.images = stack_images(first);
    if (flow_) {
      b.next = stack_images(second);
      b.flow = losses::FlowField{torch::stack(ox), torch::stack(oy)};
    }
    return b;
  }
}

nlohmann::json BatchIterator::state() const {
  return {{"seed", seed_}, {"epoch", epoch_}, {"cursor", cursor_}, {"skipped", skipped_}};
}

void BatchIterator::restore(const nlohmann::json& s) {
  seed_ = s.at("seed").get<uint64_t>();
  epoch_ = s.at("epoch").get<int64_t>();
  cursor_ = s.at("cursor").get<size_t>();
  skipped_ = s.value("skipped", size_t{0});
  shuffle();
}

std::vector<std::array<double, 2>> write_translating_digits(const fs::path& root,
                                                            const std::vector<Image>& digits,
                                                            const DatasetSpec& spec, double max_shift,
                                                            uint64_t seed) {
  fs::create_directories(root / "frames");
  fs::create_directories(root / "flow");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> shift(-max_shift, max_shift);
  std::ofstream manifest(root / "train.txt");
  std::ofstream pairs(root / "pairs.txt");
  std::vector<std::array<double, 2>> shifts;
  for (size_t i = 0; i < digits.size(); ++i) {
    const Image a = preprocess(digits[i], spec);
    const double dx = shift(rng), dy = shift(rng);
    // frame b shows the digit moved by (dx, dy): b(p) = a(p - d)
    Eigen::Matrix<double, 2, 3> affine;
    affine << 1, 0, -dx / a.width, 0, 1, -dy / a.height;
    const Image b = tps::warp_image(a, tps::TpsTransform::from_affine(affine));
    const auto name_a = "frames/" + std::to_string(i) + "a.png";
    const auto name_b = "frames/" + std::to_string(i) + "b.png";
    const auto name_f = "flow/" + std::to_string(i) + ".flo";
    write_png(root / name_a, a);
    write_png(root / name_b, b);
    FlowImage f;
    f.width = a.width;
    f.height = a.height;
    f.data.resize(2 * static_cast<size_t>(a.width) * a.height);
    for (size_t k = 0; k < f.data.size(); k += 2) {
      f.data[k] = static_cast<float>(-dx);
      f.data[k + 1] = static_cast<float>(-dy);
    }
    write_flow(root / name_f, f);
    manifest << name_a << '\n' << name_b << '\n';
    pairs << name_a << ' ' << name_b << ' ' << name_f << '\n';
    shifts.push_back({dx, dy});
  }
  DatasetSpec out = spec;
  out.format = "folder";
  out.root = ".";
  out.pairs = "pairs.txt";
  out.digits.clear();
  std::ofstream(root / "dataset.json") << nlohmann::json(out).dump(1) << '\n';
  return shifts;
}

nlohmann::json ValidationReport::to_json() const {
  return {{"ok", ok()},
          {"images", images},
          {"undecodable", undecodable},
          {"wrong_size", wrong_size},
          {"out_of_range", out_of_range},
          {"missing_annotations", missing_annotations},
          {"pairs", pairs},
          {"missing_flow", missing_flow},
          {"bad_flow", bad_flow},
          {"problems", problems}};
}

ValidationReport validate_dataset(const DatasetSpec& spec) {
  ValidationReport r;
  auto problem = [&](std::string msg) {
    if (r.problems.size() < 50) r.problems.push_back(std::move(msg));
  };
  Dataset ds;
  try {
    ds = Dataset::open(spec);
  } catch (const std::exception& e) {
    problem(e.what());
    return r;
  }
  std::optional<Annotations> ann;
  if (!spec.annotations.empty()) {
    try {
      ann = read_annotations(spec.root / spec.annotations);
    } catch (const std::exception& e) {
      problem(e.what());
    }
  }
  const auto [lo, hi] = spec.value_range;
  auto check = [&](const std::string& key) {
    ++r.images;
    Image img;
    try {
      img = ds.load_key(key);
    } catch (const std::exception& e) {
      ++r.undecodable;
      problem(key + ": " + e.what());
      return;
    }
    if (img.width != spec.padded_size || img.height != spec.padded_size || img.channels != spec.channels) {
      ++r.wrong_size;
      problem(key + ": unexpected size after preprocessing");
    }
    const auto [mn, mx] = std::minmax_element(img.pixels.begin(), img.pixels.end());
    if (*mn < lo || *mx > hi || !std::isfinite(*mn) || !std::isfinite(*mx)) {
      ++r.out_of_range;
      problem(key + ": values outside the configured range");
    }
    if (ann && !ann->points.count(key)) ++r.missing_annotations;
  };
  for (size_t i = 0; i < ds.size(); ++i) check(ds.key(i));
  for (size_t i = 0; i < ds.eval_size(); ++i) check(ds.eval_key(i));
  if (ann && r.missing_annotations) problem(std::to_string(r.missing_annotations) + " images lack annotations");
  for (const auto& p : ds.pairs()) {
    ++r.pairs;
    const auto path = ds.flow_path(p);
    if (!fs::exists(path)) {
      ++r.missing_flow;
      continue;
    }
    try {
      const auto f = read_flow(path);
      if (f.width != spec.padded_size || f.height != spec.padded_size) {
        ++r.bad_flow;
        problem(p.flow + ": flow size differs from the padded image size");
      }
    } catch (const std::exception& e) {
      ++r.bad_flow;
      problem(e.what());
    }
  }
  if (r.missing_flow) problem(std::to_string(r.missing_flow) + " flow sidecars missing");
  return r;
}

DatasetSpec load_dataset_spec(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  auto spec = nlohmann::json::parse(in).get<DatasetSpec>();
  if (spec.root.is_relative()) spec.root = (file.parent_path() / spec.root).lexically_normal();
  return spec;
}

}  // namespace lmdis::data
