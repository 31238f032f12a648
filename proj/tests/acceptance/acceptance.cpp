// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any fails.

#include <torch/torch.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "../support/oracles.hpp"
#include "CLI11.hpp"
#include "httplib.h"
#include "lmdis/data.hpp"
#include "lmdis/evaluation.hpp"
#include "lmdis/heatmap.hpp"
#include "lmdis/log.hpp"
#include "lmdis/losses.hpp"
#include "lmdis/model.hpp"
#include "lmdis/serve.hpp"
#include "lmdis/tps.hpp"
#include "lmdis/training.hpp"

namespace fs = std::filesystem;
using namespace lmdis;
using nlohmann::json;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- gradients

constexpr int kGradInstances = 20;
constexpr double kGradTol = 1e-4;
// Small steps keep central differences away from the kinks of leaky ReLU,
// max-pooling and bilinear lookups.
constexpr double kGradStep = 1e-6;

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  torch::manual_seed(101);
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> side(6, 8), kdist(2, 4);
  std::map<std::string, double> worst;
  using Fn = std::function<torch::Tensor(const std::vector<torch::Tensor>&)>;
  auto check = [&](const std::string& name, const Fn& fn, std::vector<torch::Tensor> inputs) {
    worst[name] = std::max(worst[name], oracle::gradcheck(fn, std::move(inputs), kGradStep));
  };

  for (int trial = 0; trial < kGradInstances; ++trial) {
    const int64_t h = side(rng), w = side(rng), k = kdist(rng), b = 2;
    const auto mix = torch::randn({b, k, 2}, kF64);
    const auto mix_k = torch::randn({b, k}, kF64);
    const auto inside = [&] {
      auto c = torch::rand({b, k, 2}, kF64);
      return torch::stack({c.select(-1, 0) * (w - 3) + 2, c.select(-1, 1) * (h - 3) + 2}, -1);
    };

    const auto weights = torch::randn({b, k + 1, h, w}, kF64);
    check("channel_softmax",
          [&](const std::vector<torch::Tensor>& in) {
            return (channel_softmax({in[0], MapKind::kRawScores}).data * weights).sum();
          },
          {torch::randn({b, k + 1, h, w}, kF64)});
    check("soft_argmax",
          [&](const std::vector<torch::Tensor>& in) {
            return (soft_argmax({in[0].exp(), MapKind::kNormalized}).landmarks.coords * mix).sum();
          },
          {torch::randn({b, k, h, w}, kF64)});
    check("spatial_variance",
          [&](const std::vector<torch::Tensor>& in) {
            auto [vu, vv] = spatial_variance({in[0].exp(), MapKind::kNormalized}, LandmarkSet{in[1], w, h});
            return (vu * mix_k).sum() + (vv * mix_k).square().sum();
          },
          {torch::randn({b, k, h, w}, kF64), inside()});
    check("render+normalize",
          [&](const std::vector<torch::Tensor>& in) {
            const LandmarkSet lm{in[0], w, h};
            auto dec = normalize_decoder_maps(render_gaussian_maps(lm, in[1].abs() + 0.8, GaussianMode::kDecoder));
            auto approx = render_gaussian_maps(lm, 1.3, GaussianMode::kApproxDetection);
            return (dec.data * weights).sum() + (approx.data * weights.narrow(1, 0, k)).sum() * 10;
          },
          {inside(), torch::rand({b, k}, kF64)});
    const int64_t s = 3, c = 2;
    check("masked_pool",
          [&](const std::vector<torch::Tensor>& in) {
            return (masked_pool(in[0], in[1], in[2]) * torch::ones({b, k + 1, c}, kF64).cumsum(1)).sum();
          },
          {torch::randn({b, s, h, w}, kF64), torch::rand({b, k + 1, h, w}, kF64), torch::randn({k + 1, c, s}, kF64)});
    const auto fweights = torch::randn({b, s, h, w}, kF64);
    check("unpool",
          [&](const std::vector<torch::Tensor>& in) {
            return (unpool({in[0], MapKind::kNormalized}, in[1], in[2]) * fweights).sum();
          },
          {torch::rand({b, k + 1, h, w}, kF64), torch::randn({b, k + 1, c}, kF64),
           torch::randn({k + 1, s, c}, kF64)});

    // losses
    const double edge = std::sqrt(static_cast<double>(w * h));
    check("loss:concentration",
          [&](const std::vector<torch::Tensor>& in) {
            return losses::concentration_loss({torch::ones_like(in[0]), in[0], in[1]});
          },
          {torch::rand({b, k}, kF64) * 0.1, torch::rand({b, k}, kF64) * 0.1});
    check("loss:separation",
          [&](const std::vector<torch::Tensor>& in) { return losses::separation_loss(in[0] / edge, 0.2); },
          {inside()});
    std::mt19937_64 trng(trial);
    tps::TpsSampleConfig tcfg;
    std::vector<tps::TpsTransform> ts;
    for (int64_t i = 0; i < b; ++i) ts.push_back(tps::sample_random_tps(tcfg, tps::ControlMode::kGrid, std::nullopt, trng));
    check("loss:equivariance(tps)",
          [&](const std::vector<torch::Tensor>& in) {
            return losses::equivariance_loss(LandmarkSet{in[0], w, h}, LandmarkSet{in[1], w, h}, ts);
          },
          {inside(), inside()});
    check("loss:equivariance(flow)",
          [&](const std::vector<torch::Tensor>& in) {
            return losses::equivariance_loss(LandmarkSet{in[0], w, h}, LandmarkSet{in[1], w, h},
                                             losses::FlowField{in[2], in[3]})
                .loss;
          },
          {inside(), inside(), torch::randn({b, h, w}, kF64), torch::randn({b, h, w}, kF64)});
    check("loss:flow_preference",
          [&](const std::vector<torch::Tensor>& in) {
            auto fg = render_gaussian_maps(LandmarkSet{in[0], w, h}, 1.5, GaussianMode::kDecoder).data;
            return losses::flow_preference_loss(fg.narrow(1, 0, k), in[1]);
          },
          {inside(), torch::rand({b, h, w}, kF64)});
    const auto target = torch::rand({b, 1, h, w}, kF64);
    check("loss:reconstruction",
          [&](const std::vector<torch::Tensor>& in) { return losses::reconstruction_loss(target, in[0], 0.05); },
          {torch::rand({b, 1, h, w}, kF64)});
  }

  // decode through landmarks: tiny float64 autoencoders, with and without descriptors
  for (int trial = 0; trial < kGradInstances; ++trial) {
    const int64_t size = 8;
    ModelConfig cfg;
    cfg.image_size = size;
    cfg.image_channels = trial % 2 ? 3 : 1;
    cfg.num_landmarks = 3;
    cfg.use_descriptors = trial / 2 % 2 == 1;
    cfg.descriptor_dim = 2;
    cfg.feature_dim = 3;
    cfg.hourglass_channels = {3, 4};
    cfg.skip_convs = {1};
    LandmarkAutoencoder m(cfg);
    m->to(torch::kFloat64);
    m->eval();
    const auto target = torch::rand({1, cfg.image_channels, size, size}, kF64);
    const auto desc = cfg.use_descriptors ? torch::randn({1, 4, 2}, kF64) : torch::Tensor();
    auto coords = torch::rand({1, 3, 2}, kF64) * 5 + 2;
    check("decode-through-landmarks",
          [&](const std::vector<torch::Tensor>& in) {
            auto dec = m->decode(LandmarkSet{in[0], size, size}, desc);
            return (dec.mean - target).square().sum();
          },
          {coords});
  }

  const double secs = seconds_since(t0);
  double overall = 0;
  std::string name_of_worst;
  for (const auto& [name, err] : worst) {
    if (err >= overall) {
      overall = err;
      name_of_worst = name;
    }
  }
  return {overall <= kGradTol && secs < 120.0,
          std::to_string(worst.size()) + " ops x " + std::to_string(kGradInstances) +
              " instances, worst rel err " + fmt(overall) + " (" + name_of_worst + "), " + fmt(secs, 3) + " s"};
}

// ------------------------------------------------------------------ oracles

Outcome oracle_equivalence() {
  torch::manual_seed(202);
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<int> bd(1, 3), kd(2, 5), sd(5, 9), cd(1, 4);
  double softmax_err = 0, argmax_err = 0, var_err = 0, pool_err = 0, unpool_err = 0;
  const int n = 50;
  for (int trial = 0; trial < n; ++trial) {
    const int64_t b = bd(rng), k = kd(rng), h = sd(rng), w = sd(rng), s = cd(rng), c = cd(rng);
    const auto raw = torch::randn({b, k + 1, h, w}) * 3;

    const auto soft = channel_softmax({raw, MapKind::kRawScores});
    softmax_err = std::max(softmax_err, (soft.data.to(torch::kFloat64) - oracle::softmax(raw)).abs().max().item<double>());

    const auto sa = soft_argmax(soft, k);
    const auto ref_centers = torch::empty({b, k, 2}, kF64);
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < k; ++j) {
        const auto m = oracle::moments(soft.data, i, j);
        ref_centers[i][j][0] = m.x;
        ref_centers[i][j][1] = m.y;
        argmax_err = std::max({argmax_err, std::abs(sa.landmarks.coords[i][j][0].item<double>() - m.x),
                               std::abs(sa.landmarks.coords[i][j][1].item<double>() - m.y)});
      }
    const auto [vu, vv] = spatial_variance(soft, LandmarkSet{ref_centers.to(torch::kFloat32), w, h});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < k; ++j) {
        const auto m = oracle::moments(soft.data, i, j);
        var_err = std::max({var_err, std::abs(vu[i][j].item<double>() - m.var_u),
                            std::abs(vv[i][j].item<double>() - m.var_v)});
      }

    const auto features = torch::randn({b, s, h, w});
    const auto masks = torch::rand({b, k + 1, h, w}) / (h * w);
    const auto proj = torch::randn({k + 1, c, s});
    pool_err = std::max(pool_err, (masked_pool(features, masks, proj).to(torch::kFloat64) -
                                   oracle::masked_pool(features, masks, proj))
                                      .abs()
                                      .max()
                                      .item<double>());
    const auto desc = torch::randn({b, k + 1, c});
    const auto back = torch::randn({k + 1, s, c});
    unpool_err = std::max(unpool_err, (unpool(soft, desc, back).to(torch::kFloat64) -
                                       oracle::unpool(soft.data, desc, back, kLeakySlope))
                                          .abs()
                                          .max()
                                          .item<double>());
  }
  const double worst = std::max({softmax_err, argmax_err, var_err, pool_err, unpool_err});
  return {worst <= 1e-5, std::to_string(n) + " float32 instances each; max abs err softmax " + fmt(softmax_err) +
                             ", soft_argmax " + fmt(argmax_err) + ", spatial_variance " + fmt(var_err) +
                             ", masked_pool " + fmt(pool_err) + ", unpool " + fmt(unpool_err)};
}

// ------------------------------------------------------------------ analytic

Outcome analytic_values() {
  const double sigma = 0.08;
  const auto pair = torch::tensor({{{0.3, 0.4}, {0.3 + sigma, 0.4 + sigma}}}, kF64);  // distance sqrt(2) sigma
  const double sep = losses::separation_loss(pair, sigma).item<double>();
  const double sep_err = std::abs(sep - 2.0 / std::numbers::e);

  const LandmarkSet lm{torch::tensor({{{4.0, 5.0}}}, kF64), 9, 9};
  const double peak = render_gaussian_maps(lm, 1.0, GaussianMode::kDecoder).data[0][0][4][3].item<double>();
  const double peak_err = std::abs(peak - 1.0 / (2 * std::numbers::pi));

  const auto img = torch::rand({2, 3, 8, 8}, kF64);
  const double recon = losses::reconstruction_loss(img, img, 0.05).item<double>();
  const double recon_err = std::abs(recon - std::log(2 * std::numbers::pi * 0.0025));

  const double worst = std::max({sep_err, peak_err, recon_err});
  return {worst <= 1e-6, "separation " + fmt(sep, 10) + " (2/e), decoder peak " + fmt(peak, 10) +
                             " (1/2pi), recon " + fmt(recon, 10) + " (ln 2pi 0.0025); max err " + fmt(worst)};
}

// ----------------------------------------------------------------------- tps

Outcome tps_exactness() {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> n(0, 0.05);
  double interp_err = 0;
  int solves = 0;
  for (int p = 9; p <= 25; ++p) {
    for (int trial = 0; trial < 5; ++trial) {
      tps::Points src(p, 2), dst(p, 2);
      for (int i = 0; i < p; ++i) {
        src(i, 0) = u(rng);
        src(i, 1) = u(rng);
        dst(i, 0) = src(i, 0) + n(rng);
        dst(i, 1) = src(i, 1) + n(rng);
      }
      const auto t = tps::solve_tps(src, dst, 0.0);
      interp_err = std::max(interp_err, (tps::apply_tps(t, src) - dst).cwiseAbs().maxCoeff());
      ++solves;
    }
  }

  const int draws = 10000;
  tps::TpsSampleConfig cfg;  // defaults follow the original sampler
  auto translation_only = cfg;
  translation_only.rotation_std_deg = 0;
  translation_only.log2_scale_std = 0;
  translation_only.grid_perturb_std = 0;
  translation_only.landmark_perturb_std = 0;
  double max_shift = 0;
  for (int i = 0; i < draws; ++i) {
    const auto t = tps::sample_random_tps(translation_only, tps::ControlMode::kGrid, std::nullopt, rng);
    const Eigen::Vector2d shift = t.apply(Eigen::Vector2d(0.5, 0.5)) - Eigen::Vector2d(0.5, 0.5);
    max_shift = std::max(max_shift, shift.cwiseAbs().maxCoeff());
  }
  const bool bound_ok = cfg.translate_range == 0.15 && max_shift <= 0.15 + 1e-12 && max_shift > 0.149;

  tps::Points lms(4, 2);
  lms << 0.3, 0.3, 0.7, 0.3, 0.5, 0.6, 0.4, 0.8;
  int landmark_mode = 0;
  for (int i = 0; i < draws; ++i) {
    tps::ControlMode mode;
    tps::sample_random_tps(cfg, lms, rng, &mode);
    landmark_mode += mode == tps::ControlMode::kLandmark;
  }
  const double freq = landmark_mode / static_cast<double>(draws);
  const bool freq_ok = std::abs(freq - 0.30) <= 0.02;

  return {interp_err <= 1e-6 && bound_ok && freq_ok,
          std::to_string(solves) + " reg=0 solves (P=9..25) max residual " + fmt(interp_err) +
              "; max |translation| " + fmt(max_shift, 6) + " (bound 0.15); landmark-mode frequency " +
              fmt(freq, 4) + " over 1e4 draws"};
}

// --------------------------------------------------------------- desk MNIST

struct MnistResult {
  Outcome equivariance, spread, collapse, centered;
  fs::path full_checkpoint;
};

training::TrainConfig rescaled(training::TrainConfig cfg, int64_t iterations) {
  if (iterations <= 0 || iterations == cfg.iterations) return cfg;
  const double f = static_cast<double>(iterations) / static_cast<double>(cfg.iterations);
  auto scale = [&](int64_t v) { return static_cast<int64_t>(std::llround(v * f)); };
  for (auto& v : cfg.lr_decay_iters) v = scale(v);
  for (auto& v : cfg.recon_increase_iters) v = scale(v);
  cfg.landmark_control_warmup_iters = scale(cfg.landmark_control_warmup_iters);
  cfg.iterations = iterations;
  return cfg;
}

MnistResult desk_mnist(const fs::path& config, const fs::path& workdir, int64_t iterations, bool reuse) {
  auto cfg = rescaled(training::load_config(config), iterations);
  cfg.output_dir = workdir / "mnist";
  cfg.dump_every = 0;
  const auto ds = data::Dataset::open(cfg.dataset);
  const auto images = evaluation::eval_images(ds);
  const double size = cfg.model.map_size();

  // iteration 0: the freshly initialized model, batch-norm statistics
  // finalized the same way as after training
  training::Trainer init(cfg);
  init.finalize_batchnorm(ds, cfg.bn_finalize_batches, cfg.seed + 1);
  const auto lm0 = evaluation::detect_landmarks(init.model(), images);
  const double spread0 = evaluation::landmark_spread(lm0);
  const double center = (size + 1) / 2.0;
  const double off_center = (lm0 - center).square().sum(-1).sqrt().max().item<double>();

  evaluation::AblationOptions opts;
  opts.eval_tps = cfg.tps;
  opts.reuse = reuse;
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = evaluation::ablation_run(cfg, {{}, {"sep"}}, opts);
  evaluation::write_ablation_table(rows, cfg.output_dir / "ablation.csv");
  const auto& full = rows[0];
  const auto& nosep = rows[1];

  MnistResult r;
  r.full_checkpoint = cfg.output_dir / "ablation_full" / "model.lmd";
  const std::string run = std::to_string(cfg.iterations) + " iterations, " + fmt(seconds_since(t0) / 60.0, 3) +
                          " min for both variants";
  r.centered = {off_center <= 0.1 * size, "iteration 0: farthest landmark " + fmt(off_center) +
                                              " px from center (limit " + fmt(0.1 * size) + " px)"};
  r.equivariance = {full.eqv.mean <= 1.5, "mean " + fmt(full.eqv.mean) + " px, median " + fmt(full.eqv.median) +
                                              " px over " + std::to_string(full.eqv.count) + " landmarks (" +
                                              std::to_string(full.eqv.dropped) + " left the frame); " + run};
  r.spread = {full.spread >= 5.0 * spread0, "spread " + fmt(full.spread) + " px vs " + fmt(spread0) +
                                                " px at iteration 0 (x" + fmt(full.spread / spread0) + ")"};
  r.collapse = {nosep.spread < 0.3 * full.spread, "w/o sep spread " + fmt(nosep.spread) + " px = " +
                                                      fmt(100.0 * nosep.spread / full.spread) + "% of " +
                                                      fmt(full.spread) + " px"};
  return r;
}

// ---------------------------------------------------------------- evaluation

using evaluation::Matrix;

Matrix randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0, s);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Outcome evaluation_protocol() {
  std::mt19937_64 rng(404);
  const Matrix x = randn(300, 14, rng);
  const Matrix planted = randn(14, 10, rng);
  const auto fit = evaluation::fit_regressor(x, x * planted);
  const double map_err = (fit.weights - planted).cwiseAbs().maxCoeff();

  // two mirror pairs; frontal bodies have the left landmark on the right
  const std::vector<std::array<int, 2>> pairs{{0, 1}, {2, 3}};
  const Eigen::Index n = 120;
  std::uniform_real_distribution<double> c(0.3, 0.7), half(0.05, 0.2), jitter(-0.05, 0.05);
  Matrix g(n, 8);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double cx = c(rng), cy = c(rng);
    for (int p = 0; p < 2; ++p) {
      const double hw = half(rng), y = cy + (p ? 0.15 : -0.15) + jitter(rng);
      g(i, 4 * p) = cx + hw;
      g(i, 4 * p + 1) = y + 0.1 * jitter(rng);
      g(i, 4 * p + 2) = cx - hw;
      g(i, 4 * p + 3) = y;
    }
  }
  const Matrix detector = g * randn(8, 8, rng);
  Matrix ann = g;
  std::vector<bool> mirrored(n);
  std::bernoulli_distribution coin(0.4);
  for (Eigen::Index i = 0; i < n; ++i) {
    mirrored[i] = coin(rng);
    if (mirrored[i]) ann.row(i) = evaluation::swap_sides(g.row(i), pairs);
  }
  const auto flip = evaluation::flip_aware_fit(detector, ann, pairs);
  const bool flags_exact = flip.flipped == mirrored;

  evaluation::NormalizerAux aux;
  aux.pair = {0, 1};
  const double zero = evaluation::nme(g, g, evaluation::Normalizer::kBiocular, aux).nme;
  Matrix shifted = g;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = std::hypot(g(i, 0) - g(i, 2), g(i, 1) - g(i, 3));
    for (Eigen::Index k = 0; k < 4; ++k) shifted(i, 2 * k + 1) += d;
  }
  const double hundred = evaluation::nme(shifted, g, evaluation::Normalizer::kBiocular, aux).nme;

  const bool ok = map_err <= 1e-6 && flags_exact && zero == 0.0 && std::abs(hundred - 100.0) <= 1e-9;
  return {ok, "planted map err " + fmt(map_err) + "; flip flags " + (flags_exact ? "exact" : "WRONG") + " (" +
                  std::to_string(std::count(mirrored.begin(), mirrored.end(), true)) + "/" + std::to_string(n) +
                  " mirrored, " + std::to_string(flip.iterations) + " iterations); nme " + fmt(zero) + " / " +
                  fmt(hundred, 12)};
}

// ---------------------------------------------------------------------- http

LandmarkAutoencoder fallback_model() {
  torch::manual_seed(5);
  ModelConfig cfg;
  cfg.image_size = 56;
  cfg.image_channels = 1;
  cfg.num_landmarks = 7;
  cfg.use_descriptors = false;
  cfg.hourglass_channels = {8, 16, 32};
  cfg.skip_convs = {2, 2};
  LandmarkAutoencoder m(cfg);
  m->set_bn_state(BnState::kFinalized);
  m->eval();
  return m;
}

Outcome http_round_trip(const std::optional<fs::path>& checkpoint, const fs::path& mnist_dir) {
  auto model = checkpoint && fs::exists(*checkpoint) ? load_checkpoint(*checkpoint) : fallback_model();
  const auto& mc = model->config();

  // a held-out digit, preprocessed to the model input and sent as PNG
  auto spec = data::dataset_preset("mnist");
  spec.root = mnist_dir;
  spec.digits = {3};
  spec.holdout = 1;
  const auto ds = data::Dataset::open(spec);
  const auto img = ds.get_eval(0);
  const auto png = encode_png(img);

  serve::Service service;
  service.set_model(model, "");
  serve::HttpServer server(service);
  const int port = server.bind("127.0.0.1", 0);
  std::thread th([&] { server.listen(); });
  httplib::Client cli("127.0.0.1", port);

  std::string problem;
  bool same_decode = false, same_morph = false;
  try {
    auto post = [&](const std::string& path, const json& body) {
      const auto res = cli.Post(path, body.dump(), "application/json");
      if (!res) throw std::runtime_error(path + ": no response");
      if (res->status != 200) throw std::runtime_error(path + ": status " + std::to_string(res->status));
      return json::parse(res->body);
    };
    const auto enc = post("/encode", {{"image", base64_encode(png)}});
    const auto dec = post("/decode", {{"session_id", enc["session_id"]}, {"landmarks", enc["landmarks"]}});
    const auto wire = base64_decode(dec["image"].get<std::string>());

    torch::NoGradGuard ng;
    const auto x = decode_image(png, mc.image_channels).to_tensor().unsqueeze(0);
    const auto e = model->encode(x);
    const auto direct = encode_png(Image::from_tensor(model->decode(e.landmarks, e.descriptors).mean[0]));
    same_decode = wire == direct;

    const auto other = post("/encode", {{"image", base64_encode(encode_png(tps::warp_image(
                                                      img, tps::TpsTransform::from_affine(
                                                               (Eigen::Matrix<double, 2, 3>() << 1, 0, 0.05, 0, 1,
                                                                -0.03)
                                                                   .finished()))))}});
    const auto morph = post("/morph", {{"session_a", enc["session_id"]},
                                       {"session_b", other["session_id"]},
                                       {"t", 0.0},
                                       {"descriptor_source", "a"}});
    same_morph = morph["image"] == dec["image"];
  } catch (const std::exception& ex) {
    problem = ex.what();
  }
  server.stop();
  th.join();
  const std::string which = checkpoint && fs::exists(*checkpoint) ? "trained MNIST model" : "untrained model";
  if (!problem.empty()) return {false, which + ": " + problem};
  return {same_decode && same_morph, which + ", port " + std::to_string(port) + ": encode->decode " +
                                         (same_decode ? "byte-identical" : "DIFFERS") + " to in-process; morph t=0 " +
                                         (same_morph ? "equals" : "DIFFERS from") + " /decode"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  fs::path workdir = "acceptance";
  fs::path config = fs::path(LMDIS_SOURCE_DIR) / "configs" / "mnist.json";
  int64_t iterations = 0;
  bool reuse = false;
  std::vector<std::string> only;
  app.add_option("--workdir", workdir, "where training runs are written");
  app.add_option("--config", config, "desk MNIST training config");
  app.add_option("--iterations", iterations, "override the config's iteration count (schedule rescaled)");
  app.add_flag("--reuse", reuse, "reuse trained models whose config is unchanged");
  app.add_option("--only", only, "run only these checks: gradients oracles analytic tps mnist evaluation http")
      ->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  torch::set_num_threads(1);
  set_log_level(LogLevel::kWarn);

  const auto wanted = [&](const std::string& name) {
    return only.empty() || std::find(only.begin(), only.end(), name) != only.end();
  };
  int failures = 0;
  const auto report = [&](const std::string& name, const Outcome& o) {
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    failures += !o.pass;
  };
  const auto guarded = [&](const std::string& name, const std::function<Outcome()>& fn) {
    try {
      report(name, fn());
    } catch (const std::exception& e) {
      report(name, {false, std::string("threw: ") + e.what()});
    }
  };

  if (wanted("gradients")) guarded("gradient suite", gradient_suite);
  if (wanted("oracles")) guarded("oracle equivalence", oracle_equivalence);
  if (wanted("analytic")) guarded("analytic loss values", analytic_values);
  if (wanted("tps")) guarded("TPS exactness and sampling", tps_exactness);
  std::optional<fs::path> trained;
  if (wanted("mnist")) {
    try {
      fs::create_directories(workdir);
      const auto r = desk_mnist(config, workdir, iterations, reuse);
      report("desk MNIST (a) equivariance <= 1.5 px", r.equivariance);
      report("desk MNIST (b) spread >= 5x iteration 0", r.spread);
      report("desk MNIST (c) w/o sep spread < 30% of (b)", r.collapse);
      report("desk MNIST iteration-0 landmarks within 10% of center", r.centered);
      trained = r.full_checkpoint;
    } catch (const std::exception& e) {
      report("desk MNIST", {false, std::string("threw: ") + e.what()});
    }
  }
  if (wanted("evaluation")) guarded("evaluation protocol", evaluation_protocol);
  if (wanted("http")) {
    guarded("HTTP round trip", [&] { return http_round_trip(trained, fs::path(LMDIS_SOURCE_DIR) / "data" / "mnist"); });
  }
  std::cout << (failures ? std::to_string(failures) + " check(s) failed" : std::string("all checks passed"))
            << std::endl;
  return failures ? 1 : 0;
}
