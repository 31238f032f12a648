#include "lmdis/training.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "lmdis/log.hpp"

namespace lmdis::training {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  model.validate();
  dataset.validate();
  weights.validate();
  tps.validate();
  if (batch_size != 8 && batch_size != 16 && batch_size != 32) {
    throw std::invalid_argument("TrainConfig: batch_size must be 8, 16 or 32");
  }
  if (iterations < 0) throw std::invalid_argument("TrainConfig: iterations must be >= 0");
  if (lr <= 0) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (lr_decay_iters[0] > lr_decay_iters[1] || recon_increase_iters[0] > recon_increase_iters[1]) {
    throw std::invalid_argument("TrainConfig: schedule iterations must be nondecreasing");
  }
  if (landmark_control_warmup_iters < 0) throw std::invalid_argument("TrainConfig: warmup must be >= 0");
  if (brightness < 0 || contrast[0] <= 0 || contrast[0] > contrast[1]) {
    throw std::invalid_argument("TrainConfig: bad augmentation ranges");
  }
  if (dataset.channels != model.image_channels || dataset.padded_size != model.image_size) {
    throw std::invalid_argument("TrainConfig: dataset output must match the model input size and channels");
  }
  if (use_flow && dataset.pairs.empty()) {
    throw std::invalid_argument("TrainConfig: use_flow needs a dataset with a pair manifest");
  }
  if (log_every <= 0 || checkpoint_every < 0 || dump_every < 0) {
    throw std::invalid_argument("TrainConfig: bad logging intervals");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"model", c.model},
       {"dataset", c.dataset},
       {"batch_size", c.batch_size},
       {"iterations", c.iterations},
       {"seed", c.seed},
       {"lr", c.lr},
       {"lr_decay_iters", c.lr_decay_iters},
       {"recon_increase_iters", c.recon_increase_iters},
       {"weights", c.weights},
       {"tps", c.tps},
       {"landmark_control_warmup_iters", c.landmark_control_warmup_iters},
       {"augment", c.augment},
       {"brightness", c.brightness},
       {"contrast", c.contrast},
       {"use_flow", c.use_flow},
       {"output_dir", c.output_dir.string()},
       {"log_every", c.log_every},
       {"dump_every", c.dump_every},
       {"checkpoint_every", c.checkpoint_every},
       {"bn_finalize_batches", c.bn_finalize_batches}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("dataset")) c.dataset = j.at("dataset").get<data::DatasetSpec>();
  c.batch_size = j.value("batch_size", c.batch_size);
  c.iterations = j.value("iterations", c.iterations);
  c.seed = j.value("seed", c.seed);
  c.lr = j.value("lr", c.lr);
  c.lr_decay_iters = j.value("lr_decay_iters", c.lr_decay_iters);
  c.recon_increase_iters = j.value("recon_increase_iters", c.recon_increase_iters);
  if (j.contains("weights")) c.weights = j.at("weights").get<losses::LossWeights>();
  if (j.contains("tps")) c.tps = j.at("tps").get<tps::TpsSampleConfig>();
  c.landmark_control_warmup_iters = j.value("landmark_control_warmup_iters", c.landmark_control_warmup_iters);
  c.augment = j.value("augment", c.augment);
  c.brightness = j.value("brightness", c.brightness);
  c.contrast = j.value("contrast", c.contrast);
  c.use_flow = j.value("use_flow", c.use_flow);
  c.output_dir = j.value("output_dir", c.output_dir.string());
  c.log_every = j.value("log_every", c.log_every);
  c.dump_every = j.value("dump_every", c.dump_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.bn_finalize_batches = j.value("bn_finalize_batches", c.bn_finalize_batches);
  c.validate();
}

TrainConfig load_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open config " + file.string());
  auto cfg = nlohmann::json::parse(in).get<TrainConfig>();
  const auto base = file.parent_path();
  if (cfg.dataset.root.is_relative()) cfg.dataset.root = (base / cfg.dataset.root).lexically_normal();
  if (cfg.output_dir.is_relative()) cfg.output_dir = (base / cfg.output_dir).lexically_normal();
  return cfg;
}

Schedule schedule(int64_t iteration, const TrainConfig& cfg) {
  Schedule s;
  s.lr = cfg.lr;
  for (auto at : cfg.lr_decay_iters) {
    if (iteration >= at) s.lr *= 0.1;
  }
  s.lambda_recon = cfg.weights.recon;
  for (auto at : cfg.recon_increase_iters) {
    if (iteration >= at) s.lambda_recon *= 10.0;
  }
  s.landmark_mode_prob = iteration < cfg.landmark_control_warmup_iters ? 0.0 : cfg.tps.landmark_mode_prob;
  return s;
}

torch::Tensor augment(const torch::Tensor& images, double brightness, std::array<double, 2> contrast,
                      std::mt19937_64& rng) {
  const bool single = images.dim() == 3;
  auto x = single ? images.unsqueeze(0) : images;
  const auto b = x.size(0);
  std::vector<double> offset(b), gain(b);
  for (int64_t i = 0; i < b; ++i) {
    offset[i] = brightness > 0 ? std::uniform_real_distribution<double>(-brightness, brightness)(rng) : 0.0;
    gain[i] = contrast[1] > contrast[0] ? std::uniform_real_distribution<double>(contrast[0], contrast[1])(rng)
                                        : contrast[0];
  }
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  const auto off = torch::tensor(offset, opts).to(x.dtype()).view({b, 1, 1, 1});
  const auto g = torch::tensor(gain, opts).to(x.dtype()).view({b, 1, 1, 1});
  const auto mean = x.mean({1, 2, 3}, true);
  auto out = ((x - mean) * g + mean + off).clamp(0.0, 1.0);
  return single ? out.squeeze(0) : out;
}

namespace {

/// Brings an image-resolution flow onto the landmark map grid.
losses::FlowField flow_on_map(const losses::FlowField& flow, int stride) {
  if (stride == 1) return flow;
  auto pool = [stride](const torch::Tensor& f) {
    return torch::avg_pool2d(f.unsqueeze(1), stride).squeeze(1) / static_cast<double>(stride);
  };
  return {pool(flow.ox), pool(flow.oy)};
}

tps::Points unit_points(const torch::Tensor& coords, int64_t size) {
  auto c = coords.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  tps::Points p(c.size(0), 2);
  auto a = c.accessor<double, 2>();
  for (int64_t k = 0; k < c.size(0); ++k) {
    p(k, 0) = tps::to_unit(a[k][0], size);
    p(k, 1) = tps::to_unit(a[k][1], size);
  }
  return p;
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
  cfg_.validate();
  torch::manual_seed(cfg_.seed);
  model_ = LandmarkAutoencoder(cfg_.model);
  optimizer_ = std::make_unique<torch::optim::Adam>(model_->parameters(), torch::optim::AdamOptions(cfg_.lr));
}

StepResult Trainer::step(const data::Batch& batch) {
  StepResult r;
  r.sched = schedule(iteration_, cfg_);
  const auto rng_before = rng_;
  std::vector<torch::Tensor> buffers_before;
  for (const auto& b : model_->buffers()) buffers_before.push_back(b.detach().clone());
  auto abort = [&](std::string why) {
    rng_ = rng_before;
    torch::NoGradGuard ng;
    auto bufs = model_->buffers();
    for (size_t i = 0; i < bufs.size(); ++i) bufs[i].copy_(buffers_before[i]);
    optimizer_->zero_grad();
    r.applied = false;
    r.incident = std::move(why);
    log_error("iteration " + std::to_string(iteration_) + ": step aborted, " + r.incident);
    return r;
  };

  model_->train();
  auto images = batch.images;
  if (cfg_.augment && cfg_.model.image_channels == 3) {
    images = augment(images, cfg_.brightness, cfg_.contrast, rng_);
  }
  const int64_t n = images.size(0);
  const int map = cfg_.model.map_size();

  if (!torch::isfinite(images).all().item<bool>() ||
      (batch.next.defined() && !torch::isfinite(batch.next).all().item<bool>())) {
    return abort("non-finite input pixels");
  }
  try {
    auto enc = model_->encode(images);

    const bool with_flow = cfg_.use_flow && batch.flow && batch.next.defined();
    torch::Tensor warped;
    std::vector<tps::TpsTransform> transforms;
    if (with_flow) {
      warped = batch.next;
    } else {
      std::vector<Image> out;
      out.reserve(n);
      for (int64_t b = 0; b < n; ++b) {
        const auto mode = tps::choose_control_mode(r.sched.landmark_mode_prob, rng_);
        tps::TpsTransform t;
        if (mode == tps::ControlMode::kLandmark) {
          try {
            t = tps::sample_random_tps(cfg_.tps, mode, unit_points(enc.landmarks.coords[b], map), rng_);
            ++r.landmark_mode_items;
          } catch (const std::domain_error&) {
            t = tps::sample_random_tps(cfg_.tps, tps::ControlMode::kGrid, std::nullopt, rng_);
          }
        } else {
          t = tps::sample_random_tps(cfg_.tps, mode, std::nullopt, rng_);
        }
        out.push_back(tps::warp_image(Image::from_tensor(images[b]), t));
        transforms.push_back(std::move(t));
      }
      warped = stack_images(out);
    }
    auto enc_w = model_->encode(warped);
    auto dec = model_->decode(enc.landmarks, enc.descriptors);

    losses::LossTerms parts;
    parts.recon = losses::reconstruction_loss(images, dec.mean, cfg_.weights.sigma_color);
    const double edge = enc.landmarks.edge_length();
    parts.conc = losses::concentration_loss(losses::normalize_statistics(enc.stats, edge));
    parts.sep = losses::separation_loss(enc.landmarks.normalized(), cfg_.weights.sigma_sep);
    if (with_flow) {
      const auto flow = flow_on_map(*batch.flow, cfg_.model.map_stride);
      auto fe = losses::equivariance_loss(enc.landmarks, enc_w.landmarks, flow);
      parts.eqv = fe.loss;
      r.flow_clamped = fe.clamped;
      double widest = 0;
      for (double s : cfg_.model.decoder_sigmas) widest = std::max(widest, s);
      const auto fg = render_gaussian_maps(enc_w.landmarks, widest * edge, GaussianMode::kDecoder)
                          .data.narrow(1, 0, cfg_.model.num_landmarks);
      parts.flow_prefer = losses::flow_preference_loss(fg, flow.magnitude());
    } else {
      parts.eqv = losses::equivariance_loss(enc.landmarks, enc_w.landmarks, transforms);
    }

    auto weights = cfg_.weights;
    weights.recon = r.sched.lambda_recon;
    r.losses = losses::total_loss(parts, weights);

    optimizer_->zero_grad();
    r.losses.total.backward();
    for (const auto& p : model_->parameters()) {
      if (p.grad().defined() && !torch::isfinite(p.grad()).all().item<bool>()) {
        return abort("non-finite gradient");
      }
    }
    for (auto& group : optimizer_->param_groups()) {
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(r.sched.lr);
    }
    optimizer_->step();
    ++iteration_;
    r.applied = true;
    history_.push_back(r.losses.total_value());
    if (history_.size() > kHistorySize) history_.pop_front();

    if (cfg_.dump_every > 0 && iteration_ % cfg_.dump_every == 0) {
      dump_overlay(images, enc.landmarks.coords, dec.mean);
    }
  } catch (const losses::NonFiniteLoss& e) {
    return abort(e.what());
  } catch (const std::runtime_error& e) {
    // overflowing scores surface as errors from the forward pass
    if (std::string_view(e.what()).find("non-finite") == std::string_view::npos) throw;
    return abort(e.what());
  }
  return r;
}

void Trainer::dump_overlay(const torch::Tensor& images, const torch::Tensor& landmarks,
                           const torch::Tensor& recon) {
  const auto dir = cfg_.output_dir / "overlays";
  fs::create_directories(dir);
  const double s = cfg_.model.map_stride;
  const auto lm = landmarks.detach().to(torch::kCPU, torch::kFloat64);
  std::vector<Image> tiles;
  for (int64_t b = 0; b < std::min<int64_t>(4, images.size(0)); ++b) {
    std::vector<std::array<double, 2>> pts;
    for (int64_t k = 0; k < lm.size(1); ++k) {
      pts.push_back({(lm[b][k][0].item<double>() - 0.5) * s + 0.5, (lm[b][k][1].item<double>() - 0.5) * s + 0.5});
    }
    tiles.push_back(draw_landmarks(Image::from_tensor(images[b]), pts));
    tiles.push_back(draw_landmarks(Image::from_tensor(recon[b]), pts));
  }
  std::ostringstream name;
  name << "iter_" << std::setw(7) << std::setfill('0') << iteration_ << ".png";
  write_png(dir / name.str(), hconcat(tiles));
}

void Trainer::log_csv(const StepResult& r, double seconds) {
  if (!csv_) {
    fs::create_directories(cfg_.output_dir);
    const auto path = cfg_.output_dir / "progress.csv";
    const bool fresh = !fs::exists(path) || iteration_ <= 1;
    csv_ = std::make_unique<std::ofstream>(path, fresh ? std::ios::trunc : std::ios::app);
    if (fresh) {
      *csv_ << "iteration,lr,lambda_recon,landmark_prob,recon,conc,sep,eqv,flow_prefer,"
               "w_recon,w_conc,w_sep,w_eqv,w_flow_prefer,total,seconds\n";
    }
  }
  const auto& l = r.losses;
  *csv_ << iteration_ << ',' << r.sched.lr << ',' << r.sched.lambda_recon << ',' << r.sched.landmark_mode_prob
        << ',' << l.recon << ',' << l.conc << ',' << l.sep << ',' << l.eqv << ',' << l.flow_prefer << ','
        << l.w_recon << ',' << l.w_conc << ',' << l.w_sep << ',' << l.w_eqv << ',' << l.w_flow_prefer << ','
        << l.total_value() << ',' << seconds << '\n';
}

void Trainer::run(data::BatchIterator& batches, std::optional<int64_t> until) {
  const int64_t stop = until.value_or(cfg_.iterations);
  const auto start = std::chrono::steady_clock::now();
  int aborted_in_a_row = 0;
  while (iteration_ < stop) {
    const auto batch = batches.next();
    const auto r = step(batch);
    if (!r.applied) {
      if (++aborted_in_a_row >= 100) throw std::runtime_error("training diverged: 100 aborted steps in a row");
      continue;
    }
    aborted_in_a_row = 0;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log_csv(r, secs);
    if (iteration_ % cfg_.log_every == 0 || iteration_ == 1) {
      std::ostringstream os;
      os << "iter " << iteration_ << " lr " << r.sched.lr << " " << r.losses.to_json().dump();
      log_info(os.str());
    }
    if (cfg_.checkpoint_every > 0 && iteration_ % cfg_.checkpoint_every == 0) {
      save_state(cfg_.output_dir / "state.lmd", &batches);
    }
  }
  if (csv_) csv_->flush();
  save_state(cfg_.output_dir / "state.lmd", &batches);
}

void Trainer::finalize_batchnorm(const data::Dataset& ds, int num_batches, uint64_t seed) {
  if (num_batches < 10) log_warn("finalize_batchnorm: fewer than 10 batches, statistics will be noisy");
  model_->reset_batchnorm_statistics();
  model_->train();
  torch::NoGradGuard ng;
  data::BatchIterator it(ds, cfg_.batch_size, seed);
  for (int i = 0; i < num_batches; ++i) {
    const auto batch = it.next();
    auto enc = model_->encode(batch.images);
    model_->decode(enc.landmarks, enc.descriptors);
  }
  model_->eval();
  model_->set_bn_state(BnState::kFinalized);
}

void Trainer::save_state(const fs::path& path, const data::BatchIterator* batches) const {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  TensorArchive ar;
  ar.meta["kind"] = "lmdis-train-state";
  ar.meta["model"] = model_->config();
  ar.meta["bn_state"] = model_->bn_state() == BnState::kFinalized ? "finalized" : "running";
  ar.meta["config"] = cfg_;
  ar.meta["iteration"] = iteration_;
  ar.meta["rng"] = rng_state(rng_);
  ar.meta["history"] = std::vector<double>(history_.begin(), history_.end());
  ar.meta["batches"] = batches ? batches->state() : nlohmann::json();
  model_->write_to(ar);
  const auto params = model_->parameters();
  std::vector<int64_t> steps;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& st = optimizer_->state();
    auto it = st.find(params[i].unsafeGetTensorImpl());
    if (it == st.end()) {
      steps.push_back(-1);
      continue;
    }
    const auto& adam = static_cast<const torch::optim::AdamParamState&>(*it->second);
    steps.push_back(adam.step());
    ar.tensors["adam/" + std::to_string(i) + "/exp_avg"] = adam.exp_avg().clone();
    ar.tensors["adam/" + std::to_string(i) + "/exp_avg_sq"] = adam.exp_avg_sq().clone();
  }
  ar.meta["adam_steps"] = steps;
  ar.save(path);
}

nlohmann::json Trainer::load_state(const fs::path& path) {
  const auto ar = TensorArchive::load(path);
  if (ar.meta.value("kind", "") != "lmdis-train-state") {
    throw std::runtime_error(path.string() + " is not a training state");
  }
  if (nlohmann::json(ar.meta.at("model")) != nlohmann::json(model_->config())) {
    throw std::runtime_error("training state was written for a different model config");
  }
  model_->read_from(ar);
  model_->set_bn_state(ar.meta.value("bn_state", "running") == "finalized" ? BnState::kFinalized
                                                                         : BnState::kRunning);
  iteration_ = ar.meta.at("iteration").get<int64_t>();
  std::istringstream is(ar.meta.at("rng").get<std::string>());
  is >> rng_;
  history_.clear();
  for (double v : ar.meta.value("history", std::vector<double>{})) history_.push_back(v);
  const auto steps = ar.meta.at("adam_steps").get<std::vector<int64_t>>();
  const auto params = model_->parameters();
  if (steps.size() != params.size()) throw std::runtime_error("optimizer state does not match the model");
  auto& state = optimizer_->state();
  state.clear();
  for (size_t i = 0; i < params.size(); ++i) {
    if (steps[i] < 0) continue;
    auto st = std::make_unique<torch::optim::AdamParamState>();
    st->step(steps[i]);
    st->exp_avg(ar.at("adam/" + std::to_string(i) + "/exp_avg").clone());
    st->exp_avg_sq(ar.at("adam/" + std::to_string(i) + "/exp_avg_sq").clone());
    state[params[i].unsafeGetTensorImpl()] = std::move(st);
  }
  return ar.meta.value("batches", nlohmann::json());
}

}  // namespace lmdis::training
