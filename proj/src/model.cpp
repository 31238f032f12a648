#include "lmdis/model.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lmdis {

void ModelConfig::validate() const {
  if (num_landmarks < 1) throw std::invalid_argument("ModelConfig: need at least one landmark");
  if (image_channels != 1 && image_channels != 3) {
    throw std::invalid_argument("ModelConfig: image_channels must be 1 or 3");
  }
  if (decoder_sigmas.empty()) throw std::invalid_argument("ModelConfig: need a decoder sigma");
  for (double s : decoder_sigmas) {
    if (s <= 0) throw std::invalid_argument("ModelConfig: decoder sigmas must be positive");
  }
  if (use_descriptors && (descriptor_dim < 1 || feature_dim < 1)) {
    throw std::invalid_argument("ModelConfig: descriptor and feature dims must be positive");
  }
  if (map_stride != 1 && map_stride != 2) throw std::invalid_argument("ModelConfig: map_stride is 1 or 2");
  const int levels = static_cast<int>(hourglass_channels.size()) - 1;
  const int divisor = (1 << levels) * map_stride;
  if (image_size <= 0 || image_size % divisor != 0) {
    throw std::invalid_argument("ModelConfig: image_size must be divisible by " +
                                std::to_string(divisor));
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"image_size", c.image_size},
       {"image_channels", c.image_channels},
       {"num_landmarks", c.num_landmarks},
       {"descriptor_dim", c.descriptor_dim},
       {"feature_dim", c.feature_dim},
       {"use_descriptors", c.use_descriptors},
       {"decoder_sigmas", c.decoder_sigmas},
       {"hourglass_channels", c.hourglass_channels},
       {"skip_convs", c.skip_convs},
       {"map_stride", c.map_stride}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.image_channels = j.value("image_channels", c.image_channels);
  c.num_landmarks = j.value("num_landmarks", c.num_landmarks);
  c.descriptor_dim = j.value("descriptor_dim", c.descriptor_dim);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.use_descriptors = j.value("use_descriptors", c.use_descriptors);
  c.decoder_sigmas = j.value("decoder_sigmas", c.decoder_sigmas);
  c.hourglass_channels = j.value("hourglass_channels", c.hourglass_channels);
  c.skip_convs = j.value("skip_convs", c.skip_convs);
  c.map_stride = j.value("map_stride", c.map_stride);
  c.validate();
}

namespace {

HourglassSpec make_spec(const ModelConfig& cfg, int in, int out, int resample) {
  HourglassSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.channels = cfg.hourglass_channels;
  s.skip_convs = cfg.skip_convs;
  s.resample = resample;
  return s;
}

}  // namespace

LandmarkAutoencoderImpl::LandmarkAutoencoderImpl(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int k1 = cfg_.num_landmarks + 1;
  const int down = cfg_.map_stride == 2 ? -1 : 0;
  detector_ = register_module("detector", Hourglass(make_spec(cfg_, cfg_.image_channels, k1, down)));
  const int per_sigma = k1 + (cfg_.use_descriptors ? cfg_.feature_dim : 0);
  const int decoder_in = per_sigma * static_cast<int>(cfg_.decoder_sigmas.size());
  decoder_ = register_module(
      "decoder", Hourglass(make_spec(cfg_, decoder_in, 2 * cfg_.image_channels, -down)));
  if (cfg_.use_descriptors) {
    features_ = register_module(
        "features", Hourglass(make_spec(cfg_, cfg_.image_channels, cfg_.feature_dim, down)));
    const double s = 1.0 / std::sqrt(static_cast<double>(cfg_.feature_dim));
    projections_ = register_parameter(
        "projections", torch::randn({k1, cfg_.descriptor_dim, cfg_.feature_dim}) * s);
    back_projections_ = register_parameter(
        "back_projections",
        torch::randn({k1, cfg_.feature_dim, cfg_.descriptor_dim}) /
            std::sqrt(static_cast<double>(cfg_.descriptor_dim)));
  }
}

EncodeResult LandmarkAutoencoderImpl::encode(const torch::Tensor& images) {
  EncodeResult out;
  out.detection = channel_softmax({detector_->forward(images), MapKind::kRawScores});
  auto [landmarks, stats] = landmark_statistics(out.detection);
  out.landmarks = std::move(landmarks);
  out.stats = std::move(stats);
  if (cfg_.use_descriptors) {
    out.features = features_->forward(images);
    const auto masks = pooling_masks(out.detection, out.landmarks, out.stats);
    out.descriptors = masked_pool(out.features, masks, projections_);
  }
  return out;
}

DecodeResult LandmarkAutoencoderImpl::decode(const LandmarkSet& landmarks,
                                             const torch::Tensor& descriptors) {
  if (landmarks.count() != cfg_.num_landmarks) {
    throw std::invalid_argument("decode: expected " + std::to_string(cfg_.num_landmarks) +
                                " landmarks");
  }
  if (cfg_.use_descriptors &&
      (!descriptors.defined() || descriptors.size(1) != cfg_.num_landmarks + 1 ||
       descriptors.size(2) != cfg_.descriptor_dim)) {
    throw std::invalid_argument("decode: descriptors must be [B,K+1,C]");
  }
  DecodeResult out;
  std::vector<torch::Tensor> parts;
  const double edge = landmarks.edge_length();
  double widest = 0.0;
  for (double sigma : cfg_.decoder_sigmas) {
    const auto raw = render_gaussian_maps(landmarks, sigma * edge, GaussianMode::kDecoder);
    if (sigma > widest) {
      widest = sigma;
      out.coarse_foreground = raw.data.narrow(1, 0, cfg_.num_landmarks);
    }
    const auto dmaps = normalize_decoder_maps(raw);
    parts.push_back(dmaps.data);
    if (cfg_.use_descriptors) parts.push_back(unpool(dmaps, descriptors, back_projections_));
  }
  const auto z = decoder_->forward(torch::cat(parts, 1));
  const int ch = cfg_.image_channels;
  out.mean = torch::sigmoid(z.narrow(1, 0, ch));
  out.stddev = 0.5 * torch::softplus(z.narrow(1, ch, ch) + std::numbers::ln2);
  const auto& c = landmarks.coords;
  const auto x = c.select(-1, 0);
  const auto y = c.select(-1, 1);
  out.out_of_bounds = ((x < 1) | (x > landmarks.width) | (y < 1) | (y > landmarks.height)).detach();
  return out;
}

std::vector<torch::nn::BatchNorm2d> LandmarkAutoencoderImpl::batchnorm_layers() {
  std::vector<torch::nn::BatchNorm2d> out;
  for (const auto& m : modules(false)) {
    if (auto bn = std::dynamic_pointer_cast<torch::nn::BatchNorm2dImpl>(m)) {
      out.emplace_back(bn);
    }
  }
  return out;
}

void LandmarkAutoencoderImpl::reset_batchnorm_statistics() {
  for (auto& bn : batchnorm_layers()) {
    bn->reset_running_stats();
    bn->options.momentum(std::nullopt);
  }
  bn_state_ = BnState::kRunning;
}

void LandmarkAutoencoderImpl::write_to(TensorArchive& ar, const std::string& prefix) const {
  for (const auto& p : named_parameters()) ar.tensors[prefix + p.key()] = p.value().detach().clone();
  for (const auto& b : named_buffers()) ar.tensors[prefix + b.key()] = b.value().detach().clone();
}

void LandmarkAutoencoderImpl::read_from(const TensorArchive& ar, const std::string& prefix) {
  torch::NoGradGuard guard;
  for (auto& p : named_parameters()) {
    const auto& src = ar.at(prefix + p.key());
    if (src.sizes() != p.value().sizes()) {
      throw std::runtime_error("checkpoint shape mismatch for " + p.key());
    }
    p.value().copy_(src);
  }
  for (auto& b : named_buffers()) b.value().copy_(ar.at(prefix + b.key()));
}

ModelConfig config_from_archive(const TensorArchive& ar) {
  return ar.meta.at("model").get<ModelConfig>();
}

void save_checkpoint(const std::filesystem::path& path, LandmarkAutoencoder& model) {
  TensorArchive ar;
  ar.meta["kind"] = "lmdis-model";
  ar.meta["model"] = model->config();
  ar.meta["bn_state"] = model->bn_state() == BnState::kFinalized ? "finalized" : "running";
  model->write_to(ar);
  ar.save(path);
}

LandmarkAutoencoder load_checkpoint(const std::filesystem::path& path) {
  const auto ar = TensorArchive::load(path);
  LandmarkAutoencoder model(config_from_archive(ar));
  model->read_from(ar);
  model->set_bn_state(ar.meta.value("bn_state", "running") == "finalized" ? BnState::kFinalized
                                                                         : BnState::kRunning);
  return model;
}

}  // namespace lmdis
