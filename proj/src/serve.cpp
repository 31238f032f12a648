#include "lmdis/serve.hpp"

#include <iomanip>
#include <random>
#include <sstream>

#include "httplib.h"
#include "lmdis/archive.hpp"
#include "lmdis/image.hpp"
#include "lmdis/log.hpp"

namespace lmdis::serve {

using nlohmann::json;

SessionCache::SessionCache(size_t capacity, std::chrono::seconds ttl, std::function<Clock::time_point()> now)
    : capacity_(capacity), ttl_(ttl), now_(std::move(now)) {
  if (capacity_ == 0) throw std::invalid_argument("SessionCache: capacity must be positive");
}

void SessionCache::expire(Clock::time_point now) {
  while (!lru_.empty() && now - lru_.back().touched > ttl_) {
    index_.erase(lru_.back().id);
    lru_.pop_back();
  }
}

std::string SessionCache::put(Session s) {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(mu_);
  const auto now = now_();
  expire(now);
  std::ostringstream id;
  id << std::hex << std::setfill('0') << std::setw(16) << rng() << std::setw(8) << ++counter_;
  lru_.push_front({id.str(), std::move(s), now});
  index_[id.str()] = lru_.begin();
  while (lru_.size() > capacity_) {
    index_.erase(lru_.back().id);
    lru_.pop_back();
  }
  return id.str();
}

std::optional<Session> SessionCache::get(const std::string& id) {
  std::lock_guard lock(mu_);
  const auto now = now_();
  expire(now);
  const auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  it->second->touched = now;
  lru_.splice(lru_.begin(), lru_, it->second);
  return it->second->session;
}

size_t SessionCache::size() const {
  std::lock_guard lock(mu_);
  return lru_.size();
}

namespace {

Response error(int status, const std::string& message) { return {status, {{"error", message}}}; }

std::string digest_of(const LandmarkAutoencoder& model) {
  // content hash of an in-memory model: write it out and hash the bytes
  const auto tmp = std::filesystem::temp_directory_path() /
                   ("lmdis_model_" + std::to_string(reinterpret_cast<uintptr_t>(model.get())) + ".lmd");
  save_checkpoint(tmp, const_cast<LandmarkAutoencoder&>(model));
  auto d = file_digest(tmp);
  std::filesystem::remove(tmp);
  return d;
}

}  // namespace

Service::Service(ServeConfig cfg, std::function<Clock::time_point()> now)
    : cfg_(std::move(cfg)), sessions_(cfg_.session_capacity, cfg_.session_ttl, std::move(now)) {}

void Service::load(const std::filesystem::path& checkpoint) {
  auto model = load_checkpoint(checkpoint);
  set_model(std::move(model), file_digest(checkpoint));
}

void Service::set_model(LandmarkAutoencoder model, std::string id) {
  if (model->bn_state() != BnState::kFinalized) {
    throw std::runtime_error("refusing to serve a model without finalized batch-norm statistics");
  }
  model->eval();
  if (cfg_.preprocess && (cfg_.preprocess->padded_size != model->config().image_size ||
                          cfg_.preprocess->channels != model->config().image_channels)) {
    throw std::invalid_argument("preprocessing spec does not produce the model input size");
  }
  if (id.empty()) id = digest_of(model);
  auto next = std::make_shared<Loaded>();
  next->model = std::move(model);
  next->id = std::move(id);
  std::unique_lock lock(model_mu_);
  loaded_ = std::move(next);
}

bool Service::loaded() const { return current() != nullptr; }

std::shared_ptr<const Service::Loaded> Service::current() const {
  std::shared_lock lock(model_mu_);
  return loaded_;
}

std::vector<uint8_t> Service::render(const torch::Tensor& landmarks, const torch::Tensor& descriptors,
                                     torch::Tensor* out_of_bounds) const {
  const auto m = current();
  if (!m) throw std::runtime_error("no model loaded");
  torch::NoGradGuard ng;
  const auto size = m->model->config().map_size();
  const auto dec = m->model->decode({landmarks, size, size}, descriptors);
  if (out_of_bounds) *out_of_bounds = dec.out_of_bounds;
  return encode_png(Image::from_tensor(dec.mean[0]));
}

Response Service::encode(const json& req) {
  const auto m = current();
  if (!m) return error(503, "model not loaded");
  if (!req.is_object() || !req.contains("image") || !req["image"].is_string()) {
    return error(400, "expected {\"image\": <base64 PNG/JPEG>}");
  }
  const auto& text = req["image"].get_ref<const std::string&>();
  if (text.size() > cfg_.max_body_bytes) return error(413, "image payload too large");
  const auto& mc = m->model->config();
  Image img;
  try {
    img = decode_image(base64_decode(text), mc.image_channels);
  } catch (const std::exception& e) {
    return error(400, std::string("undecodable image: ") + e.what());
  }
  if (img.width > cfg_.max_image_side || img.height > cfg_.max_image_side) {
    return error(413, "image larger than " + std::to_string(cfg_.max_image_side) + " pixels per side");
  }
  img = cfg_.preprocess ? data::preprocess(img, *cfg_.preprocess) : resize(img, mc.image_size, mc.image_size);

  torch::NoGradGuard ng;
  const auto enc = m->model->encode(img.to_tensor().unsqueeze(0));
  Session s;
  s.model_id = m->id;
  s.landmarks = enc.landmarks.coords.detach().clone();
  if (enc.descriptors.defined()) s.descriptors = enc.descriptors.detach().clone();
  const auto size = mc.map_size();
  json lms = json::array();
  const auto c = s.landmarks.to(torch::kFloat64);
  for (int64_t k = 0; k < c.size(1); ++k) {
    lms.push_back({to_display(c[0][k][0].item<double>(), size), to_display(c[0][k][1].item<double>(), size)});
  }
  const auto id = sessions_.put(std::move(s));
  return {200, {{"session_id", id}, {"landmarks", lms}, {"map_size", size}, {"model_id", m->id}}};
}

Response Service::session_error(const std::string& id, const std::optional<Session>& s, const Loaded& m) const {
  if (!s) return error(404, "unknown or expired session '" + id + "'");
  if (s->model_id != m.id) return error(409, "session '" + id + "' belongs to a different model");
  return {};
}

Response Service::decode(const json& req) {
  const auto m = current();
  if (!m) return error(503, "model not loaded");
  if (!req.is_object() || !req.contains("session_id") || !req["session_id"].is_string()) {
    return error(400, "expected {\"session_id\": ..., \"landmarks\": [[x, y], ...]}");
  }
  const auto id = req["session_id"].get<std::string>();
  const auto s = sessions_.get(id);
  if (auto err = session_error(id, s, *m); err.status != 200) return err;

  const auto k = s->landmarks.size(1);
  const auto size = m->model->config().map_size();
  torch::Tensor lm = s->landmarks;
  if (req.contains("landmarks")) {
    const auto& arr = req["landmarks"];
    if (!arr.is_array() || static_cast<int64_t>(arr.size()) != k) {
      return error(422, "expected " + std::to_string(k) + " landmarks");
    }
    lm = torch::empty({1, k, 2}, torch::kFloat32);
    for (int64_t i = 0; i < k; ++i) {
      const auto& p = arr[i];
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
        return error(422, "landmark " + std::to_string(i) + " must be [x, y]");
      }
      lm[0][i][0] = from_display(p[0].get<double>(), size);
      lm[0][i][1] = from_display(p[1].get<double>(), size);
    }
  }
  torch::Tensor oob;
  const auto png = render(lm, s->descriptors, &oob);
  json flags = json::array();
  for (int64_t i = 0; i < k; ++i) flags.push_back(oob[0][i].item<bool>());
  return {200, {{"image", base64_encode(png)}, {"out_of_bounds", flags}}};
}

std::optional<Response> Service::interpolate(const json& req, const Loaded& m, torch::Tensor& landmarks,
                                             torch::Tensor& descriptors) {
  if (!req.is_object() || !req.contains("session_a") || !req.contains("session_b") || !req.contains("t") ||
      !req["session_a"].is_string() || !req["session_b"].is_string() || !req["t"].is_number()) {
    return error(400, "expected {\"session_a\", \"session_b\", \"t\", \"descriptor_source\"}");
  }
  const double t = req["t"].get<double>();
  if (!(t >= 0.0 && t <= 1.0)) return error(422, "t must lie in [0, 1]");
  const auto source = req.value("descriptor_source", std::string("a"));
  if (source != "a" && source != "b") return error(422, "descriptor_source must be \"a\" or \"b\"");
  const auto ia = req["session_a"].get<std::string>(), ib = req["session_b"].get<std::string>();
  const auto a = sessions_.get(ia);
  if (auto err = session_error(ia, a, m); err.status != 200) return err;
  const auto b = sessions_.get(ib);
  if (auto err = session_error(ib, b, m); err.status != 200) return err;
  const auto la = a->landmarks.to(torch::kFloat64), lb = b->landmarks.to(torch::kFloat64);
  landmarks = ((1.0 - t) * la + t * lb).to(torch::kFloat32);
  descriptors = source == "a" ? a->descriptors : b->descriptors;
  return std::nullopt;
}

Response Service::morph(const json& req) {
  const auto m = current();
  if (!m) return error(503, "model not loaded");
  torch::Tensor lm, desc;
  if (auto err = interpolate(req, *m, lm, desc)) return *err;
  return {200, {{"image", base64_encode(render(lm, desc))}}};
}

Response Service::morph_landmarks(const json& req) {
  const auto m = current();
  if (!m) return error(503, "model not loaded");
  torch::Tensor lm, desc;
  if (auto err = interpolate(req, *m, lm, desc)) return *err;
  const auto size = m->model->config().map_size();
  const auto c = lm.to(torch::kFloat64);
  json out = json::array();
  for (int64_t k = 0; k < c.size(1); ++k) {
    out.push_back({to_display(c[0][k][0].item<double>(), size), to_display(c[0][k][1].item<double>(), size)});
  }
  return {200, {{"landmarks", out}}};
}

Response Service::model_info() const {
  const auto m = current();
  if (!m) return error(503, "model not loaded");
  const auto& c = m->model->config();
  return {200,
          {{"num_landmarks", c.num_landmarks},
           {"descriptor_dim", c.descriptor_dim},
           {"feature_dim", c.feature_dim},
           {"use_descriptors", c.use_descriptors},
           {"image_size", c.image_size},
           {"image_channels", c.image_channels},
           {"map_size", c.map_size()},
           {"decoder_sigmas", c.decoder_sigmas},
           {"checkpoint_hash", m->id}}};
}

Response Service::health() const {
  return {200, {{"status", "ok"}, {"model_loaded", loaded()}, {"sessions", sessions_.size()}}};
}

HttpServer::HttpServer(Service& service) : service_(service), server_(std::make_unique<httplib::Server>()) {
  auto& srv = *server_;
  const auto origin = service_.config().cors_origin;
  srv.set_payload_max_length(service_.config().max_body_bytes);
  srv.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", origin);
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
  });
  srv.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  auto reply = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  auto post = [this, reply](const std::string& path, Response (Service::*fn)(const json&)) {
    server_->Post(path, [this, reply, fn](const httplib::Request& req, httplib::Response& res) {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::exception&) {
        return reply(res, error(400, "request body is not JSON"));
      }
      try {
        reply(res, (service_.*fn)(body));
      } catch (const std::exception& e) {
        log_error(std::string("request failed: ") + e.what());
        reply(res, error(500, e.what()));
      }
    });
  };
  post("/encode", &Service::encode);
  post("/decode", &Service::decode);
  post("/morph", &Service::morph);
  post("/debug/morph_landmarks", &Service::morph_landmarks);
  srv.Get("/model", [this, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, service_.model_info());
  });
  srv.Get("/health", [this, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, service_.health());
  });
  srv.set_error_handler([reply](const httplib::Request&, httplib::Response& res) {
    if (res.status == 413) return reply(res, error(413, "request body too large"));
    if (res.status == 404 && res.body.empty()) return reply(res, error(404, "no such endpoint"));
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = server_->bind_to_any_port(host);
    if (p < 0) throw std::runtime_error("cannot bind " + host);
    return p;
  }
  if (!server_->bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::listen() { server_->listen_after_bind(); }

void HttpServer::stop() {
  if (server_ && server_->is_running()) server_->stop();
}

}  // namespace lmdis::serve
