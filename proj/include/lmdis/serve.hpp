#pragma once

#include <torch/torch.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>

#include "json.hpp"
#include "lmdis/data.hpp"
#include "lmdis/model.hpp"

namespace httplib {
class Server;
}

namespace lmdis::serve {

using Clock = std::chrono::steady_clock;

/// What the service remembers about an encoded image.
struct Session {
  std::string model_id;
  torch::Tensor landmarks;    ///< [1, K, 2] map pixels
  torch::Tensor descriptors;  ///< [1, K+1, C]; undefined for descriptor-free models
};

/// Thread-safe LRU cache with a time-to-live, refreshed on access.
class SessionCache {
 public:
  SessionCache(size_t capacity, std::chrono::seconds ttl, std::function<Clock::time_point()> now = Clock::now);

  std::string put(Session s);
  std::optional<Session> get(const std::string& id);
  size_t size() const;

 private:
  struct Entry {
    std::string id;
    Session session;
    Clock::time_point touched;
  };
  void expire(Clock::time_point now);

  size_t capacity_;
  std::chrono::seconds ttl_;
  std::function<Clock::time_point()> now_;
  mutable std::mutex mu_;
  std::list<Entry> lru_;  ///< most recent first
  std::unordered_map<std::string, std::list<Entry>::iterator> index_;
  uint64_t counter_ = 0;
};

struct ServeConfig {
  size_t session_capacity = 512;
  std::chrono::seconds session_ttl{15 * 60};
  size_t max_body_bytes = 8u << 20;
  int max_image_side = 4096;
  /// How uploads are brought to the network input. Without a spec, images
  /// are resized straight to the model input size.
  std::optional<data::DatasetSpec> preprocess;
  std::string cors_origin = "*";
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

/// The HTTP API without the transport: each handler takes the parsed request
/// body and returns status plus JSON. Display coordinates are (x - 0.5) / W
/// on the landmark map, origin top-left, so [0,1]^2 covers the map.
class Service {
 public:
  explicit Service(ServeConfig cfg = {}, std::function<Clock::time_point()> now = Clock::now);

  /// Loads a checkpoint (model or training state); the model must have
  /// finalized batch-norm statistics.
  void load(const std::filesystem::path& checkpoint);
  /// Serves an in-memory model; `id` identifies it to sessions.
  void set_model(LandmarkAutoencoder model, std::string id);
  bool loaded() const;
  const ServeConfig& config() const { return cfg_; }

  Response encode(const nlohmann::json& req);
  Response decode(const nlohmann::json& req);
  Response morph(const nlohmann::json& req);
  /// Interpolated landmarks only, for checking the morph geometry.
  Response morph_landmarks(const nlohmann::json& req);
  Response model_info() const;
  Response health() const;

  /// Decodes landmarks (map pixels, [1,K,2]) with the given descriptors to PNG bytes.
  std::vector<uint8_t> render(const torch::Tensor& landmarks, const torch::Tensor& descriptors,
                              torch::Tensor* out_of_bounds = nullptr) const;

  static double to_display(double map_coord, int64_t map_size) { return (map_coord - 0.5) / map_size; }
  static double from_display(double display, int64_t map_size) { return display * map_size + 0.5; }

 private:
  struct Loaded {
    mutable LandmarkAutoencoder model{nullptr};  // forward passes only, never mutated
    std::string id;
  };
  std::shared_ptr<const Loaded> current() const;
  Response session_error(const std::string& id, const std::optional<Session>& s, const Loaded& m) const;
  std::optional<Response> interpolate(const nlohmann::json& req, const Loaded& m, torch::Tensor& landmarks,
                                      torch::Tensor& descriptors);

  ServeConfig cfg_;
  SessionCache sessions_;
  mutable std::shared_mutex model_mu_;
  std::shared_ptr<const Loaded> loaded_;
};

/// HTTP front end for a Service (JSON over POST, CORS headers on every reply).
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();

  /// Binds to host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop() is called. Call after bind().
  void listen();
  void stop();

 private:
  Service& service_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace lmdis::serve
