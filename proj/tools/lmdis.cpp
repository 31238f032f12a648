// lmdis: train, validate data, evaluate and serve landmark autoencoders.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "lmdis/data.hpp"
#include "lmdis/evaluation.hpp"
#include "lmdis/log.hpp"
#include "lmdis/serve.hpp"
#include "lmdis/training.hpp"

namespace fs = std::filesystem;
using namespace lmdis;

namespace {

int train(const fs::path& config_path, const std::optional<fs::path>& resume) {
  auto cfg = training::load_config(config_path);
  fs::create_directories(cfg.output_dir);
  {
    std::ofstream(cfg.output_dir / "config.json") << nlohmann::json(cfg).dump(2) << "\n";
  }
  const auto ds = data::Dataset::open(cfg.dataset);
  log_info("dataset: " + std::to_string(ds.size()) + " training images, " + std::to_string(ds.eval_size()) +
           " held out");
  training::Trainer trainer(cfg);
  data::BatchIterator batches(ds, cfg.batch_size, cfg.seed, cfg.use_flow);
  if (resume) {
    const auto it = trainer.load_state(*resume);
    if (!it.is_null()) batches.restore(it);
    log_info("resumed at iteration " + std::to_string(trainer.iteration()));
  }
  trainer.run(batches);
  trainer.finalize_batchnorm(ds, cfg.bn_finalize_batches, cfg.seed + 1);
  const auto out = cfg.output_dir / "model.lmd";
  save_checkpoint(out, trainer.model());
  log_info("wrote " + out.string());
  return 0;
}

data::DatasetSpec dataset_from_arg(const std::string& arg) {
  const fs::path p(arg);
  if (fs::is_regular_file(p)) return data::load_dataset_spec(p);
  if (fs::is_regular_file(p / "dataset.json")) return data::load_dataset_spec(p / "dataset.json");
  throw std::runtime_error(arg + ": expected a dataset directory with dataset.json, or a spec file");
}

int validate(const std::string& root) {
  const auto report = data::validate_dataset(dataset_from_arg(root));
  std::cout << report.to_json().dump(2) << "\n";
  return report.ok() ? 0 : 1;
}

int evaluate(const fs::path& ckpt, const std::string& dataset, const std::optional<fs::path>& annotations,
             const std::string& normalizer, bool flip_aware, const fs::path& out_prefix) {
  auto model = load_checkpoint(ckpt);
  if (model->bn_state() != BnState::kFinalized) log_warn("checkpoint has running batch-norm statistics");
  const auto spec = dataset_from_arg(dataset);
  const auto ds = data::Dataset::open(spec);
  fs::path ann_path;
  if (annotations) {
    ann_path = *annotations;
  } else if (!spec.annotations.empty()) {
    ann_path = spec.root / spec.annotations;
  } else {
    throw std::runtime_error("no annotations given and the dataset spec names none");
  }
  const auto ann = data::read_annotations(ann_path);
  const auto report =
      evaluation::evaluate_annotations(model, ds, ann, evaluation::parse_normalizer(normalizer), flip_aware);
  std::vector<std::string> keys;
  for (size_t i = 0; i < ds.eval_size(); ++i) keys.push_back(ds.eval_key(i));
  if (out_prefix.has_parent_path()) fs::create_directories(out_prefix.parent_path());
  auto json_path = out_prefix, csv_path = out_prefix;
  json_path += ".json";
  csv_path += ".csv";
  evaluation::write_report(report, keys, json_path, csv_path);
  std::cout << "NME " << report.result.nme << "% over " << report.result.images << " images ("
            << evaluation::to_string(report.normalizer) << ")\n";
  return 0;
}

int diagnose(const fs::path& ckpt, const fs::path& config_path, uint64_t seed) {
  const auto cfg = training::load_config(config_path);
  auto model = load_checkpoint(ckpt);
  const auto ds = data::Dataset::open(cfg.dataset);
  const auto images = evaluation::eval_images(ds);
  const auto eqv = evaluation::equivariance_error(model, images, cfg.tps, seed);
  const nlohmann::json out{{"images", images.size(0)},
                           {"spread_px", evaluation::landmark_spread(evaluation::detect_landmarks(model, images))},
                           {"eqv_mean_px", eqv.mean},
                           {"eqv_median_px", eqv.median},
                           {"eqv_landmarks", eqv.count},
                           {"eqv_dropped", eqv.dropped}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

serve::HttpServer* g_server = nullptr;

int run_server(const fs::path& ckpt, const std::string& host, int port, const std::string& preset,
               const std::string& cors) {
  serve::ServeConfig cfg;
  cfg.cors_origin = cors;
  if (!preset.empty()) cfg.preprocess = data::dataset_preset(preset);
  serve::Service service(cfg);
  service.load(ckpt);
  serve::HttpServer server(service);
  const int bound = server.bind(host, port);
  log_info("serving " + ckpt.string() + " on http://" + host + ":" + std::to_string(bound));
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  server.listen();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised landmark discovery"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "debug logging");

  auto* tr = app.add_subcommand("train", "train a model from a config file");
  fs::path config;
  std::optional<fs::path> resume;
  tr->add_option("--config", config, "training config (JSON)")->required()->check(CLI::ExistingFile);
  tr->add_option("--resume", resume, "training state to resume from")->check(CLI::ExistingFile);

  auto* dat = app.add_subcommand("data", "dataset utilities");
  dat->require_subcommand(1);
  auto* val = dat->add_subcommand("validate", "check manifests, sizes, value ranges and sidecars");
  std::string root;
  val->add_option("root", root, "dataset directory (with dataset.json) or spec file")->required();

  auto* ev = app.add_subcommand("eval", "regress annotations from discovered landmarks");
  fs::path ckpt;
  std::string dataset, normalizer = "biocular";
  std::optional<fs::path> annotations;
  bool flip = false;
  fs::path out = "eval_report";
  ev->add_option("--ckpt", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--dataset", dataset, "dataset directory or spec file")->required();
  ev->add_option("--annotations", annotations, "annotation sidecar (default: the spec's)");
  ev->add_option("--normalizer", normalizer, "biocular, biwheel or image_size");
  ev->add_flag("--flip-aware", flip, "resolve left/right ambiguity of back views");
  ev->add_option("--out", out, "report path prefix; writes <out>.json and <out>.csv");

  auto* dg = app.add_subcommand("diagnose", "landmark spread and equivariance error on the held-out split");
  fs::path dg_config;
  uint64_t dg_seed = 1234;
  dg->add_option("--ckpt", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  dg->add_option("--config", dg_config, "training config (dataset and warp distribution)")
      ->required()
      ->check(CLI::ExistingFile);
  dg->add_option("--seed", dg_seed, "seed for the evaluation warps");

  auto* sv = app.add_subcommand("serve", "HTTP API for encode/decode/morph");
  std::string host = "127.0.0.1", preset, cors = "*";
  int port = 8080;
  sv->add_option("--ckpt", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  sv->add_option("--port", port, "port (0 picks a free one)");
  sv->add_option("--host", host, "bind address");
  sv->add_option("--preset", preset, "preprocess uploads like this dataset preset");
  sv->add_option("--cors-origin", cors, "Access-Control-Allow-Origin value");

  CLI11_PARSE(app, argc, argv);
  if (verbose) set_log_level(LogLevel::kDebug);
  try {
    if (*tr) return train(config, resume);
    if (*val) return validate(root);
    if (*ev) return evaluate(ckpt, dataset, annotations, normalizer, flip, out);
    if (*dg) return diagnose(ckpt, dg_config, dg_seed);
    if (*sv) return run_server(ckpt, host, port, preset, cors);
  } catch (const std::exception& e) {
    log_error(e.what());
    return 1;
  }
  return 0;
}
