#include "../support/doctest.hpp"

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "lmdis/training.hpp"

using namespace lmdis;
using namespace lmdis::training;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("lmdis_train_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TrainConfig tiny_config(const fs::path& out) {
  TrainConfig c;
  c.model.image_size = 56;
  c.model.image_channels = 1;
  c.model.num_landmarks = 4;
  c.model.descriptor_dim = 3;
  c.model.feature_dim = 5;
  c.model.use_descriptors = false;
  c.model.hourglass_channels = {4, 6, 8};
  c.model.skip_convs = {2, 1};
  c.dataset = data::dataset_preset("mnist");
  c.dataset.root = fs::path(LMDIS_DATA_DIR) / "mnist";
  c.dataset.digits = {2};
  c.batch_size = 8;
  c.iterations = 10;
  c.seed = 7;
  c.lr_decay_iters = {1000, 2000};
  c.recon_increase_iters = {1000, 2000};
  c.weights.recon = 1e-3;
  c.weights.conc = 100;
  c.weights.sep = 20;
  c.weights.sigma_sep = 0.08;
  c.weights.eqv = 1e4;
  c.landmark_control_warmup_iters = 0;
  c.output_dir = out;
  c.dump_every = 0;
  c.checkpoint_every = 0;
  return c;
}

std::vector<torch::Tensor> snapshot(torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
  for (const auto& b : m.buffers()) out.push_back(b.detach().clone());
  return out;
}

double max_diff(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  REQUIRE(a.size() == b.size());
  double d = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].numel() == 0) continue;
    d = std::max(d, (a[i].to(torch::kFloat64) - b[i].to(torch::kFloat64)).abs().max().item<double>());
  }
  return d;
}

}  // namespace

TEST_CASE("schedule is piecewise constant") {
  TrainConfig c;
  c.weights.recon = 0.01;
  auto s = schedule(150000, c);
  CHECK(s.lr == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.lambda_recon == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(s.landmark_mode_prob == doctest::Approx(0.3));
  s = schedule(0, c);
  CHECK(s.lr == doctest::Approx(1e-3));
  CHECK(s.lambda_recon == doctest::Approx(0.01));
  CHECK(s.landmark_mode_prob == 0.0);
  s = schedule(250000, c);
  CHECK(s.lr == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(s.lambda_recon == doctest::Approx(1.0));
  CHECK(schedule(4999, c).landmark_mode_prob == 0.0);
  CHECK(schedule(5000, c).landmark_mode_prob == doctest::Approx(0.3));
  CHECK(schedule(99999, c).lr == doctest::Approx(1e-3));
  CHECK(schedule(100000, c).lr == doctest::Approx(1e-4));
}

TEST_CASE("augmentation") {
  std::mt19937_64 rng(1);
  const auto x = torch::rand({4, 3, 8, 8});
  CHECK(torch::allclose(augment(x, 0.0, {1.0, 1.0}, rng), x, 0, 1e-6));

  const auto y = augment(x * 3 - 1, 0.5, {0.5, 2.0}, rng);
  CHECK(y.min().item<float>() >= 0.0f);
  CHECK(y.max().item<float>() <= 1.0f);

  // brightness draws average out; contrast about the mean leaves it in place
  const auto flat = torch::full({10000, 1, 2, 2}, 0.5);
  const auto z = augment(flat, 0.12, {0.8, 1.25}, rng);
  CHECK(std::abs((z - flat).mean().item<double>()) < 0.003);
  const auto single = augment(torch::rand({3, 5, 5}), 0.1, {0.9, 1.1}, rng);
  CHECK(single.dim() == 3);
}

TEST_CASE("config json round trip and validation") {
  const auto dir = scratch("cfg");
  auto c = tiny_config("out");
  c.dataset.root = "../mnist";
  std::ofstream(dir / "c.json") << nlohmann::json(c).dump(1);
  const auto back = load_config(dir / "c.json");
  CHECK(back.output_dir == dir / "out");
  CHECK(back.dataset.root == (dir / "../mnist").lexically_normal());
  CHECK(back.weights.eqv == doctest::Approx(1e4));
  CHECK(back.model.hourglass_channels == c.model.hourglass_channels);
  CHECK(back.dataset.digits == c.dataset.digits);

  auto bad = tiny_config(dir);
  bad.batch_size = 12;
  CHECK_THROWS(bad.validate());
  bad = tiny_config(dir);
  bad.lr_decay_iters = {10, 5};
  CHECK_THROWS(bad.validate());
  bad = tiny_config(dir);
  bad.model.image_size = 64;
  CHECK_THROWS(bad.validate());
  bad = tiny_config(dir);
  bad.use_flow = true;
  CHECK_THROWS(bad.validate());
  fs::remove_all(dir);
}

TEST_CASE("a step with every weight zero leaves the parameters alone") {
  auto c = tiny_config(scratch("zero"));
  c.weights.recon = 0;
  c.weights.conc = 0;
  c.weights.sep = 0;
  c.weights.eqv = 0;
  Trainer t(c);
  const auto ds = data::Dataset::open(c.dataset);
  data::BatchIterator it(ds, 8, 0);
  std::vector<torch::Tensor> before;
  for (const auto& p : t.model()->parameters()) before.push_back(p.detach().clone());
  const auto r = t.step(it.next());
  CHECK(r.applied);
  CHECK(t.iteration() == 1);
  std::vector<torch::Tensor> after;
  for (const auto& p : t.model()->parameters()) after.push_back(p.detach().clone());
  CHECK(max_diff(before, after) == 0.0);
  fs::remove_all(c.output_dir);
}

TEST_CASE("a non-finite loss aborts the step") {
  auto c = tiny_config(scratch("nan"));
  c.tps.landmark_mode_prob = 0;
  Trainer t(c);
  const auto ds = data::Dataset::open(c.dataset);
  data::BatchIterator it(ds, 8, 0);
  t.step(it.next());
  auto batch = it.next();
  batch.images[0][0][10][10].fill_(std::numeric_limits<float>::quiet_NaN());
  const auto before = snapshot(*t.model());
  const auto rng_before = t.rng();
  const auto r = t.step(batch);
  CHECK_FALSE(r.applied);
  CHECK(r.incident.find("non-finite") != std::string::npos);
  CHECK(t.iteration() == 1);
  CHECK(max_diff(before, snapshot(*t.model())) == 0.0);
  CHECK(t.rng() == rng_before);
}

TEST_CASE("the weighted recon term jumps at the schedule boundary") {
  auto c = tiny_config(scratch("sched"));
  c.lr = 1e-12;
  c.recon_increase_iters = {2, 100};
  Trainer t(c);
  const auto ds = data::Dataset::open(c.dataset);
  data::BatchIterator it(ds, 8, 0);
  const auto batch = it.next();
  std::vector<StepResult> rs;
  for (int i = 0; i < 3; ++i) rs.push_back(t.step(batch));
  CHECK(rs[2].losses.recon == doctest::Approx(rs[1].losses.recon).epsilon(1e-4));
  CHECK(rs[2].losses.w_recon / rs[1].losses.w_recon == doctest::Approx(10).epsilon(1e-3));
  CHECK(rs[1].losses.w_recon == doctest::Approx(rs[0].losses.w_recon).epsilon(1e-4));
  fs::remove_all(c.output_dir);
}

TEST_CASE("resuming reproduces uninterrupted training") {
  const auto dir = scratch("resume");
  auto c = tiny_config(dir);
  c.tps.landmark_mode_prob = 0.5;
  const auto ds = data::Dataset::open(c.dataset);
  const int n = 4;

  Trainer straight(c);
  data::BatchIterator it_a(ds, 8, c.seed);
  for (int i = 0; i < 2 * n; ++i) REQUIRE(straight.step(it_a.next()).applied);

  {
    Trainer first(c);
    data::BatchIterator it_b(ds, 8, c.seed);
    for (int i = 0; i < n; ++i) REQUIRE(first.step(it_b.next()).applied);
    first.save_state(dir / "state.lmd", &it_b);
  }
  auto c2 = c;
  c2.seed = 99;  // everything that matters comes from the state file
  Trainer resumed(c2);
  const auto iter_state = resumed.load_state(dir / "state.lmd");
  CHECK(resumed.iteration() == n);
  data::BatchIterator it_c(ds, 8, 0);
  it_c.restore(iter_state);
  for (int i = 0; i < n; ++i) REQUIRE(resumed.step(it_c.next()).applied);

  CHECK(max_diff(snapshot(*straight.model()), snapshot(*resumed.model())) <= 1e-6);
  CHECK(resumed.loss_history().size() == straight.loss_history().size());
  CHECK(resumed.loss_history().back() == doctest::Approx(straight.loss_history().back()).epsilon(1e-6));

  auto other = c;
  other.model.num_landmarks = 5;
  Trainer mismatched(other);
  CHECK_THROWS(mismatched.load_state(dir / "state.lmd"));
  fs::remove_all(dir);
}

TEST_CASE("batch-norm finalization is deterministic") {
  auto c = tiny_config(scratch("bn"));
  Trainer t(c);
  const auto ds = data::Dataset::open(c.dataset);
  data::BatchIterator it(ds, 8, 0);
  for (int i = 0; i < 3; ++i) t.step(it.next());

  t.finalize_batchnorm(ds, 12, 5);
  CHECK(t.model()->bn_state() == BnState::kFinalized);
  CHECK_FALSE(t.model()->is_training());
  std::vector<torch::Tensor> first;
  for (const auto& b : t.model()->buffers()) first.push_back(b.clone());
  t.finalize_batchnorm(ds, 12, 5);
  std::vector<torch::Tensor> second;
  for (const auto& b : t.model()->buffers()) second.push_back(b.clone());
  CHECK(max_diff(first, second) == 0.0);

  const auto x = data::Dataset::open(c.dataset).get(3).to_tensor().unsqueeze(0);
  torch::NoGradGuard ng;
  const auto a = t.model()->encode(x).landmarks.coords;
  const auto b = t.model()->encode(x).landmarks.coords;
  CHECK(torch::equal(a, b));
  fs::remove_all(c.output_dir);
}

TEST_CASE("run writes progress, overlays and a resumable state") {
  const auto dir = scratch("run");
  auto c = tiny_config(dir);
  c.iterations = 6;
  c.log_every = 3;
  c.dump_every = 3;
  c.checkpoint_every = 3;
  Trainer t(c);
  const auto ds = data::Dataset::open(c.dataset);
  data::BatchIterator it(ds, 8, c.seed);
  t.run(it);
  CHECK(t.iteration() == 6);
  std::ifstream csv(dir / "progress.csv");
  int lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  CHECK(lines == 7);
  CHECK(fs::exists(dir / "overlays" / "iter_0000003.png"));
  CHECK(fs::exists(dir / "overlays" / "iter_0000006.png"));
  CHECK(fs::exists(dir / "state.lmd"));
  Trainer back(c);
  back.load_state(dir / "state.lmd");
  CHECK(back.iteration() == 6);
  fs::remove_all(dir);
}

TEST_CASE("flow pairs drive the equivariance term") {
  const auto dir = scratch("flowstep");
  auto c = tiny_config(dir / "out");
  const auto src = data::Dataset::open(c.dataset);
  std::vector<Image> raw;
  for (size_t i = 0; i < 8; ++i) raw.push_back(src.get(i));
  data::write_translating_digits(dir / "frames", raw, c.dataset, 2.0, 3);
  c.dataset = data::load_dataset_spec(dir / "frames" / "dataset.json");
  c.use_flow = true;
  Trainer t(c);
  const auto ds = data::Dataset::open(c.dataset);
  data::BatchIterator it(ds, 8, 0, true);
  const auto r = t.step(it.next());
  CHECK(r.applied);
  CHECK(r.losses.w_eqv > 0);
  CHECK(r.losses.flow_prefer < 0);
  fs::remove_all(dir);
}

TEST_CASE("training lowers the loss on a small digit subset") {
  auto c = tiny_config(scratch("smoke"));
  c.dataset.limit = 500;
  c.dataset.digits = {};
  c.landmark_control_warmup_iters = 100;
  Trainer t(c);
  const auto ds = data::Dataset::open(c.dataset);
  REQUIRE(ds.size() == 500);
  data::BatchIterator it(ds, 8, c.seed);
  std::vector<double> totals;
  for (int i = 0; i < 500; ++i) {
    const auto r = t.step(it.next());
    REQUIRE(r.applied);
    totals.push_back(r.losses.total_value());
  }
  const auto avg = [&](size_t from) {
    double s = 0;
    for (size_t i = from; i < from + 50; ++i) s += totals[i];
    return s / 50;
  };
  MESSAGE("first 50 avg " << avg(0) << ", last 50 avg " << avg(450));
  CHECK(avg(450) < avg(0));
  fs::remove_all(c.output_dir);
}
