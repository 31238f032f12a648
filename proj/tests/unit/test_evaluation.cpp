#include "../support/doctest.hpp"

#include <random>

#include "lmdis/evaluation.hpp"

using namespace lmdis;
using namespace lmdis::evaluation;

namespace {

Matrix randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0, s);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Matrix random_rotation(Eigen::Index n, std::mt19937_64& rng) {
  Eigen::HouseholderQR<Matrix> qr(randn(n, n, rng));
  return qr.householderQ();
}

// Bodies with two mirror pairs (0,1) and (2,3); in frontal layout the left
// landmark sits right of the right one.
Matrix frontal_bodies(Eigen::Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.3, 0.7), w(0.05, 0.2), v(-0.1, 0.1);
  Matrix g(n, 8);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double cx = u(rng), cy = u(rng);
    for (int p = 0; p < 2; ++p) {
      const double half = w(rng), y = cy + (p ? 0.15 : -0.15) + v(rng);
      g(i, 4 * p) = cx + half;
      g(i, 4 * p + 1) = y + 0.01 * v(rng);
      g(i, 4 * p + 2) = cx - half;
      g(i, 4 * p + 3) = y;
    }
  }
  return g;
}

const std::vector<std::array<int, 2>> kPairs{{0, 1}, {2, 3}};

}  // namespace

TEST_CASE("regressor recovers identity and planted maps") {
  std::mt19937_64 rng(1);
  const Matrix x = randn(200, 10, rng);
  auto id = fit_regressor(x, x);
  CHECK((id.weights - Matrix::Identity(10, 10)).cwiseAbs().maxCoeff() <= 1e-8);
  CHECK(id.residual_rms <= 1e-8);
  CHECK_FALSE(id.rank_deficient);

  const Matrix a = randn(10, 6, rng);
  const auto m = fit_regressor(x, x * a);
  CHECK((m.weights - a).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("regressor residual matches planted noise") {
  std::mt19937_64 rng(2);
  const Matrix x = randn(3000, 10, rng);
  const Matrix y = x * randn(10, 6, rng) + randn(3000, 6, rng, 0.01);
  const auto m = fit_regressor(x, y);
  CHECK(m.residual_rms == doctest::Approx(0.01).epsilon(0.2));
}

TEST_CASE("rank-deficient designs get the minimum-norm solution") {
  std::mt19937_64 rng(3);
  Matrix x = randn(50, 4, rng);
  x.col(3) = x.col(2);
  const Matrix y = x.leftCols(3) * randn(3, 2, rng);
  const auto m = fit_regressor(x, y);
  CHECK(m.rank_deficient);
  CHECK(m.rank == 3);
  CHECK(m.residual_rms < 1e-10);
  // the duplicated column shares its weight equally under minimum norm
  CHECK((m.weights.row(2) - m.weights.row(3)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK_THROWS(fit_regressor(x, y.topRows(10)));
}

TEST_CASE("regressor is equivariant to rotating the annotation basis") {
  std::mt19937_64 rng(4);
  const Matrix x = randn(100, 8, rng);
  const Matrix y = x * randn(8, 6, rng) + randn(100, 6, rng, 0.1);
  const Matrix q = random_rotation(6, rng);
  const auto a = fit_regressor(x, y);
  const auto b = fit_regressor(x, y * q);
  CHECK((b.predict(x) * q.transpose() - a.predict(x)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("nme basics") {
  std::mt19937_64 rng(5);
  const Matrix gt = frontal_bodies(20, rng);
  NormalizerAux aux;
  aux.pair = {0, 1};
  CHECK(nme(gt, gt, Normalizer::kBiocular, aux).nme == 0.0);

  // shift every landmark by exactly its image's biocular distance
  Matrix pred = gt;
  for (Eigen::Index i = 0; i < gt.rows(); ++i) {
    const double d = std::hypot(gt(i, 0) - gt(i, 2), gt(i, 1) - gt(i, 3));
    for (Eigen::Index k = 0; k < 4; ++k) pred(i, 2 * k) += d;
  }
  CHECK(nme(pred, gt, Normalizer::kBiocular, aux).nme == doctest::Approx(100.0).epsilon(1e-12));

  aux.image_size = 2.0;
  CHECK(nme((gt.array() + 0.02).matrix(), gt, Normalizer::kImageSize, aux).nme ==
        doctest::Approx(100 * 0.02 * std::sqrt(2.0) / 2.0));
  CHECK_THROWS(nme(gt, gt.leftCols(6), Normalizer::kBiocular, aux));
  aux.pair = {0, 9};
  CHECK_THROWS(nme(gt, gt, Normalizer::kBiocular, aux));
}

TEST_CASE("nme matches a hand computation") {
  // three images, two landmarks each; the normalizer pair is (0, 1)
  Matrix gt(3, 4), pred(3, 4);
  gt << 0, 0, 4, 0,  //
      1, 1, 1, 3,    //
      0, 0, 3, 4;
  pred << 0, 1, 4, 0,  //
      1, 1, 2, 3,      //
      3, 4, 0, 0;
  NormalizerAux aux;
  aux.pair = {0, 1};
  const auto r = nme(pred, gt, Normalizer::kBiwheel, aux);
  // (1+0)/2/4, (0+1)/2/2, (5+5)/2/5
  const double expect = 100.0 * (0.125 + 0.25 + 1.0) / 3.0;
  CHECK(r.nme == doctest::Approx(expect).epsilon(1e-12));
  CHECK(r.per_image[1] == doctest::Approx(25.0));
}

TEST_CASE("zero normalizers are skipped and counted") {
  Matrix gt(2, 4), pred(2, 4);
  gt << 1, 1, 1, 1, 0, 0, 2, 0;
  pred = gt;
  pred(1, 0) += 1;
  NormalizerAux aux;
  aux.pair = {0, 1};
  const auto r = nme(pred, gt, Normalizer::kBiocular, aux);
  CHECK(r.skipped == 1);
  CHECK(r.images == 1);
  CHECK(r.nme == doctest::Approx(25.0));
  CHECK(std::isnan(r.per_image[0]));
}

TEST_CASE("nme is invariant to a similarity transform of both sets") {
  std::mt19937_64 rng(6);
  const Matrix gt = frontal_bodies(10, rng);
  const Matrix pred = gt + randn(10, 8, rng, 0.01);
  NormalizerAux aux;
  aux.pair = {0, 1};
  const double base = nme(pred, gt, Normalizer::kBiocular, aux).nme;
  const double c = std::cos(0.7) * 3.0, s = std::sin(0.7) * 3.0;
  auto sim = [&](const Matrix& m) {
    Matrix out = m;
    for (Eigen::Index k = 0; k < 4; ++k) {
      out.col(2 * k) = c * m.col(2 * k) - s * m.col(2 * k + 1) + Eigen::VectorXd::Constant(m.rows(), 5.0);
      out.col(2 * k + 1) = s * m.col(2 * k) + c * m.col(2 * k + 1) - Eigen::VectorXd::Constant(m.rows(), 2.0);
    }
    return out;
  };
  CHECK(nme(sim(pred), sim(gt), Normalizer::kBiocular, aux).nme == doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("frontal heuristic and side swap") {
  std::mt19937_64 rng(7);
  const Matrix g = frontal_bodies(5, rng);
  for (bool f : frontal_views(g, kPairs)) CHECK(f);
  const Matrix back = swap_sides(g, kPairs);
  for (bool f : frontal_views(back, kPairs)) CHECK_FALSE(f);
  CHECK((swap_sides(back, kPairs) == g));
  // exactly 2 of 3 pairs crossed is not more than two thirds
  Matrix three(1, 12);
  three << 2, 0, 1, 0, 2, 1, 1, 1, 0, 2, 1, 2;
  CHECK_FALSE(frontal_views(three, {{0, 1}, {2, 3}, {4, 5}})[0]);
}

TEST_CASE("flip-aware fit on all-frontal data equals the plain fit") {
  std::mt19937_64 rng(8);
  const Matrix g = frontal_bodies(80, rng);
  const Matrix mix = randn(8, 8, rng);
  const Matrix x = g * mix + randn(80, 8, rng, 1e-3);
  const auto flip = flip_aware_fit(x, g, kPairs);
  const auto plain = fit_regressor(x, g);
  CHECK(flip.converged);
  for (bool f : flip.flipped) CHECK_FALSE(f);
  CHECK((flip.model.weights - plain.weights).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("flip-aware fit flags exactly the mirrored half") {
  std::mt19937_64 rng(9);
  const Eigen::Index n = 100;
  const Matrix g = frontal_bodies(n, rng);
  // the detector sees geometry, not sides: the same mapping for every body
  const Matrix x = g * randn(8, 8, rng);
  Matrix ann = g;
  std::vector<bool> mirrored(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    mirrored[i] = i % 2 == 1;
    if (mirrored[i]) ann.row(i) = swap_sides(g.row(i), kPairs);
  }
  const auto res = flip_aware_fit(x, ann, kPairs);
  CHECK(res.converged);
  CHECK(res.iterations <= 20);
  CHECK((res.flipped == mirrored));
  for (size_t i = 1; i < res.changes.size(); ++i) CHECK(res.changes[i] < res.changes[i - 1]);
  NormalizerAux aux;
  aux.pair = {0, 1};
  CHECK(flip_aware_nme(res.model.predict(x), ann, kPairs, Normalizer::kBiocular, aux).nme < 1e-6);

  CHECK_THROWS_WITH(flip_aware_fit(x, swap_sides(g, kPairs), kPairs),
                    doctest::Contains("cannot bootstrap orientation"));
}

TEST_CASE("learning curve") {
  std::mt19937_64 rng(10);
  const Matrix g = frontal_bodies(400, rng);
  const Matrix x = g * randn(8, 8, rng) + randn(400, 8, rng, 0.01);
  const Matrix tx = x.topRows(300), ty = g.topRows(300), ex = x.bottomRows(100), ey = g.bottomRows(100);
  NormalizerAux aux;
  aux.pair = {0, 1};
  const auto pts = learning_curve(tx, ty, ex, ey, {4, 10, 30, 100, 300}, Normalizer::kBiocular, aux, 3);
  REQUIRE(pts.size() == 5);
  CHECK(pts[0].underdetermined);
  CHECK_FALSE(pts[1].underdetermined);
  const double full = nme(fit_regressor(tx, ty).predict(ex), ey, Normalizer::kBiocular, aux).nme;
  CHECK(pts[4].nme == doctest::Approx(full).epsilon(1e-12));
  CHECK(pts[4].nme < pts[1].nme);
  CHECK(pts[3].nme < pts[1].nme);
  CHECK(pts[2].seed != pts[3].seed);
  CHECK_THROWS(learning_curve(tx, ty, ex, ey, {301}, Normalizer::kBiocular, aux, 3));
}

TEST_CASE("landmark spread") {
  auto lm = torch::zeros({2, 2, 2}, torch::kFloat64);
  lm[0][1][0] = 3;
  lm[0][1][1] = 4;
  lm[1][1][0] = 1;
  CHECK(landmark_spread(lm) == doctest::Approx(3.0));
  CHECK(landmark_spread(torch::zeros({1, 1, 2})) == 0.0);
}
