#include <gtest/gtest.h>

#include <cmath>

#include "nirnl/cmp.hpp"
#include "oracles.hpp"

using namespace nirnl;

namespace {

MatrixD polar(std::initializer_list<double> angles) {
  MatrixD m(angles.size(), 2);
  std::size_t i = 0;
  for (double a : angles) {
    m(i, 0) = std::cos(a);
    m(i, 1) = std::sin(a);
    ++i;
  }
  return m;
}

// Two pairs on the unit circle with cos(v_i, t_i) = diag and cos(v_i, t_j) = off.
std::pair<MatrixD, MatrixD> two_pairs(double diag, double off) {
  const double t1 = std::acos(diag), t2 = std::acos(off);
  return {polar({0.0, t1 + std::acos(off)}), polar({t1, t2})};
}

MatrixD random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  MatrixD m(r, c);
  for (auto& v : m.data()) v = rng.normal();
  return m;
}

}  // namespace

TEST(Cmp, WellSeparatedPairsGiveZero) {
  const auto [fv, ft] = two_pairs(0.9, 0.1);
  EXPECT_NEAR(cosine_similarity(fv.row(1), ft.row(1)), 0.9, 1e-12);
  EXPECT_NEAR(cosine_similarity(fv.row(1), ft.row(0)), 0.1, 1e-12);
  EXPECT_EQ(loss_cmp(fv, ft, 0.2).loss, 0.0);
}

TEST(Cmp, InvertedPairsGiveTwo) {
  const auto [fv, ft] = two_pairs(0.1, 0.9);
  EXPECT_NEAR(loss_cmp(fv, ft, 0.2).loss, 2.0, 1e-12);
}

TEST(Cmp, IdenticalRowsZeroMargin) {
  MatrixD fv(4, 3), ft(4, 3);
  for (std::size_t i = 0; i < 4; ++i) {
    fv(i, 0) = 1;
    fv(i, 2) = -2;
    ft(i, 1) = 0.5;
  }
  EXPECT_EQ(loss_cmp(fv, ft, 0.0).loss, 0.0);
}

TEST(Cmp, SingleRowIsZero) {
  Rng rng(1);
  const auto l = loss_cmp(random_matrix(1, 3, rng), random_matrix(1, 3, rng), 0.2);
  EXPECT_EQ(l.loss, 0.0);
  for (double g : l.grad_fv.data()) EXPECT_EQ(g, 0.0);
}

TEST(Cmp, ShapeMismatchThrows) {
  EXPECT_THROW(loss_cmp(MatrixD(3, 2), MatrixD(2, 2), 0.2), std::invalid_argument);
}

TEST(Cmp, MatchesScalarOracle) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng.below(8);
    const auto fv = random_matrix(n, 5, rng);
    const auto ft = random_matrix(n, 5, rng);
    const double m = rng.uniform(0, 1);
    EXPECT_NEAR(loss_cmp(fv, ft, m).loss, oracle::cmp_loss(oracle::to_mat(fv), oracle::to_mat(ft), m), 1e-10);
  }
}

TEST(Cmp, NonNegativeAndMonotoneInMargin) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const auto fv = random_matrix(6, 4, rng);
    const auto ft = random_matrix(6, 4, rng);
    const double a = loss_cmp(fv, ft, 0.1).loss;
    const double b = loss_cmp(fv, ft, 0.3).loss;
    EXPECT_GE(a, 0.0);
    EXPECT_GE(b, a);
  }
}

TEST(Cmp, ScaleInvariant) {
  Rng rng(6);
  auto fv = random_matrix(5, 4, rng);
  const auto ft = random_matrix(5, 4, rng);
  const double l0 = loss_cmp(fv, ft, 0.2).loss;
  for (auto& v : fv.row(2)) v *= 7.5;
  EXPECT_NEAR(loss_cmp(fv, ft, 0.2).loss, l0, 1e-12);
}

TEST(Cmp, GradCheckTenSeeds) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + rng.below(7), d = 2 + rng.below(15);
    const auto fv = random_matrix(n, d, rng);
    const auto ft = random_matrix(n, d, rng);
    std::vector<double> p(fv.data().begin(), fv.data().end());
    p.insert(p.end(), ft.data().begin(), ft.data().end());
    auto loss = [&](std::span<const double> x, std::span<double> g) {
      MatrixD a(n, d), b(n, d);
      std::copy(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n * d), a.data().begin());
      std::copy(x.begin() + static_cast<std::ptrdiff_t>(n * d), x.end(), b.data().begin());
      const auto l = loss_cmp(a, b, 0.2);
      if (!g.empty()) {
        std::copy(l.grad_fv.data().begin(), l.grad_fv.data().end(), g.begin());
        std::copy(l.grad_ft.data().begin(), l.grad_ft.data().end(), g.begin() + static_cast<std::ptrdiff_t>(n * d));
      }
      return l.loss;
    };
    EXPECT_LE(grad_check(loss, p).max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Cmp, FloatAgreesWithDouble) {
  Rng rng(7);
  const auto fv = random_matrix(8, 6, rng);
  const auto ft = random_matrix(8, 6, rng);
  const auto d = loss_cmp(fv, ft, 0.2);
  const auto f = loss_cmp(fv.cast<float>(), ft.cast<float>(), 0.2f);
  EXPECT_NEAR(f.loss, d.loss, 1e-4);
}
