#include "cema/stats.hpp"

#include <doctest.h>

#include <random>

using namespace cema;
using namespace cema::stats;

namespace {

Mat<double> random_binary(std::mt19937_64& gen, int n, int m, double p = 0.5) {
  std::bernoulli_distribution B(p);
  Mat<double> X(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) X(i, j) = B(gen) ? 1.0 : 0.0;
  return X;
}

Vec<double> random_labels(std::mt19937_64& gen, int n) {
  std::bernoulli_distribution B(0.5);
  Vec<double> y(n);
  for (int i = 0; i < n; ++i) y[i] = B(gen) ? 1.0 : 0.0;
  y[0] = 0.0;
  y[1] = 1.0;
  return y;
}

}  // namespace

TEST_CASE("gradient matches central differences") {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> N(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 20 + trial, m = 1 + trial % 7;
    const Mat<double> X = random_binary(gen, n, m);
    const Vec<double> y = random_labels(gen, n);
    Vec<double> w(m);
    for (int j = 0; j < m; ++j) w[j] = N(gen);
    const double b = N(gen), lambda = 1.0;
    const Vec<double> g = logistic_gradient(X, y, w, b, lambda);
    Vec<double> fd(m + 1);
    const double h = 1e-6;
    for (int j = 0; j <= m; ++j) {
      Vec<double> wp = w, wm = w;
      double bp = b, bm = b;
      if (j < m) {
        wp[j] += h;
        wm[j] -= h;
      } else {
        bp += h;
        bm -= h;
      }
      fd[j] = (logistic_objective(X, y, wp, bp, lambda) - logistic_objective(X, y, wm, bm, lambda)) / (2 * h);
    }
    CHECK((g - fd).norm() / std::max(1e-12, fd.norm()) < 1e-5);
  }
}

TEST_CASE("a column equal to y gets the largest weight") {
  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 60;
    Mat<double> X = random_binary(gen, n, 2);
    const Vec<double> y = random_labels(gen, n);
    const int col = trial % 2;
    X.col(col) = y;
    const auto fit = fit_logistic(X, y, 1.0);
    CHECK(fit.weights[col] > 0.0);
    CHECK(std::abs(fit.weights[col]) > std::abs(fit.weights[1 - col]));
  }
}

TEST_CASE("all-zero features give the base rate") {
  Vec<double> y(10);
  y << 1, 1, 1, 0, 0, 0, 0, 0, 0, 0;
  const auto fit = fit_logistic(Mat<double>::Zero(10, 3).eval(), y, 1.0);
  CHECK(fit.weights.norm() == 0.0);
  CHECK(fit.intercept == doctest::Approx(std::log(0.3 / 0.7)).epsilon(1e-12));
}

TEST_CASE("fit reaches a stationary point and the loss never rises") {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 30; ++trial) {
    const Mat<double> X = random_binary(gen, 80, 6);
    const Vec<double> y = random_labels(gen, 80);
    const auto fit = fit_logistic(X, y, trial % 3 == 0 ? 0.1 : 1.0);
    CHECK(fit.grad_norm < 1e-8);
    for (std::size_t i = 1; i < fit.losses.size(); ++i) CHECK(fit.losses[i] <= fit.losses[i - 1]);
  }
}

TEST_CASE("invalid inputs") {
  Mat<double> X = Mat<double>::Zero(4, 1);
  Vec<double> y(4);
  y << 1, 1, 1, 1;
  CHECK_THROWS_AS(fit_logistic(X, y, 1.0), std::invalid_argument);
  y << 0, 1, 0, 2;
  CHECK_THROWS_AS(fit_logistic(X, y, 1.0), std::invalid_argument);
  y << 0, 1, 0, 1;
  X(0, 0) = 0.5;
  CHECK_THROWS_AS(fit_logistic(X, y, 1.0), std::invalid_argument);
  X(0, 0) = 1.0;
  CHECK_THROWS_AS(fit_logistic(X, y, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(cv_importance(X, y, 5, 7, 1.0, 21), std::invalid_argument);
}

TEST_CASE("cross-validation") {
  std::mt19937_64 gen(4);
  const Mat<double> X = random_binary(gen, 100, 4);
  const Vec<double> y = random_labels(gen, 100);

  SUBCASE("one sample per fold and repeat") {
    const Mat<double> W = cv_importance(X, y, 5, 7, 1.0, 21);
    CHECK(W.rows() == 35);
    CHECK(W.cols() == 4);
    CHECK(W == cv_importance(X, y, 5, 7, 1.0, 21));
  }
  SUBCASE("folds are stratified") {
    Rng rng(8);
    const auto f = stratified_folds(y, 5, rng);
    std::array<std::array<int, 2>, 5> count{};
    for (Eigen::Index i = 0; i < y.size(); ++i) ++count[static_cast<std::size_t>(f[static_cast<std::size_t>(i)])][y[i] == 1.0];
    for (int c = 0; c < 2; ++c) {
      int lo = 1 << 30, hi = 0;
      for (const auto& k : count) {
        lo = std::min(lo, k[static_cast<std::size_t>(c)]);
        hi = std::max(hi, k[static_cast<std::size_t>(c)]);
      }
      CHECK(hi - lo <= 1);
    }
  }
  SUBCASE("permuted labels carry no signal") {
    Mat<double> Xs = X;
    Xs.col(0) = y;
    const auto mean_weights = [&](std::uint64_t seed) {
      Vec<double> yp = y;
      std::mt19937_64 g(seed);
      std::shuffle(yp.data(), yp.data() + yp.size(), g);
      return Vec<double>(cv_importance(Xs, yp, 5, 7, 1.0, 21).colwise().mean().transpose());
    };
    // null distribution of the mean weight over independent permutations
    std::vector<std::vector<double>> null(static_cast<std::size_t>(Xs.cols()));
    for (std::uint64_t p = 1; p <= 100; ++p) {
      const Vec<double> m = mean_weights(1000 + p);
      for (Eigen::Index j = 0; j < m.size(); ++j) null[static_cast<std::size_t>(j)].push_back(m[j]);
    }
    const Vec<double> observed = mean_weights(7);
    for (Eigen::Index j = 0; j < observed.size(); ++j) {
      auto& d = null[static_cast<std::size_t>(j)];
      std::sort(d.begin(), d.end());
      const double lo = quantile_sorted(d, 0.025), hi = quantile_sorted(d, 0.975);
      CAPTURE(j);
      CHECK(lo <= 0.0);
      CHECK(0.0 <= hi);
      CHECK(lo <= observed[j]);
      CHECK(observed[j] <= hi);
    }
  }
  SUBCASE("duplicated rows give the same fit") {
    Mat<double> X2(2 * X.rows(), X.cols());
    X2 << X, X;
    Vec<double> y2(2 * y.size());
    y2 << y, y;
    const auto a = fit_logistic(X, y, 1.0);
    const auto b = fit_logistic(X2, y2, 1.0);
    CHECK((a.weights - b.weights).norm() < 1e-6);
    CHECK(std::abs(a.intercept - b.intercept) < 1e-6);
  }
}

TEST_CASE("bootstrap intervals") {
  const auto [lo, hi] = bootstrap_ci(std::vector<double>(20, 3.25));
  CHECK(lo == 3.25);
  CHECK(hi == 3.25);

  std::vector<double> coin;
  for (int i = 0; i < 500; ++i) {
    coin.push_back(0.0);
    coin.push_back(1.0);
  }
  const auto ci = bootstrap_ci(coin, 0.95, 1000, 21);
  const double half = 1.959964 * std::sqrt(0.25 / 1000.0);
  CHECK(std::abs(ci.first - (0.5 - half)) <= 0.01);
  CHECK(std::abs(ci.second - (0.5 + half)) <= 0.01);

  const auto med = bootstrap_ci(coin, 0.0, 1000, 21);
  CHECK(med.first == med.second);
  CHECK(std::abs(med.first - 0.5) < 0.01);

  CHECK(bootstrap_ci(coin, 0.9, 1000, 5) == bootstrap_ci(coin, 0.9, 1000, 5));
  CHECK_THROWS_AS(bootstrap_ci(std::vector<double>{}), std::invalid_argument);
}
