#ifndef CEMA_STATS_HPP
#define CEMA_STATS_HPP

#include "cema/core.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace cema::stats {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct LogisticFit {
  Vec<Scalar> weights;
  Scalar intercept = 0;
  int iterations = 0;
  Scalar grad_norm = 0;
  std::vector<Scalar> losses;  // objective after each accepted step, starting at the initial point
};

template <typename Scalar>
Scalar softplus(Scalar z) {
  return z > Scalar(0) ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  if (z >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

// Mean logistic loss plus lambda/2 * |w|^2; the intercept is not penalised.
template <typename Scalar>
Scalar logistic_objective(const Mat<Scalar>& X, const Vec<Scalar>& y, const Vec<Scalar>& w, Scalar b,
                          Scalar lambda) {
  const Vec<Scalar> z = (X * w).array() + b;
  Scalar loss = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) loss += softplus(z[i]) - y[i] * z[i];
  return loss / static_cast<Scalar>(X.rows()) + Scalar(0.5) * lambda * w.squaredNorm();
}

// Gradient over (w, b), intercept last.
template <typename Scalar>
Vec<Scalar> logistic_gradient(const Mat<Scalar>& X, const Vec<Scalar>& y, const Vec<Scalar>& w, Scalar b,
                              Scalar lambda) {
  const Eigen::Index n = X.rows(), m = X.cols();
  const Vec<Scalar> z = (X * w).array() + b;
  Vec<Scalar> r(n);
  for (Eigen::Index i = 0; i < n; ++i) r[i] = sigmoid(z[i]) - y[i];
  Vec<Scalar> g(m + 1);
  g.head(m) = X.transpose() * r / static_cast<Scalar>(n) + lambda * w;
  g[m] = r.mean();
  return g;
}

inline void check_binary_labels(const auto& y) {
  bool has0 = false, has1 = false;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y[i] == 0) has0 = true;
    else if (y[i] == 1) has1 = true;
    else throw std::invalid_argument("logistic: labels must be 0 or 1");
  }
  if (!has0 || !has1) throw std::invalid_argument("logistic: both classes must be present");
}

// Damped Newton with backtracking; gradient steps when the Hessian solve fails to descend.
template <typename Scalar>
LogisticFit<Scalar> fit_logistic(const Mat<Scalar>& X, const Vec<Scalar>& y, Scalar lambda, int max_iter = 100,
                                 Scalar tol = Scalar(1e-8)) {
  if (X.rows() < 2) throw std::invalid_argument("logistic: need at least 2 rows");
  if (X.rows() != y.size()) throw std::invalid_argument("logistic: X and y disagree in length");
  if (lambda < Scalar(0)) throw std::invalid_argument("logistic: lambda must be non-negative");
  for (Eigen::Index i = 0; i < X.size(); ++i)
    if (X.data()[i] != Scalar(0) && X.data()[i] != Scalar(1))
      throw std::invalid_argument("logistic: features must be binary");
  check_binary_labels(y);

  const Eigen::Index n = X.rows(), m = X.cols();
  LogisticFit<Scalar> fit;
  fit.weights = Vec<Scalar>::Zero(m);
  const Scalar ybar = y.mean();
  fit.intercept = std::log(ybar / (Scalar(1) - ybar));
  Scalar f = logistic_objective(X, y, fit.weights, fit.intercept, lambda);
  fit.losses.push_back(f);
  for (int it = 0; it < max_iter; ++it) {
    const Vec<Scalar> g = logistic_gradient(X, y, fit.weights, fit.intercept, lambda);
    fit.grad_norm = g.norm();
    if (fit.grad_norm < tol) break;
    const Vec<Scalar> z = (X * fit.weights).array() + fit.intercept;
    Mat<Scalar> Xa(n, m + 1);
    Xa.leftCols(m) = X;
    Xa.col(m).setOnes();
    Vec<Scalar> s(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Scalar p = sigmoid(z[i]);
      s[i] = p * (Scalar(1) - p);
    }
    Mat<Scalar> H = Xa.transpose() * s.asDiagonal() * Xa / static_cast<Scalar>(n);
    H.diagonal().head(m).array() += lambda;
    H.diagonal().array() += Scalar(1e-12);
    Vec<Scalar> dir = -H.ldlt().solve(g);
    if (!dir.allFinite() || dir.dot(g) >= Scalar(0)) dir = -g;
    Scalar step = 1;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      const Vec<Scalar> w2 = fit.weights + step * dir.head(m);
      const Scalar b2 = fit.intercept + step * dir[m];
      const Scalar f2 = logistic_objective(X, y, w2, b2, lambda);
      if (f2 <= f + Scalar(1e-4) * step * g.dot(dir)) {
        fit.weights = w2;
        fit.intercept = b2;
        f = f2;
        moved = true;
        break;
      }
      step *= Scalar(0.5);
    }
    ++fit.iterations;
    if (!moved) break;
    fit.losses.push_back(f);
  }
  fit.grad_norm = logistic_gradient(X, y, fit.weights, fit.intercept, lambda).norm();
  return fit;
}

// Fold index per row; each class is spread over the folds in shuffled order.
template <typename Scalar>
std::vector<int> stratified_folds(const Vec<Scalar>& y, int folds, Rng& rng) {
  std::vector<int> out(static_cast<std::size_t>(y.size()), 0);
  int next = 0;
  for (Scalar cls : {Scalar(0), Scalar(1)}) {
    std::vector<int> idx;
    for (Eigen::Index i = 0; i < y.size(); ++i)
      if (y[i] == cls) idx.push_back(static_cast<int>(i));
    rng.shuffle(idx);
    for (int i : idx) {
      out[static_cast<std::size_t>(i)] = next;
      next = (next + 1) % folds;
    }
  }
  return out;
}

// Rows are weight vectors, one per (repeat, fold), repeat-major.
template <typename Scalar>
Mat<Scalar> cv_importance(const Mat<Scalar>& X, const Vec<Scalar>& y, int folds, int repeats, Scalar lambda,
                          std::uint64_t seed) {
  if (folds < 2 || repeats < 1) throw std::invalid_argument("cv: need folds >= 2 and repeats >= 1");
  if (X.rows() < folds) throw std::invalid_argument("cv: fewer rows than folds");
  check_binary_labels(y);
  Eigen::Index ones = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) ones += y[i] == Scalar(1);
  if (std::min(ones, y.size() - ones) < 2) throw std::invalid_argument("cv: class too small to stratify");
  Mat<Scalar> out(folds * repeats, X.cols());
  for (int r = 0; r < repeats; ++r) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
    const auto fold = stratified_folds(y, folds, rng);
    for (int k = 0; k < folds; ++k) {
      std::vector<Eigen::Index> rows;
      for (Eigen::Index i = 0; i < X.rows(); ++i)
        if (fold[static_cast<std::size_t>(i)] != k) rows.push_back(i);
      Mat<Scalar> Xt(static_cast<Eigen::Index>(rows.size()), X.cols());
      Vec<Scalar> yt(static_cast<Eigen::Index>(rows.size()));
      for (std::size_t j = 0; j < rows.size(); ++j) {
        Xt.row(static_cast<Eigen::Index>(j)) = X.row(rows[j]);
        yt[static_cast<Eigen::Index>(j)] = y[rows[j]];
      }
      out.row(r * folds + k) = fit_logistic(Xt, yt, lambda).weights.transpose();
    }
  }
  return out;
}

template <typename Scalar>
Scalar quantile_sorted(const std::vector<Scalar>& v, Scalar q) {
  const Scalar pos = q * static_cast<Scalar>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<Scalar>(lo)) * (v[hi] - v[lo]);
}

// Percentile bootstrap of the mean.
template <typename Scalar>
std::pair<Scalar, Scalar> bootstrap_ci(const std::vector<Scalar>& samples, Scalar level = Scalar(0.95),
                                       int resamples = 1000, std::uint64_t seed = 21) {
  if (samples.empty()) throw std::invalid_argument("bootstrap: empty input");
  if (level < Scalar(0) || level > Scalar(1)) throw std::invalid_argument("bootstrap: level outside [0, 1]");
  Rng rng(seed);
  std::vector<Scalar> means(static_cast<std::size_t>(resamples));
  const std::size_t n = samples.size();
  for (auto& m : means) {
    Scalar s = 0;
    for (std::size_t i = 0; i < n; ++i) s += samples[rng.below(n)];
    m = s / static_cast<Scalar>(n);
  }
  std::sort(means.begin(), means.end());
  const Scalar a = (Scalar(1) - level) / Scalar(2);
  return {quantile_sorted(means, a), quantile_sorted(means, Scalar(1) - a)};
}

}  // namespace cema::stats

#endif
