#pragma once

// Shared helpers for the test suites: finite-difference oracles and random
// matrix generation. Oracles here must stay independent of the library code
// paths they are used to check.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <vector>

#include "chreode/random.hpp"

namespace testsup {

using Mat = Eigen::MatrixXd;

inline double rel_err(double got, double want, double floor = 1e-8) {
  const double denom = std::max({std::fabs(got), std::fabs(want), floor});
  return std::fabs(got - want) / denom;
}

inline Mat random_mat(chreode::Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  return m;
}

// Central finite differences of a scalar function of a flat parameter list.
// Returns one gradient matrix per parameter, entry by entry.
inline std::vector<Mat> fd_gradients(const std::function<double(const std::vector<Mat>&)>& f,
                                     std::vector<Mat> theta, double h = 1e-5) {
  std::vector<Mat> grads;
  grads.reserve(theta.size());
  for (size_t p = 0; p < theta.size(); ++p) {
    Mat g(theta[p].rows(), theta[p].cols());
    for (Eigen::Index j = 0; j < theta[p].cols(); ++j)
      for (Eigen::Index i = 0; i < theta[p].rows(); ++i) {
        const double keep = theta[p](i, j);
        theta[p](i, j) = keep + h;
        const double up = f(theta);
        theta[p](i, j) = keep - h;
        const double dn = f(theta);
        theta[p](i, j) = keep;
        g(i, j) = (up - dn) / (2.0 * h);
      }
    grads.push_back(std::move(g));
  }
  return grads;
}

inline double max_rel_err(const Mat& got, const Mat& want, double floor = 1e-8) {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < got.cols(); ++j)
    for (Eigen::Index i = 0; i < got.rows(); ++i)
      worst = std::max(worst, rel_err(got(i, j), want(i, j), floor));
  return worst;
}

}  // namespace testsup
