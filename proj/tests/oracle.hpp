#pragma once

// Reference computations used only by the tests. They follow different
// formulas from the library code on purpose.

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Core>
#include <Eigen/QR>

namespace oracle {

/// Population variance via the pairwise form (1 / 2n^2) sum_ij (x_i - x_j)^2.
inline double pairwise_variance(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  for (double a : x) {
    for (double b : x) s += (a - b) * (a - b);
  }
  return s / (2.0 * n * n);
}

inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

/// JSD as H((p+q)/2) - (H(p) + H(q)) / 2.
inline double entropy_jsd(const std::vector<double>& p, const std::vector<double>& q) {
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  return entropy(m) - 0.5 * (entropy(p) + entropy(q));
}

/// Uniform draw from the simplex (normalized exponentials).
inline std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> p(n);
  double s = 0.0;
  for (auto& v : p) s += (v = e(rng));
  for (auto& v : p) v /= s;
  return p;
}

inline Eigen::MatrixXd gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

/// Random orthogonal matrix: Q factor of a Gaussian matrix.
inline Eigen::MatrixXd random_orthogonal(std::mt19937_64& rng, Eigen::Index d) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(rng, d, d));
  return qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
}

}  // namespace oracle
