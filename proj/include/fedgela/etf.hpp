#pragma once

// Simplex equiangular tight frames and angle statistics.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "fedgela/error.hpp"
#include "fedgela/rng.hpp"

namespace fedgela {

/// Column-orthonormal d x C matrix (U^T U = I).
struct OrthoMatrix {
  Eigen::MatrixXd entries;
  int dim() const { return static_cast<int>(entries.rows()); }
  int classes() const { return static_cast<int>(entries.cols()); }
};

/// Fixed simplex ETF classifier. `m` holds unit-norm columns with pairwise
/// inner products -1/(C-1); the classifier actually applied is sqrt(scale) * m.
struct EtfClassifier {
  Eigen::MatrixXd m;
  double scale = 1.0;  // E_W
  OrthoMatrix u;

  int dim() const { return static_cast<int>(m.rows()); }
  int classes() const { return static_cast<int>(m.cols()); }
  Eigen::MatrixXd weights() const { return std::sqrt(scale) * m; }
};

struct EtfReport {
  double norm_deviation = 0.0;  // max_c | ||m_c|| - 1 |
  double dot_deviation = 0.0;   // max_{i!=j} | <m_i, m_j> + 1/(C-1) |
  double column_sum_norm = 0.0; // || sum_c m_c ||

  bool within(double tol) const {
    return norm_deviation < tol && dot_deviation < tol && column_sum_norm < tol;
  }
};

/// Gaussian d x C matrix orthonormalized column by column (modified
/// Gram-Schmidt with one re-orthogonalization pass), each column's first
/// nonzero entry made positive.
inline OrthoMatrix random_rotation(int d, int classes, std::uint64_t seed) {
  if (d < 1 || classes < 1) {
    throw dimension_error("random_rotation: d and C must be positive (d=" + std::to_string(d) +
                          ", C=" + std::to_string(classes) + ")");
  }
  if (d < classes) {
    throw dimension_error("random_rotation: need d >= C, got d=" + std::to_string(d) +
                          ", C=" + std::to_string(classes));
  }
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd a(d, classes);
  // Column-major fill so the stream does not depend on Eigen storage order.
  for (int j = 0; j < classes; ++j)
    for (int i = 0; i < d; ++i) a(i, j) = normal(rng);

  for (int j = 0; j < classes; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (int k = 0; k < j; ++k) a.col(j) -= a.col(k).dot(a.col(j)) * a.col(k);
    }
    const double n = a.col(j).norm();
    if (!(n > 1e-12)) throw numeric_error("random_rotation: degenerate Gaussian draw");
    a.col(j) /= n;
    for (int i = 0; i < d; ++i) {
      if (a(i, j) != 0.0) {
        if (a(i, j) < 0.0) a.col(j) = -a.col(j);
        break;
      }
    }
  }
  return OrthoMatrix{std::move(a)};
}

/// M = sqrt(C/(C-1)) U (I - 11^T / C).
inline EtfClassifier make_etf(int d, int classes, std::uint64_t seed, double scale) {
  if (classes < 2) throw parameter_error("make_etf: invalid class count " + std::to_string(classes));
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw parameter_error("make_etf: E_W must be positive and finite");
  }
  OrthoMatrix u = random_rotation(d, classes, seed);
  const double c = classes;
  Eigen::MatrixXd centering = Eigen::MatrixXd::Identity(classes, classes);
  centering.array() -= 1.0 / c;
  Eigen::MatrixXd m = std::sqrt(c / (c - 1.0)) * (u.entries * centering);
  return EtfClassifier{std::move(m), scale, std::move(u)};
}

inline EtfReport verify_etf(const EtfClassifier& etf) {
  EtfReport r;
  const int c = etf.classes();
  const Eigen::MatrixXd gram = etf.m.transpose() * etf.m;
  const double target = c > 1 ? -1.0 / (c - 1) : 0.0;
  for (int i = 0; i < c; ++i) {
    r.norm_deviation = std::max(r.norm_deviation, std::abs(std::sqrt(gram(i, i)) - 1.0));
    for (int j = i + 1; j < c; ++j) {
      r.dot_deviation = std::max(r.dot_deviation, std::abs(gram(i, j) - target));
    }
  }
  r.column_sum_norm = etf.m.rowwise().sum().norm();
  return r;
}

inline double angle_degrees(const Eigen::Ref<const Eigen::VectorXd>& a,
                            const Eigen::Ref<const Eigen::VectorXd>& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw numeric_error("angle: degenerate (zero) vector");
  const double cosine = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  return std::acos(cosine) * 180.0 / std::numbers::pi;
}

/// Mean over unordered pairs of the angle (degrees) between the selected
/// columns of `vectors`.
inline double mean_pairwise_angle(const Eigen::Ref<const Eigen::MatrixXd>& vectors,
                                  std::span<const int> subset) {
  if (subset.size() < 2) throw Error("insufficient-vectors", "mean_pairwise_angle: need at least 2 vectors");
  for (int idx : subset) {
    if (idx < 0 || idx >= vectors.cols()) throw parameter_error("mean_pairwise_angle: index out of range");
    if (!(vectors.col(idx).norm() > 0.0)) {
      throw Error("degenerate-vector", "mean_pairwise_angle: zero vector at index " + std::to_string(idx));
    }
  }
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    for (std::size_t j = i + 1; j < subset.size(); ++j) {
      sum += angle_degrees(vectors.col(subset[i]), vectors.col(subset[j]));
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

inline double mean_pairwise_angle(const Eigen::Ref<const Eigen::MatrixXd>& vectors) {
  std::vector<int> all(static_cast<std::size_t>(vectors.cols()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return mean_pairwise_angle(vectors, all);
}

/// arccos(-1/(C-1)) in degrees.
inline double simplex_angle(int classes) {
  return std::acos(-1.0 / (classes - 1)) * 180.0 / std::numbers::pi;
}

}  // namespace fedgela
