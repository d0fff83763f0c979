#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "csmtl/errors.hpp"
#include "csmtl/rng.hpp"

namespace csmtl {

/// K convex quadratics L_i(theta) = ||A_i theta - b_i||^2 over a shared
/// parameter vector.
class QuadraticProblem {
 public:
  QuadraticProblem(std::vector<Eigen::MatrixXd> a, std::vector<Eigen::VectorXd> b) : a_(std::move(a)), b_(std::move(b)) {
    if (a_.empty()) throw ConfigError("quadratic problem needs at least one task");
    if (a_.size() != b_.size()) throw DimensionError("quadratic problem: A and b counts differ");
    dim_ = static_cast<std::size_t>(a_.front().cols());
    if (dim_ == 0) throw DimensionError("quadratic problem needs dim >= 1");
    lipschitz_ = 0.0;
    for (std::size_t i = 0; i < a_.size(); ++i) {
      if (static_cast<std::size_t>(a_[i].cols()) != dim_ || a_[i].rows() != b_[i].size()) {
        throw DimensionError("quadratic problem: task " + std::to_string(i) + " has inconsistent shapes");
      }
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a_[i].transpose() * a_[i], Eigen::EigenvaluesOnly);
      lipschitz_ = std::max(lipschitz_, 2.0 * eig.eigenvalues().maxCoeff());
      minimizers_.push_back(a_[i].completeOrthogonalDecomposition().solve(b_[i]));
    }
  }

  std::size_t dim() const { return dim_; }
  std::size_t num_tasks() const { return a_.size(); }
  /// max_i 2 lambda_max(A_i^T A_i), the Lipschitz constant of every gradient.
  double lipschitz() const { return lipschitz_; }
  const Eigen::MatrixXd& a(std::size_t i) const { return a_.at(i); }
  const Eigen::VectorXd& b(std::size_t i) const { return b_.at(i); }
  const Eigen::VectorXd& minimizer(std::size_t i) const { return minimizers_.at(i); }

  double loss(std::size_t i, const Eigen::VectorXd& theta) const { return (a_.at(i) * theta - b_[i]).squaredNorm(); }

  Eigen::VectorXd gradient(std::size_t i, const Eigen::VectorXd& theta) const {
    return 2.0 * a_.at(i).transpose() * (a_[i] * theta - b_[i]);
  }

  double weighted_loss(const std::vector<double>& w, const Eigen::VectorXd& theta) const {
    check_weights(w);
    double total = 0.0;
    for (std::size_t i = 0; i < a_.size(); ++i) total += w[i] * loss(i, theta);
    return total;
  }

  void check_weights(const std::vector<double>& w) const {
    if (w.size() != a_.size()) {
      throw DimensionError("expected " + std::to_string(a_.size()) + " weights, got " + std::to_string(w.size()));
    }
  }

 private:
  std::vector<Eigen::MatrixXd> a_;
  std::vector<Eigen::VectorXd> b_;
  std::vector<Eigen::VectorXd> minimizers_;
  std::size_t dim_ = 0;
  double lipschitz_ = 0.0;
};

/// A_i = I + 0.3 N(0,1) entries, theta_i* = c + conflict * d_i with c and
/// d_i standard normal, b_i = A_i theta_i*. conflict = 0 makes every task
/// share one minimizer.
inline QuadraticProblem make_quadratic_problem(std::size_t dim, std::size_t num_tasks, double conflict,
                                               std::uint64_t seed) {
  if (dim == 0) throw ConfigError("quadratic problem needs dim >= 1");
  if (num_tasks == 0) throw ConfigError("quadratic problem needs at least one task");
  if (!(conflict >= 0.0 && conflict <= 1.0)) throw ConfigError("conflict level must lie in [0, 1]");
  Rng rng(seed);
  const auto n = static_cast<Eigen::Index>(dim);
  std::vector<Eigen::MatrixXd> a;
  for (std::size_t i = 0; i < num_tasks; ++i) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(n, n);
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < n; ++c) m(r, c) += 0.3 * rng.normal();
    a.push_back(std::move(m));
  }
  Eigen::VectorXd center(n);
  for (Eigen::Index r = 0; r < n; ++r) center(r) = rng.normal();
  std::vector<Eigen::VectorXd> b;
  for (std::size_t i = 0; i < num_tasks; ++i) {
    Eigen::VectorXd target = center;
    for (Eigen::Index r = 0; r < n; ++r) target(r) += conflict * rng.normal();
    b.push_back(a[i] * target);
  }
  return QuadraticProblem(std::move(a), std::move(b));
}

}  // namespace csmtl
