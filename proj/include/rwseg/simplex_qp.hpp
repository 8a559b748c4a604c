#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace rwseg {

/// Euclidean projection onto {p : p >= 0, sum p = 1}.
std::vector<double> project_simplex(std::span<const double> v);
/// In-place variant used by the solvers.
void project_simplex_in_place(std::span<double> v);

/// min x^T Q x + c^T x  subject to every group of variables lying on a
/// probability simplex. Groups must partition the variables.
class SmallQP {
 public:
  using Group = std::vector<std::size_t>;

  /// Throws std::invalid_argument on size mismatch, an asymmetric or
  /// (for n <= 64) indefinite quadratic, or groups that do not partition
  /// the variables.
  SmallQP(Eigen::MatrixXd quadratic, Eigen::VectorXd linear, std::vector<Group> groups);

  std::size_t size() const { return static_cast<std::size_t>(linear_.size()); }
  const Eigen::MatrixXd& quadratic() const { return quadratic_; }
  const Eigen::VectorXd& linear() const { return linear_; }
  const std::vector<Group>& groups() const { return groups_; }
  /// power_iteration(quadratic()), computed once on construction.
  double curvature() const { return curvature_; }

  /// Replaces the linear term; the quadratic and groups are unchanged.
  void set_linear(Eigen::VectorXd linear);

  double objective(const Eigen::VectorXd& x) const;
  Eigen::VectorXd gradient(const Eigen::VectorXd& x) const;
  /// Every group projected onto its simplex.
  void project(Eigen::VectorXd& x) const;
  /// Each group uniform.
  Eigen::VectorXd uniform_point() const;
  /// max over feasible s of grad f(x) . (x - s); bounds f(x) - f* from above
  /// for feasible x.
  double frank_wolfe_gap(const Eigen::VectorXd& x) const;

 private:
  Eigen::MatrixXd quadratic_;
  Eigen::VectorXd linear_;
  std::vector<Group> groups_;
  double curvature_ = 0.0;
};

struct QPOptions {
  double tol = 1e-8;
  std::size_t max_iter = 50000;
};

struct QPSolution {
  Eigen::VectorXd x;
  double objective = 0.0;
  std::size_t iterations = 0;
  double residual = 0.0;  // max-norm of the projected-gradient step at x
};

/// Accelerated projected gradient (momentum with restart) with constant step
/// 1 / (2 lambda_max(Q)), lambda_max from 20 power iterations. Starts from
/// the uniform point and returns once the plain projected-gradient step at
/// the returned point is below tol. Throws SolverError after max_iter.
QPSolution solve_qp(const SmallQP& qp, const QPOptions& options = {});

/// Exact optimum by enumerating the support of every group and solving the
/// equality-constrained KKT system on each. Throws std::invalid_argument
/// when the number of supports exceeds `max_supports`.
QPSolution solve_qp_oracle(const SmallQP& qp, std::size_t max_supports = 200000);

/// Largest eigenvalue estimate of a symmetric PSD matrix.
double power_iteration(const Eigen::MatrixXd& q, std::size_t iterations = 20);

}  // namespace rwseg
