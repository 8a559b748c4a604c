#include "rwseg/simplex_qp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

#include "rwseg/error.hpp"

namespace rwseg {

void project_simplex_in_place(std::span<double> v) {
  if (v.empty()) throw std::invalid_argument("cannot project an empty vector");
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  // Largest k with sorted[k-1] - (sum of top k - 1) / k > 0 fixes the threshold.
  double cumulative = 0.0;
  double tau = 0.0;
  for (std::size_t k = 1; k <= sorted.size(); ++k) {
    cumulative += sorted[k - 1];
    const double candidate = (cumulative - 1.0) / static_cast<double>(k);
    if (sorted[k - 1] - candidate > 0.0) tau = candidate;
  }
  for (double& x : v) x = std::max(x - tau, 0.0);
}

std::vector<double> project_simplex(std::span<const double> v) {
  std::vector<double> out(v.begin(), v.end());
  project_simplex_in_place(out);
  return out;
}

SmallQP::SmallQP(Eigen::MatrixXd quadratic, Eigen::VectorXd linear, std::vector<Group> groups)
    : quadratic_(std::move(quadratic)), linear_(std::move(linear)), groups_(std::move(groups)) {
  const auto n = linear_.size();
  if (quadratic_.rows() != n || quadratic_.cols() != n) throw std::invalid_argument("quadratic has wrong shape");
  if (!quadratic_.allFinite() || !linear_.allFinite()) throw std::invalid_argument("non-finite QP data");
  const double scale = n > 0 ? std::max(1.0, quadratic_.cwiseAbs().maxCoeff()) : 1.0;
  if (n > 0 && (quadratic_ - quadratic_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw std::invalid_argument("quadratic is not symmetric");
  }
  if (n > 0 && n <= 64) {
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(quadratic_, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < -1e-9 * scale) throw std::invalid_argument("quadratic is not PSD");
  }
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  for (const auto& g : groups_) {
    if (g.empty()) throw std::invalid_argument("empty simplex group");
    for (const auto v : g) {
      if (v >= static_cast<std::size_t>(n) || seen[v]) throw std::invalid_argument("groups must partition the variables");
      seen[v] = 1;
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw std::invalid_argument("groups must partition the variables");
  }
  curvature_ = power_iteration(quadratic_);
}

void SmallQP::set_linear(Eigen::VectorXd linear) {
  if (linear.size() != linear_.size()) throw std::invalid_argument("linear term has wrong size");
  if (!linear.allFinite()) throw std::invalid_argument("non-finite QP data");
  linear_ = std::move(linear);
}

double SmallQP::objective(const Eigen::VectorXd& x) const { return x.dot(quadratic_ * x) + linear_.dot(x); }

Eigen::VectorXd SmallQP::gradient(const Eigen::VectorXd& x) const { return 2.0 * (quadratic_ * x) + linear_; }

void SmallQP::project(Eigen::VectorXd& x) const {
  std::vector<double> buffer;
  for (const auto& g : groups_) {
    buffer.resize(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) buffer[k] = x[static_cast<Eigen::Index>(g[k])];
    project_simplex_in_place(buffer);
    for (std::size_t k = 0; k < g.size(); ++k) x[static_cast<Eigen::Index>(g[k])] = buffer[k];
  }
}

Eigen::VectorXd SmallQP::uniform_point() const {
  Eigen::VectorXd x(linear_.size());
  for (const auto& g : groups_) {
    for (const auto v : g) x[static_cast<Eigen::Index>(v)] = 1.0 / static_cast<double>(g.size());
  }
  return x;
}

double SmallQP::frank_wolfe_gap(const Eigen::VectorXd& x) const {
  const Eigen::VectorXd g = gradient(x);
  double gap = 0.0;
  for (const auto& group : groups_) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto v : group) {
      const auto k = static_cast<Eigen::Index>(v);
      gap += g[k] * x[k];
      best = std::min(best, g[k]);
    }
    gap -= best;
  }
  return std::max(gap, 0.0);
}

double power_iteration(const Eigen::MatrixXd& q, std::size_t iterations) {
  if (q.rows() == 0) return 0.0;
  // Fixed pseudo-random start: a constant vector would sit in the kernel of
  // Laplacian blocks.
  std::mt19937_64 rng(0x5eed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Eigen::VectorXd v(q.rows());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = dist(rng);
  double estimate = 0.0;
  for (std::size_t k = 0; k < iterations; ++k) {
    const double norm = v.norm();
    if (norm == 0.0) return 0.0;
    v /= norm;
    const Eigen::VectorXd w = q * v;
    estimate = w.norm();
    v = w;
  }
  return estimate;
}

QPSolution solve_qp(const SmallQP& qp, const QPOptions& options) {
  if (!(options.tol > 0.0)) throw std::invalid_argument("tol must be positive");
  QPSolution out;
  out.x = qp.uniform_point();
  if (qp.size() == 0) return out;
  // grad f is 2 lambda_max(Q)-Lipschitz. A vanishing Q leaves a linear
  // program, where one long step already lands on the optimal face.
  const double lambda = qp.curvature();
  const double floor = 1e-12 * (1.0 + qp.linear().lpNorm<Eigen::Infinity>());
  const double step = 1.0 / (2.0 * std::max(lambda, floor));
  // Nesterov momentum with gradient restart. Plain steps crawl along nearly
  // flat directions that carry only a tiny linear slope.
  Eigen::VectorXd y = out.x;
  Eigen::VectorXd next(out.x.size());
  Eigen::VectorXd check(out.x.size());
  double t = 1.0;
  for (std::size_t k = 1; k <= options.max_iter; ++k) {
    next = y - step * qp.gradient(y);
    qp.project(next);
    out.iterations = k;
    const double moved = (next - y).cwiseAbs().maxCoeff();
    if (moved <= options.tol) {
      check = next - step * qp.gradient(next);
      qp.project(check);
      out.residual = (check - next).cwiseAbs().maxCoeff();
      if (out.residual <= options.tol) {
        out.x.swap(next);
        out.objective = qp.objective(out.x);
        return out;
      }
    }
    out.residual = moved;
    if ((y - next).dot(next - out.x) > 0.0) {
      t = 1.0;
      y = next;
    } else {
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      y = next + ((t - 1.0) / t_next) * (next - out.x);
      t = t_next;
    }
    out.x.swap(next);
  }
  throw SolverError("accelerated projected gradient did not converge within " + std::to_string(options.max_iter) +
                    " iterations (last step " + std::to_string(out.residual) + ")");
}

QPSolution solve_qp_oracle(const SmallQP& qp, std::size_t max_supports) {
  const auto& groups = qp.groups();
  if (qp.size() == 0) return {};
  double supports = 1.0;
  for (const auto& g : groups) {
    if (g.size() >= 60) throw std::invalid_argument("group too large for enumeration");
    supports *= std::ldexp(1.0, static_cast<int>(g.size())) - 1.0;
  }
  if (supports > static_cast<double>(max_supports)) {
    throw std::invalid_argument("too many supports to enumerate (" + std::to_string(supports) + ")");
  }
  const auto n = static_cast<Eigen::Index>(qp.size());
  const auto num_groups = static_cast<Eigen::Index>(groups.size());
  QPSolution best;
  best.objective = std::numeric_limits<double>::infinity();
  // One nonempty subset mask per group, advanced like an odometer.
  std::vector<std::uint64_t> mask(groups.size(), 1);
  std::vector<std::size_t> free_vars;
  std::vector<Eigen::Index> var_group;
  while (true) {
    free_vars.clear();
    var_group.clear();
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (std::size_t k = 0; k < groups[g].size(); ++k) {
        if (mask[g] >> k & 1U) {
          free_vars.push_back(groups[g][k]);
          var_group.push_back(static_cast<Eigen::Index>(g));
        }
      }
    }
    const auto f = static_cast<Eigen::Index>(free_vars.size());
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(f + num_groups, f + num_groups);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(f + num_groups);
    for (Eigen::Index a = 0; a < f; ++a) {
      for (Eigen::Index b = 0; b < f; ++b) {
        kkt(a, b) = 2.0 * qp.quadratic()(static_cast<Eigen::Index>(free_vars[static_cast<std::size_t>(a)]),
                                         static_cast<Eigen::Index>(free_vars[static_cast<std::size_t>(b)]));
      }
      kkt(a, f + var_group[static_cast<std::size_t>(a)]) = 1.0;
      kkt(f + var_group[static_cast<std::size_t>(a)], a) = 1.0;
      rhs[a] = -qp.linear()[static_cast<Eigen::Index>(free_vars[static_cast<std::size_t>(a)])];
    }
    for (Eigen::Index g = 0; g < num_groups; ++g) rhs[f + g] = 1.0;
    const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(kkt);
    const Eigen::VectorXd z = cod.solve(rhs);
    const bool consistent = (kkt * z - rhs).norm() <= 1e-9 * (1.0 + rhs.norm());
    if (consistent && z.head(f).minCoeff() >= -1e-12) {
      Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
      for (Eigen::Index a = 0; a < f; ++a) {
        x[static_cast<Eigen::Index>(free_vars[static_cast<std::size_t>(a)])] = std::max(z[a], 0.0);
      }
      const double value = qp.objective(x);
      if (value < best.objective) {
        best.objective = value;
        best.x = std::move(x);
      }
    }
    ++best.iterations;
    std::size_t g = 0;
    for (; g < groups.size(); ++g) {
      if (++mask[g] < (std::uint64_t{1} << groups[g].size())) break;
      mask[g] = 1;
    }
    if (g == groups.size()) break;
  }
  // Vertices are always feasible, so some support was accepted.
  return best;
}

}  // namespace rwseg
