#include <cmath>
#include <random>

#include "doctest.h"
#include "rwseg/error.hpp"
#include "rwseg/simplex_qp.hpp"

using namespace rwseg;

namespace {

Eigen::MatrixXd random_psd(std::size_t n, std::mt19937_64& rng, std::size_t rank) {
  std::normal_distribution<double> g;
  Eigen::MatrixXd a(rank, n);
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c) a(r, c) = g(rng);
  return a.transpose() * a;
}

Eigen::VectorXd random_vector(std::size_t n, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> g(0.0, scale);
  Eigen::VectorXd v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

std::vector<SmallQP::Group> voxel_groups(std::size_t voxels, std::size_t labels) {
  std::vector<SmallQP::Group> groups(voxels);
  for (std::size_t i = 0; i < voxels; ++i)
    for (std::size_t s = 0; s < labels; ++s) groups[i].push_back(i * labels + s);
  return groups;
}

// Brute-force grid search over the 3-simplex with step 1/steps.
std::vector<double> grid_projection(const std::vector<double>& v, int steps) {
  std::vector<double> best;
  double best_d = INFINITY;
  for (int a = 0; a <= steps; ++a) {
    for (int b = 0; a + b <= steps; ++b) {
      const std::vector<double> p{double(a) / steps, double(b) / steps, double(steps - a - b) / steps};
      double d = 0.0;
      for (int k = 0; k < 3; ++k) d += (p[k] - v[k]) * (p[k] - v[k]);
      if (d < best_d) {
        best_d = d;
        best = p;
      }
    }
  }
  return best;
}

}  // namespace

TEST_CASE("project_simplex") {
  CHECK(project_simplex(std::vector<double>{0.2, 0.3, 0.5}) == std::vector<double>{0.2, 0.3, 0.5});
  const auto half = project_simplex(std::vector<double>{1.0, 1.0});
  CHECK(half[0] == doctest::Approx(0.5));
  CHECK(half[1] == doctest::Approx(0.5));
  const auto corner = project_simplex(std::vector<double>{2.0, 0.0, 0.0});
  CHECK(corner == std::vector<double>{1.0, 0.0, 0.0});
  CHECK(grid_projection({2.0, 0.0, 0.0}, 200) == corner);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 2.0);
  std::uniform_int_distribution<int> len(1, 8);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> v(static_cast<std::size_t>(len(rng)));
    for (auto& x : v) x = g(rng);
    const auto p = project_simplex(v);
    double sum = 0.0;
    for (double x : p) {
      CHECK(x >= 0.0);
      sum += x;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    const auto again = project_simplex(p);
    for (std::size_t k = 0; k < p.size(); ++k) CHECK(again[k] == doctest::Approx(p[k]).epsilon(1e-12));
    // optimality: (v - p) . (q - p) <= 0 at every vertex q
    for (std::size_t vert = 0; vert < p.size(); ++vert) {
      double inner = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) inner += (v[k] - p[k]) * ((k == vert ? 1.0 : 0.0) - p[k]);
      CHECK(inner <= 1e-12);
    }
    if (v.size() == 3) {
      const auto grid = grid_projection(v, 400);
      for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(grid[k] - p[k]) <= 2.0 / 400);
    }
  }
}

TEST_CASE("solve_qp on hand-checked instances") {
  const SmallQP sym(Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2), {{0, 1}});
  const SmallQP lin(Eigen::MatrixXd::Zero(2, 2), Eigen::Vector2d(1.0, 0.0), {{0, 1}});
  for (const auto& x : {solve_qp(sym).x, solve_qp_oracle(sym).x}) {
    CHECK(x[0] == doctest::Approx(0.5).epsilon(1e-8));
    CHECK(x[1] == doctest::Approx(0.5).epsilon(1e-8));
  }
  for (const auto& x : {solve_qp(lin).x, solve_qp_oracle(lin).x}) {
    CHECK(std::abs(x[0]) < 1e-8);
    CHECK(x[1] == doctest::Approx(1.0).epsilon(1e-8));
  }
}

TEST_CASE("solve_qp agrees with the support-enumeration oracle") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t voxels = 1 + trial % 3;
    const std::size_t labels = 2 + (trial / 3) % 3;
    const std::size_t n = voxels * labels;
    const std::size_t rank = trial % 2 ? n : std::max<std::size_t>(1, n / 2);
    const SmallQP qp(random_psd(n, rng, rank), random_vector(n, rng, trial % 4 == 0 ? 0.01 : 2.0),
                     voxel_groups(voxels, labels));
    const auto pg = solve_qp(qp, {1e-10, 200000});
    const auto exact = solve_qp_oracle(qp);
    CAPTURE(trial);
    CHECK(pg.objective <= exact.objective + 1e-8);
    CHECK(exact.objective <= pg.objective + 1e-12);
    CHECK(qp.frank_wolfe_gap(pg.x) <= 1e-6);
    CHECK(qp.frank_wolfe_gap(exact.x) <= 1e-9);
    CHECK(pg.residual <= 1e-10);
    if (trial % 2) {  // strictly convex: unique minimizer
      CHECK((pg.x - exact.x).cwiseAbs().maxCoeff() <= 1e-6);
    }
    for (const auto& group : qp.groups()) {
      double sum = 0.0;
      for (std::size_t k : group) {
        CHECK(pg.x[static_cast<Eigen::Index>(k)] >= 0.0);
        sum += pg.x[static_cast<Eigen::Index>(k)];
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("objective, gradient and the Frank-Wolfe bound") {
  std::mt19937_64 rng(21);
  const SmallQP qp(random_psd(6, rng, 6), random_vector(6, rng, 1.0), voxel_groups(2, 3));
  const Eigen::VectorXd x = qp.uniform_point();
  CHECK(qp.objective(x) == doctest::Approx(x.dot(qp.quadratic() * x) + qp.linear().dot(x)));
  const Eigen::VectorXd grad = qp.gradient(x);
  const double h = 1e-6;
  for (Eigen::Index k = 0; k < 6; ++k) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(6);
    e[k] = h;
    CHECK(grad[k] == doctest::Approx((qp.objective(x + e) - qp.objective(x - e)) / (2 * h)).epsilon(1e-6));
  }
  const double optimum = solve_qp_oracle(qp).objective;
  CHECK(qp.objective(x) - optimum <= qp.frank_wolfe_gap(x) + 1e-12);
  Eigen::MatrixXd q = qp.quadratic();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(q);
  CHECK(qp.curvature() == doctest::Approx(eig.eigenvalues().maxCoeff()).epsilon(1e-2));
  CHECK(qp.curvature() <= eig.eigenvalues().maxCoeff() * (1 + 1e-12));
}

TEST_CASE("invalid QPs and iteration cap") {
  CHECK_THROWS_AS(SmallQP(Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(3), {{0, 1}}), std::invalid_argument);
  Eigen::MatrixXd asym = Eigen::MatrixXd::Identity(2, 2);
  asym(0, 1) = 1.0;
  CHECK_THROWS_AS(SmallQP(asym, Eigen::VectorXd::Zero(2), {{0, 1}}), std::invalid_argument);
  CHECK_THROWS_AS(SmallQP(-Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2), {{0, 1}}), std::invalid_argument);
  CHECK_THROWS_AS(SmallQP(Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2), {{0}}), std::invalid_argument);
  CHECK_THROWS_AS(SmallQP(Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2), {{0, 1}, {1}}),
                  std::invalid_argument);

  std::mt19937_64 rng(8);
  const SmallQP hard(random_psd(12, rng, 12), random_vector(12, rng, 1.0), voxel_groups(3, 4));
  CHECK_THROWS_AS(solve_qp(hard, {1e-14, 2}), SolverError);
}

TEST_CASE("projection is 1-Lipschitz") {
  std::mt19937_64 rng(19);
  std::normal_distribution<double> g(0.0, 1.5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(5), b(5);
    for (auto& x : a) x = g(rng);
    for (auto& x : b) x = g(rng);
    const auto pa = project_simplex(a), pb = project_simplex(b);
    double before = 0.0, after = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
      before += (a[k] - b[k]) * (a[k] - b[k]);
      after += (pa[k] - pb[k]) * (pa[k] - pb[k]);
    }
    CHECK(after <= before + 1e-15);
  }
}

TEST_CASE("solve_qp beats random feasible points") {
  std::mt19937_64 rng(27);
  std::gamma_distribution<double> gamma(1.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    const SmallQP qp(random_psd(9, rng, 5), random_vector(9, rng, 1.0), voxel_groups(3, 3));
    const double best = solve_qp(qp).objective;
    for (int k = 0; k < 100; ++k) {
      Eigen::VectorXd x(9);
      for (const auto& group : qp.groups()) {
        double total = 0.0;
        for (std::size_t i : group) total += x[static_cast<Eigen::Index>(i)] = gamma(rng);
        for (std::size_t i : group) x[static_cast<Eigen::Index>(i)] /= total;
      }
      CHECK(best <= qp.objective(x) + 1e-9);
    }
  }
}
