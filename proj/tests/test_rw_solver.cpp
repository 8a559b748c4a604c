#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "rwseg/error.hpp"

using namespace rwseg;

namespace {

std::shared_ptr<const LaplacianBank> bank_from_edges(const EdgeList& edges) {
  auto bank = std::make_shared<LaplacianBank>();
  bank->terms.push_back(assemble_laplacian(edges));
  bank->configs.push_back(EdgeWeightConfig::gaussian(1.0));
  return bank;
}

RWProblem chain(double w01, double w12) {
  RWProblem p;
  p.bank = bank_from_edges({Dims{3, 1, 1}, {{0, 1, w01}, {1, 2, w12}}});
  p.weights.laplacian_weights = {1.0};
  p.seeds = SeedMap(2);
  p.seeds.add(0, 0);
  p.seeds.add(2, 1);
  return p;
}

}  // namespace

TEST_CASE("three voxel chain") {
  SUBCASE("unit weights") {
    const auto y = solve(chain(1, 1)).segmentation;
    CHECK(y.at(1, 0) == doctest::Approx(0.5).epsilon(1e-10));
    CHECK(y.at(1, 1) == doctest::Approx(0.5).epsilon(1e-10));
    CHECK(y.at(0, 0) == 1.0);
    CHECK(y.at(2, 1) == 1.0);
  }
  SUBCASE("unequal weights") {
    const auto p = chain(2, 1);
    const auto y = solve(p).segmentation;
    CHECK(y.at(1, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-10));
    CHECK(y.at(1, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-10));
    CHECK(solve_dense_oracle(p).at(1, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("prior only problems reproduce the prior target") {
  std::mt19937_64 rng(4);
  SUBCASE("lattice") {
    const Dims d{3, 2, 2};
    RWProblem p;
    p.bank = std::make_shared<LaplacianBank>(build_default_bank(normalize_intensities(testing::random_volume(d, rng))));
    p.num_labels = 3;
    p.weights.laplacian_weights.assign(4, 0.0);
    p.weights.prior_weights = {1.0};
    p.priors.push_back({testing::random_rows(d.count(), 3, rng), PriorWeighting()});
    p.seeds = SeedMap(3);
    const auto y = solve(p).segmentation;
    CHECK(testing::max_abs_diff(y, p.priors[0].target) < 1e-12);
    CHECK(testing::max_abs_diff(solve_dense_oracle(p), p.priors[0].target) < 1e-12);
  }
  SUBCASE("single voxel") {
    RWProblem p;
    p.bank = bank_from_edges({Dims{1, 1, 1}, {}});
    p.weights.laplacian_weights = {1.0};
    p.weights.prior_weights = {2.0};
    p.priors.push_back({SoftSegmentation(1, 2, {0.3, 0.7}), PriorWeighting()});
    p.seeds = SeedMap(2);
    CHECK(solve_dense_oracle(p).at(0, 1) == doctest::Approx(0.7).epsilon(1e-14));
    CHECK(solve(p).segmentation.at(0, 1) == doctest::Approx(0.7).epsilon(1e-12));
  }
}

TEST_CASE("diagonal seeds on a 2x2 square give symmetric rows") {
  RWProblem p;
  p.bank = bank_from_edges(build_edges(Dims{2, 2, 1}));
  p.weights.laplacian_weights = {1.0};
  p.seeds = SeedMap(2);
  p.seeds.add(0, 0);
  p.seeds.add(3, 1);
  for (const auto& y : {solve_dense_oracle(p), solve(p).segmentation}) {
    CHECK(y.at(1, 0) == doctest::Approx(0.5).epsilon(1e-10));
    CHECK(y.at(2, 0) == doctest::Approx(0.5).epsilon(1e-10));
  }
}

TEST_CASE("CG solve agrees with the dense oracle on random instances") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    testing::InstanceSpec spec;
    spec.dims = {2 + trial % 3, 2 + (trial / 3) % 3, 1 + trial % 2};
    spec.labels = 2 + trial % 3;
    spec.priors = trial % 3 == 0 ? 0 : 1 + trial % 2;
    spec.seeds = spec.priors == 0 ? spec.labels + trial % 3 : trial % 4;
    const auto p = testing::random_problem(spec, rng);
    const auto report = solve(p);
    const auto oracle = solve_dense_oracle(p);
    CAPTURE(trial);
    CHECK(testing::max_abs_diff(report.segmentation, oracle) < 1e-6);
    CHECK(report.iterations.size() == p.num_labels - 1);
    for (const auto& [i, l] : p.seeds.entries()) CHECK(report.segmentation.at(i, l) == 1.0);
  }
}

TEST_CASE("solve is a minimizer over feasible points") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    testing::InstanceSpec spec;
    spec.labels = 3;
    spec.seeds = 4;
    spec.priors = trial % 2;
    const auto p = testing::random_problem(spec, rng);
    const auto y = solve(p).segmentation;
    const double best = energy(p, y);
    for (int k = 0; k < 100; ++k) CHECK(best <= energy(p, testing::random_feasible(p, rng)) + 1e-12);
  }
}

TEST_CASE("energy") {
  std::mt19937_64 rng(31);
  testing::InstanceSpec spec;
  spec.priors = 1;
  auto p = testing::random_problem(spec, rng);
  const std::size_t n = p.num_voxels();

  // constant rows lie in the Laplacian kernel
  std::vector<double> rows;
  for (std::size_t i = 0; i < n; ++i) rows.insert(rows.end(), {0.3, 0.7});
  const SoftSegmentation c(n, 2, rows);
  CHECK(std::abs(laplacian_energy(p, c)) < 1e-12);

  // at the prior target only the Laplacian part is left
  const auto& t = p.priors[0].target;
  const auto L = weighted_sum(*p.bank, p.weights.laplacian_weights);
  double quad = 0.0;
  for (std::size_t s = 0; s < 2; ++s) {
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = t.at(i, s);
    quad += L.quadratic_form(col);
  }
  CHECK(energy(p, t) == doctest::Approx(quad).epsilon(1e-12));

  // prior part by hand
  const auto u = SoftSegmentation::uniform(n, 2);
  double prior = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < 2; ++s) prior += p.priors[0].weighting[i] * std::pow(0.5 - t.at(i, s), 2);
  CHECK(energy(p, u) == doctest::Approx(p.weights.prior_weights[0] * prior).epsilon(1e-12));

  const auto diag = prior_diagonal(p);
  for (std::size_t i = 0; i < n; ++i)
    CHECK(diag[i] == doctest::Approx(p.weights.prior_weights[0] * p.priors[0].weighting[i]));
}

TEST_CASE("invalid problems") {
  SUBCASE("no seeds and no priors") {
    auto p = chain(1, 1);
    p.seeds = SeedMap(2);
    CHECK_THROWS(solve(p));
  }
  SUBCASE("weight validation") {
    WeightVector w{{1.0, -1.0}, {}};
    CHECK_THROWS_AS(w.validate(2, 0), std::invalid_argument);
    w = {{0.0, 0.0}, {}};
    CHECK_THROWS_AS(w.validate(2, 0), std::invalid_argument);
    w = {{1.0}, {}};
    CHECK_THROWS_AS(w.validate(2, 0), std::invalid_argument);
    w = {{1.0, 0.0}, {2.0}};
    CHECK_NOTHROW(w.validate(2, 1));
    CHECK(w.flattened() == std::vector<double>{1.0, 0.0, 2.0});
    const auto back = WeightVector::from_flat(w.flattened(), 2);
    CHECK(back.laplacian_weights == w.laplacian_weights);
    CHECK(back.prior_weights == w.prior_weights);
  }
  SUBCASE("seed label range") {
    auto p = chain(1, 1);
    p.num_labels = 3;
    CHECK_THROWS(p.validate());
  }
  SUBCASE("iteration cap") {
    std::mt19937_64 rng(1);
    testing::InstanceSpec spec;
    spec.dims = {6, 6, 2};
    const auto p = testing::random_problem(spec, rng);
    CHECK_THROWS_AS(solve(p, {1e-10, 1}), SolverError);
  }
}

TEST_CASE("rows of the solution lie on the simplex") {
  std::mt19937_64 rng(41);
  testing::InstanceSpec spec;
  spec.dims = {5, 4, 3};
  spec.labels = 4;
  spec.seeds = 8;
  spec.priors = 1;
  const auto p = testing::random_problem(spec, rng);
  const auto report = solve(p);
  const auto& y = report.segmentation;
  for (std::size_t i = 0; i < y.num_voxels(); ++i) {
    double sum = 0.0;
    for (double v : y.row(i)) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= SoftSegmentation::kRowSumTolerance);
  }
  CHECK(report.max_relative_residual <= 1e-8);
}

TEST_CASE("maximum principle for seeded problems without priors") {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 10; ++trial) {
    testing::InstanceSpec spec;
    spec.dims = {4, 4, 1 + trial % 4};
    spec.labels = 2 + trial % 3;
    spec.seeds = spec.labels + trial;
    const auto report = solve(testing::random_problem(spec, rng));
    CHECK(report.raw_min >= -1e-9);
    CHECK(report.raw_max <= 1.0 + 1e-9);
  }
}

TEST_CASE("scaling every weight leaves the minimizer unchanged") {
  std::mt19937_64 rng(53);
  for (int trial = 0; trial < 6; ++trial) {
    testing::InstanceSpec spec;
    spec.dims = {4, 3, 3};
    spec.labels = 3;
    spec.seeds = trial % 2 ? 4 : 0;
    spec.priors = 1 + trial % 2;
    auto p = testing::random_problem(spec, rng);
    const auto base = solve(p, {1e-12, 0}).segmentation;
    const double e = energy(p, base);
    for (const double c : {0.01, 7.0, 1e3}) {
      auto scaled = p;
      for (auto& w : scaled.weights.laplacian_weights) w *= c;
      for (auto& w : scaled.weights.prior_weights) w *= c;
      const auto y = solve(scaled, {1e-12, 0}).segmentation;
      CHECK(testing::max_abs_diff(y, base) <= 1e-8);
      CHECK(energy(scaled, y) == doctest::Approx(c * e).epsilon(1e-9));
    }
  }
}
