#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "rwseg/lattice.hpp"
#include "rwseg/volume.hpp"

namespace rwseg {

/// Coefficients of the energy terms: one per bank Laplacian, one per prior.
struct WeightVector {
  std::vector<double> laplacian_weights;
  std::vector<double> prior_weights;

  /// Throws std::invalid_argument on wrong counts, negative or non-finite
  /// entries, or an all-zero vector.
  void validate(std::size_t bank_size, std::size_t prior_count) const;
  std::vector<double> flattened() const;
  static WeightVector from_flat(std::span<const double> w, std::size_t bank_size);
};

struct PriorTerm {
  SoftSegmentation target;
  PriorWeighting weighting;
};

/// y^T (sum_a w_a L_a) y + sum_b w_b ||y - t_b||^2_{Omega_b}, with seeded rows
/// fixed one-hot.
struct RWProblem {
  std::shared_ptr<const LaplacianBank> bank;
  WeightVector weights;
  std::vector<PriorTerm> priors;
  SeedMap seeds;
  std::size_t num_labels = 2;

  std::size_t num_voxels() const { return bank ? bank->order() : 0; }
  /// Size and range checks (not solvability).
  void validate() const;
};

struct SolveOptions {
  double tol = 1e-8;
  std::size_t max_iter = 0;  // 0 selects 10 * N
};

struct SolveReport {
  SoftSegmentation segmentation;
  // Per solved column: labels 0..S-2. The last label is one minus the others.
  std::vector<std::size_t> iterations;
  double max_relative_residual = 0.0;
  // Range of unseeded probabilities before row renormalization.
  double raw_min = 0.0;
  double raw_max = 0.0;
};

/// Jacobi-preconditioned conjugate gradient on the seed-reduced system, one
/// column for each of the first S - 1 labels. Throws SolverError on a singular reduced system or
/// non-convergence.
SolveReport solve(const RWProblem& problem, const SolveOptions& options = {});

/// Dense Cholesky solve of the same reduced system (N <= 1000).
SoftSegmentation solve_dense_oracle(const RWProblem& problem);

/// Value of the energy at y.
double energy(const RWProblem& problem, const SoftSegmentation& y);
/// Laplacian part only.
double laplacian_energy(const RWProblem& problem, const SoftSegmentation& y);

/// Per-voxel sum_b w_b Omega_b[i], the diagonal the priors add to the system.
std::vector<double> prior_diagonal(const RWProblem& problem);

}  // namespace rwseg
