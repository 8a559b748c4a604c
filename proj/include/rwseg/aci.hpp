#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rwseg/lattice.hpp"
#include "rwseg/rw_solver.hpp"
#include "rwseg/simplex_qp.hpp"

namespace rwseg {

enum class PartitionScheme { edge, line };

/// Voxel subsets whose induced edges cover every lattice edge exactly once.
struct Partition {
  Dims dims;
  std::vector<std::vector<Index>> subsets;  // ascending voxel indices
  std::vector<std::uint32_t> multiplicity;  // subsets containing each voxel
};

/// edge: one subset {i, j} per edge. line: one subset per maximal
/// axis-aligned line of voxels along each axis with extent > 1. A voxel that
/// belongs to no edge at all gets a singleton subset.
Partition build_partition(const EdgeList& edges, PartitionScheme scheme);
/// A single subset holding every voxel.
Partition whole_partition(const Dims& dims);
/// Recomputes multiplicities from the subsets.
void recount_multiplicity(Partition& partition);

/// Throws std::invalid_argument unless every voxel is covered and every
/// coupled pair of `laplacian` lies together in exactly one subset.
void validate_partition(const Partition& partition, const SparseLaplacian& laplacian);

/// The constrained problem over unseeded voxels as one dense QP:
/// energy(y) + linear . y == qp.objective(x) + constant, where x stacks the
/// rows of `free_voxels` label-fastest.
struct FullQP {
  SmallQP qp;
  double constant = 0.0;
  std::vector<Index> free_voxels;
};
/// `linear` is empty or holds N * S coefficients (voxel-major).
FullQP build_full_qp(const RWProblem& problem, std::span<const double> linear = {});
/// Scatters a QP point back into a full segmentation (seeded rows one-hot).
SoftSegmentation expand_solution(const RWProblem& problem, const FullQP& full, const Eigen::VectorXd& x);

/// energy(problem, y) + linear . y
double constrained_objective(const RWProblem& problem, const SoftSegmentation& y, std::span<const double> linear = {});

enum class StepRule {
  diminishing,  // eta0 / (1 + t)
  adaptive,     // eta0 * (current disagreement / first disagreement)
};

/// Dual variables, one block per subset laid out over that subset's
/// unseeded voxels (ascending) times labels.
struct DualState {
  std::vector<std::vector<double>> rho;
  std::size_t iteration = 0;
  double eta0 = 0.1;
  StepRule rule = StepRule::diminishing;
};

struct AciOptions {
  double eta0 = 0.1;
  StepRule rule = StepRule::diminishing;
  std::size_t max_iter = 2000;
  double gap_tol = 1e-5;
  QPOptions slave{};
};

struct AciIteration {
  std::size_t iteration = 0;
  double dual_value = 0.0;  // certified lower bound on the optimum
  double primal_energy = 0.0;
  double max_disagreement = 0.0;
};

struct AciDiagnostics {
  std::vector<AciIteration> trace;
  bool converged = false;
  std::size_t best_iteration = 0;
};

struct AciResult {
  SoftSegmentation segmentation;  // consensus with the lowest primal energy
  double energy = 0.0;
  DualState state;
  AciDiagnostics diagnostics;
};

/// Dual decomposition over the partition's slaves, each solved with
/// solve_qp from the uniform point. Stops once every slave agrees with the
/// consensus to gap_tol (max-norm) or after max_iter iterations; in the
/// latter case diagnostics.converged is false.
AciResult solve_aci(const RWProblem& problem, const Partition& partition, const AciOptions& options = {},
                    std::span<const double> linear = {});

/// Primal objective at y minus the certified dual value at `state`.
double primal_dual_gap(const RWProblem& problem, const Partition& partition, const DualState& state,
                       const SoftSegmentation& y, std::span<const double> linear = {},
                       const QPOptions& slave = {});

/// Largest |sum_m g_m(y restricted to V_m) - objective(y)| over `samples`
/// random feasible y, with all duals zero. Does not validate the partition,
/// so a faulty one shows up as a nonzero value.
double reparameterization_check(const RWProblem& problem, const Partition& partition, std::size_t samples = 100,
                                std::uint64_t seed = 1, std::span<const double> linear = {});

/// Largest entry of sum_m rho_m scattered to full length.
double dual_sum_violation(const RWProblem& problem, const Partition& partition, const DualState& state);

/// CSV with header iteration,dual_value,primal_energy,max_disagreement.
void write_aci_diagnostics(const AciDiagnostics& diagnostics, const std::filesystem::path& path);

}  // namespace rwseg
