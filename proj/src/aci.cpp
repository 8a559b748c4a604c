#include "rwseg/aci.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

#include "rwseg/error.hpp"

namespace rwseg {

Partition build_partition(const EdgeList& edges, PartitionScheme scheme) {
  const Dims& d = edges.dims;
  Partition out{d, {}, {}};
  if (scheme == PartitionScheme::edge) {
    out.subsets.reserve(edges.edges.size());
    for (const auto& e : edges.edges) out.subsets.push_back({std::min(e.i, e.j), std::max(e.i, e.j)});
  } else {
    const std::size_t extent[3] = {d.nx, d.ny, d.nz};
    const std::size_t stride[3] = {1, d.nx, d.nx * d.ny};
    for (std::size_t axis = 0; axis < 3; ++axis) {
      if (extent[axis] < 2) continue;
      // Every voxel with coordinate 0 along `axis` starts one line.
      for (std::size_t i = 0; i < d.count(); ++i) {
        if ((i / stride[axis]) % extent[axis] != 0) continue;
        std::vector<Index> line(extent[axis]);
        for (std::size_t k = 0; k < extent[axis]; ++k) line[k] = static_cast<Index>(i + k * stride[axis]);
        out.subsets.push_back(std::move(line));
      }
    }
  }
  recount_multiplicity(out);
  for (std::size_t i = 0; i < d.count(); ++i) {
    if (out.multiplicity[i] == 0) {
      out.subsets.push_back({static_cast<Index>(i)});
      out.multiplicity[i] = 1;
    }
  }
  return out;
}

Partition whole_partition(const Dims& dims) {
  Partition out{dims, {std::vector<Index>(dims.count())}, std::vector<std::uint32_t>(dims.count(), 1)};
  for (std::size_t i = 0; i < dims.count(); ++i) out.subsets[0][i] = static_cast<Index>(i);
  return out;
}

void recount_multiplicity(Partition& partition) {
  partition.multiplicity.assign(partition.dims.count(), 0);
  for (const auto& subset : partition.subsets) {
    for (const auto i : subset) {
      if (i >= partition.multiplicity.size()) throw std::invalid_argument("subset voxel out of range");
      ++partition.multiplicity[i];
    }
  }
}

void validate_partition(const Partition& partition, const SparseLaplacian& laplacian) {
  const std::size_t n = partition.dims.count();
  if (laplacian.order() != n) throw std::invalid_argument("partition does not match the problem size");
  if (partition.multiplicity.size() != n) throw std::invalid_argument("partition multiplicity has wrong length");
  std::vector<std::uint32_t> count(n, 0);
  for (const auto& subset : partition.subsets) {
    if (subset.empty() || !std::is_sorted(subset.begin(), subset.end()) ||
        std::adjacent_find(subset.begin(), subset.end()) != subset.end()) {
      throw std::invalid_argument("subsets must be nonempty, sorted and duplicate-free");
    }
    for (const auto i : subset) {
      if (i >= n) throw std::invalid_argument("subset voxel out of range");
      ++count[i];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (count[i] == 0) throw std::invalid_argument("voxel " + std::to_string(i) + " is in no subset");
    if (count[i] != partition.multiplicity[i]) throw std::invalid_argument("stale multiplicity");
  }
  // Count, for every stored coupling, the subsets holding both endpoints.
  const auto& p = laplacian.pattern();
  std::vector<std::uint32_t> covered(p.cols.size(), 0);
  std::vector<char> member(n, 0);
  for (const auto& subset : partition.subsets) {
    for (const auto i : subset) member[i] = 1;
    for (const auto i : subset) {
      for (std::size_t k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) {
        if (p.cols[k] != i && member[p.cols[k]]) ++covered[k];
      }
    }
    for (const auto i : subset) member[i] = 0;
  }
  const auto values = laplacian.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) {
      const std::size_t j = p.cols[k];
      if (j <= i || values[k] == 0.0) continue;
      if (covered[k] != 1) {
        throw std::invalid_argument("pair (" + std::to_string(i) + ", " + std::to_string(j) + ") lies in " +
                                    std::to_string(covered[k]) + " subsets");
      }
    }
  }
}

double constrained_objective(const RWProblem& problem, const SoftSegmentation& y, std::span<const double> linear) {
  double total = energy(problem, y);
  if (!linear.empty()) {
    if (linear.size() != y.data().size()) throw std::invalid_argument("linear term has wrong size");
    for (std::size_t k = 0; k < linear.size(); ++k) total += linear[k] * y.data()[k];
  }
  return total;
}

namespace {

constexpr std::size_t kNoLabel = static_cast<std::size_t>(-1);

/// Per-voxel data shared by every slave: the combined prior as
/// D ||y||^2 - 2 h . y + K, plus the optional linear term.
struct Terms {
  SparseLaplacian laplacian;
  std::vector<double> d;  // N
  std::vector<double> h;  // N * S
  std::vector<double> k;  // N
  std::vector<double> linear;  // N * S, zeros when absent
  std::vector<std::size_t> seed;  // N, kNoLabel when free
  std::size_t labels = 0;
};

Terms gather_terms(const RWProblem& problem, std::span<const double> linear) {
  problem.validate();
  const std::size_t n = problem.num_voxels();
  const std::size_t S = problem.num_labels;
  Terms t{weighted_sum(*problem.bank, problem.weights.laplacian_weights),
          std::vector<double>(n, 0.0),
          std::vector<double>(n * S, 0.0),
          std::vector<double>(n, 0.0),
          std::vector<double>(n * S, 0.0),
          std::vector<std::size_t>(n, kNoLabel),
          S};
  for (std::size_t b = 0; b < problem.priors.size(); ++b) {
    const double w = problem.weights.prior_weights[b];
    if (w == 0.0) continue;
    const auto& prior = problem.priors[b];
    for (std::size_t i = 0; i < n; ++i) {
      const double c = w * prior.weighting[i];
      if (c == 0.0) continue;
      t.d[i] += c;
      for (std::size_t s = 0; s < S; ++s) {
        const double target = prior.target.at(i, s);
        t.h[i * S + s] += c * target;
        t.k[i] += c * target * target;
      }
    }
  }
  if (!linear.empty()) {
    if (linear.size() != n * S) throw std::invalid_argument("linear term has wrong size");
    std::copy(linear.begin(), linear.end(), t.linear.begin());
  }
  for (const auto& [index, label] : problem.seeds.entries()) t.seed[index] = label;
  return t;
}

/// One subproblem: the subset's induced edges plus its share of the
/// per-voxel terms.
struct Slave {
  std::vector<Index> free;  // unseeded voxels of the subset, ascending
  SmallQP qp;
  Eigen::VectorXd base_linear;
  double constant = 0.0;

  double value(const Eigen::VectorXd& x) const { return qp.objective(x) + constant; }
};

/// `share[i]` scales the per-voxel terms of voxel i (1 / multiplicity).
Slave build_slave(const Terms& t, std::span<const Index> subset, std::span<const double> share,
                  std::vector<std::size_t>& position) {
  const std::size_t S = t.labels;
  Slave slave{{}, SmallQP(Eigen::MatrixXd(), Eigen::VectorXd(), {}), Eigen::VectorXd(), 0.0};
  constexpr std::size_t kAbsent = static_cast<std::size_t>(-1);
  for (const auto i : subset) {
    if (t.seed[i] == kNoLabel) {
      position[i] = slave.free.size();
      slave.free.push_back(i);
    } else {
      position[i] = kAbsent - 1;  // member, seeded
    }
  }
  const auto nvar = static_cast<Eigen::Index>(slave.free.size() * S);
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(nvar, nvar);
  Eigen::VectorXd c = Eigen::VectorXd::Zero(nvar);
  double constant = 0.0;
  auto var = [&](std::size_t local, std::size_t s) { return static_cast<Eigen::Index>(local * S + s); };

  for (const auto i : subset) {
    const double f = share[i];
    if (t.seed[i] == kNoLabel) {
      const std::size_t a = position[i];
      for (std::size_t s = 0; s < S; ++s) {
        q(var(a, s), var(a, s)) += f * t.d[i];
        c[var(a, s)] += f * (t.linear[i * S + s] - 2.0 * t.h[i * S + s]);
      }
      constant += f * t.k[i];
    } else {
      const std::size_t l = t.seed[i];
      constant += f * (t.d[i] - 2.0 * t.h[i * S + l] + t.k[i] + t.linear[i * S + l]);
    }
  }
  // Induced edges: w ||y_i - y_j||^2 for every coupled pair inside the subset.
  const auto& p = t.laplacian.pattern();
  const auto lv = t.laplacian.values();
  for (const auto i : subset) {
    for (std::size_t k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) {
      const std::size_t j = p.cols[k];
      if (j <= i || position[j] == kAbsent || lv[k] == 0.0) continue;
      const double w = -lv[k];
      const bool free_i = t.seed[i] == kNoLabel, free_j = t.seed[j] == kNoLabel;
      if (free_i && free_j) {
        const std::size_t a = position[i], b = position[j];
        for (std::size_t s = 0; s < S; ++s) {
          q(var(a, s), var(a, s)) += w;
          q(var(b, s), var(b, s)) += w;
          q(var(a, s), var(b, s)) -= w;
          q(var(b, s), var(a, s)) -= w;
        }
      } else if (free_i || free_j) {
        const std::size_t a = free_i ? position[i] : position[j];
        const std::size_t l = free_i ? t.seed[j] : t.seed[i];
        for (std::size_t s = 0; s < S; ++s) q(var(a, s), var(a, s)) += w;
        c[var(a, l)] -= 2.0 * w;
        constant += w;
      } else if (t.seed[i] != t.seed[j]) {
        constant += 2.0 * w;
      }
    }
  }
  for (const auto i : subset) position[i] = kAbsent;

  std::vector<SmallQP::Group> groups(slave.free.size());
  for (std::size_t a = 0; a < groups.size(); ++a) {
    for (std::size_t s = 0; s < S; ++s) groups[a].push_back(a * S + s);
  }
  slave.base_linear = c;
  slave.qp = SmallQP(std::move(q), std::move(c), std::move(groups));
  slave.constant = constant;
  return slave;
}

std::vector<Slave> build_slaves(const Terms& t, const Partition& partition) {
  const std::size_t n = t.seed.size();
  if (partition.dims.count() != n || partition.multiplicity.size() != n) {
    throw std::invalid_argument("partition does not match the problem size");
  }
  std::vector<double> share(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (partition.multiplicity[i] == 0) throw std::invalid_argument("voxel in no subset");
    share[i] = 1.0 / partition.multiplicity[i];
  }
  std::vector<Slave> slaves;
  slaves.reserve(partition.subsets.size());
  std::vector<std::size_t> position(n, static_cast<std::size_t>(-1));
  for (const auto& subset : partition.subsets) slaves.push_back(build_slave(t, subset, share, position));
  return slaves;
}

struct SlaveSolve {
  Eigen::VectorXd x;
  double value = 0.0;  // slave objective incl. dual term and constant
  double bound = 0.0;  // value minus the Frank-Wolfe gap
};

void solve_slave(Slave& slave, const std::vector<double>& rho, const QPOptions& options, SlaveSolve& result) {
  if (slave.free.empty()) {
    result.value = result.bound = slave.constant;
    return;
  }
  slave.qp.set_linear(slave.base_linear +
                      Eigen::Map<const Eigen::VectorXd>(rho.data(), static_cast<Eigen::Index>(rho.size())));
  const QPSolution sol = solve_qp(slave.qp, options);
  result.value = sol.objective + slave.constant;
  result.bound = result.value - slave.qp.frank_wolfe_gap(sol.x);
  result.x = sol.x;
}

std::vector<SlaveSolve> solve_slaves(std::vector<Slave>& slaves, const std::vector<std::vector<double>>& rho,
                                     const QPOptions& options) {
  std::vector<SlaveSolve> out(slaves.size());
  const auto count = static_cast<std::ptrdiff_t>(slaves.size());
  std::exception_ptr failure;  // exceptions must not cross the parallel region
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t m = 0; m < count; ++m) {
    const auto k = static_cast<std::size_t>(m);
    try {
      solve_slave(slaves[k], rho[k], options, out[k]);
    } catch (...) {
#pragma omp critical(rwseg_slave_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::vector<std::vector<double>> zero_duals(const std::vector<Slave>& slaves, std::size_t labels) {
  std::vector<std::vector<double>> rho(slaves.size());
  for (std::size_t m = 0; m < slaves.size(); ++m) rho[m].assign(slaves[m].free.size() * labels, 0.0);
  return rho;
}

/// Free rows of `y` in the slave's variable order.
Eigen::VectorXd restrict_rows(const Slave& slave, const SoftSegmentation& y) {
  const std::size_t S = y.num_labels();
  Eigen::VectorXd x(static_cast<Eigen::Index>(slave.free.size() * S));
  for (std::size_t a = 0; a < slave.free.size(); ++a) {
    for (std::size_t s = 0; s < S; ++s) x[static_cast<Eigen::Index>(a * S + s)] = y.at(slave.free[a], s);
  }
  return x;
}

SoftSegmentation rows_with_seeds(const Terms& t, std::vector<double> rows) {
  const std::size_t S = t.labels;
  for (std::size_t i = 0; i < t.seed.size(); ++i) {
    const std::span<double> row(rows.data() + i * S, S);
    if (t.seed[i] != kNoLabel) {
      std::fill(row.begin(), row.end(), 0.0);
      row[t.seed[i]] = 1.0;
    } else {
      project_simplex_in_place(row);
    }
  }
  return {t.seed.size(), S, std::move(rows)};
}

}  // namespace

FullQP build_full_qp(const RWProblem& problem, std::span<const double> linear) {
  const Terms t = gather_terms(problem, linear);
  const std::size_t n = t.seed.size();
  const Partition whole = whole_partition(Dims{n, 1, 1});
  std::vector<double> share(n, 1.0);
  std::vector<std::size_t> position(n, static_cast<std::size_t>(-1));
  Slave s = build_slave(t, whole.subsets[0], share, position);
  return {std::move(s.qp), s.constant, std::move(s.free)};
}

SoftSegmentation expand_solution(const RWProblem& problem, const FullQP& full, const Eigen::VectorXd& x) {
  const std::size_t S = problem.num_labels;
  const std::size_t n = problem.num_voxels();
  if (static_cast<std::size_t>(x.size()) != full.free_voxels.size() * S) {
    throw std::invalid_argument("solution has wrong size");
  }
  std::vector<double> rows(n * S, 0.0);
  for (const auto& [index, label] : problem.seeds.entries()) rows[index * S + label] = 1.0;
  for (std::size_t a = 0; a < full.free_voxels.size(); ++a) {
    std::vector<double> row(S);
    for (std::size_t s = 0; s < S; ++s) row[s] = x[static_cast<Eigen::Index>(a * S + s)];
    project_simplex_in_place(row);
    std::copy(row.begin(), row.end(), rows.begin() + static_cast<std::ptrdiff_t>(full.free_voxels[a] * S));
  }
  return {n, S, std::move(rows)};
}

AciResult solve_aci(const RWProblem& problem, const Partition& partition, const AciOptions& options,
                    std::span<const double> linear) {
  if (!(options.eta0 > 0.0) || !std::isfinite(options.eta0)) throw std::invalid_argument("eta0 must be positive");
  if (!(options.gap_tol > 0.0)) throw std::invalid_argument("gap_tol must be positive");
  if (options.max_iter == 0) throw std::invalid_argument("max_iter must be positive");
  const Terms t = gather_terms(problem, linear);
  validate_partition(partition, t.laplacian);
  std::vector<Slave> slaves = build_slaves(t, partition);
  const std::size_t n = t.seed.size();
  const std::size_t S = t.labels;

  AciResult result{SoftSegmentation::uniform(n, S), std::numeric_limits<double>::infinity(),
                   DualState{zero_duals(slaves, S), 0, options.eta0, options.rule}, {}};
  std::vector<double> sum(n * S), count(n);
  // Running mean of the consensus iterates. Subgradient steps make the
  // slaves jump between vertices, and the average settles far sooner.
  std::vector<double> average(n * S, 0.0);
  double first_disagreement = 0.0;
  for (std::size_t t_iter = 1; t_iter <= options.max_iter; ++t_iter) {
    const std::vector<SlaveSolve> solved = solve_slaves(slaves, result.state.rho, options.slave);

    // Consensus: per-voxel mean over the slaves holding that voxel.
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(count.begin(), count.end(), 0.0);
    double dual = 0.0;
    for (std::size_t m = 0; m < slaves.size(); ++m) {
      dual += solved[m].bound;
      for (std::size_t a = 0; a < slaves[m].free.size(); ++a) {
        const std::size_t i = slaves[m].free[a];
        count[i] += 1.0;
        for (std::size_t s = 0; s < S; ++s) sum[i * S + s] += solved[m].x[static_cast<Eigen::Index>(a * S + s)];
      }
    }
    std::vector<double> mean(n * S, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (count[i] == 0.0) continue;
      for (std::size_t s = 0; s < S; ++s) mean[i * S + s] = sum[i * S + s] / count[i];
    }
    double disagreement = 0.0;
    for (std::size_t m = 0; m < slaves.size(); ++m) {
      for (std::size_t a = 0; a < slaves[m].free.size(); ++a) {
        const std::size_t i = slaves[m].free[a];
        for (std::size_t s = 0; s < S; ++s) {
          disagreement = std::max(disagreement,
                                  std::abs(solved[m].x[static_cast<Eigen::Index>(a * S + s)] - mean[i * S + s]));
        }
      }
    }
    const double weight = 1.0 / static_cast<double>(t_iter);
    for (std::size_t k = 0; k < average.size(); ++k) average[k] += weight * (mean[k] - average[k]);
    SoftSegmentation consensus = rows_with_seeds(t, mean);
    double primal = constrained_objective(problem, consensus, linear);
    SoftSegmentation averaged = rows_with_seeds(t, average);
    const double averaged_primal = constrained_objective(problem, averaged, linear);
    if (averaged_primal < primal) {
      primal = averaged_primal;
      consensus = std::move(averaged);
    }
    result.diagnostics.trace.push_back({t_iter, dual, primal, disagreement});
    result.state.iteration = t_iter;
    if (primal < result.energy) {
      result.energy = primal;
      result.segmentation = std::move(consensus);
      result.diagnostics.best_iteration = t_iter;
    }
    if (disagreement <= options.gap_tol) {
      result.diagnostics.converged = true;
      break;
    }
    if (t_iter == options.max_iter) break;

    if (t_iter == 1) first_disagreement = disagreement;
    const double eta = options.rule == StepRule::diminishing
                           ? options.eta0 / static_cast<double>(t_iter)
                           : options.eta0 * disagreement / first_disagreement;
    for (std::size_t m = 0; m < slaves.size(); ++m) {
      auto& r = result.state.rho[m];
      for (std::size_t a = 0; a < slaves[m].free.size(); ++a) {
        const std::size_t i = slaves[m].free[a];
        for (std::size_t s = 0; s < S; ++s) {
          r[a * S + s] += eta * (solved[m].x[static_cast<Eigen::Index>(a * S + s)] - mean[i * S + s]);
        }
      }
    }
  }
  return result;
}

double primal_dual_gap(const RWProblem& problem, const Partition& partition, const DualState& state,
                       const SoftSegmentation& y, std::span<const double> linear, const QPOptions& slave) {
  const Terms t = gather_terms(problem, linear);
  std::vector<Slave> slaves = build_slaves(t, partition);
  if (state.rho.size() != slaves.size()) throw std::invalid_argument("dual state does not match the partition");
  for (std::size_t m = 0; m < slaves.size(); ++m) {
    if (state.rho[m].size() != slaves[m].free.size() * t.labels) {
      throw std::invalid_argument("dual state does not match the partition");
    }
  }
  const std::vector<SlaveSolve> solved = solve_slaves(slaves, state.rho, slave);
  double dual = 0.0;
  for (const auto& s : solved) dual += s.bound;
  return constrained_objective(problem, y, linear) - dual;
}

double reparameterization_check(const RWProblem& problem, const Partition& partition, std::size_t samples,
                                std::uint64_t seed, std::span<const double> linear) {
  const Terms t = gather_terms(problem, linear);
  const std::vector<Slave> slaves = build_slaves(t, partition);
  const std::size_t n = t.seed.size();
  const std::size_t S = t.labels;
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(1.0, 1.0);
  double worst = 0.0;
  for (std::size_t k = 0; k < samples; ++k) {
    std::vector<double> rows(n * S);
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t s = 0; s < S; ++s) total += rows[i * S + s] = gamma(rng);
      for (std::size_t s = 0; s < S; ++s) rows[i * S + s] /= total;
    }
    const SoftSegmentation y = rows_with_seeds(t, std::move(rows));
    double split = 0.0;
    for (const auto& slave : slaves) split += slave.value(restrict_rows(slave, y));
    worst = std::max(worst, std::abs(split - constrained_objective(problem, y, linear)));
  }
  return worst;
}

double dual_sum_violation(const RWProblem& problem, const Partition& partition, const DualState& state) {
  const std::size_t n = problem.num_voxels();
  const std::size_t S = problem.num_labels;
  if (state.rho.size() != partition.subsets.size()) throw std::invalid_argument("dual state does not match the partition");
  std::vector<double> total(n * S, 0.0);
  for (std::size_t m = 0; m < partition.subsets.size(); ++m) {
    std::size_t a = 0;
    for (const auto i : partition.subsets[m]) {
      if (problem.seeds.entries().count(i)) continue;
      if ((a + 1) * S > state.rho[m].size()) throw std::invalid_argument("dual state does not match the partition");
      for (std::size_t s = 0; s < S; ++s) total[i * S + s] += state.rho[m][a * S + s];
      ++a;
    }
  }
  double worst = 0.0;
  for (const double v : total) worst = std::max(worst, std::abs(v));
  return worst;
}

void write_aci_diagnostics(const AciDiagnostics& diagnostics, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "iteration,dual_value,primal_energy,max_disagreement\n";
  for (const auto& row : diagnostics.trace) {
    out << row.iteration << ',' << row.dual_value << ',' << row.primal_energy << ',' << row.max_disagreement << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace rwseg
