#include "rwseg/rw_solver.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>

#include "rwseg/error.hpp"

namespace rwseg {

void WeightVector::validate(std::size_t bank_size, std::size_t prior_count) const {
  if (laplacian_weights.size() != bank_size) {
    throw std::invalid_argument("expected " + std::to_string(bank_size) + " laplacian weights, got " +
                                std::to_string(laplacian_weights.size()));
  }
  if (prior_weights.size() != prior_count) {
    throw std::invalid_argument("expected " + std::to_string(prior_count) + " prior weights, got " +
                                std::to_string(prior_weights.size()));
  }
  bool any_positive = false;
  for (double w : flattened()) {
    if (!std::isfinite(w) || w < 0.0) throw std::invalid_argument("weights must be finite and >= 0");
    any_positive = any_positive || w > 0.0;
  }
  if (!any_positive) throw std::invalid_argument("at least one weight must be positive");
}

std::vector<double> WeightVector::flattened() const {
  std::vector<double> w(laplacian_weights);
  w.insert(w.end(), prior_weights.begin(), prior_weights.end());
  return w;
}

WeightVector WeightVector::from_flat(std::span<const double> w, std::size_t bank_size) {
  if (w.size() < bank_size) throw std::invalid_argument("weight vector too short");
  return {{w.begin(), w.begin() + static_cast<std::ptrdiff_t>(bank_size)},
          {w.begin() + static_cast<std::ptrdiff_t>(bank_size), w.end()}};
}

void RWProblem::validate() const {
  if (!bank || bank->size() == 0) throw std::invalid_argument("problem has no laplacian bank");
  if (num_labels < 2) throw std::invalid_argument("need at least two labels");
  const std::size_t n = num_voxels();
  for (const auto& term : bank->terms) {
    if (term.order() != n) throw std::invalid_argument("bank terms differ in order");
  }
  weights.validate(bank->size(), priors.size());
  for (const auto& prior : priors) {
    if (prior.target.num_voxels() != n || prior.target.num_labels() != num_labels) {
      throw std::invalid_argument("prior target does not match problem size");
    }
    if (!prior.weighting.is_identity() && prior.weighting.size() != n) {
      throw std::invalid_argument("prior weighting does not match problem size");
    }
  }
  if (!seeds.empty() && seeds.num_labels() != num_labels) {
    throw std::invalid_argument("seed map label count does not match problem");
  }
  seeds.validate(n);
}

std::vector<double> prior_diagonal(const RWProblem& problem) {
  std::vector<double> d(problem.num_voxels(), 0.0);
  for (std::size_t b = 0; b < problem.priors.size(); ++b) {
    const double w = problem.weights.prior_weights[b];
    if (w == 0.0) continue;
    const auto& omega = problem.priors[b].weighting;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += w * omega[i];
  }
  return d;
}

namespace {

constexpr std::size_t kBlockRows = 4096;
constexpr std::size_t kNotSeeded = static_cast<std::size_t>(-1);

std::size_t find_root(std::vector<std::size_t>& parent, std::size_t a) {
  while (parent[a] != a) {
    parent[a] = parent[parent[a]];
    a = parent[a];
  }
  return a;
}

/// Everything the reduced system is built from.
struct Assembly {
  SparseLaplacian combined;
  std::vector<double> prior_diag;
  std::vector<std::size_t> seed_label;  // per voxel, kNotSeeded when free
  std::vector<Index> free_voxels;
};

Assembly prepare(const RWProblem& problem) {
  const std::size_t n = problem.num_voxels();
  Assembly a{weighted_sum(*problem.bank, problem.weights.laplacian_weights), prior_diagonal(problem),
             std::vector<std::size_t>(n, kNotSeeded), {}};
  for (const auto& [index, label] : problem.seeds.entries()) a.seed_label[index] = label;
  a.free_voxels.reserve(n - problem.seeds.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (a.seed_label[i] == kNotSeeded) a.free_voxels.push_back(static_cast<Index>(i));
  }
  return a;
}

/// Every connected component of free voxels needs an anchor (a prior
/// diagonal or a positive coupling to a seed) for the reduced system to be
/// positive definite.
void check_solvable(const Assembly& a) {
  const auto& p = a.combined.pattern();
  const auto lv = a.combined.values();
  const std::size_t n = p.order;
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  std::vector<char> anchored(n, 0);
  for (const Index i : a.free_voxels) {
    if (a.prior_diag[i] > 0.0) anchored[i] = 1;
    for (std::size_t k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) {
      const std::size_t j = p.cols[k];
      if (j == i || !(lv[k] < 0.0)) continue;
      if (a.seed_label[j] != kNotSeeded) {
        anchored[i] = 1;
      } else if (j > i) {
        const auto r1 = find_root(parent, i);
        const auto r2 = find_root(parent, j);
        if (r1 != r2) parent[r1] = r2;
      }
    }
  }
  std::vector<char> root_anchored(n, 0);
  for (const Index i : a.free_voxels) {
    if (anchored[i]) root_anchored[find_root(parent, i)] = 1;
  }
  for (const Index i : a.free_voxels) {
    if (!root_anchored[find_root(parent, i)]) {
      throw SolverError("singular reduced system: voxel " + std::to_string(i) +
                        " is connected to neither a seed nor a prior");
    }
  }
}

void add_prior_rhs(const RWProblem& problem, std::span<const Index> row_voxel, std::vector<double>& rhs) {
  const std::size_t S = problem.num_labels;
  for (std::size_t b = 0; b < problem.priors.size(); ++b) {
    const double w = problem.weights.prior_weights[b];
    if (w == 0.0) continue;
    const auto& prior = problem.priors[b];
#pragma omp parallel for schedule(static)
    for (std::size_t u = 0; u < row_voxel.size(); ++u) {
      const std::size_t i = row_voxel[u];
      const double c = w * prior.weighting[i];
      if (c == 0.0) continue;
      for (std::size_t s = 0; s < S; ++s) rhs[u * S + s] += c * prior.target.at(i, s);
    }
  }
}

/// Seed-eliminated system in compressed rows over the free voxels.
struct CsrSystem {
  std::size_t labels = 0;
  std::vector<Index> row_voxel;
  std::vector<std::size_t> row_ptr;
  std::vector<Index> cols;
  std::vector<double> values;
  std::vector<double> inv_diag;
  std::vector<double> rhs;
  double start = 0.0;  // initial value of every unknown
  static constexpr std::size_t pad = 0;

  std::size_t rows() const { return row_voxel.size(); }

  template <std::size_t KS>
  void apply(const double* v, double* out, std::size_t begin, std::size_t end) const {
    const std::size_t S = KS ? KS : labels;
    for (std::size_t u = begin; u < end; ++u) {
      double* y = out + u * S;
      for (std::size_t s = 0; s < S; ++s) y[s] = 0.0;
      for (std::size_t k = row_ptr[u]; k < row_ptr[u + 1]; ++k) {
        const double a = values[k];
        const double* x = v + static_cast<std::size_t>(cols[k]) * S;
        for (std::size_t s = 0; s < S; ++s) y[s] += a * x[s];
      }
    }
  }
};

/// Keeps the first S - 1 right-hand-side columns. Every row of the exact
/// solution sums to one, so the last label is recovered from the others.
std::vector<double> drop_last_column(const std::vector<double>& rhs, std::size_t rows, std::size_t S) {
  std::vector<double> out(rows * (S - 1));
  for (std::size_t u = 0; u < rows; ++u) {
    std::copy_n(rhs.begin() + static_cast<std::ptrdiff_t>(u * S), S - 1,
                out.begin() + static_cast<std::ptrdiff_t>(u * (S - 1)));
  }
  return out;
}

CsrSystem build_csr(const RWProblem& problem, const Assembly& a) {
  const auto& p = a.combined.pattern();
  const auto lv = a.combined.values();
  const std::size_t S = problem.num_labels;
  CsrSystem sys;
  sys.labels = S;
  sys.row_voxel = a.free_voxels;
  const std::size_t m = sys.rows();
  std::vector<std::size_t> position(p.order, kNotSeeded);
  for (std::size_t u = 0; u < m; ++u) position[sys.row_voxel[u]] = u;
  sys.row_ptr.assign(m + 1, 0);
  for (std::size_t u = 0; u < m; ++u) {
    const std::size_t i = sys.row_voxel[u];
    std::size_t count = 0;
    for (std::size_t k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) count += a.seed_label[p.cols[k]] == kNotSeeded;
    sys.row_ptr[u + 1] = sys.row_ptr[u] + count;
  }
  sys.cols.resize(sys.row_ptr[m]);
  sys.values.resize(sys.row_ptr[m]);
  sys.inv_diag.assign(m, 0.0);
  sys.rhs.assign(m * S, 0.0);
#pragma omp parallel for schedule(static)
  for (std::size_t u = 0; u < m; ++u) {
    const std::size_t i = sys.row_voxel[u];
    std::size_t out = sys.row_ptr[u];
    for (std::size_t k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) {
      const std::size_t j = p.cols[k];
      if (a.seed_label[j] == kNotSeeded) {
        double v = lv[k];
        if (j == i) {
          v += a.prior_diag[i];
          sys.inv_diag[u] = 1.0 / v;
        }
        sys.cols[out] = static_cast<Index>(position[j]);
        sys.values[out] = v;
        ++out;
      } else {
        sys.rhs[u * S + a.seed_label[j]] -= lv[k];
      }
    }
  }
  add_prior_rhs(problem, sys.row_voxel, sys.rhs);
  sys.rhs = drop_last_column(sys.rhs, m, S);
  sys.labels = S - 1;
  sys.start = 1.0 / static_cast<double>(S);
  return sys;
}

/// Matrix-free form of the same system on a 6-neighborhood lattice. Rows are
/// all voxels; seeded rows are inert (zero diagonal, couplings and rhs).
/// Input vectors carry `pad` zero rows on both sides so neighbor reads need
/// no bounds checks.
struct StencilSystem {
  std::size_t labels = 0;
  std::size_t n = 0;
  std::size_t pad = 0;
  std::size_t stride_y = 0;
  std::size_t stride_z = 0;
  std::vector<double> diag;
  std::vector<double> inv_diag;  // with `pad` zeros on both sides
  // Coupling to the +x/+y/+z neighbor, stored with `pad` leading zeros.
  std::vector<double> wx, wy, wz;
  std::vector<double> rhs;
  double start = 0.0;

  std::size_t rows() const { return n; }

  template <std::size_t KS>
  void apply(const double* v, double* out, std::size_t begin, std::size_t end) const {
    const std::size_t S = KS ? KS : labels;
    const double* px = wx.data() + pad;
    const double* py = wy.data() + pad;
    const double* pz = wz.data() + pad;
    const auto sy = static_cast<std::ptrdiff_t>(stride_y);
    const auto sz = static_cast<std::ptrdiff_t>(stride_z);
    const auto St = static_cast<std::ptrdiff_t>(S);
    for (std::size_t u = begin; u < end; ++u) {
      const auto i = static_cast<std::ptrdiff_t>(u);
      const double d = diag[u];
      const double ax = px[i], bx = px[i - 1];
      const double ay = py[i], by = py[i - sy];
      const double az = pz[i], bz = pz[i - sz];
      const double* c = v + i * St;
      const double* xp = c + St;
      const double* xm = c - St;
      const double* yp = c + sy * St;
      const double* ym = c - sy * St;
      const double* zp = c + sz * St;
      const double* zm = c - sz * St;
      double* y = out + u * S;
#pragma omp simd
      for (std::size_t s = 0; s < S; ++s) {
        y[s] = d * c[s] - ax * xp[s] - bx * xm[s] - ay * yp[s] - by * ym[s] - az * zp[s] - bz * zm[s];
      }
    }
  }
};

/// Builds the stencil form when the combined Laplacian is exactly a lattice
/// Laplacian over `dims`; otherwise returns nullopt.
std::optional<StencilSystem> build_stencil(const RWProblem& problem, const Assembly& a, const Dims& dims) {
  const auto& p = a.combined.pattern();
  const auto lv = a.combined.values();
  const std::size_t n = p.order;
  if (dims.count() != n) return std::nullopt;
  const std::size_t S = problem.num_labels;
  StencilSystem sys;
  sys.labels = S;
  sys.n = n;
  sys.stride_y = dims.nx;
  sys.stride_z = dims.nx * dims.ny;
  sys.pad = sys.stride_z;
  sys.diag.assign(n, 0.0);
  sys.inv_diag.assign(n + 2 * sys.pad, 0.0);
  sys.wx.assign(n + 2 * sys.pad, 0.0);
  sys.wy.assign(n + 2 * sys.pad, 0.0);
  sys.wz.assign(n + 2 * sys.pad, 0.0);
  sys.rhs.assign(n * S, 0.0);
  bool lattice = true;
#pragma omp parallel for schedule(static) reduction(&& : lattice)
  for (std::size_t i = 0; i < n; ++i) {
    if (a.seed_label[i] != kNotSeeded) continue;
    const std::size_t x = i % dims.nx;
    const std::size_t y = (i / dims.nx) % dims.ny;
    for (std::size_t k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) {
      const std::size_t j = p.cols[k];
      const double v = lv[k];
      if (j == i) {
        sys.diag[i] = v + a.prior_diag[i];
        sys.inv_diag[sys.pad + i] = 1.0 / sys.diag[i];
        continue;
      }
      if (a.seed_label[j] != kNotSeeded) {
        sys.rhs[i * S + a.seed_label[j]] -= v;
        continue;
      }
      if (j < i) continue;  // stored once, on the lower-index voxel
      const std::size_t offset = j - i;
      if (dims.nx > 1 && offset == 1 && x + 1 < dims.nx) {
        sys.wx[sys.pad + i] = -v;
      } else if (dims.ny > 1 && offset == sys.stride_y && y + 1 < dims.ny) {
        sys.wy[sys.pad + i] = -v;
      } else if (dims.nz > 1 && offset == sys.stride_z) {
        sys.wz[sys.pad + i] = -v;
      } else if (v != 0.0) {
        lattice = false;
      }
    }
  }
  if (!lattice) return std::nullopt;
  std::vector<Index> all(n);
  std::iota(all.begin(), all.end(), Index{0});
  add_prior_rhs(problem, all, sys.rhs);
  for (const auto& [index, label] : problem.seeds.entries()) {
    std::fill_n(sys.rhs.begin() + static_cast<std::ptrdiff_t>(index * S), S, 0.0);  // keep seeded rows inert
  }
  sys.rhs = drop_last_column(sys.rhs, n, S);
  sys.labels = S - 1;
  sys.start = 1.0 / static_cast<double>(S);
  return sys;
}

/// Per-column dot products accumulated in fixed row blocks and summed in
/// block order, so results do not depend on the thread count.
class BlockReducer {
 public:
  BlockReducer(std::size_t rows, std::size_t labels)
      : labels_(labels), blocks_((rows + kBlockRows - 1) / kBlockRows), partial_(blocks_ * labels, 0.0) {}

  std::size_t blocks() const { return blocks_; }
  double* block(std::size_t b) { return partial_.data() + b * labels_; }
  void clear() { std::fill(partial_.begin(), partial_.end(), 0.0); }
  std::vector<double> sum() const {
    std::vector<double> out(labels_, 0.0);
    for (std::size_t b = 0; b < blocks_; ++b) {
      for (std::size_t s = 0; s < labels_; ++s) out[s] += partial_[b * labels_ + s];
    }
    return out;
  }

 private:
  std::size_t labels_;
  std::size_t blocks_;
  std::vector<double> partial_;
};

/// Per-block partial sums split over four row lanes, which keeps the
/// accumulation from serializing on one add chain. Folding order is fixed.
template <std::size_t KS>
class Lanes {
 public:
  static constexpr std::size_t kWidth = 4;
  explicit Lanes(std::size_t labels) : labels_(KS ? KS : labels) {
    if constexpr (KS == 0) heap_.assign(kWidth * labels_, 0.0);
  }
  double* at(std::size_t row) { return base() + (row % kWidth) * labels_; }
  void fold_into(double* acc) {
    for (std::size_t lane = 0; lane < kWidth; ++lane) {
      for (std::size_t s = 0; s < labels_; ++s) acc[s] += base()[lane * labels_ + s];
    }
  }

 private:
  double* base() {
    if constexpr (KS == 0) {
      return heap_.data();
    } else {
      return fixed_.data();
    }
  }
  std::size_t labels_;
  std::array<double, kWidth * (KS ? KS : 1)> fixed_{};
  std::vector<double> heap_;
};

struct CgOutcome {
  std::vector<double> x;  // rows x labels, system row order
  std::vector<std::size_t> iterations;
  double max_relative_residual = 0.0;
};

/// Jacobi-preconditioned CG, one independent recurrence per label column,
/// sharing each pass over the matrix.
template <std::size_t KS, class System>
CgOutcome conjugate_gradient(const System& sys, double tol, std::size_t max_iter) {
  const std::size_t m = sys.rows();
  const std::size_t S = KS ? KS : sys.labels;
  const std::size_t pad = sys.pad;
  CgOutcome out;
  out.iterations.assign(S, 0);
  out.x.assign(m * S, 0.0);
  if (m == 0) return out;

  BlockReducer red_a(m, S), red_b(m, S);
  const std::size_t blocks = red_a.blocks();
  auto block_end = [&](std::size_t blk) { return std::min(m, (blk + 1) * kBlockRows); };

  red_a.clear();
#pragma omp parallel for schedule(static)
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    double* acc = red_a.block(blk);
    for (std::size_t u = blk * kBlockRows; u < block_end(blk); ++u) {
      for (std::size_t s = 0; s < S; ++s) acc[s] += sys.rhs[u * S + s] * sys.rhs[u * S + s];
    }
  }
  std::vector<double> b_norm = red_a.sum();
  std::vector<char> active(S, 1);
  std::vector<double> start(S, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    b_norm[s] = std::sqrt(b_norm[s]);
    if (b_norm[s] == 0.0) {
      active[s] = 0;  // A x = 0 has only the trivial solution
    } else {
      start[s] = sys.start;
    }
  }

  // Vectors read through the operator carry `pad` zero rows on both sides.
  const double* invd = sys.inv_diag.data() + pad;
  std::vector<double> q(m * S);
  std::vector<double> r_store(m * S, 0.0), p_store((m + 2 * pad) * S, 0.0);
  double* r = r_store.data();
  double* p = p_store.data() + pad * S;
  for (std::size_t u = 0; u < m; ++u) {
    if (invd[u] == 0.0) continue;  // inert row
    for (std::size_t s = 0; s < S; ++s) out.x[u * S + s] = start[s];
  }
  std::copy(out.x.begin(), out.x.end(), p);  // p is free until the first iteration

  // r = b - A x0
  red_a.clear();
#pragma omp parallel for schedule(static)
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    double* acc = red_a.block(blk);
    const std::size_t begin = blk * kBlockRows, end = block_end(blk);
    sys.template apply<KS>(p, q.data(), begin, end);
    for (std::size_t u = begin; u < end; ++u) {
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t k = u * S + s;
        r[k] = active[s] ? sys.rhs[k] - q[k] : 0.0;
        acc[s] += r[k] * r[k] * invd[u];
      }
    }
  }
  std::vector<double> rz = red_a.sum();
  std::vector<double> alpha(S, 0.0), beta(S, 0.0), rel(S, 0.0), mask(S, 0.0);

  for (std::size_t iter = 0;; ++iter) {
    if (std::none_of(active.begin(), active.end(), [](char c) { return c != 0; })) break;
    if (iter >= max_iter) {
      throw SolverError("conjugate gradient did not converge within " + std::to_string(max_iter) + " iterations");
    }
    for (std::size_t s = 0; s < S; ++s) mask[s] = active[s] ? 1.0 : 0.0;
    // p = M^-1 r + beta p; converged columns get p = 0 so x stops moving
#pragma omp parallel for schedule(static)
    for (std::size_t u = 0; u < m; ++u) {
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t k = u * S + s;
        p[k] = mask[s] * (invd[u] * r[k] + beta[s] * p[k]);
      }
    }
    // q = A p, <p, q>
    red_a.clear();
#pragma omp parallel for schedule(static)
    for (std::size_t blk = 0; blk < blocks; ++blk) {
      const std::size_t begin = blk * kBlockRows, end = block_end(blk);
      sys.template apply<KS>(p, q.data(), begin, end);
      Lanes<KS> pq_lanes(S);
      for (std::size_t u = begin; u < end; ++u) {
        double* acc = pq_lanes.at(u);
        for (std::size_t s = 0; s < S; ++s) acc[s] += p[u * S + s] * q[u * S + s];
      }
      pq_lanes.fold_into(red_a.block(blk));
    }
    const std::vector<double> pq = red_a.sum();
    for (std::size_t s = 0; s < S; ++s) {
      if (!active[s]) {
        alpha[s] = 0.0;
        continue;
      }
      if (rz[s] == 0.0) {  // already exact, e.g. the starting guess
        active[s] = 0;
        alpha[s] = 0.0;
        continue;
      }
      if (!(pq[s] > 0.0)) throw SolverError("singular reduced system");
      alpha[s] = rz[s] / pq[s];
    }
    // x += alpha p, r -= alpha q, accumulate <r, M^-1 r> and <r, r>
    red_a.clear();
    red_b.clear();
#pragma omp parallel for schedule(static)
    for (std::size_t blk = 0; blk < blocks; ++blk) {
      Lanes<KS> rz_lanes(S), rr_lanes(S);
      for (std::size_t u = blk * kBlockRows; u < block_end(blk); ++u) {
        const double inv = invd[u];
        double* acc_rz = rz_lanes.at(u);
        double* acc_rr = rr_lanes.at(u);
        for (std::size_t s = 0; s < S; ++s) {
          const std::size_t k = u * S + s;
          out.x[k] += alpha[s] * p[k];
          const double rk = r[k] - alpha[s] * q[k];
          r[k] = rk;
          acc_rz[s] += rk * rk * inv;
          acc_rr[s] += rk * rk;
        }
      }
      rz_lanes.fold_into(red_a.block(blk));
      rr_lanes.fold_into(red_b.block(blk));
    }
    const std::vector<double> rz_new = red_a.sum();
    const std::vector<double> rr = red_b.sum();
    for (std::size_t s = 0; s < S; ++s) {
      if (!active[s]) {
        beta[s] = 0.0;
        continue;
      }
      ++out.iterations[s];
      rel[s] = std::sqrt(rr[s]) / b_norm[s];
      beta[s] = rz[s] > 0.0 ? rz_new[s] / rz[s] : 0.0;
      rz[s] = rz_new[s];
      if (rel[s] <= tol) active[s] = 0;
    }
  }
  out.max_relative_residual = *std::max_element(rel.begin(), rel.end());
  return out;
}

template <class System>
CgOutcome run_cg(const System& sys, double tol, std::size_t max_iter) {
  switch (sys.labels) {
    case 1: return conjugate_gradient<1>(sys, tol, max_iter);
    case 2: return conjugate_gradient<2>(sys, tol, max_iter);
    case 3: return conjugate_gradient<3>(sys, tol, max_iter);
    case 4: return conjugate_gradient<4>(sys, tol, max_iter);
    default: return conjugate_gradient<0>(sys, tol, max_iter);
  }
}

/// Writes seeded rows one-hot and unseeded rows from `x` (clamped at zero and
/// renormalized).
SoftSegmentation assemble_rows(const RWProblem& problem, const std::vector<Index>& voxels,
                               std::span<const double> x, double* raw_min, double* raw_max) {
  const std::size_t n = problem.num_voxels();
  const std::size_t S = problem.num_labels;
  std::vector<double> rows(n * S, 0.0);
  for (const auto& [index, label] : problem.seeds.entries()) rows[index * S + label] = 1.0;
  double lo = 0.0, hi = 0.0;
  if (!voxels.empty()) {
    lo = hi = x[0];
  }
  for (std::size_t u = 0; u < voxels.size(); ++u) {
    double* row = rows.data() + static_cast<std::size_t>(voxels[u]) * S;
    double sum = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      const double v = x[u * S + s];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      row[s] = std::max(0.0, v);
      sum += row[s];
    }
    if (!(sum > 0.0) || !std::isfinite(sum)) {
      throw SolverError("degenerate probabilities at voxel " + std::to_string(voxels[u]));
    }
    for (std::size_t s = 0; s < S; ++s) row[s] = std::min(1.0, row[s] / sum);
  }
  if (raw_min) *raw_min = lo;
  if (raw_max) *raw_max = hi;
  return {n, S, std::move(rows)};
}

}  // namespace

SolveReport solve(const RWProblem& problem, const SolveOptions& options) {
  problem.validate();
  if (!(options.tol >= 1e-12 && options.tol <= 1e-2)) {
    throw std::invalid_argument("tolerance must lie in [1e-12, 1e-2]");
  }
  const std::size_t max_iter = options.max_iter ? options.max_iter : 10 * problem.num_voxels();
  const Assembly assembly = prepare(problem);
  check_solvable(assembly);
  CgOutcome cg;
  std::optional<StencilSystem> stencil;
  if (problem.bank->lattice) stencil = build_stencil(problem, assembly, *problem.bank->lattice);
  const std::size_t S = problem.num_labels;
  const std::size_t K = S - 1;
  if (stencil) {
    cg = run_cg(*stencil, options.tol, max_iter);
    // Gather free rows into the compact order used below.
    std::vector<double> compact(assembly.free_voxels.size() * K);
    for (std::size_t u = 0; u < assembly.free_voxels.size(); ++u) {
      std::copy_n(cg.x.begin() + static_cast<std::ptrdiff_t>(assembly.free_voxels[u] * K), K,
                  compact.begin() + static_cast<std::ptrdiff_t>(u * K));
    }
    cg.x = std::move(compact);
  } else {
    cg = run_cg(build_csr(problem, assembly), options.tol, max_iter);
  }
  std::vector<double> full(assembly.free_voxels.size() * S);
  for (std::size_t u = 0; u < assembly.free_voxels.size(); ++u) {
    double rest = 1.0;
    for (std::size_t s = 0; s < K; ++s) rest -= full[u * S + s] = cg.x[u * K + s];
    full[u * S + K] = rest;
  }
  cg.x = std::move(full);
  double lo = 0.0, hi = 0.0;
  SoftSegmentation y = assemble_rows(problem, assembly.free_voxels, cg.x, &lo, &hi);
  return {std::move(y), std::move(cg.iterations), cg.max_relative_residual, lo, hi};
}

SoftSegmentation solve_dense_oracle(const RWProblem& problem) {
  problem.validate();
  const std::size_t n = problem.num_voxels();
  const std::size_t S = problem.num_labels;
  if (n > 1000) throw std::invalid_argument("dense oracle limited to 1000 voxels");

  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t a = 0; a < problem.bank->size(); ++a) {
    const double w = problem.weights.laplacian_weights[a];
    if (w == 0.0) continue;
    const auto dense = problem.bank->terms[a].to_dense();
    L += w * Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                 dense.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  }
  Eigen::MatrixXd prior_rhs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(S));
  Eigen::VectorXd prior_diag = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t b = 0; b < problem.priors.size(); ++b) {
    const double w = problem.weights.prior_weights[b];
    for (std::size_t i = 0; i < n; ++i) {
      const double c = w * problem.priors[b].weighting[i];
      prior_diag[static_cast<Eigen::Index>(i)] += c;
      for (std::size_t s = 0; s < S; ++s) {
        prior_rhs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) += c * problem.priors[b].target.at(i, s);
      }
    }
  }

  std::vector<Index> free_voxels;
  for (std::size_t i = 0; i < n; ++i) {
    if (!problem.seeds.entries().contains(i)) free_voxels.push_back(static_cast<Index>(i));
  }
  const auto m = static_cast<Eigen::Index>(free_voxels.size());
  Eigen::MatrixXd A(m, m);
  Eigen::MatrixXd B(m, static_cast<Eigen::Index>(S));
  for (Eigen::Index u = 0; u < m; ++u) {
    const auto i = static_cast<Eigen::Index>(free_voxels[static_cast<std::size_t>(u)]);
    for (Eigen::Index v = 0; v < m; ++v) A(u, v) = L(i, static_cast<Eigen::Index>(free_voxels[static_cast<std::size_t>(v)]));
    A(u, u) += prior_diag[i];
    B.row(u) = prior_rhs.row(i);
    for (const auto& [j, label] : problem.seeds.entries()) {
      B(u, static_cast<Eigen::Index>(label)) -= L(i, static_cast<Eigen::Index>(j));
    }
  }
  Eigen::MatrixXd X(m, static_cast<Eigen::Index>(S));
  if (m > 0) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.rcond() < 1e-13) {
      throw SolverError("singular reduced system");
    }
    X = ldlt.solve(B);
  }
  std::vector<double> x(static_cast<std::size_t>(m) * S);
  for (Eigen::Index u = 0; u < m; ++u) {
    for (std::size_t s = 0; s < S; ++s) x[static_cast<std::size_t>(u) * S + s] = X(u, static_cast<Eigen::Index>(s));
  }
  return assemble_rows(problem, free_voxels, x, nullptr, nullptr);
}

double laplacian_energy(const RWProblem& problem, const SoftSegmentation& y) {
  problem.validate();
  const std::size_t n = problem.num_voxels();
  const std::size_t S = problem.num_labels;
  if (y.num_voxels() != n || y.num_labels() != S) throw std::invalid_argument("segmentation size mismatch");
  double total = 0.0;
  std::vector<double> column(n);
  for (std::size_t a = 0; a < problem.bank->size(); ++a) {
    const double w = problem.weights.laplacian_weights[a];
    if (w == 0.0) continue;
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t i = 0; i < n; ++i) column[i] = y.at(i, s);
      total += w * problem.bank->terms[a].quadratic_form(column);
    }
  }
  return total;
}

double energy(const RWProblem& problem, const SoftSegmentation& y) {
  double total = laplacian_energy(problem, y);
  const std::size_t S = problem.num_labels;
  for (std::size_t b = 0; b < problem.priors.size(); ++b) {
    const double w = problem.weights.prior_weights[b];
    if (w == 0.0) continue;
    const auto& prior = problem.priors[b];
    double term = 0.0;
    for (std::size_t i = 0; i < y.num_voxels(); ++i) {
      double d2 = 0.0;
      for (std::size_t s = 0; s < S; ++s) {
        const double d = y.at(i, s) - prior.target.at(i, s);
        d2 += d * d;
      }
      term += prior.weighting[i] * d2;
    }
    total += w * term;
  }
  return total;
}

}  // namespace rwseg
