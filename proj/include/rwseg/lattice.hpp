#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "rwseg/volume.hpp"

namespace rwseg {

struct Edge {
  Index i;  // i < j
  Index j;
  double weight;
};

/// 6-neighborhood edges of a voxel grid. Each neighbor pair appears once.
struct EdgeList {
  Dims dims;
  std::vector<Edge> edges;
};

enum class WeightKind { gaussian, reciprocal };

struct EdgeWeightConfig {
  WeightKind kind = WeightKind::gaussian;
  double beta = 100.0;
  double epsilon = 1.0;  // reciprocal only

  static EdgeWeightConfig gaussian(double beta) { return {WeightKind::gaussian, beta, 1.0}; }
  static EdgeWeightConfig reciprocal(double beta, double epsilon) {
    return {WeightKind::reciprocal, beta, epsilon};
  }

  /// Throws std::invalid_argument unless beta > 0 (and epsilon > 0 for reciprocal).
  void validate() const;
  double operator()(double intensity_i, double intensity_j) const;
};

/// exp(-beta (Ii - Ij)^2)
double gaussian_weight(double intensity_i, double intensity_j, double beta);
/// 1 / (beta |Ii - Ij| + epsilon)
double reciprocal_weight(double intensity_i, double intensity_j, double beta, double epsilon);

/// Unit-weight lattice edges, emitted in voxel order (+x, +y, +z per voxel).
EdgeList build_edges(const Dims& dims);
inline EdgeList build_edges(const Volume& v) { return build_edges(v.dims()); }

/// Same structure as `edges`, weights recomputed from the (normalized) volume.
EdgeList weight_edges(const EdgeList& edges, const Volume& v, const EdgeWeightConfig& config);

/// Compressed-row sparsity pattern with sorted columns; shared between
/// Laplacians built over the same graph.
struct SparsityPattern {
  std::size_t order = 0;
  std::vector<std::size_t> row_ptr;
  std::vector<Index> cols;
  std::vector<std::size_t> diag_pos;

  static std::shared_ptr<const SparsityPattern> from_edges(std::size_t order, std::span<const Edge> edges);
  /// Position of (i, j) in cols/values, or npos.
  std::size_t find(std::size_t i, std::size_t j) const;
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

/// Symmetric combinatorial Laplacian in compressed row layout.
class SparseLaplacian {
 public:
  SparseLaplacian() = default;
  SparseLaplacian(std::shared_ptr<const SparsityPattern> pattern, std::vector<double> values);

  std::size_t order() const { return pattern_ ? pattern_->order : 0; }
  std::size_t nnz() const { return values_.size(); }
  const SparsityPattern& pattern() const { return *pattern_; }
  const std::shared_ptr<const SparsityPattern>& shared_pattern() const { return pattern_; }
  std::span<const double> values() const { return values_; }

  double at(std::size_t i, std::size_t j) const;
  double diagonal(std::size_t i) const { return values_[pattern_->diag_pos[i]]; }

  /// y = L x
  void multiply(std::span<const double> x, std::span<double> y) const;
  /// x^T L x
  double quadratic_form(std::span<const double> x) const;
  /// Row-major dense copy, for small-instance checks.
  std::vector<double> to_dense() const;

 private:
  std::shared_ptr<const SparsityPattern> pattern_;
  std::vector<double> values_;
};

/// L[i][i] = sum of incident weights, L[i][j] = -w_ij. Duplicate edges accumulate.
SparseLaplacian assemble_laplacian(const EdgeList& edges);
/// Same, reusing a pattern that already contains every edge of `edges`.
SparseLaplacian assemble_laplacian(const EdgeList& edges, std::shared_ptr<const SparsityPattern> pattern);

struct LaplacianBank {
  std::vector<SparseLaplacian> terms;
  std::vector<EdgeWeightConfig> configs;
  /// Set when every term lives on the 6-neighborhood lattice of these dims.
  std::optional<Dims> lattice;

  std::size_t size() const { return terms.size(); }
  std::size_t order() const { return terms.empty() ? 0 : terms.front().order(); }
};

/// The four terms used throughout: gaussian beta = 50, 100, 150, then
/// reciprocal beta = 100, epsilon = 1.
std::vector<EdgeWeightConfig> default_weight_configs();

LaplacianBank build_bank(const Volume& normalized, std::span<const EdgeWeightConfig> configs);
inline LaplacianBank build_default_bank(const Volume& normalized) {
  return build_bank(normalized, default_weight_configs());
}

/// sum_a w_a L_a, skipping zero weights. All terms must share a pattern.
SparseLaplacian weighted_sum(const LaplacianBank& bank, std::span<const double> weights);

}  // namespace rwseg
