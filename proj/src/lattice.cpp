#include "rwseg/lattice.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "rwseg/error.hpp"

namespace rwseg {

void EdgeWeightConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be positive");
  if (kind == WeightKind::reciprocal && (!(epsilon > 0.0) || !std::isfinite(epsilon))) {
    throw std::invalid_argument("epsilon must be positive");
  }
}

double EdgeWeightConfig::operator()(double intensity_i, double intensity_j) const {
  return kind == WeightKind::gaussian ? gaussian_weight(intensity_i, intensity_j, beta)
                                      : reciprocal_weight(intensity_i, intensity_j, beta, epsilon);
}

double gaussian_weight(double intensity_i, double intensity_j, double beta) {
  const double d = intensity_i - intensity_j;
  return std::exp(-beta * d * d);
}

double reciprocal_weight(double intensity_i, double intensity_j, double beta, double epsilon) {
  return 1.0 / (beta * std::abs(intensity_i - intensity_j) + epsilon);
}

EdgeList build_edges(const Dims& d) {
  EdgeList out{d, {}};
  const std::size_t n = d.count();
  const std::size_t expected = 3 * n - (d.ny * d.nz + d.nx * d.nz + d.nx * d.ny);
  out.edges.reserve(expected);
  const std::size_t sx = 1, sy = d.nx, sz = d.nx * d.ny;
  for (std::size_t z = 0; z < d.nz; ++z) {
    for (std::size_t y = 0; y < d.ny; ++y) {
      for (std::size_t x = 0; x < d.nx; ++x) {
        const auto i = static_cast<Index>(linear_index(d, x, y, z));
        if (x + 1 < d.nx) out.edges.push_back({i, static_cast<Index>(i + sx), 1.0});
        if (y + 1 < d.ny) out.edges.push_back({i, static_cast<Index>(i + sy), 1.0});
        if (z + 1 < d.nz) out.edges.push_back({i, static_cast<Index>(i + sz), 1.0});
      }
    }
  }
  return out;
}

EdgeList weight_edges(const EdgeList& edges, const Volume& v, const EdgeWeightConfig& config) {
  config.validate();
  if (!(edges.dims == v.dims())) throw std::invalid_argument("edge list does not match volume");
  EdgeList out{edges.dims, edges.edges};
  const auto data = v.data();
#pragma omp parallel for schedule(static)
  for (std::size_t e = 0; e < out.edges.size(); ++e) {
    auto& edge = out.edges[e];
    edge.weight = config(data[edge.i], data[edge.j]);
  }
  return out;
}

std::shared_ptr<const SparsityPattern> SparsityPattern::from_edges(std::size_t order,
                                                                   std::span<const Edge> edges) {
  auto p = std::make_shared<SparsityPattern>();
  p->order = order;
  std::vector<std::size_t> degree(order, 1);
  for (const auto& e : edges) {
    if (e.i >= order || e.j >= order || e.i == e.j) throw std::invalid_argument("edge out of range");
    ++degree[e.i];
    ++degree[e.j];
  }
  p->row_ptr.assign(order + 1, 0);
  for (std::size_t i = 0; i < order; ++i) p->row_ptr[i + 1] = p->row_ptr[i] + degree[i];
  p->cols.resize(p->row_ptr[order]);
  std::vector<std::size_t> fill(p->row_ptr.begin(), p->row_ptr.end() - 1);
  for (std::size_t i = 0; i < order; ++i) p->cols[fill[i]++] = static_cast<Index>(i);
  for (const auto& e : edges) {
    p->cols[fill[e.i]++] = e.j;
    p->cols[fill[e.j]++] = e.i;
  }
  // Sort each row and drop duplicate columns (repeated edges).
  std::size_t write = 0;
  std::size_t row_start = 0;
  for (std::size_t i = 0; i < order; ++i) {
    const auto begin = p->cols.begin() + static_cast<std::ptrdiff_t>(row_start);
    const auto end = p->cols.begin() + static_cast<std::ptrdiff_t>(p->row_ptr[i + 1]);
    std::sort(begin, end);
    const auto last = std::unique(begin, end);
    row_start = p->row_ptr[i + 1];
    p->row_ptr[i + 1] = p->row_ptr[i] + static_cast<std::size_t>(last - begin);
    std::copy(begin, last, p->cols.begin() + static_cast<std::ptrdiff_t>(write));
    write += static_cast<std::size_t>(last - begin);
  }
  p->cols.resize(write);
  p->cols.shrink_to_fit();
  p->diag_pos.resize(order);
  for (std::size_t i = 0; i < order; ++i) p->diag_pos[i] = p->find(i, i);
  return p;
}

std::size_t SparsityPattern::find(std::size_t i, std::size_t j) const {
  const auto begin = cols.begin() + static_cast<std::ptrdiff_t>(row_ptr[i]);
  const auto end = cols.begin() + static_cast<std::ptrdiff_t>(row_ptr[i + 1]);
  const auto it = std::lower_bound(begin, end, static_cast<Index>(j));
  if (it == end || *it != j) return npos;
  return static_cast<std::size_t>(it - cols.begin());
}

SparseLaplacian::SparseLaplacian(std::shared_ptr<const SparsityPattern> pattern, std::vector<double> values)
    : pattern_(std::move(pattern)), values_(std::move(values)) {
  if (!pattern_ || values_.size() != pattern_->cols.size()) {
    throw std::invalid_argument("values do not match sparsity pattern");
  }
}

double SparseLaplacian::at(std::size_t i, std::size_t j) const {
  const auto pos = pattern_->find(i, j);
  return pos == SparsityPattern::npos ? 0.0 : values_[pos];
}

void SparseLaplacian::multiply(std::span<const double> x, std::span<double> y) const {
  const auto& p = *pattern_;
  if (x.size() != p.order || y.size() != p.order) throw std::invalid_argument("size mismatch");
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < p.order; ++i) {
    double acc = 0.0;
    for (std::size_t k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) acc += values_[k] * x[p.cols[k]];
    y[i] = acc;
  }
}

double SparseLaplacian::quadratic_form(std::span<const double> x) const {
  const auto& p = *pattern_;
  if (x.size() != p.order) throw std::invalid_argument("size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < p.order; ++i) {
    double acc = 0.0;
    for (std::size_t k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) acc += values_[k] * x[p.cols[k]];
    total += x[i] * acc;
  }
  return total;
}

std::vector<double> SparseLaplacian::to_dense() const {
  const auto& p = *pattern_;
  std::vector<double> dense(p.order * p.order, 0.0);
  for (std::size_t i = 0; i < p.order; ++i) {
    for (std::size_t k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) dense[i * p.order + p.cols[k]] = values_[k];
  }
  return dense;
}

SparseLaplacian assemble_laplacian(const EdgeList& edges) {
  return assemble_laplacian(edges, SparsityPattern::from_edges(edges.dims.count(), edges.edges));
}

SparseLaplacian assemble_laplacian(const EdgeList& edges, std::shared_ptr<const SparsityPattern> pattern) {
  const auto& p = *pattern;
  if (p.order != edges.dims.count()) throw std::invalid_argument("pattern order does not match edges");
  std::vector<double> values(p.cols.size(), 0.0);
  for (const auto& e : edges.edges) {
    const auto ij = p.find(e.i, e.j);
    const auto ji = p.find(e.j, e.i);
    if (ij == SparsityPattern::npos || ji == SparsityPattern::npos) {
      throw std::invalid_argument("edge missing from sparsity pattern");
    }
    values[ij] -= e.weight;
    values[ji] -= e.weight;
    values[p.diag_pos[e.i]] += e.weight;
    values[p.diag_pos[e.j]] += e.weight;
  }
  return {std::move(pattern), std::move(values)};
}

std::vector<EdgeWeightConfig> default_weight_configs() {
  return {EdgeWeightConfig::gaussian(50.0), EdgeWeightConfig::gaussian(100.0),
          EdgeWeightConfig::gaussian(150.0), EdgeWeightConfig::reciprocal(100.0, 1.0)};
}

LaplacianBank build_bank(const Volume& normalized, std::span<const EdgeWeightConfig> configs) {
  LaplacianBank bank;
  bank.lattice = normalized.dims();
  const EdgeList structure = build_edges(normalized);
  const auto pattern = SparsityPattern::from_edges(normalized.size(), structure.edges);
  for (const auto& config : configs) {
    bank.terms.push_back(assemble_laplacian(weight_edges(structure, normalized, config), pattern));
    bank.configs.push_back(config);
  }
  return bank;
}

SparseLaplacian weighted_sum(const LaplacianBank& bank, std::span<const double> weights) {
  if (weights.size() != bank.size()) throw std::invalid_argument("weight count does not match bank");
  if (bank.terms.empty()) throw std::invalid_argument("empty bank");
  const auto& pattern = bank.terms.front().shared_pattern();
  const bool shared = std::all_of(bank.terms.begin(), bank.terms.end(),
                                  [&](const SparseLaplacian& t) { return t.shared_pattern() == pattern; });
  if (!shared) {
    // Hand-assembled banks: rebuild over the union of all edges.
    EdgeList merged{Dims{bank.order(), 1, 1}, {}};
    for (std::size_t a = 0; a < bank.size(); ++a) {
      if (weights[a] == 0.0) continue;
      const auto& term = bank.terms[a];
      if (term.order() != bank.order()) throw std::invalid_argument("bank terms differ in order");
      const auto& p = term.pattern();
      for (std::size_t i = 0; i < p.order; ++i) {
        for (std::size_t k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) {
          if (p.cols[k] > i) {
            merged.edges.push_back({static_cast<Index>(i), p.cols[k], -weights[a] * term.values()[k]});
          }
        }
      }
    }
    return assemble_laplacian(merged);
  }
  std::vector<double> values(pattern->cols.size(), 0.0);
  for (std::size_t a = 0; a < bank.size(); ++a) {
    if (weights[a] == 0.0) continue;
    const auto v = bank.terms[a].values();
    for (std::size_t k = 0; k < values.size(); ++k) values[k] += weights[a] * v[k];
  }
  return {pattern, std::move(values)};
}

}  // namespace rwseg
