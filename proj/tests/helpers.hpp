#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "rwseg/lattice.hpp"
#include "rwseg/rw_solver.hpp"
#include "rwseg/volume.hpp"

namespace testing {

using namespace rwseg;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("rwseg_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline Volume random_volume(const Dims& d, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  std::vector<double> v(d.count());
  for (auto& x : v) x = g(rng);
  return Volume(d, {}, std::move(v));
}

inline SoftSegmentation random_rows(std::size_t n, std::size_t S, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(1.0, 1.0);
  std::vector<double> rows(n * S);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t s = 0; s < S; ++s) total += rows[i * S + s] = gamma(rng) + 1e-12;
    for (std::size_t s = 0; s < S; ++s) rows[i * S + s] /= total;
  }
  return SoftSegmentation(n, S, std::move(rows));
}

// A feasible point for `p`: random rows with seeded rows one-hot.
inline SoftSegmentation random_feasible(const RWProblem& p, std::mt19937_64& rng) {
  const std::size_t n = p.num_voxels();
  const std::size_t S = p.num_labels;
  SoftSegmentation r = random_rows(n, S, rng);
  std::vector<double> rows(r.data().begin(), r.data().end());
  for (const auto& [i, l] : p.seeds.entries()) {
    for (std::size_t s = 0; s < S; ++s) rows[i * S + s] = s == l ? 1.0 : 0.0;
  }
  return SoftSegmentation(n, S, std::move(rows));
}

struct InstanceSpec {
  Dims dims{3, 3, 2};
  std::size_t labels = 2;
  std::size_t seeds = 2;   // distinct random seeded voxels
  std::size_t priors = 0;  // priors with random targets and weighting
  bool random_weights = true;
};

// Random solvable problem: seeds cover every label when there are no priors.
inline RWProblem random_problem(const InstanceSpec& spec, std::mt19937_64& rng) {
  const Volume v = normalize_intensities(random_volume(spec.dims, rng));
  RWProblem p;
  p.bank = std::make_shared<LaplacianBank>(build_default_bank(v));
  p.num_labels = spec.labels;
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (std::size_t k = 0; k < spec.priors; ++k) {
    std::vector<double> omega(v.size());
    for (auto& w : omega) w = u(rng);
    p.priors.push_back({random_rows(v.size(), spec.labels, rng), PriorWeighting(std::move(omega))});
  }
  p.weights.laplacian_weights.assign(p.bank->size(), 1.0);
  p.weights.prior_weights.assign(spec.priors, 1.0);
  if (spec.random_weights) {
    for (auto& w : p.weights.laplacian_weights) w = u(rng);
    for (auto& w : p.weights.prior_weights) w = u(rng);
  }
  p.seeds = SeedMap(spec.labels);
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t count = std::min(spec.seeds, order.size());
  for (std::size_t k = 0; k < count; ++k) p.seeds.add(order[k], k % spec.labels);
  return p;
}

// Small instance with one prior and a random linear term, sized so that the
// support-enumeration oracle stays cheap (at most 3^8 or 7^6 supports).
struct LinearInstance {
  RWProblem problem;
  std::vector<double> linear;
};

inline LinearInstance small_oracle_instance(std::size_t index, std::mt19937_64& rng, double linear_scale = 1.0) {
  static const Dims choices[] = {{2, 1, 1}, {2, 2, 1}, {2, 2, 2}, {1, 2, 2}, {2, 1, 2}};
  const Dims d = choices[index % 5];
  const std::size_t S = 2 + rng() % 2;
  const std::size_t n = d.count();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  LinearInstance out;
  RWProblem& p = out.problem;
  p.bank = std::make_shared<LaplacianBank>(build_default_bank(normalize_intensities(random_volume(d, rng))));
  p.num_labels = S;
  for (std::size_t a = 0; a < p.bank->size(); ++a) p.weights.laplacian_weights.push_back(2.0 * u(rng));
  std::vector<double> omega(n);
  for (auto& w : omega) w = 0.1 + 0.9 * u(rng);
  p.priors.push_back({random_rows(n, S, rng), PriorWeighting(std::move(omega))});
  p.weights.prior_weights = {0.2 + u(rng)};
  p.seeds = SeedMap(S);
  std::size_t seeds = rng() % 3;
  if (S == 3 && n == 8) seeds = std::max<std::size_t>(seeds, 2);
  seeds = std::min(seeds, n - 1);
  while (p.seeds.size() < seeds) {
    const std::size_t i = rng() % n;
    if (!p.seeds.entries().count(i)) p.seeds.add(i, rng() % S);
  }
  out.linear.resize(n * S);
  for (auto& c : out.linear) c = linear_scale * (2.0 * u(rng) - 1.0);
  return out;
}

inline double max_abs_diff(const SoftSegmentation& a, const SoftSegmentation& b) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.data().size(); ++k) worst = std::max(worst, std::abs(a.data()[k] - b.data()[k]));
  return worst;
}

}  // namespace testing
