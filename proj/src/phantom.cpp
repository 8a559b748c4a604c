#include "rwseg/phantom.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

namespace rwseg {

namespace {

void add_blob(SeedMap& seeds, const Dims& d, std::size_t cx, std::size_t cy, std::size_t cz, std::size_t side,
              std::size_t label) {
  const auto lo = [&](std::size_t c) { return c >= side / 2 ? c - side / 2 : 0; };
  for (std::size_t z = lo(cz); z < std::min(d.nz, lo(cz) + side); ++z) {
    for (std::size_t y = lo(cy); y < std::min(d.ny, lo(cy) + side); ++y) {
      for (std::size_t x = lo(cx); x < std::min(d.nx, lo(cx) + side); ++x) {
        seeds.add(linear_index(d, x, y, z), label);
      }
    }
  }
}

}  // namespace

Phantom make_two_region_phantom(const PhantomConfig& config) {
  const Dims& d = config.dims;
  if (d.nx < 4) throw std::invalid_argument("phantom needs nx >= 4");
  std::mt19937_64 rng(config.rng_seed);
  std::normal_distribution<double> noise(0.0, config.noise_sd);
  std::vector<double> data(d.count());
  std::vector<std::uint32_t> mask(d.count());
  for (std::size_t z = 0; z < d.nz; ++z) {
    for (std::size_t y = 0; y < d.ny; ++y) {
      for (std::size_t x = 0; x < d.nx; ++x) {
        const auto i = linear_index(d, x, y, z);
        mask[i] = x < d.nx / 2 ? 0u : 1u;
        data[i] = (mask[i] == 0 ? config.mean0 : config.mean1) + noise(rng);
      }
    }
  }
  SeedMap seeds(2);
  add_blob(seeds, d, d.nx / 4, d.ny / 2, d.nz / 2, config.seed_blob, 0);
  add_blob(seeds, d, (3 * d.nx) / 4, d.ny / 2, d.nz / 2, config.seed_blob, 1);
  return {Volume(d, Spacing{}, std::move(data)), std::move(mask), std::move(seeds)};
}

std::vector<double> dice_scores(const SoftSegmentation& y, const std::vector<std::uint32_t>& truth) {
  if (truth.size() != y.num_voxels()) throw std::invalid_argument("size mismatch");
  const std::size_t S = y.num_labels();
  std::vector<double> inter(S, 0.0), pred(S, 0.0), ref(S, 0.0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto r = y.row(i);
    const auto label = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
    pred[label] += 1;
    ref[truth[i]] += 1;
    if (label == truth[i]) inter[label] += 1;
  }
  std::vector<double> dice(S);
  for (std::size_t s = 0; s < S; ++s) dice[s] = pred[s] + ref[s] > 0 ? 2 * inter[s] / (pred[s] + ref[s]) : 1.0;
  return dice;
}

}  // namespace rwseg
