#pragma once

#include <cstdint>
#include <vector>

#include "rwseg/volume.hpp"

namespace rwseg {

/// Synthetic two-class volume: voxels with x < nx/2 belong to class 0, the
/// rest to class 1. Intensities are class means plus i.i.d. Gaussian noise.
struct PhantomConfig {
  Dims dims{32, 32, 32};
  double mean0 = 0.0;
  double mean1 = 3.0;
  double noise_sd = 1.0;
  std::size_t seed_blob = 5;  // side of the cubic seed blobs
  std::uint64_t rng_seed = 1;
};

struct Phantom {
  Volume volume;
  std::vector<std::uint32_t> mask;
  /// One blob per class, centered at x = nx/4 and x = 3nx/4 in the mid-plane.
  SeedMap seeds;
};

Phantom make_two_region_phantom(const PhantomConfig& config);

/// Per-label Dice coefficient of argmax(y) against `truth`.
std::vector<double> dice_scores(const SoftSegmentation& y, const std::vector<std::uint32_t>& truth);

}  // namespace rwseg
