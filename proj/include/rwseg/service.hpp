#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "rwseg/lattice.hpp"
#include "rwseg/rw_solver.hpp"
#include "rwseg/volume.hpp"

namespace httplib {
class Server;
}

namespace rwseg {

enum class SliceAxis { x, y, z };

/// A 2D cut through a voxel grid, row-major: for axis z the rows run over y
/// and the columns over x; for y, rows over z and columns over x; for x,
/// rows over z and columns over y.
struct Slice {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;
};

/// Throws std::out_of_range for an index past the axis extent.
std::vector<std::size_t> slice_voxels(const Dims& dims, SliceAxis axis, std::size_t index);

/// 8-bit grayscale PNG, values mapped linearly from [lo, hi] to [0, 255].
std::string encode_png(const Slice& slice, double lo, double hi);

/// The single interactive session behind `seg serve`: one volume, one seed
/// map, the last segmentation and the active weights. Reads run concurrently;
/// seed updates and storing a result take the session lock exclusively, and
/// at most one solve runs at a time.
class SegmentationService {
 public:
  SegmentationService(Volume volume, std::size_t num_labels, SolveOptions solve = {});

  /// Registers the /api routes on `server`.
  void attach(httplib::Server& server);

  std::size_t num_labels() const { return num_labels_; }
  const Volume& volume() const { return volume_; }
  SeedMap seeds() const;
  std::optional<SoftSegmentation> segmentation() const;

 private:
  Volume volume_;
  std::size_t num_labels_;
  SolveOptions solve_options_;
  std::shared_ptr<const LaplacianBank> bank_;
  double lo_ = 0.0;
  double hi_ = 0.0;

  mutable std::shared_mutex session_;
  std::mutex solving_;
  SeedMap seeds_;
  WeightVector weights_;
  std::optional<SoftSegmentation> segmentation_;
};

}  // namespace rwseg
