#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace rwseg {

/// Linear voxel index. Volumes are limited to 2^32 - 1 voxels so that edge
/// lists and sparse patterns can store 32-bit indices.
using Index = std::uint32_t;

struct Dims {
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::size_t nz = 0;

  std::size_t count() const { return nx * ny * nz; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

struct Spacing {
  double sx = 1.0;
  double sy = 1.0;
  double sz = 1.0;
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

/// x-fastest linearization shared by every module.
inline std::size_t linear_index(const Dims& d, std::size_t x, std::size_t y, std::size_t z) {
  return x + d.nx * (y + d.ny * z);
}

/// 3D scalar intensity grid. Immutable after construction.
class Volume {
 public:
  Volume(Dims dims, Spacing spacing, std::vector<double> data);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  std::span<const double> data() const { return data_; }
  std::size_t size() const { return data_.size(); }
  double operator[](std::size_t i) const { return data_[i]; }

 private:
  Dims dims_;
  Spacing spacing_;
  std::vector<double> data_;
};

/// Hard label assignments for a subset of voxels, ordered by voxel index.
class SeedMap {
 public:
  SeedMap() = default;
  explicit SeedMap(std::size_t num_labels) : num_labels_(num_labels) {}

  /// Throws std::invalid_argument on a duplicate index or label >= num_labels.
  void add(std::size_t index, std::size_t label);

  /// Throws FormatError if any index is outside [0, num_voxels).
  void validate(std::size_t num_voxels) const;

  std::size_t num_labels() const { return num_labels_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::map<std::size_t, std::size_t>& entries() const { return entries_; }

  friend bool operator==(const SeedMap&, const SeedMap&) = default;

 private:
  std::size_t num_labels_ = 0;
  std::map<std::size_t, std::size_t> entries_;
};

/// Per-voxel label probabilities, label-fastest. Every row lies on the
/// probability simplex (entries in [0,1], row sum within kRowSumTolerance).
class SoftSegmentation {
 public:
  static constexpr double kRowSumTolerance = 1e-9;

  SoftSegmentation(std::size_t num_voxels, std::size_t num_labels, std::vector<double> rows);

  static SoftSegmentation uniform(std::size_t num_voxels, std::size_t num_labels);
  static SoftSegmentation one_hot(std::span<const std::uint32_t> labels, std::size_t num_labels);

  std::size_t num_voxels() const { return num_voxels_; }
  std::size_t num_labels() const { return num_labels_; }
  std::span<const double> row(std::size_t voxel) const {
    return {rows_.data() + voxel * num_labels_, num_labels_};
  }
  double at(std::size_t voxel, std::size_t label) const { return rows_[voxel * num_labels_ + label]; }
  std::span<const double> data() const { return rows_; }

  friend bool operator==(const SoftSegmentation&, const SoftSegmentation&) = default;

 private:
  std::size_t num_voxels_;
  std::size_t num_labels_;
  std::vector<double> rows_;
};

/// Diagonal per-voxel weighting of a prior distance. An empty diagonal means
/// identity.
class PriorWeighting {
 public:
  PriorWeighting() = default;
  explicit PriorWeighting(std::vector<double> diagonal);

  static PriorWeighting identity() { return {}; }

  bool is_identity() const { return diagonal_.empty(); }
  double operator[](std::size_t voxel) const { return diagonal_.empty() ? 1.0 : diagonal_[voxel]; }
  std::size_t size() const { return diagonal_.size(); }

 private:
  std::vector<double> diagonal_;
};

/// Divides intensities by their population standard deviation.
/// Throws FormatError("degenerate volume") for fewer than two voxels or zero
/// spread.
Volume normalize_intensities(const Volume& v);

// --- RVOL / RSEG files -----------------------------------------------------

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);

struct SegmentationFile {
  Dims dims;
  SoftSegmentation segmentation;
};

/// Stored values are 32-bit floats; rows are accepted when their sum is within
/// kFileRowSumTolerance of one and are then renormalized in double precision.
inline constexpr double kFileRowSumTolerance = 1e-5;

SegmentationFile load_soft_segmentation(const std::filesystem::path& path);
void save_soft_segmentation(const SoftSegmentation& s, const Dims& dims,
                            const std::filesystem::path& path);

/// Hard label maps are RVOL files whose values are integral label ids.
std::vector<std::uint32_t> load_label_map(const std::filesystem::path& path, const Dims& expected,
                                          std::size_t num_labels);

// --- SeedMap JSON ----------------------------------------------------------

SeedMap seed_map_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const SeedMap& seeds);
SeedMap load_seed_map(const std::filesystem::path& path);
void save_seed_map(const SeedMap& seeds, const std::filesystem::path& path);

}  // namespace rwseg
