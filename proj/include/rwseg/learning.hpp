#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "json.hpp"
#include "rwseg/aci.hpp"
#include "rwseg/rw_solver.hpp"

namespace rwseg {

/// One training pair: the energy terms derived from an image, its seeds,
/// and the hard ground truth z (one label per voxel).
struct TrainingSample {
  Dims dims;
  std::shared_ptr<const LaplacianBank> bank;
  std::vector<PriorTerm> priors;
  SeedMap seeds;
  std::vector<std::uint32_t> truth;
  std::size_t num_labels = 2;

  /// Throws std::invalid_argument on inconsistent sizes, labels out of
  /// range, or a seed that disagrees with the ground truth.
  void validate() const;
};

/// mean: (1/|V|) sum_i (1 - y[i, z_i]); sum: the same without 1/|V|, which
/// keeps the loss on the scale of the features for larger volumes.
enum class LossNormalization { mean, sum };

struct LearnConfig {
  double lambda = 1e-3;
  LossNormalization normalization = LossNormalization::mean;
  std::size_t iterations = 50;
  double eta0 = 1.0;        // step eta0 / (1 + t)
  double min_weight = 0.0;  // projection floor for every weight
  PartitionScheme partition = PartitionScheme::edge;
  AciOptions aci{};
  SolveOptions solve{};
};

double loss(std::span<const std::uint32_t> truth, const SoftSegmentation& y,
            LossNormalization normalization = LossNormalization::mean);

/// [y^T L_a y for each bank term] ++ [||y - t_b||^2_{Omega_b} for each prior].
std::vector<double> feature_map(const LaplacianBank& bank, std::span<const PriorTerm> priors,
                                const SoftSegmentation& y);
std::vector<double> feature_map(const TrainingSample& sample, const SoftSegmentation& y);

RWProblem make_problem(const TrainingSample& sample, const WeightVector& weights);

/// Linear coefficients of -loss without its constant: 1/|V| (mean) or 1
/// (sum) on every ground-truth entry.
std::vector<double> loss_linear_term(const TrainingSample& sample,
                                     LossNormalization normalization = LossNormalization::mean);

struct LossAugmentedResult {
  SoftSegmentation y;
  double value = 0.0;  // w . psi(y) - loss(z, y)
};

/// argmin over per-voxel simplexes (seeds fixed) of w . psi(y) - loss(z, y),
/// solved with solve_aci. The plain inference output and one-hot(z) are
/// also scored and the lowest of the three is returned, so the value never
/// exceeds either of theirs.
LossAugmentedResult loss_augmented_inference(const TrainingSample& sample, const WeightVector& weights,
                                             const LearnConfig& config, const SoftSegmentation* plain = nullptr);

struct SampleEvaluation {
  double hinge = 0.0;  // w . psi(z) - min (w . psi(y) - loss(z, y))
  double risk = 0.0;   // loss(z, plain inference)
  std::vector<double> truth_features;
  std::vector<double> violator_features;
};

struct ObjectiveEvaluation {
  double objective = 0.0;  // lambda ||w||^2 + mean hinge
  double bound = 0.0;      // mean hinge
  double risk = 0.0;       // mean risk
  std::vector<double> subgradient;
  std::vector<SampleEvaluation> samples;
};

ObjectiveEvaluation objective_and_subgradient(std::span<const TrainingSample> dataset, const WeightVector& weights,
                                              const LearnConfig& config);

struct TrainingIteration {
  std::size_t iteration = 0;
  double objective = 0.0;
  double bound = 0.0;
  double risk = 0.0;
  std::vector<double> hinges;  // per sample
  std::vector<double> risks;   // per sample
  WeightVector weights;        // weights the row was evaluated at
};

struct TrainingResult {
  WeightVector weights;
  std::vector<TrainingIteration> trace;
};

/// Projected subgradient descent from `initial`. Throws std::invalid_argument
/// if a projection leaves every weight at zero.
TrainingResult train(std::span<const TrainingSample> dataset, const WeightVector& initial, const LearnConfig& config);

/// CSV with header iter,objective,bound,risk.
void write_training_trace(std::span<const TrainingIteration> trace, const std::filesystem::path& path);

nlohmann::json to_json(const WeightVector& w);
WeightVector weights_from_json(const nlohmann::json& doc);
WeightVector load_weights(const std::filesystem::path& path);
void save_weights(const WeightVector& w, const std::filesystem::path& path);

/// Reads a JSON list of {"volume", "labels", "seeds"?, "priors"?}. Relative
/// paths resolve against the manifest's directory. Each prior is a path to
/// an RSEG target or {"target": path, "omega": path-to-RVOL}. Every sample
/// gets the default Laplacian bank of its normalized volume.
std::vector<TrainingSample> load_manifest(const std::filesystem::path& path);

}  // namespace rwseg
