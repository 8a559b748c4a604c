#include "rwseg/learning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

#include "rwseg/error.hpp"

namespace rwseg {

void TrainingSample::validate() const {
  if (!bank || bank->size() == 0) throw std::invalid_argument("sample has no Laplacian bank");
  const std::size_t n = bank->order();
  if (dims.count() != n) throw std::invalid_argument("sample dims do not match its bank");
  if (num_labels < 2) throw std::invalid_argument("need at least two labels");
  if (truth.size() != n) throw std::invalid_argument("ground truth does not cover every voxel");
  for (const auto z : truth) {
    if (z >= num_labels) throw std::invalid_argument("ground-truth label out of range");
  }
  if (seeds.num_labels() != num_labels) throw std::invalid_argument("seed map label count differs");
  for (const auto& [index, label] : seeds.entries()) {
    if (index >= n) throw std::invalid_argument("seed index out of range");
    if (truth[index] != label) throw std::invalid_argument("seed disagrees with ground truth");
  }
  for (const auto& prior : priors) {
    if (prior.target.num_voxels() != n || prior.target.num_labels() != num_labels) {
      throw std::invalid_argument("prior target size mismatch");
    }
    if (!prior.weighting.is_identity() && prior.weighting.size() != n) {
      throw std::invalid_argument("prior weighting size mismatch");
    }
  }
}

double loss(std::span<const std::uint32_t> truth, const SoftSegmentation& y, LossNormalization normalization) {
  if (truth.size() != y.num_voxels() || truth.empty()) throw std::invalid_argument("size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= y.num_labels()) throw std::invalid_argument("label out of range");
    total += 1.0 - y.at(i, truth[i]);
  }
  return normalization == LossNormalization::mean ? total / static_cast<double>(truth.size()) : total;
}

std::vector<double> feature_map(const LaplacianBank& bank, std::span<const PriorTerm> priors,
                                const SoftSegmentation& y) {
  if (y.num_voxels() != bank.order()) throw std::invalid_argument("size mismatch");
  const std::size_t S = y.num_labels();
  const std::size_t n = y.num_voxels();
  std::vector<double> psi;
  psi.reserve(bank.size() + priors.size());
  std::vector<double> column(n);
  for (const auto& term : bank.terms) {
    double total = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t i = 0; i < n; ++i) column[i] = y.at(i, s);
      total += term.quadratic_form(column);
    }
    psi.push_back(std::max(total, 0.0));
  }
  for (const auto& prior : priors) {
    if (prior.target.num_voxels() != n || prior.target.num_labels() != S) throw std::invalid_argument("size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d2 = 0.0;
      for (std::size_t s = 0; s < S; ++s) {
        const double d = y.at(i, s) - prior.target.at(i, s);
        d2 += d * d;
      }
      total += prior.weighting[i] * d2;
    }
    psi.push_back(total);
  }
  return psi;
}

std::vector<double> feature_map(const TrainingSample& sample, const SoftSegmentation& y) {
  return feature_map(*sample.bank, sample.priors, y);
}

RWProblem make_problem(const TrainingSample& sample, const WeightVector& weights) {
  RWProblem p{sample.bank, weights, sample.priors, sample.seeds, sample.num_labels};
  p.validate();
  return p;
}

std::vector<double> loss_linear_term(const TrainingSample& sample, LossNormalization normalization) {
  const std::size_t n = sample.truth.size();
  const double c = normalization == LossNormalization::mean ? 1.0 / static_cast<double>(n) : 1.0;
  std::vector<double> linear(n * sample.num_labels, 0.0);
  for (std::size_t i = 0; i < n; ++i) linear[i * sample.num_labels + sample.truth[i]] = c;
  return linear;
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double total = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) total += a[k] * b[k];
  return total;
}

double loss_augmented_value(const TrainingSample& sample, const std::vector<double>& w, const SoftSegmentation& y,
                            LossNormalization normalization) {
  return dot(w, feature_map(sample, y)) - loss(sample.truth, y, normalization);
}

}  // namespace

LossAugmentedResult loss_augmented_inference(const TrainingSample& sample, const WeightVector& weights,
                                             const LearnConfig& config, const SoftSegmentation* plain) {
  sample.validate();
  const RWProblem problem = make_problem(sample, weights);
  const std::vector<double> w = weights.flattened();
  const std::vector<double> linear = loss_linear_term(sample, config.normalization);
  const Partition partition = build_partition(build_edges(sample.dims), config.partition);
  AciResult aci = solve_aci(problem, partition, config.aci, linear);

  LossAugmentedResult best{std::move(aci.segmentation), 0.0};
  best.value = loss_augmented_value(sample, w, best.y, config.normalization);
  auto consider = [&](SoftSegmentation candidate) {
    const double value = loss_augmented_value(sample, w, candidate, config.normalization);
    if (value < best.value) best = {std::move(candidate), value};
  };
  if (plain) consider(*plain);
  consider(SoftSegmentation::one_hot(sample.truth, sample.num_labels));
  return best;
}

ObjectiveEvaluation objective_and_subgradient(std::span<const TrainingSample> dataset, const WeightVector& weights,
                                              const LearnConfig& config) {
  if (dataset.empty()) throw std::invalid_argument("empty dataset");
  if (!(config.lambda > 0.0)) throw std::invalid_argument("lambda must be positive");
  const std::vector<double> w = weights.flattened();
  const std::size_t dim = w.size();
  ObjectiveEvaluation out;
  out.samples.resize(dataset.size());
  for (std::size_t k = 0; k < dataset.size(); ++k) {
    const auto& sample = dataset[k];
    sample.validate();
    if (sample.bank->size() + sample.priors.size() != dim) throw std::invalid_argument("term count differs from w");
    const SoftSegmentation plain = solve(make_problem(sample, weights), config.solve).segmentation;
    const LossAugmentedResult violator = loss_augmented_inference(sample, weights, config, &plain);
    const SoftSegmentation truth = SoftSegmentation::one_hot(sample.truth, sample.num_labels);
    auto& eval = out.samples[k];
    eval.truth_features = feature_map(sample, truth);
    eval.violator_features = feature_map(sample, violator.y);
    eval.hinge = std::max(0.0, dot(w, eval.truth_features) - violator.value);
    eval.risk = loss(sample.truth, plain, config.normalization);
  }
  const double inv_n = 1.0 / static_cast<double>(dataset.size());
  out.subgradient.assign(dim, 0.0);
  double norm2 = 0.0;
  for (std::size_t a = 0; a < dim; ++a) {
    norm2 += w[a] * w[a];
    out.subgradient[a] = 2.0 * config.lambda * w[a];
  }
  for (const auto& eval : out.samples) {
    out.bound += inv_n * eval.hinge;
    out.risk += inv_n * eval.risk;
    if (eval.hinge <= 0.0) continue;  // flat side of the hinge
    for (std::size_t a = 0; a < dim; ++a) {
      out.subgradient[a] += inv_n * (eval.truth_features[a] - eval.violator_features[a]);
    }
  }
  out.objective = config.lambda * norm2 + out.bound;
  return out;
}

TrainingResult train(std::span<const TrainingSample> dataset, const WeightVector& initial, const LearnConfig& config) {
  if (dataset.empty()) throw std::invalid_argument("empty dataset");
  if (!(config.eta0 > 0.0)) throw std::invalid_argument("eta0 must be positive");
  if (!(config.min_weight >= 0.0)) throw std::invalid_argument("min_weight must be nonnegative");
  const std::size_t bank_size = initial.laplacian_weights.size();
  initial.validate(bank_size, initial.prior_weights.size());
  TrainingResult result{initial, {}};
  std::vector<double> w = initial.flattened();
  for (std::size_t t = 0; t < config.iterations; ++t) {
    const WeightVector current = WeightVector::from_flat(w, bank_size);
    const ObjectiveEvaluation eval = objective_and_subgradient(dataset, current, config);
    TrainingIteration row{t, eval.objective, eval.bound, eval.risk, {}, {}, current};
    for (const auto& s : eval.samples) {
      row.hinges.push_back(s.hinge);
      row.risks.push_back(s.risk);
    }
    result.trace.push_back(std::move(row));

    const double eta = config.eta0 / (1.0 + static_cast<double>(t));
    bool any_positive = false;
    for (std::size_t a = 0; a < w.size(); ++a) {
      w[a] = std::max(config.min_weight, w[a] - eta * eval.subgradient[a]);
      any_positive = any_positive || w[a] > 0.0;
    }
    if (!any_positive) {
      throw std::invalid_argument("every weight was projected to zero at iteration " + std::to_string(t) +
                                  "; reduce eta0 or set a positive min_weight");
    }
  }
  result.weights = WeightVector::from_flat(w, bank_size);
  return result;
}

void write_training_trace(std::span<const TrainingIteration> trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "iter,objective,bound,risk\n";
  for (const auto& row : trace) out << row.iteration << ',' << row.objective << ',' << row.bound << ',' << row.risk << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

nlohmann::json to_json(const WeightVector& w) {
  return {{"laplacian_weights", w.laplacian_weights}, {"prior_weights", w.prior_weights}};
}

WeightVector weights_from_json(const nlohmann::json& doc) {
  try {
    WeightVector w{doc.at("laplacian_weights").get<std::vector<double>>(),
                   doc.contains("prior_weights") ? doc.at("prior_weights").get<std::vector<double>>()
                                                 : std::vector<double>{}};
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed weights: ") + e.what());
  }
}

WeightVector load_weights(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed weights: ") + e.what());
  }
  return weights_from_json(doc);
}

void save_weights(const WeightVector& w, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(w).dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

namespace {

struct PriorSpec {
  std::filesystem::path target;
  std::filesystem::path omega;  // empty for identity
};

struct SampleSpec {
  std::filesystem::path volume, labels, seeds;
  std::vector<PriorSpec> priors;
};

std::filesystem::path resolve(const std::filesystem::path& base, const nlohmann::json& value) {
  const std::filesystem::path p = value.get<std::string>();
  return p.is_absolute() ? p : base / p;
}

}  // namespace

std::vector<TrainingSample> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  nlohmann::json doc;
  std::vector<SampleSpec> specs;
  const std::filesystem::path base = path.parent_path();
  try {
    in >> doc;
    if (!doc.is_array() || doc.empty()) throw FormatError("manifest must be a nonempty JSON list");
    for (const auto& entry : doc) {
      SampleSpec spec{resolve(base, entry.at("volume")), resolve(base, entry.at("labels")), {}, {}};
      if (entry.contains("seeds")) spec.seeds = resolve(base, entry.at("seeds"));
      if (entry.contains("priors")) {
        for (const auto& prior : entry.at("priors")) {
          if (prior.is_string()) {
            spec.priors.push_back({resolve(base, prior), {}});
          } else {
            spec.priors.push_back({resolve(base, prior.at("target")),
                                   prior.contains("omega") ? resolve(base, prior.at("omega")) : std::filesystem::path{}});
          }
        }
      }
      specs.push_back(std::move(spec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }

  std::vector<TrainingSample> out;
  std::size_t labels_declared = 0;  // from seed maps or prior files
  std::size_t labels_seen = 0;      // 1 + largest ground-truth label
  for (const auto& spec : specs) {
    const Volume volume = load_volume(spec.volume);
    TrainingSample sample;
    sample.dims = volume.dims();
    sample.bank = std::make_shared<LaplacianBank>(build_default_bank(normalize_intensities(volume)));
    sample.truth = load_label_map(spec.labels, volume.dims(), std::numeric_limits<std::uint32_t>::max());
    for (const auto z : sample.truth) labels_seen = std::max<std::size_t>(labels_seen, z + 1);
    if (!spec.seeds.empty()) {
      sample.seeds = load_seed_map(spec.seeds);
      sample.seeds.validate(volume.size());
      labels_declared = std::max(labels_declared, sample.seeds.num_labels());
    }
    for (const auto& prior : spec.priors) {
      SegmentationFile target = load_soft_segmentation(prior.target);
      if (!(target.dims == volume.dims())) throw FormatError("prior dimensions do not match volume");
      labels_declared = std::max(labels_declared, target.segmentation.num_labels());
      PriorWeighting weighting;
      if (!prior.omega.empty()) {
        const Volume omega = load_volume(prior.omega);
        if (!(omega.dims() == volume.dims())) throw FormatError("prior weighting dimensions do not match volume");
        weighting = PriorWeighting(std::vector<double>(omega.data().begin(), omega.data().end()));
      }
      sample.priors.push_back({std::move(target.segmentation), std::move(weighting)});
    }
    out.push_back(std::move(sample));
  }
  const std::size_t labels = std::max<std::size_t>({labels_declared, labels_seen, 2});
  for (auto& sample : out) {
    if (sample.seeds.num_labels() == 0) sample.seeds = SeedMap(labels);
    sample.num_labels = labels;
    try {
      sample.validate();
    } catch (const std::invalid_argument& e) {
      throw FormatError(std::string("inconsistent training sample: ") + e.what());
    }
    if (sample.priors.size() != out.front().priors.size()) throw FormatError("samples differ in prior count");
  }
  return out;
}

}  // namespace rwseg
