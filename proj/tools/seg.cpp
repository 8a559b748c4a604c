// seg: command-line front end for random walker segmentation, weight
// learning, constrained inference and the interactive HTTP service.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rwseg/aci.hpp"
#include "rwseg/error.hpp"
#include "rwseg/learning.hpp"
#include "rwseg/phantom.hpp"
#include "rwseg/service.hpp"

// After Eigen: <resolv.h> defines a macro named _res.
#include "httplib.h"

namespace fs = std::filesystem;
using namespace rwseg;

namespace {

constexpr int kBadInput = 2;
constexpr int kSolverFailure = 3;

struct ProblemFlags {
  std::string volume;
  std::string seeds;
  std::vector<std::string> priors;
  std::vector<double> prior_weights;
  std::vector<double> betas;
  std::optional<double> recip_beta;
  std::optional<double> eps;
  std::string weights;
  std::size_t labels = 0;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--volume", volume, "Input volume (RVOL)")->required()->check(CLI::ExistingFile);
    cmd.add_option("--seeds", seeds, "Seed map (JSON)")->check(CLI::ExistingFile);
    cmd.add_option("--prior", priors, "Prior target (RSEG); repeatable")->check(CLI::ExistingFile);
    cmd.add_option("--prior-weight", prior_weights, "Weight of each --prior, in order");
    cmd.add_option("--beta", betas, "Gaussian edge-weight betas (replaces 50,100,150)")->delimiter(',');
    cmd.add_option("--recip-beta", recip_beta, "Reciprocal edge-weight beta (default 100)");
    cmd.add_option("--eps", eps, "Reciprocal edge-weight epsilon (default 1)");
    cmd.add_option("--weights", weights, "Weight vector (JSON)")->check(CLI::ExistingFile);
    cmd.add_option("--labels", labels, "Label count when neither seeds nor priors fix it");
  }

  RWProblem build() const {
    const Volume raw = load_volume(volume);
    const std::size_t n = raw.size();
    RWProblem p;

    std::vector<EdgeWeightConfig> configs;
    for (const double b : betas.empty() ? std::vector<double>{50.0, 100.0, 150.0} : betas) {
      configs.push_back(EdgeWeightConfig::gaussian(b));
    }
    configs.push_back(EdgeWeightConfig::reciprocal(recip_beta.value_or(100.0), eps.value_or(1.0)));
    for (const auto& c : configs) c.validate();
    p.bank = std::make_shared<LaplacianBank>(build_bank(normalize_intensities(raw), configs));

    for (const auto& path : priors) {
      SegmentationFile f = load_soft_segmentation(path);
      if (!(f.dims == raw.dims())) throw FormatError("prior " + path + " does not match the volume dimensions");
      p.priors.push_back({std::move(f.segmentation), {}});
    }
    if (!seeds.empty()) {
      p.seeds = load_seed_map(seeds);
      p.seeds.validate(n);
    }
    if (seeds.empty() && priors.empty()) throw FormatError("need --seeds or at least one --prior");

    p.num_labels = !seeds.empty() ? p.seeds.num_labels() : p.priors.front().target.num_labels();
    if (labels != 0 && labels != p.num_labels) throw FormatError("--labels disagrees with the seeds or priors");
    if (seeds.empty()) p.seeds = SeedMap(p.num_labels);

    WeightVector w;
    if (!weights.empty()) w = load_weights(weights);
    if (w.laplacian_weights.empty()) w.laplacian_weights.assign(configs.size(), 1.0);
    if (!prior_weights.empty()) {
      w.prior_weights = prior_weights;
    } else if (w.prior_weights.empty()) {
      w.prior_weights.assign(p.priors.size(), 1.0);
    }
    try {
      w.validate(configs.size(), p.priors.size());
      p.weights = std::move(w);
      p.validate();
    } catch (const std::invalid_argument& e) {
      throw FormatError(e.what());
    }
    return p;
  }
};

SolveOptions solve_options(double tol, std::size_t max_iter) {
  SolveOptions o;
  o.tol = tol;
  o.max_iter = max_iter;
  return o;
}

PartitionScheme parse_scheme(const std::string& s) { return s == "line" ? PartitionScheme::line : PartitionScheme::edge; }

fs::path sibling(const fs::path& out, const std::string& suffix) {
  fs::path p = out;
  p.replace_extension(suffix);
  return p;
}

int run_segment(const ProblemFlags& flags, double tol, std::size_t max_iter, const std::string& out) {
  const RWProblem problem = flags.build();
  const auto start = std::chrono::steady_clock::now();
  const SolveReport report = solve(problem, solve_options(tol, max_iter));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  save_soft_segmentation(report.segmentation, load_volume(flags.volume).dims(), out);
  const std::size_t iterations =
      report.iterations.empty() ? 0 : *std::max_element(report.iterations.begin(), report.iterations.end());
  std::printf("solve: %.3f s, %zu CG iterations, max relative residual %.3g\n", seconds, iterations,
              report.max_relative_residual);
  return 0;
}

int run_aci(const ProblemFlags& flags, const std::string& scheme, const AciOptions& options, const std::string& out,
            std::string diagnostics) {
  const RWProblem problem = flags.build();
  const Dims dims = load_volume(flags.volume).dims();
  const Partition partition = build_partition(build_edges(dims), parse_scheme(scheme));
  const auto start = std::chrono::steady_clock::now();
  const AciResult result = solve_aci(problem, partition, options);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  save_soft_segmentation(result.segmentation, dims, out);
  if (diagnostics.empty()) diagnostics = sibling(out, ".aci.csv").string();
  write_aci_diagnostics(result.diagnostics, diagnostics);
  const auto& last = result.diagnostics.trace.back();
  std::printf("aci: %.3f s, %zu iterations, %s, energy %.10g, dual %.10g, disagreement %.3g\n", seconds,
              last.iteration, result.diagnostics.converged ? "converged" : "not converged", result.energy,
              last.dual_value, last.max_disagreement);
  return 0;
}

int run_learn(const std::string& manifest, LearnConfig config, const std::string& initial, const std::string& out,
              std::string trace) {
  const std::vector<TrainingSample> dataset = load_manifest(manifest);
  WeightVector w;
  if (!initial.empty()) {
    w = load_weights(initial);
  } else {
    w.laplacian_weights.assign(dataset.front().bank->size(), 1.0);
    w.prior_weights.assign(dataset.front().priors.size(), 1.0);
  }
  try {
    w.validate(dataset.front().bank->size(), dataset.front().priors.size());
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  const auto start = std::chrono::steady_clock::now();
  const TrainingResult result = train(dataset, w, config);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  save_weights(result.weights, out);
  if (trace.empty()) trace = sibling(out, ".trace.csv").string();
  write_training_trace(result.trace, trace);
  std::printf("learn: %.3f s, %zu iterations, final objective %.6g\n", seconds, result.trace.size(),
              result.trace.empty() ? 0.0 : result.trace.back().objective);
  return 0;
}

int run_serve(const std::string& host, int port, const std::string& volume, std::size_t labels) {
  SegmentationService service(load_volume(volume), labels);
  httplib::Server server;
  service.attach(server);
  if (!server.bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  std::printf("serving %s on http://%s:%d\n", volume.c_str(), host.c_str(), port);
  std::fflush(stdout);
  server.listen_after_bind();
  return 0;
}

int run_phantom(const PhantomConfig& config, const std::string& out, const std::string& mask, const std::string& seeds) {
  const Phantom p = make_two_region_phantom(config);
  save_volume(p.volume, out);
  if (!mask.empty()) {
    std::vector<double> m(p.mask.begin(), p.mask.end());
    save_volume(Volume(config.dims, p.volume.spacing(), std::move(m)), mask);
  }
  if (!seeds.empty()) save_seed_map(p.seeds, seeds);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Random walker segmentation with learned energy weights"};
  app.require_subcommand(1);

  ProblemFlags problem_flags;
  double tol = 1e-8;
  std::size_t max_iter = 0;
  std::string out;

  auto* segment = app.add_subcommand("segment", "Seeded / prior-driven random walker segmentation");
  problem_flags.add_to(*segment);
  segment->add_option("--tol", tol, "CG relative residual tolerance")->check(CLI::Range(1e-12, 1e-2));
  segment->add_option("--max-iter", max_iter, "CG iteration cap (0: automatic)");
  segment->add_option("--out", out, "Output soft segmentation (RSEG)")->required();

  AciOptions aci_options;
  std::string scheme = "edge";
  std::string rule = "diminishing";
  std::string diagnostics;
  auto* aci = app.add_subcommand("aci", "Constrained inference by dual decomposition");
  problem_flags.add_to(*aci);
  aci->add_option("--partition", scheme, "Voxel subsets: one per edge or one per lattice line")
      ->check(CLI::IsMember({"edge", "line"}));
  aci->add_option("--eta0", aci_options.eta0, "Initial dual step")->check(CLI::PositiveNumber);
  aci->add_option("--rule", rule, "Dual step rule")->check(CLI::IsMember({"diminishing", "adaptive"}));
  aci->add_option("--max-iter", aci_options.max_iter, "Iteration cap")->check(CLI::PositiveNumber);
  aci->add_option("--gap-tol", aci_options.gap_tol, "Stop once slaves agree to this tolerance")
      ->check(CLI::PositiveNumber);
  aci->add_option("--out", out, "Output soft segmentation (RSEG)")->required();
  aci->add_option("--diagnostics", diagnostics, "Per-iteration CSV (default: <out>.aci.csv)");

  std::string manifest;
  std::string initial;
  std::string trace;
  std::string normalization = "mean";
  LearnConfig learn_config;
  std::size_t learn_aci_iter = learn_config.aci.max_iter;
  double learn_aci_eta0 = learn_config.aci.eta0;
  std::string learn_scheme = "edge";
  auto* learn = app.add_subcommand("learn", "Learn energy weights from ground-truth segmentations");
  learn->add_option("--manifest", manifest, "Training manifest (JSON list)")->required()->check(CLI::ExistingFile);
  learn->add_option("--lambda", learn_config.lambda, "Regularization weight")->check(CLI::PositiveNumber);
  learn->add_option("--iters", learn_config.iterations, "Subgradient iterations");
  learn->add_option("--eta0", learn_config.eta0, "Initial step, decays as eta0/(1+t)")->check(CLI::PositiveNumber);
  learn->add_option("--min-weight", learn_config.min_weight, "Projection floor for every weight")
      ->check(CLI::NonNegativeNumber);
  learn->add_option("--loss", normalization, "Loss normalization")->check(CLI::IsMember({"mean", "sum"}));
  learn->add_option("--partition", learn_scheme, "Voxel subsets for loss-augmented inference")
      ->check(CLI::IsMember({"edge", "line"}));
  learn->add_option("--aci-iters", learn_aci_iter, "Dual iterations per loss-augmented inference")
      ->check(CLI::PositiveNumber);
  learn->add_option("--aci-eta0", learn_aci_eta0, "Dual step for loss-augmented inference")->check(CLI::PositiveNumber);
  learn->add_option("--init", initial, "Initial weights (JSON; default all ones)")->check(CLI::ExistingFile);
  learn->add_option("--out", out, "Learned weights (JSON)")->required();
  learn->add_option("--trace", trace, "Training trace CSV (default: <out>.trace.csv)");

  std::string host = "127.0.0.1";
  int port = 8080;
  std::string serve_volume;
  std::size_t serve_labels = 2;
  auto* serve = app.add_subcommand("serve", "HTTP API for interactive seeding");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "TCP port")->check(CLI::Range(1, 65535));
  serve->add_option("--volume", serve_volume, "Volume (RVOL)")->required()->check(CLI::ExistingFile);
  serve->add_option("--labels", serve_labels, "Number of labels")->check(CLI::Range(2, 255));

  PhantomConfig phantom_config;
  std::vector<std::size_t> phantom_dims{64, 64, 64};
  std::string mask_out;
  std::string seeds_out;
  auto* phantom = app.add_subcommand("phantom", "Write a synthetic two-region test volume");
  phantom->add_option("--dims", phantom_dims, "nx,ny,nz")->delimiter(',')->expected(3);
  phantom->add_option("--mean0", phantom_config.mean0, "Class 0 mean");
  phantom->add_option("--mean1", phantom_config.mean1, "Class 1 mean");
  phantom->add_option("--noise", phantom_config.noise_sd, "Noise standard deviation")->check(CLI::NonNegativeNumber);
  phantom->add_option("--blob", phantom_config.seed_blob, "Seed blob side length");
  phantom->add_option("--rng-seed", phantom_config.rng_seed, "Random seed");
  phantom->add_option("--out", out, "Output volume (RVOL)")->required();
  phantom->add_option("--mask", mask_out, "Ground-truth label map (RVOL)");
  phantom->add_option("--seeds-out", seeds_out, "Seed map (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kBadInput;
  }

  try {
    if (segment->parsed()) return run_segment(problem_flags, tol, max_iter, out);
    if (aci->parsed()) {
      aci_options.rule = rule == "adaptive" ? StepRule::adaptive : StepRule::diminishing;
      return run_aci(problem_flags, scheme, aci_options, out, diagnostics);
    }
    if (learn->parsed()) {
      learn_config.normalization = normalization == "sum" ? LossNormalization::sum : LossNormalization::mean;
      learn_config.partition = parse_scheme(learn_scheme);
      learn_config.aci.max_iter = learn_aci_iter;
      learn_config.aci.eta0 = learn_aci_eta0;
      return run_learn(manifest, learn_config, initial, out, trace);
    }
    if (serve->parsed()) return run_serve(host, port, serve_volume, serve_labels);
    if (phantom->parsed()) {
      phantom_config.dims = {phantom_dims[0], phantom_dims[1], phantom_dims[2]};
      return run_phantom(phantom_config, out, mask_out, seeds_out);
    }
  } catch (const SolverError& e) {
    std::cerr << "solver failure: " << e.what() << '\n';
    return kSolverFailure;
  } catch (const FormatError& e) {
    std::cerr << "bad input: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::invalid_argument& e) {
    std::cerr << "bad input: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kBadInput;
}
