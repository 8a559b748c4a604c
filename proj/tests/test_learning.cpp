#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "rwseg/error.hpp"
#include "rwseg/learning.hpp"

using namespace rwseg;

namespace {

std::shared_ptr<const LaplacianBank> single_edge_bank(double weight) {
  auto bank = std::make_shared<LaplacianBank>();
  bank->terms.push_back(assemble_laplacian(EdgeList{Dims{2, 1, 1}, {{0, 1, weight}}}));
  bank->configs.push_back(EdgeWeightConfig::gaussian(1.0));
  bank->lattice = Dims{2, 1, 1};
  return bank;
}

std::shared_ptr<const LaplacianBank> isolated_voxel_bank() {
  auto bank = std::make_shared<LaplacianBank>();
  bank->terms.push_back(assemble_laplacian(EdgeList{Dims{1, 1, 1}, {}}));
  bank->configs.push_back(EdgeWeightConfig::gaussian(1.0));
  bank->lattice = Dims{1, 1, 1};
  return bank;
}

TrainingSample one_voxel_sample(const SoftSegmentation& target, std::uint32_t z) {
  TrainingSample s;
  s.dims = {1, 1, 1};
  s.bank = isolated_voxel_bank();
  s.num_labels = target.num_labels();
  s.priors.push_back({target, PriorWeighting()});
  s.seeds = SeedMap(s.num_labels);
  s.truth = {z};
  return s;
}

TrainingSample random_sample(const Dims& d, std::size_t labels, std::size_t priors, std::mt19937_64& rng) {
  TrainingSample s;
  s.dims = d;
  s.bank = std::make_shared<LaplacianBank>(build_default_bank(normalize_intensities(testing::random_volume(d, rng))));
  s.num_labels = labels;
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (std::size_t b = 0; b < priors; ++b) {
    std::vector<double> omega(d.count());
    for (auto& w : omega) w = u(rng);
    s.priors.push_back({testing::random_rows(d.count(), labels, rng), PriorWeighting(std::move(omega))});
  }
  s.truth.resize(d.count());
  for (std::size_t i = 0; i < d.count(); ++i) s.truth[i] = static_cast<std::uint32_t>(rng() % labels);
  s.seeds = SeedMap(labels);
  return s;
}

LearnConfig exact_config() {
  LearnConfig c;
  c.aci.eta0 = 5.0;
  c.aci.gap_tol = 1e-9;
  c.aci.slave.tol = 1e-12;
  c.aci.slave.max_iter = 500000;
  c.solve.tol = 1e-12;
  return c;
}

}  // namespace

TEST_CASE("loss") {
  const std::vector<std::uint32_t> z{0, 2, 1};
  CHECK(loss(z, SoftSegmentation::one_hot(z, 3)) == 0.0);
  CHECK(loss(z, SoftSegmentation::uniform(3, 3)) == doctest::Approx(2.0 / 3.0));
  CHECK(loss(z, SoftSegmentation::uniform(3, 3), LossNormalization::sum) == doctest::Approx(2.0));
  const std::vector<std::uint32_t> one{1};
  CHECK(loss(one, SoftSegmentation(1, 2, {0.25, 0.75})) == doctest::Approx(0.25));

  std::mt19937_64 rng(1);
  const auto y = testing::random_rows(3, 3, rng);
  CHECK(loss(z, y) >= 0.0);
  CHECK(loss(z, y) <= 1.0);
  CHECK(loss(z, y, LossNormalization::sum) == doctest::Approx(3.0 * loss(z, y)));
}

TEST_CASE("feature map") {
  SUBCASE("two voxels by hand") {
    TrainingSample s;
    s.dims = {2, 1, 1};
    s.bank = single_edge_bank(0.7);
    s.priors.push_back({SoftSegmentation(2, 2, {0.9, 0.1, 0.4, 0.6}), PriorWeighting({2.0, 0.5})});
    s.seeds = SeedMap(2);
    s.truth = {0, 1};
    const SoftSegmentation y(2, 2, {0.3, 0.7, 0.8, 0.2});
    const auto psi = feature_map(s, y);
    REQUIRE(psi.size() == 2);
    CHECK(psi[0] == doctest::Approx(0.7 * 2 * 0.5 * 0.5));
    CHECK(psi[1] == doctest::Approx(2.0 * 2 * 0.6 * 0.6 + 0.5 * 2 * 0.4 * 0.4));
  }
  SUBCASE("constant rows and the prior target") {
    std::mt19937_64 rng(2);
    const auto s = random_sample({3, 2, 2}, 3, 2, rng);
    std::vector<double> rows;
    for (std::size_t i = 0; i < 12; ++i) rows.insert(rows.end(), {0.2, 0.5, 0.3});
    const auto psi = feature_map(s, SoftSegmentation(12, 3, rows));
    for (std::size_t a = 0; a < 4; ++a) CHECK(std::abs(psi[a]) < 1e-12);
    CHECK(feature_map(s, s.priors[1].target)[5] == 0.0);
  }
  SUBCASE("w . psi equals the energy") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
      const auto s = random_sample({3, 3, 1}, 2 + trial % 2, trial % 3, rng);
      WeightVector w;
      std::uniform_real_distribution<double> u(0.0, 3.0);
      for (std::size_t a = 0; a < 4; ++a) w.laplacian_weights.push_back(u(rng));
      for (std::size_t b = 0; b < s.priors.size(); ++b) w.prior_weights.push_back(u(rng));
      const auto y = testing::random_rows(9, s.num_labels, rng);
      const auto psi = feature_map(s, y);
      CHECK(psi.size() == 4 + s.priors.size());
      double dot = 0.0;
      const auto flat = w.flattened();
      for (std::size_t k = 0; k < psi.size(); ++k) {
        CHECK(psi[k] >= 0.0);
        dot += flat[k] * psi[k];
      }
      CHECK(dot == doctest::Approx(energy(make_problem(s, w), y)).epsilon(1e-12));
    }
  }
}

TEST_CASE("loss-augmented inference") {
  SUBCASE("a dominant prior at the truth keeps the output at the truth") {
    std::mt19937_64 rng(4);
    auto s = random_sample({2, 2, 2}, 2, 0, rng);
    s.priors.push_back({SoftSegmentation::one_hot(s.truth, 2), PriorWeighting()});
    const WeightVector w{{1.0, 1.0, 1.0, 1.0}, {1e4}};
    const auto r = loss_augmented_inference(s, w, exact_config());
    CHECK(testing::max_abs_diff(r.y, SoftSegmentation::one_hot(s.truth, 2)) < 1e-3);
  }
  SUBCASE("a dominant loss pushes mass off the true label") {
    // min over y of eps ||y - t||^2 + y_z - 1: the true label's mass goes to zero
    const auto s = one_voxel_sample(SoftSegmentation(1, 2, {0.5, 0.5}), 0);
    const WeightVector w{{0.0}, {0.01}};
    const auto r = loss_augmented_inference(s, w, exact_config());
    CHECK(r.y.at(0, 0) < 1e-8);
    CHECK(r.value == doctest::Approx(0.01 * 2 * 0.25 - 1.0).epsilon(1e-9));
  }
  SUBCASE("one voxel against a grid search") {
    for (const double wp : {0.3, 1.0, 4.0}) {
      const auto s = one_voxel_sample(SoftSegmentation(1, 2, {0.5, 0.5}), 1);
      const WeightVector w{{1.0}, {wp}};
      const auto r = loss_augmented_inference(s, w, exact_config());
      double grid = INFINITY;
      for (int k = 0; k <= 100; ++k) {
        const double a = k / 100.0;
        grid = std::min(grid, wp * 2 * (a - 0.5) * (a - 0.5) - a);  // loss = 1 - (1 - a)
      }
      CAPTURE(wp);
      CHECK(r.value <= grid + 1e-9);
      CHECK(r.value >= grid - 1e-3);
      // closed form: a = min(1, 0.5 + 1 / (4 wp))
      const double a = std::min(1.0, 0.5 + 1.0 / (4.0 * wp));
      CHECK(r.y.at(0, 0) == doctest::Approx(a).epsilon(1e-6));
    }
  }
  SUBCASE("the value never exceeds that of the truth or the plain solution") {
    std::mt19937_64 rng(5);
    const auto s = random_sample({3, 3, 1}, 3, 1, rng);
    const WeightVector w{{0.5, 1.0, 0.2, 0.8}, {0.3}};
    LearnConfig c;
    c.aci.max_iter = 3;
    const auto plain = solve(make_problem(s, w)).segmentation;
    const auto r = loss_augmented_inference(s, w, c, &plain);
    const auto value = [&](const SoftSegmentation& y) {
      const auto psi = feature_map(s, y);
      const auto flat = w.flattened();
      double d = 0.0;
      for (std::size_t k = 0; k < psi.size(); ++k) d += flat[k] * psi[k];
      return d - loss(s.truth, y);
    };
    CHECK(r.value == doctest::Approx(value(r.y)).epsilon(1e-12));
    CHECK(r.value <= value(plain));
    CHECK(r.value <= value(SoftSegmentation::one_hot(s.truth, 3)));
  }
}

TEST_CASE("subgradient matches finite differences on two voxels") {
  std::mt19937_64 rng(6);
  auto s = random_sample({2, 1, 1}, 2, 1, rng);
  s.truth = {0, 1};
  const std::vector<TrainingSample> data{s};
  const LearnConfig c = exact_config();
  const std::vector<double> w0{0.4, 0.9, 0.3, 1.2, 0.8};
  const auto eval = objective_and_subgradient(data, WeightVector::from_flat(w0, 4), c);
  REQUIRE(eval.samples[0].hinge > 1e-3);  // away from the kink
  const double h = 1e-4;
  for (std::size_t a = 0; a < w0.size(); ++a) {
    auto up = w0, down = w0;
    up[a] += h;
    down[a] -= h;
    const double fd = (objective_and_subgradient(data, WeightVector::from_flat(up, 4), c).objective -
                       objective_and_subgradient(data, WeightVector::from_flat(down, 4), c).objective) /
                      (2 * h);
    CAPTURE(a);
    CHECK(std::abs(eval.subgradient[a] - fd) <= 1e-4);
  }
}

TEST_CASE("training") {
  SUBCASE("zero hinge: only the regularizer acts and weights shrink to the floor") {
    TrainingSample s;
    s.dims = {2, 1, 1};
    s.bank = single_edge_bank(1.0);
    s.seeds = SeedMap(2);
    s.seeds.add(0, 0);
    s.seeds.add(1, 1);
    s.truth = {0, 1};
    const std::vector<TrainingSample> data{s};
    LearnConfig c;
    c.lambda = 0.5;
    c.eta0 = 1.0;
    c.iterations = 40;
    c.min_weight = 0.05;
    const auto r = train(data, WeightVector{{3.0}, {}}, c);
    double previous = INFINITY;
    for (const auto& row : r.trace) {
      CHECK(row.bound == 0.0);
      const double w = row.weights.laplacian_weights[0];
      CHECK(row.objective == doctest::Approx(c.lambda * w * w));
      CHECK(w <= previous);
      previous = w;
    }
    CHECK(r.weights.laplacian_weights[0] == c.min_weight);
  }
  SUBCASE("the bound dominates the risk on every iteration") {
    std::mt19937_64 rng(7);
    std::vector<TrainingSample> data;
    for (int k = 0; k < 2; ++k) {
      auto s = random_sample({3, 3, 1}, 2, 0, rng);
      for (std::size_t i = 0; i < 9; i += 4) s.seeds.add(i, s.truth[i]);
      s.seeds.add(1, s.truth[1]);
      // make sure both labels are seeded
      const std::uint32_t other = s.truth[0] == 0 ? 1 : 0;
      s.truth[7] = other;
      s.seeds.add(7, other);
      data.push_back(s);
    }
    LearnConfig c;
    c.iterations = 6;
    c.eta0 = 0.2;
    c.aci.eta0 = 5.0;
    c.aci.max_iter = 100;
    c.partition = PartitionScheme::line;
    const auto r = train(data, WeightVector{{1, 1, 1, 1}, {}}, c);
    REQUIRE(r.trace.size() == 6);
    for (const auto& row : r.trace) {
      CHECK(row.bound >= row.risk - 1e-12);
      for (std::size_t k = 0; k < 2; ++k) CHECK(row.hinges[k] >= row.risks[k] - 1e-12);
      for (double w : row.weights.flattened()) CHECK(w >= 0.0);
    }

    testing::TempDir dir("learn");
    write_training_trace(r.trace, dir / "t.csv");
    std::ifstream in(dir / "t.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "iter,objective,bound,risk");
    std::size_t rows = 0;
    while (std::getline(in, line)) rows += !line.empty();
    CHECK(rows == 6);
  }
  SUBCASE("invalid configurations") {
    std::mt19937_64 rng(8);
    auto s = random_sample({2, 1, 1}, 2, 1, rng);
    const std::vector<TrainingSample> data{s};
    LearnConfig c;
    c.eta0 = 0.0;
    CHECK_THROWS_AS(train(data, WeightVector{{1, 1, 1, 1}, {1}}, c), std::invalid_argument);
    c = {};
    c.lambda = 0.0;
    CHECK_THROWS_AS(objective_and_subgradient(data, WeightVector{{1, 1, 1, 1}, {1}}, c), std::invalid_argument);
    CHECK_THROWS_AS(train(std::vector<TrainingSample>{}, WeightVector{{1}, {}}, LearnConfig{}), std::invalid_argument);
  }
}

TEST_CASE("training sample validation") {
  std::mt19937_64 rng(9);
  auto s = random_sample({2, 2, 1}, 2, 0, rng);
  CHECK_NOTHROW(s.validate());
  auto bad = s;
  bad.seeds.add(0, 1 - s.truth[0]);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = s;
  bad.truth[2] = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = s;
  bad.truth.pop_back();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("weights files") {
  testing::TempDir dir("weights");
  const WeightVector w{{0.5, 1.0, 0.0, 2.25}, {3.0}};
  save_weights(w, dir / "w.json");
  const auto back = load_weights(dir / "w.json");
  CHECK(back.laplacian_weights == w.laplacian_weights);
  CHECK(back.prior_weights == w.prior_weights);
  CHECK_THROWS_AS(weights_from_json(nlohmann::json::parse(R"({"prior_weights": [1]})")), FormatError);
  CHECK(weights_from_json(nlohmann::json::parse(R"({"laplacian_weights": [1, 2]})")).prior_weights.empty());
}

TEST_CASE("manifest loading") {
  testing::TempDir dir("manifest");
  std::filesystem::create_directories(dir / "data");
  save_volume(Volume({3, 1, 1}, {}, {0.0, 1.0, 5.0}), dir / "data/v.rvol");
  save_volume(Volume({3, 1, 1}, {}, {0, 0, 2}), dir / "data/z.rvol");
  SeedMap seeds(3);
  seeds.add(0, 0);
  seeds.add(2, 2);
  save_seed_map(seeds, dir / "data/s.json");
  save_soft_segmentation(SoftSegmentation::uniform(3, 3), {3, 1, 1}, dir / "data/p.rseg");
  save_volume(Volume({3, 1, 1}, {}, {1.0, 0.5, 2.0}), dir / "data/o.rvol");

  SUBCASE("relative paths and prior forms") {
    std::ofstream(dir / "m.json") << R"([
      {"volume": "data/v.rvol", "labels": "data/z.rvol", "seeds": "data/s.json",
       "priors": ["data/p.rseg"]},
      {"volume": "data/v.rvol", "labels": "data/z.rvol",
       "priors": [{"target": "data/p.rseg", "omega": "data/o.rvol"}]}
    ])";
    const auto data = load_manifest(dir / "m.json");
    REQUIRE(data.size() == 2);
    CHECK(data[0].num_labels == 3);
    CHECK(data[0].truth == std::vector<std::uint32_t>{0, 0, 2});
    CHECK(data[0].seeds == seeds);
    CHECK(data[0].bank->size() == 4);
    CHECK(data[0].priors[0].weighting.is_identity());
    CHECK(data[1].seeds.empty());
    CHECK(data[1].seeds.num_labels() == 3);
    CHECK(data[1].priors[0].weighting[1] == 0.5);
  }
  SUBCASE("errors") {
    std::ofstream(dir / "bad1.json") << R"({"volume": "data/v.rvol"})";
    CHECK_THROWS_AS(load_manifest(dir / "bad1.json"), FormatError);
    std::ofstream(dir / "bad2.json") << R"([{"volume": "data/v.rvol", "labels": "data/missing.rvol"}])";
    CHECK_THROWS_AS(load_manifest(dir / "bad2.json"), FormatError);
    std::ofstream(dir / "bad3.json") << R"([{"volume": "data/v.rvol", "labels": "data/z.rvol", "priors": ["data/p.rseg"]},
                                            {"volume": "data/v.rvol", "labels": "data/z.rvol"}])";
    CHECK_THROWS_AS(load_manifest(dir / "bad3.json"), FormatError);
  }
}
