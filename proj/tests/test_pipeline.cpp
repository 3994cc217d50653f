#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "capsf/pipeline.hpp"

using namespace capsf;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "capsf_test_pipeline" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Small model for fast property tests: 8-channel toy extractor, 8 hidden
// channels per capsule.
ModelConfig small_config() {
  ModelConfig cfg;
  cfg.extractor = ExtractorKind::toy;
  cfg.toy_channels = 8;
  cfg.capsnet.layout.hidden = 8;
  return cfg;
}

struct Fixture {
  Manifest manifest;
  ForensicsModel<double> model;
  FeatureSet<double> train;
  FeatureSet<double> test;
};

Fixture make_fixture(const std::string& name, std::size_t train, std::size_t test, ModelConfig cfg,
                     std::uint64_t seed = 1, std::size_t frames = 1) {
  SyntheticConfig sc;
  sc.train = train;
  sc.test = test;
  sc.size = 32;
  sc.seed = seed;
  sc.frames_per_group = frames;
  Fixture f;
  f.manifest = make_synthetic(temp_dir(name), sc);
  Rng init = Rng::stream(seed, "init");
  f.model = ForensicsModel<double>::create(cfg, init);
  f.train = extract_features(f.model, f.manifest.split(Split::train));
  if (test) f.test = extract_features(f.model, f.manifest.split(Split::test));
  return f;
}

std::vector<std::vector<double>> snapshot(const ForensicsModel<double>& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.trainable_parameters()) out.push_back(p.tensor.values());
  for (const auto& b : m.net().buffers()) out.push_back(b.tensor.values());
  for (const auto& p : m.extractor().parameters()) out.push_back(p.tensor.values());
  return out;
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 8;
  tc.seed = 3;
  tc.track_accuracy = false;
  return tc;
}

// Per-channel spatial mean and population variance of a [C,H,W] block,
// computed with plain loops.
std::vector<double> pooled_statistics(const Tensor<double>& f) {
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  std::vector<double> out;
  for (std::size_t k = 0; k < c; ++k) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < hw; ++i) mean += f[k * hw + i];
    mean /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) var += std::pow(f[k * hw + i] - mean, 2);
    out.push_back(mean);
    out.push_back(var / static_cast<double>(hw));
  }
  return out;
}

// Perceptron on standardized inputs; true if it separates the data.
bool linearly_separable(const std::vector<std::vector<double>>& x, const std::vector<int>& y) {
  const std::size_t d = x[0].size();
  std::vector<double> mu(d, 0), sd(d, 0);
  for (const auto& r : x)
    for (std::size_t k = 0; k < d; ++k) mu[k] += r[k] / static_cast<double>(x.size());
  for (const auto& r : x)
    for (std::size_t k = 0; k < d; ++k) sd[k] += std::pow(r[k] - mu[k], 2) / static_cast<double>(x.size());
  std::vector<double> w(d + 1, 0);
  for (int epoch = 0; epoch < 10000; ++epoch) {
    bool clean = true;
    for (std::size_t i = 0; i < x.size(); ++i) {
      double s = w[d];
      for (std::size_t k = 0; k < d; ++k) s += w[k] * (x[i][k] - mu[k]) / std::sqrt(sd[k] + 1e-12);
      const double t = y[i] ? 1.0 : -1.0;
      if (s * t <= 0) {
        clean = false;
        for (std::size_t k = 0; k < d; ++k) w[k] += t * (x[i][k] - mu[k]) / std::sqrt(sd[k] + 1e-12);
        w[d] += t;
      }
    }
    if (clean) return true;
  }
  return false;
}

}  // namespace

TEST(Train, SeparableSetReachesFullTrainAccuracy) {
  ModelConfig cfg;
  cfg.extractor = ExtractorKind::toy;
  auto f = make_fixture("separable", 20, 0, cfg);
  std::vector<std::vector<double>> probe;
  for (const auto& x : f.train.features) probe.push_back(pooled_statistics(x));
  ASSERT_TRUE(linearly_separable(probe, f.train.labels));

  TrainConfig tc;
  tc.epochs = 200;
  tc.seed = 5;
  tc.stop_at_train_accuracy = 1.0;
  const auto r = train(f.model, f.train, tc);
  ASSERT_FALSE(r.curve.empty());
  EXPECT_EQ(*r.curve.back().train_accuracy, 1.0);
  EXPECT_LE(r.epochs_run, 200u);
  EXPECT_EQ(accuracy_on(f.model, f.train), 1.0);
}

TEST(Train, ZeroEpochsIsNoOp) {
  auto f = make_fixture("zero", 8, 0, small_config());
  const auto before = snapshot(f.model);
  const auto r = train(f.model, f.train, quick_train(0));
  EXPECT_EQ(r.epochs_run, 0u);
  EXPECT_TRUE(r.curve.empty());
  EXPECT_EQ(snapshot(f.model), before);
}

TEST(Train, SameSeedIsBitIdentical) {
  auto a = make_fixture("det_a", 12, 0, small_config());
  auto b = make_fixture("det_b", 12, 0, small_config());
  const auto ra = train(a.model, a.train, quick_train(3));
  const auto rb = train(b.model, b.train, quick_train(3));
  EXPECT_EQ(snapshot(a.model), snapshot(b.model));
  ASSERT_EQ(ra.curve.size(), rb.curve.size());
  for (std::size_t i = 0; i < ra.curve.size(); ++i) EXPECT_EQ(ra.curve[i].loss, rb.curve[i].loss);

  auto c = make_fixture("det_c", 12, 0, small_config());
  auto tc = quick_train(3);
  tc.seed = 4;
  train(c.model, c.train, tc);
  EXPECT_NE(snapshot(c.model), snapshot(a.model));
}

TEST(Train, ExtractorStaysFrozenAndCapsulesMove) {
  auto f = make_fixture("frozen", 8, 0, small_config());
  std::vector<std::vector<double>> extractor_before;
  for (const auto& p : f.model.extractor().parameters()) extractor_before.push_back(p.tensor.values());
  const auto w_before = f.model.net().weights().values();
  train(f.model, f.train, quick_train(2));
  std::vector<std::vector<double>> extractor_after;
  for (const auto& p : f.model.extractor().parameters()) extractor_after.push_back(p.tensor.values());
  EXPECT_EQ(extractor_after, extractor_before);
  EXPECT_NE(f.model.net().weights().values(), w_before);
}

TEST(Train, LossDecreasesOnEasyData) {
  auto f = make_fixture("loss", 16, 0, small_config());
  const auto r = train(f.model, f.train, quick_train(8));
  EXPECT_LT(r.curve.back().loss, r.curve.front().loss);
}

TEST(Train, SingleClassSplitIsRejected) {
  auto f = make_fixture("single", 8, 0, small_config());
  FeatureSet<double> reals;
  for (std::size_t i = 0; i < f.train.size(); ++i)
    if (f.train.labels[i] == 0) {
      reals.features.push_back(f.train.features[i]);
      reals.labels.push_back(0);
      reals.groups.push_back(f.train.groups[i]);
      reals.paths.push_back(f.train.paths[i]);
    }
  EXPECT_THROW(train(f.model, reals, quick_train(1)), DataError);
  EXPECT_THROW(train(f.model, FeatureSet<double>{}, quick_train(1)), DataError);
  EXPECT_THROW(require_both_classes(f.manifest.split(Split::test), "test"), DataError);
}

TEST(Train, NonFiniteInputAborts) {
  auto f = make_fixture("nan", 8, 0, small_config());
  auto bad = f.train;
  auto first = bad.features[0].values();
  first[5] = std::numeric_limits<double>::quiet_NaN();
  bad.features[0] = Tensor<double>(bad.features[0].shape(), first);
  auto tc = quick_train(1);
  tc.batch_size = 64;
  try {
    train(f.model, bad, tc);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
  }
}

TEST(Train, ConfigValidation) {
  auto f = make_fixture("config", 4, 0, small_config());
  auto tc = quick_train(1);
  tc.batch_size = 0;
  EXPECT_THROW(train(f.model, f.train, tc), UsageError);
  tc = quick_train(1);
  tc.adam.lr = -1;
  EXPECT_THROW(train(f.model, f.train, tc), UsageError);
  tc = quick_train(1);
  tc.checkpoint_every = 1;
  EXPECT_THROW(train(f.model, f.train, tc), UsageError);
}

TEST(Train, CheckpointCadence) {
  const auto dir = temp_dir("cadence");
  auto f = make_fixture("cadence_data", 8, 0, small_config());
  auto tc = quick_train(2);
  tc.checkpoint_every = 2;
  tc.checkpoint_path = dir / "ck.wa";
  train(f.model, f.train, tc);
  ASSERT_TRUE(fs::exists(tc.checkpoint_path));
  const auto ar = load_archive(tc.checkpoint_path);
  EXPECT_EQ(ar.meta_value("train.epoch"), "2");
  const auto loaded = ForensicsModel<double>::load(tc.checkpoint_path);
  EXPECT_EQ(snapshot(loaded), snapshot(f.model));
}

TEST(Evaluate, SideEffectFree) {
  auto f = make_fixture("eval_pure", 8, 6, small_config());
  train(f.model, f.train, quick_train(1));
  const auto before = snapshot(f.model);
  const auto out = evaluate(f.model, f.test, 0.5);
  EXPECT_EQ(snapshot(f.model), before);
  EXPECT_EQ(out.frames.counts.total(), 6u);
}

TEST(Evaluate, ThreadsDoNotChangeResults) {
  auto f = make_fixture("eval_threads", 8, 10, small_config());
  const auto one = score_features(f.model, f.test.features, 3, 1);
  const auto four = score_features(f.model, f.test.features, 3, 4);
  EXPECT_EQ(one, four);
}

TEST(Evaluate, GroupReportEqualsScoresOnGroupMeans) {
  auto f = make_fixture("eval_groups", 4, 6, small_config(), 1, 4);
  const auto out = evaluate(f.model, f.test, 0.5, true, 3);
  ASSERT_TRUE(out.groups.has_value());
  ASSERT_EQ(out.group_scores.size(), 6u);
  std::vector<double> means;
  std::vector<int> labels;
  for (const auto& g : out.group_scores) {
    std::vector<double> frames;
    for (const auto& fs : out.frame_scores)
      if (fs.group == g.group && frames.size() < 3) frames.push_back(fs.y_hat);
    double s = 0;
    for (double v : frames) s += v;
    EXPECT_NEAR(g.y_hat, s / 3.0, 1e-12);
    means.push_back(g.y_hat);
    labels.push_back(g.label);
  }
  EXPECT_EQ(*out.groups, evaluate_scores(means, labels, 0.5, ReportLevel::group));
  EXPECT_EQ(*out.groups->hter, (*out.groups->frr + *out.groups->far) / 2);
}

TEST(Evaluate, SeededTrainEvalIsReproducible) {
  auto run = [](const std::string& name) {
    auto f = make_fixture(name, 10, 6, small_config(), 9);
    train(f.model, f.train, quick_train(2));
    return evaluate(f.model, f.test, 0.5);
  };
  const auto a = run("repro_a"), b = run("repro_b");
  EXPECT_EQ(a.frames, b.frames);
  ASSERT_EQ(a.frame_scores.size(), b.frame_scores.size());
  for (std::size_t i = 0; i < a.frame_scores.size(); ++i) EXPECT_EQ(a.frame_scores[i].y_hat, b.frame_scores[i].y_hat);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  Tensor<double> p({3}, {1.0, -2.0, 0.5}, true);
  Adam<double> opt({p}, AdamConfig{});
  backward(ops::sum(ops::mul(p, Tensor<double>({3}, {3.0, -0.001, 0.0}))));
  opt.step();
  // Bias-corrected first step is lr * g / (|g| + eps'), i.e. -lr * sign(g).
  EXPECT_NEAR(p[0], 1.0 - 5e-4, 1e-10);
  EXPECT_NEAR(p[1], -2.0 + 5e-4, 1e-8);
  EXPECT_EQ(p[2], 0.5);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Optimizer, AdamMinimizesQuadratic) {
  Tensor<double> p({2}, {3.0, -4.0}, true);
  AdamConfig cfg;
  cfg.lr = 0.05;
  Adam<double> opt({p}, cfg);
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    backward(ops::sum(ops::mul(p, p)));
    opt.step();
  }
  EXPECT_NEAR(p[0], 0.0, 1e-2);
  EXPECT_NEAR(p[1], 0.0, 1e-2);
}
