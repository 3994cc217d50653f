#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "capsf/dataset.hpp"
#include "capsf/image.hpp"
#include "capsf/metrics.hpp"
#include "capsf/model.hpp"
#include "capsf/optim.hpp"

namespace capsf {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  AdamConfig adam;
  std::uint64_t seed = 0;
  // Write a checkpoint every N epochs (0 disables).
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_path;
  // Stop once eval-mode training accuracy reaches this value.
  std::optional<double> stop_at_train_accuracy;
  // Compute eval-mode training accuracy after every epoch.
  bool track_accuracy = true;

  void validate() const {
    if (batch_size == 0) throw UsageError("batch size must be positive");
    adam.validate();
    if (checkpoint_every > 0 && checkpoint_path.empty()) throw UsageError("checkpoint cadence set without a path");
    if (stop_at_train_accuracy && !(*stop_at_train_accuracy > 0 && *stop_at_train_accuracy <= 1))
      throw UsageError("stop-at accuracy must be in (0,1]");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean over samples
  std::optional<double> train_accuracy;
};

struct TrainResult {
  std::vector<EpochRecord> curve;
  std::size_t epochs_run = 0;
  bool stopped_early = false;
};

/// Extracted features plus labels, in manifest order.
template <typename T>
struct FeatureSet {
  std::vector<Tensor<T>> features;  // each [C,16,16]
  std::vector<int> labels;
  std::vector<std::string> groups;
  std::vector<std::string> paths;

  std::size_t size() const { return features.size(); }
};

namespace detail {

template <typename T>
Tensor<T> gather_batch(const std::vector<Tensor<T>>& features, const std::size_t* idx, std::size_t count) {
  Shape shape = features[idx[0]].shape();
  std::vector<T> data;
  data.reserve(count * features[idx[0]].numel());
  for (std::size_t k = 0; k < count; ++k) {
    const auto& f = features[idx[k]];
    if (f.shape() != shape) throw UsageError("feature shapes differ within a batch");
    data.insert(data.end(), f.data().begin(), f.data().end());
  }
  shape.insert(shape.begin(), count);
  return Tensor<T>(std::move(shape), std::move(data));
}

// Runs fn(begin, end) over [0,n) split into contiguous chunks.
inline void parallel_chunks(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    fn(0, n);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> pool;
    const std::size_t per = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t b = t * per, e = std::min(n, b + per);
      if (b >= e) break;
      pool.emplace_back([&, t, b, e] {
        try {
          fn(b, e);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
}

}  // namespace detail

/// Decodes, preprocesses and runs the frozen extractor on every sample.
template <typename T>
FeatureSet<T> extract_features(const ForensicsModel<T>& model, const std::vector<Sample>& samples,
                               std::size_t threads = 1) {
  FeatureSet<T> out;
  out.features.resize(samples.size());
  const auto& cfg = model.config();
  detail::parallel_chunks(samples.size(), threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const RgbImage img = read_image(samples[i].path);
      out.features[i] = model.features(preprocess<T>(img, cfg.mean, cfg.std, kInputSize)).detach();
    }
  });
  for (const auto& s : samples) {
    out.labels.push_back(s.label);
    out.groups.push_back(s.group);
    out.paths.push_back(s.raw_path);
  }
  return out;
}

/// Eval-mode fake probabilities, one per feature map, in input order.
template <typename T>
std::vector<double> score_features(const ForensicsModel<T>& model, const std::vector<Tensor<T>>& features,
                                   std::size_t batch_size = 32, std::size_t threads = 1) {
  if (batch_size == 0) throw UsageError("batch size must be positive");
  std::vector<double> scores(features.size());
  std::vector<std::size_t> idx(features.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const RoutingConfig routing = model.routing(Mode::eval);
  detail::parallel_chunks(features.size(), threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t s = b; s < e; s += batch_size) {
      const std::size_t count = std::min(batch_size, e - s);
      const auto out = model.forward(detail::gather_batch(features, idx.data() + s, count), routing, nullptr);
      for (std::size_t k = 0; k < count; ++k) scores[s + k] = static_cast<double>(out.y_hat[k]);
    }
  });
  return scores;
}

template <typename T>
double accuracy_on(const ForensicsModel<T>& model, const FeatureSet<T>& set, double threshold = 0.5) {
  return evaluate_scores(score_features(model, set.features), set.labels, threshold).accuracy;
}

/// Minimizes the mean cross-entropy with Adam. Noise and shuffling draw from
/// the "noise" and "shuffle" sub-streams of cfg.seed. The frozen extractor is
/// not touched. `on_epoch` is called after every epoch.
template <typename T>
TrainResult train(ForensicsModel<T>& model, const FeatureSet<T>& data, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  {
    bool real = false, fake = false;
    for (int y : data.labels) (y ? fake : real) = true;
    if (data.size() == 0) throw DataError("training split is empty");
    if (!real || !fake) throw DataError(std::string("training split contains only ") + (real ? "real" : "fake") + " samples");
  }
  TrainResult result;
  if (cfg.epochs == 0) return result;

  std::vector<Tensor<T>> params;
  for (const auto& p : model.trainable_parameters()) params.push_back(p.tensor);
  Adam<T> opt(params, cfg.adam);
  opt.zero_grad();
  Rng noise = Rng::stream(cfg.seed, "noise");
  Rng shuffle = Rng::stream(cfg.seed, "shuffle");
  const RoutingConfig routing = model.routing(Mode::train);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle.shuffle(order);
    double total = 0.0;
    std::size_t step = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size, ++step) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - s);
      std::vector<int> labels(count);
      for (std::size_t k = 0; k < count; ++k) labels[k] = data.labels[order[s + k]];
      try {
        const auto out = model.forward(detail::gather_batch(data.features, order.data() + s, count), routing, &noise);
        Tensor<T> loss = ops::binary_cross_entropy(out.y_hat, labels);
        if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericalError("non-finite loss");
        backward(loss);
        opt.step();
        opt.zero_grad();
        total += static_cast<double>(loss.item()) * static_cast<double>(count);
      } catch (const NumericalError& e) {
        throw NumericalError(detail::concat("training diverged at epoch ", epoch, ", step ", step, ": ", e.what()));
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = total / static_cast<double>(order.size());
    if (cfg.track_accuracy || cfg.stop_at_train_accuracy) rec.train_accuracy = accuracy_on(model, data);
    result.curve.push_back(rec);
    result.epochs_run = epoch;
    if (on_epoch) on_epoch(rec);
    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)
      model.save(cfg.checkpoint_path, {{"train.epoch", std::to_string(epoch)}});
    if (cfg.stop_at_train_accuracy && *rec.train_accuracy >= *cfg.stop_at_train_accuracy) {
      result.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  return result;
}

struct EvalOutput {
  EvalReport frames;
  std::optional<EvalReport> groups;
  std::vector<FrameScore> frame_scores;
  std::vector<GroupScore> group_scores;
};

/// Frame-level report, plus the group-level report built from per-group mean
/// probabilities when `with_groups` is set. Read-only on the model.
template <typename T>
EvalOutput evaluate(const ForensicsModel<T>& model, const FeatureSet<T>& data, double threshold,
                    bool with_groups = true, std::optional<std::size_t> max_frames = {}, std::size_t threads = 1) {
  if (data.size() == 0) throw DataError("evaluation split is empty");
  EvalOutput out;
  const auto scores = score_features(model, data.features, 32, threads);
  out.frames = evaluate_scores(scores, data.labels, threshold, ReportLevel::frame);
  for (std::size_t i = 0; i < scores.size(); ++i) out.frame_scores.push_back({data.groups[i], data.labels[i], scores[i]});
  if (with_groups) {
    out.group_scores = aggregate_video(out.frame_scores, max_frames);
    out.groups = evaluate_groups(out.group_scores, threshold);
  }
  return out;
}

}  // namespace capsf
