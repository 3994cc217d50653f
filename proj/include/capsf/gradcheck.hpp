#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "capsf/model.hpp"

namespace capsf {

struct GradcheckConfig {
  std::uint64_t seed = 0;
  double step = 1e-5;
  // Denominator floor of the relative error, so near-zero gradients are
  // compared in absolute terms.
  double floor = 1e-5;
  double noise_sigma = 0.01;
  std::size_t batch = 2;
  // Elements whose central difference misses this are re-checked one-sided.
  double tolerance = 1e-4;
};

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  // Elements that needed the fallback stencils (a ReLU switched inside the
  // central one).
  std::size_t one_sided = 0;
  // Worst error of the central difference alone.
  double max_central_error = 0.0;
  double seconds = 0.0;
};

/// Compact model for gradient checking: toy extractor with 4 channels and
/// primary capsules with 4 hidden channels (capsule dimension stays 4).
inline ModelConfig gradcheck_model_config() {
  ModelConfig cfg;
  cfg.extractor = ExtractorKind::toy;
  cfg.toy_channels = 4;
  cfg.capsnet.layout.hidden = 4;
  return cfg;
}

/// Finite differences of the batch loss with respect to every trainable
/// parameter, compared against backpropagation. Central differences first;
/// an element that misses the tolerance is retried with one-sided stencils
/// and smaller steps, and the closest estimate counts. Runs in 64-bit,
/// train mode, with routing noise redrawn from the same seed on every
/// evaluation so the noise is a fixed constant of the loss.
inline GradcheckResult gradcheck(const GradcheckConfig& gc) {
  const auto start = std::chrono::steady_clock::now();
  ModelConfig cfg = gradcheck_model_config();
  cfg.routing.noise_sigma = gc.noise_sigma;
  Rng init = Rng::stream(gc.seed, "init");
  auto model = ForensicsModel<double>::create(cfg, init);

  Rng data_rng = Rng::stream(gc.seed, "data");
  std::vector<double> pixels(gc.batch * 3 * kInputSize * kInputSize);
  for (auto& p : pixels) p = data_rng.uniform(-2.0, 2.0);
  const Tensor<double> features = model.features(Tensor<double>({gc.batch, 3, kInputSize, kInputSize}, pixels)).detach();
  std::vector<int> labels(gc.batch);
  for (std::size_t i = 0; i < gc.batch; ++i) labels[i] = static_cast<int>(i % 2);

  const RoutingConfig routing = model.routing(Mode::train);
  auto loss = [&]() {
    Rng noise = Rng::stream(gc.seed, "noise");
    return ops::binary_cross_entropy(model.forward(features, routing, &noise).y_hat, labels);
  };

  auto params = model.trainable_parameters();
  for (auto& p : params) p.tensor.zero_grad();
  backward(loss());

  GradcheckResult r;
  const double h = gc.step;
  const double f0 = loss().item();
  auto rel = [&](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), gc.floor}); };
  for (auto& p : params) {
    const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    auto data = p.tensor.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      auto at = [&](double offset) {
        data[i] = orig + offset;
        const double v = loss().item();
        data[i] = orig;
        return v;
      };
      const double up = at(h), down = at(-h);
      const double central = (up - down) / (2 * h);
      double numeric = central;
      double err = rel(analytic[i], central);
      r.max_central_error = std::max(r.max_central_error, err);
      // A ReLU switching inside the stencil spoils the estimate. Retry with
      // second-order one-sided stencils (a kink sits on one side only) and
      // shrinking steps.
      for (double hk = h; err > gc.tolerance && hk >= h * 1e-2; hk /= 10) {
        const double u1 = hk == h ? up : at(hk), d1 = hk == h ? down : at(-hk);
        const double forward = (-3 * f0 + 4 * u1 - at(2 * hk)) / (2 * hk);
        const double backward = (3 * f0 - 4 * d1 + at(-2 * hk)) / (2 * hk);
        for (double cand : {(u1 - d1) / (2 * hk), forward, backward})
          if (rel(analytic[i], cand) < err) {
            err = rel(analytic[i], cand);
            numeric = cand;
          }
        if (err <= gc.tolerance) ++r.one_sided;
      }
      if (err > r.max_relative_error || r.checked == 0) {
        r.max_relative_error = err;
        r.worst_parameter = p.name;
        r.worst_index = i;
        r.analytic = analytic[i];
        r.numeric = numeric;
      }
      ++r.checked;
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace capsf
