#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "capsf/layers.hpp"
#include "capsf/ops.hpp"
#include "capsf/rng.hpp"

namespace capsf {

/// Layer sizes of one primary capsule:
///   conv2d in->hidden (3x3, pad 1) + BN + ReLU
///   conv2d hidden->pooled (3x3, pad 1) + BN + ReLU
///   statistical pooling -> 2 x pooled
///   conv1d 2->head_channels (head_kernel, head_stride) + BN + ReLU
///   conv1d head_channels->1 (out_kernel) + BN
/// The defaults give a 4-dimensional capsule with 157,043 parameters for 256
/// input channels.
struct CapsuleLayout {
  std::size_t in_channels = 256;
  std::size_t hidden = 64;
  std::size_t pooled = 16;
  std::size_t head_channels = 8;
  std::size_t head_kernel = 5;
  std::size_t head_stride = 2;
  std::size_t out_kernel = 3;

  std::size_t capsule_dim() const {
    if (pooled < head_kernel) throw UsageError("capsule layout: pooled channels smaller than head kernel");
    const std::size_t l1 = (pooled - head_kernel) / head_stride + 1;
    if (l1 < out_kernel) throw UsageError("capsule layout: head output shorter than final kernel");
    return l1 - out_kernel + 1;
  }

  std::size_t parameter_count() const {
    return (in_channels * hidden * 9 + hidden) + 2 * hidden + (hidden * pooled * 9 + pooled) + 2 * pooled +
           (2 * head_channels * head_kernel + head_channels) + 2 * head_channels +
           (head_channels * out_kernel + 1) + 2;
  }
};

template <typename T>
class PrimaryCapsule {
 public:
  PrimaryCapsule() = default;

  PrimaryCapsule(const CapsuleLayout& layout, Rng& rng)
      : conv1_(Conv<T>::make2d(layout.in_channels, layout.hidden, 3, 1, 1, rng)),
        bn1_(layout.hidden),
        conv2_(Conv<T>::make2d(layout.hidden, layout.pooled, 3, 1, 1, rng)),
        bn2_(layout.pooled),
        head1_(Conv<T>::make1d(2, layout.head_channels, layout.head_kernel, layout.head_stride, rng)),
        bn3_(layout.head_channels),
        head2_(Conv<T>::make1d(layout.head_channels, 1, layout.out_kernel, 1, rng)),
        bn4_(1) {}

  /// [N,C,H,W] -> [N,d]
  Tensor<T> forward(const Tensor<T>& x, Mode mode) const {
    Tensor<T> h = ops::relu(bn1_.forward(conv1_.forward(x), mode));
    h = ops::relu(bn2_.forward(conv2_.forward(h), mode));
    h = ops::stats_pool(h);
    h = ops::relu(bn3_.forward(head1_.forward(h), mode));
    h = bn4_.forward(head2_.forward(h), mode);
    return ops::reshape(h, {h.dim(0), h.dim(2)});
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& params,
               std::vector<NamedTensor<T>>& buffers) const {
    conv1_.collect(prefix + ".conv1", params);
    bn1_.collect(prefix + ".bn1", params);
    conv2_.collect(prefix + ".conv2", params);
    bn2_.collect(prefix + ".bn2", params);
    head1_.collect(prefix + ".head1", params);
    bn3_.collect(prefix + ".bn3", params);
    head2_.collect(prefix + ".head2", params);
    bn4_.collect(prefix + ".bn4", params);
    bn1_.collect_buffers(prefix + ".bn1", buffers);
    bn2_.collect_buffers(prefix + ".bn2", buffers);
    bn3_.collect_buffers(prefix + ".bn3", buffers);
    bn4_.collect_buffers(prefix + ".bn4", buffers);
  }

 private:
  Conv<T> conv1_;
  BatchNorm<T> bn1_;
  Conv<T> conv2_;
  BatchNorm<T> bn2_;
  Conv<T> head1_;
  BatchNorm<T> bn3_;
  Conv<T> head2_;
  BatchNorm<T> bn4_;
};

// How the weight noise scale is read from the configured number.
enum class NoiseScale { std_dev, variance };

struct RoutingConfig {
  int iterations = 2;
  double noise_sigma = 0.01;
  NoiseScale noise_scale = NoiseScale::std_dev;
  Mode mode = Mode::train;

  void validate() const {
    if (iterations < 1) throw UsageError("routing iterations must be >= 1, got " + std::to_string(iterations));
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
      throw UsageError("noise sigma must be a finite value >= 0");
  }

  // Standard deviation actually applied; zero outside training.
  double effective_sigma() const {
    if (mode == Mode::eval) return 0.0;
    return noise_scale == NoiseScale::std_dev ? noise_sigma : std::sqrt(noise_sigma);
  }
};

template <typename T>
struct RoutingState {
  Tensor<T> predictions;             // uhat [N,I,J,m]
  Tensor<T> logits;                  // b [N,I,J] after the last update
  std::vector<Tensor<T>> couplings;  // c [N,I,J] per iteration
  Tensor<T> s;                       // [N,J,m] of the last iteration
  Tensor<T> v;                       // [N,J,m]
};

/// Dynamic routing with Gaussian weight noise and a squash on the inputs.
///
/// u is [N,I,n] (or [I,n] for one sample); w is [I,J,m,n], or [I,1,m,n] to
/// share one matrix per input capsule across all `outputs`. In train mode
/// with positive sigma, noise is drawn from `noise_rng` into a copy of w.
template <typename T>
RoutingState<T> route(const Tensor<T>& u, const Tensor<T>& w, std::size_t outputs, const RoutingConfig& cfg,
                      Rng* noise_rng) {
  cfg.validate();
  if (u.rank() == 2) {
    auto state = route(ops::reshape(u, {1, u.dim(0), u.dim(1)}), w, outputs, cfg, noise_rng);
    return state;
  }
  if (u.rank() != 3) throw UsageError("route: inputs must be [N,I,n] or [I,n], got " + shape_str(u.shape()));
  if (w.rank() != 4 || w.dim(0) != u.dim(1) || w.dim(3) != u.dim(2))
    throw UsageError("route: weights " + shape_str(w.shape()) + " do not match inputs " + shape_str(u.shape()));
  if (outputs < 1) throw UsageError("route: need at least one output capsule");

  Tensor<T> w_hat = w;
  const double sigma = cfg.effective_sigma();
  if (sigma > 0.0) {
    if (!noise_rng) throw UsageError("route: train-mode noise requires an rng");
    std::vector<T> noise(w.numel());
    for (auto& z : noise) z = static_cast<T>(sigma * noise_rng->normal());
    w_hat = ops::add(w, Tensor<T>(w.shape(), std::move(noise)));
  }

  RoutingState<T> st;
  st.predictions = ops::capsule_transform(ops::squash(u), w_hat, outputs);
  const std::size_t n = u.dim(0), ni = u.dim(1);
  Tensor<T> b = Tensor<T>::zeros({n, ni, outputs});
  for (int it = 0; it < cfg.iterations; ++it) {
    Tensor<T> c = ops::softmax(b, 2);
    st.couplings.push_back(c);
    st.s = ops::couple(c, st.predictions);
    st.v = ops::squash(st.s);
    b = ops::add(b, ops::agree(st.predictions, st.v));
  }
  st.logits = b;
  return st;
}

/// Fake-class probability from output capsules v [N,2,m]: column-wise softmax
/// over (real, fake), averaged over the m columns. Returns [N].
template <typename T>
Tensor<T> predict(const Tensor<T>& v) {
  if (v.rank() != 3 || v.dim(1) != 2) throw UsageError("predict: expected [N,2,m], got " + shape_str(v.shape()));
  return ops::mean_axis(ops::select(ops::softmax(v, 1), 1, 1), 1);
}

template <typename T>
struct Prediction {
  T y_hat = T(0.5);  // probability of fake
  T p_real = T(0.5);
  T p_fake = T(0.5);
  std::size_t m = 0;
};

template <typename T>
Prediction<T> predict(const std::vector<T>& v_real, const std::vector<T>& v_fake) {
  if (v_real.empty()) throw UsageError("predict: capsule dimension must be >= 1");
  if (v_real.size() != v_fake.size()) throw UsageError("predict: output capsules differ in dimension");
  const std::size_t m = v_real.size();
  std::vector<T> stacked(v_real);
  stacked.insert(stacked.end(), v_fake.begin(), v_fake.end());
  const T y = predict(Tensor<T>({1, 2, m}, std::move(stacked))).item();
  Prediction<T> p;
  p.y_hat = y;
  p.p_fake = y;
  p.p_real = T(1) - y;
  p.m = m;
  return p;
}

/// Cross-entropy of one prediction; y must be 0 (real) or 1 (fake).
template <typename T>
T loss(int y, T y_hat) {
  return ops::binary_cross_entropy(Tensor<T>::scalar(y_hat), {y}).item();
}

enum class WeightSharing { per_pair, per_input };

inline const char* sharing_name(WeightSharing s) { return s == WeightSharing::per_pair ? "per_pair" : "per_input"; }

inline WeightSharing parse_sharing(const std::string& s) {
  if (s == "per_pair") return WeightSharing::per_pair;
  if (s == "per_input") return WeightSharing::per_input;
  throw UsageError("unknown weight sharing '" + s + "' (expected per_pair or per_input)");
}

struct CapsNetConfig {
  CapsuleLayout layout;
  std::size_t primary_capsules = 3;
  std::size_t output_capsules = 2;
  std::size_t output_dim = 4;
  WeightSharing sharing = WeightSharing::per_pair;

  Shape weight_shape() const {
    return {primary_capsules, sharing == WeightSharing::per_pair ? output_capsules : std::size_t{1}, output_dim,
            layout.capsule_dim()};
  }
};

template <typename T>
struct CapsuleOutputs {
  Tensor<T> u;  // primary capsule outputs [N,I,n] before the routing squash
  RoutingState<T> routing;
  Tensor<T> y_hat;  // [N]
};

/// Primary capsules, routing weights and the prediction head. Output capsule
/// 0 is "real", output capsule 1 is "fake".
template <typename T>
class CapsuleNet {
 public:
  CapsuleNet() = default;

  CapsuleNet(const CapsNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.primary_capsules < 1) throw UsageError("need at least one primary capsule");
    if (cfg.output_capsules != 2) throw UsageError("the prediction head needs exactly two output capsules");
    for (std::size_t i = 0; i < cfg.primary_capsules; ++i) capsules_.emplace_back(cfg.layout, rng);
    const T bound = std::sqrt(T(1) / static_cast<T>(cfg.layout.capsule_dim()));
    weights_ = uniform_tensor<T>(cfg.weight_shape(), bound, rng, true);
  }

  const CapsNetConfig& config() const { return cfg_; }
  const Tensor<T>& weights() const { return weights_; }

  CapsuleOutputs<T> forward(const Tensor<T>& features, const RoutingConfig& routing, Rng* noise_rng) const {
    Tensor<T> x = features;
    if (x.rank() == 3) x = ops::reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    if (x.rank() != 4 || x.dim(1) != cfg_.layout.in_channels)
      throw UsageError("capsule network expects [N," + std::to_string(cfg_.layout.in_channels) +
                       ",H,W] features, got " + shape_str(features.shape()));
    std::vector<Tensor<T>> outs;
    for (const auto& cap : capsules_) outs.push_back(cap.forward(x, routing.mode));
    CapsuleOutputs<T> result;
    result.u = ops::stack(outs, 1);
    result.routing = route(result.u, weights_, cfg_.output_capsules, routing, noise_rng);
    result.y_hat = predict(result.routing.v);
    return result;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> params, buffers;
    collect(params, buffers);
    return params;
  }

  std::vector<NamedTensor<T>> buffers() const {
    std::vector<NamedTensor<T>> params, buffers;
    collect(params, buffers);
    return buffers;
  }

 private:
  void collect(std::vector<NamedTensor<T>>& params, std::vector<NamedTensor<T>>& buffers) const {
    for (std::size_t i = 0; i < capsules_.size(); ++i)
      capsules_[i].collect("capsule" + std::to_string(i), params, buffers);
    params.push_back({"routing.W", weights_});
  }

  CapsNetConfig cfg_;
  std::vector<PrimaryCapsule<T>> capsules_;
  Tensor<T> weights_;
};

}  // namespace capsf
