#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "capsf/ops.hpp"
#include "capsf/rng.hpp"
#include "capsf/tensor.hpp"

namespace capsf {

using ops::Mode;

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, T bound, Rng& rng, bool requires_grad) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-static_cast<double>(bound), static_cast<double>(bound)));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

// Convolution weights. Kernel [out, in, k...], bias [out]; both initialized
// uniformly in +-sqrt(1/fan_in).
template <typename T>
struct Conv {
  Tensor<T> kernel;
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv() = default;

  static Conv make2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                     std::size_t padding, Rng& rng, bool trainable = true) {
    Conv c;
    const T bound = std::sqrt(T(1) / static_cast<T>(in * k * k));
    c.kernel = uniform_tensor<T>({out, in, k, k}, bound, rng, trainable);
    c.bias = uniform_tensor<T>({out}, bound, rng, trainable);
    c.stride = stride;
    c.padding = padding;
    return c;
  }

  static Conv make1d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                     Rng& rng, bool trainable = true) {
    Conv c;
    const T bound = std::sqrt(T(1) / static_cast<T>(in * k));
    c.kernel = uniform_tensor<T>({out, in, k}, bound, rng, trainable);
    c.bias = uniform_tensor<T>({out}, bound, rng, trainable);
    c.stride = stride;
    return c;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return kernel.rank() == 4 ? ops::conv2d(x, kernel, bias, stride, padding)
                              : ops::conv1d(x, kernel, bias, stride, padding);
  }

  std::size_t parameter_count() const { return kernel.numel() + bias.numel(); }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& params) const {
    params.push_back({prefix + ".kernel", kernel});
    params.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  // mutable: eval-time forward is logically const, train-time forward updates
  // running statistics as a side effect.
  mutable ops::BatchNormStats<T> stats;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma(Tensor<T>::full({channels}, T(1), true)),
        beta(Tensor<T>::zeros({channels}, true)),
        stats(channels) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) const {
    return ops::batchnorm(x, gamma, beta, stats, mode);
  }

  std::size_t parameter_count() const { return gamma.numel() + beta.numel(); }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& params) const {
    params.push_back({prefix + ".gamma", gamma});
    params.push_back({prefix + ".beta", beta});
  }

  void collect_buffers(const std::string& prefix, std::vector<NamedTensor<T>>& buffers) const {
    buffers.push_back({prefix + ".running_mean", stats.running_mean});
    buffers.push_back({prefix + ".running_var", stats.running_var});
  }
};

}  // namespace capsf
