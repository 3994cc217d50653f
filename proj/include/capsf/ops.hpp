#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "capsf/tensor.hpp"

// Differentiable operations on Tensor<T>. Every op validates shapes, computes
// its forward values eagerly and, when an input tracks gradients, records a
// closure that accumulates the vector-Jacobian product into its inputs.
namespace capsf::ops {

namespace detail {

using capsf::detail::make_result;
using capsf::detail::Node;

template <typename T>
std::vector<T>* grad_of(Node<T>& self, std::size_t input) {
  auto& in = *self.inputs[input];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw UsageError(capsf::detail::concat(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                                           shape_str(b.shape())));
  }
}

// Splits a shape around `axis` into (outer, axis length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Unpacks gather-style patches: cols[(c*kh + ki)*kw + kj][oy*ow + ox].
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad_h, std::size_t pad_w,
            std::size_t oh, std::size_t ow, T* cols) {
  const std::size_t plane = oh * ow;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((c * kh + ki) * kw + kj) * plane;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad_h);
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= static_cast<long>(height)) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = img + (c * height + static_cast<std::size_t>(iy)) * width;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad_w);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(width)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad_h, std::size_t pad_w,
            std::size_t oh, std::size_t ow, T* img) {
  const std::size_t plane = oh * ow;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((c * kh + ki) * kw + kj) * plane;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad_h);
          if (iy < 0 || iy >= static_cast<long>(height)) continue;
          T* dst = img + (c * height + static_cast<std::size_t>(iy)) * width;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad_w);
            if (ix >= 0 && ix < static_cast<long>(width)) dst[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

// Column tile of the GEMM kernels; four output rows of this width stay in L1.
inline constexpr std::size_t kGemmTile = 256;

// out[M,P] += A[M,K] * B[K,P]
template <typename T>
void gemm_acc(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t j0 = 0; j0 < p; j0 += kGemmTile) {
    const std::size_t j1 = std::min(p, j0 + kGemmTile);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      T* o0 = out + i * p;
      T* o1 = o0 + p;
      T* o2 = o1 + p;
      T* o3 = o2 + p;
      const T* a0 = a + i * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T x0 = a0[kk], x1 = a0[k + kk], x2 = a0[2 * k + kk], x3 = a0[3 * k + kk];
        const T* br = b + kk * p;
        for (std::size_t j = j0; j < j1; ++j) {
          const T bv = br[j];
          o0[j] += x0 * bv;
          o1[j] += x1 * bv;
          o2[j] += x2 * bv;
          o3[j] += x3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      T* orow = out + i * p;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T av = a[i * k + kk];
        const T* brow = b + kk * p;
        for (std::size_t j = j0; j < j1; ++j) orow[j] += av * brow[j];
      }
    }
  }
}

// out[M,K] += A[M,P] * B[K,P]^T, with B supplied transposed as Bt[P,K].
template <typename T>
void gemm_acc_bt(const T* a, const T* bt, T* out, std::size_t m, std::size_t p, std::size_t k) {
  gemm_acc(a, bt, out, m, p, k);
}

// out[K,P] += A[M,K]^T * B[M,P]
template <typename T>
void gemm_acc_at(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t j0 = 0; j0 < p; j0 += kGemmTile) {
    const std::size_t j1 = std::min(p, j0 + kGemmTile);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      const T* b0 = b + i * p;
      const T* b1 = b0 + p;
      const T* b2 = b1 + p;
      const T* b3 = b2 + p;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T x0 = a[i * k + kk], x1 = a[(i + 1) * k + kk], x2 = a[(i + 2) * k + kk], x3 = a[(i + 3) * k + kk];
        T* orow = out + kk * p;
        for (std::size_t j = j0; j < j1; ++j) orow[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
      }
    }
    for (; i < m; ++i) {
      const T* brow = b + i * p;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T av = a[i * k + kk];
        T* orow = out + kk * p;
        for (std::size_t j = j0; j < j1; ++j) orow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
void transpose(const T* src, T* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

struct ConvGeometry {
  std::size_t batch, in_c, h, w, out_c, kh, kw, stride, pad_h, pad_w, oh, ow;
  bool batched;
};

template <typename T>
ConvGeometry conv_geometry(const char* op, const Tensor<T>& input, const Tensor<T>& kernel,
                           const Tensor<T>& bias, std::size_t stride, std::size_t pad,
                           bool one_d) {
  const std::size_t spatial = one_d ? 1 : 2;
  const std::size_t r = input.rank();
  if (r != spatial + 1 && r != spatial + 2) {
    throw UsageError(capsf::detail::concat(op, ": input must have rank ", spatial + 1, " or ",
                                           spatial + 2, ", got ", shape_str(input.shape())));
  }
  if (kernel.rank() != spatial + 2) {
    throw UsageError(capsf::detail::concat(op, ": kernel must have rank ", spatial + 2, ", got ",
                                           shape_str(kernel.shape())));
  }
  if (stride == 0) throw UsageError(capsf::detail::concat(op, ": stride must be positive"));
  ConvGeometry g{};
  g.batched = (r == spatial + 2);
  const std::size_t off = g.batched ? 1 : 0;
  g.batch = g.batched ? input.dim(0) : 1;
  g.in_c = input.dim(off);
  g.h = one_d ? 1 : input.dim(off + 1);
  g.w = input.dim(off + spatial);
  g.out_c = kernel.dim(0);
  g.kh = one_d ? 1 : kernel.dim(2);
  g.kw = kernel.dim(one_d ? 2 : 3);
  g.stride = stride;
  g.pad_h = one_d ? 0 : pad;
  g.pad_w = pad;
  if (kernel.dim(1) != g.in_c) {
    throw UsageError(capsf::detail::concat(op, ": kernel expects ", kernel.dim(1),
                                           " input channels but input has ", g.in_c, " (input ",
                                           shape_str(input.shape()), ", kernel ",
                                           shape_str(kernel.shape()), ")"));
  }
  if (bias.rank() != 1 || bias.dim(0) != g.out_c) {
    throw UsageError(capsf::detail::concat(op, ": bias shape ", shape_str(bias.shape()),
                                           " does not match ", g.out_c, " output channels"));
  }
  const std::size_t vpad = g.pad_h;
  if (g.h + 2 * vpad < g.kh || g.w + 2 * pad < g.kw) {
    throw UsageError(capsf::detail::concat(op, ": kernel ", shape_str(kernel.shape()),
                                           " larger than padded input ", shape_str(input.shape()),
                                           " with padding ", pad));
  }
  g.oh = (g.h + 2 * vpad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

template <typename T>
Tensor<T> conv_impl(const char* op, const Tensor<T>& input, const Tensor<T>& kernel,
                    const Tensor<T>& bias, std::size_t stride, std::size_t pad, bool one_d) {
  const ConvGeometry g = conv_geometry(op, input, kernel, bias, stride, pad, one_d);
  const std::size_t kdim = g.in_c * g.kh * g.kw;
  const std::size_t plane = g.oh * g.ow;
  const std::size_t in_size = g.in_c * g.h * g.w;
  const std::size_t out_size = g.out_c * plane;

  std::vector<T> out(g.batch * out_size);
  std::vector<T> cols(kdim * plane);
  const T* x = input.data().data();
  const T* k = kernel.data().data();
  const T* b = bias.data().data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(x + n * in_size, g.in_c, g.h, g.w, g.kh, g.kw, g.stride, g.pad_h, g.pad_w, g.oh,
           g.ow, cols.data());
    T* o = out.data() + n * out_size;
    for (std::size_t c = 0; c < g.out_c; ++c) std::fill(o + c * plane, o + (c + 1) * plane, b[c]);
    gemm_acc(k, cols.data(), o, g.out_c, kdim, plane);
  }

  Shape shape;
  if (g.batched) shape.push_back(g.batch);
  shape.push_back(g.out_c);
  if (!one_d) shape.push_back(g.oh);
  shape.push_back(g.ow);

  return make_result<T>(
      op, std::move(shape), std::move(out), {input.node(), kernel.node(), bias.node()},
      [g, kdim, plane, in_size, out_size](Node<T>& self) {
        const auto& xin = self.inputs[0]->data;
        const auto& kin = self.inputs[1]->data;
        auto* dx = grad_of(self, 0);
        auto* dk = grad_of(self, 1);
        auto* db = grad_of(self, 2);
        std::vector<T> cols(kdim * plane), cols_t(plane * kdim), dcols;
        if (dx) dcols.resize(kdim * plane);
        for (std::size_t n = 0; n < g.batch; ++n) {
          const T* go = self.grad.data() + n * out_size;
          if (db) {
            for (std::size_t c = 0; c < g.out_c; ++c) {
              T acc = 0;
              for (std::size_t p = 0; p < plane; ++p) acc += go[c * plane + p];
              (*db)[c] += acc;
            }
          }
          if (dk) {
            im2col(xin.data() + n * in_size, g.in_c, g.h, g.w, g.kh, g.kw, g.stride, g.pad_h,
                   g.pad_w, g.oh, g.ow, cols.data());
            transpose(cols.data(), cols_t.data(), kdim, plane);
            gemm_acc_bt(go, cols_t.data(), dk->data(), g.out_c, plane, kdim);
          }
          if (dx) {
            std::fill(dcols.begin(), dcols.end(), T(0));
            gemm_acc_at(kin.data(), go, dcols.data(), g.out_c, kdim, plane);
            col2im(dcols.data(), g.in_c, g.h, g.w, g.kh, g.kw, g.stride, g.pad_h, g.pad_w, g.oh,
                   g.ow, dx->data() + n * in_size);
          }
        }
      });
}

}  // namespace detail

using detail::make_result;
using detail::Node;

/// 2-D cross-correlation. Input [C,H,W] or [N,C,H,W], kernel [O,C,kH,kW].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  return detail::conv_impl("conv2d", input, kernel, bias, stride, padding, false);
}

/// 1-D cross-correlation. Input [C,L] or [N,C,L], kernel [O,C,k].
template <typename T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  return detail::conv_impl("conv1d", input, kernel, bias, stride, padding, true);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
  return make_result<T>("relu", x.shape(), std::move(out), {x.node()}, [](Node<T>& self) {
    auto* dx = detail::grad_of(self, 0);
    const auto& in = self.inputs[0]->data;
    for (std::size_t i = 0; i < in.size(); ++i)
      if (in[i] > T(0)) (*dx)[i] += self.grad[i];
  });
}

/// 2x2 max pooling with stride 2 over the last two axes. Odd trailing rows or
/// columns are dropped. Ties resolve to the first element in scan order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
  if (x.rank() < 2) throw UsageError("maxpool2d: input must have rank >= 2, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  if (h < 2 || w < 2) throw UsageError("maxpool2d: spatial size below 2 in " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  const std::size_t planes = x.numel() / (h * w);
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  std::vector<T> out(planes * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  const auto in = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            std::size_t idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
            if (in[idx] > in[best]) best = idx;
          }
        std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = in[best];
        argmax[o] = best;
      }
    }
  }
  return make_result<T>("maxpool2d", std::move(shape), std::move(out), {x.node()},
                        [argmax = std::move(argmax)](Node<T>& self) {
                          auto* dx = detail::grad_of(self, 0);
                          for (std::size_t o = 0; o < argmax.size(); ++o)
                            (*dx)[argmax[o]] += self.grad[o];
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>("add", a.shape(), std::move(out), {a.node(), b.node()},
                        [](Node<T>& self) {
                          for (std::size_t k = 0; k < 2; ++k)
                            if (auto* d = detail::grad_of(self, k))
                              for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a.node(), b.node()},
                        [](Node<T>& self) {
                          if (auto* d = detail::grad_of(self, 0))
                            for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i];
                          if (auto* d = detail::grad_of(self, 1))
                            for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] -= self.grad[i];
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a.node(), b.node()},
                        [](Node<T>& self) {
                          const auto& av = self.inputs[0]->data;
                          const auto& bv = self.inputs[1]->data;
                          if (auto* d = detail::grad_of(self, 0))
                            for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i] * bv[i];
                          if (auto* d = detail::grad_of(self, 1))
                            for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i] * av[i];
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return make_result<T>("scale", a.shape(), std::move(out), {a.node()}, [factor](Node<T>& self) {
    auto* d = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i] * factor;
  });
}

/// Sum of all elements, shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return make_result<T>("sum", {1}, {acc}, {a.node()}, [](Node<T>& self) {
    auto* d = detail::grad_of(self, 0);
    for (auto& g : *d) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Mean over one axis; the axis is removed (a rank-1 input yields shape [1]).
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) throw UsageError("mean_axis: axis out of range for " + shape_str(a.shape()));
  const auto s = detail::split_axis(a.shape(), axis);
  std::vector<T> out(s.outer * s.inner, T(0));
  const auto in = a.data();
  const T inv = T(1) / static_cast<T>(s.len);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += in[(o * s.len + l) * s.inner + i];
  for (auto& v : out) v *= inv;
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<long>(axis));
  if (shape.empty()) shape.push_back(1);
  return make_result<T>("mean_axis", std::move(shape), std::move(out), {a.node()},
                        [s, inv](Node<T>& self) {
                          auto* d = detail::grad_of(self, 0);
                          for (std::size_t o = 0; o < s.outer; ++o)
                            for (std::size_t l = 0; l < s.len; ++l)
                              for (std::size_t i = 0; i < s.inner; ++i)
                                (*d)[(o * s.len + l) * s.inner + i] += self.grad[o * s.inner + i] * inv;
                        });
}

/// Picks one index along an axis; the axis is removed.
template <typename T>
Tensor<T> select(const Tensor<T>& a, std::size_t axis, std::size_t index) {
  if (axis >= a.rank() || index >= a.dim(axis)) {
    throw UsageError(capsf::detail::concat("select: index ", index, " on axis ", axis,
                                           " out of range for ", shape_str(a.shape())));
  }
  const auto s = detail::split_axis(a.shape(), axis);
  std::vector<T> out(s.outer * s.inner);
  const auto in = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] = in[(o * s.len + index) * s.inner + i];
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<long>(axis));
  if (shape.empty()) shape.push_back(1);
  return make_result<T>("select", std::move(shape), std::move(out), {a.node()},
                        [s, index](Node<T>& self) {
                          auto* d = detail::grad_of(self, 0);
                          for (std::size_t o = 0; o < s.outer; ++o)
                            for (std::size_t i = 0; i < s.inner; ++i)
                              (*d)[(o * s.len + index) * s.inner + i] += self.grad[o * s.inner + i];
                        });
}

/// Same values, new shape.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw UsageError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {a.node()}, [](Node<T>& self) {
    auto* d = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i];
  });
}

/// Stacks equally shaped tensors along a new axis.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("stack: no inputs");
  const Shape& base = parts[0].shape();
  if (axis > base.size()) throw UsageError("stack: axis out of range");
  for (const auto& p : parts) detail::require_same_shape("stack", parts[0], p);
  Shape shape = base;
  shape.insert(shape.begin() + static_cast<long>(axis), parts.size());
  const auto s = detail::split_axis(shape, axis);
  std::vector<T> out(shape_numel(shape));
  std::vector<std::shared_ptr<Node<T>>> inputs;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto in = parts[k].data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) out[(o * s.len + k) * s.inner + i] = in[o * s.inner + i];
    inputs.push_back(parts[k].node());
  }
  return make_result<T>("stack", std::move(shape), std::move(out), std::move(inputs),
                        [s](Node<T>& self) {
                          for (std::size_t k = 0; k < s.len; ++k) {
                            auto* d = detail::grad_of(self, k);
                            if (!d) continue;
                            for (std::size_t o = 0; o < s.outer; ++o)
                              for (std::size_t i = 0; i < s.inner; ++i)
                                (*d)[o * s.inner + i] += self.grad[(o * s.len + k) * s.inner + i];
                          }
                        });
}

/// y = A x for A [m,n], x [n].
template <typename T>
Tensor<T> matvec(const Tensor<T>& a, const Tensor<T>& x) {
  if (a.rank() != 2 || x.rank() != 1 || a.dim(1) != x.dim(0)) {
    throw UsageError("matvec: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(x.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a[i * n + j] * x[j];
  return make_result<T>("matvec", {m}, std::move(out), {a.node(), x.node()}, [m, n](Node<T>& self) {
    const auto& av = self.inputs[0]->data;
    const auto& xv = self.inputs[1]->data;
    if (auto* d = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*d)[i * n + j] += self.grad[i] * xv[j];
    if (auto* d = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*d)[j] += self.grad[i] * av[i * n + j];
  });
}

/// Numerically stable softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw UsageError("softmax: axis out of range for " + shape_str(x.shape()));
  const auto s = detail::split_axis(x.shape(), axis);
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
      T mx = in[at(0)];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, in[at(l)]);
      T total = 0;
      for (std::size_t l = 0; l < s.len; ++l) {
        out[at(l)] = std::exp(in[at(l)] - mx);
        total += out[at(l)];
      }
      for (std::size_t l = 0; l < s.len; ++l) out[at(l)] /= total;
    }
  }
  return make_result<T>("softmax", x.shape(), std::move(out), {x.node()}, [s](Node<T>& self) {
    auto* d = detail::grad_of(self, 0);
    const auto& y = self.data;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
        T dot = 0;
        for (std::size_t l = 0; l < s.len; ++l) dot += self.grad[at(l)] * y[at(l)];
        for (std::size_t l = 0; l < s.len; ++l) (*d)[at(l)] += y[at(l)] * (self.grad[at(l)] - dot);
      }
    }
  });
}

/// Squash nonlinearity applied to every vector along the last axis:
/// v = |s|^2 / (1 + |s|^2) * s / (|s| + eps). The zero vector maps to zero.
template <typename T>
Tensor<T> squash(const Tensor<T>& s, T eps = T(1e-12)) {
  const std::size_t dim = s.dim(s.rank() - 1);
  const std::size_t count = s.numel() / dim;
  std::vector<T> out(s.numel());
  const auto in = s.data();
  for (std::size_t v = 0; v < count; ++v) {
    T n2 = 0;
    for (std::size_t k = 0; k < dim; ++k) n2 += in[v * dim + k] * in[v * dim + k];
    const T n = std::sqrt(n2);
    const T f = n2 / ((T(1) + n2) * (n + eps));
    for (std::size_t k = 0; k < dim; ++k) out[v * dim + k] = f * in[v * dim + k];
  }
  return make_result<T>("squash", s.shape(), std::move(out), {s.node()}, [dim, count, eps](Node<T>& self) {
    auto* d = detail::grad_of(self, 0);
    const auto& in = self.inputs[0]->data;
    for (std::size_t v = 0; v < count; ++v) {
      const T* x = in.data() + v * dim;
      const T* g = self.grad.data() + v * dim;
      T n2 = 0, gx = 0;
      for (std::size_t k = 0; k < dim; ++k) {
        n2 += x[k] * x[k];
        gx += g[k] * x[k];
      }
      const T n = std::sqrt(n2);
      // f(r) = r^2 / A with A = (1 + r^2)(r + eps); f'(r)/r = (2A - r A') / A^2.
      const T a = (T(1) + n2) * (n + eps);
      const T da = T(2) * n * (n + eps) + (T(1) + n2);
      const T f = n2 / a;
      const T fr = (T(2) * a - n * da) / (a * a);
      for (std::size_t k = 0; k < dim; ++k) (*d)[v * dim + k] += f * g[k] + fr * gx * x[k];
    }
  });
}

/// Per-channel spatial mean and population variance.
/// [C,H,W] -> [2,C] or [N,C,H,W] -> [N,2,C]; row 0 holds means, row 1 variances.
template <typename T>
Tensor<T> stats_pool(const Tensor<T>& x) {
  if (x.rank() != 3 && x.rank() != 4) throw UsageError("stats_pool: expected [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
  const bool batched = x.rank() == 4;
  const std::size_t n = batched ? x.dim(0) : 1;
  const std::size_t c = x.dim(batched ? 1 : 0);
  const std::size_t p = x.dim(x.rank() - 2) * x.dim(x.rank() - 1);
  std::vector<T> out(n * 2 * c);
  std::vector<T> means(n * c);
  const auto in = x.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* v = in.data() + (b * c + ch) * p;
      T mu = 0;
      for (std::size_t i = 0; i < p; ++i) mu += v[i];
      mu /= static_cast<T>(p);
      T var = 0;
      for (std::size_t i = 0; i < p; ++i) var += (v[i] - mu) * (v[i] - mu);
      var /= static_cast<T>(p);
      out[(b * 2 + 0) * c + ch] = mu;
      out[(b * 2 + 1) * c + ch] = var;
      means[b * c + ch] = mu;
    }
  }
  Shape shape = batched ? Shape{n, 2, c} : Shape{2, c};
  return make_result<T>("stats_pool", std::move(shape), std::move(out), {x.node()},
                        [n, c, p, means = std::move(means)](Node<T>& self) {
                          auto* d = detail::grad_of(self, 0);
                          const auto& in = self.inputs[0]->data;
                          const T inv = T(1) / static_cast<T>(p);
                          for (std::size_t b = 0; b < n; ++b) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              const T gmu = self.grad[(b * 2 + 0) * c + ch];
                              const T gvar = self.grad[(b * 2 + 1) * c + ch];
                              const T mu = means[b * c + ch];
                              const std::size_t base = (b * c + ch) * p;
                              for (std::size_t i = 0; i < p; ++i)
                                (*d)[base + i] += gmu * inv + gvar * T(2) * (in[base + i] - mu) * inv;
                            }
                          }
                        });
}

enum class Mode { train, eval };

inline const char* mode_name(Mode m) { return m == Mode::train ? "train" : "eval"; }

/// Running statistics of one batch-norm layer. Mutated by train-mode calls.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormStats(std::size_t channels = 1)
      : running_mean(Tensor<T>::zeros({channels})), running_var(Tensor<T>::full({channels}, T(1))) {}
};

/// Batch normalization over axis 1 of [N,C,...]. Train mode normalizes with
/// batch statistics (population variance) and updates the running averages
/// (unbiased variance); eval mode uses the running averages.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormStats<T>& stats, Mode mode) {
  if (x.rank() < 2) throw UsageError("batchnorm: expected [N,C,...], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.numel() / (n * c);
  if (gamma.numel() != c || beta.numel() != c || stats.running_mean.numel() != c ||
      stats.running_var.numel() != c) {
    throw UsageError(capsf::detail::concat("batchnorm: parameters sized for ", gamma.numel(),
                                           " channels but input ", shape_str(x.shape()), " has ", c));
  }
  const std::size_t count = n * inner;
  if (mode == Mode::train && count < 1) throw UsageError("batchnorm: empty batch in train mode");
  std::vector<T> mean(c), inv_std(c);
  const auto in = x.data();
  if (mode == Mode::train) {
    auto rm = stats.running_mean.mutable_data();
    auto rv = stats.running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      T mu = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) mu += in[(b * c + ch) * inner + i];
      mu /= static_cast<T>(count);
      T var = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
          const T dlt = in[(b * c + ch) * inner + i] - mu;
          var += dlt * dlt;
        }
      const T unbiased = count > 1 ? var / static_cast<T>(count - 1) : T(0);
      var /= static_cast<T>(count);
      mean[ch] = mu;
      inv_std[ch] = T(1) / std::sqrt(var + stats.eps);
      rm[ch] = (T(1) - stats.momentum) * rm[ch] + stats.momentum * mu;
      rv[ch] = (T(1) - stats.momentum) * rv[ch] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(stats.running_var[ch] + stats.eps);
    }
  }
  std::vector<T> out(x.numel()), xhat(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (b * c + ch) * inner + i;
        xhat[idx] = (in[idx] - mean[ch]) * inv_std[ch];
        out[idx] = gamma[ch] * xhat[idx] + beta[ch];
      }
  return make_result<T>(
      "batchnorm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [n, c, inner, count, mode, inv_std = std::move(inv_std), xhat = std::move(xhat)](Node<T>& self) {
        const auto& g = self.grad;
        const auto& gam = self.inputs[1]->data;
        auto* dx = detail::grad_of(self, 0);
        auto* dgamma = detail::grad_of(self, 1);
        auto* dbeta = detail::grad_of(self, 2);
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_g = 0, sum_gx = 0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * c + ch) * inner + i;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (dgamma) (*dgamma)[ch] += sum_gx;
          if (dbeta) (*dbeta)[ch] += sum_g;
          if (!dx) continue;
          const T k = gam[ch] * inv_std[ch];
          const T m = static_cast<T>(count);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * c + ch) * inner + i;
              if (mode == Mode::train)
                (*dx)[idx] += k * (g[idx] - sum_g / m - xhat[idx] * sum_gx / m);
              else
                (*dx)[idx] += k * g[idx];
            }
        }
      });
}

/// Capsule prediction vectors: out[n,i,j,:] = W[i,j] x[n,i,:].
/// x is [N,I,d]; W is [I,J,m,d], or [I,1,m,d] shared across `outputs` capsules.
template <typename T>
Tensor<T> capsule_transform(const Tensor<T>& x, const Tensor<T>& w, std::size_t outputs) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(0) != x.dim(1) || w.dim(3) != x.dim(2) ||
      (w.dim(1) != outputs && w.dim(1) != 1)) {
    throw UsageError(capsf::detail::concat("capsule_transform: inputs ", shape_str(x.shape()),
                                           " incompatible with weights ", shape_str(w.shape()),
                                           " for ", outputs, " output capsules"));
  }
  const std::size_t n = x.dim(0), ni = x.dim(1), d = x.dim(2), nj = outputs, m = w.dim(2);
  const bool shared = w.dim(1) == 1;
  auto widx = [=](std::size_t i, std::size_t j) { return (i * (shared ? 1 : nj) + (shared ? 0 : j)) * m * d; };
  std::vector<T> out(n * ni * nj * m, T(0));
  const auto xv = x.data();
  const auto wv = w.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < ni; ++i)
      for (std::size_t j = 0; j < nj; ++j) {
        const T* wm = wv.data() + widx(i, j);
        const T* xi = xv.data() + (b * ni + i) * d;
        T* o = out.data() + ((b * ni + i) * nj + j) * m;
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t k = 0; k < d; ++k) o[r] += wm[r * d + k] * xi[k];
      }
  return make_result<T>("capsule_transform", {n, ni, nj, m}, std::move(out), {x.node(), w.node()},
                        [=](Node<T>& self) {
                          const auto& xv = self.inputs[0]->data;
                          const auto& wv = self.inputs[1]->data;
                          auto* dx = detail::grad_of(self, 0);
                          auto* dw = detail::grad_of(self, 1);
                          for (std::size_t b = 0; b < n; ++b)
                            for (std::size_t i = 0; i < ni; ++i)
                              for (std::size_t j = 0; j < nj; ++j) {
                                const T* g = self.grad.data() + ((b * ni + i) * nj + j) * m;
                                const std::size_t wo = widx(i, j);
                                const std::size_t xo = (b * ni + i) * d;
                                for (std::size_t r = 0; r < m; ++r)
                                  for (std::size_t k = 0; k < d; ++k) {
                                    if (dw) (*dw)[wo + r * d + k] += g[r] * xv[xo + k];
                                    if (dx) (*dx)[xo + k] += g[r] * wv[wo + r * d + k];
                                  }
                              }
                        });
}

/// Weighted sum of predictions: s[n,j,:] = sum_i c[n,i,j] uhat[n,i,j,:].
template <typename T>
Tensor<T> couple(const Tensor<T>& c, const Tensor<T>& uhat) {
  if (c.rank() != 3 || uhat.rank() != 4 || c.dim(0) != uhat.dim(0) || c.dim(1) != uhat.dim(1) ||
      c.dim(2) != uhat.dim(2)) {
    throw UsageError("couple: coefficients " + shape_str(c.shape()) + " incompatible with predictions " +
                     shape_str(uhat.shape()));
  }
  const std::size_t n = uhat.dim(0), ni = uhat.dim(1), nj = uhat.dim(2), m = uhat.dim(3);
  std::vector<T> out(n * nj * m, T(0));
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < ni; ++i)
      for (std::size_t j = 0; j < nj; ++j) {
        const T cij = c[(b * ni + i) * nj + j];
        for (std::size_t r = 0; r < m; ++r) out[(b * nj + j) * m + r] += cij * uhat[((b * ni + i) * nj + j) * m + r];
      }
  return make_result<T>("couple", {n, nj, m}, std::move(out), {c.node(), uhat.node()}, [=](Node<T>& self) {
    const auto& cv = self.inputs[0]->data;
    const auto& uv = self.inputs[1]->data;
    auto* dc = detail::grad_of(self, 0);
    auto* du = detail::grad_of(self, 1);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < ni; ++i)
        for (std::size_t j = 0; j < nj; ++j) {
          const std::size_t ci = (b * ni + i) * nj + j;
          const T* g = self.grad.data() + (b * nj + j) * m;
          T acc = 0;
          for (std::size_t r = 0; r < m; ++r) {
            acc += g[r] * uv[ci * m + r];
            if (du) (*du)[ci * m + r] += cv[ci] * g[r];
          }
          if (dc) (*dc)[ci] += acc;
        }
  });
}

/// Agreement logits: a[n,i,j] = uhat[n,i,j,:] . v[n,j,:].
template <typename T>
Tensor<T> agree(const Tensor<T>& uhat, const Tensor<T>& v) {
  if (uhat.rank() != 4 || v.rank() != 3 || v.dim(0) != uhat.dim(0) || v.dim(1) != uhat.dim(2) ||
      v.dim(2) != uhat.dim(3)) {
    throw UsageError("agree: predictions " + shape_str(uhat.shape()) + " incompatible with outputs " +
                     shape_str(v.shape()));
  }
  const std::size_t n = uhat.dim(0), ni = uhat.dim(1), nj = uhat.dim(2), m = uhat.dim(3);
  std::vector<T> out(n * ni * nj, T(0));
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < ni; ++i)
      for (std::size_t j = 0; j < nj; ++j) {
        T acc = 0;
        for (std::size_t r = 0; r < m; ++r) acc += uhat[((b * ni + i) * nj + j) * m + r] * v[(b * nj + j) * m + r];
        out[(b * ni + i) * nj + j] = acc;
      }
  return make_result<T>("agree", {n, ni, nj}, std::move(out), {uhat.node(), v.node()}, [=](Node<T>& self) {
    const auto& uv = self.inputs[0]->data;
    const auto& vv = self.inputs[1]->data;
    auto* du = detail::grad_of(self, 0);
    auto* dv = detail::grad_of(self, 1);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < ni; ++i)
        for (std::size_t j = 0; j < nj; ++j) {
          const std::size_t ci = (b * ni + i) * nj + j;
          const T g = self.grad[ci];
          for (std::size_t r = 0; r < m; ++r) {
            if (du) (*du)[ci * m + r] += g * vv[(b * nj + j) * m + r];
            if (dv) (*dv)[(b * nj + j) * m + r] += g * uv[ci * m + r];
          }
        }
  });
}

/// Mean binary cross-entropy of probabilities `p` against 0/1 `labels`.
/// Probabilities are clamped to [eps, 1 - eps]; clamped entries get zero gradient.
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& p, const std::vector<int>& labels, T eps = T(1e-7)) {
  if (p.numel() != labels.size()) {
    throw UsageError(capsf::detail::concat("binary_cross_entropy: ", p.numel(), " probabilities but ",
                                           labels.size(), " labels"));
  }
  for (int y : labels)
    if (y != 0 && y != 1) throw UsageError(capsf::detail::concat("binary_cross_entropy: label ", y, " not in {0,1}"));
  const std::size_t n = labels.size();
  T total = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const T q = std::clamp(p[k], eps, T(1) - eps);
    total -= labels[k] ? std::log(q) : std::log(T(1) - q);
  }
  total /= static_cast<T>(n);
  return make_result<T>("binary_cross_entropy", {1}, {total}, {p.node()}, [labels, eps, n](Node<T>& self) {
    auto* d = detail::grad_of(self, 0);
    const auto& pv = self.inputs[0]->data;
    for (std::size_t k = 0; k < n; ++k) {
      const T q = pv[k];
      if (q < eps || q > T(1) - eps) continue;
      const T dq = labels[k] ? -T(1) / q : T(1) / (T(1) - q);
      (*d)[k] += self.grad[0] * dq / static_cast<T>(n);
    }
  });
}

}  // namespace capsf::ops
