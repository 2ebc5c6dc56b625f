#include "xfeat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Core>

namespace xfeat::ops {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (!t.defined() || t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                     (t.defined() ? shape_to_string(t.shape()) : std::string("undefined")));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, padding, out_h, out_w;
};

// Column matrix [channels*k*k, out_h*out_w].
template <typename T>
void im2col(const T* src, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* line = src + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? T(0)
                                                                     : line[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dst) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          T* line = dst + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            if (ix >= 0 && ix < static_cast<long>(g.width)) {
              line[static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
            }
          }
        }
      }
    }
  }
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                     shape_to_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

struct LinearTap {
  std::size_t i0, i1;
  double frac;
};

// Half-pixel centres: output o samples input coordinate (o+0.5)*in/out - 0.5.
std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 >= in - 1) {
      taps[o] = {in - 1, in - 1, 0.0};
    } else {
      taps[o] = {i0, i0 + 1, src - static_cast<double>(i0)};
    }
  }
  return taps;
}

}  // namespace

double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::fabs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding, FlopCounter* counter, std::string_view layer) {
  require_rank(input, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin || weight.dim(3) != k) {
    throw ShapeError("conv2d '" + std::string(layer) + "': weight " +
                     shape_to_string(weight.shape()) + " incompatible with input " +
                     shape_to_string(input.shape()));
  }
  if ((k != 1 && k != 3) || (stride != 1 && stride != 2) ||
      padding != static_cast<int>((k - 1) / 2)) {
    throw ShapeError("conv2d '" + std::string(layer) + "': unsupported kernel/stride/padding");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv2d '" + std::string(layer) + "': bias length mismatch");
  }
  if (h + 2 * padding < k || w + 2 * padding < k) {
    throw ShapeError("conv2d '" + std::string(layer) + "': input smaller than kernel");
  }
  ConvGeometry g{cin, h, w, k, static_cast<std::size_t>(stride), static_cast<std::size_t>(padding),
                 (h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1};
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t patch = cin * k * k;
  const bool direct = (k == 1 && stride == 1);

  std::vector<T> out(n * cout * plane);
  std::vector<T> col(direct ? 0 : patch * plane);
  ConstMatMap<T> wmat(weight.data().data(), cout, patch);
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = input.data().data() + b * cin * h * w;
    if (!direct) im2col(src, g, col.data());
    ConstMatMap<T> cmat(direct ? src : col.data(), patch, plane);
    MatMap<T> omat(out.data() + b * cout * plane, cout, plane);
    omat.noalias() = wmat * cmat;
    if (bias.defined()) {
      for (std::size_t c = 0; c < cout; ++c) omat.row(c).array() += bias.data()[c];
    }
  }
  if (counter) counter->record(layer, g.out_h, g.out_w, cin, cout, k);

  auto in_impl = input.impl();
  auto w_impl = weight.impl();
  auto b_impl = bias.impl();
  return make_result<T>(
      Shape{n, cout, g.out_h, g.out_w}, std::move(out), {&input, &weight, &bias},
      [in_impl, w_impl, b_impl, g, n, cout, plane, patch, direct](std::span<const T> grad) {
        T* gin = grad_target(in_impl);
        T* gw = grad_target(w_impl);
        T* gb = grad_target(b_impl);
        ConstMatMap<T> wmat(w_impl->data.data(), cout, patch);
        std::vector<T> col(direct ? 0 : patch * plane);
        std::vector<T> gcol(direct ? 0 : patch * plane);
        const std::size_t in_plane = g.channels * g.height * g.width;
        for (std::size_t b = 0; b < n; ++b) {
          ConstMatMap<T> gout(grad.data() + b * cout * plane, cout, plane);
          const T* src = in_impl->data.data() + b * in_plane;
          if (gw) {
            if (!direct) im2col(src, g, col.data());
            ConstMatMap<T> cmat(direct ? src : col.data(), patch, plane);
            MatMap<T> gwmat(gw, cout, patch);
            gwmat.noalias() += gout * cmat.transpose();
          }
          if (gb) {
            for (std::size_t c = 0; c < cout; ++c) gb[c] += gout.row(c).sum();
          }
          if (gin) {
            if (direct) {
              MatMap<T> gimat(gin + b * in_plane, patch, plane);
              gimat.noalias() += wmat.transpose() * gout;
            } else {
              MatMap<T> gcmat(gcol.data(), patch, plane);
              gcmat.noalias() = wmat.transpose() * gout;
              col2im_add(gcol.data(), g, gin + b * in_plane);
            }
          }
        }
      },
      "conv2d");
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var,
                      const BatchNormOptions& options) {
  require_rank(input, 4, "batchnorm2d");
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  for (const Tensor<T>* p : {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean),
                             static_cast<const Tensor<T>*>(&running_var)}) {
    if (!p->defined() || p->numel() != c) {
      throw ShapeError("batchnorm2d: per-channel parameter length does not match C=" +
                       std::to_string(c));
    }
  }
  const std::size_t count = n * plane;
  if (options.training && count < 1) throw ShapeError("batchnorm2d: empty batch");
  std::vector<T> mean(c), invstd(c);
  const auto x = input.data();
  if (options.training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double v = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      const double var = v / static_cast<double>(count);
      mean[ch] = static_cast<T>(mu);
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + options.eps));
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
      auto rm = running_mean.data();
      auto rv = running_var.data();
      rm[ch] = static_cast<T>((1.0 - options.momentum) * rm[ch] + options.momentum * mu);
      rv[ch] = static_cast<T>((1.0 - options.momentum) * rv[ch] + options.momentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean.data()[ch];
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.data()[ch]) +
                                                  options.eps));
    }
  }
  std::vector<T> xhat(input.numel()), out(input.numel());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      const T gm = gamma.data()[ch], bt = beta.data()[ch];
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[off + i] = (x[off + i] - mean[ch]) * invstd[ch];
        out[off + i] = gm * xhat[off + i] + bt;
      }
    }
  }
  auto in_impl = input.impl(), g_impl = gamma.impl(), b_impl = beta.impl();
  const bool training = options.training;
  return make_result<T>(
      input.shape(), std::move(out), {&input, &gamma, &beta},
      [in_impl, g_impl, b_impl, xhat = std::move(xhat), invstd, n, c, plane, count,
       training](std::span<const T> grad) {
        T* gin = grad_target(in_impl);
        T* gg = grad_target(g_impl);
        T* gbt = grad_target(b_impl);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += grad[off + i];
              sum_dy_xhat += grad[off + i] * xhat[off + i];
            }
          }
          if (gg) gg[ch] += static_cast<T>(sum_dy_xhat);
          if (gbt) gbt[ch] += static_cast<T>(sum_dy);
          if (!gin) continue;
          const double gm = g_impl->data[ch];
          const double is = invstd[ch];
          const double m = static_cast<double>(count);
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              if (training) {
                gin[off + i] += static_cast<T>(gm * is / m *
                                               (m * grad[off + i] - sum_dy - xhat[off + i] * sum_dy_xhat));
              } else {
                gin[off + i] += static_cast<T>(gm * is * grad[off + i]);
              }
            }
          }
        }
      },
      "batchnorm2d");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
  auto impl = x.impl();
  return make_result<T>(
      x.shape(), std::move(out), {&x},
      [impl](std::span<const T> g) {
        if (T* dst = grad_target(impl)) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (impl->data[i] > T(0)) dst[i] += g[i];
          }
        }
      },
      "relu");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-in[i]));
  auto impl = x.impl();
  auto y = out;
  return make_result<T>(
      x.shape(), std::move(out), {&x},
      [impl, y = std::move(y)](std::span<const T> g) {
        if (T* dst = grad_target(impl)) {
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * y[i] * (T(1) - y[i]);
        }
      },
      "sigmoid");
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis, "softmax");
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t r = 0; r < s.inner; ++r) {
      const std::size_t base = o * s.len * s.inner + r;
      T mx = in[base];
      for (std::size_t k = 1; k < s.len; ++k) mx = std::max(mx, in[base + k * s.inner]);
      T total = 0;
      for (std::size_t k = 0; k < s.len; ++k) {
        out[base + k * s.inner] = std::exp(in[base + k * s.inner] - mx);
        total += out[base + k * s.inner];
      }
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] /= total;
    }
  }
  auto impl = x.impl();
  auto y = out;
  return make_result<T>(
      x.shape(), std::move(out), {&x},
      [impl, y = std::move(y), s](std::span<const T> g) {
        T* dst = grad_target(impl);
        if (!dst) return;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t r = 0; r < s.inner; ++r) {
            const std::size_t base = o * s.len * s.inner + r;
            T dot = 0;
            for (std::size_t k = 0; k < s.len; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
            for (std::size_t k = 0; k < s.len; ++k) {
              const std::size_t i = base + k * s.inner;
              dst[i] += y[i] * (g[i] - dot);
            }
          }
        }
      },
      "softmax");
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis, "log_softmax");
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t r = 0; r < s.inner; ++r) {
      const std::size_t base = o * s.len * s.inner + r;
      T mx = in[base];
      for (std::size_t k = 1; k < s.len; ++k) mx = std::max(mx, in[base + k * s.inner]);
      T total = 0;
      for (std::size_t k = 0; k < s.len; ++k) total += std::exp(in[base + k * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] = in[base + k * s.inner] - lse;
    }
  }
  auto impl = x.impl();
  auto y = out;
  return make_result<T>(
      x.shape(), std::move(out), {&x},
      [impl, y = std::move(y), s](std::span<const T> g) {
        T* dst = grad_target(impl);
        if (!dst) return;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t r = 0; r < s.inner; ++r) {
            const std::size_t base = o * s.len * s.inner + r;
            T total = 0;
            for (std::size_t k = 0; k < s.len; ++k) total += g[base + k * s.inner];
            for (std::size_t k = 0; k < s.len; ++k) {
              const std::size_t i = base + k * s.inner;
              dst[i] += g[i] - std::exp(y[i]) * total;
            }
          }
        }
      },
      "log_softmax");
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(in[i]);
  auto impl = x.impl();
  return make_result<T>(
      x.shape(), std::move(out), {&x},
      [impl](std::span<const T> g) {
        if (T* dst = grad_target(impl)) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = impl->data[i];
            dst[i] += v > T(0) ? g[i] : (v < T(0) ? -g[i] : T(0));
          }
        }
      },
      "abs");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto ia = a.impl(), ib = b.impl();
  return make_result<T>(
      a.shape(), std::move(out), {&a, &b},
      [ia, ib](std::span<const T> g) {
        T* da = grad_target(ia);
        T* db = grad_target(ib);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (da) da[i] += g[i];
          if (db) db[i] += g[i];
        }
      },
      "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto ia = a.impl(), ib = b.impl();
  return make_result<T>(
      a.shape(), std::move(out), {&a, &b},
      [ia, ib](std::span<const T> g) {
        T* da = grad_target(ia);
        T* db = grad_target(ib);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (da) da[i] += g[i];
          if (db) db[i] -= g[i];
        }
      },
      "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto ia = a.impl(), ib = b.impl();
  return make_result<T>(
      a.shape(), std::move(out), {&a, &b},
      [ia, ib](std::span<const T> g) {
        T* da = grad_target(ia);
        T* db = grad_target(ib);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (da) da[i] += g[i] * ib->data[i];
          if (db) db[i] += g[i] * ia->data[i];
        }
      },
      "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  auto impl = x.impl();
  return make_result<T>(
      x.shape(), std::move(out), {&x},
      [impl, factor](std::span<const T> g) {
        if (T* dst = grad_target(impl)) {
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * factor;
        }
      },
      "scale");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  auto impl = x.impl();
  return make_result<T>(
      Shape{}, std::vector<T>{total}, {&x},
      [impl](std::span<const T> g) {
        if (T* dst = grad_target(impl)) {
          for (std::size_t i = 0; i < impl->data.size(); ++i) dst[i] += g[0];
        }
      },
      "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dims differ " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  std::vector<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  auto ia = a.impl(), ib = b.impl();
  return make_result<T>(
      Shape{m, n}, std::move(out), {&a, &b},
      [ia, ib, m, k, n](std::span<const T> g) {
        ConstMatMap<T> gm(g.data(), m, n);
        if (T* da = grad_target(ia)) {
          MatMap<T>(da, m, k).noalias() += gm * ConstMatMap<T>(ib->data.data(), k, n).transpose();
        }
        if (T* db = grad_target(ib)) {
          MatMap<T>(db, k, n).noalias() += ConstMatMap<T>(ia->data.data(), m, k).transpose() * gm;
        }
      },
      "matmul");
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  MatMap<T>(out.data(), c, r) = ConstMatMap<T>(x.data().data(), r, c).transpose();
  auto impl = x.impl();
  return make_result<T>(
      Shape{c, r}, std::move(out), {&x},
      [impl, r, c](std::span<const T> g) {
        if (T* dst = grad_target(impl)) {
          MatMap<T>(dst, r, c) += ConstMatMap<T>(g.data(), c, r).transpose();
        }
      },
      "transpose");
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: weight " + shape_to_string(weight.shape()) + " vs input " +
                     shape_to_string(x.shape()));
  }
  if (bias.defined() && bias.numel() != out_dim) throw ShapeError("linear: bias length mismatch");
  std::vector<T> out(n * out_dim);
  MatMap<T> om(out.data(), n, out_dim);
  om.noalias() = ConstMatMap<T>(x.data().data(), n, in) *
                 ConstMatMap<T>(weight.data().data(), out_dim, in).transpose();
  if (bias.defined()) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < out_dim; ++j) om(i, j) += bias.data()[j];
    }
  }
  auto ix = x.impl(), iw = weight.impl(), ib = bias.impl();
  return make_result<T>(
      Shape{n, out_dim}, std::move(out), {&x, &weight, &bias},
      [ix, iw, ib, n, in, out_dim](std::span<const T> g) {
        ConstMatMap<T> gm(g.data(), n, out_dim);
        if (T* dx = grad_target(ix)) {
          MatMap<T>(dx, n, in).noalias() += gm * ConstMatMap<T>(iw->data.data(), out_dim, in);
        }
        if (T* dw = grad_target(iw)) {
          MatMap<T>(dw, out_dim, in).noalias() +=
              gm.transpose() * ConstMatMap<T>(ix->data.data(), n, in);
        }
        if (T* db = grad_target(ib)) {
          for (std::size_t j = 0; j < out_dim; ++j) db[j] += gm.col(j).sum();
        }
      },
      "linear");
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  if (a.dim(0) != b.dim(0)) throw ShapeError("concat_cols: row counts differ");
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::vector<T> out(n * (ca + cb));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(b.data().data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  auto ia = a.impl(), ib = b.impl();
  return make_result<T>(
      Shape{n, ca + cb}, std::move(out), {&a, &b},
      [ia, ib, n, ca, cb](std::span<const T> g) {
        T* da = grad_target(ia);
        T* db = grad_target(ib);
        for (std::size_t i = 0; i < n; ++i) {
          const T* row = g.data() + i * (ca + cb);
          if (da) {
            for (std::size_t j = 0; j < ca; ++j) da[i * ca + j] += row[j];
          }
          if (db) {
            for (std::size_t j = 0; j < cb; ++j) db[i * cb + j] += row[ca + j];
          }
        }
      },
      "concat_cols");
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps) {
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> out(x.numel()), norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += x.data()[i * d + j] * x.data()[i * d + j];
    norms[i] = std::max(std::sqrt(ss), eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.data()[i * d + j] / norms[i];
  }
  auto impl = x.impl();
  auto y = out;
  return make_result<T>(
      x.shape(), std::move(out), {&x},
      [impl, y = std::move(y), norms = std::move(norms), n, d, eps](std::span<const T> g) {
        T* dst = grad_target(impl);
        if (!dst) return;
        for (std::size_t i = 0; i < n; ++i) {
          const bool clamped = !(norms[i] > eps);
          T dot = 0;
          for (std::size_t j = 0; j < d; ++j) dot += y[i * d + j] * g[i * d + j];
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t k = i * d + j;
            dst[k] += clamped ? g[k] / norms[i] : (g[k] - y[k] * dot) / norms[i];
          }
        }
      },
      "l2_normalize_rows");
}

template <typename T>
Tensor<T> gather_cells(const Tensor<T>& x, const std::vector<CellIndex>& cells) {
  require_rank(x, 4, "gather_cells");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  for (const auto& cell : cells) {
    if (cell.batch >= n || cell.row >= h || cell.col >= w) {
      throw ShapeError("gather_cells: cell index outside " + shape_to_string(x.shape()));
    }
  }
  std::vector<T> out(cells.size() * c);
  for (std::size_t m = 0; m < cells.size(); ++m) {
    const auto& cell = cells[m];
    for (std::size_t ch = 0; ch < c; ++ch) {
      out[m * c + ch] = x.data()[((cell.batch * c + ch) * h + cell.row) * w + cell.col];
    }
  }
  auto impl = x.impl();
  return make_result<T>(
      Shape{cells.size(), c}, std::move(out), {&x},
      [impl, cells, c, h, w](std::span<const T> g) {
        T* dst = grad_target(impl);
        if (!dst) return;
        for (std::size_t m = 0; m < cells.size(); ++m) {
          const auto& cell = cells[m];
          for (std::size_t ch = 0; ch < c; ++ch) {
            dst[((cell.batch * c + ch) * h + cell.row) * w + cell.col] += g[m * c + ch];
          }
        }
      },
      "gather_cells");
}

template <typename T>
Tensor<T> nll_rows(const Tensor<T>& logp, const std::vector<std::size_t>& targets) {
  require_rank(logp, 2, "nll_rows");
  const std::size_t n = logp.dim(0), k = logp.dim(1);
  if (targets.size() != n || n == 0) throw ShapeError("nll_rows: target count mismatch");
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= k) throw ShapeError("nll_rows: target index out of range");
    total -= logp.data()[i * k + targets[i]];
  }
  auto impl = logp.impl();
  return make_result<T>(
      Shape{}, std::vector<T>{total / static_cast<T>(n)}, {&logp},
      [impl, targets, n, k](std::span<const T> g) {
        if (T* dst = grad_target(impl)) {
          for (std::size_t i = 0; i < n; ++i) dst[i * k + targets[i]] -= g[0] / static_cast<T>(n);
        }
      },
      "nll_rows");
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input, 4, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: output dims must be >= 1");
  const std::size_t nc = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto ty = linear_taps(h, out_h);
  const auto tx = linear_taps(w, out_w);
  std::vector<T> out(nc * out_h * out_w);
  const auto in = input.data();
  for (std::size_t p = 0; p < nc; ++p) {
    const T* src = in.data() + p * h * w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const T fy = static_cast<T>(ty[y].frac);
      const T* r0 = src + ty[y].i0 * w;
      const T* r1 = src + ty[y].i1 * w;
      for (std::size_t x = 0; x < out_w; ++x) {
        const T fx = static_cast<T>(tx[x].frac);
        const T top = r0[tx[x].i0] * (T(1) - fx) + r0[tx[x].i1] * fx;
        const T bot = r1[tx[x].i0] * (T(1) - fx) + r1[tx[x].i1] * fx;
        dst[y * out_w + x] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  auto impl = input.impl();
  return make_result<T>(
      Shape{input.dim(0), input.dim(1), out_h, out_w}, std::move(out), {&input},
      [impl, ty, tx, nc, h, w, out_h, out_w](std::span<const T> g) {
        T* dst = grad_target(impl);
        if (!dst) return;
        for (std::size_t p = 0; p < nc; ++p) {
          T* gin = dst + p * h * w;
          const T* gout = g.data() + p * out_h * out_w;
          for (std::size_t y = 0; y < out_h; ++y) {
            const T fy = static_cast<T>(ty[y].frac);
            for (std::size_t x = 0; x < out_w; ++x) {
              const T fx = static_cast<T>(tx[x].frac);
              const T v = gout[y * out_w + x];
              gin[ty[y].i0 * w + tx[x].i0] += v * (T(1) - fy) * (T(1) - fx);
              gin[ty[y].i0 * w + tx[x].i1] += v * (T(1) - fy) * fx;
              gin[ty[y].i1 * w + tx[x].i0] += v * fy * (T(1) - fx);
              gin[ty[y].i1 * w + tx[x].i1] += v * fy * fx;
            }
          }
        }
      },
      "bilinear_resize");
}

template <typename T>
Tensor<T> pad_edge(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input, 4, "pad_edge");
  const std::size_t nc = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  if (out_h < h || out_w < w) throw ShapeError("pad_edge: target smaller than input");
  if (out_h == h && out_w == w) return input;
  std::vector<T> out(nc * out_h * out_w);
  for (std::size_t p = 0; p < nc; ++p) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const T* src = input.data().data() + p * h * w + std::min(y, h - 1) * w;
      T* dst = out.data() + (p * out_h + y) * out_w;
      for (std::size_t x = 0; x < out_w; ++x) dst[x] = src[std::min(x, w - 1)];
    }
  }
  auto impl = input.impl();
  return make_result<T>(
      Shape{input.dim(0), input.dim(1), out_h, out_w}, std::move(out), {&input},
      [impl, nc, h, w, out_h, out_w](std::span<const T> g) {
        T* dst = grad_target(impl);
        if (!dst) return;
        for (std::size_t p = 0; p < nc; ++p) {
          for (std::size_t y = 0; y < out_h; ++y) {
            for (std::size_t x = 0; x < out_w; ++x) {
              dst[p * h * w + std::min(y, h - 1) * w + std::min(x, w - 1)] +=
                  g[(p * out_h + y) * out_w + x];
            }
          }
        }
      },
      "pad_edge");
}

template <typename T>
Tensor<T> crop(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input, 4, "crop");
  const std::size_t nc = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  if (out_h > h || out_w > w || out_h == 0 || out_w == 0) {
    throw ShapeError("crop: target outside input " + shape_to_string(input.shape()));
  }
  if (out_h == h && out_w == w) return input;
  std::vector<T> out(nc * out_h * out_w);
  for (std::size_t p = 0; p < nc; ++p) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const T* src = input.data().data() + (p * h + y) * w;
      std::copy(src, src + out_w, out.data() + (p * out_h + y) * out_w);
    }
  }
  auto impl = input.impl();
  return make_result<T>(
      Shape{input.dim(0), input.dim(1), out_h, out_w}, std::move(out), {&input},
      [impl, nc, h, w, out_h, out_w](std::span<const T> g) {
        T* dst = grad_target(impl);
        if (!dst) return;
        for (std::size_t p = 0; p < nc; ++p) {
          for (std::size_t y = 0; y < out_h; ++y) {
            for (std::size_t x = 0; x < out_w; ++x) {
              dst[(p * h + y) * w + x] += g[(p * out_h + y) * out_w + x];
            }
          }
        }
      },
      "crop");
}

template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& input, std::size_t block) {
  require_rank(input, 4, "space_to_depth");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (block == 0 || h % block || w % block) {
    throw ShapeError("space_to_depth: spatial dims " + shape_to_string(input.shape()) +
                     " not divisible by " + std::to_string(block));
  }
  const std::size_t oh = h / block, ow = w / block, oc = c * block * block;
  // out index <-> in index; the same map serves the backward scatter.
  std::vector<std::size_t> src_index(input.numel());
  std::vector<T> out(input.numel());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < oc; ++ch) {
      const std::size_t ic = ch / (block * block);
      const std::size_t dy = (ch / block) % block, dx = ch % block;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          const std::size_t o = ((b * oc + ch) * oh + i) * ow + j;
          const std::size_t s = ((b * c + ic) * h + i * block + dy) * w + j * block + dx;
          src_index[o] = s;
          out[o] = input.data()[s];
        }
      }
    }
  }
  auto impl = input.impl();
  return make_result<T>(
      Shape{n, oc, oh, ow}, std::move(out), {&input},
      [impl, src_index = std::move(src_index)](std::span<const T> g) {
        if (T* dst = grad_target(impl)) {
          for (std::size_t o = 0; o < g.size(); ++o) dst[src_index[o]] += g[o];
        }
      },
      "space_to_depth");
}

template <typename T>
Tensor<T> depth_to_space(const Tensor<T>& input, std::size_t block) {
  require_rank(input, 4, "depth_to_space");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (block == 0 || c % (block * block)) {
    throw ShapeError("depth_to_space: channels not divisible by block^2");
  }
  const std::size_t oc = c / (block * block), oh = h * block, ow = w * block;
  std::vector<std::size_t> src_index(input.numel());
  std::vector<T> out(input.numel());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t occ = ch / (block * block);
      const std::size_t dy = (ch / block) % block, dx = ch % block;
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          const std::size_t s = ((b * c + ch) * h + i) * w + j;
          const std::size_t o = ((b * oc + occ) * oh + i * block + dy) * ow + j * block + dx;
          src_index[o] = s;
          out[o] = input.data()[s];
        }
      }
    }
  }
  auto impl = input.impl();
  return make_result<T>(
      Shape{n, oc, oh, ow}, std::move(out), {&input},
      [impl, src_index = std::move(src_index)](std::span<const T> g) {
        if (T* dst = grad_target(impl)) {
          for (std::size_t o = 0; o < g.size(); ++o) dst[src_index[o]] += g[o];
        }
      },
      "depth_to_space");
}

template <typename T>
Tensor<T> bicubic_sample(const Tensor<T>& map, const std::vector<std::pair<T, T>>& points) {
  require_rank(map, 3, "bicubic_sample");
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2);
  std::vector<T> out(points.size() * c);
  const auto clamp_index = [](long i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(i, 0L, static_cast<long>(n) - 1));
  };
  const T* src = map.data().data();
  for (std::size_t p = 0; p < points.size(); ++p) {
    const double sx = static_cast<double>(points[p].first) - 0.5;
    const double sy = static_cast<double>(points[p].second) - 0.5;
    const double fx = std::floor(sx), fy = std::floor(sy);
    const double tx = sx - fx, ty = sy - fy;
    double wx[4], wy[4];
    std::size_t ix[4], iy[4];
    for (int k = 0; k < 4; ++k) {
      wx[k] = cubic_weight(tx - (k - 1));
      wy[k] = cubic_weight(ty - (k - 1));
      ix[k] = clamp_index(static_cast<long>(fx) + k - 1, w);
      iy[k] = clamp_index(static_cast<long>(fy) + k - 1, h);
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* plane = src + ch * h * w;
      double acc = 0;
      for (int a = 0; a < 4; ++a) {
        double row = 0;
        for (int b = 0; b < 4; ++b) row += wx[b] * plane[iy[a] * w + ix[b]];
        acc += wy[a] * row;
      }
      out[p * c + ch] = static_cast<T>(acc);
    }
  }
  return make_result<T>(Shape{points.size(), c}, std::move(out), {}, nullptr, "bicubic_sample");
}

#define XFEAT_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int,    \
                            FlopCounter*, std::string_view);                                   \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                 Tensor<T>&, Tensor<T>&, const BatchNormOptions&);             \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> abs(const Tensor<T>&);                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> concat_cols(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&, T);                                   \
  template Tensor<T> gather_cells(const Tensor<T>&, const std::vector<CellIndex>&);            \
  template Tensor<T> nll_rows(const Tensor<T>&, const std::vector<std::size_t>&);              \
  template Tensor<T> bilinear_resize(const Tensor<T>&, std::size_t, std::size_t);              \
  template Tensor<T> pad_edge(const Tensor<T>&, std::size_t, std::size_t);                     \
  template Tensor<T> crop(const Tensor<T>&, std::size_t, std::size_t);                         \
  template Tensor<T> space_to_depth(const Tensor<T>&, std::size_t);                            \
  template Tensor<T> depth_to_space(const Tensor<T>&, std::size_t);                            \
  template Tensor<T> bicubic_sample(const Tensor<T>&, const std::vector<std::pair<T, T>>&);

XFEAT_INSTANTIATE_OPS(float)
XFEAT_INSTANTIATE_OPS(double)

#undef XFEAT_INSTANTIATE_OPS

}  // namespace xfeat::ops
