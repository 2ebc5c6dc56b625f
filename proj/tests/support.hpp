#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "xfeat/ops.hpp"
#include "xfeat/tensor.hpp"

namespace xfeat::test {

inline std::mt19937_64& rng_for(std::uint64_t seed) {
  thread_local std::mt19937_64 engine;
  engine.seed(seed);
  return engine;
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 engine(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(engine));
  return Tensor<T>(std::move(shape), std::move(data));
}

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-7});
  return std::abs(analytic - numeric) / denom;
}

struct GradCheck {
  double max_rel_error = 0;
  std::size_t checked = 0;
  // Largest |numeric| among sampled entries whose analytic gradient is zero.
  double max_zero_numeric = 0;
  std::size_t zero_checked = 0;
};

// Central differences on `samples` randomly chosen scalar entries across
// `params`, compared to the gradients left by `loss().backward()`. With
// min_magnitude > 0 the relative check only samples entries whose analytic
// gradient reaches that size (below it, round-off in the loss dominates the
// quotient), and a quarter as many zero-gradient entries are checked for a
// numerically zero derivative instead.
inline GradCheck check_gradients(const std::vector<Tensor<double>*>& params,
                                 const std::function<Tensor<double>()>& loss, std::size_t samples,
                                 std::uint64_t seed, double h = 1e-4, double min_magnitude = 0.0) {
  for (auto* p : params) p->zero_grad();
  loss().backward();
  struct Entry {
    std::size_t param, index;
  };
  std::vector<Entry> live, zero;
  std::vector<std::vector<double>> analytic;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    if (p->has_grad()) {
      analytic.emplace_back(p->grad().begin(), p->grad().end());
    } else {
      analytic.emplace_back(p->numel(), 0.0);
    }
    for (std::size_t i = 0; i < p->numel(); ++i) {
      const double a = std::abs(analytic[k][i]);
      if (a >= min_magnitude) live.push_back({k, i});
      if (min_magnitude > 0 && a == 0.0) zero.push_back({k, i});
    }
  }
  std::mt19937_64 engine(seed);
  const auto pick = [&](std::vector<Entry>& pool, std::size_t n) {
    n = std::min(n, pool.size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = std::uniform_int_distribution<std::size_t>(i, pool.size() - 1)(engine);
      std::swap(pool[i], pool[j]);
    }
    pool.resize(n);
  };
  pick(live, samples);
  pick(zero, min_magnitude > 0 ? samples / 4 : 0);
  const auto numeric = [&](const Entry& e) {
    auto data = params[e.param]->data();
    const double saved = data[e.index];
    data[e.index] = saved + h;
    const double up = loss().item();
    data[e.index] = saved - h;
    const double down = loss().item();
    data[e.index] = saved;
    return (up - down) / (2 * h);
  };
  GradCheck result;
  NoGradGuard guard;
  for (const auto& e : live) {
    result.max_rel_error =
        std::max(result.max_rel_error, relative_error(analytic[e.param][e.index], numeric(e)));
    ++result.checked;
  }
  for (const auto& e : zero) {
    result.max_zero_numeric = std::max(result.max_zero_numeric, std::abs(numeric(e)));
    ++result.zero_checked;
  }
  return result;
}

// Sliding-window convolution, one output at a time.
template <typename T>
std::vector<double> conv_oracle(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b,
                                int stride, int pad) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto co = w.dim(0), k = w.dim(2);
  const auto oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(n * co * oh * ow);
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = b ? b->data()[o] : 0.0;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long y = static_cast<long>(i * stride + ky) - pad;
                const long xx = static_cast<long>(j * stride + kx) - pad;
                if (y < 0 || xx < 0 || y >= static_cast<long>(h) || xx >= static_cast<long>(wd)) continue;
                acc += static_cast<double>(w.data()[((o * c + ci) * k + ky) * k + kx]) *
                       x.data()[((bi * c + ci) * h + y) * wd + xx];
              }
          out[((bi * co + o) * oh + i) * ow + j] = acc;
        }
  return out;
}

// Catmull-Rom sample of one channel at continuous (u,v), pixel centres at
// (j+0.5, i+0.5), replicate border.
inline double bicubic_oracle(const std::vector<double>& plane, std::size_t h, std::size_t w,
                             double u, double v) {
  const auto kernel = [](double t) {
    t = std::abs(t);
    const double a = -0.5;
    if (t <= 1) return (a + 2) * t * t * t - (a + 3) * t * t + 1;
    if (t < 2) return a * t * t * t - 5 * a * t * t + 8 * a * t - 4 * a;
    return 0.0;
  };
  const double x = u - 0.5, y = v - 0.5;
  const long x0 = static_cast<long>(std::floor(x)), y0 = static_cast<long>(std::floor(y));
  double acc = 0;
  for (long dy = -1; dy <= 2; ++dy) {
    for (long dx = -1; dx <= 2; ++dx) {
      const long yy = std::clamp<long>(y0 + dy, 0, static_cast<long>(h) - 1);
      const long xx = std::clamp<long>(x0 + dx, 0, static_cast<long>(w) - 1);
      acc += kernel(x - (x0 + dx)) * kernel(y - (y0 + dy)) * plane[yy * w + xx];
    }
  }
  return acc;
}

}  // namespace xfeat::test
