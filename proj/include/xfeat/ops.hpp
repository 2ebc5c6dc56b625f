#pragma once

#include <cstddef>
#include <string_view>
#include <utility>
#include <vector>

#include "xfeat/tensor.hpp"

// Differentiable operators on NCHW feature maps and 2-D matrices. Every op
// validates shapes, rejects non-finite outputs and records a backward
// closure when gradients are being tracked.
namespace xfeat::ops {

// Convolution with square kernel. k in {1,3}, stride in {1,2},
// padding == (k-1)/2. Records one FlopCounter entry using output dims.
// An undefined `bias` means no bias term.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding, FlopCounter* counter = nullptr,
                 std::string_view layer = "conv");

struct BatchNormOptions {
  bool training = false;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel normalization of an NCHW tensor. In training mode batch
// statistics are used and the running buffers are updated in place.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var,
                      const BatchNormOptions& options);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> abs(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// [M,K] x [K,N] -> [M,N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

// x [N,in] * weight[out,in]^T + bias[out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// [N,A] ++ [N,B] -> [N,A+B]
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b);

// Rows scaled to unit L2 norm.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12));

struct CellIndex {
  std::size_t batch = 0;
  std::size_t row = 0;
  std::size_t col = 0;
};

// Gathers channel vectors of an NCHW tensor at integer cells: [M,C].
template <typename T>
Tensor<T> gather_cells(const Tensor<T>& x, const std::vector<CellIndex>& cells);

// -mean_i logp[i, target_i] for a row-wise log-probability matrix.
template <typename T>
Tensor<T> nll_rows(const Tensor<T>& logp, const std::vector<std::size_t>& targets);

// Half-pixel-centre bilinear resize with replicate border.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

// Edge-replicating pad of an NCHW tensor on the bottom/right.
template <typename T>
Tensor<T> pad_edge(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

// Top-left out_h x out_w window of an NCHW tensor.
template <typename T>
Tensor<T> crop(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

// [N,1,H,W] -> [N,b*b,H/b,W/b]; channel c of cell (i,j) is pixel
// (b*i + c/b, b*j + c%b).
template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& input, std::size_t block = 8);
template <typename T>
Tensor<T> depth_to_space(const Tensor<T>& input, std::size_t block = 8);

// Catmull-Rom (a = -0.5) sampling of a [C,h,w] map at continuous
// coordinates (u,v) where cell (i,j) has its centre at (j+0.5, i+0.5).
// Out-of-range taps replicate the border. Returns [len,C]. Not tracked.
template <typename T>
Tensor<T> bicubic_sample(const Tensor<T>& map, const std::vector<std::pair<T, T>>& points);

// Cubic convolution weight for tap distance t (a = -0.5).
double cubic_weight(double t);

}  // namespace xfeat::ops
