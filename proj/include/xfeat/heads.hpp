#pragma once

#include <cstddef>
#include <vector>

#include "xfeat/model.hpp"

namespace xfeat {

inline constexpr std::size_t kCellSize = 8;
inline constexpr std::size_t kDustbin = 64;

// Image coordinates throughout the library are continuous: pixel (row r,
// col c) covers [c, c+1) x [r, r+1) and its centre is (c+0.5, r+0.5).
struct Keypoint {
  float x = 0;
  float y = 0;
  float score = 0;
  float reliability = 0;
};

struct DetectOptions {
  std::size_t top_k = 4096;
  int nms_radius = 2;
  float threshold = 0.05f;
};

// space_to_depth(8) followed by three 1x1 basic layers and a 1x1 conv
// emitting 65 logits per cell. `image` must have H and W divisible by 8.
template <typename T>
Tensor<T> keypoint_head_forward(XFeatModel<T>& model, const Tensor<T>& image,
                                FlopCounter* counter = nullptr);

// Per-cell softmax over 65 logits, dustbin dropped, cells unfolded back to
// a full-resolution [N,1,8h,8w] heatmap.
template <typename T>
Tensor<T> reassemble_heatmap(const Tensor<T>& keypoint_logits);

// Local-maximum NMS in a (2r+1)^2 window on the heatmap (equal values keep
// the lowest row-major index), heatmap threshold, then
// score = heatmap * reliability with the [1,1,h,w] reliability probability
// map bilinearly upsampled to the heatmap size. Only pixels inside the
// unpadded `width` x `height` frame are reported. Sorted by score
// descending, ties by row-major index; at most top_k returned.
std::vector<Keypoint> detect_keypoints(const Tensor<float>& heatmap,
                                       const Tensor<float>& reliability, std::size_t width,
                                       std::size_t height, const DetectOptions& options = {});

}  // namespace xfeat
