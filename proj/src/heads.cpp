#include "xfeat/heads.hpp"

#include <algorithm>
#include <numeric>

namespace xfeat {

template <typename T>
Tensor<T> keypoint_head_forward(XFeatModel<T>& model, const Tensor<T>& image,
                                FlopCounter* counter) {
  if (image.rank() != 4 || image.dim(1) != 1) {
    throw ShapeError("keypoint head: expected [N,1,H,W] input, got " +
                     shape_to_string(image.shape()));
  }
  auto x = ops::space_to_depth(image, kCellSize);
  for (auto& layer : model.keypoint_layers) {
    x = basic_layer_forward(layer, x, model.training(), counter);
  }
  return conv_layer_forward(model.keypoint_out, x, counter);
}

template <typename T>
Tensor<T> reassemble_heatmap(const Tensor<T>& keypoint_logits) {
  if (keypoint_logits.rank() != 4 || keypoint_logits.dim(1) != kDustbin + 1) {
    throw ShapeError("reassemble_heatmap: expected 65 logit channels, got " +
                     shape_to_string(keypoint_logits.shape()));
  }
  NoGradGuard no_grad;
  const auto probs = ops::softmax(keypoint_logits, 1);
  const std::size_t n = probs.dim(0), h = probs.dim(2), w = probs.dim(3), plane = h * w;
  std::vector<T> cells(n * kDustbin * plane);
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(probs.data().data() + b * (kDustbin + 1) * plane, kDustbin * plane,
                cells.data() + b * kDustbin * plane);
  }
  return ops::depth_to_space(Tensor<T>({n, kDustbin, h, w}, std::move(cells)), kCellSize);
}

std::vector<Keypoint> detect_keypoints(const Tensor<float>& heatmap,
                                       const Tensor<float>& reliability, std::size_t width,
                                       std::size_t height, const DetectOptions& options) {
  if (heatmap.rank() != 4 || heatmap.dim(0) != 1 || heatmap.dim(1) != 1) {
    throw ShapeError("detect_keypoints: heatmap must be [1,1,H,W]");
  }
  if (reliability.rank() != 4 || reliability.dim(0) != 1 || reliability.dim(1) != 1) {
    throw ShapeError("detect_keypoints: reliability must be [1,1,h,w]");
  }
  const std::size_t hp = heatmap.dim(2), wp = heatmap.dim(3);
  if (width > wp || height > hp) throw ShapeError("detect_keypoints: frame exceeds heatmap");
  NoGradGuard no_grad;
  const auto rel = ops::bilinear_resize(reliability, hp, wp);
  const auto heat = heatmap.data();
  const auto r = std::max(options.nms_radius, 0);

  struct Candidate {
    float score;
    std::size_t index;
  };
  std::vector<Candidate> candidates;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t idx = y * wp + x;
      const float v = heat[idx];
      if (v < options.threshold) continue;
      bool is_max = true;
      const std::size_t y0 = y >= std::size_t(r) ? y - r : 0, y1 = std::min(height - 1, y + r);
      const std::size_t x0 = x >= std::size_t(r) ? x - r : 0, x1 = std::min(width - 1, x + r);
      for (std::size_t yy = y0; yy <= y1 && is_max; ++yy) {
        for (std::size_t xx = x0; xx <= x1; ++xx) {
          const std::size_t j = yy * wp + xx;
          if (heat[j] > v || (heat[j] == v && j < idx)) {
            is_max = false;
            break;
          }
        }
      }
      if (is_max) candidates.push_back({v * rel.data()[idx], idx});
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    return a.score != b.score ? a.score > b.score : a.index < b.index;
  });
  if (candidates.size() > options.top_k) candidates.resize(options.top_k);
  std::vector<Keypoint> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) {
    const std::size_t y = c.index / wp, x = c.index % wp;
    out.push_back({static_cast<float>(x) + 0.5f, static_cast<float>(y) + 0.5f, c.score,
                   rel.data()[c.index]});
  }
  return out;
}

template Tensor<float> keypoint_head_forward(XFeatModel<float>&, const Tensor<float>&, FlopCounter*);
template Tensor<double> keypoint_head_forward(XFeatModel<double>&, const Tensor<double>&,
                                              FlopCounter*);
template Tensor<float> reassemble_heatmap(const Tensor<float>&);
template Tensor<double> reassemble_heatmap(const Tensor<double>&);

}  // namespace xfeat
