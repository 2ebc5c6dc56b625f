#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "xfeat/heads.hpp"
#include "xfeat/model.hpp"

namespace xfeat {

enum class FeatureMode : std::uint8_t { kSparse = 0, kSemiDense = 1 };

struct Point2 {
  float x = 0;
  float y = 0;
};

// Per-image extraction result, structure-of-arrays. Descriptors are
// row-major count x dim and unit-norm.
struct FeatureSet {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  FeatureMode mode = FeatureMode::kSparse;
  std::size_t dim = 64;
  std::vector<float> x, y, score, reliability;
  // Processing scale each feature came from (1.0 for sparse extraction).
  std::vector<float> scale;
  std::vector<float> descriptors;

  std::size_t size() const { return x.size(); }
  std::span<const float> descriptor(std::size_t i) const {
    return {descriptors.data() + i * dim, dim};
  }
  void push_back(float px, float py, float s, float rel, float processing_scale,
                 std::span<const float> desc);
  // Throws ShapeError when array lengths disagree.
  void validate() const;
};

struct MatchSet {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  std::vector<Point2> coords_a, coords_b;
  std::vector<float> scale_a, scale_b;
  std::vector<float> similarity;
  std::size_t dim = 64;
  std::vector<float> desc_a, desc_b;  // pairs.size() x dim each
  // Filled by refine_matches: pairs.size() x 64, o(row=y, col=x).
  std::vector<float> offset_logits;
  std::vector<float> confidence;

  std::size_t size() const { return pairs.size(); }
};

// Bicubic samples of a [1,D,h,w] descriptor map at keypoint pixel
// coordinates (feature coords = pixel / 8), L2-normalized.
FeatureSet sample_descriptors(const Tensor<float>& descriptors, const std::vector<Keypoint>& keypoints,
                              std::uint32_t width, std::uint32_t height);

// Mutual nearest neighbours on a row-major rows x cols similarity matrix.
// Ties resolve to the lowest index. Pairs sorted by row index.
std::vector<std::pair<std::uint32_t, std::uint32_t>> mutual_nearest(
    std::span<const float> similarity, std::size_t rows, std::size_t cols,
    float min_similarity = -1.0f);

MatchSet mnn_match(const FeatureSet& a, const FeatureSet& b, float min_cossim = -1.0f);

struct Offset {
  int x = 0;  // column within the 8x8 cell
  int y = 0;  // row within the 8x8 cell
  float confidence = 0;
};

// Argmax over 64 offset logits indexed o(i,j) = logits[i*8 + j], i = row = y,
// j = col = x. Confidence is the maximum softmax probability.
Offset offset_from_logits(std::span<const float> logits);

// Predicts offsets with the refiner MLP, moves each target coordinate to
// the centre of the predicted pixel inside its 8x8 cell at the processing
// scale, and drops pairs whose confidence is below `conf_threshold`.
MatchSet refine_matches(const MatchSet& matches, const XFeatModel<float>& model,
                        float conf_threshold = 0.2f);

// Forward pass on a [1,1,H,W] image followed by keypoint detection and
// descriptor sampling.
FeatureSet extract_sparse(XFeatModel<float>& model, const Tensor<float>& image,
                          const DetectOptions& options = {});

struct SemiDenseOptions {
  std::vector<float> scales{0.65f, 1.3f};
  std::size_t top_n = 10000;
  float dedup_radius = 2.0f;
};

// Every descriptor cell at one processing scale whose centre lies inside the
// resized image, mapped back to the original frame. Reliability is
// sigmoid(R_logits); score equals reliability.
FeatureSet scale_candidates(XFeatModel<float>& model, const Tensor<float>& image, float scale);

// Union of scale_candidates over all scales, greedy de-duplication by
// reliability within `dedup_radius` px, top_n by reliability.
FeatureSet semi_dense_extract(XFeatModel<float>& model, const Tensor<float>& image,
                              const SemiDenseOptions& options = {});

}  // namespace xfeat
