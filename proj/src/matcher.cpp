#include "xfeat/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include <Eigen/Core>

namespace xfeat {

namespace {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void normalize(std::span<float> v) {
  double ss = 0;
  for (float f : v) ss += static_cast<double>(f) * f;
  const double n = std::max(std::sqrt(ss), 1e-12);
  for (float& f : v) f = static_cast<float>(f / n);
}

// Runs inference in eval mode and restores the caller's mode afterwards.
class EvalScope {
 public:
  explicit EvalScope(XFeatModel<float>& model) : model_(model), previous_(model.training()) {
    model_.eval();
  }
  ~EvalScope() { model_.train(previous_); }
  EvalScope(const EvalScope&) = delete;
  EvalScope& operator=(const EvalScope&) = delete;

 private:
  XFeatModel<float>& model_;
  bool previous_;
};

}  // namespace

void FeatureSet::push_back(float px, float py, float s, float rel, float processing_scale,
                           std::span<const float> desc) {
  if (desc.size() != dim) throw ShapeError("FeatureSet: descriptor width mismatch");
  x.push_back(px);
  y.push_back(py);
  score.push_back(s);
  reliability.push_back(rel);
  scale.push_back(processing_scale);
  descriptors.insert(descriptors.end(), desc.begin(), desc.end());
}

void FeatureSet::validate() const {
  const std::size_t n = x.size();
  if (y.size() != n || score.size() != n || reliability.size() != n || scale.size() != n ||
      descriptors.size() != n * dim) {
    throw ShapeError("FeatureSet: inconsistent array lengths");
  }
}

FeatureSet sample_descriptors(const Tensor<float>& descriptors, const std::vector<Keypoint>& keypoints,
                              std::uint32_t width, std::uint32_t height) {
  if (descriptors.rank() != 4 || descriptors.dim(0) != 1) {
    throw ShapeError("sample_descriptors: expected [1,D,h,w] map");
  }
  FeatureSet fs;
  fs.width = width;
  fs.height = height;
  fs.dim = descriptors.dim(1);
  if (keypoints.empty()) return fs;
  const auto map = descriptors.reshape({descriptors.dim(1), descriptors.dim(2), descriptors.dim(3)});
  std::vector<std::pair<float, float>> points;
  points.reserve(keypoints.size());
  for (const auto& kp : keypoints) {
    points.emplace_back(kp.x / static_cast<float>(kCellSize), kp.y / static_cast<float>(kCellSize));
  }
  auto sampled = ops::bicubic_sample(map, points);
  auto data = sampled.data();
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    std::span<float> row(data.data() + i * fs.dim, fs.dim);
    normalize(row);
    fs.push_back(keypoints[i].x, keypoints[i].y, keypoints[i].score, keypoints[i].reliability, 1.0f,
                 row);
  }
  return fs;
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> mutual_nearest(
    std::span<const float> similarity, std::size_t rows, std::size_t cols, float min_similarity) {
  if (similarity.size() != rows * cols) throw ShapeError("mutual_nearest: size mismatch");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  if (rows == 0 || cols == 0) return pairs;
  std::vector<std::size_t> row_best(rows, 0), col_best(cols, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    const float* r = similarity.data() + i * cols;
    for (std::size_t j = 1; j < cols; ++j) {
      if (r[j] > r[row_best[i]]) row_best[i] = j;
    }
  }
  for (std::size_t i = 1; i < rows; ++i) {
    const float* r = similarity.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      if (r[j] > similarity[col_best[j] * cols + j]) col_best[j] = i;
    }
  }
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t j = row_best[i];
    if (col_best[j] == i && similarity[i * cols + j] >= min_similarity) {
      pairs.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
    }
  }
  return pairs;
}

MatchSet mnn_match(const FeatureSet& a, const FeatureSet& b, float min_cossim) {
  a.validate();
  b.validate();
  if (a.dim != b.dim) throw ShapeError("mnn_match: descriptor dims differ");
  MatchSet m;
  m.dim = a.dim;
  if (a.size() == 0 || b.size() == 0) return m;
  Eigen::Map<const RowMatrixF> da(a.descriptors.data(), a.size(), a.dim);
  Eigen::Map<const RowMatrixF> db(b.descriptors.data(), b.size(), b.dim);
  RowMatrixF sim = da * db.transpose();
  m.pairs = mutual_nearest({sim.data(), static_cast<std::size_t>(sim.size())}, a.size(), b.size(),
                           min_cossim);
  for (const auto& [i, j] : m.pairs) {
    m.coords_a.push_back({a.x[i], a.y[i]});
    m.coords_b.push_back({b.x[j], b.y[j]});
    m.scale_a.push_back(a.scale[i]);
    m.scale_b.push_back(b.scale[j]);
    m.similarity.push_back(sim(i, j));
    const auto fa = a.descriptor(i);
    const auto fb = b.descriptor(j);
    m.desc_a.insert(m.desc_a.end(), fa.begin(), fa.end());
    m.desc_b.insert(m.desc_b.end(), fb.begin(), fb.end());
  }
  return m;
}

Offset offset_from_logits(std::span<const float> logits) {
  if (logits.size() != kCellSize * kCellSize) {
    throw ShapeError("offset_from_logits: expected 64 logits");
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < logits.size(); ++k) {
    if (logits[k] > logits[best]) best = k;
  }
  double total = 0;
  for (float v : logits) total += std::exp(static_cast<double>(v) - logits[best]);
  return {static_cast<int>(best % kCellSize), static_cast<int>(best / kCellSize),
          static_cast<float>(1.0 / total)};
}

MatchSet refine_matches(const MatchSet& matches, const XFeatModel<float>& model,
                        float conf_threshold) {
  const std::size_t n = matches.size(), d = matches.dim;
  if (matches.desc_a.size() != n * d || matches.desc_b.size() != n * d) {
    throw ShapeError("refine_matches: coarse matches must carry both descriptors");
  }
  if (static_cast<int>(d) != model.config().descriptor_dim) {
    throw ShapeError("refine_matches: refiner width does not match descriptor dim");
  }
  MatchSet out;
  out.dim = d;
  if (n == 0) return out;
  Tensor<float> logits;
  {
    NoGradGuard no_grad;
    logits = refiner_forward(model, Tensor<float>({n, d}, matches.desc_a),
                             Tensor<float>({n, d}, matches.desc_b));
  }
  constexpr std::size_t kOffsets = kCellSize * kCellSize;
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const float> o(logits.data().data() + i * kOffsets, kOffsets);
    const Offset off = offset_from_logits(o);
    if (off.confidence < conf_threshold) continue;
    const float s = matches.scale_b[i];
    const float cell = static_cast<float>(kCellSize);
    const float ox = std::floor(matches.coords_b[i].x * s / cell) * cell;
    const float oy = std::floor(matches.coords_b[i].y * s / cell) * cell;
    out.pairs.push_back(matches.pairs[i]);
    out.coords_a.push_back(matches.coords_a[i]);
    out.coords_b.push_back({(ox + static_cast<float>(off.x) + 0.5f) / s,
                            (oy + static_cast<float>(off.y) + 0.5f) / s});
    out.scale_a.push_back(matches.scale_a[i]);
    out.scale_b.push_back(s);
    out.similarity.push_back(matches.similarity[i]);
    out.desc_a.insert(out.desc_a.end(), matches.desc_a.begin() + i * d,
                      matches.desc_a.begin() + (i + 1) * d);
    out.desc_b.insert(out.desc_b.end(), matches.desc_b.begin() + i * d,
                      matches.desc_b.begin() + (i + 1) * d);
    out.offset_logits.insert(out.offset_logits.end(), o.begin(), o.end());
    out.confidence.push_back(off.confidence);
  }
  return out;
}

FeatureSet extract_sparse(XFeatModel<float>& model, const Tensor<float>& image,
                          const DetectOptions& options) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 1) {
    throw ShapeError("extract_sparse: expected a [1,1,H,W] image");
  }
  NoGradGuard no_grad;
  EvalScope eval_scope(model);
  const auto out = forward(model, image);
  const auto heat = reassemble_heatmap(out.keypoint_logits);
  const auto rel = ops::sigmoid(out.maps.reliability_logits);
  const auto width = static_cast<std::uint32_t>(image.dim(3));
  const auto height = static_cast<std::uint32_t>(image.dim(2));
  const auto kps = detect_keypoints(heat, rel, width, height, options);
  return sample_descriptors(out.maps.descriptors, kps, width, height);
}

FeatureSet scale_candidates(XFeatModel<float>& model, const Tensor<float>& image, float scale) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 1) {
    throw ShapeError("semi-dense: expected a [1,1,H,W] image");
  }
  if (!(scale > 0)) throw ShapeError("semi-dense: scale must be positive");
  const std::size_t h = image.dim(2), w = image.dim(3);
  const auto sh = static_cast<std::size_t>(std::lround(static_cast<double>(h) * scale));
  const auto sw = static_cast<std::size_t>(std::lround(static_cast<double>(w) * scale));
  if (sh < 32 || sw < 32) {
    throw ShapeError("semi-dense: image too small for 1/32 reduction at scale " +
                     std::to_string(scale));
  }
  NoGradGuard no_grad;
  EvalScope eval_scope(model);
  const auto resized = (sh == h && sw == w) ? image : ops::bilinear_resize(image, sh, sw);
  const auto out = forward(model, resized);
  const auto& f = out.maps.descriptors;
  const std::size_t d = f.dim(1), gh = f.dim(2), gw = f.dim(3);
  const auto rel = ops::sigmoid(out.maps.reliability_logits);

  FeatureSet fs;
  fs.width = static_cast<std::uint32_t>(w);
  fs.height = static_cast<std::uint32_t>(h);
  fs.mode = FeatureMode::kSemiDense;
  fs.dim = d;
  std::vector<float> desc(d);
  const float half = static_cast<float>(kCellSize) / 2.0f;
  for (std::size_t i = 0; i < gh; ++i) {
    const float cy = static_cast<float>(i * kCellSize) + half;
    if (cy >= static_cast<float>(sh) || cy / scale >= static_cast<float>(h)) continue;
    for (std::size_t j = 0; j < gw; ++j) {
      const float cx = static_cast<float>(j * kCellSize) + half;
      if (cx >= static_cast<float>(sw) || cx / scale >= static_cast<float>(w)) continue;
      for (std::size_t c = 0; c < d; ++c) desc[c] = f.data()[(c * gh + i) * gw + j];
      normalize(desc);
      const float r = rel.data()[i * gw + j];
      fs.push_back(cx / scale, cy / scale, r, r, scale, desc);
    }
  }
  return fs;
}

FeatureSet semi_dense_extract(XFeatModel<float>& model, const Tensor<float>& image,
                              const SemiDenseOptions& options) {
  struct Ref {
    std::size_t set, index;
  };
  std::vector<FeatureSet> per_scale;
  std::vector<Ref> order;
  for (float s : options.scales) {
    per_scale.push_back(scale_candidates(model, image, s));
    for (std::size_t i = 0; i < per_scale.back().size(); ++i) order.push_back({per_scale.size() - 1, i});
  }
  std::stable_sort(order.begin(), order.end(), [&](const Ref& a, const Ref& b) {
    return per_scale[a.set].reliability[a.index] > per_scale[b.set].reliability[b.index];
  });

  FeatureSet out;
  out.width = static_cast<std::uint32_t>(image.dim(3));
  out.height = static_cast<std::uint32_t>(image.dim(2));
  out.mode = FeatureMode::kSemiDense;
  out.dim = per_scale.empty() ? 64 : per_scale.front().dim;

  // Buckets of side `radius`; a collision can only come from the 3x3
  // neighbourhood of buckets.
  const float radius = options.dedup_radius;
  const float bucket = std::max(radius, 1e-3f);
  std::unordered_map<std::int64_t, std::vector<std::size_t>> grid;
  const auto key = [](std::int64_t bx, std::int64_t by) { return (bx << 32) ^ (by & 0xffffffff); };
  for (const auto& ref : order) {
    if (out.size() >= options.top_n) break;
    const auto& src = per_scale[ref.set];
    const float px = src.x[ref.index], py = src.y[ref.index];
    const auto bx = static_cast<std::int64_t>(std::floor(px / bucket));
    const auto by = static_cast<std::int64_t>(std::floor(py / bucket));
    bool collides = false;
    if (radius > 0) {
      for (std::int64_t dy = -1; dy <= 1 && !collides; ++dy) {
        for (std::int64_t dx = -1; dx <= 1 && !collides; ++dx) {
          auto it = grid.find(key(bx + dx, by + dy));
          if (it == grid.end()) continue;
          for (std::size_t k : it->second) {
            const float ex = out.x[k] - px, ey = out.y[k] - py;
            if (ex * ex + ey * ey <= radius * radius) {
              collides = true;
              break;
            }
          }
        }
      }
    }
    if (collides) continue;
    grid[key(bx, by)].push_back(out.size());
    out.push_back(px, py, src.score[ref.index], src.reliability[ref.index], src.scale[ref.index],
                  src.descriptor(ref.index));
  }
  return out;
}

}  // namespace xfeat
