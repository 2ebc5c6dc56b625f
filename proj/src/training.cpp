#include "xfeat/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "xfeat/io.hpp"

namespace xfeat::training {

namespace {

constexpr int kCell = static_cast<int>(kCellSize);

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

std::size_t image_height(const Tensor<float>& image) { return image.dim(image.rank() - 2); }
std::size_t image_width(const Tensor<float>& image) { return image.dim(image.rank() - 1); }

void require_image(const Tensor<float>& image, const char* what) {
  require(image.defined() && image.rank() == 4 && image.dim(0) == 1 && image.dim(1) == 1,
          std::string(what) + ": expected a [1,1,H,W] image");
}

// Partial Fisher-Yates: the first k entries of `order` become a uniform
// random k-subset.
void partial_shuffle(std::vector<std::size_t>& order, std::size_t k, Rng& rng) {
  k = std::min(k, order.size());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.index(order.size() - i);
    std::swap(order[i], order[j]);
  }
}

bool project(const Eigen::Matrix3d& m, double x, double y, double& ox, double& oy) {
  const double w = m(2, 0) * x + m(2, 1) * y + m(2, 2);
  if (!(w > 1e-12)) return false;
  ox = (m(0, 0) * x + m(0, 1) * y + m(0, 2)) / w;
  oy = (m(1, 0) * x + m(1, 1) * y + m(1, 2)) / w;
  return std::isfinite(ox) && std::isfinite(oy);
}

Tensor<float> resize_image(const Tensor<float>& image, std::size_t width, std::size_t height) {
  if (image_width(image) == width && image_height(image) == height) return image;
  NoGradGuard guard;
  return ops::bilinear_resize(image, height, width);
}

geometry::Homography scale_map(double sx, double sy) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m(0, 0) = sx;
  m(1, 1) = sy;
  return geometry::Homography(m);
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += k[i + radius];
  }
  for (auto& v : k) v /= total;
  return k;
}

// Separable blur with replicate border.
std::vector<double> blur(const std::vector<double>& src, std::size_t h, std::size_t w,
                         const std::vector<double>& kernel) {
  const int radius = static_cast<int>(kernel.size() / 2);
  std::vector<double> tmp(src.size()), out(src.size());
  const auto clampi = [](int v, int n) { return std::clamp(v, 0, n - 1); };
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double acc = 0;
      for (int k = -radius; k <= radius; ++k) {
        acc += kernel[k + radius] * src[r * w + clampi(static_cast<int>(c) + k, static_cast<int>(w))];
      }
      tmp[r * w + c] = acc;
    }
  }
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double acc = 0;
      for (int k = -radius; k <= radius; ++k) {
        acc += kernel[k + radius] * tmp[clampi(static_cast<int>(r) + k, static_cast<int>(h)) * w + c];
      }
      out[r * w + c] = acc;
    }
  }
  return out;
}

std::vector<Correspondence> read_correspondence_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open correspondence file " + path.string());
  std::vector<Correspondence> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    Correspondence c;
    if (!(fields >> c.x1 >> c.y1 >> c.x2 >> c.y2)) {
      throw FormatError("malformed correspondence row in " + path.string());
    }
    rows.push_back(c);
  }
  return rows;
}

}  // namespace

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::index on empty range");
  return std::min(n - 1, static_cast<std::size_t>(uniform() * static_cast<double>(n)));
}

double Rng::normal() {
  const double u1 = 1.0 - uniform();  // (0,1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void CorrespondenceSet::validate() const {
  for (const auto& c : rows) {
    const bool ok = c.x1 >= 0 && c.y1 >= 0 && c.x2 >= 0 && c.y2 >= 0 && c.x1 < width1 &&
                    c.y1 < height1 && c.x2 < width2 && c.y2 < height2;
    if (!ok) throw ShapeError("correspondence outside image bounds");
  }
}

CellOffset cell_offset(float x, float y) {
  const auto wrap = [](float v) {
    const int p = static_cast<int>(std::floor(v));
    return ((p % kCell) + kCell) % kCell;
  };
  return {wrap(x), wrap(y)};
}

std::size_t keypoint_index(int tx, int ty) {
  if (tx < 0 || tx >= kCell || ty < 0 || ty >= kCell) {
    throw ShapeError("keypoint offset outside the 8x8 cell");
  }
  return static_cast<std::size_t>(tx + kCell * ty);
}

CellOffset keypoint_offset(std::size_t t_idx) {
  if (t_idx >= kDustbin) throw ShapeError("t_idx has no in-cell offset");
  return {static_cast<int>(t_idx % kCellSize), static_cast<int>(t_idx / kCellSize)};
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
Tensor<T> loss_dual_softmax(const Tensor<T>& f1, const Tensor<T>& f2, T temperature) {
  require(f1.rank() == 2 && f1.shape() == f2.shape(), "dual-softmax: descriptor shapes differ");
  require(f1.dim(0) >= 2, "dual-softmax: needs at least two correspondences");
  if (!(temperature > 0)) throw std::invalid_argument("dual-softmax: temperature must be positive");
  const std::size_t n = f1.dim(0);
  const auto s = ops::scale(ops::matmul(f1, ops::transpose(f2)), T(1) / temperature);
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i;
  return ops::add(ops::nll_rows(ops::log_softmax(s, 1), diag),
                  ops::nll_rows(ops::log_softmax(ops::transpose(s), 1), diag));
}

template <typename T>
Tensor<T> reliability_targets(const Tensor<T>& f1, const Tensor<T>& f2, T temperature) {
  require(f1.rank() == 2 && f1.shape() == f2.shape(), "reliability: descriptor shapes differ");
  if (!(temperature > 0)) throw std::invalid_argument("reliability: temperature must be positive");
  NoGradGuard guard;
  const std::size_t n = f1.dim(0);
  const auto s = ops::scale(ops::matmul(f1.detach(), ops::transpose(f2.detach())), T(1) / temperature);
  const auto p12 = ops::softmax(s, 1);
  const auto p21 = ops::softmax(ops::transpose(s), 1);
  std::vector<T> target(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row12 = p12.data().subspan(i * n, n);
    const auto row21 = p21.data().subspan(i * n, n);
    target[i] = *std::max_element(row12.begin(), row12.end()) *
                *std::max_element(row21.begin(), row21.end());
  }
  return Tensor<T>(Shape{n}, std::move(target));
}

template <typename T>
Tensor<T> loss_reliability(const Tensor<T>& r_logits1, const Tensor<T>& r_logits2,
                           const Tensor<T>& target) {
  const std::size_t n = target.numel();
  require(n > 0 && r_logits1.numel() == n && r_logits2.numel() == n,
          "reliability: logits and targets differ in length");
  const auto t = target.detach().reshape({n});
  const auto term = [&](const Tensor<T>& r) {
    return ops::mean(ops::abs(ops::sub(ops::sigmoid(r.reshape({n})), t)));
  };
  return ops::add(term(r_logits1), term(r_logits2));
}

template <typename T>
Tensor<T> loss_reliability(const Tensor<T>& r_logits1, const Tensor<T>& r_logits2,
                           const Tensor<T>& f1, const Tensor<T>& f2, T temperature) {
  return loss_reliability(r_logits1, r_logits2, reliability_targets(f1, f2, temperature));
}

template <typename T>
Tensor<T> loss_fine(const Tensor<T>& offset_logits, const std::vector<CellOffset>& gt_offsets) {
  require(offset_logits.rank() == 2 && offset_logits.dim(1) == kDustbin,
          "fine loss: offset logits must be [N,64]");
  require(offset_logits.dim(0) == gt_offsets.size() && !gt_offsets.empty(),
          "fine loss: one ground-truth offset per row required");
  std::vector<std::size_t> targets(gt_offsets.size());
  for (std::size_t i = 0; i < gt_offsets.size(); ++i) {
    const auto& o = gt_offsets[i];
    if (o.x < 0 || o.x >= kCell || o.y < 0 || o.y >= kCell) {
      throw ShapeError("fine loss: ground-truth offset outside [0,7]");
    }
    targets[i] = static_cast<std::size_t>(o.y * kCell + o.x);
  }
  return ops::nll_rows(ops::log_softmax(offset_logits, 1), targets);
}

template <typename T>
Tensor<T> loss_keypoint(const Tensor<T>& keypoint_logits, const std::vector<KeypointLabel>& labels) {
  require(keypoint_logits.rank() == 4 && keypoint_logits.dim(1) == kDustbin + 1,
          "keypoint loss: logits must be [N,65,h,w]");
  require(!labels.empty(), "keypoint loss: no labelled cells");
  std::vector<ops::CellIndex> cells;
  std::vector<std::size_t> targets;
  cells.reserve(labels.size());
  targets.reserve(labels.size());
  for (const auto& l : labels) {
    if (l.t_idx > kDustbin) throw ShapeError("keypoint loss: t_idx outside [0,64]");
    cells.push_back({l.batch, l.row, l.col});
    targets.push_back(l.t_idx);
  }
  return ops::nll_rows(ops::log_softmax(ops::gather_cells(keypoint_logits, cells), 1), targets);
}

std::vector<KeypointLabel> balance_dustbin(const std::vector<KeypointLabel>& labels, double ratio,
                                           Rng& rng) {
  if (!(ratio >= 0)) throw std::invalid_argument("dustbin ratio must be non-negative");
  std::vector<std::size_t> dustbin;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].t_idx == kDustbin) {
      dustbin.push_back(i);
    } else {
      ++positives;
    }
  }
  const auto cap = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(positives)));
  std::vector<char> keep(labels.size(), 1);
  if (dustbin.size() > cap) {
    std::vector<std::size_t> order(dustbin.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    partial_shuffle(order, cap, rng);
    for (auto i : dustbin) keep[i] = 0;
    for (std::size_t k = 0; k < cap; ++k) keep[dustbin[order[k]]] = 1;
  }
  std::vector<KeypointLabel> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (keep[i]) out.push_back(labels[i]);
  }
  return out;
}

void LossWeights::validate() const {
  const double w[] = {alpha, beta, gamma, delta};
  bool any_positive = false;
  for (double v : w) {
    if (!(v >= 0) || !std::isfinite(v)) throw std::invalid_argument("loss weights must be >= 0");
    any_positive = any_positive || v > 0;
  }
  if (!any_positive) throw std::invalid_argument("at least one loss weight must be positive");
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& ds, const Tensor<T>& rel, const Tensor<T>& fine,
                     const Tensor<T>& kp, const LossWeights& weights) {
  weights.validate();
  for (const auto* part : {&ds, &rel, &fine, &kp}) {
    if (!std::isfinite(static_cast<double>(part->item()))) {
      throw NumericError("total loss: non-finite loss part");
    }
  }
  auto total = ops::add(ops::scale(ds, static_cast<T>(weights.alpha)),
                        ops::scale(rel, static_cast<T>(weights.beta)));
  total = ops::add(total, ops::scale(fine, static_cast<T>(weights.gamma)));
  return ops::add(total, ops::scale(kp, static_cast<T>(weights.delta)));
}

// ---------------------------------------------------------------------------
// Teachers

std::vector<float> HarrisTeacher::response(const Tensor<float>& image) const {
  require_image(image, "harris");
  const std::size_t h = image_height(image), w = image_width(image);
  const auto px = image.data();
  const auto at = [&](std::ptrdiff_t r, std::ptrdiff_t c) {
    r = std::clamp<std::ptrdiff_t>(r, 0, static_cast<std::ptrdiff_t>(h) - 1);
    c = std::clamp<std::ptrdiff_t>(c, 0, static_cast<std::ptrdiff_t>(w) - 1);
    return static_cast<double>(px[r * w + c]);
  };
  std::vector<double> ixx(h * w), iyy(h * w), ixy(h * w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const auto ri = static_cast<std::ptrdiff_t>(r), ci = static_cast<std::ptrdiff_t>(c);
      const double gx = 0.5 * (at(ri, ci + 1) - at(ri, ci - 1));
      const double gy = 0.5 * (at(ri + 1, ci) - at(ri - 1, ci));
      ixx[r * w + c] = gx * gx;
      iyy[r * w + c] = gy * gy;
      ixy[r * w + c] = gx * gy;
    }
  }
  const auto kernel = gaussian_kernel(options_.sigma);
  const auto sxx = blur(ixx, h, w, kernel);
  const auto syy = blur(iyy, h, w, kernel);
  const auto sxy = blur(ixy, h, w, kernel);
  std::vector<float> out(h * w);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double det = sxx[i] * syy[i] - sxy[i] * sxy[i];
    const double tr = sxx[i] + syy[i];
    out[i] = static_cast<float>(det - options_.k * tr * tr);
  }
  return out;
}

std::vector<std::size_t> HarrisTeacher::cell_labels(const Tensor<float>& image) const {
  const auto r = response(image);
  const std::size_t h = image_height(image), w = image_width(image);
  const std::size_t gh = (h + kCellSize - 1) / kCellSize, gw = (w + kCellSize - 1) / kCellSize;
  const float peak = r.empty() ? 0.0f : *std::max_element(r.begin(), r.end());
  const double threshold =
      std::max(options_.relative_threshold * static_cast<double>(peak), options_.absolute_threshold);
  std::vector<std::size_t> labels(gh * gw, kDustbin);
  for (std::size_t i = 0; i < gh; ++i) {
    for (std::size_t j = 0; j < gw; ++j) {
      float best = -std::numeric_limits<float>::infinity();
      std::size_t br = 0, bc = 0;
      for (std::size_t y = i * kCellSize; y < std::min(h, (i + 1) * kCellSize); ++y) {
        for (std::size_t x = j * kCellSize; x < std::min(w, (j + 1) * kCellSize); ++x) {
          if (r[y * w + x] > best) {
            best = r[y * w + x];
            br = y;
            bc = x;
          }
        }
      }
      if (best > threshold) {
        labels[i * gw + j] = keypoint_index(static_cast<int>(bc % kCellSize),
                                            static_cast<int>(br % kCellSize));
      }
    }
  }
  return labels;
}

PrecomputedTeacher PrecomputedTeacher::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open keypoint file " + path.string());
  std::vector<Point2> points;
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    Point2 p;
    if (!(fields >> p.x >> p.y)) throw FormatError("malformed keypoint row in " + path.string());
    points.push_back(p);
  }
  return PrecomputedTeacher(std::move(points));
}

std::vector<std::size_t> PrecomputedTeacher::cell_labels(const Tensor<float>& image) const {
  require_image(image, "teacher");
  const std::size_t h = image_height(image), w = image_width(image);
  const std::size_t gh = (h + kCellSize - 1) / kCellSize, gw = (w + kCellSize - 1) / kCellSize;
  std::vector<std::size_t> labels(gh * gw, kDustbin);
  for (const auto& p : keypoints_) {
    if (!(p.x >= 0 && p.y >= 0 && p.x < static_cast<float>(w) && p.y < static_cast<float>(h))) {
      continue;
    }
    const auto col = static_cast<std::size_t>(p.x), row = static_cast<std::size_t>(p.y);
    auto& slot = labels[(row / kCellSize) * gw + col / kCellSize];
    if (slot == kDustbin) {
      slot = keypoint_index(static_cast<int>(col % kCellSize), static_cast<int>(row % kCellSize));
    }
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Synthetic data

Tensor<float> procedural_texture(std::size_t width, std::size_t height, std::uint64_t seed) {
  require(width > 0 && height > 0, "texture: empty size");
  Rng rng(seed);
  std::vector<double> img(width * height, 0.0);

  // Value noise, smoothstep-interpolated lattice per octave.
  const double spacings[] = {64, 32, 16, 8};
  const double amplitudes[] = {0.5, 0.3, 0.2, 0.12};
  for (int o = 0; o < 4; ++o) {
    const double s = spacings[o];
    const auto gw = static_cast<std::size_t>(std::ceil(width / s)) + 2;
    const auto gh = static_cast<std::size_t>(std::ceil(height / s)) + 2;
    std::vector<double> lattice(gw * gh);
    for (auto& v : lattice) v = rng.uniform();
    for (std::size_t r = 0; r < height; ++r) {
      const double fy = (r + 0.5) / s;
      const auto y0 = static_cast<std::size_t>(fy);
      double ty = fy - y0;
      ty = ty * ty * (3 - 2 * ty);
      for (std::size_t c = 0; c < width; ++c) {
        const double fx = (c + 0.5) / s;
        const auto x0 = static_cast<std::size_t>(fx);
        double tx = fx - x0;
        tx = tx * tx * (3 - 2 * tx);
        const double top = lattice[y0 * gw + x0] * (1 - tx) + lattice[y0 * gw + x0 + 1] * tx;
        const double bot =
            lattice[(y0 + 1) * gw + x0] * (1 - tx) + lattice[(y0 + 1) * gw + x0 + 1] * tx;
        img[r * width + c] += amplitudes[o] * (top * (1 - ty) + bot * ty);
      }
    }
  }

  // Flat-shaded shapes give corners and edges for the teacher.
  const std::size_t shapes = std::max<std::size_t>(8, width * height / 1500);
  const double extent = static_cast<double>(std::min(width, height));
  for (std::size_t n = 0; n < shapes; ++n) {
    const int kind = static_cast<int>(rng.index(3));
    const double cx = rng.uniform(0, width), cy = rng.uniform(0, height);
    const double size = rng.uniform(0.02, 0.12) * extent;
    const double value = rng.uniform();
    const double angle = rng.uniform(0, std::numbers::pi);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double aspect = rng.uniform(0.4, 1.0);
    double tri[6];
    for (int k = 0; k < 3; ++k) {
      const double a = angle + k * 2.0 * std::numbers::pi / 3.0 + rng.uniform(-0.5, 0.5);
      tri[2 * k] = cx + size * std::cos(a);
      tri[2 * k + 1] = cy + size * std::sin(a);
    }
    const auto inside = [&](double x, double y) {
      const double dx = x - cx, dy = y - cy;
      switch (kind) {
        case 0:
          return dx * dx + dy * dy * (1.0 / (aspect * aspect)) <= size * size;
        case 1: {
          const double u = dx * ca + dy * sa, v = -dx * sa + dy * ca;
          return std::abs(u) <= size && std::abs(v) <= size * aspect;
        }
        default: {
          const auto edge = [&](int a, int b) {
            return (tri[2 * b] - tri[2 * a]) * (y - tri[2 * a + 1]) -
                   (tri[2 * b + 1] - tri[2 * a + 1]) * (x - tri[2 * a]);
          };
          const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
          return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
        }
      }
    };
    const double reach = size * 1.5;
    const auto r0 = static_cast<std::ptrdiff_t>(std::max(0.0, std::floor(cy - reach)));
    const auto r1 = static_cast<std::ptrdiff_t>(std::min<double>(height, std::ceil(cy + reach)));
    const auto c0 = static_cast<std::ptrdiff_t>(std::max(0.0, std::floor(cx - reach)));
    const auto c1 = static_cast<std::ptrdiff_t>(std::min<double>(width, std::ceil(cx + reach)));
    for (auto r = r0; r < r1; ++r) {
      for (auto c = c0; c < c1; ++c) {
        if (inside(c + 0.5, r + 0.5)) img[r * width + c] = value * 1.14;
      }
    }
  }

  const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
  const double span = std::max(*hi - *lo, 1e-9);
  std::vector<float> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<float>((img[i] - *lo) / span);
  return Tensor<float>(Shape{1, 1, height, width}, std::move(out));
}

geometry::Homography random_homography(std::size_t width, std::size_t height,
                                       const WarpParams& params, Rng& rng) {
  const double cx = 0.5 * static_cast<double>(width), cy = 0.5 * static_cast<double>(height);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double theta =
        rng.uniform(-params.max_rotation_deg, params.max_rotation_deg) * std::numbers::pi / 180.0;
    const double s = rng.uniform(params.scale_min, params.scale_max);
    const double tx = rng.uniform(-params.max_translation, params.max_translation) * width;
    const double ty = rng.uniform(-params.max_translation, params.max_translation) * height;
    const double p1 = rng.uniform(-params.perspective, params.perspective);
    const double p2 = rng.uniform(-params.perspective, params.perspective);
    Eigen::Matrix3d to_origin = Eigen::Matrix3d::Identity();
    to_origin(0, 2) = -cx;
    to_origin(1, 2) = -cy;
    Eigen::Matrix3d similarity = Eigen::Matrix3d::Identity();
    similarity(0, 0) = s * std::cos(theta);
    similarity(0, 1) = -s * std::sin(theta);
    similarity(1, 0) = s * std::sin(theta);
    similarity(1, 1) = s * std::cos(theta);
    similarity(0, 2) = cx + tx;
    similarity(1, 2) = cy + ty;
    Eigen::Matrix3d m = similarity * to_origin;
    m(2, 0) = p1;
    m(2, 1) = p2;
    const geometry::Homography h(m);
    const auto& n = h.matrix();
    if (std::abs(n(0, 0) * n(1, 1) - n(0, 1) * n(1, 0)) >= 1e-3) return h;
  }
  throw NumericError("random homography: could not draw a non-degenerate map");
}

Tensor<float> warp_image(const Tensor<float>& image, const geometry::Homography& h) {
  require_image(image, "warp");
  const std::size_t hh = image_height(image), w = image_width(image);
  const Eigen::Matrix3d inv = h.inverse().matrix();
  const auto src = image.data();
  std::vector<float> out(hh * w, 0.0f);
  for (std::size_t r = 0; r < hh; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double qx = 0, qy = 0;
      if (!project(inv, c + 0.5, r + 0.5, qx, qy)) continue;
      if (qx < 0 || qy < 0 || qx >= static_cast<double>(w) || qy >= static_cast<double>(hh)) continue;
      const double sx = qx - 0.5, sy = qy - 0.5;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const auto cl = [](double v, std::size_t n) {
        return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(n - 1)));
      };
      const std::size_t x0 = cl(fx, w), x1 = cl(fx + 1, w), y0 = cl(fy, hh), y1 = cl(fy + 1, hh);
      const double v = (1 - ay) * ((1 - ax) * src[y0 * w + x0] + ax * src[y0 * w + x1]) +
                       ay * ((1 - ax) * src[y1 * w + x0] + ax * src[y1 * w + x1]);
      out[r * w + c] = static_cast<float>(v);
    }
  }
  return Tensor<float>(image.shape(), std::move(out));
}

Tensor<float> photometric_jitter(const Tensor<float>& image, const WarpParams& params, Rng& rng) {
  const double contrast = rng.uniform(params.contrast_min, params.contrast_max);
  const double brightness = rng.uniform(-params.brightness, params.brightness);
  const double sigma = rng.uniform(0.0, params.max_noise_sigma);
  std::vector<float> out(image.numel());
  const auto src = image.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = (src[i] - 0.5) * contrast + 0.5 + brightness + sigma * rng.normal();
    out[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return Tensor<float>(image.shape(), std::move(out));
}

CorrespondenceSet grid_correspondences(const geometry::Homography& h, std::size_t width1,
                                       std::size_t height1, std::size_t width2,
                                       std::size_t height2) {
  CorrespondenceSet set;
  set.width1 = static_cast<std::uint32_t>(width1);
  set.height1 = static_cast<std::uint32_t>(height1);
  set.width2 = static_cast<std::uint32_t>(width2);
  set.height2 = static_cast<std::uint32_t>(height2);
  const auto& m = h.matrix();
  for (std::size_t i = 0; i < height1 / kCellSize; ++i) {
    for (std::size_t j = 0; j < width1 / kCellSize; ++j) {
      const double x1 = static_cast<double>(kCellSize * j) + 4.0;
      const double y1 = static_cast<double>(kCellSize * i) + 4.0;
      double x2 = 0, y2 = 0;
      if (!project(m, x1, y1, x2, y2)) continue;
      const auto fx2 = static_cast<float>(x2), fy2 = static_cast<float>(y2);
      if (fx2 < 0 || fy2 < 0 || fx2 >= static_cast<float>(width2) ||
          fy2 >= static_cast<float>(height2)) {
        continue;
      }
      set.rows.push_back({static_cast<float>(x1), static_cast<float>(y1), fx2, fy2});
    }
  }
  return set;
}

TrainingPair warp_pair(const Tensor<float>& image, const geometry::Homography& h,
                       const WarpParams& params, Rng& rng) {
  require_image(image, "warp pair");
  const std::size_t height = image_height(image), width = image_width(image);
  TrainingPair pair;
  pair.h_gt = h;
  pair.image1 = image;
  pair.image2 = warp_image(image, h);
  if (params.photometric) {
    pair.image1 = photometric_jitter(pair.image1, params, rng);
    pair.image2 = photometric_jitter(pair.image2, params, rng);
  }
  pair.correspondences = grid_correspondences(h, width, height, width, height);
  return pair;
}

TrainingPair synth_warp_pair(const Tensor<float>& image, Rng& rng, const WarpParams& params) {
  require_image(image, "synthetic warp");
  require(image_width(image) >= 128 && image_height(image) >= 128,
          "synthetic warp: image must be at least 128x128");
  const auto h = random_homography(image_width(image), image_height(image), params, rng);
  return warp_pair(image, h, params, rng);
}

TrainingPair make_real_pair(const RealPair& pair, std::size_t width, std::size_t height) {
  require_image(pair.image1, "real pair");
  require_image(pair.image2, "real pair");
  const double w1 = static_cast<double>(image_width(pair.image1));
  const double h1 = static_cast<double>(image_height(pair.image1));
  const double w2 = static_cast<double>(image_width(pair.image2));
  const double h2 = static_cast<double>(image_height(pair.image2));
  const double sx1 = width / w1, sy1 = height / h1, sx2 = width / w2, sy2 = height / h2;
  TrainingPair out;
  out.image1 = resize_image(pair.image1, width, height);
  out.image2 = resize_image(pair.image2, width, height);
  out.h_gt = scale_map(sx2, sy2) * pair.h * scale_map(1.0 / sx1, 1.0 / sy1);
  if (pair.dense.empty()) {
    out.correspondences = grid_correspondences(out.h_gt, width, height, width, height);
    return out;
  }
  auto& set = out.correspondences;
  set.width1 = set.width2 = static_cast<std::uint32_t>(width);
  set.height1 = set.height2 = static_cast<std::uint32_t>(height);
  for (const auto& c : pair.dense) {
    const Correspondence s{static_cast<float>(c.x1 * sx1), static_cast<float>(c.y1 * sy1),
                           static_cast<float>(c.x2 * sx2), static_cast<float>(c.y2 * sy2)};
    const auto fw = static_cast<float>(width), fh = static_cast<float>(height);
    if (s.x1 >= 0 && s.y1 >= 0 && s.x2 >= 0 && s.y2 >= 0 && s.x1 < fw && s.x2 < fw && s.y1 < fh &&
        s.y2 < fh) {
      set.rows.push_back(s);
    }
  }
  return out;
}

std::vector<RealPair> read_posed_pairs(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw FormatError("cannot open manifest " + manifest.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  std::vector<nlohmann::json> entries;
  try {
    const auto doc = nlohmann::json::parse(text);
    if (doc.is_array()) {
      entries.assign(doc.begin(), doc.end());
    } else {
      entries.push_back(doc);
    }
  } catch (const nlohmann::json::parse_error&) {
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        entries.push_back(nlohmann::json::parse(line));
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("manifest line is not JSON: " + std::string(e.what()));
      }
    }
  }
  const auto base = manifest.parent_path();
  const auto resolve = [&](std::filesystem::path p) { return p.is_relative() ? base / p : p; };
  std::vector<RealPair> pairs;
  for (const auto& e : entries) {
    try {
      RealPair pair;
      pair.image1 = io::decode_image(resolve(e.at("image_a").get<std::string>()));
      pair.image2 = io::decode_image(resolve(e.at("image_b").get<std::string>()));
      if (e.contains("H")) {
        pair.h = geometry::Homography::from_row_major(e.at("H").get<std::vector<double>>());
      } else if (e.contains("correspondences")) {
        pair.dense = read_correspondence_file(resolve(e.at("correspondences").get<std::string>()));
      } else {
        throw FormatError("manifest entry needs \"H\" or \"correspondences\"");
      }
      pairs.push_back(std::move(pair));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError("manifest entry malformed: " + std::string(ex.what()));
    } catch (const std::invalid_argument& ex) {
      throw FormatError("manifest entry malformed: " + std::string(ex.what()));
    }
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Optimisation

void TrainConfig::validate() const {
  const auto check = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("train config: ") + what);
  };
  check(batch_size > 0, "batch_size must be positive");
  check(lr > 0 && std::isfinite(lr), "lr must be positive");
  check(lr_decay > 0 && lr_decay <= 1, "lr_decay must be in (0,1]");
  check(decay_every > 0, "decay_every must be positive");
  check(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "adam betas must be in [0,1)");
  check(adam_eps > 0, "adam_eps must be positive");
  check(width >= 32 && height >= 32, "image size must be at least 32x32");
  check(synthetic_fraction >= 0 && synthetic_fraction <= 1, "synthetic_fraction must be in [0,1]");
  check(temperature > 0, "temperature must be positive");
  check(max_correspondences >= 2, "max_correspondences must be at least 2");
  check(dustbin_ratio >= 0, "dustbin_ratio must be non-negative");
  weights.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"lr", lr},
          {"lr_decay", lr_decay},
          {"decay_every", decay_every},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"steps", steps},
          {"seed", seed},
          {"width", width},
          {"height", height},
          {"synthetic_fraction", synthetic_fraction},
          {"temperature", temperature},
          {"max_correspondences", max_correspondences},
          {"dustbin_ratio", dustbin_ratio},
          {"weights",
           {{"alpha", weights.alpha},
            {"beta", weights.beta},
            {"gamma", weights.gamma},
            {"delta", weights.delta}}},
          {"warp",
           {{"max_rotation_deg", warp.max_rotation_deg},
            {"scale_min", warp.scale_min},
            {"scale_max", warp.scale_max},
            {"max_translation", warp.max_translation},
            {"perspective", warp.perspective},
            {"brightness", warp.brightness},
            {"contrast_min", warp.contrast_min},
            {"contrast_max", warp.contrast_max},
            {"max_noise_sigma", warp.max_noise_sigma},
            {"photometric", warp.photometric}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.decay_every = j.value("decay_every", c.decay_every);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    c.width = j.value("width", c.width);
    c.height = j.value("height", c.height);
    c.synthetic_fraction = j.value("synthetic_fraction", c.synthetic_fraction);
    c.temperature = j.value("temperature", c.temperature);
    c.max_correspondences = j.value("max_correspondences", c.max_correspondences);
    c.dustbin_ratio = j.value("dustbin_ratio", c.dustbin_ratio);
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      c.weights.alpha = w.value("alpha", c.weights.alpha);
      c.weights.beta = w.value("beta", c.weights.beta);
      c.weights.gamma = w.value("gamma", c.weights.gamma);
      c.weights.delta = w.value("delta", c.weights.delta);
    }
    if (j.contains("warp")) {
      const auto& w = j.at("warp");
      auto& p = c.warp;
      p.max_rotation_deg = w.value("max_rotation_deg", p.max_rotation_deg);
      p.scale_min = w.value("scale_min", p.scale_min);
      p.scale_max = w.value("scale_max", p.scale_max);
      p.max_translation = w.value("max_translation", p.max_translation);
      p.perspective = w.value("perspective", p.perspective);
      p.brightness = w.value("brightness", p.brightness);
      p.contrast_min = w.value("contrast_min", p.contrast_min);
      p.contrast_max = w.value("contrast_max", p.contrast_max);
      p.max_noise_sigma = w.value("max_noise_sigma", p.max_noise_sigma);
      p.photometric = w.value("photometric", p.photometric);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("train config: " + std::string(e.what()));
  }
  c.validate();
  return c;
}

double learning_rate_at(const TrainConfig& config, std::size_t step) {
  return config.lr * std::pow(config.lr_decay, static_cast<double>(step / config.decay_every));
}

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>*> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto* p : params_) {
    m_.emplace_back(p->numel(), 0.0);
    v_.emplace_back(p->numel(), 0.0);
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto d = p.data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = beta1_ * m[i] + (1 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1 - beta2_) * gi * gi;
      d[i] -= static_cast<T>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
    }
  }
}

PreparedBatch prepare_batch(const std::vector<TrainingPair>& batch, const TrainConfig& config,
                            const TeacherOracle& teacher, Rng& rng) {
  require(!batch.empty(), "training batch is empty");
  const auto& first = batch.front().image1;
  require_image(first, "training batch");
  const std::size_t h = image_height(first), w = image_width(first);
  PreparedBatch out;
  std::vector<float> stacked;
  stacked.reserve(2 * batch.size() * h * w);
  for (const auto& pair : batch) {
    for (const auto* img : {&pair.image1, &pair.image2}) {
      require_image(*img, "training batch");
      require(image_height(*img) == h && image_width(*img) == w,
              "training batch: all images must share one size");
      stacked.insert(stacked.end(), img->data().begin(), img->data().end());
    }
  }
  out.images = Tensor<float>(Shape{2 * batch.size(), 1, h, w}, std::move(stacked));

  const std::size_t gw = (w + kCellSize - 1) / kCellSize;
  for (std::size_t p = 0; p < batch.size(); ++p) {
    const auto& corr = batch[p].correspondences;
    corr.validate();
    PreparedBatch::PairRows rows;
    std::vector<std::size_t> order(corr.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    partial_shuffle(order, order.size(), rng);
    std::unordered_set<std::size_t> seen1, seen2;
    for (auto i : order) {
      if (rows.cells1.size() >= config.max_correspondences) break;
      const auto& c = corr.rows[i];
      const ops::CellIndex a{2 * p, static_cast<std::size_t>(c.y1) / kCellSize,
                             static_cast<std::size_t>(c.x1) / kCellSize};
      const ops::CellIndex b{2 * p + 1, static_cast<std::size_t>(c.y2) / kCellSize,
                             static_cast<std::size_t>(c.x2) / kCellSize};
      // Each cell may appear once per side, otherwise the dual-softmax
      // diagonal is ambiguous.
      if (!seen1.insert(a.row * gw + a.col).second) continue;
      if (!seen2.insert(b.row * gw + b.col).second) {
        seen1.erase(a.row * gw + a.col);
        continue;
      }
      rows.cells1.push_back(a);
      rows.cells2.push_back(b);
      rows.offsets.push_back(cell_offset(c.x2, c.y2));
    }
    if (rows.cells1.size() < 2) {
      std::cerr << "warning: training pair " << p << " has too few correspondences, skipped\n";
      ++out.skipped_pairs;
      rows = {};
    }
    out.pairs.push_back(std::move(rows));
  }

  for (std::size_t b = 0; b < 2 * batch.size(); ++b) {
    const auto& img = b % 2 == 0 ? batch[b / 2].image1 : batch[b / 2].image2;
    const auto labels = teacher.cell_labels(img);
    std::vector<KeypointLabel> cells;
    cells.reserve(labels.size());
    for (std::size_t k = 0; k < labels.size(); ++k) {
      cells.push_back({b, k / gw, k % gw, labels[k]});
    }
    const auto kept = balance_dustbin(cells, config.dustbin_ratio, rng);
    out.keypoint_labels.insert(out.keypoint_labels.end(), kept.begin(), kept.end());
  }
  return out;
}

template <typename T>
LossTerms<T> compute_losses(XFeatModel<T>& model, const PreparedBatch& batch,
                            const TrainConfig& config, const std::vector<Tensor<T>>* frozen_targets) {
  const auto images = batch.images.template cast<T>();
  const auto out = forward(model, images);
  const auto& f = out.maps.descriptors;
  const auto& r = out.maps.reliability_logits;
  const T tau = static_cast<T>(config.temperature);

  LossTerms<T> terms;
  Tensor<T> ds, rel, fine;
  std::size_t used = 0;
  for (const auto& rows : batch.pairs) {
    if (rows.cells1.empty()) continue;
    const std::size_t n = rows.cells1.size();
    const auto f1 = ops::l2_normalize_rows(ops::gather_cells(f, rows.cells1));
    const auto f2 = ops::l2_normalize_rows(ops::gather_cells(f, rows.cells2));
    const auto r1 = ops::gather_cells(r, rows.cells1).reshape({n});
    const auto r2 = ops::gather_cells(r, rows.cells2).reshape({n});
    Tensor<T> target;
    if (frozen_targets) {
      require(used < frozen_targets->size(), "frozen reliability targets: too few entries");
      target = (*frozen_targets)[used];
    } else {
      target = reliability_targets(f1, f2, tau);
    }
    terms.rel_targets.push_back(target);
    const auto l_ds = loss_dual_softmax(f1, f2, tau);
    const auto l_rel = loss_reliability(r1, r2, target);
    const auto l_fine = loss_fine(refiner_forward(model, f1, f2), rows.offsets);
    ds = ds.defined() ? ops::add(ds, l_ds) : l_ds;
    rel = rel.defined() ? ops::add(rel, l_rel) : l_rel;
    fine = fine.defined() ? ops::add(fine, l_fine) : l_fine;
    ++used;
  }
  if (used == 0) {
    terms.ds = terms.rel = terms.fine = Tensor<T>::scalar(T(0));
  } else {
    const T inv = T(1) / static_cast<T>(used);
    terms.ds = ops::scale(ds, inv);
    terms.rel = ops::scale(rel, inv);
    terms.fine = ops::scale(fine, inv);
  }
  terms.kp = batch.keypoint_labels.empty()
                 ? Tensor<T>::scalar(T(0))
                 : loss_keypoint(out.keypoint_logits, batch.keypoint_labels);
  terms.total = total_loss(terms.ds, terms.rel, terms.fine, terms.kp, config.weights);
  return terms;
}

LossReport train_step(XFeatModel<float>& model, const std::vector<TrainingPair>& batch,
                      const TrainConfig& config, Adam<float>& optimizer,
                      const TeacherOracle& teacher, Rng& rng) {
  if (!model.training()) throw Error("train_step: model must be in training mode");
  const auto prepared = prepare_batch(batch, config, teacher, rng);
  model.zero_grad();
  const auto terms = compute_losses(model, prepared, config);
  const double lr = learning_rate_at(config, optimizer.steps());
  LossReport report;
  report.step = optimizer.steps();
  report.lr = lr;
  report.ds = terms.ds.item();
  report.rel = terms.rel.item();
  report.fine = terms.fine.item();
  report.kp = terms.kp.item();
  report.total = terms.total.item();
  report.pairs_used = batch.size() - prepared.skipped_pairs;
  report.pairs_skipped = prepared.skipped_pairs;
  if (terms.total.requires_grad()) {
    terms.total.backward();
    optimizer.step(lr);
  }
  return report;
}

std::vector<LossReport> train(XFeatModel<float>& model, const std::vector<Tensor<float>>& corpus,
                              const std::vector<RealPair>& real, const TrainConfig& config,
                              const TeacherOracle& teacher,
                              const std::function<void(const LossReport&)>& on_step) {
  config.validate();
  if (corpus.empty() && real.empty()) throw std::invalid_argument("train: no training images");
  std::vector<Tensor<float>> images;
  images.reserve(corpus.size());
  for (const auto& img : corpus) {
    require_image(img, "training corpus");
    images.push_back(resize_image(img, config.width, config.height));
  }
  std::size_t synthetic = config.batch_size;
  if (!real.empty()) {
    synthetic = images.empty() ? 0
                               : static_cast<std::size_t>(std::lround(
                                     config.synthetic_fraction * static_cast<double>(config.batch_size)));
  }

  std::vector<Tensor<float>*> params;
  for (auto& [name, tensor] : model.named_parameters()) params.push_back(tensor);
  Adam<float> optimizer(params, config.beta1, config.beta2, config.adam_eps);
  Rng rng(config.seed);
  model.train();

  std::vector<LossReport> history;
  history.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<TrainingPair> batch;
    batch.reserve(config.batch_size);
    for (std::size_t k = 0; k < config.batch_size; ++k) {
      if (k < synthetic) {
        batch.push_back(synth_warp_pair(images[rng.index(images.size())], rng, config.warp));
      } else {
        batch.push_back(make_real_pair(real[rng.index(real.size())], config.width, config.height));
      }
    }
    auto report = train_step(model, batch, config, optimizer, teacher, rng);
    report.step = step;
    if (on_step) on_step(report);
    history.push_back(report);
  }
  return history;
}

#define XFEAT_INSTANTIATE_TRAINING(T)                                                          \
  template Tensor<T> loss_dual_softmax<T>(const Tensor<T>&, const Tensor<T>&, T);             \
  template Tensor<T> reliability_targets<T>(const Tensor<T>&, const Tensor<T>&, T);           \
  template Tensor<T> loss_reliability<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> loss_reliability<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                         const Tensor<T>&, T);                                 \
  template Tensor<T> loss_fine<T>(const Tensor<T>&, const std::vector<CellOffset>&);          \
  template Tensor<T> loss_keypoint<T>(const Tensor<T>&, const std::vector<KeypointLabel>&);   \
  template Tensor<T> total_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                   const Tensor<T>&, const LossWeights&);                     \
  template class Adam<T>;                                                                      \
  template LossTerms<T> compute_losses<T>(XFeatModel<T>&, const PreparedBatch&,               \
                                          const TrainConfig&, const std::vector<Tensor<T>>*);

XFEAT_INSTANTIATE_TRAINING(float)
XFEAT_INSTANTIATE_TRAINING(double)

}  // namespace xfeat::training
