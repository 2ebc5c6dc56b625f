#include "xfeat/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>

#include "xfeat/error.hpp"

namespace xfeat::geometry {

Homography::Homography(const Eigen::Matrix3d& m) : m_(m) {
  if (std::abs(m_(2, 2)) > 1e-8) m_ /= m_(2, 2);
}

Homography Homography::translation(double tx, double ty) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m(0, 2) = tx;
  m(1, 2) = ty;
  return Homography(m);
}

Homography Homography::from_row_major(std::span<const double> values) {
  if (values.size() != 9) throw std::invalid_argument("homography needs 9 values");
  Eigen::Matrix3d m;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m(r, c) = values[r * 3 + c];
  }
  return Homography(m);
}

std::vector<double> Homography::row_major() const {
  std::vector<double> v(9);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) v[r * 3 + c] = m_(r, c);
  }
  return v;
}

Vec2 Homography::apply(const Vec2& p) const {
  const Eigen::Vector3d q = m_ * Eigen::Vector3d(p.x(), p.y(), 1.0);
  return {q.x() / q.z(), q.y() / q.z()};
}

Homography Homography::inverse() const {
  const double det = m_.determinant();
  if (!(std::abs(det) > 1e-10)) throw std::invalid_argument("homography is not invertible");
  return Homography(m_.inverse());
}

namespace {

// Similarity transform moving the centroid to the origin with mean
// distance sqrt(2).
Eigen::Matrix3d hartley_normalizer(std::span<const Vec2> pts) {
  Vec2 centroid = Vec2::Zero();
  for (const auto& p : pts) centroid += p;
  centroid /= static_cast<double>(pts.size());
  double mean_dist = 0;
  for (const auto& p : pts) mean_dist += (p - centroid).norm();
  mean_dist /= static_cast<double>(pts.size());
  if (!(mean_dist > 1e-12)) throw std::invalid_argument("degenerate point set: all points coincide");
  const double s = std::sqrt(2.0) / mean_dist;
  Eigen::Matrix3d t = Eigen::Matrix3d::Identity();
  t(0, 0) = s;
  t(1, 1) = s;
  t(0, 2) = -s * centroid.x();
  t(1, 2) = -s * centroid.y();
  return t;
}

bool collinear(const Vec2& a, const Vec2& b, const Vec2& c) {
  const Vec2 u = b - a, v = c - a;
  const double cross = u.x() * v.y() - u.y() * v.x();
  const double scale = std::max(u.squaredNorm(), v.squaredNorm());
  return std::abs(cross) <= 1e-9 * std::max(scale, 1e-300);
}

bool has_collinear_triple(std::span<const Vec2> pts) {
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      for (std::size_t k = j + 1; k < pts.size(); ++k) {
        if (collinear(pts[i], pts[j], pts[k])) return true;
      }
    }
  }
  return false;
}

}  // namespace

Homography dlt_homography(std::span<const Vec2> points_a, std::span<const Vec2> points_b) {
  const std::size_t n = points_a.size();
  if (n != points_b.size()) throw std::invalid_argument("dlt: point list lengths differ");
  if (n < 4) throw std::invalid_argument("dlt: need at least 4 correspondences");
  if (n == 4 && (has_collinear_triple(points_a) || has_collinear_triple(points_b))) {
    throw std::invalid_argument("dlt: degenerate configuration (collinear points)");
  }
  const Eigen::Matrix3d ta = hartley_normalizer(points_a);
  const Eigen::Matrix3d tb = hartley_normalizer(points_b);
  Eigen::MatrixXd a(2 * n, 9);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d p = ta * Eigen::Vector3d(points_a[i].x(), points_a[i].y(), 1.0);
    const Eigen::Vector3d q = tb * Eigen::Vector3d(points_b[i].x(), points_b[i].y(), 1.0);
    const double x = p.x(), y = p.y(), u = q.x(), v = q.y();
    a.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    a.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // Rank of the design matrix must be at least 8.
  if (sv.size() >= 8 && !(sv(7) > 1e-10 * sv(0))) {
    throw std::invalid_argument("dlt: degenerate configuration (rank deficient)");
  }
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  const Eigen::Matrix3d m = tb.inverse() * hn * ta;
  if (!(std::abs(m.determinant()) > 1e-12 * std::pow(m.norm(), 3))) {
    throw std::invalid_argument("dlt: estimated homography is singular");
  }
  return Homography(m);
}

double symmetric_transfer_error(const Homography& h, const Vec2& a, const Vec2& b) {
  const double fwd = (h.apply(a) - b).squaredNorm();
  const double bwd = (h.inverse().apply(b) - a).squaredNorm();
  return std::sqrt(0.5 * (fwd + bwd));
}

namespace {

std::size_t count_inliers(const Homography& h, const Homography& h_inv,
                          std::span<const Vec2> a, std::span<const Vec2> b, double threshold,
                          std::vector<std::uint8_t>& mask) {
  mask.assign(a.size(), 0);
  std::size_t count = 0;
  const double t2 = threshold * threshold;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Vec2 fa = h.apply(a[i]);
    const Vec2 bb = h_inv.apply(b[i]);
    const double e2 = 0.5 * ((fa - b[i]).squaredNorm() + (bb - a[i]).squaredNorm());
    if (std::isfinite(e2) && e2 < t2) {
      mask[i] = 1;
      ++count;
    }
  }
  return count;
}

}  // namespace

RansacResult ransac_homography(std::span<const Vec2> points_a, std::span<const Vec2> points_b,
                               const RansacOptions& options) {
  RansacResult result;
  const std::size_t n = points_a.size();
  if (n != points_b.size()) throw std::invalid_argument("ransac: point list lengths differ");
  result.inlier_mask.assign(n, 0);
  if (n < 4) return result;

  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::uint8_t> mask;
  std::array<Vec2, 4> sa, sb;
  double needed = options.max_iters;
  int iter = 0;
  for (; iter < options.max_iters && iter < needed; ++iter) {
    std::array<std::size_t, 4> idx{};
    for (int k = 0; k < 4; ++k) {
      bool fresh = false;
      while (!fresh) {
        idx[k] = pick(rng);
        fresh = std::find(idx.begin(), idx.begin() + k, idx[k]) == idx.begin() + k;
      }
      sa[k] = points_a[idx[k]];
      sb[k] = points_b[idx[k]];
    }
    Homography h;
    Homography h_inv;
    try {
      h = dlt_homography(sa, sb);
      h_inv = h.inverse();
    } catch (const std::invalid_argument&) {
      continue;
    }
    const std::size_t count = count_inliers(h, h_inv, points_a, points_b, options.threshold_px, mask);
    if (count > result.inlier_count) {
      result.inlier_count = count;
      result.homography = h;
      result.inlier_mask = mask;
      const double w = static_cast<double>(count) / static_cast<double>(n);
      const double p_fail = 1.0 - std::pow(w, 4);
      if (p_fail <= 0) {
        needed = 0;
      } else {
        needed = std::log(1.0 - options.confidence) / std::log(p_fail);
      }
    }
  }
  result.iterations = iter;
  if (result.inlier_count < 4) {
    result.inlier_count = 0;
    result.inlier_mask.assign(n, 0);
    return result;
  }
  result.success = true;

  // Least-squares refit on the inliers; kept only if it does not lose support.
  std::vector<Vec2> ia, ib;
  for (std::size_t i = 0; i < n; ++i) {
    if (result.inlier_mask[i]) {
      ia.push_back(points_a[i]);
      ib.push_back(points_b[i]);
    }
  }
  try {
    const Homography refit = dlt_homography(ia, ib);
    const std::size_t count =
        count_inliers(refit, refit.inverse(), points_a, points_b, options.threshold_px, mask);
    if (count >= result.inlier_count) {
      result.homography = refit;
      result.inlier_count = count;
      result.inlier_mask = mask;
    }
  } catch (const std::invalid_argument&) {
  }
  return result;
}

double corner_error(const Homography& estimate, const Homography& truth, double width,
                    double height) {
  const std::array<Vec2, 4> corners{Vec2(0, 0), Vec2(width, 0), Vec2(width, height),
                                    Vec2(0, height)};
  double total = 0;
  for (const auto& c : corners) total += (estimate.apply(c) - truth.apply(c)).norm();
  return total / 4.0;
}

std::vector<double> homography_accuracy(std::span<const double> errors,
                                        std::span<const double> thresholds) {
  std::vector<double> acc;
  for (double t : thresholds) {
    if (errors.empty()) {
      acc.push_back(0.0);
      continue;
    }
    const auto hits = std::count_if(errors.begin(), errors.end(), [t](double e) { return e <= t; });
    acc.push_back(static_cast<double>(hits) / static_cast<double>(errors.size()));
  }
  return acc;
}

double inlier_ratio(std::span<const std::uint8_t> mask) {
  if (mask.empty()) throw std::invalid_argument("inlier ratio of an empty match set");
  return static_cast<double>(inlier_count(mask)) / static_cast<double>(mask.size());
}

std::size_t inlier_count(std::span<const std::uint8_t> mask) {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto v) { return v != 0; }));
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json mha_json = nlohmann::json::object();
  for (const auto& [t, acc] : mha) {
    std::ostringstream key;
    key << t;
    mha_json[key.str()] = acc;
  }
  return {{"mha", mha_json},
          {"mean_corner_error", std::isfinite(mean_corner_error) ? nlohmann::json(mean_corner_error)
                                                                  : nlohmann::json(nullptr)},
          {"mir", mir},
          {"inliers", inliers},
          {"pairs", pairs},
          {"failures", failures}};
}

EvalAccumulator::EvalAccumulator(std::vector<double> thresholds) : thresholds_(std::move(thresholds)) {}

void EvalAccumulator::add(double corner_err, std::span<const std::uint8_t> mask, bool success) {
  if (!success) {
    ++failures_;
    errors_.push_back(std::numeric_limits<double>::infinity());
    ratios_.push_back(0.0);
    counts_.push_back(0.0);
    return;
  }
  errors_.push_back(corner_err);
  ratios_.push_back(mask.empty() ? 0.0 : inlier_ratio(mask));
  counts_.push_back(static_cast<double>(inlier_count(mask)));
}

EvalReport EvalAccumulator::report() const {
  EvalReport r;
  r.pairs = errors_.size();
  r.failures = failures_;
  const auto acc = homography_accuracy(errors_, thresholds_);
  for (std::size_t i = 0; i < thresholds_.size(); ++i) r.mha[thresholds_[i]] = acc[i];
  if (!errors_.empty()) {
    r.mean_corner_error = std::accumulate(errors_.begin(), errors_.end(), 0.0) / errors_.size();
    r.mir = std::accumulate(ratios_.begin(), ratios_.end(), 0.0) / ratios_.size();
    r.inliers = std::accumulate(counts_.begin(), counts_.end(), 0.0) / counts_.size();
  }
  return r;
}

namespace {

Homography read_homography_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open homography file " + path.string());
  std::vector<double> v;
  double x;
  while (in >> x) v.push_back(x);
  if (v.size() != 9) throw FormatError("homography file " + path.string() + " must hold 9 numbers");
  return Homography::from_row_major(v);
}

}  // namespace

std::vector<EvalPair> read_hpatches(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw FormatError("HPatches root is not a directory: " + root.string());
  std::vector<fs::path> sequences;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) sequences.push_back(entry.path());
  }
  std::sort(sequences.begin(), sequences.end());
  std::vector<EvalPair> pairs;
  for (const auto& seq : sequences) {
    const auto ref = seq / "1.ppm";
    if (!fs::exists(ref)) continue;
    for (int k = 2; k <= 6; ++k) {
      const auto target = seq / (std::to_string(k) + ".ppm");
      const auto hfile = seq / ("H_1_" + std::to_string(k));
      if (!fs::exists(target) || !fs::exists(hfile)) continue;
      pairs.push_back({ref, target, read_homography_text(hfile)});
    }
  }
  return pairs;
}

std::vector<EvalPair> read_pair_manifest(const std::filesystem::path& manifest) {
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
  std::vector<EvalPair> pairs;
  for (const auto& e : entries) {
    try {
      std::filesystem::path a = e.at("image_a").get<std::string>();
      std::filesystem::path b = e.at("image_b").get<std::string>();
      const auto h = e.at("H").get<std::vector<double>>();
      if (a.is_relative()) a = base / a;
      if (b.is_relative()) b = base / b;
      pairs.push_back({a, b, Homography::from_row_major(h)});
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError("manifest entry malformed: " + std::string(ex.what()));
    } catch (const std::invalid_argument& ex) {
      throw FormatError("manifest entry malformed: " + std::string(ex.what()));
    }
  }
  return pairs;
}

}  // namespace xfeat::geometry
