#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

namespace xfeat::geometry {

using Vec2 = Eigen::Vector2d;

// Planar projective map, kept with h33 == 1 whenever |h33| > 1e-8.
class Homography {
 public:
  Homography() : m_(Eigen::Matrix3d::Identity()) {}
  explicit Homography(const Eigen::Matrix3d& m);

  static Homography identity() { return Homography(); }
  static Homography translation(double tx, double ty);
  // Row-major 9 values.
  static Homography from_row_major(std::span<const double> values);

  const Eigen::Matrix3d& matrix() const { return m_; }
  std::vector<double> row_major() const;

  Vec2 apply(const Vec2& p) const;
  Homography inverse() const;
  Homography operator*(const Homography& rhs) const { return Homography(m_ * rhs.m_); }

 private:
  Eigen::Matrix3d m_;
};

// Normalized DLT. Exactly four pairs use the exact null space; more pairs
// use the least-squares smallest right singular vector. Throws
// std::invalid_argument on fewer than four pairs or a degenerate layout.
Homography dlt_homography(std::span<const Vec2> points_a, std::span<const Vec2> points_b);

// RMS of the forward (a -> b) and backward (b -> a) reprojection distances.
double symmetric_transfer_error(const Homography& h, const Vec2& a, const Vec2& b);

struct RansacOptions {
  double threshold_px = 3.0;
  int max_iters = 5000;
  double confidence = 0.999;
  std::uint64_t seed = 0;
};

struct RansacResult {
  bool success = false;
  Homography homography;
  std::vector<std::uint8_t> inlier_mask;
  std::size_t inlier_count = 0;
  int iterations = 0;
};

// Four-point RANSAC with adaptive iteration count and a least-squares refit
// on the final inlier set. Fewer than four matches, or no hypothesis with
// four inliers, yields success == false.
RansacResult ransac_homography(std::span<const Vec2> points_a, std::span<const Vec2> points_b,
                               const RansacOptions& options = {});

// Mean distance between the four frame corners warped by both maps.
double corner_error(const Homography& estimate, const Homography& truth, double width,
                    double height);

// Fraction of errors <= each threshold.
std::vector<double> homography_accuracy(std::span<const double> errors,
                                        std::span<const double> thresholds);

double inlier_ratio(std::span<const std::uint8_t> mask);
std::size_t inlier_count(std::span<const std::uint8_t> mask);

struct EvalReport {
  std::map<double, double> mha;
  double mean_corner_error = 0;
  double mir = 0;
  double inliers = 0;  // mean inlier count per pair
  std::size_t pairs = 0;
  std::size_t failures = 0;

  nlohmann::json to_json() const;
};

// Accumulates per-pair results. Failed estimates count as infinite corner
// error and zero inlier ratio.
class EvalAccumulator {
 public:
  explicit EvalAccumulator(std::vector<double> thresholds = {3.0, 5.0, 7.0});
  void add(double corner_err, std::span<const std::uint8_t> mask, bool success);
  EvalReport report() const;

 private:
  std::vector<double> thresholds_;
  std::vector<double> errors_;
  std::vector<double> ratios_;
  std::vector<double> counts_;
  std::size_t failures_ = 0;
};

struct EvalPair {
  std::filesystem::path image_a;
  std::filesystem::path image_b;
  Homography truth;
};

// HPatches layout: <root>/<sequence>/{1..6}.ppm with H_1_<n> files holding
// nine whitespace-separated numbers, row-major.
std::vector<EvalPair> read_hpatches(const std::filesystem::path& root);

// JSON array (or JSON lines) of {"image_a", "image_b", "H": [9 numbers]}.
// Relative paths resolve against the manifest's directory.
std::vector<EvalPair> read_pair_manifest(const std::filesystem::path& manifest);

}  // namespace xfeat::geometry
