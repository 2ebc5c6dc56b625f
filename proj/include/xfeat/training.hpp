#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xfeat/geometry.hpp"
#include "xfeat/heads.hpp"
#include "xfeat/matcher.hpp"
#include "xfeat/model.hpp"

namespace xfeat::training {

// Deterministic RNG helpers; independent of the standard library's
// distribution implementations so runs reproduce across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  double normal();
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Ground truth

struct Correspondence {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Pixel matches between I1 and I2 (columns x1, y1, x2, y2).
struct CorrespondenceSet {
  std::uint32_t width1 = 0, height1 = 0, width2 = 0, height2 = 0;
  std::vector<Correspondence> rows;

  std::size_t size() const { return rows.size(); }
  // Throws ShapeError when a coordinate falls outside its image.
  void validate() const;
};

struct CellOffset {
  int x = 0;  // 0..7
  int y = 0;  // 0..7
};

// Position of a pixel coordinate inside its 8x8 cell: (x2 mod 8, y2 mod 8).
CellOffset cell_offset(float x, float y);

// Linear index t_idx = t_x + 8 t_y in [0, 63]; 64 is the dustbin.
std::size_t keypoint_index(int tx, int ty);
CellOffset keypoint_offset(std::size_t t_idx);

// ---------------------------------------------------------------------------
// Losses. All NLL terms use mean reduction.

// Two-direction NLL of the row-wise softmax of S = f1 f2^T / temperature;
// rows i of f1 and f2 correspond. Requires N >= 2.
template <typename T>
Tensor<T> loss_dual_softmax(const Tensor<T>& f1, const Tensor<T>& f2, T temperature);

// Product of the row-max dual-softmax probabilities, as plain values with
// no graph history.
template <typename T>
Tensor<T> reliability_targets(const Tensor<T>& f1, const Tensor<T>& f2, T temperature);

// mean|sigmoid(r1) - target| + mean|sigmoid(r2) - target| for [N] logits.
template <typename T>
Tensor<T> loss_reliability(const Tensor<T>& r_logits1, const Tensor<T>& r_logits2,
                           const Tensor<T>& target);

// Convenience overload computing the detached targets from the descriptors.
template <typename T>
Tensor<T> loss_reliability(const Tensor<T>& r_logits1, const Tensor<T>& r_logits2,
                           const Tensor<T>& f1, const Tensor<T>& f2, T temperature);

// NLL of the 64-way offset softmax at index y*8 + x.
template <typename T>
Tensor<T> loss_fine(const Tensor<T>& offset_logits, const std::vector<CellOffset>& gt_offsets);

struct KeypointLabel {
  std::size_t batch = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t t_idx = kDustbin;
};

// NLL of the per-cell 65-way softmax of [N,65,h,w] logits at the labelled
// cells.
template <typename T>
Tensor<T> loss_keypoint(const Tensor<T>& keypoint_logits, const std::vector<KeypointLabel>& labels);

// Keeps every keypoint cell and a uniform random subset of dustbin cells no
// larger than ratio * (keypoint cell count).
std::vector<KeypointLabel> balance_dustbin(const std::vector<KeypointLabel>& labels, double ratio,
                                           Rng& rng);

struct LossWeights {
  double alpha = 1.0;  // dual-softmax
  double beta = 1.0;   // reliability
  double gamma = 1.0;  // fine offsets
  double delta = 1.0;  // keypoints
  void validate() const;
};

// alpha L_ds + beta L_rel + gamma L_fine + delta L_kp. Throws NumericError
// if any part is non-finite.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& ds, const Tensor<T>& rel, const Tensor<T>& fine,
                     const Tensor<T>& kp, const LossWeights& weights);

// ---------------------------------------------------------------------------
// Keypoint teachers

// Supplies per-cell t_idx labels (64 = no keypoint) over the 8x8 grid
// covering the image; partial cells at the border are labelled from their
// in-image pixels.
class TeacherOracle {
 public:
  virtual ~TeacherOracle() = default;
  virtual std::vector<std::size_t> cell_labels(const Tensor<float>& image) const = 0;
};

struct HarrisOptions {
  double k = 0.04;
  double sigma = 1.0;
  // A cell holds a keypoint when its strongest response exceeds both.
  double relative_threshold = 0.01;
  double absolute_threshold = 1e-6;
};

// Harris corner response with per-cell argmax.
class HarrisTeacher final : public TeacherOracle {
 public:
  explicit HarrisTeacher(HarrisOptions options = {}) : options_(options) {}
  std::vector<std::size_t> cell_labels(const Tensor<float>& image) const override;
  std::vector<float> response(const Tensor<float>& image) const;

 private:
  HarrisOptions options_;
};

// Labels from keypoints produced elsewhere. Within a cell the first listed
// keypoint wins.
class PrecomputedTeacher final : public TeacherOracle {
 public:
  explicit PrecomputedTeacher(std::vector<Point2> keypoints) : keypoints_(std::move(keypoints)) {}
  // Text file, one "x y" pair per line; '#' starts a comment.
  static PrecomputedTeacher from_file(const std::filesystem::path& path);
  std::vector<std::size_t> cell_labels(const Tensor<float>& image) const override;

 private:
  std::vector<Point2> keypoints_;
};

// ---------------------------------------------------------------------------
// Synthetic data

struct WarpParams {
  double max_rotation_deg = 30.0;
  double scale_min = 0.8;
  double scale_max = 1.2;
  double max_translation = 0.1;  // fraction of width/height
  double perspective = 1e-4;
  double brightness = 0.2;
  double contrast_min = 0.8;
  double contrast_max = 1.25;
  double max_noise_sigma = 0.02;
  bool photometric = true;
};

struct TrainingPair {
  Tensor<float> image1;
  Tensor<float> image2;
  geometry::Homography h_gt;
  CorrespondenceSet correspondences;
};

// Multi-octave value noise overlaid with random filled shapes, in [0,1].
Tensor<float> procedural_texture(std::size_t width, std::size_t height, std::uint64_t seed);

// Rotation about the centre, scale, translation and perspective jitter.
// Resamples while |det| of the upper-left 2x2 block is below 1e-3.
geometry::Homography random_homography(std::size_t width, std::size_t height,
                                       const WarpParams& params, Rng& rng);

// I2(p) = I1(H^-1 p), bilinear, zero outside I1.
Tensor<float> warp_image(const Tensor<float>& image, const geometry::Homography& h);

// Brightness, contrast and Gaussian noise jitter, clamped to [0,1].
Tensor<float> photometric_jitter(const Tensor<float>& image, const WarpParams& params, Rng& rng);

// Cell centres of I1 mapped through h; rows landing outside I2 are dropped.
CorrespondenceSet grid_correspondences(const geometry::Homography& h, std::size_t width1,
                                       std::size_t height1, std::size_t width2,
                                       std::size_t height2);

TrainingPair warp_pair(const Tensor<float>& image, const geometry::Homography& h,
                       const WarpParams& params, Rng& rng);
TrainingPair synth_warp_pair(const Tensor<float>& image, Rng& rng, const WarpParams& params = {});

// ---------------------------------------------------------------------------
// Optimisation

struct TrainConfig {
  std::size_t batch_size = 10;
  double lr = 3e-4;
  double lr_decay = 0.5;
  std::size_t decay_every = 30000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t steps = 1000;
  std::uint64_t seed = 0;
  std::size_t width = 800;
  std::size_t height = 600;
  double synthetic_fraction = 0.4;
  double temperature = 0.1;
  std::size_t max_correspondences = 1024;
  double dustbin_ratio = 1.0;
  LossWeights weights;
  WarpParams warp;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

// Step decay: lr * decay^(floor(step / decay_every)).
double learning_rate_at(const TrainConfig& config, std::size_t step);

template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>*> params, double beta1, double beta2, double eps);
  // One update with the given learning rate using the accumulated grads.
  void step(double lr);
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>*> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// Everything random about a training batch, fixed ahead of the forward
// pass so the loss is a deterministic function of the parameters.
struct PreparedBatch {
  Tensor<float> images;  // [2B,1,H,W]; pair p uses images 2p and 2p+1
  struct PairRows {
    std::vector<ops::CellIndex> cells1, cells2;
    std::vector<CellOffset> offsets;
  };
  std::vector<PairRows> pairs;
  std::vector<KeypointLabel> keypoint_labels;
  std::size_t skipped_pairs = 0;
};

PreparedBatch prepare_batch(const std::vector<TrainingPair>& batch, const TrainConfig& config,
                            const TeacherOracle& teacher, Rng& rng);

template <typename T>
struct LossTerms {
  Tensor<T> ds, rel, fine, kp, total;
  // Reliability targets actually used, one tensor per pair.
  std::vector<Tensor<T>> rel_targets;
};

// Forward pass and all four losses. When `frozen_targets` is given the
// reliability targets are taken from it instead of being recomputed.
template <typename T>
LossTerms<T> compute_losses(XFeatModel<T>& model, const PreparedBatch& batch,
                            const TrainConfig& config,
                            const std::vector<Tensor<T>>* frozen_targets = nullptr);

struct LossReport {
  std::size_t step = 0;
  double lr = 0;
  double ds = 0, rel = 0, fine = 0, kp = 0, total = 0;
  std::size_t pairs_used = 0;
  std::size_t pairs_skipped = 0;
};

// Forward, losses, backward, Adam update at the scheduled learning rate.
LossReport train_step(XFeatModel<float>& model, const std::vector<TrainingPair>& batch,
                      const TrainConfig& config, Adam<float>& optimizer,
                      const TeacherOracle& teacher, Rng& rng);

// Image pair with known geometry. Dense correspondences, when present,
// replace the cell grid mapped through `h`.
struct RealPair {
  Tensor<float> image1;
  Tensor<float> image2;
  geometry::Homography h;
  std::vector<Correspondence> dense;
};

// Resizes both images to width x height and carries the geometry along.
TrainingPair make_real_pair(const RealPair& pair, std::size_t width, std::size_t height);

// JSON lines (or a JSON array) of {"image_a", "image_b"} plus either "H"
// (nine numbers, row-major) or "correspondences" (text file of
// "x1 y1 x2 y2" rows). Relative paths resolve against the manifest.
std::vector<RealPair> read_posed_pairs(const std::filesystem::path& manifest);

// Draws batches of synthetic warps over `corpus` (mixed with `real` pairs
// at 1 - synthetic_fraction when any are given) and runs `config.steps`
// updates. `on_step` sees every report.
std::vector<LossReport> train(XFeatModel<float>& model, const std::vector<Tensor<float>>& corpus,
                              const std::vector<RealPair>& real, const TrainConfig& config,
                              const TeacherOracle& teacher,
                              const std::function<void(const LossReport&)>& on_step = {});

}  // namespace xfeat::training
