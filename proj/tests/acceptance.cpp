// Acceptance checks, one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <optional>
#include <cstring>
#include <sstream>
#include <string>

#include <json.hpp>

#include "support.hpp"
#include "xfeat/geometry.hpp"
#include "xfeat/io.hpp"
#include "xfeat/matcher.hpp"
#include "xfeat/training.hpp"

using namespace xfeat;
namespace fs = std::filesystem;

namespace {

// Desk-scale training setup.
constexpr std::size_t kDeskSteps = 2000;
constexpr std::size_t kDeskBatch = 3;
constexpr double kDeskLr = 2e-3;
constexpr double kDeskFineWeight = 4.0;
constexpr std::uint64_t kDeskSeed = 7;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

int failures = 0;

// Report lines go to stdout and to acceptance_report.txt in the working directory.
std::ofstream report_file("acceptance_report.txt");

void emit(const std::string& line) {
  std::cout << line << std::endl;
  report_file << line << std::endl;
}

// XFEAT_ACCEPT_ONLY="1,4,9" restricts a run to the listed criteria.
bool selected(int id) {
  const char* only = std::getenv("XFEAT_ACCEPT_ONLY");
  if (!only) return true;
  std::stringstream ss(only);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty() && std::stoi(item) == id) return true;
  return false;
}

void report(int id, const std::string& name, double limit_s, const std::function<Outcome()>& fn) {
  if (!selected(id)) return;
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(Clock::now() - t0).count();
  const bool in_time = s < limit_s;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  std::ostringstream line;
  line << (pass ? "PASS" : "FAIL") << "  " << std::setw(2) << id << "  " << name << "  [" << std::fixed
       << std::setprecision(2) << s << " s / " << std::setprecision(0) << limit_s << " s]  " << o.detail;
  if (!in_time) line << "  (over time budget)";
  emit(line.str());
}

std::string run_capture(const std::string& cmd, int& status) {
  std::string out;
  FILE* pipe = popen((cmd + " 2>/dev/null").c_str(), "r");
  if (!pipe) throw std::runtime_error("cannot run " + cmd);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
  const int raw = pclose(pipe);
  status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return out;
}

std::vector<Tensor<double>*> params_of(XFeatModel<double>& m) {
  std::vector<Tensor<double>*> out;
  for (auto& [name, t] : m.named_parameters()) out.push_back(t);
  return out;
}

// 1 ---------------------------------------------------------------------------
Outcome flop_audit() {
  std::ostringstream detail;
  bool ok = true;
  for (auto [w, h] : {std::pair{800, 600}, {640, 480}}) {
    int s1 = 0, s2 = 0;
    const auto cli = nlohmann::json::parse(run_capture(std::string(XFEAT_CLI_PATH) + " bench-flops --width " +
                                                           std::to_string(w) + " --height " + std::to_string(h) +
                                                           " --json", s1));
    const auto oracle = nlohmann::json::parse(run_capture(std::string(XFEAT_PYTHON) + " " + XFEAT_SOURCE_DIR +
                                                              "/tools/flops_oracle.py --width " + std::to_string(w) +
                                                              " --height " + std::to_string(h), s2));
    const auto a = cli.at("total").get<std::uint64_t>(), b = oracle.at("total").get<std::uint64_t>();
    ok &= s1 == 0 && s2 == 0 && a == b;
    detail << w << "x" << h << " cli " << a << " oracle " << b << "; ";
  }
  return {ok, detail.str()};
}

// 2 ---------------------------------------------------------------------------
Outcome shape_suite() {
  XFeatModel<float> m(BackboneConfig::reference(), 1);
  m.eval();
  NoGradGuard guard;
  const auto out = forward(m, Tensor<float>(Shape{1, 1, 600, 800}, 0.5f));
  const bool shapes = out.maps.descriptors.shape() == Shape{1, 64, 75, 100} &&
                      out.maps.reliability_logits.shape() == Shape{1, 1, 75, 100} &&
                      out.keypoint_logits.shape() == Shape{1, 65, 75, 100};
  const auto convs = m.descriptor_conv_names().size();
  std::ostringstream d;
  d << "F " << shape_to_string(out.maps.descriptors.shape()) << " R "
    << shape_to_string(out.maps.reliability_logits.shape()) << " K " << shape_to_string(out.keypoint_logits.shape())
    << " descriptor convs " << convs;
  return {shapes && convs == 23 && m.config().descriptor_conv_count() == 23, d.str()};
}

// 3 ---------------------------------------------------------------------------
Outcome gradient_suite() {
  training::TrainConfig c;
  c.width = 128;
  c.height = 128;
  c.batch_size = 1;
  c.max_correspondences = 32;
  training::Rng rng(11);
  const std::vector<training::TrainingPair> batch{
      training::synth_warp_pair(training::procedural_texture(128, 128, 12), rng, c.warp)};
  const auto pb = training::prepare_batch(batch, c, training::HarrisTeacher{}, rng);
  auto m = XFeatModel<float>(BackboneConfig::reduced(), 13).cast<double>();
  m.train(true);
  const auto frozen = training::compute_losses(m, pb, c).rel_targets;
  auto params = params_of(m);
  const std::array<std::pair<const char*, training::LossWeights>, 5> cases{
      std::pair{"ds", training::LossWeights{1, 0, 0, 0}}, std::pair{"rel", training::LossWeights{0, 1, 0, 0}},
      std::pair{"fine", training::LossWeights{0, 0, 1, 0}}, std::pair{"kp", training::LossWeights{0, 0, 0, 1}},
      std::pair{"total", training::LossWeights{1, 1, 1, 1}}};
  bool ok = true;
  std::ostringstream d;
  d << std::scientific << std::setprecision(1);
  for (const auto& [name, w] : cases) {
    auto cw = c;
    cw.weights = w;
    const auto r = test::check_gradients(
        params, [&] { return training::compute_losses(m, pb, cw, &frozen).total; }, 100, 17, 1e-6, 1e-5);
    ok &= r.checked >= 100 && r.max_rel_error <= 1e-4 && r.max_zero_numeric <= 1e-7;
    d << name << " " << r.max_rel_error << "/" << r.checked << " ";
  }

  // Detach contract on the model: the descriptor-only output conv gets no
  // gradient from L_rel.
  auto cw = c;
  cw.weights = {0, 1, 0, 0};
  for (auto* p : params) p->zero_grad();
  training::compute_losses(m, pb, cw, &frozen).total.backward();
  bool zero = true;
  for (auto* t : {&m.fusion_out.weight, &m.fusion_out.bias}) {
    if (t->has_grad())
      for (double g : t->grad()) zero &= g == 0.0;
  }
  // And on explicit descriptor rows.
  auto f1 = ops::l2_normalize_rows(test::random_tensor<double>({8, 64}, 18));
  auto f2 = ops::l2_normalize_rows(test::random_tensor<double>({8, 64}, 19));
  f1.set_requires_grad(true);
  f2.set_requires_grad(true);
  auto r1 = test::random_tensor<double>({8}, 20);
  auto r2 = test::random_tensor<double>({8}, 21);
  r1.set_requires_grad(true);
  r2.set_requires_grad(true);
  training::loss_reliability(r1, r2, f1, f2, 0.1).backward();
  for (auto* t : {&f1, &f2}) {
    if (t->has_grad())
      for (double g : t->grad()) zero &= g == 0.0;
  }
  zero &= r1.has_grad();
  d << "L_rel descriptor grads zero: " << (zero ? "yes" : "no");
  return {ok && zero, d.str()};
}

// 4 ---------------------------------------------------------------------------
Outcome closed_forms() {
  const double fine =
      training::loss_fine(Tensor<double>(Shape{7, 64}, 0.0), std::vector<training::CellOffset>(7, {2, 5})).item();
  std::vector<training::KeypointLabel> labels;
  for (std::size_t i = 0; i < 4; ++i) labels.push_back({0, i, 0, i * 16});
  const double kp = training::loss_keypoint(Tensor<double>(Shape{1, 65, 4, 1}, 0.0), labels).item();
  const Tensor<double> a({2, 2}, std::vector<double>{1, 0, -1, 0});
  const Tensor<double> b({2, 2}, std::vector<double>{0, 1, 0, 1});
  const double ds = training::loss_dual_softmax(a, b, 0.1).item();
  std::ostringstream d;
  d << std::setprecision(10) << "L_fine " << fine << " (log 64 " << std::log(64.0) << "), L_kp " << kp << " (log 65 "
    << std::log(65.0) << "), L_ds " << ds << " (2 log 2 " << 2 * std::log(2.0) << ")";
  return {std::abs(fine - std::log(64.0)) <= 1e-6 && std::abs(kp - std::log(65.0)) <= 1e-6 &&
              std::abs(ds - 2 * std::log(2.0)) <= 1e-6,
          d.str()};
}

// 5 ---------------------------------------------------------------------------
struct DeskResult {
  double precision = 0, coarse_epe = 0, refined_epe = 0;
  std::size_t matches = 0, correct = 0;
};

training::TrainConfig desk_config(std::size_t steps) {
  training::TrainConfig c;
  c.width = 256;
  c.height = 256;
  c.batch_size = kDeskBatch;
  c.steps = steps;
  c.seed = kDeskSeed;
  c.lr = kDeskLr;
  c.weights.gamma = kDeskFineWeight;
  return c;
}

std::vector<Tensor<float>> desk_corpus() {
  std::vector<Tensor<float>> corpus;
  for (int i = 0; i < 50; ++i) corpus.push_back(training::procedural_texture(256, 256, 100 + i));
  return corpus;
}

DeskResult desk_evaluate(XFeatModel<float>& m, const training::WarpParams& warp) {
  training::Rng rng(999);
  DeskResult r;
  double coarse = 0, fine = 0;
  for (int k = 0; k < 10; ++k) {
    const auto pair = training::synth_warp_pair(training::procedural_texture(256, 256, 5000 + k), rng, warp);
    const auto a = scale_candidates(m, pair.image1, 1.0f);
    const auto b = scale_candidates(m, pair.image2, 1.0f);
    const auto coarse_matches = mnn_match(a, b);
    const auto refined = refine_matches(coarse_matches, m, 0.0f);
    for (std::size_t i = 0; i < coarse_matches.size(); ++i) {
      const auto gt = pair.h_gt.apply({coarse_matches.coords_a[i].x, coarse_matches.coords_a[i].y});
      const double e = std::hypot(coarse_matches.coords_b[i].x - gt.x(), coarse_matches.coords_b[i].y - gt.y());
      ++r.matches;
      if (e < 8.0) {
        ++r.correct;
        coarse += e;
        fine += std::hypot(refined.coords_b[i].x - gt.x(), refined.coords_b[i].y - gt.y());
      }
    }
  }
  r.precision = r.matches ? double(r.correct) / r.matches : 0.0;
  r.coarse_epe = r.correct ? coarse / r.correct : 0.0;
  r.refined_epe = r.correct ? fine / r.correct : 0.0;
  return r;
}

std::optional<XFeatModel<float>> desk_model;

Outcome desk_training() {
  XFeatModel<float> m(BackboneConfig::reduced(), kDeskSeed);
  m.train(true);
  const auto corpus = desk_corpus();
  const auto config = desk_config(kDeskSteps);
  const auto history = training::train(m, corpus, {}, config, training::HarrisTeacher{});

  // Determinism: a fresh run of the same seed reproduces the opening steps.
  XFeatModel<float> twin(BackboneConfig::reduced(), kDeskSeed);
  twin.train(true);
  const auto twin_history = training::train(twin, corpus, {}, desk_config(5), training::HarrisTeacher{});
  bool deterministic = true;
  for (std::size_t i = 0; i < twin_history.size(); ++i) deterministic &= twin_history[i].total == history[i].total;

  m.eval();
  const auto r = desk_evaluate(m, config.warp);
  desk_model = std::move(m);
  const double reduction = r.coarse_epe > 0 ? 1.0 - r.refined_epe / r.coarse_epe : 0.0;
  std::ostringstream d;
  d << std::setprecision(4) << "loss " << history.front().total << " -> " << history.back().total << "; matches "
    << r.matches << " precision@8px " << r.precision << " (>= 0.6); EPE coarse " << r.coarse_epe << " refined "
    << r.refined_epe << " reduction " << 100 * reduction << "% (>= 25%); deterministic " << (deterministic ? "yes" : "no");
  return {r.precision >= 0.6 && reduction >= 0.25 && deterministic, d.str()};
}

// 6 ---------------------------------------------------------------------------
Outcome offset_invariance() {
  std::mt19937_64 engine(6);
  std::uniform_real_distribution<float> u(-5.0f, 5.0f), shift(-50.0f, 50.0f);
  double worst = 0;
  bool same = true;
  for (int t = 0; t < 1000; ++t) {
    std::vector<float> o(64);
    for (auto& v : o) v = u(engine);
    const auto a = offset_from_logits(o);
    const float c = shift(engine);
    for (auto& v : o) v += c;
    const auto b = offset_from_logits(o);
    same &= a.x == b.x && a.y == b.y;
    worst = std::max(worst, double(std::abs(a.confidence - b.confidence)));
  }
  std::ostringstream d;
  d << "argmax stable " << (same ? "yes" : "no") << ", max confidence change " << std::scientific << worst;
  return {same && worst <= 1e-6, d.str()};
}

// 7 ---------------------------------------------------------------------------
Outcome t_idx_bijection() {
  std::set<std::size_t> seen;
  bool ok = true;
  for (int ty = 0; ty < 8; ++ty)
    for (int tx = 0; tx < 8; ++tx) {
      const auto t = training::keypoint_index(tx, ty);
      ok &= t == std::size_t(tx + 8 * ty);
      const auto back = training::keypoint_offset(t);
      ok &= back.x == tx && back.y == ty;
      seen.insert(t);
    }
  ok &= seen.size() == 64 && *seen.rbegin() == 63;
  // Every label, dustbin included, selects its own channel in the loss.
  for (std::size_t t = 0; t <= kDustbin; ++t) {
    Tensor<double> k(Shape{1, 65, 1, 1}, 0.0);
    k.data()[t] = 30.0;
    const double hit = training::loss_keypoint(k, {{0, 0, 0, t}}).item();
    const double miss = training::loss_keypoint(k, {{0, 0, 0, (t + 1) % 65}}).item();
    ok &= hit < 1e-9 && std::abs(miss - 30.0) < 1e-9;
  }
  return {ok, "64 offsets distinct and invertible; 65 labels index their own channel"};
}

// 8 ---------------------------------------------------------------------------
std::vector<std::pair<std::uint32_t, std::uint32_t>> mnn_oracle(const std::vector<double>& s, std::size_t n,
                                                                std::size_t m) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t bj = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (s[i * m + j] > s[i * m + bj]) bj = j;
    std::size_t bi = 0;
    for (std::size_t k = 1; k < n; ++k)
      if (s[k * m + bj] > s[bi * m + bj]) bi = k;
    if (bi == i) out.emplace_back(std::uint32_t(i), std::uint32_t(bj));
  }
  return out;
}

Outcome mnn_equivalence() {
  std::mt19937_64 engine(8);
  std::normal_distribution<float> g;
  std::size_t equal = 0, symmetric = 0, total_pairs = 0;
  for (int inst = 0; inst < 200; ++inst) {
    FeatureSet a, b;
    std::vector<float> d(64);
    for (auto* fs : {&a, &b})
      for (int i = 0; i < 30; ++i) {
        double ss = 0;
        for (auto& v : d) {
          v = g(engine);
          ss += double(v) * v;
        }
        for (auto& v : d) v = float(v / std::sqrt(ss));
        fs->push_back(float(i), float(i), 1, 1, 1, d);
      }
    std::vector<double> s(900);
    for (std::size_t i = 0; i < 30; ++i)
      for (std::size_t j = 0; j < 30; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < 64; ++c) dot += double(a.descriptors[i * 64 + c]) * b.descriptors[j * 64 + c];
        s[i * 30 + j] = dot;
      }
    const auto got = mnn_match(a, b).pairs;
    equal += got == mnn_oracle(s, 30, 30);
    auto swapped = mnn_match(b, a).pairs;
    for (auto& p : swapped) std::swap(p.first, p.second);
    std::sort(swapped.begin(), swapped.end());
    symmetric += swapped == got;
    total_pairs += got.size();
  }
  std::ostringstream d;
  d << "oracle-equal " << equal << "/200, swap-symmetric " << symmetric << "/200, mean pairs "
    << total_pairs / 200.0;
  return {equal == 200 && symmetric == 200, d.str()};
}

// 9 ---------------------------------------------------------------------------
Outcome ransac_robustness() {
  int good = 0;
  for (int t = 0; t < 100; ++t) {
    std::mt19937_64 engine(9000 + t);
    std::uniform_real_distribution<double> u(-1, 1), ux(0, 640), uy(0, 480), coin(0, 1);
    std::normal_distribution<double> noise(0, 0.5);
    const double angle = 0.3 * u(engine), scale = 1 + 0.15 * u(engine);
    Eigen::Matrix3d mtx;
    mtx << scale * std::cos(angle), -scale * std::sin(angle), 64 * u(engine), scale * std::sin(angle),
        scale * std::cos(angle), 48 * u(engine), 1e-4 * u(engine), 1e-4 * u(engine), 1;
    const geometry::Homography truth(mtx);
    std::vector<geometry::Vec2> a, b;
    for (int i = 0; i < 200; ++i) {
      const geometry::Vec2 p(ux(engine), uy(engine));
      a.push_back(p);
      if (coin(engine) < 0.3) {
        b.emplace_back(ux(engine), uy(engine));
      } else {
        b.push_back(truth.apply(p) + geometry::Vec2(noise(engine), noise(engine)));
      }
    }
    geometry::RansacOptions opt;
    opt.seed = std::uint64_t(t);
    const auto r = geometry::ransac_homography(a, b, opt);
    good += r.success && geometry::corner_error(r.homography, truth, 640, 480) < 1.5;
  }
  std::vector<geometry::Vec2> grid;
  for (int i = 0; i < 50; ++i) grid.emplace_back(13.0 * (i % 10) + 5, 37.0 * (i / 10) + 3);
  const auto id = geometry::ransac_homography(grid, grid, {});
  const double ransac_id = id.success ? geometry::corner_error(id.homography, geometry::Homography::identity(), 640, 480) : 1e9;
  const double err = geometry::corner_error(geometry::Homography::identity(), geometry::Homography::identity(), 640, 480);
  const std::vector<double> errs{err}, thresholds{3, 5, 7};
  const auto mha = geometry::homography_accuracy(errs, thresholds);
  std::ostringstream d;
  d << good << "/100 trials under 1.5 px (>= 95); identity corner error " << err << ", MHA@{3,5,7} " << mha[0] << ","
    << mha[1] << "," << mha[2] << "; RANSAC on identical points " << ransac_id << " px";
  return {good >= 95 && err == 0.0 && ransac_id <= 1e-8 && mha == std::vector<double>{1, 1, 1}, d.str()};
}

// 10 --------------------------------------------------------------------------
Outcome semi_dense_contract() {
  const auto dir = fs::temp_directory_path() / "xfeat_acceptance_sd";
  fs::remove_all(dir);
  fs::create_directories(dir);
  // Trained desk model when available, so the offset head is not uniform.
  const auto model = desk_model ? *desk_model : XFeatModel<float>(BackboneConfig::reduced(), 10);
  io::save_weights(dir / "model.xftw", model);
  training::Rng rng(10);
  const auto pair = training::synth_warp_pair(training::procedural_texture(1280, 960, 77), rng);
  io::write_pgm(dir / "a.pgm", pair.image1);
  io::write_pgm(dir / "b.pgm", pair.image2);
  const std::string cli = XFEAT_CLI_PATH;
  int status = 0;
  bool ok = true;
  for (const char* name : {"a", "b"}) {
    run_capture(cli + " extract --model " + (dir / "model.xftw").string() + " --image " +
                    (dir / (std::string(name) + ".pgm")).string() + " --mode semidense --top-k 10000 --out " +
                    (dir / (std::string(name) + ".xftc")).string(),
                status);
    ok &= status == 0;
  }
  const auto fa = io::load_features(dir / "a.xftc");
  const auto fb = io::load_features(dir / "b.xftc");
  bool sorted = true, unique = true;
  for (const auto* f : {&fa, &fb}) {
    for (std::size_t i = 0; i + 1 < f->size(); ++i) sorted &= f->reliability[i] >= f->reliability[i + 1];
    std::set<std::pair<float, float>> seen;
    for (std::size_t i = 0; i < f->size(); ++i) unique &= seen.insert({f->x[i], f->y[i]}).second;
  }
  run_capture(cli + " match --model " + (dir / "model.xftw").string() + " --feats-a " + (dir / "a.xftc").string() +
                  " --feats-b " + (dir / "b.xftc").string() + " --refine --conf 0.2 --out " +
                  (dir / "m.json").string(),
              status);
  ok &= status == 0;
  std::ifstream in(dir / "m.json");
  const auto matches = nlohmann::json::parse(in);
  double min_conf = 1.0;
  for (const auto& m : matches) min_conf = std::min(min_conf, m.at("confidence").get<double>());
  // Independent count of coarse matches at or above the confidence bar.
  const auto coarse = mnn_match(fa, fb);
  const auto all = refine_matches(coarse, model, 0.0f);
  std::size_t expected = 0;
  for (float c : all.confidence) expected += c >= 0.2f;
  fs::remove_all(dir);
  std::ostringstream d;
  d << "candidates " << fa.size() << " / " << fb.size() << " (<= 10000), sorted " << (sorted ? "yes" : "no")
    << ", unique " << (unique ? "yes" : "no") << "; coarse " << coarse.size() << " refined kept " << matches.size()
    << " (expected " << expected << "), min confidence " << (matches.empty() ? 0.0 : min_conf);
  ok &= fa.size() <= 10000 && fb.size() <= 10000 && sorted && unique && matches.size() == expected &&
        (matches.empty() || min_conf >= 0.2);
  return {ok, d.str()};
}

// 11 --------------------------------------------------------------------------
Outcome io_round_trips() {
  const auto dir = fs::temp_directory_path() / "xfeat_acceptance_io";
  fs::remove_all(dir);
  fs::create_directories(dir);
  XFeatModel<float> m(BackboneConfig::reference(), 11);
  io::save_weights(dir / "m.xftw", m);
  const auto bytes = io::read_file(dir / "m.xftw");
  const auto back = io::load_weights(dir / "m.xftw");
  bool ok = io::encode_weights(back) == bytes;
  const auto ta = std::as_const(m).named_tensors();
  const auto tb = back.named_tensors();
  ok &= ta.size() == tb.size();
  for (std::size_t i = 0; ok && i < ta.size(); ++i) {
    ok &= std::memcmp(ta[i].second->data().data(), tb[i].second->data().data(), ta[i].second->numel() * 4) == 0;
  }
  FeatureSet fs;
  fs.width = 800;
  fs.height = 600;
  std::mt19937_64 engine(12);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<float> d(64);
  for (int i = 0; i < 4096; ++i) {
    for (auto& v : d) v = u(engine);
    fs.push_back(800 * u(engine), 600 * u(engine), u(engine), u(engine), 1.0f, d);
  }
  io::save_features(dir / "f.xftc", fs);
  ok &= fs::file_size(dir / "f.xftc") == 21 + 4096 * (4 * 4 + 64 * 4);
  const auto loaded = io::load_features(dir / "f.xftc");
  ok &= loaded.x == fs.x && loaded.y == fs.y && loaded.score == fs.score && loaded.reliability == fs.reliability && loaded.descriptors == fs.descriptors &&
        loaded.width == fs.width && loaded.height == fs.height && loaded.mode == fs.mode;
  ok &= io::encode_features(loaded) == io::read_file(dir / "f.xftc");
  int rejected = 0;
  for (std::size_t at : {std::size_t(0), std::size_t(4)}) {
    for (const bool features : {false, true}) {
      auto bad = features ? io::read_file(dir / "f.xftc") : bytes;
      bad[at] ^= 0x5a;
      try {
        if (features) {
          io::decode_features(bad);
        } else {
          io::decode_weights(bad);
        }
      } catch (const FormatError&) {
        ++rejected;
      }
    }
  }
  fs::remove_all(dir);
  std::ostringstream s;
  s << "weights and 4096-feature cache bit-exact: " << (ok ? "yes" : "no") << "; corrupted magic/version rejected "
    << rejected << "/4";
  return {ok && rejected == 4, s.str()};
}

// 12 --------------------------------------------------------------------------
void real_data_harness() {
  const char* root = std::getenv("XFEAT_HPATCHES");
  const char* ckpt = std::getenv("XFEAT_CHECKPOINT");
  if (!root || !ckpt) {
    emit("SKIP  12  real-data harness (not gating): set XFEAT_HPATCHES and XFEAT_CHECKPOINT to run");
    return;
  }
  int status = 0;
  const auto out = fs::temp_directory_path() / "xfeat_hpatches_report.json";
  const auto text = run_capture(std::string(XFEAT_CLI_PATH) + " eval-homography --model " + ckpt + " --hpatches " +
                                    root + " --out " + out.string(),
                                status);
  emit(std::string(status == 0 ? "INFO" : "FAIL") + "  12  real-data harness (not gating): " +
       (status == 0 ? nlohmann::json::parse(text).at("mha").dump() : std::string("eval-homography failed")));
}

}  // namespace

int main() {
  report(1, "FLOP audit", 5, flop_audit);
  report(2, "shape suite", 5, shape_suite);
  report(3, "gradient suite", 120, gradient_suite);
  report(4, "closed-form losses", 1, closed_forms);
  report(5, "desk-scale training", 1800, desk_training);
  report(6, "offset argmax invariance", 1, offset_invariance);
  report(7, "t_idx bijection", 1, t_idx_bijection);
  report(8, "MNN oracle equivalence", 10, mnn_equivalence);
  report(9, "RANSAC robustness", 60, ransac_robustness);
  report(10, "semi-dense contract", 30, semi_dense_contract);
  report(11, "I/O round trips", 5, io_round_trips);
  real_data_harness();
  emit(std::string(failures ? "FAILED " : "ALL PASSED ") + std::to_string(failures) + " gating criteria failed");
  return failures ? 1 : 0;
}
