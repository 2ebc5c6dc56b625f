#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xfeat/error.hpp"
#include "xfeat/geometry.hpp"
#include "xfeat/io.hpp"
#include "xfeat/matcher.hpp"
#include "xfeat/model.hpp"
#include "xfeat/training.hpp"

namespace fs = std::filesystem;
using namespace xfeat;

namespace {

BackboneConfig arch_by_name(const std::string& name) {
  if (name == "reference") return BackboneConfig::reference();
  if (name == "reduced") return BackboneConfig::reduced();
  throw Error("unknown architecture '" + name + "' (expected reference or reduced)");
}

XFeatModel<float> load_or_init(const std::string& model_path, const std::string& arch,
                               std::uint64_t seed) {
  if (!model_path.empty()) return io::load_weights(model_path);
  return XFeatModel<float>(arch_by_name(arch), seed);
}

std::vector<fs::path> corpus_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("corpus is not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".pgm" || ext == ".ppm" || ext == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct TrainArgs {
  std::string corpus, out, config, arch = "reduced", real, loss_csv, init;
  std::size_t steps = 0, procedural = 0, batch = 0, width = 0, height = 0;
  std::uint64_t seed = 0;
  double lr = 0;
};

int run_train(const TrainArgs& a) {
  training::TrainConfig config;
  if (!a.config.empty()) {
    const auto text = io::read_file(a.config);
    config = training::TrainConfig::from_json(nlohmann::json::parse(text.begin(), text.end()));
  }
  if (a.steps) config.steps = a.steps;
  if (a.batch) config.batch_size = a.batch;
  if (a.width) config.width = a.width;
  if (a.height) config.height = a.height;
  if (a.lr > 0) config.lr = a.lr;
  config.seed = a.seed;
  config.validate();

  std::vector<Tensor<float>> corpus;
  if (!a.corpus.empty()) {
    for (const auto& p : corpus_images(a.corpus)) {
      auto img = io::decode_image(p);
      if (img.dim(2) != config.height || img.dim(3) != config.width) {
        img = ops::bilinear_resize(img, config.height, config.width);
      }
      corpus.push_back(std::move(img));
    }
  }
  for (std::size_t i = 0; i < a.procedural; ++i) {
    corpus.push_back(training::procedural_texture(config.width, config.height, a.seed * 1000003 + i));
  }
  std::vector<training::RealPair> real;
  if (!a.real.empty()) real = training::read_posed_pairs(a.real);
  if (corpus.empty() && real.empty()) throw Error("train: no training images (use --corpus or --procedural)");

  auto model = a.init.empty() ? XFeatModel<float>(arch_by_name(a.arch), a.seed) : io::load_weights(a.init);
  model.train(true);
  training::HarrisTeacher teacher;
  std::ostringstream csv;
  csv << "step,lr,ds,rel,fine,kp,total,pairs_used,pairs_skipped\n";
  csv << std::setprecision(9);
  training::train(model, corpus, real, config, teacher, [&](const training::LossReport& r) {
    csv << r.step << ',' << r.lr << ',' << r.ds << ',' << r.rel << ',' << r.fine << ',' << r.kp << ','
        << r.total << ',' << r.pairs_used << ',' << r.pairs_skipped << '\n';
    if ((r.step + 1) % 50 == 0 || r.step + 1 == config.steps) {
      std::cerr << "step " << r.step + 1 << "/" << config.steps << " total " << r.total << '\n';
    }
  });
  model.eval();
  io::save_weights(a.out, model);
  io::atomic_write_text(a.loss_csv.empty() ? a.out + ".loss.csv" : a.loss_csv, csv.str());
  return 0;
}

struct ExtractArgs {
  std::string model, image, mode = "sparse", out;
  std::size_t top_k = 0;
  std::vector<float> scales{0.65f, 1.3f};
};

int run_extract(const ExtractArgs& a) {
  auto model = io::load_weights(a.model);
  const auto image = io::decode_image(a.image);
  FeatureSet fs;
  if (a.mode == "sparse") {
    DetectOptions opt;
    opt.top_k = a.top_k ? a.top_k : 4096;
    fs = extract_sparse(model, image, opt);
  } else if (a.mode == "semidense") {
    SemiDenseOptions opt;
    opt.top_n = a.top_k ? a.top_k : 10000;
    opt.scales = a.scales;
    fs = semi_dense_extract(model, image, opt);
  } else {
    throw Error("unknown mode '" + a.mode + "' (expected sparse or semidense)");
  }
  io::save_features(a.out, fs);
  std::cerr << fs.size() << " features\n";
  return 0;
}

MatchSet match_features(const FeatureSet& fa, const FeatureSet& fb, const XFeatModel<float>* model,
                        bool refine, float conf, float min_cossim) {
  auto m = mnn_match(fa, fb, min_cossim);
  if (refine) {
    if (!model) throw Error("--refine needs --model");
    return refine_matches(m, *model, conf);
  }
  m.confidence.assign(m.size(), 1.0f);
  return m;
}

struct MatchArgs {
  std::string model, feats_a, feats_b, out;
  bool refine = false;
  float conf = 0.2f;
  float min_cossim = -1.0f;
};

int run_match(const MatchArgs& a) {
  const auto fa = io::load_features(a.feats_a);
  const auto fb = io::load_features(a.feats_b);
  std::optional<XFeatModel<float>> model;
  if (!a.model.empty()) model = io::load_weights(a.model);
  const auto m = match_features(fa, fb, model ? &*model : nullptr, a.refine, a.conf, a.min_cossim);
  auto rows = nlohmann::json::array();
  for (std::size_t i = 0; i < m.size(); ++i) {
    rows.push_back({{"xa", m.coords_a[i].x},
                    {"ya", m.coords_a[i].y},
                    {"xb", m.coords_b[i].x},
                    {"yb", m.coords_b[i].y},
                    {"confidence", m.confidence[i]}});
  }
  io::write_json(a.out, rows);
  std::cerr << m.size() << " matches\n";
  return 0;
}

struct EvalArgs {
  std::string model, pairs, hpatches, out, mode = "sparse";
  double threshold = 3.0;
  bool refine = false;
  float conf = 0.2f;
  std::size_t top_k = 0;
  std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& a) {
  if (a.pairs.empty() == a.hpatches.empty()) throw Error("eval-homography: give exactly one of --pairs or --hpatches");
  const auto pairs = a.pairs.empty() ? geometry::read_hpatches(a.hpatches) : geometry::read_pair_manifest(a.pairs);
  if (pairs.empty()) throw Error("eval-homography: no pairs found");
  auto model = io::load_weights(a.model);
  const auto extract = [&](const Tensor<float>& img) {
    if (a.mode == "semidense") {
      SemiDenseOptions opt;
      opt.top_n = a.top_k ? a.top_k : 10000;
      return semi_dense_extract(model, img, opt);
    }
    if (a.mode != "sparse") throw Error("unknown mode '" + a.mode + "'");
    DetectOptions opt;
    opt.top_k = a.top_k ? a.top_k : 4096;
    return extract_sparse(model, img, opt);
  };
  geometry::EvalAccumulator acc;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& p = pairs[k];
    const auto ia = io::decode_image(p.image_a);
    const auto ib = io::decode_image(p.image_b);
    const auto m = match_features(extract(ia), extract(ib), &model, a.refine, a.conf, -1.0f);
    std::vector<geometry::Vec2> pa, pb;
    for (std::size_t i = 0; i < m.size(); ++i) {
      pa.emplace_back(m.coords_a[i].x, m.coords_a[i].y);
      pb.emplace_back(m.coords_b[i].x, m.coords_b[i].y);
    }
    geometry::RansacOptions ro;
    ro.threshold_px = a.threshold;
    ro.seed = a.seed + k;
    const auto r = geometry::ransac_homography(pa, pb, ro);
    const double err = r.success ? geometry::corner_error(r.homography, p.truth, double(ia.dim(3)), double(ia.dim(2)))
                                 : std::numeric_limits<double>::infinity();
    acc.add(err, r.inlier_mask, r.success);
    std::cerr << "pair " << k + 1 << "/" << pairs.size() << " matches " << m.size() << " corner error " << err << '\n';
  }
  const auto report = acc.report().to_json();
  io::write_json(a.out, report);
  std::cout << report.dump(2) << '\n';
  return 0;
}

struct BenchArgs {
  std::string model, arch = "reference", out;
  std::size_t width = 800, height = 600;
  bool json = false;
};

int run_bench(const BenchArgs& a) {
  auto model = load_or_init(a.model, a.arch, 0);
  model.eval();
  const Tensor<float> image(Shape{1, 1, a.height, a.width}, 0.5f);
  FlopCounter counter;
  const auto t0 = std::chrono::steady_clock::now();
  {
    NoGradGuard no_grad;
    forward(model, image, &counter);
  }
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  nlohmann::json j{{"width", a.width}, {"height", a.height}, {"total", counter.total()}, {"forward_ms", ms}};
  auto layers = nlohmann::json::array();
  for (const auto& e : counter.entries()) {
    layers.push_back({{"layer", e.layer}, {"height", e.height}, {"width", e.width}, {"c_in", e.c_in},
                      {"c_out", e.c_out}, {"kernel", e.kernel}, {"flops", e.f_ops}});
  }
  j["layers"] = layers;
  if (!a.out.empty()) io::write_json(a.out, j);
  if (a.json) {
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  std::cout << std::left << std::setw(22) << "layer" << std::right << std::setw(6) << "H'" << std::setw(6) << "W'"
            << std::setw(6) << "Cin" << std::setw(6) << "Cout" << std::setw(3) << "k" << std::setw(14) << "flops"
            << '\n';
  for (const auto& e : counter.entries()) {
    std::cout << std::left << std::setw(22) << e.layer << std::right << std::setw(6) << e.height << std::setw(6)
              << e.width << std::setw(6) << e.c_in << std::setw(6) << e.c_out << std::setw(3) << e.kernel
              << std::setw(14) << e.f_ops << '\n';
  }
  std::cout << "total " << counter.total() << '\n';
  std::cout << "forward_ms " << std::fixed << std::setprecision(1) << ms << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"XFeat local features: training, extraction, matching and evaluation"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model on synthetic warps of a corpus");
  train->add_option("--corpus", ta.corpus, "Directory of PGM/PPM/PNG images");
  train->add_option("--procedural", ta.procedural, "Add N seeded procedural textures to the corpus");
  train->add_option("--real", ta.real, "Posed pair manifest mixed in as real pairs");
  train->add_option("--steps", ta.steps, "Optimizer steps");
  train->add_option("--seed", ta.seed, "Seed for init, data and sampling");
  train->add_option("--out", ta.out, "Output checkpoint")->required();
  train->add_option("--config", ta.config, "Training config JSON");
  train->add_option("--arch", ta.arch, "reference or reduced")->capture_default_str();
  train->add_option("--init", ta.init, "Start from an existing checkpoint");
  train->add_option("--batch", ta.batch, "Pairs per batch");
  train->add_option("--width", ta.width, "Training image width");
  train->add_option("--height", ta.height, "Training image height");
  train->add_option("--lr", ta.lr, "Initial learning rate");
  train->add_option("--loss-csv", ta.loss_csv, "Loss curve CSV (default <out>.loss.csv)");

  ExtractArgs ea;
  auto* extract = app.add_subcommand("extract", "Extract features from one image");
  extract->add_option("--model", ea.model, "Checkpoint")->required();
  extract->add_option("--image", ea.image, "Input image")->required();
  extract->add_option("--mode", ea.mode, "sparse or semidense")->capture_default_str();
  extract->add_option("--top-k", ea.top_k, "Feature budget (default 4096 sparse, 10000 semidense)");
  extract->add_option("--scales", ea.scales, "Semi-dense processing scales")->capture_default_str();
  extract->add_option("--out", ea.out, "Output feature cache")->required();

  MatchArgs ma;
  auto* match = app.add_subcommand("match", "Match two feature caches");
  match->add_option("--model", ma.model, "Checkpoint (needed for --refine)");
  match->add_option("--feats-a", ma.feats_a, "Features of image A")->required();
  match->add_option("--feats-b", ma.feats_b, "Features of image B")->required();
  match->add_flag("--refine", ma.refine, "Refine matches with the offset head");
  match->add_option("--conf", ma.conf, "Minimum refinement confidence")->capture_default_str();
  match->add_option("--min-cossim", ma.min_cossim, "Minimum cosine similarity")->capture_default_str();
  match->add_option("--out", ma.out, "Output matches JSON")->required();

  EvalArgs va;
  auto* eval = app.add_subcommand("eval-homography", "Homography estimation benchmark");
  eval->add_option("--model", va.model, "Checkpoint")->required();
  eval->add_option("--pairs", va.pairs, "Pair manifest JSON");
  eval->add_option("--hpatches", va.hpatches, "HPatches root directory");
  eval->add_option("--mode", va.mode, "sparse or semidense")->capture_default_str();
  eval->add_option("--top-k", va.top_k, "Feature budget");
  eval->add_option("--threshold", va.threshold, "RANSAC threshold in px")->capture_default_str();
  eval->add_flag("--refine", va.refine, "Refine matches before RANSAC");
  eval->add_option("--conf", va.conf, "Minimum refinement confidence")->capture_default_str();
  eval->add_option("--seed", va.seed, "RANSAC seed");
  eval->add_option("--out", va.out, "Output report JSON")->required();

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench-flops", "Per-layer FLOP table and forward timing");
  bench->add_option("--model", ba.model, "Checkpoint (default: freshly initialized)");
  bench->add_option("--arch", ba.arch, "Architecture when no checkpoint is given")->capture_default_str();
  bench->add_option("--width", ba.width, "Image width")->capture_default_str();
  bench->add_option("--height", ba.height, "Image height")->capture_default_str();
  bench->add_flag("--json", ba.json, "Print JSON instead of a table");
  bench->add_option("--out", ba.out, "Also write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*train) return run_train(ta);
    if (*extract) return run_extract(ea);
    if (*match) return run_match(ma);
    if (*eval) return run_eval(va);
    if (*bench) return run_bench(ba);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
