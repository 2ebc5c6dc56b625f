// Python bindings for extraction, matching, geometry and file formats.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "xfeat/geometry.hpp"
#include "xfeat/io.hpp"
#include "xfeat/matcher.hpp"

namespace py = pybind11;
using namespace xfeat;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> image_from_array(const FloatArray& a) {
  if (a.ndim() != 2) throw std::invalid_argument("image must be a 2-D float array");
  const auto h = std::size_t(a.shape(0)), w = std::size_t(a.shape(1));
  return Tensor<float>(Shape{1, 1, h, w}, std::vector<float>(a.data(), a.data() + h * w));
}

py::array_t<float> to_array(const std::vector<float>& v, std::vector<py::ssize_t> shape) {
  py::array_t<float> out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::array_t<float> points(const std::vector<Point2>& p) {
  py::array_t<float> out({py::ssize_t(p.size()), py::ssize_t(2)});
  auto* d = out.mutable_data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    d[2 * i] = p[i].x;
    d[2 * i + 1] = p[i].y;
  }
  return out;
}

std::vector<geometry::Vec2> vec2s(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2 || a.shape(1) != 2) throw std::invalid_argument("points must have shape (N, 2)");
  std::vector<geometry::Vec2> out;
  for (py::ssize_t i = 0; i < a.shape(0); ++i) out.emplace_back(a.at(i, 0), a.at(i, 1));
  return out;
}

}  // namespace

PYBIND11_MODULE(_xfeat, m) {
  m.doc() = "XFeat local features";

  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  py::enum_<FeatureMode>(m, "FeatureMode")
      .value("SPARSE", FeatureMode::kSparse)
      .value("SEMI_DENSE", FeatureMode::kSemiDense);

  py::class_<XFeatModel<float>>(m, "Model")
      .def_static("reference", [](std::uint64_t seed) { return XFeatModel<float>(BackboneConfig::reference(), seed); },
                  py::arg("seed") = 0)
      .def_static("reduced", [](std::uint64_t seed) { return XFeatModel<float>(BackboneConfig::reduced(), seed); },
                  py::arg("seed") = 0)
      .def_static("load", &io::load_weights, py::arg("path"))
      .def("save", [](const XFeatModel<float>& self, const std::filesystem::path& p) { io::save_weights(p, self); })
      .def("parameter_count", [](XFeatModel<float>& self) {
        std::size_t n = 0;
        for (auto& [name, t] : self.named_parameters()) n += t->numel();
        return n;
      });

  py::class_<FeatureSet>(m, "Features")
      .def_readonly("width", &FeatureSet::width)
      .def_readonly("height", &FeatureSet::height)
      .def_readonly("mode", &FeatureSet::mode)
      .def("__len__", &FeatureSet::size)
      .def_property_readonly("keypoints", [](const FeatureSet& f) {
        std::vector<Point2> p;
        for (std::size_t i = 0; i < f.size(); ++i) p.push_back({f.x[i], f.y[i]});
        return points(p);
      })
      .def_property_readonly("scores", [](const FeatureSet& f) { return to_array(f.score, {py::ssize_t(f.size())}); })
      .def_property_readonly("reliability",
                             [](const FeatureSet& f) { return to_array(f.reliability, {py::ssize_t(f.size())}); })
      .def_property_readonly("scales", [](const FeatureSet& f) { return to_array(f.scale, {py::ssize_t(f.size())}); })
      .def_property_readonly("descriptors", [](const FeatureSet& f) {
        return to_array(f.descriptors, {py::ssize_t(f.size()), py::ssize_t(f.dim)});
      })
      .def("save", [](const FeatureSet& self, const std::filesystem::path& p) { io::save_features(p, self); })
      .def_static("load", &io::load_features, py::arg("path"));

  py::class_<MatchSet>(m, "Matches")
      .def("__len__", &MatchSet::size)
      .def_property_readonly("indices", [](const MatchSet& s) { return s.pairs; })
      .def_property_readonly("points_a", [](const MatchSet& s) { return points(s.coords_a); })
      .def_property_readonly("points_b", [](const MatchSet& s) { return points(s.coords_b); })
      .def_property_readonly("similarity",
                             [](const MatchSet& s) { return to_array(s.similarity, {py::ssize_t(s.size())}); })
      .def_property_readonly("confidence", [](const MatchSet& s) {
        return s.confidence.empty() ? to_array(std::vector<float>(s.size(), 1.0f), {py::ssize_t(s.size())})
                                    : to_array(s.confidence, {py::ssize_t(s.size())});
      });

  m.def(
      "extract_sparse",
      [](XFeatModel<float>& model, const FloatArray& image, std::size_t top_k) {
        DetectOptions o;
        o.top_k = top_k;
        return extract_sparse(model, image_from_array(image), o);
      },
      py::arg("model"), py::arg("image"), py::arg("top_k") = 4096);

  m.def(
      "extract_semidense",
      [](XFeatModel<float>& model, const FloatArray& image, std::size_t top_k, std::vector<float> scales) {
        SemiDenseOptions o;
        o.top_n = top_k;
        o.scales = std::move(scales);
        return semi_dense_extract(model, image_from_array(image), o);
      },
      py::arg("model"), py::arg("image"), py::arg("top_k") = 10000,
      py::arg("scales") = std::vector<float>{0.65f, 1.3f});

  m.def("match", &mnn_match, py::arg("a"), py::arg("b"), py::arg("min_cossim") = -1.0f);
  m.def("refine", &refine_matches, py::arg("matches"), py::arg("model"), py::arg("conf") = 0.2f);

  m.def(
      "offset_from_logits",
      [](const FloatArray& logits) {
        if (logits.size() != 64) throw std::invalid_argument("expected 64 logits");
        const auto o = offset_from_logits(std::span<const float>(logits.data(), 64));
        return py::make_tuple(o.x, o.y, o.confidence);
      },
      py::arg("logits"));

  m.def(
      "flops",
      [](std::size_t width, std::size_t height) {
        XFeatModel<float> model(BackboneConfig::reference(), 0);
        NoGradGuard guard;
        FlopCounter counter;
        forward(model, Tensor<float>(Shape{1, 1, height, width}, 0.0f), &counter);
        return counter.total();
      },
      py::arg("width") = 800, py::arg("height") = 600);

  m.def(
      "find_homography",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& b, double threshold,
         std::uint64_t seed) {
        const auto pa = vec2s(a), pb = vec2s(b);
        geometry::RansacOptions o;
        o.threshold_px = threshold;
        o.seed = seed;
        const auto r = geometry::ransac_homography(pa, pb, o);
        py::array_t<double> h({3, 3});
        const auto rm = r.homography.row_major();
        std::copy(rm.begin(), rm.end(), h.mutable_data());
        return py::make_tuple(r.success, h, std::vector<bool>(r.inlier_mask.begin(), r.inlier_mask.end()));
      },
      py::arg("points_a"), py::arg("points_b"), py::arg("threshold") = 3.0, py::arg("seed") = 0);

  m.def(
      "read_image",
      [](const std::filesystem::path& p) {
        const auto t = io::decode_image(p);
        return to_array(std::vector<float>(t.data().begin(), t.data().end()),
                        {py::ssize_t(t.shape()[2]), py::ssize_t(t.shape()[3])});
      },
      py::arg("path"));
}
