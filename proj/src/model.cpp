#include "xfeat/model.hpp"

#include <cmath>
#include <random>

#include "xfeat/heads.hpp"

namespace xfeat {

BackboneConfig BackboneConfig::reduced() {
  BackboneConfig c;
  c.block_channels = {2, 4, 6, 8, 8, 16};
  return c;
}

void BackboneConfig::validate() const {
  for (std::size_t b = 0; b < 6; ++b) {
    if (block_channels[b] < 1) throw ShapeError("config: block channels must be positive");
    if (block_layer_counts[b] < 1) throw ShapeError("config: every block needs a layer");
    if (block_strides[b] != 1 && block_strides[b] != 2) {
      throw ShapeError("config: block strides must be 1 or 2");
    }
  }
  int scale = 1;
  std::array<int, 6> cumulative{};
  for (std::size_t b = 0; b < 6; ++b) cumulative[b] = scale *= block_strides[b];
  if (cumulative[2] != 8 || cumulative[3] != 16 || cumulative[5] != 32) {
    throw ShapeError("config: block strides must reach 1/8 after block 3, 1/16 after block 4 "
                     "and 1/32 after block 6");
  }
  if (fusion_layers < 2) throw ShapeError("config: fusion block needs at least two layers");
  if (fusion_kernel != 1 && fusion_kernel != 3) throw ShapeError("config: fusion kernel 1 or 3");
  if (descriptor_dim < 1 || keypoint_hidden < 1) throw ShapeError("config: widths must be positive");
  if (refiner_widths.empty() || refiner_widths.back() != 64) {
    throw ShapeError("config: refiner must end in 64 offset logits");
  }
  for (int w : refiner_widths) {
    if (w < 1) throw ShapeError("config: refiner widths must be positive");
  }
}

int BackboneConfig::descriptor_conv_count() const {
  int n = 0;
  for (int c : block_layer_counts) n += c;
  return n + 3 + fusion_layers + 1;
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"block_channels", block_channels},
          {"block_layer_counts", block_layer_counts},
          {"block_strides", block_strides},
          {"fusion_layers", fusion_layers},
          {"fusion_kernel", fusion_kernel},
          {"descriptor_dim", descriptor_dim},
          {"keypoint_hidden", keypoint_hidden},
          {"refiner_widths", refiner_widths},
          {"skip_connection", skip_connection}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  try {
    c.block_channels = j.at("block_channels").get<std::array<int, 6>>();
    c.block_layer_counts = j.at("block_layer_counts").get<std::array<int, 6>>();
    c.block_strides = j.at("block_strides").get<std::array<int, 6>>();
    c.fusion_layers = j.at("fusion_layers").get<int>();
    c.fusion_kernel = j.value("fusion_kernel", 1);
    c.descriptor_dim = j.at("descriptor_dim").get<int>();
    c.keypoint_hidden = j.value("keypoint_hidden", 64);
    c.refiner_widths = j.value("refiner_widths", std::vector<int>{128, 128, 64});
    c.skip_connection = j.value("skip_connection", true);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("architecture config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

template <typename T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor<T> uniform(Shape shape, double bound) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) {
      // 53 random bits -> [0,1); independent of the standard library's
      // distribution implementation.
      const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
      x = static_cast<T>((2.0 * u - 1.0) * bound);
    }
    Tensor<T> t(std::move(shape), std::move(v));
    t.set_requires_grad(true);
    return t;
  }

  // Kaiming-uniform with ReLU gain: bound = sqrt(6 / fan_in).
  Tensor<T> kaiming(Shape shape, std::size_t fan_in) {
    return uniform(std::move(shape), std::sqrt(6.0 / static_cast<double>(fan_in)));
  }

  BasicLayer<T> basic(std::string name, int cin, int cout, int kernel, int stride) {
    BasicLayer<T> l;
    l.name = std::move(name);
    l.kernel = kernel;
    l.stride = stride;
    const auto k = static_cast<std::size_t>(kernel);
    l.weight = kaiming({std::size_t(cout), std::size_t(cin), k, k}, std::size_t(cin) * k * k);
    l.gamma = Tensor<T>({std::size_t(cout)}, T(1));
    l.gamma.set_requires_grad(true);
    l.beta = Tensor<T>({std::size_t(cout)}, T(0));
    l.beta.set_requires_grad(true);
    l.running_mean = Tensor<T>({std::size_t(cout)}, T(0));
    l.running_var = Tensor<T>({std::size_t(cout)}, T(1));
    return l;
  }

  ConvLayer<T> conv(std::string name, int cin, int cout, int kernel) {
    ConvLayer<T> l;
    l.name = std::move(name);
    l.kernel = kernel;
    const auto k = static_cast<std::size_t>(kernel);
    const std::size_t fan_in = std::size_t(cin) * k * k;
    l.weight = kaiming({std::size_t(cout), std::size_t(cin), k, k}, fan_in);
    l.bias = uniform({std::size_t(cout)}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    return l;
  }

  LinearLayer<T> linear(std::string name, int in, int out) {
    LinearLayer<T> l;
    l.name = std::move(name);
    l.weight = kaiming({std::size_t(out), std::size_t(in)}, std::size_t(in));
    l.bias = uniform({std::size_t(out)}, 1.0 / std::sqrt(static_cast<double>(in)));
    return l;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

template <typename T>
XFeatModel<T>::XFeatModel(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Initializer<T> init(seed);
  int cin = 1;
  for (std::size_t b = 0; b < 6; ++b) {
    auto& block = blocks.emplace_back();
    for (int l = 0; l < config_.block_layer_counts[b]; ++l) {
      const int stride = l == 0 ? config_.block_strides[b] : 1;
      block.push_back(init.basic("block" + std::to_string(b + 1) + "." + std::to_string(l), cin,
                                 config_.block_channels[b], 3, stride));
      cin = config_.block_channels[b];
    }
  }
  const int d = config_.descriptor_dim;
  proj8 = init.conv("proj8", config_.block_channels[2], d, 1);
  proj16 = init.conv("proj16", config_.block_channels[3], d, 1);
  proj32 = init.conv("proj32", config_.block_channels[5], d, 1);
  for (int l = 0; l + 1 < config_.fusion_layers; ++l) {
    fusion.push_back(init.basic("fusion." + std::to_string(l), d, d, config_.fusion_kernel, 1));
  }
  fusion_out = init.conv("fusion." + std::to_string(config_.fusion_layers - 1), d, d, 1);
  reliability = init.conv("reliability", d, 1, 1);
  const int kh = config_.keypoint_hidden;
  keypoint_layers.push_back(init.basic("keypoint.0", 64, kh, 1, 1));
  keypoint_layers.push_back(init.basic("keypoint.1", kh, kh, 1, 1));
  keypoint_layers.push_back(init.basic("keypoint.2", kh, kh, 1, 1));
  keypoint_out = init.conv("keypoint.3", kh, 65, 1);
  int in = 2 * d;
  for (std::size_t l = 0; l < config_.refiner_widths.size(); ++l) {
    refiner.push_back(init.linear("refiner." + std::to_string(l), in, config_.refiner_widths[l]));
    in = config_.refiner_widths[l];
  }
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> XFeatModel<T>::named_tensors() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  const auto basic = [&out](BasicLayer<T>& l) {
    out.emplace_back(l.name + ".weight", &l.weight);
    out.emplace_back(l.name + ".bn.gamma", &l.gamma);
    out.emplace_back(l.name + ".bn.beta", &l.beta);
    out.emplace_back(l.name + ".bn.running_mean", &l.running_mean);
    out.emplace_back(l.name + ".bn.running_var", &l.running_var);
  };
  const auto conv = [&out](ConvLayer<T>& l) {
    out.emplace_back(l.name + ".weight", &l.weight);
    out.emplace_back(l.name + ".bias", &l.bias);
  };
  for (auto& block : blocks) {
    for (auto& l : block) basic(l);
  }
  conv(proj8);
  conv(proj16);
  conv(proj32);
  for (auto& l : fusion) basic(l);
  conv(fusion_out);
  conv(reliability);
  for (auto& l : keypoint_layers) basic(l);
  conv(keypoint_out);
  for (auto& l : refiner) {
    out.emplace_back(l.name + ".weight", &l.weight);
    out.emplace_back(l.name + ".bias", &l.bias);
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> XFeatModel<T>::named_tensors() const {
  auto mutable_view = const_cast<XFeatModel<T>*>(this)->named_tensors();
  return {mutable_view.begin(), mutable_view.end()};
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> XFeatModel<T>::named_parameters() {
  auto all = named_tensors();
  std::erase_if(all, [](const auto& entry) {
    return entry.first.ends_with(".running_mean") || entry.first.ends_with(".running_var");
  });
  return all;
}

template <typename T>
std::vector<std::string> XFeatModel<T>::descriptor_conv_names() const {
  std::vector<std::string> names;
  for (const auto& block : blocks) {
    for (const auto& l : block) names.push_back(l.name);
  }
  names.push_back(proj8.name);
  names.push_back(proj16.name);
  names.push_back(proj32.name);
  for (const auto& l : fusion) names.push_back(l.name);
  names.push_back(fusion_out.name);
  names.push_back(reliability.name);
  return names;
}

template <typename T>
void XFeatModel<T>::zero_grad() {
  for (auto& [name, t] : named_parameters()) t->zero_grad();
}

template <typename T>
Tensor<T> basic_layer_forward(BasicLayer<T>& layer, const Tensor<T>& x, bool training,
                              FlopCounter* counter) {
  auto y = ops::conv2d(x, layer.weight, Tensor<T>{}, layer.stride, (layer.kernel - 1) / 2, counter,
                       layer.name);
  y = ops::batchnorm2d(y, layer.gamma, layer.beta, layer.running_mean, layer.running_var,
                       ops::BatchNormOptions{training, 0.1, 1e-5});
  return ops::relu(y);
}

template <typename T>
Tensor<T> conv_layer_forward(const ConvLayer<T>& layer, const Tensor<T>& x, FlopCounter* counter) {
  return ops::conv2d(x, layer.weight, layer.bias, 1, (layer.kernel - 1) / 2, counter, layer.name);
}

template <typename T>
Tensor<T> pad_to_multiple(const Tensor<T>& image, std::size_t multiple) {
  if (image.rank() != 4) throw ShapeError("pad_to_multiple: expected NCHW image");
  const auto round_up = [multiple](std::size_t v) { return (v + multiple - 1) / multiple * multiple; };
  return ops::pad_edge(image, round_up(image.dim(2)), round_up(image.dim(3)));
}

template <typename T>
EncoderFeatures<T> forward_encoder(XFeatModel<T>& model, const Tensor<T>& image,
                                   FlopCounter* counter) {
  if (image.rank() != 4 || image.dim(1) != 1) {
    throw ShapeError("forward_encoder: expected [N,1,H,W] grayscale input, got " +
                     shape_to_string(image.shape()));
  }
  if (image.dim(2) % 32 || image.dim(3) % 32) {
    throw ShapeError("forward_encoder: input must be padded to a multiple of 32");
  }
  EncoderFeatures<T> enc;
  Tensor<T> x = image;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    for (auto& layer : model.blocks[b]) x = basic_layer_forward(layer, x, model.training(), counter);
    if (b == 2) enc.level8 = x;
    if (b == 3) enc.level16 = x;
  }
  enc.level32 = x;
  return enc;
}

template <typename T>
FeatureMaps<T> fuse_pyramid(XFeatModel<T>& model, const EncoderFeatures<T>& enc,
                            FlopCounter* counter) {
  const std::size_t n = enc.level8.dim(0), h = enc.level8.dim(2), w = enc.level8.dim(3);
  if (enc.level16.dim(0) != n || enc.level32.dim(0) != n || enc.level16.dim(2) * 2 != h ||
      enc.level16.dim(3) * 2 != w || enc.level32.dim(2) * 4 != h || enc.level32.dim(3) * 4 != w) {
    throw ShapeError("fuse_pyramid: pyramid levels have inconsistent shapes");
  }
  auto p8 = conv_layer_forward(model.proj8, enc.level8, counter);
  auto p16 = ops::bilinear_resize(conv_layer_forward(model.proj16, enc.level16, counter), h, w);
  auto p32 = ops::bilinear_resize(conv_layer_forward(model.proj32, enc.level32, counter), h, w);
  auto x = ops::add(ops::add(p8, p16), p32);
  for (auto& layer : model.fusion) x = basic_layer_forward(layer, x, model.training(), counter);
  if (model.config().skip_connection) x = ops::add(x, p8);
  FeatureMaps<T> maps;
  maps.descriptors = conv_layer_forward(model.fusion_out, x, counter);
  maps.reliability_logits = conv_layer_forward(model.reliability, x, counter);
  return maps;
}

template <typename T>
ForwardOutput<T> forward(XFeatModel<T>& model, const Tensor<T>& image, FlopCounter* counter) {
  const auto padded = pad_to_multiple(image, 32);
  ForwardOutput<T> out;
  out.maps = fuse_pyramid(model, forward_encoder(model, padded, counter), counter);
  out.keypoint_logits = keypoint_head_forward(model, padded, counter);
  // Cells entirely inside the padding are dropped.
  const std::size_t h = (image.dim(2) + 7) / 8, w = (image.dim(3) + 7) / 8;
  out.maps.descriptors = ops::crop(out.maps.descriptors, h, w);
  out.maps.reliability_logits = ops::crop(out.maps.reliability_logits, h, w);
  out.keypoint_logits = ops::crop(out.keypoint_logits, h, w);
  return out;
}

template <typename T>
Tensor<T> refiner_forward(const XFeatModel<T>& model, const Tensor<T>& desc_a,
                          const Tensor<T>& desc_b) {
  const auto d = static_cast<std::size_t>(model.config().descriptor_dim);
  if (desc_a.rank() != 2 || desc_b.rank() != 2 || desc_a.dim(1) != d || desc_b.dim(1) != d) {
    throw ShapeError("refiner: descriptor width mismatch, expected " + std::to_string(d));
  }
  auto x = ops::concat_cols(desc_a, desc_b);
  for (std::size_t l = 0; l < model.refiner.size(); ++l) {
    x = ops::linear(x, model.refiner[l].weight, model.refiner[l].bias);
    if (l + 1 < model.refiner.size()) x = ops::relu(x);
  }
  return x;
}

#define XFEAT_INSTANTIATE_MODEL(T)                                                            \
  template class XFeatModel<T>;                                                               \
  template Tensor<T> basic_layer_forward(BasicLayer<T>&, const Tensor<T>&, bool, FlopCounter*); \
  template Tensor<T> conv_layer_forward(const ConvLayer<T>&, const Tensor<T>&, FlopCounter*); \
  template Tensor<T> pad_to_multiple(const Tensor<T>&, std::size_t);                          \
  template EncoderFeatures<T> forward_encoder(XFeatModel<T>&, const Tensor<T>&, FlopCounter*); \
  template FeatureMaps<T> fuse_pyramid(XFeatModel<T>&, const EncoderFeatures<T>&,             \
                                       FlopCounter*);                                         \
  template ForwardOutput<T> forward(XFeatModel<T>&, const Tensor<T>&, FlopCounter*);          \
  template Tensor<T> refiner_forward(const XFeatModel<T>&, const Tensor<T>&, const Tensor<T>&);

XFEAT_INSTANTIATE_MODEL(float)
XFEAT_INSTANTIATE_MODEL(double)

#undef XFEAT_INSTANTIATE_MODEL

}  // namespace xfeat
