#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xfeat/ops.hpp"
#include "xfeat/tensor.hpp"

namespace xfeat {

// Architecture of the encoder, pyramid fusion, heads and refiner.
struct BackboneConfig {
  std::array<int, 6> block_channels{4, 8, 24, 64, 64, 128};
  std::array<int, 6> block_layer_counts{2, 2, 3, 3, 3, 3};
  // Stride of the first layer in each block.
  std::array<int, 6> block_strides{2, 2, 2, 2, 2, 1};
  int fusion_layers = 3;
  // Kernel of the fusion block's basic layers (1 or 3).
  int fusion_kernel = 1;
  int descriptor_dim = 64;
  int keypoint_hidden = 64;
  std::vector<int> refiner_widths{128, 128, 64};
  bool skip_connection = true;

  static BackboneConfig reference() { return {}; }
  // Narrow encoder used for gradient checks and desk-scale training.
  static BackboneConfig reduced();

  void validate() const;
  // Convolutions in the descriptor pathway (encoder, projections,
  // fusion block, reliability head).
  int descriptor_conv_count() const;

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

// conv -> BN -> ReLU. Bias-free convolution.
template <typename T>
struct BasicLayer {
  std::string name;
  int kernel = 3;
  int stride = 1;
  Tensor<T> weight;
  Tensor<T> gamma, beta, running_mean, running_var;
};

// Plain convolution with bias, no normalization or activation.
template <typename T>
struct ConvLayer {
  std::string name;
  int kernel = 1;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct LinearLayer {
  std::string name;
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;
};

template <typename T>
struct EncoderFeatures {
  Tensor<T> level8;
  Tensor<T> level16;
  Tensor<T> level32;
};

template <typename T>
struct FeatureMaps {
  Tensor<T> descriptors;        // [N, D, H/8, W/8]
  Tensor<T> reliability_logits;  // [N, 1, H/8, W/8]
};

template <typename T>
struct ForwardOutput {
  FeatureMaps<T> maps;
  Tensor<T> keypoint_logits;  // [N, 65, H/8, W/8]
};

template <typename T>
class XFeatModel {
 public:
  XFeatModel() = default;
  XFeatModel(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }

  bool training() const { return training_; }
  void train(bool on = true) { training_ = on; }
  void eval() { training_ = false; }

  // Learnable tensors, in a stable order with unique names.
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters();
  // Learnable tensors plus BN running statistics.
  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor<T>*>> named_tensors() const;

  // Names of every convolution in the descriptor pathway.
  std::vector<std::string> descriptor_conv_names() const;

  void zero_grad();

  template <typename U>
  XFeatModel<U> cast() const;

  std::vector<std::vector<BasicLayer<T>>> blocks;
  ConvLayer<T> proj8, proj16, proj32;
  std::vector<BasicLayer<T>> fusion;
  ConvLayer<T> fusion_out;
  ConvLayer<T> reliability;
  std::vector<BasicLayer<T>> keypoint_layers;
  ConvLayer<T> keypoint_out;
  std::vector<LinearLayer<T>> refiner;

 private:
  template <typename U>
  friend class XFeatModel;

  BackboneConfig config_;
  bool training_ = false;
};

template <typename T>
Tensor<T> basic_layer_forward(BasicLayer<T>& layer, const Tensor<T>& x, bool training,
                              FlopCounter* counter);
template <typename T>
Tensor<T> conv_layer_forward(const ConvLayer<T>& layer, const Tensor<T>& x, FlopCounter* counter);

// Pads a [N,C,H,W] image on the bottom/right by edge replication so both
// spatial dims are multiples of `multiple`.
template <typename T>
Tensor<T> pad_to_multiple(const Tensor<T>& image, std::size_t multiple);

// Encoder taps at 1/8, 1/16 and 1/32. Input must already be padded to a
// multiple of 32.
template <typename T>
EncoderFeatures<T> forward_encoder(XFeatModel<T>& model, const Tensor<T>& image,
                                   FlopCounter* counter = nullptr);

template <typename T>
FeatureMaps<T> fuse_pyramid(XFeatModel<T>& model, const EncoderFeatures<T>& enc,
                            FlopCounter* counter = nullptr);

// Pads the image to a multiple of 32, runs encoder, fusion and the keypoint
// head, then crops every map to ceil(H/8) x ceil(W/8) cells.
template <typename T>
ForwardOutput<T> forward(XFeatModel<T>& model, const Tensor<T>& image,
                         FlopCounter* counter = nullptr);

// Refiner logits [N,64] for descriptor pairs [N,D] x [N,D].
template <typename T>
Tensor<T> refiner_forward(const XFeatModel<T>& model, const Tensor<T>& desc_a,
                          const Tensor<T>& desc_b);

template <typename T>
template <typename U>
XFeatModel<U> XFeatModel<T>::cast() const {
  const auto basic = [](const BasicLayer<T>& l) {
    return BasicLayer<U>{l.name,
                         l.kernel,
                         l.stride,
                         l.weight.template cast<U>(),
                         l.gamma.template cast<U>(),
                         l.beta.template cast<U>(),
                         l.running_mean.template cast<U>(),
                         l.running_var.template cast<U>()};
  };
  const auto conv = [](const ConvLayer<T>& l) {
    return ConvLayer<U>{l.name, l.kernel, l.weight.template cast<U>(), l.bias.template cast<U>()};
  };
  XFeatModel<U> out;
  out.config_ = config_;
  out.training_ = training_;
  for (const auto& block : blocks) {
    auto& dst = out.blocks.emplace_back();
    for (const auto& layer : block) dst.push_back(basic(layer));
  }
  out.proj8 = conv(proj8);
  out.proj16 = conv(proj16);
  out.proj32 = conv(proj32);
  for (const auto& layer : fusion) out.fusion.push_back(basic(layer));
  out.fusion_out = conv(fusion_out);
  out.reliability = conv(reliability);
  for (const auto& layer : keypoint_layers) out.keypoint_layers.push_back(basic(layer));
  out.keypoint_out = conv(keypoint_out);
  for (const auto& layer : refiner) {
    out.refiner.push_back(
        LinearLayer<U>{layer.name, layer.weight.template cast<U>(), layer.bias.template cast<U>()});
  }
  for (auto& [name, tensor] : out.named_parameters()) tensor->set_requires_grad(true);
  return out;
}

extern template class XFeatModel<float>;
extern template class XFeatModel<double>;

}  // namespace xfeat
