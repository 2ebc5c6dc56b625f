#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xfeat/matcher.hpp"
#include "xfeat/model.hpp"

namespace xfeat::io {

inline constexpr std::uint32_t kWeightFormatVersion = 1;
inline constexpr std::uint32_t kFeatureFormatVersion = 1;

// Writes to a sibling temporary file and renames it over `path`, so readers
// never observe a partially written file.
void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void atomic_write_text(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// Weight file layout, little-endian:
//   "XFTW" | u32 version | u32 json_len | json architecture config
//   | u32 tensor_count | per tensor: u16 name_len, name, u8 dtype (0 = f32),
//   u8 rank, u32 dims[rank], f32 payload[prod(dims)]
std::vector<std::uint8_t> encode_weights(const XFeatModel<float>& model);
XFeatModel<float> decode_weights(std::span<const std::uint8_t> bytes);
void save_weights(const std::filesystem::path& path, const XFeatModel<float>& model);
XFeatModel<float> load_weights(const std::filesystem::path& path);

// Feature cache layout, little-endian:
//   "XFTC" | u32 version | u32 width | u32 height | u8 mode | u32 count
//   | f32 x[count] | f32 y[count] | f32 score[count]
//   | f32 descriptors[count*64] | f32 reliability[count]
//   | f32 scale[count]   (semi-dense mode only)
std::size_t feature_file_size(std::size_t count, FeatureMode mode);
std::vector<std::uint8_t> encode_features(const FeatureSet& features);
FeatureSet decode_features(std::span<const std::uint8_t> bytes);
void save_features(const std::filesystem::path& path, const FeatureSet& features);
FeatureSet load_features(const std::filesystem::path& path);

// Grayscale [1,1,H,W] image in [0,1]. Binary PGM (P5) and PPM (P6) are
// parsed natively, PNG through libpng. Colour is reduced with
// 0.299 R + 0.587 G + 0.114 B.
Tensor<float> decode_image(const std::filesystem::path& path);
Tensor<float> decode_pnm(std::span<const std::uint8_t> bytes);
// 8-bit P5 encoding, values rounded from [0,1] to [0,255].
std::vector<std::uint8_t> encode_pgm(const Tensor<float>& image);
void write_pgm(const std::filesystem::path& path, const Tensor<float>& image);

void write_json(const std::filesystem::path& path, const nlohmann::json& value);

}  // namespace xfeat::io
