#include "xfeat/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

#ifdef XFEAT_HAVE_PNG
#include <png.h>
#endif

namespace xfeat::io {

namespace {

constexpr char kWeightMagic[4] = {'X', 'F', 'T', 'W'};
constexpr char kFeatureMagic[4] = {'X', 'F', 'T', 'C'};
constexpr std::uint8_t kDtypeF32 = 0;

class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> values) {
    for (float v : values) f32(v);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      throw FormatError(std::string("truncated file while reading ") + what);
    }
  }
  std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return bytes(1, what)[0]; }
  std::uint16_t u16(const char* what) {
    auto b = bytes(2, what);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32(const char* what) {
    auto b = bytes(4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::vector<float> f32s(std::size_t count, const char* what) {
    if (count > remaining() / 4) throw FormatError(std::string("truncated file while reading ") + what);
    std::vector<float> v(count);
    for (auto& x : v) x = f32(what);
    return v;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

void check_magic(ByteReader& r, const char (&magic)[4]) {
  const auto m = r.bytes(4, "magic");
  if (std::memcmp(m.data(), magic, 4) != 0) throw FormatError("bad magic");
}

void check_version(ByteReader& r, std::uint32_t expected) {
  const auto v = r.u32("version");
  if (v != expected) {
    throw FormatError("unsupported format version " + std::to_string(v) + " (expected " +
                      std::to_string(expected) + ")");
  }
}

}  // namespace

void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  auto tmp = path;
  tmp += ".tmp" + std::to_string(rng() % 1000000);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw Error("write failed for " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error("cannot rename into " + path.string() + ": " + ec.message());
  }
}

void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
  atomic_write(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::uint8_t> encode_weights(const XFeatModel<float>& model) {
  ByteWriter w;
  w.bytes(kWeightMagic, 4);
  w.u32(kWeightFormatVersion);
  const std::string config = model.config().to_json().dump();
  w.u32(static_cast<std::uint32_t>(config.size()));
  w.bytes(config.data(), config.size());
  const auto tensors = model.named_tensors();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(kDtypeF32);
    w.u8(static_cast<std::uint8_t>(t->rank()));
    for (auto d : t->shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(t->data());
  }
  return w.take();
}

XFeatModel<float> decode_weights(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  check_magic(r, kWeightMagic);
  check_version(r, kWeightFormatVersion);
  const auto json_len = r.u32("config length");
  const auto json_bytes = r.bytes(json_len, "architecture config");
  BackboneConfig config;
  try {
    config = BackboneConfig::from_json(nlohmann::json::parse(json_bytes.begin(), json_bytes.end()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("architecture config is not valid JSON: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("architecture config invalid: ") + e.what());
  }
  XFeatModel<float> model(config, 0);
  auto slots = model.named_tensors();
  std::map<std::string, Tensor<float>*> by_name(slots.begin(), slots.end());
  std::map<std::string, bool> seen;
  const auto count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u16("tensor name length");
    const auto name_bytes = r.bytes(name_len, "tensor name");
    const std::string name(name_bytes.begin(), name_bytes.end());
    if (seen[name]) throw FormatError("duplicate tensor name " + name);
    seen[name] = true;
    const auto dtype = r.u8("dtype");
    if (dtype != kDtypeF32) throw FormatError("unknown dtype code " + std::to_string(dtype));
    const auto rank = r.u8("rank");
    Shape shape;
    std::uint64_t n = 1;
    for (int k = 0; k < rank; ++k) {
      shape.push_back(r.u32("dims"));
      n *= shape.back();
    }
    if (n > r.remaining() / 4) throw FormatError("truncated file while reading tensor " + name);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("unexpected tensor " + name);
    if (it->second->shape() != shape) {
      throw FormatError("tensor " + name + " has shape " + shape_to_string(shape) + ", expected " +
                        shape_to_string(it->second->shape()));
    }
    auto values = r.f32s(n, "tensor payload");
    std::copy(values.begin(), values.end(), it->second->data().begin());
  }
  if (seen.size() != by_name.size()) throw FormatError("weight file is missing tensors");
  if (r.remaining() != 0) throw FormatError("trailing bytes after tensor table");
  return model;
}

void save_weights(const std::filesystem::path& path, const XFeatModel<float>& model) {
  atomic_write(path, encode_weights(model));
}

XFeatModel<float> load_weights(const std::filesystem::path& path) {
  return decode_weights(read_file(path));
}

std::size_t feature_file_size(std::size_t count, FeatureMode mode) {
  const std::size_t header = 4 + 4 + 4 + 4 + 1 + 4;
  const std::size_t per = 3 * 4 + 64 * 4 + 4 + (mode == FeatureMode::kSemiDense ? 4 : 0);
  return header + count * per;
}

std::vector<std::uint8_t> encode_features(const FeatureSet& features) {
  features.validate();
  if (features.dim != 64) throw ShapeError("feature cache stores 64-d descriptors only");
  ByteWriter w;
  w.bytes(kFeatureMagic, 4);
  w.u32(kFeatureFormatVersion);
  w.u32(features.width);
  w.u32(features.height);
  w.u8(static_cast<std::uint8_t>(features.mode));
  w.u32(static_cast<std::uint32_t>(features.size()));
  w.f32s(features.x);
  w.f32s(features.y);
  w.f32s(features.score);
  w.f32s(features.descriptors);
  w.f32s(features.reliability);
  if (features.mode == FeatureMode::kSemiDense) w.f32s(features.scale);
  return w.take();
}

FeatureSet decode_features(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  check_magic(r, kFeatureMagic);
  check_version(r, kFeatureFormatVersion);
  FeatureSet fs;
  fs.width = r.u32("width");
  fs.height = r.u32("height");
  const auto mode = r.u8("mode");
  if (mode > 1) throw FormatError("unknown feature mode " + std::to_string(mode));
  fs.mode = static_cast<FeatureMode>(mode);
  const std::size_t count = r.u32("count");
  if (r.remaining() != feature_file_size(count, fs.mode) - feature_file_size(0, fs.mode)) {
    throw FormatError("feature cache length does not match its count");
  }
  fs.dim = 64;
  fs.x = r.f32s(count, "x");
  fs.y = r.f32s(count, "y");
  fs.score = r.f32s(count, "score");
  fs.descriptors = r.f32s(count * 64, "descriptors");
  fs.reliability = r.f32s(count, "reliability");
  fs.scale = fs.mode == FeatureMode::kSemiDense ? r.f32s(count, "scale")
                                                 : std::vector<float>(count, 1.0f);
  return fs;
}

void save_features(const std::filesystem::path& path, const FeatureSet& features) {
  atomic_write(path, encode_features(features));
}

FeatureSet load_features(const std::filesystem::path& path) {
  return decode_features(read_file(path));
}

namespace {

float luminance(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

std::size_t pnm_header_value(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (is_space(bytes[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9') {
    throw FormatError("malformed PNM header");
  }
  std::size_t v = 0;
  while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
    v = v * 10 + (bytes[pos++] - '0');
    if (v > (1u << 30)) throw FormatError("PNM header value too large");
  }
  return v;
}

}  // namespace

Tensor<float> decode_pnm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError("unsupported image format (expected binary P5/P6)");
  }
  const bool color = bytes[1] == '6';
  std::size_t pos = 2;
  const std::size_t w = pnm_header_value(bytes, pos);
  const std::size_t h = pnm_header_value(bytes, pos);
  const std::size_t maxval = pnm_header_value(bytes, pos);
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw FormatError("invalid PNM header");
  if (pos >= bytes.size() || !is_space(bytes[pos])) throw FormatError("malformed PNM header");
  ++pos;
  const std::size_t channels = color ? 3 : 1;
  const std::size_t sample_bytes = maxval > 255 ? 2 : 1;
  const std::size_t needed = w * h * channels * sample_bytes;
  if (bytes.size() - pos < needed) throw FormatError("truncated PNM pixel data");
  const auto sample = [&](std::size_t i) -> float {
    const std::size_t off = pos + i * sample_bytes;
    const unsigned v = sample_bytes == 2 ? (bytes[off] << 8) | bytes[off + 1] : bytes[off];
    return static_cast<float>(v) / static_cast<float>(maxval);
  };
  std::vector<float> out(w * h);
  for (std::size_t i = 0; i < w * h; ++i) {
    out[i] = color ? luminance(sample(3 * i), sample(3 * i + 1), sample(3 * i + 2)) : sample(i);
  }
  return Tensor<float>({1, 1, h, w}, std::move(out));
}

namespace {

#ifdef XFEAT_HAVE_PNG
Tensor<float> decode_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw FormatError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgb.data(), 0, nullptr)) {
    png_image_free(&image);
    throw FormatError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  const std::size_t w = image.width, h = image.height;
  std::vector<float> out(w * h);
  for (std::size_t i = 0; i < w * h; ++i) {
    out[i] = luminance(rgb[3 * i] / 255.0f, rgb[3 * i + 1] / 255.0f, rgb[3 * i + 2] / 255.0f);
  }
  return Tensor<float>({1, 1, h, w}, std::move(out));
}
#endif

}  // namespace

Tensor<float> decode_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G') {
#ifdef XFEAT_HAVE_PNG
    return decode_png(path);
#else
    throw FormatError("PNG support not compiled in");
#endif
  }
  return decode_pnm(bytes);
}

std::vector<std::uint8_t> encode_pgm(const Tensor<float>& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 1) {
    throw ShapeError("encode_pgm: expected [1,1,H,W] image");
  }
  const std::size_t h = image.dim(2), w = image.dim(3);
  const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + w * h);
  for (float v : image.data()) {
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Tensor<float>& image) {
  atomic_write(path, encode_pgm(image));
}

void write_json(const std::filesystem::path& path, const nlohmann::json& value) {
  atomic_write_text(path, value.dump(2) + "\n");
}

}  // namespace xfeat::io
