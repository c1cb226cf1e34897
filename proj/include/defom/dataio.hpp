#pragma once

// Byte-level readers and writers for disparity maps (PFM, KITTI-style 16-bit
// PNG), 8-bit RGB images, and the flat binary weight container.

#include <png.h>

#include <bit>
#include <csetjmp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "defom/tensor.hpp"

namespace defom {

using Bytes = std::vector<std::uint8_t>;

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A disparity map with its validity mask (1 = valid). Invalid entries hold 0.
struct DisparityMap {
  Tensor disparity;
  Mask valid;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

namespace detail {

inline std::uint32_t byteswap32(std::uint32_t v) noexcept {
  return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
}

inline void append_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void append_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void append_f32(Bytes& out, float v) { append_u32(out, std::bit_cast<std::uint32_t>(v)); }

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  [[nodiscard]] bool has(std::size_t n) const noexcept { return bytes_.size() - pos_ >= n; }
  [[nodiscard]] std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }

  std::uint64_t u64(const std::string& what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }

  std::string str(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::span<const std::uint8_t> take(std::size_t n, const std::string& what) {
    need(n, what);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  void need(std::size_t n, const std::string& what) const {
    if (!has(n)) throw FormatError("truncated data while reading " + what);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// PFM, grayscale "Pf" variant. Rows are stored bottom-up; the sign of the scale
// line selects endianness (negative = little-endian). Non-finite values mark
// unknown disparity and come back as invalid mask entries.

inline DisparityMap read_pfm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto token = [&](const char* what) {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    if (tok.empty()) throw FormatError(std::string("PFM: missing ") + what);
    return tok;
  };
  const std::string magic = token("magic");
  if (magic != "Pf") throw FormatError("PFM: bad magic '" + magic + "' (only grayscale Pf is supported)");
  long long width = 0, height = 0;
  double scale = 0.0;
  try {
    width = std::stoll(token("width"));
    height = std::stoll(token("height"));
    scale = std::stod(token("scale"));
  } catch (const std::logic_error&) {
    throw FormatError("PFM: malformed header");
  }
  if (width <= 0 || height <= 0) throw FormatError("PFM: dimensions must be positive");
  if (scale == 0.0 || !std::isfinite(scale)) throw FormatError("PFM: scale must be nonzero");
  // exactly one whitespace byte separates the header from the payload
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("PFM: truncated header");
  ++pos;

  const auto h = static_cast<std::size_t>(height), w = static_cast<std::size_t>(width);
  if (bytes.size() - pos < h * w * 4) {
    throw FormatError("PFM: truncated payload, expected " + std::to_string(h * w * 4) + " bytes, got " +
                      std::to_string(bytes.size() - pos));
  }
  const bool little = scale < 0.0;
  DisparityMap out{Tensor({h, w}), Mask({h, w}, 1)};
  for (std::size_t stored_row = 0; stored_row < h; ++stored_row) {
    const std::size_t y = h - 1 - stored_row;
    for (std::size_t x = 0; x < w; ++x) {
      std::uint32_t raw;
      std::memcpy(&raw, bytes.data() + pos, 4);
      pos += 4;
      if (little != (std::endian::native == std::endian::little)) raw = detail::byteswap32(raw);
      const float v = std::bit_cast<float>(raw);
      if (std::isfinite(v)) {
        out.disparity(y, x) = v;
      } else {
        out.disparity(y, x) = 0.0f;
        out.valid(y, x) = 0;
      }
    }
  }
  return out;
}

// Writes little-endian (scale -1). Entries with valid == 0 are stored as +inf.
inline Bytes write_pfm(const Tensor& map, const Mask* valid = nullptr) {
  require_rank(map, 2, "write_pfm");
  if (valid && valid->shape() != map.shape()) throw ShapeError("write_pfm: mask shape mismatch");
  const std::size_t h = map.dim(0), w = map.dim(1);
  const std::string header = "Pf\n" + std::to_string(w) + " " + std::to_string(h) + "\n-1\n";
  Bytes out(header.begin(), header.end());
  out.reserve(out.size() + h * w * 4);
  for (std::size_t stored_row = 0; stored_row < h; ++stored_row) {
    const std::size_t y = h - 1 - stored_row;
    for (std::size_t x = 0; x < w; ++x) {
      const bool ok = !valid || (*valid)(y, x);
      detail::append_f32(out, ok ? map(y, x) : std::numeric_limits<float>::infinity());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNG via libpng, from and to memory.

namespace detail {

struct PngImage {
  std::size_t width = 0, height = 0;
  int bit_depth = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // rows top-down, samples big-endian for 16-bit
};

struct PngReadSource {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

[[noreturn]] inline void png_error_handler(png_structp png, png_const_charp message) {
  auto* buffer = static_cast<char*>(png_get_error_ptr(png));
  std::strncpy(buffer, message, 255);
  buffer[255] = '\0';
  png_longjmp(png, 1);
}

inline void png_warning_handler(png_structp, png_const_charp) {}

// Decodes to the file's native layout; `expand` asks libpng to normalise
// palette/low-bit-depth images to 8-bit samples.
inline PngImage decode_png(std::span<const std::uint8_t> bytes, bool expand) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw FormatError("PNG: bad signature");
  char message[256] = "";
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, message, png_error_handler, png_warning_handler);
  if (!png) throw FormatError("PNG: out of memory");
  png_infop info = png_create_info_struct(png);
  PngReadSource source{bytes, 0};
  PngImage image;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(std::string("PNG: ") + message);
  }
  png_set_read_fn(png, &source, [](png_structp p, png_bytep out, png_size_t n) {
    auto* src = static_cast<PngReadSource*>(png_get_io_ptr(p));
    if (src->bytes.size() - src->pos < n) png_error(p, "truncated data");
    std::memcpy(out, src->bytes.data() + src->pos, n);
    src->pos += n;
  });
  png_read_info(png, info);
  if (expand) {
    png_set_expand(png);
    png_set_strip_16(png);
  }
  png_read_update_info(png, info);
  image.width = png_get_image_width(png, info);
  image.height = png_get_image_height(png, info);
  image.bit_depth = png_get_bit_depth(png, info);
  image.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  image.pixels.resize(stride * image.height);
  rows.resize(image.height);
  for (std::size_t y = 0; y < image.height; ++y) rows[y] = image.pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

inline Bytes encode_png(const PngImage& image, int color_type) {
  char message[256] = "";
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, message, png_error_handler, png_warning_handler);
  if (!png) throw FormatError("PNG: out of memory");
  png_infop info = png_create_info_struct(png);
  Bytes out;
  std::vector<png_bytep> rows(image.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError(std::string("PNG: ") + message);
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t n) {
        auto* dst = static_cast<Bytes*>(png_get_io_ptr(p));
        dst->insert(dst->end(), data, data + n);
      },
      nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height),
               image.bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = image.width * static_cast<std::size_t>(image.channels) * (image.bit_depth / 8);
  for (std::size_t y = 0; y < image.height; ++y) {
    rows[y] = const_cast<png_bytep>(image.pixels.data() + y * stride);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace detail

// KITTI convention: disparity = stored / 256, stored 0 = invalid.
inline DisparityMap read_disp_png16(std::span<const std::uint8_t> bytes) {
  const auto image = detail::decode_png(bytes, false);
  if (image.bit_depth != 16) {
    throw FormatError("PNG16: expected 16-bit samples, got " + std::to_string(image.bit_depth) + "-bit");
  }
  if (image.channels != 1) {
    throw FormatError("PNG16: expected a single channel, got " + std::to_string(image.channels));
  }
  DisparityMap out{Tensor({image.height, image.width}), Mask({image.height, image.width}, 0)};
  for (std::size_t i = 0; i < image.height * image.width; ++i) {
    const auto stored = static_cast<std::uint16_t>((image.pixels[2 * i] << 8) | image.pixels[2 * i + 1]);
    if (stored != 0) {
      out.disparity[i] = static_cast<float>(stored) / 256.0f;
      out.valid[i] = 1;
    }
  }
  return out;
}

inline Bytes write_disp_png16(const Tensor& map, const Mask* valid = nullptr) {
  require_rank(map, 2, "write_disp_png16");
  if (valid && valid->shape() != map.shape()) throw ShapeError("write_disp_png16: mask shape mismatch");
  detail::PngImage image{map.dim(1), map.dim(0), 16, 1, {}};
  image.pixels.resize(map.size() * 2);
  constexpr double kMax = 65535.0 / 256.0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    const float d = map[i];
    std::uint16_t stored = 0;
    if ((!valid || (*valid)[i]) && std::isfinite(d) && d > 0.0f) {
      if (d > kMax) throw FormatError("PNG16: disparity " + std::to_string(d) + " exceeds the 16-bit range");
      stored = static_cast<std::uint16_t>(std::lround(static_cast<double>(d) * 256.0));
    }
    image.pixels[2 * i] = static_cast<std::uint8_t>(stored >> 8);
    image.pixels[2 * i + 1] = static_cast<std::uint8_t>(stored & 0xFF);
  }
  return detail::encode_png(image, PNG_COLOR_TYPE_GRAY);
}

// 8-bit images as 3 x H x W in [0, 1]. Gray and alpha inputs are converted.
inline Tensor read_png_rgb(std::span<const std::uint8_t> bytes) {
  const auto image = detail::decode_png(bytes, true);
  const std::size_t h = image.height, w = image.width;
  const auto ch = static_cast<std::size_t>(image.channels);
  Tensor out({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::uint8_t* px = image.pixels.data() + (y * w + x) * ch;
      for (std::size_t c = 0; c < 3; ++c) {
        const std::uint8_t v = ch >= 3 ? px[c] : px[0];
        out(c, y, x) = static_cast<float>(v) / 255.0f;
      }
    }
  return out;
}

inline Bytes write_png_rgb(const Tensor& image) {
  require_rank(image, 3, "write_png_rgb");
  if (image.dim(0) != 3) throw ShapeError("write_png_rgb: expected 3 channels");
  const std::size_t h = image.dim(1), w = image.dim(2);
  detail::PngImage png{w, h, 8, 3, {}};
  png.pixels.resize(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(image(c, y, x), 0.0f, 1.0f);
        png.pixels[(y * w + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  return detail::encode_png(png, PNG_COLOR_TYPE_RGB);
}

// Dispatches on the file signature: PNG16 or PFM.
inline DisparityMap read_disparity(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return read_disp_png16(bytes);
  return read_pfm(bytes);
}

// ---------------------------------------------------------------------------
// Weight container, little-endian throughout:
//
//   magic    "DFMW" (4 bytes)
//   version  u32 (= 1)
//   seed     u64 (kNoSeed when weights were not generated from a seed)
//   count    u32
//   count x { name_len u32, name bytes, rank u32, dims u32[rank], f32[prod(dims)] }

struct WeightBundle {
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::uint64_t kNoSeed = std::numeric_limits<std::uint64_t>::max();

  std::map<std::string, Tensor> tensors;
  std::uint32_t version = kVersion;
  std::uint64_t seed = kNoSeed;

  [[nodiscard]] bool contains(const std::string& name) const { return tensors.contains(name); }

  [[nodiscard]] const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("weight bundle has no tensor named '" + name + "'");
    return it->second;
  }

  friend bool operator==(const WeightBundle&, const WeightBundle&) = default;
};

inline constexpr char kWeightMagic[4] = {'D', 'F', 'M', 'W'};

inline Bytes save_weights(const WeightBundle& bundle) {
  Bytes out(std::begin(kWeightMagic), std::end(kWeightMagic));
  detail::append_u32(out, bundle.version);
  detail::append_u64(out, bundle.seed);
  detail::append_u32(out, static_cast<std::uint32_t>(bundle.tensors.size()));
  for (const auto& [name, tensor] : bundle.tensors) {
    detail::append_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::append_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) detail::append_u32(out, static_cast<std::uint32_t>(d));
    for (float v : tensor.values()) detail::append_f32(out, v);
  }
  return out;
}

inline WeightBundle load_weights(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  if (in.str(4, "magic") != std::string(kWeightMagic, 4)) throw FormatError("weights: magic mismatch");
  WeightBundle bundle;
  bundle.version = in.u32("version");
  if (bundle.version != WeightBundle::kVersion) {
    throw FormatError("weights: unsupported version " + std::to_string(bundle.version));
  }
  bundle.seed = in.u64("seed");
  const std::uint32_t count = in.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string label = "tensor #" + std::to_string(i);
    const std::uint32_t name_len = in.u32(label + " name length");
    std::string name = in.str(name_len, label + " name");
    const std::uint32_t rank = in.u32("rank of '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = in.u32("dims of '" + name + "'");
    const std::size_t n = element_count(shape);
    if (n > in.remaining() / 4) {
      throw FormatError("weights: payload of '" + name + "' truncated: declared " + to_string(shape) + " needs " +
                        std::to_string(n * 4) + " bytes, " + std::to_string(in.remaining()) + " remain");
    }
    const auto payload = in.take(n * 4, "payload of '" + name + "'");
    std::vector<float> values(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t raw = 0;
      for (int b = 0; b < 4; ++b) raw |= static_cast<std::uint32_t>(payload[4 * k + b]) << (8 * b);
      values[k] = std::bit_cast<float>(raw);
    }
    if (!bundle.tensors.emplace(name, Tensor(std::move(shape), std::move(values))).second) {
      throw FormatError("weights: duplicate tensor name '" + name + "'");
    }
  }
  if (in.remaining() != 0) throw FormatError("weights: trailing bytes after last tensor");
  return bundle;
}

}  // namespace defom
