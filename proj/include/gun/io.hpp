#pragma once

// Binary tensor container and PGM/PPM raster files.
//
// Container layout (all integers little-endian):
//   bytes 0-3   magic "GUNT"
//   byte  4     format version (1)
//   byte  5     dtype code: 0 = float64, 1 = float32, 2 = uint8
//   byte  6     rank
//   then        rank x uint32 extents
//   then        row-major payload, product(extents) * sizeof(dtype) bytes

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "gun/metrics.hpp"
#include "gun/tensor.hpp"

namespace gun {

enum class ParseErrorKind { bad_magic, truncated, unsupported_dtype, unsupported_version, bad_header, dtype_mismatch };

class ParseError : public Error {
 public:
  ParseError(ParseErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  ParseErrorKind kind() const noexcept { return kind_; }

 private:
  ParseErrorKind kind_;
};

inline constexpr std::uint8_t kContainerVersion = 1;

enum class DType : std::uint8_t { float64 = 0, float32 = 1, uint8 = 2 };

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, double>) return DType::float64;
  else if constexpr (std::is_same_v<T, float>) return DType::float32;
  else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::uint8;
  else static_assert(sizeof(T) == 0, "unsupported container dtype");
}

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::float64: return 8;
    case DType::float32: return 4;
    case DType::uint8: return 1;
  }
  return 0;
}

using AnyTensor = std::variant<Tensor<double>, Tensor<float>, Tensor<std::uint8_t>>;

namespace detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <typename T>
void put_value(std::vector<std::uint8_t>& out, T v) {
  if constexpr (std::is_same_v<T, double>) put_le(out, std::bit_cast<std::uint64_t>(v));
  else if constexpr (std::is_same_v<T, float>) put_le(out, std::bit_cast<std::uint32_t>(v));
  else out.push_back(v);
}

template <typename T>
T get_value(const std::uint8_t* p) {
  if constexpr (std::is_same_v<T, double>) return std::bit_cast<double>(get_le<std::uint64_t>(p));
  else if constexpr (std::is_same_v<T, float>) return std::bit_cast<float>(get_le<std::uint32_t>(p));
  else return *p;
}

template <typename T>
Tensor<T> decode_payload(const std::uint8_t* p, Shape shape) {
  const std::size_t n = element_count(shape);
  std::vector<T> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = get_value<T>(p + i * sizeof(T));
  return Tensor<T>(std::move(shape), std::move(values));
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> write_container(const Tensor<T>& t) {
  if (t.rank() > 255) throw ValidationError("write_container: rank exceeds 255");
  std::vector<std::uint8_t> out{'G', 'U', 'N', 'T', kContainerVersion,
                                static_cast<std::uint8_t>(dtype_of<T>()),
                                static_cast<std::uint8_t>(t.rank())};
  for (auto e : t.shape()) {
    if (e > UINT32_MAX) throw ValidationError("write_container: extent exceeds 32 bits");
    detail::put_le(out, static_cast<std::uint32_t>(e));
  }
  out.reserve(out.size() + t.size() * sizeof(T));
  for (T v : t.data()) detail::put_value(out, v);
  return out;
}

struct ContainerView {
  AnyTensor tensor;
  std::size_t bytes_consumed = 0;
};

// Parses one container from the front of `bytes`; trailing data is allowed
// and reported through bytes_consumed.
inline ContainerView read_container_prefix(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "GUNT", 4) != 0) {
    throw ParseError(ParseErrorKind::bad_magic, "container: bad magic (expected \"GUNT\")");
  }
  if (bytes.size() < 7) throw ParseError(ParseErrorKind::truncated, "container: truncated header");
  if (bytes[4] != kContainerVersion) {
    throw ParseError(ParseErrorKind::unsupported_version,
                     "container: unsupported version " + std::to_string(bytes[4]));
  }
  if (bytes[5] > 2) {
    throw ParseError(ParseErrorKind::unsupported_dtype,
                     "container: unsupported dtype code " + std::to_string(bytes[5]));
  }
  const auto dtype = static_cast<DType>(bytes[5]);
  const std::size_t rank = bytes[6];
  std::size_t pos = 7;
  if (bytes.size() < pos + 4 * rank) {
    throw ParseError(ParseErrorKind::truncated, "container: truncated extents");
  }
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i, pos += 4) {
    shape[i] = detail::get_le<std::uint32_t>(bytes.data() + pos);
    if (shape[i] == 0) throw ParseError(ParseErrorKind::bad_header, "container: zero extent");
  }
  const std::size_t payload = element_count(shape) * dtype_size(dtype);
  if (bytes.size() < pos + payload) {
    throw ParseError(ParseErrorKind::truncated,
                     "container: truncated payload (need " + std::to_string(payload) +
                         " bytes, have " + std::to_string(bytes.size() - pos) + ")");
  }
  const std::uint8_t* p = bytes.data() + pos;
  ContainerView view;
  view.bytes_consumed = pos + payload;
  switch (dtype) {
    case DType::float64: view.tensor = detail::decode_payload<double>(p, shape); break;
    case DType::float32: view.tensor = detail::decode_payload<float>(p, shape); break;
    case DType::uint8: view.tensor = detail::decode_payload<std::uint8_t>(p, shape); break;
  }
  return view;
}

inline AnyTensor read_container(std::span<const std::uint8_t> bytes) {
  return read_container_prefix(bytes).tensor;
}

template <typename T>
Tensor<T> read_container_as(std::span<const std::uint8_t> bytes) {
  auto any = read_container(bytes);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw ParseError(ParseErrorKind::dtype_mismatch, "container: stored dtype differs from requested");
}

// ---------------------------------------------------------------------------
// Files

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// PGM (P5) for label maps and PPM (P6) for RGB previews, 8-bit, maxval 255.

inline std::vector<std::uint8_t> write_pgm(const SegMap& map) {
  const std::string header = "P5 " + std::to_string(map.width) + " " +
                             std::to_string(map.height) + " 255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), map.labels.begin(), map.labels.end());
  return out;
}

namespace detail {

struct PnmHeader {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

inline PnmHeader parse_pnm_header(std::span<const std::uint8_t> bytes) {
  PnmHeader h;
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&] {
    skip_space();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') {
      t.push_back(static_cast<char>(bytes[pos++]));
    }
    if (t.empty()) throw ParseError(ParseErrorKind::truncated, "pnm: truncated header");
    return t;
  };
  auto number = [&] {
    const auto t = token();
    if (!std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(c); })) {
      throw ParseError(ParseErrorKind::bad_header, "pnm: expected a number, got '" + t + "'");
    }
    return static_cast<std::size_t>(std::stoull(t));
  };
  h.magic = token();
  h.width = number();
  h.height = number();
  h.maxval = number();
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw ParseError(ParseErrorKind::truncated, "pnm: missing whitespace after maxval");
  }
  h.data_offset = pos + 1;
  if (h.width == 0 || h.height == 0) throw ParseError(ParseErrorKind::bad_header, "pnm: zero extent");
  if (h.maxval != 255) {
    throw ParseError(ParseErrorKind::unsupported_dtype, "pnm: only 8-bit maxval 255 is supported");
  }
  return h;
}

}  // namespace detail

inline SegMap read_pgm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw ParseError(ParseErrorKind::bad_magic, "pgm: expected P5");
  }
  const auto h = detail::parse_pnm_header(bytes);
  const std::size_t n = h.width * h.height;
  if (bytes.size() < h.data_offset + n) throw ParseError(ParseErrorKind::truncated, "pgm: truncated raster");
  return SegMap(h.height, h.width,
                std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset),
                                          bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset + n)));
}

// RGB preview of a [3, H, W] image with values in [0, 1].
inline std::vector<std::uint8_t> write_ppm(const Tensor<double>& image) {
  detail::require_rank(image, 3, "write_ppm");
  if (image.dim(0) != 3) throw ShapeError("write_ppm: expected 3 channels");
  const std::size_t H = image.dim(1), W = image.dim(2);
  const std::string header = "P6 " + std::to_string(W) + " " + std::to_string(H) + " 255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (std::size_t i = 0; i < H * W; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(image[c * H * W + i], 0.0, 1.0);
      out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  }
  return out;
}

inline Tensor<std::uint8_t> read_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw ParseError(ParseErrorKind::bad_magic, "ppm: expected P6");
  }
  const auto h = detail::parse_pnm_header(bytes);
  const std::size_t n = h.width * h.height;
  if (bytes.size() < h.data_offset + 3 * n) throw ParseError(ParseErrorKind::truncated, "ppm: truncated raster");
  Tensor<std::uint8_t> out({3, h.height, h.width});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out[c * n + i] = bytes[h.data_offset + 3 * i + c];
  }
  return out;
}

}  // namespace gun
