#pragma once

// Binary file formats:
//  - tensor container: magic "DAVT", version u16, dtype u8 (0 = f32, 1 = f64),
//    rank u8, dims as u64 little-endian, then the row-major payload in
//    little-endian scalars.
//  - PGM (P5) export for feature maps, min-max normalized per image.
//  - PPM (P6, maxval 255) import for raw RGB images.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "tensor.hpp"

namespace davit {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace detail {

template <typename U>
void write_raw(std::ostream& os, const U& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_raw(std::istream& is, const char* what) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw IoError(std::string("tensor container: truncated while reading ") + what);
  return v;
}

template <typename T>
constexpr uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "container supports f32 and f64 only");
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

inline constexpr uint16_t kTensorFormatVersion = 1;

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write("DAVT", 4);
  detail::write_raw<uint16_t>(os, kTensorFormatVersion);
  detail::write_raw<uint8_t>(os, detail::dtype_code<T>());
  detail::write_raw<uint8_t>(os, static_cast<uint8_t>(t.rank()));
  for (const int64_t d : t.shape) detail::write_raw<uint64_t>(os, static_cast<uint64_t>(d));
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(T)));
  if (!os) throw IoError("tensor container: write failed");
}

// Read a container whose dtype may differ from T; payload is converted.
template <typename T>
Tensor<T> read_tensor_as(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DAVT", 4) != 0)
    throw IoError("tensor container: bad magic (not a tensor file)");
  const auto version = detail::read_raw<uint16_t>(is, "version");
  if (version != kTensorFormatVersion)
    throw IoError("tensor container: unsupported format version " + std::to_string(version));
  const auto dtype = detail::read_raw<uint8_t>(is, "dtype");
  if (dtype > 1) throw IoError("tensor container: unknown dtype code " + std::to_string(dtype));
  const auto rank = detail::read_raw<uint8_t>(is, "rank");
  if (rank > 8) throw IoError("tensor container: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<int64_t>(detail::read_raw<uint64_t>(is, "dims"));
  check_shape_valid(shape, "tensor container");
  const int64_t n = shape_numel(shape);
  Tensor<T> out(shape);
  auto read_payload = [&](auto tag) {
    using S = decltype(tag);
    std::vector<S> buf(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(S)));
    if (!is) throw IoError("tensor container: truncated payload");
    for (int64_t i = 0; i < n; ++i) out[i] = static_cast<T>(buf[static_cast<size_t>(i)]);
  };
  if (dtype == 0)
    read_payload(float{});
  else
    read_payload(double{});
  return out;
}

// Strict read: the stored dtype must match T exactly.
template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  const auto pos = is.tellg();
  // Peek dtype: magic(4) + version(2) precede it.
  is.seekg(pos + std::streamoff(6));
  const auto dtype = detail::read_raw<uint8_t>(is, "dtype");
  is.seekg(pos);
  if (dtype != detail::dtype_code<T>())
    throw IoError("tensor container: dtype code " + std::to_string(dtype) +
                  " does not match the requested scalar type");
  return read_tensor_as<T>(is);
}

template <typename T>
void write_tensor_file(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_tensor(os, t);
}

template <typename T>
Tensor<T> read_tensor_file_as(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  return read_tensor_as<T>(is);
}

// Min-max normalized 8-bit grayscale export; constant images become all-zero.
template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& img) {
  if (img.rank() != 2) throw ShapeError("write_pgm: need [H,W], got " + shape_str(img.shape));
  const int64_t H = img.shape[0], W = img.shape[1];
  T lo = img[0], hi = img[0];
  for (const T v : img.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = static_cast<double>(hi) - static_cast<double>(lo);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "P5\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(W));
  for (int64_t r = 0; r < H; ++r) {
    for (int64_t c = 0; c < W; ++c) {
      const double v = static_cast<double>(img[r * W + c]);
      const double u = range > 0 ? (v - static_cast<double>(lo)) / range * 255.0 : 0.0;
      row[static_cast<size_t>(c)] = static_cast<unsigned char>(u + 0.5);
    }
    os.write(reinterpret_cast<const char*>(row.data()), W);
  }
  if (!os) throw IoError("write_pgm: write failed: " + path);
}

namespace detail {

inline int ppm_token(std::istream& is, const char* what) {
  // Skip whitespace and '#' comments, then read one unsigned decimal token.
  int c = is.get();
  while (is && (std::isspace(c) || c == '#')) {
    if (c == '#')
      while (is && c != '\n') c = is.get();
    c = is.get();
  }
  int v = 0;
  bool any = false;
  while (is && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    any = true;
    c = is.get();
  }
  if (!any) throw IoError(std::string("ppm: malformed header near ") + what);
  return v;
}

}  // namespace detail

// Binary PPM (P6) with maxval 255 -> planar [3,H,W] scaled to [0,1].
template <typename T>
Tensor<T> read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (!is || m0 != 'P' || m1 != '6') throw IoError("ppm: not a binary P6 file: " + path);
  const int w = detail::ppm_token(is, "width");
  const int h = detail::ppm_token(is, "height");
  const int maxval = detail::ppm_token(is, "maxval");
  if (w < 1 || h < 1) throw IoError("ppm: bad dimensions");
  if (maxval != 255) throw IoError("ppm: only maxval 255 is supported");
  std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw IoError("ppm: truncated pixel data: " + path);
  Tensor<T> out({3, h, w});
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c)
      for (int64_t ch = 0; ch < 3; ++ch)
        out[(ch * h + r) * w + c] =
            static_cast<T>(buf[static_cast<size_t>((r * w + c) * 3 + ch)]) / T(255);
  return out;
}

}  // namespace davit
