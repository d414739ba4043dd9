#pragma once

// Dense row-major tensor with explicit shapes. Deliberately minimal: storage,
// shape bookkeeping, and the indexing helpers the rest of the library needs.

#include <cstdint>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace davit {

// Error taxonomy. The CLI maps Config/Geometry/Shape/Usage to exit code 2
// (caller mistakes) and Numeric/Io to exit code 1 (runtime failures).
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct GeometryError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline void check_shape_valid(const Shape& s, const char* who) {
  for (int64_t d : s)
    if (d < 0)
      throw ShapeError(std::string(who) + ": negative dimension in " + shape_str(s));
}

// Row-major strides (innermost dimension contiguous).
inline Shape row_major_strides(const Shape& s) {
  Shape st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)) {
    check_shape_valid(shape, "Tensor");
    data.assign(static_cast<size_t>(shape_numel(shape)), T(0));
  }

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    check_shape_valid(shape, "Tensor");
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("Tensor: " + std::to_string(data.size()) + " values for shape " +
                       shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    for (T& x : t.data) x = v;
    return t;
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, {v}); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  int64_t dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r)
      throw ShapeError("Tensor::dim: axis " + std::to_string(i) + " for rank " +
                       std::to_string(r));
    return shape[static_cast<size_t>(i)];
  }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // Multi-index access; rank checked, bounds unchecked (hot path).
  template <typename... Ix>
  T& at(Ix... ix) {
    return data[static_cast<size_t>(flat_index({static_cast<int64_t>(ix)...}))];
  }
  template <typename... Ix>
  const T& at(Ix... ix) const {
    return data[static_cast<size_t>(flat_index({static_cast<int64_t>(ix)...}))];
  }

  int64_t flat_index(std::initializer_list<int64_t> ix) const {
    if (static_cast<int>(ix.size()) != rank())
      throw ShapeError("Tensor::at: " + std::to_string(ix.size()) + " indices for rank " +
                       std::to_string(rank()));
    int64_t flat = 0;
    size_t k = 0;
    for (int64_t i : ix) {
      flat = flat * shape[k] + i;
      ++k;
    }
    return flat;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

// numpy-style right-aligned broadcast of two shapes.
inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* who) {
  Shape out(std::max(a.size(), b.size()), 1);
  for (size_t i = 0; i < out.size(); ++i) {
    int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(who) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Iterate a broadcast result shape while tracking the flat offsets into two
// differently-shaped operands. Small helper used by elementwise ops.
struct BroadcastIter {
  Shape out_shape;
  Shape a_stride, b_stride;  // per out-axis strides; 0 where broadcast
  explicit BroadcastIter(const Shape& a, const Shape& b, const Shape& out) {
    out_shape = out;
    a_stride.assign(out.size(), 0);
    b_stride.assign(out.size(), 0);
    Shape as = row_major_strides(a), bs = row_major_strides(b);
    for (size_t i = 0; i < out.size(); ++i) {
      size_t off = out.size() - a.size();
      if (i >= off && a[i - off] != 1) a_stride[i] = as[i - off];
      off = out.size() - b.size();
      if (i >= off && b[i - off] != 1) b_stride[i] = bs[i - off];
    }
  }
};

}  // namespace davit
