#pragma once

// Dense row-major tensors and the sampling / pooling / convolution primitives
// the matcher is built on. Everything here is header-only and allocation is
// explicit: ops that return a tensor allocate, ops suffixed `_into` do not.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace defom {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

// Test hook: counts every tensor storage allocation so hot loops can be
// checked for allocation freedom.
inline std::atomic<std::size_t>& allocation_counter() {
  static std::atomic<std::size_t> counter{0};
  return counter;
}

}  // namespace detail

inline std::size_t tensor_allocations() { return detail::allocation_counter().load(); }

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {
    ++detail::allocation_counter();
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw ShapeError("tensor payload of " + std::to_string(data_.size()) +
                       " values does not match shape " + to_string(shape_));
    }
    ++detail::allocation_counter();
  }

  BasicTensor(const BasicTensor& other) : shape_(other.shape_), data_(other.data_) {
    ++detail::allocation_counter();
  }
  BasicTensor& operator=(const BasicTensor& other) {
    if (this != &other) {
      if (data_.capacity() < other.data_.size()) ++detail::allocation_counter();
      shape_ = other.shape_;
      data_ = other.data_;
    }
    return *this;
  }
  BasicTensor(BasicTensor&&) noexcept = default;
  BasicTensor& operator=(BasicTensor&&) noexcept = default;

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] std::span<T> values() noexcept { return data_; }
  [[nodiscard]] std::span<const T> values() const noexcept { return data_; }
  [[nodiscard]] T* data() noexcept { return data_.data(); }
  [[nodiscard]] const T* data() const noexcept { return data_.data(); }

  [[nodiscard]] T& operator[](std::size_t flat) noexcept { return data_[flat]; }
  [[nodiscard]] const T& operator[](std::size_t flat) const noexcept { return data_[flat]; }

  template <typename... Index>
  [[nodiscard]] T& operator()(Index... idx) noexcept {
    return data_[offset(static_cast<std::size_t>(idx)...)];
  }
  template <typename... Index>
  [[nodiscard]] const T& operator()(Index... idx) const noexcept {
    return data_[offset(static_cast<std::size_t>(idx)...)];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  // Same storage, new shape with equal element count.
  [[nodiscard]] BasicTensor reshaped(Shape shape) && {
    if (element_count(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = std::move(shape);
    return std::move(*this);
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  template <typename... Index>
  [[nodiscard]] std::size_t offset(Index... idx) const noexcept {
    const std::size_t indexes[] = {idx...};
    std::size_t flat = 0;
    for (std::size_t axis = 0; axis < sizeof...(Index); ++axis) flat = flat * shape_[axis] + indexes[axis];
    return flat;
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;
using Mask = BasicTensor<std::uint8_t>;

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(t.shape()));
  }
}

template <typename T>
[[nodiscard]] bool all_finite(const BasicTensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(v); });
}

template <typename T, typename U>
[[nodiscard]] BasicTensor<T> tensor_cast(const BasicTensor<U>& src) {
  BasicTensor<T> out(src.shape());
  std::transform(src.values().begin(), src.values().end(), out.values().begin(),
                 [](U v) { return static_cast<T>(v); });
  return out;
}

// ---------------------------------------------------------------------------
// Sampling along the last axis

// Linear interpolation at a real-valued position of a 1-D row. Positions
// outside [0, n-1] blend with zeros, so anything further than one cell out
// is exactly zero.
template <typename T>
[[nodiscard]] inline T sample_linear(const T* row, std::size_t n, T pos) noexcept {
  if (!(pos > T(-1)) || !(pos < static_cast<T>(n))) return T(0);
  const T floor_pos = std::floor(pos);
  const auto x0 = static_cast<std::ptrdiff_t>(floor_pos);
  const T alpha = pos - floor_pos;
  const auto width = static_cast<std::ptrdiff_t>(n);
  const T v0 = (x0 >= 0) ? row[x0] : T(0);
  const T v1 = (x0 + 1 < width) ? row[x0 + 1] : T(0);
  return (T(1) - alpha) * v0 + alpha * v1;
}

// volume: h x w x n, indexes: h x w x k  ->  h x w x k
template <typename T>
[[nodiscard]] BasicTensor<T> bilinear_sample_last(const BasicTensor<T>& volume, const BasicTensor<T>& indexes) {
  require_rank(volume, 3, "bilinear_sample_last volume");
  require_rank(indexes, 3, "bilinear_sample_last indexes");
  if (volume.dim(0) != indexes.dim(0) || volume.dim(1) != indexes.dim(1)) {
    throw ShapeError("bilinear_sample_last: volume " + to_string(volume.shape()) + " and indexes " +
                     to_string(indexes.shape()) + " disagree on leading dims");
  }
  const std::size_t rows = volume.dim(0) * volume.dim(1);
  const std::size_t n = volume.dim(2);
  const std::size_t k = indexes.dim(2);
  BasicTensor<T> out(indexes.shape());
  for (std::size_t p = 0; p < rows; ++p) {
    const T* row = volume.data() + p * n;
    const T* idx = indexes.data() + p * k;
    T* dst = out.data() + p * k;
    for (std::size_t q = 0; q < k; ++q) dst[q] = sample_linear(row, n, idx[q]);
  }
  return out;
}

// Pairwise mean along the last axis; an odd trailing element is dropped.
template <typename T>
[[nodiscard]] BasicTensor<T> avg_pool_last(const BasicTensor<T>& volume) {
  if (volume.rank() == 0 || volume.shape().back() < 2) {
    throw ShapeError("avg_pool_last: last dim must be >= 2, got shape " + to_string(volume.shape()));
  }
  const std::size_t n = volume.shape().back();
  const std::size_t half = n / 2;
  const std::size_t rows = volume.size() / n;
  Shape out_shape = volume.shape();
  out_shape.back() = half;
  BasicTensor<T> out(std::move(out_shape));
  for (std::size_t p = 0; p < rows; ++p) {
    const T* src = volume.data() + p * n;
    T* dst = out.data() + p * half;
    for (std::size_t j = 0; j < half; ++j) dst[j] = (src[2 * j] + src[2 * j + 1]) / T(2);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// Cross-correlation with zero padding.
// input: c_in x h x w, kernel: c_out x c_in x kh x kw, bias: c_out (or empty).
template <typename T>
[[nodiscard]] BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                            const BasicTensor<T>& bias, Conv2dParams params = {}) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t c_out = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c_in) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input has " +
                     std::to_string(c_in));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  if (params.stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != c_out)) {
    throw ShapeError("conv2d: bias shape " + to_string(bias.shape()) + " does not match " +
                     std::to_string(c_out) + " output channels");
  }
  const auto padded_h = static_cast<std::ptrdiff_t>(h + 2 * params.pad);
  const auto padded_w = static_cast<std::ptrdiff_t>(w + 2 * params.pad);
  if (padded_h < static_cast<std::ptrdiff_t>(kh) || padded_w < static_cast<std::ptrdiff_t>(kw)) {
    throw ShapeError("conv2d: non-positive output size");
  }
  const std::size_t s = params.stride;
  const std::size_t out_h = (h + 2 * params.pad - kh) / s + 1;
  const std::size_t out_w = (w + 2 * params.pad - kw) / s + 1;
  const auto pad = static_cast<std::ptrdiff_t>(params.pad);

  BasicTensor<T> out({c_out, out_h, out_w});
  for (std::size_t oc = 0; oc < c_out; ++oc) {
    T* dst_plane = out.data() + oc * out_h * out_w;
    std::fill(dst_plane, dst_plane + out_h * out_w, bias.empty() ? T(0) : bias[oc]);
    for (std::size_t ic = 0; ic < c_in; ++ic) {
      const T* src_plane = input.data() + ic * h * w;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const T weight = kernel(oc, ic, ky, kx);
          if (weight == T(0)) continue;
          const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
          // valid ox satisfy 0 <= ox*s + dx < w
          std::ptrdiff_t ox_begin = dx >= 0 ? 0 : (-dx + static_cast<std::ptrdiff_t>(s) - 1) / static_cast<std::ptrdiff_t>(s);
          std::ptrdiff_t ox_end = (static_cast<std::ptrdiff_t>(w) - dx + static_cast<std::ptrdiff_t>(s) - 1) /
                                  static_cast<std::ptrdiff_t>(s);
          ox_end = std::min<std::ptrdiff_t>(ox_end, static_cast<std::ptrdiff_t>(out_w));
          if (ox_begin >= ox_end) continue;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const T* src = src_plane + static_cast<std::size_t>(iy) * w;
            T* dst = dst_plane + oy * out_w;
            if (s == 1) {
              for (std::ptrdiff_t ox = ox_begin; ox < ox_end; ++ox) dst[ox] += weight * src[ox + dx];
            } else {
              for (std::ptrdiff_t ox = ox_begin; ox < ox_end; ++ox) {
                dst[ox] += weight * src[ox * static_cast<std::ptrdiff_t>(s) + dx];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise and layout helpers

template <typename T, typename Fn>
[[nodiscard]] BasicTensor<T> map(BasicTensor<T> t, Fn&& fn) {
  for (T& v : t.values()) v = fn(v);
  return t;
}

template <typename T>
[[nodiscard]] BasicTensor<T> relu(BasicTensor<T> t) {
  return map(std::move(t), [](T v) { return v > T(0) ? v : T(0); });
}

template <typename T>
[[nodiscard]] inline T sigmoid(T v) noexcept {
  return T(1) / (T(1) + std::exp(-v));
}

// Concatenates c_i x h x w tensors along the channel axis.
template <typename T>
[[nodiscard]] BasicTensor<T> concat_channels(std::initializer_list<const BasicTensor<T>*> parts) {
  std::size_t channels = 0, h = 0, w = 0;
  bool first = true;
  for (const auto* p : parts) {
    require_rank(*p, 3, "concat_channels");
    if (first) {
      h = p->dim(1);
      w = p->dim(2);
      first = false;
    } else if (p->dim(1) != h || p->dim(2) != w) {
      throw ShapeError("concat_channels: spatial mismatch " + to_string(p->shape()));
    }
    channels += p->dim(0);
  }
  BasicTensor<T> out({channels, h, w});
  T* dst = out.data();
  for (const auto* p : parts) dst = std::copy(p->values().begin(), p->values().end(), dst);
  return out;
}

// Channel slice [begin, begin + count) of a c x h x w tensor.
template <typename T>
[[nodiscard]] BasicTensor<T> slice_channels(const BasicTensor<T>& t, std::size_t begin, std::size_t count) {
  require_rank(t, 3, "slice_channels");
  if (begin + count > t.dim(0)) throw ShapeError("slice_channels: range exceeds channel count");
  const std::size_t plane = t.dim(1) * t.dim(2);
  BasicTensor<T> out({count, t.dim(1), t.dim(2)});
  std::copy_n(t.data() + begin * plane, count * plane, out.data());
  return out;
}

// 2x2 mean pooling over the spatial axes of c x h x w (h, w even). Equal to
// bilinear resampling by 1/2 with half-pixel centers.
template <typename T>
[[nodiscard]] BasicTensor<T> downsample2x(const BasicTensor<T>& t) {
  require_rank(t, 3, "downsample2x");
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  if (h % 2 || w % 2) throw ShapeError("downsample2x: spatial dims must be even, got " + to_string(t.shape()));
  BasicTensor<T> out({c, h / 2, w / 2});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h / 2; ++y)
      for (std::size_t x = 0; x < w / 2; ++x)
        out(ch, y, x) = (t(ch, 2 * y, 2 * x) + t(ch, 2 * y, 2 * x + 1) + t(ch, 2 * y + 1, 2 * x) +
                         t(ch, 2 * y + 1, 2 * x + 1)) / T(4);
  return out;
}

// Bilinear 2x upsampling of c x h x w with half-pixel centers and edge clamping.
template <typename T>
[[nodiscard]] BasicTensor<T> upsample2x(const BasicTensor<T>& t) {
  require_rank(t, 3, "upsample2x");
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  BasicTensor<T> out({c, 2 * h, 2 * w});
  auto source = [](std::size_t o, std::size_t n, std::size_t& i0, std::size_t& i1, T& a) {
    const T pos = std::max(T(0), (static_cast<T>(o) + T(0.5)) / T(2) - T(0.5));
    i0 = std::min(static_cast<std::size_t>(pos), n - 1);
    i1 = std::min(i0 + 1, n - 1);
    a = pos - static_cast<T>(i0);
  };
  for (std::size_t y = 0; y < 2 * h; ++y) {
    std::size_t y0, y1;
    T ay;
    source(y, h, y0, y1, ay);
    for (std::size_t x = 0; x < 2 * w; ++x) {
      std::size_t x0, x1;
      T ax;
      source(x, w, x0, x1, ax);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T top = (T(1) - ax) * t(ch, y0, x0) + ax * t(ch, y0, x1);
        const T bottom = (T(1) - ax) * t(ch, y1, x0) + ax * t(ch, y1, x1);
        out(ch, y, x) = (T(1) - ay) * top + ay * bottom;
      }
    }
  }
  return out;
}

}  // namespace defom
