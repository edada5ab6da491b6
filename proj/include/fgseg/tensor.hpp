#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "fgseg/errors.hpp"

namespace fgseg {

// Shape of a rank-4 tensor in (batch, channels, rows, cols) order.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  friend bool operator==(const Shape&, const Shape&) = default;

  std::int64_t numel() const { return std::int64_t{n} * c * h * w; }
  std::int64_t spatial() const { return std::int64_t{h} * w; }

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }

  void validate() const {
    if (n < 1 || c < 1 || h < 1 || w < 1) {
      throw std::invalid_argument("tensor shape must have all dims >= 1, got " + str());
    }
  }
};

// Deterministic 64-bit generator (splitmix64). Same seed gives the same
// u64 stream on every platform; uniform/normal draws are derived from it
// (normal via Box-Muller, two uniforms per draw).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // (0,1] so the log is always finite.
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  std::uint64_t below(std::uint64_t bound) { return next_u64() % bound; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::uint64_t state_;
};

// Dense rank-4 tensor, row-major in (n,c,h,w) order. Scalar is float in
// standard mode and double in gradient-verification mode.
template <typename Scalar>
class Tensor {
 public:
  using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  Tensor() = default;

  explicit Tensor(Shape s) : shape_(s) {
    s.validate();
    data_.assign(static_cast<std::size_t>(s.numel()), Scalar{0});
  }

  static Tensor zeros(Shape s) { return Tensor(s); }

  static Tensor ones(Shape s) { return constant(s, Scalar{1}); }

  static Tensor constant(Shape s, Scalar k) {
    Tensor t(s);
    std::fill(t.data_.begin(), t.data_.end(), k);
    return t;
  }

  // N(0, 2/fan_in) with fan_in = c*h*w, the convolution convention for
  // weights stored as (out_ch, in_ch, kh, kw).
  static Tensor he_normal(Shape s, Rng& rng) {
    Tensor t(s);
    const double stddev = std::sqrt(2.0 / (static_cast<double>(s.c) * s.h * s.w));
    for (auto& v : t.data_) v = static_cast<Scalar>(stddev * rng.normal());
    return t;
  }

  // U(+-sqrt(6/(fan_in+fan_out))) with fan_in = c*h*w, fan_out = n*h*w.
  static Tensor glorot_uniform(Shape s, Rng& rng) {
    Tensor t(s);
    const double fan_in = static_cast<double>(s.c) * s.h * s.w;
    const double fan_out = static_cast<double>(s.n) * s.h * s.w;
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : t.data_) v = static_cast<Scalar>(rng.uniform(-limit, limit));
    return t;
  }

  static Tensor uniform(Shape s, Rng& rng, double lo, double hi) {
    Tensor t(s);
    for (auto& v : t.data_) v = static_cast<Scalar>(rng.uniform(lo, hi));
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  std::int64_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::int64_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  Scalar& operator()(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  Scalar& operator[](std::int64_t i) { return data_[i]; }
  Scalar operator[](std::int64_t i) const { return data_[i]; }

  ArrayMap array() { return ArrayMap(data_.data(), size()); }
  ConstArrayMap array() const { return ConstArrayMap(data_.data(), size()); }

  // Flat view of one (n,c) spatial slice.
  ArrayMap slice_array(int n, int c) {
    return ArrayMap(data_.data() + offset(n, c, 0, 0), shape_.spatial());
  }
  ConstArrayMap slice_array(int n, int c) const {
    return ConstArrayMap(data_.data() + offset(n, c, 0, 0), shape_.spatial());
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (std::int64_t i = 0; i < size(); ++i) out[i] = static_cast<T>(data_[i]);
    return out;
  }

  bool all_finite() const {
    for (const auto& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

 private:
  Shape shape_{};
  std::vector<Scalar> data_;
};

template <typename S>
bool bit_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (!(a.shape() == b.shape())) return false;
  return std::memcmp(a.data(), b.data(), sizeof(S) * a.size()) == 0;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (!(a.shape() == b.shape())) {
    throw std::invalid_argument("max_abs_diff: shape mismatch " + a.shape().str() +
                                " vs " + b.shape().str());
  }
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

namespace detail {

enum class Broadcast { Same, Channel };

inline Broadcast broadcast_kind(const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::Same;
  if (b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1) return Broadcast::Channel;
  throw std::invalid_argument("incompatible shapes for elementwise op: " + a.str() +
                              " vs " + b.str());
}

}  // namespace detail

// Pointwise add; b may also be a per-channel vector shaped (n,c,1,1).
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out(a.shape());
  if (detail::broadcast_kind(a.shape(), b.shape()) == detail::Broadcast::Same) {
    out.array() = a.array() + b.array();
  } else {
    for (int n = 0; n < a.shape().n; ++n) {
      for (int c = 0; c < a.shape().c; ++c) {
        out.slice_array(n, c) = a.slice_array(n, c) + b(n, c, 0, 0);
      }
    }
  }
  return out;
}

// Pointwise multiply with the same broadcast rule as add.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out(a.shape());
  if (detail::broadcast_kind(a.shape(), b.shape()) == detail::Broadcast::Same) {
    out.array() = a.array() * b.array();
  } else {
    for (int n = 0; n < a.shape().n; ++n) {
      for (int c = 0; c < a.shape().c; ++c) {
        out.slice_array(n, c) = a.slice_array(n, c) * b(n, c, 0, 0);
      }
    }
  }
  return out;
}

// Concatenate along the channel axis; parts must share n, h, w.
template <typename S>
Tensor<S> concat_channels(const std::vector<const Tensor<S>*>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no parts");
  const Shape& base = parts.front()->shape();
  int total_c = 0;
  for (const auto* p : parts) {
    const Shape& s = p->shape();
    if (s.n != base.n || s.h != base.h || s.w != base.w) {
      throw std::invalid_argument("concat_channels: mismatched dims " + s.str() +
                                  " vs " + base.str());
    }
    total_c += s.c;
  }
  Tensor<S> out({base.n, total_c, base.h, base.w});
  for (int n = 0; n < base.n; ++n) {
    S* dst = out.data() + out.offset(n, 0, 0, 0);
    for (const auto* p : parts) {
      const std::int64_t block = static_cast<std::int64_t>(p->shape().c) * base.spatial();
      std::copy(p->data() + p->offset(n, 0, 0, 0),
                p->data() + p->offset(n, 0, 0, 0) + block, dst);
      dst += block;
    }
  }
  return out;
}

template <typename S>
Tensor<S> slice_channels(const Tensor<S>& x, int c_begin, int c_end) {
  const Shape& s = x.shape();
  if (c_begin < 0 || c_end > s.c || c_begin >= c_end) {
    throw std::invalid_argument("slice_channels: bad range [" + std::to_string(c_begin) +
                                "," + std::to_string(c_end) + ") for c=" + std::to_string(s.c));
  }
  Tensor<S> out({s.n, c_end - c_begin, s.h, s.w});
  const std::int64_t block = static_cast<std::int64_t>(c_end - c_begin) * s.spatial();
  for (int n = 0; n < s.n; ++n) {
    std::copy(x.data() + x.offset(n, c_begin, 0, 0),
              x.data() + x.offset(n, c_begin, 0, 0) + block,
              out.data() + out.offset(n, 0, 0, 0));
  }
  return out;
}

template <typename S>
struct Moments {
  Tensor<S> mean;  // (n,c,1,1)
  Tensor<S> var;   // (n,c,1,1), biased (divide by h*w)
};

template <typename S>
Moments<S> channel_moments(const Tensor<S>& x) {
  const Shape& s = x.shape();
  Moments<S> m{Tensor<S>({s.n, s.c, 1, 1}), Tensor<S>({s.n, s.c, 1, 1})};
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const auto slice = x.slice_array(n, c);
      const S mean = slice.mean();
      m.mean(n, c, 0, 0) = mean;
      m.var(n, c, 0, 0) = (slice - mean).square().mean();
    }
  }
  return m;
}

}  // namespace fgseg
