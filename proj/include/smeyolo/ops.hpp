#pragma once

#include <cstddef>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace sme {

struct Padding {
  std::size_t rows = 0;
  std::size_t cols = 0;
  friend bool operator==(const Padding&, const Padding&) = default;
};

/// Convolution parameters. The kernel is laid out (out_c, in_c / groups, kh, kw).
/// Depthwise convolution is the case groups == in_c == out_c.
template <typename T>
struct ConvParams {
  Tensor<T> kernel;
  std::optional<Tensor<T>> bias;
  std::size_t groups = 1;
  Padding padding;

  std::size_t out_channels() const { return kernel.dims()[0]; }
  std::size_t in_per_group() const { return kernel.dims()[1]; }
  std::size_t in_channels() const { return kernel.dims()[1] * groups; }
  std::size_t kernel_h() const { return kernel.dims()[2]; }
  std::size_t kernel_w() const { return kernel.dims()[3]; }
  bool depthwise() const { return groups > 1 && in_per_group() == 1 && out_channels() == groups; }

  void validate() const {
    if (kernel.rank() != 4) throw DimensionError("conv kernel must be rank 4, got " + dims_to_string(kernel.dims()));
    if (groups == 0) throw DimensionError("conv groups must be positive");
    if (out_channels() % groups != 0)
      throw DimensionError("conv out channels " + std::to_string(out_channels()) + " not divisible by groups " +
                           std::to_string(groups));
    if (bias && (bias->rank() != 1 || bias->dims()[0] != out_channels()))
      throw DimensionError("conv bias shape " + dims_to_string(bias->dims()) + " does not match out channels " +
                           std::to_string(out_channels()));
  }

  static ConvParams dense(std::size_t in_c, std::size_t out_c, std::size_t kh, std::size_t kw, Padding pad,
                          bool with_bias = true) {
    ConvParams p;
    p.kernel = Tensor<T>(Dims{out_c, in_c, kh, kw});
    if (with_bias) p.bias = Tensor<T>(Dims{out_c});
    p.padding = pad;
    return p;
  }

  static ConvParams depthwise_of(std::size_t channels, std::size_t kh, std::size_t kw, Padding pad,
                                 bool with_bias = true) {
    ConvParams p;
    p.kernel = Tensor<T>(Dims{channels, 1, kh, kw});
    if (with_bias) p.bias = Tensor<T>(Dims{channels});
    p.groups = channels;
    p.padding = pad;
    return p;
  }
};

template <typename T>
struct ConvGrads {
  Tensor<T> grad_x;
  Tensor<T> grad_kernel;
  std::optional<Tensor<T>> grad_bias;
};

namespace detail {

using sidx = std::ptrdiff_t;

// Range of output columns [lo, hi) whose tap (kx) lands inside the input row.
inline void valid_range(sidx out_len, sidx in_len, sidx k, sidx pad, sidx stride, sidx& lo, sidx& hi) {
  const sidx first = pad - k;  // ox * stride >= pad - k
  lo = first > 0 ? std::min(out_len, (first + stride - 1) / stride) : 0;
  const sidx last = in_len - 1 + pad - k;  // ox * stride <= in_len - 1 + pad - k
  hi = last < 0 ? 0 : std::min(out_len, last / stride + 1);
  if (hi < lo) hi = lo;
}

// Fixed-order dot product with eight independent partial sums. The lanes are
// combined in a fixed order, so the result does not depend on vector width.
template <typename T>
T dot_strided(const T* a, const T* b, sidx n, sidx b_stride) {
  if (b_stride == 1) {
    T acc[8] = {};
    sidx i = 0;
    for (; i + 8 <= n; i += 8)
      for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    T tail = 0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
  }
  T s = 0;
  for (sidx i = 0; i < n; ++i) s += a[i] * b[i * b_stride];
  return s;
}

template <typename T>
T sum_fixed(const T* a, sidx n) {
  T acc[8] = {};
  sidx i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += a[i + l];
  T tail = 0;
  for (; i < n; ++i) tail += a[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

struct ConvGeometry {
  sidx n, in_c, h, w, out_c, out_h, out_w, kh, kw, ph, pw, stride, groups, in_pg, out_pg;
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const ConvParams<T>& p, std::size_t stride) {
  require_rank4(x, "conv2d input");
  p.validate();
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (x.c() % p.groups != 0)
    throw DimensionError("conv2d: input channels " + std::to_string(x.c()) + " not divisible by groups " +
                         std::to_string(p.groups));
  if (x.c() != p.in_channels())
    throw DimensionError("conv2d: input has " + std::to_string(x.c()) + " channels, kernel expects " +
                         std::to_string(p.in_channels()));
  ConvGeometry g{};
  g.n = static_cast<sidx>(x.n());
  g.in_c = static_cast<sidx>(x.c());
  g.h = static_cast<sidx>(x.h());
  g.w = static_cast<sidx>(x.w());
  g.out_c = static_cast<sidx>(p.out_channels());
  g.kh = static_cast<sidx>(p.kernel_h());
  g.kw = static_cast<sidx>(p.kernel_w());
  g.ph = static_cast<sidx>(p.padding.rows);
  g.pw = static_cast<sidx>(p.padding.cols);
  g.stride = static_cast<sidx>(stride);
  g.groups = static_cast<sidx>(p.groups);
  g.in_pg = g.in_c / g.groups;
  g.out_pg = g.out_c / g.groups;
  const sidx span_h = g.h + 2 * g.ph - g.kh;
  const sidx span_w = g.w + 2 * g.pw - g.kw;
  if (span_h < 0 || span_w < 0)
    throw DimensionError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                         " larger than padded input " + dims_to_string(x.dims()));
  g.out_h = span_h / g.stride + 1;
  g.out_w = span_w / g.stride + 1;
  return g;
}

// Patch matrix of one group of image n: row (icg, ky, kx), column (oy, ox),
// zero where the tap falls in the padding. A 1x1, stride-1, unpadded conv
// reads the input planes directly.
template <typename T>
const T* im2col(const Tensor<T>& x, const ConvGeometry& g, sidx n, sidx group, std::vector<T>& buf) {
  const T* base = x.plane(static_cast<std::size_t>(n), static_cast<std::size_t>(group * g.in_pg));
  if (g.kh == 1 && g.kw == 1 && g.stride == 1 && g.ph == 0 && g.pw == 0) return base;
  const sidx hw = g.out_h * g.out_w;
  buf.resize(static_cast<std::size_t>(g.in_pg * g.kh * g.kw * hw));
  T* col = buf.data();
  for (sidx icg = 0; icg < g.in_pg; ++icg) {
    const T* in = base + icg * g.h * g.w;
    for (sidx ky = 0; ky < g.kh; ++ky) {
      sidx oy_lo, oy_hi;
      valid_range(g.out_h, g.h, ky, g.ph, g.stride, oy_lo, oy_hi);
      for (sidx kx = 0; kx < g.kw; ++kx, col += hw) {
        sidx ox_lo, ox_hi;
        valid_range(g.out_w, g.w, kx, g.pw, g.stride, ox_lo, ox_hi);
        std::fill(col, col + oy_lo * g.out_w, T(0));
        std::fill(col + oy_hi * g.out_w, col + hw, T(0));
        for (sidx oy = oy_lo; oy < oy_hi; ++oy) {
          const T* irow = in + (oy * g.stride + ky - g.ph) * g.w + kx - g.pw;
          T* crow = col + oy * g.out_w;
          std::fill(crow, crow + ox_lo, T(0));
          std::fill(crow + ox_hi, crow + g.out_w, T(0));
          if (g.stride == 1) {
            std::copy(irow + ox_lo, irow + ox_hi, crow + ox_lo);
          } else {
            for (sidx ox = ox_lo; ox < ox_hi; ++ox) crow[ox] = irow[ox * g.stride];
          }
        }
      }
    }
  }
  return buf.data();
}

// Adds a patch-matrix gradient back onto the input planes of one group.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* base) {
  const sidx hw = g.out_h * g.out_w;
  for (sidx icg = 0; icg < g.in_pg; ++icg) {
    T* in = base + icg * g.h * g.w;
    for (sidx ky = 0; ky < g.kh; ++ky) {
      sidx oy_lo, oy_hi;
      valid_range(g.out_h, g.h, ky, g.ph, g.stride, oy_lo, oy_hi);
      for (sidx kx = 0; kx < g.kw; ++kx, col += hw) {
        sidx ox_lo, ox_hi;
        valid_range(g.out_w, g.w, kx, g.pw, g.stride, ox_lo, ox_hi);
        for (sidx oy = oy_lo; oy < oy_hi; ++oy) {
          T* irow = in + (oy * g.stride + ky - g.ph) * g.w + kx - g.pw;
          const T* crow = col + oy * g.out_w;
          if (g.stride == 1) {
            for (sidx ox = ox_lo; ox < ox_hi; ++ox) irow[ox] += crow[ox];
          } else {
            for (sidx ox = ox_lo; ox < ox_hi; ++ox) irow[ox * g.stride] += crow[ox];
          }
        }
      }
    }
  }
}

inline constexpr sidx kRowBlock = 4;    // output channels or taps per micro-tile
inline constexpr sidx kPixelBlock = 16;  // pixels per micro-tile

// out[r][p] = init[r] + sum_k w[r][k] * src[k][p] for rows r of one group,
// with k added in ascending order. `w(r, k)` gives the weight; src rows are
// `src_stride` apart. Used by the forward pass (rows = output channels,
// k = taps) and the input gradient (rows = taps, k = output channels).
template <typename T, typename W, typename Init>
void blocked_matmul(sidx rows, sidx inner, sidx hw, const T* src, sidx src_stride, W w, Init init,
                    T* dst, sidx dst_stride) {
  for (sidx p0 = 0; p0 < hw; p0 += kPixelBlock) {
    const sidx len = std::min(kPixelBlock, hw - p0);
    sidx r0 = 0;
    if (len == kPixelBlock) {
      for (; r0 + kRowBlock <= rows; r0 += kRowBlock) {
#if defined(__GNUC__)
        // Two 8-lane vectors per row, kept in registers across the k loop.
        typedef T Vec __attribute__((vector_size(8 * sizeof(T))));
        Vec acc[kRowBlock][2];
        for (sidx r = 0; r < kRowBlock; ++r) {
          const T v0 = init(r0 + r);
          for (int h = 0; h < 2; ++h) acc[r][h] = Vec{} + v0;
        }
        for (sidx k = 0; k < inner; ++k) {
          Vec s0, s1;
          std::memcpy(&s0, src + k * src_stride + p0, sizeof(Vec));
          std::memcpy(&s1, src + k * src_stride + p0 + 8, sizeof(Vec));
          for (sidx r = 0; r < kRowBlock; ++r) {
            const T wv = w(r0 + r, k);
            acc[r][0] += wv * s0;
            acc[r][1] += wv * s1;
          }
        }
        for (sidx r = 0; r < kRowBlock; ++r) std::memcpy(dst + (r0 + r) * dst_stride + p0, acc[r], sizeof acc[r]);
#else
        T acc[kRowBlock][kPixelBlock];
        for (sidx r = 0; r < kRowBlock; ++r)
          for (sidx i = 0; i < kPixelBlock; ++i) acc[r][i] = init(r0 + r);
        for (sidx k = 0; k < inner; ++k) {
          const T* sp = src + k * src_stride + p0;
          for (sidx r = 0; r < kRowBlock; ++r) {
            const T wv = w(r0 + r, k);
            for (sidx i = 0; i < kPixelBlock; ++i) acc[r][i] += wv * sp[i];
          }
        }
        for (sidx r = 0; r < kRowBlock; ++r)
          for (sidx i = 0; i < kPixelBlock; ++i) dst[(r0 + r) * dst_stride + p0 + i] = acc[r][i];
#endif
      }
    }
    for (; r0 < rows; ++r0) {
      T acc[kPixelBlock];
      for (sidx i = 0; i < len; ++i) acc[i] = init(r0);
      for (sidx k = 0; k < inner; ++k) {
        const T* sp = src + k * src_stride + p0;
        const T wv = w(r0, k);
        for (sidx i = 0; i < len; ++i) acc[i] += wv * sp[i];
      }
      for (sidx i = 0; i < len; ++i) dst[r0 * dst_stride + p0 + i] = acc[i];
    }
  }
}

// Each output value is bias, then the taps added in (icg, ky, kx) order.
template <typename T>
Tensor<T> conv_forward_impl(const Tensor<T>& x, const ConvParams<T>& p, std::size_t stride) {
  const ConvGeometry g = conv_geometry(x, p, stride);
  require_finite(x, "conv2d input");
  Tensor<T> y(Dims{static_cast<std::size_t>(g.n), static_cast<std::size_t>(g.out_c), static_cast<std::size_t>(g.out_h),
                   static_cast<std::size_t>(g.out_w)});
  const T* kernel = p.kernel.data();
  const T* bias = p.bias ? p.bias->data() : nullptr;
  const sidx hw = g.out_h * g.out_w, taps = g.in_pg * g.kh * g.kw;
  std::vector<T> buf;
  for (sidx n = 0; n < g.n; ++n) {
    for (sidx group = 0; group < g.groups; ++group) {
      const T* col = im2col(x, g, n, group, buf);
      const sidx oc0 = group * g.out_pg;
      const T* kp = kernel + oc0 * taps;
      blocked_matmul<T>(
          g.out_pg, taps, hw, col, hw, [&](sidx r, sidx k) { return kp[r * taps + k]; },
          [&](sidx r) { return bias ? bias[oc0 + r] : T(0); },
          y.plane(static_cast<std::size_t>(n), static_cast<std::size_t>(oc0)), hw);
    }
  }
  return y;
}

// gk[r][c] += fixed-order dot(a[r], b[c]) over hw for a block of rows and
// columns; matches dot_strided with unit stride.
template <typename T>
void blocked_dots(sidx rows, sidx cols, sidx hw, const T* a, const T* b, T* out, sidx out_stride) {
  constexpr sidx RB = 4, CB = 2, L = 8;
  sidx r0 = 0;
  for (; r0 + RB <= rows; r0 += RB) {
    sidx c0 = 0;
    for (; c0 + CB <= cols; c0 += CB) {
      T acc[RB][CB][L] = {};
      sidx i = 0;
      for (; i + L <= hw; i += L)
        for (sidx r = 0; r < RB; ++r)
          for (sidx c = 0; c < CB; ++c)
            for (sidx l = 0; l < L; ++l) acc[r][c][l] += a[(r0 + r) * hw + i + l] * b[(c0 + c) * hw + i + l];
      for (sidx r = 0; r < RB; ++r)
        for (sidx c = 0; c < CB; ++c) {
          T tail = 0;
          for (sidx j = i; j < hw; ++j) tail += a[(r0 + r) * hw + j] * b[(c0 + c) * hw + j];
          const T* v = acc[r][c];
          out[(r0 + r) * out_stride + c0 + c] += ((v[0] + v[1]) + (v[2] + v[3])) + ((v[4] + v[5]) + (v[6] + v[7])) + tail;
        }
    }
    for (; c0 < cols; ++c0)
      for (sidx r = 0; r < RB; ++r) out[(r0 + r) * out_stride + c0] += dot_strided(a + (r0 + r) * hw, b + c0 * hw, hw, 1);
  }
  for (; r0 < rows; ++r0)
    for (sidx c = 0; c < cols; ++c) out[r0 * out_stride + c] += dot_strided(a + r0 * hw, b + c * hw, hw, 1);
}

template <typename T>
ConvGrads<T> conv_backward_impl(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_out,
                                std::size_t stride) {
  const ConvGeometry g = conv_geometry(x, p, stride);
  const Dims expected{static_cast<std::size_t>(g.n), static_cast<std::size_t>(g.out_c),
                      static_cast<std::size_t>(g.out_h), static_cast<std::size_t>(g.out_w)};
  if (grad_out.dims() != expected)
    throw DimensionError("conv2d_backward: grad_out " + dims_to_string(grad_out.dims()) + " expected " +
                         dims_to_string(expected));
  ConvGrads<T> r;
  r.grad_x = Tensor<T>(x.dims());
  r.grad_kernel = Tensor<T>(p.kernel.dims());
  if (p.bias) r.grad_bias = Tensor<T>(p.bias->dims());
  const T* kernel = p.kernel.data();
  T* gk = r.grad_kernel.data();
  const sidx hw = g.out_h * g.out_w, taps = g.in_pg * g.kh * g.kw;
  const bool direct = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.ph == 0 && g.pw == 0;
  std::vector<T> buf, gcol(static_cast<std::size_t>(taps * hw));
  for (sidx n = 0; n < g.n; ++n) {
    for (sidx group = 0; group < g.groups; ++group) {
      const T* col = im2col(x, g, n, group, buf);
      const sidx oc0 = group * g.out_pg;
      const T* go = grad_out.plane(static_cast<std::size_t>(n), static_cast<std::size_t>(oc0));
      if (r.grad_bias)
        for (sidx ocg = 0; ocg < g.out_pg; ++ocg) (*r.grad_bias)[static_cast<std::size_t>(oc0 + ocg)] += sum_fixed(go + ocg * hw, hw);
      blocked_dots(g.out_pg, taps, hw, go, col, gk + oc0 * taps, taps);
      const T* kp = kernel + oc0 * taps;
      blocked_matmul<T>(
          taps, g.out_pg, hw, go, hw, [&](sidx k, sidx oc) { return kp[oc * taps + k]; }, [](sidx) { return T(0); },
          gcol.data(), hw);
      T* gbase = r.grad_x.plane(static_cast<std::size_t>(n), static_cast<std::size_t>(oc0 / g.out_pg * g.in_pg));
      if (direct) {
        for (sidx i = 0; i < taps * hw; ++i) gbase[i] += gcol[static_cast<std::size_t>(i)];
      } else {
        col2im_add(gcol.data(), g, gbase);
      }
    }
  }
  return r;
}

}  // namespace detail

/// Stride-1 convolution with zero padding.
/// Output is (n, out_c, h + 2*ph - kh + 1, w + 2*pw - kw + 1).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  return detail::conv_forward_impl(x, p, 1);
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_out) {
  return detail::conv_backward_impl(x, p, grad_out, 1);
}

/// Stride-2 convolution used only by the detector's downsampling stem.
template <typename T>
Tensor<T> conv2d_stride2(const Tensor<T>& x, const ConvParams<T>& p) {
  return detail::conv_forward_impl(x, p, 2);
}

template <typename T>
ConvGrads<T> conv2d_stride2_backward(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_out) {
  return detail::conv_backward_impl(x, p, grad_out, 2);
}

/// Multiply-accumulate count of one forward pass.
inline std::uint64_t conv_macs(std::size_t out_c, std::size_t out_h, std::size_t out_w, std::size_t in_per_group,
                               std::size_t kh, std::size_t kw) {
  return static_cast<std::uint64_t>(out_c) * out_h * out_w * in_per_group * kh * kw;
}

// ---------------------------------------------------------------------------
// 2x upsampling.
//
// Bilinear uses half-pixel centers: output index u maps to source coordinate
// s = (u + 0.5) / 2 - 0.5, clamped to [0, len - 1]. With i0 = floor(s),
// i1 = min(i0 + 1, len - 1) and f = s - i0, the value is (1 - f) * v[i0] + f * v[i1],
// applied separably along rows then columns. For a length-2 row [0, 2] this
// gives [0, 0.5, 1.5, 2].

enum class UpsampleMode { nearest, bilinear };

inline const char* to_string(UpsampleMode m) { return m == UpsampleMode::nearest ? "nearest" : "bilinear"; }

namespace detail {

struct Tap {
  std::size_t i0, i1;
  double f;
};

inline std::vector<Tap> bilinear_taps(std::size_t len) {
  std::vector<Tap> taps(2 * len);
  const double hi = static_cast<double>(len - 1);
  for (std::size_t u = 0; u < 2 * len; ++u) {
    double s = (static_cast<double>(u) + 0.5) / 2.0 - 0.5;
    s = std::clamp(s, 0.0, hi);
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    taps[u] = {i0, std::min(i0 + 1, len - 1), s - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x, UpsampleMode mode) {
  require_rank4(x, "upsample2x input");
  require_finite(x, "upsample2x input");
  const std::size_t H = x.h(), W = x.w();
  if (H == 0 || W == 0) throw DimensionError("upsample2x: empty spatial dims");
  Tensor<T> y(x.n(), x.c(), 2 * H, 2 * W);
  if (mode == UpsampleMode::nearest) {
    for (std::size_t n = 0; n < x.n(); ++n)
      for (std::size_t c = 0; c < x.c(); ++c) {
        const T* in = x.plane(n, c);
        T* out = y.plane(n, c);
        for (std::size_t oy = 0; oy < 2 * H; ++oy)
          for (std::size_t ox = 0; ox < 2 * W; ++ox) out[oy * 2 * W + ox] = in[(oy / 2) * W + ox / 2];
      }
    return y;
  }
  const auto ty = detail::bilinear_taps(H);
  const auto tx = detail::bilinear_taps(W);
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c) {
      const T* in = x.plane(n, c);
      T* out = y.plane(n, c);
      for (std::size_t oy = 0; oy < 2 * H; ++oy) {
        const auto [y0, y1, fy] = ty[oy];
        for (std::size_t ox = 0; ox < 2 * W; ++ox) {
          const auto [x0, x1, fx] = tx[ox];
          const T top = static_cast<T>((1 - fx) * in[y0 * W + x0] + fx * in[y0 * W + x1]);
          const T bot = static_cast<T>((1 - fx) * in[y1 * W + x0] + fx * in[y1 * W + x1]);
          out[oy * 2 * W + ox] = static_cast<T>((1 - fy) * top + fy * bot);
        }
      }
    }
  return y;
}

template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& grad_out, const Dims& input_dims, UpsampleMode mode) {
  Tensor<T> gx(input_dims);
  const std::size_t H = gx.h(), W = gx.w();
  if (grad_out.dims() != Dims{gx.n(), gx.c(), 2 * H, 2 * W})
    throw DimensionError("upsample2x_backward: grad shape " + dims_to_string(grad_out.dims()));
  if (mode == UpsampleMode::nearest) {
    for (std::size_t n = 0; n < gx.n(); ++n)
      for (std::size_t c = 0; c < gx.c(); ++c) {
        const T* g = grad_out.plane(n, c);
        T* out = gx.plane(n, c);
        for (std::size_t oy = 0; oy < 2 * H; ++oy)
          for (std::size_t ox = 0; ox < 2 * W; ++ox) out[(oy / 2) * W + ox / 2] += g[oy * 2 * W + ox];
      }
    return gx;
  }
  const auto ty = detail::bilinear_taps(H);
  const auto tx = detail::bilinear_taps(W);
  for (std::size_t n = 0; n < gx.n(); ++n)
    for (std::size_t c = 0; c < gx.c(); ++c) {
      const T* g = grad_out.plane(n, c);
      T* out = gx.plane(n, c);
      for (std::size_t oy = 0; oy < 2 * H; ++oy) {
        const auto [y0, y1, fy] = ty[oy];
        for (std::size_t ox = 0; ox < 2 * W; ++ox) {
          const auto [x0, x1, fx] = tx[ox];
          const double v = g[oy * 2 * W + ox];
          out[y0 * W + x0] += static_cast<T>((1 - fy) * (1 - fx) * v);
          out[y0 * W + x1] += static_cast<T>((1 - fy) * fx * v);
          out[y1 * W + x0] += static_cast<T>(fy * (1 - fx) * v);
          out[y1 * W + x1] += static_cast<T>(fy * fx * v);
        }
      }
    }
  return gx;
}

// ---------------------------------------------------------------------------
// Batch normalization.

enum class BnMode { train, eval };

template <typename T>
struct BatchNormState {
  Tensor<T> gamma, beta, running_mean, running_var;
  T epsilon = T(1e-5);
  T momentum = T(0.1);
  BnMode mode = BnMode::train;

  static BatchNormState identity(std::size_t channels) {
    BatchNormState s;
    s.gamma = Tensor<T>(Dims{channels}, T(1));
    s.beta = Tensor<T>(Dims{channels});
    s.running_mean = Tensor<T>(Dims{channels});
    s.running_var = Tensor<T>(Dims{channels}, T(1));
    return s;
  }

  std::size_t channels() const { return gamma.size(); }

  void validate() const {
    const std::size_t c = channels();
    if (beta.size() != c || running_mean.size() != c || running_var.size() != c)
      throw DimensionError("batchnorm: per-channel arrays disagree in length");
    for (T v : running_var.values())
      if (!(v >= 0)) throw NumericError("batchnorm: negative or NaN running variance");
  }
};

/// Per-forward values needed by the backward pass and the running-stat update.
template <typename T>
struct BatchNormCache {
  BnMode mode = BnMode::train;
  Tensor<T> normalized;  // (x - mean) * inv_std
  std::vector<T> mean, var, inv_std;
  std::size_t count = 0;  // elements per channel
};

/// Pure forward pass; running statistics are left untouched.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const BatchNormState<T>& s, BatchNormCache<T>* cache = nullptr) {
  require_rank4(x, "batchnorm input");
  s.validate();
  if (x.c() != s.channels())
    throw DimensionError("batchnorm: input has " + std::to_string(x.c()) + " channels, state has " +
                         std::to_string(s.channels()));
  require_finite(x, "batchnorm input");
  const std::size_t C = x.c(), N = x.n(), HW = x.h() * x.w();
  const std::size_t count = N * HW;
  if (s.mode == BnMode::train && count <= 1)
    throw DimensionError("batchnorm: train mode needs more than one value per channel, got " + std::to_string(count));
  std::vector<T> mean(C), var(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (s.mode == BnMode::train) {
      T sum = 0;
      for (std::size_t n = 0; n < N; ++n) sum += detail::sum_fixed(x.plane(n, c), static_cast<detail::sidx>(HW));
      const T m = sum / static_cast<T>(count);
      T sq = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.plane(n, c);
        for (std::size_t i = 0; i < HW; ++i) sq += (p[i] - m) * (p[i] - m);
      }
      mean[c] = m;
      var[c] = sq / static_cast<T>(count);
    } else {
      mean[c] = s.running_mean[c];
      var[c] = s.running_var[c];
    }
    inv_std[c] = T(1) / std::sqrt(var[c] + s.epsilon);
  }
  Tensor<T> y(x.dims());
  Tensor<T> xhat;
  if (cache) xhat = Tensor<T>(x.dims());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* in = x.plane(n, c);
      T* out = y.plane(n, c);
      const T m = mean[c], is = inv_std[c], g = s.gamma[c], b = s.beta[c];
      T* xh = cache ? xhat.plane(n, c) : nullptr;
      for (std::size_t i = 0; i < HW; ++i) {
        const T v = (in[i] - m) * is;
        if (xh) xh[i] = v;
        out[i] = g * v + b;
      }
    }
  if (cache) {
    cache->mode = s.mode;
    cache->normalized = std::move(xhat);
    cache->mean = std::move(mean);
    cache->var = std::move(var);
    cache->inv_std = std::move(inv_std);
    cache->count = count;
  }
  return y;
}

/// Moves running statistics toward the batch statistics in `cache`
/// (unbiased variance, as is conventional).
template <typename T>
void batchnorm_update_running(BatchNormState<T>& s, const BatchNormCache<T>& cache) {
  if (cache.mode != BnMode::train) return;
  const T m = s.momentum;
  const T unbias = static_cast<T>(cache.count) / static_cast<T>(cache.count - 1);
  for (std::size_t c = 0; c < s.channels(); ++c) {
    s.running_mean[c] = (1 - m) * s.running_mean[c] + m * cache.mean[c];
    s.running_var[c] = (1 - m) * s.running_var[c] + m * cache.var[c] * unbias;
  }
}

/// Forward pass that also updates running statistics in train mode.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormState<T>& s) {
  BatchNormCache<T> cache;
  Tensor<T> y = batchnorm_forward(x, s, &cache);
  batchnorm_update_running(s, cache);
  return y;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> grad_x, grad_gamma, grad_beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& grad_out, const BatchNormState<T>& s,
                                     const BatchNormCache<T>& cache) {
  require_same_shape(grad_out, cache.normalized, "batchnorm_backward");
  const std::size_t C = grad_out.c(), N = grad_out.n(), HW = grad_out.h() * grad_out.w();
  BatchNormGrads<T> r{Tensor<T>(grad_out.dims()), Tensor<T>(Dims{C}), Tensor<T>(Dims{C})};
  for (std::size_t c = 0; c < C; ++c) {
    T sum_g = 0, sum_gx = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* g = grad_out.plane(n, c);
      const T* xh = cache.normalized.plane(n, c);
      sum_g += detail::sum_fixed(g, static_cast<detail::sidx>(HW));
      sum_gx += detail::dot_strided(g, xh, static_cast<detail::sidx>(HW), 1);
    }
    r.grad_beta[c] = sum_g;
    r.grad_gamma[c] = sum_gx;
    const T scale = s.gamma[c] * cache.inv_std[c];
    if (cache.mode == BnMode::train) {
      const T mg = sum_g / static_cast<T>(cache.count);
      const T mgx = sum_gx / static_cast<T>(cache.count);
      for (std::size_t n = 0; n < N; ++n) {
        const T* g = grad_out.plane(n, c);
        const T* xh = cache.normalized.plane(n, c);
        T* gx = r.grad_x.plane(n, c);
        for (std::size_t i = 0; i < HW; ++i) gx[i] = scale * (g[i] - mg - xh[i] * mgx);
      }
    } else {
      for (std::size_t n = 0; n < N; ++n) {
        const T* g = grad_out.plane(n, c);
        T* gx = r.grad_x.plane(n, c);
        for (std::size_t i = 0; i < HW; ++i) gx[i] = scale * g[i];
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Pointwise ops.

enum class Activation { relu, sigmoid };
enum class Eltwise { mul, add };

template <typename T>
T sigmoid(T v) {
  // Separate branches keep exp() from overflowing for large |v|.
  if (v >= 0) {
    const T e = std::exp(-v);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  require_finite(x, "activation input");
  Tensor<T> y(x.dims());
  const auto in = x.values();
  auto out = y.values();
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0 ? in[i] : T(0);
  } else {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = sigmoid(in[i]);
  }
  return y;
}

/// `x` is the forward input and `y` the forward output.
template <typename T>
Tensor<T> activation_backward(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& grad_out, Activation kind) {
  require_same_shape(x, grad_out, "activation_backward");
  require_same_shape(y, grad_out, "activation_backward");
  Tensor<T> gx(x.dims());
  const auto g = grad_out.values();
  auto out = gx.values();
  if (kind == Activation::relu) {
    const auto in = x.values();
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = in[i] > 0 ? g[i] : T(0);
  } else {
    const auto s = y.values();
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] * s[i] * (T(1) - s[i]);
  }
  return gx;
}

template <typename T>
Tensor<T> eltwise(const Tensor<T>& a, const Tensor<T>& b, Eltwise kind) {
  require_same_shape(a, b, "eltwise");
  Tensor<T> y(a.dims());
  const auto av = a.values();
  const auto bv = b.values();
  auto out = y.values();
  if (kind == Eltwise::mul) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> eltwise_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& grad_out,
                                                 Eltwise kind) {
  require_same_shape(a, b, "eltwise_backward");
  require_same_shape(a, grad_out, "eltwise_backward");
  if (kind == Eltwise::add) return {grad_out, grad_out};
  Tensor<T> ga(a.dims()), gb(a.dims());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ga[i] = grad_out[i] * b[i];
    gb[i] = grad_out[i] * a[i];
  }
  return {std::move(ga), std::move(gb)};
}

/// Concatenates along the channel axis, preserving operand order.
template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& xs) {
  if (xs.empty()) throw DimensionError("concat_channels: no operands");
  for (const auto* x : xs) require_rank4(*x, "concat_channels operand");
  const std::size_t N = xs[0]->n(), H = xs[0]->h(), W = xs[0]->w();
  std::size_t C = 0;
  for (const auto* x : xs) {
    if (x->n() != N || x->h() != H || x->w() != W)
      throw DimensionError("concat_channels: operand " + dims_to_string(x->dims()) + " disagrees with " +
                           dims_to_string(xs[0]->dims()) + " on (n,h,w)");
    C += x->c();
  }
  Tensor<T> y(N, C, H, W);
  const std::size_t HW = H * W;
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t c0 = 0;
    for (const auto* x : xs) {
      std::copy(x->plane(n, 0), x->plane(n, 0) + x->c() * HW, y.plane(n, c0));
      c0 += x->c();
    }
  }
  return y;
}

template <typename T>
Tensor<T> concat_channels(std::initializer_list<std::reference_wrapper<const Tensor<T>>> xs) {
  std::vector<const Tensor<T>*> ptrs;
  for (const auto& x : xs) ptrs.push_back(&x.get());
  return concat_channels(ptrs);
}

/// Inverse of concat_channels; used for its backward pass.
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<std::size_t>& sizes) {
  require_rank4(x, "split_channels input");
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  if (total != x.c())
    throw DimensionError("split_channels: sizes sum to " + std::to_string(total) + ", tensor has " +
                         std::to_string(x.c()) + " channels");
  std::vector<Tensor<T>> parts;
  const std::size_t HW = x.h() * x.w();
  std::size_t c0 = 0;
  for (auto s : sizes) {
    Tensor<T> p(x.n(), s, x.h(), x.w());
    for (std::size_t n = 0; n < x.n(); ++n) std::copy(x.plane(n, c0), x.plane(n, c0) + s * HW, p.plane(n, 0));
    parts.push_back(std::move(p));
    c0 += s;
  }
  return parts;
}

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& v) {
  require_same_shape(acc, v, "add_inplace");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
}

/// Adds `g` into the gradient slot of `param`, allocating it if needed.
template <typename T>
void accumulate_grad(Tensor<T>& param, const Tensor<T>& g) {
  if (param.size() != g.size()) throw DimensionError("accumulate_grad: size mismatch");
  auto slot = param.grad();
  for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
}

}  // namespace sme

namespace sme {

/// Runs conv backward, adds kernel/bias gradients into their gradient slots
/// and returns the input gradient.
template <typename T>
Tensor<T> conv2d_backward_into(const Tensor<T>& x, ConvParams<T>& p, const Tensor<T>& grad_out,
                               std::size_t stride = 1) {
  ConvGrads<T> g = detail::conv_backward_impl(x, p, grad_out, stride);
  accumulate_grad(p.kernel, g.grad_kernel);
  if (p.bias) accumulate_grad(*p.bias, *g.grad_bias);
  return std::move(g.grad_x);
}

}  // namespace sme
