#pragma once

// Naive reference implementations used only by tests. Each one follows the
// defining formula with plain loops and shares no code path with the library
// beyond the Tensor container.

#include <cmath>
#include <vector>

#include "defom/random.hpp"
#include "defom/tensor.hpp"

namespace defom::oracle {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// C[i][j][k] = sum_c l[c][i][j] * r[c][i][k]
inline std::vector<double> correlation(const Tensor& l, const Tensor& r) {
  const std::size_t c = l.dim(0), h = l.dim(1), w = l.dim(2);
  std::vector<double> out(h * w * w, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < w; ++k) {
        double s = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) s += static_cast<double>(l(ch, i, j)) * r(ch, i, k);
        out[(i * w + j) * w + k] = s;
      }
  return out;
}

inline std::vector<double> pool_last(const Tensor& v) {
  const std::size_t n = v.shape().back(), rows = v.size() / n;
  std::vector<double> out;
  for (std::size_t p = 0; p < rows; ++p)
    for (std::size_t j = 0; 2 * j + 1 < n; ++j) out.push_back(0.5 * (v[p * n + 2 * j] + v[p * n + 2 * j + 1]));
  return out;
}

// Per-element linear interpolation with explicit zero padding.
inline double sample(const Tensor& volume, std::size_t i, std::size_t j, double pos) {
  const auto n = static_cast<long>(volume.dim(2));
  auto at = [&](long k) { return (k < 0 || k >= n) ? 0.0 : static_cast<double>(volume(i, j, k)); };
  const long k0 = static_cast<long>(std::floor(pos));
  const double a = pos - static_cast<double>(k0);
  return (1.0 - a) * at(k0) + a * at(k0 + 1);
}

// Six nested loops, zero padding.
inline std::vector<double> conv2d(const Tensor& in, const Tensor& k, const Tensor& b, std::size_t stride,
                                  std::size_t pad, std::size_t& out_h, std::size_t& out_w) {
  const long c_in = static_cast<long>(in.dim(0)), h = static_cast<long>(in.dim(1)), w = static_cast<long>(in.dim(2));
  const long c_out = static_cast<long>(k.dim(0)), kh = static_cast<long>(k.dim(2)), kw = static_cast<long>(k.dim(3));
  out_h = (in.dim(1) + 2 * pad - k.dim(2)) / stride + 1;
  out_w = (in.dim(2) + 2 * pad - k.dim(3)) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(c_out) * out_h * out_w);
  for (long oc = 0; oc < c_out; ++oc)
    for (long oy = 0; oy < static_cast<long>(out_h); ++oy)
      for (long ox = 0; ox < static_cast<long>(out_w); ++ox) {
        double s = b.empty() ? 0.0 : b[oc];
        for (long ic = 0; ic < c_in; ++ic)
          for (long ky = 0; ky < kh; ++ky)
            for (long kx = 0; kx < kw; ++kx) {
              const long iy = oy * static_cast<long>(stride) + ky - static_cast<long>(pad);
              const long ix = ox * static_cast<long>(stride) + kx - static_cast<long>(pad);
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              s += static_cast<double>(k(oc, ic, ky, kx)) * in(ic, iy, ix);
            }
        out[(static_cast<std::size_t>(oc) * out_h + oy) * out_w + ox] = s;
      }
  return out;
}

// Evaluates the GRU equations formula by formula with 3x3 same-padding convs
// written out inline.
struct NaiveGruWeights {
  Tensor wz, bz, wr, br, wh, bh;
};

inline std::vector<double> gru(const Tensor& h, const Tensor& x, const Tensor& cz, const Tensor& cr, const Tensor& ch,
                               const NaiveGruWeights& W) {
  const long hc = static_cast<long>(h.dim(0)), xc = static_cast<long>(x.dim(0));
  const long H = static_cast<long>(h.dim(1)), Wd = static_cast<long>(h.dim(2));
  auto input = [&](const std::vector<double>& hidden_part, long c, long y, long xx) -> double {
    if (y < 0 || y >= H || xx < 0 || xx >= Wd) return 0.0;
    if (c < hc) return hidden_part[static_cast<std::size_t>((c * H + y) * Wd + xx)];
    return x(c - hc, y, xx);
  };
  auto conv_at = [&](const Tensor& w, const Tensor& b, const std::vector<double>& hidden_part, long oc, long y,
                     long xx) {
    double s = b[oc];
    for (long c = 0; c < hc + xc; ++c)
      for (long ky = 0; ky < 3; ++ky)
        for (long kx = 0; kx < 3; ++kx) s += static_cast<double>(w(oc, c, ky, kx)) * input(hidden_part, c, y + ky - 1, xx + kx - 1);
    return s;
  };
  std::vector<double> hv(h.values().begin(), h.values().end());
  std::vector<double> z(hv.size()), r(hv.size()), rh(hv.size()), out(hv.size());
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (long c = 0; c < hc; ++c)
    for (long y = 0; y < H; ++y)
      for (long xx = 0; xx < Wd; ++xx) {
        const auto p = static_cast<std::size_t>((c * H + y) * Wd + xx);
        z[p] = sig(conv_at(W.wz, W.bz, hv, c, y, xx) + cz[p]);
        r[p] = sig(conv_at(W.wr, W.br, hv, c, y, xx) + cr[p]);
        rh[p] = r[p] * hv[p];
      }
  for (long c = 0; c < hc; ++c)
    for (long y = 0; y < H; ++y)
      for (long xx = 0; xx < Wd; ++xx) {
        const auto p = static_cast<std::size_t>((c * H + y) * Wd + xx);
        const double q = std::tanh(conv_at(W.wh, W.bh, rh, c, y, xx) + ch[p]);
        out[p] = (1.0 - z[p]) * hv[p] + z[p] * q;
      }
  return out;
}

// Per output pixel: softmax of its 9 logits over the edge-clamped 3x3 coarse
// neighbourhood, times 4.
inline std::vector<double> convex_upsample(const Tensor& d, const Tensor& logits) {
  const long h = static_cast<long>(d.dim(0)), w = static_cast<long>(d.dim(1));
  std::vector<double> out(static_cast<std::size_t>(16 * h * w));
  for (long Y = 0; Y < 4 * h; ++Y)
    for (long X = 0; X < 4 * w; ++X) {
      const long i = Y / 4, j = X / 4, sy = Y % 4, sx = X % 4;
      double logit[9], total = 0.0, mix = 0.0, peak = -1e300;
      for (long k = 0; k < 9; ++k) {
        logit[k] = logits(k * 16 + sy * 4 + sx, i, j);
        peak = std::max(peak, logit[k]);
      }
      for (long k = 0; k < 9; ++k) {
        const long y = std::clamp(i + k / 3 - 1, 0L, h - 1), x = std::clamp(j + k % 3 - 1, 0L, w - 1);
        const double e = std::exp(logit[k] - peak);
        total += e;
        mix += e * d(y, x);
      }
      out[static_cast<std::size_t>(Y * 4 * w + X)] = 4.0 * mix / total;
    }
  return out;
}

struct GridFit {
  double scale, shift, sse;
};

// Exhaustive search over a (scale, shift) lattice minimising squared error.
inline GridFit affine_grid_search(const TensorD& z, const TensorD& gt, double s_lo, double s_hi, double t_lo,
                                  double t_hi, double step) {
  GridFit best{0, 0, 1e300};
  for (double s = s_lo; s <= s_hi + 1e-12; s += step)
    for (double t = t_lo; t <= t_hi + 1e-12; t += step) {
      double sse = 0.0;
      for (std::size_t p = 0; p < z.size(); ++p) {
        const double e = s * z[p] + t - gt[p];
        sse += e * e;
      }
      if (sse < best.sse) best = {s, t, sse};
    }
  return best;
}

}  // namespace defom::oracle
