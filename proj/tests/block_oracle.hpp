#pragma once

// Direct double-precision compositions of the network blocks, built from the
// loop oracles in oracle.hpp. Only parameter values are read from the library
// structs; every index computation is redone here.

#include <cmath>
#include <vector>

#include "burstmamba/blocks.hpp"
#include "oracle.hpp"

namespace oracle {

template <class T>
Vec v64(const burstmamba::BasicTensor<T>& t) {
  return {t.vec().begin(), t.vec().end()};
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }
inline double silu(double v) { return v * sigmoid(v); }

template <class T>
Ssm to_ssm(const burstmamba::BasicSsmParams<T>& p) {
  Ssm s;
  s.D = static_cast<int>(p.dim());
  s.N = static_cast<int>(p.state_dim());
  s.a = v64(p.a_diag);
  s.bw = v64(p.b_weight);
  s.bb = v64(p.b_bias);
  s.cw = v64(p.c_weight);
  s.cb = v64(p.c_bias);
  s.dtw = v64(p.dt_weight);
  s.dtb = v64(p.dt_bias);
  if (p.use_skip) s.dskip = v64(p.d_skip);
  return s;
}

// rows of x (R x in) times w (out x in) plus b
inline Vec dense(const Vec& x, int rows, int in, const Vec& w, const Vec& b, int out) {
  Vec y(static_cast<std::size_t>(rows * out));
  for (int r = 0; r < rows; ++r)
    for (int o = 0; o < out; ++o) {
      double acc = b[o];
      for (int i = 0; i < in; ++i) acc += w[o * in + i] * x[r * in + i];
      y[r * out + o] = acc;
    }
  return y;
}

inline Vec layer_norm_rows(const Vec& x, int rows, int d, const Vec& g, const Vec& b) {
  Vec y(x.size());
  for (int r = 0; r < rows; ++r) {
    double mu = 0, var = 0;
    for (int i = 0; i < d; ++i) mu += x[r * d + i];
    mu /= d;
    for (int i = 0; i < d; ++i) var += (x[r * d + i] - mu) * (x[r * d + i] - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int i = 0; i < d; ++i) y[r * d + i] = (x[r * d + i] - mu) * inv * g[i] + b[i];
  }
  return y;
}

template <class T>
Vec channel_attention(const Vec& f, int C, int HW, const burstmamba::BasicChannelAttention<T>& ca) {
  const int S = static_cast<int>(ca.w1.dim(0));
  Vec avg(C, 0.0);
  for (int c = 0; c < C; ++c) {
    for (int p = 0; p < HW; ++p) avg[c] += f[c * HW + p];
    avg[c] /= HW;
  }
  auto hid = dense(avg, 1, C, v64(ca.w1), v64(ca.b1), S);
  for (auto& v : hid) v = silu(v);
  auto s = dense(hid, 1, S, v64(ca.w2), v64(ca.b2), C);
  Vec out(f.size());
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < HW; ++p) out[c * HW + p] = f[c * HW + p] * sigmoid(s[c]);
  return out;
}

// Cells visited by the four spatial paths, in visiting order.
inline std::vector<int> path_cells(int path, int H, int W) {
  std::vector<int> cells;
  if (path < 2) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) cells.push_back(y * W + x);
  } else {
    for (int x = 0; x < W; ++x)
      for (int y = 0; y < H; ++y) cells.push_back(y * W + x);
  }
  if (path % 2) std::reverse(cells.begin(), cells.end());
  return cells;
}

template <class T>
Vec spatial_block(const Vec& f, int C, int H, int W, const burstmamba::BasicSpatialBlock<T>& blk) {
  const int HW = H * W;
  Vec tok(static_cast<std::size_t>(HW * C));
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < HW; ++p) tok[p * C + c] = f[c * HW + p];
  auto u = dense(layer_norm_rows(tok, HW, C, v64(blk.norm_g), v64(blk.norm_b)), HW, C, v64(blk.in_w),
                 v64(blk.in_b), C);
  Vec merged(u.size(), 0.0);
  for (int k = 0; k < 4; ++k) {
    const auto cells = path_cells(k, H, W);
    Vec seq(u.size());
    for (int i = 0; i < HW; ++i)
      for (int c = 0; c < C; ++c) seq[i * C + c] = u[cells[i] * C + c];
    const auto y = scan(seq, HW, to_ssm(blk.paths[static_cast<std::size_t>(k)]), true);
    for (int i = 0; i < HW; ++i)
      for (int c = 0; c < C; ++c) merged[cells[i] * C + c] += y[i * C + c];
  }
  auto g = dense(merged, HW, C, v64(blk.out_w), v64(blk.out_b), C);
  Vec gc(g.size());
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < HW; ++p) gc[c * HW + p] = g[p * C + c];
  const auto s = channel_attention(gc, C, HW, blk.ca);
  Vec out(f.size());
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < HW; ++p) out[c * HW + p] = f[c * HW + p] + blk.gain.vec()[c] * s[c * HW + p];
  return out;
}

// Fields (G+2N, H, W) of one frame, softplus applied to the first G channels.
template <class T>
Vec psi_fields(const Vec& f, int C, int H, int W, const burstmamba::BasicPsiHead<T>& head) {
  const int dpsi = static_cast<int>(head.d_psi());
  const int outs = static_cast<int>(head.lin_w.dim(0));
  const int G = static_cast<int>(head.groups);
  const auto psi = haar(f, C, H, W);
  const auto red = conv(psi, 4 * C, H / 2, W / 2, v64(head.reduce_w), v64(head.reduce_b), dpsi, 3, 1, true);
  Vec out(static_cast<std::size_t>(outs * H * W));
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int o = 0; o < outs; ++o) {
        double acc = head.lin_b.vec()[o];
        for (int k = 0; k < dpsi; ++k)
          acc += head.lin_w.vec()[o * dpsi + k] * red[(k * (H / 2) + y / 2) * (W / 2) + x / 2];
        out[(o * H + y) * W + x] = o < G ? softplus(acc) : acc;
      }
  return out;
}

// Bilinear footprint of a source point: clamped cells and weights.
struct Footprint {
  int cell[4];
  double w[4];
};

inline Footprint footprint(int H, int W, double x, double y) {
  const double x0 = std::floor(x), y0 = std::floor(y);
  const double fx = x - x0, fy = y - y0;
  auto idx = [&](double xi, double yi) {
    const int cx = std::min(std::max(static_cast<int>(xi), 0), W - 1);
    const int cy = std::min(std::max(static_cast<int>(yi), 0), H - 1);
    return cy * W + cx;
  };
  return {{idx(x0, y0), idx(x0 + 1, y0), idx(x0, y0 + 1), idx(x0 + 1, y0 + 1)},
          {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy}};
}

// Temporal block on a burst (L, C, H, W) with per-frame flows (du, dv planes).
// Returns f + delta; delta alone goes to *delta_out when given.
template <class T>
Vec temporal_block(const Vec& f, int L, int C, int H, int W, const std::vector<burstmamba::FlowMap>& flows,
                   const burstmamba::BasicTemporalBlock<T>& blk, Vec* delta_out = nullptr) {
  const int HW = H * W;
  std::vector<std::vector<Footprint>> fp(L);
  for (int b = 0; b < L; ++b)
    for (int p = 0; p < HW; ++p) {
      const double xs = static_cast<float>(p % W) - flows[b].du[p];
      const double ys = static_cast<float>(p / W) - flows[b].dv[p];
      fp[b].push_back(footprint(H, W, xs, ys));
    }
  auto sample = [&](const double* plane, int b, int p) {
    double acc = 0;
    for (int k = 0; k < 4; ++k) acc += fp[b][p].w[k] * plane[fp[b][p].cell[k]];
    return acc;
  };

  // per-pixel sequences, normalized per token
  Vec seq(static_cast<std::size_t>(HW * L * C));
  for (int p = 0; p < HW; ++p)
    for (int b = 0; b < L; ++b)
      for (int c = 0; c < C; ++c) seq[(p * L + b) * C + c] = sample(&f[(b * C + c) * HW], b, p);
  const auto u = layer_norm_rows(seq, HW * L, C, v64(blk.norm_g), v64(blk.norm_b));

  Vec merged(seq.size(), 0.0);
  for (int dir = 0; dir < 2; ++dir) {
    const auto& d = dir == 0 ? blk.fwd : blk.bwd;
    const int G = static_cast<int>(d.head.groups), N = static_cast<int>(d.head.state_dim);
    std::vector<Vec> fields;
    for (int b = 0; b < L; ++b)
      fields.push_back(psi_fields(Vec(f.begin() + b * C * HW, f.begin() + (b + 1) * C * HW), C, H, W, d.head));
    for (int p = 0; p < HW; ++p) {
      std::vector<long double> h(static_cast<std::size_t>(C * N), 0.0L);
      for (int step = 0; step < L; ++step) {
        const int b = dir == 0 ? step : L - 1 - step;
        auto field = [&](int ch) { return sample(&fields[b][ch * HW], b, p); };
        for (int c = 0; c < C; ++c) {
          const double xv = u[(p * L + b) * C + c];
          const double dt = field(c * G / C);
          long double acc = 0;
          for (int n = 0; n < N; ++n) {
            const auto z = zoh(d.a_diag.vec()[n], field(G + n), dt);
            auto& hv = h[c * N + n];
            hv = z.a_bar * hv + z.b_bar * xv;
            acc += field(G + N + n) * hv;
          }
          if (blk.use_skip) acc += d.d_skip.vec()[c] * xv;
          merged[(p * L + b) * C + c] += static_cast<double>(acc);
        }
      }
    }
  }

  // adjoint of the sampling: splat each sequence entry back onto its footprint
  Vec back(f.size(), 0.0);
  for (int p = 0; p < HW; ++p)
    for (int b = 0; b < L; ++b)
      for (int k = 0; k < 4; ++k)
        for (int c = 0; c < C; ++c)
          back[(b * C + c) * HW + fp[b][p].cell[k]] += fp[b][p].w[k] * merged[(p * L + b) * C + c];

  Vec out(f.size()), delta(f.size());
  for (int b = 0; b < L; ++b) {
    auto z1 = conv(Vec(back.begin() + b * C * HW, back.begin() + (b + 1) * C * HW), C, H, W, v64(blk.conv1_w),
                   v64(blk.conv1_b), C, 3, 1, true);
    for (auto& v : z1) v = silu(v);
    const auto z2 = conv(z1, C, H, W, v64(blk.conv2_w), v64(blk.conv2_b), C, 3, 1, true);
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < HW; ++p) {
        const auto i = (b * C + c) * HW + p;
        delta[i] = blk.gain.vec()[c] * z2[c * HW + p];
        out[i] = f[i] + delta[i];
      }
  }
  if (delta_out) *delta_out = delta;
  return out;
}

// (C*4, H, W) -> (C, 2H, 2W), channel c*4 + 2i + j to offset (i, j)
inline Vec pixel_shuffle2(const Vec& x, int C, int H, int W) {
  Vec y(x.size());
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        for (int yy = 0; yy < H; ++yy)
          for (int xx = 0; xx < W; ++xx)
            y[(c * 2 * H + 2 * yy + i) * 2 * W + 2 * xx + j] = x[((c * 4 + 2 * i + j) * H + yy) * W + xx];
  return y;
}

template <class T>
Vec upsampler(const Vec& f, int C, int H, int W, const burstmamba::BasicUpsampler<T>& up) {
  auto x = pixel_shuffle2(conv(f, C, H, W, v64(up.up1_w), v64(up.up1_b), 4 * C, 3, 1, true), C, H, W);
  x = pixel_shuffle2(conv(x, C, 2 * H, 2 * W, v64(up.up2_w), v64(up.up2_b), 4 * C, 3, 1, true), C, 2 * H, 2 * W);
  return conv(x, C, 4 * H, 4 * W, v64(up.out_w), v64(up.out_b), 3, 3, 1, true);
}

}  // namespace oracle
