#include "burstmamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace burstmamba {

using autograd::BackwardFn;
using autograd::make_result;
using autograd::Node;

namespace {

std::string two_shapes(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b);
}

std::int64_t normalize_axis(const char* op, std::int64_t axis, std::size_t rank) {
  const auto r = static_cast<std::int64_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return axis;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) throw ShapeError(two_shapes(op, a, b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

// For every flat index of `out`, the flat index into the (broadcast) `in`.
Index broadcast_map(const Shape& out, const Shape& in) {
  const std::size_t r = out.size();
  std::vector<std::int64_t> in_stride(r, 0);
  std::int64_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    const std::size_t off = r - in.size();
    if (i >= off) {
      const auto e = in[i - off];
      in_stride[i] = e == 1 ? 0 : s;
      s *= e;
    }
  }
  const auto n = shape_numel(out);
  Index map(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t pos = 0;
  for (std::int64_t k = 0; k < n; ++k) {
    map[static_cast<std::size_t>(k)] = pos;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      pos += in_stride[d];
      if (idx[d] < out[d]) break;
      pos -= in_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

template <class T, class F, class DA, class DB>
BasicTensor<T> binary(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b, F f,
                      DA da, DB db) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) {
    const auto& x = a.vec();
    const auto& y = b.vec();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
    return make_result<T>(op, sa, std::move(out), {a, b},
                          [da, db](const Node<T>& self, const std::vector<T>& g,
                                   std::span<std::vector<T>* const> gin) {
                            const auto& x = self.parents[0]->data;
                            const auto& y = self.parents[1]->data;
                            if (gin[0])
                              for (std::size_t i = 0; i < g.size(); ++i)
                                (*gin[0])[i] += g[i] * da(x[i], y[i]);
                            if (gin[1])
                              for (std::size_t i = 0; i < g.size(); ++i)
                                (*gin[1])[i] += g[i] * db(x[i], y[i]);
                          });
  }
  Shape so = broadcast_shape(op, sa, sb);
  const auto ma = broadcast_map(so, sa);
  const auto mb = broadcast_map(so, sb);
  const auto& x = a.vec();
  const auto& y = b.vec();
  std::vector<T> out(ma.size());
  for (std::size_t i = 0; i < ma.size(); ++i)
    out[i] = f(x[static_cast<std::size_t>(ma[i])], y[static_cast<std::size_t>(mb[i])]);
  return make_result<T>(
      op, so, std::move(out), {a, b},
      [da, db](const Node<T>& self, const std::vector<T>& g, std::span<std::vector<T>* const> gin) {
        const auto& x = self.parents[0]->data;
        const auto& y = self.parents[1]->data;
        const auto ma = broadcast_map(self.shape, self.parents[0]->shape);
        const auto mb = broadcast_map(self.shape, self.parents[1]->shape);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const auto ia = static_cast<std::size_t>(ma[i]);
          const auto ib = static_cast<std::size_t>(mb[i]);
          if (gin[0]) (*gin[0])[ia] += g[i] * da(x[ia], y[ib]);
          if (gin[1]) (*gin[1])[ib] += g[i] * db(x[ia], y[ib]);
        }
      });
}

// df receives (input, output).
template <class T, class F, class DF>
BasicTensor<T> unary(const char* op, const BasicTensor<T>& x, F f, DF df) {
  const auto& in = x.vec();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(op, x.shape(), std::move(out), {x},
                        [df](const Node<T>& self, const std::vector<T>& g,
                             std::span<std::vector<T>* const> gin) {
                          const auto& in = self.parents[0]->data;
                          auto& gx = *gin[0];
                          for (std::size_t i = 0; i < g.size(); ++i)
                            gx[i] += g[i] * df(in[i], self.data[i]);
                        });
}

template <class T>
T sigmoid_scalar(T v) {
  if (v >= 0) {
    const T z = std::exp(-v);
    return T(1) / (T(1) + z);
  }
  const T z = std::exp(v);
  return z / (T(1) + z);
}

template <class T>
T softplus_scalar(T v) {
  return std::log1p(std::exp(-std::abs(v))) + std::max(v, T(0));
}

struct OuterInner {
  std::int64_t outer = 1, extent = 1, inner = 1;
};

OuterInner split_at(const Shape& s, std::int64_t axis) {
  OuterInner r;
  for (std::int64_t i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.extent = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape contiguous_strides(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Maps each flat output index of a permutation to its flat input index.
Index permute_map(const Shape& in_shape, const Index& perm) {
  const std::size_t r = in_shape.size();
  const auto in_st = contiguous_strides(in_shape);
  Shape out_shape(r);
  std::vector<std::int64_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(perm[i])];
    step[i] = in_st[static_cast<std::size_t>(perm[i])];
  }
  const auto n = shape_numel(out_shape);
  Index map(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t pos = 0;
  for (std::int64_t k = 0; k < n; ++k) {
    map[static_cast<std::size_t>(k)] = pos;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      pos += step[d];
      if (idx[d] < out_shape[d]) break;
      pos -= step[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

template <class T>
void im2col(const T* x, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t ho,
            std::int64_t wo, T* cols) {
  const std::int64_t p = ho * wo;
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t i = 0; i < kh; ++i)
      for (std::int64_t j = 0; j < kw; ++j) {
        T* row = cols + ((ci * kh + i) * kw + j) * p;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride + i - pad;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (ci * h + iy) * w;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride + j - pad;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* cols, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t ho,
            std::int64_t wo, T* x) {
  const std::int64_t p = ho * wo;
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t i = 0; i < kh; ++i)
      for (std::int64_t j = 0; j < kw; ++j) {
        const T* row = cols + ((ci * kh + i) * kw + j) * p;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride + i - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = x + (ci * h + iy) * w;
          const T* src = row + oy * wo;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride + j - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace

namespace kernels {

constexpr std::int64_t kColumnBlock = 512;

template <class T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
  for (std::int64_t j0 = 0; j0 < n; j0 += kColumnBlock) {
    const std::int64_t j1 = std::min(n, j0 + kColumnBlock);
    for (std::int64_t i = 0; i < m; ++i) {
      T* __restrict crow = c + i * n;
      const T* arow = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* __restrict brow = b + p * n;
        for (std::int64_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <class T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
  for (std::int64_t j0 = 0; j0 < n; j0 += kColumnBlock) {
    const std::int64_t j1 = std::min(n, j0 + kColumnBlock);
    for (std::int64_t p = 0; p < k; ++p) {
      const T* arow = a + p * m;
      const T* __restrict brow = b + p * n;
      for (std::int64_t i = 0; i < m; ++i) {
        const T av = arow[i];
        T* __restrict crow = c + i * n;
        for (std::int64_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <class T>
void transpose2d(std::int64_t rows, std::int64_t cols, const T* src, T* dst) {
  constexpr std::int64_t tile = 32;
  for (std::int64_t i0 = 0; i0 < rows; i0 += tile)
    for (std::int64_t j0 = 0; j0 < cols; j0 += tile) {
      const std::int64_t i1 = std::min(rows, i0 + tile), j1 = std::min(cols, j0 + tile);
      for (std::int64_t i = i0; i < i1; ++i)
        for (std::int64_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
}

}  // namespace kernels

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <class T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T s) {
  return unary<T>(
      "add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& x, T s) {
  return unary<T>(
      "mul_scalar", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  return unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
BasicTensor<T> abs(const BasicTensor<T>& x) {
  return unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <class T>
BasicTensor<T> softplus(const BasicTensor<T>& x) {
  return unary<T>(
      "softplus", x, [](T v) { return softplus_scalar(v); },
      [](T v, T) { return sigmoid_scalar(v); });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return unary<T>(
      "sigmoid", x, [](T v) { return sigmoid_scalar(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  return unary<T>(
      "silu", x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0;
  for (T v : x.vec()) acc += static_cast<double>(v);
  return make_result<T>("sum", Shape{}, std::vector<T>{static_cast<T>(acc)}, {x},
                        [](const Node<T>&, const std::vector<T>& g,
                           std::span<std::vector<T>* const> gin) {
                          for (auto& v : *gin[0]) v += g[0];
                        });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  double acc = 0;
  for (T v : x.vec()) acc += static_cast<double>(v);
  const double n = static_cast<double>(x.numel());
  return make_result<T>("mean", Shape{}, std::vector<T>{static_cast<T>(acc / n)}, {x},
                        [n](const Node<T>&, const std::vector<T>& g,
                            std::span<std::vector<T>* const> gin) {
                          const T s = static_cast<T>(static_cast<double>(g[0]) / n);
                          for (auto& v : *gin[0]) v += s;
                        });
}

namespace {

template <class T>
BasicTensor<T> reduce_axis(const char* op, const BasicTensor<T>& x, std::int64_t axis,
                           bool average) {
  axis = normalize_axis(op, axis, x.rank());
  const auto oi = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  const double scale = average ? 1.0 / static_cast<double>(oi.extent) : 1.0;
  const auto& in = x.vec();
  std::vector<T> out(static_cast<std::size_t>(oi.outer * oi.inner));
  std::vector<double> acc(static_cast<std::size_t>(oi.inner));
  for (std::int64_t o = 0; o < oi.outer; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::int64_t e = 0; e < oi.extent; ++e) {
      const T* src = in.data() + (o * oi.extent + e) * oi.inner;
      for (std::int64_t i = 0; i < oi.inner; ++i) acc[static_cast<std::size_t>(i)] += src[i];
    }
    for (std::int64_t i = 0; i < oi.inner; ++i)
      out[static_cast<std::size_t>(o * oi.inner + i)] =
          static_cast<T>(acc[static_cast<std::size_t>(i)] * scale);
  }
  return make_result<T>(op, std::move(out_shape), std::move(out), {x},
                        [oi, scale](const Node<T>&, const std::vector<T>& g,
                                    std::span<std::vector<T>* const> gin) {
                          auto& gx = *gin[0];
                          const T s = static_cast<T>(scale);
                          for (std::int64_t o = 0; o < oi.outer; ++o)
                            for (std::int64_t e = 0; e < oi.extent; ++e) {
                              T* dst = gx.data() + (o * oi.extent + e) * oi.inner;
                              const T* src = g.data() + o * oi.inner;
                              for (std::int64_t i = 0; i < oi.inner; ++i) dst[i] += src[i] * s;
                            }
                        });
}

}  // namespace

template <class T>
BasicTensor<T> sum_axis(const BasicTensor<T>& x, std::int64_t axis) {
  return reduce_axis<T>("sum_axis", x, axis, false);
}

template <class T>
BasicTensor<T> mean_axis(const BasicTensor<T>& x, std::int64_t axis) {
  return reduce_axis<T>("mean_axis", x, axis, true);
}

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) throw ShapeError(two_shapes("matmul", sa, sb));
  const std::int64_t m = sa[0], k = sa[1], n = sb[1];
  std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
  kernels::gemm_nn<T>(m, n, k, a.vec().data(), b.vec().data(), out.data());
  return make_result<T>("matmul", Shape{m, n}, std::move(out), {a, b},
                        [m, n, k](const Node<T>& self, const std::vector<T>& g,
                                  std::span<std::vector<T>* const> gin) {
                          const auto& av = self.parents[0]->data;
                          const auto& bv = self.parents[1]->data;
                          if (gin[0]) {
                            std::vector<T> bt(static_cast<std::size_t>(k * n));
                            kernels::transpose2d<T>(k, n, bv.data(), bt.data());
                            kernels::gemm_nn<T>(m, k, n, g.data(), bt.data(), gin[0]->data());
                          }
                          if (gin[1]) kernels::gemm_tn<T>(k, n, m, av.data(), g.data(), gin[1]->data());
                        });
}

template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  if (sx.empty() || sw.size() != 2 || sx.back() != sw[1]) throw ShapeError(two_shapes("linear", sx, sw));
  const std::int64_t in = sw[1], out_dim = sw[0];
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim))
    throw ShapeError(two_shapes("linear", sw, bias.shape()));
  const std::int64_t m = x.numel() / in;
  std::vector<T> wt(static_cast<std::size_t>(in * out_dim));
  kernels::transpose2d<T>(out_dim, in, weight.vec().data(), wt.data());
  std::vector<T> out(static_cast<std::size_t>(m * out_dim), T(0));
  if (bias.defined()) {
    const auto& bv = bias.vec();
    for (std::int64_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), out.begin() + i * out_dim);
  }
  kernels::gemm_nn<T>(m, out_dim, in, x.vec().data(), wt.data(), out.data());
  Shape so = sx;
  so.back() = out_dim;
  std::vector<BasicTensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>("linear", std::move(so), std::move(out), inputs,
                        [m, in, out_dim](const Node<T>& self, const std::vector<T>& g,
                                         std::span<std::vector<T>* const> gin) {
                          const auto& xv = self.parents[0]->data;
                          const auto& wv = self.parents[1]->data;
                          if (gin[0]) kernels::gemm_nn<T>(m, in, out_dim, g.data(), wv.data(), gin[0]->data());
                          if (gin[1]) kernels::gemm_tn<T>(out_dim, in, m, g.data(), xv.data(), gin[1]->data());
                          if (gin.size() > 2 && gin[2]) {
                            auto& gb = *gin[2];
                            for (std::int64_t i = 0; i < m; ++i)
                              for (std::int64_t j = 0; j < out_dim; ++j)
                                gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * out_dim + j)];
                          }
                        });
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) throw ShapeError(two_shapes("reshape", x.shape(), shape));
  for (auto e : shape)
    if (e < 1) throw ShapeError(two_shapes("reshape", x.shape(), shape));
  return make_result<T>("reshape", std::move(shape), x.vec(), {x},
                        [](const Node<T>&, const std::vector<T>& g,
                           std::span<std::vector<T>* const> gin) {
                          auto& gx = *gin[0];
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                        });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& x, const Index& perm) {
  const auto& s = x.shape();
  if (perm.size() != s.size()) throw ShapeError("transpose: permutation rank mismatch for " + shape_str(s));
  std::vector<bool> used(perm.size(), false);
  for (auto p : perm) {
    if (p < 0 || p >= static_cast<std::int64_t>(perm.size()) || used[static_cast<std::size_t>(p)])
      throw ShapeError("transpose: invalid permutation for " + shape_str(s));
    used[static_cast<std::size_t>(p)] = true;
  }
  Shape so(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) so[i] = s[static_cast<std::size_t>(perm[i])];
  const auto map = permute_map(s, perm);
  const auto& in = x.vec();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = in[static_cast<std::size_t>(map[i])];
  return make_result<T>("transpose", std::move(so), std::move(out), {x},
                        [perm](const Node<T>& self, const std::vector<T>& g,
                               std::span<std::vector<T>* const> gin) {
                          const auto map = permute_map(self.parents[0]->shape, perm);
                          auto& gx = *gin[0];
                          for (std::size_t i = 0; i < map.size(); ++i)
                            gx[static_cast<std::size_t>(map[i])] += g[i];
                        });
}

template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::int64_t axis, std::int64_t start,
                     std::int64_t length) {
  axis = normalize_axis("slice", axis, x.rank());
  const auto oi = split_at(x.shape(), axis);
  if (start < 0 || length < 1 || start + length > oi.extent) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for " + shape_str(x.shape()));
  }
  Shape so = x.shape();
  so[static_cast<std::size_t>(axis)] = length;
  const auto& in = x.vec();
  std::vector<T> out(static_cast<std::size_t>(oi.outer * length * oi.inner));
  for (std::int64_t o = 0; o < oi.outer; ++o) {
    const T* src = in.data() + (o * oi.extent + start) * oi.inner;
    std::copy(src, src + length * oi.inner, out.begin() + o * length * oi.inner);
  }
  return make_result<T>("slice", std::move(so), std::move(out), {x},
                        [oi, start, length](const Node<T>&, const std::vector<T>& g,
                                            std::span<std::vector<T>* const> gin) {
                          auto& gx = *gin[0];
                          for (std::int64_t o = 0; o < oi.outer; ++o) {
                            T* dst = gx.data() + (o * oi.extent + start) * oi.inner;
                            const T* src = g.data() + o * length * oi.inner;
                            for (std::int64_t i = 0; i < length * oi.inner; ++i) dst[i] += src[i];
                          }
                        });
}

template <class T>
BasicTensor<T> pad(const BasicTensor<T>& x,
                   const std::vector<std::pair<std::int64_t, std::int64_t>>& pads, T value) {
  const auto& s = x.shape();
  if (pads.size() != s.size()) throw ShapeError("pad: expected one pad pair per axis of " + shape_str(s));
  Shape so(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (pads[i].first < 0 || pads[i].second < 0) throw ShapeError("pad: negative padding");
    so[i] = s[i] + pads[i].first + pads[i].second;
  }
  const auto out_st = contiguous_strides(so);
  std::int64_t base = 0;
  for (std::size_t i = 0; i < s.size(); ++i) base += pads[i].first * out_st[i];
  // Map each input element to its output position.
  const auto n = x.numel();
  auto positions = std::make_shared<Index>(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(s.size(), 0);
  std::int64_t pos = base;
  for (std::int64_t k = 0; k < n; ++k) {
    (*positions)[static_cast<std::size_t>(k)] = pos;
    for (std::size_t d = s.size(); d-- > 0;) {
      ++idx[d];
      pos += out_st[d];
      if (idx[d] < s[d]) break;
      pos -= out_st[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<T> out(static_cast<std::size_t>(shape_numel(so)), value);
  const auto& in = x.vec();
  for (std::size_t k = 0; k < in.size(); ++k) out[static_cast<std::size_t>((*positions)[k])] = in[k];
  return make_result<T>("pad", std::move(so), std::move(out), {x},
                        [positions](const Node<T>&, const std::vector<T>& g,
                                    std::span<std::vector<T>* const> gin) {
                          auto& gx = *gin[0];
                          for (std::size_t k = 0; k < positions->size(); ++k)
                            gx[k] += g[static_cast<std::size_t>((*positions)[k])];
                        });
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  axis = normalize_axis("concat", axis, parts[0].rank());
  Shape so = parts[0].shape();
  std::vector<std::int64_t> extents;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != so.size()) throw ShapeError(two_shapes("concat", so, s));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (static_cast<std::int64_t>(i) != axis && s[i] != so[i]) throw ShapeError(two_shapes("concat", so, s));
    extents.push_back(s[static_cast<std::size_t>(axis)]);
    total += s[static_cast<std::size_t>(axis)];
  }
  so[static_cast<std::size_t>(axis)] = total;
  const auto oi = split_at(so, axis);
  std::vector<T> out(static_cast<std::size_t>(shape_numel(so)));
  std::int64_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& in = parts[k].vec();
    const std::int64_t chunk = extents[k] * oi.inner;
    for (std::int64_t o = 0; o < oi.outer; ++o)
      std::copy(in.begin() + o * chunk, in.begin() + (o + 1) * chunk,
                out.begin() + (o * total + offset) * oi.inner);
    offset += extents[k];
  }
  return make_result<T>("concat", std::move(so), std::move(out), parts,
                        [oi, extents, total](const Node<T>&, const std::vector<T>& g,
                                             std::span<std::vector<T>* const> gin) {
                          std::int64_t offset = 0;
                          for (std::size_t k = 0; k < extents.size(); ++k) {
                            const std::int64_t chunk = extents[k] * oi.inner;
                            if (gin[k]) {
                              auto& gx = *gin[k];
                              for (std::int64_t o = 0; o < oi.outer; ++o) {
                                const T* src = g.data() + (o * total + offset) * oi.inner;
                                T* dst = gx.data() + o * chunk;
                                for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
                              }
                            }
                            offset += extents[k];
                          }
                        });
}

template <class T>
BasicTensor<T> broadcast_to(const BasicTensor<T>& x, const Shape& shape) {
  const auto so = broadcast_shape("broadcast_to", x.shape(), shape);
  if (so != shape) throw ShapeError(two_shapes("broadcast_to", x.shape(), shape));
  const auto map = broadcast_map(shape, x.shape());
  const auto& in = x.vec();
  std::vector<T> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = in[static_cast<std::size_t>(map[i])];
  return make_result<T>("broadcast_to", shape, std::move(out), {x},
                        [](const Node<T>& self, const std::vector<T>& g,
                           std::span<std::vector<T>* const> gin) {
                          const auto map = broadcast_map(self.shape, self.parents[0]->shape);
                          auto& gx = *gin[0];
                          for (std::size_t i = 0; i < map.size(); ++i)
                            gx[static_cast<std::size_t>(map[i])] += g[i];
                        });
}

namespace {

template <class T>
void gather_into(const T* src, T* dst, const OuterInner& oi, const Index& idx, bool accumulate_dst) {
  const auto k = static_cast<std::int64_t>(idx.size());
  for (std::int64_t o = 0; o < oi.outer; ++o)
    for (std::int64_t j = 0; j < k; ++j) {
      const T* s = src + (o * oi.extent + idx[static_cast<std::size_t>(j)]) * oi.inner;
      T* d = dst + (o * k + j) * oi.inner;
      if (accumulate_dst)
        for (std::int64_t i = 0; i < oi.inner; ++i) d[i] += s[i];
      else
        std::copy(s, s + oi.inner, d);
    }
}

// src has idx.size() slices; dst has oi.extent slices.
template <class T>
void scatter_into(const T* src, T* dst, const OuterInner& oi, const Index& idx) {
  const auto k = static_cast<std::int64_t>(idx.size());
  for (std::int64_t o = 0; o < oi.outer; ++o)
    for (std::int64_t j = 0; j < k; ++j) {
      const T* s = src + (o * k + j) * oi.inner;
      T* d = dst + (o * oi.extent + idx[static_cast<std::size_t>(j)]) * oi.inner;
      for (std::int64_t i = 0; i < oi.inner; ++i) d[i] += s[i];
    }
}

void check_indices(const char* op, const Index& idx, std::int64_t extent) {
  if (idx.empty()) throw ShapeError(std::string(op) + ": empty index set");
  for (auto i : idx)
    if (i < 0 || i >= extent)
      throw ShapeError(std::string(op) + ": index " + std::to_string(i) + " out of range [0, " +
                       std::to_string(extent) + ")");
}

}  // namespace

template <class T>
BasicTensor<T> gather(const BasicTensor<T>& x, std::int64_t axis, const Index& idx) {
  axis = normalize_axis("gather", axis, x.rank());
  const auto oi = split_at(x.shape(), axis);
  check_indices("gather", idx, oi.extent);
  Shape so = x.shape();
  so[static_cast<std::size_t>(axis)] = static_cast<std::int64_t>(idx.size());
  std::vector<T> out(static_cast<std::size_t>(shape_numel(so)));
  gather_into(x.vec().data(), out.data(), oi, idx, false);
  auto shared_idx = std::make_shared<const Index>(idx);
  return make_result<T>("gather", std::move(so), std::move(out), {x},
                        [oi, shared_idx](const Node<T>&, const std::vector<T>& g,
                                         std::span<std::vector<T>* const> gin) {
                          scatter_into(g.data(), gin[0]->data(), oi, *shared_idx);
                        });
}

template <class T>
BasicTensor<T> scatter_add(const BasicTensor<T>& x, std::int64_t axis, const Index& idx,
                           std::int64_t extent) {
  axis = normalize_axis("scatter_add", axis, x.rank());
  if (x.dim(axis) != static_cast<std::int64_t>(idx.size()))
    throw ShapeError("scatter_add: index count " + std::to_string(idx.size()) + " does not match " +
                     shape_str(x.shape()));
  check_indices("scatter_add", idx, extent);
  Shape so = x.shape();
  so[static_cast<std::size_t>(axis)] = extent;
  const auto oi = split_at(so, axis);
  std::vector<T> out(static_cast<std::size_t>(shape_numel(so)), T(0));
  scatter_into(x.vec().data(), out.data(), oi, idx);
  auto shared_idx = std::make_shared<const Index>(idx);
  return make_result<T>("scatter_add", std::move(so), std::move(out), {x},
                        [oi, shared_idx](const Node<T>&, const std::vector<T>& g,
                                         std::span<std::vector<T>* const> gin) {
                          gather_into(g.data(), gin[0]->data(), oi, *shared_idx, true);
                        });
}

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::int64_t stride, std::int64_t padding) {
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  if ((sx.size() != 3 && sx.size() != 4) || sw.size() != 4) throw ShapeError(two_shapes("conv2d", sx, sw));
  const bool batched = sx.size() == 4;
  const std::int64_t nb = batched ? sx[0] : 1;
  const std::int64_t c = sx[sx.size() - 3], h = sx[sx.size() - 2], w = sx[sx.size() - 1];
  const std::int64_t o = sw[0], kh = sw[2], kw = sw[3];
  if (sw[1] != c) throw ShapeError(two_shapes("conv2d", sx, sw));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o))
    throw ShapeError(two_shapes("conv2d", sw, bias.shape()));
  const std::int64_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::int64_t wo = (w + 2 * padding - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError(two_shapes("conv2d", sx, sw));
  const std::int64_t ck = c * kh * kw, p = ho * wo;

  std::vector<T> out(static_cast<std::size_t>(nb * o * p), T(0));
  std::vector<T> cols(static_cast<std::size_t>(ck * p));
  const auto& xv = x.vec();
  const auto& wv = weight.vec();
  for (std::int64_t n = 0; n < nb; ++n) {
    im2col(xv.data() + n * c * h * w, c, h, w, kh, kw, stride, padding, ho, wo, cols.data());
    T* dst = out.data() + n * o * p;
    if (bias.defined()) {
      const auto& bv = bias.vec();
      for (std::int64_t oc = 0; oc < o; ++oc) std::fill(dst + oc * p, dst + (oc + 1) * p, bv[static_cast<std::size_t>(oc)]);
    }
    kernels::gemm_nn<T>(o, p, ck, wv.data(), cols.data(), dst);
  }
  Shape so = batched ? Shape{nb, o, ho, wo} : Shape{o, ho, wo};
  std::vector<BasicTensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(
      "conv2d", std::move(so), std::move(out), inputs,
      [=](const Node<T>& self, const std::vector<T>& g, std::span<std::vector<T>* const> gin) {
        const auto& xv = self.parents[0]->data;
        const auto& wv = self.parents[1]->data;
        std::vector<T> cols(static_cast<std::size_t>(ck * p));
        std::vector<T> cols_t(static_cast<std::size_t>(ck * p));
        std::vector<T> gcols;
        if (gin[0]) gcols.resize(static_cast<std::size_t>(ck * p));
        for (std::int64_t n = 0; n < nb; ++n) {
          const T* gn = g.data() + n * o * p;
          if (gin[1]) {
            im2col(xv.data() + n * c * h * w, c, h, w, kh, kw, stride, padding, ho, wo, cols.data());
            kernels::transpose2d<T>(ck, p, cols.data(), cols_t.data());
            kernels::gemm_nn<T>(o, ck, p, gn, cols_t.data(), gin[1]->data());
          }
          if (gin[0]) {
            std::fill(gcols.begin(), gcols.end(), T(0));
            kernels::gemm_tn<T>(ck, p, o, wv.data(), gn, gcols.data());
            col2im(gcols.data(), c, h, w, kh, kw, stride, padding, ho, wo,
                   gin[0]->data() + n * c * h * w);
          }
          if (gin.size() > 2 && gin[2]) {
            auto& gb = *gin[2];
            for (std::int64_t oc = 0; oc < o; ++oc) {
              double acc = 0;
              for (std::int64_t i = 0; i < p; ++i) acc += gn[oc * p + i];
              gb[static_cast<std::size_t>(oc)] += static_cast<T>(acc);
            }
          }
        }
      });
}

template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps) {
  const auto& sx = x.shape();
  if (sx.empty()) throw ShapeError("layer_norm: scalar input");
  const std::int64_t d = sx.back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    throw ShapeError(two_shapes("layer_norm", sx, gamma.shape()));
  const std::int64_t rows = x.numel() / d;
  const auto& xv = x.vec();
  const auto& gv = gamma.vec();
  const auto& bv = beta.vec();
  std::vector<T> out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * d;
    double mu = 0, var = 0;
    for (std::int64_t i = 0; i < d; ++i) mu += src[i];
    mu /= static_cast<double>(d);
    for (std::int64_t i = 0; i < d; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::int64_t i = 0; i < d; ++i) {
      const auto k = static_cast<std::size_t>(i);
      out[static_cast<std::size_t>(r * d + i)] = static_cast<T>((src[i] - mu) * rstd * gv[k] + bv[k]);
    }
  }
  return make_result<T>(
      "layer_norm", sx, std::move(out), {x, gamma, beta},
      [rows, d, eps](const Node<T>& self, const std::vector<T>& g, std::span<std::vector<T>* const> gin) {
        const auto& xv = self.parents[0]->data;
        const auto& gv = self.parents[1]->data;
        std::vector<double> xhat(static_cast<std::size_t>(d));
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* src = xv.data() + r * d;
          const T* gr = g.data() + r * d;
          double mu = 0, var = 0;
          for (std::int64_t i = 0; i < d; ++i) mu += src[i];
          mu /= static_cast<double>(d);
          for (std::int64_t i = 0; i < d; ++i) var += (src[i] - mu) * (src[i] - mu);
          var /= static_cast<double>(d);
          const double rstd = 1.0 / std::sqrt(var + eps);
          double m1 = 0, m2 = 0;
          for (std::int64_t i = 0; i < d; ++i) {
            const auto k = static_cast<std::size_t>(i);
            xhat[k] = (src[i] - mu) * rstd;
            const double gx = static_cast<double>(gr[i]) * gv[k];
            m1 += gx;
            m2 += gx * xhat[k];
            if (gin[1]) (*gin[1])[k] += static_cast<T>(gr[i] * xhat[k]);
            if (gin[2]) (*gin[2])[k] += gr[i];
          }
          if (!gin[0]) continue;
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          T* dst = gin[0]->data() + r * d;
          for (std::int64_t i = 0; i < d; ++i) {
            const auto k = static_cast<std::size_t>(i);
            const double gx = static_cast<double>(gr[i]) * gv[k];
            dst[i] += static_cast<T>(rstd * (gx - m1 - xhat[k] * m2));
          }
        }
      });
}

template <class T>
BasicTensor<T> pixel_shuffle(const BasicTensor<T>& x, std::int64_t r) {
  const auto& s = x.shape();
  if (s.size() != 3 && s.size() != 4) throw ShapeError("pixel_shuffle: expected rank 3 or 4, got " + shape_str(s));
  const std::int64_t ch = s[s.size() - 3], h = s[s.size() - 2], w = s[s.size() - 1];
  if (r < 1 || ch % (r * r) != 0)
    throw ShapeError("pixel_shuffle: channels " + std::to_string(ch) + " not divisible by r^2");
  const std::int64_t c = ch / (r * r);
  if (s.size() == 3) {
    auto v = reshape(x, Shape{c, r, r, h, w});
    v = transpose(v, Index{0, 3, 1, 4, 2});
    return reshape(v, Shape{c, h * r, w * r});
  }
  auto v = reshape(x, Shape{s[0], c, r, r, h, w});
  v = transpose(v, Index{0, 1, 4, 2, 5, 3});
  return reshape(v, Shape{s[0], c, h * r, w * r});
}

template <class T>
BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x) {
  const auto& s = x.shape();
  if (s.size() < 2) throw ShapeError("upsample_nearest2x: rank < 2");
  const std::int64_t h = s[s.size() - 2], w = s[s.size() - 1];
  Shape lead(s.begin(), s.end() - 2);
  Shape s5 = lead, b5 = lead, so = lead;
  s5.insert(s5.end(), {h, 1, w, 1});
  b5.insert(b5.end(), {h, 2, w, 2});
  so.insert(so.end(), {2 * h, 2 * w});
  return reshape(broadcast_to(reshape(x, s5), b5), so);
}

template <class T>
BasicTensor<T> pad_replicate(const BasicTensor<T>& x, std::int64_t p) {
  const auto& s = x.shape();
  if (s.size() < 2 || p < 0) throw ShapeError("pad_replicate: bad input " + shape_str(s));
  if (p == 0) return x;
  auto edge_index = [p](std::int64_t n) {
    Index idx;
    for (std::int64_t i = -p; i < n + p; ++i) idx.push_back(std::clamp<std::int64_t>(i, 0, n - 1));
    return idx;
  };
  const auto r = static_cast<std::int64_t>(s.size());
  auto rows = gather(x, r - 2, edge_index(s[r - 2]));
  return gather(rows, r - 1, edge_index(s[r - 1]));
}

template <class T>
BasicTensor<T> conv3x3_replicate(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                                 const BasicTensor<T>& bias) {
  if (weight.rank() != 4 || weight.dim(2) != 3 || weight.dim(3) != 3)
    throw ShapeError("conv3x3_replicate: expected (O,C,3,3) weight, got " + shape_str(weight.shape()));
  return conv2d(pad_replicate(x, 1), weight, bias, 1, 0);
}

template <class T>
BasicTensor<T> l1_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape() != target.shape()) throw ShapeError(two_shapes("l1_loss", pred.shape(), target.shape()));
  return mean(abs(sub(pred, target)));
}

#define BM_INSTANTIATE_OPS(T)                                                                      \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> div(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                    \
  template BasicTensor<T> mul_scalar(const BasicTensor<T>&, T);                                    \
  template BasicTensor<T> exp(const BasicTensor<T>&);                                              \
  template BasicTensor<T> abs(const BasicTensor<T>&);                                              \
  template BasicTensor<T> softplus(const BasicTensor<T>&);                                         \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                          \
  template BasicTensor<T> silu(const BasicTensor<T>&);                                             \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                              \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                             \
  template BasicTensor<T> sum_axis(const BasicTensor<T>&, std::int64_t);                           \
  template BasicTensor<T> mean_axis(const BasicTensor<T>&, std::int64_t);                          \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&,                     \
                                 const BasicTensor<T>&);                                           \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                   \
  template BasicTensor<T> transpose(const BasicTensor<T>&, const Index&);                          \
  template BasicTensor<T> slice(const BasicTensor<T>&, std::int64_t, std::int64_t, std::int64_t);  \
  template BasicTensor<T> pad(const BasicTensor<T>&,                                               \
                              const std::vector<std::pair<std::int64_t, std::int64_t>>&, T);       \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::int64_t);                \
  template BasicTensor<T> broadcast_to(const BasicTensor<T>&, const Shape&);                       \
  template BasicTensor<T> gather(const BasicTensor<T>&, std::int64_t, const Index&);               \
  template BasicTensor<T> scatter_add(const BasicTensor<T>&, std::int64_t, const Index&,           \
                                      std::int64_t);                                               \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                     \
                                 const BasicTensor<T>&, std::int64_t, std::int64_t);               \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                     const BasicTensor<T>&, double);                               \
  template BasicTensor<T> pixel_shuffle(const BasicTensor<T>&, std::int64_t);                      \
  template BasicTensor<T> upsample_nearest2x(const BasicTensor<T>&);                               \
  template BasicTensor<T> pad_replicate(const BasicTensor<T>&, std::int64_t);                      \
  template BasicTensor<T> conv3x3_replicate(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                            const BasicTensor<T>&);                                \
  template BasicTensor<T> l1_loss(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template void kernels::gemm_nn<T>(std::int64_t, std::int64_t, std::int64_t, const T*, const T*, T*); \
  template void kernels::gemm_tn<T>(std::int64_t, std::int64_t, std::int64_t, const T*, const T*, T*); \
  template void kernels::transpose2d<T>(std::int64_t, std::int64_t, const T*, T*);

BM_INSTANTIATE_OPS(float)
BM_INSTANTIATE_OPS(double)

}  // namespace burstmamba
