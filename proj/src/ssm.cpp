#include "burstmamba/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace burstmamba {

using autograd::make_result;
using autograd::Node;

namespace {
double g_zoh_perturbation = 0.0;
}

namespace testing {
void set_zoh_perturbation(double eps) { g_zoh_perturbation = eps; }
double zoh_perturbation() { return g_zoh_perturbation; }
}  // namespace testing

double zoh_gain(double a, double dt) {
  const double z = dt * a;
  double g;
  if (std::abs(z) >= kZohSeriesThreshold) {
    g = std::expm1(z) / a;
  } else {
    // (e^z - 1)/a = dt (1 + z/2 + z^2/6 + ...); next term is below 1e-13 relative
    g = dt * (1.0 + z * (0.5 + z / 6.0));
  }
  return g * (1.0 + g_zoh_perturbation);
}

ZohStep discretize_zoh(double a, double b, double dt) {
  if (!(dt > 0)) throw Error("discretize_zoh: step must be positive, got " + std::to_string(dt));
  if (!std::isfinite(a) || !std::isfinite(b)) throw NumericError("discretize_zoh: non-finite input");
  return {std::exp(dt * a), zoh_gain(a, dt) * b};
}

namespace {

// d gain / d dt and d gain / d a.
struct GainDerivs {
  double ddt, da;
};

GainDerivs zoh_gain_derivs(double a, double dt, double ez) {
  const double z = dt * a;
  const double scale = 1.0 + g_zoh_perturbation;
  double da;
  if (std::abs(z) >= kZohSeriesThreshold) {
    da = (z * ez - ez + 1.0) / (a * a);
  } else {
    da = dt * dt * (0.5 + z * (1.0 / 3.0 + z / 8.0));
  }
  return {ez * scale, da * scale};
}

struct CoreDims {
  std::int64_t s, l, d, n;
};

template <class T>
CoreDims check_core(const char* op, const BasicTensor<T>& x, const BasicTensor<T>& delta,
                    const BasicTensor<T>& a, const BasicTensor<T>& b, const BasicTensor<T>& c,
                    const BasicTensor<T>& d_skip) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + ": x must be (S,L,D), got " + shape_str(x.shape()));
  if (delta.shape() != x.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(delta.shape()));
  if (a.rank() != 1) throw ShapeError(std::string(op) + ": a must be (N), got " + shape_str(a.shape()));
  const CoreDims dims{x.dim(0), x.dim(1), x.dim(2), a.dim(0)};
  const Shape sb{dims.s, dims.l, dims.n};
  if (b.shape() != sb) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(sb) + " vs " + shape_str(b.shape()));
  if (c.shape() != sb) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(sb) + " vs " + shape_str(c.shape()));
  if (d_skip.defined() && d_skip.shape() != Shape{dims.d})
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(Shape{dims.d}) + " vs " +
                     shape_str(d_skip.shape()));
  return dims;
}

// Reverse sweep shared by both evaluation orders. h holds h_t for every (s,l,d,n).
template <class T>
void scan_backward(const CoreDims& k, const std::vector<double>& h, const Node<T>& self,
                   const std::vector<T>& gy, std::span<std::vector<T>* const> gin) {
  const auto& x = self.parents[0]->data;
  const auto& delta = self.parents[1]->data;
  const auto& a = self.parents[2]->data;
  const auto& b = self.parents[3]->data;
  const auto& c = self.parents[4]->data;
  const bool has_skip = self.parents.size() > 5;
  const std::vector<T>* dskip = has_skip ? &self.parents[5]->data : nullptr;

  const auto D = k.d, N = k.n, L = k.l;
  std::vector<double> gx(x.size(), 0.0), gdelta(delta.size(), 0.0), gb(b.size(), 0.0),
      gc(c.size(), 0.0), ga(static_cast<std::size_t>(N), 0.0), gd(static_cast<std::size_t>(D), 0.0);
  std::vector<double> gh(static_cast<std::size_t>(D * N));

  for (std::int64_t s = 0; s < k.s; ++s) {
    std::fill(gh.begin(), gh.end(), 0.0);
    for (std::int64_t t = L - 1; t >= 0; --t) {
      const std::size_t row = static_cast<std::size_t>(s * L + t);
      const double* h_t = h.data() + row * D * N;
      const double* h_p = t > 0 ? h_t - D * N : nullptr;
      for (std::int64_t d = 0; d < D; ++d) {
        const std::size_t xi = row * D + d;
        const double gyv = gy[xi];
        const double xv = x[xi];
        const double dt = delta[xi];
        double gxv = 0.0, gdt = 0.0;
        if (has_skip) {
          gxv += gyv * (*dskip)[d];
          gd[d] += gyv * xv;
        }
        for (std::int64_t n = 0; n < N; ++n) {
          const std::size_t bi = row * N + n;
          const std::size_t hi = static_cast<std::size_t>(d * N + n);
          const double an = a[n];
          const double bn = b[bi];
          double& g = gh[hi];
          g += gyv * c[bi];
          gc[bi] += gyv * h_t[hi];
          const double ez = std::exp(dt * an);
          const double phi = zoh_gain(an, dt);
          const auto dphi = zoh_gain_derivs(an, dt, ez);
          const double hp = h_p ? h_p[hi] : 0.0;
          const double g_ab = g * hp;
          const double gu = g * bn * xv;  // d/d(phi)
          gxv += g * phi * bn;
          gb[bi] += g * phi * xv;
          gdt += g_ab * an * ez + gu * dphi.ddt;
          ga[n] += g_ab * dt * ez + gu * dphi.da;
          g *= ez;
        }
        gx[xi] += gxv;
        gdelta[xi] += gdt;
      }
    }
  }
  auto flush = [](std::vector<T>* dst, const std::vector<double>& src) {
    if (!dst) return;
    for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += static_cast<T>(src[i]);
  };
  flush(gin[0], gx);
  flush(gin[1], gdelta);
  flush(gin[2], ga);
  flush(gin[3], gb);
  flush(gin[4], gc);
  if (has_skip) flush(gin[5], gd);
}

template <class T>
std::vector<BasicTensor<T>> core_inputs(const BasicTensor<T>& x, const BasicTensor<T>& delta,
                                        const BasicTensor<T>& a, const BasicTensor<T>& b,
                                        const BasicTensor<T>& c, const BasicTensor<T>& d_skip) {
  std::vector<BasicTensor<T>> in{x, delta, a, b, c};
  if (d_skip.defined()) in.push_back(d_skip);
  return in;
}

// y_t = <c_t, h_t> + d x_t, summed over n in ascending order.
template <class T>
std::vector<T> readout(const CoreDims& k, const std::vector<double>& h, const BasicTensor<T>& x,
                       const BasicTensor<T>& c, const BasicTensor<T>& d_skip) {
  const auto& xv = x.vec();
  const auto& cv = c.vec();
  const std::vector<T>* dv = d_skip.defined() ? &d_skip.vec() : nullptr;
  std::vector<T> y(xv.size());
  for (std::int64_t row = 0; row < k.s * k.l; ++row)
    for (std::int64_t d = 0; d < k.d; ++d) {
      const double* hr = h.data() + (row * k.d + d) * k.n;
      const T* cr = cv.data() + row * k.n;
      double acc = 0.0;
      for (std::int64_t n = 0; n < k.n; ++n) acc += static_cast<double>(cr[n]) * hr[n];
      const std::size_t xi = static_cast<std::size_t>(row * k.d + d);
      if (dv) acc += static_cast<double>((*dv)[d]) * xv[xi];
      y[xi] = static_cast<T>(acc);
    }
  return y;
}

}  // namespace

template <class T>
BasicTensor<T> scan_core(const BasicTensor<T>& x, const BasicTensor<T>& delta,
                         const BasicTensor<T>& a, const BasicTensor<T>& b,
                         const BasicTensor<T>& c, const BasicTensor<T>& d_skip) {
  const auto k = check_core("scan_core", x, delta, a, b, c, d_skip);
  const auto& xv = x.vec();
  const auto& dv = delta.vec();
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto h = std::make_shared<std::vector<double>>(static_cast<std::size_t>(k.s * k.l * k.d * k.n));
  double* hp = h->data();
  for (std::int64_t s = 0; s < k.s; ++s) {
    for (std::int64_t t = 0; t < k.l; ++t) {
      const std::int64_t row = s * k.l + t;
      for (std::int64_t d = 0; d < k.d; ++d) {
        const double xt = xv[static_cast<std::size_t>(row * k.d + d)];
        const double dt = dv[static_cast<std::size_t>(row * k.d + d)];
        if (!(dt > 0)) throw NumericError("scan_core: step must be positive");
        double* ht = hp + (row * k.d + d) * k.n;
        const double* hprev = t > 0 ? ht - k.d * k.n : nullptr;
        for (std::int64_t n = 0; n < k.n; ++n) {
          const double an = av[n];
          const double u = zoh_gain(an, dt) * static_cast<double>(bv[row * k.n + n]) * xt;
          ht[n] = std::exp(dt * an) * (hprev ? hprev[n] : 0.0) + u;
        }
      }
    }
  }
  auto y = readout(k, *h, x, c, d_skip);
  return make_result<T>("scan_core", x.shape(), std::move(y), core_inputs(x, delta, a, b, c, d_skip),
                        [k, h](const Node<T>& self, const std::vector<T>& g,
                               std::span<std::vector<T>* const> gin) {
                          scan_backward<T>(k, *h, self, g, gin);
                        });
}

namespace {

struct Pair {
  double a, b;
};

// (a1,b1) then (a2,b2): h -> a2 (a1 h + b1) + b2
inline Pair combine(const Pair& first, const Pair& second) {
  return {first.a * second.a, second.a * first.b + second.b};
}

// Blelloch exclusive scan in place over a power-of-two buffer.
void exclusive_scan(std::vector<Pair>& v) {
  const std::size_t p = v.size();
  for (std::size_t stride = 1; stride < p; stride *= 2)
    for (std::size_t i = 2 * stride - 1; i < p; i += 2 * stride) v[i] = combine(v[i - stride], v[i]);
  v[p - 1] = {1.0, 0.0};
  for (std::size_t stride = p / 2; stride >= 1; stride /= 2) {
    for (std::size_t i = 2 * stride - 1; i < p; i += 2 * stride) {
      const Pair left = v[i - stride];
      v[i - stride] = v[i];
      v[i] = combine(v[i], left);
    }
    if (stride == 1) break;
  }
}

}  // namespace

template <class T>
BasicTensor<T> scan_core_parallel(const BasicTensor<T>& x, const BasicTensor<T>& delta,
                                  const BasicTensor<T>& a, const BasicTensor<T>& b,
                                  const BasicTensor<T>& c, const BasicTensor<T>& d_skip) {
  const auto k = check_core("scan_core_parallel", x, delta, a, b, c, d_skip);
  const auto& xv = x.vec();
  const auto& dv = delta.vec();
  const auto& av = a.vec();
  const auto& bv = b.vec();
  std::size_t p = 1;
  while (p < static_cast<std::size_t>(k.l)) p *= 2;
  auto h = std::make_shared<std::vector<double>>(static_cast<std::size_t>(k.s * k.l * k.d * k.n));
  std::vector<Pair> elems(p), buf(p);
  for (std::int64_t s = 0; s < k.s; ++s)
    for (std::int64_t d = 0; d < k.d; ++d)
      for (std::int64_t n = 0; n < k.n; ++n) {
        const double an = av[n];
        for (std::int64_t t = 0; t < k.l; ++t) {
          const std::int64_t row = s * k.l + t;
          const double xt = xv[static_cast<std::size_t>(row * k.d + d)];
          const double dt = dv[static_cast<std::size_t>(row * k.d + d)];
          if (!(dt > 0)) throw NumericError("scan_core_parallel: step must be positive");
          elems[t] = {std::exp(dt * an), zoh_gain(an, dt) * static_cast<double>(bv[row * k.n + n]) * xt};
        }
        for (std::size_t t = k.l; t < p; ++t) elems[t] = {1.0, 0.0};
        buf = elems;
        exclusive_scan(buf);
        for (std::int64_t t = 0; t < k.l; ++t) {
          // inclusive prefix applied to h_0 = 0
          (*h)[static_cast<std::size_t>(((s * k.l + t) * k.d + d) * k.n + n)] =
              elems[t].a * buf[t].b + elems[t].b;
        }
      }
  auto y = readout(k, *h, x, c, d_skip);
  return make_result<T>("scan_core_parallel", x.shape(), std::move(y),
                        core_inputs(x, delta, a, b, c, d_skip),
                        [k, h](const Node<T>& self, const std::vector<T>& g,
                               std::span<std::vector<T>* const> gin) {
                          scan_backward<T>(k, *h, self, g, gin);
                        });
}

template <class T>
BasicSsmParams<T> BasicSsmParams<T>::init(std::int64_t dim, std::int64_t state_dim, Rng& rng,
                                          ScanMode mode) {
  if (dim < 1 || state_dim < 1) throw Error("ssm: dimensions must be positive");
  BasicSsmParams p;
  p.mode = mode;
  std::vector<T> a(static_cast<std::size_t>(state_dim));
  for (std::int64_t n = 0; n < state_dim; ++n) a[n] = static_cast<T>(-(n + 1));
  p.a_diag = BasicTensor<T>({state_dim}, std::move(a));

  auto uniform = [&rng](Shape s, double lo, double hi) {
    std::vector<T> v(static_cast<std::size_t>(shape_numel(s)));
    for (auto& e : v) e = static_cast<T>(rng.uniform(lo, hi));
    return BasicTensor<T>(std::move(s), std::move(v));
  };
  const double wb = 1.0 / std::sqrt(static_cast<double>(dim));
  p.b_weight = uniform({state_dim, dim}, -wb, wb);
  p.b_bias = uniform({state_dim}, 0.5, 1.0);
  p.c_weight = uniform({state_dim, dim}, -wb, wb);
  p.c_bias = uniform({state_dim}, -wb, wb);
  p.dt_weight = uniform({dim, dim}, -wb, wb);
  // initial step log-uniform in [1e-3, 1e-1], stored through the softplus inverse
  std::vector<T> dtb(static_cast<std::size_t>(dim));
  for (auto& e : dtb) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    e = static_cast<T>(std::log(std::expm1(dt)));
  }
  p.dt_bias = BasicTensor<T>({dim}, std::move(dtb));
  p.d_skip = BasicTensor<T>::ones({dim});
  return p;
}

template <class T>
std::vector<BasicTensor<T>*> BasicSsmParams<T>::tensors() {
  return {&a_diag, &b_weight, &b_bias, &c_weight, &c_bias, &dt_weight, &dt_bias, &d_skip};
}

template <class T>
std::vector<const BasicTensor<T>*> BasicSsmParams<T>::tensors() const {
  return {&a_diag, &b_weight, &b_bias, &c_weight, &c_bias, &dt_weight, &dt_bias, &d_skip};
}

template <class T>
std::vector<const char*> BasicSsmParams<T>::tensor_names() {
  return {"a_diag", "b_weight", "b_bias", "c_weight", "c_bias", "dt_weight", "dt_bias", "d_skip"};
}

template <class T>
void BasicSsmParams<T>::clamp_a() {
  for (auto& v : a_diag.mutable_data()) v = std::min(v, static_cast<T>(kMaxStableA));
}

namespace {

template <class T>
BasicTensor<T> as_batched(const BasicTensor<T>& x, const char* op) {
  if (!x.defined()) throw Error(std::string(op) + ": undefined input");
  if (x.rank() == 2) return reshape(x, {1, x.dim(0), x.dim(1)});
  if (x.rank() == 3) return x;
  throw ShapeError(std::string(op) + ": expected (L,D) or (S,L,D), got " + shape_str(x.shape()));
}

template <class T>
void check_params(const char* op, const BasicTensor<T>& x3, const BasicSsmParams<T>& p) {
  if (x3.dim(2) != p.dim())
    throw ShapeError(std::string(op) + ": channels " + std::to_string(x3.dim(2)) + " vs params " +
                     std::to_string(p.dim()));
}

template <class T>
BasicTensor<T> run_scan(const char* op, const BasicTensor<T>& x, const BasicSsmParams<T>& p,
                        bool fixed, bool parallel) {
  auto x3 = as_batched(x, op);
  check_params(op, x3, p);
  const auto in = scan_inputs(x3, p, fixed);
  const BasicTensor<T> skip = p.use_skip ? p.d_skip : BasicTensor<T>{};
  auto y = parallel ? scan_core_parallel(x3, in.delta, p.a_diag, in.b, in.c, skip)
                    : scan_core(x3, in.delta, p.a_diag, in.b, in.c, skip);
  return x.rank() == 2 ? reshape(y, x.shape()) : y;
}

template <class T>
void require_time_invariant(const char* op, const BasicSsmParams<T>& p) {
  if (p.mode != ScanMode::time_invariant)
    throw Error(std::string(op) + ": convolutional form requires time-invariant parameters");
}

}  // namespace

template <class T>
ScanInputs<T> scan_inputs(const BasicTensor<T>& x3, const BasicSsmParams<T>& p, bool fixed) {
  const auto s = x3.dim(0), l = x3.dim(1);
  const auto n = p.state_dim();
  if (fixed) {
    return {broadcast_to(softplus(p.dt_bias), {s, l, p.dim()}), broadcast_to(p.b_bias, {s, l, n}),
            broadcast_to(p.c_bias, {s, l, n})};
  }
  return {softplus(linear(x3, p.dt_weight, p.dt_bias)), linear(x3, p.b_weight, p.b_bias),
          linear(x3, p.c_weight, p.c_bias)};
}

template <class T>
BasicTensor<T> scan_recurrent(const BasicTensor<T>& x, const BasicSsmParams<T>& p, bool fixed) {
  return run_scan("scan_recurrent", x, p, fixed, false);
}

template <class T>
BasicTensor<T> selective_scan(const BasicTensor<T>& x, const BasicSsmParams<T>& p) {
  return run_scan("selective_scan", x, p, p.mode == ScanMode::time_invariant, false);
}

template <class T>
BasicTensor<T> selective_scan_parallel(const BasicTensor<T>& x, const BasicSsmParams<T>& p) {
  return run_scan("selective_scan_parallel", x, p, p.mode == ScanMode::time_invariant, true);
}

template <class T>
BasicTensor<T> build_kernel(const BasicSsmParams<T>& p, std::int64_t k) {
  require_time_invariant("build_kernel", p);
  if (k < 0) throw Error("build_kernel: k must be >= 0");
  const auto D = p.dim(), N = p.state_dim();
  const auto delta = softplus(p.dt_bias).vec();  // same rounding as the recurrence
  std::vector<double> acc(static_cast<std::size_t>((k + 1) * D), 0.0);
  for (std::int64_t d = 0; d < D; ++d) {
    const double dt = delta[d];
    for (std::int64_t n = 0; n < N; ++n) {
      const double an = p.a_diag.vec()[n];
      const double ab = std::exp(dt * an);
      double term = static_cast<double>(p.c_bias.vec()[n]) * zoh_gain(an, dt) * p.b_bias.vec()[n];
      for (std::int64_t j = 0; j <= k; ++j) {
        acc[static_cast<std::size_t>(j * D + d)] += term;
        term *= ab;
      }
    }
  }
  return BasicTensor<T>({k + 1, D}, std::vector<T>(acc.begin(), acc.end()));
}

template <class T>
BasicTensor<T> scan_convolutional(const BasicTensor<T>& x, const BasicSsmParams<T>& p) {
  require_time_invariant("scan_convolutional", p);
  auto x3 = as_batched(x, "scan_convolutional");
  check_params("scan_convolutional", x3, p);
  const auto S = x3.dim(0), L = x3.dim(1), D = x3.dim(2);
  const auto kernel = build_kernel(p, L - 1).vec();
  const auto& xv = x3.vec();
  std::vector<T> y(xv.size());
  for (std::int64_t s = 0; s < S; ++s)
    for (std::int64_t t = 0; t < L; ++t)
      for (std::int64_t d = 0; d < D; ++d) {
        double acc = 0.0;
        for (std::int64_t j = 0; j <= t; ++j)
          acc += static_cast<double>(kernel[j * D + d]) * xv[(s * L + t - j) * D + d];
        if (p.use_skip) acc += static_cast<double>(p.d_skip.vec()[d]) * xv[(s * L + t) * D + d];
        y[(s * L + t) * D + d] = static_cast<T>(acc);
      }
  return BasicTensor<T>(x.shape(), std::move(y));
}

#define BM_INSTANTIATE_SSM(T)                                                                     \
  template struct BasicSsmParams<T>;                                                              \
  template BasicTensor<T> scan_core(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                    const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                    const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> scan_core_parallel(const BasicTensor<T>&, const BasicTensor<T>&,        \
                                             const BasicTensor<T>&, const BasicTensor<T>&,        \
                                             const BasicTensor<T>&, const BasicTensor<T>&);       \
  template ScanInputs<T> scan_inputs(const BasicTensor<T>&, const BasicSsmParams<T>&, bool);      \
  template BasicTensor<T> scan_recurrent(const BasicTensor<T>&, const BasicSsmParams<T>&, bool);  \
  template BasicTensor<T> selective_scan(const BasicTensor<T>&, const BasicSsmParams<T>&);        \
  template BasicTensor<T> selective_scan_parallel(const BasicTensor<T>&, const BasicSsmParams<T>&); \
  template BasicTensor<T> build_kernel(const BasicSsmParams<T>&, std::int64_t);                   \
  template BasicTensor<T> scan_convolutional(const BasicTensor<T>&, const BasicSsmParams<T>&);

BM_INSTANTIATE_SSM(float)
BM_INSTANTIATE_SSM(double)

}  // namespace burstmamba
