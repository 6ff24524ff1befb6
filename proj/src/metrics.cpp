#include "burstmamba/metrics.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace burstmamba {

double psnr(const Tensor& a, const Tensor& b, double peak) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.numel() == 0) throw ShapeError("psnr: empty images");
  double se = 0;
  const auto& x = a.vec();
  const auto& y = b.vec();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = double(x[i]) - double(y[i]);
    se += d * d;
  }
  const double mse = se / double(x.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

namespace {

// channel mean of (C,H,W), or the plane itself for (H,W)
std::vector<double> gray(const Tensor& t, std::int64_t& h, std::int64_t& w) {
  if (t.rank() == 2) {
    h = t.dim(0);
    w = t.dim(1);
    return {t.vec().begin(), t.vec().end()};
  }
  if (t.rank() != 3) throw ShapeError("ssim: expected (C,H,W) or (H,W), got " + shape_str(t.shape()));
  const auto c = t.dim(0);
  h = t.dim(1);
  w = t.dim(2);
  std::vector<double> g(static_cast<std::size_t>(h * w), 0.0);
  for (std::int64_t k = 0; k < c; ++k)
    for (std::int64_t p = 0; p < h * w; ++p) g[p] += t.vec()[k * h * w + p];
  for (auto& v : g) v /= double(c);
  return g;
}

// summed-area table with a zero border: (h+1) x (w+1)
std::vector<double> integral(const std::vector<double>& v, std::int64_t h, std::int64_t w) {
  std::vector<double> s(static_cast<std::size_t>((h + 1) * (w + 1)), 0.0);
  for (std::int64_t y = 0; y < h; ++y) {
    double row = 0;
    for (std::int64_t x = 0; x < w; ++x) {
      row += v[y * w + x];
      s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
    }
  }
  return s;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b, double peak) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::int64_t h = 0, w = 0;
  const auto ga = gray(a, h, w);
  const auto gb = gray(b, h, w);
  const auto k = kSsimWindow;
  if (h < k || w < k)
    throw ShapeError("ssim: extents " + std::to_string(h) + "x" + std::to_string(w) + " smaller than the " +
                     std::to_string(k) + "x" + std::to_string(k) + " window");
  std::vector<double> aa(ga.size()), bb(ga.size()), ab(ga.size());
  for (std::size_t i = 0; i < ga.size(); ++i) {
    aa[i] = ga[i] * ga[i];
    bb[i] = gb[i] * gb[i];
    ab[i] = ga[i] * gb[i];
  }
  const auto sa = integral(ga, h, w), sb = integral(gb, h, w);
  const auto saa = integral(aa, h, w), sbb = integral(bb, h, w), sab = integral(ab, h, w);
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  const double n = double(k * k);
  auto box = [&](const std::vector<double>& s, std::int64_t y, std::int64_t x) {
    const auto W = w + 1;
    return s[(y + k) * W + x + k] - s[y * W + x + k] - s[(y + k) * W + x] + s[y * W + x];
  };
  double total = 0;
  for (std::int64_t y = 0; y + k <= h; ++y)
    for (std::int64_t x = 0; x + k <= w; ++x) {
      const double ma = box(sa, y, x) / n, mb = box(sb, y, x) / n;
      const double va = box(saa, y, x) / n - ma * ma;
      const double vb = box(sbb, y, x) / n - mb * mb;
      const double cov = box(sab, y, x) / n - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  return total / double((h - k + 1) * (w - k + 1));
}

}  // namespace burstmamba
