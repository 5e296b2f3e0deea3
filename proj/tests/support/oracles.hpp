#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. None of these call into the library code they check.

#include "emblora/image.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <tuple>
#include <utility>
#include <vector>

namespace oracle {

// Softmax attention written out with loops.
inline Eigen::MatrixXd dense_attention(const Eigen::MatrixXd& F, const Eigen::MatrixXd& Wq, const Eigen::MatrixXd& Wk,
                                       const Eigen::MatrixXd& Wv, const Eigen::MatrixXd& Wo) {
  const auto n = F.rows();
  const auto proj = [&](const Eigen::MatrixXd& W) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, W.cols());
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < W.cols(); ++j)
        for (Eigen::Index k = 0; k < F.cols(); ++k) out(i, j) += F(i, k) * W(k, j);
    return out;
  };
  const Eigen::MatrixXd Q = proj(Wq), K = proj(Wk), V = proj(Wv);
  const double inv = 1.0 / std::sqrt(static_cast<double>(Wq.cols()));
  Eigen::MatrixXd mixed = Eigen::MatrixXd::Zero(n, V.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> s(n);
    double mx = -1e300;
    for (Eigen::Index j = 0; j < n; ++j) {
      double d = 0;
      for (Eigen::Index k = 0; k < Q.cols(); ++k) d += Q(i, k) * K(j, k);
      s[j] = d * inv;
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (auto& v : s) z += (v = std::exp(v - mx));
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index k = 0; k < V.cols(); ++k) mixed(i, k) += s[j] / z * V(j, k);
  }
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, Wo.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < Wo.cols(); ++j)
      for (Eigen::Index k = 0; k < Wo.rows(); ++k) out(i, j) += mixed(i, k) * Wo(k, j);
  return out;
}

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  long double ab = 0, aa = 0, bb = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return static_cast<double>(ab / std::sqrt(aa * bb));
}

// Direct O(N^4) DFT of Rec.601 luma; high = radial frequency above cutoff * Nyquist.
inline double dft_hf_ratio(const emblora::Image& img, double cutoff) {
  const int W = img.width, H = img.height;
  std::vector<double> g(static_cast<std::size_t>(W) * H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (img.channels == 1) {
        g[y * W + x] = img.at(y, x, 0);
      } else {
        g[y * W + x] = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
      }
    }
  const double pi = std::acos(-1.0);
  double total = 0, high = 0;
  for (int v = 0; v < H; ++v)
    for (int u = 0; u < W; ++u) {
      if (u == 0 && v == 0) continue;
      std::complex<double> acc = 0;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          acc += g[y * W + x] * std::polar(1.0, -2 * pi * (static_cast<double>(u) * x / W + static_cast<double>(v) * y / H));
      const double e = std::norm(acc);
      // Signed frequency folded into [-1/2, 1/2].
      const double fu = (u <= W / 2 ? u : u - W) / static_cast<double>(W);
      const double fv = (v <= H / 2 ? v : v - H) / static_cast<double>(H);
      total += e;
      if (std::sqrt(fu * fu + fv * fv) > cutoff * 0.5) high += e;
    }
  return total <= 1e-12 ? 0.0 : high / total;
}

// Hellinger distance from integer bin counts: sqrt(0.5 * sum (sqrt p - sqrt q)^2), x100, channel mean.
inline double histogram_hellinger(const emblora::Image& a, const emblora::Image& b, int bins = 64) {
  const auto counts = [bins](const emblora::Image& img, int c) {
    std::map<int, long> m;
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const double v = std::clamp(img.at(y, x, c), 0.0, 1.0);
        int k = static_cast<int>(std::floor(v * bins));
        if (k == bins) k = bins - 1;
        ++m[k];
      }
    return m;
  };
  double acc = 0;
  for (int c = 0; c < 3; ++c) {
    auto p = counts(a, c), q = counts(b, c);
    const double np = static_cast<double>(a.pixel_count()), nq = static_cast<double>(b.pixel_count());
    double s = 0;
    for (int k = 0; k < bins; ++k) {
      const double d = std::sqrt(p[k] / np) - std::sqrt(q[k] / nq);
      s += d * d;
    }
    acc += std::sqrt(0.5 * s);
  }
  return 100.0 * acc / 3.0;
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  long double m = 0;
  for (double x : xs) m += x;
  m /= xs.size();
  long double v = 0;
  for (double x : xs) v += (x - m) * (x - m);
  return {static_cast<double>(m), static_cast<double>(std::sqrt(v / xs.size()))};
}

// Keep the ceil(n/2) highest style scores, then the ceil(n/4) keepers with the lowest design scores.
struct Selection {
  std::vector<int> kept;
  std::vector<int> final;
};

inline Selection select(const std::vector<double>& style, const std::vector<double>& design) {
  const int n = static_cast<int>(style.size());
  std::vector<std::pair<double, int>> s;
  for (int i = 0; i < n; ++i) s.push_back({-style[i], i});
  std::sort(s.begin(), s.end());
  Selection out;
  const int half = static_cast<int>(std::ceil(n / 2.0)), quarter = static_cast<int>(std::ceil(n / 4.0));
  for (int i = 0; i < half; ++i) out.kept.push_back(s[i].second);
  // Design ties go to the keeper with the better style rank.
  std::vector<std::tuple<double, int, int>> d;
  for (int r = 0; r < half; ++r) d.push_back({design[out.kept[r]], r, out.kept[r]});
  std::sort(d.begin(), d.end());
  for (int i = 0; i < quarter; ++i) out.final.push_back(std::get<2>(d[i]));
  return out;
}

// CIELAB from sRGB with the XYZ matrix inverted numerically and the white
// point taken as the XYZ of RGB (1, 1, 1).
struct Lab {
  double L, a, b;
};

inline Lab srgb_to_lab(double r, double g, double b) {
  Eigen::Matrix3d M;
  M << 0.4124564, 0.3575761, 0.1804375, 0.2126729, 0.7151522, 0.0721750, 0.0193339, 0.1191920, 0.9503041;
  const auto lin = [](double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); };
  const Eigen::Vector3d xyz = M * Eigen::Vector3d(lin(r), lin(g), lin(b));
  const Eigen::Vector3d white = M * Eigen::Vector3d::Ones();
  const auto f = [](double t) {
    const double e = 216.0 / 24389.0, k = 24389.0 / 27.0;
    return t > e ? std::cbrt(t) : (k * t + 16.0) / 116.0;
  };
  const double fx = f(xyz[0] / white[0]), fy = f(xyz[1] / white[1]), fz = f(xyz[2] / white[2]);
  return {116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)};
}

inline emblora::Image constant(int w, int h, double r, double g, double b) {
  emblora::Image img(w, h, 3);
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    img.data[3 * i] = r;
    img.data[3 * i + 1] = g;
    img.data[3 * i + 2] = b;
  }
  return img;
}

inline emblora::Image checkerboard(int size, int cell = 1) {
  emblora::Image img(size, size, 3);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = ((x / cell + y / cell) % 2) ? 1.0 : 0.0;
  return img;
}

inline emblora::Image random_image(int w, int h, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  emblora::Image img(w, h, 3);
  for (double& v : img.data) v = u(eng);
  return img;
}

// Random image snapped to 8-bit levels, as images read from PNG are.
inline emblora::Image random_image8(int w, int h, std::uint64_t seed) {
  auto img = random_image(w, h, seed);
  for (double& v : img.data) v = std::round(v * 255.0) / 255.0;
  return img;
}

// Smooth random field: a few low-frequency sinusoids per channel.
inline emblora::Image smooth_image(int w, int h, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  emblora::Image img(w, h, 3);
  const double pi = std::acos(-1.0);
  for (int c = 0; c < 3; ++c) {
    const double ax = 1 + 2 * u(eng), ay = 1 + 2 * u(eng), ph = 2 * pi * u(eng), base = 0.3 + 0.4 * u(eng);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.at(y, x, c) = base + 0.25 * std::sin(2 * pi * (ax * x / w + ay * y / h) + ph);
  }
  return img;
}

inline double max_abs_diff(const emblora::Image& a, const emblora::Image& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace oracle
