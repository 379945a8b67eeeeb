#pragma once

// Independent reference computations used by unit and acceptance tests.
// Nothing here calls into picl_core for the quantity being checked.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

namespace oracle {

/// Textbook two-pass Pearson correlation.
inline double pearson_two_pass(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

/// Symmetric free two-mass chain (masses m, spring k, natural length l),
/// started at rest with the spring stretched by d. The separation obeys
/// r(t) = l + d cos(w t) with w = sqrt(2k/m); the centre of mass stays put.
struct TwoMassSho {
  double m = 1.0, k = 0.125, l = 1.0, d = 0.2;

  double omega() const { return std::sqrt(2.0 * k / m); }
  double x1(double t) const { return 0.5 * (l + d) - 0.5 * (l + d * std::cos(omega() * t)); }
  double x2(double t) const { return 0.5 * (l + d) + 0.5 * (l + d * std::cos(omega() * t)); }
  double v1(double t) const { return 0.5 * d * omega() * std::sin(omega() * t); }
  double v2(double t) const { return -v1(t); }
};

/// ||p - t|| / (||p|| + ||t||) straight from the definition.
inline double bounded_error(std::span<const double> p, std::span<const double> t) {
  double d = 0.0, np = 0.0, nt = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    d += (p[i] - t[i]) * (p[i] - t[i]);
    np += p[i] * p[i];
    nt += t[i] * t[i];
  }
  if (np == 0.0 && nt == 0.0) return 0.0;
  return std::sqrt(d) / (std::sqrt(np) + std::sqrt(nt));
}

/// Central finite difference of f at every coordinate of x.
inline std::vector<double> central_difference(const std::function<double(std::span<const double>)>& f,
                                              std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// SAE loss by explicit loops: mean over rows of ||x - x_hat||^2 plus
/// lambda * mean over rows of ||c||_1. Parameters flat in (W_e, b_e, W_d, b_d)
/// order, W_e row-major (code x input), W_d row-major (input x code).
inline double sae_loss(std::span<const double> flat, std::size_t H, std::size_t C,
                       std::span<const double> batch, double lambda) {
  const double* we = flat.data();
  const double* be = we + C * H;
  const double* wd = be + C;
  const double* bd = wd + H * C;
  const std::size_t n = batch.size() / H;
  double rec = 0.0, l1 = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const double* x = batch.data() + s * H;
    std::vector<double> c(C);
    for (std::size_t u = 0; u < C; ++u) {
      double z = be[u];
      for (std::size_t k = 0; k < H; ++k) z += we[u * H + k] * x[k];
      c[u] = z > 0.0 ? z : 0.0;
      l1 += c[u];
    }
    for (std::size_t k = 0; k < H; ++k) {
      double y = bd[k];
      for (std::size_t u = 0; u < C; ++u) y += wd[k * C + u] * c[u];
      rec += (x[k] - y) * (x[k] - y);
    }
  }
  return rec / static_cast<double>(n) + lambda * l1 / static_cast<double>(n);
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "picl") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

}  // namespace oracle
