#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "xmed/tensor.hpp"

namespace xmed::testing {

inline Tensor4<double> random_tensor(Shape4 shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor4<double> t(shape);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps entries whose true value
/// is (near) zero from turning rounding noise into a huge ratio.
inline double relative_error(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest relative error between `analytic` and central differences of
/// `loss` with respect to every entry of `x` (x is perturbed in place and
/// restored).
inline double max_fd_error(Tensor4<double>& x, const Tensor4<double>& analytic,
                           const std::function<double()>& loss, double step = 1e-3) {
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = loss();
    x[i] = orig - step;
    const double down = loss();
    x[i] = orig;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2 * step)));
  }
  return worst;
}

inline double weighted_sum(const Tensor4<double>& out, const Tensor4<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * w[i];
  return s;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
#ifdef XMED_TEST_TMP
  std::filesystem::path root = XMED_TEST_TMP;
#else
  std::filesystem::path root = std::filesystem::temp_directory_path() / "xmed_tests";
#endif
  auto dir = root / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace xmed::testing
