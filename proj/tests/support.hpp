#pragma once

#include <algorithm>
#include <limits>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <vector>

#include "mvret/rng.hpp"
#include "mvret/tensor.hpp"

namespace testing_support {

inline mvret::Tensor random_tensor(mvret::Shape shape, mvret::Rng& rng, double scale = 1.0) {
  mvret::Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = scale * rng.normal();
  return t;
}

inline double max_abs_diff(const mvret::Tensor& a, const mvret::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Weighted sum of outputs: a scalar loss with generic, non-degenerate gradients.
inline double project(const mvret::Tensor& out, const mvret::Tensor& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += weights[i] * out[i];
  return s;
}

// Relative-error floor for losses of order one. A central difference of f
// carries about 2*eps*|f|/h of rounding noise, so entries whose magnitude is
// below noise/tol cannot be resolved and are compared absolutely; the floor
// also never drops more than five decades below the largest gradient.
template <class Blocks>
double scaled_fd_floor(const Blocks& blocks, double f0, double h = 1e-5, double tol = 1e-5) {
  double m = 0.0;
  for (const auto* b : blocks)
    for (double g : b->grad.storage()) m = std::max(m, std::abs(g));
  const double noise = 2.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f0)) / h;
  return std::max({1e-8, 1e-5 * m, noise / tol});
}

}  // namespace testing_support

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace testing_support {

// Scratch directory removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("mvret_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
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
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace testing_support
