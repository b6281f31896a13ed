#pragma once

// Shared helpers: random tensors, finite-difference gradient checks, tiny
// model configs, and temporary directories.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "caft/config.hpp"
#include "caft/ops.hpp"
#include "caft/rng.hpp"
#include "caft/tensor.hpp"

namespace caft::test {

inline std::vector<double> random_values(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline Tensor random_tensor(Rng& rng, const Shape& shape, bool grad = true, double lo = -1.0, double hi = 1.0) {
  return Tensor::from(shape, random_values(rng, numel_of(shape), lo, hi), grad);
}

/// Random shape of the given rank with extents in [lo, hi].
inline Shape random_shape(Rng& rng, std::size_t rank, std::size_t lo = 1, std::size_t hi = 4) {
  Shape s(rank);
  for (auto& e : s) e = lo + rng.below(hi - lo + 1);
  return s;
}

struct GradCheck {
  double worst = 0.0;  // max |analytic - fd| / (|fd| + kFdFloor)
  std::string where;
};

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdTolerance = 1e-4;
/// Absolute floor under the relative error, above central-difference noise.
inline constexpr double kFdFloor = 1e-6;

/// Checks d(f)/d(leaf) for every entry of every leaf by central differences.
/// `f` must rebuild its graph from the leaves' current values on each call.
/// `entries_per_leaf` (0 = all) limits the checked entries to a seeded sample.
inline GradCheck check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                                 std::size_t entries_per_leaf = 0, std::uint64_t sample_seed = 0) {
  Tape tape;
  std::vector<std::vector<double>> analytic;
  {
    TapeScope scope(tape);
    for (auto& l : leaves) l.zero_grad();
    Tensor y = f();
    tape.backward(y);
    for (auto& l : leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());
    tape.reset();
  }
  auto value = [&] {
    NoGradGuard guard;
    return f().item();
  };
  GradCheck out;
  Rng pick(sample_seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto vals = leaves[li].mutable_values();
    std::vector<std::size_t> idx;
    if (entries_per_leaf == 0 || entries_per_leaf >= vals.size()) {
      for (std::size_t i = 0; i < vals.size(); ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < entries_per_leaf; ++i) idx.push_back(pick.below(vals.size()));
    }
    for (auto i : idx) {
      const double x0 = vals[i];
      vals[i] = x0 + kFdStep;
      const double up = value();
      vals[i] = x0 - kFdStep;
      const double down = value();
      vals[i] = x0;
      const double fd = (up - down) / (2 * kFdStep);
      const double err = std::abs(analytic[li][i] - fd) / (std::abs(fd) + kFdFloor);
      if (err > out.worst) {
        out.worst = err;
        char buf[160];
        std::snprintf(buf, sizeof buf, "leaf %zu entry %zu analytic %.6e fd %.6e", li, i, analytic[li][i], fd);
        out.where = buf;
      }
    }
  }
  return out;
}

/// sum(y * w) for fixed random weights, so every output entry matters.
inline Tensor weighted_sum(const Tensor& y, const Tensor& w) { return ops::sum_all(ops::mul(y, w)); }

/// Model small enough for end-to-end finite differences.
inline ModelConfig tiny_model(std::size_t vocab_size) {
  ModelConfig m;
  m.dim = 8;
  m.sub_layers = 1;
  m.whole_layers = 1;
  m.heads = 2;
  m.mlp_ratio = 2;
  m.context_sub = 8;
  m.chunks = 2;
  m.sub_captions = 3;
  m.vocab_size = vocab_size;
  m.image_size = 12;
  m.superpixels = 9;
  m.schedule = {6, 4, 2};
  m.stage_blocks = 1;
  m.kmeans_iters = 3;
  m.pool_heads = 2;
  return m;
}

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("caft_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
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
  std::string str(const std::string& child = {}) const { return child.empty() ? path_.string() : (path_ / child).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace caft::test
