#pragma once

// Dense row-major matrices, cosine/hinge scalar helpers, a portable seeded
// generator and a finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nirnl {

template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) +
                                  " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  // Copies rows by index into a new matrix.
  BasicMatrix gather_rows(std::span<const std::size_t> idx) const {
    BasicMatrix out(idx.size(), cols_);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto src = row(idx[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }

  template <typename U>
  BasicMatrix<U> cast() const {
    BasicMatrix<U> out(rows_, cols_);
    std::transform(data_.begin(), data_.end(), out.storage().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;
using MatrixD = BasicMatrix<double>;

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T l2_norm(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

// Counts degenerate (zero-norm) cosine evaluations for the caller.
struct CosineDiagnostics {
  std::size_t degenerate = 0;
};

// Zero-norm inputs yield 0 and bump the diagnostic counter.
template <typename T>
T cosine_similarity(std::span<const T> a, std::span<const T> b, CosineDiagnostics* diag = nullptr) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  const T na = l2_norm(a);
  const T nb = l2_norm(b);
  if (na == T(0) || nb == T(0)) {
    if (diag) ++diag->degenerate;
    return T(0);
  }
  T c = dot(a, b) / (na * nb);
  return std::clamp(c, T(-1), T(1));
}

template <typename T>
T cosine_similarity(const std::vector<T>& a, const std::vector<T>& b,
                    CosineDiagnostics* diag = nullptr) {
  return cosine_similarity(std::span<const T>(a), std::span<const T>(b), diag);
}

// Gradient of cos(a, b) with respect to a, accumulated as out += scale * d cos / d a.
// Zero-norm inputs contribute nothing.
template <typename T>
void accumulate_cosine_grad(std::span<const T> a, std::span<const T> b, T scale, std::span<T> out) {
  const T na = l2_norm(a);
  const T nb = l2_norm(b);
  if (na == T(0) || nb == T(0)) return;
  const T c = dot(a, b) / (na * nb);
  const T inv = scale / na;
  for (std::size_t k = 0; k < a.size(); ++k) out[k] += inv * (b[k] / nb - c * a[k] / na);
}

template <typename T>
T hinge(T x) {
  return x > T(0) ? x : T(0);
}

// xoshiro256** seeded through splitmix64. Every derived distribution below is
// implemented here so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
  }

  std::uint64_t seed() const { return seed_; }

  // Independent stream for a numbered sub-task.
  static Rng derive(std::uint64_t root, std::uint64_t task) {
    std::uint64_t x = root ^ (0x9E3779B97F4A7C15ULL * (task + 1));
    return Rng(splitmix64(x));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller; the spare deviate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    shuffle(p.begin(), p.end());
    return p;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

// Loss callback for grad_check: returns the loss at `params` and, when `grad`
// is non-empty, writes the analytic gradient into it.
using DifferentiableLoss = std::function<double(std::span<const double> params, std::span<double> grad)>;

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline GradCheckResult grad_check(const DifferentiableLoss& loss, std::span<const double> params,
                                  double eps = 1e-5) {
  std::vector<double> p(params.begin(), params.end());
  std::vector<double> analytic(p.size(), 0.0);
  const double base = loss(p, analytic);
  if (!std::isfinite(base)) throw std::runtime_error("grad_check: non-finite loss at base point");

  GradCheckResult res;
  std::span<double> no_grad;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + eps;
    const double up = loss(p, no_grad);
    p[i] = orig - eps;
    const double down = loss(p, no_grad);
    p[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::runtime_error("grad_check: non-finite loss probing coordinate " + std::to_string(i));
    const double numeric = (up - down) / (2.0 * eps);
    const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace nirnl
