#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace aclip {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  using Error::Error;
};
struct IndexError : Error {
  using Error::Error;
};
struct ArgumentError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct GeometryError : Error {
  using Error::Error;
};
struct StructuralError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct TrainingDivergence : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// All randomness flows through Rng, an mt19937_64 with hand-rolled value
// mappings so every draw is reproducible bit-for-bit from its seed. Streams
// for independent purposes are derived with mix_seed so that adding a
// consumer never perturbs another stream.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a) { return splitmix64(a); }

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return mix_seed(splitmix64(a) ^ (b + 0x9E3779B97F4A7C15ull), rest...);
}

// Stream tags keep derived seeds for distinct purposes disjoint.
enum class Stream : std::uint64_t {
  Init = 1,
  Crop = 2,
  Color = 3,
  Select = 4,
  Batch = 5,
  Caption = 6,
  DataGen = 7,
  Scratch = 8,
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller (no cached second value)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double truncated_normal(double stddev, double bound = 2.0) {
    double z = normal();
    while (std::abs(z) > bound) z = normal();
    return z * stddev;
  }

  // [0, n), unbiased via rejection
  std::int64_t uniform_int(std::int64_t n) {
    if (n <= 0) throw ArgumentError("uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x = eng_();
    while (x >= limit) x = eng_();
    return static_cast<std::int64_t>(x % un);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[static_cast<std::size_t>(i)],
                v[static_cast<std::size_t>(uniform_int(i + 1))]);
    }
  }

  // k distinct values from [0, n), returned sorted ascending
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k < 0 || k > n) throw ArgumentError("sample_without_replacement: k out of range");
    std::vector<int> pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
      const auto j = i + static_cast<int>(uniform_int(n - i));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    pool.resize(static_cast<std::size_t>(k));
    std::sort(pool.begin(), pool.end());
    return pool;
  }

 private:
  std::mt19937_64 eng_;
};

inline Rng derive_rng(std::uint64_t seed, Stream tag, std::uint64_t a = 0,
                      std::uint64_t b = 0, std::uint64_t c = 0) {
  return Rng(mix_seed(seed, static_cast<std::uint64_t>(tag), a, b, c));
}

// ---------------------------------------------------------------------------
// Normalized crop rectangles
// ---------------------------------------------------------------------------

struct CropRect {
  double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }

  bool well_formed() const {
    return x0 < x1 && y0 < y1 && x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0;
  }

  bool contains(const CropRect& inner, double tol = 1e-12) const {
    return inner.x0 >= x0 - tol && inner.y0 >= y0 - tol && inner.x1 <= x1 + tol &&
           inner.y1 <= y1 + tol;
  }

  bool contains_point(double x, double y) const {
    return x >= x0 && x < x1 && y >= y0 && y < y1;
  }

  static CropRect full() { return CropRect{0.0, 0.0, 1.0, 1.0}; }
};

}  // namespace aclip
