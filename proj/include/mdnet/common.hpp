#pragma once

#include <cstdint>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdnet {

// All numerics run in double precision: the gradient suite compares against
// central finite differences at rel. error 1e-3, which float cannot sustain.
using real = double;

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// ---------- error types ----------

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

[[noreturn]] inline void shape_fail(const std::string& where, const std::string& what) {
  throw ShapeError(where.empty() ? what : where + ": " + what);
}

// Neumaier compensated summation. Aggregation must not depend on the order
// clients hand cases in, so plain += is not good enough.
struct KahanSum {
  real sum = 0.0;
  real c = 0.0;
  void add(real x) {
    real t = sum + x;
    if (std::abs(sum) >= std::abs(x))
      c += (sum - t) + x;
    else
      c += (x - t) + sum;
    sum = t;
  }
  real value() const { return sum + c; }
};

inline bool all_finite(const std::vector<real>& v) {
  for (real x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace mdnet
