#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace ebft {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Deterministic randomness.
//
// All draws go through Rng so that runs are bit-reproducible across
// platforms: mt19937_64 output is fully specified by the standard, and we
// avoid std::*_distribution (whose algorithms are implementation-defined).
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Mixes a seed with stream identifiers, so independent consumers
/// (per context, per step, ...) get decorrelated streams from one seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
  return splitmix64(seed ^ splitmix64(a ^ splitmix64(b)));
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc908ULL)) {}

  uint64_t next_u64() {
    // xorshift of splitmix64 chain; simple, specified, fast.
    state_ = splitmix64(state_);
    return state_;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (no spare caching so the draw count
  /// per call is fixed at two uniforms).
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  /// Samples an index from an (unnormalized is fine) nonnegative weight
  /// vector by CDF walk. Consumes exactly one uniform.
  int categorical(const VectorXd& weights) {
    const double total = weights.sum();
    if (!(total > 0.0)) throw std::domain_error("categorical: weights sum to zero");
    double u = uniform() * total;
    for (int i = 0; i < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) return i;
    }
    return static_cast<int>(weights.size()) - 1;  // guard against roundoff
  }

 private:
  uint64_t state_;
};

// ---------------------------------------------------------------------------
// Hashing (content hashes for checkpoints, manifests, frozen-network checks).
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline uint64_t hash_vector(const VectorXd& v) {
  return fnv1a64(v.data(), static_cast<size_t>(v.size()) * sizeof(double));
}

inline std::string hex64(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Logging. Level comes from EBFT_LOG_LEVEL (error|warn|info|debug).
// ---------------------------------------------------------------------------

enum class LogLevel : int { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("EBFT_LOG_LEVEL");
    if (env == nullptr) return LogLevel::kWarn;
    std::string s(env);
    if (s == "error") return LogLevel::kError;
    if (s == "warn") return LogLevel::kWarn;
    if (s == "info") return LogLevel::kInfo;
    if (s == "debug") return LogLevel::kDebug;
    return LogLevel::kWarn;
  }();
  return level;
}

inline void logf(LogLevel lvl, const char* fmt, ...) {
  if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::fprintf(stderr, "[ebft:%s] ", names[static_cast<int>(lvl)]);
  va_list args;
  va_start(args, fmt);
  std::vfprintf(stderr, fmt, args);
  va_end(args);
  std::fputc('\n', stderr);
}

}  // namespace ebft
