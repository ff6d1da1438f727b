#pragma once

// Shared plumbing: error types, deterministic RNG, digests, logging,
// tiny parallel_for, file helpers.

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ula {

// =============================================================================
// Errors. Library code throws; the C API boundary maps these to status codes.
// =============================================================================

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};
struct CompatError : std::runtime_error {
  explicit CompatError(const std::string& msg) : std::runtime_error(msg) {}
};
struct LengthError : std::runtime_error {
  explicit LengthError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};
// PSG produced nothing within its pass budget; carries the reject histogram.
struct UnderYieldError : std::runtime_error {
  explicit UnderYieldError(const std::string& msg) : std::runtime_error(msg) {}
};

// =============================================================================
// RNG. Generator and distribution helpers are hand-rolled because
// std::*_distribution output is implementation-defined.
// =============================================================================

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(split_mix(seed)) {}

  uint64_t next_u64() {
    // splitmix-seeded xorshift64*: the whole stream is pinned here, not in
    // the standard library, so artifacts reproduce across toolchains.
    uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545F4914F6CDD1DULL;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n);

  // standard normal via Box-Muller (no cached spare: keeps streams splittable)
  double normal();

  // derive an independent stream, e.g. per (sentence, pass)
  static uint64_t mix(uint64_t a, uint64_t b);

 private:
  static uint64_t split_mix(uint64_t x);
  uint64_t state_;
};

// Fisher-Yates prefix shuffle: returns k distinct indices drawn from [0, n).
std::vector<size_t> sample_without_replacement(size_t n, size_t k, Rng& rng);

// =============================================================================
// Digests (FNV-1a 64) for config/content fingerprints.
// =============================================================================

uint64_t fnv1a64(const void* data, size_t len);
uint64_t fnv1a64(const std::string& s);
std::string hex64(uint64_t v);
std::string digest_hex(const std::string& s);

// =============================================================================
// Logging. Level comes from the ULA_LOG env var (debug|info|warn|error).
// =============================================================================

enum class LogLevel { Debug = 0, Info = 1, Warn = 2, Error = 3 };
LogLevel log_level();
void log_msg(LogLevel level, const std::string& msg);
inline void log_debug(const std::string& m) { log_msg(LogLevel::Debug, m); }
inline void log_info(const std::string& m) { log_msg(LogLevel::Info, m); }
inline void log_warn(const std::string& m) { log_msg(LogLevel::Warn, m); }

// =============================================================================
// parallel_for: chunked index loop. fn must be pure per index; with
// threads <= 1 it degenerates to a plain loop. Output ordering is the
// caller's responsibility (index-addressed writes keep results identical
// for any thread count).
// =============================================================================

void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn);

// =============================================================================
// Files
// =============================================================================

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
bool file_exists(const std::string& path);
void make_dirs(const std::string& path);

// Deterministic float formatting for CSV/JSON artifacts (round-trip exact).
std::string format_double(double v);

}  // namespace ula
