#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace jmlab {

// Error taxonomy, mapped to process exit codes by the CLI:
// usage/config -> 1, bad input data -> 2, numeric failure -> 3.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Frame arithmetic. All timing in this codebase runs through these two
// helpers so seconds<->frames conversions cannot drift between modules.
// ---------------------------------------------------------------------------

inline constexpr double kFrameRateHz = 12.5;

inline int64_t seconds_to_frames(double seconds) {
  return std::llround(seconds * kFrameRateHz);
}

inline double frames_to_seconds(int64_t frames) {
  return static_cast<double>(frames) / kFrameRateHz;
}

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

constexpr uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Incremental FNV-1a, used for config digests.
class Fnv1a {
 public:
  void add_bytes(const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001B3ULL;
    }
  }
  void add_u64(uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    add_bytes(b, 8);
  }
  void add_string(const std::string& s) {
    add_u64(s.size());
    add_bytes(s.data(), s.size());
  }
  uint64_t digest() const { return h_; }

 private:
  uint64_t h_ = 0xCBF29CE484222325ULL;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 output is fixed by the standard, and the
// distributions below are hand-rolled because libstdc++'s are not portable.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n), rejection sampled.
  uint64_t below(uint64_t n) {
    if (n == 0) throw UsageError("Rng::below: n must be positive");
    uint64_t rem = (~uint64_t{0} % n + 1) % n;  // 2^64 mod n
    uint64_t limit = ~uint64_t{0} - rem;
    uint64_t x;
    do {
      x = next_u64();
    } while (x > limit);
    return x % n;
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller; cosine branch only so one draw consumes exactly two words.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
    constexpr double two_pi = 6.283185307179586476925286766559;
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Worker pool helper. JMLAB_THREADS caps the number of threads.
// ---------------------------------------------------------------------------

inline int thread_count() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (hw > 16) hw = 16;
  const char* env = std::getenv("JMLAB_THREADS");
  if (env && *env) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == nullptr || *end != '\0' || v < 1 || v > 1024)
      throw UsageError(std::string("JMLAB_THREADS must be a positive integer, got '") + env + "'");
    if (v < hw) hw = static_cast<int>(v);
  }
  return hw;
}

// Runs fn(0..n-1). Results must not depend on execution order.
inline void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
  int workers = thread_count();
  if (workers <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (static_cast<size_t>(workers) > n) workers = static_cast<int>(n);
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Little-endian byte buffers for the binary file formats.
// ---------------------------------------------------------------------------

class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(uint16_t v) { le(v, 2); }
  void u32(uint32_t v) { le(v, 4); }
  void u64(uint64_t v) { le(v, 8); }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void bytes(const void* data, size_t n) {
    buf_.append(static_cast<const char*>(data), n);
  }
  const std::string& str() const { return buf_; }

 private:
  void le(uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const void* data, size_t n, std::string what)
      : p_(static_cast<const unsigned char*>(data)), n_(n), what_(std::move(what)) {}

  uint8_t u8() { return static_cast<uint8_t>(le(1)); }
  uint16_t u16() { return static_cast<uint16_t>(le(2)); }
  uint32_t u32() { return static_cast<uint32_t>(le(4)); }
  uint64_t u64() { return le(8); }
  double f64() {
    uint64_t bits = le(8);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void bytes(void* out, size_t n) {
    need(n);
    std::memcpy(out, p_ + off_, n);
    off_ += n;
  }
  size_t remaining() const { return n_ - off_; }
  void expect_end() const {
    if (off_ != n_) throw DataError(what_ + ": trailing bytes after payload");
  }

 private:
  void need(size_t n) const {
    if (n_ - off_ < n) throw DataError(what_ + ": truncated");
  }
  uint64_t le(int n) {
    need(static_cast<size_t>(n));
    uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<uint64_t>(p_[off_ + static_cast<size_t>(i)]) << (8 * i);
    off_ += static_cast<size_t>(n);
    return v;
  }
  const unsigned char* p_;
  size_t n_;
  size_t off_ = 0;
  std::string what_;
};

// ---------------------------------------------------------------------------
// Small file and string helpers shared by the text formats.
// ---------------------------------------------------------------------------

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);
std::vector<std::string> split(const std::string& s, char delim);

}  // namespace jmlab
