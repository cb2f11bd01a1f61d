#pragma once

#include <cstdint>
#include <atomic>
#include <cmath>
#include <random>
#include <thread>
#include <vector>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace cclseg {

using Index = Eigen::Index;

// Contract checks throw; callers that can recover catch std::runtime_error.
#define CCLSEG_REQUIRE(cond, msg)                                  \
  do {                                                             \
    if (!(cond)) throw std::runtime_error(std::string(msg));       \
  } while (0)

inline void warn(const std::string& msg) {
  std::fputs(("[cclseg warn] " + msg + "\n").c_str(), stderr);
}

inline int num_threads() {
  static int n = [] {
    if (const char* env = std::getenv("CCLSEG_THREADS")) {
      const int v = std::atoi(env);
      if (v >= 1) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return n;
}

// Deterministic data-parallel loop: contiguous chunks per thread, results
// must be written to disjoint locations (reductions are the caller's job and
// must run in index order).
template <class Fn>
void parallel_for(Eigen::Index n, Fn&& fn) {
  const int threads = std::min<Eigen::Index>(num_threads(), n);
  if (threads <= 1) {
    for (Eigen::Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  const Eigen::Index chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const Eigen::Index lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (Eigen::Index i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

// Process-wide byte accounting for tensor storage. Single-writer in the
// benchmark path; atomics keep it safe if tests run tensors on threads.
class MemTracker {
 public:
  static MemTracker& instance() {
    static MemTracker t;
    return t;
  }
  void add(long long bytes) {
    long long cur = current_.fetch_add(bytes) + bytes;
    long long peak = peak_.load();
    while (cur > peak && !peak_.compare_exchange_weak(peak, cur)) {
    }
  }
  void sub(long long bytes) { current_.fetch_sub(bytes); }
  void reset_peak() { peak_.store(current_.load()); }
  long long current_bytes() const { return current_.load(); }
  long long peak_bytes() const { return peak_.load(); }

 private:
  std::atomic<long long> current_{0};
  std::atomic<long long> peak_{0};
};

// Scoped peak measurement: peak bytes allocated while the scope is alive,
// relative to the level at entry.
class MemScope {
 public:
  MemScope() : base_(MemTracker::instance().current_bytes()) {
    MemTracker::instance().reset_peak();
  }
  long long peak_above_base() const {
    return MemTracker::instance().peak_bytes() - base_;
  }

 private:
  long long base_;
};

// Deterministic RNG. All draws are stateless functions of the engine so the
// stream serializes exactly (std::normal_distribution would hide a cached
// spare value).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

  std::uint64_t raw() { return gen_(); }

  // [0,1)
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds, rejection-free enough for desk scale
  int uniform_int(int lo, int hi) {
    CCLSEG_REQUIRE(hi >= lo, "uniform_int: bad range");
    const std::uint64_t n = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(gen_() % n);
  }

  double normal() {
    // Box-Muller, no cached spare
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (Index i = static_cast<Index>(v.size()) - 1; i > 0; --i) {
      const int j = uniform_int(0, static_cast<int>(i));
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    CCLSEG_REQUIRE(!is.fail(), "Rng::deserialize: malformed state");
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace cclseg
