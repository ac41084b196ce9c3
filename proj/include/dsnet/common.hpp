#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dsnet {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using IVec = Eigen::VectorXi;

/// Bad inputs: malformed data, inconsistent dimensions, invalid configuration.
struct validation_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Numerical breakdown: divergence, degenerate curvature, failed calibration.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent child seed from (master, stream). Used everywhere a
/// task needs its own stream so that results do not depend on scheduling order.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
    return splitmix64(master ^ splitmix64(stream + 0x517cc1b727220a95ULL));
}

/// Deterministic RNG with explicit seed splitting. Draws are identical across
/// platforms (mt19937_64 is fully specified; transforms below avoid libstdc++
/// distribution internals).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : seed_(seed), eng_(splitmix64(seed)) {}

    std::uint64_t seed() const { return seed_; }

    /// Child stream independent of how far this generator has advanced.
    Rng split(std::uint64_t stream) const { return Rng(derive_seed(seed_, stream)); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    /// Uniform on (0, 1].
    double uniform_pos() { return 1.0 - uniform(); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller.
    double normal() {
        const double u = uniform_pos();
        const double v = uniform();
        return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586476925286766559 * v);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    /// Uniform integer in {0, ..., n-1}.
    int uniform_int(int n) {
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t draw;
        do {
            draw = eng_();
        } while (draw >= limit);
        return static_cast<int>(draw % bound);
    }

    /// Fisher-Yates shuffle of indices 0..n-1.
    std::vector<int> permutation(int n) {
        std::vector<int> idx(n);
        for (int i = 0; i < n; ++i) idx[i] = i;
        for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[uniform_int(i + 1)]);
        return idx;
    }

    /// Categorical draw from unnormalized nonnegative weights.
    int categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double u = uniform() * total;
        for (std::size_t k = 0; k + 1 < weights.size(); ++k) {
            u -= weights[k];
            if (u < 0.0) return static_cast<int>(k);
        }
        return static_cast<int>(weights.size()) - 1;
    }

  private:
    std::uint64_t seed_;
    std::mt19937_64 eng_;
};

inline double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n-1 denominator).
inline double sample_sd(const std::vector<double>& v) {
    const std::size_t n = v.size();
    if (n < 2) return 0.0;
    const double m = mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(n - 1));
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw validation_error("median of empty sample");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline int thread_count_from_env(int jobs) {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (const char* env = std::getenv("DSNET_THREADS")) {
        const int requested = std::atoi(env);
        if (requested > 0) hw = requested;
    }
    return std::max(1, std::min(hw, jobs));
}

/// Runs fn(i) for i in 0..n-1 on up to `threads` workers. Work items must be
/// independent; callers collect results by index so output order never depends
/// on scheduling.
inline void parallel_for(int n, const std::function<void(int)>& fn, int threads = 0) {
    if (n <= 0) return;
    if (threads <= 0) threads = thread_count_from_env(n);
    threads = std::min(threads, n);
    if (threads == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads), nullptr);
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(t)] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace dsnet
