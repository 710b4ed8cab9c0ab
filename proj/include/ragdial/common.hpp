#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace ragdial {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

using Tokens = std::vector<std::string>;

/// Worker count: RAG_NUM_THREADS if set and positive, else hardware concurrency.
inline std::size_t worker_count() {
    if (const char* env = std::getenv("RAG_NUM_THREADS")) {
        long n = std::strtol(env, nullptr, 10);
        if (n > 0) return static_cast<std::size_t>(n);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) over a bounded set of threads. Each index is
/// handled exactly once; callers write into preallocated slots so output order
/// does not depend on scheduling. The first exception thrown is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t workers = worker_count()) {
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// FNV-1a, stable across platforms and standard library versions.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t seed = 0) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ splitmix64(seed);
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(h);
}

// Uniform in [-1, 1) from a counter; portable across standard libraries.
inline double uniform_pm1(std::uint64_t seed, std::uint64_t counter) {
    std::uint64_t bits = splitmix64(seed ^ splitmix64(counter));
    return static_cast<double>(bits >> 11) * 0x1.0p-52 - 1.0;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double dot(std::span<const float> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

inline double log_sum_exp(std::span<const double> xs) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : xs) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

inline std::vector<double> softmax(std::span<const double> xs) {
    std::vector<double> out(xs.size());
    if (xs.empty()) return out;
    double m = *std::max_element(xs.begin(), xs.end());
    double s = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out[i] = std::exp(xs[i] - m);
        s += out[i];
    }
    for (double& v : out) v /= s;
    return out;
}

inline std::vector<double> log_softmax(std::span<const double> xs) {
    std::vector<double> out(xs.begin(), xs.end());
    double lse = log_sum_exp(xs);
    for (double& v : out) v -= lse;
    return out;
}

inline std::string join(const Tokens& tokens, std::string_view sep = " ") {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += sep;
        out += tokens[i];
    }
    return out;
}

inline Tokens concat(const Tokens& a, const Tokens& b) {
    Tokens out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

} // namespace detail
} // namespace ragdial
