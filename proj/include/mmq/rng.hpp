#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace mmq {

// Deterministic counter-based random streams. A stream is fully identified
// by (root_seed, stream_id); the sequence is generated by splitmix64 and is
// identical on every platform (no libc distributions involved).
class RngStream {
  public:
    RngStream(std::uint64_t root_seed, std::uint64_t stream_id)
        : state_(mix(mix(root_seed) + stream_id)) {}

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // [0, n)
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
        return static_cast<std::uint64_t>(
            (static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // Box-Muller; consumes two uniforms per call.
    double normal() {
        double u1 = 1.0 - uniform01(); // (0, 1]
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Marsaglia-Tsang for alpha >= 1, Johnk boost below.
    double gamma(double alpha) {
        if (alpha <= 0.0) throw std::invalid_argument("gamma: alpha must be positive");
        if (alpha < 1.0) {
            double u = uniform01();
            while (u <= 0.0) u = uniform01();
            return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double t = 1.0 + c * x;
            if (t <= 0.0) continue;
            double v = t * t * t;
            double u = uniform01();
            while (u <= 0.0) u = uniform01();
            if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
        }
    }

    std::vector<double> dirichlet(const std::vector<double>& concentration) {
        std::vector<double> out(concentration.size());
        double sum = 0.0;
        for (std::size_t i = 0; i < concentration.size(); ++i) {
            out[i] = gamma(concentration[i]);
            sum += out[i];
        }
        for (double& v : out) v /= sum;
        return out;
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Fisher-Yates, high index downward.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::uint64_t state_;
};

// Stream-id namespaces. Indexes (sample id, class id, epoch, ...) are added
// to the base so unrelated uses of the same root seed never share a stream.
namespace stream {
constexpr std::uint64_t kSample      = 0;
constexpr std::uint64_t kSplit       = 1ULL << 32;
constexpr std::uint64_t kCalibration = 2ULL << 32;
constexpr std::uint64_t kEpoch       = 3ULL << 32;
constexpr std::uint64_t kInit        = 4ULL << 32;
constexpr std::uint64_t kDropout     = 5ULL << 32;

// FNV-1a, used to give every named parameter its own init stream.
inline std::uint64_t name_tag(const char* s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (; *s; ++s) h = (h ^ static_cast<unsigned char>(*s)) * 1099511628211ULL;
    return h;
}
} // namespace stream

} // namespace mmq
