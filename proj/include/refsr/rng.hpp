#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace refsr {

// Counter-based generator: every draw is a pure hash of (seed, stream,
// counter), so sequences are identical on every platform and streams can be
// split without shared state.
class RngState {
public:
    constexpr RngState(std::uint64_t seed = 0, std::uint64_t stream = 0) noexcept : seed_(seed), stream_(stream) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream() const noexcept { return stream_; }
    std::uint64_t counter() const noexcept { return counter_; }

    // Independent child stream; does not advance this generator.
    RngState split(std::uint64_t sub) const noexcept { return RngState(seed_, mix(stream_ ^ mix(sub + 0x9E37u))); }

    std::uint64_t next_u64() noexcept {
        const std::uint64_t key = mix(seed_ ^ 0xD1B54A32D192ED03ull) ^ mix(stream_ + 0x8CB92BA72F3D8DD7ull);
        return mix(key + mix(counter_++));
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return double(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next_u64() % n; }

    // Box-Muller, one normal per call (the pair partner is discarded so the
    // counter advance per draw is fixed).
    double normal() noexcept {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
};

}  // namespace refsr
