#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace rswm {

/// SplitMix64 finalizer. Used for all seed derivation.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Derives an independent child seed for `stream` from `parent`.
///
/// child = splitmix64(parent ^ splitmix64(stream + 0x632BE59BD9B4E019)).
/// Every per-sample, per-record and per-rollout seed in the pipeline is
/// obtained this way, so results never depend on evaluation order.
constexpr std::uint64_t split_seed(std::uint64_t parent, std::uint64_t stream) noexcept {
    return splitmix64(parent ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
}

/// Seeded random source with portable distributions.
///
/// The engine is std::mt19937_64 (fully specified by the standard); the
/// distributions below are written out so that streams are identical across
/// standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] (inclusive).
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<unsigned __int128>(hi - lo + 1);
        const auto scaled = (static_cast<unsigned __int128>(engine_()) * span) >> 64;
        return lo + static_cast<std::int64_t>(scaled);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (no cached spare, so draws stay aligned).
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::string state() const;
    void set_state(const std::string& state);

private:
    std::mt19937_64 engine_;
};

} // namespace rswm
