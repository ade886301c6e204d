#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>

namespace xar {

// Seedable random source. Normals use Box-Muller without a cached spare so
// the complete state is the engine state, which serializes losslessly.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    double normal();
    void fill_normal(std::span<double> out);
    std::uint64_t next_u64() { return engine_(); }
    // Uniform integer in [0, n).
    std::size_t below(std::size_t n);

    std::string state() const;
    void set_state(const std::string& s);

    // Independent stream for (seed, index), used for per-sample and per-run streams.
    static Rng derive(std::uint64_t seed, std::uint64_t index);

private:
    std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace xar
