#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace simplexlm {

// Deterministic, serializable random source (xoshiro256++ seeded via
// splitmix64). One master seed fans out into named sub-streams so that
// data order, forward noise, projection sampling and the self-conditioning
// branch can each be replayed or perturbed independently. All derived
// quantities (uniforms, gaussians, bounded ints) are computed in-house so
// sequences are identical across platforms and standard-library versions.
class Rng {
public:
    Rng() : Rng(0) {}
    explicit Rng(uint64_t seed);

    // Sub-stream derived from a master seed and a stream name.
    static Rng stream(uint64_t master_seed, std::string_view name);

    uint64_t next_u64();
    double uniform();      // [0, 1)
    double uniform_open(); // (0, 1]
    double gaussian();     // standard normal (Box-Muller, cached spare)
    uint64_t below(uint64_t n); // unbiased uniform in [0, n), n >= 1

    // Full generator state, for checkpoint resume.
    static constexpr int kStateWords = 6;
    std::array<uint64_t, kStateWords> state() const;
    void restore(const std::array<uint64_t, kStateWords>& s);

private:
    uint64_t s_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace simplexlm
