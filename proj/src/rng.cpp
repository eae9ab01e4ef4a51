#include "simplexlm/rng.hpp"

#include <cmath>
#include <cstring>

#include "simplexlm/errors.hpp"

namespace simplexlm {

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t rotl(uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

} // namespace

Rng::Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : s_) {
        w = splitmix64(sm);
    }
}

Rng Rng::stream(uint64_t master_seed, std::string_view name) {
    return Rng(master_seed ^ fnv1a(name));
}

uint64_t Rng::next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform_open() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
}

double Rng::gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform_open()));
    const double theta = 2.0 * 3.14159265358979323846 * uniform();
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

uint64_t Rng::below(uint64_t n) {
    if (n == 0) {
        throw DomainError("Rng::below: n must be >= 1");
    }
    const uint64_t threshold = (0 - n) % n; // 2^64 mod n
    for (;;) {
        const uint64_t x = next_u64();
        if (x >= threshold) {
            return x % n;
        }
    }
}

std::array<uint64_t, Rng::kStateWords> Rng::state() const {
    std::array<uint64_t, kStateWords> out{};
    for (int i = 0; i < 4; ++i) {
        out[i] = s_[i];
    }
    uint64_t bits = 0;
    std::memcpy(&bits, &spare_, sizeof bits);
    out[4] = bits;
    out[5] = has_spare_ ? 1 : 0;
    return out;
}

void Rng::restore(const std::array<uint64_t, kStateWords>& s) {
    for (int i = 0; i < 4; ++i) {
        s_[i] = s[i];
    }
    std::memcpy(&spare_, &s[4], sizeof spare_);
    has_spare_ = (s[5] != 0);
}

} // namespace simplexlm
