#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace epg {

inline uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// xoshiro256++ with an explicitly serializable 4x64-bit state, so checkpoints
// can carry the generator across runs and platforms. Standard-library
// distributions are implementation defined; everything here is spelled out.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    static Rng from_state(const std::array<uint64_t, 4>& st) {
        Rng r;
        r.s_ = st;
        return r;
    }

    const std::array<uint64_t, 4>& state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& st) { s_ = st; }

    uint64_t next_u64() {
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

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller without a cached spare: two uniforms per draw, no hidden state.
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double lognormal(double mu, double sigma) { return std::exp(mu + sigma * normal()); }

    // Inclusive range, rejection-free modulo bias acceptable for desk-scale use.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Independent stream derived from the current state and a path of tags.
    // Used to give every (step, sample, purpose) its own generator so batch
    // construction can run in parallel yet stay order-independent.
    Rng substream(uint64_t a, uint64_t b = 0, uint64_t c = 0) const {
        uint64_t x = s_[0] ^ (s_[1] * 0x9e3779b97f4a7c15ULL);
        x ^= a * 0xff51afd7ed558ccdULL;
        x ^= b * 0xc4ceb9fe1a85ec53ULL;
        x ^= c * 0x2545f4914f6cdd1dULL;
        Rng r;
        for (auto& w : r.s_) w = splitmix64(x);
        return r;
    }

private:
    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    std::array<uint64_t, 4> s_{};
};

}  // namespace epg
