#pragma once

#include <cmath>
#include <cstdint>

#include "pointsplat/math.hpp"

namespace pointsplat {

// splitmix64, used for seeding and stream derivation.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// xoshiro256**: fixed, portable 64-bit generator. Every random draw in the
// toolkit goes through this class with hand-rolled distribution transforms,
// so sequences are bit-identical across platforms and standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) {
        uint64_t sm = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
        for (auto& s : s_) s = splitmix64(sm);
    }

    // Derived generator for an independent component stream.
    Rng stream(uint64_t stream_id) const {
        uint64_t sm = s_[0] ^ s_[3];
        return Rng(splitmix64(sm), stream_id);
    }

    uint64_t next_u64() {
        auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        uint64_t result = rotl(s_[1] * 5, 7) * 9;
        uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0,1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + uniform01() * (hi - lo); }

    // Lemire multiply-shift; n must be > 0.
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform01(), u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    Quat<double> unit_quaternion() {
        Quat<double> q{normal(), normal(), normal(), normal()};
        double n = q.norm();
        while (n < 1e-12) {
            q = {normal(), normal(), normal(), normal()};
            n = q.norm();
        }
        return {q.w / n, q.x / n, q.y / n, q.z / n};
    }

private:
    uint64_t s_[4]{};
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace pointsplat
