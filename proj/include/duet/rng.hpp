// Copyright 2026 The Duet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic 64-bit PRNG (splitmix64). One algorithm everywhere so runs
// reproduce bit-exactly for a given seed.

#pragma once

#include <cmath>
#include <cstdint>

namespace duet {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit mantissa.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; the paired draw is cached.
    double next_gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        // 1 - u1 keeps the log argument in (0, 1].
        double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Derives an independent deterministic stream (e.g. per-epoch shuffles).
    Rng split(std::uint64_t tag) const {
        Rng mixer(state_ ^ (tag * 0xD1B54A32D192ED03ULL));
        return Rng(mixer.next_u64());
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace duet
