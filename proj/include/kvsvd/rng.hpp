// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace kvsvd {

// xorshift64* generator (Vigna 2016, shifts 12/25/27, multiplier
// 0x2545F4914F6CDD1D). The user seed is passed through one splitmix64 step
// so that seed 0 and nearby seeds give unrelated, nonzero states.
// Gaussian draws use the basic Box-Muller transform and cache the second
// variate. The whole stream is specified here so other implementations can
// reproduce generated models bit for bit.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    // Uniform in (0, 1], 53 random bits.
    double uniform();

    double normal();

    // Uniform integer in [0, bound); bound > 0. Uses the high bits via
    // 128-bit multiply.
    std::uint64_t below(std::uint64_t bound);

    // Derive an independent stream, e.g. one per Monte-Carlo sample.
    Rng fork(std::uint64_t stream) const;

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);

} // namespace kvsvd
