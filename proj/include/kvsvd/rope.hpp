// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace kvsvd {

// Rotary position embedding over interleaved pairs (v[2i], v[2i+1]) with
// angle pos * base^(-2i/d). Throws a contract error for odd d.
void rope_rotate_inplace(std::span<double> v, std::size_t pos, double base);
std::vector<double> rope_rotate(std::span<const double> v, std::size_t pos, double base);

} // namespace kvsvd
