// SPDX-License-Identifier: Apache-2.0

#include "kvsvd/rope.hpp"

#include <cmath>

#include "kvsvd/error.hpp"

namespace kvsvd {

void rope_rotate_inplace(std::span<double> v, std::size_t pos, double base) {
    require(v.size() % 2 == 0, "rope needs an even head dimension");
    require(base > 0.0, "rope base must be positive");
    if (pos == 0) {
        return;
    }
    const double d = static_cast<double>(v.size());
    for (std::size_t i = 0; i < v.size() / 2; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / d);
        const double angle = static_cast<double>(pos) * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x = v[2 * i];
        const double y = v[2 * i + 1];
        v[2 * i] = c * x - s * y;
        v[2 * i + 1] = s * x + c * y;
    }
}

std::vector<double> rope_rotate(std::span<const double> v, std::size_t pos, double base) {
    std::vector<double> out(v.begin(), v.end());
    rope_rotate_inplace(out, pos, base);
    return out;
}

} // namespace kvsvd
