// SPDX-License-Identifier: Apache-2.0
//
// Copyright 2026 The chanx Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "chanx/rng.hpp"

#include <cmath>
#include <vector>

namespace chanx {

Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> labels)
{
    std::vector<std::uint32_t> words;
    words.reserve(2 + 2 * labels.size());
    auto push = [&](std::uint64_t v) {
        words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
        words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(seed);
    for (auto l : labels)
        push(l);
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

// Distributions are hand-rolled so that streams do not depend on the
// standard library's distribution implementation.
double uniform(Rng& rng, double lo, double hi)
{
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

double gaussian(Rng& rng, double mean, double stddev)
{
    double u1 = 0.0;
    do {
        u1 = uniform(rng, 0.0, 1.0);
    } while (u1 <= 0.0);
    const double u2 = uniform(rng, 0.0, 1.0);
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

cd complex_gaussian(Rng& rng, double variance)
{
    const double s = std::sqrt(variance / 2.0);
    const double re = gaussian(rng, 0.0, s);
    const double im = gaussian(rng, 0.0, s);
    return {re, im};
}

} // namespace chanx
