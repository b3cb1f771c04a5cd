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

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "chanx/types.hpp"

namespace chanx {

using Rng = std::mt19937_64;

/// Named substream labels; values are part of the determinism contract.
enum class Stream : std::uint64_t {
    paths = 1,
    imperfections = 2,
    noise = 3,
    trial = 4,
};

/// Derives an independent generator from a root seed and a label path.
/// Identical inputs give identical streams regardless of call order.
Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> labels);

double uniform(Rng& rng, double lo, double hi);
double gaussian(Rng& rng, double mean, double stddev);

/// Circular complex Gaussian with E|z|^2 = variance.
cd complex_gaussian(Rng& rng, double variance);

} // namespace chanx
