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

#include "chanx/types.hpp"

namespace chanx {

struct LsResult {
    CVec x;
    bool ridge = false; ///< Gram matrix was singular; ridge term added
};

/**
 * @brief Least squares x = (V^H V)^-1 V^H y.
 *
 * Falls back to (V^H V + lambda I) with lambda = 1e-8 trace(V^H V) / K when
 * the Gram matrix is numerically rank deficient.
 */
LsResult ls_solve(const CMat& v, const CVec& y);

/// Orthonormal basis for range(a) with singular values above tol * sigma_max.
CMat range_basis(const CMat& a, double tol = 1e-10);

/// I - Q Q^H for Q = range_basis(a); identity when a has no columns.
CMat complement_projector(const CMat& a, Eigen::Index dim);

/// Column-wise Khatri-Rao product: column k is kron(a.col(k), b.col(k)).
CMat khatri_rao(const CMat& a, const CMat& b);

/// Column-major vectorization.
CVec vec(const CMat& m);

} // namespace chanx
