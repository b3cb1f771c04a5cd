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

#include "chanx/linalg.hpp"

#include <Eigen/Eigenvalues>

namespace chanx {

LsResult ls_solve(const CMat& v, const CVec& y)
{
    if (v.rows() != y.size())
        throw std::invalid_argument("ls_solve: dimension mismatch");
    LsResult out;
    const Eigen::Index k = v.cols();
    if (k == 0) {
        out.x.resize(0);
        return out;
    }
    CMat gram = v.adjoint() * v;
    gram = (0.5 * (gram + gram.adjoint())).eval();
    const CVec rhs = v.adjoint() * y;
    Eigen::SelfAdjointEigenSolver<CMat> es(gram, Eigen::EigenvaluesOnly);
    const double lmax = es.eigenvalues().maxCoeff();
    const double lmin = es.eigenvalues().minCoeff();
    if (!(lmax > 0.0) || lmin <= 1e-12 * lmax) {
        const double lambda = 1e-8 * gram.trace().real() / static_cast<double>(k);
        gram.diagonal().array() += std::max(lambda, 1e-300);
        out.ridge = true;
    }
    out.x = gram.llt().solve(rhs);
    return out;
}

CMat range_basis(const CMat& a, double tol)
{
    if (a.cols() == 0)
        return CMat(a.rows(), 0);
    Eigen::JacobiSVD<CMat> svd(a, Eigen::ComputeThinU);
    const RVec& s = svd.singularValues();
    Eigen::Index r = 0;
    while (r < s.size() && s(r) > tol * s(0))
        ++r;
    return svd.matrixU().leftCols(r);
}

CMat complement_projector(const CMat& a, Eigen::Index dim)
{
    CMat p = CMat::Identity(dim, dim);
    if (a.cols() == 0)
        return p;
    const CMat q = range_basis(a);
    p.noalias() -= q * q.adjoint();
    return p;
}

CMat khatri_rao(const CMat& a, const CMat& b)
{
    if (a.cols() != b.cols())
        throw std::invalid_argument("khatri_rao: column counts differ");
    CMat out(a.rows() * b.rows(), a.cols());
    for (Eigen::Index k = 0; k < a.cols(); ++k)
        for (Eigen::Index i = 0; i < a.rows(); ++i)
            out.col(k).segment(i * b.rows(), b.rows()) = a(i, k) * b.col(k);
    return out;
}

CVec vec(const CMat& m)
{
    return Eigen::Map<const CVec>(m.data(), m.size());
}

} // namespace chanx
