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

#include "chanx/tracker.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <lapacke.h>

namespace chanx {

namespace {

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

double clamp_var(double v, const TurboLimits& lim, int& clamped)
{
    if (!(v >= lim.variance_floor)) { // also catches NaN
        ++clamped;
        return lim.variance_floor;
    }
    if (v > lim.variance_cap) {
        ++clamped;
        return lim.variance_cap;
    }
    return v;
}

// Gaussian division post / prior per index. Non-positive precision means an uninformative message.
ExtrinsicMessage extrinsic(const CVec& post_mean, const RVec& post_var, const CVec& pri_mean, const RVec& pri_var,
                           Direction dir, const TurboLimits& lim, int& clamped)
{
    ExtrinsicMessage out;
    out.direction = dir;
    const Eigen::Index n = post_mean.size();
    out.mean.resize(n);
    out.var.resize(n);
    for (Eigen::Index m = 0; m < n; ++m) {
        const double prec = 1.0 / post_var(m) - 1.0 / pri_var(m);
        if (!(prec > 1.0 / lim.variance_cap)) {
            ++clamped;
            out.var(m) = lim.variance_cap;
            out.mean(m) = post_mean(m);
            continue;
        }
        const double v = clamp_var(1.0 / prec, lim, clamped);
        out.var(m) = v;
        out.mean(m) = v * (post_mean(m) / post_var(m) - pri_mean(m) / pri_var(m));
    }
    return out;
}

// Rows of the full band, or of one observation, times -j 2 pi f_s.
RVec tone_rates(const std::vector<int>& rows, double fs)
{
    RVec r(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        r(static_cast<Eigen::Index>(i)) = kTwoPi * fs * rows[i];
    return r;
}

// Antenna coordinates n = jx * ny + jy.
void antenna_coordinates(int nx, int ny, RVec& jx, RVec& jy)
{
    jx.resize(nx * ny);
    jy.resize(nx * ny);
    for (int x = 0; x < nx; ++x)
        for (int y = 0; y < ny; ++y) {
            jx(x * ny + y) = x;
            jy(x * ny + y) = y;
        }
}

// H'(l, a) = d_m h_m.
CMat dad_matrix(const CVec& h, const CVec& d, int num_delays)
{
    const CVec hd = d.cwiseProduct(h);
    return Eigen::Map<const CMat>(hd.data(), num_delays, hd.size() / num_delays);
}

int nearest_periodic(double x, double start, double step, int count, double& offset)
{
    const double period = step * count;
    const double t = (x - start) / step;
    int i = static_cast<int>(std::lround(t));
    double off = x - (start + i * step);
    off -= period * std::round(off / period);
    i = ((i % count) + count) % count;
    offset = off;
    return i;
}

} // namespace

// ---------------------------------------------------------------------------------------------
// Grids

Grids Grids::make(double max_delay, int num_delays, int nx, int ny)
{
    if (num_delays < 2 || nx < 1 || ny < 1 || !(max_delay > 0.0))
        throw std::invalid_argument("grids: need at least two delay points and a positive span");
    Grids g;
    const double lo = -max_delay / 4.0;
    g.delay_step = (max_delay - lo) / (num_delays - 1);
    g.delay.resize(num_delays);
    for (int l = 0; l < num_delays; ++l)
        g.delay(l) = lo + l * g.delay_step;
    g.u_step = 2.0 / nx;
    g.v_step = 2.0 / ny;
    g.u.resize(nx);
    g.v.resize(ny);
    for (int i = 0; i < nx; ++i)
        g.u(i) = -1.0 + i * g.u_step;
    for (int i = 0; i < ny; ++i)
        g.v(i) = -1.0 + i * g.v_step;
    g.dtau = RVec::Zero(num_delays);
    g.du = RVec::Zero(nx);
    g.dv = RVec::Zero(ny);
    return g;
}

void Grids::clamp_offsets()
{
    dtau = dtau.cwiseMax(-delay_step / 2).cwiseMin(delay_step / 2);
    du = du.cwiseMax(-u_step / 2).cwiseMin(u_step / 2);
    dv = dv.cwiseMax(-v_step / 2).cwiseMin(v_step / 2);
}

CMat Grids::angle_dictionary() const
{
    const int nx = static_cast<int>(u.size());
    const int ny = static_cast<int>(v.size());
    const double s = 1.0 / std::sqrt(static_cast<double>(nx * ny));
    CMat a(nx * ny, nx * ny);
    for (int ix = 0; ix < nx; ++ix)
        for (int iy = 0; iy < ny; ++iy) {
            const double uu = u(ix) + du(ix);
            const double vv = v(iy) + dv(iy);
            for (int x = 0; x < nx; ++x)
                for (int y = 0; y < ny; ++y)
                    a(x * ny + y, ix * ny + iy) = s * std::exp(kJ * (kPi * (x * uu + y * vv)));
        }
    return a;
}

double MarkovHyperparams::steady_state_support() const
{
    const double s = rho01 + rho10;
    return s > 0.0 ? rho01 / s : 0.0;
}

RVec Imperfections::phase(double srs_period) const
{
    return base_phase + (kTwoPi * srs_period * gap) * doppler;
}

// ---------------------------------------------------------------------------------------------
// Sensing operator

SensingOperator build_sensing(const Grids& grids, const Imperfections& xi, const std::vector<int>& rows,
                              const CVec& pilot, const SystemConfig& sys)
{
    const int n = grids.size();
    if (xi.doppler.size() != n || xi.base_phase.size() != n)
        throw std::invalid_argument("build_sensing: imperfection vectors must have one entry per DAD index");
    if (pilot.size() != static_cast<Eigen::Index>(rows.size()))
        throw std::invalid_argument("build_sensing: pilot length must equal the row count");
    SensingOperator op;
    op.rows = rows;
    op.pilot = pilot;
    op.subcarrier_spacing = sys.subcarrier_spacing;
    op.epsilon = xi.epsilon;
    op.tau0 = xi.tau0;
    const int l_count = grids.num_delays();
    const RVec rate = tone_rates(rows, sys.subcarrier_spacing);
    op.b.resize(rate.size(), l_count);
    const cd lambda = std::exp(kJ * xi.epsilon);
    for (int l = 0; l < l_count; ++l) {
        const double tau = grids.delay(l) + grids.dtau(l) + xi.tau0;
        for (Eigen::Index i = 0; i < rate.size(); ++i)
            op.b(i, l) = pilot(i) * lambda * std::exp(kJ * (-rate(i) * tau));
    }
    op.a = grids.angle_dictionary();
    const RVec ph = xi.phase(sys.srs_period);
    op.d.resize(n);
    for (int m = 0; m < n; ++m)
        op.d(m) = std::exp(kJ * ph(m));
    return op;
}

CVec SensingOperator::apply(const CVec& h) const
{
    const CMat z = b * dad_matrix(h, d, num_delays()) * a.transpose();
    return Eigen::Map<const CVec>(z.data(), z.size());
}

CVec SensingOperator::adjoint(const CVec& y) const
{
    const Eigen::Map<const CMat> ym(y.data(), b.rows(), a.rows());
    const CMat x = b.adjoint() * ym * a.conjugate();
    const Eigen::Map<const CVec> xv(x.data(), x.size());
    return d.conjugate().cwiseProduct(xv);
}

CVec SensingOperator::column(int m) const
{
    const int l = m % num_delays();
    const int ang = m / num_delays();
    CVec c(rows_count());
    const Eigen::Index p = b.rows();
    for (Eigen::Index n = 0; n < a.rows(); ++n)
        c.segment(n * p, p) = a(n, ang) * d(m) * b.col(l);
    return c;
}

CMat SensingOperator::dense() const
{
    CMat out(rows_count(), cols_count());
    for (int m = 0; m < cols_count(); ++m)
        out.col(m) = column(m);
    return out;
}

CMat SensingOperator::gram() const
{
    const CMat ga = a.adjoint() * a;
    const CMat gb = b.adjoint() * b;
    const int l_count = num_delays();
    const int n = cols_count();
    CMat g(n, n);
    for (int m2 = 0; m2 < n; ++m2)
        for (int m1 = 0; m1 < n; ++m1)
            g(m1, m2) = std::conj(d(m1)) * ga(m1 / l_count, m2 / l_count) * gb(m1 % l_count, m2 % l_count) * d(m2);
    return g;
}

CVec stack_observation(const CMat& y)
{
    return Eigen::Map<const CVec>(y.data(), y.size());
}

// ---------------------------------------------------------------------------------------------
// Module A

LmmseSolver::LmmseSolver(const SensingOperator& phi, ModuleAMode mode) : phi_(&phi), mode_(mode)
{
    if (mode == ModuleAMode::exact) {
        gram_ = phi.gram();
        return;
    }
    Eigen::SelfAdjointEigenSolver<CMat> ea(phi.a.adjoint() * phi.a);
    Eigen::SelfAdjointEigenSolver<CMat> eb(phi.b.adjoint() * phi.b);
    ua_ = ea.eigenvectors();
    ub_ = eb.eigenvectors();
    sa_ = ea.eigenvalues().cwiseMax(0.0);
    sb_ = eb.eigenvalues().cwiseMax(0.0);
}

ModuleAResult LmmseSolver::solve(const CVec& y, const ExtrinsicMessage& prior, double noise_var,
                                 const TurboLimits& limits) const
{
    const SensingOperator& phi = *phi_;
    const int n = phi.cols_count();
    if (prior.mean.size() != n || prior.var.size() != n)
        throw std::invalid_argument("module A: prior size mismatch");
    assert((prior.var.array() > 0.0).all());
    ModuleAResult out;
    const CVec rhs_data = phi.adjoint(y) / noise_var;
    RVec pri_var = prior.var;
    if (mode_ == ModuleAMode::exact) {
        CMat m = gram_ / noise_var;
        for (int i = 0; i < n; ++i)
            m(i, i) += 1.0 / pri_var(i);
        // M = L L^H; M^-1 = L^-H L^-1, so diag(M^-1)_i is the squared norm of column i of L^-1.
        auto* data = reinterpret_cast<lapack_complex_double*>(m.data());
        [[maybe_unused]] const lapack_int info = LAPACKE_zpotrf(LAPACK_COL_MAJOR, 'L', n, data, n);
        assert(info == 0);
        LAPACKE_ztrtri(LAPACK_COL_MAJOR, 'L', 'N', n, data, n);
        const auto linv = m.triangularView<Eigen::Lower>();
        const CVec rhs = prior.mean.cwiseQuotient(pri_var.cast<cd>()) + rhs_data;
        const CVec half = linv * rhs;
        out.post_mean = linv.adjoint() * half;
        out.post_var.resize(n);
        for (int i = 0; i < n; ++i)
            out.post_var(i) = m.col(i).tail(n - i).squaredNorm();
    } else {
        const double vbar = pri_var.mean();
        pri_var.setConstant(vbar);
        const int l_count = phi.num_delays();
        const int na = static_cast<int>(phi.a.cols());
        // w(l, a) = 1 / (s_b(l) s_a(a) / sigma^2 + 1 / vbar)
        RMat w(l_count, na);
        for (int ai = 0; ai < na; ++ai)
            for (int l = 0; l < l_count; ++l)
                w(l, ai) = 1.0 / (sb_(l) * sa_(ai) / noise_var + 1.0 / vbar);
        const CVec rhs = phi.d.cwiseProduct(prior.mean / vbar + rhs_data);
        const Eigen::Map<const CMat> r(rhs.data(), l_count, na);
        // (Ua (x) Ub)^H vec(R) = vec(Ub^H R conj(Ua))
        CMat t = ub_.adjoint() * r * ua_.conjugate();
        t = t.cwiseProduct(w.cast<cd>());
        const CMat back = ub_ * t * ua_.transpose();
        const Eigen::Map<const CVec> bv(back.data(), back.size());
        out.post_mean = phi.d.conjugate().cwiseProduct(bv);
        out.post_var = RVec::Constant(n, w.mean());
    }
    for (int i = 0; i < n; ++i)
        out.post_var(i) = clamp_var(out.post_var(i), limits, out.clamped);
    out.to_b = extrinsic(out.post_mean, out.post_var, prior.mean, pri_var, Direction::a_to_b, limits, out.clamped);
    return out;
}

ModuleAResult lmmse_module_a(const CVec& y, const SensingOperator& phi, const ExtrinsicMessage& prior,
                             double noise_var, ModuleAMode mode, const TurboLimits& limits)
{
    const LmmseSolver solver(phi, mode);
    return solver.solve(y, prior, noise_var, limits);
}

// ---------------------------------------------------------------------------------------------
// Module B

SlotPosterior spmp_within_slot(const Beliefs& prior, const ExtrinsicMessage& from_a, const TurboLimits& limits)
{
    const int n = prior.size();
    if (from_a.mean.size() != n || from_a.var.size() != n)
        throw std::invalid_argument("spmp: message size mismatch");
    SlotPosterior out;
    out.mean.resize(n);
    out.var.resize(n);
    out.beliefs.support.resize(n);
    out.beliefs.amp_mean.resize(n);
    out.beliefs.amp_var.resize(n);
    int unused = 0;
    for (int m = 0; m < n; ++m) {
        const cd r = from_a.mean(m);
        const double v = from_a.var(m);
        const double pi = std::clamp(prior.support(m), 0.0, 1.0);
        const cd mu = prior.amp_mean(m);
        const double gamma = std::max(prior.amp_var(m), limits.variance_floor);
        // Message f -> s: CN(r; mu, gamma + v) for s = 1, CN(r; 0, v) for s = 0.
        double post_pi;
        if (pi >= 1.0) {
            post_pi = 1.0;
        } else if (pi <= 0.0) {
            post_pi = 0.0;
        } else {
            const double ln1 = -std::norm(r - mu) / (gamma + v) - std::log(gamma + v);
            const double ln0 = -std::norm(r) / v - std::log(v);
            const double logit = std::log(pi) - std::log1p(-pi) + ln1 - ln0;
            post_pi = logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit)) : std::exp(logit) / (1.0 + std::exp(logit));
        }
        const double c1 = gamma * v / (gamma + v);
        const cd m1 = (mu * v + r * gamma) / (gamma + v);
        const cd mean = post_pi * m1;
        out.mean(m) = mean;
        out.var(m) = clamp_var(post_pi * c1 + post_pi * (1.0 - post_pi) * std::norm(m1), limits, unused);
        // theta -> x^(t+1): prior times f -> theta, a two-component mixture projected to one Gaussian.
        out.beliefs.support(m) = post_pi;
        out.beliefs.amp_mean(m) = post_pi * m1 + (1.0 - post_pi) * mu;
        out.beliefs.amp_var(m) = clamp_var(
            post_pi * c1 + (1.0 - post_pi) * gamma + post_pi * (1.0 - post_pi) * std::norm(m1 - mu), limits, unused);
    }
    return out;
}

ModuleBResult bg_combiner_module_b(const ExtrinsicMessage& from_a, const Beliefs& prior, const TurboLimits& limits)
{
    ModuleBResult out;
    out.posterior = spmp_within_slot(prior, from_a, limits);
    for (int m = 0; m < prior.size(); ++m)
        if (out.posterior.var(m) <= limits.variance_floor)
            ++out.clamped;
    out.to_a = extrinsic(out.posterior.mean, out.posterior.var, from_a.mean, from_a.var, Direction::b_to_a, limits,
                         out.clamped);
    return out;
}

// ---------------------------------------------------------------------------------------------
// E-step

EStepResult turbo_estep(const CVec& y, const SensingOperator& phi, const Beliefs& prior, double noise_var,
                        const TurboConfig& cfg)
{
    const int n = prior.size();
    if (phi.cols_count() != n)
        throw std::invalid_argument("turbo: prior size must match the dictionary");
    const LmmseSolver solver(phi, cfg.module_a);
    int unused = 0;
    // Initial A prior: moments of the Bernoulli-Gaussian prior of h.
    ExtrinsicMessage to_a;
    to_a.direction = Direction::b_to_a;
    to_a.mean = prior.support.cast<cd>().cwiseProduct(prior.amp_mean);
    to_a.var.resize(n);
    for (int m = 0; m < n; ++m) {
        const double p = prior.support(m);
        const double second = p * (prior.amp_var(m) + std::norm(prior.amp_mean(m)));
        to_a.var(m) = clamp_var(second - std::norm(to_a.mean(m)), cfg.limits, unused);
    }

    EStepResult best;
    best.residual = std::numeric_limits<double>::infinity();
    EStepResult last;
    CVec previous = to_a.mean;
    for (int it = 1; it <= cfg.max_iterations; ++it) {
        const ModuleAResult a = solver.solve(y, to_a, noise_var, cfg.limits);
        ModuleBResult b = bg_combiner_module_b(a.to_b, prior, cfg.limits);
        last.posterior = std::move(b.posterior);
        last.a_post_mean = a.post_mean;
        last.iterations = it;
        last.clamped += a.clamped + b.clamped;
        last.residual = (y - phi.apply(last.posterior.mean)).squaredNorm();
        if (last.residual < best.residual) {
            best.posterior = last.posterior;
            best.a_post_mean = last.a_post_mean;
            best.residual = last.residual;
        }
        ExtrinsicMessage next;
        next.direction = Direction::b_to_a;
        next.mean = cfg.damping * b.to_a.mean + (1.0 - cfg.damping) * to_a.mean;
        next.var = cfg.damping * b.to_a.var + (1.0 - cfg.damping) * to_a.var;
        // Extrinsic means of near-inactive indices are ill-conditioned; convergence is judged on the posterior.
        const double change = (last.posterior.mean - previous).norm();
        const double scale = std::max(last.posterior.mean.norm(), previous.norm());
        previous = last.posterior.mean;
        to_a = std::move(next);
        if (change <= cfg.tolerance * scale) {
            last.converged = true;
            return last;
        }
    }
    best.iterations = last.iterations;
    best.clamped = last.clamped;
    best.oscillation = true;
    return best;
}

// ---------------------------------------------------------------------------------------------
// Cross-slot propagation

Beliefs cross_slot_propagate(const Beliefs& beliefs, const MarkovHyperparams& hp)
{
    Beliefs out;
    out.support = (beliefs.support * (1.0 - hp.rho10)).array() + (1.0 - beliefs.support.array()) * hp.rho01;
    out.amp_mean = (1.0 - hp.beta_amp) * beliefs.amp_mean.array() + hp.beta_amp * hp.mu_amp;
    const double b = 1.0 - hp.beta_amp;
    out.amp_var = (b * b) * beliefs.amp_var.array() + hp.beta_amp * hp.beta_amp * hp.gamma_amp;
    return out;
}

// ---------------------------------------------------------------------------------------------
// M-step

namespace {

struct Model {
    SensingOperator op;
    CMat hmu;   // L x Na, d-weighted posterior mean
    CMat z;     // P x N_r, Phi mu
    CMat r;     // P x N_r, residual
};

Model evaluate_model(const MStepProblem& pb, const Grids& grids, const Imperfections& xi)
{
    Model md;
    md.op = build_sensing(grids, xi, pb.rows, pb.pilot, pb.sys);
    md.hmu = dad_matrix(pb.post_mean, md.op.d, grids.num_delays());
    md.z = md.op.b * md.hmu * md.op.a.transpose();
    const Eigen::Map<const CMat> ym(pb.y.data(), md.z.rows(), md.z.cols());
    md.r = ym - md.z;
    return md;
}

} // namespace

SurrogateGradient surrogate_value_and_gradient(const MStepProblem& pb, const Grids& grids, const Imperfections& xi)
{
    const Model md = evaluate_model(pb, grids, xi);
    const SensingOperator& op = md.op;
    const int l_count = grids.num_delays();
    const int nx = static_cast<int>(grids.u.size());
    const int ny = static_cast<int>(grids.v.size());
    const int na = nx * ny;
    const double g = 2.0 / pb.noise_var;
    const XiPrior& pr = pb.prior;

    SurrogateGradient out;
    // Column norms of Phi do not depend on Xi: |a|^2 = 1, |b_l|^2 = |x|^2.
    const double col_energy = op.b.col(0).squaredNorm() * op.a.col(0).squaredNorm();
    out.value = -(md.r.squaredNorm() + pb.post_var.sum() * col_energy) / pb.noise_var;
    out.value -= (xi.doppler - pr.doppler_mean).squaredNorm() / pr.doppler_var;
    out.value -= (grids.dtau - pr.dtau).squaredNorm() / pr.gamma_delay;
    out.value -= ((grids.du - pr.du).squaredNorm() + (grids.dv - pr.dv).squaredNorm()) / pr.gamma_angle;

    const RVec rate = tone_rates(pb.rows, pb.sys.subcarrier_spacing);
    const CVec ntone = -kJ * rate.cast<cd>();
    // tau0: dZ = diag(-j 2 pi f_s n) Z
    out.tau0 = g * (md.r.conjugate().cwiseProduct(ntone.asDiagonal() * md.z)).sum().real();

    // dtau_l: grad_l = g Re sum_n (R^H N B)(n, l) Q(l, n), Q = Hmu A^T
    const CMat q = md.hmu * op.a.transpose();
    const CMat k2 = md.r.adjoint() * (ntone.asDiagonal() * op.b);
    out.dtau = g * q.cwiseProduct(k2.transpose()).rowwise().sum().real();
    out.dtau -= 2.0 * (grids.dtau - pr.dtau) / pr.gamma_delay;

    // du, dv: C = R^H B Hmu, dA(n, a)/du_ix = j pi jx(n) A(n, a) on the columns with that ix.
    RVec jx, jy;
    antenna_coordinates(nx, ny, jx, jy);
    const CMat c = md.r.adjoint() * (op.b * md.hmu);
    const CMat ca = c.cwiseProduct(op.a);
    out.du = RVec::Zero(nx);
    out.dv = RVec::Zero(ny);
    for (int ai = 0; ai < na; ++ai) {
        const cd sx = (jx.cast<cd>().array() * ca.col(ai).array()).sum();
        const cd sy = (jy.cast<cd>().array() * ca.col(ai).array()).sum();
        out.du(ai / ny) += g * (kJ * kPi * sx).real();
        out.dv(ai % ny) += g * (kJ * kPi * sy).real();
    }
    out.du -= 2.0 * (grids.du - pr.du) / pr.gamma_angle;
    out.dv -= 2.0 * (grids.dv - pr.dv) / pr.gamma_angle;

    // doppler_m: g Re{ j 2 pi T gap d_m mu_m (K^T A)(l, a) }, K = R^H B
    const CMat kta = (md.r.adjoint() * op.b).transpose() * op.a;
    const double dphase = kTwoPi * pb.sys.srs_period * xi.gap;
    out.doppler.resize(grids.size());
    for (int m = 0; m < grids.size(); ++m) {
        const cd t = kJ * dphase * op.d(m) * pb.post_mean(m) * kta(m % l_count, m / l_count);
        out.doppler(m) = g * t.real();
    }
    out.doppler -= 2.0 * (xi.doppler - pr.doppler_mean) / pr.doppler_var;
    return out;
}

double epsilon_closed_form(const MStepProblem& pb, const Grids& grids, const Imperfections& xi)
{
    Imperfections x0 = xi;
    x0.epsilon = 0.0;
    const Model md = evaluate_model(pb, grids, x0);
    const Eigen::Map<const CMat> ym(pb.y.data(), md.z.rows(), md.z.cols());
    const cd c = md.z.conjugate().cwiseProduct(ym).sum();
    return std::abs(c) > 0.0 ? std::arg(c) : xi.epsilon;
}

void mstep_update(const MStepProblem& pb, Grids& grids, Imperfections& xi, const MStepSteps& steps)
{
    xi.epsilon = epsilon_closed_form(pb, grids, xi);
    const double div = steps.divisor;
    const auto signs = [](const RVec& g) { return RVec(g.unaryExpr([](double x) { return sign(x); })); };
    // One block: direction from the gradient at the current point, step halved until u does not decrease.
    const auto block = [&](auto&& direction, auto&& apply) {
        const SurrogateGradient g0 = surrogate_value_and_gradient(pb, grids, xi);
        const RVec dir = direction(g0);
        double scale = 1.0;
        for (int k = 0; k <= steps.backtracks; ++k, scale *= 0.5) {
            Grids g1 = grids;
            Imperfections x1 = xi;
            apply(g1, x1, dir, scale);
            g1.clamp_offsets();
            if (steps.backtracks == 0 || surrogate_value_and_gradient(pb, g1, x1).value >= g0.value) {
                grids = std::move(g1);
                xi = std::move(x1);
                return;
            }
        }
    };
    block([&](const SurrogateGradient& g) { return RVec::Constant(1, sign(g.tau0)); },
          [&](Grids&, Imperfections& x, const RVec& d, double s) { x.tau0 += s * steps.tau0 / div * d(0); });
    block([&](const SurrogateGradient& g) { return signs(g.doppler); },
          [&](Grids&, Imperfections& x, const RVec& d, double s) { x.doppler += (s * steps.doppler / div) * d; });
    block([&](const SurrogateGradient& g) { return signs(g.dtau); },
          [&](Grids& gr, Imperfections&, const RVec& d, double s) { gr.dtau += (s * steps.delay / div) * d; });
    block([&](const SurrogateGradient& g) { return signs(g.du); },
          [&](Grids& gr, Imperfections&, const RVec& d, double s) { gr.du += (s * steps.u / div) * d; });
    block([&](const SurrogateGradient& g) { return signs(g.dv); },
          [&](Grids& gr, Imperfections&, const RVec& d, double s) { gr.dv += (s * steps.v / div) * d; });
}

// ---------------------------------------------------------------------------------------------
// Tracking

TrackerState init_from_hrpe(const MultiSlotParams& refined, const Grids& grids, const MarkovHyperparams& hp,
                            const SystemConfig& sys, int last_slot)
{
    const int k_count = refined.num_paths();
    if (k_count == 0)
        throw std::invalid_argument("init_from_hrpe: refined estimate has no paths");
    TrackerState st;
    st.grids = grids;
    st.grids.dtau.setZero();
    st.grids.du.setZero();
    st.grids.dv.setZero();
    st.hyper = hp;
    if (st.hyper.gamma_amp <= 0.0)
        st.hyper.gamma_amp = refined.gain.squaredNorm() / k_count / (hp.beta_amp * hp.beta_amp);
    if (st.hyper.gamma_delay <= 0.0)
        st.hyper.gamma_delay = std::pow(grids.delay_step / 10.0, 2);
    if (st.hyper.gamma_angle <= 0.0)
        st.hyper.gamma_angle = std::pow(grids.u_step / 10.0, 2);
    const MarkovHyperparams& h = st.hyper;

    const int n = grids.size();
    const double var0 = h.beta_amp * h.beta_amp * h.gamma_amp;
    st.prior.support = RVec::Constant(n, h.rho01);
    st.prior.amp_mean = CVec::Constant(n, h.beta_amp * h.mu_amp);
    st.prior.amp_var = RVec::Constant(n, var0);
    st.xi.doppler = RVec::Constant(n, h.mu_doppler);
    st.xi.base_phase = RVec::Zero(n);
    st.xi.gap = 1;
    st.doppler_anchor = RVec::Constant(n, h.mu_doppler);
    const int s_last = last_slot - 1;
    if (refined.num_slots() > 0 && s_last >= 0 && s_last < refined.num_slots()) {
        st.xi.epsilon = refined.epsilon(s_last);
        st.xi.tau0 = refined.tau0(s_last);
    }

    std::vector<int> order(static_cast<std::size_t>(k_count));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return std::norm(refined.gain(a)) > std::norm(refined.gain(b)); });
    std::vector<bool> used(static_cast<std::size_t>(n), false);
    std::vector<bool> l_set(static_cast<std::size_t>(grids.num_delays()), false);
    std::vector<bool> x_set(static_cast<std::size_t>(grids.u.size()), false);
    std::vector<bool> y_set(static_cast<std::size_t>(grids.v.size()), false);
    const int nx = static_cast<int>(grids.u.size());
    const int ny = static_cast<int>(grids.v.size());
    for (const int k : order) {
        double du = 0.0, dv = 0.0;
        const int ix = nearest_periodic(direction_u(refined.theta(k), refined.phi(k)), grids.u(0), grids.u_step, nx, du);
        const int iy = nearest_periodic(direction_v(refined.theta(k)), grids.v(0), grids.v_step, ny, dv);
        const double t = (refined.delay(k) - grids.delay(0)) / grids.delay_step;
        const int l = std::clamp(static_cast<int>(std::lround(t)), 0, grids.num_delays() - 1);
        const int m = grids.index(ix * ny + iy, l);
        if (used[static_cast<std::size_t>(m)]) {
            st.collision = true;
            continue;
        }
        used[static_cast<std::size_t>(m)] = true;
        st.prior.support(m) = 1.0 - h.rho10;
        st.prior.amp_mean(m) = (1.0 - h.beta_amp) * refined.gain(k) + h.beta_amp * h.mu_amp;
        const double f = refined.doppler(k) / (kTwoPi * sys.srs_period);
        st.xi.doppler(m) = f;
        st.doppler_anchor(m) = f;
        st.xi.base_phase(m) = s_last * refined.doppler(k);
        if (!l_set[static_cast<std::size_t>(l)]) {
            st.grids.dtau(l) = refined.delay(k) - grids.delay(l);
            l_set[static_cast<std::size_t>(l)] = true;
        }
        if (!x_set[static_cast<std::size_t>(ix)]) {
            st.grids.du(ix) = du;
            x_set[static_cast<std::size_t>(ix)] = true;
        }
        if (!y_set[static_cast<std::size_t>(iy)]) {
            st.grids.dv(iy) = dv;
            y_set[static_cast<std::size_t>(iy)] = true;
        }
    }
    st.grids.clamp_offsets();

    // Posterior mean of the last stage-1 slot: least-squares DAD fit of its full-band channel.
    st.post_mean = CVec::Zero(n);
    st.post_var = RVec::Zero(n);
    if (refined.num_slots() > 0 && s_last >= 0 && s_last < refined.num_slots()) {
        const ModelContext ctx{sys.subcarrier_spacing, sys.nx, sys.ny};
        const CMat h = reconstruct_stage1(refined, s_last, sys.num_subcarriers, ctx);
        Imperfections at_last = st.xi;
        at_last.gap = 0;
        const SensingOperator full = build_sensing(st.grids, at_last, all_subcarriers(sys.num_subcarriers),
                                                   CVec::Ones(sys.num_subcarriers), sys);
        st.post_mean = full.gram().ldlt().solve(full.adjoint(stack_observation(h)));
    }
    st.slot = last_slot;
    return st;
}

CMat reconstruct_dad(const CVec& h, const Grids& grids, const Imperfections& xi, const SystemConfig& sys)
{
    const std::vector<int> rows = all_subcarriers(sys.num_subcarriers);
    const SensingOperator op = build_sensing(grids, xi, rows, CVec::Ones(sys.num_subcarriers), sys);
    return op.b * dad_matrix(h, op.d, grids.num_delays()) * op.a.transpose();
}

namespace {

// Per-slot epsilon and tau0 from the predicted channel: maximize |(Phi_0(tau0) h_pred)^H y|.
void predict_epsilon_tau0(const MStepProblem& pb, const Grids& grids, const CVec& h_pred, Imperfections& xi,
                          double half_width, double resolution)
{
    if (h_pred.squaredNorm() == 0.0)
        return;
    Imperfections x0 = xi;
    x0.epsilon = 0.0;
    const SensingOperator op = build_sensing(grids, x0, pb.rows, pb.pilot, pb.sys);
    // Phi(tau0) = S(tau0 - center) Phi(center) with S a unit-modulus row diagonal.
    const CVec base = op.apply(h_pred);
    const RVec rate = tone_rates(pb.rows, pb.sys.subcarrier_spacing);
    const Eigen::Index p = rate.size();
    const double center = xi.tau0;
    const auto corr = [&](double tau0) {
        cd c = 0.0;
        for (Eigen::Index i = 0; i < p; ++i) {
            cd row = 0.0;
            for (Eigen::Index a = 0; a < op.a.rows(); ++a)
                row += std::conj(base(a * p + i)) * pb.y(a * p + i);
            c += std::exp(kJ * (rate(i) * (tau0 - center))) * row;
        }
        return c;
    };
    double best_tau = center;
    if (half_width > 0.0) {
        const int count = static_cast<int>(std::ceil(half_width / resolution));
        double best_val = -1.0;
        for (int i = -count; i <= count; ++i) {
            const double tau = center + i * resolution;
            const double val = std::abs(corr(tau));
            if (val > best_val) {
                best_val = val;
                best_tau = tau;
            }
        }
        best_tau = std::clamp(refine_minimum([&](double t) { return -std::abs(corr(t)); }, best_tau, resolution),
                              center - half_width, center + half_width);
    }
    const cd c = corr(best_tau);
    xi.tau0 = best_tau;
    if (std::abs(c) > 0.0)
        xi.epsilon = std::arg(c);
}

} // namespace

TrackResult track_slot(TrackerState& state, const SrsObservation& obs, const SystemConfig& sys,
                       const TrackerConfig& cfg)
{
    const MarkovHyperparams& hp = state.hyper;
    MStepProblem pb;
    pb.y = stack_observation(obs.Y);
    pb.rows = obs.selection;
    pb.pilot = obs.pilot;
    pb.sys = sys;
    pb.noise_var = std::max(state.noise_var, cfg.noise_floor);
    pb.prior.doppler_mean = (1.0 - hp.beta_doppler) * state.xi.doppler + hp.beta_doppler * state.doppler_anchor;
    pb.prior.doppler_var = hp.beta_doppler * hp.beta_doppler * hp.gamma_doppler;
    pb.prior.dtau = state.grids.dtau;
    pb.prior.du = state.grids.du;
    pb.prior.dv = state.grids.dv;
    pb.prior.gamma_delay = hp.gamma_delay;
    pb.prior.gamma_angle = hp.gamma_angle;

    Grids grids = state.grids;
    Imperfections xi = state.xi;
    xi.gap = std::max(1, obs.slot - state.slot);

    const MStepSteps steps{grids.delay_step, cfg.doppler_step, grids.delay_step, grids.u_step, grids.v_step, 50.0};
    if (cfg.em_iterations > 0 && cfg.predict_imperfections) {
        const double half = cfg.tau0_search > 0.0
                                ? cfg.tau0_search
                                : 1.0 / (4.0 * sys.subcarrier_spacing * sys.num_subcarriers);
        predict_epsilon_tau0(pb, grids, state.post_mean, xi, half, steps.tau0 / steps.divisor);
    }

    TrackResult out;
    const int loops = std::max(cfg.em_iterations, 1);
    for (int j = 0; j < loops; ++j) {
        const SensingOperator op = build_sensing(grids, xi, pb.rows, pb.pilot, sys);
        out.estep = turbo_estep(pb.y, op, state.prior, pb.noise_var, cfg.turbo);
        out.oscillation = out.oscillation || out.estep.oscillation;
        pb.post_mean = out.estep.posterior.mean;
        pb.post_var = out.estep.posterior.var;
        if (cfg.learn_noise) {
            const double col_energy = op.b.col(0).squaredNorm() * op.a.col(0).squaredNorm();
            const double e = out.estep.residual + pb.post_var.sum() * col_energy;
            pb.noise_var = std::max(e / static_cast<double>(pb.y.size()), cfg.noise_floor);
        }
        if (cfg.em_iterations > 0)
            mstep_update(pb, grids, xi, steps);
    }

    out.estimate.slot = obs.slot;
    out.estimate.H = reconstruct_dad(out.estep.posterior.mean, grids, xi, sys);

    state.prior = cross_slot_propagate(out.estep.posterior.beliefs, hp);
    state.grids = grids;
    xi.base_phase = xi.phase(sys.srs_period);
    xi.gap = 1;
    state.xi = xi;
    state.post_mean = out.estep.posterior.mean;
    state.post_var = out.estep.posterior.var;
    if (cfg.learn_noise)
        state.noise_var = pb.noise_var;
    state.slot = obs.slot;
    return out;
}

} // namespace chanx
