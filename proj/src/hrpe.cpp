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

#include "chanx/hrpe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>

namespace chanx {

namespace {

CMat steering_matrix(const MultiSlotParams& p, const ModelContext& ctx)
{
    CMat a(ctx.nx * ctx.ny, p.num_paths());
    for (int k = 0; k < p.num_paths(); ++k)
        a.col(k) = steering_vector_upa(p.theta(k), p.phi(k), ctx.nx, ctx.ny);
    return a;
}

// c_{k,s} = gain_k exp(j (s doppler_k + epsilon_s))
CVec slot_coefficients(const MultiSlotParams& p, int s, bool with_gain = true, bool with_epsilon = true)
{
    CVec c(p.num_paths());
    for (int k = 0; k < p.num_paths(); ++k) {
        const double ph = s * p.doppler(k) + (with_epsilon ? p.epsilon(s) : 0.0);
        c(k) = (with_gain ? p.gain(k) : cd(1.0, 0.0)) * std::exp(kJ * ph);
    }
    return c;
}

// Sum over entries of conj(r) .* (g a^T).
cd inner_rank_one(const CMat& r, const CVec& g, const CVec& a)
{
    return (g.array() * (r.conjugate() * a).array()).sum();
}

std::vector<int> power_order(const CVec& gain, const RVec& delay)
{
    std::vector<int> idx(static_cast<std::size_t>(gain.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        const double pa = std::norm(gain(a)), pb = std::norm(gain(b));
        if (pa != pb)
            return pa > pb;
        return delay(a) < delay(b);
    });
    return idx;
}

MultiSlotParams permute_paths(const MultiSlotParams& p, const std::vector<int>& order)
{
    MultiSlotParams q = p;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto k = static_cast<Eigen::Index>(i);
        q.delay(k) = p.delay(order[i]);
        q.theta(k) = p.theta(order[i]);
        q.phi(k) = p.phi(order[i]);
        q.gain(k) = p.gain(order[i]);
        q.doppler(k) = p.doppler(order[i]);
    }
    return q;
}

} // namespace

std::vector<SlotData> prepare_slots(const std::vector<SrsObservation>& obs)
{
    std::vector<SlotData> out;
    out.reserve(obs.size());
    for (const auto& o : obs)
        out.push_back({depilot(o), o.selection});
    return out;
}

CMat predict_slot(const MultiSlotParams& p, int s, const std::vector<int>& rows, const ModelContext& ctx)
{
    RVec d = p.delay.array() + p.tau0(s);
    return synthesize_cfr(rows, ctx.subcarrier_spacing, slot_coefficients(p, s), d, steering_matrix(p, ctx));
}

double stage1_objective(const std::vector<SlotData>& slots, const MultiSlotParams& p, const ModelContext& ctx)
{
    double f = 0.0;
    for (std::size_t s = 0; s < slots.size(); ++s)
        f += (slots[s].y - predict_slot(p, static_cast<int>(s), slots[s].rows, ctx)).squaredNorm();
    return f;
}

CMat reconstruct_stage1(const MultiSlotParams& p, int s, int num_subcarriers, const ModelContext& ctx)
{
    return predict_slot(p, s, all_subcarriers(num_subcarriers), ctx);
}

LsResult ls_gains(const CVec& y, const CMat& v)
{
    return ls_solve(v, y);
}

InitImperfections init_imperfections(const std::vector<CVec>& gains, const std::vector<RVec>& delays)
{
    const int t_count = static_cast<int>(gains.size());
    if (t_count == 0 || delays.size() != gains.size())
        throw std::invalid_argument("init_imperfections: need matching per-slot gains and delays");
    const Eigen::Index k_count = gains[0].size();
    for (int t = 0; t < t_count; ++t)
        if (gains[static_cast<std::size_t>(t)].size() != k_count || delays[static_cast<std::size_t>(t)].size() != k_count)
            throw std::invalid_argument("init_imperfections: path counts differ across slots");
    InitImperfections out;
    out.epsilon = RVec::Zero(t_count);
    out.tau0 = RVec::Zero(t_count);
    out.doppler_phase = RMat::Zero(k_count, t_count);
    const CVec& g1 = gains[0];
    for (Eigen::Index k = 0; k < k_count; ++k)
        if (std::abs(g1(k)) == 0.0)
            throw std::invalid_argument("init_imperfections: reference path vanished");
    for (int t = 1; t < t_count; ++t) {
        const CVec& gt = gains[static_cast<std::size_t>(t)];
        if (std::abs(gt(0)) == 0.0)
            throw std::invalid_argument("init_imperfections: reference path vanished");
        out.epsilon(t) = std::arg(gt(0) / g1(0));
        for (Eigen::Index k = 0; k < k_count; ++k)
            out.doppler_phase(k, t) = std::arg(gt(k) * g1(0) / (g1(k) * gt(0)));
        out.tau0(t) = (delays[static_cast<std::size_t>(t)] - delays[0]).mean();
    }
    return out;
}

double doppler_slope(const RVec& phase)
{
    const Eigen::Index t = phase.size();
    if (t < 2)
        return 0.0;
    double prev = phase(0), acc = phase(0);
    double num = 0.0, den = 0.0;
    for (Eigen::Index s = 1; s < t; ++s) {
        acc += wrap_phase(phase(s) - prev);
        prev = phase(s);
        num += static_cast<double>(s) * acc;
        den += static_cast<double>(s * s);
    }
    return num / den;
}

CVec CompensatedFrame::steering(int k, double tau) const
{
    Eigen::Index total = 0;
    for (const auto& r : rows)
        total += static_cast<Eigen::Index>(r.size());
    CVec g(total);
    Eigen::Index off = 0;
    for (int s = 0; s < num_blocks(); ++s) {
        const auto& r = rows[static_cast<std::size_t>(s)];
        const auto n = static_cast<Eigen::Index>(r.size());
        g.segment(off, n) = delay_steering_rows(tau, r, subcarrier_spacing) * std::exp(kJ * (s * doppler(k)));
        off += n;
    }
    return g;
}

CompensatedFrame compensate_and_splice(const std::vector<SlotData>& slots, const RVec& epsilon, const RVec& tau0,
                                       const RVec& doppler, double subcarrier_spacing)
{
    const int t_count = static_cast<int>(slots.size());
    if (t_count == 0 || epsilon.size() != t_count || tau0.size() != t_count)
        throw std::invalid_argument("compensate_and_splice: slot counts differ");
    CompensatedFrame f;
    f.doppler = doppler;
    f.subcarrier_spacing = subcarrier_spacing;
    Eigen::Index total = 0;
    for (const auto& s : slots)
        total += s.y.rows();
    f.y.resize(total, slots[0].y.cols());
    Eigen::Index off = 0;
    for (int s = 0; s < t_count; ++s) {
        const SlotData& sd = slots[static_cast<std::size_t>(s)];
        const CVec comp = delay_steering_rows(tau0(s), sd.rows, subcarrier_spacing).conjugate() *
                          std::exp(-kJ * epsilon(s));
        f.y.middleRows(off, sd.y.rows()) = comp.asDiagonal() * sd.y;
        f.rows.push_back(sd.rows);
        off += sd.y.rows();
    }
    return f;
}

SicResult sic_delay_estimation(const CompensatedFrame& frame, const RVec& init_delay, const SicConfig& cfg)
{
    const int k_count = static_cast<int>(init_delay.size());
    if (k_count < 1)
        throw std::invalid_argument("sic_delay_estimation: need at least one path");
    if (frame.doppler.size() < k_count)
        throw std::invalid_argument("sic_delay_estimation: Doppler vector shorter than path list");
    const Eigen::Index m = frame.y.rows();
    const Eigen::Index nr = frame.y.cols();
    SicResult out;
    out.delay = init_delay;
    CMat q(m, 0); // orthonormal basis of removed directions
    const double step = cfg.delay_grid.step;

    for (int k = 0; k < k_count; ++k) {
        CMat yk = frame.y - q * (q.adjoint() * frame.y);
        const int dim = std::clamp(k_count - k, 1, static_cast<int>(std::min(nr, m)) - 1);
        const SubspaceDecomposition d = eig_subspace(covariance_temporal(yk), dim);
        auto filtered = [&](double tau) -> CVec {
            CVec g = frame.steering(k, tau);
            if (q.cols() > 0)
                g -= q * (q.adjoint() * g);
            return g;
        };

        Grid1D grid = cfg.delay_grid;
        int half = cfg.window_steps;
        double tau = init_delay(k);
        RVec values;
        for (int attempt = 0; attempt < 2; ++attempt) {
            if (!cfg.full_search)
                grid = Grid1D{init_delay(k) - half * step, step, 2 * half + 1};
            values = t_music_spectrum(d, filtered, grid, true).values;
            Eigen::Index imax = 0;
            values.maxCoeff(&imax);
            const bool boundary = imax == 0 || imax == values.size() - 1;
            tau = grid.at(static_cast<double>(imax));
            if (!boundary || cfg.full_search)
                break;
            if (attempt == 1)
                out.flagged = true;
            half *= 2;
        }
        tau = refine_minimum([&](double t) { return music_denominator(d.signal_basis, filtered(t)); }, tau, 0.5 * step);
        out.delay(k) = tau;
        if (cfg.record_spectra) {
            out.grids.push_back(grid);
            out.spectra.push_back(values);
        }
        const CVec gk = filtered(tau);
        const double nrm = gk.norm();
        if (nrm > 0.0) {
            q.conservativeResize(Eigen::NoChange, q.cols() + 1);
            q.col(q.cols() - 1) = gk / nrm;
        }
    }
    return out;
}

RVec per_path_spectrum(const CompensatedFrame& frame, int k, int num_paths, const Grid1D& grid)
{
    const SubspaceDecomposition d = eig_subspace(covariance_temporal(frame.y), num_paths);
    return t_music_spectrum(d, [&](double tau) { return frame.steering(k, tau); }, grid).values;
}

MlResult ml_gains_epsilon(const std::vector<SlotData>& slots, const MultiSlotParams& p, const ModelContext& ctx)
{
    const int k_count = p.num_paths();
    const CMat a = steering_matrix(p, ctx);
    Eigen::Index total = 0;
    for (const auto& s : slots)
        total += s.y.size();
    CMat v(total, k_count);
    CVec y(total);
    Eigen::Index off = 0;
    for (std::size_t s = 0; s < slots.size(); ++s) {
        const SlotData& sd = slots[s];
        const auto si = static_cast<int>(s);
        CMat g(sd.y.rows(), k_count);
        for (int k = 0; k < k_count; ++k)
            g.col(k) = delay_steering_rows(p.delay(k) + p.tau0(si), sd.rows, ctx.subcarrier_spacing);
        CMat vs = khatri_rao(a, g) * slot_coefficients(p, si, false, true).asDiagonal();
        v.middleRows(off, sd.y.size()) = vs;
        y.segment(off, sd.y.size()) = vec(sd.y);
        off += sd.y.size();
    }
    const LsResult ls = ls_gains(y, v);
    MlResult out;
    out.gain = ls.x;
    out.ridge = ls.ridge;
    out.epsilon = p.epsilon;
    MultiSlotParams q = p;
    q.gain = out.gain;
    for (std::size_t s = 1; s < slots.size(); ++s) {
        const auto si = static_cast<int>(s);
        RVec d = q.delay.array() + q.tau0(si);
        const CMat m0 = synthesize_cfr(slots[s].rows, ctx.subcarrier_spacing, slot_coefficients(q, si, true, false), d, a);
        const cd ip = (m0.conjugate().array() * slots[s].y.array()).sum();
        out.epsilon(si) = std::abs(ip) > 0.0 ? std::arg(ip) : p.epsilon(si);
    }
    return out;
}

Stage1Gradient stage1_gradient(const std::vector<SlotData>& slots, const MultiSlotParams& p, const ModelContext& ctx)
{
    const int k_count = p.num_paths();
    const CMat a = steering_matrix(p, ctx);
    Stage1Gradient g;
    g.doppler = RVec::Zero(k_count);
    g.tau0 = RVec::Zero(p.num_slots());
    for (std::size_t s = 0; s < slots.size(); ++s) {
        const auto si = static_cast<int>(s);
        const SlotData& sd = slots[s];
        const CMat r = sd.y - predict_slot(p, si, sd.rows, ctx);
        const CVec c = slot_coefficients(p, si);
        RVec w(static_cast<Eigen::Index>(sd.rows.size()));
        for (std::size_t i = 0; i < sd.rows.size(); ++i)
            w(static_cast<Eigen::Index>(i)) = -kTwoPi * sd.rows[i] * ctx.subcarrier_spacing;
        cd dt = 0.0;
        for (int k = 0; k < k_count; ++k) {
            const CVec gk = delay_steering_rows(p.delay(k) + p.tau0(si), sd.rows, ctx.subcarrier_spacing);
            const cd ip = inner_rank_one(r, gk, a.col(k));
            g.doppler(k) += -2.0 * std::real(kJ * static_cast<double>(si) * c(k) * ip);
            const CVec dg = (kJ * w.array()).matrix().cwiseProduct(gk);
            dt += c(k) * inner_rank_one(r, dg, a.col(k));
        }
        if (si > 0)
            g.tau0(si) = -2.0 * std::real(dt);
    }
    return g;
}

namespace {

// Armijo backtracking along a preconditioned direction for one parameter block.
bool armijo_block(const std::vector<SlotData>& slots, MultiSlotParams& p, const ModelContext& ctx,
                  const ArmijoConfig& armijo, RVec MultiSlotParams::*member, const RVec& grad, const RVec& curvature)
{
    RVec dir = RVec::Zero(grad.size());
    for (Eigen::Index i = 0; i < grad.size(); ++i)
        if (curvature(i) > 0.0)
            dir(i) = -grad(i) / curvature(i);
    const double slope = grad.dot(dir);
    if (!(slope < 0.0))
        return false;
    const double f0 = stage1_objective(slots, p, ctx);
    const RVec base = p.*member;
    double lambda = 1.0;
    for (int h = 0; h <= armijo.max_halvings; ++h) {
        p.*member = base + lambda * dir;
        const double f1 = stage1_objective(slots, p, ctx);
        if (f1 <= f0 + armijo.sigma * lambda * slope)
            return false;
        lambda *= armijo.beta;
    }
    p.*member = base;
    return true;
}

} // namespace

GradStepResult grad_phi_tau0(const std::vector<SlotData>& slots, const MultiSlotParams& p, const ModelContext& ctx,
                             const ArmijoConfig& armijo)
{
    GradStepResult out;
    out.params = p;
    const int k_count = p.num_paths();
    const int t_count = p.num_slots();
    if (t_count < 2)
        return out;

    double tones = 0.0;
    for (const auto& s : slots)
        tones = std::max(tones, static_cast<double>(s.rows.size()));

    Stage1Gradient g = stage1_gradient(slots, out.params, ctx);
    RVec hd(k_count);
    for (int k = 0; k < k_count; ++k) {
        double acc = 0.0;
        for (int s = 0; s < t_count; ++s)
            acc += static_cast<double>(s * s);
        hd(k) = 2.0 * acc * std::norm(out.params.gain(k)) * tones;
    }
    out.stalled_doppler = armijo_block(slots, out.params, ctx, armijo, &MultiSlotParams::doppler, g.doppler, hd);

    g = stage1_gradient(slots, out.params, ctx);
    RVec ht = RVec::Zero(t_count);
    const double power = out.params.gain.squaredNorm();
    for (int s = 1; s < t_count; ++s) {
        double acc = 0.0;
        for (int n : slots[static_cast<std::size_t>(s)].rows)
            acc += std::pow(kTwoPi * n * ctx.subcarrier_spacing, 2);
        ht(s) = 2.0 * power * acc;
    }
    out.stalled_tau0 = armijo_block(slots, out.params, ctx, armijo, &MultiSlotParams::tau0, g.tau0, ht);
    return out;
}

int joint_parameter_count(int num_paths, int num_slots)
{
    return 6 * num_paths + 2 * std::max(num_slots - 1, 0);
}

RVec pack_params(const MultiSlotParams& p)
{
    const int k_count = p.num_paths(), t_count = p.num_slots();
    RVec x(joint_parameter_count(k_count, t_count));
    for (int k = 0; k < k_count; ++k) {
        x.segment(6 * k, 6) << p.delay(k), p.theta(k), p.phi(k), p.doppler(k), p.gain(k).real(), p.gain(k).imag();
    }
    for (int s = 1; s < t_count; ++s) {
        x(6 * k_count + 2 * (s - 1)) = p.epsilon(s);
        x(6 * k_count + 2 * (s - 1) + 1) = p.tau0(s);
    }
    return x;
}

MultiSlotParams unpack_params(const RVec& x, int num_paths, int num_slots)
{
    if (x.size() != joint_parameter_count(num_paths, num_slots))
        throw std::invalid_argument("unpack_params: size mismatch");
    MultiSlotParams p;
    p.delay.resize(num_paths);
    p.theta.resize(num_paths);
    p.phi.resize(num_paths);
    p.doppler.resize(num_paths);
    p.gain.resize(num_paths);
    for (int k = 0; k < num_paths; ++k) {
        p.delay(k) = x(6 * k);
        p.theta(k) = x(6 * k + 1);
        p.phi(k) = x(6 * k + 2);
        p.doppler(k) = x(6 * k + 3);
        p.gain(k) = cd(x(6 * k + 4), x(6 * k + 5));
    }
    p.epsilon = RVec::Zero(num_slots);
    p.tau0 = RVec::Zero(num_slots);
    for (int s = 1; s < num_slots; ++s) {
        p.epsilon(s) = x(6 * num_paths + 2 * (s - 1));
        p.tau0(s) = x(6 * num_paths + 2 * (s - 1) + 1);
    }
    return p;
}

CMat model_jacobian(const MultiSlotParams& p, int s, const std::vector<int>& rows, const ModelContext& ctx)
{
    const int k_count = p.num_paths(), t_count = p.num_slots();
    const auto pn = static_cast<Eigen::Index>(rows.size());
    const Eigen::Index nr = ctx.nx * ctx.ny;
    CMat jac = CMat::Zero(pn * nr, joint_parameter_count(k_count, t_count));
    CVec w(pn);
    for (Eigen::Index i = 0; i < pn; ++i)
        w(i) = -kJ * kTwoPi * static_cast<double>(rows[static_cast<std::size_t>(i)]) * ctx.subcarrier_spacing;
    const CVec c = slot_coefficients(p, s);
    CVec sum_dtau = CVec::Zero(pn * nr);
    CVec sum_all = CVec::Zero(pn * nr);
    auto kr = [&](const CVec& a, const CVec& g) {
        CVec out(pn * nr);
        for (Eigen::Index j = 0; j < nr; ++j)
            out.segment(j * pn, pn) = a(j) * g;
        return out;
    };
    for (int k = 0; k < k_count; ++k) {
        const CVec a = steering_vector_upa(p.theta(k), p.phi(k), ctx.nx, ctx.ny);
        CVec da_t, da_p;
        steering_vector_upa_derivatives(p.theta(k), p.phi(k), ctx.nx, ctx.ny, da_t, da_p);
        const CVec g = delay_steering_rows(p.delay(k) + p.tau0(s), rows, ctx.subcarrier_spacing);
        const CVec dg = w.cwiseProduct(g);
        const CVec base = kr(a, g);
        const CVec ddelay = c(k) * kr(a, dg);
        jac.col(6 * k) = ddelay;
        jac.col(6 * k + 1) = c(k) * kr(da_t, g);
        jac.col(6 * k + 2) = c(k) * kr(da_p, g);
        jac.col(6 * k + 3) = kJ * static_cast<double>(s) * c(k) * base;
        const CVec phase = std::exp(kJ * (s * p.doppler(k) + p.epsilon(s))) * base;
        jac.col(6 * k + 4) = phase;
        jac.col(6 * k + 5) = kJ * phase;
        sum_dtau += ddelay;
        sum_all += c(k) * base;
    }
    if (s >= 1) {
        jac.col(6 * k_count + 2 * (s - 1)) = kJ * sum_all;
        jac.col(6 * k_count + 2 * (s - 1) + 1) = sum_dtau;
    }
    return jac;
}

LmResult joint_refine(const std::vector<SlotData>& slots, const MultiSlotParams& p, const ModelContext& ctx,
                      const LmConfig& cfg)
{
    const int k_count = p.num_paths(), t_count = p.num_slots();
    const int n = joint_parameter_count(k_count, t_count);
    LmResult out;
    out.params = p;
    auto objective = [&](const MultiSlotParams& q) { return stage1_objective(slots, q, ctx); };
    out.objective = objective(p);
    RVec x = pack_params(p);
    double lambda = cfg.initial_damping;
    for (int it = 0; it < cfg.max_iterations; ++it) {
        RMat jtj = RMat::Zero(n, n);
        RVec jtr = RVec::Zero(n);
        for (int s = 0; s < t_count; ++s) {
            const SlotData& sd = slots[static_cast<std::size_t>(s)];
            const CMat jac = model_jacobian(out.params, s, sd.rows, ctx);
            const CVec r = vec(sd.y - predict_slot(out.params, s, sd.rows, ctx));
            jtj += (jac.adjoint() * jac).real();
            jtr += (jac.adjoint() * r).real();
        }
        RVec scale = jtj.diagonal().cwiseSqrt();
        for (Eigen::Index i = 0; i < n; ++i)
            if (!(scale(i) > 0.0))
                scale(i) = 1.0;
        const RMat a = scale.cwiseInverse().asDiagonal() * jtj * scale.cwiseInverse().asDiagonal();
        const RVec b = jtr.cwiseQuotient(scale);
        bool accepted = false;
        for (int tries = 0; tries < 20 && !accepted; ++tries) {
            RMat damped = a;
            damped.diagonal().array() += lambda;
            const RVec step = damped.ldlt().solve(b).cwiseQuotient(scale);
            const RVec xn = x + step;
            const MultiSlotParams cand = unpack_params(xn, k_count, t_count);
            const double f = objective(cand);
            if (std::isfinite(f) && f < out.objective) {
                const double gain = (out.objective - f) / std::max(out.objective, 1e-300);
                x = xn;
                out.params = cand;
                out.objective = f;
                lambda = std::max(lambda / 3.0, 1e-12);
                accepted = true;
                ++out.iterations;
                if (gain < cfg.tolerance)
                    return out;
            } else {
                lambda *= 4.0;
            }
        }
        if (!accepted)
            break;
    }
    return out;
}

namespace {

ModelContext context_of(const SystemConfig& sys)
{
    return {sys.subcarrier_spacing, sys.nx, sys.ny};
}

// Per-slot order: the larger of the delay-domain and angle-domain MDL estimates, since paths
// unresolved in one domain may separate in the other.
int slot_model_order(const CMat& y, bool fb)
{
    const Eigen::Index p = y.rows(), nr = y.cols();
    const int snaps_d = static_cast<int>(fb ? 2 * nr : nr);
    const int snaps_s = static_cast<int>(fb ? 2 * p : p);
    const RVec ed = eig_subspace(covariance_temporal(y, fb), 0).eigenvalues;
    const RVec es = eig_subspace(covariance_spatial(y, fb), 0).eigenvalues;
    const int kd = mdl_order(ed.head(std::min<Eigen::Index>(p, snaps_d)), snaps_d);
    const int ks = mdl_order(es.head(std::min<Eigen::Index>(nr, snaps_s)), snaps_s);
    return std::min(std::max(kd, ks), static_cast<int>(std::min(p, nr)) - 1);
}

// Delay of a beam steered at `keep` with the other reference angles nulled.
double beam_delay(const SlotData& sd, const CMat& ref_angles, int keep, const SystemConfig& sys,
                  const HrpeConfig& cfg)
{
    const CMat yb = spatial_beamform(sd.y, ref_angles, keep);
    const SubspaceDecomposition d = eig_subspace(covariance_temporal(yb), 1);
    auto steer = [&](double tau) { return delay_steering_rows(tau, sd.rows, sys.subcarrier_spacing); };
    const Grid1D grid = cfg.delay_grid();
    const Spectrum s = t_music_spectrum(d, steer, grid);
    Eigen::Index imax = 0;
    s.values.maxCoeff(&imax);
    return refine_minimum([&](double t) { return music_denominator(d.signal_basis, steer(t)); },
                          grid.at(static_cast<double>(imax)), 0.5 * grid.step);
}

} // namespace

MultiSlotParams hrpe_initialize(const std::vector<SlotData>& slots, const SystemConfig& sys, const HrpeConfig& cfg,
                                bool& flagged)
{
    const int t_count = static_cast<int>(slots.size());
    if (t_count < 1)
        throw std::invalid_argument("hrpe: need at least one slot");
    const int nr = sys.num_antennas();

    std::map<int, int> counts;
    for (const SlotData& sd : slots)
        ++counts[slot_model_order(sd.y, cfg.forward_backward)];
    int k_hat = 0, best = -1;
    for (const auto& [k, c] : counts)
        if (c >= best) { // ties resolve to the larger order
            best = c;
            k_hat = k;
        }
    if (k_hat < 1)
        throw NoPathsError("no detectable paths");

    // Angles are common to all slots and untouched by the per-slot phase and timing offsets,
    // so the angular stage runs once on every observed row.
    Eigen::Index total = 0;
    for (const SlotData& sd : slots)
        total += sd.y.rows();
    CMat stacked(total, nr);
    Eigen::Index off = 0;
    for (const SlotData& sd : slots) {
        stacked.middleRows(off, sd.y.rows()) = sd.y;
        off += sd.y.rows();
    }
    const SubspaceDecomposition sdec = eig_subspace(covariance_spatial(stacked, cfg.forward_backward), k_hat);
    const AngleGrid agrid = AngleGrid::standard();
    const Spectrum2D ss = s_music_spectrum(sdec, agrid, sys.nx, sys.ny);
    const PeakList2D ap = peak_pick_2d(ss.values, k_hat, 2, PeakRefine::reciprocal_parabolic);
    flagged |= ap.shortfall || ss.flagged > 0;
    k_hat = static_cast<int>(ap.peaks.size());
    if (k_hat < 1)
        throw NoPathsError("no detectable paths");
    RVec theta(k_hat), phi(k_hat);
    CMat ref_a(nr, k_hat);
    for (int k = 0; k < k_hat; ++k) {
        double th = agrid.theta.at(ap.peaks[static_cast<std::size_t>(k)].row_position);
        double ph = agrid.phi.at(ap.peaks[static_cast<std::size_t>(k)].col_position);
        refine_angle(sdec.signal_basis, sys.nx, sys.ny, 0.5 * agrid.theta.step, 0.5 * agrid.phi.step, th, ph);
        theta(k) = th;
        phi(k) = ph;
        ref_a.col(k) = steering_vector_upa(th, ph, sys.nx, sys.ny);
    }

    std::vector<RVec> delays(static_cast<std::size_t>(t_count), RVec::Zero(k_hat));
    std::vector<RVec> thetas(static_cast<std::size_t>(t_count), theta);
    std::vector<RVec> phis(static_cast<std::size_t>(t_count), phi);
    for (int s = 0; s < t_count; ++s)
        for (int k = 0; k < k_hat; ++k)
            delays[static_cast<std::size_t>(s)](k) = beam_delay(slots[static_cast<std::size_t>(s)], ref_a, k, sys, cfg);

    std::vector<CVec> gains(static_cast<std::size_t>(t_count));
    for (int s = 0; s < t_count; ++s) {
        const SlotData& sd = slots[static_cast<std::size_t>(s)];
        CMat a(nr, k_hat), g(sd.y.rows(), k_hat);
        for (int k = 0; k < k_hat; ++k) {
            a.col(k) = steering_vector_upa(thetas[static_cast<std::size_t>(s)](k), phis[static_cast<std::size_t>(s)](k),
                                           sys.nx, sys.ny);
            g.col(k) = delay_steering_rows(delays[static_cast<std::size_t>(s)](k), sd.rows, sys.subcarrier_spacing);
        }
        const LsResult ls = ls_gains(vec(sd.y), khatri_rao(a, g));
        flagged |= ls.ridge;
        gains[static_cast<std::size_t>(s)] = ls.x;
    }

    // Path 1 is the strongest on average so that its gain is a stable phase reference.
    RVec avg = RVec::Zero(k_hat);
    for (const auto& g : gains)
        avg += g.cwiseAbs2();
    std::vector<int> order(static_cast<std::size_t>(k_hat));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return avg(x) > avg(y); });
    auto reorder = [&](const auto& v) {
        std::decay_t<decltype(v)> o = v;
        for (int k = 0; k < k_hat; ++k)
            o(k) = v(order[static_cast<std::size_t>(k)]);
        return o;
    };
    for (int s = 0; s < t_count; ++s) {
        gains[static_cast<std::size_t>(s)] = reorder(gains[static_cast<std::size_t>(s)]);
        delays[static_cast<std::size_t>(s)] = reorder(delays[static_cast<std::size_t>(s)]);
        thetas[static_cast<std::size_t>(s)] = reorder(thetas[static_cast<std::size_t>(s)]);
        phis[static_cast<std::size_t>(s)] = reorder(phis[static_cast<std::size_t>(s)]);
    }
    for (int s = 0; s < t_count; ++s)
        for (int k = 0; k < k_hat; ++k)
            if (std::abs(gains[static_cast<std::size_t>(s)](k)) == 0.0)
                gains[static_cast<std::size_t>(s)](k) = cd(1e-300, 0.0);

    const InitImperfections imp = init_imperfections(gains, delays);
    MultiSlotParams p;
    p.delay = delays[0];
    p.theta = thetas[0];
    p.phi = phis[0];
    p.gain = gains[0];
    p.epsilon = imp.epsilon;
    p.tau0 = imp.tau0;
    p.doppler = RVec::Zero(k_hat);
    for (int k = 0; k < k_hat; ++k)
        p.doppler(k) = doppler_slope(imp.doppler_phase.row(k).transpose());
    return p;
}

namespace {

// Per-path angle update on the spliced frame with the other paths projected out.
void update_angles(const CompensatedFrame& frame, MultiSlotParams& p, const SystemConfig& sys, const HrpeConfig& cfg)
{
    const int k_count = p.num_paths();
    const Eigen::Index m = frame.y.rows();
    const double step = deg2rad(1.0);
    const int half = static_cast<int>(std::round(cfg.angle_window_deg));
    for (int k = 0; k < k_count; ++k) {
        CMat others(m, k_count - 1);
        for (int j = 0, c = 0; j < k_count; ++j)
            if (j != k)
                others.col(c++) = frame.steering(j, p.delay(j));
        const CMat yk = complement_projector(others, m) * frame.y;
        const SubspaceDecomposition d = eig_subspace(covariance_spatial(yk), 1);
        double best = std::numeric_limits<double>::infinity();
        double th = p.theta(k), ph = p.phi(k);
        for (int i = -half; i <= half; ++i)
            for (int j = -half; j <= half; ++j) {
                const double t = p.theta(k) + i * step, f = p.phi(k) + j * step;
                const double v = music_denominator(d.signal_basis, steering_vector_upa(t, f, sys.nx, sys.ny));
                if (v < best) {
                    best = v;
                    th = t;
                    ph = f;
                }
            }
        refine_angle(d.signal_basis, sys.nx, sys.ny, 0.5 * step, 0.5 * step, th, ph);
        p.theta(k) = th;
        p.phi(k) = ph;
    }
}

// Closed-form gains and epsilon, then gradient steps on Doppler and tau0.
MultiSlotParams ml_and_gradient(const std::vector<SlotData>& slots, MultiSlotParams p, const ModelContext& ctx,
                                const HrpeConfig& cfg, bool& flagged)
{
    const MlResult ml = ml_gains_epsilon(slots, p, ctx);
    p.gain = ml.gain;
    flagged |= ml.ridge;
    p.epsilon = ml.epsilon;
    const GradStepResult gs = grad_phi_tau0(slots, p, ctx, cfg.armijo);
    if (!cfg.joint_polish)
        return gs.params;
    return joint_refine(slots, gs.params, ctx, cfg.joint).params;
}

} // namespace

RefinedEstimate hrpe_refine(const std::vector<SlotData>& slots, const MultiSlotParams& init, const SystemConfig& sys,
                            const HrpeConfig& cfg, const IterationCallback& cb)
{
    const ModelContext ctx = context_of(sys);
    RefinedEstimate out;
    MultiSlotParams p = permute_paths(init, power_order(init.gain, init.delay));
    IterationLog l0{0, stage1_objective(slots, p, ctx), p};
    out.log.push_back(l0);
    if (cb)
        cb(l0);
    SicConfig sic;
    sic.delay_grid = cfg.delay_grid();
    sic.window_steps = cfg.window_steps;

    for (int it = 1; it <= cfg.ao_iterations; ++it) {
        const double f_prev = out.log.back().objective;
        MultiSlotParams cand = p;
        const CompensatedFrame frame = compensate_and_splice(slots, cand.epsilon, cand.tau0, cand.doppler,
                                                             sys.subcarrier_spacing);
        update_angles(frame, cand, sys, cfg);
        const SicResult sr = sic_delay_estimation(frame, cand.delay, sic);
        out.flagged |= sr.flagged;
        cand.delay = sr.delay;
        cand = ml_and_gradient(slots, cand, ctx, cfg, out.flagged);
        double f = stage1_objective(slots, cand, ctx);
        if (!(f <= f_prev * (1.0 + 1e-8))) {
            // The subspace step raised the objective; keep the previous geometry.
            cand = ml_and_gradient(slots, p, ctx, cfg, out.flagged);
            f = stage1_objective(slots, cand, ctx);
        }
        p = permute_paths(cand, power_order(cand.gain, cand.delay));
        IterationLog li{it, f, p};
        out.log.push_back(li);
        if (cb)
            cb(li);
    }
    out.params = p;
    out.model_order = p.num_paths();
    return out;
}

RefinedEstimate r_tst_music(const std::vector<SrsObservation>& obs, const SystemConfig& sys, const HrpeConfig& cfg,
                            const IterationCallback& cb)
{
    const std::vector<SlotData> slots = prepare_slots(obs);
    bool flagged = false;
    const MultiSlotParams init = hrpe_initialize(slots, sys, cfg, flagged);
    RefinedEstimate r = hrpe_refine(slots, init, sys, cfg, cb);
    r.flagged |= flagged;
    return r;
}

void write_iteration_log_csv(std::ostream& os, const std::vector<IterationLog>& log)
{
    if (log.empty())
        return;
    const int k = log.front().params.num_paths();
    os << "iteration,objective";
    for (const char* name : {"delay", "theta", "phi", "doppler"})
        for (int i = 0; i < k; ++i)
            os << ',' << name << '_' << i;
    os << '\n';
    os.precision(17);
    for (const auto& l : log) {
        os << l.iteration << ',' << l.objective;
        for (const RVec* v : {&l.params.delay, &l.params.theta, &l.params.phi, &l.params.doppler})
            for (int i = 0; i < k; ++i)
                os << ',' << (*v)(i);
        os << '\n';
    }
}

} // namespace chanx
