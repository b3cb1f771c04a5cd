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

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Dense>

#include "doctest.h"

#include "chanx/hrpe.hpp"

using namespace chanx;

namespace {

constexpr double kTd = 600e-9;
constexpr double kStep = kTd / 512;

const ModelContext kCtx{60e3, 4, 4};

CMat random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng)
{
    CMat m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
        for (Eigen::Index i = 0; i < r; ++i)
            m(i, j) = complex_gaussian(rng, 1.0);
    return m;
}

// Slot s observes BWP s with comb-2 tones.
std::vector<std::vector<int>> hop_rows(int slots, const SystemConfig& sys = {})
{
    std::vector<std::vector<int>> rows;
    for (int s = 0; s < slots; ++s)
        rows.push_back(hopping_selection(s + 1, sys.hop_count, sys.tones_per_bwp(), sys.num_subcarriers, sys.comb));
    return rows;
}

MultiSlotParams make_params(const std::vector<double>& delay_ns, const std::vector<double>& theta_deg,
                            const std::vector<double>& phi_deg, const std::vector<cd>& gain,
                            const std::vector<double>& doppler, int slots)
{
    const auto k = static_cast<Eigen::Index>(delay_ns.size());
    MultiSlotParams p;
    p.delay.resize(k);
    p.theta.resize(k);
    p.phi.resize(k);
    p.gain.resize(k);
    p.doppler.resize(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        const auto u = static_cast<std::size_t>(i);
        p.delay(i) = delay_ns[u] * 1e-9;
        p.theta(i) = deg2rad(theta_deg[u]);
        p.phi(i) = deg2rad(phi_deg[u]);
        p.gain(i) = gain[u];
        p.doppler(i) = doppler[u];
    }
    p.epsilon = RVec::Zero(slots);
    p.tau0 = RVec::Zero(slots);
    return p;
}

std::vector<SlotData> simulate(const MultiSlotParams& p, double noise = 0.0, Rng* rng = nullptr)
{
    std::vector<SlotData> slots;
    const auto rows = hop_rows(p.num_slots());
    for (int s = 0; s < p.num_slots(); ++s) {
        CMat y = predict_slot(p, s, rows[static_cast<std::size_t>(s)], kCtx);
        if (noise > 0.0)
            for (Eigen::Index j = 0; j < y.cols(); ++j)
                for (Eigen::Index i = 0; i < y.rows(); ++i)
                    y(i, j) += complex_gaussian(*rng, noise);
        slots.push_back({y, rows[static_cast<std::size_t>(s)]});
    }
    return slots;
}

double full_band_nmse(const MultiSlotParams& est, const MultiSlotParams& truth, int slots)
{
    double num = 0.0, den = 0.0;
    for (int s = 0; s < slots; ++s) {
        const CMat h = reconstruct_stage1(truth, s, 256, kCtx);
        num += (reconstruct_stage1(est, s, 256, kCtx) - h).squaredNorm();
        den += h.squaredNorm();
    }
    return num / den;
}

// The two-path delay ambiguity example: weak path at 40 ns, strong path at 107 ns.
MultiSlotParams ambiguity_case()
{
    return make_params({107.0, 40.0}, {70.0, 112.0}, {65.0, 100.0},
                       {cd(1.0, 0.0), std::polar(std::pow(10.0, -8.8 / 20.0), 0.9)}, {0.03, -0.02}, 4);
}

HrpeConfig desk_config()
{
    HrpeConfig c;
    c.max_delay = kTd;
    return c;
}

} // namespace

TEST_CASE("ls_gains: consistent system, single column, normal equations, ridge")
{
    Rng rng = derive_rng(11, {1});
    const CMat v = random_matrix(40, 3, rng);
    const CVec c = random_matrix(3, 1, rng).col(0);
    const LsResult exact = ls_gains(v * c, v);
    CHECK_FALSE(exact.ridge);
    CHECK((exact.x - c).norm() <= 1e-12 * c.norm());

    CVec u = random_matrix(40, 1, rng).col(0);
    u.normalize();
    const CVec y = random_matrix(40, 1, rng).col(0);
    const LsResult one = ls_gains(y, u);
    CHECK(std::abs(one.x(0) - u.dot(y)) <= 1e-12);

    const CVec oracle = (v.adjoint() * v).inverse() * (v.adjoint() * y);
    const LsResult r = ls_gains(y, v);
    CHECK((r.x - oracle).norm() <= 1e-10 * oracle.norm());
    CHECK((v.adjoint() * (y - v * r.x)).norm() <= 1e-8 * y.norm());

    CMat dup(40, 2);
    dup << v.col(0), v.col(0);
    CHECK(ls_gains(y, dup).ridge);
}

TEST_CASE("init_imperfections: self ratios, common rotation, forward and inverse")
{
    Rng rng = derive_rng(12, {1});
    const CVec g1 = random_matrix(3, 1, rng).col(0);
    const RVec d1 = (RVec(3) << 40e-9, 107e-9, 300e-9).finished();

    const InitImperfections one = init_imperfections({g1}, {d1});
    CHECK(one.epsilon(0) == 0.0);
    CHECK(one.tau0(0) == 0.0);
    CHECK(one.doppler_phase.cwiseAbs().maxCoeff() == 0.0);

    const InitImperfections rot = init_imperfections({g1, std::exp(kJ * 0.7) * g1}, {d1, d1});
    CHECK(rot.epsilon(1) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(rot.doppler_phase.col(1).cwiseAbs().maxCoeff() <= 1e-12);

    // Slot t gains alpha_k exp(j(phi_k + eps)), delays tau_k + tau0.
    const RVec phi = (RVec(3) << 0.4, -1.1, 2.0).finished();
    const double eps = -2.3, tau0 = 9.5e-9;
    CVec gt(3);
    for (int k = 0; k < 3; ++k)
        gt(k) = g1(k) * std::exp(kJ * (phi(k) + eps));
    const RVec dt = d1.array() + tau0;
    const InitImperfections inv = init_imperfections({g1, gt}, {d1, dt});
    CHECK(std::abs(wrap_phase(inv.epsilon(1) - (eps + phi(0)))) <= 1e-12);
    for (int k = 0; k < 3; ++k)
        CHECK(std::abs(wrap_phase(inv.doppler_phase(k, 1) - (phi(k) - phi(0)))) <= 1e-12);
    CHECK(inv.tau0(1) == doctest::Approx(tau0).epsilon(1e-12));

    // The absorbed convention reproduces the slot-t gains exactly.
    for (int k = 0; k < 3; ++k)
        CHECK(std::abs(g1(k) * std::exp(kJ * (inv.doppler_phase(k, 1) + inv.epsilon(1))) - gt(k)) <= 1e-12);

    CVec z = g1;
    z(0) = 0.0;
    CHECK_THROWS_WITH(init_imperfections({z, gt}, {d1, dt}), doctest::Contains("reference path vanished"));
}

TEST_CASE("doppler_slope: wrapped linear phase")
{
    RVec ph(6);
    for (int s = 0; s < 6; ++s)
        ph(s) = wrap_phase(1.9 * s);
    CHECK(doppler_slope(ph) == doctest::Approx(1.9).epsilon(1e-12));
    CHECK(doppler_slope(RVec::Zero(1)) == 0.0);
}

TEST_CASE("compensate_and_splice: identity, stacking, exact compensation")
{
    MultiSlotParams p = make_params({40.0, 210.0}, {60.0, 120.0}, {50.0, 130.0}, {cd(1.0, 0.2), cd(-0.4, 0.5)},
                                    {0.2, -0.45}, 4);
    const RVec zero = RVec::Zero(4);

    std::vector<SlotData> clean = simulate(p);
    const CompensatedFrame id = compensate_and_splice(clean, zero, zero, p.doppler, 60e3);
    CHECK(id.y.rows() == 128);
    for (int s = 0; s < 4; ++s)
        CHECK((id.y.middleRows(32 * s, 32) - clean[static_cast<std::size_t>(s)].y).norm() == 0.0);

    p.epsilon << 0.0, 1.3, -2.9, 0.4;
    p.tau0 << 0.0, 4e-9, 11e-9, 15.5e-9;
    const std::vector<SlotData> dirty = simulate(p);
    const CompensatedFrame f = compensate_and_splice(dirty, p.epsilon, p.tau0, p.doppler, 60e3);

    // Stacked slot-1 model: block s is sum_k gain_k exp(j s doppler_k) g_s(tau_k) a_k^T.
    CMat model = CMat::Zero(128, 16);
    for (int k = 0; k < 2; ++k)
        model += p.gain(k) * f.steering(k, p.delay(k)) *
                 steering_vector_upa(p.theta(k), p.phi(k), 4, 4).transpose();
    CHECK((f.y - model).norm() <= 1e-10 * model.norm());
}

TEST_CASE("SIC: two-path delay ambiguity resolved by cancellation")
{
    const MultiSlotParams p = ambiguity_case();
    const CompensatedFrame f = compensate_and_splice(simulate(p), RVec::Zero(4), RVec::Zero(4), p.doppler, 60e3);
    const Grid1D grid = desk_config().delay_grid();

    // Without cancellation the weak path's spectrum has a secondary peak near the strong delay.
    const RVec weak = per_path_spectrum(f, 1, 2, grid);
    const PeakList peaks = peak_pick(weak, 2, 2);
    REQUIRE(peaks.peaks.size() == 2);
    bool near_strong = false, near_weak = false;
    for (const Peak& pk : peaks.peaks) {
        near_strong |= std::abs(grid.at(pk.position) - 107e-9) <= 3 * kStep;
        near_weak |= std::abs(grid.at(pk.position) - 40e-9) <= kStep;
    }
    CHECK(near_strong);
    CHECK(near_weak);

    SicConfig cfg;
    cfg.delay_grid = grid;
    cfg.full_search = true;
    const SicResult full = sic_delay_estimation(f, RVec::Zero(2), cfg);
    CHECK(std::abs(full.delay(0) - 107e-9) <= kStep);
    CHECK(std::abs(full.delay(1) - 40e-9) <= kStep);

    cfg.full_search = false;
    const RVec init = (RVec(2) << 109e-9, 37e-9).finished();
    const SicResult win = sic_delay_estimation(f, init, cfg);
    CHECK_FALSE(win.flagged);
    CHECK(std::abs(win.delay(0) - 107e-9) <= 1e-12);
    CHECK(std::abs(win.delay(1) - 40e-9) <= 1e-12);
}

TEST_CASE("SIC: one path equals the plain spliced-frame peak, boundary widening")
{
    MultiSlotParams p = make_params({93.75}, {80.0}, {70.0}, {cd(0.8, -0.3)}, {0.5}, 4);
    const CompensatedFrame f = compensate_and_splice(simulate(p), RVec::Zero(4), RVec::Zero(4), p.doppler, 60e3);
    SicConfig cfg;
    cfg.delay_grid = desk_config().delay_grid();
    cfg.full_search = true;
    const SicResult r = sic_delay_estimation(f, RVec::Zero(1), cfg);
    CHECK(std::abs(r.delay(0) - 93.75e-9) <= 1e-12);

    // A start eight steps away sits outside the first window but inside the widened one.
    cfg.full_search = false;
    cfg.record_spectra = true;
    const SicResult w = sic_delay_estimation(f, RVec::Constant(1, 93.75e-9 + 8 * kStep), cfg);
    CHECK_FALSE(w.flagged);
    CHECK(w.grids[0].count == 21);
    CHECK(std::abs(w.delay(0) - 93.75e-9) <= 1e-12);

    const SicResult far = sic_delay_estimation(f, RVec::Constant(1, 93.75e-9 + 40 * kStep), cfg);
    CHECK(far.flagged);
}

TEST_CASE("ml_gains_epsilon: exact model, positive scaling, epsilon sweep oracle")
{
    MultiSlotParams p = make_params({40.0, 210.0, 330.0}, {60.0, 100.0, 125.0}, {50.0, 95.0, 140.0},
                                    {cd(1.0, 0.2), cd(-0.4, 0.5), cd(0.1, -0.3)}, {0.2, -0.45, 0.9}, 4);
    p.epsilon << 0.0, 1.3, -2.9, 0.4;
    p.tau0 << 0.0, 4e-9, 11e-9, 15.5e-9;
    std::vector<SlotData> slots = simulate(p);

    MultiSlotParams start = p;
    start.gain.setZero();
    const MlResult ml = ml_gains_epsilon(slots, start, kCtx);
    MultiSlotParams fit = p;
    fit.gain = ml.gain;
    fit.epsilon = ml.epsilon;
    double energy = 0.0;
    for (const auto& s : slots)
        energy += s.y.squaredNorm();
    CHECK((ml.gain - p.gain).norm() <= 1e-12);
    CHECK(stage1_objective(slots, fit, kCtx) <= 1e-16 * energy);
    for (int s = 1; s < 4; ++s)
        CHECK(std::abs(wrap_phase(fit.epsilon(s) - p.epsilon(s))) <= 1e-10);

    std::vector<SlotData> scaled = slots;
    for (auto& s : scaled)
        s.y *= 3.5;
    const MlResult big = ml_gains_epsilon(scaled, start, kCtx);
    CHECK((big.gain - 3.5 * ml.gain).norm() <= 1e-10 * big.gain.norm());
    CHECK((big.epsilon - ml.epsilon).cwiseAbs().maxCoeff() <= 1e-12);

    Rng rng = derive_rng(13, {1});
    const std::vector<SlotData> noisy = simulate(p, 0.5, &rng);
    MultiSlotParams q = p;
    q.delay(1) += 2e-9;
    const MlResult mn = ml_gains_epsilon(noisy, q, kCtx);
    q.gain = mn.gain;
    for (int s = 1; s < 4; ++s) {
        q.epsilon(s) = 0.0;
        const CMat m0 = predict_slot(q, s, noisy[static_cast<std::size_t>(s)].rows, kCtx);
        const cd ip = (m0.conjugate().array() * noisy[static_cast<std::size_t>(s)].y.array()).sum();
        double best = -1e300, arg = 0.0;
        for (int i = 0; i < 10000; ++i) {
            const double e = -kPi + kTwoPi * i / 10000.0;
            const double v = std::real(std::exp(-kJ * e) * ip);
            if (v > best) {
                best = v;
                arg = e;
            }
        }
        CHECK(std::abs(wrap_phase(mn.epsilon(s) - arg)) <= kTwoPi / 10000.0);
    }
}

TEST_CASE("stage1_gradient: central differences, zero at truth, Armijo step")
{
    MultiSlotParams p = make_params({40.0, 210.0}, {60.0, 120.0}, {50.0, 130.0}, {cd(1.0, 0.2), cd(-0.4, 0.5)},
                                    {0.2, -0.45}, 4);
    p.epsilon << 0.0, 1.3, -2.9, 0.4;
    p.tau0 << 0.0, 4e-9, 11e-9, 15.5e-9;
    const std::vector<SlotData> slots = simulate(p);

    const Stage1Gradient g0 = stage1_gradient(slots, p, kCtx);
    CHECK(g0.doppler.norm() <= 1e-8);
    CHECK(g0.tau0.norm() * 1e-9 <= 1e-8);
    const GradStepResult still = grad_phi_tau0(slots, p, kCtx);
    CHECK((still.params.doppler - p.doppler).norm() == 0.0);
    CHECK((still.params.tau0 - p.tau0).norm() == 0.0);

    Rng rng = derive_rng(14, {1});
    for (int trial = 0; trial < 5; ++trial) {
        MultiSlotParams q = p;
        for (int k = 0; k < 2; ++k)
            q.doppler(k) += 0.2 * gaussian(rng, 0.0, 1.0);
        for (int s = 1; s < 4; ++s)
            q.tau0(s) += 2e-9 * gaussian(rng, 0.0, 1.0);
        const Stage1Gradient g = stage1_gradient(slots, q, kCtx);
        for (int k = 0; k < 2; ++k) {
            const double h = 1e-6 * std::max(std::abs(q.doppler(k)), 1.0);
            MultiSlotParams a = q, b = q;
            a.doppler(k) += h;
            b.doppler(k) -= h;
            const double fd = (stage1_objective(slots, a, kCtx) - stage1_objective(slots, b, kCtx)) / (2 * h);
            CHECK(std::abs(g.doppler(k) - fd) <= 1e-4 * std::max(std::abs(fd), 1e-6 * g.doppler.norm()));
        }
        for (int s = 1; s < 4; ++s) {
            const double h = 1e-6 * std::max(std::abs(q.tau0(s)), 1e-9);
            MultiSlotParams a = q, b = q;
            a.tau0(s) += h;
            b.tau0(s) -= h;
            const double fd = (stage1_objective(slots, a, kCtx) - stage1_objective(slots, b, kCtx)) / (2 * h);
            CHECK(std::abs(g.tau0(s) - fd) <= 1e-4 * std::max(std::abs(fd), 1e-6 * g.tau0.norm()));
        }
        const double f0 = stage1_objective(slots, q, kCtx);
        const GradStepResult st = grad_phi_tau0(slots, q, kCtx);
        CHECK(stage1_objective(slots, st.params, kCtx) <= f0);
    }
}

TEST_CASE("hrpe_refine: noiseless on-grid instance without imperfections is exact after one iteration")
{
    const MultiSlotParams p = make_params({kStep * 30 / 1e-9, kStep * 120 / 1e-9, kStep * 260 / 1e-9},
                                          {60.0, 95.0, 128.0}, {45.0, 110.0, 75.0},
                                          {cd(1.2, 0.3), cd(-0.5, 0.6), cd(0.2, -0.35)}, {0.0, 0.0, 0.0}, 4);
    const std::vector<SlotData> slots = simulate(p);
    SystemConfig sys;
    HrpeConfig cfg = desk_config();
    cfg.ao_iterations = 1;
    bool flagged = false;
    const MultiSlotParams init = hrpe_initialize(slots, sys, cfg, flagged);
    REQUIRE(init.num_paths() == 3);
    const RefinedEstimate r = hrpe_refine(slots, init, sys, cfg);
    for (int k = 0; k < 3; ++k) {
        CHECK(std::abs(r.params.delay(k) - p.delay(k)) <= 1e-13);
        CHECK(std::abs(r.params.theta(k) - p.theta(k)) <= 1e-7);
        CHECK(std::abs(r.params.phi(k) - p.phi(k)) <= 1e-7);
        CHECK(std::abs(r.params.gain(k) - p.gain(k)) <= 1e-6);
    }
    CHECK(full_band_nmse(r.params, p, 4) <= 1e-12);
}

TEST_CASE("r_tst_music: imperfect noisy scenario, monotone objective and convention-free reconstruction")
{
    ScenarioConfig sc;
    sc.system.noise_var = std::pow(10.0, -2.0);
    const ScenarioRealization real = realize_scenario(sc, 4, 2026, 3);
    HrpeConfig cfg = desk_config();
    std::vector<double> nmse;
    const RefinedEstimate r = r_tst_music(real.observations, sc.system, cfg, [&](const IterationLog& l) {
        double num = 0.0, den = 0.0;
        for (int s = 0; s < 4; ++s) {
            const CMat& h = real.channels[static_cast<std::size_t>(s)].H;
            num += (reconstruct_stage1(l.params, s, 256, kCtx) - h).squaredNorm();
            den += h.squaredNorm();
        }
        nmse.push_back(num / den);
    });
    REQUIRE(r.log.size() == 11);
    for (std::size_t i = 1; i < r.log.size(); ++i)
        CHECK(r.log[i].objective <= r.log[i - 1].objective * (1.0 + 1e-8));
    CHECK(nmse.back() <= nmse.front());
    CHECK(nmse.back() < 1e-2);
}

TEST_CASE("reconstruction error grows with injected delay perturbation")
{
    const MultiSlotParams p = make_params({40.0, 210.0}, {60.0, 120.0}, {50.0, 130.0},
                                          {cd(1.0, 0.2), cd(-0.4, 0.5)}, {0.2, -0.45}, 4);
    double prev = 0.0;
    for (double d : {0.1e-9, 0.2e-9, 0.4e-9, 0.8e-9, 1.6e-9}) {
        MultiSlotParams q = p;
        q.delay(0) += d;
        const double e = full_band_nmse(q, p, 4);
        CHECK(e > prev);
        prev = e;
    }
}

TEST_CASE("iteration log CSV")
{
    MultiSlotParams p = make_params({40.0}, {60.0}, {50.0}, {cd(1.0, 0.0)}, {0.25}, 2);
    std::ostringstream os;
    write_iteration_log_csv(os, {{0, 2.5, p}, {1, 1.5, p}});
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "iteration,objective,delay_0,theta_0,phi_0,doppler_0");
    std::getline(is, line);
    CHECK(line.rfind("0,2.5,", 0) == 0);
    int n = 1;
    while (std::getline(is, line))
        ++n;
    CHECK(n == 2);
}

TEST_CASE("model_jacobian matches central differences in every packed coordinate")
{
    MultiSlotParams p = make_params({40.0, 210.0}, {60.0, 120.0}, {50.0, 130.0}, {cd(1.0, 0.2), cd(-0.4, 0.5)},
                                    {0.2, -0.45}, 4);
    p.epsilon << 0.0, 1.3, -2.9, 0.4;
    p.tau0 << 0.0, 4e-9, 11e-9, 15.5e-9;
    const auto rows = hop_rows(4);
    const RVec x = pack_params(p);
    CHECK((pack_params(unpack_params(x, 2, 4)) - x).norm() == 0.0);
    for (int s = 0; s < 4; ++s) {
        const CMat jac = model_jacobian(p, s, rows[static_cast<std::size_t>(s)], kCtx);
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            const bool delay_like = i < 12 ? i % 6 == 0 : (i - 12) % 2 == 1;
            const double h = delay_like ? 1e-6 * std::max(std::abs(x(i)), 1e-8) : 1e-6 * std::max(std::abs(x(i)), 1.0);
            RVec xa = x, xb = x;
            xa(i) += h;
            xb(i) -= h;
            const CVec fd = (vec(predict_slot(unpack_params(xa, 2, 4), s, rows[static_cast<std::size_t>(s)], kCtx)) -
                             vec(predict_slot(unpack_params(xb, 2, 4), s, rows[static_cast<std::size_t>(s)], kCtx))) /
                            (2 * h);
            CHECK((jac.col(i) - fd).norm() <= 1e-4 * std::max(fd.norm(), 1e-6 * jac.norm()));
        }
    }
}

TEST_CASE("AO components after the subspace step never raise the objective")
{
    MultiSlotParams p = make_params({40.0, 210.0, 330.0}, {60.0, 100.0, 125.0}, {50.0, 95.0, 140.0},
                                    {cd(1.0, 0.2), cd(-0.4, 0.5), cd(0.1, -0.3)}, {0.2, -0.45, 0.1}, 4);
    p.epsilon << 0.0, 1.3, -2.9, 0.4;
    p.tau0 << 0.0, 4e-9, 11e-9, 15.5e-9;
    Rng rng = derive_rng(15, {1});
    const std::vector<SlotData> slots = simulate(p, 0.05, &rng);
    MultiSlotParams q = p;
    q.delay += (RVec(3) << 1.5e-9, -2e-9, 1e-9).finished();
    q.doppler.array() += 0.05;
    q.tau0(2) += 2e-9;
    double f = stage1_objective(slots, q, kCtx);
    const MlResult ml = ml_gains_epsilon(slots, q, kCtx);
    q.gain = ml.gain;
    q.epsilon = ml.epsilon;
    const double f_ml = stage1_objective(slots, q, kCtx);
    CHECK(f_ml <= f * (1 + 1e-8));
    const GradStepResult gs = grad_phi_tau0(slots, q, kCtx);
    const double f_gs = stage1_objective(slots, gs.params, kCtx);
    CHECK(f_gs <= f_ml * (1 + 1e-8));
    const LmResult lm = joint_refine(slots, gs.params, kCtx);
    CHECK(lm.objective == doctest::Approx(stage1_objective(slots, lm.params, kCtx)).epsilon(1e-12));
    CHECK(lm.objective <= f_gs * (1 + 1e-8));

    // Noiseless data: the perturbed start converges to the truth, and the truth is a fixed point.
    const std::vector<SlotData> clean = simulate(p);
    MultiSlotParams r = p;
    r.delay += (RVec(3) << 1.5e-9, -2e-9, 1e-9).finished();
    r.doppler.array() += 0.05;
    r.tau0(2) += 2e-9;
    CHECK(full_band_nmse(joint_refine(clean, r, kCtx).params, p, 4) <= 1e-20);
    const LmResult still = joint_refine(clean, p, kCtx);
    CHECK(still.iterations == 0);
    CHECK((pack_params(still.params) - pack_params(p)).norm() == 0.0);
}
