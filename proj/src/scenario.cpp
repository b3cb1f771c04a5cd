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

#include "chanx/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace chanx {

void SystemConfig::validate() const
{
    if (num_subcarriers < 1 || nx < 1 || ny < 1 || hop_count < 1 || comb < 1)
        throw std::invalid_argument("system: counts must be positive");
    if (subcarrier_spacing <= 0.0 || carrier_freq <= 0.0 || srs_period <= 0.0)
        throw std::invalid_argument("system: frequencies and period must be positive");
    if (num_subcarriers % (hop_count * comb) != 0)
        throw std::invalid_argument("system: N must be divisible by hop_count * comb");
    if (estimation_slots < 1)
        throw std::invalid_argument("system: estimation_slots must be >= 1");
    if (noise_var < 0.0)
        throw std::invalid_argument("system: noise_var must be >= 0");
    if (!hop_order.empty()) {
        if (static_cast<int>(hop_order.size()) != hop_count)
            throw std::invalid_argument("system: hop_order must list every BWP once");
        std::vector<int> sorted = hop_order;
        std::sort(sorted.begin(), sorted.end());
        for (int i = 0; i < hop_count; ++i)
            if (sorted[static_cast<std::size_t>(i)] != i)
                throw std::invalid_argument("system: hop_order is not a permutation");
    }
    const int p = tones_per_bwp();
    const int pz = largest_prime_at_most(p);
    if (pz < 2 || zc_root < 1 || zc_root >= pz)
        throw std::invalid_argument("system: zc_root must lie in [1, P'-1]");
}

void PathSet::sort_by_power()
{
    std::stable_sort(paths.begin(), paths.end(), [](const Path& a, const Path& b) {
        const double pa = std::norm(a.gain), pb = std::norm(b.gain);
        if (pa != pb)
            return pa > pb;
        return a.delay < b.delay;
    });
}

CVec steering_vector_upa(double theta, double phi, int nx, int ny)
{
    const double u = std::sin(theta) * std::cos(phi);
    const double v = std::cos(theta);
    const double sx = 1.0 / std::sqrt(static_cast<double>(nx));
    const double sy = 1.0 / std::sqrt(static_cast<double>(ny));
    CVec a(nx * ny);
    for (int ix = 0; ix < nx; ++ix) {
        const cd ax = sx * std::exp(kJ * (kPi * ix * u));
        for (int iy = 0; iy < ny; ++iy)
            a(ix * ny + iy) = ax * sy * std::exp(kJ * (kPi * iy * v));
    }
    return a;
}

void steering_vector_upa_derivatives(double theta, double phi, int nx, int ny, CVec& d_theta,
                                     CVec& d_phi)
{
    const CVec a = steering_vector_upa(theta, phi, nx, ny);
    const double du_dtheta = std::cos(theta) * std::cos(phi);
    const double du_dphi = -std::sin(theta) * std::sin(phi);
    const double dv_dtheta = -std::sin(theta);
    d_theta.resize(nx * ny);
    d_phi.resize(nx * ny);
    for (int ix = 0; ix < nx; ++ix)
        for (int iy = 0; iy < ny; ++iy) {
            const int i = ix * ny + iy;
            d_theta(i) = a(i) * kJ * kPi * (ix * du_dtheta + iy * dv_dtheta);
            d_phi(i) = a(i) * kJ * kPi * (ix * du_dphi);
        }
}

CVec delay_steering(double tau, int n, double fs)
{
    CVec g(n);
    for (int i = 0; i < n; ++i)
        g(i) = std::exp(kJ * (-kTwoPi * i * fs * tau));
    return g;
}

CVec delay_steering_rows(double tau, const std::vector<int>& rows, double fs)
{
    CVec g(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        g(static_cast<Eigen::Index>(i)) = std::exp(kJ * (-kTwoPi * rows[i] * fs * tau));
    return g;
}

double max_doppler(double speed_kmh, double carrier_freq)
{
    return speed_kmh / 3.6 * carrier_freq / kSpeedOfLight;
}

PathSet generate_paths(const SystemConfig& sys, const PathSamplerConfig& spread, Rng& rng)
{
    const int k = spread.num_paths;
    if (k < 1)
        throw std::invalid_argument("paths: num_paths must be >= 1");
    if (spread.max_delay < 0.0)
        throw std::invalid_argument("paths: max_delay must be >= 0");
    if (!spread.fixed_delays.empty() && static_cast<int>(spread.fixed_delays.size()) != k)
        throw std::invalid_argument("paths: fixed_delays size must equal num_paths");
    if (!spread.fixed_powers_db.empty() && static_cast<int>(spread.fixed_powers_db.size()) != k)
        throw std::invalid_argument("paths: fixed_powers_db size must equal num_paths");

    std::vector<double> delays;
    if (!spread.fixed_delays.empty()) {
        delays = spread.fixed_delays;
    } else {
        bool ok = false;
        for (int attempt = 0; attempt < std::max(1, spread.max_retries) && !ok; ++attempt) {
            delays.assign(static_cast<std::size_t>(k), 0.0);
            for (auto& d : delays)
                d = uniform(rng, 0.0, spread.max_delay);
            ok = true;
            for (int i = 0; i < k && ok; ++i)
                for (int j = i + 1; j < k && ok; ++j)
                    if (std::abs(delays[static_cast<std::size_t>(i)] - delays[static_cast<std::size_t>(j)]) <
                        spread.min_delay_spacing)
                        ok = false;
        }
        if (!ok)
            throw std::invalid_argument("paths: minimum delay spacing could not be satisfied");
    }

    const double fd_max = max_doppler(spread.speed_kmh, sys.carrier_freq);
    PathSet set;
    set.paths.resize(static_cast<std::size_t>(k));
    double total = 0.0;
    for (int i = 0; i < k; ++i) {
        Path& p = set.paths[static_cast<std::size_t>(i)];
        p.delay = delays[static_cast<std::size_t>(i)];
        p.azimuth = uniform(rng, spread.theta_min, spread.theta_max);
        p.elevation = uniform(rng, spread.phi_min, spread.phi_max);
        if (!spread.fixed_powers_db.empty()) {
            const double amp = std::pow(10.0, spread.fixed_powers_db[static_cast<std::size_t>(i)] / 20.0);
            p.gain = amp * std::exp(kJ * uniform(rng, -kPi, kPi));
        } else {
            const double mean_power =
                spread.pdp_delay_spread > 0.0 ? std::exp(-p.delay / spread.pdp_delay_spread) : 1.0;
            p.gain = complex_gaussian(rng, mean_power);
        }
        p.doppler = fd_max * std::cos(uniform(rng, -kPi, kPi));
        total += std::norm(p.gain);
    }
    if (spread.normalize_power && spread.fixed_powers_db.empty() && total > 0.0) {
        const double scale = std::sqrt(sys.num_antennas() / total);
        for (auto& p : set.paths)
            p.gain *= scale;
    }
    return set;
}

void evolve_imperfections(ImperfectionTrace& trace, int t, Rng& rng, const DriftConfig& drift,
                          const PathSet& paths, double srs_period)
{
    if (trace.size() != t - 1)
        throw std::invalid_argument("imperfections: trace must be filled through slot t-1");
    const std::size_t k = paths.paths.size();
    SlotImperfection s;
    s.doppler.resize(k);
    s.doppler_phase.assign(k, 0.0);
    if (t == 1) {
        for (std::size_t i = 0; i < k; ++i)
            s.doppler[i] = drift.doppler ? paths.paths[i].doppler : 0.0;
        trace.slots.push_back(std::move(s));
        return;
    }
    const SlotImperfection& prev = trace.at(t - 1);
    for (std::size_t i = 0; i < k; ++i) {
        double f = prev.doppler[i];
        if (drift.doppler && !drift.frozen) {
            const double mu = paths.paths[i].doppler;
            const double w = gaussian(rng, 0.0, std::sqrt(drift.gamma_d));
            f = (1.0 - drift.beta_d) * f + drift.beta_d * (mu + w);
        }
        s.doppler[i] = f;
        s.doppler_phase[i] = prev.doppler_phase[i] + kTwoPi * srs_period * f;
    }
    // Draw order is fixed so that toggling one factor leaves the others unchanged.
    const double eps = uniform(rng, -kPi, kPi);
    const double tau0 = uniform(rng, 0.0, drift.tau0_max);
    s.epsilon = drift.phase_noise ? eps : 0.0;
    s.tau0 = drift.timing_offset ? tau0 : 0.0;
    trace.slots.push_back(std::move(s));
}

CMat synthesize_cfr(const std::vector<int>& rows, double fs, const CVec& gains, const RVec& delays,
                    const CMat& steering)
{
    const Eigen::Index k = gains.size();
    CMat g(static_cast<Eigen::Index>(rows.size()), k);
    for (Eigen::Index i = 0; i < k; ++i)
        g.col(i) = delay_steering_rows(delays(i), rows, fs) * gains(i);
    return g * steering.transpose();
}

FullBandChannel full_band_cfr(const PathSet& paths, const ImperfectionTrace& trace, int t,
                              const SystemConfig& sys)
{
    const SlotImperfection& s = trace.at(t);
    const int k = paths.size();
    CVec gains(k);
    RVec delays(k);
    CMat steer(sys.num_antennas(), k);
    for (int i = 0; i < k; ++i) {
        const Path& p = paths.paths[static_cast<std::size_t>(i)];
        gains(i) = p.gain * std::exp(kJ * (s.epsilon + s.doppler_phase[static_cast<std::size_t>(i)]));
        delays(i) = p.delay + s.tau0;
        steer.col(i) = steering_vector_upa(p.azimuth, p.elevation, sys.nx, sys.ny);
    }
    FullBandChannel out;
    out.slot = t;
    out.H = synthesize_cfr(all_subcarriers(sys.num_subcarriers), sys.subcarrier_spacing, gains, delays,
                           steer);
    return out;
}

std::vector<int> all_subcarriers(int n)
{
    std::vector<int> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), 0);
    return rows;
}

int bwp_of_slot(int t, int hop_count, const std::vector<int>& hop_order)
{
    const int phase = ((t - 1) % hop_count + hop_count) % hop_count;
    return hop_order.empty() ? phase : hop_order[static_cast<std::size_t>(phase)];
}

std::vector<int> hopping_selection(int t, int hop_count, int tones, int n, int comb,
                                   const std::vector<int>& hop_order)
{
    if (hop_count < 1 || comb < 1 || n % (hop_count * comb) != 0)
        throw std::invalid_argument("hopping: N must be divisible by hop_count * comb");
    if (tones != n / (hop_count * comb))
        throw std::invalid_argument("hopping: tones must equal N / (hop_count * comb)");
    const int b = bwp_of_slot(t, hop_count, hop_order);
    const int start = b * (n / hop_count);
    std::vector<int> rows(static_cast<std::size_t>(tones));
    for (int i = 0; i < tones; ++i)
        rows[static_cast<std::size_t>(i)] = start + comb * i;
    return rows;
}

int largest_prime_at_most(int p)
{
    for (int c = p; c >= 2; --c) {
        bool prime = true;
        for (int d = 2; d * d <= c; ++d)
            if (c % d == 0) {
                prime = false;
                break;
            }
        if (prime)
            return c;
    }
    return 0;
}

CVec zc_pilot(int p, int root)
{
    const int pz = largest_prime_at_most(p);
    if (pz < 2 || root < 1 || root >= pz)
        throw std::invalid_argument("zc_pilot: root must lie in [1, P'-1] for prime P'");
    CVec x(p);
    for (int m = 0; m < p; ++m) {
        // The phase index is reduced mod 2P' to keep the argument small.
        const long long mm = m % pz;
        const long long idx = (static_cast<long long>(root) * mm * (mm + 1)) % (2LL * pz);
        x(m) = std::exp(kJ * (-kPi * static_cast<double>(idx) / pz));
    }
    return x;
}

SrsObservation srs_observe(const FullBandChannel& full, const std::vector<int>& selection,
                           const CVec& pilot, double noise_var, Rng& rng, int hop_index)
{
    const auto p = static_cast<Eigen::Index>(selection.size());
    if (pilot.size() != p)
        throw std::invalid_argument("srs_observe: pilot length must equal selection length");
    SrsObservation obs;
    obs.slot = full.slot;
    obs.hop_index = hop_index;
    obs.pilot = pilot;
    obs.selection = selection;
    obs.Y.resize(p, full.H.cols());
    for (Eigen::Index i = 0; i < p; ++i)
        obs.Y.row(i) = pilot(i) * full.H.row(selection[static_cast<std::size_t>(i)]);
    if (noise_var > 0.0)
        for (Eigen::Index j = 0; j < obs.Y.cols(); ++j)
            for (Eigen::Index i = 0; i < p; ++i)
                obs.Y(i, j) += complex_gaussian(rng, noise_var);
    return obs;
}

CMat depilot(const SrsObservation& obs)
{
    return obs.pilot.conjugate().asDiagonal() * obs.Y;
}

ScenarioRealization realize_scenario(const ScenarioConfig& cfg, int horizon, std::uint64_t seed,
                                     std::uint64_t trial)
{
    cfg.system.validate();
    if (horizon < 1)
        throw std::invalid_argument("scenario: horizon must be >= 1");
    const SystemConfig& sys = cfg.system;
    ScenarioRealization r;
    Rng path_rng = derive_rng(seed, {trial, static_cast<std::uint64_t>(Stream::paths)});
    r.paths = generate_paths(sys, cfg.paths, path_rng);
    const CVec pilot = zc_pilot(sys.tones_per_bwp(), sys.zc_root);
    Rng imp_rng = derive_rng(seed, {trial, static_cast<std::uint64_t>(Stream::imperfections)});
    for (int t = 1; t <= horizon; ++t) {
        evolve_imperfections(r.trace, t, imp_rng, cfg.drift, r.paths, sys.srs_period);
        r.channels.push_back(full_band_cfr(r.paths, r.trace, t, sys));
        Rng noise_rng = derive_rng(
            seed, {trial, static_cast<std::uint64_t>(Stream::noise), static_cast<std::uint64_t>(t)});
        const auto sel = hopping_selection(t, sys.hop_count, sys.tones_per_bwp(), sys.num_subcarriers,
                                           sys.comb, sys.hop_order);
        r.observations.push_back(srs_observe(r.channels.back(), sel, pilot, sys.noise_var, noise_rng,
                                             bwp_of_slot(t, sys.hop_count, sys.hop_order)));
    }
    return r;
}

void write_complex_csv(std::ostream& os, const CMat& m)
{
    os << "# rows=" << m.rows() << " cols=" << m.cols() << "\n";
    os.precision(17);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j > 0)
                os << ',';
            os << m(i, j).real() << ',' << m(i, j).imag();
        }
        os << '\n';
    }
}

} // namespace chanx
