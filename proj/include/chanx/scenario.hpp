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
#include <iosfwd>
#include <optional>
#include <vector>

#include "chanx/rng.hpp"
#include "chanx/types.hpp"

namespace chanx {

/**
 * @brief Static system constants for one uplink user.
 *
 * Antenna index order is n = n_x * ny + n_y (Kronecker a_x (x) a_y).
 */
struct SystemConfig {
    double carrier_freq = 3.5e9;
    double subcarrier_spacing = 60e3;
    int num_subcarriers = 256;
    int nx = 4;
    int ny = 4;
    int hop_count = 4;
    int comb = 2;
    double srs_period = 5e-3;
    int estimation_slots = 4;
    double noise_var = 0.0;
    std::uint64_t rng_seed = 1;
    int zc_root = 1;
    std::vector<int> hop_order; ///< permutation of 0..hop_count-1; empty means sequential

    int num_antennas() const { return nx * ny; }
    double bandwidth() const { return num_subcarriers * subcarrier_spacing; }
    int tones_per_bwp() const { return num_subcarriers / (hop_count * comb); }
    int subcarriers_per_bwp() const { return num_subcarriers / hop_count; }
    /// Throws std::invalid_argument on inconsistent fields.
    void validate() const;
};

struct Path {
    cd gain;
    double azimuth = 0.0;   ///< theta, radians
    double elevation = 0.0; ///< phi, radians
    double delay = 0.0;     ///< seconds
    double doppler = 0.0;   ///< Hz
};

struct PathSet {
    std::vector<Path> paths;

    int size() const { return static_cast<int>(paths.size()); }
    /// Orders paths by descending |gain|^2, ties by smaller delay.
    void sort_by_power();
};

/// Sampler for synthetic multipath.
struct PathSamplerConfig {
    int num_paths = 3;
    double max_delay = 600e-9;        ///< T_d
    double min_delay_spacing = 0.0;   ///< seconds
    double theta_min = deg2rad(45.0);
    double theta_max = deg2rad(135.0);
    double phi_min = deg2rad(20.0);
    double phi_max = deg2rad(160.0);
    double pdp_delay_spread = 300e-9; ///< mean power ~ exp(-tau / spread)
    double speed_kmh = 3.0;
    bool normalize_power = true;      ///< realized sum |alpha|^2 = N_r
    int max_retries = 1000;
    /// Fixed delays and powers (dB) bypass the random sampler for those fields.
    std::vector<double> fixed_delays;
    std::vector<double> fixed_powers_db;
};

/// Slot-to-slot evolution of the hardware imperfections and Doppler.
struct DriftConfig {
    bool frozen = false;          ///< strict mode: Doppler held constant
    double beta_d = 0.05;
    double gamma_d = 1.0;         ///< Hz^2
    bool phase_noise = true;      ///< epsilon uniform on [-pi, pi)
    bool timing_offset = true;
    double tau0_max = 1.0 / (4.0 * 60e3 * 256); ///< seconds
    bool doppler = true;
};

struct SlotImperfection {
    double epsilon = 0.0;
    double tau0 = 0.0;
    std::vector<double> doppler;       ///< f_D^(t) per path, Hz
    std::vector<double> doppler_phase; ///< phi^(t) per path, radians
};

/// Per-slot imperfection ground truth; slot t lives at index t-1.
struct ImperfectionTrace {
    std::vector<SlotImperfection> slots;

    int size() const { return static_cast<int>(slots.size()); }
    const SlotImperfection& at(int t) const { return slots.at(static_cast<std::size_t>(t - 1)); }
};

struct SrsObservation {
    CMat Y; ///< P x N_r
    int slot = 1;
    int hop_index = 0; ///< BWP index occupied by this slot
    CVec pilot;
    std::vector<int> selection; ///< subcarrier indices, strictly increasing
};

struct FullBandChannel {
    CMat H; ///< N x N_r
    int slot = 1;
};

struct ScenarioConfig {
    SystemConfig system;
    PathSamplerConfig paths;
    DriftConfig drift;
};

/// Everything generated for one trial over a slot horizon.
struct ScenarioRealization {
    PathSet paths;
    ImperfectionTrace trace;
    std::vector<FullBandChannel> channels;
    std::vector<SrsObservation> observations;
};

CVec steering_vector_upa(double theta, double phi, int nx, int ny);

/// d/d(theta) and d/d(phi) of steering_vector_upa.
void steering_vector_upa_derivatives(double theta, double phi, int nx, int ny,
                                     CVec& d_theta, CVec& d_phi);

/// Entry n is exp(-j 2 pi n fs tau).
CVec delay_steering(double tau, int n, double fs);

/// Entry i is exp(-j 2 pi rows[i] fs tau).
CVec delay_steering_rows(double tau, const std::vector<int>& rows, double fs);

double max_doppler(double speed_kmh, double carrier_freq);

PathSet generate_paths(const SystemConfig& sys, const PathSamplerConfig& spread, Rng& rng);

/// Appends slot t to the trace; requires trace.size() == t-1.
void evolve_imperfections(ImperfectionTrace& trace, int t, Rng& rng, const DriftConfig& drift,
                          const PathSet& paths, double srs_period);

FullBandChannel full_band_cfr(const PathSet& paths, const ImperfectionTrace& trace, int t,
                              const SystemConfig& sys);

/**
 * @brief Sum over paths of gains[k] * a(delays[k]) * steering.col(k)^T on the given rows.
 * @return rows.size() x N_r matrix.
 */
CMat synthesize_cfr(const std::vector<int>& rows, double fs, const CVec& gains, const RVec& delays,
                    const CMat& steering);

std::vector<int> all_subcarriers(int n);

std::vector<int> hopping_selection(int t, int hop_count, int tones, int n, int comb,
                                   const std::vector<int>& hop_order = {});

int bwp_of_slot(int t, int hop_count, const std::vector<int>& hop_order = {});

int largest_prime_at_most(int p);

CVec zc_pilot(int p, int root);

SrsObservation srs_observe(const FullBandChannel& full, const std::vector<int>& selection,
                           const CVec& pilot, double noise_var, Rng& rng, int hop_index);

/// Removes the pilot: diag(conj(x)) * Y.
CMat depilot(const SrsObservation& obs);

/// Generates paths, imperfections, channels and observations for slots 1..horizon.
ScenarioRealization realize_scenario(const ScenarioConfig& cfg, int horizon, std::uint64_t seed,
                                     std::uint64_t trial);

/// Writes "# rows=R cols=C" then one "re,im,re,im,..." line per row.
void write_complex_csv(std::ostream& os, const CMat& m);

} // namespace chanx
