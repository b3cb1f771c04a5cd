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

#include <functional>
#include <iosfwd>
#include <vector>

#include "chanx/linalg.hpp"
#include "chanx/scenario.hpp"
#include "chanx/subspace.hpp"

namespace chanx {

/// One slot of pilot-free observations: y = diag(conj(x)) Y on the listed subcarriers.
struct SlotData {
    CMat y;
    std::vector<int> rows;
};

std::vector<SlotData> prepare_slots(const std::vector<SrsObservation>& obs);

/**
 * @brief Multi-slot path model shared by initialization, refinement and reconstruction.
 *
 * Slot s (0-based) predicts
 *   sum_k gain_k exp(j (s * doppler_k + epsilon_s)) kron(a_R(theta_k, phi_k), g_s(delay_k + tau0_s)).
 * epsilon_0 = tau0_0 = 0 anchor the gauge.
 */
struct MultiSlotParams {
    RVec delay;   ///< K, seconds, slot-1 referenced
    RVec theta;   ///< K, radians
    RVec phi;     ///< K, radians
    CVec gain;    ///< K
    RVec doppler; ///< K, Doppler phase increment per slot, radians
    RVec epsilon; ///< T_e, radians
    RVec tau0;    ///< T_e, seconds

    int num_paths() const { return static_cast<int>(delay.size()); }
    int num_slots() const { return static_cast<int>(epsilon.size()); }
};

struct ModelContext {
    double subcarrier_spacing = 60e3;
    int nx = 4;
    int ny = 4;
};

/// Predicted pilot-free observation of slot s (0-based) on the given rows.
CMat predict_slot(const MultiSlotParams& p, int s, const std::vector<int>& rows, const ModelContext& ctx);

/// sum_s |y_s - predict_slot(s)|_F^2.
double stage1_objective(const std::vector<SlotData>& slots, const MultiSlotParams& p, const ModelContext& ctx);

/// Full-band CFR implied by the model at slot s (0-based), N x N_r.
CMat reconstruct_stage1(const MultiSlotParams& p, int s, int num_subcarriers, const ModelContext& ctx);

/// Least-squares gains; rank deficiency triggers the ridge fallback.
LsResult ls_gains(const CVec& y, const CMat& v);

struct InitImperfections {
    RVec epsilon;        ///< T
    RMat doppler_phase;  ///< K x T
    RVec tau0;           ///< T
};

/**
 * @brief Imperfections from per-slot LS gains and delays, referenced to slot 1 and path 1.
 * @param gains T vectors of K gains.
 * @param delays T vectors of K delays.
 * @throws std::invalid_argument when a reference gain is zero.
 */
InitImperfections init_imperfections(const std::vector<CVec>& gains, const std::vector<RVec>& delays);

/// Least-squares slope through the origin of the unwrapped phase sequence phase(s), s = 0..T-1.
double doppler_slope(const RVec& phase);

struct CompensatedFrame {
    CMat y;                 ///< (T_e P) x N_r, block s at rows s*P..(s+1)P-1
    std::vector<std::vector<int>> rows; ///< subcarrier indices per block
    RVec doppler;           ///< K per-slot Doppler increments used by steering()
    double subcarrier_spacing = 60e3;

    int num_blocks() const { return static_cast<int>(rows.size()); }
    /// Stacked steering of path k: block s is exp(j s doppler_k) g_s(tau).
    CVec steering(int k, double tau) const;
};

/// Block s = exp(-j epsilon_s) diag(conj(g_s(tau0_s))) y_s, stacked vertically.
CompensatedFrame compensate_and_splice(const std::vector<SlotData>& slots, const RVec& epsilon, const RVec& tau0,
                                       const RVec& doppler, double subcarrier_spacing);

struct SicConfig {
    Grid1D delay_grid;       ///< coarse grid, T_d / 512 step
    int window_steps = 5;    ///< half-width of the search window around the initial delay
    bool full_search = false; ///< ignore initial delays and sweep the whole grid
    bool record_spectra = false;
};

struct SicResult {
    RVec delay;                 ///< in the input (power) order
    bool flagged = false;       ///< a peak stayed on the window boundary after widening
    std::vector<Grid1D> grids;  ///< per-path sweep grid (when recorded)
    std::vector<RVec> spectra;  ///< per-path pseudospectrum (when recorded)
};

/**
 * @brief Successive delay estimation on the spliced frame.
 *
 * Paths are processed in the given order (descending power). Each found path is projected out
 * before the next sweep, and later steering vectors pass through the same projections.
 */
SicResult sic_delay_estimation(const CompensatedFrame& frame, const RVec& init_delay, const SicConfig& cfg);

/// Per-path pseudospectrum without cancellation, signal dimension = number of paths.
RVec per_path_spectrum(const CompensatedFrame& frame, int k, int num_paths, const Grid1D& grid);

struct MlResult {
    CVec gain;
    RVec epsilon;
    bool ridge = false;
};

/// Closed-form gains (stacked LS) followed by closed-form epsilon_s for s >= 1.
MlResult ml_gains_epsilon(const std::vector<SlotData>& slots, const MultiSlotParams& p, const ModelContext& ctx);

struct Stage1Gradient {
    RVec doppler; ///< dF / d doppler_k
    RVec tau0;    ///< dF / d tau0_s, per second; entry 0 is zero (anchored)
};

Stage1Gradient stage1_gradient(const std::vector<SlotData>& slots, const MultiSlotParams& p, const ModelContext& ctx);

struct ArmijoConfig {
    double sigma = 0.3;
    double beta = 0.5;
    int max_halvings = 30;
};

struct GradStepResult {
    MultiSlotParams params;
    bool stalled_doppler = false;
    bool stalled_tau0 = false;
};

/// One preconditioned gradient step on doppler then on tau0, each with Armijo backtracking.
GradStepResult grad_phi_tau0(const std::vector<SlotData>& slots, const MultiSlotParams& p, const ModelContext& ctx,
                             const ArmijoConfig& armijo = {});

/// Real parameter layout used by the joint refinement.
///   [delay_k, theta_k, phi_k, doppler_k, re gain_k, im gain_k] for k < K,
///   then [epsilon_s, tau0_s] for 1 <= s < T.
int joint_parameter_count(int num_paths, int num_slots);
RVec pack_params(const MultiSlotParams& p);
MultiSlotParams unpack_params(const RVec& x, int num_paths, int num_slots);

/// d vec(predict_slot(s)) / dx for every real parameter x in the packed layout.
CMat model_jacobian(const MultiSlotParams& p, int s, const std::vector<int>& rows, const ModelContext& ctx);

struct LmConfig {
    int max_iterations = 30;
    double initial_damping = 1e-3;
    double tolerance = 1e-12; ///< stop when the relative objective decrease falls below this
};

struct LmResult {
    MultiSlotParams params;
    double objective = 0.0;
    int iterations = 0;
};

/// Levenberg-Marquardt on all model parameters jointly; never increases the objective.
LmResult joint_refine(const std::vector<SlotData>& slots, const MultiSlotParams& p, const ModelContext& ctx,
                      const LmConfig& cfg = {});

struct HrpeConfig {
    double max_delay = 600e-9; ///< T_d; delay grid spans [-T_d/4, T_d] with step T_d/512
    int ao_iterations = 10;
    int window_steps = 5;
    double angle_window_deg = 5.0;
    bool forward_backward = true;
    ArmijoConfig armijo;
    LmConfig joint;
    bool joint_polish = true; ///< run the joint refinement at the end of every AO iteration

    Grid1D delay_grid() const { return Grid1D::span(-max_delay / 4, max_delay, max_delay / 512); }
};

struct IterationLog {
    int iteration = 0;
    double objective = 0.0;
    MultiSlotParams params;
};

struct RefinedEstimate {
    MultiSlotParams params;
    std::vector<IterationLog> log; ///< entry 0 is the initialization
    int model_order = 0;
    bool flagged = false;
};

using IterationCallback = std::function<void(const IterationLog&)>;

/// Initialization (per-slot TST-MUSIC, LS gains, imperfection ratios) only.
MultiSlotParams hrpe_initialize(const std::vector<SlotData>& slots, const SystemConfig& sys, const HrpeConfig& cfg,
                                bool& flagged);

/// Alternating refinement from a given starting point.
RefinedEstimate hrpe_refine(const std::vector<SlotData>& slots, const MultiSlotParams& init, const SystemConfig& sys,
                            const HrpeConfig& cfg, const IterationCallback& cb = {});

/// Full stage-1 estimator. Throws NoPathsError when no slot yields a path.
RefinedEstimate r_tst_music(const std::vector<SrsObservation>& obs, const SystemConfig& sys, const HrpeConfig& cfg,
                            const IterationCallback& cb = {});

/// Writes "iteration,objective,delay_k...,theta_k...,phi_k...,doppler_k..." rows.
void write_iteration_log_csv(std::ostream& os, const std::vector<IterationLog>& log);

} // namespace chanx
