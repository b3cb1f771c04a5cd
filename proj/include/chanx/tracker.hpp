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

#include <vector>

#include "chanx/hrpe.hpp"
#include "chanx/scenario.hpp"

namespace chanx {

/**
 * @brief Delay and angle dictionaries with per-point offsets.
 *
 * Angles live in direction-cosine coordinates u = sin(theta) cos(phi) and v = cos(theta), so the
 * array dictionary factors as a_x(u) (x) a_y(v). The base u grid is -1 + 2 i / N_x (same for v),
 * which makes the on-grid dictionary a scaled 2-D DFT.
 *
 * DAD index m = a * L + l with angle index a = i_x * N_y + i_y and delay index l.
 */
struct Grids {
    RVec delay;  ///< L base delays, seconds
    RVec u;      ///< N_x base points
    RVec v;      ///< N_y base points
    RVec dtau;   ///< L offsets, |dtau| <= delay_step / 2
    RVec du;     ///< N_x offsets, |du| <= angle_step / 2
    RVec dv;     ///< N_y offsets
    double delay_step = 0.0;
    double u_step = 0.0;
    double v_step = 0.0;

    int num_delays() const { return static_cast<int>(delay.size()); }
    int num_angles() const { return static_cast<int>(u.size() * v.size()); }
    int size() const { return num_delays() * num_angles(); }
    int index(int angle, int l) const { return angle * num_delays() + l; }

    /// L points from -T_d/4 to T_d inclusive, N_x x N_y direction-cosine grid, zero offsets.
    static Grids make(double max_delay, int num_delays, int nx, int ny);
    /// Clamps every offset to half its grid step.
    void clamp_offsets();
    /// Array dictionary with offsets applied, N_r x (N_x N_y).
    CMat angle_dictionary() const;
};

/// Direction cosines of (theta, phi).
inline double direction_u(double theta, double phi) { return std::sin(theta) * std::cos(phi); }
inline double direction_v(double theta) { return std::cos(theta); }

struct MarkovHyperparams {
    double rho01 = 0.05;
    double rho10 = 0.05;
    double beta_amp = 0.1;
    cd mu_amp{0.0, 0.0};
    double gamma_amp = 0.0;     ///< <= 0: set at init so that beta_amp^2 gamma_amp is the mean path power
    double beta_doppler = 0.1;
    double mu_doppler = 0.0;    ///< Hz, anchor for indices without a stage-1 path
    double gamma_doppler = 1.0; ///< Hz^2
    double gamma_delay = 0.0;   ///< s^2; <= 0: (delay step / 10)^2
    double gamma_angle = 0.0;   ///< <= 0: (angle step / 10)^2

    /// Stationary support probability rho01 / (rho01 + rho10).
    double steady_state_support() const;
};

/// Per-slot imperfections. Index m's Doppler phase is base_phase_m + 2 pi T doppler_m.
struct Imperfections {
    double epsilon = 0.0;
    double tau0 = 0.0;   ///< seconds, relative to the stage-1 reference slot
    RVec doppler;        ///< per DAD index, Hz
    RVec base_phase;     ///< accumulated phase at the last processed slot, radians
    int gap = 1;         ///< slots elapsed since that slot

    /// base_phase + 2 pi T gap doppler.
    RVec phase(double srs_period) const;
};

/**
 * @brief Phi = (A_R (x) B) D with B = diag(x) W Lambda S F_d(dtau) and D = diag(exp(j phase)).
 *
 * vec order: y index n * P + i for antenna n and tone i.
 */
struct SensingOperator {
    CMat b;          ///< P x L
    CMat a;          ///< N_r x (N_x N_y)
    CVec d;          ///< N_r L unit-modulus Doppler phasors
    std::vector<int> rows;
    CVec pilot;
    double subcarrier_spacing = 60e3;
    double epsilon = 0.0;
    double tau0 = 0.0;

    int num_delays() const { return static_cast<int>(b.cols()); }
    int rows_count() const { return static_cast<int>(b.rows() * a.rows()); }
    int cols_count() const { return static_cast<int>(b.cols() * a.cols()); }

    CVec apply(const CVec& h) const;
    CVec adjoint(const CVec& y) const;
    CVec column(int m) const;
    CMat dense() const;
    CMat gram() const; ///< Phi^H Phi
};

SensingOperator build_sensing(const Grids& grids, const Imperfections& xi, const std::vector<int>& rows,
                              const CVec& pilot, const SystemConfig& sys);

/// y = vec(Y).
CVec stack_observation(const CMat& y);

struct TurboLimits {
    double variance_floor = 1e-12;
    double variance_cap = 1e12;
};

enum class Direction { a_to_b, b_to_a };

struct ExtrinsicMessage {
    CVec mean;
    RVec var;
    Direction direction = Direction::b_to_a;
};

enum class ModuleAMode {
    exact,      ///< dense LMMSE with the per-index prior variances
    structured, ///< prior variances averaged to a scalar; Kronecker eigendecomposition of Phi^H Phi
};

struct ModuleAResult {
    CVec post_mean;
    RVec post_var;
    ExtrinsicMessage to_b;
    int clamped = 0;
};

/// Module A with the Gram factorization cached across calls.
class LmmseSolver {
public:
    LmmseSolver(const SensingOperator& phi, ModuleAMode mode);
    ModuleAResult solve(const CVec& y, const ExtrinsicMessage& prior, double noise_var,
                        const TurboLimits& limits = {}) const;
    ModuleAMode mode() const { return mode_; }

private:
    const SensingOperator* phi_;
    ModuleAMode mode_;
    CMat gram_;
    CMat ua_, ub_;
    RVec sa_, sb_;
};

ModuleAResult lmmse_module_a(const CVec& y, const SensingOperator& phi, const ExtrinsicMessage& prior,
                             double noise_var, ModuleAMode mode = ModuleAMode::exact,
                             const TurboLimits& limits = {});

/// Per-index priors for the current slot.
struct Beliefs {
    RVec support;   ///< Bernoulli P(s_m = 1)
    CVec amp_mean;  ///< Gaussian belief of the hidden amplitude
    RVec amp_var;

    int size() const { return static_cast<int>(support.size()); }
};

struct SlotPosterior {
    CVec mean;       ///< E[h_m | pseudo-observation]
    RVec var;
    Beliefs beliefs; ///< messages toward the next slot: support and moment-matched amplitude
};

/// Sum-product pass over the per-index tree s_m -> f_m <- theta_m, f_m - h_m - g_m.
SlotPosterior spmp_within_slot(const Beliefs& prior, const ExtrinsicMessage& from_a,
                               const TurboLimits& limits = {});

struct ModuleBResult {
    SlotPosterior posterior;
    ExtrinsicMessage to_a;
    int clamped = 0;
};

ModuleBResult bg_combiner_module_b(const ExtrinsicMessage& from_a, const Beliefs& prior,
                                   const TurboLimits& limits = {});

struct TurboConfig {
    int max_iterations = 50;
    double tolerance = 1e-6;
    double damping = 0.7; ///< weight of the new B -> A message
    ModuleAMode module_a = ModuleAMode::exact;
    TurboLimits limits;
};

struct EStepResult {
    SlotPosterior posterior;   ///< Module B posterior of the returned iterate
    CVec a_post_mean;          ///< Module A posterior mean of the same iterate
    int iterations = 0;
    bool converged = false;
    bool oscillation = false;  ///< max iterations without convergence; best-residual iterate returned
    int clamped = 0;
    double residual = 0.0;     ///< |y - Phi mean|^2
};

EStepResult turbo_estep(const CVec& y, const SensingOperator& phi, const Beliefs& prior, double noise_var,
                        const TurboConfig& cfg = {});

/// One Markov step: support, amplitude mean and amplitude variance.
Beliefs cross_slot_propagate(const Beliefs& beliefs, const MarkovHyperparams& hp);

/// Gaussian-Markov prior of the M-step blocks at slot t given slot t-1.
struct XiPrior {
    RVec doppler_mean; ///< (1 - beta_D) f^(t-1) + beta_D mu_D per index
    double doppler_var = 1.0;
    RVec dtau, du, dv; ///< offsets at t-1
    double gamma_delay = 1.0;
    double gamma_angle = 1.0;
};

struct MStepProblem {
    CVec y;
    std::vector<int> rows;
    CVec pilot;
    SystemConfig sys;
    CVec post_mean;
    RVec post_var;
    double noise_var = 1.0;
    XiPrior prior;
};

struct SurrogateGradient {
    double value = 0.0;
    double tau0 = 0.0;
    RVec doppler;
    RVec dtau, du, dv;
};

/// u = -E|y - Phi h|^2 / sigma^2 + ln p(Xi | Xi^(t-1)); the expectation uses the diagonal covariance.
SurrogateGradient surrogate_value_and_gradient(const MStepProblem& pb, const Grids& grids,
                                               const Imperfections& xi);

struct MStepSteps {
    double tau0 = 0.0;    ///< grid interval of tau0, seconds
    double doppler = 1.0; ///< Hz
    double delay = 0.0;   ///< grid interval of dtau
    double u = 0.0;
    double v = 0.0;
    double divisor = 50.0;
    int backtracks = 8; ///< halvings of a block step that would decrease u; 0: plain sign step
};

/// Closed-form epsilon: arg((Phi_0 mu)^H y) with Phi_0 the operator at epsilon = 0.
double epsilon_closed_form(const MStepProblem& pb, const Grids& grids, const Imperfections& xi);

/// Blocks in order epsilon, tau0, f_D, dtau, du, dv; each gradient is taken after the previous update.
/// A block step never exceeds interval / divisor per component and is rejected if u would decrease.
void mstep_update(const MStepProblem& pb, Grids& grids, Imperfections& xi, const MStepSteps& steps);

struct TrackerConfig {
    int em_iterations = 5;    ///< 0: E-step only, imperfections and offsets held
    TurboConfig turbo;
    double doppler_step = 1.0;     ///< Hz, grid interval of the Doppler block
    bool predict_imperfections = true; ///< per-slot epsilon/tau0 search against the predicted channel before the first E-step
    double tau0_search = 0.0;      ///< half-width of the per-slot tau0 search around the last estimate; <= 0: 1 / (4 f_s N)
    bool learn_noise = false;
    double noise_floor = 1e-10;    ///< lower bound on sigma_e^2
};

struct TrackerState {
    Grids grids;
    MarkovHyperparams hyper; ///< resolved: no automatic (<= 0) fields left
    Beliefs prior;      ///< priors for the next slot
    Imperfections xi;   ///< estimates of the last processed slot
    RVec doppler_anchor; ///< mu_D per index
    CVec post_mean;
    RVec post_var;
    double noise_var = 0.0;
    int slot = 0;       ///< last processed slot (global, 1-based)
    bool collision = false;
};

/**
 * @brief Maps stage-1 paths onto the grids and sets the first tracking-slot priors.
 * @param last_slot global index of the last stage-1 slot; its Doppler phase seeds base_phase.
 */
TrackerState init_from_hrpe(const MultiSlotParams& refined, const Grids& grids, const MarkovHyperparams& hp,
                            const SystemConfig& sys, int last_slot);

struct TrackResult {
    FullBandChannel estimate;
    EStepResult estep;
    bool oscillation = false;
};

/// One slot: E/M loop, cross-slot propagation and full-band reconstruction.
TrackResult track_slot(TrackerState& state, const SrsObservation& obs, const SystemConfig& sys,
                       const TrackerConfig& cfg);

/// Full-band CFR from a DAD vector, N x N_r.
CMat reconstruct_dad(const CVec& h, const Grids& grids, const Imperfections& xi, const SystemConfig& sys);

} // namespace chanx
