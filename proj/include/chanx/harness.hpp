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
#include <string>
#include <vector>

#include "chanx/hrpe.hpp"
#include "chanx/scenario.hpp"
#include "chanx/tracker.hpp"

namespace chanx {

enum class Scheme {
    proposed,  ///< refined multi-slot stage 1, then the tracker with M-step
    baseline1, ///< per-slot TST-MUSIC and LS gains, no cross-slot sharing
    baseline2, ///< per-BWP delay-domain trackers with time-hold, no frequency extrapolation
    baseline3, ///< uncompensated spliced TST-MUSIC, then the tracker without M-step
};

const char* scheme_name(Scheme s);
/// @throws std::invalid_argument on an unknown name.
Scheme parse_scheme(const std::string& name);
std::vector<Scheme> all_schemes();

/// ||est - ref||_F^2 / ||ref||_F^2. @throws std::invalid_argument on shape mismatch or a zero reference.
double nmse(const CMat& est, const CMat& ref);

/// Mean of the first `horizon` entries. @throws std::invalid_argument when fewer are present.
double tnmse(const std::vector<double>& series, int horizon);

/// Shared by every scheme so that comparisons differ only in the algorithm.
struct PipelineConfig {
    HrpeConfig hrpe;
    TrackerConfig tracker;
    MarkovHyperparams hyper;
    int delay_grid_size = 12; ///< L of the tracking dictionaries
};

struct SchemeOutput {
    std::vector<FullBandChannel> estimates; ///< one per observation, same order
    std::vector<IterationLog> stage1_log;   ///< proposed only
    int flags = 0; ///< non-fatal events: empty per-slot detections, flagged stage 1, E-step oscillation
};

/// @throws NoPathsError when the multi-slot stage finds nothing (fatal for the trial).
SchemeOutput run_proposed(const std::vector<SrsObservation>& obs, const SystemConfig& sys,
                          const PipelineConfig& cfg, const IterationCallback& cb = {});
SchemeOutput run_baseline1(const std::vector<SrsObservation>& obs, const SystemConfig& sys,
                           const PipelineConfig& cfg);
SchemeOutput run_baseline2(const std::vector<SrsObservation>& obs, const SystemConfig& sys,
                           const PipelineConfig& cfg);
/// @throws NoPathsError when the spliced stage finds nothing.
SchemeOutput run_baseline3(const std::vector<SrsObservation>& obs, const SystemConfig& sys,
                           const PipelineConfig& cfg);
SchemeOutput run_scheme(Scheme s, const std::vector<SrsObservation>& obs, const SystemConfig& sys,
                        const PipelineConfig& cfg);

/**
 * @brief Stage 1 of the third baseline: the estimation slots are stacked without phase, timing
 * or Doppler compensation and handed to single-snapshot TST-MUSIC.
 *
 * The result carries zero per-slot imperfections, so every stage-1 slot shares one channel.
 */
MultiSlotParams uncompensated_stage1(const std::vector<SrsObservation>& obs, const SystemConfig& sys,
                                     const HrpeConfig& cfg, bool& flagged);

/// Subcarrier indices of BWP b (frequency order), N / h_p of them.
std::vector<int> bwp_subcarriers(int b, const SystemConfig& sys);

/// Per-BWP NMSE of one slot, h_p entries.
std::vector<double> bwp_nmse(const CMat& est, const CMat& ref, const SystemConfig& sys);

struct ExperimentSpec {
    ScenarioConfig scenario; ///< noise_var is overwritten per SNR point; h_p is scenario.system.hop_count
    PipelineConfig pipeline;
    std::vector<Scheme> schemes = all_schemes();
    std::vector<double> snr_db{15.0};
    int trials = 100;
    int horizon = 60;
    std::uint64_t seed = 1;
    std::string output;          ///< file prefix; empty writes nothing
    int threads = 0;             ///< 0: hardware concurrency
    double fatal_fraction = 0.5; ///< run_experiment's caller exits 3 above this share of fatal trials

    /// @throws std::invalid_argument.
    void validate() const;
};

struct TrialRecord {
    Scheme scheme = Scheme::proposed;
    double snr_db = 0.0;
    int trial = 0;
    std::vector<double> nmse;             ///< per slot 1..T
    std::vector<std::vector<double>> bwp; ///< per slot, h_p entries
    std::vector<double> stage1_objective; ///< per AO iteration, proposed only
    std::vector<double> stage1_nmse;      ///< mean NMSE over the estimation slots per AO iteration
    int flags = 0;
    bool fatal = false;
    std::string error;

    double tnmse() const;
};

struct SeriesSummary {
    Scheme scheme = Scheme::proposed;
    double snr_db = 0.0;
    std::vector<double> mean;             ///< per slot
    std::vector<std::vector<double>> bwp; ///< per slot, h_p entries
    double tnmse = 0.0;
    double tnmse_stderr = 0.0;            ///< across trials
    int trials_used = 0;
    int fatal = 0;
    int flagged = 0;
    std::vector<double> stage1_objective; ///< trial mean per AO iteration
    std::vector<double> stage1_nmse;
};

struct MetricSeries {
    std::vector<TrialRecord> records;     ///< ordered by scheme, SNR, trial
    std::vector<SeriesSummary> summaries; ///< ordered by scheme, SNR
    int hop_count = 4;
    int fatal_count = 0;
    int total_runs = 0;

    /// @throws std::out_of_range when the pair was not run.
    const SeriesSummary& summary(Scheme s, double snr_db) const;
    /// Records of one scheme and SNR in trial order.
    std::vector<const TrialRecord*> trials(Scheme s, double snr_db) const;
};

/// Trials run concurrently; trial i of every SNR point uses the same realization seed.
MetricSeries run_experiment(const ExperimentSpec& spec);

/// Summaries from records; fatal records are excluded from every mean.
void summarize(MetricSeries& m);

/// scheme,snr_db,slot,trial,nmse
void write_long_csv(std::ostream& os, const MetricSeries& m);
/// scheme,snr_db,slot,trial,bwp,nmse
void write_bwp_csv(std::ostream& os, const MetricSeries& m);
/// snr_db,trial,iteration,objective,nmse
void write_stage1_csv(std::ostream& os, const MetricSeries& m);
void write_summary_json(std::ostream& os, const MetricSeries& m, const ExperimentSpec& spec);
/// Writes <prefix>.csv, <prefix>_bwp.csv, <prefix>_stage1.csv and <prefix>.json.
void write_outputs(const std::string& prefix, const MetricSeries& m, const ExperimentSpec& spec);

/// Parses a long-form CSV back into records (nmse only).
std::vector<TrialRecord> read_long_csv(std::istream& is);

/// JSON text to spec; missing keys keep the values already in `spec`. @throws std::invalid_argument.
void apply_config_json(const std::string& text, ExperimentSpec& spec);
std::string spec_to_json(const ExperimentSpec& spec);

} // namespace chanx
