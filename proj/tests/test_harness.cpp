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

#include <cmath>
#include <sstream>

#include "doctest.h"
#include "json.hpp"

#include "chanx/harness.hpp"

using namespace chanx;

namespace {

ScenarioConfig clean_scenario(double noise_var)
{
    ScenarioConfig sc;
    sc.system.noise_var = noise_var;
    sc.drift.phase_noise = false;
    sc.drift.timing_offset = false;
    sc.drift.doppler = false;
    sc.paths.speed_kmh = 0.0;
    return sc;
}

// True parameters in the stage-1 convention; exact when the Doppler phase is linear in the slot.
MultiSlotParams truth_params(const ScenarioRealization& real, int slots)
{
    const int k = real.paths.size();
    MultiSlotParams p;
    p.delay.resize(k);
    p.theta.resize(k);
    p.phi.resize(k);
    p.gain.resize(k);
    p.doppler.resize(k);
    const SlotImperfection& first = real.trace.at(1);
    for (int i = 0; i < k; ++i) {
        const Path& q = real.paths.paths[static_cast<std::size_t>(i)];
        const auto u = static_cast<std::size_t>(i);
        p.delay(i) = q.delay + first.tau0;
        p.theta(i) = q.azimuth;
        p.phi(i) = q.elevation;
        p.gain(i) = q.gain * std::exp(kJ * (first.epsilon + first.doppler_phase[u]));
        p.doppler(i) = real.trace.at(2).doppler_phase[u] - first.doppler_phase[u];
    }
    p.epsilon.resize(slots);
    p.tau0.resize(slots);
    for (int s = 0; s < slots; ++s) {
        p.epsilon(s) = real.trace.at(s + 1).epsilon - first.epsilon;
        p.tau0(s) = real.trace.at(s + 1).tau0 - first.tau0;
    }
    return p;
}

ExperimentSpec small_spec()
{
    ExperimentSpec sp;
    sp.trials = 2;
    sp.horizon = 6;
    sp.snr_db = {10.0};
    sp.seed = 5;
    sp.threads = 1;
    return sp;
}

} // namespace

TEST_CASE("nmse: identity, zero estimate, doubled estimate, errors")
{
    Rng rng = derive_rng(1, {1});
    CMat h(8, 4);
    for (Eigen::Index i = 0; i < h.size(); ++i)
        h(i) = complex_gaussian(rng, 1.0);
    CHECK(nmse(h, h) == 0.0);
    CHECK(nmse(CMat::Zero(8, 4), h) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(nmse(2.0 * h, h) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(nmse(h, CMat::Zero(8, 4)), std::invalid_argument);
    CHECK_THROWS_AS(nmse(h, CMat::Zero(8, 3)), std::invalid_argument);
}

TEST_CASE("tnmse: constant series, two slots, default horizon, short series")
{
    CHECK(tnmse(std::vector<double>(7, 0.25), 7) == doctest::Approx(0.25));
    CHECK(tnmse({0.0, 1.0}, 2) == doctest::Approx(0.5));
    CHECK(tnmse({0.0, 1.0, 5.0}, 2) == doctest::Approx(0.5));
    CHECK_THROWS_AS(tnmse({0.0, 1.0}, 3), std::invalid_argument);
    CHECK(ExperimentSpec{}.horizon == 60);
}

TEST_CASE("per-BWP NMSE partitions the band")
{
    const SystemConfig sys;
    std::vector<int> all;
    for (int b = 0; b < sys.hop_count; ++b) {
        const std::vector<int> r = bwp_subcarriers(b, sys);
        CHECK(static_cast<int>(r.size()) == sys.subcarriers_per_bwp());
        all.insert(all.end(), r.begin(), r.end());
    }
    CHECK(all == all_subcarriers(sys.num_subcarriers));

    Rng rng = derive_rng(2, {1});
    CMat h(sys.num_subcarriers, sys.num_antennas());
    for (Eigen::Index i = 0; i < h.size(); ++i)
        h(i) = complex_gaussian(rng, 1.0);
    CMat e = h;
    e.middleRows(sys.subcarriers_per_bwp(), sys.subcarriers_per_bwp()).setZero();
    const std::vector<double> v = bwp_nmse(e, h, sys);
    REQUIRE(v.size() == 4);
    CHECK(v[0] == 0.0);
    CHECK(v[1] == doctest::Approx(1.0));
    CHECK(v[2] == 0.0);
}

TEST_CASE("ground-truth parameters through the reconstruction path reproduce the channel")
{
    ScenarioConfig sc;
    sc.system.noise_var = 0.0;
    sc.drift.doppler = false; // linear Doppler phase, so the multi-slot model is exact
    const ScenarioRealization real = realize_scenario(sc, 8, 21, 0);
    const MultiSlotParams p = truth_params(real, 8);
    const ModelContext ctx{sc.system.subcarrier_spacing, sc.system.nx, sc.system.ny};
    for (int s = 0; s < 8; ++s)
        CHECK(nmse(reconstruct_stage1(p, s, sc.system.num_subcarriers, ctx),
                   real.channels[static_cast<std::size_t>(s)].H) <= 1e-20);
}

TEST_CASE("Baseline 1 is single-slot stage 1 without refinement")
{
    ScenarioConfig sc;
    sc.system.noise_var = 0.05;
    const ScenarioRealization real = realize_scenario(sc, 3, 4, 1);
    const PipelineConfig cfg;
    const SchemeOutput out = run_baseline1(real.observations, sc.system, cfg);
    REQUIRE(out.estimates.size() == 3);
    HrpeConfig h = cfg.hrpe;
    h.ao_iterations = 0;
    const ModelContext ctx{sc.system.subcarrier_spacing, sc.system.nx, sc.system.ny};
    for (std::size_t t = 0; t < 3; ++t) {
        const RefinedEstimate r = r_tst_music({real.observations[t]}, sc.system, h);
        CHECK((out.estimates[t].H - reconstruct_stage1(r.params, 0, sc.system.num_subcarriers, ctx)).norm() == 0.0);
        CHECK(out.estimates[t].slot == static_cast<int>(t) + 1);
    }
}

TEST_CASE("Baseline 1: a noiseless on-grid single path is extrapolated from every slot")
{
    ScenarioConfig sc = clean_scenario(0.0);
    sc.paths.num_paths = 1;
    sc.paths.fixed_delays = {150e-9};
    const ScenarioRealization base = realize_scenario(sc, 1, 8, 0);
    ScenarioRealization real = base;
    // Integer-degree angles sit on the stage-1 angle grid.
    Path& p = real.paths.paths[0];
    p.azimuth = deg2rad(std::round(rad2deg(p.azimuth)));
    p.elevation = deg2rad(std::round(rad2deg(p.elevation)));
    std::vector<SrsObservation> obs;
    std::vector<CMat> truth;
    Rng rng = derive_rng(8, {99});
    ImperfectionTrace tr;
    for (int t = 1; t <= 4; ++t) {
        tr.slots.push_back({0.0, 0.0, {0.0}, {0.0}});
        const FullBandChannel full = full_band_cfr(real.paths, tr, t, sc.system);
        truth.push_back(full.H);
        const auto sel = hopping_selection(t, sc.system.hop_count, sc.system.tones_per_bwp(),
                                           sc.system.num_subcarriers, sc.system.comb);
        obs.push_back(srs_observe(full, sel, zc_pilot(sc.system.tones_per_bwp(), sc.system.zc_root), 0.0, rng,
                                  bwp_of_slot(t, sc.system.hop_count)));
    }
    const SchemeOutput out = run_baseline1(obs, sc.system, PipelineConfig{});
    for (std::size_t t = 0; t < 4; ++t)
        CHECK(nmse(out.estimates[t].H, truth[t]) <= 1e-6);
}

TEST_CASE("Baseline 2: time-hold and zero channel before the first observation")
{
    ScenarioConfig sc;
    sc.system.noise_var = 0.03;
    const ScenarioRealization real = realize_scenario(sc, 9, 12, 0);
    const SchemeOutput out = run_baseline2(real.observations, sc.system, PipelineConfig{});
    const SystemConfig& sys = sc.system;
    const int w = sys.subcarriers_per_bwp();
    for (int t = 1; t <= 9; ++t) {
        const CMat& h = out.estimates[static_cast<std::size_t>(t - 1)].H;
        for (int b = 0; b < sys.hop_count; ++b) {
            int latest = 0;
            for (int s = 1; s <= t; ++s)
                if (bwp_of_slot(s, sys.hop_count) == b)
                    latest = s;
            const auto block = h.middleRows(b * w, w);
            if (latest == 0) {
                CHECK(block.norm() == 0.0);
            } else {
                const CMat& src = out.estimates[static_cast<std::size_t>(latest - 1)].H;
                CHECK((block - src.middleRows(b * w, w)).norm() == 0.0);
                CHECK(block.norm() > 0.0);
            }
        }
    }
}

TEST_CASE("Baseline 2: a static noiseless on-grid channel is flat after one hop cycle")
{
    ScenarioConfig sc = clean_scenario(0.0);
    const Grids g = Grids::make(600e-9, 12, 4, 4);
    sc.paths.fixed_delays = {g.delay(2), g.delay(5), g.delay(8)};
    const ScenarioRealization real = realize_scenario(sc, 10, 3, 0);
    const SchemeOutput out = run_baseline2(real.observations, sc.system, PipelineConfig{});
    CHECK(nmse(out.estimates[0].H, real.channels[0].H) > 0.5); // three BWPs still zero
    for (std::size_t t = 3; t < 10; ++t)
        CHECK(nmse(out.estimates[t].H, real.channels[t].H) <= 1e-10);
}

TEST_CASE("Baseline 3: spliced stage 1 shares one channel; tracking equals the tracker without EM")
{
    ScenarioConfig sc;
    sc.system.noise_var = 0.03;
    const ScenarioRealization real = realize_scenario(sc, 7, 14, 2);
    const PipelineConfig cfg;
    const SchemeOutput out = run_baseline3(real.observations, sc.system, cfg);
    REQUIRE(out.estimates.size() == 7);
    for (std::size_t s = 1; s < 4; ++s)
        CHECK((out.estimates[s].H - out.estimates[0].H).norm() <= 1e-12 * out.estimates[0].H.norm());

    const std::vector<SrsObservation> head(real.observations.begin(), real.observations.begin() + 4);
    bool flagged = false;
    const MultiSlotParams p = uncompensated_stage1(head, sc.system, cfg.hrpe, flagged);
    CHECK(p.epsilon.isZero());
    CHECK(p.tau0.isZero());
    CHECK(p.doppler.isZero());
    TrackerState st = init_from_hrpe(p, Grids::make(cfg.hrpe.max_delay, cfg.delay_grid_size, 4, 4), cfg.hyper,
                                     sc.system, 4);
    st.noise_var = sc.system.noise_var;
    TrackerConfig tc = cfg.tracker;
    tc.em_iterations = 0;
    for (std::size_t t = 4; t < 7; ++t) {
        const TrackResult tr = track_slot(st, real.observations[t], sc.system, tc);
        CHECK((tr.estimate.H - out.estimates[t].H).norm() == 0.0);
    }
}

TEST_CASE("Baseline 3 matches the proposed scheme without imperfections (paired, Monte Carlo)")
{
    ExperimentSpec sp;
    sp.scenario.drift.phase_noise = false;
    sp.scenario.drift.timing_offset = false;
    sp.scenario.drift.doppler = false;
    sp.trials = 6;
    sp.horizon = 12;
    sp.snr_db = {15.0};
    sp.seed = 11;
    sp.threads = 1;
    sp.schemes = {Scheme::proposed, Scheme::baseline3};
    const MetricSeries m = run_experiment(sp);
    const auto a = m.trials(Scheme::proposed, 15.0);
    const auto b = m.trials(Scheme::baseline3, 15.0);
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE_FALSE(a[i]->fatal);
        REQUIRE_FALSE(b[i]->fatal);
        const double d = b[i]->tnmse() - a[i]->tnmse();
        sum += d;
        sq += d * d;
    }
    const double n = static_cast<double>(a.size());
    const double mean = sum / n;
    const double se = std::sqrt((sq / n - mean * mean) / (n - 1.0));
    CHECK(std::abs(mean) <= 3.0 * se);
}

TEST_CASE("run_experiment: one row per slot per scheme, summaries, byte-identical reruns")
{
    ExperimentSpec sp = small_spec();
    sp.trials = 1;
    const MetricSeries m = run_experiment(sp);
    CHECK(m.records.size() == 4);
    CHECK(m.summaries.size() == 4);
    CHECK(m.fatal_count == 0);
    std::ostringstream a;
    write_long_csv(a, m);
    int rows = -1;
    for (char c : a.str())
        rows += c == '\n';
    CHECK(rows == 4 * 6);
    for (const SeriesSummary& s : m.summaries) {
        CHECK(s.mean.size() == 6);
        for (double v : s.mean)
            CHECK(v >= 0.0);
    }

    std::ostringstream b;
    write_long_csv(b, run_experiment(sp));
    CHECK(a.str() == b.str());

    ExperimentSpec other = sp;
    other.seed = 6;
    std::ostringstream c;
    write_long_csv(c, run_experiment(other));
    CHECK(a.str() != c.str());
}

TEST_CASE("run_experiment: worker count does not change the output")
{
    ExperimentSpec sp = small_spec();
    sp.schemes = {Scheme::baseline1, Scheme::baseline2};
    sp.snr_db = {5.0, 20.0};
    std::ostringstream one, three;
    write_bwp_csv(one, run_experiment(sp));
    sp.threads = 3;
    write_bwp_csv(three, run_experiment(sp));
    CHECK(one.str() == three.str());
}

TEST_CASE("summaries exclude fatal trials and count them")
{
    MetricSeries m;
    for (int t = 0; t < 3; ++t) {
        TrialRecord r;
        r.scheme = Scheme::baseline1;
        r.snr_db = 0.0;
        r.trial = t;
        if (t == 1) {
            r.fatal = true;
        } else {
            r.nmse = {0.1 * (t + 1), 0.3 * (t + 1)};
            r.bwp = {{0.0, 1.0}, {1.0, 0.0}};
        }
        m.records.push_back(r);
    }
    summarize(m);
    const SeriesSummary& s = m.summary(Scheme::baseline1, 0.0);
    CHECK(m.fatal_count == 1);
    CHECK(s.fatal == 1);
    CHECK(s.trials_used == 2);
    CHECK(s.mean[0] == doctest::Approx(0.2));
    CHECK(s.mean[1] == doctest::Approx(0.6));
    CHECK(s.tnmse == doctest::Approx(0.4));
    CHECK(s.tnmse_stderr == doctest::Approx(0.2)); // sample std 0.2 sqrt(2) over sqrt(2)
    CHECK_THROWS_AS(m.summary(Scheme::proposed, 0.0), std::out_of_range);
}

TEST_CASE("long CSV round trip and summary JSON layout")
{
    ExperimentSpec sp = small_spec();
    sp.schemes = {Scheme::proposed, Scheme::baseline2};
    const MetricSeries m = run_experiment(sp);
    std::ostringstream os;
    write_long_csv(os, m);
    std::istringstream is(os.str());
    const std::vector<TrialRecord> back = read_long_csv(is);
    REQUIRE(back.size() == m.records.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].scheme == m.records[i].scheme);
        CHECK(back[i].nmse == m.records[i].nmse);
    }

    // Records read back carry no per-BWP data; summaries must still form.
    MetricSeries r;
    r.records = back;
    summarize(r);
    CHECK(r.summary(Scheme::proposed, sp.snr_db.front()).tnmse ==
          doctest::Approx(m.summary(Scheme::proposed, sp.snr_db.front()).tnmse).epsilon(1e-12));
    CHECK(r.summary(Scheme::proposed, sp.snr_db.front()).bwp.empty());

    std::ostringstream js;
    write_summary_json(js, m, sp);
    const nlohmann::json j = nlohmann::json::parse(js.str());
    CHECK(j["series"].size() == 2);
    CHECK(j["tnmse_vs_snr"].contains("proposed"));
    CHECK(j["series"][0]["nmse_vs_bwp_at_first_bwp_slots"].size() == 4);
    CHECK(j["series"][0]["stage1_objective"].size() == static_cast<std::size_t>(sp.pipeline.hrpe.ao_iterations + 1));

    std::istringstream bad("scheme,snr,slot\n");
    CHECK_THROWS_AS(read_long_csv(bad), std::invalid_argument);
}

TEST_CASE("config JSON: round trip, overrides, rejected keys and values")
{
    ExperimentSpec a;
    apply_config_json(R"({"schemes":["baseline2","proposed"],"snr_db":[0,20],"hop_count":2,"trials":3,
                          "module_a":"structured","em_iterations":2})",
                      a);
    CHECK(a.schemes == std::vector<Scheme>{Scheme::baseline2, Scheme::proposed});
    CHECK(a.scenario.system.hop_count == 2);
    CHECK(a.pipeline.tracker.turbo.module_a == ModuleAMode::structured);
    CHECK(a.pipeline.tracker.em_iterations == 2);
    ExperimentSpec b;
    apply_config_json(spec_to_json(a), b);
    CHECK(spec_to_json(b) == spec_to_json(a));

    ExperimentSpec c;
    CHECK_THROWS_AS(apply_config_json(R"({"trails":3})", c), std::invalid_argument);
    CHECK_THROWS_AS(apply_config_json(R"({"trials":"many"})", c), std::invalid_argument);
    CHECK_THROWS_AS(apply_config_json(R"({"schemes":["baseline9"]})", c), std::invalid_argument);
    CHECK_THROWS_AS(apply_config_json("[1,2]", c), std::invalid_argument);
    CHECK_THROWS_AS(apply_config_json("{", c), std::invalid_argument);
}

TEST_CASE("ExperimentSpec validation")
{
    ExperimentSpec s;
    CHECK_NOTHROW(s.validate());
    ExperimentSpec t = s;
    t.trials = 0;
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
    t = s;
    t.schemes = {Scheme::proposed, Scheme::proposed};
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
    t = s;
    t.horizon = 3;
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
    t = s;
    t.snr_db.clear();
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
    t = s;
    t.scenario.system.hop_count = 3;
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
    CHECK_THROWS_AS(parse_scheme("oracle"), std::invalid_argument);
}
