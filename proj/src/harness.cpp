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

#include "chanx/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>
#include <tuple>

#include "json.hpp"

#include "chanx/linalg.hpp"
#include "chanx/subspace.hpp"

namespace chanx {

namespace {

ModelContext context_of(const SystemConfig& sys)
{
    return {sys.subcarrier_spacing, sys.nx, sys.ny};
}

std::string fmt(const char* f, double x)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

// Full precision keeps the CSV a faithful record; the digits are deterministic for identical bits.
std::string num(double x) { return fmt("%.17g", x); }

std::string snr_text(double x) { return fmt("%g", x); }

} // namespace

const char* scheme_name(Scheme s)
{
    switch (s) {
    case Scheme::proposed: return "proposed";
    case Scheme::baseline1: return "baseline1";
    case Scheme::baseline2: return "baseline2";
    case Scheme::baseline3: return "baseline3";
    }
    return "unknown";
}

Scheme parse_scheme(const std::string& name)
{
    for (Scheme s : all_schemes())
        if (name == scheme_name(s))
            return s;
    throw std::invalid_argument("unknown scheme '" + name + "'");
}

std::vector<Scheme> all_schemes()
{
    return {Scheme::proposed, Scheme::baseline1, Scheme::baseline2, Scheme::baseline3};
}

double nmse(const CMat& est, const CMat& ref)
{
    if (est.rows() != ref.rows() || est.cols() != ref.cols())
        throw std::invalid_argument("nmse: shape mismatch");
    const double den = ref.squaredNorm();
    if (!(den > 0.0))
        throw std::invalid_argument("nmse: zero reference");
    return (est - ref).squaredNorm() / den;
}

double tnmse(const std::vector<double>& series, int horizon)
{
    if (horizon < 1 || static_cast<int>(series.size()) < horizon)
        throw std::invalid_argument("tnmse: fewer slots than the horizon");
    return std::accumulate(series.begin(), series.begin() + horizon, 0.0) / horizon;
}

std::vector<int> bwp_subcarriers(int b, const SystemConfig& sys)
{
    const int width = sys.subcarriers_per_bwp();
    std::vector<int> rows(static_cast<std::size_t>(width));
    std::iota(rows.begin(), rows.end(), b * width);
    return rows;
}

std::vector<double> bwp_nmse(const CMat& est, const CMat& ref, const SystemConfig& sys)
{
    const int width = sys.subcarriers_per_bwp();
    std::vector<double> out;
    for (int b = 0; b < sys.hop_count; ++b)
        out.push_back(nmse(est.middleRows(b * width, width), ref.middleRows(b * width, width)));
    return out;
}

// ---------------------------------------------------------------------------------------------
// Schemes

SchemeOutput run_proposed(const std::vector<SrsObservation>& obs, const SystemConfig& sys,
                          const PipelineConfig& cfg, const IterationCallback& cb)
{
    const int te = sys.estimation_slots;
    if (static_cast<int>(obs.size()) < te)
        throw std::invalid_argument("run_proposed: fewer observations than estimation slots");
    const std::vector<SrsObservation> head(obs.begin(), obs.begin() + te);
    const RefinedEstimate r = r_tst_music(head, sys, cfg.hrpe, cb);
    SchemeOutput out;
    out.stage1_log = r.log;
    out.flags += r.flagged ? 1 : 0;
    const ModelContext ctx = context_of(sys);
    for (int s = 0; s < te; ++s)
        out.estimates.push_back({reconstruct_stage1(r.params, s, sys.num_subcarriers, ctx), head[static_cast<std::size_t>(s)].slot});
    if (static_cast<int>(obs.size()) == te)
        return out;

    const Grids grids = Grids::make(cfg.hrpe.max_delay, cfg.delay_grid_size, sys.nx, sys.ny);
    TrackerState st = init_from_hrpe(r.params, grids, cfg.hyper, sys, head.back().slot);
    st.noise_var = sys.noise_var;
    for (std::size_t t = static_cast<std::size_t>(te); t < obs.size(); ++t) {
        TrackResult tr = track_slot(st, obs[t], sys, cfg.tracker);
        out.flags += tr.oscillation ? 1 : 0;
        out.estimates.push_back(std::move(tr.estimate));
    }
    return out;
}

SchemeOutput run_baseline1(const std::vector<SrsObservation>& obs, const SystemConfig& sys,
                           const PipelineConfig& cfg)
{
    SystemConfig one = sys;
    one.estimation_slots = 1;
    HrpeConfig h = cfg.hrpe;
    h.ao_iterations = 0;
    const ModelContext ctx = context_of(sys);
    SchemeOutput out;
    for (const SrsObservation& o : obs) {
        FullBandChannel f{CMat::Zero(sys.num_subcarriers, sys.num_antennas()), o.slot};
        try {
            const RefinedEstimate r = r_tst_music({o}, one, h);
            f.H = reconstruct_stage1(r.params, 0, sys.num_subcarriers, ctx);
            out.flags += r.flagged ? 1 : 0;
        } catch (const NoPathsError&) {
            ++out.flags; // zero estimate, NMSE 1
        }
        out.estimates.push_back(std::move(f));
    }
    return out;
}

SchemeOutput run_baseline2(const std::vector<SrsObservation>& obs, const SystemConfig& sys,
                           const PipelineConfig& cfg)
{
    const int nr = sys.num_antennas();
    const int width = sys.subcarriers_per_bwp();
    const double fs = sys.subcarrier_spacing;
    const RVec delay = Grids::make(cfg.hrpe.max_delay, cfg.delay_grid_size, sys.nx, sys.ny).delay;
    const int l_count = static_cast<int>(delay.size());
    const double noise = std::max(sys.noise_var, cfg.tracker.noise_floor);

    struct Bwp {
        bool seen = false;
        int last_slot = 0;
        MarkovHyperparams hyper;
        Beliefs beliefs;
        CMat held;
    };
    std::vector<Bwp> bwps(static_cast<std::size_t>(sys.hop_count));
    for (Bwp& b : bwps)
        b.hyper = cfg.hyper;

    SchemeOutput out;
    for (const SrsObservation& o : obs) {
        Bwp& bw = bwps.at(static_cast<std::size_t>(o.hop_index));
        // Delay-only dictionary per antenna: Phi = I_Nr (x) diag(pilot) G.
        SensingOperator op;
        op.rows = o.selection;
        op.pilot = o.pilot;
        op.subcarrier_spacing = fs;
        op.b.resize(static_cast<Eigen::Index>(o.selection.size()), l_count);
        for (int l = 0; l < l_count; ++l)
            op.b.col(l) = o.pilot.cwiseProduct(delay_steering_rows(delay(l), o.selection, fs));
        op.a = CMat::Identity(nr, nr);
        op.d = CVec::Ones(static_cast<Eigen::Index>(l_count) * nr);
        const CVec y = stack_observation(o.Y);

        Beliefs prior;
        if (!bw.seen) {
            const MarkovHyperparams& h = bw.hyper;
            const double pi = h.steady_state_support();
            const double energy = o.Y.squaredNorm() / static_cast<double>(o.Y.size());
            const double v = std::max(energy - noise, 1e-3 * energy) / (pi * l_count);
            bw.hyper.gamma_amp = v / (h.beta_amp * h.beta_amp);
            const int n = l_count * nr;
            prior.support = RVec::Constant(n, pi);
            prior.amp_mean = CVec::Constant(n, h.beta_amp * h.mu_amp);
            prior.amp_var = RVec::Constant(n, v);
        } else {
            prior = bw.beliefs;
            for (int g = 0; g < o.slot - bw.last_slot; ++g)
                prior = cross_slot_propagate(prior, bw.hyper);
        }
        const EStepResult e = turbo_estep(y, op, prior, noise, cfg.tracker.turbo);
        out.flags += e.oscillation ? 1 : 0;
        bw.beliefs = e.posterior.beliefs;
        bw.seen = true;
        bw.last_slot = o.slot;

        const std::vector<int> rows = bwp_subcarriers(o.hop_index, sys);
        CMat g(width, l_count);
        for (int l = 0; l < l_count; ++l)
            g.col(l) = delay_steering_rows(delay(l), rows, fs);
        bw.held = g * Eigen::Map<const CMat>(e.posterior.mean.data(), l_count, nr);

        FullBandChannel f{CMat::Zero(sys.num_subcarriers, nr), o.slot};
        for (int b = 0; b < sys.hop_count; ++b)
            if (bwps[static_cast<std::size_t>(b)].seen)
                f.H.middleRows(b * width, width) = bwps[static_cast<std::size_t>(b)].held;
        out.estimates.push_back(std::move(f));
    }
    return out;
}

MultiSlotParams uncompensated_stage1(const std::vector<SrsObservation>& obs, const SystemConfig& sys,
                                     const HrpeConfig& cfg, bool& flagged)
{
    const std::vector<SlotData> slots = prepare_slots(obs);
    std::vector<std::pair<int, Eigen::Index>> order; // (subcarrier, stacked row)
    Eigen::Index total = 0;
    for (const SlotData& sd : slots)
        for (std::size_t i = 0; i < sd.rows.size(); ++i)
            order.emplace_back(sd.rows[i], total++);
    CMat stacked(total, sys.num_antennas());
    Eigen::Index off = 0;
    for (const SlotData& sd : slots) {
        stacked.middleRows(off, sd.y.rows()) = sd.y;
        off += sd.y.rows();
    }
    std::stable_sort(order.begin(), order.end());
    TstMusicConfig tc;
    tc.subcarrier_spacing = sys.subcarrier_spacing;
    tc.nx = sys.nx;
    tc.ny = sys.ny;
    tc.delay_grid = cfg.delay_grid();
    tc.forward_backward = cfg.forward_backward;
    CMat y(total, sys.num_antennas());
    for (Eigen::Index i = 0; i < total; ++i) {
        tc.rows.push_back(order[static_cast<std::size_t>(i)].first);
        y.row(i) = stacked.row(order[static_cast<std::size_t>(i)].second);
    }
    const TstMusicResult r = tst_music(y, tc);
    flagged |= r.flagged;
    const int k = static_cast<int>(r.paths.size());
    if (k == 0)
        throw NoPathsError("no detectable paths");
    MultiSlotParams p;
    p.delay.resize(k);
    p.theta.resize(k);
    p.phi.resize(k);
    p.gain.resize(k);
    for (int i = 0; i < k; ++i) {
        const PathEstimate& pe = r.paths[static_cast<std::size_t>(i)];
        p.delay(i) = pe.delay;
        p.theta(i) = pe.azimuth;
        p.phi(i) = pe.elevation;
        p.gain(i) = pe.gain;
    }
    p.doppler = RVec::Zero(k);
    p.epsilon = RVec::Zero(static_cast<Eigen::Index>(obs.size()));
    p.tau0 = RVec::Zero(static_cast<Eigen::Index>(obs.size()));
    return p;
}

SchemeOutput run_baseline3(const std::vector<SrsObservation>& obs, const SystemConfig& sys,
                           const PipelineConfig& cfg)
{
    const int te = sys.estimation_slots;
    if (static_cast<int>(obs.size()) < te)
        throw std::invalid_argument("run_baseline3: fewer observations than estimation slots");
    const std::vector<SrsObservation> head(obs.begin(), obs.begin() + te);
    bool flagged = false;
    const MultiSlotParams p = uncompensated_stage1(head, sys, cfg.hrpe, flagged);
    SchemeOutput out;
    out.flags += flagged ? 1 : 0;
    const ModelContext ctx = context_of(sys);
    for (int s = 0; s < te; ++s)
        out.estimates.push_back({reconstruct_stage1(p, s, sys.num_subcarriers, ctx), head[static_cast<std::size_t>(s)].slot});

    const Grids grids = Grids::make(cfg.hrpe.max_delay, cfg.delay_grid_size, sys.nx, sys.ny);
    TrackerState st = init_from_hrpe(p, grids, cfg.hyper, sys, head.back().slot);
    st.noise_var = sys.noise_var;
    TrackerConfig tc = cfg.tracker;
    tc.em_iterations = 0;
    for (std::size_t t = static_cast<std::size_t>(te); t < obs.size(); ++t) {
        TrackResult tr = track_slot(st, obs[t], sys, tc);
        out.flags += tr.oscillation ? 1 : 0;
        out.estimates.push_back(std::move(tr.estimate));
    }
    return out;
}

SchemeOutput run_scheme(Scheme s, const std::vector<SrsObservation>& obs, const SystemConfig& sys,
                        const PipelineConfig& cfg)
{
    switch (s) {
    case Scheme::proposed: return run_proposed(obs, sys, cfg);
    case Scheme::baseline1: return run_baseline1(obs, sys, cfg);
    case Scheme::baseline2: return run_baseline2(obs, sys, cfg);
    case Scheme::baseline3: return run_baseline3(obs, sys, cfg);
    }
    throw std::invalid_argument("run_scheme: unknown scheme");
}

// ---------------------------------------------------------------------------------------------
// Experiment

void ExperimentSpec::validate() const
{
    scenario.system.validate();
    if (trials < 1)
        throw std::invalid_argument("trials must be >= 1");
    if (horizon < scenario.system.estimation_slots)
        throw std::invalid_argument("horizon must cover the estimation slots");
    if (schemes.empty())
        throw std::invalid_argument("no schemes selected");
    for (std::size_t i = 0; i < schemes.size(); ++i)
        for (std::size_t j = i + 1; j < schemes.size(); ++j)
            if (schemes[i] == schemes[j])
                throw std::invalid_argument("duplicate scheme");
    if (snr_db.empty())
        throw std::invalid_argument("no SNR points");
    for (double s : snr_db)
        if (!std::isfinite(s))
            throw std::invalid_argument("SNR must be finite");
    if (pipeline.delay_grid_size < 2)
        throw std::invalid_argument("delay grid needs at least two points");
    if (pipeline.tracker.em_iterations < 0 || pipeline.hrpe.ao_iterations < 0)
        throw std::invalid_argument("iteration counts must be >= 0");
    if (threads < 0)
        throw std::invalid_argument("threads must be >= 0");
    if (!(fatal_fraction >= 0.0 && fatal_fraction <= 1.0))
        throw std::invalid_argument("fatal_fraction must lie in [0, 1]");
}

double TrialRecord::tnmse() const
{
    return chanx::tnmse(nmse, static_cast<int>(nmse.size()));
}

const SeriesSummary& MetricSeries::summary(Scheme s, double snr_db) const
{
    for (const SeriesSummary& x : summaries)
        if (x.scheme == s && x.snr_db == snr_db)
            return x;
    throw std::out_of_range(std::string("no series for ") + scheme_name(s) + " at " + snr_text(snr_db) + " dB");
}

std::vector<const TrialRecord*> MetricSeries::trials(Scheme s, double snr_db) const
{
    std::vector<const TrialRecord*> out;
    for (const TrialRecord& r : records)
        if (r.scheme == s && r.snr_db == snr_db)
            out.push_back(&r);
    return out;
}

namespace {

TrialRecord score(Scheme s, double snr, int trial, const ScenarioRealization& real, const SystemConfig& sys,
                  const PipelineConfig& cfg)
{
    TrialRecord rec;
    rec.scheme = s;
    rec.snr_db = snr;
    rec.trial = trial;
    try {
        SchemeOutput o;
        if (s == Scheme::proposed) {
            const ModelContext ctx = context_of(sys);
            const int te = sys.estimation_slots;
            o = run_proposed(real.observations, sys, cfg, [&](const IterationLog& l) {
                rec.stage1_objective.push_back(l.objective);
                double acc = 0.0;
                for (int k = 0; k < te; ++k)
                    acc += nmse(reconstruct_stage1(l.params, k, sys.num_subcarriers, ctx),
                                real.channels[static_cast<std::size_t>(k)].H);
                rec.stage1_nmse.push_back(acc / te);
            });
        } else {
            o = run_scheme(s, real.observations, sys, cfg);
        }
        rec.flags = o.flags;
        for (std::size_t t = 0; t < o.estimates.size(); ++t) {
            rec.nmse.push_back(nmse(o.estimates[t].H, real.channels[t].H));
            rec.bwp.push_back(bwp_nmse(o.estimates[t].H, real.channels[t].H, sys));
        }
    } catch (const std::exception& e) {
        rec.fatal = true;
        rec.error = e.what();
        rec.nmse.clear();
        rec.bwp.clear();
    }
    return rec;
}

} // namespace

MetricSeries run_experiment(const ExperimentSpec& spec)
{
    spec.validate();
    const int n_snr = static_cast<int>(spec.snr_db.size());
    const int n_sch = static_cast<int>(spec.schemes.size());
    const int jobs = n_snr * spec.trials;
    MetricSeries m;
    m.hop_count = spec.scenario.system.hop_count;
    m.records.resize(static_cast<std::size_t>(n_sch) * static_cast<std::size_t>(jobs));

    std::atomic<int> next{0};
    auto worker = [&] {
        for (int j = next++; j < jobs; j = next++) {
            const int si = j / spec.trials;
            const int trial = j % spec.trials;
            ScenarioConfig sc = spec.scenario;
            sc.system.noise_var = std::pow(10.0, -spec.snr_db[static_cast<std::size_t>(si)] / 10.0);
            const ScenarioRealization real = realize_scenario(sc, spec.horizon, spec.seed,
                                                              static_cast<std::uint64_t>(trial));
            for (int c = 0; c < n_sch; ++c) {
                const std::size_t idx = (static_cast<std::size_t>(c) * n_snr + si) * spec.trials + trial;
                m.records[idx] = score(spec.schemes[static_cast<std::size_t>(c)],
                                       spec.snr_db[static_cast<std::size_t>(si)], trial, real, sc.system,
                                       spec.pipeline);
            }
        }
    };
    int threads = spec.threads > 0 ? spec.threads : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::clamp(threads, 1, jobs);
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < threads; ++i)
            pool.emplace_back(worker);
        for (std::thread& t : pool)
            t.join();
    }
    summarize(m);
    return m;
}

void summarize(MetricSeries& m)
{
    m.summaries.clear();
    m.fatal_count = 0;
    m.total_runs = static_cast<int>(m.records.size());
    std::vector<std::pair<Scheme, double>> keys;
    for (const TrialRecord& r : m.records) {
        m.fatal_count += r.fatal ? 1 : 0;
        if (std::find(keys.begin(), keys.end(), std::make_pair(r.scheme, r.snr_db)) == keys.end())
            keys.emplace_back(r.scheme, r.snr_db);
    }
    for (const auto& [scheme, snr] : keys) {
        SeriesSummary s;
        s.scheme = scheme;
        s.snr_db = snr;
        std::vector<double> per_trial;
        for (const TrialRecord* r : m.trials(scheme, snr)) {
            s.flagged += r->flags > 0 ? 1 : 0;
            if (r->fatal) {
                ++s.fatal;
                continue;
            }
            if (s.mean.empty()) {
                s.mean.assign(r->nmse.size(), 0.0);
                s.bwp.assign(r->bwp.size(), std::vector<double>(r->bwp.empty() ? 0 : r->bwp[0].size(), 0.0));
                s.stage1_objective.assign(r->stage1_objective.size(), 0.0);
                s.stage1_nmse.assign(r->stage1_nmse.size(), 0.0);
            }
            for (std::size_t t = 0; t < s.mean.size(); ++t)
                s.mean[t] += r->nmse[t];
            for (std::size_t t = 0; t < s.bwp.size() && t < r->bwp.size(); ++t)
                for (std::size_t b = 0; b < s.bwp[t].size(); ++b)
                    s.bwp[t][b] += r->bwp[t][b];
            for (std::size_t i = 0; i < s.stage1_objective.size() && i < r->stage1_objective.size(); ++i) {
                s.stage1_objective[i] += r->stage1_objective[i];
                s.stage1_nmse[i] += r->stage1_nmse[i];
            }
            per_trial.push_back(r->tnmse());
            ++s.trials_used;
        }
        if (s.trials_used > 0) {
            const double n = s.trials_used;
            for (double& v : s.mean)
                v /= n;
            for (auto& row : s.bwp)
                for (double& v : row)
                    v /= n;
            for (double& v : s.stage1_objective)
                v /= n;
            for (double& v : s.stage1_nmse)
                v /= n;
            s.tnmse = std::accumulate(per_trial.begin(), per_trial.end(), 0.0) / n;
            if (s.trials_used > 1) {
                double ss = 0.0;
                for (double v : per_trial)
                    ss += (v - s.tnmse) * (v - s.tnmse);
                s.tnmse_stderr = std::sqrt(ss / (n - 1.0) / n);
            }
        }
        m.summaries.push_back(std::move(s));
    }
}

void write_long_csv(std::ostream& os, const MetricSeries& m)
{
    os << "scheme,snr_db,slot,trial,nmse\n";
    for (const TrialRecord& r : m.records)
        for (std::size_t t = 0; t < r.nmse.size(); ++t)
            os << scheme_name(r.scheme) << ',' << snr_text(r.snr_db) << ',' << t + 1 << ',' << r.trial << ','
               << num(r.nmse[t]) << '\n';
}

void write_bwp_csv(std::ostream& os, const MetricSeries& m)
{
    os << "scheme,snr_db,slot,trial,bwp,nmse\n";
    for (const TrialRecord& r : m.records)
        for (std::size_t t = 0; t < r.bwp.size(); ++t)
            for (std::size_t b = 0; b < r.bwp[t].size(); ++b)
                os << scheme_name(r.scheme) << ',' << snr_text(r.snr_db) << ',' << t + 1 << ',' << r.trial << ','
                   << b << ',' << num(r.bwp[t][b]) << '\n';
}

void write_stage1_csv(std::ostream& os, const MetricSeries& m)
{
    os << "snr_db,trial,iteration,objective,nmse\n";
    for (const TrialRecord& r : m.records)
        for (std::size_t i = 0; i < r.stage1_objective.size(); ++i)
            os << snr_text(r.snr_db) << ',' << r.trial << ',' << i << ',' << num(r.stage1_objective[i]) << ','
               << num(r.stage1_nmse[i]) << '\n';
}

void write_summary_json(std::ostream& os, const MetricSeries& m, const ExperimentSpec& spec)
{
    using nlohmann::json;
    json j;
    j["spec"] = json::parse(spec_to_json(spec));
    j["fatal_count"] = m.fatal_count;
    j["total_runs"] = m.total_runs;
    json series = json::array();
    json tnmse_snr = json::object();
    for (const SeriesSummary& s : m.summaries) {
        // Slots whose SRS sits in the first BWP: NMSE per BWP averaged over them.
        std::vector<double> profile(static_cast<std::size_t>(m.hop_count), 0.0);
        int count = 0;
        for (std::size_t t = 0; t < s.bwp.size(); ++t) {
            if (bwp_of_slot(static_cast<int>(t) + 1, spec.scenario.system.hop_count,
                            spec.scenario.system.hop_order) != 0)
                continue;
            for (std::size_t b = 0; b < profile.size(); ++b)
                profile[b] += s.bwp[t][b];
            ++count;
        }
        for (double& v : profile)
            v = count > 0 ? v / count : 0.0;
        json first_bwp = json::array();
        for (const auto& row : s.bwp)
            first_bwp.push_back(row.empty() ? 0.0 : row[0]);
        series.push_back({{"scheme", scheme_name(s.scheme)},
                          {"snr_db", s.snr_db},
                          {"tnmse", s.tnmse},
                          {"tnmse_stderr", s.tnmse_stderr},
                          {"trials_used", s.trials_used},
                          {"fatal", s.fatal},
                          {"flagged", s.flagged},
                          {"nmse_vs_slot", s.mean},
                          {"first_bwp_nmse_vs_slot", first_bwp},
                          {"nmse_vs_bwp_at_first_bwp_slots", profile},
                          {"stage1_objective", s.stage1_objective},
                          {"stage1_nmse", s.stage1_nmse}});
        tnmse_snr[scheme_name(s.scheme)].push_back({s.snr_db, s.tnmse});
    }
    j["series"] = series;
    j["tnmse_vs_snr"] = tnmse_snr;
    j["hop_count"] = m.hop_count;
    os << j.dump(2) << '\n';
}

void write_outputs(const std::string& prefix, const MetricSeries& m, const ExperimentSpec& spec)
{
    auto open = [](const std::string& path) {
        std::ofstream f(path);
        if (!f)
            throw std::runtime_error("cannot write " + path);
        return f;
    };
    {
        std::ofstream f = open(prefix + ".csv");
        write_long_csv(f, m);
    }
    {
        std::ofstream f = open(prefix + "_bwp.csv");
        write_bwp_csv(f, m);
    }
    {
        std::ofstream f = open(prefix + "_stage1.csv");
        write_stage1_csv(f, m);
    }
    std::ofstream f = open(prefix + ".json");
    write_summary_json(f, m, spec);
}

std::vector<TrialRecord> read_long_csv(std::istream& is)
{
    std::string line;
    if (!std::getline(is, line) || line != "scheme,snr_db,slot,trial,nmse")
        throw std::invalid_argument("read_long_csv: unexpected header");
    std::vector<TrialRecord> out;
    std::map<std::tuple<int, double, int>, std::size_t> index;
    while (std::getline(is, line)) {
        if (line.empty())
            continue;
        std::stringstream ss(line);
        std::string scheme, snr, slot, trial, value;
        if (!std::getline(ss, scheme, ',') || !std::getline(ss, snr, ',') || !std::getline(ss, slot, ',') ||
            !std::getline(ss, trial, ',') || !std::getline(ss, value))
            throw std::invalid_argument("read_long_csv: malformed row '" + line + "'");
        const Scheme s = parse_scheme(scheme);
        const double snr_db = std::stod(snr);
        const int tr = std::stoi(trial);
        const int t = std::stoi(slot);
        const auto [pos, fresh] = index.try_emplace({static_cast<int>(s), snr_db, tr}, out.size());
        if (fresh) {
            out.push_back({});
            out.back().scheme = s;
            out.back().snr_db = snr_db;
            out.back().trial = tr;
        }
        TrialRecord& r = out[pos->second];
        if (t != static_cast<int>(r.nmse.size()) + 1)
            throw std::invalid_argument("read_long_csv: slots out of order");
        r.nmse.push_back(std::stod(value));
    }
    return out;
}

} // namespace chanx
