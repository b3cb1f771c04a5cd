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

// chanx: scenario generation, stage-1 estimation, tracking and Monte-Carlo benchmarks.
// Exit codes: 0 success, 2 invalid configuration, 3 too many fatal trials, 1 anything else.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "chanx/harness.hpp"

using namespace chanx;

namespace {

constexpr int kExitInvalid = 2;
constexpr int kExitFatal = 3;

struct Options {
    ExperimentSpec spec;
    std::vector<std::string> schemes;
    std::string config;
    std::uint64_t trial = 0;
    std::string csv;
};

void add_common(CLI::App* app, Options& o)
{
    ExperimentSpec& s = o.spec;
    app->add_option("--config", o.config, "JSON file; its keys override the flags");
    app->add_option("--seed", s.seed, "master seed");
    app->add_option("--horizon", s.horizon, "slots per trial");
    app->add_option("--hop-count", s.scenario.system.hop_count, "BWPs in the hopping cycle (h_p)");
    app->add_option("--estimation-slots", s.scenario.system.estimation_slots, "stage-1 slots (T_e)");
    app->add_option("--paths", s.scenario.paths.num_paths, "paths per realization");
    app->add_option("--speed", s.scenario.paths.speed_kmh, "user speed, km/h");
    app->add_option("--delay-grid", s.pipeline.delay_grid_size, "tracking delay grid size L");
    app->add_option("--em-iterations", s.pipeline.tracker.em_iterations, "EM iterations per tracked slot");
    app->add_option("--ao-iterations", s.pipeline.hrpe.ao_iterations, "stage-1 refinement iterations");
}

void finish_spec(Options& o)
{
    if (!o.schemes.empty()) {
        o.spec.schemes.clear();
        for (const std::string& n : o.schemes)
            o.spec.schemes.push_back(parse_scheme(n));
    }
    if (!o.config.empty()) {
        std::ifstream f(o.config);
        if (!f)
            throw std::invalid_argument("cannot read config " + o.config);
        std::stringstream ss;
        ss << f.rdbuf();
        apply_config_json(ss.str(), o.spec);
    }
    o.spec.validate();
}

ScenarioConfig scenario_at(const ExperimentSpec& s, double snr_db)
{
    ScenarioConfig sc = s.scenario;
    sc.system.noise_var = std::pow(10.0, -snr_db / 10.0);
    return sc;
}

void write_matrix(const std::filesystem::path& p, const CMat& m)
{
    std::ofstream f(p);
    if (!f)
        throw std::runtime_error("cannot write " + p.string());
    write_complex_csv(f, m);
}

int cmd_generate(const Options& o, const std::string& dir)
{
    const double snr = o.spec.snr_db.front();
    const ScenarioRealization real = realize_scenario(scenario_at(o.spec, snr), o.spec.horizon, o.spec.seed, o.trial);
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["snr_db"] = snr;
    j["seed"] = o.spec.seed;
    j["trial"] = o.trial;
    for (const Path& p : real.paths.paths)
        j["paths"].push_back({{"gain_re", p.gain.real()},
                              {"gain_im", p.gain.imag()},
                              {"azimuth", p.azimuth},
                              {"elevation", p.elevation},
                              {"delay", p.delay},
                              {"doppler", p.doppler}});
    for (int t = 1; t <= real.trace.size(); ++t) {
        const SlotImperfection& s = real.trace.at(t);
        j["trace"].push_back({{"slot", t}, {"epsilon", s.epsilon}, {"tau0", s.tau0}, {"doppler_phase", s.doppler_phase}});
    }
    std::ofstream(std::filesystem::path(dir) / "scenario.json") << j.dump(2) << '\n';
    for (std::size_t t = 0; t < real.channels.size(); ++t) {
        const std::string n = std::to_string(t + 1);
        write_matrix(std::filesystem::path(dir) / ("channel_" + n + ".csv"), real.channels[t].H);
        write_matrix(std::filesystem::path(dir) / ("observation_" + n + ".csv"), real.observations[t].Y);
    }
    std::cout << "wrote " << real.channels.size() << " slots to " << dir << '\n';
    return 0;
}

int cmd_estimate(const Options& o)
{
    const SystemConfig sys = scenario_at(o.spec, o.spec.snr_db.front()).system;
    const ScenarioRealization real = realize_scenario(scenario_at(o.spec, o.spec.snr_db.front()),
                                                      sys.estimation_slots, o.spec.seed, o.trial);
    const RefinedEstimate r = r_tst_music(real.observations, sys, o.spec.pipeline.hrpe);
    if (o.csv.empty()) {
        write_iteration_log_csv(std::cout, r.log);
    } else {
        std::ofstream f(o.csv);
        write_iteration_log_csv(f, r.log);
    }
    const ModelContext ctx{sys.subcarrier_spacing, sys.nx, sys.ny};
    std::cerr << "paths " << r.model_order << (r.flagged ? " (flagged)" : "") << '\n';
    for (int s = 0; s < sys.estimation_slots; ++s)
        std::cerr << "slot " << s + 1 << " nmse "
                  << nmse(reconstruct_stage1(r.params, s, sys.num_subcarriers, ctx),
                          real.channels[static_cast<std::size_t>(s)].H)
                  << '\n';
    return 0;
}

int cmd_track(const Options& o)
{
    const double snr = o.spec.snr_db.front();
    const ScenarioConfig sc = scenario_at(o.spec, snr);
    const ScenarioRealization real = realize_scenario(sc, o.spec.horizon, o.spec.seed, o.trial);
    std::cout << "scheme,slot,nmse\n";
    for (Scheme s : o.spec.schemes) {
        const SchemeOutput out = run_scheme(s, real.observations, sc.system, o.spec.pipeline);
        for (std::size_t t = 0; t < out.estimates.size(); ++t)
            std::cout << scheme_name(s) << ',' << t + 1 << ',' << nmse(out.estimates[t].H, real.channels[t].H) << '\n';
    }
    return 0;
}

void print_table(const MetricSeries& m)
{
    std::printf("%-10s %8s %12s %12s %7s %6s\n", "scheme", "snr_db", "tnmse", "stderr", "trials", "fatal");
    for (const SeriesSummary& s : m.summaries)
        std::printf("%-10s %8g %12.5e %12.5e %7d %6d\n", scheme_name(s.scheme), s.snr_db, s.tnmse, s.tnmse_stderr,
                    s.trials_used, s.fatal);
}

int cmd_bench(const Options& o)
{
    const MetricSeries m = run_experiment(o.spec);
    if (!o.spec.output.empty()) {
        write_outputs(o.spec.output, m, o.spec);
        std::cerr << "wrote " << o.spec.output << ".{csv,json} and _bwp.csv, _stage1.csv\n";
    }
    print_table(m);
    const double share = m.total_runs > 0 ? static_cast<double>(m.fatal_count) / m.total_runs : 0.0;
    if (share > o.spec.fatal_fraction) {
        std::cerr << "fatal trials " << m.fatal_count << " of " << m.total_runs << " exceed the threshold\n";
        return kExitFatal;
    }
    return 0;
}

int cmd_report(const std::string& path)
{
    std::ifstream f(path);
    if (!f)
        throw std::invalid_argument("cannot read " + path);
    MetricSeries m;
    m.records = read_long_csv(f);
    summarize(m);
    print_table(m);
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"chanx: wideband channel extrapolation under SRS frequency hopping"};
    app.require_subcommand(1);
    Options o;
    std::string dir = "scenario";
    std::string report_path;

    CLI::App* gen = app.add_subcommand("generate", "realize one trial and dump channels and observations");
    add_common(gen, o);
    gen->add_option("--snr", o.spec.snr_db, "SNR in dB (first value used)");
    gen->add_option("--trial", o.trial, "trial index");
    gen->add_option("--out", dir, "output directory");

    CLI::App* est = app.add_subcommand("estimate", "run the multi-slot stage on one trial");
    add_common(est, o);
    est->add_option("--snr", o.spec.snr_db, "SNR in dB (first value used)");
    est->add_option("--trial", o.trial, "trial index");
    est->add_option("--csv", o.csv, "iteration log destination (default stdout)");

    CLI::App* trk = app.add_subcommand("track", "per-slot NMSE of each scheme on one trial");
    add_common(trk, o);
    trk->add_option("--snr", o.spec.snr_db, "SNR in dB (first value used)");
    trk->add_option("--trial", o.trial, "trial index");
    trk->add_option("--schemes", o.schemes, "proposed, baseline1, baseline2, baseline3");

    CLI::App* bench = app.add_subcommand("bench", "Monte-Carlo sweep with CSV and JSON output");
    add_common(bench, o);
    bench->add_option("--snr", o.spec.snr_db, "SNR points in dB");
    bench->add_option("--schemes", o.schemes, "proposed, baseline1, baseline2, baseline3");
    bench->add_option("--trials", o.spec.trials, "trials per SNR point");
    bench->add_option("--output", o.spec.output, "output file prefix");
    bench->add_option("--threads", o.spec.threads, "worker threads (0: all cores)");
    bench->add_option("--fatal-fraction", o.spec.fatal_fraction, "fatal-trial share that fails the run");

    CLI::App* rep = app.add_subcommand("report", "TNMSE table from a long-form CSV");
    rep->add_option("csv", report_path, "long-form CSV written by bench")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitInvalid;
    }

    try {
        if (rep->parsed())
            return cmd_report(report_path);
        finish_spec(o);
        if (gen->parsed())
            return cmd_generate(o, dir);
        if (est->parsed())
            return cmd_estimate(o);
        if (trk->parsed())
            return cmd_track(o);
        return cmd_bench(o);
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid configuration: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
