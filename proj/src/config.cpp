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

#include <functional>
#include <map>

#include "json.hpp"

#include "chanx/harness.hpp"

namespace chanx {

namespace {

using nlohmann::json;

const char* module_a_name(ModuleAMode m) { return m == ModuleAMode::exact ? "exact" : "structured"; }

ModuleAMode parse_module_a(const std::string& s)
{
    if (s == "exact")
        return ModuleAMode::exact;
    if (s == "structured")
        return ModuleAMode::structured;
    throw std::invalid_argument("module_a must be 'exact' or 'structured'");
}

// One setter per key; keys are flat so that they line up with the CLI flags.
using Setter = std::function<void(const json&, ExperimentSpec&)>;

const std::map<std::string, Setter>& setters()
{
    static const std::map<std::string, Setter> table = {
        {"schemes",
         [](const json& v, ExperimentSpec& s) {
             s.schemes.clear();
             for (const auto& x : v)
                 s.schemes.push_back(parse_scheme(x.get<std::string>()));
         }},
        {"snr_db", [](const json& v, ExperimentSpec& s) { s.snr_db = v.get<std::vector<double>>(); }},
        {"trials", [](const json& v, ExperimentSpec& s) { s.trials = v.get<int>(); }},
        {"horizon", [](const json& v, ExperimentSpec& s) { s.horizon = v.get<int>(); }},
        {"seed", [](const json& v, ExperimentSpec& s) { s.seed = v.get<std::uint64_t>(); }},
        {"output", [](const json& v, ExperimentSpec& s) { s.output = v.get<std::string>(); }},
        {"threads", [](const json& v, ExperimentSpec& s) { s.threads = v.get<int>(); }},
        {"fatal_fraction", [](const json& v, ExperimentSpec& s) { s.fatal_fraction = v.get<double>(); }},
        {"hop_count", [](const json& v, ExperimentSpec& s) { s.scenario.system.hop_count = v.get<int>(); }},
        {"hop_order", [](const json& v, ExperimentSpec& s) { s.scenario.system.hop_order = v.get<std::vector<int>>(); }},
        {"estimation_slots",
         [](const json& v, ExperimentSpec& s) { s.scenario.system.estimation_slots = v.get<int>(); }},
        {"num_subcarriers",
         [](const json& v, ExperimentSpec& s) { s.scenario.system.num_subcarriers = v.get<int>(); }},
        {"nx", [](const json& v, ExperimentSpec& s) { s.scenario.system.nx = v.get<int>(); }},
        {"ny", [](const json& v, ExperimentSpec& s) { s.scenario.system.ny = v.get<int>(); }},
        {"comb", [](const json& v, ExperimentSpec& s) { s.scenario.system.comb = v.get<int>(); }},
        {"subcarrier_spacing",
         [](const json& v, ExperimentSpec& s) { s.scenario.system.subcarrier_spacing = v.get<double>(); }},
        {"carrier_freq", [](const json& v, ExperimentSpec& s) { s.scenario.system.carrier_freq = v.get<double>(); }},
        {"srs_period", [](const json& v, ExperimentSpec& s) { s.scenario.system.srs_period = v.get<double>(); }},
        {"num_paths", [](const json& v, ExperimentSpec& s) { s.scenario.paths.num_paths = v.get<int>(); }},
        {"max_delay",
         [](const json& v, ExperimentSpec& s) {
             s.scenario.paths.max_delay = v.get<double>();
             s.pipeline.hrpe.max_delay = s.scenario.paths.max_delay;
         }},
        {"speed_kmh", [](const json& v, ExperimentSpec& s) { s.scenario.paths.speed_kmh = v.get<double>(); }},
        {"phase_noise", [](const json& v, ExperimentSpec& s) { s.scenario.drift.phase_noise = v.get<bool>(); }},
        {"timing_offset", [](const json& v, ExperimentSpec& s) { s.scenario.drift.timing_offset = v.get<bool>(); }},
        {"doppler_drift", [](const json& v, ExperimentSpec& s) { s.scenario.drift.doppler = v.get<bool>(); }},
        {"frozen", [](const json& v, ExperimentSpec& s) { s.scenario.drift.frozen = v.get<bool>(); }},
        {"ao_iterations", [](const json& v, ExperimentSpec& s) { s.pipeline.hrpe.ao_iterations = v.get<int>(); }},
        {"delay_grid_size", [](const json& v, ExperimentSpec& s) { s.pipeline.delay_grid_size = v.get<int>(); }},
        {"em_iterations", [](const json& v, ExperimentSpec& s) { s.pipeline.tracker.em_iterations = v.get<int>(); }},
        {"predict_imperfections",
         [](const json& v, ExperimentSpec& s) { s.pipeline.tracker.predict_imperfections = v.get<bool>(); }},
        {"module_a",
         [](const json& v, ExperimentSpec& s) {
             s.pipeline.tracker.turbo.module_a = parse_module_a(v.get<std::string>());
         }},
        {"turbo_max_iterations",
         [](const json& v, ExperimentSpec& s) { s.pipeline.tracker.turbo.max_iterations = v.get<int>(); }},
        {"turbo_tolerance",
         [](const json& v, ExperimentSpec& s) { s.pipeline.tracker.turbo.tolerance = v.get<double>(); }},
        {"damping", [](const json& v, ExperimentSpec& s) { s.pipeline.tracker.turbo.damping = v.get<double>(); }},
    };
    return table;
}

} // namespace

void apply_config_json(const std::string& text, ExperimentSpec& spec)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }
    if (!j.is_object())
        throw std::invalid_argument("config: top level must be an object");
    const auto& table = setters();
    for (const auto& [key, value] : j.items()) {
        const auto it = table.find(key);
        if (it == table.end())
            throw std::invalid_argument("config: unknown key '" + key + "'");
        try {
            it->second(value, spec);
        } catch (const json::exception& e) {
            throw std::invalid_argument("config: bad value for '" + key + "': " + e.what());
        }
    }
}

std::string spec_to_json(const ExperimentSpec& spec)
{
    const SystemConfig& sys = spec.scenario.system;
    json j;
    json schemes = json::array();
    for (Scheme s : spec.schemes)
        schemes.push_back(scheme_name(s));
    j["schemes"] = schemes;
    j["snr_db"] = spec.snr_db;
    j["trials"] = spec.trials;
    j["horizon"] = spec.horizon;
    j["seed"] = spec.seed;
    j["output"] = spec.output;
    j["threads"] = spec.threads;
    j["fatal_fraction"] = spec.fatal_fraction;
    j["hop_count"] = sys.hop_count;
    j["hop_order"] = sys.hop_order;
    j["estimation_slots"] = sys.estimation_slots;
    j["num_subcarriers"] = sys.num_subcarriers;
    j["nx"] = sys.nx;
    j["ny"] = sys.ny;
    j["comb"] = sys.comb;
    j["subcarrier_spacing"] = sys.subcarrier_spacing;
    j["carrier_freq"] = sys.carrier_freq;
    j["srs_period"] = sys.srs_period;
    j["num_paths"] = spec.scenario.paths.num_paths;
    j["max_delay"] = spec.scenario.paths.max_delay;
    j["speed_kmh"] = spec.scenario.paths.speed_kmh;
    j["phase_noise"] = spec.scenario.drift.phase_noise;
    j["timing_offset"] = spec.scenario.drift.timing_offset;
    j["doppler_drift"] = spec.scenario.drift.doppler;
    j["frozen"] = spec.scenario.drift.frozen;
    j["ao_iterations"] = spec.pipeline.hrpe.ao_iterations;
    j["delay_grid_size"] = spec.pipeline.delay_grid_size;
    j["em_iterations"] = spec.pipeline.tracker.em_iterations;
    j["predict_imperfections"] = spec.pipeline.tracker.predict_imperfections;
    j["module_a"] = module_a_name(spec.pipeline.tracker.turbo.module_a);
    j["turbo_max_iterations"] = spec.pipeline.tracker.turbo.max_iterations;
    j["turbo_tolerance"] = spec.pipeline.tracker.turbo.tolerance;
    j["damping"] = spec.pipeline.tracker.turbo.damping;
    return j.dump(2);
}

} // namespace chanx
