#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cloudsim.hpp"
#include "errors.hpp"
#include "fieldkit.hpp"
#include "lossmodel.hpp"
#include "motionplan.hpp"
#include "trapsolve.hpp"
#include "units.hpp"

namespace conveyor::config {

using nlohmann::json;

namespace detail {

    inline const json& need(const json& j, const std::string& key, const std::string& where) {
        if (!j.is_object() || !j.contains(key)) throw ConfigError(where + ": missing field '" + key + "'");
        return j.at(key);
    }

    template <class T>
    T get(const json& j, const std::string& key, const std::string& where) {
        const auto& v = need(j, key, where);
        try {
            return v.get<T>();
        } catch (const json::exception&) {
            throw ConfigError(where + ": field '" + key + "' has the wrong type");
        }
    }

    template <class T>
    T get_or(const json& j, const std::string& key, const std::string& where, T fallback) {
        if (!j.is_object() || !j.contains(key)) return fallback;
        return get<T>(j, key, where);
    }

    inline double positive(const json& j, const std::string& key, const std::string& where) {
        double v = get<double>(j, key, where);
        if (!(v > 0)) throw ConfigError(where + ": field '" + key + "' must be positive");
        return v;
    }

    inline Vec3 vec3(const json& j, const std::string& key, const std::string& where) {
        auto v = get<std::vector<double>>(j, key, where);
        if (v.size() != 3) throw ConfigError(where + ": field '" + key + "' needs three components");
        return {v[0], v[1], v[2]};
    }

}  // namespace detail

inline CoilArray parse_coils(const json& root) {
    using namespace detail;
    const auto& coils = need(root, "coils", "config");
    if (!coils.is_array() || coils.empty()) throw ConfigError("config: 'coils' must be a non-empty array");
    std::vector<CoilSpec> specs;
    for (std::size_t i = 0; i < coils.size(); ++i) {
        const auto& c = coils[i];
        std::string where = "coils[" + std::to_string(i) + "]";
        CoilSpec s;
        s.name = get<std::string>(c, "name", where);
        where = "coil '" + s.name + "'";
        s.center = vec3(c, "center_m", where);
        s.axis = vec3(c, "axis", where);
        s.radius = get<double>(c, "radius_m", where);
        s.windings = get<int>(c, "windings", where);
        s.polarity = get<int>(c, "polarity", where);
        s.max_current = get<double>(c, "max_current_A", where);
        specs.push_back(std::move(s));
    }
    auto index_of = [&](const std::string& name, const std::string& where) {
        for (std::size_t i = 0; i < specs.size(); ++i)
            if (specs[i].name == name) return i;
        throw ConfigError(where + ": unknown coil '" + name + "'");
    };
    std::vector<std::array<std::size_t, 2>> pairs;
    std::vector<std::string> names;
    if (root.contains("pairs")) {
        const auto& ps = root.at("pairs");
        for (std::size_t p = 0; p < ps.size(); ++p) {
            std::string where = "pairs[" + std::to_string(p) + "]";
            auto members = get<std::vector<std::string>>(ps[p], "coils", where);
            if (members.size() != 2) throw ConfigError(where + ": a pair needs exactly two coils");
            pairs.push_back({index_of(members[0], where), index_of(members[1], where)});
            names.push_back(get<std::string>(ps[p], "name", where));
        }
    }
    return CoilArray(std::move(specs), pairs, names);
}

inline TransportPath parse_path(const json& root) {
    using namespace detail;
    const auto& p = need(root, "path", "config");
    const auto& legs = need(p, "legs", "path");
    std::vector<PathLeg> out;
    for (std::size_t i = 0; i < legs.size(); ++i) {
        std::string where = "path.legs[" + std::to_string(i) + "]";
        PathLeg l;
        l.start = vec3(legs[i], "start_m", where);
        l.direction = vec3(legs[i], "direction", where);
        l.length = positive(legs[i], "length_m", where);
        auto mode = get<std::string>(legs[i], "mode", where);
        if (mode == "horizontal") l.mode = TrapMode::horizontal;
        else if (mode == "vertical") l.mode = TrapMode::vertical;
        else throw ConfigError(where + ": field 'mode' must be horizontal or vertical");
        l.axis = vec3(legs[i], "gradient_axis", where);
        out.push_back(l);
    }
    return TransportPath(std::move(out));
}

inline ChannelSchedule parse_schedule(const json& root, const CoilArray& array, const TransportPath& path) {
    using namespace detail;
    if (!root.contains("schedule")) return nearest_channel_schedule(array, path);
    const auto& sc = root.at("schedule");
    std::vector<ScheduleEntry> entries;
    for (std::size_t i = 0; i < sc.size(); ++i) {
        std::string where = "schedule[" + std::to_string(i) + "]";
        ScheduleEntry e;
        e.s_begin = get<double>(sc[i], "s_begin_m", where);
        e.s_end = get<double>(sc[i], "s_end_m", where);
        for (const auto& name : get<std::vector<std::string>>(sc[i], "channels", where)) {
            try {
                e.channels.push_back(array.channel_index(name));
            } catch (const ConfigError&) {
                throw ConfigError(where + ": unknown channel '" + name + "'");
            }
        }
        entries.push_back(std::move(e));
    }
    return ChannelSchedule(std::move(entries));
}

struct MotConfig {
    std::string channel;
    double current = 0;       // A
    double ramp = 0.4;        // s
};

struct SimulationConfig {
    std::size_t particles = 1000;
    double temperature = 150e-6;  // K
    PropagateOptions propagate;
    FieldBackend backend = FieldBackend::taylor;
    std::vector<double> cut_positions;
};

struct LossConfig {
    LossModelInput input;
    GasSpecies dominant;
    double measured_lifetime = 0;  // s, at the coldest stage; 0 if absent
    struct Stage {
        std::string label;
        double temperature = 0;
        std::optional<double> lifetime;
        std::optional<double> pressure;
    };
    std::vector<Stage> stages;
};

struct Scenario {
    std::filesystem::path source;
    CoilArray array;
    TransportPath path;
    ChannelSchedule schedule;
    double path_step = 1e-3;
    double gradient = 1.2;                // T/m
    std::optional<double> aspect_ratio;   // empty: take it from the MOT trap
    double max_step_current = 0.5;
    MotConfig mot;
    std::vector<SectionSpec> sections;
    double sample_rate = 1000;
    double max_slew = 0;
    ParticleSpecies species;
    SimulationConfig sim;
    std::vector<BackgroundStage> background;
    LossConfig loss;
};

// Species database: {"species": [{"label", "mass_u", "C6_au"}]}
inline std::vector<GasSpecies> parse_species_db(const json& db) {
    using namespace detail;
    std::vector<GasSpecies> out;
    const auto& arr = need(db, "species", "species database");
    for (std::size_t i = 0; i < arr.size(); ++i) {
        std::string where = "species[" + std::to_string(i) + "]";
        GasSpecies g;
        g.label = get<std::string>(arr[i], "label", where);
        g.mass = positive(arr[i], "mass_u", where) * units::amu;
        g.c6 = positive(arr[i], "C6_au", where) * units::c6_atomic;
        out.push_back(g);
    }
    return out;
}

inline json read_json(const std::filesystem::path& p) {
    std::ifstream is(p);
    if (!is) throw ConfigError("cannot open config file " + p.string());
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError("malformed JSON in " + p.string() + ": " + e.what());
    }
}

inline Scenario parse_scenario(const json& root, const std::filesystem::path& base = {}) {
    using namespace detail;
    Scenario sc;
    sc.array = parse_coils(root);
    sc.path = parse_path(root);
    sc.path_step = get_or<double>(need(root, "path", "config"), "step_m", "path", 1e-3);
    if (!(sc.path_step > 0)) throw ConfigError("path: field 'step_m' must be positive");
    sc.schedule = parse_schedule(root, sc.array, sc.path);

    const auto& trap = need(root, "trap", "config");
    sc.gradient = positive(trap, "gradient_G_per_cm", "trap") * units::gauss_per_cm;
    if (trap.contains("aspect_ratio") && !trap.at("aspect_ratio").is_string()) sc.aspect_ratio = positive(trap, "aspect_ratio", "trap");
    sc.max_step_current = get_or<double>(trap, "max_step_current_A", "trap", 0.5);

    const auto& mot = need(root, "mot", "config");
    sc.mot.channel = get<std::string>(mot, "channel", "mot");
    std::size_t mot_ch = 0;
    try {
        mot_ch = sc.array.channel_index(sc.mot.channel);
    } catch (const Error&) {
        throw ConfigError("mot: field 'channel' names unknown channel '" + sc.mot.channel + "'");
    }
    if (mot.contains("current_A")) {
        sc.mot.current = get<double>(mot, "current_A", "mot");
    } else {
        // axial gradient per ampere at the pair centre, along the first coil axis
        double g = positive(mot, "gradient_G_per_cm", "mot") * units::gauss_per_cm;
        const auto& coil = sc.array.coils()[sc.array.channels()[mot_ch].coils.front()];
        double per_amp = coil.axis.dot(channel_response(sc.array, mot_ch, sc.array.channel_center(mot_ch)).J * coil.axis);
        if (per_amp == 0) throw ConfigError("mot: channel '" + sc.mot.channel + "' has no axial gradient");
        sc.mot.current = g / per_amp;
    }
    sc.mot.ramp = get_or<double>(mot, "ramp_ms", "mot", 400.0) * 1e-3;

    const auto& tr = need(root, "transport", "config");
    const auto& secs = need(tr, "sections", "transport");
    for (std::size_t i = 0; i < secs.size(); ++i) {
        std::string where = "transport.sections[" + std::to_string(i) + "]";
        SectionSpec s;
        s.length = positive(secs[i], "length_m", where);
        s.vmax = positive(secs[i], "vmax_m_per_s", where);
        s.amax = get_or<double>(secs[i], "amax_m_per_s2", where, 1.0);
        if (!(s.amax > 0)) throw ConfigError(where + ": field 'amax_m_per_s2' must be positive");
        sc.sections.push_back(s);
    }
    if (sc.sections.empty()) throw ConfigError("transport: 'sections' is empty");
    sc.sample_rate = get_or<double>(tr, "sample_rate_Hz", "transport", 1000.0);
    if (!(sc.sample_rate > 0)) throw ConfigError("transport: field 'sample_rate_Hz' must be positive");
    sc.max_slew = get_or<double>(tr, "max_slew_A_per_s", "transport", 0.0);

    const auto& sp = need(root, "species", "config");
    sc.species.name = get<std::string>(sp, "name", "species");
    sc.species.mass = positive(sp, "mass_u", "species") * units::amu;
    sc.species.magnetic_moment = positive(sp, "magnetic_moment_muB", "species") * units::mu_B;

    if (root.contains("simulation")) {
        const auto& sim = root.at("simulation");
        sc.sim.particles = get_or<std::size_t>(sim, "particles", "simulation", 1000);
        if (sc.sim.particles < 1) throw ConfigError("simulation: field 'particles' must be >= 1");
        sc.sim.temperature = get_or<double>(sim, "temperature_uK", "simulation", 150.0) * 1e-6;
        sc.sim.propagate.dt = get_or<double>(sim, "dt_us", "simulation", 10.0) * 1e-6;
        if (!(sc.sim.propagate.dt > 0)) throw ConfigError("simulation: field 'dt_us' must be positive");
        sc.sim.propagate.trap_radius = get_or<double>(sim, "trap_radius_mm", "simulation", 6.25) * 1e-3;
        sc.sim.propagate.threads = get_or<unsigned>(sim, "threads", "simulation", 1u);
        if (sim.contains("gravity_m_per_s2")) sc.sim.propagate.gravity = vec3(sim, "gravity_m_per_s2", "simulation");
        if (sim.contains("majorana")) {
            const auto& mj = sim.at("majorana");
            sc.sim.propagate.majorana = get_or<bool>(mj, "enabled", "simulation.majorana", false);
            sc.sim.propagate.majorana_floor = get_or<double>(mj, "B_floor_G", "simulation.majorana", 0.5) * units::gauss;
        }
        auto backend = get_or<std::string>(sim, "backend", "simulation", "taylor");
        if (backend == "taylor") sc.sim.backend = FieldBackend::taylor;
        else if (backend == "exact") sc.sim.backend = FieldBackend::exact;
        else throw ConfigError("simulation: field 'backend' must be taylor or exact");
        sc.sim.cut_positions = get_or<std::vector<double>>(sim, "cut_positions_m", "simulation", {});
    }

    if (root.contains("background")) {
        const auto& st = need(root.at("background"), "stages", "background");
        for (std::size_t i = 0; i < st.size(); ++i) {
            std::string where = "background.stages[" + std::to_string(i) + "]";
            BackgroundStage b;
            b.label = get_or<std::string>(st[i], "label", where, "");
            b.s_begin = get<double>(st[i], "s_begin_m", where);
            b.s_end = get<double>(st[i], "s_end_m", where);
            b.lifetime = positive(st[i], "lifetime_s", where);
            sc.background.push_back(b);
        }
    }

    if (root.contains("lossmodel")) {
        const auto& lm = root.at("lossmodel");
        auto& L = sc.loss;
        L.input.trapped_mass = sc.species.mass;
        L.input.trap_depth = get_or<double>(lm, "trap_depth_K", "lossmodel", 1.0) * units::k_B;
        L.input.temperature = get_or<double>(lm, "temperature_K", "lossmodel", 0.07);
        if (!(L.input.trap_depth > 0) || !(L.input.temperature > 0))
            throw ConfigError("lossmodel: trap depth and temperature must be positive");
        std::vector<GasSpecies> db;
        if (lm.contains("species_file")) {
            auto f = std::filesystem::path(get<std::string>(lm, "species_file", "lossmodel"));
            if (f.is_relative()) f = base / f;
            db = parse_species_db(read_json(f));
        }
        if (lm.contains("species")) {
            auto more = parse_species_db(lm);
            db.insert(db.end(), more.begin(), more.end());
        }
        auto label = get<std::string>(lm, "dominant_gas", "lossmodel");
        bool found = false;
        for (const auto& g : db)
            if (g.label == label) {
                L.dominant = g;
                found = true;
            }
        if (!found) throw ConfigError("lossmodel: dominant_gas '" + label + "' is not in the species database");
        L.measured_lifetime = get_or<double>(lm, "measured_lifetime_s", "lossmodel", 0.0);
        if (lm.contains("stages")) {
            const auto& st = lm.at("stages");
            for (std::size_t i = 0; i < st.size(); ++i) {
                std::string where = "lossmodel.stages[" + std::to_string(i) + "]";
                LossConfig::Stage s;
                s.label = get<std::string>(st[i], "label", where);
                s.temperature = positive(st[i], "temperature_K", where);
                if (st[i].contains("lifetime_s")) s.lifetime = positive(st[i], "lifetime_s", where);
                if (st[i].contains("pressure_mbar")) s.pressure = positive(st[i], "pressure_mbar", where);
                L.stages.push_back(s);
            }
        }
    }
    return sc;
}

inline Scenario load_scenario(const std::filesystem::path& p) {
    auto sc = parse_scenario(read_json(p), p.parent_path());
    sc.source = p;
    return sc;
}

}  // namespace conveyor::config
