#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <conveyor/conveyor.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace conveyor;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string format = "csv";
};

// Where a command's text goes: stdout, or <out>/<name>.<ext> when --out is set.
class Sink {
public:
    Sink(const Options& o, io::Format f) : dir_(o.out), fmt_(f) {
        if (!dir_.empty()) fs::create_directories(dir_);
    }

    io::Format format() const { return fmt_; }
    const char* ext() const { return fmt_ == io::Format::csv ? ".csv" : ".json"; }

    void emit(const std::string& name, const std::function<void(std::ostream&)>& write, const char* ext = nullptr) const {
        if (dir_.empty()) {
            write(std::cout);
            return;
        }
        fs::path p = fs::path(dir_) / (name + (ext ? ext : this->ext()));
        std::ofstream os(p);
        if (!os) throw Error("cannot open " + p.string() + " for writing");
        write(os);
        if (!os) throw Error("write to " + p.string() + " failed");
        std::cerr << "wrote " << p.string() << "\n";
    }

private:
    std::string dir_;
    io::Format fmt_;
};

config::Scenario scenario(const Options& o) {
    if (o.config.empty()) throw ConfigError("--config is required for this command");
    auto sc = config::load_scenario(o.config);
    double depth = sc.loss.input.trap_depth / units::k_B;
    if (!sc.loss.dominant.label.empty() && (depth < 0.5 || depth > 2.0))
        std::cerr << "warning: trap depth " << depth << " K is outside the usual 0.5 to 2 K range\n";
    return sc;
}

std::uint64_t need_seed(const Options& o) {
    if (!o.seed) throw ConfigError("--seed is required for simulation commands");
    return *o.seed;
}

// Runs one pipeline stage and prefixes its diagnostics with the stage name,
// keeping configuration errors distinguishable from runtime failures.
template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError& e) {
        throw ConfigError(name + ": " + e.what());
    } catch (const std::exception& e) {
        throw Error(name + ": " + e.what());
    }
}

Vec3 parse_point(const std::string& s) {
    auto cells = io::split(s);
    if (cells.size() != 3) throw ConfigError("--point needs three comma-separated coordinates in m");
    Vec3 p;
    for (int i = 0; i < 3; ++i) p[i] = io::parse_double(cells[static_cast<std::size_t>(i)], "--point");
    return p;
}

Eigen::VectorXd parse_currents(const config::Scenario& sc, const std::vector<std::string>& specs) {
    if (specs.empty()) return pipeline::mot_currents(sc);
    Eigen::VectorXd I = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sc.array.channel_count()));
    for (const auto& s : specs) {
        auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--current expects CHANNEL=AMPS, got '" + s + "'");
        std::size_t ch;
        try {
            ch = sc.array.channel_index(s.substr(0, eq));
        } catch (const Error&) {
            throw ConfigError("--current: unknown channel '" + s.substr(0, eq) + "'");
        }
        I[static_cast<Eigen::Index>(ch)] = io::parse_double(s.substr(eq + 1), "--current");
    }
    return I;
}

struct Prepared {
    std::vector<CurrentSolution> sweep;
    SpatialProfile spatial;
    std::shared_ptr<const SpatialInterpolant> interp;
};

Prepared prepare(const config::Scenario& sc) {
    Prepared p;
    p.sweep = stage("currents", [&] { return pipeline::sweep(sc); });
    p.spatial = pipeline::spatial(sc, p.sweep);
    p.interp = std::make_shared<const SpatialInterpolant>(p.spatial);
    return p;
}

json result_json(const TransportResult& r) {
    json j{{"initial", r.initial},
           {"survivors", r.survivors},
           {"retained_fraction", r.retained_fraction},
           {"background_survival", r.background_survival},
           {"final_temperature_proxy_K", r.final_temperature_proxy},
           {"losses", r.loss_events.size()}};
    if (!std::isnan(r.epsilon)) j["epsilon"] = r.epsilon;
    return j;
}

void write_efficiency_csv(std::ostream& os, const std::vector<EfficiencyPoint>& pts) {
    os << "s_m,epsilon,retained_fraction,background_survival\n";
    for (const auto& p : pts)
        os << io::fmt(p.s_cut) << ',' << io::fmt(p.epsilon) << ',' << io::fmt(p.retained_fraction) << ','
           << io::fmt(p.background_survival) << "\n";
}

json efficiency_json(const std::vector<EfficiencyPoint>& pts) {
    auto a = json::array();
    for (const auto& p : pts)
        a.push_back({{"s_m", p.s_cut},
                     {"epsilon", p.epsilon},
                     {"retained_fraction", p.retained_fraction},
                     {"background_survival", p.background_survival}});
    return a;
}

// ---------------------------------------------------------------------------

void cmd_field(const Options& o, const std::string& point, const std::vector<std::string>& currents) {
    auto sc = scenario(o);
    Vec3 x = point.empty() ? Vec3::Zero() : parse_point(point);
    auto I = parse_currents(sc, currents);
    auto f = assembly_field(sc.array, I, x);
    Sink sink(o, io::parse_format(o.format));
    const Mat3 G = f.J / units::gauss_per_cm;
    const Vec3 B = f.B / units::gauss;
    sink.emit("field", [&](std::ostream& os) {
        if (sink.format() == io::Format::json) {
            json j;
            j["point_m"] = {x.x(), x.y(), x.z()};
            j["B_G"] = {B.x(), B.y(), B.z()};
            j["abs_B_G"] = B.norm();
            auto rows = json::array();
            for (int r = 0; r < 3; ++r) rows.push_back({G(r, 0), G(r, 1), G(r, 2)});
            j["gradient_G_per_cm"] = rows;
            os << j.dump(2) << "\n";
            return;
        }
        os << "x_m,y_m,z_m,Bx_G,By_G,Bz_G,abs_B_G";
        const char* ax = "xyz";
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) os << ",dB" << ax[r] << "_d" << ax[c] << "_G_per_cm";
        os << "\n" << io::fmt(x.x()) << ',' << io::fmt(x.y()) << ',' << io::fmt(x.z());
        for (int i = 0; i < 3; ++i) os << ',' << io::fmt(B[i]);
        os << ',' << io::fmt(B.norm());
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) os << ',' << io::fmt(G(r, c));
        os << "\n";
    });
}

void cmd_currents(const Options& o) {
    auto sc = scenario(o);
    auto sw = stage("currents", [&] { return pipeline::sweep(sc); });
    auto sp = pipeline::spatial(sc, sw);
    Sink sink(o, io::parse_format(o.format));
    sink.emit("currents", [&](std::ostream& os) {
        if (sink.format() == io::Format::csv) {
            io::write_spatial_csv(os, sp);
        } else {
            json j = io::spatial_to_json(sp);
            j["summary"] = pipeline::sweep_summary(sc, sw);
            os << j.dump() << "\n";
        }
    });
    std::cerr << pipeline::sweep_summary(sc, sw).dump() << "\n";
}

void cmd_profile(const Options& o, double speed, double rate) {
    auto sc = scenario(o);
    if (!(speed > 0)) throw ConfigError("--speed must be positive");
    auto prof = stage("profile", [&] { return build_profile(pipeline::scaled_sections(sc, speed)); });
    if (!(rate > 0)) rate = sc.sample_rate;
    Sink sink(o, io::parse_format(o.format));
    sink.emit("profile", [&](std::ostream& os) {
        if (sink.format() == io::Format::json) {
            os << pipeline::profile_summary(prof).dump(2) << "\n";
            return;
        }
        os << "t_s,s_m,v_m_per_s,a_m_per_s2,j_m_per_s3\n";
        auto n = static_cast<std::size_t>(std::ceil(prof.total_duration() * rate)) + 1;
        for (std::size_t k = 0; k < n; ++k) {
            double t = std::min(static_cast<double>(k) / rate, prof.total_duration());
            auto q = prof.evaluate(t);
            os << io::fmt(static_cast<double>(k) / rate) << ',' << io::fmt(q.s) << ',' << io::fmt(q.v) << ','
               << io::fmt(q.a) << ',' << io::fmt(q.j) << "\n";
        }
    });
}

void cmd_waveform(const Options& o, double speed, std::optional<double> cut, bool no_ramp) {
    auto sc = scenario(o);
    if (!(speed > 0)) throw ConfigError("--speed must be positive");
    auto prep = prepare(sc);
    auto tl = pipeline::timeline(sc, prep.interp, speed, !no_ramp);
    auto run = stage("waveform", [&] { return cut ? pipeline::round_trip(sc, tl, *cut) : pipeline::sample(sc, tl); });
    Sink sink(o, io::parse_format(o.format));
    sink.emit("waveform", [&](std::ostream& os) {
        if (sink.format() == io::Format::csv) io::write_waveform_csv(os, run.waveform);
        else os << io::waveform_to_json(run.waveform).dump() << "\n";
    });
}

void cmd_simulate(const Options& o, double speed, std::optional<double> cut, bool efficiency,
                  std::optional<std::size_t> particles, std::optional<unsigned> threads) {
    const auto seed = need_seed(o);
    auto sc = scenario(o);
    if (!(speed > 0)) throw ConfigError("--speed must be positive");
    if (particles) sc.sim.particles = *particles;
    if (threads) sc.sim.propagate.threads = *threads;
    auto prep = prepare(sc);
    auto tl = pipeline::timeline(sc, prep.interp, speed);
    auto ens = stage("sample", [&] { return pipeline::initial_ensemble(sc, sc.sim.particles, sc.sim.temperature, seed); });
    Sink sink(o, io::parse_format(o.format));

    if (efficiency) {
        if (sc.sim.cut_positions.empty()) throw ConfigError("simulation: field 'cut_positions_m' is needed for --efficiency");
        auto pts = stage("simulate", [&] { return pipeline::efficiency(sc, ens, tl, sc.sim.cut_positions, sc.sim.propagate); });
        sink.emit("efficiency", [&](std::ostream& os) {
            if (sink.format() == io::Format::csv) write_efficiency_csv(os, pts);
            else os << json{{"seed", seed}, {"efficiency", efficiency_json(pts)}}.dump(2) << "\n";
        });
        return;
    }

    TransportResult r = stage("simulate", [&] {
        if (!cut) return pipeline::forward_transport(sc, ens, tl, sc.sim.propagate);
        auto run = pipeline::round_trip(sc, tl, *cut);
        auto res = pipeline::propagate_run(sc, ens, run, sc.sim.propagate);
        res.background_survival = background_survival(run.waveform.t, run.s, sc.background);
        res.epsilon = std::sqrt(res.retained_fraction * res.background_survival);
        return res;
    });
    json j = result_json(r);
    j["seed"] = seed;
    j["speed_scale"] = speed;
    if (cut) j["s_cut_m"] = *cut;
    sink.emit("simulate", [&](std::ostream& os) {
        if (sink.format() == io::Format::json) {
            os << j.dump(2) << "\n";
            return;
        }
        os << "key,value\n";
        for (auto& [k, v] : j.items()) os << k << ',' << v.dump() << "\n";
    });
}

void cmd_lifetime(const Options& o, const std::string& data) {
    if (data.empty()) throw ConfigError("--data is required (two-column CSV t_s,N)");
    std::ifstream is(data);
    if (!is) throw ConfigError("cannot open decay data file " + data);
    auto fit = lifetime_fit(io::read_decay_csv(is));
    json j{{"gamma_per_s", fit.gamma}, {"lifetime_s", 1.0 / fit.gamma}, {"amplitude", fit.amplitude}};
    if (!o.config.empty()) {
        auto sc = scenario(o);
        if (!sc.loss.dominant.label.empty() && fit.gamma > 0) {
            j["dominant_gas"] = sc.loss.dominant.label;
            j["inferred_pressure_mbar"] = pressure_from_lifetime(fit.gamma, sc.loss.dominant, sc.loss.input);
        }
    }
    Sink sink(o, io::parse_format(o.format));
    sink.emit("lifetime", [&](std::ostream& os) {
        if (sink.format() == io::Format::json) {
            os << j.dump(2) << "\n";
            return;
        }
        os << "key,value\n";
        for (auto& [k, v] : j.items()) os << k << ',' << (v.is_string() ? v.get<std::string>() : v.dump()) << "\n";
    });
}

void cmd_pressure(const Options& o, std::optional<double> lifetime, std::optional<double> gamma,
                  std::optional<double> temperature, std::optional<double> depth) {
    auto sc = scenario(o);
    auto& L = sc.loss;
    if (L.dominant.label.empty()) throw ConfigError("config: missing field 'lossmodel'");
    if (temperature) L.input.temperature = *temperature;
    if (depth) L.input.trap_depth = *depth * units::k_B;
    if (!(L.input.temperature > 0) || !(L.input.trap_depth > 0)) throw ConfigError("temperature and trap depth must be positive");
    double g = 0;
    if (gamma) g = *gamma;
    else if (lifetime) g = 1.0 / *lifetime;
    else if (L.measured_lifetime > 0) g = 1.0 / L.measured_lifetime;
    else throw ConfigError("give --lifetime or --gamma, or set lossmodel.measured_lifetime_s");
    if (!(g > 0)) throw ConfigError("loss rate must be positive");
    json j{{"dominant_gas", L.dominant.label},
           {"temperature_K", L.input.temperature},
           {"trap_depth_K", L.input.trap_depth / units::k_B},
           {"gamma_per_s", g},
           {"gamma_per_pressure_per_mbar_s", gamma_per_pressure(L.dominant, L.input)},
           {"pressure_mbar", pressure_from_lifetime(g, L.dominant, L.input)}};
    Sink sink(o, io::parse_format(o.format));
    sink.emit("pressure", [&](std::ostream& os) {
        if (sink.format() == io::Format::json) {
            os << j.dump(2) << "\n";
            return;
        }
        os << "key,value\n";
        for (auto& [k, v] : j.items()) os << k << ',' << (v.is_string() ? v.get<std::string>() : v.dump()) << "\n";
    });
}

void cmd_pipeline(const Options& o) {
    const auto seed = need_seed(o);
    auto sc = scenario(o);
    const auto fmt = io::parse_format(o.format);
    Options oo = o;
    if (oo.out.empty()) oo.out = ".";
    Sink sink(oo, fmt);

    auto prep = prepare(sc);
    auto tl = stage("profile", [&] { return pipeline::timeline(sc, prep.interp); });
    auto run = stage("waveform", [&] { return pipeline::sample(sc, tl); });
    sink.emit("waveform", [&](std::ostream& os) {
        if (fmt == io::Format::csv) io::write_waveform_csv(os, run.waveform);
        else os << io::waveform_to_json(run.waveform).dump() << "\n";
    });

    auto ens = stage("sample", [&] { return pipeline::initial_ensemble(sc, sc.sim.particles, sc.sim.temperature, seed); });
    auto fwd = stage("simulate", [&] {
        auto r = pipeline::propagate_run(sc, ens, run, sc.sim.propagate);
        r.background_survival = background_survival(run.waveform.t, run.s, sc.background);
        return r;
    });
    std::vector<EfficiencyPoint> eff;
    if (!sc.sim.cut_positions.empty())
        eff = stage("efficiency", [&] { return pipeline::efficiency(sc, ens, tl, sc.sim.cut_positions, sc.sim.propagate); });
    sink.emit("efficiency", [&](std::ostream& os) {
        if (fmt == io::Format::csv) write_efficiency_csv(os, eff);
        else os << efficiency_json(eff).dump(2) << "\n";
    });

    json summary;
    summary["seed"] = seed;
    summary["transport"] = pipeline::profile_summary(tl.profile());
    summary["transport"]["ramp_s"] = tl.ramp_duration();
    summary["transport"]["waveform_samples"] = run.waveform.size();
    summary["currents"] = pipeline::sweep_summary(sc, prep.sweep);
    summary["simulation"] = result_json(fwd);
    summary["simulation"]["particles"] = sc.sim.particles;
    summary["simulation"]["temperature_K"] = sc.sim.temperature;
    summary["efficiency"] = efficiency_json(eff);
    summary["lossmodel"] = stage("lossmodel", [&] { return pipeline::loss_summary(sc); });
    sink.emit("summary", [&](std::ostream& os) { os << summary.dump(2) << "\n"; }, ".json");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Magnetic conveyor transport: coil currents, motion profiles, cloud simulation and loss model"};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_option("--config", o.config, "Scenario JSON file");
    app.add_option("--seed", o.seed, "Master seed (required for simulate and pipeline)");
    app.add_option("--out", o.out, "Output directory (default: stdout, or . for pipeline)");
    app.add_option("--format", o.format, "Output format")->check(CLI::IsMember({"csv", "json"}));

    std::string point;
    std::vector<std::string> currents;
    auto* field = app.add_subcommand("field", "Field and gradient at a point");
    field->add_option("--point", point, "x,y,z in m (default origin)");
    field->add_option("--current", currents, "CHANNEL=AMPS, repeatable (default: MOT currents)");

    auto* cur = app.add_subcommand("currents", "Solve coil currents along the path");

    double speed = 1.0, rate = 0.0;
    auto* prof = app.add_subcommand("profile", "Motion profile");
    prof->add_option("--speed", speed, "Speed scale applied to every section");
    prof->add_option("--rate", rate, "Sample rate in Hz (default: transport.sample_rate_Hz)");

    std::optional<double> cut;
    bool no_ramp = false;
    auto* wave = app.add_subcommand("waveform", "Time-domain coil currents");
    wave->add_option("--speed", speed, "Speed scale applied to every section");
    wave->add_option("--cut", cut, "Round trip to this path position in m");
    wave->add_flag("--no-ramp", no_ramp, "Omit the MOT hand-over ramp");

    bool efficiency = false;
    std::optional<std::size_t> particles;
    std::optional<unsigned> threads;
    auto* sim = app.add_subcommand("simulate", "Propagate a thermal cloud through the transport");
    sim->add_option("--speed", speed, "Speed scale applied to every section");
    sim->add_option("--cut", cut, "Round trip to this path position in m");
    sim->add_flag("--efficiency", efficiency, "Round trips to every configured cut position");
    sim->add_option("--particles", particles, "Override simulation.particles");
    sim->add_option("--threads", threads, "Worker threads");

    std::string data;
    auto* life = app.add_subcommand("lifetime", "Fit an exponential decay to (t_s, N) data");
    life->add_option("--data", data, "Two-column CSV");

    std::optional<double> lifetime, gamma, temperature, depth;
    auto* pres = app.add_subcommand("pressure", "Background pressure from a trap lifetime");
    pres->add_option("--lifetime", lifetime, "Lifetime in s");
    pres->add_option("--gamma", gamma, "Loss rate in 1/s");
    pres->add_option("--temperature", temperature, "Background gas temperature in K");
    pres->add_option("--trap-depth", depth, "Trap depth in K");

    auto* pipe = app.add_subcommand("pipeline", "Currents, waveform, simulation and loss summary in one run");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*field) cmd_field(o, point, currents);
        else if (*cur) cmd_currents(o);
        else if (*prof) cmd_profile(o, speed, rate);
        else if (*wave) cmd_waveform(o, speed, cut, no_ramp);
        else if (*sim) cmd_simulate(o, speed, cut, efficiency, particles, threads);
        else if (*life) cmd_lifetime(o, data);
        else if (*pres) cmd_pressure(o, lifetime, gamma, temperature, depth);
        else if (*pipe) cmd_pipeline(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
