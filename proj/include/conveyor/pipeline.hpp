#pragma once

#include <memory>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "cloudsim.hpp"
#include "config.hpp"
#include "lossmodel.hpp"
#include "motionplan.hpp"
#include "trapsolve.hpp"

// Glue between the configuration and the numerical modules. Everything here is
// a pure function of the scenario (and the seed where one is taken).
namespace conveyor::pipeline {

using config::Scenario;

inline Eigen::VectorXd mot_currents(const Scenario& sc) {
    Eigen::VectorXd I = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sc.array.channel_count()));
    I[static_cast<Eigen::Index>(sc.array.channel_index(sc.mot.channel))] = sc.mot.current;
    return I;
}

// A is either configured or read off the initial quadrupole and then held.
inline double aspect_ratio(const Scenario& sc) {
    if (sc.aspect_ratio) return *sc.aspect_ratio;
    const auto& leg = sc.path.legs().front();
    return aspect_ratio_at(sc.array, mot_currents(sc), sc.path.position(0.0), leg.axis, leg.direction);
}

inline SweepOptions sweep_options(const Scenario& sc) {
    SweepOptions o;
    o.gradient = sc.gradient;
    o.aspect_ratio = aspect_ratio(sc);
    o.max_step_current = sc.max_step_current;
    return o;
}

inline std::vector<double> samples(const Scenario& sc, bool reversed = false) {
    auto s = path_samples(sc.path.length(), sc.path_step);
    if (reversed) std::reverse(s.begin(), s.end());
    return s;
}

inline std::vector<CurrentSolution> sweep(const Scenario& sc, bool reversed = false) {
    return sweep_path(sc.array, sc.path, samples(sc, reversed), sc.schedule, sweep_options(sc));
}

inline SpatialProfile spatial(const Scenario& sc, const std::vector<CurrentSolution>& sw) {
    return spatial_profile(sc.array, sw, sc.path, sc.schedule);
}

// Uniform slow-down by f < 1: v scales by f and a by f^2, so the whole
// profile is the original one played 1/f times slower.
inline std::vector<SectionSpec> scaled_sections(const Scenario& sc, double f) {
    auto out = sc.sections;
    for (auto& s : out) {
        s.vmax *= f;
        s.amax *= f * f;
    }
    return out;
}

inline TransportTimeline timeline(const Scenario& sc, std::shared_ptr<const SpatialInterpolant> interp,
                                  double speed = 1.0, bool with_ramp = true) {
    std::optional<Eigen::VectorXd> from;
    if (with_ramp && sc.mot.ramp > 0) from = mot_currents(sc);
    return TransportTimeline(build_profile(scaled_sections(sc, speed)), std::move(interp), from, sc.mot.ramp);
}

inline std::vector<std::string> channel_names(const Scenario& sc) {
    std::vector<std::string> n;
    for (const auto& c : sc.array.channels()) n.push_back(c.name);
    return n;
}

inline WaveformLimits limits(const Scenario& sc) {
    WaveformLimits l;
    for (std::size_t c = 0; c < sc.array.channel_count(); ++c) l.max_current.push_back(sc.array.channel_limit(c));
    l.max_slew = sc.max_slew;
    return l;
}

inline SampledTransport sample(const Scenario& sc, const TransportTimeline& tl, std::optional<double> t_cut = {}) {
    return sample_timeline(tl, channel_names(sc), sc.sample_rate, t_cut, limits(sc));
}

// Forward to s_cut and straight back along the same schedule.
inline SampledTransport round_trip(const Scenario& sc, const TransportTimeline& tl, double s_cut) {
    double t_cut = tl.ramp_duration() + tl.profile().time_at(s_cut);
    return sample(sc, tl, t_cut);
}

inline CloudEnsemble initial_ensemble(const Scenario& sc, std::size_t n, double temperature, std::uint64_t seed) {
    SampleOptions o;
    o.guess = sc.path.position(0.0);
    return sample_ensemble(sc.species, sc.array, mot_currents(sc), n, temperature, seed, o);
}

inline TransportResult propagate_run(const Scenario& sc, const CloudEnsemble& ens, const SampledTransport& run,
                                     const PropagateOptions& o) {
    Vec3 guess = sc.path.position(run.s.empty() ? 0.0 : run.s.front());
    if (sc.sim.backend == FieldBackend::exact) return propagate(ens, ExactField(sc.array, run.waveform, guess), sc.species, o);
    return propagate(ens, TaylorField(sc.array, run.waveform, guess), sc.species, o);
}

inline TransportResult forward_transport(const Scenario& sc, const CloudEnsemble& ens, const TransportTimeline& tl,
                                         const PropagateOptions& o) {
    auto run = sample(sc, tl);
    auto r = propagate_run(sc, ens, run, o);
    r.background_survival = background_survival(run.waveform.t, run.s, sc.background);
    return r;
}

inline std::vector<EfficiencyPoint> efficiency(const Scenario& sc, const CloudEnsemble& ens, const TransportTimeline& tl,
                                               const std::vector<double>& cuts, const PropagateOptions& o) {
    auto factory = [&](double s) { return round_trip(sc, tl, s); };
    return efficiency_curve(ens, sc.array, factory, cuts, sc.species, sc.background, o, sc.sim.backend,
                            sc.path.position(0.0));
}

// ---------------------------------------------------------------------------
// JSON summaries

inline nlohmann::json profile_summary(const MotionProfile& p) {
    nlohmann::json j;
    j["total_duration_s"] = p.total_duration();
    j["total_length_m"] = p.total_length();
    auto arr = nlohmann::json::array();
    for (const auto& s : p.sections()) {
        arr.push_back({{"length_m", s.spec.length},
                       {"vmax_m_per_s", s.spec.vmax},
                       {"start_time_s", s.start_time},
                       {"duration_s", s.duration},
                       {"peak_velocity_m_per_s", s.v_peak},
                       {"peak_acceleration_m_per_s2", s.a_peak},
                       {"peak_jerk_m_per_s3", s.jerk}});
    }
    j["sections"] = arr;
    return j;
}

inline nlohmann::json loss_summary(const Scenario& sc) {
    nlohmann::json j;
    const auto& L = sc.loss;
    if (L.dominant.label.empty()) return j;
    j["dominant_gas"] = L.dominant.label;
    j["trap_depth_K"] = L.input.trap_depth / units::k_B;
    j["temperature_K"] = L.input.temperature;
    j["gamma_per_pressure_per_mbar_s"] = gamma_per_pressure(L.dominant, L.input);
    if (L.measured_lifetime > 0) {
        j["measured_lifetime_s"] = L.measured_lifetime;
        j["inferred_pressure_mbar"] = pressure_from_lifetime(1.0 / L.measured_lifetime, L.dominant, L.input);
    }
    auto stages = nlohmann::json::array();
    for (const auto& st : L.stages) {
        auto in = L.input;
        in.temperature = st.temperature;
        double gp = gamma_per_pressure(L.dominant, in);
        nlohmann::json e{{"label", st.label}, {"temperature_K", st.temperature}, {"gamma_per_pressure_per_mbar_s", gp}};
        if (st.lifetime) {
            e["lifetime_s"] = *st.lifetime;
            e["inferred_pressure_mbar"] = 1.0 / *st.lifetime / gp;
        }
        if (st.pressure) {
            e["pressure_mbar"] = *st.pressure;
            e["predicted_lifetime_s"] = 1.0 / (gp * *st.pressure);
        }
        stages.push_back(e);
    }
    j["stages"] = stages;
    return j;
}

inline nlohmann::json sweep_summary(const Scenario& sc, const std::vector<CurrentSolution>& sw) {
    double worst_res = 0, worst_step = 0;
    std::vector<double> peak(sc.array.channel_count(), 0.0);
    for (std::size_t i = 0; i < sw.size(); ++i) {
        for (double r : sw[i].residuals) worst_res = std::max(worst_res, r);
        for (std::size_t c = 0; c < peak.size(); ++c)
            peak[c] = std::max(peak[c], std::abs(sw[i].currents[static_cast<Eigen::Index>(c)]));
        if (i) worst_step = std::max(worst_step, (sw[i].currents - sw[i - 1].currents).cwiseAbs().maxCoeff());
    }
    nlohmann::json pk;
    for (std::size_t c = 0; c < peak.size(); ++c) pk[sc.array.channels()[c].name] = peak[c];
    return {{"samples", sw.size()},
            {"max_residual", worst_res},
            {"max_step_current_A", worst_step},
            {"peak_current_A", pk},
            {"aspect_ratio", aspect_ratio(sc)}};
}

}  // namespace conveyor::pipeline
