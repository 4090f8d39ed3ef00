// End-to-end acceptance checks. One PASS/FAIL line per criterion on stdout,
// progress on stderr. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <conveyor/conveyor.hpp>

using namespace conveyor;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

std::string example() { return std::string(CONVEYOR_SOURCE_DIR) + "/config/conveyor.json"; }

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

void progress(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

constexpr double m_rb = 86.909180527 * units::amu;
constexpr double m_he = 4.002602 * units::amu;

GasSpecies helium(double pressure = 1.0) { return {"He4", m_he, 35 * units::c6_atomic, pressure}; }

LossModelInput mk_input(double T = 0.07) {
    LossModelInput in;
    in.trapped_mass = m_rb;
    in.trap_depth = units::k_B;
    in.temperature = T;
    in.gas = {helium()};
    return in;
}

// --------------------------------------------------------------------------

Outcome slater_kirkwood_anchor() {
    Outcome o;
    double gp = gamma_per_pressure(helium(), mk_input());
    o.detail << "Gamma/P = " << gp << " /(mbar s), target 4.93e9 +-5%";
    o.require(rel(gp, 4.93e9) <= 0.05, "outside 5%");
    return o;
}

Outcome pressure_inference() {
    Outcome o;
    double P = pressure_from_lifetime(1.0 / 794, helium(), mk_input());
    o.detail << "P(1/794 s) = " << P << " mbar, target 2.55e-13 +-3%";
    o.require(rel(P, 2.55e-13) <= 0.03, "outside 3%");
    return o;
}

Outcome transport_duration() {
    Outcome o;
    auto prof = build_profile({{0.33, 0.50, 1.0}, {0.30, 0.20, 1.0}, {0.10, 0.007, 1.0}});
    double T = prof.total_duration();
    o.detail << "total " << T << " s, target 18 s +-15%";
    o.require(std::abs(T - 18.0) <= 0.15 * 18.0, "duration");
    for (const auto& s : prof.sections())
        for (double t : {s.start_time, s.start_time + s.duration}) {
            auto k = prof.evaluate(t);
            o.require(std::abs(k.v) < 1e-12 && std::abs(k.a) < 1e-12, "rest at a section boundary");
        }
    return o;
}

Outcome constraint_residuals() {
    Outcome o;
    auto sc = config::load_scenario(example());
    const double A = pipeline::aspect_ratio(sc);
    auto sweep = pipeline::sweep(sc);
    double worst_B = 0, worst_grad = 0, worst_sum = 0, worst_step = 0;
    for (std::size_t i = 0; i < sweep.size(); ++i) {
        const auto& sol = sweep[i];
        auto t = sc.path.target(sol.s, sc.gradient, A);
        auto f = assembly_field(sc.array, sol.currents, t.position);
        worst_B = std::max(worst_B, f.B.norm());
        worst_grad = std::max(worst_grad, std::abs(t.axis.dot(f.J * t.axis) / sc.gradient - 1));
        if (sol.active.size() == 4) {
            double sum = 0;
            for (auto ch : sol.active) sum += sc.array.net_polarity(ch) * sol.currents[static_cast<Eigen::Index>(ch)];
            worst_sum = std::max(worst_sum, std::abs(sum));
        }
        if (i > 0) worst_step = std::max(worst_step, (sol.currents - sweep[i - 1].currents).cwiseAbs().maxCoeff());
    }
    o.detail << sweep.size() << " samples: max|B| " << worst_B << " T, max gradient error " << worst_grad
             << ", max vertical |sum I| " << worst_sum << " A, max step " << worst_step << " A";
    o.require(sweep.size() == 731, "sample count");
    o.require(worst_B < 1e-6, "|B| residual");
    o.require(worst_grad < 1e-3, "gradient");
    o.require(worst_sum < 1e-9, "current sum");
    o.require(worst_step < 0.5, "continuity");
    return o;
}

Outcome integrator_fidelity() {
    Outcome o;
    auto sc = config::load_scenario(example());
    Eigen::VectorXd I = pipeline::mot_currents(sc);

    // static trap, 1e4 particles, 1e6 steps of 1 us
    progress("static trap: 10^4 particles x 10^6 steps");
    CurrentWaveform w;
    w.channels = pipeline::channel_names(sc);
    w.currents.resize(1001, I.size());
    for (int k = 0; k <= 1000; ++k) {
        w.t.push_back(k * 1e-3);
        w.currents.row(k) = I.transpose();
    }
    auto ens = pipeline::initial_ensemble(sc, 10000, sc.sim.temperature, 11);
    PropagateOptions po = sc.sim.propagate;
    po.dt = 1e-6;
    po.trap_radius = 0;
    po.majorana = false;
    po.track_energy = true;
    auto r = propagate(ens, TaylorField(sc.array, w, Vec3::Zero()), sc.species, po);
    o.detail << "static drift " << r.max_energy_drift << " (limit 1e-4), retained " << r.retained_fraction;
    o.require(r.max_energy_drift < 1e-4, "energy drift");
    o.require(r.retained_fraction == 1.0, "static retention");

    // full transport at dt and dt/2
    progress("full transport at dt and dt/2, 2000 particles");
    auto sweep = pipeline::sweep(sc);
    auto interp = std::make_shared<SpatialInterpolant>(pipeline::spatial(sc, sweep));
    auto tl = pipeline::timeline(sc, interp);
    auto ens2 = pipeline::initial_ensemble(sc, 2000, sc.sim.temperature, 12);
    auto a = pipeline::forward_transport(sc, ens2, tl, sc.sim.propagate);
    auto half = sc.sim.propagate;
    half.dt /= 2;
    auto b = pipeline::forward_transport(sc, ens2, tl, half);
    double diff = std::abs(a.retained_fraction - b.retained_fraction);
    o.detail << "; transport retention " << a.retained_fraction << " at dt, " << b.retained_fraction
             << " at dt/2 (diff " << diff << ", limit 0.01)";
    o.require(diff < 0.01, "dt halving");
    return o;
}

Outcome adiabatic_trend() {
    Outcome o;
    auto sc = config::load_scenario(example());
    auto sweep = pipeline::sweep(sc);
    auto interp = std::make_shared<SpatialInterpolant>(pipeline::spatial(sc, sweep));
    auto ens = pipeline::initial_ensemble(sc, 10000, sc.sim.temperature, 2024);

    // forward transport over the whole path
    std::vector<double> fwd;
    for (double speed : {1.0, 0.5, 0.25}) {
        progress("forward transport, 10^4 particles, speed x" + std::to_string(speed));
        fwd.push_back(pipeline::forward_transport(sc, ens, pipeline::timeline(sc, interp, speed), sc.sim.propagate)
                          .retained_fraction);
    }
    o.detail << "forward retention at speed 1, 1/2, 1/4: " << fwd[0] << ", " << fwd[1] << ", " << fwd[2];
    o.require(fwd[0] <= fwd[1] && fwd[1] <= fwd[2], "forward trend");

    // round trip to the middle of section 1, where speed matters most
    std::vector<double> rt;
    for (double speed : {1.0, 0.5, 0.25}) {
        progress("round trip to 0.165 m, 10^4 particles, speed x" + std::to_string(speed));
        auto tl = pipeline::timeline(sc, interp, speed);
        rt.push_back(pipeline::propagate_run(sc, ens, pipeline::round_trip(sc, tl, 0.165), sc.sim.propagate)
                         .retained_fraction);
    }
    o.detail << "; round trip to 0.165 m: " << rt[0] << ", " << rt[1] << ", " << rt[2];
    o.require(rt[0] <= rt[1] && rt[1] <= rt[2], "round-trip trend");

    // location of the efficiency dip inside section 1
    progress("efficiency dip scan over section 1, 2000 particles");
    auto tl = pipeline::timeline(sc, interp);
    const auto& s1 = tl.profile().sections().front();
    const double s_acc = tl.profile().evaluate(s1.v_peak / s1.a_peak).s;  // peak acceleration
    auto small = pipeline::initial_ensemble(sc, 2000, sc.sim.temperature, 2025);
    std::vector<double> cuts;
    for (double s = 0.0125; s < 0.33; s += 0.0125) cuts.push_back(s);
    auto curve = pipeline::efficiency(sc, small, tl, cuts, sc.sim.propagate);
    auto dip = std::min_element(curve.begin(), curve.end(), [](auto& x, auto& y) { return x.epsilon < y.epsilon; });
    double eps_at_acc = 0, eps_at_10 = 0;
    for (const auto& p : curve) {
        if (std::abs(p.s_cut - 0.025) < 1e-9) eps_at_acc = p.epsilon;
        if (std::abs(p.s_cut - 0.1) < 1e-9) eps_at_10 = p.epsilon;
    }
    o.detail << "; section-1 peak acceleration at " << s_acc << " m, epsilon minimum " << dip->epsilon << " at "
             << dip->s_cut << " m (eps(0.025) " << eps_at_acc << ", eps(0.10) " << eps_at_10 << ")";
    o.require(std::abs(dip->s_cut - s_acc) <= 0.02, "dip not at the peak-acceleration point");
    return o;
}

Outcome loss_limits() {
    Outcome o;
    auto f = amplitude::isotropic(2e-18);
    double worst = 0;
    for (double th = 0; th <= units::pi; th += 0.01)
        worst = std::max(worst, rel(sigma_loss(f, 1e10, th) + 1e-300, 2 * units::pi * 2e-18 * (1 + std::cos(th)) + 1e-300));
    o.detail << "isotropic sigma max rel err " << worst;
    o.require(worst < 1e-9, "isotropic sigma");

    double s0 = 3e-18, T = 4.0;
    double avg = maxwell_average([&](double) { return s0; }, m_he, T);
    double e = rel(avg, s0 * std::sqrt(8 * units::k_B * T / (units::pi * m_he)));
    o.detail << ", constant-sigma average rel err " << e;
    o.require(e < 1e-6, "mean speed moment");

    double mu = reduced_mass(m_rb, m_he), v = 30, U1 = mu * mu * v * v / m_rb;
    bool clamps = theta_min(2 * U1, mu, m_rb, v) == units::pi && theta_min(3 * U1, mu, m_rb, v) == units::pi &&
                  theta_min(0.0, mu, m_rb, v) == 0.0 && theta_min(U1, mu, m_rb, v) == std::acos(0.0) &&
                  sigma_loss(f, 1e10, theta_min(3 * U1, mu, m_rb, v)) == 0.0;
    o.detail << ", theta_min clamps " << (clamps ? "exact" : "wrong");
    o.require(clamps, "theta_min clamps");
    return o;
}

Outcome oracle_equivalence() {
    Outcome o;
    auto sc = config::load_scenario(example());
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<std::size_t> pick(0, sc.array.coils().size() - 1);
    std::uniform_real_distribution<double> u(-1, 1);
    double worst = 0;
    int n = 0;
    while (n < 1000) {
        const auto& c = sc.array.coils()[pick(rng)];
        Vec3 p = c.center + 2 * c.radius * Vec3(u(rng), u(rng), u(rng));
        // stay clear of the winding and off the axis
        Vec3 r = p - c.center;
        double z = r.dot(c.axis), rho = (r - z * c.axis).norm();
        if (std::hypot(rho - c.radius, z) < 0.05 * c.radius || rho < 1e-3 * c.radius) continue;
        Vec3 B = loop_field(c, 1.0, p);
        Vec3 e1 = c.axis.unitOrthogonal(), e2 = c.axis.cross(e1);
        const int m = 100000;
        Vec3 ref = Vec3::Zero();
        for (int k = 0; k < m; ++k) {
            double phi = (k + 0.5) * 2 * units::pi / m;
            Vec3 pos = c.center + c.radius * (std::cos(phi) * e1 + std::sin(phi) * e2);
            Vec3 dl = c.radius * 2 * units::pi / m * (-std::sin(phi) * e1 + std::cos(phi) * e2);
            Vec3 d = p - pos;
            double dn = d.norm();
            ref += dl.cross(d) / (dn * dn * dn);
        }
        ref *= units::mu0 / (4 * units::pi) * c.windings * c.polarity;
        worst = std::max(worst, (B - ref).norm() / ref.norm());
        ++n;
    }
    o.detail << "loop field vs Biot-Savart on 1000 points: max rel err " << worst;
    o.require(worst < 1e-9, "Biot-Savart");

    // velocity average vs a 1e6-point midpoint rule, helium at 4 K
    auto in = mk_input(4.0);
    const double c = 1e-18, mu = reduced_mass(m_rb, m_he);
    double worst_avg = 0;
    for (int model = 0; model < 2; ++model) {
        AmplitudeModel f = model == 0 ? amplitude::isotropic(c) : amplitude::cos_squared(c);
        auto sigma = [&](double v) {
            double x = 1 - m_rb * in.trap_depth / (mu * mu * v * v);
            if (x <= -1) return 0.0;
            x = std::min(x, 1.0);
            return model == 0 ? 2 * units::pi * c * (1 + x) : 2 * units::pi * c / 3 * (1 + x * x * x);
        };
        const double kT = units::k_B * in.temperature;
        const double norm = std::pow(m_he / (2 * units::pi * kT), 1.5) * 4 * units::pi;
        const double vmax = 40 * std::sqrt(2 * kT / m_he);
        const int N = 1000000;
        const double h = vmax / N;
        double oracle = 0;
        for (int i = 0; i < N; ++i) {
            double v = (i + 0.5) * h;
            oracle += norm * sigma(v) * v * v * v * std::exp(-m_he * v * v / (2 * kT));
        }
        oracle *= h;
        worst_avg = std::max(worst_avg, rel(velocity_averaged_loss(f, in, helium()), oracle));
    }
    o.detail << ", <sigma v> vs midpoint oracle max rel err " << worst_avg;
    o.require(worst_avg < 1e-5, "velocity average");
    return o;
}

Outcome lifetime_fitting() {
    Outcome o;
    double worst_exact = 0, worst_noisy = 0;
    for (double gamma : {1.0 / 27, 1.0 / 794}) {
        std::vector<std::pair<double, double>> d;
        double span = 3 / gamma;
        for (int i = 0; i < 20; ++i) d.emplace_back(span * i / 19, 1e5 * std::exp(-gamma * span * i / 19));
        worst_exact = std::max(worst_exact, rel(lifetime_fit(d).gamma, gamma));
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            std::mt19937_64 rng(seed);
            std::normal_distribution<double> noise(0, 0.05);
            std::vector<std::pair<double, double>> nd;
            for (int i = 0; i < 20; ++i) {
                double t = span * i / 19;
                nd.emplace_back(t, 1e5 * std::exp(-gamma * t) * (1 + noise(rng)));
            }
            worst_noisy = std::max(worst_noisy, rel(lifetime_fit(nd).gamma, gamma));
        }
    }
    o.detail << "noiseless max rel err " << worst_exact << " (limit 1e-10), 5% noise worst of 100 seeds " << worst_noisy
             << " (limit 0.1)";
    o.require(worst_exact < 1e-10, "noiseless");
    o.require(worst_noisy < 0.1, "noisy");
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"Slater-Kirkwood anchor", slater_kirkwood_anchor},
        {"pressure inference", pressure_inference},
        {"transport duration", transport_duration},
        {"constraint residuals", constraint_residuals},
        {"integrator fidelity", integrator_fidelity},
        {"adiabatic trend", adiabatic_trend},
        {"loss-model analytic limits", loss_limits},
        {"oracle equivalence", oracle_equivalence},
        {"lifetime fitting", lifetime_fitting},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        std::cerr << "criterion " << id << ": " << criteria[i].first << std::endl;
        auto t0 = std::chrono::steady_clock::now();
        Outcome r;
        try {
            r = criteria[i].second();
        } catch (const std::exception& e) {
            r.pass = false;
            r.detail << "exception: " << e.what();
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("criterion %d %-28s %s  %s (%.1f s)\n", id, criteria[i].first.c_str(), r.pass ? "PASS" : "FAIL",
                    r.detail.str().c_str(), secs);
        std::fflush(stdout);
        if (!r.pass) ++failed;
    }
    return failed ? 1 : 0;
}
