#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "errors.hpp"
#include "units.hpp"

namespace conveyor {

struct GasSpecies {
    std::string label;
    double mass = 0.0;              // kg
    double c6 = 0.0;                // J m^6
    double partial_pressure = 0.0;  // mbar
};

struct LossModelInput {
    double trapped_mass = 86.909180527 * units::amu;  // kg
    double trap_depth = 1.0 * units::k_B;             // J
    double temperature = 0.07;                        // K
    std::vector<GasSpecies> gas;
};

// |f(k, theta)|^2 in m^2/sr as a function of wavenumber (1/m) and angle.
using AmplitudeModel = std::function<double(double k, double theta)>;

namespace amplitude {

    inline AmplitudeModel isotropic(double c) {
        return [c](double, double) { return c; };
    }

    inline AmplitudeModel cos_squared(double c) {
        return [c](double, double th) { return c * std::cos(th) * std::cos(th); };
    }

    // Small-angle diffraction peak for a -C6/r^6 potential. The total cross
    // section is the semiclassical 8.083 (C6 / hbar v)^(2/5); the peak is a
    // Gaussian in theta whose forward height follows from the optical theorem
    // (imaginary part only) and whose width then integrates to that total.
    inline AmplitudeModel van_der_waals(double c6, double reduced_mass) {
        return [c6, reduced_mass](double k, double th) {
            if (k <= 0) return 0.0;
            double v = units::hbar * k / reduced_mass;
            double sigma = 8.083 * std::pow(c6 / (units::hbar * v), 0.4);
            double f0 = k * sigma / (4 * units::pi);
            double width2 = 16 * units::pi / (k * k * sigma);
            return f0 * f0 * std::exp(-th * th / width2);
        };
    }

}  // namespace amplitude

inline double reduced_mass(double ma, double mb) { return ma * mb / (ma + mb); }

// Kinetic energy handed to the trapped atom (initially at rest) when the pair
// scatters by theta in the centre-of-mass frame.
inline double delta_E(double mu, double trapped_mass, double v_r, double theta) {
    if (!(theta >= 0 && theta <= units::pi)) throw DomainError("scattering angle must lie in [0, pi]");
    return mu * mu / trapped_mass * v_r * v_r * (1 - std::cos(theta));
}

// Smallest angle that kicks the atom out of a trap of depth U. When even
// backscattering cannot supply U the result is pi (nothing is lost); when the
// depth is negligible every angle ejects and the result is 0.
inline double theta_min(double trap_depth, double mu, double trapped_mass, double v_r) {
    double arg = 1 - trapped_mass * trap_depth / (mu * mu * v_r * v_r);
    if (arg <= -1) return units::pi;
    if (arg >= 1) return 0.0;
    return std::acos(arg);
}

inline double sigma_loss(const AmplitudeModel& f, double k, double th_min, double rel_tol = 1e-12) {
    if (!(th_min >= 0 && th_min <= units::pi)) throw DomainError("theta_min must lie in [0, pi]");
    if (th_min >= units::pi) return 0.0;
    double err = 0;
    auto g = [&](double th) { return 2 * units::pi * std::sin(th) * f(k, th); };
    double val = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(g, th_min, units::pi, 20, rel_tol, &err);
    if (!(err <= std::max(1e-4 * std::abs(val), 1e-300)))
        throw IntegrationError("loss cross-section quadrature did not converge");
    return val;
}

// Maxwell-Boltzmann average of sigma(v) v for the gas species:
// (M/2 pi kT)^(3/2) int 4 pi sigma(v) v^3 exp(-M v^2 / 2kT) dv, with the upper
// limit where the integrand falls below 1e-12 of its peak. `kinks` are speeds
// where sigma(v) is not smooth; the quadrature splits there.
inline double maxwell_average(const std::function<double(double)>& sigma_of_v, double gas_mass, double temperature,
                              std::vector<double> kinks = {}) {
    if (!(temperature > 0)) return 0.0;
    const double kT = units::k_B * temperature;
    const double norm = std::pow(gas_mass / (2 * units::pi * kT), 1.5) * 4 * units::pi;
    const double vth = std::sqrt(2 * kT / gas_mass);
    auto integrand = [&](double v) { return norm * sigma_of_v(v) * v * v * v * std::exp(-gas_mass * v * v / (2 * kT)); };

    double peak = 0, v_peak = 0;
    const int grid = 4000;
    const double span = 60 * vth;
    for (int i = 1; i <= grid; ++i) {
        double v = span * i / grid;
        double y = std::abs(integrand(v));
        if (y > peak) {
            peak = y;
            v_peak = v;
        }
    }
    if (peak == 0) return 0.0;
    double v_cut = v_peak;
    double step = vth / 64;
    while (std::abs(integrand(v_cut)) >= 1e-12 * peak || v_cut < v_peak + vth) v_cut += step;

    kinks.push_back(0.0);
    kinks.push_back(v_cut);
    std::sort(kinks.begin(), kinks.end());
    double total = 0;
    for (std::size_t i = 0; i + 1 < kinks.size(); ++i) {
        double a = std::max(0.0, kinks[i]);
        double b = std::min(v_cut, kinks[i + 1]);
        if (b <= a) continue;
        double err = 0;
        double part = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(integrand, a, b, 25, 1e-12, &err);
        if (!(err <= 1e-6 * std::abs(part) + 1e-300)) throw IntegrationError("velocity average quadrature did not converge");
        total += part;
    }
    return total;
}

// <sigma_loss v> for one background species, with k and theta_min taken per
// speed and the trapped atom treated as at rest.
inline double velocity_averaged_loss(const AmplitudeModel& f, const LossModelInput& in, const GasSpecies& gas) {
    if (!(in.temperature > 0)) return 0.0;
    const double mu = reduced_mass(in.trapped_mass, gas.mass);
    auto sigma = [&](double v) {
        if (v <= 0) return 0.0;
        double th = theta_min(in.trap_depth, mu, in.trapped_mass, v);
        return sigma_loss(f, mu * v / units::hbar, th);
    };
    // below this speed theta_min is pinned at pi
    double v_threshold = std::sqrt(in.trapped_mass * in.trap_depth / 2) / mu;
    return maxwell_average(sigma, gas.mass, in.temperature, {v_threshold});
}

inline double number_density(double pressure_mbar, double temperature) {
    return pressure_mbar * units::mbar / (units::k_B * temperature);
}

// Gamma = sum_i n_i <sigma v>_i with n_i from the ideal-gas law.
inline double gamma_total(const LossModelInput& in, const std::vector<double>& sigma_v) {
    if (sigma_v.size() != in.gas.size()) throw DomainError("one <sigma v> per gas species expected");
    double g = 0;
    for (std::size_t i = 0; i < in.gas.size(); ++i) {
        if (in.gas[i].partial_pressure < 0) throw DomainError("negative partial pressure");
        g += number_density(in.gas[i].partial_pressure, in.temperature) * sigma_v[i];
    }
    return g;
}

// Closed-form loss rate 6.8 P (kT)^(-2/3) (C6/M_b)^(1/3) (U M_a)^(-1/6). The
// expression is dimensionally consistent in SI, which is the convention used:
// P in Pa, kT and U in J, C6 in J m^6, masses in kg, result in 1/s.
inline double gamma_slater_kirkwood(const GasSpecies& gas, const LossModelInput& in) {
    if (!(in.temperature > 0 && in.trap_depth > 0 && gas.mass > 0 && gas.c6 > 0 && in.trapped_mass > 0))
        throw DomainError("Slater-Kirkwood rate needs positive inputs");
    const double kT = units::k_B * in.temperature;
    return 6.8 * gas.partial_pressure * units::mbar / std::pow(kT, 2.0 / 3.0) * std::cbrt(gas.c6 / gas.mass) *
           std::pow(in.trap_depth * in.trapped_mass, -1.0 / 6.0);
}

inline double gamma_slater_kirkwood(const LossModelInput& in) {
    double g = 0;
    for (const auto& gas : in.gas) g += gamma_slater_kirkwood(gas, in);
    return g;
}

// Gamma / P in 1/(mbar s) for one species.
inline double gamma_per_pressure(GasSpecies gas, const LossModelInput& in) {
    gas.partial_pressure = 1.0;
    return gamma_slater_kirkwood(gas, in);
}

// Pressure in mbar of a single dominant species that explains loss rate gamma.
inline double pressure_from_lifetime(double gamma, const GasSpecies& gas, const LossModelInput& in) {
    if (!(gamma > 0)) throw DomainError("loss rate must be positive");
    return gamma / gamma_per_pressure(gas, in);
}

struct DecayFit {
    double gamma = 0;      // 1/s
    double amplitude = 0;  // N0
};

// Least squares of ln N = ln N0 - Gamma t.
inline DecayFit lifetime_fit(const std::vector<std::pair<double, double>>& samples) {
    if (samples.size() < 2) throw DataError("lifetime fit needs at least two samples");
    double st = 0, sy = 0;
    for (auto [t, n] : samples) {
        if (!(n > 0)) throw DataError("atom counts must be positive");
        st += t;
        sy += std::log(n);
    }
    const double m = static_cast<double>(samples.size());
    double tm = st / m, ym = sy / m;
    double stt = 0, sty = 0, syy = 0;
    for (auto [t, n] : samples) {
        double dt = t - tm, dy = std::log(n) - ym;
        stt += dt * dt;
        sty += dt * dy;
        syy += dy * dy;
    }
    if (stt == 0) throw DataError("lifetime fit: all hold times are equal");
    if (syy == 0) throw DataError("lifetime fit: counts do not decay");
    double slope = sty / stt;
    return {-slope, std::exp(ym - slope * tm)};
}

}  // namespace conveyor
