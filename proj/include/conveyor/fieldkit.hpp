#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/ellint_2.hpp>
#include <boost/math/special_functions/ellint_d.hpp>

#include "errors.hpp"
#include "units.hpp"

namespace conveyor {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct CoilSpec {
    std::string name;
    Vec3 center = Vec3::Zero();
    Vec3 axis = Vec3::UnitZ();
    double radius = 0.0;
    int windings = 1;
    int polarity = 1;
    double max_current = 0.0;
};

// One current channel drives either a single coil or an anti-Helmholtz pair.
struct Channel {
    std::string name;
    std::vector<std::size_t> coils;

    bool is_pair() const { return coils.size() == 2; }
};

class CoilArray {
public:
    CoilArray() = default;

    // pairs holds index pairs into coils; every unpaired coil becomes its own
    // channel. Channels are numbered in order of first appearance in coils.
    CoilArray(std::vector<CoilSpec> coils, const std::vector<std::array<std::size_t, 2>>& pairs = {},
              const std::vector<std::string>& pair_names = {})
        : coils_(std::move(coils)) {
        for (std::size_t i = 0; i < coils_.size(); ++i) validate_coil(coils_[i]);

        std::vector<long> partner(coils_.size(), -1);
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            auto [a, b] = pairs[p];
            if (a >= coils_.size() || b >= coils_.size() || a == b)
                throw ConfigError("pair " + std::to_string(p) + " references an invalid coil index");
            if (partner[a] >= 0 || partner[b] >= 0)
                throw ConfigError("coil appears in more than one pair: " + coils_[partner[a] >= 0 ? a : b].name);
            const auto& ca = coils_[a];
            const auto& cb = coils_[b];
            if (std::abs(ca.radius - cb.radius) > 1e-12 * ca.radius || ca.windings != cb.windings)
                throw ConfigError("paired coils " + ca.name + "/" + cb.name + " differ in radius or windings");
            if (ca.polarity != -cb.polarity)
                throw ConfigError("paired coils " + ca.name + "/" + cb.name + " need opposite polarity");
            partner[a] = static_cast<long>(b);
            partner[b] = static_cast<long>(a);
        }

        std::vector<bool> used(coils_.size(), false);
        for (std::size_t i = 0; i < coils_.size(); ++i) {
            if (used[i]) continue;
            Channel ch;
            if (partner[i] >= 0) {
                auto j = static_cast<std::size_t>(partner[i]);
                ch.coils = {i, j};
                used[j] = true;
                ch.name = pair_label(pairs, pair_names, i, j);
            } else {
                ch.coils = {i};
                ch.name = coils_[i].name;
            }
            used[i] = true;
            channels_.push_back(std::move(ch));
        }
    }

    const std::vector<CoilSpec>& coils() const { return coils_; }
    const std::vector<Channel>& channels() const { return channels_; }
    std::size_t channel_count() const { return channels_.size(); }

    std::size_t channel_index(const std::string& name) const {
        for (std::size_t c = 0; c < channels_.size(); ++c)
            if (channels_[c].name == name) return c;
        throw ConfigError("unknown channel '" + name + "'");
    }

    // Sum of coil polarities on a channel; zero for an anti-Helmholtz pair.
    int net_polarity(std::size_t ch) const {
        int s = 0;
        for (auto i : channels_[ch].coils) s += coils_[i].polarity;
        return s;
    }

    double channel_limit(std::size_t ch) const {
        double lim = coils_[channels_[ch].coils.front()].max_current;
        for (auto i : channels_[ch].coils) lim = std::min(lim, coils_[i].max_current);
        return lim;
    }

    // Mean position of the channel's coils.
    Vec3 channel_center(std::size_t ch) const {
        Vec3 c = Vec3::Zero();
        for (auto i : channels_[ch].coils) c += coils_[i].center;
        return c / static_cast<double>(channels_[ch].coils.size());
    }

private:
    static void validate_coil(const CoilSpec& c) {
        if (!(c.radius > 0)) throw ConfigError("coil " + c.name + ": radius must be positive");
        if (c.windings < 1) throw ConfigError("coil " + c.name + ": windings must be >= 1");
        if (c.polarity != 1 && c.polarity != -1) throw ConfigError("coil " + c.name + ": polarity must be +1 or -1");
        if (!(c.max_current > 0)) throw ConfigError("coil " + c.name + ": max_current must be positive");
        if (std::abs(c.axis.norm() - 1.0) > 1e-12) throw ConfigError("coil " + c.name + ": axis is not a unit vector");
    }

    std::string pair_label(const std::vector<std::array<std::size_t, 2>>& pairs,
                           const std::vector<std::string>& names, std::size_t i, std::size_t j) const {
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            bool hit = (pairs[p][0] == i && pairs[p][1] == j) || (pairs[p][0] == j && pairs[p][1] == i);
            if (hit && p < names.size() && !names[p].empty()) return names[p];
        }
        return coils_[i].name + "+" + coils_[j].name;
    }

    std::vector<CoilSpec> coils_;
    std::vector<Channel> channels_;
};

struct FieldSample {
    Vec3 B = Vec3::Zero();
    Mat3 J = Mat3::Zero();  // J(i, j) = dB_i / dx_j
    // H[k](i, j) = d2B_i / dx_j dx_k, present when requested
    std::optional<std::array<Mat3, 3>> H;
};

// Step for the central differences that produce H from J.
inline constexpr double hessian_step = 1e-5;

namespace detail {

    // value plus partials with respect to (rho, z)
    struct Dual {
        double v, dr, dz;
    };
    inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.dr + b.dr, a.dz + b.dz}; }
    inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.dr - b.dr, a.dz - b.dz}; }
    inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.dr * b.v + a.v * b.dr, a.dz * b.v + a.v * b.dz}; }
    inline Dual operator*(double s, Dual a) { return {s * a.v, s * a.dr, s * a.dz}; }
    inline Dual operator/(Dual a, Dual b) {
        double q = a.v / b.v;
        return {q, (a.dr - q * b.dr) / b.v, (a.dz - q * b.dz) / b.v};
    }
    inline Dual sqrt(Dual a) {
        double r = std::sqrt(a.v);
        return {r, a.dr / (2 * r), a.dz / (2 * r)};
    }

    // dD/dm where D(m) = (K - E) / m. The closed form cancels badly near m = 0,
    // so small m goes through the hypergeometric series instead.
    inline double ellint_d_prime(double m, double E, double D) {
        if (m >= 0.1) return (E / (2 * (1 - m)) - D) / m;
        double a = 0.5, sum = 0.0, mp = 1.0;
        for (int n = 2; n < 80; ++n) {
            a *= (2.0 * n - 1) / (2.0 * n);
            double term = a * a * (2.0 * n / (2.0 * n - 1)) * (n - 1) * mp;
            sum += term;
            if (term < 1e-18 * sum) break;
            mp *= m;
        }
        return units::pi / 2 * sum;
    }

    // Field components (B_rho, B_z) of a loop of radius R carrying scaled
    // current NI, as duals in the loop's cylindrical frame.
    inline std::pair<Dual, Dual> loop_cylindrical(double R, double NI, double rho, double z) {
        const double C = units::mu0 * NI / (2 * units::pi);
        Dual r{rho, 1, 0}, zz{z, 0, 1}, RR{R, 0, 0};
        Dual a2 = (RR - r) * (RR - r) + zz * zz;
        Dual b2 = (RR + r) * (RR + r) + zz * zz;
        Dual b = sqrt(b2);
        Dual m = (4 * R) * r / b2;
        double mv = std::min(m.v, 1.0 - 1e-16);
        double k = std::sqrt(mv);
        double E = boost::math::ellint_2(k);
        double D = boost::math::ellint_d(k);
        double dE = -D / 2;
        double dD = ellint_d_prime(mv, E, D);
        Dual Ed{E, dE * m.dr, dE * m.dz};
        Dual Dd{D, dD * m.dr, dD * m.dz};
        // Written so that nothing divides by rho; the on-axis limit is regular.
        Dual bz = C * ((2 * R) * (RR - r) * Ed / a2 + (4 * R) * r * Dd / b2) / b;
        Dual br = (C * R) * zz * (2.0 * Ed / a2 - 4.0 * Dd / b2) / b;
        return {br, bz};
    }

}  // namespace detail

struct LoopSample {
    Vec3 B;
    Mat3 J;
};

// Exact field and gradient of one coil at `point`; current is the channel
// current in amperes, multiplied here by windings and polarity.
inline LoopSample loop_field_gradient(const CoilSpec& coil, double current, const Vec3& point) {
    const double NI = coil.windings * coil.polarity * current;
    const Vec3& a = coil.axis;
    Vec3 rel = point - coil.center;
    double z = rel.dot(a);
    Vec3 radial = rel - z * a;
    double rho = radial.norm();
    double dist2 = (coil.radius - rho) * (coil.radius - rho) + z * z;
    if (dist2 < 1e-18 * coil.radius * coil.radius)
        throw SingularEvaluation("field requested on the filament of coil " + coil.name);

    auto [br, bz] = detail::loop_cylindrical(coil.radius, NI, rho, z);
    double dzbz = bz.dz;
    double drbz = bz.dr;
    double drbr = br.dr;
    double br_over_rho = -dzbz - drbr;  // from div B = 0

    LoopSample out;
    Mat3 aa = a * a.transpose();
    if (rho > 1e-14 * coil.radius) {
        Vec3 n = radial / rho;
        out.B = br.v * n + bz.v * a;
        Mat3 nn = n * n.transpose();
        out.J = drbr * nn + br_over_rho * (Mat3::Identity() - aa - nn) + br.dz * n * a.transpose() +
                drbz * a * n.transpose() + dzbz * aa;
    } else {
        out.B = bz.v * a;
        out.J = br_over_rho * (Mat3::Identity() - aa) + dzbz * aa;
    }
    return out;
}

inline Vec3 loop_field(const CoilSpec& coil, double current, const Vec3& point) {
    return loop_field_gradient(coil, current, point).B;
}

inline void check_currents(const CoilArray& array, const Eigen::VectorXd& currents) {
    if (static_cast<std::size_t>(currents.size()) != array.channel_count())
        throw DomainError("expected " + std::to_string(array.channel_count()) + " channel currents, got " +
                          std::to_string(currents.size()));
    for (std::size_t c = 0; c < array.channel_count(); ++c) {
        for (auto i : array.channels()[c].coils) {
            const auto& coil = array.coils()[i];
            if (std::abs(currents[c]) > coil.max_current)
                throw BoundsError("current " + std::to_string(currents[c]) + " A exceeds limit of coil " + coil.name);
        }
    }
}

namespace detail {
    inline LoopSample superpose(const CoilArray& array, const Eigen::VectorXd& currents, const Vec3& p) {
        LoopSample sum{Vec3::Zero(), Mat3::Zero()};
        for (std::size_t c = 0; c < array.channel_count(); ++c) {
            if (currents[c] == 0.0) continue;
            for (auto i : array.channels()[c].coils) {
                auto s = loop_field_gradient(array.coils()[i], currents[c], p);
                sum.B += s.B;
                sum.J += s.J;
            }
        }
        return sum;
    }

    inline std::array<Mat3, 3> hessian_fd(const CoilArray& array, const Eigen::VectorXd& currents, const Vec3& p) {
        std::array<Mat3, 3> H;
        for (int k = 0; k < 3; ++k) {
            Vec3 d = Vec3::Zero();
            d[k] = hessian_step;
            H[k] = (superpose(array, currents, p + d).J - superpose(array, currents, p - d).J) / (2 * hessian_step);
        }
        return H;
    }
}  // namespace detail

inline FieldSample assembly_field(const CoilArray& array, const Eigen::VectorXd& currents, const Vec3& point,
                                  bool with_hessian = false) {
    check_currents(array, currents);
    auto s = detail::superpose(array, currents, point);
    FieldSample out;
    out.B = s.B;
    out.J = s.J;
    if (with_hessian) out.H = detail::hessian_fd(array, currents, point);
    return out;
}

// Field of one channel at unit current, ignoring current limits. Used to
// assemble the linear constraint systems.
inline FieldSample channel_response(const CoilArray& array, std::size_t ch, const Vec3& point,
                                    bool with_hessian = false) {
    Eigen::VectorXd unit = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(array.channel_count()));
    unit[static_cast<Eigen::Index>(ch)] = 1.0;
    auto s = detail::superpose(array, unit, point);
    FieldSample out;
    out.B = s.B;
    out.J = s.J;
    if (with_hessian) out.H = detail::hessian_fd(array, unit, point);
    return out;
}

struct ZeroSearch {
    int max_iterations = 50;
    double tolerance = 1e-10;  // T
};

// Newton iteration on B(x) = 0 using the analytic Jacobian.
inline Vec3 find_field_zero(const CoilArray& array, const Eigen::VectorXd& currents, const Vec3& guess,
                            const ZeroSearch& opts = {}) {
    check_currents(array, currents);
    if (currents.isZero(0.0)) throw NoZeroFound("all currents are zero; the field vanishes everywhere");
    Vec3 x = guess;
    for (int it = 0; it < opts.max_iterations; ++it) {
        auto s = detail::superpose(array, currents, x);
        if (s.B.norm() < opts.tolerance) return x;
        Eigen::FullPivLU<Mat3> lu(s.J);
        if (!lu.isInvertible()) throw NoZeroFound("field gradient is singular during zero search");
        x -= lu.solve(s.B);
    }
    auto s = detail::superpose(array, currents, x);
    if (s.B.norm() < opts.tolerance) return x;
    throw NoZeroFound("no field zero within " + std::to_string(opts.max_iterations) +
                      " Newton iterations; last |B| = " + std::to_string(s.B.norm()) + " T");
}

}  // namespace conveyor
