#pragma once

#include <cmath>
#include <string>

#include <conveyor/conveyor.hpp>

namespace testsupport {

using conveyor::CoilArray;
using conveyor::CoilSpec;
using conveyor::Vec3;

inline std::string example_config() { return std::string(CONVEYOR_SOURCE_DIR) + "/config/conveyor.json"; }

inline CoilSpec loop(const std::string& name, Vec3 center, Vec3 axis, double radius, int windings = 1, int polarity = 1,
                     double max_current = 1e3) {
    return {name, center, axis.normalized(), radius, windings, polarity, max_current};
}

// Anti-Helmholtz pair on the z axis with coils at z0 +- d.
inline CoilArray ah_pair(double radius, double d, int windings = 1, double z0 = 0.0) {
    return CoilArray({loop("top", {0, 0, z0 + d}, {0, 0, 1}, radius, windings, 1),
                      loop("bottom", {0, 0, z0 - d}, {0, 0, 1}, radius, windings, -1)},
                     {{0, 1}}, {"P"});
}

// Midpoint-rule Biot-Savart sum over n straight segments of the loop. The
// integrand is periodic, so the rule converges far faster than 1/n^2.
inline Vec3 biot_savart(const CoilSpec& c, double current, const Vec3& p, int n = 200000) {
    Vec3 e1 = c.axis.unitOrthogonal();
    Vec3 e2 = c.axis.cross(e1);
    Vec3 B = Vec3::Zero();
    const double dphi = 2 * conveyor::units::pi / n;
    for (int k = 0; k < n; ++k) {
        double phi = (k + 0.5) * dphi;
        Vec3 pos = c.center + c.radius * (std::cos(phi) * e1 + std::sin(phi) * e2);
        Vec3 dl = c.radius * dphi * (-std::sin(phi) * e1 + std::cos(phi) * e2);
        Vec3 r = p - pos;
        double rn = r.norm();
        B += dl.cross(r) / (rn * rn * rn);
    }
    return conveyor::units::mu0 / (4 * conveyor::units::pi) * current * c.windings * c.polarity * B;
}

inline double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

}  // namespace testsupport
