#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "fieldkit.hpp"

namespace conveyor {

enum class TrapMode { horizontal, vertical };

struct TrapTarget {
    Vec3 position = Vec3::Zero();
    double gradient = 1.2;  // T/m along `axis`
    std::optional<double> aspect_ratio;  // horizontal only
    double curvature_window = 0.005;     // vertical only, audit extent in m
    Vec3 axis = Vec3::UnitZ();           // strong-gradient axis
    Vec3 transport = Vec3::UnitX();      // direction of travel
};

struct CurrentSolution {
    double s = 0.0;
    std::vector<std::size_t> active;
    Eigen::VectorXd currents;  // one entry per channel of the array
    std::vector<double> residuals;
    bool rank_deficient = false;  // the constraint matrix had a null direction
};

struct SolveOptions {
    double tolerance = 1e-6;  // SI residual per constraint
    double rcond = 1e-9;      // relative singular-value cutoff
    int max_iterations = 8;
    bool check_bounds = true;
};

namespace detail {

    struct LinearSystem {
        Eigen::MatrixXd M;
        Eigen::VectorXd rhs;
    };

    inline Vec3 transverse(const TrapTarget& t) { return t.axis.cross(t.transport).normalized(); }

    inline LinearSystem horizontal_system(const CoilArray& array, const TrapTarget& t,
                                          const std::vector<std::size_t>& active) {
        if (!t.aspect_ratio) throw ConfigError("horizontal solve needs an aspect ratio");
        const double A = *t.aspect_ratio;
        const Vec3 y = transverse(t);
        LinearSystem sys{Eigen::MatrixXd(3, active.size()), Eigen::VectorXd(3)};
        for (std::size_t c = 0; c < active.size(); ++c) {
            auto f = channel_response(array, active[c], t.position);
            auto col = static_cast<Eigen::Index>(c);
            sys.M(0, col) = f.B.dot(t.transport);
            sys.M(1, col) = t.axis.dot(f.J * t.axis);
            sys.M(2, col) = y.dot(f.J * y) - A * t.transport.dot(f.J * t.transport);
        }
        sys.rhs << 0.0, t.gradient, 0.0;
        return sys;
    }

    // d2B_a/da2 along the trap axis from central differences of J
    inline double axial_curvature(const CoilArray& array, const Eigen::VectorXd& currents, const Vec3& p,
                                  const Vec3& a) {
        Vec3 d = hessian_step * a;
        auto up = superpose(array, currents, p + d);
        auto dn = superpose(array, currents, p - d);
        return a.dot((up.J - dn.J) * a) / (2 * hessian_step);
    }

    inline LinearSystem vertical_system(const CoilArray& array, const TrapTarget& t,
                                        const std::vector<std::size_t>& active) {
        const bool with_sum = active.size() == 4;
        const Eigen::Index rows = with_sum ? 4 : 3;
        LinearSystem sys{Eigen::MatrixXd(rows, active.size()), Eigen::VectorXd(rows)};
        const auto n = static_cast<Eigen::Index>(array.channel_count());
        for (std::size_t c = 0; c < active.size(); ++c) {
            Eigen::VectorXd unit = Eigen::VectorXd::Zero(n);
            unit[static_cast<Eigen::Index>(active[c])] = 1.0;
            auto f = superpose(array, unit, t.position);
            auto col = static_cast<Eigen::Index>(c);
            sys.M(0, col) = f.B.dot(t.axis);
            sys.M(1, col) = t.axis.dot(f.J * t.axis);
            sys.M(2, col) = axial_curvature(array, unit, t.position, t.axis);
            if (with_sum) sys.M(3, col) = array.net_polarity(active[c]);
        }
        sys.rhs.setZero();
        sys.rhs[1] = t.gradient;
        return sys;
    }

    struct LinearResult {
        Eigen::VectorXd x;
        Eigen::VectorXd residual;
        bool rank_deficient = false;
    };

    // Newton iteration with a minimum-norm step. The constraints are linear in
    // the currents, so one step lands on the solution; the extra passes only
    // polish rounding. At a rank-deficient point the pseudo-inverse keeps the
    // component of the guess along the null direction, which is what lets a
    // continuation sweep pass through removable singularities.
    inline LinearResult newton_min_norm(const LinearSystem& sys, Eigen::VectorXd x, const SolveOptions& opts) {
        Eigen::VectorXd scale(sys.M.rows());
        for (Eigen::Index r = 0; r < sys.M.rows(); ++r) {
            double nr = sys.M.row(r).norm();
            scale[r] = nr > 0 ? 1.0 / nr : 1.0;
        }
        Eigen::MatrixXd Ms = scale.asDiagonal() * sys.M;
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(Ms, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const auto& sv = svd.singularValues();
        double cutoff = opts.rcond * (sv.size() ? sv[0] : 0.0);
        Eigen::Index rank = 0;
        for (Eigen::Index i = 0; i < sv.size(); ++i)
            if (sv[i] > cutoff) ++rank;

        LinearResult out;
        out.rank_deficient = rank < std::min(Ms.rows(), Ms.cols());
        for (int it = 0; it < opts.max_iterations; ++it) {
            Eigen::VectorXd r = scale.asDiagonal() * (sys.M * x - sys.rhs);
            Eigen::VectorXd ur = svd.matrixU().leftCols(rank).transpose() * r;
            for (Eigen::Index i = 0; i < rank; ++i) ur[i] /= sv[i];
            Eigen::VectorXd step = svd.matrixV().leftCols(rank) * ur;
            x -= step;
            if (step.norm() <= 1e-15 * (1.0 + x.norm())) break;
        }
        out.x = std::move(x);
        out.residual = sys.M * out.x - sys.rhs;
        return out;
    }

    inline CurrentSolution finish(const CoilArray& array, const std::vector<std::size_t>& active,
                                  const LinearResult& lr, const SolveOptions& opts, const char* label) {
        CurrentSolution sol;
        sol.active = active;
        sol.currents = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(array.channel_count()));
        for (std::size_t c = 0; c < active.size(); ++c)
            sol.currents[static_cast<Eigen::Index>(active[c])] = lr.x[static_cast<Eigen::Index>(c)];
        sol.rank_deficient = lr.rank_deficient;
        for (Eigen::Index r = 0; r < lr.residual.size(); ++r) sol.residuals.push_back(std::abs(lr.residual[r]));
        double worst = *std::max_element(sol.residuals.begin(), sol.residuals.end());
        if (!(worst < opts.tolerance)) {
            if (lr.rank_deficient)
                throw DegenerateConfiguration(std::string(label) + ": constraint matrix is singular and the targets are unreachable");
            throw SolverError(std::string(label) + ": residual " + std::to_string(worst) + " above tolerance");
        }
        if (opts.check_bounds) {
            for (auto ch : active) {
                double I = sol.currents[static_cast<Eigen::Index>(ch)];
                if (std::abs(I) > array.channel_limit(ch))
                    throw BoundsError(std::string(label) + ": channel " + array.channels()[ch].name + " needs " +
                                      std::to_string(I) + " A, limit " + std::to_string(array.channel_limit(ch)) + " A");
            }
        }
        return sol;
    }

    inline Eigen::VectorXd active_guess(const std::vector<std::size_t>& active, const Eigen::VectorXd& full) {
        Eigen::VectorXd g(active.size());
        for (std::size_t c = 0; c < active.size(); ++c)
            g[static_cast<Eigen::Index>(c)] = full.size() ? full[static_cast<Eigen::Index>(active[c])] : 0.0;
        return g;
    }

}  // namespace detail

// Zero of the transport-axis field component, axial gradient on target, and
// transverse gradient ratio (dB_y/dy)/(dB_x/dx) = A, using three pair channels.
// `guess` is a full channel vector (may be empty for zero).
inline CurrentSolution solve_horizontal(const CoilArray& array, const TrapTarget& target,
                                        const std::vector<std::size_t>& active, const Eigen::VectorXd& guess = {},
                                        const SolveOptions& opts = {}) {
    if (active.size() != 3) throw DomainError("horizontal solve takes exactly 3 channels");
    auto sys = detail::horizontal_system(array, target, active);
    auto lr = detail::newton_min_norm(sys, detail::active_guess(active, guess), opts);
    return detail::finish(array, active, lr, opts, "horizontal solve");
}

// Axial zero, axial gradient on target and vanishing axial curvature; with four
// channels the polarity-weighted current sum is also forced to zero.
inline CurrentSolution solve_vertical(const CoilArray& array, const TrapTarget& target,
                                      const std::vector<std::size_t>& active, const Eigen::VectorXd& guess = {},
                                      const SolveOptions& opts = {}) {
    if (active.size() != 3 && active.size() != 4) throw DomainError("vertical solve takes 3 or 4 channels");
    auto sys = detail::vertical_system(array, target, active);
    auto lr = detail::newton_min_norm(sys, detail::active_guess(active, guess), opts);
    return detail::finish(array, active, lr, opts, "vertical solve");
}

// Transverse gradient ratio of an existing trap, used to pin A from the
// initial quadrupole.
inline double aspect_ratio_at(const CoilArray& array, const Eigen::VectorXd& currents, const Vec3& p,
                              const Vec3& axis, const Vec3& transport) {
    auto f = assembly_field(array, currents, p);
    Vec3 y = axis.cross(transport).normalized();
    double jxx = transport.dot(f.J * transport);
    if (jxx == 0.0) throw DegenerateConfiguration("transport-axis gradient vanishes; aspect ratio undefined");
    return y.dot(f.J * y) / jxx;
}

// Largest |d2B_z/dz2| over +-window around the trap centre.
inline double curvature_audit(const CoilArray& array, const Eigen::VectorXd& currents, const TrapTarget& t,
                              int samples = 21) {
    double worst = 0.0;
    for (int i = 0; i < samples; ++i) {
        double u = -t.curvature_window + 2 * t.curvature_window * i / (samples - 1);
        worst = std::max(worst, std::abs(detail::axial_curvature(array, currents, t.position + u * t.axis, t.axis)));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Path and continuation sweep

struct PathLeg {
    Vec3 start = Vec3::Zero();
    Vec3 direction = Vec3::UnitX();
    double length = 0.0;
    TrapMode mode = TrapMode::horizontal;
    Vec3 axis = Vec3::UnitZ();  // strong-gradient axis on this leg
};

class TransportPath {
public:
    TransportPath() = default;
    explicit TransportPath(std::vector<PathLeg> legs) : legs_(std::move(legs)) {
        if (legs_.empty()) throw ConfigError("transport path has no legs");
        for (auto& l : legs_) {
            if (!(l.length > 0)) throw ConfigError("path leg length must be positive");
            l.direction.normalize();
            l.axis.normalize();
        }
    }

    const std::vector<PathLeg>& legs() const { return legs_; }

    double length() const {
        double L = 0;
        for (const auto& l : legs_) L += l.length;
        return L;
    }

    // Leg index holding s; a shared endpoint belongs to the later leg.
    std::size_t leg_index(double s) const {
        double s0 = 0;
        for (std::size_t i = 0; i < legs_.size(); ++i) {
            double s1 = s0 + legs_[i].length;
            if (s < s1 - 1e-12 || i + 1 == legs_.size()) return i;
            s0 = s1;
        }
        return legs_.size() - 1;
    }

    double leg_begin(std::size_t i) const {
        double s0 = 0;
        for (std::size_t k = 0; k < i; ++k) s0 += legs_[k].length;
        return s0;
    }

    Vec3 position(double s) const {
        auto i = leg_index(s);
        return legs_[i].start + (s - leg_begin(i)) * legs_[i].direction;
    }

    TrapTarget target(double s, double gradient, std::optional<double> aspect) const {
        const auto& leg = legs_[leg_index(s)];
        TrapTarget t;
        t.position = position(s);
        t.gradient = gradient;
        t.axis = leg.axis;
        t.transport = leg.direction;
        if (leg.mode == TrapMode::horizontal) t.aspect_ratio = aspect;
        return t;
    }

private:
    std::vector<PathLeg> legs_;
};

struct ScheduleEntry {
    double s_begin = 0.0;
    double s_end = 0.0;
    std::vector<std::size_t> channels;
};

class ChannelSchedule {
public:
    ChannelSchedule() = default;
    explicit ChannelSchedule(std::vector<ScheduleEntry> entries) : entries_(std::move(entries)) {
        if (entries_.empty()) throw ConfigError("channel schedule is empty");
        std::sort(entries_.begin(), entries_.end(),
                  [](const auto& a, const auto& b) { return a.s_begin < b.s_begin; });
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto& e = entries_[i];
            if (!(e.s_end > e.s_begin)) throw ConfigError("schedule entry with empty interval");
            if (e.channels.size() < 3 || e.channels.size() > 4) throw ConfigError("schedule entry needs 3 or 4 channels");
            if (i > 0 && std::abs(entries_[i - 1].s_end - e.s_begin) > 1e-12)
                throw ConfigError("schedule has a gap or overlap at s = " + std::to_string(e.s_begin));
        }
    }

    const std::vector<ScheduleEntry>& entries() const { return entries_; }

    // Half-open intervals; the final interval is closed at its end.
    const std::vector<std::size_t>& active(double s) const {
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto& e = entries_[i];
            bool last = i + 1 == entries_.size();
            if (s >= e.s_begin - 1e-12 && (s < e.s_end - 1e-12 || (last && s <= e.s_end + 1e-12))) return e.channels;
        }
        throw DomainError("no active-channel schedule entry covers s = " + std::to_string(s));
    }

private:
    std::vector<ScheduleEntry> entries_;
};

// Fallback schedule when the config supplies none. Channels whose centres sit
// on a leg's line are ordered along it; between consecutive centres c_k and
// c_k+1 the window {k-1, k, k+1} (horizontal) or {k-1 .. k+2} (vertical) is
// used, shifted to stay inside the list. Windows change only when the trap
// crosses a coil centre, which is the hysteresis. A vertical leg starts with
// three channels while the window would reach behind the first coil.
inline ChannelSchedule nearest_channel_schedule(const CoilArray& array, const TransportPath& path,
                                                double line_tolerance = 1e-6) {
    std::vector<ScheduleEntry> out;
    for (std::size_t li = 0; li < path.legs().size(); ++li) {
        const auto& leg = path.legs()[li];
        double s0 = path.leg_begin(li);
        std::vector<std::pair<double, std::size_t>> on_line;
        for (std::size_t ch = 0; ch < array.channel_count(); ++ch) {
            Vec3 rel = array.channel_center(ch) - leg.start;
            double u = rel.dot(leg.direction);
            if ((rel - u * leg.direction).norm() < line_tolerance) on_line.emplace_back(u, ch);
        }
        std::stable_sort(on_line.begin(), on_line.end(), [](auto& a, auto& b) { return a.first < b.first; });
        const bool vertical = leg.mode == TrapMode::vertical;
        const long n = vertical ? 4 : 3;
        const long m = static_cast<long>(on_line.size());
        if (m < 3) throw ConfigError("fewer than three channels along path leg " + std::to_string(li));

        auto window = [&](long k) {
            long first = k - 1;
            long count = n;
            if (vertical && first < 0) {
                first = 0;
                count = 3;
            }
            count = std::min(count, m);
            first = std::clamp(first, 0L, m - count);
            std::vector<std::size_t> w;
            for (long j = first; j < first + count; ++j) w.push_back(on_line[static_cast<std::size_t>(j)].second);
            return w;
        };

        double cursor = s0;
        const double s_end = s0 + leg.length;
        for (long k = 0; k < m && cursor < s_end - 1e-12; ++k) {
            double next = k + 1 < m ? s0 + on_line[static_cast<std::size_t>(k + 1)].first : s_end;
            next = std::min(next, s_end);
            if (k + 1 == m) next = s_end;
            if (next <= cursor + 1e-12) continue;
            out.push_back({cursor, next, window(k)});
            cursor = next;
        }
        if (cursor < s_end - 1e-12) out.push_back({cursor, s_end, window(m - 1)});
    }
    // merge neighbours with identical sets
    std::vector<ScheduleEntry> merged;
    for (auto& e : out) {
        if (!merged.empty() && merged.back().channels == e.channels) merged.back().s_end = e.s_end;
        else merged.push_back(e);
    }
    return ChannelSchedule(std::move(merged));
}

struct SweepOptions {
    double gradient = 1.2;
    std::optional<double> aspect_ratio = 1.0;
    double max_step_current = 0.5;  // A between consecutive samples
    double singular_offset = 1e-4;  // m, probe distance around rank-deficient samples
    SolveOptions solve;
};

namespace detail {
    inline CurrentSolution solve_at(const CoilArray& array, const TransportPath& path, const ChannelSchedule& sched,
                                    double s, const Eigen::VectorXd& guess, const SweepOptions& o) {
        const auto& active = sched.active(s);
        auto t = path.target(s, o.gradient, o.aspect_ratio);
        auto mode = path.legs()[path.leg_index(s)].mode;
        CurrentSolution sol = mode == TrapMode::horizontal ? solve_horizontal(array, t, active, guess, o.solve)
                                                           : solve_vertical(array, t, active, guess, o.solve);
        sol.s = s;
        return sol;
    }

    // At a removable singularity every point of a line solves the constraints.
    // The branch value is fixed by continuity, so the guess is replaced by one
    // built from regular neighbours; this makes the result independent of the
    // sweep direction.
    inline CurrentSolution solve_singular(const CoilArray& array, const TransportPath& path,
                                          const ChannelSchedule& sched, double s, const Eigen::VectorXd& guess,
                                          const SweepOptions& o) {
        const double h = o.singular_offset;
        const double L = path.length();
        const auto& active = sched.active(s);
        auto probe = [&](double u) -> std::optional<Eigen::VectorXd> {
            if (u < 0 || u > L) return std::nullopt;
            if (sched.active(u) != active || path.leg_index(u) != path.leg_index(s)) return std::nullopt;
            auto p = solve_at(array, path, sched, u, guess, o);
            if (p.rank_deficient) return std::nullopt;
            return p.currents;
        };
        Eigen::VectorXd ref;
        auto lo = probe(s - h), hi = probe(s + h);
        if (lo && hi) {
            ref = 0.5 * (*lo + *hi);
        } else if (hi) {
            auto hi2 = probe(s + 2 * h);
            ref = hi2 ? Eigen::VectorXd(2 * *hi - *hi2) : *hi;
        } else if (lo) {
            auto lo2 = probe(s - 2 * h);
            ref = lo2 ? Eigen::VectorXd(2 * *lo - *lo2) : *lo;
        } else {
            ref = guess;
        }
        return solve_at(array, path, sched, s, ref, o);
    }
}  // namespace detail

// Continuation over monotone samples of s. Each solve starts from a linear
// extrapolation of the previous two solutions.
inline std::vector<CurrentSolution> sweep_path(const CoilArray& array, const TransportPath& path,
                                               const std::vector<double>& samples, const ChannelSchedule& schedule,
                                               const SweepOptions& opts = {}) {
    if (samples.empty()) return {};
    const double dir = samples.size() > 1 ? (samples.back() >= samples.front() ? 1.0 : -1.0) : 1.0;
    for (std::size_t i = 1; i < samples.size(); ++i)
        if ((samples[i] - samples[i - 1]) * dir < 0) throw DomainError("path samples are not monotone");

    const auto n = static_cast<Eigen::Index>(array.channel_count());
    std::vector<CurrentSolution> out;
    out.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        double s = samples[i];
        if (s < -1e-12 || s > path.length() + 1e-12)
            throw DomainError("path sample s = " + std::to_string(s) + " lies outside the path");
        Eigen::VectorXd guess = Eigen::VectorXd::Zero(n);
        if (i >= 2) guess = 2 * out[i - 1].currents - out[i - 2].currents;
        else if (i == 1) guess = out[0].currents;

        auto sol = detail::solve_at(array, path, schedule, s, guess, opts);
        if (sol.rank_deficient) sol = detail::solve_singular(array, path, schedule, s, guess, opts);

        if (i > 0) {
            Eigen::VectorXd d = (sol.currents - out[i - 1].currents).cwiseAbs();
            Eigen::Index worst;
            double jump = d.maxCoeff(&worst);
            if (jump > opts.max_step_current)
                throw ContinuityError("current step of " + std::to_string(jump) + " A on channel " +
                                          array.channels()[static_cast<std::size_t>(worst)].name + " at s = " +
                                          std::to_string(s) + " m",
                                      s);
        }
        out.push_back(std::move(sol));
    }
    return out;
}

// Uniform samples 0, step, 2 step, ... up to the path end (always included).
inline std::vector<double> path_samples(double length, double step) {
    if (!(step > 0)) throw DomainError("path step must be positive");
    std::vector<double> s;
    auto n = static_cast<long>(std::floor(length / step + 1e-9));
    for (long i = 0; i <= n; ++i) s.push_back(static_cast<double>(i) * step);
    if (length - s.back() > 1e-12) s.push_back(length);
    return s;
}

}  // namespace conveyor
