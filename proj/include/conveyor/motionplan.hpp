#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/interpolators/pchip.hpp>

#include "errors.hpp"
#include "fieldkit.hpp"
#include "trapsolve.hpp"

namespace conveyor {

struct SectionSpec {
    double length = 0.0;  // m
    double vmax = 0.0;    // m/s
    double amax = 1.0;    // m/s^2, peak acceleration of the S-curve
};

struct Kinematics {
    double s = 0, v = 0, a = 0, j = 0;
};

// One constant-jerk piece of a section.
struct JerkSegment {
    double t0 = 0, duration = 0;
    double s0 = 0, v0 = 0, a0 = 0, jerk = 0;

    Kinematics at(double t) const {
        double u = t - t0;
        return {s0 + v0 * u + a0 * u * u / 2 + jerk * u * u * u / 6, v0 + a0 * u + jerk * u * u / 2, a0 + jerk * u, jerk};
    }
};

struct SectionPlan {
    SectionSpec spec;
    double start_time = 0, start_s = 0, duration = 0;
    double v_peak = 0, a_peak = 0, jerk = 0;
    std::vector<JerkSegment> segments;  // times relative to the section start
};

// Seven-segment S-curve per section, stopping fully between sections. The
// acceleration ramps are triangular: jerk j = amax^2 / v_peak takes the
// velocity from 0 to v_peak in 2 v_peak / amax, the smallest jerk that still
// reaches v_peak with peak acceleration amax. Sections too short for vmax
// peak at v = sqrt(amax L / 2) instead.
class MotionProfile {
public:
    MotionProfile() = default;
    explicit MotionProfile(std::vector<SectionPlan> plans) : plans_(std::move(plans)) {}

    const std::vector<SectionPlan>& sections() const { return plans_; }

    double total_duration() const {
        return plans_.empty() ? 0.0 : plans_.back().start_time + plans_.back().duration;
    }

    double total_length() const {
        double L = 0;
        for (const auto& p : plans_) L += p.spec.length;
        return L;
    }

    Kinematics evaluate(double t) const {
        if (plans_.empty()) return {};
        if (t <= 0) return {0, 0, 0, 0};
        for (const auto& p : plans_) {
            double u = t - p.start_time;
            if (u >= p.duration) continue;
            const JerkSegment* seg = &p.segments.front();
            for (const auto& sg : p.segments)
                if (u >= sg.t0) seg = &sg;
            auto k = seg->at(u);
            k.s += p.start_s;
            return k;
        }
        return {total_length(), 0, 0, 0};
    }

    // Inverse of s(t) by bisection; returns the first time the trap reaches s.
    double time_at(double s) const {
        if (s <= 0) return 0.0;
        if (s >= total_length()) return total_duration();
        double lo = 0, hi = total_duration();
        for (int i = 0; i < 200 && hi - lo > 1e-13; ++i) {
            double mid = 0.5 * (lo + hi);
            (evaluate(mid).s < s ? lo : hi) = mid;
        }
        return hi;
    }

private:
    std::vector<SectionPlan> plans_;
};

inline SectionPlan plan_section(const SectionSpec& spec) {
    if (!(spec.length > 0)) throw DomainError("section length must be positive");
    if (!(spec.vmax > 0)) throw DomainError("section vmax must be positive");
    if (!(spec.amax > 0)) throw DomainError("section amax must be positive");

    SectionPlan p;
    p.spec = spec;
    double v = spec.vmax;
    if (2 * v * v / spec.amax > spec.length) v = std::sqrt(spec.amax * spec.length / 2);
    const double tau = v / spec.amax;  // duration of each jerk phase
    const double j = spec.amax / tau;
    const double ramp_len = v * tau;   // distance covered while speeding up
    const double cruise = (spec.length - 2 * ramp_len) / v;
    p.v_peak = v;
    p.a_peak = spec.amax;
    p.jerk = j;

    const std::array<std::pair<double, double>, 5> pieces{{{tau, j}, {tau, -j}, {cruise, 0.0}, {tau, -j}, {tau, j}}};
    JerkSegment cur;
    double t = 0;
    for (auto [dur, jerk] : pieces) {
        if (dur <= 0) continue;
        cur.t0 = t;
        cur.duration = dur;
        cur.jerk = jerk;
        p.segments.push_back(cur);
        auto end = cur.at(t + dur);
        cur.s0 = end.s;
        cur.v0 = end.v;
        cur.a0 = end.a;
        t += dur;
    }
    p.duration = t;
    return p;
}

inline MotionProfile build_profile(const std::vector<SectionSpec>& sections) {
    if (sections.empty()) throw DomainError("motion profile needs at least one section");
    std::vector<SectionPlan> plans;
    double t = 0, s = 0;
    for (const auto& spec : sections) {
        auto p = plan_section(spec);
        p.start_time = t;
        p.start_s = s;
        t += p.duration;
        s += spec.length;
        plans.push_back(std::move(p));
    }
    return MotionProfile(std::move(plans));
}

// ---------------------------------------------------------------------------
// Spatial current table and its time-domain image

struct SpatialProfile {
    std::vector<std::string> channels;
    std::vector<double> s;
    Eigen::MatrixXd currents;  // rows follow s, columns follow channels
    // Positions where the active set or the path leg changes. Currents have a
    // kink there, so interpolation restarts at each break.
    std::vector<double> breaks;
};

inline SpatialProfile spatial_profile(const CoilArray& array, const std::vector<CurrentSolution>& sweep,
                                      const TransportPath& path, const ChannelSchedule& schedule) {
    SpatialProfile p;
    for (const auto& ch : array.channels()) p.channels.push_back(ch.name);
    p.currents.resize(static_cast<Eigen::Index>(sweep.size()), static_cast<Eigen::Index>(array.channel_count()));
    for (std::size_t i = 0; i < sweep.size(); ++i) {
        p.s.push_back(sweep[i].s);
        p.currents.row(static_cast<Eigen::Index>(i)) = sweep[i].currents.transpose();
    }
    for (std::size_t l = 1; l < path.legs().size(); ++l) p.breaks.push_back(path.leg_begin(l));
    for (std::size_t e = 1; e < schedule.entries().size(); ++e) p.breaks.push_back(schedule.entries()[e].s_begin);
    std::sort(p.breaks.begin(), p.breaks.end());
    return p;
}

// Piecewise shape-preserving cubic through a spatial table.
class SpatialInterpolant {
public:
    explicit SpatialInterpolant(const SpatialProfile& p) : s_min_(p.s.front()), s_max_(p.s.back()) {
        if (p.s.size() < 2) throw DomainError("spatial profile needs at least two samples");
        for (std::size_t i = 1; i < p.s.size(); ++i)
            if (!(p.s[i] > p.s[i - 1])) throw DomainError("spatial profile positions must increase");
        // cut the table into pieces at the breaks
        std::vector<std::size_t> cuts{0};
        for (double b : p.breaks) {
            auto it = std::lower_bound(p.s.begin(), p.s.end(), b - 1e-12);
            if (it == p.s.end()) continue;
            auto k = static_cast<std::size_t>(it - p.s.begin());
            // a break between samples leaves the straddling interval linear
            if (std::abs(p.s[k] - b) >= 1e-9 && k > 0 && k - 1 > cuts.back()) cuts.push_back(k - 1);
            if (k > cuts.back() && k + 1 < p.s.size()) cuts.push_back(k);
        }
        cuts.push_back(p.s.size() - 1);
        const auto nch = static_cast<std::size_t>(p.currents.cols());
        for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
            Piece piece;
            piece.s0 = p.s[cuts[c]];
            piece.s1 = p.s[cuts[c + 1]];
            for (std::size_t ch = 0; ch < nch; ++ch) {
                std::vector<double> x, y;
                for (std::size_t i = cuts[c]; i <= cuts[c + 1]; ++i) {
                    x.push_back(p.s[i]);
                    y.push_back(p.currents(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(ch)));
                }
                piece.channels.push_back(Curve(std::move(x), std::move(y)));
            }
            pieces_.push_back(std::move(piece));
        }
    }

    double s_min() const { return s_min_; }
    double s_max() const { return s_max_; }

    Eigen::VectorXd operator()(double s) const {
        if (s < s_min_ - 1e-12 || s > s_max_ + 1e-12)
            throw DomainError("spatial profile does not cover s = " + std::to_string(s));
        s = std::clamp(s, s_min_, s_max_);
        const Piece* hit = &pieces_.back();
        for (const auto& pc : pieces_)
            if (s <= pc.s1) {
                hit = &pc;
                break;
            }
        Eigen::VectorXd out(static_cast<Eigen::Index>(hit->channels.size()));
        for (std::size_t ch = 0; ch < hit->channels.size(); ++ch)
            out[static_cast<Eigen::Index>(ch)] = hit->channels[ch](s);
        return out;
    }

private:
    // pchip needs four points; shorter runs fall back to linear
    class Curve {
    public:
        Curve(std::vector<double> x, std::vector<double> y) {
            if (x.size() >= 4) {
                const std::size_t n = x.size();
                double left = end_slope(x[1] - x[0], x[2] - x[1], y[0], y[1], y[2]);
                double right = -end_slope(x[n - 1] - x[n - 2], x[n - 2] - x[n - 3], y[n - 1], y[n - 2], y[n - 3]);
                pchip_ = std::make_shared<boost::math::interpolators::pchip<std::vector<double>>>(std::move(x), std::move(y),
                                                                                                  left, right);
            } else {
                x_ = std::move(x);
                y_ = std::move(y);
            }
        }
        double operator()(double s) const {
            if (pchip_) return (*pchip_)(s);
            auto it = std::upper_bound(x_.begin(), x_.end(), s);
            std::size_t k = std::clamp<std::size_t>(static_cast<std::size_t>(it - x_.begin()), 1, x_.size() - 1);
            double w = (s - x_[k - 1]) / (x_[k] - x_[k - 1]);
            return (1 - w) * y_[k - 1] + w * y_[k];
        }

    private:
        // Three-point one-sided slope, limited so the end interval stays
        // monotone. The default two-point secant is only first order and
        // dominates the error next to breaks. Fed in reverse order it returns
        // the negated right-end slope.
        static double end_slope(double h1, double h2, double y0, double y1, double y2) {
            double d1 = (y1 - y0) / h1, d2 = (y2 - y1) / h2;
            double d = ((2 * h1 + h2) * d1 - h1 * d2) / (h1 + h2);
            if (d * d1 <= 0) return 0.0;
            if (d1 * d2 < 0 && std::abs(d) > 3 * std::abs(d1)) return 3 * d1;
            return d;
        }

        std::shared_ptr<boost::math::interpolators::pchip<std::vector<double>>> pchip_;
        std::vector<double> x_, y_;
    };

    struct Piece {
        double s0 = 0, s1 = 0;
        std::vector<Curve> channels;
    };

    double s_min_, s_max_;
    std::vector<Piece> pieces_;
};

struct CurrentWaveform {
    double sample_rate = 1000.0;  // Hz
    std::vector<std::string> channels;
    std::vector<double> t;      // s
    Eigen::MatrixXd currents;   // rows follow t

    std::size_t size() const { return t.size(); }
    double duration() const { return t.empty() ? 0.0 : t.back() - t.front(); }

    bool operator==(const CurrentWaveform& o) const {
        return sample_rate == o.sample_rate && channels == o.channels && t == o.t &&
               currents.rows() == o.currents.rows() && currents.cols() == o.currents.cols() &&
               (currents.size() == 0 || currents == o.currents);
    }
};

// Trap coordinate and currents as continuous functions of time, including the
// MOT hand-over ramp that precedes the transport.
class TransportTimeline {
public:
    TransportTimeline(MotionProfile profile, std::shared_ptr<const SpatialInterpolant> currents,
                      std::optional<Eigen::VectorXd> ramp_from = std::nullopt, double ramp_duration = 0.4)
        : profile_(std::move(profile)), currents_(std::move(currents)),
          ramp_from_(std::move(ramp_from)), ramp_(ramp_from_ ? ramp_duration : 0.0) {
        if (ramp_ < 0) throw DomainError("ramp duration must be non-negative");
        if (currents_->s_min() > 1e-12 || currents_->s_max() < profile_.total_length() - 1e-12)
            throw DomainError("spatial profile does not cover the transport path");
        start_ = (*currents_)(0.0);
        if (ramp_from_ && ramp_from_->size() != start_.size())
            throw DomainError("ramp start currents have the wrong channel count");
    }

    const MotionProfile& profile() const { return profile_; }
    double ramp_duration() const { return ramp_; }
    double duration() const { return ramp_ + profile_.total_duration(); }

    double s_at(double t) const { return t <= ramp_ ? 0.0 : profile_.evaluate(t - ramp_).s; }

    Eigen::VectorXd currents_at(double t) const {
        if (t < ramp_) {
            double w = std::max(t, 0.0) / ramp_;
            return (1 - w) * *ramp_from_ + w * start_;
        }
        return (*currents_)(std::min(s_at(t), currents_->s_max()));
    }

private:
    MotionProfile profile_;
    std::shared_ptr<const SpatialInterpolant> currents_;
    std::optional<Eigen::VectorXd> ramp_from_;
    double ramp_;
    Eigen::VectorXd start_;
};

struct WaveformLimits {
    std::vector<double> max_current;  // per channel, empty to skip
    double max_slew = 0.0;            // A/s, 0 to skip
};

// Waveform plus the trap coordinate at each sample.
struct SampledTransport {
    CurrentWaveform waveform;
    std::vector<double> s;
};

namespace detail {
    inline void check_waveform(const CurrentWaveform& w, const WaveformLimits& lim) {
        for (Eigen::Index r = 0; r < w.currents.rows(); ++r) {
            for (Eigen::Index c = 0; c < w.currents.cols(); ++c) {
                if (!lim.max_current.empty() && std::abs(w.currents(r, c)) > lim.max_current[static_cast<std::size_t>(c)])
                    throw BoundsError("waveform exceeds the current limit of channel " +
                                      w.channels[static_cast<std::size_t>(c)] + " at t = " + std::to_string(w.t[static_cast<std::size_t>(r)]) + " s");
            }
        }
        if (lim.max_slew <= 0 || w.currents.rows() < 2) return;
        double worst = 0, worst_t = 0;
        for (Eigen::Index r = 1; r < w.currents.rows(); ++r) {
            double dt = w.t[static_cast<std::size_t>(r)] - w.t[static_cast<std::size_t>(r - 1)];
            double slew = (w.currents.row(r) - w.currents.row(r - 1)).cwiseAbs().maxCoeff() / dt;
            if (slew > worst) {
                worst = slew;
                worst_t = w.t[static_cast<std::size_t>(r)];
            }
        }
        if (worst > lim.max_slew)
            throw SlewError("slew " + std::to_string(worst) + " A/s exceeds limit at t = " + std::to_string(worst_t) + " s", worst_t);
    }
}  // namespace detail

// Samples k / rate for k = 0 .. ceil(T rate). With t_cut set, the schedule runs
// forward to t_cut and then replays itself backwards, I(t) = I(2 t_cut - t).
inline SampledTransport sample_timeline(const TransportTimeline& tl, const std::vector<std::string>& channels,
                                        double sample_rate, std::optional<double> t_cut = std::nullopt,
                                        const WaveformLimits& limits = {}) {
    if (!(sample_rate > 0)) throw DomainError("sample rate must be positive");
    const double T = t_cut ? 2 * *t_cut : tl.duration();
    const auto n = static_cast<std::size_t>(std::ceil(T * sample_rate)) + 1;
    SampledTransport out;
    out.waveform.sample_rate = sample_rate;
    out.waveform.channels = channels;
    out.waveform.currents.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(channels.size()));
    for (std::size_t k = 0; k < n; ++k) {
        double t = static_cast<double>(k) / sample_rate;
        double tq = t;
        if (t_cut && t > *t_cut) tq = std::max(0.0, 2 * *t_cut - t);
        tq = std::min(tq, tl.duration());
        out.waveform.t.push_back(t);
        out.s.push_back(tl.s_at(tq));
        out.waveform.currents.row(static_cast<Eigen::Index>(k)) = tl.currents_at(tq).transpose();
    }
    detail::check_waveform(out.waveform, limits);
    return out;
}

inline CurrentWaveform map_to_time(const TransportTimeline& tl, const std::vector<std::string>& channels,
                                   double sample_rate, const WaveformLimits& limits = {}) {
    return sample_timeline(tl, channels, sample_rate, std::nullopt, limits).waveform;
}

}  // namespace conveyor
