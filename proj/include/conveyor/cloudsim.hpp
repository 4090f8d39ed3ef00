#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "fieldkit.hpp"
#include "motionplan.hpp"
#include "units.hpp"

namespace conveyor {

struct ParticleSpecies {
    std::string name;
    double mass = 0.0;             // kg
    double magnetic_moment = 0.0;  // J/T, weak-field seeker

    void validate() const {
        if (!(mass > 0)) throw ConfigError("species mass must be positive");
        if (!(magnetic_moment > 0)) throw ConfigError("species magnetic moment must be positive");
    }
};

// |F=2, mF=2> of rubidium 87: gF mF = 1.
inline ParticleSpecies rubidium87() { return {"Rb87 |2,2>", 86.909180527 * units::amu, units::mu_B}; }

struct CloudEnsemble {
    std::vector<Vec3> position;
    std::vector<Vec3> velocity;
    double temperature_init = 0.0;
    std::uint64_t rng_seed = 0;

    std::size_t size() const { return position.size(); }
};

// Independent, scheduling-free stream per particle.
inline std::uint64_t particle_seed(std::uint64_t master, std::uint64_t index) {
    std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

struct SampleOptions {
    double envelope = 0.9;  // proposal uses envelope * |J u|
    Vec3 guess = Vec3::Zero();
};

// Thermal cloud in U = mu |B|. Positions are drawn from the linearised trap,
// where |J d| follows a Gamma(3) law, and then thinned against the exact
// field. Velocities are Maxwell-Boltzmann.
inline CloudEnsemble sample_ensemble(const ParticleSpecies& sp, const CoilArray& array, const Eigen::VectorXd& currents,
                                     std::size_t n, double temperature, std::uint64_t seed,
                                     const SampleOptions& opts = {}) {
    sp.validate();
    if (n < 1) throw DomainError("ensemble needs at least one particle");
    if (temperature < 0) throw DomainError("temperature must be non-negative");
    Vec3 x0;
    try {
        x0 = find_field_zero(array, currents, opts.guess);
    } catch (const NoZeroFound& e) {
        throw ConfigError(std::string("initial currents form no trap: ") + e.what());
    }
    const Mat3 J = assembly_field(array, currents, x0).J;
    Eigen::FullPivLU<Mat3> lu(J);
    if (!lu.isInvertible()) throw ConfigError("initial trap has a singular gradient");

    CloudEnsemble ens;
    ens.temperature_init = temperature;
    ens.rng_seed = seed;
    ens.position.resize(n);
    ens.velocity.resize(n);
    const double kT = units::k_B * temperature;
    for (std::size_t i = 0; i < n; ++i) {
        if (temperature == 0) {
            ens.position[i] = x0;
            ens.velocity[i] = Vec3::Zero();
            continue;
        }
        std::mt19937_64 rng(particle_seed(seed, i));
        std::normal_distribution<double> normal(0.0, 1.0);
        std::gamma_distribution<double> radial(3.0, kT / (opts.envelope * sp.magnetic_moment));
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (int attempt = 0;; ++attempt) {
            if (attempt > 10000) throw Error("ensemble sampling rejected too many proposals");
            Vec3 dir(normal(rng), normal(rng), normal(rng));
            double nd = dir.norm();
            if (nd == 0) continue;
            Vec3 u = radial(rng) * dir / nd;
            Vec3 d = lu.solve(u);
            double b = assembly_field(array, currents, x0 + d).B.norm();
            double log_accept = -sp.magnetic_moment * (b - opts.envelope * u.norm()) / kT;
            if (log_accept >= 0 || unit(rng) < std::exp(log_accept)) {
                ens.position[i] = x0 + d;
                break;
            }
        }
        const double sv = std::sqrt(kT / sp.mass);
        ens.velocity[i] = Vec3(sv * normal(rng), sv * normal(rng), sv * normal(rng));
    }
    return ens;
}

// ---------------------------------------------------------------------------
// Field models seen by the integrator

// Second-order expansion about the instantaneous trap zero.
struct TrapFrame {
    Vec3 x0 = Vec3::Zero();
    Vec3 B0 = Vec3::Zero();
    Mat3 J = Mat3::Zero();
    std::array<Mat3, 3> H{Mat3::Zero(), Mat3::Zero(), Mat3::Zero()};
    Vec3 x0_dot = Vec3::Zero();

    // exact gradient of the quadratic model, needed for energy conservation
    void symmetrize() {
        std::array<Mat3, 3> S;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                for (int k = 0; k < 3; ++k) S[k](i, j) = 0.5 * (H[k](i, j) + H[j](i, k));
        H = S;
    }
};

inline TrapFrame lerp(const TrapFrame& a, const TrapFrame& b, double w) {
    TrapFrame f;
    f.x0 = (1 - w) * a.x0 + w * b.x0;
    f.B0 = (1 - w) * a.B0 + w * b.B0;
    f.J = (1 - w) * a.J + w * b.J;
    for (int k = 0; k < 3; ++k) f.H[k] = (1 - w) * a.H[k] + w * b.H[k];
    f.x0_dot = (1 - w) * a.x0_dot + w * b.x0_dot;
    return f;
}

// Fast backend: an exact B, J, H evaluation at the field zero for every
// waveform sample, linearly interpolated in time.
class TaylorField {
public:
    TaylorField(const CoilArray& array, const CurrentWaveform& w, const Vec3& guess) : rate_(w.sample_rate) {
        if (w.size() < 2) throw DomainError("waveform needs at least two samples");
        t0_ = w.t.front();
        duration_ = w.t.back() - w.t.front();
        frames_.resize(w.size());
        Vec3 x = guess;
        for (std::size_t k = 0; k < w.size(); ++k) {
            Eigen::VectorXd I = w.currents.row(static_cast<Eigen::Index>(k)).transpose();
            x = find_field_zero(array, I, x);
            auto f = assembly_field(array, I, x, true);
            auto& fr = frames_[k];
            fr.x0 = x;
            fr.B0 = f.B;
            fr.J = f.J;
            fr.H = *f.H;
            fr.symmetrize();
        }
        for (std::size_t k = 0; k + 1 < frames_.size(); ++k)
            frames_[k].x0_dot = (frames_[k + 1].x0 - frames_[k].x0) / (w.t[k + 1] - w.t[k]);
        frames_.back().x0_dot = frames_[frames_.size() - 2].x0_dot;
    }

    double duration() const { return duration_; }
    const std::vector<TrapFrame>& frames() const { return frames_; }

    TrapFrame frame(double t) const {
        double u = (t - t0_) * rate_;
        if (u <= 0) return frames_.front();
        auto k = static_cast<std::size_t>(u);
        if (k + 1 >= frames_.size()) return frames_.back();
        return lerp(frames_[k], frames_[k + 1], u - static_cast<double>(k));
    }

private:
    double rate_, t0_ = 0, duration_ = 0;
    std::vector<TrapFrame> frames_;
};

// Reference backend: full superposition with currents linearly interpolated
// between waveform samples. At sample times it reproduces assembly_field
// bit for bit.
class ExactField {
public:
    ExactField(const CoilArray& array, const CurrentWaveform& w, const Vec3& guess) : array_(&array), wave_(&w) {
        if (w.size() < 2) throw DomainError("waveform needs at least two samples");
        centers_.resize(w.size());
        Vec3 x = guess;
        for (std::size_t k = 0; k < w.size(); ++k) {
            x = find_field_zero(array, w.currents.row(static_cast<Eigen::Index>(k)).transpose(), x);
            centers_[k] = x;
        }
    }

    double duration() const { return wave_->t.back() - wave_->t.front(); }

    Eigen::VectorXd currents(double t) const {
        const auto& w = *wave_;
        double u = (t - w.t.front()) * w.sample_rate;
        if (u <= 0) return w.currents.row(0).transpose();
        auto k = static_cast<std::size_t>(u);
        if (k + 1 >= w.size()) return w.currents.row(static_cast<Eigen::Index>(w.size() - 1)).transpose();
        double a = u - static_cast<double>(k);
        return ((1 - a) * w.currents.row(static_cast<Eigen::Index>(k)) + a * w.currents.row(static_cast<Eigen::Index>(k + 1))).transpose();
    }

    Vec3 center(double t) const {
        const auto& w = *wave_;
        double u = (t - w.t.front()) * w.sample_rate;
        if (u <= 0) return centers_.front();
        auto k = static_cast<std::size_t>(u);
        if (k + 1 >= centers_.size()) return centers_.back();
        double a = u - static_cast<double>(k);
        return (1 - a) * centers_[k] + a * centers_[k + 1];
    }

    FieldSample sample(const Vec3& x, double t) const { return assembly_field(*array_, currents(t), x); }

private:
    const CoilArray* array_;
    const CurrentWaveform* wave_;
    std::vector<Vec3> centers_;
};

// ---------------------------------------------------------------------------
// Propagation

struct LossEvent {
    double time = 0;
    Vec3 position = Vec3::Zero();
    std::string cause;  // "aperture" or "majorana"
};

struct PropagateOptions {
    double dt = 10e-6;  // s
    double trap_radius = 6.25e-3;  // m from the instantaneous zero; <= 0 disables
    bool majorana = false;
    double majorana_floor = 0.5 * units::gauss;  // T
    Vec3 gravity = Vec3::Zero();
    unsigned threads = 1;
    bool track_energy = false;
};

struct TransportResult {
    double retained_fraction = 1.0;
    double epsilon = std::numeric_limits<double>::quiet_NaN();  // set in round-trip mode
    double background_survival = 1.0;
    double final_temperature_proxy = 0.0;  // K, survivors, trap frame
    std::size_t initial = 0, survivors = 0;
    std::vector<LossEvent> loss_events;
    double max_energy_drift = 0.0;  // relative, when tracked with losses off
};

namespace detail {

    struct Block {
        std::vector<double> x, y, z, vx, vy, vz, ax, ay, az, e0;
        std::vector<std::uint32_t> id;
        std::vector<unsigned char> lost;
        std::size_t n = 0;

        void resize(std::size_t m) {
            for (auto* v : {&x, &y, &z, &vx, &vy, &vz, &ax, &ay, &az, &e0}) v->assign(m, 0.0);
            id.assign(m, 0);
            lost.assign(m, 0);
            n = m;
        }
        void move(std::size_t to, std::size_t from) {
            for (auto* v : {&x, &y, &z, &vx, &vy, &vz, &ax, &ay, &az, &e0}) (*v)[to] = (*v)[from];
            id[to] = id[from];
            lost[to] = lost[from];
        }
    };

    // B and grad|B| of the quadratic model at offset (ux, uy, uz); returns |B|.
    inline double taylor_eval(const TrapFrame& f, double ux, double uy, double uz, double& gx, double& gy, double& gz,
                              double* Bout = nullptr, double* Jout = nullptr) {
        double Je[3][3];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                Je[i][j] = f.J(i, j) + f.H[0](i, j) * ux + f.H[1](i, j) * uy + f.H[2](i, j) * uz;
        double B[3];
        for (int i = 0; i < 3; ++i)
            B[i] = f.B0[i] + 0.5 * ((f.J(i, 0) + Je[i][0]) * ux + (f.J(i, 1) + Je[i][1]) * uy + (f.J(i, 2) + Je[i][2]) * uz);
        double b = std::sqrt(B[0] * B[0] + B[1] * B[1] + B[2] * B[2]);
        double inv = b > 0 ? 1.0 / b : 0.0;
        gx = (Je[0][0] * B[0] + Je[1][0] * B[1] + Je[2][0] * B[2]) * inv;
        gy = (Je[0][1] * B[0] + Je[1][1] * B[1] + Je[2][1] * B[2]) * inv;
        gz = (Je[0][2] * B[0] + Je[1][2] * B[1] + Je[2][2] * B[2]) * inv;
        if (Bout)
            for (int i = 0; i < 3; ++i) Bout[i] = B[i];
        if (Jout)
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) Jout[3 * i + j] = Je[i][j];
        return b;
    }

    // Plain-array copy of a frame so the hot loop sees only scalars.
    struct FlatFrame {
        double B0[3], J[9], H[27];  // H[9 k + 3 i + j] = d2 B_i / dx_j dx_k

        explicit FlatFrame(const TrapFrame& f) {
            for (int i = 0; i < 3; ++i) {
                B0[i] = f.B0[i];
                for (int j = 0; j < 3; ++j) {
                    J[3 * i + j] = f.J(i, j);
                    for (int k = 0; k < 3; ++k) H[9 * k + 3 * i + j] = f.H[k](i, j);
                }
            }
        }
    };

    // grad|B| of the quadratic model; same arithmetic as taylor_eval.
    inline void taylor_grad(const FlatFrame& f, double ux, double uy, double uz, double& gx, double& gy, double& gz) {
        double Je[9], B[3];
        for (int m = 0; m < 9; ++m) Je[m] = f.J[m] + f.H[m] * ux + f.H[9 + m] * uy + f.H[18 + m] * uz;
        for (int i = 0; i < 3; ++i)
            B[i] = f.B0[i] + 0.5 * ((f.J[3 * i] + Je[3 * i]) * ux + (f.J[3 * i + 1] + Je[3 * i + 1]) * uy +
                                    (f.J[3 * i + 2] + Je[3 * i + 2]) * uz);
        // the offset only matters at B = 0 exactly, where the numerators vanish
        double inv = 1.0 / std::sqrt(B[0] * B[0] + B[1] * B[1] + B[2] * B[2] + 1e-300);
        gx = (Je[0] * B[0] + Je[3] * B[1] + Je[6] * B[2]) * inv;
        gy = (Je[1] * B[0] + Je[4] * B[1] + Je[7] * B[2]) * inv;
        gz = (Je[2] * B[0] + Je[5] * B[1] + Je[8] * B[2]) * inv;
    }

    // One velocity Verlet step for n particles in the quadratic model; flags
    // particles beyond sqrt(R2) from the centre and returns how many.
    inline unsigned verlet_step(std::size_t n, double* __restrict px, double* __restrict py, double* __restrict pz,
                                double* __restrict vx, double* __restrict vy, double* __restrict vz,
                                double* __restrict ax, double* __restrict ay, double* __restrict az,
                                unsigned char* __restrict lost, const FlatFrame& ff, double cx, double cy, double cz,
                                double qm, double gxv, double gyv, double gzv, double dt, double R2) {
        for (std::size_t i = 0; i < n; ++i) {
            px[i] += (vx[i] + 0.5 * ax[i] * dt) * dt;
            py[i] += (vy[i] + 0.5 * ay[i] * dt) * dt;
            pz[i] += (vz[i] + 0.5 * az[i] * dt) * dt;
            const double ux = px[i] - cx, uy = py[i] - cy, uz = pz[i] - cz;
            double gx, gy, gz;
            taylor_grad(ff, ux, uy, uz, gx, gy, gz);
            const double nax = -qm * gx + gxv, nay = -qm * gy + gyv, naz = -qm * gz + gzv;
            vx[i] += 0.5 * (ax[i] + nax) * dt;
            vy[i] += 0.5 * (ay[i] + nay) * dt;
            vz[i] += 0.5 * (az[i] + naz) * dt;
            ax[i] = nax;
            ay[i] = nay;
            az[i] = naz;
        }
        // separate pass: mixing byte and double lanes blocks vectorisation above
        unsigned n_out = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double ux = px[i] - cx, uy = py[i] - cy, uz = pz[i] - cz;
            const bool out_r = ux * ux + uy * uy + uz * uz > R2;
            lost[i] = out_r;
            n_out += out_r;
        }
        return n_out;
    }

    // Field-direction rotation rate against the Larmor frequency.
    inline bool majorana_flip(const double* B, const double* Je, double b, double vx, double vy, double vz,
                              const ParticleSpecies& sp, double floor) {
        if (b >= floor) return false;
        if (b == 0) return true;
        double dB[3];
        for (int i = 0; i < 3; ++i) dB[i] = Je[3 * i] * vx + Je[3 * i + 1] * vy + Je[3 * i + 2] * vz;
        Vec3 bh(B[0] / b, B[1] / b, B[2] / b), d(dB[0], dB[1], dB[2]);
        double omega = bh.cross(d).norm() / b;
        double larmor = sp.magnetic_moment * b / units::hbar;
        return omega > larmor;
    }

    struct BlockOutcome {
        std::vector<LossEvent> events;
        std::vector<std::uint32_t> event_ids;
        double max_drift = 0;
        Block final;
    };

    // Velocity Verlet over one block of particles with the expansion backend.
    inline BlockOutcome run_taylor_block(Block b, const TaylorField& field, const ParticleSpecies& sp,
                                         const PropagateOptions& o, std::size_t steps) {
        const double qm = sp.magnetic_moment / sp.mass;
        const double dt = o.dt;
        const double gxv = o.gravity.x(), gyv = o.gravity.y(), gzv = o.gravity.z();
        const double R2 = o.trap_radius > 0 ? o.trap_radius * o.trap_radius : std::numeric_limits<double>::infinity();
        BlockOutcome out;

        auto energy = [&](const TrapFrame& f, std::size_t i) {
            double gx, gy, gz;
            double bmag = taylor_eval(f, b.x[i] - f.x0.x(), b.y[i] - f.x0.y(), b.z[i] - f.x0.z(), gx, gy, gz);
            double v2 = b.vx[i] * b.vx[i] + b.vy[i] * b.vy[i] + b.vz[i] * b.vz[i];
            return 0.5 * sp.mass * v2 + sp.magnetic_moment * bmag - sp.mass * (gxv * b.x[i] + gyv * b.y[i] + gzv * b.z[i]);
        };

        {
            TrapFrame f = field.frame(0.0);
            for (std::size_t i = 0; i < b.n; ++i) {
                double gx, gy, gz;
                taylor_eval(f, b.x[i] - f.x0.x(), b.y[i] - f.x0.y(), b.z[i] - f.x0.z(), gx, gy, gz);
                b.ax[i] = -qm * gx + gxv;
                b.ay[i] = -qm * gy + gyv;
                b.az[i] = -qm * gz + gzv;
                if (o.track_energy) b.e0[i] = energy(f, i);
            }
        }

        for (std::size_t step = 1; step <= steps && b.n > 0; ++step) {
            const double t = static_cast<double>(step) * dt;
            const TrapFrame f = field.frame(t);
            const FlatFrame ff(f);
            const double cx = f.x0.x(), cy = f.x0.y(), cz = f.x0.z();
            const std::size_t n = b.n;
            double* px = b.x.data();
            double* py = b.y.data();
            double* pz = b.z.data();
            double* vx = b.vx.data();
            double* vy = b.vy.data();
            double* vz = b.vz.data();
            unsigned char* lost = b.lost.data();
            const unsigned n_out = verlet_step(n, px, py, pz, vx, vy, vz, b.ax.data(), b.ay.data(), b.az.data(), lost,
                                               ff, cx, cy, cz, qm, gxv, gyv, gzv, dt, R2);
            bool any_lost = n_out > 0;
            if (o.majorana) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (lost[i]) continue;
                    double gx, gy, gz, B[3], Je[9];
                    double bm = taylor_eval(f, px[i] - cx, py[i] - cy, pz[i] - cz, gx, gy, gz, B, Je);
                    if (majorana_flip(B, Je, bm, vx[i] - f.x0_dot.x(), vy[i] - f.x0_dot.y(), vz[i] - f.x0_dot.z(), sp,
                                      o.majorana_floor)) {
                        lost[i] = 2;
                        any_lost = true;
                    }
                }
            }
            if (any_lost) {
                std::size_t w = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (lost[i]) {
                        out.events.push_back({t, Vec3(px[i], py[i], pz[i]), lost[i] == 2 ? "majorana" : "aperture"});
                        out.event_ids.push_back(b.id[i]);
                    } else {
                        if (w != i) b.move(w, i);
                        ++w;
                    }
                }
                b.n = w;
            }
        }
        if (o.track_energy) {
            TrapFrame f = field.frame(static_cast<double>(steps) * dt);
            for (std::size_t i = 0; i < b.n; ++i)
                out.max_drift = std::max(out.max_drift, std::abs(energy(f, i) - b.e0[i]) / std::abs(b.e0[i]));
        }
        out.final = std::move(b);
        return out;
    }

    inline BlockOutcome run_exact_block(Block b, const ExactField& field, const ParticleSpecies& sp,
                                        const PropagateOptions& o, std::size_t steps) {
        const double qm = sp.magnetic_moment / sp.mass;
        const double dt = o.dt;
        const double R2 = o.trap_radius > 0 ? o.trap_radius * o.trap_radius : std::numeric_limits<double>::infinity();
        BlockOutcome out;
        auto grad = [&](const FieldSample& f) -> Vec3 {
            double bm = f.B.norm();
            return bm > 0 ? Vec3(f.J.transpose() * f.B / bm) : Vec3::Zero();
        };
        auto energy = [&](std::size_t i, double t) {
            Vec3 x(b.x[i], b.y[i], b.z[i]), v(b.vx[i], b.vy[i], b.vz[i]);
            return 0.5 * sp.mass * v.squaredNorm() + sp.magnetic_moment * field.sample(x, t).B.norm() - sp.mass * o.gravity.dot(x);
        };
        for (std::size_t i = 0; i < b.n; ++i) {
            Vec3 a = -qm * grad(field.sample(Vec3(b.x[i], b.y[i], b.z[i]), 0.0)) + o.gravity;
            b.ax[i] = a.x();
            b.ay[i] = a.y();
            b.az[i] = a.z();
            if (o.track_energy) b.e0[i] = energy(i, 0.0);
        }
        for (std::size_t step = 1; step <= steps && b.n > 0; ++step) {
            const double t = static_cast<double>(step) * dt;
            const Vec3 c = field.center(t);
            std::size_t w = 0;
            for (std::size_t i = 0; i < b.n; ++i) {
                Vec3 x(b.x[i], b.y[i], b.z[i]), v(b.vx[i], b.vy[i], b.vz[i]), a(b.ax[i], b.ay[i], b.az[i]);
                x += (v + 0.5 * a * dt) * dt;
                auto f = field.sample(x, t);
                Vec3 na = -qm * grad(f) + o.gravity;
                v += 0.5 * (a + na) * dt;
                b.x[i] = x.x(), b.y[i] = x.y(), b.z[i] = x.z();
                b.vx[i] = v.x(), b.vy[i] = v.y(), b.vz[i] = v.z();
                b.ax[i] = na.x(), b.ay[i] = na.y(), b.az[i] = na.z();
                const char* cause = nullptr;
                if ((x - c).squaredNorm() > R2) cause = "aperture";
                else if (o.majorana) {
                    double Bv[3] = {f.B.x(), f.B.y(), f.B.z()};
                    double Je[9];
                    for (int r = 0; r < 3; ++r)
                        for (int q = 0; q < 3; ++q) Je[3 * r + q] = f.J(r, q);
                    if (majorana_flip(Bv, Je, f.B.norm(), v.x(), v.y(), v.z(), sp, o.majorana_floor)) cause = "majorana";
                }
                if (cause) {
                    out.events.push_back({t, x, cause});
                    out.event_ids.push_back(b.id[i]);
                } else {
                    if (w != i) b.move(w, i);
                    ++w;
                }
            }
            b.n = w;
        }
        if (o.track_energy) {
            double T = static_cast<double>(steps) * dt;
            for (std::size_t i = 0; i < b.n; ++i)
                out.max_drift = std::max(out.max_drift, std::abs(energy(i, T) - b.e0[i]) / std::abs(b.e0[i]));
        }
        out.final = std::move(b);
        return out;
    }

    inline BlockOutcome run_block(Block b, const TaylorField& f, const ParticleSpecies& sp, const PropagateOptions& o,
                                  std::size_t steps) {
        return run_taylor_block(std::move(b), f, sp, o, steps);
    }
    inline BlockOutcome run_block(Block b, const ExactField& f, const ParticleSpecies& sp, const PropagateOptions& o,
                                  std::size_t steps) {
        return run_exact_block(std::move(b), f, sp, o, steps);
    }

    inline Vec3 field_velocity(const TaylorField& f, double t) { return f.frame(t).x0_dot; }
    inline Vec3 field_velocity(const ExactField& f, double t) {
        const double h = 1e-4;
        return (f.center(t) - f.center(std::max(0.0, t - h))) / h;
    }

}  // namespace detail

// Integrates m dv/dt = -mu grad|B| (+ m g) with velocity Verlet for the full
// duration of the field model. Particles are independent, so blocks may run on
// separate threads; results are merged in particle order and do not depend on
// the thread count.
template <class Field>
TransportResult propagate(const CloudEnsemble& ens, const Field& field, const ParticleSpecies& sp,
                          const PropagateOptions& o = {}) {
    sp.validate();
    if (!(o.dt > 0)) throw DomainError("time step must be positive");
    const auto steps = static_cast<std::size_t>(std::llround(field.duration() / o.dt));
    const std::size_t n = ens.size();
    const unsigned nt = std::max(1u, std::min<unsigned>(o.threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));

    std::vector<detail::BlockOutcome> results(nt);
    auto work = [&](unsigned k) {
        std::size_t lo = n * k / nt, hi = n * (k + 1) / nt;
        detail::Block b;
        b.resize(hi - lo);
        for (std::size_t i = lo; i < hi; ++i) {
            std::size_t j = i - lo;
            b.x[j] = ens.position[i].x(), b.y[j] = ens.position[i].y(), b.z[j] = ens.position[i].z();
            b.vx[j] = ens.velocity[i].x(), b.vy[j] = ens.velocity[i].y(), b.vz[j] = ens.velocity[i].z();
            b.id[j] = static_cast<std::uint32_t>(i);
        }
        results[k] = detail::run_block(std::move(b), field, sp, o, steps);
    };
    if (nt == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (unsigned k = 0; k < nt; ++k) pool.emplace_back(work, k);
        for (auto& th : pool) th.join();
    }

    TransportResult r;
    r.initial = n;
    std::vector<std::pair<std::uint32_t, LossEvent>> events;
    const double T = static_cast<double>(steps) * o.dt;
    const Vec3 trap_v = detail::field_velocity(field, T);
    double ke = 0;
    // survivors are summed in particle order so the proxy is scheduling-free
    std::vector<std::pair<std::uint32_t, double>> kin;
    for (auto& res : results) {
        r.survivors += res.final.n;
        r.max_energy_drift = std::max(r.max_energy_drift, res.max_drift);
        for (std::size_t e = 0; e < res.events.size(); ++e) events.emplace_back(res.event_ids[e], res.events[e]);
        for (std::size_t i = 0; i < res.final.n; ++i) {
            Vec3 v(res.final.vx[i], res.final.vy[i], res.final.vz[i]);
            kin.emplace_back(res.final.id[i], (v - trap_v).squaredNorm());
        }
    }
    std::sort(kin.begin(), kin.end(), [](auto& a, auto& b) { return a.first < b.first; });
    for (auto& [id, v2] : kin) ke += v2;
    std::stable_sort(events.begin(), events.end(), [](auto& a, auto& b) {
        return a.second.time < b.second.time || (a.second.time == b.second.time && a.first < b.first);
    });
    for (auto& e : events) r.loss_events.push_back(std::move(e.second));
    r.retained_fraction = n ? static_cast<double>(r.survivors) / static_cast<double>(n) : 1.0;
    r.final_temperature_proxy = r.survivors ? sp.mass * ke / (3 * units::k_B * static_cast<double>(r.survivors)) : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// Background-gas survival and the efficiency metric

struct BackgroundStage {
    std::string label;
    double s_begin = 0, s_end = 0;  // m, half-open
    double lifetime = 0;            // s
};

inline double stage_rate(const std::vector<BackgroundStage>& stages, double s) {
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const auto& st = stages[i];
        bool last = i + 1 == stages.size();
        if (s >= st.s_begin - 1e-12 && (s < st.s_end - 1e-12 || (last && s <= st.s_end + 1e-12)))
            return 1.0 / st.lifetime;
    }
    return 0.0;
}

// exp(-int dt / tau(s(t))) by the trapezoid rule over waveform samples.
inline double background_survival(const std::vector<double>& t, const std::vector<double>& s,
                                  const std::vector<BackgroundStage>& stages) {
    if (stages.empty() || t.size() < 2) return 1.0;
    double integral = 0;
    for (std::size_t k = 1; k < t.size(); ++k)
        integral += 0.5 * (stage_rate(stages, s[k - 1]) + stage_rate(stages, s[k])) * (t[k] - t[k - 1]);
    return std::exp(-integral);
}

enum class FieldBackend { taylor, exact };

struct EfficiencyPoint {
    double s_cut = 0;
    double epsilon = 1;
    double retained_fraction = 1;
    double background_survival = 1;
};

// Round trips to each cut position. epsilon^2 is the fraction that comes back,
// counting both the dynamical losses and background-gas collisions.
inline std::vector<EfficiencyPoint> efficiency_curve(const CloudEnsemble& ens, const CoilArray& array,
                                                     const std::function<SampledTransport(double)>& round_trip,
                                                     const std::vector<double>& cuts, const ParticleSpecies& sp,
                                                     const std::vector<BackgroundStage>& stages,
                                                     const PropagateOptions& o = {},
                                                     FieldBackend backend = FieldBackend::taylor,
                                                     const Vec3& guess = Vec3::Zero()) {
    std::vector<EfficiencyPoint> out;
    for (double s : cuts) {
        EfficiencyPoint p;
        p.s_cut = s;
        if (s <= 0) {
            out.push_back(p);
            continue;
        }
        auto run = round_trip(s);
        TransportResult r = backend == FieldBackend::taylor
                                ? propagate(ens, TaylorField(array, run.waveform, guess), sp, o)
                                : propagate(ens, ExactField(array, run.waveform, guess), sp, o);
        p.retained_fraction = r.retained_fraction;
        p.background_survival = background_survival(run.waveform.t, run.s, stages);
        p.epsilon = std::sqrt(p.retained_fraction * p.background_survival);
        out.push_back(p);
    }
    return out;
}

}  // namespace conveyor
