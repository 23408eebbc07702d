#pragma once

// Multimode continuous stirred tank reactor with a PI loop on coolant flow.
//
// States: reactant concentration C [kmol/m3], reactor temperature T [K],
// jacket temperature Tc [K] and the controller integral I [K min].
//
//   dC/dt  = F/V (Ci - C) - a k(T) C,            k(T) = k0 exp(-E/(R T))
//   dT/dt  = F/V (Ti - T) + J a k(T) C - b hr (T - Tc)
//   dTc/dt = Qc/Vc (Tci - Tc) + b hj (T - Tc)
//
// Qc is the coolant flow in L/min, driven by a PI controller on the measured
// reactor temperature. Time is in minutes; the plant is integrated with RK4 at
// one-second steps and sampled once per minute.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fgcrn/data.hpp"
#include "fgcrn/error.hpp"
#include "fgcrn/random.hpp"

namespace fgcrn::cstr {

enum class Fault : int { N = 0, F1, F2, F3, F4, F5, F6, F7, F8, F9 };

inline constexpr int kNumFaults = 10;

inline std::string fault_name(Fault f) {
    const int i = static_cast<int>(f);
    return i == 0 ? "N" : "F" + std::to_string(i);
}

inline Fault parse_fault(const std::string& s) {
    for (int i = 0; i < kNumFaults; ++i)
        if (fault_name(static_cast<Fault>(i)) == s) return static_cast<Fault>(i);
    throw ConfigError("unknown CSTR fault id '" + s + "' (expected N or F1..F9)");
}

// Measured channel order.
inline constexpr std::array<const char*, 7> kChannelNames = {"Ci", "Ti", "C", "T", "Qc", "Tci", "Tc"};
inline constexpr std::size_t kNumChannels = kChannelNames.size();

struct Plant {
    double volume = 1.0;          // m3
    double feed_flow = 1.0;       // m3/min
    double jacket_volume = 0.25;  // m3
    double ci0 = 2.0;             // kmol/m3
    double ti0 = 323.0;           // K
    double tci0 = 300.0;          // K
    double k0 = 1.0e10;           // 1/min
    double e_over_r = 8330.0;     // K
    double heat_gain = 130.0;     // K m3/kmol, (-dH)/(rho cp)
    double hr = 7.0;              // 1/min, UA/(rho cp V)
    double hj = 28.0;             // 1/min, UA/(rho_c cp_c Vc)
    double kc = 400.0;            // L/min per K
    double tau_i = 2.0;           // min
    double qc_max = 20000.0;      // L/min
    double dt = 1.0 / 60.0;       // min (1 s)
};

struct Scenario {
    std::vector<double> mode_setpoints{394.0};  // K
    Fault fault = Fault::N;
    double duration_min = 1200.0;
    double fault_start_min = 200.0;
    std::vector<double> noise_std{0.002};  // relative to nominal level; one value or one per channel
    std::uint64_t seed = 0;

    void validate() const {
        if (mode_setpoints.empty()) throw ConfigError("scenario: at least one mode setpoint required");
        if (!(duration_min >= 1.0)) throw ConfigError("scenario: duration_min must be >= 1");
        if (!(fault_start_min < duration_min)) throw ConfigError("scenario: fault_start_min must be < duration_min");
        if (fault_start_min < 0) throw ConfigError("scenario: fault_start_min must be >= 0");
        if (noise_std.size() != 1 && noise_std.size() != kNumChannels)
            throw ConfigError("scenario: noise_std needs 1 or 7 values");
        for (double s : noise_std)
            if (!(s >= 0)) throw ConfigError("scenario: noise_std must be >= 0");
    }
};

struct State {
    double c = 0, t = 0, tc = 0, integral = 0;
};

// Fault-dependent inputs at `elapsed` minutes since injection (negative = before).
struct Inputs {
    double ci, ti, tci, activity, fouling;
    double c_bias, t_bias, tc_bias, qc_offset;
};

inline Inputs fault_inputs(const Plant& p, Fault f, double elapsed) {
    Inputs in{p.ci0, p.ti0, p.tci0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0};
    if (elapsed < 0) return in;
    const double t = elapsed;
    switch (f) {
        case Fault::N: break;
        case Fault::F1: in.ci = p.ci0 + 0.001 * t; break;
        case Fault::F2: in.ti = p.ti0 + 0.05 * t; break;
        case Fault::F3: in.c_bias = 0.001 * t; break;
        case Fault::F4: in.t_bias = 0.05 * t; break;
        case Fault::F5: in.qc_offset = -0.1 * t; break;
        case Fault::F6: in.tci = p.tci0 + 0.05 * t; break;
        case Fault::F7: in.tc_bias = 0.05 * t; break;
        case Fault::F8: in.activity = std::exp(-0.0005 * t); break;
        case Fault::F9: in.fouling = std::exp(-0.001 * t); break;
    }
    return in;
}

inline double rate_constant(const Plant& p, double temp) { return p.k0 * std::exp(-p.e_over_r / temp); }

struct SteadyState {
    State state;
    double qc = 0;  // L/min
};

// Fault-free operating point holding T at the setpoint.
inline SteadyState steady_state(const Plant& p, double setpoint) {
    const double k = rate_constant(p, setpoint);
    const double dil = p.feed_flow / p.volume;
    SteadyState ss;
    ss.state.t = setpoint;
    ss.state.c = dil * p.ci0 / (dil + k);
    const double removal = dil * (p.ti0 - setpoint) + p.heat_gain * k * ss.state.c;
    if (!(removal > 0))
        throw ConfigError("CSTR setpoint " + std::to_string(setpoint) + " K needs heating, not cooling");
    ss.state.tc = setpoint - removal / p.hr;
    if (!(ss.state.tc > p.tci0))
        throw ConfigError("CSTR setpoint " + std::to_string(setpoint) + " K is beyond the coolant capacity");
    ss.qc = 1000.0 * p.jacket_volume * p.hj * (setpoint - ss.state.tc) / (ss.state.tc - p.tci0);
    ss.state.integral = 0.0;
    if (!(ss.qc > 0 && ss.qc < p.qc_max))
        throw ConfigError("CSTR setpoint " + std::to_string(setpoint) + " K needs coolant flow outside [0, qc_max]");
    return ss;
}

struct Controller {
    double setpoint;
    double bias;  // steady-state coolant flow
};

inline double controller_output(const Plant& p, const Controller& ctl, double t_measured, double integral) {
    return ctl.bias + p.kc * (t_measured - ctl.setpoint) + p.kc / p.tau_i * integral;
}

// Right-hand side of the closed loop. `commanded` receives the controller output.
inline std::array<double, 4> derivatives(const Plant& p, const Controller& ctl, const Inputs& in, const State& s,
                                         double* commanded = nullptr) {
    const double t_meas = s.t + in.t_bias;
    const double err = t_meas - ctl.setpoint;
    const double raw = controller_output(p, ctl, t_meas, s.integral);
    const double u = std::clamp(raw, 0.0, p.qc_max);
    if (commanded) *commanded = u;
    // integrator frozen while saturated and the error pushes further into saturation
    const bool windup = (raw > p.qc_max && err > 0) || (raw < 0 && err < 0);
    const double flow = std::max(u + in.qc_offset, 0.0) / 1000.0;  // m3/min
    const double rate = in.activity * rate_constant(p, s.t) * s.c;
    const double dil = p.feed_flow / p.volume;
    const double exchange = in.fouling * (s.t - s.tc);
    return {dil * (in.ci - s.c) - rate,
            dil * (in.ti - s.t) + p.heat_gain * rate - p.hr * exchange,
            flow / p.jacket_volume * (in.tci - s.tc) + p.hj * exchange,
            windup ? 0.0 : err};
}

inline State rk4_step(const Plant& p, const Controller& ctl, Fault f, double fault_start, double time,
                      const State& s) {
    auto add = [](const State& a, const std::array<double, 4>& d, double h) {
        return State{a.c + h * d[0], a.t + h * d[1], a.tc + h * d[2], a.integral + h * d[3]};
    };
    const double h = p.dt;
    auto in_at = [&](double tm) { return fault_inputs(p, f, tm - fault_start); };
    const auto k1 = derivatives(p, ctl, in_at(time), s);
    const auto k2 = derivatives(p, ctl, in_at(time + h / 2), add(s, k1, h / 2));
    const auto k3 = derivatives(p, ctl, in_at(time + h / 2), add(s, k2, h / 2));
    const auto k4 = derivatives(p, ctl, in_at(time + h), add(s, k3, h));
    State out;
    out.c = s.c + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]);
    out.t = s.t + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]);
    out.tc = s.tc + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]);
    out.integral = s.integral + h / 6 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3]);
    return out;
}

// Largest real part of the closed-loop Jacobian eigenvalues at the setpoint.
inline double closed_loop_stability_margin(const Plant& p, double setpoint) {
    const SteadyState ss = steady_state(p, setpoint);
    const Controller ctl{setpoint, ss.qc};
    const Inputs in = fault_inputs(p, Fault::N, -1.0);
    auto f = [&](const Eigen::Vector4d& x) {
        const auto d = derivatives(p, ctl, in, State{x[0], x[1], x[2], x[3]});
        return Eigen::Vector4d(d[0], d[1], d[2], d[3]);
    };
    const Eigen::Vector4d x0(ss.state.c, ss.state.t, ss.state.tc, ss.state.integral);
    Eigen::Matrix4d jac;
    for (int j = 0; j < 4; ++j) {
        const double h = 1e-6 * std::max(1.0, std::abs(x0[j]));
        Eigen::Vector4d xp = x0, xm = x0;
        xp[j] += h;
        xm[j] -= h;
        jac.col(j) = (f(xp) - f(xm)) / (2 * h);
    }
    return Eigen::EigenSolver<Eigen::Matrix4d>(jac).eigenvalues().real().maxCoeff();
}

struct Measurement {
    std::array<double, kNumChannels> values;
};

inline Measurement measure(const Plant& p, const Controller& ctl, const Inputs& in, const State& s) {
    double commanded = 0;
    derivatives(p, ctl, in, s, &commanded);
    return {{in.ci, in.ti, s.c + in.c_bias, s.t + in.t_bias, commanded, in.tci, s.tc + in.tc_bias}};
}

// One sub-series per mode setpoint, each starting from that mode's steady
// state, concatenated in setpoint order. Steps at or after fault_start_min
// carry the fault label.
inline RawSeries simulate(const Scenario& sc, const Plant& plant = {}) {
    sc.validate();
    const auto steps_per_mode = static_cast<std::size_t>(std::floor(sc.duration_min));
    const auto substeps = static_cast<std::size_t>(std::llround(1.0 / plant.dt));

    std::vector<SteadyState> steady;
    for (double sp : sc.mode_setpoints) {
        steady.push_back(steady_state(plant, sp));
        if (closed_loop_stability_margin(plant, sp) >= 0)
            throw ConfigError("CSTR controller is unstable at setpoint " + std::to_string(sp) + " K");
    }

    // Noise scale: fraction of each channel's nominal level in the first mode.
    std::array<double, kNumChannels> sigma{};
    {
        const Controller ctl{sc.mode_setpoints[0], steady[0].qc};
        const auto nominal = measure(plant, ctl, fault_inputs(plant, Fault::N, -1.0), steady[0].state);
        for (std::size_t v = 0; v < kNumChannels; ++v) {
            const double rel = sc.noise_std.size() == 1 ? sc.noise_std[0] : sc.noise_std[v];
            sigma[v] = rel * std::abs(nominal.values[v]);
        }
    }

    RawSeries out;
    out.num_vars = kNumChannels;
    out.num_steps = steps_per_mode * sc.mode_setpoints.size();
    out.sample_period = 60.0;
    out.values.resize(out.num_vars * out.num_steps);
    out.labels.resize(out.num_steps);
    out.modes.resize(out.num_steps);

    Rng rng(sc.seed);
    std::size_t row = 0;
    for (std::size_t m = 0; m < sc.mode_setpoints.size(); ++m) {
        const Controller ctl{sc.mode_setpoints[m], steady[m].qc};
        State s = steady[m].state;
        for (std::size_t minute = 0; minute < steps_per_mode; ++minute, ++row) {
            const double now = static_cast<double>(minute);
            if (minute > 0) {
                for (std::size_t k = 0; k < substeps; ++k) {
                    const double t0 = now - 1.0 + static_cast<double>(k) * plant.dt;
                    s = rk4_step(plant, ctl, sc.fault, sc.fault_start_min, t0, s);
                    if (!std::isfinite(s.c) || !std::isfinite(s.t) || !std::isfinite(s.tc) ||
                        !std::isfinite(s.integral))
                        throw NumericError("CSTR integration diverged in mode " + std::to_string(m) + " at minute " +
                                           std::to_string(minute) + " (step " + std::to_string(row) + ")");
                }
            }
            const Inputs in = fault_inputs(plant, sc.fault, now - sc.fault_start_min);
            const auto meas = measure(plant, ctl, in, s);
            for (std::size_t v = 0; v < kNumChannels; ++v)
                out.values[v * out.num_steps + row] = meas.values[v] + sigma[v] * normal01(rng);
            out.labels[row] = now >= sc.fault_start_min ? static_cast<int>(sc.fault) : 0;
            out.modes[row] = static_cast<int>(m);
        }
    }
    return out;
}

}  // namespace fgcrn::cstr
