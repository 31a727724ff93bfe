#pragma once

// Distributed longitudinal MPC on the spacing-deviation / speed-difference /
// acceleration error state, solved in condensed form over the jerk sequence
// γ_0..γ_Np.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "merge_stack/qp.hpp"
#include "merge_stack/scenario.hpp"

namespace merge_stack::lon {

/// (Δd, Δv, a): spacing deviation, predecessor speed minus own speed, own
/// acceleration.
struct LonState {
    double delta_d = 0.0;
    double delta_v = 0.0;
    double accel = 0.0;

    [[nodiscard]] Eigen::Vector3d vec() const { return {delta_d, delta_v, accel}; }
    static LonState from(const Eigen::Vector3d& x) { return {x(0), x(1), x(2)}; }

    bool operator==(const LonState&) const = default;
};

struct DiscreteModel {
    Eigen::Matrix3d a;
    Eigen::Vector3d b;
    Eigen::Vector3d d;
};

inline DiscreteModel discrete_model(double ts) {
    DiscreteModel m;
    m.a << 1.0, ts, 0.0, 0.0, 1.0, -ts, 0.0, 0.0, 1.0;
    m.b << 0.0, 0.0, ts;
    m.d << 0.0, ts, 0.0;
    return m;
}

inline LonState step_dynamics(const LonState& x, double gamma, double a_prev, double ts) {
    const auto m = discrete_model(ts);
    return LonState::from(m.a * x.vec() + m.b * gamma + m.d * a_prev);
}

/// Rate of change of acceleration produced by the driveline for a torque
/// command.
inline double driveline_accel_rate(double t_des, double t_actual, double v, const DrivelineParams& p) {
    return p.eta / (p.mass * p.tire_radius * p.time_lag) * (t_des - t_actual) - p.f_roll * p.mass * p.gravity -
           0.5 * p.air_density * p.drag_coefficient * p.frontal_area * v * v;
}

/// Torque command that realizes `gamma`; inverse of driveline_accel_rate.
inline double desired_torque(double gamma, double t_actual, double v, const DrivelineParams& p) {
    const double resist = p.f_roll * p.mass * p.gravity + 0.5 * p.air_density * p.drag_coefficient * p.frontal_area * v * v;
    return t_actual + (gamma + resist) * (p.mass * p.tire_radius * p.time_lag) / p.eta;
}

inline constexpr int kNoMergeStep = std::numeric_limits<int>::max();

/// First horizon step at which the follower, shadowing its predecessor's plan
/// at the current gap, would reach the merge point. kNoMergeStep when it
/// never does; 0 on a shared road.
inline int compute_k_star(const Eigen::VectorXd& pred_pos, double current_spacing, bool same_road) {
    if (same_road) return 0;
    for (Eigen::Index k = 0; k < pred_pos.size(); ++k)
        if (pred_pos(k) - current_spacing >= 0.0) return static_cast<int>(k);
    return kNoMergeStep;
}

inline bool safety_active(const LonState& x0, int k_star, int horizon, double delta_d_safe) {
    return x0.delta_v <= 0.0 && x0.delta_d <= -delta_d_safe && k_star <= horizon;
}

/// Weight on Δv² added to every stage while the safety term is active.
inline double safety_weight(const LonState& x0, const LonWeights& w) {
    return w.p * std::exp(x0.delta_d / -w.delta_d_safe);
}

/// Predecessor's broadcast sequences over the horizon, indices 0..Np.
struct PredecessorPlan {
    Eigen::VectorXd accel;
    Eigen::VectorXd pos;
    Eigen::VectorXd vel;

    [[nodiscard]] int horizon() const { return static_cast<int>(accel.size()) - 1; }

    /// Largest violation of p_{k+1} = p_k + T v_k and v_{k+1} = v_k + T a_k.
    [[nodiscard]] double integration_residual(double ts) const {
        double worst = 0.0;
        for (Eigen::Index k = 0; k + 1 < accel.size(); ++k) {
            worst = std::max(worst, std::abs(pos(k + 1) - pos(k) - ts * vel(k)));
            worst = std::max(worst, std::abs(vel(k + 1) - vel(k) - ts * accel(k)));
        }
        return worst;
    }
};

/// Plan for a vehicle whose accelerations over the horizon are prescribed.
inline PredecessorPlan plan_from_accelerations(double p0, double v0, const Eigen::VectorXd& accel, double ts) {
    PredecessorPlan plan;
    const auto n = accel.size();
    plan.accel = accel;
    plan.pos.resize(n);
    plan.vel.resize(n);
    plan.pos(0) = p0;
    plan.vel(0) = v0;
    for (Eigen::Index k = 0; k + 1 < n; ++k) {
        plan.pos(k + 1) = plan.pos(k) + ts * plan.vel(k);
        plan.vel(k + 1) = plan.vel(k) + ts * accel(k);
    }
    return plan;
}

enum class Fallback { None, SoftTerminal, EmergencyBrake };

inline const char* to_string(Fallback f) {
    switch (f) {
        case Fallback::None: return "none";
        case Fallback::SoftTerminal: return "soft_terminal";
        case Fallback::EmergencyBrake: return "emergency_brake";
    }
    return "?";
}

struct LonPlan {
    Eigen::VectorXd gamma;   ///< γ_0..γ_Np; γ_0 is actuated
    Eigen::MatrixXd states;  ///< 3 × (Np+1), column k is x_k
    Eigen::VectorXd accel;   ///< own broadcast sequences
    Eigen::VectorXd pos;
    Eigen::VectorXd vel;
    double objective = 0.0;
    bool degraded = false;
    Fallback fallback = Fallback::None;
    bool safety = false;
    int k_star = kNoMergeStep;
    int qp_iterations = 0;
    double kkt_residual = 0.0;

    [[nodiscard]] PredecessorPlan broadcast() const { return {accel, pos, vel}; }
};

/// Condensed prediction X̃ = Sx x0 + Su Γ + Sa Ã and the quadratic cost
/// blocks H = SuᵀQ̃Su + R̃, F = SxᵀQ̃Su, L = SaᵀQ̃Su.
struct BatchMatrices {
    Eigen::MatrixXd sx, su, sa;
    Eigen::MatrixXd q_tilde, r_tilde;
    Eigen::MatrixXd h, f, l;
};

/// `safety_weight` adds that coefficient on Δv² to every stage's Q.
inline BatchMatrices build_batch(const Eigen::Matrix3d& q, double r, double beta, int np, double ts,
                                 double safety_weight = 0.0) {
    if (np < 1) throw std::invalid_argument("horizon must be at least 1");
    const auto m = discrete_model(ts);
    const int nx = 3, n = np + 1;
    BatchMatrices out;
    out.sx = Eigen::MatrixXd::Zero(nx * n, nx);
    out.su = Eigen::MatrixXd::Zero(nx * n, n);
    out.sa = Eigen::MatrixXd::Zero(nx * n, n);
    std::vector<Eigen::Matrix3d> apow(static_cast<std::size_t>(n));
    apow[0].setIdentity();
    for (int k = 1; k < n; ++k) apow[static_cast<std::size_t>(k)] = m.a * apow[static_cast<std::size_t>(k - 1)];
    for (int k = 0; k < n; ++k) {
        out.sx.block(nx * k, 0, nx, nx) = apow[static_cast<std::size_t>(k)];
        for (int j = 0; j < k; ++j) {
            out.su.block(nx * k, j, nx, 1) = apow[static_cast<std::size_t>(k - 1 - j)] * m.b;
            out.sa.block(nx * k, j, nx, 1) = apow[static_cast<std::size_t>(k - 1 - j)] * m.d;
        }
    }
    Eigen::Matrix3d qs = q;
    qs(1, 1) += safety_weight;
    out.q_tilde = Eigen::MatrixXd::Zero(nx * n, nx * n);
    out.r_tilde = Eigen::MatrixXd::Zero(n, n);
    for (int k = 0; k < n; ++k) {
        const double scale = k == np ? beta : 1.0;
        out.q_tilde.block(nx * k, nx * k, nx, nx) = scale * qs;
        out.r_tilde(k, k) = scale * r;
    }
    out.h = out.su.transpose() * out.q_tilde * out.su + out.r_tilde;
    out.f = out.sx.transpose() * out.q_tilde * out.su;
    out.l = out.sa.transpose() * out.q_tilde * out.su;
    return out;
}

struct MpcOptions {
    bool terminal_constraints = true;
    bool state_constraints = true;
    bool input_constraints = true;
    double tolerance = 1e-9;
};

namespace detail {

inline Eigen::VectorXd free_response(const BatchMatrices& bm, const LonState& x0, const Eigen::VectorXd& a_pred) {
    return bm.sx * x0.vec() + bm.sa * a_pred;
}

inline qp::QuadraticProgram condensed_qp(const BatchMatrices& bm, const Eigen::VectorXd& free) {
    // J(Γ) = ΓᵀHΓ + 2(free)ᵀQ̃SuΓ + const, written as ½Γᵀ(2H)Γ + gᵀΓ.
    Eigen::MatrixXd h = 2.0 * bm.h;
    h = 0.5 * (h + h.transpose());
    return {h, 2.0 * bm.su.transpose() * bm.q_tilde * free};
}

}  // namespace detail

/// The MPC problem for one follower. State limits apply from step 1 on;
/// x_0 is data.
inline qp::QuadraticProgram build_mpc_qp(const LonState& x0, const PredecessorPlan& plan, const LonWeights& w,
                                         const Limits& lim, int np, double ts, bool with_safety,
                                         const MpcOptions& opt = {}) {
    if (plan.horizon() != np || plan.vel.size() != np + 1)
        throw std::invalid_argument("predecessor plan length must be Np + 1");
    const double sw = with_safety ? safety_weight(x0, w) : 0.0;
    const auto bm = build_batch(w.q_matrix(), w.r, w.beta, np, ts, sw);
    const Eigen::VectorXd free = detail::free_response(bm, x0, plan.accel);
    auto qp = detail::condensed_qp(bm, free);

    if (opt.input_constraints)
        for (int k = 0; k <= np; ++k) qp.add_bounds(k, lim.gamma_min, lim.gamma_max);
    if (opt.state_constraints)
        for (int k = 1; k <= np; ++k) {
            const int row = 3 * k;
            qp.add_range(bm.su.row(row), lim.delta_d_min - free(row), lim.delta_d_max - free(row));
            qp.add_range(bm.su.row(row + 1), plan.vel(k) - lim.v_max - free(row + 1),
                         plan.vel(k) - lim.v_min - free(row + 1));
            qp.add_range(bm.su.row(row + 2), lim.a_min - free(row + 2), lim.a_max - free(row + 2));
        }
    if (opt.terminal_constraints) {
        const int row = 3 * np;
        qp.add_equality(bm.su.row(row + 1), -free(row + 1));
        qp.add_equality(bm.su.row(row + 2), plan.accel(np) - free(row + 2));
    }
    return qp;
}

/// Stage-cost sum of a candidate control sequence, evaluated by rollout.
inline double evaluate_cost(const Eigen::VectorXd& gamma, const LonState& x0, const Eigen::VectorXd& a_pred,
                            const LonWeights& w, double ts, double safety_w) {
    const auto np = static_cast<int>(gamma.size()) - 1;
    const Eigen::Matrix3d q = w.q_matrix();
    LonState x = x0;
    double total = 0.0;
    for (int k = 0; k <= np; ++k) {
        const Eigen::Vector3d v = x.vec();
        double stage = w.r * gamma(k) * gamma(k) + v.dot(q * v) + safety_w * x.delta_v * x.delta_v;
        total += (k == np ? w.beta : 1.0) * stage;
        if (k < np) x = step_dynamics(x, gamma(k), a_pred(k), ts);
    }
    return total;
}

namespace detail {

inline void fill_plan(LonPlan& plan, const LonState& x0, const PredecessorPlan& pred, double d_star, double ts,
                      const LonWeights& w, double safety_w) {
    const auto n = plan.gamma.size();
    plan.states.resize(3, n);
    LonState x = x0;
    for (Eigen::Index k = 0; k < n; ++k) {
        plan.states.col(k) = x.vec();
        if (k + 1 < n) x = step_dynamics(x, plan.gamma(k), pred.accel(k), ts);
    }
    plan.accel = plan.states.row(2).transpose();
    plan.vel = pred.vel - plan.states.row(1).transpose();
    plan.pos = pred.pos - plan.states.row(0).transpose() - Eigen::VectorXd::Constant(n, d_star);
    plan.objective = evaluate_cost(plan.gamma, x0, pred.accel, w, ts, safety_w);
}

}  // namespace detail

/// Solves the follower's problem. When it is infeasible the terminal
/// equalities become heavy penalties; if that still fails, jerk is clamped
/// toward the braking limit. Either case sets `degraded`.
inline LonPlan solve_lon_mpc(const LonState& x0, const PredecessorPlan& pred, const LonWeights& w, const Limits& lim,
                             int np, double ts, int k_star, double d_star, const MpcOptions& opt = {}) {
    LonPlan plan;
    plan.k_star = k_star;
    plan.safety = safety_active(x0, k_star, np, w.delta_d_safe);
    const double sw = plan.safety ? safety_weight(x0, w) : 0.0;

    auto qp = build_mpc_qp(x0, pred, w, lim, np, ts, plan.safety, opt);
    auto sol = qp::solve_qp(qp, opt.tolerance);

    if (!sol.optimal() && opt.terminal_constraints) {
        MpcOptions soft = opt;
        soft.terminal_constraints = false;
        qp = build_mpc_qp(x0, pred, w, lim, np, ts, plan.safety, soft);
        const auto bm = build_batch(w.q_matrix(), w.r, w.beta, np, ts, sw);
        const Eigen::VectorXd free = detail::free_response(bm, x0, pred.accel);
        const double penalty = w.beta * 1e3;
        const int row = 3 * np;
        const Eigen::RowVectorXd rv = bm.su.row(row + 1), ra = bm.su.row(row + 2);
        const double cv = free(row + 1), ca = free(row + 2) - pred.accel(np);
        qp.hessian += 2.0 * penalty * (rv.transpose() * rv + ra.transpose() * ra);
        qp.gradient += 2.0 * penalty * (cv * rv.transpose() + ca * ra.transpose());
        sol = qp::solve_qp(qp, opt.tolerance);
        plan.fallback = Fallback::SoftTerminal;
        plan.degraded = true;
    }

    if (sol.optimal()) {
        plan.gamma = sol.primal;
        plan.qp_iterations = sol.iterations;
        plan.kkt_residual = sol.kkt_residual;
    } else {
        plan.fallback = Fallback::EmergencyBrake;
        plan.degraded = true;
        plan.gamma.resize(np + 1);
        double a = x0.accel;
        for (int k = 0; k <= np; ++k) {
            plan.gamma(k) = std::clamp((lim.a_min - a) / ts, lim.gamma_min, lim.gamma_max);
            a += ts * plan.gamma(k);
        }
    }
    detail::fill_plan(plan, x0, pred, d_star, ts, w, sw);
    return plan;
}

/// β̂(ε) from the Lipschitz constants of the stage cost and the dynamics on
/// the ball covering the state and input box. The speed-difference radius is
/// v_max − v_min, the widest bound the predecessor's speed can induce.
inline double beta_lower_bound(double epsilon, const Limits& lim, const LonWeights& w, int np, double ts) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
    const double dd = std::max(std::abs(lim.delta_d_min), std::abs(lim.delta_d_max));
    const double dv = lim.v_max - lim.v_min;
    const double ar = std::max(std::abs(lim.a_min), std::abs(lim.a_max));
    const double gr = std::max(std::abs(lim.gamma_min), std::abs(lim.gamma_max));
    const double radius = std::sqrt(dd * dd + dv * dv + ar * ar + gr * gr);
    const double rho = std::max({w.q[0], w.q[1], w.q[2], w.r});
    const double alpha_l = 2.0 * radius * rho;
    const auto m = discrete_model(ts);
    Eigen::Matrix<double, 3, 4> ab;
    ab << m.a, m.b;
    const double alpha_f = Eigen::JacobiSVD<Eigen::Matrix<double, 3, 4>>(ab).singularValues()(0);
    const double span = std::abs(lim.gamma_max - lim.gamma_min);
    double total = 0.0;
    for (int k = 0; k < np; ++k) {
        double inner = 0.0;
        for (int j = 0; j <= k; ++j) inner += std::pow(alpha_f, k - j) * span;
        total += alpha_l * inner;
    }
    return total / epsilon;
}

/// Initial error state of a follower from its and its predecessor's
/// kinematics.
inline LonState error_state(const CavKinematics& pred, const CavKinematics& self, double d_star) {
    return {pred.z_position - self.z_position - d_star, pred.velocity - self.velocity, self.acceleration};
}

struct PlatoonConfig {
    LonWeights weights;
    Limits limits;
    int horizon = 12;
    double time_step = 0.1;
    MpcOptions options;
};

struct PlatoonStep {
    std::vector<LonPlan> plans;  ///< sequence order; entry 0 is the leader
    std::vector<double> gamma;   ///< actuated jerk per vehicle
};

/// One control step of the serial scheme: the leader's plan comes from its
/// prescribed accelerations, then each follower solves against the plan its
/// predecessor has just produced.
///
/// `leader_accel` holds the leader's accelerations for steps 0..Np; entry 0
/// must equal its current acceleration. `same_road[i]` tells whether
/// follower i shares a lane with its predecessor.
inline PlatoonStep serial_platoon_step(const std::vector<CavKinematics>& cavs, const std::vector<bool>& same_road,
                                       const std::vector<double>& d_star, const Eigen::VectorXd& leader_accel,
                                       const PlatoonConfig& cfg) {
    const auto n = cavs.size();
    if (n == 0) throw std::invalid_argument("empty platoon");
    if (same_road.size() != n || d_star.size() != n) throw std::invalid_argument("per-vehicle inputs must have length n");
    const int np = cfg.horizon;
    const double ts = cfg.time_step;
    if (leader_accel.size() != np + 1) throw std::invalid_argument("leader acceleration must have length Np + 1");

    PlatoonStep out;
    LonPlan lead;
    const auto lp = plan_from_accelerations(cavs[0].z_position, cavs[0].velocity, leader_accel, ts);
    lead.accel = lp.accel;
    lead.pos = lp.pos;
    lead.vel = lp.vel;
    lead.states = Eigen::MatrixXd::Zero(3, np + 1);
    lead.gamma = Eigen::VectorXd::Zero(np + 1);
    lead.gamma(0) = (np >= 1 ? leader_accel(1) - cavs[0].acceleration : 0.0) / ts;
    for (int k = 1; k < np; ++k) lead.gamma(k) = (leader_accel(k + 1) - leader_accel(k)) / ts;
    out.plans.push_back(lead);
    out.gamma.push_back(lead.gamma(0));

    for (std::size_t i = 1; i < n; ++i) {
        const auto pred = out.plans[i - 1].broadcast();
        const LonState x0 = error_state(cavs[i - 1], cavs[i], d_star[i]);
        const int ks = compute_k_star(pred.pos, cavs[i - 1].z_position - cavs[i].z_position, same_road[i]);
        out.plans.push_back(solve_lon_mpc(x0, pred, cfg.weights, cfg.limits, np, ts, ks, d_star[i], cfg.options));
        out.gamma.push_back(out.plans.back().gamma(0));
    }
    return out;
}

}  // namespace merge_stack::lon
