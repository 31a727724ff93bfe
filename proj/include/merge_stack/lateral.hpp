#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "merge_stack/geometry.hpp"
#include "merge_stack/qp.hpp"
#include "merge_stack/scenario.hpp"

namespace merge_stack::lat {

struct PoseState {
    double x = 0.0;
    double y = 0.0;
    double theta = 0.0;

    Eigen::Vector3d vec() const { return {x, y, theta}; }
    static PoseState from(const Eigen::Vector3d& v) { return {v(0), v(1), wrap_angle(v(2))}; }
};

struct LatControl {
    double v = 0.0;
    double delta = 0.0;
};

inline void check_steering(double delta) {
    if (!(std::abs(delta) < std::numbers::pi / 2)) throw std::invalid_argument("steering angle must be below π/2");
}

inline Eigen::Vector3d bicycle_derivative(const PoseState& chi, const LatControl& mu, double wheelbase) {
    if (!(wheelbase > 0.0)) throw std::invalid_argument("wheelbase must be positive");
    check_steering(mu.delta);
    return {mu.v * std::cos(chi.theta), mu.v * std::sin(chi.theta), mu.v * std::tan(mu.delta) / wheelbase};
}

/// One explicit Euler step of the nonlinear model. The heading is not wrapped
/// so the map stays smooth.
inline Eigen::Vector3d bicycle_step(const Eigen::Vector3d& chi, const LatControl& mu, double ts, double wheelbase) {
    return chi + ts * bicycle_derivative({chi(0), chi(1), chi(2)}, mu, wheelbase);
}

/// Classical RK4 over one step, used as the plant.
inline Eigen::Vector3d bicycle_rk4(const Eigen::Vector3d& chi, const LatControl& mu, double ts, double wheelbase) {
    auto f = [&](const Eigen::Vector3d& c) { return bicycle_derivative({c(0), c(1), c(2)}, mu, wheelbase); };
    const Eigen::Vector3d k1 = f(chi);
    const Eigen::Vector3d k2 = f(chi + 0.5 * ts * k1);
    const Eigen::Vector3d k3 = f(chi + 0.5 * ts * k2);
    const Eigen::Vector3d k4 = f(chi + ts * k3);
    return chi + ts / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
}

struct LinearModel {
    Eigen::Matrix3d a;
    Eigen::Matrix<double, 3, 2> b;
    Eigen::Vector3d d;
};

/// Euler-discretized first-order expansion about (χ_s, μ_s):
/// χ⁺ = A χ + B μ + D with D = T·(f(χ_s, μ_s) − A_c χ_s − B_c μ_s).
inline LinearModel linearize_discretize(const Eigen::Vector3d& chi_s, const LatControl& mu_s, double ts,
                                        double wheelbase) {
    if (!(wheelbase > 0.0)) throw std::invalid_argument("wheelbase must be positive");
    check_steering(mu_s.delta);
    const double c2 = std::cos(mu_s.delta) * std::cos(mu_s.delta);
    if (c2 < 1e-12) throw std::domain_error("steering too close to π/2 to linearize");
    const double th = chi_s(2), v = mu_s.v, dl = mu_s.delta;
    LinearModel m;
    m.a << 1, 0, -v * ts * std::sin(th), 0, 1, v * ts * std::cos(th), 0, 0, 1;
    m.b << ts * std::cos(th), 0, ts * std::sin(th), 0, ts * std::tan(dl) / wheelbase, ts * v / (wheelbase * c2);
    m.d << ts * v * std::sin(th) * th, -ts * v * std::cos(th) * th, -ts * v * dl / (wheelbase * c2);
    return m;
}

struct ReferenceTrajectory {
    std::vector<Eigen::Vector3d> poses;  ///< χ_ref, also the expansion points χ_s
    std::vector<LatControl> controls;    ///< μ_s
    std::vector<double> arc_length;
    bool clamped = false;  ///< the horizon ran past the end of the path
};

/// Projects the pose onto the centerline and advances by the predicted speeds.
/// Reference headings are unwrapped to stay within π of the current heading.
inline ReferenceTrajectory build_reference(const Path& path, const PoseState& pose,
                                           const std::vector<double>& speeds, double ts, double wheelbase) {
    if (speeds.empty()) throw std::invalid_argument("predicted speeds are empty");
    ReferenceTrajectory ref;
    double s = path.project(pose.x, pose.y).s;
    const double end = path.length();
    double prev_theta = pose.theta;
    for (std::size_t k = 0; k < speeds.size(); ++k) {
        if (k > 0) s += speeds[k - 1] * ts;
        if (s > end) {
            s = end;
            ref.clamped = true;
        }
        const PathPose p = path.pose_at(s);
        const double theta = prev_theta + wrap_angle(p.heading - prev_theta);
        prev_theta = theta;
        ref.poses.emplace_back(p.x, p.y, theta);
        ref.controls.push_back({speeds[k], std::atan(wheelbase * p.curvature)});
        ref.arc_length.push_back(s);
    }
    return ref;
}

struct LatLimits {
    double delta_min = -0.8;
    double delta_max = 0.8;
    double rate_min = -0.04;
    double rate_max = 0.04;

    static LatLimits from(const Limits& l) { return {l.steer_min, l.steer_max, l.steer_rate_min, l.steer_rate_max}; }
};

struct LatPlan {
    Eigen::MatrixXd controls;  ///< 2 × (N_p+1): rows v, δ
    Eigen::MatrixXd states;    ///< 3 × (N_p+1) linear-model prediction
    double delta0 = 0.0;
    bool degraded = false;
    int qp_iterations = 0;
    double kkt_residual = 0.0;
};

/// Linear MPC over μ(0..N_p) with v pinned to the longitudinal prediction and
/// the first steering increment measured from `previous_delta`.
inline LatPlan solve_lat_mpc(const PoseState& current, const ReferenceTrajectory& ref, const LatWeights& w,
                             const LatLimits& lim, double ts, double wheelbase, double previous_delta,
                             double tolerance = 1e-9) {
    const int n = static_cast<int>(ref.poses.size());
    if (n < 1 || ref.controls.size() != ref.poses.size()) throw std::invalid_argument("malformed reference");
    const int nz = 2 * n;
    const Eigen::Matrix3d q = Eigen::Vector3d(w.q[0], w.q[1], w.q[2]).asDiagonal();

    Eigen::Vector3d chi0 = current.vec();
    chi0(2) = ref.poses[0](2) + wrap_angle(current.theta - ref.poses[0](2));

    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(nz, nz);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(nz);
    for (int k = 0; k < n; ++k) {
        h(2 * k, 2 * k) += w.r[0];
        h(2 * k + 1, 2 * k + 1) += w.r[1];
    }
    // χ(k) = S_k z + s_k
    Eigen::MatrixXd sk = Eigen::MatrixXd::Zero(3, nz);
    Eigen::Vector3d ck = chi0;
    std::vector<Eigen::MatrixXd> s_mats;
    std::vector<Eigen::Vector3d> c_vecs;
    for (int k = 0; k < n; ++k) {
        s_mats.push_back(sk);
        c_vecs.push_back(ck);
        const Eigen::Vector3d err = ck - ref.poses[static_cast<std::size_t>(k)];
        h += sk.transpose() * q * sk;
        g += sk.transpose() * q * err;
        if (k + 1 < n) {
            const auto m = linearize_discretize(ref.poses[static_cast<std::size_t>(k)],
                                                ref.controls[static_cast<std::size_t>(k)], ts, wheelbase);
            sk = m.a * sk;
            sk.middleCols(2 * k, 2) += m.b;
            ck = m.a * ck + m.d;
        }
    }

    qp::QuadraticProgram prob(2.0 * h, 2.0 * g);
    for (int k = 0; k < n; ++k) {
        Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(nz);
        row(2 * k) = 1.0;
        prob.add_equality(row, ref.controls[static_cast<std::size_t>(k)].v);
        prob.add_bounds(2 * k + 1, lim.delta_min, lim.delta_max);
        Eigen::RowVectorXd rate = Eigen::RowVectorXd::Zero(nz);
        rate(2 * k + 1) = 1.0;
        double shift = 0.0;
        if (k == 0)
            shift = previous_delta;
        else
            rate(2 * k - 1) = -1.0;
        prob.add_range(rate, lim.rate_min + shift, lim.rate_max + shift);
    }

    LatPlan plan;
    plan.controls = Eigen::MatrixXd::Zero(2, n);
    plan.states = Eigen::MatrixXd::Zero(3, n);
    const auto sol = qp::solve_qp(prob, tolerance);
    if (!sol.optimal()) {
        plan.degraded = true;
        plan.delta0 = previous_delta;
        for (int k = 0; k < n; ++k) {
            plan.controls(0, k) = ref.controls[static_cast<std::size_t>(k)].v;
            plan.controls(1, k) = previous_delta;
        }
    } else {
        for (int k = 0; k < n; ++k) plan.controls.col(k) = sol.primal.segment(2 * k, 2);
        plan.delta0 = plan.controls(1, 0);
        plan.qp_iterations = sol.iterations;
        plan.kkt_residual = sol.kkt_residual;
    }
    Eigen::VectorXd z(nz);
    for (int k = 0; k < n; ++k) z.segment(2 * k, 2) = plan.controls.col(k);
    for (int k = 0; k < n; ++k)
        plan.states.col(k) = s_mats[static_cast<std::size_t>(k)] * z + c_vecs[static_cast<std::size_t>(k)];
    return plan;
}

struct TrackingError {
    double lateral = 0.0;  ///< signed distance to the centerline, left positive
    double heading = 0.0;  ///< θ minus path tangent, wrapped
    double s = 0.0;
};

inline TrackingError tracking_error(const Path& path, const PoseState& pose) {
    const auto proj = path.project(pose.x, pose.y);
    return {proj.lateral_offset, wrap_angle(pose.theta - path.pose_at(proj.s).heading), proj.s};
}

/// Pose displaced from the centerline point at arc length s.
inline PoseState offset_pose(const Path& path, double s, double lateral, double heading) {
    const PathPose p = path.pose_at(s);
    return {p.x - lateral * std::sin(p.heading), p.y + lateral * std::cos(p.heading), wrap_angle(p.heading + heading)};
}

}  // namespace merge_stack::lat
