#pragma once

#include <cmath>
#include <complex>
#include <iostream>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "merge_stack/longitudinal.hpp"

namespace merge_stack::stability {

using lon::BatchMatrices;

inline constexpr double kSweepLow = 1e-3;
inline constexpr double kSweepHigh = 1e3;
inline constexpr int kSweepPoints = 10000;
inline constexpr double kSweepSlack = 1e-6;
inline constexpr double kConditionWarning = 1e10;

struct GainSet {
    double k_delta_d = 0.0;
    double k_delta_v = 0.0;
    double k_a = 0.0;
    Eigen::VectorXd k_f_row;
    double k_f = 0.0;
    double h_condition = 0.0;
};

struct StringStabilityVerdict {
    double p = 0.0;
    double q = 0.0;
    bool stable = false;
    bool sweep_stable = false;
    double worst_omega = 0.0;
    double worst_magnitude = 0.0;
};

inline BatchMatrices batch_matrices(const LonWeights& w, int np, double ts) {
    return lon::build_batch(w.q_matrix(), w.r, w.beta, np, ts);
}

namespace detail {

inline Eigen::LDLT<Eigen::MatrixXd> factor(const Eigen::MatrixXd& h) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().cwiseAbs().minCoeff() <= 1e-14 * ldlt.vectorD().cwiseAbs().maxCoeff())
        throw std::domain_error("batch Hessian is singular");
    return ldlt;
}

inline double condition_number(const Eigen::MatrixXd& h) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h, Eigen::EigenvaluesOnly);
    const auto ev = es.eigenvalues().cwiseAbs();
    return ev.minCoeff() > 0 ? ev.maxCoeff() / ev.minCoeff() : std::numeric_limits<double>::infinity();
}

}  // namespace detail

/// Unconstrained minimizer Γ* = −H⁻¹(Fᵀx₀ + LᵀÃ).
inline Eigen::VectorXd explicit_solution(const lon::LonState& x0, const Eigen::VectorXd& pred_accel,
                                         const BatchMatrices& bm) {
    if (pred_accel.size() != bm.h.rows()) throw std::invalid_argument("predecessor acceleration length mismatch");
    const auto ldlt = detail::factor(bm.h);
    return -ldlt.solve(bm.f.transpose() * x0.vec() + bm.l.transpose() * pred_accel);
}

inline GainSet explicit_gains(const LonWeights& w, int np, double ts) {
    const auto bm = batch_matrices(w, np, ts);
    const auto ldlt = detail::factor(bm.h);
    const Eigen::MatrixXd kb = -ldlt.solve(bm.f.transpose());
    const Eigen::MatrixXd kf = -ldlt.solve(bm.l.transpose());
    GainSet g;
    g.k_delta_d = kb(0, 0);
    g.k_delta_v = kb(0, 1);
    g.k_a = kb(0, 2);
    g.k_f_row = kf.row(0).transpose();
    g.k_f = g.k_f_row.sum();
    g.h_condition = detail::condition_number(bm.h);
    if (g.h_condition > kConditionWarning)
        std::clog << "warning: batch Hessian condition number " << g.h_condition << '\n';
    return g;
}

inline GainSet make_gains(double k_delta_d, double k_delta_v, double k_a, double k_f) {
    GainSet g;
    g.k_delta_d = k_delta_d;
    g.k_delta_v = k_delta_v;
    g.k_a = k_a;
    g.k_f_row = Eigen::VectorXd::Constant(1, k_f);
    g.k_f = k_f;
    return g;
}

/// |G(jω)| for G(s) = (k_f s² + k_Δv s + k_Δd) / (s³ − k_a s² + k_Δv s + k_Δd).
inline double transfer_magnitude(const GainSet& g, double omega) {
    if (!(omega > 0)) throw std::invalid_argument("omega must be positive");
    const double w2 = omega * omega;
    const double nr = -w2 * g.k_f + g.k_delta_d, ni = omega * g.k_delta_v;
    const double dr = w2 * g.k_a + g.k_delta_d, di = -w2 * omega + g.k_delta_v * omega;
    const double den = dr * dr + di * di;
    if (den == 0.0) return std::numeric_limits<double>::infinity();
    return std::sqrt((nr * nr + ni * ni) / den);
}

inline double pq_p(const GainSet& g) { return g.k_a * g.k_a - g.k_f * g.k_f - 2.0 * g.k_delta_v; }
inline double pq_q(const GainSet& g) { return 8.0 * g.k_delta_d * (g.k_a + g.k_f); }

/// |G|² ≤ 1 reduces to x(x² + p x + q/4) ≥ 0 with x = ω².
inline bool pq_stable(double p, double q) {
    const double disc = p * p - q;
    if (disc <= 0.0) return true;
    const double s = std::sqrt(disc);
    return (-p + s) / 2.0 <= 0.0 && (-p - s) / 2.0 <= 0.0;
}

inline StringStabilityVerdict classify_string_stability(const GainSet& g) {
    StringStabilityVerdict v;
    v.p = pq_p(g);
    v.q = pq_q(g);
    v.stable = pq_stable(v.p, v.q);
    const double step = std::log10(kSweepHigh / kSweepLow) / (kSweepPoints - 1);
    for (int i = 0; i < kSweepPoints; ++i) {
        const double omega = kSweepLow * std::pow(10.0, step * i);
        const double mag = transfer_magnitude(g, omega);
        if (mag > v.worst_magnitude) {
            v.worst_magnitude = mag;
            v.worst_omega = omega;
        }
    }
    v.sweep_stable = v.worst_magnitude <= 1.0 + kSweepSlack;
    return v;
}

/// Ratio of the l2 norms of two spacing-error series sampled at the same rate.
inline double l2_ratio(const std::vector<double>& follower, const std::vector<double>& predecessor) {
    if (follower.size() != predecessor.size() || follower.size() < 2)
        throw std::invalid_argument("series must have equal length of at least 2");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < follower.size(); ++i) {
        num += follower[i] * follower[i];
        den += predecessor[i] * predecessor[i];
    }
    if (den == 0.0) throw std::domain_error("predecessor series is identically zero");
    return std::sqrt(num / den);
}

}  // namespace merge_stack::stability
