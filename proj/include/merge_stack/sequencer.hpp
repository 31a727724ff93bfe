#pragma once

// Merging-sequence selection. Feasible assignments are exactly the
// order-preserving interleavings of the two roads, so the mixed-integer
// program is solved by depth-first branch and bound over interleavings; the
// sign variables and absolute values are evaluated exactly at each node
// instead of through big-M relaxations.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "merge_stack/scenario.hpp"

namespace merge_stack::sequencing {

class SequencingError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Binary n×n matrix: entry (i, j) is 1 when the vehicle in row i (mainline
/// rows first, then ramp, each nearest-first) receives sequence ID j + 1.
class AssignmentMatrix {
public:
    AssignmentMatrix() = default;
    explicit AssignmentMatrix(Eigen::MatrixXi u) : u_(std::move(u)) {}

    /// `order[j]` is the row holding sequence ID j + 1.
    static AssignmentMatrix from_order(const std::vector<int>& order) {
        const int n = static_cast<int>(order.size());
        Eigen::MatrixXi u = Eigen::MatrixXi::Zero(n, n);
        for (int j = 0; j < n; ++j) {
            if (order[j] < 0 || order[j] >= n) throw SequencingError("row index out of range in order");
            u(order[j], j) = 1;
        }
        return AssignmentMatrix(u);
    }

    [[nodiscard]] int size() const { return static_cast<int>(u_.rows()); }
    [[nodiscard]] const Eigen::MatrixXi& matrix() const { return u_; }

    /// Row (vehicle) per sequence position. Requires a valid permutation.
    [[nodiscard]] std::vector<int> order() const {
        std::vector<int> out(static_cast<std::size_t>(size()), -1);
        for (int i = 0; i < size(); ++i)
            for (int j = 0; j < size(); ++j)
                if (u_(i, j) == 1) out[static_cast<std::size_t>(j)] = i;
        return out;
    }

    /// Zero-based sequence position of row i.
    [[nodiscard]] int position_of(int i) const {
        for (int j = 0; j < size(); ++j)
            if (u_(i, j) == 1) return j;
        return -1;
    }

    /// Empty string when the matrix is a permutation that keeps each road's
    /// vehicles in their real order; otherwise a description of the failure.
    [[nodiscard]] std::string violation(int m) const {
        const int n = size();
        if (u_.cols() != n) return "matrix is not square";
        if (m < 0 || m > n) return "mainline count out of range";
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (u_(i, j) != 0 && u_(i, j) != 1) return "entries must be binary";
        for (int j = 0; j < n; ++j)
            if (u_.col(j).sum() != 1) return "sequence ID " + std::to_string(j + 1) + " not assigned exactly once";
        for (int i = 0; i < n; ++i)
            if (u_.row(i).sum() != 1) return "vehicle row " + std::to_string(i + 1) + " not assigned exactly once";
        for (int i = 1; i < n; ++i) {
            if (i == m) continue;  // first ramp row has no same-road predecessor
            if (position_of(i) < position_of(i - 1))
                return "vehicle row " + std::to_string(i + 1) + " overtakes its same-road predecessor";
        }
        return {};
    }

    bool operator==(const AssignmentMatrix& o) const { return u_ == o.u_; }

private:
    Eigen::MatrixXi u_;
};

/// Diagnostics for the pair (predecessor ID j, follower ID j + 1).
struct PairDiagnostics {
    double spacing_deviation = 0.0;  ///< p_pred − p_follower − d*
    double delta_d = 0.0;            ///< |spacing_deviation|
    double speed_difference = 0.0;   ///< v_follower − v_pred
    int s_d = 1;
    int s_v = 1;
    int f = 0;
};

struct AssignmentCost {
    double objective = 0.0;
    double microscopic = 0.0;
    double macroscopic = 0.0;
    std::vector<PairDiagnostics> pairs;
};

struct SequencingSolution {
    AssignmentMatrix assignment;
    double objective = 0.0;
    AssignmentCost cost;
    long nodes_explored = 0;
    double wall_time_s = 0.0;
    double big_m = 0.0;
};

/// Sign with zero mapped to +1.
inline int canonical_sign(double x) { return x < 0.0 ? -1 : 1; }

/// Macroscopic weights. Column i carries [0.5⁰, …, 0.5ⁿ⁻¹] when vehicle row i
/// is on the strictly less dense road; equal densities, or a road without
/// vehicles, penalize nothing.
inline Eigen::MatrixXd build_weight_matrix_S(int m, int r, double mainline_density, double ramp_density) {
    if (m < 0 || r < 0 || m + r < 1) throw SequencingError("need at least one vehicle");
    if (mainline_density < 0.0 || ramp_density < 0.0) throw SequencingError("densities must be non-negative");
    const int n = m + r;
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n, n);
    if (m == 0 || r == 0 || mainline_density == ramp_density) return s;
    Eigen::VectorXd decay(n);
    for (int j = 0; j < n; ++j) decay(j) = std::pow(0.5, j);
    const bool ramp_sparser = ramp_density < mainline_density;
    const int first = ramp_sparser ? m : 0;
    const int last = ramp_sparser ? n : m;
    for (int i = first; i < last; ++i) s.col(i) = decay;
    return s;
}

/// Density per road as vehicle count over control-area length.
inline Eigen::MatrixXd weight_matrix_for(int m, int r, double control_area_length) {
    return build_weight_matrix_S(m, r, m / control_area_length, r / control_area_length);
}

namespace detail {

inline void check_inputs(const Eigen::VectorXd& p, const Eigen::VectorXd& v, int m, int r,
                         const std::vector<double>& d_star, const Eigen::MatrixXd& s) {
    const int n = m + r;
    if (m < 0 || r < 0 || n < 1) throw SequencingError("need at least one vehicle");
    if (p.size() != n || v.size() != n) throw SequencingError("P and V must have length m + r");
    if (static_cast<int>(d_star.size()) != n - 1) throw SequencingError("d* must have length n - 1");
    if (s.rows() != n || s.cols() != n) throw SequencingError("S must be n x n");
    for (double d : d_star)
        if (!(d > 0.0)) throw SequencingError("desired spacings must be positive");
}

inline PairDiagnostics pair_cost(const Eigen::VectorXd& p, const Eigen::VectorXd& v, int pred, int follower,
                                 double d_star) {
    PairDiagnostics d;
    d.spacing_deviation = p(pred) - p(follower) - d_star;
    d.delta_d = std::abs(d.spacing_deviation);
    d.speed_difference = v(follower) - v(pred);
    d.s_d = canonical_sign(d.spacing_deviation);
    d.s_v = canonical_sign(d.speed_difference);
    d.f = std::abs(d.s_d - d.s_v);
    return d;
}

}  // namespace detail

/// Cost of a fixed assignment. `d_star[k]` is the desired spacing of the
/// vehicle holding sequence ID k + 2.
inline AssignmentCost evaluate_assignment_cost(const AssignmentMatrix& u, const Eigen::VectorXd& p,
                                               const Eigen::VectorXd& v, int m, const std::vector<double>& d_star,
                                               const SequencerWeights& w, const Eigen::MatrixXd& s) {
    const int n = u.size();
    detail::check_inputs(p, v, m, n - m, d_star, s);
    if (const auto why = u.violation(m); !why.empty()) throw SequencingError("infeasible assignment: " + why);
    const auto order = u.order();
    AssignmentCost out;
    for (int j = 0; j + 1 < n; ++j) {
        const auto d = detail::pair_cost(p, v, order[j], order[j + 1], d_star[j]);
        out.microscopic += w.q_u * d.delta_d + w.r_u * d.f;
        out.pairs.push_back(d);
    }
    for (int j = 0; j < n; ++j) out.macroscopic += s(j, order[j]);
    out.objective = out.microscopic + out.macroscopic;
    return out;
}

/// Every feasible assignment, mainline-first lexicographic order.
inline std::vector<AssignmentMatrix> enumerate_interleavings(int m, int r) {
    if (m < 0 || r < 0) throw SequencingError("counts must be non-negative");
    if (m + r > 12) throw SequencingError("enumeration limited to 12 vehicles");
    std::vector<AssignmentMatrix> out;
    std::vector<int> order;
    auto rec = [&](auto&& self, int i, int j) -> void {
        if (i == m && j == r) {
            out.push_back(AssignmentMatrix::from_order(order));
            return;
        }
        if (i < m) {
            order.push_back(i);
            self(self, i + 1, j);
            order.pop_back();
        }
        if (j < r) {
            order.push_back(m + j);
            self(self, i, j + 1);
            order.pop_back();
        }
    };
    rec(rec, 0, 0);
    return out;
}

/// Sequence IDs by position, nearest the merge point first; mainline wins ties.
inline AssignmentMatrix fifo_sequence(const Eigen::VectorXd& p) {
    const int n = static_cast<int>(p.size());
    if (n < 1) throw SequencingError("need at least one vehicle");
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p(a) > p(b); });
    return AssignmentMatrix::from_order(order);
}

/// Big-M that dominates every spacing deviation and speed difference in the
/// instance. Reported only; the search evaluates signs exactly.
inline double instance_big_m(const Eigen::VectorXd& p, const Eigen::VectorXd& v, const std::vector<double>& d_star) {
    const double spread = std::max(p.maxCoeff() - p.minCoeff(), v.maxCoeff() - v.minCoeff());
    const double dmax = d_star.empty() ? 0.0 : *std::max_element(d_star.begin(), d_star.end());
    return 10.0 * (spread + dmax);
}

/// Optimal assignment. `fixed_prefix` pins the first sequence IDs to the
/// given rows (vehicles that have already merged). Among equal objectives the
/// mainline-first lexicographic order wins.
inline SequencingSolution solve_milp(const Eigen::VectorXd& p, const Eigen::VectorXd& v, int m, int r,
                                     const std::vector<double>& d_star, const SequencerWeights& w,
                                     const Eigen::MatrixXd& s, const std::vector<int>& fixed_prefix = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    detail::check_inputs(p, v, m, r, d_star, s);
    if (w.q_u < 0.0 || w.r_u < 0.0) throw SequencingError("weights must be non-negative");
    if ((s.array() < 0.0).any()) throw SequencingError("S must be non-negative");
    const int n = m + r;

    int fixed_main = 0, fixed_ramp = 0;
    for (int row : fixed_prefix) {
        if (row == fixed_main && row < m) ++fixed_main;
        else if (row == m + fixed_ramp && row < n) ++fixed_ramp;
        else throw SequencingError("fixed prefix must list each road's leading vehicles in order");
    }

    SequencingSolution best;
    best.objective = std::numeric_limits<double>::infinity();
    best.big_m = w.big_m > 0.0 ? w.big_m : instance_big_m(p, v, d_star);
    const double slack = 1e-9 * (1.0 + p.cwiseAbs().maxCoeff());

    std::vector<int> order(fixed_prefix);
    double prefix_cost = 0.0;
    for (std::size_t j = 0; j < order.size(); ++j) {
        prefix_cost += s(static_cast<Eigen::Index>(j), order[j]);
        if (j > 0) {
            const auto d = detail::pair_cost(p, v, order[j - 1], order[j], d_star[j - 1]);
            prefix_cost += w.q_u * d.delta_d + w.r_u * d.f;
        }
    }

    long nodes = 0;
    auto rec = [&](auto&& self, int i, int k, double bound) -> void {
        ++nodes;
        // Every remaining term is non-negative, so the partial cost bounds
        // the completed cost from below.
        if (bound > best.objective + slack) return;
        if (i == m && k == r) {
            const auto u = AssignmentMatrix::from_order(order);
            auto cost = evaluate_assignment_cost(u, p, v, m, d_star, w, s);
            if (cost.objective < best.objective) {
                best.objective = cost.objective;
                best.assignment = u;
                best.cost = std::move(cost);
            }
            return;
        }
        const auto pos = static_cast<Eigen::Index>(order.size());
        for (int row : {i < m ? i : -1, k < r ? m + k : -1}) {
            if (row < 0) continue;
            double step = s(pos, row);
            if (pos > 0) {
                const auto d = detail::pair_cost(p, v, order.back(), row, d_star[pos - 1]);
                step += w.q_u * d.delta_d + w.r_u * d.f;
            }
            order.push_back(row);
            self(self, row < m ? i + 1 : i, row < m ? k : k + 1, bound + step);
            order.pop_back();
        }
    };
    rec(rec, fixed_main, fixed_ramp, prefix_cost);

    best.nodes_explored = nodes;
    best.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return best;
}

/// Cost-annotated FIFO solution for baseline comparisons.
inline SequencingSolution fifo_solution(const Eigen::VectorXd& p, const Eigen::VectorXd& v, int m,
                                        const std::vector<double>& d_star, const SequencerWeights& w,
                                        const Eigen::MatrixXd& s) {
    SequencingSolution out;
    out.assignment = fifo_sequence(p);
    out.cost = evaluate_assignment_cost(out.assignment, p, v, m, d_star, w, s);
    out.objective = out.cost.objective;
    out.big_m = w.big_m > 0.0 ? w.big_m : instance_big_m(p, v, d_star);
    return out;
}

/// d* for sequence positions 2..n of a scenario.
inline std::vector<double> desired_spacings(const ScenarioConfig& c) {
    std::vector<double> out;
    for (std::size_t pos = 2; pos <= c.num_vehicles(); ++pos) out.push_back(c.desired_spacing_at(pos));
    return out;
}

}  // namespace merge_stack::sequencing
