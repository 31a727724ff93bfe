#pragma once

// Dense convex quadratic programming shared by the longitudinal and lateral
// controllers.
//
//   minimize    ½ xᵀ H x + gᵀ x
//   subject to  A_eq x  = b_eq
//               A_in x <= b_in
//
// The solver is the Goldfarb–Idnani dual active-set method. It starts from the
// unconstrained (or equality-constrained) minimizer and adds violated
// inequalities one at a time, so no separate feasibility phase is needed and
// infeasibility falls out of the dual step. Problems here are tiny (tens of
// variables), so the reduced matrices are refactored from scratch on every
// iteration instead of being updated.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace merge_stack::qp {

class QpError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct QuadraticProgram {
    Eigen::MatrixXd hessian;
    Eigen::VectorXd gradient;
    Eigen::MatrixXd eq_matrix;
    Eigen::VectorXd eq_rhs;
    Eigen::MatrixXd in_matrix;
    Eigen::VectorXd in_rhs;

    QuadraticProgram() = default;

    QuadraticProgram(Eigen::MatrixXd h, Eigen::VectorXd g)
        : hessian(std::move(h)), gradient(std::move(g)) {
        const auto n = gradient.size();
        eq_matrix.resize(0, n);
        eq_rhs.resize(0);
        in_matrix.resize(0, n);
        in_rhs.resize(0);
    }

    [[nodiscard]] Eigen::Index dimension() const { return gradient.size(); }
    [[nodiscard]] Eigen::Index num_equalities() const { return eq_rhs.size(); }
    [[nodiscard]] Eigen::Index num_inequalities() const { return in_rhs.size(); }

    void add_equality(const Eigen::Ref<const Eigen::RowVectorXd>& row, double rhs) {
        append_row(eq_matrix, eq_rhs, row, rhs);
    }

    void add_inequality(const Eigen::Ref<const Eigen::RowVectorXd>& row, double rhs) {
        append_row(in_matrix, in_rhs, row, rhs);
    }

    /// lo <= rowᵀx <= hi as two inequalities. Infinite sides are skipped.
    void add_range(const Eigen::Ref<const Eigen::RowVectorXd>& row, double lo, double hi) {
        if (std::isfinite(hi)) add_inequality(row, hi);
        if (std::isfinite(lo)) add_inequality(-row, -lo);
    }

    void add_bounds(Eigen::Index index, double lo, double hi) {
        Eigen::RowVectorXd e = Eigen::RowVectorXd::Zero(dimension());
        e(index) = 1.0;
        add_range(e, lo, hi);
    }

    [[nodiscard]] double objective(const Eigen::VectorXd& x) const {
        return 0.5 * x.dot(hessian * x) + gradient.dot(x);
    }

    /// Throws QpError on inconsistent dimensions or an asymmetric Hessian.
    void validate() const {
        const auto n = dimension();
        if (hessian.rows() != n || hessian.cols() != n)
            throw QpError("hessian must be " + std::to_string(n) + "x" + std::to_string(n));
        if (eq_matrix.cols() != n || eq_matrix.rows() != eq_rhs.size())
            throw QpError("equality constraint dimensions are inconsistent");
        if (in_matrix.cols() != n || in_matrix.rows() != in_rhs.size())
            throw QpError("inequality constraint dimensions are inconsistent");
        if (!hessian.allFinite() || !gradient.allFinite() || !eq_matrix.allFinite() ||
            !eq_rhs.allFinite() || !in_matrix.allFinite() || !in_rhs.allFinite())
            throw QpError("quadratic program contains non-finite data");
        const double asym = n > 0 ? (hessian - hessian.transpose()).cwiseAbs().maxCoeff() : 0.0;
        if (asym > 1e-12 * std::max(1.0, hessian.cwiseAbs().maxCoeff()))
            throw QpError("hessian is not symmetric");
    }

private:
    static void append_row(Eigen::MatrixXd& m, Eigen::VectorXd& v,
                           const Eigen::Ref<const Eigen::RowVectorXd>& row, double rhs) {
        if (m.cols() == 0 && m.rows() == 0) m.resize(0, row.size());
        if (row.size() != m.cols()) throw QpError("constraint row has wrong length");
        m.conservativeResize(m.rows() + 1, Eigen::NoChange);
        m.row(m.rows() - 1) = row;
        v.conservativeResize(v.size() + 1);
        v(v.size() - 1) = rhs;
    }
};

enum class QpStatus { Optimal, Infeasible, MaxIterations };

inline const char* to_string(QpStatus s) {
    switch (s) {
        case QpStatus::Optimal: return "optimal";
        case QpStatus::Infeasible: return "infeasible";
        case QpStatus::MaxIterations: return "max_iterations";
    }
    return "unknown";
}

/// Multipliers follow  H x + g + A_eqᵀ λ + A_inᵀ μ = 0,  μ >= 0.
struct QpSolution {
    Eigen::VectorXd primal;
    Eigen::VectorXd dual_eq;
    Eigen::VectorXd dual_in;
    double kkt_residual = std::numeric_limits<double>::infinity();
    QpStatus status = QpStatus::MaxIterations;
    int iterations = 0;
    bool regularized = false;

    [[nodiscard]] bool optimal() const { return status == QpStatus::Optimal; }
};

struct KktResiduals {
    double stationarity = 0.0;
    double primal = 0.0;
    double complementarity = 0.0;
    double dual = 0.0;

    [[nodiscard]] double max() const {
        return std::max({stationarity, primal, complementarity, dual});
    }
};

inline KktResiduals kkt_residuals(const QuadraticProgram& qp, const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& lambda, const Eigen::VectorXd& mu) {
    KktResiduals r;
    Eigen::VectorXd grad = qp.hessian * x + qp.gradient;
    if (qp.num_equalities() > 0) grad += qp.eq_matrix.transpose() * lambda;
    if (qp.num_inequalities() > 0) grad += qp.in_matrix.transpose() * mu;
    r.stationarity = grad.size() > 0 ? grad.cwiseAbs().maxCoeff() : 0.0;
    if (qp.num_equalities() > 0)
        r.primal = (qp.eq_matrix * x - qp.eq_rhs).cwiseAbs().maxCoeff();
    if (qp.num_inequalities() > 0) {
        const Eigen::VectorXd slack = qp.in_matrix * x - qp.in_rhs;
        r.primal = std::max(r.primal, slack.cwiseMax(0.0).maxCoeff());
        r.complementarity = mu.cwiseProduct(slack).cwiseAbs().maxCoeff();
        r.dual = (-mu).cwiseMax(0.0).maxCoeff();
    }
    return r;
}

namespace detail {

// Constraint i in the solver's internal "n_iᵀx >= b_i" convention. Equalities
// occupy ids [0, m_eq), inequalities follow.
struct ConstraintView {
    const QuadraticProgram& qp;

    [[nodiscard]] Eigen::Index m_eq() const { return qp.num_equalities(); }
    [[nodiscard]] bool is_equality(Eigen::Index id) const { return id < m_eq(); }

    [[nodiscard]] Eigen::VectorXd normal(Eigen::Index id) const {
        if (is_equality(id)) return qp.eq_matrix.row(id).transpose();
        return -qp.in_matrix.row(id - m_eq()).transpose();
    }
    [[nodiscard]] double rhs(Eigen::Index id) const {
        if (is_equality(id)) return qp.eq_rhs(id);
        return -qp.in_rhs(id - m_eq());
    }
    [[nodiscard]] double slack(Eigen::Index id, const Eigen::VectorXd& x) const {
        return normal(id).dot(x) - rhs(id);
    }
};

struct ActiveSet {
    std::vector<Eigen::Index> ids;
    std::vector<double> multipliers;

    [[nodiscard]] Eigen::MatrixXd normals(const ConstraintView& cv, Eigen::Index n) const {
        Eigen::MatrixXd out(n, static_cast<Eigen::Index>(ids.size()));
        for (std::size_t k = 0; k < ids.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = cv.normal(ids[k]);
        return out;
    }

    void erase(std::size_t k) {
        ids.erase(ids.begin() + static_cast<std::ptrdiff_t>(k));
        multipliers.erase(multipliers.begin() + static_cast<std::ptrdiff_t>(k));
    }
};

// Primal step z and dual step r for adding normal np to the active set.
inline void step_directions(const Eigen::MatrixXd& hinv, const Eigen::MatrixXd& active_normals,
                            const Eigen::VectorXd& np, Eigen::VectorXd& z, Eigen::VectorXd& r) {
    const Eigen::VectorXd w = hinv * np;
    if (active_normals.cols() == 0) {
        z = w;
        r.resize(0);
        return;
    }
    const Eigen::MatrixXd hn = hinv * active_normals;
    const Eigen::MatrixXd m = active_normals.transpose() * hn;
    r = m.ldlt().solve(hn.transpose() * np);
    z = w - hn * r;
}

}  // namespace detail

/// Solves a convex QP. Throws QpError for malformed input or a Hessian with an
/// eigenvalue below -1e-8.
inline QpSolution solve_qp(const QuadraticProgram& qp, double tolerance = 1e-9,
                           int max_iterations = 0) {
    if (!(tolerance > 0.0)) throw QpError("tolerance must be positive");
    qp.validate();

    const Eigen::Index n = qp.dimension();
    const Eigen::Index m_eq = qp.num_equalities();
    const Eigen::Index m_in = qp.num_inequalities();
    if (max_iterations <= 0) max_iterations = static_cast<int>(10 * (n + m_eq + m_in) + 50);

    QpSolution sol;
    sol.dual_eq = Eigen::VectorXd::Zero(m_eq);
    sol.dual_in = Eigen::VectorXd::Zero(m_in);
    if (n == 0) {
        sol.primal.resize(0);
        sol.status = QpStatus::Optimal;
        sol.kkt_residual = 0.0;
        return sol;
    }

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(qp.hessian, Eigen::EigenvaluesOnly);
    const double min_eig = eig.eigenvalues().minCoeff();
    if (min_eig < -1e-8) throw QpError("hessian is not positive semidefinite");

    Eigen::MatrixXd h = qp.hessian;
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (llt.info() != Eigen::Success || min_eig <= 1e-13 * std::max(1.0, eig.eigenvalues().maxCoeff())) {
        h += 1e-10 * Eigen::MatrixXd::Identity(n, n);
        llt.compute(h);
        sol.regularized = true;
        if (llt.info() != Eigen::Success) throw QpError("hessian factorization failed after regularization");
    }
    const Eigen::MatrixXd hinv = llt.solve(Eigen::MatrixXd::Identity(n, n));

    const detail::ConstraintView cv{qp};
    detail::ActiveSet active;

    Eigen::VectorXd x = -hinv * qp.gradient;

    // Equalities enter first as a block. Linearly dependent rows are skipped
    // once their consistency has been confirmed.
    if (m_eq > 0) {
        std::vector<Eigen::Index> independent;
        Eigen::MatrixXd basis(n, 0);
        for (Eigen::Index i = 0; i < m_eq; ++i) {
            Eigen::MatrixXd trial(n, basis.cols() + 1);
            trial << basis, cv.normal(i);
            Eigen::FullPivLU<Eigen::MatrixXd> lu(trial);
            lu.setThreshold(1e-12);
            if (lu.rank() == trial.cols()) {
                basis = trial;
                independent.push_back(i);
            }
        }
        const Eigen::MatrixXd e = basis.transpose();
        Eigen::VectorXd b(static_cast<Eigen::Index>(independent.size()));
        for (std::size_t k = 0; k < independent.size(); ++k) b(static_cast<Eigen::Index>(k)) = cv.rhs(independent[k]);
        const Eigen::MatrixXd m = e * hinv * e.transpose();
        const Eigen::VectorXd nu = m.ldlt().solve(b - e * x);
        x += hinv * e.transpose() * nu;
        for (std::size_t k = 0; k < independent.size(); ++k) {
            active.ids.push_back(independent[k]);
            active.multipliers.push_back(nu(static_cast<Eigen::Index>(k)));
        }
        const double eq_violation = (qp.eq_matrix * x - qp.eq_rhs).cwiseAbs().maxCoeff();
        if (eq_violation > tolerance * std::max(1.0, qp.eq_rhs.cwiseAbs().maxCoeff())) {
            sol.primal = x;
            sol.status = QpStatus::Infeasible;
            return sol;
        }
    }

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<char> is_active(static_cast<std::size_t>(m_eq + m_in), 0);
    for (auto id : active.ids) is_active[static_cast<std::size_t>(id)] = 1;

    int iterations = 0;
    bool infeasible = false;
    bool converged = false;
    const double feas_tol = 0.1 * tolerance;

    while (iterations < max_iterations) {
        // Most violated inactive inequality; the lowest id wins ties.
        Eigen::Index p = -1;
        double worst = -feas_tol;
        for (Eigen::Index id = m_eq; id < m_eq + m_in; ++id) {
            if (is_active[static_cast<std::size_t>(id)]) continue;
            const double s = cv.slack(id, x);
            if (s < worst) {
                worst = s;
                p = id;
            }
        }
        if (p < 0) {
            converged = true;
            break;
        }

        const Eigen::VectorXd np = cv.normal(p);
        double up = 0.0;
        bool added = false;
        while (!added && iterations < max_iterations) {
            ++iterations;
            Eigen::VectorXd z, r;
            detail::step_directions(hinv, active.normals(cv, n), np, z, r);

            // Partial (dual) step limit from active inequalities.
            double t1 = inf;
            std::size_t drop = active.ids.size();
            for (std::size_t k = 0; k < active.ids.size(); ++k) {
                if (cv.is_equality(active.ids[k])) continue;
                const double rk = r(static_cast<Eigen::Index>(k));
                if (rk > 1e-14) {
                    const double ratio = active.multipliers[k] / rk;
                    if (ratio < t1 || (ratio == t1 && active.ids[k] < active.ids[drop])) {
                        t1 = ratio;
                        drop = k;
                    }
                }
            }

            // Full (primal) step.
            const double zn = z.dot(np);
            const double scale = np.dot(hinv * np);
            double t2 = inf;
            if (zn > 1e-12 * std::max(scale, 1e-300)) t2 = -cv.slack(p, x) / zn;

            const double t = std::min(t1, t2);
            if (!std::isfinite(t)) {
                infeasible = true;
                break;
            }

            for (std::size_t k = 0; k < active.ids.size(); ++k)
                active.multipliers[k] -= t * r(static_cast<Eigen::Index>(k));
            up += t;

            if (std::isfinite(t2)) x += t * z;

            if (t2 <= t1) {
                active.ids.push_back(p);
                active.multipliers.push_back(up);
                is_active[static_cast<std::size_t>(p)] = 1;
                added = true;
            } else {
                is_active[static_cast<std::size_t>(active.ids[drop])] = 0;
                active.erase(drop);
            }
        }
        if (infeasible) break;
    }

    sol.iterations = iterations;
    sol.primal = x;
    if (infeasible) {
        sol.status = QpStatus::Infeasible;
        return sol;
    }

    for (std::size_t k = 0; k < active.ids.size(); ++k) {
        const Eigen::Index id = active.ids[k];
        if (cv.is_equality(id)) sol.dual_eq(id) = -active.multipliers[k];
        else sol.dual_in(id - m_eq) = std::max(0.0, active.multipliers[k]);
    }

    // Polish: re-solve the KKT system of the final working set directly.
    if (converged && !active.ids.empty()) {
        const Eigen::Index k = static_cast<Eigen::Index>(active.ids.size());
        Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + k, n + k);
        Eigen::VectorXd rhs(n + k);
        kkt.topLeftCorner(n, n) = h;
        const Eigen::MatrixXd nn = active.normals(cv, n);
        kkt.topRightCorner(n, k) = -nn;
        kkt.bottomLeftCorner(k, n) = nn.transpose();
        rhs.head(n) = -qp.gradient;
        for (Eigen::Index j = 0; j < k; ++j) rhs(n + j) = cv.rhs(active.ids[static_cast<std::size_t>(j)]);
        const Eigen::VectorXd polished = kkt.fullPivLu().solve(rhs);
        if (polished.allFinite()) {
            Eigen::VectorXd lam = Eigen::VectorXd::Zero(m_eq);
            Eigen::VectorXd mu = Eigen::VectorXd::Zero(m_in);
            bool sign_ok = true;
            for (Eigen::Index j = 0; j < k; ++j) {
                const Eigen::Index id = active.ids[static_cast<std::size_t>(j)];
                const double u = polished(n + j);
                if (cv.is_equality(id)) lam(id) = -u;
                else {
                    if (u < -tolerance) sign_ok = false;
                    mu(id - m_eq) = std::max(0.0, u);
                }
            }
            const Eigen::VectorXd xp = polished.head(n);
            const double before = kkt_residuals(qp, x, sol.dual_eq, sol.dual_in).max();
            const double after = kkt_residuals(qp, xp, lam, mu).max();
            if (sign_ok && after <= before) {
                sol.primal = xp;
                sol.dual_eq = lam;
                sol.dual_in = mu;
            }
        }
    }

    sol.kkt_residual = kkt_residuals(qp, sol.primal, sol.dual_eq, sol.dual_in).max();
    sol.status = (converged && sol.kkt_residual <= tolerance) ? QpStatus::Optimal : QpStatus::MaxIterations;
    return sol;
}

}  // namespace merge_stack::qp
