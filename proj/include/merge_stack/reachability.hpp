#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace merge_stack::reach {

struct Halfspace {
    Eigen::Vector3d normal;
    double offset = 0.0;
};

/// Bounded convex polytope in the (Δd, Δv, a) error space. Halfspaces read
/// normal·x ≤ offset, equalities normal·x = offset. Lower-dimensional sets
/// carry their affine hull as equality rows.
struct Polytope {
    std::vector<Halfspace> halfspaces;
    std::vector<Halfspace> equalities;
    std::vector<Eigen::Vector3d> vertices;
    bool empty = false;

    int dimension() const { return empty ? -1 : 3 - static_cast<int>(equalities.size()); }

    bool contains(const Eigen::Vector3d& x, double tol = 1e-9) const {
        if (empty) return false;
        for (const auto& h : halfspaces)
            if (h.normal.dot(x) > h.offset + tol * (1.0 + std::abs(h.offset))) return false;
        for (const auto& e : equalities)
            if (std::abs(e.normal.dot(x) - e.offset) > tol * (1.0 + std::abs(e.offset))) return false;
        return true;
    }

    Eigen::Vector3d lower() const {
        Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
        for (const auto& v : vertices) lo = lo.cwiseMin(v);
        return lo;
    }
    Eigen::Vector3d upper() const {
        Eigen::Vector3d hi = Eigen::Vector3d::Constant(-std::numeric_limits<double>::infinity());
        for (const auto& v : vertices) hi = hi.cwiseMax(v);
        return hi;
    }
    Eigen::Vector3d extent() const { return empty ? Eigen::Vector3d::Zero() : Eigen::Vector3d(upper() - lower()); }
};

struct InputInterval {
    double gamma_min = -5.0;
    double gamma_max = 5.0;
};

namespace detail {

inline constexpr double kTightTol = 1e-8;
inline constexpr double kPointTol = 1e-7;

inline double tight_tol(double offset) { return kTightTol * (1.0 + std::abs(offset)); }

// Scales the normal to unit length. Returns false for a degenerate row; in
// that case `infeasible` says whether the row excludes everything.
inline bool normalize(Halfspace& h, bool& infeasible) {
    const double n = h.normal.norm();
    if (n < 1e-12) {
        infeasible = h.offset < -kTightTol;
        return false;
    }
    h.normal /= n;
    h.offset /= n;
    return true;
}

inline void push_unique(std::vector<Eigen::Vector3d>& pts, const Eigen::Vector3d& p) {
    for (const auto& q : pts)
        if ((q - p).cwiseAbs().maxCoeff() <= kPointTol * (1.0 + p.cwiseAbs().maxCoeff())) return;
    pts.push_back(p);
}

inline bool satisfies(const std::vector<Halfspace>& hs, const std::vector<Halfspace>& eqs, const Eigen::Vector3d& x) {
    for (const auto& h : hs)
        if (h.normal.dot(x) > h.offset + tight_tol(h.offset)) return false;
    for (const auto& e : eqs)
        if (std::abs(e.normal.dot(x) - e.offset) > tight_tol(e.offset)) return false;
    return true;
}

// Brute-force vertex enumeration: intersect every plane triple and keep the
// feasible points.
inline std::vector<Eigen::Vector3d> enumerate_vertices(const std::vector<Halfspace>& hs,
                                                       const std::vector<Halfspace>& eqs) {
    std::vector<const Halfspace*> planes;
    for (const auto& e : eqs) planes.push_back(&e);
    for (const auto& h : hs) planes.push_back(&h);
    const std::size_t m = planes.size();
    std::vector<Eigen::Vector3d> out;
    Eigen::Matrix3d mat;
    Eigen::Vector3d rhs;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j) {
            const Eigen::Vector3d cij = planes[i]->normal.cross(planes[j]->normal);
            if (cij.norm() < 1e-10) continue;
            for (std::size_t k = j + 1; k < m; ++k) {
                const double det = cij.dot(planes[k]->normal);
                if (std::abs(det) < 1e-10) continue;
                mat.row(0) = planes[i]->normal.transpose();
                mat.row(1) = planes[j]->normal.transpose();
                mat.row(2) = planes[k]->normal.transpose();
                rhs << planes[i]->offset, planes[j]->offset, planes[k]->offset;
                const Eigen::Vector3d x = mat.partialPivLu().solve(rhs);
                if (satisfies(hs, eqs, x)) push_unique(out, x);
            }
        }
    return out;
}

// Rebuilds a minimal description from a valid (possibly redundant) H-rep and
// a point set whose convex hull is the same polytope.
inline Polytope finalize(std::vector<Halfspace> hs, std::vector<Eigen::Vector3d> points) {
    Polytope p;
    if (points.empty()) {
        p.empty = true;
        return p;
    }
    std::vector<Eigen::Vector3d> pts;
    for (const auto& x : points) push_unique(pts, x);

    double scale = 1.0;
    for (const auto& x : pts) scale = std::max(scale, x.cwiseAbs().maxCoeff());
    Eigen::MatrixXd diff(static_cast<Eigen::Index>(pts.size()), 3);
    for (std::size_t i = 0; i < pts.size(); ++i) diff.row(static_cast<Eigen::Index>(i)) = (pts[i] - pts[0]).transpose();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(diff, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    int rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv(i) > 1e-9 * scale) ++rank;
    for (int i = rank; i < 3; ++i) {
        const Eigen::Vector3d n = svd.matrixV().col(i);
        p.equalities.push_back({n, n.dot(pts[0])});
    }

    std::vector<std::vector<bool>> masks;
    std::vector<Halfspace> cand;
    for (auto& h : hs) {
        bool infeasible = false;
        if (!normalize(h, infeasible)) continue;
        std::vector<bool> mask(pts.size());
        std::size_t count = 0;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            mask[i] = std::abs(h.normal.dot(pts[i]) - h.offset) <= tight_tol(h.offset);
            count += mask[i];
        }
        if (count == 0 || count == pts.size()) continue;
        masks.push_back(std::move(mask));
        cand.push_back(h);
    }
    auto subset = [](const std::vector<bool>& a, const std::vector<bool>& b) {
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i] && !b[i]) return false;
        return true;
    };
    for (std::size_t i = 0; i < cand.size(); ++i) {
        bool keep = true;
        for (std::size_t j = 0; j < cand.size() && keep; ++j) {
            if (i == j || !subset(masks[i], masks[j])) continue;
            // Strict subset, or an equal mask already represented by j < i.
            if (!subset(masks[j], masks[i]) || j < i) keep = false;
        }
        if (keep) p.halfspaces.push_back(cand[i]);
    }

    for (const auto& x : pts) {
        Eigen::MatrixXd active(0, 3);
        auto add = [&](const Eigen::Vector3d& n) {
            active.conservativeResize(active.rows() + 1, 3);
            active.row(active.rows() - 1) = n.transpose();
        };
        for (const auto& e : p.equalities) add(e.normal);
        for (const auto& h : p.halfspaces)
            if (std::abs(h.normal.dot(x) - h.offset) <= tight_tol(h.offset)) add(h.normal);
        if (active.rows() >= 3 && Eigen::FullPivLU<Eigen::MatrixXd>(active).rank() == 3) p.vertices.push_back(x);
    }
    return p;
}

inline Polytope from_rows(std::vector<Halfspace> hs, std::vector<Halfspace> eqs) {
    std::vector<Halfspace> h2, e2;
    for (auto& h : hs) {
        bool infeasible = false;
        if (normalize(h, infeasible))
            h2.push_back(h);
        else if (infeasible)
            return Polytope{{}, {}, {}, true};
    }
    for (auto& e : eqs) {
        bool unused = false;
        if (normalize(e, unused))
            e2.push_back(e);
        else if (std::abs(e.offset) > kTightTol)
            return Polytope{{}, {}, {}, true};
    }
    auto verts = enumerate_vertices(h2, e2);
    // Equalities enter the final description through the affine hull of the
    // vertices, so only inequalities are carried.
    return finalize(std::move(h2), std::move(verts));
}

}  // namespace detail

/// Builds a polytope from halfspaces (and optional equality rows). The
/// described set must be bounded.
inline Polytope make_polytope(std::vector<Halfspace> halfspaces, std::vector<Halfspace> equalities = {}) {
    return detail::from_rows(std::move(halfspaces), std::move(equalities));
}

inline Polytope make_box(const Eigen::Vector3d& lo, const Eigen::Vector3d& hi) {
    std::vector<Halfspace> hs;
    for (int i = 0; i < 3; ++i) {
        hs.push_back({Eigen::Vector3d::Unit(i), hi(i)});
        hs.push_back({-Eigen::Vector3d::Unit(i), -lo(i)});
    }
    return make_polytope(std::move(hs));
}

inline Polytope make_point(const Eigen::Vector3d& x) { return make_box(x, x); }

inline Polytope empty_polytope() { return Polytope{{}, {}, {}, true}; }

inline Polytope intersect(const Polytope& a, const Polytope& b) {
    if (a.empty || b.empty) return empty_polytope();
    std::vector<Halfspace> hs = a.halfspaces, eqs = a.equalities;
    hs.insert(hs.end(), b.halfspaces.begin(), b.halfspaces.end());
    eqs.insert(eqs.end(), b.equalities.begin(), b.equalities.end());
    return make_polytope(std::move(hs), std::move(eqs));
}

/// S ⊕ {t·d : t ∈ [lo, hi]}. Vertices come from the shifted copies; the
/// halfspaces from eliminating t, then pruned against those vertices.
inline Polytope minkowski_sum_segment(const Polytope& s, const Eigen::Vector3d& d, double lo, double hi) {
    if (s.empty) throw std::invalid_argument("Minkowski sum of an empty polytope");
    if (lo > hi) throw std::invalid_argument("segment bounds are reversed");

    // Rows (n, α, c) meaning n·x + α t ≤ c.
    struct Row {
        Eigen::Vector3d n;
        double alpha, c;
    };
    std::vector<Row> rows;
    for (const auto& h : s.halfspaces) rows.push_back({h.normal, -h.normal.dot(d), h.offset});
    for (const auto& e : s.equalities) {
        rows.push_back({e.normal, -e.normal.dot(d), e.offset});
        rows.push_back({-e.normal, e.normal.dot(d), -e.offset});
    }
    rows.push_back({Eigen::Vector3d::Zero(), 1.0, hi});
    rows.push_back({Eigen::Vector3d::Zero(), -1.0, -lo});

    std::vector<Halfspace> out;
    std::vector<const Row*> pos, neg;
    for (const auto& r : rows) {
        if (std::abs(r.alpha) <= 1e-14)
            out.push_back({r.n, r.c});
        else
            (r.alpha > 0 ? pos : neg).push_back(&r);
    }
    for (const Row* p : pos)
        for (const Row* q : neg) {
            const double wp = -q->alpha, wq = p->alpha;
            out.push_back({wp * p->n + wq * q->n, wp * p->c + wq * q->c});
        }

    std::vector<Eigen::Vector3d> pts;
    for (const auto& v : s.vertices) {
        pts.push_back(v + lo * d);
        pts.push_back(v + hi * d);
    }
    bool infeasible = false;
    std::vector<Halfspace> kept;
    for (auto& h : out) {
        if (detail::normalize(h, infeasible))
            kept.push_back(h);
        else if (infeasible)
            return empty_polytope();
    }
    return detail::finalize(std::move(kept), std::move(pts));
}

/// {x : A x ∈ S}.
inline Polytope preimage_linear(const Polytope& s, const Eigen::Matrix3d& a) {
    if (s.empty) return empty_polytope();
    std::vector<Halfspace> hs, eqs;
    for (const auto& h : s.halfspaces) hs.push_back({a.transpose() * h.normal, h.offset});
    for (const auto& e : s.equalities) eqs.push_back({a.transpose() * e.normal, e.offset});
    Eigen::FullPivLU<Eigen::Matrix3d> lu(a);
    if (!lu.isInvertible()) return make_polytope(std::move(hs), std::move(eqs));
    std::vector<Eigen::Vector3d> pts;
    for (const auto& v : s.vertices) pts.push_back(lu.solve(v));
    for (const auto& e : eqs) {
        hs.push_back(e);
        hs.push_back({-e.normal, -e.offset});
    }
    return detail::finalize(std::move(hs), std::move(pts));
}

/// {x : ∃γ ∈ inputs, A x + B γ ∈ S}.
inline Polytope pre_set(const Polytope& s, const Eigen::Matrix3d& a, const Eigen::Vector3d& b,
                        const InputInterval& in) {
    if (s.empty) return empty_polytope();
    return preimage_linear(minkowski_sum_segment(s, -b, in.gamma_min, in.gamma_max), a);
}

struct ControllableSet {
    Polytope set;
    int empty_at = -1;  ///< step index at which the recursion went empty
};

inline ControllableSet controllable_set(const Polytope& target, int n, const Eigen::Matrix3d& a,
                                        const Eigen::Vector3d& b, const InputInterval& in,
                                        const Polytope& state_box) {
    if (n < 0) throw std::invalid_argument("step count must be non-negative");
    ControllableSet out{target, target.empty ? 0 : -1};
    for (int j = 1; j <= n && out.empty_at < 0; ++j) {
        out.set = intersect(pre_set(out.set, a, b, in), state_box);
        if (out.set.empty) out.empty_at = j;
    }
    return out;
}

/// State and input bounds for the initial-feasibility comparison.
struct FeasibilityBounds {
    double delta_d_min = -30.0, delta_d_max = 30.0;
    double delta_v_min = -3.0, delta_v_max = 3.0;
    double a_min = -3.0, a_max = 3.0;
    double gamma_min = -5.0, gamma_max = 5.0;

    Eigen::Vector3d lo() const { return {delta_d_min, delta_v_min, a_min}; }
    Eigen::Vector3d hi() const { return {delta_d_max, delta_v_max, a_max}; }
    Polytope state_box() const { return make_box(lo(), hi()); }
    InputInterval inputs() const { return {gamma_min, gamma_max}; }
};

enum class TerminalKind { ZeroTerminal, InvariantSet, Proposed };

inline const char* to_string(TerminalKind k) {
    switch (k) {
        case TerminalKind::ZeroTerminal: return "zero";
        case TerminalKind::InvariantSet: return "invariant";
        case TerminalKind::Proposed: return "proposed";
    }
    return "?";
}

inline TerminalKind parse_terminal_kind(const std::string& s) {
    if (s == "zero") return TerminalKind::ZeroTerminal;
    if (s == "invariant") return TerminalKind::InvariantSet;
    if (s == "proposed") return TerminalKind::Proposed;
    throw std::invalid_argument("unknown terminal set variant: " + s);
}

/// Error dynamics with a constant-speed predecessor (no feedforward term).
inline Eigen::Matrix3d error_a(double ts) {
    Eigen::Matrix3d a;
    a << 1, ts, 0, 0, 1, -ts, 0, 0, 1;
    return a;
}
inline Eigen::Vector3d error_b(double ts) { return {0, 0, ts}; }

/// Maximal positively invariant set of x⁺ = (A + B k) x inside the state box
/// with k·x within the input bounds.
inline Polytope gain_invariant_set(const Eigen::RowVector3d& k, const Eigen::Matrix3d& a, const Eigen::Vector3d& b,
                                   const FeasibilityBounds& bounds, int max_iter = 500) {
    const Eigen::Matrix3d acl = a + b * k;
    std::vector<Halfspace> base = bounds.state_box().halfspaces;
    base.push_back({k.transpose(), bounds.gamma_max});
    base.push_back({-k.transpose(), -bounds.gamma_min});
    Polytope o = make_polytope(base);
    for (int it = 0; it < max_iter; ++it) {
        if (o.empty) return o;
        const Polytope next = preimage_linear(o, acl);
        bool contained = true;
        for (const auto& v : o.vertices)
            if (!next.contains(v, 1e-9)) {
                contained = false;
                break;
            }
        if (contained) return o;
        o = intersect(o, next);
    }
    throw std::runtime_error("invariant set recursion did not terminate");
}

inline Polytope terminal_set_variant(TerminalKind kind, const FeasibilityBounds& bounds,
                                     const std::optional<Polytope>& invariant = std::nullopt) {
    switch (kind) {
        case TerminalKind::ZeroTerminal: return make_point(Eigen::Vector3d::Zero());
        case TerminalKind::Proposed:
            return make_box({bounds.delta_d_min, 0, 0}, {bounds.delta_d_max, 0, 0});
        case TerminalKind::InvariantSet:
            if (!invariant) throw std::invalid_argument("invariant-set variant needs a caller-supplied set");
            return *invariant;
    }
    throw std::invalid_argument("unknown terminal set variant");
}

struct VolumeEstimate {
    double volume = 0.0;
    double half_width = 0.0;  ///< 95% binomial interval
    double fraction = 0.0;
    std::int64_t samples = 0;
};

/// Monte Carlo volume of p by uniform sampling over the box [lo, hi].
inline VolumeEstimate monte_carlo_volume(const Polytope& p, const Eigen::Vector3d& lo, const Eigen::Vector3d& hi,
                                         std::int64_t samples, std::uint64_t seed,
                                         std::vector<Eigen::Vector3d>* members = nullptr,
                                         std::size_t max_members = 0) {
    if (samples <= 0) throw std::invalid_argument("sample count must be positive");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Eigen::Vector3d span = hi - lo;
    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < samples; ++i) {
        const Eigen::Vector3d x = lo + span.cwiseProduct(Eigen::Vector3d(u(rng), u(rng), u(rng)));
        if (p.contains(x)) {
            ++hits;
            if (members && members->size() < max_members) members->push_back(x);
        }
    }
    VolumeEstimate v;
    v.samples = samples;
    v.fraction = static_cast<double>(hits) / static_cast<double>(samples);
    const double box = span.prod();
    v.volume = v.fraction * box;
    v.half_width = 1.96 * std::sqrt(v.fraction * (1 - v.fraction) / static_cast<double>(samples)) * box;
    return v;
}

struct VariantReport {
    TerminalKind kind;
    Polytope terminal;
    Polytope initial_feasible;
    int empty_at = -1;
    VolumeEstimate volume;
    Eigen::Vector3d lower = Eigen::Vector3d::Zero();
    Eigen::Vector3d upper = Eigen::Vector3d::Zero();
};

inline std::vector<VariantReport> feasible_set_report(const FeasibilityBounds& bounds, int np, double ts,
                                                      const std::vector<TerminalKind>& variants,
                                                      const std::optional<Polytope>& invariant,
                                                      std::int64_t samples, std::uint64_t seed) {
    if (variants.empty()) throw std::invalid_argument("no terminal set variants requested");
    const Eigen::Matrix3d a = error_a(ts);
    const Eigen::Vector3d b = error_b(ts);
    const Polytope box = bounds.state_box();
    std::vector<VariantReport> out;
    for (std::size_t i = 0; i < variants.size(); ++i) {
        VariantReport r{variants[i], terminal_set_variant(variants[i], bounds, invariant), {}, -1, {}, {}, {}};
        const auto cs = controllable_set(r.terminal, np, a, b, bounds.inputs(), box);
        r.initial_feasible = cs.set;
        r.empty_at = cs.empty_at;
        r.volume = monte_carlo_volume(cs.set, bounds.lo(), bounds.hi(), samples, seed + i);
        if (!cs.set.empty) {
            r.lower = cs.set.lower();
            r.upper = cs.set.upper();
        }
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace merge_stack::reach
