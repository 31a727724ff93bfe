#pragma once

// Road centerlines built from straight and circular-arc segments. Joints are
// position- and heading-continuous; curvature may jump at a joint.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace merge_stack {

enum class RoadSide { Mainline, Ramp };

inline const char* to_string(RoadSide side) { return side == RoadSide::Mainline ? "mainline" : "ramp"; }

/// Wraps an angle to (-π, π].
inline double wrap_angle(double a) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    a = std::fmod(a, two_pi);
    if (a <= -std::numbers::pi) a += two_pi;
    if (a > std::numbers::pi) a -= two_pi;
    return a;
}

struct RoadGeometry {
    double ramp_straight_length = 97.5;
    double ramp_arc_radius = 47.75;
    double ramp_arc_sweep = std::numbers::pi / 12.0;
    double mainline_upstream_length = 600.0;
    double downstream_length = 1000.0;
    double wheelbase = 2.7;

    [[nodiscard]] double ramp_arc_length() const { return ramp_arc_radius * ramp_arc_sweep; }

    bool operator==(const RoadGeometry&) const = default;
};

struct PathPose {
    double x = 0.0;
    double y = 0.0;
    double heading = 0.0;
    double curvature = 0.0;
};

struct PathProjection {
    double s = 0.0;
    double lateral_offset = 0.0;  ///< signed, positive to the left of travel
    double distance = 0.0;
};

class Path {
public:
    struct Segment {
        Eigen::Vector2d start;
        double heading0 = 0.0;
        double length = 0.0;
        double curvature = 0.0;  ///< 0 for a straight segment
    };

    Path() = default;

    void add_line(double length) { add_segment(length, 0.0); }

    /// Signed curvature: positive turns left.
    void add_arc(double radius, double sweep, bool turn_left) {
        if (!(radius > 0.0)) throw std::invalid_argument("arc radius must be positive");
        add_segment(radius * sweep, (turn_left ? 1.0 : -1.0) / radius);
    }

    void set_start(const Eigen::Vector2d& p, double heading) {
        if (!segments_.empty()) throw std::logic_error("start must be set before adding segments");
        start_ = p;
        start_heading_ = heading;
    }

    /// Arc length of the merge point along this path.
    void set_merge_arc_length(double s) { merge_s_ = s; }
    [[nodiscard]] double merge_arc_length() const { return merge_s_; }

    [[nodiscard]] double length() const {
        double total = 0.0;
        for (const auto& seg : segments_) total += seg.length;
        return total;
    }

    [[nodiscard]] const std::vector<Segment>& segments() const { return segments_; }

    /// Arc lengths at which one segment hands over to the next.
    [[nodiscard]] std::vector<double> joints() const {
        std::vector<double> out;
        double s = 0.0;
        for (std::size_t i = 0; i + 1 < segments_.size(); ++i) {
            s += segments_[i].length;
            out.push_back(s);
        }
        return out;
    }

    /// Pose at arc length s. Outside [0, length()] the end segments are
    /// extended.
    [[nodiscard]] PathPose pose_at(double s) const {
        if (segments_.empty()) return {start_.x(), start_.y(), start_heading_, 0.0};
        for (std::size_t i = 0; i < segments_.size(); ++i) {
            const auto& seg = segments_[i];
            if (s <= seg.length || i + 1 == segments_.size()) return eval(seg, s);
            s -= seg.length;
        }
        return eval(segments_.back(), s);
    }

    [[nodiscard]] double virtual_z(double s) const { return s - merge_s_; }
    [[nodiscard]] double arc_length_at_z(double z) const { return z + merge_s_; }

    /// Nearest centerline point to (x, y).
    [[nodiscard]] PathProjection project(double x, double y) const {
        PathProjection best;
        best.distance = std::numeric_limits<double>::infinity();
        double offset = 0.0;
        const Eigen::Vector2d p(x, y);
        for (const auto& seg : segments_) {
            const double local = closest_on_segment(seg, p);
            const PathPose pose = eval(seg, local);
            const Eigen::Vector2d foot(pose.x, pose.y);
            const double d = (p - foot).norm();
            if (d < best.distance) {
                best.distance = d;
                best.s = offset + local;
                const Eigen::Vector2d tangent(std::cos(pose.heading), std::sin(pose.heading));
                const Eigen::Vector2d rel = p - foot;
                best.lateral_offset = tangent.x() * rel.y() - tangent.y() * rel.x();
            }
            offset += seg.length;
        }
        return best;
    }

private:
    void add_segment(double length, double curvature) {
        if (!(length >= 0.0)) throw std::invalid_argument("segment length must be non-negative");
        Segment seg;
        if (segments_.empty()) {
            seg.start = start_;
            seg.heading0 = start_heading_;
        } else {
            const PathPose end = eval(segments_.back(), segments_.back().length);
            seg.start = {end.x, end.y};
            seg.heading0 = end.heading;
        }
        seg.length = length;
        seg.curvature = curvature;
        segments_.push_back(seg);
    }

    static PathPose eval(const Segment& seg, double s) {
        PathPose out;
        out.curvature = seg.curvature;
        out.heading = seg.heading0 + seg.curvature * s;
        if (seg.curvature == 0.0) {
            out.x = seg.start.x() + s * std::cos(seg.heading0);
            out.y = seg.start.y() + s * std::sin(seg.heading0);
        } else {
            const double k = seg.curvature;
            out.x = seg.start.x() + (std::sin(out.heading) - std::sin(seg.heading0)) / k;
            out.y = seg.start.y() - (std::cos(out.heading) - std::cos(seg.heading0)) / k;
        }
        return out;
    }

    static double closest_on_segment(const Segment& seg, const Eigen::Vector2d& p) {
        if (seg.curvature == 0.0) {
            const Eigen::Vector2d dir(std::cos(seg.heading0), std::sin(seg.heading0));
            return std::clamp((p - seg.start).dot(dir), 0.0, seg.length);
        }
        const double k = seg.curvature;
        const double r = 1.0 / std::abs(k);
        // Center sits to the left of travel for k > 0.
        const Eigen::Vector2d normal_left(-std::sin(seg.heading0), std::cos(seg.heading0));
        const Eigen::Vector2d center = seg.start + (k > 0 ? 1.0 : -1.0) * r * normal_left;
        const Eigen::Vector2d a0 = seg.start - center;
        const Eigen::Vector2d ap = p - center;
        double ang = std::atan2(a0.x() * ap.y() - a0.y() * ap.x(), a0.dot(ap));
        if (k < 0) ang = -ang;
        // Angles behind the start map to the nearer endpoint.
        const double sweep = seg.length * std::abs(k);
        if (ang < 0.0) {
            const double to_end = wrap_angle(ang - sweep);
            return std::abs(ang) <= std::abs(to_end) ? 0.0 : seg.length;
        }
        if (ang > sweep) {
            const double past = ang - sweep;
            const double before = 2.0 * std::numbers::pi - ang;
            return past <= before ? seg.length : 0.0;
        }
        return ang * r;
    }

    Eigen::Vector2d start_ = Eigen::Vector2d::Zero();
    double start_heading_ = 0.0;
    double merge_s_ = 0.0;
    std::vector<Segment> segments_;
};

/// Mainline: straight along +X through the merge point at the origin.
inline Path build_mainline_path(const RoadGeometry& g) {
    Path p;
    p.set_start({-g.mainline_upstream_length, 0.0}, 0.0);
    p.add_line(g.mainline_upstream_length + g.downstream_length);
    p.set_merge_arc_length(g.mainline_upstream_length);
    return p;
}

/// Ramp: straight approach from the right, then a right-turning arc that ends
/// tangent to the mainline at the merge point, then the mainline downstream.
inline Path build_ramp_path(const RoadGeometry& g) {
    if (!(g.ramp_arc_radius > 0.0)) throw std::invalid_argument("ramp arc radius must be positive");
    const double sweep = g.ramp_arc_sweep;
    const double r = g.ramp_arc_radius;
    // Arc from heading +sweep turning right down to heading 0, ending at the origin.
    const Eigen::Vector2d arc_start(-r * std::sin(sweep), -r * (1.0 - std::cos(sweep)));
    const Eigen::Vector2d straight_start =
        arc_start - g.ramp_straight_length * Eigen::Vector2d(std::cos(sweep), std::sin(sweep));
    Path p;
    p.set_start(straight_start, sweep);
    p.add_line(g.ramp_straight_length);
    p.add_arc(r, sweep, /*turn_left=*/false);
    p.add_line(g.downstream_length);
    p.set_merge_arc_length(g.ramp_straight_length + g.ramp_arc_length());
    return p;
}

inline Path build_path(RoadSide side, const RoadGeometry& g) {
    return side == RoadSide::Mainline ? build_mainline_path(g) : build_ramp_path(g);
}

/// Position on the shared virtual axis of a vehicle `arc_length_from_merge`
/// meters upstream of the merge point along its own road.
inline double map_to_virtual_axis(RoadSide /*side*/, double arc_length_from_merge) {
    return -arc_length_from_merge;
}

}  // namespace merge_stack
