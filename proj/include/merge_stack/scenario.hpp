#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "merge_stack/config_text.hpp"
#include "merge_stack/geometry.hpp"

namespace merge_stack {

/// State of one vehicle on the virtual Z-axis (0 at the merge point,
/// negative upstream).
struct CavKinematics {
    double z_position = 0.0;
    double velocity = 0.0;
    double acceleration = 0.0;

    bool operator==(const CavKinematics&) const = default;
};

struct Limits {
    double delta_d_min = -30.0;
    double delta_d_max = 30.0;
    double v_min = 0.0;
    double v_max = 30.0;
    double a_min = -5.0;
    double a_max = 5.0;
    double gamma_min = -5.0;
    double gamma_max = 5.0;
    double steer_min = -0.8;
    double steer_max = 0.8;
    double steer_rate_min = -0.04;
    double steer_rate_max = 0.04;

    bool operator==(const Limits&) const = default;
};

struct LonWeights {
    std::array<double, 3> q{0.01, 0.02, 0.01};
    double r = 0.01;
    double p = 0.1;
    double beta = 1600.0;
    double delta_d_safe = 5.0;

    [[nodiscard]] Eigen::Matrix3d q_matrix() const { return Eigen::Vector3d(q[0], q[1], q[2]).asDiagonal(); }

    bool operator==(const LonWeights&) const = default;
};

struct SequencerWeights {
    double q_u = 1.0;
    double r_u = 1.0;
    double big_m = 0.0;  ///< 0 selects the per-instance value

    bool operator==(const SequencerWeights&) const = default;
};

/// Tracking weights on (X, Y, θ) and input weights on (v, δ).
struct LatWeights {
    std::array<double, 3> q{10.0, 10.0, 5.0};
    std::array<double, 2> r{1e-3, 5.0};

    bool operator==(const LatWeights&) const = default;
};

struct DrivelineParams {
    double eta = 0.8;
    double mass = 1500.0;
    double tire_radius = 0.25;
    double time_lag = 0.4;
    double f_roll = 0.015;
    double gravity = 9.8;
    double air_density = 1.2;
    double drag_coefficient = 0.25;
    double frontal_area = 2.0;

    bool operator==(const DrivelineParams&) const = default;
};

/// Vehicles on one road, nearest to the merge point first.
struct RoadPopulation {
    std::vector<CavKinematics> cavs;
    std::vector<double> lateral_offsets;  ///< meters, positive left of the centerline
    std::vector<double> heading_offsets;  ///< radians relative to the centerline

    [[nodiscard]] std::size_t size() const { return cavs.size(); }

    bool operator==(const RoadPopulation&) const = default;
};

struct ScenarioConfig {
    double time_step = 0.1;
    int horizon = 12;
    std::uint64_t seed = 1;
    double desired_spacing = 20.0;
    std::vector<double> spacing_overrides;  ///< entry k applies to sequence position k + 2
    double control_area_length = 400.0;
    double position_jitter = 0.0;
    double velocity_jitter = 0.0;
    double acceleration_jitter = 0.0;
    std::string leader_profile;  ///< acceleration trace; empty means constant speed

    Limits limits;
    LonWeights lon;
    SequencerWeights seq;
    LatWeights lat;
    DrivelineParams driveline;
    RoadGeometry geometry;

    RoadPopulation mainline;
    RoadPopulation ramp;

    [[nodiscard]] std::size_t num_vehicles() const { return mainline.size() + ramp.size(); }

    /// d* for the vehicle at sequence position `position` (2..n).
    [[nodiscard]] double desired_spacing_at(std::size_t position) const {
        if (position >= 2 && position - 2 < spacing_overrides.size()) return spacing_overrides[position - 2];
        return desired_spacing;
    }

    bool operator==(const ScenarioConfig&) const = default;
};

/// Info vectors in row order of the assignment matrix: mainline nearest-first,
/// then ramp nearest-first.
struct InfoVectors {
    Eigen::VectorXd p;
    Eigen::VectorXd v;
    int m = 0;
    int r = 0;
};

inline InfoVectors build_info_vectors(const ScenarioConfig& c) {
    const auto n = c.num_vehicles();
    if (n == 0) throw ConfigError("vehicles", "scenario has no vehicles to sequence");
    InfoVectors out;
    out.m = static_cast<int>(c.mainline.size());
    out.r = static_cast<int>(c.ramp.size());
    out.p.resize(static_cast<Eigen::Index>(n));
    out.v.resize(static_cast<Eigen::Index>(n));
    Eigen::Index i = 0;
    for (const auto* road : {&c.mainline, &c.ramp})
        for (const auto& cav : road->cavs) {
            out.p(i) = cav.z_position;
            out.v(i) = cav.velocity;
            ++i;
        }
    return out;
}

namespace detail {

inline void require(bool ok, const std::string& field, const std::string& msg) {
    if (!ok) throw ConfigError(field, msg);
}

inline void validate_road(const RoadPopulation& road, const std::string& section, const Limits& lim) {
    const auto n = road.cavs.size();
    require(road.lateral_offsets.size() == n, section + ".lateral_offsets", "length must match vehicle count");
    require(road.heading_offsets.size() == n, section + ".heading_offsets", "length must match vehicle count");
    for (std::size_t i = 0; i < n; ++i) {
        const auto& c = road.cavs[i];
        const std::string idx = "[" + std::to_string(i) + "]";
        require(std::isfinite(c.z_position), section + ".positions" + idx, "must be finite");
        require(c.velocity >= lim.v_min && c.velocity <= lim.v_max, section + ".velocities" + idx,
                "velocity " + format_number(c.velocity) + " outside [v_min, v_max]");
        require(c.acceleration >= lim.a_min && c.acceleration <= lim.a_max, section + ".accelerations" + idx,
                "acceleration " + format_number(c.acceleration) + " outside [a_min, a_max]");
        if (i > 0)
            require(c.z_position < road.cavs[i - 1].z_position, section + ".positions" + idx,
                    "vehicles must be listed nearest to the merge point first");
    }
}

}  // namespace detail

inline void validate_scenario(const ScenarioConfig& c) {
    using detail::require;
    require(c.time_step > 0.0, "simulation.time_step", "must be positive");
    require(c.horizon >= 3, "simulation.horizon", "must be at least 3");
    require(c.desired_spacing > 0.0, "simulation.desired_spacing", "must be positive");
    for (std::size_t i = 0; i < c.spacing_overrides.size(); ++i)
        require(c.spacing_overrides[i] > 0.0, "simulation.desired_spacing_overrides[" + std::to_string(i) + "]",
                "must be positive");
    require(c.control_area_length > 0.0, "simulation.control_area_length", "must be positive");
    require(c.position_jitter >= 0.0, "simulation.position_jitter", "must be non-negative");
    require(c.velocity_jitter >= 0.0, "simulation.velocity_jitter", "must be non-negative");
    require(c.acceleration_jitter >= 0.0, "simulation.acceleration_jitter", "must be non-negative");

    const auto& l = c.limits;
    auto ordered = [&](double lo, double hi, const std::string& lo_name, const std::string& hi_name) {
        require(lo < hi, "limits." + lo_name, "must be below limits." + hi_name);
    };
    ordered(l.delta_d_min, l.delta_d_max, "delta_d_min", "delta_d_max");
    ordered(l.v_min, l.v_max, "v_min", "v_max");
    ordered(l.a_min, l.a_max, "a_min", "a_max");
    ordered(l.gamma_min, l.gamma_max, "gamma_min", "gamma_max");
    ordered(l.steer_min, l.steer_max, "steer_min", "steer_max");
    ordered(l.steer_rate_min, l.steer_rate_max, "steer_rate_min", "steer_rate_max");
    require(l.v_min >= 0.0, "limits.v_min", "must be non-negative");

    for (int i = 0; i < 3; ++i) require(c.lon.q[i] > 0.0, "weights.q_lon", "entries must be positive");
    require(c.lon.r > 0.0, "weights.r_lon", "must be positive");
    require(c.lon.p >= 0.0, "weights.p_lon", "must be non-negative");
    require(c.lon.beta >= 1.0, "weights.beta", "must be at least 1");
    require(c.lon.delta_d_safe > 0.0, "weights.delta_d_safe", "must be positive");
    require(c.seq.q_u >= 0.0, "weights.q_u", "must be non-negative");
    require(c.seq.r_u >= 0.0, "weights.r_u", "must be non-negative");
    require(c.seq.big_m >= 0.0, "weights.big_m", "must be non-negative");
    for (double q : c.lat.q) require(q >= 0.0, "weights.q_lat", "entries must be non-negative");
    for (double r : c.lat.r) require(r > 0.0, "weights.r_lat", "entries must be positive");

    const auto& d = c.driveline;
    for (auto [v, name] : {std::pair{d.eta, "eta"}, {d.mass, "mass"}, {d.tire_radius, "tire_radius"},
                           {d.time_lag, "time_lag"}, {d.f_roll, "f_roll"}, {d.gravity, "gravity"},
                           {d.air_density, "air_density"}, {d.drag_coefficient, "drag_coefficient"},
                           {d.frontal_area, "frontal_area"}})
        require(v > 0.0, std::string("driveline.") + name, "must be positive");

    const auto& g = c.geometry;
    require(g.ramp_straight_length >= 0.0, "geometry.ramp_straight_length", "must be non-negative");
    require(g.ramp_arc_radius > 0.0, "geometry.ramp_arc_radius", "must be positive");
    require(g.ramp_arc_sweep >= 0.0 && g.ramp_arc_sweep < std::numbers::pi / 2, "geometry.ramp_arc_sweep",
            "must lie in [0, pi/2)");
    require(g.mainline_upstream_length > 0.0, "geometry.mainline_upstream_length", "must be positive");
    require(g.downstream_length > 0.0, "geometry.downstream_length", "must be positive");
    require(g.wheelbase > 0.0, "geometry.wheelbase", "must be positive");

    detail::validate_road(c.mainline, "vehicles.mainline", l);
    detail::validate_road(c.ramp, "vehicles.ramp", l);
    require(c.num_vehicles() > 0, "vehicles", "scenario has no vehicles");
}

namespace detail {

inline const std::vector<std::string>& known_keys(const std::string& section) {
    static const std::map<std::string, std::vector<std::string>> keys = {
        {"simulation",
         {"time_step", "horizon", "seed", "desired_spacing", "desired_spacing_overrides", "control_area_length",
          "position_jitter", "velocity_jitter", "acceleration_jitter", "leader_profile"}},
        {"limits",
         {"delta_d_min", "delta_d_max", "v_min", "v_max", "a_min", "a_max", "gamma_min", "gamma_max", "steer_min",
          "steer_max", "steer_rate_min", "steer_rate_max"}},
        {"weights", {"q_lon", "r_lon", "p_lon", "beta", "delta_d_safe", "q_u", "r_u", "big_m", "q_lat", "r_lat"}},
        {"driveline",
         {"eta", "mass", "tire_radius", "time_lag", "f_roll", "gravity", "air_density", "drag_coefficient",
          "frontal_area"}},
        {"geometry",
         {"ramp_straight_length", "ramp_arc_radius", "ramp_arc_sweep", "mainline_upstream_length",
          "downstream_length", "wheelbase"}},
        {"vehicles.mainline",
         {"positions", "velocities", "accelerations", "count", "front", "spacing", "velocity", "velocity_step",
          "acceleration", "lateral_offsets", "heading_offsets"}},
    };
    static const std::vector<std::string> none;
    const std::string lookup = section == "vehicles.ramp" ? "vehicles.mainline" : section;
    const auto it = keys.find(lookup);
    return it == keys.end() ? none : it->second;
}

template <std::size_t N>
void read_array(const ConfigDocument& doc, const std::string& sec, const std::string& key,
                std::array<double, N>& out) {
    if (auto l = doc.list(sec, key)) {
        require(l->size() == N, sec + "." + key, "expected " + std::to_string(N) + " entries");
        std::copy(l->begin(), l->end(), out.begin());
    }
}

inline int read_count(const ConfigDocument& doc, const std::string& sec, const std::string& key, int fallback) {
    const auto v = doc.number(sec, key);
    if (!v) return fallback;
    require(*v >= 0.0 && std::floor(*v) == *v && *v < 1e9, sec + "." + key, "must be a non-negative integer");
    return static_cast<int>(*v);
}

inline RoadPopulation read_road(const ConfigDocument& doc, const std::string& sec) {
    RoadPopulation road;
    if (!doc.has_section(sec)) return road;
    const auto positions = doc.list(sec, "positions");
    const bool layout = doc.find(sec, "count") || doc.find(sec, "front") || doc.find(sec, "spacing");
    require(!(positions && layout), sec, "give either 'positions' or 'count'/'front'/'spacing', not both");

    std::vector<double> z;
    if (positions) {
        z = *positions;
    } else if (layout) {
        const int count = read_count(doc, sec, "count", -1);
        require(count >= 0, sec + ".count", "required with 'front'/'spacing'");
        const auto front = doc.number(sec, "front");
        require(front.has_value() || count == 0, sec + ".front", "required with 'count'");
        const double spacing = doc.number(sec, "spacing").value_or(0.0);
        require(spacing > 0.0 || count <= 1, sec + ".spacing", "must be positive");
        for (int k = 0; k < count; ++k) z.push_back(*front - spacing * k);
    }
    const std::size_t n = z.size();

    auto per_vehicle = [&](const std::string& list_key, const std::string& scalar_key,
                           const std::string& step_key, double fallback) {
        std::vector<double> out;
        if (auto l = doc.list(sec, list_key); l && doc.find(sec, list_key)->data.index() == 1) {
            require(!doc.find(sec, scalar_key), sec, "give either '" + list_key + "' or '" + scalar_key + "'");
            require(l->size() == n, sec + "." + list_key, "length must match vehicle count " + std::to_string(n));
            return *l;
        } else if (l) {
            // A bare number for a list key broadcasts to every vehicle.
            return std::vector<double>(n, l->front());
        }
        const double base = doc.number(sec, scalar_key).value_or(fallback);
        const double step = step_key.empty() ? 0.0 : doc.number(sec, step_key).value_or(0.0);
        for (std::size_t k = 0; k < n; ++k) out.push_back(base + step * static_cast<double>(k));
        return out;
    };

    require(n == 0 || doc.find(sec, "velocities") || doc.find(sec, "velocity"), sec + ".velocity",
            "vehicle velocities are required");
    const auto v = per_vehicle("velocities", "velocity", "velocity_step", 0.0);
    const auto a = per_vehicle("accelerations", "acceleration", "", 0.0);
    road.lateral_offsets = per_vehicle("lateral_offsets", "", "", 0.0);
    road.heading_offsets = per_vehicle("heading_offsets", "", "", 0.0);
    for (std::size_t k = 0; k < n; ++k) road.cavs.push_back({z[k], v[k], a[k]});
    return road;
}

}  // namespace detail

/// Parses a scenario document. Omitted fields take their defaults.
inline ScenarioConfig load_scenario(std::string_view text) {
    const auto doc = ConfigDocument::parse(text);
    for (const auto& sec : doc.section_order()) {
        const auto& known = detail::known_keys(sec);
        if (known.empty()) throw ConfigError(sec, "unknown section");
        for (const auto& key : doc.keys(sec))
            if (std::find(known.begin(), known.end(), key) == known.end())
                throw ConfigError(sec + "." + key, "unknown key");
    }

    ScenarioConfig c;
    auto num = [&](const char* sec, const char* key, double& out) {
        if (auto v = doc.number(sec, key)) out = *v;
    };

    num("simulation", "time_step", c.time_step);
    c.horizon = detail::read_count(doc, "simulation", "horizon", c.horizon);
    c.seed = static_cast<std::uint64_t>(detail::read_count(doc, "simulation", "seed", static_cast<int>(c.seed)));
    num("simulation", "desired_spacing", c.desired_spacing);
    if (auto l = doc.list("simulation", "desired_spacing_overrides")) c.spacing_overrides = *l;
    num("simulation", "control_area_length", c.control_area_length);
    num("simulation", "position_jitter", c.position_jitter);
    num("simulation", "velocity_jitter", c.velocity_jitter);
    num("simulation", "acceleration_jitter", c.acceleration_jitter);
    if (auto s = doc.text("simulation", "leader_profile")) c.leader_profile = *s;

    auto& l = c.limits;
    num("limits", "delta_d_min", l.delta_d_min);
    num("limits", "delta_d_max", l.delta_d_max);
    num("limits", "v_min", l.v_min);
    num("limits", "v_max", l.v_max);
    num("limits", "a_min", l.a_min);
    num("limits", "a_max", l.a_max);
    num("limits", "gamma_min", l.gamma_min);
    num("limits", "gamma_max", l.gamma_max);
    num("limits", "steer_min", l.steer_min);
    num("limits", "steer_max", l.steer_max);
    num("limits", "steer_rate_min", l.steer_rate_min);
    num("limits", "steer_rate_max", l.steer_rate_max);

    detail::read_array(doc, "weights", "q_lon", c.lon.q);
    num("weights", "r_lon", c.lon.r);
    num("weights", "p_lon", c.lon.p);
    num("weights", "beta", c.lon.beta);
    num("weights", "delta_d_safe", c.lon.delta_d_safe);
    num("weights", "q_u", c.seq.q_u);
    num("weights", "r_u", c.seq.r_u);
    num("weights", "big_m", c.seq.big_m);
    detail::read_array(doc, "weights", "q_lat", c.lat.q);
    detail::read_array(doc, "weights", "r_lat", c.lat.r);

    auto& d = c.driveline;
    num("driveline", "eta", d.eta);
    num("driveline", "mass", d.mass);
    num("driveline", "tire_radius", d.tire_radius);
    num("driveline", "time_lag", d.time_lag);
    num("driveline", "f_roll", d.f_roll);
    num("driveline", "gravity", d.gravity);
    num("driveline", "air_density", d.air_density);
    num("driveline", "drag_coefficient", d.drag_coefficient);
    num("driveline", "frontal_area", d.frontal_area);

    auto& g = c.geometry;
    num("geometry", "ramp_straight_length", g.ramp_straight_length);
    num("geometry", "ramp_arc_radius", g.ramp_arc_radius);
    num("geometry", "ramp_arc_sweep", g.ramp_arc_sweep);
    num("geometry", "mainline_upstream_length", g.mainline_upstream_length);
    num("geometry", "downstream_length", g.downstream_length);
    num("geometry", "wheelbase", g.wheelbase);

    c.mainline = detail::read_road(doc, "vehicles.mainline");
    c.ramp = detail::read_road(doc, "vehicles.ramp");
    validate_scenario(c);
    return c;
}

inline ScenarioConfig load_scenario_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot open scenario file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    auto c = load_scenario(ss.str());
    // Relative profile paths are taken from the scenario file's directory.
    if (!c.leader_profile.empty() && std::filesystem::path(c.leader_profile).is_relative())
        c.leader_profile = (std::filesystem::path(path).parent_path() / c.leader_profile).lexically_normal().string();
    return c;
}

/// Writes every field explicitly; vehicles always as lists.
inline std::string emit_scenario(const ScenarioConfig& c) {
    ConfigWriter w;
    w.section("simulation");
    w.number("time_step", c.time_step);
    w.number("horizon", c.horizon);
    w.number("seed", static_cast<double>(c.seed));
    w.number("desired_spacing", c.desired_spacing);
    w.list("desired_spacing_overrides", c.spacing_overrides);
    w.number("control_area_length", c.control_area_length);
    w.number("position_jitter", c.position_jitter);
    w.number("velocity_jitter", c.velocity_jitter);
    w.number("acceleration_jitter", c.acceleration_jitter);
    if (!c.leader_profile.empty()) w.text("leader_profile", c.leader_profile);

    const auto& l = c.limits;
    w.section("limits");
    w.number("delta_d_min", l.delta_d_min);
    w.number("delta_d_max", l.delta_d_max);
    w.number("v_min", l.v_min);
    w.number("v_max", l.v_max);
    w.number("a_min", l.a_min);
    w.number("a_max", l.a_max);
    w.number("gamma_min", l.gamma_min);
    w.number("gamma_max", l.gamma_max);
    w.number("steer_min", l.steer_min);
    w.number("steer_max", l.steer_max);
    w.number("steer_rate_min", l.steer_rate_min);
    w.number("steer_rate_max", l.steer_rate_max);

    w.section("weights");
    w.list("q_lon", {c.lon.q.begin(), c.lon.q.end()});
    w.number("r_lon", c.lon.r);
    w.number("p_lon", c.lon.p);
    w.number("beta", c.lon.beta);
    w.number("delta_d_safe", c.lon.delta_d_safe);
    w.number("q_u", c.seq.q_u);
    w.number("r_u", c.seq.r_u);
    w.number("big_m", c.seq.big_m);
    w.list("q_lat", {c.lat.q.begin(), c.lat.q.end()});
    w.list("r_lat", {c.lat.r.begin(), c.lat.r.end()});

    const auto& d = c.driveline;
    w.section("driveline");
    w.number("eta", d.eta);
    w.number("mass", d.mass);
    w.number("tire_radius", d.tire_radius);
    w.number("time_lag", d.time_lag);
    w.number("f_roll", d.f_roll);
    w.number("gravity", d.gravity);
    w.number("air_density", d.air_density);
    w.number("drag_coefficient", d.drag_coefficient);
    w.number("frontal_area", d.frontal_area);

    const auto& g = c.geometry;
    w.section("geometry");
    w.number("ramp_straight_length", g.ramp_straight_length);
    w.number("ramp_arc_radius", g.ramp_arc_radius);
    w.number("ramp_arc_sweep", g.ramp_arc_sweep);
    w.number("mainline_upstream_length", g.mainline_upstream_length);
    w.number("downstream_length", g.downstream_length);
    w.number("wheelbase", g.wheelbase);

    for (const auto& [name, road] : {std::pair{"vehicles.mainline", &c.mainline}, {"vehicles.ramp", &c.ramp}}) {
        w.section(name);
        std::vector<double> z, v, a;
        for (const auto& cav : road->cavs) {
            z.push_back(cav.z_position);
            v.push_back(cav.velocity);
            a.push_back(cav.acceleration);
        }
        w.list("positions", z);
        w.list("velocities", v);
        w.list("accelerations", a);
        w.list("lateral_offsets", road->lateral_offsets);
        w.list("heading_offsets", road->heading_offsets);
    }
    return w.str();
}

/// Uniform draws in [0, 1) from a 64-bit Mersenne Twister stream, mapped by
/// taking the top 53 bits. Spelled out so runs reproduce across standard
/// libraries.
class UniformStream {
public:
    explicit UniformStream(std::uint64_t seed) : engine_(seed) {}

    double next() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double next(double lo, double hi) { return lo + (hi - lo) * next(); }

private:
    std::mt19937_64 engine_;
};

/// Applies the configured uniform perturbations. Draw order: mainline then
/// ramp, nearest first; per vehicle position, velocity, acceleration.
/// Perturbed velocity and acceleration are clipped to the limits.
inline ScenarioConfig jitter_initial_conditions(const ScenarioConfig& base, std::uint64_t seed) {
    ScenarioConfig c = base;
    UniformStream rng(seed);
    const auto& l = c.limits;
    for (auto* road : {&c.mainline, &c.ramp})
        for (auto& cav : road->cavs) {
            cav.z_position += rng.next(-c.position_jitter, c.position_jitter);
            cav.velocity = std::clamp(cav.velocity + rng.next(-c.velocity_jitter, c.velocity_jitter), l.v_min, l.v_max);
            cav.acceleration = std::clamp(rng.next(-c.acceleration_jitter, c.acceleration_jitter) + cav.acceleration,
                                          l.a_min, l.a_max);
        }
    c.position_jitter = c.velocity_jitter = c.acceleration_jitter = 0.0;
    c.seed = seed;
    validate_scenario(c);
    return c;
}

}  // namespace merge_stack
