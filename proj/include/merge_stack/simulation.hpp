#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "merge_stack/geometry.hpp"
#include "merge_stack/lateral.hpp"
#include "merge_stack/longitudinal.hpp"
#include "merge_stack/scenario.hpp"
#include "merge_stack/sequencer.hpp"
#include "merge_stack/stability.hpp"

namespace merge_stack::sim {

inline constexpr const char* kVersion = "0.1.0";

/// Two vehicles in the same lane closer than this count as a collision.
inline constexpr double kCollisionGap = 4.5;

class SimulationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class SequencerChoice { Milp, Fifo };

inline const char* to_string(SequencerChoice c) { return c == SequencerChoice::Milp ? "milp" : "fifo"; }

inline SequencerChoice parse_sequencer(const std::string& s) {
    if (s == "milp") return SequencerChoice::Milp;
    if (s == "fifo") return SequencerChoice::Fifo;
    throw std::invalid_argument("unknown sequencer '" + s + "' (expected milp or fifo)");
}

enum class PlantModel { Euler, Driveline };

// ---------------------------------------------------------------------------
// Number formatting

/// Shortest representation that parses back to the same double.
inline std::string format_number(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

inline double parse_number(std::string_view s, const std::string& what) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw std::invalid_argument(what + ": cannot parse '" + std::string(s) + "' as a number");
    return v;
}

/// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    for (int i = 15; i >= 0; --i) {
        buf[i] = "0123456789abcdef"[h & 0xF];
        h >>= 4;
    }
    buf[16] = '\0';
    return buf;
}

// ---------------------------------------------------------------------------
// Leader acceleration profiles

struct ProfileSample {
    double time = 0.0;
    double accel = 0.0;

    bool operator==(const ProfileSample&) const = default;
};

/// Acceleration per simulation step, index k at time k·T_s.
struct AccelProfile {
    std::vector<double> accel;
    int clipped = 0;

    /// Zero past the end of the trace: the leader then holds its speed.
    [[nodiscard]] double at(std::size_t step) const { return step < accel.size() ? accel[step] : 0.0; }
};

inline std::vector<ProfileSample> parse_profile_csv(std::istream& in, const std::string& name = "profile") {
    std::string line;
    std::vector<ProfileSample> out;
    bool header = false;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (!header) {
            if (line != "time_s,accel_mps2")
                throw std::invalid_argument(name + ": expected header 'time_s,accel_mps2', got '" + line + "'");
            header = true;
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw std::invalid_argument(name + ":" + std::to_string(lineno) + ": missing ','");
        const std::string where = name + ":" + std::to_string(lineno);
        ProfileSample s{parse_number(std::string_view(line).substr(0, comma), where),
                        parse_number(std::string_view(line).substr(comma + 1), where)};
        if (!out.empty() && !(s.time > out.back().time))
            throw std::invalid_argument(where + ": time column must be strictly increasing");
        out.push_back(s);
    }
    if (out.empty()) throw std::invalid_argument(name + ": profile has no samples");
    return out;
}

inline std::vector<ProfileSample> read_profile_samples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open profile '" + path + "'");
    return parse_profile_csv(in, path);
}

inline void write_profile_csv(std::ostream& out, const std::vector<ProfileSample>& samples) {
    out << "time_s,accel_mps2\n";
    for (const auto& s : samples) out << format_number(s.time) << ',' << format_number(s.accel) << '\n';
}

inline void save_profile_samples(const std::string& path, const std::vector<ProfileSample>& samples) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("cannot write profile '" + path + "'");
    write_profile_csv(out, samples);
}

/// Linear interpolation onto t0 + k·T_s, then clipping to [a_min, a_max].
inline AccelProfile resample_profile(const std::vector<ProfileSample>& samples, double ts, double a_min,
                                     double a_max) {
    if (samples.empty()) throw std::invalid_argument("profile has no samples");
    if (!(ts > 0.0)) throw std::invalid_argument("time step must be positive");
    AccelProfile out;
    const double t0 = samples.front().time;
    const double span = samples.back().time - t0;
    const auto n = static_cast<std::size_t>(std::floor(span / ts + 1e-9)) + 1;
    std::size_t j = 0;
    for (std::size_t k = 0; k < n; ++k) {
        const double t = t0 + static_cast<double>(k) * ts;
        while (j + 1 < samples.size() && samples[j + 1].time <= t) ++j;
        double a = samples[j].accel;
        if (j + 1 < samples.size()) {
            const auto& lo = samples[j];
            const auto& hi = samples[j + 1];
            a = lo.accel + (hi.accel - lo.accel) * (t - lo.time) / (hi.time - lo.time);
        }
        if (a < a_min || a > a_max) {
            ++out.clipped;
            a = std::clamp(a, a_min, a_max);
        }
        out.accel.push_back(a);
    }
    return out;
}

inline AccelProfile load_accel_profile(const std::string& path, double ts, const Limits& lim) {
    return resample_profile(read_profile_samples(path), ts, lim.a_min, lim.a_max);
}

/// The shipped disturbance: two periods of a 1.5 m/s² sinusoid over 10 s.
inline std::vector<ProfileSample> synthetic_disturbance_samples() {
    std::vector<ProfileSample> out;
    for (int k = 0; k <= 100; ++k) {
        const double t = k / 10.0;
        out.push_back({t, 1.5 * std::sin(2.0 * std::numbers::pi * t / 5.0)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Log

struct VehicleRecord {
    int step = 0;
    double time = 0.0;
    int cav_id = 0;
    RoadSide road = RoadSide::Mainline;
    bool active = false;
    int position = 0;  ///< 1-based sequence position, 0 while outside the control area
    double z = 0.0;
    double v = 0.0;
    double a = 0.0;
    double delta_d = 0.0;
    double delta_v = 0.0;
    double gamma = 0.0;
    bool safety = false;
    bool degraded = false;
    lon::Fallback fallback = lon::Fallback::None;
    double x = 0.0;
    double y = 0.0;
    double theta = 0.0;
    double path_s = 0.0;
    double lateral_dev = 0.0;
    double heading_dev = 0.0;
    double steering = 0.0;
    bool lat_degraded = false;

    [[nodiscard]] bool follower() const { return active && position >= 2; }

    bool operator==(const VehicleRecord&) const = default;
};

struct SequenceEvent {
    int step = 0;
    std::vector<int> order;  ///< cav ids, leader first
    double objective = 0.0;
    long nodes = 0;

    bool operator==(const SequenceEvent&) const = default;
};

struct SimulationLog {
    std::string version = kVersion;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string sequencer;
    double time_step = 0.1;
    int steps = 0;
    int num_vehicles = 0;
    std::vector<VehicleRecord> records;  ///< step-major, cav id minor
    std::vector<SequenceEvent> events;
    std::vector<int> final_order;
    int degraded_events = 0;
    int collisions = 0;
    double min_same_lane_gap = std::numeric_limits<double>::infinity();

    [[nodiscard]] double duration() const { return steps * time_step; }
    [[nodiscard]] const VehicleRecord& at(int step, int cav) const {
        return records[static_cast<std::size_t>(step * num_vehicles + cav)];
    }

    bool operator==(const SimulationLog&) const = default;
};

inline const std::vector<std::string>& csv_columns() {
    static const std::vector<std::string> cols{
        "step",     "time",    "cav_id",   "road",     "active", "position",    "z",           "v",
        "a",        "delta_d", "delta_v",  "gamma",    "safety", "degraded",    "fallback",    "x",
        "y",        "theta",   "path_s",   "lateral_dev", "heading_dev", "steering", "lat_degraded"};
    return cols;
}

inline void write_csv(const SimulationLog& log, std::ostream& out) {
    const auto& cols = csv_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
    for (const auto& r : log.records) {
        out << r.step << ',' << format_number(r.time) << ',' << r.cav_id << ',' << to_string(r.road) << ','
            << int(r.active) << ',' << r.position << ',' << format_number(r.z) << ',' << format_number(r.v) << ','
            << format_number(r.a) << ',' << format_number(r.delta_d) << ',' << format_number(r.delta_v) << ','
            << format_number(r.gamma) << ',' << int(r.safety) << ',' << int(r.degraded) << ','
            << lon::to_string(r.fallback) << ',' << format_number(r.x) << ',' << format_number(r.y) << ','
            << format_number(r.theta) << ',' << format_number(r.path_s) << ',' << format_number(r.lateral_dev)
            << ',' << format_number(r.heading_dev) << ',' << format_number(r.steering) << ','
            << int(r.lat_degraded) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Runner

struct RunOptions {
    SequencerChoice sequencer = SequencerChoice::Milp;
    double duration = 60.0;
    bool lateral = true;
    PlantModel plant = PlantModel::Euler;
    /// Overrides config.leader_profile when non-empty.
    std::vector<double> leader_accel;
    lon::MpcOptions mpc;
    /// Gain override for the followers: when set, followers use the explicit
    /// law γ = K_b x + Σ k_f,k a_pred,k instead of the constrained QP.
    const stability::GainSet* explicit_gains = nullptr;
};

namespace detail {

struct Vehicle {
    int id = 0;
    RoadSide side = RoadSide::Mainline;
    CavKinematics kin;
    bool active = false;
    Eigen::Vector3d pose = Eigen::Vector3d::Zero();
    double steering = 0.0;
    double torque = 0.0;  ///< driveline plant only

    [[nodiscard]] RoadSide lane() const { return kin.z_position >= 0.0 ? RoadSide::Mainline : side; }
};

inline void require_finite(const Vehicle& v, int step) {
    const bool ok = std::isfinite(v.kin.z_position) && std::isfinite(v.kin.velocity) &&
                    std::isfinite(v.kin.acceleration) && v.pose.allFinite();
    if (!ok) {
        std::ostringstream os;
        os << "non-finite state for cav " << v.id << " at step " << step << ": z=" << v.kin.z_position
           << " v=" << v.kin.velocity << " a=" << v.kin.acceleration;
        throw SimulationError(os.str());
    }
}

inline double driveline_resistance(double v, const DrivelineParams& p) {
    return p.f_roll * p.mass * p.gravity + 0.5 * p.air_density * p.drag_coefficient * p.frontal_area * v * v;
}

/// Fine plant: first-order torque lag τ·Ṫ + T = T_des driving m·a = η·T/r − F_res(v),
/// integrated by RK4 over ten substeps with T_des held. T_des is chosen so the
/// initial jerk equals γ.
inline void driveline_step(Vehicle& veh, double gamma, double ts, const DrivelineParams& p) {
    const double drag = p.air_density * p.drag_coefficient * p.frontal_area;
    const double v0 = veh.kin.velocity, a0 = veh.kin.acceleration;
    const double t_des = veh.torque + (gamma + drag * v0 * a0 / p.mass) * p.mass * p.tire_radius * p.time_lag / p.eta;
    auto accel = [&](double v, double torque) {
        return (p.eta * torque / p.tire_radius - driveline_resistance(v, p)) / p.mass;
    };
    auto f = [&](const Eigen::Vector3d& s) {
        return Eigen::Vector3d(s(1), accel(s(1), s(2)), (t_des - s(2)) / p.time_lag);
    };
    Eigen::Vector3d s(veh.kin.z_position, v0, veh.torque);
    const double h = ts / 10.0;
    for (int i = 0; i < 10; ++i) {
        const Eigen::Vector3d k1 = f(s);
        const Eigen::Vector3d k2 = f(s + 0.5 * h * k1);
        const Eigen::Vector3d k3 = f(s + 0.5 * h * k2);
        const Eigen::Vector3d k4 = f(s + h * k3);
        s += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    veh.kin = {s(0), s(1), accel(s(1), s(2))};
    veh.torque = s(2);
}

inline double cruise_gamma(double a, double ts, const Limits& l) {
    return std::clamp(-a / ts, l.gamma_min, l.gamma_max);
}

}  // namespace detail

/// Closed-loop run: sequence on entry, serial longitudinal MPC, lateral MPC,
/// plant update. Degraded controller steps are logged and counted.
inline SimulationLog run_scenario(const ScenarioConfig& config, const RunOptions& opt) {
    SimulationLog log;
    log.seed = config.seed;
    log.time_step = config.time_step;
    log.sequencer = to_string(opt.sequencer);
    log.config_hash = fnv1a_hex(emit_scenario(config));
    const int n = static_cast<int>(config.num_vehicles());
    log.num_vehicles = n;
    if (n == 0) return log;
    validate_scenario(config);
    if (!(opt.duration >= 0.0)) throw std::invalid_argument("duration must be non-negative");

    const double ts = config.time_step;
    const int np = config.horizon;
    const Limits& lim = config.limits;
    const int steps = static_cast<int>(std::llround(opt.duration / ts));

    std::vector<double> leader_profile = opt.leader_accel;
    if (leader_profile.empty() && !config.leader_profile.empty())
        leader_profile = load_accel_profile(config.leader_profile, ts, lim).accel;
    const AccelProfile profile{leader_profile, 0};
    const bool has_profile = !leader_profile.empty();

    const Path mainline = build_mainline_path(config.geometry);
    const Path ramp = build_ramp_path(config.geometry);
    auto path_for = [&](RoadSide lane) -> const Path& { return lane == RoadSide::Mainline ? mainline : ramp; };
    const double wheelbase = config.geometry.wheelbase;
    const auto lat_limits = lat::LatLimits::from(lim);

    std::vector<detail::Vehicle> fleet;
    for (const auto* road : {&config.mainline, &config.ramp}) {
        const RoadSide side = road == &config.mainline ? RoadSide::Mainline : RoadSide::Ramp;
        for (std::size_t i = 0; i < road->size(); ++i) {
            detail::Vehicle v;
            v.id = static_cast<int>(fleet.size());
            v.side = side;
            v.kin = road->cavs[i];
            const double lo = i < road->lateral_offsets.size() ? road->lateral_offsets[i] : 0.0;
            const double ho = i < road->heading_offsets.size() ? road->heading_offsets[i] : 0.0;
            const Path& p = path_for(v.lane());
            v.pose = lat::offset_pose(p, p.arc_length_at_z(v.kin.z_position), lo, ho).vec();
            v.torque = config.driveline.tire_radius / config.driveline.eta *
                       (config.driveline.mass * v.kin.acceleration +
                        detail::driveline_resistance(v.kin.velocity, config.driveline));
            fleet.push_back(v);
        }
    }
    const int m_total = static_cast<int>(config.mainline.size());

    lon::PlatoonConfig pcfg;
    pcfg.weights = config.lon;
    pcfg.limits = lim;
    pcfg.horizon = np;
    pcfg.time_step = ts;
    pcfg.options = opt.mpc;

    std::vector<int> order;  // cav ids in sequence
    int active_count = 0;

    auto resequence = [&](int step) {
        // Active vehicles form a nearest-first prefix of each road.
        std::vector<int> rows;
        int m = 0, r = 0;
        for (const auto& v : fleet)
            if (v.active) {
                rows.push_back(v.id);
                (v.id < m_total ? m : r) += 1;
            }
        const int na = m + r;
        Eigen::VectorXd p(na), vel(na);
        for (int i = 0; i < na; ++i) {
            p(i) = fleet[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])].kin.z_position;
            vel(i) = fleet[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])].kin.velocity;
        }
        std::vector<double> d_star;
        for (int pos = 2; pos <= na; ++pos) d_star.push_back(config.desired_spacing_at(static_cast<std::size_t>(pos)));
        auto row_of = [&](int id) {
            return static_cast<int>(std::find(rows.begin(), rows.end(), id) - rows.begin());
        };
        std::vector<int> prefix;
        for (int id : order) {
            if (fleet[static_cast<std::size_t>(id)].kin.z_position < 0.0) break;
            prefix.push_back(row_of(id));
        }
        const auto s = sequencing::weight_matrix_for(m, r, config.control_area_length);
        sequencing::SequencingSolution sol;
        if (opt.sequencer == SequencerChoice::Milp)
            sol = sequencing::solve_milp(p, vel, m, r, d_star, config.seq, s, prefix);
        else
            sol = sequencing::fifo_solution(p, vel, m, d_star, config.seq, s);
        order.clear();
        for (int row : sol.assignment.order()) order.push_back(rows[static_cast<std::size_t>(row)]);
        log.events.push_back({step, order, sol.objective, sol.nodes_explored});
    };

    log.records.reserve(static_cast<std::size_t>(steps) * static_cast<std::size_t>(n));
    for (int step = 0; step < steps; ++step) {
        int now_active = 0;
        for (auto& v : fleet) {
            if (!v.active && v.kin.z_position >= -config.control_area_length) v.active = true;
            now_active += v.active;
        }
        if (now_active > active_count) {
            active_count = now_active;
            resequence(step);
        }

        std::vector<VehicleRecord> rec(static_cast<std::size_t>(n));
        std::vector<double> gamma(static_cast<std::size_t>(n), 0.0);
        std::vector<Eigen::VectorXd> speeds(static_cast<std::size_t>(n));

        if (!order.empty()) {
            const auto na = order.size();
            std::vector<CavKinematics> cavs;
            std::vector<bool> same_road;
            std::vector<double> d_star;
            for (std::size_t j = 0; j < na; ++j) {
                const auto& v = fleet[static_cast<std::size_t>(order[j])];
                cavs.push_back(v.kin);
                same_road.push_back(j == 0 || fleet[static_cast<std::size_t>(order[j - 1])].lane() == v.lane());
                d_star.push_back(j == 0 ? 0.0 : config.desired_spacing_at(j + 1));
            }
            Eigen::VectorXd lead(np + 1);
            lead(0) = cavs[0].acceleration;
            for (int k = 1; k <= np; ++k) {
                if (has_profile) {
                    lead(k) = profile.at(static_cast<std::size_t>(step + k));
                } else {
                    lead(k) = lead(k - 1) + ts * detail::cruise_gamma(lead(k - 1), ts, lim);
                }
            }

            lon::PlatoonStep ps;
            if (opt.explicit_gains) {
                // Unconstrained explicit law with the predecessor's broadcast.
                const auto& g = *opt.explicit_gains;
                ps = lon::serial_platoon_step({cavs[0]}, {true}, {0.0}, lead, pcfg);
                for (std::size_t j = 1; j < na; ++j) {
                    const auto pred = ps.plans[j - 1].broadcast();
                    const auto x0 = lon::error_state(cavs[j - 1], cavs[j], d_star[j]);
                    double gj = g.k_delta_d * x0.delta_d + g.k_delta_v * x0.delta_v + g.k_a * x0.accel;
                    for (Eigen::Index k = 0; k < g.k_f_row.size() && k < pred.accel.size(); ++k)
                        gj += g.k_f_row(k) * pred.accel(k);
                    lon::LonPlan plan;
                    plan.gamma = Eigen::VectorXd::Constant(np + 1, gj);
                    Eigen::VectorXd acc(np + 1);
                    acc(0) = cavs[j].acceleration;
                    for (int k = 1; k <= np; ++k) acc(k) = acc(k - 1) + ts * gj;
                    const auto own = lon::plan_from_accelerations(cavs[j].z_position, cavs[j].velocity, acc, ts);
                    plan.accel = own.accel;
                    plan.pos = own.pos;
                    plan.vel = own.vel;
                    ps.plans.push_back(plan);
                    ps.gamma.push_back(gj);
                }
            } else {
                ps = lon::serial_platoon_step(cavs, same_road, d_star, lead, pcfg);
            }

            for (std::size_t j = 0; j < na; ++j) {
                const int id = order[j];
                auto& r = rec[static_cast<std::size_t>(id)];
                const auto& plan = ps.plans[j];
                r.position = static_cast<int>(j) + 1;
                r.gamma = ps.gamma[j];
                gamma[static_cast<std::size_t>(id)] = ps.gamma[j];
                speeds[static_cast<std::size_t>(id)] = plan.vel;
                if (j > 0) {
                    const auto x0 = lon::error_state(cavs[j - 1], cavs[j], d_star[j]);
                    r.delta_d = x0.delta_d;
                    r.delta_v = x0.delta_v;
                    r.safety = plan.safety;
                    r.degraded = plan.degraded;
                    r.fallback = plan.fallback;
                }
            }
        }

        for (auto& v : fleet) {
            auto& r = rec[static_cast<std::size_t>(v.id)];
            r.step = step;
            r.time = step * ts;
            r.cav_id = v.id;
            r.road = v.side;
            r.active = v.active;
            r.z = v.kin.z_position;
            r.v = v.kin.velocity;
            r.a = v.kin.acceleration;
            if (!v.active) {
                r.gamma = detail::cruise_gamma(v.kin.acceleration, ts, lim);
                gamma[static_cast<std::size_t>(v.id)] = r.gamma;
            }
            const Path& path = path_for(v.lane());
            const auto pose = lat::PoseState::from(v.pose);
            const auto err = lat::tracking_error(path, pose);
            r.x = v.pose(0);
            r.y = v.pose(1);
            r.theta = pose.theta;
            r.path_s = err.s;
            r.lateral_dev = err.lateral;
            r.heading_dev = err.heading;
            if (opt.lateral) {
                auto& sp = speeds[static_cast<std::size_t>(v.id)];
                std::vector<double> pred(static_cast<std::size_t>(np + 1), v.kin.velocity);
                if (sp.size() == np + 1)
                    for (int k = 0; k <= np; ++k) pred[static_cast<std::size_t>(k)] = sp(k);
                const auto ref = lat::build_reference(path, pose, pred, ts, wheelbase);
                const auto lp =
                    lat::solve_lat_mpc(pose, ref, config.lat, lat_limits, ts, wheelbase, v.steering);
                r.lat_degraded = lp.degraded;
                v.steering = lp.delta0;
            }
            r.steering = v.steering;
            if (r.degraded || r.lat_degraded) ++log.degraded_events;
        }

        for (auto& v : fleet) {
            const double g = gamma[static_cast<std::size_t>(v.id)];
            if (opt.lateral) v.pose = lat::bicycle_rk4(v.pose, {v.kin.velocity, v.steering}, ts, wheelbase);
            if (opt.plant == PlantModel::Euler) {
                const CavKinematics k0 = v.kin;
                v.kin.z_position = k0.z_position + ts * k0.velocity;
                v.kin.velocity = k0.velocity + ts * k0.acceleration;
                v.kin.acceleration = k0.acceleration + ts * g;
            } else {
                detail::driveline_step(v, g, ts, config.driveline);
            }
            if (!opt.lateral) {
                const Path& p = path_for(v.lane());
                v.pose = lat::offset_pose(p, p.arc_length_at_z(v.kin.z_position), 0.0, 0.0).vec();
            }
            detail::require_finite(v, step);
        }

        for (std::size_t i = 0; i < rec.size(); ++i)
            for (std::size_t j = i + 1; j < rec.size(); ++j) {
                const auto& a = fleet[i];
                const auto& b = fleet[j];
                if (a.lane() != b.lane()) continue;
                const double gap = std::abs(a.kin.z_position - b.kin.z_position);
                log.min_same_lane_gap = std::min(log.min_same_lane_gap, gap);
                if (gap < kCollisionGap) ++log.collisions;
            }

        for (auto& r : rec) log.records.push_back(r);
        log.steps = step + 1;
    }
    log.final_order = order;
    return log;
}

inline SimulationLog run_scenario(const ScenarioConfig& config, SequencerChoice choice, double duration) {
    RunOptions opt;
    opt.sequencer = choice;
    opt.duration = duration;
    return run_scenario(config, opt);
}

// ---------------------------------------------------------------------------
// Metrics

struct VehicleMetrics {
    int cav_id = 0;
    bool follower = false;  ///< held a follower position at some step
    double convergence_time = 0.0;  ///< +∞ when |Δd| never settles inside Δd_safe
    double accumulated_cost = 0.0;
    double settle_time = 0.0;  ///< +∞ when max(|Δd|, |Δv|, |a|) never settles below the tolerance
    double peak_abs_delta_d = 0.0;

    [[nodiscard]] bool converged() const { return std::isfinite(convergence_time); }

    bool operator==(const VehicleMetrics&) const = default;
};

struct PairRatio {
    int pred_id = 0;
    int follower_id = 0;
    double ratio = 0.0;  ///< NaN when the predecessor's deviation is identically zero

    bool operator==(const PairRatio&) const = default;
};

struct MergeMetrics {
    std::vector<VehicleMetrics> vehicles;  ///< indexed by cav id
    std::vector<PairRatio> l2;             ///< consecutive followers in the final order

    [[nodiscard]] double mean_convergence_time() const {
        double s = 0.0;
        int c = 0;
        for (const auto& v : vehicles)
            if (v.follower) {
                s += v.convergence_time;
                ++c;
            }
        return c ? s / c : 0.0;
    }
    [[nodiscard]] double mean_accumulated_cost() const {
        double s = 0.0;
        int c = 0;
        for (const auto& v : vehicles)
            if (v.follower) {
                s += v.accumulated_cost;
                ++c;
            }
        return c ? s / c : 0.0;
    }
    [[nodiscard]] bool all_settled() const {
        return std::all_of(vehicles.begin(), vehicles.end(),
                           [](const VehicleMetrics& v) { return !v.follower || std::isfinite(v.settle_time); });
    }
};

/// Stage cost on the realized state and input, with the safety term when the
/// controller had it active.
inline double realized_stage_cost(const VehicleRecord& r, const LonWeights& w) {
    const lon::LonState x{r.delta_d, r.delta_v, r.a};
    double c = w.q[0] * x.delta_d * x.delta_d + w.q[1] * x.delta_v * x.delta_v + w.q[2] * x.accel * x.accel +
               w.r * r.gamma * r.gamma;
    if (r.safety) c += lon::safety_weight(x, w) * x.delta_v * x.delta_v;
    return c;
}

inline MergeMetrics compute_metrics(const SimulationLog& log, const LonWeights& w, double settle_tol = 0.05) {
    MergeMetrics out;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<std::vector<const VehicleRecord*>> series(static_cast<std::size_t>(log.num_vehicles));
    for (const auto& r : log.records)
        if (r.follower()) series[static_cast<std::size_t>(r.cav_id)].push_back(&r);

    for (int id = 0; id < log.num_vehicles; ++id) {
        VehicleMetrics m;
        m.cav_id = id;
        const auto& s = series[static_cast<std::size_t>(id)];
        m.follower = !s.empty();
        if (m.follower) {
            // Index of the first record after the last violation.
            auto settle_index = [&](auto&& inside) {
                std::size_t first = 0;
                for (std::size_t k = 0; k < s.size(); ++k)
                    if (!inside(*s[k])) first = k + 1;
                return first;
            };
            const std::size_t conv = settle_index(
                [&](const VehicleRecord& r) { return std::abs(r.delta_d) <= w.delta_d_safe; });
            m.convergence_time = conv < s.size() ? s[conv]->time : inf;
            const std::size_t settle = settle_index([&](const VehicleRecord& r) {
                return std::max({std::abs(r.delta_d), std::abs(r.delta_v), std::abs(r.a)}) < settle_tol;
            });
            m.settle_time = settle < s.size() ? s[settle]->time : inf;
            for (std::size_t k = 0; k < std::min(conv, s.size()); ++k) m.accumulated_cost += realized_stage_cost(*s[k], w);
            for (const auto* r : s) m.peak_abs_delta_d = std::max(m.peak_abs_delta_d, std::abs(r->delta_d));
        }
        out.vehicles.push_back(m);
    }

    for (std::size_t j = 2; j < log.final_order.size(); ++j) {
        const int pred = log.final_order[j - 1];
        const int fol = log.final_order[j];
        std::vector<double> a, b;
        for (int step = 0; step < log.steps; ++step) {
            const auto& rp = log.at(step, pred);
            const auto& rf = log.at(step, fol);
            if (!rp.follower() || !rf.follower()) continue;
            a.push_back(rf.delta_d);
            b.push_back(rp.delta_d);
        }
        double ratio = std::numeric_limits<double>::quiet_NaN();
        try {
            ratio = stability::l2_ratio(a, b);
        } catch (const std::exception&) {
        }
        out.l2.push_back({pred, fol, ratio});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ensembles

struct EnsembleRun {
    std::uint64_t seed = 0;
    SimulationLog log;
    MergeMetrics metrics;
    std::string error;  ///< non-empty when the run aborted
};

/// One jittered run per seed, spread over the available hardware threads.
inline std::vector<EnsembleRun> run_ensemble(const ScenarioConfig& base, const std::vector<std::uint64_t>& seeds,
                                             const RunOptions& opt, unsigned threads = 0) {
    std::vector<EnsembleRun> out(seeds.size());
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, seeds.size())));
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < seeds.size(); i = next++) {
            auto& run = out[i];
            run.seed = seeds[i];
            try {
                const auto cfg = jitter_initial_conditions(base, seeds[i]);
                run.log = run_scenario(cfg, opt);
                run.metrics = compute_metrics(run.log, cfg.lon);
            } catch (const std::exception& e) {
                run.error = e.what();
            }
        }
    };
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return out;
}

}  // namespace merge_stack::sim
