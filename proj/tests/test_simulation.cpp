#include <gtest/gtest.h>

#include <bit>
#include <fstream>
#include <sstream>

#include "merge_stack/simulation.hpp"

using namespace merge_stack;
using namespace merge_stack::sim;

namespace {

const std::string kRoot = MERGE_STACK_SOURCE_DIR;

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Leader (id 0) plus one follower (id 1) whose Δd series is given.
SimulationLog two_vehicle_log(const std::vector<double>& delta_d, double ts = 0.1) {
    SimulationLog log;
    log.time_step = ts;
    log.num_vehicles = 2;
    log.steps = static_cast<int>(delta_d.size());
    log.final_order = {0, 1};
    for (int s = 0; s < log.steps; ++s) {
        VehicleRecord lead;
        lead.step = s;
        lead.time = s * ts;
        lead.cav_id = 0;
        lead.active = true;
        lead.position = 1;
        VehicleRecord f = lead;
        f.cav_id = 1;
        f.position = 2;
        f.delta_d = delta_d[static_cast<std::size_t>(s)];
        f.delta_v = 0.1 * f.delta_d;
        f.a = -0.05 * f.delta_d;
        f.gamma = 0.3;
        log.records.push_back(lead);
        log.records.push_back(f);
    }
    return log;
}

ScenarioConfig scenario(const std::string& name) { return load_scenario_file(kRoot + "/scenarios/" + name); }

}  // namespace

TEST(RunScenario, EmptyScenarioGivesEmptyLog) {
    ScenarioConfig c;
    const auto log = run_scenario(c, SequencerChoice::Milp, 10.0);
    EXPECT_TRUE(log.records.empty());
    EXPECT_EQ(log.steps, 0);
    EXPECT_EQ(log.duration(), 0.0);
}

TEST(Metrics, HalvingSpacingConvergesAtFirstStepInside) {
    std::vector<double> dd;
    for (int k = 0; k < 12; ++k) dd.push_back(10.0 * std::pow(0.5, k));
    const auto log = two_vehicle_log(dd);
    LonWeights w;
    w.delta_d_safe = 5.0;
    const auto m = compute_metrics(log, w);
    // Direct scan: first step with |Δd| ≤ 5 is k = 1, and nothing re-exits.
    std::size_t first = 0;
    while (std::abs(dd[first]) > 5.0) ++first;
    EXPECT_EQ(first, 1u);
    EXPECT_DOUBLE_EQ(m.vehicles[1].convergence_time, 0.1);
    EXPECT_TRUE(m.vehicles[1].follower);
    EXPECT_FALSE(m.vehicles[0].follower);
    // Only the step before convergence is charged.
    const double x = 10.0, v = 1.0, a = -0.5;
    EXPECT_NEAR(m.vehicles[1].accumulated_cost, 0.01 * x * x + 0.02 * v * v + 0.01 * a * a + 0.01 * 0.09, 1e-12);
}

TEST(Metrics, InsideFromTheStartAndNeverConverging) {
    LonWeights w;
    const auto inside = compute_metrics(two_vehicle_log(std::vector<double>(20, 1.0)), w);
    EXPECT_EQ(inside.vehicles[1].convergence_time, 0.0);
    EXPECT_EQ(inside.vehicles[1].accumulated_cost, 0.0);

    std::vector<double> dd(20, 1.0);
    dd.back() = 8.0;
    const auto late = compute_metrics(two_vehicle_log(dd), w);
    EXPECT_TRUE(std::isinf(late.vehicles[1].convergence_time));
    EXPECT_FALSE(late.vehicles[1].converged());
}

TEST(Metrics, PermutationConsistent) {
    const auto cfg = scenario("scenario1.cfg");
    const auto log = run_scenario(cfg, SequencerChoice::Milp, 20.0);
    const auto m = compute_metrics(log, cfg.lon);

    // Relabel id → n − 1 − id and keep records cav-id minor.
    const int n = log.num_vehicles;
    SimulationLog p = log;
    auto relabel = [n](int id) { return n - 1 - id; };
    for (int s = 0; s < log.steps; ++s)
        for (int id = 0; id < n; ++id) {
            auto r = log.at(s, id);
            r.cav_id = relabel(id);
            p.records[static_cast<std::size_t>(s * n + r.cav_id)] = r;
        }
    for (auto& id : p.final_order) id = relabel(id);
    const auto pm = compute_metrics(p, cfg.lon);
    for (int id = 0; id < n; ++id) {
        auto expected = m.vehicles[static_cast<std::size_t>(id)];
        expected.cav_id = relabel(id);
        EXPECT_EQ(pm.vehicles[static_cast<std::size_t>(relabel(id))], expected);
    }
    ASSERT_EQ(pm.l2.size(), m.l2.size());
    for (std::size_t j = 0; j < m.l2.size(); ++j) {
        EXPECT_EQ(pm.l2[j].pred_id, relabel(m.l2[j].pred_id));
        EXPECT_EQ(pm.l2[j].ratio, m.l2[j].ratio);
    }
}

TEST(Profile, ResamplesByLinearInterpolation) {
    std::istringstream in("time_s,accel_mps2\n0,1\n0.2,2\n0.4,-1\n0.6,0.5\n");
    const auto samples = parse_profile_csv(in);
    const auto p = resample_profile(samples, 0.1, -5, 5);
    ASSERT_EQ(p.accel.size(), 7u);
    for (std::size_t k = 0; k < samples.size(); ++k) EXPECT_NEAR(p.accel[2 * k], samples[k].accel, 1e-12);
    for (std::size_t k = 0; k + 1 < samples.size(); ++k)
        EXPECT_NEAR(p.accel[2 * k + 1], 0.5 * (samples[k].accel + samples[k + 1].accel), 1e-12);
    EXPECT_EQ(p.clipped, 0);
    EXPECT_EQ(p.at(100), 0.0);
}

TEST(Profile, ClipsAndCounts) {
    const std::vector<ProfileSample> s{{0, -7}, {0.1, 0}, {0.2, 6}};
    const auto p = resample_profile(s, 0.1, -5, 5);
    EXPECT_EQ(p.clipped, 2);
    EXPECT_EQ(p.accel, (std::vector<double>{-5, 0, 5}));
}

TEST(Profile, RejectsMalformedInput) {
    std::istringstream unsorted("time_s,accel_mps2\n0,1\n0.2,2\n0.1,0\n");
    EXPECT_THROW(parse_profile_csv(unsorted), std::invalid_argument);
    std::istringstream empty("");
    EXPECT_THROW(parse_profile_csv(empty), std::invalid_argument);
    std::istringstream header_only("time_s,accel_mps2\n");
    EXPECT_THROW(parse_profile_csv(header_only), std::invalid_argument);
    std::istringstream bad_header("t,a\n0,1\n");
    EXPECT_THROW(parse_profile_csv(bad_header), std::invalid_argument);
    std::istringstream garbage("time_s,accel_mps2\n0,abc\n");
    EXPECT_THROW(parse_profile_csv(garbage), std::invalid_argument);
    EXPECT_THROW(read_profile_samples(kRoot + "/profiles/missing.csv"), std::invalid_argument);
}

TEST(Profile, ShippedDisturbanceMatchesGeneratorAndRoundTrips) {
    const auto samples = synthetic_disturbance_samples();
    std::ostringstream os;
    write_profile_csv(os, samples);
    const std::string path = kRoot + "/profiles/synthetic_disturbance.csv";
    EXPECT_EQ(read_file(path), os.str());
    const auto loaded = read_profile_samples(path);
    ASSERT_EQ(loaded.size(), samples.size());
    for (std::size_t k = 0; k < samples.size(); ++k) {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(loaded[k].time), std::bit_cast<std::uint64_t>(samples[k].time));
        EXPECT_EQ(std::bit_cast<std::uint64_t>(loaded[k].accel), std::bit_cast<std::uint64_t>(samples[k].accel));
    }
    double peak = 0.0;
    for (const auto& s : samples) peak = std::max(peak, std::abs(s.accel));
    EXPECT_NEAR(peak, 1.5, 1e-2);
    EXPECT_DOUBLE_EQ(samples.back().time, 10.0);
}

TEST(RunScenario, ZeroProfileLeaderHoldsSpeed) {
    auto cfg = scenario("scenario3.cfg");
    RunOptions opt;
    opt.duration = 5.0;
    opt.lateral = false;
    opt.leader_accel.assign(100, 0.0);
    const auto log = run_scenario(cfg, opt);
    for (int s = 0; s < log.steps; ++s) EXPECT_DOUBLE_EQ(log.at(s, 0).v, 15.0);
}

TEST(RunScenario, KinematicConsistency) {
    const auto cfg = scenario("scenario1.cfg");
    const auto log = run_scenario(cfg, SequencerChoice::Milp, 10.0);
    ASSERT_EQ(log.steps, 100);
    for (int s = 0; s + 1 < log.steps; ++s)
        for (int id = 0; id < log.num_vehicles; ++id) {
            const auto& r0 = log.at(s, id);
            const auto& r1 = log.at(s + 1, id);
            EXPECT_NEAR(r1.time - r0.time, cfg.time_step, 1e-12);
            EXPECT_NEAR(r1.z - r0.z, r0.v * cfg.time_step, 1e-9);
            EXPECT_NEAR(r1.v - r0.v, r0.a * cfg.time_step, 1e-9);
            EXPECT_NEAR(r1.a - r0.a, r0.gamma * cfg.time_step, 1e-9);
            EXPECT_LE(std::abs(r0.gamma), 5.0 + 1e-9);
        }
}

TEST(RunScenario, Deterministic) {
    const auto cfg = jitter_initial_conditions(scenario("scenario1.cfg"), 7);
    RunOptions opt;
    opt.duration = 8.0;
    const auto a = run_scenario(cfg, opt);
    const auto b = run_scenario(cfg, opt);
    EXPECT_TRUE(a == b);
    std::ostringstream ca, cb;
    write_csv(a, ca);
    write_csv(b, cb);
    EXPECT_EQ(ca.str(), cb.str());
    EXPECT_EQ(a.config_hash, fnv1a_hex(emit_scenario(cfg)));
}

TEST(RunScenario, ScenarioOneSettlesWithoutCollisions) {
    for (auto choice : {SequencerChoice::Milp, SequencerChoice::Fifo}) {
        const auto cfg = scenario("scenario1.cfg");
        const auto log = run_scenario(cfg, choice, 60.0);
        const auto m = compute_metrics(log, cfg.lon);
        EXPECT_EQ(log.collisions, 0) << to_string(choice);
        EXPECT_TRUE(m.all_settled()) << to_string(choice);
        for (int id = 0; id < log.num_vehicles; ++id) {
            const auto& last = log.at(log.steps - 1, id);
            if (!last.follower()) continue;
            EXPECT_LT(std::abs(last.delta_d), 0.05);
            EXPECT_LT(std::abs(last.delta_v), 0.05);
        }
    }
}

TEST(RunScenario, ResequencesWhenAVehicleEnters) {
    auto cfg = scenario("scenario1.cfg");
    cfg.control_area_length = 340;  // the last mainline vehicle starts outside
    RunOptions opt;
    opt.duration = 5.0;
    opt.lateral = false;
    const auto log = run_scenario(cfg, opt);
    ASSERT_EQ(log.events.size(), 2u);
    EXPECT_EQ(log.events[0].step, 0);
    EXPECT_EQ(log.events[0].order.size(), 4u);
    EXPECT_EQ(log.events[1].order.size(), 5u);
    const auto& before = log.at(log.events[1].step - 1, 2);
    EXPECT_FALSE(before.active);
    EXPECT_EQ(before.position, 0);
    EXPECT_GE(before.z + cfg.time_step * before.v, -340.0);
    EXPECT_TRUE(log.at(log.events[1].step, 2).active);
}

TEST(RunScenario, NonFiniteStateAborts) {
    sim::detail::Vehicle v;
    v.kin.velocity = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(sim::detail::require_finite(v, 3), SimulationError);
}

TEST(RunScenario, DrivelinePlantStaysCloseToTheModel) {
    const auto cfg = scenario("scenario3.cfg");
    RunOptions opt;
    opt.duration = 5.0;
    opt.lateral = false;
    const auto euler = run_scenario(cfg, opt);
    opt.plant = PlantModel::Driveline;
    const auto fine = run_scenario(cfg, opt);
    for (int s = 0; s < euler.steps; ++s) {
        EXPECT_NEAR(fine.at(s, 1).a, euler.at(s, 1).a, 0.1);
        EXPECT_NEAR(fine.at(s, 1).z, euler.at(s, 1).z, 0.5);
    }
}

TEST(Persistence, CsvHeaderIsFrozen) {
    std::ostringstream os;
    write_csv(SimulationLog{}, os);
    EXPECT_EQ(os.str(), read_file(kRoot + "/tests/golden/simulation_header.csv"));
}

TEST(Persistence, NumbersRoundTrip) {
    for (double x : {0.1, -1.0 / 3.0, 1e-300, 12345.678901234567}) EXPECT_EQ(sim::parse_number(sim::format_number(x), "x"), x);
    EXPECT_EQ(sim::format_number(std::numeric_limits<double>::infinity()), "inf");
}

TEST(Ensemble, ParallelMatchesSequential) {
    const auto cfg = scenario("scenario1.cfg");
    RunOptions opt;
    opt.duration = 3.0;
    const std::vector<std::uint64_t> seeds{1, 2, 3};
    const auto par = run_ensemble(cfg, seeds, opt, 3);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        ASSERT_TRUE(par[i].error.empty()) << par[i].error;
        EXPECT_EQ(par[i].seed, seeds[i]);
        EXPECT_TRUE(par[i].log == run_scenario(jitter_initial_conditions(cfg, seeds[i]), opt));
    }
}
