#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "merge_stack/merge_stack.hpp"

using namespace merge_stack;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitClean = 0;
constexpr int kExitFatal = 1;
constexpr int kExitDegraded = 2;

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// Infinite values are not representable in JSON; emit null.
json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
    return out;
}

json record_json(const sim::VehicleRecord& r) {
    return {{"step", r.step},
            {"time", r.time},
            {"cav_id", r.cav_id},
            {"road", to_string(r.road)},
            {"active", r.active},
            {"position", r.position},
            {"z", r.z},
            {"v", r.v},
            {"a", r.a},
            {"delta_d", r.delta_d},
            {"delta_v", r.delta_v},
            {"gamma", r.gamma},
            {"safety", r.safety},
            {"degraded", r.degraded},
            {"fallback", lon::to_string(r.fallback)},
            {"x", r.x},
            {"y", r.y},
            {"theta", r.theta},
            {"path_s", r.path_s},
            {"lateral_dev", r.lateral_dev},
            {"heading_dev", r.heading_dev},
            {"steering", r.steering},
            {"lat_degraded", r.lat_degraded}};
}

json metrics_json(const sim::MergeMetrics& m) {
    json out;
    out["vehicles"] = json::array();
    for (const auto& v : m.vehicles)
        out["vehicles"].push_back({{"cav_id", v.cav_id},
                                   {"follower", v.follower},
                                   {"converged", v.converged()},
                                   {"convergence_time", number_or_null(v.convergence_time)},
                                   {"accumulated_cost", v.accumulated_cost},
                                   {"settle_time", number_or_null(v.settle_time)},
                                   {"peak_abs_delta_d", v.peak_abs_delta_d}});
    out["l2"] = json::array();
    for (const auto& p : m.l2)
        out["l2"].push_back({{"pred_id", p.pred_id}, {"follower_id", p.follower_id}, {"ratio", number_or_null(p.ratio)}});
    out["mean_convergence_time"] = number_or_null(m.mean_convergence_time());
    out["mean_accumulated_cost"] = number_or_null(m.mean_accumulated_cost());
    return out;
}

json log_meta(const sim::SimulationLog& log) {
    json events = json::array();
    for (const auto& e : log.events)
        events.push_back({{"step", e.step}, {"order", e.order}, {"objective", e.objective}, {"nodes", e.nodes}});
    return {{"version", log.version},       {"config_hash", log.config_hash},   {"seed", log.seed},
            {"sequencer", log.sequencer},   {"time_step", log.time_step},       {"steps", log.steps},
            {"vehicles", log.num_vehicles}, {"final_order", log.final_order},   {"sequence_events", events},
            {"degraded_events", log.degraded_events}, {"collisions", log.collisions},
            {"min_same_lane_gap", number_or_null(log.min_same_lane_gap)}};
}

void write_run(const fs::path& dir, const sim::SimulationLog& log, const sim::MergeMetrics& m) {
    fs::create_directories(dir);
    {
        auto out = open_out(dir / "log.jsonl");
        out << json{{"meta", log_meta(log)}}.dump() << '\n';
        for (const auto& r : log.records) out << record_json(r).dump() << '\n';
    }
    {
        auto out = open_out(dir / "log.csv");
        sim::write_csv(log, out);
    }
    auto out = open_out(dir / "metrics.json");
    json j = metrics_json(m);
    j["meta"] = log_meta(log);
    out << j.dump(2) << '\n';
}

struct RunArgs {
    std::string scenario;
    std::string sequencer = "milp";
    double duration = 60.0;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool no_lateral = false;
    bool fine_plant = false;
    std::string profile;
};

sim::RunOptions run_options(const RunArgs& a, const ScenarioConfig& cfg) {
    sim::RunOptions opt;
    opt.sequencer = sim::parse_sequencer(a.sequencer);
    opt.duration = a.duration;
    opt.lateral = !a.no_lateral;
    opt.plant = a.fine_plant ? sim::PlantModel::Driveline : sim::PlantModel::Euler;
    if (!a.profile.empty()) {
        const auto p = sim::load_accel_profile(a.profile, cfg.time_step, cfg.limits);
        if (p.clipped > 0) std::cerr << "warning: clipped " << p.clipped << " profile samples to the limits\n";
        opt.leader_accel = p.accel;
    } else if (!cfg.leader_profile.empty()) {
        const auto p = sim::load_accel_profile(cfg.leader_profile, cfg.time_step, cfg.limits);
        if (p.clipped > 0) std::cerr << "warning: clipped " << p.clipped << " profile samples to the limits\n";
        opt.leader_accel = p.accel;
    }
    return opt;
}

int cmd_run(const RunArgs& a) {
    auto cfg = load_scenario_file(a.scenario);
    if (a.seed) cfg = jitter_initial_conditions(cfg, *a.seed);
    const auto opt = run_options(a, cfg);
    const auto log = sim::run_scenario(cfg, opt);
    const auto m = sim::compute_metrics(log, cfg.lon);
    write_run(a.out, log, m);
    std::cout << "steps " << log.steps << ", vehicles " << log.num_vehicles << ", degraded events "
              << log.degraded_events << ", collisions " << log.collisions << '\n'
              << "mean convergence time " << m.mean_convergence_time() << " s, mean accumulated cost "
              << m.mean_accumulated_cost() << '\n'
              << "wrote " << (fs::path(a.out) / "log.csv").string() << '\n';
    return log.degraded_events > 0 ? kExitDegraded : kExitClean;
}

struct EnsembleArgs {
    RunArgs run;
    int seeds = 20;
    std::uint64_t first_seed = 1;
    std::string sequencers = "both";
    unsigned threads = 0;
};

int cmd_ensemble(EnsembleArgs a) {
    const auto cfg = load_scenario_file(a.run.scenario);
    if (a.seeds < 1) throw std::invalid_argument("--seeds must be at least 1");
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < a.seeds; ++i) seeds.push_back(a.first_seed + static_cast<std::uint64_t>(i));
    std::vector<std::string> choices;
    if (a.sequencers == "both")
        choices = {"milp", "fifo"};
    else
        choices = {a.sequencers};

    json summary;
    bool degraded = false;
    bool failed = false;
    for (const auto& c : choices) {
        a.run.sequencer = c;
        const auto runs = sim::run_ensemble(cfg, seeds, run_options(a.run, cfg), a.threads);
        json per_seed = json::array();
        double conv = 0.0, cost = 0.0;
        int ok = 0, collisions = 0, unsettled = 0, events = 0;
        for (const auto& r : runs) {
            if (!r.error.empty()) {
                failed = true;
                per_seed.push_back({{"seed", r.seed}, {"error", r.error}});
                continue;
            }
            ++ok;
            conv += r.metrics.mean_convergence_time();
            cost += r.metrics.mean_accumulated_cost();
            collisions += r.log.collisions;
            events += r.log.degraded_events;
            unsettled += !r.metrics.all_settled();
            per_seed.push_back({{"seed", r.seed},
                                {"final_order", r.log.final_order},
                                {"mean_convergence_time", number_or_null(r.metrics.mean_convergence_time())},
                                {"mean_accumulated_cost", r.metrics.mean_accumulated_cost()},
                                {"degraded_events", r.log.degraded_events},
                                {"collisions", r.log.collisions},
                                {"all_settled", r.metrics.all_settled()}});
            if (!a.run.out.empty())
                write_run(fs::path(a.run.out) / c / ("seed_" + std::to_string(r.seed)), r.log, r.metrics);
        }
        degraded = degraded || events > 0;
        summary[c] = {{"runs", per_seed},
                      {"mean_convergence_time", number_or_null(ok ? conv / ok : NAN)},
                      {"mean_accumulated_cost", number_or_null(ok ? cost / ok : NAN)},
                      {"collisions", collisions},
                      {"degraded_events", events},
                      {"unsettled_runs", unsettled}};
    }
    std::cout << summary.dump(2) << '\n';
    if (!a.run.out.empty()) {
        fs::create_directories(a.run.out);
        auto out = open_out(fs::path(a.run.out) / "ensemble.json");
        out << summary.dump(2) << '\n';
    }
    if (failed) return kExitFatal;
    return degraded ? kExitDegraded : kExitClean;
}

int cmd_sequence(const std::string& scenario, const std::string& baseline, const std::string& dump) {
    const auto cfg = load_scenario_file(scenario);
    const auto iv = build_info_vectors(cfg);
    const auto d_star = sequencing::desired_spacings(cfg);
    const auto s = sequencing::weight_matrix_for(iv.m, iv.r, cfg.control_area_length);
    const auto sol = sim::parse_sequencer(baseline) == sim::SequencerChoice::Milp
                         ? sequencing::solve_milp(iv.p, iv.v, iv.m, iv.r, d_star, cfg.seq, s)
                         : sequencing::fifo_solution(iv.p, iv.v, iv.m, d_star, cfg.seq, s);
    const auto order = sol.assignment.order();
    json pairs = json::array();
    for (std::size_t j = 0; j < sol.cost.pairs.size(); ++j) {
        const auto& d = sol.cost.pairs[j];
        pairs.push_back({{"predecessor", order[j]},
                         {"follower", order[j + 1]},
                         {"spacing_deviation", d.spacing_deviation},
                         {"delta_d", d.delta_d},
                         {"speed_difference", d.speed_difference},
                         {"s_d", d.s_d},
                         {"s_v", d.s_v},
                         {"f", d.f}});
    }
    std::vector<std::string> roads;
    for (int row : order) roads.emplace_back(row < iv.m ? "mainline" : "ramp");
    json out{{"method", baseline},
             {"order", order},
             {"roads", roads},
             {"objective", sol.objective},
             {"microscopic", sol.cost.microscopic},
             {"macroscopic", sol.cost.macroscopic},
             {"nodes_explored", sol.nodes_explored},
             {"big_m", sol.big_m},
             {"wall_time_s", sol.wall_time_s},
             {"pairs", pairs}};
    std::cout << out.dump(2) << '\n';
    if (!dump.empty()) {
        std::vector<std::vector<int>> matrix;
        const auto& u = sol.assignment.matrix();
        for (Eigen::Index i = 0; i < u.rows(); ++i) {
            std::vector<int> row;
            for (Eigen::Index j = 0; j < u.cols(); ++j) row.push_back(u(i, j));
            matrix.push_back(row);
        }
        json diag = out;
        diag["assignment_matrix"] = matrix;
        diag["positions"] = vec_json(iv.p);
        diag["velocities"] = vec_json(iv.v);
        diag["desired_spacing"] = d_star;
        auto f = open_out(dump);
        f << diag.dump(2) << '\n';
    }
    return kExitClean;
}

struct GainArgs {
    std::string scenario;
    std::vector<double> q;
    std::optional<double> r, beta, ts;
    std::optional<int> np;
};

int cmd_gains(const GainArgs& a) {
    ScenarioConfig cfg;
    if (!a.scenario.empty()) cfg = load_scenario_file(a.scenario);
    LonWeights w = cfg.lon;
    if (!a.q.empty()) {
        if (a.q.size() != 3) throw std::invalid_argument("--q takes three values");
        std::copy(a.q.begin(), a.q.end(), w.q.begin());
    }
    if (a.r) w.r = *a.r;
    if (a.beta) w.beta = *a.beta;
    const int np = a.np.value_or(cfg.horizon);
    const double ts = a.ts.value_or(cfg.time_step);
    const auto g = stability::explicit_gains(w, np, ts);
    const auto v = stability::classify_string_stability(g);
    json out{{"K_b", {g.k_delta_d, g.k_delta_v, g.k_a}},
             {"K_f", vec_json(g.k_f_row)},
             {"k_f", g.k_f},
             {"p", v.p},
             {"q", v.q},
             {"stable", v.stable},
             {"sweep_stable", v.sweep_stable},
             {"worst_omega", v.worst_omega},
             {"worst_magnitude", number_or_null(v.worst_magnitude)},
             {"hessian_condition", g.h_condition},
             {"horizon", np},
             {"time_step", ts}};
    std::cout << out.dump(2) << '\n';
    return kExitClean;
}

struct FeasibleArgs {
    std::string variant = "all";
    int np = 10;
    std::int64_t samples = 1000000;
    std::uint64_t seed = 1;
    std::string csv;
    std::size_t max_points = 20000;
    std::vector<double> delta_d_range;
};

json polytope_json(const reach::Polytope& p) {
    json hs = json::array(), eq = json::array(), vs = json::array();
    for (const auto& h : p.halfspaces) hs.push_back({{"normal", vec_json(h.normal)}, {"offset", h.offset}});
    for (const auto& h : p.equalities) eq.push_back({{"normal", vec_json(h.normal)}, {"offset", h.offset}});
    for (const auto& v : p.vertices) vs.push_back(vec_json(v));
    return {{"empty", p.empty}, {"dimension", p.dimension()}, {"halfspaces", hs}, {"equalities", eq}, {"vertices", vs}};
}

int cmd_feasible_set(const FeasibleArgs& a) {
    reach::FeasibilityBounds bounds;
    if (!a.delta_d_range.empty()) {
        if (a.delta_d_range.size() != 2) throw std::invalid_argument("--delta-d-range takes two values");
        bounds.delta_d_min = a.delta_d_range[0];
        bounds.delta_d_max = a.delta_d_range[1];
    }
    const double ts = 0.1;
    std::vector<reach::TerminalKind> kinds;
    if (a.variant == "all")
        kinds = {reach::TerminalKind::ZeroTerminal, reach::TerminalKind::InvariantSet, reach::TerminalKind::Proposed};
    else
        kinds = {reach::parse_terminal_kind(a.variant)};
    std::optional<reach::Polytope> invariant;
    if (std::find(kinds.begin(), kinds.end(), reach::TerminalKind::InvariantSet) != kinds.end()) {
        const auto g = stability::explicit_gains(LonWeights{}, a.np, ts);
        invariant = reach::gain_invariant_set(Eigen::RowVector3d(g.k_delta_d, g.k_delta_v, g.k_a), reach::error_a(ts),
                                              reach::error_b(ts), bounds);
    }
    const auto reports = reach::feasible_set_report(bounds, a.np, ts, kinds, invariant, a.samples, a.seed);
    json out = json::array();
    std::ofstream csv;
    if (!a.csv.empty()) {
        csv = open_out(a.csv);
        csv << "variant,delta_d,delta_v,a\n";
    }
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& r = reports[i];
        out.push_back({{"variant", reach::to_string(r.kind)},
                       {"horizon", a.np},
                       {"initial_feasible_set", polytope_json(r.initial_feasible)},
                       {"terminal_set", polytope_json(r.terminal)},
                       {"empty_at", r.empty_at},
                       {"lower", vec_json(r.lower)},
                       {"upper", vec_json(r.upper)},
                       {"extent", vec_json(r.upper - r.lower)},
                       {"volume", r.volume.volume},
                       {"volume_half_width", r.volume.half_width},
                       {"samples", r.volume.samples}});
        if (csv.is_open()) {
            std::vector<Eigen::Vector3d> pts;
            reach::monte_carlo_volume(r.initial_feasible, bounds.lo(), bounds.hi(), a.samples, a.seed + i, &pts,
                                      a.max_points);
            for (const auto& p : pts)
                csv << reach::to_string(r.kind) << ',' << sim::format_number(p(0)) << ','
                    << sim::format_number(p(1)) << ',' << sim::format_number(p(2)) << '\n';
        }
    }
    std::cout << out.dump(2) << '\n';
    return kExitClean;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"On-ramp merging stack: sequencing, longitudinal and lateral MPC, analysis tools"};
    app.set_version_flag("--version", sim::kVersion);
    app.require_subcommand(1);

    RunArgs run;
    auto* run_cmd = app.add_subcommand("run", "Run one scenario and write log.jsonl, log.csv and metrics.json");
    run_cmd->add_option("--scenario", run.scenario, "Scenario config file")->required()->check(CLI::ExistingFile);
    run_cmd->add_option("--sequencer", run.sequencer, "milp or fifo")->check(CLI::IsMember({"milp", "fifo"}));
    run_cmd->add_option("--duration", run.duration, "Simulated seconds")->check(CLI::NonNegativeNumber);
    run_cmd->add_option("--seed", run.seed, "Perturb initial conditions with this seed");
    run_cmd->add_option("--out", run.out, "Output directory")->required();
    run_cmd->add_option("--profile", run.profile, "Leader acceleration CSV (time_s,accel_mps2)");
    run_cmd->add_flag("--no-lateral", run.no_lateral, "Skip the lateral controller");
    run_cmd->add_flag("--fine-plant", run.fine_plant, "Integrate the driveline model at T_s/10 with RK4");

    EnsembleArgs ens;
    ens.run.scenario = "scenarios/scenario1.cfg";
    ens.run.no_lateral = true;
    auto* ens_cmd = app.add_subcommand("ensemble", "Run one perturbed scenario per seed and compare sequencers");
    ens_cmd->add_option("--scenario", ens.run.scenario, "Scenario config file")->capture_default_str()->check(CLI::ExistingFile);
    ens_cmd->add_option("--seeds", ens.seeds, "Number of seeds")->capture_default_str();
    ens_cmd->add_option("--first-seed", ens.first_seed, "First seed")->capture_default_str();
    ens_cmd->add_option("--sequencer", ens.sequencers, "milp, fifo or both")->capture_default_str()
        ->check(CLI::IsMember({"milp", "fifo", "both"}));
    ens_cmd->add_option("--duration", ens.run.duration, "Simulated seconds")->capture_default_str();
    ens_cmd->add_option("--threads", ens.threads, "Worker threads (0 = hardware)");
    ens_cmd->add_option("--out", ens.run.out, "Write per-seed logs and ensemble.json here");
    ens_cmd->add_flag("!--lateral", ens.run.no_lateral, "Also run the lateral controller");

    std::string seq_scenario, baseline = "milp", dump;
    auto* seq_cmd = app.add_subcommand("sequence", "Solve the merging sequence for a scenario");
    seq_cmd->add_option("scenario", seq_scenario, "Scenario config file")->required()->check(CLI::ExistingFile);
    seq_cmd->add_option("--baseline", baseline, "milp or fifo")->capture_default_str()->check(CLI::IsMember({"milp", "fifo"}));
    seq_cmd->add_option("--dump-diagnostics", dump, "Write assignment matrix and inputs as JSON");

    GainArgs gains;
    auto* gains_cmd = app.add_subcommand("gains", "Explicit feedback/feedforward gains and string-stability verdict");
    gains_cmd->add_option("--scenario", gains.scenario, "Take weights and horizon from a config")
        ->check(CLI::ExistingFile);
    gains_cmd->add_option("--q", gains.q, "State weights on (dd, dv, a)")->expected(3);
    gains_cmd->add_option("--r", gains.r, "Input weight");
    gains_cmd->add_option("--beta", gains.beta, "Terminal weight scale");
    gains_cmd->add_option("--np", gains.np, "Prediction horizon")->check(CLI::PositiveNumber);
    gains_cmd->add_option("--ts", gains.ts, "Time step")->check(CLI::PositiveNumber);

    FeasibleArgs fs_args;
    auto* fs_cmd = app.add_subcommand("feasible-set", "Initial feasible set of a terminal-set variant");
    fs_cmd->add_option("--variant", fs_args.variant, "zero, invariant, proposed or all")->capture_default_str()
        ->check(CLI::IsMember({"zero", "invariant", "proposed", "all"}));
    fs_cmd->add_option("--np", fs_args.np, "Prediction horizon")->capture_default_str()->check(CLI::PositiveNumber);
    fs_cmd->add_option("--samples", fs_args.samples, "Monte Carlo samples")->capture_default_str()->check(CLI::PositiveNumber);
    fs_cmd->add_option("--seed", fs_args.seed, "Sampling seed")->capture_default_str();
    fs_cmd->add_option("--csv", fs_args.csv, "Write member points as CSV");
    fs_cmd->add_option("--max-points", fs_args.max_points, "Point cap per variant in the CSV")->capture_default_str();
    fs_cmd->add_option("--delta-d-range", fs_args.delta_d_range, "Spacing-deviation bounds")->expected(2);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitClean : kExitFatal;
    }

    try {
        if (*run_cmd) return cmd_run(run);
        if (*ens_cmd) return cmd_ensemble(ens);
        if (*seq_cmd) return cmd_sequence(seq_scenario, baseline, dump);
        if (*gains_cmd) return cmd_gains(gains);
        if (*fs_cmd) return cmd_feasible_set(fs_args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFatal;
    }
    return kExitFatal;
}
