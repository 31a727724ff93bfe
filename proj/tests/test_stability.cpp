#include <gtest/gtest.h>

#include <complex>
#include <random>

#include "merge_stack/stability.hpp"
#include "oracles.hpp"

using namespace merge_stack;
using namespace merge_stack::stability;

namespace {

constexpr double kTs = 0.1;
constexpr int kNp = 12;

Eigen::Matrix3d a_matrix() {
    Eigen::Matrix3d a;
    a << 1, kTs, 0, 0, 1, -kTs, 0, 0, 1;
    return a;
}

}  // namespace

TEST(Batch, SmallestHorizonByHand) {
    const auto bm = batch_matrices(LonWeights{}, 1, kTs);
    ASSERT_EQ(bm.su.rows(), 6);
    ASSERT_EQ(bm.su.cols(), 2);
    Eigen::MatrixXd expected = Eigen::MatrixXd::Zero(6, 2);
    expected(5, 0) = kTs;
    EXPECT_EQ(bm.su, expected);
    Eigen::MatrixXd sa = Eigen::MatrixXd::Zero(6, 2);
    sa(4, 0) = kTs;
    EXPECT_EQ(bm.sa, sa);
}

TEST(Batch, StateBlocksArePowersAndHessianIsPositive) {
    const auto bm = batch_matrices(LonWeights{}, kNp, kTs);
    const Eigen::Matrix3d a = a_matrix();
    EXPECT_LT((bm.sx.block<3, 3>(6, 0) - a * a).cwiseAbs().maxCoeff(), 1e-15);
    Eigen::Matrix3d an = Eigen::Matrix3d::Identity();
    for (int k = 0; k < kNp; ++k) an = a * an;
    EXPECT_LT((bm.sx.block<3, 3>(3 * kNp, 0) - an).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((bm.h - bm.h.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(bm.h);
    EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
    EXPECT_NEAR(bm.q_tilde(3 * kNp + 1, 3 * kNp + 1), 1600 * 0.02, 1e-12);
    EXPECT_NEAR(bm.r_tilde(kNp, kNp), 1600 * 0.01, 1e-12);
}

TEST(ExplicitSolution, OriginAndLinearity) {
    const auto bm = batch_matrices(LonWeights{}, kNp, kTs);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(kNp + 1);
    EXPECT_EQ(explicit_solution({0, 0, 0}, zero, bm), zero);
    const auto g1 = explicit_solution({3, -1, 0.5}, zero, bm);
    const auto g2 = explicit_solution({6, -2, 1.0}, zero, bm);
    EXPECT_LT((g2 - 2 * g1).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_THROW(explicit_solution({0, 0, 0}, Eigen::VectorXd::Zero(3), bm), std::invalid_argument);
}

TEST(ExplicitSolution, MatchesUnconstrainedQp) {
    const auto bm = batch_matrices(LonWeights{}, kNp, kTs);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int t = 0; t < 20; ++t) {
        const lon::LonState x0{10 * u(rng), 2 * u(rng), u(rng)};
        const qp::QuadraticProgram qp(2 * bm.h, 2 * bm.f.transpose() * x0.vec());
        const auto sol = qp::solve_qp(qp);
        ASSERT_TRUE(sol.optimal());
        const auto closed = explicit_solution(x0, Eigen::VectorXd::Zero(kNp + 1), bm);
        EXPECT_LT((sol.primal - closed).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(ExplicitSolution, EqualsConstrainedMpcWhenNothingBinds) {
    const LonWeights w;
    const auto bm = batch_matrices(w, kNp, kTs);
    lon::MpcOptions opt;
    opt.terminal_constraints = false;
    const lon::LonState x0{0.1, 0.02, -0.01};
    const auto pred = lon::plan_from_accelerations(0, 15, Eigen::VectorXd::Zero(kNp + 1), kTs);
    const auto plan = lon::solve_lon_mpc(x0, pred, w, Limits{}, kNp, kTs, lon::kNoMergeStep, 20, opt);
    const auto closed = explicit_solution(x0, Eigen::VectorXd::Zero(kNp + 1), bm);
    ASSERT_LT(closed.cwiseAbs().maxCoeff(), 4.0);
    EXPECT_LT((plan.gamma - closed).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Gains, MatchRolloutOracle) {
    const LonWeights w;
    const auto g = explicit_gains(w, kNp, kTs);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(kNp + 1);
    const double kdd = oracle::lon_rollout_minimizer(Eigen::Vector3d::UnitX(), zero, w.q, w.r, w.beta, kTs)(0);
    const double kdv = oracle::lon_rollout_minimizer(Eigen::Vector3d::UnitY(), zero, w.q, w.r, w.beta, kTs)(0);
    const double ka = oracle::lon_rollout_minimizer(Eigen::Vector3d::UnitZ(), zero, w.q, w.r, w.beta, kTs)(0);
    const double kf = oracle::lon_rollout_minimizer(Eigen::Vector3d::Zero(), Eigen::VectorXd::Ones(kNp + 1), w.q,
                                                    w.r, w.beta, kTs)(0);
    EXPECT_NEAR(g.k_delta_d, kdd, 1e-8 * std::abs(kdd));
    EXPECT_NEAR(g.k_delta_v, kdv, 1e-8 * std::abs(kdv));
    EXPECT_NEAR(g.k_a, ka, 1e-8 * std::abs(ka));
    EXPECT_NEAR(g.k_f, kf, 1e-8 * std::abs(kf));
    EXPECT_NEAR(g.k_f, g.k_f_row.sum(), 1e-12);
    EXPECT_EQ(g.k_f_row.size(), kNp + 1);
}

TEST(Gains, InvariantUnderUniformScaling) {
    LonWeights w;
    const auto g = explicit_gains(w, kNp, kTs);
    for (auto& qi : w.q) qi *= 37.0;
    w.r *= 37.0;
    const auto s = explicit_gains(w, kNp, kTs);
    EXPECT_NEAR(s.k_delta_d, g.k_delta_d, 1e-9);
    EXPECT_NEAR(s.k_delta_v, g.k_delta_v, 1e-9);
    EXPECT_NEAR(s.k_a, g.k_a, 1e-9);
    EXPECT_LT((s.k_f_row - g.k_f_row).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Gains, FirstMoveFromGains) {
    const LonWeights w;
    const auto g = explicit_gains(w, kNp, kTs);
    const auto bm = batch_matrices(w, kNp, kTs);
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int t = 0; t < 20; ++t) {
        const lon::LonState x0{5 * u(rng), u(rng), u(rng)};
        const double a = u(rng);
        const auto gamma = explicit_solution(x0, Eigen::VectorXd::Constant(kNp + 1, a), bm);
        const double from_gains = g.k_delta_d * x0.delta_d + g.k_delta_v * x0.delta_v + g.k_a * x0.accel + g.k_f * a;
        EXPECT_NEAR(gamma(0), from_gains, 1e-9);
    }
}

TEST(Transfer, LimitsAndComplexEvaluation) {
    const auto g = make_gains(0.7, 2.1, -3.0, 1.4);
    EXPECT_NEAR(transfer_magnitude(g, 1e-7), 1.0, 1e-9);
    EXPECT_LT(transfer_magnitude(g, 1e6), 1e-5);
    const std::complex<double> s(0, 1);
    const auto value = (g.k_f * s * s + g.k_delta_v * s + g.k_delta_d) /
                       (s * s * s - g.k_a * s * s + g.k_delta_v * s + g.k_delta_d);
    EXPECT_NEAR(transfer_magnitude(g, 1.0), std::abs(value), 1e-14);
    EXPECT_THROW(transfer_magnitude(g, 0.0), std::invalid_argument);
    // Pure integrator chain with no feedback: denominator vanishes only at ω = 0.
    EXPECT_TRUE(std::isinf(transfer_magnitude(make_gains(0, 1, 0, 0), 1.0)));
}

TEST(Classification, BoundaryAlgebra) {
    EXPECT_TRUE(pq_stable(1.0, 2.0));
    // k_Δd = 0 and k_a = k_f: q = 0, roots 0 and −p.
    for (double kv : {-3.0, 0.5}) {
        const auto g = make_gains(0.0, kv, 2.0, 2.0);
        EXPECT_EQ(pq_q(g), 0.0);
        EXPECT_EQ(pq_stable(pq_p(g), pq_q(g)), pq_p(g) >= 0) << kv;
    }
}

TEST(Classification, AnalyticAgreesWithSweep) {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(-10, 10);
    int stable = 0;
    for (int t = 0; t < 1000; ++t) {
        const auto g = make_gains(u(rng), u(rng), u(rng), u(rng));
        const auto v = classify_string_stability(g);
        EXPECT_EQ(v.stable, v.sweep_stable) << g.k_delta_d << ' ' << g.k_delta_v << ' ' << g.k_a << ' ' << g.k_f;
        if (v.stable) {
            ++stable;
            EXPECT_LE(v.worst_magnitude, 1.0 + kSweepSlack);
        }
    }
    EXPECT_GT(stable, 0);
    EXPECT_LT(stable, 1000);
}

TEST(Classification, PublishedGainPointArithmetic) {
    const auto g = make_gains(0.1849, 10.5855, -4.9804, 5.8356);
    const double p = 4.9804 * 4.9804 - 5.8356 * 5.8356 - 2 * 10.5855;
    const double q = 8 * 0.1849 * (5.8356 - 4.9804);
    const auto v = classify_string_stability(g);
    EXPECT_NEAR(v.p, p, 1e-12);
    EXPECT_NEAR(v.q, q, 1e-12);
    EXPECT_NEAR(v.p, -30.4, 0.05);
    EXPECT_NEAR(v.q, 1.265, 0.001);
    EXPECT_FALSE(v.stable);
    EXPECT_FALSE(v.sweep_stable);
}

TEST(L2Ratio, Examples) {
    const std::vector<double> a{1, -2, 3, 0.5};
    EXPECT_DOUBLE_EQ(l2_ratio(a, a), 1.0);
    std::vector<double> half;
    for (double x : a) half.push_back(x / 2);
    EXPECT_DOUBLE_EQ(l2_ratio(half, a), 0.5);
    EXPECT_THROW(l2_ratio({1, 2}, {0, 0}), std::domain_error);
    EXPECT_THROW(l2_ratio({1}, {1}), std::invalid_argument);
    EXPECT_THROW(l2_ratio({1, 2}, {1, 2, 3}), std::invalid_argument);
}
