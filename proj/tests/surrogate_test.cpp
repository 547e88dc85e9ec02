#include "test_support.hpp"

#include <numbers>

using namespace riskctl;
using riskctl::testing::rel_err;

namespace {

// x_1 = u, h(x) = x^2 / 2, g = 0: the trajectory is the identity map.
struct IdentityInstance {
    DynamicalSystem sys = riskctl::testing::linear_system(Mat::Zero(1, 1), Mat::Identity(1, 1), 1, Vec::Zero(1));
    StageCosts costs{{StageCost::quadratic(Mat::Identity(1, 1), Vec::Zero(1))}, {StageCost::zero(1)}};
};

TEST(Surrogate, IdentityTrajectoryGaussian) {
    const IdentityInstance inst;
    for (double u : {-1.5, 0.0, 0.4, 2.0}) {
        const ControlSequence c(Vec::Constant(1, u), 1);
        const GaussianApprox g = gaussian_approx(inst.sys, inst.costs, c, 0.5, 1.0);
        // Sigma^{-1} = sigma^{-2} - theta = 1/2, so Sigma = 2 and w* = theta Sigma h = u.
        EXPECT_NEAR(g.covariance_times(Vec::Ones(1))(0), 2.0, 1e-15);
        EXPECT_NEAR(g.mean(0), u, 1e-15);
    }
}

TEST(Surrogate, IdentityTrajectoryValueIsExactGaussianIntegral) {
    const IdentityInstance inst;
    for (double u : {-1.5, 0.0, 0.4, 2.0}) {
        const ControlSequence c(Vec::Constant(1, u), 1);
        const SurrogateEval e = surrogate_value(inst.sys, inst.costs, c, 0.5, 1.0, true);
        EXPECT_NEAR(e.value, std::log(2.0) + u * u, 1e-12);
        EXPECT_NEAR(e.value, e.log_det_term + e.state_cost + e.tilt + e.control_cost, 1e-15);
        EXPECT_NEAR((*e.gradient)(0), 2.0 * u, 1e-12);
    }
}

TEST(Surrogate, IdentityTrajectoryClosedFormStep) {
    const IdentityInstance inst;
    for (double u : {-1.5, 0.4, 2.0}) {
        const ControlSequence c(Vec::Constant(1, u), 1);
        const ControlSequence next = reg_step_closed_form(inst.sys, inst.costs, c, 0.5, 1.0, 1.0);
        EXPECT_NEAR(next.flat()(0), u / 3.0, 1e-14);
    }
}

TEST(Surrogate, ZeroGradientAtCostMinimum) {
    CounterRng rng(1);
    LinearizedModel m = reference::random_lq_model(rng, {4, 3, 2, 2, true, false});
    for (auto& h : m.h) h.setZero();
    for (auto& g : m.g) g.setZero();
    const double s = 0.5 * riskctl::testing::open_loop_threshold(m);
    const GaussianApprox g = gaussian_approx(m, s, 1.0);
    EXPECT_EQ(g.mean.norm(), 0.0);
    EXPECT_EQ(truncated_gradient(m, s, 1.0).norm(), 0.0);
}

TEST(Surrogate, ConditionViolatedPastThreshold) {
    CounterRng rng(2);
    const LinearizedModel m = reference::random_lq_model(rng, {3, 2, 2, 2, true, false});
    const double s_max = riskctl::testing::open_loop_threshold(m);
    EXPECT_THROW(gaussian_approx(m, 1.01 * s_max, 1.0), ConditionViolated);
    EXPECT_THROW(gaussian_approx(m, s_max, 1.0), ConditionViolated);
    double prev = 0.0;
    for (double frac : {0.5, 0.9, 0.99, 0.999, 0.9999}) {
        const GaussianApprox g = gaussian_approx(m, frac * s_max, 1.0);
        Mat Sigma(g.S.rows(), g.S.cols());
        for (Eigen::Index j = 0; j < Sigma.cols(); ++j) Sigma.col(j) = g.covariance_times(Vec::Unit(Sigma.rows(), j));
        const double norm = max_eigenvalue(0.5 * (Sigma + Sigma.transpose()));
        EXPECT_GT(norm, prev);
        prev = norm;
    }
    EXPECT_GT(prev, 1e3);
}

TEST(Surrogate, RejectsGeneralNoise) {
    CounterRng rng(3);
    const LinearizedModel m = reference::random_lq_model(rng, {3, 2, 2, 2, false, false});
    EXPECT_THROW(gaussian_approx(m, 0.1, 1.0), std::invalid_argument);
}

TEST(Surrogate, SmallNoiseLimitIsNoiselessCost) {
    CounterRng rng(4);
    const auto prob = riskctl::testing::random_linear_problem(rng, 5, 3, 2, false);
    const ControlSequence u(reference::random_vector(rng, 10), 2);
    const double plain = prob.costs.state_cost(rollout(prob.sys, u)) + prob.costs.control_cost(u);
    for (double theta : {0.0, 0.5}) {
        const double v = surrogate_value(prob.sys, prob.costs, u, theta, 1e-9).value;
        EXPECT_NEAR(v, plain, 1e-12 * std::max(1.0, std::abs(plain)));
    }
}

TEST(Surrogate, RiskNeutralLimitIsExpectedCost) {
    // theta -> 0 with sigma fixed: E h(x + X^T w) = h(x) + sigma^2 tr(X H X^T) / 2.
    CounterRng rng(5);
    const LinearizedModel m = reference::random_lq_model(rng, {4, 3, 2, 2, true, false});
    const double sigma = 0.7;
    const SurrogateEval zero = surrogate_value(m, 0.0, sigma);
    const SurrogateEval tiny = surrogate_value(m, 1e-9, sigma);
    const Mat X = trajectory_jacobian(m);
    const double expected = 0.5 * sigma * sigma * (X * stacked_state_cost(m).first * X.transpose()).trace();
    EXPECT_NEAR(zero.value, expected, 1e-12 * std::max(1.0, expected));
    EXPECT_NEAR(tiny.value, expected, 1e-6 * std::max(1.0, expected));
}

TEST(Surrogate, MatchesQuadrature) {
    CounterRng rng(6);
    int checked = 0;
    for (int trial = 0; trial < 40; ++trial) {
        reference::InstanceShape sh;
        sh.horizon = 1 + static_cast<int>(rng.uniform_index(2));
        sh.control_dim = sh.horizon == 2 ? 1 : 1 + static_cast<int>(rng.uniform_index(2));
        sh.state_dim = 1 + static_cast<int>(rng.uniform_index(3));
        sh.additive = true;
        const LinearizedModel m = reference::random_lq_model(rng, sh);
        const double sigma = 0.5 + rng.uniform();
        const double theta = rng.uniform() * 0.8 * riskctl::testing::open_loop_threshold(m) / (sigma * sigma);
        if (theta < 1e-3) continue;
        const double closed = surrogate_value(m, theta, sigma).value;
        const double quad = reference::surrogate_by_quadrature(m, theta, sigma);
        EXPECT_LE(rel_err(closed, quad), 1e-8) << "trial " << trial;
        ++checked;
    }
    EXPECT_GT(checked, 25);
}

TEST(Surrogate, TruncatedGradientIsExactOnLinearSystems) {
    CounterRng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const auto prob = riskctl::testing::random_linear_problem(rng, 5, 3, 2, false);
        const ControlSequence u(reference::random_vector(rng, 10), 2);
        const double s = 0.5 * riskctl::testing::open_loop_threshold(linearize(prob.sys, prob.costs, u));
        const Vec grad = truncated_gradient(prob.sys, prob.costs, u, s, 1.0);
        Vec fd(grad.size());
        const double h = 1e-5;
        for (Eigen::Index i = 0; i < fd.size(); ++i) {
            ControlSequence up = u, um = u;
            up.flat()(i) += h;
            um.flat()(i) -= h;
            fd(i) = (surrogate_value(prob.sys, prob.costs, up, s, 1.0).value -
                     surrogate_value(prob.sys, prob.costs, um, s, 1.0).value) /
                    (2.0 * h);
        }
        EXPECT_LE((grad - fd).norm(), 1e-6 * std::max(1.0, grad.norm())) << "trial " << trial;
    }
}

TEST(Surrogate, ClosedFormStepEqualsDynamicProgramming) {
    CounterRng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const auto sh = riskctl::testing::random_shape(rng, 8, 3, true);
        const LinearizedModel m = reference::random_lq_model(rng, sh);
        const double s = rng.uniform() * 0.9 * riskctl::testing::open_loop_threshold(m);
        const double gamma = std::ldexp(1.0, static_cast<int>(rng.uniform_index(12)) - 4);
        const Vec dense = reg_step_closed_form(m, s, 1.0, gamma);
        const LeqgSolution dp = solve_leqg(m, {s, 1.0, 1.0 / gamma});
        ASSERT_TRUE(dp.feasible);
        EXPECT_LE(rel_err(dp.v, dense), 1e-8) << "trial " << trial;
    }
}

TEST(Surrogate, LargeStepMatchesUnregularizedSubproblem) {
    CounterRng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const auto sh = riskctl::testing::random_shape(rng, 6, 3, true);
        const LinearizedModel m = reference::random_lq_model(rng, sh);
        const double s = 0.5 * riskctl::testing::open_loop_threshold(m);
        const Vec dense = reg_step_closed_form(m, s, 1.0, 1e14);
        const LeqgSolution dp = solve_leqg(m, {s, 1.0, 0.0});
        ASSERT_TRUE(dp.feasible);
        EXPECT_LE(rel_err(dense, dp.v), 1e-8);
    }
}

TEST(Surrogate, StepLengthNondecreasingInGamma) {
    CounterRng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        const LinearizedModel m = reference::random_lq_model(rng, riskctl::testing::random_shape(rng, 6, 3, true));
        const double s = 0.5 * riskctl::testing::open_loop_threshold(m);
        double prev = 0.0;
        for (int e = -8; e <= 12; ++e) {
            const double len = reg_step_closed_form(m, s, 1.0, std::ldexp(1.0, e)).norm();
            EXPECT_GE(len, prev * (1.0 - 1e-12));
            prev = len;
        }
    }
}

TEST(Surrogate, NonQuadraticCostsFlagged) {
    const DynamicalSystem sys = riskctl::testing::linear_system(Mat::Identity(1, 1), Mat::Identity(1, 1), 2, Vec::Zero(1));
    auto value = [](const Vec& x) { return std::cosh(x(0)); };
    auto grad = [](const Vec& x) { return Vec::Constant(1, std::sinh(x(0))); };
    auto hess = [](const Vec& x) { return Mat::Constant(1, 1, std::cosh(x(0))); };
    StageCosts costs = StageCosts::final_state(2, StageCost::smooth(1, value, grad, hess),
                                               StageCost::quadratic(Mat::Identity(1, 1), Vec::Zero(1)));
    const ControlSequence u(Vec::Constant(2, 0.3), 1);
    const SurrogateEval e = surrogate_value(sys, costs, u, 0.1, 0.5);
    EXPECT_TRUE(e.local_quadratic_model);
    EXPECT_NEAR(e.state_cost, std::cosh(0.6), 1e-15);
}

}  // namespace
