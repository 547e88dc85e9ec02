#include "test_support.hpp"

using namespace riskctl;

namespace {

struct Fixture {
    riskctl::testing::LinearProblem prob;
    ControlSequence u;
};

Fixture linear_fixture(std::uint64_t seed, int horizon = 4, int d = 2, int p = 2) {
    CounterRng rng(seed);
    auto prob = riskctl::testing::random_linear_problem(rng, horizon, d, p, false, 0.3);
    ControlSequence u(reference::random_vector(rng, horizon * p, 0.3), p);
    return {std::move(prob), std::move(u)};
}

TEST(LogMeanExp, ShiftInvariance) {
    CounterRng rng(1);
    std::vector<double> h(500);
    for (double& v : h) v = rng.normal();
    for (double theta : {0.0, 0.3, 2.0}) {
        const auto a = detail::log_mean_exp(h, theta);
        std::vector<double> shifted = h;
        for (double& v : shifted) v += 123.25;
        const auto b = detail::log_mean_exp(shifted, theta);
        EXPECT_NEAR(b.value - a.value, 123.25, 1e-10);
        EXPECT_NEAR(b.std_error, a.std_error, 1e-10);
    }
}

TEST(LogMeanExp, HugeValuesDoNotOverflow) {
    const std::vector<double> h = {1e4, 1e4 + 1.0, 1e4 - 2.0};
    const auto r = detail::log_mean_exp(h, 10.0);
    EXPECT_TRUE(std::isfinite(r.value));
    EXPECT_GT(r.value, 1e4);
    EXPECT_LT(r.value, 1e4 + 1.0);
}

TEST(LogMeanExp, MonotoneInTheta) {
    CounterRng rng(2);
    std::vector<double> h(300);
    for (double& v : h) v = rng.normal() * 2.0 + 1.0;
    double prev = -std::numeric_limits<double>::infinity();
    for (double theta : {0.0, 1e-11, 1e-6, 0.01, 0.1, 0.5, 1.0, 3.0, 10.0}) {
        const double v = detail::log_mean_exp(h, theta).value;
        EXPECT_GE(v, prev - 1e-9);
        prev = v;
    }
}

TEST(McRisk, ZeroNoiseIsNoiselessCost) {
    const Fixture f = linear_fixture(3);
    const double plain = f.prob.costs.state_cost(rollout(f.prob.sys, f.u)) + f.prob.costs.control_cost(f.u);
    const McEstimate e = mc_risk_value(f.prob.sys, f.prob.costs, f.u, 0.7, 0.0, 50, 9);
    EXPECT_NEAR(e.value, plain, 1e-12 * std::max(1.0, std::abs(plain)));
    EXPECT_NEAR(e.std_error, 0.0, 1e-12);
}

TEST(McRisk, TinyThetaIsPlainMean) {
    const Fixture f = linear_fixture(4);
    const int n = 200;
    const McEstimate e = mc_risk_value(f.prob.sys, f.prob.costs, f.u, 1e-12, 0.5, n, 11);
    double mean = 0.0;
    for (int i = 0; i < n; ++i) {
        const NoiseSequence w = sample_noise(f.prob.sys, 0.5, 11, static_cast<std::uint64_t>(i));
        mean += f.prob.costs.state_cost(rollout(f.prob.sys, f.u, &w));
    }
    mean = mean / n + f.prob.costs.control_cost(f.u);
    EXPECT_NEAR(e.value, mean, 1e-12 * std::max(1.0, std::abs(mean)));
}

TEST(McRisk, ThreadCountDoesNotChangeResult) {
    const Fixture f = linear_fixture(5);
    const McEstimate a = mc_risk_value(f.prob.sys, f.prob.costs, f.u, 0.4, 0.6, 257, 77, {1});
    const McEstimate b = mc_risk_value(f.prob.sys, f.prob.costs, f.u, 0.4, 0.6, 257, 77, {4});
    EXPECT_EQ(a.value, b.value);
    EXPECT_EQ(a.std_error, b.std_error);
    const McGradient ga = mc_risk_gradient(f.prob.sys, f.prob.costs, f.u, 0.4, 0.6, 101, 77, {1});
    const McGradient gb = mc_risk_gradient(f.prob.sys, f.prob.costs, f.u, 0.4, 0.6, 101, 77, {3});
    EXPECT_EQ(ga.gradient, gb.gradient);
    const TestCostResult ta = test_cost(f.prob.sys, f.prob.costs, f.u, 0.8, 99, 5, {});
    TestCostOptions par;
    par.threads = 5;
    const TestCostResult tb = test_cost(f.prob.sys, f.prob.costs, f.u, 0.8, 99, 5, par);
    EXPECT_EQ(ta.mean, tb.mean);
}

TEST(McRisk, SameSeedSameEstimate) {
    const Fixture f = linear_fixture(6);
    const McEstimate a = mc_risk_value(f.prob.sys, f.prob.costs, f.u, 0.4, 0.6, 100, 1234);
    const McEstimate b = mc_risk_value(f.prob.sys, f.prob.costs, f.u, 0.4, 0.6, 100, 1234);
    const McEstimate c = mc_risk_value(f.prob.sys, f.prob.costs, f.u, 0.4, 0.6, 100, 1235);
    EXPECT_EQ(a.value, b.value);
    EXPECT_NE(a.value, c.value);
    EXPECT_GE(a.std_error, 0.0);
}

TEST(McRisk, ConvergesToSurrogateOnLinearSystems) {
    for (std::uint64_t seed = 10; seed < 13; ++seed) {
        const Fixture f = linear_fixture(seed, 3, 2, 1);
        const double s = 0.3 * riskctl::testing::open_loop_threshold(linearize(f.prob.sys, f.prob.costs, f.u));
        const double sigma = 0.5, theta = s / (sigma * sigma);
        const double closed = surrogate_value(f.prob.sys, f.prob.costs, f.u, theta, sigma).value;
        const McEstimate e = mc_risk_value(f.prob.sys, f.prob.costs, f.u, theta, sigma, 100000, seed);
        EXPECT_LE(std::abs(e.value - closed), 3.0 * e.std_error) << "seed " << seed;
    }
}

TEST(McRisk, AllSamplesDivergedIsAnError) {
    const DynamicalSystem sys = additive_noise_system(
        1, 1, 3, Vec::Ones(1), [](const Vec& x, const Vec& u, int) -> Vec { return x * 1e300 + u; });
    const StageCosts costs = StageCosts::final_state(3, StageCost::quadratic(Mat::Identity(1, 1), Vec::Zero(1)),
                                                     StageCost::zero(1));
    EXPECT_THROW(mc_risk_value(sys, costs, ControlSequence(3, 1), 0.5, 1.0, 10, 1), DivergedTrajectory);
}

TEST(McRisk, RunsReportSpread) {
    const Fixture f = linear_fixture(7);
    const McRuns r = mc_risk_runs(f.prob.sys, f.prob.costs, f.u, 0.4, 0.6, 100, 10, 3);
    ASSERT_EQ(r.runs.size(), 10u);
    EXPECT_GT(r.spread, 0.0);
    EXPECT_NE(r.runs[0].value, r.runs[1].value);
}

TEST(McGradientTest, PlainAverageAtTinyTheta) {
    const Fixture f = linear_fixture(8);
    const int n = 64;
    const McGradient g = mc_risk_gradient(f.prob.sys, f.prob.costs, f.u, 0.0, 0.5, n, 3);
    Vec mean = Vec::Zero(f.u.size());
    for (int i = 0; i < n; ++i) {
        const NoiseSequence w = sample_noise(f.prob.sys, 0.5, 3, static_cast<std::uint64_t>(i));
        mean += state_cost_gradient(f.prob.sys, f.prob.costs, f.u, w);
    }
    mean = mean / n + f.prob.costs.control_gradient(f.u);
    EXPECT_LE((g.gradient - mean).norm(), 1e-12 * std::max(1.0, mean.norm()));
}

TEST(McGradientTest, AdjointMatchesFiniteDifferences) {
    CounterRng rng(9);
    const DynamicalSystem sys = pendulum_system({}, 0.05, 20);
    const StageCosts costs = pendulum_costs({}, 20);
    const ControlSequence u(reference::random_vector(rng, 20), 1);
    const NoiseSequence w = sample_noise(sys, 0.3, 5, 0);
    const Vec grad = state_cost_gradient(sys, costs, u, w);
    for (int i = 0; i < 20; i += 3) {
        ControlSequence up = u, um = u;
        up.flat()(i) += 1e-6;
        um.flat()(i) -= 1e-6;
        const double fd =
            (costs.state_cost(rollout(sys, up, &w)) - costs.state_cost(rollout(sys, um, &w))) / 2e-6;
        EXPECT_NEAR(grad(i), fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
}

TEST(McGradientTest, MatchesTruncatedGradientOnLinearSystems) {
    const Fixture f = linear_fixture(14, 3, 2, 1);
    // The weights exp(theta h) are heavy tailed near the threshold and the
    // standard error is understated until well inside it.
    const double s = 0.05 * riskctl::testing::open_loop_threshold(linearize(f.prob.sys, f.prob.costs, f.u));
    const double sigma = 0.5, theta = s / (sigma * sigma);
    const Vec exact = truncated_gradient(f.prob.sys, f.prob.costs, f.u, theta, sigma);
    const McGradient g = mc_risk_gradient(f.prob.sys, f.prob.costs, f.u, theta, sigma, 10000, 21);
    for (Eigen::Index i = 0; i < exact.size(); ++i)
        EXPECT_LE(std::abs(g.gradient(i) - exact(i)), 3.0 * g.std_error(i) + 1e-12) << "coordinate " << i;
}

TEST(McGradientTest, CommonRandomNumbersDirectionalDerivative) {
    CounterRng rng(15);
    const DynamicalSystem sys = pendulum_system({}, 0.05, 20);
    const StageCosts costs = pendulum_costs({}, 20);
    const ControlSequence u(reference::random_vector(rng, 20, 0.5), 1);
    const Vec dir = reference::random_vector(rng, 20).normalized();
    const double theta = 0.5, sigma = 0.2, h = 1e-5;
    const McGradient g = mc_risk_gradient(sys, costs, u, theta, sigma, 2000, 8);
    const double up = mc_risk_value(sys, costs, ControlSequence(u.flat() + h * dir, 1), theta, sigma, 2000, 8).value;
    const double um = mc_risk_value(sys, costs, ControlSequence(u.flat() - h * dir, 1), theta, sigma, 2000, 8).value;
    const double fd = (up - um) / (2.0 * h);
    EXPECT_NEAR(g.gradient.dot(dir), fd, 1e-4 * std::max(1.0, std::abs(fd)));
}

TEST(TestCost, ZeroAmplitudeIsNoiselessCost) {
    const Fixture f = linear_fixture(16);
    const TestCostResult r = test_cost(f.prob.sys, f.prob.costs, f.u, 0.0, 30, 1);
    EXPECT_NEAR(r.mean, f.prob.costs.state_cost(rollout(f.prob.sys, f.u)), 1e-12);
    EXPECT_EQ(r.diverged, 0);
    EXPECT_FALSE(r.warning());
}

TEST(TestCost, QuadraticGrowthOnLinearSystems) {
    // With a fixed kick stage and the same normals at every amplitude, the
    // sample mean is an exact quadratic in sigma_test.
    const Fixture f = linear_fixture(17);
    TestCostOptions opt;
    opt.fixed_stage = 1;
    auto mean = [&](double s) { return test_cost(f.prob.sys, f.prob.costs, f.u, s, 400, 2, opt).mean; };
    const double m0 = mean(0.0), m1 = mean(1.0), m2 = mean(2.0), m3 = mean(3.0);
    // A quadratic through (0, m0), (1, m1), (2, m2) predicts m3.
    const double predicted = m0 - 3.0 * m1 + 3.0 * m2;
    EXPECT_NEAR(m3, predicted, 1e-9 * std::max(1.0, std::abs(m3)));
    EXPECT_GT(m2 - 2.0 * m1 + m0, 0.0);
}

TEST(TestCost, AmplitudeConventions) {
    const Fixture f = linear_fixture(18);
    TestCostOptions scaled;
    scaled.sigma0 = 2.0;
    TestCostOptions raw = scaled;
    raw.scale_by_sigma0 = false;
    const double a = test_cost(f.prob.sys, f.prob.costs, f.u, 1.0, 50, 3, scaled).mean;
    const double b = test_cost(f.prob.sys, f.prob.costs, f.u, 0.5, 50, 3, raw).mean;
    EXPECT_EQ(a, b);
}

TEST(TestCost, DivergedSimulationsExcluded) {
    const DynamicalSystem sys = additive_noise_system(1, 1, 2, Vec::Zero(1), [](const Vec& x, const Vec& u, int) -> Vec {
        return u(0) > 0.5 ? Vec::Constant(1, std::numeric_limits<double>::infinity()) : Vec(x + u);
    });
    const StageCosts costs = StageCosts::final_state(2, StageCost::quadratic(Mat::Identity(1, 1), Vec::Zero(1)),
                                                     StageCost::zero(1));
    const TestCostResult r = test_cost(sys, costs, ControlSequence(2, 1), 1.0, 200, 4);
    EXPECT_GT(r.diverged, 0);
    EXPECT_TRUE(r.warning());
    EXPECT_EQ(r.simulations + r.diverged, 200);
    EXPECT_TRUE(std::isfinite(r.mean));
}

}  // namespace
