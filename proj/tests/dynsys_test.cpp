#include "test_support.hpp"

#include <numbers>

using namespace riskctl;

namespace {

// Central differences with a fixed step, kept separate from the library fallback.
StepJacobians central_differences(const DynamicalSystem& sys, const Vec& x, const Vec& u, const Vec& w, double h) {
    auto column = [&](int which, Eigen::Index i) {
        Vec xp = x, xm = x, up = u, um = u, wp = w, wm = w;
        (which == 0 ? xp : which == 1 ? up : wp)(i) += h;
        (which == 0 ? xm : which == 1 ? um : wm)(i) -= h;
        return Vec((sys.step(xp, up, wp, 0) - sys.step(xm, um, wm, 0)) / (2.0 * h));
    };
    StepJacobians j{Mat(x.size(), x.size()), Mat(x.size(), u.size()), Mat(x.size(), w.size())};
    for (Eigen::Index i = 0; i < x.size(); ++i) j.dx.col(i) = column(0, i);
    for (Eigen::Index i = 0; i < u.size(); ++i) j.du.col(i) = column(1, i);
    for (Eigen::Index i = 0; i < w.size(); ++i) j.dw.col(i) = column(2, i);
    return j;
}

double max_abs(const Mat& m) { return m.cwiseAbs().maxCoeff(); }

DynamicalSystem scalar_sum_system(int horizon) {
    return DynamicalSystem({1, 1, 1}, horizon, Vec::Zero(1),
                           [](const Vec& x, const Vec& u, const Vec& w, int) -> Vec { return x + u + w; });
}

TEST(Rollout, IdentityDynamicsStayPut) {
    Vec x0(2);
    x0 << 0.3, -1.2;
    const DynamicalSystem sys({2, 1, 1}, 5, x0, [](const Vec& x, const Vec&, const Vec&, int) { return x; });
    CounterRng rng(1);
    const ControlSequence u(reference::random_vector(rng, 5), 1);
    const StateTrajectory x = rollout(sys, u);
    for (int t = 0; t <= 5; ++t) EXPECT_EQ(x.at(t), x0);
}

TEST(Rollout, TelescopingSum) {
    const DynamicalSystem sys = scalar_sum_system(2);
    const StateTrajectory x = rollout(sys, ControlSequence(Vec::Ones(2), 1));
    EXPECT_EQ(x.at(1)(0), 1.0);
    EXPECT_EQ(x.at(2)(0), 2.0);
    NoiseSequence w(2, 1);
    w.stage(1)(0) = 0.5;
    EXPECT_EQ(rollout(sys, ControlSequence(Vec::Ones(2), 1), &w).at(2)(0), 2.5);
}

TEST(Rollout, PendulumRestsAtBottom) {
    const DynamicalSystem sys = pendulum_system({}, 0.05, 100);
    const StateTrajectory x = rollout(sys, ControlSequence(100, 1));
    EXPECT_EQ(x.flat().norm(), 0.0);
}

TEST(Rollout, DivergenceReportsFirstBadStage) {
    const DynamicalSystem sys({1, 1, 1}, 10, Vec::Ones(1),
                              [](const Vec& x, const Vec&, const Vec&, int) -> Vec { return x * 1e200; });
    try {
        (void)rollout(sys, ControlSequence(10, 1));
        FAIL() << "expected divergence";
    } catch (const DivergedTrajectory& e) {
        EXPECT_EQ(e.stage(), 2);
    }
}

TEST(Rollout, ShapeMismatchRejected) {
    const DynamicalSystem sys = scalar_sum_system(3);
    EXPECT_THROW((void)rollout(sys, ControlSequence(2, 1)), std::invalid_argument);
}

TEST(System, EmptyHorizonRejected) {
    EXPECT_THROW(scalar_sum_system(0), std::invalid_argument);
    EXPECT_THROW(pendulum_system({}, 0.05, 0), std::invalid_argument);
    EXPECT_THROW(pendulum_system({}, 0.0, 10), std::invalid_argument);
}

TEST(Linearize, LinearSystemIsReproduced) {
    CounterRng rng(3);
    const auto prob = riskctl::testing::random_linear_problem(rng, 4, 3, 2, false);
    const ControlSequence u(reference::random_vector(rng, 8), 2);
    const LinearizedModel m = linearize(prob.sys, prob.costs, u);
    const StateTrajectory x = rollout(prob.sys, u);
    const Mat A = prob.sys.jacobians(Vec::Zero(3), Vec::Zero(2), Vec::Zero(2), 0).dx;
    for (int t = 0; t < 4; ++t) {
        EXPECT_EQ(m.A[t], A);
        EXPECT_EQ(m.C[t], m.B[t]);
        EXPECT_LE((m.h[t + 1] - prob.costs.state[t].gradient(x.at(t + 1))).norm(), 1e-14);
        EXPECT_EQ(m.H[t + 1], prob.costs.state[t].hessian(x.at(t + 1)));
    }
    EXPECT_TRUE(m.additive_noise);
    EXPECT_TRUE(m.quadratic_costs);
}

TEST(Linearize, PendulumAtRest) {
    const double dt = 0.05;
    const PendulumParams prm;
    const DynamicalSystem sys = pendulum_system(prm, dt, 10);
    const LinearizedModel m = linearize(sys, pendulum_costs({}, 10), ControlSequence(10, 1));
    Mat A(2, 2);
    A << 1.0, dt, -dt * prm.gravity / prm.length, 1.0 - dt * prm.friction / (prm.mass * prm.length * prm.length);
    for (const Mat& At : m.A) EXPECT_LE(max_abs(At - A), 1e-15);
    EXPECT_NEAR(m.B[0](1, 0), dt, 1e-15);
}

TEST(Linearize, FiniteDifferenceFallbackAgrees) {
    const DynamicalSystem arm = two_link_arm_system({}, 0.05, 6, (Vec(4) << 0.5, 1.0, 0.1, -0.2).finished());
    const StageCosts costs = two_link_arm_costs({}, 6);
    CounterRng rng(9);
    const ControlSequence u(reference::random_vector(rng, 12, 0.3), 2);
    const LinearizedModel a = linearize(arm, costs, u);
    const LinearizedModel b = linearize(arm.without_jacobians(), costs, u);
    for (int t = 0; t < 6; ++t) {
        EXPECT_LE(max_abs(a.A[t] - b.A[t]), 1e-7);
        EXPECT_LE(max_abs(a.B[t] - b.B[t]), 1e-7);
    }
}

TEST(Jacobians, BundledSystemsMatchFiniteDifferences) {
    CounterRng rng(17);
    const std::vector<DynamicalSystem> systems = {
        pendulum_system({}, 0.05, 1),
        two_link_arm_system({}, 0.05, 1, Vec::Zero(4)),
        double_integrator_system(0.1, 1, Vec::Zero(4), 2),
    };
    for (const auto& sys : systems) {
        double worst = 0.0;
        for (int i = 0; i < 100; ++i) {
            const Vec x = reference::random_vector(rng, sys.state_dim());
            const Vec u = reference::random_vector(rng, sys.control_dim());
            const Vec w = reference::random_vector(rng, sys.noise_dim(), 0.3);
            const StepJacobians a = sys.jacobians(x, u, w, 0);
            const StepJacobians f = central_differences(sys, x, u, w, 1e-5);
            worst = std::max({worst, max_abs(a.dx - f.dx), max_abs(a.du - f.du), max_abs(a.dw - f.dw)});
            EXPECT_EQ(a.dw, a.du);
        }
        EXPECT_LT(worst, 1e-6) << sys.name();
    }
}

TEST(TrajectoryJacobian, SingleStageIsBTransposed) {
    CounterRng rng(4);
    const LinearizedModel m = reference::random_lq_model(rng, {1, 3, 2, 2, false, false});
    EXPECT_EQ(trajectory_jacobian(m), Mat(m.B[0].transpose()));
    EXPECT_EQ(trajectory_jacobian(m, Input::Noise), Mat(m.C[0].transpose()));
}

TEST(TrajectoryJacobian, ScalarOnesPattern) {
    LinearizedModel m = LinearizedModel::zeros(1, 1, 1, 3);
    for (int t = 0; t < 3; ++t) m.A[t](0, 0) = m.B[t](0, 0) = 1.0;
    const Mat X = trajectory_jacobian(m);
    for (int s = 0; s < 3; ++s)
        for (int t = 0; t < 3; ++t) EXPECT_EQ(X(s, t), s <= t ? 1.0 : 0.0);
}

TEST(TrajectoryJacobian, MatchesLinearizedRollout) {
    CounterRng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const auto sh = riskctl::testing::random_shape(rng, 12, 4);
        const LinearizedModel m = reference::random_lq_model(rng, sh);
        const Vec v = reference::random_vector(rng, sh.horizon * sh.control_dim);
        const Vec w = reference::random_vector(rng, sh.horizon * sh.noise_dim);
        const Vec y = linearized_rollout(m, v, &w);
        const Vec yx = trajectory_jacobian(m).transpose() * v + trajectory_jacobian(m, Input::Noise).transpose() * w;
        EXPECT_LE((y - yx).norm(), 1e-10 * std::max(1.0, y.norm()));
    }
}

TEST(TrajectoryJacobian, LinearRolloutIsAffine) {
    CounterRng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const auto prob = riskctl::testing::random_linear_problem(rng, 6, 3, 2, false);
        const ControlSequence u(reference::random_vector(rng, 12), 2);
        const Vec v = reference::random_vector(rng, 12);
        const Mat X = trajectory_jacobian(linearize(prob.sys, prob.costs, u));
        const Vec diff = rollout(prob.sys, ControlSequence(u.flat() + v, 2)).flat() - rollout(prob.sys, u).flat();
        EXPECT_LE((diff - X.transpose() * v).norm(), 1e-12 * std::max(1.0, diff.norm()));
    }
}

TEST(Euler, FreeDrift) {
    SecondOrderField f;
    f.dof = 1;
    f.acceleration = [](const Vec&, const Vec&, const Vec&) -> Vec { return Vec::Zero(1); };
    const DynamicalSystem sys = euler_discretize(f, 0.5, 4, (Vec(2) << 1.0, 2.0).finished());
    const StateTrajectory x = rollout(sys, ControlSequence(4, 1));
    for (int t = 0; t <= 4; ++t) {
        EXPECT_DOUBLE_EQ(x.at(t)(1), 2.0);
        EXPECT_DOUBLE_EQ(x.at(t)(0), 1.0 + t);
    }
    EXPECT_TRUE(sys.additive_noise());
}

TEST(Euler, DoubleIntegratorFromRest) {
    const DynamicalSystem sys = double_integrator_system(1.0, 4, Vec::Zero(2));
    ControlSequence u(4, 1);
    u.stage(0)(0) = 1.0;
    const StateTrajectory x = rollout(sys, u);
    const double expected[] = {0.0, 0.0, 1.0, 2.0, 3.0};
    for (int t = 0; t <= 4; ++t) EXPECT_EQ(x.at(t)(0), expected[t]);
}

TEST(Pendulum, FieldMatchesEquationOfMotion) {
    const PendulumParams prm{2.0, 0.5, 0.1, 9.81};
    const SecondOrderField f = pendulum_field(prm);
    CounterRng rng(2);
    for (int i = 0; i < 20; ++i) {
        const Vec z = reference::random_vector(rng, 1), zd = reference::random_vector(rng, 1),
                  u = reference::random_vector(rng, 1);
        const double ml2 = prm.mass * prm.length * prm.length;
        const double expected =
            -prm.gravity / prm.length * std::sin(z(0)) - prm.friction / ml2 * zd(0) + u(0) / ml2;
        EXPECT_NEAR(f.acceleration(z, zd, u)(0), expected, 1e-14);
    }
}

TEST(Pendulum, Costs) {
    const StageCosts c = pendulum_costs({0.1, 0.01, 0.05, true}, 100);
    EXPECT_TRUE(c.final_state_only());
    const Vec up = (Vec(2) << std::numbers::pi, 0.0).finished();
    EXPECT_NEAR(c.state.back().value(up), 0.0, 1e-15);
    EXPECT_NEAR(c.state.back().value(Vec::Zero(2)), std::numbers::pi * std::numbers::pi, 1e-14);
    EXPECT_NEAR(c.state.back().value((Vec(2) << 0.0, 2.0).finished()), std::numbers::pi * std::numbers::pi + 0.4, 1e-14);
    EXPECT_NEAR(c.control[0].value(Vec::Constant(1, 3.0)), 0.01 * 0.05 * 9.0, 1e-15);
    const StageCosts raw = pendulum_costs({0.1, 0.01, 0.05, false}, 100);
    EXPECT_NEAR(raw.control[0].value(Vec::Constant(1, 3.0)), 0.01 * 9.0, 1e-15);
}

TEST(Arm, ForceCancellationGivesZeroAcceleration) {
    const ArmParams prm;
    const SecondOrderField f = arm_field(prm);
    CounterRng rng(6);
    for (int i = 0; i < 50; ++i) {
        const Vec z = reference::random_vector(rng, 2), zd = reference::random_vector(rng, 2);
        const Vec u = arm_coriolis(prm, z, zd) + prm.friction() * zd;
        EXPECT_LE(f.acceleration(z, zd, u).norm(), 1e-12);
    }
}

TEST(Arm, DeterminantConstants) {
    const ArmParams prm;
    // a1 = I1 + I2 + m2 l1^2 = 0.16, a3 = I2 = 0.045, a2 = m2 l1 d2 = 0.048.
    EXPECT_NEAR(prm.alpha(), 0.045 * (0.16 - 0.045), 1e-15);
    EXPECT_NEAR(prm.alpha(), 5.175e-3, 1e-15);
    EXPECT_NEAR(prm.beta(), 2.304e-3, 1e-15);
    EXPECT_GT(prm.alpha() - prm.beta(), 0.0);
    CounterRng rng(8);
    for (int i = 0; i < 100; ++i) {
        const Vec th = reference::random_vector(rng, 2, 2.0);
        const double c2 = std::cos(th(1));
        EXPECT_NEAR(arm_inertia(prm, th).determinant(), prm.alpha() - prm.beta() * c2 * c2, 1e-15);
    }
}

TEST(Arm, ClosedFormInverse) {
    const ArmParams prm;
    CounterRng rng(10);
    for (int i = 0; i < 100; ++i) {
        const Vec th = reference::random_vector(rng, 2, 3.0);
        const Mat inv = arm_inertia(prm, th).fullPivLu().inverse();
        EXPECT_LE(max_abs(arm_inertia_inverse(prm, th) - inv), 1e-10);
    }
}

TEST(Arm, NoiseScale) {
    const ArmParams prm;
    const Vec th = (Vec(2) << 0.5, 1.0).finished();
    const Mat M = arm_inertia(prm, th);
    EXPECT_NEAR(arm_noise_scale(prm, th), min_eigenvalue(M), 1e-12);
}

TEST(Costs, WeightedTargetAndChecks) {
    const Mat W = (Mat(2, 2) << 2.0, 0.5, 0.5, 1.0).finished();
    const Vec target = (Vec(2) << 1.0, -1.0).finished();
    const StageCost c = StageCost::weighted_target(W, target);
    const Vec x = (Vec(2) << 0.3, 0.7).finished();
    EXPECT_NEAR(c.value(x), (x - target).dot(W * (x - target)), 1e-14);
    EXPECT_LE((c.gradient(x) - 2.0 * W * (x - target)).norm(), 1e-14);
    const DynamicalSystem sys = scalar_sum_system(3);
    StageCosts bad = StageCosts::final_state(2, StageCost::zero(1), StageCost::zero(1));
    EXPECT_THROW(bad.check(sys), std::invalid_argument);
}

}  // namespace
