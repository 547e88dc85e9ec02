#pragma once

// Bundled benchmark systems: pendulum swing-up, planar two-link arm and a
// double integrator. All are Euler discretizations with the noise entering as
// an additive perturbation of the control.

#include "riskctl/core.hpp"
#include "riskctl/dynsys.hpp"

#include <cmath>
#include <numbers>

namespace riskctl {

// ---------------------------------------------------------------------------
// Pendulum
// ---------------------------------------------------------------------------

struct PendulumParams {
    double mass = 1.0;
    double length = 1.0;
    double friction = 0.01;
    double gravity = 9.81;
};

inline SecondOrderField pendulum_field(const PendulumParams& prm) {
    if (!(prm.mass > 0.0) || !(prm.length > 0.0))
        throw std::invalid_argument("pendulum: mass and length must be positive");
    const double inertia = prm.mass * prm.length * prm.length;
    const double g_over_l = prm.gravity / prm.length;
    const double damping = prm.friction / inertia;
    SecondOrderField f;
    f.dof = 1;
    f.acceleration = [=](const Vec& z, const Vec& zdot, const Vec& u) {
        Vec a(1);
        a(0) = -g_over_l * std::sin(z(0)) - damping * zdot(0) + u(0) / inertia;
        return a;
    };
    f.jacobians = [=](const Vec& z, const Vec&, const Vec&) {
        FieldJacobians j{Mat(1, 1), Mat(1, 1), Mat(1, 1)};
        j.dz(0, 0) = -g_over_l * std::cos(z(0));
        j.dzdot(0, 0) = -damping;
        j.du(0, 0) = 1.0 / inertia;
        return j;
    };
    return f;
}

/// State (angle, angular velocity); angle 0 hangs down.
inline DynamicalSystem pendulum_system(const PendulumParams& prm, double dt, int horizon, Vec x0 = Vec::Zero(2)) {
    return euler_discretize(pendulum_field(prm), dt, horizon, std::move(x0), "pendulum");
}

struct PendulumCostParams {
    double lambda1 = 0.1;   ///< final angular velocity weight
    double lambda2 = 0.01;  ///< control effort weight
    double dt = 0.05;
    bool scale_effort_by_dt = true;
};

/// (pi - angle_tau)^2 + lambda1 * vel_tau^2 + lambda2 * [dt] * sum_t u_t^2.
inline StageCosts pendulum_costs(const PendulumCostParams& c, int horizon) {
    Mat W = Mat::Zero(2, 2);
    W(0, 0) = 1.0;
    W(1, 1) = c.lambda1;
    Vec target(2);
    target << std::numbers::pi, 0.0;
    const double effort = c.lambda2 * (c.scale_effort_by_dt ? c.dt : 1.0);
    return StageCosts::final_state(horizon, StageCost::weighted_target(W, target),
                                   StageCost::quadratic(Mat::Identity(1, 1) * 2.0 * effort, Vec::Zero(1)));
}

// ---------------------------------------------------------------------------
// Two-link arm
// ---------------------------------------------------------------------------

struct ArmParams {
    double length1 = 0.30;
    double length2 = 0.33;
    double inertia1 = 0.025;
    double inertia2 = 0.045;
    double mass2 = 1.0;
    double com2 = 0.16;  ///< distance from the elbow to the second link's center of mass
    double b11 = 0.05;
    double b12 = 0.025;
    double b21 = 0.025;
    double b22 = 0.05;

    [[nodiscard]] double a1() const { return inertia1 + inertia2 + mass2 * length1 * length1; }
    [[nodiscard]] double a2() const { return mass2 * length1 * com2; }
    [[nodiscard]] double a3() const { return inertia2; }
    /// det M(theta) = alpha - beta cos^2(theta_2).
    [[nodiscard]] double alpha() const { return a3() * (a1() - a3()); }
    [[nodiscard]] double beta() const { return a2() * a2(); }
    [[nodiscard]] Mat friction() const {
        Mat b(2, 2);
        b << b11, b12, b21, b22;
        return b;
    }
};

inline Mat arm_inertia(const ArmParams& prm, const Vec& angles) {
    const double c2 = std::cos(angles(1));
    Mat m(2, 2);
    m << prm.a1() + 2.0 * prm.a2() * c2, prm.a3() + prm.a2() * c2, prm.a3() + prm.a2() * c2, prm.a3();
    return m;
}

/// Closed-form inverse of the inertia matrix.
inline Mat arm_inertia_inverse(const ArmParams& prm, const Vec& angles) {
    const double c2 = std::cos(angles(1));
    const double det = prm.alpha() - prm.beta() * c2 * c2;
    if (!(det > 0.0)) throw IllConditionedModel("two-link arm: inertia matrix is singular");
    const double off = prm.a3() + prm.a2() * c2;
    Mat inv(2, 2);
    inv << prm.a3(), -off, -off, prm.a1() + 2.0 * prm.a2() * c2;
    return inv / det;
}

inline Vec arm_coriolis(const ArmParams& prm, const Vec& angles, const Vec& vel) {
    Vec c(2);
    c << -vel(1) * (2.0 * vel(0) + vel(1)), vel(0) * vel(0);
    return prm.a2() * std::sin(angles(1)) * c;
}

inline SecondOrderField arm_field(const ArmParams& prm) {
    SecondOrderField f;
    f.dof = 2;
    f.acceleration = [prm](const Vec& z, const Vec& zdot, const Vec& u) -> Vec {
        return arm_inertia_inverse(prm, z) * (u - arm_coriolis(prm, z, zdot) - prm.friction() * zdot);
    };
    f.jacobians = [prm](const Vec& z, const Vec& zdot, const Vec& u) {
        const double s2 = std::sin(z(1)), c2 = std::cos(z(1));
        const double a2 = prm.a2();
        const Mat Minv = arm_inertia_inverse(prm, z);
        const Mat Bf = prm.friction();
        const Vec rhs = u - arm_coriolis(prm, z, zdot) - Bf * zdot;

        Mat dM(2, 2);
        dM << -2.0 * a2 * s2, -a2 * s2, -a2 * s2, 0.0;
        Vec dC_dth2(2);
        dC_dth2 << -zdot(1) * (2.0 * zdot(0) + zdot(1)), zdot(0) * zdot(0);
        dC_dth2 *= a2 * c2;

        FieldJacobians j{Mat::Zero(2, 2), Mat(2, 2), Minv};
        j.dz.col(1) = -Minv * dM * Minv * rhs - Minv * dC_dth2;

        Mat dC_dvel(2, 2);
        dC_dvel << -2.0 * zdot(1), -2.0 * zdot(0) - 2.0 * zdot(1), 2.0 * zdot(0), 0.0;
        dC_dvel *= a2 * s2;
        j.dzdot = -Minv * (dC_dvel + Bf);
        return j;
    };
    return f;
}

/// State (theta_1, theta_2, dtheta_1, dtheta_2).
inline DynamicalSystem two_link_arm_system(const ArmParams& prm, double dt, int horizon, Vec x0) {
    return euler_discretize(arm_field(prm), dt, horizon, std::move(x0), "two-link-arm");
}

struct ArmCostParams {
    Vec target_angles = Vec::Zero(2);
    double lambda1 = 0.1;
    double lambda2 = 0.01;
    double dt = 0.05;
    bool scale_effort_by_dt = true;
};

/// |theta_tau - theta*|^2 + lambda1 |dtheta_tau|^2 + lambda2 * [dt] * sum_t |u_t|^2.
inline StageCosts two_link_arm_costs(const ArmCostParams& c, int horizon) {
    if (c.target_angles.size() != 2) throw std::invalid_argument("two-link arm: target must have two angles");
    Vec w(4);
    w << 1.0, 1.0, c.lambda1, c.lambda1;
    Vec target = Vec::Zero(4);
    target.head(2) = c.target_angles;
    const double effort = c.lambda2 * (c.scale_effort_by_dt ? c.dt : 1.0);
    return StageCosts::final_state(horizon, StageCost::weighted_target(w.asDiagonal().toDenseMatrix(), target),
                                   StageCost::quadratic(Mat::Identity(2, 2) * 2.0 * effort, Vec::Zero(2)));
}

/// Noise scale 1 / |M(theta)^{-1}|_2 at the given joint angles.
inline double arm_noise_scale(const ArmParams& prm, const Vec& angles) {
    const Mat inv = arm_inertia_inverse(prm, angles);
    return 1.0 / max_eigenvalue(0.5 * (inv + inv.transpose()));
}

// ---------------------------------------------------------------------------
// Double integrator (linear)
// ---------------------------------------------------------------------------

inline SecondOrderField double_integrator_field(int dof = 1) {
    SecondOrderField f;
    f.dof = dof;
    f.acceleration = [](const Vec&, const Vec&, const Vec& u) -> Vec { return u; };
    f.jacobians = [dof](const Vec&, const Vec&, const Vec&) {
        return FieldJacobians{Mat::Zero(dof, dof), Mat::Zero(dof, dof), Mat::Identity(dof, dof)};
    };
    return f;
}

inline DynamicalSystem double_integrator_system(double dt, int horizon, Vec x0, int dof = 1) {
    return euler_discretize(double_integrator_field(dof), dt, horizon, std::move(x0), "double-integrator");
}

}  // namespace riskctl
