#pragma once

// Discrete-time controlled systems, stage costs, rollouts and linearization.
//
// Conventions: Jacobians are stored in the usual orientation, so that around a
// nominal point x+ ~ A x + B u + C w with A = d psi / d x (d x d),
// B = d psi / d u (d x p) and C = d psi / d w (d x q).  The command Jacobian
// of the whole trajectory is stored transposed, X = grad x~(u) with shape
// (tau p) x (tau d), so that x~(u + v) ~ x~(u) + X^T v.

#include "riskctl/core.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace riskctl {

// ---------------------------------------------------------------------------
// Systems
// ---------------------------------------------------------------------------

struct StepJacobians {
    Mat dx;  ///< d psi / d x
    Mat du;  ///< d psi / d u
    Mat dw;  ///< d psi / d w
};

using StepFunction = std::function<Vec(const Vec& x, const Vec& u, const Vec& w, int t)>;
using JacobianFunction = std::function<StepJacobians(const Vec& x, const Vec& u, const Vec& w, int t)>;

struct SystemDims {
    int state = 0;
    int control = 0;
    int noise = 0;
};

/// Central-difference Jacobians of a step function with h = 1e-6 * max(1, |arg|_inf).
inline StepJacobians finite_difference_jacobians(const StepFunction& step, const Vec& x, const Vec& u,
                                                 const Vec& w, int t) {
    auto diff = [&](int which, const Vec& arg) {
        const double h = 1e-6 * std::max(1.0, arg.size() ? arg.cwiseAbs().maxCoeff() : 0.0);
        const Vec base = step(x, u, w, t);
        Mat jac(base.size(), arg.size());
        for (Eigen::Index i = 0; i < arg.size(); ++i) {
            Vec plus = arg, minus = arg;
            plus(i) += h;
            minus(i) -= h;
            Vec fp, fm;
            if (which == 0) {
                fp = step(plus, u, w, t);
                fm = step(minus, u, w, t);
            } else if (which == 1) {
                fp = step(x, plus, w, t);
                fm = step(x, minus, w, t);
            } else {
                fp = step(x, u, plus, t);
                fm = step(x, u, minus, t);
            }
            jac.col(i) = (fp - fm) / (2.0 * h);
        }
        return jac;
    };
    return {diff(0, x), diff(1, u), diff(2, w)};
}

/// x_{t+1} = psi_t(x_t, u_t, w_t), t = 0..horizon-1, from a fixed initial state.
class DynamicalSystem {
public:
    DynamicalSystem(SystemDims dims, int horizon, Vec initial_state, StepFunction step,
                    JacobianFunction jacobians = {}, bool additive_noise = false, std::string name = {})
        : dims_(dims),
          horizon_(horizon),
          initial_state_(std::move(initial_state)),
          step_(std::move(step)),
          jacobians_(std::move(jacobians)),
          additive_noise_(additive_noise),
          name_(std::move(name)) {
        if (horizon_ <= 0) throw std::invalid_argument("DynamicalSystem: horizon must be positive");
        if (dims_.state <= 0 || dims_.control <= 0 || dims_.noise <= 0)
            throw std::invalid_argument("DynamicalSystem: dimensions must be positive");
        if (initial_state_.size() != dims_.state)
            throw std::invalid_argument("DynamicalSystem: initial state has wrong size");
        if (!step_) throw std::invalid_argument("DynamicalSystem: missing step function");
        if (additive_noise_ && dims_.noise != dims_.control)
            throw std::invalid_argument("DynamicalSystem: additive noise requires noise_dim == control_dim");
    }

    [[nodiscard]] int state_dim() const noexcept { return dims_.state; }
    [[nodiscard]] int control_dim() const noexcept { return dims_.control; }
    [[nodiscard]] int noise_dim() const noexcept { return dims_.noise; }
    [[nodiscard]] SystemDims dims() const noexcept { return dims_; }
    [[nodiscard]] int horizon() const noexcept { return horizon_; }
    [[nodiscard]] const Vec& initial_state() const noexcept { return initial_state_; }
    [[nodiscard]] bool additive_noise() const noexcept { return additive_noise_; }
    [[nodiscard]] bool has_analytic_jacobians() const noexcept { return static_cast<bool>(jacobians_); }
    [[nodiscard]] const std::string& name() const noexcept { return name_; }

    [[nodiscard]] Vec step(const Vec& x, const Vec& u, const Vec& w, int t) const { return step_(x, u, w, t); }

    [[nodiscard]] StepJacobians jacobians(const Vec& x, const Vec& u, const Vec& w, int t) const {
        if (jacobians_) return jacobians_(x, u, w, t);
        return finite_difference_jacobians(step_, x, u, w, t);
    }

    [[nodiscard]] DynamicalSystem with_horizon(int horizon) const {
        DynamicalSystem copy = *this;
        if (horizon <= 0) throw std::invalid_argument("DynamicalSystem: horizon must be positive");
        copy.horizon_ = horizon;
        return copy;
    }

    [[nodiscard]] DynamicalSystem with_initial_state(Vec x0) const {
        DynamicalSystem copy = *this;
        if (x0.size() != dims_.state) throw std::invalid_argument("DynamicalSystem: initial state has wrong size");
        copy.initial_state_ = std::move(x0);
        return copy;
    }

    /// Drops analytic Jacobians so that the finite-difference fallback is used.
    [[nodiscard]] DynamicalSystem without_jacobians() const {
        DynamicalSystem copy = *this;
        copy.jacobians_ = {};
        return copy;
    }

private:
    SystemDims dims_;
    int horizon_;
    Vec initial_state_;
    StepFunction step_;
    JacobianFunction jacobians_;
    bool additive_noise_;
    std::string name_;
};

using AdditiveStep = std::function<Vec(const Vec& x, const Vec& u, int t)>;
using AdditiveJacobian = std::function<std::pair<Mat, Mat>(const Vec& x, const Vec& u, int t)>;

/// Builds psi_t(x, u, w) = phi_t(x, u + w).
inline DynamicalSystem additive_noise_system(int state_dim, int control_dim, int horizon, Vec x0, AdditiveStep phi,
                                             AdditiveJacobian phi_jacobian = {}, std::string name = {}) {
    StepFunction step = [phi](const Vec& x, const Vec& u, const Vec& w, int t) { return phi(x, u + w, t); };
    JacobianFunction jac;
    if (phi_jacobian) {
        jac = [phi_jacobian](const Vec& x, const Vec& u, const Vec& w, int t) {
            auto [a, b] = phi_jacobian(x, u + w, t);
            return StepJacobians{std::move(a), b, b};
        };
    }
    return DynamicalSystem({state_dim, control_dim, control_dim}, horizon, std::move(x0), std::move(step),
                           std::move(jac), true, std::move(name));
}

// ---------------------------------------------------------------------------
// Costs
// ---------------------------------------------------------------------------

/// One convex stage cost, either an exact quadratic 0.5 x^T H x + l^T x + c or
/// a smooth function with user-supplied derivatives.
class StageCost {
public:
    using ValueFn = std::function<double(const Vec&)>;
    using GradientFn = std::function<Vec(const Vec&)>;
    using HessianFn = std::function<Mat(const Vec&)>;

    static StageCost zero(int dim) { return quadratic(Mat::Zero(dim, dim), Vec::Zero(dim), 0.0); }

    static StageCost quadratic(Mat hessian, Vec linear, double constant = 0.0) {
        if (hessian.rows() != hessian.cols() || hessian.rows() != linear.size())
            throw std::invalid_argument("StageCost: inconsistent quadratic shapes");
        StageCost c;
        c.dim_ = static_cast<int>(linear.size());
        c.quad_ = Quadratic{std::move(hessian), std::move(linear), constant};
        symmetrize(c.quad_->hessian);
        return c;
    }

    /// (x - target)^T W (x - target).
    static StageCost weighted_target(const Mat& weight, const Vec& target) {
        Mat w = 0.5 * (weight + weight.transpose());
        return quadratic(2.0 * w, -2.0 * w * target, target.dot(w * target));
    }

    static StageCost smooth(int dim, ValueFn value, GradientFn gradient, HessianFn hessian) {
        StageCost c;
        c.dim_ = dim;
        c.value_ = std::move(value);
        c.gradient_ = std::move(gradient);
        c.hessian_ = std::move(hessian);
        return c;
    }

    [[nodiscard]] int dim() const noexcept { return dim_; }
    [[nodiscard]] bool is_quadratic() const noexcept { return quad_.has_value(); }
    [[nodiscard]] bool is_zero() const {
        return quad_ && quad_->hessian.isZero(0.0) && quad_->linear.isZero(0.0) && quad_->constant == 0.0;
    }

    [[nodiscard]] double value(const Vec& x) const {
        if (quad_) return 0.5 * x.dot(quad_->hessian * x) + quad_->linear.dot(x) + quad_->constant;
        return value_(x);
    }
    [[nodiscard]] Vec gradient(const Vec& x) const {
        if (quad_) return quad_->hessian * x + quad_->linear;
        return gradient_(x);
    }
    [[nodiscard]] Mat hessian(const Vec& x) const {
        if (quad_) return quad_->hessian;
        Mat h = hessian_(x);
        symmetrize(h);
        return h;
    }

private:
    struct Quadratic {
        Mat hessian;
        Vec linear;
        double constant;
    };
    int dim_ = 0;
    std::optional<Quadratic> quad_;
    ValueFn value_;
    GradientFn gradient_;
    HessianFn hessian_;
};

/// h(x) + g(u) = sum_{t=1}^{tau} h_t(x_t) + sum_{t=0}^{tau-1} g_t(u_t).
struct StageCosts {
    std::vector<StageCost> state;    ///< state[t-1] is h_t
    std::vector<StageCost> control;  ///< control[t] is g_t

    static StageCosts final_state(int horizon, const StageCost& terminal, const StageCost& per_control) {
        StageCosts c;
        c.state.assign(static_cast<std::size_t>(horizon), StageCost::zero(terminal.dim()));
        c.state.back() = terminal;
        c.control.assign(static_cast<std::size_t>(horizon), per_control);
        return c;
    }

    [[nodiscard]] int horizon() const noexcept { return static_cast<int>(control.size()); }

    [[nodiscard]] bool final_state_only() const {
        for (std::size_t i = 0; i + 1 < state.size(); ++i)
            if (!state[i].is_zero()) return false;
        return true;
    }

    [[nodiscard]] bool all_quadratic() const {
        auto q = [](const StageCost& c) { return c.is_quadratic(); };
        return std::all_of(state.begin(), state.end(), q) && std::all_of(control.begin(), control.end(), q);
    }

    [[nodiscard]] double state_cost(const StateTrajectory& x) const {
        double total = 0.0;
        for (int t = 1; t <= x.stages(); ++t) total += state[static_cast<std::size_t>(t - 1)].value(x.at(t));
        return total;
    }

    [[nodiscard]] double control_cost(const ControlSequence& u) const {
        double total = 0.0;
        for (int t = 0; t < u.stages(); ++t) total += control[static_cast<std::size_t>(t)].value(u.stage(t));
        return total;
    }

    /// Stacked gradient of g at u.
    [[nodiscard]] Vec control_gradient(const ControlSequence& u) const {
        Vec out(u.size());
        for (int t = 0; t < u.stages(); ++t)
            out.segment(static_cast<Eigen::Index>(t) * u.dim(), u.dim()) =
                control[static_cast<std::size_t>(t)].gradient(u.stage(t));
        return out;
    }

    void check(const DynamicalSystem& sys) const {
        if (static_cast<int>(state.size()) != sys.horizon() || static_cast<int>(control.size()) != sys.horizon())
            throw std::invalid_argument("StageCosts: horizon does not match the system");
        for (const auto& c : state)
            if (c.dim() != sys.state_dim()) throw std::invalid_argument("StageCosts: state cost dimension");
        for (const auto& c : control)
            if (c.dim() != sys.control_dim()) throw std::invalid_argument("StageCosts: control cost dimension");
    }
};

// ---------------------------------------------------------------------------
// Rollout and linearization
// ---------------------------------------------------------------------------

/// Noisy (or noiseless, when `noise` is empty) trajectory driven by `command`.
inline StateTrajectory rollout(const DynamicalSystem& sys, const ControlSequence& command,
                               const NoiseSequence* noise = nullptr) {
    const int tau = sys.horizon();
    if (command.dim() != sys.control_dim() || command.stages() != tau)
        throw std::invalid_argument("rollout: command shape does not match the system");
    if (noise && (noise->dim() != sys.noise_dim() || noise->stages() != tau))
        throw std::invalid_argument("rollout: noise shape does not match the system");
    const Vec zero_w = Vec::Zero(sys.noise_dim());
    StateTrajectory traj(sys.initial_state(), tau);
    Vec x = sys.initial_state();
    for (int t = 0; t < tau; ++t) {
        x = noise ? sys.step(x, command.stage(t), noise->stage(t), t) : sys.step(x, command.stage(t), zero_w, t);
        if (!x.allFinite()) throw DivergedTrajectory(t + 1);
        traj.set(t + 1, x);
    }
    return traj;
}

/// Linear-quadratic model of the problem around a nominal command.
struct LinearizedModel {
    int state_dim = 0;
    int control_dim = 0;
    int noise_dim = 0;
    int horizon = 0;
    std::vector<Mat> A, B, C;  ///< t = 0..tau-1
    std::vector<Mat> H;        ///< t = 0..tau, H[0] = 0
    std::vector<Vec> h;        ///< t = 0..tau, gradients of h_t, h[0] = 0
    std::vector<Mat> G;        ///< t = 0..tau-1
    std::vector<Vec> g;        ///< t = 0..tau-1, gradients of g_t
    ControlSequence nominal_command;
    StateTrajectory nominal_trajectory;
    double state_cost = 0.0;    ///< h(x) at the nominal trajectory
    double control_cost = 0.0;  ///< g(u) at the nominal command
    bool additive_noise = false;
    bool quadratic_costs = true;

    /// Zero-initialized model with consistent shapes.
    static LinearizedModel zeros(int d, int p, int q, int tau) {
        LinearizedModel m;
        m.state_dim = d;
        m.control_dim = p;
        m.noise_dim = q;
        m.horizon = tau;
        m.A.assign(static_cast<std::size_t>(tau), Mat::Zero(d, d));
        m.B.assign(static_cast<std::size_t>(tau), Mat::Zero(d, p));
        m.C.assign(static_cast<std::size_t>(tau), Mat::Zero(d, q));
        m.H.assign(static_cast<std::size_t>(tau + 1), Mat::Zero(d, d));
        m.h.assign(static_cast<std::size_t>(tau + 1), Vec::Zero(d));
        m.G.assign(static_cast<std::size_t>(tau), Mat::Zero(p, p));
        m.g.assign(static_cast<std::size_t>(tau), Vec::Zero(p));
        m.nominal_command = ControlSequence(tau, p);
        m.nominal_trajectory = StateTrajectory(Vec::Zero(d), tau);
        return m;
    }

    [[nodiscard]] bool final_state_only() const {
        for (int t = 1; t < horizon; ++t)
            if (!H[static_cast<std::size_t>(t)].isZero(0.0) || !h[static_cast<std::size_t>(t)].isZero(0.0))
                return false;
        return true;
    }
};

inline LinearizedModel linearize(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& command) {
    costs.check(sys);
    if (!command.all_finite()) throw std::invalid_argument("linearize: non-finite command");
    const int tau = sys.horizon();
    LinearizedModel m = LinearizedModel::zeros(sys.state_dim(), sys.control_dim(), sys.noise_dim(), tau);
    m.nominal_command = command;
    m.nominal_trajectory = rollout(sys, command);
    m.additive_noise = sys.additive_noise();
    m.quadratic_costs = costs.all_quadratic();
    const Vec zero_w = Vec::Zero(sys.noise_dim());
    for (int t = 0; t < tau; ++t) {
        const auto ts = static_cast<std::size_t>(t);
        const Vec xt = m.nominal_trajectory.at(t);
        const Vec ut = command.stage(t);
        StepJacobians j = sys.jacobians(xt, ut, zero_w, t);
        m.A[ts] = std::move(j.dx);
        m.B[ts] = std::move(j.du);
        m.C[ts] = sys.additive_noise() ? m.B[ts] : std::move(j.dw);
        m.G[ts] = costs.control[ts].hessian(ut);
        m.g[ts] = costs.control[ts].gradient(ut);
        const Vec xn = m.nominal_trajectory.at(t + 1);
        m.H[ts + 1] = costs.state[ts].hessian(xn);
        m.h[ts + 1] = costs.state[ts].gradient(xn);
    }
    m.state_cost = costs.state_cost(m.nominal_trajectory);
    m.control_cost = costs.control_cost(command);
    return m;
}

/// Which input of the linearized dynamics a trajectory Jacobian refers to.
enum class Input { Control, Noise };

/// Trajectory Jacobian in (tau * input_dim) x (tau * d) layout: block (s, t-1)
/// holds (d x_t / d input_s)^T, zero for s >= t.
inline Mat trajectory_jacobian(const LinearizedModel& m, Input input = Input::Control) {
    const int d = m.state_dim, tau = m.horizon;
    const auto& in = input == Input::Control ? m.B : m.C;
    const int p = input == Input::Control ? m.control_dim : m.noise_dim;
    Mat X = Mat::Zero(static_cast<Eigen::Index>(tau) * p, static_cast<Eigen::Index>(tau) * d);
    for (int s = 0; s < tau; ++s) {
        Mat prop = in[static_cast<std::size_t>(s)];  // d x_{s+1} / d input_s
        X.block(static_cast<Eigen::Index>(s) * p, static_cast<Eigen::Index>(s) * d, p, d) = prop.transpose();
        for (int t = s + 1; t < tau; ++t) {
            prop = m.A[static_cast<std::size_t>(t)] * prop;
            X.block(static_cast<Eigen::Index>(s) * p, static_cast<Eigen::Index>(t) * d, p, d) = prop.transpose();
        }
    }
    return X;
}

/// Stacked y = (y_1; ...; y_tau) for y_{t+1} = A_t y_t + B_t v_t + C_t w_t.
inline Vec linearized_rollout(const LinearizedModel& m, const Vec& v, const Vec* w = nullptr,
                              const Vec* y0 = nullptr) {
    const int d = m.state_dim, p = m.control_dim, q = m.noise_dim;
    Vec y = y0 ? *y0 : Vec::Zero(d);
    Vec out(static_cast<Eigen::Index>(m.horizon) * d);
    for (int t = 0; t < m.horizon; ++t) {
        const auto ts = static_cast<std::size_t>(t);
        Vec next = m.A[ts] * y + m.B[ts] * v.segment(static_cast<Eigen::Index>(t) * p, p);
        if (w) next += m.C[ts] * w->segment(static_cast<Eigen::Index>(t) * q, q);
        y = std::move(next);
        out.segment(static_cast<Eigen::Index>(t) * d, d) = y;
    }
    return out;
}

/// Block-diagonal state Hessian diag(H_1, ..., H_tau) and stacked gradient.
inline std::pair<Mat, Vec> stacked_state_cost(const LinearizedModel& m) {
    std::vector<Mat> blocks(m.H.begin() + 1, m.H.end());
    Vec grad(static_cast<Eigen::Index>(m.horizon) * m.state_dim);
    for (int t = 1; t <= m.horizon; ++t)
        grad.segment(static_cast<Eigen::Index>(t - 1) * m.state_dim, m.state_dim) = m.h[static_cast<std::size_t>(t)];
    return {block_diagonal(blocks), grad};
}

/// Block-diagonal control Hessian diag(G_0, ..., G_{tau-1}) and stacked gradient.
inline std::pair<Mat, Vec> stacked_control_cost(const LinearizedModel& m) {
    Vec grad(static_cast<Eigen::Index>(m.horizon) * m.control_dim);
    for (int t = 0; t < m.horizon; ++t)
        grad.segment(static_cast<Eigen::Index>(t) * m.control_dim, m.control_dim) = m.g[static_cast<std::size_t>(t)];
    return {block_diagonal(m.G), grad};
}

// ---------------------------------------------------------------------------
// Second-order mechanical systems
// ---------------------------------------------------------------------------

struct FieldJacobians {
    Mat dz;     ///< d f / d z
    Mat dzdot;  ///< d f / d zdot
    Mat du;     ///< d f / d u
};

/// Continuous dynamics zddot = f(z, zdot, u) with `dof` generalized coordinates.
struct SecondOrderField {
    int dof = 0;
    std::function<Vec(const Vec& z, const Vec& zdot, const Vec& u)> acceleration;
    std::function<FieldJacobians(const Vec& z, const Vec& zdot, const Vec& u)> jacobians;
};

/// Explicit Euler discretization with the control perturbed additively:
///   z+ = z + dt * zdot,   zdot+ = zdot + dt * f(z, zdot, u + w).
inline DynamicalSystem euler_discretize(SecondOrderField field, double dt, int horizon, Vec x0,
                                        std::string name = {}) {
    if (!(dt > 0.0)) throw std::invalid_argument("euler_discretize: time step must be positive");
    const int n = field.dof;
    if (n <= 0) throw std::invalid_argument("euler_discretize: dof must be positive");
    auto shared = std::make_shared<SecondOrderField>(std::move(field));
    AdditiveStep phi = [shared, dt, n](const Vec& x, const Vec& u, int) {
        Vec next(2 * n);
        const Vec z = x.head(n), zdot = x.tail(n);
        next.head(n) = z + dt * zdot;
        next.tail(n) = zdot + dt * shared->acceleration(z, zdot, u);
        return next;
    };
    AdditiveJacobian phi_jac;
    if (shared->jacobians) {
        phi_jac = [shared, dt, n](const Vec& x, const Vec& u, int) {
            const FieldJacobians f = shared->jacobians(x.head(n), x.tail(n), u);
            Mat a = Mat::Identity(2 * n, 2 * n);
            a.topRightCorner(n, n) += dt * Mat::Identity(n, n);
            a.bottomLeftCorner(n, n) = dt * f.dz;
            a.bottomRightCorner(n, n) += dt * f.dzdot;
            Mat b = Mat::Zero(2 * n, n);
            b.bottomRows(n) = dt * f.du;
            return std::pair<Mat, Mat>{std::move(a), std::move(b)};
        };
    }
    return additive_noise_system(2 * n, n, horizon, std::move(x0), std::move(phi), std::move(phi_jac),
                                 std::move(name));
}

}  // namespace riskctl
