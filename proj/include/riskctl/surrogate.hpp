#pragma once

// Closed-form surrogate risk cost of the linearized trajectory.
//
// With X the command Jacobian of the trajectory, H = diag(H_1..H_tau),
// h the stacked state-cost gradient, S = X H X^T, b = X h and s = theta sigma^2:
//
//   Sigma^{-1} = sigma^{-2} I - theta S,      w* = theta Sigma b,
//   f(u) = -1/(2 theta) logdet(I - s S) + h(x) + theta/2 b^T Sigma b + g(u).
//
// Everything goes through the Cholesky factor of K = I - s S = sigma^2 Sigma^{-1}.
// This is the dense validation path; the optimizer itself uses the DP.

#include "riskctl/core.hpp"
#include "riskctl/dynsys.hpp"

#include <cmath>
#include <optional>
#include <tuple>

namespace riskctl {

struct GaussianApprox {
    Mat X;      ///< command Jacobian, (tau p) x (tau d)
    Mat H;      ///< block-diagonal state Hessian, (tau d) x (tau d)
    Vec h;      ///< stacked state-cost gradient
    Mat S;      ///< X H X^T
    Vec b;      ///< X h
    Vec mean;   ///< w*
    double theta = 0.0;
    double sigma = 0.0;
    bool risk_neutral = false;
    Eigen::LLT<Mat> factor;  ///< Cholesky of I - s S (unset in the risk-neutral limit)

    /// Sigma * x.
    [[nodiscard]] Vec covariance_times(const Vec& x) const {
        if (risk_neutral) return sigma * sigma * x;
        return sigma * sigma * factor.solve(x);
    }
};

struct SurrogateEval {
    double value = 0.0;
    double log_det_term = 0.0;
    double state_cost = 0.0;
    double tilt = 0.0;
    double control_cost = 0.0;
    /// True when the state cost is not quadratic and its local quadratic model was used.
    bool local_quadratic_model = false;
    std::optional<Vec> gradient;  ///< truncated gradient of the full objective
};

inline GaussianApprox gaussian_approx(const LinearizedModel& m, double theta, double sigma) {
    if (theta < 0.0 || sigma < 0.0) throw std::invalid_argument("gaussian_approx: theta and sigma must be >= 0");
    if (!m.additive_noise) throw std::invalid_argument("gaussian_approx: requires an additive-noise model");
    GaussianApprox g;
    g.theta = theta;
    g.sigma = sigma;
    g.X = trajectory_jacobian(m, Input::Control);
    std::tie(g.H, g.h) = stacked_state_cost(m);
    g.S.noalias() = g.X * g.H * g.X.transpose();
    symmetrize(g.S);
    g.b = g.X * g.h;
    const double s = theta * sigma * sigma;
    g.risk_neutral = s <= kRiskNeutralThreshold;
    if (g.risk_neutral) {
        g.mean = s * g.b;
        return g;
    }
    Mat K = Mat::Identity(g.S.rows(), g.S.cols()) - s * g.S;
    if (!factor_with_margin(K, 1.0, g.factor))
        throw ConditionViolated("surrogate undefined: sigma^-2 I - theta X H X^T is not positive definite");
    g.mean = s * g.factor.solve(g.b);
    return g;
}

inline SurrogateEval surrogate_value(const LinearizedModel& m, double theta, double sigma,
                                     bool with_gradient = false) {
    const GaussianApprox g = gaussian_approx(m, theta, sigma);
    SurrogateEval e;
    e.state_cost = m.state_cost;
    e.control_cost = m.control_cost;
    e.local_quadratic_model = !m.quadratic_costs;
    if (g.risk_neutral) {
        e.log_det_term = 0.5 * sigma * sigma * g.S.trace();
        e.tilt = 0.0;
    } else {
        const Mat& L = g.factor.matrixLLT();
        double logdet = 0.0;
        for (Eigen::Index i = 0; i < L.rows(); ++i) logdet += 2.0 * std::log(L(i, i));
        e.log_det_term = -logdet / (2.0 * theta);
        e.tilt = 0.5 * g.b.dot(g.mean);
    }
    e.value = e.log_det_term + e.state_cost + e.tilt + e.control_cost;
    if (with_gradient) {
        Vec grad = g.X * (g.h + g.H * (g.X.transpose() * g.mean));
        grad += stacked_control_cost(m).second;
        e.gradient = std::move(grad);
    }
    return e;
}

/// Truncated gradient X (h + H X^T w*) + grad g.
inline Vec truncated_gradient(const LinearizedModel& m, double theta, double sigma) {
    return *surrogate_value(m, theta, sigma, true).gradient;
}

/// Dense regularized step v with u+ = u + v:
///   v = -(G + I/gamma + S + theta S Sigma S)^{-1} (grad g + X (h + H X^T w*)).
inline Vec reg_step_closed_form(const LinearizedModel& m, double theta, double sigma, double gamma) {
    if (!(gamma > 0.0)) throw std::invalid_argument("reg_step_closed_form: gamma must be positive");
    const GaussianApprox g = gaussian_approx(m, theta, sigma);
    auto [G, grad_g] = stacked_control_cost(m);
    Mat system = G + g.S;
    system.diagonal().array() += 1.0 / gamma;
    if (!g.risk_neutral) {
        Mat SigmaS(g.S.rows(), g.S.cols());
        for (Eigen::Index j = 0; j < g.S.cols(); ++j) SigmaS.col(j) = g.covariance_times(g.S.col(j));
        system += theta * g.S * SigmaS;
    }
    symmetrize(system);
    const Vec rhs = grad_g + g.X * (g.h + g.H * (g.X.transpose() * g.mean));
    Eigen::LLT<Mat> llt(system);
    if (llt.info() != Eigen::Success) throw IllConditionedModel("reg_step_closed_form: step matrix not definite");
    return -llt.solve(rhs);
}

// System-level conveniences.

inline GaussianApprox gaussian_approx(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u,
                                      double theta, double sigma) {
    return gaussian_approx(linearize(sys, costs, u), theta, sigma);
}

inline SurrogateEval surrogate_value(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u,
                                     double theta, double sigma, bool with_gradient = false) {
    return surrogate_value(linearize(sys, costs, u), theta, sigma, with_gradient);
}

inline Vec truncated_gradient(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u,
                              double theta, double sigma) {
    return truncated_gradient(linearize(sys, costs, u), theta, sigma);
}

inline ControlSequence reg_step_closed_form(const DynamicalSystem& sys, const StageCosts& costs,
                                            const ControlSequence& u, double theta, double sigma, double gamma) {
    const Vec v = reg_step_closed_form(linearize(sys, costs, u), theta, sigma, gamma);
    return ControlSequence(u.flat() + v, u.dim());
}

}  // namespace riskctl
