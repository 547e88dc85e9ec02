#pragma once

// Regularized step for final-state costs through the dual problem
//
//   min_z  q_h*(z) + q_g*(-A^T z) - s/2 |B^T z|^2
//
// where A and B are the Jacobians of the final state with respect to the
// command and the noise, q_h* is the conjugate of the final-state quadratic and
// q_g* the conjugate of the gamma-regularized control quadratic. The problem is
// solved by conjugate gradients; the step is v = grad q_g*(-A^T z*).
//
// Jacobian products are forward and backward sweeps through the stage
// Jacobians. A forward sweep (jvp) or a backward sweep (vjp) counts as one
// oracle call; a backward sweep yields both the command and noise products.

#include "riskctl/core.hpp"
#include "riskctl/dynsys.hpp"

#include <cmath>
#include <functional>

namespace riskctl {

struct OracleCounts {
    int jvp = 0;
    int vjp = 0;
    [[nodiscard]] int total() const noexcept { return jvp + vjp; }
};

class JacobianOracle {
public:
    explicit JacobianOracle(const LinearizedModel& m) : m_(&m) {}

    /// d x_tau along (v, w): one forward sweep.
    [[nodiscard]] Vec jvp(const Vec& v, const Vec* w = nullptr) {
        ++counts_.jvp;
        const int p = m_->control_dim, q = m_->noise_dim;
        Vec y = Vec::Zero(m_->state_dim);
        for (int t = 0; t < m_->horizon; ++t) {
            const auto ts = static_cast<std::size_t>(t);
            Vec next = m_->A[ts] * y + m_->B[ts] * v.segment(static_cast<Eigen::Index>(t) * p, p);
            if (w) next += m_->C[ts] * w->segment(static_cast<Eigen::Index>(t) * q, q);
            y = std::move(next);
        }
        return y;
    }

    [[nodiscard]] Vec jvp_u(const Vec& v) { return jvp(v); }
    [[nodiscard]] Vec jvp_w(const Vec& w) {
        const Vec zero = Vec::Zero(static_cast<Eigen::Index>(m_->horizon) * m_->control_dim);
        return jvp(zero, &w);
    }

    struct Adjoint {
        Vec control;  ///< (grad_u x_tau) z
        Vec noise;    ///< (grad_w x_tau) z
    };

    /// Both command and noise adjoints of z: one backward sweep.
    [[nodiscard]] Adjoint vjp(const Vec& z) {
        ++counts_.vjp;
        const int p = m_->control_dim, q = m_->noise_dim;
        Adjoint out{Vec(static_cast<Eigen::Index>(m_->horizon) * p), Vec(static_cast<Eigen::Index>(m_->horizon) * q)};
        Vec lambda = z;
        for (int t = m_->horizon - 1; t >= 0; --t) {
            const auto ts = static_cast<std::size_t>(t);
            out.control.segment(static_cast<Eigen::Index>(t) * p, p) = m_->B[ts].transpose() * lambda;
            out.noise.segment(static_cast<Eigen::Index>(t) * q, q) = m_->C[ts].transpose() * lambda;
            lambda = (m_->A[ts].transpose() * lambda).eval();
        }
        return out;
    }

    [[nodiscard]] Vec vjp_u(const Vec& z) { return vjp(z).control; }
    [[nodiscard]] Vec vjp_w(const Vec& z) { return vjp(z).noise; }

    [[nodiscard]] const OracleCounts& counts() const noexcept { return counts_; }
    void reset_counts() noexcept { counts_ = {}; }

private:
    const LinearizedModel* m_;
    OracleCounts counts_;
};

// ---------------------------------------------------------------------------
// Conjugate gradients
// ---------------------------------------------------------------------------

struct CgResult {
    Vec x;
    int iterations = 0;
    double residual_norm = 0.0;
    bool converged = false;
    bool breakdown = false;  ///< nonpositive curvature met
};

/// Solves A x = b for a symmetric positive definite operator given by `matvec`.
/// Stops when |A x - b| <= tol |b|.
inline CgResult conjgrad(const std::function<Vec(const Vec&)>& matvec, const Vec& b, double tol, int max_iter) {
    CgResult r;
    r.x = Vec::Zero(b.size());
    const double bnorm = b.norm();
    if (bnorm == 0.0) {
        r.converged = true;
        return r;
    }
    Vec res = b;
    Vec dir = res;
    double rr = res.squaredNorm();
    for (int k = 0; k < max_iter; ++k) {
        const Vec Ad = matvec(dir);
        const double curv = dir.dot(Ad);
        if (!(curv > 0.0)) {
            r.breakdown = true;
            r.residual_norm = std::sqrt(rr);
            return r;
        }
        const double alpha = rr / curv;
        r.x += alpha * dir;
        res -= alpha * Ad;
        ++r.iterations;
        const double rr_next = res.squaredNorm();
        if (std::sqrt(rr_next) <= tol * bnorm) {
            r.converged = true;
            r.residual_norm = std::sqrt(rr_next);
            return r;
        }
        dir = res + (rr_next / rr) * dir;
        rr = rr_next;
    }
    r.residual_norm = std::sqrt(rr);
    return r;
}

// ---------------------------------------------------------------------------
// Dual step
// ---------------------------------------------------------------------------

enum class DualStatus { Ok, Infeasible, CgBreakdown, CgNotConverged };

struct DualCgOptions {
    double tol = 1e-10;
    int max_iter = -1;  ///< defaults to 2 d
};

struct DualStepResult {
    DualStatus status = DualStatus::Ok;
    Vec step;  ///< v with u+ = u + v (empty unless Ok)
    Vec z;     ///< dual solution
    int cg_iterations = 0;
    double cg_residual = 0.0;
    OracleCounts calls;
    int hessian_columns = 0;

    [[nodiscard]] bool ok() const noexcept { return status == DualStatus::Ok; }
    /// Calls charged with the published accounting: 2 per gradient, 4 per
    /// Hessian column of the feasibility check, 1 for the primal map.
    [[nodiscard]] int published_call_count() const noexcept {
        const int gradients = cg_iterations + 1;
        return 2 * gradients + 4 * hessian_columns + 1;
    }
};

inline DualStepResult dual_solve_final_state(const LinearizedModel& m, double theta, double sigma, double gamma,
                                            const DualCgOptions& opt = {}) {
    if (!m.final_state_only()) throw std::invalid_argument("dual step: costs must depend on the final state only");
    if (!(gamma > 0.0) && !std::isinf(gamma)) throw std::invalid_argument("dual step: gamma must be positive");
    const int d = m.state_dim, p = m.control_dim, tau = m.horizon;
    const double s = theta * sigma * sigma;
    const double prox = std::isinf(gamma) ? 0.0 : 1.0 / gamma;

    const Mat& H = m.H[static_cast<std::size_t>(tau)];
    Eigen::LLT<Mat> hllt(H);
    if (hllt.info() != Eigen::Success)
        throw std::invalid_argument("dual step: final-state Hessian must be positive definite");
    const Mat Hinv = hllt.solve(Mat::Identity(d, d));
    const Vec& hgrad = m.h[static_cast<std::size_t>(tau)];

    std::vector<Eigen::LLT<Mat>> gfac;
    gfac.reserve(static_cast<std::size_t>(tau));
    for (int t = 0; t < tau; ++t) {
        Mat Gh = m.G[static_cast<std::size_t>(t)] + prox * Mat::Identity(p, p);
        gfac.emplace_back(Gh);
        if (gfac.back().info() != Eigen::Success)
            throw IllConditionedModel("dual step: regularized control Hessian not positive definite");
    }
    auto ginv = [&](const Vec& x) {
        Vec out(x.size());
        for (int t = 0; t < tau; ++t)
            out.segment(static_cast<Eigen::Index>(t) * p, p) =
                gfac[static_cast<std::size_t>(t)].solve(x.segment(static_cast<Eigen::Index>(t) * p, p));
        return out;
    };
    const Vec grad_g = stacked_control_cost(m).second;

    DualStepResult r;
    JacobianOracle oracle(m);

    // Feasibility: H^{-1} - s B B^T positive definite, one column at a time.
    if (s > kRiskNeutralThreshold) {
        Mat hess(d, d);
        for (int i = 0; i < d; ++i) {
            const Vec e = Vec::Unit(d, i);
            const Vec zeros = Vec::Zero(static_cast<Eigen::Index>(tau) * p);
            const Vec bw = oracle.vjp(e).noise;
            hess.col(i) = Hinv.col(i) - s * oracle.jvp(zeros, &bw);
            ++r.hessian_columns;
        }
        symmetrize(hess);
        Eigen::LLT<Mat> check;
        if (!factor_with_margin(hess, Hinv.diagonal().maxCoeff(), check)) {
            r.status = DualStatus::Infeasible;
            r.calls = oracle.counts();
            return r;
        }
    }

    // A_op z = H^{-1} z + A G^{-1} A^T z - s B B^T z: one backward and one forward sweep.
    auto matvec = [&](const Vec& z) -> Vec {
        const auto adj = oracle.vjp(z);
        const Vec noise_dir = -s * adj.noise;
        return Hinv * z + oracle.jvp(ginv(adj.control), &noise_dir);
    };
    // Gradient at zero: -H^{-1} h + A G^{-1} g.
    const Vec rhs = Hinv * hgrad - oracle.jvp(ginv(grad_g));

    const int cap = opt.max_iter > 0 ? opt.max_iter : 2 * d;
    CgResult cg = conjgrad(matvec, rhs, opt.tol, cap);
    r.cg_iterations = cg.iterations;
    r.cg_residual = cg.residual_norm;
    r.z = cg.x;
    if (cg.breakdown) {
        r.status = DualStatus::CgBreakdown;
        r.calls = oracle.counts();
        return r;
    }
    if (!cg.converged) {
        r.status = DualStatus::CgNotConverged;
        r.calls = oracle.counts();
        return r;
    }
    r.step = ginv(-oracle.vjp(cg.x).control - grad_g);
    r.calls = oracle.counts();
    return r;
}

inline DualStepResult dual_solve_final_state(const DynamicalSystem& sys, const StageCosts& costs,
                                             const ControlSequence& u, double theta, double sigma, double gamma,
                                             const DualCgOptions& opt = {}) {
    return dual_solve_final_state(linearize(sys, costs, u), theta, sigma, gamma, opt);
}

}  // namespace riskctl
