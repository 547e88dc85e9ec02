#pragma once

// Backward dynamic programming for the linear exponential quadratic Gaussian
// game
//
//   min_v max_w  sum_t [ 1/2 y_t^T H_t y_t + h_t^T y_t ]
//              + sum_t [ 1/2 v_t^T (G_t + r I) v_t + g_t^T v_t ]
//              - 1/(2 s) sum_t |w_t|^2,
//   y_{t+1} = A_t y_t + B_t v_t + C_t w_t,
//
// with s = theta * sigma^2 and r the proximal weight. Cost-to-go functions are
// 1/2 y^T P_t y + p_t^T y + c_t.

#include "riskctl/core.hpp"
#include "riskctl/dynsys.hpp"

#include <limits>
#include <vector>

namespace riskctl {

struct LeqgParams {
    double theta = 0.0;
    double sigma = 1.0;
    double prox_weight = 0.0;  ///< 1/gamma, added to every G_t
    /// Test hook: scales the cost-to-go Hessian after every stage. 1 is the
    /// correct recursion; validate uses other values to prove it can fail.
    double debug_recursion_scale = 1.0;

    [[nodiscard]] double s() const noexcept { return theta * sigma * sigma; }
    [[nodiscard]] bool risk_neutral() const noexcept { return s() <= kRiskNeutralThreshold; }
};

struct CostToGo {
    std::vector<Mat> P;        ///< t = 0..tau
    std::vector<Vec> p;        ///< t = 0..tau
    std::vector<double> c;     ///< t = 0..tau, c_tau = 0
    std::vector<Mat> P_tilde;  ///< index t holds the modified P_{t+1}
    std::vector<Vec> p_tilde;  ///< index t holds the modified p_{t+1}

    [[nodiscard]] double value(const Vec& y0) const { return 0.5 * y0.dot(P[0] * y0) + p[0].dot(y0) + c[0]; }
};

struct PolicyGains {
    std::vector<Mat> K;   ///< p x d
    std::vector<Vec> k;   ///< p
    std::vector<Mat> Lx;  ///< q x d
    std::vector<Mat> Lu;  ///< q x p
    std::vector<Vec> l;   ///< q
};

struct BackwardResult {
    bool feasible = false;
    int failed_stage = -1;  ///< first stage (counting down from tau-1) that failed
    CostToGo cost_to_go;
    PolicyGains gains;
};

/// Solution of one LEQG game. When `feasible` is false only `failed_stage` is set.
struct LeqgSolution {
    bool feasible = false;
    int failed_stage = -1;
    Vec v;  ///< stacked command deviation (tau p)
    Vec w;  ///< stacked adversarial noise (tau q)
    Vec y;  ///< stacked states y_1..y_tau (tau d)
    PolicyGains gains;
    CostToGo cost_to_go;
    double value = 0.0;  ///< game value from y0
};

namespace detail {

// One stage of the recursion. Returns false if the noise block is not
// negative definite; P_tilde/p_tilde then fall back to P/p.
inline bool noise_block(const Mat& P, const Vec& p, const Mat& C, double s, Mat& P_tilde, Vec& p_tilde, Mat& Lx_part,
                        Vec& l, double& c_gain) {
    const Eigen::Index q = C.cols();
    Mat M = Mat::Identity(q, q) / s - C.transpose() * P * C;
    symmetrize(M);
    Eigen::LLT<Mat> llt;
    if (!factor_with_margin(M, 1.0 / s, llt)) {
        P_tilde = P;
        p_tilde = p;
        return false;
    }
    const Mat CtP = C.transpose() * P;  // q x d
    Lx_part = llt.solve(CtP);           // M^{-1} C^T P
    const Vec Ctp = C.transpose() * p;
    l = llt.solve(Ctp);
    P_tilde = P + CtP.transpose() * Lx_part;
    symmetrize(P_tilde);
    p_tilde = p + CtP.transpose() * l;
    c_gain = 0.5 * Ctp.dot(l);
    return true;
}

}  // namespace detail

inline BackwardResult backward_pass(const LinearizedModel& m, const LeqgParams& params) {
    if (params.theta < 0.0 || params.sigma < 0.0 || params.prox_weight < 0.0)
        throw std::invalid_argument("backward_pass: theta, sigma and prox weight must be nonnegative");
    const int tau = m.horizon, d = m.state_dim, p = m.control_dim, q = m.noise_dim;
    const double s = params.s();
    const bool neutral = params.risk_neutral();

    BackwardResult r;
    auto& ctg = r.cost_to_go;
    auto& gains = r.gains;
    const auto T = static_cast<std::size_t>(tau);
    ctg.P.assign(T + 1, Mat());
    ctg.p.assign(T + 1, Vec());
    ctg.c.assign(T + 1, 0.0);
    ctg.P_tilde.assign(T, Mat());
    ctg.p_tilde.assign(T, Vec());
    gains.K.assign(T, Mat());
    gains.k.assign(T, Vec());
    gains.Lx.assign(T, Mat::Zero(q, d));
    gains.Lu.assign(T, Mat::Zero(q, p));
    gains.l.assign(T, Vec::Zero(q));

    ctg.P[T] = m.H[T];
    symmetrize(ctg.P[T]);
    ctg.p[T] = m.h[T];

    for (int t = tau - 1; t >= 0; --t) {
        const auto ts = static_cast<std::size_t>(t);
        const Mat& P = ctg.P[ts + 1];
        const Vec& pv = ctg.p[ts + 1];
        const Mat& A = m.A[ts];
        const Mat& B = m.B[ts];
        const Mat& C = m.C[ts];

        Mat Pt;
        Vec pt;
        double c_tilde = ctg.c[ts + 1];
        Mat MinvCtP;
        if (neutral) {
            Pt = P;
            pt = pv;
        } else {
            Vec l;
            double c_gain = 0.0;
            if (!detail::noise_block(P, pv, C, s, Pt, pt, MinvCtP, l, c_gain)) {
                r.feasible = false;
                r.failed_stage = t;
                return r;
            }
            gains.Lx[ts] = MinvCtP * A;
            gains.Lu[ts] = MinvCtP * B;
            gains.l[ts] = std::move(l);
            c_tilde += c_gain;
        }

        Mat Gu = m.G[ts] + Mat::Identity(p, p) * params.prox_weight + B.transpose() * Pt * B;
        symmetrize(Gu);
        Eigen::LLT<Mat> gllt(Gu);
        if (gllt.info() != Eigen::Success)
            throw IllConditionedModel("backward_pass: control block not positive definite at stage " +
                                      std::to_string(t));
        const Vec qv = m.g[ts] + B.transpose() * pt;
        gains.K[ts] = -gllt.solve(B.transpose() * Pt * A);
        gains.k[ts] = -gllt.solve(qv);

        const Mat PtA = Pt * A;
        Mat Pn = m.H[ts] + A.transpose() * PtA + A.transpose() * Pt * B * gains.K[ts];
        symmetrize(Pn);
        if (params.debug_recursion_scale != 1.0) Pn *= params.debug_recursion_scale;
        ctg.P[ts] = std::move(Pn);
        ctg.p[ts] = m.h[ts] + A.transpose() * (pt + Pt * B * gains.k[ts]);
        ctg.c[ts] = c_tilde + 0.5 * qv.dot(gains.k[ts]);
        ctg.P_tilde[ts] = std::move(Pt);
        ctg.p_tilde[ts] = std::move(pt);
    }
    r.feasible = true;
    return r;
}

struct ForwardResult {
    Vec v, w, y;
};

inline ForwardResult forward_rollout(const PolicyGains& gains, const LinearizedModel& m, const Vec& y0) {
    const int tau = m.horizon, d = m.state_dim, p = m.control_dim, q = m.noise_dim;
    ForwardResult out{Vec(static_cast<Eigen::Index>(tau) * p), Vec(static_cast<Eigen::Index>(tau) * q),
                      Vec(static_cast<Eigen::Index>(tau) * d)};
    Vec y = y0;
    for (int t = 0; t < tau; ++t) {
        const auto ts = static_cast<std::size_t>(t);
        const Vec v = gains.K[ts] * y + gains.k[ts];
        const Vec w = gains.Lx[ts] * y + gains.Lu[ts] * v + gains.l[ts];
        y = m.A[ts] * y + m.B[ts] * v + m.C[ts] * w;
        out.v.segment(static_cast<Eigen::Index>(t) * p, p) = v;
        out.w.segment(static_cast<Eigen::Index>(t) * q, q) = w;
        out.y.segment(static_cast<Eigen::Index>(t) * d, d) = y;
    }
    return out;
}

inline LeqgSolution solve_leqg(const LinearizedModel& m, const LeqgParams& params, const Vec* y0 = nullptr) {
    BackwardResult back = backward_pass(m, params);
    LeqgSolution sol;
    sol.feasible = back.feasible;
    sol.failed_stage = back.failed_stage;
    if (!back.feasible) return sol;
    const Vec start = y0 ? *y0 : Vec::Zero(m.state_dim);
    ForwardResult fwd = forward_rollout(back.gains, m, start);
    sol.v = std::move(fwd.v);
    sol.w = std::move(fwd.w);
    sol.y = std::move(fwd.y);
    sol.value = back.cost_to_go.value(start);
    sol.gains = std::move(back.gains);
    sol.cost_to_go = std::move(back.cost_to_go);
    return sol;
}

/// min over t of lambda_min((theta sigma^2)^{-1} I - C_t^T P_{t+1} C_t). Past a failing
/// stage the recursion continues with the unmodified cost-to-go. +inf in the
/// risk-neutral limit.
inline double feasibility_margin(const LinearizedModel& m, double theta, double sigma, double prox_weight = 0.0) {
    const LeqgParams params{theta, sigma, prox_weight};
    if (params.risk_neutral()) return std::numeric_limits<double>::infinity();
    const double s = params.s();
    const int tau = m.horizon, p = m.control_dim, q = m.noise_dim;
    double margin = std::numeric_limits<double>::infinity();
    Mat P = m.H[static_cast<std::size_t>(tau)];
    symmetrize(P);
    Vec pv = m.h[static_cast<std::size_t>(tau)];
    for (int t = tau - 1; t >= 0; --t) {
        const auto ts = static_cast<std::size_t>(t);
        const Mat& A = m.A[ts];
        const Mat& B = m.B[ts];
        const Mat& C = m.C[ts];
        Mat M = Mat::Identity(q, q) / s - C.transpose() * P * C;
        symmetrize(M);
        margin = std::min(margin, min_eigenvalue(M));
        Mat Pt;
        Vec pt, l;
        Mat MinvCtP;
        double c_gain = 0.0;
        detail::noise_block(P, pv, C, s, Pt, pt, MinvCtP, l, c_gain);
        Mat Gu = m.G[ts] + Mat::Identity(p, p) * prox_weight + B.transpose() * Pt * B;
        symmetrize(Gu);
        Eigen::LLT<Mat> gllt(Gu);
        if (gllt.info() != Eigen::Success) throw IllConditionedModel("feasibility_margin: control block");
        const Mat K = -gllt.solve(B.transpose() * Pt * A);
        const Vec k = -gllt.solve(m.g[ts] + B.transpose() * pt);
        Mat Pn = m.H[ts] + A.transpose() * Pt * A + A.transpose() * Pt * B * K;
        symmetrize(Pn);
        pv = m.h[ts] + A.transpose() * (pt + Pt * B * k);
        P = std::move(Pn);
    }
    return margin;
}

}  // namespace riskctl
