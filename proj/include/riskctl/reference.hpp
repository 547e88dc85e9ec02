#pragma once

// Slow reference implementations used to cross-check the production solvers:
// a dense saddle-point solve of the min-max quadratic, a Riccati recursion in
// Q-function form, brute-force numerical integration of the Gaussian
// expectation, and random instance generators. None of these share code with
// the recursions they check beyond the model containers.

#include "riskctl/core.hpp"
#include "riskctl/dynsys.hpp"
#include "riskctl/random.hpp"

#include <Eigen/LU>

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <vector>

namespace riskctl::reference {

// ---------------------------------------------------------------------------
// Random instances
// ---------------------------------------------------------------------------

inline Mat random_matrix(CounterRng& rng, int rows, int cols, double scale = 1.0) {
    Mat m(rows, cols);
    for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) m(i, j) = scale * rng.normal();
    return m;
}

inline Vec random_vector(CounterRng& rng, int n, double scale = 1.0) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v(i) = scale * rng.normal();
    return v;
}

/// Random symmetric PSD matrix of the given rank (full by default), plus shift I.
inline Mat random_psd(CounterRng& rng, int n, double shift = 0.0, int rank = -1) {
    const int r = rank < 0 ? n : rank;
    const Mat f = random_matrix(rng, n, r);
    Mat m = f * f.transpose() / std::max(r, 1);
    m.diagonal().array() += shift;
    symmetrize(m);
    return m;
}

struct InstanceShape {
    int horizon = 3;
    int state_dim = 2;
    int control_dim = 2;
    int noise_dim = 2;
    bool additive = false;    ///< C_t = B_t (forces noise_dim = control_dim)
    bool final_only = false;  ///< H_t = 0 and h_t = 0 for t < tau
};

/// Random linear-quadratic model; A_t scaled to keep trajectories moderate.
inline LinearizedModel random_lq_model(CounterRng& rng, const InstanceShape& sh) {
    const int q = sh.additive ? sh.control_dim : sh.noise_dim;
    LinearizedModel m = LinearizedModel::zeros(sh.state_dim, sh.control_dim, q, sh.horizon);
    m.additive_noise = sh.additive;
    for (int t = 0; t < sh.horizon; ++t) {
        const auto ts = static_cast<std::size_t>(t);
        m.A[ts] = Mat::Identity(sh.state_dim, sh.state_dim) +
                  random_matrix(rng, sh.state_dim, sh.state_dim, 0.3 / std::sqrt(sh.state_dim));
        m.B[ts] = random_matrix(rng, sh.state_dim, sh.control_dim, 0.5);
        m.C[ts] = sh.additive ? m.B[ts] : random_matrix(rng, sh.state_dim, q, 0.5);
        m.G[ts] = random_psd(rng, sh.control_dim, 0.5);
        m.g[ts] = random_vector(rng, sh.control_dim);
        const bool with_state = !sh.final_only || t + 1 == sh.horizon;
        if (with_state) {
            m.H[ts + 1] = random_psd(rng, sh.state_dim, sh.final_only ? 0.5 : 0.0, sh.final_only ? -1 : 1 + t % 2);
            m.h[ts + 1] = random_vector(rng, sh.state_dim);
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Dense min-max quadratic
// ---------------------------------------------------------------------------

/// The game objective written densely in z = (v, w):
///   Q(z) = 1/2 z^T M z + r^T z + c,
/// with y = Fv v + Fw w + f0 built by simulating unit inputs.
struct DenseGame {
    Mat Fv, Fw;  ///< stacked state responses (tau d x tau p), (tau d x tau q)
    Vec f0;      ///< stacked free response from y0
    Mat M;
    Vec r;
    double c = 0.0;
    Eigen::Index nv = 0, nw = 0;

    [[nodiscard]] double value(const Vec& z) const { return 0.5 * z.dot(M * z) + r.dot(z) + c; }
    [[nodiscard]] Vec gradient(const Vec& z) const { return M * z + r; }
};

inline DenseGame dense_game(const LinearizedModel& m, double s, double prox_weight, const Vec* y0 = nullptr) {
    const int d = m.state_dim, p = m.control_dim, q = m.noise_dim, tau = m.horizon;
    const Eigen::Index ny = static_cast<Eigen::Index>(tau) * d;
    DenseGame g;
    g.nv = static_cast<Eigen::Index>(tau) * p;
    g.nw = static_cast<Eigen::Index>(tau) * q;
    auto simulate = [&](const Vec& v, const Vec& w, const Vec& start) {
        Vec out(ny);
        Vec y = start;
        for (int t = 0; t < tau; ++t) {
            const auto ts = static_cast<std::size_t>(t);
            y = (m.A[ts] * y + m.B[ts] * v.segment(t * p, p) + m.C[ts] * w.segment(t * q, q)).eval();
            out.segment(static_cast<Eigen::Index>(t) * d, d) = y;
        }
        return out;
    };
    const Vec zero_v = Vec::Zero(g.nv), zero_w = Vec::Zero(g.nw), zero_y = Vec::Zero(d);
    g.Fv.resize(ny, g.nv);
    g.Fw.resize(ny, g.nw);
    for (Eigen::Index j = 0; j < g.nv; ++j) g.Fv.col(j) = simulate(Vec::Unit(g.nv, j), zero_w, zero_y);
    for (Eigen::Index j = 0; j < g.nw; ++j) g.Fw.col(j) = simulate(zero_v, Vec::Unit(g.nw, j), zero_y);
    g.f0 = simulate(zero_v, zero_w, y0 ? *y0 : zero_y);

    Mat Hs = Mat::Zero(ny, ny);
    Vec hs(ny);
    for (int t = 1; t <= tau; ++t) {
        Hs.block(static_cast<Eigen::Index>(t - 1) * d, static_cast<Eigen::Index>(t - 1) * d, d, d) =
            m.H[static_cast<std::size_t>(t)];
        hs.segment(static_cast<Eigen::Index>(t - 1) * d, d) = m.h[static_cast<std::size_t>(t)];
    }
    Mat Gs = Mat::Zero(g.nv, g.nv);
    Vec gs(g.nv);
    for (int t = 0; t < tau; ++t) {
        Gs.block(static_cast<Eigen::Index>(t) * p, static_cast<Eigen::Index>(t) * p, p, p) =
            m.G[static_cast<std::size_t>(t)] + prox_weight * Mat::Identity(p, p);
        gs.segment(static_cast<Eigen::Index>(t) * p, p) = m.g[static_cast<std::size_t>(t)];
    }
    Mat F(ny, g.nv + g.nw);
    F << g.Fv, g.Fw;
    g.M = F.transpose() * Hs * F;
    g.M.topLeftCorner(g.nv, g.nv) += Gs;
    g.M.bottomRightCorner(g.nw, g.nw) -= Mat::Identity(g.nw, g.nw) / s;
    g.r = F.transpose() * (Hs * g.f0 + hs);
    g.r.head(g.nv) += gs;
    g.c = 0.5 * g.f0.dot(Hs * g.f0) + hs.dot(g.f0);
    return g;
}

struct SaddleResult {
    bool concave = false;  ///< the noise block is negative definite
    Vec v, w;
    double value = 0.0;
};

/// Stationary point of the dense game by a pivoted LU solve.
inline SaddleResult dense_saddle(const LinearizedModel& m, double s, double prox_weight, const Vec* y0 = nullptr) {
    const DenseGame g = dense_game(m, s, prox_weight, y0);
    SaddleResult r;
    const Mat Mww = g.M.bottomRightCorner(g.nw, g.nw);
    Eigen::SelfAdjointEigenSolver<Mat> es(Mww, Eigen::EigenvaluesOnly);
    r.concave = es.eigenvalues().maxCoeff() < 0.0;
    const Vec z = g.M.fullPivLu().solve(-g.r);
    r.v = z.head(g.nv);
    r.w = z.tail(g.nw);
    r.value = g.value(z);
    return r;
}

// ---------------------------------------------------------------------------
// Riccati recursion in Q-function form (risk neutral)
// ---------------------------------------------------------------------------

struct LqrResult {
    Vec v;
    double value = 0.0;
};

inline LqrResult lqr(const LinearizedModel& m, double prox_weight, const Vec* y0 = nullptr) {
    const int d = m.state_dim, p = m.control_dim, tau = m.horizon;
    std::vector<Mat> K(static_cast<std::size_t>(tau));
    std::vector<Vec> k(static_cast<std::size_t>(tau));
    Mat Vxx = m.H[static_cast<std::size_t>(tau)];
    Vec vx = m.h[static_cast<std::size_t>(tau)];
    double v0 = 0.0;
    for (int t = tau - 1; t >= 0; --t) {
        const auto ts = static_cast<std::size_t>(t);
        const Mat& A = m.A[ts];
        const Mat& B = m.B[ts];
        const Mat Qxx = m.H[ts] + A.transpose() * Vxx * A;
        const Mat Qux = B.transpose() * Vxx * A;
        const Mat Quu = m.G[ts] + prox_weight * Mat::Identity(p, p) + B.transpose() * Vxx * B;
        const Vec qx = m.h[ts] + A.transpose() * vx;
        const Vec qu = m.g[ts] + B.transpose() * vx;
        const Eigen::PartialPivLU<Mat> lu(Quu);
        K[ts] = -lu.solve(Qux);
        k[ts] = -lu.solve(qu);
        Vxx = Qxx + Qux.transpose() * K[ts];
        Vxx = 0.5 * (Vxx + Vxx.transpose()).eval();
        vx = qx + Qux.transpose() * k[ts];
        v0 += 0.5 * qu.dot(k[ts]);
    }
    LqrResult r;
    r.v.resize(static_cast<Eigen::Index>(tau) * p);
    Vec y = y0 ? *y0 : Vec::Zero(d);
    r.value = 0.5 * y.dot(Vxx * y) + vx.dot(y) + v0;
    for (int t = 0; t < tau; ++t) {
        const auto ts = static_cast<std::size_t>(t);
        const Vec v = K[ts] * y + k[ts];
        r.v.segment(static_cast<Eigen::Index>(t) * p, p) = v;
        y = (m.A[ts] * y + m.B[ts] * v).eval();
    }
    return r;
}

/// Regularized Gauss-Newton iterates u_{k+1} = u_k + lqr step, k = 0..iterations.
inline std::vector<Vec> gauss_newton_iterates(const DynamicalSystem& sys, const StageCosts& costs,
                                              const ControlSequence& u0, double gamma, int iterations) {
    std::vector<Vec> out{u0.flat()};
    ControlSequence u = u0;
    for (int k = 0; k < iterations; ++k) {
        const LinearizedModel m = linearize(sys, costs, u);
        u = ControlSequence(u.flat() + lqr(m, 1.0 / gamma).v, u.dim());
        out.push_back(u.flat());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Numerical integration of the surrogate expectation
// ---------------------------------------------------------------------------

/// (1/theta) log E exp(theta q(x + X^T w)) + g(u), w ~ N(0, sigma^2 I), by a
/// trapezoidal rule on a wide grid around the integrand's peak, for
/// (tau p) <= 2. The trapezoidal rule converges geometrically for such
/// Gaussian-type integrands.
inline double surrogate_by_quadrature(const LinearizedModel& m, double theta, double sigma, int points_per_axis = 801) {
    const int d = m.state_dim, p = m.control_dim, tau = m.horizon;
    const int n = tau * p;
    if (n > 2) throw std::invalid_argument("surrogate_by_quadrature: at most two noise coordinates");
    // Affine trajectory response to the noise, from unit simulations.
    auto response = [&](const Vec& w) {
        Vec out(static_cast<Eigen::Index>(tau) * d);
        Vec y = Vec::Zero(d);
        for (int t = 0; t < tau; ++t) {
            const auto ts = static_cast<std::size_t>(t);
            y = (m.A[ts] * y + m.B[ts] * w.segment(t * p, p)).eval();
            out.segment(static_cast<Eigen::Index>(t) * d, d) = y;
        }
        return out;
    };
    auto exponent = [&](const Vec& w) {
        const Vec y = response(w);
        double q = 0.0;
        for (int t = 1; t <= tau; ++t) {
            const Vec yt = y.segment(static_cast<Eigen::Index>(t - 1) * d, d);
            q += 0.5 * yt.dot(m.H[static_cast<std::size_t>(t)] * yt) + m.h[static_cast<std::size_t>(t)].dot(yt);
        }
        return theta * q - w.squaredNorm() / (2.0 * sigma * sigma);
    };
    // Curvature and peak of the exponent (a quadratic) by central differences.
    Mat hess(n, n);
    Vec grad0(n);
    for (int i = 0; i < n; ++i) {
        const Vec ei = Vec::Unit(n, i);
        grad0(i) = (exponent(ei) - exponent(-ei)) / 2.0;
        for (int j = 0; j < n; ++j) {
            const Vec ej = Vec::Unit(n, j);
            hess(i, j) = (exponent(ei + ej) - exponent(ei - ej) - exponent(-ei + ej) + exponent(-ei - ej)) / 4.0;
        }
    }
    const Vec peak = hess.fullPivLu().solve(-grad0);
    Eigen::SelfAdjointEigenSolver<Mat> es(-hess);
    const Vec radius = 16.0 / es.eigenvalues().array().sqrt();
    const Vec step = 2.0 * radius / (points_per_axis - 1);

    std::vector<double> logs;
    logs.reserve(static_cast<std::size_t>(n == 1 ? points_per_axis : points_per_axis * points_per_axis));
    const Mat& rot = es.eigenvectors();
    if (n == 1) {
        for (int i = 0; i < points_per_axis; ++i) {
            Vec xi(1);
            xi << -radius(0) + i * step(0);
            logs.push_back(exponent(peak + rot * xi));
        }
    } else {
        for (int i = 0; i < points_per_axis; ++i)
            for (int j = 0; j < points_per_axis; ++j) {
                Vec xi(2);
                xi << -radius(0) + i * step(0), -radius(1) + j * step(1);
                logs.push_back(exponent(peak + rot * xi));
            }
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (double l : logs) mx = std::max(mx, l);
    double sum = 0.0;
    for (double l : logs) sum += std::exp(l - mx);
    const double cell = step.prod();
    // E exp(theta q) = (2 pi sigma^2)^{-n/2} * integral exp(exponent).
    const double log_expect = mx + std::log(sum * cell) - 0.5 * n * std::log(2.0 * std::numbers::pi * sigma * sigma);
    return log_expect / theta + m.state_cost + m.control_cost;
}

}  // namespace riskctl::reference
