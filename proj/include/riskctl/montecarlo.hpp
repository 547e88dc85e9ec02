#pragma once

// Monte-Carlo estimates of the risk cost (1/theta) log E exp(theta h(x)) + g(u),
// of its gradient, and of the impulse-disturbance test cost.
//
// Sample i draws its noise from CounterRng(derive_seed(seed, i, tag)), and all
// reductions run serially in index order, so results do not depend on the
// number of threads.

#include "riskctl/core.hpp"
#include "riskctl/dynsys.hpp"
#include "riskctl/parallel.hpp"
#include "riskctl/random.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace riskctl {

inline constexpr double kPlainMeanThreshold = 1e-10;

inline constexpr std::uint64_t kRiskSampleTag = 0x5249534bULL;  // "RISK"
inline constexpr std::uint64_t kTestSampleTag = 0x54455354ULL;  // "TEST"
inline constexpr std::uint64_t kRunTag = 0x52554e53ULL;         // "RUNS"

struct McEstimate {
    double value = 0.0;
    double std_error = 0.0;
    int samples = 0;   ///< samples used (diverged ones excluded)
    int diverged = 0;
    std::uint64_t seed = 0;
    double shift = 0.0;  ///< max_i h_i, subtracted before exponentiating
};

struct McGradient {
    Vec gradient;
    Vec std_error;
    int samples = 0;
    int diverged = 0;
};

struct McOptions {
    int threads = 1;
};

/// Noise sequence of sample `index`, N(0, sigma^2 I).
inline NoiseSequence sample_noise(const DynamicalSystem& sys, double sigma, std::uint64_t seed, std::uint64_t index) {
    CounterRng rng(derive_seed(seed, index, kRiskSampleTag));
    NoiseSequence w(sys.horizon(), sys.noise_dim());
    for (Eigen::Index i = 0; i < w.size(); ++i) w.flat()(i) = sigma * rng.normal();
    return w;
}

namespace detail {

struct LogMeanExp {
    double value;      ///< (1/theta) log mean exp(theta h)
    double std_error;  ///< delta-method standard error
    double shift;
};

inline LogMeanExp log_mean_exp(const std::vector<double>& h, double theta) {
    const auto n = static_cast<double>(h.size());
    double hmax = -std::numeric_limits<double>::infinity();
    for (double v : h) hmax = std::max(hmax, v);
    if (theta < kPlainMeanThreshold) {
        double mean = 0.0;
        for (double v : h) mean += v;
        mean /= n;
        double var = 0.0;
        for (double v : h) var += (v - mean) * (v - mean);
        var = h.size() > 1 ? var / (n - 1.0) : 0.0;
        return {mean, std::sqrt(var / n), hmax};
    }
    double sum = 0.0;
    for (double v : h) sum += std::exp(theta * (v - hmax));
    const double ybar = sum / n;
    double var = 0.0;
    for (double v : h) {
        const double y = std::exp(theta * (v - hmax));
        var += (y - ybar) * (y - ybar);
    }
    var = h.size() > 1 ? var / (n - 1.0) : 0.0;
    return {hmax + std::log(ybar) / theta, std::sqrt(var / n) / (theta * ybar), hmax};
}

}  // namespace detail

/// Per-sample state costs h(x(u, w_i)); NaN marks a diverged sample.
inline std::vector<double> sample_state_costs(const DynamicalSystem& sys, const StageCosts& costs,
                                              const ControlSequence& u, double sigma, int n, std::uint64_t seed,
                                              const McOptions& opt = {}) {
    std::vector<double> h(static_cast<std::size_t>(n));
    parallel_for(h.size(), opt.threads, [&](std::size_t i) {
        const NoiseSequence w = sample_noise(sys, sigma, seed, i);
        try {
            const double v = costs.state_cost(rollout(sys, u, &w));
            h[i] = std::isfinite(v) ? v : std::numeric_limits<double>::quiet_NaN();
        } catch (const DivergedTrajectory&) {
            h[i] = std::numeric_limits<double>::quiet_NaN();
        }
    });
    return h;
}

inline McEstimate mc_risk_value(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u,
                                double theta, double sigma, int n, std::uint64_t seed, const McOptions& opt = {}) {
    if (n < 1) throw std::invalid_argument("mc_risk_value: need at least one sample");
    if (theta < 0.0 || sigma < 0.0) throw std::invalid_argument("mc_risk_value: theta and sigma must be >= 0");
    const auto all = sample_state_costs(sys, costs, u, sigma, n, seed, opt);
    std::vector<double> h;
    h.reserve(all.size());
    for (double v : all)
        if (!std::isnan(v)) h.push_back(v);
    McEstimate e;
    e.seed = seed;
    e.samples = static_cast<int>(h.size());
    e.diverged = n - e.samples;
    if (h.empty()) throw DivergedTrajectory(-1);
    const auto lme = detail::log_mean_exp(h, theta);
    e.value = lme.value + costs.control_cost(u);
    e.std_error = lme.std_error;
    e.shift = lme.shift;
    return e;
}

struct McRuns {
    std::vector<McEstimate> runs;
    double mean = 0.0;
    double spread = 0.0;  ///< sample standard deviation across runs
};

/// Independent repetitions with seeds derived from `seed` and the run index.
inline McRuns mc_risk_runs(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u, double theta,
                           double sigma, int n, int runs, std::uint64_t seed, const McOptions& opt = {}) {
    McRuns r;
    for (int k = 0; k < runs; ++k)
        r.runs.push_back(
            mc_risk_value(sys, costs, u, theta, sigma, n, derive_seed(seed, static_cast<std::uint64_t>(k), kRunTag), opt));
    for (const auto& e : r.runs) r.mean += e.value;
    r.mean /= static_cast<double>(runs);
    for (const auto& e : r.runs) r.spread += (e.value - r.mean) * (e.value - r.mean);
    r.spread = runs > 1 ? std::sqrt(r.spread / (runs - 1)) : 0.0;
    return r;
}

/// grad_u h(x(u, w)) by a backward adjoint sweep along the noisy trajectory.
inline Vec state_cost_gradient(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u,
                               const NoiseSequence& w, double* cost = nullptr) {
    const StateTrajectory x = rollout(sys, u, &w);
    const int tau = sys.horizon(), p = sys.control_dim();
    Vec grad(static_cast<Eigen::Index>(tau) * p);
    Vec lambda = costs.state[static_cast<std::size_t>(tau - 1)].gradient(x.at(tau));
    for (int t = tau - 1; t >= 0; --t) {
        const StepJacobians j = sys.jacobians(x.at(t), u.stage(t), w.stage(t), t);
        grad.segment(static_cast<Eigen::Index>(t) * p, p) = j.du.transpose() * lambda;
        lambda = (j.dx.transpose() * lambda).eval();
        if (t >= 1) lambda += costs.state[static_cast<std::size_t>(t - 1)].gradient(x.at(t));
    }
    if (cost) *cost = costs.state_cost(x);
    return grad;
}

/// Gradient of the risk cost: softmax(theta h_i)-weighted mean of per-sample
/// gradients, plus grad g. Standard errors use the self-normalized estimator.
inline McGradient mc_risk_gradient(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u,
                                   double theta, double sigma, int n, std::uint64_t seed, const McOptions& opt = {}) {
    if (n < 1) throw std::invalid_argument("mc_risk_gradient: need at least one sample");
    std::vector<double> h(static_cast<std::size_t>(n));
    std::vector<Vec> g(static_cast<std::size_t>(n));
    parallel_for(h.size(), opt.threads, [&](std::size_t i) {
        const NoiseSequence w = sample_noise(sys, sigma, seed, i);
        try {
            double c = 0.0;
            g[i] = state_cost_gradient(sys, costs, u, w, &c);
            h[i] = (std::isfinite(c) && g[i].allFinite()) ? c : std::numeric_limits<double>::quiet_NaN();
        } catch (const DivergedTrajectory&) {
            h[i] = std::numeric_limits<double>::quiet_NaN();
        }
    });
    McGradient r;
    double hmax = -std::numeric_limits<double>::infinity();
    for (double v : h)
        if (!std::isnan(v)) {
            hmax = std::max(hmax, v);
            ++r.samples;
        }
    r.diverged = n - r.samples;
    if (r.samples == 0) throw DivergedTrajectory(-1);
    const bool plain = theta < kPlainMeanThreshold;
    std::vector<double> weight(h.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (std::isnan(h[i])) continue;
        weight[i] = plain ? 1.0 : std::exp(theta * (h[i] - hmax));
        total += weight[i];
    }
    const Eigen::Index dim = u.size();
    Vec mean = Vec::Zero(dim);
    for (std::size_t i = 0; i < h.size(); ++i)
        if (weight[i] > 0.0) mean += (weight[i] / total) * g[i];
    Vec var = Vec::Zero(dim);
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (weight[i] <= 0.0) continue;
        const double wi = weight[i] / total;
        var += (wi * wi) * (g[i] - mean).cwiseAbs2();
    }
    r.gradient = mean + costs.control_gradient(u);
    r.std_error = var.cwiseSqrt();
    return r;
}

// ---------------------------------------------------------------------------
// Impulse-disturbance test cost
// ---------------------------------------------------------------------------

struct TestCostOptions {
    double sigma0 = 1.0;
    /// Amplitude std sigma_test / sigma0 when true, sigma_test otherwise.
    bool scale_by_sigma0 = true;
    /// Stage of the kick; negative draws it uniformly per simulation.
    int fixed_stage = -1;
    int threads = 1;
};

struct TestCostResult {
    double mean = 0.0;
    double std_error = 0.0;
    int simulations = 0;  ///< finite simulations included in the mean
    int diverged = 0;
    [[nodiscard]] bool warning() const noexcept { return diverged > 0; }
};

inline TestCostResult test_cost(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u,
                                double sigma_test, int n, std::uint64_t seed, const TestCostOptions& opt = {}) {
    if (n < 1) throw std::invalid_argument("test_cost: need at least one simulation");
    if (sigma_test < 0.0) throw std::invalid_argument("test_cost: sigma_test must be >= 0");
    if (opt.fixed_stage >= sys.horizon()) throw std::invalid_argument("test_cost: kick stage beyond the horizon");
    const double amplitude = opt.scale_by_sigma0 ? sigma_test / opt.sigma0 : sigma_test;
    std::vector<double> h(static_cast<std::size_t>(n));
    parallel_for(h.size(), opt.threads, [&](std::size_t i) {
        CounterRng rng(derive_seed(seed, i, kTestSampleTag));
        const int stage = opt.fixed_stage >= 0
                              ? opt.fixed_stage
                              : static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(sys.horizon())));
        NoiseSequence w(sys.horizon(), sys.noise_dim());
        for (int k = 0; k < sys.noise_dim(); ++k) w.stage(stage)(k) = amplitude * rng.normal();
        try {
            const double v = costs.state_cost(rollout(sys, u, &w));
            h[i] = std::isfinite(v) ? v : std::numeric_limits<double>::quiet_NaN();
        } catch (const DivergedTrajectory&) {
            h[i] = std::numeric_limits<double>::quiet_NaN();
        }
    });
    TestCostResult r;
    for (double v : h)
        if (!std::isnan(v)) {
            r.mean += v;
            ++r.simulations;
        }
    r.diverged = n - r.simulations;
    if (r.simulations == 0) return r;
    r.mean /= r.simulations;
    double var = 0.0;
    for (double v : h)
        if (!std::isnan(v)) var += (v - r.mean) * (v - r.mean);
    var = r.simulations > 1 ? var / (r.simulations - 1) : 0.0;
    r.std_error = std::sqrt(var / r.simulations);
    return r;
}

}  // namespace riskctl
