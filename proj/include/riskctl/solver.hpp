#pragma once

// Outer loops: the proximally regularized iteration (constant step, sufficient
// decrease backtracking or burn-in grid tuning) and the unregularized iteration
// with a Monte-Carlo line search.

#include "riskctl/core.hpp"
#include "riskctl/dynsys.hpp"
#include "riskctl/leqg.hpp"
#include "riskctl/montecarlo.hpp"
#include "riskctl/parallel.hpp"
#include "riskctl/random.hpp"
#include "riskctl/surrogate.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace riskctl {

enum class StepPolicy { Constant, Backtracking, BurnInGrid };

struct BacktrackingParams {
    double gamma0 = 1.0;
    double shrink = 0.5;
    double grow = 2.0;
    double gamma_min = std::ldexp(1.0, -20);
    double gamma_max = std::ldexp(1.0, 20);
    int max_trials = 40;

    void validate() const {
        if (!(gamma_min > 0.0) || !(gamma_min <= gamma0) || !(gamma0 <= gamma_max))
            throw std::invalid_argument("backtracking: need 0 < gamma_min <= gamma0 <= gamma_max");
        if (!(shrink > 0.0 && shrink < 1.0) || !(grow >= 1.0))
            throw std::invalid_argument("backtracking: need 0 < shrink < 1 <= grow");
        if (max_trials < 1) throw std::invalid_argument("backtracking: max_trials must be positive");
    }
};

struct BurnInParams {
    int exponent_min = -5;
    int exponent_max = 10;
    int iterations = 5;
};

struct SolverConfig {
    double theta = 0.0;
    double sigma = 1.0;
    StepPolicy policy = StepPolicy::Constant;
    double gamma = 1.0;  ///< constant step (proximal gamma, or alpha for the unregularized loop)
    BacktrackingParams backtracking;
    BurnInParams burn_in;
    int max_iterations = 100;
    double tolerance = 1e-6;  ///< on the truncated-gradient norm
    std::uint64_t seed = 0;
    int mc_samples = 100;            ///< line-search sample count
    double line_search_slack = 0.0;  ///< accept when f(u+) <= f(u) + slack
    bool retry_reduced_risk = false; ///< halve theta once when a subproblem is infeasible
    int threads = 1;

    void validate() const {
        if (!(theta >= 0.0) || !(sigma > 0.0)) throw std::invalid_argument("solver: need theta >= 0, sigma > 0");
        if (!(gamma > 0.0)) throw std::invalid_argument("solver: gamma must be positive");
        if (max_iterations < 0) throw std::invalid_argument("solver: max_iterations must be >= 0");
        if (mc_samples < 1) throw std::invalid_argument("solver: mc_samples must be positive");
        if (policy == StepPolicy::Backtracking) backtracking.validate();
        if (policy == StepPolicy::BurnInGrid &&
            (burn_in.exponent_min > burn_in.exponent_max || burn_in.iterations < 0))
            throw std::invalid_argument("solver: empty burn-in grid");
    }
};

enum class Termination { MaxIterations, Tolerance, Infeasible, SurrogateUndefined, Stall, Diverged };

inline const char* to_string(Termination t) {
    switch (t) {
        case Termination::MaxIterations: return "max_iterations";
        case Termination::Tolerance: return "tolerance";
        case Termination::Infeasible: return "infeasible";
        case Termination::SurrogateUndefined: return "surrogate_undefined";
        case Termination::Stall: return "stall";
        case Termination::Diverged: return "diverged";
    }
    return "unknown";
}

inline bool is_early_stop(Termination t) {
    return t == Termination::Infeasible || t == Termination::SurrogateUndefined || t == Termination::Stall ||
           t == Termination::Diverged;
}

struct IterateRecord {
    int k = 0;
    ControlSequence command;
    double surrogate = std::numeric_limits<double>::quiet_NaN();  ///< NaN when undefined
    double trunc_grad_norm = std::numeric_limits<double>::quiet_NaN();
    double gamma = 0.0;      ///< step size that produced this iterate
    int backtracks = 0;      ///< rejected trials before that step
    bool feasible = true;    ///< surrogate defined at this iterate
    double theta = 0.0;      ///< risk parameter in force
    double step_norm = 0.0;  ///< |u_k - u_{k-1}|
    double wall_ms = 0.0;    ///< time spent producing this iterate
};

struct IterateTrace {
    std::string algorithm;
    std::vector<IterateRecord> rows;
    Termination termination = Termination::MaxIterations;
    int failed_stage = -1;
    std::string message;

    [[nodiscard]] const IterateRecord& last() const { return rows.back(); }

    /// Iterate with the smallest finite surrogate value.
    [[nodiscard]] const IterateRecord& best() const {
        const IterateRecord* b = &rows.front();
        for (const auto& r : rows)
            if (std::isfinite(r.surrogate) && (!std::isfinite(b->surrogate) || r.surrogate < b->surrogate)) b = &r;
        return *b;
    }
};

namespace detail {

struct PointEval {
    std::optional<LinearizedModel> model;
    std::optional<SurrogateEval> eval;
    bool diverged = false;
};

inline PointEval evaluate_point(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u,
                                double theta, double sigma) {
    PointEval pe;
    try {
        pe.model = linearize(sys, costs, u);
    } catch (const DivergedTrajectory&) {
        pe.diverged = true;
        return pe;
    }
    try {
        pe.eval = surrogate_value(*pe.model, theta, sigma, true);
    } catch (const ConditionViolated&) {
    }
    return pe;
}

inline void fill_record(IterateRecord& r, const PointEval& pe) {
    r.feasible = pe.eval.has_value();
    if (pe.eval) {
        r.surrogate = pe.eval->value;
        r.trunc_grad_norm = pe.eval->gradient->norm();
    }
}

inline double elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Sufficient decrease
// ---------------------------------------------------------------------------

struct SufficientDecreaseResult {
    ControlSequence next;
    double gamma = 0.0;       ///< accepted step size
    double next_gamma = 0.0;  ///< suggested trial step for the following iteration
    int trials = 0;           ///< trials including the accepted one
    double model_bound = 0.0; ///< m(u+; u) + |u+ - u|^2 / (2 gamma)
    LinearizedModel next_model;
    SurrogateEval next_eval;
};

/// Regularized step whose size is shrunk until
///   f(u+) <= m(u+; u) + |u+ - u|^2 / (2 gamma).
///
/// The DP value c_0(0) leaves out the constant part of the model, so
///   m(u+; u) + |v|^2/(2 gamma) = c_0(0) + h(x) + g(u) - 1/(2 theta) logdet(I - s S),
/// with the last three terms taken at u. `eval` must be the surrogate at u
/// built from `model`.
inline SufficientDecreaseResult sufficient_decrease_step(const DynamicalSystem& sys, const StageCosts& costs,
                                                         const LinearizedModel& model, const SurrogateEval& eval,
                                                         double theta, double sigma, double gamma_trial,
                                                         const BacktrackingParams& bt) {
    bt.validate();
    double gamma = std::clamp(gamma_trial, bt.gamma_min, bt.gamma_max);
    const double constants = eval.state_cost + eval.control_cost + eval.log_det_term;
    double last_gap = std::numeric_limits<double>::infinity();
    for (int trial = 1; trial <= bt.max_trials; ++trial) {
        const LeqgSolution sol = solve_leqg(model, {theta, sigma, 1.0 / gamma});
        if (sol.feasible) {
            const double bound = sol.value + constants;
            ControlSequence next(model.nominal_command.flat() + sol.v, model.control_dim);
            try {
                LinearizedModel next_model = linearize(sys, costs, next);
                SurrogateEval next_eval = surrogate_value(next_model, theta, sigma, true);
                const double slack = 1e-12 * std::max(1.0, std::abs(bound));
                last_gap = next_eval.value - bound;
                if (next_eval.value <= bound + slack) {
                    SufficientDecreaseResult r;
                    r.next = std::move(next);
                    r.gamma = gamma;
                    r.next_gamma = std::min(gamma * bt.grow, bt.gamma_max);
                    r.trials = trial;
                    r.model_bound = bound;
                    r.next_model = std::move(next_model);
                    r.next_eval = std::move(next_eval);
                    return r;
                }
            } catch (const ConditionViolated&) {
            } catch (const DivergedTrajectory&) {
            }
        }
        if (gamma <= bt.gamma_min) throw StepStall(gamma, trial, last_gap);
        gamma = std::max(gamma * bt.shrink, bt.gamma_min);
    }
    throw StepStall(gamma, bt.max_trials, last_gap);
}

inline SufficientDecreaseResult sufficient_decrease_step(const DynamicalSystem& sys, const StageCosts& costs,
                                                         const ControlSequence& u, double theta, double sigma,
                                                         double gamma_trial, const BacktrackingParams& bt) {
    const LinearizedModel model = linearize(sys, costs, u);
    const SurrogateEval eval = surrogate_value(model, theta, sigma, true);
    return sufficient_decrease_step(sys, costs, model, eval, theta, sigma, gamma_trial, bt);
}

// ---------------------------------------------------------------------------
// Regularized iteration
// ---------------------------------------------------------------------------

struct BurnInResult {
    double gamma = 0.0;
    std::vector<double> grid;
    std::vector<double> scores;  ///< final surrogate after burn-in, +inf on early stop
};

enum class Algorithm { Regularized, Unregularized };

inline IterateTrace run_regileqg_fixed(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u0,
                                       const SolverConfig& cfg, double gamma, bool backtracking);

inline IterateTrace run_ileqg_fixed(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u0,
                                    const SolverConfig& cfg, double alpha, bool line_search);

inline BurnInResult burnin_tune(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u0,
                                const SolverConfig& cfg, Algorithm algo, const std::vector<int>& exponents) {
    if (exponents.empty()) throw std::invalid_argument("burnin_tune: empty grid");
    BurnInResult r;
    for (int e : exponents) r.grid.push_back(std::ldexp(1.0, e));
    r.scores.assign(r.grid.size(), std::numeric_limits<double>::infinity());
    SolverConfig burn = cfg;
    burn.max_iterations = cfg.burn_in.iterations;
    parallel_for(r.grid.size(), cfg.threads, [&](std::size_t i) {
        const IterateTrace t = algo == Algorithm::Regularized
                                   ? run_regileqg_fixed(sys, costs, u0, burn, r.grid[i], false)
                                   : run_ileqg_fixed(sys, costs, u0, burn, r.grid[i], false);
        const double v = t.last().surrogate;
        if (!is_early_stop(t.termination) && std::isfinite(v)) r.scores[i] = v;
    });
    std::size_t best = r.scores.size();
    for (std::size_t i = 0; i < r.scores.size(); ++i)
        if (std::isfinite(r.scores[i]) && (best == r.scores.size() || r.scores[i] < r.scores[best])) best = i;
    if (best == r.scores.size()) throw std::runtime_error("burnin_tune: every grid point stopped early");
    r.gamma = r.grid[best];
    return r;
}

inline std::vector<int> exponent_range(int lo, int hi) {
    std::vector<int> out;
    for (int e = lo; e <= hi; ++e) out.push_back(e);
    return out;
}

inline IterateTrace run_regileqg_fixed(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u0,
                                       const SolverConfig& cfg, double gamma, bool backtracking) {
    IterateTrace trace;
    trace.algorithm = "regileqg";
    double theta = cfg.theta;
    bool retried = false;
    auto clock = std::chrono::steady_clock::now();

    detail::PointEval pe = detail::evaluate_point(sys, costs, u0, theta, cfg.sigma);
    IterateRecord row;
    row.k = 0;
    row.command = u0;
    row.gamma = gamma;
    row.theta = theta;
    detail::fill_record(row, pe);
    row.wall_ms = detail::elapsed_ms(clock);
    trace.rows.push_back(row);
    if (pe.diverged) {
        trace.termination = Termination::Diverged;
        return trace;
    }

    ControlSequence u = u0;
    double trial_gamma = backtracking ? cfg.backtracking.gamma0 : gamma;
    for (int k = 0; k < cfg.max_iterations; ++k) {
        clock = std::chrono::steady_clock::now();
        if (pe.eval && pe.eval->gradient->norm() <= cfg.tolerance) {
            trace.termination = Termination::Tolerance;
            return trace;
        }
        IterateRecord next;
        next.k = k + 1;
        next.theta = theta;
        if (backtracking) {
            if (!pe.eval) {
                trace.termination = Termination::SurrogateUndefined;
                return trace;
            }
            try {
                SufficientDecreaseResult step = sufficient_decrease_step(sys, costs, *pe.model, *pe.eval, theta,
                                                                         cfg.sigma, trial_gamma, cfg.backtracking);
                next.step_norm = (step.next.flat() - u.flat()).norm();
                next.gamma = step.gamma;
                next.backtracks = step.trials - 1;
                trial_gamma = step.next_gamma;
                u = std::move(step.next);
                pe.model = std::move(step.next_model);
                pe.eval = std::move(step.next_eval);
            } catch (const StepStall& e) {
                trace.termination = Termination::Stall;
                trace.message = e.what();
                return trace;
            }
        } else {
            LeqgSolution sol = solve_leqg(*pe.model, {theta, cfg.sigma, 1.0 / gamma});
            if (!sol.feasible && cfg.retry_reduced_risk && !retried) {
                retried = true;
                theta *= 0.5;
                next.theta = theta;
                sol = solve_leqg(*pe.model, {theta, cfg.sigma, 1.0 / gamma});
            }
            if (!sol.feasible) {
                trace.termination = Termination::Infeasible;
                trace.failed_stage = sol.failed_stage;
                return trace;
            }
            ControlSequence cand(u.flat() + sol.v, u.dim());
            next.step_norm = sol.v.norm();
            next.gamma = gamma;
            u = std::move(cand);
            pe = detail::evaluate_point(sys, costs, u, theta, cfg.sigma);
        }
        next.command = u;
        detail::fill_record(next, pe);
        next.wall_ms = detail::elapsed_ms(clock);
        trace.rows.push_back(std::move(next));
        if (pe.diverged) {
            trace.termination = Termination::Diverged;
            return trace;
        }
    }
    trace.termination = Termination::MaxIterations;
    return trace;
}

/// Regularized iteration from `u0` with the step policy of `cfg`.
inline IterateTrace run_regileqg(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u0,
                                 const SolverConfig& cfg) {
    cfg.validate();
    switch (cfg.policy) {
        case StepPolicy::Constant: return run_regileqg_fixed(sys, costs, u0, cfg, cfg.gamma, false);
        case StepPolicy::Backtracking: return run_regileqg_fixed(sys, costs, u0, cfg, cfg.backtracking.gamma0, true);
        case StepPolicy::BurnInGrid: {
            const auto tuned = burnin_tune(sys, costs, u0, cfg, Algorithm::Regularized,
                                           exponent_range(cfg.burn_in.exponent_min, cfg.burn_in.exponent_max));
            return run_regileqg_fixed(sys, costs, u0, cfg, tuned.gamma, false);
        }
    }
    return {};
}

// ---------------------------------------------------------------------------
// Unregularized iteration
// ---------------------------------------------------------------------------

inline IterateTrace run_ileqg_fixed(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u0,
                                    const SolverConfig& cfg, double alpha, bool line_search) {
    IterateTrace trace;
    trace.algorithm = "ileqg";
    double theta = cfg.theta;
    bool retried = false;
    auto clock = std::chrono::steady_clock::now();

    detail::PointEval pe = detail::evaluate_point(sys, costs, u0, theta, cfg.sigma);
    IterateRecord row;
    row.k = 0;
    row.command = u0;
    row.gamma = alpha;
    row.theta = theta;
    detail::fill_record(row, pe);
    row.wall_ms = detail::elapsed_ms(clock);
    trace.rows.push_back(row);
    if (pe.diverged) {
        trace.termination = Termination::Diverged;
        return trace;
    }

    ControlSequence u = u0;
    const McOptions mc{cfg.threads};
    for (int k = 0; k < cfg.max_iterations; ++k) {
        clock = std::chrono::steady_clock::now();
        if (pe.eval && pe.eval->gradient->norm() <= cfg.tolerance) {
            trace.termination = Termination::Tolerance;
            return trace;
        }
        IterateRecord next;
        next.k = k + 1;
        LeqgSolution sol = solve_leqg(*pe.model, {theta, cfg.sigma, 0.0});
        if (!sol.feasible && cfg.retry_reduced_risk && !retried) {
            retried = true;
            theta *= 0.5;
            sol = solve_leqg(*pe.model, {theta, cfg.sigma, 0.0});
        }
        next.theta = theta;
        if (!sol.feasible) {
            trace.termination = Termination::Infeasible;
            trace.failed_stage = sol.failed_stage;
            return trace;
        }
        double step = alpha;
        if (line_search) {
            // Common random numbers: one seed per iteration for every trial.
            const std::uint64_t seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(k), kRunTag);
            auto mc_value = [&](const ControlSequence& c) {
                try {
                    return mc_risk_value(sys, costs, c, theta, cfg.sigma, cfg.mc_samples, seed, mc).value;
                } catch (const DivergedTrajectory&) {
                    return std::numeric_limits<double>::infinity();
                }
            };
            const double current = mc_value(u);
            step = cfg.backtracking.gamma0;
            bool accepted = false;
            for (int trial = 0; trial < cfg.backtracking.max_trials; ++trial) {
                const ControlSequence cand(u.flat() + step * sol.v, u.dim());
                if (mc_value(cand) <= current + cfg.line_search_slack) {
                    accepted = true;
                    next.backtracks = trial;
                    break;
                }
                if (step <= cfg.backtracking.gamma_min) break;
                step = std::max(step * cfg.backtracking.shrink, cfg.backtracking.gamma_min);
            }
            if (!accepted) {
                trace.termination = Termination::Stall;
                trace.message = "line search stalled at alpha=" + std::to_string(step);
                return trace;
            }
        }
        next.gamma = step;
        next.step_norm = step * sol.v.norm();
        u = ControlSequence(u.flat() + step * sol.v, u.dim());
        pe = detail::evaluate_point(sys, costs, u, theta, cfg.sigma);
        next.command = u;
        detail::fill_record(next, pe);
        next.wall_ms = detail::elapsed_ms(clock);
        trace.rows.push_back(std::move(next));
        if (pe.diverged) {
            trace.termination = Termination::Diverged;
            return trace;
        }
    }
    trace.termination = Termination::MaxIterations;
    return trace;
}

/// Unregularized iteration: Constant uses a fixed step alpha = cfg.gamma,
/// Backtracking a Monte-Carlo line search starting at backtracking.gamma0.
inline IterateTrace run_ileqg(const DynamicalSystem& sys, const StageCosts& costs, const ControlSequence& u0,
                              const SolverConfig& cfg) {
    cfg.validate();
    switch (cfg.policy) {
        case StepPolicy::Constant: return run_ileqg_fixed(sys, costs, u0, cfg, cfg.gamma, false);
        case StepPolicy::Backtracking: return run_ileqg_fixed(sys, costs, u0, cfg, cfg.backtracking.gamma0, true);
        case StepPolicy::BurnInGrid: {
            const auto tuned = burnin_tune(sys, costs, u0, cfg, Algorithm::Unregularized,
                                           exponent_range(cfg.burn_in.exponent_min, cfg.burn_in.exponent_max));
            return run_ileqg_fixed(sys, costs, u0, cfg, tuned.gamma, false);
        }
    }
    return {};
}

}  // namespace riskctl
