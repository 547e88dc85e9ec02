#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace riskctl {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Threshold on theta * sigma^2 below which the risk-neutral (LQR) limit is used.
inline constexpr double kRiskNeutralThreshold = 1e-14;

/// Relative margin used for every positive-definiteness test.
inline constexpr double kDefiniteMargin = 1e-10;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// A rollout produced a non-finite state.
class DivergedTrajectory : public std::runtime_error {
public:
    explicit DivergedTrajectory(int stage)
        : std::runtime_error("trajectory diverged at stage " + std::to_string(stage)), stage_(stage) {}
    [[nodiscard]] int stage() const noexcept { return stage_; }

private:
    int stage_;
};

/// sigma^-2 I - theta X H X^T is not positive definite: the surrogate is undefined.
class ConditionViolated : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A linear solve that should be positive definite failed.
class IllConditionedModel : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Backtracking reached its lower step-size bound without an accepted step.
class StepStall : public std::runtime_error {
public:
    StepStall(double gamma, int trials, double surrogate_gap)
        : std::runtime_error("sufficient decrease not reached: gamma=" + std::to_string(gamma) +
                             " trials=" + std::to_string(trials) +
                             " gap=" + std::to_string(surrogate_gap)),
          gamma_(gamma), trials_(trials), gap_(surrogate_gap) {}
    [[nodiscard]] double gamma() const noexcept { return gamma_; }
    [[nodiscard]] int trials() const noexcept { return trials_; }
    [[nodiscard]] double gap() const noexcept { return gap_; }

private:
    double gamma_;
    int trials_;
    double gap_;
};

// ---------------------------------------------------------------------------
// Stage-indexed vectors
// ---------------------------------------------------------------------------

/// Flat vector made of `stages` consecutive blocks of size `dim`.
template <class Tag>
class StagedVector {
public:
    StagedVector() = default;
    StagedVector(int stages, int dim) : data_(Vec::Zero(static_cast<Eigen::Index>(stages) * dim)), dim_(dim) {
        if (dim <= 0 || stages < 0) throw std::invalid_argument("StagedVector: invalid shape");
    }
    StagedVector(Vec flat, int dim) : data_(std::move(flat)), dim_(dim) {
        if (dim <= 0 || data_.size() % dim != 0)
            throw std::invalid_argument("StagedVector: length not divisible by stage dimension");
    }

    [[nodiscard]] int dim() const noexcept { return dim_; }
    [[nodiscard]] int stages() const noexcept { return dim_ == 0 ? 0 : static_cast<int>(data_.size() / dim_); }
    [[nodiscard]] Eigen::Index size() const noexcept { return data_.size(); }

    [[nodiscard]] auto stage(int t) { return data_.segment(static_cast<Eigen::Index>(t) * dim_, dim_); }
    [[nodiscard]] auto stage(int t) const { return data_.segment(static_cast<Eigen::Index>(t) * dim_, dim_); }

    [[nodiscard]] const Vec& flat() const noexcept { return data_; }
    [[nodiscard]] Vec& flat() noexcept { return data_; }

    [[nodiscard]] bool all_finite() const { return data_.allFinite(); }

private:
    Vec data_;
    int dim_ = 0;
};

struct ControlTag;
struct NoiseTag;
struct StateTag;

/// The command (u_0; ...; u_{tau-1}).
using ControlSequence = StagedVector<ControlTag>;
/// A noise sequence (w_0; ...; w_{tau-1}).
using NoiseSequence = StagedVector<NoiseTag>;

/// States (x_1; ...; x_tau). The initial state is kept apart.
class StateTrajectory {
public:
    StateTrajectory() = default;
    StateTrajectory(Vec initial, int stages)
        : initial_(std::move(initial)), states_(stages, static_cast<int>(initial_.size())) {}

    [[nodiscard]] const Vec& initial() const noexcept { return initial_; }
    [[nodiscard]] int dim() const noexcept { return states_.dim(); }
    [[nodiscard]] int stages() const noexcept { return states_.stages(); }

    /// State x_t for t in [0, tau]; x_0 is the initial state.
    [[nodiscard]] Vec at(int t) const { return t == 0 ? initial_ : Vec(states_.stage(t - 1)); }
    void set(int t, const Vec& x) { states_.stage(t - 1) = x; }

    [[nodiscard]] const Vec& flat() const noexcept { return states_.flat(); }
    [[nodiscard]] Vec final_state() const { return at(stages()); }

private:
    Vec initial_;
    StagedVector<StateTag> states_;
};

// ---------------------------------------------------------------------------
// Small numerical helpers
// ---------------------------------------------------------------------------

inline void symmetrize(Mat& m) { m = 0.5 * (m + m.transpose()).eval(); }

/// Cholesky of `m` that only succeeds when m - margin * scale * I is positive definite.
/// Returns false when the test fails.
inline bool factor_with_margin(const Mat& m, double scale, Eigen::LLT<Mat>& llt) {
    Mat shifted = m;
    shifted.diagonal().array() -= kDefiniteMargin * scale;
    Eigen::LLT<Mat> check(shifted);
    if (check.info() != Eigen::Success) return false;
    llt.compute(m);
    return llt.info() == Eigen::Success;
}

inline double min_eigenvalue(const Mat& symmetric) {
    if (symmetric.size() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<Mat> es(symmetric, Eigen::EigenvaluesOnly);
    return es.eigenvalues()(0);
}

inline double max_eigenvalue(const Mat& symmetric) {
    if (symmetric.size() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<Mat> es(symmetric, Eigen::EigenvaluesOnly);
    return es.eigenvalues()(es.eigenvalues().size() - 1);
}

inline Mat block_diagonal(const std::vector<Mat>& blocks) {
    Eigen::Index rows = 0, cols = 0;
    for (const auto& b : blocks) {
        rows += b.rows();
        cols += b.cols();
    }
    Mat out = Mat::Zero(rows, cols);
    Eigen::Index r = 0, c = 0;
    for (const auto& b : blocks) {
        out.block(r, c, b.rows(), b.cols()) = b;
        r += b.rows();
        c += b.cols();
    }
    return out;
}

}  // namespace riskctl
