#pragma once

#include "arbfit/qp_core.hpp"
#include "arbfit/regularizers.hpp"

namespace arbfit {

// Weights of the master objective. The regularizer lambdas (ridge, DW, RN,
// Omega, hook) are baked into the RegularizerSet at build time; this struct
// carries the pieces the assembly itself needs plus the pipeline's knobs.
struct MasterWeights {
    double mu = 8.0;          // band hinge
    double lambda_na = 16.0;  // no-arb slack penalty
    double lambda_b = 16.0;   // price-bound slack penalty
    double lambda_ridge = 0.0;
    double lambda_dw0 = 0.0;
    double tau_star = 0.25;
    double lambda_omega0 = 0.0;
    double lambda_hook = 0.0;
    double lambda_rn = 0.0;
    double eta_rn = 0.0;
};

enum class FitMode { soft, hard };

// Master QP over (a, u, v, u_K, v_KK, w_tau, s_lo, s_hi) in that order (hard
// mode keeps only a, u, v and enforces the grid inequalities directly).
struct MasterProblem {
    QpProblem qp;
    FitMode mode = FitMode::soft;
    int P = 0, N = 0, G = 0;
    int off_a = 0, off_u = 0, off_v = 0;
    int off_uK = -1, off_vKK = -1, off_wtau = -1, off_slo = -1, off_shi = -1;
    double obj_const = 0.0;  // dropped constants (data + RN)
    WhiteningMap whitening;  // map actually applied (identity when off)
    bool whitened = false;
};

MasterProblem assemble_master(const QuoteBook& book, const CollocationGrid& grid,
                              const DesignBlocks& blocks, const NoArbOperators& ops,
                              const RegularizerSet& regs, const MasterWeights& weights,
                              FitMode mode, const WhiteningMap* whitening = nullptr);

struct FitResult {
    Eigen::VectorXd a;  // raw (unwhitened) coefficients
    double coverage = 0.0;
    ViolationShares shares;
    double hinge = 0.0;
    double objective = 0.0;
    QpSolution sol;
    FitMode mode = FitMode::soft;
    bool whitened = false;
};

// Exact indicator mean of b <= A a <= ask (closed intervals).
double coverage_value(const Eigen::VectorXd& y_hat, const Eigen::VectorXd& b,
                      const Eigen::VectorXd& a);
// Hinge(a) = 1/2 sum dist(y_hat_i, [b_i, a_i])^2.
double hinge_total(const Eigen::VectorXd& y_hat, const Eigen::VectorXd& b,
                   const Eigen::VectorXd& a);

FitResult solve_master(const MasterProblem& prob, const QuoteBook& book,
                       const NoArbOperators& ops, const QpSolver& solver,
                       const QpSolution* warm = nullptr);

// ---- lambda_NA ladder -------------------------------------------------------

struct LadderResult {
    double lambda_na = 0.0;
    bool exhausted = false;  // no ladder value reached the 1% target
    std::vector<std::pair<double, double>> trail;  // (lambda, viol share)
};

// Probe grid for the ladder: every other strike node, coarser maturity grid.
CollocationGrid make_probe_grid(const WarpConfig& cfg, const BasisSpec& spec,
                                const ForwardCurve& fwd);
// Random quote subsample (keeps the attached design rows); deterministic.
QuoteBook subsample_book(const QuoteBook& book, double frac, std::uint64_t seed);

LadderResult select_lambda_na(const QuoteBook& probe_book, const CollocationGrid& probe_grid,
                              const DesignBlocks& probe_blocks, const NoArbOperators& probe_ops,
                              const RegularizerSet& regs, MasterWeights weights,
                              const QpSolver& solver, double viol_target = 0.01,
                              const std::vector<double>& ladder = {1, 2, 4, 8, 16, 32, 64, 128,
                                                                   256});

// ---- mu controller ----------------------------------------------------------

struct MuResult {
    double mu = 0.0;
    FitResult fit;
    bool target_reached = false;
    std::vector<std::pair<double, double>> trajectory;  // (mu, hinge at optimum)
};

MuResult mu_controller(const QuoteBook& book, const CollocationGrid& grid,
                       const DesignBlocks& blocks, const NoArbOperators& ops,
                       const RegularizerSet& regs, MasterWeights weights, FitMode mode,
                       const QpSolver& solver, double target_coverage = 0.99,
                       double mu_min = 1.0, double mu_max = 64.0, double expand = 4.0,
                       double mu_cap = 1e6, double ratio_tol = 1.1,
                       const WhiteningMap* whitening = nullptr);

// ---- metric projection view ---------------------------------------------------

struct MetricProjection {
    Eigen::MatrixXd M_h;
    Eigen::VectorXd b;
    Eigen::VectorXd a_hat;   // unconstrained optimum M_h^{-1} b
    Eigen::VectorXd a_star;  // hard-constrained optimum
    double kkt_residual = 0.0;

    // J(a) = 1/2 a^T M_h a - b^T a; the projection identity subtracts the
    // constant 1/2 a_hat^T M_h a_hat.
    double J(const Eigen::VectorXd& a) const { return 0.5 * a.dot(M_h * a) - b.dot(a); }
};

MetricProjection metric_projection_check(const QuoteBook& book, const CollocationGrid& grid,
                                         const DesignBlocks& blocks, const NoArbOperators& ops,
                                         const RegularizerSet& regs, const QpSolver& solver);

}  // namespace arbfit
