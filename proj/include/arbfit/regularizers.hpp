#pragma once

#include <Eigen/Dense>
#include <string>

#include "arbfit/grid_noarb.hpp"
#include "arbfit/quote_data.hpp"

namespace arbfit {

// A fixed quadratic penalty 1/2 a^T Q a + c^T a + constant.
struct QuadraticTerm {
    std::string name;
    Eigen::MatrixXd Q;
    Eigen::VectorXd c;
    double constant = 0.0;
};

// ---- Spectral ridge -------------------------------------------------------

struct RidgeSpec {
    double alpha = 1.0, beta = 1.0, s = 2.0;
    double lambda_ridge = 0.0;

    // Diagonal of Lambda: (1 + alpha k^2 + beta l^2)^s per column col(k,l).
    Eigen::VectorXd lambda_diag(const BasisSpec& spec) const;
};

QuadraticTerm ridge_quadratic(const BasisSpec& spec, const RidgeSpec& ridge);

// tr H(lambda) via the identity tr H = tr(S G(lambda)^-1), S = A^T W A,
// G = S + lambda Lambda.
double gcv_trace_hat(const Eigen::MatrixXd& A, const Eigen::VectorXd& w,
                     const Eigen::VectorXd& lambda_diag, double lambda);

struct GcvResult {
    double lambda = 0.0;
    std::vector<double> grid;    // candidate lambdas (log-spaced)
    std::vector<double> values;  // GCV(lambda) per candidate
};

// GCV pass on a random subsample of quotes; deterministic given seed.
GcvResult gcv_select_ridge(const QuoteBook& book, const BasisSpec& spec, const RidgeSpec& ridge,
                           double subsample_frac = 0.08, std::uint64_t seed = 0);

// ---- Whitening (Lambda-module) --------------------------------------------

struct WhiteningMap {
    Eigen::MatrixXd U;      // P x P, block diagonal per l-slice
    Eigen::MatrixXd U_inv;  // exact inverse of U
    bool rank_deficient = false;
    std::string warning;
};

WhiteningMap identity_whitening(int P);
// Per-slice thin QR of W^{1/2} A[:, G_l]; U blocks R_l^{-1}. Rank-deficient
// slices fall back to a symmetric SVD whitener with a floor and set warning.
WhiteningMap build_whitening(const QuoteBook& book, const BasisSpec& spec);

// ---- DW (H^-1) density smoothing ------------------------------------------

// Clenshaw-Curtis weights for the n Chebyshev-Lobatto points, ascending node
// order, scaled for an interval of length `length` (weights sum to length).
Eigen::VectorXd clenshaw_curtis_weights(int n, double length);

struct DwOperator {
    Eigen::MatrixXd L_m;    // n_m x n_m Neumann Laplacian (shared by slices)
    Eigen::VectorXd taper;  // per grid node: min(1, tau*/tau_g)
    double lambda_dw0 = 0.0;
    double tau_star = 0.0;
    Eigen::MatrixXd E;  // density evaluation operator (= A_KK), G x P
    QuadraticTerm term;

    // L_m^+ f on one slice (pseudo-inverse via rank-1 deflation).
    Eigen::VectorXd pinv_apply(const Eigen::VectorXd& f) const;

private:
    friend DwOperator build_dw(const CollocationGrid&, const DesignBlocks&, const WarpConfig&,
                               double, double);
    Eigen::LDLT<Eigen::MatrixXd> deflated_;  // factor of L_m + c 1 1^T
    double deflation_c_ = 1.0;
};

DwOperator build_dw(const CollocationGrid& grid, const DesignBlocks& blocks, const WarpConfig& cfg,
                    double lambda_dw0, double tau_star);

// ---- RN short-end anchor ---------------------------------------------------

struct RnSpec {
    double tau_star = 0.0;
    double lambda_rn = 0.0;
    double eta_rn = 0.0;
    bool p_even = false;  // parity projection; default off, never auto-enabled
};

struct RnTerms {
    std::vector<int> gamma;  // grid rows with tau_g <= tau*
    Eigen::VectorXd C0;      // intrinsic F_g (1 - e^m)_+ on gamma
    QuadraticTerm term;      // lambda A_G^T A_G + eta (A_taukK)_G^T (.)_G, c = -lambda A_G^T C0
};

RnTerms build_rn(const CollocationGrid& grid, const DesignBlocks& blocks,
                 const NoArbOperators& ops, const BasisSpec& basis, const RnSpec& spec);

// ---- Omega frequency taper and commutator hook -----------------------------

struct OmegaSpec {
    double tau_star = 0.0;
    double lambda_omega0 = 0.0;
    double lambda_hook = 0.0;
};

// Orthonormal DCT-II matrix of size n.
Eigen::MatrixXd dct2_orthonormal(int n);

struct OmegaHookTerms {
    Eigen::MatrixXd U_omega;   // P x P orthogonal separable DCT-II, rows = modes
    Eigen::VectorXd mask;      // 0/1 per mode: top-third m-frequencies
    double ramp_avg = 1.0;     // slice-averaged maturity ramp in [0,1]
    Eigen::MatrixXd C;         // G x G commutator of the scaled nodal operators
    QuadraticTerm omega;       // lambda_omega0 * ramp_avg * U^T M U
    QuadraticTerm hook;        // lambda_hook * (C A)^T (C A)
};

OmegaHookTerms build_omega_hook(const CollocationGrid& grid, const DesignBlocks& blocks,
                                const NoArbOperators& ops, const BasisSpec& spec,
                                const OmegaSpec& omega);

// Bundle used by the master QP assembly.
struct RegularizerSet {
    RidgeSpec ridge_spec;
    DwOperator dw;
    RnTerms rn;
    OmegaHookTerms omega_hook;
    std::vector<QuadraticTerm> terms;  // ridge, dw, rn, omega, hook (in order)
};

RegularizerSet assemble_quadratics(const CollocationGrid& grid, const DesignBlocks& blocks,
                                   const NoArbOperators& ops, const WarpConfig& cfg,
                                   const BasisSpec& spec, const RidgeSpec& ridge,
                                   double lambda_dw0, double tau_star, const RnSpec& rn,
                                   const OmegaSpec& omega);

}  // namespace arbfit
