#pragma once

#include <Eigen/Sparse>
#include <functional>
#include <optional>

#include "arbfit/warp_basis.hpp"

namespace arbfit {

// Forward curve tau -> F(tau) with carry slope rho(tau) = d/dtau log F(tau).
// Closed-form curves are differentiated by central differences (h = 1e-5y);
// pillar curves interpolate log F with a monotone cubic and differentiate it
// analytically.
class ForwardCurve {
public:
    // Closed-form functor.
    explicit ForwardCurve(std::function<double(double)> f);
    // Discrete pillars (tau, F), tau strictly increasing.
    ForwardCurve(std::vector<double> taus, std::vector<double> forwards);

    static ForwardCurve constant_carry(double F0, double r);

    double F(double tau) const;
    double rho(double tau) const;

private:
    std::function<double(double)> f_;
    // Pillar representation in log space (Fritsch-Carlson slopes).
    std::vector<double> taus_, logF_, slope_;
    bool pillars_ = false;
    double log_interp(double tau, double* deriv) const;
};

struct CollocationGrid {
    int n_m = 0, n_tau = 0;
    std::vector<double> m_nodes;    // ascending
    std::vector<double> tau_nodes;  // ascending
    // Flattened enumeration g = j * n_m + i (strike index i fastest).
    std::vector<std::pair<double, double>> nodes;  // (m_g, tau_g)
    Eigen::VectorXd F;                             // forwards F_g
    Eigen::VectorXd Kstrike;                       // K_g = F_g * exp(m_g)
    Eigen::VectorXd rho;                           // carry slope at tau_g

    int G() const { return n_m * n_tau; }
    int g(int i, int j) const { return j * n_m + i; }
};

CollocationGrid make_grid(const WarpConfig& cfg, const BasisSpec& spec, const ForwardCurve& fwd,
                          int n_m_override = 0, int n_tau_override = 0);

struct NoArbOperators {
    Eigen::MatrixXd A_K;      // diag(K)^-1 A_m
    Eigen::MatrixXd A_KK;     // diag(K)^-2 (A_mm - A_m)
    Eigen::MatrixXd A_taukK;  // A_tau - diag(rho) A_m
    double s_K = 1.0, s_KK = 1.0, s_tau = 1.0;  // p95 row-norm block scales
    Eigen::MatrixXd At_K, At_KK, At_taukK;      // scaled copies A_* / s_*
};

// Blocks must be evaluated exactly at the grid nodes. The optional convexity
// boost multiplies the scaled convexity block.
NoArbOperators build_noarb_ops(const CollocationGrid& grid, const DesignBlocks& blocks,
                               double convexity_boost = 1.0);

// Linear-interpolation quantile between order statistics.
double quantile_linear(std::vector<double> v, double p);

struct ViolationShares {
    double share_K = 0.0, share_KK = 0.0, share_cal = 0.0, share_total = 0.0;
    // Same indicators evaluated on the unscaled physical operators.
    double unscaled_K = 0.0, unscaled_KK = 0.0, unscaled_cal = 0.0, unscaled_total = 0.0;
};

ViolationShares violation_shares(const Eigen::VectorXd& a, const NoArbOperators& ops,
                                 double tol = 1e-8);

// Nodal finite-difference operators on the collocation grid (G x G, local
// stencils). Used by the commutator hook and the post-fit layer.
//
// d/dK within a maturity slice: nonuniform 3-point central in the interior,
// one-sided 2-point at slice edges.
Eigen::SparseMatrix<double> nodal_strike_derivative(const CollocationGrid& grid);
// d^2/dK^2 within a slice: nonuniform 3-point, interior rows only (edge rows
// zero).
Eigen::SparseMatrix<double> nodal_strike_second(const CollocationGrid& grid);
// d/dtau at fixed strike K: forward difference to the next slice with linear
// interpolation in m (stencil width <= 3); backward difference on the last
// slice.
Eigen::SparseMatrix<double> nodal_calendar_derivative(const CollocationGrid& grid);

}  // namespace arbfit
