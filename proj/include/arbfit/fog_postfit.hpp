#pragma once

#include "arbfit/grid_noarb.hpp"
#include "arbfit/qp_core.hpp"
#include "arbfit/quote_data.hpp"

namespace arbfit {

// Local post-fit layer: detect badly fit / fragile regions of the baseline
// nodal surface, and repair them patch by patch with a fog-regularized convex
// program while preserving static no-arbitrage on the assembled grid.

struct NodalSurface {
    int n_m = 0, n_tau = 0;
    Eigen::VectorXd u;  // size G, enumeration g = j * n_m + i
};

// ---- Nodal no-arbitrage polyhedron -----------------------------------------

// All discrete static no-arbitrage conditions on the nodal grid as one stacked
// system L u <= r. Row families in order: bounds (lower then upper per node),
// strike monotonicity, strike convexity (interior nodes, nonuniform stencil),
// calendar at fixed strike.
struct NodalNoArbSystem {
    Eigen::SparseMatrix<double> L;
    Eigen::VectorXd r;
    int n_bnd = 0, n_mono = 0, n_conv = 0, n_cal = 0;
    Eigen::SparseMatrix<double> A_cal;  // nodal fixed-strike calendar operator
    Eigen::SparseMatrix<double> D2;     // nodal strike second derivative (density map)

    int rows() const { return static_cast<int>(r.size()); }
};

NodalNoArbSystem build_nodal_system(const CollocationGrid& grid);

// True iff u satisfies every inequality with slack tolerance tol.
bool in_cglob(const NodalNoArbSystem& sys, const Eigen::VectorXd& u, double tol = 1e-9);

// Euclidean projection onto the no-arbitrage polyhedron:
// min ||u - u0||^2 s.t. L u <= r.
Eigen::VectorXd project_to_cglob(const NodalNoArbSystem& sys, const Eigen::VectorXd& u0,
                                 const QpSolver& solver);

// ---- Badness field ----------------------------------------------------------

// Bilinear interpolation rows from nodal values to the given locations.
// Locations outside the grid hull get an all-zero row and their index is
// appended to `outside` when provided.
Eigen::SparseMatrix<double> bilinear_sampler(const CollocationGrid& grid,
                                             const std::vector<std::pair<double, double>>& locs,
                                             std::vector<int>* outside = nullptr);

// Zero-padded 1D convolution with a centered odd-length kernel.
Eigen::VectorXd convolve1d(const Eigen::VectorXd& x, const Eigen::VectorXd& kernel);
// Truncated (3 sigma) normalized Gaussian kernel, odd length.
Eigen::VectorXd gaussian_kernel(double sigma);

struct BadnessParams {
    double alpha_band = 0.0;   // 0 -> 1 / median band width
    double alpha_noarb = 0.0;  // 0 -> 1 / median forward
    double sigma = 1.5;        // kernel width in grid cells
    double theta = 0.2;        // patch threshold
    int adjacency = 8;         // 4 or 8
};

struct BadnessField {
    Eigen::VectorXd w_band;   // transported band misfit
    Eigen::VectorXd w_noarb;  // max of the four nodal defect fields
    Eigen::VectorXd w_raw;    // alpha_band * w_band + alpha_noarb * w_noarb
    Eigen::VectorXd w;        // smoothed and clipped to [0,1]
    std::vector<int> excluded_quotes;
};

BadnessField badness_map(const NodalSurface& u0, const QuoteBook& book,
                         const CollocationGrid& grid, const NodalNoArbSystem& sys,
                         const BadnessParams& params);

// ---- Patch decomposition ----------------------------------------------------

struct Patch {
    std::vector<int> nodes;  // sorted grid indices of Omega
    std::vector<int> rows;   // global constraint rows whose support meets Omega
    Eigen::MatrixXd A;       // those rows restricted to Omega, a_alpha = P_Omega l_alpha
    Eigen::VectorXd b;       // r_alpha - l_alpha^T u0_off (off-patch baseline frozen)
    Eigen::VectorXd u0;      // baseline values on Omega
    bool feasible = true;
    std::string note;
};

// Connected components of {w > theta}, each dilated by the minimal halo that
// absorbs the constraint supports straddling its boundary, merged whenever two
// patches share a node or a constraint row (so every constraint involves at
// most one patch), feasibility-checked via a QP. Infeasible patches are
// returned with feasible = false and skipped downstream.
std::vector<Patch> decompose_patches(const BadnessField& bad, const CollocationGrid& grid,
                                     const NodalNoArbSystem& sys, const NodalSurface& u0,
                                     const BadnessParams& params, const QpSolver& solver);

// ---- Fog lattice ------------------------------------------------------------

struct FogParams {
    int n_u = 21;
    double kappa_m = 1.0, kappa_tau = 1.0, kappa_u = 1.0;
    double alpha_band = 0.0;       // 0 -> 1 / median band width
    double alpha_range_mult = 10.0;  // alpha_range = mult * alpha_band
    double eps = 1e-3;
    double lambda_noise = 1.0;
    double lambda_cl = 1.0;
    double lambda_surf = 0.1;
    double lambda_pi = 1.0;
};

struct FogState {
    Eigen::VectorXd levels;  // strictly increasing price levels u_k
    Eigen::SparseMatrix<double> Dm, Dt, Du;  // signed incidence gradients
    Eigen::SparseMatrix<double> L;           // kappa-weighted graph Laplacian
    Eigen::VectorXd V;                       // band + range potential
    Eigen::MatrixXd H;                       // L + diag(V)
    std::vector<int> quote_ids;   // indices into book.quotes of on-patch quotes
    std::vector<int> rep;         // per quote: position of its node in patch.nodes
    Eigen::SparseMatrix<double> S_rows;  // bilinear rows over the full grid per quote
    int n_u = 0;

    int lattice_size() const { return static_cast<int>(V.size()); }
    // Lattice enumeration: node position * n_u + level.
    int idx(int node_pos, int k) const { return node_pos * n_u + k; }
    // Out-of-band selector c_q for quote slot qi.
    Eigen::VectorXd out_selector(int qi, const QuoteBook& book) const;
};

FogState build_fog(const Patch& patch, const QuoteBook& book, const CollocationGrid& grid,
                   const FogParams& params);

// ---- Patch energy -----------------------------------------------------------

// Precomputed quadratic pieces of the surface terms on one patch.
struct PatchEnergy {
    Eigen::MatrixXd B;        // influence-restricted density map of the interior
    Eigen::VectorXd rho_off;  // off-patch density contribution
    Eigen::MatrixXd H_rho;    // PSD smoother on the influence rows
    Eigen::MatrixXd Q_rho;    // B^T H_rho B
    Eigen::VectorXd c_rho;    // B^T H_rho rho_off
    double c0 = 0.0;
};

PatchEnergy build_patch_energy(const Patch& patch, const CollocationGrid& grid,
                               const NodalNoArbSystem& sys, const NodalSurface& u0);

struct QuoteTerm {
    double d = 0.0;    // band violation
    double nu = 0.0;   // eps + out-of-band fog mass
    double phi = 0.0;  // d^2 / nu + lambda_noise * nu
};

struct EnergyBreakdown {
    std::vector<QuoteTerm> terms;
    double e_cl = 0.0, e_surf = 0.0, e_ham = 0.0;
    double J = 0.0;
};

EnergyBreakdown noise_band_terms(const Eigen::VectorXd& u_interior, const Eigen::VectorXd& pi,
                                 const Patch& patch, const FogState& fog,
                                 const PatchEnergy& energy, const QuoteBook& book,
                                 const NodalSurface& u0, const FogParams& params);

// Exact Euclidean projection onto the probability simplex.
Eigen::VectorXd simplex_projection(const Eigen::VectorXd& v);

// ---- Patch solver -----------------------------------------------------------

struct PatchSolution {
    Eigen::VectorXd u;   // interior optimum on patch.nodes
    Eigen::VectorXd pi;  // fog optimum
    std::vector<double> J_trail;
    std::vector<QuoteTerm> quote_terms;
    double pg_residual = 0.0;  // joint first-order residual at exit
    int outer_iters = 0;
    bool converged = false;
};

PatchSolution solve_patch(const Patch& patch, const FogState& fog, const PatchEnergy& energy,
                          const QuoteBook& book, const NodalSurface& u0,
                          const FogParams& params, const QpSolver& solver);

// ---- Global reassembly ------------------------------------------------------

struct GlobalPostFit {
    NodalSurface u_star;
    bool baseline_ok = true;   // baseline was inside the polyhedron
    bool verified = false;     // all inequalities pass on the assembled surface
    double max_violation = 0.0;
    std::string note;
};

GlobalPostFit assemble_global(const NodalSurface& u0, const CollocationGrid& grid,
                              const NodalNoArbSystem& sys, const std::vector<Patch>& patches,
                              const std::vector<PatchSolution>& solutions, double tol = 1e-9);

}  // namespace arbfit
