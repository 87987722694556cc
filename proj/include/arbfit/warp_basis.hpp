#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

namespace arbfit {

// Coordinate warps and Chebyshev tensor design matrices.
//
// The strike coordinate is warped through an asinh map that compresses the
// tails, the maturity coordinate through a square-root map that concentrates
// resolution at the short end. Both send their physical interval onto [-1,1]
// exactly at the endpoints.

struct WarpConfig {
    double c_m = 0.0;       // asinh center (log-moneyness)
    double lambda_m = 1.0;  // tail compression, > 0
    double m_min = -1.0;
    double m_max = 1.0;
    double tau_min = 1.0 / 252.0;  // years, > 0
    double tau_max = 1.0;

    void validate() const;
};

struct BasisSpec {
    int K = 8;  // degree in m
    int L = 6;  // degree in tau

    int P() const { return (K + 1) * (L + 1); }
    // Column enumeration: l fastest within k.
    int col(int k, int l) const { return k * (L + 1) + l; }
};

struct WarpPointM {
    double x;    // warped coordinate in [-1,1]
    double dx;   // dPhi_m/dm
    double dxx;  // d2Phi_m/dm2
};

struct WarpPointTau {
    double y;   // warped coordinate in [-1,1]
    double dy;  // dPhi_tau/dtau
};

WarpPointM warp_m(double m, const WarpConfig& cfg);
WarpPointTau warp_tau(double tau, const WarpConfig& cfg);

// Inverse of the strike warp: x in [-1,1] -> m.
double warp_m_inverse(double x, const WarpConfig& cfg);

struct ChebValues {
    double T;    // T_k(x)
    double U;    // U_{k-1}(x); 0 for k = 0
    double dT;   // T'_k(x)
    double ddT;  // T''_k(x)
};

ChebValues cheb_eval(int k, double x);

// Evaluates T_0..T_K and first/second derivatives at x in one recurrence pass.
void cheb_all(int K, double x, std::vector<double>& T, std::vector<double>& dT,
              std::vector<double>& ddT);

struct DesignBlocks {
    Eigen::MatrixXd A;      // values
    Eigen::MatrixXd A_m;    // d/dm
    Eigen::MatrixXd A_mm;   // d2/dm2
    Eigen::MatrixXd A_tau;  // d/dtau
    std::vector<std::pair<double, double>> points;  // (m, tau)
};

DesignBlocks build_design(const std::vector<std::pair<double, double>>& points,
                          const WarpConfig& cfg, const BasisSpec& spec);

}  // namespace arbfit
