#include "arbfit/warp_basis.hpp"

#include <cmath>

namespace arbfit {

namespace {

// Endpoint switch for the second-derivative identity, which divides by 1-x^2.
constexpr double kEndpointTol = 1e-10;

}  // namespace

void WarpConfig::validate() const {
    if (!(m_min < m_max)) throw std::invalid_argument("warp: m_min must be < m_max");
    if (!(tau_min > 0.0 && tau_min < tau_max))
        throw std::invalid_argument("warp: need 0 < tau_min < tau_max");
    if (!(lambda_m > 0.0)) throw std::invalid_argument("warp: lambda_m must be > 0");
}

WarpPointM warp_m(double m, const WarpConfig& cfg) {
    if (!std::isfinite(m)) throw std::domain_error("warp_m: non-finite input");
    const double lam = cfg.lambda_m;
    const double phi_lo = std::asinh(lam * (cfg.m_min - cfg.c_m));
    const double phi_hi = std::asinh(lam * (cfg.m_max - cfg.c_m));
    const double W = phi_hi - phi_lo;
    const double z = lam * (m - cfg.c_m);
    const double root = std::sqrt(1.0 + z * z);
    WarpPointM p;
    p.x = 2.0 * (std::asinh(z) - phi_lo) / W - 1.0;
    p.dx = (2.0 * lam / W) / root;
    p.dxx = -(2.0 * lam * lam * lam / W) * (m - cfg.c_m) / (root * root * root);
    return p;
}

double warp_m_inverse(double x, const WarpConfig& cfg) {
    const double lam = cfg.lambda_m;
    const double phi_lo = std::asinh(lam * (cfg.m_min - cfg.c_m));
    const double phi_hi = std::asinh(lam * (cfg.m_max - cfg.c_m));
    const double W = phi_hi - phi_lo;
    return cfg.c_m + std::sinh(0.5 * W * (x + 1.0) + phi_lo) / lam;
}

WarpPointTau warp_tau(double tau, const WarpConfig& cfg) {
    if (!std::isfinite(tau)) throw std::domain_error("warp_tau: non-finite input");
    if (tau < cfg.tau_min - 1e-14) throw std::domain_error("warp_tau: tau below tau_min");
    if (tau > cfg.tau_max + 1e-12) throw std::domain_error("warp_tau: tau above tau_max");
    const double dtau = cfg.tau_max - cfg.tau_min;
    const double s = std::min(std::max((tau - cfg.tau_min) / dtau, 0.0), 1.0);
    WarpPointTau p;
    p.y = 2.0 * std::sqrt(s) - 1.0;
    // Guarded at the left endpoint; the derivative is singular there and a
    // node is never placed on it, but clamped quotes may touch it.
    p.dy = 1.0 / std::sqrt(dtau * std::max(tau - cfg.tau_min, 1e-12));
    return p;
}

void cheb_all(int K, double x, std::vector<double>& T, std::vector<double>& dT,
              std::vector<double>& ddT) {
    if (std::abs(x) > 1.0 + 1e-12) throw std::domain_error("cheb: |x| > 1");
    x = std::min(1.0, std::max(-1.0, x));
    T.assign(K + 1, 0.0);
    dT.assign(K + 1, 0.0);
    ddT.assign(K + 1, 0.0);
    // U_{k-1} alongside T_k; T'_k = k U_{k-1}.
    std::vector<double> U(K + 1, 0.0);  // U[k] = U_{k-1}(x)
    T[0] = 1.0;
    if (K >= 1) {
        T[1] = x;
        U[1] = 1.0;
    }
    for (int k = 2; k <= K; ++k) {
        T[k] = 2.0 * x * T[k - 1] - T[k - 2];
        U[k] = 2.0 * x * U[k - 1] - U[k - 2];
    }
    const double one_minus_x2 = 1.0 - x * x;
    const bool at_end = std::abs(one_minus_x2) < kEndpointTol;
    for (int k = 1; k <= K; ++k) {
        dT[k] = k * U[k];
        if (at_end) {
            const double v = double(k) * k * (double(k) * k - 1.0) / 3.0;
            ddT[k] = (x > 0.0) ? v : ((k % 2 == 0) ? v : -v);
        } else {
            ddT[k] = (x * k * U[k] - double(k) * k * T[k]) / one_minus_x2;
        }
    }
}

ChebValues cheb_eval(int k, double x) {
    std::vector<double> T, dT, ddT;
    cheb_all(k, x, T, dT, ddT);
    ChebValues v;
    v.T = T[k];
    v.dT = dT[k];
    v.ddT = ddT[k];
    v.U = (k >= 1) ? dT[k] / k : 0.0;
    return v;
}

DesignBlocks build_design(const std::vector<std::pair<double, double>>& points,
                          const WarpConfig& cfg, const BasisSpec& spec) {
    cfg.validate();
    const int N = static_cast<int>(points.size());
    const int P = spec.P();
    DesignBlocks b;
    b.points = points;
    b.A.resize(N, P);
    b.A_m.resize(N, P);
    b.A_mm.resize(N, P);
    b.A_tau.resize(N, P);

    std::vector<double> Tx, dTx, ddTx, Ty, dTy, ddTy;
    for (int i = 0; i < N; ++i) {
        WarpPointM wm;
        WarpPointTau wt;
        try {
            wm = warp_m(points[i].first, cfg);
            wt = warp_tau(points[i].second, cfg);
        } catch (const std::domain_error& e) {
            throw std::domain_error("build_design row " + std::to_string(i) + ": " + e.what());
        }
        cheb_all(spec.K, wm.x, Tx, dTx, ddTx);
        cheb_all(spec.L, wt.y, Ty, dTy, ddTy);
        for (int k = 0; k <= spec.K; ++k) {
            for (int l = 0; l <= spec.L; ++l) {
                const int c = spec.col(k, l);
                b.A(i, c) = Tx[k] * Ty[l];
                const double dxA = dTx[k] * Ty[l];
                const double dxxA = ddTx[k] * Ty[l];
                const double dyA = Tx[k] * dTy[l];
                b.A_m(i, c) = wm.dx * dxA;
                b.A_mm(i, c) = wm.dx * wm.dx * dxxA + wm.dxx * dxA;
                b.A_tau(i, c) = wt.dy * dyA;
            }
        }
    }
    return b;
}

}  // namespace arbfit
