#include "arbfit/grid_noarb.hpp"

#include <algorithm>
#include <cmath>

namespace arbfit {

ForwardCurve::ForwardCurve(std::function<double(double)> f) : f_(std::move(f)) {}

ForwardCurve::ForwardCurve(std::vector<double> taus, std::vector<double> forwards)
    : taus_(std::move(taus)), pillars_(true) {
    if (taus_.size() < 2 || taus_.size() != forwards.size())
        throw std::invalid_argument("forward pillars: need >= 2 matching points");
    logF_.resize(taus_.size());
    for (size_t i = 0; i < taus_.size(); ++i) {
        if (forwards[i] <= 0.0) throw std::invalid_argument("forward pillars: F must be > 0");
        if (i > 0 && taus_[i] <= taus_[i - 1])
            throw std::invalid_argument("forward pillars: tau must be strictly increasing");
        logF_[i] = std::log(forwards[i]);
    }
    // Fritsch-Carlson monotone cubic slopes on log F.
    const size_t n = taus_.size();
    std::vector<double> d(n - 1);
    for (size_t i = 0; i + 1 < n; ++i) d[i] = (logF_[i + 1] - logF_[i]) / (taus_[i + 1] - taus_[i]);
    slope_.resize(n);
    slope_[0] = d[0];
    slope_[n - 1] = d[n - 2];
    for (size_t i = 1; i + 1 < n; ++i) {
        if (d[i - 1] * d[i] <= 0.0) {
            slope_[i] = 0.0;
        } else {
            const double w1 = 2.0 * (taus_[i + 1] - taus_[i]) + (taus_[i] - taus_[i - 1]);
            const double w2 = (taus_[i + 1] - taus_[i]) + 2.0 * (taus_[i] - taus_[i - 1]);
            slope_[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
        }
    }
}

ForwardCurve ForwardCurve::constant_carry(double F0, double r) {
    if (F0 <= 0.0) throw std::invalid_argument("forward: F0 must be > 0");
    return ForwardCurve([F0, r](double tau) { return F0 * std::exp(r * tau); });
}

double ForwardCurve::log_interp(double tau, double* deriv) const {
    const size_t n = taus_.size();
    size_t i = 0;
    if (tau <= taus_.front()) {
        i = 0;
    } else if (tau >= taus_.back()) {
        i = n - 2;
    } else {
        i = std::upper_bound(taus_.begin(), taus_.end(), tau) - taus_.begin() - 1;
    }
    const double h = taus_[i + 1] - taus_[i];
    const double t = (tau - taus_[i]) / h;
    const double y0 = logF_[i], y1 = logF_[i + 1];
    const double s0 = slope_[i] * h, s1 = slope_[i + 1] * h;
    const double h00 = (1 + 2 * t) * (1 - t) * (1 - t);
    const double h10 = t * (1 - t) * (1 - t);
    const double h01 = t * t * (3 - 2 * t);
    const double h11 = t * t * (t - 1);
    if (deriv) {
        const double dh00 = 6 * t * (t - 1);
        const double dh10 = (1 - t) * (1 - 3 * t);
        const double dh01 = -dh00;
        const double dh11 = t * (3 * t - 2);
        *deriv = (dh00 * y0 + dh10 * s0 + dh01 * y1 + dh11 * s1) / h;
    }
    return h00 * y0 + h10 * s0 + h01 * y1 + h11 * s1;
}

double ForwardCurve::F(double tau) const {
    if (pillars_) return std::exp(log_interp(tau, nullptr));
    const double v = f_(tau);
    if (!(v > 0.0)) throw std::runtime_error("forward curve returned non-positive value");
    return v;
}

double ForwardCurve::rho(double tau) const {
    if (pillars_) {
        double d = 0.0;
        log_interp(tau, &d);
        return d;
    }
    const double h = 1e-5;
    return (std::log(f_(tau + h)) - std::log(f_(std::max(tau - h, 1e-8)))) /
           (tau + h - std::max(tau - h, 1e-8));
}

CollocationGrid make_grid(const WarpConfig& cfg, const BasisSpec& spec, const ForwardCurve& fwd,
                          int n_m_override, int n_tau_override) {
    cfg.validate();
    CollocationGrid grid;
    grid.n_m = n_m_override > 0 ? n_m_override : 2 * spec.K;
    grid.n_tau = n_tau_override > 0 ? n_tau_override : 2 * spec.L;
    if (grid.n_m < 2 || grid.n_tau < 1) throw std::invalid_argument("make_grid: grid too small");

    // Chebyshev-Lobatto nodes in the warped coordinate, mapped back to m.
    grid.m_nodes.resize(grid.n_m);
    for (int i = 0; i < grid.n_m; ++i) {
        const double x = std::cos(double(grid.n_m - 1 - i) * M_PI / double(grid.n_m - 1));
        grid.m_nodes[i] = warp_m_inverse(x, cfg);
    }
    // Uniform tau nodes on cell midpoints; keeps the sqrt-warp derivative
    // finite on every node.
    grid.tau_nodes.resize(grid.n_tau);
    const double dtau = (cfg.tau_max - cfg.tau_min) / grid.n_tau;
    for (int j = 0; j < grid.n_tau; ++j)
        grid.tau_nodes[j] = cfg.tau_min + (j + 0.5) * dtau;

    const int G = grid.G();
    grid.nodes.resize(G);
    grid.F.resize(G);
    grid.Kstrike.resize(G);
    grid.rho.resize(G);
    for (int j = 0; j < grid.n_tau; ++j) {
        const double tau = grid.tau_nodes[j];
        const double Fj = fwd.F(tau);
        if (!(Fj > 0.0)) throw std::runtime_error("make_grid: non-positive forward");
        const double rhoj = fwd.rho(tau);
        for (int i = 0; i < grid.n_m; ++i) {
            const int g = grid.g(i, j);
            grid.nodes[g] = {grid.m_nodes[i], tau};
            grid.F(g) = Fj;
            grid.Kstrike(g) = Fj * std::exp(grid.m_nodes[i]);
            grid.rho(g) = rhoj;
        }
    }
    return grid;
}

double quantile_linear(std::vector<double> v, double p) {
    if (v.empty()) throw std::invalid_argument("quantile of empty vector");
    std::sort(v.begin(), v.end());
    const double h = (v.size() - 1) * std::min(std::max(p, 0.0), 1.0);
    const size_t i = static_cast<size_t>(h);
    if (i + 1 >= v.size()) return v.back();
    return v[i] + (h - i) * (v[i + 1] - v[i]);
}

namespace {

double p95_row_scale(const Eigen::MatrixXd& B) {
    std::vector<double> norms(B.rows());
    for (int r = 0; r < B.rows(); ++r) norms[r] = B.row(r).norm();
    const double s = quantile_linear(std::move(norms), 0.95);
    if (!(s > 0.0)) throw std::runtime_error("block scale: zero p95 row norm");
    return s;
}

}  // namespace

NoArbOperators build_noarb_ops(const CollocationGrid& grid, const DesignBlocks& blocks,
                               double convexity_boost) {
    const int G = grid.G();
    if (blocks.A.rows() != G) throw std::invalid_argument("build_noarb_ops: row count mismatch");
    if ((grid.Kstrike.array() <= 0.0).any())
        throw std::runtime_error("build_noarb_ops: zero strike");

    NoArbOperators ops;
    const Eigen::ArrayXd invK = grid.Kstrike.array().inverse();
    ops.A_K = invK.matrix().asDiagonal() * blocks.A_m;
    ops.A_KK = (invK * invK).matrix().asDiagonal() * (blocks.A_mm - blocks.A_m);
    ops.A_taukK = blocks.A_tau - grid.rho.asDiagonal() * blocks.A_m;

    // One scalar per block: p95 of row l2 norms of B1 = A_K, B2 = -A_KK,
    // B3 = -A_{tau|K} (norms are sign-invariant).
    ops.s_K = p95_row_scale(ops.A_K);
    ops.s_KK = p95_row_scale(ops.A_KK);
    ops.s_tau = p95_row_scale(ops.A_taukK);
    ops.At_K = ops.A_K / ops.s_K;
    ops.At_KK = (ops.A_KK / ops.s_KK) * convexity_boost;
    ops.At_taukK = ops.A_taukK / ops.s_tau;
    return ops;
}

ViolationShares violation_shares(const Eigen::VectorXd& a, const NoArbOperators& ops,
                                 double tol) {
    const int G = static_cast<int>(ops.A_K.rows());
    ViolationShares s;
    const Eigen::VectorXd vK = ops.At_K * a;
    const Eigen::VectorXd vKK = -(ops.At_KK * a);
    const Eigen::VectorXd vcal = -(ops.At_taukK * a);
    const Eigen::VectorXd uK = ops.A_K * a;
    const Eigen::VectorXd uKK = -(ops.A_KK * a);
    const Eigen::VectorXd ucal = -(ops.A_taukK * a);
    for (int g = 0; g < G; ++g) {
        if (vK(g) > tol) s.share_K += 1.0;
        if (vKK(g) > tol) s.share_KK += 1.0;
        if (vcal(g) > tol) s.share_cal += 1.0;
        if (uK(g) > tol) s.unscaled_K += 1.0;
        if (uKK(g) > tol) s.unscaled_KK += 1.0;
        if (ucal(g) > tol) s.unscaled_cal += 1.0;
    }
    s.share_total = (s.share_K + s.share_KK + s.share_cal) / (3.0 * G);
    s.unscaled_total = (s.unscaled_K + s.unscaled_KK + s.unscaled_cal) / (3.0 * G);
    s.share_K /= G;
    s.share_KK /= G;
    s.share_cal /= G;
    s.unscaled_K /= G;
    s.unscaled_KK /= G;
    s.unscaled_cal /= G;
    return s;
}

namespace {

// Linear interpolation weights in m on slice j at target moneyness mt;
// clamped to the nearest node outside the covered range.
void interp_weights(const CollocationGrid& grid, double mt, int& i0, double& w0, int& i1,
                    double& w1) {
    const auto& m = grid.m_nodes;
    if (mt <= m.front()) {
        i0 = i1 = 0;
        w0 = 1.0;
        w1 = 0.0;
        return;
    }
    if (mt >= m.back()) {
        i0 = i1 = static_cast<int>(m.size()) - 1;
        w0 = 1.0;
        w1 = 0.0;
        return;
    }
    int k = static_cast<int>(std::upper_bound(m.begin(), m.end(), mt) - m.begin()) - 1;
    i0 = k;
    i1 = k + 1;
    const double t = (mt - m[k]) / (m[k + 1] - m[k]);
    w0 = 1.0 - t;
    w1 = t;
}

}  // namespace

Eigen::SparseMatrix<double> nodal_strike_derivative(const CollocationGrid& grid) {
    std::vector<Eigen::Triplet<double>> trips;
    for (int j = 0; j < grid.n_tau; ++j) {
        for (int i = 0; i < grid.n_m; ++i) {
            const int g = grid.g(i, j);
            if (i == 0) {
                const double h = grid.Kstrike(grid.g(1, j)) - grid.Kstrike(g);
                trips.emplace_back(g, g, -1.0 / h);
                trips.emplace_back(g, grid.g(1, j), 1.0 / h);
            } else if (i == grid.n_m - 1) {
                const double h = grid.Kstrike(g) - grid.Kstrike(grid.g(i - 1, j));
                trips.emplace_back(g, grid.g(i - 1, j), -1.0 / h);
                trips.emplace_back(g, g, 1.0 / h);
            } else {
                const double hm = grid.Kstrike(g) - grid.Kstrike(grid.g(i - 1, j));
                const double hp = grid.Kstrike(grid.g(i + 1, j)) - grid.Kstrike(g);
                trips.emplace_back(g, grid.g(i - 1, j), -hp / (hm * (hm + hp)));
                trips.emplace_back(g, g, (hp - hm) / (hm * hp));
                trips.emplace_back(g, grid.g(i + 1, j), hm / (hp * (hm + hp)));
            }
        }
    }
    Eigen::SparseMatrix<double> D(grid.G(), grid.G());
    D.setFromTriplets(trips.begin(), trips.end());
    return D;
}

Eigen::SparseMatrix<double> nodal_strike_second(const CollocationGrid& grid) {
    std::vector<Eigen::Triplet<double>> trips;
    for (int j = 0; j < grid.n_tau; ++j) {
        for (int i = 1; i + 1 < grid.n_m; ++i) {
            const int g = grid.g(i, j);
            const double hm = grid.Kstrike(g) - grid.Kstrike(grid.g(i - 1, j));
            const double hp = grid.Kstrike(grid.g(i + 1, j)) - grid.Kstrike(g);
            trips.emplace_back(g, grid.g(i - 1, j), 2.0 / (hm * (hm + hp)));
            trips.emplace_back(g, g, -2.0 / (hm * hp));
            trips.emplace_back(g, grid.g(i + 1, j), 2.0 / (hp * (hm + hp)));
        }
    }
    Eigen::SparseMatrix<double> D(grid.G(), grid.G());
    D.setFromTriplets(trips.begin(), trips.end());
    return D;
}

Eigen::SparseMatrix<double> nodal_calendar_derivative(const CollocationGrid& grid) {
    std::vector<Eigen::Triplet<double>> trips;
    for (int j = 0; j < grid.n_tau; ++j) {
        const bool last = (j == grid.n_tau - 1);
        const int jo = last ? j - 1 : j + 1;  // other slice
        if (jo < 0) continue;  // single-slice grid: leave rows zero
        const double dtau = grid.tau_nodes[last ? j : jo] - grid.tau_nodes[last ? jo : j];
        const double Fj = grid.F(grid.g(0, j)), Fo = grid.F(grid.g(0, jo));
        for (int i = 0; i < grid.n_m; ++i) {
            const int g = grid.g(i, j);
            // Hold K fixed: on the other slice the same strike sits at
            // m' = m_i + log(F_j / F_other).
            const double mt = grid.m_nodes[i] + std::log(Fj / Fo);
            int i0, i1;
            double w0, w1;
            interp_weights(grid, mt, i0, w0, i1, w1);
            const double sgn = last ? -1.0 : 1.0;
            trips.emplace_back(g, g, -sgn / dtau);
            trips.emplace_back(g, grid.g(i0, jo), sgn * w0 / dtau);
            if (w1 != 0.0) trips.emplace_back(g, grid.g(i1, jo), sgn * w1 / dtau);
        }
    }
    Eigen::SparseMatrix<double> D(grid.G(), grid.G());
    D.setFromTriplets(trips.begin(), trips.end());
    return D;
}

}  // namespace arbfit
