#include "arbfit/diagnostics.hpp"

#include <cmath>

namespace arbfit {

Eigen::VectorXd hi_freq_mask(const BasisSpec& spec) {
    Eigen::VectorXd mask = Eigen::VectorXd::Zero(spec.P());
    for (int p = 0; p <= spec.K; ++p)
        for (int q = 0; q <= spec.L; ++q)
            if (3 * p > 2 * spec.K || 3 * q > 2 * spec.L) mask(spec.col(p, q)) = 1.0;
    return mask;
}

MonitorReport monitor(const FitResult& fit, const CollocationGrid& grid,
                      const DesignBlocks& blocks, const NoArbOperators& ops,
                      const RegularizerSet& regs, const WarpConfig& cfg, const BasisSpec& spec,
                      double delta_tau) {
    MonitorReport rep;
    const Eigen::VectorXd& a = fit.a;
    const Eigen::VectorXd surface = blocks.A * a;

    // Short-end anchor residual on the rows below tau*.
    double rn2 = 0.0;
    for (std::size_t k = 0; k < regs.rn.gamma.size(); ++k) {
        const double r = surface(regs.rn.gamma[k]) - regs.rn.C0(static_cast<int>(k));
        rn2 += r * r;
    }
    rep.rn_residual = std::sqrt(rn2);

    rep.hook_norm = (regs.omega_hook.C * surface).norm();

    // Modal energy split in the frequency chart of the taper module.
    const Eigen::VectorXd ahat = regs.omega_hook.U_omega * a;
    const double total = ahat.squaredNorm();
    rep.hi_freq_share =
        total > 0.0 ? hi_freq_mask(spec).cwiseProduct(ahat).squaredNorm() / total : 0.0;

    // Calendar-transport defect: shift every interior node one step in tau and
    // compare against the linearized forward drift.
    std::vector<std::pair<double, double>> shifted;
    std::vector<int> rows;
    for (int g = 0; g < grid.G(); ++g) {
        const double tau = grid.nodes[g].second + delta_tau;
        if (tau <= cfg.tau_max) {
            shifted.push_back({grid.nodes[g].first, tau});
            rows.push_back(g);
        }
    }
    if (!rows.empty()) {
        const auto shifted_blocks = build_design(shifted, cfg, spec);
        const Eigen::VectorXd drift = ops.A_taukK * a;
        double d2 = 0.0, base2 = 0.0;
        for (std::size_t k = 0; k < rows.size(); ++k) {
            const int g = rows[k];
            const double d = (shifted_blocks.A.row(static_cast<int>(k)).dot(a) - surface(g)) -
                             delta_tau * drift(g);
            d2 += d * d;
            base2 += surface(g) * surface(g);
        }
        rep.egorov_abs = std::sqrt(d2);
        rep.egorov_rel = base2 > 0.0 ? rep.egorov_abs / std::sqrt(base2) : 0.0;
    }

    rep.coverage = fit.coverage;
    rep.shares = fit.shares;
    return rep;
}

}  // namespace arbfit
