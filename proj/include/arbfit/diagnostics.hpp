#pragma once

#include <optional>

#include "arbfit/global_fit.hpp"

namespace arbfit {

// Post-fit structure monitors. All quantities are pure functions of a
// completed fit and the precomputed operators; nothing here feeds back into
// the optimization.
struct MonitorReport {
    double rn_residual = 0.0;    // ||A a - C_intrinsic||_2 on the short-end rows
    double hook_norm = 0.0;      // ||C (A a)||_2, commutator defect on the grid
    double hi_freq_share = 0.0;  // modal energy share of the upper-third modes, in [0,1]
    double egorov_abs = 0.0;     // ||(A(tau+dt) - A(tau)) a - dt A_{tau|K} a||_2
    double egorov_rel = 0.0;     // egorov_abs / ||A(tau) a||_2 on the same rows
    double coverage = 0.0;
    ViolationShares shares;
    // Whitening-based stepper monitor is out of scope; kept as an always-null
    // field so the report schema stays stable.
    std::optional<double> mon1;
};

// 0/1 mask over the frequency chart: mode (p, q) is "high" when p > 2K/3 or
// q > 2L/3, so coefficient vectors supported on the lower third in both
// indices carry no masked energy.
Eigen::VectorXd hi_freq_mask(const BasisSpec& spec);

MonitorReport monitor(const FitResult& fit, const CollocationGrid& grid,
                      const DesignBlocks& blocks, const NoArbOperators& ops,
                      const RegularizerSet& regs, const WarpConfig& cfg, const BasisSpec& spec,
                      double delta_tau = 1.0 / 252.0);

}  // namespace arbfit
