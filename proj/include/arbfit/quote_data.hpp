#pragma once

#include <Eigen/Sparse>
#include <string>

#include "arbfit/warp_basis.hpp"

namespace arbfit {

struct Quote {
    double m = 0.0;
    double tau = 0.0;
    double bid = 0.0;
    double ask = 0.0;
    double volume = 0.0;
    double open_interest = 0.0;
};

struct RejectedQuote {
    int row = -1;
    std::string reason;
};

struct QuoteBook {
    std::vector<Quote> quotes;
    Eigen::VectorXd y;  // mids
    Eigen::VectorXd b;  // bids
    Eigen::VectorXd a;  // asks
    Eigen::VectorXd w;  // heteroscedastic weights
    Eigen::MatrixXd A;  // design at quote locations (filled by attach_design)

    int N() const { return static_cast<int>(quotes.size()); }
};

struct CleanReport {
    std::vector<RejectedQuote> rejected;
    int clamped_tau = 0;
};

// Drops crossed/negative/non-finite rows, clamps tau to the floor, computes
// weights w = liq / max(ask - bid, eps)^2 with liq = 1 + sqrt(vol) + 0.1 sqrt(OI).
QuoteBook clean_quotes(const std::vector<Quote>& raw, double tau_floor, CleanReport* report,
                       double eps_spread = 1e-6);

// Fills book.A with the price design block at the quote locations.
void attach_design(QuoteBook& book, const WarpConfig& cfg, const BasisSpec& spec);

// Quadratic band hinge: 1/2 dist(y_hat, [b, a])^2.
double band_hinge(double y_hat, double b, double a);

struct HingeSlacks {
    double u = 0.0;  // (b - y_hat)_+
    double v = 0.0;  // (y_hat - a)_+
    double value = 0.0;
};

HingeSlacks hinge_slack_min(double y_hat, double b, double a);

struct BinSelector {
    // B x N 0/1 aggregation; each quote in exactly one bin, empty bins dropped.
    Eigen::SparseMatrix<double> G;
    std::vector<int> bin_of_quote;
};

BinSelector bin_quotes(const QuoteBook& book, const std::vector<double>& m_edges,
                       const std::vector<double>& tau_edges);

}  // namespace arbfit
