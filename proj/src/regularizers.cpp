#include "arbfit/regularizers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace arbfit {

namespace {

Eigen::MatrixXd symmetrized(Eigen::MatrixXd Q) { return 0.5 * (Q + Q.transpose()); }

}  // namespace

// ---- Ridge ------------------------------------------------------------------

Eigen::VectorXd RidgeSpec::lambda_diag(const BasisSpec& spec) const {
    Eigen::VectorXd d(spec.P());
    for (int k = 0; k <= spec.K; ++k)
        for (int l = 0; l <= spec.L; ++l)
            d(spec.col(k, l)) = std::pow(1.0 + alpha * k * k + beta * l * l, s);
    return d;
}

QuadraticTerm ridge_quadratic(const BasisSpec& spec, const RidgeSpec& ridge) {
    QuadraticTerm t;
    t.name = "ridge";
    t.Q = (ridge.lambda_ridge * ridge.lambda_diag(spec)).asDiagonal();
    t.c = Eigen::VectorXd::Zero(spec.P());
    return t;
}

double gcv_trace_hat(const Eigen::MatrixXd& A, const Eigen::VectorXd& w,
                     const Eigen::VectorXd& lambda_diag, double lambda) {
    const Eigen::MatrixXd S = A.transpose() * w.asDiagonal() * A;
    Eigen::MatrixXd G = S;
    G.diagonal() += lambda * lambda_diag;
    return G.ldlt().solve(S).trace();
}

GcvResult gcv_select_ridge(const QuoteBook& book, const BasisSpec& spec, const RidgeSpec& ridge,
                           double subsample_frac, std::uint64_t seed) {
    if (book.A.rows() != book.N()) throw std::invalid_argument("gcv: design not attached");
    const int N = book.N();
    const int n_sub = std::max(1, static_cast<int>(std::ceil(subsample_frac * N)));
    std::vector<int> idx(N);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(n_sub);

    Eigen::MatrixXd A(n_sub, spec.P());
    Eigen::VectorXd y(n_sub), w(n_sub);
    for (int i = 0; i < n_sub; ++i) {
        A.row(i) = book.A.row(idx[i]);
        y(i) = book.y(idx[i]);
        w(i) = book.w(idx[i]);
    }
    const Eigen::VectorXd ld = ridge.lambda_diag(spec);
    const Eigen::MatrixXd S = A.transpose() * w.asDiagonal() * A;
    const Eigen::VectorXd rhs = A.transpose() * w.cwiseProduct(y);
    const double scale = S.trace() / spec.P();

    GcvResult res;
    const int n_grid = 25;
    double best = std::numeric_limits<double>::infinity();
    for (int t = 0; t < n_grid; ++t) {
        const double lam =
            scale * std::pow(10.0, -8.0 + 10.0 * t / double(n_grid - 1));
        Eigen::MatrixXd G = S;
        G.diagonal() += lam * ld;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
        if (ldlt.info() != Eigen::Success) throw std::runtime_error("gcv: singular G(lambda)");
        const Eigen::VectorXd a = ldlt.solve(rhs);
        const double tr_h = ldlt.solve(S).trace();
        const Eigen::VectorXd r = w.cwiseSqrt().cwiseProduct(y - A * a);
        const double denom = n_sub - tr_h;
        const double gcv = r.squaredNorm() / (denom * denom);
        res.grid.push_back(lam);
        res.values.push_back(gcv);
        if (gcv < best) {
            best = gcv;
            res.lambda = lam;
        }
    }
    return res;
}

// ---- Whitening --------------------------------------------------------------

WhiteningMap identity_whitening(int P) {
    WhiteningMap m;
    m.U = Eigen::MatrixXd::Identity(P, P);
    m.U_inv = m.U;
    return m;
}

WhiteningMap build_whitening(const QuoteBook& book, const BasisSpec& spec) {
    if (book.A.rows() != book.N()) throw std::invalid_argument("whitening: design not attached");
    const int P = spec.P(), nk = spec.K + 1;
    WhiteningMap map;
    map.U = Eigen::MatrixXd::Zero(P, P);
    map.U_inv = Eigen::MatrixXd::Zero(P, P);
    const Eigen::VectorXd sw = book.w.cwiseSqrt();

    for (int l = 0; l <= spec.L; ++l) {
        Eigen::MatrixXd B(book.N(), nk);
        for (int k = 0; k < nk; ++k) B.col(k) = sw.cwiseProduct(book.A.col(spec.col(k, l)));

        Eigen::MatrixXd blk, blk_inv;
        bool deficient = B.rows() < nk;
        if (!deficient) {
            Eigen::HouseholderQR<Eigen::MatrixXd> qr(B);
            Eigen::MatrixXd R =
                qr.matrixQR().topRows(nk).triangularView<Eigen::Upper>();
            const double dmax = R.diagonal().cwiseAbs().maxCoeff();
            if (R.diagonal().cwiseAbs().minCoeff() <= 1e-10 * dmax) deficient = true;
            if (!deficient) {
                blk = R.triangularView<Eigen::Upper>().solve(
                    Eigen::MatrixXd::Identity(nk, nk));
                blk_inv = R;
            }
        }
        if (deficient) {
            // Symmetric SVD whitener with a singular-value floor.
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(B, Eigen::ComputeThinV);
            Eigen::VectorXd sig = svd.singularValues();
            const double floor = std::max(sig.size() ? sig(0) : 1.0, 1.0) * 1e-10;
            for (int i = 0; i < sig.size(); ++i) sig(i) = std::max(sig(i), floor);
            const Eigen::MatrixXd V = svd.matrixV();
            blk = V * sig.cwiseInverse().asDiagonal() * V.transpose();
            blk_inv = V * sig.asDiagonal() * V.transpose();
            map.rank_deficient = true;
            map.warning = "whitening: rank-deficient slice l=" + std::to_string(l) +
                          "; SVD fallback with floored spectrum";
        }
        for (int k = 0; k < nk; ++k)
            for (int k2 = 0; k2 < nk; ++k2) {
                map.U(spec.col(k, l), spec.col(k2, l)) = blk(k, k2);
                map.U_inv(spec.col(k, l), spec.col(k2, l)) = blk_inv(k, k2);
            }
    }
    return map;
}

// ---- Clenshaw-Curtis and DW -------------------------------------------------

Eigen::VectorXd clenshaw_curtis_weights(int n, double length) {
    if (n < 2) throw std::invalid_argument("clenshaw_curtis_weights: need n >= 2");
    // Moment matching in the Chebyshev basis at the Lobatto nodes (ascending):
    // sum_j w_j T_k(x_j) = integral of T_k over [-1, 1].
    Eigen::MatrixXd V(n, n);
    Eigen::VectorXd b(n);
    for (int k = 0; k < n; ++k) {
        b(k) = (k % 2 == 1) ? 0.0 : 2.0 / (1.0 - double(k) * double(k));
        for (int j = 0; j < n; ++j) {
            const double x = std::cos(double(n - 1 - j) * M_PI / double(n - 1));
            V(k, j) = std::cos(k * std::acos(std::min(std::max(x, -1.0), 1.0)));
        }
    }
    Eigen::VectorXd w = V.colPivHouseholderQr().solve(b);
    return (length / 2.0) * w;
}

Eigen::VectorXd DwOperator::pinv_apply(const Eigen::VectorXd& f) const {
    Eigen::VectorXd fc = f.array() - f.mean();
    return deflated_.solve(fc);
}

DwOperator build_dw(const CollocationGrid& grid, const DesignBlocks& blocks, const WarpConfig& cfg,
                    double lambda_dw0, double tau_star) {
    DwOperator dw;
    dw.lambda_dw0 = lambda_dw0;
    dw.tau_star = tau_star;
    const int n = grid.n_m;
    const Eigen::VectorXd w_node = clenshaw_curtis_weights(n, cfg.m_max - cfg.m_min);

    // Neumann Laplacian L = D^T M_edge^{-1} D on forward differences; the edge
    // mass is the mean of the two adjacent node weights.
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(n - 1, n);
    Eigen::VectorXd m_edge(n - 1);
    for (int e = 0; e < n - 1; ++e) {
        D(e, e) = -1.0;
        D(e, e + 1) = 1.0;
        m_edge(e) = 0.5 * (w_node(e) + w_node(e + 1));
    }
    dw.L_m = D.transpose() * m_edge.cwiseInverse().asDiagonal() * D;
    dw.deflation_c_ = dw.L_m.trace() / (n * n);
    dw.deflated_.compute(dw.L_m + dw.deflation_c_ * Eigen::MatrixXd::Ones(n, n));

    dw.taper.resize(grid.G());
    for (int g = 0; g < grid.G(); ++g)
        dw.taper(g) = std::min(1.0, tau_star / grid.nodes[g].second);

    // Density evaluation: d^2/dK^2 rows, i.e. diag(K)^-2 (A_mm - A_m).
    const Eigen::ArrayXd invK2 = grid.Kstrike.array().inverse().square();
    dw.E = invK2.matrix().asDiagonal() * (blocks.A_mm - blocks.A_m);
    const int P = static_cast<int>(dw.E.cols());
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(P, P);
    const Eigen::VectorXd taper_sqrt = dw.taper.cwiseSqrt();
    for (int j = 0; j < grid.n_tau; ++j) {
        Eigen::MatrixXd Ej =
            taper_sqrt.segment(j * n, n).asDiagonal() * dw.E.middleRows(j * n, n);
        Eigen::MatrixXd X(n, P);
        for (int c = 0; c < P; ++c) X.col(c) = dw.pinv_apply(Ej.col(c));
        Q += Ej.transpose() * X;
    }
    dw.term.name = "dw";
    dw.term.Q = symmetrized(lambda_dw0 * Q);
    dw.term.c = Eigen::VectorXd::Zero(P);
    return dw;
}

// ---- RN anchor ---------------------------------------------------------------

RnTerms build_rn(const CollocationGrid& grid, const DesignBlocks& blocks,
                 const NoArbOperators& ops, const BasisSpec& basis, const RnSpec& spec) {
    RnTerms rn;
    const int P = static_cast<int>(blocks.A.cols());
    for (int g = 0; g < grid.G(); ++g)
        if (grid.nodes[g].second <= spec.tau_star) rn.gamma.push_back(g);

    const int ng = static_cast<int>(rn.gamma.size());
    Eigen::MatrixXd Ag(ng, P), Bg(ng, P);
    rn.C0.resize(ng);
    for (int r = 0; r < ng; ++r) {
        const int g = rn.gamma[r];
        Ag.row(r) = blocks.A.row(g);
        Bg.row(r) = ops.A_taukK.row(g);
        rn.C0(r) = grid.F(g) * std::max(1.0 - std::exp(grid.nodes[g].first), 0.0);
    }
    if (spec.p_even) {
        // Parity projection: restrict the anchor to the even strike-degree
        // part of the expansion by zeroing odd-k columns in the RN block.
        for (int k = 1; k <= basis.K; k += 2)
            for (int l = 0; l <= basis.L; ++l) Ag.col(basis.col(k, l)).setZero();
    }
    rn.term.name = "rn";
    rn.term.Q = symmetrized(spec.lambda_rn * (Ag.transpose() * Ag) +
                            spec.eta_rn * (Bg.transpose() * Bg));
    rn.term.c = -spec.lambda_rn * (Ag.transpose() * rn.C0);
    rn.term.constant = 0.5 * spec.lambda_rn * rn.C0.squaredNorm();
    return rn;
}

// ---- Omega taper and hook ------------------------------------------------------

Eigen::MatrixXd dct2_orthonormal(int n) {
    Eigen::MatrixXd D(n, n);
    const double norm0 = std::sqrt(1.0 / n), norm = std::sqrt(2.0 / n);
    for (int p = 0; p < n; ++p)
        for (int k = 0; k < n; ++k)
            D(p, k) = (p == 0 ? norm0 : norm) * std::cos(M_PI * (2 * k + 1) * p / (2.0 * n));
    return D;
}

OmegaHookTerms build_omega_hook(const CollocationGrid& grid, const DesignBlocks& blocks,
                                const NoArbOperators& ops, const BasisSpec& spec,
                                const OmegaSpec& omega) {
    OmegaHookTerms t;
    const int P = spec.P();
    const Eigen::MatrixXd Dk = dct2_orthonormal(spec.K + 1);
    const Eigen::MatrixXd Dl = dct2_orthonormal(spec.L + 1);
    t.U_omega.resize(P, P);
    for (int p = 0; p <= spec.K; ++p)
        for (int q = 0; q <= spec.L; ++q)
            for (int k = 0; k <= spec.K; ++k)
                for (int l = 0; l <= spec.L; ++l)
                    t.U_omega(spec.col(p, q), spec.col(k, l)) = Dk(p, k) * Dl(q, l);

    t.mask = Eigen::VectorXd::Zero(P);
    const int cutoff = (2 * spec.K) / 3;
    for (int p = 0; p <= spec.K; ++p)
        if (p > cutoff)
            for (int q = 0; q <= spec.L; ++q) t.mask(spec.col(p, q)) = 1.0;

    // Maturity ramp, averaged over the grid's tau slices.
    double ramp_sum = 0.0;
    for (double tau : grid.tau_nodes) {
        double r = 0.0;
        if (tau <= omega.tau_star)
            r = 1.0;
        else if (tau <= 2.0 * omega.tau_star)
            r = 2.0 - tau / omega.tau_star;
        ramp_sum += r;
    }
    t.ramp_avg = grid.tau_nodes.empty() ? 1.0 : ramp_sum / grid.tau_nodes.size();

    t.omega.name = "omega";
    t.omega.Q = symmetrized(omega.lambda_omega0 * t.ramp_avg *
                            (t.U_omega.transpose() * t.mask.asDiagonal() * t.U_omega));
    t.omega.c = Eigen::VectorXd::Zero(P);

    // Commutator hook on the scaled nodal operators.
    const Eigen::MatrixXd AK = Eigen::MatrixXd(nodal_strike_derivative(grid)) / ops.s_K;
    const Eigen::MatrixXd AC = Eigen::MatrixXd(nodal_calendar_derivative(grid)) / ops.s_tau;
    t.C = AC * AK - AK * AC;
    const Eigen::MatrixXd CA = t.C * blocks.A;
    t.hook.name = "hook";
    t.hook.Q = symmetrized(omega.lambda_hook * (CA.transpose() * CA));
    t.hook.c = Eigen::VectorXd::Zero(P);
    return t;
}

RegularizerSet assemble_quadratics(const CollocationGrid& grid, const DesignBlocks& blocks,
                                   const NoArbOperators& ops, const WarpConfig& cfg,
                                   const BasisSpec& spec, const RidgeSpec& ridge,
                                   double lambda_dw0, double tau_star, const RnSpec& rn,
                                   const OmegaSpec& omega) {
    RegularizerSet set;
    set.ridge_spec = ridge;
    set.dw = build_dw(grid, blocks, cfg, lambda_dw0, tau_star);
    set.rn = build_rn(grid, blocks, ops, spec, rn);
    set.omega_hook = build_omega_hook(grid, blocks, ops, spec, omega);
    set.terms = {ridge_quadratic(spec, ridge), set.dw.term, set.rn.term, set.omega_hook.omega,
                 set.omega_hook.hook};
    for (const auto& t : set.terms) {
        if (t.Q.rows() != spec.P() || t.c.size() != spec.P())
            throw std::invalid_argument("assemble_quadratics: dimension mismatch in " + t.name);
    }
    return set;
}

}  // namespace arbfit
