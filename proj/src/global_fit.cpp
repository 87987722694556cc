#include "arbfit/global_fit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace arbfit {

namespace {

void add_dense(std::vector<Eigen::Triplet<double>>& trips, const Eigen::MatrixXd& B, int r0,
               int c0, double scale = 1.0) {
    for (int r = 0; r < B.rows(); ++r)
        for (int c = 0; c < B.cols(); ++c)
            if (B(r, c) != 0.0) trips.emplace_back(r0 + r, c0 + c, scale * B(r, c));
}

void add_identity(std::vector<Eigen::Triplet<double>>& trips, int n, int r0, int c0,
                  double val = 1.0) {
    for (int i = 0; i < n; ++i) trips.emplace_back(r0 + i, c0 + i, val);
}

}  // namespace

double coverage_value(const Eigen::VectorXd& y_hat, const Eigen::VectorXd& b,
                      const Eigen::VectorXd& a) {
    int covered = 0;
    for (int i = 0; i < y_hat.size(); ++i)
        if (y_hat(i) >= b(i) && y_hat(i) <= a(i)) ++covered;
    return double(covered) / double(y_hat.size());
}

double hinge_total(const Eigen::VectorXd& y_hat, const Eigen::VectorXd& b,
                   const Eigen::VectorXd& a) {
    double h = 0.0;
    for (int i = 0; i < y_hat.size(); ++i) h += band_hinge(y_hat(i), b(i), a(i));
    return h;
}

MasterProblem assemble_master(const QuoteBook& book, const CollocationGrid& grid,
                              const DesignBlocks& blocks, const NoArbOperators& ops,
                              const RegularizerSet& regs, const MasterWeights& weights,
                              FitMode mode, const WhiteningMap* whitening) {
    const int P = static_cast<int>(book.A.cols());
    const int N = book.N();
    const int G = grid.G();
    if (blocks.A.rows() != G || ops.At_K.rows() != G)
        throw std::invalid_argument("assemble_master: grid dimension mismatch");
    for (const auto& t : regs.terms)
        if (t.Q.rows() != P) throw std::invalid_argument("assemble_master: regularizer mismatch");

    MasterProblem prob;
    prob.mode = mode;
    prob.P = P;
    prob.N = N;
    prob.G = G;
    prob.whitening = whitening ? *whitening : identity_whitening(P);
    prob.whitened = whitening != nullptr;
    const Eigen::MatrixXd& U = prob.whitening.U;

    // Transformed design and operator blocks (identity map when unwhitened).
    const Eigen::MatrixXd Aq = prob.whitened ? Eigen::MatrixXd(book.A * U) : book.A;
    const Eigen::MatrixXd Ag = prob.whitened ? Eigen::MatrixXd(blocks.A * U) : blocks.A;
    const Eigen::MatrixXd BK = prob.whitened ? Eigen::MatrixXd(ops.At_K * U) : ops.At_K;
    const Eigen::MatrixXd BKK = prob.whitened ? Eigen::MatrixXd(ops.At_KK * U) : ops.At_KK;
    const Eigen::MatrixXd Bcal = prob.whitened ? Eigen::MatrixXd(ops.At_taukK * U) : ops.At_taukK;

    // Coefficient-block quadratic: data + fixed regularizers.
    Eigen::MatrixXd Qa = Aq.transpose() * book.w.asDiagonal() * Aq;
    Eigen::VectorXd qa = -(Aq.transpose() * book.w.cwiseProduct(book.y));
    prob.obj_const = 0.5 * book.y.dot(book.w.cwiseProduct(book.y));
    for (const auto& t : regs.terms) {
        if (prob.whitened) {
            Qa += U.transpose() * t.Q * U;
            qa += U.transpose() * t.c;
        } else {
            Qa += t.Q;
            qa += t.c;
        }
        prob.obj_const += t.constant;
    }
    Qa = (0.5 * (Qa + Qa.transpose())).eval();

    const bool soft = mode == FitMode::soft;
    const int n = soft ? P + 2 * N + 5 * G : P + 2 * N;
    const int m = soft ? 4 * N + 10 * G : 4 * N + 4 * G;
    prob.off_a = 0;
    prob.off_u = P;
    prob.off_v = P + N;
    if (soft) {
        prob.off_uK = P + 2 * N;
        prob.off_vKK = P + 2 * N + G;
        prob.off_wtau = P + 2 * N + 2 * G;
        prob.off_slo = P + 2 * N + 3 * G;
        prob.off_shi = P + 2 * N + 4 * G;
    }

    std::vector<Eigen::Triplet<double>> pq;
    add_dense(pq, Qa, 0, 0);
    add_identity(pq, N, prob.off_u, prob.off_u, weights.mu);
    add_identity(pq, N, prob.off_v, prob.off_v, weights.mu);
    if (soft) {
        add_identity(pq, G, prob.off_uK, prob.off_uK, weights.lambda_na);
        add_identity(pq, G, prob.off_vKK, prob.off_vKK, weights.lambda_na);
        add_identity(pq, G, prob.off_wtau, prob.off_wtau, weights.lambda_na);
        add_identity(pq, G, prob.off_slo, prob.off_slo, weights.lambda_b);
        add_identity(pq, G, prob.off_shi, prob.off_shi, weights.lambda_b);
    }
    prob.qp.P.resize(n, n);
    prob.qp.P.setFromTriplets(pq.begin(), pq.end());
    prob.qp.q = Eigen::VectorXd::Zero(n);
    prob.qp.q.head(P) = qa;

    std::vector<Eigen::Triplet<double>> mc;
    prob.qp.l = Eigen::VectorXd::Constant(m, -kQpInf);
    prob.qp.u = Eigen::VectorXd::Constant(m, kQpInf);
    int r = 0;
    // Band slacks: A a + u >= b; A a - v <= ask; u, v >= 0.
    add_dense(mc, Aq, r, 0);
    add_identity(mc, N, r, prob.off_u);
    prob.qp.l.segment(r, N) = book.b;
    r += N;
    add_dense(mc, Aq, r, 0);
    add_identity(mc, N, r, prob.off_v, -1.0);
    prob.qp.u.segment(r, N) = book.a;
    r += N;
    add_identity(mc, N, r, prob.off_u);
    prob.qp.l.segment(r, N).setZero();
    r += N;
    add_identity(mc, N, r, prob.off_v);
    prob.qp.l.segment(r, N).setZero();
    r += N;

    if (soft) {
        // u_K >= At_K a, v_KK >= -At_KK a, w_tau >= -At_taukK a, all >= 0.
        add_dense(mc, BK, r, 0);
        add_identity(mc, G, r, prob.off_uK, -1.0);
        prob.qp.u.segment(r, G).setZero();
        r += G;
        add_dense(mc, BKK, r, 0, -1.0);
        add_identity(mc, G, r, prob.off_vKK, -1.0);
        prob.qp.u.segment(r, G).setZero();
        r += G;
        add_dense(mc, Bcal, r, 0, -1.0);
        add_identity(mc, G, r, prob.off_wtau, -1.0);
        prob.qp.u.segment(r, G).setZero();
        r += G;
        add_identity(mc, G, r, prob.off_uK);
        prob.qp.l.segment(r, G).setZero();
        r += G;
        add_identity(mc, G, r, prob.off_vKK);
        prob.qp.l.segment(r, G).setZero();
        r += G;
        add_identity(mc, G, r, prob.off_wtau);
        prob.qp.l.segment(r, G).setZero();
        r += G;
        // Price bounds on the grid via slacks: A_g a + s_lo >= 0,
        // A_g a - s_hi <= F, slacks >= 0.
        add_dense(mc, Ag, r, 0);
        add_identity(mc, G, r, prob.off_slo);
        prob.qp.l.segment(r, G).setZero();
        r += G;
        add_dense(mc, Ag, r, 0);
        add_identity(mc, G, r, prob.off_shi, -1.0);
        prob.qp.u.segment(r, G) = grid.F;
        r += G;
        add_identity(mc, G, r, prob.off_slo);
        prob.qp.l.segment(r, G).setZero();
        r += G;
        add_identity(mc, G, r, prob.off_shi);
        prob.qp.l.segment(r, G).setZero();
        r += G;
    } else {
        // Hard inequalities: At_K a <= 0, -At_KK a <= 0, -At_taukK a <= 0,
        // 0 <= A_g a <= F.
        add_dense(mc, BK, r, 0);
        prob.qp.u.segment(r, G).setZero();
        r += G;
        add_dense(mc, BKK, r, 0, -1.0);
        prob.qp.u.segment(r, G).setZero();
        r += G;
        add_dense(mc, Bcal, r, 0, -1.0);
        prob.qp.u.segment(r, G).setZero();
        r += G;
        add_dense(mc, Ag, r, 0);
        prob.qp.l.segment(r, G).setZero();
        prob.qp.u.segment(r, G) = grid.F;
        r += G;
    }
    prob.qp.M.resize(m, n);
    prob.qp.M.setFromTriplets(mc.begin(), mc.end());
    return prob;
}

FitResult solve_master(const MasterProblem& prob, const QuoteBook& book,
                       const NoArbOperators& ops, const QpSolver& solver,
                       const QpSolution* warm) {
    FitResult fit;
    fit.mode = prob.mode;
    fit.whitened = prob.whitened;
    fit.sol = warm ? solver.solve_warm(prob.qp, *warm) : solver.solve(prob.qp);
    Eigen::VectorXd a_t = fit.sol.x.head(prob.P);
    fit.a = prob.whitened ? Eigen::VectorXd(prob.whitening.U * a_t) : a_t;
    const Eigen::VectorXd y_hat = book.A * fit.a;
    fit.coverage = coverage_value(y_hat, book.b, book.a);
    fit.hinge = hinge_total(y_hat, book.b, book.a);
    fit.shares = violation_shares(fit.a, ops);
    fit.objective = fit.sol.objective + prob.obj_const;
    return fit;
}

CollocationGrid make_probe_grid(const WarpConfig& cfg, const BasisSpec& spec,
                                const ForwardCurve& fwd) {
    return make_grid(cfg, spec, fwd, std::max(2, spec.K), std::max(1, spec.L));
}

QuoteBook subsample_book(const QuoteBook& book, double frac, std::uint64_t seed) {
    const int N = book.N();
    const int n_sub = std::max(1, static_cast<int>(std::ceil(frac * N)));
    std::vector<int> idx(N);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(n_sub);
    std::sort(idx.begin(), idx.end());

    QuoteBook sub;
    sub.y.resize(n_sub);
    sub.b.resize(n_sub);
    sub.a.resize(n_sub);
    sub.w.resize(n_sub);
    if (book.A.rows() == N) sub.A.resize(n_sub, book.A.cols());
    for (int i = 0; i < n_sub; ++i) {
        sub.quotes.push_back(book.quotes[idx[i]]);
        sub.y(i) = book.y(idx[i]);
        sub.b(i) = book.b(idx[i]);
        sub.a(i) = book.a(idx[i]);
        sub.w(i) = book.w(idx[i]);
        if (book.A.rows() == N) sub.A.row(i) = book.A.row(idx[i]);
    }
    return sub;
}

LadderResult select_lambda_na(const QuoteBook& probe_book, const CollocationGrid& probe_grid,
                              const DesignBlocks& probe_blocks, const NoArbOperators& probe_ops,
                              const RegularizerSet& regs, MasterWeights weights,
                              const QpSolver& solver, double viol_target,
                              const std::vector<double>& ladder) {
    LadderResult res;
    QpSolution warm;
    bool have_warm = false;
    for (double lam : ladder) {
        weights.lambda_na = lam;
        auto prob = assemble_master(probe_book, probe_grid, probe_blocks, probe_ops, regs,
                                    weights, FitMode::soft);
        auto fit = solve_master(prob, probe_book, probe_ops, solver,
                                have_warm ? &warm : nullptr);
        warm = fit.sol;
        have_warm = true;
        res.trail.emplace_back(lam, fit.shares.share_total);
        if (fit.shares.share_total <= viol_target) {
            res.lambda_na = lam;
            return res;
        }
    }
    res.lambda_na = ladder.back();
    res.exhausted = true;
    return res;
}

MuResult mu_controller(const QuoteBook& book, const CollocationGrid& grid,
                       const DesignBlocks& blocks, const NoArbOperators& ops,
                       const RegularizerSet& regs, MasterWeights weights, FitMode mode,
                       const QpSolver& solver, double target_coverage, double mu_min,
                       double mu_max, double expand, double mu_cap, double ratio_tol,
                       const WhiteningMap* whitening) {
    MuResult res;
    QpSolution warm;
    bool have_warm = false;
    auto run = [&](double mu) {
        weights.mu = mu;
        auto prob = assemble_master(book, grid, blocks, ops, regs, weights, mode, whitening);
        auto fit = solve_master(prob, book, ops, solver, have_warm ? &warm : nullptr);
        warm = fit.sol;
        have_warm = true;
        res.trajectory.emplace_back(mu, fit.hinge);
        return fit;
    };

    FitResult fit_lo = run(mu_min);
    if (fit_lo.coverage >= target_coverage) {
        res.mu = mu_min;
        res.fit = std::move(fit_lo);
        res.target_reached = true;
        return res;
    }
    FitResult fit_hi = run(mu_max);
    while (fit_hi.coverage < target_coverage && mu_max < mu_cap) {
        mu_min = mu_max;
        mu_max = std::min(mu_max * expand, mu_cap);
        fit_hi = run(mu_max);
    }
    if (fit_hi.coverage < target_coverage) {
        res.mu = mu_max;
        res.fit = std::move(fit_hi);
        res.target_reached = false;
        return res;
    }
    while (mu_max / mu_min > ratio_tol) {
        const double mu = std::sqrt(mu_min * mu_max);
        FitResult fit = run(mu);
        if (fit.coverage >= target_coverage) {
            mu_max = mu;
            fit_hi = std::move(fit);
        } else {
            mu_min = mu;
        }
    }
    res.mu = mu_max;
    res.fit = std::move(fit_hi);
    res.target_reached = true;
    return res;
}

MetricProjection metric_projection_check(const QuoteBook& book, const CollocationGrid& grid,
                                         const DesignBlocks& blocks, const NoArbOperators& ops,
                                         const RegularizerSet& regs, const QpSolver& solver) {
    MetricProjection mp;
    const int P = static_cast<int>(book.A.cols());
    const int G = grid.G();
    mp.M_h = book.A.transpose() * book.w.asDiagonal() * book.A;
    mp.b = book.A.transpose() * book.w.cwiseProduct(book.y);
    for (const auto& t : regs.terms) {
        mp.M_h += t.Q;
        mp.b -= t.c;
    }
    mp.M_h = (0.5 * (mp.M_h + mp.M_h.transpose())).eval();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(mp.M_h);
    if (ldlt.info() != Eigen::Success) throw std::runtime_error("metric projection: singular M_h");
    mp.a_hat = ldlt.solve(mp.b);

    QpProblem qp;
    qp.P = mp.M_h.sparseView();
    qp.q = -mp.b;
    const int m = 4 * G;
    qp.l = Eigen::VectorXd::Constant(m, -kQpInf);
    qp.u = Eigen::VectorXd::Constant(m, kQpInf);
    std::vector<Eigen::Triplet<double>> mc;
    add_dense(mc, ops.At_K, 0, 0);
    qp.u.segment(0, G).setZero();
    add_dense(mc, ops.At_KK, G, 0, -1.0);
    qp.u.segment(G, G).setZero();
    add_dense(mc, ops.At_taukK, 2 * G, 0, -1.0);
    qp.u.segment(2 * G, G).setZero();
    add_dense(mc, blocks.A, 3 * G, 0);
    qp.l.segment(3 * G, G).setZero();
    qp.u.segment(3 * G, G) = grid.F;
    qp.M.resize(m, P);
    qp.M.setFromTriplets(mc.begin(), mc.end());

    auto sol = solver.solve(qp);
    mp.a_star = sol.x;
    // Stationarity of the projection: M_h(a* - a_hat) + M^T y = 0.
    const Eigen::VectorXd resid =
        mp.M_h * (mp.a_star - mp.a_hat) + qp.M.transpose() * sol.y;
    mp.kkt_residual = resid.lpNorm<Eigen::Infinity>();
    return mp;
}

}  // namespace arbfit
