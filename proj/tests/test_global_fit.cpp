#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "arbfit/global_fit.hpp"

using namespace arbfit;

namespace {

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double black76(double F, double K, double sigma, double tau) {
    const double sv = sigma * std::sqrt(tau);
    if (sv <= 0.0) return std::max(F - K, 0.0);
    const double d1 = (std::log(F / K) + 0.5 * sv * sv) / sv;
    return F * norm_cdf(d1) - K * norm_cdf(d1 - sv);
}

struct Fixture {
    WarpConfig cfg;
    BasisSpec spec;
    CollocationGrid grid;
    DesignBlocks blocks;
    NoArbOperators ops;
    QuoteBook book;
    RegularizerSet regs;
    MasterWeights weights;
};

// Ground truth for the synthetic panels: least-squares projection of a flat-vol
// Black-76 surface into the basis, then pushed strictly inside the no-arb cone
// (margin on the sign conditions at both the full and the probe grid). Quotes
// generated from it are exactly representable and arbitrage-free with margin,
// so the fit targets are determined by the optimizer, not by basis truncation.
Eigen::VectorXd feasible_truth(const WarpConfig& cfg, const BasisSpec& spec,
                               const ForwardCurve& fwd, const CollocationGrid& grid,
                               const DesignBlocks& blocks, const NoArbOperators& ops) {
    const double F0 = fwd.F(0.0);
    std::vector<std::pair<double, double>> pts;
    for (int j = 0; j < 24; ++j)
        for (int i = 0; i < 48; ++i)
            pts.push_back({cfg.m_min + (cfg.m_max - cfg.m_min) * i / 47.0,
                           cfg.tau_min + (cfg.tau_max - cfg.tau_min) * j / 23.0});
    const auto dense = build_design(pts, cfg, spec);
    Eigen::VectorXd c(static_cast<int>(pts.size()));
    for (int k = 0; k < c.size(); ++k)
        c(k) = black76(F0, F0 * std::exp(pts[k].first), 0.2, pts[k].second);
    const int P = static_cast<int>(dense.A.cols());
    const Eigen::VectorXd a_ls =
        (dense.A.transpose() * dense.A + 1e-10 * Eigen::MatrixXd::Identity(P, P))
            .ldlt()
            .solve(dense.A.transpose() * c);

    const auto probe_grid = make_probe_grid(cfg, spec, fwd);
    const auto probe_blocks = build_design(probe_grid.nodes, cfg, spec);
    const auto probe_ops = build_noarb_ops(probe_grid, probe_blocks);
    const double margin = 0.005;
    auto stack = [&](const NoArbOperators& o, const DesignBlocks& b, const Eigen::VectorXd& F) {
        Eigen::MatrixXd M(3 * o.At_K.rows() + b.A.rows(), P);
        M << o.At_K, -o.At_KK, -o.At_taukK, b.A;
        Eigen::VectorXd l(M.rows()), u(M.rows());
        l.head(3 * o.At_K.rows()).setConstant(-kQpInf);
        u.head(3 * o.At_K.rows()).setConstant(-margin);
        l.tail(b.A.rows()).setZero();
        u.tail(b.A.rows()) = F;
        return std::make_tuple(M, l, u);
    };
    auto [M1, l1, u1] = stack(ops, blocks, grid.F);
    auto [M2, l2, u2] = stack(probe_ops, probe_blocks, probe_grid.F);
    QpProblem qp;
    qp.P = Eigen::MatrixXd::Identity(P, P).sparseView();
    qp.q = -a_ls;
    Eigen::MatrixXd M(M1.rows() + M2.rows(), P);
    M << M1, M2;
    qp.M = M.sparseView();
    qp.l.resize(M.rows());
    qp.u.resize(M.rows());
    qp.l << l1, l2;
    qp.u << u1, u2;
    auto sol = QpSolver().solve(qp);
    REQUIRE(sol.status == QpStatus::solved);
    return sol.x;
}

Fixture make_fixture(int n_quotes, double band_frac, std::uint64_t seed,
                     double lambda_ridge = 1e-6) {
    Fixture f;
    f.cfg.m_min = -0.5;
    f.cfg.m_max = 0.3;
    f.cfg.tau_min = 0.3;
    f.cfg.tau_max = 1.3;
    f.cfg.lambda_m = 1.2;
    f.spec.K = 6;
    f.spec.L = 4;

    const double F0 = 100.0;
    auto fwd = ForwardCurve::constant_carry(F0, 0.0);
    f.grid = make_grid(f.cfg, f.spec, fwd);
    f.blocks = build_design(f.grid.nodes, f.cfg, f.spec);
    f.ops = build_noarb_ops(f.grid, f.blocks);
    const Eigen::VectorXd a_true =
        feasible_truth(f.cfg, f.spec, fwd, f.grid, f.blocks, f.ops);

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> um(f.cfg.m_min + 0.05, f.cfg.m_max - 0.05);
    std::uniform_real_distribution<double> ut(f.cfg.tau_min + 0.02, f.cfg.tau_max - 0.02);
    std::vector<std::pair<double, double>> locs;
    for (int i = 0; i < n_quotes; ++i) {
        const double m = um(rng);
        locs.push_back({m, ut(rng)});
    }
    const auto qdesign = build_design(locs, f.cfg, f.spec);
    std::vector<Quote> raw;
    for (int i = 0; i < n_quotes; ++i) {
        Quote q;
        q.m = locs[i].first;
        q.tau = locs[i].second;
        const double price = qdesign.A.row(i).dot(a_true);
        // Half-spread floored at a minimum tick, as on a real exchange; this
        // also keeps the heteroscedastic weights within a workable range.
        const double half = std::max(price * band_frac, 0.025);
        q.bid = price - half;
        q.ask = price + half;
        q.volume = 50.0;
        q.open_interest = 200.0;
        raw.push_back(q);
    }
    f.book = clean_quotes(raw, f.cfg.tau_min, nullptr);
    attach_design(f.book, f.cfg, f.spec);

    RidgeSpec ridge;
    ridge.lambda_ridge = lambda_ridge;
    RnSpec rn;
    rn.tau_star = 0.25;
    rn.lambda_rn = 0.0;
    rn.eta_rn = 0.0;
    OmegaSpec om;
    om.tau_star = 0.25;
    om.lambda_omega0 = 0.0;
    om.lambda_hook = 0.0;
    f.regs = assemble_quadratics(f.grid, f.blocks, f.ops, f.cfg, f.spec, ridge, 0.0, 0.25, rn,
                                 om);
    f.weights.mu = 8.0;
    f.weights.lambda_na = 16.0;
    f.weights.lambda_b = 16.0;
    return f;
}

}  // namespace

TEST_CASE("coverage and hinge helpers use closed intervals") {
    Eigen::VectorXd y(3), b(3), a(3);
    y << 1.0, 2.0, 5.0;
    b << 1.0, 0.0, 1.0;
    a << 2.0, 2.0, 2.0;
    CHECK(coverage_value(y, b, a) == doctest::Approx(2.0 / 3.0));  // edges covered
    CHECK(hinge_total(y, b, a) == doctest::Approx(0.5 * 9.0));
}

TEST_CASE("single feasible band with zero regularization") {
    auto f = make_fixture(1, 0.005, 3, 0.0);
    // Replace the quote with a wide band at-the-money: a constant surface at
    // the mid is representable and feasible.
    f.book.b(0) = 1.0;
    f.book.a(0) = 2.0;
    f.book.y(0) = 1.5;
    MasterWeights w;
    w.mu = 1e4;
    w.lambda_na = 1.0;
    w.lambda_b = 1.0;
    // Keep a whisker of ridge so the unconstrained directions stay bounded.
    RidgeSpec ridge;
    ridge.lambda_ridge = 1e-8;
    RnSpec rn;
    rn.tau_star = 0.25;
    OmegaSpec om;
    om.tau_star = 0.25;
    auto regs = assemble_quadratics(f.grid, f.blocks, f.ops, f.cfg, f.spec, ridge, 0.0, 0.25, rn,
                                    om);
    auto prob = assemble_master(f.book, f.grid, f.blocks, f.ops, regs, w, FitMode::soft);
    auto fit = solve_master(prob, f.book, f.ops, QpSolver());
    CHECK(fit.sol.status == QpStatus::solved);
    CHECK(fit.hinge <= 1e-8);
    const double y_hat = f.book.A.row(0).dot(fit.a);
    CHECK(y_hat >= 1.0 - 1e-6);
    CHECK(y_hat <= 2.0 + 1e-6);
}

TEST_CASE("assembled Hessian is PSD (PD with ridge)") {
    auto f = make_fixture(60, 0.005, 7, 1e-4);
    auto prob = assemble_master(f.book, f.grid, f.blocks, f.ops, f.regs, f.weights,
                                FitMode::soft);
    std::mt19937_64 rng(11);
    std::normal_distribution<double> gauss(0.0, 1.0);
    double min_rayleigh = std::numeric_limits<double>::infinity();
    for (int t = 0; t < 50; ++t) {
        Eigen::VectorXd x(prob.qp.P.rows());
        for (int i = 0; i < x.size(); ++i) x(i) = gauss(rng);
        min_rayleigh = std::min(min_rayleigh, x.dot(prob.qp.P * x) / x.squaredNorm());
    }
    CHECK(min_rayleigh > 0.0);
}

TEST_CASE("soft fit on a noiseless panel reaches coverage with few violations") {
    auto f = make_fixture(150, 0.01, 13);
    auto prob = assemble_master(f.book, f.grid, f.blocks, f.ops, f.regs, f.weights,
                                FitMode::soft);
    auto fit = solve_master(prob, f.book, f.ops, QpSolver());
    REQUIRE(fit.sol.status == QpStatus::solved);
    CHECK(fit.coverage >= 0.95);
    CHECK(fit.shares.share_total <= 0.05);

    SUBCASE("uniqueness of predictions across warm starts") {
        QpSolution junk;
        junk.x = Eigen::VectorXd::Constant(prob.qp.P.rows(), 0.37);
        junk.z = Eigen::VectorXd::Zero(prob.qp.M.rows());
        junk.y = Eigen::VectorXd::Zero(prob.qp.M.rows());
        auto fit2 = solve_master(prob, f.book, f.ops, QpSolver(), &junk);
        REQUIRE(fit2.sol.status == QpStatus::solved);
        CHECK((f.book.A * fit.a - f.book.A * fit2.a).lpNorm<Eigen::Infinity>() <= 1e-6 *
              std::max(1.0, (f.book.A * fit.a).lpNorm<Eigen::Infinity>()));
    }

    SUBCASE("whitening leaves predictions unchanged") {
        auto map = build_whitening(f.book, f.spec);
        REQUIRE_FALSE(map.rank_deficient);
        auto prob_w = assemble_master(f.book, f.grid, f.blocks, f.ops, f.regs, f.weights,
                                      FitMode::soft, &map);
        auto fit_w = solve_master(prob_w, f.book, f.ops, QpSolver());
        REQUIRE(fit_w.sol.status == QpStatus::solved);
        const Eigen::VectorXd g1 = f.blocks.A * fit.a;
        const Eigen::VectorXd g2 = f.blocks.A * fit_w.a;
        CHECK((g1 - g2).lpNorm<Eigen::Infinity>() <=
              1e-6 * std::max(1.0, g1.lpNorm<Eigen::Infinity>()));
        CHECK(std::abs(fit.objective - fit_w.objective) <=
              1e-6 * std::max(1.0, std::abs(fit.objective)));
    }

    SUBCASE("soft-to-hard limit drives the no-arb slacks down") {
        MasterWeights w = f.weights;
        // The slack magnitudes under study go well below the default solver
        // tolerance, so solve tighter here.
        QpSettings tight;
        tight.eps_abs = 1e-9;
        tight.eps_rel = 1e-9;
        double prev_slack = std::numeric_limits<double>::infinity();
        for (int step = 0; step < 4; ++step) {
            auto p = assemble_master(f.book, f.grid, f.blocks, f.ops, f.regs, w, FitMode::soft);
            auto ft = solve_master(p, f.book, f.ops, QpSolver(tight));
            REQUIRE(ft.sol.status == QpStatus::solved);
            const double slack =
                ft.sol.x.segment(p.off_uK, 3 * p.G).lpNorm<Eigen::Infinity>();
            CHECK(slack <= prev_slack + 1e-7);
            prev_slack = slack;
            w.lambda_na *= 10.0;
            w.lambda_b *= 10.0;
        }
        CHECK(prev_slack <= 1e-6);
    }
}

TEST_CASE("lambda_NA ladder on arbitrage-free data returns the smallest rung") {
    auto f = make_fixture(120, 0.01, 17);
    auto probe_grid = make_probe_grid(f.cfg, f.spec, ForwardCurve::constant_carry(100.0, 0.0));
    auto probe_blocks = build_design(probe_grid.nodes, f.cfg, f.spec);
    auto probe_ops = build_noarb_ops(probe_grid, probe_blocks);
    auto probe_book = subsample_book(f.book, 0.5, 21);
    auto res = select_lambda_na(probe_book, probe_grid, probe_blocks, probe_ops, f.regs,
                                f.weights, QpSolver());
    CHECK(res.lambda_na == doctest::Approx(1.0));
    CHECK_FALSE(res.exhausted);
    // viol is nonincreasing along whatever part of the ladder was visited.
    for (size_t i = 1; i < res.trail.size(); ++i)
        CHECK(res.trail[i].second <= res.trail[i - 1].second + 1e-9);
}

TEST_CASE("mu controller") {
    auto f = make_fixture(100, 0.01, 19);
    SUBCASE("already at target at mu_min returns mu_min") {
        auto res = mu_controller(f.book, f.grid, f.blocks, f.ops, f.regs, f.weights,
                                 FitMode::soft, QpSolver(), 0.5, 1.0, 64.0);
        CHECK(res.target_reached);
        CHECK(res.mu == doctest::Approx(1.0));
        CHECK(res.trajectory.size() == 1);
    }
    SUBCASE("hinge at the optimizer is nonincreasing in mu") {
        MasterWeights w = f.weights;
        double prev_hinge = std::numeric_limits<double>::infinity();
        for (double mu : {0.5, 2.0, 8.0, 32.0}) {
            w.mu = mu;
            auto p = assemble_master(f.book, f.grid, f.blocks, f.ops, f.regs, w, FitMode::soft);
            auto ft = solve_master(p, f.book, f.ops, QpSolver());
            REQUIRE(ft.sol.status == QpStatus::solved);
            CHECK(ft.hinge <= prev_hinge + 1e-8 * std::max(1.0, prev_hinge));
            prev_hinge = ft.hinge;
        }
    }
}

TEST_CASE("metric projection view of the hard-constrained fit") {
    auto f = make_fixture(100, 0.02, 23, 1e-4);
    auto mp = metric_projection_check(f.book, f.grid, f.blocks, f.ops, f.regs, QpSolver());
    const double scale = std::max(1.0, mp.b.lpNorm<Eigen::Infinity>());
    CHECK(mp.kkt_residual <= 1e-4 * scale);

    SUBCASE("objective identity against the projection form") {
        std::mt19937_64 rng(29);
        std::normal_distribution<double> gauss(0.0, 1.0);
        const double c0 = 0.5 * mp.a_hat.dot(mp.M_h * mp.a_hat);
        for (int t = 0; t < 20; ++t) {
            Eigen::VectorXd a(mp.a_hat.size());
            for (int i = 0; i < a.size(); ++i) a(i) = gauss(rng);
            const Eigen::VectorXd d = a - mp.a_hat;
            const double lhs = mp.J(a);
            const double rhs = 0.5 * d.dot(mp.M_h * d) - c0;
            CHECK(std::abs(lhs - rhs) <= 1e-8 * std::max(1.0, std::abs(lhs)));
        }
    }

    SUBCASE("inactive constraints mean a* equals a_hat") {
        // A generously wide-band book keeps the unconstrained optimum inside
        // the polyhedron only if it happens to be no-arb; instead verify the
        // complementary fact directly: when a_hat is feasible, a* matches it.
        Eigen::VectorXd vK = f.ops.At_K * mp.a_hat;
        Eigen::VectorXd vKK = -(f.ops.At_KK * mp.a_hat);
        Eigen::VectorXd vcal = -(f.ops.At_taukK * mp.a_hat);
        Eigen::VectorXd pr = f.blocks.A * mp.a_hat;
        const bool feasible = vK.maxCoeff() <= 1e-9 && vKK.maxCoeff() <= 1e-9 &&
                              vcal.maxCoeff() <= 1e-9 && pr.minCoeff() >= -1e-9 &&
                              (pr - f.grid.F).maxCoeff() <= 1e-9;
        if (feasible)
            CHECK((mp.a_star - mp.a_hat).lpNorm<Eigen::Infinity>() <=
                  1e-6 * std::max(1.0, mp.a_hat.lpNorm<Eigen::Infinity>()));
        else
            CHECK((mp.a_star - mp.a_hat).lpNorm<Eigen::Infinity>() > 0.0);
    }
}
