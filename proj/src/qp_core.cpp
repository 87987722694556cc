#include "arbfit/qp_core.hpp"

#include <Eigen/SparseCholesky>
#include <chrono>
#include <cmath>

namespace arbfit {

namespace {

double inf_norm(const Eigen::VectorXd& v) {
    return v.size() ? v.lpNorm<Eigen::Infinity>() : 0.0;
}

Eigen::VectorXd clamp_box(const Eigen::VectorXd& v, const Eigen::VectorXd& l,
                          const Eigen::VectorXd& u) {
    return v.cwiseMax(l).cwiseMin(u);
}

double box_dist_inf(const Eigen::VectorXd& v, const Eigen::VectorXd& l, const Eigen::VectorXd& u) {
    double d = 0.0;
    for (int i = 0; i < v.size(); ++i) {
        d = std::max(d, std::max(l(i) - v(i), 0.0));
        d = std::max(d, std::max(v(i) - u(i), 0.0));
    }
    return d;
}

// KKT matrix [[P + sigma I, M^T], [M, -diag(1/rho)]].
Eigen::SparseMatrix<double> build_kkt(const QpProblem& prob, double sigma,
                                      const Eigen::VectorXd& rho) {
    const int n = prob.n(), m = prob.m();
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(prob.P.nonZeros() + 2 * prob.M.nonZeros() + n + m);
    for (int k = 0; k < prob.P.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(prob.P, k); it; ++it)
            trips.emplace_back(it.row(), it.col(), it.value());
    for (int i = 0; i < n; ++i) trips.emplace_back(i, i, sigma);
    for (int k = 0; k < prob.M.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(prob.M, k); it; ++it) {
            trips.emplace_back(n + it.row(), it.col(), it.value());
            trips.emplace_back(it.col(), n + it.row(), it.value());
        }
    for (int i = 0; i < m; ++i) trips.emplace_back(n + i, n + i, -1.0 / rho(i));
    Eigen::SparseMatrix<double> K(n + m, n + m);
    K.setFromTriplets(trips.begin(), trips.end());
    return K;
}

int positive_inertia(const Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>& ldlt) {
    int np = 0;
    const auto& D = ldlt.vectorD();
    for (int i = 0; i < D.size(); ++i)
        if (D(i) > 0.0) ++np;
    return np;
}

}  // namespace

void QpProblem::validate() const {
    const int N = n(), m_ = m();
    if (P.rows() != N || P.cols() != N) throw std::invalid_argument("qp: P must be n x n");
    if (M.rows() != m_ || (m_ > 0 && M.cols() != N))
        throw std::invalid_argument("qp: M dims inconsistent with l/u");
    if (u.size() != m_) throw std::invalid_argument("qp: l/u size mismatch");
    for (int i = 0; i < m_; ++i)
        if (l(i) > u(i)) throw std::invalid_argument("qp: l > u at row " + std::to_string(i));
    Eigen::SparseMatrix<double> D = Eigen::SparseMatrix<double>(P.transpose()) - P;
    if (D.coeffs().size() > 0 && D.coeffs().abs().maxCoeff() > 1e-10)
        throw std::invalid_argument("qp: P not symmetric");
}

double QpProblem::objective(const Eigen::VectorXd& x) const {
    return 0.5 * x.dot(P * x) + q.dot(x);
}

QpCertificate kkt_certificate(const QpProblem& prob, const QpSolution& sol, double eps_abs,
                              double eps_rel, const std::string& tag) {
    QpCertificate c;
    c.tag = tag;
    const Eigen::VectorXd Px = prob.P * sol.x;
    const Eigen::VectorXd Mty = prob.m() ? Eigen::VectorXd(prob.M.transpose() * sol.y)
                                         : Eigen::VectorXd::Zero(prob.n());
    c.stationarity = inf_norm(Px + prob.q + Mty);
    c.stationarity_tol =
        eps_abs + eps_rel * std::max({inf_norm(Px), inf_norm(prob.q), inf_norm(Mty)});
    if (prob.m()) {
        const Eigen::VectorXd Mx = prob.M * sol.x;
        c.primal_infeas = box_dist_inf(Mx, prob.l, prob.u);
        c.primal_tol = eps_abs + eps_rel * std::max(inf_norm(Mx), inf_norm(sol.z));
    } else {
        c.primal_tol = eps_abs;
    }
    c.pass = c.stationarity <= c.stationarity_tol && c.primal_infeas <= c.primal_tol;
    return c;
}

CertificateRegistry& CertificateRegistry::instance() {
    static CertificateRegistry reg;
    return reg;
}

QpSolution QpSolver::solve(const QpProblem& prob) const {
    prob.validate();
    return run(prob, Eigen::VectorXd::Zero(prob.n()), Eigen::VectorXd::Zero(prob.m()),
               Eigen::VectorXd::Zero(prob.m()));
}

QpSolution QpSolver::solve_warm(const QpProblem& prob, const QpSolution& prev) const {
    prob.validate();
    if (prev.x.size() != prob.n() || prev.y.size() != prob.m() || prev.z.size() != prob.m())
        return solve(prob);
    return run(prob, prev.x, clamp_box(prev.z, prob.l, prob.u), prev.y);
}

QpSolution QpSolver::run(const QpProblem& prob, const Eigen::VectorXd& x0,
                         const Eigen::VectorXd& z0, const Eigen::VectorXd& y0) const {
    const auto t0 = std::chrono::steady_clock::now();
    const int n = prob.n(), m = prob.m();

    // ---- Ruiz equilibration: solve the scaled problem, test unscaled
    // residuals. x = dvec .* x_hat, y = evec .* y_hat / c, z = z_hat ./ evec.
    QpProblem sp_prob;
    sp_prob.P = prob.P;
    sp_prob.q = prob.q;
    sp_prob.M = prob.M;
    sp_prob.l = prob.l;
    sp_prob.u = prob.u;
    Eigen::ArrayXd dvec = Eigen::ArrayXd::Ones(n);
    Eigen::ArrayXd evec = Eigen::ArrayXd::Ones(std::max(m, 1));
    double c_scale = 1.0;
    {
        auto col_inf = [](const Eigen::SparseMatrix<double>& A, Eigen::ArrayXd& out) {
            out.setZero();
            for (int k = 0; k < A.outerSize(); ++k)
                for (Eigen::SparseMatrix<double>::InnerIterator it(A, k); it; ++it)
                    out(it.col()) = std::max(out(it.col()), std::abs(it.value()));
        };
        auto row_inf = [](const Eigen::SparseMatrix<double>& A, Eigen::ArrayXd& out) {
            out.setZero();
            for (int k = 0; k < A.outerSize(); ++k)
                for (Eigen::SparseMatrix<double>::InnerIterator it(A, k); it; ++it)
                    out(it.row()) = std::max(out(it.row()), std::abs(it.value()));
        };
        Eigen::ArrayXd np(n), mc(n), mr(std::max(m, 1));
        for (int pass = 0; pass < st_.scaling_iters; ++pass) {
            col_inf(sp_prob.P, np);
            if (m) {
                col_inf(sp_prob.M, mc);
                row_inf(sp_prob.M, mr);
            } else {
                mc.setZero();
            }
            Eigen::ArrayXd dj = np.max(mc).sqrt();
            for (int i = 0; i < n; ++i)
                if (dj(i) < 1e-10) dj(i) = 1.0;
            Eigen::ArrayXd ei = mr.sqrt();
            for (int i = 0; i < (m ? m : 1); ++i)
                if (ei(i) < 1e-10) ei(i) = 1.0;

            for (int k = 0; k < sp_prob.P.outerSize(); ++k)
                for (Eigen::SparseMatrix<double>::InnerIterator it(sp_prob.P, k); it; ++it)
                    it.valueRef() /= dj(it.row()) * dj(it.col());
            sp_prob.q.array() /= dj;
            if (m) {
                for (int k = 0; k < sp_prob.M.outerSize(); ++k)
                    for (Eigen::SparseMatrix<double>::InnerIterator it(sp_prob.M, k); it; ++it)
                        it.valueRef() /= ei(it.row()) * dj(it.col());
                sp_prob.l.array() /= ei;
                sp_prob.u.array() /= ei;
                evec /= ei;
            }
            dvec /= dj;

            // Cost normalization.
            col_inf(sp_prob.P, np);
            const double g = np.size() ? np.mean() : 0.0;
            const double gamma = 1.0 / std::max({g, inf_norm(sp_prob.q), 1e-10});
            sp_prob.P *= gamma;
            sp_prob.q *= gamma;
            c_scale *= gamma;
        }
    }
    const Eigen::ArrayXd dinv = dvec.inverse(), einv = evec.inverse();

    // Per-row penalty: equality rows run much stiffer.
    double rho_scalar = st_.rho0;
    auto rho_vector = [&](double base) {
        Eigen::VectorXd rho(m);
        for (int i = 0; i < m; ++i) {
            const bool eq = sp_prob.l(i) >= sp_prob.u(i) - 1e-14;
            rho(i) = std::min(std::max(eq ? base * st_.rho_eq_boost : base, st_.rho_min),
                              st_.rho_max);
        }
        return rho;
    };
    Eigen::VectorXd rho = rho_vector(rho_scalar);

    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
    auto factorize = [&]() {
        ldlt.compute(build_kkt(sp_prob, st_.sigma, m ? rho : Eigen::VectorXd()));
        if (ldlt.info() != Eigen::Success)
            throw std::invalid_argument("qp: KKT factorization failed");
        if (positive_inertia(ldlt) != n)
            throw std::invalid_argument("qp: negative curvature detected (P not PSD)");
    };
    factorize();

    QpSolution sol;  // holds scaled iterates until the end
    sol.x = (x0.array() * dinv).matrix();
    sol.z = m ? Eigen::VectorXd((z0.array() * evec).matrix()) : z0;
    sol.y = m ? Eigen::VectorXd((y0.array() * einv * c_scale).matrix()) : y0;
    if (st_.record_residuals) sol.residual_history.reserve(1024);

    auto unscale = [&](QpSolution s) {
        s.x = (s.x.array() * dvec).matrix();
        if (m) {
            s.z = (s.z.array() * einv).matrix();
            s.y = (s.y.array() * evec / c_scale).matrix();
        }
        return s;
    };

    // Active-set polish: working-set resolve of the original problem. Seeds
    // the set from the rows z holds at a bound, then adds violated rows and
    // drops wrong-sign multipliers until the face is consistent. Keeps the
    // best iterate; mutates the (unscaled) candidate in place. Returns false
    // if no reduced KKT system could be factorized.
    double polish_sign_viol = 0.0;  // wrong-sign dual mass of the last polish
    auto try_polish = [&](QpSolution& cand) {
        if (!m) return false;
        // side: 0 free, -1 pinned at l, +1 pinned at u.
        std::vector<int> side(m, 0);
        std::vector<bool> is_eq(m, false);
        for (int i = 0; i < m; ++i) {
            const double span = std::max({std::abs(prob.l(i)), std::abs(prob.u(i)), 1.0});
            if (prob.l(i) >= prob.u(i) - 1e-14) {
                is_eq[i] = true;
                side[i] = -1;
            } else if (cand.z(i) - prob.l(i) <= 1e-12 * span) {
                side[i] = -1;
            } else if (prob.u(i) - cand.z(i) <= 1e-12 * span) {
                side[i] = 1;
            }
        }
        Eigen::SparseMatrix<double> Mt = prob.M.transpose();
        Eigen::VectorXd x_best, y_best;
        double best_score = std::numeric_limits<double>::infinity();
        for (int round = 0; round < 40; ++round) {
            std::vector<int> act_rows;
            for (int i = 0; i < m; ++i)
                if (side[i] != 0) act_rows.push_back(i);
            const int ma = static_cast<int>(act_rows.size());
            std::vector<Eigen::Triplet<double>> trips;
            for (int k = 0; k < prob.P.outerSize(); ++k)
                for (Eigen::SparseMatrix<double>::InnerIterator itP(prob.P, k); itP; ++itP)
                    trips.emplace_back(itP.row(), itP.col(), itP.value());
            for (int i = 0; i < n; ++i) trips.emplace_back(i, i, 1e-12);
            for (int r = 0; r < ma; ++r) {
                for (Eigen::SparseMatrix<double>::InnerIterator itM(Mt, act_rows[r]); itM;
                     ++itM) {
                    trips.emplace_back(n + r, itM.row(), itM.value());
                    trips.emplace_back(itM.row(), n + r, itM.value());
                }
                trips.emplace_back(n + r, n + r, -1e-12);
            }
            Eigen::SparseMatrix<double> Kp(n + ma, n + ma);
            Kp.setFromTriplets(trips.begin(), trips.end());
            Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> pol(Kp);
            if (pol.info() != Eigen::Success) break;
            Eigen::VectorXd prhs(n + ma);
            prhs.head(n) = -prob.q;
            for (int r = 0; r < ma; ++r)
                prhs(n + r) = side[act_rows[r]] < 0 ? prob.l(act_rows[r]) : prob.u(act_rows[r]);
            Eigen::VectorXd sol_p = pol.solve(prhs);
            // One refinement pass.
            {
                Eigen::VectorXd resid = prhs - Kp * sol_p;
                sol_p += pol.solve(resid);
            }
            const Eigen::VectorXd x_p = sol_p.head(n);
            Eigen::VectorXd y_p = Eigen::VectorXd::Zero(m);
            for (int r = 0; r < ma; ++r) y_p(act_rows[r]) = sol_p(n + r);
            const Eigen::VectorXd Mx = prob.M * x_p;
            // Wrong-sign multipliers flag a misidentified face: the point can
            // satisfy stationarity and feasibility yet not be the optimum.
            double sviol = 0.0;
            for (int i = 0; i < m; ++i) {
                if (is_eq[i]) continue;
                if (side[i] == -1) sviol = std::max(sviol, y_p(i));
                if (side[i] == 1) sviol = std::max(sviol, -y_p(i));
            }
            const double score =
                std::max({box_dist_inf(Mx, prob.l, prob.u),
                          inf_norm(prob.P * x_p + prob.q + Mt * y_p), sviol});
            if (score < best_score) {
                best_score = score;
                x_best = x_p;
                y_best = y_p;
                polish_sign_viol = sviol;
            }
            // Drop wrong-sign multipliers, pin violated rows.
            const double vtol = st_.eps_abs + 0.1 * st_.eps_rel * std::max(1.0, inf_norm(Mx));
            bool changed = false;
            for (int i = 0; i < m; ++i) {
                if (is_eq[i]) continue;
                if (side[i] == -1 && y_p(i) > st_.polish_active_tol)
                    side[i] = 0, changed = true;
                else if (side[i] == 1 && y_p(i) < -st_.polish_active_tol)
                    side[i] = 0, changed = true;
                else if (side[i] == 0 && Mx(i) < prob.l(i) - vtol)
                    side[i] = -1, changed = true;
                else if (side[i] == 0 && Mx(i) > prob.u(i) + vtol)
                    side[i] = 1, changed = true;
            }
            if (!changed) break;
        }
        if (!x_best.size()) return false;
        cand.x = x_best;
        cand.y = y_best;
        cand.z = clamp_box(prob.M * cand.x, prob.l, prob.u);
        const auto cert = kkt_certificate(prob, cand, st_.eps_abs, st_.eps_rel);
        cand.primal_residual = cert.primal_infeas;
        cand.dual_residual = cert.stationarity;
        cand.polished = true;
        return true;
    };

    Eigen::VectorXd rhs(n + m), xz(n + m);
    int it = 0;
    int last_polish_try = 0;
    int polish_spacing = 10 * st_.check_interval;  // doubles after each failure
    bool returned_polished = false;
    for (it = 1; it <= st_.max_iter; ++it) {
        rhs.head(n) = st_.sigma * sol.x - sp_prob.q;
        if (m) rhs.tail(m) = sol.z - rho.cwiseInverse().cwiseProduct(sol.y);
        xz = ldlt.solve(rhs);
        const Eigen::VectorXd x_tilde = xz.head(n);
        if (m) {
            const Eigen::VectorXd nu = xz.tail(m);
            const Eigen::VectorXd z_tilde =
                sol.z + rho.cwiseInverse().cwiseProduct(nu - sol.y);
            const Eigen::VectorXd z_relax = st_.alpha * z_tilde + (1.0 - st_.alpha) * sol.z;
            sol.x = st_.alpha * x_tilde + (1.0 - st_.alpha) * sol.x;
            const Eigen::VectorXd z_new =
                clamp_box(z_relax + rho.cwiseInverse().cwiseProduct(sol.y), sp_prob.l,
                          sp_prob.u);
            sol.y += rho.cwiseProduct(z_relax - z_new);
            sol.z = z_new;
        } else {
            sol.x = st_.alpha * x_tilde + (1.0 - st_.alpha) * sol.x;
        }

        const bool check = st_.record_residuals || it % st_.check_interval == 0 ||
                           it == st_.max_iter;
        if (!check) continue;

        // Residuals of the scaled problem; equilibration makes these a faithful
        // optimality measure, and polish restores full accuracy afterwards.
        const Eigen::VectorXd Px = sp_prob.P * sol.x;
        const Eigen::VectorXd Mx = m ? Eigen::VectorXd(sp_prob.M * sol.x) : Eigen::VectorXd();
        const Eigen::VectorXd Mty = m ? Eigen::VectorXd(sp_prob.M.transpose() * sol.y)
                                      : Eigen::VectorXd::Zero(n);
        const double rp = m ? inf_norm(Mx - sol.z) : 0.0;
        const double rd = inf_norm(Px + sp_prob.q + Mty);
        const double sp = std::max({m ? inf_norm(Mx) : 0.0, inf_norm(sol.z), 1e-12});
        const double sd = std::max({inf_norm(Px), inf_norm(sp_prob.q), inf_norm(Mty), 1e-12});
        const double eps_p = st_.eps_abs + st_.eps_rel * sp;
        const double eps_d = st_.eps_abs + st_.eps_rel * sd;
        sol.primal_residual = rp;
        sol.dual_residual = rd;
        if (st_.record_residuals) sol.residual_history.push_back(std::max(rp, rd));

        if (rp <= eps_p && rd <= eps_d) {
            sol.status = QpStatus::solved;
            break;
        }
        // Near-degenerate problems close the last digits far faster through a
        // direct active-set resolve than through more splitting iterations.
        if (st_.polish && m && std::max(rp / sp, rd / sd) <= st_.polish_gate &&
            it - last_polish_try >= polish_spacing) {
            last_polish_try = it;
            QpSolution cand = unscale(sol);
            if (try_polish(cand) &&
                kkt_certificate(prob, cand, st_.eps_abs, st_.eps_rel).pass &&
                polish_sign_viol <= st_.eps_abs + st_.eps_rel * inf_norm(cand.y)) {
                cand.status = QpStatus::solved;
                sol = cand;
                returned_polished = true;
                break;
            }
            polish_spacing *= 2;
        }
        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (elapsed > st_.time_cap_seconds) {
            sol.status = QpStatus::time_cap;
            break;
        }

        if (m && it % st_.check_interval == 0) {
            const double ratio = std::sqrt((rp / sp) / std::max(rd / sd, 1e-16));
            const double candidate =
                std::min(std::max(rho_scalar * ratio, st_.rho_min), st_.rho_max);
            if (candidate > 5.0 * rho_scalar || candidate < rho_scalar / 5.0) {
                rho_scalar = candidate;
                rho = rho_vector(rho_scalar);
                factorize();
            }
        }
    }
    sol.iterations = std::min(it, st_.max_iter);
    if (!returned_polished) {
        sol = unscale(sol);
        const Eigen::VectorXd Px = prob.P * sol.x;
        const Eigen::VectorXd Mty = m ? Eigen::VectorXd(prob.M.transpose() * sol.y)
                                      : Eigen::VectorXd::Zero(n);
        sol.dual_residual = inf_norm(Px + prob.q + Mty);
        sol.primal_residual = m ? inf_norm(prob.M * sol.x - sol.z) : 0.0;
        if (sol.status != QpStatus::solved && sol.status != QpStatus::time_cap)
            sol.status = QpStatus::max_iter;

        // Final polish; kept only if it does not worsen the KKT residuals. A
        // certified polish also rescues runs that exhausted the iteration cap.
        if (st_.polish && m) {
            QpSolution cand = sol;
            if (try_polish(cand)) {
                const auto cert_new = kkt_certificate(prob, cand, st_.eps_abs, st_.eps_rel);
                const auto cert_old = kkt_certificate(prob, sol, st_.eps_abs, st_.eps_rel);
                const bool signs_ok =
                    polish_sign_viol <= st_.eps_abs + st_.eps_rel * inf_norm(cand.y);
                if (signs_ok &&
                    std::max(cert_new.stationarity, cert_new.primal_infeas) <=
                        std::max(cert_old.stationarity, cert_old.primal_infeas)) {
                    cand.status = cert_new.pass ? QpStatus::solved : sol.status;
                    cand.residual_history = sol.residual_history;
                    cand.iterations = sol.iterations;
                    sol = cand;
                }
            }
        }
    }

    sol.objective = prob.objective(sol.x);
    sol.solve_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (sol.status == QpStatus::solved) {
        CertificateRegistry::instance().record(
            kkt_certificate(prob, sol, st_.eps_abs, st_.eps_rel, st_.tag));
    }
    return sol;
}

}  // namespace arbfit
