#include "arbfit/fog_postfit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <stdexcept>

namespace arbfit {

namespace {

double interval_dist(double x, double lo, double hi) {
    return std::max({lo - x, 0.0, x - hi});
}

double median_of(std::vector<double> v, double fallback) {
    if (v.empty()) return fallback;
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    double m = v[v.size() / 2];
    return m > 0.0 ? m : fallback;
}

// Supports of the stacked constraint rows, as sorted node-index lists.
std::vector<std::vector<int>> row_supports(const Eigen::SparseMatrix<double>& L) {
    Eigen::SparseMatrix<double, Eigen::RowMajor> R(L);
    std::vector<std::vector<int>> sup(R.rows());
    for (int i = 0; i < R.rows(); ++i)
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(R, i); it; ++it)
            if (it.value() != 0.0) sup[i].push_back(static_cast<int>(it.col()));
    return sup;
}

}  // namespace

// ---- Nodal no-arbitrage polyhedron -----------------------------------------

NodalNoArbSystem build_nodal_system(const CollocationGrid& grid) {
    NodalNoArbSystem sys;
    const int G = grid.G(), nm = grid.n_m, nt = grid.n_tau;
    sys.A_cal = nodal_calendar_derivative(grid);
    sys.D2 = nodal_strike_second(grid);

    sys.n_bnd = 2 * G;
    sys.n_mono = nt * (nm - 1);
    sys.n_conv = nt * (nm - 2);
    sys.n_cal = G;
    const int rows = sys.n_bnd + sys.n_mono + sys.n_conv + sys.n_cal;
    sys.r.resize(rows);

    std::vector<Eigen::Triplet<double>> trips;
    int row = 0;
    for (int g = 0; g < G; ++g) {  // -u_g <= 0
        trips.emplace_back(row, g, -1.0);
        sys.r(row++) = 0.0;
    }
    for (int g = 0; g < G; ++g) {  // u_g <= F_g
        trips.emplace_back(row, g, 1.0);
        sys.r(row++) = grid.F(g);
    }
    for (int j = 0; j < nt; ++j)  // u_{i+1,j} - u_{i,j} <= 0
        for (int i = 0; i + 1 < nm; ++i) {
            trips.emplace_back(row, grid.g(i + 1, j), 1.0);
            trips.emplace_back(row, grid.g(i, j), -1.0);
            sys.r(row++) = 0.0;
        }
    // Convexity via the nonuniform second-derivative stencil: (D2 u)_g >= 0.
    Eigen::SparseMatrix<double, Eigen::RowMajor> D2r(sys.D2);
    for (int j = 0; j < nt; ++j)
        for (int i = 1; i + 1 < nm; ++i) {
            const int g = grid.g(i, j);
            for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(D2r, g); it;
                 ++it)
                trips.emplace_back(row, static_cast<int>(it.col()), -it.value());
            sys.r(row++) = 0.0;
        }
    Eigen::SparseMatrix<double, Eigen::RowMajor> Cr(sys.A_cal);
    for (int g = 0; g < G; ++g) {  // -(A_cal u)_g <= 0
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(Cr, g); it; ++it)
            trips.emplace_back(row, static_cast<int>(it.col()), -it.value());
        sys.r(row++) = 0.0;
    }
    sys.L.resize(rows, G);
    sys.L.setFromTriplets(trips.begin(), trips.end());
    return sys;
}

bool in_cglob(const NodalNoArbSystem& sys, const Eigen::VectorXd& u, double tol) {
    return ((sys.L * u - sys.r).array() <= tol).all();
}

Eigen::VectorXd project_to_cglob(const NodalNoArbSystem& sys, const Eigen::VectorXd& u0,
                                 const QpSolver& solver) {
    QpProblem qp;
    const int G = static_cast<int>(u0.size());
    qp.P.resize(G, G);
    qp.P.setIdentity();
    qp.q = -u0;
    qp.M = sys.L;
    qp.l = Eigen::VectorXd::Constant(sys.rows(), -kQpInf);
    qp.u = sys.r;
    auto sol = solver.solve(qp);
    if (sol.status != QpStatus::solved)
        throw std::runtime_error("project_to_cglob: projection QP did not converge");
    return sol.x;
}

// ---- Badness field ----------------------------------------------------------

Eigen::SparseMatrix<double> bilinear_sampler(const CollocationGrid& grid,
                                             const std::vector<std::pair<double, double>>& locs,
                                             std::vector<int>* outside) {
    const auto& ms = grid.m_nodes;
    const auto& ts = grid.tau_nodes;
    std::vector<Eigen::Triplet<double>> trips;
    for (int q = 0; q < static_cast<int>(locs.size()); ++q) {
        const double m = locs[q].first, tau = locs[q].second;
        if (m < ms.front() || m > ms.back() || tau < ts.front() || tau > ts.back()) {
            if (outside) outside->push_back(q);
            continue;
        }
        const int i = std::min(
            static_cast<int>(std::upper_bound(ms.begin(), ms.end(), m) - ms.begin()) - 1,
            grid.n_m - 2);
        const int j = std::min(
            static_cast<int>(std::upper_bound(ts.begin(), ts.end(), tau) - ts.begin()) - 1,
            grid.n_tau - 2);
        const double sx = (m - ms[i]) / (ms[i + 1] - ms[i]);
        const double sy = (tau - ts[j]) / (ts[j + 1] - ts[j]);
        trips.emplace_back(q, grid.g(i, j), (1 - sx) * (1 - sy));
        trips.emplace_back(q, grid.g(i + 1, j), sx * (1 - sy));
        trips.emplace_back(q, grid.g(i, j + 1), (1 - sx) * sy);
        trips.emplace_back(q, grid.g(i + 1, j + 1), sx * sy);
    }
    Eigen::SparseMatrix<double> S(static_cast<int>(locs.size()), grid.G());
    S.setFromTriplets(trips.begin(), trips.end());
    return S;
}

Eigen::VectorXd convolve1d(const Eigen::VectorXd& x, const Eigen::VectorXd& kernel) {
    if (kernel.size() % 2 == 0) throw std::invalid_argument("convolve1d: kernel must be odd");
    const int n = static_cast<int>(x.size()), R = static_cast<int>(kernel.size()) / 2;
    Eigen::VectorXd y = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i)
        for (int o = -R; o <= R; ++o) {
            const int s = i - o;
            if (s >= 0 && s < n) y(i) += kernel(o + R) * x(s);
        }
    return y;
}

Eigen::VectorXd gaussian_kernel(double sigma) {
    if (sigma <= 0.0) throw std::invalid_argument("gaussian_kernel: sigma must be positive");
    const int R = static_cast<int>(std::ceil(3.0 * sigma));
    Eigen::VectorXd k(2 * R + 1);
    for (int o = -R; o <= R; ++o) k(o + R) = std::exp(-0.5 * o * o / (sigma * sigma));
    return k / k.sum();
}

BadnessField badness_map(const NodalSurface& u0, const QuoteBook& book,
                         const CollocationGrid& grid, const NodalNoArbSystem& sys,
                         const BadnessParams& params) {
    const int G = grid.G(), nm = grid.n_m, nt = grid.n_tau;
    BadnessField out;

    std::vector<std::pair<double, double>> locs;
    for (const auto& q : book.quotes) locs.push_back({q.m, q.tau});
    const auto S = bilinear_sampler(grid, locs, &out.excluded_quotes);
    std::vector<bool> excluded(book.N(), false);
    for (int q : out.excluded_quotes) excluded[q] = true;

    const Eigen::VectorXd prices = S * u0.u;
    Eigen::VectorXd d = Eigen::VectorXd::Zero(book.N());
    for (int q = 0; q < book.N(); ++q)
        if (!excluded[q]) d(q) = interval_dist(prices(q), book.b(q), book.a(q));

    // Transport misfits to nodes: average over quotes within one grid cell.
    auto cell = [](const std::vector<double>& nodes, int i) {
        double c = 0.0;
        if (i > 0) c = std::max(c, nodes[i] - nodes[i - 1]);
        if (i + 1 < static_cast<int>(nodes.size())) c = std::max(c, nodes[i + 1] - nodes[i]);
        return c;
    };
    out.w_band = Eigen::VectorXd::Zero(G);
    for (int j = 0; j < nt; ++j)
        for (int i = 0; i < nm; ++i) {
            const double cm = cell(grid.m_nodes, i), ct = cell(grid.tau_nodes, j);
            double sum = 0.0;
            int cnt = 0;
            for (int q = 0; q < book.N(); ++q) {
                if (excluded[q]) continue;
                if (std::abs(book.quotes[q].m - grid.m_nodes[i]) <= cm &&
                    std::abs(book.quotes[q].tau - grid.tau_nodes[j]) <= ct) {
                    sum += d(q);
                    ++cnt;
                }
            }
            if (cnt > 0) out.w_band(grid.g(i, j)) = sum / cnt;
        }

    // Nodal static no-arbitrage defects.
    out.w_noarb = Eigen::VectorXd::Zero(G);
    const Eigen::VectorXd d2u = sys.D2 * u0.u;
    const Eigen::VectorXd cal = sys.A_cal * u0.u;
    for (int j = 0; j < nt; ++j)
        for (int i = 0; i < nm; ++i) {
            const int g = grid.g(i, j);
            double v = interval_dist(u0.u(g), 0.0, grid.F(g));
            if (i + 1 < nm) v = std::max(v, u0.u(grid.g(i + 1, j)) - u0.u(g));
            if (i > 0) v = std::max(v, u0.u(g) - u0.u(grid.g(i - 1, j)));
            if (i > 0 && i + 1 < nm) v = std::max(v, -d2u(g));
            v = std::max(v, -cal(g));
            out.w_noarb(g) = std::max(v, 0.0);
        }

    std::vector<double> widths, fwds(grid.F.data(), grid.F.data() + G);
    for (int q = 0; q < book.N(); ++q)
        if (!excluded[q]) widths.push_back(book.a(q) - book.b(q));
    const double ab =
        params.alpha_band > 0.0 ? params.alpha_band : 1.0 / median_of(widths, 1.0);
    const double an =
        params.alpha_noarb > 0.0 ? params.alpha_noarb : 1.0 / median_of(fwds, 1.0);
    out.w_raw = ab * out.w_band + an * out.w_noarb;

    // Separable Gaussian smoothing, then clip to [0,1].
    const Eigen::VectorXd k = gaussian_kernel(params.sigma);
    Eigen::MatrixXd img(nm, nt);
    for (int j = 0; j < nt; ++j)
        for (int i = 0; i < nm; ++i) img(i, j) = out.w_raw(grid.g(i, j));
    for (int j = 0; j < nt; ++j) img.col(j) = convolve1d(img.col(j), k);
    for (int i = 0; i < nm; ++i)
        img.row(i) = convolve1d(img.row(i).transpose(), k).transpose();
    out.w = Eigen::VectorXd::Zero(G);
    for (int j = 0; j < nt; ++j)
        for (int i = 0; i < nm; ++i)
            out.w(grid.g(i, j)) = std::clamp(img(i, j), 0.0, 1.0);
    return out;
}

// ---- Patch decomposition ----------------------------------------------------

std::vector<Patch> decompose_patches(const BadnessField& bad, const CollocationGrid& grid,
                                     const NodalNoArbSystem& sys, const NodalSurface& u0,
                                     const BadnessParams& params, const QpSolver& solver) {
    const int G = grid.G(), nm = grid.n_m, nt = grid.n_tau;
    if (params.theta <= 0.0 || params.theta > 1.0)
        throw std::invalid_argument("decompose_patches: theta must lie in (0,1]");
    std::vector<bool> active(G);
    for (int g = 0; g < G; ++g) active[g] = bad.w(g) > params.theta;

    // Connected components in the chosen adjacency.
    std::vector<int> comp(G, -1);
    int ncomp = 0;
    for (int g0 = 0; g0 < G; ++g0) {
        if (!active[g0] || comp[g0] >= 0) continue;
        std::queue<int> bfs;
        bfs.push(g0);
        comp[g0] = ncomp;
        while (!bfs.empty()) {
            const int g = bfs.front();
            bfs.pop();
            const int i = g % nm, j = g / nm;
            for (int dj = -1; dj <= 1; ++dj)
                for (int di = -1; di <= 1; ++di) {
                    if (di == 0 && dj == 0) continue;
                    if (params.adjacency == 4 && di != 0 && dj != 0) continue;
                    const int ii = i + di, jj = j + dj;
                    if (ii < 0 || ii >= nm || jj < 0 || jj >= nt) continue;
                    const int h = grid.g(ii, jj);
                    if (active[h] && comp[h] < 0) {
                        comp[h] = comp[g];
                        bfs.push(h);
                    }
                }
        }
        ++ncomp;
    }

    const auto sup = row_supports(sys.L);
    // Minimal halo: absorb the supports of every constraint that touches the
    // raw component, so the constraints straddling its original boundary become
    // fully controllable. Remaining boundary rows are kept in the patch
    // polyhedron with the off-patch baseline frozen, which is what global
    // reassembly needs.
    auto dilate = [&](std::vector<bool>& in) {
        std::vector<bool> grown = in;
        for (const auto& s : sup) {
            bool any = false;
            for (int g : s) any = any || in[g];
            if (any)
                for (int g : s) grown[g] = true;
        }
        in = grown;
    };

    std::vector<std::vector<bool>> sets;
    for (int c = 0; c < ncomp; ++c) {
        std::vector<bool> in(G, false);
        for (int g = 0; g < G; ++g)
            if (comp[g] == c) in[g] = true;
        dilate(in);
        sets.push_back(std::move(in));
    }
    // Merge patches that share a node or a constraint row, so every constraint
    // involves at most one patch.
    for (bool merged = true; merged;) {
        merged = false;
        for (std::size_t a = 0; a < sets.size() && !merged; ++a)
            for (std::size_t b = a + 1; b < sets.size() && !merged; ++b) {
                bool couple = false;
                for (const auto& s : sup) {
                    bool ina = false, inb = false;
                    for (int g : s) {
                        ina = ina || sets[a][g];
                        inb = inb || sets[b][g];
                    }
                    if (ina && inb) {
                        couple = true;
                        break;
                    }
                }
                if (couple) {
                    for (int g = 0; g < G; ++g) sets[a][g] = sets[a][g] || sets[b][g];
                    sets.erase(sets.begin() + static_cast<long>(b));
                    merged = true;
                }
            }
    }

    std::vector<Patch> patches;
    for (const auto& in : sets) {
        Patch p;
        for (int g = 0; g < G; ++g)
            if (in[g]) p.nodes.push_back(g);
        const int N = static_cast<int>(p.nodes.size());
        std::vector<int> pos(G, -1);
        for (int n = 0; n < N; ++n) pos[p.nodes[n]] = n;

        Eigen::VectorXd u_off = u0.u;
        for (int g : p.nodes) u_off(g) = 0.0;
        for (int a = 0; a < static_cast<int>(sup.size()); ++a) {
            bool any = false;
            for (int g : sup[a]) any = any || in[g];
            if (any) p.rows.push_back(a);
        }
        p.A = Eigen::MatrixXd::Zero(static_cast<int>(p.rows.size()), N);
        p.b.resize(static_cast<int>(p.rows.size()));
        Eigen::SparseMatrix<double, Eigen::RowMajor> Lr(sys.L);
        for (int k = 0; k < static_cast<int>(p.rows.size()); ++k) {
            double dot_off = 0.0;
            for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(Lr, p.rows[k]);
                 it; ++it) {
                const int c = static_cast<int>(it.col());
                if (pos[c] >= 0)
                    p.A(k, pos[c]) = it.value();
                else
                    dot_off += it.value() * u_off(c);
            }
            p.b(k) = sys.r(p.rows[k]) - dot_off;
        }
        p.u0.resize(N);
        for (int n = 0; n < N; ++n) p.u0(n) = u0.u(p.nodes[n]);

        // Feasibility certificate for the reduced polyhedron.
        QpProblem qp;
        qp.P = Eigen::MatrixXd::Identity(N, N).sparseView();
        qp.q = -p.u0;
        qp.M = p.A.sparseView();
        qp.l = Eigen::VectorXd::Constant(p.A.rows(), -kQpInf);
        qp.u = p.b;
        auto sol = solver.solve(qp);
        const double viol =
            p.A.rows() > 0 ? (p.A * sol.x - p.b).maxCoeff() : 0.0;
        if (sol.status != QpStatus::solved || viol > 1e-6) {
            p.feasible = false;
            p.note = "patch dropped: reduced polyhedron appears infeasible";
        }
        patches.push_back(std::move(p));
    }
    return patches;
}

// ---- Fog lattice ------------------------------------------------------------

Eigen::VectorXd FogState::out_selector(int qi, const QuoteBook& book) const {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(lattice_size());
    const int q = quote_ids[qi];
    for (int k = 0; k < n_u; ++k)
        if (levels(k) < book.b(q) || levels(k) > book.a(q)) c(idx(rep[qi], k)) = 1.0;
    return c;
}

FogState build_fog(const Patch& patch, const QuoteBook& book, const CollocationGrid& grid,
                   const FogParams& params) {
    FogState fog;
    const int N = static_cast<int>(patch.nodes.size());
    fog.n_u = params.n_u;
    if (params.n_u < 2) throw std::invalid_argument("build_fog: need at least two levels");

    double maxF = 0.0;
    for (int g : patch.nodes) maxF = std::max(maxF, grid.F(g));
    const double top = 1.05 * maxF;
    if (top <= 0.0) throw std::invalid_argument("build_fog: nonpositive level range");
    fog.levels.resize(params.n_u);
    for (int k = 0; k < params.n_u; ++k)
        fog.levels(k) = top * k / (params.n_u - 1);

    std::vector<int> pos(grid.G(), -1);
    for (int n = 0; n < N; ++n) pos[patch.nodes[n]] = n;
    const int NL = N * params.n_u;

    // Signed incidence gradients; edges only between lattice nodes present.
    std::vector<Eigen::Triplet<double>> tm, tt, tu;
    int em = 0, et = 0, eu = 0;
    for (int n = 0; n < N; ++n) {
        const int g = patch.nodes[n], i = g % grid.n_m, j = g / grid.n_m;
        const int right = (i + 1 < grid.n_m) ? pos[grid.g(i + 1, j)] : -1;
        const int up = (j + 1 < grid.n_tau) ? pos[grid.g(i, j + 1)] : -1;
        for (int k = 0; k < params.n_u; ++k) {
            if (right >= 0) {
                tm.emplace_back(em, fog.idx(n, k), -1.0);
                tm.emplace_back(em, fog.idx(right, k), 1.0);
                ++em;
            }
            if (up >= 0) {
                tt.emplace_back(et, fog.idx(n, k), -1.0);
                tt.emplace_back(et, fog.idx(up, k), 1.0);
                ++et;
            }
            if (k + 1 < params.n_u) {
                tu.emplace_back(eu, fog.idx(n, k), -1.0);
                tu.emplace_back(eu, fog.idx(n, k + 1), 1.0);
                ++eu;
            }
        }
    }
    fog.Dm.resize(em, NL);
    fog.Dm.setFromTriplets(tm.begin(), tm.end());
    fog.Dt.resize(et, NL);
    fog.Dt.setFromTriplets(tt.begin(), tt.end());
    fog.Du.resize(eu, NL);
    fog.Du.setFromTriplets(tu.begin(), tu.end());
    fog.L = params.kappa_m * Eigen::SparseMatrix<double>(fog.Dm.transpose() * fog.Dm) +
            params.kappa_tau * Eigen::SparseMatrix<double>(fog.Dt.transpose() * fog.Dt) +
            params.kappa_u * Eigen::SparseMatrix<double>(fog.Du.transpose() * fog.Du);

    // Quotes whose nearest grid node lies on the patch.
    auto nearest = [](const std::vector<double>& nodes, double x) {
        int best = 0;
        for (int i = 1; i < static_cast<int>(nodes.size()); ++i)
            if (std::abs(nodes[i] - x) < std::abs(nodes[best] - x)) best = i;
        return best;
    };
    std::vector<std::pair<double, double>> locs;
    std::vector<double> widths;
    for (int q = 0; q < book.N(); ++q) {
        const double m = book.quotes[q].m, tau = book.quotes[q].tau;
        if (m < grid.m_nodes.front() || m > grid.m_nodes.back() ||
            tau < grid.tau_nodes.front() || tau > grid.tau_nodes.back())
            continue;
        const int i = nearest(grid.m_nodes, m);
        const int j = nearest(grid.tau_nodes, tau);
        const int p = pos[grid.g(i, j)];
        if (p < 0) continue;
        fog.quote_ids.push_back(q);
        fog.rep.push_back(p);
        locs.push_back({book.quotes[q].m, book.quotes[q].tau});
        widths.push_back(book.a(q) - book.b(q));
    }
    fog.S_rows = bilinear_sampler(grid, locs);

    const double ab =
        params.alpha_band > 0.0 ? params.alpha_band : 1.0 / median_of(widths, 1.0);
    const double ar = params.alpha_range_mult * ab;
    fog.V = Eigen::VectorXd::Zero(NL);
    for (std::size_t qi = 0; qi < fog.quote_ids.size(); ++qi) {
        const int q = fog.quote_ids[qi];
        for (int k = 0; k < params.n_u; ++k) {
            const double dk = interval_dist(fog.levels(k), book.b(q), book.a(q));
            fog.V(fog.idx(fog.rep[qi], k)) += ab * dk * dk;
        }
    }
    for (int n = 0; n < N; ++n) {
        const double F = grid.F(patch.nodes[n]);
        for (int k = 0; k < params.n_u; ++k)
            if (fog.levels(k) < 0.0 || fog.levels(k) > F) fog.V(fog.idx(n, k)) += ar;
    }
    fog.H = Eigen::MatrixXd(fog.L);
    fog.H.diagonal() += fog.V;
    return fog;
}

// ---- Patch energy -----------------------------------------------------------

PatchEnergy build_patch_energy(const Patch& patch, const CollocationGrid& grid,
                               const NodalNoArbSystem& sys, const NodalSurface& u0) {
    PatchEnergy e;
    const int G = grid.G(), N = static_cast<int>(patch.nodes.size());
    std::vector<int> pos(G, -1);
    for (int n = 0; n < N; ++n) pos[patch.nodes[n]] = n;

    Eigen::SparseMatrix<double, Eigen::RowMajor> D2r(sys.D2);
    std::vector<int> infl;  // density rows touching the patch
    for (int g = 0; g < G; ++g) {
        bool hit = false;
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(D2r, g);
             it && !hit; ++it)
            hit = pos[static_cast<int>(it.col())] >= 0 && it.value() != 0.0;
        if (hit) infl.push_back(g);
    }
    const int R = static_cast<int>(infl.size());

    e.B = Eigen::MatrixXd::Zero(R, N);
    e.rho_off = Eigen::VectorXd::Zero(R);
    for (int k = 0; k < R; ++k)
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(D2r, infl[k]); it;
             ++it) {
            const int p = pos[static_cast<int>(it.col())];
            if (p >= 0)
                e.B(k, p) = it.value();
            else
                e.rho_off(k) += it.value() * u0.u(it.col());
        }

    // Path-graph Laplacian over influence points adjacent in strike on a slice.
    std::vector<int> where(G, -1);
    for (int k = 0; k < R; ++k) where[infl[k]] = k;
    e.H_rho = Eigen::MatrixXd::Zero(R, R);
    for (int k = 0; k < R; ++k) {
        const int g = infl[k], i = g % grid.n_m;
        if (i + 1 < grid.n_m && where[g + 1] >= 0) {
            const int k2 = where[g + 1];
            e.H_rho(k, k) += 1.0;
            e.H_rho(k2, k2) += 1.0;
            e.H_rho(k, k2) -= 1.0;
            e.H_rho(k2, k) -= 1.0;
        }
    }
    e.Q_rho = e.B.transpose() * e.H_rho * e.B;
    e.c_rho = e.B.transpose() * e.H_rho * e.rho_off;
    e.c0 = 0.5 * e.rho_off.dot(e.H_rho * e.rho_off);
    return e;
}

// ---- Energy evaluation --------------------------------------------------------

EnergyBreakdown noise_band_terms(const Eigen::VectorXd& u_interior, const Eigen::VectorXd& pi,
                                 const Patch& patch, const FogState& fog,
                                 const PatchEnergy& energy, const QuoteBook& book,
                                 const NodalSurface& u0, const FogParams& params) {
    EnergyBreakdown out;
    Eigen::VectorXd u_full = u0.u;
    for (std::size_t n = 0; n < patch.nodes.size(); ++n)
        u_full(patch.nodes[n]) = u_interior(static_cast<int>(n));
    const Eigen::VectorXd prices = fog.S_rows * u_full;

    double phi_sum = 0.0;
    for (std::size_t qi = 0; qi < fog.quote_ids.size(); ++qi) {
        const int q = fog.quote_ids[qi];
        QuoteTerm t;
        t.d = interval_dist(prices(static_cast<int>(qi)), book.b(q), book.a(q));
        t.nu = params.eps + fog.out_selector(static_cast<int>(qi), book).dot(pi);
        t.phi = t.d * t.d / t.nu + params.lambda_noise * t.nu;
        phi_sum += t.phi;
        out.terms.push_back(t);
    }
    out.e_cl = 0.5 * params.lambda_cl * (u_interior - patch.u0).squaredNorm();
    const Eigen::VectorXd rho = energy.B * u_interior + energy.rho_off;
    out.e_surf = 0.5 * rho.dot(energy.H_rho * rho);
    out.e_ham = 0.5 * pi.dot(fog.H * pi);
    out.J = phi_sum + out.e_cl + params.lambda_surf * out.e_surf + params.lambda_pi * out.e_ham;
    return out;
}

Eigen::VectorXd simplex_projection(const Eigen::VectorXd& v) {
    const int n = static_cast<int>(v.size());
    std::vector<double> s(v.data(), v.data() + n);
    std::sort(s.begin(), s.end(), std::greater<>());
    double cum = 0.0, theta = 0.0;
    for (int i = 0; i < n; ++i) {
        cum += s[i];
        const double t = (cum - 1.0) / (i + 1);
        if (s[i] - t > 0.0) theta = t;
    }
    return (v.array() - theta).cwiseMax(0.0);
}

// ---- Patch solver -----------------------------------------------------------

namespace {

// One exact u-step: minimize sum d_q^2/nu_q + E_cl + lambda_surf E_surf over
// the patch polyhedron, via the squared-hinge slack reduction.
QpSolution u_step(const Patch& patch, const FogState& fog, const PatchEnergy& energy,
                  const QuoteBook& book, const NodalSurface& u0, const FogParams& params,
                  const Eigen::VectorXd& nu, const QpSolver& solver, const QpSolution* warm) {
    const int N = static_cast<int>(patch.nodes.size());
    const int Qp = static_cast<int>(fog.quote_ids.size());
    const int n = N + Qp;
    std::vector<int> pos(u0.u.size(), -1);
    for (int i = 0; i < N; ++i) pos[patch.nodes[i]] = i;

    // Quote rows restricted to the patch plus their off-patch offsets.
    Eigen::MatrixXd Sq = Eigen::MatrixXd::Zero(Qp, N);
    Eigen::VectorXd off = Eigen::VectorXd::Zero(Qp);
    Eigen::SparseMatrix<double, Eigen::RowMajor> Sr(fog.S_rows);
    for (int qi = 0; qi < Qp; ++qi)
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(Sr, qi); it; ++it) {
            const int p = pos[static_cast<int>(it.col())];
            if (p >= 0)
                Sq(qi, p) = it.value();
            else
                off(qi) += it.value() * u0.u(it.col());
        }

    QpProblem qp;
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
    P.topLeftCorner(N, N) =
        params.lambda_cl * Eigen::MatrixXd::Identity(N, N) + params.lambda_surf * energy.Q_rho;
    for (int qi = 0; qi < Qp; ++qi) P(N + qi, N + qi) = 2.0 / nu(qi);
    qp.P = P.sparseView();
    qp.q = Eigen::VectorXd::Zero(n);
    qp.q.head(N) = -params.lambda_cl * patch.u0 + params.lambda_surf * energy.c_rho;

    const int mc = static_cast<int>(patch.A.rows());
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(mc + 2 * Qp + Qp, n);
    Eigen::VectorXd l = Eigen::VectorXd::Constant(M.rows(), -kQpInf);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(M.rows());
    M.topLeftCorner(mc, N) = patch.A;
    u.head(mc) = patch.b;
    for (int qi = 0; qi < Qp; ++qi) {
        const int q = fog.quote_ids[qi];
        // s^T u - t <= ask - off   and   -s^T u - t <= -(bid - off)
        M.row(mc + 2 * qi).head(N) = Sq.row(qi);
        M(mc + 2 * qi, N + qi) = -1.0;
        u(mc + 2 * qi) = book.a(q) - off(qi);
        M.row(mc + 2 * qi + 1).head(N) = -Sq.row(qi);
        M(mc + 2 * qi + 1, N + qi) = -1.0;
        u(mc + 2 * qi + 1) = -(book.b(q) - off(qi));
        M(mc + 2 * Qp + qi, N + qi) = 1.0;  // t >= 0
        l(mc + 2 * Qp + qi) = 0.0;
        u(mc + 2 * Qp + qi) = kQpInf;
    }
    qp.M = M.sparseView();
    qp.l = l;
    qp.u = u;
    return warm ? solver.solve_warm(qp, *warm) : solver.solve(qp);
}

}  // namespace

PatchSolution solve_patch(const Patch& patch, const FogState& fog, const PatchEnergy& energy,
                          const QuoteBook& book, const NodalSurface& u0,
                          const FogParams& params, const QpSolver& solver) {
    PatchSolution out;
    const int Qp = static_cast<int>(fog.quote_ids.size());
    const int NL = fog.lattice_size();
    out.u = patch.u0;
    out.pi = Eigen::VectorXd::Constant(NL, 1.0 / NL);

    Eigen::MatrixXd Cq(Qp, NL);  // out-of-band selectors, one row per quote
    for (int qi = 0; qi < Qp; ++qi) Cq.row(qi) = fog.out_selector(qi, book).transpose();
    const double h_row = fog.H.cwiseAbs().rowwise().sum().maxCoeff();
    Eigen::VectorXd c_norm2(Qp);
    for (int qi = 0; qi < Qp; ++qi) c_norm2(qi) = Cq.row(qi).squaredNorm();

    auto eval = [&](const Eigen::VectorXd& u, const Eigen::VectorXd& pi) {
        return noise_band_terms(u, pi, patch, fog, energy, book, u0, params);
    };
    auto pi_gradient = [&](const Eigen::VectorXd& pi, const Eigen::VectorXd& d2) {
        const Eigen::VectorXd nu = (Cq * pi).array() + params.eps;
        const Eigen::VectorXd coef =
            (-d2.array() / (nu.array() * nu.array()) + params.lambda_noise).matrix();
        return (Cq.transpose() * coef + params.lambda_pi * (fog.H * pi)).eval();
    };

    auto breakdown = eval(out.u, out.pi);
    out.J_trail.push_back(breakdown.J);
    QpSolution warm;
    bool have_warm = false;
    double pi_res = 0.0;

    for (int t = 0; t < 500; ++t) {
        const Eigen::VectorXd prev_u = out.u, prev_pi = out.pi;
        // u-step with the current noise scales.
        Eigen::VectorXd nu(Qp);
        for (int qi = 0; qi < Qp; ++qi) nu(qi) = breakdown.terms[qi].nu;
        auto sol = u_step(patch, fog, energy, book, u0, params, nu, solver,
                          have_warm ? &warm : nullptr);
        if (sol.status != QpStatus::solved)
            throw std::runtime_error("solve_patch: u-step QP did not converge");
        warm = sol;
        have_warm = true;
        const double u_move =
            (sol.x.head(patch.u0.size()) - out.u).lpNorm<Eigen::Infinity>();
        out.u = sol.x.head(patch.u0.size());

        // pi-step: projected gradient on the simplex with a 1/L step from the
        // curvature bound. Function-value line searches stall below the
        // roundoff floor of J, so descent comes from the step bound instead.
        Eigen::VectorXd d2(Qp);
        {
            auto bd = eval(out.u, out.pi);
            for (int qi = 0; qi < Qp; ++qi) d2(qi) = bd.terms[qi].d * bd.terms[qi].d;
        }
        double step = 0.0;
        for (int inner = 0; inner < 300000; ++inner) {
            if (inner % 100 == 0) {
                // lambda_pi * H plus the perspective-term Hessian sum_q
                // (2 d^2 / nu^3) c c^T at the current noise scales.
                const Eigen::VectorXd nu_cur = (Cq * out.pi).array() + params.eps;
                double l_noise = 0.0;
                for (int qi = 0; qi < Qp; ++qi)
                    l_noise += 2.0 * d2(qi) / std::pow(nu_cur(qi), 3) * c_norm2(qi);
                step = 0.9 / (params.lambda_pi * h_row + l_noise + 1e-12);
            }
            const Eigen::VectorXd g = pi_gradient(out.pi, d2);
            pi_res = (out.pi - simplex_projection(out.pi - g)).lpNorm<Eigen::Infinity>();
            if (pi_res <= 1e-8) break;
            const Eigen::VectorXd cand = simplex_projection(out.pi - step * g);
            const double move = (cand - out.pi).lpNorm<Eigen::Infinity>();
            out.pi = cand;
            if (move <= 1e-16) break;
        }

        const auto next = eval(out.u, out.pi);
        if (next.J > out.J_trail.back() + 1e-10) {
            // Solver noise near a fixed point; keep the previous iterate.
            out.u = prev_u;
            out.pi = prev_pi;
            out.converged = true;
            break;
        }
        const double rel = (out.J_trail.back() - next.J) /
                           std::max(1.0, std::abs(out.J_trail.back()));
        out.J_trail.push_back(next.J);
        breakdown = next;
        out.outer_iters = t + 1;
        // Stop on a stalled objective once the blocks are jointly stationary.
        if (rel < 1e-8 && std::max(u_move, pi_res) <= 1e-7) {
            out.converged = true;
            break;
        }
    }

    // Joint first-order residual: fixed-point movement of one extra u-step plus
    // the projected-gradient residual of the pi block.
    Eigen::VectorXd nu(Qp), d2(Qp);
    for (int qi = 0; qi < Qp; ++qi) {
        nu(qi) = breakdown.terms[qi].nu;
        d2(qi) = breakdown.terms[qi].d * breakdown.terms[qi].d;
    }
    auto recheck = u_step(patch, fog, energy, book, u0, params, nu, solver,
                          have_warm ? &warm : nullptr);
    const double u_res =
        (recheck.x.head(patch.u0.size()) - out.u).lpNorm<Eigen::Infinity>();
    pi_res = (out.pi - simplex_projection(out.pi - pi_gradient(out.pi, d2)))
                 .lpNorm<Eigen::Infinity>();
    out.pg_residual = std::max(u_res, pi_res);
    out.quote_terms = breakdown.terms;
    return out;
}

// ---- Global reassembly ------------------------------------------------------

GlobalPostFit assemble_global(const NodalSurface& u0, const CollocationGrid& grid,
                              const NodalNoArbSystem& sys, const std::vector<Patch>& patches,
                              const std::vector<PatchSolution>& solutions, double tol) {
    (void)grid;
    GlobalPostFit out;
    out.u_star = u0;
    if (!in_cglob(sys, u0.u, tol)) {
        out.baseline_ok = false;
        out.note = "baseline surface violates the no-arbitrage polyhedron; refusing assembly";
        return out;
    }
    if (patches.size() != solutions.size())
        throw std::invalid_argument("assemble_global: patches/solutions size mismatch");
    for (std::size_t p = 0; p < patches.size(); ++p) {
        if (!patches[p].feasible) continue;
        for (std::size_t n = 0; n < patches[p].nodes.size(); ++n)
            out.u_star.u(patches[p].nodes[n]) = solutions[p].u(static_cast<int>(n));
    }
    out.max_violation = (sys.L * out.u_star.u - sys.r).maxCoeff();
    out.verified = out.max_violation <= tol;
    return out;
}

}  // namespace arbfit
