#include "arbfit/cli_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace arbfit {

// ---- Pricing oracle ---------------------------------------------------------

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double black76_call(double F, double K, double sigma, double tau) {
    if (F <= 0.0 || K < 0.0) throw std::invalid_argument("black76_call: need F > 0, K >= 0");
    if (K == 0.0) return F;
    const double sd = sigma * std::sqrt(std::max(tau, 0.0));
    if (sd <= 0.0) return std::max(F - K, 0.0);
    const double d1 = std::log(F / K) / sd + 0.5 * sd;
    return F * norm_cdf(d1) - K * norm_cdf(d1 - sd);
}

// ---- Quote CSV ----------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

bool parse_double(const std::string& s, double* out) {
    const std::string t = trim(s);
    if (t.empty()) return false;
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size() || !std::isfinite(v)) return false;
    *out = v;
    return true;
}

}  // namespace

std::vector<Quote> parse_quotes_csv(std::istream& in, LoadReport* report) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("quotes CSV: empty file");
    const auto header = split_csv_line(line);
    std::map<std::string, int> col;
    for (int i = 0; i < static_cast<int>(header.size()); ++i) col[trim(header[i])] = i;

    auto need = [&](const char* name) {
        auto it = col.find(name);
        if (it == col.end())
            throw std::runtime_error(std::string("quotes CSV: missing column ") + name);
        return it->second;
    };
    const bool has_m = col.count("m") > 0;
    if (!has_m && (!col.count("strike") || !col.count("forward")))
        throw std::runtime_error("quotes CSV: need column m or columns strike,forward");
    const int c_m = has_m ? need("m") : -1;
    const int c_k = has_m ? -1 : need("strike");
    const int c_f = has_m ? -1 : need("forward");
    const int c_tau = need("tau"), c_bid = need("bid"), c_ask = need("ask");
    const int c_vol = need("volume"), c_oi = need("open_interest");
    need("date");

    std::vector<Quote> out;
    int row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        const auto f = split_csv_line(line);
        auto reject = [&](const std::string& why) {
            if (report) report->rejected.push_back({row, why});
        };
        if (f.size() != header.size()) {
            reject("wrong field count");
            continue;
        }
        Quote q;
        bool ok = parse_double(f[c_tau], &q.tau) && parse_double(f[c_bid], &q.bid) &&
                  parse_double(f[c_ask], &q.ask) && parse_double(f[c_vol], &q.volume) &&
                  parse_double(f[c_oi], &q.open_interest);
        if (ok && has_m) {
            ok = parse_double(f[c_m], &q.m);
        } else if (ok) {
            double k = 0.0, fwd = 0.0;
            ok = parse_double(f[c_k], &k) && parse_double(f[c_f], &fwd) && k > 0.0 && fwd > 0.0;
            if (ok) q.m = std::log(k / fwd);
        }
        if (!ok) {
            reject("unparsable number");
            continue;
        }
        out.push_back(q);
    }
    return out;
}

std::vector<Quote> load_quotes(const std::string& path, LoadReport* report) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open quotes CSV: " + path);
    return parse_quotes_csv(in, report);
}

void write_quotes_csv(const std::string& path, const std::vector<Quote>& quotes) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write quotes CSV: " + path);
    out << "date,m,tau,bid,ask,volume,open_interest\n";
    char buf[256];
    for (const auto& q : quotes) {
        std::snprintf(buf, sizeof(buf), "synthetic,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", q.m,
                      q.tau, q.bid, q.ask, q.volume, q.open_interest);
        out << buf;
    }
}

// ---- Configuration ------------------------------------------------------------

namespace {

void check_keys(const ordered_json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("config: section " + section + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) known = known || it.key() == k;
        if (!known) throw ConfigError("config: unknown key " + section + "." + it.key());
    }
}

double get_num(const ordered_json& j, const char* key, double dflt) {
    if (!j.contains(key)) return dflt;
    if (!j.at(key).is_number()) throw ConfigError(std::string("config: ") + key + " must be a number");
    return j.at(key).get<double>();
}

int get_int(const ordered_json& j, const char* key, int dflt) {
    if (!j.contains(key)) return dflt;
    if (!j.at(key).is_number_integer())
        throw ConfigError(std::string("config: ") + key + " must be an integer");
    return j.at(key).get<int>();
}

bool get_bool(const ordered_json& j, const char* key, bool dflt) {
    if (!j.contains(key)) return dflt;
    if (!j.at(key).is_boolean())
        throw ConfigError(std::string("config: ") + key + " must be a boolean");
    return j.at(key).get<bool>();
}

std::string get_str(const ordered_json& j, const char* key, const std::string& dflt) {
    if (!j.contains(key)) return dflt;
    if (!j.at(key).is_string())
        throw ConfigError(std::string("config: ") + key + " must be a string");
    return j.at(key).get<std::string>();
}

}  // namespace

RunConfig parse_config(const ordered_json& j) {
    RunConfig cfg;
    check_keys(j, "<root>",
               {"warp", "basis", "weights", "mode", "solver", "fog", "badness", "synth",
                "paths", "seed", "tau_floor"});

    if (j.contains("warp")) {
        const auto& w = j.at("warp");
        check_keys(w, "warp", {"m_min", "m_max", "tau_min", "tau_max", "lambda_m", "c_m"});
        cfg.warp.m_min = get_num(w, "m_min", cfg.warp.m_min);
        cfg.warp.m_max = get_num(w, "m_max", cfg.warp.m_max);
        cfg.warp.tau_min = get_num(w, "tau_min", cfg.warp.tau_min);
        cfg.warp.tau_max = get_num(w, "tau_max", cfg.warp.tau_max);
        cfg.warp.lambda_m = get_num(w, "lambda_m", cfg.warp.lambda_m);
        cfg.warp.c_m = get_num(w, "c_m", cfg.warp.c_m);
    }
    if (j.contains("basis")) {
        const auto& b = j.at("basis");
        check_keys(b, "basis", {"K", "L"});
        cfg.basis.K = get_int(b, "K", cfg.basis.K);
        cfg.basis.L = get_int(b, "L", cfg.basis.L);
        if (cfg.basis.K < 1 || cfg.basis.L < 1)
            throw ConfigError("config: basis degrees must be positive");
    }
    if (j.contains("weights")) {
        const auto& w = j.at("weights");
        check_keys(w, "weights",
                   {"mu", "lambda_na", "lambda_b", "lambda_ridge", "lambda_dw0", "tau_star",
                    "lambda_omega0", "lambda_hook", "lambda_rn", "eta_rn"});
        cfg.weights.mu = get_num(w, "mu", cfg.weights.mu);
        cfg.weights.lambda_na = get_num(w, "lambda_na", cfg.weights.lambda_na);
        cfg.weights.lambda_b = get_num(w, "lambda_b", cfg.weights.lambda_b);
        cfg.weights.lambda_ridge = get_num(w, "lambda_ridge", cfg.weights.lambda_ridge);
        cfg.weights.lambda_dw0 = get_num(w, "lambda_dw0", cfg.weights.lambda_dw0);
        cfg.weights.tau_star = get_num(w, "tau_star", cfg.weights.tau_star);
        cfg.weights.lambda_omega0 = get_num(w, "lambda_omega0", cfg.weights.lambda_omega0);
        cfg.weights.lambda_hook = get_num(w, "lambda_hook", cfg.weights.lambda_hook);
        cfg.weights.lambda_rn = get_num(w, "lambda_rn", cfg.weights.lambda_rn);
        cfg.weights.eta_rn = get_num(w, "eta_rn", cfg.weights.eta_rn);
    }
    if (j.contains("mode")) {
        const auto& m = j.at("mode");
        check_keys(m, "mode", {"hard", "postfit", "binned", "whitening"});
        cfg.hard_mode = get_bool(m, "hard", cfg.hard_mode);
        cfg.postfit = get_bool(m, "postfit", cfg.postfit);
        cfg.binned = get_bool(m, "binned", cfg.binned);
        cfg.whitening = get_bool(m, "whitening", cfg.whitening);
    }
    if (j.contains("solver")) {
        const auto& s = j.at("solver");
        check_keys(s, "solver", {"eps_abs", "eps_rel", "max_iter", "time_cap_seconds"});
        cfg.solver.eps_abs = get_num(s, "eps_abs", cfg.solver.eps_abs);
        cfg.solver.eps_rel = get_num(s, "eps_rel", cfg.solver.eps_rel);
        cfg.solver.max_iter = get_int(s, "max_iter", cfg.solver.max_iter);
        cfg.solver.time_cap_seconds = get_num(s, "time_cap_seconds", cfg.solver.time_cap_seconds);
    }
    if (j.contains("fog")) {
        const auto& f = j.at("fog");
        check_keys(f, "fog",
                   {"n_u", "kappa_m", "kappa_tau", "kappa_u", "alpha_band", "alpha_range_mult",
                    "eps", "lambda_noise", "lambda_cl", "lambda_surf", "lambda_pi"});
        cfg.fog.n_u = get_int(f, "n_u", cfg.fog.n_u);
        cfg.fog.kappa_m = get_num(f, "kappa_m", cfg.fog.kappa_m);
        cfg.fog.kappa_tau = get_num(f, "kappa_tau", cfg.fog.kappa_tau);
        cfg.fog.kappa_u = get_num(f, "kappa_u", cfg.fog.kappa_u);
        cfg.fog.alpha_band = get_num(f, "alpha_band", cfg.fog.alpha_band);
        cfg.fog.alpha_range_mult = get_num(f, "alpha_range_mult", cfg.fog.alpha_range_mult);
        cfg.fog.eps = get_num(f, "eps", cfg.fog.eps);
        cfg.fog.lambda_noise = get_num(f, "lambda_noise", cfg.fog.lambda_noise);
        cfg.fog.lambda_cl = get_num(f, "lambda_cl", cfg.fog.lambda_cl);
        cfg.fog.lambda_surf = get_num(f, "lambda_surf", cfg.fog.lambda_surf);
        cfg.fog.lambda_pi = get_num(f, "lambda_pi", cfg.fog.lambda_pi);
    }
    if (j.contains("badness")) {
        const auto& b = j.at("badness");
        check_keys(b, "badness", {"alpha_band", "alpha_noarb", "sigma", "theta", "adjacency"});
        cfg.badness.alpha_band = get_num(b, "alpha_band", cfg.badness.alpha_band);
        cfg.badness.alpha_noarb = get_num(b, "alpha_noarb", cfg.badness.alpha_noarb);
        cfg.badness.sigma = get_num(b, "sigma", cfg.badness.sigma);
        cfg.badness.theta = get_num(b, "theta", cfg.badness.theta);
        cfg.badness.adjacency = get_int(b, "adjacency", cfg.badness.adjacency);
        if (cfg.badness.adjacency != 4 && cfg.badness.adjacency != 8)
            throw ConfigError("config: badness.adjacency must be 4 or 8");
    }
    if (j.contains("synth")) {
        const auto& s = j.at("synth");
        check_keys(s, "synth",
                   {"f0", "r", "sigma", "n_quotes", "band_frac", "band_floor", "outlier_rate"});
        cfg.synth.f0 = get_num(s, "f0", cfg.synth.f0);
        cfg.synth.r = get_num(s, "r", cfg.synth.r);
        cfg.synth.sigma = get_num(s, "sigma", cfg.synth.sigma);
        cfg.synth.n_quotes = get_int(s, "n_quotes", cfg.synth.n_quotes);
        cfg.synth.band_frac = get_num(s, "band_frac", cfg.synth.band_frac);
        cfg.synth.band_floor = get_num(s, "band_floor", cfg.synth.band_floor);
        cfg.synth.outlier_rate = get_num(s, "outlier_rate", cfg.synth.outlier_rate);
        if (cfg.synth.f0 <= 0.0 || cfg.synth.sigma <= 0.0 || cfg.synth.n_quotes < 1)
            throw ConfigError("config: synth parameters out of range");
    }
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        check_keys(p, "paths", {"quotes_csv", "report_json", "grid_csv", "coeffs_json"});
        cfg.paths.quotes_csv = get_str(p, "quotes_csv", "");
        cfg.paths.report_json = get_str(p, "report_json", "");
        cfg.paths.grid_csv = get_str(p, "grid_csv", "");
        cfg.paths.coeffs_json = get_str(p, "coeffs_json", "");
    }
    if (j.contains("seed")) {
        if (!j.at("seed").is_number_unsigned() && !j.at("seed").is_number_integer())
            throw ConfigError("config: seed must be an integer");
        cfg.seed = j.at("seed").get<std::uint64_t>();
    }
    cfg.tau_floor = get_num(j, "tau_floor", cfg.tau_floor);
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    ordered_json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config JSON parse error: ") + e.what());
    }
    return parse_config(j);
}

// ---- Synthetic panel ----------------------------------------------------------

std::vector<Quote> synth_panel(const RunConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    // Keep quotes inside the warp domain with a small margin.
    const double m_pad = 0.02 * (cfg.warp.m_max - cfg.warp.m_min);
    const double t_pad = 0.02 * (cfg.warp.tau_max - cfg.warp.tau_min);
    std::uniform_real_distribution<double> um(cfg.warp.m_min + m_pad, cfg.warp.m_max - m_pad);
    std::uniform_real_distribution<double> ut(cfg.warp.tau_min + t_pad,
                                              cfg.warp.tau_max - t_pad);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::lognormal_distribution<double> liq(3.0, 1.0);

    std::vector<Quote> out;
    for (int n = 0; n < cfg.synth.n_quotes; ++n) {
        Quote q;
        q.m = um(rng);
        q.tau = ut(rng);
        const double F = cfg.synth.f0 * std::exp(cfg.synth.r * q.tau);
        const double price = black76_call(F, F * std::exp(q.m), cfg.synth.sigma, q.tau);
        const double half = std::max(cfg.synth.band_frac * price, cfg.synth.band_floor);
        double center = price;
        if (u01(rng) < cfg.synth.outlier_rate) center += 8.0 * half * (u01(rng) < 0.5 ? -1 : 1);
        q.bid = center - half;
        q.ask = center + half;
        q.volume = liq(rng);
        q.open_interest = liq(rng);
        out.push_back(q);
    }
    return out;
}

// ---- Pipeline -----------------------------------------------------------------

namespace {

// Weighted aggregation of the cleaned book into grid-cell bins.
QuoteBook make_binned_book(const QuoteBook& book, const CollocationGrid& grid,
                           double tau_floor) {
    auto edges = [](const std::vector<double>& nodes) {
        std::vector<double> e;
        e.push_back(nodes.front() - 1.0);
        for (std::size_t i = 0; i + 1 < nodes.size(); ++i)
            e.push_back(0.5 * (nodes[i] + nodes[i + 1]));
        e.push_back(nodes.back() + 1.0);
        return e;
    };
    const auto sel = bin_quotes(book, edges(grid.m_nodes), edges(grid.tau_nodes));
    const int B = static_cast<int>(sel.G.rows());
    std::vector<Quote> agg(B);
    std::vector<double> wsum(B, 0.0);
    for (int q = 0; q < book.N(); ++q) {
        const int b = sel.bin_of_quote[q];
        if (b < 0) continue;
        const double w = book.w(q);
        agg[b].m += w * book.quotes[q].m;
        agg[b].tau += w * book.quotes[q].tau;
        agg[b].bid += w * book.quotes[q].bid;
        agg[b].ask += w * book.quotes[q].ask;
        agg[b].volume += book.quotes[q].volume;
        agg[b].open_interest += book.quotes[q].open_interest;
        wsum[b] += w;
    }
    std::vector<Quote> rows;
    for (int b = 0; b < B; ++b) {
        if (wsum[b] <= 0.0) continue;
        Quote q = agg[b];
        q.m /= wsum[b];
        q.tau /= wsum[b];
        q.bid /= wsum[b];
        q.ask /= wsum[b];
        rows.push_back(q);
    }
    return clean_quotes(rows, tau_floor, nullptr);
}

ordered_json shares_json(const ViolationShares& s) {
    ordered_json j;
    j["share_K"] = s.share_K;
    j["share_KK"] = s.share_KK;
    j["share_cal"] = s.share_cal;
    j["share_total"] = s.share_total;
    j["unscaled_K"] = s.unscaled_K;
    j["unscaled_KK"] = s.unscaled_KK;
    j["unscaled_cal"] = s.unscaled_cal;
    j["unscaled_total"] = s.unscaled_total;
    return j;
}

const char* status_name(QpStatus s) {
    switch (s) {
        case QpStatus::solved: return "solved";
        case QpStatus::max_iter: return "max_iter";
        default: return "time_cap";
    }
}

std::string grid_csv_text(const CollocationGrid& grid, const Eigen::VectorXd& price) {
    std::string out = "m,tau,price\n";
    char buf[128];
    for (int g = 0; g < grid.G(); ++g) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", grid.nodes[g].first,
                      grid.nodes[g].second, price(g));
        out += buf;
    }
    return out;
}

}  // namespace

Eigen::VectorXd parse_coeffs(const ordered_json& j, const BasisSpec& spec) {
    if (!j.is_object() || !j.contains("a") || !j.at("a").is_array())
        throw std::runtime_error("coefficients JSON: missing array a");
    if (j.value("K", -1) != spec.K || j.value("L", -1) != spec.L)
        throw std::runtime_error("coefficients JSON: basis degrees mismatch");
    const auto& arr = j.at("a");
    if (static_cast<int>(arr.size()) != spec.P())
        throw std::runtime_error("coefficients JSON: wrong length");
    Eigen::VectorXd a(spec.P());
    for (int i = 0; i < spec.P(); ++i) a(i) = arr[i].get<double>();
    return a;
}

RunOutput run_command(Command cmd, const RunConfig& cfg, const std::vector<Quote>& raw) {
    RunOutput out;
    ordered_json& rep = out.report;
    rep["schema_version"] = 1;
    rep["command"] = cmd == Command::synth     ? "synth"
                     : cmd == Command::fit     ? "fit"
                     : cmd == Command::postfit ? "postfit"
                                               : "diagnose";
    rep["seed"] = cfg.seed;
    {
        ordered_json m;
        m["hard"] = cfg.hard_mode;
        m["postfit"] = cfg.postfit;
        m["binned"] = cfg.binned;
        m["whitening"] = cfg.whitening;
        rep["mode"] = m;
    }

    if (cmd == Command::synth) {
        rep["panel"] = ordered_json{{"n_quotes", static_cast<int>(raw.size())}};
        rep["fit"] = nullptr;
        rep["monitor"] = nullptr;
        rep["postfit"] = nullptr;
        return out;
    }

    CleanReport creport;
    QuoteBook book;
    try {
        book = clean_quotes(raw, cfg.tau_floor, &creport);
    } catch (const std::exception& e) {
        out.exit_code = kExitDataError;
        out.error = e.what();
        rep["error"] = out.error;
        return out;
    }
    {
        ordered_json q;
        q["loaded"] = static_cast<int>(raw.size());
        q["rejected_clean"] = static_cast<int>(creport.rejected.size());
        q["clamped_tau"] = creport.clamped_tau;
        q["kept"] = book.N();
        rep["quotes"] = q;
    }
    if (book.N() == 0) {
        out.exit_code = kExitDataError;
        out.error = "no usable quotes after cleaning";
        rep["error"] = out.error;
        return out;
    }

    const auto fwd = ForwardCurve::constant_carry(cfg.synth.f0, cfg.synth.r);
    out.grid = make_grid(cfg.warp, cfg.basis, fwd);
    if (cfg.binned) book = make_binned_book(book, out.grid, cfg.tau_floor);
    attach_design(book, cfg.warp, cfg.basis);
    const auto blocks = build_design(out.grid.nodes, cfg.warp, cfg.basis);
    const auto ops = build_noarb_ops(out.grid, blocks);
    RidgeSpec ridge;
    ridge.lambda_ridge = cfg.weights.lambda_ridge;
    RnSpec rn;
    rn.tau_star = cfg.weights.tau_star;
    rn.lambda_rn = cfg.weights.lambda_rn;
    rn.eta_rn = cfg.weights.eta_rn;
    OmegaSpec om;
    om.tau_star = cfg.weights.tau_star;
    om.lambda_omega0 = cfg.weights.lambda_omega0;
    om.lambda_hook = cfg.weights.lambda_hook;
    const auto regs =
        assemble_quadratics(out.grid, blocks, ops, cfg.warp, cfg.basis, ridge,
                            cfg.weights.lambda_dw0, cfg.weights.tau_star, rn, om);

    WhiteningMap wmap;
    const WhiteningMap* wptr = nullptr;
    if (cfg.whitening) {
        wmap = build_whitening(book, cfg.basis);
        wptr = &wmap;
    }
    const auto master =
        assemble_master(book, out.grid, blocks, ops, regs, cfg.weights,
                        cfg.hard_mode ? FitMode::hard : FitMode::soft, wptr);
    QpSolver solver(cfg.solver);
    out.fit = solve_master(master, book, ops, solver);

    {
        ordered_json f;
        f["status"] = status_name(out.fit.sol.status);
        f["iterations"] = out.fit.sol.iterations;
        f["polished"] = out.fit.sol.polished;
        f["coverage"] = out.fit.coverage;
        f["hinge"] = out.fit.hinge;
        f["objective"] = out.fit.objective;
        f["shares"] = shares_json(out.fit.shares);
        rep["fit"] = f;
    }
    if (out.fit.sol.status != QpStatus::solved) {
        out.exit_code = kExitSolverCap;
        out.error = std::string("master QP hit ") + status_name(out.fit.sol.status);
        rep["error"] = out.error;
        rep["monitor"] = nullptr;
        rep["postfit"] = nullptr;
        return out;
    }

    out.monitor = monitor(out.fit, out.grid, blocks, ops, regs, cfg.warp, cfg.basis);
    {
        ordered_json m;
        m["rn_residual"] = out.monitor.rn_residual;
        m["hook_norm"] = out.monitor.hook_norm;
        m["hi_freq_share"] = out.monitor.hi_freq_share;
        m["egorov_abs"] = out.monitor.egorov_abs;
        m["egorov_rel"] = out.monitor.egorov_rel;
        m["coverage"] = out.monitor.coverage;
        m["shares"] = shares_json(out.monitor.shares);
        rep["monitor"] = m;
    }

    Eigen::VectorXd grid_price = blocks.A * out.fit.a;

    rep["postfit"] = nullptr;
    if (cmd == Command::postfit && cfg.postfit) {
        out.postfit_run = true;
        const auto sys = build_nodal_system(out.grid);
        NodalSurface u0;
        u0.n_m = out.grid.n_m;
        u0.n_tau = out.grid.n_tau;
        u0.u = grid_price;
        bool projected = false;
        if (!in_cglob(sys, u0.u)) {
            // The spectral fit enforces no-arbitrage through its own grid
            // operators; snap the nodal baseline into the nodal polyhedron.
            try {
                u0.u = project_to_cglob(sys, u0.u, solver);
                projected = true;
            } catch (const std::exception& e) {
                out.exit_code = kExitSolverCap;
                out.error = std::string("baseline projection failed: ") + e.what();
                rep["error"] = out.error;
                return out;
            }
        }
        const auto bad = badness_map(u0, book, out.grid, sys, cfg.badness);
        const auto patches = decompose_patches(bad, out.grid, sys, u0, cfg.badness, solver);
        std::vector<PatchSolution> sols;
        ordered_json patch_list = ordered_json::array();
        for (const auto& p : patches) {
            PatchReport pr;
            pr.nodes = static_cast<int>(p.nodes.size());
            pr.feasible = p.feasible;
            PatchSolution sol;
            if (p.feasible) {
                const auto fog = build_fog(p, book, out.grid, cfg.fog);
                const auto energy = build_patch_energy(p, out.grid, sys, u0);
                sol = solve_patch(p, fog, energy, book, u0, cfg.fog, solver);
                pr.converged = sol.converged;
                pr.outer_iters = sol.outer_iters;
                pr.pg_residual = sol.pg_residual;
                pr.j_start = sol.J_trail.front();
                pr.j_end = sol.J_trail.back();
            } else {
                sol.u = p.u0;  // placeholder; skipped by assemble_global
            }
            sols.push_back(std::move(sol));
            out.patch_reports.push_back(pr);
            ordered_json pj;
            pj["nodes"] = pr.nodes;
            pj["feasible"] = pr.feasible;
            pj["converged"] = pr.converged;
            pj["outer_iters"] = pr.outer_iters;
            pj["pg_residual"] = pr.pg_residual;
            pj["j_start"] = pr.j_start;
            pj["j_end"] = pr.j_end;
            patch_list.push_back(pj);
        }
        out.post = assemble_global(u0, out.grid, sys, patches, sols);
        if (!out.post.baseline_ok) {
            out.exit_code = kExitInfeasible;
            out.error = out.post.note;
        }

        std::vector<std::pair<double, double>> locs;
        for (const auto& q : book.quotes) locs.push_back({q.m, q.tau});
        const auto S = bilinear_sampler(out.grid, locs);
        out.coverage_before = coverage_value(S * u0.u, book.b, book.a);
        out.coverage_after = coverage_value(S * out.post.u_star.u, book.b, book.a);

        ordered_json pf;
        pf["baseline_projected"] = projected;
        pf["baseline_ok"] = out.post.baseline_ok;
        pf["verified"] = out.post.verified;
        pf["max_violation"] = out.post.max_violation;
        pf["excluded_quotes"] = static_cast<int>(bad.excluded_quotes.size());
        pf["patches"] = patch_list;
        pf["coverage_before"] = out.coverage_before;
        pf["coverage_after"] = out.coverage_after;
        rep["postfit"] = pf;
        if (out.post.baseline_ok) grid_price = out.post.u_star.u;
        if (!out.error.empty()) rep["error"] = out.error;
    }

    out.grid_csv = grid_csv_text(out.grid, grid_price);
    {
        ordered_json c;
        c["K"] = cfg.basis.K;
        c["L"] = cfg.basis.L;
        ordered_json arr = ordered_json::array();
        for (int i = 0; i < out.fit.a.size(); ++i) arr.push_back(out.fit.a(i));
        c["a"] = arr;
        out.coeffs = c;
    }
    return out;
}

RunOutput run_and_emit(Command cmd, const RunConfig& cfg) {
    std::vector<Quote> raw;
    try {
        if (cmd == Command::synth || cfg.paths.quotes_csv.empty())
            raw = synth_panel(cfg, cfg.seed);
        else
            raw = load_quotes(cfg.paths.quotes_csv);
    } catch (const std::exception& e) {
        RunOutput out;
        out.exit_code = kExitDataError;
        out.error = e.what();
        out.report["error"] = out.error;
        return out;
    }

    RunOutput out = run_command(cmd, cfg, raw);
    try {
        if (cmd == Command::synth && !cfg.paths.quotes_csv.empty())
            write_quotes_csv(cfg.paths.quotes_csv, raw);
        if (!cfg.paths.report_json.empty()) {
            std::ofstream f(cfg.paths.report_json);
            if (!f) throw std::runtime_error("cannot write " + cfg.paths.report_json);
            f << out.report.dump(2) << "\n";
        }
        if (!cfg.paths.grid_csv.empty() && !out.grid_csv.empty()) {
            std::ofstream f(cfg.paths.grid_csv);
            if (!f) throw std::runtime_error("cannot write " + cfg.paths.grid_csv);
            f << out.grid_csv;
        }
        if (!cfg.paths.coeffs_json.empty() && !out.coeffs.is_null()) {
            std::ofstream f(cfg.paths.coeffs_json);
            if (!f) throw std::runtime_error("cannot write " + cfg.paths.coeffs_json);
            f << out.coeffs.dump(2) << "\n";
        }
    } catch (const std::exception& e) {
        if (out.exit_code == kExitOk) {
            out.exit_code = kExitDataError;
            out.error = e.what();
        }
    }
    return out;
}

}  // namespace arbfit
