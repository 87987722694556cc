#include "arbfit/quote_data.hpp"

#include <cmath>

namespace arbfit {

QuoteBook clean_quotes(const std::vector<Quote>& raw, double tau_floor, CleanReport* report,
                       double eps_spread) {
    QuoteBook book;
    CleanReport local;
    for (int i = 0; i < static_cast<int>(raw.size()); ++i) {
        Quote q = raw[i];
        const bool finite = std::isfinite(q.m) && std::isfinite(q.tau) && std::isfinite(q.bid) &&
                            std::isfinite(q.ask) && std::isfinite(q.volume) &&
                            std::isfinite(q.open_interest);
        if (!finite) {
            local.rejected.push_back({i, "non-finite"});
            continue;
        }
        if (q.ask < q.bid) {
            local.rejected.push_back({i, "crossed"});
            continue;
        }
        if (q.bid < 0.0) {
            local.rejected.push_back({i, "negative bid"});
            continue;
        }
        if (q.volume < 0.0 || q.open_interest < 0.0) {
            local.rejected.push_back({i, "negative activity"});
            continue;
        }
        if (q.tau < tau_floor) {
            q.tau = tau_floor;
            ++local.clamped_tau;
        }
        book.quotes.push_back(q);
    }
    if (book.quotes.empty()) throw std::runtime_error("clean_quotes: empty book after cleaning");

    const int N = book.N();
    book.y.resize(N);
    book.b.resize(N);
    book.a.resize(N);
    book.w.resize(N);
    for (int i = 0; i < N; ++i) {
        const Quote& q = book.quotes[i];
        book.b(i) = q.bid;
        book.a(i) = q.ask;
        book.y(i) = 0.5 * (q.bid + q.ask);
        const double liq = 1.0 + std::sqrt(q.volume) + 0.1 * std::sqrt(q.open_interest);
        const double spread = std::max(q.ask - q.bid, eps_spread);
        book.w(i) = liq / (spread * spread);
    }
    if (report) *report = std::move(local);
    return book;
}

void attach_design(QuoteBook& book, const WarpConfig& cfg, const BasisSpec& spec) {
    std::vector<std::pair<double, double>> pts;
    pts.reserve(book.quotes.size());
    for (const Quote& q : book.quotes) pts.emplace_back(q.m, std::min(q.tau, cfg.tau_max));
    book.A = build_design(pts, cfg, spec).A;
}

double band_hinge(double y_hat, double b, double a) {
    if (b > a) throw std::domain_error("band_hinge: b > a");
    const double lo = std::max(b - y_hat, 0.0);
    const double hi = std::max(y_hat - a, 0.0);
    return 0.5 * (lo * lo + hi * hi);
}

HingeSlacks hinge_slack_min(double y_hat, double b, double a) {
    if (b > a) throw std::domain_error("hinge_slack_min: b > a");
    HingeSlacks s;
    s.u = std::max(b - y_hat, 0.0);
    s.v = std::max(y_hat - a, 0.0);
    s.value = 0.5 * (s.u * s.u + s.v * s.v);
    return s;
}

BinSelector bin_quotes(const QuoteBook& book, const std::vector<double>& m_edges,
                       const std::vector<double>& tau_edges) {
    if (m_edges.size() < 2 || tau_edges.size() < 2)
        throw std::invalid_argument("bin_quotes: need at least one cell per axis");
    const int BM = static_cast<int>(m_edges.size()) - 1;
    const int BT = static_cast<int>(tau_edges.size()) - 1;
    auto locate = [](const std::vector<double>& edges, double v) -> int {
        if (v < edges.front() || v > edges.back()) return -1;
        int i = static_cast<int>(std::upper_bound(edges.begin(), edges.end(), v) - edges.begin()) - 1;
        return std::min(i, static_cast<int>(edges.size()) - 2);
    };

    BinSelector sel;
    sel.bin_of_quote.assign(book.N(), -1);
    std::vector<int> cell(book.N());
    for (int i = 0; i < book.N(); ++i) {
        const int im = locate(m_edges, book.quotes[i].m);
        const int it = locate(tau_edges, book.quotes[i].tau);
        if (im < 0 || it < 0) throw std::runtime_error("bin_quotes: quote outside all cells");
        cell[i] = it * BM + im;
    }
    // Compact to nonempty bins.
    std::vector<int> remap(BM * BT, -1);
    int B = 0;
    for (int i = 0; i < book.N(); ++i)
        if (remap[cell[i]] < 0) remap[cell[i]] = B++;
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(book.N());
    for (int i = 0; i < book.N(); ++i) {
        sel.bin_of_quote[i] = remap[cell[i]];
        trips.emplace_back(sel.bin_of_quote[i], i, 1.0);
    }
    sel.G.resize(B, book.N());
    sel.G.setFromTriplets(trips.begin(), trips.end());
    return sel;
}

}  // namespace arbfit
