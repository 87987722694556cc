#pragma once

#include <json.hpp>

#include <istream>

#include "arbfit/diagnostics.hpp"
#include "arbfit/fog_postfit.hpp"
#include "arbfit/global_fit.hpp"

namespace arbfit {

using ordered_json = nlohmann::ordered_json;

// ---- Pricing oracle ---------------------------------------------------------

// Standard normal CDF via erf (max error well below 1e-12).
double norm_cdf(double x);
// Forward-discounted Black-76 call F N(d1) - K N(d2); the sigma*sqrt(tau) -> 0
// limit returns the intrinsic value (F - K)+ and K -> 0 returns F.
double black76_call(double F, double K, double sigma, double tau);

// ---- Quote CSV ----------------------------------------------------------------

struct LoadReport {
    std::vector<RejectedQuote> rejected;  // row-numbered parse failures
};

// Header must contain date,m,tau,bid,ask,volume,open_interest, or supply
// strike,forward instead of m (converted via m = log(K/F)). Bad rows are
// rejected individually, never fatal.
std::vector<Quote> parse_quotes_csv(std::istream& in, LoadReport* report = nullptr);
std::vector<Quote> load_quotes(const std::string& path, LoadReport* report = nullptr);

void write_quotes_csv(const std::string& path, const std::vector<Quote>& quotes);

// ---- Configuration ------------------------------------------------------------

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SynthSpec {
    double f0 = 100.0;
    double r = 0.0;
    double sigma = 0.2;
    int n_quotes = 400;
    double band_frac = 0.005;   // half-width as a fraction of price
    double band_floor = 0.025;  // absolute tick floor on the half-width
    double outlier_rate = 0.0;  // fraction of quotes with displaced bands
};

struct RunPaths {
    std::string quotes_csv;  // empty: fit on an in-memory synthetic panel
    std::string report_json;
    std::string grid_csv;
    std::string coeffs_json;
};

struct RunConfig {
    WarpConfig warp;
    BasisSpec basis;
    MasterWeights weights;
    bool hard_mode = false;
    bool postfit = true;
    bool binned = false;
    bool whitening = false;
    QpSettings solver;
    FogParams fog;
    BadnessParams badness;
    SynthSpec synth;
    RunPaths paths;
    std::uint64_t seed = 1;
    double tau_floor = 1.0 / 252.0;
};

// Strict parse: unknown keys and type mismatches raise ConfigError.
RunConfig parse_config(const ordered_json& j);
RunConfig load_config(const std::string& path);

// ---- Synthetic panel ----------------------------------------------------------

// Black-76 quotes on a jittered grid inside the warp domain; the noiseless
// mid-prices satisfy static no-arbitrage analytically. Outlier quotes get
// their band displaced by several widths.
std::vector<Quote> synth_panel(const RunConfig& cfg, std::uint64_t seed);

// ---- Pipeline -----------------------------------------------------------------

inline constexpr int kExitOk = 0;
inline constexpr int kExitDataError = 2;
inline constexpr int kExitInfeasible = 3;
inline constexpr int kExitSolverCap = 4;

struct PatchReport {
    int nodes = 0;
    bool feasible = true;
    bool converged = false;
    int outer_iters = 0;
    double pg_residual = 0.0;
    double j_start = 0.0, j_end = 0.0;
};

struct RunOutput {
    int exit_code = kExitOk;
    std::string error;

    CollocationGrid grid;
    FitResult fit;
    MonitorReport monitor;

    bool postfit_run = false;
    GlobalPostFit post;
    std::vector<PatchReport> patch_reports;
    double coverage_before = 0.0, coverage_after = 0.0;

    ordered_json report;
    ordered_json coeffs;
    std::string grid_csv;
};

enum class Command { synth, fit, postfit, diagnose };

// Full pipeline for one command; never throws for data/solver conditions,
// reporting them through exit_code/error instead.
RunOutput run_command(Command cmd, const RunConfig& cfg, const std::vector<Quote>& raw);

// Convenience: loads or synthesizes quotes per cfg.paths, runs, writes the
// artifacts whose paths are set.
RunOutput run_and_emit(Command cmd, const RunConfig& cfg);

// Reload a coefficients artifact.
Eigen::VectorXd parse_coeffs(const ordered_json& j, const BasisSpec& spec);

}  // namespace arbfit
