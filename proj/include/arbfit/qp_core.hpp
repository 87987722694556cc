#pragma once

#include <Eigen/Sparse>
#include <string>
#include <vector>

namespace arbfit {

// Sentinel for unbounded sides of l <= Mx <= u.
inline constexpr double kQpInf = 1e30;

struct QpProblem {
    Eigen::SparseMatrix<double> P;  // n x n, symmetric PSD
    Eigen::VectorXd q;              // n
    Eigen::SparseMatrix<double> M;  // m x n
    Eigen::VectorXd l, u;           // m, entries may be +-kQpInf

    int n() const { return static_cast<int>(q.size()); }
    int m() const { return static_cast<int>(l.size()); }
    void validate() const;
    double objective(const Eigen::VectorXd& x) const;
};

enum class QpStatus { solved, max_iter, time_cap };

struct QpSolution {
    Eigen::VectorXd x;  // primal
    Eigen::VectorXd z;  // constraint-space auxiliary (= Mx at optimum)
    Eigen::VectorXd y;  // dual
    QpStatus status = QpStatus::max_iter;
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    double objective = 0.0;
    int iterations = 0;
    double solve_seconds = 0.0;
    bool polished = false;
    std::vector<double> residual_history;  // filled when settings.record_residuals
};

struct QpSettings {
    double eps_abs = 4.5e-7;
    double eps_rel = 4.5e-7;
    double sigma = 1e-6;        // primal regularization in the KKT system
    double alpha = 1.6;         // over-relaxation
    double rho0 = 0.1;          // initial penalty
    double rho_eq_boost = 1e3;  // extra penalty on equality rows (l == u)
    double rho_min = 1e-6, rho_max = 1e6;
    int max_iter = 200000;
    double time_cap_seconds = 900.0;
    int check_interval = 25;   // residual/rho-update cadence
    int scaling_iters = 10;    // Ruiz equilibration passes (0 disables)
    bool polish = true;
    double polish_active_tol = 1e-9;
    double polish_gate = 1e-3;  // scaled relative residual enabling early polish
    bool record_residuals = false;
    std::string tag;  // label recorded with the certificate
};

struct QpCertificate {
    std::string tag;
    double stationarity = 0.0;  // ||Px + q + M^T y||_inf
    double stationarity_tol = 0.0;
    double primal_infeas = 0.0;  // ||dist(Mx, [l,u])||_inf
    double primal_tol = 0.0;
    bool pass = false;
};

// Process-wide log of KKT certificates for solves that reported status=solved.
class CertificateRegistry {
public:
    static CertificateRegistry& instance();
    void record(const QpCertificate& c) { entries_.push_back(c); }
    const std::vector<QpCertificate>& entries() const { return entries_; }
    void clear() { entries_.clear(); }

private:
    std::vector<QpCertificate> entries_;
};

QpCertificate kkt_certificate(const QpProblem& prob, const QpSolution& sol, double eps_abs,
                              double eps_rel, const std::string& tag = {});

class QpSolver {
public:
    explicit QpSolver(QpSettings settings = {}) : st_(std::move(settings)) {}

    QpSettings& settings() { return st_; }
    const QpSettings& settings() const { return st_; }

    QpSolution solve(const QpProblem& prob) const;
    // Seeds iterates from a prior solution; falls back to a cold start on
    // dimension mismatch.
    QpSolution solve_warm(const QpProblem& prob, const QpSolution& prev) const;

private:
    QpSolution run(const QpProblem& prob, const Eigen::VectorXd& x0, const Eigen::VectorXd& z0,
                   const Eigen::VectorXd& y0) const;
    QpSettings st_;
};

}  // namespace arbfit
