#pragma once

// Identifiability metrics, the approximate-recovery bound audit, and report
// aggregation / persistence.

#include "idlab/common.hpp"
#include "idlab/linalg.hpp"
#include "idlab/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace idlab {

/// OLS fit on the first half of the rows, R^2 on the second half.
inline double linear_r2(const Matrix& source, const Matrix& target) {
    require(source.rows() == target.rows(), "linear_r2: row mismatch");
    require(source.rows() >= 4, "linear_r2: need at least four rows");
    const Eigen::Index train = source.rows() / 2;
    const Eigen::Index test = source.rows() - train;
    const LinearFit fit = ols_fit(source.topRows(train), target.topRows(train));
    return r2_score(target.bottomRows(test), fit.predict(source.bottomRows(test)));
}

struct BoundAudit {
    double eps_whitening = 0.0;  ///< |Cov(y) - I|_F
    double delta_gap = 0.0;      ///< max(0, align - 2(1-rho) tr Cov(y))
    double delta_gap_n = 0.0;    ///< same gap against the whitened floor 2(1-rho) n
    double d_term = 0.0;         ///< delta / (2 rho (1 - rho))
    double bound_value = 0.0;    ///< D + (eps + D)^2
    double procrustes_error = 0.0;
    double slack = 0.0;          ///< 3 bootstrap standard errors of procrustes_error
    Matrix rotation;
    bool passed = false;
};

inline double recovery_bound(double eps, double d) { return d + (eps + d) * (eps + d); }

inline double d_term_from(double delta, double rho) {
    require(rho > 0.0 && rho < 1.0, "rho must lie strictly inside (0,1)");
    return delta / (2.0 * rho * (1.0 - rho));
}

inline constexpr int kBootstrapResamples = 200;

/// Audit of the recovery bound on one evaluation split. y and y' are encoder
/// outputs on paired latents z, z'; all three are centred by the mean of y
/// (resp. z) so the zero-mean hypothesis holds on the sample.
inline BoundAudit bound_audit(const Matrix& y, const Matrix& y_prime, const Matrix& z, double rho,
                              double align_loss, std::uint64_t bootstrap_seed = 0) {
    require(y.rows() == y_prime.rows() && y.rows() == z.rows(), "bound_audit: row mismatch");
    require(y.cols() == z.cols() && y_prime.cols() == y.cols(), "bound_audit: dimension mismatch");
    require(std::isfinite(align_loss), "bound_audit: alignment loss must be finite");
    const auto n = static_cast<double>(y.cols());
    BoundAudit out;
    const Matrix cov = covariance(y);
    out.eps_whitening = (cov - Matrix::Identity(y.cols(), y.cols())).norm();
    out.delta_gap = std::max(0.0, align_loss - 2.0 * (1.0 - rho) * cov.trace());
    out.delta_gap_n = std::max(0.0, align_loss - 2.0 * (1.0 - rho) * n);
    out.d_term = d_term_from(out.delta_gap, rho);
    out.bound_value = recovery_bound(out.eps_whitening, out.d_term);

    const Matrix hc = centered(y);
    const Matrix zc = centered(z);
    const ProcrustesResult pr = procrustes(hc, zc);
    out.rotation = pr.rotation;
    out.procrustes_error = pr.error;

    Generator g(bootstrap_seed, Stream::bootstrap);
    const Eigen::Index rows = y.rows();
    std::vector<double> boot(kBootstrapResamples);
    Matrix hb(rows, y.cols()), zb(rows, z.cols());
    for (int b = 0; b < kBootstrapResamples; ++b) {
        for (Eigen::Index i = 0; i < rows; ++i) {
            const auto k = static_cast<Eigen::Index>(g.below(static_cast<std::uint64_t>(rows)));
            hb.row(i) = y.row(k);
            zb.row(i) = z.row(k);
        }
        boot[b] = procrustes(centered(hb), centered(zb)).error;
    }
    const double mean = std::accumulate(boot.begin(), boot.end(), 0.0) / kBootstrapResamples;
    double var = 0.0;
    for (double v : boot) var += (v - mean) * (v - mean);
    out.slack = 3.0 * std::sqrt(var / (kBootstrapResamples - 1));
    out.passed = out.procrustes_error <= out.bound_value + out.slack;
    return out;
}

/// One row per trained run.
struct EvalReport {
    std::string run_id;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string method;
    std::string mixing;
    std::string dist;
    double alpha = 2.0;
    int dim = 0;
    double lambda = 0.0;
    double rho = 0.0;
    long steps = 0;
    double r2_z_to_h = 0.0;
    double r2_h_to_z = 0.0;
    double orth_error = 0.0;
    double eps_whitening = 0.0;
    double delta_gap = 0.0;
    double delta_gap_n = 0.0;
    double d_term = 0.0;
    double bound_value = 0.0;
    double procrustes_error = 0.0;
    double bound_slack = 0.0;
    bool bound_pass = false;
    double final_total = 0.0;
    double final_align = 0.0;
    double final_reg = 0.0;
    double eval_align = 0.0;           ///< raw alignment on the audit split
    double whitened_align = 0.0;       ///< alignment after whitening the outputs
    double whitened_align_se = 0.0;
    double min_grad_norm = 0.0;
    bool underflow = false;
    bool diverged = false;
    long diverged_step = -1;
    int restarts = 1;

    bool converged() const { return !diverged && r2_h_to_z > 0.9; }
    /// Consistency of the stored bound with its inputs.
    double recomputed_bound() const { return recovery_bound(eps_whitening, d_term_from(delta_gap, rho)); }
};

/// Stable column order of results.csv.
inline const std::vector<std::string>& report_columns() {
    static const std::vector<std::string> cols = {
        "run_id",        "seed",          "config_hash",   "method",         "mixing",       "dist",
        "alpha",         "dim",           "lambda",        "rho",            "steps",        "r2_z_to_h",
        "r2_h_to_z",     "orth_error",    "eps_whitening", "delta_gap",      "delta_gap_n",  "d_term",
        "bound_value",   "procrustes_error", "bound_slack", "bound_pass",    "final_total",  "final_align",
        "final_reg",     "eval_align",    "whitened_align", "whitened_align_se", "min_grad_norm", "underflow",
        "diverged",      "diverged_step", "restarts"};
    return cols;
}

inline nlohmann::json to_json(const EvalReport& r) {
    return nlohmann::json{{"run_id", r.run_id},
                          {"seed", r.seed},
                          {"config_hash", r.config_hash},
                          {"method", r.method},
                          {"mixing", r.mixing},
                          {"dist", r.dist},
                          {"alpha", r.alpha},
                          {"dim", r.dim},
                          {"lambda", r.lambda},
                          {"rho", r.rho},
                          {"steps", r.steps},
                          {"r2_z_to_h", r.r2_z_to_h},
                          {"r2_h_to_z", r.r2_h_to_z},
                          {"orth_error", r.orth_error},
                          {"eps_whitening", r.eps_whitening},
                          {"delta_gap", r.delta_gap},
                          {"delta_gap_n", r.delta_gap_n},
                          {"d_term", r.d_term},
                          {"bound_value", r.bound_value},
                          {"procrustes_error", r.procrustes_error},
                          {"bound_slack", r.bound_slack},
                          {"bound_pass", r.bound_pass},
                          {"final_total", r.final_total},
                          {"final_align", r.final_align},
                          {"final_reg", r.final_reg},
                          {"eval_align", r.eval_align},
                          {"whitened_align", r.whitened_align},
                          {"whitened_align_se", r.whitened_align_se},
                          {"min_grad_norm", r.min_grad_norm},
                          {"underflow", r.underflow},
                          {"diverged", r.diverged},
                          {"diverged_step", r.diverged_step},
                          {"restarts", r.restarts}};
}

namespace detail {
inline std::string csv_cell(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
    if (v.is_number_float()) {
        std::ostringstream os;
        os.precision(17);
        os << v.get<double>();
        return os.str();
    }
    return v.dump();
}
}  // namespace detail

inline void write_results_header(std::ostream& os) {
    const auto& cols = report_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
    os << '\n';
}

inline void write_results_row(std::ostream& os, const EvalReport& r) {
    const nlohmann::json j = to_json(r);
    const auto& cols = report_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << detail::csv_cell(j.at(cols[i]));
    os << '\n';
}

inline void write_results_csv(const std::string& path, const std::vector<EvalReport>& reports) {
    std::ofstream os(path);
    require(static_cast<bool>(os), "cannot open " + path);
    write_results_header(os);
    for (const auto& r : reports) write_results_row(os, r);
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.run_id = j.at("run_id").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.mixing = j.at("mixing").get<std::string>();
    r.dist = j.at("dist").get<std::string>();
    r.alpha = j.at("alpha").get<double>();
    r.dim = j.at("dim").get<int>();
    r.lambda = j.at("lambda").get<double>();
    r.rho = j.at("rho").get<double>();
    r.steps = j.at("steps").get<long>();
    r.r2_z_to_h = j.at("r2_z_to_h").get<double>();
    r.r2_h_to_z = j.at("r2_h_to_z").get<double>();
    r.orth_error = j.at("orth_error").get<double>();
    r.eps_whitening = j.at("eps_whitening").get<double>();
    r.delta_gap = j.at("delta_gap").get<double>();
    r.delta_gap_n = j.at("delta_gap_n").get<double>();
    r.d_term = j.at("d_term").get<double>();
    r.bound_value = j.at("bound_value").get<double>();
    r.procrustes_error = j.at("procrustes_error").get<double>();
    r.bound_slack = j.at("bound_slack").get<double>();
    r.bound_pass = j.at("bound_pass").get<bool>();
    r.final_total = j.at("final_total").get<double>();
    r.final_align = j.at("final_align").get<double>();
    r.final_reg = j.at("final_reg").get<double>();
    r.eval_align = j.at("eval_align").get<double>();
    r.whitened_align = j.at("whitened_align").get<double>();
    r.whitened_align_se = j.at("whitened_align_se").get<double>();
    r.min_grad_norm = j.at("min_grad_norm").get<double>();
    r.underflow = j.at("underflow").get<bool>();
    r.diverged = j.at("diverged").get<bool>();
    r.diverged_step = j.at("diverged_step").get<long>();
    r.restarts = j.at("restarts").get<int>();
    return r;
}

/// Reads a file written by write_results_csv. Columns may appear in any order.
inline std::vector<EvalReport> read_results_csv(const std::string& path) {
    std::ifstream is(path);
    require(static_cast<bool>(is), "cannot open " + path);
    const auto split = [](const std::string& line) {
        std::vector<std::string> out;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) out.push_back(cell);
        if (!line.empty() && line.back() == ',') out.emplace_back();
        return out;
    };
    std::string line;
    require(static_cast<bool>(std::getline(is, line)), "empty results file " + path);
    const std::vector<std::string> header = split(line);
    const nlohmann::json types = to_json(EvalReport{});
    for (const auto& c : report_columns())
        require(std::find(header.begin(), header.end(), c) != header.end(), "results file lacks column " + c);
    std::vector<EvalReport> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const std::vector<std::string> cells = split(line);
        require(cells.size() == header.size(), "ragged row in " + path);
        nlohmann::json j;
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (!types.contains(header[i])) continue;
            const nlohmann::json& t = types.at(header[i]);
            const std::string& v = cells[i];
            if (t.is_string()) j[header[i]] = v;
            else if (t.is_boolean()) j[header[i]] = (v == "1");
            else if (t.is_number_float()) j[header[i]] = std::stod(v);
            else if (t.is_number_unsigned()) j[header[i]] = std::stoull(v);
            else j[header[i]] = std::stol(v);
        }
        out.push_back(report_from_json(j));
    }
    return out;
}

/// Average ranks, ties sharing the mean rank.
inline std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

/// Spearman rank correlation; NaN when fewer than two points or no variation.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), "spearman: size mismatch");
    if (a.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    const auto ra = ranks(a), rb = ranks(b);
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sab / std::sqrt(saa * sbb);
}

struct LossTableRow {
    std::string run_id;
    std::string method;
    double final_align = 0.0;
    double final_reg = 0.0;
    double r2_h_to_z = 0.0;
};

struct AggregateSummary {
    std::vector<LossTableRow> table;  ///< converged runs only
    double spearman_align_r2 = std::numeric_limits<double>::quiet_NaN();
    double spearman_reg_r2 = std::numeric_limits<double>::quiet_NaN();
};

inline AggregateSummary aggregate_reports(const std::vector<EvalReport>& reports) {
    AggregateSummary out;
    std::vector<double> align, reg, r2;
    for (const auto& r : reports) {
        if (!r.converged()) continue;
        out.table.push_back({r.run_id, r.method, r.final_align, r.final_reg, r.r2_h_to_z});
        align.push_back(r.final_align);
        reg.push_back(r.final_reg);
        r2.push_back(r.r2_h_to_z);
    }
    out.spearman_align_r2 = spearman(align, r2);
    out.spearman_reg_r2 = spearman(reg, r2);
    return out;
}

}  // namespace idlab
