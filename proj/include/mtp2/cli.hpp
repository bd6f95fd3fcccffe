#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mtp2/backtest.hpp"
#include "mtp2/errors.hpp"
#include "mtp2/estimators.hpp"
#include "mtp2/io.hpp"
#include "mtp2/mtp2.hpp"
#include "mtp2/portfolio.hpp"
#include "mtp2/serialize.hpp"
#include "mtp2/stats.hpp"
#include "mtp2/synthetic.hpp"

// Command-line driver. Subcommands: estimate, verify, backtest, compare,
// synth. Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
// failure. Unknown flags are rejected. MTP2_DATA_DIR is honored for relative
// input paths; output paths are used verbatim.

namespace mtp2 {
namespace cli_detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, e - b + 1);
}

// Flat key = value files with [section] headers. Full-line comments start
// with '#' or ';'. Keys may not repeat within a section.
struct ConfigFile {
    std::map<std::string, std::map<std::string, std::string>> sections;

    bool has(const std::string& section) const { return sections.count(section) != 0; }
    const std::map<std::string, std::string>& section(const std::string& name) const {
        static const std::map<std::string, std::string> empty;
        const auto it = sections.find(name);
        return it == sections.end() ? empty : it->second;
    }
};

inline ConfigFile parse_config_file(const std::string& path) {
    std::ifstream in(resolve_data_path(path));
    if (!in) throw IoError("cannot read config " + path);
    ConfigFile cfg;
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        const std::string at = path + ":" + std::to_string(line_no);
        if (t.front() == '[') {
            if (t.back() != ']' || t.size() < 3)
                throw UsageError(at + ": malformed section header '" + t + "'");
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty()) throw UsageError(at + ": empty section name");
            cfg.sections[section];
            continue;
        }
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw UsageError(at + ": expected 'key = value', got '" + t + "'");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty()) throw UsageError(at + ": empty key");
        if (section.empty())
            throw UsageError(at + ": key '" + key + "' appears before any [section]");
        auto [it, inserted] = cfg.sections[section].emplace(key, value);
        (void)it;
        if (!inserted) throw UsageError(at + ": duplicate key '" + key + "'");
    }
    return cfg;
}

inline double to_double(const std::string& v, const std::string& what) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw UsageError(what + ": '" + v + "' is not a number");
    }
}

inline int to_int(const std::string& v, const std::string& what) {
    try {
        std::size_t used = 0;
        const int out = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw UsageError(what + ": '" + v + "' is not an integer");
    }
}

inline std::uint64_t to_u64(const std::string& v, const std::string& what) {
    try {
        std::size_t used = 0;
        const unsigned long long out = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw UsageError(what + ": '" + v + "' is not a nonnegative integer");
    }
}

inline bool to_bool(const std::string& v, const std::string& what) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw UsageError(what + ": '" + v + "' is not a boolean");
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == ',') {
            const std::string t = trim(cur);
            if (!t.empty()) out.push_back(t);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    const std::string t = trim(cur);
    if (!t.empty()) out.push_back(t);
    return out;
}

// Parameter keys each estimator accepts; anything else in a config or on the
// command line is rejected, never ignored.
inline const std::map<std::string, std::set<std::string>>& estimator_param_schema() {
    static const std::map<std::string, std::set<std::string>> schema = {
        {"mtp2", {"tol", "max_iter"}},
        {"mtp2-kt", {"tol", "max_iter"}},
        {"sample", {"denominator"}},
        {"sample-pinv", {"denominator"}},
        {"ls", {"rho"}},
        {"efm", {}},
        {"afm-ls", {}},
        {"poet", {"k", "c", "threshold_scale"}},
        {"glasso", {"lambda", "tol", "max_iter"}},
    };
    return schema;
}

inline void validate_estimator_params(const std::string& estimator_id,
                                      const std::map<std::string, std::string>& params) {
    const auto& schema = estimator_param_schema();
    const auto it = schema.find(estimator_id);
    if (it == schema.end()) throw UsageError("unknown estimator '" + estimator_id + "'");
    for (const auto& [key, value] : params) {
        (void)value;
        if (!it->second.count(key))
            throw UsageError("estimator '" + estimator_id + "' does not take parameter '" +
                             key + "'");
    }
}

inline BacktestConfig backtest_config_from(const ConfigFile& cfg) {
    static const std::set<std::string> known = {
        "n", "t", "rebalance_days", "horizon_months", "estimator", "strategy",
        "correlation_cut", "seed", "universe_mode", "universe_window",
        "universe_completeness", "ew_fraction", "drift_accounting", "threads"};
    BacktestConfig bc;
    for (const auto& [key, value] : cfg.section("backtest")) {
        if (!known.count(key)) throw UsageError("[backtest] unknown key '" + key + "'");
        const std::string what = "[backtest] " + key;
        if (key == "n") bc.n = to_int(value, what);
        else if (key == "t") bc.t = to_int(value, what);
        else if (key == "rebalance_days") bc.rebalance_days = to_int(value, what);
        else if (key == "horizon_months") bc.horizon_months = to_int(value, what);
        else if (key == "estimator") bc.estimator_id = value;
        else if (key == "strategy") bc.strategy = strategy_from_name(value);
        else if (key == "correlation_cut") bc.correlation_cut = to_double(value, what);
        else if (key == "seed") bc.seed = to_u64(value, what);
        else if (key == "universe_mode") {
            if (value != "auto" && value != "filtered" && value != "all")
                throw UsageError(what + ": must be auto, filtered, or all");
            bc.universe_mode = value;
        } else if (key == "universe_window") bc.universe_window = to_int(value, what);
        else if (key == "universe_completeness") bc.universe_completeness = to_double(value, what);
        else if (key == "ew_fraction") bc.ew_fraction = to_double(value, what);
        else if (key == "drift_accounting") bc.drift_accounting = to_bool(value, what);
        else if (key == "threads") bc.threads = to_int(value, what);
    }
    bc.estimator_params = cfg.section("estimator");
    validate_estimator_params(bc.estimator_id, bc.estimator_params);
    return bc;
}

struct CompareSpec {
    std::vector<std::string> methods;
    std::vector<int> n_grid;
    std::vector<int> t_grid;
    std::string metric = "std";  // std | sharpe | ir
    std::map<std::string, std::map<std::string, std::string>> method_params;
};

inline CompareSpec compare_spec_from(const ConfigFile& cfg) {
    static const std::set<std::string> known = {"methods", "n_grid", "t_grid", "metric"};
    CompareSpec spec;
    for (const auto& [key, value] : cfg.section("compare")) {
        if (!known.count(key)) throw UsageError("[compare] unknown key '" + key + "'");
        if (key == "methods") spec.methods = split_list(value);
        else if (key == "n_grid") {
            for (const std::string& v : split_list(value))
                spec.n_grid.push_back(to_int(v, "[compare] n_grid"));
        } else if (key == "t_grid") {
            for (const std::string& v : split_list(value))
                spec.t_grid.push_back(to_int(v, "[compare] t_grid"));
        } else if (key == "metric") {
            if (value != "std" && value != "sharpe" && value != "ir")
                throw UsageError("[compare] metric: must be std, sharpe, or ir");
            spec.metric = value;
        }
    }
    for (const auto& [name, kv] : cfg.sections) {
        if (name.rfind("estimator.", 0) == 0) {
            const std::string id = name.substr(std::string("estimator.").size());
            validate_estimator_params(id, kv);
            spec.method_params[id] = kv;
        } else if (name != "backtest" && name != "compare" && name != "estimator") {
            throw UsageError("unknown config section [" + name + "]");
        }
    }
    return spec;
}

inline std::string fixed3(double v) {
    if (!std::isfinite(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

inline std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6e", v);
    return buf;
}

inline void print_warnings(const std::vector<std::string>& warnings) {
    for (const std::string& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
}

// ---- estimate ----

struct EstimateArgs {
    std::string input;
    std::string input_format = "wide";
    bool log_returns = false;
    std::string method;
    std::string factors;
    std::string out;
    std::map<std::string, std::string> params;  // from method-specific flags
};

inline int cmd_estimate(const EstimateArgs& a) {
    validate_estimator_params(a.method, a.params);
    std::vector<std::string> warnings;
    const ReturnsPanel panel = load_returns(a.input, a.input_format, &warnings, a.log_returns);
    print_warnings(warnings);
    if (panel.has_missing())
        throw InvalidInput("panel has missing cells; estimate needs a complete panel");

    const bool needs_factors = (a.method == "efm" || a.method == "afm-ls");
    if (needs_factors && a.factors.empty())
        throw UsageError("--factors is required for method '" + a.method + "'");
    FactorPanel factors;
    if (needs_factors) {
        factors = load_factors(a.factors);
        if (factors.dates != panel.dates)
            throw WindowMismatch("factor dates do not match the returns panel");
    }

    std::string out_format;
    if (!a.out.empty()) {
        const std::string ext = std::filesystem::path(a.out).extension().string();
        if (ext == ".json") out_format = "json";
        else if (ext == ".csv") out_format = "csv";
        else throw UsageError("--out must end in .json or .csv, got '" + a.out + "'");
    }

    const double tol = a.params.count("tol") ? to_double(a.params.at("tol"), "--tol") : 1e-7;
    const int max_iter =
        a.params.count("max_iter") ? to_int(a.params.at("max_iter"), "--max-iter") : 500;

    int exit_code = 0;
    if (a.method == "mtp2" || a.method == "mtp2-kt") {
        FitRecord fit;
        if (a.method == "mtp2") {
            fit.input = sample_covariance(panel, Denominator::T);
            fit.solution = mtp2_mle(fit.input, tol, max_iter);
        } else {
            fit.solution = mtp2_mle_kendall(panel, tol, max_iter);
            fit.input = kendall_tau_matrix(panel);
            if (fit.solution.ridge > 0.0)
                for (int i = 0; i < fit.input.rows(); ++i)
                    fit.input(i, i) += fit.solution.ridge;
        }
        std::printf("method=%s n=%d t=%d\n", a.method.c_str(), panel.N(), panel.T());
        std::printf("kkt_residual=%s active_set_size=%zu iterations=%d converged=%s\n",
                    sci(fit.solution.kkt_residual).c_str(), fit.solution.active_set.size(),
                    fit.solution.iterations, fit.solution.converged ? "true" : "false");
        if (!a.out.empty()) {
            if (out_format == "json") save_json(to_json(fit), a.out);
            else write_matrix_csv(fit.solution.sigma_hat, panel.assets, a.out);
            std::printf("wrote %s\n", a.out.c_str());
        }
        if (!fit.solution.converged) {
            std::fprintf(stderr, "error: solver did not converge within %d sweeps\n",
                         max_iter);
            exit_code = 3;
        }
        return exit_code;
    }

    CovarianceEstimate est;
    if (a.method == "sample" || a.method == "sample-pinv") {
        Denominator den = Denominator::T_minus_1;
        if (a.params.count("denominator")) {
            const std::string& d = a.params.at("denominator");
            if (d == "t") den = Denominator::T;
            else if (d == "t-1") den = Denominator::T_minus_1;
            else throw UsageError("--denominator must be t or t-1");
        }
        est.matrix = sample_covariance(panel, den);
        est.estimator_id = a.method;
        est.params["denominator"] = (den == Denominator::T) ? "t" : "t-1";
    } else if (a.method == "ls") {
        const Matrix s = sample_covariance(panel, Denominator::T);
        double rho;
        if (a.params.count("rho")) {
            rho = to_double(a.params.at("rho"), "--rho");
        } else {
            const LwRho lw = lw_optimal_rho(panel);
            rho = lw.rho;
            if (lw.degenerate) est.params["rho_degenerate"] = "true";
        }
        est.matrix = linear_shrinkage(s, rho);
        est.estimator_id = "ls";
        est.params["rho"] = detail::format_double(rho);
    } else if (a.method == "poet") {
        const int k = a.params.count("k") ? to_int(a.params.at("k"), "--k") : 3;
        const bool c_auto = !a.params.count("c") || a.params.at("c") == "auto";
        const double c = c_auto ? 0.0 : to_double(a.params.at("c"), "--c");
        std::string scale = "covariance";
        if (a.params.count("threshold_scale")) scale = a.params.at("threshold_scale");
        est = poet(panel, k, c, c_auto, scale);
    } else if (a.method == "efm") {
        est = exact_factor_model(panel, factors);
    } else if (a.method == "afm-ls") {
        est = afm_ls(panel, factors);
    } else if (a.method == "glasso") {
        if (a.params.count("lambda")) {
            const double lambda = to_double(a.params.at("lambda"), "--lambda");
            const Matrix s = sample_covariance(panel, Denominator::T);
            const GlassoResult g = glasso(s, lambda, tol, max_iter);
            est.matrix = g.sigma_hat;
            est.estimator_id = "glasso";
            est.params["lambda"] = detail::format_double(lambda);
        } else {
            const GlassoCvResult g = glasso_cv(panel, tol, max_iter);
            est.matrix = g.fit.sigma_hat;
            est.estimator_id = "glasso";
            est.params["lambda"] = detail::format_double(g.lambda);
            est.params["cv"] = "3-fold";
        }
    } else {
        throw UsageError("unknown method '" + a.method + "'");
    }

    std::printf("method=%s n=%d t=%d\n", est.estimator_id.c_str(), panel.N(), panel.T());
    for (const auto& [key, value] : est.params)
        std::printf("param %s=%s\n", key.c_str(), value.c_str());
    if (!a.out.empty()) {
        save_estimate(est, a.out, out_format, panel.assets);
        std::printf("wrote %s\n", a.out.c_str());
    }
    return exit_code;
}

// ---- verify ----

struct VerifyArgs {
    std::string fit;
    std::string matrix;
    bool paper_example = false;
    double tol = 1e-6;
};

inline bool report_check(const char* name, bool ok, const std::string& detail = "") {
    std::printf("%-34s %s%s%s\n", name, ok ? "ok" : "FAIL",
                detail.empty() ? "" : "  ", detail.c_str());
    return ok;
}

// The bivariate-t counterexample: density products at x = (-1, 1), y = (0, 0)
// versus their meet and join. The density is NOT MTP2, so success means the
// inequality is violated; exit 0 confirms the violation.
inline int cmd_verify_paper_example() {
    Matrix p(2, 2);
    p(0, 0) = 1.0;
    p(1, 1) = 1.0;
    p(0, 1) = p(1, 0) = -0.1;
    const DensityOracle density = bivariate_t_oracle(p, 1);

    const Vector x = {-1.0, 1.0};
    const Vector y = {0.0, 0.0};
    const Vector meet = {-1.0, 0.0};
    const Vector join = {0.0, 1.0};

    const double lhs = density.evaluate(x) * density.evaluate(y);
    const double rhs = density.evaluate(meet) * density.evaluate(join);
    const double c = density.evaluate(y);  // density at the origin
    const double lhs_norm = lhs / (c * c);
    const double rhs_norm = rhs / (c * c);
    const double lhs_expected = std::pow(3.2, -1.5);
    const double rhs_expected = 0.125;

    std::printf("bivariate t, df=1, precision [[1,-0.1],[-0.1,1]]\n");
    std::printf("x = (-1, 1), y = (0, 0), meet = (-1, 0), join = (0, 1)\n");
    std::printf("p(x) p(y)         = %s\n", sci(lhs).c_str());
    std::printf("p(meet) p(join)   = %s\n", sci(rhs).c_str());
    std::printf("normalized lhs    = %s (expected 3.2^(-3/2) = %s)\n",
                sci(lhs_norm).c_str(), sci(lhs_expected).c_str());
    std::printf("normalized rhs    = %s (expected 2^(-3)     = %s)\n",
                sci(rhs_norm).c_str(), sci(rhs_expected).c_str());

    bool ok = true;
    ok &= report_check("inequality violated (lhs > rhs)", lhs > rhs);
    ok &= report_check("lhs matches hand value to 1e-12",
                       std::abs(lhs_norm - lhs_expected) <= 1e-12);
    ok &= report_check("rhs matches hand value to 1e-12",
                       std::abs(rhs_norm - rhs_expected) <= 1e-12);
    ok &= report_check("pair check flags the violation",
                       !check_mtp2_pair(density, x, y));
    std::printf("density is not MTP2: %s\n", ok ? "confirmed" : "NOT confirmed");
    return ok ? 0 : 3;
}

inline int cmd_verify_fit(const std::string& path, double tol) {
    const FitRecord fit = fit_from_json(load_json(path));
    const bool kendall = fit.solution.kendall;
    const Matrix& sigma = kendall ? fit.solution.sigma_corr : fit.solution.sigma_hat;
    const Matrix& k = kendall ? fit.solution.k_corr : fit.solution.k_hat;
    std::printf("fit: %s scale, n=%d, iterations=%d\n",
                fit.solution.input_scale.c_str(), sigma.rows(), fit.solution.iterations);

    bool ok = true;
    ok &= report_check("solver reported convergence", fit.solution.converged);
    ok &= report_check("sigma_hat positive definite",
                       is_positive_definite(fit.solution.sigma_hat));
    const double m_tol = tol * std::max(1.0, fit.solution.k_hat.max_abs());
    ok &= report_check("k_hat is an M-matrix", is_m_matrix(fit.solution.k_hat, m_tol));
    const KktReport rep = kkt_report(sigma, k, fit.input);
    ok &= report_check("diagonal match", rep.diagonal <= tol, sci(rep.diagonal));
    ok &= report_check("lower-bound feasibility", rep.lower_bound <= tol,
                       sci(rep.lower_bound));
    ok &= report_check("sign feasibility", rep.sign <= tol, sci(rep.sign));
    ok &= report_check("complementary slackness", rep.slackness <= tol,
                       sci(rep.slackness));
    ok &= report_check("sigma * k close to identity", rep.inverse_gap <= tol,
                       sci(rep.inverse_gap));
    ok &= report_check("stored residual within tolerance",
                       fit.solution.kkt_residual <= tol,
                       sci(fit.solution.kkt_residual));
    return ok ? 0 : 3;
}

inline int cmd_verify_matrix(const std::string& path) {
    const Matrix m = load_matrix_csv(path);
    std::printf("matrix: %dx%d\n", m.rows(), m.cols());
    bool ok = true;
    ok &= report_check("square and symmetric", m.square() && m.is_symmetric());
    ok &= report_check("positive definite", m.square() && m.is_symmetric() &&
                                                is_positive_definite(m));
    ok &= report_check("M-matrix (precision sign pattern)", is_m_matrix(m));
    return ok ? 0 : 3;
}

inline int cmd_verify(const VerifyArgs& a) {
    const int given = (!a.fit.empty() ? 1 : 0) + (!a.matrix.empty() ? 1 : 0) +
                      (a.paper_example ? 1 : 0);
    if (given != 1)
        throw UsageError("verify needs exactly one of --fit, --matrix, --paper-example");
    if (a.paper_example) return cmd_verify_paper_example();
    if (!a.fit.empty()) return cmd_verify_fit(a.fit, a.tol);
    return cmd_verify_matrix(a.matrix);
}

// ---- backtest ----

struct BacktestArgs {
    std::string config;
    std::string data;
    std::string out;  // path prefix
    int threads = -1;
    bool log_returns = false;
};

inline void print_metrics_row(const BacktestResult& r) {
    const int completed = static_cast<int>(r.monthly_returns.size());
    const int skipped = static_cast<int>(r.periods.size()) - completed;
    std::printf("estimator=%s strategy=%s months=%d skipped=%d\n",
                r.config.estimator_id.c_str(), strategy_name(r.config.strategy).c_str(),
                completed, skipped);
    if (completed >= 2) {
        std::printf("std_x100=%s sharpe=%s ir=%s\n",
                    fixed3(100.0 * r.metrics.annualized_std).c_str(),
                    fixed3(r.metrics.sharpe).c_str(),
                    fixed3(r.metrics.information_ratio).c_str());
    } else {
        std::printf("std_x100=nan sharpe=nan ir=nan\n");
    }
}

// Skipped silently when fewer than 60 completed months exist.
inline void write_rolling_csv(const BacktestResult& r, const std::string& path) {
    if (r.monthly_returns.size() < 60) {
        std::fprintf(stderr,
                     "note: %zu completed months, rolling series needs 60; skipping %s\n",
                     r.monthly_returns.size(), path.c_str());
        return;
    }
    const std::vector<RollingPoint> cum = rolling_metric_series(r, RollingWindow::cumulative);
    const std::vector<RollingPoint> trail =
        rolling_metric_series(r, RollingWindow::sixty_month);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "months,cum_ann_std,cum_sharpe,cum_ir,trail60_ann_std,trail60_sharpe,trail60_ir\n";
    for (std::size_t i = 0; i < cum.size(); ++i) {
        out << cum[i].months << ',' << detail::format_double(cum[i].annualized_std) << ','
            << detail::format_double(cum[i].sharpe) << ','
            << detail::format_double(cum[i].information_ratio) << ','
            << detail::format_double(trail[i].annualized_std) << ','
            << detail::format_double(trail[i].sharpe) << ','
            << detail::format_double(trail[i].information_ratio) << '\n';
    }
    if (!out) throw IoError("write failed for " + path);
}

// Long-format weights history: one row per held (period, asset) position.
inline void write_weights_csv(const BacktestResult& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "index,start_date,asset,weight\n";
    for (const PeriodRecord& p : r.periods) {
        if (p.skipped) continue;
        for (std::size_t i = 0; i < p.weights.assets.size(); ++i)
            out << p.index << ',' << p.start_date << ',' << p.weights.assets[i] << ','
                << detail::format_double(p.weights.weights[i]) << '\n';
    }
    if (!out) throw IoError("write failed for " + path);
}

inline int cmd_backtest(const BacktestArgs& a) {
    const ConfigFile cfg = parse_config_file(a.config);
    for (const auto& [name, kv] : cfg.sections) {
        (void)kv;
        if (name != "backtest" && name != "estimator")
            throw UsageError("unknown config section [" + name + "] for backtest");
    }
    BacktestConfig bc = backtest_config_from(cfg);
    if (a.threads >= 0) bc.threads = a.threads;
    const MarketDataBundle bundle = load_market_bundle(a.data, a.log_returns);
    print_warnings(bundle.warnings);

    const BacktestResult result = run_backtest(bc, bundle);
    print_metrics_row(result);
    for (const PeriodRecord& p : result.periods)
        if (p.skipped)
            std::fprintf(stderr, "skipped period %d (%s): %s\n", p.index,
                         p.start_date.c_str(), p.note.c_str());
    if (!a.out.empty()) {
        save_json(to_json(result), a.out + ".json");
        save_backtest_csv(result, a.out + "_periods.csv");
        write_weights_csv(result, a.out + "_weights.csv");
        write_rolling_csv(result, a.out + "_rolling.csv");
        std::printf("wrote %s.json, %s_periods.csv, %s_weights.csv\n", a.out.c_str(),
                    a.out.c_str(), a.out.c_str());
    }
    return 0;
}

// ---- compare ----

struct CompareArgs {
    std::string config;
    std::string data;
    std::string out;      // path prefix
    std::string methods;  // comma list, overrides the config
    int threads = -1;
    bool log_returns = false;
};

inline double metric_value(const BacktestResult& r, const std::string& metric) {
    if (r.monthly_returns.size() < 2) return std::nan("");
    if (metric == "std") return 100.0 * r.metrics.annualized_std;
    if (metric == "sharpe") return r.metrics.sharpe;
    return r.metrics.information_ratio;
}

inline int cmd_compare(const CompareArgs& a) {
    const ConfigFile cfg = parse_config_file(a.config);
    if (cfg.has("estimator"))
        throw UsageError("compare takes per-method [estimator.<id>] sections, not [estimator]");
    CompareSpec spec = compare_spec_from(cfg);
    BacktestConfig base = backtest_config_from(cfg);  // [estimator] absent: params empty
    if (a.threads >= 0) base.threads = a.threads;
    if (!a.methods.empty()) spec.methods = split_list(a.methods);
    if (spec.methods.empty()) throw UsageError("compare: no methods given");
    if (spec.n_grid.empty()) spec.n_grid.push_back(base.n);
    if (spec.t_grid.empty()) spec.t_grid.push_back(base.t);
    const auto& registry = default_estimator_registry();
    for (const std::string& m : spec.methods)
        if (!registry.count(m)) throw UsageError("compare: unknown method '" + m + "'");

    const MarketDataBundle bundle = load_market_bundle(a.data, a.log_returns);
    print_warnings(bundle.warnings);
    const int n_assets = bundle.returns.N();

    struct Row {
        int n, t;
        std::vector<std::string> cells;
    };
    std::vector<Row> rows;
    for (int n : spec.n_grid) {
        for (int t : spec.t_grid) {
            Row row;
            row.n = n;
            row.t = t;
            std::vector<double> values;
            for (const std::string& method : spec.methods) {
                BacktestConfig bc = base;
                bc.t = t;
                bc.estimator_id = method;
                const auto it = spec.method_params.find(method);
                bc.estimator_params = (it == spec.method_params.end())
                                          ? std::map<std::string, std::string>{}
                                          : it->second;
                double value = std::nan("");
                try {
                    MarketDataBundle sliced = bundle;
                    if (bundle.caps) {
                        bc.n = n;
                    } else {
                        // No caps: deterministic universe = first n assets.
                        if (n > n_assets)
                            throw InsufficientData("n exceeds panel width");
                        std::vector<int> idx(static_cast<std::size_t>(n));
                        for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
                        sliced.returns = select_assets(bundle.returns, idx);
                        bc.n = 0;
                        bc.universe_mode = "all";
                    }
                    const BacktestResult res = run_backtest(bc, sliced, registry);
                    value = metric_value(res, spec.metric);
                    if (!a.out.empty() && !std::isnan(value))
                        write_rolling_csv(res, a.out + "_rolling_" + method + "_n" +
                                                   std::to_string(n) + "_t" +
                                                   std::to_string(t) + ".csv");
                } catch (const Error& e) {
                    std::fprintf(stderr, "note: %s at n=%d t=%d: %s\n", method.c_str(), n,
                                 t, e.what());
                }
                values.push_back(value);
            }
            // Best cell: min for std, max otherwise; first wins ties; nan skipped.
            int best = -1;
            for (std::size_t i = 0; i < values.size(); ++i) {
                if (std::isnan(values[i])) continue;
                if (best < 0) {
                    best = static_cast<int>(i);
                    continue;
                }
                const bool better = (spec.metric == "std")
                                        ? values[i] < values[static_cast<std::size_t>(best)]
                                        : values[i] > values[static_cast<std::size_t>(best)];
                if (better) best = static_cast<int>(i);
            }
            for (std::size_t i = 0; i < values.size(); ++i) {
                std::string cell = fixed3(values[i]);
                if (static_cast<int>(i) == best) cell += "*";
                row.cells.push_back(cell);
            }
            rows.push_back(std::move(row));
        }
    }

    // Aligned text table.
    std::vector<std::string> header = {"n", "t"};
    header.insert(header.end(), spec.methods.begin(), spec.methods.end());
    std::vector<std::size_t> width(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
    std::vector<std::vector<std::string>> text_rows;
    for (const Row& row : rows) {
        std::vector<std::string> cells = {std::to_string(row.n), std::to_string(row.t)};
        cells.insert(cells.end(), row.cells.begin(), row.cells.end());
        for (std::size_t c = 0; c < cells.size(); ++c)
            width[c] = std::max(width[c], cells[c].size());
        text_rows.push_back(std::move(cells));
    }
    std::string table;
    const auto append_row = [&](const std::vector<std::string>& cells) {
        for (std::size_t c = 0; c < cells.size(); ++c) {
            table += std::string(width[c] - cells[c].size(), ' ') + cells[c];
            table += (c + 1 == cells.size()) ? "\n" : "  ";
        }
    };
    table += "metric: " + spec.metric +
             (spec.metric == "std" ? " (annualized std x100, lower is better)\n" : "\n");
    append_row(header);
    for (const auto& cells : text_rows) append_row(cells);
    std::fputs(table.c_str(), stdout);

    if (!a.out.empty()) {
        std::ofstream csv(a.out + ".csv");
        if (!csv) throw IoError("cannot write " + a.out + ".csv");
        for (std::size_t c = 0; c < header.size(); ++c)
            csv << (c ? "," : "") << header[c];
        csv << '\n';
        for (const auto& cells : text_rows) {
            for (std::size_t c = 0; c < cells.size(); ++c)
                csv << (c ? "," : "") << cells[c];
            csv << '\n';
        }
        std::ofstream txt(a.out + ".txt");
        if (!txt) throw IoError("cannot write " + a.out + ".txt");
        txt << table;
        std::printf("wrote %s.csv, %s.txt\n", a.out.c_str(), a.out.c_str());
    }
    return 0;
}

// ---- synth ----

struct SynthArgs {
    SyntheticSpec spec;
    std::string spec_path;
    std::string out_dir;
    // which flags were set on the command line (override the spec file)
    std::set<std::string> given;
};

inline SyntheticSpec spec_from_json_file(const std::string& path) {
    const Json j = load_json(path);
    if (!j.is_object()) throw UsageError(path + ": spec must be a JSON object");
    static const std::set<std::string> known = {
        "generator", "n", "t", "seed", "sparsity", "df", "beta_min",
        "beta_max", "market_var", "idio_min", "idio_max", "scale"};
    SyntheticSpec spec;
    try {
        for (const auto& [key, value] : j.items()) {
            if (!known.count(key)) throw UsageError(path + ": unknown spec key '" + key + "'");
            if (key == "generator") spec.generator = value.get<std::string>();
            else if (key == "n") spec.n = value.get<int>();
            else if (key == "t") spec.t = value.get<int>();
            else if (key == "seed") spec.seed = value.get<std::uint64_t>();
            else if (key == "sparsity") spec.sparsity = value.get<double>();
            else if (key == "df") spec.df = value.get<int>();
            else if (key == "beta_min") spec.beta_min = value.get<double>();
            else if (key == "beta_max") spec.beta_max = value.get<double>();
            else if (key == "market_var") spec.market_var = value.get<double>();
            else if (key == "idio_min") spec.idio_min = value.get<double>();
            else if (key == "idio_max") spec.idio_max = value.get<double>();
            else if (key == "scale") spec.scale = value.get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return spec;
}

inline int cmd_synth(const SynthArgs& a) {
    SyntheticSpec spec;
    if (!a.spec_path.empty()) spec = spec_from_json_file(a.spec_path);
    // Command-line flags override file values.
    if (a.given.count("generator")) spec.generator = a.spec.generator;
    if (a.given.count("n")) spec.n = a.spec.n;
    if (a.given.count("t")) spec.t = a.spec.t;
    if (a.given.count("seed")) spec.seed = a.spec.seed;
    if (a.given.count("sparsity")) spec.sparsity = a.spec.sparsity;
    if (a.given.count("df")) spec.df = a.spec.df;
    if (a.given.count("beta_min")) spec.beta_min = a.spec.beta_min;
    if (a.given.count("beta_max")) spec.beta_max = a.spec.beta_max;
    if (a.given.count("market_var")) spec.market_var = a.spec.market_var;
    if (a.given.count("idio_min")) spec.idio_min = a.spec.idio_min;
    if (a.given.count("idio_max")) spec.idio_max = a.spec.idio_max;
    if (a.given.count("scale")) spec.scale = a.spec.scale;

    const SyntheticData data = generate_synthetic(spec);

    std::filesystem::create_directories(a.out_dir);
    const std::filesystem::path root(a.out_dir);
    save_panel(data.panel, (root / "returns.csv").string());

    Json truth = detail::envelope("synthetic_truth");
    Json js;
    js["generator"] = spec.generator;
    js["n"] = spec.n;
    js["t"] = spec.t;
    js["seed"] = spec.seed;
    js["sparsity"] = spec.sparsity;
    js["df"] = spec.df;
    js["beta_min"] = spec.beta_min;
    js["beta_max"] = spec.beta_max;
    js["market_var"] = spec.market_var;
    js["idio_min"] = spec.idio_min;
    js["idio_max"] = spec.idio_max;
    js["scale"] = spec.scale;
    truth["spec"] = js;
    truth["sigma_true"] = detail::matrix_to_json(data.sigma_true);
    truth["k_true"] = detail::matrix_to_json(data.k_true);
    truth["beta_true"] = data.beta_true;
    save_json(truth, (root / "truth.json").string());

    int zero = 0, off = 0;
    const double zero_tol = 1e-12 * std::max(1.0, data.k_true.max_abs());
    for (int i = 0; i < data.k_true.rows(); ++i)
        for (int j = 0; j < data.k_true.cols(); ++j) {
            if (i == j) continue;
            ++off;
            if (std::abs(data.k_true(i, j)) <= zero_tol) ++zero;
        }
    std::printf("generator=%s n=%d t=%d seed=%llu\n", spec.generator.c_str(), spec.n,
                spec.t, static_cast<unsigned long long>(spec.seed));
    std::printf("k_true_m_matrix=%s k_true_off_diagonal_zero_fraction=%s\n",
                is_m_matrix(data.k_true, 1e-10) ? "true" : "false",
                fixed3(off ? static_cast<double>(zero) / off : 0.0).c_str());
    std::printf("wrote %s and %s\n", (root / "returns.csv").string().c_str(),
                (root / "truth.json").string().c_str());
    return 0;
}

} // namespace cli_detail

// Parses and runs one invocation; returns the process exit code.
inline int run_cli(std::vector<std::string> args) {
    using namespace cli_detail;

    CLI::App app{"Covariance estimation under an M-matrix precision constraint, "
                 "baseline estimators, and a rolling portfolio backtest"};
    app.require_subcommand(1);
    int exit_code = 0;

    // estimate
    auto* est = app.add_subcommand("estimate", "Fit a covariance estimator to a panel");
    auto ea = std::make_shared<EstimateArgs>();
    est->add_option("--input", ea->input, "Returns CSV (see --input-format)")->required();
    est->add_option("--input-format", ea->input_format, "Panel layout: wide or long")
        ->check(CLI::IsMember({"wide", "long"}));
    est->add_flag("--log-returns", ea->log_returns,
                  "Convert simple returns to log returns on load");
    est->add_option("--method", ea->method, "Estimator id")
        ->required()
        ->check(CLI::IsMember({"mtp2", "mtp2-kt", "sample", "sample-pinv", "ls", "efm",
                               "afm-ls", "poet", "glasso"}));
    est->add_option("--factors", ea->factors, "Factor CSV (efm, afm-ls)");
    est->add_option("--out", ea->out, "Output path, .json or .csv");
    auto* opt_rho = est->add_option("--rho", "Shrinkage intensity in [0,1] (ls)");
    auto* opt_k = est->add_option("--k", "Number of factors (poet)");
    auto* opt_c = est->add_option("--c", "Threshold constant or 'auto' (poet)");
    auto* opt_lambda = est->add_option("--lambda", "L1 penalty (glasso)");
    auto* opt_tol = est->add_option("--tol", "Convergence tolerance (mtp2, mtp2-kt, glasso)");
    auto* opt_max_iter = est->add_option("--max-iter", "Sweep limit (mtp2, mtp2-kt, glasso)");
    auto* opt_den = est->add_option("--denominator", "t or t-1 (sample, sample-pinv)");
    auto* opt_tscale =
        est->add_option("--threshold-scale", "covariance or correlation (poet)");
    est->callback([=, &exit_code]() {
        if (opt_rho->count()) ea->params["rho"] = opt_rho->as<std::string>();
        if (opt_k->count()) ea->params["k"] = opt_k->as<std::string>();
        if (opt_c->count()) ea->params["c"] = opt_c->as<std::string>();
        if (opt_lambda->count()) ea->params["lambda"] = opt_lambda->as<std::string>();
        if (opt_tol->count()) ea->params["tol"] = opt_tol->as<std::string>();
        if (opt_max_iter->count()) ea->params["max_iter"] = opt_max_iter->as<std::string>();
        if (opt_den->count()) ea->params["denominator"] = opt_den->as<std::string>();
        if (opt_tscale->count()) ea->params["threshold_scale"] = opt_tscale->as<std::string>();
        exit_code = cmd_estimate(*ea);
    });

    // verify
    auto* ver = app.add_subcommand("verify", "Check stored fits and matrices");
    auto va = std::make_shared<VerifyArgs>();
    ver->add_option("--fit", va->fit, "Fit JSON written by estimate");
    ver->add_option("--matrix", va->matrix, "Precision matrix CSV");
    ver->add_flag("--paper-example", va->paper_example,
                  "Evaluate the bivariate-t counterexample");
    ver->add_option("--tol", va->tol, "Check tolerance (default 1e-6)");
    ver->callback([=, &exit_code]() { exit_code = cmd_verify(*va); });

    // backtest
    auto* bt = app.add_subcommand("backtest", "Run the rolling monthly backtest");
    auto ba = std::make_shared<BacktestArgs>();
    bt->add_option("--config", ba->config, "Config file with [backtest] and [estimator]")
        ->required();
    bt->add_option("--data", ba->data, "Bundle directory (returns.csv et al.)")->required();
    bt->add_option("--out", ba->out, "Output path prefix");
    bt->add_option("--threads", ba->threads, "Worker threads (default: config, then cores)");
    bt->add_flag("--log-returns", ba->log_returns, "Convert returns on load");
    bt->callback([=, &exit_code]() { exit_code = cmd_backtest(*ba); });

    // compare
    auto* cmp = app.add_subcommand("compare", "Metric table across methods and (n, t) grid");
    auto ca = std::make_shared<CompareArgs>();
    cmp->add_option("--config", ca->config, "Config file with [compare] and [backtest]")
        ->required();
    cmp->add_option("--data", ca->data, "Bundle directory")->required();
    cmp->add_option("--out", ca->out, "Output path prefix");
    cmp->add_option("--methods", ca->methods, "Comma list, overrides the config");
    cmp->add_option("--threads", ca->threads, "Worker threads");
    cmp->add_flag("--log-returns", ca->log_returns, "Convert returns on load");
    cmp->callback([=, &exit_code]() { exit_code = cmd_compare(*ca); });

    // synth
    auto* syn = app.add_subcommand("synth", "Generate a synthetic bundle with ground truth");
    auto sa = std::make_shared<SynthArgs>();
    syn->add_option("--spec", sa->spec_path, "Spec JSON; flags below override it");
    syn->add_option("--out-dir", sa->out_dir, "Directory for returns.csv and truth.json")
        ->required();
    auto* g_gen = syn->add_option("--generator", sa->spec.generator,
                                  "gaussian_mtp2, single_factor, elliptical_t_inverse_m");
    auto* g_n = syn->add_option("--n", sa->spec.n, "Assets");
    auto* g_t = syn->add_option("--t", sa->spec.t, "Days");
    auto* g_seed = syn->add_option("--seed", sa->spec.seed, "RNG seed");
    auto* g_sp = syn->add_option("--sparsity", sa->spec.sparsity, "Edge probability");
    auto* g_df = syn->add_option("--df", sa->spec.df, "Degrees of freedom");
    auto* g_bmin = syn->add_option("--beta-min", sa->spec.beta_min, "Loading range low");
    auto* g_bmax = syn->add_option("--beta-max", sa->spec.beta_max, "Loading range high");
    auto* g_mv = syn->add_option("--market-var", sa->spec.market_var, "Factor variance");
    auto* g_imin = syn->add_option("--idio-min", sa->spec.idio_min, "Idio variance low");
    auto* g_imax = syn->add_option("--idio-max", sa->spec.idio_max, "Idio variance high");
    auto* g_scale = syn->add_option("--scale", sa->spec.scale, "Return scale");
    syn->callback([=, &exit_code]() {
        if (g_gen->count()) sa->given.insert("generator");
        if (g_n->count()) sa->given.insert("n");
        if (g_t->count()) sa->given.insert("t");
        if (g_seed->count()) sa->given.insert("seed");
        if (g_sp->count()) sa->given.insert("sparsity");
        if (g_df->count()) sa->given.insert("df");
        if (g_bmin->count()) sa->given.insert("beta_min");
        if (g_bmax->count()) sa->given.insert("beta_max");
        if (g_mv->count()) sa->given.insert("market_var");
        if (g_imin->count()) sa->given.insert("idio_min");
        if (g_imax->count()) sa->given.insert("idio_max");
        if (g_scale->count()) sa->given.insert("scale");
        exit_code = cmd_synth(*sa);
    });

    std::vector<const char*> argv;
    argv.push_back("mtp2cov");
    for (const std::string& s : args) argv.push_back(s.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 3;
    }
    return exit_code;
}

} // namespace mtp2
