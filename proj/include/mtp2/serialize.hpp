#pragma once

#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mtp2/backtest.hpp"
#include "mtp2/errors.hpp"
#include "mtp2/estimators.hpp"
#include "mtp2/io.hpp"
#include "mtp2/matrix.hpp"
#include "mtp2/mtp2.hpp"

// JSON and CSV persistence. Every JSON document is an envelope with
// "schema_version" and a "kind" discriminator; matrices are stored as
// {rows, cols, data} with row-major data. Doubles are dumped in shortest
// round-trip form, so load(save(x)) reproduces x exactly.

namespace mtp2 {

using Json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

namespace detail {

inline Json matrix_to_json(const Matrix& m) {
    Json j;
    j["rows"] = m.rows();
    j["cols"] = m.cols();
    j["data"] = m.data();
    return j;
}

inline Matrix matrix_from_json(const Json& j, const std::string& field) {
    if (!j.is_object() || !j.contains("rows") || !j.contains("cols") || !j.contains("data"))
        throw ParseError(field + ": matrix needs rows, cols, data");
    const int rows = j.at("rows").get<int>();
    const int cols = j.at("cols").get<int>();
    const std::vector<double> data = j.at("data").get<std::vector<double>>();
    if (rows < 0 || cols < 0 ||
        data.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
        throw ParseError(field + ": data length " + std::to_string(data.size()) +
                         " does not match " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    Matrix m(rows, cols);
    m.data() = data;
    return m;
}

inline Json envelope(const std::string& kind) {
    Json j;
    j["schema_version"] = kSchemaVersion;
    j["kind"] = kind;
    return j;
}

inline void check_envelope(const Json& j, const std::string& kind) {
    if (!j.is_object() || !j.contains("kind") || !j.contains("schema_version"))
        throw ParseError("document lacks a kind/schema_version envelope");
    if (j.at("kind").get<std::string>() != kind)
        throw ParseError("expected kind '" + kind + "', found '" +
                         j.at("kind").get<std::string>() + "'");
    const int version = j.at("schema_version").get<int>();
    if (version != kSchemaVersion)
        throw ParseError("unsupported schema_version " + std::to_string(version));
}

} // namespace detail

inline void save_json(const Json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path);
}

inline Json load_json(const std::string& path) {
    std::ifstream in(resolve_data_path(path));
    if (!in) throw IoError("cannot read " + path);
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
}

// ---- covariance estimates ----

inline Json to_json(const CovarianceEstimate& e) {
    Json j = detail::envelope("covariance_estimate");
    j["estimator_id"] = e.estimator_id;
    j["params"] = e.params;
    j["matrix"] = detail::matrix_to_json(e.matrix);
    return j;
}

inline CovarianceEstimate estimate_from_json(const Json& j) {
    detail::check_envelope(j, "covariance_estimate");
    try {
        CovarianceEstimate e;
        e.estimator_id = j.at("estimator_id").get<std::string>();
        e.params = j.at("params").get<std::map<std::string, std::string>>();
        e.matrix = detail::matrix_from_json(j.at("matrix"), "matrix");
        return e;
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("covariance_estimate: ") + ex.what());
    }
}

// ---- solver fits ----

// A stored fit keeps the input matrix next to the solution so the optimality
// conditions can be re-audited later without the original data.
struct FitRecord {
    MtpSolution solution;
    Matrix input;  // the matrix the solver was given
};

inline Json to_json(const FitRecord& f) {
    Json j = detail::envelope("mtp2_fit");
    j["input"] = detail::matrix_to_json(f.input);
    j["input_scale"] = f.solution.input_scale;
    j["sigma_hat"] = detail::matrix_to_json(f.solution.sigma_hat);
    j["k_hat"] = detail::matrix_to_json(f.solution.k_hat);
    j["kkt_residual"] = f.solution.kkt_residual;
    j["iterations"] = f.solution.iterations;
    j["converged"] = f.solution.converged;
    j["diagonal_shift"] = f.solution.diagonal_shift;
    j["objective_history"] = f.solution.objective_history;
    Json active = Json::array();
    for (const auto& [a, b] : f.solution.active_set) active.push_back(Json::array({a, b}));
    j["active_set"] = active;
    j["kendall"] = f.solution.kendall;
    if (f.solution.kendall) {
        j["ridge"] = f.solution.ridge;
        j["sigma_corr"] = detail::matrix_to_json(f.solution.sigma_corr);
        j["k_corr"] = detail::matrix_to_json(f.solution.k_corr);
    }
    return j;
}

inline FitRecord fit_from_json(const Json& j) {
    detail::check_envelope(j, "mtp2_fit");
    try {
        FitRecord f;
        f.input = detail::matrix_from_json(j.at("input"), "input");
        f.solution.input_scale = j.at("input_scale").get<std::string>();
        f.solution.sigma_hat = detail::matrix_from_json(j.at("sigma_hat"), "sigma_hat");
        f.solution.k_hat = detail::matrix_from_json(j.at("k_hat"), "k_hat");
        f.solution.kkt_residual = j.at("kkt_residual").get<double>();
        f.solution.iterations = j.at("iterations").get<int>();
        f.solution.converged = j.at("converged").get<bool>();
        f.solution.diagonal_shift = j.at("diagonal_shift").get<double>();
        f.solution.objective_history = j.at("objective_history").get<std::vector<double>>();
        for (const Json& pair : j.at("active_set"))
            f.solution.active_set.emplace_back(pair.at(0).get<int>(), pair.at(1).get<int>());
        f.solution.kendall = j.at("kendall").get<bool>();
        if (f.solution.kendall) {
            f.solution.ridge = j.at("ridge").get<double>();
            f.solution.sigma_corr = detail::matrix_from_json(j.at("sigma_corr"), "sigma_corr");
            f.solution.k_corr = detail::matrix_from_json(j.at("k_corr"), "k_corr");
        }
        return f;
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("mtp2_fit: ") + ex.what());
    }
}

// ---- backtest results ----

inline Json to_json(const BacktestResult& r) {
    Json j = detail::envelope("backtest_result");
    Json cfg;
    cfg["n"] = r.config.n;
    cfg["t"] = r.config.t;
    cfg["rebalance_days"] = r.config.rebalance_days;
    cfg["horizon_months"] = r.config.horizon_months;
    cfg["estimator_id"] = r.config.estimator_id;
    cfg["estimator_params"] = r.config.estimator_params;
    cfg["strategy"] = strategy_name(r.config.strategy);
    cfg["correlation_cut"] = r.config.correlation_cut;
    cfg["seed"] = r.config.seed;
    cfg["universe_mode"] = r.config.universe_mode;
    cfg["universe_window"] = r.config.universe_window;
    cfg["universe_completeness"] = r.config.universe_completeness;
    cfg["ew_fraction"] = r.config.ew_fraction;
    cfg["drift_accounting"] = r.config.drift_accounting;
    j["config"] = cfg;
    j["monthly_returns"] = r.monthly_returns;
    j["monthly_riskfree"] = r.monthly_riskfree;
    Json metrics;
    metrics["annualized_std"] = r.metrics.annualized_std;
    metrics["sharpe"] = r.metrics.sharpe;
    metrics["sharpe_monthly"] = r.metrics.sharpe_monthly;
    metrics["information_ratio"] = r.metrics.information_ratio;
    metrics["information_ratio_monthly"] = r.metrics.information_ratio_monthly;
    j["metrics"] = metrics;
    Json periods = Json::array();
    for (const PeriodRecord& p : r.periods) {
        Json jp;
        jp["index"] = p.index;
        jp["start_date"] = p.start_date;
        jp["universe"] = p.universe;
        jp["skipped"] = p.skipped;
        jp["note"] = p.note;
        if (!p.skipped) {
            jp["monthly_return"] = p.monthly_return;
            jp["monthly_riskfree"] = p.monthly_riskfree;
            Json w;
            w["assets"] = p.weights.assets;
            w["weights"] = p.weights.weights;
            w["strategy_id"] = p.weights.strategy_id;
            jp["weights"] = w;
        }
        periods.push_back(jp);
    }
    j["periods"] = periods;
    return j;
}

inline BacktestResult backtest_from_json(const Json& j) {
    detail::check_envelope(j, "backtest_result");
    try {
        BacktestResult r;
        const Json& cfg = j.at("config");
        r.config.n = cfg.at("n").get<int>();
        r.config.t = cfg.at("t").get<int>();
        r.config.rebalance_days = cfg.at("rebalance_days").get<int>();
        r.config.horizon_months = cfg.at("horizon_months").get<int>();
        r.config.estimator_id = cfg.at("estimator_id").get<std::string>();
        r.config.estimator_params =
            cfg.at("estimator_params").get<std::map<std::string, std::string>>();
        r.config.strategy = strategy_from_name(cfg.at("strategy").get<std::string>());
        r.config.correlation_cut = cfg.at("correlation_cut").get<double>();
        r.config.seed = cfg.at("seed").get<std::uint64_t>();
        r.config.universe_mode = cfg.at("universe_mode").get<std::string>();
        r.config.universe_window = cfg.at("universe_window").get<int>();
        r.config.universe_completeness = cfg.at("universe_completeness").get<double>();
        r.config.ew_fraction = cfg.at("ew_fraction").get<double>();
        r.config.drift_accounting = cfg.at("drift_accounting").get<bool>();
        r.monthly_returns = j.at("monthly_returns").get<std::vector<double>>();
        r.monthly_riskfree = j.at("monthly_riskfree").get<std::vector<double>>();
        const Json& metrics = j.at("metrics");
        r.metrics.annualized_std = metrics.at("annualized_std").get<double>();
        r.metrics.sharpe = metrics.at("sharpe").get<double>();
        r.metrics.sharpe_monthly = metrics.at("sharpe_monthly").get<double>();
        r.metrics.information_ratio = metrics.at("information_ratio").get<double>();
        r.metrics.information_ratio_monthly =
            metrics.at("information_ratio_monthly").get<double>();
        for (const Json& jp : j.at("periods")) {
            PeriodRecord p;
            p.index = jp.at("index").get<int>();
            p.start_date = jp.at("start_date").get<std::string>();
            p.universe = jp.at("universe").get<std::vector<std::string>>();
            p.skipped = jp.at("skipped").get<bool>();
            p.note = jp.at("note").get<std::string>();
            if (!p.skipped) {
                p.monthly_return = jp.at("monthly_return").get<double>();
                p.monthly_riskfree = jp.at("monthly_riskfree").get<double>();
                const Json& w = jp.at("weights");
                p.weights.assets = w.at("assets").get<std::vector<std::string>>();
                p.weights.weights = w.at("weights").get<Vector>();
                p.weights.strategy_id = w.at("strategy_id").get<std::string>();
            }
            r.periods.push_back(std::move(p));
        }
        return r;
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("backtest_result: ") + ex.what());
    }
}

// ---- CSV companions ----

// One row per period: index, start date, return, risk-free, skipped, note.
inline void save_backtest_csv(const BacktestResult& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "index,start_date,monthly_return,monthly_riskfree,skipped,note\n";
    for (const PeriodRecord& p : r.periods) {
        out << p.index << ',' << p.start_date << ',';
        if (p.skipped)
            out << ",,true,";
        else
            out << detail::format_double(p.monthly_return) << ','
                << detail::format_double(p.monthly_riskfree) << ",false,";
        out << p.note << '\n';
    }
    if (!out) throw IoError("write failed for " + path);
}

// format: "json" for the full envelope, "csv" for the bare matrix with the
// given labels (empty labels suppress the header row).
inline void save_estimate(const CovarianceEstimate& e, const std::string& path,
                          const std::string& format,
                          const std::vector<std::string>& labels = {}) {
    if (format == "json") {
        save_json(to_json(e), path);
    } else if (format == "csv") {
        write_matrix_csv(e.matrix, labels, path);
    } else {
        throw UsageError("save_estimate: unknown format '" + format + "'");
    }
}

inline void save_backtest(const BacktestResult& r, const std::string& path,
                          const std::string& format) {
    if (format == "json") {
        save_json(to_json(r), path);
    } else if (format == "csv") {
        save_backtest_csv(r, path);
    } else {
        throw UsageError("save_backtest: unknown format '" + format + "'");
    }
}

} // namespace mtp2
