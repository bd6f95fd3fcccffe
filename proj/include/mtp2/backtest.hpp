#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mtp2/errors.hpp"
#include "mtp2/estimators.hpp"
#include "mtp2/io.hpp"
#include "mtp2/linalg.hpp"
#include "mtp2/matrix.hpp"
#include "mtp2/mtp2.hpp"
#include "mtp2/panel.hpp"
#include "mtp2/portfolio.hpp"
#include "mtp2/stats.hpp"

// Rolling out-of-sample backtest: 21-day months, trailing estimation window,
// universe rebuilt each month (completeness, correlation de-duplication,
// top-N by cap), buy-and-hold accounting within the month. Period evaluation
// is pure given its inputs, so thread count and evaluation order never change
// the result.

namespace mtp2 {

enum class Strategy { gmv, markowitz_momentum, equal_weight };

inline std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::gmv: return "gmv";
        case Strategy::markowitz_momentum: return "markowitz_momentum";
        case Strategy::equal_weight: return "equal_weight";
    }
    return "gmv";
}

inline Strategy strategy_from_name(const std::string& name) {
    if (name == "gmv") return Strategy::gmv;
    if (name == "markowitz_momentum") return Strategy::markowitz_momentum;
    if (name == "equal_weight" || name == "1/N") return Strategy::equal_weight;
    throw UsageError("unknown strategy '" + name + "'");
}

struct BacktestConfig {
    int n = 0;  // universe size; 0 means every panel asset
    int t = 252;
    int rebalance_days = 21;
    int horizon_months = 360;  // upper bound; data may shorten it
    std::string estimator_id = "sample";
    std::map<std::string, std::string> estimator_params;
    Strategy strategy = Strategy::gmv;
    double correlation_cut = 0.95;
    std::uint64_t seed = 0;
    std::string universe_mode = "auto";  // auto | filtered | all
    int universe_window = 1260;
    double universe_completeness = 0.95;
    double ew_fraction = 0.2;
    bool drift_accounting = false;
    int threads = 0;  // 0 = hardware concurrency
};

struct PeriodRecord {
    int index = 0;
    std::string start_date;
    std::vector<std::string> universe;
    PortfolioWeights weights;
    double monthly_return = 0.0;
    double monthly_riskfree = 0.0;
    bool skipped = false;
    std::string note;
};

struct BacktestMetrics {
    double annualized_std = 0.0;
    double sharpe = 0.0;             // annualized, sqrt(12) scaling
    double sharpe_monthly = 0.0;
    double information_ratio = 0.0;  // annualized
    double information_ratio_monthly = 0.0;
};

struct BacktestResult {
    BacktestConfig config;
    std::vector<double> monthly_returns;   // completed periods only, in order
    std::vector<double> monthly_riskfree;  // aligned with monthly_returns
    std::vector<PeriodRecord> periods;     // every period, skips included
    BacktestMetrics metrics;
};

// Covariance estimator registry entry: estimation window (universe columns
// only), optional aligned factor window, and the config's parameter map.
using EstimatorFn = std::function<CovarianceEstimate(
    const ReturnsPanel&, const FactorPanel*, const std::map<std::string, std::string>&)>;

inline double param_or(const std::map<std::string, std::string>& params,
                       const std::string& key, double fallback) {
    const auto it = params.find(key);
    if (it == params.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (...) {
        throw UsageError("estimator parameter " + key + " = '" + it->second +
                         "' is not a number");
    }
}

inline std::map<std::string, EstimatorFn> default_estimator_registry() {
    std::map<std::string, EstimatorFn> reg;
    reg["sample"] = [](const ReturnsPanel& p, const FactorPanel*, const auto& params) {
        CovarianceEstimate e;
        e.matrix = sample_covariance(p, Denominator::T_minus_1);
        e.estimator_id = "sample";
        e.params = params;
        e.params["denominator"] = "t-1";
        return e;
    };
    reg["sample-pinv"] = [](const ReturnsPanel& p, const FactorPanel*, const auto& params) {
        CovarianceEstimate e;
        e.matrix = sample_covariance(p, Denominator::T_minus_1);
        e.estimator_id = "sample-pinv";
        e.params = params;
        e.params["on_singular"] = "pinv";
        return e;
    };
    reg["mtp2"] = [](const ReturnsPanel& p, const FactorPanel*, const auto& params) {
        const Matrix s = sample_covariance(p, Denominator::T);
        const MtpSolution sol = mtp2_mle(s, param_or(params, "tol", 1e-7),
                                         static_cast<int>(param_or(params, "max_iter", 500)));
        CovarianceEstimate e;
        e.matrix = sol.sigma_hat;
        e.estimator_id = "mtp2";
        e.params = params;
        e.params["input_scale"] = "covariance";
        e.params["converged"] = sol.converged ? "true" : "false";
        if (!sol.converged) e.matrix = Matrix();  // treated as a skipped period
        return e;
    };
    reg["mtp2-kt"] = [](const ReturnsPanel& p, const FactorPanel*, const auto& params) {
        const MtpSolution sol = mtp2_mle_kendall(p, param_or(params, "tol", 1e-7),
                                                 static_cast<int>(param_or(params, "max_iter", 500)));
        CovarianceEstimate e;
        e.matrix = sol.sigma_hat;
        e.estimator_id = "mtp2-kt";
        e.params = params;
        e.params["converged"] = sol.converged ? "true" : "false";
        if (sol.ridge > 0.0) e.params["ridge"] = "1e-6";
        if (!sol.converged) e.matrix = Matrix();
        return e;
    };
    reg["ls"] = [](const ReturnsPanel& p, const FactorPanel*, const auto& params) {
        const Matrix s = sample_covariance(p, Denominator::T);
        double rho;
        CovarianceEstimate e;
        if (params.count("rho")) {
            rho = param_or(params, "rho", 0.0);
        } else {
            const LwRho lw = lw_optimal_rho(p);
            rho = lw.rho;
            if (lw.degenerate) e.params["rho_degenerate"] = "true";
        }
        e.matrix = linear_shrinkage(s, rho);
        e.estimator_id = "ls";
        for (const auto& [k, v] : params) e.params[k] = v;
        e.params["rho"] = std::to_string(rho);
        return e;
    };
    reg["poet"] = [](const ReturnsPanel& p, const FactorPanel*, const auto& params) {
        const int k = static_cast<int>(param_or(params, "k", 3));
        const auto it = params.find("c");
        const bool c_auto = (it == params.end() || it->second == "auto");
        const double c = c_auto ? 0.0 : param_or(params, "c", 0.5);
        std::string scale = "covariance";
        if (params.count("threshold_scale")) scale = params.at("threshold_scale");
        CovarianceEstimate e = poet(p, k, c, c_auto, scale);
        for (const auto& [key, v] : params) e.params.emplace(key, v);
        return e;
    };
    reg["efm"] = [](const ReturnsPanel& p, const FactorPanel* f, const auto& params) {
        if (!f) throw InsufficientData("efm estimator needs a factor series");
        CovarianceEstimate e = exact_factor_model(p, *f);
        for (const auto& [key, v] : params) e.params.emplace(key, v);
        return e;
    };
    reg["afm-ls"] = [](const ReturnsPanel& p, const FactorPanel* f, const auto& params) {
        if (!f) throw InsufficientData("afm-ls estimator needs a factor series");
        CovarianceEstimate e = afm_ls(p, *f);
        for (const auto& [key, v] : params) e.params.emplace(key, v);
        return e;
    };
    reg["glasso"] = [](const ReturnsPanel& p, const FactorPanel*, const auto& params) {
        CovarianceEstimate e;
        e.estimator_id = "glasso";
        if (params.count("lambda")) {
            const double lambda = param_or(params, "lambda", 0.0);
            const Matrix s = sample_covariance(p, Denominator::T);
            const GlassoResult g = glasso(s, lambda);
            e.matrix = g.sigma_hat;
            e.params = params;
        } else {
            const GlassoCvResult g = glasso_cv(p);
            e.matrix = g.fit.sigma_hat;
            e.params = params;
            e.params["lambda"] = std::to_string(g.lambda);
            e.params["cv"] = "3-fold";
        }
        return e;
    };
    return reg;
}

// Universe at one rebalance: completeness over the trailing window, complete
// next month, correlation de-duplication (descending, smaller cap dropped),
// then top-N by cap.
inline std::vector<int> build_universe(const ReturnsPanel& panel, const CapsSeries& caps,
                                       int day, const BacktestConfig& cfg) {
    const int Np = panel.N();
    const int window_len = std::min(cfg.universe_window, day);
    const int lo = day - window_len;
    if (window_len < 2) throw InsufficientHistory("build_universe: no trailing window");
    if (day + cfg.rebalance_days > panel.T())
        throw InsufficientData("build_universe: next month incomplete");
    const std::string& date = panel.dates[static_cast<std::size_t>(day)];

    std::vector<int> alive;
    std::vector<double> cap_of(static_cast<std::size_t>(Np), 0.0);
    for (int i = 0; i < Np; ++i) {
        int present = 0;
        for (int t = lo; t < day; ++t)
            if (!panel.is_missing(t, i)) ++present;
        if (present < cfg.universe_completeness * window_len) continue;
        bool future_complete = true;
        for (int t = day; t < day + cfg.rebalance_days; ++t)
            if (panel.is_missing(t, i)) future_complete = false;
        if (!future_complete) continue;
        const std::optional<double> cap = caps.cap(date, i);
        if (!cap) continue;
        cap_of[static_cast<std::size_t>(i)] = *cap;
        alive.push_back(i);
    }

    // Correlation de-duplication on the trailing window (masked cells read as
    // the stored 0.0 fill, estimation-only).
    std::vector<int> col_map(alive.begin(), alive.end());
    ReturnsPanel sub = select_assets(window(panel, lo, day), col_map);
    sub.missing_mask.clear();
    std::vector<std::tuple<double, int, int>> hot;  // (corr, a, b) indices into alive
    if (static_cast<int>(alive.size()) >= 2) {
        bool variance_ok = true;
        for (int i = 0; i < sub.N() && variance_ok; ++i) {
            double mean = 0.0, var = 0.0;
            for (int t = 0; t < sub.T(); ++t) mean += sub.returns(t, i);
            mean /= sub.T();
            for (int t = 0; t < sub.T(); ++t) {
                const double d = sub.returns(t, i) - mean;
                var += d * d;
            }
            if (var == 0.0) variance_ok = false;
        }
        if (variance_ok) {
            const Matrix corr = sample_correlation(sub);
            for (int a = 0; a < corr.rows(); ++a)
                for (int b = a + 1; b < corr.cols(); ++b)
                    if (corr(a, b) > cfg.correlation_cut) hot.emplace_back(corr(a, b), a, b);
            std::sort(hot.begin(), hot.end(), [](const auto& x, const auto& y) {
                if (std::get<0>(x) != std::get<0>(y)) return std::get<0>(x) > std::get<0>(y);
                if (std::get<1>(x) != std::get<1>(y)) return std::get<1>(x) < std::get<1>(y);
                return std::get<2>(x) < std::get<2>(y);
            });
        }
    }
    std::vector<bool> dead(alive.size(), false);
    for (const auto& [corr, a, b] : hot) {
        if (dead[static_cast<std::size_t>(a)] || dead[static_cast<std::size_t>(b)]) continue;
        const double cap_a = cap_of[static_cast<std::size_t>(alive[static_cast<std::size_t>(a)])];
        const double cap_b = cap_of[static_cast<std::size_t>(alive[static_cast<std::size_t>(b)])];
        // Equal caps: drop the lexicographically larger id.
        if (cap_a < cap_b || (cap_a == cap_b &&
                              panel.assets[static_cast<std::size_t>(alive[static_cast<std::size_t>(a)])] >
                                  panel.assets[static_cast<std::size_t>(alive[static_cast<std::size_t>(b)])]))
            dead[static_cast<std::size_t>(a)] = true;
        else
            dead[static_cast<std::size_t>(b)] = true;
    }
    std::vector<int> survivors;
    for (std::size_t k = 0; k < alive.size(); ++k)
        if (!dead[k]) survivors.push_back(alive[k]);

    const int want = (cfg.n > 0) ? cfg.n : static_cast<int>(survivors.size());
    if (static_cast<int>(survivors.size()) < want)
        throw UniverseTooSmall("build_universe: " + std::to_string(survivors.size()) +
                               " eligible assets at " + date + ", need " + std::to_string(want));
    std::sort(survivors.begin(), survivors.end(), [&](int x, int y) {
        const double cx = cap_of[static_cast<std::size_t>(x)];
        const double cy = cap_of[static_cast<std::size_t>(y)];
        if (cx != cy) return cx > cy;
        return panel.assets[static_cast<std::size_t>(x)] < panel.assets[static_cast<std::size_t>(y)];
    });
    survivors.resize(static_cast<std::size_t>(want));
    std::sort(survivors.begin(), survivors.end());
    return survivors;
}

inline double sample_std(const std::vector<double>& xs) {
    const std::size_t n = xs.size();
    if (n < 2) return 0.0;
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(n);
    double acc = 0.0;
    for (double x : xs) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / static_cast<double>(n - 1));
}

// Sample standard deviation of monthly returns, annualized with sqrt(12).
// Tables report this value multiplied by 100.
inline double annualized_std(const std::vector<double>& monthly_returns) {
    if (monthly_returns.size() < 2)
        throw InsufficientData("annualized_std: needs at least 2 monthly returns");
    return sample_std(monthly_returns) * std::sqrt(12.0);
}

// Mean excess return over its standard deviation, times sqrt(12). A constant
// series returns a signed infinity instead of failing.
inline double sharpe_ratio(const std::vector<double>& monthly_returns,
                           const std::vector<double>& monthly_riskfree,
                           bool annualize = true) {
    if (monthly_returns.size() < 2)
        throw InsufficientData("sharpe_ratio: needs at least 2 monthly returns");
    if (!monthly_riskfree.empty() && monthly_riskfree.size() != monthly_returns.size())
        throw DimensionMismatch("sharpe_ratio: risk-free series length mismatch");
    std::vector<double> excess(monthly_returns);
    for (std::size_t i = 0; i < excess.size(); ++i)
        if (!monthly_riskfree.empty()) excess[i] -= monthly_riskfree[i];
    double mean = 0.0;
    for (double x : excess) mean += x;
    mean /= static_cast<double>(excess.size());
    const double sd = sample_std(excess);
    const double factor = annualize ? std::sqrt(12.0) : 1.0;
    if (sd == 0.0) {
        if (mean == 0.0) return 0.0;
        return mean > 0.0 ? std::numeric_limits<double>::infinity()
                          : -std::numeric_limits<double>::infinity();
    }
    return factor * mean / sd;
}

inline double information_ratio(const std::vector<double>& monthly_returns,
                                bool annualize = true) {
    return sharpe_ratio(monthly_returns, {}, annualize);
}

namespace detail {

template <typename Fn>
inline void parallel_for(int count, int threads, Fn&& body) {
    if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
    threads = std::max(1, std::min(threads, count));
    if (threads == 1) {
        for (int i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<int> next(0);
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    for (int w = 0; w < threads; ++w)
        pool.emplace_back([&]() {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    for (std::thread& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

} // namespace detail

inline BacktestResult run_backtest(const BacktestConfig& cfg, const MarketDataBundle& data,
                                   const std::map<std::string, EstimatorFn>& registry =
                                       default_estimator_registry()) {
    const ReturnsPanel& panel = data.returns;
    validate_panel(panel, "run_backtest");
    if (cfg.t < 2) throw UsageError("run_backtest: estimation window must be >= 2 days");
    if (cfg.rebalance_days < 1) throw UsageError("run_backtest: rebalance_days must be >= 1");
    const auto reg_it = registry.find(cfg.estimator_id);
    if (reg_it == registry.end())
        throw UsageError("run_backtest: unknown estimator '" + cfg.estimator_id + "'");

    bool filtered = cfg.universe_mode == "filtered";
    if (cfg.universe_mode == "auto") filtered = data.caps.has_value();
    if (filtered && !data.caps)
        throw MissingCaps("run_backtest: universe filtering needs a caps series");
    if (!filtered) {
        if (cfg.n > 0 && cfg.n != panel.N())
            throw UsageError("run_backtest: n = " + std::to_string(cfg.n) +
                             " but the unfiltered panel has " + std::to_string(panel.N()) +
                             " assets");
        if (panel.has_missing())
            throw InvalidInput("run_backtest: unfiltered panels must be complete");
    }

    int first_day = cfg.t;
    if (cfg.strategy == Strategy::markowitz_momentum) first_day = std::max(first_day, 252);
    const int horizon = std::min(cfg.horizon_months,
                                 (panel.T() - first_day) / cfg.rebalance_days);
    if (horizon < 1)
        throw InsufficientData("run_backtest: panel has " + std::to_string(panel.T()) +
                               " days; first investable day is " + std::to_string(first_day));

    std::vector<PeriodRecord> periods(static_cast<std::size_t>(horizon));
    const FactorPanel* factors = data.factors ? &*data.factors : nullptr;

    detail::parallel_for(horizon, cfg.threads, [&](int h) {
        PeriodRecord rec;
        rec.index = h;
        const int day = first_day + h * cfg.rebalance_days;
        rec.start_date = panel.dates[static_cast<std::size_t>(day)];

        std::vector<int> universe;
        if (filtered) {
            universe = build_universe(panel, *data.caps, day, cfg);
        } else {
            universe.resize(static_cast<std::size_t>(panel.N()));
            for (int i = 0; i < panel.N(); ++i) universe[static_cast<std::size_t>(i)] = i;
        }
        for (int i : universe) rec.universe.push_back(panel.assets[static_cast<std::size_t>(i)]);

        ReturnsPanel est_window = select_assets(window(panel, day - cfg.t, day), universe);
        est_window.missing_mask.clear();  // masked cells stay 0: estimation-only fill
        FactorPanel factor_window;
        const FactorPanel* fw = nullptr;
        if (factors) {
            if (factors->dates != panel.dates)
                throw WindowMismatch("run_backtest: factor dates do not match returns");
            factor_window = window(*factors, day - cfg.t, day);
            fw = &factor_window;
        }

        CovarianceEstimate est = reg_it->second(est_window, fw, cfg.estimator_params);
        bool pinv_allowed = est.params.count("on_singular") &&
                            est.params.at("on_singular") == "pinv";

        PortfolioWeights w;
        bool have_weights = false;
        if (!est.matrix.empty()) {
            try {
                switch (cfg.strategy) {
                    case Strategy::gmv:
                        w = gmv_weights(est.matrix, est_window.assets);
                        break;
                    case Strategy::markowitz_momentum: {
                        const ReturnsPanel hist =
                            select_assets(window(panel, day - 252, day), universe);
                        const ExpectedReturns mu = momentum_signal(hist, hist.T());
                        for (const std::string& a : mu.arithmetic_fallback)
                            rec.note += "arithmetic_fallback:" + a + ";";
                        const EwTqTarget tq = ew_tq_target(mu, cfg.ew_fraction);
                        try {
                            w = markowitz_weights(est.matrix, mu.mu_hat, tq.target,
                                                  est_window.assets);
                        } catch (const DegenerateTarget&) {
                            w = gmv_weights(est.matrix, est_window.assets);
                            rec.note += "degenerate_target_gmv_fallback;";
                        }
                        break;
                    }
                    case Strategy::equal_weight:
                        w = equal_weight(est_window.assets);
                        break;
                }
                have_weights = true;
            } catch (const NotPositiveDefinite& e) {
                if (pinv_allowed && cfg.strategy == Strategy::gmv) {
                    w = gmv_weights_pinv(est.matrix, est_window.assets);
                    have_weights = true;
                    rec.note += "pinv;";
                } else {
                    rec.skipped = true;
                    rec.note += std::string("estimate_not_pd: ") + e.what();
                }
            }
        } else {
            rec.skipped = true;
            rec.note += "estimator_failed;";
        }

        if (have_weights) {
            rec.weights = w;
            double growth = 1.0;
            double rf_growth = 1.0;
            Vector hold = w.weights;
            for (int s = day; s < day + cfg.rebalance_days; ++s) {
                double r = 0.0;
                for (std::size_t k = 0; k < universe.size(); ++k)
                    r += hold[k] * panel.returns(s, universe[k]);
                growth *= 1.0 + r;
                if (cfg.drift_accounting && growth > 0.0) {
                    for (std::size_t k = 0; k < universe.size(); ++k)
                        hold[k] = hold[k] * (1.0 + panel.returns(s, universe[k])) / (1.0 + r);
                }
                if (data.riskfree)
                    rf_growth *= 1.0 + data.riskfree->rate(panel.dates[static_cast<std::size_t>(s)]);
            }
            rec.monthly_return = growth - 1.0;
            rec.monthly_riskfree = rf_growth - 1.0;
        }
        periods[static_cast<std::size_t>(h)] = std::move(rec);
    });

    BacktestResult result;
    result.config = cfg;
    result.periods = std::move(periods);
    for (const PeriodRecord& rec : result.periods) {
        if (rec.skipped) continue;
        result.monthly_returns.push_back(rec.monthly_return);
        result.monthly_riskfree.push_back(rec.monthly_riskfree);
    }
    if (result.monthly_returns.size() >= 2) {
        result.metrics.annualized_std = annualized_std(result.monthly_returns);
        result.metrics.sharpe = sharpe_ratio(result.monthly_returns, result.monthly_riskfree);
        result.metrics.sharpe_monthly =
            sharpe_ratio(result.monthly_returns, result.monthly_riskfree, false);
        result.metrics.information_ratio = information_ratio(result.monthly_returns);
        result.metrics.information_ratio_monthly =
            information_ratio(result.monthly_returns, false);
    }
    return result;
}

enum class RollingWindow { cumulative, sixty_month };

struct RollingPoint {
    int months = 0;  // horizon length (cumulative) or window end (sixty_month)
    double annualized_std = 0.0;
    double sharpe = 0.0;
    double information_ratio = 0.0;
};

// Metric series over growing or trailing-60-month windows, defined from
// month 60 onward.
inline std::vector<RollingPoint> rolling_metric_series(const BacktestResult& result,
                                                       RollingWindow mode) {
    const std::vector<double>& r = result.monthly_returns;
    const std::vector<double>& rf = result.monthly_riskfree;
    const int h = static_cast<int>(r.size());
    if (h < 60)
        throw InsufficientData("rolling_metric_series: " + std::to_string(h) +
                               " completed months, needs 60");
    std::vector<RollingPoint> out;
    for (int end = 60; end <= h; ++end) {
        const int start = (mode == RollingWindow::cumulative) ? 0 : end - 60;
        std::vector<double> rr(r.begin() + start, r.begin() + end);
        std::vector<double> ff(rf.begin() + start, rf.begin() + end);
        RollingPoint pt;
        pt.months = end;
        pt.annualized_std = annualized_std(rr);
        pt.sharpe = sharpe_ratio(rr, ff);
        pt.information_ratio = information_ratio(rr);
        out.push_back(pt);
    }
    return out;
}

} // namespace mtp2
