#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "mtp2/backtest.hpp"
#include "mtp2/rng.hpp"
#include "mtp2/serialize.hpp"
#include "test_support.hpp"

using mtp2::BacktestConfig;
using mtp2::BacktestResult;
using mtp2::CapsSeries;
using mtp2::MarketDataBundle;
using mtp2::Matrix;
using mtp2::ReturnsPanel;
using mtp2::Vector;
using test_support::make_panel;
using test_support::near;

namespace {

// caps constant over time, aligned with the panel's columns
CapsSeries flat_caps(const ReturnsPanel& p, const Vector& caps) {
    CapsSeries c;
    c.dates = p.dates;
    c.assets = p.assets;
    c.values = Matrix(p.T(), p.N());
    for (int t = 0; t < p.T(); ++t)
        for (int i = 0; i < p.N(); ++i)
            c.values(t, i) = caps[static_cast<std::size_t>(i)];
    for (std::size_t t = 0; t < c.dates.size(); ++t)
        c.date_index[c.dates[t]] = static_cast<int>(t);
    return c;
}

ReturnsPanel random_panel(int t, int n, std::uint64_t seed, double scale = 0.01) {
    mtp2::Rng rng(seed);
    Matrix rows(t, n);
    for (int s = 0; s < t; ++s)
        for (int i = 0; i < n; ++i) rows(s, i) = scale * rng.normal();
    return make_panel(rows);
}

} // namespace

TEST_CASE("annualized deviation from monthly returns", "[backtest]") {
    REQUIRE(mtp2::annualized_std({0.01, 0.01, 0.01}) == 0.0);
    REQUIRE(near(mtp2::annualized_std({0.01, -0.01}),
                 0.01 * std::sqrt(2.0) * std::sqrt(12.0), 1e-15));
    REQUIRE_THROWS_AS(mtp2::annualized_std({0.01}), mtp2::InsufficientData);

    mtp2::Rng rng(193);
    std::vector<double> draws;
    for (int i = 0; i < 10000; ++i) draws.push_back(0.04 * rng.normal());
    REQUIRE(near(mtp2::annualized_std(draws), 0.04 * std::sqrt(12.0),
                 0.02 * 0.04 * std::sqrt(12.0)));
}

TEST_CASE("reward-to-risk ratios", "[backtest]") {
    REQUIRE(mtp2::sharpe_ratio({0.01, -0.01}, {0.0, 0.0}) == 0.0);
    REQUIRE(mtp2::sharpe_ratio({0.01, 0.01}, {}) ==
            std::numeric_limits<double>::infinity());
    REQUIRE(mtp2::sharpe_ratio({-0.01, -0.01}, {}) ==
            -std::numeric_limits<double>::infinity());
    REQUIRE(mtp2::sharpe_ratio({0.0, 0.0}, {}) == 0.0);

    const std::vector<double> r{0.02, 0.0, 0.01};
    REQUIRE(near(mtp2::sharpe_ratio(r, {}, false), 1.0, 1e-12));
    REQUIRE(near(mtp2::sharpe_ratio(r, {}), std::sqrt(12.0), 1e-12));
    REQUIRE(near(mtp2::information_ratio(r), std::sqrt(12.0), 1e-12));

    // a positive risk-free rate can only lower the ratio below the raw one
    const std::vector<double> rf{0.001, 0.001, 0.001};
    REQUIRE(mtp2::information_ratio(r) > mtp2::sharpe_ratio(r, rf));
    REQUIRE_THROWS_AS(mtp2::sharpe_ratio(r, {0.0}), mtp2::DimensionMismatch);
    REQUIRE_THROWS_AS(mtp2::sharpe_ratio({0.01}, {}), mtp2::InsufficientData);
}

TEST_CASE("rolling metrics start at month sixty", "[backtest]") {
    BacktestResult r;
    mtp2::Rng rng(197);
    for (int i = 0; i < 60; ++i) {
        r.monthly_returns.push_back(0.01 * rng.normal());
        r.monthly_riskfree.push_back(0.0002);
    }
    const auto cum = mtp2::rolling_metric_series(r, mtp2::RollingWindow::cumulative);
    REQUIRE(cum.size() == 1);
    REQUIRE(cum[0].months == 60);
    REQUIRE(near(cum[0].annualized_std, mtp2::annualized_std(r.monthly_returns), 1e-15));
    REQUIRE(near(cum[0].sharpe,
                 mtp2::sharpe_ratio(r.monthly_returns, r.monthly_riskfree), 1e-15));
    REQUIRE(near(cum[0].information_ratio,
                 mtp2::information_ratio(r.monthly_returns), 1e-15));

    const auto trail = mtp2::rolling_metric_series(r, mtp2::RollingWindow::sixty_month);
    REQUIRE(trail.size() == 1);
    REQUIRE(trail[0].annualized_std == cum[0].annualized_std);

    r.monthly_returns.pop_back();
    r.monthly_riskfree.pop_back();
    REQUIRE_THROWS_AS(mtp2::rolling_metric_series(r, mtp2::RollingWindow::cumulative),
                      mtp2::InsufficientData);
}

TEST_CASE("rolling metrics window bookkeeping", "[backtest]") {
    BacktestResult r;
    mtp2::Rng rng(199);
    for (int i = 0; i < 72; ++i) {
        r.monthly_returns.push_back(0.01 * rng.normal());
        r.monthly_riskfree.push_back(0.0);
    }
    const auto cum = mtp2::rolling_metric_series(r, mtp2::RollingWindow::cumulative);
    const auto trail = mtp2::rolling_metric_series(r, mtp2::RollingWindow::sixty_month);
    REQUIRE(cum.size() == 13);
    REQUIRE(trail.size() == 13);
    REQUIRE(cum.front().annualized_std == trail.front().annualized_std);
    // the final cumulative point covers all 72 months
    std::vector<double> all(r.monthly_returns);
    REQUIRE(near(cum.back().annualized_std, mtp2::annualized_std(all), 1e-15));
    // the final trailing point covers only the last 60
    std::vector<double> last60(all.end() - 60, all.end());
    REQUIRE(near(trail.back().annualized_std, mtp2::annualized_std(last60), 1e-15));
}

TEST_CASE("universe selection ranks by capitalization", "[backtest]") {
    const ReturnsPanel p = random_panel(63, 4, 211);
    const CapsSeries caps = flat_caps(p, Vector{100, 400, 300, 200});
    BacktestConfig cfg;
    cfg.n = 2;
    cfg.universe_window = 42;
    const std::vector<int> u = mtp2::build_universe(p, caps, 42, cfg);
    REQUIRE(u == std::vector<int>{1, 2});

    BacktestConfig all = cfg;
    all.n = 0;
    REQUIRE(mtp2::build_universe(p, caps, 42, all) == std::vector<int>{0, 1, 2, 3});

    BacktestConfig greedy = cfg;
    greedy.n = 5;
    REQUIRE_THROWS_AS(mtp2::build_universe(p, caps, 42, greedy),
                      mtp2::UniverseTooSmall);

    REQUIRE_THROWS_AS(mtp2::build_universe(p, caps, 1, cfg), mtp2::InsufficientHistory);
    REQUIRE_THROWS_AS(mtp2::build_universe(p, caps, 50, cfg), mtp2::InsufficientData);
}

TEST_CASE("universe selection drops the smaller of a duplicated pair", "[backtest]") {
    ReturnsPanel p = random_panel(63, 3, 223);
    // make asset 0 a near-copy of asset 1
    for (int t = 0; t < 63; ++t) p.returns(t, 0) = p.returns(t, 1) + 1e-6 * (t % 3);
    const CapsSeries caps = flat_caps(p, Vector{100, 400, 50});
    BacktestConfig cfg;
    cfg.n = 0;
    cfg.universe_window = 42;
    cfg.correlation_cut = 0.95;
    const std::vector<int> u = mtp2::build_universe(p, caps, 42, cfg);
    REQUIRE(u == std::vector<int>{1, 2});
}

TEST_CASE("universe selection screens on completeness", "[backtest]") {
    ReturnsPanel p = random_panel(63, 3, 227);
    // asset 0: hole inside the upcoming month; asset 1: sparse history
    p.set_missing(50, 0);
    for (int t = 0; t < 20; ++t) p.set_missing(t, 1);
    const CapsSeries caps = flat_caps(p, Vector{100, 200, 300});
    BacktestConfig cfg;
    cfg.n = 0;
    cfg.universe_window = 42;
    const std::vector<int> u = mtp2::build_universe(p, caps, 42, cfg);
    REQUIRE(u == std::vector<int>{2});

    // a missing cap cell also excludes the asset
    CapsSeries holey = caps;
    holey.missing.assign(holey.dates.size() * 3, 0);
    holey.missing[42 * 3 + 2] = 1;
    BacktestConfig one = cfg;
    one.n = 1;
    REQUIRE_THROWS_AS(mtp2::build_universe(p, holey, 42, one), mtp2::UniverseTooSmall);
}

TEST_CASE("flat-return backtests measure zero risk", "[backtest]") {
    MarketDataBundle data;
    data.returns = make_panel(Matrix(84, 3, 0.0));
    BacktestConfig cfg;
    cfg.t = 42;
    cfg.estimator_id = "ls";
    cfg.estimator_params["rho"] = "0.5";
    cfg.strategy = mtp2::Strategy::equal_weight;
    const BacktestResult r = mtp2::run_backtest(cfg, data);
    REQUIRE(r.monthly_returns == std::vector<double>{0.0, 0.0});
    REQUIRE(r.metrics.annualized_std == 0.0);
    REQUIRE(r.metrics.sharpe == 0.0);
}

TEST_CASE("single-asset backtests compound the raw returns", "[backtest]") {
    MarketDataBundle data;
    data.returns = random_panel(63, 1, 229);
    BacktestConfig cfg;
    cfg.t = 42;
    cfg.estimator_id = "sample";
    const BacktestResult r = mtp2::run_backtest(cfg, data);
    REQUIRE(r.monthly_returns.size() == 1);
    double growth = 1.0;
    for (int t = 42; t < 63; ++t) growth *= 1.0 + data.returns.returns(t, 0);
    REQUIRE(near(r.monthly_returns[0], growth - 1.0, 1e-15));
    REQUIRE(r.periods[0].weights.weights == Vector{1.0});
}

TEST_CASE("oracle covariance injection drives the expected weights", "[backtest]") {
    Matrix sigma(2, 2);
    sigma(0, 0) = 1e-4;
    sigma(1, 1) = 4e-4;
    sigma(0, 1) = sigma(1, 0) = 1e-4;
    mtp2::Rng rng(233);
    MarketDataBundle data;
    const int t_days = 42 + 40 * 21;
    data.returns = test_support::gaussian_panel(sigma, t_days, rng);

    auto registry = mtp2::default_estimator_registry();
    registry["oracle"] = [&sigma](const ReturnsPanel&, const mtp2::FactorPanel*,
                                  const std::map<std::string, std::string>& params) {
        mtp2::CovarianceEstimate e;
        e.matrix = sigma;
        e.estimator_id = "oracle";
        e.params = params;
        return e;
    };
    BacktestConfig cfg;
    cfg.t = 42;
    cfg.estimator_id = "oracle";
    const BacktestResult r = mtp2::run_backtest(cfg, data, registry);
    REQUIRE(static_cast<int>(r.monthly_returns.size()) == 40);

    const auto want = mtp2::gmv_weights(sigma, data.returns.assets);
    for (const auto& period : r.periods) {
        REQUIRE(!period.skipped);
        REQUIRE(period.weights.weights == want.weights);
    }

    // realized monthly risk should sit near the oracle's prediction
    double port_var = 0.0;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            port_var += want.weights[static_cast<std::size_t>(i)] * sigma(i, j) *
                        want.weights[static_cast<std::size_t>(j)];
    const double predicted = std::sqrt(21.0 * port_var);
    const double realized = mtp2::sample_std(r.monthly_returns);
    REQUIRE(near(realized, predicted, 0.35 * predicted));
}

TEST_CASE("thread count never changes the result", "[backtest]") {
    MarketDataBundle data;
    data.returns = random_panel(42 + 8 * 21, 4, 239);
    BacktestConfig cfg;
    cfg.t = 42;
    cfg.estimator_id = "ls";
    cfg.threads = 1;
    const BacktestResult a = mtp2::run_backtest(cfg, data);
    cfg.threads = 2;
    const BacktestResult b = mtp2::run_backtest(cfg, data);
    cfg.threads = 8;
    const BacktestResult c = mtp2::run_backtest(cfg, data);
    REQUIRE(a.monthly_returns == b.monthly_returns);
    REQUIRE(a.monthly_returns == c.monthly_returns);
    REQUIRE(a.metrics.annualized_std == b.metrics.annualized_std);
    REQUIRE(a.metrics.sharpe == c.metrics.sharpe);
    for (std::size_t h = 0; h < a.periods.size(); ++h)
        REQUIRE(a.periods[h].weights.weights == b.periods[h].weights.weights);
}

TEST_CASE("singular windows are skipped unless the pseudo-inverse is allowed",
          "[backtest]") {
    MarketDataBundle data;
    data.returns = random_panel(5 + 2 * 21, 10, 241);
    BacktestConfig cfg;
    cfg.t = 5;  // ten assets on five days: the sample matrix cannot be PD
    cfg.estimator_id = "sample";
    const BacktestResult skipped = mtp2::run_backtest(cfg, data);
    REQUIRE(skipped.monthly_returns.empty());
    for (const auto& p : skipped.periods) {
        REQUIRE(p.skipped);
        REQUIRE(p.note.find("estimate_not_pd") != std::string::npos);
    }

    cfg.estimator_id = "sample-pinv";
    const BacktestResult rescued = mtp2::run_backtest(cfg, data);
    REQUIRE(rescued.monthly_returns.size() == 2);
    for (const auto& p : rescued.periods) {
        REQUIRE(!p.skipped);
        REQUIRE(p.note.find("pinv") != std::string::npos);
    }
}

TEST_CASE("momentum strategy composes signal, target, and weights", "[backtest]") {
    MarketDataBundle data;
    data.returns = random_panel(252 + 2 * 21, 3, 251);
    BacktestConfig cfg;
    cfg.t = 42;
    cfg.estimator_id = "ls";
    cfg.strategy = mtp2::Strategy::markowitz_momentum;
    const BacktestResult r = mtp2::run_backtest(cfg, data);
    REQUIRE(r.periods.size() == 2);  // first investable day moves to 252
    for (const auto& p : r.periods) {
        REQUIRE(!p.skipped);
        double sum = 0.0;
        for (double w : p.weights.weights) sum += w;
        REQUIRE(near(sum, 1.0, 1e-10));
    }
}

TEST_CASE("drift accounting changes multi-asset results", "[backtest]") {
    MarketDataBundle data;
    mtp2::Rng rng(257);
    Matrix sigma(3, 3, 0.0);
    sigma(0, 0) = 1e-4;
    sigma(1, 1) = 9e-4;
    sigma(2, 2) = 4e-4;
    data.returns = test_support::gaussian_panel(sigma, 84, rng);
    BacktestConfig cfg;
    cfg.t = 42;
    cfg.estimator_id = "sample";
    const BacktestResult fixed_mix = mtp2::run_backtest(cfg, data);
    cfg.drift_accounting = true;
    const BacktestResult drifting = mtp2::run_backtest(cfg, data);
    REQUIRE(fixed_mix.monthly_returns.size() == drifting.monthly_returns.size());
    bool differs = false;
    for (std::size_t i = 0; i < fixed_mix.monthly_returns.size(); ++i)
        if (fixed_mix.monthly_returns[i] != drifting.monthly_returns[i]) differs = true;
    REQUIRE(differs);
}

TEST_CASE("backtest configuration errors are reported up front", "[backtest]") {
    MarketDataBundle data;
    data.returns = random_panel(84, 3, 263);

    BacktestConfig unknown;
    unknown.estimator_id = "nonesuch";
    REQUIRE_THROWS_AS(mtp2::run_backtest(unknown, data), mtp2::UsageError);

    BacktestConfig filtered;
    filtered.universe_mode = "filtered";
    filtered.t = 42;
    REQUIRE_THROWS_AS(mtp2::run_backtest(filtered, data), mtp2::MissingCaps);

    BacktestConfig sized;
    sized.t = 42;
    sized.n = 2;  // three-asset unfiltered panel cannot be sliced implicitly
    REQUIRE_THROWS_AS(mtp2::run_backtest(sized, data), mtp2::UsageError);

    BacktestConfig short_panel;
    short_panel.t = 80;
    REQUIRE_THROWS_AS(mtp2::run_backtest(short_panel, data), mtp2::InsufficientData);

    MarketDataBundle holey = data;
    holey.returns.set_missing(2, 1);
    BacktestConfig plain;
    plain.t = 42;
    REQUIRE_THROWS_AS(mtp2::run_backtest(plain, holey), mtp2::InvalidInput);
}

TEST_CASE("filtered backtests follow the universe month by month", "[backtest]") {
    MarketDataBundle data;
    data.returns = random_panel(42 + 3 * 21, 5, 269);
    data.caps = flat_caps(data.returns, Vector{500, 400, 300, 200, 100});
    BacktestConfig cfg;
    cfg.t = 42;
    cfg.n = 3;
    cfg.universe_window = 42;
    cfg.estimator_id = "ls";
    const BacktestResult r = mtp2::run_backtest(cfg, data);
    REQUIRE(r.periods.size() == 3);
    for (const auto& p : r.periods) {
        REQUIRE(p.universe ==
                std::vector<std::string>{data.returns.assets[0], data.returns.assets[1],
                                         data.returns.assets[2]});
        REQUIRE(p.weights.weights.size() == 3);
    }
}

#ifdef TEST_DATA_DIR
TEST_CASE("golden backtest metrics stay pinned", "[backtest][golden]") {
    const std::string root = TEST_DATA_DIR;
    const MarketDataBundle data = mtp2::load_market_bundle(root + "/market");
    const mtp2::Json expected_json = mtp2::load_json(root + "/expected_backtest.json");
    const BacktestResult expected = mtp2::backtest_from_json(expected_json);

    const BacktestResult got = mtp2::run_backtest(expected.config, data);
    REQUIRE(got.monthly_returns.size() == expected.monthly_returns.size());
    for (std::size_t i = 0; i < got.monthly_returns.size(); ++i)
        REQUIRE(near(got.monthly_returns[i], expected.monthly_returns[i], 1e-12));
    REQUIRE(near(got.metrics.annualized_std, expected.metrics.annualized_std, 1e-10));
    REQUIRE(near(got.metrics.sharpe, expected.metrics.sharpe, 1e-10));
    REQUIRE(near(got.metrics.information_ratio, expected.metrics.information_ratio,
                 1e-10));
    REQUIRE(got.periods.size() == expected.periods.size());
    for (std::size_t h = 0; h < got.periods.size(); ++h) {
        REQUIRE(got.periods[h].start_date == expected.periods[h].start_date);
        REQUIRE(got.periods[h].universe == expected.periods[h].universe);
    }
}
#endif
