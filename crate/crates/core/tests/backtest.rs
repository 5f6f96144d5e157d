use chrono::NaiveDate;
use hdrl_core::agents::{AgentConfig, AuxAgent, ExecAgent};
use hdrl_core::backtest::{
    ablation_mode, compute_metrics, rolling_schedule, run_backtest, run_episode, strategy_crp,
    strategy_ubah, write_report_csv, AblationMode, BacktestError, ExperimentSpec, MetricsConfig,
};
use hdrl_core::market_data::PriceSeries;
use hdrl_core::synthetic::{generate, weekdays, AssetPath};
use hdrl_core::trading_env::{EnvConfig, MarketEnv, PortfolioWeights};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn frictionless(n: usize, m: usize) -> EnvConfig {
    EnvConfig {
        assets: n,
        window_periods: m,
        commission_rate: 0.0,
        borrow_rate_cash: 0.0,
        borrow_rate_stock: 0.0,
        initial_capital: 1e6,
        lower_bound: 2e5,
        ..EnvConfig::default()
    }
}

fn flat_env(n: usize, periods: usize) -> MarketEnv {
    let cfg = frictionless(n, 2);
    let days = (periods + 2) * 5 + 1;
    let prices = PriceSeries::new(
        (0..n).map(|i| format!("F{i}")).collect(),
        weekdays(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), days),
        DMatrix::from_element(days, n, 40.0),
    )
    .unwrap();
    MarketEnv::new(prices, cfg).unwrap()
}

fn long_history() -> PriceSeries {
    generate(
        &[
            AssetPath::new("AAA", 0.0008, 0.012),
            AssetPath::new("BBB", 0.0002, 0.009),
            AssetPath::new("CCC", -0.0003, 0.015),
        ],
        NaiveDate::from_ymd_opt(2017, 6, 1).unwrap(),
        1500,
        17,
    )
    .unwrap()
}

fn agents(cfg: &EnvConfig, seed: u64) -> (AuxAgent, ExecAgent) {
    let acfg = AgentConfig {
        hidden_layers: vec![8],
        ..AgentConfig::default()
    };
    let len = cfg.assets * cfg.trading_days * cfg.window_periods;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        AuxAgent::new(&acfg, cfg.assets, len, &mut rng).unwrap(),
        ExecAgent::new(&acfg, cfg.assets, len, &mut rng).unwrap(),
    )
}

#[test]
fn flat_market_has_zero_return_and_no_sharpe() {
    let mut env = flat_env(2, 10);
    for mut s in [
        Box::new(strategy_ubah(PortfolioWeights::equal(2))) as Box<dyn hdrl_core::backtest::Strategy>,
        Box::new(strategy_crp(PortfolioWeights(vec![0.7, -0.2]))),
    ] {
        let ep = run_episode(s.as_mut(), &mut env).unwrap();
        let daily: Vec<f64> = ep
            .outcomes
            .iter()
            .flat_map(|o| o.daily_portfolio_returns.iter().map(|r| r.unwrap()))
            .collect();
        let m = compute_metrics(&daily, MetricsConfig::default()).unwrap();
        assert_eq!(m.ar, 0.0);
        assert_eq!(m.std, 0.0);
        assert_eq!(m.sr, None);
        assert_eq!(m.lstd, None);
    }
}

#[test]
fn buy_and_hold_trades_only_once() {
    let prices = long_history().slice_days(0, 5 * 20 + 1).unwrap();
    let mut env = MarketEnv::new(prices, frictionless(3, 4)).unwrap();
    let ep = run_episode(&mut strategy_ubah(PortfolioWeights(vec![0.3, 0.3, 0.3])), &mut env).unwrap();
    assert!(ep.outcomes[0].transaction_ratio > 0.0);
    for o in &ep.outcomes[1..] {
        assert_eq!(o.transaction_ratio, 0.0);
        assert_eq!(o.positions, ep.outcomes[0].positions);
    }
}

#[test]
fn constant_rebalancing_sells_the_winner() {
    // A doubles in the first traded period while B stays put
    let mut rows = vec![[10.0, 10.0]; 5 * 2 + 1];
    rows.extend(std::iter::repeat_n([20.0, 10.0], 10));
    let days = rows.len();
    let prices = PriceSeries::new(
        vec!["A".into(), "B".into()],
        weekdays(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), days),
        DMatrix::from_fn(days, 2, |r, c| rows[r][c]),
    )
    .unwrap();
    let mut env = MarketEnv::new(prices, frictionless(2, 2)).unwrap();
    let ep = run_episode(&mut strategy_crp(PortfolioWeights(vec![0.5, 0.5])), &mut env).unwrap();
    assert_eq!(ep.outcomes.len(), 2);
    let sold = ep.outcomes[0].positions[0] - ep.outcomes[1].positions[0];
    let bought = ep.outcomes[1].positions[1] - ep.outcomes[0].positions[1];
    assert!(sold > 0);
    assert_eq!(bought, 0);
}

#[test]
fn all_cash_earns_nothing() {
    let prices = long_history().slice_days(0, 5 * 12 + 1).unwrap();
    let mut env = MarketEnv::new(prices, frictionless(3, 2)).unwrap();
    let ep = run_episode(&mut strategy_crp(PortfolioWeights::zeros(3)), &mut env).unwrap();
    assert!(ep
        .outcomes
        .iter()
        .all(|o| o.daily_portfolio_returns.iter().all(|r| *r == Some(0.0))));
}

#[test]
fn accumulated_return_is_the_sum_of_period_returns() {
    let cfg = frictionless(3, 4);
    let spec = &rolling_schedule()[0];
    let run = run_backtest(
        &mut strategy_crp(PortfolioWeights(vec![0.4, 0.4, 0.1])),
        &long_history(),
        spec,
        &cfg,
        MetricsConfig::default(),
    )
    .unwrap();
    assert_eq!(run.outcomes.len(), 24);
    assert_eq!(run.report.daily_returns.len(), 120);
    let xi: f64 = run.outcomes.iter().map(|o| o.portfolio_log_return.unwrap()).sum();
    assert!((run.report.ar - xi).abs() < 1e-12);
    assert!(run.dates[0] >= spec.test_start);
}

#[test]
fn zero_head_full_mode_equals_lsv1() {
    let cfg = EnvConfig {
        window_periods: 4,
        assets: 3,
        ..EnvConfig::default()
    };
    let (aux, mut exec) = agents(&cfg, 1);
    exec.zero_residual_head();
    let prices = long_history();
    let spec = &rolling_schedule()[1];
    let mut full = ablation_mode(AblationMode::Full, Some(aux.clone()), Some(exec)).unwrap();
    let mut lsv1 = ablation_mode(AblationMode::Lsv1, Some(aux), None).unwrap();
    let a = run_backtest(&mut full, &prices, spec, &cfg, MetricsConfig::default()).unwrap();
    let b = run_backtest(&mut lsv1, &prices, spec, &cfg, MetricsConfig::default()).unwrap();
    assert_eq!(a.outcomes, b.outcomes);
    assert_eq!(a.report, b.report);
    assert_eq!((a.strategy.as_str(), b.strategy.as_str()), ("HDRL", "LSV1"));
}

#[test]
fn lsv2_refines_equal_weights() {
    let cfg = EnvConfig {
        window_periods: 4,
        assets: 3,
        ..EnvConfig::default()
    };
    let (_, exec) = agents(&cfg, 2);
    let mut lsv2 = ablation_mode(AblationMode::Lsv2, None, Some(exec)).unwrap();
    run_backtest(&mut lsv2, &long_history(), &rolling_schedule()[2], &cfg, MetricsConfig::default()).unwrap();
    assert_eq!(lsv2.baselines().len(), 24);
    assert!(lsv2.baselines().iter().all(|b| b.0 == vec![1.0 / 3.0; 3]));
}

#[test]
fn modes_refuse_missing_agents() {
    let cfg = EnvConfig {
        window_periods: 4,
        assets: 3,
        ..EnvConfig::default()
    };
    let (aux, exec) = agents(&cfg, 3);
    assert!(matches!(
        ablation_mode(AblationMode::Full, Some(aux.clone()), None),
        Err(BacktestError::MissingAgent { .. })
    ));
    assert!(ablation_mode(AblationMode::Lsv1, None, Some(exec.clone())).is_err());
    assert!(ablation_mode(AblationMode::Lsv2, Some(aux), None).is_err());
    assert!(ablation_mode(AblationMode::Lsv2, None, Some(exec)).is_ok());
}

#[test]
fn backtests_are_reproducible() {
    let cfg = EnvConfig {
        window_periods: 4,
        assets: 3,
        ..EnvConfig::default()
    };
    let prices = long_history();
    let report = || {
        let (aux, exec) = agents(&cfg, 4);
        let mut s = ablation_mode(AblationMode::Full, Some(aux), Some(exec)).unwrap();
        let runs: Vec<_> = rolling_schedule()
            .iter()
            .map(|spec| run_backtest(&mut s, &prices, spec, &cfg, MetricsConfig::default()).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &runs).unwrap();
        buf
    };
    assert_eq!(report(), report());
}

#[test]
fn schedule_slices_carry_the_preroll() {
    let cfg = EnvConfig {
        window_periods: 40,
        assets: 3,
        ..EnvConfig::default()
    };
    let prices = long_history();
    for spec in rolling_schedule() {
        let slice = spec.test_slice(&prices, &cfg).unwrap();
        assert_eq!(slice.n_days(), ExperimentSpec::preroll_days(&cfg) + 120);
        assert_eq!(slice.dates()[ExperimentSpec::preroll_days(&cfg)], prices.first_on_or_after(spec.test_start).map(|i| prices.dates()[i]).unwrap());
        assert!(slice.dates()[ExperimentSpec::preroll_days(&cfg) - 1] < spec.test_start);
        let train = spec.train_slice(&prices).unwrap();
        assert!(*train.dates().last().unwrap() <= spec.train_end);
        assert!(train.dates()[0] >= spec.train_start);
    }
}

proptest! {
    #[test]
    fn shifting_returns_shifts_mean_but_not_spread(
        xs in proptest::collection::vec(-0.05f64..0.05, 2..60),
        c in -0.01f64..0.01,
    ) {
        let a = compute_metrics(&xs, MetricsConfig::default()).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let b = compute_metrics(&shifted, MetricsConfig::default()).unwrap();
        prop_assert!((b.dr - a.dr - c).abs() < 1e-12);
        prop_assert!((b.ar - a.ar - c * xs.len() as f64).abs() < 1e-10);
        prop_assert!((b.std - a.std).abs() < 1e-10);
    }

    #[test]
    fn metrics_ignore_the_order_of_days(
        xs in proptest::collection::vec(-0.05f64..0.05, 2..60),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut ys = xs.clone();
        ys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = compute_metrics(&xs, MetricsConfig::default()).unwrap();
        let b = compute_metrics(&ys, MetricsConfig::default()).unwrap();
        prop_assert!((a.ar - b.ar).abs() < 1e-12);
        prop_assert!((a.std - b.std).abs() < 1e-12);
        match (a.lstd, b.lstd) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn accumulated_return_equals_the_sum(xs in proptest::collection::vec(-0.1f64..0.1, 2..80)) {
        let m = compute_metrics(&xs, MetricsConfig::default()).unwrap();
        prop_assert_eq!(m.ar, xs.iter().sum::<f64>());
        prop_assert!((m.dr * xs.len() as f64 - m.ar).abs() < 1e-12);
    }
}
