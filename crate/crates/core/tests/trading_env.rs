use chrono::NaiveDate;
use hdrl_core::market_data::{MomentEstimates, PriceSeries};
use hdrl_core::synthetic::weekdays;
use hdrl_core::trading_env::{
    classify_order_legs, execute, step, Decision, EnvConfig, EnvError, MarketEnv, PortfolioWeights,
};
use hdrl_core::trading_env::AccountState;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn series(rows: &[Vec<f64>]) -> PriceSeries {
    let n = rows[0].len();
    let m = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
    PriceSeries::new(
        (0..n).map(|j| format!("S{j}")).collect(),
        weekdays(NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(), rows.len()),
        m,
    )
    .unwrap()
}

fn base_cfg(n: usize, k: usize) -> EnvConfig {
    EnvConfig {
        assets: n,
        trading_days: k,
        window_periods: 1,
        commission_rate: 0.0,
        borrow_rate_cash: 0.0,
        borrow_rate_stock: 0.0,
        initial_capital: 1000.0,
        lower_bound: 200.0,
        risk_penalty: 0.0,
        turnover_penalty: 0.0,
        ..EnvConfig::default()
    }
}

fn flat_moments(n: usize) -> MomentEstimates {
    MomentEstimates {
        mean: DVector::zeros(n),
        covariance: DMatrix::zeros(n, n),
    }
}

/// Plain double-entry book kept with ordinary loops over raw rows.
struct Book {
    cash: f64,
    shares: Vec<i64>,
    total: f64,
}

struct BookPeriod {
    total: f64,
    reward: f64,
    bankrupt: bool,
}

fn book_period(
    book: &mut Book,
    rows: &[Vec<f64>],
    t: usize,
    w: &[f64],
    cov: &[Vec<f64>],
    c: &EnvConfig,
) -> BookPeriod {
    let k = c.trading_days;
    let inv = c.investment_ratio * c.initial_capital;
    let before = &rows[(t - 1) * k];
    let per = k as f64 / c.days_per_year;
    let mut new_shares = Vec::new();
    for i in 0..w.len() {
        new_shares.push((inv * w[i] / before[i]).floor() as i64);
    }
    let mut cash = if book.cash < 0.0 {
        book.cash * (1.0 + c.borrow_rate_cash * per)
    } else {
        book.cash
    };
    let mut traded = 0.0;
    for i in 0..w.len() {
        let dq = new_shares[i] - book.shares[i];
        cash -= dq as f64 * before[i];
        cash -= c.commission_rate * (dq.abs() as f64) * before[i];
        traded += (dq.abs() as f64) * before[i];
        if new_shares[i] < 0 {
            cash -= c.borrow_rate_stock * per * (-new_shares[i]) as f64 * before[i];
        }
    }
    let mut var = 0.0;
    for a in 0..w.len() {
        for b in 0..w.len() {
            var += w[a] * cov[a][b] * w[b];
        }
    }
    let prev_total = book.total;
    let mut value = prev_total;
    let mut bankrupt = false;
    for day in 1..=k {
        let p = &rows[(t - 1) * k + day];
        value = cash;
        for i in 0..w.len() {
            value += new_shares[i] as f64 * p[i];
        }
        if value <= 0.0 {
            bankrupt = true;
            break;
        }
    }
    let vp = (value - prev_total + inv).max(c.lower_bound);
    let reward = (vp / inv).log2() / k as f64
        - c.risk_penalty * var
        - c.turnover_penalty * traded / inv;
    book.cash = cash;
    book.shares = new_shares;
    book.total = value;
    BookPeriod {
        total: value,
        reward,
        bankrupt,
    }
}

#[test]
fn single_long_gain_of_ten_percent() {
    let cfg = base_cfg(1, 1);
    let s = series(&[vec![100.0], vec![110.0]]);
    let state = AccountState::initial(&cfg, 1);
    let (next, out) = step(&state, &PortfolioWeights(vec![1.0]), &s, &flat_moments(1), &cfg).unwrap();
    assert_eq!(next.positions, vec![10]);
    assert!(next.cash.abs() < 1e-12);
    assert!((next.total_assets - 1100.0).abs() < 1e-9);
    assert!((out.total_log_return - 1.1f64.log2()).abs() < 1e-12);
    assert!((out.reward - 1.1f64.log2()).abs() < 1e-12);
}

#[test]
fn short_into_falling_market_with_fees() {
    let mut cfg = base_cfg(1, 1);
    cfg.commission_rate = 0.001;
    cfg.borrow_rate_stock = 0.0252;
    let s = series(&[vec![100.0], vec![90.0]]);
    let state = AccountState::initial(&cfg, 1);
    let (next, _) = step(&state, &PortfolioWeights(vec![-0.5]), &s, &flat_moments(1), &cfg).unwrap();
    assert_eq!(next.positions, vec![-5]);
    // proceeds 500, commission 0.5, one day of borrow at 0.01% on 500
    let cash = 1000.0 + 500.0 - 0.5 - 0.05;
    assert!((next.cash - cash).abs() < 1e-9);
    assert!((next.total_assets - (cash - 450.0)).abs() < 1e-9);
}

#[test]
fn negative_cash_accrues_interest_before_trading() {
    let mut cfg = base_cfg(1, 1);
    cfg.borrow_rate_cash = 0.252;
    let s = series(&[vec![100.0], vec![100.0], vec![100.0]]);
    let state = AccountState::initial(&cfg, 1);
    let (mid, _) = step(&state, &PortfolioWeights(vec![1.5]), &s, &flat_moments(1), &cfg).unwrap();
    assert!((mid.cash + 500.0).abs() < 1e-9);
    let (end, _) = step(&mid, &PortfolioWeights(vec![1.5]), &s, &flat_moments(1), &cfg).unwrap();
    assert!((end.cash - (-500.0 * 1.001)).abs() < 1e-9);
}

#[test]
fn crash_on_leverage_is_bankrupt_with_clamped_reward() {
    let mut cfg = base_cfg(1, 2);
    cfg.turnover_penalty = 0.01;
    let s = series(&[vec![100.0], vec![60.0], vec![40.0]]);
    let state = AccountState::initial(&cfg, 1);
    let err = step(&state, &PortfolioWeights(vec![3.0]), &s, &flat_moments(1), &cfg).unwrap_err();
    let EnvError::Bankrupt(b) = err else {
        panic!("expected bankruptcy");
    };
    // 30 shares, cash -2000; day 1 value -200
    assert_eq!(b.day, 1);
    assert!(b.daily_total_returns.is_empty());
    let floor = (200.0f64 / 1000.0).log2() / 2.0 - 0.01 * 3.0;
    assert!((b.reward - floor).abs() < 1e-12);
}

#[test]
fn hold_keeps_positions_and_trades_nothing() {
    let cfg = base_cfg(2, 1);
    let s = series(&[vec![10.0, 20.0], vec![11.0, 19.0], vec![12.0, 18.0]]);
    let state = AccountState::initial(&cfg, 1);
    let (mid, _) = step(&state, &PortfolioWeights(vec![0.5, 0.5]), &s, &flat_moments(2), &cfg).unwrap();
    let (end, out) = execute(&mid, &Decision::Hold, &s, &flat_moments(2), &cfg).unwrap();
    assert_eq!(end.positions, mid.positions);
    assert_eq!(out.transaction_ratio, 0.0);
    assert!(out.order_legs.is_empty());
    assert!((out.weights.0[0] - 50.0 * 11.0 / 1000.0).abs() < 1e-12);
}

#[test]
fn env_episodes_match_the_book() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, k, m, periods) = (3, 4, 2, 9);
    let mut rows = vec![vec![50.0, 80.0, 120.0]];
    for _ in 0..periods * k {
        let last = rows.last().unwrap().clone();
        rows.push(last.iter().map(|p| p * rng.random_range(0.96..1.04)).collect());
    }
    let mut cfg = base_cfg(n, k);
    cfg.window_periods = m;
    cfg.commission_rate = 0.002;
    cfg.borrow_rate_stock = 0.03;
    cfg.borrow_rate_cash = 0.04;
    cfg.risk_penalty = 2.0;
    cfg.turnover_penalty = 0.01;
    let mut env = MarketEnv::new(series(&rows), cfg.clone()).unwrap();
    assert_eq!(env.horizon(), periods - m);
    let mut book = Book {
        cash: cfg.initial_capital,
        shares: vec![0; n],
        total: cfg.initial_capital,
    };
    for local in 1..=env.horizon() {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.9)).collect();
        let cov = env.moments(local).covariance.clone();
        let cov_rows: Vec<Vec<f64>> = (0..n).map(|a| (0..n).map(|b| cov[(a, b)]).collect()).collect();
        let expected = book_period(&mut book, &rows, local + m, &w, &cov_rows, &cfg);
        let got = env.step(&Decision::Rebalance(PortfolioWeights(w))).unwrap();
        assert!(!expected.bankrupt);
        assert!((got.total_assets - expected.total).abs() <= 1e-9 * expected.total.abs());
        assert!((got.reward - expected.reward).abs() <= 1e-9 * expected.reward.abs().max(1e-9));
    }
    assert!(env.done());
}

#[test]
fn bankruptcy_ends_the_env_episode() {
    let cfg = base_cfg(1, 4);
    let rows: Vec<Vec<f64>> = (0..17)
        .map(|r| vec![if r <= 8 { 100.0 } else { 30.0 }])
        .collect();
    let mut env = MarketEnv::new(series(&rows), cfg).unwrap();
    assert_eq!(env.horizon(), 3);
    env.step(&Decision::Rebalance(PortfolioWeights(vec![0.0]))).unwrap();
    let err = env.step(&Decision::Rebalance(PortfolioWeights(vec![2.0]))).unwrap_err();
    assert!(matches!(err, EnvError::Bankrupt(_)));
    assert!(env.done());
    env.reset();
    assert_eq!(env.period(), 1);
    assert_eq!(env.state().total_assets, 1000.0);
}

fn random_case(seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..3).map(|_| rng.random_range(5.0..150.0)).collect())
        .collect();
    let w = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    (rows, w)
}

proptest! {
    #[test]
    fn frictionless_trades_conserve_value(seed in any::<u64>()) {
        let (rows, w) = random_case(seed);
        let cfg = base_cfg(3, 1);
        let s = series(&rows);
        let state = AccountState::initial(&cfg, 1);
        let next = match step(&state, &PortfolioWeights(w), &s, &flat_moments(3), &cfg) {
            Ok((next, _)) => next,
            Err(EnvError::Bankrupt(b)) => b.state,
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let marked: f64 = next.cash + (0..3).map(|i| next.positions[i] as f64 * rows[0][i]).sum::<f64>();
        prop_assert!((marked - cfg.initial_capital).abs() < 1e-8);
    }

    #[test]
    fn total_assets_is_cash_plus_marked_positions(seed in any::<u64>()) {
        let (rows, w) = random_case(seed);
        let mut cfg = base_cfg(3, 2);
        cfg.commission_rate = 0.003;
        cfg.borrow_rate_stock = 0.05;
        let s = series(&rows);
        let state = AccountState::initial(&cfg, 1);
        match step(&state, &PortfolioWeights(w), &s, &flat_moments(3), &cfg) {
            Ok((next, _)) => {
                let marked: f64 = next.cash + (0..3).map(|i| next.positions[i] as f64 * rows[2][i]).sum::<f64>();
                prop_assert!((marked - next.total_assets).abs() < 1e-8);
            }
            Err(EnvError::Bankrupt(_)) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn higher_commission_never_raises_value(seed in any::<u64>(), lo in 0.0f64..0.01, extra in 0.0f64..0.01) {
        let (rows, w) = random_case(seed);
        let s = series(&rows);
        let mut a = base_cfg(3, 1);
        a.commission_rate = lo;
        let mut b = a.clone();
        b.commission_rate = lo + extra;
        let state = AccountState::initial(&a, 1);
        let pw = PortfolioWeights(w);
        let va = step(&state, &pw, &s, &flat_moments(3), &a).map(|(x, _)| x.total_assets);
        let vb = step(&state, &pw, &s, &flat_moments(3), &b).map(|(x, _)| x.total_assets);
        if let (Ok(va), Ok(vb)) = (va, vb) {
            prop_assert!(vb <= va + 1e-9);
        }
    }

    #[test]
    fn reward_never_falls_below_the_floor(seed in any::<u64>(), lev in 1.0f64..6.0) {
        let (rows, mut w) = random_case(seed);
        for x in &mut w {
            *x *= lev;
        }
        let mut cfg = base_cfg(3, 2);
        cfg.turnover_penalty = 0.002;
        let s = series(&rows);
        let state = AccountState::initial(&cfg, 1);
        // flooring moves each position by at most one extra share
        let traded: f64 = (0..3).map(|i| w[i].abs() * cfg.investment() + rows[0][i]).sum();
        let turnover_cap = cfg.turnover_penalty * traded / cfg.investment() + 1e-12;
        let floor = (cfg.lower_bound / cfg.investment()).log2() / 2.0 - turnover_cap;
        let reward = match step(&state, &PortfolioWeights(w), &s, &flat_moments(3), &cfg) {
            Ok((_, out)) => out.reward,
            Err(EnvError::Bankrupt(b)) => b.reward,
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(reward >= floor);
    }

    #[test]
    fn order_legs_cover_every_nonzero_order(
        order in proptest::collection::vec(-50i64..50, 1..8),
        held_seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(held_seed);
        let held: Vec<i64> = order.iter().map(|_| rng.random_range(-50..50)).collect();
        let legs = classify_order_legs(&order, &held);
        let nonzero = order.iter().filter(|q| **q != 0).count();
        prop_assert_eq!(legs.len(), nonzero);
        for leg in legs {
            prop_assert_eq!(leg.leg.net_shares(), order[leg.asset]);
            let after = held[leg.asset] + order[leg.asset];
            let row = leg.leg.table_row();
            match row {
                1 => prop_assert!(held[leg.asset] >= 0 && order[leg.asset] > 0),
                2 => prop_assert!(held[leg.asset] < 0 && after <= 0),
                3 => prop_assert!(held[leg.asset] < 0 && after > 0),
                4 => prop_assert!(held[leg.asset] <= 0 && order[leg.asset] < 0),
                5 => prop_assert!(held[leg.asset] > 0 && after >= 0),
                _ => prop_assert!(held[leg.asset] > 0 && after < 0),
            }
        }
    }
}
