//! Long/short trading mechanics: target positions, market orders, cash with
//! commissions and borrow fees, revaluation, and the per-period reward.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{
    moment_estimates, return_window, DataError, MomentEstimates, PriceSeries, ReturnWindow,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error("asset {asset}: non-positive price {price}")]
    NonPositivePrice { asset: usize, price: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("asset {0}: non-finite target weight")]
    NonFiniteWeight(usize),
    #[error("log return undefined for non-positive value {0}")]
    NonPositiveValue(f64),
    #[error("total assets went bankrupt in period {} on day {}", .0.period, .0.day)]
    Bankrupt(Box<Bankruptcy>),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which covariance window prices the risk term of a period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentTiming {
    /// Moments of the traded period itself (its K days plus the prior M-1 periods).
    Realized,
    /// Moments known when the weights are chosen, i.e. ending at the previous period.
    DecisionTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Number of risky assets `n`.
    pub assets: usize,
    /// Trading days per period `K`.
    pub trading_days: usize,
    /// Periods `M` in the historical return window.
    pub window_periods: usize,
    pub commission_rate: f64,
    /// Annual rate charged on negative cash.
    pub borrow_rate_cash: f64,
    /// Annual rate charged on the value of shorted stock.
    pub borrow_rate_stock: f64,
    /// Day count used to prorate annual rates to one period.
    pub days_per_year: f64,
    pub investment_ratio: f64,
    pub initial_capital: f64,
    /// Floor `B` on the portfolio value inside the executive reward.
    pub lower_bound: f64,
    pub risk_penalty: f64,
    pub turnover_penalty: f64,
    pub moment_timing: MomentTiming,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let initial_capital = 1e8;
        let investment_ratio = 1.0;
        Self {
            assets: 29,
            trading_days: 5,
            window_periods: 40,
            commission_rate: 0.001,
            borrow_rate_cash: 0.03,
            borrow_rate_stock: 0.03,
            days_per_year: 252.0,
            investment_ratio,
            initial_capital,
            lower_bound: 0.2 * investment_ratio * initial_capital,
            risk_penalty: 10.0,
            turnover_penalty: 0.001,
            moment_timing: MomentTiming::Realized,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |msg: &str| Err(EnvError::Config(msg.to_string()));
        if self.assets == 0 {
            return fail("asset count must be positive");
        }
        if self.trading_days == 0 || self.window_periods == 0 {
            return fail("trading days and window periods must be positive");
        }
        if !(self.investment_ratio > 0.0 && self.investment_ratio <= 1.0) {
            return fail("investment ratio must lie in (0, 1]");
        }
        if !(self.commission_rate >= 0.0 && self.borrow_rate_cash >= 0.0 && self.borrow_rate_stock >= 0.0)
        {
            return fail("commission and borrow rates must be non-negative");
        }
        if !(self.risk_penalty >= 0.0 && self.turnover_penalty >= 0.0) {
            return fail("penalty coefficients must be non-negative");
        }
        if !(self.lower_bound > 0.0) {
            return fail("lower bound must be positive");
        }
        if !(self.initial_capital > 0.0) {
            return fail("initial capital must be positive");
        }
        if !(self.days_per_year > 0.0) {
            return fail("days per year must be positive");
        }
        Ok(())
    }

    /// Constant investment scale `T_t = eta * T_0`.
    pub fn investment(&self) -> f64 {
        self.investment_ratio * self.initial_capital
    }

    /// Annual rate prorated to one trading period.
    pub fn period_rate(&self, annual: f64) -> f64 {
        annual * self.trading_days as f64 / self.days_per_year
    }
}

/// Target weights per risky asset; negative entries are shorts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioWeights(pub Vec<f64>);

impl PortfolioWeights {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn equal(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Residual weight left in cash.
    pub fn cash_weight(&self) -> f64 {
        1.0 - self.0.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountState {
    /// Last completed period in series coordinates.
    pub period: usize,
    pub cash: f64,
    pub positions: Vec<i64>,
    pub total_assets: f64,
    pub prev_total: f64,
}

impl AccountState {
    /// All-cash account holding the initial capital before `first_period`.
    pub fn initial(cfg: &EnvConfig, first_period: usize) -> Self {
        Self {
            period: first_period - 1,
            cash: cfg.initial_capital,
            positions: vec![0; cfg.assets],
            total_assets: cfg.initial_capital,
            prev_total: cfg.initial_capital,
        }
    }
}

/// One operation from the order summary table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderLeg {
    /// Buy shares onto a flat or long position.
    Buy { shares: i64 },
    /// Buy shares and return them against an existing short.
    BuyToCover { shares: i64 },
    /// Buy shares, return the whole short, keep the rest long.
    CoverAndBuy { bought: i64, returned: i64 },
    /// Borrow shares and sell them, from a flat or short position.
    ShortSell { shares: i64 },
    /// Sell shares held in hand.
    Sell { shares: i64 },
    /// Sell everything held, then borrow the remainder and sell it.
    SellAndShort { sold: i64, shorted: i64 },
}

impl OrderLeg {
    /// Signed share change the leg applies to the position.
    pub fn net_shares(&self) -> i64 {
        match *self {
            OrderLeg::Buy { shares } | OrderLeg::BuyToCover { shares } => shares,
            OrderLeg::CoverAndBuy { bought, .. } => bought,
            OrderLeg::ShortSell { shares } | OrderLeg::Sell { shares } => -shares,
            OrderLeg::SellAndShort { sold, shorted } => -(sold + shorted),
        }
    }

    /// 1-based row of the operation table.
    pub fn table_row(&self) -> u8 {
        match self {
            OrderLeg::Buy { .. } => 1,
            OrderLeg::BuyToCover { .. } => 2,
            OrderLeg::CoverAndBuy { .. } => 3,
            OrderLeg::ShortSell { .. } => 4,
            OrderLeg::Sell { .. } => 5,
            OrderLeg::SellAndShort { .. } => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderRecord {
    pub asset: usize,
    pub leg: OrderLeg,
}

fn check_len(expected: usize, got: usize) -> Result<(), EnvError> {
    if expected == got {
        Ok(())
    } else {
        Err(EnvError::Length { expected, got })
    }
}

fn check_prices(prices: &DVector<f64>) -> Result<(), EnvError> {
    match prices.iter().position(|p| !(*p > 0.0)) {
        Some(asset) => Err(EnvError::NonPositivePrice {
            asset,
            price: prices[asset],
        }),
        None => Ok(()),
    }
}

/// `floor(T * w_i / p_i)`, rounding toward negative infinity for shorts too.
pub fn target_position(
    weights: &PortfolioWeights,
    investment: f64,
    prev_prices: &DVector<f64>,
) -> Result<Vec<i64>, EnvError> {
    check_len(prev_prices.len(), weights.len())?;
    check_prices(prev_prices)?;
    weights
        .0
        .iter()
        .zip(prev_prices.iter())
        .enumerate()
        .map(|(i, (w, p))| {
            let shares = (investment * w / p).floor();
            if shares.is_finite() {
                Ok(shares as i64)
            } else {
                Err(EnvError::NonFiniteWeight(i))
            }
        })
        .collect()
}

pub fn market_order(new_positions: &[i64], old_positions: &[i64]) -> Result<Vec<i64>, EnvError> {
    check_len(old_positions.len(), new_positions.len())?;
    Ok(new_positions
        .iter()
        .zip(old_positions)
        .map(|(new, old)| new - old)
        .collect())
}

/// Describes each non-zero order as an operation-table row. Cash is not touched here.
pub fn classify_order_legs(order: &[i64], old_positions: &[i64]) -> Vec<OrderRecord> {
    debug_assert_eq!(order.len(), old_positions.len());
    order
        .iter()
        .zip(old_positions)
        .enumerate()
        .filter(|(_, (dq, _))| **dq != 0)
        .map(|(asset, (&dq, &held))| {
            let leg = if dq > 0 {
                if held >= 0 {
                    OrderLeg::Buy { shares: dq }
                } else if -held >= dq {
                    OrderLeg::BuyToCover { shares: dq }
                } else {
                    OrderLeg::CoverAndBuy {
                        bought: dq,
                        returned: -held,
                    }
                }
            } else if held <= 0 {
                OrderLeg::ShortSell { shares: -dq }
            } else if held >= -dq {
                OrderLeg::Sell { shares: -dq }
            } else {
                OrderLeg::SellAndShort {
                    sold: held,
                    shorted: -dq - held,
                }
            };
            OrderRecord { asset, leg }
        })
        .collect()
}

/// Cash after the rebalancing trades: trade cost, commission and the short
/// borrow fee, with debt interest applied first when the account is negative.
pub fn update_cash(
    prev_cash: f64,
    order: &[i64],
    new_positions: &[i64],
    prev_prices: &DVector<f64>,
    cfg: &EnvConfig,
) -> f64 {
    let mut trade = 0.0;
    let mut traded_value = 0.0;
    let mut shorted_value = 0.0;
    for (i, p) in prev_prices.iter().enumerate() {
        trade += order[i] as f64 * p;
        traded_value += order[i].unsigned_abs() as f64 * p;
        if new_positions[i] < 0 {
            shorted_value += new_positions[i].unsigned_abs() as f64 * p;
        }
    }
    let base = if prev_cash >= 0.0 {
        prev_cash
    } else {
        prev_cash * (1.0 + cfg.period_rate(cfg.borrow_rate_cash))
    };
    base - trade
        - cfg.commission_rate * traded_value
        - cfg.period_rate(cfg.borrow_rate_stock) * shorted_value
}

fn holdings_value(positions: &[i64], prices: &DVector<f64>) -> f64 {
    positions
        .iter()
        .zip(prices.iter())
        .map(|(q, p)| *q as f64 * p)
        .sum()
}

/// Cash plus marked positions.
pub fn revalue(state: &AccountState, prices: &DVector<f64>) -> f64 {
    state.cash + holdings_value(&state.positions, prices)
}

pub fn period_log_return(value: f64, prev_value: f64) -> Result<f64, EnvError> {
    if !(value > 0.0) {
        return Err(EnvError::NonPositiveValue(value));
    }
    if !(prev_value > 0.0) {
        return Err(EnvError::NonPositiveValue(prev_value));
    }
    Ok((value / prev_value).log2())
}

/// `log2(v_p / T)` with `v_p = v_t - v_{t-1} + T`.
pub fn portfolio_log_return(value: f64, prev_value: f64, investment: f64) -> Result<f64, EnvError> {
    let portfolio_value = value - prev_value + investment;
    if !(portfolio_value > 0.0) {
        return Err(EnvError::NonPositiveValue(portfolio_value));
    }
    Ok((portfolio_value / investment).log2())
}

pub fn transaction_ratio(order: &[i64], prev_prices: &DVector<f64>, investment: f64) -> f64 {
    order
        .iter()
        .zip(prev_prices.iter())
        .map(|(dq, p)| dq.unsigned_abs() as f64 * p)
        .sum::<f64>()
        / investment
}

pub fn portfolio_variance(
    weights: &PortfolioWeights,
    covariance: &DMatrix<f64>,
) -> Result<f64, EnvError> {
    check_len(covariance.nrows(), weights.len())?;
    check_len(covariance.ncols(), weights.len())?;
    let w = DVector::from_column_slice(weights.as_slice());
    Ok(w.dot(&(covariance * &w)))
}

/// Risk- and turnover-adjusted daily return of a period.
pub fn objective(log_return: f64, variance: f64, turnover: f64, cfg: &EnvConfig) -> f64 {
    log_return / cfg.trading_days as f64 - cfg.risk_penalty * variance - cfg.turnover_penalty * turnover
}

/// Executive reward: the objective with the portfolio value floored at `B`.
pub fn executive_reward(
    portfolio_value: f64,
    investment: f64,
    weights: &PortfolioWeights,
    covariance: &DMatrix<f64>,
    turnover: f64,
    cfg: &EnvConfig,
) -> Result<f64, EnvError> {
    let variance = portfolio_variance(weights, covariance)?;
    let floored = portfolio_value.max(cfg.lower_bound);
    Ok(objective((floored / investment).log2(), variance, turnover, cfg))
}

/// What a strategy asks the environment to do at a period boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Rebalance(PortfolioWeights),
    /// Keep current positions; no order is sent.
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodOutcome {
    /// Series period that was traded.
    pub period: usize,
    pub weights: PortfolioWeights,
    pub positions: Vec<i64>,
    pub cash: f64,
    pub total_assets: f64,
    pub prev_total: f64,
    pub portfolio_value: f64,
    /// `log2(v_t / v_{t-1})`.
    pub total_log_return: f64,
    /// `xi_t`; `None` when the portfolio value is not positive.
    pub portfolio_log_return: Option<f64>,
    pub daily_total_returns: Vec<f64>,
    pub daily_portfolio_returns: Vec<Option<f64>>,
    pub variance: f64,
    pub transaction_ratio: f64,
    pub objective: Option<f64>,
    pub reward: f64,
    pub order_legs: Vec<OrderRecord>,
}

/// Account state at the day total assets stopped being positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Bankruptcy {
    pub period: usize,
    pub day: usize,
    pub state: AccountState,
    /// Daily total-asset returns realized before the failing day.
    pub daily_total_returns: Vec<f64>,
    /// Executive reward with the floored portfolio value at the failing day.
    pub reward: f64,
    pub weights: PortfolioWeights,
    pub variance: f64,
    pub transaction_ratio: f64,
}

fn implied_weights(positions: &[i64], prices: &DVector<f64>, investment: f64) -> PortfolioWeights {
    PortfolioWeights(
        positions
            .iter()
            .zip(prices.iter())
            .map(|(q, p)| *q as f64 * p / investment)
            .collect(),
    )
}

/// Trades period `state.period + 1` with target weights `weights`.
pub fn step(
    state: &AccountState,
    weights: &PortfolioWeights,
    prices: &PriceSeries,
    moments: &MomentEstimates,
    cfg: &EnvConfig,
) -> Result<(AccountState, PeriodOutcome), EnvError> {
    execute(state, &Decision::Rebalance(weights.clone()), prices, moments, cfg)
}

/// Like [`step`], but also accepts [`Decision::Hold`]. Held positions are
/// priced into the risk term through their implied weights.
pub fn execute(
    state: &AccountState,
    decision: &Decision,
    prices: &PriceSeries,
    moments: &MomentEstimates,
    cfg: &EnvConfig,
) -> Result<(AccountState, PeriodOutcome), EnvError> {
    let t = state.period + 1;
    let k = cfg.trading_days;
    check_len(cfg.assets, prices.n_assets())?;
    check_len(cfg.assets, state.positions.len())?;
    if t * k >= prices.n_days() {
        return Err(DataError::InsufficientHistory(format!(
            "period {t} ends at row {}, series has {} rows",
            t * k,
            prices.n_days()
        ))
        .into());
    }
    let investment = cfg.investment();
    let prev_prices = prices.day((t - 1) * k);
    check_prices(&prev_prices)?;

    let (positions, weights) = match decision {
        Decision::Rebalance(w) => (target_position(w, investment, &prev_prices)?, w.clone()),
        Decision::Hold => (
            state.positions.clone(),
            implied_weights(&state.positions, &prev_prices, investment),
        ),
    };
    let order = market_order(&positions, &state.positions)?;
    let order_legs = classify_order_legs(&order, &state.positions);
    let cash = update_cash(state.cash, &order, &positions, &prev_prices, cfg);
    let turnover = transaction_ratio(&order, &prev_prices, investment);
    let variance = portfolio_variance(&weights, &moments.covariance)?;

    let prev_total = state.total_assets;
    let mut daily_total_returns = Vec::with_capacity(k);
    let mut daily_portfolio_returns = Vec::with_capacity(k);
    let mut value_before = prev_total;
    let mut portfolio_before = investment;
    for day in 1..=k {
        let value = cash + holdings_value(&positions, &prices.day((t - 1) * k + day));
        let portfolio_value = value - prev_total + investment;
        if !(value > 0.0) {
            let reward =
                executive_reward(portfolio_value, investment, &weights, &moments.covariance, turnover, cfg)?;
            return Err(EnvError::Bankrupt(Box::new(Bankruptcy {
                period: t,
                day,
                state: AccountState {
                    period: t,
                    cash,
                    positions,
                    total_assets: value,
                    prev_total,
                },
                daily_total_returns,
                reward,
                weights,
                variance,
                transaction_ratio: turnover,
            })));
        }
        daily_total_returns.push((value / value_before).log2());
        daily_portfolio_returns.push(
            (portfolio_value > 0.0 && portfolio_before > 0.0)
                .then(|| (portfolio_value / portfolio_before).log2()),
        );
        value_before = value;
        portfolio_before = portfolio_value;
    }

    let total_assets = value_before;
    let total_log_return = period_log_return(total_assets, prev_total)?;
    let portfolio_value = total_assets - prev_total + investment;
    let portfolio_log_return = portfolio_log_return(total_assets, prev_total, investment).ok();
    let objective = portfolio_log_return.map(|xi| objective(xi, variance, turnover, cfg));
    let reward =
        executive_reward(portfolio_value, investment, &weights, &moments.covariance, turnover, cfg)?;

    let next = AccountState {
        period: t,
        cash,
        positions: positions.clone(),
        total_assets,
        prev_total,
    };
    let outcome = PeriodOutcome {
        period: t,
        weights,
        positions,
        cash,
        total_assets,
        prev_total,
        portfolio_value,
        total_log_return,
        portfolio_log_return,
        daily_total_returns,
        daily_portfolio_returns,
        variance,
        transaction_ratio: turnover,
        objective,
        reward,
        order_legs,
    };
    Ok((next, outcome))
}

/// Formats an optional value, writing `undefined` for a missing one.
pub fn fmt_opt(value: Option<f64>) -> String {
    value.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

/// One CSV row per period: `t,xi,V,eps,theta,r_ex,c,v`.
pub fn write_outcomes_csv<W: Write>(writer: W, outcomes: &[PeriodOutcome]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["t", "xi", "V", "eps", "theta", "r_ex", "c", "v"])?;
    for o in outcomes {
        out.write_record([
            o.period.to_string(),
            fmt_opt(o.portfolio_log_return),
            o.variance.to_string(),
            o.transaction_ratio.to_string(),
            fmt_opt(o.objective),
            o.reward.to_string(),
            o.cash.to_string(),
            o.total_assets.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// A replayable episode over a price slice.
///
/// Local period `t = 1` is the first period with a full return window, which
/// is series period `M + 1`. The horizon runs to the last complete period.
#[derive(Debug, Clone)]
pub struct MarketEnv {
    prices: Arc<PriceSeries>,
    cfg: EnvConfig,
    horizon: usize,
    windows: Vec<Arc<ReturnWindow>>,
    moments: Vec<Arc<MomentEstimates>>,
    state: AccountState,
    t: usize,
}

impl MarketEnv {
    pub fn new(prices: PriceSeries, cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        check_len(cfg.assets, prices.n_assets())?;
        let k = cfg.trading_days;
        let m = cfg.window_periods;
        let periods = prices.complete_periods(k);
        if periods <= m {
            return Err(DataError::InsufficientHistory(format!(
                "{} rows give {periods} periods; a window of {m} needs at least {}",
                prices.n_days(),
                k * (m + 1) + 1
            ))
            .into());
        }
        let horizon = periods - m;
        // The successor state of the final period needs one extra window.
        let windows = (1..=horizon + 1)
            .map(|t| return_window(&prices, t + m, k, m).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        let moments = (1..=horizon)
            .map(|t| {
                let series_period = match cfg.moment_timing {
                    MomentTiming::Realized => t + m,
                    MomentTiming::DecisionTime => t + m - 1,
                };
                moment_estimates(&prices, series_period, k, m).map(Arc::new)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let state = AccountState::initial(&cfg, m + 1);
        Ok(Self {
            prices: Arc::new(prices),
            cfg,
            horizon,
            windows,
            moments,
            state,
            t: 1,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn prices(&self) -> &PriceSeries {
        &self.prices
    }

    /// Number of tradeable periods `T_f`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Local index of the next period to trade.
    pub fn period(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t > self.horizon
    }

    pub fn state(&self) -> &AccountState {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state = AccountState::initial(&self.cfg, self.cfg.window_periods + 1);
        self.t = 1;
    }

    /// Return window observed before local period `t`, for `t` in `1..=horizon + 1`.
    pub fn window(&self, t: usize) -> Arc<ReturnWindow> {
        Arc::clone(&self.windows[t - 1])
    }

    /// Moments that price local period `t`, for `t` in `1..=horizon`.
    pub fn moments(&self, t: usize) -> Arc<MomentEstimates> {
        Arc::clone(&self.moments[t - 1])
    }

    /// Close prices at which local period `t` is traded.
    pub fn decision_prices(&self, t: usize) -> DVector<f64> {
        self.prices
            .day((t + self.cfg.window_periods - 1) * self.cfg.trading_days)
    }

    /// Trades the current period and advances. Bankruptcy ends the episode;
    /// the failing state is kept until [`MarketEnv::reset`].
    pub fn step(&mut self, decision: &Decision) -> Result<PeriodOutcome, EnvError> {
        if self.done() {
            return Err(EnvError::Config("episode finished; reset first".into()));
        }
        let moments = Arc::clone(&self.moments[self.t - 1]);
        match execute(&self.state, decision, &self.prices, &moments, &self.cfg) {
            Ok((next, outcome)) => {
                self.state = next;
                self.t += 1;
                Ok(outcome)
            }
            Err(EnvError::Bankrupt(b)) => {
                self.state = b.state.clone();
                self.t = self.horizon + 1;
                Err(EnvError::Bankrupt(b))
            }
            Err(e) => Err(e),
        }
    }
}
