//! Out-of-sample evaluation: the rolling experiment schedule, strategies
//! (buy-and-hold, constant rebalancing and the learned hierarchy with its
//! ablations), and the return/risk metrics of a run.

use std::io::Write;
use std::sync::Arc;

use chrono::{Months, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, AuxAgent, AuxState, ExecAgent, ExecState};
use crate::market_data::{DataError, PriceSeries, ReturnWindow};
use crate::trading_env::{
    fmt_opt, AccountState, Decision, EnvConfig, EnvError, MarketEnv, PeriodOutcome,
    PortfolioWeights,
};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("experiment {experiment}: {reason}")]
    Schedule { experiment: usize, reason: String },
    #[error("need at least 2 daily returns, got {0}")]
    TooFewReturns(usize),
    #[error("{mode} mode needs the {agent} agent")]
    MissingAgent {
        mode: AblationMode,
        agent: &'static str,
    },
    #[error("strategy weights have {got} assets, market has {expected}")]
    Width { expected: usize, got: usize },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One train/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub index: usize,
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_days: usize,
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid calendar date")
}

/// Four three-year training windows rolled forward by six months, each
/// followed by a 120-day test window.
pub fn rolling_schedule() -> Vec<ExperimentSpec> {
    let first = date(2018, 1, 1);
    (0..4u32)
        .map(|i| {
            let train_start = first + Months::new(6 * i);
            let test_start = train_start + Months::new(36);
            ExperimentSpec {
                index: i as usize + 1,
                train_start,
                train_end: test_start.pred_opt().expect("date after epoch"),
                test_start,
                test_days: 120,
            }
        })
        .collect()
}

impl ExperimentSpec {
    pub fn validate(&self, cfg: &EnvConfig) -> Result<(), BacktestError> {
        let fail = |reason: String| BacktestError::Schedule {
            experiment: self.index,
            reason,
        };
        if self.train_end >= self.test_start || self.train_start >= self.train_end {
            return Err(fail("training window must precede the test window".into()));
        }
        if self.test_days < cfg.trading_days {
            return Err(fail(format!(
                "{} test days is shorter than one period of {}",
                self.test_days, cfg.trading_days
            )));
        }
        Ok(())
    }

    /// Rows of closes needed ahead of the first test day: `K*M` days of
    /// history plus the anchor close.
    pub fn preroll_days(cfg: &EnvConfig) -> usize {
        cfg.trading_days * cfg.window_periods + 1
    }

    /// Training rows: every day dated inside the training window.
    pub fn train_slice(&self, prices: &PriceSeries) -> Result<PriceSeries, BacktestError> {
        let start = prices.first_on_or_after(self.train_start);
        let end = prices.last_on_or_before(self.train_end);
        match (start, end) {
            (Some(s), Some(e)) if s <= e => Ok(prices.slice_days(s, e - s + 1)?),
            _ => Err(BacktestError::Schedule {
                experiment: self.index,
                reason: format!("no prices between {} and {}", self.train_start, self.train_end),
            }),
        }
    }

    /// Test rows plus the pre-roll that precedes them. Only whole periods of
    /// the test window are traded.
    pub fn test_slice(&self, prices: &PriceSeries, cfg: &EnvConfig) -> Result<PriceSeries, BacktestError> {
        self.validate(cfg)?;
        let fail = |reason: String| BacktestError::Schedule {
            experiment: self.index,
            reason,
        };
        let first = prices
            .first_on_or_after(self.test_start)
            .ok_or_else(|| fail(format!("no prices on or after {}", self.test_start)))?;
        let preroll = Self::preroll_days(cfg);
        if first < preroll {
            return Err(fail(format!(
                "test starts at row {first}, but {preroll} rows of pre-roll are required"
            )));
        }
        let traded = self.test_days / cfg.trading_days * cfg.trading_days;
        if first + traded > prices.n_days() {
            return Err(fail(format!(
                "{} test days requested, {} available",
                traded,
                prices.n_days() - first
            )));
        }
        Ok(prices.slice_days(first - preroll, preroll + traded)?)
    }
}

/// Everything a strategy may look at before a period is traded.
#[derive(Debug, Clone)]
pub struct DecisionContext<'a> {
    /// Local period index, starting at 1.
    pub period: usize,
    pub window: Arc<ReturnWindow>,
    pub account: &'a AccountState,
    pub assets: usize,
}

pub trait Strategy: Send {
    fn name(&self) -> String;
    fn reset(&mut self);
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Decision, BacktestError>;
}

/// Buys the initial weights once and holds the positions.
#[derive(Debug, Clone)]
pub struct BuyAndHold {
    weights: PortfolioWeights,
    bought: bool,
}

pub fn strategy_ubah(initial_weights: PortfolioWeights) -> BuyAndHold {
    BuyAndHold {
        weights: initial_weights,
        bought: false,
    }
}

impl Strategy for BuyAndHold {
    fn name(&self) -> String {
        "UBAH".into()
    }

    fn reset(&mut self) {
        self.bought = false;
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Decision, BacktestError> {
        check_width(ctx.assets, &self.weights)?;
        if self.bought {
            Ok(Decision::Hold)
        } else {
            self.bought = true;
            Ok(Decision::Rebalance(self.weights.clone()))
        }
    }
}

/// Rebalances to the same weights every period.
#[derive(Debug, Clone)]
pub struct ConstantRebalanced {
    weights: PortfolioWeights,
}

pub fn strategy_crp(fixed_weights: PortfolioWeights) -> ConstantRebalanced {
    ConstantRebalanced {
        weights: fixed_weights,
    }
}

impl Strategy for ConstantRebalanced {
    fn name(&self) -> String {
        "CRP".into()
    }

    fn reset(&mut self) {}

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Decision, BacktestError> {
        check_width(ctx.assets, &self.weights)?;
        Ok(Decision::Rebalance(self.weights.clone()))
    }
}

fn check_width(expected: usize, w: &PortfolioWeights) -> Result<(), BacktestError> {
    if w.len() == expected {
        Ok(())
    } else {
        Err(BacktestError::Width {
            expected,
            got: w.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Auxiliary baseline refined by the executive agent.
    Full,
    /// Auxiliary weights traded directly.
    Lsv1,
    /// Executive agent refining equal weights.
    Lsv2,
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationMode::Full => "full",
            AblationMode::Lsv1 => "LSV1",
            AblationMode::Lsv2 => "LSV2",
        })
    }
}

/// The learned policy (or one of its ablations) as a backtest strategy.
#[derive(Debug, Clone)]
pub struct Hierarchical {
    mode: AblationMode,
    aux: Option<AuxAgent>,
    exec: Option<ExecAgent>,
    prev_aux: Option<PortfolioWeights>,
    baselines: Vec<PortfolioWeights>,
}

pub fn ablation_mode(
    mode: AblationMode,
    aux: Option<AuxAgent>,
    exec: Option<ExecAgent>,
) -> Result<Hierarchical, BacktestError> {
    let needs_aux = matches!(mode, AblationMode::Full | AblationMode::Lsv1);
    let needs_exec = matches!(mode, AblationMode::Full | AblationMode::Lsv2);
    if needs_aux && aux.is_none() {
        return Err(BacktestError::MissingAgent { mode, agent: "auxiliary" });
    }
    if needs_exec && exec.is_none() {
        return Err(BacktestError::MissingAgent { mode, agent: "executive" });
    }
    Ok(Hierarchical {
        mode,
        aux: aux.filter(|_| needs_aux),
        exec: exec.filter(|_| needs_exec),
        prev_aux: None,
        baselines: Vec::new(),
    })
}

impl Hierarchical {
    pub fn mode(&self) -> AblationMode {
        self.mode
    }

    /// Baseline weights handed to the executive (or traded, for LSV1), one per period.
    pub fn baselines(&self) -> &[PortfolioWeights] {
        &self.baselines
    }
}

impl Strategy for Hierarchical {
    fn name(&self) -> String {
        match self.mode {
            AblationMode::Full => "HDRL".into(),
            m => m.to_string(),
        }
    }

    fn reset(&mut self) {
        self.prev_aux = None;
        self.baselines.clear();
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Decision, BacktestError> {
        let n = ctx.assets;
        let baseline = match &self.aux {
            Some(aux) => {
                let prev = self
                    .prev_aux
                    .take()
                    .unwrap_or_else(|| PortfolioWeights::zeros(n));
                let w = aux.act(&AuxState {
                    prev_weights: prev,
                    window: Arc::clone(&ctx.window),
                })?;
                self.prev_aux = Some(w.clone());
                w
            }
            None => PortfolioWeights::equal(n),
        };
        self.baselines.push(baseline.clone());
        let weights = match &self.exec {
            Some(exec) => exec.act(
                &ExecState {
                    baseline,
                    window: Arc::clone(&ctx.window),
                },
                &vec![0.0; n],
            )?,
            None => baseline,
        };
        Ok(Decision::Rebalance(weights))
    }
}

/// A strategy rolled over a whole environment episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub outcomes: Vec<PeriodOutcome>,
    /// True when the run stopped early on bankruptcy or a non-positive portfolio value.
    pub truncated: bool,
}

pub fn run_episode(strategy: &mut dyn Strategy, env: &mut MarketEnv) -> Result<Episode, BacktestError> {
    env.reset();
    strategy.reset();
    let assets = env.config().assets;
    let mut outcomes = Vec::with_capacity(env.horizon());
    let mut truncated = false;
    while !env.done() {
        let period = env.period();
        let decision = strategy.decide(&DecisionContext {
            period,
            window: env.window(period),
            account: env.state(),
            assets,
        })?;
        match env.step(&decision) {
            Ok(o) => {
                let failed = o.daily_portfolio_returns.iter().any(Option::is_none);
                outcomes.push(o);
                if failed {
                    truncated = true;
                    break;
                }
            }
            Err(EnvError::Bankrupt(_)) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Episode { outcomes, truncated })
}

/// Risk-free rate and minimum acceptable return, both per day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub risk_free: f64,
    pub min_acceptable: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            risk_free: 0.0,
            min_acceptable: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub ar: f64,
    pub dr: f64,
    pub std: f64,
    /// `None` when the standard deviation is zero.
    pub sr: Option<f64>,
    /// `None` with fewer than two days below the minimum acceptable return.
    pub lstd: Option<f64>,
    pub str: Option<f64>,
    pub daily_returns: Vec<f64>,
    pub truncated: bool,
}

/// Relative size under which a standard deviation counts as exactly zero.
const ZERO_SPREAD: f64 = 1e-12;

pub fn compute_metrics(daily_returns: &[f64], cfg: MetricsConfig) -> Result<MetricsReport, BacktestError> {
    let d = daily_returns.len();
    if d < 2 {
        return Err(BacktestError::TooFewReturns(d));
    }
    let ar: f64 = daily_returns.iter().sum();
    let dr = ar / d as f64;
    let spread = daily_returns.iter().map(|x| (x - dr).powi(2)).sum::<f64>() / d as f64;
    let scale = daily_returns.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let std = if spread.sqrt() <= ZERO_SPREAD * scale {
        0.0
    } else {
        spread.sqrt()
    };
    let sr = (std > 0.0).then(|| (dr - cfg.risk_free) / std);

    let mar = cfg.min_acceptable;
    let below = daily_returns.iter().filter(|&&x| x < mar).count();
    let lstd = (below >= 2).then(|| {
        let sum: f64 = daily_returns.iter().map(|x| (x.min(mar) - mar).powi(2)).sum();
        (sum / (below - 1) as f64).sqrt()
    });
    let str = lstd.map(|l| (dr - mar) / l);
    Ok(MetricsReport {
        ar,
        dr,
        std,
        sr,
        lstd,
        str,
        daily_returns: daily_returns.to_vec(),
        truncated: false,
    })
}

/// One strategy over one test window.
#[derive(Debug, Clone)]
pub struct BacktestRun {
    pub experiment: usize,
    pub strategy: String,
    pub dates: Vec<NaiveDate>,
    pub outcomes: Vec<PeriodOutcome>,
    pub report: MetricsReport,
}

pub fn run_backtest(
    strategy: &mut dyn Strategy,
    prices: &PriceSeries,
    spec: &ExperimentSpec,
    cfg: &EnvConfig,
    metrics: MetricsConfig,
) -> Result<BacktestRun, BacktestError> {
    let slice = spec.test_slice(prices, cfg)?;
    let mut env = MarketEnv::new(slice, cfg.clone())?;
    let episode = run_episode(strategy, &mut env)?;
    let k = cfg.trading_days;
    let mut daily = Vec::new();
    let mut dates = Vec::new();
    for o in &episode.outcomes {
        for (day, r) in o.daily_portfolio_returns.iter().enumerate() {
            if let Some(r) = r {
                daily.push(*r);
                dates.push(env.prices().dates()[(o.period - 1) * k + day + 1]);
            }
        }
    }
    let mut report = compute_metrics(&daily, metrics)?;
    report.truncated = episode.truncated;
    Ok(BacktestRun {
        experiment: spec.index,
        strategy: strategy.name(),
        dates,
        outcomes: episode.outcomes,
        report,
    })
}

pub const REPORT_HEADER: [&str; 10] = [
    "experiment", "strategy", "AR", "DR", "Std", "SR", "LStd", "STR", "days", "truncated",
];

/// One row per run.
pub fn write_report_csv<W: Write>(writer: W, runs: &[BacktestRun]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(REPORT_HEADER)?;
    for run in runs {
        let r = &run.report;
        out.write_record([
            run.experiment.to_string(),
            run.strategy.clone(),
            r.ar.to_string(),
            r.dr.to_string(),
            r.std.to_string(),
            fmt_opt(r.sr),
            fmt_opt(r.lstd),
            fmt_opt(r.str),
            r.daily_returns.len().to_string(),
            r.truncated.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Long-format daily returns with the running sum, for plotting.
pub fn write_daily_csv<W: Write>(writer: W, runs: &[BacktestRun]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["experiment", "strategy", "day", "date", "return", "accumulated"])?;
    for run in runs {
        let mut acc = 0.0;
        for (i, (r, d)) in run.report.daily_returns.iter().zip(&run.dates).enumerate() {
            acc += r;
            out.write_record([
                run.experiment.to_string(),
                run.strategy.clone(),
                (i + 1).to_string(),
                d.format("%Y-%m-%d").to_string(),
                r.to_string(),
                acc.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
