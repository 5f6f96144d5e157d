//! Commands behind the `hdrl` binary. Each writes a manifest before doing any
//! work and marks it completed or failed at the end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hdrl_core::agents::{model_fingerprint, AgentConfig, AuxAgent, ExecAgent};
use hdrl_core::backtest::{
    ablation_mode, rolling_schedule, run_backtest, strategy_crp, strategy_ubah, write_daily_csv,
    write_report_csv, AblationMode, BacktestRun, ExperimentSpec, MetricsConfig, Strategy,
};
use hdrl_core::market_data::{load_prices, load_prices_report, write_prices, PriceSeries, DJIA_TICKERS};
use hdrl_core::synthetic::{generate, AssetPath};
use hdrl_core::trading_env::{EnvConfig, MarketEnv, PortfolioWeights};
use hdrl_core::training::{train_hierarchy, TrainConfig};

/// Everything a run depends on. Loaded from TOML; missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub tickers: Vec<String>,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub experiments: Vec<ExperimentSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("out"),
            seed: 0,
            tickers: DJIA_TICKERS.iter().map(|t| t.to_string()).collect(),
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            experiments: rolling_schedule(),
        }
    }
}

/// Values given on the command line or through the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// File (if any) overlaid on defaults, then `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(d) = &overrides.data {
            cfg.data = Some(d.clone());
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        self.train.validate()?;
        if self.tickers.len() != self.env.assets {
            bail!(
                "{} tickers configured for {} assets",
                self.tickers.len(),
                self.env.assets
            );
        }
        if self.experiments.is_empty() {
            bail!("no experiments configured");
        }
        for e in &self.experiments {
            e.validate(&self.env)?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        model_fingerprint(&self.tickers, &self.env, &self.agent)
    }

    fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .context("no price data given; pass --data or set `data` in the config")
    }

    /// Experiments matching `selection`.
    pub fn select(&self, selection: ExperimentSelection) -> Result<Vec<ExperimentSpec>> {
        match selection {
            ExperimentSelection::All => Ok(self.experiments.clone()),
            ExperimentSelection::One(i) => self
                .experiments
                .iter()
                .find(|e| e.index == i)
                .cloned()
                .map(|e| vec![e])
                .with_context(|| format!("experiment {i} is not configured")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentSelection {
    All,
    One(usize),
}

impl std::str::FromStr for ExperimentSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::All);
        }
        s.parse()
            .map(Self::One)
            .map_err(|_| format!("expected an experiment number or `all`, got `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BacktestMode {
    Full,
    Lsv1,
    Lsv2,
    Baselines,
}

impl BacktestMode {
    pub fn name(self) -> &'static str {
        match self {
            BacktestMode::Full => "full",
            BacktestMode::Lsv1 => "lsv1",
            BacktestMode::Lsv2 => "lsv2",
            BacktestMode::Baselines => "baselines",
        }
    }
}

impl std::str::FromStr for BacktestMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "lsv1" => Ok(Self::Lsv1),
            "lsv2" => Ok(Self::Lsv2),
            "baselines" => Ok(Self::Baselines),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

/// Git-style content hash: sha256 over `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: String,
    pub seed: u64,
    pub fingerprint: String,
    pub data_hash: Option<String>,
    pub config: RunConfig,
    pub artifacts: Vec<PathBuf>,
    pub error: Option<String>,
}

struct ManifestGuard {
    path: PathBuf,
    manifest: Manifest,
}

impl ManifestGuard {
    fn begin(cfg: &RunConfig, command: &str) -> Result<Self> {
        let data_hash = match &cfg.data {
            Some(p) if p.exists() => Some(content_hash(
                &fs::read(p).with_context(|| format!("reading {}", p.display()))?,
            )),
            _ => None,
        };
        let dir = cfg.out.join("manifests");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let guard = Self {
            path: dir.join(format!("{command}.json")),
            manifest: Manifest {
                command: command.to_string(),
                status: "started".into(),
                seed: cfg.seed,
                fingerprint: cfg.fingerprint(),
                data_hash,
                config: cfg.clone(),
                artifacts: Vec::new(),
                error: None,
            },
        };
        guard.write()?;
        Ok(guard)
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&self.path, text).with_context(|| format!("writing {}", self.path.display()))
    }

    fn finish<T>(mut self, result: Result<(T, Vec<PathBuf>)>) -> Result<T> {
        match result {
            Ok((value, artifacts)) => {
                self.manifest.status = "completed".into();
                self.manifest.artifacts = artifacts;
                self.write()?;
                Ok(value)
            }
            Err(e) => {
                self.manifest.status = "failed".into();
                self.manifest.error = Some(format!("{e:#}"));
                // The original error matters more than a failed manifest write.
                let _ = self.write();
                Err(e)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub path: PathBuf,
    pub days: usize,
    pub first_date: NaiveDate,
    pub last_date: NaiveDate,
    pub assets: Vec<String>,
    /// Columns rejected because of missing values.
    pub dropped: Vec<String>,
    /// Configured tickers not usable from this file.
    pub missing: Vec<String>,
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    let guard = ManifestGuard::begin(cfg, "ingest")?;
    let result = (|| {
        let path = cfg.data_path()?;
        let loaded = load_prices_report(path, &[])?;
        let series = &loaded.series;
        let missing = cfg
            .tickers
            .iter()
            .filter(|t| !series.tickers().contains(t))
            .cloned()
            .collect();
        let summary = IngestSummary {
            path: path.to_path_buf(),
            days: series.n_days(),
            first_date: series.dates()[0],
            last_date: *series.dates().last().expect("non-empty series"),
            assets: series.tickers().to_vec(),
            dropped: loaded.dropped,
            missing,
        };
        let out = cfg.out.join("ingest.json");
        fs::write(&out, serde_json::to_string_pretty(&summary)?)?;
        Ok((summary, vec![out]))
    })();
    guard.finish(result)
}

fn load_configured_prices(cfg: &RunConfig) -> Result<PriceSeries> {
    let path = cfg.data_path()?;
    load_prices(path, &cfg.tickers).with_context(|| format!("loading {}", path.display()))
}

fn experiment_dir(cfg: &RunConfig, index: usize) -> PathBuf {
    cfg.out.join(format!("exp{index}"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub experiment: usize,
    pub horizon: usize,
    pub aux_steps: usize,
    pub exec_steps: usize,
    pub tracking_csv: PathBuf,
}

/// Trains one hierarchy per selected experiment and writes checkpoints and
/// tracking records under `<out>/exp<i>/`.
pub fn cmd_train(cfg: &RunConfig, selection: ExperimentSelection) -> Result<Vec<TrainSummary>> {
    let guard = ManifestGuard::begin(cfg, "train")?;
    let result = (|| {
        cfg.validate()?;
        let prices = load_configured_prices(cfg)?;
        let experiments = cfg.select(selection)?;
        let fingerprint = cfg.fingerprint();
        let summaries = experiments
            .par_iter()
            .map(|spec| train_one(cfg, &prices, spec, &fingerprint))
            .collect::<Result<Vec<_>>>()?;
        let artifacts = summaries
            .iter()
            .flat_map(|(s, files)| {
                log::info!(
                    "experiment {}: {} periods, {} auxiliary and {} executive steps",
                    s.experiment,
                    s.horizon,
                    s.aux_steps,
                    s.exec_steps
                );
                files.clone()
            })
            .collect();
        Ok((summaries.into_iter().map(|(s, _)| s).collect(), artifacts))
    })();
    guard.finish(result)
}

fn train_one(
    cfg: &RunConfig,
    prices: &PriceSeries,
    spec: &ExperimentSpec,
    fingerprint: &str,
) -> Result<(TrainSummary, Vec<PathBuf>)> {
    let slice = spec.train_slice(prices)?;
    let mut env = MarketEnv::new(slice, cfg.env.clone())
        .with_context(|| format!("experiment {}: building the training environment", spec.index))?;
    let (aux, exec) = train_hierarchy(&mut env, &cfg.agent, &cfg.train)
        .with_context(|| format!("experiment {}: training", spec.index))?;

    let dir = experiment_dir(cfg, spec.index);
    let aux_dir = dir.join("checkpoints").join("aux");
    let exec_dir = dir.join("checkpoints").join("exec");
    fs::create_dir_all(&aux_dir)?;
    fs::create_dir_all(&exec_dir)?;
    aux.agent.save(&aux_dir, fingerprint)?;
    exec.agent.save(&exec_dir, fingerprint)?;

    let aux_csv = dir.join("tracking_aux.csv");
    let exec_csv = dir.join("tracking_exec.csv");
    aux.track.write_csv(fs::File::create(&aux_csv)?)?;
    exec.track.write_csv(fs::File::create(&exec_csv)?)?;
    let summary = TrainSummary {
        experiment: spec.index,
        horizon: env.horizon(),
        aux_steps: aux.steps,
        exec_steps: exec.steps,
        tracking_csv: exec_csv.clone(),
    };
    Ok((summary, vec![aux_dir, exec_dir, aux_csv, exec_csv]))
}

fn load_agents(
    cfg: &RunConfig,
    index: usize,
    mode: AblationMode,
) -> Result<(Option<AuxAgent>, Option<ExecAgent>)> {
    let fingerprint = cfg.fingerprint();
    let ckpt = experiment_dir(cfg, index).join("checkpoints");
    let aux = if matches!(mode, AblationMode::Full | AblationMode::Lsv1) {
        Some(AuxAgent::load(&ckpt.join("aux"), &fingerprint).with_context(|| {
            format!("experiment {index}: {mode} mode needs an auxiliary checkpoint")
        })?)
    } else {
        None
    };
    let exec = if matches!(mode, AblationMode::Full | AblationMode::Lsv2) {
        Some(ExecAgent::load(&ckpt.join("exec"), &fingerprint).with_context(|| {
            format!("experiment {index}: {mode} mode needs an executive checkpoint")
        })?)
    } else {
        None
    };
    Ok((aux, exec))
}

fn strategies_for(
    cfg: &RunConfig,
    index: usize,
    mode: BacktestMode,
) -> Result<Vec<Box<dyn Strategy>>> {
    let n = cfg.env.assets;
    let ablation = match mode {
        BacktestMode::Baselines => {
            return Ok(vec![
                Box::new(strategy_ubah(PortfolioWeights::equal(n))),
                Box::new(strategy_crp(PortfolioWeights::equal(n))),
            ])
        }
        BacktestMode::Full => AblationMode::Full,
        BacktestMode::Lsv1 => AblationMode::Lsv1,
        BacktestMode::Lsv2 => AblationMode::Lsv2,
    };
    let (aux, exec) = load_agents(cfg, index, ablation)?;
    Ok(vec![Box::new(ablation_mode(ablation, aux, exec)?)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestOutput {
    pub report_csv: PathBuf,
    pub daily_csv: PathBuf,
    pub rows: usize,
}

/// Backtests the selected mode over the selected experiments and writes
/// `<out>/reports/<mode>_report.csv` and `<mode>_daily.csv`.
pub fn cmd_backtest(
    cfg: &RunConfig,
    selection: ExperimentSelection,
    mode: BacktestMode,
) -> Result<BacktestOutput> {
    let guard = ManifestGuard::begin(cfg, &format!("backtest_{}", mode.name()))?;
    let result = (|| {
        cfg.validate()?;
        let prices = load_configured_prices(cfg)?;
        let experiments = cfg.select(selection)?;
        // Checkpoints are checked up front so a missing one fails before any run.
        let jobs = experiments
            .iter()
            .map(|spec| Ok((spec, strategies_for(cfg, spec.index, mode)?)))
            .collect::<Result<Vec<_>>>()?;
        let per_experiment = jobs
            .into_par_iter()
            .map(|(spec, strategies)| {
                strategies
                    .into_iter()
                    .map(|mut s| {
                        run_backtest(s.as_mut(), &prices, spec, &cfg.env, cfg.metrics)
                            .with_context(|| format!("experiment {}: {}", spec.index, s.name()))
                    })
                    .collect::<Result<Vec<BacktestRun>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let runs: Vec<BacktestRun> = per_experiment.into_iter().flatten().collect();

        let dir = cfg.out.join("reports");
        fs::create_dir_all(&dir)?;
        let report_csv = dir.join(format!("{}_report.csv", mode.name()));
        let daily_csv = dir.join(format!("{}_daily.csv", mode.name()));
        write_report_csv(fs::File::create(&report_csv)?, &runs)?;
        write_daily_csv(fs::File::create(&daily_csv)?, &runs)?;
        let out = BacktestOutput {
            report_csv: report_csv.clone(),
            daily_csv: daily_csv.clone(),
            rows: runs.len(),
        };
        Ok((out, vec![report_csv, daily_csv]))
    })();
    guard.finish(result)
}

pub const METRICS: [&str; 6] = ["AR", "DR", "Std", "SR", "LStd", "STR"];

/// Whether a larger value of the metric is better.
fn higher_is_better(metric: &str) -> bool {
    !matches!(metric, "Std" | "LStd")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub experiment: usize,
    pub strategy: String,
    /// In [`METRICS`] order; `None` for undefined values.
    pub values: [Option<f64>; 6],
    pub best: [bool; 6],
}

/// Flags, per experiment and metric, every row holding the best defined value.
pub fn mark_best(rows: &mut [ComparisonRow]) {
    let experiments: Vec<usize> = {
        let mut e: Vec<usize> = rows.iter().map(|r| r.experiment).collect();
        e.sort_unstable();
        e.dedup();
        e
    };
    for exp in experiments {
        for (m, metric) in METRICS.iter().enumerate() {
            let values = rows
                .iter()
                .filter(|r| r.experiment == exp)
                .filter_map(|r| r.values[m]);
            let best = if higher_is_better(metric) {
                values.fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            } else {
                values.fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
            };
            for r in rows.iter_mut().filter(|r| r.experiment == exp) {
                r.best[m] = best.is_some() && r.values[m] == best;
            }
        }
    }
}

fn parse_metric(cell: &str) -> Result<Option<f64>> {
    if cell == "undefined" {
        Ok(None)
    } else {
        Ok(Some(cell.parse().with_context(|| format!("bad metric `{cell}`"))?))
    }
}

/// Merges every `reports/*_report.csv` under `run_dir` into
/// `comparison.csv`, with a `best` column naming the metrics a row wins.
pub fn cmd_report(run_dir: &Path) -> Result<Vec<ComparisonRow>> {
    let reports = run_dir.join("reports");
    let mut files: Vec<PathBuf> = fs::read_dir(&reports)
        .with_context(|| format!("reading {}", reports.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with("_report.csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no report CSVs in {}", reports.display());
    }
    let mut merged: BTreeMap<(usize, String), ComparisonRow> = BTreeMap::new();
    for file in &files {
        let mut reader = csv::Reader::from_path(file)?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .with_context(|| format!("{} lacks a `{name}` column", file.display()))
        };
        let exp_col = col("experiment")?;
        let strat_col = col("strategy")?;
        let metric_cols = METRICS.iter().map(|m| col(m)).collect::<Result<Vec<_>>>()?;
        for record in reader.records() {
            let record = record?;
            let experiment: usize = record[exp_col].parse()?;
            let strategy = record[strat_col].to_string();
            let mut values = [None; 6];
            for (v, &c) in values.iter_mut().zip(&metric_cols) {
                *v = parse_metric(&record[c])?;
            }
            merged.insert(
                (experiment, strategy.clone()),
                ComparisonRow {
                    experiment,
                    strategy,
                    values,
                    best: [false; 6],
                },
            );
        }
    }
    let mut rows: Vec<ComparisonRow> = merged.into_values().collect();
    mark_best(&mut rows);

    let mut out = csv::Writer::from_path(run_dir.join("comparison.csv"))?;
    let mut header = vec!["experiment", "strategy"];
    header.extend(METRICS);
    header.push("best");
    out.write_record(&header)?;
    for r in &rows {
        let mut record = vec![r.experiment.to_string(), r.strategy.clone()];
        record.extend(r.values.iter().map(|v| hdrl_core::trading_env::fmt_opt(*v)));
        let best: Vec<&str> = METRICS
            .iter()
            .zip(r.best)
            .filter(|(_, b)| *b)
            .map(|(m, _)| *m)
            .collect();
        record.push(best.join(";"));
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(rows)
}

/// Plain-text rendering with `*` after the best value of each metric.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{:<4} {:<10}", "exp", "strategy");
    for m in METRICS {
        s += &format!(" {m:>13}");
    }
    s.push('\n');
    for r in rows {
        s += &format!("{:<4} {:<10}", r.experiment, r.strategy);
        for (v, b) in r.values.iter().zip(r.best) {
            let cell = match v {
                Some(v) => format!("{v:.6}{}", if b { "*" } else { "" }),
                None => "undefined".into(),
            };
            s += &format!(" {cell:>13}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthPreset {
    /// One drifting asset and one constant-price asset.
    Trend,
    /// The 29 default tickers with seeded drifts and volatilities.
    Djia,
}

impl std::str::FromStr for SynthPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trend" => Ok(Self::Trend),
            "djia" => Ok(Self::Djia),
            _ => Err(format!("unknown preset `{s}`")),
        }
    }
}

pub fn synth_assets(preset: SynthPreset) -> Vec<AssetPath> {
    match preset {
        SynthPreset::Trend => vec![AssetPath::new("UP", 0.002, 0.01), AssetPath::new("FLAT", 0.0, 0.0)],
        SynthPreset::Djia => DJIA_TICKERS
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let drift = 0.0004 * ((i % 7) as f64 - 2.0);
                let vol = 0.008 + 0.001 * (i % 11) as f64;
                AssetPath::new(t, drift, vol)
            })
            .collect(),
    }
}

/// Writes a synthetic price file and returns the generated series.
pub fn cmd_synth(
    path: &Path,
    preset: SynthPreset,
    start: NaiveDate,
    days: usize,
    seed: u64,
) -> Result<PriceSeries> {
    let series = generate(&synth_assets(preset), start, days, seed)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_prices(&series, fs::File::create(path)?)?;
    Ok(series)
}
