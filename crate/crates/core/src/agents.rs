//! Auxiliary and executive agents: states, actions, rewards, replay storage,
//! and the DDPG critic/actor objectives with their gradients.
//!
//! Flattened state layout is `[weights ‖ window]`, where the window is the
//! return tensors in chronological order, each row-major. Critic inputs
//! append the action: `[weights ‖ window ‖ action]`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::market_data::{MomentEstimates, ReturnWindow};
use crate::neural::{Activation, DenseNetwork, GradientRecord, NeuralError};
use crate::trading_env::{EnvConfig, PortfolioWeights};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("covariance matrix is singular after regularization")]
    Singular,
    #[error("minibatch is empty")]
    EmptyBatch,
    #[error("cannot draw {requested} samples from {available} transitions")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error("checkpoint fingerprint {found} does not match configuration {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

fn check_dim(expected: usize, got: usize) -> Result<(), AgentError> {
    if expected == got {
        Ok(())
    } else {
        Err(AgentError::Dimension { expected, got })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    OrnsteinUhlenbeck { theta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub hidden_layers: Vec<usize>,
    pub hidden_activation: Activation,
    /// Bound on each auxiliary weight.
    pub max_weight: f64,
    /// Bound on each executive residual.
    pub max_residual: f64,
    /// Risk aversion of the Markowitz target.
    pub target_risk_aversion: f64,
    /// Covariance ridge as a multiple of the mean variance.
    pub covariance_ridge: f64,
    pub noise: NoiseKind,
    pub noise_initial: f64,
    pub noise_final: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![128, 128],
            hidden_activation: Activation::Tanh,
            max_weight: 1.0,
            max_residual: 0.5,
            target_risk_aversion: 50.0,
            covariance_ridge: 1e-8,
            noise: NoiseKind::Gaussian,
            noise_initial: 0.1,
            noise_final: 0.01,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(AgentError::Config("hidden layer widths must be positive".into()));
        }
        if !(self.max_weight > 0.0 && self.max_residual >= 0.0) {
            return Err(AgentError::Config("weight bounds must be positive".into()));
        }
        if !(self.target_risk_aversion > 0.0) {
            return Err(AgentError::Config("target risk aversion must be positive".into()));
        }
        if !(self.noise_initial >= 0.0 && self.noise_final >= 0.0 && self.covariance_ridge >= 0.0) {
            return Err(AgentError::Config("noise scales and ridge must be non-negative".into()));
        }
        Ok(())
    }
}

/// Identifies every setting that fixes the shape or meaning of the networks.
pub fn model_fingerprint(tickers: &[String], env: &EnvConfig, agent: &AgentConfig) -> String {
    #[derive(Serialize)]
    struct Shape<'a> {
        tickers: &'a [String],
        trading_days: usize,
        window_periods: usize,
        hidden_layers: &'a [usize],
        hidden_activation: Activation,
        max_weight: f64,
        max_residual: f64,
    }
    let shape = Shape {
        tickers,
        trading_days: env.trading_days,
        window_periods: env.window_periods,
        hidden_layers: &agent.hidden_layers,
        hidden_activation: agent.hidden_activation,
        max_weight: agent.max_weight,
        max_residual: agent.max_residual,
    };
    let bytes = serde_json::to_vec(&shape).expect("serializable");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxState {
    pub prev_weights: PortfolioWeights,
    pub window: Arc<ReturnWindow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecState {
    pub baseline: PortfolioWeights,
    pub window: Arc<ReturnWindow>,
}

fn flatten(weights: &PortfolioWeights, window: &ReturnWindow) -> Vec<f64> {
    let mut out = Vec::with_capacity(weights.len() + window.flat_len());
    out.extend_from_slice(weights.as_slice());
    window.flatten_into(&mut out);
    out
}

impl AuxState {
    pub fn flatten(&self) -> Vec<f64> {
        flatten(&self.prev_weights, &self.window)
    }
}

impl ExecState {
    pub fn flatten(&self) -> Vec<f64> {
        flatten(&self.baseline, &self.window)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Auxiliary,
    Executive,
}

pub trait Transition {
    fn level(&self) -> Level;
    fn reward(&self) -> Option<f64>;
}

/// Auxiliary tuple `(s, a, s')`. No reward is stored; the target is rebuilt
/// from the cached Markowitz solution when the tuple is replayed.
#[derive(Debug, Clone)]
pub struct AuxTransition {
    pub state: AuxState,
    pub action: PortfolioWeights,
    pub next_state: AuxState,
    pub target: Arc<MarkowitzTarget>,
}

#[derive(Debug, Clone)]
pub struct ExecTransition {
    pub state: ExecState,
    pub action: PortfolioWeights,
    pub reward: f64,
    pub next_state: ExecState,
}

impl Transition for AuxTransition {
    fn level(&self) -> Level {
        Level::Auxiliary
    }

    fn reward(&self) -> Option<f64> {
        None
    }
}

impl Transition for ExecTransition {
    fn level(&self) -> Level {
        Level::Executive
    }

    fn reward(&self) -> Option<f64> {
        Some(self.reward)
    }
}

/// Fixed-capacity ring; the oldest entry is overwritten when full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    next: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self {
            items: Vec::new(),
            capacity,
            next: 0,
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Distinct slot indices drawn uniformly.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, AgentError> {
        if count > self.items.len() {
            return Err(AgentError::NotEnoughSamples {
                requested: count,
                available: self.items.len(),
            });
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), count).into_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<&T>, AgentError> {
        Ok(self
            .sample_indices(count, rng)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `w'mu - lambda1 w'Sigma w - lambda2 |w - w_prev|'1`.
pub fn evaluation_rho(
    weights: &PortfolioWeights,
    mean: &DVector<f64>,
    covariance: &DMatrix<f64>,
    prev_weights: &PortfolioWeights,
    risk_penalty: f64,
    turnover_penalty: f64,
) -> Result<f64, AgentError> {
    let n = weights.len();
    check_dim(n, mean.len())?;
    check_dim(n, prev_weights.len())?;
    check_dim(n, covariance.nrows())?;
    check_dim(n, covariance.ncols())?;
    let w = DVector::from_column_slice(weights.as_slice());
    let turnover: f64 = weights
        .0
        .iter()
        .zip(&prev_weights.0)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(w.dot(mean) - risk_penalty * w.dot(&(covariance * &w)) - turnover_penalty * turnover)
}

/// Gradient of [`evaluation_rho`] with respect to `weights`; the turnover
/// term uses `sign(0) = 0`.
pub fn evaluation_rho_gradient(
    weights: &PortfolioWeights,
    mean: &DVector<f64>,
    covariance: &DMatrix<f64>,
    prev_weights: &PortfolioWeights,
    risk_penalty: f64,
    turnover_penalty: f64,
) -> Vec<f64> {
    let w = DVector::from_column_slice(weights.as_slice());
    let sw = covariance * &w;
    (0..w.len())
        .map(|i| {
            mean[i] - 2.0 * risk_penalty * sw[i]
                - turnover_penalty * sign(weights.0[i] - prev_weights.0[i])
        })
        .collect()
}

/// Closed-form maximizer of `mu'w - lambda3 w'Sigma w`: `Sigma^-1 mu / (2 lambda3)`.
pub fn markowitz_optimal(
    mean: &DVector<f64>,
    covariance: &DMatrix<f64>,
    risk_aversion: f64,
) -> Result<PortfolioWeights, AgentError> {
    markowitz_optimal_with_ridge(mean, covariance, risk_aversion, AgentConfig::default().covariance_ridge)
}

pub fn markowitz_optimal_with_ridge(
    mean: &DVector<f64>,
    covariance: &DMatrix<f64>,
    risk_aversion: f64,
    ridge: f64,
) -> Result<PortfolioWeights, AgentError> {
    let n = mean.len();
    check_dim(n, covariance.nrows())?;
    check_dim(n, covariance.ncols())?;
    if !(risk_aversion > 0.0) {
        return Err(AgentError::Config("risk aversion must be positive".into()));
    }
    let shift = ridge * covariance.diagonal().mean();
    let regularized = covariance + DMatrix::identity(n, n) * shift;
    let solved = match regularized.clone().cholesky() {
        Some(chol) => Some(chol.solve(mean)),
        None => regularized.lu().solve(mean),
    }
    .ok_or(AgentError::Singular)?;
    if solved.iter().any(|v| !v.is_finite()) {
        return Err(AgentError::Singular);
    }
    Ok(PortfolioWeights(
        solved.iter().map(|v| v / (2.0 * risk_aversion)).collect(),
    ))
}

/// Markowitz solution of one period, cached for replay.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkowitzTarget {
    pub moments: Arc<MomentEstimates>,
    pub optimal: PortfolioWeights,
}

impl MarkowitzTarget {
    pub fn new(
        moments: Arc<MomentEstimates>,
        risk_aversion: f64,
        ridge: f64,
    ) -> Result<Self, AgentError> {
        let optimal =
            markowitz_optimal_with_ridge(&moments.mean, &moments.covariance, risk_aversion, ridge)?;
        Ok(Self { moments, optimal })
    }

    /// `Gamma_t`: the evaluation function at the Markowitz point.
    pub fn value(
        &self,
        prev_weights: &PortfolioWeights,
        risk_penalty: f64,
        turnover_penalty: f64,
    ) -> Result<f64, AgentError> {
        evaluation_rho(
            &self.optimal,
            &self.moments.mean,
            &self.moments.covariance,
            prev_weights,
            risk_penalty,
            turnover_penalty,
        )
    }

    /// Auxiliary reward `-(Gamma - rho(a))^2` and its gradient in `a`.
    pub fn reward_and_gradient(
        &self,
        action: &PortfolioWeights,
        prev_weights: &PortfolioWeights,
        risk_penalty: f64,
        turnover_penalty: f64,
    ) -> Result<(f64, Vec<f64>), AgentError> {
        let gamma = self.value(prev_weights, risk_penalty, turnover_penalty)?;
        let m = &self.moments;
        let rho = evaluation_rho(action, &m.mean, &m.covariance, prev_weights, risk_penalty, turnover_penalty)?;
        let gap = gamma - rho;
        let grad_rho =
            evaluation_rho_gradient(action, &m.mean, &m.covariance, prev_weights, risk_penalty, turnover_penalty);
        Ok((-gap * gap, grad_rho.iter().map(|g| 2.0 * gap * g).collect()))
    }
}

/// `Gamma_t = rho(w_opt)` with `w_opt` from [`markowitz_optimal`].
pub fn target_value(
    mean: &DVector<f64>,
    covariance: &DMatrix<f64>,
    prev_weights: &PortfolioWeights,
    risk_penalty: f64,
    turnover_penalty: f64,
    risk_aversion: f64,
) -> Result<f64, AgentError> {
    let optimal = markowitz_optimal(mean, covariance, risk_aversion)?;
    evaluation_rho(&optimal, mean, covariance, prev_weights, risk_penalty, turnover_penalty)
}

/// `-(Gamma_t - rho(a, s))^2`; never positive.
pub fn aux_reward(
    action: &PortfolioWeights,
    state: &AuxState,
    moments: &MomentEstimates,
    risk_penalty: f64,
    turnover_penalty: f64,
    risk_aversion: f64,
) -> Result<f64, AgentError> {
    let gamma = target_value(
        &moments.mean,
        &moments.covariance,
        &state.prev_weights,
        risk_penalty,
        turnover_penalty,
        risk_aversion,
    )?;
    let rho = evaluation_rho(
        action,
        &moments.mean,
        &moments.covariance,
        &state.prev_weights,
        risk_penalty,
        turnover_penalty,
    )?;
    Ok(-(gamma - rho).powi(2))
}

/// `w_max * tanh`-bounded weights from the auxiliary policy.
pub fn aux_policy_act(
    net: &DenseNetwork,
    state: &AuxState,
    max_weight: f64,
) -> Result<PortfolioWeights, AgentError> {
    let out = net.forward(&state.flatten())?;
    check_dim(state.prev_weights.len(), out.len())?;
    Ok(PortfolioWeights(out.iter().map(|o| max_weight * o).collect()))
}

/// Baseline plus a bounded residual plus exploration `noise` (zeros when evaluating).
pub fn exec_policy_act(
    net: &DenseNetwork,
    state: &ExecState,
    max_residual: f64,
    noise: &[f64],
) -> Result<PortfolioWeights, AgentError> {
    let out = net.forward(&state.flatten())?;
    let n = state.baseline.len();
    check_dim(n, out.len())?;
    check_dim(n, noise.len())?;
    Ok(PortfolioWeights(
        (0..n)
            .map(|i| state.baseline.0[i] + max_residual * out[i] + noise[i])
            .collect(),
    ))
}

fn critic_input(state: &ExecState, action: &PortfolioWeights) -> Vec<f64> {
    let mut x = state.flatten();
    x.extend_from_slice(action.as_slice());
    x
}

pub fn critic_value(
    net: &DenseNetwork,
    state: &ExecState,
    action: &PortfolioWeights,
) -> Result<f64, AgentError> {
    check_dim(state.baseline.len(), action.len())?;
    let out = net.forward(&critic_input(state, action))?;
    check_dim(1, out.len())?;
    Ok(out[0])
}

/// Exploration process added to executive actions while collecting.
#[derive(Debug, Clone)]
pub struct ExplorationNoise {
    kind: NoiseKind,
    state: Vec<f64>,
}

impl ExplorationNoise {
    pub fn new(kind: NoiseKind, n: usize) -> Self {
        Self {
            kind,
            state: vec![0.0; n],
        }
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) -> Vec<f64> {
        match self.kind {
            NoiseKind::Gaussian => (0..self.state.len())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect(),
            NoiseKind::OrnsteinUhlenbeck { theta } => {
                for x in &mut self.state {
                    let z: f64 = StandardNormal.sample(rng);
                    *x += -theta * *x + scale * z;
                }
                self.state.clone()
            }
        }
    }
}

/// Linearly decayed exploration scale at `step` of `total`.
pub fn noise_scale(cfg: &AgentConfig, step: usize, total: usize) -> f64 {
    if total == 0 {
        return cfg.noise_final;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    cfg.noise_initial + (cfg.noise_final - cfg.noise_initial) * frac
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxAgent {
    pub policy: DenseNetwork,
    pub max_weight: f64,
}

impl AuxAgent {
    pub fn new<R: Rng + ?Sized>(
        cfg: &AgentConfig,
        assets: usize,
        window_len: usize,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        let mut sizes = vec![assets + window_len];
        sizes.extend(&cfg.hidden_layers);
        sizes.push(assets);
        Ok(Self {
            policy: DenseNetwork::init(&sizes, cfg.hidden_activation, Activation::Tanh, rng)?,
            max_weight: cfg.max_weight,
        })
    }

    pub fn act(&self, state: &AuxState) -> Result<PortfolioWeights, AgentError> {
        aux_policy_act(&self.policy, state, self.max_weight)
    }

    /// Mean auxiliary reward over `batch` re-acted by the current policy, and
    /// the gradient of that mean with respect to the policy parameters.
    pub fn reward_gradient(
        &self,
        batch: &[&AuxTransition],
        risk_penalty: f64,
        turnover_penalty: f64,
    ) -> Result<(f64, GradientRecord), AgentError> {
        if batch.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let mut total = GradientRecord::zeros_like(&self.policy);
        let mut reward_sum = 0.0;
        for tr in batch {
            let trace = self.policy.forward_trace(&tr.state.flatten())?;
            let action = PortfolioWeights(trace.output().iter().map(|o| self.max_weight * o).collect());
            let (reward, grad_a) = tr.target.reward_and_gradient(
                &action,
                &tr.state.prev_weights,
                risk_penalty,
                turnover_penalty,
            )?;
            let upstream: Vec<f64> = grad_a.iter().map(|g| g * self.max_weight).collect();
            total.accumulate(&self.policy.backward(&trace, &upstream)?.params);
            reward_sum += reward;
        }
        let n = batch.len() as f64;
        total.scale(1.0 / n);
        Ok((reward_sum / n, total))
    }

    pub fn save(&self, dir: &Path, fingerprint: &str) -> Result<(), AgentError> {
        self.policy.save(dir, "policy")?;
        write_manifest(
            dir,
            &AgentManifest {
                version: AGENT_CHECKPOINT_VERSION,
                fingerprint: fingerprint.to_string(),
                bound: self.max_weight,
            },
        )
    }

    pub fn load(dir: &Path, fingerprint: &str) -> Result<Self, AgentError> {
        let manifest = read_manifest(dir, fingerprint)?;
        Ok(Self {
            policy: DenseNetwork::load(dir, "policy")?,
            max_weight: manifest.bound,
        })
    }
}

/// Actor, critic and their target copies.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecAgent {
    pub actor: DenseNetwork,
    pub critic: DenseNetwork,
    pub target_actor: DenseNetwork,
    pub target_critic: DenseNetwork,
    pub max_residual: f64,
}

impl ExecAgent {
    pub fn new<R: Rng + ?Sized>(
        cfg: &AgentConfig,
        assets: usize,
        window_len: usize,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        let state_len = assets + window_len;
        let mut actor_sizes = vec![state_len];
        actor_sizes.extend(&cfg.hidden_layers);
        actor_sizes.push(assets);
        let mut critic_sizes = vec![state_len + assets];
        critic_sizes.extend(&cfg.hidden_layers);
        critic_sizes.push(1);
        let actor = DenseNetwork::init(&actor_sizes, cfg.hidden_activation, Activation::Tanh, rng)?;
        let critic =
            DenseNetwork::init(&critic_sizes, cfg.hidden_activation, Activation::Identity, rng)?;
        Ok(Self {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            max_residual: cfg.max_residual,
        })
    }

    pub fn act(&self, state: &ExecState, noise: &[f64]) -> Result<PortfolioWeights, AgentError> {
        exec_policy_act(&self.actor, state, self.max_residual, noise)
    }

    /// Zeroes the actor's residual head (and its target), making the executive
    /// an identity on the baseline weights.
    pub fn zero_residual_head(&mut self) {
        self.actor.zero_output_head();
        self.target_actor.zero_output_head();
    }

    pub fn save(&self, dir: &Path, fingerprint: &str) -> Result<(), AgentError> {
        self.actor.save(dir, "actor")?;
        self.critic.save(dir, "critic")?;
        self.target_actor.save(dir, "target_actor")?;
        self.target_critic.save(dir, "target_critic")?;
        write_manifest(
            dir,
            &AgentManifest {
                version: AGENT_CHECKPOINT_VERSION,
                fingerprint: fingerprint.to_string(),
                bound: self.max_residual,
            },
        )
    }

    pub fn load(dir: &Path, fingerprint: &str) -> Result<Self, AgentError> {
        let manifest = read_manifest(dir, fingerprint)?;
        Ok(Self {
            actor: DenseNetwork::load(dir, "actor")?,
            critic: DenseNetwork::load(dir, "critic")?,
            target_actor: DenseNetwork::load(dir, "target_actor")?,
            target_critic: DenseNetwork::load(dir, "target_critic")?,
            max_residual: manifest.bound,
        })
    }
}

const AGENT_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct AgentManifest {
    version: u32,
    fingerprint: String,
    bound: f64,
}

fn write_manifest(dir: &Path, manifest: &AgentManifest) -> Result<(), AgentError> {
    let text = serde_json::to_string_pretty(manifest).expect("serializable");
    fs::write(dir.join("agent.json"), text)
        .map_err(|e| AgentError::Checkpoint(format!("{}: {e}", dir.display())))
}

fn read_manifest(dir: &Path, fingerprint: &str) -> Result<AgentManifest, AgentError> {
    let path = dir.join("agent.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| AgentError::Checkpoint(format!("{}: {e}", path.display())))?;
    let manifest: AgentManifest =
        serde_json::from_str(&text).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
    if manifest.version != AGENT_CHECKPOINT_VERSION {
        return Err(AgentError::Checkpoint(format!(
            "unsupported agent checkpoint version {}",
            manifest.version
        )));
    }
    if manifest.fingerprint != fingerprint {
        return Err(AgentError::FingerprintMismatch {
            expected: fingerprint.to_string(),
            found: manifest.fingerprint,
        });
    }
    Ok(manifest)
}

/// `mean [Q(s,a) - (r + gamma Q'(s', pi'(s')))]^2` over the batch.
pub fn critic_loss(
    batch: &[&ExecTransition],
    online_critic: &DenseNetwork,
    target_critic: &DenseNetwork,
    target_actor: &DenseNetwork,
    discount: f64,
    max_residual: f64,
) -> Result<f64, AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let mut sum = 0.0;
    for tr in batch {
        let y = bellman_target(tr, target_critic, target_actor, discount, max_residual)?;
        let q = critic_value(online_critic, &tr.state, &tr.action)?;
        sum += (q - y).powi(2);
    }
    Ok(sum / batch.len() as f64)
}

fn bellman_target(
    tr: &ExecTransition,
    target_critic: &DenseNetwork,
    target_actor: &DenseNetwork,
    discount: f64,
    max_residual: f64,
) -> Result<f64, AgentError> {
    if discount == 0.0 {
        return Ok(tr.reward);
    }
    let n = tr.next_state.baseline.len();
    let next_action = exec_policy_act(target_actor, &tr.next_state, max_residual, &vec![0.0; n])?;
    Ok(tr.reward + discount * critic_value(target_critic, &tr.next_state, &next_action)?)
}

/// Critic loss and its gradient with respect to the online critic, holding
/// the Bellman targets fixed.
pub fn critic_loss_gradient(
    batch: &[&ExecTransition],
    online_critic: &DenseNetwork,
    target_critic: &DenseNetwork,
    target_actor: &DenseNetwork,
    discount: f64,
    max_residual: f64,
) -> Result<(f64, GradientRecord), AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let mut total = GradientRecord::zeros_like(online_critic);
    let mut sum = 0.0;
    for tr in batch {
        let y = bellman_target(tr, target_critic, target_actor, discount, max_residual)?;
        let trace = online_critic.forward_trace(&critic_input(&tr.state, &tr.action))?;
        let err = trace.output()[0] - y;
        sum += err * err;
        total.accumulate(&online_critic.backward(&trace, &[2.0 * err])?.params);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((sum / n, total))
}

/// `mean Q(s, pi(s))` over the batch.
pub fn actor_objective(
    batch: &[&ExecTransition],
    critic: &DenseNetwork,
    actor: &DenseNetwork,
    max_residual: f64,
) -> Result<f64, AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let mut sum = 0.0;
    for tr in batch {
        let n = tr.state.baseline.len();
        let action = exec_policy_act(actor, &tr.state, max_residual, &vec![0.0; n])?;
        sum += critic_value(critic, &tr.state, &action)?;
    }
    Ok(sum / batch.len() as f64)
}

/// Actor objective and the deterministic policy gradient
/// `mean grad_a Q(s, pi(s)) grad_theta pi(s)`.
pub fn actor_objective_gradient(
    batch: &[&ExecTransition],
    critic: &DenseNetwork,
    actor: &DenseNetwork,
    max_residual: f64,
) -> Result<(f64, GradientRecord), AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let mut total = GradientRecord::zeros_like(actor);
    let mut sum = 0.0;
    for tr in batch {
        let state = tr.state.flatten();
        let n = tr.state.baseline.len();
        let actor_trace = actor.forward_trace(&state)?;
        let mut input = state;
        input.extend(
            actor_trace
                .output()
                .iter()
                .zip(&tr.state.baseline.0)
                .map(|(o, b)| b + max_residual * o),
        );
        let critic_trace = critic.forward_trace(&input)?;
        sum += critic_trace.output()[0];
        let grad_input = critic.backward(&critic_trace, &[1.0])?.input;
        let upstream: Vec<f64> = grad_input[grad_input.len() - n..]
            .iter()
            .map(|g| g * max_residual)
            .collect();
        total.accumulate(&actor.backward(&actor_trace, &upstream)?.params);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((sum / n, total))
}
