//! Two-phase training: the auxiliary policy is fitted to the Markowitz target
//! first, then frozen while the executive actor-critic learns on top of it.
//! Every collection round ends with a greedy tracking pass over the training
//! horizon.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    actor_objective_gradient, critic_loss_gradient, noise_scale, AgentConfig, AgentError,
    AuxAgent, AuxState, AuxTransition, ExecAgent, ExecState, ExecTransition, ExplorationNoise,
    MarkowitzTarget, ReplayBuffer,
};
use crate::neural::{Direction, NeuralError, Optimizer, OptimizerKind};
use crate::trading_env::{
    fmt_opt, Bankruptcy, Decision, EnvConfig, EnvError, MarketEnv, PeriodOutcome, PortfolioWeights,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite {what} in {phase} round {round}")]
    NonFinite {
        phase: &'static str,
        round: usize,
        what: &'static str,
    },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub aux_target_step: usize,
    pub exec_target_step: usize,
    pub aux_minibatch: usize,
    pub exec_minibatch: usize,
    pub buffer_capacity: usize,
    pub aux_total_steps: usize,
    pub exec_total_steps: usize,
    /// Auxiliary policy rate.
    pub aux_rate: f64,
    /// Executive actor rate.
    pub actor_rate: f64,
    /// Executive critic rate.
    pub critic_rate: f64,
    pub discount: f64,
    pub soft_update: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            aux_target_step: 1080,
            exec_target_step: 1080,
            aux_minibatch: 128,
            exec_minibatch: 128,
            buffer_capacity: 1 << 14,
            aux_total_steps: 300_000,
            exec_total_steps: 600_000,
            aux_rate: 1e-5,
            actor_rate: 1e-6,
            critic_rate: 1e-8,
            discount: 0.99,
            soft_update: 0.005,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("aux_target_step", self.aux_target_step),
            ("exec_target_step", self.exec_target_step),
            ("aux_minibatch", self.aux_minibatch),
            ("exec_minibatch", self.exec_minibatch),
            ("buffer_capacity", self.buffer_capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.aux_minibatch > self.buffer_capacity || self.exec_minibatch > self.buffer_capacity {
            return Err(TrainError::Config("minibatch exceeds buffer capacity".into()));
        }
        for (name, v) in [
            ("aux_rate", self.aux_rate),
            ("actor_rate", self.actor_rate),
            ("critic_rate", self.critic_rate),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(format!("{name} must be a non-negative number")));
            }
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(TrainError::Config("discount must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.soft_update) {
            return Err(TrainError::Config("soft_update must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Child seeds drawn in a fixed order from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub aux_init: u64,
    pub exec_init: u64,
    pub aux_sampling: u64,
    pub exec_sampling: u64,
    pub noise: u64,
}

impl SeedPlan {
    pub fn from_root(seed: u64) -> Self {
        let mut root = ChaCha8Rng::seed_from_u64(seed);
        Self {
            aux_init: root.random(),
            exec_init: root.random(),
            aux_sampling: root.random(),
            exec_sampling: root.random(),
            noise: root.random(),
        }
    }
}

/// Rounds run by the literal loop "collect, update, `S += step`, stop once
/// `S > total`". A zero budget runs no rounds.
pub fn planned_rounds(total_steps: usize, target_step: usize) -> usize {
    if total_steps == 0 {
        0
    } else {
        total_steps / target_step + 1
    }
}

/// The five in-sample indices of one tracking pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackIndices {
    /// `log2(v_end / v_0)`; undefined after bankruptcy.
    pub ar: Option<f64>,
    pub av: f64,
    pub ard: f64,
    pub np: usize,
    pub npr: usize,
    pub periods: usize,
    pub bankrupt: bool,
}

/// Folds a period trace (and an optional failing period) into [`TrackIndices`].
pub fn tracking_indices(
    outcomes: &[PeriodOutcome],
    bankruptcy: Option<&Bankruptcy>,
    cfg: &EnvConfig,
) -> TrackIndices {
    let amplification = cfg.trading_days as f64 * cfg.risk_penalty;
    let mut variance: f64 = outcomes.iter().map(|o| o.variance).sum();
    let mut ard: f64 = outcomes.iter().map(|o| o.reward).sum();
    let np = outcomes
        .iter()
        .filter(|o| o.portfolio_log_return.is_some_and(|xi| xi >= 0.0))
        .count();
    let mut npr = outcomes.iter().filter(|o| o.reward >= 0.0).count();
    let ar = match bankruptcy {
        Some(b) => {
            variance += b.variance;
            ard += b.reward;
            npr += usize::from(b.reward >= 0.0);
            None
        }
        None => Some(
            outcomes
                .last()
                .map_or(0.0, |o| (o.total_assets / cfg.initial_capital).log2()),
        ),
    };
    TrackIndices {
        ar,
        av: amplification * variance,
        ard,
        np,
        npr,
        periods: outcomes.len() + usize::from(bankruptcy.is_some()),
        bankrupt: bankruptcy.is_some(),
    }
}

/// One greedy episode over the whole horizon.
#[derive(Debug, Clone)]
pub struct TrackingPass {
    pub outcomes: Vec<PeriodOutcome>,
    pub bankruptcy: Option<Box<Bankruptcy>>,
    /// Auxiliary weights chosen each period.
    pub aux_weights: Vec<PortfolioWeights>,
    pub indices: TrackIndices,
}

/// Rolls the hierarchy (or the auxiliary agent alone when `exec` is `None`)
/// from a fresh reset with exploration off. The environment is left reset.
pub fn tracking_pass(
    env: &mut MarketEnv,
    aux: &AuxAgent,
    exec: Option<&ExecAgent>,
) -> Result<TrackingPass, TrainError> {
    env.reset();
    let n = env.config().assets;
    let zeros = vec![0.0; n];
    let mut prev = PortfolioWeights::zeros(n);
    let mut outcomes = Vec::with_capacity(env.horizon());
    let mut aux_weights = Vec::with_capacity(env.horizon());
    let mut bankruptcy = None;
    while !env.done() {
        let window = env.window(env.period());
        let w_au = aux.act(&AuxState {
            prev_weights: prev,
            window: Arc::clone(&window),
        })?;
        let weights = match exec {
            Some(agent) => agent.act(
                &ExecState {
                    baseline: w_au.clone(),
                    window,
                },
                &zeros,
            )?,
            None => w_au.clone(),
        };
        aux_weights.push(w_au.clone());
        prev = w_au;
        match env.step(&Decision::Rebalance(weights)) {
            Ok(o) => outcomes.push(o),
            Err(EnvError::Bankrupt(b)) => {
                bankruptcy = Some(b);
                break;
            }
            Err(e) => {
                env.reset();
                return Err(e.into());
            }
        }
    }
    let indices = tracking_indices(&outcomes, bankruptcy.as_deref(), env.config());
    env.reset();
    Ok(TrackingPass {
        outcomes,
        bankruptcy,
        aux_weights,
        indices,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackEntry {
    /// Accumulated steps when the pass ran.
    pub step: usize,
    pub indices: TrackIndices,
    pub actor_obj: Option<f64>,
    pub critic_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackRecord {
    pub entries: Vec<TrackEntry>,
}

impl TrackRecord {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["step", "AR", "AV", "ARD", "NP", "NPR", "actor_obj", "critic_loss"])?;
        for e in &self.entries {
            out.write_record([
                e.step.to_string(),
                fmt_opt(e.indices.ar),
                e.indices.av.to_string(),
                e.indices.ard.to_string(),
                e.indices.np.to_string(),
                e.indices.npr.to_string(),
                fmt_opt(e.actor_obj),
                fmt_opt(e.critic_loss),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AuxTrainingResult {
    pub agent: AuxAgent,
    pub track: TrackRecord,
    pub rounds: usize,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct ExecTrainingResult {
    pub agent: ExecAgent,
    pub track: TrackRecord,
    pub rounds: usize,
    pub steps: usize,
}

/// Markowitz solutions for every period of the horizon.
pub fn markowitz_targets(
    env: &MarketEnv,
    agent_cfg: &AgentConfig,
) -> Result<Vec<Arc<MarkowitzTarget>>, TrainError> {
    (1..=env.horizon())
        .map(|t| {
            MarkowitzTarget::new(
                env.moments(t),
                agent_cfg.target_risk_aversion,
                agent_cfg.covariance_ridge,
            )
            .map(Arc::new)
            .map_err(TrainError::from)
        })
        .collect()
}

/// Mean auxiliary reward of the greedy auxiliary actions along the horizon.
pub fn mean_aux_reward(
    env: &MarketEnv,
    aux: &AuxAgent,
    targets: &[Arc<MarkowitzTarget>],
) -> Result<f64, TrainError> {
    let cfg = env.config();
    let mut prev = PortfolioWeights::zeros(cfg.assets);
    let mut sum = 0.0;
    for t in 1..=env.horizon() {
        let state = AuxState {
            prev_weights: prev,
            window: env.window(t),
        };
        let a = aux.act(&state)?;
        let (r, _) = targets[t - 1].reward_and_gradient(
            &a,
            &state.prev_weights,
            cfg.risk_penalty,
            cfg.turnover_penalty,
        )?;
        sum += r;
        prev = a;
    }
    Ok(sum / env.horizon() as f64)
}

/// Phase one: collect auxiliary tuples and ascend the mean auxiliary reward.
pub fn train_auxiliary(
    env: &mut MarketEnv,
    mut agent: AuxAgent,
    agent_cfg: &AgentConfig,
    cfg: &TrainConfig,
) -> Result<AuxTrainingResult, TrainError> {
    cfg.validate()?;
    let seeds = SeedPlan::from_root(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.aux_sampling);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let targets = markowitz_targets(env, agent_cfg)?;
    let (lambda1, lambda2) = (env.config().risk_penalty, env.config().turnover_penalty);
    let horizon = env.horizon();
    let n = env.config().assets;

    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut track = TrackRecord::default();
    let mut t = 1;
    let mut prev = PortfolioWeights::zeros(n);
    let rounds = planned_rounds(cfg.aux_total_steps, cfg.aux_target_step);
    let mut steps = 0;
    for round in 1..=rounds {
        for _ in 0..cfg.aux_target_step {
            let state = AuxState {
                prev_weights: prev,
                window: env.window(t),
            };
            let action = agent.act(&state)?;
            let next_state = AuxState {
                prev_weights: action.clone(),
                window: env.window(t + 1),
            };
            buffer.push(AuxTransition {
                state,
                action: action.clone(),
                next_state,
                target: Arc::clone(&targets[t - 1]),
            });
            t += 1;
            if t > horizon {
                t = 1;
                prev = PortfolioWeights::zeros(n);
            } else {
                prev = action;
            }
        }

        for _ in 0..buffer.len() / cfg.aux_minibatch {
            let batch = buffer.sample(cfg.aux_minibatch, &mut rng)?;
            let (reward, grads) = agent.reward_gradient(&batch, lambda1, lambda2)?;
            if !reward.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFinite {
                    phase: "auxiliary",
                    round,
                    what: "reward gradient",
                });
            }
            optimizer.step(&mut agent.policy, &grads, cfg.aux_rate, Direction::Ascend)?;
        }
        steps += cfg.aux_target_step;

        let pass = tracking_pass(env, &agent, None)?;
        let objective = mean_aux_reward(env, &agent, &targets)?;
        log::debug!("auxiliary round {round}/{rounds}: mean reward {objective:e}");
        track.entries.push(TrackEntry {
            step: steps,
            indices: pass.indices,
            actor_obj: Some(objective),
            critic_loss: None,
        });
    }
    Ok(AuxTrainingResult {
        agent,
        track,
        rounds,
        steps,
    })
}

struct ExecCursor {
    aux_prev: PortfolioWeights,
    state: ExecState,
}

fn exec_start(env: &mut MarketEnv, aux: &AuxAgent) -> Result<ExecCursor, TrainError> {
    env.reset();
    let window = env.window(1);
    let w_au = aux.act(&AuxState {
        prev_weights: PortfolioWeights::zeros(env.config().assets),
        window: Arc::clone(&window),
    })?;
    Ok(ExecCursor {
        aux_prev: w_au.clone(),
        state: ExecState {
            baseline: w_au,
            window,
        },
    })
}

/// Phase two: DDPG on the executive level with the auxiliary agent frozen.
pub fn train_executive(
    env: &mut MarketEnv,
    aux: &AuxAgent,
    mut agent: ExecAgent,
    agent_cfg: &AgentConfig,
    cfg: &TrainConfig,
) -> Result<ExecTrainingResult, TrainError> {
    cfg.validate()?;
    let seeds = SeedPlan::from_root(cfg.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seeds.exec_sampling);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds.noise);
    let n = env.config().assets;
    let mut noise = ExplorationNoise::new(agent_cfg.noise, n);
    let mut critic_opt = Optimizer::new(cfg.optimizer);
    let mut actor_opt = Optimizer::new(cfg.optimizer);

    let mut buffer: ReplayBuffer<ExecTransition> = ReplayBuffer::new(cfg.buffer_capacity);
    let mut track = TrackRecord::default();
    let rounds = planned_rounds(cfg.exec_total_steps, cfg.exec_target_step);
    let mut steps = 0;
    let mut cursor = exec_start(env, aux)?;
    for round in 1..=rounds {
        for i in 0..cfg.exec_target_step {
            let scale = noise_scale(agent_cfg, steps + i, cfg.exec_total_steps);
            let eps = noise.sample(scale, &mut noise_rng);
            let action = agent.act(&cursor.state, &eps)?;
            let t = env.period();
            let reward = match env.step(&Decision::Rebalance(action.clone())) {
                Ok(outcome) => outcome.reward,
                Err(EnvError::Bankrupt(b)) => b.reward,
                Err(e) => return Err(e.into()),
            };
            let next_window = env.window(t + 1);
            let next_au = aux.act(&AuxState {
                prev_weights: cursor.aux_prev.clone(),
                window: Arc::clone(&next_window),
            })?;
            let next_state = ExecState {
                baseline: next_au.clone(),
                window: next_window,
            };
            buffer.push(ExecTransition {
                state: cursor.state.clone(),
                action,
                reward,
                next_state: next_state.clone(),
            });
            if env.done() {
                noise.reset();
                cursor = exec_start(env, aux)?;
            } else {
                cursor = ExecCursor {
                    aux_prev: next_au,
                    state: next_state,
                };
            }
        }

        let batches = buffer.len() / cfg.exec_minibatch;
        let (mut loss_sum, mut obj_sum) = (0.0, 0.0);
        for _ in 0..batches {
            let batch = buffer.sample(cfg.exec_minibatch, &mut sample_rng)?;
            let (loss, critic_grads) = critic_loss_gradient(
                &batch,
                &agent.critic,
                &agent.target_critic,
                &agent.target_actor,
                cfg.discount,
                agent.max_residual,
            )?;
            if !loss.is_finite() || !critic_grads.is_finite() {
                return Err(TrainError::NonFinite {
                    phase: "executive",
                    round,
                    what: "critic loss",
                });
            }
            critic_opt.step(&mut agent.critic, &critic_grads, cfg.critic_rate, Direction::Descend)?;
            agent.target_critic.soft_update_from(&agent.critic, cfg.soft_update)?;

            let (objective, actor_grads) =
                actor_objective_gradient(&batch, &agent.critic, &agent.actor, agent.max_residual)?;
            if !objective.is_finite() || !actor_grads.is_finite() {
                return Err(TrainError::NonFinite {
                    phase: "executive",
                    round,
                    what: "actor objective",
                });
            }
            actor_opt.step(&mut agent.actor, &actor_grads, cfg.actor_rate, Direction::Ascend)?;
            agent.target_actor.soft_update_from(&agent.actor, cfg.soft_update)?;
            loss_sum += loss;
            obj_sum += objective;
        }
        steps += cfg.exec_target_step;

        // The tracking pass resets the environment; resume collection from t = 1.
        let pass = tracking_pass(env, aux, Some(&agent))?;
        noise.reset();
        cursor = exec_start(env, aux)?;
        let mean = |sum: f64| (batches > 0).then(|| sum / batches as f64);
        log::debug!(
            "executive round {round}/{rounds}: ARD {:.6}, NPR {}",
            pass.indices.ard,
            pass.indices.npr
        );
        track.entries.push(TrackEntry {
            step: steps,
            indices: pass.indices,
            actor_obj: mean(obj_sum),
            critic_loss: mean(loss_sum),
        });
    }
    Ok(ExecTrainingResult {
        agent,
        track,
        rounds,
        steps,
    })
}

/// Both phases from freshly initialized agents, seeded from `cfg.seed`.
pub fn train_hierarchy(
    env: &mut MarketEnv,
    agent_cfg: &AgentConfig,
    cfg: &TrainConfig,
) -> Result<(AuxTrainingResult, ExecTrainingResult), TrainError> {
    agent_cfg.validate()?;
    cfg.validate()?;
    let seeds = SeedPlan::from_root(cfg.seed);
    let n = env.config().assets;
    let window_len = env.window(1).flat_len();
    let aux = AuxAgent::new(
        agent_cfg,
        n,
        window_len,
        &mut ChaCha8Rng::seed_from_u64(seeds.aux_init),
    )?;
    let exec = ExecAgent::new(
        agent_cfg,
        n,
        window_len,
        &mut ChaCha8Rng::seed_from_u64(seeds.exec_init),
    )?;
    let aux_result = train_auxiliary(env, aux, agent_cfg, cfg)?;
    let exec_result = train_executive(env, &aux_result.agent, exec, agent_cfg, cfg)?;
    Ok((aux_result, exec_result))
}
