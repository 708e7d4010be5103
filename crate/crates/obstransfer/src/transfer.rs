//! Training procedures: source-task learning with a latent dynamics model
//! as an auxiliary objective, target-task learning with that model
//! transferred and frozen, and the comparison baselines.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::derive_rng;
use crate::dqn::{
    pixel_encoder_spec, q_head_spec, vector_encoder_spec, AgentConfig, Batch, DqnAgent, DqnError,
    ReplayBuffer, StoredTransition,
};
use crate::dynamics::{load_network_into, save_network, CkptError, LatentModel, StableEncoder};
use crate::envs::{
    BrokenSensor, CartFace, CartPole, DroppedVelocity, Env, EnvError, Face, GoalMode, GridMaze,
    MazeMap, TAU,
};
use crate::harness::{auc, metrics_to_csv, MetricsRow};
use crate::nn::{adam_step_over, AdamState, Network, NnError, Parameterized, Tape, Tensor};

pub const LATENT_CKPT: &str = "latent_model.ckpt.json";
pub const STABLE_ENCODER_CKPT: &str = "stable_encoder.ckpt.json";
pub const ENCODER_CKPT: &str = "encoder.ckpt.json";
pub const Q_HEAD_CKPT: &str = "q_head.ckpt.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAJECTORY_DIR: &str = "trajectories";

/// Fraction of completed source episodes written to the trajectory store.
pub const TRAJECTORY_FRACTION: f64 = 0.1;
/// Alignment pretraining defaults for the time-aligned baseline.
pub const ALIGN_EPOCHS: usize = 1000;
pub const ALIGN_BATCH: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("invalid run spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Agent(#[from] DqnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CkptError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory store: {0}")]
    TrajectoryStore(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("frozen {0} weights changed during training")]
    FrozenChanged(&'static str),
}

/// Which environment and observation face a run uses.
#[derive(Clone, Debug)]
pub enum EnvChoice {
    GridMaze { face: Face, map: MazeMap, goal: GoalMode },
    CartPole { face: CartFace },
    /// Vector CartPole with both velocity features removed and `stack`
    /// degraded frames in their place.
    CartPoleBroken { stack: usize },
}

impl EnvChoice {
    pub fn build(&self) -> Result<Box<dyn Env>, EnvError> {
        match self {
            EnvChoice::GridMaze { face, map, goal } => {
                if let GoalMode::Pinned(x, y) = *goal {
                    if x >= map.width() || y >= map.height() || map.is_wall(x, y) {
                        return Err(EnvError::BadMap(format!(
                            "pinned goal ({x}, {y}) is not an open cell"
                        )));
                    }
                }
                Ok(Box::new(GridMaze::new(map.clone(), *face, *goal)))
            }
            EnvChoice::CartPole { face } => Ok(Box::new(CartPole::new(*face))),
            EnvChoice::CartPoleBroken { stack } => {
                let dropped = vec![
                    DroppedVelocity { index: 1, position_index: 0, dt: TAU },
                    DroppedVelocity { index: 3, position_index: 2, dt: TAU },
                ];
                Ok(Box::new(BrokenSensor::new(
                    Box::new(CartPole::new(CartFace::Vector)),
                    dropped,
                    *stack,
                )?))
            }
        }
    }
}

/// Run mode: the transferred method, or one of the comparison baselines,
/// or one of the two single-model ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Frozen source dynamics model regularizes the target encoder.
    Transfer,
    /// Plain TD learning, no auxiliary objective.
    Single,
    /// Dynamics model trained from scratch on the target, same lambda.
    Auxiliary,
    /// Frozen source Q-head, fresh encoder, no auxiliary objective.
    FineTune,
    /// Encoder pretrained to match stored source representations on
    /// time-aligned replayed trajectories, then plain TD learning.
    TimeAligned,
    /// Transfer of the transition model only.
    TransitionOnly,
    /// Transfer of the reward model only.
    RewardOnly,
}

impl Baseline {
    /// Whether this mode consumes an input artifact (checkpoint file or
    /// trajectory directory).
    pub fn needs_input(self) -> bool {
        !matches!(self, Baseline::Single | Baseline::Auxiliary)
    }
}

#[derive(Clone, Debug)]
pub struct RunSpec {
    pub env: EnvChoice,
    pub agent: AgentConfig,
    pub baseline: Baseline,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Latent-model checkpoint (transfer and ablations), Q-head checkpoint
    /// (fine-tune), or trajectory-store directory (time-aligned).
    pub in_path: Option<PathBuf>,
    /// When set, checkpoints, metrics, and (for source runs) the
    /// trajectory store are written here.
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub align_epochs: usize,
    pub align_batch: usize,
}

impl RunSpec {
    pub fn new(env: EnvChoice, baseline: Baseline, seed: u64) -> Self {
        Self {
            env,
            agent: AgentConfig::default(),
            baseline,
            total_steps: 20_000,
            eval_every: 1000,
            eval_episodes: 20,
            in_path: None,
            out_dir: None,
            seed,
            align_epochs: ALIGN_EPOCHS,
            align_batch: ALIGN_BATCH,
        }
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        self.agent.validate()?;
        if self.total_steps == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(TransferError::BadSpec(
                "total_steps, eval_every, and eval_episodes must be positive".into(),
            ));
        }
        if self.baseline.needs_input() && self.in_path.is_none() {
            return Err(TransferError::BadSpec(format!(
                "{:?} requires an input path",
                self.baseline
            )));
        }
        if !self.baseline.needs_input() && self.in_path.is_some() {
            return Err(TransferError::BadSpec(format!(
                "{:?} takes no input path",
                self.baseline
            )));
        }
        if self.align_epochs == 0 || self.align_batch == 0 {
            return Err(TransferError::BadSpec(
                "alignment pretraining needs positive epochs and batch".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a finished run hands back in memory (files are written
/// only when `out_dir` is set).
pub struct RunOutput {
    pub metrics: Vec<MetricsRow>,
    pub auc: f64,
    pub episodes: usize,
    pub agent: DqnAgent,
    pub latent: Option<LatentModel>,
    /// Epoch-mean alignment losses (time-aligned baseline only).
    pub align_losses: Vec<f64>,
    /// Actions of every completed episode, in order.
    pub episode_actions: Vec<Vec<usize>>,
}

/// FNV-1a over the raw bits of every parameter, used to verify frozen
/// components never move.
pub fn params_hash(params: &[&Tensor]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in params {
        for v in t.data() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

fn stack_obs(items: &[&Tensor]) -> Result<Tensor, NnError> {
    let shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend_from_slice(&shape);
    Tensor::new(full, data)
}

fn encoder_spec_for(env: &dyn Env, d: usize) -> Result<crate::nn::NetworkSpec, NnError> {
    let shape = env.obs_shape();
    match shape.as_slice() {
        [n] => vector_encoder_spec(*n, d),
        [c, h, w] => pixel_encoder_spec(*c, *h, *w, d),
        other => Err(NnError::ShapeMismatch(format!(
            "unsupported observation shape {other:?}"
        ))),
    }
}

fn build_agent(spec: &RunSpec, env: &dyn Env) -> Result<DqnAgent, TransferError> {
    let d = spec.agent.encoding_dim;
    let enc_spec = encoder_spec_for(env, d)?;
    let encoder = Network::new(enc_spec, &mut derive_rng(spec.seed, "encoder-init"))?;
    let q_head = Network::new(
        q_head_spec(d, env.num_actions())?,
        &mut derive_rng(spec.seed, "q-init"),
    )?;
    Ok(DqnAgent::new(encoder, q_head, spec.agent.clone())?)
}

/// Builds a fresh copy of the run's environment and primes it with the same
/// reset stream the training environment saw first. This reproduces any
/// state the environment latches on its first reset (a fixed maze goal, for
/// example), so evaluation and replay face the same task as training.
fn build_env_primed(env: &EnvChoice, seed: u64) -> Result<Box<dyn Env>, TransferError> {
    let mut built = env.build()?;
    built.reset(&mut episode_rng(seed, 0))?;
    Ok(built)
}

fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    derive_rng(seed, &format!("env-ep-{episode}"))
}

struct ModeFlags {
    /// Train a latent model on stable-encoder representations each step.
    train_latent: bool,
    /// Add the model-consistency terms (weighted by lambda) to the agent
    /// loss.
    regularize: bool,
    use_transition: bool,
    use_reward: bool,
    /// Exclude the Q-head from optimization.
    freeze_q: bool,
}

impl ModeFlags {
    fn for_baseline(b: Baseline) -> Self {
        match b {
            Baseline::Transfer => Self {
                train_latent: false,
                regularize: true,
                use_transition: true,
                use_reward: true,
                freeze_q: false,
            },
            Baseline::TransitionOnly => Self {
                train_latent: false,
                regularize: true,
                use_transition: true,
                use_reward: false,
                freeze_q: false,
            },
            Baseline::RewardOnly => Self {
                train_latent: false,
                regularize: true,
                use_transition: false,
                use_reward: true,
                freeze_q: false,
            },
            Baseline::Auxiliary => Self {
                train_latent: true,
                regularize: true,
                use_transition: true,
                use_reward: true,
                freeze_q: false,
            },
            Baseline::Single | Baseline::TimeAligned => Self {
                train_latent: false,
                regularize: false,
                use_transition: false,
                use_reward: false,
                freeze_q: false,
            },
            Baseline::FineTune => Self {
                train_latent: false,
                regularize: false,
                use_transition: false,
                use_reward: false,
                freeze_q: true,
            },
        }
    }

    /// Source-task learning: latent model trained alongside, loss
    /// regularized against it.
    fn source() -> Self {
        Self::for_baseline(Baseline::Auxiliary)
    }
}

struct Trainer {
    spec: RunSpec,
    flags: ModeFlags,
    env: Box<dyn Env>,
    agent: DqnAgent,
    latent: Option<LatentModel>,
    latent_opt: AdamState,
    stable: Option<StableEncoder>,
    buffer: ReplayBuffer,
    action_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    frozen_latent_hash: Option<u64>,
    frozen_q_hash: Option<u64>,
    /// Actions of every completed episode, in order, for the store.
    episode_actions: Vec<Vec<usize>>,
}

impl Trainer {
    fn new(
        spec: RunSpec,
        flags: ModeFlags,
        latent: Option<LatentModel>,
        latent_frozen: bool,
    ) -> Result<Self, TransferError> {
        spec.validate()?;
        let env = spec.env.build()?;
        let agent = build_agent(&spec, env.as_ref())?;
        if let Some(model) = &latent {
            if model.encoding_dim() != spec.agent.encoding_dim
                || model.num_actions() != env.num_actions()
            {
                return Err(TransferError::BadSpec(format!(
                    "latent model is ({}, {}) but the run needs ({}, {})",
                    model.encoding_dim(),
                    model.num_actions(),
                    spec.agent.encoding_dim,
                    env.num_actions()
                )));
            }
        }
        let stable = (flags.train_latent || flags.regularize)
            .then(|| StableEncoder::new(&agent.net.encoder, spec.agent.stable_period));
        let frozen_latent_hash = (latent_frozen && latent.is_some())
            .then(|| params_hash(&latent.as_ref().unwrap().parameters()));
        let frozen_q_hash =
            flags.freeze_q.then(|| params_hash(&agent.net.q_head.parameters()));
        Ok(Self {
            buffer: ReplayBuffer::new(spec.agent.replay_capacity),
            action_rng: derive_rng(spec.seed, "actions"),
            sample_rng: derive_rng(spec.seed, "replay-sample"),
            latent_opt: AdamState::new(spec.agent.lr),
            spec,
            flags,
            env,
            agent,
            latent,
            stable,
            frozen_latent_hash,
            frozen_q_hash,
            episode_actions: Vec::new(),
        })
    }

    /// Dynamics-model update on stable-encoder representations (both the
    /// current and the next observation go through the stable copy).
    fn latent_step(&mut self, batch: &Batch) -> Result<(f64, f64), TransferError> {
        let latent = self.latent.as_mut().expect("train_latent implies a model");
        let stable_net = self.stable.as_ref().expect("train_latent implies a stable copy");
        let z = stable_net.network().forward_no_grad(&batch.obs)?;
        let z_next = stable_net.network().forward_no_grad(&batch.next_obs)?;
        let mut tape = Tape::new();
        let binding = latent.bind(&mut tape)?;
        let zc = tape.constant(z)?;
        let znc = tape.constant(z_next)?;
        let lp = latent.transition_loss(&mut tape, &binding, zc, znc, &batch.actions)?;
        let lr = latent.reward_loss(&mut tape, &binding, zc, &batch.rewards, &batch.actions)?;
        let (lp_val, lr_val) = (tape.value(lp).scalar_value(), tape.value(lr).scalar_value());
        let total = tape.add_scaled(lp, lr, 1.0)?;
        tape.backward(total)?;
        let grads = binding.grads(&tape);
        adam_step_over(&mut self.latent_opt, &mut [latent], &grads)?;
        Ok((lp_val, lr_val))
    }

    /// Agent update: TD loss, plus (when regularizing with lambda > 0)
    /// the model-consistency terms with the model's parameters entering
    /// as constants and the next representation gradient-stopped.
    fn agent_step(
        &mut self,
        batch: &Batch,
        t: usize,
    ) -> Result<(f64, Option<f64>, Option<f64>), TransferError> {
        let lambda = self.spec.agent.lambda;
        let mut tape = Tape::new();
        let (base, z, enc_b, q_b) =
            self.agent.net.td_loss_on_tape(&mut tape, batch, self.spec.agent.gamma)?;
        let base_val = tape.value(base).scalar_value();
        let mut lp_val = None;
        let mut lr_val = None;
        let mut total = base;
        if self.flags.regularize && lambda > 0.0 {
            let latent = self.latent.as_ref().expect("regularize implies a model");
            let frozen = latent.bind_frozen(&mut tape)?;
            let mut reg = None;
            if self.flags.use_transition {
                // The next-state representation enters as a constant from
                // the stable encoder (refreshed every stable_period
                // steps). A live stop-gradient target makes this a
                // self-distillation loss that collapses the encoder onto
                // a constant representation; the periodically frozen copy
                // breaks that feedback loop.
                let stable = self.stable.as_ref().expect("regularize implies a stable copy");
                let z_next = tape.constant(stable.network().forward_no_grad(&batch.next_obs)?)?;
                let lp = latent.transition_loss(&mut tape, &frozen, z, z_next, &batch.actions)?;
                lp_val = Some(tape.value(lp).scalar_value());
                reg = Some(lp);
            }
            if self.flags.use_reward {
                let lr =
                    latent.reward_loss(&mut tape, &frozen, z, &batch.rewards, &batch.actions)?;
                lr_val = Some(tape.value(lr).scalar_value());
                reg = Some(match reg {
                    Some(prev) => tape.add_scaled(prev, lr, 1.0)?,
                    None => lr,
                });
            }
            if let Some(reg) = reg {
                total = tape.add_scaled(base, reg, lambda)?;
            }
        }
        tape.backward(total)?;
        let mut grads = enc_b.grads(&tape)?;
        if self.flags.freeze_q {
            adam_step_over(
                &mut self.agent.optimizer,
                &mut [&mut self.agent.net.encoder],
                &grads,
            )?;
        } else {
            grads.extend(q_b.grads(&tape)?);
            adam_step_over(
                &mut self.agent.optimizer,
                &mut [&mut self.agent.net.encoder, &mut self.agent.net.q_head],
                &grads,
            )?;
        }
        if t % self.spec.agent.target_update_period == 0 {
            self.agent.net.refresh_target();
        }
        Ok((base_val, lp_val, lr_val))
    }

    fn check_frozen(&self) -> Result<(), TransferError> {
        if let Some(expected) = self.frozen_latent_hash {
            let model = self.latent.as_ref().expect("hash implies a model");
            if params_hash(&model.parameters()) != expected {
                return Err(TransferError::FrozenChanged("dynamics-model"));
            }
        }
        if let Some(expected) = self.frozen_q_hash {
            if params_hash(&self.agent.net.q_head.parameters()) != expected {
                return Err(TransferError::FrozenChanged("Q-head"));
            }
        }
        Ok(())
    }

    fn evaluate(&self, t: usize) -> Result<(f64, f64), TransferError> {
        let mut env = build_env_primed(&self.spec.env, self.spec.seed)?;
        let mut returns = Vec::with_capacity(self.spec.eval_episodes);
        for ep in 0..self.spec.eval_episodes {
            let mut rng = derive_rng(self.spec.seed, &format!("eval-{t}-{ep}"));
            let mut obs = env.reset(&mut rng)?;
            let mut total = 0.0;
            loop {
                let action = self.agent.net.act_greedy(&obs)?;
                let tr = env.step(action)?;
                total += tr.reward;
                if tr.done {
                    break;
                }
                obs = tr.obs;
            }
            returns.push(total);
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Ok((mean, var.sqrt()))
    }

    fn run(mut self) -> Result<RunOutput, TransferError> {
        let mut rows = Vec::new();
        let mut episode = 0usize;
        let mut current_actions = Vec::new();
        let mut obs = self.env.reset(&mut episode_rng(self.spec.seed, 0))?;
        let mut last_losses: (Option<f64>, Option<f64>, Option<f64>) = (None, None, None);
        for t in 0..self.spec.total_steps {
            let eps = self.spec.agent.epsilon_at(t);
            let action = self.agent.net.act(&obs, eps, &mut self.action_rng)?;
            let tr = self.env.step(action)?;
            self.buffer.push(StoredTransition {
                obs,
                action,
                reward: tr.reward,
                next_obs: tr.obs.clone(),
                // Bootstrap through step-cap endings: only task-terminal
                // transitions cut the TD target.
                done: tr.done && !tr.truncated,
            });
            current_actions.push(action);
            if tr.done {
                self.episode_actions.push(std::mem::take(&mut current_actions));
                episode += 1;
                obs = self.env.reset(&mut episode_rng(self.spec.seed, episode))?;
            } else {
                obs = tr.obs;
            }
            if self.buffer.len() >= self.spec.agent.batch_size {
                let batch = self.buffer.sample(self.spec.agent.batch_size, &mut self.sample_rng)?;
                let mut latent_losses = None;
                if self.flags.train_latent {
                    latent_losses = Some(self.latent_step(&batch)?);
                }
                let (base, lp, lr) = self.agent_step(&batch, t)?;
                // Prefer the live regularizer values; fall back to the
                // stable-representation model losses when the agent loss
                // carries no model terms.
                let (lp, lr) = match (lp.or(lr), latent_losses) {
                    (None, Some((slp, slr))) => (Some(slp), Some(slr)),
                    _ => (lp, lr),
                };
                last_losses = (Some(base), lp, lr);
                if let Some(stable) = &mut self.stable {
                    stable.maybe_refresh(&self.agent.net.encoder, t);
                }
            }
            if (t + 1) % self.spec.eval_every == 0 {
                self.check_frozen()?;
                let (mean, std) = self.evaluate(t + 1)?;
                rows.push(MetricsRow {
                    step: t + 1,
                    episode,
                    eval_return_mean: Some(mean),
                    eval_return_std: Some(std),
                    loss_base: last_losses.0,
                    loss_p: last_losses.1,
                    loss_r: last_losses.2,
                    epsilon: Some(eps),
                });
            }
        }
        self.check_frozen()?;
        let auc_value = auc(&rows);
        Ok(RunOutput {
            metrics: rows,
            auc: auc_value,
            episodes: episode,
            agent: self.agent,
            latent: self.latent,
            align_losses: Vec::new(),
            episode_actions: self.episode_actions,
        })
    }
}

fn write_common_outputs(spec: &RunSpec, out: &RunOutput) -> Result<(), TransferError> {
    let Some(dir) = &spec.out_dir else { return Ok(()) };
    std::fs::create_dir_all(dir)?;
    let csv = metrics_to_csv(&out.metrics)
        .map_err(|e| TransferError::Metrics(e.to_string()))?;
    std::fs::write(dir.join(METRICS_FILE), csv)?;
    let d = spec.agent.encoding_dim;
    let a = out.agent.net.num_actions();
    save_network(&out.agent.net.encoder, "encoder", d, a, &dir.join(ENCODER_CKPT))?;
    save_network(&out.agent.net.q_head, "q_head", d, a, &dir.join(Q_HEAD_CKPT))?;
    Ok(())
}

/// Source-task learning. Each step: act and store; sample one mini-batch;
/// update the dynamics model on stable representations; update encoder and
/// Q-head on the TD loss plus lambda times the model-consistency terms
/// (model parameters frozen within that step); refresh the stable encoder
/// copy on its period. Emits checkpoints, metrics, and the trajectory
/// store when `out_dir` is set.
pub fn run_source(spec: &RunSpec) -> Result<RunOutput, TransferError> {
    let mut spec = spec.clone();
    spec.baseline = Baseline::Auxiliary;
    spec.in_path = None;
    let latent = LatentModel::new(
        spec.agent.encoding_dim,
        spec.env.build()?.num_actions(),
        &mut derive_rng(spec.seed, "latent-init"),
    );
    let trainer = Trainer::new(spec.clone(), ModeFlags::source(), Some(latent), false)?;
    let out = trainer.run()?;
    write_common_outputs(&spec, &out)?;
    if let Some(dir) = &spec.out_dir {
        let d = spec.agent.encoding_dim;
        let a = out.agent.net.num_actions();
        out.latent
            .as_ref()
            .expect("source runs train a model")
            .save(&dir.join(LATENT_CKPT))?;
        // The stable copy at end-of-run is within one period of the live
        // encoder; persist the live weights under the stable kind.
        save_network(
            &out.agent.net.encoder,
            "stable_encoder",
            d,
            a,
            &dir.join(STABLE_ENCODER_CKPT),
        )?;
        write_trajectory_store(&spec, &out, &dir.join(TRAJECTORY_DIR))?;
    }
    Ok(out)
}

/// Target-task learning with the source dynamics model loaded from
/// `in_path` and frozen: the model shapes the encoder through the
/// consistency terms but never receives gradient.
pub fn run_target_transfer(spec: &RunSpec) -> Result<RunOutput, TransferError> {
    run_target_with_frozen_model(spec)
}

/// P-only and R-only transfer; `spec.baseline` selects the variant.
pub fn run_ablation(spec: &RunSpec) -> Result<RunOutput, TransferError> {
    if !matches!(spec.baseline, Baseline::TransitionOnly | Baseline::RewardOnly) {
        return Err(TransferError::BadSpec(
            "ablation runs need the transition-only or reward-only mode".into(),
        ));
    }
    run_target_with_frozen_model(spec)
}

fn run_target_with_frozen_model(spec: &RunSpec) -> Result<RunOutput, TransferError> {
    spec.validate()?;
    let path = spec.in_path.as_ref().expect("validated above");
    let latent = LatentModel::load(path)?;
    let flags = ModeFlags::for_baseline(spec.baseline);
    let trainer = Trainer::new(spec.clone(), flags, Some(latent), true)?;
    let out = trainer.run()?;
    write_common_outputs(spec, &out)?;
    Ok(out)
}

/// Plain TD learning with no auxiliary objective.
pub fn run_baseline_single(spec: &RunSpec) -> Result<RunOutput, TransferError> {
    let mut spec = spec.clone();
    spec.baseline = Baseline::Single;
    let trainer = Trainer::new(spec.clone(), ModeFlags::for_baseline(Baseline::Single), None, false)?;
    let out = trainer.run()?;
    write_common_outputs(&spec, &out)?;
    Ok(out)
}

/// Dynamics model trained from scratch on the target alongside the agent,
/// with the same lambda as the transferred method.
pub fn run_baseline_auxiliary(spec: &RunSpec) -> Result<RunOutput, TransferError> {
    let mut spec = spec.clone();
    spec.baseline = Baseline::Auxiliary;
    let latent = LatentModel::new(
        spec.agent.encoding_dim,
        spec.env.build()?.num_actions(),
        &mut derive_rng(spec.seed, "latent-init"),
    );
    let trainer = Trainer::new(
        spec.clone(),
        ModeFlags::for_baseline(Baseline::Auxiliary),
        Some(latent),
        false,
    )?;
    let out = trainer.run()?;
    write_common_outputs(&spec, &out)?;
    if let (Some(dir), Some(latent)) = (&spec.out_dir, &out.latent) {
        latent.save(&dir.join(LATENT_CKPT))?;
    }
    Ok(out)
}

/// Loads and freezes the source Q-head, trains a fresh encoder with the
/// plain TD loss. Works across faces because the head consumes only the
/// d-dimensional representation.
pub fn run_baseline_finetune(spec: &RunSpec) -> Result<RunOutput, TransferError> {
    spec.validate()?;
    let path = spec.in_path.as_ref().expect("validated above");
    let mut trainer = Trainer::new(
        spec.clone(),
        ModeFlags::for_baseline(Baseline::FineTune),
        None,
        false,
    )?;
    load_network_into(&mut trainer.agent.net.q_head, "q_head", path)?;
    trainer.agent.net.refresh_target();
    trainer.frozen_q_hash = Some(params_hash(&trainer.agent.net.q_head.parameters()));
    let out = trainer.run()?;
    write_common_outputs(spec, &out)?;
    Ok(out)
}

/// Phase 1: replay each stored source trajectory in the target
/// environment (reset from the episode's recorded stream), pair target
/// observations with stored source representations by time index, and
/// pretrain the encoder to minimize the mean squared representation
/// difference. Phase 2: plain TD learning from the pretrained encoder.
pub fn run_baseline_time_aligned(spec: &RunSpec) -> Result<RunOutput, TransferError> {
    spec.validate()?;
    let store = spec.in_path.as_ref().expect("validated above");
    let trajectories = read_trajectory_store(store)?;
    if trajectories.is_empty() {
        return Err(TransferError::TrajectoryStore(format!(
            "no trajectory files in {}",
            store.display()
        )));
    }
    let mut trainer = Trainer::new(
        spec.clone(),
        ModeFlags::for_baseline(Baseline::TimeAligned),
        None,
        false,
    )?;
    // Build the paired dataset by replaying stored actions in the target.
    let mut env = build_env_primed(&spec.env, trajectories[0].source_seed)?;
    let mut pairs: Vec<(Tensor, Vec<f64>)> = Vec::new();
    for traj in &trajectories {
        let mut rng = episode_rng(traj.source_seed, traj.episode);
        let mut obs = env.reset(&mut rng)?;
        for (i, step) in traj.steps.iter().enumerate() {
            if step.rep.len() != spec.agent.encoding_dim {
                return Err(TransferError::TrajectoryStore(format!(
                    "stored representation has dim {}, run needs {}",
                    step.rep.len(),
                    spec.agent.encoding_dim
                )));
            }
            pairs.push((obs.clone(), step.rep.clone()));
            let tr = env.step(step.action)?;
            if tr.done && i + 1 < traj.steps.len() {
                return Err(TransferError::TrajectoryStore(format!(
                    "episode {} ended early during replay",
                    traj.episode
                )));
            }
            obs = tr.obs;
        }
    }
    let align_losses = pretrain_alignment(&mut trainer, &pairs)?;
    trainer.agent.net.refresh_target();
    let mut out = trainer.run()?;
    out.align_losses = align_losses;
    write_common_outputs(spec, &out)?;
    Ok(out)
}

fn pretrain_alignment(
    trainer: &mut Trainer,
    pairs: &[(Tensor, Vec<f64>)],
) -> Result<Vec<f64>, TransferError> {
    let spec = &trainer.spec;
    let mut opt = AdamState::new(spec.agent.lr);
    let mut rng = derive_rng(spec.seed, "align-pretrain");
    let batch = spec.align_batch.min(pairs.len());
    let mut losses = Vec::with_capacity(spec.align_epochs);
    for _ in 0..spec.align_epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let obs: Vec<&Tensor> = chunk.iter().map(|&i| &pairs[i].0).collect();
            let reps: Vec<&[f64]> = chunk.iter().map(|&i| pairs[i].1.as_slice()).collect();
            let mut tape = Tape::new();
            let binding = trainer.agent.net.encoder.bind(&mut tape)?;
            let input = tape.constant(stack_obs(&obs)?)?;
            let z = trainer.agent.net.encoder.forward_with(&mut tape, &binding, input)?;
            let target = tape.constant(Tensor::stack_rows(&reps)?)?;
            let diff = tape.sub(z, target)?;
            let loss = tape.row_sum_square_mean(diff)?;
            epoch_sum += tape.value(loss).scalar_value();
            batches += 1;
            tape.backward(loss)?;
            let grads = binding.grads(&tape)?;
            adam_step_over(&mut opt, &mut [&mut trainer.agent.net.encoder], &grads)?;
        }
        losses.push(epoch_sum / batches as f64);
    }
    Ok(losses)
}

/// Generic dispatch used by the harness.
pub fn run(spec: &RunSpec) -> Result<RunOutput, TransferError> {
    match spec.baseline {
        Baseline::Transfer => run_target_transfer(spec),
        Baseline::Single => run_baseline_single(spec),
        Baseline::Auxiliary => run_baseline_auxiliary(spec),
        Baseline::FineTune => run_baseline_finetune(spec),
        Baseline::TimeAligned => run_baseline_time_aligned(spec),
        Baseline::TransitionOnly | Baseline::RewardOnly => run_ablation(spec),
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub action: usize,
    pub rep: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StoredTrajectory {
    pub episode: usize,
    pub source_seed: u64,
    pub steps: Vec<TrajectoryStep>,
}

/// Writes the last 10% (at least one) of completed source episodes to
/// `dir`, one `traj_{episode}_{seed}.csv` per trajectory with lines
/// `step,action,rep_0,...,rep_{d-1}`. Representations come from replaying
/// the episode through the final encoder.
fn write_trajectory_store(
    spec: &RunSpec,
    out: &RunOutput,
    dir: &std::path::Path,
) -> Result<(), TransferError> {
    std::fs::create_dir_all(dir)?;
    let total = out.episodes;
    if total == 0 {
        return Err(TransferError::TrajectoryStore(
            "no completed episodes to store".into(),
        ));
    }
    let keep = ((total as f64 * TRAJECTORY_FRACTION).ceil() as usize).max(1);
    let first = total - keep;
    let mut env = build_env_primed(&spec.env, spec.seed)?;
    for episode in first..total {
        let actions = &out.episode_actions[episode];
        let mut rng = episode_rng(spec.seed, episode);
        let mut obs = env.reset(&mut rng)?;
        let mut lines = String::new();
        for (step, &action) in actions.iter().enumerate() {
            let batched = stack_obs(&[&obs])?;
            let z = out.agent.net.encoder.forward_no_grad(&batched)?;
            let rep: Vec<String> = z.data().iter().map(|v| format!("{v}")).collect();
            lines.push_str(&format!("{step},{action},{}\n", rep.join(",")));
            let tr = env.step(action)?;
            obs = tr.obs;
        }
        let name = format!("traj_{episode}_{}.csv", spec.seed);
        std::fs::write(dir.join(name), lines)?;
    }
    Ok(())
}

pub fn read_trajectory_store(
    dir: &std::path::Path,
) -> Result<Vec<StoredTrajectory>, TransferError> {
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.starts_with("traj_") && name.ends_with(".csv") {
            names.push(name);
        }
    }
    names.sort();
    let mut out = Vec::new();
    for name in names {
        let stem = name.trim_start_matches("traj_").trim_end_matches(".csv");
        let mut parts = stem.split('_');
        let bad = || TransferError::TrajectoryStore(format!("bad trajectory filename {name}"));
        let episode: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let source_seed: u64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let text = std::fs::read_to_string(dir.join(&name))?;
        let mut steps = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 3 {
                return Err(TransferError::TrajectoryStore(format!(
                    "{name} line {}: need step, action, and a representation",
                    i + 1
                )));
            }
            let step: usize = cols[0].parse().map_err(|_| {
                TransferError::TrajectoryStore(format!("{name} line {}: bad step", i + 1))
            })?;
            if step != i {
                return Err(TransferError::TrajectoryStore(format!(
                    "{name} line {}: step {step} out of order",
                    i + 1
                )));
            }
            let action: usize = cols[1].parse().map_err(|_| {
                TransferError::TrajectoryStore(format!("{name} line {}: bad action", i + 1))
            })?;
            let rep: Vec<f64> = cols[2..]
                .iter()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| {
                    TransferError::TrajectoryStore(format!(
                        "{name} line {}: bad representation",
                        i + 1
                    ))
                })?;
            steps.push(TrajectoryStep { action, rep });
        }
        out.push(StoredTrajectory { episode, source_seed, steps });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::MazeMap;
    use tempfile::tempdir;

    fn small_agent() -> AgentConfig {
        AgentConfig {
            batch_size: 8,
            replay_capacity: 400,
            epsilon_decay_steps: 100,
            encoding_dim: 8,
            ..AgentConfig::default()
        }
    }

    fn maze_spec(face: Face, baseline: Baseline, seed: u64) -> RunSpec {
        let mut spec = RunSpec::new(
            EnvChoice::GridMaze { face, map: MazeMap::default_map(), goal: GoalMode::Resample },
            baseline,
            seed,
        );
        spec.agent = small_agent();
        spec.total_steps = 150;
        spec.eval_every = 50;
        spec.eval_episodes = 2;
        spec
    }

    fn weight_hash(agent: &DqnAgent) -> u64 {
        let mut params = agent.net.encoder.parameters();
        params.extend(agent.net.q_head.parameters());
        params_hash(&params)
    }

    #[test]
    fn lambda_zero_source_reduces_to_single() {
        let mut source = maze_spec(Face::Vector, Baseline::Auxiliary, 5);
        source.agent.lambda = 0.0;
        let a = run_source(&source).unwrap();
        let mut single = maze_spec(Face::Vector, Baseline::Single, 5);
        single.agent.lambda = 0.0;
        let b = run_baseline_single(&single).unwrap();
        assert_eq!(weight_hash(&a.agent), weight_hash(&b.agent));
        // Metrics agree except for the model-loss columns, which the
        // single run leaves empty.
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ra.eval_return_mean, rb.eval_return_mean);
            assert_eq!(ra.loss_base, rb.loss_base);
            assert_eq!(rb.loss_p, None);
        }
    }

    #[test]
    fn runs_are_reproducible_and_seed_sensitive() {
        let spec = maze_spec(Face::Vector, Baseline::Single, 9);
        let a = run_baseline_single(&spec).unwrap();
        let b = run_baseline_single(&spec).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(weight_hash(&a.agent), weight_hash(&b.agent));
        let c = run_baseline_single(&maze_spec(Face::Vector, Baseline::Single, 10)).unwrap();
        assert_ne!(weight_hash(&a.agent), weight_hash(&c.agent));
    }

    #[test]
    fn transfer_keeps_model_frozen_and_checks_dims() {
        let dir = tempdir().unwrap();
        let mut source = maze_spec(Face::Vector, Baseline::Auxiliary, 3);
        source.out_dir = Some(dir.path().to_path_buf());
        run_source(&source).unwrap();
        let ckpt = dir.path().join(LATENT_CKPT);
        let saved_hash = params_hash(&LatentModel::load(&ckpt).unwrap().parameters());

        let mut target = maze_spec(Face::Vector, Baseline::Transfer, 4);
        target.in_path = Some(ckpt.clone());
        let out = run_target_transfer(&target).unwrap();
        let end_hash = params_hash(&out.latent.as_ref().unwrap().parameters());
        assert_eq!(saved_hash, end_hash);

        let mut mismatched = target.clone();
        mismatched.agent.encoding_dim = 4;
        match run_target_transfer(&mismatched) {
            Err(TransferError::BadSpec(msg)) => assert!(msg.contains("latent model")),
            other => panic!("expected dim mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn finetune_loads_and_freezes_the_source_head() {
        let dir = tempdir().unwrap();
        let mut source = maze_spec(Face::Vector, Baseline::Single, 6);
        source.out_dir = Some(dir.path().to_path_buf());
        run_baseline_single(&source).unwrap();
        let head_path = dir.path().join(Q_HEAD_CKPT);

        let mut spec = maze_spec(Face::Pixel, Baseline::FineTune, 7);
        spec.total_steps = 60;
        spec.in_path = Some(head_path.clone());
        let out = run_baseline_finetune(&spec).unwrap();
        // The head works across faces and never moves.
        let mut probe = Network::new(
            q_head_spec(spec.agent.encoding_dim, 4).unwrap(),
            &mut derive_rng(0, "probe"),
        )
        .unwrap();
        load_network_into(&mut probe, "q_head", &head_path).unwrap();
        assert_eq!(
            params_hash(&probe.parameters()),
            params_hash(&out.agent.net.q_head.parameters())
        );
    }

    #[test]
    fn ablations_use_only_the_selected_model_term() {
        let dir = tempdir().unwrap();
        let mut source = maze_spec(Face::Vector, Baseline::Auxiliary, 11);
        source.out_dir = Some(dir.path().to_path_buf());
        run_source(&source).unwrap();
        let ckpt = dir.path().join(LATENT_CKPT);

        // Save a copy with perturbed reward parameters.
        let mut perturbed = LatentModel::load(&ckpt).unwrap();
        let n = perturbed.parameters().len();
        for (i, p) in perturbed.parameters_mut().into_iter().enumerate() {
            if i >= n / 2 {
                // Reward tensors come after the transition tensors.
                for v in p.data_mut() {
                    *v += 1.0;
                }
            }
        }
        let perturbed_path = dir.path().join("latent_perturbed.ckpt.json");
        perturbed.save(&perturbed_path).unwrap();

        let mut p_only = maze_spec(Face::Vector, Baseline::TransitionOnly, 12);
        p_only.in_path = Some(ckpt.clone());
        let a = run_ablation(&p_only).unwrap();
        let mut p_only2 = p_only.clone();
        p_only2.in_path = Some(perturbed_path);
        let b = run_ablation(&p_only2).unwrap();
        // The reward model is unused, so perturbing it changes nothing.
        assert_eq!(weight_hash(&a.agent), weight_hash(&b.agent));
        for row in &a.metrics {
            assert!(row.loss_p.is_some());
            assert_eq!(row.loss_r, None);
        }

        let mut r_only = maze_spec(Face::Vector, Baseline::RewardOnly, 12);
        r_only.in_path = Some(ckpt);
        let c = run_ablation(&r_only).unwrap();
        for row in &c.metrics {
            assert_eq!(row.loss_p, None);
            assert!(row.loss_r.is_some());
        }
    }

    #[test]
    fn time_aligned_pretraining_reduces_alignment_loss() {
        let dir = tempdir().unwrap();
        let mut source = maze_spec(Face::Vector, Baseline::Auxiliary, 20);
        source.total_steps = 220;
        source.out_dir = Some(dir.path().to_path_buf());
        let src_out = run_source(&source).unwrap();
        assert!(src_out.episodes >= 1);
        let store = dir.path().join(TRAJECTORY_DIR);
        let trajectories = read_trajectory_store(&store).unwrap();
        assert!(!trajectories.is_empty());
        assert!(trajectories
            .iter()
            .all(|t| t.steps.iter().all(|s| s.rep.len() == 8)));

        let mut spec = maze_spec(Face::Pixel, Baseline::TimeAligned, 21);
        spec.total_steps = 40;
        spec.align_epochs = 25;
        spec.align_batch = 32;
        spec.in_path = Some(store);
        let out = run_baseline_time_aligned(&spec).unwrap();
        assert_eq!(out.align_losses.len(), 25);
        let first = out.align_losses[0];
        let last = *out.align_losses.last().unwrap();
        assert!(last < first, "alignment loss did not drop: {first} -> {last}");
    }

    #[test]
    fn spec_validation_matches_input_requirements() {
        let mut spec = maze_spec(Face::Vector, Baseline::Single, 1);
        spec.in_path = Some(PathBuf::from("x"));
        assert!(matches!(spec.validate(), Err(TransferError::BadSpec(_))));
        let spec = maze_spec(Face::Vector, Baseline::Transfer, 1);
        assert!(matches!(spec.validate(), Err(TransferError::BadSpec(_))));
    }
}
