//! DQN base learner with an explicit encoder / Q-head split, so the
//! representation can be regularized independently of the value head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    adam_step_over, Activation, AdamState, Network, NetworkBinding, NetworkSpec, NnError, NodeId,
    Tape, Tensor,
};

#[derive(Debug, thiserror::Error)]
pub enum DqnError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("replay buffer has {have} transitions, need {need}")]
    BufferUnderfull { have: usize, need: usize },
    #[error("bad agent config: {0}")]
    BadConfig(String),
}

#[derive(Clone, Debug)]
pub struct AgentConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub target_update_period: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    pub encoding_dim: usize,
    pub lambda: f64,
    pub stable_period: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 0.001,
            batch_size: 64,
            replay_capacity: 10_000,
            target_update_period: 10,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 5000,
            encoding_dim: 16,
            lambda: 18.0,
            stable_period: 10,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), DqnError> {
        let bad = |msg: String| Err(DqnError::BadConfig(msg));
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return bad(format!("gamma {} not in (0, 1)", self.gamma));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return bad(format!("lr {}", self.lr));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return bad(format!("lambda {}", self.lambda));
        }
        if self.encoding_dim < 1 {
            return bad("encoding_dim must be at least 1".into());
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return bad(format!(
                "batch_size {} vs replay_capacity {}",
                self.batch_size, self.replay_capacity
            ));
        }
        if self.target_update_period == 0 || self.stable_period == 0 {
            return bad("update periods must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon_start)
            || !(0.0..=1.0).contains(&self.epsilon_end)
            || self.epsilon_end > self.epsilon_start
            || self.epsilon_end <= 0.0
            || self.epsilon_decay_steps == 0
        {
            return bad("epsilon schedule must satisfy 0 < end <= start <= 1".into());
        }
        Ok(())
    }

    /// Exponential decay from start to end over `epsilon_decay_steps`,
    /// clamped at `epsilon_end` afterwards.
    pub fn epsilon_at(&self, t: usize) -> f64 {
        let ratio = self.epsilon_end / self.epsilon_start;
        let eps = self.epsilon_start * ratio.powf(t as f64 / self.epsilon_decay_steps as f64);
        eps.max(self.epsilon_end)
    }
}

/// Standard vector-observation encoder: two dense layers onto the unit
/// sphere in `R^d`.
pub fn vector_encoder_spec(in_dim: usize, d: usize) -> Result<NetworkSpec, NnError> {
    NetworkSpec::new(vec![in_dim])?
        .dense(64, Activation::Relu)?
        .dense(d, Activation::Linear)?
        .unit_normalize()
}

/// Standard image encoder: three convolutions (16/32/32 channels) then a
/// dense projection onto the unit sphere. Small inputs get 3x3 kernels at
/// stride 1; larger frames get 5x5 at stride 2.
pub fn pixel_encoder_spec(c: usize, h: usize, w: usize, d: usize) -> Result<NetworkSpec, NnError> {
    let (kernel, stride) = if h.min(w) >= 20 { (5, 2) } else { (3, 1) };
    NetworkSpec::new(vec![c, h, w])?
        .conv2d(16, kernel, stride, Activation::Relu)?
        .conv2d(32, kernel, stride, Activation::Relu)?
        .conv2d(32, kernel, stride, Activation::Relu)?
        .flatten()?
        .dense(d, Activation::Linear)?
        .unit_normalize()
}

pub fn q_head_spec(d: usize, num_actions: usize) -> Result<NetworkSpec, NnError> {
    NetworkSpec::new(vec![d])?
        .dense(64, Activation::Relu)?
        .dense(num_actions, Activation::Linear)
}

#[derive(Clone, Debug)]
pub struct StoredTransition {
    pub obs: Tensor,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Tensor,
    pub done: bool,
}

/// Uniform-sampling ring buffer.
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<StoredTransition>,
    write: usize,
}

/// A sampled minibatch with observations stacked along a batch dimension.
pub struct Batch {
    pub obs: Tensor,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_obs: Tensor,
    pub dones: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self { capacity, items: Vec::new(), write: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: StoredTransition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.write] = t;
        }
        self.write = (self.write + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &StoredTransition {
        &self.items[i]
    }

    /// Uniform sample with replacement, stacked into batch tensors.
    pub fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Batch, DqnError> {
        if self.items.len() < batch_size {
            return Err(DqnError::BufferUnderfull { have: self.items.len(), need: batch_size });
        }
        let picks: Vec<&StoredTransition> = (0..batch_size)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect();
        Ok(Self::stack(&picks))
    }

    fn stack(picks: &[&StoredTransition]) -> Batch {
        let shape = picks[0].obs.shape().to_vec();
        let stack_obs = |get: &dyn Fn(&StoredTransition) -> &Tensor| {
            let mut data = Vec::with_capacity(picks.len() * picks[0].obs.numel());
            for p in picks {
                data.extend_from_slice(get(p).data());
            }
            let mut full = vec![picks.len()];
            full.extend_from_slice(&shape);
            Tensor::new(full, data).expect("uniform shapes in buffer")
        };
        Batch {
            obs: stack_obs(&|p| &p.obs),
            actions: picks.iter().map(|p| p.action).collect(),
            rewards: picks.iter().map(|p| p.reward).collect(),
            next_obs: stack_obs(&|p| &p.next_obs),
            dones: picks.iter().map(|p| p.done).collect(),
        }
    }
}

/// Encoder plus Q-head with delayed target copies of both.
pub struct EncoderQNet {
    pub encoder: Network,
    pub q_head: Network,
    target_encoder: Network,
    target_q_head: Network,
    num_actions: usize,
}

impl EncoderQNet {
    pub fn new(encoder: Network, q_head: Network) -> Result<Self, DqnError> {
        if encoder.spec().output_shape() != q_head.spec().input_shape() {
            return Err(DqnError::BadConfig(format!(
                "encoder emits {:?}, value head expects {:?}",
                encoder.spec().output_shape(),
                q_head.spec().input_shape()
            )));
        }
        let num_actions = q_head.spec().output_shape()[0];
        Ok(Self {
            target_encoder: encoder.clone(),
            target_q_head: q_head.clone(),
            encoder,
            q_head,
            num_actions,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Live-network Q-values for a batch (no gradients).
    pub fn q_values(&self, obs: &Tensor) -> Result<Tensor, NnError> {
        let z = self.encoder.forward_no_grad(obs)?;
        self.q_head.forward_no_grad(&z)
    }

    fn target_q_values(&self, obs: &Tensor) -> Result<Tensor, NnError> {
        let z = self.target_encoder.forward_no_grad(obs)?;
        self.target_q_head.forward_no_grad(&z)
    }

    pub fn refresh_target(&mut self) {
        self.target_encoder = self.encoder.clone();
        self.target_q_head = self.q_head.clone();
    }

    /// Greedy action for one observation; exact ties go to the lowest
    /// action index.
    pub fn act_greedy(&self, obs: &Tensor) -> Result<usize, NnError> {
        let mut shape = vec![1];
        shape.extend_from_slice(obs.shape());
        let batched = obs.clone().reshaped(shape)?;
        let q = self.q_values(&batched)?;
        Ok(argmax_lowest(q.data()))
    }

    /// ε-greedy action.
    pub fn act(&self, obs: &Tensor, epsilon: f64, rng: &mut ChaCha8Rng) -> Result<usize, NnError> {
        // Always draw the coin so the RNG stream advances identically
        // whatever epsilon is.
        let coin: f64 = rng.gen_range(0.0..1.0);
        if coin < epsilon {
            Ok(rng.gen_range(0..self.num_actions))
        } else {
            self.act_greedy(obs)
        }
    }

    /// Builds the TD loss on `tape`: mean over the batch of
    /// `(Q(o,a) - [r + gamma (1-done) max_a' Q_target(o', a')])^2`,
    /// with the bootstrap term entering as a constant. Returns the loss
    /// node, the live representation node (for attaching regularizers),
    /// and the two live-parameter bindings.
    pub fn td_loss_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        gamma: f64,
    ) -> Result<(NodeId, NodeId, NetworkBinding, NetworkBinding), DqnError> {
        let n = batch.actions.len();
        if n == 0 {
            return Err(DqnError::BadConfig("empty batch".into()));
        }
        let tq = self.target_q_values(&batch.next_obs)?;
        let a = self.num_actions;
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let row = &tq.data()[i * a..(i + 1) * a];
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let bootstrap = if batch.dones[i] { 0.0 } else { gamma * best };
            targets.push(batch.rewards[i] + bootstrap);
        }
        let enc_binding = self.encoder.bind(tape)?;
        let q_binding = self.q_head.bind(tape)?;
        let obs = tape.constant(batch.obs.clone())?;
        let z = self.encoder.forward_with(tape, &enc_binding, obs)?;
        let q = self.q_head.forward_with(tape, &q_binding, z)?;
        let qa = tape.select_actions(q, &batch.actions)?;
        let y = tape.constant(Tensor::from_vec(targets))?;
        let loss = tape.mse(qa, y)?;
        Ok((loss, z, enc_binding, q_binding))
    }
}

pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// The base learner: network pair, config, optimizer.
pub struct DqnAgent {
    pub net: EncoderQNet,
    pub config: AgentConfig,
    pub optimizer: AdamState,
}

impl DqnAgent {
    pub fn new(encoder: Network, q_head: Network, config: AgentConfig) -> Result<Self, DqnError> {
        config.validate()?;
        if encoder.spec().output_shape() != [config.encoding_dim] {
            return Err(DqnError::BadConfig(format!(
                "encoder emits {:?}, config says encoding_dim {}",
                encoder.spec().output_shape(),
                config.encoding_dim
            )));
        }
        let optimizer = AdamState::new(config.lr);
        Ok(Self { net: EncoderQNet::new(encoder, q_head)?, config, optimizer })
    }

    /// One Adam step on the TD loss over a uniform sample; refreshes the
    /// target copy when `t` hits the period. Returns the loss value.
    pub fn train_step_base(
        &mut self,
        buffer: &ReplayBuffer,
        t: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, DqnError> {
        let batch = buffer.sample(self.config.batch_size, rng)?;
        let mut tape = Tape::new();
        let (loss, _z, enc_b, q_b) = self.net.td_loss_on_tape(&mut tape, &batch, self.config.gamma)?;
        let loss_value = tape.value(loss).scalar_value();
        tape.backward(loss)?;
        let mut grads = enc_b.grads(&tape)?;
        grads.extend(q_b.grads(&tape)?);
        adam_step_over(
            &mut self.optimizer,
            &mut [&mut self.net.encoder, &mut self.net.q_head],
            &grads,
        )?;
        if t % self.config.target_update_period == 0 {
            self.net.refresh_target();
        }
        Ok(loss_value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;
    use crate::nn::Parameterized;

    fn tiny_agent(lr: f64) -> DqnAgent {
        let mut rng = derive_rng(100, "agent-init");
        let enc = Network::new(vector_encoder_spec(3, 4).unwrap(), &mut rng).unwrap();
        let qh = Network::new(q_head_spec(4, 2).unwrap(), &mut rng).unwrap();
        let config = AgentConfig { encoding_dim: 4, lr, ..AgentConfig::default() };
        DqnAgent::new(enc, qh, config).unwrap()
    }

    #[test]
    fn epsilon_schedule_endpoints() {
        let c = AgentConfig::default();
        assert_eq!(c.epsilon_at(0), 1.0);
        assert!((c.epsilon_at(5000) - 0.05).abs() < 1e-12);
        assert_eq!(c.epsilon_at(20_000), 0.05);
        // Exponential: at half the decay steps, sqrt(start * end).
        let mid = c.epsilon_at(2500);
        assert!((mid - (0.05f64).sqrt() * 1.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut c = AgentConfig::default();
        c.gamma = 1.0;
        assert!(c.validate().is_err());
        let mut c = AgentConfig::default();
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = AgentConfig::default();
        c.replay_capacity = 10;
        c.batch_size = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn epsilon_one_is_uniform() {
        let agent = tiny_agent(0.001);
        let obs = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        let mut rng = derive_rng(1, "uniform");
        let mut counts = [0usize; 2];
        let n = 10_000;
        for _ in 0..n {
            counts[agent.net.act(&obs, 1.0, &mut rng).unwrap()] += 1;
        }
        // Chi-squared with 1 dof; 10.83 is the 0.1% critical value.
        let expected = n as f64 / 2.0;
        let chi2: f64 = counts
            .iter()
            .map(|c| (*c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 10.83, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn greedy_action_and_tie_break() {
        assert_eq!(argmax_lowest(&[0.1, 0.9]), 1);
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.2, 0.7, 0.7]), 1);
    }

    #[test]
    fn replay_ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(3);
        let t = |r: f64| StoredTransition {
            obs: Tensor::from_vec(vec![r]),
            action: 0,
            reward: r,
            next_obs: Tensor::from_vec(vec![r]),
            done: false,
        };
        for i in 0..5 {
            buf.push(t(i as f64));
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| buf.get(i).reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 2.0]);
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(8);
        for i in 0..8 {
            buf.push(StoredTransition {
                obs: Tensor::from_vec(vec![i as f64]),
                action: 0,
                reward: i as f64,
                next_obs: Tensor::from_vec(vec![0.0]),
                done: false,
            });
        }
        let mut rng = derive_rng(2, "replay");
        let mut counts = [0usize; 8];
        let draws = 16_000;
        for _ in 0..draws / 4 {
            let b = buf.sample(4, &mut rng).unwrap();
            for r in b.rewards {
                counts[r as usize] += 1;
            }
        }
        let expected = draws as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|c| (*c as f64 - expected).powi(2) / expected)
            .sum();
        // 7 dof, 0.1% critical value 24.32.
        assert!(chi2 < 24.32, "chi2 = {chi2}");
    }

    #[test]
    fn underfull_buffer_is_an_error() {
        let buf = ReplayBuffer::new(10);
        let mut rng = derive_rng(0, "r");
        assert!(matches!(
            buf.sample(4, &mut rng),
            Err(DqnError::BufferUnderfull { have: 0, need: 4 })
        ));
    }

    #[test]
    fn td_loss_terminal_cases() {
        let agent = tiny_agent(0.001);
        let mk = || Batch {
            obs: Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap(),
            actions: vec![0],
            rewards: vec![1.0],
            next_obs: Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap(),
            dones: vec![true],
        };
        let batch = mk();
        let mut tape = Tape::new();
        let (loss, _, _, _) = agent.net.td_loss_on_tape(&mut tape, &batch, 0.99).unwrap();
        let q = agent.net.q_values(&batch.obs).unwrap().data()[0];
        let want = (q - 1.0) * (q - 1.0);
        assert!((tape.value(loss).scalar_value() - want).abs() < 1e-12);
    }

    #[test]
    fn overfit_single_transition() {
        let mut agent = tiny_agent(0.01);
        let mut buf = ReplayBuffer::new(10);
        buf.push(StoredTransition {
            obs: Tensor::from_vec(vec![0.5, -0.2, 0.9]),
            action: 1,
            reward: 1.0,
            next_obs: Tensor::from_vec(vec![0.0, 0.0, 0.0]),
            done: true,
        });
        agent.config.batch_size = 1;
        let mut rng = derive_rng(3, "overfit");
        let mut losses = Vec::new();
        for t in 1..=500 {
            losses.push(agent.train_step_base(&buf, t, &mut rng).unwrap());
        }
        assert!(losses[499] < 1e-3, "final loss {}", losses[499]);
        // Monotone trend: late-window mean far below early-window mean.
        let early: f64 = losses[..50].iter().sum::<f64>() / 50.0;
        let late: f64 = losses[450..].iter().sum::<f64>() / 50.0;
        assert!(late < early * 0.01);
    }

    #[test]
    fn target_refresh_only_on_period() {
        let mut agent = tiny_agent(0.01);
        let mut buf = ReplayBuffer::new(10);
        buf.push(StoredTransition {
            obs: Tensor::from_vec(vec![0.1, 0.1, 0.1]),
            action: 0,
            reward: 0.5,
            next_obs: Tensor::from_vec(vec![0.2, 0.2, 0.2]),
            done: false,
        });
        agent.config.batch_size = 1;
        agent.config.target_update_period = 10;
        let mut rng = derive_rng(4, "target");
        let snapshot = |a: &DqnAgent| a.net.target_encoder.parameters()[0].data().to_vec();
        let before = snapshot(&agent);
        for t in 1..=9 {
            agent.train_step_base(&buf, t, &mut rng).unwrap();
            assert_eq!(snapshot(&agent), before, "refreshed early at t={t}");
        }
        agent.train_step_base(&buf, 10, &mut rng).unwrap();
        assert_eq!(snapshot(&agent), agent.net.encoder.parameters()[0].data());
    }

    #[test]
    fn encoder_output_is_unit_norm() {
        let agent = tiny_agent(0.001);
        let obs = Tensor::new(vec![2, 3], vec![0.3, 1.0, -2.0, 5.0, 0.0, 0.1]).unwrap();
        let z = agent.net.encoder.forward_no_grad(&obs).unwrap();
        for row in z.data().chunks(4) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_encoder_shapes() {
        let spec = pixel_encoder_spec(3, 8, 8, 16).unwrap();
        assert_eq!(spec.output_shape(), &[16]);
        let spec = pixel_encoder_spec(1, 40, 90, 16).unwrap();
        assert_eq!(spec.output_shape(), &[16]);
    }
}
