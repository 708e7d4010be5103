//! Latent transition and reward models over encoder representations, the
//! losses that train them, the delayed "stable" encoder they are fitted
//! against, and a bit-exact checkpoint format for moving them between
//! tasks.

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Network, NnError, NodeId, Parameterized, Tape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_EXTENSION: &str = "ckpt.json";

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint holds a {found:?}, expected {expected:?}")]
    KindMismatch { found: String, expected: String },
    #[error("checkpoint shapes do not match consumer: {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// One affine transition map (d->d) and one affine reward map (d->1) per
/// action, over unit-norm latent representations.
#[derive(Clone, Debug)]
pub struct LatentModel {
    encoding_dim: usize,
    num_actions: usize,
    transition_w: Vec<Tensor>,
    transition_b: Vec<Tensor>,
    reward_w: Vec<Tensor>,
    reward_b: Vec<Tensor>,
}

/// The model's parameter nodes on one tape.
pub struct LatentBinding {
    tw: Vec<NodeId>,
    tb: Vec<NodeId>,
    rw: Vec<NodeId>,
    rb: Vec<NodeId>,
}

impl LatentModel {
    pub fn new(encoding_dim: usize, num_actions: usize, rng: &mut impl Rng) -> Self {
        assert!(encoding_dim >= 1 && num_actions >= 1);
        let d = encoding_dim;
        let tb_bound = (6.0 / (2 * d) as f64).sqrt();
        let rb_bound = (6.0 / (d + 1) as f64).sqrt();
        let mut transition_w = Vec::new();
        let mut transition_b = Vec::new();
        let mut reward_w = Vec::new();
        let mut reward_b = Vec::new();
        for _ in 0..num_actions {
            let w: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-tb_bound..tb_bound)).collect();
            transition_w.push(Tensor::new(vec![d, d], w).expect("shape"));
            transition_b.push(Tensor::from_vec(vec![0.0; d]));
            let rw: Vec<f64> = (0..d).map(|_| rng.gen_range(-rb_bound..rb_bound)).collect();
            reward_w.push(Tensor::new(vec![1, d], rw).expect("shape"));
            reward_b.push(Tensor::from_vec(vec![0.0]));
        }
        Self { encoding_dim, num_actions, transition_w, transition_b, reward_w, reward_b }
    }

    pub fn encoding_dim(&self) -> usize {
        self.encoding_dim
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn transition(&self, action: usize) -> (&Tensor, &Tensor) {
        (&self.transition_w[action], &self.transition_b[action])
    }

    pub fn set_transition(&mut self, action: usize, w: Tensor, b: Tensor) -> Result<(), NnError> {
        let d = self.encoding_dim;
        if w.shape() != [d, d] || b.shape() != [d] {
            return Err(NnError::ShapeMismatch(format!(
                "transition map wants [{d},{d}]/[{d}], got {:?}/{:?}",
                w.shape(),
                b.shape()
            )));
        }
        self.transition_w[action] = w;
        self.transition_b[action] = b;
        Ok(())
    }

    pub fn set_reward(&mut self, action: usize, w: Tensor, b: Tensor) -> Result<(), NnError> {
        let d = self.encoding_dim;
        if w.shape() != [1, d] || b.shape() != [1] {
            return Err(NnError::ShapeMismatch(format!(
                "reward map wants [1,{d}]/[1], got {:?}/{:?}",
                w.shape(),
                b.shape()
            )));
        }
        self.reward_w[action] = w;
        self.reward_b[action] = b;
        Ok(())
    }

    /// Row i of the result is `W_{a_i} z_i + b_{a_i}`.
    pub fn predict_next(&self, z: &Tensor, actions: &[usize]) -> Result<Tensor, NnError> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape)?;
        let zn = tape.constant(z.clone())?;
        let out = tape.per_action_affine(zn, &b.tw, &b.tb, actions)?;
        Ok(tape.value(out).clone())
    }

    /// Row i of the result is `<w_{a_i}, z_i> + b_{a_i}`.
    pub fn predict_reward(&self, z: &Tensor, actions: &[usize]) -> Result<Tensor, NnError> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape)?;
        let zn = tape.constant(z.clone())?;
        let out = tape.per_action_affine(zn, &b.rw, &b.rb, actions)?;
        let n = actions.len();
        Ok(tape.value(out).clone().reshaped(vec![n])?)
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<LatentBinding, NnError> {
        self.bind_impl(tape, true)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<LatentBinding, NnError> {
        self.bind_impl(tape, false)
    }

    fn bind_impl(&self, tape: &mut Tape, trainable: bool) -> Result<LatentBinding, NnError> {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let tw = self.transition_w.iter().map(&mut reg).collect::<Result<_, _>>()?;
        let tb = self.transition_b.iter().map(&mut reg).collect::<Result<_, _>>()?;
        let rw = self.reward_w.iter().map(&mut reg).collect::<Result<_, _>>()?;
        let rb = self.reward_b.iter().map(&mut reg).collect::<Result<_, _>>()?;
        Ok(LatentBinding { tw, tb, rw, rb })
    }

    /// Squared prediction-error loss over representations: per-row squared
    /// norm of `predict_next(z_i, a_i) - z_next_i`, averaged over the
    /// batch. The caller chooses whether `z_next` carries gradients
    /// (normally it is wrapped in `stop_gradient`).
    pub fn transition_loss(
        &self,
        tape: &mut Tape,
        binding: &LatentBinding,
        z: NodeId,
        z_next: NodeId,
        actions: &[usize],
    ) -> Result<NodeId, NnError> {
        if actions.is_empty() {
            return Err(NnError::ShapeMismatch("empty batch".into()));
        }
        let pred = tape.per_action_affine(z, &binding.tw, &binding.tb, actions)?;
        let diff = tape.sub(pred, z_next)?;
        tape.row_sum_square_mean(diff)
    }

    /// Mean squared reward residual.
    pub fn reward_loss(
        &self,
        tape: &mut Tape,
        binding: &LatentBinding,
        z: NodeId,
        rewards: &[f64],
        actions: &[usize],
    ) -> Result<NodeId, NnError> {
        if actions.is_empty() {
            return Err(NnError::ShapeMismatch("empty batch".into()));
        }
        let pred = tape.per_action_affine(z, &binding.rw, &binding.rb, actions)?;
        let target = tape.constant(Tensor::new(vec![rewards.len(), 1], rewards.to_vec())?)?;
        tape.mse(pred, target)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CkptError> {
        let mut shapes = Vec::new();
        let mut arrays = Vec::new();
        for t in self.ordered_params() {
            shapes.push(t.shape().to_vec());
            arrays.push(encode_f64(t.data()));
        }
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            kind: "latent_model".into(),
            encoding_dim: self.encoding_dim,
            num_actions: self.num_actions,
            shapes,
            arrays,
        };
        write_checkpoint(&file, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CkptError> {
        let file = read_checkpoint(path)?;
        if file.kind != "latent_model" {
            return Err(CkptError::KindMismatch {
                found: file.kind,
                expected: "latent_model".into(),
            });
        }
        let (d, a) = (file.encoding_dim, file.num_actions);
        if d == 0 || a == 0 {
            return Err(CkptError::Corrupt("zero dimensions".into()));
        }
        let expected: Vec<Vec<usize>> = (0..a)
            .map(|_| vec![d, d])
            .chain((0..a).map(|_| vec![d]))
            .chain((0..a).map(|_| vec![1, d]))
            .chain((0..a).map(|_| vec![1]))
            .collect();
        if file.shapes != expected {
            return Err(CkptError::ShapeMismatch(format!(
                "got {:?} for d={d}, actions={a}",
                file.shapes
            )));
        }
        let mut tensors = decode_arrays(&file)?;
        let mut take = |n: usize| tensors.drain(..n).collect::<Vec<_>>();
        let transition_w = take(a);
        let transition_b = take(a);
        let reward_w = take(a);
        let reward_b = take(a);
        Ok(Self { encoding_dim: d, num_actions: a, transition_w, transition_b, reward_w, reward_b })
    }

    fn ordered_params(&self) -> Vec<&Tensor> {
        self.transition_w
            .iter()
            .chain(&self.transition_b)
            .chain(&self.reward_w)
            .chain(&self.reward_b)
            .collect()
    }
}

impl Parameterized for LatentModel {
    fn parameters(&self) -> Vec<&Tensor> {
        self.ordered_params()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.transition_w
            .iter_mut()
            .chain(&mut self.transition_b)
            .chain(&mut self.reward_w)
            .chain(&mut self.reward_b)
            .collect()
    }
}

impl LatentBinding {
    /// Gradients in the same order as [`Parameterized::parameters`].
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.tw
            .iter()
            .chain(&self.tb)
            .chain(&self.rw)
            .chain(&self.rb)
            .map(|n| tape.grad(*n).to_vec())
            .collect()
    }
}

/// A delayed copy of the live encoder, refreshed on a fixed period and
/// never trained. The latent model is fitted against its representations.
#[derive(Clone, Debug)]
pub struct StableEncoder {
    net: Network,
    period: usize,
}

impl StableEncoder {
    pub fn new(live: &Network, period: usize) -> Self {
        assert!(period >= 1);
        Self { net: live.clone(), period }
    }

    /// Copies the live weights iff `t` is a multiple of the period.
    /// Returns whether a refresh happened.
    pub fn maybe_refresh(&mut self, live: &Network, t: usize) -> bool {
        if t % self.period == 0 {
            self.net = live.clone();
            true
        } else {
            false
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    kind: String,
    encoding_dim: usize,
    num_actions: usize,
    shapes: Vec<Vec<usize>>,
    /// base64 of little-endian 64-bit floats, one entry per shape.
    arrays: Vec<String>,
}

fn encode_f64(data: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f64(s: &str) -> Result<Vec<f64>, CkptError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| CkptError::Corrupt(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(CkptError::Corrupt("payload is not whole 64-bit floats".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_checkpoint(file: &CheckpointFile, path: &std::path::Path) -> Result<(), CkptError> {
    let text = serde_json::to_string_pretty(file)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn read_checkpoint(path: &std::path::Path) -> Result<CheckpointFile, CkptError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(CkptError::VersionMismatch {
            found: file.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if file.shapes.len() != file.arrays.len() {
        return Err(CkptError::Corrupt(format!(
            "{} shapes but {} arrays",
            file.shapes.len(),
            file.arrays.len()
        )));
    }
    Ok(file)
}

fn decode_arrays(file: &CheckpointFile) -> Result<Vec<Tensor>, CkptError> {
    let mut out = Vec::new();
    for (shape, arr) in file.shapes.iter().zip(&file.arrays) {
        let data = decode_f64(arr)?;
        let t = Tensor::new(shape.clone(), data)
            .map_err(|e| CkptError::Corrupt(e.to_string()))?;
        if !t.all_finite() {
            return Err(CkptError::Corrupt("non-finite weight".into()));
        }
        out.push(t);
    }
    Ok(out)
}

/// Saves a network's parameters under a caller-chosen kind label.
pub fn save_network(
    net: &Network,
    kind: &str,
    encoding_dim: usize,
    num_actions: usize,
    path: &std::path::Path,
) -> Result<(), CkptError> {
    let params = net.parameters();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        encoding_dim,
        num_actions,
        shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        arrays: params.iter().map(|p| encode_f64(p.data())).collect(),
    };
    write_checkpoint(&file, path)
}

/// Loads parameters saved by [`save_network`] into an architecturally
/// identical network. Kind and every shape must match exactly.
pub fn load_network_into(
    net: &mut Network,
    kind: &str,
    path: &std::path::Path,
) -> Result<(), CkptError> {
    let file = read_checkpoint(path)?;
    if file.kind != kind {
        return Err(CkptError::KindMismatch { found: file.kind, expected: kind.into() });
    }
    let tensors = decode_arrays(&file)?;
    {
        let params = net.parameters();
        if params.len() != tensors.len()
            || params.iter().zip(&tensors).any(|(p, t)| p.shape() != t.shape())
        {
            return Err(CkptError::ShapeMismatch(format!(
                "file shapes {:?}",
                file.shapes
            )));
        }
    }
    for (p, t) in net.parameters_mut().into_iter().zip(tensors) {
        *p = t;
    }
    Ok(())
}
