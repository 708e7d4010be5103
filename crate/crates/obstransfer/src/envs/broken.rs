use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use super::{Env, EnvError, Transition};
use crate::nn::Tensor;

/// A feature removed from the observation that can be re-derived as a
/// finite difference of a surviving position feature across frames.
#[derive(Clone, Copy, Debug)]
pub struct DroppedVelocity {
    /// Index of the removed feature in the base observation.
    pub index: usize,
    /// Index of the position feature it differentiates.
    pub position_index: usize,
    /// Integration timestep of the base environment.
    pub dt: f64,
}

/// Simulates a broken sensor over a vector-face environment: selected
/// features are removed and the agent instead sees the last `k` degraded
/// frames concatenated oldest-first, zero-padded before episode start.
pub struct BrokenSensor {
    inner: Box<dyn Env>,
    dropped: Vec<DroppedVelocity>,
    kept: Vec<usize>,
    k: usize,
    base_dim: usize,
    frames: VecDeque<Vec<f64>>,
}

impl BrokenSensor {
    pub fn new(
        inner: Box<dyn Env>,
        dropped: Vec<DroppedVelocity>,
        k: usize,
    ) -> Result<Self, EnvError> {
        let shape = inner.obs_shape();
        if shape.len() != 1 {
            return Err(EnvError::BadWrapper(format!(
                "base observation must be a flat vector, got {:?}",
                shape
            )));
        }
        let base_dim = shape[0];
        if k == 0 {
            return Err(EnvError::BadWrapper("stack depth must be at least 1".into()));
        }
        if !dropped.is_empty() && k < 2 {
            return Err(EnvError::BadWrapper(
                "reconstructing a velocity needs at least 2 stacked frames".into(),
            ));
        }
        let mut seen = vec![false; base_dim];
        for d in &dropped {
            if d.index >= base_dim || d.position_index >= base_dim {
                return Err(EnvError::BadWrapper(format!(
                    "feature index out of range (dim {base_dim})"
                )));
            }
            if seen[d.index] {
                return Err(EnvError::BadWrapper(format!(
                    "feature {} dropped twice",
                    d.index
                )));
            }
            seen[d.index] = true;
            if d.dt <= 0.0 {
                return Err(EnvError::BadWrapper("timestep must be positive".into()));
            }
        }
        for d in &dropped {
            if seen[d.position_index] {
                return Err(EnvError::BadWrapper(format!(
                    "feature {} is both dropped and used for reconstruction",
                    d.position_index
                )));
            }
        }
        let kept: Vec<usize> = (0..base_dim).filter(|i| !seen[*i]).collect();
        Ok(Self {
            inner,
            dropped,
            kept,
            k,
            base_dim,
            frames: VecDeque::new(),
        })
    }

    pub fn frame_dim(&self) -> usize {
        self.kept.len()
    }

    pub fn stack_depth(&self) -> usize {
        self.k
    }

    fn degrade(&self, full: &[f64]) -> Vec<f64> {
        self.kept.iter().map(|i| full[*i]).collect()
    }

    fn push_frame(&mut self, frame: Vec<f64>) {
        if self.frames.len() == self.k {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    fn stacked_obs(&self) -> Tensor {
        let fd = self.kept.len();
        let mut data = vec![0.0; self.k * fd];
        let pad = self.k - self.frames.len();
        for (i, frame) in self.frames.iter().enumerate() {
            data[(pad + i) * fd..(pad + i + 1) * fd].copy_from_slice(frame);
        }
        Tensor::from_vec(data)
    }

    /// Recovers the base observation from a stacked degraded one: kept
    /// features come from the newest frame, dropped velocities are finite
    /// differences of the two newest frames. Exact from the second step of
    /// an episode onward; before that the stack still contains padding.
    pub fn reconstruct_base(&self, obs: &Tensor) -> Result<Tensor, EnvError> {
        let fd = self.kept.len();
        if obs.shape() != [self.k * fd] {
            return Err(EnvError::Undecodable(format!(
                "expected [{}] stacked observation, got {:?}",
                self.k * fd,
                obs.shape()
            )));
        }
        let newest = &obs.data()[(self.k - 1) * fd..];
        let mut full = vec![0.0; self.base_dim];
        for (col, idx) in self.kept.iter().enumerate() {
            full[*idx] = newest[col];
        }
        for d in &self.dropped {
            // k >= 2 whenever anything is dropped (checked at construction).
            let previous = &obs.data()[(self.k - 2) * fd..(self.k - 1) * fd];
            let col = self
                .kept
                .iter()
                .position(|i| *i == d.position_index)
                .expect("validated at construction");
            full[d.index] = (newest[col] - previous[col]) / d.dt;
        }
        Ok(Tensor::from_vec(full))
    }
}

impl Env for BrokenSensor {
    fn obs_shape(&self) -> Vec<usize> {
        vec![self.k * self.kept.len()]
    }

    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Tensor, EnvError> {
        let obs = self.inner.reset(rng)?;
        self.frames.clear();
        let frame = self.degrade(obs.data());
        self.push_frame(frame);
        Ok(self.stacked_obs())
    }

    fn step(&mut self, action: usize) -> Result<Transition, EnvError> {
        let t = self.inner.step(action)?;
        let frame = self.degrade(t.obs.data());
        self.push_frame(frame);
        Ok(Transition {
            obs: self.stacked_obs(),
            reward: t.reward,
            done: t.done,
            truncated: t.truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;
    use crate::envs::{CartFace, CartPole, Face, GoalMode, GridMaze, MazeMap, TAU};

    fn broken_cartpole(k: usize) -> BrokenSensor {
        BrokenSensor::new(
            Box::new(CartPole::new(CartFace::Vector)),
            vec![
                DroppedVelocity { index: 1, position_index: 0, dt: TAU },
                DroppedVelocity { index: 3, position_index: 2, dt: TAU },
            ],
            k,
        )
        .unwrap()
    }

    #[test]
    fn dimensions_match_stack_and_drop() {
        let env = broken_cartpole(2);
        assert_eq!(env.obs_shape(), vec![4]); // 2 frames x 2 kept features
        let maze = BrokenSensor::new(
            Box::new(GridMaze::new(MazeMap::default_map(), Face::Vector, GoalMode::Resample)),
            vec![],
            3,
        )
        .unwrap();
        assert_eq!(maze.obs_shape(), vec![12]);
    }

    #[test]
    fn velocity_drop_requires_two_frames() {
        let err = BrokenSensor::new(
            Box::new(CartPole::new(CartFace::Vector)),
            vec![DroppedVelocity { index: 1, position_index: 0, dt: TAU }],
            1,
        );
        assert!(matches!(err, Err(EnvError::BadWrapper(_))));
    }

    #[test]
    fn pre_episode_frames_are_zero() {
        let mut env = broken_cartpole(3);
        let obs = env.reset(&mut derive_rng(0, "bs")).unwrap();
        assert_eq!(obs.shape(), &[6]);
        assert_eq!(&obs.data()[0..4], &[0.0; 4]); // two padding frames
        assert!(obs.data()[4..].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn reconstruction_is_exact_after_first_step() {
        let mut degraded = broken_cartpole(2);
        let mut full = CartPole::new(CartFace::Vector);
        let mut ra = derive_rng(6, "bs");
        let mut rb = derive_rng(6, "bs");
        degraded.reset(&mut ra).unwrap();
        full.reset(&mut rb).unwrap();
        let mut rng = derive_rng(7, "bs-act");
        for _ in 0..100 {
            use rand::Rng;
            let a = rng.gen_range(0..2);
            let td = degraded.step(a).unwrap();
            let tf = full.step(a).unwrap();
            assert_eq!(
                degraded.reconstruct_base(&td.obs).unwrap().data(),
                tf.obs.data()
            );
            assert_eq!(td.reward, tf.reward);
            if td.done {
                let mut ra = rng.clone();
                let mut rb = rng.clone();
                degraded.reset(&mut ra).unwrap();
                full.reset(&mut rb).unwrap();
                rng = ra;
                let a0 = rng.gen_range(0..2);
                degraded.step(a0).unwrap();
                full.step(a0).unwrap();
            }
        }
    }
}
