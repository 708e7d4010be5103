//! Environments with paired observation "faces" over the same latent
//! state: a compact vector face and a richer target face (pixels or a
//! degraded frame stack). Dynamics are deterministic; all randomness is in
//! the reset distribution, which makes cross-face checks exact.

mod broken;
mod cartpole;
mod gridmaze;

pub use broken::{BrokenSensor, DroppedVelocity};
pub use cartpole::{CartFace, CartPole, TAU};
pub use gridmaze::{Face, GoalMode, GridMaze, MazeMap};

use rand_chacha::ChaCha8Rng;

use crate::nn::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    StepAfterDone,
    #[error("step called before the first reset")]
    NotReset,
    #[error("invalid action {got}, environment has {num} actions")]
    InvalidAction { got: usize, num: usize },
    #[error("bad maze map: {0}")]
    BadMap(String),
    #[error("cannot decode observation: {0}")]
    Undecodable(String),
    #[error("bad sensor wrapper: {0}")]
    BadWrapper(String),
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Tensor,
    pub reward: f64,
    pub done: bool,
    /// True when the episode ended only because the step cap was hit, not
    /// because the task reached a terminal state. Learners should still
    /// bootstrap through truncated endings; treating them as terminal
    /// aliases time-remaining into state values.
    pub truncated: bool,
}

pub trait Env {
    /// Observation shape without the batch dimension.
    fn obs_shape(&self) -> Vec<usize>;
    fn num_actions(&self) -> usize;
    /// Step cap per episode; episodes end with `done` at this length.
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Tensor, EnvError>;
    fn step(&mut self, action: usize) -> Result<Transition, EnvError>;
}

#[derive(Clone, Debug, Default)]
pub struct CommutationReport {
    pub pairs_checked: usize,
    pub mismatches: usize,
}

impl CommutationReport {
    pub fn passed(&self, min_pairs: usize) -> bool {
        self.pairs_checked >= min_pairs && self.mismatches == 0
    }
}

/// Checks that the target face determines the source face: runs the two
/// environments in lockstep (identical reset draws and actions) and
/// requires `f(target_obs) == source_obs` and exact reward equality after
/// every step. Steps taken while the target observation still contains
/// pre-episode padding (`skip_initial` steps after each reset) are warmup
/// and not counted.
pub fn check_observation_map(
    source: &mut dyn Env,
    target: &mut dyn Env,
    f: &dyn Fn(&Tensor) -> Result<Tensor, EnvError>,
    pairs: usize,
    skip_initial: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CommutationReport, EnvError> {
    use rand::Rng;
    let mut report = CommutationReport::default();
    let num_actions = source.num_actions();
    while report.pairs_checked < pairs {
        let mut ra = rng.clone();
        let mut rb = rng.clone();
        source.reset(&mut ra)?;
        target.reset(&mut rb)?;
        *rng = ra;
        let mut t = 0;
        loop {
            let action = rng.gen_range(0..num_actions);
            let ts = source.step(action)?;
            let tt = target.step(action)?;
            t += 1;
            if t > skip_initial {
                let mapped = f(&tt.obs)?;
                if mapped.data() != ts.obs.data()
                    || tt.reward != ts.reward
                    || tt.done != ts.done
                    || tt.truncated != ts.truncated
                {
                    report.mismatches += 1;
                }
                report.pairs_checked += 1;
            }
            if ts.done || report.pairs_checked >= pairs {
                break;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;

    #[test]
    fn gridmaze_pixel_face_commutes() {
        let map = MazeMap::default_map();
        let mut source = GridMaze::new(map.clone(), Face::Vector, GoalMode::Resample);
        let mut target = GridMaze::new(map.clone(), Face::Pixel, GoalMode::Resample);
        let f = move |obs: &crate::nn::Tensor| GridMaze::decode_pixel(&map, obs);
        let report = check_observation_map(
            &mut source,
            &mut target,
            &f,
            200,
            0,
            &mut derive_rng(21, "commute-maze"),
        )
        .unwrap();
        assert!(report.passed(200), "{report:?}");
    }

    #[test]
    fn broken_cartpole_commutes_after_warmup() {
        let mut source = CartPole::new(CartFace::Vector);
        let dropped = vec![
            DroppedVelocity { index: 1, position_index: 0, dt: TAU },
            DroppedVelocity { index: 3, position_index: 2, dt: TAU },
        ];
        let target = BrokenSensor::new(Box::new(CartPole::new(CartFace::Vector)), dropped, 2).unwrap();
        let reconstructor = BrokenSensor::new(
            Box::new(CartPole::new(CartFace::Vector)),
            vec![
                DroppedVelocity { index: 1, position_index: 0, dt: TAU },
                DroppedVelocity { index: 3, position_index: 2, dt: TAU },
            ],
            2,
        )
        .unwrap();
        let mut target = target;
        let f = move |obs: &crate::nn::Tensor| reconstructor.reconstruct_base(obs);
        let report = check_observation_map(
            &mut source,
            &mut target,
            &f,
            200,
            1,
            &mut derive_rng(22, "commute-cp"),
        )
        .unwrap();
        assert!(report.passed(200), "{report:?}");
    }
}
