use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Env, EnvError, Transition};
use crate::nn::Tensor;

pub const TAU: f64 = 0.02;
const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
const POLE_HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = MASS_POLE * POLE_HALF_LENGTH;
const FORCE_MAG: f64 = 10.0;
const X_THRESHOLD: f64 = 2.4;
const THETA_THRESHOLD: f64 = 12.0 * std::f64::consts::PI / 180.0;
const MAX_STEPS: usize = 200;

pub const FRAME_H: usize = 40;
pub const FRAME_W: usize = 90;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CartFace {
    /// `[x, x_dot, theta, theta_dot]`
    Vector,
    /// Difference between consecutive cart-centered frames, `[1, 40, 90]`.
    Pixel,
}

/// Classic pole balancing. Integration is symplectic (velocities first),
/// and the stored velocities are the exact finite differences of the
/// stored positions, `(x' - x) / tau`. That makes velocity reconstruction
/// from stacked position frames bitwise exact, which the cross-face
/// observation checks rely on.
pub struct CartPole {
    face: CartFace,
    // state: x, x_dot, theta, theta_dot
    s: [f64; 4],
    steps: usize,
    done: bool,
    started: bool,
    prev_frame: Vec<f64>,
}

impl CartPole {
    pub fn new(face: CartFace) -> Self {
        Self {
            face,
            s: [0.0; 4],
            steps: 0,
            done: false,
            started: false,
            prev_frame: vec![0.0; FRAME_H * FRAME_W],
        }
    }

    pub fn state(&self) -> [f64; 4] {
        self.s
    }

    fn render_frame(&self) -> Vec<f64> {
        let mut frame = vec![0.0; FRAME_H * FRAME_W];
        // Cart-centered crop: the cart body sits at the horizontal middle,
        // so only the pole angle and frame-to-frame motion carry signal.
        let cx = (FRAME_W / 2) as i64;
        let cart_top = 30i64;
        for r in cart_top..cart_top + 5 {
            for c in cx - 8..cx + 8 {
                frame[r as usize * FRAME_W + c as usize] = 1.0;
            }
        }
        // Pole: ~25 px corresponds to the full pole length.
        let theta = self.s[2];
        for i in 1..=25i64 {
            let r = cart_top - (i as f64 * theta.cos()).round() as i64;
            let c = cx + (i as f64 * theta.sin()).round() as i64;
            if r >= 0 && c >= 0 && (r as usize) < FRAME_H && (c as usize) < FRAME_W {
                frame[r as usize * FRAME_W + c as usize] = 1.0;
            }
        }
        frame
    }

    fn obs(&mut self) -> Tensor {
        match self.face {
            CartFace::Vector => Tensor::from_vec(self.s.to_vec()),
            CartFace::Pixel => {
                let frame = self.render_frame();
                let diff: Vec<f64> = frame
                    .iter()
                    .zip(&self.prev_frame)
                    .map(|(a, b)| a - b)
                    .collect();
                self.prev_frame = frame;
                Tensor::new(vec![1, FRAME_H, FRAME_W], diff).expect("frame shape")
            }
        }
    }
}

impl Env for CartPole {
    fn obs_shape(&self) -> Vec<usize> {
        match self.face {
            CartFace::Vector => vec![4],
            CartFace::Pixel => vec![1, FRAME_H, FRAME_W],
        }
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        MAX_STEPS
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Tensor, EnvError> {
        for v in &mut self.s {
            *v = rng.gen_range(-0.05..0.05);
        }
        self.steps = 0;
        self.done = false;
        self.started = true;
        self.prev_frame = vec![0.0; FRAME_H * FRAME_W];
        Ok(self.obs())
    }

    fn step(&mut self, action: usize) -> Result<Transition, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action >= 2 {
            return Err(EnvError::InvalidAction { got: action, num: 2 });
        }
        let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
        let [x, x_dot, theta, theta_dot] = self.s;
        let (sin_t, cos_t) = theta.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin_t) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin_t - cos_t * temp)
            / (POLE_HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos_t * cos_t / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos_t / TOTAL_MASS;
        // Velocities first, then positions from the new velocities; the
        // stored velocity is then re-derived from the stored positions so
        // the two are consistent to the last bit.
        let x_dot_new = x_dot + TAU * x_acc;
        let theta_dot_new = theta_dot + TAU * theta_acc;
        let x_new = x + TAU * x_dot_new;
        let theta_new = theta + TAU * theta_dot_new;
        self.s = [
            x_new,
            (x_new - x) / TAU,
            theta_new,
            (theta_new - theta) / TAU,
        ];
        self.steps += 1;
        let failed = self.s[0].abs() > X_THRESHOLD || self.s[2].abs() > THETA_THRESHOLD;
        let truncated = !failed && self.steps >= MAX_STEPS;
        if failed || truncated {
            self.done = true;
        }
        Ok(Transition { obs: self.obs(), reward: 1.0, done: self.done, truncated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;

    fn from_state(s: [f64; 4], face: CartFace) -> CartPole {
        let mut env = CartPole::new(face);
        env.s = s;
        env.started = true;
        env
    }

    #[test]
    fn golden_step_from_rest() {
        let mut env = from_state([0.0; 4], CartFace::Vector);
        let t = env.step(1).unwrap();
        let s = env.state();
        assert!((s[1] - 0.19512).abs() < 5e-6, "x_dot = {}", s[1]);
        assert!((s[3] - (-0.29268)).abs() < 5e-6, "theta_dot = {}", s[3]);
        assert_eq!(t.reward, 1.0);
        assert!(!t.done);
    }

    #[test]
    fn stored_velocity_is_exact_position_difference() {
        let mut env = CartPole::new(CartFace::Vector);
        env.reset(&mut derive_rng(3, "cp")).unwrap();
        let mut rng = derive_rng(4, "cp-act");
        let mut prev = env.state();
        for _ in 0..50 {
            use rand::Rng;
            let t = env.step(rng.gen_range(0..2)).unwrap();
            let s = env.state();
            assert_eq!(s[1], (s[0] - prev[0]) / TAU);
            assert_eq!(s[3], (s[2] - prev[2]) / TAU);
            prev = s;
            if t.done {
                env.reset(&mut rng).unwrap();
                prev = env.state();
            }
        }
    }

    #[test]
    fn reset_bounds_and_determinism() {
        let mut env = CartPole::new(CartFace::Vector);
        let a = env.reset(&mut derive_rng(8, "cp")).unwrap();
        assert!(env.state().iter().all(|v| v.abs() < 0.05));
        let b = env.reset(&mut derive_rng(8, "cp")).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn angle_threshold_terminates() {
        let mut env = from_state([0.0, 0.0, 0.2, 0.0], CartFace::Vector);
        // Past 12 degrees (0.2094 rad) within a couple of falls.
        let mut done = false;
        for _ in 0..20 {
            let t = env.step(0).unwrap();
            if t.done {
                done = true;
                break;
            }
        }
        assert!(done);
        assert!(env.state()[2].abs() > THETA_THRESHOLD);
    }

    #[test]
    fn step_cap_is_200() {
        // Alternate actions around upright; if the pole survives, the
        // episode must still end at 200 steps.
        let mut env = CartPole::new(CartFace::Vector);
        env.reset(&mut derive_rng(12, "cap")).unwrap();
        let mut n = 0;
        loop {
            let a = if env.state()[2] > 0.0 { 1 } else { 0 };
            let t = env.step(a).unwrap();
            n += 1;
            if t.done {
                break;
            }
        }
        assert!(n <= MAX_STEPS);
        if n == MAX_STEPS {
            assert!(env.state()[0].abs() <= X_THRESHOLD);
        }
    }

    #[test]
    fn difference_frames_start_from_zero_and_cancel() {
        let mut env = CartPole::new(CartFace::Pixel);
        let first = env.reset(&mut derive_rng(1, "px")).unwrap();
        assert_eq!(first.shape(), &[1, FRAME_H, FRAME_W]);
        // First emission is frame minus zeros: values in {0, 1}.
        assert!(first.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(first.data().iter().any(|v| *v == 1.0));
        // A frozen state yields an all-zero difference.
        let mut still = from_state([0.0; 4], CartFace::Pixel);
        still.prev_frame = still.render_frame();
        let before = still.prev_frame.clone();
        still.s = [0.0; 4];
        let _ = before;
        let obs = still.obs();
        assert!(obs.data().iter().all(|v| *v == 0.0));
        // Difference values stay within [-1, 1].
        let mut env = CartPole::new(CartFace::Pixel);
        env.reset(&mut derive_rng(2, "px")).unwrap();
        for _ in 0..30 {
            let t = env.step(1).unwrap();
            assert!(t.obs.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            if t.done {
                break;
            }
        }
    }
}
