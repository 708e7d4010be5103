use super::{NnError, Parameterized, Tensor};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam optimizer state over a fixed flat parameter vector. Moment buffers
/// are sized on the first step and must match on every later one.
#[derive(Clone, Debug)]
pub struct AdamState {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, m: Vec::new(), v: Vec::new(), step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One Adam update. `params` and `grads` are parallel tensor lists.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<(), NnError> {
        if params.len() != grads.len()
            || params
                .iter()
                .zip(grads)
                .any(|(p, g)| p.numel() != g.len())
        {
            return Err(NnError::OptimizerMismatch(format!(
                "{} param tensors vs {} grad vectors",
                params.len(),
                grads.len()
            )));
        }
        let total: usize = params.iter().map(|p| p.numel()).sum();
        if self.m.is_empty() {
            self.m = vec![0.0; total];
            self.v = vec![0.0; total];
        } else if self.m.len() != total {
            return Err(NnError::OptimizerMismatch(format!(
                "optimizer tracks {} values, got {}",
                self.m.len(),
                total
            )));
        }
        for g in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite("gradient"));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let mut off = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            let data = p.data_mut();
            for (i, gi) in g.iter().enumerate() {
                let j = off + i;
                self.m[j] = BETA1 * self.m[j] + (1.0 - BETA1) * gi;
                self.v[j] = BETA2 * self.v[j] + (1.0 - BETA2) * gi * gi;
                let mhat = self.m[j] / bc1;
                let vhat = self.v[j] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
            }
            off += g.len();
        }
        Ok(())
    }
}

/// Steps one optimizer jointly over the parameters of several modules.
/// `grads` concatenates per-module gradient lists in the same order.
pub fn adam_step_over(
    state: &mut AdamState,
    modules: &mut [&mut dyn Parameterized],
    grads: &[Vec<f64>],
) -> Result<(), NnError> {
    let mut params: Vec<&mut Tensor> = Vec::new();
    for module in modules.iter_mut() {
        params.extend(module.parameters_mut());
    }
    state.step(&mut params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut st = AdamState::new(0.001);
        st.step(&mut [&mut p], &[vec![0.5]]).unwrap();
        // m-hat = g, v-hat = g^2, so the first update is lr * sign(g).
        assert!((p.data()[0] - (1.0 - 0.001)).abs() < 1e-9);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_grad_still_counts_a_step() {
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let mut st = AdamState::new(0.01);
        st.step(&mut [&mut p], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(st.step_count(), 1);
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn quadratic_descent_converges() {
        // Minimize (x - 3)^2 from x = 0.
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut st = AdamState::new(0.1);
        let mut last = (p.data()[0] - 3.0f64).powi(2);
        for i in 0..200 {
            let g = 2.0 * (p.data()[0] - 3.0);
            st.step(&mut [&mut p], &[vec![g]]).unwrap();
            let cur = (p.data()[0] - 3.0f64).powi(2);
            if i < 10 {
                assert!(cur < last);
            }
            last = cur;
        }
        assert!((p.data()[0] - 3.0).abs() < 0.05);
    }

    #[test]
    fn size_changes_are_rejected() {
        let mut p = Tensor::from_vec(vec![0.0, 0.0]);
        let mut st = AdamState::new(0.01);
        st.step(&mut [&mut p], &[vec![1.0, 1.0]]).unwrap();
        let mut q = Tensor::from_vec(vec![0.0]);
        assert!(matches!(
            st.step(&mut [&mut q], &[vec![1.0]]),
            Err(NnError::OptimizerMismatch(_))
        ));
        assert!(matches!(
            st.step(&mut [&mut p], &[vec![1.0]]),
            Err(NnError::OptimizerMismatch(_))
        ));
    }

    #[test]
    fn non_finite_grads_are_rejected() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut st = AdamState::new(0.01);
        assert!(matches!(
            st.step(&mut [&mut p], &[vec![f64::INFINITY]]),
            Err(NnError::NonFinite(_))
        ));
    }
}
