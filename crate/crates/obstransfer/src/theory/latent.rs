use nalgebra::{DMatrix, DVector};

use super::mdp::TabularMDP;
use super::rep::RepMap;
use super::{TheoryError, PINV_CUTOFF};

/// A strictly linear latent model over a `dim`-dimensional representation:
/// per action, a `dim x dim` transition matrix and a `dim` reward vector
/// (no bias terms), so `z' ~ P_a z` and `r ~ <R_a, z>`.
#[derive(Clone, Debug)]
pub struct TabularLatentModel {
    dim: usize,
    num_actions: usize,
    p_hat: Vec<DMatrix<f64>>,
    r_hat: Vec<DVector<f64>>,
}

impl TabularLatentModel {
    /// Zero-initialized model; fill in with the setters or use
    /// [`TabularLatentModel::fit_least_squares`].
    pub fn new(dim: usize, num_actions: usize) -> Self {
        Self {
            dim,
            num_actions,
            p_hat: vec![DMatrix::zeros(dim, dim); num_actions],
            r_hat: vec![DVector::zeros(dim); num_actions],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn transition(&self, a: usize) -> &DMatrix<f64> {
        &self.p_hat[a]
    }

    pub fn reward_vector(&self, a: usize) -> &DVector<f64> {
        &self.r_hat[a]
    }

    pub fn set_transition(&mut self, a: usize, p: DMatrix<f64>) {
        assert_eq!((p.nrows(), p.ncols()), (self.dim, self.dim));
        self.p_hat[a] = p;
    }

    pub fn set_reward(&mut self, a: usize, r: DVector<f64>) {
        assert_eq!(r.len(), self.dim);
        self.r_hat[a] = r;
    }

    pub fn predict_next(&self, a: usize, z: &[f64]) -> DVector<f64> {
        &self.p_hat[a] * DVector::from_column_slice(z)
    }

    pub fn predict_reward(&self, a: usize, z: &[f64]) -> f64 {
        self.r_hat[a].dot(&DVector::from_column_slice(z))
    }

    /// Per-action least-squares fit of the latent dynamics: with feature
    /// matrix `Phi` (one row per state) and targets `Y_a` (row s is the
    /// expected next feature row from (s, a)), solve `P_a = (Phi^+ Y_a)^T`
    /// and `R_a = Phi^+ r_a` through an SVD pseudo-inverse.
    pub fn fit_least_squares(m: &TabularMDP, rep: &RepMap) -> Result<Self, TheoryError> {
        if rep.num_states() != m.num_states() {
            return Err(TheoryError::Precondition(
                "representation and MDP disagree on the state count".into(),
            ));
        }
        let (ns, na, d) = (m.num_states(), m.num_actions(), rep.dim());
        let phi = DMatrix::from_fn(ns, d, |s, j| rep.phi_row(s)[j]);
        let svd = phi.svd(true, true);
        let sigma_max = svd.singular_values.max();
        if sigma_max == 0.0 {
            return Err(TheoryError::RankDeficient);
        }
        let pinv = svd
            .pseudo_inverse(PINV_CUTOFF * sigma_max)
            .map_err(|_| TheoryError::RankDeficient)?;
        let mut model = Self::new(d, na);
        for a in 0..na {
            let y = DMatrix::from_fn(ns, d, |s, j| {
                (0..ns).map(|s2| m.prob(s, a, s2) * rep.phi_row(s2)[j]).sum()
            });
            let r = DVector::from_fn(ns, |s, _| m.reward(s, a));
            model.p_hat[a] = (&pinv * y).transpose();
            model.r_hat[a] = &pinv * r;
        }
        Ok(model)
    }
}

/// Worst-case model errors over all state-action pairs: `eps_p` is the
/// Euclidean distance between the expected next feature vector and the
/// model's prediction, `eps_r` the absolute reward error.
pub fn model_sufficiency_eps(
    m: &TabularMDP,
    rep: &RepMap,
    model: &TabularLatentModel,
) -> (f64, f64) {
    let (ns, na, d) = (m.num_states(), m.num_actions(), rep.dim());
    let mut eps_p = 0.0f64;
    let mut eps_r = 0.0f64;
    for s in 0..ns {
        for a in 0..na {
            let pred = model.predict_next(a, rep.phi_row(s));
            let mut dist_sq = 0.0;
            for j in 0..d {
                let truth: f64 = (0..ns).map(|s2| m.prob(s, a, s2) * rep.phi_row(s2)[j]).sum();
                dist_sq += (truth - pred[j]).powi(2);
            }
            eps_p = eps_p.max(dist_sq.sqrt());
            eps_r = eps_r.max((m.reward(s, a) - model.predict_reward(a, rep.phi_row(s))).abs());
        }
    }
    (eps_p, eps_r)
}

/// Deterministic class-level MDP induced by rolling the latent model and
/// snapping each predicted feature vector to the nearest class
/// representative (ties to the lowest class index). Rewards are the
/// model's linear reward predictions at the representatives.
pub(crate) fn snapped_latent_mdp(
    m: &TabularMDP,
    rep: &RepMap,
    model: &TabularLatentModel,
) -> Result<TabularMDP, TheoryError> {
    let (nc, na) = (rep.num_classes(), m.num_actions());
    let mut p = vec![0.0; nc * na * nc];
    let mut r = vec![0.0; nc * na];
    for c in 0..nc {
        for a in 0..na {
            let pred = model.predict_next(a, rep.rep(c));
            let next = nearest_class(rep, pred.as_slice());
            p[(c * na + a) * nc + next] = 1.0;
            r[c * na + a] = model.predict_reward(a, rep.rep(c));
        }
    }
    TabularMDP::new(nc, na, p, r, m.gamma())
}

pub(crate) fn nearest_class(rep: &RepMap, z: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..rep.num_classes() {
        let d: f64 = rep
            .rep(c)
            .iter()
            .zip(z)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Largest slope of a per-class value table over the representative
/// geometry: `max |v(c) - v(c')| / ||rep_c - rep_c'||` over class pairs.
pub(crate) fn lipschitz_over_reps(rep: &RepMap, v: &[f64]) -> f64 {
    let nc = rep.num_classes();
    let mut lip = 0.0f64;
    for c in 0..nc {
        for c2 in c + 1..nc {
            let dist: f64 = rep
                .rep(c)
                .iter()
                .zip(rep.rep(c2))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if dist > 0.0 {
                lip = lip.max((v[c] - v[c2]).abs() / dist);
            }
        }
    }
    lip
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;
    use crate::theory::mdp::{random_deterministic_mdp, random_stochastic_mdp};
    use rand::Rng;

    #[test]
    fn one_hot_features_fit_exactly() {
        let mut rng = derive_rng(20, "lat-exact");
        for _ in 0..10 {
            let m = random_stochastic_mdp(5, 2, 0.9, &mut rng);
            let rep = RepMap::identity(5);
            let model = TabularLatentModel::fit_least_squares(&m, &rep).unwrap();
            let (eps_p, eps_r) = model_sufficiency_eps(&m, &rep, &model);
            assert!(eps_p < 1e-10, "eps_p {eps_p}");
            assert!(eps_r < 1e-10, "eps_r {eps_r}");
        }
    }

    #[test]
    fn zeroed_reward_head_has_max_reward_error() {
        let m = TabularMDP::new(2, 1, vec![0.0, 1.0, 1.0, 0.0], vec![1.0, 0.25], 0.9).unwrap();
        let rep = RepMap::identity(2);
        let mut model = TabularLatentModel::fit_least_squares(&m, &rep).unwrap();
        model.set_reward(0, DVector::zeros(2));
        let (_, eps_r) = model_sufficiency_eps(&m, &rep, &model);
        assert!((eps_r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pseudo_inverse_matches_normal_equations() {
        let mut rng = derive_rng(21, "lat-pinv");
        let m = random_stochastic_mdp(8, 2, 0.9, &mut rng);
        let rep = RepMap::random_partition(8, 4, 2, &mut rng).unwrap();
        let model = TabularLatentModel::fit_least_squares(&m, &rep).unwrap();
        let phi = DMatrix::from_fn(8, 2, |s, j| rep.phi_row(s)[j]);
        let gram = phi.transpose() * &phi;
        let inv = gram.try_inverse().expect("random features are full rank");
        for a in 0..2 {
            let r = DVector::from_fn(8, |s, _| m.reward(s, a));
            let expected = &inv * phi.transpose() * r;
            let got = model.reward_vector(a);
            assert!((expected - got).amax() < 1e-8);
        }
    }

    #[test]
    fn snapping_recovers_class_closed_dynamics() {
        let mut rng = derive_rng(22, "lat-snap");
        // Injective representation on a deterministic MDP: the snapped
        // latent MDP must reproduce the original transitions and rewards.
        let m = random_deterministic_mdp(4, 2, 0.9, &mut rng);
        let rep = RepMap::identity(4);
        let model = TabularLatentModel::fit_least_squares(&m, &rep).unwrap();
        let latent = snapped_latent_mdp(&m, &rep, &model).unwrap();
        for s in 0..4 {
            for a in 0..2 {
                assert_eq!(latent.successor(s, a), m.successor(s, a));
                assert!((latent.reward(s, a) - m.reward(s, a)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lipschitz_hand_value_and_degenerate_cases() {
        let rep = RepMap::from_matrix(3, 1, &[0.0, 2.0, 0.0]).unwrap();
        // Classes at 0.0 and 2.0; values 1 and 5 give slope 4/2 = 2.
        assert!((lipschitz_over_reps(&rep, &[1.0, 5.0]) - 2.0).abs() < 1e-12);
        let single = RepMap::from_matrix(2, 1, &[1.0, 1.0]).unwrap();
        assert_eq!(lipschitz_over_reps(&single, &[7.0]), 0.0);
    }

    #[test]
    fn all_zero_features_are_rejected() {
        let mut rng = derive_rng(23, "lat-zero");
        let m = random_stochastic_mdp(3, 1, 0.9, &mut rng);
        let rep = RepMap::from_matrix(3, 2, &[0.0; 6]).unwrap();
        assert!(matches!(
            TabularLatentModel::fit_least_squares(&m, &rep),
            Err(TheoryError::RankDeficient)
        ));
        let _ = rng.gen::<u64>();
    }
}
