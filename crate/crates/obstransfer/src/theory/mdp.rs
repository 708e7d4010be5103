use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::TheoryError;
use crate::dqn::argmax_lowest;

/// Deterministic per-state action choice.
pub type Policy = Vec<usize>;
/// Row-major `S x A` action-value table.
pub type QTable = Vec<f64>;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct TabularMDP {
    num_states: usize,
    num_actions: usize,
    /// `p[(s * A + a) * S + s']`
    p: Vec<f64>,
    /// `r[s * A + a]`
    r: Vec<f64>,
    gamma: f64,
}

impl TabularMDP {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        p: Vec<f64>,
        r: Vec<f64>,
        gamma: f64,
    ) -> Result<Self, TheoryError> {
        if num_states == 0 || num_actions == 0 {
            return Err(TheoryError::BadMdp("empty state or action set".into()));
        }
        if !(0.0 < gamma && gamma < 1.0) {
            return Err(TheoryError::BadMdp(format!("gamma {gamma} not in (0, 1)")));
        }
        if p.len() != num_states * num_actions * num_states || r.len() != num_states * num_actions
        {
            return Err(TheoryError::BadMdp("table sizes do not match S, A".into()));
        }
        if r.iter().any(|v| !v.is_finite()) || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(TheoryError::BadMdp("non-finite or negative entries".into()));
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = &p[(s * num_actions + a) * num_states..][..num_states];
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(TheoryError::BadMdp(format!(
                        "P[{s},{a},.] sums to {sum}"
                    )));
                }
            }
        }
        Ok(Self { num_states, num_actions, p, r, gamma })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.p[(s * self.num_actions + a) * self.num_states + s2]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.num_actions + a]
    }

    /// True iff every transition row is a point mass.
    pub fn is_deterministic(&self) -> bool {
        self.p.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    /// For deterministic rows, the unique successor.
    pub fn successor(&self, s: usize, a: usize) -> Option<usize> {
        let row = &self.p[(s * self.num_actions + a) * self.num_states..][..self.num_states];
        row.iter().position(|v| *v == 1.0)
    }

    /// `S x S` transition matrix of a fixed policy.
    pub fn policy_transition(&self, policy: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_states, self.num_states, |s, s2| {
            self.prob(s, policy[s], s2)
        })
    }

    pub fn policy_reward(&self, policy: &[usize]) -> DVector<f64> {
        DVector::from_fn(self.num_states, |s, _| self.reward(s, policy[s]))
    }

    /// `S x S` transition matrix of one action applied everywhere.
    pub fn action_transition(&self, a: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_states, self.num_states, |s, s2| self.prob(s, a, s2))
    }

    /// One exact Bellman-optimality backup of a Q-table.
    pub fn optimality_backup(&self, q: &[f64]) -> QTable {
        let (ns, na) = (self.num_states, self.num_actions);
        let v: Vec<f64> = (0..ns)
            .map(|s| {
                q[s * na..(s + 1) * na]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut out = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let mut exp = 0.0;
                for s2 in 0..ns {
                    exp += self.prob(s, a, s2) * v[s2];
                }
                out[s * na + a] = self.reward(s, a) + self.gamma * exp;
            }
        }
        out
    }

    /// Greedy policy of a Q-table, ties to the lowest action index.
    pub fn greedy(&self, q: &[f64]) -> Policy {
        (0..self.num_states)
            .map(|s| argmax_lowest(&q[s * self.num_actions..(s + 1) * self.num_actions]))
            .collect()
    }

    /// Serializes to the text format: header `S A gamma`, then one line
    /// `s a r p_0 ... p_{S-1}` per state-action pair.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.num_states, self.num_actions, self.gamma);
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                out.push_str(&format!("{s} {a} {}", self.reward(s, a)));
                for s2 in 0..self.num_states {
                    out.push_str(&format!(" {}", self.prob(s, a, s2)));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TheoryError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| TheoryError::Parse("empty file".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 3 {
            return Err(TheoryError::Parse(format!(
                "header must be `S A gamma`, got {header:?}"
            )));
        }
        let parse_usize = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| TheoryError::Parse(format!("bad integer {t:?}")))
        };
        let parse_f64 = |t: &str| {
            t.parse::<f64>()
                .map_err(|_| TheoryError::Parse(format!("bad float {t:?}")))
        };
        let ns = parse_usize(head[0])?;
        let na = parse_usize(head[1])?;
        let gamma = parse_f64(head[2])?;
        let mut p = vec![f64::NAN; ns * na * ns];
        let mut r = vec![f64::NAN; ns * na];
        let mut rows = 0;
        for line in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 + ns {
                return Err(TheoryError::Parse(format!(
                    "expected `s a r` plus {ns} probabilities, got {} fields",
                    toks.len()
                )));
            }
            let s = parse_usize(toks[0])?;
            let a = parse_usize(toks[1])?;
            if s >= ns || a >= na {
                return Err(TheoryError::Parse(format!("indices ({s},{a}) out of range")));
            }
            r[s * na + a] = parse_f64(toks[2])?;
            for (s2, t) in toks[3..].iter().enumerate() {
                p[(s * na + a) * ns + s2] = parse_f64(t)?;
            }
            rows += 1;
        }
        if rows != ns * na || r.iter().any(|v| v.is_nan()) {
            return Err(TheoryError::Parse(format!(
                "need {} state-action lines, got {rows}",
                ns * na
            )));
        }
        Self::new(ns, na, p, r, gamma)
    }
}

/// Exact policy evaluation: solve `(I - gamma P_pi) V = R_pi`, then one
/// backup to get Q.
pub fn policy_eval(m: &TabularMDP, policy: &[usize]) -> Result<QTable, TheoryError> {
    if policy.len() != m.num_states() || policy.iter().any(|a| *a >= m.num_actions()) {
        return Err(TheoryError::BadMdp("policy does not match MDP".into()));
    }
    let ns = m.num_states();
    let p_pi = m.policy_transition(policy);
    let r_pi = m.policy_reward(policy);
    let lhs = DMatrix::identity(ns, ns) - p_pi * m.gamma();
    let v = lhs
        .lu()
        .solve(&r_pi)
        .ok_or_else(|| TheoryError::BadMdp("singular evaluation system".into()))?;
    let na = m.num_actions();
    let mut q = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let mut exp = 0.0;
            for s2 in 0..ns {
                exp += m.prob(s, a, s2) * v[s2];
            }
            q[s * na + a] = m.reward(s, a) + m.gamma() * exp;
        }
    }
    Ok(q)
}

/// Exact policy iteration from the all-zeros policy.
pub fn policy_iteration(m: &TabularMDP) -> Result<(Policy, QTable), TheoryError> {
    let mut policy: Policy = vec![0; m.num_states()];
    loop {
        let q = policy_eval(m, &policy)?;
        let improved = m.greedy(&q);
        if improved == policy {
            return Ok((policy, q));
        }
        policy = improved;
    }
}

/// Value iteration to a sup-norm fixed-point tolerance of 1e-13.
pub fn value_iteration(m: &TabularMDP) -> QTable {
    let mut q = vec![0.0; m.num_states() * m.num_actions()];
    for _ in 0..1_000_000 {
        let next = m.optimality_backup(&q);
        let delta = q
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next;
        if delta < 1e-13 {
            break;
        }
    }
    q
}

/// Rewards uniform in [0,1]; transition rows uniform on the simplex
/// (Dirichlet(1) via normalized exponentials).
pub fn random_stochastic_mdp(
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> TabularMDP {
    let mut p = Vec::with_capacity(num_states * num_actions * num_states);
    for _ in 0..num_states * num_actions {
        let mut row: Vec<f64> = (0..num_states)
            .map(|_| -f64::ln(rng.gen_range(f64::MIN_POSITIVE..1.0)))
            .collect();
        let sum: f64 = row.iter().sum();
        for v in &mut row {
            *v /= sum;
        }
        // Force exact normalization so validation is bit-tight.
        let sum2: f64 = row.iter().sum();
        let last = row.len() - 1;
        row[last] += 1.0 - sum2;
        p.extend(row);
    }
    let r: Vec<f64> = (0..num_states * num_actions)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    TabularMDP::new(num_states, num_actions, p, r, gamma).expect("generated rows are stochastic")
}

/// Rewards uniform in [0,1]; each (s,a) jumps to one uniform successor.
pub fn random_deterministic_mdp(
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> TabularMDP {
    let mut p = vec![0.0; num_states * num_actions * num_states];
    for sa in 0..num_states * num_actions {
        let s2 = rng.gen_range(0..num_states);
        p[sa * num_states + s2] = 1.0;
    }
    let r: Vec<f64> = (0..num_states * num_actions)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    TabularMDP::new(num_states, num_actions, p, r, gamma).expect("one-hot rows are stochastic")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;

    fn two_state_chain(gamma: f64) -> TabularMDP {
        // Action 0: stay; action 1: move to the other state. Reward 1 only
        // for being in state 1 (any action from state 1).
        let mut p = vec![0.0; 2 * 2 * 2];
        let mut set = |s: usize, a: usize, s2: usize| p[(s * 2 + a) * 2 + s2] = 1.0;
        set(0, 0, 0);
        set(0, 1, 1);
        set(1, 0, 1);
        set(1, 1, 0);
        let r = vec![0.0, 0.0, 1.0, 1.0];
        TabularMDP::new(2, 2, p, r, gamma).unwrap()
    }

    #[test]
    fn single_state_geometric_series() {
        let m = TabularMDP::new(1, 1, vec![1.0], vec![1.0], 0.5).unwrap();
        let q = policy_eval(&m, &[0]).unwrap();
        assert!((q[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rewards_zero_values() {
        let mut rng = derive_rng(1, "mdp");
        let mut m = random_stochastic_mdp(5, 3, 0.9, &mut rng);
        m.r.iter_mut().for_each(|v| *v = 0.0);
        let q = policy_eval(&m, &[0, 1, 2, 0, 1]).unwrap();
        assert!(q.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn eval_matches_iterative_bellman() {
        let mut rng = derive_rng(2, "mdp-eval");
        use rand::Rng;
        for _ in 0..50 {
            let ns = rng.gen_range(2..=8);
            let na = rng.gen_range(1..=3);
            let m = random_stochastic_mdp(ns, na, 0.9, &mut rng);
            let policy: Vec<usize> = (0..ns).map(|_| rng.gen_range(0..na)).collect();
            let exact = policy_eval(&m, &policy).unwrap();
            // Iterative oracle: repeated policy backup.
            let mut q = vec![0.0; ns * na];
            for _ in 0..2000 {
                let mut next = vec![0.0; ns * na];
                for s in 0..ns {
                    for a in 0..na {
                        let mut exp = 0.0;
                        for s2 in 0..ns {
                            exp += m.prob(s, a, s2) * q[s2 * na + policy[s2]];
                        }
                        next[s * na + a] = m.reward(s, a) + m.gamma() * exp;
                    }
                }
                q = next;
            }
            let err = exact
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "err {err}");
        }
    }

    #[test]
    fn chain_optimum_moves_toward_reward() {
        let m = two_state_chain(0.9);
        let (pi, q) = policy_iteration(&m).unwrap();
        assert_eq!(pi[0], 1); // move to state 1
        assert_eq!(pi[1], 0); // stay there
        let v1 = 1.0 / (1.0 - 0.9);
        assert!((q[1 * 2 + 0] - v1).abs() < 1e-9);
    }

    #[test]
    fn pi_and_vi_agree_on_random_mdps() {
        let mut rng = derive_rng(3, "pi-vi");
        use rand::Rng;
        for i in 0..100 {
            let ns = rng.gen_range(2..=8);
            let na = rng.gen_range(1..=3);
            let gamma = if i % 2 == 0 { 0.5 } else { 0.9 };
            let m = if i % 3 == 0 {
                random_deterministic_mdp(ns, na, gamma, &mut rng)
            } else {
                random_stochastic_mdp(ns, na, gamma, &mut rng)
            };
            let (_, q_pi) = policy_iteration(&m).unwrap();
            let q_vi = value_iteration(&m);
            let err = q_pi
                .iter()
                .zip(&q_vi)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-8, "instance {i}: err {err}");
        }
    }

    #[test]
    fn validation_rejects_bad_tables() {
        assert!(TabularMDP::new(1, 1, vec![0.5], vec![0.0], 0.9).is_err()); // row sum
        assert!(TabularMDP::new(1, 1, vec![1.0], vec![f64::NAN], 0.9).is_err());
        assert!(TabularMDP::new(1, 1, vec![1.0], vec![0.0], 1.0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let m = two_state_chain(0.75);
        let text = m.to_text();
        let back = TabularMDP::from_text(&text).unwrap();
        assert_eq!(back.p, m.p);
        assert_eq!(back.r, m.r);
        assert_eq!(back.gamma, m.gamma);
        assert!(TabularMDP::from_text("2 2\n").is_err());
        assert!(TabularMDP::from_text("1 1 0.9\n0 0 1.0 0.5\n").is_err());
    }

    #[test]
    fn deterministic_generator_is_deterministic() {
        let mut rng = derive_rng(4, "det");
        let m = random_deterministic_mdp(6, 2, 0.9, &mut rng);
        assert!(m.is_deterministic());
        for s in 0..6 {
            for a in 0..2 {
                assert!(m.successor(s, a).is_some());
            }
        }
    }
}
