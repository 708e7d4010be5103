use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::mdp::{policy_eval, value_iteration, Policy, QTable, TabularMDP};
use super::TheoryError;

/// Hard ceiling on brute-force policy enumeration (`A^C` policies).
pub const ENUMERATION_CAP: usize = 100_000;

/// Feature rows are rounded to this many decimals before states are
/// grouped into classes, so ties are exact rather than tolerance-based.
const ROUND_DECIMALS: i32 = 12;

fn round_feature(x: f64) -> f64 {
    let scale = 10f64.powi(ROUND_DECIMALS);
    (x * scale).round() / scale
}

/// A state-aggregation representation: states with (rounded-)equal feature
/// rows share a class, and each class carries one representative vector.
#[derive(Clone, Debug)]
pub struct RepMap {
    dim: usize,
    class_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    reps: Vec<Vec<f64>>,
}

impl RepMap {
    /// Builds from a row-major `num_states x dim` feature matrix. Classes
    /// are numbered in order of first appearance.
    pub fn from_matrix(num_states: usize, dim: usize, rows: &[f64]) -> Result<Self, TheoryError> {
        if num_states == 0 || dim == 0 || rows.len() != num_states * dim {
            return Err(TheoryError::BadRepMap(
                "feature matrix does not match num_states x dim".into(),
            ));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(TheoryError::BadRepMap("non-finite feature entry".into()));
        }
        let mut class_of = Vec::with_capacity(num_states);
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut reps: Vec<Vec<f64>> = Vec::new();
        for s in 0..num_states {
            let row: Vec<f64> = rows[s * dim..(s + 1) * dim]
                .iter()
                .map(|v| round_feature(*v))
                .collect();
            match reps.iter().position(|r| *r == row) {
                Some(c) => {
                    class_of.push(c);
                    members[c].push(s);
                }
                None => {
                    class_of.push(reps.len());
                    members.push(vec![s]);
                    reps.push(row);
                }
            }
        }
        Ok(Self { dim, class_of, members, reps })
    }

    /// One-hot indicator features: every state is its own class.
    pub fn identity(num_states: usize) -> Self {
        let mut rows = vec![0.0; num_states * num_states];
        for s in 0..num_states {
            rows[s * num_states + s] = 1.0;
        }
        Self::from_matrix(num_states, num_states, &rows).expect("identity matrix is valid")
    }

    /// Random surjective partition of `num_states` into `num_classes`
    /// classes, each class carrying a random representative in [-1,1]^dim.
    pub fn random_partition(
        num_states: usize,
        num_classes: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TheoryError> {
        if num_classes == 0 || num_classes > num_states {
            return Err(TheoryError::BadRepMap(format!(
                "cannot split {num_states} states into {num_classes} classes"
            )));
        }
        loop {
            let reps: Vec<Vec<f64>> = (0..num_classes)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            // First C states pin one member per class; the rest are random.
            let assign: Vec<usize> = (0..num_states)
                .map(|s| if s < num_classes { s } else { rng.gen_range(0..num_classes) })
                .collect();
            let mut rows = Vec::with_capacity(num_states * dim);
            for s in 0..num_states {
                rows.extend_from_slice(&reps[assign[s]]);
            }
            let map = Self::from_matrix(num_states, dim, &rows)?;
            // Astronomically unlikely, but re-draw if two random reps
            // collided after rounding and merged classes.
            if map.num_classes() == num_classes {
                return Ok(map);
            }
        }
    }

    pub fn num_states(&self) -> usize {
        self.class_of.len()
    }

    pub fn num_classes(&self) -> usize {
        self.reps.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_of(&self, s: usize) -> usize {
        self.class_of[s]
    }

    pub fn members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    pub fn rep(&self, c: usize) -> &[f64] {
        &self.reps[c]
    }

    /// Feature row of a state (its class representative).
    pub fn phi_row(&self, s: usize) -> &[f64] {
        &self.reps[self.class_of[s]]
    }

    pub fn is_injective(&self) -> bool {
        self.num_classes() == self.num_states()
    }

    /// True iff the policy is constant within every class.
    pub fn is_encoded(&self, policy: &[usize]) -> bool {
        self.members
            .iter()
            .all(|m| m.iter().all(|s| policy[*s] == policy[m[0]]))
    }

    /// Expands a per-class action choice into a per-state policy.
    pub fn lift(&self, class_policy: &[usize]) -> Policy {
        self.class_of.iter().map(|c| class_policy[*c]).collect()
    }

    /// Serializes as one line of `dim` floats per state.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in 0..self.num_states() {
            let row: Vec<String> = self.phi_row(s).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TheoryError> {
        let mut rows = Vec::new();
        let mut dim = None;
        let mut num_states = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| TheoryError::Parse(format!("bad float {t:?}")))
                })
                .collect::<Result<_, _>>()?;
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(TheoryError::Parse("ragged feature rows".into()))
                }
                _ => {}
            }
            rows.extend(vals);
            num_states += 1;
        }
        let dim = dim.ok_or_else(|| TheoryError::Parse("empty representation file".into()))?;
        Self::from_matrix(num_states, dim, &rows)
    }
}

/// Projects a Q-table onto class-constant tables: within each class and
/// action, every state gets the midpoint (min+max)/2 of the member values.
/// The midpoint is the constant minimizing the worst-case deviation.
pub fn approx_operator(m: &TabularMDP, rep: &RepMap, q: &[f64]) -> QTable {
    let na = m.num_actions();
    let mut out = q.to_vec();
    for members in &rep.members {
        for a in 0..na {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &s in members {
                let v = q[s * na + a];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let mid = 0.5 * (lo + hi);
            for &s in members {
                out[s * na + a] = mid;
            }
        }
    }
    out
}

pub(crate) fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// All `A^num_classes` per-state policies that are constant within each
/// class, or an error if that count exceeds [`ENUMERATION_CAP`].
pub fn enumerate_encoded_policies(
    m: &TabularMDP,
    rep: &RepMap,
) -> Result<Vec<Policy>, TheoryError> {
    let choices = enumerate_class_policies(m.num_actions(), rep.num_classes())?;
    Ok(choices.iter().map(|c| rep.lift(c)).collect())
}

pub(crate) fn enumerate_class_policies(
    num_actions: usize,
    num_classes: usize,
) -> Result<Vec<Vec<usize>>, TheoryError> {
    let needed = (num_actions as f64).powi(num_classes as i32);
    if needed > ENUMERATION_CAP as f64 {
        return Err(TheoryError::EnumerationCap { needed, cap: ENUMERATION_CAP });
    }
    let total = needed as usize;
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; num_classes];
    for _ in 0..total {
        out.push(counter.clone());
        for digit in counter.iter_mut() {
            *digit += 1;
            if *digit < num_actions {
                break;
            }
            *digit = 0;
        }
    }
    Ok(out)
}

/// Worst-case sup-norm distance between an encoded policy's exact Q and
/// its class-constant projection, over all encoded policies.
pub fn epsilon_sufficiency(m: &TabularMDP, rep: &RepMap) -> Result<f64, TheoryError> {
    let mut eps = 0.0f64;
    for policy in enumerate_encoded_policies(m, rep)? {
        let q = policy_eval(m, &policy)?;
        let projected = approx_operator(m, rep, &q);
        eps = eps.max(sup_diff(&q, &projected));
    }
    Ok(eps)
}

#[derive(Clone, Debug)]
pub struct ApiRun {
    /// Sup-norm gap `||V* - V^{pi_k}||` after each improvement step.
    pub gaps: Vec<f64>,
    /// Max gap over the second half of the run (the post-burn-in iterates).
    pub limsup_gap: f64,
}

/// Approximate policy iteration through the class projection: evaluate the
/// current encoded policy exactly, project its Q onto class-constant
/// tables, and act greedily on the projection.
pub fn api_run(
    m: &TabularMDP,
    rep: &RepMap,
    iterations: usize,
) -> Result<ApiRun, TheoryError> {
    if iterations == 0 {
        return Err(TheoryError::Precondition("api_run needs iterations >= 1".into()));
    }
    let q_star = value_iteration(m);
    let na = m.num_actions();
    let v_star: Vec<f64> = (0..m.num_states())
        .map(|s| {
            q_star[s * na..(s + 1) * na]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut policy: Policy = rep.lift(&vec![0; rep.num_classes()]);
    let mut gaps = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let q = policy_eval(m, &policy)?;
        let v_pi: Vec<f64> = (0..m.num_states()).map(|s| q[s * na + policy[s]]).collect();
        gaps.push(sup_diff(&v_star, &v_pi));
        let projected = approx_operator(m, rep, &q);
        let next = m.greedy(&projected);
        if !rep.is_encoded(&next) {
            return Err(TheoryError::NotEncoded);
        }
        policy = next;
    }
    let burn_in = iterations / 2;
    let limsup_gap = gaps[burn_in..].iter().copied().fold(0.0, f64::max);
    Ok(ApiRun { gaps, limsup_gap })
}
