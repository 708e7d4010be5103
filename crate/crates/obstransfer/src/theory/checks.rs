use super::latent::{
    lipschitz_over_reps, model_sufficiency_eps, snapped_latent_mdp, TabularLatentModel,
};
use super::mdp::{policy_eval, value_iteration, Policy, TabularMDP};
use super::rep::{
    api_run, approx_operator, enumerate_class_policies, epsilon_sufficiency, sup_diff, RepMap,
};
use super::TheoryError;

/// Slack added to every inequality check so exact-zero cases are not
/// failed by floating-point noise.
const CHECK_TOL: f64 = 1e-9;

fn state_values(m: &TabularMDP, q: &[f64]) -> Vec<f64> {
    let na = m.num_actions();
    (0..m.num_states())
        .map(|s| {
            q[s * na..(s + 1) * na]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn policy_values(m: &TabularMDP, policy: &[usize]) -> Result<Vec<f64>, TheoryError> {
    let q = policy_eval(m, policy)?;
    let na = m.num_actions();
    Ok((0..m.num_states()).map(|s| q[s * na + policy[s]]).collect())
}

/// Sup-norm suboptimality of a policy: `||V* - V^pi||`.
fn policy_gap(m: &TabularMDP, policy: &[usize]) -> Result<f64, TheoryError> {
    let v_star = state_values(m, &value_iteration(m));
    Ok(sup_diff(&v_star, &policy_values(m, policy)?))
}

/// Worst Lipschitz constant over the representative geometry of any
/// enumerable latent policy's value function on the snapped latent MDP.
fn k_phi_v(latent: &TabularMDP, rep: &RepMap) -> Result<f64, TheoryError> {
    let na = latent.num_actions();
    let mut k = 0.0f64;
    for class_policy in enumerate_class_policies(na, latent.num_states())? {
        let v = policy_values(latent, &class_policy)?;
        k = k.max(lipschitz_over_reps(rep, &v));
    }
    Ok(k)
}

/// Plans greedily on the snapped latent MDP and lifts the class policy
/// back to states.
fn latent_plan(latent: &TabularMDP, rep: &RepMap) -> Policy {
    let q = value_iteration(latent);
    rep.lift(&latent.greedy(&q))
}

#[derive(Clone, Debug)]
pub struct Prop1Report {
    /// Worst projection error of any encoded policy's exact Q-table.
    pub epsilon: f64,
    /// Worst suboptimality over the second half of the API run.
    pub limsup_gap: f64,
    /// `2 gamma^2 epsilon / (1 - gamma)^2`.
    pub bound: f64,
    pub holds: bool,
}

/// Checks that projected policy iteration stays within the suboptimality
/// bound implied by the representation's sufficiency error.
pub fn check_prop1(
    m: &TabularMDP,
    rep: &RepMap,
    iterations: usize,
) -> Result<Prop1Report, TheoryError> {
    let epsilon = epsilon_sufficiency(m, rep)?;
    let run = api_run(m, rep, iterations)?;
    let g = m.gamma();
    let bound = 2.0 * g * g * epsilon / (1.0 - g).powi(2);
    Ok(Prop1Report {
        epsilon,
        limsup_gap: run.limsup_gap,
        bound,
        holds: run.limsup_gap <= bound + CHECK_TOL,
    })
}

#[derive(Clone, Debug)]
pub struct Thm1Report {
    pub eps_p: f64,
    pub eps_r: f64,
    /// Worst value slope over representatives among latent policies.
    pub k_phi_v: f64,
    /// Suboptimality of the policy planned in the latent model.
    pub gap: f64,
    /// `(2 gamma^2 / (1 - gamma)^3) (eps_r + gamma eps_p k_phi_v)`.
    pub bound: f64,
    pub holds: bool,
}

/// Fits the linear latent model, plans entirely inside it, and checks
/// the resulting policy's suboptimality against the model-error bound.
pub fn check_thm1(m: &TabularMDP, rep: &RepMap) -> Result<Thm1Report, TheoryError> {
    let model = TabularLatentModel::fit_least_squares(m, rep)?;
    let (eps_p, eps_r) = model_sufficiency_eps(m, rep, &model);
    let latent = snapped_latent_mdp(m, rep, &model)?;
    let k = k_phi_v(&latent, rep)?;
    let gap = policy_gap(m, &latent_plan(&latent, rep))?;
    let g = m.gamma();
    let bound = (2.0 * g * g / (1.0 - g).powi(3)) * (eps_r + g * eps_p * k);
    Ok(Thm1Report { eps_p, eps_r, k_phi_v: k, gap, bound, holds: gap <= bound + CHECK_TOL })
}

#[derive(Clone, Debug)]
pub struct Prop2Report {
    pub eps_p: f64,
    pub eps_r: f64,
    pub epsilon: f64,
    pub gap: f64,
    pub holds: bool,
}

/// Checks that an exactly aggregable MDP admits a zero-error linear fit,
/// zero sufficiency error, and lossless planning through the projection.
/// Uses projected policy iteration rather than the snapped latent planner,
/// because snapping is exact only for deterministic dynamics.
pub fn check_prop2(m: &TabularMDP, rep: &RepMap) -> Result<Prop2Report, TheoryError> {
    let model = TabularLatentModel::fit_least_squares(m, rep)?;
    let (eps_p, eps_r) = model_sufficiency_eps(m, rep, &model);
    let epsilon = epsilon_sufficiency(m, rep)?;
    let gap = api_run(m, rep, 20)?.limsup_gap;
    let tol = 1e-8;
    Ok(Prop2Report {
        eps_p,
        eps_r,
        epsilon,
        gap,
        holds: eps_p < tol && eps_r < tol && epsilon < tol && gap < tol,
    })
}

#[derive(Clone, Debug)]
pub struct AviReport {
    pub eps_p: f64,
    pub eps_r: f64,
    /// Worst value slope over representatives among the realized iterates.
    pub k_phi_h: f64,
    /// Largest projection error of any single backup in the run.
    pub per_step_max: f64,
    /// Suboptimality of the greedy policy at the fixed point.
    pub gap: f64,
    /// `2 (eps_r + gamma eps_p k_phi_h) / (1 - gamma)^2`.
    pub bound: f64,
    pub iterations: usize,
    pub holds: bool,
}

/// Iterates the projected optimality backup (an exact backup followed by
/// the class-midpoint projection, a gamma-contraction) to its fixed point
/// and checks both the per-step projection error and the final policy's
/// suboptimality against the model-error bound. The per-step guarantee is
/// an exact argument only for deterministic transition tables.
pub fn check_avi(m: &TabularMDP, rep: &RepMap) -> Result<AviReport, TheoryError> {
    let model = TabularLatentModel::fit_least_squares(m, rep)?;
    let (eps_p, eps_r) = model_sufficiency_eps(m, rep, &model);
    let (ns, na) = (m.num_states(), m.num_actions());
    let mut q = vec![0.0; ns * na];
    let mut k_phi_h = 0.0f64;
    let mut per_step_max = 0.0f64;
    let mut iterations = 0usize;
    loop {
        iterations += 1;
        let backed = m.optimality_backup(&q);
        let next = approx_operator(m, rep, &backed);
        per_step_max = per_step_max.max(sup_diff(&next, &backed));
        let v_states = state_values(m, &next);
        let v_classes: Vec<f64> = (0..rep.num_classes())
            .map(|c| v_states[rep.members(c)[0]])
            .collect();
        k_phi_h = k_phi_h.max(lipschitz_over_reps(rep, &v_classes));
        let delta = sup_diff(&next, &q);
        q = next;
        if delta < 1e-12 || iterations >= 100_000 {
            break;
        }
    }
    let policy = m.greedy(&q);
    if !rep.is_encoded(&policy) {
        return Err(TheoryError::NotEncoded);
    }
    let gap = policy_gap(m, &policy)?;
    let g = m.gamma();
    let bound = 2.0 * (eps_r + g * eps_p * k_phi_h) / (1.0 - g).powi(2);
    Ok(AviReport {
        eps_p,
        eps_r,
        k_phi_h,
        per_step_max,
        gap,
        bound,
        iterations,
        holds: gap <= bound + CHECK_TOL,
    })
}

#[derive(Clone, Debug)]
pub struct Thm2Report {
    pub eps_p_source: f64,
    pub eps_r_source: f64,
    pub eps_p_target: f64,
    pub eps_r_target: f64,
    /// Suboptimality on the target of the policy planned with the frozen
    /// source-fitted model.
    pub gap: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Fits the model on the source, rebuilds the target through
/// [`transfer_target`], and checks that the frozen model keeps its error
/// guarantees and its planning bound on the target.
pub fn check_thm2_transfer(m: &TabularMDP, rep: &RepMap) -> Result<Thm2Report, TheoryError> {
    let (tm, trep) = transfer_target(m, rep)?;
    let model = TabularLatentModel::fit_least_squares(m, rep)?;
    let (eps_p_source, eps_r_source) = model_sufficiency_eps(m, rep, &model);
    let (eps_p_target, eps_r_target) = model_sufficiency_eps(&tm, &trep, &model);
    let latent = snapped_latent_mdp(&tm, &trep, &model)?;
    let k = k_phi_v(&latent, &trep)?;
    let gap = policy_gap(&tm, &latent_plan(&latent, &trep))?;
    let g = tm.gamma();
    let bound = (2.0 * g * g / (1.0 - g).powi(3)) * (eps_r_target + g * eps_p_target * k);
    Ok(Thm2Report {
        eps_p_source,
        eps_r_source,
        eps_p_target,
        eps_r_target,
        gap,
        bound,
        holds: gap <= bound + CHECK_TOL
            && eps_p_target <= eps_p_source + CHECK_TOL
            && eps_r_target <= eps_r_source + CHECK_TOL,
    })
}

/// Doubles every state of the source MDP. Both copies of a state share
/// its rewards and features; all transition mass lands on the first
/// (lowest-index) copy, so the original states form a closed subsystem
/// and the observation map `t -> t mod S` commutes with the dynamics.
pub fn transfer_target(
    m: &TabularMDP,
    rep: &RepMap,
) -> Result<(TabularMDP, RepMap), TheoryError> {
    if rep.num_states() != m.num_states() {
        return Err(TheoryError::Precondition(
            "representation and MDP disagree on the state count".into(),
        ));
    }
    let (ns, na, d) = (m.num_states(), m.num_actions(), rep.dim());
    let nt = 2 * ns;
    let mut p = vec![0.0; nt * na * nt];
    let mut r = vec![0.0; nt * na];
    let mut rows = Vec::with_capacity(nt * d);
    for t in 0..nt {
        let s = t % ns;
        for a in 0..na {
            for s2 in 0..ns {
                p[(t * na + a) * nt + s2] = m.prob(s, a, s2);
            }
            r[t * na + a] = m.reward(s, a);
        }
    }
    for t in 0..nt {
        rows.extend_from_slice(rep.phi_row(t % ns));
    }
    Ok((
        TabularMDP::new(nt, na, p, r, m.gamma())?,
        RepMap::from_matrix(nt, d, &rows)?,
    ))
}

/// Six states in three classes with class-closed deterministic dynamics,
/// class-constant rewards, and orthogonal one-hot class features, so the
/// least-squares linear fit is exact.
pub fn exact_fit_instance() -> (TabularMDP, RepMap) {
    let (ns, na, nc) = (6, 2, 3);
    let class_of = |s: usize| s / 2;
    // Action 0 cycles the classes; action 1 collapses everything to class 0.
    let class_succ = |c: usize, a: usize| if a == 0 { (c + 1) % nc } else { 0 };
    let class_reward = [[1.0, 0.2, 0.5], [0.0, 0.3, 0.8]];
    let mut p = vec![0.0; ns * na * ns];
    let mut r = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            // Land on alternating members of the successor class so the
            // state-level dynamics are not themselves class-constant.
            let succ = 2 * class_succ(class_of(s), a) + (s % 2);
            p[(s * na + a) * ns + succ] = 1.0;
            r[s * na + a] = class_reward[a][class_of(s)];
        }
    }
    let mut rows = vec![0.0; ns * nc];
    for s in 0..ns {
        rows[s * nc + class_of(s)] = 1.0;
    }
    let m = TabularMDP::new(ns, na, p, r, 0.9).expect("hand-built tables are valid");
    let rep = RepMap::from_matrix(ns, nc, &rows).expect("hand-built features are valid");
    (m, rep)
}

/// Four states in two classes whose stochastic transitions aggregate to
/// class-constant class distributions (with different within-class
/// splits per state) and class-constant rewards: exactly aggregable.
pub fn lumpable_instance() -> (TabularMDP, RepMap) {
    let (ns, na) = (4, 2);
    #[rustfmt::skip]
    let p = vec![
        // state 0 (class 0): action 0 then action 1
        0.7, 0.0, 0.3, 0.0,   0.0, 0.0, 1.0, 0.0,
        // state 1 (class 0)
        0.35, 0.35, 0.15, 0.15,   0.0, 0.0, 0.5, 0.5,
        // state 2 (class 1)
        0.2, 0.0, 0.8, 0.0,   1.0, 0.0, 0.0, 0.0,
        // state 3 (class 1)
        0.0, 0.2, 0.4, 0.4,   0.5, 0.5, 0.0, 0.0,
    ];
    let r = vec![0.9, 0.4, 0.9, 0.4, 0.1, 0.6, 0.1, 0.6];
    let rows = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
    let m = TabularMDP::new(ns, na, p, r, 0.9).expect("hand-built tables are valid");
    let rep = RepMap::from_matrix(ns, 2, &rows).expect("hand-built features are valid");
    (m, rep)
}

/// Four states in two classes with scalar features +1 and -1. The
/// aggregation is exactly sufficient (the MDP lumps onto the classes),
/// but action 1 sends both classes to the +1 class — a map no strictly
/// linear scalar model can represent, so the best fit has `eps_p = 1`.
/// Separates aggregation sufficiency from linear-model sufficiency.
pub fn linear_insufficiency_example() -> (TabularMDP, RepMap) {
    let (ns, na) = (4, 2);
    #[rustfmt::skip]
    let p = vec![
        // state 0: stay / go to state 0
        1.0, 0.0, 0.0, 0.0,   1.0, 0.0, 0.0, 0.0,
        // state 1: stay / go to state 1
        0.0, 1.0, 0.0, 0.0,   0.0, 1.0, 0.0, 0.0,
        // state 2: stay / go to state 0
        0.0, 0.0, 1.0, 0.0,   1.0, 0.0, 0.0, 0.0,
        // state 3: stay / go to state 1
        0.0, 0.0, 0.0, 1.0,   0.0, 1.0, 0.0, 0.0,
    ];
    let r = vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0];
    let rows = vec![1.0, 1.0, -1.0, -1.0];
    let m = TabularMDP::new(ns, na, p, r, 0.9).expect("hand-built tables are valid");
    let rep = RepMap::from_matrix(ns, 1, &rows).expect("hand-built features are valid");
    (m, rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;
    use crate::theory::mdp::{random_deterministic_mdp, random_stochastic_mdp};

    #[test]
    fn exact_fit_instance_is_exactly_sufficient() {
        let (m, rep) = exact_fit_instance();
        let model = TabularLatentModel::fit_least_squares(&m, &rep).unwrap();
        let (eps_p, eps_r) = model_sufficiency_eps(&m, &rep, &model);
        assert!(eps_p < 1e-10, "eps_p {eps_p}");
        assert!(eps_r < 1e-10, "eps_r {eps_r}");
        let report = check_thm1(&m, &rep).unwrap();
        assert!(report.holds);
        assert!(report.gap < 1e-8, "gap {}", report.gap);
    }

    #[test]
    fn lumpable_instance_passes_prop2_and_identity_is_trivial() {
        let (m, rep) = lumpable_instance();
        let report = check_prop2(&m, &rep).unwrap();
        assert!(report.holds, "{report:?}");
        // An injective representation makes the check trivially pass.
        let mut rng = derive_rng(30, "prop2-id");
        let m = random_stochastic_mdp(4, 2, 0.9, &mut rng);
        let report = check_prop2(&m, &RepMap::identity(4)).unwrap();
        assert!(report.holds, "{report:?}");
    }

    #[test]
    fn insufficiency_example_separates_the_two_notions() {
        let (m, rep) = linear_insufficiency_example();
        let epsilon = epsilon_sufficiency(&m, &rep).unwrap();
        assert!(epsilon < 1e-9, "epsilon {epsilon}");
        let model = TabularLatentModel::fit_least_squares(&m, &rep).unwrap();
        let (eps_p, eps_r) = model_sufficiency_eps(&m, &rep, &model);
        assert!((eps_p - 1.0).abs() < 1e-9, "eps_p {eps_p}");
        assert!(eps_r < 1e-9, "eps_r {eps_r}");
    }

    #[test]
    fn projected_policy_iteration_bound_holds_on_random_mdps() {
        let mut rng = derive_rng(31, "prop1-rand");
        for i in 0..20 {
            let m = random_stochastic_mdp(6, 2, 0.9, &mut rng);
            let rep = RepMap::random_partition(6, 3, 2, &mut rng).unwrap();
            let report = check_prop1(&m, &rep, 30).unwrap();
            assert!(report.holds, "instance {i}: {report:?}");
        }
    }

    #[test]
    fn projected_value_iteration_bound_holds_on_random_deterministic_mdps() {
        let mut rng = derive_rng(32, "avi-rand");
        for i in 0..20 {
            let m = random_deterministic_mdp(6, 2, 0.9, &mut rng);
            let rep = RepMap::random_partition(6, 3, 2, &mut rng).unwrap();
            let report = check_avi(&m, &rep).unwrap();
            assert!(report.holds, "instance {i}: {report:?}");
            let per_step_bound = report.eps_r + m.gamma() * report.eps_p * report.k_phi_h;
            assert!(
                report.per_step_max <= per_step_bound + 1e-9,
                "instance {i}: per-step {} > {per_step_bound}",
                report.per_step_max
            );
        }
    }

    #[test]
    fn latent_planning_bound_holds_on_random_deterministic_mdps() {
        let mut rng = derive_rng(33, "thm1-rand");
        for i in 0..20 {
            let m = random_deterministic_mdp(6, 2, 0.9, &mut rng);
            let rep = RepMap::random_partition(6, 3, 2, &mut rng).unwrap();
            let report = check_thm1(&m, &rep).unwrap();
            assert!(report.holds, "instance {i}: {report:?}");
        }
    }

    #[test]
    fn transfer_keeps_model_errors_and_bound() {
        let mut rng = derive_rng(34, "thm2-rand");
        for i in 0..10 {
            let m = random_deterministic_mdp(5, 2, 0.9, &mut rng);
            let rep = RepMap::random_partition(5, 3, 2, &mut rng).unwrap();
            let report = check_thm2_transfer(&m, &rep).unwrap();
            assert!(report.holds, "instance {i}: {report:?}");
            assert!((report.eps_p_source - report.eps_p_target).abs() < 1e-12);
            assert!((report.eps_r_source - report.eps_r_target).abs() < 1e-12);
        }
        // The identity map on an exactly fittable source transfers with a
        // zero gap.
        let (m, rep) = exact_fit_instance();
        let report = check_thm2_transfer(&m, &rep).unwrap();
        assert!(report.holds && report.gap < 1e-8, "{report:?}");
    }

    #[test]
    fn transfer_target_doubles_states_and_closes_on_originals() {
        let (m, rep) = exact_fit_instance();
        let (tm, trep) = transfer_target(&m, &rep).unwrap();
        assert_eq!(tm.num_states(), 2 * m.num_states());
        assert_eq!(trep.num_classes(), rep.num_classes());
        for t in 0..tm.num_states() {
            let s = t % m.num_states();
            for a in 0..m.num_actions() {
                assert_eq!(tm.successor(t, a), m.successor(s, a));
                assert_eq!(tm.reward(t, a), m.reward(s, a));
            }
            assert_eq!(trep.phi_row(t), rep.phi_row(s));
        }
    }
}
