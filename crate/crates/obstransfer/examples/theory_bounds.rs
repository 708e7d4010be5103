//! Brute-force verification of the error bounds behind the transfer method,
//! on small tabular MDPs where exact dynamic programming is feasible:
//!
//! * projected policy iteration: asymptotic suboptimality vs. the
//!   representation's sufficiency error;
//! * planning in a least-squares latent model: suboptimality vs. the model's
//!   transition/reward fit errors times a value-Lipschitz constant;
//! * projected value iteration with the same model-error decomposition;
//! * transfer: a model fit on one task replanned, frozen, on a relabeled
//!   copy of the task loses nothing.
//!
//! Run with: `cargo run --release --example theory_bounds`

use obstransfer::derive_rng;
use obstransfer::theory::{
    check_avi, check_prop1, check_prop2, check_thm1, check_thm2_transfer, exact_fit_instance,
    lumpable_instance, random_deterministic_mdp, random_stochastic_mdp, RepMap,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (m, rep) = exact_fit_instance();
    let r = check_thm1(&m, &rep)?;
    println!(
        "hand-built exactly-fittable MDP: eps_P={:.2e} eps_R={:.2e} planning gap={:.2e}",
        r.eps_p, r.eps_r, r.gap
    );
    let (m, rep) = lumpable_instance();
    let r = check_prop2(&m, &rep)?;
    println!(
        "hand-built lumpable MDP: sufficiency eps={:.2e} projected-PI gap={:.2e}",
        r.epsilon, r.gap
    );
    println!();

    let trials = 25;
    let mut rng = derive_rng(0, "theory-bounds-example");
    let mut rows: Vec<(&str, f64, f64, bool)> = vec![
        ("projected policy iteration", 0.0, 0.0, true),
        ("latent-model planning", 0.0, 0.0, true),
        ("projected value iteration", 0.0, 0.0, true),
        ("frozen-model transfer", 0.0, 0.0, true),
    ];
    for _ in 0..trials {
        let m = random_stochastic_mdp(7, 2, 0.9, &mut rng);
        let rep = RepMap::random_partition(7, 3, 2, &mut rng)?;
        let r = check_prop1(&m, &rep, 30)?;
        fold(&mut rows[0], r.limsup_gap, r.bound, r.holds);

        let m = random_deterministic_mdp(7, 2, 0.9, &mut rng);
        let rep = RepMap::random_partition(7, 3, 2, &mut rng)?;
        let r = check_thm1(&m, &rep)?;
        fold(&mut rows[1], r.gap, r.bound, r.holds);
        let r = check_avi(&m, &rep)?;
        fold(&mut rows[2], r.gap, r.bound, r.holds);
        let r = check_thm2_transfer(&m, &rep)?;
        fold(&mut rows[3], r.gap, r.bound, r.holds);
    }

    println!("{trials} random MDPs per check, gamma=0.9:");
    println!("{:<28} {:>12} {:>12}  bound holds", "check", "worst gap", "worst bound");
    let mut all_ok = true;
    for (name, gap, bound, ok) in &rows {
        all_ok &= ok;
        println!("{name:<28} {gap:>12.6} {bound:>12.6}  {}", if *ok { "yes" } else { "NO" });
    }
    if !all_ok {
        return Err("a bound was violated".into());
    }
    Ok(())
}

fn fold(row: &mut (&str, f64, f64, bool), gap: f64, bound: f64, holds: bool) {
    row.1 = row.1.max(gap);
    row.2 = row.2.max(bound);
    row.3 &= holds;
}
