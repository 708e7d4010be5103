use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::config::{parse_config, ExperimentConfig, RunKind};
use super::suite::run_suite;
use super::HarnessError;
use crate::derive_rng;
use crate::envs::{
    check_observation_map, BrokenSensor, CartFace, CartPole, DroppedVelocity, Face, GoalMode,
    GridMaze, MazeMap, TAU,
};
use crate::nn::gradcheck::run_all;
use crate::theory::{
    check_avi, check_prop1, check_prop2, check_thm1, check_thm2_transfer, epsilon_sufficiency,
    exact_fit_instance, linear_insufficiency_example, lumpable_instance, model_sufficiency_eps,
    random_deterministic_mdp, random_stochastic_mdp, RepMap, TabularLatentModel, TheoryError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

const GRADCHECK_TOL: f64 = 1e-4;

const USAGE: &str = "\
usage: obstransfer <command> [flags]

commands:
  train-source   --config PATH [--seed N] [--out DIR]   source-task training
  train-target   --config PATH [--seed N] [--out DIR]   target training with a transferred model
  baseline       --config PATH [--seed N] [--out DIR]   comparison baselines and ablations
  theory-check   [--random N] [--seed N]                verify the tabular guarantees
  gradcheck      [--seed N]                             numeric gradient verification
  validate-env   --env gridmaze|cartpole [--pairs N] [--seed N]
                                                         observation-map commutation check

exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 failed theory/validation check";

/// Entry point behind the binary; `args` excludes the program name.
pub fn cli(args: &[String]) -> i32 {
    let Some((command, rest)) = args.split_first() else {
        eprintln!("{USAGE}");
        return EXIT_CONFIG;
    };
    let code = match command.as_str() {
        "train-source" => training_command(rest, RunKind::Source),
        "train-target" => training_command(rest, RunKind::Transfer),
        "baseline" => training_command(rest, RunKind::Single),
        "theory-check" => theory_command(rest),
        "gradcheck" => gradcheck_command(rest),
        "validate-env" => validate_command(rest),
        other => {
            eprintln!("unknown command `{other}`\n{USAGE}");
            Err(EXIT_CONFIG)
        }
    };
    match code {
        Ok(()) => EXIT_OK,
        Err(code) => code,
    }
}

fn parse_flags(args: &[String], allowed: &[&str]) -> Result<HashMap<String, String>, i32> {
    let mut flags = HashMap::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let Some(name) = flag.strip_prefix("--") else {
            eprintln!("unexpected argument `{flag}`\n{USAGE}");
            return Err(EXIT_CONFIG);
        };
        if !allowed.contains(&name) {
            eprintln!("unknown flag `--{name}`\n{USAGE}");
            return Err(EXIT_CONFIG);
        }
        let Some(value) = it.next() else {
            eprintln!("flag `--{name}` needs a value");
            return Err(EXIT_CONFIG);
        };
        if flags.insert(name.to_string(), value.clone()).is_some() {
            eprintln!("flag `--{name}` given twice");
            return Err(EXIT_CONFIG);
        }
    }
    Ok(flags)
}

fn parsed_flag<T: std::str::FromStr>(
    flags: &HashMap<String, String>,
    name: &str,
    default: T,
) -> Result<T, i32> {
    match flags.get(name) {
        None => Ok(default),
        Some(v) => v.parse::<T>().map_err(|_| {
            eprintln!("flag `--{name}` has invalid value {v:?}");
            EXIT_CONFIG
        }),
    }
}

fn training_command(args: &[String], expected: RunKind) -> Result<(), i32> {
    let flags = parse_flags(args, &["config", "seed", "out"])?;
    let Some(config_path) = flags.get("config") else {
        eprintln!("--config is required\n{USAGE}");
        return Err(EXIT_CONFIG);
    };
    let mut config = parse_config(Path::new(config_path)).map_err(|e| {
        eprintln!("{config_path}: {e}");
        EXIT_CONFIG
    })?;
    check_kind_matches(&config, expected)?;
    if let Some(seed) = flags.get("seed") {
        let seed: u64 = seed.parse().map_err(|_| {
            eprintln!("flag `--seed` has invalid value {seed:?}");
            EXIT_CONFIG
        })?;
        config.seeds = vec![seed];
    }
    if let Some(out) = flags.get("out") {
        config.out_dir = Some(PathBuf::from(out));
    }
    let outcome = run_suite(&config).map_err(|e| match e {
        HarnessError::Config(_) => {
            eprintln!("{e}");
            EXIT_CONFIG
        }
        other => {
            eprintln!("{other}");
            EXIT_RUNTIME
        }
    })?;
    for run in &outcome.runs {
        let last = run.metrics.last();
        let final_return = last.and_then(|r| r.eval_return_mean).unwrap_or(f64::NAN);
        println!(
            "seed {}: episodes evaluated at {} points, final return {final_return:.4}, auc {:.4}",
            run.seed,
            run.metrics.len(),
            run.auc
        );
    }
    if let Some(dir) = &config.out_dir {
        println!("artifacts written under {}", dir.display());
    }
    Ok(())
}

fn check_kind_matches(config: &ExperimentConfig, expected: RunKind) -> Result<(), i32> {
    let ok = match expected {
        RunKind::Source => config.kind == RunKind::Source,
        RunKind::Transfer => config.kind == RunKind::Transfer,
        // The `baseline` command accepts every non-source, non-transfer
        // mode.
        _ => !matches!(config.kind, RunKind::Source | RunKind::Transfer),
    };
    if ok {
        Ok(())
    } else {
        eprintln!(
            "run.baseline={} does not match this command",
            config.kind.name()
        );
        Err(EXIT_CONFIG)
    }
}

struct CheckLine {
    name: &'static str,
    instances: usize,
    worst_gap: f64,
    worst_bound: f64,
    passed: bool,
}

fn theory_command(args: &[String]) -> Result<(), i32> {
    let flags = parse_flags(args, &["random", "seed"])?;
    let random: usize = parsed_flag(&flags, "random", 20)?;
    let seed: u64 = parsed_flag(&flags, "seed", 0)?;
    let lines = theory_battery(random, seed).map_err(|e| {
        eprintln!("theory check failed to run: {e}");
        EXIT_RUNTIME
    })?;
    let mut all_ok = true;
    println!(
        "{:<28} {:>9} {:>14} {:>14}  result",
        "check", "instances", "worst gap", "worst bound"
    );
    for line in &lines {
        all_ok &= line.passed;
        println!(
            "{:<28} {:>9} {:>14.6} {:>14.6}  {}",
            line.name,
            line.instances,
            line.worst_gap,
            line.worst_bound,
            if line.passed { "PASS" } else { "FAIL" }
        );
    }
    if all_ok {
        Ok(())
    } else {
        Err(EXIT_CHECK_FAILED)
    }
}

/// Fixed hand-built instances plus `random` randomized instances per
/// randomized check family.
fn theory_battery(random: usize, seed: u64) -> Result<Vec<CheckLine>, TheoryError> {
    let mut lines = Vec::new();

    let (m, rep) = exact_fit_instance();
    let r = check_thm1(&m, &rep)?;
    lines.push(CheckLine {
        name: "exact-fit planning",
        instances: 1,
        worst_gap: r.gap,
        worst_bound: r.bound,
        passed: r.holds && r.gap < 1e-8,
    });
    let r = check_thm2_transfer(&m, &rep)?;
    lines.push(CheckLine {
        name: "exact-fit transfer",
        instances: 1,
        worst_gap: r.gap,
        worst_bound: r.bound,
        passed: r.holds,
    });

    let (m, rep) = lumpable_instance();
    let r = check_prop2(&m, &rep)?;
    lines.push(CheckLine {
        name: "lumpable aggregation",
        instances: 1,
        worst_gap: r.gap,
        worst_bound: 0.0,
        passed: r.holds,
    });

    let (m, rep) = linear_insufficiency_example();
    let eps = epsilon_sufficiency(&m, &rep)?;
    let model = TabularLatentModel::fit_least_squares(&m, &rep)?;
    let (eps_p, _) = model_sufficiency_eps(&m, &rep, &model);
    lines.push(CheckLine {
        name: "linear/aggregation split",
        instances: 1,
        worst_gap: eps,
        worst_bound: eps_p,
        passed: eps < 1e-8 && eps_p > 0.5,
    });

    let mut prop1 = CheckLine {
        name: "projected policy iteration",
        instances: random,
        worst_gap: 0.0,
        worst_bound: 0.0,
        passed: true,
    };
    let mut thm1 = CheckLine {
        name: "latent-model planning",
        instances: random,
        worst_gap: 0.0,
        worst_bound: 0.0,
        passed: true,
    };
    let mut avi = CheckLine {
        name: "projected value iteration",
        instances: random,
        worst_gap: 0.0,
        worst_bound: 0.0,
        passed: true,
    };
    let mut thm2 = CheckLine {
        name: "frozen-model transfer",
        instances: random,
        worst_gap: 0.0,
        worst_bound: 0.0,
        passed: true,
    };
    let mut rng = derive_rng(seed, "theory-check");
    for _ in 0..random {
        let m = random_stochastic_mdp(6, 2, 0.9, &mut rng);
        let rep = RepMap::random_partition(6, 3, 2, &mut rng)?;
        let r = check_prop1(&m, &rep, 30)?;
        prop1.worst_gap = prop1.worst_gap.max(r.limsup_gap);
        prop1.worst_bound = prop1.worst_bound.max(r.bound);
        prop1.passed &= r.holds;

        let m = random_deterministic_mdp(6, 2, 0.9, &mut rng);
        let rep = RepMap::random_partition(6, 3, 2, &mut rng)?;
        let r = check_thm1(&m, &rep)?;
        thm1.worst_gap = thm1.worst_gap.max(r.gap);
        thm1.worst_bound = thm1.worst_bound.max(r.bound);
        thm1.passed &= r.holds;
        let r = check_avi(&m, &rep)?;
        avi.worst_gap = avi.worst_gap.max(r.gap);
        avi.worst_bound = avi.worst_bound.max(r.bound);
        avi.passed &= r.holds;
        let r = check_thm2_transfer(&m, &rep)?;
        thm2.worst_gap = thm2.worst_gap.max(r.gap);
        thm2.worst_bound = thm2.worst_bound.max(r.bound);
        thm2.passed &= r.holds;
    }
    lines.extend([prop1, thm1, avi, thm2]);
    Ok(lines)
}

fn gradcheck_command(args: &[String]) -> Result<(), i32> {
    let flags = parse_flags(args, &["seed"])?;
    let seed: u64 = parsed_flag(&flags, "seed", 0)?;
    let report = run_all(&mut derive_rng(seed, "gradcheck")).map_err(|e| {
        eprintln!("gradient check failed to run: {e}");
        EXIT_RUNTIME
    })?;
    for case in &report.cases {
        println!("{:<28} max relative error {:.3e}", case.name, case.max_rel_err);
    }
    if report.passed(GRADCHECK_TOL) {
        println!("all {} cases within {GRADCHECK_TOL:.0e}", report.cases.len());
        Ok(())
    } else {
        eprintln!("worst relative error {:.3e} exceeds {GRADCHECK_TOL:.0e}", report.max_rel_err());
        Err(EXIT_CHECK_FAILED)
    }
}

fn validate_command(args: &[String]) -> Result<(), i32> {
    let flags = parse_flags(args, &["env", "pairs", "seed"])?;
    let pairs: usize = parsed_flag(&flags, "pairs", 200)?;
    let seed: u64 = parsed_flag(&flags, "seed", 0)?;
    let Some(env) = flags.get("env") else {
        eprintln!("--env is required (gridmaze or cartpole)");
        return Err(EXIT_CONFIG);
    };
    let report = match env.as_str() {
        "gridmaze" => {
            let map = MazeMap::default_map();
            let mut source = GridMaze::new(map.clone(), Face::Vector, GoalMode::Resample);
            let mut target = GridMaze::new(map.clone(), Face::Pixel, GoalMode::Resample);
            let f = move |obs: &crate::nn::Tensor| GridMaze::decode_pixel(&map, obs);
            check_observation_map(
                &mut source,
                &mut target,
                &f,
                pairs,
                0,
                &mut derive_rng(seed, "validate-gridmaze"),
            )
        }
        "cartpole" => {
            let dropped = || {
                vec![
                    DroppedVelocity { index: 1, position_index: 0, dt: TAU },
                    DroppedVelocity { index: 3, position_index: 2, dt: TAU },
                ]
            };
            let mut source = CartPole::new(CartFace::Vector);
            let mut target =
                BrokenSensor::new(Box::new(CartPole::new(CartFace::Vector)), dropped(), 2)
                    .expect("valid wrapper arguments");
            let reconstructor =
                BrokenSensor::new(Box::new(CartPole::new(CartFace::Vector)), dropped(), 2)
                    .expect("valid wrapper arguments");
            let f = move |obs: &crate::nn::Tensor| reconstructor.reconstruct_base(obs);
            check_observation_map(
                &mut source,
                &mut target,
                &f,
                pairs,
                1,
                &mut derive_rng(seed, "validate-cartpole"),
            )
        }
        other => {
            eprintln!("--env `{other}` is not supported (gridmaze or cartpole)");
            return Err(EXIT_CONFIG);
        }
    };
    let report = report.map_err(|e| {
        eprintln!("validation run failed: {e}");
        EXIT_RUNTIME
    })?;
    println!(
        "{env}: {} pairs checked, {} mismatches",
        report.pairs_checked, report.mismatches
    );
    if report.passed(pairs) {
        Ok(())
    } else {
        eprintln!("observation map does not commute");
        Err(EXIT_CHECK_FAILED)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unknown_command_and_missing_flags_exit_with_config_code() {
        assert_eq!(cli(&args(&["frobnicate"])), EXIT_CONFIG);
        assert_eq!(cli(&args(&[])), EXIT_CONFIG);
        assert_eq!(cli(&args(&["train-source"])), EXIT_CONFIG);
        assert_eq!(cli(&args(&["gradcheck", "--bogus", "1"])), EXIT_CONFIG);
    }

    #[test]
    fn gradcheck_passes() {
        assert_eq!(cli(&args(&["gradcheck", "--seed", "3"])), EXIT_OK);
    }

    #[test]
    fn validators_pass_on_both_environments() {
        assert_eq!(
            cli(&args(&["validate-env", "--env", "gridmaze", "--pairs", "50"])),
            EXIT_OK
        );
        assert_eq!(
            cli(&args(&["validate-env", "--env", "cartpole", "--pairs", "50", "--seed", "7"])),
            EXIT_OK
        );
        assert_eq!(cli(&args(&["validate-env", "--env", "pong"])), EXIT_CONFIG);
    }

    #[test]
    fn theory_check_passes_with_random_instances() {
        assert_eq!(cli(&args(&["theory-check", "--random", "5", "--seed", "11"])), EXIT_OK);
    }

    #[test]
    fn training_command_runs_a_tiny_config() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("run.conf");
        std::fs::write(
            &config_path,
            "env.name = gridmaze\nrun.baseline = single\nrun.total_steps = 80\n\
             run.eval_every = 40\nrun.eval_episodes = 2\nagent.batch_size = 8\n\
             agent.encoding_dim = 8\n",
        )
        .unwrap();
        let code = cli(&args(&[
            "baseline",
            "--config",
            config_path.to_str().unwrap(),
            "--seed",
            "2",
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ]));
        assert_eq!(code, EXIT_OK);
        assert!(dir.path().join("out/seed_2/metrics.csv").exists());
        assert!(dir.path().join("out/aggregate.csv").exists());
        // Command/kind mismatch is a configuration error.
        let code = cli(&args(&["train-target", "--config", config_path.to_str().unwrap()]));
        assert_eq!(code, EXIT_CONFIG);
    }
}
