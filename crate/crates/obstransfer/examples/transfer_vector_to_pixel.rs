//! End-to-end observation transfer on the grid maze: train a source agent on
//! vector observations, then reuse its frozen latent dynamics model to
//! regularize a fresh agent that only sees pixels. A plain pixel agent with
//! no regularizer runs alongside for comparison.
//!
//! Pixel training is convolutional and therefore the slowest thing in this
//! crate; the step counts here are kept small so the example finishes in a
//! few minutes. The area-under-curve gap between the two runs grows with
//! longer budgets.
//!
//! Run with: `cargo run --release --example transfer_vector_to_pixel`

use std::path::PathBuf;

use obstransfer::envs::{Face, GoalMode, MazeMap};
use obstransfer::transfer::{
    run_baseline_single, run_source, run_target_transfer, Baseline, EnvChoice, RunSpec,
    LATENT_CKPT,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = PathBuf::from("target/examples-out/transfer_vector_to_pixel");
    std::fs::create_dir_all(&out_dir)?;
    let map = MazeMap::default_map();

    println!("[1/3] source: vector observations, joint dynamics-model fit");
    let mut source = RunSpec::new(
        EnvChoice::GridMaze { face: Face::Vector, map: map.clone(), goal: GoalMode::Resample },
        Baseline::Auxiliary,
        0,
    );
    source.total_steps = 5000;
    source.eval_every = 1000;
    source.eval_episodes = 10;
    source.out_dir = Some(out_dir.join("source"));
    let src = run_source(&source)?;
    println!("  source final return {:.3}", final_return(&src.metrics));

    println!("[2/3] target: pixel observations, frozen source model as regularizer");
    let mut target = RunSpec::new(
        EnvChoice::GridMaze { face: Face::Pixel, map: map.clone(), goal: GoalMode::Resample },
        Baseline::Transfer,
        0,
    );
    target.total_steps = 1200;
    target.eval_every = 300;
    target.eval_episodes = 5;
    target.in_path = Some(out_dir.join("source").join(LATENT_CKPT));
    let transferred = run_target_transfer(&target)?;

    println!("[3/3] comparison: identical pixel agent, no regularizer");
    let mut plain = target.clone();
    plain.baseline = Baseline::Single;
    plain.in_path = None;
    let single = run_baseline_single(&plain)?;

    println!();
    println!("pixel target, same seed and budget:");
    println!(
        "  transfer  auc {:>8.3}  final return {:>7.3}",
        transferred.auc,
        final_return(&transferred.metrics)
    );
    println!(
        "  single    auc {:>8.3}  final return {:>7.3}",
        single.auc,
        final_return(&single.metrics)
    );
    Ok(())
}

fn final_return(metrics: &[obstransfer::harness::MetricsRow]) -> f64 {
    metrics
        .iter()
        .rev()
        .find_map(|r| r.eval_return_mean)
        .unwrap_or(f64::NAN)
}
