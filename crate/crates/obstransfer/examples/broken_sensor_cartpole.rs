//! Sensor-degradation transfer on cart-pole: the source agent sees the full
//! 4-dimensional state; the target's velocity sensors are broken, so it sees
//! only the two positions, stacked over two frames. The frozen source
//! dynamics model regularizes the target encoder toward representations in
//! which the learned transition and reward models stay accurate.
//!
//! Run with: `cargo run --release --example broken_sensor_cartpole`

use std::path::PathBuf;

use obstransfer::envs::CartFace;
use obstransfer::transfer::{
    run_baseline_single, run_source, run_target_transfer, Baseline, EnvChoice, RunSpec,
    LATENT_CKPT,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = PathBuf::from("target/examples-out/broken_sensor_cartpole");
    std::fs::create_dir_all(&out_dir)?;

    println!("[1/3] source: full-state cart-pole, joint dynamics-model fit");
    let mut source =
        RunSpec::new(EnvChoice::CartPole { face: CartFace::Vector }, Baseline::Auxiliary, 0);
    source.total_steps = 6000;
    source.eval_every = 1000;
    source.eval_episodes = 10;
    source.out_dir = Some(out_dir.join("source"));
    let src = run_source(&source)?;
    println!("  source final return {:.3}", final_return(&src.metrics));

    println!("[2/3] target: broken velocity sensors, frozen source model");
    let mut target = RunSpec::new(EnvChoice::CartPoleBroken { stack: 2 }, Baseline::Transfer, 0);
    target.total_steps = 4000;
    target.eval_every = 1000;
    target.eval_episodes = 10;
    target.in_path = Some(out_dir.join("source").join(LATENT_CKPT));
    let transferred = run_target_transfer(&target)?;

    println!("[3/3] comparison: identical degraded agent, no regularizer");
    let mut plain = target.clone();
    plain.baseline = Baseline::Single;
    plain.in_path = None;
    let single = run_baseline_single(&plain)?;

    println!();
    println!("degraded-sensor target, same seed and budget:");
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
