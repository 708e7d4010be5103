//! Checks that each source/target environment pair really differs only in
//! its observation map: driving both copies with the same seed and actions,
//! a known decoder must map every target observation back to the source
//! observation exactly.
//!
//! * grid maze: pixel frames decode back to the one-hot (position, goal)
//!   vector;
//! * cart-pole: dropped velocities are reconstructed from stacked positions
//!   by finite differences (the first step of an episode is skipped, since
//!   the initial frame stack holds no history).
//!
//! Run with: `cargo run --release --example validate_env`

use obstransfer::derive_rng;
use obstransfer::envs::{
    check_observation_map, BrokenSensor, CartFace, CartPole, DroppedVelocity, Face, GoalMode,
    GridMaze, MazeMap, TAU,
};
use obstransfer::nn::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pairs = 300;

    let map = MazeMap::default_map();
    let mut source = GridMaze::new(map.clone(), Face::Vector, GoalMode::Resample);
    let mut target = GridMaze::new(map.clone(), Face::Pixel, GoalMode::Resample);
    let decode = {
        let map = map.clone();
        move |obs: &Tensor| GridMaze::decode_pixel(&map, obs)
    };
    let report = check_observation_map(
        &mut source,
        &mut target,
        &decode,
        pairs,
        0,
        &mut derive_rng(0, "validate-gridmaze"),
    )?;
    println!(
        "gridmaze vector vs pixel:   {} pairs, {} mismatches",
        report.pairs_checked, report.mismatches
    );
    if !report.passed(pairs) {
        return Err("gridmaze observation map does not commute".into());
    }

    let dropped = || {
        vec![
            DroppedVelocity { index: 1, position_index: 0, dt: TAU },
            DroppedVelocity { index: 3, position_index: 2, dt: TAU },
        ]
    };
    let mut source = CartPole::new(CartFace::Vector);
    let mut target = BrokenSensor::new(Box::new(CartPole::new(CartFace::Vector)), dropped(), 2)?;
    let reconstructor =
        BrokenSensor::new(Box::new(CartPole::new(CartFace::Vector)), dropped(), 2)?;
    let decode = move |obs: &Tensor| reconstructor.reconstruct_base(obs);
    let report = check_observation_map(
        &mut source,
        &mut target,
        &decode,
        pairs,
        1,
        &mut derive_rng(0, "validate-cartpole"),
    )?;
    println!(
        "cartpole full vs degraded:  {} pairs, {} mismatches",
        report.pairs_checked, report.mismatches
    );
    if !report.passed(pairs) {
        return Err("cartpole observation map does not commute".into());
    }
    Ok(())
}
