//! Drives the experiment harness the way the command-line binary does:
//! parse a plain `key = value` config, run it across several seeds (set
//! `OBSTRANSFER_THREADS` to run seeds in parallel), and print the
//! seed-aggregated learning curve. The same runs are byte-reproducible:
//! rerunning this example produces identical CSV output.
//!
//! Run with: `cargo run --release --example multi_seed_suite`

use obstransfer::harness::{parse_config_text, run_suite};

const CONFIG: &str = "\
# plain single-task baseline on the grid maze, three seeds
env.name = gridmaze
env.face = vector
run.baseline = single
run.total_steps = 2000
run.eval_every = 500
run.eval_episodes = 5
run.seeds = 0,1,2
agent.encoding_dim = 16
agent.batch_size = 32
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = parse_config_text(CONFIG)?;
    let outcome = run_suite(&config)?;

    for run in &outcome.runs {
        println!("seed {}: auc {:.3}", run.seed, run.auc);
    }
    println!();
    println!("aggregate across seeds (mean, population std):");
    print!("{}", outcome.aggregate_csv);
    Ok(())
}
