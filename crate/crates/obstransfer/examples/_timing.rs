use obstransfer::dqn::AgentConfig;
use obstransfer::envs::{CartFace, Face, GoalMode, MazeMap};
use obstransfer::transfer::{
    run_baseline_single, run_source, run_target_transfer, Baseline, EnvChoice, RunSpec, LATENT_CKPT,
};

fn main() {
    // Criterion-9 recipe re-check under current semantics: vector maze
    // source, lambda 18, 20k steps, 5 seeds.
    for m in [1usize, 10] {
        let mut finals = Vec::new();
        for seed in 0u64..5 {
            let mut c = AgentConfig::default();
            c.gamma = 0.9;
            c.stable_period = m;
            c.epsilon_end = 0.1;
            c.epsilon_decay_steps = 10_000;
            let mut src = RunSpec::new(
                EnvChoice::GridMaze { face: Face::Vector, map: MazeMap::default_map(), goal: GoalMode::Pinned(7, 7) },
                Baseline::Auxiliary, seed);
            src.total_steps = 20_000;
            src.eval_every = 20_000;
            src.eval_episodes = 100;
            src.agent = c;
            let r = run_source(&src).unwrap();
            finals.push(r.metrics.last().unwrap().eval_return_mean.unwrap());
        }
        println!("source m={m} final evals: {:?}", finals.iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
    }

    // CartPole scenario re-check.
    let out = std::path::PathBuf::from("/tmp/cal_cp_stable");
    let mut src = RunSpec::new(EnvChoice::CartPole { face: CartFace::Vector }, Baseline::Auxiliary, 1000);
    src.total_steps = 30_000;
    src.eval_every = 3000;
    src.eval_episodes = 10;
    src.agent.stable_period = 1;
    src.out_dir = Some(out.clone());
    run_source(&src).unwrap();
    println!("cartpole source done");
    let mut wins = 0;
    let (mut ts, mut ss) = (0.0, 0.0);
    for seed in 0u64..5 {
        let mut c = AgentConfig::default();
        c.epsilon_decay_steps = 1500;
        c.lambda = 4.0;
        let mut sp = RunSpec::new(EnvChoice::CartPoleBroken { stack: 2 }, Baseline::Single, seed);
        sp.total_steps = 20_000; sp.eval_every = 500; sp.eval_episodes = 50; sp.agent = c.clone();
        let si = run_baseline_single(&sp).unwrap().auc;
        let mut tp = RunSpec::new(EnvChoice::CartPoleBroken { stack: 2 }, Baseline::Transfer, seed);
        tp.total_steps = 20_000; tp.eval_every = 500; tp.eval_episodes = 50; tp.agent = c;
        tp.in_path = Some(out.join(LATENT_CKPT));
        let tr = run_target_transfer(&tp).unwrap().auc;
        if tr > si { wins += 1; }
        ts += tr; ss += si;
        println!("cartpole seed {seed}: transfer {tr:.0} vs single {si:.0}");
    }
    println!("cartpole wins {wins}/5, mean {:.0} vs {:.0}", ts / 5.0, ss / 5.0);
}
