use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::dqn::AgentConfig;
use crate::envs::{CartFace, Face, GoalMode, MazeMap};
use crate::transfer::{Baseline, EnvChoice, RunSpec, ALIGN_BATCH, ALIGN_EPOCHS};

/// What a configured experiment runs: source-task training or one of the
/// target-task modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunKind {
    Source,
    Transfer,
    Single,
    Auxiliary,
    FineTune,
    TimeAligned,
    TransitionOnly,
    RewardOnly,
}

impl RunKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "source" => RunKind::Source,
            "transfer" => RunKind::Transfer,
            "single" => RunKind::Single,
            "auxiliary" => RunKind::Auxiliary,
            "finetune" => RunKind::FineTune,
            "time-aligned" => RunKind::TimeAligned,
            "p-only" => RunKind::TransitionOnly,
            "r-only" => RunKind::RewardOnly,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            RunKind::Source => "source",
            RunKind::Transfer => "transfer",
            RunKind::Single => "single",
            RunKind::Auxiliary => "auxiliary",
            RunKind::FineTune => "finetune",
            RunKind::TimeAligned => "time-aligned",
            RunKind::TransitionOnly => "p-only",
            RunKind::RewardOnly => "r-only",
        }
    }

    pub fn needs_input(self) -> bool {
        matches!(
            self,
            RunKind::Transfer
                | RunKind::FineTune
                | RunKind::TimeAligned
                | RunKind::TransitionOnly
                | RunKind::RewardOnly
        )
    }

    /// The run-spec mode this kind maps to. Source runs use the
    /// model-alongside flags internally.
    fn baseline(self) -> Baseline {
        match self {
            RunKind::Source | RunKind::Auxiliary => Baseline::Auxiliary,
            RunKind::Transfer => Baseline::Transfer,
            RunKind::Single => Baseline::Single,
            RunKind::FineTune => Baseline::FineTune,
            RunKind::TimeAligned => Baseline::TimeAligned,
            RunKind::TransitionOnly => Baseline::TransitionOnly,
            RunKind::RewardOnly => Baseline::RewardOnly,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub env: EnvChoice,
    pub agent: AgentConfig,
    pub kind: RunKind,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub in_ckpt: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub align_epochs: usize,
    pub align_batch: usize,
}

impl ExperimentConfig {
    pub fn run_spec(&self, seed: u64) -> RunSpec {
        let mut spec = RunSpec::new(self.env.clone(), self.kind.baseline(), seed);
        spec.agent = self.agent.clone();
        spec.total_steps = self.total_steps;
        spec.eval_every = self.eval_every;
        spec.eval_episodes = self.eval_episodes;
        spec.in_path = self.in_ckpt.clone();
        spec.out_dir = self.out_dir.as_ref().map(|d| d.join(format!("seed_{seed}")));
        spec.align_epochs = self.align_epochs;
        spec.align_batch = self.align_batch;
        spec
    }
}

const KNOWN_KEYS: &[&str] = &[
    "env.name",
    "env.face",
    "env.map_path",
    "env.stack",
    "env.goal",
    "agent.gamma",
    "agent.lr",
    "agent.batch_size",
    "agent.replay_capacity",
    "agent.target_update_period",
    "agent.epsilon_start",
    "agent.epsilon_end",
    "agent.epsilon_decay_steps",
    "agent.encoding_dim",
    "agent.lambda",
    "agent.stable_period",
    "run.baseline",
    "run.total_steps",
    "run.eval_every",
    "run.eval_episodes",
    "run.seeds",
    "run.align_epochs",
    "run.align_batch",
    "io.in_ckpt",
    "io.out_dir",
];

struct RawConfig {
    /// key -> (line number, value)
    entries: HashMap<String, (usize, String)>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut entries: HashMap<String, (usize, String)> = HashMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::Config(format!(
                    "line {line_no}: expected `key = value`, got {raw_line:?}"
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(HarnessError::Config(format!(
                    "line {line_no}: unknown key `{key}`"
                )));
            }
            if let Some((first_line, _)) = entries.get(&key) {
                return Err(HarnessError::Config(format!(
                    "duplicate key `{key}` on lines {first_line} and {line_no}"
                )));
            }
            entries.insert(key, (line_no, value));
        }
        Ok(Self { entries })
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, HarnessError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, value)) => value.parse::<T>().map(Some).map_err(|_| {
                HarnessError::Config(format!(
                    "line {line}: key `{key}` has invalid value {value:?}"
                ))
            }),
        }
    }
}

pub fn parse_config_text(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let mut raw = RawConfig::parse(text)?;

    let (name_line, env_name) = raw
        .take("env.name")
        .ok_or_else(|| HarnessError::Config("missing required key `env.name`".into()))?;
    let face = raw.take("env.face");
    let goal = raw.take("env.goal");
    let map_path = raw.take("env.map_path");
    let stack: usize = raw.parsed("env.stack")?.unwrap_or(2);

    let env = match env_name.as_str() {
        "gridmaze" => {
            let map = match &map_path {
                Some((line, p)) => MazeMap::load(Path::new(p)).map_err(|e| {
                    HarnessError::Config(format!("line {line}: env.map_path: {e}"))
                })?,
                None => MazeMap::default_map(),
            };
            let goal = match goal.as_deref_value() {
                None | Some("resample") => GoalMode::Resample,
                Some("fixed") => GoalMode::Fixed,
                Some(other) => match other
                    .split_once(',')
                    .and_then(|(x, y)| Some((x.trim().parse().ok()?, y.trim().parse().ok()?)))
                {
                    Some((x, y)) => GoalMode::Pinned(x, y),
                    None => {
                        return Err(HarnessError::Config(format!(
                            "env.goal `{other}` is not valid for gridmaze (resample|fixed|X,Y)"
                        )))
                    }
                },
            };
            let face = match face.as_deref_value() {
                None | Some("vector") => Face::Vector,
                Some("pixel") => Face::Pixel,
                Some(other) => {
                    return Err(HarnessError::Config(format!(
                        "env.face `{other}` is not valid for gridmaze (vector|pixel)"
                    )))
                }
            };
            EnvChoice::GridMaze { face, map, goal }
        }
        "cartpole" => {
            if map_path.is_some() {
                return Err(HarnessError::Config(
                    "env.map_path only applies to gridmaze".into(),
                ));
            }
            if goal.is_some() {
                return Err(HarnessError::Config(
                    "env.goal only applies to gridmaze".into(),
                ));
            }
            match face.as_deref_value() {
                None | Some("vector") => EnvChoice::CartPole { face: CartFace::Vector },
                Some("pixel") => EnvChoice::CartPole { face: CartFace::Pixel },
                Some("broken") => EnvChoice::CartPoleBroken { stack },
                Some(other) => {
                    return Err(HarnessError::Config(format!(
                        "env.face `{other}` is not valid for cartpole (vector|pixel|broken)"
                    )))
                }
            }
        }
        other => {
            return Err(HarnessError::Config(format!(
                "line {name_line}: env.name `{other}` (expected gridmaze or cartpole)"
            )))
        }
    };

    let mut agent = AgentConfig::default();
    if let Some(v) = raw.parsed("agent.gamma")? {
        agent.gamma = v;
    }
    if let Some(v) = raw.parsed("agent.lr")? {
        agent.lr = v;
    }
    if let Some(v) = raw.parsed("agent.batch_size")? {
        agent.batch_size = v;
    }
    if let Some(v) = raw.parsed("agent.replay_capacity")? {
        agent.replay_capacity = v;
    }
    if let Some(v) = raw.parsed("agent.target_update_period")? {
        agent.target_update_period = v;
    }
    if let Some(v) = raw.parsed("agent.epsilon_start")? {
        agent.epsilon_start = v;
    }
    if let Some(v) = raw.parsed("agent.epsilon_end")? {
        agent.epsilon_end = v;
    }
    if let Some(v) = raw.parsed("agent.epsilon_decay_steps")? {
        agent.epsilon_decay_steps = v;
    }
    if let Some(v) = raw.parsed("agent.encoding_dim")? {
        agent.encoding_dim = v;
    }
    if let Some(v) = raw.parsed("agent.lambda")? {
        agent.lambda = v;
    }
    if let Some(v) = raw.parsed("agent.stable_period")? {
        agent.stable_period = v;
    }

    let kind = match raw.take("run.baseline") {
        None => RunKind::Single,
        Some((line, v)) => RunKind::parse(&v).ok_or_else(|| {
            HarnessError::Config(format!(
                "line {line}: run.baseline `{v}` (expected source|transfer|single|auxiliary|finetune|time-aligned|p-only|r-only)"
            ))
        })?,
    };

    let seeds = match raw.take("run.seeds") {
        None => vec![0],
        Some((line, v)) => {
            let seeds: Result<Vec<u64>, _> =
                v.split(',').map(|t| t.trim().parse::<u64>()).collect();
            let seeds = seeds.map_err(|_| {
                HarnessError::Config(format!("line {line}: run.seeds must be integers: {v:?}"))
            })?;
            if seeds.is_empty() {
                return Err(HarnessError::Config(format!(
                    "line {line}: run.seeds must be nonempty"
                )));
            }
            seeds
        }
    };

    let in_ckpt = raw.take("io.in_ckpt").map(|(_, v)| PathBuf::from(v));
    if kind.needs_input() && in_ckpt.is_none() {
        return Err(HarnessError::Config(format!(
            "run.baseline={} requires io.in_ckpt",
            kind.name()
        )));
    }
    if !kind.needs_input() && in_ckpt.is_some() {
        return Err(HarnessError::Config(format!(
            "run.baseline={} takes no io.in_ckpt",
            kind.name()
        )));
    }

    let config = ExperimentConfig {
        env,
        agent,
        kind,
        total_steps: raw.parsed("run.total_steps")?.unwrap_or(20_000),
        eval_every: raw.parsed("run.eval_every")?.unwrap_or(1000),
        eval_episodes: raw.parsed("run.eval_episodes")?.unwrap_or(20),
        seeds,
        in_ckpt,
        out_dir: raw.take("io.out_dir").map(|(_, v)| PathBuf::from(v)),
        align_epochs: raw.parsed("run.align_epochs")?.unwrap_or(ALIGN_EPOCHS),
        align_batch: raw.parsed("run.align_batch")?.unwrap_or(ALIGN_BATCH),
    };
    config
        .agent
        .validate()
        .map_err(|e| HarnessError::Config(format!("agent configuration: {e}")))?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    parse_config_text(&text)
}

trait OptionDeref {
    fn as_deref_value(&self) -> Option<&str>;
}

impl OptionDeref for Option<(usize, String)> {
    fn as_deref_value(&self) -> Option<&str> {
        self.as_ref().map(|(_, v)| v.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_applies_defaults() {
        let c = parse_config_text("env.name = gridmaze\n").unwrap();
        assert_eq!(c.agent.lambda, 18.0);
        assert_eq!(c.agent.encoding_dim, 16);
        assert_eq!(c.agent.gamma, 0.99);
        assert_eq!(c.kind, RunKind::Single);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.total_steps, 20_000);
        assert!(matches!(c.env, EnvChoice::GridMaze { face: Face::Vector, .. }));
    }

    #[test]
    fn comments_and_values_parse() {
        let text = "\
# experiment
env.name = cartpole
env.face = broken  # stacked frames
env.stack = 3
agent.lambda = 2.5
run.baseline = auxiliary
run.seeds = 1, 2, 3
run.total_steps = 500
";
        let c = parse_config_text(text).unwrap();
        assert!(matches!(c.env, EnvChoice::CartPoleBroken { stack: 3 }));
        assert_eq!(c.agent.lambda, 2.5);
        assert_eq!(c.kind, RunKind::Auxiliary);
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.total_steps, 500);
    }

    #[test]
    fn transfer_without_input_names_the_key() {
        let err = parse_config_text("env.name = gridmaze\nrun.baseline = transfer\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("io.in_ckpt"), "{err}");
    }

    #[test]
    fn duplicate_key_reports_both_lines() {
        let err = parse_config_text("env.name = gridmaze\nagent.lr = 0.1\nagent.lr = 0.2\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("lines 2 and 3"), "{err}");
    }

    #[test]
    fn unknown_key_and_bad_value_are_rejected_with_lines() {
        let err = parse_config_text("env.name = gridmaze\nagent.typo = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains("agent.typo"), "{err}");
        let err = parse_config_text("env.name = gridmaze\nagent.lr = fast\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains("agent.lr"), "{err}");
    }

    #[test]
    fn run_spec_inherits_and_nests_output_dirs() {
        let mut c = parse_config_text("env.name = gridmaze\nrun.seeds = 4,5\n").unwrap();
        c.out_dir = Some(PathBuf::from("/tmp/exp"));
        let spec = c.run_spec(5);
        assert_eq!(spec.seed, 5);
        assert_eq!(spec.out_dir.as_deref(), Some(Path::new("/tmp/exp/seed_5")));
    }
}
