use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Env, EnvError, Transition};
use crate::nn::Tensor;

pub const STEP_PENALTY: f64 = -0.01;
pub const GOAL_REWARD: f64 = 1.0;
pub const HORIZON: usize = 100;

const DEFAULT_MAP: &str = "\
........
.##.##..
.#...#..
...#....
.#.###..
.#...#..
..##....
........
";

/// Which observation the environment emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Face {
    /// `[ax/w, ay/h, gx/w, gy/h]`
    Vector,
    /// 3-channel one-hot image: agent, goal, walls.
    Pixel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalMode {
    /// New goal cell every episode (default).
    Resample,
    /// Goal drawn once on the first reset, then reused.
    Fixed,
    /// Goal pinned to a specific open cell `(x, y)`. Runs that must share
    /// one underlying task — e.g. a vector source and a pixel target —
    /// need this, because `Fixed` draws from the run's own seed.
    Pinned(usize, usize),
}

/// Wall layout, row-major.
#[derive(Clone, Debug)]
pub struct MazeMap {
    width: usize,
    height: usize,
    walls: Vec<bool>,
}

impl MazeMap {
    /// Parses a `#`/`.` grid, one row per line.
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let mut walls = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            match width {
                None => width = Some(line.chars().count()),
                Some(w) if line.chars().count() != w => {
                    return Err(EnvError::BadMap(format!(
                        "row {} has {} cells, expected {}",
                        i + 1,
                        line.chars().count(),
                        w
                    )));
                }
                _ => {}
            }
            for (j, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    other => {
                        return Err(EnvError::BadMap(format!(
                            "unexpected character {:?} at row {} col {}",
                            other,
                            i + 1,
                            j + 1
                        )));
                    }
                }
            }
            height += 1;
        }
        let width = width.ok_or_else(|| EnvError::BadMap("empty map".into()))?;
        let map = Self { width, height, walls };
        let open = map.open_cells();
        if open.len() < 2 {
            return Err(EnvError::BadMap("need at least two open cells".into()));
        }
        if !map.is_connected() {
            return Err(EnvError::BadMap("open cells are not connected".into()));
        }
        Ok(map)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnvError::BadMap(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn default_map() -> Self {
        Self::parse(DEFAULT_MAP).expect("built-in map is valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_wall(&self, x: usize, y: usize) -> bool {
        self.walls[y * self.width + x]
    }

    pub fn open_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.is_wall(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    fn is_connected(&self) -> bool {
        let open = self.open_cells();
        let dists = self.bfs_distances(open[0]);
        open.iter().all(|c| dists[c.1 * self.width + c.0].is_some())
    }

    /// Shortest step counts from `from` to every cell (None = unreachable).
    pub fn bfs_distances(&self, from: (usize, usize)) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.width * self.height];
        let mut queue = VecDeque::new();
        dist[from.1 * self.width + from.0] = Some(0);
        queue.push_back(from);
        while let Some((x, y)) = queue.pop_front() {
            let d = dist[y * self.width + x].unwrap();
            for (dx, dy) in [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)] {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if self.is_wall(nx, ny) || dist[ny * self.width + nx].is_some() {
                    continue;
                }
                dist[ny * self.width + nx] = Some(d + 1);
                queue.push_back((nx, ny));
            }
        }
        dist
    }

    /// Undiscounted return of the shortest path: one step-penalty per move
    /// except the final move, which earns the goal reward.
    pub fn optimal_return(&self, start: (usize, usize), goal: (usize, usize)) -> Option<f64> {
        let d = self.bfs_distances(start)[goal.1 * self.width + goal.0]?;
        if d == 0 {
            return Some(0.0);
        }
        Some(GOAL_REWARD + STEP_PENALTY * (d - 1) as f64)
    }
}

/// Shortest-path navigation on a wall grid. Actions: 0 up, 1 down, 2 left,
/// 3 right; bumping a wall or the boundary leaves the agent in place.
pub struct GridMaze {
    map: MazeMap,
    face: Face,
    goal_mode: GoalMode,
    fixed_goal: Option<(usize, usize)>,
    agent: (usize, usize),
    goal: (usize, usize),
    steps: usize,
    done: bool,
    started: bool,
}

impl GridMaze {
    pub fn new(map: MazeMap, face: Face, goal_mode: GoalMode) -> Self {
        let fixed_goal = match goal_mode {
            GoalMode::Pinned(x, y) => Some((x, y)),
            _ => None,
        };
        Self {
            map,
            face,
            goal_mode,
            fixed_goal,
            agent: (0, 0),
            goal: (0, 0),
            steps: 0,
            done: false,
            started: false,
        }
    }

    pub fn map(&self) -> &MazeMap {
        &self.map
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    fn vector_obs(&self) -> Tensor {
        let w = self.map.width as f64;
        let h = self.map.height as f64;
        Tensor::from_vec(vec![
            self.agent.0 as f64 / w,
            self.agent.1 as f64 / h,
            self.goal.0 as f64 / w,
            self.goal.1 as f64 / h,
        ])
    }

    fn pixel_obs(&self) -> Tensor {
        let (w, h) = (self.map.width, self.map.height);
        let mut data = vec![0.0; 3 * w * h];
        data[self.agent.1 * w + self.agent.0] = 1.0;
        data[w * h + self.goal.1 * w + self.goal.0] = 1.0;
        for y in 0..h {
            for x in 0..w {
                if self.map.is_wall(x, y) {
                    data[2 * w * h + y * w + x] = 1.0;
                }
            }
        }
        Tensor::new(vec![3, h, w], data).expect("pixel obs shape")
    }

    fn obs(&self) -> Tensor {
        match self.face {
            Face::Vector => self.vector_obs(),
            Face::Pixel => self.pixel_obs(),
        }
    }

    /// Decodes a pixel observation back to the vector face.
    pub fn decode_pixel(map: &MazeMap, obs: &Tensor) -> Result<Tensor, EnvError> {
        let (w, h) = (map.width, map.height);
        if obs.shape() != [3, h, w] {
            return Err(EnvError::Undecodable(format!(
                "expected [3, {h}, {w}] image, got {:?}",
                obs.shape()
            )));
        }
        let find_one = |channel: usize| -> Result<(usize, usize), EnvError> {
            let plane = &obs.data()[channel * w * h..(channel + 1) * w * h];
            let mut found = None;
            for (i, v) in plane.iter().enumerate() {
                if *v == 1.0 {
                    if found.is_some() {
                        return Err(EnvError::Undecodable(format!(
                            "channel {channel} has multiple set pixels"
                        )));
                    }
                    found = Some((i % w, i / w));
                } else if *v != 0.0 {
                    return Err(EnvError::Undecodable(format!(
                        "channel {channel} has non-binary value {v}"
                    )));
                }
            }
            found.ok_or_else(|| EnvError::Undecodable(format!("channel {channel} is empty")))
        };
        let agent = find_one(0)?;
        let goal = find_one(1)?;
        Ok(Tensor::from_vec(vec![
            agent.0 as f64 / w as f64,
            agent.1 as f64 / h as f64,
            goal.0 as f64 / w as f64,
            goal.1 as f64 / h as f64,
        ]))
    }
}

impl Env for GridMaze {
    fn obs_shape(&self) -> Vec<usize> {
        match self.face {
            Face::Vector => vec![4],
            Face::Pixel => vec![3, self.map.height, self.map.width],
        }
    }

    fn num_actions(&self) -> usize {
        4
    }

    fn horizon(&self) -> usize {
        HORIZON
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Tensor, EnvError> {
        let open = self.map.open_cells();
        // Draw order (agent, then goal) is part of the determinism
        // contract that keeps paired faces in lockstep.
        self.agent = open[rng.gen_range(0..open.len())];
        match self.fixed_goal {
            Some(g) => {
                while self.agent == g {
                    self.agent = open[rng.gen_range(0..open.len())];
                }
                self.goal = g;
            }
            None => {
                let mut g = open[rng.gen_range(0..open.len())];
                while g == self.agent {
                    g = open[rng.gen_range(0..open.len())];
                }
                self.goal = g;
                if self.goal_mode == GoalMode::Fixed {
                    self.fixed_goal = Some(g);
                }
            }
        }
        self.steps = 0;
        self.done = false;
        self.started = true;
        Ok(self.obs())
    }

    fn step(&mut self, action: usize) -> Result<Transition, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action >= 4 {
            return Err(EnvError::InvalidAction { got: action, num: 4 });
        }
        let (x, y) = (self.agent.0 as i64, self.agent.1 as i64);
        let (nx, ny) = match action {
            0 => (x, y - 1),
            1 => (x, y + 1),
            2 => (x - 1, y),
            _ => (x + 1, y),
        };
        let in_bounds = nx >= 0
            && ny >= 0
            && nx < self.map.width as i64
            && ny < self.map.height as i64;
        if in_bounds && !self.map.is_wall(nx as usize, ny as usize) {
            self.agent = (nx as usize, ny as usize);
        }
        self.steps += 1;
        let reward;
        let mut truncated = false;
        if self.agent == self.goal {
            reward = GOAL_REWARD;
            self.done = true;
        } else {
            reward = STEP_PENALTY;
            if self.steps >= HORIZON {
                self.done = true;
                truncated = true;
            }
        }
        Ok(Transition { obs: self.obs(), reward, done: self.done, truncated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;

    #[test]
    fn default_map_is_connected_8x8() {
        let map = MazeMap::default_map();
        assert_eq!((map.width(), map.height()), (8, 8));
        let open = map.open_cells();
        let d = map.bfs_distances(open[0]);
        assert!(open.iter().all(|c| d[c.1 * 8 + c.0].is_some()));
    }

    #[test]
    fn parse_rejects_ragged_and_unknown() {
        assert!(MazeMap::parse("..\n...\n").is_err());
        assert!(MazeMap::parse("..\n.x\n").is_err());
        assert!(MazeMap::parse("").is_err());
        // Two open cells separated by walls: not connected.
        assert!(MazeMap::parse(".#.\n###\n").is_err());
    }

    #[test]
    fn reset_is_deterministic_and_valid() {
        let mut env = GridMaze::new(MazeMap::default_map(), Face::Vector, GoalMode::Resample);
        let a = env.reset(&mut derive_rng(5, "maze")).unwrap();
        let (agent, goal) = (env.agent(), env.goal());
        assert_ne!(agent, goal);
        assert!(!env.map().is_wall(agent.0, agent.1));
        assert!(!env.map().is_wall(goal.0, goal.1));
        let b = env.reset(&mut derive_rng(5, "maze")).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fixed_goal_mode_reuses_first_goal() {
        let mut env = GridMaze::new(MazeMap::default_map(), Face::Vector, GoalMode::Fixed);
        let mut rng = derive_rng(9, "maze-fixed");
        env.reset(&mut rng).unwrap();
        let goal = env.goal();
        for _ in 0..20 {
            env.reset(&mut rng).unwrap();
            assert_eq!(env.goal(), goal);
        }
    }

    #[test]
    fn step_rules_walls_and_penalty() {
        // Open 3x3 room: move up from center, then bump the top wall.
        let map = MazeMap::parse("...\n...\n...\n").unwrap();
        let mut env = GridMaze::new(map, Face::Vector, GoalMode::Resample);
        let mut rng = derive_rng(0, "m");
        loop {
            env.reset(&mut rng).unwrap();
            if env.agent() == (1, 1) && env.goal() != (1, 0) && env.goal() != (0, 0) {
                break;
            }
        }
        let t = env.step(0).unwrap();
        assert_eq!(env.agent(), (1, 0));
        assert_eq!(t.reward, STEP_PENALTY);
        let t = env.step(0).unwrap();
        assert_eq!(env.agent(), (1, 0)); // boundary bump
        assert_eq!(t.reward, STEP_PENALTY);
    }

    #[test]
    fn reaching_goal_pays_and_ends() {
        let map = MazeMap::parse("..\n..\n").unwrap();
        let mut env = GridMaze::new(map, Face::Vector, GoalMode::Resample);
        let mut rng = derive_rng(1, "m");
        loop {
            env.reset(&mut rng).unwrap();
            if env.agent() == (0, 0) && env.goal() == (1, 0) {
                break;
            }
        }
        let t = env.step(3).unwrap();
        assert_eq!(t.reward, GOAL_REWARD);
        assert!(t.done);
        assert!(matches!(env.step(0), Err(EnvError::StepAfterDone)));
    }

    #[test]
    fn horizon_truncates() {
        let map = MazeMap::parse("...\n").unwrap();
        let mut env = GridMaze::new(map, Face::Vector, GoalMode::Resample);
        let mut rng = derive_rng(2, "m");
        loop {
            env.reset(&mut rng).unwrap();
            if env.agent() == (0, 0) && env.goal() == (2, 0) {
                break;
            }
        }
        // Bump the left boundary forever; the goal is never reached.
        for step in 1..=HORIZON {
            let t = env.step(2).unwrap();
            assert_eq!(t.done, step == HORIZON);
            assert_eq!(t.reward, STEP_PENALTY);
        }
        assert!(matches!(env.step(2), Err(EnvError::StepAfterDone)));
    }

    #[test]
    fn pixel_face_one_hot_and_decodable() {
        let mut env = GridMaze::new(MazeMap::default_map(), Face::Pixel, GoalMode::Resample);
        let mut vec_env = GridMaze::new(MazeMap::default_map(), Face::Vector, GoalMode::Resample);
        let mut r1 = derive_rng(7, "px");
        let mut r2 = derive_rng(7, "px");
        let img = env.reset(&mut r1).unwrap();
        let vec = vec_env.reset(&mut r2).unwrap();
        assert_eq!(img.shape(), &[3, 8, 8]);
        let agent_sum: f64 = img.data()[0..64].iter().sum();
        let goal_sum: f64 = img.data()[64..128].iter().sum();
        assert_eq!(agent_sum, 1.0);
        assert_eq!(goal_sum, 1.0);
        for y in 0..8 {
            for x in 0..8 {
                let want = if env.map().is_wall(x, y) { 1.0 } else { 0.0 };
                assert_eq!(img.data()[128 + y * 8 + x], want);
            }
        }
        let decoded = GridMaze::decode_pixel(env.map(), &img).unwrap();
        assert_eq!(decoded.data(), vec.data());
    }

    #[test]
    fn optimal_return_adjacent_is_goal_reward() {
        let map = MazeMap::parse("..\n..\n").unwrap();
        assert_eq!(map.optimal_return((0, 0), (1, 0)), Some(1.0));
        assert_eq!(map.optimal_return((0, 0), (1, 1)), Some(1.0 + STEP_PENALTY));
    }
}
