//! Gridworlds, offline datasets and geometric-horizon batch sampling.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{sample_weighted, Action, MdpError, State, TabularMdp, TabularPolicy, Trajectory};
use crate::oracle::{q_star, GoalValues};
use crate::rng::{stream, uniform01};

/// Probability tolerance for teleport destination distributions.
const DEST_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("cell ({0}, {1}) is outside the grid")]
    OutOfBounds(usize, usize),
    #[error("cell ({0}, {1}) is a wall")]
    Wall(usize, usize),
    #[error("grid has no free cells")]
    NoFreeCells,
    #[error("free cell ({0}, {1}) is unreachable from the first free cell")]
    Disconnected(usize, usize),
    #[error("teleport at ({x}, {y}) has destination probabilities summing to {sum}")]
    TeleportDistribution { x: usize, y: usize, sum: f64 },
    #[error("region-confined walk regions leave cell ({0}, {1}) uncovered")]
    Coverage(usize, usize),
    #[error("region {0} contains no free cell")]
    EmptyRegion(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("trajectory {0} has fewer than one transition")]
    ShortTrajectory(usize),
    #[error("batch size must be positive")]
    BatchSize,
    #[error("discount {0} out of range")]
    Discount(f64),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("trajectory {index}: {source}")]
    Trajectory { index: usize, source: MdpError },
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Cell = (usize, usize);

/// Grid actions in id order.
pub const ACTIONS: [GridAction; 5] = [
    GridAction::Up,
    GridAction::Down,
    GridAction::Left,
    GridAction::Right,
    GridAction::Stay,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridAction {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl GridAction {
    fn delta(self) -> (isize, isize) {
        match self {
            GridAction::Up => (0, -1),
            GridAction::Down => (0, 1),
            GridAction::Left => (-1, 0),
            GridAction::Right => (1, 0),
            GridAction::Stay => (0, 0),
        }
    }

    pub fn id(self) -> Action {
        ACTIONS.iter().position(|&a| a == self).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Teleport {
    pub cell: Cell,
    pub destinations: Vec<(Cell, f64)>,
}

/// Grid layout: `(x, y)` cells with `x` in `0..width`, `y` in `0..height`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: Vec<Cell>,
    #[serde(default)]
    pub teleports: Vec<Teleport>,
    pub gamma: f64,
}

impl GridSpec {
    /// Parses rows of `#` (wall) and `.` (free); `T` marks cells that the
    /// caller will attach teleports to and is treated as free.
    pub fn from_ascii(rows: &[&str], gamma: f64) -> Self {
        let height = rows.len();
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut walls = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                if ch == '#' {
                    walls.push((x, y));
                }
            }
        }
        Self {
            width,
            height,
            walls,
            teleports: Vec::new(),
            gamma,
        }
    }
}

/// A built gridworld: the mdp plus the cell <-> state mapping.
#[derive(Clone, Debug)]
pub struct Gridworld {
    pub spec: GridSpec,
    pub mdp: TabularMdp,
    cells: Vec<Cell>,
    state_of: Vec<Option<State>>,
    teleport_states: Vec<bool>,
}

impl Gridworld {
    pub fn n_states(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, s: State) -> Cell {
        self.cells[s]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn state_at(&self, cell: Cell) -> Option<State> {
        if cell.0 >= self.spec.width || cell.1 >= self.spec.height {
            return None;
        }
        self.state_of[cell.1 * self.spec.width + cell.0]
    }

    pub fn is_teleport(&self, s: State) -> bool {
        self.teleport_states[s]
    }

    /// `(x, y)` scaled into `[0, 1]`.
    pub fn normalized_coords(&self) -> Vec<(f64, f64)> {
        let sx = (self.spec.width.max(2) - 1) as f64;
        let sy = (self.spec.height.max(2) - 1) as f64;
        self.cells.iter().map(|&(x, y)| (x as f64 / sx, y as f64 / sy)).collect()
    }

    /// Character rendering, one string per row; `labels` overrides cells.
    pub fn render(&self, labels: &[(State, char)]) -> Vec<String> {
        (0..self.spec.height)
            .map(|y| {
                (0..self.spec.width)
                    .map(|x| match self.state_at((x, y)) {
                        None => '#',
                        Some(s) => labels
                            .iter()
                            .find(|(t, _)| *t == s)
                            .map(|&(_, c)| c)
                            .unwrap_or(if self.is_teleport(s) { 'T' } else { '.' }),
                    })
                    .collect()
            })
            .collect()
    }
}

/// Builds the gridworld mdp. Moves are deterministic, blocked moves stay in
/// place, and stepping onto a teleport cell from another cell lands on one of
/// its destinations.
pub fn build_gridworld(spec: &GridSpec) -> Result<Gridworld, EnvError> {
    let (w, h) = (spec.width, spec.height);
    let mut blocked = vec![false; w * h];
    for &(x, y) in &spec.walls {
        if x >= w || y >= h {
            return Err(EnvError::OutOfBounds(x, y));
        }
        blocked[y * w + x] = true;
    }
    let mut state_of = vec![None; w * h];
    let mut cells = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !blocked[y * w + x] {
                state_of[y * w + x] = Some(cells.len());
                cells.push((x, y));
            }
        }
    }
    if cells.is_empty() {
        return Err(EnvError::NoFreeCells);
    }
    let ns = cells.len();
    let lookup = |c: Cell| -> Result<State, EnvError> {
        if c.0 >= w || c.1 >= h {
            return Err(EnvError::OutOfBounds(c.0, c.1));
        }
        state_of[c.1 * w + c.0].ok_or(EnvError::Wall(c.0, c.1))
    };

    let mut teleport_of: Vec<Option<Vec<(State, f64)>>> = vec![None; ns];
    for tp in &spec.teleports {
        let s = lookup(tp.cell)?;
        let sum: f64 = tp.destinations.iter().map(|d| d.1).sum();
        if (sum - 1.0).abs() > DEST_TOL || tp.destinations.iter().any(|d| !(d.1 >= 0.0)) {
            return Err(EnvError::TeleportDistribution {
                x: tp.cell.0,
                y: tp.cell.1,
                sum,
            });
        }
        let mut dest = Vec::new();
        for &(c, p) in &tp.destinations {
            dest.push((lookup(c)?, p / sum));
        }
        teleport_of[s] = Some(dest);
    }

    let na = ACTIONS.len();
    let mut flat = vec![0.0; ns * na * ns];
    for (s, &(x, y)) in cells.iter().enumerate() {
        for (a, act) in ACTIONS.iter().enumerate() {
            let (dx, dy) = act.delta();
            let (tx, ty) = (x as isize + dx, y as isize + dy);
            let target = if tx < 0 || ty < 0 || tx as usize >= w || ty as usize >= h {
                s
            } else {
                state_of[ty as usize * w + tx as usize].unwrap_or(s)
            };
            let row = &mut flat[(s * na + a) * ns..][..ns];
            match (&teleport_of[target], target != s) {
                (Some(dest), true) => {
                    for &(d, p) in dest {
                        row[d] += p;
                    }
                }
                _ => row[target] = 1.0,
            }
        }
    }
    let mdp = TabularMdp::new(ns, na, spec.gamma, flat)?;

    let teleport_states: Vec<bool> = teleport_of.iter().map(Option::is_some).collect();
    let origin = (0..ns).find(|&s| !teleport_states[s]).unwrap_or(0);
    let reach = reachable_from(&mdp, &[origin]);
    for s in 0..ns {
        if !teleport_states[s] && !reach[s] {
            return Err(EnvError::Disconnected(cells[s].0, cells[s].1));
        }
    }
    Ok(Gridworld {
        spec: spec.clone(),
        mdp,
        cells,
        state_of,
        teleport_states,
    })
}

/// States reachable from `starts` under any actions (breadth-first).
pub fn reachable_from(mdp: &TabularMdp, starts: &[State]) -> Vec<bool> {
    let mut seen = vec![false; mdp.n_states()];
    let mut queue = VecDeque::new();
    for &s in starts {
        if !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(s) = queue.pop_front() {
        for a in 0..mdp.n_actions() {
            for &(sp, _) in mdp.successors(s, a) {
                if !seen[sp] {
                    seen[sp] = true;
                    queue.push_back(sp);
                }
            }
        }
    }
    seen
}

/// Inclusive cell rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn contains(&self, (x, y): Cell) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Behavior {
    UniformRandomWalk,
    /// Walks that never leave their assigned rectangle; trajectory `i` uses
    /// region `i mod regions.len()`.
    RegionConfinedWalk { regions: Vec<Region> },
    /// Heads for a per-trajectory random goal, acting uniformly with
    /// probability `epsilon`.
    NoisyExpert { epsilon: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub behavior: Behavior,
    pub n_trajectories: usize,
    pub trajectory_len: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::n_transitions).sum()
    }

    pub fn check_consistent(&self, mdp: &TabularMdp) -> Result<(), EnvError> {
        for (index, t) in self.trajectories.iter().enumerate() {
            t.check_consistent(mdp)
                .map_err(|source| EnvError::Trajectory { index, source })?;
        }
        Ok(())
    }

    /// Distinct `(s, a)` pairs appearing in the data.
    pub fn visited_pairs(&self) -> std::collections::BTreeSet<(State, Action)> {
        self.trajectories
            .iter()
            .flat_map(|t| t.states.iter().zip(&t.actions).map(|(&s, &a)| (s, a)))
            .collect()
    }

    /// One JSON object per line: `{"states":[...],"actions":[...]}`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), EnvError> {
        for t in &self.trajectories {
            let line = serde_json::to_string(t).map_err(|e| EnvError::Parse {
                line: 0,
                message: e.to_string(),
            })?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, EnvError> {
        let mut trajectories = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line).map_err(|e| EnvError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if t.states.len() != t.actions.len() + 1 {
                return Err(EnvError::Parse {
                    line: i + 1,
                    message: "states must be one longer than actions".into(),
                });
            }
            trajectories.push(t);
        }
        Ok(Self { trajectories })
    }
}

/// Generates an offline dataset; trajectory `i` draws from its own stream.
pub fn generate_dataset(world: &Gridworld, spec: &DatasetSpec) -> Result<Dataset, EnvError> {
    let mdp = &world.mdp;
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let starts: Vec<State> = (0..ns).filter(|&s| !world.is_teleport(s)).collect();
    if spec.trajectory_len == 0 {
        return Err(MdpError::Horizon.into());
    }

    // per-region confined policies
    let regional: Vec<(Vec<State>, TabularPolicy)> = match &spec.behavior {
        Behavior::RegionConfinedWalk { regions } => {
            for &s in &starts {
                if !regions.iter().any(|r| r.contains(world.cell(s))) {
                    let c = world.cell(s);
                    return Err(EnvError::Coverage(c.0, c.1));
                }
            }
            regions
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let inside: Vec<bool> = (0..ns).map(|s| r.contains(world.cell(s))).collect();
                    let region_starts: Vec<State> = starts.iter().copied().filter(|&s| inside[s]).collect();
                    if region_starts.is_empty() {
                        return Err(EnvError::EmptyRegion(i));
                    }
                    Ok((region_starts, confined_policy(mdp, &inside)))
                })
                .collect::<Result<_, _>>()?
        }
        _ => Vec::new(),
    };
    let uniform = TabularPolicy::uniform(ns, na);
    let mut expert_cache: Vec<Option<GoalValues>> = vec![None; ns];

    let mut trajectories = Vec::with_capacity(spec.n_trajectories);
    for i in 0..spec.n_trajectories {
        let mut rng = stream(spec.seed, i as u64);
        let traj = match &spec.behavior {
            Behavior::UniformRandomWalk => {
                let s0 = starts[rng.gen_range(0..starts.len())];
                mdp.rollout(&uniform, s0, spec.trajectory_len, &mut rng)?
            }
            Behavior::RegionConfinedWalk { .. } => {
                let (region_starts, pi) = &regional[i % regional.len()];
                let s0 = region_starts[rng.gen_range(0..region_starts.len())];
                mdp.rollout(pi, s0, spec.trajectory_len, &mut rng)?
            }
            Behavior::NoisyExpert { epsilon } => {
                let s0 = starts[rng.gen_range(0..starts.len())];
                let goal = starts[rng.gen_range(0..starts.len())];
                let values = expert_cache[goal].get_or_insert_with(|| q_star(mdp, goal).expect("goal in range"));
                let mut states = vec![s0];
                let mut actions = Vec::with_capacity(spec.trajectory_len);
                let mut s = s0;
                for _ in 0..spec.trajectory_len {
                    let a = if uniform01(&mut rng) < *epsilon {
                        rng.gen_range(0..na)
                    } else {
                        values.greedy_action(s)
                    };
                    s = mdp.step(s, a, &mut rng)?;
                    actions.push(a);
                    states.push(s);
                }
                Trajectory { states, actions }
            }
        };
        trajectories.push(traj);
    }
    Ok(Dataset { trajectories })
}

/// Uniform over actions whose every successor stays inside the region.
fn confined_policy(mdp: &TabularMdp, inside: &[bool]) -> TabularPolicy {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut probs = vec![0.0; ns * na];
    for s in 0..ns {
        let allowed: Vec<Action> = (0..na)
            .filter(|&a| mdp.successors(s, a).iter().all(|&(sp, _)| inside[sp] || !inside[s]))
            .collect();
        let allowed = if allowed.is_empty() { (0..na).collect() } else { allowed };
        for &a in &allowed {
            probs[s * na + a] = 1.0 / allowed.len() as f64;
        }
    }
    TabularPolicy::new(ns, na, probs).expect("rows normalized")
}

/// Whether the goal offset may be zero (`g = s`) or starts one step ahead.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalOffset {
    /// `P(K = k) = (1-γ) γ^(k-1)`, `k ≥ 1`.
    #[default]
    StrictlyFuture,
    /// `P(K = k) = (1-γ) γ^k`, `k ≥ 0`.
    IncludeCurrent,
}

/// Draws a goal offset `K`.
pub fn sample_offset<R: Rng + ?Sized>(gamma: f64, convention: GoalOffset, rng: &mut R) -> usize {
    // inverse cdf of the geometric law on {0, 1, ...}
    let u = 1.0 - uniform01(rng);
    let k0 = (u.ln() / gamma.ln()).floor() as usize;
    match convention {
        GoalOffset::StrictlyFuture => k0 + 1,
        GoalOffset::IncludeCurrent => k0,
    }
}

/// `N` training tuples `(s, a, s', g)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub next_states: Vec<State>,
    pub goals: Vec<State>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn push(&mut self, s: State, a: Action, next: State, g: State) {
        self.states.push(s);
        self.actions.push(a);
        self.next_states.push(next);
        self.goals.push(g);
    }
}

/// Samples `n` tuples: a transition uniformly over all dataset transitions,
/// then a goal `K` steps ahead on the same trajectory, clamped to its end.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    n: usize,
    gamma: f64,
    convention: GoalOffset,
    rng: &mut R,
) -> Result<Batch, EnvError> {
    if n == 0 {
        return Err(EnvError::BatchSize);
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(EnvError::Discount(gamma));
    }
    let mut offsets = Vec::with_capacity(dataset.trajectories.len());
    let mut total = 0usize;
    for (i, t) in dataset.trajectories.iter().enumerate() {
        if t.n_transitions() == 0 {
            return Err(EnvError::ShortTrajectory(i));
        }
        total += t.n_transitions();
        offsets.push(total);
    }
    if total == 0 {
        return Err(EnvError::EmptyDataset);
    }
    let mut batch = Batch::default();
    for _ in 0..n {
        let flat = rng.gen_range(0..total);
        let ti = offsets.partition_point(|&end| end <= flat);
        let traj = &dataset.trajectories[ti];
        let start = if ti == 0 { 0 } else { offsets[ti - 1] };
        let t = flat - start;
        let k = sample_offset(gamma, convention, rng);
        let last = traj.states.len() - 1;
        let gi = t.saturating_add(k).min(last);
        batch.push(traj.states[t], traj.actions[t], traj.states[t + 1], traj.states[gi]);
    }
    Ok(batch)
}

/// Draws from a sparse distribution; exposed for environment-level sampling.
pub fn sample_from<R: Rng + ?Sized>(dist: &[(usize, f64)], rng: &mut R) -> usize {
    sample_weighted(dist, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn corridor(width: usize) -> Gridworld {
        build_gridworld(&GridSpec {
            width,
            height: 1,
            walls: vec![],
            teleports: vec![],
            gamma: 0.9,
        })
        .unwrap()
    }

    #[test]
    fn corridor_moves_and_blocking() {
        let w = corridor(2);
        let right = GridAction::Right.id();
        assert_eq!(w.mdp.prob(0, right, 1), 1.0);
        assert_eq!(w.mdp.prob(1, right, 1), 1.0);
        assert_eq!(w.mdp.prob(0, GridAction::Up.id(), 0), 1.0);
        assert_eq!(w.mdp.prob(1, GridAction::Stay.id(), 1), 1.0);
    }

    #[test]
    fn wall_blocks_move() {
        let spec = GridSpec::from_ascii(&["...", ".#.", "..."], 0.9);
        let w = build_gridworld(&spec).unwrap();
        let s = w.state_at((1, 0)).unwrap();
        assert_eq!(w.mdp.prob(s, GridAction::Down.id(), s), 1.0);
    }

    #[test]
    fn teleport_splits_mass() {
        let mut spec = GridSpec::from_ascii(&["....", "...."], 0.9);
        spec.teleports.push(Teleport {
            cell: (1, 0),
            destinations: vec![((3, 0), 0.5), ((3, 1), 0.5)],
        });
        let w = build_gridworld(&spec).unwrap();
        let s0 = w.state_at((0, 0)).unwrap();
        let (a, b) = (w.state_at((3, 0)).unwrap(), w.state_at((3, 1)).unwrap());
        let right = GridAction::Right.id();
        assert_eq!(w.mdp.prob(s0, right, a), 0.5);
        assert_eq!(w.mdp.prob(s0, right, b), 0.5);
        assert!(w.is_teleport(w.state_at((1, 0)).unwrap()));
    }

    #[test]
    fn invalid_teleport_and_disconnection() {
        let mut spec = GridSpec::from_ascii(&["...."], 0.9);
        spec.teleports.push(Teleport {
            cell: (1, 0),
            destinations: vec![((3, 0), 0.5), ((2, 0), 0.4)],
        });
        assert!(matches!(build_gridworld(&spec), Err(EnvError::TeleportDistribution { .. })));
        let split = GridSpec::from_ascii(&["..#.."], 0.9);
        assert!(matches!(build_gridworld(&split), Err(EnvError::Disconnected(3, 0))));
    }

    #[test]
    fn dataset_counts() {
        let w = corridor(5);
        let spec = DatasetSpec {
            behavior: Behavior::UniformRandomWalk,
            n_trajectories: 3,
            trajectory_len: 5,
            seed: 1,
        };
        let data = generate_dataset(&w, &spec).unwrap();
        assert_eq!(data.trajectories.len(), 3);
        assert!(data.trajectories.iter().all(|t| t.n_transitions() == 5));
        data.check_consistent(&w.mdp).unwrap();
    }

    #[test]
    fn region_confinement_on_corridor_halves() {
        let w = corridor(6);
        let spec = DatasetSpec {
            behavior: Behavior::RegionConfinedWalk {
                regions: vec![Region { x0: 0, y0: 0, x1: 2, y1: 0 }, Region { x0: 3, y0: 0, x1: 5, y1: 0 }],
            },
            n_trajectories: 40,
            trajectory_len: 20,
            seed: 4,
        };
        let data = generate_dataset(&w, &spec).unwrap();
        for t in &data.trajectories {
            let left = t.states.iter().any(|&s| w.cell(s).0 <= 2);
            let right = t.states.iter().any(|&s| w.cell(s).0 >= 3);
            assert!(!(left && right));
        }
        let uncovered = DatasetSpec {
            behavior: Behavior::RegionConfinedWalk {
                regions: vec![Region { x0: 0, y0: 0, x1: 2, y1: 0 }],
            },
            ..spec
        };
        assert!(matches!(generate_dataset(&w, &uncovered), Err(EnvError::Coverage(3, 0))));
    }

    #[test]
    fn noisy_expert_is_consistent() {
        let w = corridor(5);
        let spec = DatasetSpec {
            behavior: Behavior::NoisyExpert { epsilon: 0.2 },
            n_trajectories: 10,
            trajectory_len: 8,
            seed: 2,
        };
        generate_dataset(&w, &spec).unwrap().check_consistent(&w.mdp).unwrap();
    }

    #[test]
    fn single_trajectory_batch_is_consistent() {
        let data = Dataset {
            trajectories: vec![Trajectory {
                states: vec![0, 1, 2, 3],
                actions: vec![3, 3, 3],
            }],
        };
        let mut rng = seeded(5);
        let b = sample_batch(&data, 200, 0.7, GoalOffset::StrictlyFuture, &mut rng).unwrap();
        for i in 0..b.len() {
            assert_eq!(b.next_states[i], b.states[i] + 1);
            assert!(b.goals[i] > b.states[i]);
        }
    }

    #[test]
    fn batch_errors() {
        let mut rng = seeded(0);
        assert!(matches!(
            sample_batch(&Dataset::default(), 4, 0.9, GoalOffset::StrictlyFuture, &mut rng),
            Err(EnvError::EmptyDataset)
        ));
        let data = Dataset {
            trajectories: vec![Trajectory { states: vec![0], actions: vec![] }],
        };
        assert!(matches!(
            sample_batch(&data, 4, 0.9, GoalOffset::StrictlyFuture, &mut rng),
            Err(EnvError::ShortTrajectory(0))
        ));
    }

    #[test]
    fn jsonl_roundtrip() {
        let data = Dataset {
            trajectories: vec![
                Trajectory { states: vec![0, 1], actions: vec![3] },
                Trajectory { states: vec![2, 2, 1], actions: vec![4, 2] },
            ],
        };
        let mut buf = Vec::new();
        data.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"states":[0,1],"actions":[3]}"#);
        assert_eq!(Dataset::read_jsonl(&buf[..]).unwrap(), data);
    }
}
