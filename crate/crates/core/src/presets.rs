//! Named environments with their default datasets and evaluation tasks.

use serde::{Deserialize, Serialize};

use crate::env::{build_gridworld, Behavior, Cell, DatasetSpec, EnvError, GridSpec, Gridworld, Region, Teleport};
use crate::policy::EvalTask;

pub const PRESETS: [&str; 4] = ["corridor", "stitch-7x7", "teleport", "teleport-stitch"];

/// Environment block of a run config: a named preset or an explicit grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvConfig {
    Preset { preset: String },
    Grid { grid: GridSpec },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub grid: GridSpec,
    pub dataset: DatasetSpec,
    /// Start and goal cells of the evaluation tasks.
    pub tasks: Vec<(Cell, Cell)>,
    pub horizon: usize,
}

fn quadrants(n: usize) -> Vec<Region> {
    let h = n / 2;
    vec![
        Region { x0: 0, y0: 0, x1: h, y1: h },
        Region { x0: h, y0: 0, x1: n - 1, y1: h },
        Region { x0: 0, y0: h, x1: h, y1: n - 1 },
        Region { x0: h, y0: h, x1: n - 1, y1: n - 1 },
    ]
}

pub fn preset(name: &str) -> Option<Preset> {
    let p = match name {
        "corridor" => Preset {
            grid: GridSpec::from_ascii(&["......"], 0.9),
            dataset: DatasetSpec {
                behavior: Behavior::UniformRandomWalk,
                n_trajectories: 100,
                trajectory_len: 20,
                seed: 0,
            },
            tasks: vec![((0, 0), (5, 0)), ((5, 0), (0, 0))],
            horizon: 10,
        },
        // Open 7x7 room covered by four overlapping 4x4 quadrants; every
        // evaluation task crosses at least one quadrant boundary.
        "stitch-7x7" => Preset {
            grid: GridSpec::from_ascii(&[".......", ".......", ".......", ".......", ".......", ".......", "......."], 0.9),
            dataset: DatasetSpec {
                behavior: Behavior::RegionConfinedWalk { regions: quadrants(7) },
                n_trajectories: 800,
                trajectory_len: 5,
                seed: 0,
            },
            tasks: vec![
                ((0, 0), (6, 6)),
                ((6, 0), (0, 6)),
                ((0, 6), (6, 0)),
                ((6, 6), (0, 0)),
                ((0, 0), (6, 0)),
            ],
            horizon: 24,
        },
        // The teleporter above the start lands next to the goal or in a
        // sealed pit with equal probability; walking is three steps longer.
        "teleport" => {
            let mut grid = GridSpec::from_ascii(
                &[
                    "T......#.", //
                    ".......##", //
                    ".........", //
                ],
                0.9,
            );
            grid.teleports.push(Teleport {
                cell: (0, 0),
                destinations: vec![((5, 2), 0.5), ((8, 0), 0.5)],
            });
            Preset {
                grid,
                dataset: DatasetSpec {
                    behavior: Behavior::UniformRandomWalk,
                    n_trajectories: 600,
                    trajectory_len: 12,
                    seed: 0,
                },
                tasks: vec![((0, 2), (6, 2)), ((0, 1), (6, 2)), ((1, 2), (6, 2)), ((1, 1), (6, 1)), ((0, 2), (6, 1))],
                horizon: 20,
            }
        }
        // The stitch room with a teleporter inside the bottom-right quadrant
        // that jumps to the far corner or back to the quadrant's entrance.
        "teleport-stitch" => {
            let mut grid = GridSpec::from_ascii(&[".......", ".......", ".......", ".......", ".......", ".......", "......."], 0.9);
            grid.teleports.push(Teleport {
                cell: (4, 4),
                destinations: vec![((6, 6), 0.5), ((3, 3), 0.5)],
            });
            Preset {
                grid,
                dataset: DatasetSpec {
                    behavior: Behavior::RegionConfinedWalk { regions: quadrants(7) },
                    n_trajectories: 800,
                    trajectory_len: 5,
                    seed: 0,
                },
                tasks: vec![((0, 0), (6, 6)), ((6, 0), (0, 6)), ((0, 6), (6, 0)), ((6, 6), (0, 0)), ((0, 0), (6, 5))],
                horizon: 24,
            }
        }
        _ => return None,
    };
    Some(p)
}

impl Preset {
    pub fn build(&self) -> Result<Gridworld, EnvError> {
        build_gridworld(&self.grid)
    }

    pub fn eval_tasks(&self, world: &Gridworld, episodes: usize) -> Vec<EvalTask> {
        self.tasks
            .iter()
            .map(|&(s, g)| EvalTask {
                start: world.state_at(s).expect("task cell is free"),
                goal: world.state_at(g).expect("task cell is free"),
                horizon: self.horizon,
                episodes,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_build() {
        for name in PRESETS {
            let p = preset(name).unwrap();
            let w = p.build().unwrap_or_else(|e| panic!("{name}: {e}"));
            let tasks = p.eval_tasks(&w, 1);
            assert!(tasks.iter().all(|t| t.start != t.goal));
        }
        assert!(preset("nope").is_none());
    }
}
