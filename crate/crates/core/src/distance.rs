//! Dense distance tables over `X = S ∪ (S × A)` and the operators acting on them.
//!
//! Index layout: states occupy `0..n_states`, the pair `(s, a)` sits at
//! `n_states + s * n_actions + a`. Unreachable pairs are `f64::INFINITY`,
//! which is absorbing under `+`, `min` and `exp(-.)`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{Action, State, TabularMdp};

pub const ORDERING: &str = "states-then-state-actions";

#[derive(Debug, Error)]
pub enum DistanceError {
    #[error("table is {got_states}x{got_actions}, expected {want_states}x{want_actions}")]
    Shape {
        got_states: usize,
        got_actions: usize,
        want_states: usize,
        want_actions: usize,
    },
    #[error("entry ({x}, {y}) = {value} is not a valid distance")]
    NotADistance { x: usize, y: usize, value: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        last: Box<DistanceTable>,
    },
    #[error("malformed table file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A point of the joint domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Point {
    State(State),
    Pair(State, Action),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl DistanceTable {
    /// Table with zero diagonal and `off_diagonal` everywhere else.
    pub fn constant(n_states: usize, n_actions: usize, off_diagonal: f64) -> Self {
        let n = n_states + n_states * n_actions;
        let mut values = vec![off_diagonal; n * n];
        for i in 0..n {
            values[i * n + i] = 0.0;
        }
        Self {
            n_states,
            n_actions,
            values,
        }
    }

    /// Wraps a row-major `n x n` value vector, `n = |X|`.
    pub fn from_values(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self, DistanceError> {
        let n = n_states + n_states * n_actions;
        if values.len() != n * n {
            return Err(DistanceError::Format(format!("{} values for |X| = {n}", values.len())));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// `|X|`.
    pub fn size(&self) -> usize {
        self.n_states + self.n_states * self.n_actions
    }

    pub fn state(&self, s: State) -> usize {
        s
    }

    pub fn pair(&self, s: State, a: Action) -> usize {
        self.n_states + s * self.n_actions + a
    }

    pub fn index(&self, p: Point) -> usize {
        match p {
            Point::State(s) => self.state(s),
            Point::Pair(s, a) => self.pair(s, a),
        }
    }

    pub fn point(&self, i: usize) -> Point {
        if i < self.n_states {
            Point::State(i)
        } else {
            let k = i - self.n_states;
            Point::Pair(k / self.n_actions, k % self.n_actions)
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x * self.size() + y]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        let n = self.size();
        self.values[x * n + y] = v;
    }

    pub fn at(&self, x: Point, y: Point) -> f64 {
        self.get(self.index(x), self.index(y))
    }

    pub fn row(&self, x: usize) -> &[f64] {
        let n = self.size();
        &self.values[x * n..(x + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn same_shape(&self, other: &DistanceTable) -> bool {
        self.n_states == other.n_states && self.n_actions == other.n_actions
    }

    fn check_mdp(&self, mdp: &TabularMdp) -> Result<(), DistanceError> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(DistanceError::Shape {
                got_states: self.n_states,
                got_actions: self.n_actions,
                want_states: mdp.n_states(),
                want_actions: mdp.n_actions(),
            });
        }
        Ok(())
    }

    /// Membership in the set of distances: zero diagonal, nonnegative entries.
    pub fn check_distance(&self) -> Result<(), DistanceError> {
        let n = self.size();
        for x in 0..n {
            for y in 0..n {
                let v = self.get(x, y);
                let ok = if x == y { v == 0.0 } else { v >= 0.0 };
                if !ok {
                    return Err(DistanceError::NotADistance { x, y, value: v });
                }
            }
        }
        Ok(())
    }

    /// Entrywise `self <= other + tol`.
    pub fn le(&self, other: &DistanceTable, tol: f64) -> bool {
        self.values
            .iter()
            .zip(&other.values)
            .all(|(&a, &b)| a <= b || a - b <= tol)
    }

    /// Largest absolute entry difference; matching infinities count as equal.
    pub fn sup_diff(&self, other: &DistanceTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max)
    }

    /// Writes the JSON header line followed by one CSV line per row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), DistanceError> {
        let header = TableHeader {
            n_states: self.n_states,
            n_actions: self.n_actions,
            ordering: ORDERING.to_string(),
        };
        let header = serde_json::to_string(&header).map_err(|e| DistanceError::Format(e.to_string()))?;
        writeln!(out, "{header}")?;
        let n = self.size();
        for x in 0..n {
            let line: Vec<String> = self.row(x).iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self, DistanceError> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| DistanceError::Format("missing header".into()))??;
        let header: TableHeader =
            serde_json::from_str(&header).map_err(|e| DistanceError::Format(e.to_string()))?;
        if header.ordering != ORDERING {
            return Err(DistanceError::Format(format!("unknown ordering {:?}", header.ordering)));
        }
        let n = header.n_states + header.n_states * header.n_actions;
        let mut values = Vec::with_capacity(n * n);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for field in line.split(',') {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| DistanceError::Format(format!("bad value {field:?}")))?;
                values.push(v);
            }
        }
        Self::from_values(header.n_states, header.n_actions, values)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableHeader {
    n_states: usize,
    n_actions: usize,
    ordering: String,
}

/// Which points path relaxation may route through.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WaypointDomain {
    /// Every point of `S ∪ (S × A)`.
    #[default]
    Joint,
    /// States only.
    StatesOnly,
}

impl WaypointDomain {
    fn waypoints(self, d: &DistanceTable) -> std::ops::Range<usize> {
        match self {
            WaypointDomain::Joint => 0..d.size(),
            WaypointDomain::StatesOnly => 0..d.n_states(),
        }
    }
}

/// Action relaxation: `d(s, (s, a)) = 0`, everything else unchanged.
pub fn action_relaxation(d: &DistanceTable) -> DistanceTable {
    let mut out = d.clone();
    for s in 0..d.n_states() {
        for a in 0..d.n_actions() {
            let p = out.pair(s, a);
            out.set(s, p, 0.0);
        }
    }
    out
}

/// Exponentiated Bellman backup on state-action rows:
/// `d'((s,a), y) = -log E_{s'}[exp(-d(s', y))] - log gamma`.
///
/// State rows and the diagonal are left unchanged.
pub fn bellman_backup(mdp: &TabularMdp, d: &DistanceTable) -> Result<DistanceTable, DistanceError> {
    d.check_mdp(mdp)?;
    let n = d.size();
    let neg_log_gamma = -mdp.gamma().ln();
    let mut out = d.clone();
    for s in 0..d.n_states() {
        for a in 0..d.n_actions() {
            let x = d.pair(s, a);
            let succ = mdp.successors(s, a);
            for y in 0..n {
                if y == x {
                    continue;
                }
                // log-sum-exp shifted by the smallest successor distance
                let m = succ.iter().map(|&(sp, _)| d.get(sp, y)).fold(f64::INFINITY, f64::min);
                let v = if m.is_infinite() {
                    f64::INFINITY
                } else {
                    let sum: f64 = succ.iter().map(|&(sp, p)| p * (m - d.get(sp, y)).exp()).sum();
                    m - sum.ln() + neg_log_gamma
                };
                out.set(x, y, v);
            }
        }
    }
    Ok(out)
}

/// One step of path relaxation: `d'(x, z) = min_y d(x, y) + d(y, z)`. The
/// direct entry is always kept, which matters only for the states-only domain.
pub fn path_relaxation(d: &DistanceTable, domain: WaypointDomain) -> DistanceTable {
    let n = d.size();
    let mut out = d.clone();
    for x in 0..n {
        let row_x = d.row(x);
        for z in 0..n {
            let mut best = row_x[z];
            for y in domain.waypoints(d) {
                let v = row_x[y] + d.get(y, z);
                if v < best {
                    best = v;
                }
            }
            out.set(x, z, best);
        }
    }
    out
}

/// Projection onto quasimetrics: the min-plus transitive closure of `d`
/// (Floyd–Warshall over the chosen waypoint domain).
pub fn quasimetric_closure(d: &DistanceTable, domain: WaypointDomain) -> DistanceTable {
    let n = d.size();
    let mut out = d.clone();
    let mut row_k = vec![0.0; n];
    for k in domain.waypoints(d) {
        row_k.copy_from_slice(out.row(k));
        for i in 0..n {
            let dik = out.values[i * n + k];
            if dik.is_infinite() {
                continue;
            }
            let row_i = &mut out.values[i * n..(i + 1) * n];
            for (dij, &dkj) in row_i.iter_mut().zip(&row_k) {
                let cand = dik + dkj;
                if cand < *dij {
                    *dij = cand;
                }
            }
        }
    }
    out
}

/// A violated triangle (or a nonzero diagonal when `x == y == z`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Violation {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub direct: f64,
    pub via: f64,
}

/// First triple with `d(x,z) > d(x,y) + d(y,z) + tol`, or diagonal entry
/// farther than `tol` from zero.
pub fn find_violation(d: &DistanceTable, tol: f64) -> Option<Violation> {
    let n = d.size();
    for x in 0..n {
        let v = d.get(x, x);
        if v.abs() > tol {
            return Some(Violation { x, y: x, z: x, direct: v, via: 0.0 });
        }
    }
    for x in 0..n {
        for y in 0..n {
            let dxy = d.get(x, y);
            if dxy.is_infinite() {
                continue;
            }
            for z in 0..n {
                let via = dxy + d.get(y, z);
                let direct = d.get(x, z);
                if direct > via + tol {
                    return Some(Violation { x, y, z, direct, via });
                }
            }
        }
    }
    None
}

pub fn is_quasimetric(d: &DistanceTable, tol: f64) -> bool {
    find_violation(d, tol).is_none()
}

#[derive(Clone, Copy, Debug)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub domain: WaypointDomain,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
            domain: WaypointDomain::Joint,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FixedPointReport {
    pub table: DistanceTable,
    pub iterations: usize,
    /// Sup-norm change of the final application.
    pub residual: f64,
}

/// One application of `closure ∘ backup ∘ action_relaxation`.
pub fn tmd_step(mdp: &TabularMdp, d: &DistanceTable, domain: WaypointDomain) -> Result<DistanceTable, DistanceError> {
    let backed = bellman_backup(mdp, &action_relaxation(d))?;
    Ok(quasimetric_closure(&backed, domain))
}

/// Iterates [`tmd_step`] until the sup-norm change drops below `opts.tol`.
pub fn tmd_fixed_point(
    mdp: &TabularMdp,
    d0: &DistanceTable,
    opts: &FixedPointOptions,
) -> Result<FixedPointReport, DistanceError> {
    d0.check_mdp(mdp)?;
    d0.check_distance()?;
    let mut d = d0.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let next = tmd_step(mdp, &d, opts.domain)?;
        residual = next.sup_diff(&d);
        d = next;
        if residual < opts.tol {
            return Ok(FixedPointReport {
                table: d,
                iterations: it,
                residual,
            });
        }
    }
    Err(DistanceError::NonConvergence {
        iterations: opts.max_iter,
        residual,
        last: Box::new(d),
    })
}
