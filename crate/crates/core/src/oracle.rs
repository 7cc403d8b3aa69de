//! Exact goal-conditioned values and the successor distances they induce.
//!
//! `Q_g(s, a) = Σ_{t≥0} γ^t P(s_t = g | s_0 = s, a_0 = a)` is the discounted
//! goal occupancy, obtained by fixed-point iteration of
//! `Q(s, a) = 1{s = g} + γ Σ_{s'} p(s' | s, a) W(s')` with `W` the policy
//! average (evaluation) or the max over actions (optimal control).
//!
//! Distances use the strictly-future part of the occupancy,
//! `F(s, a) = Q(s, a) - 1{s = g}`:
//!
//! ```text
//! d((s, a), g) = log V_g(g) - log F(s, a)
//! ```
//!
//! which coincides with `log V_g(g) - log Q_g(s, a)` whenever `s != g`, and on
//! the goal's own rows gives the discounted return distance. With this choice
//! the optimal table is exactly the fixed point of the composed operator in
//! [`crate::distance::tmd_step`].

use thiserror::Error;

use crate::distance::DistanceTable;
use crate::mdp::{Action, MdpError, State, TabularMdp, TabularPolicy};

/// Relative per-entry change at which value iteration stops; distances are
/// logs of these values, so far-away entries need relative accuracy.
pub const VALUE_RESIDUAL: f64 = 1e-14;
const MAX_SWEEPS: usize = 2_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("goal {0} out of range")]
    Goal(State),
}

/// Values for one goal, all indexed `[s * n_actions + a]` or `[s]`.
#[derive(Clone, Debug)]
pub struct GoalValues {
    pub goal: State,
    pub n_actions: usize,
    /// Discounted occupancy including the `t = 0` term.
    pub q: Vec<f64>,
    /// Strictly-future occupancy `γ Σ p(s'|s,a) W(s')`.
    pub future: Vec<f64>,
    /// `V(s)`: policy average or max of `q` over actions.
    pub v: Vec<f64>,
    /// Final sup-norm residual of the iteration.
    pub residual: f64,
}

impl GoalValues {
    pub fn q(&self, s: State, a: Action) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn future(&self, s: State, a: Action) -> f64 {
        self.future[s * self.n_actions + a]
    }

    /// Greedy action with lowest-id tie-breaking.
    pub fn greedy_action(&self, s: State) -> Action {
        let row = &self.q[s * self.n_actions..(s + 1) * self.n_actions];
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }
}

enum Backup<'a> {
    Policy(&'a TabularPolicy),
    Optimal,
}

fn solve(mdp: &TabularMdp, g: State, backup: Backup<'_>) -> Result<GoalValues, OracleError> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if g >= ns {
        return Err(OracleError::Goal(g));
    }
    let gamma = mdp.gamma();
    let mut q = vec![0.0; ns * na];
    let mut w = vec![0.0; ns];
    let mut residual = f64::INFINITY;
    let mut last_residual = f64::INFINITY;
    for sweep in 0..MAX_SWEEPS {
        for s in 0..ns {
            let row = &q[s * na..(s + 1) * na];
            w[s] = match backup {
                Backup::Policy(pi) => row.iter().zip(pi.row(s)).map(|(q, p)| p * q).sum(),
                Backup::Optimal => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
        }
        residual = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let next: f64 = mdp.successors(s, a).iter().map(|&(sp, p)| p * w[sp]).sum();
                let value = if s == g { 1.0 } else { 0.0 } + gamma * next;
                let i = s * na + a;
                residual = f64::max(residual, (value - q[i]).abs() / value.abs().max(f64::MIN_POSITIVE));
                q[i] = value;
            }
        }
        if residual < VALUE_RESIDUAL {
            break;
        }
        // floating-point floor reached: further sweeps only oscillate in the last ulp
        if sweep > 10 && residual >= last_residual && residual < 1e-11 {
            break;
        }
        last_residual = residual;
    }
    for s in 0..ns {
        let row = &q[s * na..(s + 1) * na];
        w[s] = match backup {
            Backup::Policy(pi) => row.iter().zip(pi.row(s)).map(|(q, p)| p * q).sum(),
            Backup::Optimal => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
    }
    let mut future = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let next: f64 = mdp.successors(s, a).iter().map(|&(sp, p)| p * w[sp]).sum();
            future[s * na + a] = gamma * next;
        }
    }
    Ok(GoalValues {
        goal: g,
        n_actions: na,
        q,
        future,
        v: w,
        residual,
    })
}

/// Goal-conditioned occupancy of a fixed policy.
pub fn q_pi(mdp: &TabularMdp, policy: &TabularPolicy, g: State) -> Result<GoalValues, OracleError> {
    policy.check_shape(mdp)?;
    solve(mdp, g, Backup::Policy(policy))
}

/// Optimal goal-conditioned occupancy; `v[s] = max_a q(s, a)`.
pub fn q_star(mdp: &TabularMdp, g: State) -> Result<GoalValues, OracleError> {
    solve(mdp, g, Backup::Optimal)
}

fn neg_log_ratio(numer_v: f64, future: f64) -> f64 {
    if future > 0.0 {
        numer_v.ln() - future.ln()
    } else {
        f64::INFINITY
    }
}

/// Optimal successor distance over the whole joint domain.
pub fn d_sd_star(mdp: &TabularMdp) -> DistanceTable {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut d = DistanceTable::constant(ns, na, f64::INFINITY);
    for g in 0..ns {
        let vals = q_star(mdp, g).expect("goal in range");
        let vg = vals.v[g];
        for s in 0..ns {
            let mut best = f64::INFINITY;
            for a in 0..na {
                let dsa = neg_log_ratio(vg, vals.future(s, a));
                d.set(d.pair(s, a), g, dsa);
                best = best.min(dsa);
            }
            d.set(s, g, if s == g { 0.0 } else { best });
        }
    }
    fill_pair_columns(&mut d, |_, _| 0.0);
    d
}

/// Copies `d(x, g) + extra(g, a)` into every column `(g, a)`, keeping the diagonal at zero.
fn fill_pair_columns(d: &mut DistanceTable, extra: impl Fn(State, Action) -> f64) {
    let (ns, na) = (d.n_states(), d.n_actions());
    for x in 0..d.size() {
        for g in 0..ns {
            let base = d.get(x, g);
            for a in 0..na {
                let y = d.pair(g, a);
                let v = if x == y { 0.0 } else { base + extra(g, a) };
                d.set(x, y, v);
            }
        }
    }
}

/// Successor distance of a fixed policy plus the number of entries that are
/// infinite because the policy never takes the target action.
#[derive(Clone, Debug)]
pub struct PolicyDistance {
    pub table: DistanceTable,
    pub zero_probability_entries: usize,
}

pub fn d_sd_pi(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<PolicyDistance, OracleError> {
    policy.check_shape(mdp)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let neg_log_gamma = -mdp.gamma().ln();
    let mut d = DistanceTable::constant(ns, na, f64::INFINITY);
    for g in 0..ns {
        let vals = q_pi(mdp, policy, g)?;
        let vg: f64 = (0..na).map(|a| policy.prob(g, a) * vals.q(g, a)).sum();
        for s in 0..ns {
            for a in 0..na {
                d.set(d.pair(s, a), g, neg_log_ratio(vg, vals.future(s, a)));
            }
            if s == g {
                d.set(s, g, 0.0);
            } else {
                let mix: f64 = (0..na).map(|a| policy.prob(s, a) * vals.future(s, a)).sum();
                d.set(s, g, neg_log_ratio(vg, mix) + neg_log_gamma);
            }
        }
    }
    let mut zero_probability_entries = 0;
    for g in 0..ns {
        for a in 0..na {
            if policy.prob(g, a) == 0.0 {
                zero_probability_entries += d.size() - 1;
            }
        }
    }
    fill_pair_columns(&mut d, |g, a| -policy.prob(g, a).ln());
    Ok(PolicyDistance {
        table: d,
        zero_probability_entries,
    })
}
