//! Finite controlled Markov processes, tabular policies and trajectory simulation.
//!
//! States and actions are dense integer ids. Transition probabilities are stored
//! as a flat `[s][a][s']` tensor together with a sparse successor list per
//! `(s, a)` row, which is what the operators and samplers actually iterate.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::uniform01;

pub type State = usize;
pub type Action = usize;

/// Row sums must match 1 within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("discount out of range: gamma = {0} (must lie strictly inside (0, 1))")]
    Discount(f64),
    #[error("mdp must have at least one state and one action (got {n_states} x {n_actions})")]
    Empty { n_states: usize, n_actions: usize },
    #[error("transition tensor has shape mismatch: {0}")]
    Shape(String),
    #[error("negative or non-finite probability {prob} at (s={state}, a={action}, s'={next})")]
    BadProbability {
        state: State,
        action: Action,
        next: State,
        prob: f64,
    },
    #[error("transition row (s={state}, a={action}) sums to {sum}, expected 1")]
    RowSum { state: State, action: Action, sum: f64 },
    #[error("state {0} out of range")]
    StateOutOfRange(State),
    #[error("action {0} out of range")]
    ActionOutOfRange(Action),
    #[error("horizon must be at least 1")]
    Horizon,
    #[error("policy row for state {state} sums to {sum}, expected 1")]
    PolicyRow { state: State, sum: f64 },
    #[error("policy shape does not match the mdp ({0})")]
    PolicyShape(String),
    #[error("trajectory transition {index} ({state}, {action}) -> {next} has zero probability")]
    Inconsistent {
        index: usize,
        state: State,
        action: Action,
        next: State,
    },
}

/// On-disk layout: `{n_states, n_actions, gamma, transition: [[[p]]]}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<f64>,
    successors: Vec<Vec<(State, f64)>>,
}

impl TabularMdp {
    /// Builds an mdp from a flat `[s][a][s']` probability tensor, validating
    /// every invariant.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        transition: Vec<f64>,
    ) -> Result<Self, MdpError> {
        validate_parts(n_states, n_actions, gamma, &transition)?;
        let successors = (0..n_states * n_actions)
            .map(|row| {
                let base = row * n_states;
                (0..n_states)
                    .filter_map(|next| {
                        let p = transition[base + next];
                        (p > 0.0).then_some((next, p))
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            transition,
            successors,
        })
    }

    /// Builds an mdp from nested `p[s][a][s']` rows.
    pub fn from_nested(
        gamma: f64,
        transition: &[Vec<Vec<f64>>],
    ) -> Result<Self, MdpError> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(n_states * n_actions * n_states);
        for (s, rows) in transition.iter().enumerate() {
            if rows.len() != n_actions {
                return Err(MdpError::Shape(format!(
                    "state {s} has {} action rows, expected {n_actions}",
                    rows.len()
                )));
            }
            for (a, row) in rows.iter().enumerate() {
                if row.len() != n_states {
                    return Err(MdpError::Shape(format!(
                        "row (s={s}, a={a}) has {} entries, expected {n_states}",
                        row.len()
                    )));
                }
                flat.extend_from_slice(row);
            }
        }
        Self::new(n_states, n_actions, gamma, flat)
    }

    /// Deterministic mdp from a successor table `next[s][a]`.
    pub fn deterministic(gamma: f64, next: &[Vec<State>]) -> Result<Self, MdpError> {
        let n_states = next.len();
        let n_actions = next.first().map_or(0, Vec::len);
        let mut flat = vec![0.0; n_states * n_actions * n_states];
        for (s, row) in next.iter().enumerate() {
            if row.len() != n_actions {
                return Err(MdpError::Shape(format!("state {s} has {} actions", row.len())));
            }
            for (a, &sp) in row.iter().enumerate() {
                if sp >= n_states {
                    return Err(MdpError::StateOutOfRange(sp));
                }
                flat[(s * n_actions + a) * n_states + sp] = 1.0;
            }
        }
        Self::new(n_states, n_actions, gamma, flat)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Same dynamics with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self, MdpError> {
        Self::new(self.n_states, self.n_actions, gamma, self.transition.clone())
    }

    pub fn prob(&self, s: State, a: Action, next: State) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + next]
    }

    /// Successors with nonzero probability, in increasing state order.
    pub fn successors(&self, s: State, a: Action) -> &[(State, f64)] {
        &self.successors[s * self.n_actions + a]
    }

    /// Re-checks every invariant.
    pub fn validate(&self) -> Result<(), MdpError> {
        validate_parts(self.n_states, self.n_actions, self.gamma, &self.transition)
    }

    fn check_state(&self, s: State) -> Result<(), MdpError> {
        if s < self.n_states {
            Ok(())
        } else {
            Err(MdpError::StateOutOfRange(s))
        }
    }

    fn check_action(&self, a: Action) -> Result<(), MdpError> {
        if a < self.n_actions {
            Ok(())
        } else {
            Err(MdpError::ActionOutOfRange(a))
        }
    }

    /// Samples `s' ~ p(. | s, a)`.
    pub fn step<R: Rng + ?Sized>(&self, s: State, a: Action, rng: &mut R) -> Result<State, MdpError> {
        self.check_state(s)?;
        self.check_action(a)?;
        let row = self.successors(s, a);
        Ok(sample_weighted(row, rng))
    }

    /// Simulates `horizon` transitions under `policy` starting from `s0`.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        policy: &TabularPolicy,
        s0: State,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Trajectory, MdpError> {
        if horizon == 0 {
            return Err(MdpError::Horizon);
        }
        self.check_state(s0)?;
        policy.check_shape(self)?;
        let mut states = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon);
        let mut s = s0;
        states.push(s);
        for _ in 0..horizon {
            let a = policy.sample(s, rng);
            s = self.step(s, a, rng)?;
            actions.push(a);
            states.push(s);
        }
        Ok(Trajectory { states, actions })
    }
}

/// Checks the raw parts of an mdp; reports the first offending row.
pub fn validate_parts(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: &[f64],
) -> Result<(), MdpError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(MdpError::Discount(gamma));
    }
    if n_states == 0 || n_actions == 0 {
        return Err(MdpError::Empty { n_states, n_actions });
    }
    let expected = n_states * n_actions * n_states;
    if transition.len() != expected {
        return Err(MdpError::Shape(format!(
            "flat tensor has {} entries, expected {expected}",
            transition.len()
        )));
    }
    for s in 0..n_states {
        for a in 0..n_actions {
            let row = &transition[(s * n_actions + a) * n_states..][..n_states];
            let mut sum = 0.0;
            for (next, &p) in row.iter().enumerate() {
                if !(p.is_finite() && p >= 0.0) {
                    return Err(MdpError::BadProbability {
                        state: s,
                        action: a,
                        next,
                        prob: p,
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::RowSum { state: s, action: a, sum });
            }
        }
    }
    Ok(())
}

/// Inverse-cdf draw from a sparse distribution. The last entry absorbs rounding.
pub(crate) fn sample_weighted<R: Rng + ?Sized>(row: &[(usize, f64)], rng: &mut R) -> usize {
    let u = uniform01(rng);
    let mut acc = 0.0;
    for &(id, p) in row {
        acc += p;
        if u < acc {
            return id;
        }
    }
    row.last().map(|&(id, _)| id).expect("empty distribution")
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = MdpError;

    fn try_from(doc: MdpDocument) -> Result<Self, Self::Error> {
        if doc.transition.len() != doc.n_states {
            return Err(MdpError::Shape(format!(
                "transition has {} state blocks, header says {}",
                doc.transition.len(),
                doc.n_states
            )));
        }
        let mdp = Self::from_nested(doc.gamma, &doc.transition)?;
        if mdp.n_actions != doc.n_actions {
            return Err(MdpError::Shape(format!(
                "transition has {} actions, header says {}",
                mdp.n_actions, doc.n_actions
            )));
        }
        Ok(mdp)
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(mdp: TabularMdp) -> Self {
        let transition = (0..mdp.n_states)
            .map(|s| {
                (0..mdp.n_actions)
                    .map(|a| {
                        let base = (s * mdp.n_actions + a) * mdp.n_states;
                        mdp.transition[base..base + mdp.n_states].to_vec()
                    })
                    .collect()
            })
            .collect();
        MdpDocument {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            gamma: mdp.gamma,
            transition,
        }
    }
}

/// Markov policy `pi(a | s)` stored as a flat `[s][a]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, MdpError> {
        if probs.len() != n_states * n_actions {
            return Err(MdpError::PolicyShape(format!(
                "{} probabilities for {n_states} x {n_actions}",
                probs.len()
            )));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::PolicyRow { state: s, sum });
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
        }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[Action]) -> Result<Self, MdpError> {
        let n_states = actions.len();
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(MdpError::ActionOutOfRange(a));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: State, a: Action) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: State) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: State, rng: &mut R) -> Action {
        let u = uniform01(rng);
        let row = self.row(s);
        let mut acc = 0.0;
        for (a, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // rounding: fall back to the last action with mass
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    pub(crate) fn check_shape(&self, mdp: &TabularMdp) -> Result<(), MdpError> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(MdpError::PolicyShape(format!(
                "policy is {} x {}, mdp is {} x {}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// A state/action sequence; `actions.len() == states.len() - 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn n_transitions(&self) -> usize {
        self.actions.len()
    }

    /// Checks lengths and that every `(s, a, s')` has positive probability.
    pub fn check_consistent(&self, mdp: &TabularMdp) -> Result<(), MdpError> {
        if self.states.len() != self.actions.len() + 1 {
            return Err(MdpError::Shape(format!(
                "{} states for {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        for (i, &a) in self.actions.iter().enumerate() {
            let (s, next) = (self.states[i], self.states[i + 1]);
            mdp.check_state(s)?;
            mdp.check_state(next)?;
            mdp.check_action(a)?;
            if mdp.prob(s, a, next) <= 0.0 {
                return Err(MdpError::Inconsistent {
                    index: i,
                    state: s,
                    action: a,
                    next,
                });
            }
        }
        Ok(())
    }
}
