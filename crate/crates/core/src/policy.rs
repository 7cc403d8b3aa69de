//! Goal-conditioned policies: tabular extraction from a distance table, a
//! learned policy head trained against the critic, and success-rate
//! evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{EncoderParams, Features, Net};
use crate::distance::DistanceTable;
use crate::env::{Batch, GridAction};
use crate::loss::TmdConfig;
use crate::mdp::{Action, State, TabularMdp};
use crate::nn::{mrn, MlpShape};
use crate::rng::{derive_seed, stream};

/// Anything that picks an action for `(state, goal)`.
pub trait GoalPolicy {
    fn act(&self, s: State, g: State) -> Action;
}

/// Deterministic table `actions[g * S + s]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TabularGoalPolicy {
    pub n_states: usize,
    pub actions: Vec<Action>,
    /// `(s, g)` rows whose every action distance was infinite.
    pub unreachable: Vec<(State, State)>,
}

impl GoalPolicy for TabularGoalPolicy {
    fn act(&self, s: State, g: State) -> Action {
        self.actions[g * self.n_states + s]
    }
}

/// `π(s, g) = argmin_a d((s, a), g)` with lowest-id ties; rows that are all
/// `+∞` fall back to `stay` and are reported unreachable. At `s = g` the
/// episode is over and every action is optimal, so the policy emits action 0.
pub fn extract_tabular_policy(d: &DistanceTable) -> TabularGoalPolicy {
    let (ns, na) = (d.n_states(), d.n_actions());
    extract_from(ns, na, |s, a, g| d.get(d.pair(s, a), g))
}

fn extract_from(ns: usize, na: usize, dist: impl Fn(State, Action, State) -> f64) -> TabularGoalPolicy {
    let stay = if na == crate::env::ACTIONS.len() {
        GridAction::Stay.id()
    } else {
        na - 1
    };
    let mut actions = vec![stay; ns * ns];
    let mut unreachable = Vec::new();
    for g in 0..ns {
        for s in 0..ns {
            if s == g {
                actions[g * ns + s] = 0;
                continue;
            }
            let mut best = f64::INFINITY;
            let mut arg = None;
            for a in 0..na {
                let v = dist(s, a, g);
                if v < best {
                    best = v;
                    arg = Some(a);
                }
            }
            match arg {
                Some(a) => actions[g * ns + s] = a,
                None => unreachable.push((s, g)),
            }
        }
    }
    TabularGoalPolicy {
        n_states: ns,
        actions,
        unreachable,
    }
}

/// Greedy policy over the learned critic: `argmin_a d(φ(s, a), ψ(g))`.
pub fn critic_policy(params: &EncoderParams) -> TabularGoalPolicy {
    let (ns, na) = (params.n_states(), params.n_actions());
    let flat = params.pair_to_state_distances();
    extract_from(ns, na, |s, a, g| flat[(s * na + a) * ns + g])
}

/// Policy network over `[features(s), features(g)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub shape: MlpShape,
    pub params: Vec<f64>,
}

impl PolicyParams {
    pub fn init<R: Rng + ?Sized>(features: &Features, hidden: &[usize], rng: &mut R) -> Self {
        let shape = MlpShape::new(2 * features.state_dim(), hidden, features.n_actions(), false);
        let params = shape.init(rng);
        Self { shape, params }
    }

    fn inputs(features: &Features, pairs: &[(State, State)]) -> Vec<f64> {
        let dim = features.state_dim();
        let mut x = Vec::with_capacity(pairs.len() * 2 * dim);
        for &(s, g) in pairs {
            x.extend_from_slice(features.state(s));
            x.extend_from_slice(features.state(g));
        }
        x
    }

    /// Action logits for each `(s, g)`, row-major.
    pub fn logits(&self, features: &Features, pairs: &[(State, State)]) -> Vec<f64> {
        self.shape
            .forward(&self.params, &Self::inputs(features, pairs), pairs.len())
            .output()
            .to_vec()
    }

    /// Greedy decoding into a table over all `(s, g)`.
    pub fn greedy_table(&self, features: &Features) -> TabularGoalPolicy {
        let ns = features.n_states();
        let na = features.n_actions();
        let pairs: Vec<(State, State)> = (0..ns).flat_map(|g| (0..ns).map(move |s| (s, g))).collect();
        let logits = self.logits(features, &pairs);
        let actions = logits
            .chunks_exact(na)
            .map(|row| {
                let mut best = 0;
                for a in 1..na {
                    if row[a] > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect();
        TabularGoalPolicy {
            n_states: ns,
            actions,
            unreachable: Vec::new(),
        }
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Policy objective, batch-averaged:
/// `(1-λ) mean_{i,j} E_π(s_i,g_j)[d(φ(s_i,a), ψ(g_j))]
///  + λ mean_i E_π(s_i,g_i)[d(φ(s_i,a), ψ(g_i))] + α mean_i CE(π(s_i,g_i), a_i)`.
pub fn loss_policy(pi: &PolicyParams, params: &EncoderParams, batch: &Batch, cfg: &TmdConfig) -> f64 {
    policy_objective(pi, params, batch, cfg, false).0
}

pub fn loss_policy_grad(pi: &PolicyParams, params: &EncoderParams, batch: &Batch, cfg: &TmdConfig) -> (f64, Vec<f64>) {
    let (v, g) = policy_objective(pi, params, batch, cfg, true);
    (v, g.expect("gradient requested"))
}

fn policy_objective(
    pi: &PolicyParams,
    params: &EncoderParams,
    batch: &Batch,
    cfg: &TmdConfig,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let n = batch.len();
    let na = params.n_actions();
    let nf = n as f64;
    // critic distances d(φ(s_i, a), ψ(g_j)) for every action
    let pairs: Vec<(State, Action)> = batch.states.iter().flat_map(|&s| (0..na).map(move |a| (s, a))).collect();
    let phi = params.embed_pairs(&pairs);
    let psi = params.embed_states(Net::Psi, &batch.goals);
    let dim = params.mrn.dim();
    let dist = |i: usize, a: usize, j: usize| {
        mrn(
            &phi[(i * na + a) * dim..(i * na + a + 1) * dim],
            &psi[j * dim..(j + 1) * dim],
            params.mrn,
        )
    };

    let sg: Vec<(State, State)> = (0..n).flat_map(|i| (0..n).map(move |j| (batch.states[i], batch.goals[j]))).collect();
    let x = PolicyParams::inputs(&params.features, &sg);
    let trace = pi.shape.forward(&pi.params, &x, sg.len());
    let logits = trace.output();
    let mut d_logits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..n {
            let r = i * n + j;
            let p = softmax(&logits[r * na..(r + 1) * na]);
            let ds: Vec<f64> = (0..na).map(|a| dist(i, a, j)).collect();
            let expected: f64 = p.iter().zip(&ds).map(|(p, d)| p * d).sum();
            let mut coef = (1.0 - cfg.lambda) / (nf * nf);
            if i == j {
                coef += cfg.lambda / nf;
            }
            loss += coef * expected;
            let dl = &mut d_logits[r * na..(r + 1) * na];
            for a in 0..na {
                dl[a] += coef * p[a] * (ds[a] - expected);
            }
            if i == j && cfg.alpha > 0.0 {
                let c = cfg.alpha / nf;
                loss -= c * p[batch.actions[i]].ln();
                for a in 0..na {
                    dl[a] += c * (p[a] - if a == batch.actions[i] { 1.0 } else { 0.0 });
                }
            }
        }
    }
    if !want_grad {
        return (loss, None);
    }
    let mut grad = vec![0.0; pi.params.len()];
    pi.shape.backward(&pi.params, &trace, &d_logits, &mut grad);
    (loss, Some(grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTask {
    pub start: State,
    pub goal: State,
    pub horizon: usize,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: usize,
    pub successes: usize,
    pub episodes: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    /// Mean of per-task rates.
    pub aggregate: f64,
}

/// Rolls out `pi` on every task; episode `e` of task `k` draws from its own
/// stream so results do not depend on evaluation order.
pub fn evaluate(mdp: &TabularMdp, pi: &dyn GoalPolicy, tasks: &[EvalTask], seed: u64) -> EvalReport {
    let mut results = Vec::with_capacity(tasks.len());
    for (k, task) in tasks.iter().enumerate() {
        let task_seed = derive_seed(seed, k as u64);
        let mut successes = 0;
        for e in 0..task.episodes {
            let mut rng = stream(task_seed, e as u64);
            let mut s = task.start;
            for _ in 0..task.horizon {
                let a = pi.act(s, task.goal);
                s = mdp.step(s, a, &mut rng).expect("policy actions are in range");
                if s == task.goal {
                    successes += 1;
                    break;
                }
            }
        }
        let rate = if task.episodes == 0 {
            0.0
        } else {
            successes as f64 / task.episodes as f64
        };
        results.push(TaskResult {
            task_id: k,
            successes,
            episodes: task.episodes,
            rate,
        });
    }
    let aggregate = if results.is_empty() {
        0.0
    } else {
        results.iter().map(|r| r.rate).sum::<f64>() / results.len() as f64
    };
    EvalReport {
        tasks: results,
        aggregate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::d_sd_star;

    struct Always(Action);
    impl GoalPolicy for Always {
        fn act(&self, _: State, _: State) -> Action {
            self.0
        }
    }

    #[test]
    fn stay_never_succeeds() {
        let mdp = TabularMdp::deterministic(0.9, &[vec![1, 0], vec![1, 1]]).unwrap();
        let tasks = [EvalTask {
            start: 0,
            goal: 1,
            horizon: 10,
            episodes: 5,
        }];
        assert_eq!(evaluate(&mdp, &Always(1), &tasks, 0).aggregate, 0.0);
        assert_eq!(evaluate(&mdp, &Always(0), &tasks, 0).aggregate, 1.0);
    }

    #[test]
    fn all_infinite_rows_fall_back_to_stay() {
        let d = DistanceTable::constant(2, 5, f64::INFINITY);
        let pi = extract_tabular_policy(&d);
        assert_eq!(pi.act(0, 1), GridAction::Stay.id());
        assert!(pi.unreachable.contains(&(0, 1)));
    }

    #[test]
    fn goal_row_tie_breaks_to_zero() {
        let mdp = TabularMdp::deterministic(0.9, &[vec![1, 0, 1], vec![1, 1, 1]]).unwrap();
        let pi = extract_tabular_policy(&d_sd_star(&mdp));
        assert_eq!(pi.act(0, 0), 0);
        assert_eq!(pi.act(1, 1), 0);
        assert_eq!(pi.act(0, 1), 0);
        assert_eq!(pi.act(1, 0), 2);
        assert_eq!(pi.unreachable, vec![(1, 0)]);
    }
}
