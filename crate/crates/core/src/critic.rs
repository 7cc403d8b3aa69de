//! State encoder `ψ`, state-action encoder `φ`, the frozen target `ψ̄`, and
//! batched embedding with gradient routing back to parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distance::DistanceTable;
use crate::mdp::{Action, State};
use crate::nn::{mrn, mrn_winners, MlpShape, MrnConfig, NnError, Trace};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    #[default]
    OneHot,
    /// Normalized grid coordinates.
    Coords,
}

/// Fixed input features for every state.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    table: Vec<f64>,
}

impl Features {
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let mut table = vec![0.0; n_states * n_states];
        for s in 0..n_states {
            table[s * n_states + s] = 1.0;
        }
        Self {
            n_states,
            n_actions,
            dim: n_states,
            table,
        }
    }

    pub fn coords(coords: &[(f64, f64)], n_actions: usize) -> Self {
        Self {
            n_states: coords.len(),
            n_actions,
            dim: 2,
            table: coords.iter().flat_map(|&(x, y)| [x, y]).collect(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn state_dim(&self) -> usize {
        self.dim
    }

    pub fn pair_dim(&self) -> usize {
        self.dim + self.n_actions
    }

    pub fn state(&self, s: State) -> &[f64] {
        &self.table[s * self.dim..(s + 1) * self.dim]
    }

    pub(crate) fn stack_states(&self, states: &[State]) -> Vec<f64> {
        let mut x = Vec::with_capacity(states.len() * self.dim);
        for &s in states {
            x.extend_from_slice(self.state(s));
        }
        x
    }

    pub(crate) fn stack_pairs(&self, pairs: &[(State, Action)]) -> Vec<f64> {
        let mut x = vec![0.0; pairs.len() * self.pair_dim()];
        for (row, &(s, a)) in x.chunks_exact_mut(self.pair_dim()).zip(pairs) {
            row[..self.dim].copy_from_slice(self.state(s));
            row[self.dim + a] = 1.0;
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default)]
    pub mrn: MrnConfig,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub layer_norm: bool,
    #[serde(default)]
    pub features: FeatureKind,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mrn: MrnConfig::default(),
            hidden: default_hidden(),
            layer_norm: false,
            features: FeatureKind::OneHot,
        }
    }
}

/// Critic parameters: `ψ`, `φ` and the snapshot `ψ̄` (same shape as `ψ`).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub mrn: MrnConfig,
    pub features: Features,
    pub psi_shape: MlpShape,
    pub phi_shape: MlpShape,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi_target: Vec<f64>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, features: Features, rng: &mut R) -> Self {
        let dim = cfg.mrn.dim();
        let psi_shape = MlpShape::new(features.state_dim(), &cfg.hidden, dim, cfg.layer_norm);
        let phi_shape = MlpShape::new(features.pair_dim(), &cfg.hidden, dim, cfg.layer_norm);
        let psi = psi_shape.init(rng);
        let phi = phi_shape.init(rng);
        Self {
            mrn: cfg.mrn,
            features,
            psi_target: psi.clone(),
            psi_shape,
            phi_shape,
            psi,
            phi,
        }
    }

    pub fn n_states(&self) -> usize {
        self.features.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.features.n_actions()
    }

    /// `ψ̄ := ψ`.
    pub fn snapshot_target(&mut self) {
        self.psi_target.copy_from_slice(&self.psi);
    }

    pub fn embed_states(&self, which: Net, states: &[State]) -> Vec<f64> {
        let params = match which {
            Net::Psi => &self.psi,
            Net::PsiTarget => &self.psi_target,
            Net::Phi => panic!("phi embeds state-action pairs"),
        };
        self.psi_shape
            .forward(params, &self.features.stack_states(states), states.len())
            .output()
            .to_vec()
    }

    pub fn embed_pairs(&self, pairs: &[(State, Action)]) -> Vec<f64> {
        self.phi_shape
            .forward(&self.phi, &self.features.stack_pairs(pairs), pairs.len())
            .output()
            .to_vec()
    }

    fn embed(&self, p: Endpoint) -> Vec<f64> {
        match p {
            Endpoint::State(s) => self.embed_states(Net::Psi, &[s]),
            Endpoint::Pair(s, a) => self.embed_pairs(&[(s, a)]),
        }
    }

    /// `d_MRN(enc(x), enc(y))`, encoding states with `ψ` and pairs with `φ`.
    pub fn full_distance(&self, x: Endpoint, y: Endpoint) -> f64 {
        mrn(&self.embed(x), &self.embed(y), self.mrn)
    }

    /// All `d((s, a), g)` at once, indexed `[(s * A + a) * S + g]`.
    pub fn pair_to_state_distances(&self) -> Vec<f64> {
        let (ns, na) = (self.n_states(), self.n_actions());
        let states: Vec<State> = (0..ns).collect();
        let pairs: Vec<(State, Action)> = (0..ns).flat_map(|s| (0..na).map(move |a| (s, a))).collect();
        let psi = self.embed_states(Net::Psi, &states);
        let phi = self.embed_pairs(&pairs);
        let dim = self.mrn.dim();
        let mut out = Vec::with_capacity(pairs.len() * ns);
        for x in phi.chunks_exact(dim) {
            for y in psi.chunks_exact(dim) {
                out.push(mrn(x, y, self.mrn));
            }
        }
        out
    }

    /// The learned distance on every pair of points of `S ∪ S×A`.
    pub fn distance_table(&self) -> DistanceTable {
        let (ns, na) = (self.n_states(), self.n_actions());
        let states: Vec<State> = (0..ns).collect();
        let pairs: Vec<(State, Action)> = (0..ns).flat_map(|s| (0..na).map(move |a| (s, a))).collect();
        let mut emb = self.embed_states(Net::Psi, &states);
        emb.extend(self.embed_pairs(&pairs));
        let dim = self.mrn.dim();
        let n = ns + pairs.len();
        let mut values = Vec::with_capacity(n * n);
        for x in emb.chunks_exact(dim) {
            for y in emb.chunks_exact(dim) {
                values.push(mrn(x, y, self.mrn));
            }
        }
        DistanceTable::from_values(ns, na, values).expect("mrn distances are valid")
    }

    /// Flat `[ψ, φ]` view used by the optimizer.
    pub fn trainable(&self) -> Vec<f64> {
        let mut v = self.psi.clone();
        v.extend_from_slice(&self.phi);
        v
    }

    pub fn set_trainable(&mut self, flat: &[f64]) {
        let n = self.psi.len();
        self.psi.copy_from_slice(&flat[..n]);
        self.phi.copy_from_slice(&flat[n..]);
    }

    pub fn n_trainable(&self) -> usize {
        self.psi.len() + self.phi.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Net {
    Psi,
    PsiTarget,
    Phi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endpoint {
    State(State),
    Pair(State, Action),
}

/// Gradient with respect to `ψ` and `φ` (never `ψ̄`).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrad {
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
}

impl EncoderGrad {
    pub fn zeros(params: &EncoderParams) -> Self {
        Self {
            psi: vec![0.0; params.psi.len()],
            phi: vec![0.0; params.phi.len()],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.psi.clone();
        v.extend_from_slice(&self.phi);
        v
    }
}

/// Embeddings of a deduplicated set of keys plus their accumulated output
/// gradients.
pub(crate) struct Rows {
    dim: usize,
    slot: Vec<usize>,
    keys: Vec<usize>,
    trace: Option<Trace>,
    out: Vec<f64>,
    grad: Vec<f64>,
}

impl Rows {
    fn new(n_keys: usize, dim: usize) -> Self {
        Self {
            dim,
            slot: vec![usize::MAX; n_keys],
            keys: Vec::new(),
            trace: None,
            out: Vec::new(),
            grad: Vec::new(),
        }
    }

    fn request(&mut self, key: usize) {
        if self.slot[key] == usize::MAX {
            self.slot[key] = self.keys.len();
            self.keys.push(key);
        }
    }

    pub(crate) fn row(&self, key: usize) -> &[f64] {
        let r = self.slot[key];
        &self.out[r * self.dim..(r + 1) * self.dim]
    }

    fn grad_row(&mut self, key: usize) -> &mut [f64] {
        let r = self.slot[key];
        &mut self.grad[r * self.dim..(r + 1) * self.dim]
    }
}

/// Keys requested by a loss before the forward pass.
#[derive(Default)]
pub(crate) struct Requests {
    pub psi: Vec<State>,
    pub psi_target: Vec<State>,
    pub phi: Vec<(State, Action)>,
}

/// One forward pass of `ψ`, `ψ̄`, `φ` over the keys a batch loss needs.
pub(crate) struct Embedded<'p> {
    params: &'p EncoderParams,
    pub psi: Rows,
    pub psi_target: Rows,
    pub phi: Rows,
    scratch: Vec<usize>,
}

impl<'p> Embedded<'p> {
    pub(crate) fn new(params: &'p EncoderParams, req: &Requests) -> Self {
        let (ns, na) = (params.n_states(), params.n_actions());
        let dim = params.mrn.dim();
        let mut psi = Rows::new(ns, dim);
        let mut psi_target = Rows::new(ns, dim);
        let mut phi = Rows::new(ns * na, dim);
        req.psi.iter().for_each(|&s| psi.request(s));
        req.psi_target.iter().for_each(|&s| psi_target.request(s));
        req.phi.iter().for_each(|&(s, a)| phi.request(s * na + a));

        let f = &params.features;
        let run = |rows: &mut Rows, shape: &MlpShape, p: &[f64], x: Vec<f64>, keep: bool| {
            let t = shape.forward(p, &x, rows.keys.len());
            rows.out = t.output().to_vec();
            rows.grad = vec![0.0; rows.out.len()];
            if keep {
                rows.trace = Some(t);
            }
        };
        let xs = f.stack_states(&psi.keys);
        run(&mut psi, &params.psi_shape, &params.psi, xs, true);
        let xs = f.stack_states(&psi_target.keys);
        run(&mut psi_target, &params.psi_shape, &params.psi_target, xs, false);
        let pairs: Vec<(State, Action)> = phi.keys.iter().map(|&k| (k / na, k % na)).collect();
        let xp = f.stack_pairs(&pairs);
        run(&mut phi, &params.phi_shape, &params.phi, xp, true);
        Self {
            params,
            psi,
            psi_target,
            phi,
            scratch: Vec::new(),
        }
    }

    pub(crate) fn pair_key(&self, s: State, a: Action) -> usize {
        s * self.params.n_actions() + a
    }

    pub(crate) fn mrn(&self) -> MrnConfig {
        self.params.mrn
    }

    /// Distance from `φ(s, a)` to a state embedding row.
    pub(crate) fn d_pair_state(&self, s: State, a: Action, g_rows: Net, g: State) -> f64 {
        let x = self.phi.row(self.pair_key(s, a));
        mrn(x, self.rows(g_rows).row(g), self.params.mrn)
    }

    pub(crate) fn rows(&self, net: Net) -> &Rows {
        match net {
            Net::Psi => &self.psi,
            Net::PsiTarget => &self.psi_target,
            Net::Phi => &self.phi,
        }
    }

    /// Adds `scale * ∂d(x, y)/∂(x, y)` into the row gradients; rows that
    /// belong to `ψ̄` never receive gradient.
    pub(crate) fn backprop_distance(&mut self, x: (Net, usize), y: (Net, usize), scale: f64) {
        if scale == 0.0 {
            return;
        }
        let cfg = self.params.mrn;
        let mut win = std::mem::take(&mut self.scratch);
        mrn_winners(self.rows(x.0).row(x.1), self.rows(y.0).row(y.1), cfg, &mut win);
        let w = scale / cfg.components as f64;
        for (net, key, sign) in [(x.0, x.1, w), (y.0, y.1, -w)] {
            let rows = match net {
                Net::Psi => &mut self.psi,
                Net::Phi => &mut self.phi,
                Net::PsiTarget => continue,
            };
            let g = rows.grad_row(key);
            for &i in win.iter().filter(|&&i| i != usize::MAX) {
                g[i] += sign;
            }
        }
        self.scratch = win;
    }

    /// Pushes the accumulated row gradients through both networks.
    pub(crate) fn backward(&self) -> EncoderGrad {
        let p = self.params;
        let mut grad = EncoderGrad::zeros(p);
        if let Some(t) = &self.psi.trace {
            if !self.psi.keys.is_empty() {
                p.psi_shape.backward(&p.psi, t, &self.psi.grad, &mut grad.psi);
            }
        }
        if let Some(t) = &self.phi.trace {
            if !self.phi.keys.is_empty() {
                p.phi_shape.backward(&p.phi, t, &self.phi.grad, &mut grad.phi);
            }
        }
        grad
    }
}

pub(crate) fn check_finite(v: f64) -> Result<f64, NnError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NnError::NonFinite(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn params() -> EncoderParams {
        let mut rng = seeded(3);
        EncoderParams::init(&EncoderConfig::default(), Features::one_hot(6, 5), &mut rng)
    }

    #[test]
    fn self_distance_zero_and_finite_ranges() {
        let p = params();
        assert_eq!(p.full_distance(Endpoint::State(2), Endpoint::State(2)), 0.0);
        let kinds = [
            (Endpoint::State(0), Endpoint::State(3)),
            (Endpoint::Pair(1, 2), Endpoint::State(4)),
            (Endpoint::State(1), Endpoint::Pair(1, 0)),
            (Endpoint::Pair(0, 1), Endpoint::Pair(5, 4)),
        ];
        for (x, y) in kinds {
            let d = p.full_distance(x, y);
            assert!(d.is_finite() && d >= 0.0);
        }
    }

    #[test]
    fn snapshot_semantics() {
        let mut p = params();
        p.psi[0] += 1.0;
        assert_ne!(p.embed_states(Net::Psi, &[0, 1]), p.embed_states(Net::PsiTarget, &[0, 1]));
        p.snapshot_target();
        let snap = p.psi_target.clone();
        assert_eq!(p.embed_states(Net::Psi, &[0, 1]), p.embed_states(Net::PsiTarget, &[0, 1]));
        p.snapshot_target();
        assert_eq!(snap, p.psi_target);
        p.psi[1] -= 0.5;
        assert_eq!(snap, p.psi_target);
    }

    #[test]
    fn table_matches_pointwise() {
        let p = params();
        let t = p.distance_table();
        assert!(t.check_distance().is_ok());
        let d = p.full_distance(Endpoint::Pair(2, 3), Endpoint::State(5));
        assert!((t.get(t.pair(2, 3), 5) - d).abs() < 1e-12);
        let flat = p.pair_to_state_distances();
        assert!((flat[(2 * 5 + 3) * 6 + 5] - d).abs() < 1e-12);
    }
}
