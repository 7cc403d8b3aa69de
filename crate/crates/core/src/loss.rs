//! Critic objective: backward NCE, the action-invariance penalty and the
//! Bellman-invariance penalty, combined with weight `ζ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{check_finite, EncoderGrad, EncoderParams, Embedded, Net, Requests};
use crate::env::Batch;
use crate::nn::NnError;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    Config(String),
}

/// Divergence used by the Bellman-invariance penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    /// `exp(d - t) - d`.
    #[default]
    Bregman,
    /// `(e^{-d} - e^{-t})^2`.
    L2,
    /// Binary cross-entropy of `e^{-d}` against `e^{-t}`.
    Bce,
}

/// How per-term values are aggregated over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Plain sums over `i` and `(i, j)`.
    #[default]
    Sum,
    /// NCE divided by `N`, the invariance penalty by `N²`, and the Bellman
    /// penalty by the total pair weight.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TmdConfig {
    pub zeta: f64,
    pub gamma: f64,
    #[serde(default = "default_clip")]
    pub clip_t: f64,
    #[serde(default = "default_w_diag")]
    pub w_diag: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub divergence: Divergence,
    #[serde(default = "yes")]
    pub use_nce: bool,
    #[serde(default = "yes")]
    pub use_i: bool,
    #[serde(default = "yes")]
    pub use_t: bool,
    /// Backup targets use the frozen `ψ̄`; when false they use live `ψ`
    /// and receive gradient.
    #[serde(default = "yes")]
    pub stop_gradient: bool,
    /// Use live `ψ(g_j)` (with gradient) inside the source distance of the
    /// Bellman penalty instead of `ψ̄(g_j)`.
    #[serde(default)]
    pub live_source_goal: bool,
}

fn default_clip() -> f64 {
    5.0
}
fn default_w_diag() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    3e-4
}
fn default_batch() -> usize {
    64
}
fn default_alpha() -> f64 {
    0.1
}
fn yes() -> bool {
    true
}

impl Default for TmdConfig {
    fn default() -> Self {
        Self {
            zeta: 0.1,
            gamma: 0.99,
            clip_t: default_clip(),
            w_diag: default_w_diag(),
            lr: default_lr(),
            batch_size: default_batch(),
            lambda: 0.0,
            alpha: default_alpha(),
            reduction: Reduction::Sum,
            divergence: Divergence::Bregman,
            use_nce: true,
            use_i: true,
            use_t: true,
            stop_gradient: true,
            live_source_goal: false,
        }
    }
}

impl TmdConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: &str| Err(LossError::Config(m.into()));
        if !(self.zeta >= 0.0) {
            return bad("zeta must be nonnegative");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.clip_t > 0.0) {
            return bad("clip_t must be positive");
        }
        if !(0.0..=1.0).contains(&self.w_diag) {
            return bad("w_diag must lie in [0, 1]");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be nonnegative");
        }
        Ok(())
    }
}

/// `D_T(d, t) = exp(d - t) - d`.
pub fn bregman_dt(d: f64, d_target: f64) -> f64 {
    (d - d_target).exp() - d
}

/// Value and partial derivatives `(∂/∂d, ∂/∂t)` of a divergence term.
pub fn divergence_term(kind: Divergence, d: f64, t: f64) -> (f64, f64, f64) {
    match kind {
        Divergence::Bregman => {
            let e = (d - t).exp();
            (e - d, e - 1.0, -e)
        }
        Divergence::L2 => {
            let (p, y) = ((-d).exp(), (-t).exp());
            let r = p - y;
            (r * r, -2.0 * r * p, 2.0 * r * y)
        }
        Divergence::Bce => {
            let y = (-t).exp();
            // ln(1 - e^{-d}) and its derivative e^{-d} / (1 - e^{-d})
            let log_q = (-(-d).exp_m1()).ln();
            let dlog_q = 1.0 / (d.exp_m1());
            (y * d - (1.0 - y) * log_q, y - (1.0 - y) * dlog_q, -y * (d + log_q))
        }
    }
}

/// Per-component values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nce: f64,
    pub l_i: f64,
    pub l_t: f64,
    pub total: f64,
}

/// A single component, for isolated evaluation and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Nce,
    ActionInvariance,
    Backup,
    Total,
}

fn requests(batch: &Batch, cfg: &TmdConfig) -> Requests {
    let mut req = Requests::default();
    req.psi.extend(&batch.goals);
    req.psi.extend(&batch.states);
    req.psi_target.extend(&batch.goals);
    req.psi_target.extend(&batch.next_states);
    if !cfg.stop_gradient {
        req.psi.extend(&batch.next_states);
    }
    for &s in &batch.states {
        for &a in &batch.actions {
            req.phi.push((s, a));
        }
    }
    req
}

struct Weights {
    nce: f64,
    l_i: f64,
    l_t: f64,
}

/// Evaluates all three components, optionally back-propagating
/// `w.nce * nce + w.l_i * l_i + w.l_t * l_t`.
fn evaluate(
    params: &EncoderParams,
    batch: &Batch,
    cfg: &TmdConfig,
    w: Option<Weights>,
) -> Result<(LossBreakdown, Option<EncoderGrad>), LossError> {
    let n = batch.len();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let mut emb = Embedded::new(params, &requests(batch, cfg));
    let want = w.is_some();
    let w = w.unwrap_or(Weights {
        nce: 0.0,
        l_i: 0.0,
        l_t: 0.0,
    });
    let nf = n as f64;
    let (scale_nce, scale_i, pair_weight) = match cfg.reduction {
        Reduction::Sum => (1.0, 1.0, 1.0),
        Reduction::Mean => {
            let total_w = nf + (1.0 - cfg.w_diag) * nf * (nf - 1.0);
            (1.0 / nf, 1.0 / (nf * nf), 1.0 / total_w)
        }
    };
    let (s, a, sp, g) = (&batch.states, &batch.actions, &batch.next_states, &batch.goals);

    // backward NCE: logits[j][i] = -d(φ(s_j, a_j), ψ(g_i)), softmax over j
    let mut nce = 0.0;
    let mut logits = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            logits[j] = -emb.d_pair_state(s[j], a[j], Net::Psi, g[i]);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + z.ln();
        nce += lse - logits[i];
        if want && w.nce != 0.0 {
            for j in 0..n {
                let p = (logits[j] - lse).exp();
                let dl = p - if i == j { 1.0 } else { 0.0 };
                // ∂logit/∂d = -1
                let key = emb.pair_key(s[j], a[j]);
                emb.backprop_distance((Net::Phi, key), (Net::Psi, g[i]), -dl * w.nce * scale_nce);
            }
        }
    }
    check_finite(nce)?;

    // action invariance: Σ_{i,j} d(ψ(s_i), φ(s_i, a_j))
    let mut l_i = 0.0;
    for i in 0..n {
        for j in 0..n {
            let key = emb.pair_key(s[i], a[j]);
            l_i += crate::nn::mrn(emb.psi.row(s[i]), emb.phi.row(key), emb.mrn());
            if want && w.l_i != 0.0 {
                emb.backprop_distance((Net::Psi, s[i]), (Net::Phi, key), w.l_i * scale_i);
            }
        }
    }

    // Bellman invariance with clipped divergence
    let target_net = if cfg.stop_gradient { Net::PsiTarget } else { Net::Psi };
    let source_goal = if cfg.live_source_goal || !cfg.stop_gradient {
        Net::Psi
    } else {
        Net::PsiTarget
    };
    let offset = -cfg.gamma.ln();
    let mut l_t = 0.0;
    for i in 0..n {
        let key = emb.pair_key(s[i], a[i]);
        for j in 0..n {
            let wij = if i == j { 1.0 } else { 1.0 - cfg.w_diag };
            if wij == 0.0 {
                continue;
            }
            let d = crate::nn::mrn(emb.phi.row(key), emb.rows(source_goal).row(g[j]), emb.mrn());
            let t = crate::nn::mrn(emb.rows(target_net).row(sp[i]), emb.rows(target_net).row(g[j]), emb.mrn()) + offset;
            let (value, dd, dt) = divergence_term(cfg.divergence, d, t);
            let clipped = !(value < cfg.clip_t);
            l_t += wij * if clipped { cfg.clip_t } else { value };
            if want && w.l_t != 0.0 && !clipped {
                let scale = wij * w.l_t * pair_weight;
                emb.backprop_distance((Net::Phi, key), (source_goal, g[j]), scale * dd);
                emb.backprop_distance((target_net, sp[i]), (target_net, g[j]), scale * dt);
            }
        }
    }
    check_finite(l_t)?;

    let nce = nce * scale_nce;
    let l_i = l_i * scale_i;
    let l_t = l_t * pair_weight;
    let total = on(cfg.use_nce) * nce + cfg.zeta * (on(cfg.use_i) * l_i + on(cfg.use_t) * l_t);
    let breakdown = LossBreakdown { nce, l_i, l_t, total };
    let grad = if want { Some(emb.backward()) } else { None };
    Ok((breakdown, grad))
}

fn on(flag: bool) -> f64 {
    if flag {
        1.0
    } else {
        0.0
    }
}

/// `-Σ_i log softmax_j(-d(φ(s_j, a_j), ψ(g_i)))[i]`.
pub fn loss_nce(params: &EncoderParams, batch: &Batch) -> Result<f64, LossError> {
    let cfg = TmdConfig::default();
    Ok(evaluate(params, batch, &cfg, None)?.0.nce)
}

/// `Σ_{i,j} d(ψ(s_i), φ(s_i, a_j))`.
pub fn loss_i(params: &EncoderParams, batch: &Batch) -> Result<f64, LossError> {
    let cfg = TmdConfig::default();
    Ok(evaluate(params, batch, &cfg, None)?.0.l_i)
}

/// Weighted, clipped divergence between `d(φ(s_i, a_i), ψ̄(g_j))` and the
/// backed-up target `d(ψ̄(s'_i), ψ̄(g_j)) - log γ`.
pub fn loss_t(params: &EncoderParams, batch: &Batch, cfg: &TmdConfig) -> Result<f64, LossError> {
    Ok(evaluate(params, batch, cfg, None)?.0.l_t)
}

pub fn loss_tmd(params: &EncoderParams, batch: &Batch, cfg: &TmdConfig) -> Result<LossBreakdown, LossError> {
    Ok(evaluate(params, batch, cfg, None)?.0)
}

/// Total loss and its gradient with respect to `ψ` and `φ`.
pub fn loss_tmd_grad(
    params: &EncoderParams,
    batch: &Batch,
    cfg: &TmdConfig,
) -> Result<(LossBreakdown, EncoderGrad), LossError> {
    let w = Weights {
        nce: on(cfg.use_nce),
        l_i: cfg.zeta * on(cfg.use_i),
        l_t: cfg.zeta * on(cfg.use_t),
    };
    let (b, g) = evaluate(params, batch, cfg, Some(w))?;
    Ok((b, g.expect("gradient requested")))
}

/// Value and gradient of one unweighted component (or the total).
pub fn component_grad(
    params: &EncoderParams,
    batch: &Batch,
    cfg: &TmdConfig,
    component: Component,
) -> Result<(f64, EncoderGrad), LossError> {
    if component == Component::Total {
        let (b, g) = loss_tmd_grad(params, batch, cfg)?;
        return Ok((b.total, g));
    }
    let pick = |c| if c == component { 1.0 } else { 0.0 };
    let w = Weights {
        nce: pick(Component::Nce),
        l_i: pick(Component::ActionInvariance),
        l_t: pick(Component::Backup),
    };
    let (b, g) = evaluate(params, batch, cfg, Some(w))?;
    let value = match component {
        Component::Nce => b.nce,
        Component::ActionInvariance => b.l_i,
        _ => b.l_t,
    };
    Ok((value, g.expect("gradient requested")))
}

/// Population backward NCE for a free-parameter critic `f[x][g]` over
/// sources `x` with marginal `p_source[x]` and conditional goal
/// distributions `p_goal[x][g]`. Returns the loss and its gradient.
pub fn population_nce(f: &[f64], p_source: &[f64], p_goal: &[f64], n_goals: usize) -> (f64, Vec<f64>) {
    let n_src = p_source.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; f.len()];
    for g in 0..n_goals {
        let max = (0..n_src).map(|x| f[x * n_goals + g]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n_src).map(|x| p_source[x] * (f[x * n_goals + g] - max).exp()).sum();
        let lse = max + z.ln();
        let p_g: f64 = (0..n_src).map(|x| p_source[x] * p_goal[x * n_goals + g]).sum();
        for x in 0..n_src {
            let joint = p_source[x] * p_goal[x * n_goals + g];
            loss -= joint * (f[x * n_goals + g] - lse);
            let q = p_source[x] * (f[x * n_goals + g] - lse).exp();
            grad[x * n_goals + g] = p_g * q - joint;
        }
    }
    (loss, grad)
}

/// Gradient descent on [`population_nce`] from zero logits.
pub fn fit_tabular_nce(p_source: &[f64], p_goal: &[f64], n_goals: usize, lr: f64, iterations: usize) -> Vec<f64> {
    let mut f = vec![0.0; p_goal.len()];
    for _ in 0..iterations {
        let (_, g) = population_nce(&f, p_source, p_goal, n_goals);
        for (v, gv) in f.iter_mut().zip(&g) {
            *v -= lr * gv;
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::{EncoderConfig, Features};
    use crate::nn::MrnConfig;
    use crate::rng::seeded;

    fn params(seed: u64) -> EncoderParams {
        let cfg = EncoderConfig {
            mrn: MrnConfig::new(2, 2).unwrap(),
            hidden: vec![8],
            ..EncoderConfig::default()
        };
        EncoderParams::init(&cfg, Features::one_hot(4, 2), &mut seeded(seed))
    }

    fn batch() -> Batch {
        let mut b = Batch::default();
        b.push(0, 1, 1, 2);
        b.push(1, 0, 2, 3);
        b.push(2, 1, 3, 3);
        b
    }

    #[test]
    fn bregman_examples() {
        assert_eq!(bregman_dt(0.0, 0.0), 1.0);
        assert!((bregman_dt(2.5, 2.5) - (1.0 - 2.5)).abs() < 1e-15);
    }

    #[test]
    fn single_tuple_nce_is_zero() {
        let mut b = Batch::default();
        b.push(0, 0, 1, 1);
        assert!(loss_nce(&params(1), &b).unwrap().abs() < 1e-15);
    }

    #[test]
    fn equal_critic_gives_two_log_two() {
        // all-zero output layer makes every embedding identical
        let mut p = params(2);
        p.psi.iter_mut().for_each(|v| *v = 0.0);
        p.phi.iter_mut().for_each(|v| *v = 0.0);
        let mut b = Batch::default();
        b.push(0, 0, 1, 2);
        b.push(1, 1, 2, 3);
        assert!((loss_nce(&p, &b).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(loss_i(&p, &b).unwrap(), 0.0);
    }

    #[test]
    fn zeta_weighting() {
        let p = params(3);
        let b = batch();
        let zero = TmdConfig {
            zeta: 0.0,
            gamma: 0.9,
            ..TmdConfig::default()
        };
        let l = loss_tmd(&p, &b, &zero).unwrap();
        assert_eq!(l.total, l.nce);
        let cfg = TmdConfig { zeta: 0.1, ..zero };
        let l = loss_tmd(&p, &b, &cfg).unwrap();
        assert!((l.total - (l.nce + 0.1 * (l.l_i + l.l_t))).abs() < 1e-12);
    }

    #[test]
    fn diagonal_only_weighting() {
        let p = params(4);
        let b = batch();
        let diag = TmdConfig {
            gamma: 0.9,
            w_diag: 1.0,
            ..TmdConfig::default()
        };
        let full = loss_t(&p, &b, &diag).unwrap();
        let mut manual = 0.0;
        for i in 0..b.len() {
            let mut one = Batch::default();
            one.push(b.states[i], b.actions[i], b.next_states[i], b.goals[i]);
            manual += loss_t(&p, &one, &diag).unwrap();
        }
        assert!((full - manual).abs() < 1e-12);
    }

    #[test]
    fn clip_caps_terms() {
        let p = params(5);
        let mut b = Batch::default();
        b.push(0, 0, 1, 2);
        let cfg = TmdConfig {
            gamma: 0.9,
            clip_t: 1e-9,
            ..TmdConfig::default()
        };
        // D_T exceeds this tiny clip whenever d < 1 - 1e-9, which holds at init
        assert_eq!(loss_t(&p, &b, &cfg).unwrap(), 1e-9);
    }

    #[test]
    fn divergence_derivatives() {
        for kind in [Divergence::Bregman, Divergence::L2, Divergence::Bce] {
            let (d, t) = (0.7, 1.3);
            let (_, dd, dt) = divergence_term(kind, d, t);
            let h = 1e-6;
            let fd_d = (divergence_term(kind, d + h, t).0 - divergence_term(kind, d - h, t).0) / (2.0 * h);
            let fd_t = (divergence_term(kind, d, t + h).0 - divergence_term(kind, d, t - h).0) / (2.0 * h);
            assert!((fd_d - dd).abs() < 1e-7, "{kind:?}");
            assert!((fd_t - dt).abs() < 1e-7, "{kind:?}");
        }
    }
}
