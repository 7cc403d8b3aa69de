//! Deterministic quasimetric regression: every observed transition is
//! treated as a one-step edge, and distances are pushed as far apart as those
//! local constraints allow. Stochastic transitions thus look like whichever
//! outcome is most convenient.

use serde::{Deserialize, Serialize};

use crate::critic::{check_finite, EncoderGrad, EncoderParams, Embedded, Net, Requests};
use crate::env::Batch;
use crate::loss::LossError;
use crate::nn::mrn;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    /// Weight of the squared local-constraint violation.
    #[serde(default = "default_penalty")]
    pub penalty: f64,
    /// Distances beyond this stop being pushed apart.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_penalty() -> f64 {
    100.0
}
fn default_margin() -> f64 {
    4.0
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            penalty: default_penalty(),
            margin: default_margin(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegressionBreakdown {
    pub local: f64,
    pub action: f64,
    pub spread: f64,
    pub total: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `penalty * mean_i relu(d(φ(s_i,a_i), ψ(s'_i)) - step)^2
///  + mean_i d(ψ(s_i), φ(s_i,a_i)) + mean_{i,j} softplus(margin - d(φ(s_i,a_i), ψ(g_j)))`
/// with `step = -log γ`.
pub fn regression_loss_grad(
    params: &EncoderParams,
    batch: &Batch,
    gamma: f64,
    cfg: &RegressionConfig,
) -> Result<(RegressionBreakdown, EncoderGrad), LossError> {
    let n = batch.len();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let mut req = Requests::default();
    req.psi.extend(&batch.states);
    req.psi.extend(&batch.next_states);
    req.psi.extend(&batch.goals);
    req.phi.extend(batch.states.iter().zip(&batch.actions).map(|(&s, &a)| (s, a)));
    let mut emb = Embedded::new(params, &req);
    let cfg_mrn = emb.mrn();
    let step = -gamma.ln();
    let nf = n as f64;
    let mut out = RegressionBreakdown::default();
    for i in 0..n {
        let (s, a, sp) = (batch.states[i], batch.actions[i], batch.next_states[i]);
        let key = emb.pair_key(s, a);
        let d = mrn(emb.phi.row(key), emb.psi.row(sp), cfg_mrn);
        let excess = (d - step).max(0.0);
        out.local += cfg.penalty * excess * excess / nf;
        emb.backprop_distance((Net::Phi, key), (Net::Psi, sp), 2.0 * cfg.penalty * excess / nf);

        out.action += mrn(emb.psi.row(s), emb.phi.row(key), cfg_mrn) / nf;
        emb.backprop_distance((Net::Psi, s), (Net::Phi, key), 1.0 / nf);

        for j in 0..n {
            let g = batch.goals[j];
            let d = mrn(emb.phi.row(key), emb.psi.row(g), cfg_mrn);
            out.spread += softplus(cfg.margin - d) / (nf * nf);
            emb.backprop_distance((Net::Phi, key), (Net::Psi, g), -sigmoid(cfg.margin - d) / (nf * nf));
        }
    }
    out.total = check_finite(out.local + out.action + out.spread)?;
    Ok((out, emb.backward()))
}
