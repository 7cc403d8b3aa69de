//! Dense multilayer perceptrons with hand-written reverse mode, plus the MRN
//! distance head.
//!
//! Parameters live in flat `Vec<f64>` buffers so the optimizer, snapshots and
//! checkpoints treat every network the same way. Layer `l` stores its weight
//! as an `in x out` row-major block followed by an `out` bias.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::uniform01;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("mrn config needs positive K and M")]
    MrnConfig,
    #[error("non-finite loss {0}")]
    NonFinite(f64),
}

/// `C = alpha * A B + beta * C` on strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() >= 1 + (m - 1) * rsa as usize + (k - 1) * csa as usize);
        assert!(b.len() >= 1 + (k - 1) * rsb as usize + (n - 1) * csb as usize);
    }
    // SAFETY: bounds of every strided view are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    /// Layer widths including input and output.
    pub sizes: Vec<usize>,
    /// Normalize hidden pre-activations (no affine parameters).
    pub layer_norm: bool,
}

impl MlpShape {
    pub fn new(input: usize, hidden: &[usize], output: usize, layer_norm: bool) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self { sizes, layer_norm }
    }

    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for j in 0..l {
            off += (self.sizes[j] + 1) * self.sizes[j + 1];
        }
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    pub fn n_params(&self) -> usize {
        (0..self.n_layers()).map(|l| (self.sizes[l] + 1) * self.sizes[l + 1]).sum()
    }

    /// Uniform `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params()];
        for l in 0..self.n_layers() {
            let (w, b) = self.layer_offsets(l);
            let bound = 1.0 / (self.sizes[l] as f64).sqrt();
            for v in &mut p[w..b + self.sizes[l + 1]] {
                *v = bound * (2.0 * uniform01(rng) - 1.0);
            }
        }
        p
    }

    /// Forward pass over `rows` stacked inputs.
    pub fn forward(&self, params: &[f64], x: &[f64], rows: usize) -> Trace {
        debug_assert_eq!(params.len(), self.n_params());
        debug_assert_eq!(x.len(), rows * self.input());
        let mut acts = vec![x.to_vec()];
        let mut inv_std = Vec::new();
        let mut normed = Vec::new();
        let last = self.n_layers() - 1;
        for l in 0..=last {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer_offsets(l);
            let mut h = vec![0.0; rows * fan_out];
            for r in 0..rows {
                h[r * fan_out..(r + 1) * fan_out].copy_from_slice(&params[b..b + fan_out]);
            }
            gemm(
                rows,
                fan_in,
                fan_out,
                &acts[l],
                (fan_in as isize, 1),
                &params[w..b],
                (fan_out as isize, 1),
                1.0,
                &mut h,
            );
            if l < last {
                let mut istd = Vec::new();
                if self.layer_norm {
                    istd = vec![0.0; rows];
                    for r in 0..rows {
                        let row = &mut h[r * fan_out..(r + 1) * fan_out];
                        let mean = row.iter().sum::<f64>() / fan_out as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fan_out as f64;
                        let s = 1.0 / (var + LN_EPS).sqrt();
                        for v in row.iter_mut() {
                            *v = (*v - mean) * s;
                        }
                        istd[r] = s;
                    }
                }
                inv_std.push(istd);
                normed.push(if self.layer_norm { h.clone() } else { Vec::new() });
                for v in &mut h {
                    *v = v.max(0.0);
                }
            }
            acts.push(h);
        }
        Trace { rows, acts, inv_std, normed }
    }

    /// Accumulates parameter gradients into `grad` given `d_out` for the
    /// trace's output; returns the input gradient.
    pub fn backward(&self, params: &[f64], trace: &Trace, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let rows = trace.rows;
        let mut delta = d_out.to_vec();
        let last = self.n_layers() - 1;
        for l in (0..=last).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer_offsets(l);
            if l < last {
                // through relu: post-activation > 0 iff pre-activation > 0
                let out = &trace.acts[l + 1];
                for (d, &o) in delta.iter_mut().zip(out) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
                if self.layer_norm {
                    let (istd, yhat) = (&trace.inv_std[l], &trace.normed[l]);
                    for r in 0..rows {
                        let dy = &mut delta[r * fan_out..(r + 1) * fan_out];
                        let y = &yhat[r * fan_out..(r + 1) * fan_out];
                        let n = fan_out as f64;
                        let mean_dy = dy.iter().sum::<f64>() / n;
                        let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (d, &yj) in dy.iter_mut().zip(y) {
                            *d = istd[r] * (*d - mean_dy - yj * mean_dyy);
                        }
                    }
                }
            }
            for r in 0..rows {
                for (g, d) in grad[b..b + fan_out].iter_mut().zip(&delta[r * fan_out..(r + 1) * fan_out]) {
                    *g += d;
                }
            }
            gemm(
                fan_in,
                rows,
                fan_out,
                &trace.acts[l],
                (1, fan_in as isize),
                &delta,
                (fan_out as isize, 1),
                1.0,
                &mut grad[w..b],
            );
            let mut prev = vec![0.0; rows * fan_in];
            gemm(
                rows,
                fan_out,
                fan_in,
                &delta,
                (fan_out as isize, 1),
                &params[w..b],
                (1, fan_out as isize),
                0.0,
                &mut prev,
            );
            delta = prev;
        }
        delta
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub rows: usize,
    acts: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
    normed: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn output_row(&self, r: usize) -> &[f64] {
        let out = self.output();
        let dim = out.len() / self.rows.max(1);
        &out[r * dim..(r + 1) * dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MrnConfig {
    /// Number of components `K`.
    pub components: usize,
    /// Coordinates per component `M`.
    pub component_size: usize,
}

impl Default for MrnConfig {
    fn default() -> Self {
        Self {
            components: 8,
            component_size: 4,
        }
    }
}

impl MrnConfig {
    pub fn new(components: usize, component_size: usize) -> Result<Self, NnError> {
        if components == 0 || component_size == 0 {
            return Err(NnError::MrnConfig);
        }
        Ok(Self {
            components,
            component_size,
        })
    }

    /// Latent dimension `D = K * M`.
    pub fn dim(&self) -> usize {
        self.components * self.component_size
    }
}

/// `(1/K) Σ_k max_m max(0, x[kM+m] - y[kM+m])`.
pub fn mrn_distance(x: &[f64], y: &[f64], cfg: MrnConfig) -> Result<f64, NnError> {
    for v in [x, y] {
        if v.len() != cfg.dim() {
            return Err(NnError::Dimension {
                expected: cfg.dim(),
                got: v.len(),
            });
        }
    }
    Ok(mrn(x, y, cfg))
}

pub(crate) fn mrn(x: &[f64], y: &[f64], cfg: MrnConfig) -> f64 {
    let m = cfg.component_size;
    let mut total = 0.0;
    for (xc, yc) in x.chunks_exact(m).zip(y.chunks_exact(m)) {
        let mut best = 0.0f64;
        for (a, b) in xc.iter().zip(yc) {
            best = best.max(a - b);
        }
        total += best;
    }
    total / cfg.components as f64
}

/// Writes each component's winning coordinate into `winners`, or
/// `usize::MAX` when the component's maximum is not positive. Ties go to the
/// lowest index.
pub(crate) fn mrn_winners(x: &[f64], y: &[f64], cfg: MrnConfig, winners: &mut Vec<usize>) {
    let m = cfg.component_size;
    winners.clear();
    for k in 0..cfg.components {
        let mut best = 0.0f64;
        let mut slot = usize::MAX;
        for j in 0..m {
            let i = k * m + j;
            let diff = x[i] - y[i];
            if diff > best {
                best = diff;
                slot = i;
            }
        }
        winners.push(slot);
    }
}

/// Adds `scale * ∂mrn/∂x` to `gx` and `scale * ∂mrn/∂y` to `gy`.
pub fn mrn_backward(x: &[f64], y: &[f64], cfg: MrnConfig, scale: f64, gx: Option<&mut [f64]>, gy: Option<&mut [f64]>) {
    let mut win = Vec::with_capacity(cfg.components);
    mrn_winners(x, y, cfg, &mut win);
    let w = scale / cfg.components as f64;
    if let Some(gx) = gx {
        for &i in win.iter().filter(|&&i| i != usize::MAX) {
            gx[i] += w;
        }
    }
    if let Some(gy) = gy {
        for &i in win.iter().filter(|&&i| i != usize::MAX) {
            gy[i] -= w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn mrn_examples() {
        let c = MrnConfig::new(1, 2).unwrap();
        assert!((mrn_distance(&[0.5, 1.0], &[0.2, 1.5], c).unwrap() - 0.3).abs() < 1e-15);
        let one = MrnConfig::new(1, 1).unwrap();
        assert_eq!(mrn_distance(&[1.0], &[0.0], one).unwrap(), 1.0);
        assert_eq!(mrn_distance(&[0.0], &[1.0], one).unwrap(), 0.0);
        assert_eq!(mrn_distance(&[0.3, 0.1], &[0.3, 0.1], c).unwrap(), 0.0);
        assert_eq!(
            mrn_distance(&[1.0], &[0.0, 1.0], c),
            Err(NnError::Dimension { expected: 2, got: 1 })
        );
    }

    #[test]
    fn mrn_gradient_on_strict_winner() {
        let c = MrnConfig::new(2, 2).unwrap();
        let x = [1.0, 0.0, 0.0, 0.0];
        let y = [0.0, 0.0, 0.0, 2.0];
        let (mut gx, mut gy) = (vec![0.0; 4], vec![0.0; 4]);
        mrn_backward(&x, &y, c, 1.0, Some(&mut gx), Some(&mut gy));
        assert_eq!(gx, vec![0.5, 0.0, 0.0, 0.0]);
        assert_eq!(gy, vec![-0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mlp_matches_naive_forward() {
        let shape = MlpShape::new(3, &[4], 2, false);
        let mut rng = seeded(1);
        let p = shape.init(&mut rng);
        let x = [0.2, -0.4, 1.0, 0.5, 0.5, -1.0];
        let t = shape.forward(&p, &x, 2);
        for r in 0..2 {
            let mut h = [0.0; 4];
            for (o, hv) in h.iter_mut().enumerate() {
                *hv = p[12 + o];
                for i in 0..3 {
                    *hv += x[r * 3 + i] * p[i * 4 + o];
                }
                *hv = hv.max(0.0);
            }
            for o in 0..2 {
                let mut y = p[16 + 8 + o];
                for i in 0..4 {
                    y += h[i] * p[16 + i * 2 + o];
                }
                assert!((t.output_row(r)[o] - y).abs() < 1e-12);
            }
        }
    }

    fn finite_difference_check(layer_norm: bool) {
        let shape = MlpShape::new(3, &[5, 4], 2, layer_norm);
        let mut rng = seeded(7);
        let p = shape.init(&mut rng);
        let x: Vec<f64> = (0..9).map(|_| 2.0 * uniform01(&mut rng) - 1.0).collect();
        let coef: Vec<f64> = (0..6).map(|_| 2.0 * uniform01(&mut rng) - 1.0).collect();
        let loss = |p: &[f64], x: &[f64]| -> f64 {
            shape.forward(p, x, 3).output().iter().zip(&coef).map(|(a, b)| a * b).sum()
        };
        let t = shape.forward(&p, &x, 3);
        let mut g = vec![0.0; p.len()];
        let gx = shape.backward(&p, &t, &coef, &mut g);
        let eps = 1e-6;
        for i in 0..p.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += eps;
            b[i] -= eps;
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += eps;
            b[i] -= eps;
            let fd = (loss(&p, &a) - loss(&p, &b)) / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}");
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        finite_difference_check(false);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        finite_difference_check(true);
    }
}
