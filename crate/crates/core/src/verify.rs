//! Invariant suites behind `tmd verify <suite>`, plus the finite-difference
//! gradient checker they share with the tests.

use rand::Rng;

use crate::baseline::{regression_loss_grad, RegressionConfig};
use crate::critic::{EncoderConfig, EncoderParams, Features};
use crate::distance::{
    is_quasimetric, path_relaxation, quasimetric_closure, tmd_fixed_point, tmd_step, DistanceTable, FixedPointOptions,
    WaypointDomain,
};
use crate::env::Batch;
use crate::loss::{bregman_dt, component_grad, Component, Divergence, LossError, TmdConfig};
use crate::mdp::{TabularMdp, TabularPolicy};
use crate::nn::MrnConfig;
use crate::oracle::{d_sd_pi, d_sd_star};
use crate::policy::{loss_policy, loss_policy_grad, PolicyParams};
use crate::rng::{seeded, stream, uniform01, SimRng};
use crate::train::{RunConfig, Trainer};

pub const SUITES: [&str; 5] = ["operators", "oracle", "gradients", "divergence", "end-to-end"];

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        s.push_str(&format!("{} checks, {} failed\n", self.checks.len(), failed));
        s
    }
}

pub fn run_suite(name: &str) -> Option<Report> {
    Some(match name {
        "operators" => operators(),
        "oracle" => oracle(),
        "gradients" => gradients(),
        "divergence" => divergence(),
        "end-to-end" => end_to_end(),
        _ => return None,
    })
}

/// Random MDP: each `(s, a)` has one successor, or between one and three
/// with Dirichlet-like weights when `stochastic`.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, stochastic: bool, gamma: f64) -> TabularMdp {
    let mut flat = vec![0.0; n_states * n_actions * n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            let row = &mut flat[(s * n_actions + a) * n_states..][..n_states];
            let k = if stochastic { rng.gen_range(1..=3) } else { 1 };
            let mut total = 0.0;
            for _ in 0..k {
                let w = -(1.0 - uniform01(rng)).ln();
                row[rng.gen_range(0..n_states)] += w;
                total += w;
            }
            row.iter_mut().for_each(|p| *p /= total);
        }
    }
    TabularMdp::new(n_states, n_actions, gamma, flat).expect("normalized rows")
}

/// Random table with entries in `[0, scale)`, a few `+∞`, zero diagonal.
pub fn random_table<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, scale: f64) -> DistanceTable {
    let mut d = DistanceTable::constant(n_states, n_actions, 0.0);
    let n = d.size();
    for x in 0..n {
        for y in 0..n {
            if x != y {
                let u = uniform01(rng);
                d.set(x, y, if u < 0.05 { f64::INFINITY } else { scale * uniform01(rng) });
            }
        }
    }
    d
}

fn random_suite_mdp(rng: &mut SimRng, k: usize) -> TabularMdp {
    let ns = rng.gen_range(2..=12);
    let na = rng.gen_range(1..=3);
    let gamma = 0.5 + 0.4 * uniform01(rng);
    random_mdp(rng, ns, na, k % 2 == 0, gamma)
}

fn operators() -> Report {
    let mut r = Report::default();
    let mut rng = seeded(11);
    let mut mono = true;
    let mut fixed = true;
    let mut closure = 0.0f64;
    for _ in 0..200 {
        let ns = rng.gen_range(1..=4);
        let na = rng.gen_range(1..=3);
        let d = random_table(&mut rng, ns, na, 5.0);
        let p = path_relaxation(&d, WaypointDomain::Joint);
        mono &= p.le(&d, 0.0);
        let q = is_quasimetric(&d, 0.0);
        fixed &= q == (p == d);
        let c = quasimetric_closure(&d, WaypointDomain::Joint);
        fixed &= is_quasimetric(&c, 1e-12) && path_relaxation(&c, WaypointDomain::Joint).sup_diff(&c) < 1e-12;
        let mut it = d.clone();
        loop {
            let next = path_relaxation(&it, WaypointDomain::Joint);
            if next == it {
                break;
            }
            it = next;
        }
        closure = closure.max(it.sup_diff(&c));
    }
    r.push("path relaxation is monotone", mono, "op_P(d) <= d on 200 random tables".into());
    r.push(
        "quasimetrics are exactly the fixed points",
        fixed,
        "is_quasimetric(d) <=> op_P(d) = d".into(),
    );
    r.push("closure equals iterated relaxation", closure < 1e-12, format!("max sup-norm gap {closure:e}"));

    let mut worst = 0.0f64;
    let mut unique = 0.0f64;
    for k in 0..12 {
        let mdp = random_suite_mdp(&mut rng, k);
        let star = d_sd_star(&mdp);
        let beta = d_sd_pi(&mdp, &TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()))
            .expect("uniform policy")
            .table;
        match tmd_fixed_point(&mdp, &beta, &FixedPointOptions::default()) {
            Ok(rep) => worst = worst.max(rep.table.sup_diff(&star)),
            Err(_) => worst = f64::INFINITY,
        }
        unique = unique.max(tmd_step(&mdp, &star, WaypointDomain::Joint).expect("shapes").sup_diff(&star));
    }
    r.push("iteration converges to d*", worst < 1e-6, format!("max sup-norm error {worst:e}"));
    r.push("d* is a fixed point", unique < 1e-9, format!("max change {unique:e}"));
    r
}

fn oracle() -> Report {
    let mut r = Report::default();
    let mut rng = seeded(12);
    let mut dominance = true;
    let mut quasi = true;
    for k in 0..20 {
        let mdp = random_suite_mdp(&mut rng, k);
        let star = d_sd_star(&mdp);
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut probs = vec![0.0; ns * na];
        for s in 0..ns {
            let w: Vec<f64> = (0..na).map(|_| 0.1 + uniform01(&mut rng)).collect();
            let z: f64 = w.iter().sum();
            for a in 0..na {
                probs[s * na + a] = w[a] / z;
            }
        }
        let pi = TabularPolicy::new(ns, na, probs).expect("normalized");
        let d_pi = d_sd_pi(&mdp, &pi).expect("valid policy").table;
        dominance &= star.le(&d_pi, 1e-7);
        quasi &= is_quasimetric(&star, 1e-7);
    }
    r.push("d^pi dominates d*", dominance, "20 random MDPs and policies".into());
    r.push("d* is a quasimetric", quasi, "20 random MDPs".into());
    r
}

/// Largest relative disagreement between central differences and an
/// analytic gradient, skipping coordinates where the loss is not smooth
/// within `eps` (one-sided slopes disagree).
pub fn gradient_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], eps: f64) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut skipped = 0;
    let f0 = f(x);
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + eps;
        let fp = f(&p);
        p[i] = x[i] - eps;
        let fm = f(&p);
        p[i] = x[i];
        let right = (fp - f0) / eps;
        let left = (f0 - fm) / eps;
        let scale = right.abs().max(left.abs()).max(1.0);
        if (right - left).abs() > 1e-3 * scale {
            skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * eps);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
        worst = worst.max(rel);
    }
    (worst, skipped)
}

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Small critic and batch for gradient checks.
pub fn gradient_fixture(seed: u64) -> (EncoderParams, Batch) {
    let mut rng = stream(seed, 0);
    let (ns, na) = (5, 3);
    let cfg = EncoderConfig {
        mrn: MrnConfig::new(3, 2).unwrap(),
        hidden: vec![6],
        layer_norm: seed % 2 == 1,
        ..EncoderConfig::default()
    };
    let mut params = EncoderParams::init(&cfg, Features::one_hot(ns, na), &mut rng);
    // a distinct target so stop-gradient mistakes are visible
    for v in &mut params.psi_target {
        *v += 0.3 * (2.0 * uniform01(&mut rng) - 1.0);
    }
    let mut batch = Batch::default();
    for _ in 0..4 {
        batch.push(rng.gen_range(0..ns), rng.gen_range(0..na), rng.gen_range(0..ns), rng.gen_range(0..ns));
    }
    (params, batch)
}

fn with_flat(params: &EncoderParams, flat: &[f64]) -> EncoderParams {
    let mut p = params.clone();
    p.set_trainable(flat);
    p
}

/// Worst relative error of one loss component over a set of draws.
pub fn check_component(cfg: &TmdConfig, component: Component, draws: u64) -> Result<(f64, usize), LossError> {
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for seed in 0..draws {
        let (params, batch) = gradient_fixture(seed);
        let (_, grad) = component_grad(&params, &batch, cfg, component)?;
        let value = |flat: &[f64]| -> f64 {
            component_grad(&with_flat(&params, flat), &batch, cfg, component)
                .map(|(v, _)| v)
                .unwrap_or(f64::NAN)
        };
        let (e, s) = gradient_error(&value, &params.trainable(), &grad.flat(), FD_EPS);
        worst = worst.max(e);
        skipped += s;
    }
    Ok((worst, skipped))
}

/// Finite-difference change of the Bellman penalty under perturbations of
/// `ψ` (must be zero), of `ψ̄` (must not be), and the analytic `ψ` gradient.
pub fn stop_gradient_contract(cfg: &TmdConfig, draws: u64) -> Result<(f64, f64, f64), LossError> {
    let mut psi_effect = 0.0f64;
    let mut target_effect = 0.0f64;
    let mut analytic = 0.0f64;
    for seed in 0..draws {
        let (params, batch) = gradient_fixture(seed);
        let (v0, grad) = component_grad(&params, &batch, cfg, Component::Backup)?;
        analytic = analytic.max(grad.psi.iter().fold(0.0f64, |m, g| m.max(g.abs())));
        for i in 0..params.psi.len() {
            let mut p = params.clone();
            p.psi[i] += 1e-3;
            psi_effect = psi_effect.max((component_grad(&p, &batch, cfg, Component::Backup)?.0 - v0).abs());
            let mut q = params.clone();
            q.psi_target[i] += 1e-3;
            target_effect = target_effect.max((component_grad(&q, &batch, cfg, Component::Backup)?.0 - v0).abs());
        }
    }
    Ok((psi_effect, target_effect, analytic))
}

pub fn check_policy_gradient(draws: u64) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for seed in 0..draws {
        let (params, batch) = gradient_fixture(seed);
        let mut rng = stream(seed, 1);
        let pi = PolicyParams::init(&params.features, &[6], &mut rng);
        let cfg = TmdConfig {
            lambda: uniform01(&mut rng),
            alpha: uniform01(&mut rng),
            gamma: 0.9,
            ..TmdConfig::default()
        };
        let (_, grad) = loss_policy_grad(&pi, &params, &batch, &cfg);
        let value = |flat: &[f64]| {
            let mut p = pi.clone();
            p.params.copy_from_slice(flat);
            loss_policy(&p, &params, &batch, &cfg)
        };
        let (e, s) = gradient_error(&value, &pi.params, &grad, FD_EPS);
        worst = worst.max(e);
        skipped += s;
    }
    (worst, skipped)
}

fn gradients() -> Report {
    let mut r = Report::default();
    let base = TmdConfig {
        gamma: 0.9,
        w_diag: 0.3,
        ..TmdConfig::default()
    };
    let cases: Vec<(&str, TmdConfig, Component)> = vec![
        ("nce", base.clone(), Component::Nce),
        ("action invariance", base.clone(), Component::ActionInvariance),
        ("bellman invariance", base.clone(), Component::Backup),
        (
            "bellman invariance, live source goal",
            TmdConfig {
                live_source_goal: true,
                ..base.clone()
            },
            Component::Backup,
        ),
        (
            "bellman invariance, no stop-gradient",
            TmdConfig {
                stop_gradient: false,
                ..base.clone()
            },
            Component::Backup,
        ),
        (
            "bellman invariance, l2",
            TmdConfig {
                divergence: Divergence::L2,
                ..base.clone()
            },
            Component::Backup,
        ),
        (
            "bellman invariance, bce",
            TmdConfig {
                divergence: Divergence::Bce,
                ..base.clone()
            },
            Component::Backup,
        ),
        ("total", base.clone(), Component::Total),
    ];
    for (name, cfg, comp) in cases {
        match check_component(&cfg, comp, 25) {
            Ok((e, skipped)) => r.push(
                &format!("gradient: {name}"),
                e < FD_REL_TOL,
                format!("max rel error {e:.2e} ({skipped} kinked coordinates skipped)"),
            ),
            Err(e) => r.push(&format!("gradient: {name}"), false, e.to_string()),
        }
    }
    let (e, skipped) = check_policy_gradient(25);
    r.push(
        "gradient: policy",
        e < FD_REL_TOL,
        format!("max rel error {e:.2e} ({skipped} kinked coordinates skipped)"),
    );
    match stop_gradient_contract(&base, 10) {
        Ok((psi, target, analytic)) => r.push(
            "stop-gradient contract",
            psi == 0.0 && analytic == 0.0 && target > 0.0,
            format!("|Δ loss_t| under ψ: {psi:e}, under ψ̄: {target:.2e}, max |∂/∂ψ| {analytic:e}"),
        ),
        Err(e) => r.push("stop-gradient contract", false, e.to_string()),
    }
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let (params, batch) = gradient_fixture(seed);
        let qr = RegressionConfig::default();
        let (_, grad) = regression_loss_grad(&params, &batch, 0.9, &qr).expect("finite");
        let value = |flat: &[f64]| {
            regression_loss_grad(&with_flat(&params, flat), &batch, 0.9, &qr)
                .map(|(b, _)| b.total)
                .unwrap_or(f64::NAN)
        };
        worst = worst.max(gradient_error(&value, &params.trainable(), &grad.flat(), FD_EPS).0);
    }
    r.push("gradient: quasimetric regression", worst < FD_REL_TOL, format!("max rel error {worst:.2e}"));
    r
}

/// Minimizes `mean_k D_T(d, t_k)` over `d` by Newton's method.
pub fn minimize_mean_bregman(targets: &[f64]) -> f64 {
    let n = targets.len() as f64;
    let mut d = targets.iter().sum::<f64>() / n;
    for _ in 0..100 {
        let e: f64 = targets.iter().map(|t| (d - t).exp()).sum::<f64>() / n;
        // derivative e - 1, second derivative e
        let step = (e - 1.0) / e;
        d -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    d
}

fn divergence() -> Report {
    let mut r = Report::default();
    let mut rng = seeded(14);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(1..=20);
        let targets: Vec<f64> = (0..k).map(|_| 5.0 * uniform01(&mut rng)).collect();
        let d = minimize_mean_bregman(&targets);
        let want = -(targets.iter().map(|t| (-t).exp()).sum::<f64>() / k as f64).ln();
        worst = worst.max((d - want).abs());
    }
    r.push(
        "bregman minimizer",
        worst < 1e-4,
        format!("max |argmin - (-log mean e^-t)| = {worst:.2e}"),
    );
    let grid_min = (0..=40000)
        .map(|i| i as f64 * 1e-4)
        .min_by(|a, b| {
            let f = |d: f64| 0.5 * (bregman_dt(d, 1.0) + bregman_dt(d, 3.0));
            f(*a).partial_cmp(&f(*b)).unwrap()
        })
        .unwrap();
    let want = -((-1f64).exp() / 2.0 + (-3f64).exp() / 2.0).ln();
    r.push(
        "bregman two-point example",
        (grid_min - want).abs() < 2e-4,
        format!("grid argmin {grid_min:.4}, expected {want:.4}"),
    );
    r
}

fn end_to_end() -> Report {
    let mut r = Report::default();
    let cfg = RunConfig::from_json(
        r#"{"env":{"preset":"corridor"},
            "tmd":{"zeta":0.1,"gamma":0.9,"lr":1e-3,"batch_size":32,"reduction":"mean"},
            "train":{"steps":600},
            "eval":{"episodes":10}}"#,
    )
    .expect("valid config");
    let run = || -> Result<(f64, Vec<String>), crate::train::TrainError> {
        let mut t = Trainer::new(cfg.clone())?;
        t.run(None)?;
        Ok((t.evaluate()?.aggregate, t.metrics.iter().map(|m| m.csv()).collect()))
    };
    match (run(), run()) {
        (Ok((rate, m1)), Ok((_, m2))) => {
            r.push("corridor training succeeds", rate == 1.0, format!("success rate {rate}"));
            r.push("training is deterministic", m1 == m2, format!("{} metric rows compared", m1.len()));
        }
        (Err(e), _) | (_, Err(e)) => r.push("corridor training", false, e.to_string()),
    }
    r
}
