//! Offline training loop, run configs, checkpoints, metrics and ablations.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{regression_loss_grad, RegressionConfig};
use crate::critic::{EncoderConfig, EncoderParams, FeatureKind, Features};
use crate::env::{generate_dataset, sample_batch, Cell, Dataset, DatasetSpec, EnvError, GoalOffset, Gridworld};
use crate::loss::{loss_tmd_grad, LossBreakdown, LossError, TmdConfig};
use crate::optim::Adam;
use crate::policy::{critic_policy, evaluate, loss_policy_grad, EvalReport, EvalTask, PolicyParams};
use crate::presets::{preset, EnvConfig, Preset};
use crate::rng::{derive_seed, stream};

const MAGIC: &[u8; 8] = b"TMDCKPT1";
const TAG_INIT: u64 = 1;
const TAG_BATCH: u64 = 2;
const TAG_EVAL: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("unknown environment preset {0:?}")]
    UnknownPreset(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("step {step}: {source}")]
    Loss { step: u64, source: LossError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// JSON-lines dataset; must exist when given.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Generator used when no path is given (and by `gen-data`).
    #[serde(default)]
    pub spec: Option<DatasetSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "default_policy_hidden")]
    pub hidden: Vec<usize>,
    /// Train the policy head alongside the critic.
    #[serde(default)]
    pub train: bool,
}

fn default_policy_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: default_policy_hidden(),
            train: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// `ψ̄ := ψ` every this many steps.
    #[serde(default = "one")]
    pub target_every: u64,
    #[serde(default = "one")]
    pub log_every: u64,
    /// Zero disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub goal_offset: GoalOffset,
}

fn one() -> u64 {
    1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Greedy in the learned critic.
    #[default]
    Critic,
    /// Greedy decoding of the trained policy head.
    Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub mode: EvalMode,
    /// Overrides the preset's tasks.
    #[serde(default)]
    pub tasks: Option<Vec<(Cell, Cell)>>,
    #[serde(default)]
    pub horizon: Option<usize>,
}

fn default_episodes() -> usize {
    100
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: default_episodes(),
            mode: EvalMode::Critic,
            tasks: None,
            horizon: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Tmd,
    QuasimetricRegression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub tmd: TmdConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub regression: RegressionConfig,
    /// Seeds used by `ablate`.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.tmd.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    fn preset(&self) -> Result<Option<Preset>, TrainError> {
        match &self.env {
            EnvConfig::Preset { preset: name } => preset(name)
                .map(Some)
                .ok_or_else(|| TrainError::UnknownPreset(name.clone())),
            EnvConfig::Grid { .. } => Ok(None),
        }
    }

    pub fn world(&self) -> Result<Gridworld, TrainError> {
        let mut grid = match (&self.env, self.preset()?) {
            (_, Some(p)) => p.grid,
            (EnvConfig::Grid { grid }, None) => grid.clone(),
            _ => unreachable!(),
        };
        grid.gamma = self.tmd.gamma;
        Ok(crate::env::build_gridworld(&grid)?)
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec, TrainError> {
        if let Some(spec) = &self.dataset.spec {
            return Ok(spec.clone());
        }
        self.preset()?
            .map(|p| p.dataset)
            .ok_or_else(|| TrainError::Config("no dataset spec and no preset default".into()))
    }

    /// Loads the dataset file, or generates one from `dataset.spec` when no path is set.
    pub fn dataset(&self, world: &Gridworld) -> Result<Dataset, TrainError> {
        let data = match &self.dataset.path {
            Some(path) => {
                let file = fs::File::open(path).map_err(io_err(path))?;
                Dataset::read_jsonl(BufReader::new(file))?
            }
            None => generate_dataset(world, &self.dataset_spec()?)?,
        };
        data.check_consistent(&world.mdp)?;
        Ok(data)
    }

    pub fn eval_tasks(&self, world: &Gridworld) -> Result<Vec<EvalTask>, TrainError> {
        let preset = self.preset()?;
        let tasks = match (&self.eval.tasks, &preset) {
            (Some(t), _) => t.clone(),
            (None, Some(p)) => p.tasks.clone(),
            (None, None) => return Err(TrainError::Config("no evaluation tasks".into())),
        };
        let horizon = self
            .eval
            .horizon
            .or(preset.as_ref().map(|p| p.horizon))
            .ok_or_else(|| TrainError::Config("no evaluation horizon".into()))?;
        tasks
            .iter()
            .map(|&(s, g)| {
                let cell = |c: Cell| {
                    world
                        .state_at(c)
                        .ok_or_else(|| TrainError::Config(format!("task cell {c:?} is not free")))
                };
                Ok(EvalTask {
                    start: cell(s)?,
                    goal: cell(g)?,
                    horizon,
                    episodes: self.eval.episodes,
                })
            })
            .collect()
    }
}

/// One logged row of `step,nce,l_i,l_t,total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: LossBreakdown,
}

impl MetricRow {
    pub const HEADER: &'static str = "step,nce,l_i,l_t,total";

    pub fn csv(&self) -> String {
        let l = self.loss;
        format!("{},{},{},{},{}", self.step, l.nce, l.l_i, l.l_t, l.total)
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub world: Gridworld,
    pub dataset: Dataset,
    pub params: EncoderParams,
    pub policy: PolicyParams,
    pub critic_opt: Adam,
    pub policy_opt: Adam,
    pub step: u64,
    pub metrics: Vec<MetricRow>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self, TrainError> {
        let world = cfg.world()?;
        let dataset = cfg.dataset(&world)?;
        Self::with_data(cfg, world, dataset)
    }

    pub fn with_data(cfg: RunConfig, world: Gridworld, dataset: Dataset) -> Result<Self, TrainError> {
        cfg.tmd.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let na = world.mdp.n_actions();
        let features = match cfg.encoder.features {
            FeatureKind::OneHot => Features::one_hot(world.n_states(), na),
            FeatureKind::Coords => Features::coords(&world.normalized_coords(), na),
        };
        let mut rng = stream(derive_seed(cfg.train.seed, TAG_INIT), 0);
        let params = EncoderParams::init(&cfg.encoder, features, &mut rng);
        let policy = PolicyParams::init(&params.features, &cfg.policy.hidden, &mut rng);
        let critic_opt = Adam::new(params.n_trainable(), cfg.tmd.lr);
        let policy_opt = Adam::new(policy.params.len(), cfg.tmd.lr);
        Ok(Self {
            cfg,
            world,
            dataset,
            params,
            policy,
            critic_opt,
            policy_opt,
            step: 0,
            metrics: Vec::new(),
        })
    }

    /// One iteration: refresh `ψ̄` on schedule, draw this step's batch,
    /// descend the critic loss, then the policy loss.
    pub fn step_once(&mut self) -> Result<LossBreakdown, TrainError> {
        let step = self.step;
        let tc = &self.cfg.train;
        if step % tc.target_every.max(1) == 0 {
            self.params.snapshot_target();
        }
        let mut rng = stream(derive_seed(tc.seed, TAG_BATCH), step);
        let batch = sample_batch(&self.dataset, self.cfg.tmd.batch_size, self.cfg.tmd.gamma, tc.goal_offset, &mut rng)?;
        let wrap = |source| TrainError::Loss { step, source };
        let (loss, grad) = match self.cfg.method {
            Method::Tmd => loss_tmd_grad(&self.params, &batch, &self.cfg.tmd).map_err(wrap)?,
            Method::QuasimetricRegression => {
                let (b, g) = regression_loss_grad(&self.params, &batch, self.cfg.tmd.gamma, &self.cfg.regression)
                    .map_err(wrap)?;
                let loss = LossBreakdown {
                    nce: b.spread,
                    l_i: b.action,
                    l_t: b.local,
                    total: b.total,
                };
                (loss, g)
            }
        };
        if !loss.total.is_finite() {
            return Err(wrap(LossError::Nn(crate::nn::NnError::NonFinite(loss.total))));
        }
        let mut flat = self.params.trainable();
        self.critic_opt.update(&mut flat, &grad.flat());
        self.params.set_trainable(&flat);
        if self.cfg.policy.train {
            let (_, g) = loss_policy_grad(&self.policy, &self.params, &batch, &self.cfg.tmd);
            self.policy_opt.update(&mut self.policy.params, &g);
        }
        self.step += 1;
        if step % self.cfg.train.log_every.max(1) == 0 {
            self.metrics.push(MetricRow { step, loss });
        }
        Ok(loss)
    }

    /// Trains until `self.step == steps`, writing checkpoints into `out` on
    /// the configured schedule.
    pub fn run(&mut self, out: Option<&Path>) -> Result<(), TrainError> {
        while self.step < self.cfg.train.steps {
            self.step_once()?;
            let every = self.cfg.train.checkpoint_every;
            if let Some(dir) = out {
                if every > 0 && self.step % every == 0 {
                    self.save(&dir.join(format!("step-{}.ckpt", self.step)))?;
                }
            }
        }
        Ok(())
    }

    pub fn evaluate(&self) -> Result<EvalReport, TrainError> {
        let tasks = self.cfg.eval_tasks(&self.world)?;
        let seed = derive_seed(self.cfg.train.seed, TAG_EVAL);
        Ok(match self.cfg.eval.mode {
            EvalMode::Critic => evaluate(&self.world.mdp, &critic_policy(&self.params), &tasks, seed),
            EvalMode::Policy => evaluate(&self.world.mdp, &self.policy.greedy_table(&self.params.features), &tasks, seed),
        })
    }

    pub fn write_metrics(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
        writeln!(out, "{}", MetricRow::HEADER).map_err(io_err(path))?;
        for row in &self.metrics {
            writeln!(out, "{}", row.csv()).map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }

    /// Binary parameters and optimizer state, plus a JSON sidecar
    /// `{config, seed, step}` at `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.step.to_le_bytes());
        for v in [&self.params.psi, &self.params.phi, &self.params.psi_target, &self.policy.params] {
            put_vec(&mut buf, v);
        }
        for opt in [&self.critic_opt, &self.policy_opt] {
            buf.extend_from_slice(&opt.step.to_le_bytes());
            put_vec(&mut buf, &opt.m);
            put_vec(&mut buf, &opt.v);
        }
        fs::write(path, &buf).map_err(io_err(path))?;
        let side = serde_json::json!({
            "config": self.cfg,
            "seed": self.cfg.train.seed,
            "step": self.step,
        });
        let side_path = sidecar(path);
        fs::write(&side_path, serde_json::to_string_pretty(&side)?).map_err(io_err(&side_path))
    }

    /// Restores parameters, optimizer state and step from a checkpoint
    /// written by a trainer with the same config.
    pub fn load_state(&mut self, path: &Path) -> Result<(), TrainError> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        let mut r = Cursor { bytes: &bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let step = r.u64()?;
        let shapes = [
            self.params.psi.len(),
            self.params.phi.len(),
            self.params.psi_target.len(),
            self.policy.params.len(),
        ];
        let mut vecs = Vec::new();
        for n in shapes {
            vecs.push(r.vec(n)?);
        }
        let mut opts = Vec::new();
        for n in [self.params.n_trainable(), self.policy.params.len()] {
            let t = r.u64()?;
            opts.push((t, r.vec(n)?, r.vec(n)?));
        }
        if r.at != bytes.len() {
            return Err(TrainError::Checkpoint("trailing bytes".into()));
        }
        let mut vecs = vecs.into_iter();
        self.params.psi = vecs.next().unwrap();
        self.params.phi = vecs.next().unwrap();
        self.params.psi_target = vecs.next().unwrap();
        self.policy.params = vecs.next().unwrap();
        for (opt, (t, m, v)) in [&mut self.critic_opt, &mut self.policy_opt].into_iter().zip(opts) {
            opt.step = t;
            opt.m = m;
            opt.v = v;
        }
        self.step = step;
        Ok(())
    }
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn put_vec(buf: &mut Vec<u8>, v: &[f64]) {
    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], TrainError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec(&mut self, expect: usize) -> Result<Vec<f64>, TrainError> {
        let n = self.u64()? as usize;
        if n != expect {
            return Err(TrainError::Checkpoint(format!("expected {expect} values, found {n}")));
        }
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Loss-ablation variants, in reporting order.
pub const VARIANTS: [&str; 5] = ["full", "no-stop-gradient", "no-nce", "no-i", "no-t"];

pub fn variant_config(base: &RunConfig, variant: &str) -> Option<RunConfig> {
    let mut cfg = base.clone();
    cfg.method = Method::Tmd;
    let t = &mut cfg.tmd;
    match variant {
        "full" => {}
        "no-stop-gradient" => t.stop_gradient = false,
        "no-nce" => t.use_nce = false,
        "no-i" => t.use_i = false,
        "no-t" => t.use_t = false,
        _ => return None,
    }
    Some(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean: f64,
    pub stderr: f64,
    pub rates: Vec<f64>,
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Trains `cfg` with the given seed and returns its aggregate success rate.
pub fn train_and_evaluate(cfg: &RunConfig, seed: u64, world: &Gridworld, data: &Dataset) -> Result<f64, TrainError> {
    let mut c = cfg.clone();
    c.train.seed = seed;
    let mut t = Trainer::with_data(c, world.clone(), data.clone())?;
    t.run(None)?;
    Ok(t.evaluate()?.aggregate)
}

/// Trains every variant on every seed of `cfg.seeds`.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>, TrainError> {
    if cfg.seeds.is_empty() {
        return Err(TrainError::Config("ablate needs a non-empty seed list".into()));
    }
    let world = cfg.world()?;
    let data = cfg.dataset(&world)?;
    let mut rows = Vec::new();
    for v in VARIANTS {
        let vc = variant_config(cfg, v).expect("known variant");
        let rates = cfg
            .seeds
            .iter()
            .map(|&s| train_and_evaluate(&vc, s, &world, &data))
            .collect::<Result<Vec<_>, _>>()?;
        let (mean, stderr) = mean_stderr(&rates);
        rows.push(AblationRow {
            variant: v.to_string(),
            mean,
            stderr,
            rates,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,mean_success,stderr,n_seeds\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.variant, r.mean, r.stderr, r.rates.len()));
    }
    s
}
