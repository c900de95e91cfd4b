//! Training, evaluation, gradient checks and ablations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{self, write_atomic, Checkpoint, GradReport, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{self, Point};
use crate::kernels::{self, EfeParams, KernelConfig, LevelState, PsaParams, PskParams, RpskParams};
use crate::metrics::{self, MetricReport};
use crate::mvpgen::{CompletionSample, Split, RESOLUTION_MULTIPLES};
use crate::networks::{self, LossComponents, LossWeights, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub decay_interval: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            decay_factor: 0.7,
            decay_interval: 40,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    /// `lr * decay_factor ^ floor(epoch / decay_interval)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay factor must lie in (0, 1]"));
        }
        if self.decay_interval == 0 || self.batch_size == 0 {
            return Err(Error::config("decay interval and batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::config("Adam moments must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: Option<PathBuf>,
    pub results: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub seed: u64,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0: no limit).
    pub max_steps: usize,
    /// Validate every this many epochs (0: never).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig::default(),
            seed: 0,
            epochs: 100,
            max_steps: 0,
            eval_every: 0,
        }
    }
}

impl RunConfig {
    /// Small-shape overfitting preset: toy model, per-sample steps at lr 1e-3, no decay.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            optimizer: OptimizerConfig {
                lr: 1e-3,
                decay_factor: 1.0,
                batch_size: 1,
                ..OptimizerConfig::default()
            },
            epochs: 1_000_000,
            max_steps: 2000,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

/// Adaptive-moment optimizer state, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |(n, t): (&str, &Tensor)| (n.to_string(), vec![0.0; t.len()]);
        Self {
            t: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    /// One update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &OptimizerConfig, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, t) in store.iter_mut() {
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            let (m, v) = match (self.m.get_mut(name), self.v.get_mut(name)) {
                (Some(m), Some(v)) if m.len() == g.len() => (m, v),
                _ => return Err(Error::contract(format!("optimizer state lacks `{name}`"))),
            };
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub lambda_kl: f64,
    /// Batch means.
    pub loss: LossComponents,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub validation: Option<MetricReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Seconds since the start of each epoch's run, kept apart from the
    /// deterministic records.
    pub wall_clock: Vec<f64>,
}

/// A training pair: partial scan and complete target at the output
/// resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub partial: Vec<Point>,
    pub complete: Vec<Point>,
    pub category: String,
}

/// Pairs of one split whose targets match `out_n`.
pub fn pairs_from(samples: &[CompletionSample], split: Option<Split>, out_n: usize) -> Result<Vec<Pair>> {
    samples
        .iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .map(|s| {
            let gt = s
                .complete
                .iter()
                .find(|c| c.len() == out_n)
                .ok_or_else(|| Error::Config(format!("dataset has no {out_n}-point ground truth")))?;
            Ok(Pair {
                partial: s.partial.points().to_vec(),
                complete: gt.points().to_vec(),
                category: s.category.clone(),
            })
        })
        .collect()
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [a, b] {
        h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub params: ParamStore,
    pub adam: Adam,
    pub step: usize,
    pub epoch: usize,
    pub log: TrainLog,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.json";

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let params = networks::init_params(&cfg.model, cfg.seed)?;
        let adam = Adam::new(&params);
        Ok(Self {
            cfg,
            params,
            adam,
            step: 0,
            epoch: 0,
            log: TrainLog::default(),
        })
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.optimizer.batch_size.min(n.max(1)))
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let all = self.cfg.epochs * self.batches_per_epoch(n);
        if self.cfg.max_steps > 0 {
            all.min(self.cfg.max_steps)
        } else {
            all
        }
    }

    fn done(&self, n: usize) -> bool {
        self.epoch >= self.cfg.epochs || (self.cfg.max_steps > 0 && self.step >= self.cfg.max_steps) || n == 0
    }

    /// Trains one epoch, stopping early at `max_steps`.
    pub fn run_epoch(&mut self, data: &[Pair]) -> Result<()> {
        let n = data.len();
        if n == 0 {
            return Err(Error::config("no training pairs"));
        }
        let cfg = &self.cfg;
        let batch = cfg.optimizer.batch_size.min(n);
        let total = self.total_steps(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, self.epoch as u64)));
        let lr = cfg.optimizer.lr_at(self.epoch);
        for chunk in order.chunks(batch) {
            if self.cfg.max_steps > 0 && self.step >= self.cfg.max_steps {
                break;
            }
            let lambda_kl = self.cfg.loss.kl_at(self.step, total);
            self.params.zero_grads();
            let mut mean = LossComponents::default();
            let scale = 1.0 / chunk.len() as f64;
            for (slot, &i) in chunk.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, 2 + self.step as u64, slot as u64));
                let mut tape = Tape::new();
                let p = &data[i];
                let j = networks::joint_loss(
                    &mut tape,
                    &self.params,
                    &self.cfg.model,
                    &self.cfg.loss,
                    lambda_kl,
                    &p.partial,
                    &p.complete,
                    &mut rng,
                )?;
                tape.check_finite()?;
                let scaled = tape.scale(j.total, scale);
                tape.backward(scaled)?.accumulate_into(&mut self.params)?;
                let c = j.components(&tape);
                mean.rec += c.rec * scale;
                mean.com += c.com * scale;
                mean.fine += c.fine * scale;
                mean.kl_rec += c.kl_rec * scale;
                mean.kl_com += c.kl_com * scale;
                mean.total += c.total * scale;
            }
            if !mean.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {}", self.step)));
            }
            self.adam.step(&mut self.params, &self.cfg.optimizer, lr)?;
            if self.params.iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::Numeric(format!("non-finite parameters after step {}", self.step)));
            }
            self.log.steps.push(StepRecord {
                step: self.step,
                epoch: self.epoch,
                lr,
                lambda_kl,
                loss: mean,
            });
            self.step += 1;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains to completion, validating and checkpointing at epoch
    /// boundaries when `out` is given.
    pub fn fit(&mut self, data: &[Pair], val: &[Pair], out: Option<&Path>) -> Result<()> {
        let start = Instant::now();
        while !self.done(data.len()) {
            self.run_epoch(data)?;
            let validation = if self.cfg.eval_every > 0 && self.epoch.is_multiple_of(self.cfg.eval_every) && !val.is_empty() {
                Some(evaluate_pairs(&self.params, &self.cfg.model, val, self.cfg.model.out_n, self.cfg.seed)?)
            } else {
                None
            };
            self.log.epochs.push(EpochRecord {
                epoch: self.epoch - 1,
                validation,
            });
            self.log.wall_clock.push(start.elapsed().as_secs_f64());
            if let Some(dir) = out {
                self.save(dir)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (name, t) in self.params.iter() {
            let mut t = t.clone();
            t.clear_grad();
            tensors.insert(format!("param/{name}"), t);
        }
        for (prefix, state) in [("adam_m", &self.adam.m), ("adam_v", &self.adam.v)] {
            for (name, v) in state {
                tensors.insert(format!("{prefix}/{name}"), Tensor::vector(v.clone()));
            }
        }
        let meta = serde_json::json!({
            "step": self.step,
            "epoch": self.epoch,
            "adam_t": self.adam.t,
            "config": self.cfg,
        });
        Checkpoint::new(tensors, meta)
    }

    /// Writes the checkpoint and the log into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        let log = serde_json::to_string_pretty(&self.log).map_err(|e| Error::Manifest(e.to_string()))?;
        write_atomic(&dir.join(LOG_FILE), log.as_bytes())
    }

    pub fn from_checkpoint(ck: &Checkpoint, log: TrainLog) -> Result<Self> {
        let meta = &ck.meta;
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::Manifest(format!("checkpoint meta lacks `{k}`")));
        let cfg: RunConfig =
            serde_json::from_value(field("config")?.clone()).map_err(|e| Error::Manifest(e.to_string()))?;
        let as_u64 = |k: &str| -> Result<u64> {
            field(k)?.as_u64().ok_or_else(|| Error::Manifest(format!("checkpoint `{k}` is not an integer")))
        };
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in &ck.tensors {
            if let Some(n) = name.strip_prefix("param/") {
                params.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("adam_m/") {
                m.insert(n.to_string(), t.data().to_vec());
            } else if let Some(n) = name.strip_prefix("adam_v/") {
                v.insert(n.to_string(), t.data().to_vec());
            }
        }
        let params = ParamStore::from_entries(cfg.seed, params);
        let expected = networks::init_params(&cfg.model, cfg.seed)?;
        if !expected.names().eq(params.names()) {
            return Err(Error::Manifest("checkpoint parameters do not match its model config".into()));
        }
        Ok(Self {
            adam: Adam {
                t: as_u64("adam_t")?,
                m,
                v,
            },
            params,
            step: as_u64("step")? as usize,
            epoch: as_u64("epoch")? as usize,
            log,
            cfg,
        })
    }

    /// Restores the state written by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        let log_path = dir.join(LOG_FILE);
        let log = match std::fs::read_to_string(&log_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?,
            Err(_) => TrainLog::default(),
        };
        Self::from_checkpoint(&ck, log)
    }
}

/// Loads parameters and model configuration from a checkpoint file or a
/// results directory holding one.
pub fn load_model(path: &Path) -> Result<(ParamStore, RunConfig)> {
    let ck = if path.is_dir() {
        Checkpoint::load(&path.join(CHECKPOINT_FILE))?
    } else {
        Checkpoint::load(path)?
    };
    let t = Trainer::from_checkpoint(&ck, TrainLog::default())?;
    Ok((t.params, t.cfg))
}

/// Completes every partial and scores it against its target. Sample `i`
/// draws its latent from a stream seeded by `(seed, i)`.
pub fn evaluate_pairs(params: &ParamStore, cfg: &ModelConfig, pairs: &[Pair], out_n: usize, seed: u64) -> Result<MetricReport> {
    let preds = predict(params, cfg, pairs.iter().map(|p| p.partial.as_slice()), out_n, seed)?;
    metrics::evaluate_pairs(
        preds.iter().zip(pairs).map(|(f, p)| (f.as_slice(), p.complete.as_slice(), p.category.as_str())),
        metrics::FSCORE_TAU,
    )
}

/// Fine completions for each partial.
pub fn predict<'a>(
    params: &ParamStore,
    cfg: &ModelConfig,
    partials: impl Iterator<Item = &'a [Point]>,
    out_n: usize,
    seed: u64,
) -> Result<Vec<Vec<Point>>> {
    partials
        .enumerate()
        .map(|(i, x)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX, i as u64));
            Ok(networks::infer(params, cfg, x, out_n, &mut rng)?.1)
        })
        .collect()
}

/// Per-resolution evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionReport {
    pub points: usize,
    pub report: Option<MetricReport>,
    /// Why the resolution was skipped.
    pub unavailable: Option<String>,
}

/// Scores `samples` at each requested output resolution (in points).
/// With `params` absent, the ground truth is scored against itself.
pub fn cmd_eval(
    model: Option<(&ParamStore, &ModelConfig)>,
    samples: &[CompletionSample],
    resolutions: &[usize],
    seed: u64,
) -> Result<Vec<ResolutionReport>> {
    let base = samples.first().map_or(0, CompletionSample::base_n);
    let mut out = Vec::new();
    for &res in resolutions {
        let multiple = RESOLUTION_MULTIPLES.iter().copied().find(|m| m * base == res);
        let Some(multiple) = multiple else {
            out.push(ResolutionReport {
                points: res,
                report: None,
                unavailable: Some(format!("no {res}-point ground truth in the dataset")),
            });
            continue;
        };
        let preds: Vec<Vec<Point>> = match model {
            None => samples
                .iter()
                .map(|s| s.complete_at(multiple).expect("resolution present").points().to_vec())
                .collect(),
            Some((params, cfg)) => {
                let cap = cfg.renet_input_n() * cfg.expansion_factor();
                if res > cap {
                    out.push(ResolutionReport {
                        points: res,
                        report: None,
                        unavailable: Some(format!("model expands to at most {cap} points")),
                    });
                    continue;
                }
                predict(params, cfg, samples.iter().map(|s| s.partial.points()), res, seed)?
            }
        };
        let clouds = preds
            .into_iter()
            .map(|p| geometry::PointCloud::new(p, geometry::Role::Fine))
            .collect::<Result<Vec<_>>>()?;
        out.push(ResolutionReport {
            points: res,
            report: Some(metrics::evaluate_dataset(&clouds, samples, multiple)?),
            unavailable: None,
        });
    }
    Ok(out)
}

/// Paper-style CD x 1e4 and F-score tables, one row per resolution.
pub fn format_eval(reports: &[ResolutionReport]) -> String {
    let mut s = String::new();
    let rows: Vec<(String, &MetricReport)> = reports
        .iter()
        .filter_map(|r| r.report.as_ref().map(|m| (format!("{} pts", r.points), m)))
        .collect();
    let named: Vec<(&str, &MetricReport)> = rows.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    let (cd, f1) = metrics::format_tables(&named);
    s.push_str("# CD x 1e4\n");
    s.push_str(&cd);
    s.push_str("# F-Score@1%\n");
    s.push_str(&f1);
    for r in reports {
        if let Some(why) = &r.unavailable {
            s.push_str(&format!("# {} pts unavailable: {why}\n", r.points));
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradScope {
    Primitives,
    Kernels,
    Losses,
    End2end,
}

impl std::str::FromStr for GradScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(Self::Primitives),
            "kernels" => Ok(Self::Kernels),
            "losses" => Ok(Self::Losses),
            "end2end" => Ok(Self::End2end),
            _ => Err(Error::config(format!("unknown gradcheck scope `{s}`"))),
        }
    }
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter or input and coordinate of the largest error.
    pub worst: String,
    pub seconds: f64,
    pub passed: bool,
}

/// Inputs with magnitudes in `[0.5, 1.5]` and random sign.
fn away(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
        .collect()
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

/// Loss readout `sum(y * r)` with a small fixed `r`, so that structurally
/// zero derivatives stay under the absolute error floor.
fn readout(tape: &mut Tape, y: diff::Var, r: &Tensor) -> Result<diff::Var> {
    let rv = tape.input(r.clone());
    let m = tape.mul(y, rv)?;
    Ok(tape.sum(m))
}

fn row(name: &str, started: Instant, rep: Result<GradReport>) -> Result<GradRow> {
    let rep = rep?;
    Ok(GradRow {
        name: name.to_string(),
        max_rel_error: rep.max_rel_error,
        checked: rep.checked,
        worst: rep.worst.as_ref().map_or_else(String::new, |(n, c)| format!("{n}[{c}]")),
        seconds: started.elapsed().as_secs_f64(),
        passed: rep.max_rel_error < GRAD_TOLERANCE,
    })
}

/// Model used by the end-to-end check: 32-point partial, 32 coarse points,
/// 64-point target.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        d_z: 4,
        encoder_widths: vec![8, 16],
        decoder_widths: vec![16],
        coarse_n: 32,
        partial_n: 32,
        out_n: 64,
        renet_widths: vec![4, 6, 8],
        kernels: KernelConfig {
            k_a: 4,
            k_b: 8,
            ..KernelConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Runs one finite-difference suite.
pub fn cmd_gradcheck(scope: GradScope, seed: u64) -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut rows = Vec::new();
    match scope {
        GradScope::Primitives => {
            let (x, w, b) = (away(&mut rng, 17, 8), away(&mut rng, 8, 5), away(&mut rng, 1, 5));
            let r = away(&mut rng, 17, 5);
            let t0 = Instant::now();
            rows.push(row(
                "linear",
                t0,
                diff::grad_check(
                    |t, v| {
                        let b = t.reshape(v[2], vec![5])?;
                        let y = t.linear(v[0], v[1], Some(b))?;
                        readout(t, y, &r)
                    },
                    &[x.clone(), w, b],
                    eps,
                ),
            )?);
            for (name, act) in [("relu", diff::Activation::Relu), ("identity", diff::Activation::None)] {
                let t0 = Instant::now();
                let r = away(&mut rng, 17, 8);
                rows.push(row(
                    name,
                    t0,
                    diff::grad_check(
                        |t, v| {
                            let y = t.activate(v[0], act);
                            readout(t, y, &r)
                        },
                        std::slice::from_ref(&x),
                        eps,
                    ),
                )?);
            }
            let (la, lb, r) = (away(&mut rng, 1, 8), away(&mut rng, 1, 8), away(&mut rng, 1, 8));
            let r2 = away(&mut rng, 1, 8);
            let t0 = Instant::now();
            rows.push(row(
                "softmax_pair",
                t0,
                diff::grad_check(
                    |t, v| {
                        let (a, b) = t.softmax_pair(v[0], v[1])?;
                        let ya = readout(t, a, &r)?;
                        let yb = readout(t, b, &r2)?;
                        t.add(ya, yb)
                    },
                    &[la, lb],
                    eps,
                ),
            )?);
            for (name, kind) in [("mean", diff::Reduction::Mean), ("max", diff::Reduction::Max)] {
                let r = away(&mut rng, 1, 8);
                let t0 = Instant::now();
                rows.push(row(
                    name,
                    t0,
                    diff::grad_check(
                        |t, v| {
                            let y = t.reduce(v[0], kind)?;
                            let y = t.reshape(y, vec![1, 8])?;
                            readout(t, y, &r)
                        },
                        std::slice::from_ref(&x),
                        eps,
                    ),
                )?);
            }
        }
        GradScope::Kernels => rows.extend(kernel_suite(&mut rng, eps)?),
        GradScope::Losses => {
            let (p, q) = (
                Tensor::from_points(&rand_points(&mut rng, 20)),
                Tensor::from_points(&rand_points(&mut rng, 27)),
            );
            let t0 = Instant::now();
            rows.push(row(
                "chamfer",
                t0,
                diff::grad_check(|t, v| t.chamfer(v[0], v[1]), &[p, q], eps),
            )?);
            let ins: Vec<Tensor> = (0..4).map(|_| away(&mut rng, 1, 6)).collect();
            let t0 = Instant::now();
            rows.push(row(
                "gaussian_kl",
                t0,
                diff::grad_check(|t, v| t.gaussian_kl(v[0], v[1], v[2], v[3]), &ins, eps),
            )?);
        }
        GradScope::End2end => {
            let cfg = gradcheck_model();
            let mut store = networks::init_params(&cfg, seed)?;
            // Zero biases leave dead rows with identical offsets, and FPS ties
            // between coincident points are not differentiable.
            for (name, t) in store.iter_mut() {
                if name.ends_with(".b") {
                    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
                }
            }
            let (x, y) = (rand_points(&mut rng, cfg.partial_n), rand_points(&mut rng, cfg.out_n));
            let weights = LossWeights::default();
            let names: Vec<String> = store.names().map(String::from).collect();
            let t0 = Instant::now();
            let mut t = Tape::new();
            let q = networks::encode(&mut t, &store, &cfg, &y, networks::Head::Complete)?;
            let link = (t.value(q.mean).clone(), t.value(q.logvar.expect("dual path")).clone());
            // The link's stop-gradient is reproduced by holding q's moments constant.
            let rep = diff::grad_check_params(
                &store,
                &names,
                |t, s| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
                    let j = networks::joint_loss_with_link(
                        t,
                        s,
                        &cfg,
                        &weights,
                        weights.lambda_kl,
                        &x,
                        &y,
                        Some((&link.0, &link.1)),
                        &mut r,
                    )?;
                    Ok(t.scale(j.total, 1e-3))
                },
                // Neighbour sets move with the coarse points; a smaller step
                // keeps probes from straddling a change in the knn graph.
                1e-6,
                Some(4),
            );
            rows.push(row("joint_loss", t0, rep)?);
        }
    }
    Ok(rows)
}

fn kernel_suite(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<GradRow>> {
    let cfg = KernelConfig {
        k_a: 3,
        k_b: 5,
        ..KernelConfig::default()
    };
    let n = 10;
    let pts = rand_points(rng, n);
    let nbr = geometry::knn_self(&pts, 5)?;
    let mut rows = Vec::new();

    let psa = PsaParams::new("psa", 4, 4, true);
    let psk = PskParams::new("psk", 4, &cfg)?;
    let rpsk = RpskParams::new("rpsk", 4, 6, &cfg)?;
    let efe = EfeParams::new("efe", 4, 2)?;
    let mut store = ParamStore::new(0);
    psa.init(&mut store)?;
    psk.init(&mut store)?;
    rpsk.init(&mut store)?;
    efe.init(&mut store)?;
    randomize(&mut store, rng, 0.8);
    let x = away(rng, n, 4);
    let fine = rand_points(rng, 14);
    let small = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        let t = away(rng, r, c);
        Tensor::matrix(r, c, t.data().iter().map(|v| v * 1e-3).collect()).expect("shape")
    };

    let mut run = |name: &str, out_rows: usize, out_cols: usize, f: &dyn Fn(&mut Tape, &ParamStore, diff::Var) -> Result<diff::Var>| -> Result<()> {
        let r = small(rng, out_rows, out_cols);
        let t0 = Instant::now();
        let by_input = diff::grad_check(
            |t, v| {
                let y = f(t, &store, v[0])?;
                readout(t, y, &r)
            },
            std::slice::from_ref(&x),
            eps,
        )?;
        let names: Vec<String> = store.names().filter(|s| s.starts_with(&format!("{name}."))).map(String::from).collect();
        let by_param = diff::grad_check_params(
            &store,
            &names,
            |t, s| {
                let xv = t.input(x.clone());
                let y = f(t, s, xv)?;
                readout(t, y, &r)
            },
            eps,
            None,
        )?;
        let worst = if by_param.max_rel_error > by_input.max_rel_error { by_param.clone() } else { by_input.clone() };
        let report = GradReport {
            checked: by_input.checked + by_param.checked,
            ..worst
        };
        rows.push(row(name, t0, Ok(report))?);
        Ok(())
    };

    run("psa", n, 4, &|t, s, x| kernels::psa_forward(t, s, x, &nbr.truncate(3)?, &psa))?;
    run("psk", n, 4, &|t, s, x| Ok(kernels::psk_forward(t, s, x, &nbr, &psk)?.out))?;
    run("rpsk", n, 6, &|t, s, x| Ok(kernels::rpsk_forward(t, s, x, &nbr, &rpsk)?.0))?;
    run("efe", 2 * n, 4, &|t, s, x| kernels::efe_expand(t, s, x, &nbr.truncate(3)?, &efe))?;
    run("ep_pool", 5, 4, &|t, _, x| {
        let pos = t.input(Tensor::from_points(&pts));
        let lvl = LevelState::new(t, pts.clone(), pos, x)?;
        Ok(kernels::ep_pool(t, &lvl, 0.5, 3, 1)?.features)
    })?;
    run("eu_unpool", 14, 4, &|t, _, x| {
        let pos = t.input(Tensor::from_points(&pts));
        let lvl = LevelState::new(t, pts.clone(), pos, x)?;
        let fpos = t.input(Tensor::from_points(&fine));
        kernels::eu_unpool(t, &lvl, &fine, fpos, 3)
    })?;
    Ok(rows)
}

pub fn format_gradcheck(rows: &[GradRow]) -> String {
    let mut s = format!("{:<14} {:>14} {:>8} {:>9}  result  worst\n", "check", "max_rel_error", "coords", "seconds");
    for r in rows {
        s.push_str(&format!(
            "{:<14} {:>14.3e} {:>8} {:>9.2}  {:<6}  {}\n",
            r.name,
            r.max_rel_error,
            r.checked,
            r.seconds,
            if r.passed { "PASS" } else { "FAIL" },
            r.worst
        ));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    Psa,
    DualPath,
    KernelSelection,
}

impl std::str::FromStr for Toggle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psa" => Ok(Self::Psa),
            "dual_path" | "dual-path" => Ok(Self::DualPath),
            "kernel_selection" | "kernel-selection" => Ok(Self::KernelSelection),
            _ => Err(Error::config(format!("unknown ablation toggle `{s}`"))),
        }
    }
}

impl Toggle {
    pub fn disable(self, cfg: &mut ModelConfig) {
        match self {
            Toggle::Psa => cfg.kernels.psa = false,
            Toggle::DualPath => cfg.dual_path = false,
            Toggle::KernelSelection => cfg.kernels.kernel_selection = false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Toggle::Psa => "psa",
            Toggle::DualPath => "dual_path",
            Toggle::KernelSelection => "kernel_selection",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub parameters: usize,
    pub log: TrainLog,
    pub report: Option<MetricReport>,
}

impl AblationRun {
    pub fn first_fine(&self) -> f64 {
        self.log.steps.first().map_or(f64::NAN, |s| s.loss.fine)
    }

    pub fn last_fine(&self) -> f64 {
        self.log.steps.last().map_or(f64::NAN, |s| s.loss.fine)
    }
}

/// Trains the full model, each toggle disabled alone, and (with more than
/// one toggle) all disabled together, from the same seeds.
pub fn cmd_ablate(base: &RunConfig, toggles: &[Toggle], train: &[Pair], val: &[Pair]) -> Result<Vec<AblationRun>> {
    let mut variants: Vec<(String, RunConfig)> = vec![("full".into(), base.clone())];
    for t in toggles {
        let mut c = base.clone();
        t.disable(&mut c.model);
        variants.push((format!("-{}", t.name()), c));
    }
    if toggles.len() > 1 {
        let mut c = base.clone();
        toggles.iter().for_each(|t| t.disable(&mut c.model));
        variants.push(("-all".into(), c));
    }
    variants
        .into_iter()
        .map(|(variant, cfg)| {
            let mut tr = Trainer::new(cfg)?;
            tr.fit(train, &[], None)?;
            let report = if val.is_empty() {
                None
            } else {
                Some(evaluate_pairs(&tr.params, &tr.cfg.model, val, tr.cfg.model.out_n, tr.cfg.seed)?)
            };
            Ok(AblationRun {
                variant,
                parameters: tr.params.scalar_count(),
                log: tr.log,
                report,
            })
        })
        .collect()
}

pub fn format_ablation(runs: &[AblationRun]) -> String {
    let mut s = format!(
        "{:<18} {:>10} {:>12} {:>12} {:>10} {:>8}\n",
        "variant", "params", "fine_cd_0", "fine_cd_end", "val_cd_e4", "val_f1"
    );
    for r in runs {
        let (cd, f1) = r.report.as_ref().map_or((f64::NAN, f64::NAN), |m| (m.cd_e4, m.fscore_1pct));
        s.push_str(&format!(
            "{:<18} {:>10} {:>12.5} {:>12.5} {:>10.3} {:>8.4}\n",
            r.variant,
            r.parameters,
            r.first_fine(),
            r.last_fine(),
            cd,
            f1
        ));
    }
    s
}
