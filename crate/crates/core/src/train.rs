//! Negative log-likelihood training with grid-normalized or sampled queries.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ImplicitDensityModel, ModelConfig, Parameters};
use crate::rotation::{geodesic_distance, Rotation};
use crate::so3grid::{generate_grid, grid_size, rotate_grid, EquivolumetricGrid, MAX_LEVEL};
use crate::symsol::DatasetRecord;

/// Tolerance on `queries[0] == gt`.
pub const GT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    RotatedGrid,
    Random,
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryMode::RotatedGrid => "rotated_grid",
            QueryMode::Random => "random",
        })
    }
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotated_grid" => Ok(QueryMode::RotatedGrid),
            "random" => Ok(QueryMode::Random),
            _ => Err(Error::InvalidConfig(format!("unknown query mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub query_count: usize,
    pub query_mode: QueryMode,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Rescale the gradient to at most this global norm.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            query_count: 4096,
            query_mode: QueryMode::Random,
            base_lr: 1e-4,
            warmup_steps: 1000,
            total_steps: 10_000,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.query_count < 2 {
            return bad("query_count must be >= 2");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be < total_steps");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if self.query_mode == QueryMode::RotatedGrid {
            self.grid_level()?;
        }
        Ok(())
    }

    /// Grid level whose cell count equals `query_count` (rotated_grid mode).
    pub fn grid_level(&self) -> Result<u32> {
        (0..=MAX_LEVEL)
            .find(|&l| grid_size(l) == self.query_count)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "rotated_grid needs query_count = 72·8^L, got {}",
                    self.query_count
                ))
            })
    }

    /// Learning rate applied at `step`: linear warmup then cosine decay to 0.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.base_lr * step as f64 / self.warmup_steps as f64
        } else {
            let span = (self.total_steps - self.warmup_steps) as f64;
            let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
            self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
        }
    }
}

/// Model plus training settings, as read from a `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 18] = [
        "descriptor_dim",
        "m",
        "hidden_width",
        "hidden_layers",
        "pe_include_raw",
        "rotation_format",
        "query_count",
        "query_mode",
        "base_lr",
        "warmup_steps",
        "total_steps",
        "batch_size",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "seed",
        "clip_grad_norm",
        "grid_level",
    ];

    /// `grid_level` is a convenience that sets `query_count` to `72·8^L`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "descriptor_dim" => m.descriptor_dim = parse(key, value)?,
            "m" | "pe_frequencies" => m.pe_frequencies = parse(key, value)?,
            "hidden_width" => m.hidden_width = parse(key, value)?,
            "hidden_layers" => m.hidden_layers = parse(key, value)?,
            "pe_include_raw" => m.pe_include_raw = parse(key, value)?,
            "rotation_format" => m.rotation_format = parse(key, value)?,
            "query_count" => t.query_count = parse(key, value)?,
            "query_mode" => t.query_mode = parse(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "total_steps" => t.total_steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "seed" => {
                t.seed = parse(key, value)?;
                m.seed = t.seed;
            }
            "clip_grad_norm" => {
                t.clip_grad_norm = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "grid_level" => t.query_count = grid_size(parse(key, value)?),
            _ => return Err(Error::InvalidConfig(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Flat echo of every effective setting.
    pub fn to_key_values(&self) -> BTreeMap<String, String> {
        let (m, t) = (&self.model, &self.train);
        let mut out = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            out.insert(k.to_string(), v);
        };
        put("descriptor_dim", m.descriptor_dim.to_string());
        put("m", m.pe_frequencies.to_string());
        put("hidden_width", m.hidden_width.to_string());
        put("hidden_layers", m.hidden_layers.to_string());
        put("pe_include_raw", m.pe_include_raw.to_string());
        put("rotation_format", m.rotation_format.name().to_string());
        put("query_count", t.query_count.to_string());
        put("query_mode", t.query_mode.to_string());
        put("base_lr", t.base_lr.to_string());
        put("warmup_steps", t.warmup_steps.to_string());
        put("total_steps", t.total_steps.to_string());
        put("batch_size", t.batch_size.to_string());
        put("adam_beta1", t.adam_beta1.to_string());
        put("adam_beta2", t.adam_beta2.to_string());
        put("adam_eps", t.adam_eps.to_string());
        put("seed", t.seed.to_string());
        put(
            "clip_grad_norm",
            t.clip_grad_norm.map_or("none".into(), |c| c.to_string()),
        );
        out
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected key = value", i + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.apply(&parse_key_values(&std::fs::read_to_string(path)?)?)?;
    Ok(cfg)
}

fn log_sum_exp(f: &[f64]) -> f64 {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + f.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `−log p(R₀|x)` from network outputs with `f[0]` at the ground truth,
/// `log V − f₀ + LSE(f)` with `V = π²/N`.
pub fn loss_from_outputs(f: &[f64]) -> f64 {
    let v = PI * PI / f.len() as f64;
    v.ln() - f[0] + log_sum_exp(f)
}

/// Loss and its derivative with respect to each output: `softmax(f) − e₀`.
pub fn loss_and_output_gradient(f: &[f64]) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(f);
    let mut g: Vec<f64> = f.iter().map(|v| (v - lse).exp()).collect();
    g[0] -= 1.0;
    let v = PI * PI / f.len() as f64;
    (v.ln() - f[0] + lse, g)
}

fn check_gt(gt: &Rotation, queries: &[Rotation]) -> Result<()> {
    let off = queries
        .first()
        .map_or(f64::INFINITY, |q| geodesic_distance(q, gt));
    if off > GT_TOLERANCE {
        return Err(Error::QueryMissingGroundTruth(off));
    }
    Ok(())
}

pub fn loss_single(
    model: &ImplicitDensityModel,
    descriptor: &[f64],
    gt: &Rotation,
    queries: &[Rotation],
) -> Result<f64> {
    check_gt(gt, queries)?;
    Ok(loss_from_outputs(&model.forward(descriptor, queries)?))
}

/// Ground truth first, then either the grid moved onto it or fresh Haar samples.
pub fn make_queries(
    mode: QueryMode,
    grid: Option<&EquivolumetricGrid>,
    rng: &mut ChaCha8Rng,
    gt: &Rotation,
    count: usize,
) -> Result<Vec<Rotation>> {
    if count < 2 {
        return Err(Error::InvalidConfig("query count must be >= 2".into()));
    }
    match mode {
        QueryMode::RotatedGrid => {
            let grid = grid.ok_or_else(|| {
                Error::InvalidConfig("rotated_grid queries need a grid".into())
            })?;
            if grid.len() != count {
                return Err(Error::DimensionMismatch {
                    expected: count,
                    got: grid.len(),
                });
            }
            Ok(rotate_grid(grid, gt))
        }
        QueryMode::Random => {
            let mut out = Vec::with_capacity(count);
            out.push(*gt);
            out.extend((1..count).map(|_| Rotation::random(rng)));
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Parameters,
    v: Parameters,
    t: u64,
}

impl Adam {
    pub fn new(like: &Parameters, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_trace(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,lr,loss")?;
    for r in rows {
        writeln!(w, "{},{:e},{}", r.step, r.lr, r.loss)?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic stream of example indices: a fresh permutation every epoch.
struct EpochSampler {
    seed: u64,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(seed: u64, n: usize) -> Self {
        let mut s = Self {
            seed,
            n,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5348_5546_464c_4521);
        rng.set_stream(self.epoch);
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.n {
            self.epoch += 1;
            self.shuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// A resumable training run.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a [DatasetRecord],
    grid: Option<EquivolumetricGrid>,
    sampler: EpochSampler,
    adam: Adam,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &ImplicitDensityModel, data: &'a [DatasetRecord], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let dim = model.config().descriptor_dim;
        if let Some(bad) = data.iter().find(|r| r.descriptor.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.descriptor.len(),
            });
        }
        let grid = match config.query_mode {
            QueryMode::RotatedGrid => Some(generate_grid(config.grid_level()?)?),
            QueryMode::Random => None,
        };
        Ok(Self {
            sampler: EpochSampler::new(config.seed, data.len()),
            adam: Adam::new(model.params(), config.adam_beta1, config.adam_beta2, config.adam_eps),
            config,
            data,
            grid,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Mean minibatch loss and gradient without updating anything.
    fn batch_gradient(
        &self,
        model: &ImplicitDensityModel,
        batch: &[usize],
    ) -> Result<(f64, Parameters)> {
        let b = batch.len() as f64;
        let parts: Vec<(f64, Parameters)> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let rec = &self.data[i];
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream((self.step * self.config.batch_size + slot) as u64 + 1);
                let queries = make_queries(
                    self.config.query_mode,
                    self.grid.as_ref(),
                    &mut rng,
                    &rec.gt_rotation,
                    self.config.query_count,
                )?;
                let (f, cache) = model.forward_cached(&rec.descriptor, &queries)?;
                let (loss, mut w) = loss_and_output_gradient(&f);
                w.iter_mut().for_each(|x| *x /= b);
                let mut g = model.params().zeros_like();
                model.backward(&cache, &w, Some(&mut g));
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        let mut total = model.params().zeros_like();
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            total.add_assign(g);
        }
        Ok((loss / b, total))
    }

    /// One optimizer step. The reported loss is measured before the update.
    pub fn step(&mut self, model: &mut ImplicitDensityModel) -> Result<TraceRow> {
        let batch: Vec<usize> = (0..self.config.batch_size).map(|_| self.sampler.next()).collect();
        let (loss, mut grads) = self.batch_gradient(model, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        if let Some(max) = self.config.clip_grad_norm {
            let norm = grads.norm();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        let lr = self.config.lr(self.step);
        self.adam.update(model.params_mut(), &grads, lr);
        let row = TraceRow {
            step: self.step,
            lr,
            loss,
        };
        self.step += 1;
        Ok(row)
    }
}

/// Runs `config.total_steps` steps; returns the per-step loss trace.
pub fn train(
    model: &mut ImplicitDensityModel,
    data: &[DatasetRecord],
    config: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    train_with(model, data, config, |_| {})
}

pub fn train_with(
    model: &mut ImplicitDensityModel,
    data: &[DatasetRecord],
    config: &TrainConfig,
    mut on_step: impl FnMut(&TraceRow),
) -> Result<Vec<TraceRow>> {
    let mut trainer = Trainer::new(model, data, config.clone())?;
    let mut trace = Vec::with_capacity(config.total_steps);
    while !trainer.is_done() {
        let row = trainer.step(model)?;
        on_step(&row);
        trace.push(row);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GradientItem;
    use crate::rotation::sample_uniform;
    use crate::symsol::{generate_dataset, SymmetryKind};

    fn zero_model(width: usize) -> ImplicitDensityModel {
        ImplicitDensityModel::new(ModelConfig {
            hidden_width: width,
            hidden_layers: 2,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn uniform_loss_is_log_pi_squared() {
        let m = zero_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for gt in sample_uniform(1, 3) {
            for n in [100, 4096, 8192] {
                let q = make_queries(QueryMode::Random, None, &mut rng, &gt, n).unwrap();
                let l = loss_single(&m, &[0.0; 16], &gt, &q).unwrap();
                assert!((l - (PI * PI).ln()).abs() < 1e-12);
            }
        }
        // rounds to the published uniform baseline of 2.29
        assert!(((PI * PI).ln() - 2.29).abs() < 1e-3);
    }

    #[test]
    fn spike_loss_closed_form() {
        let mut f = vec![0.0; 4096];
        f[0] = 20.0;
        let expect = (PI * PI / 4096.0).ln() - 20.0 + (20f64.exp() + 4095.0).ln();
        assert!((loss_from_outputs(&f) - expect).abs() < 1e-12);
        assert!((loss_from_outputs(&f) + 6.028).abs() < 1e-3);
        // stable for large outputs
        f[0] = 1e4;
        assert!(loss_from_outputs(&f).is_finite());
    }

    #[test]
    fn loss_ignores_order_of_other_queries() {
        let m = ImplicitDensityModel::new_random(ModelConfig {
            hidden_width: 16,
            hidden_layers: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        let gt = sample_uniform(3, 1)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut q = make_queries(QueryMode::Random, None, &mut rng, &gt, 64).unwrap();
        let d = [0.2; 16];
        let a = loss_single(&m, &d, &gt, &q).unwrap();
        q[1..].reverse();
        q[1..].rotate_left(7);
        let b = loss_single(&m, &d, &gt, &q).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn missing_gt_is_rejected() {
        let m = zero_model(4);
        let gt = Rotation::identity();
        let q = sample_uniform(1, 10);
        assert!(matches!(
            loss_single(&m, &[0.0; 16], &gt, &q),
            Err(Error::QueryMissingGroundTruth(_))
        ));
    }

    #[test]
    fn query_modes() {
        let gt = sample_uniform(7, 1)[0];
        let grid = generate_grid(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = make_queries(QueryMode::RotatedGrid, Some(&grid), &mut rng, &gt, 4608).unwrap();
        assert_eq!(g.len(), 4608);
        assert_eq!(g[0], gt);
        let r1 = make_queries(QueryMode::Random, None, &mut ChaCha8Rng::seed_from_u64(5), &gt, 4096).unwrap();
        let r2 = make_queries(QueryMode::Random, None, &mut ChaCha8Rng::seed_from_u64(5), &gt, 4096).unwrap();
        assert_eq!(r1.len(), 4096);
        assert_eq!(r1[0], gt);
        assert_eq!(r1, r2);
        assert!(make_queries(QueryMode::RotatedGrid, Some(&grid), &mut rng, &gt, 4096).is_err());
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert!((c.lr(500) - 0.5e-4).abs() < 1e-15);
        assert!((c.lr(1000) - 1e-4).abs() < 1e-15);
        assert!(c.lr(10_000).abs() < 1e-15);
        assert_eq!(c.lr(0), 0.0);
        let mid = c.lr(5500);
        assert!((mid - 0.5e-4).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.warmup_steps = c.total_steps;
        assert!(c.validate().is_err());
        let mut c = TrainConfig {
            query_mode: QueryMode::RotatedGrid,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.query_count = 4608;
        assert_eq!(c.grid_level().unwrap(), 2);
        c.validate().unwrap();
    }

    #[test]
    fn key_value_config() {
        let text = "# run\nhidden_width = 64\nm=2\nquery_mode = rotated_grid\ngrid_level = 1\nseed = 9 # trailing\nclip_grad_norm = 5\n";
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_key_values(text).unwrap()).unwrap();
        assert_eq!(cfg.model.hidden_width, 64);
        assert_eq!(cfg.model.pe_frequencies, 2);
        assert_eq!(cfg.model.seed, 9);
        assert_eq!(cfg.train.query_count, 576);
        assert_eq!(cfg.train.clip_grad_norm, Some(5.0));
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("hidden_width", "wide").is_err());
        assert!(parse_key_values("just words").is_err());
        // the echo reparses to the same config
        let mut again = RunConfig::default();
        again.apply(&cfg.to_key_values()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = ModelConfig {
            descriptor_dim: 2,
            hidden_width: 3,
            hidden_layers: 1,
            pe_frequencies: 0,
            ..ModelConfig::default()
        };
        let mut p = Parameters::zeros(&cfg);
        let mut g = p.zeros_like();
        g.w_out[0] = 3.0;
        g.w_out[1] = -0.5;
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.update(&mut p, &g, 0.01);
        assert!((p.w_out[0] + 0.01).abs() < 1e-9);
        assert!((p.w_out[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.w_out[2], 0.0);
    }

    #[test]
    fn batch_gradient_matches_model_gradient_of_mean_loss() {
        // the trainer's gradient equals Σ_b (softmax − e₀)/B pushed through the model
        let data = generate_dataset(SymmetryKind::Cube, 4, 0.0, 1);
        let model = ImplicitDensityModel::new_random(ModelConfig {
            hidden_width: 8,
            hidden_layers: 2,
            seed: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            query_count: 32,
            batch_size: 2,
            warmup_steps: 0,
            total_steps: 5,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(&model, &data, cfg.clone()).unwrap();
        let (loss, g) = trainer.batch_gradient(&model, &[0, 3]).unwrap();
        let mut expect_loss = 0.0;
        let mut items = Vec::new();
        let mut store = Vec::new();
        for (slot, &i) in [0usize, 3].iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(slot as u64 + 1);
            let q = make_queries(QueryMode::Random, None, &mut rng, &data[i].gt_rotation, 32).unwrap();
            let f = model.forward(&data[i].descriptor, &q).unwrap();
            let (l, w) = loss_and_output_gradient(&f);
            expect_loss += l / 2.0;
            store.push((q, w.iter().map(|x| x / 2.0).collect::<Vec<_>>()));
        }
        for (i, (q, w)) in [0usize, 3].iter().zip(&store) {
            items.push(GradientItem {
                descriptor: &data[*i].descriptor,
                queries: q,
                weights: w,
            });
        }
        let expect = model.parameter_gradients(&items).unwrap();
        assert!((loss - expect_loss).abs() < 1e-12);
        for (a, b) in g.tensors().iter().zip(expect.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let data = generate_dataset(SymmetryKind::Tetrahedron, 1, 0.0, 4);
        let model = ImplicitDensityModel::new_random(ModelConfig {
            hidden_width: 6,
            hidden_layers: 2,
            pe_frequencies: 1,
            seed: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        let gt = data[0].gt_rotation;
        let q = make_queries(QueryMode::Random, None, &mut ChaCha8Rng::seed_from_u64(2), &gt, 16).unwrap();
        let f = model.forward(&data[0].descriptor, &q).unwrap();
        let (_, w) = loss_and_output_gradient(&f);
        let g = model
            .parameter_gradients(&[GradientItem {
                descriptor: &data[0].descriptor,
                queries: &q,
                weights: &w,
            }])
            .unwrap();
        let an: Vec<f64> = g.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let h = 1e-6;
        for k in (0..an.len()).step_by(7) {
            let mut plus = model.clone();
            let mut minus = model.clone();
            bump(plus.params_mut(), k, h);
            bump(minus.params_mut(), k, -h);
            let fd = (loss_single(&plus, &data[0].descriptor, &gt, &q).unwrap()
                - loss_single(&minus, &data[0].descriptor, &gt, &q).unwrap())
                / (2.0 * h);
            assert!((fd - an[k]).abs() <= 1e-4 * an[k].abs().max(1e-2), "{k}: {fd} vs {}", an[k]);
        }
    }

    fn bump(p: &mut Parameters, mut k: usize, h: f64) {
        for t in p.tensors_mut() {
            if k < t.len() {
                t[k] += h;
                return;
            }
            k -= t.len();
        }
    }

    #[test]
    fn training_is_deterministic_and_starts_uniform() {
        let data = generate_dataset(SymmetryKind::Cube, 20, 0.01, 1);
        let cfg = TrainConfig {
            query_count: 64,
            batch_size: 4,
            warmup_steps: 2,
            total_steps: 6,
            base_lr: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = zero_model(16);
            let trace = train(&mut m, &data, &cfg).unwrap();
            (m, trace)
        };
        let (m1, t1) = run();
        let (m2, t2) = run();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
        assert!((t1[0].loss - (PI * PI).ln()).abs() < 1e-6);
        assert_eq!(t1.len(), 6);
    }

    #[test]
    fn epochs_cover_every_example() {
        let mut s = EpochSampler::new(3, 10);
        let mut first: Vec<usize> = (0..10).map(|_| s.next()).collect();
        let mut second: Vec<usize> = (0..10).map(|_| s.next()).collect();
        assert_ne!(first, second);
        first.sort();
        second.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(second, first);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let data = generate_dataset(SymmetryKind::Cube, 4, 0.0, 1);
        let mut m = zero_model(4);
        m.params_mut().b_out[0] = f64::NAN;
        let cfg = TrainConfig {
            query_count: 8,
            batch_size: 2,
            warmup_steps: 0,
            total_steps: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut m, &data, &cfg), Err(Error::NonFiniteLoss { step: 0 })));
    }

    #[test]
    fn loss_trace_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_loss_trace(&p, &[TraceRow { step: 0, lr: 0.0, loss: 2.5 }]).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert_eq!(s.lines().next().unwrap(), "step,lr,loss");
        assert_eq!(s.lines().count(), 2);
    }
}
