//! Optimization loop: Adam with a linear warm-up schedule, seeded shuffling
//! and dropout, per-epoch validation, and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ensemble::predict;
use crate::error::{Error, Result};
use crate::fusion_model::{FusionConfig, FusionModel, FusionParams, Mode};
use crate::losses::LossWeights;
use crate::metrics_report::EvalReport;
use crate::objective::{loss_and_grad, Batch, LossBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub schedule: Schedule,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    pub combine_alpha: f64,
    /// Encoder references, e.g. `toy-mlp(dim=16,seed=1)`.
    pub encoders: Vec<String>,
    pub hidden_dims: Vec<usize>,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            peak_lr: 5e-5,
            warmup_steps: 500,
            seed: 0,
            schedule: Schedule::Constant,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            checkpoint_every: 1,
            loss: LossWeights::default(),
            combine_alpha: 1.0,
            encoders: vec!["posterv2".into(), "resnet50".into()],
            hidden_dims: vec![512],
            dropout: 0.1,
        }
    }
}

/// Keys accepted in a training config file.
pub const CONFIG_KEYS: [&str; 12] = [
    "epochs",
    "batch_size",
    "peak_lr",
    "warmup_steps",
    "seed",
    "lambda_basic",
    "lambda_cl",
    "temperature",
    "combine_alpha",
    "encoders",
    "hidden_dims",
    "schedule",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "peak_lr" => self.peak_lr = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "lambda_basic" => self.loss.lambda_basic = parse_value(key, value)?,
            "lambda_cl" => self.loss.lambda_cl = parse_value(key, value)?,
            "temperature" => self.loss.temperature = parse_value(key, value)?,
            "combine_alpha" => self.combine_alpha = parse_value(key, value)?,
            "encoders" => {
                self.encoders = crate::encoders::EncoderRef::parse_list(value)?
                    .iter()
                    .map(ToString::to_string)
                    .collect()
            }
            "hidden_dims" => {
                self.hidden_dims = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(|v| parse_value(key, v))
                    .collect::<Result<_>>()?
            }
            "schedule" => self.schedule = value.parse()?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr must be > 0, got {}", self.peak_lr)));
        }
        if self.encoders.is_empty() {
            return Err(Error::Config("at least one encoder is required".into()));
        }
        self.loss.validate()
    }

    /// Canonical `key = value` rendering of the file keys.
    pub fn to_config_string(&self) -> String {
        let dims: Vec<String> = self.hidden_dims.iter().map(ToString::to_string).collect();
        let values = [
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.peak_lr.to_string(),
            self.warmup_steps.to_string(),
            self.seed.to_string(),
            self.loss.lambda_basic.to_string(),
            self.loss.lambda_cl.to_string(),
            self.loss.temperature.to_string(),
            self.combine_alpha.to_string(),
            self.encoders.join(", "),
            dims.join(","),
            self.schedule.as_str().to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn fusion_config(&self, encoder_dims: &[usize]) -> Result<FusionConfig> {
        if encoder_dims.len() != self.encoders.len() {
            return Err(Error::LengthMismatch {
                left: self.encoders.len(),
                right: encoder_dims.len(),
            });
        }
        let mut cfg = FusionConfig::new(
            self.encoders
                .iter()
                .cloned()
                .zip(encoder_dims.iter().copied()),
        );
        cfg.hidden_dims = self.hidden_dims.clone();
        cfg.combine_alpha = self.combine_alpha;
        cfg.dropout = self.dropout;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Learning rate at optimizer step `step` (0-based).
///
/// Linear warm-up `peak * (step + 1) / warmup` for `step < warmup`, then
/// `peak` (constant) or a cosine decay to zero at `total_steps` (cosine).
pub fn lr_at_step(step: u64, cfg: &TrainConfig, total_steps: u64) -> f64 {
    let warmup = cfg.warmup_steps;
    if step < warmup {
        return cfg.peak_lr * ((step + 1) as f64 / warmup as f64);
    }
    match cfg.schedule {
        Schedule::Constant => cfg.peak_lr,
        Schedule::Cosine => {
            let span = total_steps.saturating_sub(warmup).max(1);
            let progress = ((step - warmup) as f64 / span as f64).min(1.0);
            cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: FusionParams,
    pub v: FusionParams,
}

impl Adam {
    pub fn new(params: &FusionParams, betas: (f64, f64), eps: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut FusionParams, grads: &FusionParams, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let grads = grads.tensors();
        let params = params.tensors_mut();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for ((((_, p), (_, _, g)), (_, m)), (_, v)) in params.into_iter().zip(grads).zip(m).zip(v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Fused features for a set of samples plus whichever labels they carry.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub original: Array2<f64>,
    pub views: Option<(Array2<f64>, Array2<f64>)>,
    pub basic: Vec<Option<usize>>,
    pub compound: Vec<Option<usize>>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.original.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            original: self.original.select(Axis(0), rows),
            views: self
                .views
                .as_ref()
                .map(|(a, b)| (a.select(Axis(0), rows), b.select(Axis(0), rows))),
            basic: rows.iter().map(|&i| self.basic[i]).collect(),
            compound: rows.iter().map(|&i| self.compound[i]).collect(),
        }
    }

    /// Keeps only the feature columns in `range`.
    pub fn select_columns(&self, range: std::ops::Range<usize>) -> Self {
        let cut = |m: &Array2<f64>| m.slice(s![.., range.clone()]).to_owned();
        Self {
            original: cut(&self.original),
            views: self.views.as_ref().map(|(a, b)| (cut(a), cut(b))),
            basic: self.basic.clone(),
            compound: self.compound.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub best_val_f1: f64,
    pub best_epoch: Option<usize>,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            step: 0,
            epoch: 0,
            best_val_f1: 0.0,
            best_epoch: None,
            rng_seed: seed,
        }
    }

    /// Records a validation score for `epoch` (1-based); true if it is a
    /// new best.
    pub fn observe(&mut self, epoch: usize, val_f1: f64) -> bool {
        if self.best_epoch.is_none() || val_f1 > self.best_val_f1 {
            self.best_val_f1 = val_f1;
            self.best_epoch = Some(epoch);
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub losses: LossBreakdown,
    pub lr: f64,
    pub batches: usize,
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over the combined key
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> u64 {
    samples.div_ceil(batch_size.max(1)) as u64
}

/// One shuffled pass over `data`. Advances `state.step` by the batch count.
pub fn train_epoch(
    model: &mut FusionModel,
    optimizer: &mut Adam,
    data: &FeatureSet,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<EpochMetrics> {
    let total_steps = cfg.epochs as u64 * steps_per_epoch(data.len(), cfg.batch_size);
    let epoch = state.epoch as u64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(state.rng_seed, 1, epoch)));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(state.rng_seed, 2, epoch));

    let mut sum = LossBreakdown::default();
    let mut batches = 0;
    let mut lr = 0.0;
    for rows in order.chunks(cfg.batch_size) {
        let part = data.subset(rows);
        let batch = Batch {
            original: part.original.view(),
            views: part.views.as_ref().map(|(a, b)| (a.view(), b.view())),
            basic: &part.basic,
            compound: &part.compound,
        };
        let (losses, grads) =
            loss_and_grad(model, &batch, &cfg.loss, &mut Mode::Train(&mut dropout_rng), true)?;
        if !losses.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                detail: format!("{losses:?}"),
            });
        }
        lr = lr_at_step(state.step, cfg, total_steps);
        optimizer.step(&mut model.params, &grads.expect("requested"), lr);
        state.step += 1;
        sum.basic += losses.basic;
        sum.ce += losses.ce;
        sum.cl += losses.cl;
        sum.total += losses.total;
        batches += 1;
    }
    let n = batches.max(1) as f64;
    Ok(EpochMetrics {
        losses: LossBreakdown {
            basic: sum.basic / n,
            ce: sum.ce / n,
            cl: sum.cl / n,
            total: sum.total / n,
        },
        lr,
        batches,
    })
}

/// Combined (compound) probabilities for every row, in evaluation mode.
pub fn predict_probs(model: &FusionModel, features: &Array2<f64>, batch: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((0, crate::taxonomy::NUM_COMPOUND));
    for start in (0..features.nrows()).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(features.nrows());
        let o = model.forward(features.slice(s![start..end, ..]))?;
        out.append(Axis(0), o.combined_probs.view()).expect("7 columns");
    }
    Ok(out)
}

/// Report over the rows of `data` that carry a compound label.
pub fn evaluate(model: &FusionModel, data: &FeatureSet) -> Result<EvalReport> {
    let probs = predict_probs(model, &data.original, 1024)?;
    report_from_probs(&probs, &data.compound)
}

pub fn report_from_probs(probs: &Array2<f64>, labels: &[Option<usize>]) -> Result<EvalReport> {
    let pred = predict(probs.view());
    let (truth, pred): (Vec<usize>, Vec<usize>) = labels
        .iter()
        .zip(pred)
        .filter_map(|(t, p)| t.map(|t| (t, p)))
        .unzip();
    EvalReport::from_labels(&truth, &pred)
}

pub const LOG_HEADER: &str = "epoch,step,lr,L_basic,L_ce,L_CL,total,val_macro_f1";

pub fn format_log_line(epoch: usize, step: u64, m: &EpochMetrics, val_f1: f64) -> String {
    format!(
        "{epoch},{step},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6}",
        m.lr, m.losses.basic, m.losses.ce, m.losses.cl, m.losses.total, val_f1
    )
}

/// Where [`fit`] writes checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointPaths {
    pub best: PathBuf,
    pub last: PathBuf,
}

impl CheckpointPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
        }
    }
}

/// Trains from `state.epoch` up to `cfg.epochs`, writing one log line per
/// epoch. Returns the final state.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut FusionModel,
    optimizer: &mut Adam,
    train: &FeatureSet,
    val: &FeatureSet,
    cfg: &TrainConfig,
    mut state: TrainState,
    checkpoints: Option<&CheckpointPaths>,
    log: &mut dyn Write,
) -> Result<TrainState> {
    cfg.validate()?;
    while state.epoch < cfg.epochs {
        let metrics = train_epoch(model, optimizer, train, cfg, &mut state)?;
        let val_f1 = if val.compound.iter().any(Option::is_some) {
            evaluate(model, val)?.macro_f1
        } else {
            0.0
        };
        state.epoch += 1;
        writeln!(log, "{}", format_log_line(state.epoch, state.step, &metrics, val_f1))?;
        let improved = state.observe(state.epoch, val_f1);
        if let Some(paths) = checkpoints {
            let ckpt = Checkpoint {
                model: model.clone(),
                state: state.clone(),
                train_config: cfg.clone(),
                optimizer: Some(optimizer.clone()),
                val_macro_f1: val_f1,
            };
            if improved {
                ckpt.save(&paths.best)?;
            }
            if state.epoch.is_multiple_of(cfg.checkpoint_every.max(1)) || state.epoch == cfg.epochs {
                ckpt.save(&paths.last)?;
            }
        }
    }
    Ok(state)
}

const CKPT_MAGIC: &[u8; 4] = b"CERC";
const CKPT_VERSION: u32 = 1;
const TENSOR_MAGIC: &[u8; 4] = b"CERD";

/// Model, optimizer and progress, as written by [`Checkpoint::save`].
///
/// Layout (little-endian): magic `CERC`, u32 version, u32 length + UTF-8
/// `key = value` block, u32 tensor count, then per tensor a u32 length +
/// UTF-8 name followed by magic `CERD`, u32 version, u32 rows, u32 cols and
/// `rows * cols` f64 values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FusionModel,
    pub state: TrainState,
    pub train_config: TrainConfig,
    pub optimizer: Option<Adam>,
    pub val_macro_f1: f64,
}

fn write_u32(out: &mut impl Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(out: &mut impl Write, s: &str) -> Result<()> {
    write_u32(out, s.len() as u32)?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn ckpt_err(msg: impl fmt::Display) -> Error {
    Error::CheckpointFormat(msg.to_string())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|_| ckpt_err("truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(input: &mut impl Read) -> Result<String> {
    let len = read_u32(input)? as usize;
    if len > 1 << 26 {
        return Err(ckpt_err("string length out of range"));
    }
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf).map_err(|_| ckpt_err("truncated"))?;
    String::from_utf8(buf).map_err(|_| ckpt_err("invalid UTF-8"))
}

fn collect_tensors<'a>(
    prefix: &str,
    params: &'a FusionParams,
    out: &mut Vec<(String, (usize, usize), &'a [f64])>,
) {
    for (name, shape, values) in params.tensors() {
        out.push((format!("{prefix}{name}"), shape, values));
    }
}

impl Checkpoint {
    fn kv_block(&self) -> String {
        let mut kv = self.train_config.to_config_string();
        let cfg = &self.model.config;
        let mut push = |k: &str, v: String| kv.push_str(&format!("{k} = {v}\n"));
        push("dropout", cfg.dropout.to_string());
        push("model.combine_alpha", cfg.combine_alpha.to_string());
        push(
            "model.hidden_dims",
            cfg.hidden_dims.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        );
        push("model.encoder_count", cfg.encoder_names.len().to_string());
        for (i, (name, dim)) in cfg.encoder_names.iter().zip(&cfg.encoder_dims).enumerate() {
            push(&format!("model.encoder.{i}.name"), name.clone());
            push(&format!("model.encoder.{i}.dim"), dim.to_string());
        }
        push("state.step", self.state.step.to_string());
        push("state.epoch", self.state.epoch.to_string());
        push("state.best_val_f1", self.state.best_val_f1.to_string());
        push(
            "state.best_epoch",
            self.state.best_epoch.map_or("-".into(), |e| e.to_string()),
        );
        push("state.rng_seed", self.state.rng_seed.to_string());
        push("val_macro_f1", self.val_macro_f1.to_string());
        push("adam_betas", format!("{},{}", self.train_config.adam_betas.0, self.train_config.adam_betas.1));
        push("adam_eps", self.train_config.adam_eps.to_string());
        push("checkpoint_every", self.train_config.checkpoint_every.to_string());
        if let Some(opt) = &self.optimizer {
            push("adam.t", opt.t.to_string());
        }
        kv
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(CKPT_MAGIC)?;
        write_u32(out, CKPT_VERSION)?;
        write_str(out, &self.kv_block())?;
        let mut tensors = Vec::new();
        collect_tensors("", &self.model.params, &mut tensors);
        if let Some(opt) = &self.optimizer {
            collect_tensors("adam.m.", &opt.m, &mut tensors);
            collect_tensors("adam.v.", &opt.v, &mut tensors);
        }
        write_u32(out, tensors.len() as u32)?;
        for (name, (rows, cols), values) in tensors {
            write_str(out, &name)?;
            out.write_all(TENSOR_MAGIC)?;
            write_u32(out, 1)?;
            write_u32(out, rows as u32)?;
            write_u32(out, cols as u32)?;
            for v in values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut out = BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut out)?;
            out.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)
            .map_err(|e| ckpt_err(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| ckpt_err("truncated"))?;
        if &magic != CKPT_MAGIC {
            return Err(ckpt_err("bad magic"));
        }
        let version = read_u32(input)?;
        if version != CKPT_VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        let kv_text = read_str(input)?;
        let mut kv = BTreeMap::new();
        for line in kv_text.lines() {
            let (k, v) = line.split_once(" = ").ok_or_else(|| ckpt_err(format!("bad line `{line}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| ckpt_err(format!("missing `{k}`")));
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| ckpt_err(format!("bad value for `{k}`")))
        }

        let mut train_config = TrainConfig::default();
        for key in CONFIG_KEYS {
            train_config.set(key, get(key)?).map_err(ckpt_err)?;
        }
        train_config.dropout = num("dropout", get("dropout")?)?;
        let (b1, b2) = get("adam_betas")?.split_once(',').ok_or_else(|| ckpt_err("bad adam_betas"))?;
        train_config.adam_betas = (num("adam_betas", b1)?, num("adam_betas", b2)?);
        train_config.adam_eps = num("adam_eps", get("adam_eps")?)?;
        train_config.checkpoint_every = num("checkpoint_every", get("checkpoint_every")?)?;

        let count: usize = num("model.encoder_count", get("model.encoder_count")?)?;
        let mut encoders = Vec::with_capacity(count);
        for i in 0..count {
            let name = get(&format!("model.encoder.{i}.name"))?.to_string();
            let key = format!("model.encoder.{i}.dim");
            encoders.push((name, num(&key, get(&key)?)?));
        }
        let mut config = FusionConfig::new(encoders);
        config.combine_alpha = num("model.combine_alpha", get("model.combine_alpha")?)?;
        config.dropout = train_config.dropout;
        config.hidden_dims = get("model.hidden_dims")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| num("model.hidden_dims", s))
            .collect::<Result<_>>()?;
        config.validate().map_err(ckpt_err)?;

        let state = TrainState {
            step: num("state.step", get("state.step")?)?,
            epoch: num("state.epoch", get("state.epoch")?)?,
            best_val_f1: num("state.best_val_f1", get("state.best_val_f1")?)?,
            best_epoch: match get("state.best_epoch")? {
                "-" => None,
                v => Some(num("state.best_epoch", v)?),
            },
            rng_seed: num("state.rng_seed", get("state.rng_seed")?)?,
        };
        let val_macro_f1 = num("val_macro_f1", get("val_macro_f1")?)?;

        let n_tensors = read_u32(input)? as usize;
        let mut tensors: BTreeMap<String, ((usize, usize), Vec<f64>)> = BTreeMap::new();
        for _ in 0..n_tensors {
            let name = read_str(input)?;
            let mut magic = [0u8; 4];
            input.read_exact(&mut magic).map_err(|_| ckpt_err("truncated"))?;
            if &magic != TENSOR_MAGIC || read_u32(input)? != 1 {
                return Err(ckpt_err(format!("bad tensor header for `{name}`")));
            }
            let rows = read_u32(input)? as usize;
            let cols = read_u32(input)? as usize;
            let len = rows.checked_mul(cols).filter(|n| *n <= 1 << 28).ok_or_else(|| ckpt_err("tensor too large"))?;
            let mut bytes = vec![0u8; len * 8];
            input.read_exact(&mut bytes).map_err(|_| ckpt_err(format!("truncated tensor `{name}`")))?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, ((rows, cols), values));
        }
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(ckpt_err("trailing bytes"));
        }

        let mut take = |prefix: &str| -> Result<FusionParams> {
            let mut params = FusionParams::zeros(&config);
            let shapes: Vec<(String, (usize, usize))> =
                params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
            for ((name, shape), (_, dst)) in shapes.into_iter().zip(params.tensors_mut()) {
                let key = format!("{prefix}{name}");
                let (got, values) = tensors.remove(&key).ok_or_else(|| ckpt_err(format!("missing tensor `{key}`")))?;
                if got != shape {
                    return Err(ckpt_err(format!("tensor `{key}` is {got:?}, expected {shape:?}")));
                }
                dst.copy_from_slice(&values);
            }
            Ok(params)
        };
        let params = take("")?;
        let optimizer = match kv.get("adam.t") {
            Some(t) => Some(Adam {
                beta1: train_config.adam_betas.0,
                beta2: train_config.adam_betas.1,
                eps: train_config.adam_eps,
                t: num("adam.t", t)?,
                m: take("adam.m.")?,
                v: take("adam.v.")?,
            }),
            None => None,
        };
        if !tensors.is_empty() {
            return Err(ckpt_err(format!(
                "unexpected tensors: {:?}",
                tensors.keys().collect::<Vec<_>>()
            )));
        }
        let model = FusionModel::from_parts(config, params).map_err(ckpt_err)?;
        Ok(Self {
            model,
            state,
            train_config,
            optimizer,
            val_macro_f1,
        })
    }
}

/// Shorthand for [`Checkpoint::save`] without optimizer state.
pub fn checkpoint(model: &FusionModel, state: &TrainState, cfg: &TrainConfig, val_macro_f1: f64, path: &Path) -> Result<()> {
    Checkpoint {
        model: model.clone(),
        state: state.clone(),
        train_config: cfg.clone(),
        optimizer: None,
        val_macro_f1,
    }
    .save(path)
}

pub fn resume(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
