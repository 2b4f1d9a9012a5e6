use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cer_core::dataset::{
    load_manifest, read_schema_map, split_manifest, write_manifest, AugmentationConfig, ManifestRecord, SchemaSet, Split,
};
use cer_core::ensemble::fuse_probs;
use cer_core::metrics_report::{render_report, render_tsv};
use cer_core::pipeline::{
    encode_items, list_frames, prediction_records, read_predictions, write_predictions, EncodeOptions, EncoderStack,
};
use cer_core::synthetic::{fixture_train_config, write_image_fixture, ImageFixtureConfig};
use cer_core::trainer::{
    fit, predict_probs, report_from_probs, resume, Adam, Checkpoint, CheckpointPaths, TrainConfig, TrainState, LOG_HEADER,
};
use cer_core::{EncoderRegistry, Error, EvalReport, FusionModel};
use ndarray::{Array2, Axis};

use crate::{EnsembleEvalArgs, EvalArgs, PrepareArgs, PredictArgs, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Usage(_) => 1,
        CliError::Core(Error::NonFiniteLoss { .. }) => 3,
        CliError::Core(_) => 2,
    }
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn parse_split(s: &Option<String>) -> CliResult<Option<Split>> {
    s.as_deref()
        .map(|v| v.parse().map_err(|_| CliError::Usage(format!("unknown split `{v}`"))))
        .transpose()
}

pub fn synth(args: &SynthArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = ImageFixtureConfig {
        train_per_class: args.train_per_class,
        val_per_class: args.val_per_class,
        ..ImageFixtureConfig::default()
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&args.out)?;
    let records = write_image_fixture(&args.out, &cfg)?;
    fs::write(args.out.join("train.conf"), fixture_train_config().to_config_string())?;
    println!("wrote {} images to {}", records.len(), args.out.display());
    Ok(())
}

fn print_split_counts(records: &[ManifestRecord]) {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.split.map_or("unassigned", Split::as_str)).or_default() += 1;
    }
    for (split, n) in counts {
        println!("{split}\t{n}");
    }
}

pub fn prepare_data(args: &PrepareArgs, seed: Option<u64>) -> CliResult<()> {
    let mut schemas = SchemaSet::with_canonical();
    for spec in &args.schemas {
        let (source, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--schema expects SOURCE=PATH, got `{spec}`")))?;
        schemas.add(read_schema_map(source, Path::new(path))?);
    }
    let mut merged: Vec<ManifestRecord> = Vec::new();
    let mut seen: HashMap<PathBuf, usize> = HashMap::new();
    for path in &args.manifests {
        let base = base_dir(path);
        for mut record in load_manifest(path, &schemas)? {
            if record.image_path.is_relative() && !base.as_os_str().is_empty() {
                record.image_path = base.join(&record.image_path);
            }
            let record = record.canonicalized();
            match seen.get(&record.image_path) {
                Some(&i) if merged[i].label == record.label && merged[i].label_kind == record.label_kind => {
                    log::warn!("dropping repeated entry for {}", record.image_path.display());
                }
                Some(_) => {
                    return Err(Error::Config(format!(
                        "conflicting labels for duplicate image path {}",
                        record.image_path.display()
                    ))
                    .into())
                }
                None => {
                    seen.insert(record.image_path.clone(), merged.len());
                    merged.push(record);
                }
            }
        }
    }
    let merged = split_manifest(merged, args.val_fraction, seed.unwrap_or(0))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_manifest(&args.out, &merged)?;
    print_split_counts(&merged);
    Ok(())
}

fn rows_for(records: &[ManifestRecord], split: Option<Split>) -> Vec<usize> {
    (0..records.len())
        .filter(|&i| split.is_none_or(|s| records[i].split == Some(s)))
        .collect()
}

fn check_stack(stack: &EncoderStack, model: &FusionModel) -> CliResult<()> {
    let cfg = &model.config;
    if stack.names() != cfg.encoder_names.as_slice() {
        return Err(Error::EncoderOrderMismatch {
            expected: cfg.encoder_names.clone(),
            actual: stack.names().to_vec(),
        }
        .into());
    }
    for (got, want) in stack.dims().iter().zip(&cfg.encoder_dims) {
        if got != want {
            return Err(Error::DimensionMismatch {
                expected: *want,
                actual: *got,
            }
            .into());
        }
    }
    Ok(())
}

pub fn train(args: &TrainArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.checkpoint_every = args.checkpoint_every.max(1);
    let records = load_manifest(&args.manifest, &SchemaSet::unified())?;
    let registry = EncoderRegistry::with_builtins();
    let stack = EncoderStack::parse(&registry, &cfg.encoders.join(", "))?;
    let train_rows = rows_for(&records, Some(Split::Train));
    let val_rows = rows_for(&records, Some(Split::Val));
    if train_rows.is_empty() {
        return Err(Error::Config("manifest has no training records".into()).into());
    }
    let opts = EncodeOptions {
        augmentation: AugmentationConfig::standard(224),
        with_views: cfg.loss.lambda_cl > 0.0,
        seed: cfg.seed,
        batch_size: cfg.batch_size,
    };
    let base = base_dir(&args.manifest);
    let encode = |rows: &[usize], opts: &EncodeOptions| -> CliResult<_> {
        let enc = encode_items_for(&stack, &records, rows, &base, opts)?;
        if let Some(e) = enc.first_error() {
            return Err(Error::Decode {
                path: PathBuf::new(),
                message: e.to_string(),
            }
            .into());
        }
        let refs: Vec<&ManifestRecord> = rows.iter().map(|&i| &records[i]).collect();
        Ok(enc.feature_set(&refs))
    };
    let train_set = encode(&train_rows, &opts)?;
    let val_set = encode(&val_rows, &EncodeOptions { with_views: false, ..opts.clone() })?;
    log::info!(
        "{} training / {} validation samples, {} fused features",
        train_set.len(),
        val_set.len(),
        train_set.original.ncols()
    );

    fs::create_dir_all(&args.out)?;
    let paths = CheckpointPaths::in_dir(&args.out);
    let log_path = args.out.join("train_log.csv");
    let (mut model, mut optimizer, state) = if args.resume && paths.last.exists() {
        let ck = resume(&paths.last)?;
        check_stack(&stack, &ck.model)?;
        log::info!("resuming after epoch {}", ck.state.epoch);
        let opt = ck
            .optimizer
            .ok_or_else(|| Error::CheckpointFormat("checkpoint has no optimizer state".into()))?;
        (ck.model, opt, ck.state)
    } else {
        let model = FusionModel::new(cfg.fusion_config(stack.dims())?, cfg.seed)?;
        let opt = Adam::new(&model.params, cfg.adam_betas, cfg.adam_eps);
        fs::write(&log_path, format!("{LOG_HEADER}\n"))?;
        (model, opt, TrainState::new(cfg.seed))
    };
    let mut log = BufWriter::new(fs::OpenOptions::new().append(true).create(true).open(&log_path)?);
    let state = fit(&mut model, &mut optimizer, &train_set, &val_set, &cfg, state, Some(&paths), &mut log)?;
    log.flush()?;
    match state.best_epoch {
        Some(e) => println!("best val macro-F1 {:.4} at epoch {e}", state.best_val_f1),
        None => println!("no epochs run"),
    }
    Ok(())
}

fn encode_items_for(
    stack: &EncoderStack,
    records: &[ManifestRecord],
    rows: &[usize],
    base: &Path,
    opts: &EncodeOptions,
) -> cer_core::Result<cer_core::pipeline::Encoded> {
    let paths: Vec<PathBuf> = rows.iter().map(|&i| records[i].image_path.clone()).collect();
    encode_items(stack, &paths, rows, records.len(), base, opts)
}

fn model_stack(ck: &Checkpoint, encoders: &Option<String>) -> CliResult<EncoderStack> {
    let list = encoders.clone().unwrap_or_else(|| ck.train_config.encoders.join(", "));
    let stack = EncoderStack::parse(&EncoderRegistry::with_builtins(), &list)?;
    check_stack(&stack, &ck.model)?;
    Ok(stack)
}

/// Compound probabilities of a checkpoint for the given items, plus per-item
/// load errors.
fn checkpoint_probs(
    ck: &Checkpoint,
    encoders: &Option<String>,
    paths: &[PathBuf],
    rows: &[usize],
    total: usize,
    base: &Path,
) -> CliResult<(Array2<f64>, Vec<Option<String>>)> {
    let stack = model_stack(ck, encoders)?;
    let opts = EncodeOptions {
        batch_size: ck.train_config.batch_size,
        ..EncodeOptions::eval()
    };
    let enc = encode_items(&stack, paths, rows, total, base, &opts)?;
    let probs = predict_probs(&ck.model, &enc.original, 1024)?;
    Ok((probs, enc.errors))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

const FILE_SUM_TOL: f64 = 1e-4;

struct Selection {
    records: Vec<ManifestRecord>,
    rows: Vec<usize>,
    base: PathBuf,
}

impl Selection {
    fn load(manifest: &Path, split: &Option<String>) -> CliResult<Self> {
        let records = load_manifest(manifest, &SchemaSet::unified())?;
        let rows: Vec<usize> = rows_for(&records, parse_split(split)?)
            .into_iter()
            .filter(|&i| records[i].compound_label().is_some())
            .collect();
        if rows.is_empty() {
            return Err(Error::Config("no compound-labelled records selected".into()).into());
        }
        Ok(Self {
            records,
            rows,
            base: base_dir(manifest),
        })
    }

    fn paths(&self) -> Vec<PathBuf> {
        self.rows.iter().map(|&i| self.records[i].image_path.clone()).collect()
    }

    fn labels(&self) -> Vec<Option<usize>> {
        self.rows.iter().map(|&i| self.records[i].compound_label()).collect()
    }

    fn member_probs(&self, member: &Path, encoders: &Option<String>) -> CliResult<Array2<f64>> {
        let is_csv = member.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let (probs, errors) = if is_csv {
            self.file_probs(member)?
        } else {
            let ck = resume(member)?;
            checkpoint_probs(&ck, encoders, &self.paths(), &self.rows, self.records.len(), &self.base)?
        };
        if let Some((i, Some(e))) = errors.iter().enumerate().find(|(_, e)| e.is_some()) {
            return Err(Error::Decode {
                path: self.records[self.rows[i]].image_path.clone(),
                message: e.clone(),
            }
            .into());
        }
        Ok(probs)
    }

    /// Probabilities from a prediction file, matched to records by item id.
    fn file_probs(&self, path: &Path) -> CliResult<(Array2<f64>, Vec<Option<String>>)> {
        let preds = read_predictions(BufReader::new(fs::File::open(path)?), path)?;
        let by_id: HashMap<&str, _> = preds.iter().map(|p| (p.item_id.as_str(), p.probs)).collect();
        let mut probs = Array2::zeros((self.rows.len(), 7));
        let mut errors = vec![None; self.rows.len()];
        for (k, &i) in self.rows.iter().enumerate() {
            let id = self.records[i].image_path.display().to_string();
            match by_id.get(id.as_str()) {
                Some(Some(p)) => {
                    // Rows are rounded to 6 decimals on disk.
                    let sum: f64 = p.iter().sum();
                    if (sum - 1.0).abs() > FILE_SUM_TOL || p.iter().any(|v| v.is_nan() || *v < 0.0) {
                        return Err(Error::InvalidDistribution(format!("{id} in {}", path.display())).into());
                    }
                    probs.row_mut(k).assign(&ndarray::aview1(p).mapv(|v| v / sum));
                }
                Some(None) => errors[k] = Some(format!("{id} is an ERROR row in {}", path.display())),
                None => errors[k] = Some(format!("{id} missing from {}", path.display())),
            }
        }
        Ok((probs, errors))
    }
}

fn report(probs: &Array2<f64>, labels: &[Option<usize>]) -> CliResult<EvalReport> {
    Ok(report_from_probs(probs, labels)?)
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let sel = Selection::load(&args.manifest, &args.split)?;
    let probs = sel.member_probs(&args.checkpoint, &args.encoders)?;
    let r = report(&probs, &sel.labels())?;
    let name = args.name.clone().unwrap_or_else(|| stem(&args.checkpoint));
    print!("{}", render_report(std::slice::from_ref(&r), &[name.as_str()])?);
    if let Some(path) = &args.tsv {
        fs::write(path, render_tsv(&r))?;
    }
    Ok(())
}

pub fn ensemble_eval(args: &EnsembleEvalArgs) -> CliResult<()> {
    let weights = args.weights.clone().unwrap_or_else(|| vec![1.0; args.members.len()]);
    if weights.len() != args.members.len() {
        return Err(CliError::Usage(format!(
            "{} weights given for {} members",
            weights.len(),
            args.members.len()
        )));
    }
    let sel = Selection::load(&args.manifest, &args.split)?;
    let labels = sel.labels();
    let members: Vec<Array2<f64>> = args
        .members
        .iter()
        .map(|m| sel.member_probs(m, &args.encoders))
        .collect::<CliResult<_>>()?;
    let views: Vec<_> = members.iter().map(|m| m.view()).collect();
    let fused = fuse_probs(&views, &weights)?;
    let mut reports = Vec::new();
    let mut names = Vec::new();
    for (m, path) in members.iter().zip(&args.members) {
        reports.push(report(m, &labels)?);
        names.push(stem(path));
    }
    if members.len() > 1 {
        reports.push(report(&fused, &labels)?);
        names.push("Ensemble".into());
    }
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    print!("{}", render_report(&reports, &names)?);
    Ok(())
}

pub fn predict(args: &PredictArgs) -> CliResult<()> {
    let weights = args.weights.clone().unwrap_or_else(|| vec![1.0; args.checkpoints.len()]);
    if weights.len() != args.checkpoints.len() {
        return Err(CliError::Usage(format!(
            "{} weights given for {} checkpoints",
            weights.len(),
            args.checkpoints.len()
        )));
    }
    let (ids, paths, base) = match (&args.frames, &args.manifest) {
        (Some(dir), _) => {
            let (ids, paths): (Vec<String>, Vec<PathBuf>) = list_frames(dir)?.into_iter().unzip();
            (ids, paths, PathBuf::new())
        }
        (None, Some(manifest)) => {
            let records = load_manifest(manifest, &SchemaSet::unified())?;
            let paths: Vec<PathBuf> = records.iter().map(|r| r.image_path.clone()).collect();
            let ids = paths.iter().map(|p| p.display().to_string()).collect();
            (ids, paths, base_dir(manifest))
        }
        (None, None) => return Err(CliError::Usage("either --frames or --manifest is required".into())),
    };
    let rows: Vec<usize> = (0..paths.len()).collect();
    let mut member_probs = Vec::new();
    let mut errors: Vec<Option<String>> = vec![None; paths.len()];
    for path in &args.checkpoints {
        let ck = resume(path)?;
        let (probs, errs) = checkpoint_probs(&ck, &args.encoders, &paths, &rows, paths.len(), &base)?;
        for (slot, e) in errors.iter_mut().zip(errs) {
            if slot.is_none() {
                *slot = e;
            }
        }
        member_probs.push(probs);
    }
    let views: Vec<_> = member_probs.iter().map(|m| m.view()).collect();
    let probs = if views.is_empty() { Array2::zeros((0, 7)) } else { safe_fuse(&views, &weights, &errors)? };
    for (id, e) in ids.iter().zip(&errors) {
        if let Some(e) = e {
            log::warn!("{id}: {e}");
        }
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(fs::File::create(&args.out)?);
    write_predictions(&mut out, &prediction_records(&ids, &probs, &errors))?;
    out.flush()?;
    let failed = errors.iter().filter(|e| e.is_some()).count();
    println!("wrote {} predictions ({failed} errors) to {}", ids.len(), args.out.display());
    Ok(())
}

/// Fuses member outputs; rows of failed items are replaced by a uniform
/// placeholder first so they cannot fail validation. Those rows are written
/// as `ERROR` regardless.
fn safe_fuse(
    members: &[ndarray::ArrayView2<'_, f64>],
    weights: &[f64],
    errors: &[Option<String>],
) -> CliResult<Array2<f64>> {
    let patched: Vec<Array2<f64>> = members
        .iter()
        .map(|m| {
            let mut m = m.to_owned();
            for (mut row, e) in m.axis_iter_mut(Axis(0)).zip(errors) {
                if e.is_some() {
                    row.fill(1.0 / 7.0);
                }
            }
            m
        })
        .collect();
    let views: Vec<_> = patched.iter().map(|m| m.view()).collect();
    Ok(fuse_probs(&views, weights)?)
}
