//! Glue between manifests, images, encoders and the fusion model: feature
//! extraction (live or from caches) and prediction files.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Axis};

use crate::dataset::{augment_pair, eval_view, load_image, AugmentationConfig, Image, ManifestRecord};
use crate::encoders::{encode_batch, read_feature_cache, Encoder, EncoderRef, EncoderRegistry, ImageBatch};
use crate::error::{Error, Result};
use crate::ensemble::predict;
use crate::taxonomy::{CompoundExpression, NUM_COMPOUND};
use crate::trainer::FeatureSet;

enum Source {
    Live(Box<dyn Encoder>),
    /// Cached rows: `N` originals, optionally followed by `N` first views and
    /// `N` second views.
    Cached(Array2<f32>),
}

/// The ordered encoders feeding the fusion model.
pub struct EncoderStack {
    names: Vec<String>,
    dims: Vec<usize>,
    sources: Vec<Source>,
}

impl EncoderStack {
    /// Builds each reference; a `cache=<path>` argument reads a feature
    /// cache instead of running the encoder.
    pub fn build(registry: &EncoderRegistry, refs: &[EncoderRef]) -> Result<Self> {
        let mut stack = Self {
            names: Vec::new(),
            dims: Vec::new(),
            sources: Vec::new(),
        };
        for r in refs {
            let mut identity = r.clone();
            let cache = identity.args.remove("cache");
            let (dim, source) = match cache {
                Some(path) => {
                    if registry.spec(&r.name).is_none() {
                        return Err(Error::UnknownEncoder(r.name.clone()));
                    }
                    let batch = read_feature_cache(Path::new(&path), identity.to_string())?;
                    (batch.dim(), Source::Cached(batch.features))
                }
                None => {
                    let enc = registry.build(r)?;
                    (enc.spec().output_dim, Source::Live(enc))
                }
            };
            stack.names.push(identity.to_string());
            stack.dims.push(dim);
            stack.sources.push(source);
        }
        if stack.sources.is_empty() {
            return Err(Error::Config("no encoders given".into()));
        }
        Ok(stack)
    }

    pub fn parse(registry: &EncoderRegistry, list: &str) -> Result<Self> {
        Self::build(registry, &EncoderRef::parse_list(list)?)
    }

    /// Encoder identities (references without the `cache` argument).
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn resolution(&self) -> Result<Option<usize>> {
        let mut res = None;
        for s in &self.sources {
            if let Source::Live(enc) = s {
                match (res, enc.input_resolution()) {
                    (None, r) => res = r,
                    (Some(a), Some(b)) if a != b => {
                        return Err(Error::ShapeMismatch(format!(
                            "encoders disagree on input resolution ({a} vs {b})"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(res)
    }

    fn needs_images(&self) -> bool {
        self.sources.iter().any(|s| matches!(s, Source::Live(_)))
    }

    /// True when every source can supply augmented views for a manifest of
    /// `total` records.
    pub fn has_views(&self, total: usize) -> bool {
        self.sources.iter().all(|s| match s {
            Source::Live(_) => true,
            Source::Cached(rows) => rows.nrows() == 3 * total,
        })
    }

    fn check_cache_rows(&self, total: usize) -> Result<()> {
        for (name, s) in self.names.iter().zip(&self.sources) {
            if let Source::Cached(rows) = s {
                if rows.nrows() != total && rows.nrows() != 3 * total {
                    return Err(Error::CacheFormat(format!(
                        "cache for {name} has {} rows; expected {total} or {}",
                        rows.nrows(),
                        3 * total
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fused features per requested record. Rows whose image failed to load are
/// zero and carry an error message.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub original: Array2<f64>,
    pub views: Option<(Array2<f64>, Array2<f64>)>,
    pub errors: Vec<Option<String>>,
}

impl Encoded {
    pub fn first_error(&self) -> Option<&str> {
        self.errors.iter().flatten().next().map(String::as_str)
    }

    pub fn feature_set(&self, records: &[&ManifestRecord]) -> FeatureSet {
        FeatureSet {
            original: self.original.clone(),
            views: self.views.clone(),
            basic: records.iter().map(|r| r.basic_label()).collect(),
            compound: records.iter().map(|r| r.compound_label()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncodeOptions {
    pub augmentation: AugmentationConfig,
    pub with_views: bool,
    pub seed: u64,
    pub batch_size: usize,
}

impl EncodeOptions {
    /// No views; originals get the same resize and normalization as
    /// during training.
    pub fn eval() -> Self {
        Self {
            augmentation: AugmentationConfig::standard(224),
            with_views: false,
            seed: 0,
            batch_size: 64,
        }
    }
}

fn view_seed(seed: u64, row: usize) -> u64 {
    seed ^ (row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Encodes the images at `paths`, where `rows[i]` is the position of item
/// `i` in the full list of `total` items (used to index feature caches).
/// Relative paths are resolved against `base`.
pub fn encode_items(
    stack: &EncoderStack,
    paths: &[PathBuf],
    rows: &[usize],
    total: usize,
    base: &Path,
    opts: &EncodeOptions,
) -> Result<Encoded> {
    if paths.len() != rows.len() {
        return Err(Error::LengthMismatch {
            left: paths.len(),
            right: rows.len(),
        });
    }
    encode_with(stack, rows, total, opts, |i| {
        let path = if paths[i].is_absolute() { paths[i].clone() } else { base.join(&paths[i]) };
        load_image(&path)
    })
}

/// Encodes in-memory images; item `i` is row `i` of any feature cache.
pub fn encode_images(stack: &EncoderStack, images: &[Image], opts: &EncodeOptions) -> Result<Encoded> {
    let rows: Vec<usize> = (0..images.len()).collect();
    encode_with(stack, &rows, images.len(), opts, |i| Ok(images[i].clone()))
}

fn encode_with(
    stack: &EncoderStack,
    rows: &[usize],
    total: usize,
    opts: &EncodeOptions,
    load: impl Fn(usize) -> Result<Image>,
) -> Result<Encoded> {
    stack.check_cache_rows(total)?;
    let with_views = opts.with_views && stack.has_views(total);
    let mut aug = opts.augmentation.clone();
    if let Some(res) = stack.resolution()? {
        aug.resolution = res;
    }
    let n = rows.len();
    let mut errors = vec![None; n];
    let mut blocks: [Vec<Array2<f64>>; 3] = Default::default();

    for source in &stack.sources {
        if let Source::Cached(cache) = source {
            let pick = |offset: usize| -> Array2<f64> {
                let idx: Vec<usize> = rows.iter().map(|r| r + offset).collect();
                cache.select(Axis(0), &idx).mapv(f64::from)
            };
            blocks[0].push(pick(0));
            if with_views {
                blocks[1].push(pick(total));
                blocks[2].push(pick(2 * total));
            }
            continue;
        }
        blocks[0].push(Array2::zeros((0, 0)));
        if with_views {
            blocks[1].push(Array2::zeros((0, 0)));
            blocks[2].push(Array2::zeros((0, 0)));
        }
    }

    if stack.needs_images() {
        let res = aug.resolution;
        let mut live: [Vec<Array2<f64>>; 3] = Default::default();
        let live_dims: Vec<usize> = stack
            .sources
            .iter()
            .zip(&stack.dims)
            .filter(|(s, _)| matches!(s, Source::Live(_)))
            .map(|(_, d)| *d)
            .collect();
        for buf in live.iter_mut() {
            *buf = live_dims.iter().map(|d| Array2::zeros((n, *d))).collect();
        }
        let step = opts.batch_size.max(1);
        for start in (0..n).step_by(step) {
            let end = (start + step).min(n);
            let mut views: [Vec<Image>; 3] = Default::default();
            for i in start..end {
                let prepared = load(i).and_then(|img| {
                    let orig = eval_view(&img, &aug)?;
                    let pair = if with_views { Some(augment_pair(&img, &aug, view_seed(opts.seed, rows[i]))?) } else { None };
                    Ok((orig, pair))
                });
                let (orig, pair) = match prepared {
                    Ok(p) => p,
                    Err(e) => {
                        errors[i] = Some(e.to_string());
                        let blank = Image::zeros((res, res, 3));
                        let pair = with_views.then(|| (blank.clone(), blank.clone()));
                        (blank, pair)
                    }
                };
                views[0].push(orig);
                if let Some((a, b)) = pair {
                    views[1].push(a);
                    views[2].push(b);
                }
            }
            for (k, imgs) in views.iter().enumerate() {
                if imgs.is_empty() {
                    continue;
                }
                let batch = ImageBatch::from_images(imgs)?;
                let mut li = 0;
                for source in &stack.sources {
                    if let Source::Live(enc) = source {
                        let out = encode_batch(enc.as_ref(), &batch)?;
                        live[k][li]
                            .slice_mut(s![start..end, ..])
                            .assign(&out.features.mapv(f64::from));
                        li += 1;
                    }
                }
            }
        }
        for (k, mut bufs) in live.into_iter().enumerate() {
            bufs.reverse();
            for (slot, source) in blocks[k].iter_mut().zip(&stack.sources) {
                if matches!(source, Source::Live(_)) {
                    if let Some(b) = bufs.pop() {
                        *slot = b;
                    }
                }
            }
        }
    }

    let fuse = |parts: &[Array2<f64>]| -> Array2<f64> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(1), &views).expect("row counts agree")
    };
    let original = fuse(&blocks[0]);
    let views = with_views.then(|| (fuse(&blocks[1]), fuse(&blocks[2])));
    Ok(Encoded {
        original,
        views,
        errors,
    })
}

/// Encodes the manifest records at positions `indices`.
pub fn encode_records(
    stack: &EncoderStack,
    records: &[ManifestRecord],
    indices: &[usize],
    base: &Path,
    opts: &EncodeOptions,
) -> Result<Encoded> {
    let paths: Vec<PathBuf> = indices.iter().map(|&i| records[i].image_path.clone()).collect();
    encode_items(stack, &paths, indices, records.len(), base, opts)
}

pub const PREDICTION_HEADER: &str = "item_id,predicted_class,p0,p1,p2,p3,p4,p5,p6";
pub const ERROR_CLASS: &str = "ERROR";

/// One prediction line; `probs` is `None` for items that failed to load.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub item_id: String,
    pub probs: Option<[f64; NUM_COMPOUND]>,
}

impl PredictionRecord {
    pub fn predicted(&self) -> Option<CompoundExpression> {
        let p = self.probs?;
        let idx = predict(ndarray::aview2(&[p]))[0];
        Some(CompoundExpression::ALL[idx])
    }
}

/// Pairs item ids with probability rows, marking failed items.
pub fn prediction_records(ids: &[String], probs: &Array2<f64>, errors: &[Option<String>]) -> Vec<PredictionRecord> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| PredictionRecord {
            item_id: id.clone(),
            probs: match errors.get(i) {
                Some(Some(_)) => None,
                _ => {
                    let mut row = [0.0; NUM_COMPOUND];
                    row.iter_mut().zip(probs.row(i)).for_each(|(d, s)| *d = *s);
                    Some(row)
                }
            },
        })
        .collect()
}

pub fn write_predictions(out: &mut dyn Write, records: &[PredictionRecord]) -> Result<()> {
    writeln!(out, "{PREDICTION_HEADER}")?;
    for r in records {
        if r.item_id.contains(',') || r.item_id.contains('\n') {
            return Err(Error::Config(format!("item id `{}` contains a separator", r.item_id)));
        }
        match (r.probs, r.predicted()) {
            (Some(p), Some(class)) => {
                let cells: Vec<String> = p.iter().map(|v| format!("{v:.6}")).collect();
                writeln!(out, "{},{},{}", r.item_id, class.name(), cells.join(","))?;
            }
            _ => writeln!(out, "{},{ERROR_CLASS},,,,,,,", r.item_id)?,
        }
    }
    Ok(())
}

/// Parses a prediction file. `ERROR` rows come back with `probs == None`.
pub fn read_predictions(input: impl Read, origin: &Path) -> Result<Vec<PredictionRecord>> {
    let err = |line: u64, message: String| Error::ManifestParse {
        path: origin.to_path_buf(),
        line: line as usize,
        message,
    };
    let mut rows = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input)
        .into_records();
    let header = rows
        .next()
        .transpose()
        .map_err(|e| err(1, e.to_string()))?
        .unwrap_or_default();
    if header.iter().collect::<Vec<_>>().join(",") != PREDICTION_HEADER {
        return Err(err(1, format!("expected header `{PREDICTION_HEADER}`")));
    }
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 2 + NUM_COMPOUND {
            return Err(err(line, format!("expected {} fields, got {}", 2 + NUM_COMPOUND, row.len())));
        }
        let probs = if &row[1] == ERROR_CLASS {
            None
        } else {
            let mut p = [0.0; NUM_COMPOUND];
            for (dst, cell) in p.iter_mut().zip(row.iter().skip(2)) {
                *dst = cell.parse().map_err(|_| err(line, format!("bad probability `{cell}`")))?;
            }
            Some(p)
        };
        out.push(PredictionRecord {
            item_id: row[0].to_string(),
            probs,
        });
    }
    Ok(out)
}

/// Image files under `dir`, one level of subdirectories deep (one per
/// video), sorted. Item ids are `video/frame` for nested frames and the
/// file stem otherwise.
pub fn list_frames(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    fn is_image(p: &Path) -> bool {
        matches!(
            p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("png" | "jpg" | "jpeg")
        )
    }
    fn sorted(dir: &Path) -> Result<Vec<PathBuf>> {
        let mut entries = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?;
        entries.sort();
        Ok(entries)
    }
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut out = Vec::new();
    for entry in sorted(dir)? {
        if entry.is_dir() {
            let video = entry.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            for frame in sorted(&entry)? {
                if frame.is_file() && is_image(&frame) {
                    out.push((format!("{video}/{}", stem(&frame)), frame));
                }
            }
        } else if is_image(&entry) {
            out.push((stem(&entry), entry));
        }
    }
    Ok(out)
}
