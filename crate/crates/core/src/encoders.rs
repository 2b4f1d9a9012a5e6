//! Feature extractors behind a uniform interface, a name-keyed registry and
//! the `CERF` binary feature cache.
//!
//! Pretrained backbones (`posterv2`, `resnet50`, `resnet18`) are registered
//! with their embedding widths but carry no weights; their embeddings are
//! supplied as precomputed feature caches. `toy-mlp` is a self-contained
//! two-layer dense encoder over flattened pixels.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Image;
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"CERF";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub name: String,
    pub output_dim: usize,
    pub weights_source: Option<PathBuf>,
    pub trainable: bool,
}

impl EncoderSpec {
    pub fn new(name: impl Into<String>, output_dim: usize) -> Self {
        Self {
            name: name.into(),
            output_dim,
            weights_source: None,
            trainable: false,
        }
    }
}

/// `B x 3 x H x W` pixel batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pixels: Array4<f32>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f32>) -> Result<Self> {
        let (b, c, h, w) = pixels.dim();
        if b == 0 || c != 3 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image batch must be Bx3xHxW with B >= 1, got {b}x{c}x{h}x{w}"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("image batch has non-finite values".into()));
        }
        Ok(Self { pixels })
    }

    /// Stacks `H x W x 3` images into channel-first layout.
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::ShapeMismatch("empty image batch".into()))?;
        let (h, w, _) = first.dim();
        let mut pixels = Array4::zeros((images.len(), 3, h, w));
        for (i, img) in images.iter().enumerate() {
            if img.dim() != (h, w, 3) {
                return Err(Error::ShapeMismatch(format!(
                    "image {i} is {:?}, expected ({h}, {w}, 3)",
                    img.dim()
                )));
            }
            let chw = img.view().permuted_axes([2, 0, 1]);
            pixels.index_axis_mut(Axis(0), i).assign(&chw);
        }
        Self::new(pixels)
    }

    pub fn batch_size(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, _, h, w) = self.pixels.dim();
        (h, w)
    }

    pub fn pixels(&self) -> &Array4<f32> {
        &self.pixels
    }

    /// Row-per-image flattening in C, H, W order.
    pub fn flattened(&self) -> Array2<f32> {
        let (b, c, h, w) = self.pixels.dim();
        self.pixels
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, c * h * w))
            .expect("standard layout reshape")
    }
}

/// `B x D` embeddings produced by one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub encoder_name: String,
    pub features: Array2<f32>,
}

impl FeatureBatch {
    pub fn new(encoder_name: impl Into<String>, features: Array2<f32>) -> Self {
        Self {
            encoder_name: encoder_name.into(),
            features,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

pub trait Encoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    /// Expected square input side, if the encoder has one.
    fn input_resolution(&self) -> Option<usize> {
        None
    }

    fn encode(&self, batch: &ImageBatch) -> Result<Array2<f32>>;
}

/// Runs `encoder` on `batch` and checks the `B x D` output contract.
pub fn encode_batch(encoder: &dyn Encoder, batch: &ImageBatch) -> Result<FeatureBatch> {
    let spec = encoder.spec();
    if let Some(res) = encoder.input_resolution() {
        if batch.resolution() != (res, res) {
            return Err(Error::ShapeMismatch(format!(
                "encoder `{}` expects {res}x{res} input, got {:?}",
                spec.name,
                batch.resolution()
            )));
        }
    }
    let features = encoder.encode(batch)?;
    if features.dim() != (batch.batch_size(), spec.output_dim) {
        return Err(Error::ShapeMismatch(format!(
            "encoder `{}` produced {:?}, declared {}x{}",
            spec.name,
            features.dim(),
            batch.batch_size(),
            spec.output_dim
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::ShapeMismatch(format!(
            "encoder `{}` produced non-finite features",
            spec.name
        )));
    }
    Ok(FeatureBatch::new(spec.name.clone(), features))
}

/// Builder arguments, parsed from `name(key=value,...)`.
pub type EncoderArgs = BTreeMap<String, String>;

pub type EncoderBuilder =
    Arc<dyn Fn(&EncoderSpec, &EncoderArgs) -> Result<Box<dyn Encoder>> + Send + Sync>;

/// A parsed encoder reference such as `toy-mlp(dim=16,seed=3)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderRef {
    pub name: String,
    pub args: EncoderArgs,
}

impl EncoderRef {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let bad = || Error::Config(format!("bad encoder reference `{text}`"));
        let (name, args) = match text.find('(') {
            Some(open) => {
                let inner = text[open + 1..].strip_suffix(')').ok_or_else(bad)?;
                let mut args = EncoderArgs::new();
                for pair in inner.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    let (k, v) = pair.split_once('=').ok_or_else(bad)?;
                    args.insert(k.trim().to_string(), v.trim().to_string());
                }
                (text[..open].trim(), args)
            }
            None => (text, EncoderArgs::new()),
        };
        if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == ',') {
            return Err(bad());
        }
        Ok(Self {
            name: name.to_string(),
            args,
        })
    }

    /// Splits a comma-separated list, ignoring commas inside parentheses.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let mut depth = 0i32;
        let mut start = 0;
        for (i, c) in text.char_indices() {
            match c {
                '(' => depth += 1,
                ')' => depth -= 1,
                ',' if depth == 0 => {
                    out.push(Self::parse(&text[start..i])?);
                    start = i + 1;
                }
                _ => {}
            }
        }
        if !text[start..].trim().is_empty() {
            out.push(Self::parse(&text[start..])?);
        }
        Ok(out)
    }

    pub fn arg<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        parse_arg(&self.args, key)
    }
}

impl fmt::Display for EncoderRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)?;
        if !self.args.is_empty() {
            let args: Vec<String> = self.args.iter().map(|(k, v)| format!("{k}={v}")).collect();
            write!(f, "({})", args.join(","))?;
        }
        Ok(())
    }
}

fn parse_arg<T: std::str::FromStr>(args: &EncoderArgs, key: &str) -> Result<Option<T>> {
    args.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for encoder argument `{key}`")))
        })
        .transpose()
}

struct Entry {
    spec: EncoderSpec,
    builder: EncoderBuilder,
}

/// Name-keyed encoder constructors. Populated at startup, read-only after.
#[derive(Default)]
pub struct EncoderRegistry {
    entries: BTreeMap<String, Entry>,
}

impl EncoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        for (name, dim) in [("posterv2", 768), ("resnet50", 2048), ("resnet18", 512)] {
            reg.register_encoder(EncoderSpec::new(name, dim), Arc::new(build_pretrained))
                .expect("builtin names are distinct");
        }
        reg.register_encoder(EncoderSpec::new("toy-mlp", 8), Arc::new(build_toy_mlp))
            .expect("builtin names are distinct");
        reg
    }

    pub fn register_encoder(&mut self, spec: EncoderSpec, builder: EncoderBuilder) -> Result<&EncoderSpec> {
        if self.entries.contains_key(&spec.name) {
            return Err(Error::DuplicateEncoder(spec.name));
        }
        let name = spec.name.clone();
        let entry = self.entries.entry(name).or_insert(Entry { spec, builder });
        Ok(&entry.spec)
    }

    pub fn spec(&self, name: &str) -> Option<&EncoderSpec> {
        self.entries.get(name).map(|e| &e.spec)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn build(&self, reference: &EncoderRef) -> Result<Box<dyn Encoder>> {
        let entry = self
            .entries
            .get(&reference.name)
            .ok_or_else(|| Error::UnknownEncoder(reference.name.clone()))?;
        (entry.builder)(&entry.spec, &reference.args)
    }
}

/// Declared backbone without loaded weights.
struct PretrainedStub {
    spec: EncoderSpec,
}

impl Encoder for PretrainedStub {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, _batch: &ImageBatch) -> Result<Array2<f32>> {
        Err(Error::WeightsNotLoaded(self.spec.name.clone()))
    }
}

fn build_pretrained(spec: &EncoderSpec, args: &EncoderArgs) -> Result<Box<dyn Encoder>> {
    let mut spec = spec.clone();
    spec.weights_source = args.get("weights").map(PathBuf::from);
    Ok(Box::new(PretrainedStub { spec }))
}

fn build_toy_mlp(spec: &EncoderSpec, args: &EncoderArgs) -> Result<Box<dyn Encoder>> {
    let dim = parse_arg(args, "dim")?.unwrap_or(spec.output_dim);
    let hidden = parse_arg(args, "hidden")?.unwrap_or(32);
    let res = parse_arg(args, "res")?.unwrap_or(224);
    let seed = parse_arg(args, "seed")?.unwrap_or(0);
    let zero = parse_arg(args, "zero")?.unwrap_or(false);
    let mut spec = spec.clone();
    spec.output_dim = dim;
    let enc = if zero {
        ToyMlp::zeros(spec, res, hidden)
    } else {
        ToyMlp::seeded(spec, res, hidden, seed)
    };
    Ok(Box::new(enc?))
}

/// `tanh(x W1 + b1) W2 + b2` over flattened `3 x res x res` pixels.
#[derive(Debug, Clone)]
pub struct ToyMlp {
    spec: EncoderSpec,
    resolution: usize,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ToyMlp {
    fn check(dim: usize, res: usize, hidden: usize) -> Result<()> {
        if dim == 0 || res == 0 || hidden == 0 {
            return Err(Error::Config(
                "toy-mlp dim, res and hidden must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn zeros(spec: EncoderSpec, resolution: usize, hidden: usize) -> Result<Self> {
        Self::check(spec.output_dim, resolution, hidden)?;
        let input = 3 * resolution * resolution;
        Ok(Self {
            w1: Array2::zeros((input, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, spec.output_dim)),
            b2: Array1::zeros(spec.output_dim),
            spec,
            resolution,
        })
    }

    /// Uniform weights with unit-variance fan-in scaling; zero biases.
    pub fn seeded(spec: EncoderSpec, resolution: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut enc = Self::zeros(spec, resolution, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in [&mut enc.w1, &mut enc.w2] {
            let bound = (3.0 / w.nrows() as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(enc)
    }
}

impl Encoder for ToyMlp {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn input_resolution(&self) -> Option<usize> {
        Some(self.resolution)
    }

    fn encode(&self, batch: &ImageBatch) -> Result<Array2<f32>> {
        let x = batch.flattened().mapv(f64::from);
        let h = (x.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let out = h.dot(&self.w2) + &self.b2;
        Ok(out.mapv(|v| v as f32))
    }
}

/// Row count and width of a feature cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheHeader {
    pub rows: u32,
    pub dim: u32,
}

/// Streams feature batches into a `CERF` file, patching the row count on
/// [`finish`](Self::finish).
pub struct FeatureCacheWriter<W: Write + Seek> {
    out: W,
    dim: usize,
    rows: u64,
}

impl<W: Write + Seek> FeatureCacheWriter<W> {
    pub fn new(mut out: W, dim: usize) -> Result<Self> {
        let dim32 = u32::try_from(dim).map_err(|_| Error::CacheFormat("dim too large".into()))?;
        out.write_all(CACHE_MAGIC)?;
        out.write_all(&CACHE_VERSION.to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        out.write_all(&dim32.to_le_bytes())?;
        Ok(Self { out, dim, rows: 0 })
    }

    pub fn write_rows(&mut self, rows: &Array2<f32>) -> Result<()> {
        if rows.ncols() != self.dim {
            return Err(Error::CacheFormat(format!(
                "batch width {} differs from cache width {}",
                rows.ncols(),
                self.dim
            )));
        }
        for v in rows.iter() {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.rows += rows.nrows() as u64;
        Ok(())
    }

    pub fn write_batch(&mut self, batch: &FeatureBatch) -> Result<()> {
        self.write_rows(&batch.features)
    }

    pub fn finish(mut self) -> Result<W> {
        let rows = u32::try_from(self.rows)
            .map_err(|_| Error::CacheFormat("too many rows for a u32 count".into()))?;
        self.out.seek(SeekFrom::Start(8))?;
        self.out.write_all(&rows.to_le_bytes())?;
        self.out.seek(SeekFrom::End(0))?;
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_feature_cache<'a>(
    path: &Path,
    dim: usize,
    batches: impl IntoIterator<Item = &'a FeatureBatch>,
) -> Result<()> {
    let mut writer = FeatureCacheWriter::new(BufWriter::new(fs::File::create(path)?), dim)?;
    for batch in batches {
        writer.write_batch(batch)?;
    }
    writer.finish()?;
    Ok(())
}

pub fn write_feature_matrix(path: &Path, features: &Array2<f32>) -> Result<()> {
    let mut writer =
        FeatureCacheWriter::new(BufWriter::new(fs::File::create(path)?), features.ncols())?;
    writer.write_rows(features)?;
    writer.finish()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::CacheFormat("truncated header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads and validates the 16-byte header.
pub fn read_cache_header(r: &mut impl Read) -> Result<CacheHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::CacheFormat("truncated header".into()))?;
    if &magic != CACHE_MAGIC {
        return Err(Error::CacheFormat(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != CACHE_VERSION {
        return Err(Error::CacheFormat(format!("unsupported version {version}")));
    }
    let rows = read_u32(r)?;
    let dim = read_u32(r)?;
    if dim == 0 {
        return Err(Error::CacheFormat("zero width".into()));
    }
    Ok(CacheHeader { rows, dim })
}

/// Reads a cache in batches of at most `batch_rows` rows.
pub struct FeatureCacheReader<R: Read> {
    input: R,
    header: CacheHeader,
    remaining: usize,
    name: String,
}

impl<R: Read> FeatureCacheReader<R> {
    pub fn new(mut input: R, name: impl Into<String>) -> Result<Self> {
        let header = read_cache_header(&mut input)?;
        Ok(Self {
            input,
            header,
            remaining: header.rows as usize,
            name: name.into(),
        })
    }

    pub fn header(&self) -> CacheHeader {
        self.header
    }

    pub fn next_batch(&mut self, batch_rows: usize) -> Result<Option<FeatureBatch>> {
        if self.remaining == 0 {
            let mut probe = [0u8; 1];
            if self.input.read(&mut probe)? != 0 {
                return Err(Error::CacheFormat("trailing bytes after payload".into()));
            }
            return Ok(None);
        }
        let n = batch_rows.max(1).min(self.remaining);
        let dim = self.header.dim as usize;
        let mut bytes = vec![0u8; n * dim * 4];
        self.input.read_exact(&mut bytes).map_err(|_| {
            Error::CacheFormat(format!(
                "truncated payload: expected {} rows of width {dim}",
                self.header.rows
            ))
        })?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.remaining -= n;
        let features = Array2::from_shape_vec((n, dim), values).expect("sized buffer");
        Ok(Some(FeatureBatch::new(self.name.clone(), features)))
    }
}

/// Reads a whole cache into one batch named `name`.
pub fn read_feature_cache(path: &Path, name: impl Into<String>) -> Result<FeatureBatch> {
    let mut reader = FeatureCacheReader::new(BufReader::new(fs::File::open(path)?), name)?;
    let header = reader.header();
    let mut all = Array2::zeros((0, header.dim as usize));
    while let Some(batch) = reader.next_batch(4096)? {
        all.append(Axis(0), batch.features.view())
            .expect("equal widths");
    }
    Ok(FeatureBatch::new(reader.name, all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::io::Cursor;

    fn toy(dim: usize, res: usize, seed: u64) -> Box<dyn Encoder> {
        let reg = EncoderRegistry::with_builtins();
        let r = EncoderRef::parse(&format!("toy-mlp(dim={dim},res={res},seed={seed},hidden=6)"))
            .unwrap();
        reg.build(&r).unwrap()
    }

    fn batch(b: usize, res: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = Array4::from_shape_fn((b, 3, res, res), |_| rng.random_range(-1.0f32..1.0));
        ImageBatch::new(px).unwrap()
    }

    #[test]
    fn builtin_dims() {
        let reg = EncoderRegistry::with_builtins();
        assert_eq!(reg.spec("posterv2").unwrap().output_dim, 768);
        assert_eq!(reg.spec("resnet50").unwrap().output_dim, 2048);
        assert_eq!(reg.spec("resnet18").unwrap().output_dim, 512);
        assert_eq!(reg.spec("toy-mlp").unwrap().output_dim, 8);
        assert_eq!(
            reg.names().collect::<Vec<_>>(),
            ["posterv2", "resnet18", "resnet50", "toy-mlp"]
        );
    }

    #[test]
    fn duplicate_registration() {
        let mut reg = EncoderRegistry::with_builtins();
        let err = reg
            .register_encoder(EncoderSpec::new("resnet50", 2048), Arc::new(build_pretrained))
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateEncoder(n) if n == "resnet50"));
        let spec = reg
            .register_encoder(EncoderSpec::new("toy-wide", 8), Arc::new(build_toy_mlp))
            .unwrap();
        assert_eq!(spec.output_dim, 8);
    }

    #[test]
    fn pretrained_without_weights() {
        let reg = EncoderRegistry::with_builtins();
        let enc = reg.build(&EncoderRef::parse("posterv2").unwrap()).unwrap();
        assert!(matches!(
            encode_batch(enc.as_ref(), &batch(1, 4, 0)),
            Err(Error::WeightsNotLoaded(_))
        ));
        assert!(matches!(
            reg.build(&EncoderRef::parse("vit").unwrap()),
            Err(Error::UnknownEncoder(_))
        ));
    }

    #[test]
    fn toy_shape_and_resolution_check() {
        let enc = toy(8, 4, 1);
        let out = encode_batch(enc.as_ref(), &batch(2, 4, 0)).unwrap();
        assert_eq!(out.features.dim(), (2, 8));
        assert_eq!(out.encoder_name, "toy-mlp");
        assert!(matches!(
            encode_batch(enc.as_ref(), &batch(2, 5, 0)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let reg = EncoderRegistry::with_builtins();
        let enc = reg
            .build(&EncoderRef::parse("toy-mlp(dim=5,res=3,zero=true)").unwrap())
            .unwrap();
        let out = encode_batch(enc.as_ref(), &batch(3, 3, 9)).unwrap();
        assert!(out.features.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn toy_matches_hand_matmul() {
        let spec = EncoderSpec::new("toy-mlp", 3);
        let enc = ToyMlp::seeded(spec, 2, 4, 17).unwrap();
        let b = batch(2, 2, 5);
        let out = encode_batch(&enc, &b).unwrap();
        let px = b.pixels();
        for i in 0..2 {
            // flatten in C, H, W order
            let mut x = Vec::new();
            for c in 0..3 {
                for y in 0..2 {
                    for xx in 0..2 {
                        x.push(px[[i, c, y, xx]] as f64);
                    }
                }
            }
            let mut hidden = [0.0f64; 4];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut acc = enc.b1[j];
                for (k, xv) in x.iter().enumerate() {
                    acc += xv * enc.w1[[k, j]];
                }
                *h = acc.tanh();
            }
            for d in 0..3 {
                let mut acc = enc.b2[d];
                for (j, h) in hidden.iter().enumerate() {
                    acc += h * enc.w2[[j, d]];
                }
                assert!((out.features[[i, d]] as f64 - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn encoder_ref_parsing() {
        let list = EncoderRef::parse_list("toy-mlp(dim=16, seed=1), posterv2 ,toy-mlp(seed=2)").unwrap();
        assert_eq!(list.len(), 3);
        assert_eq!(list[0].args.get("dim").map(String::as_str), Some("16"));
        assert_eq!(list[1].name, "posterv2");
        assert_eq!(list[0].to_string(), "toy-mlp(dim=16,seed=1)");
        assert!(EncoderRef::parse("toy-mlp(dim=16").is_err());
        assert!(EncoderRef::parse("").is_err());
    }

    #[test]
    fn from_images_layout() {
        let img = Image::from_shape_fn((2, 3, 3), |(y, x, c)| (y * 100 + x * 10 + c) as f32);
        let b = ImageBatch::from_images(std::slice::from_ref(&img)).unwrap();
        assert_eq!(b.pixels()[[0, 2, 1, 0]], img[[1, 0, 2]]);
        assert!(ImageBatch::from_images(&[]).is_err());
    }

    #[test]
    fn header_bytes_for_five_by_768() {
        let features = Array2::<f32>::zeros((5, 768));
        let mut writer = FeatureCacheWriter::new(Cursor::new(Vec::new()), 768).unwrap();
        writer.write_rows(&features).unwrap();
        let bytes = writer.finish().unwrap().into_inner();
        assert_eq!(&bytes[0..4], b"CERF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 768);
        assert_eq!(bytes.len(), 16 + 5 * 768 * 4);
    }

    #[test]
    fn truncated_and_corrupt_caches() {
        let features = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32);
        let mut writer = FeatureCacheWriter::new(Cursor::new(Vec::new()), 4).unwrap();
        writer.write_rows(&features).unwrap();
        let bytes = writer.finish().unwrap().into_inner();

        let mut short = FeatureCacheReader::new(Cursor::new(&bytes[..bytes.len() - 3]), "x").unwrap();
        assert!(matches!(short.next_batch(10), Err(Error::CacheFormat(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            FeatureCacheReader::new(Cursor::new(bad), "x"),
            Err(Error::CacheFormat(_))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(FeatureCacheReader::new(Cursor::new(v2), "x").is_err());

        let mut long = bytes.clone();
        long.push(0);
        let mut r = FeatureCacheReader::new(Cursor::new(long), "x").unwrap();
        assert!(r.next_batch(10).unwrap().is_some());
        assert!(matches!(r.next_batch(10), Err(Error::CacheFormat(_))));

        let mut w = FeatureCacheWriter::new(Cursor::new(Vec::new()), 4).unwrap();
        assert!(w.write_rows(&Array2::zeros((1, 5))).is_err());
    }

    #[test]
    fn streamed_batches_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.cerf");
        let a = FeatureBatch::new("e", Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f32 * 0.1));
        let b = FeatureBatch::new("e", Array2::from_shape_fn((1, 3), |(_, j)| -(j as f32)));
        write_feature_cache(&path, 3, [&a, &b]).unwrap();
        let back = read_feature_cache(&path, "e").unwrap();
        assert_eq!(back.features.nrows(), 3);
        assert_eq!(back.features.row(2), b.features.row(0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn cache_round_trip_is_exact(n in 0usize..12, d in 1usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((n, d), |_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff));
            let mut writer = FeatureCacheWriter::new(Cursor::new(Vec::new()), d).unwrap();
            writer.write_rows(&m).unwrap();
            let bytes = writer.finish().unwrap().into_inner();
            let mut reader = FeatureCacheReader::new(Cursor::new(bytes), "x").unwrap();
            let mut rows = Vec::new();
            while let Some(b) = reader.next_batch(5).unwrap() {
                rows.extend(b.features.iter().map(|v| v.to_bits()));
            }
            prop_assert_eq!(rows, m.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn toy_width_matches_spec(dim in 1usize..12, b in 1usize..4, seed in any::<u64>()) {
            let enc = toy(dim, 3, seed);
            let input = batch(b, 3, seed);
            let out = encode_batch(enc.as_ref(), &input).unwrap();
            prop_assert_eq!(out.dim(), enc.spec().output_dim);
            let again = encode_batch(enc.as_ref(), &input).unwrap();
            prop_assert_eq!(out, again);
        }
    }
}
