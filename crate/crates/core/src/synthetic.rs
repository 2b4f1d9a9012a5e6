//! Deterministic synthetic data: Gaussian class clusters rendered as small
//! RGB images, and a feature-level fixture with two complementary blocks.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{write_manifest, Image, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::taxonomy::{CompoundExpression, Label, LabelKind, NUM_COMPOUND};
use crate::trainer::{FeatureSet, TrainConfig};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFixtureConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Distance scale between class means in latent space.
    pub separation: f64,
    /// Per-sample latent noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ImageFixtureConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            latent_dim: 8,
            train_per_class: 100,
            val_per_class: 20,
            separation: 3.0,
            noise: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImageFixture {
    pub images: Vec<Image>,
    pub records: Vec<ManifestRecord>,
}

/// Image `i` of class `c` is `sigmoid(sum_j z_j P_j)` for a latent
/// `z ~ N(mu_c, noise^2 I)` and fixed random patterns `P_j`.
pub fn image_fixture(cfg: &ImageFixtureConfig) -> ImageFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let res = cfg.resolution;
    let latent = cfg.latent_dim;
    let patterns: Vec<Array3<f64>> = (0..latent)
        .map(|_| Array3::from_shape_fn((res, res, 3), |_| normal(&mut rng)))
        .collect();
    let means: Vec<Array1<f64>> = (0..NUM_COMPOUND)
        .map(|_| Array1::from_shape_fn(latent, |_| cfg.separation * normal(&mut rng)))
        .collect();
    let scale = 1.0 / (latent as f64).sqrt();

    let mut images = Vec::new();
    let mut records = Vec::new();
    for (split, per_class) in [(Split::Train, cfg.train_per_class), (Split::Val, cfg.val_per_class)] {
        for i in 0..per_class {
            for (class, mean) in means.iter().enumerate() {
                let mut field = Array3::<f64>::zeros((res, res, 3));
                for (j, pattern) in patterns.iter().enumerate() {
                    let z = mean[j] + cfg.noise * normal(&mut rng);
                    field.scaled_add(z * scale, pattern);
                }
                images.push(field.mapv(|v| (1.0 / (1.0 + (-v).exp())) as f32));
                let compound = CompoundExpression::ALL[class];
                records.push(ManifestRecord {
                    image_path: PathBuf::from(format!("{}/{:02}_{:04}.png", split.as_str(), class, i)),
                    source: "synthetic".into(),
                    label_kind: LabelKind::Compound,
                    label_id: Some(class as i64),
                    label: Some(Label::Compound(compound)),
                    split: Some(split),
                });
            }
        }
    }
    ImageFixture { images, records }
}

/// Writes the fixture as PNG files plus `manifest.tsv` under `dir`.
pub fn write_image_fixture(dir: &Path, cfg: &ImageFixtureConfig) -> Result<Vec<ManifestRecord>> {
    let fixture = image_fixture(cfg);
    for (img, rec) in fixture.images.iter().zip(&fixture.records) {
        let path = dir.join(&rec.image_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let (h, w, _) = img.dim();
        let bytes: Vec<u8> = img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer matches dimensions")
            .save(&path)
            .map_err(|e| Error::Decode {
                path: path.clone(),
                message: e.to_string(),
            })?;
    }
    write_manifest(&dir.join("manifest.tsv"), &fixture.records)?;
    Ok(fixture.records)
}

/// Encoders used with the image fixture.
pub const FIXTURE_ENCODERS: &str = "toy-mlp(dim=32,res=16,seed=1), toy-mlp(dim=32,res=16,seed=2)";

/// Training settings for the image fixture: Adam at lr 5e-5, batch 128,
/// 20 epochs. The warm-up is shortened to 10 steps because a full epoch is
/// only 6 steps here.
pub fn fixture_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 20,
        warmup_steps: 10,
        seed: 1,
        ..TrainConfig::default()
    };
    cfg.set("encoders", FIXTURE_ENCODERS).expect("valid encoder list");
    cfg
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockFixtureConfig {
    pub block_dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlockFixtureConfig {
    fn default() -> Self {
        Self {
            block_dim: 4,
            train_per_class: 100,
            val_per_class: 20,
            separation: 4.0,
            noise: 0.5,
            seed: 11,
        }
    }
}

/// Group of `class` as seen by block A ({0,1},{2,3},{4,5},{6}) and block B
/// ({0},{1,2},{3,4},{5,6}).
pub fn block_groups(class: usize) -> (usize, usize) {
    (class / 2, class.div_ceil(2))
}

/// Two feature blocks of `block_dim` columns each. Neither block alone
/// separates all seven classes; together they do. Returns (train, val).
pub fn complementary_blocks(cfg: &BlockFixtureConfig) -> (FeatureSet, FeatureSet) {
    assert!(cfg.block_dim >= 4, "each block needs at least 4 dimensions");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.block_dim;
    let mut make = |per_class: usize| {
        let n = per_class * NUM_COMPOUND;
        let mut x = Array2::zeros((n, 2 * d));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % NUM_COMPOUND;
            let (ga, gb) = block_groups(class);
            for j in 0..2 * d {
                x[[i, j]] = cfg.noise * normal(&mut rng);
            }
            x[[i, ga]] += cfg.separation;
            x[[i, d + gb]] += cfg.separation;
            labels.push(Some(class));
        }
        FeatureSet {
            original: x,
            views: None,
            basic: vec![None; n],
            compound: labels,
        }
    };
    let train = make(cfg.train_per_class);
    let val = make(cfg.val_per_class);
    (train, val)
}
