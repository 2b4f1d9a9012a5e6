use std::path::Path;

use ndarray::{s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// An RGB image as an `H x W x 3` array. Decoded images hold values in
/// `[0, 1]`; normalized images may leave that range.
pub type Image = Array3<f32>;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    HorizontalFlip {
        p: f64,
    },
    /// Crops a random region of the given area fraction and aspect ratio,
    /// then resizes it to the target resolution.
    RandomResizedCrop {
        scale: (f64, f64),
        ratio: (f64, f64),
    },
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
    },
    Normalize {
        mean: [f32; 3],
        std: [f32; 3],
    },
}

impl Transform {
    fn is_deterministic(&self) -> bool {
        matches!(self, Transform::Normalize { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub transforms: Vec<Transform>,
    /// Output side length in pixels.
    pub resolution: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self::standard(224)
    }
}

impl AugmentationConfig {
    /// Flip, resized crop, mild color jitter and ImageNet normalization.
    pub fn standard(resolution: usize) -> Self {
        Self {
            transforms: vec![
                Transform::HorizontalFlip { p: 0.5 },
                Transform::RandomResizedCrop {
                    scale: (0.8, 1.0),
                    ratio: (3.0 / 4.0, 4.0 / 3.0),
                },
                Transform::ColorJitter {
                    brightness: 0.2,
                    contrast: 0.2,
                    saturation: 0.2,
                },
                Transform::Normalize {
                    mean: IMAGENET_MEAN,
                    std: IMAGENET_STD,
                },
            ],
            resolution,
        }
    }

    /// Resize only.
    pub fn identity(resolution: usize) -> Self {
        Self {
            transforms: Vec::new(),
            resolution,
        }
    }

    fn crops(&self) -> bool {
        self.transforms
            .iter()
            .any(|t| matches!(t, Transform::RandomResizedCrop { .. }))
    }

    fn apply(&self, image: &Image, rng: &mut ChaCha8Rng, deterministic_only: bool) -> Image {
        let res = self.resolution;
        let mut img = if self.crops() && !deterministic_only {
            image.clone()
        } else {
            resize_bilinear(image, res, res)
        };
        for t in &self.transforms {
            if deterministic_only && !t.is_deterministic() {
                continue;
            }
            img = match t {
                Transform::HorizontalFlip { p } => {
                    if rng.random_bool(p.clamp(0.0, 1.0)) {
                        let mut flipped = img.clone();
                        flipped.invert_axis(Axis(1));
                        flipped.as_standard_layout().to_owned()
                    } else {
                        img
                    }
                }
                Transform::RandomResizedCrop { scale, ratio } => {
                    random_resized_crop(&img, *scale, *ratio, res, rng)
                }
                Transform::ColorJitter {
                    brightness,
                    contrast,
                    saturation,
                } => color_jitter(img, *brightness, *contrast, *saturation, rng),
                Transform::Normalize { mean, std } => {
                    let mut out = img;
                    for (c, mut chan) in out.axis_iter_mut(Axis(2)).enumerate() {
                        chan.mapv_inplace(|v| (v - mean[c]) / std[c]);
                    }
                    out
                }
            };
        }
        img
    }
}

/// Decodes an image file into RGB values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data: Vec<f32> = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::from_shape_vec((h as usize, w as usize, 3), data).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn check_rgb(image: &Image) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "expected a non-empty HxWx3 image, got {h}x{w}x{c}"
        )));
    }
    Ok(())
}

/// Two independently augmented views of `image`. The same seed always
/// reproduces the same pair.
pub fn augment_pair(
    image: &Image,
    config: &AugmentationConfig,
    seed: u64,
) -> Result<(Image, Image)> {
    check_rgb(image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v1 = config.apply(image, &mut rng, false);
    let v2 = config.apply(image, &mut rng, false);
    Ok((v1, v2))
}

/// The un-augmented view: resize plus the deterministic transforms
/// (normalization) of `config`.
pub fn eval_view(image: &Image, config: &AugmentationConfig) -> Result<Image> {
    check_rgb(image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(config.apply(image, &mut rng, true))
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, c) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coords = |o: usize, scale: f64, n: usize| -> (usize, usize, f32) {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| coords(x, sx, w)).collect();
    let mut out = Image::zeros((out_h, out_w, c));
    for y in 0..out_h {
        let (y0, y1, fy) = coords(y, sy, h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = image[[y0, x0, ch]] * (1.0 - fx) + image[[y0, x1, ch]] * fx;
                let bot = image[[y1, x0, ch]] * (1.0 - fx) + image[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn random_resized_crop(
    image: &Image,
    scale: (f64, f64),
    ratio: (f64, f64),
    res: usize,
    rng: &mut ChaCha8Rng,
) -> Image {
    let (h, w, _) = image.dim();
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            let crop = image.slice(s![top..top + ch, left..left + cw, ..]).to_owned();
            return resize_bilinear(&crop, res, res);
        }
    }
    resize_bilinear(image, res, res)
}

fn color_jitter(
    mut img: Image,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    rng: &mut ChaCha8Rng,
) -> Image {
    let mut factor = |s: f64| -> f32 {
        if s > 0.0 {
            rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32
        } else {
            1.0
        }
    };
    let b = factor(brightness);
    let c = factor(contrast);
    let sat = factor(saturation);

    img.mapv_inplace(|v| (v * b).clamp(0.0, 1.0));

    let (h, w, _) = img.dim();
    let mean_gray = img
        .rows()
        .into_iter()
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .sum::<f32>()
        / (h * w) as f32;
    img.mapv_inplace(|v| ((v - mean_gray) * c + mean_gray).clamp(0.0, 1.0));

    for mut px in img.rows_mut() {
        let g = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        px.mapv_inplace(|v| ((v - g) * sat + g).clamp(0.0, 1.0));
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(h: usize, w: usize) -> Image {
        Image::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c * 11) % 97) as f32 / 96.0
        })
    }

    #[test]
    fn identity_config_resizes_only() {
        let img = gradient_image(40, 30);
        let cfg = AugmentationConfig::identity(224);
        let (a, b) = augment_pair(&img, &cfg, 5).unwrap();
        let resized = resize_bilinear(&img, 224, 224);
        assert_eq!(a, resized);
        assert_eq!(b, resized);
    }

    #[test]
    fn same_seed_same_pair() {
        let img = gradient_image(50, 60);
        let cfg = AugmentationConfig::default();
        let p1 = augment_pair(&img, &cfg, 99).unwrap();
        let p2 = augment_pair(&img, &cfg, 99).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.0.dim(), (224, 224, 3));
    }

    #[test]
    fn different_seeds_differ() {
        let img = gradient_image(50, 60);
        let cfg = AugmentationConfig::default();
        let a = augment_pair(&img, &cfg, 1).unwrap();
        let b = augment_pair(&img, &cfg, 2).unwrap();
        let differs = a.0.iter().zip(b.0.iter()).any(|(x, y)| x != y)
            || a.1.iter().zip(b.1.iter()).any(|(x, y)| x != y);
        assert!(differs);
        // the two views of one pair are independent draws as well
        assert_ne!(a.0, a.1);
    }

    #[test]
    fn eval_view_is_resize_plus_normalize() {
        let img = gradient_image(8, 8);
        let cfg = AugmentationConfig::standard(8);
        let v = eval_view(&img, &cfg).unwrap();
        let expected = (img[[2, 3, 1]] - IMAGENET_MEAN[1]) / IMAGENET_STD[1];
        assert!((v[[2, 3, 1]] - expected).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_rgb() {
        let img = Array3::<f32>::zeros((4, 4, 1));
        assert!(augment_pair(&img, &AugmentationConfig::default(), 0).is_err());
    }

    #[test]
    fn decode_error_for_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not an image").unwrap();
        assert!(matches!(load_image(&path), Err(Error::Decode { .. })));
        assert!(matches!(
            load_image(&dir.path().join("missing.png")),
            Err(Error::Decode { .. })
        ));
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::from_elem((13, 9, 3), 0.25);
        let out = resize_bilinear(&img, 5, 17);
        assert!(out.iter().all(|v| (*v - 0.25).abs() < 1e-7));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn output_shape_is_fixed(h in 1usize..80, w in 1usize..80, seed in any::<u64>()) {
            let img = gradient_image(h, w);
            let (a, b) = augment_pair(&img, &AugmentationConfig::standard(32), seed).unwrap();
            prop_assert_eq!(a.dim(), (32, 32, 3));
            prop_assert_eq!(b.dim(), (32, 32, 3));
        }
    }
}
