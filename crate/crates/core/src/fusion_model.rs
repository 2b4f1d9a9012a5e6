//! Feature concatenation and the dual-head classifier.
//!
//! The fused feature vector passes through a trunk of dense + GELU (+
//! dropout) layers. Two linear heads produce basic and compound logits. The
//! basic prediction is folded into the compound logits as a log-prior:
//!
//! `combined = compound_logits + alpha * ln(M softmax(basic_logits) + 1e-12)`
//!
//! where `M` is the compound/basic membership matrix.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::FeatureBatch;
use crate::error::{Error, Result};
use crate::losses::softmax_rows;
use crate::taxonomy::{COMPOUND_BASIC_MAP, NUM_BASIC, NUM_COMPOUND, PROB_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Encoder labels in concatenation order.
    pub encoder_names: Vec<String>,
    /// Embedding width of each encoder, aligned with `encoder_names`.
    pub encoder_dims: Vec<usize>,
    pub hidden_dims: Vec<usize>,
    pub combine_alpha: f64,
    pub dropout: f64,
}

impl FusionConfig {
    pub fn new(encoders: impl IntoIterator<Item = (String, usize)>) -> Self {
        let (encoder_names, encoder_dims) = encoders.into_iter().unzip();
        Self {
            encoder_names,
            encoder_dims,
            hidden_dims: vec![512],
            combine_alpha: 1.0,
            dropout: 0.1,
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.encoder_dims.iter().sum()
    }

    /// Width of the trunk output fed to the heads.
    pub fn embedding_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or_else(|| self.fused_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_names.is_empty() || self.encoder_names.len() != self.encoder_dims.len() {
            return Err(Error::Config(
                "fusion model needs one width per encoder and at least one encoder".into(),
            ));
        }
        if self.encoder_dims.contains(&0) || self.hidden_dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.combine_alpha >= 0.0 && self.combine_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "combine_alpha must be finite and >= 0, got {}",
                self.combine_alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Concatenates per-encoder batches after checking they follow
    /// `encoder_names` and the declared widths.
    pub fn concat(&self, features: &[FeatureBatch]) -> Result<FeatureBatch> {
        let names: Vec<String> = features.iter().map(|f| f.encoder_name.clone()).collect();
        if names != self.encoder_names {
            return Err(Error::EncoderOrderMismatch {
                expected: self.encoder_names.clone(),
                actual: names,
            });
        }
        for (f, &d) in features.iter().zip(&self.encoder_dims) {
            if f.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: f.dim(),
                });
            }
        }
        concat_features(features)
    }
}

/// Column-wise concatenation `[f1 ; f2 ; ...]`.
pub fn concat_features(features: &[FeatureBatch]) -> Result<FeatureBatch> {
    let first = features
        .first()
        .ok_or_else(|| Error::ShapeMismatch("nothing to concatenate".into()))?;
    let b = first.batch_size();
    if let Some(bad) = features.iter().find(|f| f.batch_size() != b) {
        return Err(Error::BatchSizeMismatch {
            expected: b,
            actual: bad.batch_size(),
        });
    }
    let views: Vec<_> = features.iter().map(|f| f.features.view()).collect();
    let fused = concatenate(Axis(1), &views).expect("row counts checked");
    let name = features
        .iter()
        .map(|f| f.encoder_name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(FeatureBatch::new(name, fused))
}

/// Inverse of [`concat_features`]: slices the fused matrix by widths.
pub fn split_features(fused: &Array2<f32>, dims: &[usize]) -> Result<Vec<Array2<f32>>> {
    let total: usize = dims.iter().sum();
    if total != fused.ncols() {
        return Err(Error::DimensionMismatch {
            expected: total,
            actual: fused.ncols(),
        });
    }
    let mut start = 0;
    Ok(dims
        .iter()
        .map(|&d| {
            let part = fused.slice(s![.., start..start + d]).to_owned();
            start += d;
            part
        })
        .collect())
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    fn uniform(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((input, output), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

/// All trainable tensors of the classifier. Also used as the gradient
/// container.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub trunk: Vec<Dense>,
    pub basic_head: Dense,
    pub compound_head: Dense,
}

impl FusionParams {
    pub fn zeros(config: &FusionConfig) -> Self {
        let mut widths = vec![config.fused_dim()];
        widths.extend(&config.hidden_dims);
        let trunk = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        let emb = config.embedding_dim();
        Self {
            trunk,
            basic_head: Dense::zeros(emb, NUM_BASIC),
            compound_head: Dense::zeros(emb, NUM_COMPOUND),
        }
    }

    /// Symmetric uniform fan-in initialization, zero biases.
    pub fn init(config: &FusionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![config.fused_dim()];
        widths.extend(&config.hidden_dims);
        let trunk = widths
            .windows(2)
            .map(|w| Dense::uniform(w[0], w[1], &mut rng))
            .collect();
        let emb = config.embedding_dim();
        Self {
            trunk,
            basic_head: Dense::uniform(emb, NUM_BASIC, &mut rng),
            compound_head: Dense::uniform(emb, NUM_COMPOUND, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.weight.nrows(), d.weight.ncols());
        Self {
            trunk: self.trunk.iter().map(z).collect(),
            basic_head: z(&self.basic_head),
            compound_head: z(&self.compound_head),
        }
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Dense)> {
        self.trunk
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("trunk.{i}"), d))
            .chain([
                ("basic_head".to_string(), &self.basic_head),
                ("compound_head".to_string(), &self.compound_head),
            ])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = (String, &mut Dense)> {
        self.trunk
            .iter_mut()
            .enumerate()
            .map(|(i, d)| (format!("trunk.{i}"), d))
            .chain([
                ("basic_head".to_string(), &mut self.basic_head),
                ("compound_head".to_string(), &mut self.compound_head),
            ])
    }

    /// `(name, (rows, cols), values)` for every tensor in a fixed order.
    /// Biases are reported as `1 x n`.
    pub fn tensors(&self) -> Vec<(String, (usize, usize), &[f64])> {
        let mut out = Vec::new();
        for (name, d) in self.layers() {
            out.push((
                format!("{name}.weight"),
                d.weight.dim(),
                d.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                (1, d.bias.len()),
                d.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (name, d) in self.layers_mut() {
            out.push((
                format!("{name}.weight"),
                d.weight.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                d.bias.as_slice_mut().expect("standard layout"),
            ));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Forward mode: evaluation is deterministic; training applies dropout
/// drawn from the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Intermediate values of a trunk pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    pub embedding: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub embedding: Array2<f64>,
    pub basic_logits: Array2<f64>,
    pub compound_logits: Array2<f64>,
    pub combined_logits: Array2<f64>,
    pub basic_probs: Array2<f64>,
    pub compound_probs: Array2<f64>,
    pub combined_probs: Array2<f64>,
}

/// `compound_logits + alpha * ln(M p_basic + floor)` for every row.
pub fn combined_logits(
    basic_probs: ArrayView2<f64>,
    compound_logits: ArrayView2<f64>,
    alpha: f64,
) -> Array2<f64> {
    let mut out = compound_logits.to_owned();
    if alpha == 0.0 {
        return out;
    }
    for (mut row, p) in out.rows_mut().into_iter().zip(basic_probs.rows()) {
        for (c, v) in row.iter_mut().enumerate() {
            let mass: f64 = COMPOUND_BASIC_MAP[c].iter().zip(p).map(|(m, q)| m * q).sum();
            *v += alpha * (mass + PROB_FLOOR).ln();
        }
    }
    out
}

/// Compound probabilities after folding in the basic-head prediction.
pub fn combine_heads(
    basic_logits: ArrayView2<f64>,
    compound_logits: ArrayView2<f64>,
    alpha: f64,
) -> Result<Array2<f64>> {
    if basic_logits.dim() != compound_logits.dim() || basic_logits.ncols() != NUM_BASIC {
        return Err(Error::ShapeMismatch(format!(
            "basic logits {:?} vs compound logits {:?}",
            basic_logits.dim(),
            compound_logits.dim()
        )));
    }
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let basic_probs = softmax_rows(basic_logits);
    Ok(softmax_rows(
        combined_logits(basic_probs.view(), compound_logits, alpha).view(),
    ))
}

/// Gradient w.r.t. basic logits contributed through the log-prior, given
/// `d_combined = dL/d combined_logits`.
fn combine_backward(
    basic_probs: &Array2<f64>,
    d_combined: &Array2<f64>,
    alpha: f64,
) -> Array2<f64> {
    let mut d_basic = Array2::zeros(basic_probs.dim());
    if alpha == 0.0 {
        return d_basic;
    }
    for ((p, g), mut out) in basic_probs
        .rows()
        .into_iter()
        .zip(d_combined.rows())
        .zip(d_basic.rows_mut())
    {
        // dL/dp_j = sum_c g_c alpha M[c][j] / (mass_c + floor)
        let mut d_p = [0.0; NUM_BASIC];
        for (c, row) in COMPOUND_BASIC_MAP.iter().enumerate() {
            let mass: f64 = row.iter().zip(p).map(|(m, q)| m * q).sum();
            let scale = g[c] * alpha / (mass + PROB_FLOOR);
            for (j, m) in row.iter().enumerate() {
                d_p[j] += scale * m;
            }
        }
        // softmax Jacobian
        let dot: f64 = p.iter().zip(&d_p).map(|(a, b)| a * b).sum();
        for j in 0..NUM_BASIC {
            out[j] = p[j] * (d_p[j] - dot);
        }
    }
    d_basic
}

/// Upstream gradients for a full forward pass.
pub struct OutputGrads {
    pub basic_logits: Array2<f64>,
    pub combined_logits: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub params: FusionParams,
}

impl FusionModel {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = FusionParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: FusionConfig, params: FusionParams) -> Result<Self> {
        config.validate()?;
        let expected = FusionParams::zeros(&config);
        let shapes = |p: &FusionParams| -> Vec<(usize, usize)> {
            p.tensors().into_iter().map(|(_, s, _)| s).collect()
        };
        if shapes(&expected) != shapes(&params) {
            return Err(Error::ShapeMismatch(
                "parameter shapes do not match the configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.fused_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.config.fused_dim(),
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn trunk_forward(&self, x: ArrayView2<f64>, mode: &mut Mode<'_>) -> Result<TrunkCache> {
        self.check_input(x)?;
        let mut cache = TrunkCache {
            inputs: Vec::with_capacity(self.params.trunk.len()),
            pre: Vec::with_capacity(self.params.trunk.len()),
            masks: Vec::with_capacity(self.params.trunk.len()),
            embedding: x.to_owned(),
        };
        let p = self.config.dropout;
        for layer in &self.params.trunk {
            let input = std::mem::take(&mut cache.embedding);
            let pre = layer.forward(input.view());
            let mut act = pre.mapv(gelu);
            let mask = match mode {
                Mode::Train(rng) if p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    let m = Array2::from_shape_fn(act.dim(), |_| {
                        if rng.random::<f64>() < p {
                            0.0
                        } else {
                            keep
                        }
                    });
                    act *= &m;
                    Some(m)
                }
                _ => None,
            };
            cache.inputs.push(input);
            cache.pre.push(pre);
            cache.masks.push(mask);
            cache.embedding = act;
        }
        Ok(cache)
    }

    /// Accumulates trunk parameter gradients for `d_embedding`.
    pub fn trunk_backward(
        &self,
        cache: &TrunkCache,
        d_embedding: Array2<f64>,
        grads: &mut FusionParams,
    ) {
        let mut d = d_embedding;
        for i in (0..self.params.trunk.len()).rev() {
            if let Some(mask) = &cache.masks[i] {
                d *= mask;
            }
            d *= &cache.pre[i].mapv(gelu_grad);
            d = self.params.trunk[i].backward(cache.inputs[i].view(), &d, &mut grads.trunk[i]);
        }
    }

    pub fn heads(&self, embedding: Array2<f64>) -> ModelOutput {
        let basic_logits = self.params.basic_head.forward(embedding.view());
        let compound_logits = self.params.compound_head.forward(embedding.view());
        let basic_probs = softmax_rows(basic_logits.view());
        let compound_probs = softmax_rows(compound_logits.view());
        let combined_logits = combined_logits(
            basic_probs.view(),
            compound_logits.view(),
            self.config.combine_alpha,
        );
        let combined_probs = softmax_rows(combined_logits.view());
        ModelOutput {
            embedding,
            basic_logits,
            compound_logits,
            combined_logits,
            basic_probs,
            compound_probs,
            combined_probs,
        }
    }

    pub fn forward_with_cache(
        &self,
        x: ArrayView2<f64>,
        mode: &mut Mode<'_>,
    ) -> Result<(ModelOutput, TrunkCache)> {
        let cache = self.trunk_forward(x, mode)?;
        let out = self.heads(cache.embedding.clone());
        Ok((out, cache))
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ModelOutput> {
        Ok(self.forward_with_cache(x, &mut Mode::Eval)?.0)
    }

    pub fn forward_features(&self, fused: &FeatureBatch) -> Result<ModelOutput> {
        self.forward(fused.features.mapv(f64::from).view())
    }

    /// Backpropagates head-output gradients, plus an optional extra
    /// gradient on the embedding, into `grads`.
    pub fn backward(
        &self,
        out: &ModelOutput,
        cache: &TrunkCache,
        upstream: &OutputGrads,
        d_embedding_extra: Option<&Array2<f64>>,
        grads: &mut FusionParams,
    ) {
        let d_basic = &upstream.basic_logits
            + &combine_backward(
                &out.basic_probs,
                &upstream.combined_logits,
                self.config.combine_alpha,
            );
        let emb = out.embedding.view();
        let mut d_emb = self
            .params
            .basic_head
            .backward(emb, &d_basic, &mut grads.basic_head);
        d_emb += &self.params.compound_head.backward(
            emb,
            &upstream.combined_logits,
            &mut grads.compound_head,
        );
        if let Some(extra) = d_embedding_extra {
            d_emb += extra;
        }
        self.trunk_backward(cache, d_emb, grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config(hidden: Vec<usize>) -> FusionConfig {
        let mut cfg = FusionConfig::new([("a".to_string(), 3), ("b".to_string(), 2)]);
        cfg.hidden_dims = hidden;
        cfg
    }

    fn input(b: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((b, d), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn posterv2_resnet50_dims_concatenate() {
        let a = FeatureBatch::new("posterv2", Array2::zeros((2, 768)));
        let b = FeatureBatch::new("resnet50", Array2::ones((2, 2048)));
        let fused = concat_features(&[a, b]).unwrap();
        assert_eq!(fused.features.dim(), (2, 2816));
        assert_eq!(fused.features[[1, 767]], 0.0);
        assert_eq!(fused.features[[1, 768]], 1.0);
    }

    #[test]
    fn concat_small_and_identity() {
        let a = FeatureBatch::new("a", Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f32));
        let c = FeatureBatch::new("c", Array2::from_elem((2, 5), 9.0));
        let fused = concat_features(&[a.clone(), c]).unwrap();
        assert_eq!(fused.features.dim(), (2, 8));
        assert_eq!(fused.features.slice(s![.., 0..3]), a.features);
        let single = concat_features(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single, a);
    }

    #[test]
    fn concat_errors() {
        let a = FeatureBatch::new("a", Array2::zeros((2, 3)));
        let b = FeatureBatch::new("b", Array2::zeros((3, 2)));
        assert!(matches!(
            concat_features(&[a.clone(), b.clone()]),
            Err(Error::BatchSizeMismatch { expected: 2, actual: 3 })
        ));
        let cfg = small_config(vec![4]);
        let b2 = FeatureBatch::new("b", Array2::zeros((2, 2)));
        assert!(matches!(
            cfg.concat(&[b2.clone(), a.clone()]),
            Err(Error::EncoderOrderMismatch { .. })
        ));
        assert!(cfg.concat(&[a, b2]).is_ok());
    }

    #[test]
    fn zero_params_give_uniform_heads() {
        let cfg = small_config(vec![4]);
        let model = FusionModel::from_parts(cfg.clone(), FusionParams::zeros(&cfg)).unwrap();
        let out = model.forward(input(3, 5, 1).view()).unwrap();
        for p in out
            .basic_probs
            .iter()
            .chain(out.compound_probs.iter())
            .chain(out.combined_probs.iter())
        {
            assert!((p - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let model = FusionModel::new(small_config(vec![4]), 0).unwrap();
        assert!(matches!(
            model.forward(input(2, 6, 0).view()),
            Err(Error::DimensionMismatch { expected: 5, actual: 6 })
        ));
    }

    #[test]
    fn forward_matches_stepwise_oracle() {
        let model = FusionModel::new(small_config(vec![4, 3]), 11).unwrap();
        let x = input(2, 5, 3);
        let out = model.forward(x.view()).unwrap();
        let dense = |x: &Vec<f64>, d: &Dense| -> Vec<f64> {
            (0..d.weight.ncols())
                .map(|j| d.bias[j] + (0..x.len()).map(|i| x[i] * d.weight[[i, j]]).sum::<f64>())
                .collect()
        };
        let gelu_ref = |v: f64| {
            0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        };
        let softmax = |z: &Vec<f64>| -> Vec<f64> {
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        for i in 0..2 {
            let mut h: Vec<f64> = x.row(i).to_vec();
            for layer in &model.params.trunk {
                h = dense(&h, layer).into_iter().map(gelu_ref).collect();
            }
            let pb = softmax(&dense(&h, &model.params.basic_head));
            let zc = dense(&h, &model.params.compound_head);
            let pc = softmax(&zc);
            let mut zcomb = zc.clone();
            for c in 0..7 {
                let mass: f64 = (0..7).map(|b| COMPOUND_BASIC_MAP[c][b] * pb[b]).sum();
                zcomb[c] += model.config.combine_alpha * (mass + 1e-12).ln();
            }
            let pcomb = softmax(&zcomb);
            for k in 0..7 {
                assert!((out.basic_probs[[i, k]] - pb[k]).abs() < 1e-5);
                assert!((out.compound_probs[[i, k]] - pc[k]).abs() < 1e-5);
                assert!((out.combined_probs[[i, k]] - pcomb[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn alpha_zero_is_pass_through() {
        let logits = input(4, 7, 2);
        let basic = input(4, 7, 3);
        let combined = combine_heads(basic.view(), logits.view(), 0.0).unwrap();
        let direct = softmax_rows(logits.view());
        for (a, b) in combined.iter().zip(direct.iter()) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert!(combine_heads(basic.view(), logits.view(), -1.0).is_err());
    }

    #[test]
    fn uniform_basic_keeps_argmax() {
        let logits = input(6, 7, 4);
        let basic = Array2::zeros((6, 7));
        let combined = combine_heads(basic.view(), logits.view(), 2.5).unwrap();
        let argmax = |r: ndarray::ArrayView1<f64>| {
            r.iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc })
                .0
        };
        for (a, b) in combined.rows().into_iter().zip(logits.rows()) {
            assert_eq!(argmax(a), argmax(b));
        }
    }

    #[test]
    fn surprise_concentrates_on_surprised_classes() {
        // one-hot Surprise basic probabilities, via very peaked logits
        let mut basic = Array2::from_elem((1, 7), -1e3);
        basic[[0, 3]] = 0.0;
        let compound = Array2::zeros((1, 7));
        let p = combine_heads(basic.view(), compound.view(), 1.0).unwrap();
        // hand evaluation: masses are 1 for the five *-Surprised classes and
        // 0 for SadlyAngry / SadlyFearful, so the combined logits are
        // ln(1 + 1e-12) and ln(1e-12).
        let hi = (1.0f64 + 1e-12).ln().exp();
        let lo = 1e-12f64;
        let z = 5.0 * hi + 2.0 * lo;
        for c in [0, 1, 2, 3, 6] {
            assert!((p[[0, c]] - hi / z).abs() < 1e-12);
        }
        for c in [4, 5] {
            assert!((p[[0, c]] - lo / z).abs() < 1e-15);
        }
    }

    #[test]
    fn tensor_names_and_shapes() {
        let params = FusionParams::zeros(&small_config(vec![4]));
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(
            names,
            [
                "trunk.0.weight",
                "trunk.0.bias",
                "basic_head.weight",
                "basic_head.bias",
                "compound_head.weight",
                "compound_head.bias"
            ]
        );
        assert_eq!(params.num_params(), 5 * 4 + 4 + 2 * (4 * 7 + 7));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut cfg = small_config(vec![16]);
        cfg.dropout = 0.5;
        let model = FusionModel::new(cfg, 1).unwrap();
        let x = input(3, 5, 8);
        let a = model.forward(x.view()).unwrap();
        let b = model.forward(x.view()).unwrap();
        assert_eq!(a.embedding, b.embedding);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = model.trunk_forward(x.view(), &mut Mode::Train(&mut rng)).unwrap();
        assert!(t.embedding.iter().any(|v| *v == 0.0));
    }

    proptest! {
        #[test]
        fn concat_then_split_round_trips(b in 1usize..5, d1 in 1usize..6, d2 in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((b, d1), |_| rng.random::<f32>());
            let c = Array2::from_shape_fn((b, d2), |_| rng.random::<f32>());
            let fused = concat_features(&[FeatureBatch::new("a", a.clone()), FeatureBatch::new("c", c.clone())]).unwrap();
            let parts = split_features(&fused.features, &[d1, d2]).unwrap();
            prop_assert_eq!(&parts[0], &a);
            prop_assert_eq!(&parts[1], &c);
        }

        #[test]
        fn prob_rows_are_distributions(seed in any::<u64>(), scale in 0.1f64..50.0) {
            let model = FusionModel::new(small_config(vec![6]), seed).unwrap();
            let x = input(4, 5, seed) * scale;
            let out = model.forward(x.view()).unwrap();
            for probs in [&out.basic_probs, &out.compound_probs, &out.combined_probs] {
                for row in probs.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                    prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }
}
