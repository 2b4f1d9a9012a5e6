//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use cer_core::dataset::{parse_manifest, AugmentationConfig, ManifestRecord, SchemaSet, Split};
use cer_core::encoders::{read_feature_cache, write_feature_matrix, EncoderRegistry, FeatureBatch};
use cer_core::ensemble::{fuse_probs, predict};
use cer_core::fusion_model::{concat_features, split_features, FusionConfig, FusionModel, Mode};
use cer_core::losses::LossWeights;
use cer_core::metrics_report::{
    macro_average, macro_f1, per_class_accuracy, per_class_f1, render_report, ConfusionMatrix, EvalReport,
};
use cer_core::objective::{flatten, loss_and_grad, max_relative_error, numeric_gradient, Batch};
use cer_core::pipeline::{encode_images, prediction_records, write_predictions, EncodeOptions, EncoderStack};
use cer_core::synthetic::{complementary_blocks, fixture_train_config, image_fixture, BlockFixtureConfig, ImageFixtureConfig};
use cer_core::taxonomy::{Label, LabelKind};
use cer_core::trainer::{evaluate, fit, lr_at_step, Adam, FeatureSet, TrainConfig, TrainState};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLASSES: usize = 7;

// Pinned tolerances and limits.
const AC1_TOL: f64 = 1e-12;
const AC1_SETS: usize = 1_000;
const AC1_MAX_N: usize = 200;
const AC1_TIME: Duration = Duration::from_secs(10);
const AC3_CALLS: usize = 10_000;
const AC3_TOL: f64 = 1e-6;
const AC4_SHAPES: usize = 100;
const AC5_TOL: f64 = 1e-4;
const AC5_FD_STEP: f64 = 1e-5;
const AC5_FLOOR: f64 = 1e-7;
const AC5_TIME: Duration = Duration::from_secs(30);
const AC6_MIN_F1: f64 = 0.95;
const AC6_EPOCHS: usize = 20;
const AC6_TIME: Duration = Duration::from_secs(120);
const AC7_SLACK: f64 = 0.02;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Brute-force per-class accuracy (percent recall) and F1 straight from the
/// raw label lists.
fn brute_force(truth: &[usize], pred: &[usize]) -> (Vec<Option<f64>>, Vec<f64>) {
    let mut acc = Vec::new();
    let mut f1 = Vec::new();
    for c in 0..CLASSES {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        acc.push((tp + fn_ > 0).then(|| 100.0 * tp as f64 / (tp + fn_) as f64));
        f1.push(if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 });
    }
    (acc, f1)
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for set in 0..AC1_SETS {
        let n = rng.random_range(1..=AC1_MAX_N);
        // Restrict some sets to a few classes so absent classes are covered.
        let k = if set % 3 == 0 { rng.random_range(1..=CLASSES) } else { CLASSES };
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..CLASSES)).collect();
        let cm = ConfusionMatrix::from_labels(&truth, &pred, CLASSES).map_err(|e| e.to_string())?;
        let (acc, f1) = brute_force(&truth, &pred);
        let expected_macro = f1.iter().sum::<f64>() / CLASSES as f64;
        worst = worst.max((macro_f1(&cm) - expected_macro).abs());
        for (got, want) in per_class_accuracy(&cm).iter().zip(&acc) {
            match (got, want) {
                (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
                (None, None) => {}
                _ => return Err(format!("set {set}: accuracy presence differs")),
            }
        }
    }
    let elapsed = start.elapsed();
    check(worst <= AC1_TOL, format!("max deviation {worst:e}"))?;
    check(elapsed < AC1_TIME, format!("took {elapsed:?}"))?;
    Ok(format!("max deviation {worst:e}, {elapsed:.2?}"))
}

fn ac2() -> Outcome {
    for f in [0.0, 0.25, 1.0] {
        check(macro_average(&[f; CLASSES]) == f, format!("macro_average of {f}"))?;
        // A confusion matrix whose every per-class F1 equals f.
        let mut counts = vec![vec![0u64; CLASSES]; CLASSES];
        for c in 0..CLASSES {
            let next = (c + 1) % CLASSES;
            match f {
                1.0 => counts[c][c] = 1,
                0.0 => counts[c][next] = 1,
                _ => {
                    counts[c][c] = 1;
                    counts[c][next] = 3;
                }
            }
        }
        let cm = ConfusionMatrix::from_counts(counts).map_err(|e| e.to_string())?;
        check(per_class_f1(&cm).iter().all(|&v| v == f), format!("per-class F1 for {f}"))?;
        check(macro_f1(&cm) == f, format!("macro F1 {} != {f}", macro_f1(&cm)))?;
    }
    Ok("f in {0, 0.25, 1} exact".into())
}

fn rows_are_distributions(m: &Array2<f64>) -> Option<f64> {
    let mut worst = 0.0f64;
    for row in m.rows() {
        if row.iter().any(|v| v.is_nan() || *v < 0.0) {
            return None;
        }
        worst = worst.max((row.sum() - 1.0).abs());
    }
    Some(worst)
}

fn random_distributions(rng: &mut ChaCha8Rng, b: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((b, CLASSES), |_| rng.random::<f64>().powi(3));
    for mut row in m.rows_mut() {
        let s = row.sum();
        if s == 0.0 {
            row.fill(1.0 / CLASSES as f64);
        } else {
            row /= s;
        }
    }
    m
}

fn ac3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut model = None;
    for call in 0..AC3_CALLS {
        if call % 100 == 0 {
            let mut cfg = FusionConfig::new([("a".to_string(), 5), ("b".to_string(), 3)]);
            cfg.hidden_dims = vec![rng.random_range(2..16)];
            cfg.combine_alpha = rng.random_range(0.0..3.0);
            model = Some(FusionModel::new(cfg, rng.random()).map_err(|e| e.to_string())?);
        }
        let m = model.as_ref().expect("set above");
        let b = rng.random_range(1..8);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let x = Array2::from_shape_fn((b, 8), |_| scale * rng.random_range(-1.0..1.0));
        let out = m.forward(x.view()).map_err(|e| e.to_string())?;
        for probs in [&out.basic_probs, &out.compound_probs, &out.combined_probs] {
            worst = worst.max(rows_are_distributions(probs).ok_or(format!("call {call}: negative or NaN"))?);
        }

        let k = rng.random_range(1..5);
        let members: Vec<Array2<f64>> = (0..k).map(|_| random_distributions(&mut rng, b)).collect();
        let views: Vec<_> = members.iter().map(|m| m.view()).collect();
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..5.0)).collect();
        let fused = fuse_probs(&views, &weights).map_err(|e| e.to_string())?;
        worst = worst.max(rows_are_distributions(&fused).ok_or(format!("fuse {call}: negative or NaN"))?);
    }
    check(worst <= AC3_TOL, format!("max |row sum - 1| {worst:e}"))?;
    Ok(format!("{AC3_CALLS} forward + {AC3_CALLS} fuse calls, max |row sum - 1| {worst:e}"))
}

fn ac4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for i in 0..AC4_SHAPES {
        let (b, d1, d2) = if i == 0 {
            (4, 768, 2048)
        } else {
            (rng.random_range(1..=16), rng.random_range(1..=64), rng.random_range(1..=64))
        };
        let mut finite = || loop {
            let v = f32::from_bits(rng.random());
            if v.is_finite() {
                return v;
            }
        };
        let a = Array2::from_shape_fn((b, d1), |_| finite());
        let c = Array2::from_shape_fn((b, d2), |_| finite());
        let fused = concat_features(&[FeatureBatch::new("a", a.clone()), FeatureBatch::new("c", c.clone())])
            .map_err(|e| e.to_string())?;
        check(fused.features.dim() == (b, d1 + d2), format!("fused shape {:?}", fused.features.dim()))?;
        if i == 0 {
            check(fused.features.ncols() == 2816, "768 + 2048 must give 2816")?;
        }
        let parts = split_features(&fused.features, &[d1, d2]).map_err(|e| e.to_string())?;
        let same = |x: &Array2<f32>, y: &Array2<f32>| x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits());
        check(same(&parts[0], &a) && same(&parts[1], &c), format!("shape ({b}, {d1}, {d2}) not bit-exact"))?;
    }
    Ok(format!("{AC4_SHAPES} shapes bit-exact, including 768+2048->2816"))
}

fn ac5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for trial in 0..3u64 {
        let mut cfg = FusionConfig::new([("a".to_string(), 5), ("b".to_string(), 3)]);
        cfg.hidden_dims = vec![6];
        cfg.combine_alpha = 1.0;
        let model = FusionModel::new(cfg, 50 + trial).map_err(|e| e.to_string())?;
        let mut random = || Array2::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0));
        let (x, v1, v2) = (random(), random(), random());
        let basic = [Some(0), None, Some(6), Some(3)];
        let compound = [Some(2), Some(4), None, Some(6)];
        let batch = Batch {
            original: x.view(),
            views: Some((v1.view(), v2.view())),
            basic: &basic,
            compound: &compound,
        };
        let weights = LossWeights::default();
        let (_, grads) =
            loss_and_grad(&model, &batch, &weights, &mut Mode::Eval, true).map_err(|e| e.to_string())?;
        let analytic = flatten(&grads.expect("requested"));
        let numeric = numeric_gradient(&model, &batch, &weights, AC5_FD_STEP).map_err(|e| e.to_string())?;
        worst = worst.max(max_relative_error(&analytic, &numeric, AC5_FLOOR));
    }
    let elapsed = start.elapsed();
    check(worst < AC5_TOL, format!("max relative error {worst:e}"))?;
    check(elapsed < AC5_TIME, format!("took {elapsed:?}"))?;
    Ok(format!("max relative error {worst:e}, {elapsed:.2?}"))
}

struct FixtureRun {
    log: String,
    report: String,
    val_f1: f64,
    elapsed: Duration,
}

/// Generates the image fixture, encodes it with the toy encoders, trains
/// and evaluates on the validation split.
fn fixture_run(cfg: &TrainConfig) -> Result<FixtureRun, String> {
    let start = Instant::now();
    let fixture = image_fixture(&ImageFixtureConfig::default());
    let registry = EncoderRegistry::with_builtins();
    let stack = EncoderStack::parse(&registry, &cfg.encoders.join(", ")).map_err(|e| e.to_string())?;
    let opts = EncodeOptions {
        augmentation: AugmentationConfig::standard(16),
        with_views: true,
        seed: cfg.seed,
        batch_size: cfg.batch_size,
    };
    let encoded = encode_images(&stack, &fixture.images, &opts).map_err(|e| e.to_string())?;
    let records: Vec<&ManifestRecord> = fixture.records.iter().collect();
    let all = encoded.feature_set(&records);
    let rows = |split| (0..records.len()).filter(|&i| records[i].split == Some(split)).collect::<Vec<_>>();
    let (train, val) = (all.subset(&rows(Split::Train)), all.subset(&rows(Split::Val)));
    if (train.len(), val.len()) != (700, 140) {
        return Err(format!("fixture has {} / {} samples", train.len(), val.len()));
    }

    let mut model = FusionModel::new(cfg.fusion_config(stack.dims()).map_err(|e| e.to_string())?, cfg.seed)
        .map_err(|e| e.to_string())?;
    let mut opt = Adam::new(&model.params, cfg.adam_betas, cfg.adam_eps);
    let mut log = Vec::new();
    fit(&mut model, &mut opt, &train, &val, cfg, TrainState::new(cfg.seed), None, &mut log)
        .map_err(|e| e.to_string())?;
    let report = evaluate(&model, &val).map_err(|e| e.to_string())?;
    Ok(FixtureRun {
        log: String::from_utf8(log).map_err(|e| e.to_string())?,
        report: render_report(std::slice::from_ref(&report), &["fusion"]).map_err(|e| e.to_string())?,
        val_f1: report.macro_f1,
        elapsed: start.elapsed(),
    })
}

fn ac6(run: &Result<FixtureRun, String>) -> Outcome {
    let cfg = fixture_train_config();
    check(
        cfg.epochs == AC6_EPOCHS && cfg.peak_lr == 5e-5 && cfg.batch_size == 128 && cfg.adam_betas == (0.9, 0.999),
        "fixture config must use 20 epochs of Adam(0.9, 0.999) at lr 5e-5, batch 128",
    )?;
    let run = run.as_ref().map_err(Clone::clone)?;
    check(run.log.lines().count() == AC6_EPOCHS, "log must have one line per epoch")?;
    check(run.val_f1 >= AC6_MIN_F1, format!("val macro-F1 {:.4}", run.val_f1))?;
    check(run.elapsed < AC6_TIME, format!("took {:?}", run.elapsed))?;
    Ok(format!("val macro-F1 {:.4}, {:.2?}", run.val_f1, run.elapsed))
}

fn train_member(train: &FeatureSet, val: &FeatureSet, name: &str, seed: u64) -> Result<(Array2<f64>, f64), String> {
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 128,
        peak_lr: 1e-3,
        warmup_steps: 0,
        seed,
        encoders: vec![name.to_string()],
        ..TrainConfig::default()
    };
    let mut model = FusionModel::new(cfg.fusion_config(&[train.original.ncols()]).map_err(|e| e.to_string())?, seed)
        .map_err(|e| e.to_string())?;
    let mut opt = Adam::new(&model.params, cfg.adam_betas, cfg.adam_eps);
    fit(&mut model, &mut opt, train, val, &cfg, TrainState::new(seed), None, &mut std::io::sink())
        .map_err(|e| e.to_string())?;
    let probs = model.forward(val.original.view()).map_err(|e| e.to_string())?.combined_probs;
    let f1 = evaluate(&model, val).map_err(|e| e.to_string())?.macro_f1;
    Ok((probs, f1))
}

fn ac7() -> Outcome {
    let cfg = BlockFixtureConfig::default();
    let (train, val) = complementary_blocks(&cfg);
    let d = cfg.block_dim;
    let (pa, fa) = train_member(&train.select_columns(0..d), &val.select_columns(0..d), "block-a", 1)?;
    let (pb, fb) = train_member(&train.select_columns(d..2 * d), &val.select_columns(d..2 * d), "block-b", 2)?;
    let fused = fuse_probs(&[pa.view(), pb.view()], &[1.0, 1.0]).map_err(|e| e.to_string())?;
    let truth: Vec<usize> = val.compound.iter().map(|c| c.expect("labelled")).collect();
    let cm = ConfusionMatrix::from_labels(&truth, &predict(fused.view()), CLASSES).map_err(|e| e.to_string())?;
    let ff = macro_f1(&cm);
    let detail = format!("members {fa:.4} / {fb:.4}, fused {ff:.4}");
    check(ff >= fa.max(fb) - AC7_SLACK, detail.clone())?;
    check(ff > fa.min(fb), detail.clone())?;
    Ok(detail)
}

fn ac8() -> Outcome {
    let cfg = TrainConfig::default();
    check(cfg.warmup_steps == 500 && cfg.peak_lr == 5e-5, "default warm-up must be 500 steps to 5e-5")?;
    let at_end = lr_at_step(500, &cfg, 0);
    let mid = lr_at_step(249, &cfg, 0);
    check(at_end == 5e-5, format!("step 500 gives {at_end:e}"))?;
    check(mid == 2.5e-5, format!("midpoint gives {mid:e}"))?;
    Ok("5e-5 at step 500, 2.5e-5 at step 249, exact".into())
}

fn ac9(first: &Result<FixtureRun, String>) -> Outcome {
    let first = first.as_ref().map_err(Clone::clone)?;
    let second = fixture_run(&fixture_train_config())?;
    check(first.log == second.log, "training logs differ")?;
    check(first.report == second.report, "reports differ")?;
    Ok(format!("{} log bytes and {} report bytes identical", first.log.len(), first.report.len()))
}

fn golden(name: &str) -> Vec<u8> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn ac10() -> Outcome {
    // Manifest: parse, rebuild by hand, re-serialize.
    let text = golden("manifest.tsv");
    let records = parse_manifest(text.as_slice(), Path::new("manifest.tsv"), &SchemaSet::unified())
        .map_err(|e| e.to_string())?;
    let expected_labels = [
        Some(Label::Compound(cer_core::CompoundExpression::FearfullySurprised)),
        Some(Label::Basic(cer_core::BasicExpression::Neutral)),
        Some(Label::Basic(cer_core::BasicExpression::Happiness)),
        None,
    ];
    check(records.len() == 4, "manifest record count")?;
    for (r, want) in records.iter().zip(expected_labels) {
        check(r.label == want, format!("label of {}", r.image_path.display()))?;
    }
    check(records[3].label_kind == LabelKind::Compound && records[3].split.is_none(), "unlabelled row")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("m.tsv");
    cer_core::dataset::write_manifest(&out, &records).map_err(|e| e.to_string())?;
    check(std::fs::read(&out).map_err(|e| e.to_string())? == text, "manifest bytes differ")?;

    // Feature cache.
    let m = ndarray::array![[0.5f32, -1.25, 3.0], [0.0, 2.0, -0.125]];
    let out = dir.path().join("f.cerf");
    write_feature_matrix(&out, &m).map_err(|e| e.to_string())?;
    check(std::fs::read(&out).map_err(|e| e.to_string())? == golden("features.cerf"), "CERF bytes differ")?;
    let back = read_feature_cache(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/features.cerf"),
        "golden",
    )
    .map_err(|e| e.to_string())?;
    check(back.features == m, "CERF read-back differs")?;

    // Prediction file.
    let ids: Vec<String> = ["clip01/0001", "clip01/0002", "clip02/0001", "clip02/0002"].map(String::from).to_vec();
    let mut probs = Array2::from_elem((4, CLASSES), 1.0 / 7.0);
    probs.row_mut(0).assign(&ndarray::arr1(&[0.05, 0.05, 0.6, 0.1, 0.1, 0.05, 0.05]));
    probs.row_mut(1).assign(&ndarray::arr1(&[0.125, 0.125, 0.125, 0.125, 0.25, 0.125, 0.125]));
    let errors = vec![None, None, Some("unreadable".to_string()), None];
    let mut buf = Vec::new();
    write_predictions(&mut buf, &prediction_records(&ids, &probs, &errors)).map_err(|e| e.to_string())?;
    check(buf == golden("predictions.csv"), "prediction bytes differ")?;

    // Report table from fixed per-class values.
    let report = EvalReport {
        per_class_accuracy: [50.00, 45.71, 87.14, 85.93, 84.84, 77.27, 27.78].map(Some).to_vec(),
        per_class_f1: vec![0.0; CLASSES],
        overall_accuracy: Some(73.80),
        macro_f1: 0.6379,
        samples: 1,
    };
    let table = render_report(&[report], &["Ensemble"]).map_err(|e| e.to_string())?;
    check(table.as_bytes() == golden("report_ensemble.txt").as_slice(), "report bytes differ")?;
    let collapsed = table.split_whitespace().collect::<Vec<_>>().join(" ");
    check(collapsed.contains("Fearfully Surprised 87.14"), "missing Fearfully Surprised row")?;
    check(collapsed.ends_with("F1 63.79"), "missing F1 row")?;
    Ok("manifest, CERF, predictions and report match golden files".into())
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match result {
        Ok(detail) => {
            println!("PASS  {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL  {name}: {detail}");
            false
        }
    }
}

fn main() {
    let fixture = catch_unwind(|| fixture_run(&fixture_train_config()))
        .unwrap_or_else(|_| Err("fixture run panicked".into()));
    let results = [
        run("AC1 metric oracle equivalence", ac1),
        run("AC2 macro-F1 of constant per-class F1", ac2),
        run("AC3 probability rows normalized", ac3),
        run("AC4 concatenation round-trip", ac4),
        run("AC5 gradient check", ac5),
        run("AC6 end-to-end toy training", || ac6(&fixture)),
        run("AC7 ensemble benefit", ac7),
        run("AC8 warm-up schedule", ac8),
        run("AC9 determinism", || ac9(&fixture)),
        run("AC10 format pinning", ac10),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
