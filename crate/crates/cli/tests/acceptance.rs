//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any check fails.
//!
//! The data-dependent checks read MNIST from `$FRACE_DATA` (default
//! `data/mnist` in the workspace) and trained models from
//! `$FRACE_ARTIFACTS` (default `artifacts/`):
//!
//! * `classifier.{json,bin}` from `frace train-classifier --out artifacts/classifier`
//! * `mnist-bundle/` from `frace train-gan --classifier artifacts/classifier
//!   --out artifacts/mnist-bundle --subset 10000 --epochs 20`
//!
//! Checks whose inputs are missing print SKIP with the reason.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use frace_cli::commands::{bench_counters, pick_representatives};
use frace_cli::data::load_split;
use frace_cli::server::{router, AppState};
use frace_core::bundle::ModelBundle;
use frace_core::cgan::{Discriminator, DiscriminatorConfig};
use frace_core::classifier::{Classifier, ResNetConfig};
use frace_core::datasets::{Dataset, IdxSplit, ImageShape};
use frace_core::evaluation::{
    bench_ips, evaluate, iterative_baseline_batch, BaselineConfig, BenchConfig,
};
use frace_core::explainer::{explain_batch, explanation_grid, OverlaySpec};
use frace_core::losses::*;
use frace_core::training::{TrainConfig, TrainState};
use frace_core::Tensor;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = Result<Verdict, String>;
type CheckFn = fn() -> Check;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn workspace_path(var: &str, default: &str) -> PathBuf {
    std::env::var_os(var).map(PathBuf::from).unwrap_or_else(|| {
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../..")
            .join(default)
    })
}

fn data_dir() -> PathBuf {
    workspace_path("FRACE_DATA", "data/mnist")
}

fn artifacts_dir() -> PathBuf {
    workspace_path("FRACE_ARTIFACTS", "artifacts")
}

fn mnist_test() -> Result<Dataset<f32>, String> {
    load_split("mnist", &data_dir(), IdxSplit::Test).map_err(|e| format!("{e:#}"))
}

fn bundle() -> Result<ModelBundle<f32>, String> {
    let dir = artifacts_dir().join("mnist-bundle");
    ModelBundle::load(&dir).map_err(|e| format!("no trained bundle at {}: {e}", dir.display()))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6
}

fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, v).unwrap()
}

fn loss_unit_suite() -> Check {
    let uniform = |n: usize, c: usize| Tensor::full(&[n, c], 1.0 / c as f64);
    let field = |v: f64| Tensor::full(&[2, 1, 4, 4], v);
    let e = |r: frace_core::Result<f64>| r.map_err(|e| e.to_string());
    let cases = [
        (
            "adv(0.5, 0.5)",
            e(adversarial_loss(&[0.5; 4], &[0.5; 4]))?,
            2.0 * 0.5f64.ln(),
        ),
        (
            "cls uniform C=10",
            e(domain_cls_loss(&uniform(3, 10), &[0, 4, 9]))?,
            10f64.ln(),
        ),
        (
            "exp uniform C=26",
            e(explanation_loss(&uniform(2, 26), &[3, 25]))?,
            26f64.ln(),
        ),
        (
            "exp confident",
            e(explanation_loss(&t(&[1, 3], vec![0.0, 0.0, 1.0]), &[2]))?,
            0.0,
        ),
        (
            "rec g2 = -g1",
            e(reconstruction_loss(&field(0.7), &field(0.3), &field(-0.3)))?,
            0.0,
        ),
        (
            "rec zero",
            e(reconstruction_loss(&field(0.7), &field(0.0), &field(0.0)))?,
            0.0,
        ),
        (
            "per zero",
            e(perturbation_loss(&field(0.0), &field(0.0)))?,
            0.0,
        ),
        (
            "per 0.5",
            e(perturbation_loss(&field(0.5), &field(0.0)))?,
            0.5,
        ),
    ];
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| !close(*got, *want))
        .map(|(name, got, want)| format!("{name}: {got} != {want}"))
        .collect();
    let weights = LossWeights::default();
    let (d, g) = total_losses(&LossTerms::default(), &weights);
    let totals_ok = d == 0.0 && g == 0.0;
    Ok(verdict(
        bad.is_empty() && totals_ok,
        if bad.is_empty() {
            format!("{} examples within 1e-6", cases.len() + 1)
        } else {
            bad.join("; ")
        },
    ))
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..12);
        let c = rng.gen_range(2..20);
        let shape = [
            n,
            rng.gen_range(1..4),
            rng.gen_range(1..8),
            rng.gen_range(1..8),
        ];
        let len: usize = shape.iter().product();
        let probs = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(1e-3..1.0 - 1e-3)).collect()
        };
        let (dr, df) = (probs(&mut rng), probs(&mut rng));
        let mut rows = Vec::with_capacity(n * c);
        for _ in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            rows.extend(raw.iter().map(|v| v / s));
        }
        let p = t(&[n, c], rows);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let mut field = || t(&shape, (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let (x, g1, g2) = (field(), field(), field());

        let mut adv = 0.0;
        for i in 0..n {
            adv += dr[i].ln() / n as f64 + (1.0 - df[i]).ln() / n as f64;
        }
        let mut nll = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            nll -= p.row(i)[l].ln() / n as f64;
        }
        let (mut rec, mut per1, mut per2) = (0.0, 0.0, 0.0);
        for i in 0..len {
            let xi = x.data()[i];
            rec += (xi - (xi + g1.data()[i] + g2.data()[i])).abs() / len as f64;
            per1 += g1.data()[i].abs() / len as f64;
            per2 += g2.data()[i].abs() / len as f64;
        }
        let pairs = [
            (adversarial_loss(&dr, &df), adv),
            (domain_cls_loss(&p, &labels), nll),
            (explanation_loss(&p, &labels), nll),
            (reconstruction_loss(&x, &g1, &g2), rec),
            (perturbation_loss(&g1, &g2), per1 + per2),
        ];
        for (got, want) in pairs {
            worst = worst.max((got.map_err(|e| e.to_string())? - want).abs());
        }
    }
    Ok(verdict(
        worst <= 1e-6,
        format!("100 batches, max deviation {worst:.2e}"),
    ))
}

fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error, ignoring entries where both sides are tiny.
fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(n)
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale < 1e-7 {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

fn gradient_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let probe = [2usize, 1, 4, 4];
    let mut rand_vec = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    };
    let mut errors: Vec<(&str, f64)> = Vec::new();

    let (dr, df) = (rand_vec(16, 0.05, 0.95), rand_vec(16, 0.05, 0.95));
    let (gr, gf) = adversarial_grad(&dr, &df);
    let nr = numeric_grad(&dr, |v| adversarial_loss(v, &df).unwrap());
    let nf = numeric_grad(&df, |v| adversarial_loss(&dr, v).unwrap());
    errors.push(("adv", max_rel_err(&gr, &nr).max(max_rel_err(&gf, &nf))));

    let p = rand_vec(16, 0.05, 1.0);
    let labels = [1, 3, 0, 2];
    let g = domain_cls_grad(&t(&[4, 4], p.clone()), &labels);
    let n = numeric_grad(&p, |v| {
        domain_cls_loss(&t(&[4, 4], v.to_vec()), &labels).unwrap()
    });
    errors.push(("cls", max_rel_err(g.data(), &n)));

    // Explanation loss through a tiny classifier, with respect to the image.
    let h = Classifier::<f64>::new(
        ResNetConfig::new(ImageShape::new(4, 4, 1), 3).with_width(2),
        1,
    )
    .map_err(|e| e.to_string())?;
    let x = rand_vec(32, -1.0, 1.0);
    let targets = [2, 0];
    let (probs, trace) = h.forward_traced(&t(&probe, x.clone())).unwrap();
    let analytic = h.input_gradient(&trace, &explanation_grad(&probs, &targets));
    let n = numeric_grad(&x, |v| {
        explanation_loss(&h.predict_proba(&t(&probe, v.to_vec())).unwrap(), &targets).unwrap()
    });
    errors.push(("exp", max_rel_err(analytic.data(), &n)));

    let (g1, g2) = (rand_vec(32, -1.0, 1.0), rand_vec(32, -1.0, 1.0));
    let xf = t(&probe, rand_vec(32, -1.0, 1.0));
    let tg2 = t(&probe, g2.clone());
    let analytic = reconstruction_grad(&t(&probe, g1.clone()), &tg2);
    let n = numeric_grad(&g1, |v| {
        reconstruction_loss(&xf, &t(&probe, v.to_vec()), &tg2).unwrap()
    });
    errors.push(("rec", max_rel_err(analytic.data(), &n)));

    let analytic = perturbation_grad(&t(&probe, g1.clone()));
    let n = numeric_grad(&g1, |v| {
        perturbation_loss(&t(&probe, v.to_vec()), &tg2).unwrap()
    });
    errors.push(("per", max_rel_err(analytic.data(), &n)));

    // Domain head of a tiny discriminator, with respect to the image.
    let mut cfg = DiscriminatorConfig::new(ImageShape::new(4, 4, 1), 3).with_width(2);
    cfg.downsamplings = 2;
    let d = Discriminator::<f64>::new(cfg, 2).map_err(|e| e.to_string())?;
    let x = rand_vec(32, -1.0, 1.0);
    let (out, trace) = d.forward_traced(&t(&probe, x.clone())).unwrap();
    let dd = domain_cls_grad(&out.domain_probs, &[1, 2]);
    let analytic = d.backward(&trace, &[0.0, 0.0], &dd, None, true).unwrap();
    let n = numeric_grad(&x, |v| {
        let (_, p) = d.discriminate(&t(&probe, v.to_vec())).unwrap();
        domain_cls_loss(&p, &[1, 2]).unwrap()
    });
    errors.push(("cls via D", max_rel_err(analytic.data(), &n)));

    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(verdict(
        worst <= 1e-3,
        format!("max relative error: {detail}"),
    ))
}

fn frozen_classifier() -> Check {
    let shape = ImageShape::new(8, 8, 1);
    let h = Classifier::<f32>::new(ResNetConfig::new(shape, 3).with_width(2), 1)
        .map_err(|e| e.to_string())?;
    let before = h.checksum();
    let config = TrainConfig {
        batch_size: 8,
        generator_width: 2,
        residual_blocks: 1,
        discriminator_width: 2,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(config, &h).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for step in 0..500 {
        let x = Tensor::from_vec(
            &shape.batch(8),
            (0..8 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..8).map(|i| (i + step) % 3).collect();
        state
            .train_step(&x, &labels)
            .map_err(|e| format!("step {step}: {e}"))?;
    }
    let after = h.checksum();
    Ok(verdict(
        before == after,
        format!("500 steps, checksum {}", &after[..16]),
    ))
}

fn classifier_accuracy() -> Check {
    let stem = artifacts_dir().join("classifier");
    let h = match Classifier::<f32>::load(&stem) {
        Ok(h) => h,
        Err(e) => return Ok(Verdict::Skip(format!("{}: {e}", stem.display()))),
    };
    let test = match mnist_test() {
        Ok(d) => d,
        Err(e) => return Ok(Verdict::Skip(e)),
    };
    let acc = h.accuracy(&test).map_err(|e| e.to_string())?;
    Ok(verdict(
        acc >= 0.985,
        format!("test accuracy {:.2}% on {} images", 100.0 * acc, test.len()),
    ))
}

fn end_to_end_quality() -> Check {
    let (b, test) = match (bundle(), mnist_test()) {
        (Ok(b), Ok(t)) => (b, t),
        (Err(e), _) | (_, Err(e)) => return Ok(Verdict::Skip(e)),
    };
    let Some(d) = &b.discriminator else {
        return Err("bundle has no discriminator".into());
    };
    let r = evaluate(&b.generator, d, &b.classifier, &test, 0).map_err(|e| e.to_string())?;
    // 0.25 of the [-1, 1] dynamic range.
    let l1_limit = 0.25 * 2.0;
    Ok(verdict(
        r.validity_rate >= 0.70 && r.mean_l1_perturbation <= l1_limit,
        format!(
            "validity {:.3} (>= 0.70), mean L1 {:.3} (<= {l1_limit}) on {} images",
            r.validity_rate, r.mean_l1_perturbation, r.n
        ),
    ))
}

fn speed_ordering() -> Check {
    let (b, test) = match (bundle(), mnist_test()) {
        (Ok(b), Ok(t)) => (b, t),
        (Err(e), _) | (_, Err(e)) => return Ok(Verdict::Skip(e)),
    };
    let data = test.take(128);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (images, labels) = data.batch(&idx);
    let counters = bench_counters(&labels, b.num_classes());
    let pick = |batch: &[usize]| -> Vec<usize> { batch.iter().map(|&i| counters[i]).collect() };
    let (g, h) = (&b.generator, &b.classifier);
    let config = BenchConfig {
        batch_size: 16,
        warmup_batches: 1,
        timed_batches: 4,
        repetitions: 3,
    };
    let frace = bench_ips(
        |x: &Tensor<f32>, batch: &[usize]| explain_batch(g, h, x, &pick(batch)).map(drop),
        &images,
        &config,
    )
    .map_err(|e| e.to_string())?;
    let settings = BaselineConfig {
        max_iters: 200,
        ..BaselineConfig::default()
    };
    let baseline = bench_ips(
        |x: &Tensor<f32>, batch: &[usize]| {
            iterative_baseline_batch(h, x, &pick(batch), &settings).map(drop)
        },
        &images,
        &config,
    )
    .map_err(|e| e.to_string())?;
    let ratio = frace.mean_ips / baseline.mean_ips;
    Ok(verdict(
        ratio >= 2.0,
        format!(
            "FRACE {:.1} ± {:.1} IPS, baseline {:.1} ± {:.1} IPS, ratio {ratio:.2} (>= 2)",
            frace.mean_ips, frace.stddev_ips, baseline.mean_ips, baseline.stddev_ips
        ),
    ))
}

fn grid_generation() -> Check {
    let (b, test) = match (bundle(), mnist_test()) {
        (Ok(b), Ok(t)) => (b, t),
        (Err(e), _) | (_, Err(e)) => return Ok(Verdict::Skip(e)),
    };
    let c = b.num_classes();
    let reps = pick_representatives(&test, c, 0);
    let grid = explanation_grid(&b.generator, &b.classifier, &reps, &OverlaySpec::default())
        .map_err(|e| e.to_string())?;
    let mut pairs: Vec<(usize, usize)> = grid.cells.iter().map(|c| (c.row, c.col)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let rows_match = grid
        .cells
        .iter()
        .all(|cell| reps[cell.row].label.index() == cell.row);
    let (w, h) = (grid.cell_width, grid.cell_height);
    let dims_ok = grid.image.dimensions() == (2 + 10 * (w + 2), 2 + 10 * (h + 2));
    let out = artifacts_dir().join("grid.png");
    let _ = grid.image.save(&out);
    let valid = grid.cells.iter().filter(|c| c.valid).count();
    Ok(verdict(
        c == 10 && grid.cells.len() == 100 && pairs.len() == 100 && rows_match && dims_ok,
        format!(
            "{}x{} cells, {valid} reach their counter class, written to {}",
            c,
            c,
            out.display()
        ),
    ))
}

fn service_contract() -> Check {
    let b = match bundle() {
        Ok(b) => b,
        Err(e) => return Ok(Verdict::Skip(e)),
    };
    let samples = mnist_test().ok();
    let has_samples = samples.is_some();
    let state = Arc::new(AppState::new(b, samples, 2).map_err(|e| e.to_string())?);
    let app = router(Arc::clone(&state));
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let source = if has_samples {
        serde_json::json!({"sample_id": 0})
    } else {
        // A plain 28×28 gray PNG stands in for the sample set.
        let img = image::GrayImage::from_pixel(28, 28, image::Luma([40]));
        let mut png = std::io::Cursor::new(Vec::new());
        img.write_to(&mut png, image::ImageFormat::Png)
            .map_err(|e| e.to_string())?;
        use base64::Engine;
        let payload = base64::engine::general_purpose::STANDARD.encode(png.into_inner());
        serde_json::json!({"image_payload": payload})
    };
    let post = |counter: i64| {
        let mut body = source.clone();
        body["counter_class"] = counter.into();
        let req = Request::post("/explain")
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        let app = app.clone();
        rt.block_on(async move {
            let res = app.oneshot(req).await.unwrap();
            let status = res.status();
            let bytes = res.into_body().collect().await.unwrap().to_bytes();
            (
                status,
                serde_json::from_slice::<serde_json::Value>(&bytes).unwrap(),
            )
        })
    };
    let (s1, a) = post(3);
    let (s2, b) = post(3);
    let identical = s1 == StatusCode::OK
        && s2 == StatusCode::OK
        && a["overlay_png"].is_string()
        && a["overlay_png"] == b["overlay_png"];
    let calls = state.inference_calls();
    let (s3, _) = post(99);
    let rejected = s3 == StatusCode::BAD_REQUEST && state.inference_calls() == calls;
    Ok(verdict(
        identical && rejected,
        format!(
            "identical overlays: {identical}; counter_class 99 -> {s3} with {} extra inference calls",
            state.inference_calls() - calls
        ),
    ))
}

fn main() {
    let checks: [(&str, CheckFn); 9] = [
        ("loss unit suite", loss_unit_suite),
        ("oracle equivalence", oracle_equivalence),
        ("gradient checks", gradient_checks),
        ("frozen classifier", frozen_classifier),
        ("classifier accuracy", classifier_accuracy),
        ("end-to-end validity and L1", end_to_end_quality),
        ("speed ordering", speed_ordering),
        ("10x10 grid", grid_generation),
        ("service contract", service_contract),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let secs = || start.elapsed().as_secs_f64();
        match check() {
            Ok(Verdict::Pass(d)) => println!("PASS  {name}: {d} [{:.1}s]", secs()),
            Ok(Verdict::Fail(d)) => {
                failed += 1;
                println!("FAIL  {name}: {d} [{:.1}s]", secs());
            }
            Ok(Verdict::Skip(d)) => println!("SKIP  {name}: {d}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}: error: {e} [{:.1}s]", secs());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
