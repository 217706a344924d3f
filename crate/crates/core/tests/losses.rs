// The oracles below are deliberately written as plain index loops.
#![allow(clippy::needless_range_loop)]

use frace_core::losses::*;
use frace_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

/// Agreement with a constant printed to `decimals` places.
fn matches_printed(a: f64, printed: f64, decimals: i32) -> bool {
    (a - printed).abs() <= 0.5 * 10f64.powi(-decimals)
}

fn probs_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let c = rows[0].len();
    Tensor::from_vec(&[rows.len(), c], rows.concat()).unwrap()
}

fn uniform(n: usize, c: usize) -> Tensor<f64> {
    Tensor::full(&[n, c], 1.0 / c as f64)
}

#[test]
fn adversarial_at_one_half() {
    let v = adversarial_loss(&[0.5; 4], &[0.5; 4]).unwrap();
    assert!(matches_printed(v, -1.38629, 5), "{v}");
    assert!(close(v, 2.0 * 0.5f64.ln()));
}

#[test]
fn adversarial_perfect_discriminator_is_near_zero() {
    let eps = 1e-9;
    let v = adversarial_loss(&[1.0 - eps; 3], &[eps; 3]).unwrap();
    assert!(v.abs() < 1e-6, "{v}");
}

#[test]
fn adversarial_rejects_non_finite() {
    assert!(matches!(
        adversarial_loss(&[f64::NAN], &[0.5]),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
#[allow(clippy::approx_constant)]
fn domain_cls_examples() {
    let perfect = probs_tensor(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
    assert!(close(domain_cls_loss(&perfect, &[1, 0]).unwrap(), 0.0));
    let v = domain_cls_loss(&uniform(5, 10), &[0, 3, 9, 2, 2]).unwrap();
    assert!(
        close(v, 10f64.ln()) && matches_printed(v, 2.30259, 5),
        "{v}"
    );
}

#[test]
fn domain_cls_zero_probability_is_clamped() {
    let p = probs_tensor(&[vec![1.0, 0.0]]);
    let v = domain_cls_loss(&p, &[1]).unwrap();
    assert!(v.is_finite());
    assert!(close(v, -(1e-8f64).ln()));
}

#[test]
fn explanation_examples() {
    let sure = probs_tensor(&[vec![0.0, 0.0, 1.0]]);
    assert!(close(explanation_loss(&sure, &[2]).unwrap(), 0.0));
    let v = explanation_loss(&uniform(3, 26), &[0, 25, 7]).unwrap();
    assert!(close(v, 26f64.ln()) && matches_printed(v, 3.2581, 4), "{v}");
}

#[test]
fn reconstruction_examples() {
    let x = Tensor::full(&[2, 1, 4, 4], 0.7);
    let g = Tensor::from_vec(
        &[2, 1, 4, 4],
        (0..32).map(|i| (i as f64 * 0.3).sin()).collect(),
    )
    .unwrap();
    assert!(close(
        reconstruction_loss(&x, &g, &g.scale(-1.0)).unwrap(),
        0.0
    ));
    let zero = Tensor::zeros(&[2, 1, 4, 4]);
    assert!(close(reconstruction_loss(&x, &zero, &zero).unwrap(), 0.0));
    let v = reconstruction_loss(
        &x,
        &Tensor::full(&[2, 1, 4, 4], 0.3),
        &Tensor::full(&[2, 1, 4, 4], -0.1),
    )
    .unwrap();
    assert!(close(v, 0.2), "{v}");
}

#[test]
fn reconstruction_shape_mismatch_errors() {
    let a = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
    let b = Tensor::<f64>::zeros(&[1, 1, 4, 2]);
    assert!(matches!(
        reconstruction_loss(&a, &a, &b),
        Err(Error::Shape(_))
    ));
}

#[test]
fn reconstruction_depends_on_x_only_through_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut rand_t = || {
        Tensor::from_vec(
            &[3, 1, 4, 4],
            (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let (x1, x2, g1, g2) = (rand_t(), rand_t(), rand_t(), rand_t());
    assert_ne!(x1, x2);
    assert_eq!(
        reconstruction_loss(&x1, &g1, &g2).unwrap(),
        reconstruction_loss(&x2, &g1, &g2).unwrap()
    );
}

#[test]
fn perturbation_examples() {
    let zero = Tensor::<f64>::zeros(&[2, 1, 4, 4]);
    assert!(close(perturbation_loss(&zero, &zero).unwrap(), 0.0));
    let half = Tensor::full(&[2, 1, 4, 4], 0.5);
    assert!(close(perturbation_loss(&half, &zero).unwrap(), 0.5));
}

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    assert_eq!(
        [
            w.lambda_adv,
            w.lambda_cls,
            w.lambda_rec,
            w.lambda_exp,
            w.lambda_per
        ],
        [1.0; 5]
    );
    assert_eq!(total_losses(&LossTerms::default(), &w), (0.0, 0.0));
    let terms = LossTerms {
        adv: -1.0,
        cls_real: 0.5,
        cls_fake: 0.4,
        rec: 0.2,
        exp: 0.3,
        per: 0.1,
    };
    let (d, g) = total_losses(&terms, &w);
    assert!(close(d, 1.5), "{d}");
    assert!(close(g, 0.0), "{g}");

    // Plain sums under unit weights.
    assert!(close(d, -terms.adv + terms.cls_real));
    assert!(close(
        g,
        terms.adv + terms.cls_fake + terms.rec + terms.exp + terms.per
    ));
}

#[test]
fn negative_weights_are_rejected() {
    let w = LossWeights {
        lambda_rec: -1.0,
        ..Default::default()
    };
    assert!(w.validate().is_err());
}

// Independent element-loop oracles over random batches.

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(1e-4..1.0 - 1e-4)).collect()
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Tensor<f64>, Vec<usize>) {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    let labels = (0..n).map(|_| rng.gen_range(0..c)).collect();
    (Tensor::from_vec(&[n, c], data).unwrap(), labels)
}

fn random_field(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn oracle_nll(p: &Tensor<f64>, labels: &[usize]) -> f64 {
    let c = p.shape()[1];
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        total += -p.data()[r * c + l].ln();
    }
    total / labels.len() as f64
}

#[test]
fn all_five_terms_match_loop_oracles_on_100_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let n = rng.gen_range(1..17);
        let c = rng.gen_range(2..27);
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let shape = [n, rng.gen_range(1..4), h, w];

        // adversarial
        let dr = random_probs(&mut rng, n);
        let df = random_probs(&mut rng, n);
        let mut oracle = 0.0;
        for i in 0..n {
            oracle += dr[i].ln();
        }
        oracle /= n as f64;
        let mut fake = 0.0;
        for i in 0..n {
            fake += (1.0 - df[i]).ln();
        }
        oracle += fake / n as f64;
        let v = adversarial_loss(&dr, &df).unwrap();
        assert!(
            close(v, oracle),
            "trial {trial}: adversarial {v} vs {oracle}"
        );

        // domain classification
        let (p, labels) = random_rows(&mut rng, n, c);
        let v = domain_cls_loss(&p, &labels).unwrap();
        assert!(close(v, oracle_nll(&p, &labels)), "trial {trial}: cls");

        // explanation
        let (p, targets) = random_rows(&mut rng, n, c);
        let v = explanation_loss(&p, &targets).unwrap();
        assert!(close(v, oracle_nll(&p, &targets)), "trial {trial}: exp");

        // reconstruction, evaluated literally as |x - (x + g1 + g2)|
        let x = random_field(&mut rng, &shape);
        let g1 = random_field(&mut rng, &shape);
        let g2 = random_field(&mut rng, &shape);
        let mut oracle = 0.0;
        for i in 0..x.len() {
            let xi = x.data()[i];
            oracle += (xi - (xi + g1.data()[i] + g2.data()[i])).abs();
        }
        oracle /= x.len() as f64;
        let v = reconstruction_loss(&x, &g1, &g2).unwrap();
        assert!(close(v, oracle), "trial {trial}: rec {v} vs {oracle}");

        // perturbation
        let (mut a, mut b) = (0.0, 0.0);
        for i in 0..g1.len() {
            a += g1.data()[i].abs();
            b += g2.data()[i].abs();
        }
        let oracle = a / g1.len() as f64 + b / g2.len() as f64;
        let v = perturbation_loss(&g1, &g2).unwrap();
        assert!(close(v, oracle), "trial {trial}: per {v} vs {oracle}");
    }
}

#[test]
fn sign_conventions_hold_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.gen_range(1..9);
        let adv = adversarial_loss(&random_probs(&mut rng, n), &random_probs(&mut rng, n)).unwrap();
        assert!(adv <= 0.0);
        let (p, l) = random_rows(&mut rng, n, 5);
        assert!(domain_cls_loss(&p, &l).unwrap() >= 0.0);
        let g1 = random_field(&mut rng, &[n, 1, 3, 3]);
        let g2 = random_field(&mut rng, &[n, 1, 3, 3]);
        assert!(reconstruction_loss(&g1, &g1, &g2).unwrap() >= 0.0);
        assert!(perturbation_loss(&g1, &g2).unwrap() >= 0.0);
    }
}
