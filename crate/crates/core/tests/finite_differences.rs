//! Central-difference oracles for every hand-written backward pass.

use std::collections::BTreeMap;

use contrastive_core::encoder::{encode_backward, encode_batch, EncoderParams, LoraAdapter, TrainMode};
use contrastive_core::loss::{infonce_loss, whnm_loss_with_theta, ContrastiveBatch, LossConfig};
use contrastive_core::math::{normalize_rows_backward, similarity_matrix, DenseMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

/// Relative error with an absolute floor. Central differences at h = 1e-5
/// carry about 1e-10 of roundoff, so coordinates below the floor are judged
/// on absolute error instead.
fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn central(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[i] += H;
    m[i] -= H;
    (f(&p) - f(&m)) / (2.0 * H)
}

/// Worst relative error between `analytic` and central differences of `f` at `x`.
fn worst(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], floor: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    (0..x.len())
        .map(|i| rel_err(analytic[i], central(f, x, i), floor))
        .fold(0.0, f64::max)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix<f64> {
    DenseMatrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn config(alpha: f64, delta: Option<f64>, differentiate_weights: bool) -> LossConfig {
    LossConfig {
        alpha,
        delta,
        theta_per_task: BTreeMap::new(),
        differentiate_weights,
        symmetric: false,
    }
}

#[test]
fn infonce_gradients_on_a_random_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d) = (6, 8);
    let q = random_matrix(&mut rng, n, d).normalize_rows().unwrap();
    let k = random_matrix(&mut rng, n, d).normalize_rows().unwrap();
    let tau = 0.1;
    let out = infonce_loss(&ContrastiveBatch::new(q.clone(), k.clone(), "t").unwrap(), tau).unwrap();

    let at = |qv: &[f64], kv: &[f64]| {
        let b = ContrastiveBatch::new_unnormalized(
            DenseMatrix::new(n, d, qv.to_vec()).unwrap(),
            DenseMatrix::new(n, d, kv.to_vec()).unwrap(),
            "t",
        )
        .unwrap();
        infonce_loss(&b, tau).unwrap().loss
    };
    let eq = worst(
        &|x| at(x, k.as_slice()),
        q.as_slice(),
        out.grad_queries.as_slice(),
        1e-3,
    );
    let ek = worst(
        &|x| at(q.as_slice(), x),
        k.as_slice(),
        out.grad_targets.as_slice(),
        1e-3,
    );
    assert!(eq < 1e-6 && ek < 1e-6, "queries {eq:e}, targets {ek:e}");
}

/// Raw (unnormalized) rows → unit rows → weighted masked loss, differentiated
/// end to end, including `θ`.
#[test]
fn weighted_masked_loss_through_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d) = (6, 8);
    let theta = 0.05f64.ln();
    let cfg = config(9.0, Some(0.95), true);
    let raw_q = random_matrix(&mut rng, n, d);
    let mut raw_k = random_matrix(&mut rng, n, d);
    // plant a near-duplicate of target 0 so the mask is exercised
    let dup: Vec<f64> = raw_k
        .row(0)
        .iter()
        .map(|v| 2.0 * v + rng.random_range(-0.01..0.01))
        .collect();
    raw_k.row_mut(3).copy_from_slice(&dup);

    let loss_of = |q: &DenseMatrix<f64>, k: &DenseMatrix<f64>, th: f64| {
        whnm_loss_with_theta(&ContrastiveBatch::from_raw(q, k, "t").unwrap(), &cfg, th).unwrap()
    };
    let out = loss_of(&raw_q, &raw_k, theta);
    assert!(out.mask.get(0, 3), "planted duplicate should be masked");
    let unit_k = raw_k.normalize_rows().unwrap();
    let s = similarity_matrix(&unit_k, &unit_k).unwrap();
    for a in 0..n {
        for b in 0..n {
            if a != b {
                assert!(
                    (s.get(a, b) - 0.95).abs() > 1e-3,
                    "mask must be stable under the stencil"
                );
            }
        }
    }

    let gq = normalize_rows_backward(&raw_q, &out.grad_queries).unwrap();
    let gk = normalize_rows_backward(&raw_k, &out.grad_targets).unwrap();
    let with_q = |x: &[f64]| loss_of(&DenseMatrix::new(n, d, x.to_vec()).unwrap(), &raw_k, theta).loss;
    let with_k = |x: &[f64]| loss_of(&raw_q, &DenseMatrix::new(n, d, x.to_vec()).unwrap(), theta).loss;
    let with_t = |x: &[f64]| loss_of(&raw_q, &raw_k, x[0]).loss;

    let eq = worst(&with_q, raw_q.as_slice(), gq.as_slice(), 1e-3);
    let ek = worst(&with_k, raw_k.as_slice(), gk.as_slice(), 1e-3);
    let et = worst(&with_t, &[theta], &[out.grad_theta], 1e-3);
    assert!(
        eq < 1e-6 && ek < 1e-6 && et < 1e-6,
        "queries {eq:e}, targets {ek:e}, theta {et:e}"
    );
}

#[test]
fn symmetric_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, d) = (5, 6);
    let cfg = LossConfig {
        symmetric: true,
        ..config(1.0, None, true)
    };
    let q = random_matrix(&mut rng, n, d).normalize_rows().unwrap();
    let k = random_matrix(&mut rng, n, d).normalize_rows().unwrap();
    let at = |qv: &[f64], kv: &[f64], th: f64| {
        let b = ContrastiveBatch::new_unnormalized(
            DenseMatrix::new(n, d, qv.to_vec()).unwrap(),
            DenseMatrix::new(n, d, kv.to_vec()).unwrap(),
            "t",
        )
        .unwrap();
        whnm_loss_with_theta(&b, &cfg, th).unwrap()
    };
    let out = at(q.as_slice(), k.as_slice(), -1.0);
    let eq = worst(
        &|x| at(x, k.as_slice(), -1.0).loss,
        q.as_slice(),
        out.grad_queries.as_slice(),
        1e-3,
    );
    let ek = worst(
        &|x| at(q.as_slice(), x, -1.0).loss,
        k.as_slice(),
        out.grad_targets.as_slice(),
        1e-3,
    );
    let et = worst(
        &|x| at(q.as_slice(), k.as_slice(), x[0]).loss,
        &[-1.0],
        &[out.grad_theta],
        1e-3,
    );
    assert!(eq < 1e-6 && ek < 1e-6 && et < 1e-6, "{eq:e} {ek:e} {et:e}");
}

/// Flat view of every trainable tensor, in a fixed order.
fn flatten(p: &EncoderParams<f64>) -> Vec<f64> {
    let ad = p.adapter.as_ref().unwrap();
    [p.weight.as_slice(), &p.bias, ad.a.as_slice(), ad.b.as_slice()].concat()
}

fn unflatten(like: &EncoderParams<f64>, v: &[f64]) -> EncoderParams<f64> {
    let ad = like.adapter.as_ref().unwrap();
    let (w, rest) = v.split_at(like.weight.as_slice().len());
    let (b, rest) = rest.split_at(like.bias.len());
    let (a, bb) = rest.split_at(ad.a.as_slice().len());
    EncoderParams::new(
        DenseMatrix::new(like.d_out(), like.d_in(), w.to_vec()).unwrap(),
        b.to_vec(),
        Some(
            LoraAdapter::new(
                DenseMatrix::new(ad.rank(), like.d_in(), a.to_vec()).unwrap(),
                DenseMatrix::new(like.d_out(), ad.rank(), bb.to_vec()).unwrap(),
                ad.scaling,
            )
            .unwrap(),
        ),
    )
    .unwrap()
}

fn encoder_case(seed: u64) -> (EncoderParams<f64>, DenseMatrix<f64>, DenseMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_in, d_out, r, n) = (16, 8, 2, 5);
    let mut p = EncoderParams::<f64>::random(d_in, d_out, seed);
    let mut ad = LoraAdapter::init(r, d_in, d_out, 2.0, seed + 1).unwrap();
    // the standard init has B = 0, which would hide errors in ∂A
    ad.b = random_matrix(&mut rng, d_out, r).scale(0.3);
    p.adapter = Some(ad);
    (p, random_matrix(&mut rng, n, d_in), random_matrix(&mut rng, n, d_in))
}

fn encoder_loss(p: &EncoderParams<f64>, xq: &DenseMatrix<f64>, xk: &DenseMatrix<f64>, cfg: &LossConfig) -> f64 {
    let q = encode_batch(xq, p).unwrap().unit;
    let k = encode_batch(xk, p).unwrap().unit;
    whnm_loss_with_theta(&ContrastiveBatch::new(q, k, "t").unwrap(), cfg, -1.5)
        .unwrap()
        .loss
}

fn encoder_grads(
    p: &EncoderParams<f64>,
    xq: &DenseMatrix<f64>,
    xk: &DenseMatrix<f64>,
    cfg: &LossConfig,
    mode: TrainMode,
) -> Vec<f64> {
    let q = encode_batch(xq, p).unwrap().unit;
    let k = encode_batch(xk, p).unwrap().unit;
    let out = whnm_loss_with_theta(&ContrastiveBatch::new(q, k, "t").unwrap(), cfg, -1.5).unwrap();
    let mut g = encode_backward(xq, p, &out.grad_queries, mode).unwrap();
    g.accumulate(&encode_backward(xk, p, &out.grad_targets, mode).unwrap())
        .unwrap();
    [
        g.weight.as_slice(),
        &g.bias,
        g.lora_a.as_ref().unwrap().as_slice(),
        g.lora_b.as_ref().unwrap().as_slice(),
    ]
    .concat()
}

#[test]
fn encoder_parameter_gradients() {
    for (seed, cfg) in [(1, config(0.0, None, true)), (2, config(9.0, Some(0.95), true))] {
        let (p, xq, xk) = encoder_case(seed);
        let analytic = encoder_grads(&p, &xq, &xk, &cfg, TrainMode::All);
        let f = |v: &[f64]| encoder_loss(&unflatten(&p, v), &xq, &xk, &cfg);
        let e = worst(&f, &flatten(&p), &analytic, 1e-4);
        assert!(e < 1e-5, "seed {seed}: max rel err {e:e}");
    }
}

#[test]
fn training_modes_select_gradient_blocks() {
    let (p, xq, xk) = encoder_case(3);
    let cfg = config(1.0, None, true);
    let all = encoder_grads(&p, &xq, &xk, &cfg, TrainMode::All);
    let adapter = encoder_grads(&p, &xq, &xk, &cfg, TrainMode::Adapter);
    let base = encoder_grads(&p, &xq, &xk, &cfg, TrainMode::Base);
    let nb = p.weight.as_slice().len() + p.bias.len();
    assert!(adapter[..nb].iter().all(|&g| g == 0.0));
    assert_eq!(&adapter[nb..], &all[nb..]);
    assert!(base[nb..].iter().all(|&g| g == 0.0));
    assert_eq!(&base[..nb], &all[..nb]);
}

#[test]
fn stop_gradient_differs_only_when_weights_matter() {
    let (p, xq, xk) = encoder_case(4);
    let lit = encoder_grads(&p, &xq, &xk, &config(0.0, None, true), TrainMode::All);
    let sg = encoder_grads(&p, &xq, &xk, &config(0.0, None, false), TrainMode::All);
    assert_eq!(lit, sg, "with α = 0 the weights are constant");
    let lit = encoder_grads(&p, &xq, &xk, &config(9.0, None, true), TrainMode::All);
    let sg = encoder_grads(&p, &xq, &xk, &config(9.0, None, false), TrainMode::All);
    assert_ne!(lit, sg);
}
