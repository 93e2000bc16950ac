//! Central finite-difference check of the contrastive loss gradients.
//!
//! Each trial draws a random batch and loss configuration, evaluates the
//! analytic gradients w.r.t. queries, targets and `θ`, and compares every
//! coordinate against `(L(x+h) − L(x−h)) / 2h`. Batches are built with
//! [`ContrastiveBatch::new_unnormalized`] so each coordinate is a free
//! variable. The false-negative mask is piecewise constant; draws where a
//! target pair sits within [`MASK_MARGIN`] of the threshold are redrawn so the
//! mask cannot flip inside the stencil.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{whnm_loss_with_theta, ContrastiveBatch, LossConfig, DEFAULT_DELTA};
use crate::math::{similarity_matrix, DenseMatrix};

pub const MASK_MARGIN: f64 = 1e-3;
const TASK: &str = "gradcheck";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Finite-difference step.
    pub h: f64,
    /// Largest acceptable relative error on any coordinate.
    pub tolerance: f64,
    /// Denominator floor so near-zero coordinates are judged on absolute error.
    /// Central differences carry roundoff of about `ε·|L|/h` ≈ 1e-10, which
    /// would swamp a relative test on coordinates of size 1e-7.
    pub floor: f64,
    pub batch_range: (usize, usize),
    pub dim_range: (usize, usize),
    pub alphas: Vec<f64>,
    pub theta_range: (f64, f64),
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            batch_range: (2, 8),
            dim_range: (2, 16),
            alphas: vec![0.0, 1.0, 9.0],
            theta_range: (-3.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    pub delta: Option<f64>,
    pub theta: f64,
    pub masked_entries: usize,
    pub max_rel_err: f64,
    /// Which tensor held the worst coordinate: `queries`, `targets` or `theta`.
    pub worst: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: Vec<TrialResult>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn masked_trials(&self) -> usize {
        self.trials.iter().filter(|t| t.masked_entries > 0).count()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.batch_range.0 < 2 || cfg.batch_range.0 > cfg.batch_range.1 {
        return Err(Error::InvalidConfig(format!("bad batch range {:?}", cfg.batch_range)));
    }
    if cfg.dim_range.0 < 1 || cfg.dim_range.0 > cfg.dim_range.1 {
        return Err(Error::InvalidConfig(format!("bad dim range {:?}", cfg.dim_range)));
    }
    if cfg.alphas.is_empty() || cfg.h <= 0.0 || !cfg.h.is_finite() {
        return Err(Error::InvalidConfig("gradcheck needs alphas and h > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trials = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let n = rng.random_range(cfg.batch_range.0..=cfg.batch_range.1);
        let d = rng.random_range(cfg.dim_range.0..=cfg.dim_range.1);
        let alpha = cfg.alphas[rng.random_range(0..cfg.alphas.len())];
        let delta = rng.random_bool(0.5).then_some(DEFAULT_DELTA);
        let theta = rng.random_range(cfg.theta_range.0..=cfg.theta_range.1);
        let loss_cfg = LossConfig {
            alpha,
            delta,
            theta_per_task: BTreeMap::new(),
            // the stop-gradient variant is not the loss's gradient by design
            differentiate_weights: true,
            symmetric: false,
        };
        let (q, k) = draw_batch(&mut rng, n, d, delta)?;
        trials.push(check_one(&q, &k, &loss_cfg, theta, cfg)?);
    }
    let max_rel_err = trials.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        trials,
        max_rel_err,
        tolerance: cfg.tolerance,
    })
}

/// Unit-norm rows; with masking on, some targets are near-copies of others.
fn draw_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    delta: Option<f64>,
) -> Result<(DenseMatrix<f64>, DenseMatrix<f64>)> {
    loop {
        let q = random_unit_rows(rng, n, d)?;
        let mut k = random_unit_rows(rng, n, d)?;
        if delta.is_some() && d > 1 {
            for i in 1..n {
                if rng.random_bool(0.3) {
                    let src = rng.random_range(0..i);
                    let jitter: Vec<f64> = k.row(src).iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
                    k.row_mut(i).copy_from_slice(&jitter);
                }
            }
            k = k.normalize_rows()?;
        }
        let stable = match delta {
            None => true,
            Some(delta) => {
                let s = similarity_matrix(&k, &k)?;
                (0..n).all(|a| (0..n).all(|b| a == b || (s.get(a, b) - delta).abs() > MASK_MARGIN))
            }
        };
        if stable {
            return Ok((q, k));
        }
    }
}

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<DenseMatrix<f64>> {
    let v: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseMatrix::new(n, d, v)?.normalize_rows()
}

fn loss_at(q: &DenseMatrix<f64>, k: &DenseMatrix<f64>, cfg: &LossConfig, theta: f64) -> Result<f64> {
    let batch = ContrastiveBatch::new_unnormalized(q.clone(), k.clone(), TASK)?;
    Ok(whnm_loss_with_theta(&batch, cfg, theta)?.loss)
}

fn check_one(
    q: &DenseMatrix<f64>,
    k: &DenseMatrix<f64>,
    loss_cfg: &LossConfig,
    theta: f64,
    cfg: &GradCheckConfig,
) -> Result<TrialResult> {
    let batch = ContrastiveBatch::new_unnormalized(q.clone(), k.clone(), TASK)?;
    let out = whnm_loss_with_theta(&batch, loss_cfg, theta)?;
    let h = cfg.h;
    let mut worst = (0.0, "queries");

    for (name, base, grad) in [("queries", q, &out.grad_queries), ("targets", k, &out.grad_targets)] {
        for idx in 0..base.as_slice().len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus.as_mut_slice()[idx] += h;
            minus.as_mut_slice()[idx] -= h;
            let (lp, lm) = if name == "queries" {
                (
                    loss_at(&plus, k, loss_cfg, theta)?,
                    loss_at(&minus, k, loss_cfg, theta)?,
                )
            } else {
                (
                    loss_at(q, &plus, loss_cfg, theta)?,
                    loss_at(q, &minus, loss_cfg, theta)?,
                )
            };
            let numeric = (lp - lm) / (2.0 * h);
            let err = relative_error(grad.as_slice()[idx], numeric, cfg.floor);
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    let numeric = (loss_at(q, k, loss_cfg, theta + h)? - loss_at(q, k, loss_cfg, theta - h)?) / (2.0 * h);
    let err = relative_error(out.grad_theta, numeric, cfg.floor);
    if err > worst.0 {
        worst = (err, "theta");
    }

    Ok(TrialResult {
        n: q.rows(),
        d: q.cols(),
        alpha: loss_cfg.alpha,
        delta: loss_cfg.delta,
        theta,
        masked_entries: out.mask.count(),
        max_rel_err: worst.0,
        worst: worst.1.to_string(),
    })
}
