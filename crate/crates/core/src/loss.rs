//! InfoNCE and its hardness-weighted, false-negative-masked variant.
//!
//! For query `i` with positive target `p = π(i)` and temperature `τ`, the
//! per-query loss is
//!
//! ```text
//! ℓᵢ = −s_ip/τ + log( exp(s_ip/τ) + Σ_{j ∉ mask, j ≠ p} w_ij · exp(s_ij/τ) ),   w_ij = exp(α·s_ij)
//! ```
//!
//! evaluated as a log-sum-exp over the logits `s_ij·(1/τ + α)`. Plain InfoNCE is
//! the `α = 0`, empty-mask case. Masked negatives are removed from the
//! denominator outright, so their similarity gradient is exactly zero.
//! The temperature is `τ = exp(θ)` with `θ` clamped to [`THETA_MIN`, `THETA_MAX`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logsumexp, similarity_matrix, DenseMatrix};
use crate::scalar::Scalar;

pub const THETA_MIN: f64 = -10.0;
pub const THETA_MAX: f64 = 10.0;

/// Hardness strength used for the full model.
pub const DEFAULT_ALPHA: f64 = 9.0;
/// False-negative similarity threshold used for the full model.
pub const DEFAULT_DELTA: f64 = 0.95;

/// `ln 0.05`, the initial log-temperature.
pub fn default_theta() -> f64 {
    0.05f64.ln()
}

/// Key under which a single task-agnostic temperature is stored.
pub const SHARED_TASK: &str = "shared";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Hardness strength; 0 disables hardness weighting.
    pub alpha: f64,
    /// False-negative threshold on `sim(k⁻, k⁺)`; `None` disables masking.
    #[serde(default)]
    pub delta: Option<f64>,
    /// Log-temperature per task id.
    #[serde(default)]
    pub theta_per_task: BTreeMap<String, f64>,
    /// Back-propagate through the hardness weights (otherwise they are constants).
    #[serde(default = "default_true")]
    pub differentiate_weights: bool,
    /// Average the query→target and target→query losses.
    #[serde(default)]
    pub symmetric: bool,
}

fn default_true() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::infonce(default_theta())
    }
}

impl LossConfig {
    /// Plain InfoNCE with one shared temperature `exp(theta)`.
    pub fn infonce(theta: f64) -> Self {
        Self {
            alpha: 0.0,
            delta: None,
            theta_per_task: BTreeMap::from([(SHARED_TASK.to_string(), theta)]),
            differentiate_weights: true,
            symmetric: false,
        }
    }

    /// Hardness weighting and false-negative masking at their default strengths.
    pub fn weighted(theta_per_task: BTreeMap<String, f64>) -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            delta: Some(DEFAULT_DELTA),
            theta_per_task,
            differentiate_weights: true,
            symmetric: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::InvalidConfig(format!("delta must lie in (0, 1], got {d}")));
            }
        }
        if let Some((task, theta)) = self.theta_per_task.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "theta for task `{task}` is not finite: {theta}"
            )));
        }
        Ok(())
    }

    pub fn theta(&self, task_id: &str) -> Result<f64> {
        self.theta_per_task
            .get(task_id)
            .copied()
            .ok_or_else(|| Error::MissingTaskTheta(task_id.to_string()))
    }
}

/// `θ` clamped into the safe range.
pub fn clamp_theta(theta: f64) -> f64 {
    theta.clamp(THETA_MIN, THETA_MAX)
}

/// `τ = exp(clamp(θ))`.
pub fn task_temperature<T: Scalar>(theta: T) -> T {
    theta.max(T::lit(THETA_MIN)).min(T::lit(THETA_MAX)).exp()
}

/// Boolean `rows × cols` matrix; `true` marks an excluded entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn none(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Masked fraction of the off-positive entries (`N·(N−1)` for a square batch).
    pub fn density(&self) -> f64 {
        let slots = self.rows * self.cols.saturating_sub(1);
        if slots == 0 {
            0.0
        } else {
            self.count() as f64 / slots as f64
        }
    }
}

/// In-batch contrastive pairs: query `i` is matched with target `positive_index[i]`,
/// every other target in the batch is a negative.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch<T> {
    queries: DenseMatrix<T>,
    targets: DenseMatrix<T>,
    positive_index: Vec<usize>,
    task_id: String,
    equivalence_groups: Option<Vec<String>>,
}

impl<T: Scalar> ContrastiveBatch<T> {
    /// Row-normalized queries and targets with identity positives.
    pub fn new(queries: DenseMatrix<T>, targets: DenseMatrix<T>, task_id: impl Into<String>) -> Result<Self> {
        if !queries.rows_are_unit() || !targets.rows_are_unit() {
            return Err(Error::InvalidBatch("queries and targets must be row-normalized".into()));
        }
        Self::new_unnormalized(queries, targets, task_id)
    }

    /// Normalizes raw query/target rows first.
    pub fn from_raw(
        raw_queries: &DenseMatrix<T>,
        raw_targets: &DenseMatrix<T>,
        task_id: impl Into<String>,
    ) -> Result<Self> {
        Self::new_unnormalized(raw_queries.normalize_rows()?, raw_targets.normalize_rows()?, task_id)
    }

    /// Skips the unit-norm check; similarities become plain dot products.
    /// Used for gradient checks that perturb individual coordinates.
    pub fn new_unnormalized(
        queries: DenseMatrix<T>,
        targets: DenseMatrix<T>,
        task_id: impl Into<String>,
    ) -> Result<Self> {
        if queries.cols() != targets.cols() {
            return Err(Error::dims("query/target dim", queries.cols(), targets.cols()));
        }
        if queries.rows() != targets.rows() {
            return Err(Error::dims("query/target count", queries.rows(), targets.rows()));
        }
        let n = queries.rows();
        if n < 2 {
            return Err(Error::InvalidBatch(format!("need at least 2 pairs, got {n}")));
        }
        Ok(Self {
            queries,
            targets,
            positive_index: (0..n).collect(),
            task_id: task_id.into(),
            equivalence_groups: None,
        })
    }

    /// Replaces the identity pairing; `perm` must be a bijection on `0..N`.
    pub fn with_positive_index(mut self, perm: Vec<usize>) -> Result<Self> {
        let n = self.len();
        if perm.len() != n {
            return Err(Error::dims("positive_index length", n, perm.len()));
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::InvalidBatch("positive_index is not a permutation".into()));
            }
            seen[p] = true;
        }
        self.positive_index = perm;
        Ok(self)
    }

    /// Attaches ground-truth group labels per target (equal labels are mutually positive).
    pub fn with_equivalence_groups(mut self, groups: Vec<String>) -> Result<Self> {
        if groups.len() != self.len() {
            return Err(Error::dims("equivalence_groups length", self.len(), groups.len()));
        }
        self.equivalence_groups = Some(groups);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queries(&self) -> &DenseMatrix<T> {
        &self.queries
    }

    pub fn targets(&self) -> &DenseMatrix<T> {
        &self.targets
    }

    pub fn positive_index(&self) -> &[usize] {
        &self.positive_index
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn equivalence_groups(&self) -> Option<&[String]> {
        self.equivalence_groups.as_deref()
    }

    /// Ground-truth false negatives from the equivalence groups, same layout as
    /// [`false_negative_mask`]. All-false when no groups are attached.
    pub fn true_false_negatives(&self) -> Mask {
        let n = self.len();
        let mut mask = Mask::none(n, n);
        if let Some(groups) = &self.equivalence_groups {
            for (i, &p) in self.positive_index.iter().enumerate() {
                for j in (0..n).filter(|&j| j != p) {
                    mask.set(i, j, groups[j] == groups[p]);
                }
            }
        }
        mask
    }

    fn inverse_positive_index(&self) -> Vec<usize> {
        let mut inv = vec![0; self.len()];
        for (i, &p) in self.positive_index.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad_queries: DenseMatrix<T>,
    pub grad_targets: DenseMatrix<T>,
    /// `∂loss/∂θ` for the batch task; zero when `θ` sits outside the clamp range.
    pub grad_theta: T,
    /// `∂loss/∂S` for the query→target similarity matrix.
    pub grad_similarities: DenseMatrix<T>,
    /// Query→target false-negative mask (true = excluded).
    pub mask: Mask,
    /// Hardness weights: 1 on positives, 0 on masked entries, `exp(α·s)` elsewhere.
    pub weights: DenseMatrix<T>,
    pub tau: T,
    /// Query→target loss term of each query; `loss` is their mean unless the
    /// loss is symmetric.
    pub row_losses: Vec<T>,
}

/// Marks `(i, j)` when `j` is not `i`'s positive and `sim(target_j, target_π(i)) > delta`.
/// `delta = None` yields an all-false mask.
pub fn false_negative_mask<T: Scalar>(
    targets: &DenseMatrix<T>,
    positive_index: &[usize],
    delta: Option<f64>,
) -> Result<Mask> {
    let n = targets.rows();
    if positive_index.len() != n {
        return Err(Error::dims("positive_index length", n, positive_index.len()));
    }
    let mut mask = Mask::none(n, n);
    let Some(delta) = delta else {
        return Ok(mask);
    };
    let delta = T::lit(delta);
    let target_sims = similarity_matrix(targets, targets)?;
    for (i, &p) in positive_index.iter().enumerate() {
        for j in (0..n).filter(|&j| j != p) {
            if target_sims.get(j, p) > delta {
                mask.set(i, j, true);
            }
        }
    }
    Ok(mask)
}

/// `w_ij = exp(α·S_ij)` for unmasked negatives, 1 for the positive, 0 for masked entries.
pub fn hardness_weights<T: Scalar>(
    sims: &DenseMatrix<T>,
    positive_index: &[usize],
    alpha: f64,
    mask: &Mask,
) -> DenseMatrix<T> {
    let alpha = T::lit(alpha);
    let mut w = DenseMatrix::zeros(sims.rows(), sims.cols());
    for (i, &p) in positive_index.iter().enumerate() {
        for j in 0..sims.cols() {
            let v = if j == p {
                T::one()
            } else if mask.get(i, j) {
                T::zero()
            } else {
                (alpha * sims.get(i, j)).exp()
            };
            w.set(i, j, v);
        }
    }
    w
}

struct Directional<T> {
    loss: T,
    rows: Vec<T>,
    grad_sims: DenseMatrix<T>,
    grad_tau: T,
}

/// Mean per-row loss over a similarity matrix, with `∂/∂S` and `∂/∂τ`.
fn directional_loss<T: Scalar>(
    sims: &DenseMatrix<T>,
    positive_index: &[usize],
    mask: &Mask,
    alpha: T,
    tau: T,
    differentiate_weights: bool,
) -> Result<Directional<T>> {
    let (n, m) = sims.shape();
    let inv_tau = tau.recip();
    let neg_scale = inv_tau + alpha;
    let neg_grad_scale = if differentiate_weights { neg_scale } else { inv_tau };
    let tau_sq = tau * tau;
    let batch = T::lit(n as f64);

    let mut grad_sims = DenseMatrix::zeros(n, m);
    let mut total = T::zero();
    let mut rows = Vec::with_capacity(n);
    let mut grad_tau = T::zero();
    let mut cols = Vec::with_capacity(m);
    let mut logits = Vec::with_capacity(m);

    for (i, &p) in positive_index.iter().enumerate() {
        cols.clear();
        logits.clear();
        for j in 0..m {
            if j == p {
                cols.push(j);
                logits.push(sims.get(i, j) * inv_tau);
            } else if !mask.get(i, j) {
                cols.push(j);
                logits.push(sims.get(i, j) * neg_scale);
            }
        }
        let lse = logsumexp(&logits)?;
        let pos_logit = sims.get(i, p) * inv_tau;
        rows.push(lse - pos_logit);
        total = total + (lse - pos_logit);

        let mut expected_sim = T::zero();
        for (&j, &a) in cols.iter().zip(&logits) {
            let prob = (a - lse).exp();
            let s = sims.get(i, j);
            expected_sim = expected_sim + prob * s;
            let g = if j == p {
                (prob - T::one()) * inv_tau
            } else {
                prob * neg_grad_scale
            };
            grad_sims.set(i, j, g / batch);
        }
        grad_tau = grad_tau + (sims.get(i, p) - expected_sim) / tau_sq;
    }

    Ok(Directional {
        loss: total / batch,
        rows,
        grad_sims,
        grad_tau: grad_tau / batch,
    })
}

/// Plain InfoNCE (query→target) at a fixed temperature. `grad_theta` is reported
/// for `θ = ln τ`.
pub fn infonce_loss<T: Scalar>(batch: &ContrastiveBatch<T>, tau: T) -> Result<LossOutput<T>> {
    if tau <= T::zero() || !tau.is_finite() {
        return Err(Error::TemperatureNonPositive(tau.as_f64()));
    }
    let n = batch.len();
    let sims = similarity_matrix(&batch.queries, &batch.targets)?;
    let mask = Mask::none(n, n);
    let d = directional_loss(&sims, &batch.positive_index, &mask, T::zero(), tau, true)?;
    let weights = hardness_weights(&sims, &batch.positive_index, 0.0, &mask);
    Ok(LossOutput {
        loss: d.loss,
        grad_queries: d.grad_sims.matmul(&batch.targets)?,
        grad_targets: d.grad_sims.transpose().matmul(&batch.queries)?,
        grad_theta: d.grad_tau * tau,
        grad_similarities: d.grad_sims,
        mask,
        weights,
        tau,
        row_losses: d.rows,
    })
}

/// Hardness-weighted, false-negative-masked loss using the batch task's `θ` from `config`.
pub fn whnm_loss<T: Scalar>(batch: &ContrastiveBatch<T>, config: &LossConfig) -> Result<LossOutput<T>> {
    config.validate()?;
    let theta = config.theta(&batch.task_id)?;
    whnm_loss_with_theta(batch, config, T::lit(theta))
}

/// [`whnm_loss`] with an explicit `θ`; `config.theta_per_task` is ignored.
pub fn whnm_loss_with_theta<T: Scalar>(
    batch: &ContrastiveBatch<T>,
    config: &LossConfig,
    theta: T,
) -> Result<LossOutput<T>> {
    let tau = task_temperature(theta);
    if tau <= T::zero() || !tau.is_finite() {
        return Err(Error::TemperatureNonPositive(tau.as_f64()));
    }
    let alpha = T::lit(config.alpha);
    let inside_clamp = theta > T::lit(THETA_MIN) && theta < T::lit(THETA_MAX);

    let sims = similarity_matrix(&batch.queries, &batch.targets)?;
    let mask = false_negative_mask(&batch.targets, &batch.positive_index, config.delta)?;
    let fwd = directional_loss(
        &sims,
        &batch.positive_index,
        &mask,
        alpha,
        tau,
        config.differentiate_weights,
    )?;
    let weights = hardness_weights(&sims, &batch.positive_index, config.alpha, &mask);

    let mut grad_queries = fwd.grad_sims.matmul(&batch.targets)?;
    let mut grad_targets = fwd.grad_sims.transpose().matmul(&batch.queries)?;
    let mut loss = fwd.loss;
    let mut grad_tau = fwd.grad_tau;

    if config.symmetric {
        // targets act as anchors; their positives are the matching queries
        let inv = batch.inverse_positive_index();
        let rev_sims = sims.transpose();
        let rev_mask = false_negative_mask(&batch.queries, &inv, config.delta)?;
        let rev = directional_loss(&rev_sims, &inv, &rev_mask, alpha, tau, config.differentiate_weights)?;
        grad_targets.add_assign(&rev.grad_sims.matmul(&batch.queries)?)?;
        grad_queries.add_assign(&rev.grad_sims.transpose().matmul(&batch.targets)?)?;
        let half = T::lit(0.5);
        loss = (loss + rev.loss) * half;
        grad_tau = (grad_tau + rev.grad_tau) * half;
        grad_queries = grad_queries.scale(half);
        grad_targets = grad_targets.scale(half);
        let mut gs = fwd.grad_sims.add(&rev.grad_sims.transpose())?;
        gs = gs.scale(half);
        return Ok(LossOutput {
            loss,
            grad_queries,
            grad_targets,
            grad_theta: if inside_clamp { grad_tau * tau } else { T::zero() },
            grad_similarities: gs,
            mask,
            weights,
            tau,
            row_losses: fwd.rows,
        });
    }

    Ok(LossOutput {
        loss,
        grad_queries,
        grad_targets,
        grad_theta: if inside_clamp { grad_tau * tau } else { T::zero() },
        grad_similarities: fwd.grad_sims,
        mask,
        weights,
        tau,
        row_losses: fwd.rows,
    })
}
