//! Consolidating several low-rank adapters into one.
//!
//! Factors are never averaged directly: `mean(Bᵢ)·mean(Aᵢ)` is not the mean of
//! `Bᵢ·Aᵢ`. Instead the composed deltas are averaged, and `FactorSvd`
//! re-factors the average into a rank-`r` adapter through a truncated SVD.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, LoraAdapter};
use crate::error::{Error, Result};
use crate::math::DenseMatrix;
use crate::scalar::Scalar;

const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SoupStrategy {
    /// Weighted sum of the composed deltas, kept dense.
    #[default]
    DeltaAverage,
    /// Best rank-`r` approximation of the weighted sum, as a new adapter with scaling 1.
    FactorSvd,
}

#[derive(Debug, Clone)]
pub struct SoupSpec<T> {
    pub adapters: Vec<LoraAdapter<T>>,
    pub weights: Vec<f64>,
    pub strategy: SoupStrategy,
    /// Target rank for `FactorSvd`; defaults to the largest input rank.
    pub rank: Option<usize>,
}

impl<T: Scalar> SoupSpec<T> {
    /// Equal weights over all adapters.
    pub fn uniform(adapters: Vec<LoraAdapter<T>>, strategy: SoupStrategy) -> Self {
        let n = adapters.len().max(1);
        Self {
            weights: vec![1.0 / n as f64; adapters.len()],
            adapters,
            strategy,
            rank: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_weights(&self.weights, self.adapters.len())?;
        let first = &self.adapters[0];
        for (i, ad) in self.adapters.iter().enumerate().skip(1) {
            if ad.d_in() != first.d_in() || ad.d_out() != first.d_out() {
                return Err(Error::ShapeMismatch(format!(
                    "adapter {i} maps {}→{}, adapter 0 maps {}→{}",
                    ad.d_in(),
                    ad.d_out(),
                    first.d_in(),
                    first.d_out()
                )));
            }
        }
        if self.rank == Some(0) {
            return Err(Error::ShapeMismatch("soup rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// Checks that `weights` has `expected` entries, each finite and `>= 0`, summing to 1.
pub fn validate_weights(weights: &[f64], expected: usize) -> Result<()> {
    if expected == 0 {
        return Err(Error::WeightsInvalid("need at least one adapter".into()));
    }
    if weights.len() != expected {
        return Err(Error::WeightsInvalid(format!(
            "{} weights for {expected} adapters",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::WeightsInvalid(format!("weight {w} is negative or non-finite")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::WeightsInvalid(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum MergedAdapter<T> {
    Dense(DenseMatrix<T>),
    Factored(LoraAdapter<T>),
}

impl<T: Scalar> MergedAdapter<T> {
    pub fn delta(&self) -> DenseMatrix<T> {
        match self {
            MergedAdapter::Dense(d) => d.clone(),
            MergedAdapter::Factored(a) => a.delta(),
        }
    }
}

pub fn soup_adapters<T: Scalar>(spec: &SoupSpec<T>) -> Result<MergedAdapter<T>> {
    spec.validate()?;
    let first = &spec.adapters[0];
    let mut sum = DenseMatrix::zeros(first.d_out(), first.d_in());
    for (ad, &w) in spec.adapters.iter().zip(&spec.weights) {
        sum.add_assign(&ad.delta().scale(T::lit(w)))?;
    }
    match spec.strategy {
        SoupStrategy::DeltaAverage => Ok(MergedAdapter::Dense(sum)),
        SoupStrategy::FactorSvd => {
            let rank = spec
                .rank
                .unwrap_or_else(|| spec.adapters.iter().map(LoraAdapter::rank).max().unwrap_or(1));
            Ok(MergedAdapter::Factored(truncated_factorization(&sum, rank)?))
        }
    }
}

/// Splits `m ≈ U_r Σ_r V_rᵀ` into `B = U_r √Σ_r`, `A = √Σ_r V_rᵀ` with scaling 1.
pub fn truncated_factorization<T: Scalar>(m: &DenseMatrix<T>, rank: usize) -> Result<LoraAdapter<T>> {
    let (rows, cols) = m.shape();
    let r = rank.min(rows.min(cols)).max(1);
    let dm = DMatrix::from_row_iterator(rows, cols, m.as_slice().iter().map(|v| v.as_f64()));
    let svd = dm.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let mut b = DenseMatrix::zeros(rows, rank);
    let mut a = DenseMatrix::zeros(rank, cols);
    for (k, &idx) in order.iter().take(r).enumerate() {
        let root = svd.singular_values[idx].max(0.0).sqrt();
        for i in 0..rows {
            b.set(i, k, T::lit(u[(i, idx)] * root));
        }
        for j in 0..cols {
            a.set(k, j, T::lit(vt[(idx, j)] * root));
        }
    }
    LoraAdapter::new(a, b, T::one())
}

/// `W ← W + delta`, dropping any attached adapter.
pub fn merge_into_base<T: Scalar>(params: &EncoderParams<T>, delta: &DenseMatrix<T>) -> Result<EncoderParams<T>> {
    if delta.shape() != params.weight.shape() {
        return Err(Error::ShapeMismatch(format!(
            "delta is {:?}, base weight is {:?}",
            delta.shape(),
            params.weight.shape()
        )));
    }
    EncoderParams::new(params.weight.add(delta)?, params.bias.clone(), None)
}

/// Folds the attached adapter (if any) into the base weight.
pub fn merge_adapter<T: Scalar>(params: &EncoderParams<T>) -> Result<EncoderParams<T>> {
    match &params.adapter {
        Some(ad) => merge_into_base(params, &ad.delta()),
        None => Ok(params.clone()),
    }
}

/// Weighted average of per-task log-temperatures; a task missing from some
/// inputs is averaged over the inputs that have it (weights renormalized).
pub fn soup_thetas(thetas: &[BTreeMap<String, f64>], weights: &[f64]) -> Result<BTreeMap<String, f64>> {
    validate_weights(weights, thetas.len())?;
    let mut acc: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for (map, &w) in thetas.iter().zip(weights) {
        for (task, &theta) in map {
            let e = acc.entry(task.clone()).or_insert((0.0, 0.0));
            e.0 += w * theta;
            e.1 += w;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(k, (s, w))| (k, if w > 0.0 { s / w } else { s }))
        .collect())
}
