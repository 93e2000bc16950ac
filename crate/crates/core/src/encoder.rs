//! Deterministic toy encoder: signed feature hashing of text, then a linear
//! projection with an optional low-rank adapter, then L2 normalization.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, normalize_rows_backward, DenseMatrix, EmbeddingVector};
use crate::scalar::Scalar;

pub const DEFAULT_DIM_IN: usize = 64;
pub const DEFAULT_DIM_OUT: usize = 32;
pub const DEFAULT_RANK: usize = 4;
/// Adapter rank used for billion-parameter backbones; far too large for the toy encoder.
pub const BACKBONE_RANK: usize = 64;
pub const LORA_INIT_STD: f64 = 0.02;

const WORD_WEIGHT: f64 = 1.0;
const TRIGRAM_WEIGHT: f64 = 0.5;

/// Signed feature hashing of lower-cased whitespace tokens and their padded
/// character trigrams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub dim_in: usize,
    pub seed: u64,
}

impl Featurizer {
    pub fn new(dim_in: usize, seed: u64) -> Self {
        Self { dim_in, seed }
    }

    fn bucket(&self, kind: u8, feature: &str) -> (usize, f64) {
        let mut h = FnvHasher::with_key(0xcbf2_9ce4_8422_2325 ^ self.seed);
        h.write_u8(kind);
        h.write(feature.as_bytes());
        let x = mix64(h.finish());
        let idx = (x % self.dim_in as u64) as usize;
        let sign = if x >> 63 == 0 { 1.0 } else { -1.0 };
        (idx, sign)
    }

    /// Unnormalized hashed feature vector of length `dim_in`.
    pub fn featurize<T: Scalar>(&self, text: &str) -> Result<EmbeddingVector<T>> {
        EmbeddingVector::new(self.featurize_f64(text)?.into_iter().map(T::lit).collect())
    }

    pub fn featurize_f64(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let mut out = vec![0.0; self.dim_in];
        for token in text.split_whitespace() {
            let token = token.to_lowercase();
            let (i, s) = self.bucket(b'w', &token);
            out[i] += s * WORD_WEIGHT;
            let padded: Vec<char> = format!("#{token}#").chars().collect();
            for tri in padded.windows(3) {
                let tri: String = tri.iter().collect();
                let (i, s) = self.bucket(b'c', &tri);
                out[i] += s * TRIGRAM_WEIGHT;
            }
        }
        Ok(out)
    }
}

// splitmix64 finalizer; FNV's low bits are weak for small moduli
fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Low-rank adapter `Δ = scaling · B·A` with `A: r × d_in`, `B: d_out × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: DenseMatrix<T>,
    pub b: DenseMatrix<T>,
    pub scaling: T,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(a: DenseMatrix<T>, b: DenseMatrix<T>, scaling: T) -> Result<Self> {
        if a.rows() == 0 {
            return Err(Error::ShapeMismatch("adapter rank must be >= 1".into()));
        }
        if b.cols() != a.rows() {
            return Err(Error::ShapeMismatch(format!(
                "adapter factors disagree on rank: B is {:?}, A is {:?}",
                b.shape(),
                a.shape()
            )));
        }
        if !scaling.is_finite() {
            return Err(Error::NonFinite("adapter scaling"));
        }
        Ok(Self { a, b, scaling })
    }

    /// Standard init: `A ~ N(0, 0.02²)`, `B = 0`, `scaling = lora_alpha / rank`.
    pub fn init(rank: usize, d_in: usize, d_out: usize, lora_alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::ShapeMismatch("adapter rank must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(&mut rng, rank, d_in, LORA_INIT_STD);
        Self::new(a, DenseMatrix::zeros(d_out, rank), T::lit(lora_alpha / rank as f64))
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn delta(&self) -> DenseMatrix<T> {
        self.b
            .matmul(&self.a)
            .expect("factor shapes checked at construction")
            .scale(self.scaling)
    }
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DenseMatrix<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let values = (0..rows * cols).map(|_| T::lit(normal.sample(rng))).collect();
    DenseMatrix::new(rows, cols, values).expect("finite gaussian draws")
}

/// Which parameters receive gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Base weight and bias only.
    Base,
    /// Adapter factors only; the base is frozen.
    Adapter,
    /// Everything.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub weight: DenseMatrix<T>,
    pub bias: Vec<T>,
    pub adapter: Option<LoraAdapter<T>>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn new(weight: DenseMatrix<T>, bias: Vec<T>, adapter: Option<LoraAdapter<T>>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::dims("bias length", weight.rows(), bias.len()));
        }
        if let Some(ad) = &adapter {
            if ad.d_in() != weight.cols() || ad.d_out() != weight.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "adapter maps {}→{} but base maps {}→{}",
                    ad.d_in(),
                    ad.d_out(),
                    weight.cols(),
                    weight.rows()
                )));
            }
        }
        Ok(Self { weight, bias, adapter })
    }

    /// Gaussian base weights with std `1/√d_in`, zero bias, no adapter.
    pub fn random(d_in: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = gaussian(&mut rng, d_out, d_in, 1.0 / (d_in as f64).sqrt());
        Self {
            weight,
            bias: vec![T::zero(); d_out],
            adapter: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    /// `W + Δ` when an adapter is attached, else `W`.
    pub fn effective_weight(&self) -> DenseMatrix<T> {
        match &self.adapter {
            Some(ad) => self
                .weight
                .add(&ad.delta())
                .expect("adapter shape checked at construction"),
            None => self.weight.clone(),
        }
    }
}

/// Encodes one feature vector into a unit-norm embedding.
pub fn encode<T: Scalar>(x: &EmbeddingVector<T>, params: &EncoderParams<T>) -> Result<EmbeddingVector<T>> {
    if x.dim() != params.d_in() {
        return Err(Error::dims("encoder input", params.d_in(), x.dim()));
    }
    let mut y = params.effective_weight().matvec(x.values())?;
    for (v, &b) in y.iter_mut().zip(&params.bias) {
        *v = *v + b;
    }
    crate::math::l2_normalize(&EmbeddingVector::new(y)?)
}

/// Batch forward pass; keeps the pre-normalization outputs for the backward pass.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub raw: DenseMatrix<T>,
    pub unit: DenseMatrix<T>,
}

pub fn encode_batch<T: Scalar>(inputs: &DenseMatrix<T>, params: &EncoderParams<T>) -> Result<Encoded<T>> {
    if inputs.cols() != params.d_in() {
        return Err(Error::dims("encoder input", params.d_in(), inputs.cols()));
    }
    let w = params.effective_weight();
    let mut raw = inputs.matmul_transposed(&w)?;
    for i in 0..raw.rows() {
        for (v, &b) in raw.row_mut(i).iter_mut().zip(&params.bias) {
            *v = *v + b;
        }
    }
    let unit = raw.normalize_rows()?;
    Ok(Encoded { raw, unit })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub weight: DenseMatrix<T>,
    pub bias: Vec<T>,
    pub lora_a: Option<DenseMatrix<T>>,
    pub lora_b: Option<DenseMatrix<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &EncoderParams<T>) -> Self {
        Self {
            weight: DenseMatrix::zeros(params.d_out(), params.d_in()),
            bias: vec![T::zero(); params.d_out()],
            lora_a: params
                .adapter
                .as_ref()
                .map(|a| DenseMatrix::zeros(a.a.rows(), a.a.cols())),
            lora_b: params
                .adapter
                .as_ref()
                .map(|a| DenseMatrix::zeros(a.b.rows(), a.b.cols())),
        }
    }

    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        self.weight.add_assign(&other.weight)?;
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a = *a + b;
        }
        if let (Some(a), Some(b)) = (&mut self.lora_a, &other.lora_a) {
            a.add_assign(b)?;
        }
        if let (Some(a), Some(b)) = (&mut self.lora_b, &other.lora_b) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

/// Gradients of a downstream loss w.r.t. the encoder parameters, given the
/// gradient w.r.t. the normalized outputs of `inputs`.
pub fn encode_backward<T: Scalar>(
    inputs: &DenseMatrix<T>,
    params: &EncoderParams<T>,
    upstream: &DenseMatrix<T>,
    mode: TrainMode,
) -> Result<ParamGrads<T>> {
    if upstream.rows() != inputs.rows() {
        return Err(Error::dims("upstream rows", inputs.rows(), upstream.rows()));
    }
    if upstream.cols() != params.d_out() {
        return Err(Error::dims("upstream cols", params.d_out(), upstream.cols()));
    }
    let enc = encode_batch(inputs, params)?;
    let grad_raw = normalize_rows_backward(&enc.raw, upstream)?;

    // ∂L/∂W_eff = Gᵀ·X, ∂L/∂b = column sums of G
    let grad_eff = grad_raw.transpose().matmul(inputs)?;
    let mut grad_bias = vec![T::zero(); params.d_out()];
    for row in grad_raw.row_iter() {
        for (g, &v) in grad_bias.iter_mut().zip(row) {
            *g = *g + v;
        }
    }

    let train_base = matches!(mode, TrainMode::Base | TrainMode::All);
    let train_adapter = matches!(mode, TrainMode::Adapter | TrainMode::All);

    let (lora_a, lora_b) = match &params.adapter {
        Some(ad) if train_adapter => {
            let ga = ad.b.transpose().matmul(&grad_eff)?.scale(ad.scaling);
            let gb = grad_eff.matmul(&ad.a.transpose())?.scale(ad.scaling);
            (Some(ga), Some(gb))
        }
        Some(ad) => (
            Some(DenseMatrix::zeros(ad.a.rows(), ad.a.cols())),
            Some(DenseMatrix::zeros(ad.b.rows(), ad.b.cols())),
        ),
        None => (None, None),
    };

    let (weight, bias) = if train_base {
        (grad_eff, grad_bias)
    } else {
        (
            DenseMatrix::zeros(params.d_out(), params.d_in()),
            vec![T::zero(); params.d_out()],
        )
    };
    Ok(ParamGrads {
        weight,
        bias,
        lora_a,
        lora_b,
    })
}

/// Cosine similarity of two raw feature vectors (0 when either is zero).
pub fn feature_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}
