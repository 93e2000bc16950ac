//! Contrastive multimodal-embedding training at desk scale: a weighted,
//! false-negative-masked InfoNCE loss with learnable per-task temperatures, a
//! hashed linear encoder with LoRA adapters, adapter souping, a synthetic
//! retrieval benchmark, and the training/evaluation harness around them.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod math;
pub mod sampler;
pub mod scalar;
pub mod souping;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use encoder::{encode, encode_backward, encode_batch, Featurizer, TrainMode};
pub use loss::{infonce_loss, whnm_loss, whnm_loss_with_theta, LossConfig};
pub use souping::{merge_into_base, soup_adapters, SoupStrategy};

pub type Matrix = math::DenseMatrix<f64>;
pub type Matrix32 = math::DenseMatrix<f32>;
pub type Embedding = math::EmbeddingVector<f64>;
pub type Embedding32 = math::EmbeddingVector<f32>;
pub type Params = encoder::EncoderParams<f64>;
pub type Params32 = encoder::EncoderParams<f32>;
pub type Adapter = encoder::LoraAdapter<f64>;
pub type Adapter32 = encoder::LoraAdapter<f32>;
pub type Batch = loss::ContrastiveBatch<f64>;
pub type Batch32 = loss::ContrastiveBatch<f32>;
pub type Soup = souping::SoupSpec<f64>;
