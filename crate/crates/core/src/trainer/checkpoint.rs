//! JSON checkpoints. Floats are written in shortest round-trip form, so
//! save → load → save is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, LoraAdapter};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_to_string};
use crate::math::DenseMatrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub d_in: usize,
    pub d_out: usize,
    /// 0 when no adapter is attached (`A` and `B` are then empty).
    pub rank: usize,
    #[serde(rename = "W")]
    pub weight: Vec<Vec<f64>>,
    #[serde(rename = "b")]
    pub bias: Vec<f64>,
    #[serde(rename = "A")]
    pub lora_a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub lora_b: Vec<Vec<f64>>,
    pub scaling: f64,
    pub theta_per_task: BTreeMap<String, f64>,
    pub rng_seed: u64,
    /// Seed of the hashing featurizer the weights were trained against.
    #[serde(default)]
    pub featurizer_seed: u64,
    /// Whether queries were wrapped in prompts during the final stage.
    #[serde(default)]
    pub prompting_enabled: bool,
}

impl Checkpoint {
    pub fn from_params(params: &EncoderParams<f64>, theta_per_task: BTreeMap<String, f64>, rng_seed: u64) -> Self {
        let (rank, lora_a, lora_b, scaling) = match &params.adapter {
            Some(ad) => (ad.rank(), ad.a.to_rows(), ad.b.to_rows(), ad.scaling),
            None => (0, Vec::new(), Vec::new(), 0.0),
        };
        Self {
            format_version: FORMAT_VERSION,
            d_in: params.d_in(),
            d_out: params.d_out(),
            rank,
            weight: params.weight.to_rows(),
            bias: params.bias.clone(),
            lora_a,
            lora_b,
            scaling,
            theta_per_task,
            rng_seed,
            featurizer_seed: 0,
            prompting_enabled: false,
        }
    }

    pub fn params(&self) -> Result<EncoderParams<f64>> {
        let weight = matrix(&self.weight, self.d_out, self.d_in, "W")?;
        let adapter = if self.rank == 0 {
            if !self.lora_a.is_empty() || !self.lora_b.is_empty() {
                return Err(Error::ShapeMismatch("rank 0 checkpoint carries adapter factors".into()));
            }
            None
        } else {
            Some(LoraAdapter::new(
                matrix(&self.lora_a, self.rank, self.d_in, "A")?,
                matrix(&self.lora_b, self.d_out, self.rank, "B")?,
                self.scaling,
            )?)
        };
        EncoderParams::new(weight, self.bias.clone(), adapter)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::VersionMismatch {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: FORMAT_VERSION,
                })
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing integer `format_version`".into(),
                })
            }
        }
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(parse_err)?;
        ckpt.params()?;
        if let Some((k, _)) = ckpt.theta_per_task.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::InvalidConfig(format!("theta for `{k}` is not finite")));
        }
        Ok(ckpt)
    }
}

fn matrix(rows: &[Vec<f64>], r: usize, c: usize, name: &str) -> Result<DenseMatrix<f64>> {
    if rows.len() != r {
        return Err(Error::ShapeMismatch(format!(
            "{name} has {} rows, expected {r}",
            rows.len()
        )));
    }
    if let Some(bad) = rows.iter().find(|row| row.len() != c) {
        return Err(Error::ShapeMismatch(format!(
            "{name} has a row of length {}, expected {c}",
            bad.len()
        )));
    }
    DenseMatrix::new(r, c, rows.concat())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, ckpt.to_json()?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = EncoderParams::<f64>::random(6, 4, 3);
        p.bias = vec![0.1, -0.0, 1e-300, std::f64::consts::PI];
        let mut ad = LoraAdapter::init(2, 6, 4, 2.0, 5).unwrap();
        ad.b.set(1, 1, 0.1 + 0.2);
        p.adapter = Some(ad);
        let thetas = BTreeMap::from([("img_cls".to_string(), 0.05f64.ln()), ("doc_ret".into(), -1.0 / 3.0)]);
        Checkpoint::from_params(&p, thetas, 42)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        let ck = sample();
        save_checkpoint(&ck, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, ck);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let p0 = ck.params().unwrap();
        let p1 = loaded.params().unwrap();
        for (x, y) in p0.weight.as_slice().iter().zip(p1.weight.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(p1.bias[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn merged_params_round_trip_with_rank_zero() {
        let p = EncoderParams::<f64>::random(3, 2, 1);
        let ck = Checkpoint::from_params(&p, BTreeMap::new(), 0);
        assert_eq!(ck.rank, 0);
        assert_eq!(
            Checkpoint::from_json(&ck.to_json().unwrap()).unwrap().params().unwrap(),
            p
        );
    }

    #[test]
    fn corrupt_file_is_a_parse_error() {
        let text = sample().to_json().unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(Checkpoint::from_json(cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn old_version_is_rejected() {
        let text = sample()
            .to_json()
            .unwrap()
            .replacen("\"format_version\": 1", "\"format_version\": 0", 1);
        assert!(matches!(
            Checkpoint::from_json(&text),
            Err(Error::VersionMismatch { found: 0, expected: 1 })
        ));
    }

    #[test]
    fn bad_shapes_are_rejected() {
        let mut ck = sample();
        ck.weight[2].pop();
        assert!(matches!(
            Checkpoint::from_json(&ck.to_json().unwrap()),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
