//! Typed records, manifests and the synthetic benchmark they are generated from.

mod generate;
mod manifest;
mod prompt;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{generate_benchmark, DatasetSpec, GenSpec};
pub use manifest::{read_manifest, write_manifest};
pub use prompt::{build_prompt, PromptTemplate, Side};

/// Dataset id given to the union of all image classification datasets.
pub const MERGED_CLASSIFICATION_ID: &str = "img_cls_merged";

/// Per-dataset record cap used for billion-parameter training runs.
pub const BACKBONE_DATASET_CAP: usize = 100_000;
/// Per-dataset record cap at desk scale.
pub const DEFAULT_DATASET_CAP: usize = 1_000;

/// The seven task groups; each owns one learnable temperature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ImgCls,
    ImgQa,
    ImgRet,
    ImgGround,
    DocRet,
    VidRet,
    VidQa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::ImgCls,
        TaskKind::ImgQa,
        TaskKind::ImgRet,
        TaskKind::ImgGround,
        TaskKind::DocRet,
        TaskKind::VidRet,
        TaskKind::VidQa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ImgCls => "img_cls",
            TaskKind::ImgQa => "img_qa",
            TaskKind::ImgRet => "img_ret",
            TaskKind::ImgGround => "img_ground",
            TaskKind::DocRet => "doc_ret",
            TaskKind::VidRet => "vid_ret",
            TaskKind::VidQa => "vid_qa",
        }
    }

    /// Whether the query side carries an image or video (vs. plain text).
    pub fn query_is_multimodal(self) -> bool {
        matches!(
            self,
            TaskKind::ImgCls | TaskKind::ImgQa | TaskKind::ImgGround | TaskKind::VidQa
        )
    }

    pub fn is_video(self) -> bool {
        matches!(self, TaskKind::VidRet | TaskKind::VidQa)
    }

    pub fn is_image(self) -> bool {
        matches!(
            self,
            TaskKind::ImgCls | TaskKind::ImgQa | TaskKind::ImgRet | TaskKind::ImgGround
        )
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::SpecInvalid(format!("unknown task kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub dataset_id: String,
    pub task_kind: TaskKind,
    /// Clips cut from one source share a group id.
    #[serde(default)]
    pub group_id: Option<String>,
    pub query_text: String,
    pub target_text: String,
    /// Equivalence class for evaluation; never shown to the trainer.
    pub gold_group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ManifestMetadata {
    pub seed: u64,
    pub p_fn: f64,
    /// Label names per classification dataset.
    #[serde(default)]
    pub label_sets: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub datasets: BTreeMap<String, Vec<Record>>,
    pub metadata: ManifestMetadata,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for (dataset_id, records) in &self.datasets {
            let mut kind = None;
            for r in records {
                if !ids.insert(r.id.as_str()) {
                    return Err(Error::DuplicateId(r.id.clone()));
                }
                if &r.dataset_id != dataset_id {
                    return Err(Error::SpecInvalid(format!(
                        "record `{}` filed under `{dataset_id}` but names `{}`",
                        r.id, r.dataset_id
                    )));
                }
                match kind {
                    None => kind = Some(r.task_kind),
                    Some(k) if k != r.task_kind => {
                        return Err(Error::SpecInvalid(format!(
                            "dataset `{dataset_id}` mixes task kinds {k} and {}",
                            r.task_kind
                        )))
                    }
                    _ => {}
                }
            }
            if kind == Some(TaskKind::ImgCls) && !self.metadata.label_sets.contains_key(dataset_id) {
                return Err(Error::SpecInvalid(format!(
                    "classification dataset `{dataset_id}` declares no label set"
                )));
            }
        }
        Ok(())
    }

    pub fn task_kind(&self, dataset_id: &str) -> Option<TaskKind> {
        self.datasets
            .get(dataset_id)
            .and_then(|r| r.first())
            .map(|r| r.task_kind)
    }

    pub fn len(&self) -> usize {
        self.datasets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.datasets.values().flatten()
    }

    /// Keeps only the named datasets.
    pub fn filter_datasets(&self, keep: &[String]) -> Self {
        Self {
            datasets: self
                .datasets
                .iter()
                .filter(|(k, _)| keep.contains(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            metadata: ManifestMetadata {
                label_sets: self
                    .metadata
                    .label_sets
                    .iter()
                    .filter(|(k, _)| keep.contains(k))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect(),
                ..self.metadata.clone()
            },
        }
    }
}

/// Replaces every `img_cls` dataset by one dataset whose label space is the
/// disjoint union of the sources (labels and gold groups prefixed `source:`).
pub fn merge_classification_datasets(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    let sources: Vec<&String> = manifest
        .datasets
        .iter()
        .filter(|(_, recs)| recs.first().is_some_and(|r| r.task_kind == TaskKind::ImgCls))
        .map(|(k, _)| k)
        .collect();
    if sources.is_empty() {
        return Err(Error::NoClassificationData);
    }
    let mut out = manifest.clone();
    let mut merged = Vec::new();
    let mut labels = Vec::new();
    for src in sources {
        let recs = out.datasets.remove(src).unwrap_or_default();
        for mut r in recs {
            r.dataset_id = MERGED_CLASSIFICATION_ID.to_string();
            r.gold_group = format!("{src}:{}", r.gold_group);
            merged.push(r);
        }
        if let Some(ls) = out.metadata.label_sets.remove(src) {
            labels.extend(ls.into_iter().map(|l| format!("{src}:{l}")));
        }
    }
    out.datasets.insert(MERGED_CLASSIFICATION_ID.to_string(), merged);
    out.metadata
        .label_sets
        .insert(MERGED_CLASSIFICATION_ID.to_string(), labels);
    Ok(out)
}

/// Seeded uniform subsample of exactly `cap` records (original order kept);
/// inputs at or under the cap are returned unchanged.
pub fn cap_dataset(records: &[Record], cap: usize, seed: u64) -> Vec<Record> {
    let cap = cap.max(1);
    if records.len() <= cap {
        return records.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, records.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| records[i].clone()).collect()
}

/// Applies [`cap_dataset`] to every dataset.
pub fn cap_manifest(manifest: &DatasetManifest, cap: usize, seed: u64) -> DatasetManifest {
    DatasetManifest {
        datasets: manifest
            .datasets
            .iter()
            .map(|(k, v)| (k.clone(), cap_dataset(v, cap, seed)))
            .collect(),
        metadata: manifest.metadata.clone(),
    }
}

/// Seeded per-dataset holdout: returns `(train, heldout)`.
pub fn split_holdout(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::SpecInvalid(format!(
            "holdout fraction {fraction} outside [0, 1)"
        )));
    }
    let mut train = DatasetManifest {
        metadata: manifest.metadata.clone(),
        ..Default::default()
    };
    let mut held = train.clone();
    for (k, recs) in &manifest.datasets {
        let n_held = ((recs.len() as f64) * fraction).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv_str(k));
        let held_idx: BTreeSet<usize> = index::sample(&mut rng, recs.len(), n_held).into_iter().collect();
        let (h, t): (Vec<_>, Vec<_>) = recs.iter().enumerate().partition(|(i, _)| held_idx.contains(i));
        train
            .datasets
            .insert(k.clone(), t.into_iter().map(|(_, r)| r.clone()).collect());
        held.datasets
            .insert(k.clone(), h.into_iter().map(|(_, r)| r.clone()).collect());
    }
    Ok((train, held))
}

fn fnv_str(s: &str) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}
