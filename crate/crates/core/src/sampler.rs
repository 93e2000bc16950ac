//! Single-dataset batch construction.
//!
//! Each step picks one dataset with probability proportional to
//! `resample_weight × size`, then draws `batch_size` records from it without
//! replacement. Batches are a pure function of `(manifest, config, step)`: the
//! generator for step `s` is the seed's ChaCha stream number `s`.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Record, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    /// Per-dataset multiplier on the size-proportional choice; missing ids weigh 1.
    #[serde(default)]
    pub resample_weights: BTreeMap<String, f64>,
    /// Forbid repeated target texts inside classification batches.
    #[serde(default)]
    pub dedup_classification_targets: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            resample_weights: BTreeMap::new(),
            dedup_classification_targets: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if let Some((k, w)) = self.resample_weights.iter().find(|(_, w)| !w.is_finite() || **w <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "resample weight for `{k}` must be positive, got {w}"
            )));
        }
        Ok(())
    }

    pub fn weight(&self, dataset_id: &str) -> f64 {
        self.resample_weights.get(dataset_id).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct SampledBatch<'a> {
    pub dataset_id: &'a str,
    pub task_kind: TaskKind,
    pub records: Vec<&'a Record>,
}

pub struct Sampler<'a> {
    manifest: &'a DatasetManifest,
    config: SamplerConfig,
    ids: Vec<&'a str>,
    cumulative: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub fn new(manifest: &'a DatasetManifest, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let mut ids = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0.0;
        for (id, recs) in &manifest.datasets {
            if recs.is_empty() {
                return Err(Error::InvalidConfig(format!("dataset `{id}` is empty")));
            }
            total += config.weight(id) * recs.len() as f64;
            ids.push(id.as_str());
            cumulative.push(total);
        }
        if ids.is_empty() {
            return Err(Error::InvalidConfig("sampler needs at least one dataset".into()));
        }
        Ok(Self {
            manifest,
            config,
            ids,
            cumulative,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Probability of drawing each dataset.
    pub fn dataset_probabilities(&self) -> BTreeMap<String, f64> {
        let total = *self.cumulative.last().expect("nonempty");
        let mut prev = 0.0;
        self.ids
            .iter()
            .zip(&self.cumulative)
            .map(|(id, &c)| {
                let p = (c - prev) / total;
                prev = c;
                (id.to_string(), p)
            })
            .collect()
    }

    /// Fails if any dataset could not fill a batch.
    pub fn check_feasible(&self) -> Result<()> {
        for id in &self.ids {
            let recs = &self.manifest.datasets[*id];
            let available = if self.dedups(recs) {
                distinct_targets(recs)
            } else {
                recs.len()
            };
            if available < self.config.batch_size {
                return Err(Error::BatchInfeasible {
                    dataset: id.to_string(),
                    available,
                    needed: self.config.batch_size,
                });
            }
        }
        Ok(())
    }

    fn dedups(&self, recs: &[Record]) -> bool {
        self.config.dedup_classification_targets && recs.first().is_some_and(|r| r.task_kind == TaskKind::ImgCls)
    }

    pub fn next_batch(&self, step: usize) -> Result<SampledBatch<'a>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64);

        let total = *self.cumulative.last().expect("nonempty");
        let u = rng.random_range(0.0..total);
        let pick = self.cumulative.partition_point(|&c| c <= u).min(self.ids.len() - 1);
        let dataset_id = self.ids[pick];
        let recs = &self.manifest.datasets[dataset_id];
        let n = self.config.batch_size;

        let records: Vec<&Record> = if self.dedups(recs) {
            let mut order: Vec<usize> = (0..recs.len()).collect();
            order.shuffle(&mut rng);
            let mut seen = HashSet::new();
            let picked: Vec<&Record> = order
                .into_iter()
                .map(|i| &recs[i])
                .filter(|r| seen.insert(r.target_text.as_str()))
                .take(n)
                .collect();
            if picked.len() < n {
                return Err(Error::BatchInfeasible {
                    dataset: dataset_id.to_string(),
                    available: picked.len(),
                    needed: n,
                });
            }
            picked
        } else {
            if recs.len() < n {
                return Err(Error::BatchInfeasible {
                    dataset: dataset_id.to_string(),
                    available: recs.len(),
                    needed: n,
                });
            }
            index::sample(&mut rng, recs.len(), n)
                .into_iter()
                .map(|i| &recs[i])
                .collect()
        };

        Ok(SampledBatch {
            dataset_id,
            task_kind: recs[0].task_kind,
            records,
        })
    }
}

fn distinct_targets(recs: &[Record]) -> usize {
    recs.iter()
        .map(|r| r.target_text.as_str())
        .collect::<HashSet<_>>()
        .len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_benchmark, merge_classification_datasets, GenSpec};

    fn two_datasets(n: usize) -> DatasetManifest {
        let mut m = DatasetManifest::default();
        for (ds, kind) in [("image", TaskKind::ImgRet), ("video", TaskKind::VidRet)] {
            let recs = (0..n)
                .map(|i| Record {
                    id: format!("{ds}{i}"),
                    dataset_id: ds.into(),
                    task_kind: kind,
                    group_id: None,
                    query_text: format!("q{i}"),
                    target_text: format!("t{i}"),
                    gold_group: format!("{ds}{i}"),
                })
                .collect();
            m.datasets.insert(ds.into(), recs);
        }
        m
    }

    fn config(batch: usize) -> SamplerConfig {
        SamplerConfig {
            batch_size: batch,
            seed: 17,
            ..Default::default()
        }
    }

    #[test]
    fn equal_weights_split_evenly() {
        let m = two_datasets(50);
        let s = Sampler::new(&m, config(8)).unwrap();
        let image = (0..10_000)
            .filter(|&t| s.next_batch(t).unwrap().dataset_id == "image")
            .count();
        let frac = image as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "image fraction {frac}");
    }

    #[test]
    fn resample_weights_tilt_the_mix() {
        let m = two_datasets(50);
        let mut c = config(8);
        c.resample_weights = BTreeMap::from([("video".into(), 0.5), ("image".into(), 1.5)]);
        let s = Sampler::new(&m, c).unwrap();
        let image = (0..10_000)
            .filter(|&t| s.next_batch(t).unwrap().dataset_id == "image")
            .count();
        let ratio = image as f64 / (10_000 - image) as f64;
        assert!((ratio - 3.0).abs() < 0.25, "image/video ratio {ratio}");
    }

    #[test]
    fn batches_are_single_dataset_and_without_replacement() {
        let m = two_datasets(20);
        let s = Sampler::new(&m, config(16)).unwrap();
        for t in 0..200 {
            let b = s.next_batch(t).unwrap();
            assert_eq!(b.records.len(), 16);
            assert!(b.records.iter().all(|r| r.dataset_id == b.dataset_id));
            assert!(b.records.iter().all(|r| r.task_kind == b.task_kind));
            let ids: HashSet<_> = b.records.iter().map(|r| &r.id).collect();
            assert_eq!(ids.len(), 16);
        }
    }

    #[test]
    fn same_step_same_batch() {
        let m = two_datasets(30);
        let a = Sampler::new(&m, config(8)).unwrap();
        let b = Sampler::new(&m, config(8)).unwrap();
        for t in [0, 1, 99, 12345] {
            let x: Vec<_> = a
                .next_batch(t)
                .unwrap()
                .records
                .iter()
                .map(|r| &r.id)
                .cloned()
                .collect();
            let y: Vec<_> = b
                .next_batch(t)
                .unwrap()
                .records
                .iter()
                .map(|r| &r.id)
                .cloned()
                .collect();
            assert_eq!(x, y);
        }
        let first: Vec<_> = a.next_batch(0).unwrap().records.iter().map(|r| r.id.clone()).collect();
        let second: Vec<_> = a.next_batch(1).unwrap().records.iter().map(|r| r.id.clone()).collect();
        assert_ne!(first, second);
    }

    #[test]
    fn merged_classification_dedup_gives_distinct_labels() {
        let full = generate_benchmark(&GenSpec::desk_default(1)).unwrap();
        let cls_only = full.filter_datasets(&["cls_memes".to_string(), "cls_voc".to_string(), "cls_news".to_string()]);
        let merged = merge_classification_datasets(&cls_only).unwrap();
        assert_eq!(merged.metadata.label_sets["img_cls_merged"].len(), 46);
        let mut c = config(16);
        c.dedup_classification_targets = true;
        let s = Sampler::new(&merged, c).unwrap();
        s.check_feasible().unwrap();
        for t in 0..100 {
            let b = s.next_batch(t).unwrap();
            let labels: HashSet<_> = b.records.iter().map(|r| &r.target_text).collect();
            assert_eq!(labels.len(), 16);
        }
    }

    #[test]
    fn dedup_on_tiny_label_set_is_infeasible() {
        let full = generate_benchmark(&GenSpec::desk_default(1)).unwrap();
        let memes = full.filter_datasets(&["cls_memes".to_string()]);
        let mut c = config(16);
        c.dedup_classification_targets = true;
        let s = Sampler::new(&memes, c).unwrap();
        assert!(matches!(
            s.check_feasible(),
            Err(Error::BatchInfeasible { available: 2, .. })
        ));
        assert!(matches!(s.next_batch(0), Err(Error::BatchInfeasible { .. })));
    }

    #[test]
    fn invalid_configs() {
        let m = two_datasets(10);
        assert!(Sampler::new(&m, config(1)).is_err());
        let mut c = config(4);
        c.resample_weights.insert("image".into(), 0.0);
        assert!(Sampler::new(&m, c).is_err());
        assert!(Sampler::new(&DatasetManifest::default(), config(4)).is_err());
    }
}
