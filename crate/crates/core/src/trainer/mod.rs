//! Two-stage training: a continual stage that shapes the base projection with
//! plain prompts, then adapter fine-tuning with the weighted, masked loss and
//! learnable temperatures.

mod checkpoint;
mod optim;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use optim::{clip_global_norm, cosine_lr, AdamW, AdamWConfig};

use crate::data::{
    build_prompt, merge_classification_datasets, DatasetManifest, PromptTemplate, Record, Side, TaskKind,
};
use crate::encoder::{
    encode_backward, encode_batch, EncoderParams, Featurizer, LoraAdapter, TrainMode, DEFAULT_DIM_IN, DEFAULT_DIM_OUT,
    DEFAULT_RANK,
};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::loss::{clamp_theta, default_theta, whnm_loss_with_theta, ContrastiveBatch, LossConfig, SHARED_TASK};
use crate::math::DenseMatrix;
use crate::sampler::{Sampler, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Continual,
    Finetune,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Continual => "continual",
            StageName::Finetune => "finetune",
        }
    }
}

/// How the temperature of a batch is chosen and whether it learns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// One shared `θ`, held constant.
    #[default]
    Fixed,
    /// One shared `θ`, optimized.
    Shared,
    /// One optimized `θ` per task kind.
    PerTask,
}

impl TemperatureMode {
    pub fn learnable(self) -> bool {
        !matches!(self, TemperatureMode::Fixed)
    }

    pub fn key(self, kind: TaskKind) -> &'static str {
        match self {
            TemperatureMode::PerTask => kind.as_str(),
            _ => SHARED_TASK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d_out: usize,
    /// Adapter rank attached at the start of adapter-training stages.
    pub rank: usize,
    /// Adapter scaling is `lora_alpha / rank`.
    pub lora_alpha: f64,
    #[serde(default)]
    pub featurizer_seed: u64,
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: DEFAULT_DIM_IN,
            d_out: DEFAULT_DIM_OUT,
            rank: DEFAULT_RANK,
            lora_alpha: DEFAULT_RANK as f64,
            featurizer_seed: 0,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn featurizer(&self) -> Featurizer {
        Featurizer::new(self.d_in, self.featurizer_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: StageName,
    /// Restrict the stage to these dataset ids; all datasets when absent.
    #[serde(default)]
    pub datasets: Option<Vec<String>>,
    #[serde(default)]
    pub prompting_enabled: bool,
    /// Explicit step count; otherwise `epochs × ⌈records / batch_size⌉`.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Defaults to `base` for the continual stage and `adapter` for fine-tuning.
    #[serde(default)]
    pub train_mode: Option<TrainMode>,
    /// Replaces the run-level loss shape for this stage. Its `theta_per_task`
    /// is ignored: temperatures are carried in the training state.
    #[serde(default)]
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub temperature: TemperatureMode,
    #[serde(default)]
    pub merge_classification: bool,
    #[serde(default)]
    pub resample_weights: BTreeMap<String, f64>,
    #[serde(default)]
    pub dedup_classification_targets: bool,
    /// Stage-specific peak learning rate.
    #[serde(default)]
    pub lr0: Option<f64>,
}

impl StageConfig {
    /// Plain InfoNCE on the base projection, no prompts, fixed temperature.
    pub fn continual(steps: usize) -> Self {
        Self {
            name: StageName::Continual,
            datasets: None,
            prompting_enabled: false,
            steps: Some(steps),
            train_mode: None,
            loss: Some(LossConfig::infonce(default_theta())),
            temperature: TemperatureMode::Fixed,
            merge_classification: false,
            resample_weights: BTreeMap::new(),
            dedup_classification_targets: false,
            lr0: None,
        }
    }

    /// Adapter fine-tuning with every mechanism switched off; callers turn
    /// individual mechanisms on.
    pub fn finetune_baseline(steps: usize) -> Self {
        Self {
            name: StageName::Finetune,
            ..Self::continual(steps)
        }
    }

    /// Adapter fine-tuning with masking, hardness weighting, per-task
    /// temperatures, prompts and merged classification.
    pub fn finetune_full(steps: usize) -> Self {
        Self {
            name: StageName::Finetune,
            prompting_enabled: true,
            loss: Some(LossConfig::weighted(BTreeMap::new())),
            temperature: TemperatureMode::PerTask,
            merge_classification: true,
            ..Self::continual(steps)
        }
    }

    pub fn train_mode(&self) -> TrainMode {
        self.train_mode.unwrap_or(match self.name {
            StageName::Continual => TrainMode::Base,
            StageName::Finetune => TrainMode::Adapter,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stages: Vec<StageConfig>,
    #[serde(default = "defaults::lr0")]
    pub lr0: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    /// Default loss shape and initial `θ` values.
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Global-norm clipping threshold; `None` disables clipping.
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: Option<f64>,
    /// Peak learning rate for the log-temperatures; the stage rate when absent.
    #[serde(default)]
    pub theta_lr0: Option<f64>,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub prompt: PromptTemplate,
}

mod defaults {
    pub fn lr0() -> f64 {
        2e-4
    }
    pub fn weight_decay() -> f64 {
        5e-2
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn epochs() -> usize {
        1
    }
    pub fn grad_clip() -> Option<f64> {
        Some(1.0)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: vec![StageConfig::continual(500), StageConfig::finetune_full(500)],
            lr0: defaults::lr0(),
            weight_decay: defaults::weight_decay(),
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: None,
            grad_clip: defaults::grad_clip(),
            theta_lr0: None,
            optimizer: AdamWConfig::default(),
            encoder: EncoderConfig::default(),
            prompt: PromptTemplate::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        let lrs = std::iter::once(self.lr0)
            .chain(self.theta_lr0)
            .chain(self.stages.iter().filter_map(|s| s.lr0));
        for lr in lrs {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("learning rate must be positive, got {lr}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.encoder.d_in == 0 || self.encoder.d_out == 0 || self.encoder.rank == 0 {
            return bad("encoder dimensions and rank must be >= 1".into());
        }
        self.loss.validate()?;
        for s in &self.stages {
            if s.name == StageName::Continual && s.prompting_enabled {
                return bad("the continual stage runs without prompts".into());
            }
            if let Some(l) = &s.loss {
                l.validate()?;
            }
        }
        Ok(())
    }
}

/// Parameters plus log-temperatures: everything training updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams<f64>,
    pub thetas: BTreeMap<String, f64>,
}

impl TrainState {
    pub fn init(config: &TrainConfig) -> Self {
        let enc = &config.encoder;
        let mut thetas = config.loss.theta_per_task.clone();
        thetas.entry(SHARED_TASK.to_string()).or_insert_with(default_theta);
        Self {
            params: EncoderParams::random(enc.d_in, enc.d_out, enc.init_seed),
            thetas,
        }
    }

    pub fn checkpoint(&self, config: &TrainConfig, prompting_enabled: bool) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params, self.thetas.clone(), config.seed);
        ck.featurizer_seed = config.encoder.featurizer_seed;
        ck.prompting_enabled = prompting_enabled;
        ck
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub stage: StageName,
    pub dataset_id: String,
    pub loss: f64,
    pub lr: f64,
    /// Temperatures after this step's update.
    pub tau_per_task: BTreeMap<String, f64>,
    pub fn_masked_count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogEntry>,
}

impl TrainOutcome {
    /// Prompting flag of the last stage, which is how the result should be evaluated.
    pub fn prompting_enabled(config: &TrainConfig) -> bool {
        config.stages.last().is_some_and(|s| s.prompting_enabled)
    }
}

pub fn write_log(log: &[LogEntry], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Memoized hashed features keyed by the exact input string.
pub struct FeatureCache {
    featurizer: Featurizer,
    map: HashMap<String, Vec<f64>>,
}

impl FeatureCache {
    pub fn new(featurizer: Featurizer) -> Self {
        Self {
            featurizer,
            map: HashMap::new(),
        }
    }

    pub fn matrix<'t>(&mut self, texts: impl IntoIterator<Item = &'t str>) -> Result<DenseMatrix<f64>> {
        let mut values = Vec::new();
        let mut rows = 0;
        for t in texts {
            if !self.map.contains_key(t) {
                let f = self.featurizer.featurize_f64(t)?;
                self.map.insert(t.to_string(), f);
            }
            values.extend_from_slice(&self.map[t]);
            rows += 1;
        }
        DenseMatrix::new(rows, self.featurizer.dim_in, values)
    }
}

/// Trains from a fresh initialization.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(TrainState::init(config), manifest, config, &mut |_, _| Ok(()))
}

/// Runs every stage of `config` starting from `state`. `on_checkpoint` fires
/// every `checkpoint_every` global steps.
pub fn train_from(
    mut state: TrainState,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    manifest.validate()?;
    let mut cache = FeatureCache::new(config.encoder.featurizer());
    let mut log = Vec::new();
    let mut global = 0usize;

    for (si, stage) in config.stages.iter().enumerate() {
        let stage_seed = mix_seed(config.seed, si as u64);
        let mut data = match &stage.datasets {
            Some(keep) => manifest.filter_datasets(keep),
            None => manifest.clone(),
        };
        if stage.merge_classification {
            data = merge_classification_datasets(&data)?;
        }
        let sampler = Sampler::new(
            &data,
            SamplerConfig {
                batch_size: config.batch_size,
                resample_weights: stage.resample_weights.clone(),
                dedup_classification_targets: stage.dedup_classification_targets,
                seed: stage_seed,
            },
        )?;
        sampler.check_feasible()?;

        let mode = stage.train_mode();
        if matches!(mode, TrainMode::Adapter | TrainMode::All) && state.params.adapter.is_none() {
            let e = &config.encoder;
            state.params.adapter = Some(LoraAdapter::init(
                e.rank,
                e.d_in,
                e.d_out,
                e.lora_alpha,
                mix_seed(stage_seed, 0xada),
            )?);
        }
        let loss_cfg = stage.loss.clone().unwrap_or_else(|| config.loss.clone());
        let template = if stage.prompting_enabled {
            config.prompt.clone()
        } else {
            PromptTemplate::disabled()
        };
        let steps = stage
            .steps
            .unwrap_or_else(|| config.epochs * data.len().div_ceil(config.batch_size));
        let lr0 = stage.lr0.unwrap_or(config.lr0);
        let mut opt = AdamW::new(config.optimizer);

        for local in 0..steps {
            let batch = sampler.next_batch(local)?;
            let key = stage.temperature.key(batch.task_kind);
            let init = state.thetas.get(SHARED_TASK).copied().unwrap_or_else(default_theta);
            let theta = *state.thetas.entry(key.to_string()).or_insert(init);

            let step = train_step(
                &mut state.params,
                &batch.records,
                &template,
                &mut cache,
                &loss_cfg,
                key,
                theta,
                mode,
            )
            .and_then(|s| {
                if s.loss.is_finite() && s.all_finite() {
                    Ok(s)
                } else {
                    Err(Error::NonFiniteLoss { step: global })
                }
            })?;
            let StepGrads {
                loss,
                mut grads,
                mut grad_theta,
                fn_masked_count,
            } = step;
            if !stage.temperature.learnable() {
                grad_theta = 0.0;
            }

            if let Some(max) = config.grad_clip {
                let mut theta_slot = [grad_theta];
                let mut parts: Vec<&mut [f64]> = vec![&mut theta_slot];
                if matches!(mode, TrainMode::Base | TrainMode::All) {
                    parts.push(grads.weight.as_mut_slice());
                    parts.push(&mut grads.bias);
                }
                if let (Some(a), Some(b)) = (grads.lora_a.as_mut(), grads.lora_b.as_mut()) {
                    parts.push(a.as_mut_slice());
                    parts.push(b.as_mut_slice());
                }
                clip_global_norm(&mut parts, max);
                grad_theta = theta_slot[0];
            }

            let lr = cosine_lr(local, steps.saturating_sub(1), lr0);
            let wd = config.weight_decay;
            if matches!(mode, TrainMode::Base | TrainMode::All) {
                opt.step("W", state.params.weight.as_mut_slice(), grads.weight.as_slice(), lr, wd);
                opt.step("b", &mut state.params.bias, &grads.bias, lr, 0.0);
            }
            if let (Some(ad), Some(ga), Some(gb)) = (state.params.adapter.as_mut(), &grads.lora_a, &grads.lora_b) {
                if matches!(mode, TrainMode::Adapter | TrainMode::All) {
                    opt.step("A", ad.a.as_mut_slice(), ga.as_slice(), lr, wd);
                    opt.step("B", ad.b.as_mut_slice(), gb.as_slice(), lr, wd);
                }
            }
            if stage.temperature.learnable() {
                let t = state.thetas.get_mut(key).expect("inserted above");
                let mut slot = [*t];
                // temperatures are never decayed
                let theta_lr = match config.theta_lr0 {
                    Some(l) => cosine_lr(local, steps.saturating_sub(1), l),
                    None => lr,
                };
                opt.step(&format!("theta/{key}"), &mut slot, &[grad_theta], theta_lr, 0.0);
                *t = clamp_theta(slot[0]);
            }

            log.push(LogEntry {
                step: global,
                stage: stage.name,
                dataset_id: batch.dataset_id.to_string(),
                loss,
                lr,
                tau_per_task: state.thetas.iter().map(|(k, &t)| (k.clone(), t.exp())).collect(),
                fn_masked_count,
            });
            global += 1;
            if let Some(every) = config.checkpoint_every {
                if every > 0 && global.is_multiple_of(every) {
                    on_checkpoint(global, &state)?;
                }
            }
        }
    }
    Ok(TrainOutcome { state, log })
}

struct StepGrads {
    loss: f64,
    grads: crate::encoder::ParamGrads<f64>,
    grad_theta: f64,
    fn_masked_count: usize,
}

impl StepGrads {
    fn all_finite(&self) -> bool {
        self.grad_theta.is_finite()
            && self.grads.weight.is_finite()
            && self.grads.bias.iter().all(|v| v.is_finite())
            && self.grads.lora_a.as_ref().is_none_or(DenseMatrix::is_finite)
            && self.grads.lora_b.as_ref().is_none_or(DenseMatrix::is_finite)
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut EncoderParams<f64>,
    records: &[&Record],
    template: &PromptTemplate,
    cache: &mut FeatureCache,
    loss_cfg: &LossConfig,
    key: &str,
    theta: f64,
    mode: TrainMode,
) -> Result<StepGrads> {
    let queries: Vec<String> = records.iter().map(|r| build_prompt(r, template, Side::Query)).collect();
    let targets: Vec<String> = records
        .iter()
        .map(|r| build_prompt(r, template, Side::Target))
        .collect();
    let xq = cache.matrix(queries.iter().map(String::as_str))?;
    let xt = cache.matrix(targets.iter().map(String::as_str))?;
    let eq = encode_batch(&xq, params)?;
    let et = encode_batch(&xt, params)?;
    let batch = ContrastiveBatch::new(eq.unit, et.unit, key)?;
    let out = whnm_loss_with_theta(&batch, loss_cfg, theta)?;
    let mut grads = encode_backward(&xq, params, &out.grad_queries, mode)?;
    grads.accumulate(&encode_backward(&xt, params, &out.grad_targets, mode)?)?;
    Ok(StepGrads {
        loss: out.loss,
        grads,
        grad_theta: out.grad_theta,
        fn_masked_count: out.mask.count(),
    })
}

/// splitmix64 of `seed + salt`, so nearby seeds give unrelated streams.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut x = seed
        .wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
