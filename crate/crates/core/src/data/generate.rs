//! Synthetic retrieval benchmark with planted false negatives and hard negatives.
//!
//! Every dataset draws records from its own concept vocabulary. A record's
//! query and target both mention the record's concepts, wrapped in fixed
//! per-dataset template words and random filler from a shared noise
//! vocabulary. Three structures are planted:
//!
//! * duplicate-topic records (rate `p_fn`): same concepts and gold group as an
//!   earlier record, fresh filler;
//! * clip groups: siblings share every token but one, so they are hard
//!   negatives for each other;
//! * classification datasets with tiny label sets, whose targets are the label
//!   names themselves.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ManifestMetadata, Record, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub id: String,
    pub task_kind: TaskKind,
    pub records: usize,
    /// Label count; required for `img_cls`.
    #[serde(default)]
    pub labels: Option<usize>,
    /// Clips per source group; enables clip-group hard negatives.
    #[serde(default)]
    pub clip_group_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    /// Rate of duplicate-topic (false negative) records.
    pub p_fn: f64,
    pub datasets: Vec<DatasetSpec>,
    #[serde(default = "defaults::concepts_per_record")]
    pub concepts_per_record: usize,
    #[serde(default = "defaults::concept_vocab")]
    pub concept_vocab: usize,
    #[serde(default = "defaults::noise_words")]
    pub noise_words: usize,
    #[serde(default = "defaults::noise_vocab")]
    pub noise_vocab: usize,
    #[serde(default = "defaults::template_words")]
    pub template_words: usize,
    /// Probability that a target-side concept appears in its alternate surface
    /// form, which the encoder has to learn to align with the query form.
    #[serde(default = "defaults::alt_form_rate")]
    pub alt_form_rate: f64,
    /// Holdout fraction used by the training and evaluation commands.
    #[serde(default = "defaults::eval_fraction")]
    pub eval_fraction: f64,
}

mod defaults {
    pub fn concepts_per_record() -> usize {
        3
    }
    pub fn concept_vocab() -> usize {
        60
    }
    pub fn noise_words() -> usize {
        4
    }
    pub fn noise_vocab() -> usize {
        200
    }
    pub fn template_words() -> usize {
        3
    }
    pub fn alt_form_rate() -> f64 {
        0.5
    }
    pub fn eval_fraction() -> f64 {
        0.2
    }
}

impl GenSpec {
    /// Nine datasets covering all seven task kinds, including 2/20/24-label
    /// classification sets and two clip-grouped video sets.
    pub fn desk_default(seed: u64) -> Self {
        let ds = |id: &str, kind, records, labels, clips| DatasetSpec {
            id: id.to_string(),
            task_kind: kind,
            records,
            labels,
            clip_group_size: clips,
        };
        Self {
            seed,
            p_fn: 0.05,
            datasets: vec![
                ds("cls_memes", TaskKind::ImgCls, 300, Some(2), None),
                ds("cls_voc", TaskKind::ImgCls, 300, Some(20), None),
                ds("cls_news", TaskKind::ImgCls, 300, Some(24), None),
                ds("img_qa", TaskKind::ImgQa, 300, None, None),
                ds("img_ret", TaskKind::ImgRet, 300, None, None),
                ds("img_ground", TaskKind::ImgGround, 300, None, None),
                ds("doc_ret", TaskKind::DocRet, 300, None, None),
                ds("vid_ret", TaskKind::VidRet, 300, None, Some(5)),
                ds("vid_qa", TaskKind::VidQa, 300, None, Some(4)),
            ],
            concepts_per_record: defaults::concepts_per_record(),
            concept_vocab: defaults::concept_vocab(),
            noise_words: defaults::noise_words(),
            noise_vocab: defaults::noise_vocab(),
            template_words: defaults::template_words(),
            alt_form_rate: defaults::alt_form_rate(),
            eval_fraction: defaults::eval_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if !(0.0..=1.0).contains(&self.p_fn) {
            return bad(format!("p_fn {} outside [0, 1]", self.p_fn));
        }
        if !(0.0..=1.0).contains(&self.alt_form_rate) {
            return bad(format!("alt_form_rate {} outside [0, 1]", self.alt_form_rate));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad(format!("eval_fraction {} outside [0, 1)", self.eval_fraction));
        }
        if self.datasets.is_empty() {
            return bad("no datasets".into());
        }
        if self.concepts_per_record < 2 {
            return bad("concepts_per_record must be >= 2".into());
        }
        if self.concept_vocab < self.concepts_per_record + 1 {
            return bad("concept_vocab too small for concepts_per_record".into());
        }
        if self.noise_vocab < self.noise_words {
            return bad("noise_vocab smaller than noise_words".into());
        }
        let mut ids = HashSet::new();
        for d in &self.datasets {
            if !ids.insert(d.id.as_str()) {
                return bad(format!("dataset id `{}` repeated", d.id));
            }
            if d.records < 2 {
                return bad(format!("dataset `{}` needs at least 2 records", d.id));
            }
            match (d.task_kind, d.labels) {
                (TaskKind::ImgCls, Some(l)) if l >= 2 => {
                    // label names use two concept words each
                    if 2 * l + self.concepts_per_record > self.concept_vocab * 2 {
                        return bad(format!("dataset `{}` has too many labels for the vocabulary", d.id));
                    }
                }
                (TaskKind::ImgCls, _) => return bad(format!("classification dataset `{}` needs >= 2 labels", d.id)),
                (_, Some(_)) => return bad(format!("labels given for non-classification dataset `{}`", d.id)),
                _ => {}
            }
            if let Some(c) = d.clip_group_size {
                if c < 2 {
                    return bad(format!("dataset `{}` clip_group_size must be >= 2", d.id));
                }
            }
        }
        Ok(())
    }
}

/// Pronounceable pseudo-words, unique across one benchmark.
struct WordMint {
    used: HashSet<String>,
}

impl WordMint {
    const ONSETS: [&'static str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr",
    ];
    const NUCLEI: [&'static str; 6] = ["a", "e", "i", "o", "u", "ai"];

    fn new() -> Self {
        Self { used: HashSet::new() }
    }

    fn word(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.random_range(2..=3);
            let w: String = (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}",
                        Self::ONSETS.choose(rng).expect("nonempty"),
                        Self::NUCLEI.choose(rng).expect("nonempty")
                    )
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
        (0..n).map(|_| self.word(rng)).collect()
    }
}

struct Vocab {
    concepts: Vec<String>,
    alt_forms: Vec<String>,
    query_template: Vec<String>,
    target_template: Vec<String>,
}

struct Ctx<'a> {
    spec: &'a GenSpec,
    noise: &'a [String],
}

impl Ctx<'_> {
    fn noise(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        self.noise
            .choose_multiple(rng, self.spec.noise_words)
            .cloned()
            .collect()
    }

    fn render_target_concept(&self, vocab: &Vocab, c: usize, rng: &mut ChaCha8Rng) -> String {
        if rng.random_bool(self.spec.alt_form_rate) {
            vocab.alt_forms[c].clone()
        } else {
            vocab.concepts[c].clone()
        }
    }

    fn render(&self, template: &[String], words: Vec<String>, filler: &[String], rng: &mut ChaCha8Rng) -> String {
        let mut body: Vec<String> = words.into_iter().chain(filler.iter().cloned()).collect();
        body.shuffle(rng);
        template.iter().cloned().chain(body).collect::<Vec<_>>().join(" ")
    }
}

/// Builds the benchmark; a pure function of the `GenSpec` (including its seed).
pub fn generate_benchmark(spec: &GenSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mint = WordMint::new();
    let noise = mint.words(&mut rng, spec.noise_vocab);
    let ctx = Ctx { spec, noise: &noise };

    let mut manifest = DatasetManifest {
        datasets: BTreeMap::new(),
        metadata: ManifestMetadata {
            seed: spec.seed,
            p_fn: spec.p_fn,
            label_sets: BTreeMap::new(),
        },
    };

    for d in &spec.datasets {
        let vocab = Vocab {
            concepts: mint.words(&mut rng, spec.concept_vocab),
            alt_forms: mint.words(&mut rng, spec.concept_vocab),
            query_template: mint.words(&mut rng, spec.template_words),
            target_template: mint.words(&mut rng, spec.template_words),
        };
        let records = match (d.task_kind, d.labels, d.clip_group_size) {
            (TaskKind::ImgCls, Some(labels), _) => {
                let (recs, names) = classification(&ctx, d, &vocab, labels, &mut rng);
                manifest.metadata.label_sets.insert(d.id.clone(), names);
                recs
            }
            (_, _, Some(clips)) => clip_groups(&ctx, d, &vocab, clips, &mut rng),
            _ => topical(&ctx, d, &vocab, &mut rng),
        };
        manifest.datasets.insert(d.id.clone(), records);
    }
    manifest.validate()?;
    Ok(manifest)
}

fn record_id(dataset: &str, i: usize) -> String {
    format!("{dataset}-{i:05}")
}

fn topical(ctx: &Ctx, d: &DatasetSpec, vocab: &Vocab, rng: &mut ChaCha8Rng) -> Vec<Record> {
    let k = ctx.spec.concepts_per_record;
    let mut out: Vec<Record> = Vec::with_capacity(d.records);
    let mut topics: Vec<(Vec<usize>, String)> = Vec::new();
    for i in 0..d.records {
        let id = record_id(&d.id, i);
        let (concepts, gold) = if !topics.is_empty() && rng.random_bool(ctx.spec.p_fn) {
            topics.choose(rng).expect("nonempty").clone()
        } else {
            let c = rand::seq::index::sample(rng, vocab.concepts.len(), k).into_vec();
            topics.push((c.clone(), id.clone()));
            (c, id.clone())
        };
        out.push(pair(ctx, d, vocab, id, &concepts, gold, rng));
    }
    out
}

fn clip_groups(ctx: &Ctx, d: &DatasetSpec, vocab: &Vocab, clips: usize, rng: &mut ChaCha8Rng) -> Vec<Record> {
    let k = ctx.spec.concepts_per_record;
    let mut out = Vec::with_capacity(d.records);
    let mut emitted: Vec<usize> = Vec::new();
    let mut group = 0;
    while out.len() < d.records {
        let group_id = format!("{}-g{group:04}", d.id);
        // k-1 shared concepts plus one distinct concept per clip
        let picked = rand::seq::index::sample(rng, vocab.concepts.len(), k - 1 + clips).into_vec();
        let (shared, own) = picked.split_at(k - 1);
        let q_noise = ctx.noise(rng);
        let t_noise = ctx.noise(rng);
        let shared_targets: Vec<String> = shared
            .iter()
            .map(|&c| ctx.render_target_concept(vocab, c, rng))
            .collect();
        for &clip in own.iter().take(d.records - out.len()) {
            let i = out.len();
            let id = record_id(&d.id, i);
            let gold = if !emitted.is_empty() && rng.random_bool(ctx.spec.p_fn) {
                // planted duplicate: restate an earlier clip with this group's filler
                let src: &Record = &out[*emitted.choose(rng).expect("nonempty")];
                let mut dup = src.clone();
                dup.id = id.clone();
                dup.group_id = Some(group_id.clone());
                out.push(dup);
                continue;
            } else {
                id.clone()
            };
            let mut q_words: Vec<String> = shared.iter().map(|&c| vocab.concepts[c].clone()).collect();
            q_words.push(vocab.concepts[clip].clone());
            let mut t_words = shared_targets.clone();
            t_words.push(ctx.render_target_concept(vocab, clip, rng));
            // keep token order fixed within a group so siblings differ in one token only
            let query_text = join_fixed(&vocab.query_template, &q_words, &q_noise);
            let target_text = join_fixed(&vocab.target_template, &t_words, &t_noise);
            emitted.push(i);
            out.push(Record {
                id,
                dataset_id: d.id.clone(),
                task_kind: d.task_kind,
                group_id: Some(group_id.clone()),
                query_text,
                target_text,
                gold_group: gold,
            });
        }
        group += 1;
    }
    out
}

fn join_fixed(template: &[String], words: &[String], filler: &[String]) -> String {
    template
        .iter()
        .chain(words)
        .chain(filler)
        .cloned()
        .collect::<Vec<_>>()
        .join(" ")
}

fn classification(
    ctx: &Ctx,
    d: &DatasetSpec,
    vocab: &Vocab,
    labels: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Record>, Vec<String>) {
    // label l is named by two vocabulary words; the remaining words are distractors
    let n_concepts = vocab.concepts.len();
    let label_words: Vec<[String; 2]> = (0..labels)
        .map(|l| {
            let a = (2 * l) % n_concepts;
            let b = (2 * l + 1) % n_concepts;
            let word = |c: usize| {
                if 2 * l + 1 < n_concepts {
                    vocab.concepts[c].clone()
                } else {
                    vocab.alt_forms[c].clone()
                }
            };
            [word(a), word(b)]
        })
        .collect();
    let names: Vec<String> = label_words.iter().map(|w| w.join(" ")).collect();
    let distractor_pool: Vec<String> = vocab
        .alt_forms
        .iter()
        .chain(&vocab.concepts)
        .filter(|w| !label_words.iter().any(|lw| lw.contains(w)))
        .cloned()
        .collect();

    let mut out = Vec::with_capacity(d.records);
    for i in 0..d.records {
        let label = rng.random_range(0..labels);
        let mut words: Vec<String> = label_words[label].to_vec();
        words.extend(
            distractor_pool
                .choose_multiple(rng, ctx.spec.concepts_per_record - 1)
                .cloned(),
        );
        let filler = ctx.noise(rng);
        let query_text = ctx.render(&vocab.query_template, words, &filler, rng);
        out.push(Record {
            id: record_id(&d.id, i),
            dataset_id: d.id.clone(),
            task_kind: d.task_kind,
            group_id: None,
            query_text,
            target_text: names[label].clone(),
            gold_group: names[label].clone(),
        });
    }
    (out, names)
}

fn pair(
    ctx: &Ctx,
    d: &DatasetSpec,
    vocab: &Vocab,
    id: String,
    concepts: &[usize],
    gold_group: String,
    rng: &mut ChaCha8Rng,
) -> Record {
    let q_words: Vec<String> = concepts.iter().map(|&c| vocab.concepts[c].clone()).collect();
    let t_words: Vec<String> = concepts
        .iter()
        .map(|&c| ctx.render_target_concept(vocab, c, rng))
        .collect();
    let q_noise = ctx.noise(rng);
    let t_noise = ctx.noise(rng);
    Record {
        id,
        dataset_id: d.id.clone(),
        task_kind: d.task_kind,
        group_id: None,
        query_text: ctx.render(&vocab.query_template, q_words, &q_noise, rng),
        target_text: ctx.render(&vocab.target_template, t_words, &t_noise, rng),
        gold_group,
    }
}
