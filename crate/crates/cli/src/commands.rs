use std::path::{Path, PathBuf};

use anyhow::Context;
use contrastive_core::data::{generate_benchmark, read_manifest, split_holdout, write_manifest, DatasetManifest};
use contrastive_core::encoder::Featurizer;
use contrastive_core::eval::{evaluate, run_ablation, AblationSpec, EvalConfig};
use contrastive_core::gradcheck::{run_gradcheck, GradCheckConfig};
use contrastive_core::io::atomic_write;
use contrastive_core::souping::{
    merge_into_base, soup_adapters, soup_thetas, validate_weights, MergedAdapter, SoupSpec, SoupStrategy,
};
use contrastive_core::trainer::{
    load_checkpoint, save_checkpoint, train_from, write_log, Checkpoint, TrainOutcome, TrainState,
};
use contrastive_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::run_config::{load_json, load_or_default, RunConfig};
use crate::{usage, AblateArgs, Cli, Command, EvalArgs, Failure, GlobalArgs, GradcheckArgs, SoupArgs, TrainArgs};

/// Largest base-weight difference tolerated between souped checkpoints.
const BASE_TOLERANCE: f64 = 1e-12;

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")
            .map_err(Failure::Runtime)?;
    }
    match &cli.command {
        Command::GenData => gen_data(g),
        Command::Train(a) => train(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Soup(a) => soup(g, a),
        Command::Gradcheck(a) => gradcheck(g, a),
        Command::Ablate(a) => ablate(g, a),
    }
}

/// Configuration mistakes are usage errors; everything else is a runtime failure.
fn core_err(e: Error) -> Failure {
    match e {
        Error::InvalidConfig(_) | Error::SpecInvalid(_) | Error::WeightsInvalid(_) => usage(e.to_string()),
        other => Failure::Runtime(other.into()),
    }
}

trait OrFail<T> {
    fn or_fail(self) -> Result<T, Failure>;
}

impl<T> OrFail<T> for contrastive_core::Result<T> {
    fn or_fail(self) -> Result<T, Failure> {
        self.map_err(core_err)
    }
}

/// `dir/name.ckpt` + `config.json` → `dir/name.config.json`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    atomic_write(path, text.as_bytes()).or_fail()
}

fn run_config(g: &GlobalArgs) -> Result<RunConfig, Failure> {
    Ok(load_or_default::<RunConfig>(g.config.as_deref())?.with_seed(g.seed))
}

fn load_data(cfg: &RunConfig, data: Option<&Path>) -> Result<DatasetManifest, Failure> {
    match data {
        Some(p) => read_manifest(p).or_fail(),
        None => generate_benchmark(&cfg.generation).or_fail(),
    }
}

fn gen_data(g: &GlobalArgs) -> Result<(), Failure> {
    let cfg = run_config(g)?;
    let out = g.out.clone().unwrap_or_else(|| "manifest.jsonl".into());
    let manifest = generate_benchmark(&cfg.generation).or_fail()?;
    write_manifest(&manifest, &out).or_fail()?;
    write_json(
        &sidecar(&out, "config.json"),
        &json!({ "command": "gen-data", "generation": cfg.generation }),
    )?;
    println!(
        "wrote {} records in {} datasets to {}",
        manifest.len(),
        manifest.datasets.len(),
        out.display()
    );
    Ok(())
}

fn train(g: &GlobalArgs, a: &TrainArgs) -> Result<(), Failure> {
    let cfg = run_config(g)?;
    cfg.train.validate().or_fail()?;
    let out = g.out.clone().unwrap_or_else(|| "out.ckpt".into());
    let manifest = load_data(&cfg, a.data.as_deref())?;
    let (train_split, _) = split_holdout(&manifest, cfg.generation.eval_fraction, cfg.generation.seed).or_fail()?;

    let prompting = TrainOutcome::prompting_enabled(&cfg.train);
    let mut periodic = |step: usize, state: &TrainState| {
        save_checkpoint(
            &state.checkpoint(&cfg.train, prompting),
            &sidecar(&out, &format!("step{step}.ckpt")),
        )
    };
    let start = match &a.init {
        Some(path) => {
            let ck = load_checkpoint(path).or_fail()?;
            let enc = &cfg.train.encoder;
            if ck.d_in != enc.d_in || ck.d_out != enc.d_out || ck.featurizer_seed != enc.featurizer_seed {
                return Err(usage(format!(
                    "{} does not match the configured encoder",
                    path.display()
                )));
            }
            TrainState {
                params: ck.params().or_fail()?,
                thetas: ck.theta_per_task,
            }
        }
        None => TrainState::init(&cfg.train),
    };
    let outcome = train_from(start, &train_split, &cfg.train, &mut periodic).or_fail()?;

    save_checkpoint(&outcome.state.checkpoint(&cfg.train, prompting), &out).or_fail()?;
    write_log(&outcome.log, &sidecar(&out, "log.jsonl")).or_fail()?;
    write_json(
        &sidecar(&out, "config.json"),
        &json!({ "command": "train", "data": a.data, "init": a.init, "run": cfg }),
    )?;
    if let Some(last) = outcome.log.last() {
        println!("step {} loss {:.4}", last.step, last.loss);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(g: &GlobalArgs, a: &EvalArgs) -> Result<(), Failure> {
    let cfg = run_config(g)?;
    let ckpt = load_checkpoint(&a.checkpoint).or_fail()?;
    let manifest = load_data(&cfg, a.data.as_deref())?;
    let (_, held) = split_holdout(&manifest, cfg.generation.eval_fraction, cfg.generation.seed).or_fail()?;
    let eval_cfg = cfg.eval.clone().unwrap_or_else(|| EvalConfig {
        prompting_enabled: ckpt.prompting_enabled,
        template: cfg.train.prompt.clone(),
    });
    let params = ckpt.params().or_fail()?;
    let report = evaluate(
        &params,
        Featurizer::new(ckpt.d_in, ckpt.featurizer_seed),
        &held,
        &eval_cfg,
    )
    .or_fail()?;
    let dir = g.out.clone().unwrap_or_else(|| ".".into());
    let provenance = json!({
        "command": "eval",
        "checkpoint": a.checkpoint,
        "data": a.data,
        "run": cfg,
        "eval": eval_cfg,
    });
    report.write(&dir, &provenance).or_fail()?;
    print!("{}", report.to_markdown());
    println!("wrote {}", dir.join("report.json").display());
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SoupConfig {
    #[serde(default)]
    checkpoints: Vec<PathBuf>,
    #[serde(default)]
    weights: Option<Vec<f64>>,
    #[serde(default)]
    strategy: SoupStrategy,
}

fn parse_strategy(s: &str) -> Result<SoupStrategy, Failure> {
    serde_json::from_value(json!(s))
        .map_err(|_| usage(format!("unknown soup strategy `{s}` (delta-average, factor-svd)")))
}

fn soup(g: &GlobalArgs, a: &SoupArgs) -> Result<(), Failure> {
    let mut cfg: SoupConfig = load_or_default(g.config.as_deref())?;
    if !a.checkpoints.is_empty() {
        cfg.checkpoints = a.checkpoints.clone();
    }
    if a.weights.is_some() {
        cfg.weights = a.weights.clone();
    }
    if let Some(s) = &a.strategy {
        cfg.strategy = parse_strategy(s)?;
    }
    if cfg.checkpoints.is_empty() {
        return Err(usage("soup needs at least one checkpoint"));
    }
    let n = cfg.checkpoints.len();
    let weights = cfg.weights.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
    validate_weights(&weights, n).or_fail()?;

    let ckpts = cfg
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .collect::<anyhow::Result<Vec<Checkpoint>>>()
        .map_err(Failure::Runtime)?;
    let params = ckpts
        .iter()
        .map(Checkpoint::params)
        .collect::<contrastive_core::Result<Vec<_>>>()
        .or_fail()?;
    let first = &ckpts[0];
    for (c, p) in ckpts.iter().zip(&params).skip(1) {
        let same_base = p.weight.shape() == params[0].weight.shape()
            && p.weight.max_abs_diff(&params[0].weight).or_fail()? <= BASE_TOLERANCE
            && p.bias
                .iter()
                .zip(&params[0].bias)
                .all(|(x, y)| (x - y).abs() <= BASE_TOLERANCE);
        if !same_base || c.featurizer_seed != first.featurizer_seed {
            return Err(Failure::Runtime(anyhow::anyhow!(
                "checkpoints do not share a base model"
            )));
        }
        if c.prompting_enabled != first.prompting_enabled {
            return Err(Failure::Runtime(anyhow::anyhow!("checkpoints disagree on prompting")));
        }
    }
    let adapters = params
        .iter()
        .zip(&cfg.checkpoints)
        .map(|(p, path)| {
            p.adapter
                .clone()
                .ok_or_else(|| anyhow::anyhow!("{} carries no adapter", path.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(Failure::Runtime)?;

    let spec = SoupSpec {
        adapters,
        weights: weights.clone(),
        strategy: cfg.strategy,
        rank: None,
    };
    let mut base = params[0].clone();
    base.adapter = None;
    let merged_params = match soup_adapters(&spec).or_fail()? {
        MergedAdapter::Dense(delta) => merge_into_base(&base, &delta).or_fail()?,
        MergedAdapter::Factored(ad) => {
            base.adapter = Some(ad);
            base
        }
    };
    let thetas: Vec<_> = ckpts.iter().map(|c| c.theta_per_task.clone()).collect();
    let mut out_ckpt = Checkpoint::from_params(
        &merged_params,
        soup_thetas(&thetas, &weights).or_fail()?,
        g.seed.unwrap_or(first.rng_seed),
    );
    out_ckpt.featurizer_seed = first.featurizer_seed;
    out_ckpt.prompting_enabled = first.prompting_enabled;

    let out = g.out.clone().unwrap_or_else(|| "soup.ckpt".into());
    save_checkpoint(&out_ckpt, &out).or_fail()?;
    let echo = SoupConfig {
        weights: Some(weights),
        ..cfg
    };
    write_json(
        &sidecar(&out, "config.json"),
        &json!({ "command": "soup", "soup": echo }),
    )?;
    println!("souped {n} checkpoints into {}", out.display());
    Ok(())
}

fn gradcheck(g: &GlobalArgs, a: &GradcheckArgs) -> Result<(), Failure> {
    let mut cfg: GradCheckConfig = load_or_default(g.config.as_deref())?;
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if cfg.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let report = run_gradcheck(&cfg).or_fail()?;
    println!(
        "max rel err {:.3e} over {} trials ({} with masked negatives), tolerance {:.0e}",
        report.max_rel_err,
        report.trials.len(),
        report.masked_trials(),
        report.tolerance
    );
    if let Some(out) = &g.out {
        write_json(out, &json!({ "config": cfg, "report": report }))?;
    }
    if report.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!(
            "gradient check failed: max rel err {:.3e} >= {:.0e}",
            report.max_rel_err,
            report.tolerance
        )))
    }
}

fn ablate(g: &GlobalArgs, a: &AblateArgs) -> Result<(), Failure> {
    let mut spec: AblationSpec = match (&g.config, &a.preset) {
        (Some(_), Some(_)) => return Err(usage("--config and --preset are mutually exclusive")),
        (Some(path), None) => load_json(path)?,
        (None, preset) => {
            let name = preset.as_deref().unwrap_or("table4");
            AblationSpec::preset(name).ok_or_else(|| usage(format!("unknown preset `{name}` (table4, soup)")))?
        }
    };
    let count = a.seeds.unwrap_or(spec.seeds.len());
    if count == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let start = g.seed.or(spec.seeds.first().copied()).unwrap_or(0);
    if g.seed.is_some() || a.seeds.is_some() {
        spec.seeds = (0..count as u64).map(|i| start + i).collect();
    }
    let (table, _) = run_ablation(&spec).or_fail()?;
    let dir = g.out.clone().unwrap_or_else(|| ".".into());
    table
        .write(&dir, &json!({ "command": "ablate", "spec": spec }))
        .or_fail()?;
    print!("{}", table.to_markdown());
    println!("wrote {}", dir.join("ablation.json").display());
    Ok(())
}
