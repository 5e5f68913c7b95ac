//! One function per subcommand. Every artifact is written atomically under
//! the output directory and carries the config hash.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ckg::augmenter::{
    run_augmentation, AugmentOptions, AugmentationPools, BudgetedBackend, HttpBackend, LlmBackend,
    RecordingBackend, ReplayBackend, StubBackend,
};
use ckg::eval::{evaluate_split, report_json, EvalSplit};
use ckg::explain::{
    augmented_confidences, build_augmented_kg, explanation_json, generate_explanation,
    prepare_request, ExplainError,
};
use ckg::io::write_atomic;
use ckg::kg::{split_interactions, DatasetSplit, InteractionGraph, TripartiteKg};
use ckg::params::ModelParams;
use ckg::propagation::Adjacency;
use ckg::synthetic::{generate, write_tsv, SyntheticSpec};
use ckg::train::{inference_embeddings, metrics_csv, run, Trainer};
use serde_json::json;

use crate::config::{BackendKind, RunConfig};
use crate::error::CliError;

pub const SUMMARY_FILE: &str = "summary.json";
pub const POOLS_FILE: &str = "pools.jsonl";
pub const AUGMENT_REPORT_FILE: &str = "augment_report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

/// Loaded dataset with its seeded split.
pub struct Dataset {
    pub kg: TripartiteKg,
    pub split: DatasetSplit,
    pub duplicates: usize,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let ii = cfg.ii_path();
    let (kg, load) = TripartiteKg::load(
        &cfg.interactions_path(),
        &cfg.ia_path(),
        ii.as_deref(),
        cfg.run.ii_cap,
        cfg.split_seed(),
    )?;
    let [a, b, c] = cfg.run.split;
    let split = split_interactions(&kg.interactions, (a, b, c), cfg.split_seed())?;
    Ok(Dataset {
        kg,
        split,
        duplicates: load.duplicates,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut body = serde_json::to_string_pretty(value).expect("json serializes");
    body.push('\n');
    Ok(write_atomic(path, body.as_bytes())?)
}

pub fn ingest(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value, CliError> {
    let data = load_dataset(cfg)?;
    let s = data.kg.summary();
    let report = json!({
        "config_hash": cfg.hash(),
        "users": s.users,
        "items": s.items,
        "interactions": s.interactions,
        "density": s.density,
        "attributes": s.attributes,
        "relations": s.relations,
        "ia_relations": s.ia_relations,
        "ia_triplets": s.ia_triplets,
        "ii_triplets": s.ii_triplets,
        "duplicate_interactions": data.duplicates,
        "train": data.split.train.len(),
        "validation": data.split.validation.len(),
        "test": data.split.test.len(),
    });
    write_json(&out.join(SUMMARY_FILE), &report)?;
    Ok(report)
}

/// Human-readable dataset statistics.
pub fn summary_table(report: &serde_json::Value) -> String {
    let mut s = String::new();
    for key in [
        "users",
        "items",
        "interactions",
        "density",
        "ia_triplets",
        "ii_triplets",
        "attributes",
        "ia_relations",
    ] {
        let v = &report[key];
        let shown = match v.as_f64() {
            Some(d) if key == "density" => format!("{d:.3e}"),
            _ => v.to_string(),
        };
        let _ = writeln!(s, "{key:<14}{shown}");
    }
    s
}

fn base_backend(cfg: &RunConfig) -> Result<Box<dyn LlmBackend>, CliError> {
    Ok(match cfg.run.backend {
        BackendKind::Stub => Box::new(StubBackend::synthetic(cfg.run.stub_seed)),
        BackendKind::Replay => {
            let path = cfg.resolve(cfg.run.transcript.as_deref().expect("validated"));
            Box::new(ReplayBackend::load(&path)?)
        }
        BackendKind::Http => Box::new(HttpBackend::from_env()?),
    })
}

/// The configured backend with the optional request budget, recording every exchange.
pub fn make_backend(cfg: &RunConfig) -> Result<RecordingBackend<Box<dyn LlmBackend>>, CliError> {
    let mut b = base_backend(cfg)?;
    if let Some(n) = cfg.run.llm_budget {
        b = Box::new(BudgetedBackend::new(b, n));
    }
    Ok(RecordingBackend::new(b))
}

fn save_transcript(
    cfg: &RunConfig,
    backend: &RecordingBackend<Box<dyn LlmBackend>>,
) -> Result<(), CliError> {
    if let Some(p) = &cfg.run.record_transcript {
        backend.save(&cfg.resolve(p))?;
    }
    Ok(())
}

pub fn augment(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value, CliError> {
    let data = load_dataset(cfg)?;
    let backend = make_backend(cfg)?;
    let opts = AugmentOptions {
        batch_size: cfg.run.llm_batch_size,
        concurrency: cfg.run.llm_concurrency,
        seed: cfg.augment_seed(),
        persist: Some(out.join(POOLS_FILE)),
    };
    let result = run_augmentation(&data.kg, &data.split.train, &backend, &opts);
    save_transcript(cfg, &backend)?;
    let (pools, report) = result.map_err(|e| match e {
        ckg::augmenter::RunError::Data(d) => CliError::from(d),
        other => CliError::Config(other.to_string()),
    })?;
    pools.save(&out.join(POOLS_FILE), &data.kg.vocab)?;
    let sizes = pools.sizes();
    let value = json!({
        "config_hash": cfg.hash(),
        "backend": backend.id(),
        "report": report,
        "pool_sizes": { "add_user": sizes[0], "del_user": sizes[1], "add_item": sizes[2], "del_item": sizes[3] },
    });
    write_json(&out.join(AUGMENT_REPORT_FILE), &value)?;
    if report.batches > 0 && report.completed == 0 {
        return Err(CliError::Backend(format!(
            "all {} augmentation batches failed",
            report.batches
        )));
    }
    Ok(value)
}

/// Pools from `path`, or empty pools when `no_llm`.
pub fn load_pools(
    data: &Dataset,
    path: &Path,
    no_llm: bool,
) -> Result<AugmentationPools, CliError> {
    if no_llm {
        return Ok(AugmentationPools::default());
    }
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{}: pool file not found; run `augment` first or pass --no-llm",
            path.display()
        )));
    }
    Ok(AugmentationPools::load(path, &data.kg, &data.split.train)?)
}

pub struct TrainArgs {
    pub no_llm: bool,
    pub pools: Option<PathBuf>,
    pub dump_views: bool,
}

fn with_hash_column(csv: &str, hash: &str) -> String {
    let mut out = String::new();
    for (k, line) in csv.lines().enumerate() {
        let extra = if k == 0 { "config_hash" } else { hash };
        let _ = writeln!(out, "{line},{extra}");
    }
    out
}

pub fn train(cfg: &RunConfig, out: &Path, args: &TrainArgs) -> Result<serde_json::Value, CliError> {
    let data = load_dataset(cfg)?;
    let pools_path = args.pools.clone().unwrap_or_else(|| out.join(POOLS_FILE));
    let pools = load_pools(&data, &pools_path, args.no_llm)?;
    let hash = cfg.hash();
    let mut trainer = Trainer::new(&data.kg, &data.split, &pools, cfg.train.clone())?;
    if args.dump_views {
        trainer.dump_views_to(out.join("views"));
    }
    let outcome = run(&mut trainer, &mut |_, _| Ok(()))?;
    outcome.params.save(&out.join(CHECKPOINT_FILE), &hash)?;
    let csv = with_hash_column(&metrics_csv(&outcome.history, cfg.train.eval_k), &hash);
    write_atomic(&out.join(METRICS_FILE), csv.as_bytes())?;
    let best = outcome
        .history
        .iter()
        .find(|m| m.epoch == outcome.best_epoch);
    let value = json!({
        "config_hash": hash,
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "stopped_early": outcome.stopped_early,
        "no_llm": args.no_llm,
        format!("val_recall@{}", cfg.train.eval_k): best.and_then(|m| m.val_recall),
        format!("val_ndcg@{}", cfg.train.eval_k): best.and_then(|m| m.val_ndcg),
    });
    write_json(&out.join(TRAIN_REPORT_FILE), &value)?;
    Ok(value)
}

pub fn load_checkpoint(
    cfg: &RunConfig,
    data: &Dataset,
    path: &Path,
) -> Result<ModelParams, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{}: checkpoint not found; run `train` first",
            path.display()
        )));
    }
    let (params, hash) = ModelParams::load(path, &cfg.train.dims(&data.kg))?;
    if hash != cfg.hash() {
        log::warn!(
            "checkpoint was trained with config {hash}, current config is {}",
            cfg.hash()
        );
    }
    Ok(params)
}

pub fn eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    split: EvalSplit,
) -> Result<serde_json::Value, CliError> {
    let data = load_dataset(cfg)?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let params = load_checkpoint(cfg, &data, &path)?;
    let adj = Adjacency::new(&data.split.train);
    let (u, i) = inference_embeddings(&params, data.kg.ia(), &adj, &cfg.train);
    let result = evaluate_split(&u, &i, &data.split, split, cfg.train.eval_k);
    let value = report_json(&result, split, &cfg.hash());
    let name = match split {
        EvalSplit::Validation => "eval_validation.json",
        EvalSplit::Test => "eval_test.json",
    };
    write_json(&out.join(name), &value)?;
    Ok(value)
}

pub struct ExplainArgs {
    pub user: String,
    pub item: String,
    pub checkpoint: Option<PathBuf>,
    pub pools: Option<PathBuf>,
}

/// The user's interactions other than the explained pair.
fn explanation_history(
    kg: &TripartiteKg,
    u: ckg::kg::UserId,
    i: ckg::kg::ItemId,
) -> InteractionGraph {
    let g = &kg.interactions;
    InteractionGraph::from_pairs(
        g.n_users(),
        g.n_items(),
        g.pairs().iter().copied().filter(|&p| p != (u, i)),
    )
}

pub fn explain(
    cfg: &RunConfig,
    out: &Path,
    args: &ExplainArgs,
) -> Result<serde_json::Value, CliError> {
    let data = load_dataset(cfg)?;
    let vocab = &data.kg.vocab;
    let u = vocab
        .find_user(&args.user)
        .ok_or_else(|| CliError::Data(format!("unknown user `{}`", args.user)))?;
    let i = vocab
        .find_item(&args.item)
        .ok_or_else(|| CliError::Data(format!("unknown item `{}`", args.item)))?;
    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let params = load_checkpoint(cfg, &data, &ckpt)?;
    let pools_path = args.pools.clone().unwrap_or_else(|| out.join(POOLS_FILE));
    let pools = if pools_path.exists() {
        AugmentationPools::load(&pools_path, &data.kg, &data.split.train)?
    } else {
        log::info!(
            "{}: no pool file, explaining from the original graph",
            pools_path.display()
        );
        AugmentationPools::default()
    };
    let conf = augmented_confidences(&params, &data.kg, &pools);
    let aug = build_augmented_kg(&data.kg, &pools, &conf, cfg.run.mu);
    let history = explanation_history(&data.kg, u, i);
    let safe = |s: &str| {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect::<String>()
    };
    let file = out.join(format!(
        "explanation_{}_{}.json",
        safe(&args.user),
        safe(&args.item)
    ));
    let request = match prepare_request(
        &aug,
        vocab,
        &history,
        u,
        i,
        cfg.run.context_size,
        cfg.run.explain_seed,
    ) {
        Ok(r) => r,
        Err(e @ (ExplainError::NotExplainable { .. } | ExplainError::NoHistory(_))) => {
            let value = json!({
                "config_hash": cfg.hash(),
                "user": args.user,
                "item": args.item,
                "explainable": false,
                "reason": e.to_string(),
                "paths": [],
            });
            write_json(&file, &value)?;
            return Ok(value);
        }
    };
    let backend = make_backend(cfg)?;
    let result = generate_explanation(request, &backend);
    save_transcript(cfg, &backend)?;
    let (request, explanation) = result.map_err(|f| CliError::Backend(f.to_string()))?;
    let mut value = explanation_json(&request, &explanation, vocab);
    value["config_hash"] = cfg.hash().into();
    value["explainable"] = true.into();
    value["mu"] = cfg.run.mu.into();
    value["admitted"] = aug.admitted.len().into();
    write_json(&file, &value)?;
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    MuAdd,
    MuDel,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::MuAdd => "mu_add",
            SweepParam::MuDel => "mu_del",
        }
    }
}

/// Trains once per grid value and evaluates on the test split.
pub fn sweep(
    cfg: &RunConfig,
    out: &Path,
    param: SweepParam,
    grid: &[f64],
    no_llm: bool,
) -> Result<String, CliError> {
    let data = load_dataset(cfg)?;
    let pools = load_pools(&data, &out.join(POOLS_FILE), no_llm)?;
    let k = cfg.train.eval_k;
    let mut csv = format!("param,value,recall@{k},ndcg@{k},seed,config_hash\n");
    for &v in grid {
        let mut point = cfg.clone();
        match param {
            SweepParam::MuAdd => point.train.mu_add = v,
            SweepParam::MuDel => point.train.mu_del = v,
        }
        point.validate()?;
        let mut trainer = Trainer::new(&data.kg, &data.split, &pools, point.train.clone())?;
        let outcome = run(&mut trainer, &mut |_, _| Ok(()))?;
        let (u, i) = inference_embeddings(
            &outcome.params,
            data.kg.ia(),
            trainer.train_adjacency(),
            &point.train,
        );
        let r = evaluate_split(&u, &i, &data.split, EvalSplit::Test, k);
        log::info!("{} = {v}: recall@{k} {:.4}", param.name(), r.recall);
        let _ = writeln!(
            csv,
            "{},{v},{},{},{},{}",
            param.name(),
            r.recall,
            r.ndcg,
            point.train.seed,
            point.hash()
        );
    }
    write_atomic(
        &out.join(format!("sweep_{}.csv", param.name())),
        csv.as_bytes(),
    )?;
    Ok(csv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    Toy,
    Denoising,
}

/// Writes a synthetic dataset and a matching `config.toml` into `dir`.
pub fn synth(dir: &Path, kind: SynthKind, seed: u64) -> Result<PathBuf, CliError> {
    let spec = match kind {
        SynthKind::Toy => SyntheticSpec::toy(seed),
        SynthKind::Denoising => SyntheticSpec::denoising(seed),
    };
    let data = generate(&spec);
    write_tsv(&data.kg, dir)?;
    let mut cfg = RunConfig::parse(
        "interactions = \"interactions.tsv\"\nia = \"ia.tsv\"\nii = \"ii.tsv\"\n",
        dir,
    )?;
    cfg.train.seed = seed;
    if kind == SynthKind::Toy {
        cfg.train.dim = 16;
        cfg.train.n_experts = 2;
        cfg.train.epochs = 5;
        cfg.train.batch_size = 64;
        cfg.train.learning_rate = 1e-2;
    }
    let path = dir.join("config.toml");
    write_atomic(&path, cfg.to_toml().as_bytes())?;
    Ok(path)
}
