//! Command-line driver. Each subcommand resolves one `RunConfig`, writes
//! a manifest into its output directory before doing real work, and
//! leaves every artifact it names behind on success.
//!
//! Exit codes: 0 success, 2 usage or configuration problems, 3 when a
//! checkpoint and the data or configuration do not fit together.

pub mod config;
pub mod manifest;

use crate::backbone::{pretrain_and_freeze, register_backbone_params, verify_frozen, BackboneConfig};
use crate::data::{generate_synthetic_corpus, load_schema, DialogueExample, SyntheticCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::report;
use crate::graph::{build_graph_scoped, EdgeScope};
use crate::model::Model;
use crate::numerics::checkpoint;
use crate::numerics::ParamStore;
use crate::trainer::{evaluate, predict_turns, service_domains, train, write_metrics_csv, DevMetrics, TrainOutcome};
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use manifest::RunManifest;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const BACKBONE_CHECKPOINT: &str = "backbone.gpck";
pub const MODEL_CHECKPOINT: &str = "model.gpck";

#[derive(Debug, Parser)]
#[command(
    name = "graphprompt",
    version,
    about = "Schema-graph prompt learning for dialogue state tracking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the text backbone, freeze it, and write its checkpoint.
    Pretrain(PretrainArgs),
    /// Train graph and prompt parameters against a frozen backbone.
    Train(TrainArgs),
    /// Score a trained model on a corpus split or an example file.
    Eval(EvalArgs),
    /// Train and score every ablation over several seeds.
    Ablate(AblateArgs),
    /// Grid-search graph encoder settings.
    Sweep(SweepArgs),
    /// Print schema graph statistics.
    GraphInfo(GraphInfoArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for the manifest and the backbone checkpoint.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides the pretraining seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Backbone checkpoint produced by `pretrain`.
    #[arg(long)]
    pub backbone: PathBuf,
    /// Overrides the training seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the ablation: full, w/o-SlotConnect, w/o-GP,
    /// w/o-Active, or w/o-Active&GP.
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model checkpoint produced by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON file with a list of dialogue examples; when omitted the
    /// split named by --split is regenerated from the stored config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Corpus split to score: train, dev, or test.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Backbone checkpoint shared by every cell.
    #[arg(long)]
    pub backbone: PathBuf,
    /// Number of seeds per ablation.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Backbone checkpoint shared by every cell.
    #[arg(long)]
    pub backbone: PathBuf,
    /// Overrides the training seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GraphInfoArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Schema definition file; when omitted the synthetic schema from
    /// the configuration is used.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// When given, the edge list is written here with a manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Run one parsed invocation and return the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::GraphInfo(a) => cmd_graph_info(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

struct Prepared {
    corpus: SyntheticCorpus,
    vocab: Vocabulary,
}

/// Regenerate the corpus and vocabulary a configuration describes.
fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let corpus = generate_synthetic_corpus(&cfg.data.spec, cfg.data.corpus_seed)?;
    let texts = corpus.vocab_texts();
    let vocab = Vocabulary::build(
        texts.iter().map(|s| s.as_str()),
        corpus.schema.max_slots_per_service(),
        corpus.schema.num_slots(),
        cfg.prompts.num_shared,
    );
    Ok(Prepared { corpus, vocab })
}

fn json_value<T: Serialize>(what: &str, x: &T) -> Result<serde_json::Value> {
    serde_json::to_value(x).map_err(|e| Error::Checkpoint(format!("serialize {what}: {e}")))
}

fn extra_field<T: serde::de::DeserializeOwned>(extra: &serde_json::Value, key: &str) -> Result<T> {
    let value = extra
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Incompatible(format!("checkpoint is missing the '{key}' record")))?;
    serde_json::from_value(value)
        .map_err(|e| Error::Incompatible(format!("checkpoint '{key}' record: {e}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct BackboneBundle {
    store: ParamStore<f64>,
    backbone: BackboneConfig,
    checksums: BTreeMap<String, String>,
}

/// Load a pretrained backbone and check it against the run: same
/// vocabulary, same architecture, frozen tensors intact.
fn load_backbone(path: &Path, cfg: &RunConfig, vocab: &Vocabulary) -> Result<BackboneBundle> {
    let loaded = checkpoint::load::<f64>(path)?;
    let kind: String = extra_field(&loaded.extra, "kind")?;
    if kind != "backbone" {
        return Err(Error::Incompatible(format!(
            "{} is a '{kind}' checkpoint, expected a pretrained backbone",
            path.display()
        )));
    }
    let stored_vocab: serde_json::Value = extra_field(&loaded.extra, "vocab")?;
    if stored_vocab != json_value("vocabulary", vocab)? {
        return Err(Error::Incompatible(
            "checkpoint vocabulary does not match the configured corpus".to_string(),
        ));
    }
    let backbone: BackboneConfig = extra_field(&loaded.extra, "backbone")?;
    let mut expected = cfg.backbone.clone();
    expected.vocab_size = vocab.len();
    if json_value("backbone config", &backbone)? != json_value("backbone config", &expected)? {
        return Err(Error::Incompatible(
            "backbone architecture in the checkpoint does not match the run configuration"
                .to_string(),
        ));
    }
    let checksums: BTreeMap<String, String> = extra_field(&loaded.extra, "checksums")?;
    verify_frozen(&loaded.store, &checksums)
        .map_err(|e| Error::Incompatible(format!("frozen backbone check failed: {e}")))?;
    Ok(BackboneBundle {
        store: loaded.store,
        backbone,
        checksums,
    })
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.pretrain.seed = seed;
    }
    let prep = prepare(&cfg)?;
    let mut backbone = cfg.backbone.clone();
    backbone.vocab_size = prep.vocab.len();
    backbone.validate()?;

    let mut man = RunManifest::start("pretrain", cfg.pretrain.seed, &args.out_dir, &cfg);
    man.write(&args.out_dir)?;

    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain.seed);
    register_backbone_params(&mut store, &backbone, &mut rng)?;
    let sentences = prep.corpus.pretrain_sentences();
    let pretrained = pretrain_and_freeze(
        &mut store,
        &backbone,
        &prep.vocab,
        &sentences,
        cfg.pretrain.mode(),
        cfg.pretrain.seed,
    )?;

    let ckpt = args.out_dir.join(BACKBONE_CHECKPOINT);
    let extra = serde_json::json!({
        "kind": "backbone",
        "backbone": backbone,
        "vocab": prep.vocab,
        "checksums": pretrained.checksums,
        "config": cfg,
    });
    checkpoint::save(&ckpt, &store, pretrained.losses.len() as u64, extra)?;

    match (pretrained.losses.first(), pretrained.losses.last()) {
        (Some(first), Some(last)) => println!(
            "pretrained {} steps, loss {first:.4} -> {last:.4}",
            pretrained.losses.len()
        ),
        _ => println!("backbone frozen at its random initialization"),
    }
    println!("wrote {}", ckpt.display());
    man.finish(&args.out_dir, &[&ckpt])?;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(ablation) = &args.ablation {
        cfg.ablation = ablation.clone();
    }
    let flags = cfg.ablation_flags()?;
    let prep = prepare(&cfg)?;
    let bundle = load_backbone(&args.backbone, &cfg, &prep.vocab)?;
    let mut store = bundle.store;

    let graph = build_graph_scoped(&prep.corpus.schema, cfg.edge_scope);
    let model = Model::build(
        prep.corpus.schema.clone(),
        graph,
        prep.vocab.clone(),
        cfg.encoder.clone(),
        bundle.backbone.clone(),
        cfg.prompts.num_shared,
        cfg.prompts.order,
        flags,
    )?;

    let mut man = RunManifest::start("train", cfg.train.seed, &args.out_dir, &cfg);
    man.write(&args.out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    model.register_prompt_params(&mut store, &mut rng)?;
    let outcome = train(
        &model,
        &cfg.train,
        &mut store,
        &bundle.checksums,
        &prep.corpus.train,
        &prep.corpus.dev,
    )?;

    let metrics_path = args.out_dir.join("metrics.csv");
    write_metrics_csv(&outcome.records, &metrics_path)?;

    let ckpt = args.out_dir.join(MODEL_CHECKPOINT);
    let extra = serde_json::json!({
        "kind": "model",
        "backbone": bundle.backbone,
        "vocab": prep.vocab,
        "checksums": bundle.checksums,
        "config": cfg,
        "best_epoch": outcome.best_epoch,
        "best_avg_jga": outcome.best_avg_jga,
    });
    checkpoint::save(&ckpt, &store, outcome.best_epoch as u64, extra)?;

    println!(
        "trained {} epochs{}, best epoch {} with dev Avg JGA {:.4}",
        outcome.records.len(),
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.best_epoch,
        outcome.best_avg_jga
    );
    println!("wrote {}", metrics_path.display());
    println!("wrote {}", ckpt.display());
    man.finish(&args.out_dir, &[&metrics_path, &ckpt])?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let loaded = checkpoint::load::<f64>(&args.checkpoint)?;
    let kind: String = extra_field(&loaded.extra, "kind")?;
    if kind != "model" {
        return Err(Error::Incompatible(format!(
            "{} is a '{kind}' checkpoint, expected a trained model",
            args.checkpoint.display()
        )));
    }
    let cfg: RunConfig = extra_field(&loaded.extra, "config")?;
    cfg.validate()?;
    let vocab: Vocabulary = extra_field(&loaded.extra, "vocab")?;
    let checksums: BTreeMap<String, String> = extra_field(&loaded.extra, "checksums")?;
    let backbone: BackboneConfig = extra_field(&loaded.extra, "backbone")?;
    verify_frozen(&loaded.store, &checksums)
        .map_err(|e| Error::Incompatible(format!("frozen backbone check failed: {e}")))?;

    let embed_id = loaded
        .store
        .id("backbone.token_embed")
        .ok_or_else(|| Error::Incompatible("checkpoint has no token embedding table".to_string()))?;
    let rows = loaded.store.value(embed_id).shape()[0];
    if rows != vocab.len() {
        return Err(Error::Incompatible(format!(
            "token table has {rows} rows but the stored vocabulary has {} entries",
            vocab.len()
        )));
    }

    let prep = prepare(&cfg)?;
    if json_value("vocabulary", &prep.vocab)? != json_value("vocabulary", &vocab)? {
        return Err(Error::Incompatible(
            "regenerated corpus vocabulary does not match the checkpoint".to_string(),
        ));
    }

    let flags = cfg.ablation_flags()?;
    let graph = build_graph_scoped(&prep.corpus.schema, cfg.edge_scope);
    let model = Model::build(
        prep.corpus.schema.clone(),
        graph,
        vocab,
        cfg.encoder.clone(),
        backbone,
        cfg.prompts.num_shared,
        cfg.prompts.order,
        flags,
    )?;

    let examples: Vec<DialogueExample> = match &args.data {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let list: Vec<DialogueExample> =
                serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
            for example in &list {
                model.schema.service_slots(&example.service).map_err(|_| {
                    Error::Incompatible(format!(
                        "service '{}' in {} is not part of the model schema",
                        example.service,
                        path.display()
                    ))
                })?;
            }
            list
        }
        None => match args.split.as_str() {
            "train" => prep.corpus.train.clone(),
            "dev" => prep.corpus.dev.clone(),
            "test" => prep.corpus.test.clone(),
            other => {
                return Err(Error::Argument(format!(
                    "unknown split '{other}', expected train, dev, or test"
                )))
            }
        },
    };
    if examples.is_empty() {
        return Err(Error::Argument("no examples to evaluate".to_string()));
    }

    let mut man = RunManifest::start("eval", cfg.train.seed, &args.out_dir, &cfg);
    man.write(&args.out_dir)?;

    let turns = predict_turns(&model, &loaded.store, &examples, cfg.train.decode_max_len)?;
    let rep = report(&turns, &service_domains(&model))?;

    let csv_path = args.out_dir.join("report.csv");
    write_text(&csv_path, &rep.to_csv())?;
    let json_path = args.out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&rep)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    write_text(&json_path, &json)?;

    println!("{rep}");
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    man.finish(&args.out_dir, &[&csv_path, &json_path])?;
    Ok(())
}

/// Train one configuration cell from a fresh copy of the backbone and
/// score it on the test split.
fn run_cell(
    cfg: &RunConfig,
    prep: &Prepared,
    backbone_path: &Path,
    ablation: &str,
    train_seed: u64,
) -> Result<(TrainOutcome, DevMetrics)> {
    let mut cell = cfg.clone();
    cell.ablation = ablation.to_string();
    cell.train.seed = train_seed;
    let flags = cell.ablation_flags()?;
    let bundle = load_backbone(backbone_path, &cell, &prep.vocab)?;
    let mut store = bundle.store;
    let graph = build_graph_scoped(&prep.corpus.schema, cell.edge_scope);
    let model = Model::build(
        prep.corpus.schema.clone(),
        graph,
        prep.vocab.clone(),
        cell.encoder.clone(),
        bundle.backbone.clone(),
        cell.prompts.num_shared,
        cell.prompts.order,
        flags,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_seed);
    model.register_prompt_params(&mut store, &mut rng)?;
    let outcome = train(
        &model,
        &cell.train,
        &mut store,
        &bundle.checksums,
        &prep.corpus.train,
        &prep.corpus.dev,
    )?;
    let test = evaluate(&model, &store, &prep.corpus.test, cell.train.decode_max_len)?;
    Ok((outcome, test))
}

pub const ABLATION_ORDER: [&str; 5] = [
    "full",
    "w/o-SlotConnect",
    "w/o-GP",
    "w/o-Active",
    "w/o-Active&GP",
];

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(Error::Argument("--seeds must be at least 1".to_string()));
    }
    let cfg = load_config(&args.config)?;
    let prep = prepare(&cfg)?;
    // Fail fast on a bad checkpoint before the first cell trains.
    load_backbone(&args.backbone, &cfg, &prep.vocab)?;

    let mut man = RunManifest::start("ablate", cfg.train.seed, &args.out_dir, &cfg);
    man.write(&args.out_dir)?;

    let mut csv = String::from("ablation,seed,best_epoch,dev_avg_jga,test_jga,test_avg_jga\n");
    let mut by_ablation: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ablation in ABLATION_ORDER {
        for i in 0..args.seeds {
            let seed = cfg.train.seed + i;
            let (outcome, test) = run_cell(&cfg, &prep, &args.backbone, ablation, seed)?;
            println!(
                "{ablation} seed {seed}: dev Avg JGA {:.4}, test Avg JGA {:.4}",
                outcome.best_avg_jga, test.avg_jga
            );
            csv.push_str(&format!(
                "{ablation},{seed},{},{:.6},{:.6},{:.6}\n",
                outcome.best_epoch, outcome.best_avg_jga, test.jga, test.avg_jga
            ));
            by_ablation.entry(ablation).or_default().push(test.avg_jga);
        }
    }

    let csv_path = args.out_dir.join("ablation.csv");
    write_text(&csv_path, &csv)?;

    let mut summary = String::from("ablation,seeds,mean_test_avg_jga,std_test_avg_jga\n");
    println!("\ntest Avg JGA over {} seed(s):", args.seeds);
    for ablation in ABLATION_ORDER {
        let values = &by_ablation[ablation];
        let (mean, std) = mean_std(values);
        println!("  {ablation:<16} {mean:.4} +/- {std:.4}");
        summary.push_str(&format!("{ablation},{},{mean:.6},{std:.6}\n", values.len()));
    }
    let summary_path = args.out_dir.join("summary.csv");
    write_text(&summary_path, &summary)?;

    println!("wrote {}", csv_path.display());
    println!("wrote {}", summary_path.display());
    man.finish(&args.out_dir, &[&csv_path, &summary_path])?;
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let prep = prepare(&cfg)?;
    load_backbone(&args.backbone, &cfg, &prep.vocab)?;

    let mut man = RunManifest::start("sweep", cfg.train.seed, &args.out_dir, &cfg);
    man.write(&args.out_dir)?;

    let mut csv = String::from("propagation,num_levels,hidden_dim,avg_jga,seconds\n");
    for &prop in &cfg.sweep.propagations {
        for &levels in &cfg.sweep.num_levels {
            for &hidden in &cfg.sweep.hidden_dims {
                let mut cell = cfg.clone();
                cell.encoder.propagation = prop;
                cell.encoder.num_levels = levels;
                cell.encoder.hidden_dim = hidden;
                cell.encoder.validate()?;
                let start = Instant::now();
                let (outcome, _) = run_cell(
                    &cell,
                    &prep,
                    &args.backbone,
                    &cfg.ablation,
                    cfg.train.seed,
                )?;
                let seconds = start.elapsed().as_secs_f64();
                println!(
                    "{prop} levels={levels} hidden={hidden}: dev Avg JGA {:.4} in {seconds:.1}s",
                    outcome.best_avg_jga
                );
                csv.push_str(&format!(
                    "{prop},{levels},{hidden},{:.6},{seconds:.3}\n",
                    outcome.best_avg_jga
                ));
            }
        }
    }

    let csv_path = args.out_dir.join("sweep.csv");
    write_text(&csv_path, &csv)?;
    println!("wrote {}", csv_path.display());
    man.finish(&args.out_dir, &[&csv_path])?;
    Ok(())
}

fn cmd_graph_info(args: &GraphInfoArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let schema = match &args.schema {
        Some(path) => load_schema(path)?,
        None => generate_synthetic_corpus(&cfg.data.spec, cfg.data.corpus_seed)?.schema,
    };
    let graph = build_graph_scoped(&schema, cfg.edge_scope);
    let scope = match cfg.edge_scope {
        EdgeScope::Service => "service",
        EdgeScope::Domain => "domain",
    };

    println!("services: {}", schema.services.len());
    for svc in &schema.services {
        println!("  {} ({} slots)", svc.name, svc.slots.len());
    }
    println!("graph nodes (slots): {}", graph.num_nodes());
    println!("graph edges ({scope} scope): {}", graph.num_edges());
    let mut degrees = vec![0usize; graph.num_nodes()];
    for (u, v) in graph.edge_list() {
        degrees[u] += 1;
        degrees[v] += 1;
    }
    if let (Some(min), Some(max)) = (degrees.iter().min(), degrees.iter().max()) {
        println!("degree: min {min}, max {max}");
    }

    if let Some(out_dir) = &args.out_dir {
        let mut man = RunManifest::start("graph-info", 0, out_dir, &cfg);
        man.write(out_dir)?;
        let edges_path = out_dir.join("edges.txt");
        write_text(&edges_path, &graph.export_edge_list())?;
        println!("wrote {}", edges_path.display());
        man.finish(out_dir, &[&edges_path])?;
    }
    Ok(())
}
