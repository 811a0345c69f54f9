//! Command-line interface: `train`, `analyze` and `synth`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis::{attention_records, attention_summary, export_subgraph_influence, influence_scores, write_json};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{load_dataset_with, make_synthetic, save_dataset, LoadOptions};
use crate::error::{Error, Result};
use crate::experiment::{parse_seed_range, run_experiment};
use crate::layers::{DropoutPlacement, JkMode, LayerKind, ModelConfig};
use crate::presets::preset;
use crate::training::{StopMetric, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dna-gnn", version, about = "Node classification with DNA and GCN graph networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed and write aggregate metrics.
    Train(TrainArgs),
    /// Export influence scores and attention statistics of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (meta.json, edges.bin, features.bin, labels.bin).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Named architecture, e.g. `dna-cora-g16`; excludes the architecture flags.
    #[arg(long, conflicts_with_all = ["layer_kind", "num_layers", "hidden", "groups", "heads", "jk"])]
    pub preset: Option<String>,
    #[arg(long, default_value_t = LayerKind::Gcn)]
    pub layer_kind: LayerKind,
    /// Graph layers after the input projection.
    #[arg(long, default_value_t = 2)]
    pub num_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1)]
    pub groups: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = JkMode::None)]
    pub jk: JkMode,
    /// Attend to at most this many of the latest representations.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0005)]
    pub l2: f64,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0.8)]
    pub attn_dropout: f64,
    #[arg(long, default_value_t = DropoutPlacement::Ends)]
    pub dropout_placement: DropoutPlacement,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 1000)]
    pub max_epochs: usize,
    /// Early-stopping criterion: `val-accuracy` or `val-loss`.
    #[arg(long, default_value = "val-accuracy", value_parser = parse_stop_metric)]
    pub stop_metric: StopMetric,
    /// Scale every feature row to sum to one.
    #[arg(long)]
    pub row_normalize: bool,
    /// Inclusive seed range `a..b`, or a single seed.
    #[arg(long, default_value = "1..10")]
    pub seeds: String,
    /// Metrics file; wall times go to `<out>.timing.json`.
    #[arg(long, default_value = "metrics.json")]
    pub out: PathBuf,
    /// Write the best checkpoint of every seed here as `seed-<s>.json`.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

fn parse_stop_metric(s: &str) -> std::result::Result<StopMetric, String> {
    match s {
        "val-accuracy" => Ok(StopMetric::ValAccuracy),
        "val-loss" => Ok(StopMetric::ValLoss),
        other => Err(format!("unknown stop metric `{other}`, expected val-accuracy or val-loss")),
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Manifest written by `train --checkpoint-dir`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Node whose influence distribution is exported.
    #[arg(long)]
    pub node: usize,
    /// Neighborhood radius of the exported subgraph.
    #[arg(long, default_value_t = 2)]
    pub hops: usize,
    #[arg(long)]
    pub row_normalize: bool,
    /// Output directory for `influence.json` and `attention.json`.
    #[arg(long, default_value = "analysis")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub f: usize,
    #[arg(long, default_value_t = 3)]
    pub c: usize,
    /// Edge probability.
    #[arg(long, default_value_t = 0.05)]
    pub p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Plant the labels in the first `c` feature columns.
    #[arg(long)]
    pub separable: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Synth(args) => cmd_synth(&args),
    }
}

impl TrainArgs {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = match &self.preset {
            Some(name) => preset(name)?,
            None => ModelConfig {
                num_layers: self.num_layers,
                hidden: self.hidden,
                groups: self.groups,
                heads: self.heads,
                layer_kind: self.layer_kind,
                jk_mode: self.jk,
                ..ModelConfig::default()
            },
        };
        let cfg = ModelConfig {
            dropout: self.dropout,
            attn_dropout: self.attn_dropout,
            dropout_placement: self.dropout_placement,
            window: self.window,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            l2: self.l2,
            patience: self.patience,
            max_epochs: self.max_epochs,
            stop_metric: self.stop_metric,
            seed: 0,
        }
    }
}

fn timing_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".timing.json");
    out.with_file_name(name)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let model_cfg = args.model_config()?;
    let train_cfg = args.train_config();
    train_cfg.validate()?;
    let seeds = parse_seed_range(&args.seeds)?;
    let dataset = load_dataset_with(
        &args.dataset,
        LoadOptions {
            row_normalize: args.row_normalize,
        },
    )?;
    let (result, models) = run_experiment(&model_cfg, &train_cfg, &dataset, &seeds, args.parallel.max(1), |seed, r| {
        println!(
            "seed {seed}: test {:.4} val {:.4} best epoch {} epochs {} ({:.1}s)",
            r.test_acc_at_best_val, r.best_val_acc, r.best_epoch, r.epochs_run, r.wall_time_secs
        );
    })?;
    println!(
        "test accuracy {:.4} ± {:.4} over {} seeds",
        result.test_acc.mean,
        result.test_acc.std,
        seeds.len()
    );

    if let Some(dir) = &args.checkpoint_dir {
        for (run, model) in result.runs.iter().zip(&models) {
            save_checkpoint(model, dir.join(format!("seed-{}.json", run.seed)))?;
        }
    }

    let metrics = json!({
        "config": {
            "dataset": dataset.name,
            "preset": args.preset,
            "model": model_cfg,
            "train": train_cfg,
            "row_normalize": args.row_normalize,
            "seeds": seeds,
        },
        "runs": result.runs,
        "test_acc": result.test_acc,
        "val_acc": result.val_acc,
    });
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_json(&args.out, &metrics)?;
    let timing = json!({
        "total_secs": started.elapsed().as_secs_f64(),
        "runs": result.runs.iter().map(|r| json!({"seed": r.seed, "wall_time_secs": r.result.wall_time_secs})).collect::<Vec<_>>(),
    });
    write_json(timing_path(&args.out), &timing)?;
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let dataset = load_dataset_with(
        &args.dataset,
        LoadOptions {
            row_normalize: args.row_normalize,
        },
    )?;
    let model = load_checkpoint(&args.checkpoint)?;
    if model.in_features() != dataset.num_features() || model.num_classes() != dataset.num_classes {
        return Err(Error::Validation(format!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            model.in_features(),
            model.num_classes(),
            dataset.num_features(),
            dataset.num_classes
        )));
    }
    std::fs::create_dir_all(&args.out)?;
    let scores = influence_scores(&model, &dataset, args.node)?;
    let export = export_subgraph_influence(&dataset.graph, args.hops, &scores)?;
    write_json(args.out.join("influence.json"), &export)?;
    println!(
        "influence of node {}: {} nodes within {} hops",
        args.node,
        export.nodes.len(),
        args.hops
    );

    let records = attention_records(&model, &dataset)?;
    if records.is_empty() {
        println!("model has no attention layers; attention.json not written");
    } else {
        let summary = attention_summary(&records, None)?;
        write_json(args.out.join("attention.json"), &summary)?;
        println!("attention statistics for {} layers", summary.len());
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let ds = make_synthetic(args.n, args.f, args.c, args.p, args.seed, args.separable)?;
    save_dataset(&ds, &args.out)?;
    println!(
        "wrote {} nodes, {} edges, {} features, {} classes to {}",
        ds.num_nodes(),
        ds.graph.num_undirected_edges(),
        ds.num_features(),
        ds.num_classes,
        args.out.display()
    );
    Ok(())
}
