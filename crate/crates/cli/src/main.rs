//! Command-line entry points for the full pipeline: phantom data generation,
//! split construction, training, evaluation, summaries, significance tests,
//! parameter counts, and report rendering.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use protoseg3d::episodes::make_splits;
use protoseg3d::eval::{
    self, count_parameters, paired_significance, read_results_csv, render_summary, summarize,
    write_results_csv, write_summary_csv,
};
use protoseg3d::model::{load_checkpoint, ModelConfig, Variant};
use protoseg3d::phantom::{generate_dataset, load_dataset, load_manifest, GenerationConfig};
use protoseg3d::train::{train, TrainConfig};
use protoseg3d::util::write_run_manifest;
use protoseg3d::SplitSpec;

/// TOML run configuration; every section falls back to its defaults.
#[derive(Deserialize, Default)]
#[serde(default)]
struct FileConfig {
    data: GenerationConfig,
    model: ModelConfig,
    train: TrainConfig,
    eval: EvalSection,
}

#[derive(Deserialize)]
#[serde(default)]
struct EvalSection {
    threshold: f32,
    save_predictions: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            save_predictions: true,
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<FileConfig> {
    match path {
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&raw).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(FileConfig::default()),
    }
}

#[derive(Parser)]
#[command(
    name = "protoseg3d",
    about = "Registration-assisted prototypical few-shot 3D segmentation on synthetic phantoms",
    version
)]
struct Cli {
    /// Seed override applied to the subcommand's config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration file (sections [data], [model], [train], [eval]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-institution dataset.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build base/novel class and institution splits for one fold.
    MakeSplits {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        novel_institution: String,
        /// Fold index 1..=4.
        #[arg(long)]
        fold: u8,
        /// Output split JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant episodically (or the supervised upper bound).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// 3d | 3d_seg | 3d_seg_align | supervised
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over the enumerated episode grid.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Aggregate one or more results CSVs into scenario/fold summaries;
    /// prints pairwise permutation p-values when several variants are given.
    Summarize {
        /// results.csv paths.
        #[arg(long, num_args = 1.., required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a markdown report with tables, charts and example overlays.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory of stored predictions (defaults to `predictions/`
        /// next to the results CSV).
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print trainable parameter counts per component.
    CountParams {
        /// Read the model config from a checkpoint instead of --config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the built-in acquisition-scale configuration.
        #[arg(long)]
        paper_scale: bool,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(cli.config.as_ref())?;
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
    }

    match cli.command {
        Command::GenerateData { out } => {
            let manifest = generate_dataset(&cfg.data, &out)?;
            write_run_manifest(
                &out,
                "generate-data",
                Some(cfg.data.seed),
                &[],
                serde_json::json!({
                    "subjects": manifest.subjects.len(),
                    "institutions": manifest.institutions,
                }),
            )?;
            println!(
                "wrote {} subjects across {} institutions to {}",
                manifest.subjects.len(),
                manifest.institutions.len(),
                out.display()
            );
        }
        Command::MakeSplits {
            data,
            novel_institution,
            fold,
            out,
        } => {
            let manifest = load_manifest(&data)?;
            let seed = cli.seed.unwrap_or(cfg.data.seed);
            let split = make_splits(&manifest, &novel_institution, fold, seed)?;
            split.save(&out)?;
            println!(
                "fold {fold}: novel classes {:?}, novel institution {novel_institution}, split written to {}",
                split.novel_classes,
                out.display()
            );
        }
        Command::Train {
            data,
            split,
            variant,
            out,
            resume,
        } => {
            let variant = Variant::parse(&variant)?;
            let dataset = load_dataset(&data)?;
            let split_spec = SplitSpec::load(&split)?;
            let mut model_config = cfg.model.clone();
            model_config.variant = variant;
            model_config.num_classes = if variant == Variant::Supervised {
                dataset.manifest.classes.len()
            } else {
                split_spec.base_classes.len()
            };
            let resume_ckpt = resume
                .as_ref()
                .map(|p| load_checkpoint::<f32>(p))
                .transpose()?;
            let outcome = train::<f32>(
                &dataset,
                &split_spec,
                &model_config,
                &cfg.train,
                &out,
                resume_ckpt,
            )?;
            write_run_manifest(
                &out,
                "train",
                Some(cfg.train.seed),
                &[("data", data.as_path()), ("split", split.as_path())],
                serde_json::json!({
                    "variant": variant.to_string(),
                    "steps": cfg.train.steps,
                    "atlas_institution": outcome.atlas_institution,
                }),
            )?;
            println!(
                "trained {variant} for {} steps; checkpoint at {}",
                cfg.train.steps,
                outcome.checkpoint_path.display()
            );
        }
        Command::Evaluate {
            data,
            split,
            checkpoint,
            out,
            threshold,
        } => {
            let dataset = load_dataset(&data)?;
            let split_spec = SplitSpec::load(&split)?;
            let ckpt = load_checkpoint::<f32>(&checkpoint)?;
            let threshold = threshold.unwrap_or(cfg.eval.threshold);
            std::fs::create_dir_all(&out)?;
            let pred_dir = out.join("predictions");
            let rows = eval::evaluate(
                &ckpt,
                &dataset,
                &split_spec,
                threshold,
                cfg.eval.save_predictions.then_some(pred_dir.as_path()),
            )?;
            let csv_path = out.join("results.csv");
            write_results_csv(&csv_path, &rows)?;
            write_run_manifest(
                &out,
                "evaluate",
                None,
                &[
                    ("data", data.as_path()),
                    ("split", split.as_path()),
                    ("checkpoint", checkpoint.as_path()),
                ],
                serde_json::json!({
                    "threshold": threshold,
                    "episodes": rows.len(),
                }),
            )?;
            let summary = summarize(&rows)?;
            print!("{}", render_summary(&summary));
            println!("results written to {}", csv_path.display());
        }
        Command::Summarize { results, out } => {
            let mut all = Vec::new();
            let mut per_file = Vec::new();
            for path in &results {
                let rows = read_results_csv(path)?;
                all.extend(rows.clone());
                per_file.push(rows);
            }
            let summary = summarize(&all)?;
            std::fs::create_dir_all(&out)?;
            write_summary_csv(&out.join("summary.csv"), &summary)?;
            print!("{}", render_summary(&summary));
            // pairwise significance across files with distinct variants
            for i in 0..per_file.len() {
                for j in i + 1..per_file.len() {
                    let (a, b) = (&per_file[i], &per_file[j]);
                    let (va, vb) = (a[0].variant.clone(), b[0].variant.clone());
                    if va == vb {
                        continue;
                    }
                    match paired_significance(a, b) {
                        Ok(p) => println!("paired permutation p ({va} vs {vb}): {p:.4}"),
                        Err(e) => println!("no pairing between {va} and {vb}: {e}"),
                    }
                }
            }
            println!("summary written to {}", out.join("summary.csv").display());
        }
        Command::Report {
            results,
            data,
            predictions,
            out,
        } => {
            let rows = read_results_csv(&results)?;
            let dataset = data.as_ref().map(|d| load_dataset(d)).transpose()?;
            let pred_dir = predictions.or_else(|| {
                results
                    .parent()
                    .map(|p| p.join("predictions"))
                    .filter(|p| p.is_dir())
            });
            eval::report(&rows, dataset.as_ref(), pred_dir.as_deref(), &out)?;
            println!("report written to {}", out.join("report.md").display());
        }
        Command::CountParams {
            checkpoint,
            paper_scale,
        } => {
            let config = match (checkpoint, paper_scale) {
                (Some(path), false) => load_checkpoint::<f32>(&path)?.config,
                (None, true) => ModelConfig::paper_scale(),
                (None, false) => {
                    if cli.config.is_none() {
                        bail!("count-params needs --checkpoint, --paper-scale, or --config");
                    }
                    cfg.model.clone()
                }
                (Some(_), true) => bail!("--checkpoint and --paper-scale are exclusive"),
            };
            let (per_component, total) = count_parameters(&config);
            println!("variant: {}", config.variant);
            for (component, count) in &per_component {
                let name = match component.as_str() {
                    "ext" => "extractor",
                    "seg" => "segmentation head",
                    "aff" => "affine head",
                    other => other,
                };
                println!("{name:<18} {count:>10}");
            }
            println!("{:<18} {total:>10}", "total");
        }
    }
    Ok(())
}
