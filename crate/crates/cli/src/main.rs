//! `tut`: train, evaluate, predict with and ablate Temporal U-Transformer
//! models on frame-feature datasets.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use tut_core::data::{
    generate_synthetic, import_npy, load_dataset, resample_temporal, write_dataset, write_features,
    Dataset, SynthSpec,
};
use tut_core::metrics::{EvalOptions, EvalReport};
use tut_core::net::{attention_entry_count, checkpoint, Model};
use tut_core::trainer::{
    ablate, ablation_csv, evaluate_run, predict_resampled, train, write_predictions, write_run,
    Grid, ENTRY_COUNT_LEN,
};

use config::{extract_overrides, RunConfig};

const KEY_HELP: &str = "\
Configuration keys can be set in the config file or overridden with --key value:
  [model] preset layers window heads hidden ffn refine_hidden refine_ffn stages
          input_dropout ffn_dropout attn_dropout architecture attention pe
          rpe_share rpe_split_coder refine_input max_len input_dim num_classes
  [train] epochs lr weight_decay lambda beta theta ba_distance seed shuffle
          lr_decay_after lr_decay_factor eval_every keep_best
  [data]  root split eval_split fps source_fps ignore";

#[derive(Parser, Debug)]
#[command(name = "tut", version, about = "Temporal U-Transformer action segmentation", after_help = KEY_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoint.bin, log.csv, metrics.csv and config.txt.
    #[command(after_help = KEY_HELP)]
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print F1@{10,25,50}, edit and accuracy.
    #[command(after_help = KEY_HELP)]
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the metrics CSV here as well.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Average F1 over videos instead of pooling segment counts.
        #[arg(long)]
        average_f1: bool,
    },
    /// Write label files, segment CSVs and SVG timelines for every video.
    #[command(after_help = KEY_HELP)]
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Leave the ground-truth strip out of the timelines.
        #[arg(long)]
        no_gt: bool,
    },
    /// Generate a synthetic dataset in the standard directory layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        videos: usize,
        #[arg(long, default_value_t = 128)]
        min_len: usize,
        #[arg(long, default_value_t = 256)]
        max_len: usize,
        #[arg(long, default_value_t = 4)]
        min_segments: usize,
        #[arg(long, default_value_t = 8)]
        max_segments: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.25)]
        noise: f64,
        /// Generator seed (also accepted as --seed).
        #[arg(long = "synth-seed", default_value_t = 0)]
        synth_seed: u64,
        /// Name of the split file listing every video.
        #[arg(long = "split-name", default_value = "train")]
        split_name: String,
    },
    /// Train and evaluate one model per cell of an ablation grid.
    #[command(after_help = KEY_HELP)]
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// One of arch, pe, ba_distance, window, heads, beta.
        #[arg(long)]
        grid: String,
        /// Comma-separated values for the window, heads and beta grids.
        #[arg(long)]
        values: Option<String>,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the configuration and parameter manifest of a checkpoint.
    InspectCheckpoint { checkpoint: PathBuf },
    /// Convert `.npy` feature arrays to the native feature format.
    ImportFeatures {
        /// A `.npy` file or a directory of them.
        #[arg(long)]
        input: PathBuf,
        /// Output file, or directory when the input is a directory.
        #[arg(long)]
        output: PathBuf,
        /// Arrays are stored frames × features instead of features × frames.
        #[arg(long)]
        frames_first: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(std::env::args().collect()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(args: Vec<String>) -> Result<()> {
    let is_synth = args.get(1).is_some_and(|a| a == "synth");
    let (args, overrides) = if is_synth {
        // The generator has its own flags; only --seed is shared.
        let args = args
            .into_iter()
            .map(|a| {
                if a == "--seed" {
                    "--synth-seed".to_string()
                } else {
                    a
                }
            })
            .collect();
        (args, Vec::new())
    } else {
        extract_overrides(args)?
    };
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    match cli.command {
        Command::Train { config, out } => cmd_train(config.as_deref(), &overrides, &out),
        Command::Eval {
            config,
            checkpoint,
            out,
            average_f1,
        } => cmd_eval(
            config.as_deref(),
            &overrides,
            &checkpoint,
            out.as_deref(),
            average_f1,
        ),
        Command::Predict {
            config,
            checkpoint,
            out,
            no_gt,
        } => cmd_predict(config.as_deref(), &overrides, &checkpoint, &out, !no_gt),
        Command::Synth {
            out,
            classes,
            videos,
            min_len,
            max_len,
            min_segments,
            max_segments,
            dim,
            noise,
            synth_seed,
            split_name,
        } => {
            let spec = SynthSpec {
                classes,
                videos,
                min_len,
                max_len,
                min_segments,
                max_segments,
                dim,
                noise,
                seed: synth_seed,
            };
            let ds = generate_synthetic(&spec)?;
            write_dataset(&ds, &out, &split_name)?;
            println!("wrote {} videos to {}", ds.videos.len(), out.display());
            Ok(())
        }
        Command::Ablate {
            config,
            grid,
            values,
            out,
        } => cmd_ablate(
            config.as_deref(),
            &overrides,
            &grid,
            values.as_deref(),
            &out,
        ),
        Command::InspectCheckpoint { checkpoint } => cmd_inspect(&checkpoint),
        Command::ImportFeatures {
            input,
            output,
            frames_first,
        } => cmd_import(&input, &output, !frames_first),
    }
}

/// Loads `split` and brings it to the model frame rate.
fn load_split(cfg: &RunConfig, split: Option<&str>) -> Result<Dataset> {
    let data = &cfg.data;
    let root = data.root()?;
    let stored_fps = data.source_fps.unwrap_or(data.fps);
    let mut ds = load_dataset(root, split, stored_fps)
        .with_context(|| format!("loading {}", root.display()))?;
    if stored_fps != data.fps {
        ds.videos = ds
            .videos
            .iter()
            .map(|v| resample_temporal(v, stored_fps, data.fps))
            .collect::<tut_core::Result<_>>()?;
    }
    if ds.videos.is_empty() {
        bail!("no videos in {}", root.display());
    }
    Ok(ds)
}

fn eval_options(cfg: &RunConfig, ds: &Dataset, average_f1: bool) -> Result<EvalOptions> {
    Ok(EvalOptions {
        ignored: cfg.data.ignored_ids(&ds.mapping)?,
        pool_f1: !average_f1,
        ..EvalOptions::default()
    })
}

fn cmd_train(config: Option<&Path>, overrides: &[(String, String)], out: &Path) -> Result<()> {
    if !overrides.iter().any(|(k, _)| k == "seed") {
        bail!("train needs an explicit --seed");
    }
    let mut cfg = RunConfig::load(config, overrides)?;
    let ds = load_split(&cfg, cfg.data.split.as_deref())?;
    let dim = ds.feature_dim().context("dataset has no videos")?;
    cfg.bind_dims(dim, ds.mapping.len())?;
    info!(
        "training on {} videos ({} classes, {}-dim features) for {} epochs",
        ds.videos.len(),
        ds.mapping.len(),
        dim,
        cfg.train.epochs
    );
    let outcome = train(&ds, &cfg.model, &cfg.train)?;
    let eval_ds = match &cfg.data.eval_split {
        Some(s) => load_split(&cfg, Some(s))?,
        None => ds,
    };
    let report = evaluate_run(
        &outcome.model,
        &eval_ds,
        &eval_options(&cfg, &eval_ds, false)?,
    )?;
    write_run(out, &outcome, &report)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    print!("{}", report.table());
    info!("run written to {}", out.display());
    Ok(())
}

fn load_model(path: &Path, cfg: &mut RunConfig) -> Result<Model> {
    let model = checkpoint::load(path, None)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    // Explicit model keys must agree with the checkpoint.
    let asked = cfg.model.to_pairs();
    for ((k, have), (_, want)) in model.config.to_pairs().into_iter().zip(asked) {
        if cfg.explicit.contains(k) && have != want {
            bail!("checkpoint has {k} = {have}, the config asks for {want}");
        }
    }
    cfg.model = model.config.clone();
    Ok(model)
}

fn eval_split(cfg: &RunConfig) -> Option<&str> {
    cfg.data.eval_split.as_deref().or(cfg.data.split.as_deref())
}

/// Dataset at its stored rate, and per-video predictions at that rate.
fn predictions(model: &Model, cfg: &RunConfig) -> Result<(Dataset, Vec<Vec<usize>>)> {
    let data = &cfg.data;
    let root = data.root()?;
    let stored_fps = data.source_fps.unwrap_or(data.fps);
    let ds = load_dataset(root, eval_split(cfg), stored_fps)?;
    if ds.videos.is_empty() {
        bail!("no videos in {}", root.display());
    }
    if ds.mapping.len() != model.config.num_classes {
        bail!(
            "checkpoint predicts {} classes, the dataset mapping has {}",
            model.config.num_classes,
            ds.mapping.len()
        );
    }
    let preds = ds
        .videos
        .iter()
        .map(|v| predict_resampled(model, v, stored_fps, data.fps))
        .collect::<tut_core::Result<Vec<_>>>()?;
    Ok((ds, preds))
}

fn report_for(ds: &Dataset, preds: &[Vec<usize>], opts: &EvalOptions) -> Result<EvalReport> {
    let pairs: Vec<(&[usize], &[usize])> = preds
        .iter()
        .zip(&ds.videos)
        .map(|(p, v)| (p.as_slice(), v.labels.as_slice()))
        .collect();
    Ok(tut_core::metrics::evaluate_corpus(&pairs, opts)?)
}

fn cmd_eval(
    config: Option<&Path>,
    overrides: &[(String, String)],
    ckpt: &Path,
    out: Option<&Path>,
    average_f1: bool,
) -> Result<()> {
    let mut cfg = RunConfig::load(config, overrides)?;
    let model = load_model(ckpt, &mut cfg)?;
    let (ds, preds) = predictions(&model, &cfg)?;
    let report = report_for(&ds, &preds, &eval_options(&cfg, &ds, average_f1)?)?;
    print!("{}", report.table());
    if let Some(out) = out {
        fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_predict(
    config: Option<&Path>,
    overrides: &[(String, String)],
    ckpt: &Path,
    out: &Path,
    with_gt: bool,
) -> Result<()> {
    let mut cfg = RunConfig::load(config, overrides)?;
    let model = load_model(ckpt, &mut cfg)?;
    let (ds, preds) = predictions(&model, &cfg)?;
    write_predictions(out, &ds, &preds, with_gt)?;
    println!(
        "wrote predictions for {} videos to {}",
        ds.videos.len(),
        out.display()
    );
    Ok(())
}

fn cmd_ablate(
    config: Option<&Path>,
    overrides: &[(String, String)],
    grid: &str,
    values: Option<&str>,
    out: &Path,
) -> Result<()> {
    let mut cfg = RunConfig::load(config, overrides)?;
    let mut grid = Grid::by_name(grid)?;
    if let Some(values) = values {
        let list: Vec<&str> = values
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        let ints = || -> Result<Vec<usize>> {
            list.iter()
                .map(|v| v.parse().with_context(|| format!("bad grid value '{v}'")))
                .collect()
        };
        grid = match grid {
            Grid::Window(_) => Grid::Window(ints()?),
            Grid::Heads(_) => Grid::Heads(ints()?),
            Grid::Beta(_) => Grid::Beta(
                list.iter()
                    .map(|v| v.parse().with_context(|| format!("bad grid value '{v}'")))
                    .collect::<Result<_>>()?,
            ),
            _ => bail!("--values only applies to the window, heads and beta grids"),
        };
    }
    let train_set = load_split(&cfg, cfg.data.split.as_deref())?;
    let eval_set = match &cfg.data.eval_split {
        Some(s) => load_split(&cfg, Some(s))?,
        None => train_set.clone(),
    };
    let dim = train_set.feature_dim().context("dataset has no videos")?;
    cfg.bind_dims(dim, train_set.mapping.len())?;
    let rows = ablate(&grid, &cfg.model, &cfg.train, &train_set, &eval_set)?;
    let csv = ablation_csv(&rows);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    print!("{csv}");
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let manifest = checkpoint::read_manifest(&bytes)?;
    let model = checkpoint::from_bytes(&bytes)?;
    println!("checkpoint {} ({} bytes)", path.display(), bytes.len());
    println!("[model]");
    print!("{}", manifest.config_text);
    println!();
    println!(
        "{} tensors, {} parameters",
        manifest.entries.len(),
        model.params.num_scalars()
    );
    for e in &manifest.entries {
        println!("  {:<40} {:?} {:?}", e.name, e.shape, e.dtype);
    }
    println!(
        "attention entries per forward pass at {ENTRY_COUNT_LEN} frames: {}",
        attention_entry_count(&model.config, ENTRY_COUNT_LEN)
    );
    Ok(())
}

fn cmd_import(input: &Path, output: &Path, transpose: bool) -> Result<()> {
    if input.is_dir() {
        fs::create_dir_all(output)?;
        let mut files: Vec<PathBuf> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "npy"))
            .collect();
        files.sort();
        for f in &files {
            let stem = f.file_stem().context("file without a name")?;
            let t = import_npy(f, transpose)?;
            write_features(output.join(format!("{}.bin", stem.to_string_lossy())), &t)?;
        }
        println!("converted {} files into {}", files.len(), output.display());
    } else {
        let t = import_npy(input, transpose)?;
        write_features(output, &t)?;
        println!(
            "{} frames × {} features -> {}",
            t.rows(),
            t.cols(),
            output.display()
        );
    }
    Ok(())
}
