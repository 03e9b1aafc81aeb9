mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agseg_core::data::{load_dataset, load_input, read_mask, synth_corpus, write_gray, Manifest};
use agseg_core::edge::edge_target_from_mask;
use agseg_core::eval::DEFAULT_THRESHOLD;
use agseg_core::model::build_network;
use agseg_core::train::{default_grid, hyper_search, run_cv, train_split, tune_csv, HyperConfig, TrainRunReport};
use agseg_core::{NetworkState, Tensor};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use config::RunConfigFile;

const CHECKPOINT: &str = "checkpoint.agseg";

#[derive(Parser)]
#[command(name = "agseg", version, about = "Attention-gated segmentation: data, training, evaluation and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ellipse corpus with a manifest.
    Synth {
        /// Number of image/mask pairs.
        #[arg(long)]
        n: usize,
        /// Side length in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the 6/2/2 subject split; writes a checkpoint and a report.
    Train {
        /// Run config JSON.
        #[arg(long)]
        config: PathBuf,
    },
    /// Subject-wise k-fold cross-validation.
    Cv {
        #[arg(long)]
        config: PathBuf,
        /// Folds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// One-epoch grid search, ranked by validation BCE.
    Tune {
        #[arg(long)]
        config: PathBuf,
        /// Grid JSON (array of hyperparameter objects); defaults to the
        /// built-in five-round grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Grid entries trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write a freshly initialized checkpoint for the config's network.
    Init {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image; writes mask, probability, attention and edge maps.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Probability at or above which a pixel is foreground.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
    },
    /// Materialize boundary targets for masks (a manifest CSV or a directory
    /// of PNG masks).
    Edges {
        #[arg(long)]
        masks: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Max-pool factor applied to each boundary map.
        #[arg(long, default_value_t = 1)]
        downsample: usize,
    },
    /// Render SVG loss curves, metric bars and confusion heatmaps.
    Plot {
        #[arg(long)]
        report: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { n, size, seed, out } => cmd_synth(n, size, seed, &out),
        Command::Train { config } => cmd_train(&config),
        Command::Cv { config, jobs } => cmd_cv(&config, jobs),
        Command::Tune { config, grid, jobs } => cmd_tune(&config, grid.as_deref(), jobs),
        Command::Init { config, out } => cmd_init(&config, &out),
        Command::Predict {
            checkpoint,
            image,
            out,
            threshold,
        } => cmd_predict(&checkpoint, &image, &out, threshold),
        Command::Edges { masks, out, downsample } => cmd_edges(&masks, &out, downsample),
        Command::Plot { report, out } => cmd_plot(&report, &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_synth(n: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let manifest = synth_corpus(out, n, size, seed)?;
    println!(
        "wrote {} pairs ({} subjects) to {}",
        manifest.len(),
        manifest.subjects().len(),
        out.display()
    );
    Ok(())
}

struct Loaded {
    cfg: RunConfigFile,
    manifest: Manifest,
    samples: Vec<agseg_core::Sample>,
}

fn load_run(config: &Path) -> Result<Loaded> {
    let cfg = RunConfigFile::load(config)?;
    let manifest = Manifest::load(&cfg.manifest)?;
    if manifest.is_empty() {
        bail!("manifest {} has no records", cfg.manifest.display());
    }
    let net = cfg.hyper.network(&cfg.network);
    let samples = load_dataset(&manifest, net.input_size, net.input_channels)?;
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join("config.json"), cfg.materialized_json()?)?;
    Ok(Loaded { cfg, manifest, samples })
}

fn write_report(dir: &Path, report: &TrainRunReport) -> Result<()> {
    write(&dir.join("report.json"), report.to_json()?)?;
    write(&dir.join("losses.csv"), report.loss_csv())?;
    for f in &report.folds {
        write(&dir.join(format!("confusion_fold{}.csv", f.fold)), f.confusion.to_csv())?;
    }
    write(&dir.join("confusion_aggregate.csv"), report.aggregate_confusion.to_csv())?;
    let timing = serde_json::json!({ "wall_clock_seconds": report.wall_clock_seconds });
    write(&dir.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")
}

fn print_summary(report: &TrainRunReport) {
    for f in &report.folds {
        println!(
            "fold {}: {} epochs{}, test iou {:.4}, f1 {:.4}, bce {:.4}",
            f.fold,
            f.epochs.len(),
            if f.stopped_early { " (early stop)" } else { "" },
            f.metrics.iou,
            f.metrics.f1,
            f.metrics.bce
        );
    }
    let a = report.aggregate;
    println!(
        "aggregate: iou {:.4}, accuracy {:.4}, precision {:.4}, recall {:.4}, f1 {:.4}, bce {:.4}",
        a.iou, a.accuracy, a.precision, a.recall, a.f1, a.bce
    );
}

fn cmd_train(config: &Path) -> Result<()> {
    let run = load_run(config)?;
    let (report, state) = train_split(&run.manifest, &run.samples, &run.cfg.experiment())?;
    let dir = &run.cfg.output_dir;
    state.save(&dir.join(CHECKPOINT))?;
    write_report(dir, &report)?;
    print_summary(&report);
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_cv(config: &Path, jobs: usize) -> Result<()> {
    let run = load_run(config)?;
    let report = run_cv(&run.manifest, &run.samples, &run.cfg.experiment(), jobs)?;
    write_report(&run.cfg.output_dir, &report)?;
    print_summary(&report);
    println!("outputs in {}", run.cfg.output_dir.display());
    Ok(())
}

fn cmd_tune(config: &Path, grid: Option<&Path>, jobs: usize) -> Result<()> {
    let grid: Vec<HyperConfig> = match grid {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read grid {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid grid {}", p.display()))?
        }
        None => default_grid(),
    };
    if grid.is_empty() {
        bail!("grid is empty");
    }
    let run = load_run(config)?;
    let results = hyper_search(&run.manifest, &run.samples, &grid, &run.cfg.experiment(), jobs);
    let table = tune_csv(&results);
    write(&run.cfg.output_dir.join("tune.csv"), &table)?;
    write(&run.cfg.output_dir.join("tune.json"), serde_json::to_string_pretty(&results)? + "\n")?;
    print!("{table}");
    Ok(())
}

fn cmd_init(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfigFile::load(config)?;
    let state = build_network(cfg.hyper.network(&cfg.network))?;
    create_dir(out)?;
    let path = out.join(CHECKPOINT);
    state.save(&path)?;
    println!("wrote {} ({} parameters)", path.display(), state.params.num_scalars());
    Ok(())
}

fn cmd_predict(checkpoint: &Path, image: &Path, out: &Path, threshold: f32) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        bail!("--threshold must be in (0, 1), got {threshold}");
    }
    let state = NetworkState::load(checkpoint)?;
    let c = &state.config;
    let input = load_input(image, c.input_size, c.input_channels)?;
    let s = c.input_size;
    let pred = state.forward(&input.reshape(vec![1, c.input_channels, s, s])?)?;
    let mask: Vec<f32> = pred
        .seg_prob
        .data()
        .iter()
        .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
        .collect();
    create_dir(out)?;
    write_gray(&out.join("mask.png"), &Tensor::new(pred.seg_prob.shape().to_vec(), mask)?)?;
    write_gray(&out.join("probability.png"), &pred.seg_prob)?;
    write_gray(&out.join("alpha.png"), &pred.alpha)?;
    write_gray(&out.join("edge.png"), &pred.edge_prob)?;
    println!("wrote mask, probability, alpha and edge maps to {}", out.display());
    Ok(())
}

fn mask_files(masks: &Path) -> Result<Vec<PathBuf>> {
    if masks.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(masks)
            .with_context(|| format!("cannot list {}", masks.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        Ok(files)
    } else {
        let m = Manifest::load(masks)?;
        Ok(m.records.iter().map(|r| m.mask_path(r)).collect())
    }
}

fn cmd_edges(masks: &Path, out: &Path, downsample: usize) -> Result<()> {
    if downsample == 0 {
        bail!("--downsample must be at least 1");
    }
    let files = mask_files(masks)?;
    if files.is_empty() {
        bail!("no masks found in {}", masks.display());
    }
    create_dir(out)?;
    for f in &files {
        let m = read_mask(f)?;
        let (h, w) = (m.shape()[1], m.shape()[2]);
        let target = edge_target_from_mask(&m.reshape(vec![1, 1, h, w])?)?
            .downsample(downsample)
            .with_context(|| format!("{}: cannot downsample {h}×{w} by {downsample}", f.display()))?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        write_gray(&out.join(format!("{stem}_edge.png")), &target.boundary)?;
    }
    println!("wrote {} edge maps to {}", files.len(), out.display());
    Ok(())
}

fn cmd_plot(report: &Path, out: &Path) -> Result<()> {
    let report = TrainRunReport::load(report)?;
    create_dir(out)?;
    write(&out.join("loss_curves.svg"), plot::loss_curves(&report))?;
    write(&out.join("metrics.svg"), plot::metric_bars(&report))?;
    for f in &report.folds {
        write(&out.join(format!("confusion_fold{}.svg", f.fold)), plot::fold_heatmap(f))?;
    }
    write(
        &out.join("confusion_aggregate.svg"),
        plot::confusion_heatmap("Confusion matrix, all folds", &report.aggregate_confusion),
    )?;
    println!("wrote {} plots to {}", report.folds.len() + 3, out.display());
    Ok(())
}
