use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pan_core::config::{parse_list, KeyValues};
use pan_core::dataset::{
    generate_split, images_to_tensor, load_backgrounds, load_mnist_dir, read_archive, write_archive, Archive,
    GenConfig, Sample, Split,
};
use pan_core::evaluation::evaluate;
use pan_core::imageio::write_ppm;
use pan_core::layers::Query;
use pan_core::manifest::RunManifest;
use pan_core::training::{history_csv, load_checkpoint, save_checkpoint, train_with, TrainConfig};
use pan_core::viz::{render_attention_overlay, sample_image};
use pan_core::{PanError, Result};

const THREADS_ENV: &str = "PAN_LAB_THREADS";

#[derive(Parser, Debug)]
#[command(name = "pan-lab", version, about = "Query-conditioned attention models on synthetic digit scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Parallelism {
    /// Worker threads (falls back to $PAN_LAB_THREADS, then 1).
    #[arg(long)]
    threads: Option<usize>,
    /// Single worker, for byte-identical reruns.
    #[arg(long)]
    deterministic: bool,
}

impl Parallelism {
    fn resolve(&self) -> Result<usize> {
        if self.deterministic {
            return Ok(1);
        }
        let n = match self.threads {
            Some(n) => n,
            None => match std::env::var(THREADS_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| PanError::usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
                Err(_) => 1,
            },
        };
        if n == 0 {
            return Err(PanError::usage("thread count must be at least 1"));
        }
        Ok(n)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test archives from a dataset config and MNIST files.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mnist_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes best.ckpt, last.ckpt and history.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training archive (overrides `train_data`).
        #[arg(long)]
        train: Option<PathBuf>,
        /// Validation archive (overrides `val_data`).
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u32>,
        #[command(flatten)]
        par: Parallelism,
    },
    /// Evaluate a checkpoint; writes report.json, buckets.csv and pr.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        par: Parallelism,
    },
    /// Write attention overlays for selected samples.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated sample indices.
        #[arg(long)]
        samples: String,
        #[arg(long)]
        out: PathBuf,
        /// Multiply each layer's map by the maps of all earlier layers.
        #[arg(long)]
        accumulate: bool,
    },
    /// Gradient checks and forward invariants.
    Selftest {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PanError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| PanError::io(path, e))
}

fn run_gen(config: &Path, mnist_dir: &Path, out: &Path, seed: Option<u64>) -> Result<RunManifest> {
    let mut cfg = GenConfig::from_key_values(KeyValues::read(config)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let glyphs = load_mnist_dir(mnist_dir)?;
    let backgrounds = match &cfg.background_dir {
        Some(dir) if cfg.variant == pan_core::dataset::Variant::Mbg => Some(load_backgrounds(dir)?),
        _ => None,
    };
    create_dir(out)?;
    let mut manifest = RunManifest::new("gen", &cfg.to_key_values());
    manifest.seed = Some(cfg.seed);
    manifest.inputs = vec![config.to_path_buf(), mnist_dir.to_path_buf()];
    for split in Split::ALL {
        let samples = generate_split(&cfg, split, &glyphs, backgrounds.as_ref())?;
        let path = out.join(format!("{split}.mref"));
        write_archive(&path, &Archive { canvas: cfg.canvas, samples })?;
        log::info!("wrote {} {split} samples to {}", cfg.count(split), path.display());
        manifest.outputs.push(path);
    }
    Ok(manifest)
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    config: &Path,
    train: Option<PathBuf>,
    val: Option<PathBuf>,
    out: &Path,
    resume: Option<PathBuf>,
    epochs: Option<u32>,
    threads: usize,
) -> Result<RunManifest> {
    let mut cfg = TrainConfig::from_key_values(KeyValues::read(config)?)?;
    cfg.threads = threads;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.train_data = train.or(cfg.train_data);
    cfg.val_data = val.or(cfg.val_data);
    let train_path = cfg.train_data.clone().ok_or_else(|| PanError::usage("no training archive (--train or train_data)"))?;
    let val_path = cfg.val_data.clone().ok_or_else(|| PanError::usage("no validation archive (--val or val_data)"))?;
    let train_set = read_archive(&train_path)?;
    let val_set = read_archive(&val_path)?;
    let start = resume.as_deref().map(load_checkpoint).transpose()?;
    create_dir(out)?;
    let best_path = cfg.checkpoint.clone().unwrap_or_else(|| out.join("best.ckpt"));
    let last_path = out.join("last.ckpt");
    let history_path = out.join("history.csv");

    let result = train_with(&cfg, &train_set, &val_set, start, |ckpt| {
        save_checkpoint(&last_path, ckpt)?;
        write_text(&history_path, &history_csv(&ckpt.history))
    })?;
    match &result.best {
        Some(best) => save_checkpoint(&best_path, best)?,
        None if !best_path.exists() => save_checkpoint(&best_path, &result.last)?,
        None => {}
    }
    save_checkpoint(&last_path, &result.last)?;
    write_text(&history_path, &history_csv(&result.last.history))?;
    let best = result.best_or_last();
    log::info!("best validation accuracy {:.4} at epoch {}", best.best_val_acc, best.best_epoch);

    let mut manifest = RunManifest::new("train", &cfg.to_key_values());
    manifest.seed = Some(cfg.seed);
    manifest.threads = threads;
    manifest.inputs = vec![config.to_path_buf(), train_path, val_path];
    manifest.inputs.extend(resume);
    manifest.outputs = vec![best_path, last_path, history_path];
    Ok(manifest)
}

fn run_eval(checkpoint: &Path, data: &Path, out: &Path, threads: usize) -> Result<RunManifest> {
    let ckpt = load_checkpoint(checkpoint)?;
    let archive = read_archive(data)?;
    let model_id = checkpoint.display().to_string();
    let dataset_id = data.display().to_string();
    let report = evaluate(&ckpt.model, &archive, &model_id, &dataset_id, threads)?;
    create_dir(out)?;
    let files = [
        (out.join("report.json"), report.to_json()),
        (out.join("buckets.csv"), report.buckets_csv()),
        (out.join("pr.csv"), report.pr_csv()),
    ];
    for (path, text) in &files {
        write_text(path, text)?;
    }
    log::info!(
        "{}: accuracy {:.4}, TPR {:.4} (uniform {:.4}) on {} samples",
        ckpt.model.config.kind,
        report.accuracy,
        report.tpr,
        report.uniform_tpr,
        report.samples
    );
    let mut manifest = RunManifest::new("eval", &ckpt.model.config.to_key_values());
    manifest.seed = Some(ckpt.seed);
    manifest.threads = threads;
    manifest.inputs = vec![checkpoint.to_path_buf(), data.to_path_buf()];
    manifest.outputs = files.into_iter().map(|(p, _)| p).collect();
    Ok(manifest)
}

fn run_viz(checkpoint: &Path, data: &Path, samples: &str, out: &Path, accumulate: bool) -> Result<RunManifest> {
    let ckpt = load_checkpoint(checkpoint)?;
    let archive = read_archive(data)?;
    let indices: Vec<usize> = parse_list(samples).map_err(|e| PanError::usage(e.to_string()))?;
    if indices.is_empty() {
        return Err(PanError::usage("--samples needs at least one index"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= archive.samples.len()) {
        return Err(PanError::usage(format!(
            "sample {bad} outside an archive of {}",
            archive.samples.len()
        )));
    }
    create_dir(out)?;
    let chosen: Vec<&Sample> = indices.iter().map(|&i| &archive.samples[i]).collect();
    let images = images_to_tensor(&chosen)?;
    let queries: Vec<Query> = chosen.iter().map(|s| s.query()).collect();
    let result = ckpt.model.infer(&images, &queries)?;
    let mut manifest = RunManifest::new("viz", &ckpt.model.config.to_key_values());
    manifest.inputs = vec![checkpoint.to_path_buf(), data.to_path_buf()];
    let layers = &ckpt.model.config.attention_layers;
    for (n, (&idx, sample)) in indices.iter().zip(&chosen).enumerate() {
        let input = out.join(format!("sample{idx}_input.ppm"));
        write_ppm(&input, &sample_image(sample))?;
        manifest.outputs.push(input);
        for (h, layer) in layers.iter().enumerate() {
            let img = render_attention_overlay(sample, &result, n, h, accumulate)?;
            let suffix = if accumulate { "_accumulated" } else { "" };
            let path = out.join(format!("sample{idx}_layer{layer}{suffix}.ppm"));
            write_ppm(&path, &img)?;
            manifest.outputs.push(path);
        }
    }
    Ok(manifest)
}

fn run_selftest(trials: usize, seed: u64) -> Result<bool> {
    let started = Instant::now();
    let results = pan_core::selftest::run_all(trials, seed);
    let mut ok = true;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        ok &= r.passed;
    }
    println!(
        "{} of {} checks passed in {:.1}s",
        results.iter().filter(|r| r.passed).count(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(ok)
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    let started = Instant::now();
    let (mut manifest, out) = match cmd {
        Command::Gen {
            config,
            mnist_dir,
            out,
            seed,
        } => (run_gen(&config, &mnist_dir, &out, seed)?, out),
        Command::Train {
            config,
            train,
            val,
            out,
            resume,
            epochs,
            par,
        } => {
            let threads = par.resolve()?;
            (run_train(&config, train, val, &out, resume, epochs, threads)?, out)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            par,
        } => {
            let threads = par.resolve()?;
            (run_eval(&checkpoint, &data, &out, threads)?, out)
        }
        Command::Viz {
            checkpoint,
            data,
            samples,
            out,
            accumulate,
        } => (run_viz(&checkpoint, &data, &samples, &out, accumulate)?, out),
        Command::Selftest { trials, seed } => {
            let ok = run_selftest(trials, seed)?;
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(3) });
        }
    };
    manifest.finish(started.elapsed());
    manifest.write(&out)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    pan_core::runtime::retain_heap();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("pan-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
