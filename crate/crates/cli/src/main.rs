use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use mirage_core::config::RunConfig;
use mirage_core::degrade::{child_seed, procedural_image};
use mirage_core::io::Checkpoint;
use mirage_core::network::ModelConfig;
use mirage_core::pipeline;
use mirage_core::{config, parallel};

#[derive(Parser, Debug)]
#[command(name = "mirage", version, about = "All-in-one image restoration toolkit")]
struct Cli {
    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(flatten)]
    ablate: Ablations,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Ablations {
    /// Drop the attention branch.
    #[arg(long, global = true)]
    disable_att: bool,
    /// Drop the dynamic convolution branch.
    #[arg(long, global = true)]
    disable_conv: bool,
    /// Drop the channel MLP branch.
    #[arg(long, global = true)]
    disable_mlp: bool,
    /// Replace mutual fusion by plain concatenation.
    #[arg(long, global = true)]
    disable_fusion: bool,
    /// Remove the contrastive head and its loss.
    #[arg(long, global = true)]
    disable_spd: bool,
    /// Remove the frequency loss.
    #[arg(long, global = true)]
    disable_fourier: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write degraded/clean PPM pairs and a manifest.
    Degrade {
        /// Directory of clean `.ppm` images (default: `data.source`).
        #[arg(long, value_name = "DIR")]
        input: Option<PathBuf>,
    },
    /// Train a model; writes a checkpoint, a CSV log and the effective config.
    Train,
    /// Score a checkpoint on a paired directory written by `degrade`.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        pairs: PathBuf,
        /// Output CSV (default: `<out>/eval.csv`).
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Channel-redundancy diagnostics of a checkpoint's features.
    Analyze {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Directory of `.ppm` images of equal size (default: procedural images
        /// from the data section).
        #[arg(long, value_name = "DIR")]
        images: Option<PathBuf>,
    },
    /// Parameter census and flop estimate.
    Info {
        /// Read the model config from a checkpoint instead.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Model preset (tiny, small, micro); overrides the config file's model.
        #[arg(long)]
        preset: Option<String>,
        /// Square image extent for the flop estimate.
        #[arg(long, default_value_t = 224)]
        extent: usize,
        /// Fail unless the total is within 10% of the published size.
        #[arg(long)]
        self_check: bool,
    },
}

fn apply_ablations(cfg: &mut RunConfig, a: &Ablations) {
    let t = &mut cfg.model.toggles;
    t.att &= !a.disable_att;
    t.conv &= !a.disable_conv;
    t.mlp &= !a.disable_mlp;
    t.fusion &= !a.disable_fusion;
    cfg.model.enable_spd &= !a.disable_spd;
    cfg.train.enable_fourier &= !a.disable_fourier;
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    apply_ablations(&mut cfg, &cli.ablate);
    cfg.validate()?;
    Ok(cfg)
}

fn analysis_images(cfg: &RunConfig, dir: Option<&Path>) -> anyhow::Result<Vec<mirage_core::Tensor<f64>>> {
    if let Some(dir) = dir {
        let mut out = Vec::new();
        for p in pipeline::list_images(dir)? {
            out.push(mirage_core::io::read_image(&p)?);
        }
        if out.is_empty() {
            bail!("no .ppm images in {}", dir.display());
        }
        return Ok(out);
    }
    let size = cfg.data.source_size;
    let seed = child_seed(cfg.train.seed, 12);
    Ok((0..cfg.data.count)
        .map(|i| procedural_image(size, size, child_seed(seed, i as u64)))
        .collect())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::Degrade { input } => {
            let manifest = pipeline::cmd_degrade(&cfg, input.as_deref(), &out)?;
            println!("wrote {} pairs to {}", manifest.len(), out.display());
        }
        Command::Train => {
            let ablations = cfg.ablations();
            info!(
                "disabled components: {}",
                if ablations.is_empty() { "none".to_string() } else { ablations.join(",") }
            );
            for line in cfg.to_text().lines() {
                info!("config: {line}");
            }
            let report = pipeline::cmd_train(&cfg, &out)?;
            println!(
                "trained {} steps; L1 {:.5} -> {:.5}; PSNR restored {:.2} dB vs degraded {:.2} dB",
                report.steps,
                report.initial.l1,
                report.last.l1,
                report.last.psnr_restored,
                report.last.psnr_degraded
            );
            println!("checkpoint: {}", report.checkpoint.display());
        }
        Command::Eval { checkpoint, pairs, csv } => {
            let csv = csv.clone().unwrap_or_else(|| out.join("eval.csv"));
            let rows = pipeline::cmd_eval(checkpoint, pairs, &csv)?;
            let mean = rows.last().context("no rows")?;
            println!(
                "mean PSNR {:.3} dB (input {:.3}), SSIM {:.4} (input {:.4}); wrote {}",
                mean.psnr,
                mean.input_psnr,
                mean.ssim,
                mean.input_ssim,
                csv.display()
            );
        }
        Command::Analyze { checkpoint, images } => {
            let images = analysis_images(&cfg, images.as_deref())?;
            let reports = pipeline::cmd_analyze(checkpoint, &images, &out, None)?;
            for r in reports {
                println!(
                    "{:<8} channels {:>4}  entropy rank {:>8.3} ({:.3})  threshold rank {:>4} ({:.3})",
                    r.tag,
                    r.channels,
                    r.entropy,
                    r.entropy_ratio(),
                    r.threshold,
                    r.threshold_ratio()
                );
            }
        }
        Command::Info {
            checkpoint,
            preset,
            extent,
            self_check,
        } => {
            let model = match (checkpoint, preset) {
                (Some(path), _) => config::model_from_text(&Checkpoint::load(path)?.config)?,
                (None, Some(p)) => ModelConfig::preset(p)?,
                (None, None) => cfg.model.clone(),
            };
            let report = pipeline::cmd_info(&model, *extent)?;
            print!("{}", report.render());
            if *self_check {
                match report.param_deviation() {
                    Some(d) if d.abs() <= 0.10 => println!("self-check passed"),
                    Some(d) => bail!("self-check failed: parameter total deviates {:+.1}% from the reference", 100.0 * d),
                    None => bail!("self-check needs the tiny or small preset"),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("MIRAGE_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if !parallel::init_threads(n) {
                    warn!("thread pool already initialised; MIRAGE_THREADS={n} ignored");
                }
            }
            _ => warn!("ignoring MIRAGE_THREADS={v:?}: expected a positive integer"),
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
