//! `fann`: batch driver for the foreground-attentive re-identification
//! pipeline.
//!
//! Exit codes: 0 on success, 2 for usage, validation and missing-file
//! errors, 3 for numerical failures.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use log::info;

use fann_core::checkpoint::load_checkpoint;
use fann_core::config::{Preset, RunConfig};
use fann_core::dataio::{
    generate_synthetic_dataset, read_image_ppm, resize_bilinear, write_fant, Clutter, DatasetManifest, SynthConfig,
};
use fann_core::evaluator::{evaluate_protocol, write_protocol_csv};
use fann_core::gradcheck::gradcheck;
use fann_core::losses::{simulate_triplet_dynamics, write_dynamics_csv, DynamicsConfig, TripletLossKind};
use fann_core::net::Network;
use fann_core::trainer::{train, FINAL_CHECKPOINT, METRICS_FILE};
use fann_core::FannError;

/// Largest relative error `gradcheck` accepts for any check.
const GRADCHECK_LIMIT: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "fann", version, about = "Foreground-attentive feature learning for person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact foreground masks.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        identities: usize,
        #[arg(long, default_value_t = 2)]
        cameras: usize,
        #[arg(long, default_value_t = 4)]
        per_camera: usize,
        #[arg(long, default_value_t = 37)]
        height: usize,
        #[arg(long, default_value_t = 13)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Background distractors: none, light or heavy.
        #[arg(long, default_value = "light")]
        clutter: String,
    },
    /// Train a network and write metrics plus checkpoints.
    Train {
        /// key = value configuration; the desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ranking protocol and write CMC/mAP tables.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the configured trial count.
        #[arg(long)]
        trials: Option<usize>,
        /// Output directory; defaults to `<checkpoint>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the unit embedding of one PPM image as a FANT vector.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Defaults to the image path with a `.fant` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate three points under a triplet loss and write the trajectory.
    Dynamics {
        #[arg(long, default_value = "symmetric")]
        loss: String,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::read(p)?),
        None => Ok(RunConfig::preset(Preset::Desk)),
    }
}

fn load_data(path: &Path) -> anyhow::Result<Vec<fann_core::dataio::Sample>> {
    let manifest = DatasetManifest::read(path)?;
    let samples = manifest.load_samples()?;
    info!("loaded {} samples from {}", samples.len(), path.display());
    Ok(samples)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthGen {
            out,
            identities,
            cameras,
            per_camera,
            height,
            width,
            seed,
            clutter,
        } => {
            let mut cfg = SynthConfig::new(identities, per_camera, cameras, height, width);
            cfg.seed = seed;
            cfg.clutter = clutter.parse::<Clutter>()?;
            let ds = generate_synthetic_dataset(&cfg, &out)?;
            println!("wrote {} images to {}", ds.manifest.len(), out.display());
        }
        Command::Train { config, data, iters, out } => {
            let mut run = load_config(config.as_deref())?;
            if let Some(h) = iters {
                run.train.iterations = h;
            }
            let samples = load_data(&data)?;
            let mut net = Network::build(&run.network)?;
            let outcome = train(&mut net, &samples, &run, Some(&out))?;
            let last = outcome.metrics.last().ok_or_else(|| anyhow!("no metrics recorded"))?;
            println!(
                "trained {} iterations: E={:.6} L1={:.6} L2={:.6}",
                outcome.state.iteration, last.terms.e, last.terms.l1, last.terms.l2
            );
            println!("metrics: {}", out.join(METRICS_FILE).display());
            println!("checkpoint: {}", out.join(FINAL_CHECKPOINT).display());
        }
        Command::Eval {
            checkpoint,
            data,
            trials,
            out,
        } => {
            let (mut run, net) = load_checkpoint(&checkpoint)?;
            if let Some(t) = trials {
                run.protocol.trials = t;
            }
            let samples = load_data(&data)?;
            let result = evaluate_protocol(&net, &samples, &run.protocol)?;
            let out = out.unwrap_or_else(|| checkpoint.join("eval"));
            write_protocol_csv(&out, &result)?;
            println!(
                "top-1 {:.4}  mAP {:.4}  over {} trials -> {}",
                result.top1(),
                result.mean_map,
                result.trials.len(),
                out.display()
            );
        }
        Command::Embed { checkpoint, image, out } => {
            let (_, net) = load_checkpoint(&checkpoint)?;
            let mut img = read_image_ppm(&image)?;
            let [_, h, w] = net.config().input_shape;
            if img.dims()[1..] != [h, w] {
                img = resize_bilinear(&img, h, w)?;
            }
            let embedding = net.embed(&img)?;
            let out = out.unwrap_or_else(|| image.with_extension("fant"));
            write_fant(&out, &embedding)?;
            println!("{}-d embedding -> {}", embedding.len(), out.display());
        }
        Command::Gradcheck { config, seed } => {
            let run = load_config(config.as_deref())?;
            let report = gradcheck(&run.network, seed)?;
            let mut worst: f64 = 0.0;
            for c in report.all() {
                println!(
                    "{:<24} max_rel_error={:.3e} checked={} skipped={}",
                    c.name, c.max_rel_error, c.checked, c.skipped
                );
                worst = worst.max(c.max_rel_error);
            }
            if worst >= GRADCHECK_LIMIT || report.network.checked == 0 {
                return Err(NumericalFailure(format!(
                    "worst relative gradient error {worst:.3e} exceeds {GRADCHECK_LIMIT:e}"
                ))
                .into());
            }
            println!("all gradients within {GRADCHECK_LIMIT:e}");
        }
        Command::Dynamics { loss, steps, out } => {
            let kind: TripletLossKind = loss.parse()?;
            let cfg = DynamicsConfig {
                steps,
                ..DynamicsConfig::new(kind)
            };
            let rows = simulate_triplet_dynamics(&cfg)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_dynamics_csv(&rows, BufWriter::new(file)).with_context(|| format!("writing {}", out.display()))?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
    }
    Ok(())
}

/// A run that completed but produced numerically unacceptable results.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<NumericalFailure>() {
        return 3;
    }
    match err.downcast_ref::<FannError>() {
        Some(FannError::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("FANN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("FANN_THREADS must be a positive integer, got `{value}`"))?;
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        bail!("thread pool was already initialized");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
