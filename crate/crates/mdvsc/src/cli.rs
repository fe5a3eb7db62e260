//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{resolve_output, Overrides, RunConfig};
use crate::error::{Error, Result};
use crate::sweep::{self, ExperimentSpec};
use crate::{checkpoint, data, frames, training, transmit};

#[derive(Debug, Parser)]
#[command(name = "mdvsc", version, about = "Video semantic communication over simulated wireless channels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML run configuration.
    Train(TrainArgs),
    /// Send a clip through a trained model and a simulated channel.
    Transmit(TransmitArgs),
    /// Evaluate a checkpoint over a grid of bandwidth ratios, SNRs and seeds.
    Sweep(SweepArgs),
    /// Validate a baseline result CSV and store it for plot overlays.
    IngestBaseline(IngestArgs),
    /// Summarize a results CSV and redraw its plots.
    Report(ReportArgs),
    /// Write a synthetic toy dataset of PNG clips.
    MakeToyData(ToyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TransmitArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of PNG frames.
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long)]
    pub cbr: f64,
    /// AWGN channel SNR in dB.
    #[arg(long, conflicts_with = "noiseless", required_unless_present = "noiseless")]
    pub snr: Option<f64>,
    /// Bypass channel noise.
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// TOML experiment spec; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub cbr_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub snr_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long = "baseline")]
    pub baselines: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub csv: PathBuf,
    /// Sweep output directory that will overlay the baseline.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long = "baseline")]
    pub baselines: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub clips: usize,
    #[arg(long, default_value_t = 7)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn sweep_spec(args: SweepArgs) -> Result<ExperimentSpec> {
    let mut spec = match &args.spec {
        Some(path) => ExperimentSpec::load(path)?,
        None => {
            let need = |v: Option<PathBuf>, flag: &str| v.ok_or_else(|| Error::Usage(format!("--{flag} is required without --spec")));
            ExperimentSpec {
                checkpoint: need(args.checkpoint.clone(), "checkpoint")?,
                manifest: need(args.manifest.clone(), "manifest")?,
                cbr_grid: mdvsc_core::train::DEFAULT_CBR_GRID.to_vec(),
                snr_grid: sweep::DEFAULT_SNR_GRID.to_vec(),
                seeds: vec![0],
                output_dir: need(args.output.clone(), "output")?,
                baselines: Vec::new(),
            }
        }
    };
    if let Some(v) = args.checkpoint {
        spec.checkpoint = v;
    }
    if let Some(v) = args.manifest {
        spec.manifest = v;
    }
    if let Some(v) = args.cbr_grid {
        spec.cbr_grid = v;
    }
    if let Some(v) = args.snr_grid {
        spec.snr_grid = v;
    }
    if let Some(v) = args.seeds {
        spec.seeds = v;
    }
    if let Some(v) = args.output {
        spec.output_dir = v;
    }
    spec.baselines.extend(args.baselines);
    Ok(spec)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let overrides =
                Overrides { manifest: a.manifest, output: a.output, steps: a.steps, seed: a.seed, lr_init: a.lr, batch_size: a.batch_size };
            let cfg = RunConfig::load(&a.config, &overrides)?;
            let outcome = training::train(&cfg)?;
            println!("checkpoint: {} ({} steps)", outcome.checkpoint.display(), outcome.steps);
            if let Some(e) = outcome.last_eval {
                println!("held-out PSNR {:.3} dB, MS-SSIM {:.5} at CBR {:.4}, SNR {} dB", e.psnr_db, e.ms_ssim, e.cbr, e.snr_db);
            }
        }
        Command::Transmit(a) => {
            let model = checkpoint::load_model(&a.checkpoint, None)?;
            let clip = frames::load_clip(&a.clip)?;
            let snr = if a.noiseless { None } else { a.snr };
            let result = transmit::transmit_clip(&model, &clip, a.cbr, snr, a.seed)?;
            let out = resolve_output(&a.output);
            let written = transmit::write_outputs(&out, &clip, &result)?;
            for g in &result.gops {
                println!("{}", transmit::describe(g));
            }
            println!("wrote {} frames and report.csv to {}", written.len(), out.display());
        }
        Command::Sweep(a) => {
            let spec = sweep_spec(a)?;
            let outcome = sweep::run_sweep(&spec)?;
            println!(
                "{}: {} new rows, {} cells already present, {} failed cells",
                outcome.results.display(),
                outcome.added,
                outcome.skipped_cells,
                outcome.failures.len()
            );
            for p in &outcome.plots {
                println!("plot: {}", p.display());
            }
        }
        Command::IngestBaseline(a) => {
            let (points, stored) = sweep::ingest_baseline(&a.csv, &a.output)?;
            println!("{} baseline points stored in {}", points.len(), stored.display());
        }
        Command::Report(a) => {
            let (summary, plots) = sweep::report(&a.results, &a.output, &a.baselines)?;
            println!("{:>8} {:>6} {:>9} {:>8} {:>9} {:>7}", "cbr", "snr", "psnr_db", "ms_ssim", "ms_ssim_db", "samples");
            for s in &summary {
                println!("{:>8.5} {:>6} {:>9.3} {:>8.5} {:>9.3} {:>7}", s.cbr, s.snr_db, s.psnr_db, s.ms_ssim, s.ms_ssim_db, s.samples);
            }
            for p in &plots {
                println!("plot: {}", p.display());
            }
        }
        Command::MakeToyData(a) => {
            if a.size == 0 || a.size % mdvsc_core::types::SPATIAL_FACTOR != 0 {
                return Err(Error::Usage(format!("--size must be a positive multiple of 16, got {}", a.size)));
            }
            let out = resolve_output(&a.output);
            let manifest = data::write_toy_dataset(&out, a.clips, a.frames, a.size, a.size, a.seed)?;
            println!("manifest: {}", manifest.display());
            println!("held-out clip: {}", out.join("heldout").display());
        }
    }
    Ok(())
}
