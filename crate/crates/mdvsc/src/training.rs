//! Training runs with logs, periodic checkpoints and resumption.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use mdvsc_core::channel::ChannelConfig;
use mdvsc_core::model::Mdvsc;
use mdvsc_core::train::{CropWindow, StepLog, Trainer};
use mdvsc_core::types::{BandwidthBudget, FRAME_CHANNELS};
use mdvsc_core::{Tensor, VideoGop};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainSection};
use crate::data;
use crate::error::{Error, Result};
use crate::frames::{self, Clip};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const DIVERGED_FILE: &str = "diverged.safetensors";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_LOG: &str = "eval_log.csv";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    pub rate_bits: f64,
}

impl From<StepLog> for TrainLogRow {
    fn from(l: StepLog) -> Self {
        Self { step: l.step, lr: l.lr, loss: l.loss, mse: l.mse, rate_bits: l.rate_bits }
    }
}

/// Held-out quality after `step` optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLogRow {
    pub step: u64,
    pub cbr: f64,
    pub snr_db: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub resumed_at: Option<u64>,
    pub last_eval: Option<EvalLogRow>,
}

/// Section echoed into checkpoints so a resumed run can verify it
/// continues the same configuration.
pub fn train_section(cfg: &RunConfig) -> TrainSection {
    let t = &cfg.train;
    TrainSection {
        lambda_rd: t.lambda_rd,
        beta_rate: t.beta_rate,
        lr_init: t.lr_init,
        batch_size: t.batch_size,
        steps: t.steps,
        crop: t.crop,
        cbr_grid: t.cbr_grid.clone(),
        seed: t.seed,
        checkpoint_every: cfg.checkpoint_every,
        eval_every: cfg.eval_every,
        eval_cbr: cfg.eval_cbr,
    }
}

/// First GOP of `clip`, centre-cropped to `crop`.
pub fn heldout_gop(clip: &Clip, gop_size: usize, crop: usize) -> Result<VideoGop> {
    if clip.frames.len() < gop_size || clip.height < crop || clip.width < crop {
        return Err(Error::Data {
            path: clip.path.clone(),
            message: format!("held-out clip needs {gop_size} frames of at least {crop}x{crop}"),
        });
    }
    let window = CropWindow { top: (clip.height - crop) / 2, left: (clip.width - crop) / 2, size: crop };
    let frame_len = FRAME_CHANNELS * crop * crop;
    let mut data = vec![0.0; gop_size * frame_len];
    for (n, chunk) in data.chunks_mut(frame_len).enumerate() {
        window.extract(&clip.frames[n], clip.height, clip.width, chunk);
    }
    Ok(VideoGop::from_tensor(Tensor::from_vec([gop_size, FRAME_CHANNELS, crop, crop], data)?)?)
}

pub fn evaluate(model: &Mdvsc<f32>, gop: &VideoGop, cbr: f64, snr_db: f64, seed: u64, step: u64) -> Result<EvalLogRow> {
    let budget = BandwidthBudget::from_cbr(cbr, gop.dims())?;
    let (_, report) = model.forward_pipeline(gop, &budget, &ChannelConfig::awgn(snr_db, seed))?;
    Ok(EvalLogRow { step, cbr: report.achieved_cbr, snr_db, psnr_db: report.quality.psnr_db, ms_ssim: report.quality.ms_ssim })
}

/// Keeps the header and rows whose leading step is at most `max_step`.
fn truncate_log(path: &Path, max_step: Option<u64>) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(()) };
    let mut lines = text.lines();
    let mut kept = String::new();
    if let (Some(header), Some(max)) = (lines.next(), max_step) {
        kept.push_str(header);
        kept.push('\n');
        for line in lines {
            let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if step.is_some_and(|s| s <= max) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept).map_err(Error::io(path))
}

struct Log {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl Log {
    fn open(path: PathBuf) -> Result<Self> {
        let fresh = fs::metadata(&path).map_or(true, |m| m.len() == 0);
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(Error::io(&path))?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { path, writer })
    }

    fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        let path = &self.path;
        self.writer.serialize(row).map_err(|e| Error::Csv { path: path.clone(), message: e.to_string() })?;
        self.writer.flush().map_err(Error::io(path))
    }
}

/// Trains per `cfg`, resuming from the checkpoint in the output directory
/// when one exists. Re-running a finished run changes nothing.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut clips = frames::load_manifest(&cfg.manifest, cfg.train.gop_size)?;
    let heldout = match &cfg.heldout {
        Some(dir) => Some(frames::load_clip(dir)?),
        None if clips.len() > 1 => clips.pop(),
        None => {
            log::warn!("single training clip and no held-out clip; skipping evaluation");
            None
        }
    };
    let heldout = heldout.map(|c| heldout_gop(&c, cfg.train.gop_size, cfg.train.crop)).transpose()?;

    let section = train_section(cfg);
    let mut trainer = Trainer::new(cfg.model, cfg.train.clone())?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut resumed_at = None;
    if ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if ckpt.model != *trainer.model.config() || ckpt.train.as_ref() != Some(&section) {
            return Err(Error::Usage(format!(
                "{} belongs to a different configuration; use a fresh output directory",
                ckpt_path.display()
            )));
        }
        trainer.model.load_params(&ckpt.params)?;
        trainer.optimizer = ckpt.adam.ok_or_else(|| Error::Checkpoint { path: ckpt_path.clone(), message: "no optimizer state".into() })?;
        trainer.step = ckpt.step;
        resumed_at = Some(ckpt.step);
        log::info!("resuming at step {}", ckpt.step);
    }

    let train_log = out.join(TRAIN_LOG);
    let eval_log = out.join(EVAL_LOG);
    truncate_log(&train_log, resumed_at.map(|s| s.saturating_sub(1)).filter(|_| resumed_at != Some(0)))?;
    truncate_log(&eval_log, resumed_at)?;
    let mut train_writer = Log::open(train_log)?;
    let mut eval_writer = Log::open(eval_log)?;

    let eval_seed = cfg.train.seed;
    let snr = cfg.train.snr_train_db;
    let mut last_eval = None;
    if resumed_at.is_none() {
        if let Some(gop) = &heldout {
            let row = evaluate(&trainer.model, gop, cfg.eval_cbr, snr, eval_seed, 0)?;
            eval_writer.write(&row)?;
            last_eval = Some(row);
        }
    }

    while !trainer.is_done() {
        let batch = data::sample_batch(&clips, &cfg.train, trainer.step)?;
        let log = match trainer.step(&batch) {
            Ok(log) => log,
            Err(mdvsc_core::Error::NonFinite(msg)) => {
                let path = out.join(DIVERGED_FILE);
                Checkpoint::from_trainer(&trainer, section.clone()).save(&path)?;
                log::error!("{msg}");
                return Err(Error::Diverged { step: trainer.step, path });
            }
            Err(e) => return Err(e.into()),
        };
        train_writer.write(&TrainLogRow::from(log))?;
        let done = trainer.is_done();
        if trainer.step % cfg.eval_every == 0 || done {
            if let Some(gop) = &heldout {
                let row = evaluate(&trainer.model, gop, cfg.eval_cbr, snr, eval_seed, trainer.step)?;
                log::info!("step {}: loss {:.5}, held-out PSNR {:.2} dB", trainer.step, log.loss, row.psnr_db);
                eval_writer.write(&row)?;
                last_eval = Some(row);
            }
        }
        if trainer.step % cfg.checkpoint_every == 0 || done {
            Checkpoint::from_trainer(&trainer, section.clone()).save(&ckpt_path)?;
        }
    }
    if !ckpt_path.exists() {
        Checkpoint::from_trainer(&trainer, section).save(&ckpt_path)?;
    }
    Ok(TrainOutcome { checkpoint: ckpt_path, steps: trainer.step, resumed_at, last_eval })
}
