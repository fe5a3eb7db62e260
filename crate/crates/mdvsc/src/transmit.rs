//! Sending whole clips through the system.

use std::path::{Path, PathBuf};

use mdvsc_core::channel::ChannelConfig;
use mdvsc_core::metrics;
use mdvsc_core::model::{ChannelReport, Mdvsc};
use mdvsc_core::types::{BandwidthBudget, SPATIAL_FACTOR};

use crate::error::{Error, Result};
use crate::frames::{self, Clip};
use crate::results::{self, ResultRow};

/// Channel seed of GOP `index` in a run seeded with `seed`.
pub fn gop_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Turns budget errors into messages naming the feasible range.
fn budget_error(model: &Mdvsc<f32>, budget: &BandwidthBudget, err: mdvsc_core::Error) -> Error {
    match err {
        mdvsc_core::Error::InfeasibleBudget { requested, minimum } => Error::Usage(format!(
            "CBR {} gives {requested} symbols but side information alone needs {minimum}; minimum feasible CBR is {:.6}",
            budget.target_cbr,
            model.min_feasible_cbr(budget.dims)
        )),
        mdvsc_core::Error::BudgetTooLarge { requested, available } => Error::Usage(format!(
            "CBR {} gives {requested} symbols but the GOP only has {available}; maximum CBR is {:.6}",
            budget.target_cbr,
            model.full_rate_cbr(budget.dims)
        )),
        other => other.into(),
    }
}

/// One GOP of a transmitted clip.
#[derive(Clone, Debug, PartialEq)]
pub struct GopResult {
    pub index: usize,
    /// Frames of the clip in this GOP; a short tail GOP is padded.
    pub real_frames: usize,
    pub report: ChannelReport,
    pub row: ResultRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipResult {
    pub frames: Vec<Vec<f32>>,
    pub gops: Vec<GopResult>,
}

/// Sends every GOP of `clip`; `snr_db = None` is a noiseless channel.
pub fn transmit_clip(model: &Mdvsc<f32>, clip: &Clip, cbr: f64, snr_db: Option<f64>, seed: u64) -> Result<ClipResult> {
    if clip.height % SPATIAL_FACTOR != 0 || clip.width % SPATIAL_FACTOR != 0 {
        return Err(Error::Usage(format!(
            "clip {} is {}x{}; frame sides must be multiples of {SPATIAL_FACTOR}",
            clip.id, clip.height, clip.width
        )));
    }
    let n = model.config().gop_size;
    let mut out = ClipResult { frames: Vec::with_capacity(clip.frames.len()), gops: Vec::new() };
    for (index, (gop, real)) in clip.gops(n)?.into_iter().enumerate() {
        let budget = BandwidthBudget::from_cbr(cbr, gop.dims())?;
        model.kept_elements(&budget).map_err(|e| budget_error(model, &budget, e))?;
        let channel = match snr_db {
            Some(snr) => ChannelConfig::awgn(snr, gop_seed(seed, index)),
            None => ChannelConfig::identity(),
        };
        let (hat, report) = model.forward_pipeline(&gop, &budget, &channel)?;
        let per_frame = &report.quality.per_frame[..real];
        let mean = |f: fn(&metrics::FrameQuality) -> f64| per_frame.iter().map(f).sum::<f64>() / real as f64;
        let ms_ssim = mean(|q| q.ms_ssim);
        let row = ResultRow {
            clip_id: clip.id.clone(),
            gop_index: index,
            cbr: report.achieved_cbr,
            snr_db: report.snr_db,
            psnr_db: mean(|q| q.psnr_db),
            ms_ssim,
            ms_ssim_db: metrics::ms_ssim_db(ms_ssim),
            seed,
        };
        out.frames.extend((0..real).map(|i| hat.frame(i).to_vec()));
        out.gops.push(GopResult { index, real_frames: real, report, row });
    }
    Ok(out)
}

/// Writes reconstructed frames and `report.csv` into `output_dir`.
pub fn write_outputs(output_dir: &Path, clip: &Clip, result: &ClipResult) -> Result<Vec<PathBuf>> {
    let paths = frames::write_clip(output_dir, &result.frames, clip.height, clip.width)?;
    let rows: Vec<ResultRow> = result.gops.iter().map(|g| g.row.clone()).collect();
    results::write_rows(&output_dir.join("report.csv"), &rows)?;
    Ok(paths)
}

/// Human-readable bandwidth accounting for one GOP.
pub fn describe(g: &GopResult) -> String {
    let r = &g.report;
    let k: Vec<String> = r.symbols_per_vector.iter().map(usize::to_string).collect();
    format!(
        "gop {}: target CBR {:.6}, achieved {:.6} ({} symbols); k_n = [{}] with {} side-information symbols in the last vector; \
         {} channel at {} dB; PSNR {:.3} dB, MS-SSIM {:.5} ({:.3} dB)",
        g.index,
        r.target_cbr,
        r.achieved_cbr,
        r.total_symbols,
        k.join(", "),
        r.side_info_symbols,
        match r.channel {
            mdvsc_core::channel::ChannelKind::Awgn => "AWGN",
            mdvsc_core::channel::ChannelKind::Identity => "noiseless",
        },
        r.snr_db,
        g.row.psnr_db,
        g.row.ms_ssim,
        g.row.ms_ssim_db,
    )
}
