//! Training batches and synthetic toy clips.

use std::path::{Path, PathBuf};

use mdvsc_core::train::{step_rng, CropWindow, TrainConfig, RNG_DATA};
use mdvsc_core::types::FRAME_CHANNELS;
use mdvsc_core::Tensor;
use rand::Rng;

use crate::error::{Error, Result};
use crate::frames::{self, Clip};

/// Where one GOP of a batch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GopSource {
    pub clip: usize,
    pub start: usize,
    pub window: CropWindow,
}

/// Draws `batch_size` GOPs: a uniform clip, a uniform start frame and one
/// crop window shared by the GOP's frames. Deterministic in `(seed, step)`.
pub fn sample_sources(clips: &[Clip], cfg: &TrainConfig, step: u64) -> Result<Vec<GopSource>> {
    if clips.is_empty() {
        return Err(Error::Usage("no training clips".into()));
    }
    let mut rng = step_rng(cfg.seed, step, RNG_DATA);
    (0..cfg.batch_size)
        .map(|_| {
            let clip = rng.random_range(0..clips.len());
            let c = &clips[clip];
            if c.frames.len() < cfg.gop_size {
                return Err(Error::Data { path: c.path.clone(), message: format!("fewer than {} frames", cfg.gop_size) });
            }
            let start = rng.random_range(0..=c.frames.len() - cfg.gop_size);
            let window = CropWindow::sample(c.height, c.width, cfg.crop, &mut rng)?;
            Ok(GopSource { clip, start, window })
        })
        .collect()
}

/// `[batch_size * gop_size, 3, crop, crop]` batch for `step`.
pub fn sample_batch(clips: &[Clip], cfg: &TrainConfig, step: u64) -> Result<Tensor<f32>> {
    let sources = sample_sources(clips, cfg, step)?;
    let s = cfg.crop;
    let frame_len = FRAME_CHANNELS * s * s;
    let mut data = vec![0.0f32; sources.len() * cfg.gop_size * frame_len];
    for (b, src) in sources.iter().enumerate() {
        let clip = &clips[src.clip];
        for n in 0..cfg.gop_size {
            let at = (b * cfg.gop_size + n) * frame_len;
            src.window.extract(&clip.frames[src.start + n], clip.height, clip.width, &mut data[at..at + frame_len]);
        }
    }
    Ok(Tensor::from_vec([sources.len() * cfg.gop_size, FRAME_CHANNELS, s, s], data)?)
}

/// Smooth synthetic clip: a tinted gradient background with soft blobs
/// drifting at constant velocity.
pub fn toy_clip(seed: u64, frames: usize, height: usize, width: usize) -> Vec<Vec<f32>> {
    let mut rng = step_rng(seed, 0, 0x746f79);
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let tilt: [(f32, f32); 3] = std::array::from_fn(|_| (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
    let blobs: Vec<([f32; 3], f32, f32, f32, f32, f32)> = (0..rng.random_range(2..5))
        .map(|_| {
            let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
            let (y, x) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let (vy, vx) = (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
            let radius = rng.random_range(0.08..0.25);
            (color, y, x, vy, vx, radius)
        })
        .collect();
    (0..frames)
        .map(|t| {
            let mut f = vec![0.0f32; FRAME_CHANNELS * height * width];
            for yy in 0..height {
                let v = yy as f32 / height as f32;
                for xx in 0..width {
                    let u = xx as f32 / width as f32;
                    let mut px: [f32; 3] = std::array::from_fn(|c| base[c] + tilt[c].0 * (v - 0.5) + tilt[c].1 * (u - 0.5));
                    for (color, y, x, vy, vx, r) in &blobs {
                        let (cy, cx) = (y + vy * t as f32, x + vx * t as f32);
                        let d2 = (v - cy).powi(2) + (u - cx).powi(2);
                        let w = (-d2 / (2.0 * r * r)).exp();
                        for c in 0..3 {
                            px[c] += color[c] * w;
                        }
                    }
                    for c in 0..3 {
                        f[(c * height + yy) * width + xx] = px[c].clamp(0.0, 1.0);
                    }
                }
            }
            f
        })
        .collect()
}

/// Writes `clips` toy clips under `dir` plus `train.txt` listing all but the
/// last one, which goes to `heldout/`. Returns the manifest path.
pub fn write_toy_dataset(dir: &Path, clips: usize, frames: usize, height: usize, width: usize, seed: u64) -> Result<PathBuf> {
    if clips < 2 {
        return Err(Error::Usage("need at least two clips (one is held out)".into()));
    }
    let mut train = Vec::new();
    for i in 0..clips {
        let clip_dir = if i + 1 == clips { dir.join("heldout") } else { dir.join(format!("clip_{i:03}")) };
        let data = toy_clip(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), frames, height, width);
        frames::write_clip(&clip_dir, &data, height, width)?;
        if i + 1 < clips {
            train.push(clip_dir);
        }
    }
    let manifest = dir.join("train.txt");
    frames::write_manifest(&manifest, &train)?;
    Ok(manifest)
}
