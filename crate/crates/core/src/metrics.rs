//! Distortion metrics on `[0, 1]` intensities.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::types::VideoGop;
use crate::{Error, Result};

/// Standard five-scale MS-SSIM exponents, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// A borrowed `[channels, height, width]` frame.
#[derive(Clone, Copy, Debug)]
pub struct Frame<'a> {
    pub data: &'a [f32],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<'a> Frame<'a> {
    pub fn new(data: &'a [f32], channels: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!("{} values do not form a {channels}x{height}x{width} frame", data.len())));
        }
        Ok(Self { data, channels, height, width })
    }

    fn plane(&self, c: usize) -> Vec<f64> {
        let n = self.height * self.width;
        self.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect()
    }
}

/// Mean squared error over every sample.
pub fn mse(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("cannot compare {} samples with {}", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::Shape("cannot compare empty frames".into()));
    }
    let sum: f64 = x.iter().zip(y).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(sum / x.len() as f64)
}

/// `10 log10(1 / MSE)`; identical inputs give `+inf`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * libm::log10(mse)
    }
}

pub fn psnr(x: &[f32], y: &[f32]) -> Result<f64> {
    mse(x, y).map(psnr_from_mse)
}

/// `-10 log10(1 - d)`; `d == 1` gives `+inf`.
pub fn ms_ssim_db(d: f64) -> f64 {
    if d >= 1.0 {
        f64::INFINITY
    } else {
        -10.0 * libm::log10(1.0 - d)
    }
}

/// Number of scales used for a frame: the largest `M <= 5` whose coarsest
/// scale still spans the 11-pixel window.
pub fn ms_ssim_scales(height: usize, width: usize) -> Result<usize> {
    let mut side = height.min(width);
    if side < SSIM_WINDOW {
        return Err(Error::FrameTooSmall { height, width });
    }
    let mut scales = 1;
    while scales < MS_SSIM_WEIGHTS.len() && side / 2 >= SSIM_WINDOW {
        side /= 2;
        scales += 1;
    }
    Ok(scales)
}

/// Exponents for `scales` levels: the standard weights at five scales,
/// otherwise the leading weights renormalized to sum to one.
pub fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    if scales == MS_SSIM_WEIGHTS.len() {
        return MS_SSIM_WEIGHTS.to_vec();
    }
    let w = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let centre = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - centre;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable "valid" Gaussian filtering.
fn blur(plane: &[f64], height: usize, width: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (height + 1 - SSIM_WINDOW, width + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        let src = &plane[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, a)| a * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

fn downsample(plane: &[f64], height: usize, width: usize) -> (Vec<f64>, usize, usize) {
    let (h2, w2) = (height / 2, width / 2);
    let mut out = vec![0.0; h2 * w2];
    for y in 0..h2 {
        for x in 0..w2 {
            let at = |dy: usize, dx: usize| plane[(2 * y + dy) * width + 2 * x + dx];
            out[y * w2 + x] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
        }
    }
    (out, h2, w2)
}

/// Mean luminance and contrast-structure terms of one scale.
fn ssim_terms(x: &[f64], y: &[f64], height: usize, width: usize, k: &[f64; SSIM_WINDOW]) -> (f64, f64) {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mx, _, _) = blur(x, height, width, k);
    let (my, _, _) = blur(y, height, width, k);
    let (sxx, _, _) = blur(&sq(x, x), height, width, k);
    let (syy, _, _) = blur(&sq(y, y), height, width, k);
    let (sxy, _, _) = blur(&sq(x, y), height, width, k);
    let (mut l, mut cs) = (0.0, 0.0);
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        l += (2.0 * ux * uy + C1) / (ux * ux + uy * uy + C1);
        cs += (2.0 * cxy + C2) / (vx + vy + C2);
    }
    (l / mx.len() as f64, cs / mx.len() as f64)
}

/// Multi-scale SSIM, averaged over colour channels.
///
/// Per channel: `l_M^a_M * prod_j cs_j^a_j` with 11x11 Gaussian windows
/// (sigma 1.5), 2x2 average down-sampling between scales, and negative
/// contrast-structure means clipped to zero.
pub fn ms_ssim(x: Frame<'_>, y: Frame<'_>) -> Result<f64> {
    if (x.channels, x.height, x.width) != (y.channels, y.height, y.width) || x.data.len() != y.data.len() {
        return Err(Error::Shape("MS-SSIM operands differ in shape".into()));
    }
    let scales = ms_ssim_scales(x.height, x.width)?;
    let weights = ms_ssim_weights(scales);
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..x.channels {
        let (mut px, mut py) = (x.plane(c), y.plane(c));
        let (mut h, mut w) = (x.height, x.width);
        let mut value = 1.0;
        for (j, &a) in weights.iter().enumerate() {
            let (l, cs) = ssim_terms(&px, &py, h, w, &k);
            value *= libm::pow(cs.max(0.0), a);
            if j + 1 == scales {
                value *= libm::pow(l.max(0.0), a);
            } else {
                let (nx, nh, nw) = downsample(&px, h, w);
                let (ny, _, _) = downsample(&py, h, w);
                (px, py, h, w) = (nx, ny, nh, nw);
            }
        }
        total += value;
    }
    Ok(total / x.channels as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameQuality {
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub ms_ssim_db: f64,
}

/// Quality of a reconstructed GOP. GOP-level figures are means of the
/// per-frame figures.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub ms_ssim_db: f64,
    pub cbr: f64,
    pub snr_db: f64,
    /// MS-SSIM scales used for this frame size.
    pub scales: usize,
    pub per_frame: Vec<FrameQuality>,
}

impl QualityReport {
    pub fn evaluate(original: &VideoGop, reconstructed: &VideoGop, cbr: f64, snr_db: f64) -> Result<Self> {
        let dims = original.dims();
        if reconstructed.dims() != dims {
            return Err(Error::Shape(format!("{:?} vs {:?}", dims, reconstructed.dims())));
        }
        let mut per_frame = Vec::with_capacity(dims.frames);
        for i in 0..dims.frames {
            let (a, b) = (original.frame(i), reconstructed.frame(i));
            let d = ms_ssim(Frame::new(a, 3, dims.height, dims.width)?, Frame::new(b, 3, dims.height, dims.width)?)?;
            per_frame.push(FrameQuality { psnr_db: psnr(a, b)?, ms_ssim: d, ms_ssim_db: ms_ssim_db(d) });
        }
        let mean = |f: fn(&FrameQuality) -> f64| per_frame.iter().map(f).sum::<f64>() / per_frame.len() as f64;
        Ok(Self {
            psnr_db: mean(|q| q.psnr_db),
            ms_ssim: mean(|q| q.ms_ssim),
            ms_ssim_db: mean(|q| q.ms_ssim_db),
            cbr,
            snr_db,
            scales: ms_ssim_scales(dims.height, dims.width)?,
            per_frame,
        })
    }
}
