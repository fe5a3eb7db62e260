//! Optimization: objective, learning-rate schedule, Adam and the step driver.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics;
use crate::model::{LossWeights, Mdvsc, ModelConfig, ParamMap, PassMode, TrainBatch};
use crate::types::{BandwidthBudget, GopDims, FRAME_CHANNELS};
use crate::{Error, Result, Tensor};

/// Bandwidth ratios sampled during training.
pub const DEFAULT_CBR_GRID: [f64; 5] = [0.005, 0.010, 0.015, 0.020, 0.025];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_rd: f64,
    /// Weight of the differentiable rate term that trains the entropy model.
    pub beta_rate: f64,
    pub lr_init: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub crop: usize,
    pub gop_size: usize,
    pub snr_train_db: f64,
    pub cbr_grid: Vec<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lambda_rd: 8192.0,
            beta_rate: 0.01,
            lr_init: 1e-4,
            batch_size: 8,
            steps: 2000,
            crop: 64,
            gop_size: 3,
            snr_train_db: 10.0,
            cbr_grid: DEFAULT_CBR_GRID.to_vec(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("lambda_rd", self.lambda_rd), ("lr_init", self.lr_init)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta_rate.is_finite() && self.beta_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!("beta_rate must be non-negative, got {}", self.beta_rate)));
        }
        for (name, v) in [("batch_size", self.batch_size), ("crop", self.crop), ("gop_size", self.gop_size)] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        if self.crop % crate::types::SPATIAL_FACTOR != 0 {
            return Err(Error::InvalidArgument(format!("crop {} is not a multiple of 16", self.crop)));
        }
        if !self.snr_train_db.is_finite() {
            return Err(Error::InvalidArgument("snr_train_db must be finite".into()));
        }
        if self.cbr_grid.is_empty() || self.cbr_grid.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidArgument("cbr_grid must hold positive ratios".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda_rd, beta: self.beta_rate }
    }

    pub fn gop_dims(&self) -> GopDims {
        GopDims::new(self.gop_size, self.crop, self.crop)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Rate-distortion objective for one GOP.
pub fn loss(gop: &Tensor<f32>, gop_hat: &Tensor<f32>, realized_cbr: f64, rate_bits: f64, weights: LossWeights) -> Result<f64> {
    if gop.shape() != gop_hat.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", gop.shape(), gop_hat.shape())));
    }
    let mse = metrics::mse(gop.data(), gop_hat.data())?;
    Ok(weights.combine(mse, realized_cbr, rate_bits, gop.len()))
}

/// Cosine-annealed learning rate.
pub fn lr_schedule(step: u64, total_steps: u64, lr_init: f64) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_init * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
}

/// Adam with default moment decay rates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: ParamMap<f32>,
    pub v: ParamMap<f32>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, m: ParamMap::new(), v: ParamMap::new() }
    }
}

impl Adam {
    pub fn update(&mut self, model: &mut Mdvsc<f32>, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let step = (lr / c1) as f32;
        let c2_sqrt = libm::sqrt(c2) as f32;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.for_each_param_mut(&mut |name, p| {
            let m = ms.entry(name.clone()).or_insert_with(|| alloc::vec![0.0; p.len()]);
            let v = vs.entry(name).or_insert_with(|| alloc::vec![0.0; p.len()]);
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= step * m[i] / (v[i].sqrt() / c2_sqrt + eps);
            }
        });
    }
}

/// Top-left corner of a crop window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl CropWindow {
    /// Uniform window of `size` inside a `height` x `width` frame.
    pub fn sample<R: Rng + ?Sized>(height: usize, width: usize, size: usize, rng: &mut R) -> Result<Self> {
        if size == 0 || size > height || size > width {
            return Err(Error::InvalidArgument(format!("crop {size} does not fit a {height}x{width} frame")));
        }
        Ok(Self { top: rng.random_range(0..=height - size), left: rng.random_range(0..=width - size), size })
    }

    /// Copies the window out of an interleaved-free `[3, H, W]` frame into
    /// `out` (`3 * size * size` values).
    pub fn extract(&self, frame: &[f32], height: usize, width: usize, out: &mut [f32]) {
        let s = self.size;
        debug_assert!(self.top + s <= height && self.left + s <= width);
        for c in 0..FRAME_CHANNELS {
            for y in 0..s {
                let src = (c * height + self.top + y) * width + self.left;
                let dst = (c * s + y) * s;
                out[dst..dst + s].copy_from_slice(&frame[src..src + s]);
            }
        }
    }
}

/// Independent generator for one purpose at one step.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&purpose.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub const RNG_DATA: u64 = 1;
pub const RNG_BUDGET: u64 = 2;
pub const RNG_NOISE: u64 = 3;

/// Summary of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    pub rate_bits: f64,
}

/// Model, optimizer and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Mdvsc<f32>,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Steps completed so far.
    pub step: u64,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model_config.gop_size != config.gop_size {
            return Err(Error::InvalidArgument(format!(
                "model gop_size {} differs from training gop_size {}",
                model_config.gop_size, config.gop_size
            )));
        }
        let model = Mdvsc::new(ModelConfig { snr_train_db: config.snr_train_db, ..model_config }, config.seed)?;
        Ok(Self { model, optimizer: Adam::default(), config, step: 0 })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// Feature elements each GOP of the next batch may send, and the mean
    /// realized bandwidth ratio.
    pub fn sample_budgets(&self, gops: usize) -> Result<(Vec<usize>, f64)> {
        let dims = self.config.gop_dims();
        let mut rng = step_rng(self.config.seed, self.step, RNG_BUDGET);
        let mut kept = Vec::with_capacity(gops);
        let mut cbr = 0.0;
        for _ in 0..gops {
            let target = self.config.cbr_grid[rng.random_range(0..self.config.cbr_grid.len())];
            let budget = BandwidthBudget::from_cbr(target, dims)?;
            kept.push(self.model.kept_elements(&budget)?);
            cbr += budget.achieved_cbr();
        }
        Ok((kept, cbr / gops as f64))
    }

    /// One optimizer step on `frames`, `[B * N, 3, crop, crop]`.
    pub fn step(&mut self, frames: &Tensor<f32>) -> Result<StepLog> {
        let n = self.config.gop_size;
        let c = self.config.crop;
        if frames.shape()[1..] != [FRAME_CHANNELS, c, c] || frames.batch() % n != 0 || frames.is_empty() {
            return Err(Error::Shape(format!("batch {:?} is not GOPs of {n} frames at {c}x{c}", frames.shape())));
        }
        let (kept, realized_cbr) = self.sample_budgets(frames.batch() / n)?;
        let lr = lr_schedule(self.step, self.config.steps, self.config.lr_init);
        let mut rng = step_rng(self.config.seed, self.step, RNG_NOISE);
        let batch = TrainBatch { frames, gop_size: n, kept: &kept, realized_cbr };
        let mode = PassMode { relaxed: true, snr_db: Some(self.config.snr_train_db) };
        self.model.zero_grad();
        let out = self.model.forward_train(batch, mode, self.config.weights(), &mut rng)?;
        let log = StepLog { step: self.step, lr, loss: out.loss, mse: out.mse, rate_bits: out.rate_bits };
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {} at step {}", out.loss, self.step)));
        }
        self.model.backward();
        self.optimizer.update(&mut self.model, lr);
        self.step += 1;
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn cosine_schedule() {
        assert_eq!(lr_schedule(0, 100, 1e-4), 1e-4);
        assert!(lr_schedule(100, 100, 1e-4).abs() < 1e-20);
        assert!((lr_schedule(50, 100, 1e-4) - 5e-5).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=100).map(|s| lr_schedule(s, 100, 1.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn loss_formula() {
        let x = Tensor::from_vec([1, 3, 2, 2], (0..12).map(|i| i as f32 / 12.0).collect()).unwrap();
        let w = LossWeights { lambda: 8192.0, beta: 0.01 };
        assert_eq!(loss(&x, &x, 0.0, 0.0, w).unwrap(), 0.0);
        assert_eq!(loss(&x, &x, 0.01, 0.0, w).unwrap(), 81.92);
        let y = x.map(|v| 1.0 - v);
        let mse = loss(&x, &y, 0.3, 7.0, LossWeights { lambda: 0.0, beta: 0.01 }).unwrap();
        let oracle: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / 12.0;
        assert!((mse - oracle).abs() < 1e-15);
        let full = loss(&x, &y, 0.3, 7.0, w).unwrap();
        assert!((full - (8192.0 * (0.3 + 0.01 * 7.0 / 12.0) + oracle)).abs() < 1e-9);
        assert!(loss(&x, &Tensor::zeros([1, 3, 4, 1]), 0.0, 0.0, w).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut model = Mdvsc::<f32>::new(ModelConfig { channel_dim: 2, gop_size: 1, resblock_depth: 1, snr_train_db: 10.0 }, 0).unwrap();
        let before = model.params();
        model.for_each_param_mut(&mut |_, p| p.grad.iter_mut().enumerate().for_each(|(i, g)| *g = if i % 2 == 0 { 3.0 } else { -0.5 }));
        let mut adam = Adam::default();
        adam.update(&mut model, 0.01);
        for (name, after) in model.params() {
            for (i, (a, b)) in after.iter().zip(&before[&name]).enumerate() {
                let expected = if i % 2 == 0 { -0.01 } else { 0.01 };
                assert!(((a - b) - expected).abs() < 1e-6, "{name}[{i}]");
            }
        }
    }

    #[test]
    fn crop_windows_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (h, w) = (rng.random_range(16..100), rng.random_range(16..100));
            let size = rng.random_range(1..=h.min(w));
            let win = CropWindow::sample(h, w, size, &mut rng).unwrap();
            assert!(win.top + size <= h && win.left + size <= w);
        }
        assert!(CropWindow::sample(10, 40, 16, &mut rng).is_err());
        let a = CropWindow::sample(90, 90, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, CropWindow::sample(90, 90, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap());
    }

    #[test]
    fn crop_extracts_window() {
        let (h, w) = (5, 6);
        let frame: Vec<f32> = (0..3 * h * w).map(|i| i as f32).collect();
        let win = CropWindow { top: 1, left: 2, size: 2 };
        let mut out = vec![0.0; 12];
        win.extract(&frame, h, w, &mut out);
        assert_eq!(&out[..4], &[8.0, 9.0, 14.0, 15.0]);
        assert_eq!(out[4], 30.0 + 8.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        for bad in [
            TrainConfig { lr_init: 0.0, ..TrainConfig::desk() },
            TrainConfig { batch_size: 0, ..TrainConfig::desk() },
            TrainConfig { crop: 60, ..TrainConfig::desk() },
            TrainConfig { cbr_grid: vec![], ..TrainConfig::desk() },
            TrainConfig { cbr_grid: vec![0.01, -1.0], ..TrainConfig::desk() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    fn toy_batch(seed: u64, gops: usize, crop: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..gops {
            let (fx, fy, phase): (f32, f32, f32) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random());
            for n in 0..3 {
                for c in 0..3 {
                    for y in 0..crop {
                        for x in 0..crop {
                            let t = fx * (x + n) as f32 + fy * y as f32 + phase * 6.0 + c as f32;
                            data.push(0.5 + 0.4 * t.sin());
                        }
                    }
                }
            }
        }
        Tensor::from_vec([gops * 3, 3, crop, crop], data).unwrap()
    }

    fn small_trainer(seed: u64) -> Trainer {
        let cfg = TrainConfig {
            crop: 32,
            batch_size: 2,
            steps: 60,
            lr_init: 2e-3,
            cbr_grid: vec![0.005, 0.01, 0.015],
            seed,
            ..TrainConfig::desk()
        };
        let model = ModelConfig { channel_dim: 8, gop_size: 3, resblock_depth: 1, snr_train_db: 10.0 };
        Trainer::new(model, cfg).unwrap()
    }

    #[test]
    fn training_reduces_mse() {
        let mut t = small_trainer(3);
        let mut logs = Vec::new();
        while !t.is_done() {
            let frames = toy_batch(t.step % 5, 2, 32);
            logs.push(t.step(&frames).unwrap());
        }
        let head: f64 = logs[..10].iter().map(|l| l.mse).sum();
        let tail: f64 = logs[50..].iter().map(|l| l.mse).sum();
        assert!(tail < head, "{head} -> {tail}");
        assert!(logs.last().unwrap().lr < 1e-5);
    }

    #[test]
    fn resume_is_bit_exact() {
        let mut a = small_trainer(9);
        for _ in 0..4 {
            a.step(&toy_batch(a.step, 2, 32)).unwrap();
        }
        let mut b = a.clone();
        let mut b_fresh = small_trainer(9);
        b_fresh.model.load_params(&b.model.params()).unwrap();
        b_fresh.optimizer = b.optimizer.clone();
        b_fresh.step = b.step;
        for _ in 0..3 {
            let frames = toy_batch(a.step, 2, 32);
            let la = a.step(&frames).unwrap();
            assert_eq!(la, b.step(&frames).unwrap());
            assert_eq!(la, b_fresh.step(&frames).unwrap());
        }
        assert_eq!(a.model.params(), b_fresh.model.params());
    }

    #[test]
    fn every_group_receives_gradient() {
        let mut t = small_trainer(1);
        let frames = toy_batch(0, 2, 32);
        let (kept, cbr) = t.sample_budgets(2).unwrap();
        let batch = TrainBatch { frames: &frames, gop_size: 3, kept: &kept, realized_cbr: cbr };
        let mode = PassMode { relaxed: true, snr_db: Some(10.0) };
        t.model.zero_grad();
        t.model.forward_train(batch, mode, t.config.weights(), &mut step_rng(1, 0, RNG_NOISE)).unwrap();
        t.model.backward();
        for (name, g) in t.model.grads() {
            assert!(g.iter().any(|&v| v != 0.0), "{name} has no gradient");
        }
    }

    #[test]
    fn step_rngs_are_independent() {
        let draw = |s, k, p| step_rng(s, k, p).random::<u64>();
        assert_eq!(draw(1, 2, 3), draw(1, 2, 3));
        assert_ne!(draw(1, 2, 3), draw(1, 3, 3));
        assert_ne!(draw(1, 2, 3), draw(1, 2, 1));
        assert_ne!(draw(1, 2, 3), draw(2, 2, 3));
    }
}
