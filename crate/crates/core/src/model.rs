//! The transform pipeline: latent transformer, JSCC encoder, common feature
//! extractor, entropy model, JSCC decoder and latent inversion.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::{self, Channel, ChannelConfig, ChannelKind};
use crate::entropy::{rate_loss, EntropyModel, SideInfo};
use crate::metrics::QualityReport;
use crate::nn::{join, relu_backward, relu_in_place, Conv2d, DownStage, Module, Param, UpStage};
use crate::types::{BandwidthBudget, FeatureDecomposition, GopDims, SymbolStream, VideoGop, FRAME_CHANNELS};
use crate::vlc::{self, KeepMask};
use crate::{Error, Result, Scalar, Tensor};

const ENCODER_STAGES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels of latent representations and JSCC codewords.
    pub channel_dim: usize,
    pub gop_size: usize,
    /// Residual blocks after each (de)convolution.
    pub resblock_depth: usize,
    pub snr_train_db: f64,
}

impl ModelConfig {
    /// Full-size configuration: 128 channels, 6-frame GOPs.
    pub fn full() -> Self {
        Self { channel_dim: 128, gop_size: 6, resblock_depth: 3, snr_train_db: 10.0 }
    }

    /// Desk-scale configuration: 32 channels, 3-frame GOPs.
    pub fn desk() -> Self {
        Self { channel_dim: 32, gop_size: 3, resblock_depth: 3, snr_train_db: 10.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_dim == 0 || self.gop_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "channel_dim and gop_size must be positive, got {} and {}",
                self.channel_dim, self.gop_size
            )));
        }
        if !self.snr_train_db.is_finite() {
            return Err(Error::InvalidArgument("snr_train_db must be finite".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Frame-mean followed by two 3x3 convolution + ReLU layers.
#[derive(Clone, Debug)]
struct CommonExtractor<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    act1: Option<Tensor<T>>,
    act2: Option<Tensor<T>>,
}

impl<T: Scalar> CommonExtractor<T> {
    fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let gain = core::f64::consts::SQRT_2;
        Self {
            conv1: Conv2d::new(channels, channels, 3, 1, gain, rng),
            conv2: Conv2d::new(channels, channels, 3, 1, gain, rng),
            act1: None,
            act2: None,
        }
    }

    fn forward(&self, mean: &Tensor<T>) -> Tensor<T> {
        let mut h = self.conv1.forward(mean);
        relu_in_place(&mut h);
        let mut out = self.conv2.forward(&h);
        relu_in_place(&mut out);
        out
    }

    fn forward_train(&mut self, mean: &Tensor<T>) -> Tensor<T> {
        let mut h = self.conv1.forward_train(mean);
        relu_in_place(&mut h);
        let mut out = self.conv2.forward_train(&h);
        relu_in_place(&mut out);
        self.act1 = Some(h);
        self.act2 = Some(out.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = grad.clone();
        relu_backward(&mut g, self.act2.as_ref().expect("extractor cache"));
        let mut g = self.conv2.backward(&g);
        relu_backward(&mut g, self.act1.as_ref().expect("extractor cache"));
        self.conv1.backward(&g)
    }
}

impl<T: Scalar> Module<T> for CommonExtractor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// Per-GOP mean over frames: `[B * N, ...]` to `[B, ...]`.
fn frame_mean<T: Scalar>(features: &Tensor<T>, gop_size: usize) -> Tensor<T> {
    let [bn, c, h, w] = features.shape();
    let gops = bn / gop_size;
    let scale = T::one() / T::of(gop_size as f64);
    let mut mean = Tensor::zeros([gops, c, h, w]);
    for b in 0..gops {
        let dst = mean.item_mut(b);
        for n in 0..gop_size {
            for (d, &v) in dst.iter_mut().zip(features.item(b * gop_size + n)) {
                *d = *d + v;
            }
        }
        dst.iter_mut().for_each(|d| *d = *d * scale);
    }
    mean
}

/// Scalar parameters of every sub-network, keyed by stable dotted names.
pub type ParamMap<T> = BTreeMap<String, Vec<T>>;

/// Losses of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T> {
    pub loss: f64,
    pub mse: f64,
    pub rate_bits: f64,
    pub reconstruction: Tensor<T>,
}

/// How a training forward pass treats the quantizer and the channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassMode {
    /// Uniform noise instead of rounding on the hyper code and inside the
    /// rate surrogate.
    pub relaxed: bool,
    /// AWGN at this SNR; `None` is a noiseless channel.
    pub snr_db: Option<f64>,
}

/// Weights of the rate-distortion objective
/// `lambda * (K + beta * rate_bits / (N * m)) + D`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl LossWeights {
    pub const DEFAULT: Self = Self { lambda: 8192.0, beta: 0.01 };

    /// Combines distortion, realized bandwidth ratio and surrogate rate
    /// (in bits over `source_dim` source values).
    pub fn combine(&self, mse: f64, realized_cbr: f64, rate_bits: f64, source_dim: usize) -> f64 {
        self.lambda * (realized_cbr + self.beta * rate_bits / source_dim as f64) + mse
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// One training batch: `frames` stacks `kept.len()` GOPs of `gop_size`
/// frames; `kept[b]` is the number of feature elements GOP `b` may send.
#[derive(Clone, Copy, Debug)]
pub struct TrainBatch<'a, T> {
    pub frames: &'a Tensor<T>,
    pub gop_size: usize,
    pub kept: &'a [usize],
    /// Realized channel bandwidth ratio `K`, averaged over the batch.
    pub realized_cbr: f64,
}

#[derive(Clone, Debug, Default)]
struct TrainCache<T> {
    frames: Option<Tensor<T>>,
    reconstruction: Option<Tensor<T>>,
    masks: Vec<KeepMask>,
    channel_noise: Vec<T>,
    stacked: Option<Tensor<T>>,
    rate_grad_sigma: Vec<T>,
    gop_size: usize,
    rate_scale: f64,
}

/// The complete learnable system.
#[derive(Clone, Debug)]
pub struct Mdvsc<T> {
    config: ModelConfig,
    latent: DownStage<T>,
    encoder: Vec<DownStage<T>>,
    extractor: CommonExtractor<T>,
    entropy: EntropyModel<T>,
    decoder: Vec<UpStage<T>>,
    inversion: UpStage<T>,
    cache: TrainCache<T>,
}

/// Outcome of sending one GOP.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelReport {
    pub target_cbr: f64,
    pub achieved_cbr: f64,
    pub total_symbols: usize,
    /// Error-free side symbols (hyper code and power gains) inside `k_{N+1}`.
    pub side_info_symbols: usize,
    /// `k_1 .. k_{N+1}`; one symbol is one real-valued channel use.
    pub symbols_per_vector: Vec<usize>,
    pub channel: ChannelKind,
    pub snr_db: f64,
    /// Vectors sent as silence because their payload was all zero.
    pub silent_vectors: Vec<usize>,
    pub quality: QualityReport,
}

/// Transmitter output for one GOP.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub stream: SymbolStream,
    pub side: SideInfo,
    pub mask: KeepMask,
    pub gains: Vec<f32>,
}

impl<T: Scalar> Mdvsc<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, depth) = (config.channel_dim, config.resblock_depth);
        let latent = DownStage::new(FRAME_CHANNELS, c, 5, depth, &mut rng);
        let encoder = (0..ENCODER_STAGES).map(|_| DownStage::new(c, c, 3, depth, &mut rng)).collect();
        let extractor = CommonExtractor::new(c, &mut rng);
        let entropy = EntropyModel::new(c, &mut rng);
        let decoder = (0..ENCODER_STAGES).map(|_| UpStage::new(c, c, 3, depth, &mut rng)).collect();
        let mut inversion = UpStage::new(c, FRAME_CHANNELS, 5, depth, &mut rng);
        // start reconstructions at mid-grey
        inversion.visit_mut("", &mut |name, p| {
            if name == "deconv.bias" {
                p.value.iter_mut().for_each(|b| *b = T::of(0.5));
            }
        });
        Ok(Self { config, latent, encoder, extractor, entropy, decoder, inversion, cache: TrainCache::default() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    // ---- individual transforms -------------------------------------------

    /// `[N, 3, H, W]` to `[N, C, H/2, W/2]`.
    pub fn latent_transform(&self, frames: &Tensor<T>) -> Tensor<T> {
        self.latent.forward(frames)
    }

    /// `[N, C, H/2, W/2]` to `[N, C, H/16, W/16]`.
    pub fn jscc_encode(&self, latent: &Tensor<T>) -> Tensor<T> {
        self.encoder.iter().fold(latent.clone(), |h, s| s.forward(&h))
    }

    /// Splits the features of one GOP into a common map and per-frame
    /// residuals; `common + individual[n]` reproduces `features[n]`.
    pub fn extract_common(&self, features: &Tensor<T>) -> FeatureDecomposition<T> {
        let mean = frame_mean(features, features.batch());
        let common = self.extractor.forward(&mean);
        let mut individual = features.clone();
        for n in 0..individual.batch() {
            for (v, &c) in individual.item_mut(n).iter_mut().zip(common.data()) {
                *v = *v - c;
            }
        }
        FeatureDecomposition { common, individual }
    }

    /// `[N, C, h, w]` to `[N, C, 8h, 8w]`.
    pub fn jscc_decode(&self, features: &Tensor<T>) -> Tensor<T> {
        self.decoder.iter().fold(features.clone(), |h, s| {
            let hw = (2 * h.height(), 2 * h.width());
            s.forward(&h, hw)
        })
    }

    /// `[N, C, H/2, W/2]` to unclipped `[N, 3, H, W]`.
    pub fn latent_invert(&self, latent: &Tensor<T>) -> Tensor<T> {
        self.inversion.forward(latent, (2 * latent.height(), 2 * latent.width()))
    }

    /// Quantized side information and the receiver-side scales.
    pub fn entropy_analyze(&self, decomp: &FeatureDecomposition<T>) -> (SideInfo, Tensor<T>) {
        self.entropy.analyze(decomp)
    }

    /// Scales the receiver derives from side information alone.
    pub fn scales_from_side(&self, side: &SideInfo, map_hw: (usize, usize)) -> Tensor<T> {
        self.entropy.decode(&side.dequantize(), map_hw)
    }

    /// Reconstruction without masking or channel.
    pub fn autoencode(&self, frames: &Tensor<T>) -> Tensor<T> {
        let features = self.jscc_encode(&self.latent_transform(frames));
        let recombined = self.extract_common(&features).recombine().expect("consistent shapes");
        self.latent_invert(&self.jscc_decode(&recombined))
    }

    // ---- bandwidth accounting --------------------------------------------

    pub fn hyper_shape(&self, dims: GopDims) -> [usize; 4] {
        self.entropy.hyper_shape(dims.frames + 1, self.config.channel_dim, dims.feature_hw())
    }

    /// Side-information symbols per GOP: hyper code plus one gain per vector.
    pub fn side_info_cost(&self, dims: GopDims) -> usize {
        let shape = self.hyper_shape(dims);
        shape.iter().product::<usize>() + shape[0]
    }

    /// Feature elements across the common and all individual maps.
    pub fn feature_elements(&self, dims: GopDims) -> usize {
        let (h, w) = dims.feature_hw();
        (dims.frames + 1) * self.config.channel_dim * h * w
    }

    pub fn min_feasible_cbr(&self, dims: GopDims) -> f64 {
        self.side_info_cost(dims) as f64 / dims.source_dim() as f64
    }

    pub fn full_rate_cbr(&self, dims: GopDims) -> f64 {
        (self.side_info_cost(dims) + self.feature_elements(dims)) as f64 / dims.source_dim() as f64
    }

    /// Feature elements a budget leaves after side information.
    pub fn kept_elements(&self, budget: &BandwidthBudget) -> Result<usize> {
        let side = self.side_info_cost(budget.dims);
        let available = side + self.feature_elements(budget.dims);
        if budget.total_symbols < side {
            return Err(Error::InfeasibleBudget { requested: budget.total_symbols, minimum: side });
        }
        if budget.total_symbols > available {
            return Err(Error::BudgetTooLarge { requested: budget.total_symbols, available });
        }
        Ok(budget.total_symbols - side)
    }

    // ---- parameters -------------------------------------------------------

    fn visit_groups(&self, f: &mut dyn FnMut(String, &Param<T>)) {
        self.latent.visit("latent", f);
        for (i, s) in self.encoder.iter().enumerate() {
            s.visit(&format!("encoder.stage{i}"), f);
        }
        self.extractor.visit("extractor", f);
        self.entropy.visit("entropy", f);
        for (i, s) in self.decoder.iter().enumerate() {
            s.visit(&format!("decoder.stage{i}"), f);
        }
        self.inversion.visit("inversion", f);
    }

    fn visit_groups_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.latent.visit_mut("latent", f);
        for (i, s) in self.encoder.iter_mut().enumerate() {
            s.visit_mut(&format!("encoder.stage{i}"), f);
        }
        self.extractor.visit_mut("extractor", f);
        self.entropy.visit_mut("entropy", f);
        for (i, s) in self.decoder.iter_mut().enumerate() {
            s.visit_mut(&format!("decoder.stage{i}"), f);
        }
        self.inversion.visit_mut("inversion", f);
    }

    /// Learnable parameters on the transmitter side (latent transformer,
    /// encoder, extractor, entropy model).
    pub fn transmitter_param_count(&self) -> usize {
        self.latent.param_count()
            + self.encoder.iter().map(Module::param_count).sum::<usize>()
            + self.extractor.param_count()
            + self.entropy.param_count()
    }

    /// Learnable parameters on the receiver side (decoder, inversion).
    pub fn receiver_param_count(&self) -> usize {
        self.decoder.iter().map(Module::param_count).sum::<usize>() + self.inversion.param_count()
    }

    pub fn params(&self) -> ParamMap<T> {
        let mut out = ParamMap::new();
        self.visit_groups(&mut |name, p| {
            out.insert(name, p.value.clone());
        });
        out
    }

    pub fn grads(&self) -> ParamMap<T> {
        let mut out = ParamMap::new();
        self.visit_groups(&mut |name, p| {
            out.insert(name, p.grad.clone());
        });
        out
    }

    /// Replaces every parameter; names and lengths must match exactly.
    pub fn load_params(&mut self, values: &ParamMap<T>) -> Result<()> {
        let mut problem = None;
        let mut seen = 0;
        self.visit_groups(&mut |name, p| match values.get(&name) {
            Some(v) if v.len() == p.len() => seen += 1,
            Some(v) => problem = Some(format!("parameter {name} has {} values, expected {}", v.len(), p.len())),
            None => problem = Some(format!("missing parameter {name}")),
        });
        if let Some(msg) = problem {
            return Err(Error::Shape(msg));
        }
        if seen != values.len() {
            return Err(Error::Shape(format!("{} unexpected parameters", values.len() - seen)));
        }
        self.visit_groups_mut(&mut |name, p| p.value.clone_from(&values[&name]));
        Ok(())
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.visit_groups_mut(f);
    }

    pub fn param_count(&self) -> usize {
        self.transmitter_param_count() + self.receiver_param_count()
    }

    pub fn zero_grad(&mut self) {
        self.visit_groups_mut(&mut |_, p| p.grad.iter_mut().for_each(|g| *g = T::zero()));
    }

    /// Same model with another element type.
    pub fn cast<U: Scalar>(&self) -> Mdvsc<U> {
        let mut out = Mdvsc::<U>::new(self.config, 0).expect("validated config");
        let values = self.params().into_iter().map(|(k, v)| (k, v.iter().map(|x| U::of(x.as_f64())).collect())).collect();
        out.load_params(&values).expect("same architecture");
        out
    }

    // ---- training ---------------------------------------------------------

    /// Training forward pass over a batch; caches what [`Self::backward`]
    /// needs.
    ///
    /// Random draws come from `rng` in a fixed order and count that does not
    /// depend on parameter values: hyper-code noise, rate noise, then one
    /// standard normal per feature element for the channel.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        batch: TrainBatch<'_, T>,
        mode: PassMode,
        weights: LossWeights,
        rng: &mut R,
    ) -> Result<StepOutput<T>> {
        let n = batch.gop_size;
        let x = batch.frames;
        if n == 0 || x.batch() != n * batch.kept.len() {
            return Err(Error::Shape(format!("{} frames do not form {} GOPs of {n}", x.batch(), batch.kept.len())));
        }
        let gops = batch.kept.len();
        let latent = self.latent.forward_train(x);
        let features = self.encoder.iter_mut().fold(latent, |h, s| s.forward_train(&h));
        let [_, c, h, w] = features.shape();
        let map_len = c * h * w;
        let maps = n + 1;
        for &k in batch.kept {
            if k > maps * map_len {
                return Err(Error::BudgetTooLarge { requested: k, available: maps * map_len });
            }
        }

        let common = self.extractor.forward_train(&frame_mean(&features, n));
        let mut stacked = Tensor::zeros([gops * maps, c, h, w]);
        for b in 0..gops {
            for i in 0..n {
                let dst = stacked.item_mut(b * maps + i);
                for ((d, &f), &cm) in dst.iter_mut().zip(features.item(b * n + i)).zip(common.item(b)) {
                    *d = f - cm;
                }
            }
            stacked.item_mut(b * maps + n).copy_from_slice(common.item(b));
        }

        let hyper_len = self.entropy.hyper_shape(gops * maps, c, (h, w)).iter().product();
        let uniform = |rng: &mut R, len: usize| -> Vec<T> { (0..len).map(|_| T::of(rng.random_range(-0.5..0.5))).collect() };
        let hyper_noise = uniform(rng, hyper_len);
        let rate_noise = uniform(rng, stacked.len());
        let sigma = self.entropy.forward_train(&stacked, mode.relaxed.then_some(&hyper_noise[..]));
        let rate = rate_loss(stacked.data(), sigma.data(), mode.relaxed.then_some(&rate_noise[..]));

        let std = mode.snr_db.map_or(0.0, |snr| libm::sqrt(channel::noise_variance(snr)));
        let channel_noise: Vec<T> = (0..stacked.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();

        let mut masks = Vec::with_capacity(gops);
        let mut received = Tensor::zeros(stacked.shape());
        for b in 0..gops {
            let block = b * maps * map_len..(b + 1) * maps * map_len;
            let scores: Vec<f64> = sigma.data()[block.clone()].iter().map(|s| crate::entropy::gaussian_entropy_bits(s.as_f64())).collect();
            let mask = vlc::build_mask(&scores, map_len, batch.kept[b])?;
            for i in 0..maps {
                let seg = (b * maps + i) * map_len..(b * maps + i + 1) * map_len;
                let keep = mask.map(i);
                let values = &stacked.data()[seg.clone()];
                let gain = segment_rms(values, keep);
                let noise = &channel_noise[seg.clone()];
                let out = &mut received.data_mut()[seg];
                for j in 0..map_len {
                    if keep[j] && gain > T::zero() {
                        out[j] = values[j] + noise[j] * gain;
                    }
                }
            }
            masks.push(mask);
        }

        let mut recombined = Tensor::zeros([gops * n, c, h, w]);
        for b in 0..gops {
            for i in 0..n {
                let dst = recombined.item_mut(b * n + i);
                for ((d, &v), &cm) in dst.iter_mut().zip(received.item(b * maps + i)).zip(received.item(b * maps + n)) {
                    *d = v + cm;
                }
            }
        }

        let decoded = self.decoder.iter_mut().fold(recombined, |h, s| {
            let hw = (2 * h.height(), 2 * h.width());
            s.forward_train(&h, hw)
        });
        let hw = (2 * decoded.height(), 2 * decoded.width());
        let reconstruction = self.inversion.forward_train(&decoded, hw);

        let mse = x.data().iter().zip(reconstruction.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / x.len() as f64;
        let source_dim = x.item_len() * x.batch();
        let rate_scale = weights.lambda * weights.beta / source_dim as f64;
        let loss = weights.combine(mse, batch.realized_cbr, rate.bits, source_dim);

        self.cache = TrainCache {
            frames: Some(x.clone()),
            reconstruction: Some(reconstruction.clone()),
            masks,
            channel_noise,
            stacked: Some(stacked),
            rate_grad_sigma: rate.grad_sigma,
            gop_size: n,
            rate_scale,
        };
        Ok(StepOutput { loss, mse, rate_bits: rate.bits, reconstruction })
    }

    /// Accumulates parameter gradients of the last [`Self::forward_train`]
    /// loss. Gradients of the rate term reach the entropy model only.
    pub fn backward(&mut self) {
        let cache = core::mem::take(&mut self.cache);
        let x = cache.frames.expect("backward without forward_train");
        let recon = cache.reconstruction.expect("cached reconstruction");
        let stacked = cache.stacked.expect("cached maps");
        let n = cache.gop_size;
        let maps = n + 1;
        let gops = cache.masks.len();
        let [_, c, h, w] = stacked.shape();
        let map_len = c * h * w;

        let scale = T::of(2.0 / x.len() as f64);
        let mut g_recon = recon.clone();
        for (g, (&r, &t)) in g_recon.data_mut().iter_mut().zip(recon.data().iter().zip(x.data())) {
            *g = (r - t) * scale;
        }
        let g = self.inversion.backward(&g_recon);
        let g_recombined = self.decoder.iter_mut().rev().fold(g, |g, s| s.backward(&g));

        // recombination: individual maps pass through, the common map
        // collects the sum over frames
        let mut g_received = Tensor::zeros(stacked.shape());
        for b in 0..gops {
            for i in 0..n {
                let src = g_recombined.item(b * n + i);
                g_received.item_mut(b * maps + i).copy_from_slice(src);
                let common = g_received.item_mut(b * maps + n);
                for (d, &v) in common.iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }

        // masked channel: out_j = v_j + e_j * rms(v) over kept positions
        let mut g_stacked = Tensor::zeros(stacked.shape());
        for b in 0..gops {
            let mask = &cache.masks[b];
            for i in 0..maps {
                let seg = (b * maps + i) * map_len..(b * maps + i + 1) * map_len;
                let keep = mask.map(i);
                let values = &stacked.data()[seg.clone()];
                let gain = segment_rms(values, keep);
                if gain == T::zero() {
                    continue;
                }
                let noise = &cache.channel_noise[seg.clone()];
                let grad_out = &g_received.data()[seg.clone()];
                let kept = T::of(keep.iter().filter(|&&k| k).count() as f64);
                let mut noise_dot = T::zero();
                for j in 0..map_len {
                    if keep[j] {
                        noise_dot = noise_dot + grad_out[j] * noise[j];
                    }
                }
                let coupling = noise_dot / (kept * gain);
                let dst = &mut g_stacked.data_mut()[seg];
                for j in 0..map_len {
                    if keep[j] {
                        dst[j] = grad_out[j] + coupling * values[j];
                    }
                }
            }
        }

        // the rate surrogate only trains the entropy model; its input is
        // treated as a constant
        let rate_scale = T::of(cache.rate_scale);
        let g_sigma = Tensor::from_vec(stacked.shape(), cache.rate_grad_sigma.iter().map(|&r| rate_scale * r).collect())
            .expect("scale gradient shape");
        let _ = self.entropy.backward(&g_sigma);

        // individual = features - common
        let mut g_features = Tensor::zeros([gops * n, c, h, w]);
        let mut g_common = Tensor::zeros([gops, c, h, w]);
        for b in 0..gops {
            let gc = g_common.item_mut(b);
            gc.copy_from_slice(g_stacked.item(b * maps + n));
            for i in 0..n {
                let gi = g_stacked.item(b * maps + i);
                g_features.item_mut(b * n + i).copy_from_slice(gi);
                for (d, &v) in gc.iter_mut().zip(gi) {
                    *d = *d - v;
                }
            }
        }
        let g_mean = self.extractor.backward(&g_common);
        let inv_n = T::one() / T::of(n as f64);
        for b in 0..gops {
            for i in 0..n {
                for (d, &v) in g_features.item_mut(b * n + i).iter_mut().zip(g_mean.item(b)) {
                    *d = *d + v * inv_n;
                }
            }
        }
        let g_latent = self.encoder.iter_mut().rev().fold(g_features, |g, s| s.backward(&g));
        let _ = self.latent.backward(&g_latent);
    }
}

fn segment_rms<T: Scalar>(values: &[T], keep: &[bool]) -> T {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (v, &k) in values.iter().zip(keep) {
        if k {
            sum += v.as_f64() * v.as_f64();
            count += 1;
        }
    }
    if count == 0 {
        T::zero()
    } else {
        T::of(libm::sqrt(sum / count as f64))
    }
}

impl Mdvsc<f32> {
    /// Transmitter: features, side information, keep-mask and symbols.
    pub fn encode_gop(&self, gop: &VideoGop, budget: &BandwidthBudget) -> Result<Encoded> {
        if budget.dims != gop.dims() {
            return Err(Error::InvalidArgument(format!("budget was computed for {:?}, GOP is {:?}", budget.dims, gop.dims())));
        }
        let kept = self.kept_elements(budget)?;
        let features = self.jscc_encode(&self.latent_transform(gop.tensor()));
        let decomp = self.extract_common(&features);
        let (side, sigma) = self.entropy_analyze(&decomp);
        let mask = vlc::build_mask(&vlc::ranking_scores(&sigma), decomp.map_len(), kept)?;
        let stream = vlc::pack(&decomp, &mask, &side)?;
        let (_, gains) = vlc::read_side_info(&stream, side.hyper_shape)?;
        debug_assert_eq!(stream.total_symbols(), budget.total_symbols);
        Ok(Encoded { stream, side, mask, gains })
    }

    /// Receiver: rebuilds the mask from the side information in `stream`,
    /// scatters the symbols and inverts the transforms.
    pub fn decode_stream(&self, stream: &SymbolStream, dims: GopDims) -> Result<VideoGop> {
        let hyper_shape = self.hyper_shape(dims);
        let (side, _) = vlc::read_side_info(stream, hyper_shape)?;
        let (h, w) = dims.feature_hw();
        let sigma = self.scales_from_side(&side, (h, w));
        let mask = vlc::build_mask(&vlc::ranking_scores(&sigma), self.config.channel_dim * h * w, stream.analog_symbols())?;
        let decomp = vlc::unpack(stream, &mask, [dims.frames, self.config.channel_dim, h, w])?;
        let features = decomp.recombine()?;
        VideoGop::from_clipped(self.latent_invert(&self.jscc_decode(&features)))
    }

    /// Sends one GOP end to end and reports bandwidth use and quality.
    pub fn forward_pipeline(
        &self,
        gop: &VideoGop,
        budget: &BandwidthBudget,
        channel_config: &ChannelConfig,
    ) -> Result<(VideoGop, ChannelReport)> {
        let dims = gop.dims();
        let encoded = self.encode_gop(gop, budget)?;
        let mut channel = Channel::new(*channel_config)?;
        let (received, stats) = channel::transmit_stream(&encoded.stream, &encoded.gains, &mut channel)?;
        let gop_hat = self.decode_stream(&received, dims)?;
        let achieved_cbr = crate::types::compute_cbr(&encoded.stream, dims)?;
        let quality = QualityReport::evaluate(gop, &gop_hat, achieved_cbr, channel_config.snr_db)?;
        let report = ChannelReport {
            target_cbr: budget.target_cbr,
            achieved_cbr,
            total_symbols: encoded.stream.total_symbols(),
            side_info_symbols: encoded.stream.side_len,
            symbols_per_vector: encoded.stream.lengths(),
            channel: channel_config.kind,
            snr_db: channel_config.snr_db,
            silent_vectors: stats.silent_vectors,
            quality,
        };
        Ok((gop_hat, report))
    }
}
