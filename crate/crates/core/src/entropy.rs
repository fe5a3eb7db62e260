//! Gaussian entropy model.
//!
//! A small auto-encoder maps every feature map to a quantized hyper code
//! (the side information) and back to a per-element Gaussian scale. The
//! scale drives both the rate surrogate used in training and the ranking
//! that decides which elements are transmitted.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::nn::{join, relu_backward, relu_in_place, sigmoid, softplus, Conv2d, ConvTranspose2d, Module, Param};
use crate::types::FeatureDecomposition;
use crate::{Error, Result, Scalar, Tensor};

/// Lower bound added to every predicted scale.
pub const SIGMA_FLOOR: f64 = 0.01;

const LOG2_E: f64 = core::f64::consts::LOG2_E;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const STAGES: usize = 3;

/// Quantized hyper code; the receiver rebuilds the keep-mask from it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SideInfo {
    pub hyper_code: Vec<i32>,
    /// `[N + 1, C, h', w']`
    pub hyper_shape: [usize; 4],
}

impl SideInfo {
    /// Channel uses charged to the budget: one per hyper-code element plus
    /// one power gain per symbol vector.
    pub fn cost_symbols(&self) -> usize {
        self.hyper_code.len() + self.hyper_shape[0]
    }

    pub fn dequantize<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(self.hyper_shape, self.hyper_code.iter().map(|&q| T::of(q as f64)).collect())
            .expect("hyper code matches its shape")
    }

    pub fn quantize<T: Scalar>(hyper: &Tensor<T>) -> Self {
        Self { hyper_code: hyper.data().iter().map(|v| v.round_even().as_f64() as i32).collect(), hyper_shape: hyper.shape() }
    }
}

/// Per-element information content of a decomposition, in bits.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    /// Stream order: individual maps, then the common map.
    pub scores: Vec<f64>,
}

/// `-log2 N(w; 0, sigma)`.
pub fn neg_log2_density(w: f64, sigma: f64) -> f64 {
    (libm::log(sigma) + LN_SQRT_2PI) * LOG2_E + w * w / (2.0 * sigma * sigma) * LOG2_E
}

/// Differential entropy `0.5 * log2(2 pi e sigma^2)` of a zero-mean
/// Gaussian; depends on the scale only.
pub fn gaussian_entropy_bits(sigma: f64) -> f64 {
    0.5 * libm::log2(2.0 * core::f64::consts::PI * core::f64::consts::E * sigma * sigma)
}

/// Scores every element by `-log2 p(w; 0, sigma)`, floored at zero.
pub fn importance<T: Scalar>(decomp: &FeatureDecomposition<T>, sigma: &Tensor<T>) -> Result<EntropyMap> {
    let stacked = decomp.stacked();
    if stacked.shape() != sigma.shape() {
        return Err(Error::Shape(alloc::format!("scale shape {:?} does not match decomposition {:?}", sigma.shape(), stacked.shape())));
    }
    let scores = stacked
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(w, s)| {
            let s = s.as_f64();
            assert!(s > 0.0, "Gaussian scale must be positive, got {s}");
            neg_log2_density(w.as_f64(), s).max(0.0)
        })
        .collect();
    Ok(EntropyMap { scores })
}

/// Rate surrogate with its gradients.
#[derive(Clone, Debug)]
pub struct Rate<T> {
    pub bits: f64,
    pub grad_w: Vec<T>,
    pub grad_sigma: Vec<T>,
}

/// `sum max(0, -log2 N(w + u; 0, sigma))` where `u` is the optional
/// uniform relaxation noise.
pub fn rate_loss<T: Scalar>(w: &[T], sigma: &[T], noise: Option<&[T]>) -> Rate<T> {
    assert_eq!(w.len(), sigma.len(), "rate operands differ in length");
    let mut rate = Rate { bits: 0.0, grad_w: Vec::with_capacity(w.len()), grad_sigma: Vec::with_capacity(w.len()) };
    for i in 0..w.len() {
        let v = w[i].as_f64() + noise.map_or(0.0, |u| u[i].as_f64());
        let s = sigma[i].as_f64();
        let bits = neg_log2_density(v, s);
        if bits > 0.0 {
            rate.bits += bits;
            rate.grad_w.push(T::of(v / (s * s) * LOG2_E));
            rate.grad_sigma.push(T::of((1.0 / s - v * v / (s * s * s)) * LOG2_E));
        } else {
            rate.grad_w.push(T::zero());
            rate.grad_sigma.push(T::zero());
        }
    }
    rate
}

#[derive(Clone, Debug, Default)]
struct Cache<T> {
    enc_act: Vec<Tensor<T>>,
    dec_act: Vec<Tensor<T>>,
    pre_scale: Option<Tensor<T>>,
}

/// Hyper auto-encoder: three stride-2 convolutions down, three stride-2
/// transposed convolutions back up, softplus on the way out.
#[derive(Clone, Debug)]
pub struct EntropyModel<T> {
    enc: Vec<Conv2d<T>>,
    dec: Vec<ConvTranspose2d<T>>,
    cache: Cache<T>,
}

impl<T: Scalar> EntropyModel<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let gain = |i: usize| if i + 1 < STAGES { core::f64::consts::SQRT_2 } else { 1.0 };
        let enc = (0..STAGES).map(|i| Conv2d::new(channels, channels, 3, 2, gain(i), rng)).collect();
        let mut dec: Vec<ConvTranspose2d<T>> = (0..STAGES).map(|i| ConvTranspose2d::new(channels, channels, 3, 2, gain(i), rng)).collect();
        // softplus(0.5413) = 1: start with unit scales
        let last = dec.last_mut().expect("three stages");
        last.bias.value.iter_mut().for_each(|b| *b = T::of(0.541_324_854_612_918_1));
        Self { enc, dec, cache: Cache::default() }
    }

    /// Spatial sizes at the input of each down-sampling stage, plus the
    /// final hyper-code size.
    fn sizes(&self, hw: (usize, usize)) -> [(usize, usize); STAGES + 1] {
        let mut out = [hw; STAGES + 1];
        for i in 0..STAGES {
            out[i + 1] = self.enc[i].output_hw(out[i].0, out[i].1);
        }
        out
    }

    pub fn hyper_shape(&self, maps: usize, channels: usize, hw: (usize, usize)) -> [usize; 4] {
        let (h, w) = self.sizes(hw)[STAGES];
        [maps, channels, h, w]
    }

    /// Unquantized hyper code of stacked maps.
    pub fn encode(&self, maps: &Tensor<T>) -> Tensor<T> {
        let mut h = maps.clone();
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.forward(&h);
            if i + 1 < STAGES {
                relu_in_place(&mut h);
            }
        }
        h
    }

    /// Per-element Gaussian scale for maps of size `map_hw`.
    pub fn decode(&self, hyper: &Tensor<T>, map_hw: (usize, usize)) -> Tensor<T> {
        let sizes = self.sizes(map_hw);
        let mut h = hyper.clone();
        for (i, deconv) in self.dec.iter().enumerate() {
            h = deconv.forward(&h, sizes[STAGES - 1 - i]);
            if i + 1 < STAGES {
                relu_in_place(&mut h);
            }
        }
        h.map(scale_from)
    }

    /// Transmitter-side analysis: quantized side information and the scales
    /// the receiver will derive from it.
    pub fn analyze(&self, decomp: &FeatureDecomposition<T>) -> (SideInfo, Tensor<T>) {
        let stacked = decomp.stacked();
        let side = SideInfo::quantize(&self.encode(&stacked));
        let sigma = self.decode(&side.dequantize(), (stacked.height(), stacked.width()));
        (side, sigma)
    }

    /// Training pass: `hyper_noise` (uniform in `[-1/2, 1/2]`) replaces
    /// rounding; with `None` the hyper code is rounded as at inference and
    /// treated as a constant offset. Returns the scales.
    pub fn forward_train(&mut self, maps: &Tensor<T>, hyper_noise: Option<&[T]>) -> Tensor<T> {
        let sizes = self.sizes((maps.height(), maps.width()));
        self.cache.enc_act.clear();
        self.cache.dec_act.clear();
        let mut h = maps.clone();
        for i in 0..STAGES {
            h = self.enc[i].forward_train(&h);
            if i + 1 < STAGES {
                relu_in_place(&mut h);
                self.cache.enc_act.push(h.clone());
            }
        }
        match hyper_noise {
            Some(noise) => {
                assert_eq!(h.len(), noise.len(), "hyper noise length");
                for (v, &u) in h.data_mut().iter_mut().zip(noise) {
                    *v = *v + u;
                }
            }
            None => h.data_mut().iter_mut().for_each(|v| *v = v.round_even()),
        }
        for i in 0..STAGES {
            h = self.dec[i].forward_train(&h, sizes[STAGES - 1 - i]);
            if i + 1 < STAGES {
                relu_in_place(&mut h);
                self.cache.dec_act.push(h.clone());
            }
        }
        let sigma = h.map(scale_from);
        self.cache.pre_scale = Some(h);
        sigma
    }

    /// Back-propagates a scale gradient to the input maps.
    pub fn backward(&mut self, grad_sigma: &Tensor<T>) -> Tensor<T> {
        let pre = self.cache.pre_scale.take().expect("EntropyModel::backward without forward_train");
        let mut g = grad_sigma.clone();
        for (gv, &x) in g.data_mut().iter_mut().zip(pre.data()) {
            *gv = *gv * sigmoid(x);
        }
        for i in (0..STAGES).rev() {
            if i + 1 < STAGES {
                relu_backward(&mut g, &self.cache.dec_act[i]);
            }
            g = self.dec[i].backward(&g);
        }
        for i in (0..STAGES).rev() {
            if i + 1 < STAGES {
                relu_backward(&mut g, &self.cache.enc_act[i]);
            }
            g = self.enc[i].backward(&g);
        }
        g
    }
}

fn scale_from<T: Scalar>(x: T) -> T {
    softplus(x) + T::of(SIGMA_FLOOR)
}

impl<T: Scalar> Module<T> for EntropyModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        for (i, c) in self.enc.iter().enumerate() {
            c.visit(&join(prefix, &alloc::format!("enc{i}")), f);
        }
        for (i, d) in self.dec.iter().enumerate() {
            d.visit(&join(prefix, &alloc::format!("dec{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (i, c) in self.enc.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &alloc::format!("enc{i}")), f);
        }
        for (i, d) in self.dec.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &alloc::format!("dec{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: [usize; 4], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn decomposition(frames: usize, c: usize, hw: usize, rng: &mut ChaCha8Rng) -> FeatureDecomposition<f64> {
        FeatureDecomposition::new(random([1, c, hw, hw], 3.0, rng), random([frames, c, hw, hw], 3.0, rng)).unwrap()
    }

    #[test]
    fn scale_is_positive_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = EntropyModel::<f64>::new(4, &mut rng);
        for _ in 0..5 {
            let d = decomposition(2, 4, 4, &mut rng);
            let (_, sigma) = model.analyze(&d);
            assert!(sigma.data().iter().all(|&s| s >= SIGMA_FLOOR));
        }
        assert!(scale_from(-1e4f64) > 0.0);
    }

    #[test]
    fn desk_hyper_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = EntropyModel::<f32>::new(32, &mut rng);
        let maps = Tensor::<f32>::zeros([1, 32, 4, 4]);
        assert_eq!(model.encode(&maps).shape(), [1, 32, 1, 1]);
        assert_eq!(model.hyper_shape(1, 32, (4, 4)), [1, 32, 1, 1]);
        assert_eq!(model.hyper_shape(7, 128, (16, 16)), [7, 128, 2, 2]);
        let sigma = model.decode(&Tensor::zeros([1, 32, 1, 1]), (4, 4));
        assert_eq!(sigma.shape(), [1, 32, 4, 4]);
    }

    #[test]
    fn analysis_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = EntropyModel::<f64>::new(4, &mut rng);
        let d = decomposition(3, 4, 8, &mut rng);
        let (a, sa) = model.analyze(&d);
        let (b, sb) = model.analyze(&d);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let requantized = SideInfo::quantize(&a.dequantize::<f32>());
        assert_eq!(requantized, a);
        assert_eq!(a.cost_symbols(), a.hyper_code.len() + 4);
    }

    #[test]
    fn importance_analytic_and_monotone() {
        let sigma0 = 1.0 / libm::sqrt(2.0 * core::f64::consts::PI);
        assert!(neg_log2_density(0.0, sigma0).abs() < 1e-12);
        let mut last = -1.0;
        for i in 0..20 {
            let s = neg_log2_density(i as f64 * 0.3, 0.7);
            assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn importance_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = decomposition(2, 3, 2, &mut rng);
        let sigma = random([3, 3, 2, 2], 1.0, &mut rng).map(|v| v.abs() + 0.05);
        let map = importance(&d, &sigma).unwrap();
        let stacked = d.stacked();
        for (i, &score) in map.scores.iter().enumerate() {
            let (w, s) = (stacked.data()[i], sigma.data()[i]);
            let pdf = (-w * w / (2.0 * s * s)).exp() / (s * (2.0 * core::f64::consts::PI).sqrt());
            let expect = (-pdf.log2()).max(0.0);
            assert!((score - expect).abs() < 1e-9, "{score} vs {expect}");
            assert!(score >= 0.0);
        }
        assert!(importance(&d, &Tensor::zeros([1, 3, 2, 2])).is_err());
    }

    #[test]
    fn rate_matches_dense_formula_and_grows_with_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..50).map(|_| rng.random_range(-4.0..4.0)).collect();
        let s: Vec<f64> = (0..50).map(|_| rng.random_range(0.3..3.0)).collect();
        let u: Vec<f64> = (0..50).map(|_| rng.random_range(-0.5..0.5)).collect();
        let rate = rate_loss(&w, &s, Some(&u));
        let expect: f64 = (0..50)
            .map(|i| {
                let v = w[i] + u[i];
                let pdf = (-v * v / (2.0 * s[i] * s[i])).exp() / (s[i] * (2.0 * core::f64::consts::PI).sqrt());
                (-pdf.log2()).max(0.0)
            })
            .sum();
        assert!((rate.bits - expect).abs() < 1e-9);
        assert!(rate.bits >= 0.0);

        let big = rate_loss(&[0.0f64], &[1e6], None).bits;
        let bigger = rate_loss(&[0.0f64], &[1e7], None).bits;
        assert!((bigger - big - libm::log2(10.0)).abs() < 1e-9);
    }

    #[test]
    fn rate_gradients_match_finite_differences() {
        let w = [0.7f64, -2.0, 0.01];
        let s = [0.5f64, 1.3, 0.3];
        let rate = rate_loss(&w, &s, None);
        let h = 1e-6;
        for i in 0..3 {
            let mut wp = w;
            wp[i] += h;
            let mut wm = w;
            wm[i] -= h;
            let gw = (rate_loss(&wp, &s, None).bits - rate_loss(&wm, &s, None).bits) / (2.0 * h);
            assert!((gw - rate.grad_w[i]).abs() < 1e-5, "w{i}");
            let mut sp = s;
            sp[i] += h;
            let mut sm = s;
            sm[i] -= h;
            let gs = (rate_loss(&w, &sp, None).bits - rate_loss(&w, &sm, None).bits) / (2.0 * h);
            assert!((gs - rate.grad_sigma[i]).abs() < 1e-5, "s{i}");
        }
        // floored elements contribute no gradient
        assert_eq!(rate.grad_w[2], 0.0);
    }

    #[test]
    fn training_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = EntropyModel::<f64>::new(2, &mut rng);
        let maps = random([2, 2, 4, 4], 2.0, &mut rng);
        let noise: Vec<f64> = (0..2 * 2).map(|_| rng.random_range(-0.5..0.5)).collect();
        let sigma = model.forward_train(&maps, Some(&noise));
        let r = random(sigma.shape(), 1.0, &mut rng);
        let gx = model.backward(&r);
        let objective = |m: &mut EntropyModel<f64>, x: &Tensor<f64>| {
            let s = m.forward_train(x, Some(&noise));
            s.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in [0usize, 5, 17, 31] {
            let mut xp = maps.clone();
            xp.data_mut()[i] += h;
            let mut xm = maps.clone();
            xm.data_mut()[i] -= h;
            let mut m2 = model.clone();
            let numeric = (objective(&mut m2, &xp) - objective(&mut m2, &xm)) / (2.0 * h);
            assert!((numeric - gx.data()[i]).abs() < 1e-6 * (1.0 + numeric.abs()), "x{i}");
        }
        let mut names = vec![];
        model.visit("entropy", &mut |n, _| names.push(n));
        assert_eq!(names.len(), 12);
        assert_eq!(names[0], "entropy.enc0.weight");
    }
}
