use mdvsc_core::channel::{Channel, ChannelConfig};
use mdvsc_core::entropy::SideInfo;
use mdvsc_core::metrics::{self, Frame, QualityReport};
use mdvsc_core::model::{Mdvsc, ModelConfig};
use mdvsc_core::train::step_rng;
use mdvsc_core::types::{BandwidthBudget, GopDims};
use mdvsc_core::{vlc, Tensor, VideoGop};
use proptest::prelude::*;
use rand::Rng;

fn tiny(channels: usize, frames: usize) -> Mdvsc<f32> {
    Mdvsc::new(ModelConfig { channel_dim: channels, gop_size: frames, resblock_depth: 1, snr_train_db: 10.0 }, 3).unwrap()
}

fn uniform(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = step_rng(seed, 0, 0);
    (0..len).map(|_| rng.random_range(0.0f32..=1.0)).collect()
}

fn gop(frames: usize, height: usize, width: usize, seed: u64) -> VideoGop {
    VideoGop::from_tensor(Tensor::from_vec([frames, 3, height, width], uniform(frames * 3 * height * width, seed)).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decomposition_recombines(frames in 1usize..5, h in 1usize..6, w in 1usize..6, scale in 0.01f32..4.0, seed: u64) {
        let model = tiny(6, frames);
        let mut rng = step_rng(seed, 0, 0);
        let y = Tensor::from_vec([frames, 6, h, w], (0..frames * 6 * h * w).map(|_| scale * rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let back = model.extract_common(&y).recombine().unwrap();
        prop_assert!(back.max_abs_diff(&y) <= 1e-6);
    }

    #[test]
    fn output_shape_matches_input(frames in 1usize..4, hb in 1usize..4, wb in 1usize..4, seed: u64) {
        let model = tiny(4, frames);
        let x = Tensor::from_vec([frames, 3, 16 * hb, 16 * wb], uniform(frames * 3 * 256 * hb * wb, seed)).unwrap();
        prop_assert_eq!(model.autoencode(&x).shape(), x.shape());
    }

    #[test]
    fn feasible_budgets_are_spent_exactly(frac in 0.0f64..=1.0, frames in 1usize..4, seed in 0u64..1000) {
        let model = tiny(4, frames);
        let g = gop(frames, 32, 32, seed);
        let dims = g.dims();
        let side = model.side_info_cost(dims);
        let symbols = side + (frac * model.feature_elements(dims) as f64) as usize;
        let budget = BandwidthBudget { target_cbr: symbols as f64 / dims.source_dim() as f64, total_symbols: symbols, dims };
        let encoded = model.encode_gop(&g, &budget).unwrap();
        prop_assert_eq!(encoded.mask.kept_count() + side, symbols);
        prop_assert_eq!(encoded.stream.total_symbols(), symbols);
        // the receiver rebuilds the same mask from the side information alone
        let (received_side, _) = vlc::read_side_info(&encoded.stream, model.hyper_shape(dims)).unwrap();
        prop_assert_eq!(&received_side, &encoded.side);
        let sigma = model.scales_from_side(&received_side, dims.feature_hw());
        let rebuilt = vlc::build_mask(&vlc::ranking_scores(&sigma), encoded.mask.map_len(), encoded.mask.kept_count()).unwrap();
        prop_assert_eq!(rebuilt, encoded.mask);
    }

    #[test]
    fn requested_grid_points_are_hit(thousandths in 1usize..=200, frames in 1usize..8, hb in 1usize..8, wb in 1usize..8) {
        let dims = GopDims::new(frames, 16 * hb, 16 * wb);
        let budget = BandwidthBudget::from_cbr(thousandths as f64 / 1000.0, dims).unwrap();
        prop_assert_eq!(budget.total_symbols, thousandths * dims.source_dim() / 1000);
        prop_assert!((budget.achieved_cbr() - thousandths as f64 / 1000.0).abs() < 1.0 / dims.source_dim() as f64);
    }

    #[test]
    fn hyper_code_requantization_is_idempotent(values in proptest::collection::vec(-50.0f64..50.0, 1..64)) {
        let n = values.len();
        let side = SideInfo::quantize(&Tensor::from_vec([1, 1, 1, n], values).unwrap());
        prop_assert_eq!(SideInfo::quantize(&side.dequantize::<f32>()), side.clone());
        prop_assert_eq!(SideInfo::quantize(&side.dequantize::<f64>()), side);
    }

    #[test]
    fn noise_is_zero_mean(snr in -5.0f64..25.0, seed: u64) {
        let n = 20_000;
        let noise = Channel::new(ChannelConfig::awgn(snr, seed)).unwrap().noise(n);
        let sigma = 10f64.powf(-snr / 20.0);
        let mean = noise.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        // five standard errors
        prop_assert!(mean.abs() <= 5.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(h in 11usize..48, w in 11usize..48, seed: u64) {
        let (a, b) = (uniform(3 * h * w, seed), uniform(3 * h * w, seed ^ 1));
        prop_assert_eq!(metrics::psnr(&a, &b).unwrap(), metrics::psnr(&b, &a).unwrap());
        let fa = Frame::new(&a, 3, h, w).unwrap();
        let fb = Frame::new(&b, 3, h, w).unwrap();
        let ab = metrics::ms_ssim(fa, fb).unwrap();
        prop_assert!((ab - metrics::ms_ssim(fb, fa).unwrap()).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed: u64) {
        let clean = uniform(3 * 32 * 32, seed);
        let mut rng = step_rng(seed, 1, 0);
        let direction: Vec<f32> = (0..clean.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let noisy: Vec<f32> = clean.iter().zip(&direction).map(|(c, d)| c + amp * d).collect();
            let p = metrics::psnr(&clean, &noisy).unwrap();
            prop_assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn gop_metrics_are_frame_means(frames in 1usize..4, seed: u64) {
        let (x, y) = (gop(frames, 16, 16, seed), gop(frames, 16, 16, seed ^ 7));
        let report = QualityReport::evaluate(&x, &y, 0.01, 10.0).unwrap();
        let mean = report.per_frame.iter().map(|q| q.psnr_db).sum::<f64>() / frames as f64;
        prop_assert!((report.psnr_db - mean).abs() <= 1e-12);
        let mean = report.per_frame.iter().map(|q| q.ms_ssim).sum::<f64>() / frames as f64;
        prop_assert!((report.ms_ssim - mean).abs() <= 1e-12);
    }
}

#[test]
fn pipeline_is_deterministic() {
    let model = tiny(4, 2);
    let g = gop(2, 32, 32, 5);
    let budget = BandwidthBudget::from_cbr(0.008, g.dims()).unwrap();
    let channel = ChannelConfig::awgn(3.0, 17);
    let (a, ra) = model.forward_pipeline(&g, &budget, &channel).unwrap();
    let (b, rb) = model.forward_pipeline(&g, &budget, &channel).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}
