//! Explicit-length variable-length coding.
//!
//! Elements of the common and individual maps are ranked jointly; exactly
//! as many as the budget allows are kept. Because the ranking scores come
//! from the quantized side information alone, the receiver rebuilds the same
//! mask without any index list being transmitted.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::entropy::{gaussian_entropy_bits, SideInfo};
use crate::types::{FeatureDecomposition, SymbolStream};
use crate::{channel, Error, Result, Scalar, Tensor};

/// Which elements of a decomposition are transmitted, in stream order
/// (individual maps, then the common map).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeepMask {
    keep: Vec<bool>,
    kept_count: usize,
    map_len: usize,
}

impl KeepMask {
    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    pub fn maps(&self) -> usize {
        self.keep.len() / self.map_len.max(1)
    }

    pub fn map_len(&self) -> usize {
        self.map_len
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn map(&self, i: usize) -> &[bool] {
        &self.keep[i * self.map_len..(i + 1) * self.map_len]
    }

    /// Kept elements per map, i.e. the analog part of each `k_n`.
    pub fn counts(&self) -> Vec<usize> {
        self.keep.chunks(self.map_len.max(1)).map(|m| m.iter().filter(|&&k| k).count()).collect()
    }
}

/// Ranking scores derived from predicted scales: the differential entropy of
/// each element's Gaussian.
pub fn ranking_scores<T: Scalar>(sigma: &Tensor<T>) -> Vec<f64> {
    sigma.data().iter().map(|s| gaussian_entropy_bits(s.as_f64())).collect()
}

/// Keeps the `budget` highest-scoring elements; equal scores are broken by
/// ascending flat index.
pub fn build_mask(scores: &[f64], map_len: usize, budget: usize) -> Result<KeepMask> {
    if map_len == 0 || scores.len() % map_len != 0 {
        return Err(Error::Shape(format!("{} scores do not split into maps of {map_len}", scores.len())));
    }
    if budget > scores.len() {
        return Err(Error::BudgetTooLarge { requested: budget, available: scores.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let rank = |a: &usize, b: &usize| -> Ordering { scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)) };
    if budget > 0 && budget < order.len() {
        order.select_nth_unstable_by(budget - 1, rank);
    }
    let mut keep = vec![false; scores.len()];
    for &i in &order[..budget] {
        keep[i] = true;
    }
    Ok(KeepMask { keep, kept_count: budget, map_len })
}

/// Serializes the kept elements.
///
/// Vector `n < N` holds the kept elements of individual map `n`; vector `N`
/// holds the hyper code, one RMS gain per vector, then the kept common
/// elements. Elements appear in ascending flat-index order within each map.
pub fn pack(decomp: &FeatureDecomposition<f32>, mask: &KeepMask, side: &SideInfo) -> Result<SymbolStream> {
    let maps = decomp.frames() + 1;
    if mask.map_len != decomp.map_len() || mask.maps() != maps {
        return Err(Error::Shape(format!(
            "mask of {} maps x {} does not match decomposition of {maps} maps x {}",
            mask.maps(),
            mask.map_len,
            decomp.map_len()
        )));
    }
    if side.hyper_shape[0] != maps {
        return Err(Error::Shape(format!("side information describes {} maps, expected {maps}", side.hyper_shape[0])));
    }
    let payloads: Vec<Vec<f32>> =
        (0..maps).map(|i| decomp.map(i).iter().zip(mask.map(i)).filter(|(_, &k)| k).map(|(&w, _)| w).collect()).collect();
    let gains: Vec<f32> = payloads.iter().map(|p| channel::rms(p)).collect();
    let mut vectors = payloads;
    let common = vectors.pop().expect("at least one map");
    let mut last = Vec::with_capacity(side.cost_symbols() + common.len());
    last.extend(side.hyper_code.iter().map(|&q| q as f32));
    last.extend_from_slice(&gains);
    last.extend(common);
    vectors.push(last);
    SymbolStream::new(vectors, side.cost_symbols())
}

/// Reads the hyper code and the per-vector gains back out of a stream.
pub fn read_side_info(stream: &SymbolStream, hyper_shape: [usize; 4]) -> Result<(SideInfo, Vec<f32>)> {
    let hyper_len: usize = hyper_shape.iter().product();
    let maps = hyper_shape[0];
    if stream.vectors.len() != maps || stream.side_len != hyper_len + maps {
        return Err(Error::Framing(format!(
            "stream of {} vectors with {} side symbols does not carry a {hyper_shape:?} hyper code",
            stream.vectors.len(),
            stream.side_len
        )));
    }
    let side = stream.side();
    let mut hyper_code = Vec::with_capacity(hyper_len);
    for &v in &side[..hyper_len] {
        if v.fract() != 0.0 || !v.is_finite() {
            return Err(Error::Framing(format!("hyper code symbol {v} is not an integer")));
        }
        hyper_code.push(v as i32);
    }
    Ok((SideInfo { hyper_code, hyper_shape }, side[hyper_len..].to_vec()))
}

/// Scatters received symbols back to their kept positions; dropped
/// positions are filled with 0, the prior mean.
pub fn unpack(stream: &SymbolStream, mask: &KeepMask, shape: [usize; 4]) -> Result<FeatureDecomposition<f32>> {
    let [frames, c, h, w] = shape;
    let maps = frames + 1;
    if mask.maps() != maps || mask.map_len != c * h * w {
        return Err(Error::Shape(format!("mask does not describe {maps} maps of {c}x{h}x{w}")));
    }
    if stream.vectors.len() != maps {
        return Err(Error::Framing(format!("expected {maps} vectors, got {}", stream.vectors.len())));
    }
    let mut out = FeatureDecomposition::zeros(frames, c, h, w);
    for (i, count) in mask.counts().into_iter().enumerate() {
        let payload = stream.payload(i);
        if payload.len() != count {
            return Err(Error::Framing(format!("vector {i} carries {} symbols, mask keeps {count}", payload.len())));
        }
        let mut values = payload.iter();
        for (dst, &k) in out.map_mut(i).iter_mut().zip(mask.map(i)) {
            if k {
                *dst = *values.next().expect("length checked");
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn side_for(maps: usize) -> SideInfo {
        SideInfo { hyper_code: vec![], hyper_shape: [maps, 0, 0, 0] }
    }

    /// Sort-everything oracle for the top-k rule.
    fn oracle_mask(scores: &[f64], budget: usize) -> Vec<bool> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut keep = vec![false; scores.len()];
        idx.iter().take(budget).for_each(|&i| keep[i] = true);
        keep
    }

    #[test]
    fn mask_examples() {
        let m = build_mask(&[3.0, 1.0, 2.0, 2.0], 2, 2).unwrap();
        assert_eq!(m.as_slice(), &[true, false, true, false]);
        assert_eq!(m.counts(), vec![1, 1]);
        assert!(build_mask(&[1.0; 4], 4, 4).unwrap().as_slice().iter().all(|&k| k));
        assert!(build_mask(&[1.0; 4], 4, 0).unwrap().as_slice().iter().all(|&k| !k));
        assert_eq!(build_mask(&[1.0; 4], 4, 5), Err(Error::BudgetTooLarge { requested: 5, available: 4 }));
        assert!(build_mask(&[1.0; 5], 4, 1).is_err());
    }

    #[test]
    fn toy_pack_and_unpack() {
        let d = FeatureDecomposition::new(
            Tensor::from_vec([1, 1, 2, 2], vec![5.0f32, 6.0, 7.0, 8.0]).unwrap(),
            Tensor::from_vec([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let mask = build_mask(&[9.0, 0.0, 8.0, 0.0, 0.0, 0.0, 0.0, 0.0], 4, 2).unwrap();
        let stream = pack(&d, &mask, &side_for(2)).unwrap();
        assert_eq!(stream.vectors[0], vec![1.0, 3.0]);
        assert_eq!(stream.payload(1), &[] as &[f32]);
        assert_eq!(stream.lengths(), vec![2, 2]);
        assert_eq!(stream.side_len, 2);
        let back = unpack(&stream, &mask, [1, 1, 2, 2]).unwrap();
        assert_eq!(back.individual.data(), &[1.0, 0.0, 3.0, 0.0]);
        assert_eq!(back.common.data(), &[0.0; 4]);
    }

    #[test]
    fn full_mask_packs_everything() {
        let d = FeatureDecomposition::new(
            Tensor::from_vec([1, 2, 1, 1], vec![-1.0f32, 1.0]).unwrap(),
            Tensor::from_vec([2, 2, 1, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let side = SideInfo { hyper_shape: [3, 2, 1, 1], hyper_code: vec![4, -2, 0, 1, 1, 3] };
        let mask = build_mask(&[0.0; 6], 2, 6).unwrap();
        let stream = pack(&d, &mask, &side).unwrap();
        assert_eq!(stream.lengths(), vec![2, 2, 6 + 3 + 2]);
        assert_eq!(stream.payload(2), &[-1.0, 1.0]);
        let (side_back, gains) = read_side_info(&stream, [3, 2, 1, 1]).unwrap();
        assert_eq!(side_back, side);
        assert_eq!(gains, vec![channel::rms(&[1.0f32, 2.0]), channel::rms(&[3.0f32, 4.0]), 1.0]);
        assert_eq!(unpack(&stream, &mask, [2, 2, 1, 1]).unwrap(), d);
        assert!(read_side_info(&stream, [3, 1, 1, 1]).is_err());
    }

    #[test]
    fn unpack_rejects_bad_framing() {
        let mask = build_mask(&[1.0, 0.0, 0.0, 0.0], 2, 1).unwrap();
        let stream = SymbolStream::new(vec![vec![], vec![0.0, 0.0]], 2).unwrap();
        assert!(matches!(unpack(&stream, &mask, [1, 1, 1, 2]), Err(Error::Framing(_))));
        let short = SymbolStream::new(vec![vec![0.0, 0.0]], 2).unwrap();
        assert!(matches!(unpack(&short, &mask, [1, 1, 1, 2]), Err(Error::Framing(_))));
    }

    proptest! {
        #[test]
        fn mask_matches_sort_oracle(
            scores in proptest::collection::vec(prop_oneof![Just(0.5f64), Just(1.0), -3.0f64..3.0], 1..60),
            frac in 0.0f64..=1.0,
        ) {
            let budget = (frac * scores.len() as f64) as usize;
            let m = build_mask(&scores, 1, budget).unwrap();
            let expect = oracle_mask(&scores, budget);
            prop_assert_eq!(m.as_slice(), expect.as_slice());
            prop_assert_eq!(m.as_slice().iter().filter(|&&k| k).count(), budget);
        }
    }
}
