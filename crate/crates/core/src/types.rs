//! Domain vocabulary: GOPs, feature decompositions, symbol streams and
//! bandwidth accounting.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result, Scalar, Tensor};

/// Net down-sampling factor between a frame and its semantic feature map.
pub const SPATIAL_FACTOR: usize = 16;

/// Colour channels per frame.
pub const FRAME_CHANNELS: usize = 3;

/// Semantic feature maps, `[frames, channels, height / 16, width / 16]`.
pub type FeatureTensor<T = f32> = Tensor<T>;

/// Frame count and spatial size of a GOP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GopDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl GopDims {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width }
    }

    /// Source dimension of one frame (`3 * H * W`).
    pub fn frame_dim(&self) -> usize {
        FRAME_CHANNELS * self.height * self.width
    }

    /// Source dimension of the whole GOP.
    pub fn source_dim(&self) -> usize {
        self.frames * self.frame_dim()
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        (self.height / SPATIAL_FACTOR, self.width / SPATIAL_FACTOR)
    }

    fn check_nonzero(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(format!("zero-sized GOP {self:?}")));
        }
        Ok(())
    }
}

/// A group of pictures: `[N, 3, H, W]` intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoGop {
    frames: Tensor<f32>,
}

impl VideoGop {
    /// Validates raw frame data.
    ///
    /// `shape` must be `[N, 3, H, W]` with `N >= 1` and `H`, `W` multiples
    /// of 16; every value must lie in `[0, 1]`.
    pub fn validate(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let shape: [usize; 4] =
            shape.try_into().map_err(|_| Error::Shape(format!("expected a 4-D array, got {} dimensions", shape.len())))?;
        let [n, c, h, w] = shape;
        if n == 0 {
            return Err(Error::Shape("a GOP needs at least one frame".into()));
        }
        if c != FRAME_CHANNELS {
            return Err(Error::Shape(format!("expected {FRAME_CHANNELS} colour channels, got {c}")));
        }
        if h == 0 || w == 0 || h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 {
            return Err(Error::Shape(format!("frame size {h}x{w} is not a non-zero multiple of {SPATIAL_FACTOR}")));
        }
        let frames = Tensor::from_vec(shape, data)?;
        if let Some((index, &value)) = frames.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range { index, value: value as f64 });
        }
        Ok(Self { frames })
    }

    pub fn from_tensor(frames: Tensor<f32>) -> Result<Self> {
        let shape = frames.shape();
        Self::validate(&shape, frames.into_vec())
    }

    /// Builds a GOP from network output, hard-clipping to `[0, 1]`.
    pub fn from_clipped(frames: Tensor<f32>) -> Result<Self> {
        Self::from_tensor(frames.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn dims(&self) -> GopDims {
        let [n, _, h, w] = self.frames.shape();
        GopDims::new(n, h, w)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.batch()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.frames
    }

    /// One frame as `[3, H, W]`.
    pub fn frame(&self, i: usize) -> &[f32] {
        self.frames.item(i)
    }
}

/// One common feature map for the GOP plus one residual map per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDecomposition<T = f32> {
    /// `[1, C, h, w]`
    pub common: Tensor<T>,
    /// `[N, C, h, w]`
    pub individual: Tensor<T>,
}

impl<T: Scalar> FeatureDecomposition<T> {
    pub fn new(common: Tensor<T>, individual: Tensor<T>) -> Result<Self> {
        let [one, c, h, w] = common.shape();
        let [_, ci, hi, wi] = individual.shape();
        if one != 1 || (c, h, w) != (ci, hi, wi) {
            return Err(Error::Shape(format!("common {:?} does not match individual {:?}", common.shape(), individual.shape())));
        }
        Ok(Self { common, individual })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { common: Tensor::zeros([1, channels, height, width]), individual: Tensor::zeros([frames, channels, height, width]) }
    }

    pub fn frames(&self) -> usize {
        self.individual.batch()
    }

    /// Elements in one map.
    pub fn map_len(&self) -> usize {
        self.common.len()
    }

    /// Elements across the common map and all individual maps.
    pub fn total_len(&self) -> usize {
        self.common.len() + self.individual.len()
    }

    /// Map `i` in stream order: individual maps `0..N`, then the common map.
    pub fn map(&self, i: usize) -> &[T] {
        if i < self.frames() {
            self.individual.item(i)
        } else {
            self.common.data()
        }
    }

    pub fn map_mut(&mut self, i: usize) -> &mut [T] {
        if i < self.frames() {
            self.individual.item_mut(i)
        } else {
            self.common.data_mut()
        }
    }

    /// Stacks the maps in stream order as `[N + 1, C, h, w]`.
    pub fn stacked(&self) -> Tensor<T> {
        let [_, c, h, w] = self.common.shape();
        let mut data = Vec::with_capacity(self.total_len());
        data.extend_from_slice(self.individual.data());
        data.extend_from_slice(self.common.data());
        Tensor::from_vec([self.frames() + 1, c, h, w], data).expect("consistent shapes")
    }

    pub fn from_stacked(stacked: &Tensor<T>) -> Result<Self> {
        let [m, c, h, w] = stacked.shape();
        if m < 2 {
            return Err(Error::Shape("stacked decomposition needs at least two maps".into()));
        }
        let individual = stacked.select(&(0..m - 1).collect::<Vec<_>>());
        let common = stacked.select(&[m - 1]);
        debug_assert_eq!(common.shape(), [1, c, h, w]);
        Self::new(common, individual)
    }

    /// Adds the common map to every individual map.
    pub fn recombine(&self) -> Result<Tensor<T>> {
        let [one, c, h, w] = self.common.shape();
        let [_, ci, hi, wi] = self.individual.shape();
        if one != 1 || (c, h, w) != (ci, hi, wi) {
            return Err(Error::Shape(format!(
                "cannot recombine common {:?} with individual {:?}",
                self.common.shape(),
                self.individual.shape()
            )));
        }
        let mut out = self.individual.clone();
        for i in 0..out.batch() {
            for (o, &c) in out.item_mut(i).iter_mut().zip(self.common.data()) {
                *o = *o + c;
            }
        }
        Ok(out)
    }
}

/// Channel-input symbols for one GOP.
///
/// `vectors[0..N]` carry the kept individual elements of each frame;
/// `vectors[N]` starts with `side_len` side-information symbols (delivered
/// error-free) followed by the kept common elements.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolStream {
    pub vectors: Vec<Vec<f32>>,
    pub side_len: usize,
}

impl SymbolStream {
    pub fn new(vectors: Vec<Vec<f32>>, side_len: usize) -> Result<Self> {
        match vectors.last() {
            Some(last) if last.len() >= side_len => Ok(Self { vectors, side_len }),
            Some(_) => Err(Error::Framing("side information longer than the last vector".into())),
            None => Err(Error::Framing("a stream needs at least one vector".into())),
        }
    }

    /// Symbol count `k_n` of every vector.
    pub fn lengths(&self) -> Vec<usize> {
        self.vectors.iter().map(Vec::len).collect()
    }

    pub fn total_symbols(&self) -> usize {
        self.vectors.iter().map(Vec::len).sum()
    }

    /// Symbols that travel over the analog channel.
    pub fn analog_symbols(&self) -> usize {
        self.total_symbols() - self.side_len
    }

    pub fn side(&self) -> &[f32] {
        &self.vectors.last().expect("non-empty stream")[..self.side_len]
    }

    /// Analog payload of vector `n`.
    pub fn payload(&self, n: usize) -> &[f32] {
        let v = &self.vectors[n];
        if n + 1 == self.vectors.len() {
            &v[self.side_len..]
        } else {
            v
        }
    }

    pub fn payload_mut(&mut self, n: usize) -> &mut [f32] {
        let last = n + 1 == self.vectors.len();
        let side_len = self.side_len;
        let v = &mut self.vectors[n];
        if last {
            &mut v[side_len..]
        } else {
            v
        }
    }
}

/// Channel bandwidth ratio: transmitted symbols over the GOP's source
/// dimension `N * 3 * H * W`.
pub fn compute_cbr(stream: &SymbolStream, dims: GopDims) -> Result<f64> {
    cbr_of(stream.total_symbols(), dims)
}

pub fn cbr_of(symbols: usize, dims: GopDims) -> Result<f64> {
    dims.check_nonzero()?;
    Ok(symbols as f64 / dims.source_dim() as f64)
}

/// A symbol budget derived from a target channel bandwidth ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandwidthBudget {
    pub target_cbr: f64,
    pub total_symbols: usize,
    pub dims: GopDims,
}

impl BandwidthBudget {
    /// `total_symbols = floor(target_cbr * N * 3 * H * W)`.
    ///
    /// A relative slack of 1e-9 absorbs decimal representation error: a CBR
    /// of 0.175 over 3 x 3 x 16 x 80 samples is 2016 symbols, although the
    /// floating-point product is 2015.9999999999998.
    pub fn from_cbr(target_cbr: f64, dims: GopDims) -> Result<Self> {
        dims.check_nonzero()?;
        if !(target_cbr.is_finite() && target_cbr > 0.0) {
            return Err(Error::InvalidArgument(format!("target CBR must be positive, got {target_cbr}")));
        }
        let exact = target_cbr * dims.source_dim() as f64;
        let total_symbols = libm::floor(exact * (1.0 + 1e-9)) as usize;
        Ok(Self { target_cbr, total_symbols, dims })
    }

    pub fn achieved_cbr(&self) -> f64 {
        self.total_symbols as f64 / self.dims.source_dim() as f64
    }
}
