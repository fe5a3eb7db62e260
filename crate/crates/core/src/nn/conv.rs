use alloc::string::String;
use alloc::vec;

use rand::Rng;

use super::{join, Module, Param};
use crate::{Scalar, Tensor};

/// Output length of a strided, zero-padded convolution along one axis.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output position `o` and kernel tap `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < len).then_some(v as usize)
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the row, and the
    /// source column of `lo`.
    #[inline]
    fn valid_columns(&self, kx: usize) -> (usize, usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kx).div_ceil(s).min(self.out_w);
        let limit = self.width + self.pad - kx;
        let hi = limit.div_ceil(s).clamp(lo, self.out_w);
        (lo, hi, lo * s + kx - self.pad)
    }
}

/// Unfolds `src` (`[channels, height, width]`) into `[rows, positions]`.
fn im2col<T: Scalar>(src: &[T], g: &Geometry, dst: &mut [T]) {
    let positions = g.positions();
    let (k, s) = (g.kernel, g.stride);
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out = &mut dst[row * positions..(row + 1) * positions];
                let (lo, hi, sx0) = g.valid_columns(kx);
                for oy in 0..g.out_h {
                    let line = &mut out[oy * g.out_w..(oy + 1) * g.out_w];
                    let Some(sy) = g.source(oy, ky, g.height) else {
                        line.fill(T::zero());
                        continue;
                    };
                    let src_row = &plane[sy * g.width..(sy + 1) * g.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src_row[sx0..sx0 + hi - lo]);
                    } else {
                        for (v, &x) in line[lo..hi].iter_mut().zip(src_row[sx0..].iter().step_by(s)) {
                            *v = x;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[rows, positions]` back into `dst`.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dst: &mut [T]) {
    let positions = g.positions();
    let (k, s) = (g.kernel, g.stride);
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let col = &cols[row * positions..(row + 1) * positions];
                let (lo, hi, sx0) = g.valid_columns(kx);
                for oy in 0..g.out_h {
                    let Some(sy) = g.source(oy, ky, g.height) else { continue };
                    let line = &col[oy * g.out_w + lo..oy * g.out_w + hi];
                    let dst_row = &mut plane[sy * g.width + sx0..(sy + 1) * g.width];
                    if s == 1 {
                        for (d, &v) in dst_row[..line.len()].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst_row.iter_mut().step_by(s).zip(line) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(y: &mut Tensor<T>, bias: &[T]) {
    let plane = y.height() * y.width();
    for i in 0..y.batch() {
        for (c, chunk) in y.item_mut(i).chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v + bias[c]);
        }
    }
}

fn accumulate_bias_grad<T: Scalar>(gy: &Tensor<T>, grad: &mut [T]) {
    let plane = gy.height() * gy.width();
    for i in 0..gy.batch() {
        for (c, chunk) in gy.item(i).chunks(plane).enumerate() {
            grad[c] = chunk.iter().fold(grad[c], |acc, &v| acc + v);
        }
    }
}

/// 2-D convolution, weight layout `[out, in, k, k]`, padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// `gain` scales a variance-preserving uniform initialization.
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = gain * libm::sqrt(3.0 / fan_in);
        Self {
            weight: Param::uniform(out_channels * in_channels * kernel * kernel, bound, rng),
            bias: Param::new(vec![T::zero(); out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_hw(&self, height: usize, width: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (conv_output_len(height, self.kernel, self.stride, pad), conv_output_len(width, self.kernel, self.stride, pad))
    }

    fn geometry(&self, height: usize, width: usize) -> Geometry {
        let (out_h, out_w) = self.output_hw(height, width);
        Geometry { channels: self.in_channels, height, width, kernel: self.kernel, stride: self.stride, pad: self.kernel / 2, out_h, out_w }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let g = self.geometry(x.height(), x.width());
        let (rows, positions) = (g.rows(), g.positions());
        let mut y = Tensor::zeros([x.batch(), self.out_channels, g.out_h, g.out_w]);
        let mut cols = vec![T::zero(); rows * positions];
        for i in 0..x.batch() {
            im2col(x.item(i), &g, &mut cols);
            T::gemm(
                self.out_channels,
                rows,
                positions,
                T::one(),
                &self.weight.value,
                (rows as isize, 1),
                &cols,
                (positions as isize, 1),
                T::zero(),
                y.item_mut(i),
                (positions as isize, 1),
            );
        }
        add_bias(&mut y, &self.bias.value);
        y
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("Conv2d::backward without forward_train");
        let g = self.geometry(x.height(), x.width());
        let (rows, positions) = (g.rows(), g.positions());
        let mut gx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); rows * positions];
        let mut gcols = vec![T::zero(); rows * positions];
        for i in 0..x.batch() {
            im2col(x.item(i), &g, &mut cols);
            let gyi = gy.item(i);
            T::gemm(
                self.out_channels,
                positions,
                rows,
                T::one(),
                gyi,
                (positions as isize, 1),
                &cols,
                (1, positions as isize),
                T::one(),
                &mut self.weight.grad,
                (rows as isize, 1),
            );
            T::gemm(
                rows,
                self.out_channels,
                positions,
                T::one(),
                &self.weight.value,
                (1, rows as isize),
                gyi,
                (positions as isize, 1),
                T::zero(),
                &mut gcols,
                (positions as isize, 1),
            );
            col2im(&gcols, &g, gx.item_mut(i));
        }
        accumulate_bias_grad(gy, &mut self.bias.grad);
        gx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution, weight layout `[in, out, k, k]`, padding `k / 2`.
///
/// The output size is passed explicitly so that an up-sampling path can
/// retrace the exact sizes of the matching down-sampling path.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64 / (stride * stride) as f64;
        let bound = gain * libm::sqrt(3.0 / fan_in);
        Self {
            weight: Param::uniform(in_channels * out_channels * kernel * kernel, bound, rng),
            bias: Param::new(vec![T::zero(); out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Natural output length (no extra output padding).
    pub fn default_output_len(&self, len: usize) -> usize {
        ((len - 1) * self.stride + self.kernel).saturating_sub(2 * (self.kernel / 2))
    }

    /// Geometry of the equivalent forward convolution on the output grid.
    fn geometry(&self, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Geometry {
        let pad = self.kernel / 2;
        assert!(
            conv_output_len(out_h, self.kernel, self.stride, pad) == in_h && conv_output_len(out_w, self.kernel, self.stride, pad) == in_w,
            "transposed conv output {out_h}x{out_w} is inconsistent with input {in_h}x{in_w}"
        );
        Geometry {
            channels: self.out_channels,
            height: out_h,
            width: out_w,
            kernel: self.kernel,
            stride: self.stride,
            pad,
            out_h: in_h,
            out_w: in_w,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, out_hw: (usize, usize)) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_channels, "deconv input channels");
        let g = self.geometry(x.height(), x.width(), out_hw.0, out_hw.1);
        let (rows, positions) = (g.rows(), g.positions());
        let mut y = Tensor::zeros([x.batch(), self.out_channels, out_hw.0, out_hw.1]);
        let mut cols = vec![T::zero(); rows * positions];
        for i in 0..x.batch() {
            T::gemm(
                rows,
                self.in_channels,
                positions,
                T::one(),
                &self.weight.value,
                (1, rows as isize),
                x.item(i),
                (positions as isize, 1),
                T::zero(),
                &mut cols,
                (positions as isize, 1),
            );
            col2im(&cols, &g, y.item_mut(i));
        }
        add_bias(&mut y, &self.bias.value);
        y
    }

    pub fn forward_train(&mut self, x: &Tensor<T>, out_hw: (usize, usize)) -> Tensor<T> {
        let y = self.forward(x, out_hw);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("ConvTranspose2d::backward without forward_train");
        let g = self.geometry(x.height(), x.width(), gy.height(), gy.width());
        let (rows, positions) = (g.rows(), g.positions());
        let mut gx = Tensor::zeros(x.shape());
        let mut gcols = vec![T::zero(); rows * positions];
        for i in 0..x.batch() {
            im2col(gy.item(i), &g, &mut gcols);
            T::gemm(
                self.in_channels,
                rows,
                positions,
                T::one(),
                &self.weight.value,
                (rows as isize, 1),
                &gcols,
                (positions as isize, 1),
                T::zero(),
                gx.item_mut(i),
                (positions as isize, 1),
            );
            T::gemm(
                self.in_channels,
                positions,
                rows,
                T::one(),
                x.item(i),
                (positions as isize, 1),
                &gcols,
                (1, positions as isize),
                T::one(),
                &mut self.weight.grad,
                (rows as isize, 1),
            );
        }
        accumulate_bias_grad(gy, &mut self.bias.grad);
        gx
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use alloc::vec::Vec;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &[f64], b: &[f64], out_c: usize, k: usize, s: usize) -> Tensor<f64> {
        let p = (k / 2) as isize;
        let (oh, ow) = (conv_output_len(x.height(), k, s, k / 2), conv_output_len(x.width(), k, s, k / 2));
        let mut y = Tensor::zeros([x.batch(), out_c, oh, ow]);
        let (c_in, h, wd) = (x.channels(), x.height() as isize, x.width() as isize);
        for n in 0..x.batch() {
            for o in 0..out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for c in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = (oy * s + ky) as isize - p;
                                    let sx = (ox * s + kx) as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h || sx >= wd {
                                        continue;
                                    }
                                    let xv = x.item(n)[(c * h as usize + sy as usize) * wd as usize + sx as usize];
                                    acc += w[((o * c_in + c) * k + ky) * k + kx] * xv;
                                }
                            }
                        }
                        y.item_mut(n)[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data: Vec<f64> = (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, h) in &[(3, 1, 7), (3, 2, 8), (5, 2, 9), (3, 2, 1)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, s, 1.0, &mut rng);
            conv.bias.value.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
            let x = random_tensor([2, 3, h, h + 1], &mut rng);
            let y = conv.forward(&x);
            let expect = naive_conv(&x, &conv.weight.value, &conv.bias.value, 4, k, s);
            assert_eq!(y.shape(), expect.shape());
            assert!(y.max_abs_diff(&expect) < 1e-12);
        }
    }

    /// <y, conv(x)> == <deconv(y), x> when both share weights and bias is zero.
    #[test]
    fn deconv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::<f64>::new(3, 4, 3, 2, 1.0, &mut rng);
        let mut deconv = ConvTranspose2d::<f64>::new(4, 3, 3, 2, 1.0, &mut rng);
        deconv.weight.value = conv.weight.value.clone();
        let x = random_tensor([1, 3, 8, 6], &mut rng);
        let cx = conv.forward(&x);
        let y = random_tensor(cx.shape(), &mut rng);
        let dy = deconv.forward(&y, (8, 6));
        let lhs: f64 = y.data().iter().zip(cx.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = dy.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn check_grad(loss: &mut dyn FnMut(&[f64]) -> f64, point: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        for i in 0..point.len() {
            let mut p = point.to_vec();
            p[i] += h;
            let up = loss(&p);
            p[i] -= 2.0 * h;
            let down = loss(&p);
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() <= 1e-6 * (1.0 + numeric.abs()), "coord {i}: numeric {numeric} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1.0, &mut rng);
        let x = random_tensor([2, 2, 5, 4], &mut rng);
        let y = conv.forward_train(&x);
        let r = random_tensor(y.shape(), &mut rng);
        let gx = conv.backward(&r);
        let dot = |y: &Tensor<f64>| y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();

        let c2 = conv.clone();
        check_grad(&mut |p| dot(&c2.forward(&Tensor::from_vec(x.shape(), p.to_vec()).unwrap())), x.data(), gx.data());
        let mut c3 = conv.clone();
        check_grad(
            &mut |p| {
                c3.weight.value = p.to_vec();
                dot(&c3.forward(&x))
            },
            &conv.weight.value,
            &conv.weight.grad,
        );
        let mut c4 = conv.clone();
        check_grad(
            &mut |p| {
                c4.bias.value = p.to_vec();
                dot(&c4.forward(&x))
            },
            &conv.bias.value,
            &conv.bias.grad,
        );
    }

    #[test]
    fn deconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut deconv = ConvTranspose2d::<f64>::new(3, 2, 5, 2, 1.0, &mut rng);
        let x = random_tensor([2, 3, 3, 2], &mut rng);
        let out = (6, 4);
        let y = deconv.forward_train(&x, out);
        let r = random_tensor(y.shape(), &mut rng);
        let gx = deconv.backward(&r);
        let dot = |y: &Tensor<f64>| y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();

        let d2 = deconv.clone();
        check_grad(&mut |p| dot(&d2.forward(&Tensor::from_vec(x.shape(), p.to_vec()).unwrap(), out)), x.data(), gx.data());
        let mut d3 = deconv.clone();
        check_grad(
            &mut |p| {
                d3.weight.value = p.to_vec();
                dot(&d3.forward(&x, out))
            },
            &deconv.weight.value,
            &deconv.weight.grad,
        );
        let mut d4 = deconv.clone();
        check_grad(
            &mut |p| {
                d4.bias.value = p.to_vec();
                dot(&d4.forward(&x, out))
            },
            &deconv.bias.value,
            &deconv.bias.grad,
        );
    }

    #[test]
    fn deconv_retraces_stride_two_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = ConvTranspose2d::<f32>::new(2, 2, 3, 2, 1.0, &mut rng);
        let x = Tensor::zeros([1, 2, 1, 1]);
        assert_eq!(d.forward(&x, (1, 1)).shape(), [1, 2, 1, 1]);
        assert_eq!(d.forward(&x, (2, 2)).shape(), [1, 2, 2, 2]);
        assert_eq!(d.default_output_len(4), 7);
    }
}
