use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::{join, relu_backward, relu_in_place, Conv2d, ConvTranspose2d, Module, Param};
use crate::{Scalar, Tensor};

// Second convolution of each residual branch starts small so deep stacks
// begin close to the identity.
const RESIDUAL_BRANCH_GAIN: f64 = 0.1;
const RELU_GAIN: f64 = core::f64::consts::SQRT_2;

/// `x + conv(relu(conv(x)))` with channel-preserving 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    hidden: Option<Tensor<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(channels, channels, 3, 1, RELU_GAIN, rng),
            conv2: Conv2d::new(channels, channels, 3, 1, RESIDUAL_BRANCH_GAIN, rng),
            hidden: None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = self.conv1.forward(x);
        relu_in_place(&mut h);
        let mut y = self.conv2.forward(&h);
        y.add_assign(x);
        y
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = self.conv1.forward_train(x);
        relu_in_place(&mut h);
        let mut y = self.conv2.forward_train(&h);
        self.hidden = Some(h);
        y.add_assign(x);
        y
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Tensor<T> {
        let h = self.hidden.take().expect("ResBlock::backward without forward_train");
        let mut gh = self.conv2.backward(gy);
        relu_backward(&mut gh, &h);
        let mut gx = self.conv1.backward(&gh);
        gx.add_assign(gy);
        gx
    }
}

impl<T: Scalar> Module<T> for ResBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

fn resblocks<T: Scalar, R: Rng + ?Sized>(channels: usize, depth: usize, rng: &mut R) -> Vec<ResBlock<T>> {
    (0..depth).map(|_| ResBlock::new(channels, rng)).collect()
}

/// Strided convolution followed by a stack of residual blocks.
#[derive(Clone, Debug)]
pub struct DownStage<T> {
    conv: Conv2d<T>,
    blocks: Vec<ResBlock<T>>,
}

impl<T: Scalar> DownStage<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, depth: usize, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(in_channels, out_channels, kernel, 2, 1.0, rng), blocks: resblocks(out_channels, depth, rng) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.blocks.iter().fold(self.conv.forward(x), |h, b| b.forward(&h))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.conv.forward_train(x);
        self.blocks.iter_mut().fold(h, |h, b| b.forward_train(&h))
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Tensor<T> {
        let g = self.blocks.iter_mut().rev().fold(gy.clone(), |g, b| b.backward(&g));
        self.conv.backward(&g)
    }
}

impl<T: Scalar> Module<T> for DownStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("res{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("res{i}")), f);
        }
    }
}

/// Strided transposed convolution followed by a stack of residual blocks.
#[derive(Clone, Debug)]
pub struct UpStage<T> {
    deconv: ConvTranspose2d<T>,
    blocks: Vec<ResBlock<T>>,
}

impl<T: Scalar> UpStage<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, depth: usize, rng: &mut R) -> Self {
        Self { deconv: ConvTranspose2d::new(in_channels, out_channels, kernel, 2, 1.0, rng), blocks: resblocks(out_channels, depth, rng) }
    }

    pub fn forward(&self, x: &Tensor<T>, out_hw: (usize, usize)) -> Tensor<T> {
        self.blocks.iter().fold(self.deconv.forward(x, out_hw), |h, b| b.forward(&h))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>, out_hw: (usize, usize)) -> Tensor<T> {
        let h = self.deconv.forward_train(x, out_hw);
        self.blocks.iter_mut().fold(h, |h, b| b.forward_train(&h))
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Tensor<T> {
        let g = self.blocks.iter_mut().rev().fold(gy.clone(), |g, b| b.backward(&g));
        self.deconv.backward(&g)
    }
}

impl<T: Scalar> Module<T> for UpStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.deconv.visit(&join(prefix, "deconv"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("res{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.deconv.visit_mut(&join(prefix, "deconv"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("res{i}")), f);
        }
    }
}
