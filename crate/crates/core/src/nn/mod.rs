//! Minimal trainable layers with explicit backward passes.
//!
//! Layers cache what their backward pass needs during `forward_train`;
//! `forward` is the cache-free inference path. Parameter gradients
//! accumulate until [`Module::zero_grad`] is called.

mod block;
mod conv;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

pub use block::{DownStage, ResBlock, UpStage};
pub use conv::{conv_output_len, Conv2d, ConvTranspose2d};

use crate::{Scalar, Tensor};

/// A learnable array and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(len: usize, bound: f64, rng: &mut R) -> Self {
        let value = (0..len).map(|_| T::of(if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })).collect();
        Self::new(value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Visits parameters under stable dotted names.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g = T::zero()));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        alloc::format!("{prefix}.{name}")
    }
}

pub(crate) fn relu_in_place<T: Scalar>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes `grad` wherever the post-activation output is not positive.
pub(crate) fn relu_backward<T: Scalar>(grad: &mut Tensor<T>, activated: &Tensor<T>) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
