//! Small parameterized building blocks shared by the model modules.

use alloc::format;
use alloc::string::String;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::gaussian;
use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::math;

/// Fully connected layer `x W + b` over row vectors, `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Gaussian weights with standard deviation `std`, zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Self {
        let w = store.add(format!("{name}.weight"), gaussian(rng, &[fan_in, fan_out], std));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    /// He-style initialization for a layer followed by relu.
    pub fn relu_init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::new(store, rng, name, fan_in, fan_out, math::sqrt(2.0 / fan_in as f64))
    }

    /// Variance-preserving initialization for a linear output.
    pub fn linear_init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::new(store, rng, name, fan_in, fan_out, math::sqrt(1.0 / fan_in as f64))
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add(y, p[self.b])
    }
}

/// Dense 2D convolution with bias, weight `[out, in, k, k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        (c_in, c_out, k): (usize, usize, usize),
        stride: usize,
        std: f64,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), gaussian(rng, &[c_out, c_in, k, k], std));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv2d { w, b, stride, pad: k / 2 }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

/// Parameter group of a dotted parameter name (text before the first dot).
pub fn group_of(name: &str) -> String {
    String::from(name.split('.').next().unwrap_or(name))
}
