//! Parameterized building blocks shared by the architectures.
//!
//! Each layer registers its parameters in a [`ParamStore`] under a dotted
//! name prefix at construction, and records its forward pass on a [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// He-uniform bound `sqrt(6 / fan_in)`.
pub(crate) fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let b = he_bound(cin * kernel * kernel);
        let weight =
            store.add(join(prefix, "weight"), Tensor::uniform(&[cout, cin, kernel, kernel], -b, b, rng), true)?;
        let bias = store.add(join(prefix, "bias"), Tensor::zeros(&[cout]), true)?;
        Ok(Conv2d { weight, bias, stride, padding })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Up-convolution with `kernel == stride`, doubling the spatial extent for 2.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // Each output pixel receives cin·k²/stride² contributions.
        let b = he_bound(cin * kernel * kernel / (stride * stride));
        let weight =
            store.add(join(prefix, "weight"), Tensor::uniform(&[cin, cout, kernel, kernel], -b, b, rng), true)?;
        let bias = store.add(join(prefix, "bias"), Tensor::zeros(&[cout]), true)?;
        Ok(ConvTranspose2d { weight, bias, stride })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Weight initialization for [`Linear`].
#[derive(Clone, Copy, Debug)]
pub enum LinearInit {
    HeUniform,
    /// `U(-a, a)`.
    Uniform(f64),
    Zeros,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        din: usize,
        dout: usize,
        init: LinearInit,
        rng: &mut R,
    ) -> Result<Self> {
        let w = match init {
            LinearInit::HeUniform => {
                let b = he_bound(din);
                Tensor::uniform(&[dout, din], -b, b, rng)
            }
            LinearInit::Uniform(a) => Tensor::uniform(&[dout, din], -a, a, rng),
            LinearInit::Zeros => Tensor::zeros(&[dout, din]),
        };
        let weight = store.add(join(prefix, "weight"), w, true)?;
        let bias = store.add(join(prefix, "bias"), Tensor::zeros(&[dout]), true)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(join(prefix, "gamma"), Tensor::ones(&[dim]), true)?,
            beta: store.add(join(prefix, "beta"), Tensor::zeros(&[dim]), true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(join(prefix, "gamma"), Tensor::ones(&[channels]), true)?,
            beta: store.add(join(prefix, "beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(join(prefix, "running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(join(prefix, "running_var"), Tensor::ones(&[channels]), false)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        g.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}
