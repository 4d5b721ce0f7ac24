use rand::Rng;

use super::init_uniform;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Fully connected layer `y = x·Wᵀ + b` over the rows of a matrix.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, &[out_dim, in_dim], in_dim)?)?;
        let bias = store.add(format!("{name}.bias"), init_uniform(rng, &[out_dim], in_dim)?)?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])?)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])?)?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, T::lit(self.eps))
    }
}

/// Square-kernel convolution with bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("conv kernel and stride must be ≥ 1"));
        }
        let fan_in = c_in * kernel * kernel;
        Ok(ConvLayer {
            weight: store.add(
                format!("{name}.weight"),
                init_uniform(rng, &[c_out, c_in, kernel, kernel], fan_in)?,
            )?,
            bias: store.add(format!("{name}.bias"), init_uniform(rng, &[c_out], fan_in)?)?,
            stride,
            padding,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, Some(b), self.stride, (self.padding, self.padding))
    }
}
