//! Efficient channel attention: a k-tap 1-D convolution across the pooled
//! channel descriptor, followed by a sigmoid gate per channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init_uniform;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcaConfig {
    pub channels: usize,
    pub kernel_size: usize,
}

impl EcaConfig {
    /// Kernel size derived from the channel count.
    pub fn auto(channels: usize) -> Result<Self> {
        Ok(EcaConfig {
            channels,
            kernel_size: eca_kernel_size(channels)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "ECA needs ≥ 1 channel and an odd kernel, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Nearest odd integer to `log₂(C)/2 + 1/2`.
///
/// When the value lies exactly halfway between two odd integers (it is an
/// even integer, e.g. C = 128) the larger one is taken.
pub fn eca_kernel_size(channels: usize) -> Result<usize> {
    if channels == 0 {
        return Err(Error::invalid("ECA channel count must be ≥ 1"));
    }
    let t = (channels as f64).log2() / 2.0 + 0.5;
    // Odd integers are 2m + 1; round (t − 1)/2 half-up to pick m.
    let m = ((t - 1.0) / 2.0 + 0.5).floor().max(0.0);
    Ok(2 * m as usize + 1)
}

#[derive(Debug, Clone)]
pub struct Eca {
    pub weight: ParamId,
    pub config: EcaConfig,
}

impl Eca {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        config: EcaConfig,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let weight = store.add(format!("{name}.conv.weight"), init_uniform(rng, &[1, 1, 1, k], k)?)?;
        Ok(Eca { weight, config })
    }

    /// Gate vector `a = σ(conv1d(mean_hw(X)))` of length C.
    pub fn gate<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = self.config.channels;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != c {
            return Err(Error::invalid(format!("ECA expects {c}×H×W input, got {shape:?}")));
        }
        let flat = g.reshape(x, &[c, shape[1] * shape[2]])?;
        let pooled = g.mean(flat, 1)?;
        // The channel descriptor is treated as a 1×1×C image; the 1-D kernel is 1×k.
        let row = g.reshape(pooled, &[1, 1, c])?;
        let w = g.param(self.weight);
        let pad = (self.config.kernel_size - 1) / 2;
        let conv = g.conv2d(row, w, None, 1, (0, pad))?;
        let conv = g.reshape(conv, &[c])?;
        Ok(g.sigmoid(conv))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let a = self.gate(g, x)?;
        g.scale_channels(x, a)
    }
}
