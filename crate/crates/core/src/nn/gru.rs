//! Stacked GRU.
//!
//! Cell convention (gate order reset, update, candidate):
//!
//! ```text
//! r  = σ(W_r x + b_ir + U_r h + b_hr)
//! z  = σ(W_z x + b_iz + U_z h + b_hz)
//! n  = tanh(W_n x + b_in + r ⊙ (U_n h + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```
//!
//! On the tape a layer is one batched input projection followed by a fused
//! scan; [`gru_step`] evaluates a single cell directly from the equations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init_uniform;
use crate::autodiff::kernels::sigmoid;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruStackConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl Default for GruStackConfig {
    fn default() -> Self {
        GruStackConfig {
            input_dim: 160,
            hidden_dim: 160,
            num_layers: 2,
        }
    }
}

/// Borrowed weights of one GRU layer.
#[derive(Debug, Clone, Copy)]
pub struct GruCellWeights<'a, T> {
    /// `3H × D_in`
    pub w_ih: &'a [T],
    /// `3H × H`
    pub w_hh: &'a [T],
    pub b_ih: &'a [T],
    pub b_hh: &'a [T],
    pub input_dim: usize,
    pub hidden: usize,
}

fn affine<T: Real>(w: &[T], b: &[T], x: &[T], row: usize) -> T {
    let n = x.len();
    b[row] + w[row * n..(row + 1) * n].iter().zip(x).map(|(&a, &v)| a * v).sum::<T>()
}

/// One GRU cell update `h' = GRU(x, h)`.
pub fn gru_step<T: Real>(x: &[T], h: &[T], w: &GruCellWeights<'_, T>) -> Vec<T> {
    let hd = w.hidden;
    assert_eq!(x.len(), w.input_dim);
    assert_eq!(h.len(), hd);
    (0..hd)
        .map(|i| {
            let r = sigmoid(affine(w.w_ih, w.b_ih, x, i) + affine(w.w_hh, w.b_hh, h, i));
            let z = sigmoid(affine(w.w_ih, w.b_ih, x, hd + i) + affine(w.w_hh, w.b_hh, h, hd + i));
            let n = (affine(w.w_ih, w.b_ih, x, 2 * hd + i) + r * affine(w.w_hh, w.b_hh, h, 2 * hd + i)).tanh();
            (T::one() - z) * n + z * h[i]
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GruLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(GruLayer {
            w_ih: store.add(format!("{name}.w_ih"), init_uniform(rng, &[3 * hidden, input_dim], hidden)?)?,
            w_hh: store.add(format!("{name}.w_hh"), init_uniform(rng, &[3 * hidden, hidden], hidden)?)?,
            b_ih: store.add(format!("{name}.b_ih"), init_uniform(rng, &[3 * hidden], hidden)?)?,
            b_hh: store.add(format!("{name}.b_hh"), init_uniform(rng, &[3 * hidden], hidden)?)?,
            input_dim,
            hidden,
        })
    }

    pub fn weights<'a, T: Real>(&self, store: &'a ParamStore<T>) -> GruCellWeights<'a, T> {
        GruCellWeights {
            w_ih: store.get(self.w_ih).tensor.data(),
            w_hh: store.get(self.w_hh).tensor.data(),
            b_ih: store.get(self.b_ih).tensor.data(),
            b_hh: store.get(self.b_hh).tensor.data(),
            input_dim: self.input_dim,
            hidden: self.hidden,
        }
    }

    /// Scans the rows of `x: S×D_in` from `h0`; returns all `S×H` states.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, h0: Var) -> Result<Var> {
        let (w_ih, b_ih) = (g.param(self.w_ih), g.param(self.b_ih));
        let gx = g.linear(x, w_ih, Some(b_ih))?;
        let (w_hh, b_hh) = (g.param(self.w_hh), g.param(self.b_hh));
        g.gru_scan(gx, h0, w_hh, b_hh)
    }
}

#[derive(Debug, Clone)]
pub struct GruStack {
    pub layers: Vec<GruLayer>,
    pub config: GruStackConfig,
}

impl GruStack {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        config: GruStackConfig,
    ) -> Result<Self> {
        if config.num_layers == 0 || config.hidden_dim == 0 || config.input_dim == 0 {
            return Err(Error::invalid(format!("GRU dimensions must be positive: {config:?}")));
        }
        let layers = (0..config.num_layers)
            .map(|l| {
                let d_in = if l == 0 { config.input_dim } else { config.hidden_dim };
                GruLayer::new(store, rng, &format!("{name}.layer{l}"), d_in, config.hidden_dim)
            })
            .collect::<Result<_>>()?;
        Ok(GruStack { layers, config })
    }

    /// Runs every layer over the whole sequence (each layer consumes the one
    /// below), starting from the per-layer states `h0`.
    ///
    /// Returns the top-layer outputs `S×H` and each layer's final state `[H]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, h0: &[Var]) -> Result<(Var, Vec<Var>)> {
        if h0.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "GRU stack has {} layers but {} initial states were given",
                self.layers.len(),
                h0.len()
            )));
        }
        let steps = g.shape(x)[0];
        let mut input = x;
        let mut finals = Vec::with_capacity(self.layers.len());
        for (layer, &h) in self.layers.iter().zip(h0) {
            let out = layer.forward(g, input, h)?;
            let last = g.slice(out, 0, steps - 1, steps)?;
            finals.push(g.reshape(last, &[layer.hidden])?);
            input = out;
        }
        Ok((input, finals))
    }
}
