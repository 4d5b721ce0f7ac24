//! Multi-head self-attention, pre-norm transformer blocks and the spatial
//! self-attention module with a learnable positional encoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_normal, LayerNorm, Linear};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamConfig {
    pub seq_len: usize,
    pub dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            seq_len: 64,
            dim: 160,
            num_blocks: 3,
            num_heads: 8,
            ffn_hidden: 640,
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.dim == 0 || self.num_heads == 0 || self.ffn_hidden == 0 {
            return Err(Error::invalid(format!("attention dimensions must be positive: {self:?}")));
        }
        if !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "model width {} is not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim)?,
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim)?,
            dim,
            heads,
        })
    }

    /// Returns the `S×D` output and the per-head `S×S` attention matrices.
    pub fn forward_with_weights<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::invalid(format!("attention expects S×{} input, got {shape:?}", self.dim)));
        }
        let dh = self.dim / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(g, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice(qkv, 1, h * dh, (h + 1) * dh)?;
            let k = g.slice(qkv, 1, self.dim + h * dh, self.dim + (h + 1) * dh)?;
            let v = g.slice(qkv, 1, 2 * self.dim + h * dh, 2 * self.dim + (h + 1) * dh)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            outs.push(g.matmul(attn, v)?);
            weights.push(attn);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        Ok((self.out.forward(g, merged)?, weights))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, x)?.0)
    }
}

/// Pre-norm residual block: `y₁ = y + MHSA(LN(y))`, `y₂ = y₁ + FFN(LN(y₁))`
/// with a swish FFN.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), dim, ffn_hidden)?,
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), ffn_hidden, dim)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, y: Var) -> Result<Var> {
        let n1 = self.norm1.forward(g, y)?;
        let a = self.attn.forward(g, n1)?;
        let y1 = g.add(y, a)?;
        let n2 = self.norm2.forward(g, y1)?;
        let h = self.ff1.forward(g, n2)?;
        let h = g.swish(h);
        let f = self.ff2.forward(g, h)?;
        g.add(y1, f)
    }
}

/// Learnable positional encoding followed by a stack of transformer blocks.
#[derive(Debug, Clone)]
pub struct SelfAttentionModule {
    pub positional: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub config: SamConfig,
}

impl SelfAttentionModule {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        config: SamConfig,
    ) -> Result<Self> {
        config.validate()?;
        let positional = store.add(
            format!("{name}.positional"),
            init_normal(rng, &[config.seq_len, config.dim], 0.02)?,
        )?;
        let blocks = (0..config.num_blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    rng,
                    &format!("{name}.block{i}"),
                    config.dim,
                    config.num_heads,
                    config.ffn_hidden,
                )
            })
            .collect::<Result<_>>()?;
        Ok(SelfAttentionModule {
            positional,
            blocks,
            config,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let pos = g.param(self.positional);
        let mut y = g.add(patches, pos)?;
        for block in &self.blocks {
            y = block.forward(g, y)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{grad_check, GradCheckConfig};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(seed: u64, s: usize, d: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[s, d], |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MultiHeadAttention::new(&mut store, &mut rng, "a", 10, 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 4, 2).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(random_input(2, 1, 4));
        let (y, w) = mha.forward_with_weights(&mut g, x).unwrap();
        for a in &w {
            assert_eq!(g.value(*a).data(), &[1.0]);
        }
        // Output is the output projection of V.
        let qkv = mha.qkv.forward(&mut g, x).unwrap();
        let v = g.slice(qkv, 1, 8, 12).unwrap();
        let expect = mha.out.forward(&mut g, v).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(expect)).unwrap() < 1e-15);
    }

    #[test]
    fn hand_evaluated_two_token_attention() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 2, 1).unwrap();
        // Q = X, K = 2X, V = X + [1, 0]; output projection = swap columns.
        let qkv_w = vec![1., 0., 0., 1., 2., 0., 0., 2., 1., 0., 0., 1.];
        store.get_mut(mha.qkv.weight).tensor = Tensor::new(&[6, 2], qkv_w).unwrap();
        store.get_mut(mha.qkv.bias).tensor = Tensor::new(&[6], vec![0., 0., 0., 0., 1., 0.]).unwrap();
        store.get_mut(mha.out.weight).tensor = Tensor::new(&[2, 2], vec![0., 1., 1., 0.]).unwrap();
        store.get_mut(mha.out.bias).tensor = Tensor::zeros(&[2]).unwrap();
        let x = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let y = mha.forward(&mut g, xv).unwrap();
        // scores = Q·Kᵀ/√2 = 2I/√2 = √2·I; softmax rows: [e^√2, 1]/(e^√2 + 1).
        let p = std::f64::consts::SQRT_2.exp() / (std::f64::consts::SQRT_2.exp() + 1.0);
        let v = [[2.0, 0.0], [1.0, 1.0]];
        let o = [
            [p * v[0][0] + (1.0 - p) * v[1][0], p * v[0][1] + (1.0 - p) * v[1][1]],
            [(1.0 - p) * v[0][0] + p * v[1][0], (1.0 - p) * v[0][1] + p * v[1][1]],
        ];
        let expect = [o[0][1], o[0][0], o[1][1], o[1][0]];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_equivariant() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, d) = (6, 8);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", d, 4).unwrap();
        let x = random_input(9, s, d);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = Tensor::from_fn(&[s, d], |i| x.data()[perm[i / d] * d + i % d]).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let (y, w) = mha.forward_with_weights(&mut g, xv).unwrap();
        for a in w {
            assert_eq!(g.shape(a), &[s, s]);
            for row in g.value(a).data().chunks(s) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let xpv = g.constant(xp);
        let yp = mha.forward(&mut g, xpv).unwrap();
        for i in 0..s {
            for j in 0..d {
                let a = g.value(yp).data()[i * d + j];
                let b = g.value(y).data()[perm[i] * d + j];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_block_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = TransformerBlock::new(&mut store, &mut rng, "b", 8, 2, 32).unwrap();
        for p in store.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let x = random_input(3, 5, 8);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let block = TransformerBlock::new(&mut store, &mut rng, "b", 4, 2, 6).unwrap();
            let x = random_input(seed + 100, 3, 4);
            let r = random_input(seed + 200, 3, 4);
            let report = grad_check(
                &mut store,
                |g| {
                    let xv = g.constant(x.clone());
                    let y = block.forward(g, xv)?;
                    let rv = g.constant(r.clone());
                    let p = g.mul(y, rv)?;
                    Ok(g.sum(p))
                },
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.max_rel_err() < 1e-4, "seed {seed}: {:?}", report.worst());
        }
    }
}
