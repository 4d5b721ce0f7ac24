//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes are
//! appended in creation order, so walking the tape backwards is a valid
//! topological traversal. [`Graph::backward`] returns gradients for every
//! parameter touched by the pass; callers fold them into the
//! [`ParamStore`] accumulators.

mod gaze_ops;
pub mod gradcheck;
pub(crate) mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Layout, Real, Tensor};

pub use gaze_ops::ScreenProjection;
use kernels::{ConvGeom, GruSaved};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Operation families, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    Add,
    Sub,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Swish,
    MatMul,
    Linear,
    Conv2d,
    Softmax,
    LayerNorm,
    Mean,
    Sum,
    Concat,
    Slice,
    HFlip,
    Reshape,
    Transpose,
    ScaleChannels,
    GruScan,
    AnglesToVector,
    AngularError,
    PogError,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    HFlip(Var),
    Reshape(Var),
    Transpose(Var),
    ScaleChannels {
        x: Var,
        a: Var,
    },
    GruScan {
        gx: Var,
        h0: Var,
        w_hh: Var,
        b_hh: Var,
        saved: GruSaved<T>,
    },
    AnglesToVector(Var),
    AngularError {
        v: Var,
        target: Vec<T>,
        cos: Vec<T>,
        norm: Vec<T>,
        eps: T,
    },
    PogError {
        v: Var,
        origins: Vec<T>,
        saved: gaze_ops::PogSaved<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Swish(_) => OpKind::Swish,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::HFlip(_) => OpKind::HFlip,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Transpose(_) => OpKind::Transpose,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::GruScan { .. } => OpKind::GruScan,
            Op::AnglesToVector(_) => OpKind::AnglesToVector,
            Op::AngularError { .. } => OpKind::AngularError,
            Op::PogError { .. } => OpKind::PogError,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Backward<T> {
    pub params: Gradients<T>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Backward<T> {
    /// Gradient of a leaf created with [`Graph::input`], if any flowed into it.
    pub fn input_grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }
}

/// Append-only tape of tensor operations over a borrowed parameter store.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    fault: Option<OpKind>,
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn matrix_dims<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::invalid(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            fault: None,
        }
    }

    /// Scales the incoming gradient of every op of `kind` by 1.25 during
    /// backward. Used to confirm that gradient checks catch broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let v = self.push(p.tensor.clone(), Op::Param(id), p.trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Constant leaf; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Backward::input_grad`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    /// `x·σ(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * kernels::sigmoid(x));
        let rg = self.rg(a);
        self.push(t, Op::Swish(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul lhs")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::invalid(format!("matmul: inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `x·wᵀ + b` for `x: n×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d_in) = matrix_dims(self.value(x), "linear input")?;
        let (d_out, d_in2) = matrix_dims(self.value(w), "linear weight")?;
        if d_in != d_in2 {
            return Err(Error::invalid(format!(
                "linear: input width {d_in} vs weight width {d_in2}"
            )));
        }
        let mut out = vec![T::zero(); n * d_out];
        let mut beta = T::zero();
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [d_out] {
                return Err(Error::invalid(format!("linear: bias shape {:?}, expected [{d_out}]", bv.shape())));
            }
            for row in out.chunks_exact_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
            beta = T::one();
        }
        gemm(n, d_in, d_out, T::one(), self.value(x).data(), Layout::Normal, self.value(w).data(), Layout::Transposed, beta, &mut out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(vec![n, d_out], out), Op::Linear { x, w, b }, rg))
    }

    /// Zero-padded 2-D convolution of a single `C×H×W` image with a
    /// `C_out×C×kh×kw` kernel. `padding` is `(rows, cols)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Var> {
        let (c_in, h, wd) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::invalid(format!("conv2d: input must be C×H×W, got {s:?}"))),
        };
        let (c_out, c_w, kh, kw) = match self.shape(w) {
            &[o, c, kh, kw] => (o, c, kh, kw),
            s => return Err(Error::invalid(format!("conv2d: weight must be O×C×kh×kw, got {s:?}"))),
        };
        if c_in != c_w {
            return Err(Error::invalid(format!(
                "conv2d: input has {c_in} channels, weight expects {c_w}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be ≥ 1"));
        }
        if h + 2 * padding.0 < kh || wd + 2 * padding.1 < kw {
            return Err(Error::invalid(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * padding.0,
                wd + 2 * padding.1
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::invalid(format!("conv2d: bias shape {:?}, expected [{c_out}]", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad_h: padding.0,
            pad_w: padding.1,
            h_out: (h + 2 * padding.0 - kh) / stride + 1,
            w_out: (wd + 2 * padding.1 - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().unwrap();
        let out = kernels::softmax_rows(self.value(a).data(), n);
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Normalizes each last-axis slice with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::invalid(format!(
                "layer_norm: gamma/beta must be [{d}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("layer_norm: eps must be positive"));
        }
        let (out, xhat, inv_std) = kernels::layer_norm_rows(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Mean over `axis`, which is removed from the shape (a rank-1 input gives `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("mean: axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let inv = T::one() / T::from_usize(len).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..][..inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::Mean { x, axis }, rg))
    }

    /// Sum of all entries as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::invalid(format!(
                    "concat: incompatible shapes {base:?} and {s:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::invalid(format!(
                "slice: range {start}..{end} on axis {axis} invalid for {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::Slice { x, axis, start }, rg))
    }

    /// Mirror along the last (width) axis.
    pub fn hflip(&mut self, x: Var) -> Var {
        let t = self.value(x).hflip();
        let rg = self.rg(x);
        self.push(t, Op::HFlip(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2d()?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// `y[c, …] = a[c]·x[c, …]` for a leading channel axis.
    pub fn scale_channels(&mut self, x: Var, a: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(a) != [c] {
            return Err(Error::invalid(format!(
                "scale_channels: gate shape {:?}, expected [{c}]",
                self.shape(a)
            )));
        }
        let per = self.value(x).numel() / c;
        let gate = self.value(a).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(per)
            .zip(gate)
            .flat_map(|(row, &g)| row.iter().map(move |&v| v * g))
            .collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(x) || self.rg(a);
        Ok(self.push(t, Op::ScaleChannels { x, a }, rg))
    }

    /// One GRU layer scanned over `steps` rows.
    ///
    /// `gx: steps×3H` are the input projections `W_i x + b_i` (gate order
    /// reset, update, candidate), `h0` has `H` entries, `w_hh: 3H×H`,
    /// `b_hh: 3H`. Returns all hidden states, `steps×H`.
    pub fn gru_scan(&mut self, gx: Var, h0: Var, w_hh: Var, b_hh: Var) -> Result<Var> {
        let (steps, three_h) = matrix_dims(self.value(gx), "gru_scan gx")?;
        let hidden = self.value(h0).numel();
        if three_h != 3 * hidden || self.shape(w_hh) != [3 * hidden, hidden] || self.shape(b_hh) != [3 * hidden] {
            return Err(Error::invalid(format!(
                "gru_scan: inconsistent shapes gx {:?}, h0 {:?}, w_hh {:?}, b_hh {:?}",
                self.shape(gx),
                self.shape(h0),
                self.shape(w_hh),
                self.shape(b_hh)
            )));
        }
        let (out, saved) = kernels::gru_scan_forward(
            self.value(gx).data(),
            self.value(h0).data(),
            self.value(w_hh).data(),
            self.value(b_hh).data(),
            hidden,
        );
        let rg = self.rg(gx) || self.rg(h0) || self.rg(w_hh) || self.rg(b_hh);
        let t = Tensor::from_parts(vec![steps, hidden], out);
        Ok(self.push(t, Op::GruScan { gx, h0, w_hh, b_hh, saved }, rg))
    }

    /// Maps `N×2` (pitch, yaw) rows to `N×3` unit gaze vectors.
    pub fn angles_to_vector(&mut self, x: Var) -> Result<Var> {
        let (n, c) = matrix_dims(self.value(x), "angles_to_vector")?;
        if c != 2 {
            return Err(Error::invalid("angles_to_vector: expected N×2 input"));
        }
        let out = gaze_ops::angles_to_vector_forward(self.value(x).data());
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, 3], out), Op::AnglesToVector(x), rg))
    }

    /// Angle in degrees between each row of `v: N×3` and the matching row of
    /// `target`, with the cosine clamped to `[−1+eps, 1−eps]`.
    pub fn angular_error_deg(&mut self, v: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        let (n, c) = matrix_dims(self.value(v), "angular_error_deg")?;
        if c != 3 || target.shape() != [n, 3] {
            return Err(Error::invalid(format!(
                "angular_error_deg: prediction {:?} vs target {:?}",
                self.shape(v),
                target.shape()
            )));
        }
        let (out, target, cos, norm) = gaze_ops::angular_error_forward(self.value(v).data(), target.data(), eps)?;
        let rg = self.rg(v);
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::AngularError { v, target, cos, norm, eps }, rg))
    }

    /// Point-of-gaze error of gaze directions `v: N×3` cast from `origins: N×3`
    /// against ground-truth screen points `targets_cm: N×2`.
    ///
    /// Returns the `N×2` tensor of (cm, px) Euclidean errors and the number
    /// of rows whose ray misses the screen plane; those rows are zero and
    /// carry no gradient.
    pub fn pog_error(
        &mut self,
        v: Var,
        origins: &Tensor<T>,
        targets_cm: &Tensor<T>,
        screen: &ScreenProjection,
    ) -> Result<(Var, usize)> {
        let (n, c) = matrix_dims(self.value(v), "pog_error")?;
        if c != 3 || origins.shape() != [n, 3] || targets_cm.shape() != [n, 2] {
            return Err(Error::invalid(format!(
                "pog_error: directions {:?}, origins {:?}, targets {:?}",
                self.shape(v),
                origins.shape(),
                targets_cm.shape()
            )));
        }
        let (out, saved) = gaze_ops::pog_error_forward(self.value(v).data(), origins.data(), targets_cm.data(), screen);
        let masked = saved.masked();
        let rg = self.rg(v);
        let var = self.push(
            Tensor::from_parts(vec![n, 2], out),
            Op::PogError { v, origins: origins.data().to_vec(), saved },
            rg,
        );
        Ok((var, masked))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Backward<T>> {
        if !self.value(root).is_scalar() {
            return Err(Error::invalid(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        let mut leaves = HashMap::new();
        for i in (0..=root.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x *= T::lit(1.25));
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Param(id) => {
                    param_grads[id.0] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                op => self.backward_op(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Backward {
            params: Gradients { grads: param_grads },
            leaves,
        })
    }

    /// Returns the gradient buffer of `v` (allocating zeros), or `None` if `v`
    /// does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(s) = self.slot(grads, v) {
            for (i, x) in s.iter_mut().enumerate() {
                *x += f(i);
            }
        }
    }

    fn backward_op(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                self.add_into(grads, *a, |i| g[i]);
                self.add_into(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, |i| g[i]);
                self.add_into(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.add_into(grads, *a, |i| g[i] * bv[i]);
                self.add_into(grads, *b, |i| g[i] * av[i]);
            }
            Op::Scale(a, c) => self.add_into(grads, *a, |i| g[i] * *c),
            Op::Sigmoid(a) => {
                let y = out.data();
                self.add_into(grads, *a, |i| g[i] * y[i] * (T::one() - y[i]));
            }
            Op::Tanh(a) => {
                let y = out.data();
                self.add_into(grads, *a, |i| g[i] * (T::one() - y[i] * y[i]));
            }
            Op::Swish(a) => {
                let (x, y) = (val(*a), out.data());
                self.add_into(grads, *a, |i| {
                    let s = kernels::sigmoid(x[i]);
                    g[i] * (s + y[i] * (T::one() - s))
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, T::one(), g, Layout::Normal, bv, Layout::Transposed, T::one(), da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, T::one(), av, Layout::Transposed, g, Layout::Normal, T::one(), db);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let d_out = self.shape(*w)[0];
                let (xv, wv) = (val(*x), val(*w));
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(n, d_out, d_in, T::one(), g, Layout::Normal, wv, Layout::Normal, T::one(), dx);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(d_out, n, d_in, T::one(), g, Layout::Transposed, xv, Layout::Normal, T::one(), dw);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks_exact(d_out) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = self.rg(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = b.filter(|b| self.rg(*b)).map(|_| vec![T::zero(); geom.c_out]);
                kernels::conv2d_backward(geom, xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    self.add_into(grads, *x, |i| dx[i]);
                }
                if let Some(dw) = dw {
                    self.add_into(grads, *w, |i| dw[i]);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.add_into(grads, *b, |i| db[i]);
                }
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap();
                if let Some(da) = self.slot(grads, *a) {
                    kernels::softmax_rows_backward(out.data(), g, n, da);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = val(*gamma);
                let mut dx = self.rg(*x).then(|| vec![T::zero(); xhat.len()]);
                let mut dgamma = self.rg(*gamma).then(|| vec![T::zero(); gv.len()]);
                let mut dbeta = self.rg(*beta).then(|| vec![T::zero(); gv.len()]);
                kernels::layer_norm_rows_backward(g, xhat, inv_std, gv, dx.as_deref_mut(), dgamma.as_deref_mut(), dbeta.as_deref_mut());
                if let Some(d) = dx {
                    self.add_into(grads, *x, |i| d[i]);
                }
                if let Some(d) = dgamma {
                    self.add_into(grads, *gamma, |i| d[i]);
                }
                if let Some(d) = dbeta {
                    self.add_into(grads, *beta, |i| d[i]);
                }
            }
            Op::Mean { x, axis } => {
                let (_, len, inner) = split_axis(self.shape(*x), *axis);
                let inv = T::one() / T::from_usize(len).unwrap();
                self.add_into(grads, *x, |i| {
                    let o = i / (len * inner);
                    let j = i % inner;
                    g[o * inner + j] * inv
                });
            }
            Op::Sum(x) => self.add_into(grads, *x, |_| g[0]),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    self.add_into(grads, v, |i| {
                        let o = i / (len * inner);
                        let rest = i % (len * inner);
                        g[o * total * inner + offset * inner + rest]
                    });
                    offset += len;
                }
                debug_assert!(outer > 0);
            }
            Op::Slice { x, axis, start } => {
                let (_, len, inner) = split_axis(self.shape(*x), *axis);
                let width = out.shape()[*axis];
                if let Some(dx) = self.slot(grads, *x) {
                    for (o, chunk) in g.chunks_exact(width * inner).enumerate() {
                        let dst = &mut dx[(o * len + start) * inner..][..width * inner];
                        for (d, &v) in dst.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                }
            }
            Op::HFlip(x) => {
                let w = *out.shape().last().unwrap();
                self.add_into(grads, *x, |i| {
                    let row = i / w;
                    g[row * w + (w - 1 - i % w)]
                });
            }
            Op::Reshape(x) => self.add_into(grads, *x, |i| g[i]),
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.add_into(grads, *x, |i| g[(i % c) * r + i / c]);
            }
            Op::ScaleChannels { x, a } => {
                let (xv, av) = (val(*x), val(*a));
                let per = xv.len() / av.len();
                self.add_into(grads, *x, |i| g[i] * av[i / per]);
                if let Some(da) = self.slot(grads, *a) {
                    for (c, d) in da.iter_mut().enumerate() {
                        let range = c * per..(c + 1) * per;
                        *d += g[range.clone()].iter().zip(&xv[range]).map(|(&p, &q)| p * q).sum::<T>();
                    }
                }
            }
            Op::GruScan { gx, h0, w_hh, b_hh, saved } => {
                let hidden = self.value(*h0).numel();
                let mut dgx = self.rg(*gx).then(|| vec![T::zero(); self.value(*gx).numel()]);
                let mut dh0 = self.rg(*h0).then(|| vec![T::zero(); hidden]);
                let mut dw = self.rg(*w_hh).then(|| vec![T::zero(); 3 * hidden * hidden]);
                let mut db = self.rg(*b_hh).then(|| vec![T::zero(); 3 * hidden]);
                kernels::gru_scan_backward(
                    g,
                    out.data(),
                    val(*h0),
                    val(*w_hh),
                    saved,
                    hidden,
                    kernels::GruGrads {
                        dgx: dgx.as_deref_mut(),
                        dh0: dh0.as_deref_mut(),
                        dw_hh: dw.as_deref_mut(),
                        db_hh: db.as_deref_mut(),
                    },
                );
                for (v, d) in [(*gx, dgx), (*h0, dh0), (*w_hh, dw), (*b_hh, db)] {
                    if let Some(d) = d {
                        self.add_into(grads, v, |i| d[i]);
                    }
                }
            }
            Op::AnglesToVector(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    gaze_ops::angles_to_vector_backward(val(*x), g, dx);
                }
            }
            Op::AngularError { v, target, cos, norm, eps } => {
                if let Some(dv) = self.slot(grads, *v) {
                    gaze_ops::angular_error_backward(val(*v), target, cos, norm, *eps, g, dv);
                }
            }
            Op::PogError { v, origins, saved } => {
                if let Some(dv) = self.slot(grads, *v) {
                    gaze_ops::pog_error_backward(val(*v), origins, saved, g, dv);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
