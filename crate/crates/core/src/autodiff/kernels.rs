//! Numeric forward/backward kernels behind the tape operations.
//!
//! All buffers are row-major and unbatched; shapes are validated by the
//! callers in `autodiff::mod`.

use crate::tensor::{gemm, Layout, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds `input` into a `(c·kh·kw) × (h_out·w_out)` column matrix.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (c * g.kh + u) * g.kw + v;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + u) as isize - g.pad_h as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|x| *x = T::zero());
                        continue;
                    }
                    let src = &input[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, x) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + v) as isize - g.pad_w as isize;
                        *x = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dinput: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (c * g.kh + u) * g.kw + v;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + u) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dinput[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + v) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let p = g.positions();
    let mut out = vec![T::zero(); g.c_out * p];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_exact_mut(p).zip(b) {
            row.iter_mut().for_each(|x| *x = bv);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        gemm(g.c_out, g.c_in, p, T::one(), weight, Layout::Normal, input, Layout::Normal, beta, &mut out);
    } else {
        let mut cols = vec![T::zero(); g.patch_len() * p];
        im2col(g, input, &mut cols);
        gemm(g.c_out, g.patch_len(), p, T::one(), weight, Layout::Normal, &cols, Layout::Normal, beta, &mut out);
    }
    out
}

/// Accumulates weight, bias and (optionally) input gradients of a convolution.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    dout: &[T],
    dinput: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let p = g.positions();
    if let Some(db) = dbias {
        for (b, row) in db.iter_mut().zip(dout.chunks_exact(p)) {
            *b += row.iter().copied().sum::<T>();
        }
    }
    if g.is_pointwise() {
        if let Some(dw) = dweight {
            gemm(g.c_out, p, g.c_in, T::one(), dout, Layout::Normal, input, Layout::Transposed, T::one(), dw);
        }
        if let Some(dx) = dinput {
            gemm(g.c_in, g.c_out, p, T::one(), weight, Layout::Transposed, dout, Layout::Normal, T::one(), dx);
        }
        return;
    }
    let k = g.patch_len();
    if let Some(dw) = dweight {
        let mut cols = vec![T::zero(); k * p];
        im2col(g, input, &mut cols);
        gemm(g.c_out, p, k, T::one(), dout, Layout::Normal, &cols, Layout::Transposed, T::one(), dw);
    }
    if let Some(dx) = dinput {
        let mut dcols = vec![T::zero(); k * p];
        gemm(k, g.c_out, p, T::one(), weight, Layout::Transposed, dout, Layout::Normal, T::zero(), &mut dcols);
        col2im_add(g, &dcols, dx);
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        let inv = T::one() / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

pub(crate) fn softmax_rows_backward<T: Real>(y: &[T], dy: &[T], n: usize, dx: &mut [T]) {
    for ((yr, dyr), dxr) in y.chunks_exact(n).zip(dy.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - dot);
        }
    }
}

/// Per-row normalization; returns `(output, xhat, inv_std)`.
pub(crate) fn layer_norm_rows<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gamma.len();
    let n = T::from_usize(d).unwrap();
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let src = &x[r * d..(r + 1) * d];
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for i in 0..d {
            let h = (src[i] - mean) * is;
            xhat[r * d + i] = h;
            out[r * d + i] = gamma[i] * h + beta[i];
        }
    }
    (out, xhat, inv_std)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_rows_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let d = gamma.len();
    let n = T::from_usize(d).unwrap();
    if let Some(dg) = dgamma {
        for (g, h) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
            for i in 0..d {
                dg[i] += g[i] * h[i];
            }
        }
    }
    if let Some(db) = dbeta {
        for g in dy.chunks_exact(d) {
            for i in 0..d {
                db[i] += g[i];
            }
        }
    }
    if let Some(dx) = dx {
        for (r, is) in inv_std.iter().enumerate() {
            let g = &dy[r * d..(r + 1) * d];
            let h = &xhat[r * d..(r + 1) * d];
            let mut sum_g = T::zero();
            let mut sum_gh = T::zero();
            for i in 0..d {
                let gh = g[i] * gamma[i];
                sum_g += gh;
                sum_gh += gh * h[i];
            }
            for i in 0..d {
                let gh = g[i] * gamma[i];
                dx[r * d + i] += *is / n * (n * gh - sum_g - h[i] * sum_gh);
            }
        }
    }
}

/// Values saved by the GRU scan for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct GruSaved<T> {
    pub r: Vec<T>,
    pub z: Vec<T>,
    pub n: Vec<T>,
    /// `U_n h + b_hn` before the reset gate is applied.
    pub gh_n: Vec<T>,
}

/// Runs one GRU layer over `steps` precomputed input projections.
///
/// `gx` is `steps × 3H` holding `W_i x + b_i` in gate order (reset, update, candidate);
/// `w_hh` is `3H × H`. Returns the `steps × H` hidden states.
pub(crate) fn gru_scan_forward<T: Real>(
    gx: &[T],
    h0: &[T],
    w_hh: &[T],
    b_hh: &[T],
    hidden: usize,
) -> (Vec<T>, GruSaved<T>) {
    let hd = hidden;
    let steps = gx.len() / (3 * hd);
    let mut out = vec![T::zero(); steps * hd];
    let mut saved = GruSaved {
        r: vec![T::zero(); steps * hd],
        z: vec![T::zero(); steps * hd],
        n: vec![T::zero(); steps * hd],
        gh_n: vec![T::zero(); steps * hd],
    };
    let mut gh = vec![T::zero(); 3 * hd];
    let mut h = h0.to_vec();
    for s in 0..steps {
        for (j, slot) in gh.iter_mut().enumerate() {
            let row = &w_hh[j * hd..(j + 1) * hd];
            *slot = b_hh[j] + row.iter().zip(&h).map(|(&a, &b)| a * b).sum::<T>();
        }
        let gxs = &gx[s * 3 * hd..(s + 1) * 3 * hd];
        for i in 0..hd {
            let r = sigmoid(gxs[i] + gh[i]);
            let z = sigmoid(gxs[hd + i] + gh[hd + i]);
            let n = (gxs[2 * hd + i] + r * gh[2 * hd + i]).tanh();
            let idx = s * hd + i;
            saved.r[idx] = r;
            saved.z[idx] = z;
            saved.n[idx] = n;
            saved.gh_n[idx] = gh[2 * hd + i];
            out[idx] = (T::one() - z) * n + z * h[i];
        }
        h.copy_from_slice(&out[s * hd..(s + 1) * hd]);
    }
    (out, saved)
}

pub(crate) struct GruGrads<'a, T> {
    pub dgx: Option<&'a mut [T]>,
    pub dh0: Option<&'a mut [T]>,
    pub dw_hh: Option<&'a mut [T]>,
    pub db_hh: Option<&'a mut [T]>,
}

/// Backpropagation through time for [`gru_scan_forward`].
pub(crate) fn gru_scan_backward<T: Real>(
    dout: &[T],
    out: &[T],
    h0: &[T],
    w_hh: &[T],
    saved: &GruSaved<T>,
    hidden: usize,
    grads: GruGrads<'_, T>,
) {
    let hd = hidden;
    let steps = out.len() / hd;
    // Gradient w.r.t. the pre-activation of every gate, per step (steps × 3H).
    let mut dpre = vec![T::zero(); steps * 3 * hd];
    let mut dgh = vec![T::zero(); steps * 3 * hd];
    let mut dh = vec![T::zero(); hd];
    for s in (0..steps).rev() {
        for i in 0..hd {
            dh[i] += dout[s * hd + i];
        }
        let h_prev = if s == 0 { h0 } else { &out[(s - 1) * hd..s * hd] };
        let mut dh_prev = vec![T::zero(); hd];
        for i in 0..hd {
            let idx = s * hd + i;
            let (r, z, n) = (saved.r[idx], saved.z[idx], saved.n[idx]);
            let g = dh[i];
            let dn = g * (T::one() - z);
            let dz = g * (h_prev[i] - n);
            dh_prev[i] = g * z;
            let dan = dn * (T::one() - n * n);
            let dr = dan * saved.gh_n[idx];
            let dar = dr * r * (T::one() - r);
            let daz = dz * z * (T::one() - z);
            let base = s * 3 * hd;
            dpre[base + i] = dar;
            dpre[base + hd + i] = daz;
            dpre[base + 2 * hd + i] = dan;
            dgh[base + i] = dar;
            dgh[base + hd + i] = daz;
            dgh[base + 2 * hd + i] = dan * r;
        }
        let dghs = &dgh[s * 3 * hd..(s + 1) * 3 * hd];
        for (j, &d) in dghs.iter().enumerate() {
            if d != T::zero() {
                let row = &w_hh[j * hd..(j + 1) * hd];
                for (acc, &w) in dh_prev.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
        }
        dh = dh_prev;
    }
    if let Some(dgx) = grads.dgx {
        for (a, &b) in dgx.iter_mut().zip(&dpre) {
            *a += b;
        }
    }
    if let Some(dh0) = grads.dh0 {
        for (a, &b) in dh0.iter_mut().zip(&dh) {
            *a += b;
        }
    }
    if let Some(db) = grads.db_hh {
        for row in dgh.chunks_exact(3 * hd) {
            for (a, &b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
    }
    if let Some(dw) = grads.dw_hh {
        // dW_hh = dGHᵀ · H_prev where H_prev stacks h0, out[0..steps-1].
        let mut hprev = Vec::with_capacity(steps * hd);
        hprev.extend_from_slice(h0);
        hprev.extend_from_slice(&out[..(steps - 1) * hd]);
        gemm(3 * hd, steps, hd, T::one(), &dgh, Layout::Transposed, &hprev, Layout::Normal, T::one(), dw);
    }
}
