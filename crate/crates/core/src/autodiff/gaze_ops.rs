//! Differentiable gaze-geometry operations: angle→vector conversion, angular
//! error and point-of-gaze error. Conventions match [`crate::geometry`].

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Screen parameters needed to turn a ray hit into screen centimetres/pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenProjection {
    pub width_cm: f64,
    pub px_per_cm_x: f64,
    pub px_per_cm_y: f64,
}

pub(crate) fn angles_to_vector_forward<T: Real>(x: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len() / 2 * 3);
    for row in x.chunks_exact(2) {
        let (p, y) = (row[0], row[1]);
        out.push(p.cos() * y.sin());
        out.push(-p.sin());
        out.push(-p.cos() * y.cos());
    }
    out
}

pub(crate) fn angles_to_vector_backward<T: Real>(x: &[T], g: &[T], dx: &mut [T]) {
    for ((row, gr), d) in x.chunks_exact(2).zip(g.chunks_exact(3)).zip(dx.chunks_exact_mut(2)) {
        let (sp, cp) = row[0].sin_cos();
        let (sy, cy) = row[1].sin_cos();
        d[0] += gr[0] * (-sp * sy) + gr[1] * (-cp) + gr[2] * (sp * cy);
        d[1] += gr[0] * (cp * cy) + gr[2] * (cp * sy);
    }
}

fn rad_to_deg<T: Real>() -> T {
    T::lit(180.0 / std::f64::consts::PI)
}

type AngularForward<T> = (Vec<T>, Vec<T>, Vec<T>, Vec<T>);

/// Returns `(degrees, unit targets, raw cosines, prediction norms)`.
pub(crate) fn angular_error_forward<T: Real>(v: &[T], target: &[T], eps: T) -> Result<AngularForward<T>> {
    let n = v.len() / 3;
    let mut out = Vec::with_capacity(n);
    let mut unit = Vec::with_capacity(n * 3);
    let mut cos = Vec::with_capacity(n);
    let mut norm = Vec::with_capacity(n);
    for (i, (a, b)) in v.chunks_exact(3).zip(target.chunks_exact(3)).enumerate() {
        let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
        if na == T::zero() || nb == T::zero() || !na.is_finite() || !nb.is_finite() {
            return Err(Error::numeric(format!(
                "angular error row {i}: zero or non-finite vector norm"
            )));
        }
        let t = [b[0] / nb, b[1] / nb, b[2] / nb];
        let c = (a[0] * t[0] + a[1] * t[1] + a[2] * t[2]) / na;
        let cc = c.max(-T::one() + eps).min(T::one() - eps);
        out.push(cc.acos() * rad_to_deg());
        unit.extend_from_slice(&t);
        cos.push(c);
        norm.push(na);
    }
    Ok((out, unit, cos, norm))
}

pub(crate) fn angular_error_backward<T: Real>(
    v: &[T],
    target: &[T],
    cos: &[T],
    norm: &[T],
    eps: T,
    g: &[T],
    dv: &mut [T],
) {
    for i in 0..cos.len() {
        let c = cos[i];
        // Zero gradient inside the clamped region.
        if c >= T::one() - eps || c <= -T::one() + eps {
            continue;
        }
        let dl_dc = -rad_to_deg::<T>() / (T::one() - c * c).sqrt() * g[i];
        let na = norm[i];
        for k in 0..3 {
            let dc = target[i * 3 + k] / na - c * v[i * 3 + k] / (na * na);
            dv[i * 3 + k] += dl_dc * dc;
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PogSaved<T> {
    hit: Vec<bool>,
    /// Screen-space residual (predicted − truth) in cm, per row.
    delta: Vec<[T; 2]>,
    err_cm: Vec<T>,
    err_px: Vec<T>,
    px_scale: [T; 2],
}

impl<T> PogSaved<T> {
    pub(crate) fn masked(&self) -> usize {
        self.hit.iter().filter(|h| !**h).count()
    }
}

pub(crate) fn pog_error_forward<T: Real>(
    v: &[T],
    origins: &[T],
    targets: &[T],
    screen: &ScreenProjection,
) -> (Vec<T>, PogSaved<T>) {
    let n = v.len() / 3;
    let half_w = T::lit(screen.width_cm / 2.0);
    let (sx, sy) = (T::lit(screen.px_per_cm_x), T::lit(screen.px_per_cm_y));
    let mut out = vec![T::zero(); n * 2];
    let mut saved = PogSaved {
        hit: vec![false; n],
        delta: vec![[T::zero(); 2]; n],
        err_cm: vec![T::zero(); n],
        err_px: vec![T::zero(); n],
        px_scale: [sx, sy],
    };
    for i in 0..n {
        let d = &v[i * 3..i * 3 + 3];
        let o = &origins[i * 3..i * 3 + 3];
        // The ray must travel towards the z = 0 plane.
        if !(d[2] * o[2] < T::zero()) {
            continue;
        }
        let s = -o[2] / d[2];
        let x = o[0] + s * d[0] + half_w;
        let y = o[1] + s * d[1];
        let dx = x - targets[i * 2];
        let dy = y - targets[i * 2 + 1];
        let e_cm = (dx * dx + dy * dy).sqrt();
        let e_px = ((dx * sx) * (dx * sx) + (dy * sy) * (dy * sy)).sqrt();
        saved.hit[i] = true;
        saved.delta[i] = [dx, dy];
        saved.err_cm[i] = e_cm;
        saved.err_px[i] = e_px;
        out[i * 2] = e_cm;
        out[i * 2 + 1] = e_px;
    }
    (out, saved)
}

pub(crate) fn pog_error_backward<T: Real>(
    v: &[T],
    origins: &[T],
    saved: &PogSaved<T>,
    g: &[T],
    dv: &mut [T],
) {
    let [sx, sy] = saved.px_scale;
    for i in 0..saved.hit.len() {
        if !saved.hit[i] {
            continue;
        }
        let [dx, dy] = saved.delta[i];
        let (mut gx, mut gy) = (T::zero(), T::zero());
        if saved.err_cm[i] > T::zero() {
            gx += g[i * 2] * dx / saved.err_cm[i];
            gy += g[i * 2] * dy / saved.err_cm[i];
        }
        if saved.err_px[i] > T::zero() {
            gx += g[i * 2 + 1] * sx * sx * dx / saved.err_px[i];
            gy += g[i * 2 + 1] * sy * sy * dy / saved.err_px[i];
        }
        let d = &v[i * 3..i * 3 + 3];
        let oz = origins[i * 3 + 2];
        let k = -oz / d[2];
        dv[i * 3] += gx * k;
        dv[i * 3 + 1] += gy * k;
        dv[i * 3 + 2] += (gx * d[0] + gy * d[1]) * oz / (d[2] * d[2]);
    }
}
