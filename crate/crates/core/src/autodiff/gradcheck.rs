//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// When set, only this many randomly chosen entries per parameter are probed.
    pub max_entries_per_param: Option<usize>,
    pub sample_seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_entries_per_param: None,
            sample_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    /// Parameter with the largest relative error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a − b| / max(1, |a|, |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(params: &ParamStore<f64>, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let root = f(&mut g)?;
    let v = g.value(root);
    if !v.is_scalar() {
        return Err(Error::invalid(format!(
            "grad_check objective must be scalar, got {:?}",
            v.shape()
        )));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::numeric("objective is not finite"));
    }
    Ok(x)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every trainable parameter entry.
///
/// Parameters are restored exactly after probing.
pub fn grad_check<F>(
    params: &mut ParamStore<f64>,
    mut f: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_, f64>) -> Result<Var>,
{
    let h = config.step;
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let root = f(&mut g)?;
        if !g.value(root).all_finite() {
            return Err(Error::numeric("objective is not finite"));
        }
        g.backward(root)?.params
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.sample_seed);
    let mut report = GradCheckReport { params: Vec::new() };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !params.get(id).trainable {
            continue;
        }
        let n = params.get(id).tensor.numel();
        let entries: Vec<usize> = match config.max_entries_per_param {
            Some(k) if k < n => {
                let mut e = sample(&mut rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: params.get(id).name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
        };
        for i in entries {
            let ga = analytic.get(id).map_or(0.0, |t| t.data()[i]);
            if !ga.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite analytic gradient for {}[{i}]",
                    check.name
                )));
            }
            let orig = params.get(id).tensor.data()[i];
            params.get_mut(id).tensor.data_mut()[i] = orig + h;
            let plus = evaluate(params, &mut f);
            params.get_mut(id).tensor.data_mut()[i] = orig - h;
            let minus = evaluate(params, &mut f);
            params.get_mut(id).tensor.data_mut()[i] = orig;
            let gf = (plus? - minus?) / (2.0 * h);
            let err = relative_error(ga, gf);
            check.checked += 1;
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = i;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut p = ParamStore::new();
        let w = p.add("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let report = grad_check(
            &mut p,
            |g| {
                let v = g.param(w);
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-8, "{report:?}");
        assert_eq!(report.entries_checked(), 2);
        assert_eq!(p.get(w).tensor.data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_step_rejected() {
        let mut p = ParamStore::new();
        let w = p.add("w", Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
        let cfg = GradCheckConfig {
            step: 0.0,
            ..Default::default()
        };
        let r = grad_check(&mut p, |g| Ok(g.param(w)), &cfg);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_objective_is_numeric_failure() {
        let mut p = ParamStore::new();
        let w = p.add("w", Tensor::new(&[1], vec![f64::NAN]).unwrap()).unwrap();
        let r = grad_check(&mut p, |g| Ok(g.param(w)), &GradCheckConfig::default());
        assert!(matches!(r, Err(Error::NumericFailure(_))));
    }
}
