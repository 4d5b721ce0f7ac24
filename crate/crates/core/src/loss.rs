//! Training loss and evaluation metrics.
//!
//! The per-frame loss is
//! `λ_ang·angular_deg + λ_cm·pog_cm + λ_px·pog_px`, averaged over frames.
//! The angular term is in degrees.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{angular_error_angles_deg, pog_cm, pog_px, GazeAngles, ScreenGeometry};
use crate::tensor::{Real, Tensor};

/// Cosine clamp margin for the angular loss.
pub const ANGULAR_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub angular: f64,
    pub pog_cm: f64,
    pub pog_px: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            angular: 1.0,
            pog_cm: 0.01,
            pog_px: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.angular, self.pog_cm, self.pog_px];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be non-negative and not all zero: {self:?}"
            )));
        }
        Ok(())
    }

    fn uses_pog(&self) -> bool {
        self.pog_cm != 0.0 || self.pog_px != 0.0
    }
}

/// Angular error in degrees between a prediction and the truth.
pub fn loss_angular(pred: GazeAngles, truth: GazeAngles) -> f64 {
    angular_error_angles_deg(pred, truth)
}

/// PoG errors `(cm, px)`, or `None` when the predicted ray misses the screen.
pub fn loss_pog(pred: GazeAngles, truth: GazeAngles, origin: [f64; 3], geom: &ScreenGeometry) -> Result<Option<(f64, f64)>> {
    let t = pog_cm(truth.to_vector(), origin, geom)?;
    let Ok(p) = pog_cm(pred.to_vector(), origin, geom) else {
        return Ok(None);
    };
    let cm = p.distance(t);
    let px = pog_px(p, geom).distance(pog_px(t, geom));
    Ok(Some((cm, px)))
}

/// Weighted sum of the three component losses.
pub fn loss_total(angular: f64, pog_cm: f64, pog_px: f64, w: &LossWeights) -> f64 {
    w.angular * angular + w.pog_cm * pog_cm + w.pog_px * pog_px
}

/// Labels of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTargets {
    pub gaze: Vec<GazeAngles>,
    pub origin: [f64; 3],
}

/// Tape handles of a clip loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    /// Scalar `[1]`, averaged over frames.
    pub total: Var,
    /// Per-frame angular error in degrees, `[T]`.
    pub angular: Var,
    /// Per-frame `(cm, px)` PoG error, `T×2`, if PoG terms are weighted.
    pub pog: Option<Var>,
    /// Frames whose predicted ray missed the screen.
    pub masked: usize,
}

/// Clip loss on the `T×3` gaze vectors produced by the model.
pub fn clip_loss<T: Real>(
    g: &mut Graph<'_, T>,
    gaze_vectors: Var,
    targets: &ClipTargets,
    geom: &ScreenGeometry,
    w: &LossWeights,
) -> Result<LossTerms> {
    let n = targets.gaze.len();
    if g.shape(gaze_vectors) != [n, 3] {
        return Err(Error::invalid(format!(
            "clip loss: {} labels for predictions of shape {:?}",
            n,
            g.shape(gaze_vectors)
        )));
    }
    let target = Tensor::from_fn(&[n, 3], |i| {
        let v = targets.gaze[i / 3].to_vector();
        T::lit([v.x, v.y, v.z][i % 3])
    })?;
    let angular = g.angular_error_deg(gaze_vectors, &target, T::lit(ANGULAR_EPS))?;
    let mean_ang = g.mean(angular, 0)?;
    let mut total = g.scale(mean_ang, T::lit(w.angular));
    let mut pog = None;
    let mut masked = 0;
    if w.uses_pog() {
        let origins = Tensor::from_fn(&[n, 3], |i| T::lit(targets.origin[i % 3]))?;
        let mut pts = Vec::with_capacity(n * 2);
        for gz in &targets.gaze {
            let p = pog_cm(gz.to_vector(), targets.origin, geom)?;
            pts.push(T::lit(p.x));
            pts.push(T::lit(p.y));
        }
        let pts = Tensor::new(&[n, 2], pts)?;
        let (errs, m) = g.pog_error(gaze_vectors, &origins, &pts, &geom.projection())?;
        masked = m;
        let mean = g.mean(errs, 0)?;
        let weights = g.constant(Tensor::new(&[2], vec![T::lit(w.pog_cm), T::lit(w.pog_px)])?);
        let weighted = g.mul(mean, weights)?;
        let term = g.sum(weighted);
        total = g.add(total, term)?;
        pog = Some(errs);
    }
    Ok(LossTerms {
        total,
        angular,
        pog,
        masked,
    })
}

/// Aggregate error statistics over a set of frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub count: usize,
    pub mean_ang_deg: f64,
    /// Population standard deviation.
    pub std_ang_deg: f64,
    /// Frames with a valid PoG.
    pub pog_count: usize,
    pub mean_pog_cm: f64,
    pub mean_pog_px: f64,
    /// Frames whose predicted ray missed the screen.
    pub masked: usize,
}

impl BatchMetrics {
    pub fn empty() -> Self {
        BatchMetrics {
            count: 0,
            mean_ang_deg: 0.0,
            std_ang_deg: 0.0,
            pog_count: 0,
            mean_pog_cm: 0.0,
            mean_pog_px: 0.0,
            masked: 0,
        }
    }

    /// Metrics of individual frames: angular errors and optional PoG errors.
    pub fn from_frames(angular: &[f64], pog: &[Option<(f64, f64)>]) -> Self {
        let count = angular.len();
        if count == 0 {
            return Self::empty();
        }
        let mean = angular.iter().sum::<f64>() / count as f64;
        let var = angular.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / count as f64;
        let hits: Vec<(f64, f64)> = pog.iter().flatten().copied().collect();
        let pog_count = hits.len();
        let (cm, px) = if pog_count == 0 {
            (0.0, 0.0)
        } else {
            (
                hits.iter().map(|h| h.0).sum::<f64>() / pog_count as f64,
                hits.iter().map(|h| h.1).sum::<f64>() / pog_count as f64,
            )
        };
        BatchMetrics {
            count,
            mean_ang_deg: mean,
            std_ang_deg: var.sqrt(),
            pog_count,
            mean_pog_cm: cm,
            mean_pog_px: px,
            masked: pog.len() - pog_count,
        }
    }

    /// Count-weighted combination, equal to aggregating the union of frames.
    pub fn merge(&self, o: &BatchMetrics) -> BatchMetrics {
        if self.count == 0 {
            return *o;
        }
        if o.count == 0 {
            return *self;
        }
        let (na, nb) = (self.count as f64, o.count as f64);
        let n = na + nb;
        let mean = (na * self.mean_ang_deg + nb * o.mean_ang_deg) / n;
        let delta = o.mean_ang_deg - self.mean_ang_deg;
        let m2 = na * self.std_ang_deg.powi(2) + nb * o.std_ang_deg.powi(2) + delta * delta * na * nb / n;
        let pog_count = self.pog_count + o.pog_count;
        let wmean = |a: f64, b: f64| {
            if pog_count == 0 {
                0.0
            } else {
                (self.pog_count as f64 * a + o.pog_count as f64 * b) / pog_count as f64
            }
        };
        BatchMetrics {
            count: self.count + o.count,
            mean_ang_deg: mean,
            std_ang_deg: (m2 / n).sqrt(),
            pog_count,
            mean_pog_cm: wmean(self.mean_pog_cm, o.mean_pog_cm),
            mean_pog_px: wmean(self.mean_pog_px, o.mean_pog_px),
            masked: self.masked + o.masked,
        }
    }

    /// Per-frame errors of predictions against labels.
    pub fn evaluate(
        preds: &[GazeAngles],
        targets: &ClipTargets,
        geom: &ScreenGeometry,
    ) -> Result<BatchMetrics> {
        if preds.len() != targets.gaze.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} labels",
                preds.len(),
                targets.gaze.len()
            )));
        }
        let ang: Vec<f64> = preds.iter().zip(&targets.gaze).map(|(&p, &t)| loss_angular(p, t)).collect();
        let pog = preds
            .iter()
            .zip(&targets.gaze)
            .map(|(&p, &t)| loss_pog(p, t, targets.origin, geom))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchMetrics::from_frames(&ang, &pog))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{grad_check, GradCheckConfig};
    use crate::params::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ORIGIN: [f64; 3] = [0.0, 0.0, 50.0];

    #[test]
    fn angular_examples() {
        let z = GazeAngles::new(0.0, 0.0);
        assert_eq!(loss_angular(z, z), 0.0);
        let t = GazeAngles::new(0.0, 0.1f64.atan());
        assert!((loss_angular(z, t) - 5.71059).abs() < 1e-5);
    }

    #[test]
    fn pog_examples() {
        let geom = ScreenGeometry::default();
        let z = GazeAngles::new(0.0, 0.0);
        assert_eq!(loss_pog(z, z, ORIGIN, &geom).unwrap(), Some((0.0, 0.0)));
        // Truth hits 5 cm to the right of the straight-ahead point.
        let t = GazeAngles::new(0.0, 0.1f64.atan());
        let (cm, px) = loss_pog(z, t, ORIGIN, &geom).unwrap().unwrap();
        assert!((cm - 5.0).abs() < 1e-9);
        assert!((px - 5.0 * 32.0).abs() < 1e-9);
        let away = GazeAngles::new(0.0, 3.0);
        assert_eq!(loss_pog(away, t, ORIGIN, &geom).unwrap(), None);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(loss_total(2.0, 3.0, 1234.0, &w), 2.03);
        assert_eq!(loss_total(0.0, 0.0, 0.0, &w), 0.0);
        let px_only = LossWeights {
            angular: 0.0,
            pog_cm: 0.0,
            pog_px: 1.0,
        };
        assert_eq!(loss_total(5.0, 5.0, 7.0, &px_only), 7.0);
        assert!(LossWeights { angular: 0.0, pog_cm: 0.0, pog_px: 0.0 }.validate().is_err());
        assert!(LossWeights { angular: -1.0, pog_cm: 0.0, pog_px: 0.0 }.validate().is_err());
    }

    fn targets(rng: &mut ChaCha8Rng, n: usize) -> ClipTargets {
        ClipTargets {
            gaze: (0..n)
                .map(|_| GazeAngles::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)))
                .collect(),
            origin: [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(40.0..60.0)],
        }
    }

    #[test]
    fn tape_loss_matches_scalar_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = ScreenGeometry::default();
        let tg = targets(&mut rng, 4);
        let preds: Vec<GazeAngles> = tg
            .gaze
            .iter()
            .map(|g| GazeAngles::new(g.pitch + 0.05, g.yaw - 0.03))
            .collect();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::from_fn(&[4, 2], |i| if i % 2 == 0 { preds[i / 2].pitch } else { preds[i / 2].yaw }).unwrap());
        let v = g.angles_to_vector(a).unwrap();
        let w = LossWeights { angular: 1.0, pog_cm: 0.01, pog_px: 0.001 };
        let terms = clip_loss(&mut g, v, &tg, &geom, &w).unwrap();
        let m = BatchMetrics::evaluate(&preds, &tg, &geom).unwrap();
        let expect = loss_total(m.mean_ang_deg, m.mean_pog_cm, m.mean_pog_px, &w);
        assert!((g.value(terms.total).data()[0] - expect).abs() < 1e-9);
        assert_eq!(terms.masked, 0);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tg = targets(&mut rng, 3);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::from_fn(&[3, 2], |i| if i % 2 == 0 { tg.gaze[i / 2].pitch } else { tg.gaze[i / 2].yaw }).unwrap());
        let v = g.angles_to_vector(a).unwrap();
        let terms = clip_loss(&mut g, v, &tg, &ScreenGeometry::default(), &LossWeights::default()).unwrap();
        // The cosine clamp leaves a floor of acos(1 − 1e−7) ≈ 0.026°.
        let floor = (1.0 - ANGULAR_EPS).acos().to_degrees();
        assert!(g.value(terms.total).data()[0] <= floor + 1e-6);
        let m = BatchMetrics::evaluate(&tg.gaze, &tg, &ScreenGeometry::default()).unwrap();
        assert_eq!(loss_total(m.mean_ang_deg, m.mean_pog_cm, m.mean_pog_px, &LossWeights::default()), 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let geom = ScreenGeometry::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tg = targets(&mut rng, 3);
            let mut store = ParamStore::<f64>::new();
            // Keep every prediction at least 1° from its label, away from the clamp.
            let init: Vec<f64> = tg
                .gaze
                .iter()
                .flat_map(|g| [g.pitch + rng.gen_range(0.02..0.2), g.yaw - rng.gen_range(0.02..0.2)])
                .collect();
            store.add("angles", Tensor::new(&[3, 2], init).unwrap()).unwrap();
            let id = store.id("angles").unwrap();
            let w = LossWeights { angular: 1.0, pog_cm: 0.01, pog_px: 0.001 };
            let report = grad_check(
                &mut store,
                |g| {
                    let a = g.param(id);
                    let v = g.angles_to_vector(a)?;
                    Ok(clip_loss(g, v, &tg, &geom, &w)?.total)
                },
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.max_rel_err() < 1e-4, "seed {seed}: {:?}", report.worst());
        }
    }

    proptest! {
        #[test]
        fn merge_equals_union(
            a in proptest::collection::vec((0.0f64..40.0, proptest::option::of((0.0f64..30.0, 0.0f64..900.0))), 1..20),
            b in proptest::collection::vec((0.0f64..40.0, proptest::option::of((0.0f64..30.0, 0.0f64..900.0))), 1..20),
        ) {
            let split = |v: &[(f64, Option<(f64, f64)>)]| -> (Vec<f64>, Vec<Option<(f64, f64)>>) {
                (v.iter().map(|x| x.0).collect(), v.iter().map(|x| x.1).collect())
            };
            let (aa, ap) = split(&a);
            let (ba, bp) = split(&b);
            let all: Vec<_> = a.iter().chain(&b).copied().collect();
            let (ua, up) = split(&all);
            let merged = BatchMetrics::from_frames(&aa, &ap).merge(&BatchMetrics::from_frames(&ba, &bp));
            let union = BatchMetrics::from_frames(&ua, &up);
            prop_assert_eq!(merged.count, union.count);
            prop_assert_eq!(merged.pog_count, union.pog_count);
            prop_assert_eq!(merged.masked, union.masked);
            for (x, y) in [
                (merged.mean_ang_deg, union.mean_ang_deg),
                (merged.std_ang_deg, union.std_ang_deg),
                (merged.mean_pog_cm, union.mean_pog_cm),
                (merged.mean_pog_px, union.mean_pog_px),
            ] {
                prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
            }
        }

        #[test]
        fn total_is_linear_and_non_negative(a in 0.0f64..50.0, c in 0.0f64..50.0, p in 0.0f64..2000.0, k in 0.0f64..4.0) {
            let w = LossWeights { angular: 1.0, pog_cm: 0.01, pog_px: 0.002 };
            prop_assert!(loss_total(a, c, p, &w) >= 0.0);
            let lhs = loss_total(k * a, c, p, &w) - loss_total(0.0, c, p, &w);
            prop_assert!((lhs - k * loss_total(a, 0.0, 0.0, &w)).abs() < 1e-9);
        }
    }
}
