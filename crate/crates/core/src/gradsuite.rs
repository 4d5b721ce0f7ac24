//! Finite-difference gradient suite over every layer family of the network.
//!
//! Each family builds a small randomly initialised instance in 64-bit
//! precision, contracts its output with a fixed random tensor and compares
//! tape gradients of that scalar against central differences. Inputs are
//! registered as parameters so their gradients are checked as well.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::autodiff::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::geometry::{GazeAngles, ScreenGeometry};
use crate::loss::{clip_loss, ClipTargets, LossWeights, ANGULAR_EPS};
use crate::model::{Encoder, EncoderConfig, Frame, ModelConfig, RegressionHead, StGaze};
use crate::nn::{
    ConvLayer, Eca, EcaConfig, GruLayer, GruStack, GruStackConfig, LayerNorm, Linear, MultiHeadAttention, SamConfig,
    SelfAttentionModule, TransformerBlock,
};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Pass threshold on the relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Problem sizes of the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteScale {
    Tiny,
    Small,
}

impl SuiteScale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(SuiteScale::Tiny),
            "small" => Ok(SuiteScale::Small),
            other => Err(Error::invalid(format!("unknown grad-check scale `{other}` (tiny|small)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub scale: SuiteScale,
    pub seeds: u64,
    /// Deliberately corrupts the backward rule of one op family.
    pub fault: Option<OpKind>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            scale: SuiteScale::Tiny,
            seeds: 20,
            fault: None,
        }
    }
}

/// Worst case of one family over all seeds.
#[derive(Debug, Clone, Serialize)]
pub struct FamilyReport {
    pub family: &'static str,
    pub seeds: u64,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_seed: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub scale: SuiteScale,
    pub tolerance: f64,
    pub families: Vec<FamilyReport>,
    pub elapsed_s: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.families.iter().all(|f| f.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &FamilyReport> {
        self.families.iter().filter(|f| !f.passed)
    }
}

struct Case {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
    dims: Dims,
    scale: SuiteScale,
}

#[derive(Clone, Copy)]
struct Dims {
    rows: usize,
    dim: usize,
    heads: usize,
    hidden: usize,
    image: usize,
}

type Family = fn(&mut Case, Option<OpKind>) -> Result<GradCheckReport>;

/// Family names in run order.
pub const FAMILIES: [&str; 15] = [
    "conv",
    "linear",
    "layer_norm",
    "softmax",
    "attention",
    "transformer_block",
    "self_attention",
    "eca",
    "gru_cell",
    "gru_stack",
    "encoder",
    "regression_head",
    "angular_loss",
    "pog_loss",
    "full_model",
];

const RUNNERS: [Family; 15] = [
    conv,
    linear,
    layer_norm,
    softmax,
    attention,
    transformer_block,
    self_attention,
    eca,
    gru_cell,
    gru_stack,
    encoder,
    regression_head,
    angular_loss,
    pog_loss,
    full_model,
];

impl Case {
    fn new(seed: u64, scale: SuiteScale) -> Self {
        let dims = match scale {
            SuiteScale::Tiny => Dims { rows: 3, dim: 4, heads: 2, hidden: 3, image: 5 },
            SuiteScale::Small => Dims { rows: 5, dim: 8, heads: 4, hidden: 6, image: 8 },
        };
        Case {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dims,
            scale,
        }
    }

    fn random(&mut self, shape: &[usize], scale: f64) -> Tensor<f64> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale)).expect("non-empty shape")
    }

    fn input(&mut self, name: &str, shape: &[usize]) -> Result<crate::params::ParamId> {
        let t = self.random(shape, 1.0);
        self.store.add(name, t)
    }

    fn check<F>(&mut self, fault: Option<OpKind>, entries: Option<usize>, mut f: F) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Graph<'_, f64>) -> Result<Var>,
    {
        let cfg = GradCheckConfig {
            max_entries_per_param: entries,
            sample_seed: self.rng.gen(),
            ..GradCheckConfig::default()
        };
        grad_check(
            &mut self.store,
            |g| {
                g.inject_fault(fault);
                f(g)
            },
            &cfg,
        )
    }
}

/// `Σ out ⊙ r` for a fixed random `r` of the same shape.
fn contract(g: &mut Graph<'_, f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(out, rv)?;
    Ok(g.sum(p))
}

fn conv(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let s = c.dims.image;
    let x = c.input("input", &[2, s, s])?;
    let layer = ConvLayer::new(&mut c.store, &mut c.rng, "conv", 2, 3, 3, 2, 1)?;
    let o = (s - 1) / 2 + 1;
    let r = c.random(&[3, o, o], 1.0);
    c.check(fault, None, |g| {
        let xv = g.param(x);
        let y = layer.forward(g, xv)?;
        contract(g, y, &r)
    })
}

fn linear(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let Dims { rows, dim, hidden, .. } = c.dims;
    let x = c.input("input", &[rows, dim])?;
    let layer = Linear::new(&mut c.store, &mut c.rng, "linear", dim, hidden)?;
    let r = c.random(&[rows, hidden], 1.0);
    c.check(fault, None, |g| {
        let xv = g.param(x);
        let y = layer.forward(g, xv)?;
        contract(g, y, &r)
    })
}

fn layer_norm(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let Dims { rows, dim, .. } = c.dims;
    let x = c.input("input", &[rows, dim])?;
    let norm = LayerNorm::new(&mut c.store, "norm", dim)?;
    let gamma = c.random(&[dim], 1.0);
    let beta = c.random(&[dim], 1.0);
    c.store.get_mut(norm.gamma).tensor = gamma;
    c.store.get_mut(norm.beta).tensor = beta;
    let r = c.random(&[rows, dim], 1.0);
    c.check(fault, None, |g| {
        let xv = g.param(x);
        let y = norm.forward(g, xv)?;
        contract(g, y, &r)
    })
}

fn softmax(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let Dims { rows, dim, .. } = c.dims;
    let x = c.input("input", &[rows, dim])?;
    let r = c.random(&[rows, dim], 1.0);
    c.check(fault, None, |g| {
        let xv = g.param(x);
        let y = g.softmax(xv);
        contract(g, y, &r)
    })
}

fn attention(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let Dims { rows, dim, heads, .. } = c.dims;
    let x = c.input("input", &[rows, dim])?;
    let mha = MultiHeadAttention::new(&mut c.store, &mut c.rng, "attn", dim, heads)?;
    let r = c.random(&[rows, dim], 1.0);
    c.check(fault, None, |g| {
        let xv = g.param(x);
        let y = mha.forward(g, xv)?;
        contract(g, y, &r)
    })
}

fn transformer_block(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let Dims { rows, dim, heads, hidden, .. } = c.dims;
    let x = c.input("input", &[rows, dim])?;
    let block = TransformerBlock::new(&mut c.store, &mut c.rng, "block", dim, heads, 2 * hidden)?;
    let r = c.random(&[rows, dim], 1.0);
    c.check(fault, None, |g| {
        let xv = g.param(x);
        let y = block.forward(g, xv)?;
        contract(g, y, &r)
    })
}

fn self_attention(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let Dims { rows, dim, heads, hidden, .. } = c.dims;
    let x = c.input("input", &[rows, dim])?;
    let cfg = SamConfig { seq_len: rows, dim, num_blocks: 2, num_heads: heads, ffn_hidden: 2 * hidden };
    let sam = SelfAttentionModule::new(&mut c.store, &mut c.rng, "sam", cfg)?;
    let r = c.random(&[rows, dim], 1.0);
    c.check(fault, Some(8), |g| {
        let xv = g.param(x);
        let y = sam.forward(g, xv)?;
        contract(g, y, &r)
    })
}

fn eca(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let ch = 2 * c.dims.dim;
    let x = c.input("input", &[ch, 3, 3])?;
    let module = Eca::new(&mut c.store, &mut c.rng, "eca", EcaConfig::auto(ch)?)?;
    let r = c.random(&[ch, 3, 3], 1.0);
    c.check(fault, None, |g| {
        let xv = g.param(x);
        let y = module.forward(g, xv)?;
        contract(g, y, &r)
    })
}

fn gru_cell(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let Dims { dim, hidden, .. } = c.dims;
    let x = c.input("input", &[1, dim])?;
    let h0 = c.input("h0", &[hidden])?;
    let layer = GruLayer::new(&mut c.store, &mut c.rng, "gru", dim, hidden)?;
    let r = c.random(&[1, hidden], 1.0);
    c.check(fault, None, |g| {
        let (xv, hv) = (g.param(x), g.param(h0));
        let y = layer.forward(g, xv, hv)?;
        contract(g, y, &r)
    })
}

fn gru_stack(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let Dims { rows, dim, hidden, .. } = c.dims;
    let x = c.input("input", &[rows + 1, dim])?;
    let h0 = [c.input("h0.0", &[hidden])?, c.input("h0.1", &[hidden])?];
    let cfg = GruStackConfig { input_dim: dim, hidden_dim: hidden, num_layers: 2 };
    let stack = GruStack::new(&mut c.store, &mut c.rng, "gru", cfg)?;
    let r = c.random(&[rows + 1, hidden], 1.0);
    let rf = c.random(&[hidden], 1.0);
    c.check(fault, None, |g| {
        let xv = g.param(x);
        let h = [g.param(h0[0]), g.param(h0[1])];
        let (out, finals) = stack.forward(g, xv, &h)?;
        let a = contract(g, out, &r)?;
        let b = contract(g, finals[0], &rf)?;
        g.add(a, b)
    })
}

fn encoder(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let size = 2 * c.dims.image;
    let cfg = EncoderConfig { input_size: size, widths: vec![2, 3] };
    let grid = cfg.grid();
    let x = c.input("input", &[3, size, size])?;
    let enc = Encoder::new(&mut c.store, &mut c.rng, "encoder", cfg)?;
    let r = c.random(&[3, grid, grid], 1.0);
    c.check(fault, Some(12), |g| {
        let xv = g.param(x);
        let y = enc.forward(g, xv)?;
        contract(g, y, &r)
    })
}

fn regression_head(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let Dims { rows, dim, hidden, .. } = c.dims;
    let x = c.input("input", &[rows, dim])?;
    let head = RegressionHead::new(&mut c.store, &mut c.rng, "head", dim, hidden)?;
    let r = c.random(&[1, 2], 1.0);
    c.check(fault, None, |g| {
        let xv = g.param(x);
        let y = head.forward(g, xv)?;
        contract(g, y, &r)
    })
}

fn gaze_rows(c: &mut Case, n: usize) -> Tensor<f64> {
    let rng = &mut c.rng;
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let v = GazeAngles::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)).to_vector();
        let s = rng.gen_range(0.6..1.4);
        data.extend([v.x * s, v.y * s, v.z * s]);
    }
    Tensor::new(&[n, 3], data).expect("matching length")
}

fn angular_loss(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let n = c.dims.rows;
    let pred = gaze_rows(c, n);
    let v = c.store.add("prediction", pred)?;
    let target = gaze_rows(c, n);
    c.check(fault, None, |g| {
        let vv = g.param(v);
        let e = g.angular_error_deg(vv, &target, ANGULAR_EPS)?;
        let m = g.mean(e, 0)?;
        Ok(g.sum(m))
    })
}

fn pog_loss(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let n = c.dims.rows;
    let pred = gaze_rows(c, n);
    let v = c.store.add("prediction", pred)?;
    let origins = {
        let rng = &mut c.rng;
        Tensor::from_fn(&[n, 3], |i| match i % 3 {
            2 => rng.gen_range(45.0..65.0),
            _ => rng.gen_range(-5.0..5.0),
        })?
    };
    let targets = c.random(&[n, 2], 20.0);
    let screen = ScreenGeometry::default().projection();
    let r = c.random(&[n, 2], 1.0);
    c.check(fault, None, |g| {
        let vv = g.param(v);
        let (e, _) = g.pog_error(vv, &origins, &targets, &screen)?;
        contract(g, e, &r)
    })
}

fn full_model(c: &mut Case, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let (frames_n, entries) = match c.scale {
        SuiteScale::Tiny => (2, 6),
        SuiteScale::Small => (3, 4),
    };
    let cfg = ModelConfig::miniature();
    let model = StGaze::new(&mut c.store, &mut c.rng, cfg.clone())?;
    let (e, f) = (cfg.eye.input_size, cfg.face.input_size);
    let frames: Vec<Frame<f64>> = (0..frames_n)
        .map(|_| Frame {
            eye_left: c.random(&[3, e, e], 1.0),
            eye_right: c.random(&[3, e, e], 1.0),
            face: c.random(&[3, f, f], 1.0),
        })
        .collect();
    let targets = ClipTargets {
        gaze: (0..frames_n)
            .map(|_| GazeAngles::new(c.rng.gen_range(-0.4..0.4), c.rng.gen_range(-0.4..0.4)))
            .collect(),
        origin: [1.0, -2.0, 50.0],
    };
    let geom = ScreenGeometry::default();
    let w = LossWeights { angular: 1.0, pog_cm: 0.01, pog_px: 0.001 };
    c.check(fault, Some(entries), |g| {
        let out = model.forward(g, &frames, None, false)?;
        Ok(clip_loss(g, out.gaze_vectors, &targets, &geom, &w)?.total)
    })
}

/// Runs every family for `cfg.seeds` seeds.
///
/// A family whose objective fails to evaluate is reported as failed with an
/// infinite error rather than aborting the suite.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    if cfg.seeds == 0 {
        return Err(Error::invalid("grad-check suite needs at least one seed"));
    }
    let start = Instant::now();
    let mut families = Vec::with_capacity(FAMILIES.len());
    for (fi, (&family, run)) in FAMILIES.iter().zip(RUNNERS).enumerate() {
        let mut rep = FamilyReport {
            family,
            seeds: cfg.seeds,
            entries: 0,
            max_rel_err: 0.0,
            worst_param: String::new(),
            worst_seed: 0,
            passed: true,
        };
        for seed in 0..cfg.seeds {
            let mut case = Case::new(seed.wrapping_mul(1000).wrapping_add(fi as u64), cfg.scale);
            match run(&mut case, cfg.fault) {
                Ok(r) => {
                    rep.entries += r.entries_checked();
                    if let Some(w) = r.worst() {
                        if w.max_rel_err > rep.max_rel_err || rep.worst_param.is_empty() {
                            rep.max_rel_err = w.max_rel_err;
                            rep.worst_param = w.name.clone();
                            rep.worst_seed = seed;
                        }
                    }
                }
                Err(e) => {
                    rep.max_rel_err = f64::INFINITY;
                    rep.worst_param = e.to_string();
                    rep.worst_seed = seed;
                    break;
                }
            }
        }
        rep.passed = rep.max_rel_err < GRAD_TOLERANCE;
        families.push(rep);
    }
    Ok(SuiteReport {
        scale: cfg.scale,
        tolerance: GRAD_TOLERANCE,
        families,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
