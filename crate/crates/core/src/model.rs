//! The dual-stream gaze network.
//!
//! Per frame and per stream: the eye patch and the face are encoded to
//! feature grids, concatenated along channels and optionally re-weighted by
//! channel attention, flattened to a raster-order patch sequence, refined by
//! self-attention, scanned by a stacked GRU and regressed to (pitch, yaw).
//! The GRU's state after the last patch of frame `t` is the initial state of
//! frame `t + 1`, so the per-frame scans form one continuous scan over the
//! whole clip.
//!
//! The right eye is mirrored before encoding and its yaw negated afterwards;
//! both streams share parameters by default and the final gaze is the
//! average of the two unit gaze vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{GazeAngles, GazeVector};
use crate::nn::{
    eca_kernel_size, ConvLayer, Eca, EcaConfig, GruStack, GruStackConfig, Linear, SamConfig, SelfAttentionModule,
};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Model output; both angles lie in `[−π/2, π/2]`.
pub type GazePrediction = GazeAngles;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Side of the square input image.
    pub input_size: usize,
    /// Channel width of each stride-2 stage; the last entry is the output width.
    pub widths: Vec<usize>,
}

impl EncoderConfig {
    pub fn out_channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    /// Side of the output feature grid.
    pub fn grid(&self) -> usize {
        // 3×3 kernel, stride 2, padding 1: ⌊(s − 1)/2⌋ + 1.
        self.widths.iter().fold(self.input_size, |s, _| (s - 1) / 2 + 1)
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.input_size == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid(format!("{what} encoder needs a positive input size and widths: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub eye: EncoderConfig,
    pub face: EncoderConfig,
    /// `None` derives the kernel from the fused channel count.
    pub eca_kernel: Option<usize>,
    pub sam_blocks: usize,
    pub sam_heads: usize,
    pub ffn_hidden: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub head_hidden: usize,
    pub use_eca: bool,
    pub use_sam: bool,
    pub use_gru: bool,
    pub pool_before_gru: bool,
    /// Left and right streams use one parameter set.
    pub share_streams: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            eye: EncoderConfig {
                input_size: 128,
                widths: vec![16, 32, 64, 128],
            },
            face: EncoderConfig {
                input_size: 128,
                widths: vec![8, 16, 24, 32],
            },
            eca_kernel: None,
            sam_blocks: 3,
            sam_heads: 8,
            ffn_hidden: 640,
            gru_hidden: 160,
            gru_layers: 2,
            head_hidden: 64,
            use_eca: true,
            use_sam: true,
            use_gru: true,
            pool_before_gru: false,
            share_streams: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration for fast end-to-end training on one CPU core.
    pub fn tiny() -> Self {
        ModelConfig {
            eye: EncoderConfig {
                input_size: 128,
                widths: vec![8, 16, 32, 32],
            },
            face: EncoderConfig {
                input_size: 128,
                widths: vec![4, 8, 8, 8],
            },
            sam_blocks: 2,
            sam_heads: 4,
            ffn_hidden: 160,
            gru_hidden: 40,
            gru_layers: 2,
            head_hidden: 64,
            ..ModelConfig::default()
        }
    }

    /// Miniature configuration (2×2 grid) for 64-bit gradient checks.
    pub fn miniature() -> Self {
        ModelConfig {
            eye: EncoderConfig {
                input_size: 8,
                widths: vec![4, 8],
            },
            face: EncoderConfig {
                input_size: 8,
                widths: vec![2, 4],
            },
            sam_blocks: 1,
            sam_heads: 2,
            ffn_hidden: 16,
            gru_hidden: 12,
            gru_layers: 2,
            head_hidden: 8,
            ..ModelConfig::default()
        }
    }

    pub fn fused_channels(&self) -> usize {
        self.eye.out_channels() + self.face.out_channels()
    }

    pub fn grid(&self) -> usize {
        self.eye.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn sam_config(&self) -> SamConfig {
        SamConfig {
            seq_len: self.seq_len(),
            dim: self.fused_channels(),
            num_blocks: self.sam_blocks,
            num_heads: self.sam_heads,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn gru_config(&self) -> GruStackConfig {
        GruStackConfig {
            input_dim: self.fused_channels(),
            hidden_dim: self.gru_hidden,
            num_layers: self.gru_layers,
        }
    }

    pub fn eca_config(&self) -> Result<EcaConfig> {
        let channels = self.fused_channels();
        let kernel_size = match self.eca_kernel {
            Some(k) => k,
            None => eca_kernel_size(channels)?,
        };
        let cfg = EcaConfig { channels, kernel_size };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Width of the sequence that reaches the regression head.
    pub fn head_input(&self) -> usize {
        if self.use_gru {
            self.gru_hidden
        } else {
            self.fused_channels()
        }
    }

    /// Length of the sequence the recurrence scans per frame.
    pub fn scan_len(&self) -> usize {
        if self.pool_before_gru {
            1
        } else {
            self.seq_len()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.eye.validate("eye")?;
        self.face.validate("face")?;
        if self.eye.grid() != self.face.grid() {
            return Err(Error::invalid(format!(
                "eye grid {0}×{0} and face grid {1}×{1} differ",
                self.eye.grid(),
                self.face.grid()
            )));
        }
        if !self.use_gru && self.pool_before_gru {
            return Err(Error::invalid("use_gru = false and pool_before_gru = true are mutually exclusive"));
        }
        if self.head_hidden == 0 || self.gru_hidden == 0 || self.gru_layers == 0 {
            return Err(Error::invalid("head and GRU sizes must be positive"));
        }
        if self.use_sam {
            self.sam_config().validate()?;
        }
        if self.use_eca {
            self.eca_config()?;
        }
        Ok(())
    }
}

/// The four module ablations plus the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoEca,
    NoSam,
    NoGru,
    PoolPreGru,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoEca,
        Ablation::NoSam,
        Ablation::NoGru,
        Ablation::PoolPreGru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoEca => "no_eca",
            Ablation::NoSam => "no_sam",
            Ablation::NoGru => "no_gru",
            Ablation::PoolPreGru => "pool_pre_gru",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation '{s}'")))
    }

    pub fn apply(self, mut cfg: ModelConfig) -> ModelConfig {
        cfg.use_eca = true;
        cfg.use_sam = true;
        cfg.use_gru = true;
        cfg.pool_before_gru = false;
        match self {
            Ablation::Full => {}
            Ablation::NoEca => cfg.use_eca = false,
            Ablation::NoSam => cfg.use_sam = false,
            Ablation::NoGru => cfg.use_gru = false,
            Ablation::PoolPreGru => cfg.pool_before_gru = true,
        }
        cfg
    }
}

/// GRU hidden state carried between frames, `layers × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState<T> {
    pub hidden: Tensor<T>,
}

impl<T: Real> StreamState<T> {
    pub fn zeros(layers: usize, hidden: usize) -> Result<Self> {
        Ok(StreamState {
            hidden: Tensor::zeros(&[layers, hidden])?,
        })
    }

    pub fn for_config(cfg: &ModelConfig) -> Result<Self> {
        Self::zeros(cfg.gru_layers, cfg.gru_hidden)
    }

    pub fn is_zero(&self) -> bool {
        self.hidden.data().iter().all(|&x| x == T::zero())
    }

    /// Places one constant `[hidden]` leaf per layer on the tape.
    pub fn to_vars(&self, g: &mut Graph<'_, T>) -> Result<Vec<Var>> {
        let hidden = self.hidden.shape()[1];
        self.hidden
            .data()
            .chunks(hidden)
            .map(|row| Ok(g.constant(Tensor::new(&[hidden], row.to_vec())?)))
            .collect()
    }

    pub fn from_vars(g: &Graph<'_, T>, vars: &[Var]) -> Result<Self> {
        let hidden = vars.first().map(|&v| g.value(v).numel()).unwrap_or(0);
        let data = vars.iter().flat_map(|&v| g.value(v).data().iter().copied()).collect();
        Ok(StreamState {
            hidden: Tensor::new(&[vars.len(), hidden], data)?,
        })
    }
}

/// Stack of stride-2 `3×3 conv → bias → swish` stages.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub stages: Vec<ConvLayer>,
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        config: EncoderConfig,
    ) -> Result<Self> {
        config.validate(name)?;
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(config.widths.len());
        for (i, &w) in config.widths.iter().enumerate() {
            stages.push(ConvLayer::new(store, rng, &format!("{name}.block{i}.conv"), c_in, w, 3, 2, 1)?);
            c_in = w;
        }
        Ok(Encoder { stages, config })
    }

    /// `3×S×S` image to a `C_out×G×G` feature grid.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let s = self.config.input_size;
        if g.shape(image) != [3, s, s] {
            return Err(Error::invalid(format!(
                "encoder expects a 3×{s}×{s} image, got {:?}",
                g.shape(image)
            )));
        }
        let mut x = image;
        for stage in &self.stages {
            x = stage.forward(g, x)?;
            x = g.swish(x);
        }
        Ok(x)
    }
}

/// Mean over positions → `Linear → swish → Linear → tanh → ×π/2`.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl RegressionHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(RegressionHead {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), in_dim, hidden)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, 2)?,
        })
    }

    /// `S×D` sequence to a `1×2` (pitch, yaw) row.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let d = g.shape(z)[1];
        let pooled = g.mean(z, 0)?;
        let pooled = g.reshape(pooled, &[1, d])?;
        let h = self.fc1.forward(g, pooled)?;
        let h = g.swish(h);
        let logits = self.fc2.forward(g, h)?;
        let t = g.tanh(logits);
        Ok(g.scale(t, T::lit(std::f64::consts::FRAC_PI_2)))
    }
}

/// Parameters of one eye-face stream.
#[derive(Debug, Clone)]
pub struct StreamModules {
    pub eye: Encoder,
    pub face: Encoder,
    pub eca: Option<Eca>,
    pub sam: Option<SelfAttentionModule>,
    pub gru: Option<GruStack>,
    pub head: RegressionHead,
}

impl StreamModules {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let eye = Encoder::new(store, rng, &format!("{prefix}eye_encoder"), cfg.eye.clone())?;
        let face = Encoder::new(store, rng, &format!("{prefix}face_encoder"), cfg.face.clone())?;
        let eca = if cfg.use_eca {
            Some(Eca::new(store, rng, &format!("{prefix}eca"), cfg.eca_config()?)?)
        } else {
            None
        };
        let sam = if cfg.use_sam {
            Some(SelfAttentionModule::new(store, rng, &format!("{prefix}sam"), cfg.sam_config())?)
        } else {
            None
        };
        let gru = if cfg.use_gru {
            Some(GruStack::new(store, rng, &format!("{prefix}gru"), cfg.gru_config())?)
        } else {
            None
        };
        let head = RegressionHead::new(store, rng, &format!("{prefix}head"), cfg.head_input(), cfg.head_hidden)?;
        Ok(StreamModules {
            eye,
            face,
            eca,
            sam,
            gru,
            head,
        })
    }
}

/// Per-stage shapes recorded for the first frame of the left stream.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ShapeTrace {
    pub stages: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    pub fn get(&self, stage: &str) -> Option<&[usize]> {
        self.stages.iter().find(|(s, _)| s == stage).map(|(_, v)| v.as_slice())
    }
}

/// One clip frame: left eye, right eye (unflipped) and face, each `3×S×S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    pub eye_left: Tensor<T>,
    pub eye_right: Tensor<T>,
    pub face: Tensor<T>,
}

impl<T: Real> Frame<T> {
    pub fn cast<U: Real>(&self) -> Frame<U> {
        Frame {
            eye_left: self.eye_left.cast(),
            eye_right: self.eye_right.cast(),
            face: self.face.cast(),
        }
    }
}

/// Graph handles produced by [`StGaze::forward`].
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `T×3` mean of the two streams' unit gaze vectors (not renormalised).
    pub gaze_vectors: Var,
    /// `T×2` left-stream (pitch, yaw).
    pub left: Var,
    /// `T×2` right-stream (pitch, yaw) after un-mirroring.
    pub right: Var,
    pub left_state: Vec<Var>,
    pub right_state: Vec<Var>,
    pub trace: ShapeTrace,
}

impl ModelOutput {
    /// Final per-frame predictions from the averaged vectors.
    pub fn predictions<T: Real>(&self, g: &Graph<'_, T>) -> Result<Vec<GazePrediction>> {
        g.value(self.gaze_vectors)
            .data()
            .chunks(3)
            .enumerate()
            .map(|(t, v)| {
                let v = GazeVector::new(v[0].as_f64(), v[1].as_f64(), v[2].as_f64());
                normalize_average(v).map_err(|_| {
                    Error::numeric(format!(
                        "frame {t}: left and right gaze vectors cancel; the average has zero norm"
                    ))
                })
            })
            .collect()
    }

    pub fn stream_predictions<T: Real>(&self, g: &Graph<'_, T>, var: Var) -> Vec<GazePrediction> {
        g.value(var)
            .data()
            .chunks(2)
            .map(|r| GazeAngles::new(r[0].as_f64(), r[1].as_f64()))
            .collect()
    }

    pub fn states<T: Real>(&self, g: &Graph<'_, T>) -> Result<(StreamState<T>, StreamState<T>)> {
        Ok((
            StreamState::from_vars(g, &self.left_state)?,
            StreamState::from_vars(g, &self.right_state)?,
        ))
    }
}

/// Raster-order flattening `D×G×G → G²×D`: sequence index `row·G + col`.
pub fn patchify<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[d, h, w] = x.shape() else {
        return Err(Error::invalid(format!("patchify expects D×H×W, got {:?}", x.shape())));
    };
    x.clone().reshape(&[d, h * w])?.transpose2d()
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(seq: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let d = seq.shape()[1];
    seq.transpose2d()?.reshape(&[d, grid.0, grid.1])
}

fn patchify_var<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let (d, h, w) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
    let flat = g.reshape(x, &[d, h * w])?;
    g.transpose(flat)
}

/// The full dual-stream network.
#[derive(Debug, Clone)]
pub struct StGaze {
    pub config: ModelConfig,
    pub left: StreamModules,
    /// Present only when streams do not share parameters.
    pub right: Option<StreamModules>,
}

struct Tracer<'a> {
    trace: Option<&'a mut ShapeTrace>,
}

impl Tracer<'_> {
    fn check<T: Real>(&mut self, g: &Graph<'_, T>, v: Var, stage: &str, expected: &[usize]) -> Result<()> {
        let got = g.shape(v);
        if got != expected {
            return Err(Error::Validation(format!(
                "shape ledger: stage '{stage}' produced {got:?}, expected {expected:?}"
            )));
        }
        if let Some(t) = self.trace.as_deref_mut() {
            t.stages.push((stage.to_string(), got.to_vec()));
        }
        Ok(())
    }
}

impl StGaze {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let left = StreamModules::new(store, rng, "", &config)?;
        let right = if config.share_streams {
            None
        } else {
            Some(StreamModules::new(store, rng, "right.", &config)?)
        };
        Ok(StGaze { config, left, right })
    }

    fn right_modules(&self) -> &StreamModules {
        self.right.as_ref().unwrap_or(&self.left)
    }

    pub fn zero_state<T: Real>(&self) -> Result<StreamState<T>> {
        StreamState::for_config(&self.config)
    }

    /// Concatenates eye and face grids along channels and applies channel attention.
    pub fn fuse<T: Real>(&self, g: &mut Graph<'_, T>, m: &StreamModules, eye: Var, face: Var) -> Result<Var> {
        if g.shape(eye)[1..] != g.shape(face)[1..] {
            return Err(Error::invalid(format!(
                "fuse: eye grid {:?} and face grid {:?} differ",
                g.shape(eye),
                g.shape(face)
            )));
        }
        let x = g.concat(&[eye, face], 0)?;
        match &m.eca {
            Some(eca) => eca.forward(g, x),
            None => Ok(x),
        }
    }

    /// Patch sequence, refined by self-attention when enabled.
    pub fn sam_forward<T: Real>(&self, g: &mut Graph<'_, T>, m: &StreamModules, fused: Var) -> Result<Var> {
        let seq = patchify_var(g, fused)?;
        match &m.sam {
            Some(sam) => sam.forward(g, seq),
            None => Ok(seq),
        }
    }

    /// Scans `y` with the GRU stack starting from `state`; returns all top-layer
    /// outputs and the per-layer state after the last position.
    pub fn st_recurrence<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        m: &StreamModules,
        y: Var,
        state: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        match &m.gru {
            Some(gru) => gru.forward(g, y, state),
            None => Ok((y, state.to_vec())),
        }
    }

    /// One stream over a clip. `face_feats` are the encoded face grids.
    fn run_stream<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        m: &StreamModules,
        eyes: &[Var],
        face_feats: &[Var],
        mut state: Vec<Var>,
        tracer: &mut Tracer<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.config;
        let grid = cfg.grid();
        let (seq, d) = (cfg.seq_len(), cfg.fused_channels());
        let mut rows = Vec::with_capacity(eyes.len());
        for (t, (&eye_img, &face)) in eyes.iter().zip(face_feats).enumerate() {
            let eye = m.eye.forward(g, eye_img)?;
            let mut tr = Tracer {
                trace: if t == 0 { tracer.trace.as_deref_mut() } else { None },
            };
            tr.check(g, eye, "eye_features", &[cfg.eye.out_channels(), grid, grid])?;
            tr.check(g, face, "face_features", &[cfg.face.out_channels(), grid, grid])?;
            let fused = self.fuse(g, m, eye, face)?;
            tr.check(g, fused, "fused", &[d, grid, grid])?;
            let y = self.sam_forward(g, m, fused)?;
            tr.check(g, y, "attended", &[seq, d])?;
            let y = if cfg.pool_before_gru {
                let pooled = g.mean(y, 0)?;
                g.reshape(pooled, &[1, d])?
            } else {
                y
            };
            let (z, next) = self.st_recurrence(g, m, y, &state)?;
            tr.check(g, z, "recurrent", &[cfg.scan_len(), cfg.head_input()])?;
            state = next;
            let out = m.head.forward(g, z)?;
            tr.check(g, out, "gaze", &[1, 2])?;
            rows.push(out);
        }
        let angles = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
        Ok((angles, state))
    }

    /// Runs both streams over a clip. `states` default to zero.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        frames: &[Frame<T>],
        states: Option<(&StreamState<T>, &StreamState<T>)>,
        trace: bool,
    ) -> Result<ModelOutput> {
        if frames.is_empty() {
            return Err(Error::invalid("a clip needs at least one frame"));
        }
        let cfg = &self.config;
        let mut shape_trace = ShapeTrace::default();
        let mut tracer = Tracer {
            trace: trace.then_some(&mut shape_trace),
        };
        let zero = self.zero_state::<T>()?;
        let (sl, sr) = states.unwrap_or((&zero, &zero));
        for s in [sl, sr] {
            if s.hidden.shape() != [cfg.gru_layers, cfg.gru_hidden] {
                return Err(Error::invalid(format!(
                    "stream state shape {:?}, expected [{}, {}]",
                    s.hidden.shape(),
                    cfg.gru_layers,
                    cfg.gru_hidden
                )));
            }
        }
        let (size, fsize) = (cfg.eye.input_size, cfg.face.input_size);
        let mut eyes_l = Vec::with_capacity(frames.len());
        let mut eyes_r = Vec::with_capacity(frames.len());
        let mut faces = Vec::with_capacity(frames.len());
        for (t, f) in frames.iter().enumerate() {
            for (img, s, what) in [(&f.eye_left, size, "left eye"), (&f.eye_right, size, "right eye"), (&f.face, fsize, "face")] {
                if img.shape() != [3, s, s] {
                    return Err(Error::invalid(format!(
                        "frame {t}: {what} image has shape {:?}, expected [3, {s}, {s}]",
                        img.shape()
                    )));
                }
            }
            let l = g.constant(f.eye_left.clone());
            if t == 0 {
                tracer.check(g, l, "image", &[3, size, size])?;
            }
            eyes_l.push(l);
            eyes_r.push(g.constant(f.eye_right.hflip()));
            faces.push(g.constant(f.face.clone()));
        }
        let right_m = self.right_modules();
        let face_l = faces.iter().map(|&f| self.left.face.forward(g, f)).collect::<Result<Vec<_>>>()?;
        let face_r = match &self.right {
            None => face_l.clone(),
            Some(m) => faces.iter().map(|&f| m.face.forward(g, f)).collect::<Result<Vec<_>>>()?,
        };
        let init_l = sl.to_vars(g)?;
        let init_r = sr.to_vars(g)?;
        let (left, left_state) = self.run_stream(g, &self.left, &eyes_l, &face_l, init_l, &mut tracer)?;
        let mut silent = Tracer { trace: None };
        let (right_raw, right_state) = self.run_stream(g, right_m, &eyes_r, &face_r, init_r, &mut silent)?;
        let n = frames.len();
        let unflip = g.constant(Tensor::from_fn(&[n, 2], |i| if i % 2 == 0 { T::one() } else { -T::one() })?);
        let right = g.mul(right_raw, unflip)?;
        let vl = g.angles_to_vector(left)?;
        let vr = g.angles_to_vector(right)?;
        let sum = g.add(vl, vr)?;
        let gaze_vectors = g.scale(sum, T::lit(0.5));
        Ok(ModelOutput {
            gaze_vectors,
            left,
            right,
            left_state,
            right_state,
            trace: shape_trace,
        })
    }

    /// Convenience inference: final predictions and output states.
    pub fn predict<T: Real>(
        &self,
        store: &ParamStore<T>,
        frames: &[Frame<T>],
        states: Option<(&StreamState<T>, &StreamState<T>)>,
    ) -> Result<(Vec<GazePrediction>, (StreamState<T>, StreamState<T>))> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, frames, states, false)?;
        Ok((out.predictions(&g)?, out.states(&g)?))
    }
}

/// Mean of two unit vectors shorter than this is treated as degenerate.
const MIN_AVERAGE_NORM: f64 = 1e-9;

fn normalize_average(m: GazeVector) -> Result<GazeAngles> {
    if !(m.norm() >= MIN_AVERAGE_NORM) {
        return Err(Error::numeric(format!("average gaze vector {m:?} has (near) zero norm")));
    }
    Ok(m.normalized()?.to_angles())
}

/// Average of two gaze directions as unit vectors, renormalised.
pub fn average_gaze(a: GazeAngles, b: GazeAngles) -> Result<GazeAngles> {
    let (va, vb) = (a.to_vector(), b.to_vector());
    let m = GazeVector::new(0.5 * (va.x + vb.x), 0.5 * (va.y + vb.y), 0.5 * (va.z + vb.z));
    normalize_average(m).map_err(|_| Error::numeric(format!("gaze {a:?} and {b:?} are antipodal; their average is undefined")))
}
