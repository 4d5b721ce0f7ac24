//! Deterministic synthetic gaze video.
//!
//! Eye patches show a grey background, a bright sclera ellipse, an iris disc
//! displaced by `gain·sin(yaw)` horizontally and `−gain·sin(pitch)`
//! vertically, a dark pupil and a small corner marker on the nasal side
//! (mirrored between the eyes). Faces contain both eyes at reduced scale in
//! fixed sockets plus a head-pose bar. Shapes are anti-aliased analytically:
//! pixel `i` covers `[i, i + 1)` and a shape contributes
//! `clamp(0.5 − signed_distance, 0, 1)` at the pixel centre.
//!
//! Gaze follows a mean-reverting random walk per clip. Every random stream
//! is derived from the clip seed with [`derive_seed`], so generating clips
//! in any order or in parallel yields identical bytes.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::OffsetReader;
use crate::error::{Error, Result};
use crate::geometry::GazeAngles;
use crate::loss::ClipTargets;
use crate::model::Frame;
use crate::tensor::Tensor;

/// Side of every rendered image.
pub const IMAGE_SIZE: usize = 128;
const CENTRE: f64 = IMAGE_SIZE as f64 / 2.0;
const PLANE: usize = IMAGE_SIZE * IMAGE_SIZE;

pub const SEQUENCE_MAGIC: &[u8; 4] = b"STGZ";
pub const SEQUENCE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    /// Bound on |pitch| and |yaw|, degrees.
    pub gaze_range_deg: f64,
    /// Iris travel in pixels per unit of `sin(angle)`.
    pub gain_px: f64,
    pub sclera_rx: f64,
    pub sclera_ry: f64,
    pub iris_radius: f64,
    pub pupil_radius: f64,
    pub background_level: f64,
    pub sclera_level: f64,
    pub iris_level: f64,
    pub pupil_level: f64,
    pub marker_level: f64,
    pub skin_level: f64,
    pub noise_std: f64,
    /// Random-walk step, degrees per frame.
    pub step_std_deg: f64,
    /// Mean-reversion factor of the walk.
    pub reversion: f64,
    /// Horizontal offset of the face's head-pose bar, pixels.
    pub head_pose_px: f64,
    /// Gaze origin in camera coordinates, cm.
    pub origin_cm: [f64; 3],
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            gaze_range_deg: 25.0,
            gain_px: 48.0,
            sclera_rx: 54.0,
            sclera_ry: 34.0,
            iris_radius: 15.0,
            pupil_radius: 6.0,
            background_level: 0.45,
            sclera_level: 0.92,
            iris_level: 0.3,
            pupil_level: 0.04,
            marker_level: 0.7,
            skin_level: 0.62,
            noise_std: 0.02,
            step_std_deg: 2.0,
            reversion: 0.9,
            head_pose_px: 0.0,
            origin_cm: [0.0, 10.0, 55.0],
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let range = self.gaze_range_deg.to_radians();
        if !(self.gaze_range_deg >= 0.0 && range < std::f64::consts::FRAC_PI_2) {
            return Err(Error::invalid(format!("gaze range {}° must lie in [0, 90)", self.gaze_range_deg)));
        }
        let reach = self.gain_px * range.sin() + self.iris_radius;
        if !(self.iris_radius > 0.0 && self.pupil_radius > 0.0 && self.pupil_radius <= self.iris_radius) {
            return Err(Error::invalid("need 0 < pupil radius ≤ iris radius"));
        }
        if !(self.gain_px >= 0.0) || reach >= CENTRE {
            return Err(Error::invalid(format!(
                "iris reaches {reach:.1} px from the centre at extreme gaze; the patch half-width is {CENTRE}"
            )));
        }
        if !(self.noise_std >= 0.0 && self.step_std_deg >= 0.0 && (0.0..=1.0).contains(&self.reversion)) {
            return Err(Error::invalid("noise and step std must be ≥ 0 and reversion in [0, 1]"));
        }
        if !(self.origin_cm[2] > 0.0) {
            return Err(Error::invalid("gaze origin must lie in front of the screen (z > 0)"));
        }
        let levels = [
            self.background_level,
            self.sclera_level,
            self.iris_level,
            self.pupil_level,
            self.marker_level,
            self.skin_level,
        ];
        if levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::invalid("grey levels must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn noiseless(&self) -> Self {
        SceneParams {
            noise_std: 0.0,
            ..self.clone()
        }
    }
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of child stream `index` of `parent`.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index))
}

/// Single-channel canvas in continuous pixel coordinates.
struct Canvas {
    px: Vec<f64>,
}

impl Canvas {
    fn new(level: f64) -> Self {
        Canvas { px: vec![level; PLANE] }
    }

    /// Blends `level` with coverage from `sd(ux, uy)`, the signed distance at
    /// pixel centres given relative to the image centre.
    fn paint(&mut self, level: f64, sd: impl Fn(f64, f64) -> f64) {
        for row in 0..IMAGE_SIZE {
            let uy = row as f64 - (CENTRE - 0.5);
            for col in 0..IMAGE_SIZE {
                let ux = col as f64 - (CENTRE - 0.5);
                let c = (0.5 - sd(ux, uy)).clamp(0.0, 1.0);
                if c > 0.0 {
                    let p = &mut self.px[row * IMAGE_SIZE + col];
                    *p = *p * (1.0 - c) + level * c;
                }
            }
        }
    }

    /// Three noisy channels clamped to `[0, 1]`.
    fn finish(self, noise_std: f64, seed: u64) -> Tensor<f32> {
        let mut data = Vec::with_capacity(3 * PLANE);
        if noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, noise_std).expect("finite noise std");
            for _ in 0..3 {
                data.extend(self.px.iter().map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32));
            }
        } else {
            for _ in 0..3 {
                data.extend(self.px.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
            }
        }
        Tensor::new(&[3, IMAGE_SIZE, IMAGE_SIZE], data).expect("fixed image shape")
    }
}

fn disc(cx: f64, cy: f64, r: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (dx * dx + dy * dy).sqrt() - r
    }
}

/// First-order signed distance to an axis-aligned ellipse.
fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let q = ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt();
        if q == 0.0 {
            -rx.min(ry)
        } else {
            (q - 1.0) * (dx * dx + dy * dy).sqrt() / q
        }
    }
}

fn rect(cx: f64, cy: f64, hw: f64, hh: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, y| ((x - cx).abs() - hw).max((y - cy).abs() - hh)
}

/// Draws one eye at offset `(ox, oy)` from the image centre and `scale`.
fn draw_eye(c: &mut Canvas, g: GazeAngles, side: Side, p: &SceneParams, ox: f64, oy: f64, scale: f64) {
    c.paint(p.sclera_level, ellipse(ox, oy, scale * p.sclera_rx, scale * p.sclera_ry));
    let marker = match side {
        Side::Left => scale * 0.8 * p.sclera_rx,
        Side::Right => -(scale * 0.8 * p.sclera_rx),
    };
    c.paint(p.marker_level, disc(ox + marker, oy + scale * 4.0, scale * 5.0));
    let ix = ox + scale * p.gain_px * g.yaw.sin();
    let iy = oy - scale * p.gain_px * g.pitch.sin();
    c.paint(p.iris_level, disc(ix, iy, scale * p.iris_radius));
    c.paint(p.pupil_level, disc(ix, iy, scale * p.pupil_radius));
}

/// Eye patch for `side`; `seed` drives the pixel noise.
pub fn render_eye(g: GazeAngles, side: Side, params: &SceneParams, seed: u64) -> Tensor<f32> {
    let mut c = Canvas::new(params.background_level);
    draw_eye(&mut c, g, side, params, 0.0, 0.0, 1.0);
    c.finish(params.noise_std, seed)
}

/// Eye scale and sockets inside the face image.
const FACE_EYE_SCALE: f64 = 0.35;
const FACE_SOCKET_X: f64 = 26.0;
const FACE_SOCKET_Y: f64 = -14.0;

/// Schematic face: both eyes in their sockets and a head-pose bar.
pub fn render_face(g: GazeAngles, params: &SceneParams, seed: u64) -> Tensor<f32> {
    let mut c = Canvas::new(params.background_level * 0.5);
    c.paint(params.skin_level, ellipse(0.0, 0.0, 54.0, 62.0));
    // Subject's right eye appears on the image's left.
    draw_eye(&mut c, g, Side::Right, params, -FACE_SOCKET_X, FACE_SOCKET_Y, FACE_EYE_SCALE);
    draw_eye(&mut c, g, Side::Left, params, FACE_SOCKET_X, FACE_SOCKET_Y, FACE_EYE_SCALE);
    c.paint(params.pupil_level, rect(params.head_pose_px, 30.0, 2.0, 12.0));
    c.finish(params.noise_std, seed)
}

/// Mean-reverting, clipped random walk; the start is uniform over the range.
pub fn gaze_trajectory<R: Rng + ?Sized>(len: usize, params: &SceneParams, rng: &mut R) -> Vec<GazeAngles> {
    let range = params.gaze_range_deg.to_radians();
    let step = params.step_std_deg.to_radians();
    let mut cur = if range > 0.0 {
        [rng.gen_range(-range..=range), rng.gen_range(-range..=range)]
    } else {
        [0.0, 0.0]
    };
    let normal = Normal::new(0.0, step).expect("finite step std");
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 {
            for c in &mut cur {
                *c = (params.reversion * *c + normal.sample(rng)).clamp(-range, range);
            }
        }
        // Labels are stored as f32; keep the in-memory copy identical.
        out.push(GazeAngles::new(cur[0] as f32 as f64, cur[1] as f32 as f64));
    }
    out
}

/// One clip of frames with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub id: u64,
    pub seed: u64,
    pub frames: Vec<Frame<f32>>,
    pub labels: Vec<GazeAngles>,
    pub origin: [f64; 3],
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn targets(&self) -> ClipTargets {
        ClipTargets {
            gaze: self.labels.clone(),
            origin: self.origin,
        }
    }
}

fn f32_origin(o: [f64; 3]) -> [f64; 3] {
    o.map(|v| v as f32 as f64)
}

pub fn gen_sequence(len: usize, params: &SceneParams, seed: u64, id: u64) -> Result<SequenceSample> {
    if len == 0 {
        return Err(Error::invalid("a sequence needs at least one frame"));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let labels = gaze_trajectory(len, params, &mut rng);
    let frames = labels
        .iter()
        .enumerate()
        .map(|(t, &g)| {
            let base = 1 + 3 * t as u64;
            Frame {
                eye_left: render_eye(g, Side::Left, params, derive_seed(seed, base)),
                eye_right: render_eye(g, Side::Right, params, derive_seed(seed, base + 1)),
                face: render_face(g, params, derive_seed(seed, base + 2)),
            }
        })
        .collect();
    Ok(SequenceSample {
        id,
        seed,
        frames,
        labels,
        origin: f32_origin(params.origin_cm),
    })
}

/// Draws one per-clip label offset `(δpitch, δyaw)` in radians.
pub fn draw_offset<R: Rng + ?Sized>(std_deg: f64, rng: &mut R) -> (f64, f64) {
    if std_deg <= 0.0 {
        return (0.0, 0.0);
    }
    let normal = Normal::new(0.0, std_deg.to_radians()).expect("finite std");
    (normal.sample(rng), normal.sample(rng))
}

/// Adds one constant offset to every label of the clip; images are untouched.
pub fn offset_augment<R: Rng + ?Sized>(sample: &SequenceSample, std_deg: f64, rng: &mut R) -> SequenceSample {
    let (dp, dy) = draw_offset(std_deg, rng);
    let mut out = sample.clone();
    for l in &mut out.labels {
        l.pitch += dp;
        l.yaw += dy;
    }
    out
}

/// Serialises a clip in the `STGZ` layout.
pub fn write_sequence<W: Write>(s: &SequenceSample, mut w: W) -> std::io::Result<()> {
    w.write_all(SEQUENCE_MAGIC)?;
    w.write_all(&SEQUENCE_VERSION.to_le_bytes())?;
    w.write_all(&(s.frames.len() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(3 * PLANE * 4);
    for f in &s.frames {
        for img in [&f.eye_left, &f.eye_right, &f.face] {
            buf.clear();
            for v in img.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    for l in &s.labels {
        w.write_all(&(l.pitch as f32).to_le_bytes())?;
        w.write_all(&(l.yaw as f32).to_le_bytes())?;
    }
    for v in s.origin {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()
}

/// Parses an `STGZ` clip; `id` and `seed` come from the manifest.
pub fn read_sequence<R: Read>(reader: R, id: u64, seed: u64) -> Result<SequenceSample> {
    let mut r = OffsetReader::new(reader);
    let magic = r.take::<4>("magic")?;
    if &magic != SEQUENCE_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"STGZ\"")));
    }
    let version = r.u32("version")?;
    if version != SEQUENCE_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let len = r.u32("frame count")? as usize;
    if len == 0 {
        return Err(Error::format(8, "frame count is zero"));
    }
    let mut frames = Vec::with_capacity(len.min(1024));
    for _ in 0..len {
        let mut imgs = Vec::with_capacity(3);
        for what in ["left eye", "right eye", "face"] {
            let mut data = vec![0f32; 3 * PLANE];
            r.f32s(&mut data, what)?;
            imgs.push(Tensor::new(&[3, IMAGE_SIZE, IMAGE_SIZE], data)?);
        }
        let face = imgs.pop().expect("three images");
        let eye_right = imgs.pop().expect("three images");
        let eye_left = imgs.pop().expect("three images");
        frames.push(Frame {
            eye_left,
            eye_right,
            face,
        });
    }
    let mut labels = vec![0f32; 2 * len];
    r.f32s(&mut labels, "labels")?;
    let mut origin = [0f32; 3];
    r.f32s(&mut origin, "origin")?;
    r.expect_end()?;
    Ok(SequenceSample {
        id,
        seed,
        frames,
        labels: labels.chunks(2).map(|c| GazeAngles::new(c[0] as f64, c[1] as f64)).collect(),
        origin: origin.map(f64::from),
    })
}

pub fn sequence_file_bytes(len: usize) -> u64 {
    12 + (len * 3 * 3 * PLANE * 4 + len * 8 + 12) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: String,
    pub params: SceneParams,
    pub seed: u64,
    pub files: Vec<String>,
    #[serde(rename = "T")]
    pub seq_len: usize,
}

impl DatasetManifest {
    /// Seed of the clip at `index`.
    pub fn sequence_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }
}

/// Source of training or evaluation clips.
pub trait ClipSource: Sync {
    fn len(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn clip(&self, index: usize) -> Result<SequenceSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Clips rendered on demand from `(seed, index)`; nothing is stored.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub params: SceneParams,
    pub seed: u64,
    pub count: usize,
    pub seq_len: usize,
}

impl SyntheticSet {
    pub fn new(params: SceneParams, seed: u64, count: usize, seq_len: usize) -> Result<Self> {
        params.validate()?;
        if count == 0 || seq_len == 0 {
            return Err(Error::invalid("a synthetic set needs ≥ 1 sequence of ≥ 1 frame"));
        }
        Ok(SyntheticSet {
            params,
            seed,
            count,
            seq_len,
        })
    }
}

impl ClipSource for SyntheticSet {
    fn len(&self) -> usize {
        self.count
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn clip(&self, index: usize) -> Result<SequenceSample> {
        if index >= self.count {
            return Err(Error::invalid(format!("clip {index} out of range ({} clips)", self.count)));
        }
        gen_sequence(self.seq_len, &self.params, derive_seed(self.seed, index as u64), index as u64)
    }
}

/// Clips read from a dataset directory on demand.
#[derive(Debug, Clone)]
pub struct DiskDataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl DiskDataset {
    /// Reads the manifest and checks that every listed file exists with the
    /// expected size.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!("unsupported manifest version {}", manifest.version)));
        }
        manifest.params.validate()?;
        if manifest.seq_len == 0 || manifest.files.is_empty() {
            return Err(Error::Validation("manifest lists no sequences or T = 0".into()));
        }
        let expected = sequence_file_bytes(manifest.seq_len);
        let missing: Vec<&str> = manifest
            .files
            .iter()
            .filter(|f| !dir.join(f).is_file())
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!("missing sequence files: {}", missing.join(", "))));
        }
        for f in &manifest.files {
            let p = dir.join(f);
            let size = fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
            if size != expected {
                return Err(Error::Validation(format!("{f}: {size} bytes, expected {expected}")));
            }
        }
        let mut seeds: Vec<u64> = (0..manifest.files.len()).map(|i| manifest.sequence_seed(i)).collect();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("sequence seeds are not unique".into()));
        }
        Ok(DiskDataset { dir, manifest })
    }
}

impl ClipSource for DiskDataset {
    fn len(&self) -> usize {
        self.manifest.files.len()
    }

    fn seq_len(&self) -> usize {
        self.manifest.seq_len
    }

    fn clip(&self, index: usize) -> Result<SequenceSample> {
        let name = self
            .manifest
            .files
            .get(index)
            .ok_or_else(|| Error::invalid(format!("clip {index} out of range")))?;
        let path = self.dir.join(name);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let s = read_sequence(BufReader::new(file), index as u64, self.manifest.sequence_seed(index))?;
        if s.len() != self.manifest.seq_len {
            return Err(Error::Validation(format!(
                "{name}: {} frames, manifest says {}",
                s.len(),
                self.manifest.seq_len
            )));
        }
        Ok(s)
    }
}

/// Summary of a dataset written to disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WriteSummary {
    pub sequences: usize,
    pub frames: usize,
    pub bytes: u64,
    pub sha256_of_manifest: String,
}

pub fn sequence_file_name(index: usize) -> String {
    format!("seq_{index:05}.stgz")
}

/// Generates `count` clips into `dir` and writes the manifest last.
pub fn dataset_write(
    dir: impl AsRef<Path>,
    split: &str,
    params: &SceneParams,
    seed: u64,
    count: usize,
    seq_len: usize,
) -> Result<WriteSummary> {
    if count == 0 {
        return Err(Error::invalid("sequences must be ≥ 1"));
    }
    if seq_len == 0 {
        return Err(Error::invalid("T must be ≥ 1"));
    }
    params.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        split: split.to_string(),
        params: params.clone(),
        seed,
        files: (0..count).map(sequence_file_name).collect(),
        seq_len,
    };
    let mut bytes = 0;
    for (i, name) in manifest.files.iter().enumerate() {
        let s = gen_sequence(seq_len, params, manifest.sequence_seed(i), i as u64)?;
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_sequence(&s, BufWriter::new(file)).map_err(|e| Error::io(&path, e))?;
        bytes += sequence_file_bytes(seq_len);
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, json.as_bytes()).map_err(|e| Error::io(&path, e))?;
    bytes += json.len() as u64;
    Ok(WriteSummary {
        sequences: count,
        frames: count * seq_len,
        bytes,
        sha256_of_manifest: hex::encode(Sha256::digest(json.as_bytes())),
    })
}

/// Reads every clip of a dataset directory.
pub fn dataset_read(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<SequenceSample>)> {
    let ds = DiskDataset::open(dir)?;
    let clips = (0..ds.len()).map(|i| ds.clip(i)).collect::<Result<Vec<_>>>()?;
    Ok((ds.manifest, clips))
}

/// SHA-256 of a file as lowercase hex.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Pixel-space estimate of the gaze from a noise-free eye patch: the
/// coverage-weighted centroid of pixels darker than the iris.
pub fn pupil_centroid_gaze(img: &Tensor<f32>, params: &SceneParams) -> Option<GazeAngles> {
    let span = params.iris_level - params.pupil_level;
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let v = img.data()[row * IMAGE_SIZE + col] as f64;
            let w = ((params.iris_level - v) / span).clamp(0.0, 1.0);
            sw += w;
            sx += w * (col as f64 + 0.5);
            sy += w * (row as f64 + 0.5);
        }
    }
    if sw == 0.0 || params.gain_px == 0.0 {
        return None;
    }
    let (cx, cy) = (sx / sw, sy / sw);
    let yaw = ((cx - CENTRE) / params.gain_px).clamp(-1.0, 1.0).asin();
    let pitch = ((CENTRE - cy) / params.gain_px).clamp(-1.0, 1.0).asin();
    Some(GazeAngles::new(pitch, yaw))
}

#[cfg(test)]
mod tests;
