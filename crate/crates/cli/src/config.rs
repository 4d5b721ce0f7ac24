//! `key = value` run configuration.
//!
//! One file covers the model, training, scene, screen and loss settings.
//! Blank lines and `#` comments are ignored; unknown keys and unparsable
//! values are rejected with their line number. `model` selects an
//! architecture preset and is applied before any other key, wherever it
//! appears.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use stgaze_core::geometry::ScreenGeometry;
use stgaze_core::model::ModelConfig;
use stgaze_core::synth::SceneParams;
use stgaze_core::train::TrainConfig;

use crate::error::CliError;

/// Everything a command needs besides its file arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneParams,
    pub screen: ScreenGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Standard,
    Tiny,
    Miniature,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Standard => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Miniature => ModelConfig::miniature(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Preset::Standard => "standard",
            Preset::Tiny => "tiny",
            Preset::Miniature => "miniature",
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "standard" => Ok(Preset::Standard),
            "tiny" => Ok(Preset::Tiny),
            "miniature" => Ok(Preset::Miniature),
            _ => Err("expected standard, tiny or miniature".into()),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Standard,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scene: SceneParams::default(),
            screen: ScreenGeometry::default(),
        }
    }
}

type Setter = fn(&mut RunConfig, &str) -> Result<(), String>;
type Getter = fn(&RunConfig) -> String;

struct Key {
    name: &'static str,
    help: &'static str,
    set: Setter,
    get: Getter,
}

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| num(s.trim())).collect()
}

fn show_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

macro_rules! key {
    ($name:literal, $help:literal, |$c:ident| $field:expr) => {
        Key {
            name: $name,
            help: $help,
            set: |$c, v| {
                $field = num(v)?;
                Ok(())
            },
            get: |$c| $field.to_string(),
        }
    };
}

const KEYS: &[Key] = &[
    Key {
        name: "model",
        help: "architecture preset: standard, tiny or miniature",
        set: |c, v| {
            c.preset = v.parse()?;
            Ok(())
        },
        get: |c| c.preset.name().into(),
    },
    key!("image_size", "eye and face crop size in pixels", |c| c.model.eye.input_size),
    Key {
        name: "eye_widths",
        help: "eye encoder stage widths, comma separated",
        set: |c, v| {
            c.model.eye.widths = list(v)?;
            Ok(())
        },
        get: |c| show_list(&c.model.eye.widths),
    },
    Key {
        name: "face_widths",
        help: "face encoder stage widths, comma separated",
        set: |c, v| {
            c.model.face.widths = list(v)?;
            Ok(())
        },
        get: |c| show_list(&c.model.face.widths),
    },
    Key {
        name: "eca_kernel",
        help: "channel-attention kernel size, or auto",
        set: |c, v| {
            c.model.eca_kernel = if v == "auto" { None } else { Some(num(v)?) };
            Ok(())
        },
        get: |c| c.model.eca_kernel.map_or("auto".into(), |k| k.to_string()),
    },
    key!("sam_blocks", "transformer blocks", |c| c.model.sam_blocks),
    key!("sam_heads", "attention heads", |c| c.model.sam_heads),
    key!("ffn_hidden", "transformer feed-forward width", |c| c.model.ffn_hidden),
    key!("gru_hidden", "GRU hidden size", |c| c.model.gru_hidden),
    key!("gru_layers", "stacked GRU layers", |c| c.model.gru_layers),
    key!("head_hidden", "regression head hidden width", |c| c.model.head_hidden),
    key!("use_eca", "channel attention on the fused features", |c| c.model.use_eca),
    key!("use_sam", "transformer over the patch sequence", |c| c.model.use_sam),
    key!("use_gru", "recurrent scan; false uses a linear projection", |c| c.model.use_gru),
    key!("pool_before_gru", "average the patches before the recurrence", |c| c.model.pool_before_gru),
    key!("share_streams", "left and right streams share weights", |c| c.model.share_streams),
    key!("epochs", "training epochs", |c| c.train.epochs),
    key!("batch_size", "sequences per optimisation step", |c| c.train.batch_size),
    key!("base_lr", "learning rate at batch size 6, scaled linearly", |c| c.train.base_lr),
    key!("seq_len", "frames per sequence", |c| c.train.seq_len),
    key!("seed", "seed for synthesis, initialisation and shuffling", |c| c.train.seed),
    key!("offset_std_deg", "per-sequence label offset std in training, 0 disables", |c| c.train.offset_std_deg),
    Key {
        name: "clip_norm",
        help: "global gradient-norm clip, or none",
        set: |c, v| {
            c.train.clip_norm = if v == "none" { None } else { Some(num(v)?) };
            Ok(())
        },
        get: |c| c.train.clip_norm.map_or("none".into(), |k| k.to_string()),
    },
    key!("threads", "worker threads for per-sequence passes", |c| c.train.threads),
    key!("adam_beta1", "Adam first-moment decay", |c| c.train.adam.beta1),
    key!("adam_beta2", "Adam second-moment decay", |c| c.train.adam.beta2),
    key!("adam_eps", "Adam denominator epsilon", |c| c.train.adam.eps),
    key!("weight_angular", "weight of the angular error in degrees", |c| c.train.weights.angular),
    key!("weight_pog_cm", "weight of the on-screen error in cm", |c| c.train.weights.pog_cm),
    key!("weight_pog_px", "weight of the on-screen error in pixels", |c| c.train.weights.pog_px),
    key!("screen_width_cm", "screen width", |c| c.screen.width_cm),
    key!("screen_height_cm", "screen height", |c| c.screen.height_cm),
    key!("screen_width_px", "horizontal resolution", |c| c.screen.width_px),
    key!("screen_height_px", "vertical resolution", |c| c.screen.height_px),
    key!("gaze_range_deg", "synthetic gaze range, ± degrees", |c| c.scene.gaze_range_deg),
    key!("gain_px", "iris travel in pixels per unit sine of the angle", |c| c.scene.gain_px),
    key!("sclera_rx", "sclera half-width in pixels", |c| c.scene.sclera_rx),
    key!("sclera_ry", "sclera half-height in pixels", |c| c.scene.sclera_ry),
    key!("iris_radius", "iris radius in pixels", |c| c.scene.iris_radius),
    key!("pupil_radius", "pupil radius in pixels", |c| c.scene.pupil_radius),
    key!("background_level", "background intensity", |c| c.scene.background_level),
    key!("sclera_level", "sclera intensity", |c| c.scene.sclera_level),
    key!("iris_level", "iris intensity", |c| c.scene.iris_level),
    key!("pupil_level", "pupil intensity", |c| c.scene.pupil_level),
    key!("marker_level", "face marker intensity", |c| c.scene.marker_level),
    key!("skin_level", "face skin intensity", |c| c.scene.skin_level),
    key!("noise_std", "per-pixel Gaussian noise std", |c| c.scene.noise_std),
    key!("step_std_deg", "gaze random-walk step std in degrees", |c| c.scene.step_std_deg),
    key!("reversion", "random-walk mean-reversion factor", |c| c.scene.reversion),
    key!("head_pose_px", "horizontal offset of the head-pose bar in the face image", |c| c.scene.head_pose_px),
    Key {
        name: "origin_cm",
        help: "gaze origin x,y,z in camera coordinates",
        set: |c, v| {
            let o: Vec<f64> = list(v)?;
            c.scene.origin_cm = o.try_into().map_err(|_| "expected three comma separated numbers".to_string())?;
            Ok(())
        },
        get: |c| show_list(&c.scene.origin_cm),
    },
];

fn find(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

impl RunConfig {
    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(CliError::config(line, content, "expected `key = value`"));
            };
            let (k, v) = (k.trim(), v.trim());
            let Some(key) = find(k) else {
                return Err(CliError::config(line, k, "unknown key"));
            };
            if v.is_empty() {
                return Err(CliError::config(line, k, "missing value"));
            }
            entries.push((line, key, v));
        }
        let mut cfg = RunConfig::default();
        // The preset replaces the whole model section, so it goes first.
        entries.sort_by_key(|(_, key, _)| key.name != "model");
        for (line, key, v) in entries {
            (key.set)(&mut cfg, v).map_err(|m| CliError::config(line, key.name, m))?;
            if key.name == "model" {
                cfg.model = cfg.preset.config();
            }
            if key.name == "image_size" {
                cfg.model.face.input_size = cfg.model.eye.input_size;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text)?
            }
            None => RunConfig::default(),
        };
        if let Ok(s) = std::env::var("STGAZE_SEED") {
            cfg.train.seed = s
                .trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("STGAZE_SEED=`{s}`: {e}")))?;
        }
        Ok(cfg)
    }
}

/// Key reference appended to `--help`.
pub fn help_text() -> String {
    let defaults = RunConfig::default();
    let width = KEYS.iter().map(|k| k.name.len()).max().unwrap_or(0);
    let vwidth = KEYS.iter().map(|k| (k.get)(&defaults).len()).max().unwrap_or(0);
    let mut s = String::from(
        "Config file keys (`key = value`, `#` starts a comment; STGAZE_SEED overrides `seed`):\n",
    );
    for k in KEYS {
        let _ = writeln!(s, "  {:width$}  {:vwidth$}  {}", k.name, (k.get)(&defaults), k.help);
    }
    s
}
