//! Subcommand implementations. Machine-readable output goes to `out`,
//! progress and tables to stderr.

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use stgaze_core::geometry::pog_cm;
use stgaze_core::gradsuite::{run_suite, SuiteConfig, SuiteScale};
use stgaze_core::model::{Ablation, ModelConfig, StGaze, StreamState};
use stgaze_core::synth::{dataset_write, derive_seed, read_sequence, ClipSource, DiskDataset};
use stgaze_core::train::{evaluate, run_ablations, train, EpochRecord, TrainSinks};
use stgaze_core::{OpKind, ParamStore};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.stgp";
pub const METRICS_FILE: &str = "metrics.jsonl";

fn emit<W: Write, S: Serialize>(out: &mut W, value: &S) -> Result<(), CliError> {
    let line = serde_json::to_string(value).expect("plain data serialises");
    writeln!(out, "{line}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

/// FNV-1a, used to give every split name its own data seed.
fn split_hash(split: &str) -> u64 {
    split.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn synth<W: Write>(cfg: &RunConfig, out_dir: &Path, sequences: usize, split: &str, out: &mut W) -> Result<(), CliError> {
    let seed = derive_seed(cfg.train.seed, split_hash(split));
    let summary = dataset_write(out_dir, split, &cfg.scene, seed, sequences, cfg.train.seq_len)?;
    emit(out, &summary)
}

fn build_model(model: &ModelConfig, seed: u64) -> Result<(ParamStore<f32>, StGaze), CliError> {
    let mut store = ParamStore::new();
    let net = StGaze::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), model.clone())?;
    Ok((store, net))
}

fn open_dataset(dir: &Path) -> Result<DiskDataset, CliError> {
    if !dir.exists() {
        return Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    Ok(DiskDataset::open(dir)?)
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub val: Option<&'a Path>,
    pub out_dir: &'a Path,
    pub ablation: Option<&'a str>,
    pub threads: Option<usize>,
    pub seeds: u64,
}

pub fn train_cmd<W: Write>(cfg: &RunConfig, args: &TrainArgs<'_>, out: &mut W) -> Result<(), CliError> {
    let data = open_dataset(args.data)?;
    let val = args.val.map(open_dataset).transpose()?;
    let mut tcfg = cfg.train.clone();
    tcfg.seq_len = data.seq_len();
    if let Some(t) = args.threads {
        tcfg.threads = t;
    }
    tcfg.validate()?;
    fs::create_dir_all(args.out_dir).map_err(|e| CliError::io(args.out_dir, e))?;
    let geom = cfg.screen;
    geom.validate()?;

    if args.ablation == Some("all") {
        let eval_set: &dyn ClipSource = match &val {
            Some(v) => v,
            None => &data,
        };
        let seeds: Vec<u64> = (0..args.seeds).map(|i| tcfg.seed + i).collect();
        let results = run_ablations(&cfg.model, &Ablation::ALL, &seeds, &tcfg, &data, eval_set, &geom)?;
        eprintln!("{:<14} {:>5} {:>10} {:>10} {:>10}", "variant", "seed", "params", "ang_deg", "pog_cm");
        for r in &results {
            eprintln!(
                "{:<14} {:>5} {:>10} {:>10.3} {:>10.3}",
                r.ablation.name(),
                r.seed,
                r.parameters,
                r.val_ang_deg,
                r.val_pog_cm
            );
            emit(out, &json!({
                "ablation": r.ablation.name(),
                "seed": r.seed,
                "parameters": r.parameters,
                "val_ang_deg": r.val_ang_deg,
                "val_pog_cm": r.val_pog_cm,
            }))?;
        }
        return Ok(());
    }

    let ablation = match args.ablation {
        Some(a) => Ablation::parse(a)?,
        None => Ablation::Full,
    };
    let model_cfg = ablation.apply(cfg.model.clone());
    let (mut store, model) = build_model(&model_cfg, tcfg.seed)?;
    let metrics_path = args.out_dir.join(METRICS_FILE);
    let mut log = File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let header = json!({
        "event": "start",
        "ablation": ablation.name(),
        "parameters": store.num_scalars(),
        "sequences": data.len(),
        "model": model_cfg,
        "train": tcfg,
    });
    emit(out, &header)?;
    emit(&mut log, &header)?;
    let mut sink_err = None;
    let mut on_epoch = |r: &EpochRecord| {
        let res = emit(&mut *out, r).and_then(|_| emit(&mut log, r));
        if let Err(e) = res {
            sink_err.get_or_insert(e);
        }
        eprintln!(
            "epoch {} lr {:.3e} loss {:.4} val {}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_ang_deg.map_or("-".into(), |v| format!("{v:.3}°"))
        );
    };
    let sinks = TrainSinks {
        checkpoint: Some(args.out_dir.join(CHECKPOINT_FILE)),
        on_epoch: Some(&mut on_epoch),
    };
    let report = train(&tcfg, &model, &mut store, &data, val.as_ref().map(|v| v as &dyn ClipSource), &geom, sinks);
    if let Some(e) = sink_err {
        return Err(e);
    }
    let report = report?;
    let done = json!({
        "event": "done",
        "steps": report.steps,
        "first_batch_loss": report.first_batch_loss,
        "best_val_ang_deg": report.best_val_ang_deg,
    });
    emit(out, &done)?;
    emit(&mut log, &done)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(ParamStore<f32>, StGaze), CliError> {
    let (mut store, model) = build_model(&cfg.model, cfg.train.seed)?;
    store.load(checkpoint)?;
    Ok((store, model))
}

pub fn eval_cmd<W: Write>(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &mut W) -> Result<(), CliError> {
    let (store, model) = load_model(cfg, checkpoint)?;
    let data = open_dataset(data)?;
    let m = evaluate(&model, &store, &data, &cfg.screen)?;
    emit(out, &m)
}

/// Frame-by-frame inference over one sequence file, carrying the stream
/// state from frame to frame.
pub fn predict_cmd<W: Write>(cfg: &RunConfig, checkpoint: &Path, sequence: &Path, out: &mut W) -> Result<(), CliError> {
    let (store, model) = load_model(cfg, checkpoint)?;
    let file = File::open(sequence).map_err(|e| CliError::io(sequence, e))?;
    let clip = read_sequence(BufReader::new(file), 0, 0)?;
    let io = |e| CliError::io(Path::new("<stdout>"), e);
    writeln!(out, "frame,pitch_deg,yaw_deg,pog_x_cm,pog_y_cm").map_err(io)?;
    let zero = StreamState::<f32>::for_config(&model.config)?;
    let mut state = (zero.clone(), zero);
    for (t, frame) in clip.frames.iter().enumerate() {
        let (pred, next) = model.predict(&store, std::slice::from_ref(frame), Some((&state.0, &state.1)))?;
        state = next;
        let p = pred[0];
        let pog = match pog_cm(p.to_vector(), clip.origin, &cfg.screen) {
            Ok(pt) => format!("{:.4},{:.4}", pt.x, pt.y),
            Err(_) => ",".into(),
        };
        writeln!(out, "{t},{:.4},{:.4},{pog}", p.pitch.to_degrees(), p.yaw.to_degrees()).map_err(io)?;
    }
    Ok(())
}

pub fn parse_op(name: &str) -> Result<OpKind, CliError> {
    let op = match name {
        "add" => OpKind::Add,
        "mul" => OpKind::Mul,
        "sigmoid" => OpKind::Sigmoid,
        "tanh" => OpKind::Tanh,
        "swish" => OpKind::Swish,
        "matmul" => OpKind::MatMul,
        "linear" => OpKind::Linear,
        "conv2d" => OpKind::Conv2d,
        "softmax" => OpKind::Softmax,
        "layer_norm" => OpKind::LayerNorm,
        "mean" => OpKind::Mean,
        "scale_channels" => OpKind::ScaleChannels,
        "gru_scan" => OpKind::GruScan,
        "angular_error" => OpKind::AngularError,
        "pog_error" => OpKind::PogError,
        other => return Err(CliError::Usage(format!("unknown op `{other}` for fault injection"))),
    };
    Ok(op)
}

pub fn gradcheck_cmd<W: Write>(scale: &str, seeds: u64, fault: Option<&str>, out: &mut W) -> Result<(), CliError> {
    let cfg = SuiteConfig {
        scale: SuiteScale::parse(scale)?,
        seeds,
        fault: fault.map(parse_op).transpose()?,
    };
    let report = run_suite(&cfg)?;
    eprintln!("{:<18} {:>8} {:>12}  worst", "family", "entries", "max_rel_err");
    for f in &report.families {
        eprintln!(
            "{:<18} {:>8} {:>12.3e}  {} (seed {}) {}",
            f.family,
            f.entries,
            f.max_rel_err,
            f.worst_param,
            f.worst_seed,
            if f.passed { "ok" } else { "FAIL" }
        );
        emit(out, f)?;
    }
    emit(out, &json!({
        "passed": report.passed(),
        "families": report.families.len(),
        "tolerance": report.tolerance,
        "elapsed_s": report.elapsed_s,
    }))?;
    if !report.passed() {
        let names: Vec<_> = report.failures().map(|f| f.family).collect();
        return Err(CliError::GradCheck(names.join(", ")));
    }
    Ok(())
}
