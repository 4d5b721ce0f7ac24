use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

fn stgaze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stgaze"))
        .args(args)
        .env_remove("STGAZE_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json_lines(o: &Output) -> Vec<Value> {
    stdout(o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const TINY: &str = "model = tiny\nseq_len = 4\nepochs = 2\nbatch_size = 4\nbase_lr = 1e-3\n";

#[test]
fn synth_writes_files_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seq_len = 8\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let run = |out: &Path| stgaze(&["synth", "--config", &cfg, "--out", out.to_str().unwrap(), "--sequences", "4"]);
    let oa = run(&a);
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    let sa = &json_lines(&oa)[0];
    assert_eq!(sa["sequences"], 4);
    assert_eq!(sa["frames"], 32);
    let files = std::fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "stgz")).count();
    assert_eq!(files, 4);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), 4);
    let sb = &json_lines(&run(&b))[0];
    assert_eq!(sa["sha256_of_manifest"], sb["sha256_of_manifest"]);
}

#[test]
fn synth_rejects_zero_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let o = stgaze(&["synth", "--out", dir.path().to_str().unwrap(), "--sequences", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sequences must be ≥ 1"));
}

#[test]
fn config_errors_name_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "# comment\nepochs = 2\nlearning_rate = 3\n");
    let o = stgaze(&["synth", "--config", &cfg, "--out", dir.path().to_str().unwrap(), "--sequences", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("learning_rate"), "{err}");
}

#[test]
fn missing_paths_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = stgaze(&["train", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let o = stgaze(&["synth", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--sequences", "1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn help_documents_config_defaults() {
    let o = stgaze(&["train", "--help"]);
    assert!(o.status.success());
    let h = stdout(&o);
    for key in ["batch_size", "base_lr", "epochs", "seed", "noise_std", "screen_width_px", "offset_std_deg"] {
        assert!(h.contains(key), "{key} missing from help");
    }
    assert!(h.lines().any(|l| l.trim_start().starts_with("batch_size") && l.contains(" 6 ")));
    assert!(h.contains("STGAZE_SEED"));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, TINY);
    let data = d.join("train");
    let val = d.join("val");
    for (out, n, split) in [(&data, "16", "train"), (&val, "4", "val")] {
        let o = stgaze(&["synth", "--config", &cfg, "--out", out.to_str().unwrap(), "--sequences", n, "--split", split]);
        assert!(o.status.success());
    }
    let run = d.join("run");
    let start = Instant::now();
    let o = stgaze(&[
        "train", "--config", &cfg, "--data", data.to_str().unwrap(), "--val", val.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs() < 60, "smoke run took {:?}", start.elapsed());
    let lines = json_lines(&o);
    assert_eq!(lines[0]["event"], "start");
    let epochs: Vec<_> = lines.iter().filter(|l| l.get("epoch").is_some()).collect();
    assert_eq!(epochs.len(), 2);
    for k in ["epoch", "lr", "train_loss", "train_ang_deg", "val_ang_deg", "val_pog_cm", "wall_s"] {
        assert!(epochs[0].get(k).is_some(), "{k}");
    }
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log, stdout(&o));

    let ckpt = run.join("checkpoint.stgp");
    let eval = || stgaze(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--data", val.to_str().unwrap()]);
    let (e1, e2) = (eval(), eval());
    assert!(e1.status.success(), "{}", String::from_utf8_lossy(&e1.stderr));
    assert_eq!(e1.stdout, e2.stdout);
    assert_eq!(json_lines(&e1)[0]["count"], 16);

    let seq = val.join("seq_00000.stgz");
    let p = stgaze(&["predict", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--sequence-file", seq.to_str().unwrap()]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    let csv = stdout(&p);
    let mut rows = csv.lines();
    assert_eq!(rows.next(), Some("frame,pitch_deg,yaw_deg,pog_x_cm,pog_y_cm"));
    let rows: Vec<Vec<&str>> = rows.map(|r| r.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.len(), 5);
        for a in &r[1..3] {
            assert!(a.parse::<f64>().unwrap().abs() <= 90.0);
        }
    }

    // A checkpoint loaded into a different architecture names the first mismatch.
    let other = write_config(d, &format!("{TINY}gru_hidden = 24\n"));
    let o = stgaze(&["eval", "--config", &other, "--checkpoint", ckpt.to_str().unwrap(), "--data", val.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gru.layer0.w_ih"));
}

#[test]
fn ablation_flag_is_echoed_and_seed_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "model = miniature\nimage_size = 128\neye_widths = 4,4,4,4\nface_widths = 2,2,2,2\nseq_len = 2\nepochs = 1\n");
    let data = d.join("data");
    assert!(stgaze(&["synth", "--config", &cfg, "--out", data.to_str().unwrap(), "--sequences", "2"]).status.success());
    let o = stgaze(&[
        "train", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", d.join("r").to_str().unwrap(),
        "--ablation", "no_sam",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let header = &json_lines(&o)[0];
    assert_eq!(header["ablation"], "no_sam");
    assert_eq!(header["model"]["use_sam"], false);

    let seeded = Command::new(env!("CARGO_BIN_EXE_stgaze"))
        .args(["synth", "--config", &cfg, "--out", d.join("s").to_str().unwrap(), "--sequences", "1"])
        .env("STGAZE_SEED", "99")
        .output()
        .unwrap();
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(d.join("s/manifest.json")).unwrap()).unwrap();
    assert!(seeded.status.success());
    let base: Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_ne!(manifest["seed"], base["seed"]);
}

#[test]
fn ablation_matrix_emits_a_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "model = miniature\nimage_size = 128\neye_widths = 4,4,4,4\nface_widths = 2,2,2,2\nseq_len = 2\nepochs = 1\n");
    let data = d.join("data");
    assert!(stgaze(&["synth", "--config", &cfg, "--out", data.to_str().unwrap(), "--sequences", "2"]).status.success());
    let o = stgaze(&["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", d.join("r").to_str().unwrap(), "--ablation", "all"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = json_lines(&o);
    let names: Vec<_> = rows.iter().map(|r| r["ablation"].as_str().unwrap().to_string()).collect();
    assert_eq!(names, ["full", "no_eca", "no_sam", "no_gru", "pool_pre_gru"]);
    let mut params: Vec<_> = rows.iter().map(|r| r["parameters"].as_u64().unwrap()).collect();
    params.dedup();
    assert_eq!(params.len(), 5);
}

#[test]
fn gradcheck_reports_families_and_catches_faults() {
    let start = Instant::now();
    let o = stgaze(&["gradcheck", "--scale", "tiny"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs() < 60);
    let lines = json_lines(&o);
    let families: Vec<_> = lines.iter().filter(|l| l.get("family").is_some()).collect();
    assert!(families.len() >= 12);
    assert!(families.iter().all(|f| f["max_rel_err"].as_f64().unwrap() < 1e-4));
    assert_eq!(lines.last().unwrap()["passed"], true);

    let o = stgaze(&["gradcheck", "--scale", "tiny", "--seeds", "1", "--inject-fault", "softmax"]);
    assert_eq!(o.status.code(), Some(4));
    let failed: Vec<_> = json_lines(&o)
        .into_iter()
        .filter(|l| l["passed"] == false && l.get("family").is_some())
        .map(|l| l["family"].as_str().unwrap().to_string())
        .collect();
    assert!(failed.contains(&"softmax".to_string()), "{failed:?}");
}
