use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use vidswap_core::videodata::io::read_clip;

const BIN: &str = env!("CARGO_BIN_EXE_vidswap");

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn vidswap(run: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args)
        .arg("--config")
        .arg(fixture())
        .arg("--run-dir")
        .arg(run);
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Data, held-out data and pretrained networks shared by every test.
fn base() -> &'static Path {
    static BASE: OnceLock<PathBuf> = OnceLock::new();
    BASE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        ok(vidswap(&dir, &["synth-data"]));
        let test = dir.join("test");
        ok(vidswap(&dir, &["synth-data", "--seed", "3", "--out", test.to_str().unwrap()]));
        ok(vidswap(&dir, &["pretrain-codec"]));
        ok(vidswap(&dir, &["pretrain-idenc"]));
        dir
    })
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            std::fs::copy(e.path(), target).unwrap();
        }
    }
}

/// A fresh run directory with the shared pretrained networks.
fn fresh_run() -> PathBuf {
    let run = tempfile::tempdir().unwrap().keep();
    for sub in ["codec", "idenc"] {
        copy_dir(&base().join(sub), &run.join(sub));
    }
    run
}

fn data_arg() -> String {
    base().join("data").to_string_lossy().into_owned()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            for (k, v) in tree(&p) {
                out.insert(p.file_name().unwrap().into(), Vec::new());
                out.insert(Path::new(p.file_name().unwrap()).join(k), v);
            }
        } else {
            out.insert(p.file_name().unwrap().into(), std::fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn synth_data_is_deterministic_and_guarded() {
    let run = tempfile::tempdir().unwrap();
    let a = run.path().join("a");
    let b = run.path().join("b");
    for d in [&a, &b] {
        ok(vidswap(run.path(), &["synth-data", "--n", "3", "--frames", "3", "--seed", "7", "--out", d.to_str().unwrap()]));
    }
    assert_eq!(tree(&a), tree(&b));
    let clips: Vec<_> = std::fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).collect();
    assert_eq!(clips.len(), 3);
    let clip = read_clip(&a.join("clip_00002"), true).unwrap();
    assert_eq!(clip.len(), 3);
    for f in clip.factors.unwrap() {
        f.validate(256).unwrap();
    }
    let raw = std::fs::read_to_string(a.join("clip_00000/factors.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&raw).unwrap();
    assert_eq!(parsed["pose"].as_array().unwrap().len(), 3);
    assert!(std::fs::read_to_string(a.join("config.toml")).unwrap().contains("clips = 3"));
    assert!(a.join("VERSION").exists());

    let again = vidswap(run.path(), &["synth-data", "--n", "3", "--out", a.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(4));
    ok(vidswap(run.path(), &["synth-data", "--n", "2", "--out", a.to_str().unwrap(), "--force"]));
    assert!(!a.join("clip_00002").exists());
}

#[test]
fn bad_config_exits_with_code_2() {
    let run = tempfile::tempdir().unwrap();
    let out = vidswap(run.path(), &["synth-data", "--set", "data.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    let out = vidswap(run.path(), &["train", "--set", "model.fal.id_dim=5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_4() {
    let run = tempfile::tempdir().unwrap();
    let out = vidswap(run.path(), &["train", "--data", run.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn non_finite_training_exits_with_code_3() {
    let run = fresh_run();
    let out = vidswap(&run, &["train", "--data", &data_arg(), "--set", "train.sigma.log_mean=1000"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("train/nan_dump.json")).unwrap()).unwrap();
    assert_eq!(dump["step"], 0);
    assert!(dump["batch_seed"].is_u64());
}

#[test]
fn train_logs_every_loss_term_and_resume_matches() {
    let full = fresh_run();
    ok(vidswap(&full, &["train", "--data", &data_arg()]));
    let log = std::fs::read_to_string(full.join("train/metrics.ndjson")).unwrap();
    let rows: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for key in [
        "loss_total",
        "loss_dm",
        "loss_fal",
        "loss_id",
        "loss_adv_g",
        "loss_attr",
        "loss_tid",
        "loss_rec",
        "loss_d",
        "mf_zero_fraction",
        "same_identity_rate",
    ] {
        assert!(rows.iter().all(|r| r[key].is_f64()), "{key}");
    }
    let split = fresh_run();
    ok(vidswap(&split, &["train", "--data", &data_arg(), "--steps", "2"]));
    let out = ok(vidswap(&split, &["train", "--data", &data_arg(), "--resume"]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("resuming at step 2"));
    for f in ["checkpoint.safetensors", "metrics.ndjson"] {
        assert_eq!(
            std::fs::read(full.join("train").join(f)).unwrap(),
            std::fs::read(split.join("train").join(f)).unwrap(),
            "{f}"
        );
    }
    let changed = vidswap(&split, &["train", "--data", &data_arg(), "--resume", "--set", "train.batch_size=3"]);
    assert_eq!(changed.status.code(), Some(2));
}

fn trained_run() -> &'static Path {
    static RUN: OnceLock<PathBuf> = OnceLock::new();
    RUN.get_or_init(|| {
        let run = fresh_run();
        copy_dir(&base().join("test"), &run.join("test"));
        ok(vidswap(&run, &["train", "--data", &data_arg()]));
        run
    })
}

#[test]
fn swap_is_reproducible_and_logs_co_denoising() {
    let run = trained_run();
    let source = run.join("test/clip_00001/frame_00000.png");
    let target = run.join("test/clip_00000");
    let mut trees = Vec::new();
    for name in ["s1", "s2"] {
        let out = run.join(name);
        let res = ok(vidswap(
            run,
            &["swap", "--source", source.to_str().unwrap(), "--target", target.to_str().unwrap(), "--out", out.to_str().unwrap()],
        ));
        assert!(String::from_utf8_lossy(&res.stderr).contains("temporal co-denoising"));
        trees.push(tree(&out));
    }
    assert_eq!(trees[0], trees[1]);
    let prov: serde_json::Value = serde_json::from_slice(&trees[0][Path::new("provenance.json")]).unwrap();
    assert_eq!(prov["windowed"], true);
    assert_eq!(prov["swap"]["seed"], 0);
    assert_eq!(prov["checkpoint_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(read_clip(&run.join("s1"), true).unwrap().len(), 4);

    let other = run.join("s3");
    ok(vidswap(
        run,
        &["swap", "--seed", "5", "--source", source.to_str().unwrap(), "--target", target.to_str().unwrap(), "--out", other.to_str().unwrap()],
    ));
    assert_ne!(std::fs::read(run.join("s1/frame_00000.png")).unwrap(), std::fs::read(other.join("frame_00000.png")).unwrap());
}

#[test]
fn swap_names_the_first_missing_mask() {
    let run = trained_run();
    let target = run.join("masked_target");
    copy_dir(&run.join("test/clip_00002"), &target);
    std::fs::remove_file(target.join("mask_00002.png")).unwrap();
    std::fs::remove_file(target.join("mask_00003.png")).unwrap();
    let source = run.join("test/clip_00001/frame_00000.png");
    let out = vidswap(
        run,
        &["swap", "--source", source.to_str().unwrap(), "--target", target.to_str().unwrap(), "--out", run.join("sx").to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask_00002.png"));
}

#[test]
fn swap_rejects_a_wrong_size_source() {
    let run = trained_run();
    let small = run.join("small.png");
    image::RgbImage::new(16, 16).save(&small).unwrap();
    let target = run.join("test/clip_00000");
    let out = vidswap(run, &["swap", "--source", small.to_str().unwrap(), "--target", target.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_report_has_exactly_the_report_fields_and_reruns_identically() {
    let run = trained_run();
    let mut reports = Vec::new();
    for name in ["e1", "e2"] {
        let out = run.join(name);
        ok(vidswap(run, &["eval", "--out", out.to_str().unwrap()]));
        reports.push(std::fs::read(out.join("report.json")).unwrap());
        for f in ["metrics.png", "vidd_traces.png", "loss_curves.png", "pairs.ndjson", "config.toml", "VERSION"] {
            assert!(out.join(f).exists(), "{f}");
        }
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(tree(&run.join("e1")), tree(&run.join("e2")));
    let v: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(keys, ["attr_errors", "fvd", "idr", "ids", "n_samples", "vidd"]);
    let attr: Vec<&str> = v["attr_errors"].as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(attr, ["expression", "lighting", "pose"]);
    let parsed: vidswap_core::EvalReport = serde_json::from_slice(&reports[0]).unwrap();
    parsed.validate().unwrap();

    ok(vidswap(run, &["eval", "--no-fal"]));
    let cfg = std::fs::read_to_string(run.join("eval_no_fal/config.toml")).unwrap();
    assert!(cfg.contains("use_attributes = false"));
}

#[test]
fn plot_needs_some_input() {
    let run = trained_run();
    let out = run.join("p");
    ok(vidswap(run, &["plot", "--out", out.to_str().unwrap()]));
    assert!(out.join("loss_curves.png").exists());
    let empty = tempfile::tempdir().unwrap();
    let res = vidswap(empty.path(), &["plot"]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn resolved_config_round_trips() {
    let run = trained_run();
    let text = std::fs::read_to_string(run.join("train/config.toml")).unwrap();
    let cfg = vidswap_core::RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.to_toml().unwrap(), text);
    assert_eq!(cfg.train.total_steps, 4);
}
