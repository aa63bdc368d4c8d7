//! End-to-end runs of the `langfree` binary on tiny configurations.

mod common;

use langfree::archive::Archive;
use langfree::features::encoders_from_archive;
use langfree::toyset::ToyDataset;
use langfree::training::{checkpoint_config, read_metrics, TrainInputs, Trainer, FINAL_CHECKPOINT};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_langfree"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset, small encoder and configs shared by the tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture { dir: tempfile::tempdir().unwrap() };
        ok(&["gen-data", "--n", "40", "--seed", "1", "--out", s(&f.path("data"))]);
        let enc = json!({"d": common::SMALL_D, "steps": 5, "batch": 8, "stages": [{"channels": 4, "stride": 2}, {"channels": 8, "stride": 2}]});
        std::fs::write(f.path("enc.json"), enc.to_string()).unwrap();
        ok(&["train-encoder", "--data", s(&f.path("data")), "--config", s(&f.path("enc.json")), "--holdout", "8", "--out", s(&f.path("enc.lfck"))]);
        let cfg = json!({"batch": 4, "steps": 5, "gan": common::small_gan()});
        std::fs::write(f.path("train.json"), cfg.to_string()).unwrap();
        f
    })
}

fn train_args<'a>(f: &'a Fixture, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = ["train", "--data", s(&f.path("data")), "--config", s(&f.path("train.json"))]
        .iter()
        .map(|x| x.to_string())
        .collect();
    v.extend(["--scorer".into(), f.path("enc.lfck").to_str().unwrap().into(), "--out".into(), out.to_str().unwrap().into()]);
    v.extend(extra.iter().map(|x| x.to_string()));
    v
}

fn ok_owned(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

fn manifest(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn verify_theorem_prints_a_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("check.json");
    let o = ok(&["verify-theorem", "--d", "64", "--xi", "0.5", "--c", "0.5", "--trials", "100000", "--seed", "7", "--out", s(&out)]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("bound") && text.contains("empirical"), "{text}");
    assert!(text.lines().any(|l| l == "PASS"), "{text}");
    let m = manifest(&dir.path().join("check.json.manifest.json"));
    assert_eq!(m["command"], "verify-theorem");
    assert_eq!(m["seed"], 7);
}

#[test]
fn verify_theorem_sweeps_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.json");
    ok(&["verify-theorem", "--d", "8,64", "--xi", "0.1,0.5", "--c", "0.7", "--trials", "10000", "--density", "sphere", "--out", s(&out)]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let cells = v["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    assert_eq!(cells[1]["query"]["xi"], 0.5);
    assert_eq!(v["passed"], true);
}

#[test]
fn usage_errors_exit_with_one() {
    let out = run(&["train", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--data") && err.contains("Usage"), "{err}");
    assert_eq!(run(&["verify-theorem", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["verify-theorem", "--d", "1", "--xi", "0.5", "--c", "0.5"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_values_exit_with_one() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(train_args(f, dir.path(), &["--pair-fraction", "1.5"])).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--n", "12", "--seed", "3", "--out", s(&a)]);
    ok(&["gen-data", "--n", "12", "--seed", "3", "--out", s(&b)]);
    let files: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.iter().filter(|n| n.to_string_lossy().ends_with(".png")).count(), 12);
    for name in files {
        if name == "run_manifest.json" {
            continue;
        }
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    let m = manifest(&a.join("run_manifest.json"));
    for key in ["command", "config", "seed", "version", "timings", "outputs"] {
        assert!(m.get(key).is_some(), "{key}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok_owned(train_args(f, dir.path(), &["--steps", "2", "--gam", "3", "--no-sharpen"]));
    assert_eq!(read_metrics(&dir.path().join("metrics.jsonl")).unwrap().len(), 2);
    let m = manifest(&dir.path().join("run_manifest.json"));
    let resolved = &m["config"]["resolved"];
    assert_eq!(resolved["steps"], 2);
    assert_eq!(resolved["batch"], 4);
    assert_eq!(resolved["loss"]["gam"], 3.0);
    assert_eq!(resolved["loss"]["lam"], 10.0);
    assert_eq!(resolved["loss"]["sharpen"], false);
    assert_eq!(resolved["gan"]["z_dim"], 8);
}

#[test]
fn training_twice_gives_identical_artifacts() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok_owned(train_args(f, &a, &["--steps", "2", "--checkpoint-every", "1"]));
    ok_owned(train_args(f, &b, &["--steps", "2", "--checkpoint-every", "1"]));
    for name in [FINAL_CHECKPOINT, "metrics.jsonl", "step000001.lfck", "step000002.lfck"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn zero_steps_writes_the_initialization() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok_owned(train_args(f, dir.path(), &["--mode", "language_free_fixed", "--steps", "0"]));
    let ck = Archive::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    let cfg = checkpoint_config(&ck).unwrap();
    let data = ToyDataset::read_dir(&f.path("data")).unwrap();
    let o = common::oracle(cfg.gan.d);
    let (scorer, _) = encoders_from_archive(&Archive::load(&f.path("enc.lfck")).unwrap()).unwrap();
    let inputs = TrainInputs { data: &data, encoders: common::oracle_pair(&o), scorer, inference: None };
    let fresh = Trainer::new(cfg, inputs).unwrap().checkpoint().unwrap();
    assert_eq!(ck.to_bytes().unwrap(), fresh.to_bytes().unwrap());
}

#[test]
fn generate_mix_probe_and_eval() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    ok_owned(train_args(f, &run_dir, &["--steps", "1"]));
    let ck = run_dir.join(FINAL_CHECKPOINT);
    let d = common::SMALL_D.to_string();

    let gen = dir.path().join("gen");
    ok(&["generate", "--checkpoint", s(&ck), "--prompt", "a small red circle", "--prompt", "a large blue cross", "--n", "8", "--out", s(&gen)]);
    let grid = image::open(gen.join("000_a_small_red_circle.png")).unwrap();
    // 1px separators around every tile
    assert_eq!((grid.width(), grid.height()), (8 * 33 + 1, 33 + 1));
    assert!(gen.join("001_a_large_blue_cross.png").exists());
    assert_eq!(std::fs::read_to_string(gen.join("samples/manifest.jsonl")).unwrap().lines().count(), 16);

    let mix = dir.path().join("mix");
    ok(&["mix", "--checkpoint", s(&ck), "--data", s(&f.path("data")), "--index", "0", "--prompt", "a small red circle", "--d", &d, "--n", "4", "--out", s(&mix)]);
    let grids: Vec<_> = std::fs::read_dir(&mix).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "png")).collect();
    assert_eq!(grids.len(), 1);
    let g = image::open(&grids[0]).unwrap();
    assert_eq!((g.width(), g.height()), (4 * 33 + 1, 3 * 33 + 1));

    let probe = dir.path().join("probe.lfck");
    std::fs::write(dir.path().join("probe.json"), json!({"stages": [{"channels": 4, "stride": 2}]}).to_string()).unwrap();
    ok(&["train-probe", "--data", s(&f.path("data")), "--config", s(&dir.path().join("probe.json")), "--steps", "3", "--batch", "8", "--holdout", "8", "--out", s(&probe)]);

    for metric in ["cond-acc", "is"] {
        let res = dir.path().join(format!("{metric}.json"));
        ok(&["eval", "--fake-dir", s(&gen), "--metric", metric, "--probe", s(&probe), "--splits", "2", "--out", s(&res)]);
        let v = manifest(&res);
        assert!(v["value"].as_f64().unwrap().is_finite());
    }
    let fid = dir.path().join("fid.json");
    ok(&["eval", "--real-dir", s(&f.path("data")), "--fake-dir", s(&gen), "--metric", "fid", "--extractor", s(&f.path("enc.lfck")), "--out", s(&fid)]);
    let fidk = dir.path().join("fidk.json");
    ok(&["eval", "--real-dir", s(&f.path("data")), "--fake-dir", s(&gen), "--metric", "fid-k", "--k", "0", "--extractor", s(&f.path("enc.lfck")), "--out", s(&fidk)]);
    assert_eq!(manifest(&fid)["value"], manifest(&fidk)["value"]);
    let missing = run(&["eval", "--fake-dir", s(&gen), "--metric", "fid", "--out", s(&fid)]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn trainable_perturbation_pipeline() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let d = common::SMALL_D.to_string();
    let (img, txt, inf) = (dir.path().join("img.lftf"), dir.path().join("txt.lftf"), dir.path().join("inf.lfck"));
    ok(&["extract-features", "--data", s(&f.path("data")), "--d", &d, "--text-out", s(&txt), "--out", s(&img)]);
    ok(&["train-inference", "--images", s(&img), "--texts", s(&txt), "--steps", "3", "--batch", "8", "--out", s(&inf)]);
    let out = dir.path().join("run");
    ok_owned(train_args(f, &out, &["--mode", "language_free_trainable", "--inference", s(&inf), "--steps", "1"]));
    assert!(out.join(FINAL_CHECKPOINT).exists());
    let missing = bin().args(train_args(f, &dir.path().join("bad"), &["--mode", "language_free_trainable", "--steps", "1"])).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn help_lists_every_training_config_key() {
    let out = ok(&["train", "--help"]);
    let help = String::from_utf8_lossy(&out.stdout);
    let keys = serde_json::to_value(langfree::training::TrainConfig::default()).unwrap();
    for key in keys.as_object().unwrap().keys() {
        assert!(help.contains(key.as_str()), "train --help does not mention {key}");
    }
    for sub in ["gen-data", "train-encoder", "extract-features", "train-inference", "generate", "mix", "train-probe", "eval", "verify-theorem"] {
        let out = ok(&[sub, "--help"]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("--out"));
    }
}
