use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn splm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splm"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("SPLM_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn tiny_setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::copy(fixtures().join("tiny.splm"), dir.path().join("tiny.splm")).unwrap();
    fs::copy(fixtures().join("tiny.cfg"), dir.path().join("tiny.cfg")).unwrap();
    dir
}

fn field(text: &str, key: &str) -> String {
    let line = text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no {key:?} in {text}"));
    line.split_whitespace().last().unwrap().to_string()
}

#[test]
fn prepare_splits_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let text: String = (0..1000).map(|i| if i % 7 == 6 { ' ' } else { char::from(b'a' + (i % 26) as u8) }).collect();
    fs::write(dir.path().join("in.txt"), text).unwrap();
    let a = splm(dir.path(), &["prepare", "in.txt", "--out", "a.splm"]);
    let b = splm(dir.path(), &["prepare", "in.txt", "--out", "b.splm"]);
    assert!(a.status.success(), "{a:?}");
    assert!(stdout(&a).contains("train 900 dev 50 test 50"));
    assert_eq!(field(&stdout(&a), "split sha256"), field(&stdout(&b), "split sha256"));
    assert_eq!(fs::read(dir.path().join("a.splm")).unwrap(), fs::read(dir.path().join("b.splm")).unwrap());
}

#[test]
fn prepare_falls_back_to_data_dir() {
    let data = TempDir::new().unwrap();
    let work = TempDir::new().unwrap();
    fs::write(data.path().join("in.txt"), "hello world ".repeat(50)).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_splm"))
        .args(["prepare", "in.txt", "--out", "x.splm"])
        .current_dir(work.path())
        .env("SPLM_DATA_DIR", data.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{o:?}");
    assert!(work.path().join("x.splm").exists());
}

#[test]
fn bad_configuration_exits_with_two() {
    let dir = tiny_setup();
    for args in [
        vec!["train", "--config", "tiny.cfg", "--set", "model.bogus=3"],
        vec!["train", "--config", "tiny.cfg", "--set", "model.d_model=7"],
        vec!["train", "--config", "tiny.cfg", "--set", "nonsense"],
        vec!["synth-classify", "--set", "fit.nothing=1"],
    ] {
        let o = splm(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    fs::write(dir.path().join("bad.cfg"), "filter.variant=wavelet\n").unwrap();
    assert_eq!(splm(dir.path(), &["train", "--config", "bad.cfg"]).status.code(), Some(2));
}

#[test]
fn variant_configs_differ_only_in_filter_keys() {
    let dir = tiny_setup();
    let mut cfgs = Vec::new();
    for v in ["none", "multi_scale"] {
        let out = format!("out_dir={v}");
        let o = splm(dir.path(), &["train", "--config", "tiny.cfg", "--variant", v, "--steps", "0", "--set", &out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        cfgs.push(fs::read_to_string(dir.path().join(v).join("metrics.cfg")).unwrap());
    }
    let a: Vec<&str> = cfgs[0].lines().collect();
    let b: Vec<&str> = cfgs[1].lines().collect();
    assert_eq!(a.len(), b.len());
    let diff: Vec<_> = a.iter().zip(&b).filter(|(x, y)| x != y).collect();
    assert!(!diff.is_empty());
    for (x, _) in diff {
        assert!(x.starts_with("filter.") || x.starts_with("out_dir=") || x.starts_with("metrics="), "{x}");
    }
}

#[test]
fn train_then_eval_reproduces_the_logged_nll() {
    let dir = tiny_setup();
    let o = splm(dir.path(), &["train", "--config", "tiny.cfg", "--steps", "6", "--precision", "f32"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    let e = splm(dir.path(), &["eval", "--checkpoint", "run/final.ckpt"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let nll: f64 = field(&stdout(&e), "dev nll_nats").parse().unwrap();
    assert_eq!(nll, last["nll_nats"].as_f64().unwrap());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tiny_setup();
    let full = splm(dir.path(), &["train", "--config", "tiny.cfg", "--steps", "12", "--set", "out_dir=full"]);
    let half = splm(dir.path(), &["train", "--config", "tiny.cfg", "--steps", "6", "--set", "out_dir=half"]);
    assert!(full.status.success() && half.status.success());
    let rest = splm(
        dir.path(),
        &["train", "--config", "tiny.cfg", "--steps", "12", "--set", "out_dir=half", "--resume", "half/final.ckpt"],
    );
    assert!(rest.status.success(), "{}", String::from_utf8_lossy(&rest.stderr));
    assert_eq!(field(&stdout(&full), "step"), field(&stdout(&rest), "step"));
    assert_eq!(fs::read(dir.path().join("full/final.ckpt")).unwrap(), fs::read(dir.path().join("half/final.ckpt")).unwrap());
}

#[test]
fn committed_checkpoint_evaluates_to_its_reference() {
    let f = fixtures();
    let reference: f64 = field(&fs::read_to_string(f.join("tiny.nll")).unwrap(), "dev nll_nats").parse().unwrap();
    let o = splm(&f, &["eval", "--checkpoint", "tiny.ckpt", "--data", "tiny.splm"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let nll: f64 = field(&stdout(&o), "dev nll_nats").parse().unwrap();
    assert!((nll - reference).abs() < 1e-9, "{nll} vs {reference}");
}

#[test]
fn kernel_export_has_one_row_per_tap() {
    let dir = tiny_setup();
    let o = splm(dir.path(), &["train", "--config", "tiny.cfg", "--variant", "multi_scale", "--steps", "0", "--set", "filter.channels=144"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let e = splm(dir.path(), &["export-kernels", "--checkpoint", "run/final.ckpt", "--out", "k.csv"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let csv = fs::read_to_string(dir.path().join("k.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 36 * (3 + 7 + 15 + 31));
    for len in [3, 7, 15, 31] {
        let n = rows.iter().filter(|r| r.split(',').nth(2) == Some(&len.to_string())).count();
        assert_eq!(n, 36 * len);
    }

    let b = splm(dir.path(), &["train", "--config", "tiny.cfg", "--variant", "none", "--steps", "0", "--set", "out_dir=base"]);
    assert!(b.status.success());
    let e = splm(dir.path(), &["export-kernels", "--checkpoint", "base/final.ckpt"]);
    assert!(!e.status.success());
    assert!(String::from_utf8_lossy(&e.stderr).contains("filter"));
}

#[test]
fn mask_csv_is_written_for_adaptive_models() {
    let dir = tiny_setup();
    let o = splm(
        dir.path(),
        &["train", "--config", "tiny.cfg", "--variant", "token_adaptive", "--steps", "2", "--set", "mask.dim=8", "--set", "mask.heads=2", "--set", "mask.d_ff=16"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let e = splm(dir.path(), &["eval", "--checkpoint", "run/final.ckpt", "--mask-csv", "m.csv", "--mask-windows", "2"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn gradcheck_passes() {
    let dir = TempDir::new().unwrap();
    let o = splm(dir.path(), &["gradcheck", "--seeds", "2", "--composite-seeds", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("checks passed"));
}

#[test]
fn synth_report_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let args = [
        "synth-classify",
        "--classes", "2",
        "--length", "12",
        "--dim", "3",
        "--set", "synth.samples=16",
        "--set", "synth.test_samples=8",
        "--set", "fit.epochs=1",
        "--set", "cls.d_model=8",
        "--set", "cls.n_heads=2",
        "--set", "cls.d_ff=8",
        "--set", "seeds=3",
        "--emit-data", "d.spds",
    ];
    let a = splm(dir.path(), &args);
    let b = splm(dir.path(), &args);
    assert!(a.status.code().is_some_and(|c| c == 0 || c == 1), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(stdout(&a).replace(dir.path().to_str().unwrap(), ""), stdout(&b).replace(dir.path().to_str().unwrap(), ""));
    assert!(stdout(&a).contains("trainable >= frozen"));
    let bytes = fs::read(dir.path().join("d.spds")).unwrap();
    assert_eq!(&bytes[..4], b"SPDS");
}
