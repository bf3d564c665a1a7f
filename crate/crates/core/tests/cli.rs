//! Command-line behaviour of the `coarse3d` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coarse3d::training::metrics::{read_metrics, MetricsRow, Split};
use coarse3d::training::{Dataset, ExperimentConfig};
use coarse3d::weak::subsample_count;

const TINY: &str = "\
scenes = 6
val_scenes = 2
epochs = 3
warmup_epochs = 1
proj_width = 64
proj_height = 16
width0 = 4
width1 = 4
width2 = 8
embed_dim = 8
n_prototypes = 3
batch_size = 2
eval_every = 2
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_coarse3d"));
    c.env_remove("COARSE3D_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn train_tiny(root: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = root.join(name);
    let mut args = vec![
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn printed_miou(stdout: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("miou\t"))
        .expect("miou line")
        .parse()
        .unwrap()
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "generate",
            "--scenes",
            "3",
            "--seed",
            "9",
            "--out",
            d.to_str().unwrap(),
        ]);
    }
    let fa = files(&a);
    assert_eq!(fa.len(), 7);
    assert_eq!(fa, files(&b));
}

#[test]
fn generate_zero_scenes_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "generate",
        "--scenes",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(coarse3d::dataset::read_manifest(dir.path())
        .unwrap()
        .is_empty());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        missing.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&[
        "train",
        "--override",
        "no_such_key=1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_refuses_bad_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("checkpoint.bin");
    fs::write(&ckpt, b"NOT-A-CHECKPOINT").unwrap();
    let out = run(&["eval", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn eval_reproduces_final_training_miou_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = train_tiny(dir.path(), "run", &["--seed", "3"]);
    let rows = read_metrics(&run_dir.join("metrics.tsv")).unwrap();
    let val: Vec<&MetricsRow> = rows.iter().filter(|r| r.split == Split::Val).collect();
    assert_eq!(val.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
    assert_eq!(rows.iter().filter(|r| r.split == Split::Train).count(), 3);

    let eval_dir = dir.path().join("eval");
    let stdout = ok(&[
        "eval",
        "--run",
        run_dir.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    let logged = val.last().unwrap().miou.unwrap();
    assert_eq!(
        format!("{:.6}", printed_miou(&stdout)),
        format!("{logged:.6}")
    );

    let curve = fs::read_to_string(eval_dir.join("miou_curve.tsv")).unwrap();
    let points: Vec<&str> = curve
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("epoch"))
        .collect();
    assert_eq!(points.len(), val.len());
    for (line, row) in points.iter().zip(&val) {
        assert!(line.starts_with(&format!("{}\t", row.epoch)), "{line}");
    }
    assert!(eval_dir.join("eval_report.tsv").exists());
}

#[test]
fn no_contrast_and_ratio_flags() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = train_tiny(dir.path(), "run", &["--no-contrast", "--ratio", "0.01"]);
    let cfg =
        ExperimentConfig::parse(&fs::read_to_string(run_dir.join("config.txt")).unwrap()).unwrap();
    assert_eq!(cfg.lambda_nce, 0.0);
    assert_eq!(cfg.annotation_ratio, 0.01);
    let rows = read_metrics(&run_dir.join("metrics.tsv")).unwrap();
    assert!(rows.iter().all(|r| r.lambda_nce == 0.0 && r.anchors == 0));

    let data = Dataset::build(&cfg).unwrap();
    for f in &data.train {
        assert_eq!(f.mask.n_original(), subsample_count(f.gt.len(), 0.01));
    }
    let labelled: usize = data.train.iter().map(|f| f.labelled_pixels()).sum();
    let train = rows.iter().find(|r| r.split == Split::Train).unwrap();
    assert_eq!(train.labelled_pixels, labelled);
}

#[test]
fn seed_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY.replace("epochs = 3", "epochs = 0")).unwrap();
    let a = dir.path().join("a");
    let out = bin()
        .env("COARSE3D_SEED", "5")
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            a.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let b = dir.path().join("b");
    ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        b.to_str().unwrap(),
    ]);
    let read = |d: &Path| fs::read_to_string(d.join("config.txt")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert!(read(&a).contains("seed = 5"));
}
