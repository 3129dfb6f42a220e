//! End-to-end runs of the `maskris` binary on tiny datasets.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn maskris(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskris"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn maskris")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = maskris(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    maskris(dir, args).status.code().unwrap()
}

/// A 60-sample dataset and a one-epoch config.
fn workspace() -> TempDir {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["gen", "--seed", "3", "--count", "60", "--out", "data.bin"]);
    fs::write(t.path().join("quick.txt"), "version = 1\nepochs = 1\nbatch_size = 8\n").unwrap();
    t
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn metric(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in {line:?}"))
        .parse()
        .unwrap()
}

#[test]
fn gen_is_deterministic_and_reports_split() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let line = ok(d, &["gen", "--seed", "1", "--count", "1000", "--out", "a.bin"]);
    ok(d, &["gen", "--seed", "1", "--count", "1000", "--out", "b.bin"]);
    assert_eq!(read(d, "a.bin"), read(d, "b.bin"));
    assert!(line.contains("train=900 val=100"), "{line}");
    assert!(d.join("a.bin.manifest.txt").exists());
    assert!(d.join("a.bin.run.txt").exists());
}

#[test]
fn usage_errors_exit_2() {
    let t = workspace();
    let d = t.path();
    assert_eq!(code(d, &["gen", "--count", "3"]), 2);
    assert_eq!(code(d, &["train", "--mode", "fancy", "--data", "data.bin", "--out", "r"]), 2);
    let sweep = ["sweep", "--param", "depth", "--values", "1,2", "--data", "data.bin", "--out", "s"];
    assert_eq!(code(d, &sweep), 2);
    let preview = ["mask-preview", "--data", "data.bin", "--image-from-data", "60", "--out", "p"];
    assert_eq!(code(d, &preview), 2);
}

#[test]
fn train_modes_differ_and_reproduce() {
    let t = workspace();
    let d = t.path();
    let base = ["--config", "quick.txt", "--data", "data.bin", "--out"];
    let train = |mode: &str, out: &str| {
        let mut args = vec!["train", "--mode", mode];
        args.extend_from_slice(&base);
        args.push(out);
        ok(d, &args)
    };
    let line = train("maskris", "m1");
    assert!(line.contains("miou=") && line.contains("oiou="), "{line}");
    train("maskris", "m2");
    train("baseline", "b1");
    assert_eq!(read(d, "m1/model.ckpt"), read(d, "m2/model.ckpt"));
    assert_eq!(read(d, "m1/stats.csv"), read(d, "m2/stats.csv"));
    assert_ne!(read(d, "m1/model.ckpt"), read(d, "b1/model.ckpt"));

    // Step rows carry loss_dist in maskris mode only.
    let dist_col = |rel: &str| -> Vec<String> {
        let text = String::from_utf8(read(d, rel)).unwrap();
        let mut lines = text.lines().skip(1);
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "loss_dist").unwrap();
        let lr = header.iter().position(|h| *h == "lr").unwrap();
        lines
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|f| !f[lr].is_empty())
            .map(|f| f[col].to_string())
            .collect()
    };
    assert!(dist_col("m1/stats.csv").iter().all(|v| !v.is_empty()));
    assert!(dist_col("b1/stats.csv").iter().all(|v| v.is_empty()));
}

#[test]
fn divergence_exits_3() {
    let t = workspace();
    let d = t.path();
    fs::write(d.join("wild.txt"), "version = 1\nepochs = 2\nlr_base = 1e300\n").unwrap();
    let args = ["train", "--mode", "baseline", "--config", "wild.txt", "--data", "data.bin", "--out", "r"];
    assert_eq!(code(d, &args), 3);
}

#[test]
fn eval_reports_and_rejects_corrupt_checkpoints() {
    let t = workspace();
    let d = t.path();
    ok(d, &["train", "--mode", "baseline", "--config", "quick.txt", "--data", "data.bin", "--out", "r"]);
    let line = ok(d, &["eval", "--ckpt", "r/model.ckpt", "--data", "data.bin", "--out", "e"]);
    assert!(line.contains("miou=") && line.contains("oiou="));
    assert!(!d.join("e/robustness.csv").exists());

    let line = ok(d, &["eval", "--ckpt", "r/model.ckpt", "--data", "data.bin", "--out", "e2", "--robustness"]);
    assert!(line.contains("corrupted_oiou="));
    let csv = String::from_utf8(read(d, "e2/robustness.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 5);
    // Evaluation leaves the clean metrics alone.
    let clean = String::from_utf8(read(d, "e/eval.csv")).unwrap();
    assert_eq!(clean, String::from_utf8(read(d, "e2/eval.csv")).unwrap());

    let mut bytes = read(d, "r/model.ckpt");
    let n = bytes.len();
    bytes[n / 2] ^= 0x55;
    fs::write(d.join("bad.ckpt"), bytes).unwrap();
    assert_eq!(code(d, &["eval", "--ckpt", "bad.ckpt", "--data", "data.bin", "--out", "e3"]), 4);
    fs::write(d.join("short.ckpt"), b"MRISCKPT").unwrap();
    assert_eq!(code(d, &["eval", "--ckpt", "short.ckpt", "--data", "data.bin", "--out", "e4"]), 4);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let t = workspace();
    let d = t.path();
    let args = [
        "sweep", "--param", "lambda", "--values", "1.0,0.1,0.5", "--seeds", "0,1,2", "--config", "quick.txt", "--data",
        "data.bin", "--out", "s",
    ];
    ok(d, &args);
    let csv = String::from_utf8(read(d, "s/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    let values: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["0.1", "0.5", "1.0"]);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("3")));

    let mut parallel = args.to_vec();
    let last = parallel.len() - 1;
    parallel[last] = "sp";
    parallel.push("--parallel");
    ok(d, &parallel);
    assert_eq!(read(d, "s/sweep.csv"), read(d, "sp/sweep.csv"));
    assert_eq!(read(d, "s/sweep_runs.csv"), read(d, "sp/sweep_runs.csv"));
}

#[test]
fn mask_previews() {
    let t = workspace();
    let d = t.path();
    let preview = |strategy: &str, out: &str| {
        let args = [
            "mask-preview", "--data", "data.bin", "--image-from-data", "5", "--strategy", strategy, "--ratio", "0.75",
            "--seed", "9", "--out", out,
        ];
        ok(d, &args)
    };
    let line = preview("patch", "p1");
    assert!((metric(&line, "masked_fraction") - 0.75).abs() < 1e-12, "{line}");
    preview("patch", "p2");
    for f in ["original.pgm", "mask.pgm", "masked.pgm"] {
        assert_eq!(read(d, &format!("p1/{f}")), read(d, &format!("p2/{f}")));
    }

    preview("cutout", "c");
    let pgm = read(d, "c/mask.pgm");
    let header = b"P5\n64 64\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let px = &pgm[header.len()..];
    let on: Vec<(usize, usize)> = (0..64 * 64).filter(|&i| px[i] == 255).map(|i| (i / 64, i % 64)).collect();
    assert!(!on.is_empty());
    let (y0, y1) = (on.iter().map(|p| p.0).min().unwrap(), on.iter().map(|p| p.0).max().unwrap());
    let (x0, x1) = (on.iter().map(|p| p.1).min().unwrap(), on.iter().map(|p| p.1).max().unwrap());
    assert_eq!(on.len(), (y1 - y0 + 1) * (x1 - x0 + 1), "cutout is not a single rectangle");
}

#[test]
fn replay_reproduces_every_artifact() {
    let t = workspace();
    let d = t.path();
    ok(d, &["train", "--mode", "maskris", "--config", "quick.txt", "--data", "data.bin", "--out", "r"]);
    ok(d, &["eval", "--ckpt", "r/model.ckpt", "--data", "data.bin", "--out", "e", "--robustness"]);

    ok(d, &["replay", "--manifest", "data.bin.run.txt", "--out", "again"]);
    assert_eq!(read(d, "data.bin"), read(d, "again/data.bin"));
    ok(d, &["replay", "--manifest", "r/run.txt", "--out", "r2"]);
    for f in ["model.ckpt", "stats.csv", "config.txt"] {
        assert_eq!(read(d, &format!("r/{f}")), read(d, &format!("r2/{f}")), "{f}");
    }
    ok(d, &["replay", "--manifest", "e/run.txt", "--out", "e2"]);
    for f in ["eval.csv", "robustness.csv", "robustness_long.csv", "robustness.txt"] {
        assert_eq!(read(d, &format!("e/{f}")), read(d, &format!("e2/{f}")), "{f}");
    }
}

#[test]
fn inputs_are_not_modified() {
    let t = workspace();
    let d = t.path();
    let before = read(d, "data.bin");
    ok(d, &["train", "--mode", "augment", "--config", "quick.txt", "--data", "data.bin", "--out", "r"]);
    ok(d, &["eval", "--ckpt", "r/model.ckpt", "--data", "data.bin", "--out", "e"]);
    assert_eq!(before, read(d, "data.bin"));
    let manifest = String::from_utf8(read(d, "r/run.txt")).unwrap();
    assert!(manifest.starts_with("version = 1\ncommand = train\n"));
    assert!(manifest.contains("config.aug_only_mode = true"));
}
