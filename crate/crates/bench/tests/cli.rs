use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ekfac_bench::train::{read_checkpoint, MetricsRecord};

const TINY: [&str; 4] = ["--arch", "6,4,6", "--dataset", "synthetic:n=60,dim=6,latent=2,seed=3"];

fn ekfac(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ekfac")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "ekfac {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn records(path: &Path) -> Vec<MetricsRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect()
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.jsonl");
    let o = ekfac(
        &[
            &["train", "--optimizer", "ekfac-ra", "--lr", "0.05", "--batch-size", "20", "--freq", "2"][..],
            &["--epochs", "3", "--single-thread", "--out", out.to_str().unwrap()],
            &TINY,
        ]
        .concat(),
    );
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("status: completed"), "{stdout}");

    let recs = records(&out);
    assert_eq!(recs.len(), 4);
    assert_eq!(recs.last().unwrap().epoch, 3);
    assert_eq!(recs.last().unwrap().iteration, 9);
    // Refreshes at iterations 0, 2, 4, 6, 8.
    assert_eq!(recs.last().unwrap().basis_refreshes, 5);

    let (header, net) = read_checkpoint(&out.with_extension("ckpt")).unwrap();
    assert_eq!(header["status"], "completed");
    assert_eq!(net.layers().len(), 2);
}

#[test]
fn train_rejects_unknown_optimizer() {
    let out = Command::new(env!("CARGO_BIN_EXE_ekfac"))
        .args(["train", "--optimizer", "newton", "--epochs", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("newton"));
}

#[test]
fn train_is_deterministic_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ekfac(
            &[
                &["train", "--optimizer", "kfac", "--batch-size", "15", "--freq", "3", "--epochs", "2"][..],
                &["--single-thread", "--out", out.to_str().unwrap()],
                &TINY,
            ]
            .concat(),
        );
        records(&out).iter().map(MetricsRecord::without_timing).collect::<Vec<_>>()
    };
    assert_eq!(run("a.jsonl"), run("b.jsonl"));
}

#[test]
fn grid_writes_one_stream_per_cell_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cells = dir.path().join("cells");
    let config = dir.path().join("grid.txt");
    fs::write(
        &config,
        format!(
            "# two optimizers, two learning rates\n\
             optimizer = ekfac, kfac\n\
             lr = 0.1, 0.01\n\
             damping = 0.01\n\
             batch_size = 20\n\
             freq = 2\n\
             epochs = 2\n\
             arch = 6,4,6\n\
             dataset = synthetic:n=60,dim=6,latent=2,seed=3\n\
             out_dir = {}\n",
            cells.display()
        ),
    )
    .unwrap();
    let summary = dir.path().join("summary.csv");
    ekfac(&["grid", "--config", config.to_str().unwrap(), "--summary", summary.to_str().unwrap(), "--single-thread"]);

    assert_eq!(csv_rows(&summary).len(), 4);
    let streams = fs::read_dir(&cells).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "jsonl")
    });
    assert_eq!(streams.count(), 4);
    // One row per optimizer and epoch, epochs 0..=2.
    assert_eq!(csv_rows(&dir.path().join("summary_best.csv")).len(), 6);
}

#[test]
fn diagnose_commands_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--batch-size", "20", "--freq", "2", "--epochs", "2", "--single-thread"];

    let fro = dir.path().join("fro.csv");
    ekfac(&[&["diagnose", "frobenius", "--layer", "0", "--stride", "2", "--sample", "30"][..], &common, &TINY, &["--out", fro.to_str().unwrap()]].concat());
    let rows = csv_rows(&fro);
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let (k, e): (f64, f64) = (r[1].parse().unwrap(), r[2].parse().unwrap());
        assert!(e <= k + 1e-10, "{r:?}");
    }

    let spec = dir.path().join("spec.csv");
    ekfac(&[&["diagnose", "spectrum", "--layer", "1", "--stride", "2", "--sample", "30", "--kfac-refresh", "2"][..], &common, &TINY, &["--out", spec.to_str().unwrap()]].concat());
    let mut r = csv::Reader::from_path(&spec).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["iteration", "dist_kfac", "dist_ekfac_intrabatch", "dist_ekfac_ra"]
    );
    assert_eq!(csv_rows(&spec).len(), 3);
    let meta = fs::read_to_string(spec.with_extension("meta.json")).unwrap();
    assert!(meta.contains("re-estimated every 2"), "{meta}");

    let corr = dir.path().join("corr.csv");
    let o = ekfac(&[&["diagnose", "correlation", "--layer", "0", "--subset", "10", "--sample", "40"][..], &common, &TINY, &["--out", corr.to_str().unwrap()]].concat());
    assert!(String::from_utf8_lossy(&o.stdout).contains("KFE"));
    assert!(!csv_rows(&corr).is_empty());
}

#[test]
fn diagnose_requires_output_path() {
    let out = Command::new(env!("CARGO_BIN_EXE_ekfac"))
        .args([&["diagnose", "spectrum"][..], &TINY].concat())
        .output()
        .unwrap();
    assert!(!out.status.success());
}

fn idx_images(images: &[[u8; 6]]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for d in [images.len() as u32, 2, 3] {
        b.extend_from_slice(&d.to_be_bytes());
    }
    images.iter().for_each(|im| b.extend_from_slice(im));
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

#[test]
fn trains_on_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<[u8; 6]> = (0..40u8).map(|i| [i * 6, 255 - i, 128, i % 7 * 30, 0, 255]).collect();
    fs::write(dir.path().join("train-images-idx3-ubyte"), idx_images(&images)).unwrap();
    fs::write(dir.path().join("train-labels-idx1-ubyte"), idx_labels(&[3; 40])).unwrap();

    let out = dir.path().join("m.jsonl");
    let dataset = format!("mnist:{},n=30", dir.path().display());
    ekfac(&[
        "train", "--optimizer", "adam", "--lr", "0.01", "--batch-size", "10", "--epochs", "2", "--arch", "6,3,6",
        "--dataset", &dataset, "--out", out.to_str().unwrap(),
    ]);
    let recs = records(&out);
    // 30 examples in batches of 10.
    assert_eq!(recs.last().unwrap().iteration, 6);
}

#[test]
fn reports_corrupt_idx_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = idx_images(&[[1; 6], [2; 6]]);
    bytes.truncate(bytes.len() - 1);
    fs::write(dir.path().join("train-images-idx3-ubyte"), bytes).unwrap();
    fs::write(dir.path().join("train-labels-idx1-ubyte"), idx_labels(&[0, 1])).unwrap();

    let out = Command::new(env!("CARGO_BIN_EXE_ekfac"))
        .args(["train", "--arch", "6,3,6", "--epochs", "1", "--dataset"])
        .arg(format!("mnist:{}", dir.path().display()))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train-images-idx3-ubyte") && err.contains("byte"), "{err}");
}
