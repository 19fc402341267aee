//! CSV outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use ekfac_core::diagnostics::{CorrelationReport, FrobeniusErrors, SpectrumTrace};

use crate::config::TrainConfig;
use crate::error::{io_err, BenchError};
use crate::grid::CellResult;
use crate::train::TraceOptions;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, BenchError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<(), BenchError> {
    w.flush().map_err(io_err(path))
}

pub fn write_trace_csv(path: &Path, traces: &[SpectrumTrace]) -> Result<(), BenchError> {
    let mut w = writer(path)?;
    w.write_record(["iteration", "dist_kfac", "dist_ekfac_intrabatch", "dist_ekfac_ra"])?;
    for t in traces {
        w.write_record([
            t.iteration.to_string(),
            t.dist_kfac.to_string(),
            t.dist_ekfac_intrabatch.to_string(),
            t.dist_ekfac_ra.to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn metadata_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Sidecar describing how the trace spectra were measured.
pub fn write_trace_metadata(csv_path: &Path, opts: &TraceOptions, config: &TrainConfig) -> Result<(), BenchError> {
    let meta = json!({
        "spectra": "raw eigenvalues, each sorted descending before the l2 distance",
        "exact_fisher": "empirical Fisher of a fresh random sample at each checkpoint",
        "basis": "Kronecker-factored eigenbasis of the first training batch, kept fixed",
        "ekfac_ra": "running average of individual-gradient second moments",
        "layer": opts.layer,
        "stride": opts.stride,
        "trace_batch": opts.trace_batch,
        "kfac": match opts.kfac_refresh_every {
            None => "eigenvalues of the first batch's factors, fixed with the basis".to_string(),
            Some(n) => format!("factor diagonals in the fixed basis, re-estimated every {n} iterations"),
        },
        "running_decay": opts.running_decay,
        "run": config.describe(),
    });
    let path = metadata_path(csv_path);
    std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(io_err(&path))
}

pub fn write_grid_summary(path: &Path, results: &[CellResult]) -> Result<(), BenchError> {
    let mut w = writer(path)?;
    w.write_record([
        "cell", "optimizer", "lr", "damping", "batch_size", "freq", "seed", "status", "final_loss", "best_loss",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in results {
        w.write_record([
            r.index.to_string(),
            r.optimizer.tag().to_string(),
            r.lr.to_string(),
            r.damping.to_string(),
            r.batch_size.to_string(),
            r.freq.to_string(),
            r.seed.to_string(),
            r.status.clone(),
            opt(r.final_loss()),
            opt(r.best_loss()),
        ])?;
    }
    finish(w, path)
}

pub fn write_per_epoch_best(path: &Path, best: &BTreeMap<(String, u64), Vec<f64>>) -> Result<(), BenchError> {
    let mut w = writer(path)?;
    w.write_record(["optimizer", "seed", "epoch", "best_train_loss"])?;
    for ((opt, seed), losses) in best {
        for (e, l) in losses.iter().enumerate() {
            w.write_record([opt.clone(), seed.to_string(), e.to_string(), l.to_string()])?;
        }
    }
    finish(w, path)
}

pub fn write_frobenius_csv(path: &Path, rows: &[(usize, FrobeniusErrors)]) -> Result<(), BenchError> {
    let mut w = writer(path)?;
    w.write_record(["iteration", "err_kfac", "err_ekfac"])?;
    for (it, e) in rows {
        w.write_record([it.to_string(), e.err_kfac.to_string(), e.err_ekfac.to_string()])?;
    }
    finish(w, path)
}

/// Long format: one row per matrix entry of each basis.
pub fn write_correlation_csv(path: &Path, report: &CorrelationReport) -> Result<(), BenchError> {
    let mut w = writer(path)?;
    w.write_record(["basis", "row", "col", "coordinate_row", "coordinate_col", "correlation"])?;
    for (name, m) in [("parameter", &report.parameter), ("kfe", &report.kfe)] {
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                w.write_record([
                    name.to_string(),
                    i.to_string(),
                    j.to_string(),
                    report.subset[i].to_string(),
                    report.subset[j].to_string(),
                    m[(i, j)].to_string(),
                ])?;
            }
        }
    }
    finish(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_csv_has_fixed_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let t = SpectrumTrace {
            iteration: 50,
            exact: vec![],
            kfac: vec![],
            ekfac_intrabatch: vec![],
            ekfac_ra: vec![],
            dist_kfac: 0.5,
            dist_ekfac_intrabatch: 0.25,
            dist_ekfac_ra: 0.125,
        };
        write_trace_csv(&p, &[t]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "iteration,dist_kfac,dist_ekfac_intrabatch,dist_ekfac_ra\n50,0.5,0.25,0.125\n");
    }
}
