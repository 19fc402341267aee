//! The training loop, metrics stream and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ekfac_core::diagnostics::{SpectrumTrace, SpectrumTracker, SpectrumTrackerConfig};
use ekfac_core::linalg::DenseMatrix;
use ekfac_core::net::{mlp_specs, Activation, LayerParams, Network};
use ekfac_core::precond::{Optimizer, PhaseTimings};
use ekfac_core::Error as CoreError;

use crate::config::{loss_tag, TrainConfig};
use crate::data::Dataset;
use crate::error::{io_err, BenchError};

/// Losses above this abort the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
/// Validation holdout used when the dataset has more than twice this many examples.
pub const VALIDATION_HOLDOUT: usize = 10_000;
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub forward: f64,
    pub backward: f64,
    pub basis_refresh: f64,
    pub scaling: f64,
    pub precondition: f64,
}

impl From<PhaseTimings> for Timings {
    fn from(t: PhaseTimings) -> Self {
        Self {
            forward: t.forward,
            backward: t.backward,
            basis_refresh: t.basis_refresh,
            scaling: t.scaling,
            precondition: t.precondition,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event {
    /// Full training-set loss at the end of an epoch (epoch 0 is before training).
    Epoch,
    /// Minibatch loss of a single step.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub event: Event,
    /// Optimizer steps completed so far.
    pub iteration: usize,
    pub epoch: usize,
    /// Cumulative time spent in optimizer steps, excluding evaluation.
    pub wall_clock_seconds: f64,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    /// Cumulative per-phase time.
    pub timings: Timings,
    pub learning_rate: f64,
    pub basis_refreshes: usize,
}

impl MetricsRecord {
    /// The record with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_seconds: 0.0,
            timings: Timings::default(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { iteration: usize, reason: String },
}

/// What happened on one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub iteration: usize,
    pub refreshed: bool,
    pub basis_refresh_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    /// Only finite records; a diverged run ends at its last good epoch.
    pub records: Vec<MetricsRecord>,
    pub steps: Vec<StepLog>,
    pub traces: Vec<SpectrumTrace>,
    pub network: Network,
}

impl RunOutcome {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.event == Event::Epoch)
            .map(|r| r.train_loss)
            .collect()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epoch_losses().last().copied()
    }

    /// Mean wall time per optimizer step.
    pub fn mean_step_seconds(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.total_seconds).sum::<f64>() / self.steps.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOptions {
    pub layer: usize,
    pub stride: usize,
    /// Examples drawn for the exact Fisher at each checkpoint.
    pub trace_batch: usize,
    /// Re-estimate KFAC factors in the fixed basis this often; `None` freezes them with the basis.
    pub kfac_refresh_every: Option<usize>,
    pub running_decay: f64,
    pub csv_out: Option<PathBuf>,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            layer: 3,
            stride: 50,
            trace_batch: 500,
            kfac_refresh_every: None,
            running_decay: ekfac_core::curvature::DEFAULT_RUNNING_DECAY,
            csv_out: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub trace: Option<TraceOptions>,
    /// Stop after this many optimizer steps.
    pub max_iterations: Option<usize>,
}

pub fn build_network(config: &TrainConfig) -> Result<Network, BenchError> {
    let specs = mlp_specs(&config.arch, Activation::Sigmoid)?;
    Ok(Network::initialized(&specs, config.loss, config.seed)?)
}

/// Training set and optional validation set for `config`.
pub fn prepare_data(config: &TrainConfig) -> Result<(Dataset, Option<Dataset>), BenchError> {
    let data = config.dataset.load()?;
    if data.dim() != config.arch[0] {
        return Err(BenchError::Config(format!(
            "dataset has {} features but the network expects {}",
            data.dim(),
            config.arch[0]
        )));
    }
    if !config.validation {
        return Ok((data, None));
    }
    let holdout = if data.len() > 2 * VALIDATION_HOLDOUT { VALIDATION_HOLDOUT } else { data.len() / 6 };
    if holdout == 0 {
        return Err(BenchError::Config("dataset too small for a validation split".into()));
    }
    let (train, val) = data.split_tail(holdout);
    Ok((train, Some(val)))
}

/// Mean reconstruction loss over a whole dataset, evaluated in chunks.
pub fn dataset_loss(net: &Network, data: &Dataset) -> Result<f64, CoreError> {
    let mut total = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let x = data.gather(&idx);
        total += net.loss(&x, &x)? * (end - start) as f64;
        start = end;
    }
    Ok(total / data.len() as f64)
}

fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    if order.len() <= batch_size {
        return vec![order];
    }
    // Drop the ragged tail so every step sees the same batch size.
    order.chunks_exact(batch_size).collect()
}

struct MetricsSink {
    writer: Option<BufWriter<File>>,
    path: Option<PathBuf>,
}

impl MetricsSink {
    fn open(path: Option<&Path>) -> Result<Self, BenchError> {
        let writer = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                }
                Some(BufWriter::new(File::create(p).map_err(io_err(p))?))
            }
            None => None,
        };
        Ok(Self { writer, path: path.map(Path::to_owned) })
    }

    fn push(&mut self, record: &MetricsRecord, flush: bool) -> Result<(), BenchError> {
        if let (Some(w), Some(p)) = (self.writer.as_mut(), self.path.as_deref()) {
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n").map_err(io_err(p))?;
            if flush {
                w.flush().map_err(io_err(p))?;
            }
        }
        Ok(())
    }
}

fn diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_THRESHOLD
}

pub fn run_training(config: &TrainConfig) -> Result<RunOutcome, BenchError> {
    run_training_with(config, &RunOptions::default())
}

pub fn run_training_with(config: &TrainConfig, options: &RunOptions) -> Result<RunOutcome, BenchError> {
    run_training_observed(config, options, &mut |_, _, _| Ok(()))
}

/// Callback run before every step with the iteration, the current network and the training set.
pub type Observer<'a> = dyn FnMut(usize, &Network, &Dataset) -> Result<(), BenchError> + 'a;

pub fn run_training_observed(
    config: &TrainConfig,
    options: &RunOptions,
    observer: &mut Observer<'_>,
) -> Result<RunOutcome, BenchError> {
    config.validate()?;
    let (train, val) = prepare_data(config)?;
    let mut net = build_network(config)?;
    if let Some(t) = &options.trace {
        if t.layer >= net.layers().len() {
            return Err(BenchError::Config(format!(
                "trace layer {} out of range for {} layers",
                t.layer,
                net.layers().len()
            )));
        }
    }
    let mut opt = Optimizer::new(config.optimizer, config.hyper.clone(), &net)?;
    let base_lr = config.hyper.learning_rate;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546);
    let mut trace_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5452_4143);
    let mut sink = MetricsSink::open(config.metrics_out.as_deref())?;

    let mut records = Vec::new();
    let mut steps = Vec::new();
    let mut traces = Vec::new();
    let mut tracker: Option<SpectrumTracker> = None;
    let mut cumulative = PhaseTimings::default();
    let mut wall = 0.0;
    let mut status = RunStatus::Completed;
    let mut iteration = 0usize;

    let evaluate = |net: &Network| -> Result<(f64, Option<f64>), CoreError> {
        let t = dataset_loss(net, &train)?;
        let v = val.as_ref().map(|v| dataset_loss(net, v)).transpose()?;
        Ok((t, v))
    };
    let (loss0, val0) = evaluate(&net)?;
    let first = MetricsRecord {
        event: Event::Epoch,
        iteration: 0,
        epoch: 0,
        wall_clock_seconds: 0.0,
        train_loss: loss0,
        validation_loss: val0,
        timings: Timings::default(),
        learning_rate: base_lr,
        basis_refreshes: 0,
    };
    sink.push(&first, true)?;
    records.push(first);

    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 0..config.epochs {
        let lr = config.lr_schedule.rate(base_lr, epoch);
        opt.set_learning_rate(lr)?;
        order.shuffle(&mut shuffle_rng);
        for idx in batches(&order, config.batch_size) {
            if options.max_iterations.is_some_and(|m| iteration >= m) {
                break 'epochs;
            }
            observer(iteration, &net, &train)?;
            let x = train.gather(idx);
            let start = Instant::now();
            let t = Instant::now();
            let cache = match net.forward(&x) {
                Ok(c) => c,
                Err(CoreError::Numeric(reason)) => {
                    status = RunStatus::Diverged { iteration, reason };
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            let forward = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let bw = net.backward(&cache, &x)?;
            let backward = t.elapsed().as_secs_f64();
            let mut elapsed = start.elapsed().as_secs_f64();

            if diverged(bw.loss) {
                status = RunStatus::Diverged {
                    iteration,
                    reason: format!("minibatch loss {}", bw.loss),
                };
                break 'epochs;
            }

            if let Some(topt) = &options.trace {
                let record = &bw.records[topt.layer];
                if tracker.is_none() {
                    tracker = Some(SpectrumTracker::new(
                        record,
                        SpectrumTrackerConfig {
                            stride: topt.stride,
                            kfac_refresh_every: topt.kfac_refresh_every,
                            running_decay: topt.running_decay,
                        },
                    )?);
                }
                let tr = tracker.as_mut().unwrap();
                tr.observe(iteration, record)?;
                if tr.is_checkpoint(iteration) {
                    let mut probe: Vec<usize> = (0..train.len()).collect();
                    probe.shuffle(&mut trace_rng);
                    probe.truncate(topt.trace_batch.min(train.len()));
                    let px = train.gather(&probe);
                    let pbw = net.backward(&net.forward(&px)?, &px)?;
                    traces.push(tr.checkpoint(iteration, &pbw.records[topt.layer])?);
                }
            }

            let report = match opt.apply(&mut net, &bw) {
                Ok(r) => r,
                Err(CoreError::Numeric(reason)) => {
                    status = RunStatus::Diverged { iteration, reason };
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            elapsed += report.total_seconds;
            let mut phase = report.timings;
            phase.forward = forward;
            phase.backward = backward;
            cumulative.accumulate(&phase);
            wall += elapsed;
            steps.push(StepLog {
                iteration,
                refreshed: report.refreshed,
                basis_refresh_seconds: phase.basis_refresh,
                total_seconds: elapsed,
            });
            iteration += 1;

            if config.log_every.is_some_and(|k| iteration.is_multiple_of(k)) {
                let rec = MetricsRecord {
                    event: Event::Step,
                    iteration,
                    epoch: epoch + 1,
                    wall_clock_seconds: wall,
                    train_loss: bw.loss,
                    validation_loss: None,
                    timings: cumulative.into(),
                    learning_rate: lr,
                    basis_refreshes: opt.refresh_count(),
                };
                sink.push(&rec, false)?;
                records.push(rec);
            }
        }

        let (loss, val_loss) = match evaluate(&net) {
            Ok(v) => v,
            Err(CoreError::Numeric(reason)) => {
                status = RunStatus::Diverged { iteration, reason };
                break;
            }
            Err(e) => return Err(e.into()),
        };
        if diverged(loss) {
            status = RunStatus::Diverged { iteration, reason: format!("training loss {loss}") };
            break;
        }
        let rec = MetricsRecord {
            event: Event::Epoch,
            iteration,
            epoch: epoch + 1,
            wall_clock_seconds: wall,
            train_loss: loss,
            validation_loss: val_loss,
            timings: cumulative.into(),
            learning_rate: lr,
            basis_refreshes: opt.refresh_count(),
        };
        sink.push(&rec, true)?;
        records.push(rec);
    }

    if let Some(p) = &config.metrics_out {
        let mut header = config.describe();
        header["status"] = serde_json::Value::String(match &status {
            RunStatus::Completed => "completed".into(),
            RunStatus::Diverged { .. } => "diverged".into(),
        });
        header["epochs_completed"] = records.iter().filter(|r| r.event == Event::Epoch).count().saturating_sub(1).into();
        write_checkpoint(&p.with_extension("ckpt"), &net, header)?;
    }
    if let Some(csv_path) = options.trace.as_ref().and_then(|t| t.csv_out.as_deref()) {
        crate::report::write_trace_csv(csv_path, &traces)?;
        crate::report::write_trace_metadata(csv_path, options.trace.as_ref().unwrap(), config)?;
    }

    Ok(RunOutcome { status, records, steps, traces, network: net })
}

/// Writes `u64 LE header length`, a JSON header, then every layer's
/// augmented `(d_in + 1) × d_out` weights (bias last row) as row-major LE `f64`.
pub fn write_checkpoint(path: &Path, net: &Network, mut header: serde_json::Value) -> Result<(), BenchError> {
    let shapes: Vec<[usize; 2]> = net.layers().iter().map(|l| [l.spec.d_in + 1, l.spec.d_out]).collect();
    header["layers"] = serde_json::to_value(&shapes)?;
    header["loss"] = loss_tag(net.loss_kind()).into();
    let head = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut bytes = Vec::with_capacity(8 + head.len() + 8 * net.param_count());
    bytes.extend_from_slice(&(head.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&head);
    for layer in net.layers() {
        for x in layer.params.flat() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Reads a checkpoint back into the network it was written from.
pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Network), BenchError> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    let bad = |offset: usize, m: &str| BenchError::Format(crate::error::FormatError::new(offset, m).in_file(path));
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad(0, "missing header length"))?.try_into().unwrap();
    let head_len = u64::from_le_bytes(len_bytes) as usize;
    let head = bytes.get(8..8 + head_len).ok_or_else(|| bad(8, "truncated header"))?;
    let header: serde_json::Value = serde_json::from_slice(head)?;
    let shapes: Vec<[usize; 2]> = serde_json::from_value(header["layers"].clone())?;
    let loss = crate::config::parse_loss(header["loss"].as_str().unwrap_or("mse"))?;
    let mut pos = 8 + head_len;
    let mut widths = vec![shapes.first().map(|s| s[0] - 1).ok_or_else(|| bad(8, "no layers"))?];
    let mut params = Vec::new();
    for [rows, cols] in &shapes {
        let n = rows * cols;
        let chunk = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad(pos, "truncated weights"))?;
        let vals: Vec<f64> = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(LayerParams::from_augmented(DenseMatrix::from_row_slice(*rows, *cols, &vals)?)?);
        widths.push(*cols);
        pos += 8 * n;
    }
    if pos != bytes.len() {
        return Err(bad(pos, "trailing bytes after weights"));
    }
    let specs = mlp_specs(&widths, Activation::Sigmoid)?;
    let net = Network::from_layers(specs.into_iter().zip(params).collect(), loss)?;
    Ok((header, net))
}
