//! Diagnostics attached to training runs.

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ekfac_core::curvature::{compute_kfe, estimate_factors};
use ekfac_core::diagnostics::{correlation_report, frobenius_errors, CorrelationReport, FrobeniusErrors};
use ekfac_core::net::{per_example_gradients, LayerBatchRecord, Network};

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::BenchError;
use crate::train::{run_training_observed, RunOptions, RunOutcome};

/// Layer record of a random sample of `n` training examples.
pub fn sample_record(
    net: &Network,
    data: &Dataset,
    layer: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LayerBatchRecord, BenchError> {
    if layer >= net.layers().len() {
        return Err(BenchError::Config(format!(
            "layer {layer} out of range for {} layers",
            net.layers().len()
        )));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n.min(data.len()));
    let x = data.gather(&idx);
    let bw = net.backward(&net.forward(&x)?, &x)?;
    Ok(bw.records.into_iter().nth(layer).unwrap())
}

/// Both Frobenius errors on a fresh sample every `stride` iterations, with
/// factors, eigenbasis and scalings all estimated from that sample.
pub fn frobenius_during_training(
    config: &TrainConfig,
    layer: usize,
    stride: usize,
    sample_size: usize,
) -> Result<(RunOutcome, Vec<(usize, FrobeniusErrors)>), BenchError> {
    if stride == 0 {
        return Err(BenchError::Config("stride must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4652_4f42);
    let mut rows = Vec::new();
    let out = run_training_observed(config, &RunOptions::default(), &mut |it, net, data| {
        if it % stride == 0 {
            let rec = sample_record(net, data, layer, sample_size, &mut rng)?;
            let factors = estimate_factors(&rec);
            let kfe = compute_kfe(&factors)?;
            rows.push((it, frobenius_errors(&per_example_gradients(&rec), &factors, &kfe)?));
        }
        Ok(())
    })?;
    Ok((out, rows))
}

/// Trains `config`, then measures gradient correlations of `subset_size`
/// random coordinates of `layer` over `sample_size` examples, in the
/// parameter basis and in the KFE estimated from the same sample.
pub fn correlation_after_training(
    config: &TrainConfig,
    layer: usize,
    subset_size: usize,
    sample_size: usize,
) -> Result<(RunOutcome, CorrelationReport), BenchError> {
    let out = run_training_observed(config, &RunOptions::default(), &mut |_, _, _| Ok(()))?;
    let (train, _) = crate::train::prepare_data(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x434f_5252);
    let rec = sample_record(&out.network, &train, layer, sample_size, &mut rng)?;
    let kfe = compute_kfe(&estimate_factors(&rec))?;
    let p = rec.param_count();
    if subset_size > p {
        return Err(BenchError::Config(format!("subset of {subset_size} exceeds the {p} parameters of layer {layer}")));
    }
    let mut subset = sample(&mut rng, p, subset_size).into_vec();
    subset.sort_unstable();
    let report = correlation_report(&per_example_gradients(&rec), &kfe, &subset)?;
    Ok((out, report))
}
