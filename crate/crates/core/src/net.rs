//! Fully-connected feedforward networks with per-example capture of layer
//! inputs and backpropagated pre-activation gradients.
//!
//! Biases are folded into the weights: each layer stores a `(d_in + 1) × d_out`
//! matrix whose last row is the bias, and every captured input carries a
//! trailing homogeneous `1.0`. A layer computes `a = [h, 1] · W̃` for a batch
//! laid out one example per row.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::linalg::{vec, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`. ReLU uses 0 at the kink.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Half the summed squared error over output units, averaged over examples.
    Mse,
    /// Binary cross-entropy summed over output units; requires a sigmoid output layer.
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(d_in: usize, d_out: usize, activation: Activation) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(contract(format!("layer dimensions {d_in}->{d_out} must be positive")));
        }
        Ok(Self {
            d_in,
            d_out,
            activation,
        })
    }

    /// Parameter count including the folded bias row.
    pub fn param_count(&self) -> usize {
        (self.d_in + 1) * self.d_out
    }
}

/// Weights and bias of one layer as a single augmented matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    augmented: DenseMatrix,
}

impl LayerParams {
    /// Builds from separate weights (`d_in × d_out`) and bias (`d_out`).
    pub fn new(weights: &DenseMatrix, bias: &[f64]) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(contract(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weights.cols()
            )));
        }
        let d_in = weights.rows();
        let mut aug = weights.as_na().clone().insert_row(d_in, 0.0);
        for (j, b) in bias.iter().enumerate() {
            aug[(d_in, j)] = *b;
        }
        Ok(Self {
            augmented: DenseMatrix::try_from_na(aug)?,
        })
    }

    pub fn from_augmented(augmented: DenseMatrix) -> Result<Self> {
        if augmented.rows() < 2 {
            return Err(contract("augmented weights need at least one input row plus the bias row"));
        }
        Ok(Self { augmented })
    }

    pub fn augmented(&self) -> &DenseMatrix {
        &self.augmented
    }

    pub fn weights(&self) -> DMatrix<f64> {
        let d_in = self.augmented.rows() - 1;
        self.augmented.as_na().rows(0, d_in).into_owned()
    }

    pub fn bias(&self) -> Vec<f64> {
        let d_in = self.augmented.rows() - 1;
        self.augmented.row(d_in).iter().copied().collect()
    }

    /// Row-major flattening of the augmented matrix.
    pub fn flat(&self) -> Vec<f64> {
        vec(self.augmented.as_na())
    }
}

/// Captured statistics of one layer for one minibatch. Row `n` of `inputs`
/// is `[h_n, 1]`, row `n` of `deltas` is `δ_n = ∂ℓ_n/∂a_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBatchRecord {
    inputs: DenseMatrix,
    deltas: DenseMatrix,
}

impl LayerBatchRecord {
    pub fn new(inputs: DenseMatrix, deltas: DenseMatrix) -> Result<Self> {
        if inputs.rows() != deltas.rows() {
            return Err(contract(format!(
                "{} inputs but {} deltas",
                inputs.rows(),
                deltas.rows()
            )));
        }
        Ok(Self { inputs, deltas })
    }

    pub fn inputs(&self) -> &DenseMatrix {
        &self.inputs
    }

    pub fn deltas(&self) -> &DenseMatrix {
        &self.deltas
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.rows()
    }

    /// Width of the (homogeneous) input, i.e. `d_in + 1` for network records.
    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.deltas.cols()
    }

    pub fn param_count(&self) -> usize {
        self.input_dim() * self.output_dim()
    }

    /// Mean over the batch of `h δᵀ`.
    pub fn mean_gradient(&self) -> DMatrix<f64> {
        self.inputs.as_na().transpose() * self.deltas.as_na() / self.batch_size() as f64
    }
}

/// One flattened gradient `vec(h_n δ_nᵀ)` per example.
pub fn per_example_gradients(record: &LayerBatchRecord) -> Vec<Vec<f64>> {
    let (h, d) = (record.inputs(), record.deltas());
    (0..record.batch_size())
        .map(|n| {
            let mut g = Vec::with_capacity(record.param_count());
            for i in 0..h.cols() {
                let hi = h[(n, i)];
                g.extend((0..d.cols()).map(|j| hi * d[(n, j)]));
            }
            g
        })
        .collect()
}

/// Activations retained by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Per layer, the homogeneous inputs `[h, 1]`, one example per row.
    pub inputs: Vec<DMatrix<f64>>,
    /// Per layer, the pre-activations `a`.
    pub preactivations: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

/// Result of [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Backward {
    pub records: Vec<LayerBatchRecord>,
    /// Per layer, the batch-mean gradient in augmented `(d_in + 1) × d_out` shape.
    pub mean_grads: Vec<DMatrix<f64>>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    loss: Loss,
}

impl Network {
    pub fn from_layers(layers: Vec<(LayerSpec, LayerParams)>, loss: Loss) -> Result<Self> {
        if layers.is_empty() {
            return Err(contract("network needs at least one layer"));
        }
        for (l, (spec, params)) in layers.iter().enumerate() {
            let aug = params.augmented();
            if aug.rows() != spec.d_in + 1 || aug.cols() != spec.d_out {
                return Err(contract(format!(
                    "layer {l}: parameters are {}x{}, spec needs {}x{}",
                    aug.rows(),
                    aug.cols(),
                    spec.d_in + 1,
                    spec.d_out
                )));
            }
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].0.d_out != pair[1].0.d_in {
                return Err(contract(format!(
                    "layer {l} outputs {} units but layer {} expects {}",
                    pair[0].0.d_out,
                    l + 1,
                    pair[1].0.d_in
                )));
            }
        }
        if loss == Loss::Bce && layers.last().unwrap().0.activation != Activation::Sigmoid {
            return Err(contract("binary cross-entropy requires a sigmoid output layer"));
        }
        Ok(Self {
            layers: layers
                .into_iter()
                .map(|(spec, params)| Layer { spec, params })
                .collect(),
            loss,
        })
    }

    /// Weights uniform in `±1/√d_in`, zero biases.
    pub fn initialized(specs: &[LayerSpec], loss: Loss, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|spec| {
                let bound = 1.0 / (spec.d_in as f64).sqrt();
                let mut aug = DMatrix::from_fn(spec.d_in + 1, spec.d_out, |_, _| {
                    rng.random_range(-bound..bound)
                });
                aug.row_mut(spec.d_in).fill(0.0);
                Ok((*spec, LayerParams::from_augmented(DenseMatrix::try_from_na(aug)?)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, loss)
    }

    /// Sigmoid auto-encoder: `encoder` lists unit counts from the input to the
    /// code layer, the decoder mirrors it with untied weights.
    pub fn autoencoder(encoder: &[usize], loss: Loss, seed: u64) -> Result<Self> {
        if encoder.len() < 2 {
            return Err(contract("auto-encoder needs an input size and at least one hidden size"));
        }
        let mut sizes = encoder.to_vec();
        sizes.extend(encoder.iter().rev().skip(1));
        Self::initialized(&mlp_specs(&sizes, Activation::Sigmoid)?, loss, seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn loss_kind(&self) -> Loss {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.d_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().spec.d_out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    pub fn set_params(&mut self, layer: usize, params: LayerParams) -> Result<()> {
        let spec = self.layers[layer].spec;
        let aug = params.augmented();
        if aug.rows() != spec.d_in + 1 || aug.cols() != spec.d_out {
            return Err(contract("replacement parameters have the wrong shape"));
        }
        self.layers[layer].params = params;
        Ok(())
    }

    /// `θ_l ← θ_l − scale · step`, with `step` in augmented shape.
    pub fn apply_step(&mut self, layer: usize, step: &DMatrix<f64>, scale: f64) -> Result<()> {
        let n = self.layers.len();
        let params = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| contract(format!("layer {layer} out of range for {n} layers")))?
            .params
            .augmented
            .as_na_mut();
        if params.shape() != step.shape() {
            return Err(contract(format!(
                "step of shape {:?} for parameters of shape {:?}",
                step.shape(),
                params.shape()
            )));
        }
        if params.iter().zip(step.iter()).any(|(p, s)| !(p - scale * s).is_finite()) {
            return Err(Error::Numeric("parameter update is not finite".into()));
        }
        params.zip_apply(step, |p, s| *p -= scale * s);
        Ok(())
    }

    pub fn forward(&self, batch: &DenseMatrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(contract(format!(
                "batch has {} features, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let n = batch.rows();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preactivations = Vec::with_capacity(self.layers.len());
        let mut current = batch.as_na().clone();
        for layer in &self.layers {
            let d_in = layer.spec.d_in;
            let h = current.insert_column(d_in, 1.0);
            debug_assert_eq!(h.nrows(), n);
            let z = &h * layer.params.augmented.as_na();
            current = z.map(|v| layer.spec.activation.apply(v));
            inputs.push(h);
            preactivations.push(z);
        }
        if current.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok(ForwardCache {
            inputs,
            preactivations,
            output: current,
        })
    }

    fn check_targets(&self, cache: &ForwardCache, targets: &DenseMatrix) -> Result<()> {
        if targets.shape() != cache.output.shape() {
            return Err(contract(format!(
                "targets of shape {:?} for outputs of shape {:?}",
                targets.shape(),
                cache.output.shape()
            )));
        }
        Ok(())
    }

    /// Mean per-example loss of a cached forward pass.
    pub fn loss_of(&self, cache: &ForwardCache, targets: &DenseMatrix) -> Result<f64> {
        self.check_targets(cache, targets)?;
        let n = targets.rows() as f64;
        let total = match self.loss {
            Loss::Mse => 0.5 * (&cache.output - targets.as_na()).norm_squared(),
            Loss::Bce => {
                let z = cache.preactivations.last().unwrap();
                z.iter()
                    .zip(targets.iter())
                    .map(|(&z, &t)| softplus(z) - t * z)
                    .sum()
            }
        };
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        Ok(loss)
    }

    pub fn loss(&self, batch: &DenseMatrix, targets: &DenseMatrix) -> Result<f64> {
        self.loss_of(&self.forward(batch)?, targets)
    }

    pub fn backward(&self, cache: &ForwardCache, targets: &DenseMatrix) -> Result<Backward> {
        let loss = self.loss_of(cache, targets)?;
        let n = targets.rows();
        let last = self.layers.len() - 1;

        let mut delta = match self.loss {
            // Sigmoid + cross-entropy: ∂ℓ/∂a = y − t.
            Loss::Bce => &cache.output - targets.as_na(),
            Loss::Mse => {
                let act = self.layers[last].spec.activation;
                let mut d = &cache.output - targets.as_na();
                d.zip_apply(&cache.preactivations[last], |g, z| *g *= act.derivative(z));
                d
            }
        };

        let mut records = Vec::with_capacity(self.layers.len());
        let mut mean_grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let h = &cache.inputs[l];
            mean_grads.push(h.transpose() * &delta / n as f64);
            let next_delta = if l > 0 {
                let d_in = self.layers[l].spec.d_in;
                let w = self.layers[l].params.augmented.as_na().rows(0, d_in);
                let mut back = &delta * w.transpose();
                let act = self.layers[l - 1].spec.activation;
                back.zip_apply(&cache.preactivations[l - 1], |g, z| *g *= act.derivative(z));
                Some(back)
            } else {
                None
            };
            records.push(LayerBatchRecord::new(
                DenseMatrix::try_from_na(h.clone())?,
                DenseMatrix::try_from_na(delta)?,
            )?);
            if let Some(d) = next_delta {
                delta = d;
            } else {
                break;
            }
        }
        records.reverse();
        mean_grads.reverse();
        Ok(Backward {
            records,
            mean_grads,
            loss,
        })
    }
}

/// Layer specs for consecutive `sizes`, all with the same activation.
pub fn mlp_specs(sizes: &[usize], activation: Activation) -> Result<Vec<LayerSpec>> {
    if sizes.len() < 2 {
        return Err(contract("need at least two layer sizes"));
    }
    sizes
        .windows(2)
        .map(|w| LayerSpec::new(w[0], w[1], activation))
        .collect()
}
