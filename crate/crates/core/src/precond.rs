//! The preconditioner family and the training step that applies it.
//!
//! Every Kronecker-based variant shares one code path: project the gradient
//! into the layer's KFE, divide by a per-direction scaling plus damping, and
//! project back. KFAC, EKFAC and EKFAC-ra differ only in the scaling vector.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::curvature::{
    compute_kfe, estimate_factors, exact_fisher_block, s_star_from_projected, ExactFisherBlock, KfeState,
    KroneckerFactors, DEFAULT_RUNNING_DECAY,
};
use crate::error::{contract, Error, Result};
use crate::linalg::{spd_solve, unvec, vec, DenseMatrix};
use crate::net::{per_example_gradients, Backward, LayerBatchRecord, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PreconditionerKind {
    Sgd,
    SgdMomentum,
    Adam,
    Diagonal,
    Kfac,
    Ekfac,
    EkfacRa,
    ExactFisher,
}

impl PreconditionerKind {
    pub const ALL: [PreconditionerKind; 8] = [
        Self::Sgd,
        Self::SgdMomentum,
        Self::Adam,
        Self::Diagonal,
        Self::Kfac,
        Self::Ekfac,
        Self::EkfacRa,
        Self::ExactFisher,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::SgdMomentum => "sgd-momentum",
            Self::Adam => "adam",
            Self::Diagonal => "diagonal",
            Self::Kfac => "kfac",
            Self::Ekfac => "ekfac",
            Self::EkfacRa => "ekfac-ra",
            Self::ExactFisher => "exact-fisher",
        }
    }

    /// Whether the method keeps a Kronecker-factored eigenbasis.
    pub fn uses_kfe(self) -> bool {
        matches!(self, Self::Kfac | Self::Ekfac | Self::EkfacRa)
    }
}

impl fmt::Display for PreconditionerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PreconditionerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| contract(format!("unknown optimizer '{s}'")))
    }
}

/// Where KFAC adds its damping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KfacDamping {
    /// `1 / ((S_A ⊗ S_B)_ii + ε)`, the same placement as EKFAC.
    #[default]
    Eigenvalue,
    /// `(A + √ε I)⁻¹ ⊗ (B + √ε I)⁻¹`.
    Factored,
}

/// What the running-average scalings average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RunningMode {
    /// Squares of the projected minibatch-mean gradient.
    #[default]
    MinibatchMean,
    /// Intrabatch second moments of individual gradients.
    Individual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub damping: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub running_decay: f64,
    /// Recompute factors and eigenbases every this many iterations.
    pub refresh_every: usize,
    pub kfac_damping: KfacDamping,
    pub running_mode: RunningMode,
    /// Exponential moving average over factor matrices; `None` uses the refresh batch only.
    pub factor_decay: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            damping: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            running_decay: DEFAULT_RUNNING_DECAY,
            refresh_every: 50,
            kfac_damping: KfacDamping::Eigenvalue,
            running_mode: RunningMode::MinibatchMean,
            factor_decay: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(contract(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(contract(format!("damping {} must be non-negative", self.damping)));
        }
        if self.refresh_every == 0 {
            return Err(contract("refresh frequency must be at least 1"));
        }
        for (name, v) in [
            ("running decay", self.running_decay),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(contract(format!("{name} {v} must lie in (0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(contract(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if let Some(d) = self.factor_decay {
            if !(d > 0.0 && d < 1.0) {
                return Err(contract(format!("factor decay {d} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// `(U_A ⊗ U_B) diag(1 / (scaling + damping)) (U_A ⊗ U_B)ᵀ · grad`.
pub fn precondition_in_kfe(
    state: &KfeState,
    grad: &[f64],
    scaling: &[f64],
    damping: f64,
) -> Result<Vec<f64>> {
    if grad.len() != state.param_count() {
        return Err(contract(format!(
            "gradient of length {} for a block of {} parameters",
            grad.len(),
            state.param_count()
        )));
    }
    let c = unvec(grad, state.input_dim(), state.output_dim())?;
    let mut tilde = state.project_matrix(&c);
    rescale_in_kfe(&mut tilde, scaling, damping)?;
    Ok(vec(&state.unproject_matrix(&tilde)))
}

/// Divides a KFE-coordinate gradient entrywise by `scaling + damping`;
/// `scaling` is indexed like [`vec`].
pub fn rescale_in_kfe(tilde: &mut DMatrix<f64>, scaling: &[f64], damping: f64) -> Result<()> {
    let cols = tilde.ncols();
    if scaling.len() != tilde.len() {
        return Err(contract(format!(
            "scaling of length {} for a block of {} parameters",
            scaling.len(),
            tilde.len()
        )));
    }
    for (k, s) in scaling.iter().enumerate() {
        let denom = s + damping;
        if denom.is_nan() || denom <= 0.0 {
            return Err(Error::Numeric(format!(
                "non-positive scaling {denom:e} in the eigenbasis; increase damping"
            )));
        }
        tilde[(k / cols, k % cols)] /= denom;
    }
    Ok(())
}

pub fn precondition_kfac(
    state: &KfeState,
    grad: &[f64],
    damping: f64,
    placement: KfacDamping,
) -> Result<Vec<f64>> {
    match placement {
        KfacDamping::Eigenvalue => {
            precondition_in_kfe(state, grad, &state.kfac_eigenvalues(), damping)
        }
        KfacDamping::Factored => {
            precondition_in_kfe(state, grad, &factored_scaling(state, damping), 0.0)
        }
    }
}

/// `(S_A + √ε)(S_B + √ε)`, the KFE eigenvalues of `(A + √ε I) ⊗ (B + √ε I)`.
fn factored_scaling(state: &KfeState, damping: f64) -> Vec<f64> {
    let root = damping.sqrt();
    state
        .s_a
        .iter()
        .flat_map(|a| state.s_b.iter().map(move |b| (a + root) * (b + root)))
        .collect()
}

pub fn precondition_ekfac(state: &KfeState, grad: &[f64], damping: f64) -> Result<Vec<f64>> {
    let s_star = state
        .s_star
        .as_deref()
        .ok_or_else(|| Error::State("EKFAC scalings have not been estimated".into()))?;
    precondition_in_kfe(state, grad, s_star, damping)
}

/// `grad_i / (σ²_i + ε)` in the parameter basis.
pub fn precondition_diagonal(second_moment: &[f64], grad: &[f64], damping: f64) -> Result<Vec<f64>> {
    if second_moment.len() != grad.len() {
        return Err(contract("second-moment and gradient lengths differ"));
    }
    grad.iter()
        .zip(second_moment)
        .map(|(g, s)| {
            let denom = s + damping;
            if denom > 0.0 {
                Ok(g / denom)
            } else {
                Err(Error::Numeric(format!("non-positive diagonal scaling {denom:e}")))
            }
        })
        .collect()
}

/// Solves `(G + εI) x = grad`.
pub fn precondition_exact(block: &ExactFisherBlock, grad: &[f64], damping: f64) -> Result<Vec<f64>> {
    if grad.len() != block.dim() {
        return Err(contract(format!(
            "gradient of length {} for a Fisher block of size {}",
            grad.len(),
            block.dim()
        )));
    }
    let mut m = block.g.as_na().clone();
    for i in 0..m.nrows() {
        m[(i, i)] += damping;
    }
    spd_solve(&DenseMatrix::try_from_na(m)?, grad)
}

/// Mean over the batch of squared per-example gradients, per coordinate.
pub fn per_coordinate_second_moment(record: &LayerBatchRecord) -> Vec<f64> {
    let h2 = record.inputs().as_na().map(|x| x * x);
    let d2 = record.deltas().as_na().map(|x| x * x);
    vec(&(h2.tr_mul(&d2) / record.batch_size() as f64))
}

#[derive(Debug, Clone)]
enum LayerState {
    Plain,
    Momentum(DMatrix<f64>),
    Adam { m: DMatrix<f64>, v: DMatrix<f64> },
    Diagonal(Option<Vec<f64>>),
    Kfe {
        state: Option<KfeState>,
        factors: Option<KroneckerFactors>,
    },
    Exact,
}

/// Wall-clock seconds spent in each phase of a step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub forward: f64,
    pub backward: f64,
    pub basis_refresh: f64,
    pub scaling: f64,
    pub precondition: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.forward + self.backward + self.basis_refresh + self.scaling + self.precondition
    }

    pub fn accumulate(&mut self, other: &PhaseTimings) {
        self.forward += other.forward;
        self.backward += other.backward;
        self.basis_refresh += other.basis_refresh;
        self.scaling += other.scaling;
        self.precondition += other.precondition;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    /// Minibatch loss before the update.
    pub loss: f64,
    pub timings: PhaseTimings,
    pub total_seconds: f64,
    /// Whether factors and eigenbases were recomputed on this iteration.
    pub refreshed: bool,
}

/// A preconditioner together with its per-layer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: PreconditionerKind,
    hyper: Hyperparams,
    layers: Vec<LayerState>,
    iteration: usize,
    refresh_count: usize,
}

impl Optimizer {
    pub fn new(kind: PreconditionerKind, hyper: Hyperparams, net: &Network) -> Result<Self> {
        hyper.validate()?;
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let shape = (l.spec.d_in + 1, l.spec.d_out);
                match kind {
                    PreconditionerKind::Sgd => LayerState::Plain,
                    PreconditionerKind::SgdMomentum => {
                        LayerState::Momentum(DMatrix::zeros(shape.0, shape.1))
                    }
                    PreconditionerKind::Adam => LayerState::Adam {
                        m: DMatrix::zeros(shape.0, shape.1),
                        v: DMatrix::zeros(shape.0, shape.1),
                    },
                    PreconditionerKind::Diagonal => LayerState::Diagonal(None),
                    PreconditionerKind::Kfac
                    | PreconditionerKind::Ekfac
                    | PreconditionerKind::EkfacRa => LayerState::Kfe {
                        state: None,
                        factors: None,
                    },
                    PreconditionerKind::ExactFisher => LayerState::Exact,
                }
            })
            .collect();
        Ok(Self {
            kind,
            hyper,
            layers,
            iteration: 0,
            refresh_count: 0,
        })
    }

    pub fn kind(&self) -> PreconditionerKind {
        self.kind
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Number of iterations on which eigenbases were recomputed.
    pub fn refresh_count(&self) -> usize {
        self.refresh_count
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(contract(format!("learning rate {lr} must be positive")));
        }
        self.hyper.learning_rate = lr;
        Ok(())
    }

    pub fn kfe_state(&self, layer: usize) -> Option<&KfeState> {
        match self.layers.get(layer)? {
            LayerState::Kfe { state, .. } => state.as_ref(),
            _ => None,
        }
    }

    pub fn diagonal_second_moment(&self, layer: usize) -> Option<&[f64]> {
        match self.layers.get(layer)? {
            LayerState::Diagonal(s) => s.as_deref(),
            _ => None,
        }
    }

    /// Whether the basis is due for recomputation on the current iteration.
    pub fn refresh_due(&self) -> bool {
        self.iteration.is_multiple_of(self.hyper.refresh_every)
    }

    /// Forward, backward, precondition and update on one minibatch.
    pub fn step(
        &mut self,
        net: &mut Network,
        inputs: &DenseMatrix,
        targets: &DenseMatrix,
    ) -> Result<StepReport> {
        let start = Instant::now();
        let mut timings = PhaseTimings::default();

        let t = Instant::now();
        let cache = net.forward(inputs)?;
        timings.forward = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let bw = net.backward(&cache, targets)?;
        timings.backward = t.elapsed().as_secs_f64();

        let mut report = self.apply(net, &bw)?;
        report.timings.forward = timings.forward;
        report.timings.backward = timings.backward;
        report.total_seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }

    /// Updates `net` from an already computed backward pass and advances the iteration.
    pub fn apply(&mut self, net: &mut Network, bw: &Backward) -> Result<StepReport> {
        let start = Instant::now();
        if bw.records.len() != self.layers.len() {
            return Err(contract("backward pass does not match the optimizer's layers"));
        }
        let mut timings = PhaseTimings::default();
        let refresh = self.refresh_due();
        let it = self.iteration;
        let hyper = self.hyper.clone();

        for (l, layer_state) in self.layers.iter_mut().enumerate() {
            let record = &bw.records[l];
            let mean = &bw.mean_grads[l];
            let step = match layer_state {
                LayerState::Plain => {
                    let t = Instant::now();
                    let s = mean.clone();
                    timings.precondition += t.elapsed().as_secs_f64();
                    s
                }
                LayerState::Momentum(v) => {
                    let t = Instant::now();
                    *v *= hyper.momentum;
                    *v += mean;
                    timings.precondition += t.elapsed().as_secs_f64();
                    v.clone()
                }
                LayerState::Adam { m, v } => {
                    let t = Instant::now();
                    let step_no = (it + 1) as i32;
                    m.zip_apply(mean, |m, g| *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g);
                    v.zip_apply(mean, |v, g| *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g);
                    let c1 = 1.0 - hyper.beta1.powi(step_no);
                    let c2 = 1.0 - hyper.beta2.powi(step_no);
                    let s = m.zip_map(v, |m, v| (m / c1) / ((v / c2).sqrt() + hyper.adam_epsilon));
                    timings.precondition += t.elapsed().as_secs_f64();
                    s
                }
                LayerState::Diagonal(second) => {
                    let t = Instant::now();
                    let flat = vec(mean);
                    let fresh = match hyper.running_mode {
                        RunningMode::MinibatchMean => flat.iter().map(|g| g * g).collect(),
                        RunningMode::Individual => per_coordinate_second_moment(record),
                    };
                    blend_running(second, fresh, hyper.running_decay);
                    timings.scaling += t.elapsed().as_secs_f64();

                    let t = Instant::now();
                    let out = precondition_diagonal(second.as_deref().unwrap(), &flat, hyper.damping)?;
                    let s = unvec(&out, mean.nrows(), mean.ncols())?;
                    timings.precondition += t.elapsed().as_secs_f64();
                    s
                }
                LayerState::Kfe { state, factors } => {
                    if refresh || state.is_none() {
                        let t = Instant::now();
                        let fresh = estimate_factors(record);
                        let used = match (hyper.factor_decay, factors.as_mut()) {
                            (Some(decay), Some(avg)) => {
                                avg.blend(&fresh, decay)?;
                                avg.clone()
                            }
                            _ => {
                                *factors = Some(fresh.clone());
                                fresh
                            }
                        };
                        let mut kfe = compute_kfe(&used)?;
                        kfe.last_basis_refresh = it;
                        *state = Some(kfe);
                        timings.basis_refresh += t.elapsed().as_secs_f64();
                    }
                    let kfe = state.as_mut().unwrap();

                    // Rotated inputs and deltas give both the intrabatch scalings and
                    // the projected mean gradient, sparing one projection.
                    let t = Instant::now();
                    let mut tilde = None;
                    let individual = self.kind == PreconditionerKind::Ekfac
                        || (self.kind == PreconditionerKind::EkfacRa
                            && hyper.running_mode == RunningMode::Individual);
                    if individual {
                        let (hp, dp) = kfe.project_record(record)?;
                        let fresh = s_star_from_projected(&hp, &dp);
                        if self.kind == PreconditionerKind::Ekfac {
                            kfe.s_star = Some(fresh);
                        } else {
                            if refresh {
                                kfe.s_star = None;
                            }
                            kfe.blend_s_star(fresh, hyper.running_decay);
                        }
                        tilde = Some(hp.tr_mul(&dp) / record.batch_size() as f64);
                    } else if self.kind == PreconditionerKind::EkfacRa {
                        if refresh {
                            // Coordinates in a new basis are unrelated to the old average.
                            kfe.s_star = None;
                        }
                        kfe.update_running_s_star(&vec(mean), hyper.running_decay)?;
                    }
                    timings.scaling += t.elapsed().as_secs_f64();

                    let t = Instant::now();
                    let mut tilde = match tilde {
                        Some(t) => t,
                        None => kfe.project_matrix(mean),
                    };
                    match (self.kind, hyper.kfac_damping) {
                        (PreconditionerKind::Kfac, KfacDamping::Eigenvalue) => {
                            rescale_in_kfe(&mut tilde, &kfe.kfac_eigenvalues(), hyper.damping)?
                        }
                        (PreconditionerKind::Kfac, KfacDamping::Factored) => {
                            rescale_in_kfe(&mut tilde, &factored_scaling(kfe, hyper.damping), 0.0)?
                        }
                        _ => {
                            let s_star = kfe.s_star.as_deref().ok_or_else(|| {
                                Error::State("EKFAC scalings have not been estimated".into())
                            })?;
                            rescale_in_kfe(&mut tilde, s_star, hyper.damping)?
                        }
                    }
                    let s = kfe.unproject_matrix(&tilde);
                    timings.precondition += t.elapsed().as_secs_f64();
                    s
                }
                LayerState::Exact => {
                    let t = Instant::now();
                    let block = exact_fisher_block(&per_example_gradients(record))?;
                    timings.scaling += t.elapsed().as_secs_f64();
                    let t = Instant::now();
                    let out = precondition_exact(&block, &vec(mean), hyper.damping)?;
                    let s = unvec(&out, mean.nrows(), mean.ncols())?;
                    timings.precondition += t.elapsed().as_secs_f64();
                    s
                }
            };
            net.apply_step(l, &step, hyper.learning_rate)?;
        }

        if refresh && self.kind.uses_kfe() {
            self.refresh_count += 1;
        }
        self.iteration += 1;
        Ok(StepReport {
            iteration: it,
            loss: bw.loss,
            timings,
            total_seconds: start.elapsed().as_secs_f64(),
            refreshed: refresh && self.kind.uses_kfe(),
        })
    }
}

fn blend_running(slot: &mut Option<Vec<f64>>, fresh: Vec<f64>, decay: f64) {
    match slot {
        Some(s) => {
            for (old, new) in s.iter_mut().zip(fresh) {
                *old = (decay * *old + (1.0 - decay) * new).max(0.0);
            }
        }
        None => *slot = Some(fresh),
    }
}
