//! Kronecker factors, the Kronecker-factored eigenbasis (KFE), and the
//! diagonal scalings `s*` measured in it.
//!
//! For a layer with homogeneous inputs `h` and pre-activation gradients `δ`,
//! the per-example gradient is `vec(h δᵀ)`. Its projection into the KFE is
//! `vec(U_Aᵀ h δᵀ U_B) = vec((U_Aᵀ h)(U_Bᵀ δ)ᵀ)`, still an outer product, so the
//! second moments `s*` reduce to one matrix product over the batch.

use nalgebra::DMatrix;

use crate::error::{contract, Error, Result};
use crate::linalg::{sym_eigendecompose_psd, unvec, vec, DenseMatrix};
use crate::net::LayerBatchRecord;

/// Largest parameter block for which the exact Fisher may be materialized.
pub const ORACLE_DIM_LIMIT: usize = 1024;

/// Default decay of running-average scalings.
pub const DEFAULT_RUNNING_DECAY: f64 = 0.75;

/// `A = E[h hᵀ]` over homogeneous inputs and `B = E[δ δᵀ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerFactors {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl KroneckerFactors {
    /// Exponential moving average `self ← decay·self + (1 − decay)·fresh`.
    pub fn blend(&mut self, fresh: &KroneckerFactors, decay: f64) -> Result<()> {
        check_decay(decay)?;
        if self.a.shape() != fresh.a.shape() || self.b.shape() != fresh.b.shape() {
            return Err(contract("cannot blend factors of different shapes"));
        }
        let a = self.a.as_na() * decay + fresh.a.as_na() * (1.0 - decay);
        let b = self.b.as_na() * decay + fresh.b.as_na() * (1.0 - decay);
        self.a = DenseMatrix::try_from_na(a)?;
        self.b = DenseMatrix::try_from_na(b)?;
        Ok(())
    }
}

fn symmetrized(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

pub fn estimate_factors(record: &LayerBatchRecord) -> KroneckerFactors {
    let n = record.batch_size() as f64;
    let h = record.inputs().as_na();
    let d = record.deltas().as_na();
    KroneckerFactors {
        a: DenseMatrix::wrap(symmetrized(h.transpose() * h / n)),
        b: DenseMatrix::wrap(symmetrized(d.transpose() * d / n)),
    }
}

pub(crate) fn check_decay(decay: f64) -> Result<()> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(contract(format!("decay {decay} must lie in (0, 1)")));
    }
    Ok(())
}

/// Eigenbases of both factors plus the scaling vector tracked in that basis.
#[derive(Debug, Clone, PartialEq)]
pub struct KfeState {
    pub u_a: DenseMatrix,
    pub s_a: Vec<f64>,
    pub u_b: DenseMatrix,
    pub s_b: Vec<f64>,
    /// Row-major over `(input eigenvector, output eigenvector)` pairs.
    pub s_star: Option<Vec<f64>>,
    pub last_basis_refresh: usize,
}

/// Eigendecomposes both factors (eigenvalues clamped at zero).
pub fn compute_kfe(factors: &KroneckerFactors) -> Result<KfeState> {
    let a = sym_eigendecompose_psd(&factors.a)?;
    let b = sym_eigendecompose_psd(&factors.b)?;
    Ok(KfeState {
        u_a: a.basis,
        s_a: a.eigenvalues,
        u_b: b.basis,
        s_b: b.eigenvalues,
        s_star: None,
        last_basis_refresh: 0,
    })
}

impl KfeState {
    /// Builds a state from explicit orthogonal bases; factor eigenvalues are set to one.
    pub fn from_bases(u_a: DenseMatrix, u_b: DenseMatrix) -> Result<Self> {
        if !u_a.is_square() || !u_b.is_square() {
            return Err(contract("eigenbases must be square"));
        }
        Ok(Self {
            s_a: vec![1.0; u_a.rows()],
            s_b: vec![1.0; u_b.rows()],
            u_a,
            u_b,
            s_star: None,
            last_basis_refresh: 0,
        })
    }

    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        Self::from_bases(DenseMatrix::identity(input_dim), DenseMatrix::identity(output_dim))
            .expect("identity bases are square")
    }

    pub fn input_dim(&self) -> usize {
        self.u_a.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.u_b.rows()
    }

    pub fn param_count(&self) -> usize {
        self.input_dim() * self.output_dim()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.param_count() {
            return Err(contract(format!(
                "vector of length {len} for a {}x{} block",
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// `U_Aᵀ C U_B` for a gradient in matrix shape.
    pub fn project_matrix(&self, grad: &DMatrix<f64>) -> DMatrix<f64> {
        self.u_a.as_na().tr_mul(grad) * self.u_b.as_na()
    }

    /// `U_A C̃ U_Bᵀ`, inverse of [`Self::project_matrix`].
    pub fn unproject_matrix(&self, tilde: &DMatrix<f64>) -> DMatrix<f64> {
        self.u_a.as_na() * tilde * self.u_b.as_na().transpose()
    }

    /// `(U_A ⊗ U_B)ᵀ · grad`.
    pub fn project(&self, grad: &[f64]) -> Result<Vec<f64>> {
        self.check_len(grad.len())?;
        let c = unvec(grad, self.input_dim(), self.output_dim())?;
        Ok(vec(&self.project_matrix(&c)))
    }

    /// `(U_A ⊗ U_B) · tilde`.
    pub fn unproject(&self, tilde: &[f64]) -> Result<Vec<f64>> {
        self.check_len(tilde.len())?;
        let c = unvec(tilde, self.input_dim(), self.output_dim())?;
        Ok(vec(&self.unproject_matrix(&c)))
    }

    /// Diagonal of `S_A ⊗ S_B`, i.e. the eigenvalues KFAC assigns to each KFE direction.
    pub fn kfac_eigenvalues(&self) -> Vec<f64> {
        self.s_a
            .iter()
            .flat_map(|a| self.s_b.iter().map(move |b| a * b))
            .collect()
    }

    /// `s*_i = mean_n ((U_A ⊗ U_B)ᵀ g_n)_i²` over explicit per-example gradients.
    pub fn intrabatch_s_star(&self, per_example_grads: &[Vec<f64>]) -> Result<Vec<f64>> {
        if per_example_grads.is_empty() {
            return Err(contract("s* needs at least one gradient"));
        }
        let mut acc = vec![0.0; self.param_count()];
        for g in per_example_grads {
            for (s, p) in acc.iter_mut().zip(self.project(g)?) {
                *s += p * p;
            }
        }
        let n = per_example_grads.len() as f64;
        Ok(acc.into_iter().map(|s| (s / n).max(0.0)).collect())
    }

    /// Inputs and deltas rotated into the eigenbases, `(H̃ U_A, Δ U_B)`. Row `n`
    /// of the pair is the rank-one factorization of example `n`'s projected gradient.
    pub fn project_record(&self, record: &LayerBatchRecord) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if record.input_dim() != self.input_dim() || record.output_dim() != self.output_dim() {
            return Err(contract(format!(
                "record of shape {}x{} for a {}x{} eigenbasis",
                record.input_dim(),
                record.output_dim(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok((
            record.inputs().as_na() * self.u_a.as_na(),
            record.deltas().as_na() * self.u_b.as_na(),
        ))
    }

    /// Same quantity as [`Self::intrabatch_s_star`], computed from a layer
    /// record without forming per-example gradients.
    pub fn intrabatch_s_star_from_record(&self, record: &LayerBatchRecord) -> Result<Vec<f64>> {
        let (hp, dp) = self.project_record(record)?;
        Ok(s_star_from_projected(&hp, &dp))
    }

    /// Running average of squared projected minibatch-mean gradients:
    /// `s* ← decay·s* + (1 − decay)·(Qᵀ ḡ)²`; the first call initializes.
    pub fn update_running_s_star(&mut self, mean_grad: &[f64], decay: f64) -> Result<()> {
        check_decay(decay)?;
        let sq: Vec<f64> = self.project(mean_grad)?.into_iter().map(|x| x * x).collect();
        self.blend_s_star(sq, decay);
        Ok(())
    }

    /// Running average of intrabatch second moments (individual-gradient variant).
    pub fn update_running_s_star_individual(
        &mut self,
        record: &LayerBatchRecord,
        decay: f64,
    ) -> Result<()> {
        check_decay(decay)?;
        let fresh = self.intrabatch_s_star_from_record(record)?;
        self.blend_s_star(fresh, decay);
        Ok(())
    }

    pub(crate) fn blend_s_star(&mut self, fresh: Vec<f64>, decay: f64) {
        match &mut self.s_star {
            Some(s) if s.len() == fresh.len() => {
                for (old, new) in s.iter_mut().zip(fresh) {
                    *old = (decay * *old + (1.0 - decay) * new).max(0.0);
                }
            }
            slot => *slot = Some(fresh),
        }
    }
}

/// `mean_n (hp_n ⊗ dp_n)²` from the output of [`KfeState::project_record`].
pub fn s_star_from_projected(hp: &DMatrix<f64>, dp: &DMatrix<f64>) -> Vec<f64> {
    let n = hp.nrows() as f64;
    let s = hp.map(|x| x * x).tr_mul(&dp.map(|x| x * x)) / n;
    vec(&s).into_iter().map(|x| x.max(0.0)).collect()
}

/// Exact empirical Fisher `G = (1/n) Σ g gᵀ` of one layer block.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactFisherBlock {
    pub g: DenseMatrix,
}

impl ExactFisherBlock {
    pub fn dim(&self) -> usize {
        self.g.rows()
    }
}

pub fn exact_fisher_block(per_example_grads: &[Vec<f64>]) -> Result<ExactFisherBlock> {
    exact_fisher_block_limited(per_example_grads, ORACLE_DIM_LIMIT)
}

pub fn exact_fisher_block_limited(
    per_example_grads: &[Vec<f64>],
    limit: usize,
) -> Result<ExactFisherBlock> {
    let m = gradient_matrix(per_example_grads)?;
    if m.nrows() > limit {
        return Err(Error::Resource {
            what: "exact Fisher block",
            requested: m.nrows(),
            limit,
        });
    }
    let n = per_example_grads.len() as f64;
    Ok(ExactFisherBlock {
        g: DenseMatrix::try_from_na(symmetrized(&m * m.transpose() / n))?,
    })
}

/// Stacks gradients as columns of a `p × n` matrix.
pub(crate) fn gradient_matrix(per_example_grads: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let first = per_example_grads
        .first()
        .ok_or_else(|| contract("need at least one gradient"))?;
    let p = first.len();
    if p == 0 || per_example_grads.iter().any(|g| g.len() != p) {
        return Err(contract("gradients must be non-empty and of equal length"));
    }
    let mut m = DMatrix::zeros(p, per_example_grads.len());
    for (k, g) in per_example_grads.iter().enumerate() {
        m.column_mut(k).copy_from_slice(g);
    }
    Ok(m)
}
