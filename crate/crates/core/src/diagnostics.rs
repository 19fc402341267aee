//! Measurements comparing curvature approximations against the exact
//! empirical Fisher of a layer block.

use nalgebra::DMatrix;

use crate::curvature::{
    check_decay, compute_kfe, estimate_factors, gradient_matrix, KfeState, KroneckerFactors,
    ORACLE_DIM_LIMIT,
};
use crate::error::{contract, Error, Result};
use crate::linalg::{kronecker_product, sym_eigendecompose_psd, DenseMatrix};
use crate::net::LayerBatchRecord;

/// Largest coordinate subset accepted by [`correlation_report`].
pub const MAX_CORRELATION_SUBSET: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrobeniusErrors {
    /// `‖G − A ⊗ B‖_F`
    pub err_kfac: f64,
    /// `‖G − Q diag(s*) Qᵀ‖_F`
    pub err_ekfac: f64,
}

/// Both errors are measured after rotating into the KFE, where the EKFAC
/// approximation is diagonal and the KFAC one is `Ã ⊗ B̃` with `Ã = U_Aᵀ A U_A`.
/// The Frobenius norm is unchanged by the rotation. Uses `kfe.s_star` when
/// present and the intrabatch estimate over `per_example_grads` otherwise.
pub fn frobenius_errors(
    per_example_grads: &[Vec<f64>],
    factors: &KroneckerFactors,
    kfe: &KfeState,
) -> Result<FrobeniusErrors> {
    let p = kfe.param_count();
    if p > ORACLE_DIM_LIMIT {
        return Err(Error::Resource {
            what: "exact Fisher block",
            requested: p,
            limit: ORACLE_DIM_LIMIT,
        });
    }
    if factors.a.rows() != kfe.input_dim() || factors.b.rows() != kfe.output_dim() {
        return Err(contract("factors do not match the eigenbasis dimensions"));
    }
    let m = gradient_matrix(per_example_grads)?;
    if m.nrows() != p {
        return Err(contract(format!("gradients of length {} for a block of {p}", m.nrows())));
    }
    let mut projected = DMatrix::zeros(p, m.ncols());
    for (n, g) in per_example_grads.iter().enumerate() {
        projected.set_column(n, &nalgebra::DVector::from_vec(kfe.project(g)?));
    }
    let g_tilde = &projected * projected.transpose() / per_example_grads.len() as f64;

    let a_tilde = kfe.u_a.as_na().tr_mul(factors.a.as_na()) * kfe.u_a.as_na();
    let b_tilde = kfe.u_b.as_na().tr_mul(factors.b.as_na()) * kfe.u_b.as_na();
    let kfac = kronecker_product(
        &DenseMatrix::try_from_na(a_tilde)?,
        &DenseMatrix::try_from_na(b_tilde)?,
    )?;
    let err_kfac = (&g_tilde - kfac.as_na()).norm();

    let s_star = match &kfe.s_star {
        Some(s) => s.clone(),
        None => kfe.intrabatch_s_star(per_example_grads)?,
    };
    let mut residual = g_tilde;
    for (i, s) in s_star.iter().enumerate() {
        residual[(i, i)] -= s;
    }
    Ok(FrobeniusErrors {
        err_kfac,
        err_ekfac: residual.norm(),
    })
}

fn sorted_descending(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Eigenvalues of `G = (1/n) M Mᵀ`, sorted descending, length `p`.
///
/// When `n < p` the nonzero eigenvalues come from the `n × n` Gram matrix
/// `Mᵀ M / n` and the rest are zero, so blocks beyond the materialization
/// limit stay tractable.
pub fn exact_fisher_spectrum(per_example_grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = gradient_matrix(per_example_grads)?;
    let n = m.ncols() as f64;
    let small = if m.ncols() < m.nrows() {
        m.tr_mul(&m) / n
    } else {
        &m * m.transpose() / n
    };
    padded_spectrum(small, m.nrows())
}

/// [`exact_fisher_spectrum`] for the gradients `vec(h_n δ_nᵀ)` of a layer record,
/// using `⟨vec(h δᵀ), vec(h' δ'ᵀ)⟩ = (h·h')(δ·δ')`.
pub fn exact_fisher_spectrum_from_record(record: &LayerBatchRecord) -> Result<Vec<f64>> {
    let p = record.param_count();
    let n = record.batch_size();
    if n >= p {
        return exact_fisher_spectrum(&crate::net::per_example_gradients(record));
    }
    let h = record.inputs().as_na();
    let d = record.deltas().as_na();
    let gram = (h * h.transpose()).component_mul(&(d * d.transpose())) / n as f64;
    padded_spectrum(gram, p)
}

fn padded_spectrum(m: DMatrix<f64>, len: usize) -> Result<Vec<f64>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = sym_eigendecompose_psd(&DenseMatrix::try_from_na(sym)?)?.eigenvalues;
    eig.resize(len, 0.0);
    Ok(sorted_descending(eig))
}

/// Eigenvalues `(S_A)_j (S_B)_k` of `A ⊗ B`, sorted descending.
pub fn kfac_spectrum(kfe: &KfeState) -> Vec<f64> {
    sorted_descending(kfe.kfac_eigenvalues())
}

/// ℓ2 distance between two spectra after sorting each descending.
pub fn spectrum_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract(format!("spectra of lengths {} and {}", a.len(), b.len())));
    }
    let a = sorted_descending(a.to_vec());
    let b = sorted_descending(b.to_vec());
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// One checkpoint of spectrum tracking.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumTrace {
    pub iteration: usize,
    pub exact: Vec<f64>,
    pub kfac: Vec<f64>,
    pub ekfac_intrabatch: Vec<f64>,
    pub ekfac_ra: Vec<f64>,
    pub dist_kfac: f64,
    pub dist_ekfac_intrabatch: f64,
    pub dist_ekfac_ra: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumTrackerConfig {
    /// Emit a trace every this many iterations.
    pub stride: usize,
    /// Re-estimate the KFAC factors from the training batch every this many
    /// iterations and take their diagonals in the fixed basis. `None` keeps
    /// the eigenvalues computed together with the basis.
    pub kfac_refresh_every: Option<usize>,
    /// Decay of the running-average scalings.
    pub running_decay: f64,
}

impl Default for SpectrumTrackerConfig {
    fn default() -> Self {
        Self {
            stride: 50,
            kfac_refresh_every: None,
            running_decay: crate::curvature::DEFAULT_RUNNING_DECAY,
        }
    }
}

/// `diag(Uᵀ M U)`.
fn diagonal_in_basis(m: &DenseMatrix, u: &DenseMatrix) -> Vec<f64> {
    let mu = m.as_na() * u.as_na();
    mu.component_mul(u.as_na()).row_sum().iter().map(|x| x.max(0.0)).collect()
}

/// Follows one layer during training with its KFE frozen at the first batch.
///
/// KFAC eigenvalues stay those of the initial factors unless a refresh
/// interval is set, the running-average
/// scalings are updated from every observed batch (individual-gradient second
/// moments in the frozen basis) and the intrabatch scalings are measured on
/// the checkpoint batch itself.
#[derive(Debug, Clone)]
pub struct SpectrumTracker {
    config: SpectrumTrackerConfig,
    basis: KfeState,
    kfac_eigenvalues: Vec<f64>,
    running: Option<Vec<f64>>,
}

impl SpectrumTracker {
    pub fn new(initial: &LayerBatchRecord, config: SpectrumTrackerConfig) -> Result<Self> {
        if config.stride == 0 || config.kfac_refresh_every == Some(0) {
            return Err(contract("stride and refresh interval must be at least 1"));
        }
        check_decay(config.running_decay)?;
        let basis = compute_kfe(&estimate_factors(initial))?;
        let kfac_eigenvalues = basis.kfac_eigenvalues();
        Ok(Self {
            config,
            basis,
            kfac_eigenvalues,
            running: None,
        })
    }

    pub fn basis(&self) -> &KfeState {
        &self.basis
    }

    pub fn is_checkpoint(&self, iteration: usize) -> bool {
        iteration.is_multiple_of(self.config.stride)
    }

    /// Feeds the training batch of `iteration`.
    pub fn observe(&mut self, iteration: usize, record: &LayerBatchRecord) -> Result<()> {
        if let Some(every) = self.config.kfac_refresh_every {
            if iteration > 0 && iteration.is_multiple_of(every) {
                let f = estimate_factors(record);
                let a = diagonal_in_basis(&f.a, &self.basis.u_a);
                let b = diagonal_in_basis(&f.b, &self.basis.u_b);
                self.kfac_eigenvalues = a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect();
            }
        }
        let fresh = self.basis.intrabatch_s_star_from_record(record)?;
        let decay = self.config.running_decay;
        match &mut self.running {
            Some(s) => {
                for (old, new) in s.iter_mut().zip(fresh) {
                    *old = decay * *old + (1.0 - decay) * new;
                }
            }
            None => self.running = Some(fresh),
        }
        Ok(())
    }

    /// Compares all approximations against the exact Fisher of `trace_batch`.
    pub fn checkpoint(&self, iteration: usize, trace_batch: &LayerBatchRecord) -> Result<SpectrumTrace> {
        let running = self
            .running
            .as_ref()
            .ok_or_else(|| Error::State("no batch observed before the first checkpoint".into()))?;
        let exact = exact_fisher_spectrum_from_record(trace_batch)?;
        let kfac = sorted_descending(self.kfac_eigenvalues.clone());
        let ekfac_intrabatch = sorted_descending(self.basis.intrabatch_s_star_from_record(trace_batch)?);
        let ekfac_ra = sorted_descending(running.clone());
        Ok(SpectrumTrace {
            iteration,
            dist_kfac: spectrum_distance(&exact, &kfac)?,
            dist_ekfac_intrabatch: spectrum_distance(&exact, &ekfac_intrabatch)?,
            dist_ekfac_ra: spectrum_distance(&exact, &ekfac_ra)?,
            exact,
            kfac,
            ekfac_intrabatch,
            ekfac_ra,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub subset: Vec<usize>,
    pub parameter: DenseMatrix,
    pub kfe: DenseMatrix,
    pub parameter_offdiag_mean: f64,
    pub kfe_offdiag_mean: f64,
}

/// Pearson correlation between columns of an `n × k` sample matrix.
/// Coordinates without variance get a unit diagonal and zero elsewhere.
pub fn correlation_matrix(samples: &DMatrix<f64>) -> Result<DenseMatrix> {
    let n = samples.nrows();
    if n < 2 {
        return Err(contract("correlation needs at least two samples"));
    }
    let k = samples.ncols();
    let mut centered = samples.clone();
    let mut live = vec![false; k];
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        let mean = col.mean();
        let mean_sq = col.iter().map(|x| x * x).sum::<f64>() / n as f64;
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / n as f64;
        // Repeated values leave only rounding noise after centering.
        live[j] = var > 1e-24 * mean_sq && var > 0.0;
        if live[j] {
            col /= var.sqrt() * (n as f64).sqrt();
        } else {
            col.fill(0.0);
        }
    }
    let mut corr = centered.tr_mul(&centered);
    for i in 0..k {
        for j in 0..k {
            corr[(i, j)] = if i == j {
                1.0
            } else if live[i] && live[j] {
                corr[(i, j)].clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
    }
    let corr = (&corr + corr.transpose()) * 0.5;
    DenseMatrix::try_from_na(corr)
}

/// Mean absolute off-diagonal entry; zero for a 1×1 matrix.
pub fn offdiag_mean_abs(m: &DenseMatrix) -> f64 {
    let k = m.rows();
    if k < 2 {
        return 0.0;
    }
    let total: f64 = m.iter().map(|x| x.abs()).sum::<f64>() - (0..k).map(|i| m[(i, i)].abs()).sum::<f64>();
    total / (k * (k - 1)) as f64
}

/// Correlations of gradient coordinates `subset`, in the parameter basis and in the KFE.
pub fn correlation_report(
    per_example_grads: &[Vec<f64>],
    kfe: &KfeState,
    subset: &[usize],
) -> Result<CorrelationReport> {
    if per_example_grads.len() < 2 {
        return Err(contract("correlation needs at least two examples"));
    }
    if subset.is_empty() || subset.len() > MAX_CORRELATION_SUBSET {
        return Err(contract(format!(
            "subset size {} outside 1..={MAX_CORRELATION_SUBSET}",
            subset.len()
        )));
    }
    let p = kfe.param_count();
    if let Some(&bad) = subset.iter().find(|&&i| i >= p) {
        return Err(contract(format!("coordinate {bad} out of range for {p} parameters")));
    }
    let n = per_example_grads.len();
    let mut raw = DMatrix::zeros(n, subset.len());
    let mut rotated = DMatrix::zeros(n, subset.len());
    for (r, g) in per_example_grads.iter().enumerate() {
        if g.len() != p {
            return Err(contract(format!("gradient of length {} for a block of {p}", g.len())));
        }
        let t = kfe.project(g)?;
        for (c, &i) in subset.iter().enumerate() {
            raw[(r, c)] = g[i];
            rotated[(r, c)] = t[i];
        }
    }
    let parameter = correlation_matrix(&raw)?;
    let kfe_corr = correlation_matrix(&rotated)?;
    Ok(CorrelationReport {
        subset: subset.to_vec(),
        parameter_offdiag_mean: offdiag_mean_abs(&parameter),
        kfe_offdiag_mean: offdiag_mean_abs(&kfe_corr),
        parameter,
        kfe: kfe_corr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::exact_fisher_block;
    use crate::net::per_example_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_record(rng: &mut impl Rng, n: usize, d_in: usize, d_out: usize) -> LayerBatchRecord {
        let h = DMatrix::from_fn(n, d_in + 1, |_, j| if j == d_in { 1.0 } else { rng.random_range(-1.0..1.0) });
        let d = DMatrix::from_fn(n, d_out, |_, _| rng.random_range(-1.0..1.0));
        LayerBatchRecord::new(DenseMatrix::try_from_na(h).unwrap(), DenseMatrix::try_from_na(d).unwrap()).unwrap()
    }

    #[test]
    fn ekfac_error_matches_materialized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rec = random_record(&mut rng, 32, 5, 4);
        let grads = per_example_gradients(&rec);
        let factors = estimate_factors(&rec);
        let kfe = compute_kfe(&factors).unwrap();
        let errs = frobenius_errors(&grads, &factors, &kfe).unwrap();
        assert!(errs.err_ekfac <= errs.err_kfac + 1e-10);

        let g = exact_fisher_block(&grads).unwrap().g.into_na();
        let q = kronecker_product(&kfe.u_a, &kfe.u_b).unwrap().into_na();
        let s = kfe.intrabatch_s_star(&grads).unwrap();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s));
        let ekfac = &q * d * q.transpose();
        assert!((errs.err_ekfac - (&g - ekfac).norm()).abs() < 1e-10);
        let kfac = kronecker_product(&factors.a, &factors.b).unwrap().into_na();
        assert!((errs.err_kfac - (&g - kfac).norm()).abs() < 1e-10);
    }

    #[test]
    fn separable_gradients_make_both_errors_equal() {
        // Every h is the same vector, so G = h hᵀ ⊗ E[δδᵀ] exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h0: Vec<f64> = vec![0.5, -1.0, 2.0, 1.0];
        let h = DMatrix::from_fn(20, 4, |_, j| h0[j]);
        let d = DMatrix::from_fn(20, 3, |_, _| rng.random_range(-1.0..1.0));
        let rec = LayerBatchRecord::new(DenseMatrix::try_from_na(h).unwrap(), DenseMatrix::try_from_na(d).unwrap())
            .unwrap();
        let grads = per_example_gradients(&rec);
        let factors = estimate_factors(&rec);
        let kfe = compute_kfe(&factors).unwrap();
        let errs = frobenius_errors(&grads, &factors, &kfe).unwrap();
        assert!(errs.err_kfac < 1e-10, "{errs:?}");
        assert!((errs.err_kfac - errs.err_ekfac).abs() < 1e-10);
    }

    #[test]
    fn single_sample_still_satisfies_dominance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rec = random_record(&mut rng, 1, 3, 2);
        let grads = per_example_gradients(&rec);
        let factors = estimate_factors(&rec);
        let kfe = compute_kfe(&factors).unwrap();
        let errs = frobenius_errors(&grads, &factors, &kfe).unwrap();
        assert!(errs.err_ekfac <= errs.err_kfac + 1e-10);
        assert!(errs.err_ekfac >= 0.0);
    }

    #[test]
    fn frobenius_rejects_oversized_blocks() {
        let kfe = KfeState::identity(33, 32);
        let factors = KroneckerFactors { a: DenseMatrix::identity(33), b: DenseMatrix::identity(32) };
        let grads = vec![vec![0.0; 33 * 32]];
        assert!(matches!(frobenius_errors(&grads, &factors, &kfe), Err(Error::Resource { .. })));
    }

    #[test]
    fn gram_spectrum_matches_direct_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rec = random_record(&mut rng, 7, 4, 3);
        let grads = per_example_gradients(&rec);
        let direct = sym_eigendecompose_psd(&exact_fisher_block(&grads).unwrap().g).unwrap().eigenvalues;
        let gram = exact_fisher_spectrum(&grads).unwrap();
        let from_record = exact_fisher_spectrum_from_record(&rec).unwrap();
        assert_eq!(gram.len(), 15);
        for i in 0..15 {
            assert!((direct[i].max(0.0) - gram[i]).abs() < 1e-10);
            assert!((gram[i] - from_record[i]).abs() < 1e-10);
        }
        assert!(gram[7..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn spectrum_distance_ignores_order() {
        let a = [3.0, 1.0, 2.0];
        let b = [1.0, 2.0, 3.0];
        assert_eq!(spectrum_distance(&a, &b).unwrap(), 0.0);
        assert!((spectrum_distance(&[1.0, 0.0], &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(spectrum_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn reconstructed_g_has_zero_spectrum_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rec = random_record(&mut rng, 30, 3, 3);
        let grads = per_example_gradients(&rec);
        let g = exact_fisher_block(&grads).unwrap().g;
        let eig = sym_eigendecompose_psd(&g).unwrap();
        let rebuilt = sym_eigendecompose_psd(&eig.reconstruct()).unwrap().eigenvalues;
        assert!(spectrum_distance(&exact_fisher_spectrum(&grads).unwrap(), &rebuilt).unwrap() < 1e-10);
    }

    fn backprop_record(seed: u64) -> LayerBatchRecord {
        use crate::net::{mlp_specs, Activation, Loss, Network};
        let net = Network::initialized(&mlp_specs(&[8, 6, 4, 8], Activation::Sigmoid).unwrap(), Loss::Mse, seed)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let x = DenseMatrix::try_from_na(DMatrix::from_fn(128, 8, |_, _| rng.random_range(0.0..1.0))).unwrap();
        let bw = net.backward(&net.forward(&x).unwrap(), &x).unwrap();
        bw.records[1].clone()
    }

    #[test]
    fn tracker_at_start_favours_ekfac() {
        for seed in 0..5 {
            let rec = backprop_record(seed);
            let mut tracker = SpectrumTracker::new(&rec, SpectrumTrackerConfig::default()).unwrap();
            tracker.observe(0, &rec).unwrap();
            let trace = tracker.checkpoint(0, &rec).unwrap();
            assert!(trace.dist_ekfac_intrabatch <= trace.dist_kfac, "seed {seed}: {trace:?}");
            assert_eq!(trace.dist_ekfac_intrabatch, trace.dist_ekfac_ra);
            for v in [&trace.exact, &trace.kfac, &trace.ekfac_intrabatch, &trace.ekfac_ra] {
                assert_eq!(v.len(), 28);
                assert!(v.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn tracker_kfac_spectrum_frozen_or_refreshed_in_fixed_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let init = random_record(&mut rng, 50, 4, 3);
        let later = random_record(&mut rng, 50, 4, 3);
        let initial = sorted_descending(compute_kfe(&estimate_factors(&init)).unwrap().kfac_eigenvalues());

        let mut frozen = SpectrumTracker::new(&init, SpectrumTrackerConfig { stride: 1, ..Default::default() }).unwrap();
        frozen.observe(5, &later).unwrap();
        assert_eq!(frozen.checkpoint(5, &later).unwrap().kfac, initial);

        let config = SpectrumTrackerConfig { stride: 1, kfac_refresh_every: Some(5), ..Default::default() };
        let mut refreshed = SpectrumTracker::new(&init, config).unwrap();
        // Factors of the basis batch are diagonal in their own eigenbasis.
        refreshed.observe(5, &init).unwrap();
        let same = refreshed.checkpoint(5, &init).unwrap().kfac;
        for (a, b) in same.iter().zip(&initial) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b));
        }
        refreshed.observe(10, &later).unwrap();
        let f = estimate_factors(&later);
        let b = refreshed.basis();
        let oracle: Vec<f64> = (0..b.u_a.rows())
            .flat_map(|i| {
                let ua = b.u_a.as_na().column(i).into_owned();
                let qa = (ua.transpose() * f.a.as_na() * &ua)[(0, 0)];
                (0..b.u_b.rows()).map(move |j| (qa, j))
            })
            .map(|(qa, j)| {
                let ub = b.u_b.as_na().column(j).into_owned();
                qa * (ub.transpose() * f.b.as_na() * &ub)[(0, 0)]
            })
            .collect();
        let got = refreshed.checkpoint(10, &later).unwrap().kfac;
        for (a, b) in got.iter().zip(&sorted_descending(oracle)) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
        assert!(SpectrumTracker::new(&init, SpectrumTrackerConfig { kfac_refresh_every: Some(0), ..Default::default() }).is_err());
    }

    #[test]
    fn tracker_needs_an_observation_before_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rec = random_record(&mut rng, 8, 2, 2);
        let tracker = SpectrumTracker::new(&rec, SpectrumTrackerConfig::default()).unwrap();
        assert!(matches!(tracker.checkpoint(0, &rec), Err(Error::State(_))));
    }

    #[test]
    fn tracker_distances_settle_on_stationary_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let init = random_record(&mut rng, 200, 4, 3);
        let probe = random_record(&mut rng, 4000, 4, 3);
        let config = SpectrumTrackerConfig { stride: 20, kfac_refresh_every: Some(20), running_decay: 0.98 };
        let mut tracker = SpectrumTracker::new(&init, config).unwrap();
        let mut dists = Vec::new();
        for it in 0..600 {
            let batch = random_record(&mut rng, 200, 4, 3);
            tracker.observe(it, &batch).unwrap();
            if tracker.is_checkpoint(it) && it >= 300 {
                dists.push(tracker.checkpoint(it, &probe).unwrap().dist_ekfac_ra);
            }
        }
        let mean = dists.iter().sum::<f64>() / dists.len() as f64;
        let spread = dists.iter().map(|d| (d - mean).abs()).fold(0.0, f64::max);
        assert!(spread < 0.25 * mean.max(1e-3), "{dists:?}");
    }

    #[test]
    fn correlation_of_repeated_gradient_is_identity() {
        let g = vec![0.3, -1.0, 2.5, 0.0];
        let grads = vec![g.clone(); 5];
        let kfe = KfeState::identity(2, 2);
        let r = correlation_report(&grads, &kfe, &[0, 1, 2, 3]).unwrap();
        assert_eq!(r.parameter.as_na(), &DMatrix::<f64>::identity(4, 4));
        assert_eq!(r.parameter_offdiag_mean, 0.0);
    }

    #[test]
    fn correlation_of_independent_coordinates_is_near_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400;
        let grads: Vec<Vec<f64>> = (0..n).map(|_| (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let kfe = KfeState::identity(4, 3);
        let subset: Vec<usize> = (0..12).collect();
        let r = correlation_report(&grads, &kfe, &subset).unwrap();
        assert!(r.parameter_offdiag_mean < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn identity_basis_gives_identical_reports() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rec = random_record(&mut rng, 40, 3, 3);
        let grads = per_example_gradients(&rec);
        let r = correlation_report(&grads, &KfeState::identity(4, 3), &[0, 2, 5, 7, 11]).unwrap();
        assert_eq!(r.parameter, r.kfe);
    }

    #[test]
    fn correlation_invariants_and_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rec = random_record(&mut rng, 25, 4, 3);
        let grads = per_example_gradients(&rec);
        let kfe = compute_kfe(&estimate_factors(&rec)).unwrap();
        let r = correlation_report(&grads, &kfe, &(0..15).collect::<Vec<_>>()).unwrap();
        for m in [&r.parameter, &r.kfe] {
            for i in 0..15 {
                assert!((m[(i, i)] - 1.0).abs() < 1e-10);
                for j in 0..15 {
                    assert_eq!(m[(i, j)], m[(j, i)]);
                    assert!(m[(i, j)].abs() <= 1.0 + 1e-10);
                }
            }
        }
        assert!(correlation_report(&grads[..1], &kfe, &[0]).is_err());
        assert!(correlation_report(&grads, &kfe, &[15]).is_err());
        assert!(correlation_report(&grads, &kfe, &[]).is_err());
    }
}
