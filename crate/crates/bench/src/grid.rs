//! Hyperparameter grids read from `key = value[, value...]` files.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use ekfac_core::precond::PreconditionerKind;

use crate::config::{parse_arch, parse_loss, LrSchedule, TrainConfig};
use crate::error::BenchError;
use crate::train::{run_training, RunStatus};

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub base: TrainConfig,
    pub optimizers: Vec<PreconditionerKind>,
    pub lrs: Vec<f64>,
    pub dampings: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub freqs: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Extra `(lr, damping)` pairs drawn log-uniformly inside the grid's range.
    pub random: usize,
    pub random_seed: u64,
    /// Per-cell metrics streams go here when set.
    pub out_dir: Option<PathBuf>,
    pub single_thread: bool,
}

impl GridSpec {
    pub fn from_base(base: TrainConfig) -> Self {
        Self {
            optimizers: vec![base.optimizer],
            lrs: vec![base.hyper.learning_rate],
            dampings: vec![base.hyper.damping],
            batch_sizes: vec![base.batch_size],
            freqs: vec![base.hyper.refresh_every],
            seeds: vec![base.seed],
            random: 0,
            random_seed: 0,
            out_dir: None,
            single_thread: false,
            base,
        }
    }

    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let mut g = GridSpec::from_base(TrainConfig::default());
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| BenchError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let list = || value.split(',').map(str::trim).filter(|v| !v.is_empty());
            let err = |what: &str| BenchError::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
            macro_rules! parse_list {
                ($what:expr) => {
                    list().map(|v| v.parse().map_err(|_| err($what))).collect::<Result<Vec<_>, _>>()?
                };
            }
            match key {
                "optimizer" => g.optimizers = list().map(str::parse).collect::<Result<_, _>>()?,
                "lr" => g.lrs = parse_list!("learning rate"),
                "damping" => g.dampings = parse_list!("damping"),
                "batch_size" => g.batch_sizes = parse_list!("batch size"),
                "freq" => g.freqs = parse_list!("refresh frequency"),
                "seed" => g.seeds = parse_list!("seed"),
                "epochs" => g.base.epochs = value.parse().map_err(|_| err("epoch count"))?,
                "dataset" => g.base.dataset = value.parse()?,
                "arch" => g.base.arch = parse_arch(value)?,
                "loss" => g.base.loss = parse_loss(value)?,
                "lr_decay" => g.base.lr_schedule = LrSchedule::parse_step_decay(value)?,
                "validation" => g.base.validation = value.parse().map_err(|_| err("flag"))?,
                "random" => g.random = value.parse().map_err(|_| err("count"))?,
                "random_seed" => g.random_seed = value.parse().map_err(|_| err("seed"))?,
                "out_dir" => g.out_dir = Some(PathBuf::from(value)),
                "single_thread" => g.single_thread = value.parse().map_err(|_| err("flag"))?,
                _ => return Err(BenchError::Config(format!("line {}: unknown key '{key}'", lineno + 1))),
            }
        }
        for (name, empty) in [
            ("optimizer", g.optimizers.is_empty()),
            ("lr", g.lrs.is_empty()),
            ("damping", g.dampings.is_empty()),
            ("batch_size", g.batch_sizes.is_empty()),
            ("freq", g.freqs.is_empty()),
            ("seed", g.seeds.is_empty()),
        ] {
            if empty {
                return Err(BenchError::Config(format!("'{name}' lists no values")));
            }
        }
        Ok(g)
    }

    /// `(lr, damping)` pairs: the full product followed by the random draws.
    fn lr_damping_pairs(&self) -> Vec<(f64, f64)> {
        let mut pairs: Vec<(f64, f64)> =
            self.lrs.iter().flat_map(|&l| self.dampings.iter().map(move |&d| (l, d))).collect();
        if self.random > 0 {
            let range = |v: &[f64]| {
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min).ln();
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max).ln();
                (lo, hi)
            };
            let (l0, l1) = range(&self.lrs);
            let (d0, d1) = range(&self.dampings);
            let mut rng = ChaCha8Rng::seed_from_u64(self.random_seed);
            for _ in 0..self.random {
                let l = if l1 > l0 { rng.random_range(l0..l1) } else { l0 };
                let d = if d1 > d0 { rng.random_range(d0..d1) } else { d0 };
                pairs.push((l.exp(), d.exp()));
            }
        }
        pairs
    }

    pub fn cells(&self) -> Vec<TrainConfig> {
        let mut cells = Vec::new();
        for &opt in &self.optimizers {
            for &(lr, damping) in &self.lr_damping_pairs() {
                for &batch in &self.batch_sizes {
                    for &freq in &self.freqs {
                        for &seed in &self.seeds {
                            let mut c = self.base.clone();
                            c.optimizer = opt;
                            c.hyper.learning_rate = lr;
                            c.hyper.damping = damping;
                            c.hyper.refresh_every = freq;
                            c.batch_size = batch;
                            c.seed = seed;
                            c.metrics_out = self
                                .out_dir
                                .as_ref()
                                .map(|d| d.join(format!("cell_{:04}.jsonl", cells.len())));
                            cells.push(c);
                        }
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub index: usize,
    pub optimizer: PreconditionerKind,
    pub lr: f64,
    pub damping: f64,
    pub batch_size: usize,
    pub freq: usize,
    pub seed: u64,
    pub status: String,
    /// Full training loss at epochs `0..=epochs`; missing epochs of diverged runs are absent.
    pub epoch_losses: Vec<f64>,
    pub stream: Option<PathBuf>,
}

impl CellResult {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.epoch_losses.iter().copied().reduce(f64::min)
    }
}

fn run_cell(index: usize, config: &TrainConfig) -> CellResult {
    let (status, epoch_losses) = match run_training(config) {
        Ok(out) => {
            let status = match &out.status {
                RunStatus::Completed => "completed".to_string(),
                RunStatus::Diverged { .. } => "diverged".to_string(),
            };
            (status, out.epoch_losses())
        }
        // A failing cell counts as diverged; the rest of the grid goes on.
        Err(e) => (format!("diverged: {e}"), Vec::new()),
    };
    CellResult {
        index,
        optimizer: config.optimizer,
        lr: config.hyper.learning_rate,
        damping: config.hyper.damping,
        batch_size: config.batch_size,
        freq: config.hyper.refresh_every,
        seed: config.seed,
        status,
        epoch_losses,
        stream: config.metrics_out.clone(),
    }
}

pub fn run_grid(spec: &GridSpec) -> Vec<CellResult> {
    let cells = spec.cells();
    if spec.single_thread {
        cells.iter().enumerate().map(|(i, c)| run_cell(i, c)).collect()
    } else {
        cells.par_iter().enumerate().map(|(i, c)| run_cell(i, c)).collect()
    }
}

/// Lowest training loss at each epoch across all cells sharing an optimizer
/// and seed. Epochs a cell never reached count as `+∞`.
pub fn per_epoch_best(results: &[CellResult]) -> BTreeMap<(String, u64), Vec<f64>> {
    let epochs = results.iter().map(|r| r.epoch_losses.len()).max().unwrap_or(0);
    let mut best: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for r in results {
        let row = best
            .entry((r.optimizer.tag().to_string(), r.seed))
            .or_insert_with(|| vec![f64::INFINITY; epochs]);
        for (e, &l) in r.epoch_losses.iter().enumerate() {
            if l < row[e] {
                row[e] = l;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetSpec, SyntheticSpec};
    use crate::train::run_training;

    const SMALL: &str = "
        # tiny grid
        optimizer = ekfac
        lr = 0.1, 0.01
        damping = 0.1, 0.01
        batch_size = 20
        freq = 5
        seed = 1
        epochs = 2
        dataset = synthetic:n=60,dim=8,latent=2,seed=3
        arch = 8,4,8
        single_thread = true
    ";

    #[test]
    fn parses_lists_and_scalars() {
        let g = GridSpec::parse(SMALL).unwrap();
        assert_eq!(g.lrs, vec![0.1, 0.01]);
        assert_eq!(g.base.arch, vec![8, 4, 8]);
        assert_eq!(g.base.dataset, DatasetSpec::Synthetic(SyntheticSpec { n: 60, dim: 8, latent_dim: 2, seed: 3 }));
        assert_eq!(g.cells().len(), 4);
        assert!(GridSpec::parse("bogus = 1").is_err());
        assert!(GridSpec::parse("lr = abc").is_err());
        assert!(GridSpec::parse("optimizer = newton").is_err());
    }

    #[test]
    fn two_by_two_grid_has_four_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = GridSpec::parse(SMALL).unwrap();
        g.out_dir = Some(dir.path().to_owned());
        let res = run_grid(&g);
        assert_eq!(res.len(), 4);
        for r in &res {
            assert!(r.stream.as_ref().unwrap().exists());
        }
    }

    #[test]
    fn one_cell_grid_matches_run_training() {
        let mut g = GridSpec::parse(SMALL).unwrap();
        g.lrs = vec![0.1];
        g.dampings = vec![0.01];
        let res = run_grid(&g);
        let cfg = &g.cells()[0];
        let direct = run_training(cfg).unwrap();
        assert_eq!(res[0].epoch_losses, direct.epoch_losses());
    }

    #[test]
    fn random_search_adds_cells_inside_range() {
        let mut g = GridSpec::parse(SMALL).unwrap();
        g.random = 5;
        let cells = g.cells();
        assert_eq!(cells.len(), 9);
        for c in &cells[4..] {
            assert!((0.01..=0.1).contains(&c.hyper.learning_rate));
            assert!((0.01..=0.1).contains(&c.hyper.damping));
        }
    }

    #[test]
    fn failed_cell_is_recorded_as_diverged() {
        let mut g = GridSpec::parse(SMALL).unwrap();
        g.base.arch = vec![9, 4, 9];
        let res = run_grid(&g);
        assert!(res.iter().all(|r| r.status.starts_with("diverged")));
    }

    fn cell(opt: PreconditionerKind, seed: u64, losses: &[f64]) -> CellResult {
        CellResult {
            index: 0,
            optimizer: opt,
            lr: 0.1,
            damping: 0.1,
            batch_size: 1,
            freq: 1,
            seed,
            status: "completed".into(),
            epoch_losses: losses.to_vec(),
            stream: None,
        }
    }

    #[test]
    fn per_epoch_best_picks_hand_computed_winners() {
        use PreconditionerKind::*;
        let res = vec![
            cell(Ekfac, 0, &[5.0, 3.0, 2.0]),
            cell(Ekfac, 0, &[5.0, 4.0, 1.0]),
            cell(Ekfac, 0, &[5.0, 2.5]),
            cell(Kfac, 0, &[5.0, 3.5, 1.5]),
            cell(Kfac, 1, &[6.0]),
        ];
        let best = per_epoch_best(&res);
        assert_eq!(best[&("ekfac".to_string(), 0)], vec![5.0, 2.5, 1.0]);
        assert_eq!(best[&("kfac".to_string(), 0)], vec![5.0, 3.5, 1.5]);
        assert_eq!(best[&("kfac".to_string(), 1)], vec![6.0, f64::INFINITY, f64::INFINITY]);
    }
}
