//! Datasets: MNIST in IDX format and a seeded synthetic generator.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ekfac_core::linalg::DenseMatrix;
use ekfac_core::net::sigmoid;

use crate::error::{io_err, BenchError, FormatError};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
/// Fallback directory for `mnist` datasets given without a path.
pub const DATA_DIR_ENV: &str = "EKFAC_DATA_DIR";

/// Examples stored one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: DMatrix<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.examples.ncols()
    }

    /// Rows at `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> DenseMatrix {
        let m = DMatrix::from_fn(indices.len(), self.dim(), |r, c| self.examples[(indices[r], c)]);
        DenseMatrix::try_from_na(m).expect("dataset rows are finite")
    }

    pub fn all(&self) -> DenseMatrix {
        DenseMatrix::try_from_na(self.examples.clone()).expect("dataset rows are finite")
    }

    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset { examples: self.examples.rows(0, n).into_owned() }
    }

    /// Splits off the trailing `holdout` rows.
    pub fn split_tail(&self, holdout: usize) -> (Dataset, Dataset) {
        let keep = self.len() - holdout.min(self.len());
        (
            Dataset { examples: self.examples.rows(0, keep).into_owned() },
            Dataset { examples: self.examples.rows(keep, self.len() - keep).into_owned() },
        )
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        let end = self.pos + 4;
        let b = self.bytes.get(self.pos..end).ok_or_else(|| {
            FormatError::new(self.pos, format!("truncated while reading {what}"))
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<(), FormatError> {
        let at = self.pos;
        let got = self.u32("magic number")?;
        if got != expected {
            return Err(FormatError::new(
                at,
                format!("bad magic 0x{got:08x}, expected 0x{expected:08x}"),
            ));
        }
        Ok(())
    }

    fn payload(&self, len: usize) -> Result<&'a [u8], FormatError> {
        let rest = &self.bytes[self.pos..];
        if rest.len() != len {
            return Err(FormatError::new(
                self.pos + rest.len().min(len),
                format!("header promises {len} payload bytes, found {}", rest.len()),
            ));
        }
        Ok(rest)
    }
}

/// Parses an IDX3 image file; pixels are scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let dim = rows * cols;
    let pixels = r.payload(count * dim)?;
    let examples = DMatrix::from_row_iterator(count, dim, pixels.iter().map(|&p| p as f64 / 255.0));
    Ok(Dataset { examples })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32("label count")? as usize;
    Ok(r.payload(count)?.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>, BenchError> {
    std::fs::read(path).map_err(io_err(path))
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<(Dataset, Vec<u8>), BenchError> {
    let data = parse_idx_images(&read(images)?).map_err(|e| e.in_file(images))?;
    let labels_v = parse_idx_labels(&read(labels)?).map_err(|e| e.in_file(labels))?;
    if labels_v.len() != data.len() {
        return Err(BenchError::Config(format!(
            "{} images but {} labels",
            data.len(),
            labels_v.len()
        )));
    }
    Ok((data, labels_v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    pub latent_dim: usize,
    pub seed: u64,
}

/// `sigmoid(Z W)` with standard normal latents `Z` (`n × latent`) and mixing
/// `W` (`latent × dim`) drawn with standard deviation `2 / √latent`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, BenchError> {
    if spec.latent_dim == 0 || spec.latent_dim > spec.dim || spec.n == 0 {
        return Err(BenchError::Config(format!(
            "synthetic data needs n ≥ 1 and 1 ≤ latent ≤ dim, got {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = 2.0 / (spec.latent_dim as f64).sqrt();
    let mixing = DMatrix::from_fn(spec.latent_dim, spec.dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    let latents = DMatrix::from_fn(spec.n, spec.latent_dim, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    synthetic_from_parts(&latents, &mixing)
}

pub fn synthetic_from_parts(latents: &DMatrix<f64>, mixing: &DMatrix<f64>) -> Result<Dataset, BenchError> {
    if latents.ncols() != mixing.nrows() {
        return Err(BenchError::Config("latent and mixing shapes disagree".into()));
    }
    Ok(Dataset { examples: (latents * mixing).map(sigmoid) })
}

/// `mnist:DIR[,n=COUNT]` or `synthetic:n=..,dim=..,latent=..,seed=..`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSpec {
    Mnist { dir: PathBuf, limit: Option<usize> },
    Synthetic(SyntheticSpec),
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset, BenchError> {
        match self {
            DatasetSpec::Mnist { dir, limit } => {
                let (data, _) = load_mnist_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
                Ok(match limit {
                    Some(n) => data.truncated(*n),
                    None => data,
                })
            }
            DatasetSpec::Synthetic(s) => generate_synthetic(s),
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Mnist { dir, limit } => {
                write!(f, "mnist:{}", dir.display())?;
                if let Some(n) = limit {
                    write!(f, ",n={n}")?;
                }
                Ok(())
            }
            DatasetSpec::Synthetic(s) => write!(
                f,
                "synthetic:n={},dim={},latent={},seed={}",
                s.n, s.dim, s.latent_dim, s.seed
            ),
        }
    }
}

fn parse_count(key: &str, value: &str) -> Result<usize, BenchError> {
    value
        .parse()
        .map_err(|_| BenchError::Config(format!("'{key}' expects an integer, got '{value}'")))
}

impl FromStr for DatasetSpec {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "mnist" => {
                let mut parts = rest.split(',');
                let dir = parts.next().filter(|d| !d.is_empty()).map(PathBuf::from);
                let dir = match dir {
                    Some(d) => d,
                    None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                        BenchError::Config(format!("mnist needs a directory or {DATA_DIR_ENV}"))
                    })?,
                };
                let mut limit = None;
                for p in parts {
                    match p.split_once('=') {
                        Some(("n", v)) => limit = Some(parse_count("n", v)?),
                        _ => return Err(BenchError::Config(format!("unknown mnist option '{p}'"))),
                    }
                }
                Ok(DatasetSpec::Mnist { dir, limit })
            }
            "synthetic" => {
                let mut spec = SyntheticSpec { n: 5000, dim: 784, latent_dim: 10, seed: 0 };
                for p in rest.split(',').filter(|p| !p.is_empty()) {
                    let (k, v) = p
                        .split_once('=')
                        .ok_or_else(|| BenchError::Config(format!("expected key=value, got '{p}'")))?;
                    match k {
                        "n" => spec.n = parse_count(k, v)?,
                        "dim" => spec.dim = parse_count(k, v)?,
                        "latent" => spec.latent_dim = parse_count(k, v)?,
                        "seed" => {
                            spec.seed = v.parse().map_err(|_| {
                                BenchError::Config(format!("'seed' expects an integer, got '{v}'"))
                            })?
                        }
                        _ => return Err(BenchError::Config(format!("unknown synthetic option '{k}'"))),
                    }
                }
                Ok(DatasetSpec::Synthetic(spec))
            }
            _ => Err(BenchError::Config(format!("unknown dataset '{s}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn parses_handcrafted_images() {
        // Four 2x2 images.
        let bytes = [
            0x00, 0x00, 0x08, 0x03, 0x00, 0x00, 0x00, 0x04, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x02,
            0, 0, 0, 0, //
            255, 0, 0, 255, //
            51, 102, 153, 204, //
            1, 2, 3, 4,
        ];
        let d = parse_idx_images(&bytes).unwrap();
        assert_eq!((d.len(), d.dim()), (4, 4));
        assert!(d.examples.row(0).iter().all(|&x| x == 0.0));
        assert_eq!(d.examples.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(d.examples.row(2).iter().copied().collect::<Vec<_>>(), vec![0.2, 0.4, 0.6, 0.8]);
        assert_eq!(d.examples[(3, 2)], 3.0 / 255.0);
    }

    #[test]
    fn rejects_bad_magic_with_offset() {
        let mut b = idx_images(1, 1, 1, &[7]);
        b[3] = 0x01;
        let e = parse_idx_images(&b).unwrap_err();
        assert_eq!(e.offset, 0);
    }

    #[test]
    fn rejects_payload_length_mismatch() {
        let short = idx_images(3, 2, 2, &[0; 11]);
        let e = parse_idx_images(&short).unwrap_err();
        assert_eq!(e.offset, 16 + 11);
        let long = idx_images(1, 2, 2, &[0; 5]);
        assert!(parse_idx_images(&long).is_err());
        assert_eq!(parse_idx_images(&[0, 0, 8]).unwrap_err().offset, 0);
        let truncated_header = &idx_images(1, 1, 1, &[0])[..10];
        assert_eq!(parse_idx_images(truncated_header).unwrap_err().offset, 8);
    }

    #[test]
    fn parses_labels() {
        let mut b = LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![7, 0, 9]);
        assert!(parse_idx_images(&b).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec { n: 50, dim: 20, latent_dim: 3, seed: 9 };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        let bits = |d: &Dataset| d.examples.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = generate_synthetic(&SyntheticSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(bits(&a), bits(&c));
        assert!(a.examples.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn identity_mixing_is_sigmoid_of_latents() {
        let z = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, 3.0]);
        let d = synthetic_from_parts(&z, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(d.examples, z.map(sigmoid));
    }

    #[test]
    fn synthetic_logits_have_latent_rank() {
        let spec = SyntheticSpec { n: 200, dim: 40, latent_dim: 5, seed: 1 };
        let d = generate_synthetic(&spec).unwrap();
        let logits = d.examples.map(|p| (p / (1.0 - p)).ln());
        let sv = logits.singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert!(sv[4] > 1e-3 * sv[0]);
        assert!(sv[5] < 1e-8 * sv[0], "{sv:?}");
    }

    #[test]
    fn synthetic_rejects_bad_latent() {
        assert!(generate_synthetic(&SyntheticSpec { n: 5, dim: 3, latent_dim: 4, seed: 0 }).is_err());
    }

    #[test]
    fn dataset_specs_parse() {
        let s: DatasetSpec = "synthetic:n=100,dim=8,latent=2,seed=4".parse().unwrap();
        assert_eq!(s, DatasetSpec::Synthetic(SyntheticSpec { n: 100, dim: 8, latent_dim: 2, seed: 4 }));
        assert_eq!(s.to_string().parse::<DatasetSpec>().unwrap(), s);
        let m: DatasetSpec = "mnist:/data/mnist,n=5000".parse().unwrap();
        assert_eq!(m, DatasetSpec::Mnist { dir: "/data/mnist".into(), limit: Some(5000) });
        assert!("synthetic:n=x".parse::<DatasetSpec>().is_err());
        assert!("cifar:/x".parse::<DatasetSpec>().is_err());
    }

    #[test]
    fn split_tail_keeps_order() {
        let d = Dataset { examples: DMatrix::from_fn(5, 1, |r, _| r as f64) };
        let (train, val) = d.split_tail(2);
        assert_eq!(train.examples.as_slice(), &[0.0, 1.0, 2.0]);
        assert_eq!(val.examples.as_slice(), &[3.0, 4.0]);
    }
}
