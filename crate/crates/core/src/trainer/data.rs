use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: [u8; 2] = *b"DS";
const FILE_VERSION: u8 = 1;

/// Labelled feature matrix, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<u32>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<u32>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} rows, {} labels", features.rows(), labels.len()),
            ));
        }
        if classes == 0 || classes > u8::MAX as usize {
            return Err(Error::Parameter(format!("class count {classes} outside 1..=255")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::Parameter(format!("label {y} outside {classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let features = Matrix::from_fn(indices.len(), d, |r, c| self.features.get(indices[r], c));
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Count of samples per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &y in &self.labels {
            h[y as usize] += 1;
        }
        h
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&[FILE_VERSION, self.classes as u8])?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for (r, &y) in self.labels.iter().enumerate() {
            for x in self.features.row(r) {
                w.write_all(&x.to_le_bytes())?;
            }
            w.write_all(&y.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)?;
        if header[..2] != MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        if header[2] != FILE_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", header[2])));
        }
        let classes = header[3] as usize;
        let d = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let record = d * 8 + 4;
        if rest.len() % record != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes do not form {record}-byte records",
                rest.len()
            )));
        }
        let n = rest.len() / record;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for rec in rest.chunks_exact(record) {
            for x in rec[..d * 8].chunks_exact(8) {
                data.push(f64::from_le_bytes(x.try_into().expect("8 bytes")));
            }
            labels.push(u32::from_le_bytes(rec[d * 8..].try_into().expect("4 bytes")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite feature in dataset file".into()));
        }
        Dataset::new(Matrix::new(n, d, data)?, labels, classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Writes `x0,..,x{d-1},label` rows with a header line.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        out.write_record(&header)?;
        for (r, y) in self.labels.iter().enumerate() {
            let mut rec: Vec<String> = self.features.row(r).iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A client's local slice of the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct DataShard {
    pub owner: usize,
    pub data: Dataset,
}

/// Gaussian-blob classification task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Distance of each class mean from the origin.
    pub margin: f64,
    /// Per-coordinate standard deviation around the class mean.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 32,
            per_class: 150,
            margin: 3.0,
            noise: 1.0,
        }
    }
}

/// Samples a blob dataset. Class means are random directions scaled to
/// `margin`; rows are shuffled. Deterministic in `seed`.
pub fn synth_task(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.classes == 0 || spec.dim == 0 || spec.per_class == 0 {
        return Err(Error::Parameter(format!("degenerate synthetic task {spec:?}")));
    }
    if !(spec.margin.is_finite() && spec.margin >= 0.0 && spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::Parameter("margin and noise must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| unit.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * spec.margin / norm).collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..spec.classes * spec.per_class).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::with_capacity(order.len() * spec.dim);
    let mut labels = Vec::with_capacity(order.len());
    for &i in &order {
        let c = i / spec.per_class;
        data.extend(means[c].iter().map(|m| m + spec.noise * unit.sample(&mut rng)));
        labels.push(c as u32);
    }
    Dataset::new(Matrix::new(order.len(), spec.dim, data)?, labels, spec.classes)
}

/// Label skew across clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Concentration {
    /// Symmetric Dirichlet with this concentration.
    Finite(f64),
    /// Stratified split, every client sees the same class mix.
    Homogeneous,
}

impl Concentration {
    /// `inf` (or any non-finite positive) maps to [`Concentration::Homogeneous`].
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if alpha.is_nan() || alpha <= 0.0 {
            Err(Error::Parameter(format!("Dirichlet alpha must be positive, got {alpha}")))
        } else if alpha.is_infinite() {
            Ok(Concentration::Homogeneous)
        } else {
            Ok(Concentration::Finite(alpha))
        }
    }
}

/// Splits `dataset` into `k` equal-size shards.
///
/// With a finite concentration each client draws class proportions from
/// `Dir(α)` and fills its shard by sampling classes from them without
/// replacement, renormalizing over the classes that still have samples.
pub fn dirichlet_partition(
    dataset: &Dataset,
    k: usize,
    concentration: Concentration,
    seed: u64,
) -> Result<Vec<DataShard>> {
    if k == 0 || k > dataset.len() {
        return Err(Error::Parameter(format!(
            "cannot split {} samples across {k} clients",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = dataset.classes();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in dataset.labels().iter().enumerate() {
        pools[y as usize].push(i);
    }
    for p in &mut pools {
        p.shuffle(&mut rng);
    }

    let mut shards: Vec<Vec<usize>> = match concentration {
        Concentration::Homogeneous => {
            let mut shards = vec![Vec::new(); k];
            let mut next = 0;
            for pool in &pools {
                for &i in pool {
                    shards[next % k].push(i);
                    next += 1;
                }
            }
            let min = shards.iter().map(Vec::len).min().unwrap_or(0);
            for s in &mut shards {
                s.truncate(min);
            }
            shards
        }
        Concentration::Finite(alpha) => {
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|e| Error::Parameter(format!("Dirichlet alpha {alpha}: {e}")))?;
            let size = dataset.len() / k;
            (0..k)
                .map(|_| {
                    let mut q: Vec<f64> = (0..c).map(|_| gamma.sample(&mut rng)).collect();
                    if q.iter().sum::<f64>() <= 0.0 {
                        // every draw underflowed: put all mass on one class
                        q = vec![0.0; c];
                        q[rng.random_range(0..c)] = 1.0;
                    }
                    let mut shard = Vec::with_capacity(size);
                    while shard.len() < size {
                        let live: f64 = (0..c).filter(|&j| !pools[j].is_empty()).map(|j| q[j]).sum();
                        let j = if live > 0.0 {
                            let mut u = rng.random::<f64>() * live;
                            let mut pick = None;
                            for j in (0..c).filter(|&j| !pools[j].is_empty()) {
                                pick = Some(j);
                                if u < q[j] {
                                    break;
                                }
                                u -= q[j];
                            }
                            pick.expect("a non-empty pool exists")
                        } else {
                            let live: Vec<usize> = (0..c).filter(|&j| !pools[j].is_empty()).collect();
                            live[rng.random_range(0..live.len())]
                        };
                        shard.push(pools[j].pop().expect("pool is non-empty"));
                    }
                    shard
                })
                .collect()
        }
    };
    for s in &mut shards {
        s.shuffle(&mut rng);
    }
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(owner, idx)| DataShard {
            owner,
            data: dataset.subset(&idx),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64) -> Dataset {
        synth_task(
            &SynthSpec {
                classes: 4,
                dim: 3,
                per_class: 50,
                margin: 2.0,
                noise: 1.0,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn synth_is_deterministic() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        blobs(3).write_to(&mut a).unwrap();
        blobs(3).write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert_ne!(blobs(3), blobs(4));
        assert_eq!(blobs(3).histogram(), vec![50; 4]);
    }

    #[test]
    fn file_roundtrip() {
        let ds = blobs(1);
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..2], b"DS");
        assert_eq!(bytes.len(), 8 + 200 * (3 * 8 + 4));
        assert_eq!(Dataset::read_from(&bytes[..]).unwrap(), ds);
        assert!(Dataset::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::read_from(&bad[..]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.ds");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        assert!(Dataset::load(dir.path().join("absent.ds")).is_err());
    }

    #[test]
    fn two_dimensional_csv() {
        let ds = synth_task(
            &SynthSpec {
                classes: 2,
                dim: 2,
                per_class: 5,
                margin: 1.0,
                noise: 0.1,
            },
            0,
        )
        .unwrap();
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some("x0,x1,label"));
        assert_eq!(text.lines().count(), 11);
    }

    #[test]
    fn homogeneous_split_is_balanced() {
        let ds = blobs(0);
        let shards = dirichlet_partition(&ds, 3, Concentration::Homogeneous, 9).unwrap();
        let size = shards[0].data.len();
        for s in &shards {
            assert_eq!(s.data.len(), size);
            let expect = size as f64 / 4.0;
            for h in s.data.histogram() {
                assert!((h as f64 - expect).abs() <= 2.0, "{:?}", s.data.histogram());
            }
        }
    }

    #[test]
    fn small_alpha_is_skewed() {
        let ds = blobs(0);
        for seed in 0..20 {
            let shards = dirichlet_partition(&ds, 4, Concentration::Finite(0.3), seed).unwrap();
            let size = shards[0].data.len();
            assert!(shards.iter().all(|s| s.data.len() == size));
            let uniform = size as f64 / 4.0;
            assert!(shards
                .iter()
                .any(|s| s.data.histogram().iter().any(|&h| (h as f64) < 0.1 * uniform)));
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = blobs(2);
        for conc in [Concentration::Homogeneous, Concentration::Finite(0.5)] {
            let shards = dirichlet_partition(&ds, 1, conc, 0).unwrap();
            assert_eq!(shards.len(), 1);
            assert_eq!(shards[0].data.histogram(), ds.histogram());
        }
    }

    #[test]
    fn partition_errors() {
        let ds = blobs(0);
        assert!(dirichlet_partition(&ds, 201, Concentration::Homogeneous, 0).is_err());
        assert!(dirichlet_partition(&ds, 0, Concentration::Homogeneous, 0).is_err());
        assert!(Concentration::from_alpha(0.0).is_err());
        assert!(Concentration::from_alpha(f64::NAN).is_err());
        assert_eq!(Concentration::from_alpha(f64::INFINITY).unwrap(), Concentration::Homogeneous);
    }
}
