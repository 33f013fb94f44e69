//! Synthetic Gaussian-mixture classification data, its binary file format,
//! and class-aligned cross-user batch sampling.
//!
//! Class labels are 0-based everywhere (`0..K`), including on disk.
//!
//! Dataset file layout (little-endian, no padding):
//!
//! ```text
//! "TOIBDATA" | version u32 | n u64 | d_x u32 | K u32 | n × (d_x × f64, label u32)
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::codec::{write_atomic, ByteReader, ByteWriter};
use crate::error::{contract_err, Result};
use crate::objectives::ClassPartition;
use crate::rng::{standard_normal, substream, RunRng};

pub const DATA_MAGIC: &[u8; 8] = b"TOIBDATA";
pub const DATA_VERSION: u32 = 1;

/// How task labels relate across users.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LabelMode {
    /// Every batch slot carries one class shared by all users.
    #[default]
    Shared,
    /// Each user's label is drawn independently.
    Independent,
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Shared => "shared",
            LabelMode::Independent => "independent",
        })
    }
}

impl FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shared" => Ok(LabelMode::Shared),
            "independent" => Ok(LabelMode::Independent),
            other => Err(format!("unknown label mode {other:?} (shared | independent)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Labelled inputs of one user.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let (n, _) = inputs.dims2()?;
        if labels.len() != n {
            return contract_err(format!("{} labels for {n} inputs", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&u| u >= n_classes) {
            return contract_err(format!("label {bad} out of range 0..{n_classes}"));
        }
        Ok(Self { inputs, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Sample indices of every class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (k, &u) in self.labels.iter().enumerate() {
            out[u].push(k);
        }
        out
    }

    /// Rows `idx` as a new `[idx.len(), d_x]` matrix.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &k in idx {
            data.extend_from_slice(self.inputs.row(k));
        }
        Tensor::from_vec(vec![idx.len(), d], data).expect("row width")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(DATA_MAGIC);
        w.u32(DATA_VERSION);
        w.u64(self.len() as u64);
        w.u32(self.input_dim() as u32);
        w.u32(self.n_classes as u32);
        for (k, &u) in self.labels.iter().enumerate() {
            for &x in self.inputs.row(k) {
                w.f64(x);
            }
            w.u32(u as u32);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != DATA_MAGIC {
            return Err(crate::Error::Format { offset: 0, reason: "bad magic".into() });
        }
        let version = r.u32()?;
        if version != DATA_VERSION {
            return r.fail(format!("unsupported dataset version {version}"));
        }
        let n = r.u64()? as usize;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let record = d.checked_mul(8).and_then(|b| b.checked_add(4));
        match record.and_then(|b| b.checked_mul(n)) {
            Some(need) if need == r.remaining() => {}
            Some(need) => return r.fail(format!("{n} records need {need} bytes, {} present", r.remaining())),
            None => return r.fail("record count overflows"),
        }
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            for _ in 0..d {
                data.push(r.f64()?);
            }
            let at = r.offset();
            let u = r.u32()? as usize;
            if u >= k {
                return Err(crate::Error::Format { offset: at, reason: format!("label {u} out of range 0..{k}") });
            }
            labels.push(u);
        }
        Self::new(Tensor::from_vec(vec![n, d], data)?, labels, k)
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &ds.to_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

/// Parameters of the synthetic Gaussian-mixture generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub n_classes: usize,
    pub input_dim: usize,
    pub n_per_user: usize,
    pub c_sep: f64,
    pub sigma_x: f64,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            input_dim: 8,
            n_per_user: 2000,
            c_sep: 4.0,
            sigma_x: 1.0,
            label_mode: LabelMode::Shared,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return contract_err(format!("classes ≥ 2 required, got {}", self.n_classes));
        }
        if self.input_dim == 0 {
            return contract_err("input_dim ≥ 1 required");
        }
        if !(self.c_sep > 0.0) {
            return contract_err(format!("c_sep > 0 required, got {}", self.c_sep));
        }
        if !(self.sigma_x > 0.0) {
            return contract_err(format!("sigma_x > 0 required, got {}", self.sigma_x));
        }
        Ok(())
    }
}

/// Class centres of `user`: `c_sep` times a uniformly random unit direction.
/// They depend on the seed and user only, so train and test splits share them.
pub fn class_centers(spec: &GenSpec, user: usize) -> Tensor {
    let mut rng = substream(spec.seed, &format!("data/centers/{user}"));
    let mut c = standard_normal(&mut rng, &[spec.n_classes, spec.input_dim]);
    let d = spec.input_dim;
    for row in c.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x *= spec.c_sep / norm);
    }
    c
}

/// Label sequence of length `n` in which every class appears at least twice.
fn label_sequence(rng: &mut RunRng, n: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..2 * k).map(|i| i / 2).collect();
    labels.extend((2 * k..n).map(|_| rng.random_range(0..k)));
    labels.shuffle(rng);
    labels
}

/// One dataset per user. In shared mode all users get the same label
/// sequence (with independent samples); otherwise labels are per user.
pub fn gen_synthetic(spec: &GenSpec, n_users: usize, split: Split) -> Result<Vec<Dataset>> {
    spec.validate()?;
    let (n, k, d) = (spec.n_per_user, spec.n_classes, spec.input_dim);
    if n < 2 * k {
        return contract_err(format!("{n} samples cannot hold {k} classes with at least two samples each"));
    }
    let shared = label_sequence(&mut substream(spec.seed, &format!("data/labels/{}", split.tag())), n, k);
    (0..n_users)
        .map(|user| {
            let labels = match spec.label_mode {
                LabelMode::Shared => shared.clone(),
                LabelMode::Independent => {
                    let name = format!("data/labels/{}/{user}", split.tag());
                    label_sequence(&mut substream(spec.seed, &name), n, k)
                }
            };
            let centers = class_centers(spec, user);
            let mut rng = substream(spec.seed, &format!("data/noise/{}/{user}", split.tag()));
            let mut x = standard_normal(&mut rng, &[n, d]);
            for (row, &u) in x.data_mut().chunks_mut(d).zip(&labels) {
                for (xi, &ci) in row.iter_mut().zip(centers.row(u)) {
                    *xi = ci + spec.sigma_x * *xi;
                }
            }
            Dataset::new(x, labels, k)
        })
        .collect()
}

/// Accuracy of assigning each sample to its nearest class centre.
pub fn nearest_center_accuracy(ds: &Dataset, centers: &Tensor) -> f64 {
    let correct = (0..ds.len())
        .filter(|&s| {
            let x = ds.inputs.row(s);
            let dist = |c: usize| -> f64 { x.iter().zip(centers.row(c)).map(|(a, b)| (a - b) * (a - b)).sum() };
            let best = (0..ds.n_classes).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).expect("at least one class");
            best == ds.labels[s]
        })
        .count();
    correct as f64 / ds.len() as f64
}

/// True when every user holds the identical label sequence, i.e. the
/// datasets were generated in shared-label mode.
pub fn labels_shared(datasets: &[Dataset]) -> bool {
    datasets.len() > 1 && datasets.windows(2).all(|w| w[0].labels == w[1].labels)
}

/// A mini-batch drawn for all users at once.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPair {
    /// Per-user `[V, d_x]` inputs.
    pub inputs: Vec<Tensor>,
    /// Per-user task labels.
    pub labels: Vec<Vec<usize>>,
}

impl BatchPair {
    pub fn n_users(&self) -> usize {
        self.inputs.len()
    }

    pub fn size(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    /// Conditioning class of every slot for the ordered pair `(i, j)`: the
    /// task label of user `i`. In shared mode this is the common class.
    pub fn conditioning(&self, i: usize, _j: usize) -> &[usize] {
        &self.labels[i]
    }

    pub fn partition(&self, i: usize, j: usize) -> ClassPartition {
        ClassPartition::from_classes(self.conditioning(i, j))
    }
}

/// Draws class-aligned batches over a fixed set of per-user datasets.
#[derive(Clone, Debug)]
pub struct BatchSampler<'a> {
    datasets: &'a [Dataset],
    by_class: Vec<Vec<Vec<usize>>>,
    batch_size: usize,
    mode: LabelMode,
}

impl<'a> BatchSampler<'a> {
    pub fn new(datasets: &'a [Dataset], batch_size: usize, mode: LabelMode) -> Result<Self> {
        if batch_size < 2 {
            return contract_err(format!("batch size ≥ 2 required, got {batch_size}"));
        }
        let Some(first) = datasets.first() else {
            return contract_err("no datasets");
        };
        for (user, ds) in datasets.iter().enumerate() {
            if ds.n_classes != first.n_classes || ds.input_dim() != first.input_dim() {
                return contract_err(format!("dataset of user {user} disagrees on K or d_x"));
            }
        }
        let by_class: Vec<Vec<Vec<usize>>> = datasets.iter().map(Dataset::indices_by_class).collect();
        for (user, classes) in by_class.iter().enumerate() {
            if let Some(c) = classes.iter().position(Vec::is_empty) {
                return contract_err(format!("dataset of user {user} has no sample of class {c}"));
            }
        }
        Ok(Self { datasets, by_class, batch_size, mode })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    /// Batches per epoch, `ceil(n / V)` for the largest dataset.
    pub fn steps_per_epoch(&self) -> usize {
        let n = self.datasets.iter().map(Dataset::len).max().unwrap_or(0);
        n.div_ceil(self.batch_size).max(1)
    }

    /// Draws one batch: a uniform class per slot (per user in independent
    /// mode), then a uniformly chosen sample of that class for every user.
    pub fn sample(&self, rng: &mut RunRng) -> BatchPair {
        let k = self.datasets[0].n_classes;
        let v = self.batch_size;
        let n_users = self.datasets.len();
        let mut labels = vec![Vec::with_capacity(v); n_users];
        match self.mode {
            LabelMode::Shared => {
                for _ in 0..v {
                    let w = rng.random_range(0..k);
                    labels.iter_mut().for_each(|l| l.push(w));
                }
            }
            LabelMode::Independent => {
                for l in labels.iter_mut() {
                    l.extend((0..v).map(|_| rng.random_range(0..k)));
                }
            }
        }
        let inputs = (0..n_users)
            .map(|user| {
                let idx: Vec<usize> = labels[user]
                    .iter()
                    .map(|&u| {
                        let pool = &self.by_class[user][u];
                        pool[rng.random_range(0..pool.len())]
                    })
                    .collect();
                self.datasets[user].gather(&idx)
            })
            .collect();
        BatchPair { inputs, labels }
    }
}
