//! Datasets: synthetic blobs, IDX files, partitioning, semi-supervised splits.
//!
//! Partitioning follows the usual pathological-heterogeneity recipe: sort by
//! label, cut into equal contiguous shards, deal a fixed number of shards to
//! each client, so most clients only ever see a couple of classes. The
//! labeled/unlabeled/test split happens per client afterwards. Ground-truth
//! labels of "unlabeled" samples are quarantined in a diagnostics-only field
//! that the training path never reads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Feature matrix plus integer labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(x: Array2<f64>, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimMismatch {
                context: "dataset labels",
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= n_classes) {
            return Err(Error::DimMismatch {
                context: "dataset label range",
                expected: n_classes,
                got: bad,
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(LabeledDataset { x, y, n_classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            x: take_rows(&self.x, idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }
}

/// Gathers rows of `m` by index into a new matrix.
pub fn take_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&m.row(i));
    }
    out
}

/// Standard-normal pair via Box-Muller; keeps the generator dependency-free
/// and the draw order stable.
fn normal_pair<R: Rng>(rng: &mut R) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let t = 2.0 * std::f64::consts::PI * u2;
    (r * t.cos(), r * t.sin())
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    normal_pair(rng).0
}

/// Isotropic Gaussian blobs, one per class, means placed deterministically
/// on a circle of radius 2 in the first two feature dimensions. Samples are
/// interleaved by class (labels 0, 1, ..., K-1, 0, 1, ...), so any prefix is
/// close to class-balanced.
pub fn gen_blobs<R: Rng>(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::config("blobs_classes", "need at least 2 classes"));
    }
    if dim == 0 || per_class == 0 {
        return Err(Error::config("blobs", "dim and per_class must be positive"));
    }
    if !spread.is_finite() || spread <= 0.0 {
        return Err(Error::config(
            "blobs_spread",
            format!("must be > 0, got {spread}"),
        ));
    }
    let mut means = Array2::zeros((classes, dim));
    for k in 0..classes {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
        means[(k, 0)] = 2.0 * angle.cos();
        if dim > 1 {
            means[(k, 1)] = 2.0 * angle.sin();
        }
    }
    let n = classes * per_class;
    let mut x = Array2::zeros((n, dim));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        for j in 0..dim {
            x[(i, j)] = means[(k, j)] + spread * normal(rng);
        }
        y.push(k);
    }
    LabeledDataset::new(x, y, classes)
}

fn read_exact_u8(reader: &mut impl Read, n: usize, path: &Path) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    reader.read_exact(&mut buf).map_err(|e| Error::DataFormat {
        path: path.display().to_string(),
        message: format!("truncated file: {e}"),
    })?;
    Ok(buf)
}

fn open_with_context(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::DataFormat {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Reads an IDX image file (big-endian magic 0x00000803) into rows of
/// flattened pixels scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Array2<f64>> {
    let mut reader = BufReader::new(open_with_context(path)?);
    let magic = reader.read_u32::<BigEndian>()?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            message: format!("bad magic {magic:#010x}, expected {IDX_MAGIC_IMAGES:#010x}"),
        });
    }
    let n = reader.read_u32::<BigEndian>()? as usize;
    let rows = reader.read_u32::<BigEndian>()? as usize;
    let cols = reader.read_u32::<BigEndian>()? as usize;
    let pixels = rows * cols;
    if pixels == 0 {
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            message: format!("degenerate image shape {rows}x{cols}"),
        });
    }
    let raw = read_exact_u8(&mut reader, n * pixels, path)?;
    let x = Array2::from_shape_vec(
        (n, pixels),
        raw.into_iter().map(|b| b as f64 / 255.0).collect(),
    )
    .expect("shape matches buffer");
    Ok(x)
}

/// Reads an IDX label file (big-endian magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut reader = BufReader::new(open_with_context(path)?);
    let magic = reader.read_u32::<BigEndian>()?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            message: format!("bad magic {magic:#010x}, expected {IDX_MAGIC_LABELS:#010x}"),
        });
    }
    let n = reader.read_u32::<BigEndian>()? as usize;
    let raw = read_exact_u8(&mut reader, n, path)?;
    Ok(raw.into_iter().map(|b| b as usize).collect())
}

/// Writes rows of `[0, 1]` floats as an IDX image file with the given
/// per-image shape. Counterpart of [`load_idx_images`].
pub fn write_idx_images(path: &Path, x: &Array2<f64>, rows: usize, cols: usize) -> Result<()> {
    if rows * cols != x.ncols() {
        return Err(Error::DimMismatch {
            context: "idx image shape",
            expected: x.ncols(),
            got: rows * cols,
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(IDX_MAGIC_IMAGES)?;
    w.write_u32::<BigEndian>(x.nrows() as u32)?;
    w.write_u32::<BigEndian>(rows as u32)?;
    w.write_u32::<BigEndian>(cols as u32)?;
    for &v in x.iter() {
        w.write_all(&[(v.clamp(0.0, 1.0) * 255.0).round() as u8])?;
    }
    w.flush()?;
    Ok(())
}

/// Counterpart of [`load_idx_labels`].
pub fn write_idx_labels(path: &Path, y: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(IDX_MAGIC_LABELS)?;
    w.write_u32::<BigEndian>(y.len() as u32)?;
    for &l in y {
        if l > u8::MAX as usize {
            return Err(Error::DimMismatch {
                context: "idx label value",
                expected: u8::MAX as usize,
                got: l,
            });
        }
        w.write_all(&[l as u8])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads the first `size` rows of the MNIST-format pair
/// `train-images-idx3-ubyte` / `train-labels-idx1-ubyte` under `dir`.
pub fn load_mnist_subset(dir: &Path, size: usize) -> Result<LabeledDataset> {
    let images = dir.join("train-images-idx3-ubyte");
    let labels = dir.join("train-labels-idx1-ubyte");
    let x = load_idx_images(&images)?;
    let y = load_idx_labels(&labels)?;
    if x.nrows() != y.len() {
        return Err(Error::DataFormat {
            path: dir.display().to_string(),
            message: format!("{} images but {} labels", x.nrows(), y.len()),
        });
    }
    if size == 0 || size > x.nrows() {
        return Err(Error::config(
            "dataset_size",
            format!("must be in 1..={}, got {size}", x.nrows()),
        ));
    }
    let idx: Vec<usize> = (0..size).collect();
    LabeledDataset::new(take_rows(&x, &idx), y[..size].to_vec(), 10)
}

/// Label-sorted shard partitioning. Samples are sorted by `(label, index)`,
/// cut into `n_clients * shards_per_client` near-equal contiguous shards,
/// and shards are dealt to clients in shuffled order. Returns one dataset
/// per client (indices re-sorted for stable iteration).
pub fn partition_shards<R: Rng>(
    ds: &LabeledDataset,
    n_clients: usize,
    shards_per_client: usize,
    rng: &mut R,
) -> Result<Vec<LabeledDataset>> {
    if n_clients == 0 || shards_per_client == 0 {
        return Err(Error::config(
            "shards_per_client",
            "n_clients and shards_per_client must be positive",
        ));
    }
    let n_shards = n_clients * shards_per_client;
    if ds.len() < n_shards {
        return Err(Error::config(
            "n_clients",
            format!("{} samples cannot fill {n_shards} shards", ds.len()),
        ));
    }

    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| (ds.y[i], i));

    // Near-equal contiguous shards: the first `rem` get one extra sample.
    let base = ds.len() / n_shards;
    let rem = ds.len() % n_shards;
    let mut shards = Vec::with_capacity(n_shards);
    let mut start = 0;
    for s in 0..n_shards {
        let size = base + usize::from(s < rem);
        shards.push(&order[start..start + size]);
        start += size;
    }

    let mut shard_ids: Vec<usize> = (0..n_shards).collect();
    shard_ids.shuffle(rng);

    let mut out = Vec::with_capacity(n_clients);
    for c in 0..n_clients {
        let mut idx: Vec<usize> = shard_ids[c * shards_per_client..(c + 1) * shards_per_client]
            .iter()
            .flat_map(|&s| shards[s].iter().copied())
            .collect();
        idx.sort_unstable();
        out.push(ds.subset(&idx));
    }
    Ok(out)
}

/// One client's data after the semi-supervised split.
#[derive(Debug, Clone)]
pub struct ClientSplit {
    pub labeled: LabeledDataset,
    pub unlabeled_x: Array2<f64>,
    /// True labels of the unlabeled rows. Diagnostics only (pseudo-label
    /// accuracy); never fed to training.
    pub unlabeled_truth: Vec<usize>,
    pub test: LabeledDataset,
}

impl ClientSplit {
    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_x.nrows()
    }
}

/// Splits one client's shard into test / unlabeled / labeled parts.
///
/// `test_frac` of the samples (floor) are held out; of the remaining
/// training pool, a fraction `epsilon` (rounded) loses its labels.
pub fn split_semi<R: Rng>(
    ds: &LabeledDataset,
    epsilon: f64,
    test_frac: f64,
    rng: &mut R,
) -> Result<ClientSplit> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::config(
            "epsilon",
            format!("must be in [0, 1], got {epsilon}"),
        ));
    }
    if !(0.0..1.0).contains(&test_frac) {
        return Err(Error::config(
            "test_frac",
            format!("must be in [0, 1), got {test_frac}"),
        ));
    }
    if ds.is_empty() {
        return Err(Error::EmptyPool {
            context: "client shard",
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);

    let n_test = (ds.len() as f64 * test_frac).floor() as usize;
    let n_train = ds.len() - n_test;
    let n_unlabeled = ((n_train as f64) * epsilon).round() as usize;

    let test_idx = &order[..n_test];
    let unlabeled_idx = &order[n_test..n_test + n_unlabeled];
    let labeled_idx = &order[n_test + n_unlabeled..];

    Ok(ClientSplit {
        labeled: ds.subset(labeled_idx),
        unlabeled_x: take_rows(&ds.x, unlabeled_idx),
        unlabeled_truth: unlabeled_idx.iter().map(|&i| ds.y[i]).collect(),
        test: ds.subset(test_idx),
    })
}
