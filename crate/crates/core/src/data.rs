//! Datasets, client shards, the IDX reader/writer, Dirichlet label-skew
//! partitioning and the synthetic clustered-client generator.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature matrix (one row per sample, values in `[0, 1]`) plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::LengthMismatch { expected: features.nrows(), got: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= num_classes {num_classes}")));
        }
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("features must lie in [0, 1]".into()));
        }
        Ok(Dataset { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the listed rows into a contiguous batch.
    pub fn gather(&self, rows: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.features.select(Axis(0), rows);
        let y = rows.iter().map(|&r| self.labels[r]).collect();
        (x, y)
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let (features, labels) = self.gather(rows);
        Dataset { features, labels, num_classes: self.num_classes }
    }

    /// Overwrites one sample in place.
    pub fn set_sample(&mut self, row: usize, features: &[f64], label: usize) -> Result<()> {
        if row >= self.len() {
            return Err(Error::InvalidArgument(format!("row {row} out of range for {} samples", self.len())));
        }
        if features.len() != self.input_dim() {
            return Err(Error::LengthMismatch { expected: self.input_dim(), got: features.len() });
        }
        if label >= self.num_classes {
            return Err(Error::InvalidArgument(format!("label {label} >= num_classes {}", self.num_classes)));
        }
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("features must lie in [0, 1]".into()));
        }
        self.features.row_mut(row).iter_mut().zip(features).for_each(|(d, s)| *d = *s);
        self.labels[row] = label;
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.labels {
            counts[c] += 1;
        }
        counts
    }
}

/// Stable identity of a training sample: the client that owns it and its
/// position in that client's owned list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub origin_client: usize,
    pub local_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: SampleId,
    /// Row in the backing [`Dataset`].
    pub row: usize,
}

/// A client's local data. `train` and `test` are owned; `received` holds
/// samples shared down the tree this round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Shard {
    pub client: usize,
    pub train: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
    pub received: Vec<SampleRef>,
}

impl Shard {
    pub fn owned(&self) -> impl Iterator<Item = &SampleRef> {
        self.train.iter().chain(&self.test)
    }

    pub fn owned_len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn train_rows(&self) -> Vec<usize> {
        self.train.iter().map(|s| s.row).collect()
    }

    pub fn test_rows(&self) -> Vec<usize> {
        self.test.iter().map(|s| s.row).collect()
    }

    /// Owned training samples followed by received ones.
    pub fn training_rows(&self) -> Vec<usize> {
        self.train.iter().chain(&self.received).map(|s| s.row).collect()
    }
}

fn shard_from_rows(client: usize, mut rows: Vec<usize>) -> Shard {
    rows.sort_unstable();
    let train = rows
        .into_iter()
        .enumerate()
        .map(|(i, row)| SampleRef { id: SampleId { origin_client: client, local_index: i }, row })
        .collect();
    Shard { client, train, test: Vec::new(), received: Vec::new() }
}

/// Moves a `test_fraction` of every shard's owned samples into its test split.
/// At least one sample stays in training; shards of two or more samples get
/// at least one test sample when the fraction is positive.
pub fn split_train_test(shards: &mut [Shard], test_fraction: f64, seed: u64) {
    for shard in shards.iter_mut() {
        let mut all: Vec<SampleRef> = shard.train.drain(..).chain(shard.test.drain(..)).collect();
        all.sort_by_key(|s| s.id);
        let n = all.len();
        let mut n_test = (test_fraction * n as f64).round() as usize;
        if test_fraction > 0.0 && n >= 2 {
            n_test = n_test.max(1);
        }
        n_test = n_test.min(n.saturating_sub(1));
        let mut rng = rng::stream(seed, "split", &[shard.client as u64]);
        all.shuffle(&mut rng);
        let mut test: Vec<SampleRef> = all.drain(..n_test).collect();
        test.sort_by_key(|s| s.id);
        all.sort_by_key(|s| s.id);
        shard.train = all;
        shard.test = test;
    }
}

/// Splits each class across clients with Dirichlet(`alpha`) proportions.
///
/// Every sample lands in exactly one shard. If a draw leaves a client empty
/// the whole assignment is redrawn (up to 100 times); after that, empty
/// clients take one sample each from the currently largest shard.
pub fn dirichlet_partition(data: &Dataset, num_clients: usize, alpha: f64, seed: u64) -> Result<Vec<Shard>> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("num_clients must be at least 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if data.len() < num_clients {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot cover {num_clients} clients",
            data.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (row, &c) in data.labels().iter().enumerate() {
        by_class[c].push(row);
    }
    let mut rng = rng::stream(seed, "dirichlet", &[num_clients as u64]);
    let mut assignment: Vec<Vec<usize>> = Vec::new();
    for _attempt in 0..100 {
        assignment = vec![Vec::new(); num_clients];
        for rows in &by_class {
            if rows.is_empty() {
                continue;
            }
            let mut rows = rows.clone();
            rows.shuffle(&mut rng);
            let mut props: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = props.iter().sum();
            if total > 0.0 {
                props.iter_mut().for_each(|p| *p /= total);
            } else {
                props = vec![1.0 / num_clients as f64; num_clients];
            }
            let n = rows.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (client, p) in props.iter().enumerate() {
                cum += p;
                let end = if client + 1 == num_clients { n } else { ((cum * n as f64).floor() as usize).min(n) };
                let end = end.max(start);
                assignment[client].extend_from_slice(&rows[start..end]);
                start = end;
            }
        }
        if assignment.iter().all(|a| !a.is_empty()) {
            break;
        }
    }
    for client in 0..num_clients {
        if assignment[client].is_empty() {
            let donor = (0..num_clients).max_by_key(|&c| (assignment[c].len(), usize::MAX - c)).expect("clients");
            let row = assignment[donor].pop().expect("donor has samples");
            assignment[client].push(row);
        }
    }
    Ok(assignment.into_iter().enumerate().map(|(c, rows)| shard_from_rows(c, rows)).collect())
}

/// Class-stratified subset of `n` samples (largest-remainder allocation).
pub fn stratified_subset(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > data.len() {
        return Err(Error::InvalidArgument(format!("subset of {n} from {} samples", data.len())));
    }
    if n == data.len() {
        return Ok(data.clone());
    }
    let counts = data.class_counts();
    let total = data.len() as f64;
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * n as f64 / total).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n - take.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if take[c] < counts[c] {
            take[c] += 1;
            rest -= 1;
        }
    }
    let mut rng = rng::stream(seed, "subset", &[n as u64]);
    let mut rows = Vec::with_capacity(n);
    for (class, &k) in take.iter().enumerate() {
        let mut members: Vec<usize> =
            data.labels().iter().enumerate().filter(|(_, &l)| l == class).map(|(r, _)| r).collect();
        members.shuffle(&mut rng);
        rows.extend_from_slice(&members[..k]);
    }
    rows.sort_unstable();
    Ok(data.subset(&rows))
}

/// Clients grouped into synthetic populations with their own class means.
#[derive(Debug, Clone)]
pub struct SyntheticFederation {
    pub dataset: Dataset,
    pub shards: Vec<Shard>,
    /// Generating population of each client.
    pub cluster_of: Vec<usize>,
    /// Pre-squash class means, indexed `[cluster][class]`.
    pub means: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_clusters: usize,
    pub clients_per_cluster: usize,
    pub samples_per_client: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_clusters: 2,
            clients_per_cluster: 5,
            samples_per_client: 100,
            input_dim: 16,
            num_classes: 4,
            separation: 10.0,
        }
    }
}

const CLASS_SPREAD: f64 = 3.0;
const SQUASH: f64 = 2.0;

fn squash(v: f64) -> f64 {
    1.0 / (1.0 + (-v / SQUASH).exp())
}

/// Draws `n` labelled points from the given class means (unit Gaussian noise,
/// uniform labels), squashed into `[0, 1]` by a logistic map.
pub fn sample_from_means(means: &[Vec<f64>], n: usize, rng: &mut rng::Rng) -> (Vec<f64>, Vec<usize>) {
    let dim = means[0].len();
    let mut feats = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..means.len());
        labels.push(c);
        for &m in &means[c] {
            let z: f64 = StandardNormal.sample(rng);
            feats.push(squash(m + z));
        }
    }
    (feats, labels)
}

/// Populations share base class means; each (population, class) pair is
/// shifted by a random vector of norm about `separation`.
pub fn synthetic_clusters(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticFederation> {
    if !(spec.separation > 0.0) {
        return Err(Error::InvalidArgument("separation must be positive".into()));
    }
    if spec.num_clusters == 0 || spec.clients_per_cluster == 0 || spec.samples_per_client == 0 {
        return Err(Error::InvalidArgument("synthetic federation must be nonempty".into()));
    }
    let d = spec.input_dim;
    let mut rng = rng::stream(seed, "synthetic-means", &[]);
    let scale = 1.0 / (d as f64).sqrt();
    let base: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..d).map(|_| CLASS_SPREAD * scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let means: Vec<Vec<Vec<f64>>> = (0..spec.num_clusters)
        .map(|_| {
            base.iter()
                .map(|b| b.iter().map(|&v| v + spec.separation * scale * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect()
        })
        .collect();
    let n_clients = spec.num_clusters * spec.clients_per_cluster;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut shards = Vec::with_capacity(n_clients);
    let mut cluster_of = Vec::with_capacity(n_clients);
    for client in 0..n_clients {
        let g = client / spec.clients_per_cluster;
        let mut crng = rng::stream(seed, "synthetic-client", &[client as u64]);
        let (f, l) = sample_from_means(&means[g], spec.samples_per_client, &mut crng);
        let start = labels.len();
        feats.extend(f);
        labels.extend(l);
        shards.push(shard_from_rows(client, (start..labels.len()).collect()));
        cluster_of.push(g);
    }
    let features = Array2::from_shape_vec((labels.len(), d), feats).expect("shape");
    let dataset = Dataset::new(features, labels, spec.num_classes)?;
    Ok(SyntheticFederation { dataset, shards, cluster_of, means })
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(fs::File::create(path)?, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

fn idx_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Idx { path: path.display().to_string(), offset, reason: reason.into() }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(path, bytes.len(), "file ends inside the header"))
}

/// Raw IDX image tensor: count, rows, cols and pixel bytes.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(path, 0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(idx_err(path, bytes.len(), format!("truncated: expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(idx_err(path, expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(path, 0, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(idx_err(path, bytes.len(), format!("truncated: expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(idx_err(path, expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    Ok(bytes[8..].to_vec())
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows * cols == 0 || pixels.len() % (rows * cols) != 0 {
        return Err(Error::InvalidArgument("pixel buffer is not a whole number of images".into()));
    }
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    write_maybe_gz(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_maybe_gz(path, &out)
}

/// Reads an IDX image/label pair; pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(idx_err(labels_path, 4, format!("{} labels for {n} images", labels.len())));
    }
    let features = Array2::from_shape_vec((n, rows * cols), pixels.iter().map(|&p| p as f64 / 255.0).collect())
        .expect("shape checked");
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(features, labels, num_classes)
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
}

/// Loads the MNIST training pair from a directory holding the standard file
/// names (optionally gzipped). The `t10k-*` pair, if present, is not used:
/// each client's test split is carved from its own shard.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    let images = find_file(dir, "train-images-idx3-ubyte").ok_or_else(|| {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("train-images-idx3-ubyte[.gz] not found in {}", dir.display()),
        ))
    })?;
    let labels = find_file(dir, "train-labels-idx1-ubyte").ok_or_else(|| {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("train-labels-idx1-ubyte[.gz] not found in {}", dir.display()),
        ))
    })?;
    load_idx(&images, &labels)
}
