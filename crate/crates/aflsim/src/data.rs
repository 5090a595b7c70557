//! Dataset ingestion and per-vehicle allocation.
//!
//! Two sources feed the simulator: MNIST-style IDX files (big-endian, the
//! classic magic 0x803/0x801 containers) and a synthetic Gaussian-blob
//! generator for self-contained runs. Pools are partitioned into disjoint
//! per-vehicle datasets, either IID (shuffled split) or label-sorted shards
//! for a non-IID allocation. Bad-node injection truncates a vehicle's data,
//! scales its compute distribution and attaches upload noise to its model.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::VehicleState;
use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::seeds;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Features and class labels for one client (or a whole pool).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    /// One sample per row, values scaled to `[0, 1]` for image data.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ClientDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimMismatch(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Extracts the rows at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let features = Array2::from_shape_fn((indices.len(), self.feature_dim()), |(r, c)| {
            self.features[[indices[r], c]]
        });
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self {
            features,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Keeps only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        let keep: Vec<usize> = (0..n).collect();
        *self = self.subset(&keep);
    }
}

/// Where the sample pools come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    MnistIdx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        /// Optional cap on the training pool (prefix of the file).
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    SyntheticBlobs {
        classes: usize,
        dims: usize,
        /// Training-pool samples per class.
        per_class_train: usize,
        /// Held-out test samples per class.
        per_class_test: usize,
        cluster_std: f64,
    },
}

impl DatasetSource {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSource::MnistIdx { .. } => Ok(()),
            DatasetSource::SyntheticBlobs {
                classes,
                dims,
                per_class_train,
                per_class_test,
                cluster_std,
            } => {
                if *classes < 2 {
                    return Err(Error::InvalidConfig("synthetic classes must be >= 2".into()));
                }
                if *dims < 1 {
                    return Err(Error::InvalidConfig("synthetic dims must be >= 1".into()));
                }
                if *classes > dims + 1 {
                    return Err(Error::InvalidConfig(
                        "synthetic blobs need classes <= dims + 1 for distinct means".into(),
                    ));
                }
                if *per_class_train == 0 || *per_class_test == 0 {
                    return Err(Error::InvalidConfig("per-class counts must be >= 1".into()));
                }
                if *cluster_std < 0.0 {
                    return Err(Error::InvalidConfig("cluster_std must be >= 0".into()));
                }
                Ok(())
            }
        }
    }

    /// Feature width produced by this source.
    pub fn feature_dim(&self) -> usize {
        match self {
            DatasetSource::MnistIdx { .. } => 28 * 28,
            DatasetSource::SyntheticBlobs { dims, .. } => *dims,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSource::MnistIdx { .. } => 10,
            DatasetSource::SyntheticBlobs { classes, .. } => *classes,
        }
    }
}

/// A degraded client: truncated data, scaled-down compute, noisy uploads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadNodeSpec {
    /// Vehicle indices to degrade.
    pub indices: Vec<usize>,
    /// Fraction of the local data retained, in (0, 1].
    pub data_fraction: f64,
    /// Multiplier on the compute distribution, in (0, 1].
    pub compute_fraction: f64,
    /// Std of the Gaussian noise added element-wise to uploaded parameters.
    pub noise_std: f64,
}

impl Default for BadNodeSpec {
    fn default() -> Self {
        Self {
            indices: Vec::new(),
            data_fraction: 0.1,
            compute_fraction: 0.1,
            noise_std: 0.5,
        }
    }
}

impl BadNodeSpec {
    pub fn validate(&self, k: usize) -> Result<()> {
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidConfig(format!(
                "bad-node index {bad} out of range for k = {k}"
            )));
        }
        if !(0.0 < self.data_fraction && self.data_fraction <= 1.0) {
            return Err(Error::InvalidConfig("data_fraction must be in (0, 1]".into()));
        }
        if !(0.0 < self.compute_fraction && self.compute_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "compute_fraction must be in (0, 1]".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Upload corruption attached to a bad vehicle; applied to the trained local
/// model right before weighting and aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UploadNoise {
    pub std: f64,
}

impl UploadNoise {
    pub fn apply(&self, params: &mut ParamVector, seed: u64) {
        if self.std == 0.0 {
            return;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, self.std).expect("validated std");
        for v in params.values_mut() {
            *v += normal.sample(&mut rng);
        }
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::IdxTruncated {
            need: end,
            have: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().expect("4 bytes")))
}

/// Parses an IDX image container: magic, count, rows, cols, then pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(Error::IdxTruncated {
            need,
            have: bytes.len(),
        });
    }
    Ok((count, rows, cols, bytes[16..need].to_vec()))
}

/// Parses an IDX label container: magic, count, then one byte per label.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(Error::IdxTruncated {
            need,
            have: bytes.len(),
        });
    }
    Ok(bytes[8..need].to_vec())
}

/// Serializes images back into IDX bytes (the inverse of
/// [`parse_idx_images`]).
pub fn write_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an image/label IDX pair into a dataset with pixels scaled to
/// `[0, 1]`. The two files must agree on the sample count.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<ClientDataset> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    let (count, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels_u8 = parse_idx_labels(&label_bytes)?;
    if labels_u8.len() != count {
        return Err(Error::IdxCountMismatch {
            images: count,
            labels: labels_u8.len(),
        });
    }
    let dim = rows * cols;
    let features =
        Array2::from_shape_fn((count, dim), |(r, c)| pixels[r * dim + c] as f64 / 255.0);
    let labels = labels_u8.iter().map(|&l| l as usize).collect();
    ClientDataset::new(features, labels, 10)
}

/// Generates Gaussian blobs: class `0` centered at the origin, class `c > 0`
/// at `scale * e_{c-1}`. Labels cycle round-robin so any prefix is
/// class-balanced. Deterministic per seed.
pub fn generate_synthetic(
    classes: usize,
    dims: usize,
    per_class: usize,
    cluster_std: f64,
    seed: u64,
) -> Result<ClientDataset> {
    if classes < 2 || dims < 1 || classes > dims + 1 {
        return Err(Error::InvalidConfig(
            "synthetic blobs need classes >= 2, dims >= 1, classes <= dims + 1".into(),
        ));
    }
    let scale = 3.0;
    let total = classes * per_class;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cluster_std.max(0.0))
        .map_err(|_| Error::InvalidConfig("cluster_std must be finite and >= 0".into()))?;
    let mut features = Array2::zeros((total, dims));
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % classes;
        for d in 0..dims {
            let mean = if class > 0 && d == class - 1 { scale } else { 0.0 };
            features[[i, d]] =
                mean + if cluster_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        }
        labels.push(class);
    }
    ClientDataset::new(features, labels, classes)
}

/// Splits a pool into disjoint per-vehicle datasets of the requested sizes.
///
/// IID: one seeded shuffle, then contiguous cuts. Non-IID: the pool is
/// label-sorted and each vehicle receives two contiguous shards, with shard
/// order shuffled so which labels a vehicle sees is seed-dependent.
pub fn partition(
    pool: &ClientDataset,
    sizes: &[usize],
    iid: bool,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    let requested: usize = sizes.iter().sum();
    if requested > pool.len() {
        return Err(Error::PoolTooSmall {
            pool: pool.len(),
            requested,
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    if iid {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let mut offset = 0;
        return Ok(sizes
            .iter()
            .map(|&n| {
                let slice = &order[offset..offset + n];
                offset += n;
                pool.subset(slice)
            })
            .collect());
    }

    // label-sorted order, stable within a label
    let mut by_label: Vec<usize> = (0..pool.len()).collect();
    by_label.sort_by_key(|&i| pool.labels[i]);

    // two shard requests per vehicle, dealt in shuffled order
    let mut requests: Vec<(usize, usize)> = Vec::with_capacity(sizes.len() * 2);
    for (vehicle, &n) in sizes.iter().enumerate() {
        requests.push((vehicle, n.div_ceil(2)));
        requests.push((vehicle, n / 2));
    }
    requests.shuffle(&mut rng);

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); sizes.len()];
    let mut offset = 0;
    for (vehicle, n) in requests {
        assigned[vehicle].extend_from_slice(&by_label[offset..offset + n]);
        offset += n;
    }
    Ok(assigned.iter().map(|idx| pool.subset(idx)).collect())
}

/// Degrades the flagged vehicles in place: truncates their datasets to
/// `data_fraction`, scales their compute draw (and current value) by
/// `compute_fraction`, flags them, and returns the per-vehicle upload-noise
/// hooks (noise only on flagged vehicles).
pub fn apply_bad_node(
    fleet: &mut [VehicleState],
    datasets: &mut [ClientDataset],
    spec: &BadNodeSpec,
) -> Result<Vec<UploadNoise>> {
    spec.validate(fleet.len())?;
    let mut hooks = vec![UploadNoise { std: 0.0 }; fleet.len()];
    for &i in &spec.indices {
        let keep = ((datasets[i].len() as f64 * spec.data_fraction).round() as usize).max(1);
        datasets[i].truncate(keep);
        fleet[i].data_size = keep;
        fleet[i].compute_scale = spec.compute_fraction;
        fleet[i].compute_hz *= spec.compute_fraction;
        fleet[i].is_bad = true;
        hooks[i] = UploadNoise { std: spec.noise_std };
    }
    Ok(hooks)
}

/// Materializes the configured source into (train pool, test set).
pub fn load_source(source: &DatasetSource, seed: u64) -> Result<(ClientDataset, ClientDataset)> {
    source.validate()?;
    match source {
        DatasetSource::MnistIdx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            let mut train = load_mnist_idx(Path::new(train_images), Path::new(train_labels))?;
            let mut test = load_mnist_idx(Path::new(test_images), Path::new(test_labels))?;
            if let Some(limit) = train_limit {
                train.truncate(*limit);
            }
            if let Some(limit) = test_limit {
                test.truncate(*limit);
            }
            Ok((train, test))
        }
        DatasetSource::SyntheticBlobs {
            classes,
            dims,
            per_class_train,
            per_class_test,
            cluster_std,
        } => {
            let train = generate_synthetic(*classes, *dims, *per_class_train, *cluster_std, seed)?;
            let test = generate_synthetic(
                *classes,
                *dims,
                *per_class_test,
                *cluster_std,
                seeds::derive(seed, 0x7e57),
            )?;
            Ok((train, test))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_idx_pair() -> (Vec<u8>, Vec<u8>) {
        // 3 images of 2x2
        let pixels: Vec<u8> = vec![0, 64, 128, 255, 10, 20, 30, 40, 1, 2, 3, 4];
        let images = write_idx_images(2, 2, &pixels);
        let labels = write_idx_labels(&[7, 0, 9]);
        (images, labels)
    }

    #[test]
    fn idx_round_trip_reproduces_bytes() {
        let (images, labels) = tiny_idx_pair();
        let (count, rows, cols, pixels) = parse_idx_images(&images).unwrap();
        assert_eq!((count, rows, cols), (3, 2, 2));
        assert_eq!(write_idx_images(rows, cols, &pixels), images);
        let parsed = parse_idx_labels(&labels).unwrap();
        assert_eq!(write_idx_labels(&parsed), labels);
    }

    #[test]
    fn idx_rejects_corrupt_magic() {
        let (mut images, _) = tiny_idx_pair();
        images[3] = 0x99;
        assert!(matches!(
            parse_idx_images(&images),
            Err(Error::IdxMagic { .. })
        ));
    }

    #[test]
    fn idx_rejects_truncation() {
        let (images, _) = tiny_idx_pair();
        assert!(matches!(
            parse_idx_images(&images[..images.len() - 2]),
            Err(Error::IdxTruncated { .. })
        ));
        assert!(matches!(
            parse_idx_images(&images[..10]),
            Err(Error::IdxTruncated { .. })
        ));
    }

    #[test]
    fn idx_loader_scales_and_checks_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = tiny_idx_pair();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.feature_dim(), 4);
        assert!((ds.features[[0, 3]] - 1.0).abs() < 1e-12);
        assert!(ds.labels.iter().all(|&l| l < 10));

        // count mismatch is its own error
        let short = write_idx_labels(&[1, 2]);
        std::fs::write(&lp, &short).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lp),
            Err(Error::IdxCountMismatch { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(4, 8, 25, 0.3, 5).unwrap();
        let b = generate_synthetic(4, 8, 25, 0.3, 5).unwrap();
        assert_eq!(a, b);
        let mut hist = [0usize; 4];
        for &l in &a.labels {
            hist[l] += 1;
        }
        assert!(hist.iter().all(|&c| c == 25));
    }

    #[test]
    fn synthetic_zero_std_is_linearly_separable() {
        let ds = generate_synthetic(3, 4, 10, 0.0, 1).unwrap();
        // nearest-class-mean (a linear rule) classifies perfectly
        let mut means = vec![vec![0.0; 4]; 3];
        let mut counts = vec![0.0; 3];
        for (i, &l) in ds.labels.iter().enumerate() {
            for d in 0..4 {
                means[l][d] += ds.features[[i, d]];
            }
            counts[l] += 1.0;
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c;
            }
        }
        let correct = ds
            .labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| {
                let row: Vec<f64> = (0..4).map(|d| ds.features[[i, d]]).collect();
                let best = (0..3)
                    .min_by(|&a, &b| {
                        let da: f64 = (0..4).map(|d| (row[d] - means[a][d]).powi(2)).sum();
                        let db: f64 = (0..4).map(|d| (row[d] - means[b][d]).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == l
            })
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn partition_is_disjoint_and_size_exact() {
        let pool = generate_synthetic(2, 3, 10, 0.5, 3).unwrap(); // 20 samples
        for iid in [true, false] {
            let parts = partition(&pool, &[3, 2], iid, 1).unwrap();
            assert_eq!(parts[0].len(), 3);
            assert_eq!(parts[1].len(), 2);
        }
        assert!(matches!(
            partition(&pool, &[15, 10], true, 1),
            Err(Error::PoolTooSmall { .. })
        ));
    }

    #[test]
    fn iid_partition_tracks_pool_histogram() {
        let pool = generate_synthetic(10, 16, 200, 0.5, 9).unwrap(); // 2000 samples, balanced
        let parts = partition(&pool, &[500, 500], true, 4).unwrap();
        for part in &parts {
            let mut hist = [0usize; 10];
            for &l in &part.labels {
                hist[l] += 1;
            }
            for &c in &hist {
                // pool fraction is 0.1; allow a +-3 point band on the share
                let frac = c as f64 / part.len() as f64;
                assert!((frac - 0.1).abs() < 0.03, "class fraction {frac}");
            }
        }
    }

    #[test]
    fn non_iid_partition_limits_labels_per_vehicle() {
        // pure shards: sizes aligned with label blocks (100 per label)
        let pool = generate_synthetic(10, 16, 100, 0.5, 2).unwrap();
        let parts = partition(&pool, &[100, 100, 100, 100, 100], false, 8).unwrap();
        for part in &parts {
            let mut distinct: Vec<usize> = part.labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            assert!(distinct.len() <= 2, "vehicle sees {} labels", distinct.len());
        }
    }

    #[test]
    fn bad_node_identity_spec_is_noop() {
        let cfg = crate::env::EnvConfig::default();
        let mut fleet = crate::env::reset(&cfg, 1);
        let pool = generate_synthetic(2, 4, 100, 0.5, 1).unwrap();
        let sizes: Vec<usize> = fleet.iter().map(|_| 10).collect();
        let mut datasets = partition(&pool, &sizes, true, 2).unwrap();
        let before_fleet = fleet.clone();
        let before_data = datasets.clone();
        let spec = BadNodeSpec {
            indices: vec![3],
            data_fraction: 1.0,
            compute_fraction: 1.0,
            noise_std: 0.0,
        };
        let hooks = apply_bad_node(&mut fleet, &mut datasets, &spec).unwrap();
        assert_eq!(datasets, before_data);
        assert_eq!(fleet[3].data_size, before_fleet[3].data_size);
        assert_eq!(fleet[3].compute_hz, before_fleet[3].compute_hz);
        assert!(fleet[3].is_bad); // still flagged
        assert_eq!(hooks[3].std, 0.0);
    }

    #[test]
    fn bad_node_truncates_data() {
        let cfg = crate::env::EnvConfig::default();
        let mut fleet = crate::env::reset(&cfg, 1);
        let pool = generate_synthetic(10, 16, 600, 0.5, 1).unwrap();
        let sizes = vec![1000, 1000, 1000, 1000, 1000];
        fleet
            .iter_mut()
            .zip(&sizes)
            .for_each(|(v, &s)| v.data_size = s);
        let mut datasets = partition(&pool, &sizes, true, 2).unwrap();
        let spec = BadNodeSpec {
            indices: vec![4],
            data_fraction: 0.1,
            compute_fraction: 0.5,
            noise_std: 0.5,
        };
        let hooks = apply_bad_node(&mut fleet, &mut datasets, &spec).unwrap();
        assert_eq!(datasets[4].len(), 100);
        assert_eq!(fleet[4].data_size, 100);
        assert_eq!(fleet[4].compute_scale, 0.5);
        assert!(fleet[4].is_bad);
        assert_eq!(hooks[4].std, 0.5);
        // untouched vehicles keep everything
        assert_eq!(datasets[0].len(), 1000);
        assert_eq!(hooks[0].std, 0.0);
    }

    #[test]
    fn upload_noise_perturbs_params() {
        let spec = crate::nn::NetSpec::new(
            4,
            vec![(3, crate::nn::Activation::Relu)],
            (2, crate::nn::Activation::Identity),
        );
        let clean = crate::nn::init_params(&spec, 0);
        let mut noisy = clean.clone();
        UploadNoise { std: 1.0 }.apply(&mut noisy, 42);
        let diff = clean
            .values()
            .iter()
            .zip(noisy.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 0.0);

        let mut untouched = clean.clone();
        UploadNoise { std: 0.0 }.apply(&mut untouched, 42);
        assert_eq!(untouched, clean);
    }
}
