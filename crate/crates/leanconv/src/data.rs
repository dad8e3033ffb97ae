//! Datasets: CIFAR-10 binary batches, a deterministic synthetic task, and the
//! flip + pad-and-crop augmentation used during training.

use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Layout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: file length {len} is not a multiple of the {record} byte record size")]
    BadFileSize { path: String, len: u64, record: u64 },
    #[error("{path}: record {index} has label {label}, outside 0..=9")]
    BadLabel { path: String, index: usize, label: u8 },
    #[error("dataset is empty")]
    Empty,
}

/// Labeled image collection with a train/validation split. Images are stored
/// batch-major; labels are class indices.
#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub train_images: FeatureMap<S>,
    pub train_labels: Vec<usize>,
    pub val_images: FeatureMap<S>,
    pub val_labels: Vec<usize>,
    pub n_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn val_len(&self) -> usize {
        self.val_labels.len()
    }

    /// Copy the given train samples into a contiguous mini-batch.
    pub fn gather_train(&self, indices: &[usize]) -> (FeatureMap<S>, Vec<usize>) {
        (gather(&self.train_images, indices), indices.iter().map(|&i| self.train_labels[i]).collect())
    }

    pub fn gather_val(&self, indices: &[usize]) -> (FeatureMap<S>, Vec<usize>) {
        (gather(&self.val_images, indices), indices.iter().map(|&i| self.val_labels[i]).collect())
    }
}

fn gather<S: Scalar>(pool: &FeatureMap<S>, indices: &[usize]) -> FeatureMap<S> {
    let (c, h, w) = (pool.channels(), pool.height(), pool.width());
    let plane = pool.plane_len();
    let mut data = Vec::with_capacity(indices.len() * c * plane);
    for &i in indices {
        for ch in 0..c {
            data.extend_from_slice(pool.plane(i, ch));
        }
    }
    FeatureMap::from_vec(indices.len(), c, h, w, pool.layout(), data).expect("gather shape")
}

const CIFAR_DIM: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_DIM * CIFAR_DIM;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

fn read_cifar_file<S: Scalar>(
    path: &Path,
    pixels: &mut Vec<S>,
    labels: &mut Vec<usize>,
    limit: Option<usize>,
) -> Result<(), DataError> {
    let display = path.display().to_string();
    let io = |source| DataError::Io { path: display.clone(), source };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io)?
        .read_to_end(&mut bytes)
        .map_err(|source| DataError::Io { path: display.clone(), source })?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::BadFileSize {
            path: display,
            len: bytes.len() as u64,
            record: CIFAR_RECORD as u64,
        });
    }
    let scale = 1.0 / 255.0;
    for (index, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if let Some(limit) = limit {
            if labels.len() >= limit {
                break;
            }
        }
        let label = rec[0];
        if label > 9 {
            return Err(DataError::BadLabel { path: display, index, label });
        }
        labels.push(label as usize);
        pixels.extend(rec[1..].iter().map(|&b| S::from_f64(b as f64 * scale)));
    }
    Ok(())
}

/// Load the CIFAR-10 binary batches from `dir`. Per-channel mean/std
/// normalization is computed on the train split and applied to both splits.
/// `subset` limits the train split to its first N records and the test split
/// to N/5 (at least 100) for desk-scale runs.
pub fn load_cifar10<S: Scalar>(dir: &Path, subset: Option<usize>) -> Result<Dataset<S>, DataError> {
    let mut train_pixels = Vec::new();
    let mut train_labels = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        read_cifar_file(&dir.join(name), &mut train_pixels, &mut train_labels, subset)?;
    }
    let val_limit = subset.map(|n| (n / 5).max(100));
    let mut val_pixels = Vec::new();
    let mut val_labels = Vec::new();
    read_cifar_file(&dir.join(CIFAR_TEST_FILE), &mut val_pixels, &mut val_labels, val_limit)?;
    if train_labels.is_empty() {
        return Err(DataError::Empty);
    }

    let mut train_images = FeatureMap::from_vec(
        train_labels.len(),
        3,
        CIFAR_DIM,
        CIFAR_DIM,
        Layout::WidthFastest,
        train_pixels,
    )
    .expect("cifar train shape");
    let mut val_images = FeatureMap::from_vec(
        val_labels.len(),
        3,
        CIFAR_DIM,
        CIFAR_DIM,
        Layout::WidthFastest,
        val_pixels,
    )
    .expect("cifar test shape");

    let stats = channel_stats(&train_images);
    normalize(&mut train_images, &stats);
    normalize(&mut val_images, &stats);
    Ok(Dataset { train_images, train_labels, val_images, val_labels, n_classes: 10 })
}

/// Per-channel `(mean, std)` over every sample and pixel.
pub fn channel_stats<S: Scalar>(x: &FeatureMap<S>) -> Vec<(f64, f64)> {
    let n = (x.batch() * x.plane_len()) as f64;
    (0..x.channels())
        .map(|c| {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for b in 0..x.batch() {
                for &v in x.plane(b, c) {
                    let v = v.to_f64();
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            (mean, var.sqrt().max(1e-8))
        })
        .collect()
}

fn normalize<S: Scalar>(x: &mut FeatureMap<S>, stats: &[(f64, f64)]) {
    let scaled: Vec<(S, S)> = stats
        .iter()
        .map(|&(m, s)| (S::from_f64(m), S::from_f64(1.0 / s)))
        .collect();
    let (batch, channels, plane) = (x.batch(), x.channels(), x.plane_len());
    let data = x.data_mut();
    for b in 0..batch {
        for c in 0..channels {
            let (m, inv) = scaled[c];
            for v in &mut data[(b * channels + c) * plane..(b * channels + c + 1) * plane] {
                *v = (*v - m) * inv;
            }
        }
    }
}

/// Deterministic synthetic classification task. Class `k` is an oriented
/// sinusoid with class-specific orientation and frequency; each sample draws
/// a random phase and a random global sign, so raw-pixel class means vanish
/// and a linear probe carries no signal, while local derivative structure
/// separates the classes for small convolutional networks. 80/20 train/val
/// split, balanced within one sample per class.
pub fn make_synthetic<S: Scalar>(
    n_classes: usize,
    n_samples: usize,
    size: usize,
    seed: u64,
) -> Dataset<S> {
    assert!(n_classes >= 2 && n_samples >= n_classes && size >= 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels: Vec<S> = Vec::with_capacity(n_samples * size * size);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let k = i % n_classes; // balanced round-robin
        let theta = std::f64::consts::PI * k as f64 / n_classes as f64;
        let freq = 2.0 + 1.5 * k as f64;
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * ct + y as f64 * st) / size as f64;
                let noise: f64 = rng.gen_range(-0.3..0.3);
                let v = sign * (std::f64::consts::TAU * freq * u + phase).sin() + noise;
                pixels.push(S::from_f64(v));
            }
        }
        labels.push(k);
    }
    let images =
        FeatureMap::from_vec(n_samples, 1, size, size, Layout::WidthFastest, pixels).unwrap();
    // interleaved labels stay balanced under a prefix split
    let n_train = (n_samples * 4 / 5).max(1);
    let train_idx: Vec<usize> = (0..n_train).collect();
    let val_idx: Vec<usize> = (n_train..n_samples).collect();
    Dataset {
        train_images: gather(&images, &train_idx),
        train_labels: labels[..n_train].to_vec(),
        val_images: gather(&images, &val_idx),
        val_labels: labels[n_train..].to_vec(),
        n_classes,
    }
}

/// Random horizontal flip plus 4-pixel-pad random crop, per sample.
pub fn augment_flip_crop<S: Scalar, R: Rng + ?Sized>(
    x: &FeatureMap<S>,
    rng: &mut R,
) -> FeatureMap<S> {
    const PAD: isize = 4;
    let (h, w) = (x.height(), x.width());
    let mut out = FeatureMap::zeros_with_layout(x.batch(), x.channels(), h, w, x.layout());
    for b in 0..x.batch() {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(-PAD..=PAD);
        let dx = rng.gen_range(-PAD..=PAD);
        for c in 0..x.channels() {
            for y in 0..h {
                for xx in 0..w {
                    let sy = y as isize + dy;
                    let sx = xx as isize + dx;
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        continue; // zero padding
                    }
                    let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                    out.set(b, c, y, xx, x.get(b, c, sy as usize, sx));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_fake_cifar(dir: &Path, records_per_file: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
            let mut bytes = Vec::with_capacity(records_per_file * CIFAR_RECORD);
            for _ in 0..records_per_file {
                bytes.push(rng.gen_range(0..10u8));
                for _ in 0..CIFAR_RECORD - 1 {
                    bytes.push(rng.gen());
                }
            }
            std::fs::File::create(dir.join(name)).unwrap().write_all(&bytes).unwrap();
        }
    }

    #[test]
    fn cifar_loader_shapes_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path(), 40, 1);
        let ds: Dataset<f64> = load_cifar10(dir.path(), None).unwrap();
        assert_eq!(ds.train_len(), 200);
        assert_eq!(ds.val_len(), 40);
        assert_eq!(ds.train_images.channels(), 3);
        assert_eq!(ds.train_images.height(), 32);
        assert!(ds.train_labels.iter().all(|&l| l < 10));
        // train channels are standardized
        for (mean, std) in channel_stats(&ds.train_images) {
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-6, "std {std}");
        }
    }

    #[test]
    fn cifar_subset_limits_both_splits() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path(), 400, 2);
        let ds: Dataset<f32> = load_cifar10(dir.path(), Some(600)).unwrap();
        assert_eq!(ds.train_len(), 600);
        assert_eq!(ds.val_len(), 120);
    }

    #[test]
    fn cifar_rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path(), 10, 3);
        let path = dir.path().join(CIFAR_TRAIN_FILES[2]);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_cifar10::<f64>(dir.path(), None),
            Err(DataError::BadFileSize { .. })
        ));
    }

    #[test]
    fn cifar_rejects_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path(), 10, 4);
        let path = dir.path().join(CIFAR_TEST_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[CIFAR_RECORD] = 200; // label byte of the second record
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_cifar10::<f64>(dir.path(), None),
            Err(DataError::BadLabel { label: 200, index: 1, .. })
        ));
    }

    #[test]
    fn cifar_missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10::<f64>(dir.path(), None), Err(DataError::Io { .. })));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a: Dataset<f64> = make_synthetic(4, 200, 16, 7);
        let b: Dataset<f64> = make_synthetic(4, 200, 16, 7);
        assert_eq!(a.train_images.data(), b.train_images.data());
        assert_eq!(a.train_labels, b.train_labels);
        assert_eq!(a.val_images.data(), b.val_images.data());
        assert_eq!(a.train_len() + a.val_len(), 200);

        let mut hist = [0usize; 4];
        for &l in a.train_labels.iter().chain(a.val_labels.iter()) {
            hist[l] += 1;
        }
        let (min, max) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(max - min <= 1, "class histogram {hist:?}");
    }

    #[test]
    fn synthetic_class_means_carry_no_linear_signal() {
        // With random phase and sign, per-class pixel means stay near zero, so
        // no linear functional of the raw pixels separates the classes well.
        let ds: Dataset<f64> = make_synthetic(4, 2000, 12, 11);
        let plane = ds.train_images.plane_len();
        let mut mean = vec![[0.0f64; 4]; plane];
        let mut count = [0usize; 4];
        for b in 0..ds.train_len() {
            let k = ds.train_labels[b];
            count[k] += 1;
            for (p, &v) in ds.train_images.plane(b, 0).iter().enumerate() {
                mean[p][k] += v;
            }
        }
        for p in 0..plane {
            for k in 0..4 {
                let m = mean[p][k] / count[k] as f64;
                assert!(m.abs() < 0.15, "pixel {p} class {k} mean {m}");
            }
        }
    }

    #[test]
    fn gather_preserves_samples() {
        let ds: Dataset<f64> = make_synthetic(2, 20, 8, 3);
        let (batch, labels) = ds.gather_train(&[3, 0, 7]);
        assert_eq!(batch.batch(), 3);
        assert_eq!(labels, vec![ds.train_labels[3], ds.train_labels[0], ds.train_labels[7]]);
        assert_eq!(batch.plane(1, 0), ds.train_images.plane(0, 0));
    }

    #[test]
    fn augmentation_preserves_shape_and_is_identity_free() {
        let ds: Dataset<f64> = make_synthetic(2, 10, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let aug = augment_flip_crop(&ds.train_images, &mut rng);
        assert!(aug.same_shape(&ds.train_images));
        // with a zero shift and no flip the sample is unchanged; force that by
        // checking that augmentation only ever permutes-or-zeros pixels
        let orig: std::collections::BTreeSet<u64> =
            ds.train_images.plane(0, 0).iter().map(|v| v.to_bits()).collect();
        for &v in aug.plane(0, 0) {
            assert!(v == 0.0 || orig.contains(&v.to_bits()));
        }
    }
}
