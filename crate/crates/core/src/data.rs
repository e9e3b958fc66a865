//! Dataset acquisition and export.
//!
//! The CIFAR-10 reader parses the standard binary archive (3073-byte
//! records, channel-planar R/G/B) and carves the train pool into train and
//! validation splits by seeded shuffle. The synthetic generator provides a
//! desk-scale stand-in with controllable class separation. Images and
//! feature maps export as binary PGM (P5), which round-trips bit-exactly
//! with no image dependencies.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, RngStream};
use crate::tensor::Tensor;

const CIFAR_DIM: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_DIM * CIFAR_DIM;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_PIXELS; // label byte + RGB planes
const CIFAR_CLASSES: usize = 10;

const STREAM_CIFAR_SPLIT: u64 = 0x30;
const STREAM_SYNTH_PATTERN: u64 = 0x31;
const STREAM_SYNTH_IMAGE: u64 = 0x32;
const STREAM_SUBSET: u64 = 0x33;

/// Train / validation / test index lists into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Images in (N, H, W, C) layout scaled to [0, 1], integer labels, and
/// disjoint split index lists.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub splits: Splits,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (H, W, C) of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self.images.shape() {
            [_, h, w, c] => (*h, *w, *c),
            _ => unreachable!("dataset images are always 4-D"),
        }
    }

    /// Copy the given rows into a (B, H, W, C) batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let (h, w, c) = self.image_shape();
        let row = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
        }
        Tensor::from_vec(&[indices.len(), h, w, c], data).expect("consistent dims")
    }

    /// One image as an (H, W, C) tensor.
    pub fn image(&self, index: usize) -> Tensor {
        let (h, w, c) = self.image_shape();
        let row = h * w * c;
        Tensor::from_vec(
            &[h, w, c],
            self.images.data()[index * row..(index + 1) * row].to_vec(),
        )
        .expect("consistent dims")
    }

    pub fn labels_for(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Structural checks: disjoint splits, labels in range, finite pixels.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.images.shape()[0] != n {
            return Err(Error::Data("image count != label count".into()));
        }
        if !self.images.all_finite() {
            return Err(Error::Data("non-finite pixel values".into()));
        }
        if self.labels.iter().any(|&l| l >= self.num_classes) {
            return Err(Error::Data("label out of range".into()));
        }
        let mut seen = vec![false; n];
        for idx in self
            .splits
            .train
            .iter()
            .chain(self.splits.val.iter())
            .chain(self.splits.test.iter())
        {
            if *idx >= n {
                return Err(Error::Data(format!("split index {idx} out of range")));
            }
            if seen[*idx] {
                return Err(Error::Data(format!("split index {idx} appears twice")));
            }
            seen[*idx] = true;
        }
        Ok(())
    }

    /// Seeded random sub-dataset with the requested split sizes; images are
    /// copied so the result stands alone.
    pub fn subsample(&self, train: usize, val: usize, test: usize, seed: u64) -> Result<Dataset> {
        let pick = |pool: &[usize], count: usize, tag: u64| -> Result<Vec<usize>> {
            if count > pool.len() {
                return Err(Error::Data(format!(
                    "subset wants {count} of {} available",
                    pool.len()
                )));
            }
            let mut order = pool.to_vec();
            RngStream::from_seed(derive_seed(seed, &[STREAM_SUBSET, tag])).shuffle(&mut order);
            order.truncate(count);
            Ok(order)
        };
        let train_idx = pick(&self.splits.train, train, 0)?;
        let val_idx = pick(&self.splits.val, val, 1)?;
        let test_idx = pick(&self.splits.test, test, 2)?;
        let all: Vec<usize> = train_idx
            .iter()
            .chain(val_idx.iter())
            .chain(test_idx.iter())
            .copied()
            .collect();
        let images = self.gather(&all);
        let labels = self.labels_for(&all);
        let splits = Splits {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..train + val + test).collect(),
        };
        let out = Dataset {
            images,
            labels,
            splits,
            num_classes: self.num_classes,
        };
        out.validate()?;
        Ok(out)
    }
}

/// Load the standard CIFAR-10 binary archive from a directory containing
/// `data_batch_1.bin` .. `data_batch_5.bin` and `test_batch.bin`.
///
/// Pixels map to [0, 1] by /255. The train pool splits 4:1 into train and
/// validation by a seeded shuffle (40k/10k at full scale); the provided test
/// batch is the test split.
pub fn load_cifar10(dir: &Path, seed: u64) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut pool_count = 0usize;
    for name in [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
    ] {
        pool_count += read_cifar_file(&dir.join(name), &mut images, &mut labels)?;
    }
    let test_count = read_cifar_file(&dir.join("test_batch.bin"), &mut images, &mut labels)?;

    let val_count = pool_count / 5;
    let mut pool: Vec<usize> = (0..pool_count).collect();
    RngStream::from_seed(derive_seed(seed, &[STREAM_CIFAR_SPLIT])).shuffle(&mut pool);
    let val: Vec<usize> = pool[..val_count].to_vec();
    let train: Vec<usize> = pool[val_count..].to_vec();
    let test: Vec<usize> = (pool_count..pool_count + test_count).collect();

    let n = pool_count + test_count;
    let dataset = Dataset {
        images: Tensor::from_vec(&[n, CIFAR_DIM, CIFAR_DIM, 3], images)?,
        labels,
        splits: Splits { train, val, test },
        num_classes: CIFAR_CLASSES,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn read_cifar_file(path: &Path, images: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<usize> {
    let bytes =
        fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{} has {} bytes, not a multiple of the {CIFAR_RECORD}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    let records = bytes.len() / CIFAR_RECORD;
    images.reserve(records * CIFAR_PIXELS * 3);
    for r in 0..records {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Data(format!(
                "{} record {r}: label byte {label} out of range",
                path.display()
            )));
        }
        labels.push(label);
        // Channel-planar R, G, B to interleaved HWC.
        let planes = &rec[1..];
        for p in 0..CIFAR_PIXELS {
            for ch in 0..3 {
                images.push(planes[ch * CIFAR_PIXELS + p] as f64 / 255.0);
            }
        }
    }
    Ok(records)
}

/// Deterministic class-conditional blob images.
///
/// Each class gets a fixed random +/-1 pattern; images are
/// `clamp(0.5 + amplitude * pattern + N(0, 0.15^2), 0, 1)` where the
/// amplitude grows with `separation` and saturates at 0.5. Splits are
/// balanced 70/15/15 per class.
pub fn synth_dataset(
    classes: usize,
    per_class: usize,
    hw: usize,
    channels: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Data("synthetic dataset needs >= 2 classes".into()));
    }
    if per_class == 0 || hw == 0 || channels == 0 {
        return Err(Error::Data("degenerate synthetic dataset size".into()));
    }
    if separation.is_nan() || separation < 0.0 {
        return Err(Error::Data("separation must be non-negative".into()));
    }
    let pixels = hw * hw * channels;
    let amplitude = if separation.is_infinite() {
        0.5
    } else {
        0.5 * separation / (1.0 + separation)
    };
    const NOISE_STD: f64 = 0.15;

    let patterns: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut rng =
                RngStream::from_seed(derive_seed(seed, &[STREAM_SYNTH_PATTERN, c as u64]));
            (0..pixels).map(|_| rng.sign()).collect()
        })
        .collect();

    let n = classes * per_class;
    let mut images = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for (class, pattern) in patterns.iter().enumerate() {
        for k in 0..per_class {
            let mut rng = RngStream::from_seed(derive_seed(
                seed,
                &[STREAM_SYNTH_IMAGE, class as u64, k as u64],
            ));
            for &sign in pattern.iter() {
                let v = 0.5 + amplitude * sign + NOISE_STD * rng.normal();
                images.push(v.clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }

    // Balanced 70/15/15 split inside every class.
    let train_per = (per_class * 70) / 100;
    let val_per = (per_class * 15) / 100;
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in 0..classes {
        let base = class * per_class;
        for k in 0..per_class {
            let idx = base + k;
            if k < train_per {
                splits.train.push(idx);
            } else if k < train_per + val_per {
                splits.val.push(idx);
            } else {
                splits.test.push(idx);
            }
        }
    }

    let dataset = Dataset {
        images: Tensor::from_vec(&[n, hw, hw, channels], images)?,
        labels,
        splits,
        num_classes: classes,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Write a 2-D map as binary PGM (P5, maxval 255), min-max normalized.
/// A constant map writes as all zeros.
pub fn export_pgm(map: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::InvalidArgument(format!(
                "export_pgm wants a 2-D map, got {other:?}"
            )))
        }
    };
    if !map.all_finite() {
        return Err(Error::InvalidArgument(
            "map contains non-finite values".into(),
        ));
    }
    let min = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let bytes: Vec<u8> = if range == 0.0 {
        vec![0u8; h * w]
    } else {
        map.data()
            .iter()
            .map(|v| ((v - min) / range * 255.0).round() as u8)
            .collect()
    };
    write_pgm_bytes(w, h, &bytes, path)
}

/// Write an image already scaled to [0, 1] as PGM with the absolute mapping
/// `byte = round(v * 255)`. Multi-channel images are written as the
/// per-pixel channel mean.
pub fn export_pgm_unit(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w, c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        [h, w] => (*h, *w, 1),
        other => {
            return Err(Error::InvalidArgument(format!(
                "export_pgm_unit wants (H, W, C), got {other:?}"
            )))
        }
    };
    let data = image.data();
    let bytes: Vec<u8> = (0..h * w)
        .map(|p| {
            let mut sum = 0.0;
            for ch in 0..c {
                sum += data[p * c + ch];
            }
            ((sum / c as f64).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    write_pgm_bytes(w, h, &bytes, path)
}

fn write_pgm_bytes(w: usize, h: usize, bytes: &[u8], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    write!(file, "P5\n{w} {h}\n255\n")?;
    file.write_all(bytes)?;
    Ok(())
}

/// Parse a binary PGM written by this module: returns (width, height, bytes).
pub fn parse_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = fs::read(path)?;
    let header_end = raw
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::Data("truncated PGM header".into()))?;
    let header = std::str::from_utf8(&raw[..header_end])
        .map_err(|_| Error::Data("invalid PGM header".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        return Err(Error::Data("not a P5 PGM".into()));
    }
    let dims: Vec<usize> = lines
        .next()
        .unwrap_or("")
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    if dims.len() != 2 {
        return Err(Error::Data("bad PGM dimensions".into()));
    }
    let (w, h) = (dims[0], dims[1]);
    let body = raw[header_end + 1..].to_vec();
    if body.len() != w * h {
        return Err(Error::Data(format!(
            "PGM body has {} bytes, expected {}",
            body.len(),
            w * h
        )));
    }
    Ok((w, h, body))
}

/// Render one image at several noise levels: for each sigma, write
/// `clamp(image + N(0, sigma^2), 0, 1)` as `<prefix>_sigma<s>.pgm`.
/// Returns the written paths, one per sigma.
pub fn export_perturbation_grid(
    image: &Tensor,
    sigmas: &[f64],
    rng: &RngStream,
    path_prefix: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(sigmas.len());
    for (i, &sigma) in sigmas.iter().enumerate() {
        if sigma < 0.0 {
            return Err(Error::NegativeSigma(sigma));
        }
        let mut perturbed = image.clone();
        if sigma > 0.0 {
            let mut stream = rng.child(&[i as u64]);
            for v in perturbed.data_mut().iter_mut() {
                *v = (*v + sigma * stream.normal()).clamp(0.0, 1.0);
            }
        }
        let path = path_prefix.with_file_name(format!(
            "{}_sigma{:.2}.pgm",
            path_prefix
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "perturbed".into()),
            sigma
        ));
        export_pgm_unit(&perturbed, &path)?;
        written.push(path);
    }
    Ok(written)
}
