//! Dataset ingestion (IDX files) and synthetic classification data.

use crate::error::{Error, Result};
use crate::Feature64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

/// Labeled images with one-hot labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Feature64>,
    /// One-hot vectors of length `classes`; each sums to 1 exactly.
    pub labels: Vec<Vec<f64>>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Shape("image and label counts do not match".into()));
        }
        let dims = self
            .images
            .first()
            .map(|f| f.dims())
            .ok_or_else(|| Error::Shape("dataset is empty".into()))?;
        if self.images.iter().any(|f| f.dims() != dims) {
            return Err(Error::Shape("image dimensions are not uniform".into()));
        }
        for l in &self.labels {
            if l.len() != self.classes || l.iter().sum::<f64>() != 1.0 {
                return Err(Error::Shape(
                    "labels must be one-hot vectors summing to 1".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn label_index(&self, i: usize) -> usize {
        self.labels[i]
            .iter()
            .position(|v| *v == 1.0)
            .expect("one-hot label")
    }
}

/// Train/test split.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

// ---------------------------------------------------------------------------
// IDX ingestion
// ---------------------------------------------------------------------------

fn read_idx_header<R: Read>(r: &mut R) -> Result<(u8, Vec<usize>)> {
    let mut head = [0u8; 4];
    r.read_exact(&mut head)?;
    if head[0] != 0 || head[1] != 0 {
        return Err(Error::Format("bad idx magic".into()));
    }
    let dtype = head[2];
    let ndim = head[3] as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut buf = [0u8; 4];
    for _ in 0..ndim {
        r.read_exact(&mut buf)?;
        dims.push(u32::from_be_bytes(buf) as usize);
    }
    Ok((dtype, dims))
}

/// Read an idx image file (unsigned-byte payload, 3 or 4 dimensions) into
/// features scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Vec<Feature64>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dtype, dims) = read_idx_header(&mut r)?;
    if dtype != 0x08 {
        return Err(Error::Format(format!(
            "unsupported idx dtype 0x{dtype:02x} (only unsigned byte)"
        )));
    }
    let (count, h, w, d) = match dims.as_slice() {
        [n, h, w] => (*n, *h, *w, 1usize),
        [n, h, w, d] => (*n, *h, *w, *d),
        _ => {
            return Err(Error::Format(format!(
                "expected 3 or 4 idx dimensions, got {}",
                dims.len()
            )))
        }
    };
    let mut raw = vec![0u8; count * h * w * d];
    r.read_exact(&mut raw)?;
    let mut images = Vec::with_capacity(count);
    for img in 0..count {
        let base = img * h * w * d;
        // idx stores row-major with channel last; features are channel-major
        let feat = Feature64::from_fn(h, w, d, |i, j, k| {
            raw[base + (i * w + j) * d + k] as f64 / 255.0
        });
        images.push(feat);
    }
    Ok(images)
}

/// Read an idx label file (one unsigned byte per example) into one-hot
/// vectors.
pub fn read_idx_labels(path: &Path, classes: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dtype, dims) = read_idx_header(&mut r)?;
    if dtype != 0x08 || dims.len() != 1 {
        return Err(Error::Format(
            "label file must be a rank-1 unsigned-byte idx file".into(),
        ));
    }
    let mut raw = vec![0u8; dims[0]];
    r.read_exact(&mut raw)?;
    raw.iter()
        .map(|cls| {
            let c = *cls as usize;
            if c >= classes {
                return Err(Error::Format(format!(
                    "label {c} out of range for {classes} classes"
                )));
            }
            let mut one_hot = vec![0.0; classes];
            one_hot[c] = 1.0;
            Ok(one_hot)
        })
        .collect()
}

/// Load paired idx image/label files.
pub fn load_idx_dataset(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let ds = Dataset {
        images: read_idx_images(images)?,
        labels: read_idx_labels(labels, classes)?,
        classes,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Self-describing generator configuration for synthetic blob images: class
/// `k` is a sum of `k + 1` Gaussian bumps at fixed anchor positions (with
/// per-image jitter) plus uniform noise. Classes therefore differ in blob
/// count — a statistic that survives translation-equivariant convolutions
/// and global average pooling — not merely in position.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Amplitude of the additive uniform noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_depth() -> usize {
    1
}

fn default_noise() -> f64 {
    0.2
}

/// Relative anchor positions for the blobs, shared across classes.
const BLOB_ANCHORS: [(f64, f64); 6] = [
    (0.28, 0.28),
    (0.72, 0.72),
    (0.28, 0.72),
    (0.72, 0.28),
    (0.5, 0.5),
    (0.5, 0.1),
];

impl SyntheticSpec {
    fn sample(&self, class: usize, rng: &mut ChaCha8Rng) -> Feature64 {
        let spread = (self.height.min(self.width) as f64 / 6.0).max(0.8);
        let centers: Vec<(f64, f64, f64)> = BLOB_ANCHORS
            .iter()
            .take(class + 1)
            .map(|(ri, rj)| {
                let amp = 0.8 + 0.4 * rng.random::<f64>();
                let di = (rng.random::<f64>() - 0.5) * 0.8;
                let dj = (rng.random::<f64>() - 0.5) * 0.8;
                (
                    ri * (self.height as f64 - 1.0) + di,
                    rj * (self.width as f64 - 1.0) + dj,
                    amp,
                )
            })
            .collect();
        let noise = self.noise;
        Feature64::from_fn(self.height, self.width, self.depth, |i, j, _| {
            let mut v = noise * rng.random::<f64>();
            for (ci, cj, amp) in &centers {
                let dist2 = ((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2))
                    / (2.0 * spread * spread);
                v += amp * (-dist2).exp();
            }
            v
        })
    }

    /// Generate the split deterministically from the seed.
    pub fn generate(&self) -> Result<SplitDataset> {
        if self.classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config(
                "synthetic dataset needs at least one class and one example per split".into(),
            ));
        }
        if self.classes > BLOB_ANCHORS.len() {
            return Err(Error::Config(format!(
                "synthetic generator supports at most {} classes",
                BLOB_ANCHORS.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut gen_split = |per_class: usize| -> Dataset {
            let mut images = Vec::with_capacity(per_class * self.classes);
            let mut labels = Vec::with_capacity(per_class * self.classes);
            for _ in 0..per_class {
                for class in 0..self.classes {
                    images.push(self.sample(class, &mut rng));
                    let mut one_hot = vec![0.0; self.classes];
                    one_hot[class] = 1.0;
                    labels.push(one_hot);
                }
            }
            Dataset {
                images,
                labels,
                classes: self.classes,
            }
        };
        let train = gen_split(self.train_per_class);
        let test = gen_split(self.test_per_class);
        Ok(SplitDataset { train, test })
    }
}

/// Per-channel statistics of a normalization pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// In-place per-channel mean/std normalization, with statistics computed on
/// the training split and applied to both. This is a plain preprocessing
/// convenience, not part of the layer algebra.
pub fn normalize_mean_std(split: &mut SplitDataset) -> Result<NormStats> {
    split.train.validate()?;
    let d = split.train.images[0].depth();
    let mut mean = vec![0.0f64; d];
    let mut count = 0usize;
    for img in &split.train.images {
        for (k, m) in mean.iter_mut().enumerate() {
            for v in img.channel_data(k) {
                *m += v;
            }
        }
        count += img.height() * img.width();
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0f64; d];
    for img in &split.train.images {
        for (k, s) in var.iter_mut().enumerate() {
            let m = mean[k];
            for v in img.channel_data(k) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(1e-12))
        .collect();
    for img in split
        .train
        .images
        .iter_mut()
        .chain(split.test.images.iter_mut())
    {
        for k in 0..d {
            let (m, s) = (mean[k], std[k]);
            for v in img.channel_data_mut(k) {
                *v = (*v - m) / s;
            }
        }
    }
    Ok(NormStats { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SyntheticSpec {
            classes: 2,
            height: 8,
            width: 8,
            depth: 1,
            train_per_class: 10,
            test_per_class: 5,
            noise: 0.2,
            seed: 42,
        };
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a.train.len(), 20);
        assert_eq!(a.test.len(), 10);
        a.train.validate().unwrap();
        for (x, y) in a.train.images.iter().zip(&b.train.images) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn classes_are_separable_by_blob_mass() {
        let spec = SyntheticSpec {
            classes: 2,
            height: 8,
            width: 8,
            depth: 1,
            train_per_class: 50,
            test_per_class: 1,
            noise: 0.1,
            seed: 7,
        };
        let ds = spec.generate().unwrap().train;
        // class 1 carries two bumps, class 0 carries one: total mass
        // separates them with a clear margin
        let mut max_c0 = f64::NEG_INFINITY;
        let mut min_c1 = f64::INFINITY;
        for (img, label) in ds.images.iter().zip(&ds.labels) {
            let mass: f64 = img.as_slice().iter().sum();
            if label[0] == 1.0 {
                max_c0 = max_c0.max(mass);
            } else {
                min_c1 = min_c1.min(mass);
            }
        }
        assert!(min_c1 > max_c0, "class masses overlap: {max_c0} vs {min_c1}");
    }

    #[test]
    fn too_many_classes_rejected() {
        let spec = SyntheticSpec {
            classes: 9,
            height: 8,
            width: 8,
            depth: 1,
            train_per_class: 1,
            test_per_class: 1,
            noise: 0.1,
            seed: 7,
        };
        assert!(spec.generate().is_err());
    }

    #[test]
    fn idx_round_trip() {
        let dir = std::env::temp_dir().join("stbl-idx-test");
        std::fs::create_dir_all(&dir).unwrap();
        let img_path = dir.join("images.idx");
        let lbl_path = dir.join("labels.idx");

        let mut f = std::fs::File::create(&img_path).unwrap();
        // 2 images of 2x3, ubyte
        f.write_all(&[0, 0, 0x08, 3]).unwrap();
        for d in [2u32, 2, 3] {
            f.write_all(&d.to_be_bytes()).unwrap();
        }
        f.write_all(&[0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 0])
            .unwrap();
        drop(f);

        let mut f = std::fs::File::create(&lbl_path).unwrap();
        f.write_all(&[0, 0, 0x08, 1]).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&[1, 0]).unwrap();
        drop(f);

        let ds = load_idx_dataset(&img_path, &lbl_path, 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images[0].dims(), (2, 3, 1));
        assert_eq!(ds.images[0].get(0, 1, 0), 0.2);
        assert_eq!(ds.images[1].get(0, 0, 0), 1.0);
        assert_eq!(ds.labels[0], vec![0.0, 1.0]);
        assert_eq!(ds.label_index(0), 1);

        let bad = read_idx_labels(&lbl_path, 1);
        assert!(bad.is_err());
    }

    #[test]
    fn normalization_centers_training_channels() {
        let spec = SyntheticSpec {
            classes: 2,
            height: 6,
            width: 6,
            depth: 1,
            train_per_class: 20,
            test_per_class: 5,
            noise: 0.3,
            seed: 3,
        };
        let mut split = spec.generate().unwrap();
        let stats = normalize_mean_std(&mut split).unwrap();
        assert!(stats.std[0] > 0.0);
        let mut total = 0.0;
        let mut count = 0usize;
        for img in &split.train.images {
            total += img.channel_data(0).iter().sum::<f64>();
            count += img.len();
        }
        assert!((total / count as f64).abs() < 1e-10);
    }
}
