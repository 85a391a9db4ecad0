//! Dataset ingestion: big-endian IDX files, raw CIFAR-style binary records,
//! a synthetic blob generator, and the correctly-classified-prefix split
//! used to build attack evaluation sets. All pixels are normalized to
//! [-0.5, 0.5] as v/255 - 0.5 in one pass.

use crate::error::{Error, Result};
use crate::models::LabelModel;
use crate::tensor::Tensor;
use crate::{exec, seeding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs;
use std::path::Path;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, class_count: usize, name: &str) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|t| t.shape() != first.shape()) {
                return Err(Error::invalid("non-uniform image shapes".to_string()));
            }
        }
        if labels.iter().any(|&l| l >= class_count) {
            return Err(Error::invalid("label out of class range".to_string()));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
            name: name.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images[0].shape();
        (s[0], s[1], s[2])
    }

    pub fn take(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
            name: self.name.clone(),
        }
    }

    pub fn skip(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            images: self.images[n..].to_vec(),
            labels: self.labels[n..].to_vec(),
            class_count: self.class_count,
            name: self.name.clone(),
        }
    }
}

/// Which transform distribution a profile samples for protected layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TransformDist {
    /// A = identity; a fixed fraction of bias entries drawn U(lo,hi),
    /// the rest zero; bias shared across channels.
    IdentityWithSparseBias { fraction: f64, lo: f64, hi: f64 },
    /// Dense Gaussian A and b, shared across channels.
    DenseGaussian { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileKind {
    FashionLike,
    CifarLike,
    Synthetic,
}

/// Per-attack default parameters (the Table-5 column of a dataset).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackDefaults {
    pub fgsm_eps: f64,
    pub iter_step: f64,
    pub iterations: usize,
    pub mim_decay: f64,
    pub pgd_r_init: f64,
    pub penalty_iterations: usize,
    pub binsearch_steps: usize,
    pub ead_beta: f64,
}

#[derive(Clone, Debug)]
pub struct DatasetProfile {
    pub kind: ProfileKind,
    pub transform_dist: TransformDist,
    pub attack: AttackDefaults,
    /// Resize targets for the 8-layer defense, as numerators over base 32.
    pub resize_ratios: [usize; 8],
    /// Mixed black-box augmentation rounds N and step λ.
    pub blackbox_rounds: usize,
    pub blackbox_lambda: f64,
}

pub const RESIZE_BASE: usize = 32;
const RESIZE_SET: [usize; 8] = [32, 40, 48, 64, 72, 80, 96, 104];

impl DatasetProfile {
    pub fn fashion_like() -> Self {
        DatasetProfile {
            kind: ProfileKind::FashionLike,
            transform_dist: TransformDist::DenseGaussian { sigma: 0.1 },
            attack: AttackDefaults {
                fgsm_eps: 0.15,
                iter_step: 0.015,
                iterations: 10,
                mim_decay: 1.0,
                pgd_r_init: 0.031,
                penalty_iterations: 1000,
                binsearch_steps: 10,
                ead_beta: 0.01,
            },
            resize_ratios: RESIZE_SET,
            blackbox_rounds: 4,
            blackbox_lambda: 0.1,
        }
    }

    pub fn cifar_like() -> Self {
        DatasetProfile {
            kind: ProfileKind::CifarLike,
            transform_dist: TransformDist::IdentityWithSparseBias {
                fraction: 0.35,
                lo: -0.5,
                hi: 0.5,
            },
            attack: AttackDefaults {
                fgsm_eps: 0.05,
                iter_step: 0.005,
                iterations: 10,
                mim_decay: 1.0,
                pgd_r_init: 0.031,
                penalty_iterations: 1000,
                binsearch_steps: 10,
                ead_beta: 0.01,
            },
            resize_ratios: RESIZE_SET,
            blackbox_rounds: 4,
            blackbox_lambda: 0.1,
        }
    }

    /// Desk-scale stand-in profile: gentle identity-plus-bias transforms,
    /// enlarged attack budgets (the well-separated blob classes need a
    /// bigger perturbation radius before transfer attacks bite), and two
    /// augmentation rounds.
    pub fn synthetic() -> Self {
        DatasetProfile {
            kind: ProfileKind::Synthetic,
            transform_dist: TransformDist::IdentityWithSparseBias {
                fraction: 0.35,
                lo: -0.5,
                hi: 0.5,
            },
            attack: AttackDefaults {
                fgsm_eps: 0.4,
                iter_step: 0.04,
                iterations: 10,
                mim_decay: 1.0,
                pgd_r_init: 0.031,
                penalty_iterations: 1000,
                binsearch_steps: 10,
                ead_beta: 0.01,
            },
            resize_ratios: RESIZE_SET,
            blackbox_rounds: 2,
            blackbox_lambda: 0.1,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fashion-like" => Ok(Self::fashion_like()),
            "cifar-like" => Ok(Self::cifar_like()),
            "synthetic" => Ok(Self::synthetic()),
            other => Err(Error::config(format!("unknown dataset profile '{}'", other))),
        }
    }

    /// Scales the paper's resize set proportionally to the input side,
    /// rounding to integers.
    pub fn resize_targets(&self, side: usize) -> Vec<usize> {
        self.resize_ratios
            .iter()
            .map(|&r| ((side * r) as f64 / RESIZE_BASE as f64).round() as usize)
            .collect()
    }
}

fn normalize_byte(b: u8) -> f64 {
    b as f64 / 255.0 - 0.5
}

fn read_be_u32(bytes: &[u8], off: usize) -> Result<u32> {
    if off + 4 > bytes.len() {
        return Err(Error::Parse {
            offset: off,
            message: "truncated header".to_string(),
        });
    }
    let mut b = [0u8; 4];
    b.copy_from_slice(&bytes[off..off + 4]);
    Ok(u32::from_be_bytes(b))
}

/// Big-endian IDX pair (image magic 0x00000803, label magic 0x00000801).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let ib = fs::read(images_path)?;
    let lb = fs::read(labels_path)?;
    let magic = read_be_u32(&ib, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad image magic {:#010x}, expected {:#010x}", magic, IDX_IMAGE_MAGIC),
        });
    }
    let count = read_be_u32(&ib, 4)? as usize;
    let rows = read_be_u32(&ib, 8)? as usize;
    let cols = read_be_u32(&ib, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if ib.len() != expected {
        return Err(Error::Parse {
            offset: ib.len().min(expected),
            message: format!("image payload length {} != expected {}", ib.len(), expected),
        });
    }
    let lmagic = read_be_u32(&lb, 0)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad label magic {:#010x}, expected {:#010x}", lmagic, IDX_LABEL_MAGIC),
        });
    }
    let lcount = read_be_u32(&lb, 4)? as usize;
    if lcount != count {
        return Err(Error::Parse {
            offset: 4,
            message: format!("label count {} != image count {}", lcount, count),
        });
    }
    if lb.len() != 8 + count {
        return Err(Error::Parse {
            offset: lb.len().min(8 + count),
            message: "truncated label payload".to_string(),
        });
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut max_label = 0usize;
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let data: Vec<f64> = ib[start..start + rows * cols]
            .iter()
            .map(|&b| normalize_byte(b))
            .collect();
        images.push(Tensor::new(vec![rows, cols, 1], data)?);
        let l = lb[8 + i] as usize;
        max_label = max_label.max(l);
        labels.push(l);
    }
    LabeledDataset::new(images, labels, max_label.max(9) + 1, "idx")
}

/// Raw binary records of 1 label byte + 3072 channel-major 32x32x3 pixels.
pub fn load_cifar_binary(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("file length {} not divisible by {}", bytes.len(), CIFAR_RECORD),
        });
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        labels.push(rec[0] as usize);
        let mut data = vec![0.0; 32 * 32 * 3];
        for ch in 0..3 {
            for p in 0..1024 {
                data[p * 3 + ch] = normalize_byte(rec[1 + ch * 1024 + p]);
            }
        }
        images.push(Tensor::new(vec![32, 32, 3], data)?);
    }
    LabeledDataset::new(images, labels, 10, "cifar-binary")
}

/// Synthetic stand-in dataset: one bright disc per class at a
/// class-dependent position plus Gaussian noise. Deterministic per seed;
/// classes interleave round-robin in sample order.
pub fn synth_blobs(k: usize, n_per_class: usize, image_side: usize, seed: u64) -> Result<LabeledDataset> {
    if k < 2 {
        return Err(Error::invalid("synth_blobs requires k >= 2".to_string()));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be >= 1".to_string()));
    }
    if image_side < 4 {
        return Err(Error::invalid("image_side must be >= 4".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, 0xb10b));
    let noise = Normal::new(0.0, 0.05).unwrap();
    let center = (image_side as f64 - 1.0) / 2.0;
    let orbit = image_side as f64 * 0.30;
    let disc_r = image_side as f64 * 0.16;
    let total = k * n_per_class;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % k;
        let angle = 2.0 * std::f64::consts::PI * class as f64 / k as f64;
        let cx = center + orbit * angle.cos() + rng.gen_range(-0.5..0.5);
        let cy = center + orbit * angle.sin() + rng.gen_range(-0.5..0.5);
        let mut data = vec![0.0; image_side * image_side];
        for y in 0..image_side {
            for x in 0..image_side {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                // smooth disc edge over one pixel
                let bright = 0.9 * (1.0 / (1.0 + ((d - disc_r) * 2.0).exp()));
                let v = -0.5 + bright + noise.sample(&mut rng);
                data[y * image_side + x] = v.clamp(-0.5, 0.5);
            }
        }
        images.push(Tensor::new(vec![image_side, image_side, 1], data)?);
        labels.push(class);
    }
    LabeledDataset::new(images, labels, k, "synth-blobs")
}

/// First `n` test samples, in file order, that the target classifies
/// correctly (and not ⊥). The flag is true when the test set was exhausted
/// before reaching `n`.
pub fn split_first_correct(
    model: &dyn LabelModel,
    test: &LabeledDataset,
    n: usize,
) -> Result<(LabeledDataset, bool)> {
    if n == 0 {
        return Err(Error::invalid("eval subset size must be >= 1".to_string()));
    }
    let decisions = exec::try_map_indexed(test.len(), |i| model.decide(&test.images[i]))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, d) in decisions.iter().enumerate() {
        if images.len() == n {
            break;
        }
        if *d == Some(test.labels[i]) {
            images.push(test.images[i].clone());
            labels.push(test.labels[i]);
        }
    }
    let exhausted = images.len() < n;
    let subset = LabeledDataset::new(images, labels, test.class_count, &format!("{}-eval", test.name))?;
    Ok((subset, exhausted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NetworkSpec;

    fn idx_fixture(dir: &Path, pixels: &[u8], labels: &[u8], rows: usize, cols: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let count = labels.len();
        let mut ib = Vec::new();
        ib.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        ib.extend_from_slice(&(count as u32).to_be_bytes());
        ib.extend_from_slice(&(rows as u32).to_be_bytes());
        ib.extend_from_slice(&(cols as u32).to_be_bytes());
        ib.extend_from_slice(pixels);
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(count as u32).to_be_bytes());
        lb.extend_from_slice(labels);
        let ip = dir.join("imgs.idx");
        let lp = dir.join("lbls.idx");
        fs::write(&ip, ib).unwrap();
        fs::write(&lp, lb).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_normalization_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_fixture(dir.path(), &[255, 0, 128, 64], &[1], 2, 2);
        let ds = load_idx(&ip, &lp).unwrap();
        let d = ds.images[0].data();
        assert_eq!(d[0], 0.5);
        assert_eq!(d[1], -0.5);
    }

    #[test]
    fn idx_fixture_roundtrips_counts_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..4 * 9).map(|i| (i * 7 % 256) as u8).collect();
        let (ip, lp) = idx_fixture(dir.path(), &pixels, &[0, 1, 2, 3], 3, 3);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.image_shape(), (3, 3, 1));
        assert_eq!(ds.labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_fixture(dir.path(), &[0; 8], &[0, 1], 2, 2);
        // rewrite label file with wrong count
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        lb.extend_from_slice(&3u32.to_be_bytes());
        lb.extend_from_slice(&[0, 1, 2]);
        fs::write(&lp, lb).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Parse { offset: 4, .. }) => {}
            other => panic!("expected count mismatch, got {:?}", other.map(|d| d.len())),
        }
    }

    #[test]
    fn cifar_endpoints_and_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        rec[1] = 255; // red channel, pixel 0
        let path = dir.path().join("batch.bin");
        fs::write(&path, &rec).unwrap();
        let ds = load_cifar_binary(&path).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 7);
        assert_eq!(ds.images[0].data()[0], 0.5);
        assert_eq!(ds.images[0].data()[1], -0.5);

        fs::write(&path, &rec[..100]).unwrap();
        assert!(load_cifar_binary(&path).is_err());
    }

    #[test]
    fn blobs_deterministic_and_in_range() {
        let a = synth_blobs(3, 5, 8, 42).unwrap();
        let b = synth_blobs(3, 5, 8, 42).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.bit_key(), y.bit_key());
        }
        for img in &a.images {
            assert!(img.data().iter().all(|&v| (-0.5..=0.5).contains(&v)));
        }
        assert!(synth_blobs(3, 0, 8, 42).is_err());
        assert!(synth_blobs(1, 5, 8, 42).is_err());
    }

    #[test]
    fn blobs_fit_by_linear_probe() {
        let data = synth_blobs(3, 60, 8, 5).unwrap();
        let spec = NetworkSpec::dense_preset((8, 8, 1), &[], 3);
        let cfg = crate::models::TrainConfig {
            epochs: 15,
            learning_rate: 0.01,
            batch_size: 16,
            seed: 3,
            ..Default::default()
        };
        let c = crate::models::train(&spec, &data, &cfg).unwrap();
        let correct = data
            .images
            .iter()
            .zip(&data.labels)
            .filter(|(x, &l)| c.label(x).unwrap() == l)
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.90);
    }

    struct FixedModel {
        answers: Vec<Option<usize>>,
    }

    impl LabelModel for FixedModel {
        fn class_count(&self) -> usize {
            4
        }
        fn decide(&self, x: &Tensor) -> crate::error::Result<Option<usize>> {
            Ok(self.answers[x.data()[0] as usize])
        }
    }

    fn tagged_dataset(labels: &[usize]) -> LabeledDataset {
        let images = labels
            .iter()
            .enumerate()
            .map(|(i, _)| Tensor::new(vec![1, 1, 1], vec![i as f64]).unwrap())
            .collect();
        LabeledDataset::new(images, labels.to_vec(), 4, "fixed").unwrap()
    }

    #[test]
    fn split_first_correct_matches_linear_scan_oracle() {
        let labels = vec![0, 1, 2, 3, 0, 1, 2];
        let test = tagged_dataset(&labels);
        // wrong on sample 0, abstains on sample 3, correct otherwise
        let mut answers: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        answers[0] = Some(3);
        answers[3] = None;
        let model = FixedModel { answers: answers.clone() };
        let (subset, exhausted) = split_first_correct(&model, &test, 3).unwrap();
        // independent linear scan
        let expect: Vec<usize> = (0..labels.len())
            .filter(|&i| answers[i] == Some(labels[i]))
            .take(3)
            .collect();
        assert_eq!(subset.len(), expect.len());
        for (j, &i) in expect.iter().enumerate() {
            assert_eq!(subset.images[j].data()[0], i as f64);
        }
        assert!(!exhausted);
        assert_eq!(subset.images[0].data()[0], 1.0); // starts at sample 1

        let (all, exhausted) = split_first_correct(&model, &test, 50).unwrap();
        assert!(exhausted);
        assert_eq!(all.len(), 5);
    }

    #[test]
    fn profile_defaults_resolve() {
        for name in ["fashion-like", "cifar-like", "synthetic"] {
            let p = DatasetProfile::parse(name).unwrap();
            assert!(p.attack.fgsm_eps > 0.0);
        }
        assert!(DatasetProfile::parse("nope").is_err());
        let p = DatasetProfile::fashion_like();
        assert_eq!(p.resize_targets(28), vec![28, 35, 42, 56, 63, 70, 84, 91]);
        assert_eq!(p.resize_targets(32), vec![32, 40, 48, 64, 72, 80, 96, 104]);
    }
}
