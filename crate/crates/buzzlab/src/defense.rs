//! The buffer-zone target model: m protected layers (secret linear
//! transform, resize, trained classifier), majority voting with threshold
//! kappa, optional per-layer confidence threshold theta, output a class
//! label or the abstention label ⊥ (represented as None).

use crate::dataio::{DatasetProfile, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{self, argmax, Classifier, LabelModel, NetworkSpec, TrainConfig};
use crate::tensor::{read_tensors, write_tensors, Tensor};
use crate::transforms::{sample_linear, LinearTransform, ResizeOp};
use crate::{exec, seeding};
use std::fs;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct ProtectedLayer {
    pub transform: LinearTransform,
    pub resize: ResizeOp,
    pub classifier: Classifier,
    /// Confidence threshold in (0,1]; None disables thresholding.
    pub theta: Option<f64>,
    pub seed: u64,
}

impl ProtectedLayer {
    pub fn preprocess(&self, x: &Tensor) -> Result<Tensor> {
        self.resize.apply(&self.transform.apply(x)?)
    }

    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.classifier.score(&self.preprocess(x)?)
    }

    /// argmax label, or ⊥ when theta is set and max score < theta
    /// (comparison inclusive: max score == theta keeps the label).
    pub fn label(&self, x: &Tensor) -> Result<Option<usize>> {
        let s = self.score(x)?;
        Ok(label_from_scores(&s, self.theta))
    }
}

pub fn label_from_scores(scores: &[f64], theta: Option<f64>) -> Option<usize> {
    let best = argmax(scores);
    match theta {
        Some(t) if scores[best] < t => None,
        _ => Some(best),
    }
}

#[derive(Clone, Debug)]
pub struct BuzzDefense {
    pub layers: Vec<ProtectedLayer>,
    pub kappa: usize,
    pub class_count: usize,
    pub variant: Variant,
}

impl BuzzDefense {
    pub fn layer_labels(&self, x: &Tensor) -> Result<Vec<Option<usize>>> {
        exec::try_map(&self.layers, |layer| layer.label(x))
    }

    pub fn classify(&self, x: &Tensor) -> Result<Option<usize>> {
        Ok(vote(&self.layer_labels(x)?, self.kappa, self.class_count))
    }
}

impl LabelModel for BuzzDefense {
    fn class_count(&self) -> usize {
        self.class_count
    }
    fn decide(&self, x: &Tensor) -> Result<Option<usize>> {
        self.classify(x)
    }
}

/// Threshold-vote over layer labels. ⊥ votes never count toward any
/// class; the class with the most votes wins if it reaches kappa and is
/// uncontested, otherwise the verdict is fail-closed ⊥.
pub fn vote(labels: &[Option<usize>], kappa: usize, class_count: usize) -> Option<usize> {
    let mut counts = vec![0usize; class_count];
    for l in labels.iter().flatten() {
        counts[*l] += 1;
    }
    let max = *counts.iter().max().unwrap_or(&0);
    if max < kappa || max == 0 {
        return None;
    }
    let mut winner = None;
    for (class, &n) in counts.iter().enumerate() {
        if n == max {
            match winner {
                None => winner = Some(class),
                Some(_) => return None, // contested plurality
            }
        }
    }
    winner
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    /// m protected layers with unanimous voting (kappa = m).
    Buzz { m: usize },
    /// Single thresholded network, no transform, no resize.
    Bt { theta: f64 },
    /// Two protected layers; the up-resized one carries the threshold.
    Bt2 { theta: f64 },
}

impl Variant {
    pub fn parse(name: &str) -> Result<Self> {
        let name = name.trim().to_ascii_lowercase();
        if let Some(rest) = name.strip_prefix("buzz-") {
            let m: usize = rest
                .parse()
                .map_err(|_| Error::config(format!("bad variant '{}'", name)))?;
            if ![1, 2, 4, 8].contains(&m) {
                return Err(Error::config(format!("buzz variant m must be 1,2,4,8: '{}'", name)));
            }
            return Ok(Variant::Buzz { m });
        }
        if let Some(rest) = name.strip_prefix("bt2-") {
            let theta: f64 = rest
                .parse()
                .map_err(|_| Error::config(format!("bad variant '{}'", name)))?;
            return Ok(Variant::Bt2 { theta });
        }
        if let Some(rest) = name.strip_prefix("bt-") {
            let theta: f64 = rest
                .parse()
                .map_err(|_| Error::config(format!("bad variant '{}'", name)))?;
            return Ok(Variant::Bt { theta });
        }
        Err(Error::config(format!("unknown defense variant '{}'", name)))
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Buzz { m } => format!("buzz-{}", m),
            Variant::Bt { theta } => format!("bt-{}", theta),
            Variant::Bt2 { theta } => format!("bt2-{}", theta),
        }
    }

    pub fn layer_count(&self) -> usize {
        match self {
            Variant::Buzz { m } => *m,
            Variant::Bt { .. } => 1,
            Variant::Bt2 { .. } => 2,
        }
    }
}

/// Resize targets per variant, from the profile's scaled resize set:
/// the 8-layer set, its {0,2,4,6} subset for m=4, {first,last} for m=2.
fn variant_targets(variant: &Variant, profile: &DatasetProfile, side: usize) -> Vec<usize> {
    let set = profile.resize_targets(side);
    match variant {
        Variant::Buzz { m: 8 } => set,
        Variant::Buzz { m: 4 } => vec![set[0], set[2], set[4], set[6]],
        Variant::Buzz { m: 2 } | Variant::Bt2 { .. } => vec![set[0], set[7]],
        Variant::Buzz { .. } => vec![set[0]],
        Variant::Bt { .. } => vec![side],
    }
}

/// Samples per-layer transforms, trains each classifier on the transformed
/// training set, and assembles the defense with kappa = m.
pub fn build_buzz(
    profile: &DatasetProfile,
    data: &LabeledDataset,
    variant: Variant,
    seed: u64,
    train_cfg: &TrainConfig,
) -> Result<BuzzDefense> {
    let shape = data.image_shape();
    let side = shape.0;
    if shape.0 != shape.1 {
        return Err(Error::invalid("defense requires square images".to_string()));
    }
    let targets = variant_targets(&variant, profile, side);
    let m = targets.len();
    let mut layers = Vec::with_capacity(m);
    for (j, &target) in targets.iter().enumerate() {
        let layer_seed = seeding::derive(seed, 0xdef0 + j as u64);
        let transform = match variant {
            Variant::Bt { .. } => LinearTransform::identity(shape),
            _ => sample_linear(profile, shape, layer_seed)?,
        };
        let resize = ResizeOp::new(side, target)?;
        let theta = match variant {
            Variant::Bt { theta } => Some(theta),
            // combinational: only the up-resized second network thresholds
            Variant::Bt2 { theta } if j == 1 => Some(theta),
            _ => None,
        };
        if let Some(t) = theta {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::invalid(format!("theta {} outside (0,1]", t)));
            }
        }
        let transformed: Vec<Tensor> = exec::try_map(&data.images, |x| resize.apply(&transform.apply(x)?))?;
        let layer_data = LabeledDataset::new(
            transformed,
            data.labels.clone(),
            data.class_count,
            &format!("{}-layer{}", data.name, j),
        )?;
        let spec = NetworkSpec::small_preset((target, target, shape.2), data.class_count);
        let mut cfg = train_cfg.clone();
        cfg.seed = seeding::derive(layer_seed, 0x7a11);
        let classifier = models::train(&spec, &layer_data, &cfg)?;
        layers.push(ProtectedLayer {
            transform,
            resize,
            classifier,
            theta,
            seed: layer_seed,
        });
    }
    Ok(BuzzDefense {
        layers,
        kappa: m,
        class_count: data.class_count,
        variant,
    })
}

/// Bundle directory layout: manifest.cfg plus per-layer transform and
/// weight checkpoints in BZW1 format.
pub fn save_bundle(defense: &BuzzDefense, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str("[defense]\n");
    manifest.push_str(&format!("variant = {}\n", defense.variant.name()));
    manifest.push_str(&format!("kappa = {}\n", defense.kappa));
    manifest.push_str(&format!("class_count = {}\n", defense.class_count));
    manifest.push_str(&format!("layers = {}\n", defense.layers.len()));
    for (j, layer) in defense.layers.iter().enumerate() {
        manifest.push_str(&format!("\n[layer.{}]\n", j));
        manifest.push_str(&format!("seed = {}\n", layer.seed));
        manifest.push_str(&format!("source = {}\n", layer.resize.source));
        manifest.push_str(&format!("target = {}\n", layer.resize.target));
        let (h, w, c) = layer.classifier.spec.input;
        manifest.push_str(&format!("input = {}x{}x{}\n", h, w, c));
        manifest.push_str(&format!("shared_a = {}\n", layer.transform.shared_a));
        manifest.push_str(&format!("shared_b = {}\n", layer.transform.shared_b));
        match layer.theta {
            Some(t) => manifest.push_str(&format!("theta = {}\n", t)),
            None => manifest.push_str("theta = none\n"),
        }
        write_tensors(&dir.join(format!("layer{}_transform.bzw", j)), &layer.transform.to_tensors())?;
        write_tensors(&dir.join(format!("layer{}_weights.bzw", j)), &layer.classifier.params)?;
    }
    fs::write(dir.join("manifest.cfg"), manifest)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<BuzzDefense> {
    let manifest = crate::config::RawConfig::from_file(&dir.join("manifest.cfg"))?;
    let variant = Variant::parse(&manifest.require("defense", "variant")?)?;
    let kappa: usize = manifest.parse_value("defense", "kappa")?;
    let class_count: usize = manifest.parse_value("defense", "class_count")?;
    let layer_count: usize = manifest.parse_value("defense", "layers")?;
    let mut layers = Vec::with_capacity(layer_count);
    for j in 0..layer_count {
        let section = format!("layer.{}", j);
        let seed: u64 = manifest.parse_value(&section, "seed")?;
        let source: usize = manifest.parse_value(&section, "source")?;
        let target: usize = manifest.parse_value(&section, "target")?;
        let shared_a: bool = manifest.parse_value(&section, "shared_a")?;
        let shared_b: bool = manifest.parse_value(&section, "shared_b")?;
        let theta_raw = manifest.require(&section, "theta")?;
        let theta = if theta_raw == "none" {
            None
        } else {
            Some(theta_raw.parse::<f64>().map_err(|e| Error::config(e.to_string()))?)
        };
        let input = manifest.require(&section, "input")?;
        let dims: Vec<usize> = input
            .split('x')
            .map(|v| v.parse().map_err(|_| Error::config(format!("bad input '{}'", input))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::config(format!("bad input shape '{}'", input)));
        }
        let transform_tensors = read_tensors(&dir.join(format!("layer{}_transform.bzw", j)))?;
        let transform = LinearTransform::from_tensors(&transform_tensors, shared_a, shared_b, seed)?;
        let params = read_tensors(&dir.join(format!("layer{}_weights.bzw", j)))?;
        let spec = NetworkSpec::small_preset((dims[0], dims[1], dims[2]), class_count);
        let expected = spec.param_shapes()?;
        if expected.len() != params.len() {
            return Err(Error::config(format!(
                "bundle layer {} holds {} tensors, expected {}",
                j,
                params.len(),
                expected.len()
            )));
        }
        let label_map = (0..class_count).map(|i| format!("class_{}", i)).collect();
        layers.push(ProtectedLayer {
            transform,
            resize: ResizeOp::new(source, target)?,
            classifier: Classifier {
                spec,
                params,
                label_map,
            },
            theta,
            seed,
        });
    }
    Ok(BuzzDefense {
        layers,
        kappa,
        class_count,
        variant,
    })
}
