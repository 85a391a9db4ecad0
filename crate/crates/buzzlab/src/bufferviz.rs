//! Decision-region maps: classify I' = clip(I + x·g + y·r) over a 2-D
//! grid, where g is the normalized mean of per-layer loss gradients and r
//! is a normalized random direction orthogonalized against g (default) or
//! against the image itself. The rendered map shows the abstention buffer
//! as gray between class regions.

use crate::defense::BuzzDefense;
use crate::error::{Error, Result};
use crate::models::{Classifier, LabelModel};
use crate::tensor::{Tape, Tensor};
use crate::{exec, seeding};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrthMode {
    /// r orthogonal to g: the two grid axes are independent directions.
    AgainstGradient,
    /// r orthogonal to the base image.
    AgainstImage,
}

impl OrthMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "gradient" => Ok(OrthMode::AgainstGradient),
            "image" => Ok(OrthMode::AgainstImage),
            other => Err(Error::config(format!("unknown orthogonalization mode '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OrthMode::AgainstGradient => "gradient",
            OrthMode::AgainstImage => "image",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub x_max: f64,
    pub y_max: f64,
    pub orth: OrthMode,
    pub seed: u64,
}

impl GridConfig {
    /// 101×101 grid over symmetric extents of twice the single-step
    /// attack budget. The axes move along unit-L2 directions, so the
    /// budget is converted from per-pixel amplitude to vector magnitude
    /// via √(pixel count); x = ε then matches a full-strength sign step.
    pub fn default_for_eps(eps: f64, pixels: usize, seed: u64) -> Self {
        let extent = 2.0 * eps * (pixels.max(1) as f64).sqrt();
        GridConfig {
            nx: 101,
            ny: 101,
            x_max: extent,
            y_max: extent,
            orth: OrthMode::AgainstGradient,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RegionMap {
    pub nx: usize,
    pub ny: usize,
    pub x_max: f64,
    pub y_max: f64,
    pub base: Tensor,
    pub true_label: usize,
    pub g: Tensor,
    pub r: Tensor,
    pub orth: OrthMode,
    /// Row-major ny×nx label field; None = ⊥.
    pub labels: Vec<Option<usize>>,
}

impl RegionMap {
    pub fn gray_fraction(&self) -> f64 {
        self.labels.iter().filter(|l| l.is_none()).count() as f64 / self.labels.len() as f64
    }

    pub fn coords(&self, ix: usize, iy: usize) -> (f64, f64) {
        let x = if self.nx == 1 {
            0.0
        } else {
            -self.x_max + 2.0 * self.x_max * ix as f64 / (self.nx - 1) as f64
        };
        let y = if self.ny == 1 {
            0.0
        } else {
            -self.y_max + 2.0 * self.y_max * iy as f64 / (self.ny - 1) as f64
        };
        (x, y)
    }

    pub fn origin_label(&self) -> Option<usize> {
        self.labels[(self.ny / 2) * self.nx + self.nx / 2]
    }
}

/// Per-layer loss gradients of a voting defense, or the plain gradient
/// for a bare classifier (treated as one layer).
pub trait GradientSource: LabelModel {
    fn layer_loss_grads(&self, x: &Tensor, label: usize) -> Result<Vec<Tensor>>;
}

impl GradientSource for Classifier {
    fn layer_loss_grads(&self, x: &Tensor, label: usize) -> Result<Vec<Tensor>> {
        Ok(vec![self.loss_input_grad(x, label)?])
    }
}

impl GradientSource for BuzzDefense {
    fn layer_loss_grads(&self, x: &Tensor, label: usize) -> Result<Vec<Tensor>> {
        exec::try_map(&self.layers, |layer| {
            // differentiate through transform + resize + network
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let pre = layer.transform.apply_on_tape(&mut tape, xv)?;
            let resized = layer.resize.apply_on_tape(&mut tape, pre)?;
            let logits = layer.classifier.forward_on_tape(&mut tape, resized, None)?;
            let loss = tape.cross_entropy_logits(logits, label)?;
            tape.backward(loss)?;
            tape.grad(xv)
                .ok_or_else(|| Error::invalid("layer loss has no input gradient".to_string()))
        })
    }
}

fn normalized(t: &Tensor) -> Result<Tensor> {
    let n = t.l2_norm();
    if n == 0.0 {
        return Err(Error::invalid("degenerate all-zero direction".to_string()));
    }
    Ok(t.map(|v| v / n))
}

pub fn build_map<M: GradientSource + ?Sized>(
    model: &M,
    image: &Tensor,
    true_label: usize,
    cfg: &GridConfig,
) -> Result<RegionMap> {
    if cfg.nx == 0 || cfg.ny == 0 {
        return Err(Error::invalid("grid must be at least 1x1".to_string()));
    }
    let grads = model.layer_loss_grads(image, true_label)?;
    let mut mean = Tensor::zeros(image.shape().to_vec());
    for g in &grads {
        for (m, v) in mean.data_mut().iter_mut().zip(g.data()) {
            *m += v / grads.len() as f64;
        }
    }
    let g = normalized(&mean)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, 0xb0f));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let raw = Tensor::from_fn(image.shape().to_vec(), |_| normal.sample(&mut rng));
    let reference = match cfg.orth {
        OrthMode::AgainstGradient => &g,
        OrthMode::AgainstImage => image,
    };
    let proj = raw.dot(reference) / reference.dot(reference).max(1e-300);
    let mut r = raw.clone();
    for (rv, &bv) in r.data_mut().iter_mut().zip(reference.data()) {
        *rv -= proj * bv;
    }
    let r = normalized(&r)?;

    let map = RegionMap {
        nx: cfg.nx,
        ny: cfg.ny,
        x_max: cfg.x_max,
        y_max: cfg.y_max,
        base: image.clone(),
        true_label,
        g,
        r,
        orth: cfg.orth,
        labels: Vec::new(),
    };
    let indices: Vec<usize> = (0..cfg.nx * cfg.ny).collect();
    let labels = exec::try_map(&indices, |&idx| {
        let (x, y) = map.coords(idx % cfg.nx, idx / cfg.nx);
        let probe = Tensor::from_fn(image.shape().to_vec(), |i| {
            (image.data()[i] + x * map.g.data()[i] + y * map.r.data()[i]).clamp(-0.5, 0.5)
        });
        model.decide(&probe)
    })?;
    Ok(RegionMap { labels, ..map })
}

/// Fixed palette: green for the true label, gray for ⊥, distinct colors
/// cycling by class index otherwise.
pub fn palette(label: Option<usize>, true_label: usize) -> [u8; 3] {
    const COLORS: [[u8; 3]; 8] = [
        [204, 51, 51],   // red
        [51, 102, 204],  // blue
        [230, 159, 0],   // orange
        [128, 0, 128],   // purple
        [0, 158, 115],   // teal
        [240, 228, 66],  // yellow
        [86, 180, 233],  // sky
        [160, 82, 45],   // sienna
    ];
    match label {
        None => [128, 128, 128],
        Some(l) if l == true_label => [34, 170, 34],
        Some(l) => COLORS[l % COLORS.len()],
    }
}

/// Writes the binary pixmap and a sidecar CSV of (x, y, label) rows.
pub fn render_map(map: &RegionMap, path: &Path) -> Result<()> {
    let mut ppm: Vec<u8> = Vec::with_capacity(map.nx * map.ny * 3 + 64);
    // palette: green=true label, gray=abstain, fixed cycle otherwise
    let header = format!(
        "P6\n# orth={} green=true gray=abstain\n{} {}\n255\n",
        map.orth.name(),
        map.nx,
        map.ny
    );
    ppm.extend_from_slice(header.as_bytes());
    // image rows top-to-bottom = +y down to −y
    for iy in (0..map.ny).rev() {
        for ix in 0..map.nx {
            ppm.extend_from_slice(&palette(map.labels[iy * map.nx + ix], map.true_label));
        }
    }
    std::fs::write(path, ppm)?;

    let mut csv = String::from("x,y,label\n");
    for iy in 0..map.ny {
        for ix in 0..map.nx {
            let (x, y) = map.coords(ix, iy);
            let label = map.labels[iy * map.nx + ix]
                .map(|l| l.to_string())
                .unwrap_or_else(|| "bottom".to_string());
            writeln!(csv, "{},{},{}", x, y, label).expect("string write");
        }
    }
    std::fs::write(path.with_extension("csv"), csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_blobs;
    use crate::models::{self, NetworkSpec, TrainConfig};

    fn trained() -> (Classifier, Tensor, usize) {
        let data = synth_blobs(2, 30, 6, 17).unwrap();
        let spec = NetworkSpec::small_preset((6, 6, 1), 2);
        let cfg = TrainConfig { epochs: 5, learning_rate: 3e-3, batch_size: 16, seed: 4, ..Default::default() };
        let model = models::train(&spec, &data, &cfg).unwrap();
        let i = (0..data.len())
            .find(|&i| model.label(&data.images[i]).unwrap() == data.labels[i])
            .expect("some sample classified correctly");
        (model, data.images[i].clone(), data.labels[i])
    }

    #[test]
    fn origin_matches_clean_label() {
        let (model, x, l) = trained();
        let cfg = GridConfig { nx: 11, ny: 11, x_max: 0.3, y_max: 0.3, orth: OrthMode::AgainstGradient, seed: 1 };
        let map = build_map(&model, &x, l, &cfg).unwrap();
        assert_eq!(map.origin_label(), Some(model.label(&x).unwrap()));
    }

    #[test]
    fn directions_are_unit_and_orthogonal() {
        let (model, x, l) = trained();
        for orth in [OrthMode::AgainstGradient, OrthMode::AgainstImage] {
            let cfg = GridConfig { nx: 3, ny: 3, x_max: 0.1, y_max: 0.1, orth, seed: 2 };
            let map = build_map(&model, &x, l, &cfg).unwrap();
            assert!((map.g.l2_norm() - 1.0).abs() < 1e-9);
            assert!((map.r.l2_norm() - 1.0).abs() < 1e-9);
            let reference = match orth {
                OrthMode::AgainstGradient => &map.g,
                OrthMode::AgainstImage => &map.base,
            };
            assert!(map.r.dot(reference).abs() < 1e-9);
        }
    }

    #[test]
    fn plain_classifier_never_grays() {
        let (model, x, l) = trained();
        let cfg = GridConfig { nx: 15, ny: 15, x_max: 0.4, y_max: 0.4, orth: OrthMode::AgainstGradient, seed: 3 };
        let map = build_map(&model, &x, l, &cfg).unwrap();
        assert_eq!(map.gray_fraction(), 0.0);
    }

    #[test]
    fn grid_row_matches_pointwise_recomputation() {
        let (model, x, l) = trained();
        let cfg = GridConfig { nx: 9, ny: 9, x_max: 0.25, y_max: 0.25, orth: OrthMode::AgainstGradient, seed: 4 };
        let map = build_map(&model, &x, l, &cfg).unwrap();
        for ix in [0, 4, 8] {
            let (gx, _) = map.coords(ix, 4);
            let probe = Tensor::from_fn(x.shape().to_vec(), |i| {
                (x.data()[i] + gx * map.g.data()[i]).clamp(-0.5, 0.5)
            });
            assert_eq!(map.labels[4 * map.nx + ix], Some(model.label(&probe).unwrap()));
        }
    }

    #[test]
    fn render_writes_pixmap_and_csv() {
        let (model, x, l) = trained();
        let cfg = GridConfig { nx: 5, ny: 4, x_max: 0.2, y_max: 0.2, orth: OrthMode::AgainstGradient, seed: 5 };
        let map = build_map(&model, &x, l, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.ppm");
        render_map(&map, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n"));
        let csv = std::fs::read_to_string(p.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 5 * 4);
    }

    #[test]
    fn single_pixel_map() {
        let (model, x, l) = trained();
        let cfg = GridConfig { nx: 1, ny: 1, x_max: 0.0, y_max: 0.0, orth: OrthMode::AgainstGradient, seed: 6 };
        let map = build_map(&model, &x, l, &cfg).unwrap();
        assert_eq!(map.labels.len(), 1);
        assert_eq!(map.labels[0], Some(l));
        assert_eq!(palette(map.labels[0], l), [34, 170, 34]);
    }
}
