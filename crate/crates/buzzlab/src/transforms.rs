//! Secret per-layer image transformations: the fixed randomized linear map
//! c(x) = Ax + b applied per channel as X_i A_i + b_i, and corner-aligned
//! bilinear upsizing. Both are linear-plus-constant maps, so
//! f(x + eta) = f(x) + L(eta) with L independent of x.

use crate::dataio::{DatasetProfile, TransformDist};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, VarId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug)]
pub struct LinearTransform {
    /// Per-channel right multipliers, each (w,w).
    pub a: Vec<Tensor>,
    /// Per-channel biases, each (h,w).
    pub b: Vec<Tensor>,
    pub shared_a: bool,
    pub shared_b: bool,
    pub seed: u64,
}

impl LinearTransform {
    pub fn identity(shape: (usize, usize, usize)) -> Self {
        let (h, w, c) = shape;
        let eye = Tensor::from_fn(vec![w, w], |i| if i / w == i % w { 1.0 } else { 0.0 });
        LinearTransform {
            a: vec![eye; c],
            b: vec![Tensor::zeros(vec![h, w]); c],
            shared_a: true,
            shared_b: true,
            seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.a.len()
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        let ok = s.len() == 3
            && s[2] == self.a.len()
            && self.a[0].shape() == [s[1], s[1]]
            && self.b[0].shape() == [s[0], s[1]];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "apply_linear",
                lhs: s.to_vec(),
                rhs: self.b[0].shape().to_vec(),
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Per-channel X_i A_i + b_i. Output is not re-clipped: downstream
    /// classifiers are trained on transformed data.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.apply_on_tape(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn apply_on_tape(&self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        self.check(tape.value(x))?;
        let mats: Vec<Tensor> = self.a.iter().chain(self.b.iter()).cloned().collect();
        tape.channel_linear(x, mats)
    }

    /// The homogeneous part: A applied with zero bias. Satisfies
    /// apply(x + eta) - apply(x) == apply_zero_bias(eta).
    pub fn apply_zero_bias(&self, eta: &Tensor) -> Result<Tensor> {
        let (h, w, _) = self.check(eta)?;
        let zero = LinearTransform {
            a: self.a.clone(),
            b: vec![Tensor::zeros(vec![h, w]); self.b.len()],
            shared_a: self.shared_a,
            shared_b: self.shared_b,
            seed: self.seed,
        };
        zero.apply(eta)
    }

    /// Flattened tensor list for checkpoint persistence: A_0..A_{c-1}
    /// followed by b_0..b_{c-1}.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.a.iter().chain(self.b.iter()).cloned().collect()
    }

    pub fn from_tensors(tensors: &[Tensor], shared_a: bool, shared_b: bool, seed: u64) -> Result<Self> {
        if tensors.is_empty() || tensors.len() % 2 != 0 {
            return Err(Error::invalid("transform record must hold 2c tensors".to_string()));
        }
        let c = tensors.len() / 2;
        Ok(LinearTransform {
            a: tensors[..c].to_vec(),
            b: tensors[c..].to_vec(),
            shared_a,
            shared_b,
            seed,
        })
    }
}

/// Draws a transform from the profile's distribution. Reproducible:
/// (profile, shape, seed) always yields the same transform.
pub fn sample_linear(
    profile: &DatasetProfile,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<LinearTransform> {
    let (h, w, c) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match profile.transform_dist {
        TransformDist::IdentityWithSparseBias { fraction, lo, hi } => {
            let eye = Tensor::from_fn(vec![w, w], |i| if i / w == i % w { 1.0 } else { 0.0 });
            let total = h * w;
            let support = ((fraction * total as f64).round() as usize).min(total);
            // uniform support mask without replacement (partial Fisher-Yates)
            let mut indices: Vec<usize> = (0..total).collect();
            for i in 0..support {
                let j = rng.gen_range(i..total);
                indices.swap(i, j);
            }
            let mut bias = vec![0.0; total];
            for &idx in &indices[..support] {
                bias[idx] = rng.gen_range(lo..hi);
            }
            let b = Tensor::new(vec![h, w], bias)?;
            Ok(LinearTransform {
                a: vec![eye; c],
                b: vec![b; c],
                shared_a: true,
                shared_b: true,
                seed,
            })
        }
        TransformDist::DenseGaussian { sigma } => {
            let dist = Normal::new(0.0, sigma).unwrap();
            let a = Tensor::from_fn(vec![w, w], |_| dist.sample(&mut rng));
            let b = Tensor::from_fn(vec![h, w], |_| dist.sample(&mut rng));
            Ok(LinearTransform {
                a: vec![a; c],
                b: vec![b; c],
                shared_a: true,
                shared_b: true,
                seed,
            })
        }
    }
}

/// Upsizing-only bilinear resize with a corner-aligned sampling grid;
/// target == source is exactly the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResizeOp {
    pub source: usize,
    pub target: usize,
}

impl ResizeOp {
    pub fn new(source: usize, target: usize) -> Result<Self> {
        if target < source {
            return Err(Error::invalid(format!(
                "resize target {} smaller than source {}",
                target, source
            )));
        }
        Ok(ResizeOp { source, target })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.apply_on_tape(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn apply_on_tape(&self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        let s = tape.value(x).shape();
        if s.len() != 3 || s[0] != self.source || s[1] != self.source {
            return Err(Error::ShapeMismatch {
                op: "resize_bilinear",
                lhs: s.to_vec(),
                rhs: vec![self.source, self.source],
            });
        }
        tape.resize_bilinear(x, self.target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_image(shape: (usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![shape.0, shape.1, shape.2], |_| rng.gen_range(-0.5..0.5))
    }

    #[test]
    fn cifar_like_transform_has_identity_a_and_sparse_shared_bias() {
        let profile = DatasetProfile::cifar_like();
        let t = sample_linear(&profile, (8, 8, 3), 99).unwrap();
        let eye = Tensor::from_fn(vec![8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        for a in &t.a {
            assert_eq!(a, &eye);
        }
        assert_eq!(t.b[0], t.b[1]);
        let nonzero = t.b[0].data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, (0.35f64 * 64.0).round() as usize);
    }

    #[test]
    fn fashion_like_transform_matches_gaussian_stats() {
        let profile = DatasetProfile::fashion_like();
        // pool entries over several seeded draws to reach 10000 samples
        let mut entries = Vec::new();
        let mut seed = 0;
        while entries.len() < 10_000 {
            let t = sample_linear(&profile, (28, 28, 1), seed).unwrap();
            entries.extend_from_slice(t.a[0].data());
            entries.extend_from_slice(t.b[0].data());
            seed += 1;
        }
        entries.truncate(10_000);
        let mean = entries.iter().sum::<f64>() / entries.len() as f64;
        let var = entries.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / entries.len() as f64;
        assert!(mean.abs() < 0.01, "mean {}", mean);
        assert!((var.sqrt() - 0.1).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn sampling_is_reproducible() {
        let profile = DatasetProfile::fashion_like();
        let a = sample_linear(&profile, (6, 6, 1), 5).unwrap();
        let b = sample_linear(&profile, (6, 6, 1), 5).unwrap();
        assert_eq!(a.a[0], b.a[0]);
        assert_eq!(a.b[0], b.b[0]);
        let c = sample_linear(&profile, (6, 6, 1), 6).unwrap();
        assert_ne!(a.a[0], c.a[0]);
    }

    #[test]
    fn identity_transform_is_identity() {
        let t = LinearTransform::identity((5, 5, 2));
        let x = rand_image((5, 5, 2), 1);
        assert_eq!(t.apply(&x).unwrap(), x);
    }

    #[test]
    fn column_swap_hand_example() {
        // X = I2, A swaps columns, b = 0 -> columns swapped
        let t = LinearTransform {
            a: vec![Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()],
            b: vec![Tensor::zeros(vec![2, 2])],
            shared_a: true,
            shared_b: true,
            seed: 0,
        };
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = t.apply(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn bias_cancels_in_differences() {
        let profile = DatasetProfile::fashion_like();
        let t = sample_linear(&profile, (6, 6, 1), 77).unwrap();
        let x = rand_image((6, 6, 1), 2);
        let eta = rand_image((6, 6, 1), 3);
        let x_eta = Tensor::new(
            vec![6, 6, 1],
            x.data().iter().zip(eta.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let lhs_full = t.apply(&x_eta).unwrap();
        let lhs_base = t.apply(&x).unwrap();
        let rhs = t.apply_zero_bias(&eta).unwrap();
        for ((f, b), r) in lhs_full.data().iter().zip(lhs_base.data()).zip(rhs.data()) {
            assert!((f - b - r).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_rejects_downsizing_and_identity_is_exact() {
        assert!(ResizeOp::new(8, 6).is_err());
        let r = ResizeOp::new(6, 6).unwrap();
        let x = rand_image((6, 6, 1), 4);
        assert_eq!(r.apply(&x).unwrap(), x);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn resize_is_linear(seed_x in 0u64..1000, seed_y in 1000u64..2000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let r = ResizeOp::new(5, 9).unwrap();
            let x = rand_image((5, 5, 1), seed_x);
            let y = rand_image((5, 5, 1), seed_y);
            let combo = Tensor::new(vec![5, 5, 1],
                x.data().iter().zip(y.data()).map(|(xv, yv)| a * xv + b * yv).collect()).unwrap();
            let lhs = r.apply(&combo).unwrap();
            let rx = r.apply(&x).unwrap();
            let ry = r.apply(&y).unwrap();
            for ((l, xv), yv) in lhs.data().iter().zip(rx.data()).zip(ry.data()) {
                prop_assert!((l - (a * xv + b * yv)).abs() < 1e-9);
            }
        }
    }
}
