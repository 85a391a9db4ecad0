//! Layer/network definition, supervised training, and the classifier
//! interface (score vector and argmax label) shared by defenses and attacks.

use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::{Optimizer, OptimizerKind, Tape, Tensor, VarId};
use crate::{exec, seeding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { kernel: usize, channels: usize },
    Relu,
    MaxPool2,
    Dense { width: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl NetworkSpec {
    /// Desk-scale default: conv3x3x8, relu, conv3x3x8, relu, 2x2 pool,
    /// dense 64, relu, dense k.
    pub fn small_preset(input: (usize, usize, usize), class_count: usize) -> Self {
        NetworkSpec {
            input,
            layers: vec![
                LayerSpec::Conv { kernel: 3, channels: 8 },
                LayerSpec::Relu,
                LayerSpec::Conv { kernel: 3, channels: 8 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Dense { width: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { width: class_count },
            ],
            class_count,
        }
    }

    /// A single dense stack, used for probes and tiny fixtures.
    pub fn dense_preset(input: (usize, usize, usize), hidden: &[usize], class_count: usize) -> Self {
        let mut layers = Vec::new();
        for &w in hidden {
            layers.push(LayerSpec::Dense { width: w });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { width: class_count });
        NetworkSpec {
            input,
            layers,
            class_count,
        }
    }

    pub fn parse_preset(name: &str, input: (usize, usize, usize), class_count: usize) -> Result<Self> {
        match name {
            "small" => Ok(Self::small_preset(input, class_count)),
            "linear" => Ok(Self::dense_preset(input, &[], class_count)),
            "dense" => Ok(Self::dense_preset(input, &[32], class_count)),
            other => Err(Error::config(format!("unknown network preset '{}'", other))),
        }
    }

    /// Walks the layer stack and returns parameter shapes in declaration
    /// order, verifying that consecutive layers compose.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.class_count < 2 {
            return Err(Error::invalid("class_count must be >= 2".to_string()));
        }
        let mut shapes = Vec::new();
        // (spatial shape, flattened width) — conv layers need the former
        let mut spatial: Option<(usize, usize, usize)> = Some(self.input);
        let mut width = self.input.0 * self.input.1 * self.input.2;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv { kernel, channels } => {
                    let (h, w, c) = spatial.ok_or_else(|| {
                        Error::invalid("conv layer after dense layer".to_string())
                    })?;
                    if kernel % 2 == 0 {
                        return Err(Error::invalid("conv kernel must be odd".to_string()));
                    }
                    shapes.push(vec![*kernel, *kernel, c, *channels]);
                    shapes.push(vec![*channels]);
                    spatial = Some((h, w, *channels));
                    width = h * w * channels;
                }
                LayerSpec::MaxPool2 => {
                    let (h, w, c) = spatial.ok_or_else(|| {
                        Error::invalid("pool layer after dense layer".to_string())
                    })?;
                    spatial = Some((h / 2, w / 2, c));
                    width = (h / 2) * (w / 2) * c;
                }
                LayerSpec::Relu => {}
                LayerSpec::Dense { width: out } => {
                    shapes.push(vec![width, *out]);
                    shapes.push(vec![1, *out]);
                    spatial = None;
                    width = *out;
                }
            }
        }
        if width != self.class_count {
            return Err(Error::invalid(format!(
                "final layer width {} != class count {}",
                width, self.class_count
            )));
        }
        Ok(shapes)
    }
}

/// Trained network with a deterministic argmax label rule.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub spec: NetworkSpec,
    pub params: Vec<Tensor>,
    pub label_map: Vec<String>,
}

/// Anything that maps an image to a class label or abstains (None = ⊥).
pub trait LabelModel: Sync {
    fn class_count(&self) -> usize;
    fn decide(&self, x: &Tensor) -> Result<Option<usize>>;
}

impl LabelModel for Classifier {
    fn class_count(&self) -> usize {
        self.spec.class_count
    }

    fn decide(&self, x: &Tensor) -> Result<Option<usize>> {
        self.label(x).map(Some)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Classifier {
    /// He-style fan-in scaled Gaussian initialization, seeded.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(shapes.len());
        for shape in shapes {
            if shape.len() == 1 || (shape.len() == 2 && shape[0] == 1) {
                params.push(Tensor::zeros(shape)); // biases
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).unwrap();
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
                params.push(Tensor::new(shape, data)?);
            }
        }
        let label_map = (0..spec.class_count).map(|i| format!("class_{}", i)).collect();
        Ok(Classifier {
            spec,
            params,
            label_map,
        })
    }

    /// Forward pass to logits on an existing tape. When `params` is given
    /// (training), those tape variables are used; otherwise the stored
    /// parameters enter as constants.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: VarId, params: Option<&[VarId]>) -> Result<VarId> {
        let mut param_vars: Vec<VarId> = Vec::new();
        match params {
            Some(p) => param_vars.extend_from_slice(p),
            None => {
                for p in &self.params {
                    param_vars.push(tape.constant(p.clone()));
                }
            }
        }
        let mut cursor = 0usize;
        let mut current = x;
        let mut flat = false;
        for layer in &self.spec.layers {
            match layer {
                LayerSpec::Conv { .. } => {
                    let kernel = param_vars[cursor];
                    let bias = param_vars[cursor + 1];
                    cursor += 2;
                    current = tape.conv2d(current, kernel, bias)?;
                }
                LayerSpec::MaxPool2 => {
                    current = tape.max_pool2(current)?;
                }
                LayerSpec::Relu => {
                    current = tape.relu(current);
                }
                LayerSpec::Dense { .. } => {
                    if !flat {
                        let n = tape.value(current).len();
                        current = tape.reshape(current, vec![1, n])?;
                        flat = true;
                    }
                    let weight = param_vars[cursor];
                    let bias = param_vars[cursor + 1];
                    cursor += 2;
                    current = tape.matmul(current, weight)?;
                    current = tape.add(current, bias)?;
                }
            }
        }
        let k = self.spec.class_count;
        tape.reshape(current, vec![k])
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (h, w, c) = self.spec.input;
        if x.shape() != [h, w, c] {
            return Err(Error::ShapeMismatch {
                op: "classifier input",
                lhs: x.shape().to_vec(),
                rhs: vec![h, w, c],
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, xv, None)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Probability simplex score vector f(x).
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, xv, None)?;
        let sm = tape.softmax(out);
        Ok(tape.value(sm).data().to_vec())
    }

    /// argmax of the score vector; ties broken by lowest index.
    pub fn label(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn score_batch(&self, xs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        exec::try_map(xs, |x| self.score(x))
    }

    /// Gradient of cross-entropy(score(x), label) with respect to the input.
    pub fn loss_input_grad(&self, x: &Tensor, label: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let logits = self.forward_on_tape(&mut tape, xv, None)?;
        let loss = tape.cross_entropy_logits(logits, label)?;
        tape.backward(loss)?;
        tape.grad(xv)
            .ok_or_else(|| Error::invalid("input gradient missing".to_string()))
    }

    /// Gradient of one logit with respect to the input (the Jacobian column
    /// used by the black-box augmentation step).
    pub fn logit_input_grad(&self, x: &Tensor, class: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let logits = self.forward_on_tape(&mut tape, xv, None)?;
        let z = tape.gather(logits, vec![class])?;
        let loss = tape.sum(z);
        tape.backward(loss)?;
        tape.grad(xv)
            .ok_or_else(|| Error::invalid("input gradient missing".to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 10,
            seed: 0,
        }
    }
}

/// Mean cross-entropy of a classifier over a dataset.
pub fn dataset_loss(c: &Classifier, data: &LabeledDataset) -> Result<f64> {
    let losses = exec::try_map_indexed(data.len(), |i| {
        let mut tape = Tape::new();
        let xv = tape.constant(data.images[i].clone());
        let logits = c.forward_on_tape(&mut tape, xv, None)?;
        let loss = tape.cross_entropy_logits(logits, data.labels[i])?;
        Ok(tape.value(loss).item())
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Supervised training with per-sample gradients computed in parallel and
/// accumulated in fixed index order, so runs are deterministic per seed.
pub fn train(spec: &NetworkSpec, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Classifier> {
    if data.len() == 0 {
        return Err(Error::invalid("empty training dataset".to_string()));
    }
    if cfg.batch_size < 1 || cfg.epochs < 1 {
        return Err(Error::invalid("batch size and epochs must be >= 1".to_string()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= spec.class_count) {
        return Err(Error::invalid(format!(
            "label {} out of range [0,{})",
            bad, spec.class_count
        )));
    }
    let mut classifier = Classifier::init(spec.clone(), seeding::derive(cfg.seed, 0x1717))?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, epoch as u64 + 1));
        // Fisher-Yates shuffle
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<Result<Vec<Tensor>>> = exec::map(batch, |&idx| {
                sample_gradients(&classifier, &data.images[idx], data.labels[idx])
            });
            let mut total: Option<Vec<Tensor>> = None;
            for grads in per_sample {
                let grads = grads?;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                                *av += gv;
                            }
                        }
                    }
                }
            }
            let mut total = total.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for t in &mut total {
                for v in t.data_mut() {
                    *v *= scale;
                }
            }
            optimizer.step(&mut classifier.params, &total)?;
        }
    }
    Ok(classifier)
}

fn sample_gradients(c: &Classifier, x: &Tensor, label: usize) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let param_vars: Vec<VarId> = c.params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let xv = tape.constant(x.clone());
    let logits = c.forward_on_tape(&mut tape, xv, Some(&param_vars))?;
    let loss = tape.cross_entropy_logits(logits, label)?;
    if !tape.value(loss).all_finite() {
        return Err(Error::invalid("non-finite training loss".to_string()));
    }
    tape.backward(loss)?;
    param_vars
        .iter()
        .zip(&c.params)
        .map(|(&v, p)| Ok(tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio;

    fn blob_data(seed: u64) -> LabeledDataset {
        dataio::synth_blobs(2, 40, 6, seed).unwrap()
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    }

    #[test]
    fn zero_final_weights_give_uniform_score() {
        let spec = NetworkSpec::dense_preset((2, 2, 1), &[], 4);
        let mut c = Classifier::init(spec, 3).unwrap();
        for p in &mut c.params {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let s = c.score(&Tensor::full(vec![2, 2, 1], 0.3)).unwrap();
        for v in s {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn score_sums_to_one() {
        let spec = NetworkSpec::small_preset((6, 6, 1), 3);
        let c = Classifier::init(spec, 5).unwrap();
        let s = c.score(&Tensor::full(vec![6, 6, 1], 0.1)).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn label_matches_argmax_of_score_on_random_inputs() {
        let spec = NetworkSpec::small_preset((6, 6, 1), 4);
        let c = Classifier::init(spec, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = Tensor::from_fn(vec![6, 6, 1], |_| rng.gen_range(-0.5..0.5));
            assert_eq!(c.label(&x).unwrap(), argmax(&c.score(&x).unwrap()));
        }
    }

    #[test]
    fn batch_scoring_equals_individual_scores() {
        let spec = NetworkSpec::small_preset((6, 6, 1), 3);
        let c = Classifier::init(spec, 2).unwrap();
        let data = blob_data(1);
        let batch = c.score_batch(&data.images[..8]).unwrap();
        for (i, row) in batch.iter().enumerate() {
            assert_eq!(row, &c.score(&data.images[i]).unwrap());
        }
    }

    #[test]
    fn training_fits_separable_blobs() {
        let data = blob_data(7);
        let spec = NetworkSpec::dense_preset((6, 6, 1), &[16], 2);
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 5e-3,
            batch_size: 16,
            seed: 4,
            ..Default::default()
        };
        let before = Classifier::init(spec.clone(), seeding::derive(cfg.seed, 0x1717)).unwrap();
        let c = train(&spec, &data, &cfg).unwrap();
        assert!(dataset_loss(&c, &data).unwrap() < dataset_loss(&before, &data).unwrap());
        let correct = data
            .images
            .iter()
            .zip(&data.labels)
            .filter(|(x, &l)| c.label(x).unwrap() == l)
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.95);
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let data = blob_data(7);
        let spec = NetworkSpec::dense_preset((6, 6, 1), &[], 2);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train(&spec, &data, &cfg).is_err());
        let mut bad = data.clone();
        bad.labels[0] = 9;
        assert!(train(&spec, &bad, &TrainConfig::default()).is_err());
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let data = blob_data(3);
        let spec = NetworkSpec::dense_preset((6, 6, 1), &[8], 2);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 12,
            ..Default::default()
        };
        let a = train(&spec, &data, &cfg).unwrap();
        let b = train(&spec, &data, &cfg).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.bit_key(), pb.bit_key());
        }
    }

    #[test]
    fn label_invariant_under_monotone_logit_shift() {
        let spec = NetworkSpec::dense_preset((2, 2, 1), &[], 3);
        let c = Classifier::init(spec, 8).unwrap();
        let x = Tensor::full(vec![2, 2, 1], 0.2);
        let z = c.logits(&x).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| 3.0 * v + 7.0).collect();
        assert_eq!(argmax(&z), argmax(&shifted));
    }
}
