use super::{same_shape, Tensor};
use crate::error::Result;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// p <- p - lr * g
    GradientDescent,
    /// Bias-corrected first/second moment update with decays 0.9 / 0.999.
    Adam,
}

pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(crate::error::Error::invalid(format!(
                "optimizer step: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            same_shape("optimizer_step", p, g)?;
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::GradientDescent => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.learning_rate * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_empty() {
                    self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
                    self.second_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
                }
                let t = self.step_count as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[idx];
                    let v = &mut self.second_moment[idx];
                    for (k, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[k] = BETA1 * m[k] + (1.0 - BETA1) * gv;
                        v[k] = BETA2 * v[k] + (1.0 - BETA2) * gv * gv;
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        *pv -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut opt = Optimizer::new(OptimizerKind::GradientDescent, 0.1);
        let mut p = vec![Tensor::scalar(1.0)];
        opt.step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn plain_zero_gradient_leaves_parameter_unchanged() {
        let mut opt = Optimizer::new(OptimizerKind::GradientDescent, 0.1);
        let mut p = vec![Tensor::scalar(0.37)];
        opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p[0].item(), 0.37);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // bias correction makes the first step approx lr in the gradient direction
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.001);
        let mut p = vec![Tensor::scalar(0.0)];
        opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        assert!((p[0].item() + 0.001).abs() < 1e-6);
    }

    #[test]
    fn mismatched_gradient_shape_rejected() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.001);
        let mut p = vec![Tensor::zeros(vec![2])];
        assert!(opt.step(&mut p, &[Tensor::zeros(vec![3])]).is_err());
    }
}
