//! White-box adversarial example generation: single-step sign attack,
//! the iterative family (basic, projected with random start, momentum),
//! and the penalty-optimization family (L2 objective, optionally with an
//! elastic L1 term via shrinkage). Attacks run against a differentiable
//! classifier; success is judged against an arbitrary victim, which may
//! abstain.

use crate::dataio::AttackDefaults;
use crate::error::{Error, Result};
use crate::models::{argmax, Classifier, LabelModel};
use crate::tensor::{sign, Optimizer, OptimizerKind, Tape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PIXEL_LO: f64 = -0.5;
pub const PIXEL_HI: f64 = 0.5;
const PENALTY_LR: f64 = 0.01;
const C_START: f64 = 1e-2;
const C_MIN: f64 = 1e-3;
const C_MAX: f64 = 1e10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Fgsm,
    Bim,
    Pgd,
    Mim,
    Cw,
    Ead,
}

impl Family {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "fgsm" => Ok(Family::Fgsm),
            "bim" => Ok(Family::Bim),
            "pgd" => Ok(Family::Pgd),
            "mim" => Ok(Family::Mim),
            "cw" => Ok(Family::Cw),
            "ead" => Ok(Family::Ead),
            other => Err(Error::config(format!("unknown attack family '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Fgsm => "fgsm",
            Family::Bim => "bim",
            Family::Pgd => "pgd",
            Family::Mim => "mim",
            Family::Cw => "cw",
            Family::Ead => "ead",
        }
    }

    pub fn is_linf(&self) -> bool {
        !matches!(self, Family::Cw | Family::Ead)
    }
}

#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub family: Family,
    pub targeted: bool,
    /// Step size for the iterative family, the whole budget for the
    /// single-step attack.
    pub eps: f64,
    pub iterations: usize,
    pub mim_decay: f64,
    pub pgd_r_init: f64,
    pub penalty_iterations: usize,
    pub binsearch_steps: usize,
    pub beta: f64,
    pub kappa_cw: f64,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn from_profile(family: Family, targeted: bool, d: &AttackDefaults) -> Self {
        AttackConfig {
            family,
            targeted,
            eps: if family == Family::Fgsm { d.fgsm_eps } else { d.iter_step },
            iterations: d.iterations,
            mim_decay: d.mim_decay,
            pgd_r_init: d.pgd_r_init,
            penalty_iterations: d.penalty_iterations,
            binsearch_steps: d.binsearch_steps,
            beta: if family == Family::Ead { d.ead_beta } else { 0.0 },
            kappa_cw: 0.0,
            lo: PIXEL_LO,
            hi: PIXEL_HI,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 {
            return Err(Error::invalid("eps must be >= 0".to_string()));
        }
        if self.iterations == 0 || self.binsearch_steps == 0 {
            return Err(Error::invalid("iteration counts must be >= 1".to_string()));
        }
        if self.beta < 0.0 || self.pgd_r_init < 0.0 {
            return Err(Error::invalid("beta and r_init must be >= 0".to_string()));
        }
        if !(self.lo < self.hi) {
            return Err(Error::invalid("pixel range lo < hi required".to_string()));
        }
        Ok(())
    }

    /// Total L∞ budget the perturbation must respect (∞ for the unbounded
    /// penalty family).
    pub fn linf_budget(&self) -> f64 {
        match self.family {
            Family::Fgsm => self.eps,
            Family::Bim | Family::Pgd | Family::Mim => self.iterations as f64 * self.eps,
            Family::Cw | Family::Ead => f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdvResult {
    pub adversarial: Tensor,
    pub success: bool,
    pub final_label: Option<usize>,
    pub linf: f64,
    pub l2: f64,
}

fn check_label(c: &Classifier, label: usize) -> Result<()> {
    if label >= c.spec.class_count {
        return Err(Error::invalid(format!(
            "label {} out of range for {} classes",
            label, c.spec.class_count
        )));
    }
    Ok(())
}

/// The signed loss-gradient direction that moves toward attacker success:
/// ascend the true-label loss (untargeted) or descend the target-label
/// loss (targeted).
fn step_direction(c: &Classifier, x: &Tensor, label: usize, targeted: bool) -> Result<Tensor> {
    let g = c.loss_input_grad(x, label)?;
    let flip = if targeted { -1.0 } else { 1.0 };
    Ok(g.map(|v| flip * sign(v)))
}

pub fn fgsm(c: &Classifier, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Tensor> {
    check_label(c, label)?;
    let dir = step_direction(c, x, label, cfg.targeted)?;
    let mut out = x.clone();
    for (o, d) in out.data_mut().iter_mut().zip(dir.data()) {
        *o = (*o + cfg.eps * d).clamp(cfg.lo, cfg.hi);
    }
    Ok(out)
}

fn project(adv: &mut Tensor, x: &Tensor, budget: f64, lo: f64, hi: f64) {
    for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
        *a = a.clamp(o - budget, o + budget).clamp(lo, hi);
    }
}

pub fn iterative_attack(c: &Classifier, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Tensor> {
    check_label(c, label)?;
    let budget = cfg.iterations as f64 * cfg.eps;
    let mut adv = x.clone();
    if cfg.family == Family::Pgd && cfg.pgd_r_init > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for a in adv.data_mut() {
            *a += rng.gen_range(-cfg.pgd_r_init..=cfg.pgd_r_init);
        }
        project(&mut adv, x, budget, cfg.lo, cfg.hi);
    }
    let mut momentum = Tensor::zeros(x.shape().to_vec());
    let flip = if cfg.targeted { -1.0 } else { 1.0 };
    for _ in 0..cfg.iterations {
        let grad = c.loss_input_grad(&adv, label)?;
        let step_src = if cfg.family == Family::Mim {
            let l1: f64 = grad.data().iter().map(|v| v.abs()).sum();
            for (m, &g) in momentum.data_mut().iter_mut().zip(grad.data()) {
                *m = cfg.mim_decay * *m + if l1 > 0.0 { g / l1 } else { 0.0 };
            }
            momentum.clone()
        } else {
            grad
        };
        for (a, s) in adv.data_mut().iter_mut().zip(step_src.data()) {
            *a += cfg.eps * flip * sign(*s);
        }
        project(&mut adv, x, budget, cfg.lo, cfg.hi);
    }
    Ok(adv)
}

fn atanh_clamped(v: f64) -> f64 {
    let v = v.clamp(-1.0 + 1e-12, 1.0 - 1e-12);
    0.5 * ((1.0 + v) / (1.0 - v)).ln()
}

/// Surrogate-side success test used to steer the penalty binary search.
fn margin_satisfied(c: &Classifier, adv: &Tensor, label: usize, targeted: bool) -> Result<bool> {
    let pred = argmax(&c.logits(adv)?);
    Ok(if targeted { pred == label } else { pred != label })
}

pub fn penalty_attack(c: &Classifier, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Tensor> {
    check_label(c, label)?;
    let mid = 0.5 * (cfg.lo + cfg.hi);
    let half = 0.5 * (cfg.hi - cfg.lo);
    let to_omega = |v: f64| atanh_clamped((v - mid) / half);
    let omega0 = x.map(to_omega);

    let mut best: Option<(f64, Tensor)> = None;
    let mut last = x.clone();
    let mut c_val = C_START;
    for _ in 0..cfg.binsearch_steps {
        let mut omega = omega0.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, PENALTY_LR);
        let mut round_best: Option<(f64, Tensor)> = None;
        for _ in 0..cfg.penalty_iterations {
            // the margin's competing class is recomputed outside the tape
            let adv_now = omega.map(|w| mid + half * w.tanh());
            let logits = c.logits(&adv_now)?;
            let other = {
                let mut best_i = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                let exclude = if cfg.targeted { label } else { usize::MAX };
                for (i, &v) in logits.iter().enumerate() {
                    if i != exclude && (cfg.targeted || i != label) && v > best_v {
                        best_v = v;
                        best_i = i;
                    }
                }
                best_i
            };

            let mut tape = Tape::new();
            let w = tape.leaf(omega.clone(), true);
            let t = tape.tanh(w);
            let scaled = tape.scale(t, half);
            let adv = tape.add_scalar(scaled, mid);
            let x_const = tape.constant(x.clone());
            let eta = tape.sub(adv, x_const)?;
            let eta_sq = tape.mul(eta, eta)?;
            let l2_term = tape.sum(eta_sq);
            let logits_var = c.forward_on_tape(&mut tape, adv, None)?;
            // targeted margin: max_{i≠l'} z_i − z_{l'}; untargeted: z_l − max_{i≠l} z_i
            let (pos, neg) = if cfg.targeted { (other, label) } else { (label, other) };
            let z_pos = tape.gather(logits_var, vec![pos])?;
            let z_neg = tape.gather(logits_var, vec![neg])?;
            let diff = tape.sub(z_pos, z_neg)?;
            // max(a, −κ) = relu(a + κ) − κ; the constant −κ drops out of the gradient
            let shifted = tape.add_scalar(diff, cfg.kappa_cw);
            let hinged = tape.relu(shifted);
            let penalty = tape.scale(hinged, c_val);
            let loss = tape.add(l2_term, penalty)?;
            tape.backward(loss)?;
            let grad = tape
                .grad(w)
                .ok_or_else(|| Error::invalid("penalty objective has no input gradient".to_string()))?;
            let mut params = [omega.clone()];
            opt.step(&mut params, &[grad])?;
            omega = params[0].clone();

            if cfg.beta > 0.0 {
                // elastic L1 handled by soft-thresholding the perturbation
                let thresh = cfg.beta * PENALTY_LR;
                let mut adv_px = omega.map(|v| mid + half * v.tanh());
                for (a, &o) in adv_px.data_mut().iter_mut().zip(x.data()) {
                    let d = *a - o;
                    let shrunk = if d > thresh {
                        d - thresh
                    } else if d < -thresh {
                        d + thresh
                    } else {
                        0.0
                    };
                    *a = (o + shrunk).clamp(cfg.lo, cfg.hi);
                }
                omega = adv_px.map(to_omega);
            }

            let candidate = omega.map(|v| mid + half * v.tanh()).clamped(cfg.lo, cfg.hi);
            if margin_satisfied(c, &candidate, label, cfg.targeted)? {
                let d = candidate.l2_dist(x);
                if round_best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                    round_best = Some((d, candidate));
                }
            }
        }
        last = omega.map(|v| mid + half * v.tanh()).clamped(cfg.lo, cfg.hi);
        let succeeded = round_best.is_some();
        if let Some((d, adv)) = round_best {
            if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, adv));
            }
        }
        // halve the confidence weight on success, double on failure
        c_val = if succeeded { c_val * 0.5 } else { c_val * 2.0 };
        c_val = c_val.clamp(C_MIN, C_MAX);
    }
    Ok(best.map(|(_, adv)| adv).unwrap_or(last))
}

/// Runs the configured family against the surrogate. `label` is the true
/// label for untargeted attacks and the wanted label for targeted ones.
pub fn run_attack(c: &Classifier, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    match cfg.family {
        Family::Fgsm => fgsm(c, x, label, cfg),
        Family::Bim | Family::Pgd | Family::Mim => iterative_attack(c, x, label, cfg),
        Family::Cw | Family::Ead => penalty_attack(c, x, label, cfg),
    }
}

/// Judges a crafted example against the victim. An abstention (⊥) always
/// counts as attack failure.
pub fn evaluate(
    victim: &dyn LabelModel,
    x: &Tensor,
    adversarial: &Tensor,
    true_label: usize,
    target: Option<usize>,
) -> Result<AdvResult> {
    let final_label = victim.decide(adversarial)?;
    let success = match (target, final_label) {
        (_, None) => false,
        (Some(t), Some(l)) => l == t && t != true_label,
        (None, Some(l)) => l != true_label,
    };
    Ok(AdvResult {
        adversarial: adversarial.clone(),
        success,
        final_label,
        linf: adversarial.linf_dist(x),
        l2: adversarial.l2_dist(x),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{NetworkSpec, TrainConfig};
    use crate::dataio::synth_blobs;

    /// Hand-built 2-class linear model over a flat image: logits = [w·x, −w·x].
    fn linear_model(w: &[f64]) -> Classifier {
        let n = w.len();
        let spec = NetworkSpec::dense_preset((1, n, 1), &[], 2);
        let mut weight = Tensor::zeros(vec![n, 2]);
        for (i, &v) in w.iter().enumerate() {
            weight.data_mut()[i * 2] = v;
            weight.data_mut()[i * 2 + 1] = -v;
        }
        let bias = Tensor::zeros(vec![1, 2]);
        Classifier {
            spec,
            params: vec![weight, bias],
            label_map: vec!["class_0".to_string(), "class_1".to_string()],
        }
    }

    fn cfg(family: Family) -> AttackConfig {
        AttackConfig::from_profile(family, false, &crate::dataio::DatasetProfile::fashion_like().attack)
    }

    #[test]
    fn zero_eps_is_identity() {
        let c = linear_model(&[1.0, -2.0, 0.5]);
        let x = Tensor::new(vec![1, 3, 1], vec![0.1, -0.2, 0.3]).unwrap();
        let mut a = cfg(Family::Fgsm);
        a.eps = 0.0;
        let adv = run_attack(&c, &x, 0, &a).unwrap();
        assert_eq!(adv.data(), x.data());
        let r = evaluate(&c, &x, &adv, 0, None).unwrap();
        assert!(!r.success);
    }

    #[test]
    fn fgsm_moves_every_pixel_by_eps_along_logistic_gradient() {
        // untargeted on true class 0: loss gradient wrt x is (p1 − 1{l=1})·(w_1−w_0)
        // = p1·(−2w); sign is −sign(w), so x' = x − ε·sign(w) elementwise.
        let w = [1.5, -0.7, 0.2, -3.0];
        let c = linear_model(&w);
        let x = Tensor::new(vec![1, 4, 1], vec![0.05, 0.0, -0.1, 0.2]).unwrap();
        let mut a = cfg(Family::Fgsm);
        a.eps = 0.02;
        let adv = run_attack(&c, &x, 0, &a).unwrap();
        for i in 0..4 {
            let expected = (x.data()[i] - 0.02 * sign(w[i])).clamp(-0.5, 0.5);
            assert!((adv.data()[i] - expected).abs() < 1e-12, "pixel {}", i);
        }
    }

    #[test]
    fn fgsm_target_direction_is_antisymmetric() {
        let c = linear_model(&[1.0, -1.0, 2.0]);
        let x = Tensor::new(vec![1, 3, 1], vec![0.0, 0.1, -0.1]).unwrap();
        let mut unt = cfg(Family::Fgsm);
        unt.eps = 0.03;
        let mut tgt = unt.clone();
        tgt.targeted = true;
        let a = run_attack(&c, &x, 0, &unt).unwrap();
        // targeting the true class descends the same loss the untargeted
        // attack ascends, so every moved pixel flips direction
        let b = run_attack(&c, &x, 0, &tgt).unwrap();
        for i in 0..3 {
            let da = a.data()[i] - x.data()[i];
            let db = b.data()[i] - x.data()[i];
            if da != 0.0 {
                assert!((da + db).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_iteration_matches_fgsm() {
        let c = linear_model(&[0.9, -1.3, 0.4, 0.0]);
        let x = Tensor::new(vec![1, 4, 1], vec![0.2, -0.3, 0.0, 0.1]).unwrap();
        for family in [Family::Bim, Family::Mim] {
            let mut it = cfg(family);
            it.iterations = 1;
            it.eps = 0.04;
            let mut fg = cfg(Family::Fgsm);
            fg.eps = 0.04;
            let a = run_attack(&c, &x, 0, &it).unwrap();
            let b = run_attack(&c, &x, 0, &fg).unwrap();
            assert_eq!(a.data(), b.data(), "{:?}", family);
        }
        // projected variant with no random start also degenerates
        let mut pg = cfg(Family::Pgd);
        pg.iterations = 1;
        pg.eps = 0.04;
        pg.pgd_r_init = 0.0;
        let mut fg = cfg(Family::Fgsm);
        fg.eps = 0.04;
        let a = run_attack(&c, &x, 0, &pg).unwrap();
        let b = run_attack(&c, &x, 0, &fg).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn momentum_with_zero_gradient_stays_put() {
        let c = linear_model(&[0.0, 0.0]);
        let x = Tensor::new(vec![1, 2, 1], vec![0.1, -0.1]).unwrap();
        let a = run_attack(&c, &x, 0, &cfg(Family::Mim)).unwrap();
        assert_eq!(a.data(), x.data());
    }

    #[test]
    fn linf_budget_respected_over_random_runs() {
        let data = synth_blobs(2, 24, 6, 3).unwrap();
        let spec = NetworkSpec::small_preset((6, 6, 1), 2);
        let model = crate::models::train(
            &spec,
            &data,
            &TrainConfig { epochs: 2, batch_size: 12, seed: 4, ..Default::default() },
        )
        .unwrap();
        for family in [Family::Fgsm, Family::Bim, Family::Pgd, Family::Mim] {
            let mut a = cfg(family);
            a.iterations = 4;
            for (i, x) in data.images.iter().take(25).enumerate() {
                a.seed = i as u64;
                let adv = run_attack(&model, x, data.labels[i], &a).unwrap();
                let budget = a.linf_budget();
                assert!(adv.linf_dist(x) <= budget + 1e-9, "{:?}", family);
                assert!(adv.data().iter().all(|v| (-0.5..=0.5).contains(v)));
            }
        }
    }

    #[test]
    fn penalty_attack_approaches_hyperplane_distance() {
        // for logits [w·x, −w·x] the boundary is w·x = 0 and the minimal
        // L2 perturbation from x has length |w·x| / ‖w‖₂
        let w = [0.8, -0.5, 1.1, 0.3];
        let c = linear_model(&w);
        let x = Tensor::new(vec![1, 4, 1], vec![0.12, -0.04, 0.2, 0.05]).unwrap();
        let margin: f64 = w.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let wnorm: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let closed_form = margin.abs() / wnorm;
        let mut a = cfg(Family::Cw);
        a.penalty_iterations = 300;
        let adv = run_attack(&c, &x, 0, &a).unwrap();
        let r = evaluate(&c, &x, &adv, 0, None).unwrap();
        assert!(r.success);
        assert!(r.l2 <= closed_form * 1.05, "got {} want <= {}", r.l2, closed_form * 1.05);
    }

    #[test]
    fn zero_beta_elastic_equals_plain_penalty() {
        let c = linear_model(&[1.0, -0.6]);
        let x = Tensor::new(vec![1, 2, 1], vec![0.1, 0.2]).unwrap();
        let mut cw = cfg(Family::Cw);
        cw.penalty_iterations = 50;
        let mut ead = cfg(Family::Ead);
        ead.penalty_iterations = 50;
        ead.beta = 0.0;
        let a = run_attack(&c, &x, 0, &cw).unwrap();
        let b = run_attack(&c, &x, 0, &ead).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn elastic_term_sparsifies_perturbation() {
        let c = linear_model(&[1.0, 0.01, 0.01, 0.01]);
        let x = Tensor::new(vec![1, 4, 1], vec![0.1, 0.1, 0.1, 0.1]).unwrap();
        let mut ead = cfg(Family::Ead);
        ead.penalty_iterations = 200;
        ead.beta = 0.05;
        let adv = run_attack(&c, &x, 0, &ead).unwrap();
        let eta_l1: f64 = adv
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let mut cw = cfg(Family::Cw);
        cw.penalty_iterations = 200;
        let adv_cw = run_attack(&c, &x, 0, &cw).unwrap();
        let cw_l1: f64 = adv_cw
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(eta_l1 <= cw_l1 + 1e-9);
    }

    #[test]
    fn targeted_success_requires_exact_target() {
        let c = linear_model(&[2.0, 2.0]);
        let x = Tensor::new(vec![1, 2, 1], vec![0.3, 0.3]).unwrap();
        assert_eq!(c.label(&x).unwrap(), 0);
        let mut a = cfg(Family::Fgsm);
        a.targeted = true;
        a.eps = 0.4;
        let adv = run_attack(&c, &x, 1, &a).unwrap();
        let r = evaluate(&c, &x, &adv, 0, Some(1)).unwrap();
        assert_eq!(r.success, r.final_label == Some(1));
    }

    #[test]
    fn bad_label_rejected() {
        let c = linear_model(&[1.0]);
        let x = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        assert!(run_attack(&c, &x, 5, &cfg(Family::Fgsm)).is_err());
    }
}
