//! Oracle abstraction plus the substitute-model pipelines. The attacker
//! never sees the target's parameters or score vectors — only labels (or
//! ⊥) through the query-counting oracle. The mixed pipeline grows its
//! training set by stepping each image along the sign of the substitute's
//! input gradient for the oracle's label; the pure pipeline trains on the
//! originally labeled data and spends zero training queries.

use crate::attacks::{self, AttackConfig, PIXEL_HI, PIXEL_LO};
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{self, Classifier, LabelModel, NetworkSpec, TrainConfig};
use crate::tensor::{sign, Tensor};
use crate::{exec, seeding};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};

pub struct Oracle<'a> {
    target: &'a dyn LabelModel,
    counter: AtomicU64,
    budget: Option<u64>,
}

impl<'a> Oracle<'a> {
    pub fn new(target: &'a dyn LabelModel, budget: Option<u64>) -> Self {
        Oracle {
            target,
            counter: AtomicU64::new(0),
            budget,
        }
    }

    pub fn queries(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }

    pub fn class_count(&self) -> usize {
        self.target.class_count()
    }

    /// Labels one input, spending one query.
    pub fn label(&self, x: &Tensor) -> Result<Option<usize>> {
        let used = self.counter.fetch_add(1, Ordering::SeqCst);
        if let Some(b) = self.budget {
            if used >= b {
                self.counter.fetch_sub(1, Ordering::SeqCst);
                return Err(Error::BudgetExhausted(b));
            }
        }
        self.target.decide(x)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub network: NetworkSpec,
    /// Augmentation step size λ.
    pub lambda: f64,
    /// Augmentation round count N.
    pub rounds: usize,
    pub train: TrainConfig,
    /// Cap on the growing training-set size (memory guard).
    pub max_set_size: usize,
}

impl SyntheticSpec {
    pub fn new(network: NetworkSpec, lambda: f64, rounds: usize, train: TrainConfig) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::invalid("lambda must be >= 0".to_string()));
        }
        if rounds == 0 {
            return Err(Error::invalid("round count must be >= 1".to_string()));
        }
        Ok(SyntheticSpec {
            network,
            lambda,
            rounds,
            train,
            max_set_size: usize::MAX,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticOutcome {
    pub model: Classifier,
    /// Training-set size after each augmentation round (starts at |X0|).
    pub set_sizes: Vec<usize>,
    pub oracle_queries: u64,
}

/// Iterative substitute training: each round labels the current set via
/// the oracle, trains the substitute on the non-⊥ pairs, then doubles the
/// set by stepping λ·sign along the substitute's input gradient of the
/// oracle-label logit. Deduplicated by exact bit pattern so λ=0 is a
/// fixed point.
pub fn train_synthetic(oracle: &Oracle, x0: &[Tensor], spec: &SyntheticSpec) -> Result<SyntheticOutcome> {
    if x0.is_empty() {
        return Err(Error::invalid("seed image set is empty".to_string()));
    }
    let start = oracle.queries();
    let mut current: Vec<Tensor> = x0.to_vec();
    let mut seen: HashSet<Vec<u64>> = current.iter().map(|t| t.bit_key()).collect();
    let mut sizes = vec![current.len()];
    let mut model = None;
    for round in 0..spec.rounds {
        let labels: Vec<Option<usize>> = exec::try_map(&current, |x| oracle.label(x))?;
        let mut images = Vec::new();
        let mut keep_labels = Vec::new();
        for (x, l) in current.iter().zip(&labels) {
            if let Some(l) = l {
                images.push(x.clone());
                keep_labels.push(*l);
            }
        }
        if images.is_empty() {
            return Err(Error::invalid(format!(
                "oracle abstained on every image in round {}",
                round
            )));
        }
        let data = LabeledDataset::new(
            images,
            keep_labels,
            oracle.class_count(),
            &format!("substitute-round{}", round),
        )?;
        let mut cfg = spec.train.clone();
        cfg.seed = seeding::derive(spec.train.seed, round as u64 + 1);
        let trained = models::train(&spec.network, &data, &cfg)?;

        let steps: Vec<Option<Tensor>> = exec::try_map_indexed(current.len(), |i| {
            let x = &current[i];
            let l = match labels[i] {
                Some(l) => l,
                None => return Ok(None), // ⊥-labeled points are not augmented
            };
            let g = trained.logit_input_grad(x, l)?;
            let mut nx = x.clone();
            for (v, gv) in nx.data_mut().iter_mut().zip(g.data()) {
                *v = (*v + spec.lambda * sign(*gv)).clamp(PIXEL_LO, PIXEL_HI);
            }
            Ok(Some(nx))
        })?;
        for nx in steps.into_iter().flatten() {
            if current.len() >= spec.max_set_size {
                break;
            }
            if seen.insert(nx.bit_key()) {
                current.push(nx);
            }
        }
        sizes.push(current.len());
        model = Some(trained);
    }
    Ok(SyntheticOutcome {
        model: model.expect("rounds >= 1"),
        set_sizes: sizes,
        oracle_queries: oracle.queries() - start,
    })
}

#[derive(Clone, Debug)]
pub struct CampaignRecord {
    pub sample_id: usize,
    pub true_label: usize,
    pub target_label_clean: Option<usize>,
    pub attack_family: attacks::Family,
    pub targeted: bool,
    pub success: bool,
    pub final_label: Option<usize>,
    pub linf_distortion: f64,
    pub l2_distortion: f64,
    pub queries: u64,
}

#[derive(Clone, Debug)]
pub struct CampaignReport {
    pub records: Vec<CampaignRecord>,
    pub training_queries: u64,
    pub set_sizes: Vec<usize>,
}

impl CampaignReport {
    pub fn success_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.success).count() as f64 / self.records.len() as f64
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(
            "sample_id,true_label,target_label_clean,attack_family,targeted,success,final_label,linf_distortion,l2_distortion,queries\n",
        );
        for r in &self.records {
            let target = r.target_label_clean.map(|t| t.to_string()).unwrap_or_default();
            let label = r.final_label.map(|l| l.to_string()).unwrap_or_else(|| "bottom".to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.sample_id,
                r.true_label,
                target,
                r.attack_family.name(),
                r.targeted,
                r.success,
                label,
                r.linf_distortion,
                r.l2_distortion,
                r.queries
            ));
        }
        out
    }
}

/// Picks an attack target uniformly among the non-true labels.
fn pick_target(true_label: usize, class_count: usize, rng: &mut ChaCha8Rng) -> usize {
    let j = rng.gen_range(0..class_count - 1);
    if j >= true_label {
        j + 1
    } else {
        j
    }
}

/// Crafts one adversarial example per eval sample on the substitute and
/// submits each to the target exactly once.
fn run_eval(
    target: &dyn LabelModel,
    substitute: &Classifier,
    eval_set: &LabeledDataset,
    atk: &AttackConfig,
    training_queries: u64,
    set_sizes: Vec<usize>,
    seed: u64,
) -> Result<CampaignReport> {
    if eval_set.is_empty() {
        return Err(Error::invalid("evaluation set is empty".to_string()));
    }
    let class_count = target.class_count();
    let records: Vec<CampaignRecord> = exec::try_map_indexed(eval_set.len(), |i| {
        let x = &eval_set.images[i];
        let true_label = eval_set.labels[i];
        let sample_seed = seeding::derive(seed, i as u64);
        let (attack_label, target_label) = if atk.targeted {
            let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(sample_seed, 0x7a9));
            let t = pick_target(true_label, class_count, &mut rng);
            (t, Some(t))
        } else {
            (true_label, None)
        };
        let mut cfg = atk.clone();
        cfg.seed = sample_seed;
        let adv = attacks::run_attack(substitute, x, attack_label, &cfg)?;
        let result = attacks::evaluate(target, x, &adv, true_label, target_label)?;
        Ok(CampaignRecord {
            sample_id: i,
            true_label,
            target_label_clean: target_label,
            attack_family: cfg.family,
            targeted: cfg.targeted,
            success: result.success,
            final_label: result.final_label,
            linf_distortion: result.linf,
            l2_distortion: result.l2,
            queries: 1, // one submission to the target per sample
        })
    })?;
    Ok(CampaignReport {
        records,
        training_queries,
        set_sizes,
    })
}

/// Pure pipeline: the attacker holds correctly labeled training data and
/// never queries the target while fitting the substitute.
pub fn pure_blackbox_campaign(
    target: &dyn LabelModel,
    train_data: &LabeledDataset,
    spec: &SyntheticSpec,
    atk: &AttackConfig,
    eval_set: &LabeledDataset,
    seed: u64,
) -> Result<CampaignReport> {
    let mut cfg = spec.train.clone();
    cfg.seed = seeding::derive(seed, 1);
    let substitute = models::train(&spec.network, train_data, &cfg)?;
    run_eval(target, &substitute, eval_set, atk, 0, vec![train_data.len()], seed)
}

/// Mixed pipeline: full iterative substitute training with oracle labels,
/// then the same craft-and-submit evaluation.
pub fn mixed_blackbox_campaign(
    target: &dyn LabelModel,
    x0: &[Tensor],
    spec: &SyntheticSpec,
    atk: &AttackConfig,
    eval_set: &LabeledDataset,
    seed: u64,
) -> Result<CampaignReport> {
    let oracle = Oracle::new(target, None);
    let mut spec = spec.clone();
    spec.train.seed = seeding::derive(seed, 2);
    let outcome = train_synthetic(&oracle, x0, &spec)?;
    run_eval(
        target,
        &outcome.model,
        eval_set,
        atk,
        outcome.oracle_queries,
        outcome.set_sizes,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Family;
    use crate::dataio::{synth_blobs, DatasetProfile};

    fn tiny_model(seed: u64) -> (Classifier, LabeledDataset) {
        let data = synth_blobs(2, 40, 6, seed);
        let data = data.unwrap();
        let spec = NetworkSpec::small_preset((6, 6, 1), 2);
        let cfg = TrainConfig { epochs: 3, batch_size: 16, seed, ..Default::default() };
        (models::train(&spec, &data, &cfg).unwrap(), data)
    }

    #[test]
    fn oracle_counts_every_query() {
        let (model, data) = tiny_model(7);
        let oracle = Oracle::new(&model, None);
        for x in data.images.iter().take(9) {
            assert!(oracle.label(x).unwrap().is_some()); // plain classifier never abstains
        }
        assert_eq!(oracle.queries(), 9);
    }

    #[test]
    fn oracle_budget_aborts() {
        let (model, data) = tiny_model(8);
        let oracle = Oracle::new(&model, Some(2));
        oracle.label(&data.images[0]).unwrap();
        oracle.label(&data.images[1]).unwrap();
        let err = oracle.label(&data.images[2]).unwrap_err();
        assert!(matches!(err, Error::BudgetExhausted(2)));
        assert_eq!(oracle.queries(), 2);
    }

    #[test]
    fn set_doubles_each_round_without_abstention() {
        let (model, data) = tiny_model(9);
        let oracle = Oracle::new(&model, None);
        let spec = SyntheticSpec::new(
            NetworkSpec::dense_preset((6, 6, 1), &[8], 2),
            0.1,
            2,
            TrainConfig { epochs: 2, batch_size: 8, seed: 1, ..Default::default() },
        )
        .unwrap();
        let x0: Vec<Tensor> = data.images[..16].to_vec();
        let out = train_synthetic(&oracle, &x0, &spec).unwrap();
        assert_eq!(out.set_sizes, vec![16, 32, 64]);
        // one query per image per labeling round: 16 + 32
        assert_eq!(out.oracle_queries, 48);
    }

    #[test]
    fn zero_lambda_is_a_fixed_point() {
        let (model, data) = tiny_model(10);
        let oracle = Oracle::new(&model, None);
        let spec = SyntheticSpec::new(
            NetworkSpec::dense_preset((6, 6, 1), &[8], 2),
            0.0,
            2,
            TrainConfig { epochs: 1, batch_size: 8, seed: 1, ..Default::default() },
        )
        .unwrap();
        let x0: Vec<Tensor> = data.images[..10].to_vec();
        let out = train_synthetic(&oracle, &x0, &spec).unwrap();
        assert_eq!(out.set_sizes, vec![10, 10, 10]);
    }

    #[test]
    fn pure_campaign_spends_no_training_queries() {
        let (model, data) = tiny_model(11);
        let spec = SyntheticSpec::new(
            NetworkSpec::dense_preset((6, 6, 1), &[8], 2),
            0.1,
            2,
            TrainConfig { epochs: 2, batch_size: 16, seed: 3, ..Default::default() },
        )
        .unwrap();
        let atk = AttackConfig::from_profile(Family::Fgsm, false, &DatasetProfile::synthetic().attack);
        let eval = data.take(12);
        let report = pure_blackbox_campaign(&model, &data, &spec, &atk, &eval, 5).unwrap();
        assert_eq!(report.training_queries, 0);
        assert_eq!(report.records.len(), 12);
        assert!(report.records.iter().all(|r| r.queries == 1));
        // recount oracle for the aggregate rate
        let hand = report.records.iter().filter(|r| r.success).count() as f64 / 12.0;
        assert_eq!(report.success_rate(), hand);
    }

    #[test]
    fn mixed_campaign_queries_match_size_trace() {
        let (model, data) = tiny_model(12);
        let spec = SyntheticSpec::new(
            NetworkSpec::dense_preset((6, 6, 1), &[8], 2),
            0.1,
            2,
            TrainConfig { epochs: 2, batch_size: 8, seed: 3, ..Default::default() },
        )
        .unwrap();
        let atk = AttackConfig::from_profile(Family::Fgsm, false, &DatasetProfile::synthetic().attack);
        let eval = data.take(8);
        let report =
            mixed_blackbox_campaign(&model, &data.images[..12], &spec, &atk, &eval, 6).unwrap();
        let expected: usize = report.set_sizes[..report.set_sizes.len() - 1].iter().sum();
        assert_eq!(report.training_queries, expected as u64);
    }

    #[test]
    fn campaign_is_reproducible() {
        let (model, data) = tiny_model(13);
        let spec = SyntheticSpec::new(
            NetworkSpec::dense_preset((6, 6, 1), &[8], 2),
            0.1,
            2,
            TrainConfig { epochs: 2, batch_size: 8, seed: 3, ..Default::default() },
        )
        .unwrap();
        let mut atk = AttackConfig::from_profile(Family::Pgd, false, &DatasetProfile::synthetic().attack);
        atk.iterations = 3;
        let eval = data.take(6);
        let a = mixed_blackbox_campaign(&model, &data.images[..8], &spec, &atk, &eval, 7).unwrap();
        let b = mixed_blackbox_campaign(&model, &data.images[..8], &spec, &atk, &eval, 7).unwrap();
        assert_eq!(a.csv(), b.csv());
    }

    #[test]
    fn targeted_records_carry_targets() {
        let (model, data) = tiny_model(14);
        let spec = SyntheticSpec::new(
            NetworkSpec::dense_preset((6, 6, 1), &[8], 2),
            0.1,
            1,
            TrainConfig { epochs: 2, batch_size: 8, seed: 3, ..Default::default() },
        )
        .unwrap();
        let mut atk = AttackConfig::from_profile(Family::Fgsm, true, &DatasetProfile::synthetic().attack);
        atk.targeted = true;
        let eval = data.take(10);
        let report = pure_blackbox_campaign(&model, &data, &spec, &atk, &eval, 9).unwrap();
        for r in &report.records {
            let t = r.target_label_clean.expect("targeted rows carry targets");
            assert_ne!(t, r.true_label);
        }
    }
}
