//! Defense-comparison arithmetic: clean accuracy, attacker success rate
//! over the abstention-aware result set, and the δ/γ score that folds the
//! clean-accuracy cost of a defense together with its residual attack
//! surface. Smaller δ is better; δ = γ + (p − γ)·α.

use crate::blackbox::CampaignRecord;
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::models::LabelModel;

/// Fraction of the test set labeled correctly; abstention counts as a miss.
pub fn clean_accuracy(model: &dyn LabelModel, test_set: &LabeledDataset) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::invalid("empty test set".to_string()));
    }
    let hits: Vec<bool> = exec::try_map_indexed(test_set.len(), |i| {
        Ok(model.decide(&test_set.images[i])? == Some(test_set.labels[i]))
    })?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// α over a completed campaign: the per-record success flags already
/// encode the targeted/untargeted predicate and treat ⊥ as failure.
pub fn attack_success_rate(records: &[CampaignRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("empty result set".to_string()));
    }
    Ok(records.iter().filter(|r| r.success).count() as f64 / records.len() as f64)
}

/// α from bare success flags (used when re-tallying persisted campaigns).
pub fn attack_success_rate_from_flags(flags: &[bool]) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::invalid("empty result set".to_string()));
    }
    Ok(flags.iter().filter(|s| **s).count() as f64 / flags.len() as f64)
}

/// γ = p − p_d and δ = γ + (p − γ)·α = γ + p_d·α.
pub fn delta(p: f64, p_d: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&p_d) || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("p, p_d, alpha must lie in [0,1]".to_string()));
    }
    if p_d > p {
        return Err(Error::invalid(format!("p_d {} exceeds p {}", p_d, p)));
    }
    let gamma = p - p_d;
    Ok((gamma, gamma + p_d * alpha))
}

#[derive(Clone, Debug)]
pub struct ReportRow {
    pub defense: String,
    pub attack: String,
    pub mode: String,
    pub p: f64,
    pub p_d: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
}

impl EvaluationReport {
    pub fn push(
        &mut self,
        defense: &str,
        attack: &str,
        mode: &str,
        p: f64,
        p_d: f64,
        alpha: f64,
    ) -> Result<()> {
        let (gamma, delta) = delta(p, p_d, alpha)?;
        self.rows.push(ReportRow {
            defense: defense.to_string(),
            attack: attack.to_string(),
            mode: mode.to_string(),
            p,
            p_d,
            gamma,
            alpha,
            delta,
        });
        Ok(())
    }

    /// Worst-case (largest) δ per defense: the score against the best
    /// known attack.
    pub fn best_attack_delta(&self, defense: &str) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.defense == defense)
            .map(|r| r.delta)
            .fold(None, |acc, d| Some(acc.map_or(d, |a: f64| a.max(d))))
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("defense,attack,mode,p,p_d,gamma,alpha,delta\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.defense, r.attack, r.mode, r.p, r.p_d, r.gamma, r.alpha, r.delta
            ));
        }
        out
    }

    /// (p_d, δ) pairs per defense for the accuracy-versus-robustness
    /// scatter view, using the best-attack δ.
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("defense,p_d,best_delta\n");
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.rows {
            if seen.contains(&r.defense.as_str()) {
                continue;
            }
            seen.push(&r.defense);
            let best = self.best_attack_delta(&r.defense).unwrap();
            out.push_str(&format!("{},{},{}\n", r.defense, r.p_d, best));
        }
        out
    }
}
