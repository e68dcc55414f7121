//! Detection metrics over ID-oriented score lists (larger = more ID-like).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::InvalidInput("score lists must be nonempty".into()));
    }
    if id.iter().chain(ood).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counted ½ (the Mann-Whitney statistic, exact).
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let ood_sorted = sorted(ood);
    let mut wins = 0.0;
    for &s in id {
        let below = ood_sorted.partition_point(|&o| o < s);
        let not_above = ood_sorted.partition_point(|&o| o <= s);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (id.len() as f64 * ood.len() as f64))
}

/// Number of ID samples that must be accepted for a target TPR.
pub fn required_accepts(tpr: f64, n_id: usize) -> usize {
    ((tpr * n_id as f64 - 1e-9).ceil().max(1.0) as usize).min(n_id)
}

/// Fraction of OOD scores at or above the largest threshold that accepts at
/// least `⌈tpr·N_id⌉` ID samples.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr: f64) -> Result<f64> {
    check(id, ood)?;
    if !(0.0..=1.0).contains(&tpr) {
        return Err(Error::InvalidInput(format!("tpr must lie in [0, 1], got {tpr}")));
    }
    let mut desc = sorted(id);
    desc.reverse();
    let threshold = desc[required_accepts(tpr, id.len()) - 1];
    let accepted = ood.iter().filter(|&&o| o >= threshold).count();
    Ok(accepted as f64 / ood.len() as f64)
}

/// Shared-range histograms of the two score lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges in score units spanning the combined range.
    pub edges: Vec<f64>,
    /// Fraction of ID samples per bin.
    pub p_id: Vec<f64>,
    pub p_ood: Vec<f64>,
}

impl Histogram {
    /// `Σ_b min(p_id(b), p_ood(b))`.
    pub fn overlap(&self) -> f64 {
        self.p_id.iter().zip(&self.p_ood).map(|(a, b)| a.min(*b)).sum()
    }
}

pub fn histogram(id: &[f64], ood: &[f64], bins: usize) -> Result<Histogram> {
    check(id, ood)?;
    if bins == 0 {
        return Err(Error::InvalidInput("bins must be >= 1".into()));
    }
    let lo = id.iter().chain(ood).cloned().fold(f64::INFINITY, f64::min);
    let hi = id.iter().chain(ood).cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateRange);
    }
    let fill = |values: &[f64]| {
        let mut p = vec![0.0; bins];
        for &v in values {
            let t = (v - lo) / (hi - lo);
            let b = ((t * bins as f64).floor() as usize).min(bins - 1);
            p[b] += 1.0;
        }
        p.iter_mut().for_each(|x| *x /= values.len() as f64);
        p
    };
    Ok(Histogram {
        edges: (0..=bins)
            .map(|b| {
                if b == bins {
                    hi
                } else {
                    lo + (hi - lo) * b as f64 / bins as f64
                }
            })
            .collect(),
        p_id: fill(id),
        p_ood: fill(ood),
    })
}

/// Histogram-intersection overlap of the two score distributions, in `[0, 1]`.
pub fn overlap_area(id: &[f64], ood: &[f64], bins: usize) -> Result<f64> {
    Ok(histogram(id, ood, bins)?.overlap())
}

/// Evaluation summary. Serialized with sorted keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub auroc: f64,
    pub fpr95: f64,
    pub overlap_area: f64,
    pub bins: usize,
    /// Degrees.
    pub compactness: Option<f64>,
    pub far_id_fraction: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
    pub config_hash: Option<String>,
}

/// Inputs for [`make_report`].
#[derive(Clone, Debug, Default)]
pub struct ReportInputs<'a> {
    pub id_scores: &'a [f64],
    pub ood_scores: &'a [f64],
    pub bins: usize,
    pub compactness: Option<f64>,
    pub far_id_fraction: Option<f64>,
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Internal(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("auroc", self.auroc)?;
        unit("fpr95", self.fpr95)?;
        unit("overlap_area", self.overlap_area + 0.0)?;
        if let Some(f) = self.far_id_fraction {
            unit("far_id_fraction", f)?;
        }
        if let Some(c) = self.compactness {
            if !(0.0..=180.0).contains(&c) {
                return Err(Error::Internal(format!("compactness = {c} outside [0, 180]")));
            }
        }
        if self.n_id == 0 || self.n_ood == 0 {
            return Err(Error::Internal("report counts must be positive".into()));
        }
        Ok(())
    }

    /// Pretty JSON with keys in sorted order.
    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }
}

pub fn make_report(inputs: &ReportInputs<'_>) -> Result<EvalReport> {
    let report = EvalReport {
        auroc: auroc(inputs.id_scores, inputs.ood_scores)?,
        fpr95: fpr_at_tpr(inputs.id_scores, inputs.ood_scores, 0.95)?,
        overlap_area: overlap_area(inputs.id_scores, inputs.ood_scores, inputs.bins)?,
        bins: inputs.bins,
        compactness: inputs.compactness,
        far_id_fraction: inputs.far_id_fraction,
        n_id: inputs.id_scores.len(),
        n_ood: inputs.ood_scores.len(),
        config_hash: inputs.config_hash.clone(),
    };
    report.validate()?;
    Ok(report)
}
