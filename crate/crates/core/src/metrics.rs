//! ROC-AUC (global and per tier), relative accuracy change and MDAC.

use std::io::Write;

use rayon::prelude::*;

use crate::dataset::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::model::Dlrm;
use crate::tensor::ParamTensors;
use crate::tiering::{PerTier, Tier, TierAssignment};

/// Mann–Whitney AUC via rank sums with average ranks for ties.
///
/// Returns `Ok(None)` when the labels contain a single class.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<Option<f64>> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += avg * pos_in_group as f64;
        i = j;
    }
    let n_pos = n_pos as f64;
    let u = pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0;
    Ok(Some(u / (n_pos * n_neg as f64)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TierAuc {
    pub auc_total: Option<f64>,
    /// `None` when a tier's test set lacks one of the classes.
    pub auc_per_tier: PerTier<Option<f64>>,
    pub n_test_per_tier: PerTier<usize>,
}

/// Scores every client's test interactions and computes AUC per tier and
/// over the union.
pub fn per_tier_auc(
    model: &Dlrm,
    params: &ParamTensors,
    dataset: &Dataset,
    assignment: &TierAssignment,
) -> Result<TierAuc> {
    assignment.check_covers(dataset)?;
    let scored: Vec<(Tier, Vec<u8>, Vec<f64>)> = dataset
        .clients
        .par_iter()
        .filter(|c| !c.test.is_empty())
        .map(|c| {
            let tier = assignment.tier_of[&c.client_id];
            let labels = c.test.iter().map(|i| i.label).collect();
            let scores = model.logits(params, &c.test)?;
            Ok((tier, labels, scores))
        })
        .collect::<Result<_>>()?;
    if scored.is_empty() {
        return Err(Error::Empty("no test interactions".into()));
    }
    let mut labels: [Vec<u8>; 3] = Default::default();
    let mut scores: [Vec<f64>; 3] = Default::default();
    for (tier, l, s) in scored {
        labels[tier.index()].extend(l);
        scores[tier.index()].extend(s);
    }
    let per = |t: Tier| auc(&labels[t.index()], &scores[t.index()]);
    let all_labels: Vec<u8> = labels.concat();
    let all_scores: Vec<f64> = scores.concat();
    Ok(TierAuc {
        auc_total: auc(&all_labels, &all_scores)?,
        auc_per_tier: PerTier::new(per(Tier::Low)?, per(Tier::Mid)?, per(Tier::High)?),
        n_test_per_tier: PerTier::new(labels[0].len(), labels[1].len(), labels[2].len()),
    })
}

/// Labels and logits for a set of interactions; a convenience for callers
/// that want their own grouping.
pub fn score(
    model: &Dlrm,
    params: &ParamTensors,
    batch: &[Interaction],
) -> Result<(Vec<u8>, Vec<f64>)> {
    Ok((
        batch.iter().map(|i| i.label).collect(),
        model.logits(params, batch)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessReport {
    pub baseline: PerTier<Option<f64>>,
    pub treatment: PerTier<Option<f64>>,
    /// `(treatment - baseline) / baseline`, `None` for excluded tiers.
    pub rel_change: PerTier<Option<f64>>,
    pub mdac: f64,
    /// Tiers without a defined (and positive baseline) AUC in both runs.
    pub excluded: Vec<Tier>,
}

impl FairnessReport {
    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["tier", "baseline_auc", "treatment_auc", "rel_change"])?;
        self.write_rows(&mut wr)?;
        wr.flush()?;
        Ok(())
    }

    pub(crate) fn write_rows<W: Write>(&self, wr: &mut csv::Writer<W>) -> Result<()> {
        for t in Tier::ALL {
            wr.write_record([
                t.name().to_string(),
                fmt_opt(self.baseline.get(t)),
                fmt_opt(self.treatment.get(t)),
                fmt_opt(self.rel_change.get(t)),
            ])?;
        }
        wr.write_record(["mdac", "", "", &format!("{:.6}", self.mdac)])?;
        Ok(())
    }

    pub fn mdac_percent(&self) -> String {
        format!("{:.2}%", 100.0 * self.mdac)
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Relative accuracy change per tier and MDAC, the largest absolute
/// difference of relative change over pairs of comparable tiers.
pub fn fairness(
    baseline: &PerTier<Option<f64>>,
    treatment: &PerTier<Option<f64>>,
) -> Result<FairnessReport> {
    let rel = |t: Tier| match (baseline.get(t), treatment.get(t)) {
        (Some(b), Some(p)) if b > 0.0 => Some((p - b) / b),
        _ => None,
    };
    let rel_change = PerTier::new(rel(Tier::Low), rel(Tier::Mid), rel(Tier::High));
    let comparable: Vec<f64> = Tier::ALL
        .iter()
        .filter_map(|&t| rel_change.get(t))
        .collect();
    if comparable.len() < 2 {
        return Err(Error::invalid("fewer than two tiers have comparable AUC"));
    }
    let mut mdac = 0.0f64;
    for (i, a) in comparable.iter().enumerate() {
        for b in &comparable[i + 1..] {
            mdac = mdac.max((a - b).abs());
        }
    }
    Ok(FairnessReport {
        baseline: *baseline,
        treatment: *treatment,
        rel_change,
        mdac,
        excluded: Tier::ALL
            .into_iter()
            .filter(|&t| rel_change.get(t).is_none())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(l: f64, m: f64, h: f64) -> PerTier<Option<f64>> {
        PerTier::new(Some(l), Some(m), Some(h))
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc(&[1, 0, 1, 0], &[0.9, 0.8, 0.7, 0.1]).unwrap(),
            Some(0.75)
        );
        assert_eq!(auc(&[1, 0, 1, 0], &[0.3; 4]).unwrap(), Some(0.5));
        assert_eq!(
            auc(&[0, 0, 1, 1], &[0.1, 0.2, 0.8, 0.9]).unwrap(),
            Some(1.0)
        );
        assert_eq!(auc(&[1, 1], &[0.1, 0.2]).unwrap(), None);
        assert!(auc(&[1, 0], &[0.1]).is_err());
        assert!(auc(&[1, 0], &[0.1, f64::NAN]).is_err());
    }

    #[test]
    fn fairness_examples() {
        let base = t(0.6, 0.6, 0.6);
        let r = fairness(&base, &base).unwrap();
        assert_eq!(r.mdac, 0.0);
        assert_eq!(r.rel_change, t(0.0, 0.0, 0.0));

        let r = fairness(&base, &t(0.54, 0.6, 0.6)).unwrap();
        assert!((r.rel_change.low.unwrap() + 0.1).abs() < 1e-12);
        assert!((r.mdac - 0.1).abs() < 1e-12);
        assert_eq!(r.mdac_percent(), "10.00%");

        let b = t(0.7, 0.6, 0.8);
        let r = fairness(&b, &t(0.63, 0.54, 0.72)).unwrap();
        for t in Tier::ALL {
            assert!((r.rel_change.get(t).unwrap() + 0.1).abs() < 1e-12);
        }
        assert!(r.mdac < 1e-12);
    }

    #[test]
    fn undefined_tiers_are_excluded() {
        let base = PerTier::new(None, Some(0.6), Some(0.6));
        let r = fairness(&base, &t(0.5, 0.3, 0.6)).unwrap();
        assert_eq!(r.excluded, vec![Tier::Low]);
        assert!((r.mdac - 0.5).abs() < 1e-12);
        let only_one = PerTier::new(None, None, Some(0.6));
        assert!(fairness(&only_one, &t(0.5, 0.5, 0.5)).is_err());
    }
}
