//! Age grouping and the multi-group equalized-odds disentanglement score.
//!
//! For `N` age groups with false-positive rates `p_a` and false-negative rates
//! `n_a`, the score is
//!
//! ```text
//! Δ_eo^(N) = Σ_a |p_a − mean(p)| + Σ_a |n_a − mean(n)|
//! ```
//!
//! Lower is better; 0 means every group sees the same error profile. For
//! `N = 2` it reduces to `|p_0 − p_1| + |n_0 − n_1|`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rates at or below this are inside the envelope where the tighter `Δ ≤ N`
/// bound holds.
pub const NONTRIVIAL_RATE_LIMIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingStatus {
    /// Every group holds at least one positive and one negative.
    Valid,
    Degenerate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupComposition {
    pub negatives: usize,
    pub positives: usize,
}

/// Cut points splitting the age axis into `boundaries.len() + 1` groups.
/// Group `g` holds ages in `(b[g-1], b[g]]`, so an age equal to a cut point
/// belongs to the lower group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeGrouping {
    pub boundaries: Vec<f64>,
    pub composition: Vec<GroupComposition>,
    pub status: GroupingStatus,
}

impl AgeGrouping {
    pub fn from_boundaries(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.iter().any(|b| !b.is_finite()) {
            return Err(Error::Input("age boundaries must be finite".into()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input(format!(
                "age boundaries must be strictly increasing: {boundaries:?}"
            )));
        }
        let n = boundaries.len() + 1;
        Ok(Self {
            boundaries,
            composition: vec![GroupComposition::default(); n],
            status: GroupingStatus::Degenerate,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Zero-based group index of `age`.
    pub fn assign(&self, age: f64) -> usize {
        self.boundaries.partition_point(|&b| b < age)
    }

    /// Recounts label composition per group and refreshes `status`.
    pub fn tally(&mut self, ages: &[f64], labels: &[u8]) {
        let mut comp = vec![GroupComposition::default(); self.n_groups()];
        for (&age, &label) in ages.iter().zip(labels) {
            let g = self.assign(age);
            if label == 1 {
                comp[g].positives += 1;
            } else {
                comp[g].negatives += 1;
            }
        }
        self.status = if comp.iter().all(|c| c.positives > 0 && c.negatives > 0) {
            GroupingStatus::Valid
        } else {
            GroupingStatus::Degenerate
        };
        self.composition = comp;
    }
}

/// Linear-interpolation quantile of already sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn quantile_boundaries(sorted: &[f64], n_groups: usize) -> Vec<f64> {
    (1..n_groups)
        .map(|k| quantile_sorted(sorted, k as f64 / n_groups as f64))
        .collect()
}

/// Quantile-based age groups fit on the supplied ages, with a composition
/// check that every group mixes both labels.
pub fn make_age_groups(ages: &[f64], labels: &[u8], n_groups: usize) -> Result<AgeGrouping> {
    if n_groups < 1 {
        return Err(Error::Input(
            "number of age groups must be at least 1".into(),
        ));
    }
    if ages.len() != labels.len() {
        return Err(Error::dim(
            "make_age_groups labels",
            ages.len(),
            labels.len(),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Input(format!("label {bad} is not binary")));
    }
    if ages.iter().any(|a| !a.is_finite()) {
        return Err(Error::Input("ages must be finite".into()));
    }
    let mut sorted = ages.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < n_groups {
        return Err(Error::Input(format!(
            "{} distinct ages cannot form {n_groups} groups",
            distinct.len()
        )));
    }
    let mut boundaries = quantile_boundaries(&sorted, n_groups);
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        // heavy ties collapse sample quantiles; fall back to distinct ages
        boundaries = quantile_boundaries(&distinct, n_groups);
    }
    let mut grouping = AgeGrouping::from_boundaries(boundaries)?;
    grouping.tally(ages, labels);
    Ok(grouping)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub true_label: u8,
    pub pred_label: u8,
    pub age: f64,
}

impl PredictionRecord {
    fn validate(&self) -> Result<()> {
        if self.true_label > 1 || self.pred_label > 1 {
            return Err(Error::Input(format!(
                "record {} has a non-binary label",
                self.id
            )));
        }
        if !self.age.is_finite() {
            return Err(Error::Input(format!(
                "record {} has a non-finite age",
                self.id
            )));
        }
        Ok(())
    }
}

/// Reads prediction records from CSV with header `id,true_label,pred_label,age`.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            source_name: path.display().to_string(),
            message: format!("{other:?}"),
        },
    })?;
    let header = reader.headers()?.clone();
    let expected = ["id", "true_label", "pred_label", "age"];
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format {
            source_name: path.display().to_string(),
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        let rec: PredictionRecord = row.map_err(|e| Error::Format {
            source_name: path.display().to_string(),
            message: format!("row {}: {e}", i + 1),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            source_name: path.display().to_string(),
            message: format!("{other:?}"),
        },
    })?;
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub negatives: usize,
    pub positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Error profile of one age group. A rate is `None` when its denominator is
/// zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupOutcome {
    pub fp_rate: Option<f64>,
    pub fn_rate: Option<f64>,
    /// Present when the rates were tallied from predictions.
    pub counts: Option<OutcomeCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedOutcomes {
    pub groups: Vec<GroupOutcome>,
}

impl GroupedOutcomes {
    /// Builds outcomes straight from rate vectors, e.g. for analysis of
    /// reported numbers.
    pub fn from_rates(fp_rates: &[f64], fn_rates: &[f64]) -> Result<Self> {
        if fp_rates.len() != fn_rates.len() {
            return Err(Error::dim("from_rates", fp_rates.len(), fn_rates.len()));
        }
        if fp_rates.is_empty() {
            return Err(Error::Input("at least one group is required".into()));
        }
        if let Some(bad) = fp_rates
            .iter()
            .chain(fn_rates)
            .find(|r| !(0.0..=1.0).contains(*r))
        {
            return Err(Error::Input(format!("rate {bad} outside [0, 1]")));
        }
        Ok(Self {
            groups: fp_rates
                .iter()
                .zip(fn_rates)
                .map(|(&p, &n)| GroupOutcome {
                    fp_rate: Some(p),
                    fn_rate: Some(n),
                    counts: None,
                })
                .collect(),
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Mean of the defined false-positive rates.
    pub fn mean_fp_rate(&self) -> Option<f64> {
        mean(self.groups.iter().filter_map(|g| g.fp_rate))
    }

    /// Mean of the defined false-negative rates.
    pub fn mean_fn_rate(&self) -> Option<f64> {
        mean(self.groups.iter().filter_map(|g| g.fn_rate))
    }

    /// First group whose rates are not both defined.
    pub fn first_undefined(&self) -> Option<(usize, &'static str)> {
        self.groups
            .iter()
            .enumerate()
            .find_map(|(i, g)| match (g.fp_rate, g.fn_rate) {
                (None, _) => Some((i, "no actual negatives, false-positive rate undefined")),
                (_, None) => Some((i, "no actual positives, false-negative rate undefined")),
                _ => None,
            })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-group false-positive and false-negative rates from hard predictions.
pub fn grouped_rates(
    preds: &[PredictionRecord],
    grouping: &AgeGrouping,
) -> Result<GroupedOutcomes> {
    if preds.is_empty() {
        return Err(Error::Input("no predictions to group".into()));
    }
    let mut counts = vec![OutcomeCounts::default(); grouping.n_groups()];
    for rec in preds {
        rec.validate()?;
        let c = &mut counts[grouping.assign(rec.age)];
        match (rec.true_label, rec.pred_label) {
            (0, p) => {
                c.negatives += 1;
                c.false_positives += p as usize;
            }
            (_, p) => {
                c.positives += 1;
                c.false_negatives += (p == 0) as usize;
            }
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(GroupedOutcomes {
        groups: counts
            .into_iter()
            .map(|c| GroupOutcome {
                fp_rate: ratio(c.false_positives, c.negatives),
                fn_rate: ratio(c.false_negatives, c.positives),
                counts: Some(c),
            })
            .collect(),
    })
}

/// `Σ|p_a − p̂| + Σ|n_a − n̂|` over already validated rate vectors.
pub fn delta_eo_from_rates(fp_rates: &[f64], fn_rates: &[f64]) -> f64 {
    // |r_a − r̄| = |Σ_b (r_a − r_b)| / N. Summing pairwise differences keeps
    // the two-group case exact: it reduces to |r_0 − r_1| with no rounding.
    let spread = |rates: &[f64]| {
        let n = rates.len() as f64;
        rates
            .iter()
            .map(|a| rates.iter().map(|b| a - b).sum::<f64>().abs())
            .sum::<f64>()
            / n
    };
    spread(fp_rates) + spread(fn_rates)
}

/// The disentanglement score. Refuses groups with undefined rates.
pub fn delta_eo(outcomes: &GroupedOutcomes) -> Result<f64> {
    if outcomes.groups.is_empty() {
        return Err(Error::Input("no age groups".into()));
    }
    if let Some((group, reason)) = outcomes.first_undefined() {
        return Err(Error::DegenerateGroup {
            group,
            reason: reason.into(),
        });
    }
    let p: Vec<f64> = outcomes.groups.iter().filter_map(|g| g.fp_rate).collect();
    let n: Vec<f64> = outcomes.groups.iter().filter_map(|g| g.fn_rate).collect();
    Ok(delta_eo_from_rates(&p, &n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundRegime {
    /// Every group rate is at most 0.5 and the classifier is not trivial.
    NonTrivial,
    /// The caller flagged the classifier as trivial.
    Trivial,
    /// Some group rate exceeds 0.5; only the `2N` bound applies.
    OutsideEnvelope,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundDiagnostic {
    pub delta: f64,
    pub n_groups: usize,
    pub regime: BoundRegime,
    pub max_group_contribution: f64,
    /// `Δ ≤ 2N` and every group contributes at most 2.
    pub within_unconditional: bool,
    /// `Δ ≤ N`, checked only in the non-trivial regime.
    pub within_nontrivial: Option<bool>,
}

impl BoundDiagnostic {
    pub fn passed(&self) -> bool {
        self.within_unconditional && self.within_nontrivial.unwrap_or(true)
    }
}

/// Checks the score against its upper bounds: `2N` always, and `N` when the
/// classifier is non-trivial with every group error rate at most 0.5.
pub fn delta_eo_bound_check(
    outcomes: &GroupedOutcomes,
    classifier_is_trivial: bool,
) -> Result<BoundDiagnostic> {
    let delta = delta_eo(outcomes)?;
    let n = outcomes.n_groups();
    let p_hat = outcomes.mean_fp_rate().unwrap_or(0.0);
    let n_hat = outcomes.mean_fn_rate().unwrap_or(0.0);
    let tol = 1e-12;
    let max_group_contribution = outcomes
        .groups
        .iter()
        .map(|g| {
            (g.fp_rate.unwrap_or(0.0) - p_hat).abs() + (g.fn_rate.unwrap_or(0.0) - n_hat).abs()
        })
        .fold(0.0, f64::max);
    let in_envelope = outcomes.groups.iter().all(|g| {
        g.fp_rate.is_some_and(|p| p <= NONTRIVIAL_RATE_LIMIT)
            && g.fn_rate.is_some_and(|r| r <= NONTRIVIAL_RATE_LIMIT)
    });
    let regime = if classifier_is_trivial {
        BoundRegime::Trivial
    } else if in_envelope {
        BoundRegime::NonTrivial
    } else {
        BoundRegime::OutsideEnvelope
    };
    Ok(BoundDiagnostic {
        delta,
        n_groups: n,
        regime,
        max_group_contribution,
        within_unconditional: delta <= 2.0 * n as f64 + tol && max_group_contribution <= 2.0 + tol,
        within_nontrivial: (regime == BoundRegime::NonTrivial).then_some(delta <= n as f64 + tol),
    })
}

pub fn accuracy(preds: &[PredictionRecord]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Input("accuracy of no predictions".into()));
    }
    let correct = preds
        .iter()
        .filter(|p| p.true_label == p.pred_label)
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, truth: u8, pred: u8, age: f64) -> PredictionRecord {
        PredictionRecord {
            id: id.to_string(),
            true_label: truth,
            pred_label: pred,
            age,
        }
    }

    #[test]
    fn single_group_covers_everything() {
        let g = make_age_groups(&[50.0, 60.0, 70.0], &[0, 1, 0], 1).unwrap();
        assert_eq!(g.n_groups(), 1);
        assert!(g.boundaries.is_empty());
        assert_eq!(g.assign(-1e9), 0);
        assert_eq!(g.assign(1e9), 0);
        assert_eq!(g.status, GroupingStatus::Valid);
    }

    #[test]
    fn two_groups_split_at_median() {
        let ages: Vec<f64> = (1..=100).map(f64::from).collect();
        let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let g = make_age_groups(&ages, &labels, 2).unwrap();
        assert_eq!(g.boundaries, vec![50.5]);
        assert_eq!(g.composition[0].positives + g.composition[0].negatives, 50);
        assert_eq!(g.status, GroupingStatus::Valid);
    }

    #[test]
    fn ties_go_to_lower_group() {
        let g = AgeGrouping::from_boundaries(vec![60.0, 70.0]).unwrap();
        assert_eq!(g.assign(60.0), 0);
        assert_eq!(g.assign(60.0001), 1);
        assert_eq!(g.assign(70.0), 1);
        assert_eq!(g.assign(71.0), 2);
    }

    #[test]
    fn grouping_errors() {
        assert!(matches!(
            make_age_groups(&[1.0], &[0], 0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            make_age_groups(&[5.0, 5.0, 6.0], &[0, 1, 0], 3),
            Err(Error::Input(_))
        ));
        assert!(AgeGrouping::from_boundaries(vec![2.0, 2.0]).is_err());
    }

    #[test]
    fn heavy_ties_still_give_increasing_boundaries() {
        let mut ages = vec![70.0; 20];
        ages.extend([50.0, 60.0, 80.0]);
        let labels: Vec<u8> = (0..ages.len()).map(|i| (i % 2) as u8).collect();
        let g = make_age_groups(&ages, &labels, 3).unwrap();
        assert!(g.boundaries.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn unmixed_group_is_degenerate() {
        // old group holds only positives
        let g = make_age_groups(&[50.0, 51.0, 80.0, 81.0], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(g.status, GroupingStatus::Degenerate);
    }

    #[test]
    fn perfect_predictions_have_zero_rates() {
        let preds: Vec<_> = (0..10)
            .map(|i| rec(i, (i % 2) as u8, (i % 2) as u8, 50.0 + i as f64))
            .collect();
        let g = AgeGrouping::from_boundaries(vec![54.5]).unwrap();
        let out = grouped_rates(&preds, &g).unwrap();
        for grp in &out.groups {
            assert_eq!(grp.fp_rate, Some(0.0));
            assert_eq!(grp.fn_rate, Some(0.0));
        }
        assert_eq!(delta_eo(&out).unwrap(), 0.0);
        assert_eq!(accuracy(&preds).unwrap(), 1.0);
    }

    #[test]
    fn majority_classifier_rates() {
        // positive fraction λ = 0.3 < 0.5: trivial prediction is 0
        let preds: Vec<_> = (0..10).map(|i| rec(i, (i < 3) as u8, 0, 60.0)).collect();
        let out = grouped_rates(&preds, &AgeGrouping::from_boundaries(vec![]).unwrap()).unwrap();
        assert_eq!(out.groups[0].fp_rate, Some(0.0));
        // FN rate over actual positives is 1; as a share of all samples it is λ
        assert_eq!(out.groups[0].fn_rate, Some(1.0));
        let errors = out.groups[0].counts.unwrap().false_negatives as f64 / 10.0;
        assert_eq!(errors, 0.3);
    }

    #[test]
    fn hand_tallied_fixture() {
        // group 0 (age ≤ 60): negatives {1: FP, 2: ok}, positives {3: ok, 4: FN}
        // group 1 (age > 60): negatives {5: ok, 6: ok}, positives {7: FN, 8: FN}
        let preds = vec![
            rec(1, 0, 1, 55.0),
            rec(2, 0, 0, 58.0),
            rec(3, 1, 1, 60.0),
            rec(4, 1, 0, 52.0),
            rec(5, 0, 0, 61.0),
            rec(6, 0, 0, 75.0),
            rec(7, 1, 0, 70.0),
            rec(8, 1, 0, 66.0),
        ];
        let g = AgeGrouping::from_boundaries(vec![60.0]).unwrap();
        let out = grouped_rates(&preds, &g).unwrap();
        assert_eq!(out.groups[0].fp_rate, Some(0.5));
        assert_eq!(out.groups[0].fn_rate, Some(0.5));
        assert_eq!(out.groups[1].fp_rate, Some(0.0));
        assert_eq!(out.groups[1].fn_rate, Some(1.0));
        // |0.5 − 0| + |0.5 − 1|
        assert_eq!(delta_eo(&out).unwrap(), 1.0);
        assert_eq!(accuracy(&preds).unwrap(), 4.0 / 8.0);
    }

    #[test]
    fn hand_arithmetic_fixture() {
        let out = GroupedOutcomes::from_rates(&[0.1, 0.3], &[0.2, 0.2]).unwrap();
        assert!((delta_eo(&out).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn one_group_scores_zero() {
        let out = GroupedOutcomes::from_rates(&[0.37], &[0.11]).unwrap();
        assert_eq!(delta_eo(&out).unwrap(), 0.0);
    }

    #[test]
    fn undefined_group_is_refused() {
        let preds = vec![rec(1, 0, 0, 50.0), rec(2, 1, 1, 50.0), rec(3, 1, 1, 80.0)];
        let g = AgeGrouping::from_boundaries(vec![60.0]).unwrap();
        let out = grouped_rates(&preds, &g).unwrap();
        assert_eq!(out.groups[1].fp_rate, None);
        assert!(matches!(
            delta_eo(&out),
            Err(Error::DegenerateGroup { group: 1, .. })
        ));
    }

    #[test]
    fn empty_inputs_rejected() {
        let g = AgeGrouping::from_boundaries(vec![]).unwrap();
        assert!(grouped_rates(&[], &g).is_err());
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn accuracy_counts() {
        let all_wrong = vec![rec(1, 0, 1, 1.0), rec(2, 1, 0, 1.0)];
        assert_eq!(accuracy(&all_wrong).unwrap(), 0.0);
        let three_of_four = vec![
            rec(1, 0, 0, 1.0),
            rec(2, 1, 1, 1.0),
            rec(3, 1, 1, 1.0),
            rec(4, 1, 0, 1.0),
        ];
        assert_eq!(accuracy(&three_of_four).unwrap(), 0.75);
    }

    #[test]
    fn bounds_on_perfect_and_alternating_extremes() {
        let perfect = GroupedOutcomes::from_rates(&[0.0; 4], &[0.0; 4]).unwrap();
        let d = delta_eo_bound_check(&perfect, false).unwrap();
        assert_eq!(d.delta, 0.0);
        assert_eq!(d.regime, BoundRegime::NonTrivial);
        assert!(d.passed());

        let n = 6;
        let p: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let q: Vec<f64> = (0..n).map(|i| ((i + 1) % 2) as f64).collect();
        let out = GroupedOutcomes::from_rates(&p, &q).unwrap();
        let d = delta_eo_bound_check(&out, true).unwrap();
        // every rate sits 0.5 from its mean, so Δ = N: the largest value any
        // rate vector can reach, half of the unconditional 2N bound
        assert_eq!(d.delta, n as f64);
        assert_eq!(d.regime, BoundRegime::Trivial);
        assert!(d.passed());
        let d = delta_eo_bound_check(&out, false).unwrap();
        assert_eq!(d.regime, BoundRegime::OutsideEnvelope);
        assert!(d.within_nontrivial.is_none());
    }

    #[test]
    fn predictions_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        let preds = vec![rec(1, 0, 1, 55.25), rec(2, 1, 1, 70.0)];
        write_predictions(&path, &preds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,true_label,pred_label,age\n"));
        assert_eq!(read_predictions(&path).unwrap(), preds);
    }
}
