use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fairness::{BoundRegime, GroupComposition, GroupingStatus};
use crate::models::{EpochLosses, ModalitySplit, ModelKind, ProbeTarget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source: String,
    pub samples: usize,
    pub features: usize,
    pub speakers: usize,
    pub positive_fraction: f64,
    pub dropped_rows: usize,
}

/// Age groups fit on one evaluation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingSummary {
    pub n_groups: usize,
    pub boundaries: Vec<f64>,
    pub composition: Vec<GroupComposition>,
    pub status: Option<GroupingStatus>,
    /// Set when no grouping could be formed at all.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_positives: usize,
    pub test_positives: usize,
    pub train_seed: u64,
    pub groupings: Vec<GroupingSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaResult {
    pub n_groups: usize,
    pub value: Option<f64>,
    pub degenerate: bool,
    pub reason: Option<String>,
    pub regime: Option<BoundRegime>,
    pub within_bound: Option<bool>,
}

/// Probe scores for one fold: MAE in years for [`ProbeTarget::Age`],
/// accuracy for [`ProbeTarget::AgeAboveMean`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub target: ProbeTarget,
    pub on_representation: f64,
    pub on_features: f64,
    /// Constant predictor (training mean age or majority class).
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFold {
    pub fold: usize,
    pub accuracy: f64,
    pub deltas: Vec<DeltaResult>,
    pub diagnostics: Option<Diagnostics>,
    pub final_losses: Option<EpochLosses>,
    pub modality_split: Option<ModalitySplit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 with a single value.
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub n_groups: usize,
    pub summary: Option<Summary>,
    pub degenerate_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: Summary,
    pub deltas: Vec<DeltaSummary>,
    pub representation_probe: Option<Summary>,
    pub feature_probe: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub kind: ModelKind,
    pub folds: Vec<ModelFold>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub folds: Vec<FoldSummary>,
    pub models: Vec<ModelReport>,
    pub notes: Vec<String>,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(Summary {
        mean,
        std,
        count: values.len(),
    })
}

/// Aggregates per-fold values: accuracy over every fold, each score over the
/// folds where it is defined.
pub fn aggregate(folds: &[ModelFold], n_groups: &[usize]) -> Aggregate {
    let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let deltas = n_groups
        .iter()
        .map(|&n| {
            let entries: Vec<&DeltaResult> = folds
                .iter()
                .filter_map(|f| f.deltas.iter().find(|d| d.n_groups == n))
                .collect();
            let values: Vec<f64> = entries.iter().filter_map(|d| d.value).collect();
            DeltaSummary {
                n_groups: n,
                summary: summarize(&values),
                degenerate_folds: entries.iter().filter(|d| d.degenerate).count(),
            }
        })
        .collect();
    let rep: Vec<f64> = folds
        .iter()
        .filter_map(|f| f.diagnostics.as_ref().map(|d| d.on_representation))
        .collect();
    let feat: Vec<f64> = folds
        .iter()
        .filter_map(|f| f.diagnostics.as_ref().map(|d| d.on_features))
        .collect();
    Aggregate {
        accuracy: summarize(&acc).unwrap_or(Summary {
            mean: 0.0,
            std: 0.0,
            count: 0,
        }),
        deltas,
        representation_probe: summarize(&rep),
        feature_probe: summarize(&feat),
    }
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn model(&self, kind: ModelKind) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.kind == kind)
    }

    /// Recomputes every aggregate from the stored folds and re-checks the
    /// stored scores against their bounds.
    pub fn check_consistency(&self) -> Result<()> {
        for m in &self.models {
            let again = aggregate(&m.folds, &self.config.n_groups);
            if again != m.aggregate {
                return Err(Error::State(format!(
                    "aggregate of {} does not match its folds",
                    m.kind
                )));
            }
            for f in &m.folds {
                for d in &f.deltas {
                    let Some(v) = d.value else { continue };
                    let n = d.n_groups as f64;
                    let tight = d.regime == Some(BoundRegime::NonTrivial);
                    if !(0.0..=2.0 * n + 1e-12).contains(&v) || (tight && v > n + 1e-12) {
                        return Err(Error::State(format!(
                            "{} fold {} score {v} breaks the bound for {} groups",
                            m.kind, f.fold, d.n_groups
                        )));
                    }
                    if d.within_bound != Some(true) {
                        return Err(Error::State(format!(
                            "{} fold {} recorded a failed bound check",
                            m.kind, f.fold
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Results table with one row per model and one score column per group
    /// count, followed by the probe diagnostics.
    pub fn to_markdown(&self) -> String {
        let fmt = |s: &Summary| format!("{:.3} ± {:.3}", s.mean, s.std);
        let mut out = String::new();
        let _ = writeln!(out, "# Experiment report\n");
        let _ = writeln!(
            out,
            "Data: {} ({} samples, {} features, {} speakers, positive fraction {:.3}). {} folds, seed {}.\n",
            self.dataset.source,
            self.dataset.samples,
            self.dataset.features,
            self.dataset.speakers,
            self.dataset.positive_fraction,
            self.config.folds,
            self.config.seed
        );
        let mut header = String::from("| Model | Accuracy |");
        let mut rule = String::from("|---|---|");
        for n in &self.config.n_groups {
            let _ = write!(header, " Δ_eo^({n}) |");
            rule.push_str("---|");
        }
        let _ = writeln!(out, "{header}\n{rule}");
        for m in &self.models {
            let mut row = format!("| {} | {} |", m.kind, fmt(&m.aggregate.accuracy));
            for d in &m.aggregate.deltas {
                let cell = match &d.summary {
                    Some(s) => fmt(s),
                    None => "n/a".into(),
                };
                if d.degenerate_folds > 0 {
                    let _ = write!(row, " {cell} ({} degenerate) |", d.degenerate_folds);
                } else {
                    let _ = write!(row, " {cell} |");
                }
            }
            let _ = writeln!(out, "{row}");
        }
        let probed: Vec<&ModelReport> = self
            .models
            .iter()
            .filter(|m| m.aggregate.representation_probe.is_some())
            .collect();
        if !probed.is_empty() {
            let _ = writeln!(out, "\n## Age probes\n");
            let _ = writeln!(
                out,
                "| Model | Probe | On representation | On features |\n|---|---|---|---|"
            );
            for m in probed {
                let target = match m.folds.iter().find_map(|f| f.diagnostics.as_ref()) {
                    Some(d) if d.target == ProbeTarget::AgeAboveMean => "age-group accuracy",
                    _ => "age MAE (years)",
                };
                let rep = m
                    .aggregate
                    .representation_probe
                    .as_ref()
                    .map(fmt)
                    .unwrap_or_default();
                let feat = m
                    .aggregate
                    .feature_probe
                    .as_ref()
                    .map(fmt)
                    .unwrap_or_default();
                let _ = writeln!(out, "| {} | {target} | {rep} | {feat} |", m.kind);
            }
        }
        if !self.notes.is_empty() {
            let _ = writeln!(out, "\n## Notes\n");
            for n in &self.notes {
                let _ = writeln!(out, "- {n}");
            }
        }
        out
    }
}
