//! Cross-validated experiments over several model kinds, report assembly and
//! the finite-difference self-check used by the CLI.

mod config;
mod report;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{DataSource, ExperimentConfig};
pub use report::{
    aggregate, summarize, Aggregate, DatasetSummary, DeltaResult, DeltaSummary, Diagnostics,
    ExperimentReport, FoldSummary, GroupingSummary, ModelFold, ModelReport, Summary,
};

use crate::data::{
    generate_synthetic, load_csv, speaker_kfold, zscore_apply, zscore_fit, FeatureMatrix,
};
use crate::error::{Error, Result};
use crate::fairness::{
    accuracy, delta_eo_bound_check, grouped_rates, make_age_groups, write_predictions, AgeGrouping,
    PredictionRecord,
};
use crate::models::{
    build, fit_probe, joint_objective_gradcheck_report, predict, train, write_history, AgeStats,
    ArchConfig, Batch, LossHistory, ModelKind, ProbeConfig, ProbeTarget, TrainConfig,
};
use crate::nn::gradcheck::relative_error;
use crate::nn::{
    cross_entropy, gradcheck_report, l2_loss, softmax_entropy, Conditioning, GradReport, Layer,
    Mode, Network,
};

/// Loads or generates the experiment data.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(FeatureMatrix, DatasetSummary)> {
    let (matrix, source, dropped) = match &cfg.source {
        DataSource::Csv(path) => {
            let r = load_csv(path)?;
            (r.matrix, path.display().to_string(), r.dropped_rows)
        }
        DataSource::Synthetic(_) => {
            let s = cfg.synth_config().expect("synthetic source");
            let ds = generate_synthetic(&s)?;
            (ds.matrix, format!("synthetic (seed {})", s.seed), 0)
        }
    };
    let mut speakers: Vec<&String> = matrix.speakers.iter().collect();
    speakers.sort_unstable();
    speakers.dedup();
    let summary = DatasetSummary {
        source,
        samples: matrix.len(),
        features: matrix.n_features(),
        speakers: speakers.len(),
        positive_fraction: matrix.positive_fraction(),
        dropped_rows: dropped,
    };
    Ok((matrix, summary))
}

/// Seed of every network trained in `fold`. All kinds share it so their
/// interpreters and classifiers start from identical weights.
pub fn fold_seed(master: u64, fold: usize) -> u64 {
    master.wrapping_mul(1_000_003).wrapping_add(fold as u64 + 1)
}

struct ModelOutput {
    fold: ModelFold,
    predictions: Vec<PredictionRecord>,
    history: LossHistory,
}

struct FoldOutput {
    summary: FoldSummary,
    models: Vec<ModelOutput>,
}

fn score_deltas(
    groupings: &[(usize, Result<AgeGrouping>)],
    records: &[PredictionRecord],
) -> Vec<DeltaResult> {
    let trivial = records
        .windows(2)
        .all(|w| w[0].pred_label == w[1].pred_label);
    groupings
        .iter()
        .map(|(n, g)| {
            let degenerate = |reason: String| DeltaResult {
                n_groups: *n,
                value: None,
                degenerate: true,
                reason: Some(reason),
                regime: None,
                within_bound: None,
            };
            let grouping = match g {
                Ok(g) => g,
                Err(e) => return degenerate(e.to_string()),
            };
            match grouped_rates(records, grouping).and_then(|o| delta_eo_bound_check(&o, trivial)) {
                Ok(b) => DeltaResult {
                    n_groups: *n,
                    value: Some(b.delta),
                    degenerate: false,
                    reason: None,
                    regime: Some(b.regime),
                    within_bound: Some(b.passed()),
                },
                Err(e) => degenerate(e.to_string()),
            }
        })
        .collect()
}

fn probe_target(kind: ModelKind) -> ProbeTarget {
    if kind.is_entropy() {
        ProbeTarget::AgeAboveMean
    } else {
        ProbeTarget::Age
    }
}

fn run_fold(
    cfg: &ExperimentConfig,
    data: &FeatureMatrix,
    train_idx: &[usize],
    test_idx: &[usize],
    fold: usize,
) -> Result<FoldOutput> {
    let train_raw = data.select(train_idx);
    let test_raw = data.select(test_idx);
    let stats = zscore_fit(&train_raw)?;
    let train_set = zscore_apply(&stats, &train_raw)?;
    let test_set = zscore_apply(&stats, &test_raw)?;
    let seed = fold_seed(cfg.seed, fold);

    let groupings: Vec<(usize, Result<AgeGrouping>)> = cfg
        .n_groups
        .iter()
        .map(|&n| (n, make_age_groups(&test_set.ages, &test_set.labels, n)))
        .collect();
    let probe_cfg = ProbeConfig {
        seed,
        ..cfg.probe.clone()
    };
    let mut feature_probe: Vec<(ProbeTarget, (f64, f64))> = Vec::new();
    if cfg.diagnostics {
        let mut targets: Vec<ProbeTarget> = cfg
            .models
            .iter()
            .filter(|k| k.has_adversary())
            .map(|&k| probe_target(k))
            .collect();
        targets.sort_by_key(|t| *t as u8);
        targets.dedup();
        for t in targets {
            feature_probe.push((t, fit_probe(&train_set, &test_set, &probe_cfg, t)?));
        }
    }

    let mut models = Vec::with_capacity(cfg.models.len());
    for &kind in &cfg.models {
        let tcfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let mut bundle = build(kind, data.n_features(), &tcfg)?;
        let history = train(&mut bundle, &train_set, &tcfg)
            .map_err(|e| Error::State(format!("{kind} fold {fold}: {e}")))?;
        let pred = predict(&bundle, &test_set.features)?;
        let records: Vec<PredictionRecord> = (0..test_set.len())
            .map(|i| PredictionRecord {
                id: test_set.ids[i].clone(),
                true_label: test_set.labels[i],
                pred_label: pred.labels[i],
                age: test_set.ages[i],
            })
            .collect();
        let diagnostics = match feature_probe.iter().find(|(t, _)| *t == probe_target(kind)) {
            Some(&(target, (on_features, reference))) if kind.has_adversary() => {
                let z_train = train_set.with_features(bundle.represent(&train_set.features)?)?;
                let z_test = test_set.with_features(bundle.represent(&test_set.features)?)?;
                let (on_representation, _) = fit_probe(&z_train, &z_test, &probe_cfg, target)?;
                Some(Diagnostics {
                    target,
                    on_representation,
                    on_features,
                    reference,
                })
            }
            _ => None,
        };
        models.push(ModelOutput {
            fold: ModelFold {
                fold,
                accuracy: accuracy(&records)?,
                deltas: score_deltas(&groupings, &records),
                diagnostics,
                final_losses: history.epochs.last().copied(),
                modality_split: bundle.split.clone(),
            },
            predictions: records,
            history,
        });
    }

    let count_pos = |m: &FeatureMatrix| m.labels.iter().filter(|&&l| l == 1).count();
    Ok(FoldOutput {
        summary: FoldSummary {
            fold,
            train_samples: train_set.len(),
            test_samples: test_set.len(),
            train_positives: count_pos(&train_set),
            test_positives: count_pos(&test_set),
            train_seed: seed,
            groupings: groupings
                .into_iter()
                .map(|(n, g)| match g {
                    Ok(g) => GroupingSummary {
                        n_groups: n,
                        boundaries: g.boundaries,
                        composition: g.composition,
                        status: Some(g.status),
                        error: None,
                    },
                    Err(e) => GroupingSummary {
                        n_groups: n,
                        boundaries: Vec::new(),
                        composition: Vec::new(),
                        status: None,
                        error: Some(e.to_string()),
                    },
                })
                .collect(),
        },
        models,
    })
}

const NOTES: [&str; 3] = [
    "Means and standard deviations are taken across folds (sample standard deviation); folds with an undefined group rate are excluded from the score aggregate and counted as degenerate.",
    "Age groups are quantile bins fit on each evaluation fold; an age equal to a cut point belongs to the lower group.",
    "Fold-wise spread mixes data and initialization variance, so it is not comparable to spreads measured across restarts on a fixed split.",
];

struct Outcome {
    report: ExperimentReport,
    folds: Vec<FoldOutput>,
}

fn execute(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let (data, dataset) = load_data(cfg)?;
    let plan = speaker_kfold(&data, cfg.folds, cfg.seed)?;
    let folds: Vec<FoldOutput> = (0..cfg.folds)
        .into_par_iter()
        .map(|f| run_fold(cfg, &data, &plan.train_indices(f), &plan.test_indices(f), f))
        .collect::<Result<Vec<_>>>()?;
    let models = cfg
        .models
        .iter()
        .enumerate()
        .map(|(mi, &kind)| {
            let per_fold: Vec<ModelFold> =
                folds.iter().map(|f| f.models[mi].fold.clone()).collect();
            ModelReport {
                kind,
                aggregate: aggregate(&per_fold, &cfg.n_groups),
                folds: per_fold,
            }
        })
        .collect();
    let report = ExperimentReport {
        config: cfg.clone(),
        dataset,
        folds: folds.iter().map(|f| f.summary.clone()).collect(),
        models,
        notes: NOTES.iter().map(|s| s.to_string()).collect(),
    };
    Ok(Outcome { report, folds })
}

/// Runs every requested model on every fold. Folds run in parallel; the
/// report is assembled in model order, then fold order. When `out_dir` is
/// set, writes `report.json`, `report.md`, per-fold predictions and loss
/// histories there.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let outcome = execute(cfg)?;
    if let Some(dir) = &cfg.out_dir {
        write_outputs(dir, &outcome)?;
    }
    Ok(outcome.report)
}

fn write_outputs(dir: &Path, outcome: &Outcome) -> Result<()> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(dir)?;
    let pred_dir = dir.join("predictions");
    let hist_dir = dir.join("histories");
    mkdir(&pred_dir)?;
    mkdir(&hist_dir)?;
    let json = dir.join("report.json");
    std::fs::write(&json, outcome.report.to_json()?).map_err(|e| Error::io(&json, e))?;
    let md = dir.join("report.md");
    std::fs::write(&md, outcome.report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    for f in &outcome.folds {
        for m in &f.models {
            let stem = format!("{}_fold{}", m.history.kind, f.summary.fold);
            write_predictions(&pred_dir.join(format!("{stem}.csv")), &m.predictions)?;
            write_history(&hist_dir.join(format!("{stem}.csv")), &m.history)?;
        }
    }
    Ok(())
}

/// One finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    /// Flat index, analytic and numeric value of the worst parameter.
    pub worst: (usize, f64, f64),
}

impl GradcheckCase {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Tolerance for cases whose loss is exactly quadratic in the parameters.
pub const QUADRATIC_TOLERANCE: f64 = 1e-7;
/// Tolerance for every other case.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Smallest ReLU input a fixture may have, ten times the difference step.
/// Central differences straddling a kink legitimately disagree with the
/// subgradient.
pub const KINK_MARGIN: f64 = 1e-3;
/// Smallest batch spread a fixture allows at any batchnorm input.
pub const MIN_BATCHNORM_SD: f64 = 0.4;

fn jitter_biases<R: Rng + ?Sized>(net: &mut Network, rng: &mut R) {
    for layer in net.layers_mut() {
        if let Layer::Dense(d) = layer {
            for b in &mut d.bias {
                *b = rng.random_range(-0.5..0.5);
            }
        }
    }
}

/// Draws candidates until one is a well-posed fixture and returns it with
/// its gradient reports. A fixture is well posed when every ReLU input clears
/// [`KINK_MARGIN`], no unit is active on every row (its bias would have an
/// identically zero gradient, so the comparison would only measure rounding
/// noise), every batchnorm input column spreads at least
/// [`MIN_BATCHNORM_SD`], and the difference quotients have converged: their
/// drift under a doubled step stays below half the tolerance. That last test never
/// looks at the analytic gradient, so a broken backward pass still fails.
fn well_posed<T, R, F, P, G>(
    what: &str,
    tolerance: f64,
    rng: &mut R,
    mut draw: F,
    profile: P,
    check: G,
) -> Result<(T, Vec<GradReport>)>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<T>,
    P: Fn(&T) -> Result<Conditioning>,
    G: Fn(&T) -> Result<Vec<GradReport>>,
{
    for _ in 0..2000 {
        let candidate = draw(rng)?;
        let c = profile(&candidate)?;
        if c.relu_margin < KINK_MARGIN
            || c.saturated_relu_units > 0
            || c.min_batchnorm_sd < MIN_BATCHNORM_SD
        {
            continue;
        }
        let reports = check(&candidate)?;
        if reports.iter().all(|r| r.oracle_drift < tolerance / 2.0) {
            return Ok((candidate, reports));
        }
    }
    Err(Error::State(format!(
        "could not draw a well-posed gradcheck fixture for {what}"
    )))
}

fn well_posed_network<R, G>(
    what: &str,
    rng: &mut R,
    hidden: &[usize],
    output: usize,
    x: &crate::nn::Tensor2,
    mode: Mode,
    check: G,
) -> Result<Vec<GradReport>>
where
    R: Rng + ?Sized,
    G: Fn(&Network) -> Result<Vec<GradReport>>,
{
    let (_, reports) = well_posed(
        what,
        GRADCHECK_TOLERANCE,
        rng,
        |rng| {
            let mut net = Network::mlp(x.cols(), hidden, output, true, rng)?;
            jitter_biases(&mut net, rng);
            if mode == Mode::Eval {
                net.forward(x, Mode::Train)?;
            }
            Ok(net)
        },
        |net| net.conditioning(x, mode),
        check,
    )?;
    Ok(reports)
}

/// Verifies every layer type, loss and joint training objective against
/// central finite differences on small seeded fixtures where the difference
/// quotient is a trustworthy oracle.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synth = crate::data::SynthConfig {
        n: 24,
        d: 5,
        seed,
        ..Default::default()
    };
    let data = generate_synthetic(&synth)?.matrix;
    let data = zscore_apply(&zscore_fit(&data)?, &data)?;
    let stats = AgeStats::fit(&data.ages)?;
    // Over the full z-scored table every L2 target column sums to zero, which
    // makes the true gradient of a pre-output batchnorm shift or output bias
    // exactly zero and leaves only rounding noise to compare. A sub-batch is
    // uncentred, like a real minibatch.
    let sub: Vec<usize> = (0..16).collect();
    let batch = Batch::from_matrix(&data, &sub, &stats);
    let x = &batch.x;
    let labels = &batch.labels;
    let mut cases = Vec::new();
    let mut push = |name: &str, report: GradReport, tol: f64| {
        let worst = (0..report.analytic.len())
            .map(|i| (i, report.analytic[i], report.numeric[i]))
            .max_by(|a, b| relative_error(a.1, a.2).total_cmp(&relative_error(b.1, b.2)))
            .unwrap_or((0, 0.0, 0.0));
        cases.push(GradcheckCase {
            name: name.into(),
            max_relative_error: report.max_relative_error,
            tolerance: tol,
            worst,
        })
    };

    // Offset so residuals, and with them the gradients, stay well away from
    // zero; only rounding separates the difference quotient of a quadratic
    // from the truth, and it is fixed in absolute terms.
    let target = crate::nn::Tensor2::from_vec(
        16,
        3,
        (0..48).map(|i| 3.0 + (i as f64 * 0.37).sin()).collect(),
    )?;
    let (_, linear) = well_posed(
        "the linear network",
        QUADRATIC_TOLERANCE,
        &mut rng,
        |rng| Network::mlp(5, &[], 3, false, rng),
        |net| net.conditioning(x, Mode::Train),
        |net| {
            Ok(vec![gradcheck_report(net, x, Mode::Train, |o| {
                l2_loss(o, &target)
            })?])
        },
    )?;
    for report in linear {
        push("dense, L2 loss", report, QUADRATIC_TOLERANCE);
    }
    let mut deep = well_posed_network(
        "the train-mode network",
        &mut rng,
        &[7, 6],
        2,
        x,
        Mode::Train,
        |net| {
            Ok(vec![
                gradcheck_report(net, x, Mode::Train, |o| cross_entropy(o, labels))?,
                gradcheck_report(net, x, Mode::Train, softmax_entropy)?,
            ])
        },
    )?
    .into_iter();
    for (name, report) in [
        "dense + relu + batchnorm (train), cross-entropy",
        "dense + relu + batchnorm (train), softmax entropy",
    ]
    .into_iter()
    .zip(&mut deep)
    {
        push(name, report, GRADCHECK_TOLERANCE);
    }
    let warmed = well_posed_network(
        "the eval-mode network",
        &mut rng,
        &[7, 6],
        2,
        x,
        Mode::Eval,
        |net| {
            Ok(vec![gradcheck_report(net, x, Mode::Eval, |o| {
                cross_entropy(o, labels)
            })?])
        },
    )?;
    for report in warmed {
        push(
            "dense + relu + batchnorm (eval), cross-entropy",
            report,
            GRADCHECK_TOLERANCE,
        );
    }
    let adversary =
        well_posed_network("the adversary", &mut rng, &[6], 1, x, Mode::Train, |net| {
            Ok(vec![gradcheck_report(net, x, Mode::Train, |o| {
                l2_loss(o, &batch.age_target)
            })?])
        })?;
    for report in adversary {
        push(
            "adversary, L2 on normalized age",
            report,
            GRADCHECK_TOLERANCE,
        );
    }

    let tcfg = TrainConfig {
        seed,
        modalities: 2,
        lambda_h: 0.5,
        adversary_weight: 0.9,
        reconstruction_weight: 0.7,
        discriminator_weight: 0.8,
        arch: ArchConfig {
            interpreter_hidden: vec![6],
            z_dim: 3,
            classifier_hidden: vec![4],
            adversary_hidden: vec![4],
            reconstructor_hidden: vec![5],
            discriminator_hidden: vec![4],
        },
        ..TrainConfig::default()
    };
    for kind in ModelKind::ALL {
        let (_, reports) = well_posed(
            &format!("the {kind} objective"),
            GRADCHECK_TOLERANCE,
            &mut rng,
            |rng| {
                let draw = TrainConfig {
                    seed: rng.random(),
                    ..tcfg.clone()
                };
                let mut b = build(kind, 5, &draw)?;
                for net in b.networks_mut() {
                    jitter_biases(net, rng);
                }
                Ok(b)
            },
            |b| b.conditioning(x),
            |b| Ok(vec![joint_objective_gradcheck_report(b, &batch, &tcfg)?]),
        )?;
        for report in reports {
            push(
                &format!("joint objective, {kind}"),
                report,
                GRADCHECK_TOLERANCE,
            );
        }
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for case in gradcheck_suite(3).unwrap() {
            assert!(case.passed(), "{}: {}", case.name, case.max_relative_error);
        }
    }

    #[test]
    fn fold_seeds_differ() {
        assert_ne!(fold_seed(0, 0), fold_seed(0, 1));
        assert_ne!(fold_seed(1, 0), fold_seed(0, 0));
    }
}
