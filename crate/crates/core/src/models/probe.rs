//! Independent age probes: a fresh network trained to recover age from a
//! feature set (raw features or learned representations).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::minibatches;
use super::AgeStats;
use crate::data::{speaker_kfold, FeatureMatrix, NormStats};
use crate::error::{Error, Result};
use crate::nn::{l2_loss, nll_loss, AdamConfig, AdamState, Layer, Mode, Network, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    /// Regress age; the score is MAE in years.
    Age,
    /// Classify age above the training mean; the score is accuracy.
    AgeAboveMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    /// The training fold is split by speaker into this many parts and one is
    /// held out to pick the best epoch. 0 trains on everything and keeps the
    /// last epoch.
    pub validation_folds: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32, 8],
            epochs: 100,
            batch_size: 32,
            folds: 5,
            validation_folds: 5,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "probe needs epochs >= 1 and batch_size >= 2".into(),
            ));
        }
        if self.folds < 2 {
            return Err(Error::Config("probe needs at least 2 folds".into()));
        }
        if self.validation_folds == 1 {
            return Err(Error::Config(
                "probe validation_folds must be 0 or at least 2".into(),
            ));
        }
        self.adam.validate()
    }
}

/// Cross-validated probe scores next to the constant-predictor reference
/// (training-fold mean age, or majority over/under-mean class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub target: ProbeTarget,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub std: f64,
    pub reference_fold_scores: Vec<f64>,
    pub reference_mean: f64,
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains a probe on `train` and scores it on `test`. Features are z-scored
/// with training statistics. Returns `(probe score, reference score)`.
pub fn fit_probe(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    cfg: &ProbeConfig,
    target: ProbeTarget,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    if train.len() < 2 || test.is_empty() {
        return Err(Error::Input(
            "probe needs at least two training rows and one test row".into(),
        ));
    }
    if train.n_features() != test.n_features() {
        return Err(Error::dim(
            "probe test features",
            train.n_features(),
            test.n_features(),
        ));
    }
    let norm = NormStats::fit(&train.features)?;
    let x_train = norm.apply(&train.features)?;
    let x_test = norm.apply(&test.features)?;
    let ages = AgeStats::fit(&train.ages)?;
    let out_width = match target {
        ProbeTarget::Age => 1,
        ProbeTarget::AgeAboveMean => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::mlp(train.n_features(), &cfg.hidden, out_width, true, &mut rng)?;
    // A zero output layer starts the probe as the constant reference
    // predictor, so without learnable signal it has nothing to drift from.
    if let Some(Layer::Dense(last)) = net.layers_mut().last_mut() {
        last.weights = Tensor2::zeros(last.weights.rows(), last.weights.cols());
        last.bias.fill(0.0);
    }
    let mut opt = AdamState::new(cfg.adam);
    let age_z: Vec<f64> = train.ages.iter().map(|&a| ages.normalize(a)).collect();
    let age_cls: Vec<usize> = train.ages.iter().map(|&a| ages.above_mean(a)).collect();

    let (fit_rows, val_rows) = validation_split(train, cfg)?;
    let val_x = x_train.select_rows(&val_rows);
    let val_score = |net: &Network| -> Result<f64> {
        let out = net.infer(&val_x)?;
        Ok(match target {
            ProbeTarget::Age => {
                val_rows
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| (out.get(r, 0) - age_z[i]).abs())
                    .sum::<f64>()
                    / val_rows.len() as f64
            }
            ProbeTarget::AgeAboveMean => {
                nll_loss(
                    &out,
                    &val_rows.iter().map(|&i| age_cls[i]).collect::<Vec<_>>(),
                )?
                .0
            }
        })
    };
    let mut best = if val_rows.is_empty() {
        None
    } else {
        Some((val_score(&net)?, net.clone()))
    };

    for epoch in 0..cfg.epochs {
        for batch in minibatches(fit_rows.len(), cfg.batch_size, &mut rng) {
            let idx: Vec<usize> = batch.iter().map(|&b| fit_rows[b]).collect();
            let x = x_train.select_rows(&idx);
            let out = net.forward(&x, Mode::Train)?;
            let (loss, g) = match target {
                ProbeTarget::Age => {
                    let t =
                        Tensor2::from_vec(idx.len(), 1, idx.iter().map(|&i| age_z[i]).collect())?;
                    l2_loss(&out, &t)?
                }
                ProbeTarget::AgeAboveMean => {
                    nll_loss(&out, &idx.iter().map(|&i| age_cls[i]).collect::<Vec<_>>())?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "probe loss non-finite at epoch {epoch}"
                )));
            }
            net.backward(&g)?;
            opt.step_network(&mut net)?;
        }
        if let Some((best_score, best_net)) = &mut best {
            let score = val_score(&net)?;
            if score < *best_score {
                *best_score = score;
                *best_net = net.clone();
            }
        }
    }
    if let Some((_, best_net)) = best {
        net = best_net;
    }

    let out = net.infer(&x_test)?;
    match target {
        ProbeTarget::Age => {
            let n = test.len() as f64;
            let mae = (0..test.len())
                .map(|r| (ages.denormalize(out.get(r, 0)) - test.ages[r]).abs())
                .sum::<f64>()
                / n;
            let reference = test.ages.iter().map(|a| (a - ages.mean).abs()).sum::<f64>() / n;
            Ok((mae, reference))
        }
        ProbeTarget::AgeAboveMean => {
            let truth: Vec<usize> = test.ages.iter().map(|&a| ages.above_mean(a)).collect();
            let n = test.len() as f64;
            let correct = (0..test.len())
                .filter(|&r| usize::from(out.get(r, 1) > out.get(r, 0)) == truth[r])
                .count();
            let above = age_cls.iter().filter(|&&c| c == 1).count();
            let majority = usize::from(2 * above > age_cls.len());
            let reference = truth.iter().filter(|&&t| t == majority).count() as f64 / n;
            Ok((correct as f64 / n, reference))
        }
    }
}

/// Row positions used for fitting and for picking the epoch. Falls back to
/// fitting on everything when validation is off or there are too few
/// speakers to hold any out.
fn validation_split(train: &FeatureMatrix, cfg: &ProbeConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let all: Vec<usize> = (0..train.len()).collect();
    if cfg.validation_folds == 0 {
        return Ok((all, Vec::new()));
    }
    let mut speakers: Vec<&String> = train.speakers.iter().collect();
    speakers.sort_unstable();
    speakers.dedup();
    if speakers.len() < cfg.validation_folds.max(4) {
        return Ok((all, Vec::new()));
    }
    let plan = speaker_kfold(train, cfg.validation_folds, cfg.seed ^ 0x7a1d_a7e5)?;
    Ok((plan.train_indices(0), plan.test_indices(0)))
}

fn cross_validate(
    data: &FeatureMatrix,
    cfg: &ProbeConfig,
    target: ProbeTarget,
) -> Result<ProbeResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("probe needs data".into()));
    }
    let plan = speaker_kfold(data, cfg.folds, cfg.seed)?;
    let mut scores = Vec::with_capacity(cfg.folds);
    let mut reference = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let train = data.select(&plan.train_indices(fold));
        let test = data.select(&plan.test_indices(fold));
        let fold_cfg = ProbeConfig {
            seed: cfg.seed.wrapping_add(fold as u64 + 1),
            ..cfg.clone()
        };
        let (s, r) = fit_probe(&train, &test, &fold_cfg, target)?;
        scores.push(s);
        reference.push(r);
    }
    let (mean, std) = mean_std(&scores);
    let (reference_mean, _) = mean_std(&reference);
    Ok(ProbeResult {
        target,
        fold_scores: scores,
        mean,
        std,
        reference_fold_scores: reference,
        reference_mean,
    })
}

/// Speaker-grouped cross-validated age regression. Scores are MAE in years.
pub fn probe_age(data: &FeatureMatrix, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cross_validate(data, cfg, ProbeTarget::Age)
}

/// Speaker-grouped cross-validated over/under-mean age classification.
/// Scores are accuracies.
pub fn probe_age_group(data: &FeatureMatrix, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cross_validate(data, cfg, ProbeTarget::AgeAboveMean)
}
