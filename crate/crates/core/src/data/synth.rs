//! Synthetic data with age and impairment as two parents of the features
//! (`A → X ← D`), plus an age → impairment dependence so older samples are
//! more often impaired.
//!
//! ```text
//! A ~ Normal(age_mean, age_sd),   s = (A − age_mean) / age_sd
//! D ~ Bernoulli(sigmoid(label_age_slope · s))
//! X = s · w_A + D · w_D + noise_sd · ε
//! ```
//!
//! `w_A` and `w_D` are dense random vectors with per-feature RMS equal to
//! `age_effect` and `disease_effect`. `confound_strength` ρ sets the cosine
//! between them: at ρ = 0 the disease shift is orthogonal to the age
//! direction, at ρ = 1 the two are indistinguishable in feature space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::nn::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub confound_strength: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub disease_effect: f64,
    pub age_effect: f64,
    pub label_age_slope: f64,
    pub noise_sd: f64,
    pub samples_per_speaker: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 400,
            d: 40,
            confound_strength: 0.3,
            age_mean: 68.26,
            age_sd: 9.0,
            disease_effect: 0.3,
            age_effect: 0.5,
            label_age_slope: 0.5,
            noise_sd: 1.0,
            samples_per_speaker: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.samples_per_speaker == 0 {
            return Err(Error::Config(
                "synthetic n, d and samples_per_speaker must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.confound_strength) {
            return Err(Error::Config("confound_strength must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("age_sd", self.age_sd),
            ("disease_effect", self.disease_effect),
            ("age_effect", self.age_effect),
            ("noise_sd", self.noise_sd),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number"
                )));
            }
        }
        if !self.age_mean.is_finite() || !self.label_age_slope.is_finite() {
            return Err(Error::Config(
                "age_mean and label_age_slope must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// The generative parameters, exported next to the data for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub age_weights: Vec<f64>,
    pub disease_weights: Vec<f64>,
    /// Realized cosine between the two weight vectors.
    pub weight_cosine: f64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub matrix: FeatureMatrix,
    pub truth: GroundTruth,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d;

    let gaussian =
        |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(rng)).collect() };
    let age_dir = unit(gaussian(&mut rng));
    let raw = gaussian(&mut rng);
    let along = dot(&raw, &age_dir);
    let orth_dir = unit(
        raw.iter()
            .zip(&age_dir)
            .map(|(r, a)| r - along * a)
            .collect(),
    );
    let rho = cfg.confound_strength;
    let ortho_weight = (1.0 - rho * rho).max(0.0).sqrt();
    let disease_dir: Vec<f64> = age_dir
        .iter()
        .zip(&orth_dir)
        .map(|(a, o)| rho * a + ortho_weight * o)
        .collect();
    let scale = (d as f64).sqrt();
    let age_weights: Vec<f64> = age_dir.iter().map(|v| v * cfg.age_effect * scale).collect();
    let disease_weights: Vec<f64> = disease_dir
        .iter()
        .map(|v| v * cfg.disease_effect * scale)
        .collect();

    let age_dist = Normal::new(cfg.age_mean, cfg.age_sd)
        .map_err(|e| Error::Config(format!("age distribution: {e}")))?;
    let mut ids = Vec::with_capacity(cfg.n);
    let mut speakers = Vec::with_capacity(cfg.n);
    let mut ages = Vec::with_capacity(cfg.n);
    let mut labels = Vec::with_capacity(cfg.n);
    let mut features = Tensor2::zeros(cfg.n, d);
    let mut speaker_age = 0.0;
    let mut speaker_label = 0u8;
    for i in 0..cfg.n {
        if i % cfg.samples_per_speaker == 0 {
            speaker_age = age_dist.sample(&mut rng);
            let s = if cfg.age_sd > 0.0 {
                (speaker_age - cfg.age_mean) / cfg.age_sd
            } else {
                0.0
            };
            let p = 1.0 / (1.0 + (-cfg.label_age_slope * s).exp());
            let coin = Bernoulli::new(p).map_err(|e| Error::Config(format!("label draw: {e}")))?;
            speaker_label = coin.sample(&mut rng) as u8;
        }
        let s = if cfg.age_sd > 0.0 {
            (speaker_age - cfg.age_mean) / cfg.age_sd
        } else {
            0.0
        };
        let dval = speaker_label as f64;
        for (j, x) in features.row_mut(i).iter_mut().enumerate() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *x = s * age_weights[j] + dval * disease_weights[j] + cfg.noise_sd * eps;
        }
        ids.push(format!("s{i:05}"));
        speakers.push(format!("spk{:05}", i / cfg.samples_per_speaker));
        ages.push(speaker_age);
        labels.push(speaker_label);
    }
    let names = (0..d).map(|j| format!("f{j}")).collect();
    let matrix = FeatureMatrix::new(ids, speakers, ages, labels, features, names)?;
    let weight_cosine = {
        let (na, nd) = (norm(&age_weights), norm(&disease_weights));
        if na > 0.0 && nd > 0.0 {
            dot(&age_weights, &disease_weights) / (na * nd)
        } else {
            0.0
        }
    };
    Ok(SynthDataset {
        matrix,
        truth: GroundTruth {
            config: cfg.clone(),
            age_weights,
            disease_weights,
            weight_cosine,
        },
    })
}
