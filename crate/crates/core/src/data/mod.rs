//! Feature tables, normalization, speaker-grouped folds and the synthetic
//! confounded-data generator.

mod folds;
mod io;
mod norm;
mod synth;

pub use folds::{speaker_kfold, FoldPlan};
pub use io::{load_csv, save_csv, LoadReport};
pub use norm::{zscore_apply, zscore_fit, NormStats};
pub use synth::{generate_synthetic, GroundTruth, SynthConfig, SynthDataset};

use crate::error::{Error, Result};
use crate::nn::Tensor2;

/// One row per sample: identity, speaker, age in years, binary label
/// (0 = control, 1 = impaired) and a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub speakers: Vec<String>,
    pub ages: Vec<f64>,
    pub labels: Vec<u8>,
    pub features: Tensor2,
    pub feature_names: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(
        ids: Vec<String>,
        speakers: Vec<String>,
        ages: Vec<f64>,
        labels: Vec<u8>,
        features: Tensor2,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let m = Self {
            ids,
            speakers,
            ages,
            labels,
            features,
            feature_names,
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds a matrix with generated ids/speakers and `f0..` feature names.
    pub fn from_parts(ages: Vec<f64>, labels: Vec<u8>, features: Tensor2) -> Result<Self> {
        let n = ages.len();
        let ids = (0..n).map(|i| format!("s{i:05}")).collect();
        let speakers = (0..n).map(|i| format!("spk{i:05}")).collect();
        let names = (0..features.cols()).map(|j| format!("f{j}")).collect();
        Self::new(ids, speakers, ages, labels, features, names)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        for (what, len) in [
            ("speakers", self.speakers.len()),
            ("ages", self.ages.len()),
            ("labels", self.labels.len()),
            ("feature rows", self.features.rows()),
        ] {
            if len != n {
                return Err(Error::dim(format!("FeatureMatrix {what}"), n, len));
            }
        }
        if self.feature_names.len() != self.features.cols() {
            return Err(Error::dim(
                "FeatureMatrix feature names",
                self.features.cols(),
                self.feature_names.len(),
            ));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::Input(format!("label {bad} is not binary")));
        }
        if self.ages.iter().any(|a| !a.is_finite()) || !self.features.is_finite() {
            return Err(Error::Numeric("feature matrix".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let pick = |v: &[String]| indices.iter().map(|&i| v[i].clone()).collect();
        FeatureMatrix {
            ids: pick(&self.ids),
            speakers: pick(&self.speakers),
            ages: indices.iter().map(|&i| self.ages[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            features: self.features.select_rows(indices),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Same samples, different feature block (e.g. learned representations).
    pub fn with_features(&self, features: Tensor2) -> Result<FeatureMatrix> {
        let names = (0..features.cols()).map(|j| format!("z{j}")).collect();
        FeatureMatrix::new(
            self.ids.clone(),
            self.speakers.clone(),
            self.ages.clone(),
            self.labels.clone(),
            features,
            names,
        )
    }

    pub fn positive_fraction(&self) -> f64 {
        self.labels.iter().map(|&l| l as f64).sum::<f64>() / self.len().max(1) as f64
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}
