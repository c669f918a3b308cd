use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Fold assignment where every speaker's samples share one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub fold_of_sample: Vec<usize>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_sample.len())
            .filter(|&i| self.fold_of_sample[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_sample.len())
            .filter(|&i| self.fold_of_sample[i] != fold)
            .collect()
    }
}

/// Shuffles the distinct speakers with `seed` and deals them round-robin
/// into `k` folds.
pub fn speaker_kfold(m: &FeatureMatrix, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Input(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut speakers: Vec<&str> = m.speakers.iter().map(String::as_str).collect();
    speakers.sort_unstable();
    speakers.dedup();
    if speakers.len() < k {
        return Err(Error::Input(format!(
            "{} speakers cannot fill {k} folds",
            speakers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    speakers.shuffle(&mut rng);
    let fold_of_speaker: std::collections::BTreeMap<&str, usize> = speakers
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i % k))
        .collect();
    Ok(FoldPlan {
        k,
        fold_of_sample: m
            .speakers
            .iter()
            .map(|s| fold_of_speaker[s.as_str()])
            .collect(),
    })
}
