//! The fair-representation architectures and their alternating training
//! procedures.
//!
//! Every bundle has an interpreter `I` mapping features to a representation
//! `z` and a classifier `C` on `z`. The adversarial kinds add an adversary
//! `A` predicting age from `z`; the autoencoder and entropy kinds add a
//! reconstructor `R`; the consensus kind replaces `I` with one interpreter
//! per feature modality and adds a modality discriminator `D`.

mod persist;
mod probe;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, AdamConfig, Conditioning, Mode, Network, Tensor2};

pub use persist::{load_bundle, read_history, save_bundle, write_history, BUNDLE_FORMAT_VERSION};
pub use probe::{fit_probe, probe_age, probe_age_group, ProbeConfig, ProbeResult, ProbeTarget};
pub use train::{
    joint_objective_gradcheck, joint_objective_gradcheck_report, minibatches, train,
    train_autoencoder, train_baseline_dnn, train_consensus, train_entropy, train_simple, Batch,
    EpochLosses, JointLosses, LossHistory, Trainer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    BaselineDnn,
    Simple,
    Autoencoder,
    ConsensusNet,
    Entropy,
    EntropyBinary,
    EntropyHonly,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::BaselineDnn,
        ModelKind::Simple,
        ModelKind::Autoencoder,
        ModelKind::ConsensusNet,
        ModelKind::Entropy,
        ModelKind::EntropyBinary,
        ModelKind::EntropyHonly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::BaselineDnn => "baseline_dnn",
            ModelKind::Simple => "simple",
            ModelKind::Autoencoder => "autoencoder",
            ModelKind::ConsensusNet => "consensus_net",
            ModelKind::Entropy => "entropy",
            ModelKind::EntropyBinary => "entropy_binary",
            ModelKind::EntropyHonly => "entropy_honly",
        }
    }

    pub fn has_adversary(self) -> bool {
        self != ModelKind::BaselineDnn
    }

    pub fn has_reconstructor(self) -> bool {
        matches!(
            self,
            ModelKind::Autoencoder
                | ModelKind::Entropy
                | ModelKind::EntropyBinary
                | ModelKind::EntropyHonly
        )
    }

    pub fn is_entropy(self) -> bool {
        self.entropy_variant().is_some()
    }

    pub fn entropy_variant(self) -> Option<EntropyVariant> {
        match self {
            ModelKind::Entropy => Some(EntropyVariant::Full),
            ModelKind::EntropyBinary => Some(EntropyVariant::Binary),
            ModelKind::EntropyHonly => Some(EntropyVariant::EntropyOnly),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Input(format!("unknown model kind {s:?}")))
    }
}

/// Which terms of the entropy adversary loss are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyVariant {
    /// Cross-entropy plus `λ_H ·` entropy.
    Full,
    /// Cross-entropy only.
    Binary,
    /// `λ_H ·` entropy only.
    EntropyOnly,
}

/// Hidden widths of every component network. The representation width is
/// `z_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub interpreter_hidden: Vec<usize>,
    pub z_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub adversary_hidden: Vec<usize>,
    pub reconstructor_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            interpreter_hidden: vec![64],
            z_dim: 16,
            classifier_hidden: vec![16],
            adversary_hidden: vec![16],
            reconstructor_hidden: vec![64],
            discriminator_hidden: vec![16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Passes over the training data.
    pub epochs: usize,
    /// Adversary updates per minibatch.
    pub adversary_steps: usize,
    /// Discriminator updates per minibatch (consensus kind).
    pub discriminator_steps: usize,
    /// Adversary updates per minibatch for the consensus kind.
    pub consensus_adversary_steps: usize,
    pub batch_size: usize,
    pub lambda_h: f64,
    /// Weight of the adversary loss in the interpreter objective.
    pub adversary_weight: f64,
    pub reconstruction_weight: f64,
    pub discriminator_weight: f64,
    pub modalities: usize,
    pub adam: AdamConfig,
    pub arch: ArchConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            adversary_steps: 5,
            discriminator_steps: 5,
            consensus_adversary_steps: 5,
            batch_size: 32,
            lambda_h: 0.5,
            adversary_weight: 1.0,
            reconstruction_weight: 1.0,
            discriminator_weight: 1.0,
            modalities: 3,
            adam: AdamConfig::default(),
            arch: ArchConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1
            || self.adversary_steps < 1
            || self.discriminator_steps < 1
            || self.consensus_adversary_steps < 1
        {
            return Err(Error::Config(
                "epochs and inner step counts must be at least 1".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.modalities < 1 {
            return Err(Error::Config("modalities must be at least 1".into()));
        }
        for (name, v) in [
            ("lambda_h", self.lambda_h),
            ("adversary_weight", self.adversary_weight),
            ("reconstruction_weight", self.reconstruction_weight),
            ("discriminator_weight", self.discriminator_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number"
                )));
            }
        }
        if self.arch.z_dim == 0 {
            return Err(Error::Config("z_dim must be positive".into()));
        }
        self.adam.validate()
    }
}

/// Disjoint feature-column sets, one per modality, sorted within each set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySplit {
    pub modalities: Vec<Vec<usize>>,
}

impl ModalitySplit {
    /// Uniform random partition of `d` columns into `m` sets whose sizes
    /// differ by at most one (larger sets first).
    pub fn random(d: usize, m: usize, seed: u64) -> Result<Self> {
        if m == 0 || d < m {
            return Err(Error::Input(format!(
                "cannot split {d} features into {m} modalities"
            )));
        }
        let mut cols: Vec<usize> = (0..d).collect();
        cols.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut modalities = Vec::with_capacity(m);
        let mut start = 0;
        for i in 0..m {
            let size = d / m + usize::from(i < d % m);
            let mut set = cols[start..start + size].to_vec();
            set.sort_unstable();
            modalities.push(set);
            start += size;
        }
        Ok(Self { modalities })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.modalities.iter().map(Vec::len).collect()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let mut seen = vec![false; d];
        for &c in self.modalities.iter().flatten() {
            if c >= d || seen[c] {
                return Err(Error::Input(format!(
                    "modality split reuses or exceeds column {c}"
                )));
            }
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Input(
                "modality split does not cover every column".into(),
            ));
        }
        Ok(())
    }
}

/// Normalization of the age target, fit on training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeStats {
    pub mean: f64,
    pub sd: f64,
}

impl AgeStats {
    pub fn fit(ages: &[f64]) -> Result<Self> {
        if ages.is_empty() {
            return Err(Error::Input("no ages to fit".into()));
        }
        let n = ages.len() as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let sd = (ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            mean,
            sd: if sd > 0.0 { sd } else { 1.0 },
        })
    }

    pub fn normalize(&self, age: f64) -> f64 {
        (age - self.mean) / self.sd
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }

    /// Entropy adversary target: 1 when the age exceeds the training mean.
    pub fn above_mean(&self, age: f64) -> usize {
        usize::from(age > self.mean)
    }
}

/// The component networks of one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub kind: ModelKind,
    /// One interpreter, or one per modality for the consensus kind.
    pub interpreters: Vec<Network>,
    pub classifier: Network,
    pub adversary: Option<Network>,
    pub reconstructor: Option<Network>,
    pub discriminator: Option<Network>,
    pub split: Option<ModalitySplit>,
    /// Set by training.
    pub age_stats: Option<AgeStats>,
    pub input_width: usize,
}

const SPLIT_SEED_SALT: u64 = 0x5eed_0f5e_9117;

/// Constructs every component with seeded initialization. The interpreter(s)
/// and classifier are drawn first, so kinds sharing a seed share their
/// initial `I` and `C`.
pub fn build(kind: ModelKind, d: usize, cfg: &TrainConfig) -> Result<ModelBundle> {
    if d < 1 {
        return Err(Error::Input("feature count must be at least 1".into()));
    }
    cfg.validate()?;
    let arch = &cfg.arch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (split, input_widths) = if kind == ModelKind::ConsensusNet {
        let split = ModalitySplit::random(d, cfg.modalities, cfg.seed ^ SPLIT_SEED_SALT)?;
        let widths = split.sizes();
        (Some(split), widths)
    } else {
        (None, vec![d])
    };
    let interpreters = input_widths
        .iter()
        .map(|&w| Network::mlp(w, &arch.interpreter_hidden, arch.z_dim, true, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let rep_width = arch.z_dim * interpreters.len();
    let classifier = Network::mlp(rep_width, &arch.classifier_hidden, 2, true, &mut rng)?;
    let adversary = if kind.has_adversary() {
        let out = if kind.is_entropy() { 2 } else { 1 };
        Some(Network::mlp(
            arch.z_dim,
            &arch.adversary_hidden,
            out,
            true,
            &mut rng,
        )?)
    } else {
        None
    };
    let reconstructor = if kind.has_reconstructor() {
        Some(Network::mlp(
            arch.z_dim,
            &arch.reconstructor_hidden,
            d,
            true,
            &mut rng,
        )?)
    } else {
        None
    };
    let discriminator = if kind == ModelKind::ConsensusNet {
        Some(Network::mlp(
            arch.z_dim,
            &arch.discriminator_hidden,
            cfg.modalities,
            true,
            &mut rng,
        )?)
    } else {
        None
    };
    Ok(ModelBundle {
        kind,
        interpreters,
        classifier,
        adversary,
        reconstructor,
        discriminator,
        split,
        age_stats: None,
        input_width: d,
    })
}

/// Hard labels plus class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<u8>,
    pub probs: Tensor2,
}

impl ModelBundle {
    /// Eval-mode representation of each row: `z`, or `[z_1, .., z_M]`.
    pub fn represent(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.input_width {
            return Err(Error::dim("model input", self.input_width, x.cols()));
        }
        match &self.split {
            None => self.interpreters[0].infer(x),
            Some(split) => {
                let parts = split
                    .modalities
                    .iter()
                    .zip(&self.interpreters)
                    .map(|(cols, net)| net.infer(&x.select_cols(cols)))
                    .collect::<Result<Vec<_>>>()?;
                Tensor2::hstack(&parts)
            }
        }
    }

    /// Per-modality representations stacked by rows (consensus kind), or the
    /// single representation.
    pub fn modality_representations(&self, x: &Tensor2) -> Result<Vec<Tensor2>> {
        match &self.split {
            None => Ok(vec![self.interpreters[0].infer(x)?]),
            Some(split) => split
                .modalities
                .iter()
                .zip(&self.interpreters)
                .map(|(cols, net)| net.infer(&x.select_cols(cols)))
                .collect(),
        }
    }

    /// Finite-difference conditioning over every component for a train-mode
    /// pass on the batch `x`.
    pub fn conditioning(&self, x: &Tensor2) -> Result<Conditioning> {
        let inputs: Vec<Tensor2> = match &self.split {
            None => vec![x.clone()],
            Some(split) => split.modalities.iter().map(|c| x.select_cols(c)).collect(),
        };
        let mut c = Conditioning::default();
        let mut zs = Vec::with_capacity(inputs.len());
        for (net, input) in self.interpreters.iter().zip(&inputs) {
            c = c.merge(net.conditioning(input, Mode::Train)?);
            zs.push(net.clone().forward(input, Mode::Train)?);
        }
        c = c.merge(
            self.classifier
                .conditioning(&Tensor2::hstack(&zs)?, Mode::Train)?,
        );
        let stacked = Tensor2::vstack(&zs)?;
        for net in [&self.adversary, &self.reconstructor, &self.discriminator]
            .into_iter()
            .flatten()
        {
            c = c.merge(net.conditioning(&stacked, Mode::Train)?);
        }
        Ok(c)
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Network> {
        let mut out: Vec<&mut Network> = self.interpreters.iter_mut().collect();
        out.push(&mut self.classifier);
        out.extend(self.adversary.as_mut());
        out.extend(self.reconstructor.as_mut());
        out.extend(self.discriminator.as_mut());
        out
    }

    pub fn networks(&self) -> Vec<(&'static str, &Network)> {
        let mut out: Vec<(&'static str, &Network)> = self
            .interpreters
            .iter()
            .map(|n| ("interpreter", n))
            .collect();
        out.push(("classifier", &self.classifier));
        if let Some(n) = &self.adversary {
            out.push(("adversary", n));
        }
        if let Some(n) = &self.reconstructor {
            out.push(("reconstructor", n));
        }
        if let Some(n) = &self.discriminator {
            out.push(("discriminator", n));
        }
        out
    }
}

/// Argmax of `softmax(C(I(x)))` in eval mode. Equal logits predict class 0.
pub fn predict(bundle: &ModelBundle, x: &Tensor2) -> Result<Prediction> {
    let z = bundle.represent(x)?;
    let logits = bundle.classifier.infer(&z)?;
    let probs = softmax(&logits);
    let labels = (0..logits.rows())
        .map(|r| u8::from(logits.get(r, 1) > logits.get(r, 0)))
        .collect();
    Ok(Prediction { labels, probs })
}
