//! Alternating min-max training. Each minibatch runs one joint update of the
//! interpreter(s), classifier and reconstructor against frozen adversaries,
//! then a fixed number of adversary-only (and discriminator-only) updates on
//! the detached representations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build, AgeStats, EntropyVariant, ModalitySplit, ModelBundle, ModelKind, TrainConfig};
use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::nn::gradcheck::{max_relative_error, numeric_with_drift, GradReport};
use crate::nn::{
    cross_entropy, l2_loss, nll_loss, softmax_entropy, AdamState, Mode, Network, Tensor2,
};

/// Offset separating the minibatch-order stream from the init stream.
const BATCH_SEED_OFFSET: u64 = 0x0ba7_c4e5;

/// One minibatch with every target the objectives need.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor2,
    pub labels: Vec<usize>,
    /// Normalized age, one column.
    pub age_target: Tensor2,
    /// Age above the training mean.
    pub age_class: Vec<usize>,
}

impl Batch {
    pub fn from_matrix(m: &FeatureMatrix, indices: &[usize], stats: &AgeStats) -> Self {
        let ages: Vec<f64> = indices.iter().map(|&i| m.ages[i]).collect();
        Self {
            x: m.features.select_rows(indices),
            labels: indices.iter().map(|&i| m.labels[i] as usize).collect(),
            age_target: Tensor2::from_vec(
                ages.len(),
                1,
                ages.iter().map(|&a| stats.normalize(a)).collect(),
            )
            .expect("one value per row"),
            age_class: ages.iter().map(|&a| stats.above_mean(a)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Shuffled index chunks of `batch_size`. A trailing singleton is folded into
/// the previous chunk because batchnorm needs two rows.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order
        .chunks(batch_size.max(2))
        .map(<[usize]>::to_vec)
        .collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    out
}

/// Loss values from one joint step. `objective` is what the interpreter side
/// minimizes: `L_c − w_a·L_a + w_r·L_r − w_d·L_d` over the active terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLosses {
    pub loss_c: f64,
    pub loss_a: Option<f64>,
    pub loss_r: Option<f64>,
    pub loss_d: Option<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_a: Option<f64>,
    pub loss_r: Option<f64>,
    pub loss_d: Option<f64>,
}

/// Per-epoch means of each loss term over the minibatches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub kind: ModelKind,
    pub epochs: Vec<EpochLosses>,
}

/// Owns the optimizer state for one bundle and exposes each phase of the
/// alternating schedule separately.
pub struct Trainer<'a> {
    bundle: &'a mut ModelBundle,
    cfg: TrainConfig,
    opt_interpreters: Vec<AdamState>,
    opt_classifier: AdamState,
    opt_adversary: AdamState,
    opt_reconstructor: AdamState,
    opt_discriminator: AdamState,
}

fn tile_rows(t: &Tensor2, times: usize) -> Result<Tensor2> {
    Tensor2::vstack(&vec![t.clone(); times])
}

fn tile_labels(v: &[usize], times: usize) -> Vec<usize> {
    (0..times).flat_map(|_| v.iter().copied()).collect()
}

impl<'a> Trainer<'a> {
    pub fn new(bundle: &'a mut ModelBundle, cfg: &TrainConfig) -> Self {
        let fresh = || AdamState::new(cfg.adam);
        Self {
            opt_interpreters: bundle.interpreters.iter().map(|_| fresh()).collect(),
            opt_classifier: fresh(),
            opt_adversary: fresh(),
            opt_reconstructor: fresh(),
            opt_discriminator: fresh(),
            bundle,
            cfg: cfg.clone(),
        }
    }

    pub fn bundle(&self) -> &ModelBundle {
        self.bundle
    }

    fn modality_count(&self) -> usize {
        self.bundle.interpreters.len()
    }

    /// Adversary loss and its gradient w.r.t. the adversary output, for rows
    /// stacked once per modality.
    fn adversary_loss(&self, out: &Tensor2, batch: &Batch) -> Result<(f64, Tensor2)> {
        let reps = self.modality_count();
        match self.bundle.kind.entropy_variant() {
            None => l2_loss(out, &tile_rows(&batch.age_target, reps)?),
            Some(variant) => {
                let labels = tile_labels(&batch.age_class, reps);
                let lambda = self.cfg.lambda_h;
                match variant {
                    EntropyVariant::Binary => cross_entropy(out, &labels),
                    EntropyVariant::EntropyOnly => {
                        let (h, gh) = softmax_entropy(out)?;
                        Ok((lambda * h, gh.scale(lambda)))
                    }
                    EntropyVariant::Full => {
                        let (ce, gce) = cross_entropy(out, &labels)?;
                        if lambda == 0.0 {
                            return Ok((ce, gce));
                        }
                        let (h, gh) = softmax_entropy(out)?;
                        Ok((ce + lambda * h, gce.add_scaled(&gh, lambda)?))
                    }
                }
            }
        }
    }

    fn discriminator_targets(&self, rows_per_modality: usize) -> Vec<usize> {
        (0..self.modality_count())
            .flat_map(|m| std::iter::repeat_n(m, rows_per_modality))
            .collect()
    }

    /// Forward and backward of the interpreter-side objective in train mode.
    /// Populates gradients of the interpreters, classifier and (when its
    /// weight is nonzero) reconstructor without stepping any optimizer.
    /// Returns the losses and the representations stacked by modality.
    pub fn compute_joint(&mut self, batch: &Batch) -> Result<(JointLosses, Tensor2)> {
        let cfg = &self.cfg;
        let b = &mut *self.bundle;
        let m = b.interpreters.len();
        let z_dim = cfg.arch.z_dim;

        let inputs: Vec<Tensor2> = match &b.split {
            None => vec![batch.x.clone()],
            Some(split) => split
                .modalities
                .iter()
                .map(|c| batch.x.select_cols(c))
                .collect(),
        };
        let zs = b
            .interpreters
            .iter_mut()
            .zip(&inputs)
            .map(|(net, x)| net.forward(x, Mode::Train))
            .collect::<Result<Vec<_>>>()?;
        let z_cat = if m == 1 {
            zs[0].clone()
        } else {
            Tensor2::hstack(&zs)?
        };
        let logits = b.classifier.forward(&z_cat, Mode::Train)?;
        let (loss_c, g_logits) = nll_loss(&logits, &batch.labels)?;
        let g_cat = b.classifier.backward(&g_logits)?;
        let mut g_z = if m == 1 {
            vec![g_cat]
        } else {
            g_cat.split_cols(&vec![z_dim; m])?
        };
        let stacked = if m == 1 {
            zs[0].clone()
        } else {
            Tensor2::vstack(&zs)?
        };

        let mut losses = JointLosses {
            loss_c,
            loss_a: None,
            loss_r: None,
            loss_d: None,
            objective: loss_c,
        };

        if b.adversary.is_some() {
            let out = b
                .adversary
                .as_mut()
                .map(|a| a.forward(&stacked, Mode::Train))
                .transpose()?;
            let out = out.expect("adversary present");
            // Borrow of the bundle ends before the loss helper reads it.
            let (la, g_out) = {
                let this: &Self = self;
                this.adversary_loss(&out, batch)?
            };
            let cfg = &self.cfg;
            let b = &mut *self.bundle;
            losses.loss_a = Some(la);
            if cfg.adversary_weight != 0.0 {
                let adv = b.adversary.as_mut().expect("adversary present");
                let g_in = adv.backward(&g_out.scale(-cfg.adversary_weight))?;
                let parts = if m == 1 {
                    vec![g_in]
                } else {
                    g_in.split_rows_even(m)?
                };
                for (g, p) in g_z.iter_mut().zip(&parts) {
                    *g = g.add_scaled(p, 1.0)?;
                }
                losses.objective -= cfg.adversary_weight * la;
            }
        }

        let cfg = &self.cfg;
        let b = &mut *self.bundle;
        if let Some(rec) = b.reconstructor.as_mut() {
            let x_hat = rec.forward(&stacked, Mode::Train)?;
            let (lr, g_out) = l2_loss(&x_hat, &batch.x)?;
            losses.loss_r = Some(lr);
            if cfg.reconstruction_weight != 0.0 {
                let g_in = rec.backward(&g_out.scale(cfg.reconstruction_weight))?;
                g_z[0] = g_z[0].add_scaled(&g_in, 1.0)?;
                losses.objective += cfg.reconstruction_weight * lr;
            }
        }

        if let Some(disc) = b.discriminator.as_mut() {
            let out = disc.forward(&stacked, Mode::Train)?;
            let targets: Vec<usize> = (0..m)
                .flat_map(|i| std::iter::repeat_n(i, batch.len()))
                .collect();
            let (ld, g_out) = cross_entropy(&out, &targets)?;
            losses.loss_d = Some(ld);
            if cfg.discriminator_weight != 0.0 {
                let g_in = disc.backward(&g_out.scale(-cfg.discriminator_weight))?;
                let parts = if m == 1 {
                    vec![g_in]
                } else {
                    g_in.split_rows_even(m)?
                };
                for (g, p) in g_z.iter_mut().zip(&parts) {
                    *g = g.add_scaled(p, 1.0)?;
                }
                losses.objective -= cfg.discriminator_weight * ld;
            }
        }

        for (net, g) in b.interpreters.iter_mut().zip(&g_z) {
            net.backward(g)?;
        }
        Ok((losses, stacked))
    }

    /// One update of the interpreter(s), classifier and reconstructor.
    /// Adversary and discriminator parameters are not touched.
    pub fn joint_step(&mut self, batch: &Batch) -> Result<(JointLosses, Tensor2)> {
        let out = self.compute_joint(batch)?;
        let b = &mut *self.bundle;
        for (net, opt) in b.interpreters.iter_mut().zip(&mut self.opt_interpreters) {
            opt.step_network(net)?;
        }
        self.opt_classifier.step_network(&mut b.classifier)?;
        if self.cfg.reconstruction_weight != 0.0 {
            if let Some(rec) = b.reconstructor.as_mut() {
                self.opt_reconstructor.step_network(rec)?;
            }
        }
        Ok(out)
    }

    /// One adversary-only update on detached representations. Returns the
    /// adversary loss before the update.
    pub fn adversary_step(&mut self, stacked: &Tensor2, batch: &Batch) -> Result<f64> {
        let mut adv = self
            .bundle
            .adversary
            .take()
            .ok_or_else(|| Error::State("bundle has no adversary".into()))?;
        let result = (|| {
            let out = adv.forward(stacked, Mode::Train)?;
            let (la, g) = self.adversary_loss(&out, batch)?;
            adv.backward(&g)?;
            self.opt_adversary.step_network(&mut adv)?;
            Ok(la)
        })();
        self.bundle.adversary = Some(adv);
        result
    }

    /// One discriminator-only update. Returns the loss before the update.
    pub fn discriminator_step(&mut self, stacked: &Tensor2) -> Result<f64> {
        let rows = stacked.rows() / self.modality_count();
        let targets = self.discriminator_targets(rows);
        let disc = self
            .bundle
            .discriminator
            .as_mut()
            .ok_or_else(|| Error::State("bundle has no discriminator".into()))?;
        let out = disc.forward(stacked, Mode::Train)?;
        let (ld, g) = cross_entropy(&out, &targets)?;
        disc.backward(&g)?;
        self.opt_discriminator.step_network(disc)?;
        Ok(ld)
    }

    /// The full schedule for one minibatch.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<JointLosses> {
        let (losses, stacked) = self.joint_step(batch)?;
        if self.bundle.kind == ModelKind::ConsensusNet {
            for _ in 0..self.cfg.discriminator_steps {
                self.discriminator_step(&stacked)?;
            }
            for _ in 0..self.cfg.consensus_adversary_steps {
                self.adversary_step(&stacked, batch)?;
            }
        } else if self.bundle.adversary.is_some() {
            for _ in 0..self.cfg.adversary_steps {
                self.adversary_step(&stacked, batch)?;
            }
        }
        Ok(losses)
    }
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

#[derive(Default)]
struct Accum {
    c: f64,
    a: f64,
    r: f64,
    d: f64,
    n: usize,
}

/// Trains any kind with its alternating schedule. Fits the age
/// normalization on `data` and stores it in the bundle.
pub fn train(
    bundle: &mut ModelBundle,
    data: &FeatureMatrix,
    cfg: &TrainConfig,
) -> Result<LossHistory> {
    cfg.validate()?;
    if data.n_features() != bundle.input_width {
        return Err(Error::dim(
            "training features",
            bundle.input_width,
            data.n_features(),
        ));
    }
    if data.len() < 2 {
        return Err(Error::Input("training needs at least two samples".into()));
    }
    let stats = AgeStats::fit(&data.ages)?;
    bundle.age_stats = Some(stats);
    let kind = bundle.kind;
    let mut trainer = Trainer::new(bundle, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(BATCH_SEED_OFFSET));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = Accum::default();
        let mut has = (false, false, false);
        for (bi, idx) in minibatches(data.len(), cfg.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            let batch = Batch::from_matrix(data, idx, &stats);
            let l = trainer
                .train_batch(&batch)
                .map_err(|e| with_context(e, epoch, bi))?;
            let terms = [Some(l.loss_c), l.loss_a, l.loss_r, l.loss_d];
            if terms.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}"
                )));
            }
            acc.c += l.loss_c;
            acc.a += l.loss_a.unwrap_or(0.0);
            acc.r += l.loss_r.unwrap_or(0.0);
            acc.d += l.loss_d.unwrap_or(0.0);
            has = (l.loss_a.is_some(), l.loss_r.is_some(), l.loss_d.is_some());
            acc.n += 1;
        }
        let n = acc.n as f64;
        epochs.push(EpochLosses {
            epoch,
            loss_c: acc.c / n,
            loss_a: has.0.then_some(acc.a / n),
            loss_r: has.1.then_some(acc.r / n),
            loss_d: has.2.then_some(acc.d / n),
        });
    }
    Ok(LossHistory { kind, epochs })
}

fn expect_kind(bundle: &ModelBundle, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "{what} training called on a {} bundle",
            bundle.kind
        )))
    }
}

pub fn train_simple(
    bundle: &mut ModelBundle,
    data: &FeatureMatrix,
    cfg: &TrainConfig,
) -> Result<LossHistory> {
    expect_kind(bundle, bundle.kind == ModelKind::Simple, "simple")?;
    train(bundle, data, cfg)
}

pub fn train_autoencoder(
    bundle: &mut ModelBundle,
    data: &FeatureMatrix,
    cfg: &TrainConfig,
) -> Result<LossHistory> {
    expect_kind(bundle, bundle.kind == ModelKind::Autoencoder, "autoencoder")?;
    train(bundle, data, cfg)
}

/// Installs `split` (which must match the interpreter input widths) and
/// trains.
pub fn train_consensus(
    bundle: &mut ModelBundle,
    split: &ModalitySplit,
    data: &FeatureMatrix,
    cfg: &TrainConfig,
) -> Result<LossHistory> {
    expect_kind(bundle, bundle.kind == ModelKind::ConsensusNet, "consensus")?;
    split.validate(bundle.input_width)?;
    let widths: Vec<usize> = bundle
        .interpreters
        .iter()
        .map(Network::input_width)
        .collect();
    if split.sizes() != widths {
        return Err(Error::Input(format!(
            "modality sizes {:?} do not match interpreter widths {widths:?}",
            split.sizes()
        )));
    }
    bundle.split = Some(split.clone());
    train(bundle, data, cfg)
}

pub fn train_entropy(
    bundle: &mut ModelBundle,
    data: &FeatureMatrix,
    cfg: &TrainConfig,
    variant: EntropyVariant,
) -> Result<LossHistory> {
    expect_kind(
        bundle,
        bundle.kind.entropy_variant() == Some(variant),
        "entropy",
    )?;
    train(bundle, data, cfg)
}

/// Builds and trains the plain classifier.
pub fn train_baseline_dnn(
    data: &FeatureMatrix,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, LossHistory)> {
    let mut bundle = build(ModelKind::BaselineDnn, data.n_features(), cfg)?;
    let history = train(&mut bundle, data, cfg)?;
    Ok((bundle, history))
}

fn trainable_nets(b: &mut ModelBundle, with_reconstructor: bool) -> Vec<&mut Network> {
    let mut nets: Vec<&mut Network> = b.interpreters.iter_mut().collect();
    nets.push(&mut b.classifier);
    if with_reconstructor {
        if let Some(r) = b.reconstructor.as_mut() {
            nets.push(r);
        }
    }
    nets
}

fn flat(b: &mut ModelBundle, with_r: bool, grads: bool) -> Vec<f64> {
    trainable_nets(b, with_r)
        .into_iter()
        .flat_map(|n| {
            if grads {
                n.flat_grads()
            } else {
                n.flat_params()
            }
        })
        .collect()
}

fn set_flat(b: &mut ModelBundle, with_r: bool, values: &[f64]) -> Result<()> {
    let mut offset = 0;
    for net in trainable_nets(b, with_r) {
        let n = net.param_count();
        net.set_flat_params(&values[offset..offset + n])?;
        offset += n;
    }
    Ok(())
}

/// Analytic gradient of the joint interpreter-side objective (w.r.t. every
/// interpreter, classifier and, when weighted, reconstructor parameter)
/// next to central finite differences.
pub fn joint_objective_gradcheck_report(
    bundle: &ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<GradReport> {
    let with_r = cfg.reconstruction_weight != 0.0;
    let mut work = bundle.clone();
    let analytic = {
        let mut t = Trainer::new(&mut work, cfg);
        t.compute_joint(batch)?;
        flat(&mut work, with_r, true)
    };
    let base = flat(&mut work, with_r, false);
    let (numeric, oracle_drift) = numeric_with_drift(&base, |p| {
        let mut probe = bundle.clone();
        set_flat(&mut probe, with_r, p)?;
        let mut t = Trainer::new(&mut probe, cfg);
        Ok(t.compute_joint(batch)?.0.objective)
    })?;
    Ok(GradReport {
        max_relative_error: max_relative_error(&analytic, &numeric),
        analytic,
        numeric,
        oracle_drift,
    })
}

/// Maximum relative error of [`joint_objective_gradcheck_report`].
pub fn joint_objective_gradcheck(
    bundle: &ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<f64> {
    Ok(joint_objective_gradcheck_report(bundle, batch, cfg)?.max_relative_error)
}
