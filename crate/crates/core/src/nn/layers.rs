//! Layer primitives for the feedforward engine.
//!
//! Each layer caches what its backward pass needs during `forward`; the cache
//! is consumed by `backward`, so calling `backward` twice without a fresh
//! `forward` is a state error.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Whether batchnorm uses batch statistics (and updates running ones) or the
/// frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// (out × in)
    pub weights: Tensor2,
    pub bias: Vec<f64>,
    pub grad_weights: Tensor2,
    pub grad_bias: Vec<f64>,
    input: Option<Tensor2>,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Tensor2::zeros(output, input),
            bias: vec![0.0; output],
            grad_weights: Tensor2::zeros(output, input),
            grad_bias: vec![0.0; output],
            input: None,
        }
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(input, output);
        let limit = (6.0 / input.max(1) as f64).sqrt();
        for w in layer.weights.data_mut() {
            *w = rng.random_range(-limit..limit);
        }
        layer
    }

    pub fn from_parts(weights: Tensor2, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::dim("DenseLayer bias", weights.rows(), bias.len()));
        }
        let (o, i) = weights.shape();
        Ok(Self {
            weights,
            bias,
            grad_weights: Tensor2::zeros(o, i),
            grad_bias: vec![0.0; o],
            input: None,
        })
    }

    pub fn input_width(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_width(&self) -> usize {
        self.weights.rows()
    }

    fn affine(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut y = x.matmul_transposed(&self.weights)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor2) -> Result<Tensor2> {
        let y = self.affine(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor2) -> Result<Tensor2> {
        self.affine(x)
    }

    pub fn backward(&mut self, grad: &Tensor2) -> Result<Tensor2> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::State("dense backward without a preceding forward".into()))?;
        grad.ensure_shape("dense backward", x.rows(), self.output_width())?;
        self.grad_weights = grad.transposed_matmul(&x)?;
        self.grad_bias = grad.column_sums();
        grad.matmul(&self.weights)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReluLayer {
    pub width: usize,
    mask: Option<Vec<bool>>,
    rows: usize,
}

impl ReluLayer {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            mask: None,
            rows: 0,
        }
    }

    pub fn infer(&self, x: &Tensor2) -> Tensor2 {
        x.map(|v| v.max(0.0))
    }

    pub fn forward(&mut self, x: &Tensor2) -> Tensor2 {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        self.rows = x.rows();
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor2) -> Result<Tensor2> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::State("relu backward without a preceding forward".into()))?;
        grad.ensure_shape("relu backward", self.rows, self.width)?;
        let data = grad
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &on)| if on { g } else { 0.0 })
            .collect();
        Tensor2::from_vec(grad.rows(), grad.cols(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNormCache {
    mode: Mode,
    normalized: Tensor2,
    inv_std: Vec<f64>,
}

/// Per-feature batch normalization with learnable scale and shift.
///
/// Running statistics follow `running = (1 − momentum)·running + momentum·batch`,
/// with the unbiased batch variance feeding the running variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    cache: Option<BatchNormCache>,
}

impl BatchNormLayer {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
            grad_gamma: vec![0.0; width],
            grad_beta: vec![0.0; width],
            cache: None,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    fn batch_stats(x: &Tensor2) -> (Vec<f64>, Vec<f64>) {
        let n = x.rows() as f64;
        let mean: Vec<f64> = x.column_sums().into_iter().map(|s| s / n).collect();
        let mut var = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for ((v, &xv), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *v += (xv - m) * (xv - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    }

    fn normalize(&self, x: &Tensor2, mean: &[f64], inv_std: &[f64]) -> (Tensor2, Tensor2) {
        let mut normalized = x.clone();
        let mut out = x.clone();
        for r in 0..x.rows() {
            let xr = x.row(r);
            let nr = normalized.row_mut(r);
            for c in 0..xr.len() {
                nr[c] = (xr[c] - mean[c]) * inv_std[c];
            }
            let nr = normalized.row(r).to_vec();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = self.gamma[c] * nr[c] + self.beta[c];
            }
        }
        (normalized, out)
    }

    fn eval_inv_std(&self) -> Vec<f64> {
        self.running_var
            .iter()
            .map(|v| 1.0 / (v + self.epsilon).sqrt())
            .collect()
    }

    pub fn infer(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.width() {
            return Err(Error::dim("batchnorm", self.width(), x.cols()));
        }
        Ok(self
            .normalize(x, &self.running_mean, &self.eval_inv_std())
            .1)
    }

    pub fn forward(&mut self, x: &Tensor2, mode: Mode) -> Result<Tensor2> {
        if x.cols() != self.width() {
            return Err(Error::dim("batchnorm", self.width(), x.cols()));
        }
        let (mean, inv_std) = match mode {
            Mode::Eval => (self.running_mean.clone(), self.eval_inv_std()),
            Mode::Train => {
                if x.rows() < 2 {
                    return Err(Error::Input(
                        "batchnorm in train mode needs a batch of at least 2 rows".into(),
                    ));
                }
                let (mean, var) = Self::batch_stats(x);
                let n = x.rows() as f64;
                let m = self.momentum;
                for c in 0..self.width() {
                    self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
                    let unbiased = var[c] * n / (n - 1.0);
                    self.running_var[c] = (1.0 - m) * self.running_var[c] + m * unbiased;
                }
                let inv_std = var
                    .iter()
                    .map(|v| 1.0 / (v + self.epsilon).sqrt())
                    .collect();
                (mean, inv_std)
            }
        };
        let (normalized, out) = self.normalize(x, &mean, &inv_std);
        self.cache = Some(BatchNormCache {
            mode,
            normalized,
            inv_std,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor2) -> Result<Tensor2> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("batchnorm backward without a preceding forward".into()))?;
        let xhat = &cache.normalized;
        grad.ensure_shape("batchnorm backward", xhat.rows(), self.width())?;
        let width = self.width();
        let n = grad.rows() as f64;

        let mut sum_g = vec![0.0; width];
        let mut sum_g_xhat = vec![0.0; width];
        for r in 0..grad.rows() {
            for c in 0..width {
                let g = grad.get(r, c);
                sum_g[c] += g;
                sum_g_xhat[c] += g * xhat.get(r, c);
            }
        }
        self.grad_beta = sum_g.clone();
        self.grad_gamma = sum_g_xhat.clone();

        let mut dx = Tensor2::zeros(grad.rows(), width);
        for r in 0..grad.rows() {
            for c in 0..width {
                let scale = self.gamma[c] * cache.inv_std[c];
                let g = grad.get(r, c);
                let v = match cache.mode {
                    Mode::Eval => scale * g,
                    Mode::Train => scale * (g - sum_g[c] / n - xhat.get(r, c) * sum_g_xhat[c] / n),
                };
                dx.set(r, c, v);
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Relu(ReluLayer),
    BatchNorm(BatchNormLayer),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Relu(_) => "relu",
            Layer::BatchNorm(_) => "batchnorm",
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Layer::Dense(d) => d.input_width(),
            Layer::Relu(r) => r.width,
            Layer::BatchNorm(b) => b.width(),
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            Layer::Dense(d) => d.output_width(),
            Layer::Relu(r) => r.width,
            Layer::BatchNorm(b) => b.width(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        Tensor2::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut relu = ReluLayer::new(3);
        let x = Tensor2::from_rows(&[vec![-1.0, 0.0, 3.0]]).unwrap();
        assert_eq!(relu.forward(&x).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn batchnorm_train_standardizes() {
        let x = random(16, 5, 3).map(|v| 4.0 * v + 7.0);
        let mut bn = BatchNormLayer::new(5);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for c in 0..5 {
            let col = y.column(c);
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            // var/(var+eps) with batch variance ~20
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn batchnorm_eval_is_affine_and_deterministic() {
        let mut bn = BatchNormLayer::new(2);
        bn.running_mean = vec![1.0, -1.0];
        bn.running_var = vec![4.0, 0.25];
        bn.gamma = vec![2.0, 1.0];
        bn.beta = vec![0.5, 0.0];
        let x = Tensor2::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let y1 = bn.infer(&x).unwrap();
        let y2 = bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y1, y2);
        let expect0 = 2.0 * (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt() + 0.5;
        let expect1 = (0.0 + 1.0) / (0.25f64 + 1e-5).sqrt();
        assert!((y1.get(0, 0) - expect0).abs() < 1e-15);
        assert!((y1.get(0, 1) - expect1).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_rejects_singleton_train_batch() {
        let mut bn = BatchNormLayer::new(2);
        let x = Tensor2::zeros(1, 2);
        assert!(matches!(bn.forward(&x, Mode::Train), Err(Error::Input(_))));
    }

    #[test]
    fn backward_requires_forward() {
        let mut d = DenseLayer::zeros(2, 2);
        assert!(matches!(
            d.backward(&Tensor2::zeros(1, 2)),
            Err(Error::State(_))
        ));
        let mut bn = BatchNormLayer::new(2);
        assert!(matches!(
            bn.backward(&Tensor2::zeros(1, 2)),
            Err(Error::State(_))
        ));
    }
}
