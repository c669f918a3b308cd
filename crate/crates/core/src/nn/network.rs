use rand::Rng;

use super::layers::{BatchNormLayer, DenseLayer, Layer, Mode, ReluLayer};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// One trainable parameter tensor and its gradient buffer, as seen by the
/// optimizer.
pub struct ParamSlot<'a> {
    pub label: String,
    pub values: &'a mut [f64],
    pub grads: &'a [f64],
}

/// A feedforward stack of dense, ReLU and batchnorm layers.
/// Quantities that decide whether central differences are trustworthy at a
/// point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditioning {
    /// Smallest `|input|` reaching any ReLU. Differences straddle a kink
    /// closer than the perturbation size.
    pub relu_margin: f64,
    /// ReLU units positive on every row. Such a unit passes a constant shift
    /// straight through, which a following train-mode batchnorm cancels,
    /// leaving its bias with an identically zero gradient.
    pub saturated_relu_units: usize,
    /// Smallest batch standard deviation of any batchnorm input column.
    /// Train-mode curvature grows like its inverse cube.
    pub min_batchnorm_sd: f64,
}

impl Default for Conditioning {
    fn default() -> Self {
        Self {
            relu_margin: f64::INFINITY,
            saturated_relu_units: 0,
            min_batchnorm_sd: f64::INFINITY,
        }
    }
}

impl Conditioning {
    pub fn merge(self, other: Conditioning) -> Conditioning {
        Conditioning {
            relu_margin: self.relu_margin.min(other.relu_margin),
            saturated_relu_units: self.saturated_relu_units + other.saturated_relu_units,
            min_batchnorm_sd: self.min_batchnorm_sd.min(other.min_batchnorm_sd),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_width: usize,
    output_width: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Input("a network needs at least one layer".into()))?;
        let input_width = first.input_width();
        let mut width = input_width;
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_width() != width {
                return Err(Error::dim(
                    format!("layer {i} ({})", layer.kind()),
                    width,
                    layer.input_width(),
                ));
            }
            width = layer.output_width();
        }
        Ok(Self {
            layers,
            input_width,
            output_width: width,
        })
    }

    /// Dense+ReLU hidden layers, an optional batchnorm right before the output
    /// layer, then a linear output layer.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        batchnorm_before_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || output == 0 || hidden.contains(&0) {
            return Err(Error::Input("layer widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(2 * hidden.len() + 2);
        let mut width = input;
        for &h in hidden {
            layers.push(Layer::Dense(DenseLayer::he_uniform(width, h, rng)));
            layers.push(Layer::Relu(ReluLayer::new(h)));
            width = h;
        }
        if batchnorm_before_output {
            layers.push(Layer::BatchNorm(BatchNormLayer::new(width)));
        }
        layers.push(Layer::Dense(DenseLayer::he_uniform(width, output, rng)));
        Self::new(layers)
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.output_width
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &Tensor2) -> Result<()> {
        if x.cols() != self.input_width {
            return Err(Error::dim("network input", self.input_width, x.cols()));
        }
        Ok(())
    }

    /// Runs the stack and caches intermediates for `backward`. In train mode
    /// batchnorm uses batch statistics and updates its running estimates.
    pub fn forward(&mut self, x: &Tensor2, mode: Mode) -> Result<Tensor2> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                Layer::Dense(d) => d.forward(&h)?,
                Layer::Relu(r) => r.forward(&h),
                Layer::BatchNorm(b) => b.forward(&h, mode)?,
            };
        }
        Ok(h)
    }

    /// How well-posed a finite-difference check of this network on `x` is.
    pub fn conditioning(&self, x: &Tensor2, mode: Mode) -> Result<Conditioning> {
        self.check_input(x)?;
        let mut work = self.clone();
        let mut h = x.clone();
        let mut c = Conditioning::default();
        for layer in &mut work.layers {
            h = match layer {
                Layer::Dense(d) => d.forward(&h)?,
                Layer::Relu(r) => {
                    c.relu_margin = h.data().iter().fold(c.relu_margin, |m, v| m.min(v.abs()));
                    c.saturated_relu_units += (0..h.cols())
                        .filter(|&j| (0..h.rows()).all(|i| h.get(i, j) > 0.0))
                        .count();
                    r.forward(&h)
                }
                Layer::BatchNorm(b) => {
                    let n = h.rows() as f64;
                    for j in 0..h.cols() {
                        let col = h.column(j);
                        let mean = col.iter().sum::<f64>() / n;
                        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                        c.min_batchnorm_sd = c.min_batchnorm_sd.min(sd);
                    }
                    b.forward(&h, mode)?
                }
            };
        }
        Ok(c)
    }

    /// Eval-mode forward that touches no state.
    pub fn infer(&self, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => d.infer(&h)?,
                Layer::Relu(r) => r.infer(&h),
                Layer::BatchNorm(b) => b.infer(&h)?,
            };
        }
        Ok(h)
    }

    /// Populates every parameter gradient from `upstream` (gradient of the loss
    /// w.r.t. the network output) and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, upstream: &Tensor2) -> Result<Tensor2> {
        if upstream.cols() != self.output_width {
            return Err(Error::dim(
                "network backward",
                self.output_width,
                upstream.cols(),
            ));
        }
        let mut g = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            g = match layer {
                Layer::Dense(d) => d.backward(&g)?,
                Layer::Relu(r) => r.backward(&g)?,
                Layer::BatchNorm(b) => b.backward(&g)?,
            };
        }
        Ok(g)
    }

    /// Visits trainable tensors in a fixed order: per layer, weights then bias
    /// (dense) or gamma then beta (batchnorm).
    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    slots.push(ParamSlot {
                        label: format!("layer {i} (dense) weights"),
                        values: d.weights.data_mut(),
                        grads: d.grad_weights.data(),
                    });
                    slots.push(ParamSlot {
                        label: format!("layer {i} (dense) bias"),
                        values: &mut d.bias,
                        grads: &d.grad_bias,
                    });
                }
                Layer::BatchNorm(b) => {
                    slots.push(ParamSlot {
                        label: format!("layer {i} (batchnorm) gamma"),
                        values: &mut b.gamma,
                        grads: &b.grad_gamma,
                    });
                    slots.push(ParamSlot {
                        label: format!("layer {i} (batchnorm) beta"),
                        values: &mut b.beta,
                        grads: &b.grad_beta,
                    });
                }
                Layer::Relu(_) => {}
            }
        }
        slots
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.weights.data().len() + d.bias.len(),
                Layer::BatchNorm(b) => 2 * b.width(),
                Layer::Relu(_) => 0,
            })
            .sum()
    }

    pub fn flat_params(&mut self) -> Vec<f64> {
        self.param_slots()
            .into_iter()
            .flat_map(|s| s.values.to_vec())
            .collect()
    }

    pub fn flat_grads(&mut self) -> Vec<f64> {
        self.param_slots()
            .into_iter()
            .flat_map(|s| s.grads.to_vec())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::dim("set_flat_params", expected, flat.len()));
        }
        let mut offset = 0;
        for slot in self.param_slots() {
            let n = slot.values.len();
            slot.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Adds `delta` to the parameter at flat index `index`.
    pub fn nudge_param(&mut self, index: usize, delta: f64) {
        let mut offset = 0;
        for slot in self.param_slots() {
            let n = slot.values.len();
            if index < offset + n {
                slot.values[index - offset] += delta;
                return;
            }
            offset += n;
        }
        panic!("parameter index {index} out of range");
    }
}
