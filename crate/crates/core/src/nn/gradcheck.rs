//! Central finite-difference verification of analytic gradients.

use super::layers::Mode;
use super::network::Network;
use super::tensor::Tensor2;
use crate::error::Result;

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "gradient vectors differ in length"
    );
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` around `params` with step [`FD_STEP`].
pub fn numeric_gradient<F>(params: &[f64], f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    numeric_gradient_with_step(params, FD_STEP, f)
}

pub fn numeric_gradient_with_step<F>(params: &[f64], step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        work[i] = params[i] + step;
        let up = f(&work)?;
        work[i] = params[i] - step;
        let down = f(&work)?;
        work[i] = params[i];
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
    /// Largest relative change of the difference quotient when the step is
    /// doubled. Truncation error grows with the square of the step, so the
    /// error of `numeric` itself is about a third of this.
    pub oracle_drift: f64,
}

/// Difference quotients at [`FD_STEP`] and their drift against a doubled
/// step, as stored in [`GradReport`].
pub fn numeric_with_drift<F>(params: &[f64], mut f: F) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let numeric = numeric_gradient_with_step(params, FD_STEP, &mut f)?;
    let coarse = numeric_gradient_with_step(params, 2.0 * FD_STEP, &mut f)?;
    let drift = max_relative_error(&numeric, &coarse);
    Ok((numeric, drift))
}

/// Compares the network's backward pass against finite differences of
/// `loss(forward(x))` over every parameter. `loss` returns the loss value and
/// its gradient w.r.t. the network output. The network itself is not modified.
pub fn gradcheck_report<F>(net: &Network, x: &Tensor2, mode: Mode, loss: F) -> Result<GradReport>
where
    F: Fn(&Tensor2) -> Result<(f64, Tensor2)>,
{
    let mut work = net.clone();
    let out = work.forward(x, mode)?;
    let (_, upstream) = loss(&out)?;
    work.backward(&upstream)?;
    let analytic = work.flat_grads();
    let params = work.flat_params();

    let (numeric, oracle_drift) = numeric_with_drift(&params, |p| {
        work.set_flat_params(p)?;
        let out = work.forward(x, mode)?;
        Ok(loss(&out)?.0)
    })?;
    let max_relative_error = max_relative_error(&analytic, &numeric);
    Ok(GradReport {
        analytic,
        numeric,
        max_relative_error,
        oracle_drift,
    })
}

pub fn gradcheck<F>(net: &Network, x: &Tensor2, mode: Mode, loss: F) -> Result<f64>
where
    F: Fn(&Tensor2) -> Result<(f64, Tensor2)>,
{
    Ok(gradcheck_report(net, x, mode, loss)?.max_relative_error)
}

/// Checks the input gradient returned by `backward` the same way.
pub fn input_gradcheck<F>(net: &Network, x: &Tensor2, mode: Mode, loss: F) -> Result<f64>
where
    F: Fn(&Tensor2) -> Result<(f64, Tensor2)>,
{
    let mut work = net.clone();
    let out = work.forward(x, mode)?;
    let (_, upstream) = loss(&out)?;
    let analytic = work.backward(&upstream)?;
    let numeric = numeric_gradient(x.data(), |flat| {
        let xi = Tensor2::from_vec(x.rows(), x.cols(), flat.to_vec())?;
        Ok(loss(&work.forward(&xi, mode)?)?.0)
    })?;
    Ok(max_relative_error(analytic.data(), &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{DenseLayer, Layer};
    use crate::nn::loss::{l2_loss, nll_loss};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor2::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn dense_l2_gradient_is_closed_form() {
        // ŷ = w·x + b, L = (ŷ − y)²  ⇒  dL/dw = 2(ŷ − y)·x, dL/db = 2(ŷ − y)
        let w = Tensor2::from_rows(&[vec![0.5, -1.5, 2.0]]).unwrap();
        let mut net = Network::new(vec![Layer::Dense(
            DenseLayer::from_parts(w, vec![0.25]).unwrap(),
        )])
        .unwrap();
        let x = Tensor2::from_rows(&[vec![1.0, 2.0, -0.5]]).unwrap();
        let y = Tensor2::from_rows(&[vec![0.75]]).unwrap();
        let out = net.forward(&x, Mode::Train).unwrap();
        let yhat = 0.5 - 3.0 - 1.0 + 0.25;
        assert_eq!(out.get(0, 0), yhat);
        let (_, g) = l2_loss(&out, &y).unwrap();
        net.backward(&g).unwrap();
        let r = 2.0 * (yhat - 0.75);
        assert_eq!(net.flat_grads(), vec![r * 1.0, r * 2.0, r * -0.5, r]);
    }

    #[test]
    fn linear_net_quadratic_loss_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Network::new(vec![
            Layer::Dense(DenseLayer::he_uniform(4, 3, &mut rng)),
            Layer::Dense(DenseLayer::he_uniform(3, 2, &mut rng)),
        ])
        .unwrap();
        let x = random(5, 4, &mut rng);
        let y = random(5, 2, &mut rng);
        let err = gradcheck(&net, &x, Mode::Train, |o| l2_loss(o, &y)).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn relu_batchnorm_net_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = Network::mlp(5, &[7, 4], 2, true, &mut rng).unwrap();
        let x = random(6, 5, &mut rng);
        let labels = [0, 1, 1, 0, 1, 0];
        for mode in [Mode::Train, Mode::Eval] {
            let err = gradcheck(&net, &x, mode, |o| nll_loss(o, &labels)).unwrap();
            assert!(err < 1e-4, "{mode:?}: {err}");
            let err = input_gradcheck(&net, &x, mode, |o| nll_loss(o, &labels)).unwrap();
            assert!(err < 1e-4, "{mode:?} input: {err}");
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = Network::mlp(3, &[4], 1, false, &mut rng).unwrap();
        let x = random(4, 3, &mut rng);
        let y = random(4, 1, &mut rng);
        let err = gradcheck(&net, &x, Mode::Train, |o| {
            let (l, g) = l2_loss(o, &y)?;
            Ok((l, g.scale(1.5)))
        })
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }
}
