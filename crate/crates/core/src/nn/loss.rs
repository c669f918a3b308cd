//! Loss functions. Each returns the batch-mean loss and its gradient with
//! respect to the network output.

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Row-wise numerically stable log-softmax.
pub fn log_softmax(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

pub fn softmax(logits: &Tensor2) -> Tensor2 {
    let mut out = log_softmax(logits).map(f64::exp);
    // renormalize so each row sums to 1 up to the last ulp
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Multi-class cross entropy on raw logits: mean of `−log softmax(logits)[label]`.
/// Gradient is `(softmax − onehot) / batch`.
pub fn cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    if labels.len() != logits.rows() {
        return Err(Error::dim(
            "cross_entropy labels",
            logits.rows(),
            labels.len(),
        ));
    }
    if logits.rows() == 0 {
        return Err(Error::Input("cross_entropy on an empty batch".into()));
    }
    let classes = logits.cols();
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} outside 0..{classes}")));
    }
    let n = logits.rows() as f64;
    let logp = log_softmax(logits);
    let mut loss = 0.0;
    let mut grad = logp.map(f64::exp);
    for (r, &label) in labels.iter().enumerate() {
        loss -= logp.get(r, label);
        let row = grad.row_mut(r);
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, grad))
}

/// Binary classification negative log likelihood on two-column logits.
pub fn nll_loss(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    if logits.cols() != 2 {
        return Err(Error::dim("nll_loss logits columns", 2, logits.cols()));
    }
    cross_entropy(logits, labels)
}

/// Squared L2 distance per row, averaged over rows: `E‖pred − target‖²`.
/// Gradient is `2(pred − target) / batch`.
pub fn l2_loss(pred: &Tensor2, target: &Tensor2) -> Result<(f64, Tensor2)> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "l2_loss",
            format!("{}x{}", target.rows(), target.cols()),
            format!("{}x{}", pred.rows(), pred.cols()),
        ));
    }
    if pred.rows() == 0 {
        return Err(Error::Input("l2_loss on an empty batch".into()));
    }
    let n = pred.rows() as f64;
    let diff = pred.add_scaled(target, -1.0)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// Mean Bernoulli entropy `−[p ln p + (1−p) ln(1−p)]` with `0·ln 0 = 0`.
pub fn entropy_of_bernoulli(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Input("entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Input(format!("probability {p} outside [0, 1]")));
        }
        let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
        total += term(p) + term(1.0 - p);
    }
    Ok(total / probs.len() as f64)
}

/// Mean entropy of the softmax distribution of each row, with gradient
/// w.r.t. the logits. For two columns this is the Bernoulli entropy of the
/// class-1 probability.
pub fn softmax_entropy(logits: &Tensor2) -> Result<(f64, Tensor2)> {
    if logits.rows() == 0 {
        return Err(Error::Input("entropy of an empty batch".into()));
    }
    let n = logits.rows() as f64;
    let logp = log_softmax(logits);
    let mut grad = Tensor2::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let lp = logp.row(r);
        let h: f64 = lp.iter().map(|&l| -l.exp() * l).sum();
        total += h;
        // dH/dz_j = −p_j (log p_j + H)
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = -lp[j].exp() * (lp[j] + h) / n;
        }
    }
    Ok((total / n, grad))
}
