use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::nn::Tensor2;

/// Per-feature z-score parameters. Standard deviations use the population
/// (1/n) convention. Constant columns get `sd = 1` and are listed in
/// `constant_columns`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub constant_columns: Vec<usize>,
}

pub fn zscore_fit(train: &FeatureMatrix) -> Result<NormStats> {
    NormStats::fit(&train.features)
}

pub fn zscore_apply(stats: &NormStats, m: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut out = m.clone();
    out.features = stats.apply(&m.features)?;
    Ok(out)
}

impl NormStats {
    pub fn fit(x: &Tensor2) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Input("cannot fit normalization on zero rows".into()));
        }
        let n = x.rows() as f64;
        let mut mean = Vec::with_capacity(x.cols());
        let mut sd = Vec::with_capacity(x.cols());
        let mut constant_columns = Vec::new();
        for c in 0..x.cols() {
            let col = x.column(c);
            if col.iter().all(|&v| v == col[0]) {
                mean.push(col[0]);
                sd.push(1.0);
                constant_columns.push(c);
                continue;
            }
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            sd.push(var.sqrt());
        }
        Ok(Self {
            mean,
            sd,
            constant_columns,
        })
    }

    pub fn apply(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.mean.len() {
            return Err(Error::dim("zscore_apply", self.mean.len(), x.cols()));
        }
        let mut out = x.clone();
        for r in 0..x.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.sd[c];
            }
        }
        Ok(out)
    }

    pub fn invert(&self, z: &Tensor2) -> Result<Tensor2> {
        if z.cols() != self.mean.len() {
            return Err(Error::dim("zscore_invert", self.mean.len(), z.cols()));
        }
        let mut out = z.clone();
        for r in 0..z.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.sd[c] + self.mean[c];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_two_three() {
        let x = Tensor2::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let stats = NormStats::fit(&x).unwrap();
        let z = stats.apply(&x).unwrap();
        let k = 1.224744871391589; // 1 / sqrt(2/3)
        assert!((z.get(0, 0) + k).abs() < 1e-12);
        assert_eq!(z.get(1, 0), 0.0);
        assert!((z.get(2, 0) - k).abs() < 1e-12);
    }

    #[test]
    fn constant_column_becomes_zeros() {
        let x = Tensor2::from_rows(&[vec![0.1, 1.0], vec![0.1, 2.0], vec![0.1, 4.0]]).unwrap();
        let stats = NormStats::fit(&x).unwrap();
        assert_eq!(stats.constant_columns, vec![0]);
        let z = stats.apply(&x).unwrap();
        assert!(z.column(0).iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn fitted_columns_are_standardized(
            values in prop::collection::vec(-1e3f64..1e3, 12..40),
            cols in 1usize..4,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows >= 2);
            let x = Tensor2::from_vec(rows, cols, values[..rows * cols].to_vec()).unwrap();
            let stats = NormStats::fit(&x).unwrap();
            let z = stats.apply(&x).unwrap();
            for c in 0..cols {
                if stats.constant_columns.contains(&c) { continue; }
                let col = z.column(c);
                let m = col.iter().sum::<f64>() / rows as f64;
                let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / rows as f64;
                prop_assert!(m.abs() < 1e-10);
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-10);
            }
            let back = stats.invert(&z).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
    }
}
