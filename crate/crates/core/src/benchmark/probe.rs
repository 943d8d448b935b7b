use crate::error::{Error, Result};
use crate::numkernel::{softmax_rows, Matrix};

/// Multinomial logistic regression over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// `[dim × classes]`.
    pub weights: Matrix,
    /// `[1 × classes]`.
    pub bias: Matrix,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    fn design(&self, features: &[Vec<f64>]) -> Result<Matrix> {
        let dim = self.mean.len();
        let mut values = Vec::with_capacity(features.len() * dim);
        for f in features {
            if f.len() != dim {
                return Err(Error::input(format!(
                    "feature of length {} for a {dim}-dim probe",
                    f.len()
                )));
            }
            values.extend(
                f.iter()
                    .zip(&self.mean)
                    .zip(&self.inv_std)
                    .map(|((x, m), s)| (x - m) * s),
            );
        }
        Matrix::from_vec(features.len(), dim, values)
    }

    fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul(&self.weights)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(self.bias.values()) {
                *v += b;
            }
        }
        Ok(z)
    }

    /// Row `i` holds the class distribution for `features[i]`.
    pub fn probabilities(&self, features: &[Vec<f64>]) -> Result<Matrix> {
        Ok(softmax_rows(&self.logits(&self.design(features)?)?))
    }

    /// Most probable class per row; ties go to the lowest class index.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<usize>> {
        let p = self.probabilities(features)?;
        Ok((0..p.rows())
            .map(|r| {
                p.row(r)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| {
                        if v > best.1 {
                            (c, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }
}

/// Fits a probe by full-batch gradient descent on the mean cross entropy,
/// starting from zero weights.
pub fn fit_linear_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<LinearProbe> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::input(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::input(format!(
            "probe learning rate {lr} must be positive"
        )));
    }
    let dim = features[0].len();
    if dim == 0
        || features
            .iter()
            .any(|f| f.len() != dim || f.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::input(
            "probe features must be finite rows of one nonzero length",
        ));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::input(format!("label {l} outside 0..{num_classes}")))? += 1;
    }
    if num_classes < 2 || counts.contains(&0) {
        return Err(Error::input(
            "every class needs at least one training example",
        ));
    }

    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; dim];
    for f in features {
        for ((v, x), m) in var.iter_mut().zip(f).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    let inv_std = var
        .iter()
        .map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 })
        .collect();

    let mut probe = LinearProbe {
        mean,
        inv_std,
        weights: Matrix::zeros(dim, num_classes),
        bias: Matrix::zeros(1, num_classes),
    };
    let x = probe.design(features)?;
    for _ in 0..epochs {
        let mut g = softmax_rows(&probe.logits(&x)?);
        for (r, &l) in labels.iter().enumerate() {
            g.row_mut(r)[l] -= 1.0;
        }
        let g = g.scale(1.0 / n);
        let gw = x.transposed_matmul(&g)?;
        let gb = Matrix::row_vector(
            (0..num_classes)
                .map(|c| (0..g.rows()).map(|r| g.get(r, c)).sum())
                .collect(),
        );
        probe.weights.add_scaled_assign(&gw, -lr);
        probe.bias.add_scaled_assign(&gb, -lr);
    }
    if !probe.weights.is_finite() || !probe.bias.is_finite() {
        return Err(Error::NonFinite("linear probe weights diverged".into()));
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..10 {
            let t = i as f64 * 0.1;
            x.push(vec![1.0 + t, 2.0 - t]);
            y.push(0);
            x.push(vec![-1.0 - t, -2.0 + 0.5 * t]);
            y.push(1);
        }
        (x, y)
    }

    #[test]
    fn separable_clusters_fit_perfectly() {
        let (x, y) = clusters();
        let probe = fit_linear_probe(&x, &y, 2, 500, 0.5).unwrap();
        assert_eq!(probe.predict(&x).unwrap(), y);
        assert_eq!(probe, fit_linear_probe(&x, &y, 2, 500, 0.5).unwrap());
    }

    #[test]
    fn zero_epochs_is_uniform() {
        let (x, y) = clusters();
        let probe = fit_linear_probe(&x, &y, 2, 0, 0.1).unwrap();
        let p = probe.probabilities(&x).unwrap();
        assert!(p.values().iter().all(|v| (*v - 0.5).abs() < 1e-15));
        assert!(probe.predict(&x).unwrap().iter().all(|c| *c == 0));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let (x, y) = clusters();
        assert!(fit_linear_probe(&x, &y[1..], 2, 1, 0.1).is_err());
        assert!(fit_linear_probe(&x, &y, 3, 1, 0.1).is_err());
        assert!(fit_linear_probe(&x, &vec![0; y.len()], 2, 1, 0.1).is_err());
        assert!(fit_linear_probe(&x, &y, 2, 1, 0.0).is_err());
        assert!(fit_linear_probe(&[], &[], 2, 1, 0.1).is_err());
    }
}
