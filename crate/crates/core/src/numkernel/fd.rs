//! Central finite differences, used as the independent gradient oracle.

/// Perturbation size per coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Step {
    /// Same `h` for every coordinate.
    Absolute(f64),
    /// `h · max(1, |θᵢ|)`.
    Relative(f64),
}

impl Step {
    fn at(self, theta: f64) -> f64 {
        match self {
            Step::Absolute(h) => h,
            Step::Relative(h) => h * theta.abs().max(1.0),
        }
    }
}

/// `(f(θ + hᵢeᵢ) − f(θ − hᵢeᵢ)) / 2hᵢ` for every coordinate.
pub fn finite_difference_gradient<F>(mut f: F, theta: &[f64], step: Step) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let h = step.at(theta[i]);
            probe[i] = theta[i] + h;
            let up = f(&probe);
            probe[i] = theta[i] - h;
            let down = f(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_at_two() {
        let g = finite_difference_gradient(|x| x[0].powi(3), &[2.0], Step::Absolute(1e-4));
        assert!((g[0] - 12.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_estimate() {
        let g = finite_difference_gradient(|_| 4.5, &[1.0, -3.0, 9.0], Step::Relative(1e-5));
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn linear_function_recovers_coefficients() {
        let a = [0.5, -2.0, 3.25];
        let g = finite_difference_gradient(
            |x| x.iter().zip(&a).map(|(p, q)| p * q).sum(),
            &[1.0, 2.0, -1.0],
            Step::Absolute(1e-3),
        );
        for (est, want) in g.iter().zip(&a) {
            assert!((est - want).abs() < 1e-10);
        }
    }
}
