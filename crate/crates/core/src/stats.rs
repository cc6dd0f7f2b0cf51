//! Small statistics helpers for reporting.

use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean using the unbiased sample variance.
pub fn stderr(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Binomial standard error `sqrt(p(1-p)/n)`.
pub fn binomial_stderr(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).max(0.0).sqrt()
}

/// One-sided paired t-test of `mean(a - b) > 0`. Returns `(t, p)`.
///
/// A zero-variance difference yields `p = 0` when the mean difference is
/// positive and `p = 1` otherwise.
pub fn paired_t_test_greater(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    if n < 2 {
        return (f64::NAN, 1.0);
    }
    let m = mean(&d);
    let se = stderr(&d);
    if se == 0.0 {
        return if m > 0.0 { (f64::INFINITY, 0.0) } else { (f64::NAN, 1.0) };
    }
    let t = m / se;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    (t, 1.0 - dist.cdf(t))
}
