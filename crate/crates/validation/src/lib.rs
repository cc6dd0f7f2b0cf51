//! Verdicts and trend predicates for the acceptance target.
//!
//! Trend criteria compare per-seed means that carry a standard error; the
//! helpers here keep those comparisons in one place so the acceptance
//! target reads as a list of criteria.

use std::fmt;

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(id: u32, name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            id,
            name,
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] criterion {} ({}): {}", self.id, self.name, self.detail)
    }
}

/// A mean over seeds with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn new(mean: f64, stderr: f64) -> Self {
        Self { mean, stderr }
    }

    /// Standard error of the difference of two independent estimates.
    pub fn diff_stderr(self, other: Estimate) -> f64 {
        self.stderr.hypot(other.stderr)
    }
}

/// `xs[0] > xs[1] > …`.
pub fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] > w[1])
}

/// Every step up the sequence either rises or falls by no more than
/// `k` standard errors of the difference.
pub fn non_decreasing_within(points: &[Estimate], k: f64) -> bool {
    points
        .windows(2)
        .all(|w| w[1].mean >= w[0].mean - k * w[0].diff_stderr(w[1]))
}

/// Every point stays within `k` standard errors of the difference from
/// the first.
pub fn flat_within(points: &[Estimate], k: f64) -> bool {
    match points.first() {
        None => true,
        Some(&first) => points
            .iter()
            .all(|p| (p.mean - first.mean).abs() <= k * first.diff_stderr(*p)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(mean: f64, stderr: f64) -> Estimate {
        Estimate::new(mean, stderr)
    }

    #[test]
    fn strict_order() {
        assert!(strictly_decreasing(&[0.6, 0.5, 0.4, 0.2]));
        assert!(!strictly_decreasing(&[0.6, 0.5, 0.5]));
        assert!(strictly_decreasing(&[0.3]));
    }

    #[test]
    fn dip_inside_the_noise_is_tolerated() {
        // diff stderr = 0.05, dip 0.04
        let pts = [e(0.40, 0.03), e(0.36, 0.04)];
        assert!(non_decreasing_within(&pts, 1.0));
        let pts = [e(0.40, 0.03), e(0.34, 0.04)];
        assert!(!non_decreasing_within(&pts, 1.0));
    }

    #[test]
    fn flatness_is_measured_from_the_first_point() {
        // diff stderr = 0.05, so 2σ = 0.1
        let pts = [e(0.20, 0.03), e(0.29, 0.04), e(0.11, 0.04)];
        assert!(flat_within(&pts, 2.0));
        let pts = [e(0.20, 0.03), e(0.31, 0.04)];
        assert!(!flat_within(&pts, 2.0));
    }

    #[test]
    fn verdict_line() {
        let v = Verdict::new(4, "zero init", true, "ok");
        assert_eq!(v.to_string(), "[PASS] criterion 4 (zero init): ok");
    }
}
