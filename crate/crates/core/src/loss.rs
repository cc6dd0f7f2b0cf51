//! Numerically stable logistic helpers shared by the Bradley-Terry critic
//! loss, the DPO losses, and the value head.

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(margin)`: the Bradley-Terry / DPO preference loss.
pub fn preference_loss(margin: f64) -> f64 {
    softplus(-margin)
}

/// d/d(margin) of [`preference_loss`].
pub fn preference_loss_slope(margin: f64) -> f64 {
    -sigmoid(-margin)
}

/// Binary cross-entropy of a logit against a target in [0, 1].
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    target * softplus(-logit) + (1.0 - target) * softplus(logit)
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax into `out`, reusing its allocation.
pub fn softmax_into(logits: &[f64], out: &mut Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(logits.iter().map(|x| (x - max).exp()));
    let z: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preference_loss_at_zero_is_ln2() {
        assert!((preference_loss(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_of_minus_point_one() {
        // ln(1 + e^{-0.1}) evaluated independently
        let direct = (1.0 + (-0.1f64).exp()).ln();
        assert!((preference_loss(0.1) - direct).abs() < 1e-15);
        assert!((preference_loss(0.1) - 0.644397).abs() < 1e-6);
    }

    #[test]
    fn stable_at_extremes() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(preference_loss(50.0) < 1e-6);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn swap_symmetry_lower_bound() {
        for m in [-3.0, -0.5, 0.0, 0.2, 4.0] {
            let s = preference_loss(m) + preference_loss(-m);
            assert!(s >= 2.0 * std::f64::consts::LN_2 - 1e-15);
            if m != 0.0 {
                assert!(s > 2.0 * std::f64::consts::LN_2);
            }
        }
    }

    #[test]
    fn slope_matches_finite_difference() {
        for m in [-2.0, 0.0, 0.7] {
            let h = 1e-6;
            let fd = (preference_loss(m + h) - preference_loss(m - h)) / (2.0 * h);
            assert!((fd - preference_loss_slope(m)).abs() < 1e-8);
        }
    }

    #[test]
    fn logsumexp_of_one_two_three() {
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((logsumexp(&[1.0, 2.0, 3.0]) - direct).abs() < 1e-14);
        assert!((3.0 - logsumexp(&[1.0, 2.0, 3.0]) + 0.407606).abs() < 1e-6);
    }

    #[test]
    fn bce_at_zero_logit() {
        assert!((bce_with_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_with_logit(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
