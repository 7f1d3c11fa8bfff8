//! Log-domain arithmetic with an absorbing zero sentinel.

/// Log-domain representation of probability zero.
///
/// Any value at or below [`LOG_ZERO_THRESHOLD`] is treated as zero by the helpers here.
pub const LOG_ZERO: f64 = -1.0e30;

pub const LOG_ZERO_THRESHOLD: f64 = -1.0e29;

#[inline]
pub fn is_log_zero(x: f64) -> bool {
    x <= LOG_ZERO_THRESHOLD || x.is_nan()
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    match (is_log_zero(a), is_log_zero(b)) {
        (true, true) => LOG_ZERO,
        (true, false) => b,
        (false, true) => a,
        (false, false) => {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            hi + (lo - hi).exp().ln_1p()
        }
    }
}

/// `log(exp(a) * exp(b))`; zero absorbs.
#[inline]
pub fn log_mul(a: f64, b: f64) -> f64 {
    if is_log_zero(a) || is_log_zero(b) {
        LOG_ZERO
    } else {
        a + b
    }
}

/// `log Σ exp(xᵢ)`; an empty or all-zero input returns [`LOG_ZERO`].
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs
        .iter()
        .copied()
        .filter(|&x| !is_log_zero(x))
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return LOG_ZERO;
    }
    let sum: f64 = xs
        .iter()
        .filter(|&&x| !is_log_zero(x))
        .map(|&x| (x - max).exp())
        .sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lse_examples() {
        assert_eq!(log_sum_exp(&[5f64.ln()]), 5f64.ln());
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[LOG_ZERO, 3f64.ln()]), 3f64.ln());
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 3f64.ln()]), 3f64.ln());
        assert_eq!(log_sum_exp(&[LOG_ZERO, LOG_ZERO]), LOG_ZERO);
        assert_eq!(log_sum_exp(&[]), LOG_ZERO);
    }

    #[test]
    fn add_and_mul_absorb() {
        assert_eq!(log_add(LOG_ZERO, -2.0), -2.0);
        assert_eq!(log_add(LOG_ZERO, LOG_ZERO), LOG_ZERO);
        assert_eq!(log_mul(LOG_ZERO, 10.0), LOG_ZERO);
        assert!((log_add(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        // stays far from underflow after many multiplications
        let mut acc = 0.0;
        for _ in 0..200 {
            acc = log_mul(acc, (1e-5f64).ln());
        }
        assert!(!is_log_zero(acc));
    }

    proptest! {
        #[test]
        fn lse_bounded_by_max(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = log_sum_exp(&xs);
            prop_assert!(lse >= max);
            prop_assert!(lse <= max + (xs.len() as f64).ln() + 1e-12);
        }
    }
}
