//! Standard-normal helpers.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use statrs::function::erf::{erfc, erfc_inv};

/// Gaussian tail `Q(x) = P(N(0,1) > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Inverse of [`q_function`] on `(0, 1)`, polished with Newton steps.
pub fn q_inverse(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let mut z = SQRT_2 * erfc_inv(2.0 * p);
    for _ in 0..2 {
        let pdf = normal_pdf(z);
        if pdf <= 0.0 {
            break;
        }
        z += (q_function(z) - p) / pdf;
    }
    z
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    q_function(-x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_of_zero_is_half() {
        assert_eq!(q_function(0.0), 0.5);
    }

    #[test]
    fn inverse_round_trips() {
        for &p in &[1e-9, 1e-5, 1e-3, 0.01, 0.2, 0.5, 0.9] {
            let z = q_inverse(p);
            assert!((q_function(z) - p).abs() / p < 1e-13, "p={p}");
        }
    }
}
