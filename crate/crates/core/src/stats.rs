//! Normal and chi-square(1) distribution helpers.

use std::f64::consts::SQRT_2;

use statrs::function::erf::{erfc, erfc_inv};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal quantile for `p` in `(0, 1)`.
pub fn normal_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Two-sided normal critical value `z_{1−(1−level)/2}`.
pub fn z_critical(level: f64) -> f64 {
    normal_quantile(0.5 + level / 2.0)
}

/// Upper-tail probability of a chi-square variable with one degree of freedom.
pub fn chi2_1_sf(s: f64) -> f64 {
    if s <= 0.0 {
        return 1.0;
    }
    erfc((s / 2.0).sqrt())
}

/// Upper `alpha` quantile of chi-square with one degree of freedom.
pub fn chi2_1_quantile(alpha: f64) -> f64 {
    normal_quantile(1.0 - alpha / 2.0).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert!((z_critical(0.95) - 1.959963984540054).abs() < 1e-9);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-11);
        assert!((chi2_1_quantile(0.05) - 3.841458820694124).abs() < 1e-9);
        assert!((chi2_1_sf(3.841458820694124) - 0.05).abs() < 1e-11);
        assert!((normal_quantile(0.5)).abs() < 1e-15);
        assert_eq!(chi2_1_sf(0.0), 1.0);
    }
}
