use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::mixed::MixedModelFit;
use crate::error::{Error, Result};

/// Two-sided 95% normal quantile used for intervals.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub coefficient: String,
    pub estimate: f64,
    pub se: f64,
    pub null_value: f64,
    pub z: f64,
    pub p: f64,
    pub ci95: (f64, f64),
}

impl WaldTest {
    /// Normal-reference test of `estimate == null_value`.
    pub fn from_estimate(coefficient: impl Into<String>, estimate: f64, se: f64, null_value: f64) -> Self {
        let z = (estimate - null_value) / se;
        Self {
            coefficient: coefficient.into(),
            estimate,
            se,
            null_value,
            z,
            p: two_sided_p(z),
            ci95: (estimate - Z_95 * se, estimate + Z_95 * se),
        }
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.p < alpha
    }
}

/// `P(|Z| >= |z|)` for standard normal `Z`.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub fn wald_test(fit: &MixedModelFit, coefficient: &str, null_value: f64) -> Result<WaldTest> {
    if !fit.converged {
        return Err(Error::NonConvergence("fit did not converge".into()));
    }
    let c = fit
        .coefficient(coefficient)
        .ok_or_else(|| Error::CoefficientMissing(coefficient.to_string()))?;
    Ok(WaldTest::from_estimate(coefficient, c.estimate, c.se, null_value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn null_at_estimate() {
        let t = WaldTest::from_estimate("b", -0.2, 0.05, -0.2);
        assert_eq!((t.z, t.p), (0.0, 1.0));
    }

    #[test]
    fn known_quantiles() {
        // erfc is accurate to ~1e-10 relative
        assert!((two_sided_p(1.959963984540054) - 0.05).abs() < 1e-10);
        assert!((two_sided_p(-2.5758293035489004) - 0.01).abs() < 1e-10);
    }

    #[test]
    fn printed_table_row() {
        let t = WaldTest::from_estimate("intercept", -0.360, 0.030, -0.011);
        assert!((t.z - (-11.633333333333333)).abs() < 1e-9);
        assert!(t.p < 0.001);
        assert!((t.ci95.0 - (-0.4188)).abs() < 1e-12 && (t.ci95.1 - (-0.3012)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn interval_and_z_agree(est in -5.0f64..5.0, se in 0.001f64..2.0, null in -5.0f64..5.0) {
            let t = WaldTest::from_estimate("b", est, se, null);
            let inside = t.ci95.0 < null && null < t.ci95.1;
            let small = t.z.abs() < Z_95;
            // exact ties at the boundary are measure-zero; allow float slop
            prop_assume!((t.z.abs() - Z_95).abs() > 1e-9);
            prop_assert_eq!(inside, small);
            prop_assert!((0.0..=1.0).contains(&t.p));
        }
    }
}
