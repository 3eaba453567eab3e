//! Soft area penalties on the mean attention of a map.
//!
//! Both replace hard area budgets with smooth terms so that training gets a
//! gradient pushing the attention area toward a useful size.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Lower clamp applied to the mean attention before evaluating the
/// feature-distortion penalty, whose value diverges at zero.
pub const MFD_PENALTY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    /// `E^(3 - 2E)` on `[0, 1]`.
    Itc,
    /// `0.5 * (1.1 E)^(8E - 0.1)` with `E` clamped to `[eps, 1]`.
    Mfd,
}

impl PenaltyKind {
    pub fn value<T: Scalar>(self, e: T) -> T {
        match self {
            PenaltyKind::Itc => {
                let e = e.max(T::zero()).min(T::one());
                let exponent = T::lit(3.0) - T::lit(2.0) * e;
                e.powf(exponent)
            }
            PenaltyKind::Mfd => {
                let e = e.max(T::lit(MFD_PENALTY_EPS));
                let exponent = T::lit(8.0) * e - T::lit(0.1);
                T::lit(0.5) * (T::lit(1.1) * e).powf(exponent)
            }
        }
    }

    /// First derivative with respect to the mean attention. Zero inside the
    /// clamped region of the feature-distortion penalty.
    pub fn derivative<T: Scalar>(self, e: T) -> T {
        match self {
            PenaltyKind::Itc => {
                if e <= T::zero() {
                    return T::zero();
                }
                let e = e.min(T::one());
                // d/dE exp((3 - 2E) ln E) = f * (-2 ln E + (3 - 2E) / E)
                let f = self.value(e);
                f * (-T::lit(2.0) * e.ln() + (T::lit(3.0) - T::lit(2.0) * e) / e)
            }
            PenaltyKind::Mfd => {
                if e < T::lit(MFD_PENALTY_EPS) {
                    return T::zero();
                }
                let f = self.value(e);
                let exponent = T::lit(8.0) * e - T::lit(0.1);
                f * (T::lit(8.0) * (T::lit(1.1) * e).ln() + exponent / e)
            }
        }
    }
}

/// Texture-model area penalty: `E^(3 - 2E)`.
pub fn itc_area_penalty(mean_attention: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&mean_attention) {
        return Err(invalid(format!(
            "mean attention {mean_attention} outside [0, 1]"
        )));
    }
    Ok(PenaltyKind::Itc.value(mean_attention))
}

/// Feature-distortion area penalty `0.5 * (1.1 E)^(8E - 0.1)`; inputs below
/// [`MFD_PENALTY_EPS`] are clamped, never rejected.
pub fn mfd_area_penalty(mean_attention: f64) -> f64 {
    PenaltyKind::Mfd.value(mean_attention)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn itc_penalty_closed_forms() {
        assert_eq!(itc_area_penalty(0.0).unwrap(), 0.0);
        assert_eq!(itc_area_penalty(1.0).unwrap(), 1.0);
        assert_eq!(itc_area_penalty(0.5).unwrap(), 0.25);
        assert!(itc_area_penalty(-0.01).is_err());
        assert!(itc_area_penalty(1.01).is_err());
    }

    #[test]
    fn itc_penalty_monotone_on_grid() {
        let mut prev = 0.0;
        for i in 0..=1000 {
            let v = itc_area_penalty(i as f64 / 1000.0).unwrap();
            assert!(v >= prev, "decrease at {i}");
            prev = v;
        }
    }

    #[test]
    fn mfd_penalty_closed_forms() {
        assert!((mfd_area_penalty(0.0125) - 0.5).abs() < 1e-9);
        let at_one = 0.5 * 1.1f64.powf(7.9);
        assert!((mfd_area_penalty(1.0) - at_one).abs() < 1e-12);
        assert!((at_one - 1.0616).abs() < 1e-4);
        // clamped, finite and large near zero
        let near_zero = mfd_area_penalty(0.0);
        assert!(near_zero.is_finite() && near_zero > 1.0);
    }

    #[test]
    fn derivatives_match_central_differences() {
        for kind in [PenaltyKind::Itc, PenaltyKind::Mfd] {
            for &e in &[0.05, 0.2, 0.37, 0.5, 0.81] {
                let h = 1e-6;
                let fd = (kind.value(e + h) - kind.value(e - h)) / (2.0 * h);
                let an: f64 = kind.derivative(e);
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{kind:?} at {e}");
            }
        }
    }
}
