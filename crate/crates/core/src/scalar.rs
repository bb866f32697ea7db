//! Scalar moduli shared by the estimates: the negative part of the
//! logarithm and the two moduli of continuity built from it.

use crate::{Error, Result};

/// `-ln r` on `(0, 1]`, zero beyond.
pub fn ln_minus(r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("ln_minus requires r > 0, got {r}")));
    }
    Ok(ln_minus_unchecked(r))
}

#[inline]
pub(crate) fn ln_minus_unchecked(r: f64) -> f64 {
    if r <= 1.0 {
        -r.ln()
    } else {
        0.0
    }
}

/// `r (ln_- r + 1)`, extended by 0 at the origin.
pub fn phi_modulus(r: f64) -> f64 {
    debug_assert!(r >= 0.0, "phi_modulus requires r >= 0");
    if r <= 0.0 {
        return 0.0;
    }
    r * (ln_minus_unchecked(r) + 1.0)
}

/// The quasi-Lipschitz modulus `r (2 + ln_- r)^2` on `[0, 1]`, constant 4
/// beyond. Continuous, nondecreasing and concave on `[0, inf)`.
pub fn gamma_modulus(r: f64) -> f64 {
    debug_assert!(r >= 0.0, "gamma_modulus requires r >= 0");
    if r <= 0.0 {
        0.0
    } else if r <= 1.0 {
        let s = 2.0 + ln_minus_unchecked(r);
        r * s * s
    } else {
        4.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    #[test]
    fn ln_minus_values() {
        assert!((ln_minus(0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(ln_minus(1.0).unwrap(), 0.0);
        assert_eq!(ln_minus(2.0).unwrap(), 0.0);
    }

    #[test]
    fn ln_minus_rejects_nonpositive() {
        assert!(matches!(ln_minus(0.0), Err(Error::Domain(_))));
        assert!(matches!(ln_minus(-1.0), Err(Error::Domain(_))));
        assert!(matches!(ln_minus(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi_modulus(1.0), 1.0);
        assert_eq!(phi_modulus(0.0), 0.0);
        assert!((phi_modulus(1.0 / E) - 2.0 / E).abs() < 1e-15);
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_modulus(1.0), 4.0);
        assert_eq!(gamma_modulus(0.0), 0.0);
        assert_eq!(gamma_modulus(2.0), 4.0);
        // both branches meet at r = 1
        assert!((gamma_modulus(1.0 - 1e-12) - 4.0).abs() < 1e-10);
    }

    #[test]
    fn gamma_nondecreasing_on_log_grid() {
        let grid: Vec<f64> = (0..=900).map(|k| 10f64.powf(-8.0 + 9.0 * k as f64 / 900.0)).collect();
        for w in grid.windows(2) {
            assert!(gamma_modulus(w[0]) <= gamma_modulus(w[1]), "at {} {}", w[0], w[1]);
        }
    }

    #[test]
    fn phi_times_log_power_is_bounded_near_zero() {
        for p in [1.0, 1.5] {
            let values: Vec<f64> = (1..=12)
                .map(|k| {
                    let r = 10f64.powi(-k);
                    phi_modulus(r) * ln_minus(r).unwrap().powf(p)
                })
                .collect();
            let max = values.iter().cloned().fold(0.0, f64::max);
            assert!(max < 2.0, "p = {p}: {values:?}");
            // and the product actually vanishes as r -> 0
            assert!(values[11] < values[2]);
        }
    }

    proptest! {
        #[test]
        fn ln_minus_complements_ln(r in 1e-300f64..=1.0) {
            prop_assert!((ln_minus(r).unwrap() + r.ln()).abs() <= 1e-15 * r.ln().abs().max(1.0));
        }

        #[test]
        fn ln_minus_vanishes_beyond_one(r in 1.0f64..1e300) {
            prop_assert_eq!(ln_minus(r).unwrap(), 0.0);
        }

        #[test]
        fn gamma_midpoint_concave(a in 0.0f64..10.0, b in 0.0f64..10.0) {
            let mid = gamma_modulus(0.5 * (a + b));
            let chord = 0.5 * (gamma_modulus(a) + gamma_modulus(b));
            prop_assert!(mid >= chord - 1e-12, "a={} b={} mid={} chord={}", a, b, mid, chord);
        }

        #[test]
        fn gamma_concave_on_small_scales(la in -8.0f64..0.0, lb in -8.0f64..0.0) {
            let (a, b) = (10f64.powf(la), 10f64.powf(lb));
            let mid = gamma_modulus(0.5 * (a + b));
            let chord = 0.5 * (gamma_modulus(a) + gamma_modulus(b));
            prop_assert!(mid >= chord * (1.0 - 1e-12));
        }
    }
}
