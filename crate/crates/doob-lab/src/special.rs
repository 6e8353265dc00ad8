//! Scalar special functions: Gaussian pdf/cdf, stable log-domain tails and
//! log-sum-exp helpers used by the h-transform oracles.

use std::f64::consts::PI;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_74;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Log of the standard normal density.
pub fn log_norm_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Standard normal CDF, computed through `erfc` so both tails stay accurate.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Upper tail Q(z) = P(Z > z).
pub fn norm_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

/// ln Q(z) for the upper tail, valid far beyond erfc underflow (z ~ 38).
///
/// For large z uses the Mills-ratio asymptotic
/// Q(z) = phi(z)/z * (1 - 1/z^2 + 3/z^4 - 15/z^6 + 105/z^8 + ...).
pub fn log_norm_sf(z: f64) -> f64 {
    if z < 25.0 {
        let q = norm_sf(z);
        if q > 0.0 {
            return q.ln();
        }
    }
    let z2 = z * z;
    let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)
        + 105.0 / (z2 * z2 * z2 * z2);
    -0.5 * z2 - LN_SQRT_2PI - z.ln() + series.ln()
}

/// ln Phi(z) for the lower tail.
pub fn log_norm_cdf(z: f64) -> f64 {
    log_norm_sf(-z)
}

/// ln(1 - e^x) for x < 0, stable near both ends.
pub fn ln_1m_exp(x: f64) -> f64 {
    debug_assert!(x <= 0.0);
    if x > -std::f64::consts::LN_2 {
        (-libm::expm1(x)).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// ln(P(a < Z < b)) for a standard normal, stable in deep tails.
///
/// Either bound may be infinite. Returns `NEG_INFINITY` when the interval
/// carries no mass at working precision.
pub fn log_gauss_mass(a: f64, b: f64) -> f64 {
    debug_assert!(a < b);
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return 0.0;
    }
    if b <= 0.0 {
        // mirror into the upper tail
        return log_gauss_mass(-b, -a);
    }
    if a < 0.0 {
        // interval straddles zero: mass = 1 - Q(-a) - Q(b)
        let q = norm_sf(-a) + norm_sf(b);
        return if q < 1.0 { (-q).ln_1p() } else { f64::NEG_INFINITY };
    }
    // 0 <= a < b: mass = Q(a) - Q(b)
    let la = log_norm_sf(a);
    if b == f64::INFINITY {
        return la;
    }
    let lb = log_norm_sf(b);
    if lb - la >= 0.0 {
        return f64::NEG_INFINITY;
    }
    la + ln_1m_exp(lb - la)
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax of log-weights, written into `out`.
pub fn softmax_from_log(xs: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(xs);
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = if lse.is_finite() { (x - lse).exp() } else { 0.0 };
    }
}

/// Inverse standard normal CDF (Acklam's rational approximation plus one
/// Halley refinement; ~1e-15 absolute over (0,1)).
pub fn norm_ppf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "norm_ppf requires p in (0,1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // one Halley step against the exact CDF
    let e = norm_cdf(x) - p;
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cdf_matches_known_values() {
        assert_abs_diff_eq!(norm_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(norm_cdf(1.0), 0.841344746068543, epsilon = 1e-12);
        assert_abs_diff_eq!(norm_sf(1.0), 1.0 - 0.841344746068543, epsilon = 1e-12);
    }

    #[test]
    fn log_sf_matches_direct_in_bulk_and_extends_into_tail() {
        for &z in &[-3.0, -0.5, 0.0, 1.0, 5.0, 20.0] {
            assert_abs_diff_eq!(log_norm_sf(z), norm_sf(z).ln(), epsilon = 1e-10);
        }
        // deep tail: finite and decreasing where erfc has underflowed
        let l40 = log_norm_sf(40.0);
        let l50 = log_norm_sf(50.0);
        assert!(l40.is_finite() && l50 < l40);
        assert_abs_diff_eq!(l40, -0.5 * 1600.0 - LN_SQRT_2PI - 40f64.ln(), epsilon = 1e-2);
    }

    #[test]
    fn gauss_mass_agrees_with_cdf_difference() {
        let cases = [(-1.0, 2.0), (0.3, 0.9), (-5.0, -4.0), (3.0, f64::INFINITY)];
        for &(a, b) in &cases {
            let direct = (norm_cdf(b) - norm_cdf(a)).ln();
            assert_abs_diff_eq!(log_gauss_mass(a, b), direct, epsilon = 1e-9);
        }
        assert_eq!(log_gauss_mass(f64::NEG_INFINITY, f64::INFINITY), 0.0);
        // survives regions where both cdf values round to 1
        let lm = log_gauss_mass(39.0, 40.0);
        assert!(lm.is_finite() && lm < -700.0);
    }

    #[test]
    fn ppf_inverts_cdf() {
        for &p in &[1e-12, 1e-4, 0.3, 0.5, 0.9, 1.0 - 1e-9] {
            assert_abs_diff_eq!(norm_cdf(norm_ppf(p)), p, epsilon = 1e-12);
        }
    }
}
