//! Standard-normal CDF helpers that stay accurate in both tails.

use libm::erfc;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-probabilities are never reported below ln(1e-300).
pub const LOG_PROB_FLOOR: f64 = -690.775_527_898_213_7;

/// Φ(z).
#[inline]
pub fn cdf(z: f64) -> f64 {
    0.5 * erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// 1 − Φ(z), computed without cancellation for large z.
#[inline]
pub fn sf(z: f64) -> f64 {
    cdf(-z)
}

/// ln φ(z) for the standard normal density.
#[inline]
pub fn ln_pdf(z: f64) -> f64 {
    -0.5 * (LN_2PI + z * z)
}

/// ln N(x; mean, var).
#[inline]
pub fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// ln Φ(z).
pub fn ln_cdf(z: f64) -> f64 {
    if z > 0.0 {
        (-sf(z)).ln_1p()
    } else if z > -35.0 {
        cdf(z).ln()
    } else {
        // Asymptotic expansion of the Mills ratio.
        let z2 = z * z;
        ln_pdf(z) - (-z).ln() + (-1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)).ln_1p()
    }
}

/// ln(Φ(b) − Φ(a)) for a < b; either end may be infinite.
pub fn ln_interval(a: f64, b: f64) -> f64 {
    debug_assert!(a <= b);
    if a == b {
        return f64::NEG_INFINITY;
    }
    // Reflect so the interval sits in the lower tail, where Φ keeps relative
    // precision.
    let (lo, hi) = if a > 0.0 { (-b, -a) } else { (a, b) };
    let ln_hi = ln_cdf(hi);
    if lo == f64::NEG_INFINITY {
        return ln_hi;
    }
    let ln_lo = ln_cdf(lo);
    let diff = ln_lo - ln_hi;
    if diff >= 0.0 {
        return f64::NEG_INFINITY;
    }
    ln_hi + ln_one_minus_exp(diff)
}

/// ln(1 − eˣ) for x < 0.
#[inline]
fn ln_one_minus_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}
