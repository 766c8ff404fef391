//! Normal and chi-square distribution helpers.
//!
//! The normal CDF uses `libm::erfc`, quantiles and the chi-square tail come
//! from `statrs`; the probit pieces that need to stay
//! finite far in the tails (log Φ and the inverse Mills ratio) are evaluated
//! with a continued fraction once the argument passes [`TAIL_SWITCH`].

use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};

/// Beyond this |w| the Mills-ratio continued fraction replaces direct CDF ratios.
pub const TAIL_SWITCH: f64 = 6.0;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

fn std_normal() -> Normal {
    Normal::standard()
}

pub fn normal_pdf(x: f64) -> f64 {
    std_normal().pdf(x)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail 1 − Φ(x), accurate for large x.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Φ⁻¹(p), polished with one Newton step against [`normal_cdf`].
pub fn normal_quantile(p: f64) -> f64 {
    let z = std_normal().inverse_cdf(p);
    if !z.is_finite() {
        return z;
    }
    let err = if p < 0.5 { normal_cdf(z) - p } else { (1.0 - p) - normal_sf(z) };
    let dens = normal_pdf(z);
    if dens > 0.0 {
        z - err / dens
    } else {
        z
    }
}

/// Two-sided p-value 2(1 − Φ(|z|)).
pub fn two_sided_p(z: f64) -> f64 {
    (2.0 * normal_sf(z.abs())).min(1.0)
}

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
pub fn chisq_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    match ChiSquared::new(df) {
        Ok(d) => d.sf(x),
        Err(_) => f64::NAN,
    }
}

/// Tail of the continued fraction x + 2/(x + 3/(x + ...)) for x ≥ TAIL_SWITCH.
///
/// With t = mills_tail(x): (1 − Φ(x))/φ(x) = 1/(x + 1/t).
fn mills_tail(x: f64) -> f64 {
    let mut t = x;
    for k in (2..=80).rev() {
        t = x + k as f64 / t;
    }
    t
}

/// log Φ(w) without underflow for very negative w.
pub fn log_normal_cdf(w: f64) -> f64 {
    if w < -TAIL_SWITCH {
        let x = -w;
        let ratio = 1.0 / (x + 1.0 / mills_tail(x));
        -0.5 * x * x - LN_SQRT_2PI + ratio.ln()
    } else if w <= 0.0 {
        normal_cdf(w).ln()
    } else {
        (-normal_sf(w)).ln_1p()
    }
}

/// Returns (λ(v), λ(v) + v) where λ(v) = φ(v)/Φ(v).
///
/// The second component is computed without cancellation in the lower tail.
pub fn probit_hazard(v: f64) -> (f64, f64) {
    if v < -TAIL_SWITCH {
        let x = -v;
        let t = mills_tail(x);
        (x + 1.0 / t, 1.0 / t)
    } else {
        let lambda = normal_pdf(v) / normal_cdf(v);
        (lambda, lambda + v)
    }
}
