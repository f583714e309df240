//! Normal-distribution special functions with tail-stable evaluation.
//!
//! Everything the closed-form band integrals need reduces to moments of a
//! standard normal restricted to an interval `[lo, hi]`. Those are evaluated
//! relative to one edge of the interval so that far-tail bands (which are
//! routine once the exponential tilt is large) keep full relative precision.

use std::f64::consts::FRAC_1_SQRT_2;

/// ln(sqrt(2*pi))
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

const SQRT_PI_OVER_2: f64 = 1.253_314_137_315_500_3;

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Scaled complementary error function `exp(x^2) erfc(x)` for moderate `x >= 0`.
///
/// The square is split with an fma so the exponential does not amplify the
/// rounding error of `x*x`.
fn erfcx_moderate(x: f64) -> f64 {
    debug_assert!((0.0..=27.0).contains(&x));
    let hi = x * x;
    let lo = x.mul_add(x, -hi);
    hi.exp() * (1.0 + lo) * erfc(x)
}

/// Tail quantities of the standard normal at `z >= 1`.
///
/// `ratio` is the Mills ratio `Q(z)/phi(z)`; `d1` and `d2` are the first two
/// moments of `Z - z` conditional on `Z > z`.
#[derive(Debug, Clone, Copy)]
pub struct Tail {
    pub ratio: f64,
    pub d1: f64,
    pub d2: f64,
}

pub fn mills(z: f64) -> Tail {
    debug_assert!(z >= 1.0);
    if z < 5.0 {
        let ratio = erfcx_moderate(z * FRAC_1_SQRT_2) * SQRT_PI_OVER_2;
        let d1 = 1.0 / ratio - z;
        let d2 = 1.0 - z * d1;
        Tail { ratio, d1, d2 }
    } else {
        // Laplace continued fraction, evaluated backward: cf_k = k / (z + cf_{k+1}).
        let depth = 24 + (2500.0 / (z * z)) as usize;
        let mut cf = 0.0;
        for k in (2..=depth).rev() {
            cf = k as f64 / (z + cf);
        }
        let cf2 = cf;
        let cf1 = 1.0 / (z + cf2);
        Tail {
            ratio: 1.0 / (z + cf1),
            d1: cf1,
            d2: cf2 / (z + cf2),
        }
    }
}

/// Which edge the distance moments of a [`StdBand`] are measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    /// `lo` is finite; distance is `Z - lo`; `ln_j` is relative to `phi(lo)`.
    Lower,
    /// `hi` is finite; distance is `hi - Z`; `ln_j` is relative to `phi(hi)`.
    Upper,
    /// Whole line; moments are raw moments of `Z`; `ln_j` is the log mass (= 0).
    Free,
}

/// Mass and edge-relative moments of a standard normal restricted to a band.
///
/// The probability of the band is `exp(ln_j) * phi(edge)` for an edge anchor,
/// `exp(ln_j)` for `Anchor::Free`. `d1`, `d2` are conditional on the band.
#[derive(Debug, Clone, Copy)]
pub struct StdBand {
    pub anchor: Anchor,
    pub ln_j: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Moments of the standard normal restricted to `[lo, hi]` (`lo < hi`, infinite ends allowed).
pub fn std_band(lo: f64, hi: f64) -> StdBand {
    debug_assert!(lo < hi, "empty band [{lo}, {hi}]");
    if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
        return StdBand { anchor: Anchor::Free, ln_j: 0.0, d1: 0.0, d2: 1.0 };
    }
    let width = hi - lo;
    if width.is_finite() && lo.abs() * width + 0.5 * width * width <= 1.0 {
        return narrow_band(lo, width);
    }
    if lo >= 1.0 {
        return upper_tail_band(lo, hi);
    }
    if hi <= -1.0 {
        let m = upper_tail_band(-hi, -lo);
        return StdBand { anchor: Anchor::Upper, ..m };
    }
    bulk_band(lo, hi)
}

/// `lo` finite and the log-density varies by at most about one unit over the band:
/// integrate the power series of `exp(-a u - b u^2)` on `[0, 1]` term by term.
fn narrow_band(lo: f64, width: f64) -> StdBand {
    let a = lo * width;
    let b = 0.5 * width * width;
    let mut s = [0.0f64; 3];
    let (mut c_prev2, mut c_prev) = (0.0f64, 1.0f64);
    for (n, s_n) in s.iter_mut().enumerate() {
        *s_n += 1.0 / (n as f64 + 1.0);
    }
    for p in 1..40usize {
        let c = (-a * c_prev - 2.0 * b * c_prev2) / p as f64;
        for (n, s_n) in s.iter_mut().enumerate() {
            *s_n += c / (n + p + 1) as f64;
        }
        if c.abs() < 1e-18 && c_prev.abs() < 1e-18 {
            break;
        }
        c_prev2 = c_prev;
        c_prev = c;
    }
    StdBand {
        anchor: Anchor::Lower,
        ln_j: width.ln() + s[0].ln(),
        d1: width * s[1] / s[0],
        d2: width * width * s[2] / s[0],
    }
}

/// `lo >= 1`, wide band: continued-fraction tail moments, finite `hi` removed by ratio.
fn upper_tail_band(lo: f64, hi: f64) -> StdBand {
    let ta = mills(lo);
    if hi == f64::INFINITY {
        return StdBand { anchor: Anchor::Lower, ln_j: ta.ratio.ln(), d1: ta.d1, d2: ta.d2 };
    }
    let width = hi - lo;
    let tb = mills(hi);
    let r = (-0.5 * width * (lo + hi)).exp() * tb.ratio / ta.ratio;
    let keep = 1.0 - r;
    StdBand {
        anchor: Anchor::Lower,
        ln_j: ta.ratio.ln() + (-r).ln_1p(),
        d1: (ta.d1 - r * (width + tb.d1)) / keep,
        d2: (ta.d2 - r * (width * width + 2.0 * width * tb.d1 + tb.d2)) / keep,
    }
}

/// Band that reaches into `(-1, 1)`: plain erf/erfc differences.
fn bulk_band(lo: f64, hi: f64) -> StdBand {
    let mass = if lo >= 0.0 {
        0.5 * (erfc(lo * FRAC_1_SQRT_2) - erfc(hi * FRAC_1_SQRT_2))
    } else if hi <= 0.0 {
        0.5 * (erfc(-hi * FRAC_1_SQRT_2) - erfc(-lo * FRAC_1_SQRT_2))
    } else {
        0.5 * (erf(hi * FRAC_1_SQRT_2) + erf(-lo * FRAC_1_SQRT_2))
    };
    let pdf_lo = if lo.is_finite() { norm_pdf(lo) } else { 0.0 };
    let pdf_hi = if hi.is_finite() { norm_pdf(hi) } else { 0.0 };
    let zpdf_lo = if lo.is_finite() { lo * pdf_lo } else { 0.0 };
    let zpdf_hi = if hi.is_finite() { hi * pdf_hi } else { 0.0 };
    let m1 = (pdf_lo - pdf_hi) / mass;
    let m2 = 1.0 + (zpdf_lo - zpdf_hi) / mass;
    if lo.is_finite() {
        StdBand {
            anchor: Anchor::Lower,
            ln_j: mass.ln() - norm_pdf_ln(lo),
            d1: m1 - lo,
            d2: m2 - 2.0 * lo * m1 + lo * lo,
        }
    } else {
        StdBand {
            anchor: Anchor::Upper,
            ln_j: mass.ln() - norm_pdf_ln(hi),
            d1: hi - m1,
            d2: hi * hi - 2.0 * hi * m1 + m2,
        }
    }
}

pub fn norm_pdf_ln(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// ln of the standard normal mass of `[lo, hi]`.
pub fn ln_normal_mass(lo: f64, hi: f64) -> f64 {
    let band = std_band(lo, hi);
    match band.anchor {
        Anchor::Lower => band.ln_j + norm_pdf_ln(lo),
        Anchor::Upper => band.ln_j + norm_pdf_ln(hi),
        Anchor::Free => band.ln_j,
    }
}

/// `log(exp(a) + exp(b))` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
