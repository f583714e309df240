//! Black-Scholes and Bachelier call prices, and implied volatility inversion.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::special::{erfc, norm_cdf, norm_pdf, LN_SQRT_2PI};

/// Lower end of the total-volatility search bracket.
pub const TOTAL_VOL_MIN: f64 = 1e-8;
/// Upper end of the total-volatility search bracket.
pub const TOTAL_VOL_MAX: f64 = 10.0;

/// Zero-rate Black-Scholes call price with total volatility `sigma * sqrt(T)`.
pub fn bs_price(spot: f64, strike: f64, total_vol: f64) -> Result<f64> {
    if !(spot > 0.0 && strike > 0.0) {
        return Err(Error::Domain(format!("spot and strike must be > 0 (S={spot}, K={strike})")));
    }
    if !(total_vol >= 0.0) {
        return Err(Error::Domain(format!("total volatility must be >= 0, got {total_vol}")));
    }
    Ok(bs_unchecked(spot, strike, total_vol))
}

fn bs_unchecked(spot: f64, strike: f64, w: f64) -> f64 {
    if w == 0.0 {
        return (spot - strike).max(0.0);
    }
    if w == f64::INFINITY {
        return spot;
    }
    let d_plus = (spot / strike).ln() / w + 0.5 * w;
    let d_minus = d_plus - w;
    (spot * norm_cdf(d_plus) - strike * norm_cdf(d_minus)).max((spot - strike).max(0.0))
}

fn bs_vega_total(spot: f64, strike: f64, w: f64) -> f64 {
    let d_plus = (spot / strike).ln() / w + 0.5 * w;
    spot * norm_pdf(d_plus)
}

/// Implied total volatility for a call price strictly inside `((S-K)+, S)`.
pub fn implied_total_vol(spot: f64, strike: f64, price: f64) -> Result<f64> {
    if !(spot > 0.0 && strike > 0.0) {
        return Err(Error::Domain(format!("spot and strike must be > 0 (S={spot}, K={strike})")));
    }
    let intrinsic = (spot - strike).max(0.0);
    if !(price > intrinsic && price < spot) {
        return Err(Error::NoSolution(format!(
            "price {price} outside ({intrinsic}, {spot}) for K={strike}"
        )));
    }
    let f = |w: f64| bs_unchecked(spot, strike, w) - price;
    let mut lo = TOTAL_VOL_MIN;
    let mut hi = TOTAL_VOL_MAX;
    if f(lo) > 0.0 {
        // below the bracket; keep halving while it is still representable
        while f(lo) > 0.0 && lo > 1e-300 {
            hi = lo;
            lo *= 0.5;
        }
    }
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e4 {
            return Err(Error::NoSolution(format!("price {price} too close to spot {spot}")));
        }
    }
    let mut w = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fw = f(w);
        if fw == 0.0 {
            return Ok(w);
        }
        if fw > 0.0 {
            hi = w;
        } else {
            lo = w;
        }
        if fw.abs() <= 1e-14 * spot || hi - lo <= 4.0 * f64::EPSILON * w {
            return Ok(w);
        }
        let vega = bs_vega_total(spot, strike, w);
        let newton = w - fw / vega;
        w = if vega > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Ok(w)
}

/// Black-Scholes implied volatility (annualized) from a call price.
pub fn implied_vol(spot: f64, strike: f64, maturity: f64, price: f64) -> Result<f64> {
    if !(maturity > 0.0) {
        return Err(Error::Domain(format!("maturity must be > 0, got {maturity}")));
    }
    Ok(implied_total_vol(spot, strike, price)? / maturity.sqrt())
}

/// Bachelier call price `E[(s + sigma sqrt(t) Z - K)+]`.
pub fn bachelier_price(s: f64, t: f64, strike: f64, sigma: f64) -> Result<f64> {
    if !(t > 0.0 && sigma > 0.0) {
        return Err(Error::Domain(format!("t and sigma must be > 0 (t={t}, sigma={sigma})")));
    }
    Ok(bachelier(s, t, strike, sigma))
}

/// Unchecked Bachelier price; `sigma * sqrt(t)` must be positive.
pub fn bachelier(s: f64, t: f64, strike: f64, sigma: f64) -> f64 {
    let sd = sigma * t.sqrt();
    let y = (strike - s) / sd;
    0.5 * (s - strike) * erfc(y * FRAC_1_SQRT_2) + sd * (-0.5 * y * y - LN_SQRT_2PI).exp()
}
