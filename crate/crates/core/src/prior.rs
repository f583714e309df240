//! Fitting the Gaussian reference kernel.
//!
//! The first slice uses a normal law `N(S0, sigma0^2 t1)`; transitions use
//! `N(s1, (sigma0 s1^beta)^2 dt)`. Both are fitted by least squares of
//! Bachelier prices against quoted mids.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pricing::bachelier;
use crate::quotes::WeightedSlice;
use crate::surface::DiscreteMarginal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    /// Volatility in price units per sqrt(year) at unit spot level when `beta > 0`.
    pub sigma0: f64,
    pub beta: f64,
}

impl PriorParams {
    pub fn new(sigma0: f64, beta: f64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::Fit(format!("sigma0 must be positive, got {sigma0}")));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Fit(format!("beta must lie in [0, 1], got {beta}")));
        }
        Ok(Self { sigma0, beta })
    }

    /// Local volatility (price units per sqrt(year)) at `s1`.
    pub fn local_vol(&self, s1: f64, spot: f64) -> f64 {
        self.sigma0 * s1.max(1e-8 * spot).powf(self.beta)
    }
}

/// Search range for the effective volatility, as multiples of the spot.
pub const SIGMA_LO: f64 = 1e-4;
pub const SIGMA_HI: f64 = 5.0;

fn check_mids(ws: &WeightedSlice) -> Result<()> {
    if ws.is_empty() {
        return Err(Error::Fit("no quotes to fit".into()));
    }
    if ws.mid.iter().all(|&m| m == 0.0) {
        return Err(Error::Fit("all mid prices are zero".into()));
    }
    Ok(())
}

/// Least-squares criterion of the first-slice prior.
pub fn first_prior_objective(ws: &WeightedSlice, sigma0: f64) -> f64 {
    let (s0, t) = (ws.spot(), ws.maturity());
    ws.strikes()
        .iter()
        .zip(&ws.mid)
        .map(|(&k, &m)| {
            let d = bachelier(s0, t, k, sigma0) - m;
            d * d
        })
        .sum()
}

fn first_prior_slope(ws: &WeightedSlice, sigma0: f64) -> f64 {
    let (s0, t) = (ws.spot(), ws.maturity());
    let sd = sigma0 * t.sqrt();
    ws.strikes()
        .iter()
        .zip(&ws.mid)
        .map(|(&k, &m)| {
            let y = (k - s0) / sd;
            let vega = t.sqrt() * (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt();
            2.0 * (bachelier(s0, t, k, sigma0) - m) * vega
        })
        .sum()
}

/// Minimizes a 1D function on `[lo, hi]`: log grid, then bisection on the
/// slope when available, golden section otherwise.
fn minimize_1d(f: &dyn Fn(f64) -> f64, slope: Option<&dyn Fn(f64) -> f64>, lo: f64, hi: f64) -> f64 {
    const N: usize = 80;
    let (la, lb) = (lo.ln(), hi.ln());
    let pts: Vec<f64> = (0..N).map(|i| (la + (lb - la) * i as f64 / (N - 1) as f64).exp()).collect();
    let vals: Vec<f64> = pts.iter().map(|&x| f(x)).collect();
    let best = (0..N).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let mut a = pts[best.saturating_sub(1)];
    let mut b = pts[(best + 1).min(N - 1)];
    if let Some(g) = slope {
        let (ga, gb) = (g(a), g(b));
        if ga < 0.0 && gb > 0.0 {
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if m <= a || m >= b {
                    break;
                }
                if g(m) > 0.0 {
                    b = m;
                } else {
                    a = m;
                }
            }
            let x = 0.5 * (a + b);
            return if f(x) <= vals[best] { x } else { pts[best] };
        }
    }
    golden(f, a, b, vals[best], pts[best])
}

fn golden(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, fbest: f64, xbest: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > 1e-13 * (a.abs() + b.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    if f(x) <= fbest {
        x
    } else {
        xbest
    }
}

/// Fits `sigma0` of the first-slice normal prior (`beta = 0`).
pub fn fit_first_prior(ws: &WeightedSlice) -> Result<PriorParams> {
    check_mids(ws)?;
    let s0 = ws.spot();
    let (lo, hi) = (SIGMA_LO * s0, SIGMA_HI * s0);
    let f = |s: f64| first_prior_objective(ws, s);
    let g = |s: f64| first_prior_slope(ws, s);
    let sigma = minimize_1d(&f, Some(&g), lo, hi);
    if sigma <= lo * 1.0001 || sigma >= hi * 0.9999 {
        warn!("first prior fit hit the search boundary (sigma0 = {sigma})");
    }
    PriorParams::new(sigma, 0.0)
}

/// Least-squares criterion of the transition prior, averaged over `prev`.
pub fn transition_prior_objective(
    prev: &DiscreteMarginal,
    ws: &WeightedSlice,
    dt: f64,
    params: &PriorParams,
) -> f64 {
    let spot = ws.spot();
    let vols: Vec<f64> = prev.grid.iter().map(|&s| params.local_vol(s, spot)).collect();
    ws.strikes()
        .iter()
        .zip(&ws.mid)
        .map(|(&k, &m)| {
            let model: f64 = prev
                .grid
                .iter()
                .zip(&prev.mass)
                .zip(&vols)
                .map(|((&s, &p), &sig)| p * bachelier(s, dt, k, sig))
                .sum();
            (model - m) * (model - m)
        })
        .sum()
}

/// Fits `(sigma0, beta)` of the transition kernel by least squares against
/// mid prices, averaging Bachelier prices over the previous marginal.
pub fn fit_transition_prior(prev: &DiscreteMarginal, ws: &WeightedSlice, dt: f64) -> Result<PriorParams> {
    check_mids(ws)?;
    if !(dt > 0.0) {
        return Err(Error::Fit(format!("time step must be positive, got {dt}")));
    }
    if !prev.mass.iter().any(|&p| p > 0.0) {
        return Err(Error::Fit("previous marginal has no mass".into()));
    }
    let spot = ws.spot();
    let (lo, hi) = (SIGMA_LO * spot, SIGMA_HI * spot);
    let level = spot;
    // parametrize by the effective vol at the spot level so the two
    // coordinates are roughly decoupled
    let to_params = |ls: f64, beta: f64| {
        let beta = beta.clamp(0.0, 1.0);
        let eff = ls.exp().clamp(lo, hi);
        PriorParams { sigma0: eff / level.powf(beta), beta }
    };
    let obj = |ls: f64, beta: f64| transition_prior_objective(prev, ws, dt, &to_params(ls, beta));

    let support = prev.mass.iter().filter(|&&p| p > 0.0).count();
    if support == 1 {
        // beta is not identified by a single conditioning point
        let f = |s: f64| obj(s.ln(), 0.0);
        let sigma = minimize_1d(&f, None, lo, hi);
        return PriorParams::new(sigma, 0.0);
    }

    const NS: usize = 40;
    const NB: usize = 11;
    let (la, lb) = (lo.ln(), hi.ln());
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..NS {
        let ls = la + (lb - la) * i as f64 / (NS - 1) as f64;
        for j in 0..NB {
            let b = j as f64 / (NB - 1) as f64;
            let v = obj(ls, b);
            if v < best.0 {
                best = (v, ls, b);
            }
        }
    }
    let step_s = (lb - la) / (NS - 1) as f64;
    let (mut ls, mut beta) = nelder_mead(&|x: [f64; 2]| obj(x[0], x[1]), [best.1, best.2], [step_s, 0.1]);
    beta = beta.clamp(0.0, 1.0);
    ls = ls.clamp(la, lb);

    if beta <= 1e-9 || beta >= 1.0 - 1e-9 {
        let f = |s: f64| obj(s.ln(), beta);
        ls = minimize_1d(&f, None, lo, hi).ln();
    }
    let p = to_params(ls, beta);
    if ls <= la + 1e-6 || ls >= lb - 1e-6 {
        warn!("transition prior fit hit the volatility search boundary");
    }
    PriorParams::new(p.sigma0, p.beta)
}

/// Plain Nelder-Mead in two dimensions. The objective is expected to clamp
/// its own arguments to the feasible box.
fn nelder_mead(f: &dyn Fn([f64; 2]) -> f64, x0: [f64; 2], step: [f64; 2]) -> (f64, f64) {
    let mut simplex = [x0, [x0[0] + step[0], x0[1]], [x0[0], x0[1] + step[1]]];
    let mut vals = simplex.map(f);
    let add = |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
    for _ in 0..4000 {
        let mut idx = [0, 1, 2];
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = idx.map(|i| simplex[i]);
        vals = idx.map(|i| vals[i]);
        let size = (0..2)
            .map(|d| (simplex[1][d] - simplex[0][d]).abs().max((simplex[2][d] - simplex[0][d]).abs()))
            .fold(0.0, f64::max);
        if size < 1e-12 || (vals[2] - vals[0]).abs() <= 1e-30 {
            break;
        }
        let centroid = add(simplex[0], simplex[1], 0.5);
        let refl = add(centroid, simplex[2], -1.0);
        let fr = f(refl);
        if fr < vals[0] {
            let exp = add(centroid, simplex[2], -2.0);
            let fe = f(exp);
            if fe < fr {
                simplex[2] = exp;
                vals[2] = fe;
            } else {
                simplex[2] = refl;
                vals[2] = fr;
            }
        } else if fr < vals[1] {
            simplex[2] = refl;
            vals[2] = fr;
        } else {
            let contr = if fr < vals[2] { add(centroid, refl, 0.5) } else { add(centroid, simplex[2], 0.5) };
            let fc = f(contr);
            if fc < vals[2].min(fr) {
                simplex[2] = contr;
                vals[2] = fc;
            } else {
                for i in 1..3 {
                    simplex[i] = add(simplex[0], simplex[i], 0.5);
                    vals[i] = f(simplex[i]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (simplex[best][0], simplex[best][1])
}
