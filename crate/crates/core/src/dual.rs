//! Regularized dual objective of the one-period martingale calibration.
//!
//! For a conditioning law `P = sum_i P_i delta_{s_i}` and strike multipliers
//! `V`, the dual reads
//!
//! ```text
//! G(u, h, V) = sum_i P_i u_i + sum_K f_K(V_K) + sum_K V_K mid_K
//!            + sum_i P_i exp(-u_i) I_u(h_i, V, s_i)
//! ```
//!
//! with `I_u` the mass of the Gaussian transition kernel tilted by
//! `exp(-sum_K V_K (s2 - K)+ - h (s2 - s_i))`. The first slice is the special
//! case of a single conditioning point at the spot.

use rayon::prelude::*;

use crate::arbitrage::{non_degeneracy_probe, ProbeOutcome};
use crate::error::{Error, Result};
use crate::kernels::{tilt_stats, GaussKernel, PointMoments};
use crate::prior::PriorParams;
use crate::quotes::WeightedSlice;
use crate::surface::DiscreteMarginal;

/// Parameters of the bid/ask penalty of one strike.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySpec {
    pub omega: f64,
    pub delta_bid: f64,
    pub delta_ask: f64,
}

impl PenaltySpec {
    pub fn new(omega: f64, delta_bid: f64, delta_ask: f64) -> Result<Self> {
        if !(omega > 0.0) || delta_bid > 0.0 || delta_ask < 0.0 {
            return Err(Error::Config(format!(
                "penalty needs omega > 0 and delta_bid <= 0 <= delta_ask (got {omega}, {delta_bid}, {delta_ask})"
            )));
        }
        Ok(Self { omega, delta_bid, delta_ask })
    }
}

/// Huber-like penalty: quadratic while `V omega` lies in the bid/ask band,
/// linear outside.
pub fn penalty(spec: &PenaltySpec, v: f64) -> f64 {
    let x = v * spec.omega;
    if x > spec.delta_ask {
        spec.delta_ask * v - spec.delta_ask * spec.delta_ask / (2.0 * spec.omega)
    } else if x < spec.delta_bid {
        spec.delta_bid * v - spec.delta_bid * spec.delta_bid / (2.0 * spec.omega)
    } else {
        0.5 * v * x
    }
}

pub fn penalty_grad(spec: &PenaltySpec, v: f64) -> f64 {
    (v * spec.omega).clamp(spec.delta_bid, spec.delta_ask)
}

pub fn penalty_hess(spec: &PenaltySpec, v: f64) -> f64 {
    let x = v * spec.omega;
    if x > spec.delta_bid && x < spec.delta_ask {
        spec.omega
    } else {
        0.0
    }
}

/// Multipliers: `u`, `h` per conditioning point, `v` per strike.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DualState {
    pub u: Vec<f64>,
    pub h: Vec<f64>,
    pub v: Vec<f64>,
}

impl DualState {
    pub fn zeros(points: usize, strikes: usize) -> Self {
        Self { u: vec![0.0; points], h: vec![0.0; points], v: vec![0.0; strikes] }
    }

    pub fn norm_inf(&self) -> f64 {
        self.u.iter().chain(&self.h).chain(&self.v).fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.h).chain(&self.v).all(|x| x.is_finite())
    }
}

/// Standard deviation of the prior transition from `s1` over `dt`.
pub fn kernel_sigma(prior: &PriorParams, s1: f64, dt: f64, spot: f64) -> f64 {
    let s = s1.max(1e-8 * spot);
    prior.sigma0 * s.powf(prior.beta) * dt.sqrt()
}

/// Everything that stays fixed while the multipliers move.
#[derive(Debug, Clone)]
pub struct SliceProblem {
    pub spot: f64,
    pub maturity: f64,
    pub grid: Vec<f64>,
    pub mass: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub strikes: Vec<f64>,
    pub mid: Vec<f64>,
    pub bid: Vec<f64>,
    pub ask: Vec<f64>,
    pub penalties: Vec<PenaltySpec>,
    pub floor: Option<f64>,
    pub parallel: bool,
    /// `Some(detail)` when the non-degeneracy probe found no certificate;
    /// only then is a steady downward trend of the objective read as
    /// divergence (a certified problem has a finite minimum).
    pub uncertified: Option<String>,
}

/// Conditioning points with mass below this are dropped.
pub const MIN_POINT_MASS: f64 = 1e-15;

impl SliceProblem {
    pub fn new(
        prev: &DiscreteMarginal,
        ws: &WeightedSlice,
        prior: &PriorParams,
        dt: f64,
        truncate_at_zero: bool,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let spot = ws.spot();
        let mut grid = Vec::with_capacity(prev.grid.len());
        let mut mass = Vec::with_capacity(prev.grid.len());
        for (&x, &p) in prev.grid.iter().zip(&prev.mass) {
            if p >= MIN_POINT_MASS {
                grid.push(x);
                mass.push(p);
            }
        }
        if grid.is_empty() {
            return Err(Error::Config("conditioning marginal has no mass".into()));
        }
        let total: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|m| *m /= total);
        let sigmas: Vec<f64> = grid.iter().map(|&s| kernel_sigma(prior, s, dt, spot)).collect();
        if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("prior kernel has non-positive width".into()));
        }
        let uncertified = match non_degeneracy_probe(ws, prev, 64)? {
            ProbeOutcome::Pass => None,
            ProbeOutcome::Inconclusive(detail) => Some(detail),
        };
        let penalties = (0..ws.len())
            .map(|j| PenaltySpec::new(ws.omega[j], ws.delta_bid[j], ws.delta_ask[j]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spot,
            maturity: ws.maturity(),
            grid,
            mass,
            sigmas,
            strikes: ws.strikes(),
            mid: ws.mid.clone(),
            bid: (0..ws.len()).map(|j| ws.bid(j)).collect(),
            ask: (0..ws.len()).map(|j| ws.ask(j)).collect(),
            penalties,
            floor: truncate_at_zero.then_some(0.0),
            parallel: true,
            uncertified,
        })
    }

    pub fn n_points(&self) -> usize {
        self.grid.len()
    }

    pub fn n_strikes(&self) -> usize {
        self.strikes.len()
    }

    pub fn kernel(&self, i: usize) -> GaussKernel {
        GaussKernel::new(self.grid[i], self.sigmas[i]).with_floor(self.floor)
    }

    pub(crate) fn map_points<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        if self.parallel {
            (0..self.n_points()).into_par_iter().map(f).collect()
        } else {
            (0..self.n_points()).map(f).collect()
        }
    }

    fn penalty_part(&self, v: &[f64]) -> f64 {
        self.penalties
            .iter()
            .zip(v)
            .zip(&self.mid)
            .map(|((p, &vk), &m)| penalty(p, vk) + vk * m)
            .sum()
    }
}

/// Objective value.
pub fn g12_value(state: &DualState, ctx: &SliceProblem) -> f64 {
    let ln_iu = ctx.map_points(|i| tilt_stats(&ctx.strikes, &state.v, state.h[i], &ctx.kernel(i)).0);
    let mut g = ctx.penalty_part(&state.v);
    for i in 0..ctx.n_points() {
        g += ctx.mass[i] * (state.u[i] + (ln_iu[i] - state.u[i]).exp());
    }
    g
}

/// Value, `u`-gradient and `h`-gradient together.
pub fn g12_point_grads(state: &DualState, ctx: &SliceProblem) -> (f64, Vec<f64>, Vec<f64>) {
    let stats = ctx.map_points(|i| tilt_stats(&ctx.strikes, &state.v, state.h[i], &ctx.kernel(i)));
    let mut g = ctx.penalty_part(&state.v);
    let mut gu = Vec::with_capacity(ctx.n_points());
    let mut gh = Vec::with_capacity(ctx.n_points());
    for (i, &(ln_iu, mean, _)) in stats.iter().enumerate() {
        let w = ctx.mass[i] * (ln_iu - state.u[i]).exp();
        g += ctx.mass[i] * state.u[i] + w;
        gu.push(ctx.mass[i] - w);
        gh.push(-w * mean);
    }
    (g, gu, gh)
}

/// Value, gradient and (optionally) Hessian in `V` at fixed `u`, `h`.
pub fn g12_v_derivatives(
    state: &DualState,
    ctx: &SliceProblem,
    with_hessian: bool,
) -> (f64, Vec<f64>, Option<Vec<f64>>) {
    let k = ctx.n_strikes();
    let moments = ctx.map_points(|i| {
        PointMoments::evaluate(&ctx.strikes, &state.v, state.h[i], &ctx.kernel(i), with_hessian)
    });
    let mut g = ctx.penalty_part(&state.v);
    let mut grad: Vec<f64> = (0..k)
        .map(|j| penalty_grad(&ctx.penalties[j], state.v[j]) + ctx.mid[j])
        .collect();
    let mut hess = with_hessian.then(|| {
        let mut h = vec![0.0; k * k];
        for j in 0..k {
            h[j * k + j] = penalty_hess(&ctx.penalties[j], state.v[j]);
        }
        h
    });
    for (i, m) in moments.iter().enumerate() {
        let w = ctx.mass[i] * (m.ln_iu - state.u[i]).exp();
        g += ctx.mass[i] * state.u[i] + w;
        for j in 0..k {
            grad[j] -= w * m.calls[j];
        }
        if let (Some(h), Some(mh)) = (hess.as_mut(), m.hessian.as_ref()) {
            for (a, b) in h.iter_mut().zip(mh) {
                *a += w * b;
            }
        }
    }
    (g, grad, hess)
}

pub fn g12_grad_v(state: &DualState, ctx: &SliceProblem) -> Vec<f64> {
    g12_v_derivatives(state, ctx, false).1
}

/// Row-major `k x k` Hessian in `V`.
pub fn g12_hess_v(state: &DualState, ctx: &SliceProblem) -> Vec<f64> {
    g12_v_derivatives(state, ctx, true).2.expect("hessian requested")
}

/// Gradient and Hessian in `V` of `min_{u,h} G`, evaluated at a state whose
/// `(u, h)` are already the exact minimizers for its `V`.
///
/// Per point the Hessian is the conditional call covariance with the part
/// explained by `s2 - s1` removed (the response of `h` to `V`).
pub fn profiled_v_derivatives(state: &DualState, ctx: &SliceProblem) -> (Vec<f64>, Vec<f64>) {
    let k = ctx.n_strikes();
    let moments = ctx.map_points(|i| {
        PointMoments::evaluate(&ctx.strikes, &state.v, state.h[i], &ctx.kernel(i), true)
    });
    let mut grad: Vec<f64> = (0..k)
        .map(|j| penalty_grad(&ctx.penalties[j], state.v[j]) + ctx.mid[j])
        .collect();
    let mut hess = vec![0.0; k * k];
    for j in 0..k {
        hess[j * k + j] = penalty_hess(&ctx.penalties[j], state.v[j]);
    }
    let mut b = vec![0.0; k];
    for (i, m) in moments.iter().enumerate() {
        let w = ctx.mass[i] * (m.ln_iu - state.u[i]).exp();
        let mh = m.hessian.as_ref().expect("hessian requested");
        let s1 = ctx.grid[i];
        let var = (m.second - m.mean * m.mean).max(0.0);
        for j in 0..k {
            grad[j] -= w * m.calls[j];
            // E[(s2-s1)(s2-K)+] = E[(s2-K)+^2] + (K-s1) E[(s2-K)+]
            let cross = mh[j * k + j] + (ctx.strikes[j] - s1) * m.calls[j];
            b[j] = cross - m.mean * m.calls[j];
        }
        for p in 0..k {
            for q in 0..k {
                let mut c = mh[p * k + q] - m.calls[p] * m.calls[q];
                if var > 0.0 {
                    c -= b[p] * b[q] / var;
                }
                hess[p * k + q] += w * c;
            }
        }
    }
    (grad, hess)
}

/// Exact minimizer in `u` for fixed `h`, `V`.
pub fn update_u(state: &DualState, ctx: &SliceProblem) -> Vec<f64> {
    ctx.map_points(|i| tilt_stats(&ctx.strikes, &state.v, state.h[i], &ctx.kernel(i)).0)
}

/// Settings of the per-point martingale root search.
#[derive(Debug, Clone, Copy)]
pub struct RootConfig {
    /// Stop once `|E[s2 - s1]| <= tol * sigma`.
    pub tol: f64,
    pub max_iter: usize,
    /// Give up once `|theta| * sigma` exceeds this.
    pub bound: f64,
}

impl Default for RootConfig {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 200, bound: 1e4 }
    }
}

/// Outcome of the martingale root search at one conditioning point.
#[derive(Debug, Clone, Copy)]
pub struct PointRoot {
    pub theta: f64,
    pub ln_iu: f64,
    pub mean: f64,
}

/// Finds `theta` with zero conditional drift, warm-started at `start`.
///
/// The drift `m(theta)` is strictly decreasing with `m' = -Var`, so a
/// bracketed Newton iteration is safe.
pub fn solve_theta(
    strikes: &[f64],
    v: &[f64],
    kern: &GaussKernel,
    start: f64,
    cfg: &RootConfig,
) -> std::result::Result<PointRoot, f64> {
    let sigma = kern.sigma;
    let eval = |t: f64| {
        let (ln, m, s) = tilt_stats(strikes, v, t, kern);
        (ln, m, (s - m * m).max(0.0))
    };
    let limit = cfg.bound / sigma;
    let tol = cfg.tol * sigma;
    let mut theta = if start.is_finite() { start } else { 0.0 };
    let (mut ln, mut m, mut var) = eval(theta);
    if m.abs() <= tol {
        return Ok(PointRoot { theta, ln_iu: ln, mean: m });
    }
    // bracket: m(lo) > 0 > m(hi)
    let (mut lo, mut hi) = if m > 0.0 { (theta, f64::INFINITY) } else { (f64::NEG_INFINITY, theta) };
    let mut best = (theta, ln, m);
    let mut expand = 0.5 / sigma;
    for _ in 0..cfg.max_iter {
        let newton = if var > 0.0 { theta + m / var } else { f64::NAN };
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            expand *= 2.0;
            if lo.is_finite() { lo + expand } else { hi - expand }
        };
        if next.abs() > limit {
            return Err(next);
        }
        if next == theta {
            break;
        }
        theta = next;
        (ln, m, var) = eval(theta);
        if m.abs() < best.2.abs() {
            best = (theta, ln, m);
        }
        if m.abs() <= tol {
            return Ok(PointRoot { theta, ln_iu: ln, mean: m });
        }
        if m > 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        if lo.is_finite() && hi.is_finite() && hi - lo <= 4.0 * f64::EPSILON * theta.abs().max(1.0 / sigma) {
            break;
        }
    }
    // precision floor reached: keep the smallest residual seen
    Ok(PointRoot { theta: best.0, ln_iu: best.1, mean: best.2 })
}

/// Exact minimizer in `h` for fixed `V` (`u` does not enter the root).
pub fn update_h(state: &DualState, ctx: &SliceProblem, cfg: &RootConfig) -> Result<Vec<f64>> {
    Ok(project(state, ctx, cfg)?.into_iter().map(|r| r.theta).collect())
}

/// Joint exact minimization over `(u, h)` at fixed `V`.
pub fn project(state: &DualState, ctx: &SliceProblem, cfg: &RootConfig) -> Result<Vec<PointRoot>> {
    let roots = ctx.map_points(|i| solve_theta(&ctx.strikes, &state.v, &ctx.kernel(i), state.h[i], cfg));
    roots
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|theta| Error::Solver {
                maturity: ctx.maturity,
                detail: format!(
                    "martingale multiplier at s1={} left its bracket (theta={theta:e})",
                    ctx.grid[i]
                ),
            })
        })
        .collect()
}
