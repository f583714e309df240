//! Martingale Sinkhorn iterations.
//!
//! Each outer iteration first minimizes the dual exactly over the
//! per-point multipliers `(u, h)` (a closed form for `u` and a 1D root for
//! `h`), then minimizes over the strike multipliers `V` by damped Newton.
//!
//! Plain alternation is slow when the calls nearly span the linear payoff
//! (tight spreads, dense strikes): `h` and `V` then trade off against each
//! other one small step at a time. With `accelerate` on, every projection
//! is followed by a Newton step on `V -> min_{u,h} G`, accepted only when
//! it lowers the projected objective, so the trace stays monotone.

use std::fmt::Write as _;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dual::{
    g12_point_grads, g12_v_derivatives, g12_value, penalty_grad, profiled_v_derivatives, project, DualState, RootConfig,
    SliceProblem,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub shrink: f64,
    pub armijo: f64,
    pub max_steps: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self { shrink: 0.5, armijo: 1e-4, max_steps: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stopping tolerance on the sup-norm of the gradient, relative to the spot.
    pub grad_tol: f64,
    pub max_outer: usize,
    pub max_newton: usize,
    pub line_search: LineSearch,
    /// Sup-norm of the multipliers beyond which the run is declared divergent.
    pub divergence_bound: f64,
    /// Relative tolerance of the per-point martingale root.
    pub h_tol: f64,
    /// Window (in outer iterations) of the divergence trend test, which only
    /// runs on problems the non-degeneracy probe could not certify.
    pub divergence_window: usize,
    pub parallel: bool,
    /// After each projection, try a Newton step on `min_{u,h} G` as a
    /// function of `V`, kept only when it lowers the projected objective.
    #[serde(default = "yes")]
    pub accelerate: bool,
}

fn yes() -> bool {
    true
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_outer: 500,
            max_newton: 50,
            line_search: LineSearch::default(),
            divergence_bound: 1e3,
            h_tol: 1e-12,
            divergence_window: 40,
            parallel: true,
            accelerate: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ls = &self.line_search;
        if !(self.grad_tol > 0.0)
            || self.max_outer == 0
            || self.max_newton == 0
            || !(self.divergence_bound > 0.0)
            || !(self.h_tol > 0.0)
            || !(ls.shrink > 0.0 && ls.shrink < 1.0)
            || !(ls.armijo > 0.0 && ls.armijo < 0.5)
            || ls.max_steps == 0
        {
            return Err(Error::Config(format!("invalid solver settings: {self:?}")));
        }
        Ok(())
    }

    fn root(&self) -> RootConfig {
        RootConfig { tol: self.h_tol, max_iter: 200, bound: self.divergence_bound * 1e3 }
    }
}

/// One outer iteration, recorded after the `(u, h)` projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub g: f64,
    pub grad_inf: f64,
    /// Largest mismatch between the implied first marginal and the target,
    /// measured before this iteration's projection.
    pub marginal_err: f64,
    /// Largest conditional drift `|E[S2 - s1 | s1]|` in price units.
    pub mart_err: f64,
    /// Largest distance of a model price outside its bid/ask interval.
    pub band_viol: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub maturity: f64,
    pub records: Vec<IterRecord>,
    /// Objective after every half-step, in order.
    pub half_steps: Vec<f64>,
    pub lambda_hat: f64,
    pub converged: bool,
}

impl ConvergenceTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,G,grad_inf,marginal_err,mart_err,band_viol\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.17e},{:.6e},{:.6e},{:.6e},{:.6e}",
                r.iter, r.g, r.grad_inf, r.marginal_err, r.mart_err, r.band_viol
            );
        }
        out
    }

    pub fn last(&self) -> Option<&IterRecord> {
        self.records.last()
    }

    /// Largest increase between consecutive half-steps (0 if monotone).
    pub fn max_increase(&self) -> f64 {
        self.half_steps.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// Geometric mean of consecutive gap ratios.
pub fn rate_from_gaps(gaps: &[f64]) -> f64 {
    let gaps: Vec<f64> = gaps.iter().copied().filter(|g| *g > 0.0 && g.is_finite()).collect();
    if gaps.len() < 2 {
        return f64::NAN;
    }
    let first = gaps[0];
    let last = gaps[gaps.len() - 1];
    (last / first).powf(1.0 / (gaps.len() - 1) as f64)
}

/// Empirical linear rate of the objective over the trailing iterations.
///
/// The optimum is proxied by the final objective minus a slack of order
/// `grad_tol^2`; iterations already within `1000 * slack` of it are skipped.
pub fn estimate_rate(trace: &ConvergenceTrace, slack: f64) -> f64 {
    const WINDOW: usize = 10;
    let g: Vec<f64> = trace.records.iter().map(|r| r.g).collect();
    if g.len() < 2 {
        // converged at the starting point
        return 0.0;
    }
    let slack = slack.max(f64::EPSILON * g[g.len() - 1].abs());
    let g_star = g[g.len() - 1] - slack;
    let gaps: Vec<f64> = g.iter().map(|x| x - g_star).collect();
    let end = gaps.iter().rposition(|&x| x > 1e3 * slack).map_or(gaps.len(), |p| p + 1);
    let start = end.saturating_sub(WINDOW);
    let window = &gaps[start..end.max(start + 2).min(gaps.len())];
    let rate = rate_from_gaps(window);
    if rate >= 1.0 {
        warn!("objective gaps are not shrinking over the trailing window (rate {rate:.4})");
        return 1.0;
    }
    if rate.is_nan() {
        return 1.0;
    }
    rate
}

/// Statistics of one `(u, h)` projection.
struct Projected {
    g: f64,
    mart_err: f64,
    drift_grad: f64,
}

fn apply_projection(state: &mut DualState, ctx: &SliceProblem, root: &RootConfig) -> Result<Projected> {
    let roots = project(state, ctx, root)?;
    let mut g = 1.0;
    let mut mart_err: f64 = 0.0;
    let mut drift_grad: f64 = 0.0;
    for (i, r) in roots.iter().enumerate() {
        state.h[i] = r.theta;
        state.u[i] = r.ln_iu;
        g += ctx.mass[i] * r.ln_iu;
        mart_err = mart_err.max(r.mean.abs());
        drift_grad = drift_grad.max(ctx.mass[i] * r.mean.abs());
    }
    g += ctx
        .penalties
        .iter()
        .zip(&state.v)
        .zip(&ctx.mid)
        .map(|((p, &v), &m)| crate::dual::penalty(p, v) + v * m)
        .sum::<f64>();
    Ok(Projected { g, mart_err, drift_grad })
}

/// Model call prices at the quoted strikes for the current multipliers,
/// recovered from the `V`-gradient.
pub fn model_prices(state: &DualState, ctx: &SliceProblem, grad_v: &[f64]) -> Vec<f64> {
    (0..ctx.n_strikes())
        .map(|j| penalty_grad(&ctx.penalties[j], state.v[j]) + ctx.mid[j] - grad_v[j])
        .collect()
}

fn band_violation(prices: &[f64], ctx: &SliceProblem) -> f64 {
    prices
        .iter()
        .zip(ctx.bid.iter().zip(&ctx.ask))
        .map(|(&p, (&b, &a))| (b - p).max(p - a).max(0.0))
        .fold(0.0, f64::max)
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Result of a `V`-minimization at fixed `(u, h)`.
#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub v: Vec<f64>,
    pub steps: usize,
    pub value: f64,
    pub grad_inf: f64,
}

/// Whether a predicted decrease is too small for `G` to resolve. Armijo
/// comparisons are then decided by rounding, so a full Newton step is
/// taken instead, provided the gradient shrinks.
fn below_rounding(slope: f64, g: f64) -> bool {
    -slope <= 64.0 * f64::EPSILON * g.abs().max(1.0)
}

fn noise_level_step(st: &DualState, ctx: &SliceProblem, dir: &DVector<f64>, g: f64, grad_inf: f64) -> Option<DualState> {
    let mut trial = st.clone();
    for (v, d) in trial.v.iter_mut().zip(dir.iter()) {
        *v += d;
    }
    let (gt, grad, _) = g12_v_derivatives(&trial, ctx, false);
    (gt <= g + 4.0 * f64::EPSILON * g.abs() && sup(&grad) < grad_inf).then_some(trial)
}

/// Minimizes the dual over `V` with `u`, `h` held fixed.
pub fn newton_v(state: &DualState, ctx: &SliceProblem, cfg: &SolverConfig, tol: f64) -> Result<NewtonOutcome> {
    let mut st = state.clone();
    let (mut g, mut grad, mut hess) = g12_v_derivatives(&st, ctx, true);
    let k = ctx.n_strikes();
    let mut steps = 0;
    while steps < cfg.max_newton && sup(&grad) > tol {
        let gvec = DVector::from_column_slice(&grad);
        let hmat = DMatrix::from_row_slice(k, k, hess.as_ref().expect("hessian"));
        let newton = hmat.cholesky().map(|c| -c.solve(&gvec)).filter(|d| d.iter().all(|x| x.is_finite()));
        let (dir, is_newton) = match newton {
            Some(d) if d.dot(&gvec) < 0.0 => (d, true),
            _ => {
                debug!("V-step: Hessian not usable, taking a gradient step");
                (-gvec.clone(), false)
            }
        };
        let slope = dir.dot(&gvec);
        let mut t = if is_newton { 1.0 } else { 1.0 / sup(&grad).max(1.0) };
        let mut accepted = None;
        let search = if is_newton && below_rounding(slope, g) { 0 } else { cfg.line_search.max_steps };
        for _ in 0..search {
            let mut trial = st.clone();
            for j in 0..k {
                trial.v[j] += t * dir[j];
            }
            let gt = g12_value(&trial, ctx);
            if gt.is_finite() && gt <= g + cfg.line_search.armijo * t * slope {
                accepted = Some(trial);
                break;
            }
            t *= cfg.line_search.shrink;
        }
        let accepted = accepted.or_else(|| is_newton.then(|| noise_level_step(&st, ctx, &dir, g, sup(&grad))).flatten());
        let Some(next) = accepted else {
            break;
        };
        st = next;
        steps += 1;
        (g, grad, hess) = g12_v_derivatives(&st, ctx, true);
    }
    Ok(NewtonOutcome { v: st.v, steps, value: g, grad_inf: sup(&grad) })
}

/// One damped Newton step on the projected objective `V -> min_{u,h} G`.
///
/// `state` must be projected with value `g`. Returns the projected trial
/// state when it satisfies the Armijo condition, `None` otherwise.
fn profiled_step(
    state: &DualState,
    ctx: &SliceProblem,
    cfg: &SolverConfig,
    root: &RootConfig,
    g: f64,
) -> Option<(DualState, Projected)> {
    let k = ctx.n_strikes();
    let (grad, hess) = profiled_v_derivatives(state, ctx);
    let gvec = DVector::from_column_slice(&grad);
    let hmat = DMatrix::from_row_slice(k, k, &hess);
    let dir = hmat.cholesky().map(|c| -c.solve(&gvec))?;
    let slope = dir.dot(&gvec);
    if !(slope < 0.0) || !dir.iter().all(|x| x.is_finite()) {
        return None;
    }
    let mut t = 1.0;
    let search = if below_rounding(slope, g) { 0 } else { cfg.line_search.max_steps };
    for _ in 0..search {
        let mut trial = state.clone();
        for j in 0..k {
            trial.v[j] += t * dir[j];
        }
        if let Ok(p) = apply_projection(&mut trial, ctx, root) {
            if p.g.is_finite() && p.g <= g + cfg.line_search.armijo * t * slope {
                return Some((trial, p));
            }
        }
        t *= cfg.line_search.shrink;
    }
    let mut trial = state.clone();
    for j in 0..k {
        trial.v[j] += dir[j];
    }
    let p = apply_projection(&mut trial, ctx, root).ok()?;
    let (grad_t, _) = profiled_v_derivatives(&trial, ctx);
    (p.g <= g + 4.0 * f64::EPSILON * g.abs() && sup(&grad_t) < sup(&grad)).then_some((trial, p))
}

/// Runs the alternating scheme from zero multipliers.
pub fn sinkhorn_calibrate(ctx: &SliceProblem, cfg: &SolverConfig) -> Result<(DualState, ConvergenceTrace)> {
    cfg.validate()?;
    let mut ctx_local;
    let ctx = if ctx.parallel != cfg.parallel {
        ctx_local = ctx.clone();
        ctx_local.parallel = cfg.parallel;
        &ctx_local
    } else {
        ctx
    };
    let tol = cfg.grad_tol * ctx.spot;
    let root = cfg.root();
    let mut state = DualState::zeros(ctx.n_points(), ctx.n_strikes());
    let mut trace = ConvergenceTrace { maturity: ctx.maturity, ..Default::default() };
    let mut norms: Vec<f64> = Vec::new();

    let arbitrage = |trace: &ConvergenceTrace, detail: String| Error::ArbitrageSuspected {
        maturity: ctx.maturity,
        detail,
        trace: Box::new(trace.clone()),
    };

    for iter in 0..cfg.max_outer {
        // marginal mismatch left by the previous V-step, before projection removes it
        let (_, grad_u, _) = g12_point_grads(&state, ctx);
        let marginal_err = sup(&grad_u);
        let proj = match apply_projection(&mut state, ctx, &root) {
            Ok(p) => p,
            Err(Error::Solver { detail, .. }) => return Err(arbitrage(&trace, detail)),
            Err(e) => return Err(e),
        };
        let (_, grad_v, hess) = g12_v_derivatives(&state, ctx, false);
        debug_assert!(hess.is_none());
        let prices = model_prices(&state, ctx, &grad_v);
        let grad_inf = sup(&grad_v).max(proj.drift_grad);
        trace.half_steps.push(proj.g);
        trace.records.push(IterRecord {
            iter,
            g: proj.g,
            grad_inf,
            marginal_err,
            mart_err: proj.mart_err,
            band_viol: band_violation(&prices, ctx),
        });
        debug!("t={} iter {iter}: G={:.15e} |grad|={grad_inf:.3e}", ctx.maturity, proj.g);

        if grad_inf <= tol {
            trace.converged = true;
            trace.lambda_hat = estimate_rate(&trace, tol * tol);
            return Ok((state, trace));
        }

        let norm = state.norm_inf();
        norms.push(norm);
        if !state.is_finite() || norm > cfg.divergence_bound {
            return Err(arbitrage(
                &trace,
                format!("multipliers exceeded the divergence bound ({norm:.3e} > {:.3e})", cfg.divergence_bound),
            ));
        }
        if ctx.uncertified.is_some() {
            if let Some(detail) = divergence_trend(&trace.records, &norms, cfg.divergence_window) {
                return Err(arbitrage(&trace, detail));
            }
        }

        if cfg.accelerate {
            if let Some((next, p)) = profiled_step(&state, ctx, cfg, &root, proj.g) {
                state = next;
                trace.half_steps.push(p.g);
            }
        }

        let outcome = newton_v(&state, ctx, cfg, 0.1 * tol)?;
        state.v = outcome.v;
        trace.half_steps.push(outcome.value);
    }
    trace.lambda_hat = estimate_rate(&trace, tol * tol);
    let last = trace.last().copied();
    Err(Error::NotConverged {
        maturity: ctx.maturity,
        iterations: cfg.max_outer,
        grad_inf: last.map_or(f64::NAN, |r| r.grad_inf),
        trace: Box::new(trace),
    })
}

/// Flags runs whose objective keeps falling by a steady amount while the
/// gradient stays put and the multipliers keep growing: the signature of an
/// objective unbounded below.
fn divergence_trend(records: &[IterRecord], norms: &[f64], window: usize) -> Option<String> {
    if window < 4 || records.len() < 2 * window {
        return None;
    }
    let n = records.len();
    let rec = &records[n - window..];
    let nrm = &norms[norms.len() - window..];
    if !nrm.windows(2).all(|w| w[1] > w[0]) {
        return None;
    }
    let d_first = rec[0].g - rec[1].g;
    let d_last = rec[window - 2].g - rec[window - 1].g;
    if !(d_first > 0.0 && d_last >= 0.9 * d_first) {
        return None;
    }
    if rec[window - 1].grad_inf < 0.9 * rec[0].grad_inf {
        return None;
    }
    // a slowly converging run also looks like this; ignore decrements at
    // rounding level, extrapolate the decay of the others and require the
    // remaining fall to be material
    let scale = rec[window - 1].g.abs().max(1.0);
    if d_last < 1e-10 * scale {
        return None;
    }
    let r = (d_last / d_first).powf(1.0 / (window - 2) as f64);
    let remaining = if r >= 1.0 { f64::INFINITY } else { d_last * r / (1.0 - r) };
    if remaining < 1e-6 * scale {
        return None;
    }
    Some(format!(
        "objective decreasing without bound: {:.3e} per iteration, gradient stuck at {:.3e}, multipliers at {:.3e}",
        d_last,
        rec[window - 1].grad_inf,
        nrm[window - 1]
    ))
}
