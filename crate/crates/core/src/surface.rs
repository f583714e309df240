//! Slice-by-slice construction of the calibrated surface, smile queries and
//! persistence.

use std::fmt::Write as _;
use std::io::{Read, Write};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dual::{kernel_sigma, DualState, SliceProblem};
use crate::error::{Error, Result};
use crate::kernels::{call_ratio, cell_moments, ln_density, tilt_stats, upper_tail, CellMoments, GaussKernel};
use crate::pricing::implied_vol;
use crate::prior::{fit_first_prior, fit_transition_prior, PriorParams};
use crate::quotes::{compute_weights, Quote, QuoteSlice, WeightedSlice, DEFAULT_EPS_FLOOR, DEFAULT_LAMBDA};
use crate::solver::{sinkhorn_calibrate, ConvergenceTrace, SolverConfig};

/// Finitely supported law of the underlying at one maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMarginal {
    pub grid: Vec<f64>,
    pub mass: Vec<f64>,
    pub maturity: f64,
}

impl DiscreteMarginal {
    pub fn new(grid: Vec<f64>, mass: Vec<f64>, maturity: f64) -> Result<Self> {
        let m = Self { grid, mass, maturity };
        m.validate()?;
        Ok(m)
    }

    pub fn dirac(at: f64, maturity: f64) -> Self {
        Self { grid: vec![at], mass: vec![1.0], maturity }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.len() != self.mass.len() {
            return Err(Error::Discretization("grid and mass must be nonempty and of equal length".into()));
        }
        if !self.grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Discretization("grid must be strictly increasing".into()));
        }
        if self.mass.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Discretization("masses must be nonnegative".into()));
        }
        let total: f64 = self.mass.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Discretization(format!("masses sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.grid.iter().zip(&self.mass).map(|(x, p)| x * p).sum()
    }

    pub fn call(&self, strike: f64) -> f64 {
        self.grid.iter().zip(&self.mass).map(|(x, p)| p * (x - strike).max(0.0)).sum()
    }

    /// `P(S <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.grid.iter().zip(&self.mass).filter(|(g, _)| **g <= x).map(|(_, p)| p).sum()
    }
}

/// A law with enough closed-form structure to be discretized.
pub trait MarginalDensity {
    fn mean(&self) -> f64;
    fn std_dev(&self) -> f64;
    /// Mass below, above and inside each cell of the increasing `nodes`.
    fn cell_moments(&self, nodes: &[f64]) -> CellMoments;
    /// `(P(S > b), E[(S - b)+])`.
    fn upper_tail(&self, b: f64) -> (f64, f64);
    /// Density at `x`.
    fn pdf(&self, x: f64) -> f64;
}

/// Mixture over conditioning points of tilted Gaussian kernels: the law of
/// the next maturity implied by a calibrated slice.
#[derive(Debug, Clone)]
pub struct KernelMixture {
    pub points: Vec<f64>,
    pub mass: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub strikes: Vec<f64>,
    pub v: Vec<f64>,
    pub h: Vec<f64>,
    pub floor: Option<f64>,
    ln_iu: Vec<f64>,
    mean: f64,
    variance: f64,
}

impl KernelMixture {
    pub fn new(
        points: Vec<f64>,
        mass: Vec<f64>,
        sigmas: Vec<f64>,
        strikes: Vec<f64>,
        v: Vec<f64>,
        h: Vec<f64>,
        floor: Option<f64>,
    ) -> Self {
        let mut ln_iu = Vec::with_capacity(points.len());
        // per-point (mean, variance), combined in two passes to avoid cancellation
        let mut local = Vec::with_capacity(points.len());
        for i in 0..points.len() {
            let kern = GaussKernel::new(points[i], sigmas[i]).with_floor(floor);
            let (ln, m, s) = tilt_stats(&strikes, &v, h[i], &kern);
            ln_iu.push(ln);
            local.push((points[i] + m, (s - m * m).max(0.0)));
        }
        let mean: f64 = local.iter().zip(&mass).map(|((m, _), p)| p * m).sum();
        let variance = local.iter().zip(&mass).map(|((m, v), p)| p * (v + (m - mean).powi(2))).sum();
        Self { points, mass, sigmas, strikes, v, h, floor, ln_iu, mean, variance }
    }

    /// Plain normal law, handy as a reference density.
    pub fn gaussian(mean: f64, sd: f64) -> Self {
        Self::new(vec![mean], vec![1.0], vec![sd], vec![], vec![], vec![0.0], None)
    }

    pub fn from_problem(ctx: &SliceProblem, state: &DualState) -> Self {
        Self::new(
            ctx.grid.clone(),
            ctx.mass.clone(),
            ctx.sigmas.clone(),
            ctx.strikes.clone(),
            state.v.clone(),
            state.h.clone(),
            ctx.floor,
        )
    }

    fn kernel(&self, i: usize) -> GaussKernel {
        GaussKernel::new(self.points[i], self.sigmas[i]).with_floor(self.floor)
    }

    /// `E[(S - K)+]`.
    pub fn call(&self, strike: f64) -> f64 {
        (0..self.points.len())
            .map(|i| self.mass[i] * call_ratio(&self.strikes, &self.v, self.h[i], &self.kernel(i), strike))
            .sum()
    }
}

impl MarginalDensity for KernelMixture {
    fn mean(&self) -> f64 {
        self.mean
    }

    fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    fn cell_moments(&self, nodes: &[f64]) -> CellMoments {
        let mut out = CellMoments { cells: vec![(0.0, 0.0); nodes.len().saturating_sub(1)], ..Default::default() };
        for i in 0..self.points.len() {
            let c = cell_moments(&self.strikes, &self.v, self.h[i], &self.kernel(i), nodes);
            let p = self.mass[i];
            out.below += p * c.below;
            out.above += p * c.above;
            for (o, x) in out.cells.iter_mut().zip(&c.cells) {
                o.0 += p * x.0;
                o.1 += p * x.1;
            }
        }
        out
    }

    fn upper_tail(&self, b: f64) -> (f64, f64) {
        let mut prob = 0.0;
        let mut call = 0.0;
        for i in 0..self.points.len() {
            let (p, c) = upper_tail(&self.strikes, &self.v, self.h[i], &self.kernel(i), b);
            prob += self.mass[i] * p;
            call += self.mass[i] * c;
        }
        (prob, call)
    }

    fn pdf(&self, x: f64) -> f64 {
        (0..self.points.len())
            .map(|i| self.mass[i] * ln_density(&self.strikes, &self.v, self.h[i], &self.kernel(i), self.ln_iu[i], x).exp())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscretizeConfig {
    pub n: usize,
    /// Bound on the call-price error from the truncated upper tail, relative to the mean.
    pub tail_tol: f64,
    /// Half-width of the grid below the mean, in standard deviations.
    pub lower_sds: f64,
    /// Fixed `[a, b]`, overriding the automatic choice.
    pub range: Option<(f64, f64)>,
}

impl Default for DiscretizeConfig {
    fn default() -> Self {
        Self { n: 200, tail_tol: 1e-10, lower_sds: 6.0, range: None }
    }
}

/// A discretized law with the parameters that bound its error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub marginal: DiscreteMarginal,
    pub a: f64,
    pub b: f64,
    /// `E[(S - k_min)+; S > b]` of the continuous law.
    pub tail: f64,
    /// `(b - a) / n + tail`.
    pub error_bound: f64,
}

/// Discretizes `density` on a uniform grid.
///
/// Each cell's mass is split between its two end nodes so as to keep its
/// first moment: the result has the exact mean and dominates the continuous
/// law in convex order inside `[a, b]`. Mass outside `[a, b]` is lumped on
/// the end nodes and the mean is restored by a small exponential tilt.
pub fn discretize_marginal(
    density: &dyn MarginalDensity,
    k_min: Option<f64>,
    cfg: &DiscretizeConfig,
    maturity: f64,
) -> Result<Discretization> {
    if cfg.n < 2 {
        return Err(Error::Config(format!("grid needs at least 2 points, got {}", cfg.n)));
    }
    let center = density.mean();
    let width = density.std_dev();
    if !(width > 0.0 && center.is_finite()) {
        return Err(Error::Discretization(format!("degenerate density (mean {center}, sd {width})")));
    }
    let tail_tol = cfg.tail_tol * center.abs().max(width);
    let tail_at = |b: f64| {
        let (p, c) = density.upper_tail(b);
        let kmin = k_min.unwrap_or(center);
        c + (b - kmin).max(0.0) * p
    };
    let (a, b) = match cfg.range {
        Some(r) => r,
        None => {
            let mut a = center - cfg.lower_sds * width;
            if let Some(k) = k_min {
                a = a.min(k);
            }
            let a = a.max(0.0);
            let mut b = center + cfg.lower_sds * width;
            let mut guard = 0;
            while tail_at(b) > tail_tol && guard < 400 {
                b += 0.5 * width;
                guard += 1;
            }
            (a, b)
        }
    };
    if !(b > a) {
        return Err(Error::Discretization(format!("empty range [{a}, {b}]")));
    }
    let n = cfg.n;
    let step = (b - a) / (n - 1) as f64;
    let nodes: Vec<f64> = (0..n).map(|k| if k == n - 1 { b } else { a + k as f64 * step }).collect();
    let cm = density.cell_moments(&nodes);
    let mut mass = vec![0.0; n];
    mass[0] += cm.below;
    mass[n - 1] += cm.above;
    for (j, &(m, f)) in cm.cells.iter().enumerate() {
        let h = nodes[j + 1] - nodes[j];
        let right = (f / h).clamp(0.0, m);
        mass[j] += m - right;
        mass[j + 1] += right;
    }
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Discretization("density is numerically zero on the grid".into()));
    }
    mass.iter_mut().for_each(|m| *m /= total);
    restore_mean(&nodes, &mut mass, center);
    let tail = tail_at(b);
    let marginal = DiscreteMarginal { grid: nodes, mass, maturity };
    Ok(Discretization { marginal, a, b, tail, error_bound: (b - a) / n as f64 + tail })
}

/// Tilts `mass` by `exp(eta (x - target))` so the mean becomes `target`.
fn restore_mean(grid: &[f64], mass: &mut [f64], target: f64) {
    let lo = grid[0];
    let hi = grid[grid.len() - 1];
    if !(target > lo && target < hi) {
        return;
    }
    let scale = hi - lo;
    let mut eta = 0.0;
    for _ in 0..50 {
        let w: Vec<f64> = grid.iter().zip(mass.iter()).map(|(x, p)| p * (eta * (x - target) / scale).exp()).collect();
        let z: f64 = w.iter().sum();
        let m1: f64 = grid.iter().zip(&w).map(|(x, p)| p * (x - target) / scale).sum::<f64>() / z;
        if m1.abs() <= 1e-17 {
            break;
        }
        let m2: f64 = grid.iter().zip(&w).map(|(x, p)| p * ((x - target) / scale).powi(2)).sum::<f64>() / z;
        let var = m2 - m1 * m1;
        if !(var > 0.0) {
            break;
        }
        eta -= m1 / var;
    }
    let mut total = 0.0;
    for (x, p) in grid.iter().zip(mass.iter_mut()) {
        *p *= (eta * (x - target) / scale).exp();
        total += *p;
    }
    mass.iter_mut().for_each(|p| *p /= total);
}

/// Settings of a full calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub lambda: f64,
    pub eps_floor: f64,
    pub solver: SolverConfig,
    pub grid: DiscretizeConfig,
    pub truncate_at_zero: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            eps_floor: DEFAULT_EPS_FLOOR,
            solver: SolverConfig::default(),
            grid: DiscretizeConfig::default(),
            truncate_at_zero: false,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.eps_floor > 0.0) {
            return Err(Error::Config(format!("eps_floor must be > 0, got {}", self.eps_floor)));
        }
        if self.grid.n < 2 || !(self.grid.tail_tol > 0.0) {
            return Err(Error::Config("grid_n must be >= 2 and tail_tol > 0".into()));
        }
        self.solver.validate()
    }

    /// Weights for every slice under this configuration.
    pub fn weigh(&self, slices: &[QuoteSlice]) -> Result<Vec<WeightedSlice>> {
        slices
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.lambda = self.lambda;
                compute_weights(&s, self.eps_floor)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub final_g: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub lambda_hat: f64,
}

impl TraceSummary {
    fn of(trace: &ConvergenceTrace) -> Self {
        let last = trace.last();
        Self {
            final_g: last.map_or(f64::NAN, |r| r.g),
            grad_inf: last.map_or(f64::NAN, |r| r.grad_inf),
            iterations: trace.records.len(),
            lambda_hat: trace.lambda_hat,
        }
    }
}

/// One calibrated maturity: the transition from the previous marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSlice {
    pub maturity: f64,
    pub prev_maturity: f64,
    /// Conditioning law the transition starts from.
    pub conditioning: DiscreteMarginal,
    /// Discretized law at this maturity (conditioning law of the next slice).
    pub marginal: DiscreteMarginal,
    pub discretization_bound: f64,
    pub quotes: Vec<Quote>,
    pub dual: DualState,
    pub prior: PriorParams,
    pub truncate_at_zero: bool,
    pub trace: ConvergenceTrace,
    pub summary: TraceSummary,
}

impl CalibratedSlice {
    pub fn dt(&self) -> f64 {
        self.maturity - self.prev_maturity
    }

    pub fn strikes(&self) -> Vec<f64> {
        self.quotes.iter().map(|q| q.strike).collect()
    }

    /// The continuous law of this maturity.
    pub fn density(&self, spot: f64) -> KernelMixture {
        let dt = self.dt();
        let sigmas = self.conditioning.grid.iter().map(|&s| kernel_sigma(&self.prior, s, dt, spot)).collect();
        KernelMixture::new(
            self.conditioning.grid.clone(),
            self.conditioning.mass.clone(),
            sigmas,
            self.strikes(),
            self.dual.v.clone(),
            self.dual.h.clone(),
            self.truncate_at_zero.then_some(0.0),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSurface {
    pub spot: f64,
    pub slices: Vec<CalibratedSlice>,
    pub config: CalibrationConfig,
}

/// Calibrates slice after slice, each conditioned on the previous marginal.
pub fn calibrate_surface(slices: &[WeightedSlice], cfg: &CalibrationConfig) -> Result<CalibratedSurface> {
    cfg.validate()?;
    let Some(first) = slices.first() else {
        return Ok(CalibratedSurface { spot: f64::NAN, slices: vec![], config: cfg.clone() });
    };
    let spot = first.spot();
    for w in slices.windows(2) {
        if !(w[1].maturity() > w[0].maturity()) {
            return Err(Error::Validation("slices must have strictly increasing maturities".into()));
        }
    }
    if slices.iter().any(|s| s.spot() != spot) {
        return Err(Error::Validation("all slices must share the same spot".into()));
    }
    let mut prev = DiscreteMarginal::dirac(spot, 0.0);
    let mut out = Vec::with_capacity(slices.len());
    for (idx, ws) in slices.iter().enumerate() {
        let t = ws.maturity();
        let dt = t - prev.maturity;
        let prior = if idx == 0 { fit_first_prior(ws)? } else { fit_transition_prior(&prev, ws, dt)? };
        let mut ctx = SliceProblem::new(&prev, ws, &prior, dt, cfg.truncate_at_zero)?;
        if let Some(detail) = &ctx.uncertified {
            warn!("maturity {t}: non-degeneracy probe inconclusive: {detail}");
        }
        ctx.parallel = cfg.solver.parallel;
        let (state, trace) = sinkhorn_calibrate(&ctx, &cfg.solver)?;
        info!(
            "maturity {t}: converged in {} iterations (rate {:.3})",
            trace.records.len(),
            trace.lambda_hat
        );
        let density = KernelMixture::from_problem(&ctx, &state);
        let k_min = slices.get(idx + 1).and_then(|n| n.strikes().first().copied());
        let disc = discretize_marginal(&density, k_min, &cfg.grid, t)?;
        let conditioning = DiscreteMarginal { grid: ctx.grid.clone(), mass: ctx.mass.clone(), maturity: prev.maturity };
        out.push(CalibratedSlice {
            maturity: t,
            prev_maturity: prev.maturity,
            conditioning,
            marginal: disc.marginal.clone(),
            discretization_bound: disc.error_bound,
            quotes: ws.slice.quotes.clone(),
            dual: state,
            prior,
            truncate_at_zero: cfg.truncate_at_zero,
            summary: TraceSummary::of(&trace),
            trace,
        });
        prev = disc.marginal;
    }
    Ok(CalibratedSurface { spot, slices: out, config: cfg.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmilePoint {
    pub strike: f64,
    pub price: f64,
    pub implied_vol: Option<f64>,
}

/// Call prices and implied volatilities of slice `index` at `strikes`.
pub fn query_smile(surface: &CalibratedSurface, index: usize, strikes: &[f64]) -> Result<Vec<SmilePoint>> {
    let slice = surface.slices.get(index).ok_or_else(|| {
        Error::Config(format!("maturity index {index} out of range (surface has {} slices)", surface.slices.len()))
    })?;
    if let Some(k) = strikes.iter().find(|k| !(**k >= 0.0)) {
        return Err(Error::Domain(format!("strike must be >= 0, got {k}")));
    }
    let density = slice.density(surface.spot);
    Ok(strikes
        .iter()
        .map(|&k| {
            let price = density.call(k);
            let implied_vol = if k > 0.0 { implied_vol(surface.spot, k, slice.maturity, price).ok() } else { None };
            SmilePoint { strike: k, price, implied_vol }
        })
        .collect())
}

/// `maturity,strike,price,implied_vol` rows; an absent volatility is left empty.
pub fn smile_csv(maturity: f64, points: &[SmilePoint]) -> String {
    let mut out = String::from("maturity,strike,price,implied_vol\n");
    for p in points {
        let vol = p.implied_vol.map(|v| format!("{v:.12}")).unwrap_or_default();
        let _ = writeln!(out, "{maturity},{},{:.12},{vol}", p.strike, p.price);
    }
    out
}

// ---- persistence ----

const MAGIC: &[u8; 4] = b"VCSF";
const VERSION: u32 = 1;

struct Enc(Vec<u8>);

impl Enc {
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn bool(&mut self, x: bool) {
        self.0.push(x as u8);
    }
    fn vec(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn section(&mut self, tag: &[u8; 4], body: Enc) {
        self.0.extend_from_slice(tag);
        self.bytes(&body.0);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Format(format!("length {n} exceeds remaining data")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bool(&mut self) -> Result<bool> {
        Ok(self.take(1)?[0] != 0)
    }
    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n.checked_mul(8).map_or(true, |b| b > self.buf.len() - self.pos) {
            return Err(Error::Format("array length exceeds remaining data".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn section(&mut self, tag: &[u8; 4]) -> Result<Dec<'a>> {
        let got = self.take(4)?;
        if got != tag {
            return Err(Error::Format(format!(
                "expected section {}, found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(Dec { buf: self.bytes()?, pos: 0 })
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format("trailing bytes in section".into()));
        }
        Ok(())
    }
}

fn encode_marginal(e: &mut Enc, m: &DiscreteMarginal) {
    e.f64(m.maturity);
    e.vec(&m.grid);
    e.vec(&m.mass);
}

fn decode_marginal(d: &mut Dec) -> Result<DiscreteMarginal> {
    let maturity = d.f64()?;
    let grid = d.vec()?;
    let mass = d.vec()?;
    if grid.len() != mass.len() {
        return Err(Error::Format("marginal grid and mass lengths differ".into()));
    }
    Ok(DiscreteMarginal { grid, mass, maturity })
}

fn encode_slice(s: &CalibratedSlice) -> Enc {
    let mut e = Enc(Vec::new());
    e.f64(s.maturity);
    e.f64(s.prev_maturity);
    encode_marginal(&mut e, &s.conditioning);
    encode_marginal(&mut e, &s.marginal);
    e.f64(s.discretization_bound);
    e.u64(s.quotes.len() as u64);
    for q in &s.quotes {
        [q.maturity, q.strike, q.bid, q.ask].iter().for_each(|&x| e.f64(x));
    }
    e.vec(&s.dual.u);
    e.vec(&s.dual.h);
    e.vec(&s.dual.v);
    e.f64(s.prior.sigma0);
    e.f64(s.prior.beta);
    e.bool(s.truncate_at_zero);
    let t = &s.trace;
    e.f64(t.maturity);
    e.u64(t.records.len() as u64);
    for r in &t.records {
        e.u64(r.iter as u64);
        [r.g, r.grad_inf, r.marginal_err, r.mart_err, r.band_viol].iter().for_each(|&x| e.f64(x));
    }
    e.vec(&t.half_steps);
    e.f64(t.lambda_hat);
    e.bool(t.converged);
    let m = &s.summary;
    e.f64(m.final_g);
    e.f64(m.grad_inf);
    e.u64(m.iterations as u64);
    e.f64(m.lambda_hat);
    e
}

fn decode_slice(d: &mut Dec) -> Result<CalibratedSlice> {
    use crate::solver::IterRecord;
    let maturity = d.f64()?;
    let prev_maturity = d.f64()?;
    let conditioning = decode_marginal(d)?;
    let marginal = decode_marginal(d)?;
    let discretization_bound = d.f64()?;
    let nq = d.len()?;
    let mut quotes = Vec::with_capacity(nq.min(1 << 16));
    for _ in 0..nq {
        quotes.push(Quote { maturity: d.f64()?, strike: d.f64()?, bid: d.f64()?, ask: d.f64()? });
    }
    let dual = DualState { u: d.vec()?, h: d.vec()?, v: d.vec()? };
    let prior = PriorParams { sigma0: d.f64()?, beta: d.f64()? };
    let truncate_at_zero = d.bool()?;
    let tmat = d.f64()?;
    let nr = d.len()?;
    let mut records = Vec::with_capacity(nr.min(1 << 16));
    for _ in 0..nr {
        records.push(IterRecord {
            iter: d.u64()? as usize,
            g: d.f64()?,
            grad_inf: d.f64()?,
            marginal_err: d.f64()?,
            mart_err: d.f64()?,
            band_viol: d.f64()?,
        });
    }
    let half_steps = d.vec()?;
    let lambda_hat = d.f64()?;
    let converged = d.bool()?;
    let summary = TraceSummary { final_g: d.f64()?, grad_inf: d.f64()?, iterations: d.u64()? as usize, lambda_hat: d.f64()? };
    if dual.u.len() != conditioning.grid.len() || dual.h.len() != conditioning.grid.len() || dual.v.len() != quotes.len() {
        return Err(Error::Format("dual state dimensions do not match the slice".into()));
    }
    Ok(CalibratedSlice {
        maturity,
        prev_maturity,
        conditioning,
        marginal,
        discretization_bound,
        quotes,
        dual,
        prior,
        truncate_at_zero,
        trace: ConvergenceTrace { maturity: tmat, records, half_steps, lambda_hat, converged },
        summary,
    })
}

/// Binary encoding: magic, version, length-prefixed sections and a CRC32.
pub fn encode_surface(surface: &CalibratedSurface) -> Result<Vec<u8>> {
    let mut body = Enc(Vec::new());
    let mut head = Enc(Vec::new());
    head.f64(surface.spot);
    head.u64(surface.slices.len() as u64);
    head.bytes(&serde_json::to_vec(&surface.config)?);
    body.section(b"HEAD", head);
    for s in &surface.slices {
        body.section(b"SLCE", encode_slice(s));
    }
    let mut out = Vec::with_capacity(body.0.len() + 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&body.0);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_surface(bytes: &[u8]) -> Result<CalibratedSurface> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a surface file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version} (expected {VERSION})")));
    }
    let (payload, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(payload) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let mut d = Dec { buf: &payload[8..], pos: 0 };
    let mut head = d.section(b"HEAD")?;
    let spot = head.f64()?;
    let n = head.u64()? as usize;
    let config: CalibrationConfig = serde_json::from_slice(head.bytes()?)?;
    head.finish()?;
    let mut slices = Vec::with_capacity(n.min(1 << 12));
    for _ in 0..n {
        let mut sec = d.section(b"SLCE")?;
        slices.push(decode_slice(&mut sec)?);
        sec.finish()?;
    }
    d.finish()?;
    Ok(CalibratedSurface { spot, slices, config })
}

pub fn save_surface<W: Write>(surface: &CalibratedSurface, mut sink: W) -> Result<()> {
    sink.write_all(&encode_surface(surface)?)?;
    Ok(())
}

pub fn load_surface<R: Read>(mut source: R) -> Result<CalibratedSurface> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    decode_surface(&buf)
}

pub fn save_surface_json<W: Write>(surface: &CalibratedSurface, sink: W) -> Result<()> {
    serde_json::to_writer_pretty(sink, surface)?;
    Ok(())
}

pub fn load_surface_json<R: Read>(source: R) -> Result<CalibratedSurface> {
    Ok(serde_json::from_reader(source)?)
}

/// Reads either format, telling them apart by the magic bytes.
pub fn load_surface_any(bytes: &[u8]) -> Result<CalibratedSurface> {
    if bytes.starts_with(MAGIC) {
        decode_surface(bytes)
    } else {
        load_surface_json(bytes)
    }
}

/// Surface quotes regrouped as slices (for reporting).
pub fn surface_quote_slices(surface: &CalibratedSurface) -> Result<Vec<QuoteSlice>> {
    surface
        .slices
        .iter()
        .map(|s| QuoteSlice::new(s.maturity, surface.spot, s.quotes.clone(), surface.config.lambda))
        .collect()
}
