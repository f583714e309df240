//! Closed-form integrals of piecewise-exponential weights against a Gaussian
//! transition kernel.
//!
//! For a fixed conditioning point `s1` the calibrated density of `s2` is the
//! Gaussian `N(s1, sigma^2)` tilted by
//! `exp(-sum_K V_K (s2 - K)+ - theta (s2 - s1))`, an exponent that is affine
//! on every interval between consecutive strikes. Each interval contributes a
//! tilted, truncated Gaussian whose mass and first two moments are known in
//! closed form. All masses are carried as logarithms and the moments are
//! measured from a band edge, so the sums below stay finite and accurate even
//! when the tilt pushes the bulk of the mass dozens of standard deviations away.

use crate::special::{std_band, Anchor, LN_SQRT_2PI};

/// Gaussian transition kernel `N(center, sigma^2)`, optionally supported on
/// `[floor, +inf)` only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussKernel {
    pub center: f64,
    pub sigma: f64,
    pub floor: Option<f64>,
}

impl GaussKernel {
    pub fn new(center: f64, sigma: f64) -> Self {
        assert!(sigma > 0.0 && sigma.is_finite(), "kernel sigma must be positive, got {sigma}");
        Self { center, sigma, floor: None }
    }

    pub fn with_floor(mut self, floor: Option<f64>) -> Self {
        self.floor = floor;
        self
    }
}

/// A real number stored as `mantissa * exp(log_scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaled {
    pub mantissa: f64,
    pub log_scale: f64,
}

impl Scaled {
    pub fn zero() -> Self {
        Self { mantissa: 0.0, log_scale: 0.0 }
    }

    pub fn value(&self) -> f64 {
        if self.mantissa == 0.0 {
            0.0
        } else {
            self.mantissa * self.log_scale.exp()
        }
    }

    /// Value expressed relative to `exp(reference)`.
    pub fn relative_to(&self, reference: f64) -> f64 {
        if self.mantissa == 0.0 {
            0.0
        } else {
            self.mantissa * (self.log_scale - reference).exp()
        }
    }
}

/// One interval of the tilted kernel, in offsets `x = s2 - center`.
///
/// `log_w` is the log of the band's (unnormalized) mass. `m1`, `m2` are the
/// conditional moments of the distance `dir * (x - origin) >= 0`.
#[derive(Debug, Clone, Copy)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
    pub log_w: f64,
    pub origin: f64,
    pub dir: f64,
    pub m1: f64,
    pub m2: f64,
}

impl Band {
    /// `int_lo^hi exp(alpha x + gamma) N(0, sigma^2)(dx)` with its moments.
    pub fn tilted(sigma: f64, alpha: f64, gamma: f64, lo: f64, hi: f64) -> Band {
        let shift = alpha * sigma;
        let za = if lo.is_finite() { lo / sigma - shift } else { lo };
        let zb = if hi.is_finite() { hi / sigma - shift } else { hi };
        let sb = std_band(za, zb);
        let edge_log = |e: f64| gamma + alpha * e - 0.5 * (e / sigma) * (e / sigma) - LN_SQRT_2PI;
        match sb.anchor {
            Anchor::Lower => Band {
                lo,
                hi,
                log_w: edge_log(lo) + sb.ln_j,
                origin: lo,
                dir: 1.0,
                m1: sigma * sb.d1,
                m2: sigma * sigma * sb.d2,
            },
            Anchor::Upper => {
                let log_w = edge_log(hi) + sb.ln_j;
                let (u1, u2) = (sigma * sb.d1, sigma * sigma * sb.d2);
                if lo.is_finite() {
                    let width = hi - lo;
                    Band {
                        lo,
                        hi,
                        log_w,
                        origin: lo,
                        dir: 1.0,
                        m1: width - u1,
                        m2: width * width - 2.0 * width * u1 + u2,
                    }
                } else {
                    Band { lo, hi, log_w, origin: hi, dir: -1.0, m1: u1, m2: u2 }
                }
            }
            Anchor::Free => {
                let mu = alpha * sigma * sigma;
                Band {
                    lo,
                    hi,
                    log_w: gamma + 0.5 * shift * shift,
                    origin: 0.0,
                    dir: 1.0,
                    m1: mu,
                    m2: mu * mu + sigma * sigma,
                }
            }
        }
    }

    /// Conditional `E[x - p]` on the band.
    pub fn linear(&self, p: f64) -> f64 {
        (self.origin - p) + self.dir * self.m1
    }

    /// Conditional `E[(x - p)(x - q)]` on the band. Nonnegative terms only
    /// when `p, q <= origin` and the band is lower-anchored.
    pub fn quadratic(&self, p: f64, q: f64) -> f64 {
        let dp = self.origin - p;
        let dq = self.origin - q;
        dp * dq + self.dir * self.m1 * (dp + dq) + self.m2
    }
}

fn log_sum(bands: &[Band]) -> f64 {
    let max = bands.iter().map(|b| b.log_w).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + bands.iter().map(|b| (b.log_w - max).exp()).sum::<f64>().ln()
}

/// Builds bands from breakpoint offsets and per-interval affine exponents
/// `alphas[j] * x + gammas[j]` (`alphas.len() == breaks.len() + 1`).
/// `floor` drops mass below an offset; `split` adds an extra breakpoint.
pub fn build_bands(
    breaks: &[f64],
    alphas: &[f64],
    gammas: &[f64],
    sigma: f64,
    floor: Option<f64>,
    split: Option<f64>,
) -> Vec<Band> {
    debug_assert_eq!(alphas.len(), breaks.len() + 1);
    let mut out = Vec::with_capacity(breaks.len() + 2);
    let lower = floor.unwrap_or(f64::NEG_INFINITY);
    for j in 0..alphas.len() {
        let mut lo = if j == 0 { f64::NEG_INFINITY } else { breaks[j - 1] };
        let hi = if j == breaks.len() { f64::INFINITY } else { breaks[j] };
        lo = lo.max(lower);
        if lo >= hi {
            continue;
        }
        match split {
            Some(q) if q > lo && q < hi => {
                out.push(Band::tilted(sigma, alphas[j], gammas[j], lo, q));
                out.push(Band::tilted(sigma, alphas[j], gammas[j], q, hi));
            }
            _ => out.push(Band::tilted(sigma, alphas[j], gammas[j], lo, hi)),
        }
    }
    out
}

/// The piecewise-affine exponent `-sum_K V_K (s2 - K)+ - theta (s2 - s1)`.
///
/// On interval `j` (between `breakpoints[j-1]` and `breakpoints[j]`, with
/// `-inf`/`+inf` at the ends) the exponent is `slopes[j] * s2 + intercepts[j] - shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePayoffExponent {
    pub breakpoints: Vec<f64>,
    pub slopes: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub shift: f64,
}

impl PiecewisePayoffExponent {
    pub fn new(strikes: &[f64], v: &[f64], theta: f64, s1: f64) -> Self {
        assert_eq!(strikes.len(), v.len());
        debug_assert!(strikes.windows(2).all(|w| w[0] < w[1]), "strikes must increase");
        let mut slopes = Vec::with_capacity(strikes.len() + 1);
        let mut intercepts = Vec::with_capacity(strikes.len() + 1);
        let (mut a, mut c) = (-theta, theta * s1);
        slopes.push(a);
        intercepts.push(c);
        for (&k, &vk) in strikes.iter().zip(v) {
            a -= vk;
            c += vk * k;
            slopes.push(a);
            intercepts.push(c);
        }
        Self { breakpoints: strikes.to_vec(), slopes, intercepts, shift: 0.0 }
    }

    /// Adds `c` to every intercept and records it in `shift`; the represented
    /// function is unchanged.
    pub fn stabilize(&mut self, c: f64) {
        for ic in &mut self.intercepts {
            *ic += c;
        }
        self.shift += c;
    }

    pub fn eval(&self, s2: f64) -> f64 {
        let j = self.breakpoints.partition_point(|&k| k <= s2);
        self.slopes[j] * s2 + self.intercepts[j] - self.shift
    }

    pub fn bands(&self, kern: &GaussKernel, split: Option<f64>) -> Vec<Band> {
        let s1 = kern.center;
        let breaks: Vec<f64> = self.breakpoints.iter().map(|k| k - s1).collect();
        let gammas: Vec<f64> = self
            .slopes
            .iter()
            .zip(&self.intercepts)
            .map(|(a, c)| a * s1 + c - self.shift)
            .collect();
        build_bands(
            &breaks,
            &self.slopes,
            &gammas,
            kern.sigma,
            kern.floor.map(|f| f - s1),
            split.map(|q| q - s1),
        )
    }
}

fn single_band(kern: &GaussKernel, alpha: f64, gamma: f64, k1: f64, k2: f64) -> Option<Band> {
    let s1 = kern.center;
    let mut lo = k1 - s1;
    if let Some(f) = kern.floor {
        lo = lo.max(f - s1);
    }
    let hi = k2 - s1;
    (lo < hi).then(|| Band::tilted(kern.sigma, alpha, gamma, lo, hi))
}

/// `int_{k1}^{k2} exp(alpha s2) N(s1, sigma^2)(ds2)`.
pub fn band_moment_const(kern: &GaussKernel, alpha: f64, k1: f64, k2: f64) -> Scaled {
    match single_band(kern, alpha, alpha * kern.center, k1, k2) {
        Some(b) => Scaled { mantissa: 1.0, log_scale: b.log_w },
        None => Scaled::zero(),
    }
}

/// `int_{k1}^{k2} exp(alpha s2) (s2 - pivot) N(s1, sigma^2)(ds2)`.
pub fn band_moment_linear(kern: &GaussKernel, alpha: f64, k1: f64, k2: f64, pivot: f64) -> Scaled {
    match single_band(kern, alpha, alpha * kern.center, k1, k2) {
        Some(b) => Scaled { mantissa: b.linear(pivot - kern.center), log_scale: b.log_w },
        None => Scaled::zero(),
    }
}

/// `int_{k1}^{k2} exp(alpha (s2 - s1)) (s2 - k)(s2 - q) N(s1, sigma^2)(ds2)`.
pub fn band_moment_quad(kern: &GaussKernel, alpha: f64, k1: f64, k2: f64, k: f64, q: f64) -> Scaled {
    match single_band(kern, alpha, 0.0, k1, k2) {
        Some(b) => Scaled {
            mantissa: b.quadratic(k - kern.center, q - kern.center),
            log_scale: b.log_w,
        },
        None => Scaled::zero(),
    }
}

/// `I_u`: total mass of the tilted kernel.
pub fn moment_iu(exp: &PiecewisePayoffExponent, kern: &GaussKernel) -> Scaled {
    let bands = exp.bands(kern, None);
    Scaled { mantissa: 1.0, log_scale: log_sum(&bands) }
}

/// `I_h`: first moment of `s2 - s1` under the tilted kernel.
pub fn moment_ih(exp: &PiecewisePayoffExponent, kern: &GaussKernel) -> Scaled {
    let bands = exp.bands(kern, None);
    let ln = log_sum(&bands);
    let m = bands.iter().map(|b| (b.log_w - ln).exp() * b.linear(0.0)).sum();
    Scaled { mantissa: m, log_scale: ln }
}

/// `I_Q`: call payoff `(s2 - Q)+` under the tilted kernel.
pub fn moment_iq(exp: &PiecewisePayoffExponent, kern: &GaussKernel, q: f64) -> Scaled {
    let bands = exp.bands(kern, Some(q));
    let ln = log_sum(&bands);
    let qo = q - kern.center;
    let m = bands
        .iter()
        .filter(|b| b.lo >= qo)
        .map(|b| (b.log_w - ln).exp() * b.linear(qo))
        .sum();
    Scaled { mantissa: m, log_scale: ln }
}

/// `(s2 - K)+ (s2 - Q)+` under the tilted kernel (the Hessian moment).
pub fn moment_hessian(exp: &PiecewisePayoffExponent, kern: &GaussKernel, k: f64, q: f64) -> Scaled {
    let top = k.max(q);
    let bands = exp.bands(kern, Some(top));
    let ln = log_sum(&bands);
    let (ko, qo, to) = (k - kern.center, q - kern.center, top - kern.center);
    let m = bands
        .iter()
        .filter(|b| b.lo >= to)
        .map(|b| (b.log_w - ln).exp() * b.quadratic(ko, qo))
        .sum();
    Scaled { mantissa: m, log_scale: ln }
}

/// Everything the dual needs at one conditioning point, normalized by `I_u`.
#[derive(Debug, Clone)]
pub struct PointMoments {
    /// ln I_u
    pub ln_iu: f64,
    /// I_h / I_u: conditional mean of `s2 - s1`.
    pub mean: f64,
    /// E[(s2 - s1)^2] / I_u.
    pub second: f64,
    /// I_K / I_u for each strike.
    pub calls: Vec<f64>,
    /// Row-major `E[(s2-K)+(s2-Q)+] / I_u`, when requested.
    pub hessian: Option<Vec<f64>>,
}

/// Slopes and offset intercepts for `-sum V_K (x - k)+ - theta x`, `k = K - s1`.
pub fn offset_exponent(offsets: &[f64], v: &[f64], theta: f64) -> (Vec<f64>, Vec<f64>) {
    let mut alphas = Vec::with_capacity(offsets.len() + 1);
    let mut gammas = Vec::with_capacity(offsets.len() + 1);
    let (mut a, mut g) = (-theta, 0.0);
    alphas.push(a);
    gammas.push(g);
    for (&k, &vk) in offsets.iter().zip(v) {
        a -= vk;
        g += vk * k;
        alphas.push(a);
        gammas.push(g);
    }
    (alphas, gammas)
}

/// Bands of the tilted kernel at `s1` for strike multipliers `v` and martingale multiplier `theta`.
pub fn point_bands(strikes: &[f64], v: &[f64], theta: f64, kern: &GaussKernel) -> (Vec<f64>, Vec<Band>) {
    let offsets: Vec<f64> = strikes.iter().map(|k| k - kern.center).collect();
    let (alphas, gammas) = offset_exponent(&offsets, v, theta);
    let bands = build_bands(&offsets, &alphas, &gammas, kern.sigma, kern.floor.map(|f| f - kern.center), None);
    (offsets, bands)
}

/// Mass, mean and second moment only; used by the martingale root-finder.
pub fn tilt_stats(strikes: &[f64], v: &[f64], theta: f64, kern: &GaussKernel) -> (f64, f64, f64) {
    let (_, bands) = point_bands(strikes, v, theta, kern);
    let ln = log_sum(&bands);
    let mut mean = 0.0;
    let mut second = 0.0;
    for b in &bands {
        let w = (b.log_w - ln).exp();
        mean += w * b.linear(0.0);
        second += w * b.quadratic(0.0, 0.0);
    }
    (ln, mean, second)
}

impl PointMoments {
    pub fn evaluate(strikes: &[f64], v: &[f64], theta: f64, kern: &GaussKernel, with_hessian: bool) -> Self {
        let (offsets, bands) = point_bands(strikes, v, theta, kern);
        let ln = log_sum(&bands);
        let weights: Vec<f64> = bands.iter().map(|b| (b.log_w - ln).exp()).collect();
        let mut mean = 0.0;
        let mut second = 0.0;
        for (b, w) in bands.iter().zip(&weights) {
            mean += w * b.linear(0.0);
            second += w * b.quadratic(0.0, 0.0);
        }
        let calls = offsets
            .iter()
            .map(|&k| {
                bands
                    .iter()
                    .zip(&weights)
                    .filter(|(b, _)| b.lo >= k)
                    .map(|(b, w)| w * b.linear(k))
                    .sum()
            })
            .collect();
        let hessian = with_hessian.then(|| {
            let n = offsets.len();
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let top = offsets[j];
                    let val: f64 = bands
                        .iter()
                        .zip(&weights)
                        .filter(|(b, _)| b.lo >= top)
                        .map(|(b, w)| w * b.quadratic(offsets[i], offsets[j]))
                        .sum();
                    h[i * n + j] = val;
                    h[j * n + i] = val;
                }
            }
            h
        });
        PointMoments { ln_iu: ln, mean, second, calls, hessian }
    }
}

/// `E[(s2 - K)+] / I_u` for an arbitrary strike, splitting the band that contains it.
pub fn call_ratio(strikes: &[f64], v: &[f64], theta: f64, kern: &GaussKernel, strike: f64) -> f64 {
    let offsets: Vec<f64> = strikes.iter().map(|k| k - kern.center).collect();
    let (alphas, gammas) = offset_exponent(&offsets, v, theta);
    let ko = strike - kern.center;
    let bands = build_bands(
        &offsets,
        &alphas,
        &gammas,
        kern.sigma,
        kern.floor.map(|f| f - kern.center),
        Some(ko),
    );
    let ln = log_sum(&bands);
    bands
        .iter()
        .filter(|b| b.lo >= ko)
        .map(|b| (b.log_w - ln).exp() * b.linear(ko))
        .sum()
}

/// `(P(s2 > b), E[(s2 - b)+])` under the normalized tilted kernel.
pub fn upper_tail(strikes: &[f64], v: &[f64], theta: f64, kern: &GaussKernel, b: f64) -> (f64, f64) {
    let offsets: Vec<f64> = strikes.iter().map(|k| k - kern.center).collect();
    let (alphas, gammas) = offset_exponent(&offsets, v, theta);
    let bo = b - kern.center;
    let bands = build_bands(&offsets, &alphas, &gammas, kern.sigma, kern.floor.map(|f| f - kern.center), Some(bo));
    let ln = log_sum(&bands);
    let mut prob = 0.0;
    let mut call = 0.0;
    for band in bands.iter().filter(|band| band.lo >= bo) {
        let w = (band.log_w - ln).exp();
        prob += w;
        call += w * band.linear(bo);
    }
    (prob, call)
}

/// Mass of the normalized tilted kernel split by the increasing `nodes`.
#[derive(Debug, Clone, Default)]
pub struct CellMoments {
    /// Mass below the first node.
    pub below: f64,
    /// Mass above the last node.
    pub above: f64,
    /// Per cell `[nodes[j], nodes[j+1]]`: mass and `E[(s2 - nodes[j]); cell]`.
    pub cells: Vec<(f64, f64)>,
}

pub fn cell_moments(strikes: &[f64], v: &[f64], theta: f64, kern: &GaussKernel, nodes: &[f64]) -> CellMoments {
    let s1 = kern.center;
    // strikes keep their multipliers, nodes enter with zero weight
    let mut breaks: Vec<(f64, f64)> = strikes.iter().zip(v).map(|(&k, &vk)| (k - s1, vk)).collect();
    breaks.extend(nodes.iter().map(|&x| (x - s1, 0.0)));
    breaks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let offsets: Vec<f64> = breaks.iter().map(|b| b.0).collect();
    let weights: Vec<f64> = breaks.iter().map(|b| b.1).collect();
    let (alphas, gammas) = offset_exponent(&offsets, &weights, theta);
    let bands = build_bands(&offsets, &alphas, &gammas, kern.sigma, kern.floor.map(|f| f - s1), None);
    let ln = log_sum(&bands);
    let mut out = CellMoments { cells: vec![(0.0, 0.0); nodes.len().saturating_sub(1)], ..Default::default() };
    for b in &bands {
        let w = (b.log_w - ln).exp();
        if w == 0.0 {
            continue;
        }
        let lo = b.lo + s1;
        if nodes.is_empty() || b.hi + s1 <= nodes[0] {
            out.below += w;
        } else if lo >= nodes[nodes.len() - 1] {
            out.above += w;
        } else {
            let j = nodes.partition_point(|&x| x <= lo).saturating_sub(1).min(nodes.len() - 2);
            let c = &mut out.cells[j];
            c.0 += w;
            c.1 += w * b.linear(nodes[j] - s1).max(0.0);
        }
    }
    out
}

/// Log-density of the normalized tilted kernel at `s2`.
pub fn ln_density(strikes: &[f64], v: &[f64], theta: f64, kern: &GaussKernel, ln_iu: f64, s2: f64) -> f64 {
    if let Some(f) = kern.floor {
        if s2 < f {
            return f64::NEG_INFINITY;
        }
    }
    let x = s2 - kern.center;
    let mut e = -theta * x;
    for (&k, &vk) in strikes.iter().zip(v) {
        if s2 > k {
            e -= vk * (s2 - k);
        }
    }
    let z = x / kern.sigma;
    e - 0.5 * z * z - LN_SQRT_2PI - kern.sigma.ln() - ln_iu
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_and_symmetry() {
        let k = GaussKernel::new(100.0, 10.0);
        assert!((band_moment_const(&k, 0.0, 100.0, f64::INFINITY).value() - 0.5).abs() < 1e-15);
        assert!((band_moment_const(&k, 0.0, f64::NEG_INFINITY, f64::INFINITY).value() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn linear_identities() {
        let k = GaussKernel::new(100.0, 10.0);
        let c = band_moment_linear(&k, 0.0, f64::NEG_INFINITY, f64::INFINITY, 100.0).value();
        assert!(c.abs() < 1e-13);
        let d = band_moment_linear(&k, 0.0, f64::NEG_INFINITY, f64::INFINITY, 90.0).value();
        assert!((d - 10.0).abs() < 1e-12);
    }

    #[test]
    fn quad_identities() {
        let k = GaussKernel::new(100.0, 7.0);
        let v = band_moment_quad(&k, 0.0, f64::NEG_INFINITY, f64::INFINITY, 100.0, 100.0).value();
        assert!((v - 49.0).abs() < 1e-12);
        let w = band_moment_quad(&k, 0.0, f64::NEG_INFINITY, f64::INFINITY, 93.0, 93.0).value();
        assert!((w - (49.0 + 49.0)).abs() < 1e-12);
    }

    #[test]
    fn iu_plain_and_mgf() {
        let kern = GaussKernel::new(100.0, 10.0);
        let e = PiecewisePayoffExponent::new(&[90.0, 110.0], &[0.0, 0.0], 0.0, 100.0);
        assert!((moment_iu(&e, &kern).value() - 1.0).abs() < 1e-14);
        let theta = 0.03;
        let e = PiecewisePayoffExponent::new(&[90.0, 110.0], &[0.0, 0.0], theta, 100.0);
        let expect = (0.5f64 * theta * theta * 100.0).exp();
        assert!((moment_iu(&e, &kern).value() - expect).abs() < 1e-14 * expect);
    }

    #[test]
    fn ih_signs() {
        let kern = GaussKernel::new(100.0, 10.0);
        let e = PiecewisePayoffExponent::new(&[105.0], &[0.0], 0.0, 100.0);
        assert!(moment_ih(&e, &kern).value().abs() < 1e-14);
        let e = PiecewisePayoffExponent::new(&[105.0], &[0.0], 0.05, 100.0);
        assert!(moment_ih(&e, &kern).value() < 0.0);
    }

    #[test]
    fn iq_reduces_to_bachelier() {
        let dt = 0.5;
        let sig = 12.0;
        let kern = GaussKernel::new(100.0, sig * f64::sqrt(dt));
        let e = PiecewisePayoffExponent::new(&[95.0, 104.0], &[0.0, 0.0], 0.0, 100.0);
        for &q in &[80.0, 95.0, 100.0, 101.5, 130.0] {
            let got = moment_iq(&e, &kern, q).value();
            let b = crate::pricing::bachelier(100.0, dt, q, sig);
            assert!((got - b).abs() < 1e-12 * b.max(1e-3), "Q={q}: {got} vs {b}");
        }
        assert_eq!(moment_iq(&e, &kern, 1e9).value(), 0.0);
    }

    #[test]
    fn hessian_vanishes_far_out() {
        let kern = GaussKernel::new(100.0, 5.0);
        let e = PiecewisePayoffExponent::new(&[100.0], &[0.01], 0.0, 100.0);
        assert!(moment_hessian(&e, &kern, 100.0, 1e8).value().abs() < 1e-300);
    }

    #[test]
    fn exponent_continuity_and_monotone_slopes() {
        let strikes = [80.0, 95.0, 100.0, 120.0];
        let v = [0.1, 0.02, 0.3, 0.05];
        let e = PiecewisePayoffExponent::new(&strikes, &v, 0.04, 101.0);
        for (j, &k) in strikes.iter().enumerate() {
            let left = e.slopes[j] * k + e.intercepts[j];
            let right = e.slopes[j + 1] * k + e.intercepts[j + 1];
            assert!((left - right).abs() < 1e-12);
        }
        assert!(e.slopes.windows(2).all(|w| w[1] <= w[0]));
        let direct = |s2: f64| -> f64 {
            -strikes.iter().zip(&v).map(|(k, vk)| vk * (s2 - k).max(0.0)).sum::<f64>() - 0.04 * (s2 - 101.0)
        };
        for &s2 in &[50.0, 85.0, 99.0, 110.0, 200.0] {
            assert!((e.eval(s2) - direct(s2)).abs() < 1e-12);
        }
    }

    #[test]
    fn stabilization_invariance() {
        let kern = GaussKernel::new(100.0, 15.0);
        let mut e = PiecewisePayoffExponent::new(&[90.0, 110.0], &[0.2, -0.1], 0.05, 100.0);
        let before = [moment_iu(&e, &kern).value(), moment_ih(&e, &kern).value(), moment_iq(&e, &kern, 105.0).value()];
        e.stabilize(37.5);
        let after = [moment_iu(&e, &kern).value(), moment_ih(&e, &kern).value(), moment_iq(&e, &kern, 105.0).value()];
        for (b, a) in before.iter().zip(&after) {
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} {b}");
        }
    }

    #[test]
    fn floor_removes_mass_below() {
        let kern = GaussKernel::new(1.0, 1.0).with_floor(Some(0.0));
        let e = PiecewisePayoffExponent::new(&[], &[], 0.0, 1.0);
        let m = moment_iu(&e, &kern).value();
        let expect = crate::special::norm_cdf(1.0);
        assert!((m - expect).abs() < 1e-15);
    }
}
