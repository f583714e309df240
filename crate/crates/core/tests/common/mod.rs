#![allow(dead_code)]

use rand::Rng;
use volcal_core::special::{norm_cdf, norm_pdf};
use volcal_core::*;

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

struct Panel {
    a: f64,
    b: f64,
    value: Vec<f64>,
    abs: Vec<f64>,
    err: Vec<f64>,
}

fn gk15<F: Fn(f64, &mut [f64])>(f: &F, a: f64, b: f64, dim: usize) -> Panel {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kron = vec![0.0; dim];
    let mut gauss = vec![0.0; dim];
    let mut abs = vec![0.0; dim];
    let mut buf = vec![0.0; dim];
    let mut add = |x: f64, wk: f64, wg: f64, buf: &mut Vec<f64>| {
        buf.iter_mut().for_each(|v| *v = 0.0);
        f(x, buf);
        for d in 0..dim {
            kron[d] += wk * buf[d];
            gauss[d] += wg * buf[d];
            abs[d] += wk * buf[d].abs();
        }
    };
    add(c, WGK[7], WG[3], &mut buf);
    for j in 0..7 {
        let wg = if j % 2 == 1 { WG[j / 2] } else { 0.0 };
        add(c - h * XGK[j], WGK[j], wg, &mut buf);
        add(c + h * XGK[j], WGK[j], wg, &mut buf);
    }
    let value: Vec<f64> = kron.iter().map(|v| v * h).collect();
    let err = kron.iter().zip(&gauss).map(|(k, g)| ((k - g) * h).abs()).collect();
    Panel { a, b, value, abs: abs.iter().map(|v| v * h.abs()).collect(), err }
}

/// Globally adaptive Gauss-Kronrod 7/15 over a finite interval for a
/// vector-valued integrand. Returns `(integral, integral of |f|)` per
/// component; stops once every component's error estimate is below
/// `rel_tol` times its absolute integral.
pub fn integrate<F: Fn(f64, &mut [f64])>(f: F, a: f64, b: f64, dim: usize, rel_tol: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(a.is_finite() && b.is_finite());
    if !(b > a) {
        return (vec![0.0; dim], vec![0.0; dim]);
    }
    let mut panels = vec![gk15(&f, a, b, dim)];
    let mut abs_tot = panels[0].abs.clone();
    let mut err_tot = panels[0].err.clone();
    for _ in 0..4000 {
        let worst = (0..dim)
            .map(|d| err_tot[d] / (rel_tol * abs_tot[d]).max(1e-300))
            .fold(0.0, f64::max);
        if worst <= 1.0 {
            break;
        }
        let (idx, _) = panels
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s = (0..dim).map(|d| p.err[d] / abs_tot[d].max(1e-300)).fold(0.0, f64::max);
                (i, s)
            })
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        let p = panels.swap_remove(idx);
        let m = 0.5 * (p.a + p.b);
        if !(m > p.a && m < p.b) {
            panels.push(p);
            break;
        }
        let (l, r) = (gk15(&f, p.a, m, dim), gk15(&f, m, p.b, dim));
        for d in 0..dim {
            abs_tot[d] += l.abs[d] + r.abs[d] - p.abs[d];
            err_tot[d] += l.err[d] + r.err[d] - p.err[d];
        }
        panels.push(l);
        panels.push(r);
    }
    let value = (0..dim).map(|d| panels.iter().map(|p| p.value[d]).sum()).collect();
    let abs = (0..dim).map(|d| panels.iter().map(|p| p.abs[d]).sum()).collect();
    (value, abs)
}

pub fn scalar<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> (f64, f64) {
    let (v, a) = integrate(|x, out: &mut [f64]| out[0] = f(x), a, b, 1, rel_tol);
    (v[0], a[0])
}

/// Quadrature reference for one conditioning point, normalized by `I_u`.
/// Each `*_abs` entry is the integral of the absolute integrand (also over `I_u`).
#[derive(Debug, Clone)]
pub struct OracleMoments {
    pub ln_iu: f64,
    pub mean: f64,
    pub mean_abs: f64,
    pub second: f64,
    pub calls: Vec<f64>,
    pub hessian: Vec<f64>,
}

/// Integrates `exp(-sum V (x-K)+ - theta (x-s1))` against `N(s1, sigma^2)`
/// band by band, in the log domain.
pub fn oracle_point(strikes: &[f64], v: &[f64], theta: f64, s1: f64, sigma: f64) -> OracleMoments {
    let k = strikes.len();
    let ln_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let log_f = |x: f64| {
        let mut e = -theta * (x - s1) - 0.5 * ((x - s1) / sigma).powi(2) + ln_norm;
        for (kk, vk) in strikes.iter().zip(v) {
            e -= vk * (x - kk).max(0.0);
        }
        e
    };
    let mut edges = vec![f64::NEG_INFINITY];
    edges.extend_from_slice(strikes);
    edges.push(f64::INFINITY);
    // peak of each band's quadratic exponent
    let mut slope = -theta;
    let mut bands = Vec::new();
    for j in 0..=k {
        if j > 0 {
            slope -= v[j - 1];
        }
        // the band integrand is below e^-98 of its largest value beyond 14 sd of it
        let peak = s1 + slope * sigma * sigma;
        let at = peak.clamp(edges[j].max(-1e300), edges[j + 1].min(1e300));
        let lo = edges[j].max(at - 14.0 * sigma);
        let hi = edges[j + 1].min(at + 14.0 * sigma);
        bands.push((lo, hi, log_f(at)));
    }
    let shift = bands.iter().map(|b| b.2).fold(f64::NEG_INFINITY, f64::max);
    let dim = 3 + k + k * k;
    let mut tot = vec![0.0; dim];
    let mut tot_abs = vec![0.0; dim];
    for &(lo, hi, _) in &bands {
        if !(hi > lo) {
            continue;
        }
        let (val, abs) = integrate(
            |x, out: &mut [f64]| {
                let w = (log_f(x) - shift).exp();
                let y = x - s1;
                out[0] = w;
                out[1] = w * y;
                out[2] = w * y * y;
                for p in 0..k {
                    let cp = (x - strikes[p]).max(0.0);
                    out[3 + p] = w * cp;
                    for q in 0..k {
                        out[3 + k + p * k + q] = w * cp * (x - strikes[q]).max(0.0);
                    }
                }
            },
            lo,
            hi,
            dim,
            1e-14,
        );
        for d in 0..dim {
            tot[d] += val[d];
            tot_abs[d] += abs[d];
        }
    }
    let iu = tot[0];
    OracleMoments {
        ln_iu: shift + iu.ln(),
        mean: tot[1] / iu,
        mean_abs: tot_abs[1] / iu,
        second: tot[2] / iu,
        calls: tot[3..3 + k].iter().map(|c| c / iu).collect(),
        hessian: tot[3 + k..].iter().map(|c| c / iu).collect(),
    }
}

/// Error of `got` against `want`, relative to `scale` (defaults to `|want|`).
pub fn rel_err(got: f64, want: f64, scale: f64) -> f64 {
    let s = scale.max(want.abs());
    if s == 0.0 {
        got.abs()
    } else {
        (got - want).abs() / s
    }
}

/// Risk-neutral binomial-tree call prices (Cox-Ross-Rubinstein, zero rates).
pub fn tree_prices(s0: f64, sigma: f64, t: f64, steps: usize, strikes: &[f64]) -> Vec<f64> {
    let dt = t / steps as f64;
    let u = (sigma * dt.sqrt()).exp();
    let d = 1.0 / u;
    let p = (1.0 - d) / (u - d);
    let mut probs = vec![1.0f64];
    for _ in 0..steps {
        let mut next = vec![0.0; probs.len() + 1];
        for (i, q) in probs.iter().enumerate() {
            next[i] += q * (1.0 - p);
            next[i + 1] += q * p;
        }
        probs = next;
    }
    strikes
        .iter()
        .map(|&k| {
            probs
                .iter()
                .enumerate()
                .map(|(i, q)| q * (s0 * u.powi(i as i32) * d.powi((steps - i) as i32) - k).max(0.0))
                .sum()
        })
        .collect()
}

/// `E[(X - K)+]` for a Gaussian mixture given as `(weight, mean, sd)`.
pub fn mixture_call(parts: &[(f64, f64, f64)], k: f64) -> f64 {
    parts
        .iter()
        .map(|&(w, m, s)| {
            let d = (m - k) / s;
            w * ((m - k) * norm_cdf(d) + s * norm_pdf(d))
        })
        .sum()
}

/// Quotes `price * (1 -/+ rel_spread / 2)` for each strike.
pub fn slice_from_prices(t: f64, spot: f64, strikes: &[f64], prices: &[f64], rel_spread: f64) -> WeightedSlice {
    let quotes = strikes
        .iter()
        .zip(prices)
        .map(|(&k, &c)| Quote::new(t, k, c * (1.0 - 0.5 * rel_spread), c * (1.0 + 0.5 * rel_spread)).unwrap())
        .collect();
    compute_weights(&QuoteSlice::new(t, spot, quotes, 0.1).unwrap(), 1e-4).unwrap()
}

/// Two maturities of 15 strikes from a 20% binomial tree with the given relative spread.
pub fn binomial_instance(rel_spread: f64) -> Vec<WeightedSlice> {
    let s0 = 100.0;
    let strikes: Vec<f64> = (0..15).map(|i| 80.0 + i as f64 * 40.0 / 14.0).collect();
    [(0.25, 50), (0.5, 100)]
        .iter()
        .map(|&(t, steps)| slice_from_prices(t, s0, &strikes, &tree_prices(s0, 0.2, t, steps, &strikes), rel_spread))
        .collect()
}

/// Rebuilds the dual problem a calibrated slice was solved on.
pub fn problem_of(surface: &CalibratedSurface, i: usize, cfg: &CalibrationConfig) -> SliceProblem {
    let sl = &surface.slices[i];
    let qs = QuoteSlice::new(sl.maturity, surface.spot, sl.quotes.clone(), cfg.lambda).unwrap();
    let ws = compute_weights(&qs, cfg.eps_floor).unwrap();
    SliceProblem::new(&sl.conditioning, &ws, &sl.prior, sl.dt(), sl.truncate_at_zero).unwrap()
}

/// Largest oracle discrepancies seen by [`kernel_sweep`], by quantity.
#[derive(Debug, Clone, Copy, Default)]
pub struct SweepErrors {
    pub band_const: f64,
    pub band_linear: f64,
    pub band_quad: f64,
    pub iu: f64,
    pub ih: f64,
    pub iq: f64,
    pub hessian: f64,
    pub point: f64,
}

impl SweepErrors {
    pub fn max(&self) -> f64 {
        [self.band_const, self.band_linear, self.band_quad, self.iu, self.ih, self.iq, self.hessian, self.point]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn finite_window(k1: f64, k2: f64, at: f64, sigma: f64) -> (f64, f64) {
    (k1.max(at - 14.0 * sigma), k2.min(at + 14.0 * sigma))
}

/// One band integral against quadrature: returns the discrepancy relative
/// to the integral of the absolute integrand.
fn band_check(
    s1: f64,
    sigma: f64,
    alpha: f64,
    k1: f64,
    k2: f64,
    got: volcal_core::kernels::Scaled,
    weight: impl Fn(f64) -> f64,
    centered: bool,
) -> f64 {
    let ln_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let lin = |x: f64| if centered { alpha * (x - s1) } else { alpha * x };
    let peak = s1 + alpha * sigma * sigma;
    let at = peak.clamp(k1.max(-1e300), k2.min(1e300));
    let (lo, hi) = finite_window(k1, k2, at, sigma);
    let log_ref = got.log_scale;
    let (val, abs) = scalar(
        |x| weight(x) * (lin(x) - 0.5 * ((x - s1) / sigma).powi(2) + ln_norm - log_ref).exp(),
        lo,
        hi,
        1e-14,
    );
    rel_err(got.mantissa, val, abs)
}

/// Randomized comparison of every closed-form integral with the quadrature
/// oracle: `s1` in [50, 200], sigma in [1, 50], up to 10 strikes,
/// `|V| <= 0.2`, `|theta| <= 0.1`.
pub fn kernel_sweep(draws: usize, seed: u64) -> SweepErrors {
    use rand::SeedableRng;
    use rayon::prelude::*;
    (0..draws)
        .into_par_iter()
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            sweep_draw(&mut rng)
        })
        .reduce(SweepErrors::default, |a, b| SweepErrors {
            band_const: a.band_const.max(b.band_const),
            band_linear: a.band_linear.max(b.band_linear),
            band_quad: a.band_quad.max(b.band_quad),
            iu: a.iu.max(b.iu),
            ih: a.ih.max(b.ih),
            iq: a.iq.max(b.iq),
            hessian: a.hessian.max(b.hessian),
            point: a.point.max(b.point),
        })
}

fn sweep_draw(rng: &mut rand_chacha::ChaCha8Rng) -> SweepErrors {
    use rand::Rng;
    use volcal_core::kernels::*;
    let mut e = SweepErrors::default();
    let limit = |rng: &mut rand_chacha::ChaCha8Rng, s1: f64, sigma: f64, inf: f64| {
        if rng.gen_bool(0.2) {
            inf
        } else {
            s1 + sigma * rng.gen_range(-4.0..4.0)
        }
    };
    {
        let s1 = rng.gen_range(50.0..200.0);
        let sigma = rng.gen_range(1.0..50.0);
        let kern = GaussKernel::new(s1, sigma);

        // single bands
        let alpha = rng.gen_range(-2.1..2.1);
        let (mut k1, mut k2) = (limit(rng, s1, sigma, f64::NEG_INFINITY), limit(rng, s1, sigma, f64::INFINITY));
        if k1 > k2 {
            std::mem::swap(&mut k1, &mut k2);
        }
        let pivot = s1 + sigma * rng.gen_range(-2.0..2.0);
        let (kq, qq) = (s1 + sigma * rng.gen_range(-2.0..2.0), s1 + sigma * rng.gen_range(-2.0..2.0));
        if k2 > k1 {
            let c = band_moment_const(&kern, alpha, k1, k2);
            e.band_const = e.band_const.max(band_check(s1, sigma, alpha, k1, k2, c, |_| 1.0, false));
            let l = band_moment_linear(&kern, alpha, k1, k2, pivot);
            e.band_linear = e.band_linear.max(band_check(s1, sigma, alpha, k1, k2, l, |x| x - pivot, false));
            let q = band_moment_quad(&kern, alpha, k1, k2, kq, qq);
            e.band_quad = e.band_quad.max(band_check(s1, sigma, alpha, k1, k2, q, |x| (x - kq) * (x - qq), true));
        }

        // composed moments
        let nk = rng.gen_range(1..=10);
        let mut strikes: Vec<f64> = (0..nk).map(|_| s1 + sigma * rng.gen_range(-3.0..3.0)).collect();
        strikes.sort_by(f64::total_cmp);
        strikes.dedup();
        let v: Vec<f64> = strikes.iter().map(|_| rng.gen_range(-0.2..0.2)).collect();
        let theta = rng.gen_range(-0.1..0.1);
        let o = oracle_point(&strikes, &v, theta, s1, sigma);
        let exp = PiecewisePayoffExponent::new(&strikes, &v, theta, s1);
        let iu = moment_iu(&exp, &kern);
        e.iu = e.iu.max((iu.relative_to(o.ln_iu) - 1.0).abs());
        let ih = moment_ih(&exp, &kern);
        e.ih = e.ih.max(rel_err(ih.relative_to(o.ln_iu), o.mean, o.mean_abs));
        let k = strikes.len();
        for p in 0..k {
            let iq = moment_iq(&exp, &kern, strikes[p]);
            e.iq = e.iq.max(rel_err(iq.relative_to(o.ln_iu), o.calls[p], 0.0));
            for q in 0..k {
                let hm = moment_hessian(&exp, &kern, strikes[p], strikes[q]);
                e.hessian = e.hessian.max(rel_err(hm.relative_to(o.ln_iu), o.hessian[p * k + q], 0.0));
            }
        }
        let pm = PointMoments::evaluate(&strikes, &v, theta, &kern, true);
        let mut pe = (pm.ln_iu - o.ln_iu).exp_m1().abs();
        pe = pe.max(rel_err(pm.mean, o.mean, o.mean_abs));
        pe = pe.max(rel_err(pm.second, o.second, 0.0));
        for p in 0..k {
            pe = pe.max(rel_err(pm.calls[p], o.calls[p], 0.0));
        }
        let hm = pm.hessian.as_ref().unwrap();
        for (a, b) in hm.iter().zip(&o.hessian) {
            pe = pe.max(rel_err(*a, *b, 0.0));
        }
        e.point = e.point.max(pe);
    }
    e
}

/// `W1` between a continuous law and a discrete one as the integral of the
/// absolute CDF difference. The continuous CDF is accumulated panel by panel
/// with Gauss-Kronrod; `|F - F_d|` is integrated by Simpson's rule on 32
/// sub-panels per grid cell.
pub fn w1_distance(density: &dyn volcal_core::surface::MarginalDensity, disc: &DiscreteMarginal) -> f64 {
    let sd = density.std_dev();
    let grid = &disc.grid;
    let n = grid.len();
    let lo = grid[0] - 14.0 * sd;
    let hi = grid[n - 1] + 14.0 * sd;
    let mut edges = vec![lo];
    edges.extend_from_slice(grid);
    edges.push(hi);
    let mut cdf = 0.0;
    let mut discrete = 0.0;
    let mut total = 0.0;
    for c in 0..edges.len() - 1 {
        let (x0, x1) = (edges[c], edges[c + 1]);
        if c > 0 {
            discrete += disc.mass[c - 1];
        }
        if !(x1 > x0) {
            continue;
        }
        let m = if c == 0 || c == edges.len() - 2 { 256 } else { 32 };
        let h = (x1 - x0) / (2 * m) as f64;
        let mut f = Vec::with_capacity(2 * m + 1);
        f.push((cdf - discrete).abs());
        let mut x = x0;
        for _ in 0..2 * m {
            cdf += scalar(|y| density.pdf(y), x, x + h, 1e-13).0;
            x += h;
            f.push((cdf - discrete).abs());
        }
        let mut s = f[0] + f[2 * m];
        for (i, v) in f.iter().enumerate().take(2 * m).skip(1) {
            s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
        }
        total += s * h / 3.0;
    }
    total
}

/// 25 conditioning points around 100 and 8 strikes with 2% spreads.
pub fn dual_problem() -> SliceProblem {
    let grid: Vec<f64> = (0..25).map(|i| 88.0 + i as f64).collect();
    let raw: Vec<f64> = grid.iter().map(|x| (-0.5 * ((x - 100.0) / 4.0f64).powi(2)).exp()).collect();
    let total: f64 = raw.iter().sum();
    let prev = DiscreteMarginal::new(grid, raw.iter().map(|m| m / total).collect(), 0.25).unwrap();
    let strikes: Vec<f64> = (0..8).map(|i| 90.0 + 3.0 * i as f64).collect();
    let prices: Vec<f64> = strikes.iter().map(|&k| mixture_call(&[(1.0, 100.0, 9.0)], k)).collect();
    let ws = slice_from_prices(0.5, 100.0, &strikes, &prices, 0.02);
    let prior = PriorParams::new(1.5, 0.4).unwrap();
    SliceProblem::new(&prev, &ws, &prior, 0.25, false).unwrap()
}

pub fn random_state(ctx: &SliceProblem, rng: &mut rand_chacha::ChaCha8Rng, v_scale: f64) -> DualState {
    DualState {
        u: (0..ctx.n_points()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        h: (0..ctx.n_points()).map(|_| rng.gen_range(-0.05..0.05)).collect(),
        v: (0..ctx.n_strikes()).map(|_| rng.gen_range(-v_scale..=v_scale)).collect(),
    }
}

/// Multipliers in the saturated penalty branches (kinks sit at |V| = 5 here),
/// with positive running sums so that the tilted kernels stay integrable in f64.
pub fn saturated_state(ctx: &SliceProblem, rng: &mut rand_chacha::ChaCha8Rng) -> DualState {
    let mut s = random_state(ctx, rng, 0.0);
    for (j, v) in s.v.iter_mut().enumerate() {
        *v = if j == 0 { -rng.gen_range(5.5..7.0) } else { rng.gen_range(5.5..8.0) };
    }
    s
}

pub fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Distance of `V_j * omega_j` from the penalty kinks, in units of `V`.
pub fn kink_gap(ctx: &SliceProblem, state: &DualState, j: usize) -> f64 {
    let p = &ctx.penalties[j];
    let x = state.v[j] * p.omega;
    (x - p.delta_bid).abs().min((x - p.delta_ask).abs()) / p.omega
}
