mod common;

use std::sync::OnceLock;

use common::*;
use volcal_core::surface::*;
use volcal_core::*;

fn binomial_surface() -> &'static (CalibratedSurface, Vec<WeightedSlice>) {
    static CELL: OnceLock<(CalibratedSurface, Vec<WeightedSlice>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let slices = binomial_instance(0.01);
        (calibrate_surface(&slices, &CalibrationConfig::default()).unwrap(), slices)
    })
}

#[test]
fn dirac_like_density_concentrates() {
    let d = KernelMixture::gaussian(100.0, 1e-7);
    let cfg = DiscretizeConfig { n: 201, range: Some((90.0, 110.0)), ..Default::default() };
    let disc = discretize_marginal(&d, None, &cfg, 1.0).unwrap();
    let top = disc.marginal.mass.iter().cloned().fold(0.0, f64::max);
    assert!(top > 1.0 - 1e-5, "{top}");
    assert!((disc.marginal.mean() - 100.0).abs() <= 1e-10 * 100.0);
}

#[test]
fn standard_normal_moments() {
    let d = KernelMixture::gaussian(0.0, 1.0);
    let cfg = DiscretizeConfig { n: 1001, range: Some((-6.0, 6.0)), ..Default::default() };
    let m = discretize_marginal(&d, None, &cfg, 1.0).unwrap().marginal;
    let mean = m.mean();
    let var: f64 = m.grid.iter().zip(&m.mass).map(|(x, p)| p * (x - mean).powi(2)).sum();
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-3, "{var}");
}

#[test]
fn w1_is_first_order_in_grid_size() {
    let d = KernelMixture::gaussian(100.0, 8.0);
    let mut last = f64::NAN;
    for n in [50, 100, 200, 400] {
        let disc = discretize_marginal(&d, Some(85.0), &DiscretizeConfig { n, ..Default::default() }, 0.5).unwrap();
        let w1 = w1_distance(&d, &disc.marginal);
        assert!(w1 <= disc.error_bound, "n={n}: {w1} > {}", disc.error_bound);
        if last.is_finite() {
            let ratio = last / w1;
            assert!((1.8..2.2).contains(&ratio), "n={n}: ratio {ratio}");
        }
        last = w1;
    }
}

#[test]
fn empty_input_gives_empty_surface() {
    let s = calibrate_surface(&[], &CalibrationConfig::default()).unwrap();
    assert!(s.slices.is_empty());
}

#[test]
fn single_wide_quote() {
    let q = Quote::new(0.5, 100.0, 4.0, 8.0).unwrap();
    let ws = compute_weights(&QuoteSlice::new(0.5, 100.0, vec![q], 0.1).unwrap(), 1e-4).unwrap();
    let s = calibrate_surface(&[ws], &CalibrationConfig::default()).unwrap();
    let sl = &s.slices[0];
    assert!(sl.trace.converged);
    let p = query_smile(&s, 0, &[100.0]).unwrap()[0].price;
    assert!((4.0 - 1e-6..=8.0 + 1e-6).contains(&p), "{p}");
    assert!((sl.density(100.0).mean() - 100.0).abs() <= 1e-8 * 100.0);
    assert!((sl.marginal.mean() - 100.0).abs() <= 1e-8 * 100.0);
}

#[test]
fn binomial_slices_converge_in_band_and_in_convex_order() {
    let (s, slices) = binomial_surface();
    assert_eq!(s.slices.len(), 2);
    let tol = 1e-8 * s.spot;
    for (i, (sl, ws)) in s.slices.iter().zip(slices).enumerate() {
        assert!(sl.trace.converged);
        let smile = query_smile(s, i, &ws.strikes()).unwrap();
        for (j, p) in smile.iter().enumerate() {
            assert!(p.price >= ws.bid(j) - tol && p.price <= ws.ask(j) + tol, "slice {i} strike {j}");
        }
        let total: f64 = sl.marginal.mass.iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!((sl.marginal.mean() - s.spot).abs() <= 1e-8 * s.spot);
    }
    let grid: Vec<f64> = (0..60).map(|i| 60.0 + i as f64).collect();
    let a = query_smile(s, 0, &grid).unwrap();
    let b = query_smile(s, 1, &grid).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(y.price >= x.price - 1e-10 * s.spot, "K={}: {} < {}", x.strike, y.price, x.price);
    }
}

#[test]
fn smile_limits_and_shape() {
    let (s, _) = binomial_surface();
    for i in 0..2 {
        let zero = query_smile(s, i, &[0.0]).unwrap()[0];
        assert!((zero.price - s.spot).abs() <= 1e-8 * s.spot);
        assert!(zero.implied_vol.is_none());
        let far: Vec<f64> = (0..8).map(|k| 150.0 + 50.0 * k as f64).collect();
        let tail = query_smile(s, i, &far).unwrap();
        assert!(tail.windows(2).all(|w| w[1].price <= w[0].price));
        assert!(tail.last().unwrap().price < 1e-12);
        let grid: Vec<f64> = (0..101).map(|k| 70.0 + 0.6 * k as f64).collect();
        let sm = query_smile(s, i, &grid).unwrap();
        for w in sm.windows(3) {
            assert!(w[1].price <= w[0].price + 1e-12);
            assert!(w[0].price + w[2].price - 2.0 * w[1].price >= -1e-10 * s.spot);
        }
        assert!(sm.iter().filter(|p| p.strike > 80.0 && p.strike < 120.0).all(|p| p.implied_vol.is_some()));
    }
}

#[test]
fn smile_matches_solver_prices() {
    let (s, _) = binomial_surface();
    let cfg = CalibrationConfig::default();
    for i in 0..2 {
        let ctx = problem_of(s, i, &cfg);
        let state = &s.slices[i].dual;
        let (_, grad, _) = volcal_core::dual::g12_v_derivatives(state, &ctx, false);
        let solver_prices = volcal_core::solver::model_prices(state, &ctx, &grad);
        let smile = query_smile(s, i, &ctx.strikes).unwrap();
        for (p, q) in smile.iter().zip(&solver_prices) {
            assert!((p.price - q).abs() <= 1e-12 * s.spot, "{} vs {q}", p.price);
        }
    }
}

#[test]
fn bad_queries() {
    let (s, _) = binomial_surface();
    assert!(matches!(query_smile(s, 2, &[100.0]), Err(Error::Config(_))));
    assert!(matches!(query_smile(s, 0, &[-1.0]), Err(Error::Domain(_))));
}

#[test]
fn binary_round_trip_reprices_identically() {
    let (s, _) = binomial_surface();
    let mut buf = Vec::new();
    save_surface(s, &mut buf).unwrap();
    let back = load_surface(buf.as_slice()).unwrap();
    assert_eq!(&back, s);
    let strikes: Vec<f64> = (0..40).map(|k| 70.0 + 1.5 * k as f64).collect();
    for i in 0..2 {
        let a = query_smile(s, i, &strikes).unwrap();
        let b = query_smile(&back, i, &strikes).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.price.to_bits(), y.price.to_bits());
        }
    }
}

#[test]
fn json_round_trip_and_format_sniffing() {
    let (s, _) = binomial_surface();
    let mut json = Vec::new();
    save_surface_json(s, &mut json).unwrap();
    assert_eq!(&load_surface_json(json.as_slice()).unwrap(), s);
    assert_eq!(&load_surface_any(&json).unwrap(), s);
    let bin = encode_surface(s).unwrap();
    assert_eq!(&load_surface_any(&bin).unwrap(), s);
}

#[test]
fn damaged_files_are_rejected() {
    let (s, _) = binomial_surface();
    let bin = encode_surface(s).unwrap();
    for cut in [0, 3, 10, bin.len() / 2, bin.len() - 1] {
        assert!(decode_surface(&bin[..cut]).is_err(), "cut at {cut}");
    }
    let mut flipped = bin.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(decode_surface(&flipped).is_err());
    let mut version = bin.clone();
    version[4] = 99;
    assert!(decode_surface(&version).is_err());
}

#[test]
fn config_is_metadata_only() {
    let (s, _) = binomial_surface();
    let mut other = s.clone();
    other.config.solver.grad_tol = 1e-5;
    other.config.lambda = 0.3;
    let back = decode_surface(&encode_surface(&other).unwrap()).unwrap();
    assert_eq!(back.config.solver.grad_tol, 1e-5);
    assert_eq!(back.config.lambda, 0.3);
    let a = query_smile(s, 1, &[95.0, 105.0]).unwrap();
    let b = query_smile(&back, 1, &[95.0, 105.0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn smile_csv_layout() {
    let (s, _) = binomial_surface();
    let pts = query_smile(s, 0, &[90.0, 100.0]).unwrap();
    let csv = smile_csv(s.slices[0].maturity, &pts);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("maturity,strike,price,implied_vol"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn unsorted_or_mixed_spot_inputs_are_rejected() {
    let slices = binomial_instance(0.02);
    let swapped = vec![slices[1].clone(), slices[0].clone()];
    assert!(calibrate_surface(&swapped, &CalibrationConfig::default()).is_err());
}
