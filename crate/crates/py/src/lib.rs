//! Python bindings (`import volcal`).

use std::fs;

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use volcal_core::surface::{load_surface_any, save_surface_json};
use volcal_core as core;

create_exception!(volcal, VolcalError, pyo3::exceptions::PyException, "Base class of calibration errors.");
create_exception!(volcal, ArbitrageSuspected, VolcalError, "The quotes cannot be reached from the previous marginal.");
create_exception!(volcal, NotConverged, VolcalError, "The solver hit its iteration cap.");

fn py_err(e: core::Error) -> PyErr {
    match e {
        core::Error::ArbitrageSuspected { .. } => ArbitrageSuspected::new_err(e.to_string()),
        core::Error::NotConverged { .. } => NotConverged::new_err(e.to_string()),
        core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(frozen, from_py_object, name = "Quote")]
#[derive(Clone)]
struct PyQuote(core::Quote);

#[pymethods]
impl PyQuote {
    #[new]
    fn new(maturity: f64, strike: f64, bid: f64, ask: f64) -> PyResult<Self> {
        core::Quote::new(maturity, strike, bid, ask).py().map(Self)
    }

    #[getter]
    fn maturity(&self) -> f64 {
        self.0.maturity
    }

    #[getter]
    fn strike(&self) -> f64 {
        self.0.strike
    }

    #[getter]
    fn bid(&self) -> f64 {
        self.0.bid
    }

    #[getter]
    fn ask(&self) -> f64 {
        self.0.ask
    }

    #[getter]
    fn mid(&self) -> f64 {
        self.0.mid()
    }

    fn __repr__(&self) -> String {
        format!("Quote(maturity={}, strike={}, bid={}, ask={})", self.0.maturity, self.0.strike, self.0.bid, self.0.ask)
    }
}

/// Quotes of one maturity.
#[pyclass(frozen, from_py_object, name = "QuoteSlice")]
#[derive(Clone)]
struct PyQuoteSlice(core::QuoteSlice);

#[pymethods]
impl PyQuoteSlice {
    #[new]
    #[pyo3(signature = (maturity, spot, quotes, lambda_ = 0.1))]
    fn new(maturity: f64, spot: f64, quotes: Vec<PyQuote>, lambda_: f64) -> PyResult<Self> {
        let quotes = quotes.into_iter().map(|q| q.0).collect();
        core::QuoteSlice::new(maturity, spot, quotes, lambda_).py().map(Self)
    }

    #[getter]
    fn maturity(&self) -> f64 {
        self.0.maturity
    }

    #[getter]
    fn spot(&self) -> f64 {
        self.0.spot
    }

    #[getter]
    fn quotes(&self) -> Vec<PyQuote> {
        self.0.quotes.iter().cloned().map(PyQuote).collect()
    }

    #[getter]
    fn strikes(&self) -> Vec<f64> {
        self.0.strikes()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("QuoteSlice(maturity={}, spot={}, {} quotes)", self.0.maturity, self.0.spot, self.0.len())
    }
}

fn weigh(slices: &[PyQuoteSlice], eps_floor: f64) -> PyResult<Vec<core::WeightedSlice>> {
    slices.iter().map(|s| core::compute_weights(&s.0, eps_floor).py()).collect()
}

/// Parses the `spot,<S0>` / `maturity,strike,bid,ask` text format.
#[pyfunction]
#[pyo3(signature = (text, lambda_ = 0.1))]
fn parse_quotes(text: &str, lambda_: f64) -> PyResult<Vec<PyQuoteSlice>> {
    Ok(core::parse_quotes(text, lambda_).py()?.into_iter().map(PyQuoteSlice).collect())
}

#[pyfunction]
#[pyo3(signature = (path, lambda_ = 0.1))]
fn read_quotes(path: &str, lambda_: f64) -> PyResult<Vec<PyQuoteSlice>> {
    let text = fs::read_to_string(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
    parse_quotes(&text, lambda_)
}

#[pyclass(frozen, name = "SpreadReport")]
struct PySpreadReport(core::SpreadReport);

#[pymethods]
impl PySpreadReport {
    #[getter]
    fn overall_pass(&self) -> bool {
        self.0.overall_pass
    }

    #[getter]
    fn failures(&self) -> usize {
        self.0.failures()
    }

    #[getter]
    fn warnings(&self) -> usize {
        self.0.warnings()
    }

    /// Failing vertical spreads as `(i, j, value)`.
    fn vertical_failures(&self) -> Vec<(usize, usize, f64)> {
        self.0.vertical.iter().filter(|c| !c.pass).map(|c| (c.i, c.j, c.value)).collect()
    }

    /// Failing calendar spreads as `(i1, i2, j1, j2, value)`.
    fn calendar_failures(&self) -> Vec<(usize, usize, usize, usize, f64)> {
        self.0.calendar.iter().filter(|c| !c.pass).map(|c| (c.i1, c.i2, c.j1, c.j2, c.value)).collect()
    }

    /// Failing butterflies as `(i, i1, i2, j, j1, j2, value)`.
    fn butterfly_failures(&self) -> Vec<(usize, usize, usize, usize, usize, usize, f64)> {
        self.0.butterfly.iter().filter(|c| !c.pass).map(|c| (c.i, c.i1, c.i2, c.j, c.j1, c.j2, c.value)).collect()
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn to_csv(&self) -> String {
        self.0.to_csv()
    }

    fn __bool__(&self) -> bool {
        self.0.overall_pass
    }

    fn __repr__(&self) -> String {
        format!("SpreadReport(overall_pass={}, failures={})", self.0.overall_pass, self.0.failures())
    }
}

/// Static arbitrage checks over maturity-sorted slices.
#[pyfunction]
#[pyo3(signature = (slices, eps_floor = 1e-4))]
fn check(slices: Vec<PyQuoteSlice>, eps_floor: f64) -> PyResult<PySpreadReport> {
    let ws = weigh(&slices, eps_floor)?;
    core::check_all(&ws).py().map(PySpreadReport)
}

/// Run settings; keyword arguments use the config-file keys
/// (`lambda`, `grid_n`, `grad_tol`, `max_outer`, `truncate_at_zero`, ...).
#[pyclass(from_py_object, name = "Config")]
#[derive(Clone, Default)]
struct PyConfig(core::RunConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = None, **kwargs))]
    fn new(text: Option<&str>, kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut cfg = core::RunConfig::default();
        if let Some(t) = text {
            cfg.apply_text(t).py()?;
        }
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                cfg.set(&key, &v.str()?.to_cow()?).py()?;
            }
        }
        cfg.validate().py()?;
        Ok(Self(cfg))
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.0.set(key, &value.str()?.to_cow()?).py()?;
        self.0.validate().py()
    }

    fn render(&self) -> String {
        self.0.render()
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.0.calibration.lambda
    }

    #[getter]
    fn grid_n(&self) -> usize {
        self.0.calibration.grid.n
    }

    #[getter]
    fn grad_tol(&self) -> f64 {
        self.0.calibration.solver.grad_tol
    }

    #[getter]
    fn max_outer(&self) -> usize {
        self.0.calibration.solver.max_outer
    }

    fn __repr__(&self) -> String {
        format!("Config({:?})", self.0.render().trim_end())
    }
}

#[pyclass(frozen, name = "PriorParams")]
struct PyPriorParams(core::PriorParams);

#[pymethods]
impl PyPriorParams {
    #[getter]
    fn sigma0(&self) -> f64 {
        self.0.sigma0
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    fn __repr__(&self) -> String {
        format!("PriorParams(sigma0={}, beta={})", self.0.sigma0, self.0.beta)
    }
}

/// Prior of the first maturity, fitted to its mid prices.
#[pyfunction]
#[pyo3(signature = (slice, eps_floor = 1e-4))]
fn fit_first_prior(slice: PyQuoteSlice, eps_floor: f64) -> PyResult<PyPriorParams> {
    let ws = core::compute_weights(&slice.0, eps_floor).py()?;
    core::fit_first_prior(&ws).py().map(PyPriorParams)
}

#[pyclass(frozen, name = "DiscreteMarginal")]
struct PyDiscreteMarginal(core::DiscreteMarginal);

#[pymethods]
impl PyDiscreteMarginal {
    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.0.grid.clone()
    }

    #[getter]
    fn mass(&self) -> Vec<f64> {
        self.0.mass.clone()
    }

    #[getter]
    fn maturity(&self) -> f64 {
        self.0.maturity
    }

    fn mean(&self) -> f64 {
        self.0.mean()
    }

    fn call(&self, strike: f64) -> f64 {
        self.0.call(strike)
    }

    fn __len__(&self) -> usize {
        self.0.grid.len()
    }
}

#[pyclass(frozen, name = "SmilePoint")]
struct PySmilePoint(core::SmilePoint);

#[pymethods]
impl PySmilePoint {
    #[getter]
    fn strike(&self) -> f64 {
        self.0.strike
    }

    #[getter]
    fn price(&self) -> f64 {
        self.0.price
    }

    #[getter]
    fn implied_vol(&self) -> Option<f64> {
        self.0.implied_vol
    }

    fn __repr__(&self) -> String {
        format!("SmilePoint(strike={}, price={}, implied_vol={:?})", self.0.strike, self.0.price, self.0.implied_vol)
    }
}

/// A calibrated set of maturities.
#[pyclass(frozen, name = "Surface")]
struct PySurface(core::CalibratedSurface);

impl PySurface {
    fn slice(&self, index: usize) -> PyResult<&core::CalibratedSlice> {
        self.0.slices.get(index).ok_or_else(|| {
            PyIndexError::new_err(format!("maturity index {index} out of range ({} maturities)", self.0.slices.len()))
        })
    }
}

#[pymethods]
impl PySurface {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = fs::read(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        load_surface_any(&bytes).py().map(Self)
    }

    #[pyo3(signature = (path, json = false))]
    fn save(&self, path: &str, json: bool) -> PyResult<()> {
        let file = fs::File::create(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        let sink = std::io::BufWriter::new(file);
        if json {
            save_surface_json(&self.0, sink).py()
        } else {
            core::save_surface(&self.0, sink).py()
        }
    }

    #[getter]
    fn spot(&self) -> f64 {
        self.0.spot
    }

    #[getter]
    fn maturities(&self) -> Vec<f64> {
        self.0.slices.iter().map(|s| s.maturity).collect()
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.0.config.lambda
    }

    fn __len__(&self) -> usize {
        self.0.slices.len()
    }

    /// Model call prices and implied volatilities of maturity `index`.
    fn smile(&self, index: usize, strikes: Vec<f64>) -> PyResult<Vec<PySmilePoint>> {
        self.slice(index)?;
        Ok(core::query_smile(&self.0, index, &strikes).py()?.into_iter().map(PySmilePoint).collect())
    }

    fn smile_csv(&self, index: usize, strikes: Vec<f64>) -> PyResult<String> {
        let sl = self.slice(index)?;
        let points = core::query_smile(&self.0, index, &strikes).py()?;
        Ok(core::surface::smile_csv(sl.maturity, &points))
    }

    /// Discretized marginal handed to the next maturity.
    fn marginal(&self, index: usize) -> PyResult<PyDiscreteMarginal> {
        Ok(PyDiscreteMarginal(self.slice(index)?.marginal.clone()))
    }

    fn prior(&self, index: usize) -> PyResult<PyPriorParams> {
        Ok(PyPriorParams(self.slice(index)?.prior))
    }

    fn trace_csv(&self, index: usize) -> PyResult<String> {
        Ok(self.slice(index)?.trace.to_csv())
    }

    /// `(iterations, final |grad|, rate estimate)` of maturity `index`.
    fn summary(&self, index: usize) -> PyResult<(usize, f64, f64)> {
        let s = &self.slice(index)?.summary;
        Ok((s.iterations, s.grad_inf, s.lambda_hat))
    }

    fn __repr__(&self) -> String {
        format!("Surface(spot={}, maturities={:?})", self.0.spot, self.maturities())
    }
}

/// Calibrates maturity-sorted slices; releases the GIL while solving.
#[pyfunction]
#[pyo3(signature = (slices, config = None))]
fn calibrate(py: Python<'_>, slices: Vec<PyQuoteSlice>, config: Option<PyConfig>) -> PyResult<PySurface> {
    let cfg = config.unwrap_or_default().0.calibration;
    let ws = weigh(&slices, cfg.eps_floor)?;
    py.detach(|| core::calibrate_surface(&ws, &cfg)).py().map(PySurface)
}

#[pyfunction]
fn load_surface(path: &str) -> PyResult<PySurface> {
    PySurface::load(path)
}

/// Black-Scholes call price with zero rates for total volatility `sigma * sqrt(T)`.
#[pyfunction]
fn bs_price(spot: f64, strike: f64, total_vol: f64) -> PyResult<f64> {
    core::bs_price(spot, strike, total_vol).py()
}

#[pyfunction]
fn implied_vol(spot: f64, strike: f64, maturity: f64, price: f64) -> PyResult<f64> {
    core::implied_vol(spot, strike, maturity, price).py()
}

#[pyfunction]
fn bachelier_price(spot: f64, maturity: f64, strike: f64, sigma: f64) -> PyResult<f64> {
    core::bachelier_price(spot, maturity, strike, sigma).py()
}

#[pymodule]
fn volcal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("VolcalError", py.get_type::<VolcalError>())?;
    m.add("ArbitrageSuspected", py.get_type::<ArbitrageSuspected>())?;
    m.add("NotConverged", py.get_type::<NotConverged>())?;
    m.add_class::<PyQuote>()?;
    m.add_class::<PyQuoteSlice>()?;
    m.add_class::<PySpreadReport>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPriorParams>()?;
    m.add_class::<PyDiscreteMarginal>()?;
    m.add_class::<PySmilePoint>()?;
    m.add_class::<PySurface>()?;
    m.add_function(wrap_pyfunction!(parse_quotes, m)?)?;
    m.add_function(wrap_pyfunction!(read_quotes, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(fit_first_prior, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(load_surface, m)?)?;
    m.add_function(wrap_pyfunction!(bs_price, m)?)?;
    m.add_function(wrap_pyfunction!(implied_vol, m)?)?;
    m.add_function(wrap_pyfunction!(bachelier_price, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
