//! Arbitrage-free calibration of call option quotes by entropic martingale
//! transport.
//!
//! Quotes are grouped by maturity ([`quotes`]), screened for static
//! arbitrage ([`arbitrage`]) and calibrated slice by slice ([`surface`]):
//! each maturity is reached from the previous marginal through a Gaussian
//! transition kernel ([`prior`]) exponentially tilted so that the transition
//! is a martingale and reprices every quote within its bid/ask spread. The
//! tilt multipliers solve a smooth convex dual ([`dual`]) by alternating
//! exact minimization ([`solver`]), with all kernel integrals in closed form
//! ([`kernels`]).

pub mod arbitrage;
pub mod config;
pub mod dual;
pub mod error;
pub mod kernels;
pub mod pricing;
pub mod prior;
pub mod quotes;
pub mod solver;
pub mod special;
pub mod surface;

pub use arbitrage::{check_all, check_calendar, check_slice, non_degeneracy_probe, CallMatrix, ProbeOutcome, SpreadReport};
pub use config::RunConfig;
pub use dual::{DualState, PenaltySpec, SliceProblem};
pub use error::{Error, Result};
pub use kernels::{GaussKernel, PiecewisePayoffExponent};
pub use pricing::{bachelier_price, bs_price, implied_vol};
pub use prior::{fit_first_prior, fit_transition_prior, PriorParams};
pub use quotes::{compute_weights, parse_quotes, Quote, QuoteSlice, WeightedSlice};
pub use solver::{sinkhorn_calibrate, ConvergenceTrace, SolverConfig};
pub use surface::{
    calibrate_surface, discretize_marginal, load_surface, query_smile, save_surface, CalibratedSlice,
    CalibratedSurface, CalibrationConfig, DiscreteMarginal, DiscretizeConfig, SmilePoint,
};
