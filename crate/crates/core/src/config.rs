//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so that typos do not pass silently.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::surface::CalibrationConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub calibration: CalibrationConfig,
    /// Worker threads for within-slice parallelism; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { calibration: CalibrationConfig::default(), threads: 0 }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse value {value:?} for key {key}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean for key {key}, got {value:?}"))),
    }
}

impl RunConfig {
    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.calibration;
        match key {
            "lambda" => c.lambda = num(key, value)?,
            "eps_floor" => c.eps_floor = num(key, value)?,
            "grid_n" => c.grid.n = num(key, value)?,
            "tail_tol" => c.grid.tail_tol = num(key, value)?,
            "lower_sds" => c.grid.lower_sds = num(key, value)?,
            "grad_tol" => c.solver.grad_tol = num(key, value)?,
            "max_outer" => c.solver.max_outer = num(key, value)?,
            "max_newton" => c.solver.max_newton = num(key, value)?,
            "divergence_bound" => c.solver.divergence_bound = num(key, value)?,
            "divergence_window" => c.solver.divergence_window = num(key, value)?,
            "h_tol" => c.solver.h_tol = num(key, value)?,
            "ls_shrink" => c.solver.line_search.shrink = num(key, value)?,
            "ls_armijo" => c.solver.line_search.armijo = num(key, value)?,
            "truncate_at_zero" => c.truncate_at_zero = flag(key, value)?,
            "threads" => self.threads = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every assignment of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: n + 1, msg: format!("expected key = value, got {line:?}") })?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Parse { line: n + 1, msg },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.calibration.validate()
    }

    /// Every key with its current value, in a form `parse` reads back.
    pub fn render(&self) -> String {
        let c = &self.calibration;
        let mut out = String::new();
        let rows: [(&str, String); 15] = [
            ("lambda", c.lambda.to_string()),
            ("eps_floor", c.eps_floor.to_string()),
            ("grid_n", c.grid.n.to_string()),
            ("tail_tol", c.grid.tail_tol.to_string()),
            ("lower_sds", c.grid.lower_sds.to_string()),
            ("grad_tol", c.solver.grad_tol.to_string()),
            ("max_outer", c.solver.max_outer.to_string()),
            ("max_newton", c.solver.max_newton.to_string()),
            ("divergence_bound", c.solver.divergence_bound.to_string()),
            ("divergence_window", c.solver.divergence_window.to_string()),
            ("h_tol", c.solver.h_tol.to_string()),
            ("ls_shrink", c.solver.line_search.shrink.to_string()),
            ("ls_armijo", c.solver.line_search.armijo.to_string()),
            ("truncate_at_zero", c.truncate_at_zero.to_string()),
            ("threads", self.threads.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("lambda", "0.25").unwrap();
        cfg.set("truncate_at_zero", "yes").unwrap();
        cfg.set("grid_n", "321").unwrap();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = RunConfig::parse("# c\n\n grad_tol = 1e-9 \n").unwrap();
        assert_eq!(cfg.calibration.solver.grad_tol, 1e-9);
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("\nlambda 0.1"), Err(Error::Parse { line: 2, .. })));
        assert!(RunConfig::parse("lambda = x").is_err());
    }

    #[test]
    fn zero_lambda_rejected() {
        let cfg = RunConfig::parse("lambda = 0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
