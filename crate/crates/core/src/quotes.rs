//! Quote ingestion: CSV parsing, validation, mid prices and penalty weights.
//!
//! The quote file is a `spot,<value>` preamble followed by a
//! `maturity,strike,bid,ask` header and one row per quote. Prices are
//! absolute (same units as spot) and assumed already mapped to a zero-rate,
//! zero-dividend underlying.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default regularization scale for the quote penalty weights.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Default relative floor used when a quote has zero spread.
pub const DEFAULT_EPS_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub maturity: f64,
    pub strike: f64,
    pub bid: f64,
    pub ask: f64,
}

impl Quote {
    pub fn new(maturity: f64, strike: f64, bid: f64, ask: f64) -> Result<Self> {
        let q = Self { maturity, strike, bid, ask };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return Err(Error::Validation(format!("maturity must be > 0, got {}", self.maturity)));
        }
        if !(self.strike > 0.0 && self.strike.is_finite()) {
            return Err(Error::Validation(format!("strike must be > 0, got {}", self.strike)));
        }
        if !(self.bid >= 0.0 && self.ask.is_finite()) {
            return Err(Error::Validation(format!(
                "bid must be >= 0 and ask finite (K={}, T={})",
                self.strike, self.maturity
            )));
        }
        if self.bid > self.ask {
            return Err(Error::Validation(format!(
                "bid {} > ask {} at K={}, T={}",
                self.bid, self.ask, self.strike, self.maturity
            )));
        }
        Ok(())
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.bid + self.ask)
    }
}

/// All quotes of one maturity, strikes strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteSlice {
    pub maturity: f64,
    pub spot: f64,
    pub quotes: Vec<Quote>,
    pub lambda: f64,
}

impl QuoteSlice {
    /// Builds a slice, sorting quotes by strike. Duplicate strikes and
    /// mismatched maturities are rejected.
    pub fn new(maturity: f64, spot: f64, mut quotes: Vec<Quote>, lambda: f64) -> Result<Self> {
        if !(spot > 0.0 && spot.is_finite()) {
            return Err(Error::Validation(format!("spot must be > 0, got {spot}")));
        }
        quotes.sort_by(|a, b| a.strike.total_cmp(&b.strike));
        let slice = Self { maturity, spot, quotes, lambda };
        slice.validate()?;
        Ok(slice)
    }

    pub fn validate(&self) -> Result<()> {
        for q in &self.quotes {
            q.validate()?;
            if q.maturity != self.maturity {
                return Err(Error::Validation(format!(
                    "quote maturity {} differs from slice maturity {}",
                    q.maturity, self.maturity
                )));
            }
        }
        for w in self.quotes.windows(2) {
            if w[1].strike <= w[0].strike {
                return Err(Error::Validation(format!(
                    "duplicate or unsorted strike {} at maturity {}",
                    w[1].strike, self.maturity
                )));
            }
        }
        Ok(())
    }

    pub fn strikes(&self) -> Vec<f64> {
        self.quotes.iter().map(|q| q.strike).collect()
    }

    pub fn len(&self) -> usize {
        self.quotes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quotes.is_empty()
    }
}

/// A slice with mid prices, penalty weights and the bid/ask offsets from mid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSlice {
    pub slice: QuoteSlice,
    pub mid: Vec<f64>,
    pub omega: Vec<f64>,
    pub delta_bid: Vec<f64>,
    pub delta_ask: Vec<f64>,
}

impl WeightedSlice {
    pub fn maturity(&self) -> f64 {
        self.slice.maturity
    }

    pub fn spot(&self) -> f64 {
        self.slice.spot
    }

    pub fn strikes(&self) -> Vec<f64> {
        self.slice.strikes()
    }

    pub fn len(&self) -> usize {
        self.slice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slice.is_empty()
    }

    pub fn bid(&self, j: usize) -> f64 {
        self.slice.quotes[j].bid
    }

    pub fn ask(&self, j: usize) -> f64 {
        self.slice.quotes[j].ask
    }
}

/// `omega_K = lambda * (ask - bid)`; zero-spread quotes get `lambda * eps_floor * spot`.
pub fn compute_weights(slice: &QuoteSlice, eps_floor: f64) -> Result<WeightedSlice> {
    if !(slice.lambda > 0.0 && slice.lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be > 0, got {}", slice.lambda)));
    }
    if !(eps_floor > 0.0 && eps_floor.is_finite()) {
        return Err(Error::Config(format!("eps_floor must be > 0, got {eps_floor}")));
    }
    slice.validate()?;
    let n = slice.len();
    let mut mid = Vec::with_capacity(n);
    let mut omega = Vec::with_capacity(n);
    let mut delta_bid = Vec::with_capacity(n);
    let mut delta_ask = Vec::with_capacity(n);
    for q in &slice.quotes {
        let m = q.mid();
        let spread = q.ask - q.bid;
        mid.push(m);
        omega.push(if spread > 0.0 {
            slice.lambda * spread
        } else {
            slice.lambda * eps_floor * slice.spot
        });
        delta_bid.push(q.bid - m);
        delta_ask.push(q.ask - m);
    }
    Ok(WeightedSlice { slice: slice.clone(), mid, omega, delta_bid, delta_ask })
}

fn parse_field(raw: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("cannot parse {what} '{}'", raw.trim()) })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("{what} is not finite") });
    }
    Ok(v)
}

/// Parses a quote file into maturity-sorted slices.
///
/// Rows with `bid == ask == 0` are dropped with a warning.
pub fn parse_quotes(text: &str, lambda: f64) -> Result<Vec<QuoteSlice>> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').trim()))
        .filter(|(_, l)| !l.is_empty());

    let (ln, preamble) = lines
        .next()
        .ok_or(Error::Parse { line: 0, msg: "empty quote file".into() })?;
    let spot = match preamble.split_once(',') {
        Some((key, value)) if key.trim().eq_ignore_ascii_case("spot") => {
            parse_field(value, ln, "spot")?
        }
        _ => return Err(Error::Parse { line: ln, msg: "expected 'spot,<value>' preamble".into() }),
    };

    let (ln, header) = lines
        .next()
        .ok_or(Error::Parse { line: ln + 1, msg: "missing header".into() })?;
    let cols: Vec<String> = header.split(',').map(|c| c.trim().to_ascii_lowercase()).collect();
    if cols != ["maturity", "strike", "bid", "ask"] {
        return Err(Error::Parse {
            line: ln,
            msg: format!("expected header 'maturity,strike,bid,ask', got '{header}'"),
        });
    }

    let mut by_maturity: BTreeMap<u64, Vec<Quote>> = BTreeMap::new();
    for (ln, row) in lines {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let maturity = parse_field(fields[0], ln, "maturity")?;
        let strike = parse_field(fields[1], ln, "strike")?;
        let bid = parse_field(fields[2], ln, "bid")?;
        let ask = parse_field(fields[3], ln, "ask")?;
        let q = Quote { maturity, strike, bid, ask };
        q.validate().map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {ln}: {msg}")),
            other => other,
        })?;
        if bid == 0.0 && ask == 0.0 {
            warn!("line {ln}: dropping zero bid/ask quote at K={strike}, T={maturity}");
            continue;
        }
        let bucket = by_maturity.entry(maturity.to_bits()).or_default();
        if bucket.iter().any(|o| o.strike == strike) {
            return Err(Error::Validation(format!(
                "line {ln}: duplicate quote for maturity {maturity}, strike {strike}"
            )));
        }
        bucket.push(q);
    }

    // positive f64 bit patterns sort like the values
    by_maturity
        .into_values()
        .map(|quotes| QuoteSlice::new(quotes[0].maturity, spot, quotes, lambda))
        .collect()
}

/// Writes slices back in the quote-file format.
pub fn write_quotes(slices: &[QuoteSlice]) -> String {
    let mut out = String::new();
    let spot = slices.first().map_or(0.0, |s| s.spot);
    out.push_str(&format!("spot,{spot}\nmaturity,strike,bid,ask\n"));
    for s in slices {
        for q in &s.quotes {
            out.push_str(&format!("{},{},{},{}\n", q.maturity, q.strike, q.bid, q.ask));
        }
    }
    out
}
