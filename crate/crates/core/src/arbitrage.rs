//! Static arbitrage checks on bid/ask call quotes and a cheap
//! non-degeneracy probe.
//!
//! Strike indices follow the extended convention: `j = 0` is the zero strike
//! (whose call is worth the spot, with no spread), `j >= 1` is the `j`-th
//! quoted strike in increasing order. Maturity indices are 0-based.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quotes::WeightedSlice;
use crate::surface::DiscreteMarginal;

/// `(bid(j-1) - ask(j)) / (K_j - K_{j-1})`, required to lie in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerticalCheck {
    pub i: usize,
    pub j: usize,
    pub value: f64,
    pub pass: bool,
    /// Zero spread although the lower call is worth something.
    pub strict_warning: bool,
}

/// `ask_{i2}(K_{j2}) - bid_{i1}(K_{j1})` for `i1 < i2`, `K_{j1} >= K_{j2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalendarCheck {
    pub i1: usize,
    pub i2: usize,
    pub j1: usize,
    pub j2: usize,
    pub value: f64,
    pub pass: bool,
    pub strict_warning: bool,
}

/// Cross-maturity butterfly: slope right of `K_j` minus slope left of it,
/// with the middle call at its ask and the wings at their bids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ButterflyCheck {
    pub i: usize,
    pub i1: usize,
    pub i2: usize,
    pub j: usize,
    pub j1: usize,
    pub j2: usize,
    pub value: f64,
    pub pass: bool,
}

/// A quote whose ask is not positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceCheck {
    pub i: usize,
    pub j: usize,
    pub ask: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpreadReport {
    pub vertical: Vec<VerticalCheck>,
    pub calendar: Vec<CalendarCheck>,
    pub butterfly: Vec<ButterflyCheck>,
    pub nonpositive: Vec<PriceCheck>,
    pub overall_pass: bool,
}

impl SpreadReport {
    fn refresh(&mut self) {
        self.overall_pass = self.nonpositive.is_empty()
            && self.vertical.iter().all(|c| c.pass)
            && self.calendar.iter().all(|c| c.pass)
            && self.butterfly.iter().all(|c| c.pass);
    }

    pub fn merge(&mut self, other: SpreadReport) {
        self.vertical.extend(other.vertical);
        self.calendar.extend(other.calendar);
        self.butterfly.extend(other.butterfly);
        self.nonpositive.extend(other.nonpositive);
        self.refresh();
    }

    pub fn failures(&self) -> usize {
        self.nonpositive.len()
            + self.vertical.iter().filter(|c| !c.pass).count()
            + self.calendar.iter().filter(|c| !c.pass).count()
            + self.butterfly.iter().filter(|c| !c.pass).count()
    }

    pub fn warnings(&self) -> usize {
        self.vertical.iter().filter(|c| c.strict_warning).count()
            + self.calendar.iter().filter(|c| c.strict_warning).count()
    }

    /// Human-readable summary listing failed checks and strictness warnings.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "checks: {} vertical, {} calendar, {} butterfly; failures: {}; warnings: {}",
            self.vertical.len(),
            self.calendar.len(),
            self.butterfly.len(),
            self.failures(),
            self.warnings()
        );
        for c in &self.nonpositive {
            let _ = writeln!(out, "FAIL price     i={} j={} ask={}", c.i, c.j, c.ask);
        }
        for c in self.vertical.iter().filter(|c| !c.pass || c.strict_warning) {
            let tag = if c.pass { "WARN" } else { "FAIL" };
            let _ = writeln!(out, "{tag} vertical  i={} j={} VS={:.6}", c.i, c.j, c.value);
        }
        for c in self.calendar.iter().filter(|c| !c.pass || c.strict_warning) {
            let tag = if c.pass { "WARN" } else { "FAIL" };
            let _ = writeln!(out, "{tag} calendar  i1={} i2={} j1={} j2={} CVS={:.6}", c.i1, c.i2, c.j1, c.j2, c.value);
        }
        for c in self.butterfly.iter().filter(|c| !c.pass) {
            let _ = writeln!(
                out,
                "FAIL butterfly i={} i1={} i2={} j={} j1={} j2={} CBS={:.6}",
                c.i, c.i1, c.i2, c.j, c.j1, c.j2, c.value
            );
        }
        let _ = writeln!(out, "overall: {}", if self.overall_pass { "PASS" } else { "FAIL" });
        out
    }

    /// One row per check: `kind,i,i1,i2,j,j1,j2,value,pass,warning`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,i,i1,i2,j,j1,j2,value,pass,warning\n");
        for c in &self.nonpositive {
            let _ = writeln!(out, "price,{},,,{},,,{},false,false", c.i, c.j, c.ask);
        }
        for c in &self.vertical {
            let _ = writeln!(out, "vertical,{},,,{},,,{},{},{}", c.i, c.j, c.value, c.pass, c.strict_warning);
        }
        for c in &self.calendar {
            let _ = writeln!(
                out,
                "calendar,,{},{},,{},{},{},{},{}",
                c.i1, c.i2, c.j1, c.j2, c.value, c.pass, c.strict_warning
            );
        }
        for c in &self.butterfly {
            let _ = writeln!(
                out,
                "butterfly,{},{},{},{},{},{},{},{},false",
                c.i, c.i1, c.i2, c.j, c.j1, c.j2, c.value, c.pass
            );
        }
        out
    }
}

/// Strikes and quotes of one maturity, extended with the zero strike.
struct Extended {
    k: Vec<f64>,
    bid: Vec<f64>,
    ask: Vec<f64>,
}

fn extended(ws: &WeightedSlice) -> Extended {
    let s0 = ws.spot();
    let mut k = vec![0.0];
    let mut bid = vec![s0];
    let mut ask = vec![s0];
    for q in &ws.slice.quotes {
        k.push(q.strike);
        bid.push(q.bid);
        ask.push(q.ask);
    }
    Extended { k, bid, ask }
}

/// Vertical spread and price checks of maturity `i`.
pub fn check_slice(ws: &WeightedSlice, i: usize) -> SpreadReport {
    let e = extended(ws);
    let mut rep = SpreadReport::default();
    for j in 1..e.k.len() {
        if !(e.ask[j] > 0.0) {
            rep.nonpositive.push(PriceCheck { i, j, ask: e.ask[j] });
        }
        let value = (e.bid[j - 1] - e.ask[j]) / (e.k[j] - e.k[j - 1]);
        let pass = (0.0..=1.0).contains(&value);
        rep.vertical.push(VerticalCheck { i, j, value, pass, strict_warning: pass && value == 0.0 && e.bid[j - 1] > 0.0 });
    }
    rep.refresh();
    rep
}

/// Calendar spread and cross-maturity butterfly checks over all slices
/// (sorted by strictly increasing maturity).
pub fn check_calendar(slices: &[WeightedSlice]) -> Result<SpreadReport> {
    if slices.windows(2).any(|w| !(w[1].maturity() > w[0].maturity())) {
        return Err(Error::Validation("maturities must be strictly increasing".into()));
    }
    let ext: Vec<Extended> = slices.iter().map(extended).collect();
    let mut rep = SpreadReport::default();
    let m = ext.len();
    for i1 in 0..m {
        for i2 in i1 + 1..m {
            let (a, b) = (&ext[i1], &ext[i2]);
            for j1 in 0..a.k.len() {
                for j2 in 0..b.k.len() {
                    if a.k[j1] < b.k[j2] {
                        continue;
                    }
                    let value = b.ask[j2] - a.bid[j1];
                    let pass = value >= 0.0;
                    let strict_warning = pass && value == 0.0 && a.k[j1] > b.k[j2] && a.bid[j1] > 0.0;
                    rep.calendar.push(CalendarCheck { i1, i2, j1, j2, value, pass, strict_warning });
                }
            }
        }
    }
    for i in 0..m {
        let mid = &ext[i];
        for i1 in i..m {
            for i2 in i..m {
                let (l, r) = (&ext[i1], &ext[i2]);
                for j in 0..mid.k.len() {
                    let k = mid.k[j];
                    for j1 in 0..l.k.len() {
                        if !(l.k[j1] < k) {
                            continue;
                        }
                        let left = (mid.ask[j] - l.bid[j1]) / (l.k[j1] - k);
                        for j2 in 0..r.k.len() {
                            if !(r.k[j2] > k) {
                                continue;
                            }
                            let right = (r.bid[j2] - mid.ask[j]) / (k - r.k[j2]);
                            let value = left - right;
                            rep.butterfly.push(ButterflyCheck { i, i1, i2, j, j1, j2, value, pass: value >= 0.0 });
                        }
                    }
                }
            }
        }
    }
    rep.refresh();
    Ok(rep)
}

/// Every check over a set of slices.
pub fn check_all(slices: &[WeightedSlice]) -> Result<SpreadReport> {
    let mut rep = SpreadReport { overall_pass: true, ..Default::default() };
    for (i, ws) in slices.iter().enumerate() {
        rep.merge(check_slice(ws, i));
    }
    rep.merge(check_calendar(slices)?);
    Ok(rep)
}

/// `((K_j - K_i)+)` over `K_0 = 0 < K_1 < ... < K_k`, bordered by a row and a
/// column of ones standing for the strike at infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct CallMatrix {
    pub entries: DMatrix<f64>,
}

impl CallMatrix {
    /// Builds the matrix for the quoted `strikes` (the zero strike is added).
    pub fn new(strikes: &[f64]) -> Result<Self> {
        Self::build(strikes, 1.0)
    }

    /// Same matrix with `corner` at the bottom-right entry.
    pub fn with_corner(strikes: &[f64], corner: f64) -> Result<Self> {
        Self::build(strikes, corner)
    }

    fn build(strikes: &[f64], corner: f64) -> Result<Self> {
        if strikes.iter().any(|&k| !(k > 0.0)) || strikes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::SingularCallMatrix);
        }
        let mut ks = vec![0.0];
        ks.extend_from_slice(strikes);
        let n = ks.len() + 1;
        let mut m = DMatrix::from_element(n, n, 1.0);
        for i in 0..ks.len() {
            for j in 0..ks.len() {
                m[(i, j)] = (ks[j] - ks[i]).max(0.0);
            }
        }
        m[(n - 1, n - 1)] = corner;
        let out = Self { entries: m };
        if out.entries.clone().lu().solve(&DVector::from_element(n, 1.0)).is_none() {
            return Err(Error::SingularCallMatrix);
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn solve(&self, c: &[f64]) -> Result<Vec<f64>> {
        let x = self
            .entries
            .clone()
            .lu()
            .solve(&DVector::from_column_slice(c))
            .ok_or(Error::SingularCallMatrix)?;
        Ok(x.iter().copied().collect())
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.entries * DVector::from_column_slice(x)).iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeOutcome {
    Pass,
    /// No candidate price vector passed; the solver's divergence detection decides.
    Inconclusive(String),
}

fn probe_failure(m: &CallMatrix, c: &[f64], floor: &[f64]) -> Result<Option<String>> {
    let x = m.solve(c)?;
    if let Some((i, v)) = x.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Ok(Some(format!("component {i} of the inverted call vector is {v:.6e} (needs > 0)")));
    }
    for (i, (&ci, &fi)) in c[1..c.len() - 1].iter().zip(floor).enumerate() {
        if !(ci > fi) {
            return Ok(Some(format!(
                "price {ci:.6} at strike index {} does not exceed the conditioning value {fi:.6}",
                i + 1
            )));
        }
    }
    Ok(None)
}

/// Looks for a price vector in the bid/ask box that makes the problem
/// non-degenerate, starting at mid and then trying up to `max_perturb`
/// deterministic coordinate moves.
pub fn non_degeneracy_probe(ws: &WeightedSlice, prev: &DiscreteMarginal, max_perturb: usize) -> Result<ProbeOutcome> {
    if prev.grid.is_empty() || !prev.mass.iter().any(|&p| p > 0.0) {
        return Ok(ProbeOutcome::Inconclusive("conditioning marginal is empty".into()));
    }
    let strikes = ws.strikes();
    // the corner is left at zero so the all-ones column prices a claim that
    // pays the same on every call and carries no mass
    let m = CallMatrix::with_corner(&strikes, 0.0)?;
    let floor: Vec<f64> = strikes.iter().map(|&k| prev.call(k)).collect();
    let mut c = Vec::with_capacity(strikes.len() + 2);
    c.push(prev.mean());
    c.extend_from_slice(&ws.mid);
    c.push(1.0);
    let Some(first) = probe_failure(&m, &c, &floor)? else {
        return Ok(ProbeOutcome::Pass);
    };
    let k = strikes.len();
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    let all = |f: &dyn Fn(usize) -> f64| {
        let mut v = c.clone();
        for j in 0..k {
            v[j + 1] = f(j);
        }
        v
    };
    candidates.push(all(&|j| ws.ask(j)));
    candidates.push(all(&|j| ws.bid(j)));
    candidates.push(all(&|j| 0.5 * (ws.mid[j] + ws.ask(j))));
    candidates.push(all(&|j| 0.5 * (ws.mid[j] + ws.bid(j))));
    for frac in [1.0, 0.5, 0.25] {
        for j in 0..k {
            for dir in [1.0, -1.0] {
                let mut v = c.clone();
                let half = 0.5 * (ws.ask(j) - ws.bid(j));
                v[j + 1] = ws.mid[j] + dir * frac * half;
                candidates.push(v);
            }
        }
    }
    for cand in candidates.into_iter().take(max_perturb) {
        if cand == c {
            continue;
        }
        if probe_failure(&m, &cand, &floor)?.is_none() {
            return Ok(ProbeOutcome::Pass);
        }
    }
    Ok(ProbeOutcome::Inconclusive(first))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quotes::{compute_weights, Quote, QuoteSlice};

    fn ws(t: f64, q: &[(f64, f64, f64)]) -> WeightedSlice {
        let quotes = q.iter().map(|&(k, b, a)| Quote::new(t, k, b, a).unwrap()).collect();
        compute_weights(&QuoteSlice::new(t, 100.0, quotes, 0.1).unwrap(), 1e-4).unwrap()
    }

    #[test]
    fn vertical_examples() {
        let r = check_slice(&ws(1.0, &[(95.0, 10.0, 10.5), (100.0, 8.5, 9.0)]), 0);
        assert!((r.vertical[1].value - 0.2).abs() < 1e-12 && r.vertical[1].pass);
        let r = check_slice(&ws(1.0, &[(95.0, 8.0, 8.5), (100.0, 8.5, 9.0)]), 0);
        assert!((r.vertical[1].value + 0.2).abs() < 1e-12 && !r.vertical[1].pass);
        assert!(!r.overall_pass);
        let r = check_slice(&ws(1.0, &[(95.0, 16.0, 16.5), (100.0, 8.5, 9.0)]), 0);
        assert!((r.vertical[1].value - 1.4).abs() < 1e-12 && !r.vertical[1].pass);
    }

    #[test]
    fn calendar_examples() {
        let a = ws(0.5, &[(100.0, 4.0, 4.2)]);
        let b = ws(1.0, &[(100.0, 4.8, 5.0)]);
        let r = check_calendar(&[a.clone(), b]).unwrap();
        let c = r.calendar.iter().find(|c| c.j1 == 1 && c.j2 == 1).unwrap();
        assert!((c.value - 1.0).abs() < 1e-12 && c.pass);
        let b = ws(1.0, &[(100.0, 2.8, 3.0)]);
        let r = check_calendar(&[a, b]).unwrap();
        let c = r.calendar.iter().find(|c| c.j1 == 1 && c.j2 == 1).unwrap();
        assert!((c.value + 1.0).abs() < 1e-12 && !c.pass);
    }

    #[test]
    fn call_matrix_round_trip() {
        let m = CallMatrix::new(&[90.0, 100.0, 110.0]).unwrap();
        assert_eq!(m.dim(), 5);
        for i in 0..5 {
            assert_eq!(m.entries[(4, i)], 1.0);
            assert_eq!(m.entries[(i, 4)], 1.0);
        }
        let c = [100.0, 12.0, 5.0, 1.5, 1.0];
        let back = m.apply(&m.solve(&c).unwrap());
        for (a, b) in back.iter().zip(&c) {
            assert!((a - b).abs() <= 1e-10 * b.abs());
        }
        assert!(matches!(CallMatrix::new(&[100.0, 100.0]), Err(Error::SingularCallMatrix)));
    }

    #[test]
    fn probe_examples() {
        let prev = DiscreteMarginal::dirac(100.0, 0.0);
        let ok = ws(1.0, &[(100.0, 3.9, 4.1)]);
        assert_eq!(non_degeneracy_probe(&ok, &prev, 32).unwrap(), ProbeOutcome::Pass);
        let zero = ws(1.0, &[(100.0, 0.0, 0.0)]);
        assert!(matches!(non_degeneracy_probe(&zero, &prev, 32).unwrap(), ProbeOutcome::Inconclusive(_)));
        let rich = ws(1.0, &[(100.0, 101.0, 101.0)]);
        assert!(matches!(non_degeneracy_probe(&rich, &prev, 32).unwrap(), ProbeOutcome::Inconclusive(_)));
    }
}
