//! Discrete designs and the weighted-estimand functional.
//!
//! A design is a finite table of covariate cells. Each cell carries its
//! probability mass `p`, the weight function value `a`, the probability
//! `w0` that a unit of the cell belongs to the base population `W0 = 1`,
//! and optionally the CATE `tau` on that population. The estimand is
//!
//! ```text
//! mu(a, tau) = sum a w0 tau p / sum a w0 p
//! ```

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::rng;

/// Absolute tolerance on probability sums.
pub const PROB_TOL: f64 = 1e-9;

/// Weights in `(-NEG_TOL, 0)` count as zero.
pub const NEG_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    /// Numeric covariate value, needed only by the linear-CATE check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<f64>>,
    pub p: f64,
    pub a: f64,
    pub w0: f64,
    #[serde(default)]
    pub tau: Option<f64>,
}

impl Cell {
    pub fn new(label: impl Into<String>, p: f64, a: f64, w0: f64) -> Self {
        let label = label.into();
        let coords = parse_coords(&label);
        Cell { label, coords, p, a, w0, tau: None }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = Some(tau);
        self
    }

    pub fn with_coords(mut self, coords: Vec<f64>) -> Self {
        self.coords = Some(coords);
        self
    }

    /// Mass of the cell inside the base population, `w0 * p`.
    pub fn base_mass(&self) -> f64 {
        self.w0 * self.p
    }
}

/// Interpret a label such as `2` or `0.5;1` as a numeric vector.
pub fn parse_coords(label: &str) -> Option<Vec<f64>> {
    let parts: Option<Vec<f64>> = label
        .split(';')
        .map(|s| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect();
    parts.filter(|v| !v.is_empty())
}

/// A validated discrete design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct CellTable {
    cells: Vec<Cell>,
}

#[derive(Deserialize)]
struct RawTable {
    cells: Vec<Cell>,
}

impl TryFrom<RawTable> for CellTable {
    type Error = AuditError;

    fn try_from(raw: RawTable) -> Result<Self> {
        CellTable::new(raw.cells)
    }
}

impl CellTable {
    pub fn new(cells: Vec<Cell>) -> Result<Self> {
        if cells.is_empty() {
            return Err(AuditError::InvalidInput("design has no cells".into()));
        }
        let mut total = 0.0;
        for c in &cells {
            if !(c.p > 0.0 && c.p <= 1.0 + PROB_TOL) {
                return Err(AuditError::InvalidInput(format!(
                    "cell `{}` has mass {} outside (0, 1]",
                    c.label, c.p
                )));
            }
            if !(0.0..=1.0).contains(&c.w0) {
                return Err(AuditError::InvalidInput(format!(
                    "cell `{}` has w0 = {} outside [0, 1]",
                    c.label, c.w0
                )));
            }
            if !c.a.is_finite() || c.tau.is_some_and(|t| !t.is_finite()) {
                return Err(AuditError::InvalidInput(format!(
                    "cell `{}` has a non-finite value",
                    c.label
                )));
            }
            total += c.p;
        }
        if (total - 1.0).abs() > PROB_TOL {
            return Err(AuditError::InvalidInput(format!(
                "cell masses sum to {total}, not 1"
            )));
        }
        let table = CellTable { cells };
        if table.pop_w0() <= 0.0 {
            return Err(AuditError::InvalidInput(
                "base population W0 = 1 has zero mass".into(),
            ));
        }
        Ok(table)
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.a).collect()
    }

    /// P(W0 = 1).
    pub fn pop_w0(&self) -> f64 {
        self.cells.iter().map(Cell::base_mass).sum()
    }

    /// E[a | W0 = 1].
    pub fn mean_a_given_w0(&self) -> f64 {
        let num: f64 = self.cells.iter().map(|c| c.a * c.base_mass()).sum();
        num / self.pop_w0()
    }

    /// Largest weight over cells in the support of the base population.
    pub fn a_max(&self) -> f64 {
        self.cells
            .iter()
            .filter(|c| c.base_mass() > 0.0)
            .map(|c| c.a)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// P(X = x_k | W0 = 1) for every cell.
    pub fn base_masses(&self) -> Vec<f64> {
        let total = self.pop_w0();
        self.cells.iter().map(|c| c.base_mass() / total).collect()
    }

    /// Same design with the weight function replaced.
    pub fn with_weights(&self, a: &[f64]) -> Result<Self> {
        self.check_len(a.len())?;
        let mut out = self.clone();
        for (c, &v) in out.cells.iter_mut().zip(a) {
            c.a = v;
        }
        Ok(out)
    }

    /// Same design with the CATE replaced.
    pub fn with_tau(&self, tau: &[f64]) -> Result<Self> {
        self.check_len(tau.len())?;
        let mut out = self.clone();
        for (c, &v) in out.cells.iter_mut().zip(tau) {
            c.tau = Some(v);
        }
        Ok(out)
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.cells.len() {
            return Err(AuditError::DimensionMismatch { expected: self.cells.len(), got });
        }
        Ok(())
    }

    /// Whether every cell has `w0 = 1`.
    pub fn is_full_population(&self) -> bool {
        self.cells.iter().all(|c| c.w0 == 1.0)
    }
}

/// Probability of inclusion in a subpopulation `W*`, cell by cell,
/// conditional on `W0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubpopulationRule {
    pub inclusion: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SubpopulationRule {
    pub fn new(inclusion: Vec<f64>, seed: u64) -> Result<Self> {
        if let Some(v) = inclusion.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AuditError::InvalidInput(format!(
                "inclusion probability {v} outside [0, 1]"
            )));
        }
        Ok(SubpopulationRule { inclusion, seed })
    }

    /// Everybody in the base population.
    pub fn full(k: usize) -> Self {
        SubpopulationRule { inclusion: vec![1.0; k], seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    /// `None` when a needed CATE is missing.
    pub mu: Option<f64>,
    pub mean_a_given_w0: f64,
    pub pop_w0: f64,
    /// E[tau | W0 = 1], `None` when a needed CATE is missing.
    pub e0: Option<f64>,
}

fn degenerate(sum: f64, scale: f64) -> bool {
    sum.abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE)
}

/// Flip the sign of `a` if that is needed to make `E[a | W0 = 1]` positive.
pub fn normalize_sign(design: &CellTable) -> Result<CellTable> {
    let num: f64 = design.cells.iter().map(|c| c.a * c.base_mass()).sum();
    let scale: f64 = design.cells.iter().map(|c| c.a.abs() * c.base_mass()).sum();
    if degenerate(num, scale) {
        return Err(AuditError::DegenerateWeights);
    }
    if num > 0.0 {
        return Ok(design.clone());
    }
    let mut out = design.clone();
    for c in &mut out.cells {
        c.a = -c.a;
    }
    Ok(out)
}

/// Value of the weighted estimand.
pub fn mu(design: &CellTable) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut scale = 0.0;
    for c in &design.cells {
        let w = c.a * c.base_mass();
        if w != 0.0 {
            let tau = c.tau.ok_or_else(|| AuditError::MissingTau(c.label.clone()))?;
            num += w * tau;
        }
        den += w;
        scale += w.abs();
    }
    if degenerate(den, scale) {
        return Err(AuditError::DegenerateWeights);
    }
    Ok(num / den)
}

/// E[tau | W0 = 1].
pub fn base_average(design: &CellTable) -> Result<f64> {
    let mut num = 0.0;
    for c in &design.cells {
        if c.base_mass() > 0.0 {
            let tau = c.tau.ok_or_else(|| AuditError::MissingTau(c.label.clone()))?;
            num += tau * c.base_mass();
        }
    }
    Ok(num / design.pop_w0())
}

pub fn moment_summary(design: &CellTable) -> Result<MomentSummary> {
    let normalized = normalize_sign(design)?;
    let mu = match mu(&normalized) {
        Ok(v) => Some(v),
        Err(AuditError::MissingTau(_)) => None,
        Err(e) => return Err(e),
    };
    let e0 = base_average(&normalized).ok();
    Ok(MomentSummary {
        mu,
        mean_a_given_w0: normalized.mean_a_given_w0(),
        pop_w0: normalized.pop_w0(),
        e0,
    })
}

/// Normalized per-cell weights `a w0 p / sum a w0 p`.
///
/// With `w0 = 1` everywhere these are the familiar `a_k p_k / sum a_l p_l`;
/// they sum to one and can be negative.
pub fn discrete_weights(design: &CellTable) -> Result<Vec<f64>> {
    let design = normalize_sign(design)?;
    let total: f64 = design.cells.iter().map(|c| c.a * c.base_mass()).sum();
    Ok(design.cells.iter().map(|c| c.a * c.base_mass() / total).collect())
}

/// Average of a per-cell statistic over the subpopulation `W* = 1`.
pub fn subpop_profile(design: &CellTable, rule: &SubpopulationRule, g: &[f64]) -> Result<f64> {
    design.check_len(rule.inclusion.len())?;
    design.check_len(g.len())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((c, &inc), &gk) in design.cells.iter().zip(&rule.inclusion).zip(g) {
        let m = inc * c.base_mass();
        num += gk * m;
        den += m;
    }
    if den <= 0.0 {
        return Err(AuditError::EmptySubpopulation);
    }
    Ok(num / den)
}

/// One simulated unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubpopDraw {
    pub cell: usize,
    pub w0: bool,
    pub in_subpop: bool,
}

/// Draw `n` units: `X ~ p`, `W0 ~ Bernoulli(w0(X))`, and
/// `W* = 1(U <= inclusion(X)) * W0` with an independent uniform `U`.
pub fn realize_subpop(design: &CellTable, rule: &SubpopulationRule, n: usize) -> Result<Vec<SubpopDraw>> {
    design.check_len(rule.inclusion.len())?;
    let masses: Vec<f64> = design.cells.iter().map(|c| c.p).collect();
    let index = WeightedIndex::new(&masses)
        .map_err(|e| AuditError::InvalidInput(format!("cell masses: {e}")))?;
    let mut rng = rng::stream(rule.seed, 0);
    let draws = (0..n)
        .map(|_| {
            let cell = index.sample(&mut rng);
            let w0 = rng.random::<f64>() < design.cells[cell].w0;
            let u: f64 = rng.random();
            SubpopDraw { cell, w0, in_subpop: w0 && u <= rule.inclusion[cell] }
        })
        .collect();
    Ok(draws)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn illustrative() -> CellTable {
        CellTable::new(vec![
            Cell::new("1", 0.2, 0.24, 1.0).with_tau(2.0),
            Cell::new("2", 0.8, 0.09, 1.0).with_tau(4.0),
        ])
        .unwrap()
    }

    fn uniform(a: &[f64]) -> CellTable {
        let k = a.len() as f64;
        CellTable::new(
            a.iter()
                .enumerate()
                .map(|(i, &v)| Cell::new(format!("{i}"), 1.0 / k, v, 1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(CellTable::new(vec![Cell::new("a", 0.5, 1.0, 1.0)]).is_err());
        assert!(CellTable::new(vec![Cell::new("a", 1.0, 1.0, 0.0)]).is_err());
        assert!(CellTable::new(vec![Cell::new("a", 1.0, 1.0, 1.5)]).is_err());
        assert!(CellTable::new(vec![]).is_err());
    }

    #[test]
    fn sign_normalization() {
        let d = illustrative();
        assert_eq!(normalize_sign(&d).unwrap(), d);

        let flipped = normalize_sign(&uniform(&[-1.0, -1.0])).unwrap();
        assert_eq!(flipped.weights(), vec![1.0, 1.0]);

        let zero = uniform(&[1.0, -1.0]);
        assert!(matches!(normalize_sign(&zero), Err(AuditError::DegenerateWeights)));
    }

    #[test]
    fn mu_values() {
        assert!((mu(&illustrative()).unwrap() - 3.2).abs() < 1e-12);

        let d = uniform(&[1.0, -0.5, 3.0]).with_tau(&[1.5, 1.5, 1.5]).unwrap();
        assert!((mu(&d).unwrap() - 1.5).abs() < 1e-14);

        let single = CellTable::new(vec![Cell::new("x", 1.0, 0.3, 1.0).with_tau(5.0)]).unwrap();
        assert_eq!(mu(&single).unwrap(), 5.0);

        let missing = uniform(&[1.0, 2.0]);
        assert!(matches!(mu(&missing), Err(AuditError::MissingTau(_))));
    }

    #[test]
    fn tau_ignored_outside_base_population() {
        let d = CellTable::new(vec![
            Cell::new("a", 0.5, 1.0, 1.0).with_tau(2.0),
            Cell::new("b", 0.5, 1.0, 0.0),
        ])
        .unwrap();
        assert_eq!(mu(&d).unwrap(), 2.0);
    }

    #[test]
    fn discrete_weight_values() {
        let w = discrete_weights(&illustrative()).unwrap();
        assert!((w[0] - 0.4).abs() < 1e-12 && (w[1] - 0.6).abs() < 1e-12);

        let d = CellTable::new(vec![
            Cell::new("a", 0.3, 2.0, 1.0),
            Cell::new("b", 0.7, 2.0, 1.0),
        ])
        .unwrap();
        let w = discrete_weights(&d).unwrap();
        assert!((w[0] - 0.3).abs() < 1e-15 && (w[1] - 0.7).abs() < 1e-15);

        let w = discrete_weights(&uniform(&[1.0, -1.0, 1.0])).unwrap();
        for (got, want) in w.iter().zip([1.0, -1.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_round_trip_through_masses() {
        let d = illustrative();
        let w = discrete_weights(&d).unwrap();
        let recovered: Vec<f64> = w.iter().zip(d.cells()).map(|(w, c)| w / c.p).collect();
        let again = discrete_weights(&d.with_weights(&recovered).unwrap()).unwrap();
        for (x, y) in w.iter().zip(&again) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn profiles() {
        let d = illustrative();
        let rule = SubpopulationRule::new(vec![1.0, 0.375], 0).unwrap();
        let share = subpop_profile(&d, &rule, &[1.0, 0.0]).unwrap();
        assert!((share - 0.4).abs() < 1e-12);

        let full = subpop_profile(&d, &SubpopulationRule::full(2), &[1.0, 2.0]).unwrap();
        assert!((full - 1.8).abs() < 1e-12);

        let rule = SubpopulationRule::new(vec![1.0, 0.0], 0).unwrap();
        assert_eq!(subpop_profile(&d, &rule, &[1.0, 2.0]).unwrap(), 1.0);

        let empty = SubpopulationRule::new(vec![0.0, 0.0], 0).unwrap();
        assert!(matches!(subpop_profile(&d, &empty, &[1.0, 2.0]), Err(AuditError::EmptySubpopulation)));
        assert!(SubpopulationRule::new(vec![1.2], 0).is_err());
    }

    #[test]
    fn realization() {
        let d = illustrative();
        let draws = realize_subpop(&d, &SubpopulationRule::full(2), 100).unwrap();
        assert!(draws.iter().all(|r| r.w0 && r.in_subpop));

        let half = SubpopulationRule::new(vec![0.5, 0.5], 11).unwrap();
        let draws = realize_subpop(&d, &half, 100_000).unwrap();
        let share = draws.iter().filter(|r| r.in_subpop).count() as f64 / 1e5;
        assert!((share - 0.5).abs() < 0.01);

        assert_eq!(draws, realize_subpop(&d, &half, 100_000).unwrap());
    }

    #[test]
    fn coords_from_labels() {
        assert_eq!(parse_coords("2"), Some(vec![2.0]));
        assert_eq!(parse_coords("0.5;1"), Some(vec![0.5, 1.0]));
        assert_eq!(parse_coords("north"), None);
    }
}
