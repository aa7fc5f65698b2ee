//! Implied weight functions of common estimands.
//!
//! Each constructor turns an identified first-stage object (propensity
//! scores, instrument moments, the distribution of adoption dates) into a
//! [`CellTable`] whose `a` and `w0` columns represent the estimand as a
//! weighted average of CATEs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::model::{Cell, CellTable, PROB_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityCell {
    pub label: String,
    pub mass: f64,
    /// P(D = 1 | X = x).
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityTable {
    pub cells: Vec<PropensityCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvCell {
    pub label: String,
    pub mass: f64,
    /// P(Z = 1 | X = x).
    pub pz: f64,
    /// cov(D, Z | X = x).
    pub cov_dz: f64,
    /// Complier share P(D(1) > D(0) | X = x).
    pub pc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvCellTable {
    pub cells: Vec<IvCell>,
}

fn check_masses<'a>(masses: impl Iterator<Item = (&'a str, f64)>) -> Result<()> {
    let mut total = 0.0;
    for (label, m) in masses {
        if !(m > 0.0) {
            return Err(AuditError::InvalidInput(format!("cell `{label}` has nonpositive mass {m}")));
        }
        total += m;
    }
    if (total - 1.0).abs() > PROB_TOL {
        return Err(AuditError::InvalidInput(format!("cell masses sum to {total}, not 1")));
    }
    Ok(())
}

fn check_overlap(label: &str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(AuditError::OverlapViolation { label: label.to_string(), value })
    }
}

impl PropensityTable {
    pub fn new(cells: Vec<PropensityCell>) -> Result<Self> {
        check_masses(cells.iter().map(|c| (c.label.as_str(), c.mass)))?;
        Ok(PropensityTable { cells })
    }

    /// P(D = 1).
    pub fn treated_share(&self) -> f64 {
        self.cells.iter().map(|c| c.mass * c.p).sum()
    }

    fn build(&self, f: impl Fn(f64) -> (f64, f64)) -> Result<CellTable> {
        let mut cells = Vec::with_capacity(self.cells.len());
        for c in &self.cells {
            check_overlap(&c.label, c.p)?;
            let (w0, a) = f(c.p);
            cells.push(Cell::new(c.label.clone(), c.mass, a, w0));
        }
        CellTable::new(cells)
    }
}

impl IvCellTable {
    pub fn new(cells: Vec<IvCell>) -> Result<Self> {
        check_masses(cells.iter().map(|c| (c.label.as_str(), c.mass)))?;
        for c in &cells {
            check_overlap(&c.label, c.pz)?;
            if !(0.0..=1.0).contains(&c.pc) {
                return Err(AuditError::InvalidInput(format!(
                    "cell `{}` has complier share {} outside [0, 1]",
                    c.label, c.pc
                )));
            }
        }
        Ok(IvCellTable { cells })
    }

    fn build(&self, a: impl Fn(&IvCell) -> f64) -> Result<CellTable> {
        let cells = self
            .cells
            .iter()
            .map(|c| Cell::new(c.label.clone(), c.mass, a(c), c.pc))
            .collect();
        CellTable::new(cells).map_err(|_| AuditError::NoCompliers)
    }
}

/// OLS coefficient on `D` in a regression on `(1, D, X)`, read as an ATE:
/// `a(x) = p(x)(1 - p(x))`, `w0 = 1`.
pub fn ols_ate_design(pt: &PropensityTable) -> Result<CellTable> {
    pt.build(|p| (1.0, p * (1.0 - p)))
}

/// OLS read as an ATT: `w0(x) = p(x)`, `a(x) = 1 - p(x)`.
pub fn ols_att_design(pt: &PropensityTable) -> Result<CellTable> {
    pt.build(|p| (p, 1.0 - p))
}

/// OLS read as an ATU: `w0(x) = 1 - p(x)`, `a(x) = p(x)`.
pub fn ols_atu_design(pt: &PropensityTable) -> Result<CellTable> {
    pt.build(|p| (1.0 - p, p))
}

/// Noninteracted IV: `a(x) = var(Z | X = x)` over compliers.
pub fn iv_design(iv: &IvCellTable) -> Result<CellTable> {
    if iv.cells.iter().all(|c| c.pc * c.mass == 0.0) {
        return Err(AuditError::NoCompliers);
    }
    iv.build(|c| c.pz * (1.0 - c.pz))
}

/// Saturated 2SLS: `a(x) = |cov(D, Z | X = x)|` over compliers.
pub fn tsls_design(iv: &IvCellTable) -> Result<CellTable> {
    if !iv.cells.iter().any(|c| c.pc > 0.0 && c.cov_dz != 0.0) {
        return Err(AuditError::NoCompliers);
    }
    iv.build(|c| c.cov_dz.abs())
}

/// First treated period; `Never` sorts after every finite period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Period(usize),
    Never,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Period(g) => write!(f, "{g}"),
            Group::Never => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Group {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "inf" {
            return Ok(Group::Never);
        }
        s.parse::<usize>()
            .map(Group::Period)
            .map_err(|_| AuditError::InvalidInput(format!("bad group `{s}`, expected an integer or `inf`")))
    }
}

impl Serialize for Group {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Group {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(usize),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(g) => Ok(Group::Period(g)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Distribution of the adoption date `G` in a staggered design with
/// absorbing treatment `D_t = 1(G <= t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGroups")]
pub struct GroupDistribution {
    periods: usize,
    /// P(G = g) for g = 2..=T, indexed from `g = 2`.
    treated: Vec<f64>,
    never: f64,
}

#[derive(Deserialize)]
struct RawGroups {
    periods: usize,
    treated: Vec<f64>,
    never: f64,
}

impl TryFrom<RawGroups> for GroupDistribution {
    type Error = AuditError;

    fn try_from(r: RawGroups) -> Result<Self> {
        GroupDistribution::new(r.periods, r.treated, r.never)
    }
}

impl GroupDistribution {
    /// `treated[i]` is P(G = i + 2).
    pub fn new(periods: usize, treated: Vec<f64>, never: f64) -> Result<Self> {
        if periods < 2 {
            return Err(AuditError::InvalidInput(format!("need T >= 2 periods, got {periods}")));
        }
        if treated.len() != periods - 1 {
            return Err(AuditError::DimensionMismatch { expected: periods - 1, got: treated.len() });
        }
        if treated.iter().chain([&never]).any(|s| !(*s >= 0.0)) {
            return Err(AuditError::InvalidInput("group shares must be nonnegative".into()));
        }
        let total: f64 = treated.iter().sum::<f64>() + never;
        if (total - 1.0).abs() > PROB_TOL {
            return Err(AuditError::InvalidInput(format!("group shares sum to {total}, not 1")));
        }
        Ok(GroupDistribution { periods, treated, never })
    }

    /// Build from `(group, share)` pairs; unlisted groups get share zero.
    pub fn from_pairs(periods: usize, pairs: &[(Group, f64)]) -> Result<Self> {
        let mut treated = vec![0.0; periods.saturating_sub(1)];
        let mut never = 0.0;
        for &(g, s) in pairs {
            match g {
                Group::Never => never += s,
                Group::Period(t) if (2..=periods).contains(&t) => treated[t - 2] += s,
                Group::Period(t) => {
                    return Err(AuditError::InvalidInput(format!(
                        "group {t} outside the support {{2, ..., {periods}}} and inf"
                    )))
                }
            }
        }
        Self::new(periods, treated, never)
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn share(&self, g: Group) -> f64 {
        match g {
            Group::Never => self.never,
            Group::Period(t) if (2..=self.periods).contains(&t) => self.treated[t - 2],
            Group::Period(_) => 0.0,
        }
    }

    /// Groups with positive share, in increasing order.
    pub fn support(&self) -> Vec<Group> {
        let mut out: Vec<Group> = (2..=self.periods)
            .map(Group::Period)
            .filter(|&g| self.share(g) > 0.0)
            .collect();
        if self.never > 0.0 {
            out.push(Group::Never);
        }
        out
    }

    pub fn pairs(&self) -> Vec<(Group, f64)> {
        (2..=self.periods)
            .map(Group::Period)
            .chain([Group::Never])
            .map(|g| (g, self.share(g)))
            .collect()
    }

    fn has_treated(&self) -> bool {
        self.treated.iter().any(|&s| s > 0.0)
    }

    /// F_G(t) = P(G <= t).
    pub fn cdf(&self, t: usize) -> f64 {
        (2..=t.min(self.periods)).map(|g| self.treated[g - 2]).sum()
    }

    /// E[D | G = g] = (T - g + 1) / T, zero for the never treated.
    pub fn mean_d_given_g(&self, g: Group) -> f64 {
        match g {
            Group::Never => 0.0,
            Group::Period(t) => (self.periods + 1).saturating_sub(t) as f64 / self.periods as f64,
        }
    }

    /// E[D | P = t] = F_G(t).
    pub fn mean_d_given_period(&self, t: usize) -> f64 {
        self.cdf(t)
    }

    /// E[D].
    pub fn mean_d(&self) -> f64 {
        (2..=self.periods)
            .map(|t| self.treated[t - 2] * self.mean_d_given_g(Group::Period(t)))
            .sum()
    }
}

fn cell_label(g: Group, t: usize) -> String {
    format!("g={g},t={t}")
}

/// TWFE as a weighted average of group-time effects, `X = (G, P)` with
/// `W0 = D`. Weights can be negative.
pub fn twfe_cdh_design(gd: &GroupDistribution) -> Result<CellTable> {
    if !gd.has_treated() {
        return Err(AuditError::NoTreatedGroups);
    }
    let big_t = gd.periods();
    let mean_d = gd.mean_d();
    let mut cells = Vec::new();
    for g in gd.support() {
        let share = gd.share(g);
        let d_g = gd.mean_d_given_g(g);
        for t in 1..=big_t {
            let a = 1.0 - d_g - gd.mean_d_given_period(t) + mean_d;
            let treated = matches!(g, Group::Period(s) if s <= t);
            let w0 = if treated { 1.0 } else { 0.0 };
            cells.push(Cell::new(cell_label(g, t), share / big_t as f64, a, w0));
        }
    }
    CellTable::new(cells)
}

/// Weight of group `g` under time-constant group effects:
/// `P(D=0 | G=g) (P(D=0 | P>=g) + P(D=1 | P<g))`.
fn twfe_h_weight(gd: &GroupDistribution, g: usize) -> f64 {
    let big_t = gd.periods();
    let untreated = 1.0 - gd.mean_d_given_g(Group::Period(g));
    let later: f64 = (g..=big_t).map(|t| gd.cdf(t)).sum::<f64>() / (big_t - g + 1) as f64;
    let earlier: f64 = (1..g).map(|t| gd.cdf(t)).sum::<f64>() / (g - 1) as f64;
    untreated * ((1.0 - later) + earlier)
}

/// TWFE with time-constant group effects, `X = G` and `W0 = D`.
///
/// Treated groups get `w0(g) = E[D | G = g]` and a nonnegative weight. The
/// never-treated group, when present, is kept as a `w0 = 0` cell so that
/// masses sum to one and `P(W0 = 1) = P(D = 1)`.
pub fn twfe_h_design(gd: &GroupDistribution) -> Result<CellTable> {
    if !gd.has_treated() {
        return Err(AuditError::NoTreatedGroups);
    }
    let cells = gd
        .support()
        .into_iter()
        .map(|g| match g {
            Group::Period(t) => Cell::new(format!("g={g}"), gd.share(g), twfe_h_weight(gd, t), gd.mean_d_given_g(g)),
            Group::Never => Cell::new("g=inf", gd.share(g), 0.0, 0.0),
        })
        .collect();
    CellTable::new(cells)
}

/// Group weights from the decomposition into 2x2 comparisons,
/// `E[D] - E[D|G=k] + P(G>k) (1 - E[D|G>k] / E[D|G=k])`.
///
/// Only used to cross-check [`twfe_h_design`].
pub fn twfe_gb_weights(gd: &GroupDistribution) -> Result<Vec<(Group, f64)>> {
    if !gd.has_treated() {
        return Err(AuditError::NoTreatedGroups);
    }
    let mean_d = gd.mean_d();
    let weights = gd
        .support()
        .into_iter()
        .filter(|g| *g != Group::Never)
        .map(|g| {
            let d_k = gd.mean_d_given_g(g);
            let later: Vec<Group> = gd.support().into_iter().filter(|&j| j > g).collect();
            let p_later: f64 = later.iter().map(|&j| gd.share(j)).sum();
            let contrast = if p_later > 0.0 {
                let d_later = later.iter().map(|&j| gd.share(j) * gd.mean_d_given_g(j)).sum::<f64>() / p_later;
                p_later * (1.0 - d_later / d_k)
            } else {
                0.0
            };
            (g, mean_d - d_k + contrast)
        })
        .collect();
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mu;

    fn pt(ps: &[f64], masses: &[f64]) -> PropensityTable {
        PropensityTable::new(
            ps.iter()
                .zip(masses)
                .enumerate()
                .map(|(i, (&p, &m))| PropensityCell { label: format!("{}", i + 1), mass: m, p })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ols_weights() {
        let d = ols_ate_design(&pt(&[0.4, 0.1], &[0.2, 0.8])).unwrap();
        assert!((d.cells()[0].a - 0.24).abs() < 1e-15);
        assert!((d.cells()[1].a - 0.09).abs() < 1e-15);
        assert!(d.is_full_population());

        let d = ols_ate_design(&pt(&[0.5], &[1.0])).unwrap();
        assert_eq!(d.cells()[0].a, 0.25);

        assert!(matches!(
            ols_ate_design(&pt(&[0.0, 0.5], &[0.5, 0.5])),
            Err(AuditError::OverlapViolation { .. })
        ));
    }

    #[test]
    fn att_atu_are_mirrors() {
        let table = pt(&[0.4], &[1.0]);
        let att = ols_att_design(&table).unwrap();
        assert!((att.cells()[0].w0 - 0.4).abs() < 1e-15 && (att.cells()[0].a - 0.6).abs() < 1e-15);

        let atu = ols_atu_design(&table).unwrap();
        let relabeled = ols_att_design(&pt(&[0.6], &[1.0])).unwrap();
        assert!((atu.cells()[0].w0 - relabeled.cells()[0].w0).abs() < 1e-15);
        assert!((atu.cells()[0].a - relabeled.cells()[0].a).abs() < 1e-15);

        let sym = ols_atu_design(&pt(&[0.5], &[1.0])).unwrap();
        assert_eq!((sym.cells()[0].w0, sym.cells()[0].a), (0.5, 0.5));

        assert!(ols_att_design(&pt(&[1.0], &[1.0])).is_err());
        assert!(ols_atu_design(&pt(&[0.0], &[1.0])).is_err());
    }

    fn iv_table(rows: &[(f64, f64, f64, f64)]) -> IvCellTable {
        IvCellTable::new(
            rows.iter()
                .enumerate()
                .map(|(i, &(mass, pz, cov_dz, pc))| IvCell { label: format!("{i}"), mass, pz, cov_dz, pc })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn iv_and_tsls_weights() {
        let iv = iv_table(&[(0.5, 0.5, -0.1, 0.4), (0.5, 0.3, 0.05, 0.2)]);
        let d = iv_design(&iv).unwrap();
        assert_eq!(d.cells()[0].a, 0.25);
        assert!((d.cells()[1].a - 0.21).abs() < 1e-15);
        assert_eq!(d.cells()[1].w0, 0.2);

        let d = tsls_design(&iv).unwrap();
        assert_eq!(d.cells()[0].a, 0.1);

        let none = iv_table(&[(1.0, 0.5, 0.0, 0.0)]);
        assert!(matches!(iv_design(&none), Err(AuditError::NoCompliers)));
        assert!(matches!(tsls_design(&none), Err(AuditError::NoCompliers)));
    }

    #[test]
    fn group_parsing() {
        assert_eq!("inf".parse::<Group>().unwrap(), Group::Never);
        assert_eq!(" 3".parse::<Group>().unwrap(), Group::Period(3));
        assert!("x".parse::<Group>().is_err());
        assert!(Group::Period(100) < Group::Never);
    }

    #[test]
    fn cdh_two_period_weight() {
        let gd = GroupDistribution::new(2, vec![0.5], 0.5).unwrap();
        let d = twfe_cdh_design(&gd).unwrap();
        let treated: Vec<_> = d.cells().iter().filter(|c| c.w0 == 1.0).collect();
        assert_eq!(treated.len(), 1);
        assert!((treated[0].a - 0.25).abs() < 1e-15);
        assert_eq!(d.len(), 4);
    }

    #[test]
    fn no_treated_groups() {
        let gd = GroupDistribution::new(3, vec![0.0, 0.0], 1.0).unwrap();
        assert!(matches!(twfe_cdh_design(&gd), Err(AuditError::NoTreatedGroups)));
        assert!(matches!(twfe_h_design(&gd), Err(AuditError::NoTreatedGroups)));
        assert!(matches!(twfe_gb_weights(&gd), Err(AuditError::NoTreatedGroups)));
    }

    #[test]
    fn h_weights_at_balanced_point() {
        let gd = GroupDistribution::new(3, vec![1.0 / 6.0, 2.0 / 3.0], 1.0 / 6.0).unwrap();
        let d = twfe_h_design(&gd).unwrap();
        assert!((d.cells()[0].a - 1.0 / 6.0).abs() < 1e-15);
        assert!((d.cells()[1].a - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(d.cells()[2].w0, 0.0);

        let gd = GroupDistribution::new(3, vec![1.0 / 3.0, 1.0 / 3.0], 1.0 / 3.0).unwrap();
        let d = twfe_h_design(&gd).unwrap();
        assert!((d.cells()[0].a - d.cells()[1].a).abs() > 1e-3);
    }

    #[test]
    fn gb_matches_single_group() {
        let gd = GroupDistribution::new(4, vec![0.0, 0.6, 0.0], 0.4).unwrap();
        let h = twfe_h_design(&gd).unwrap();
        let gb = twfe_gb_weights(&gd).unwrap();
        assert_eq!(gb.len(), 1);
        assert!(gb[0].1 > 0.0);
        assert!((gb[0].1 - h.cells()[0].a).abs() < 1e-12);
    }

    #[test]
    fn staggered_late_adoption_has_negative_weights() {
        // heavy late adoption, no never-treated group
        let gd = GroupDistribution::new(3, vec![0.2, 0.8], 0.0).unwrap();
        let d = twfe_cdh_design(&gd).unwrap();
        assert!(d.cells().iter().any(|c| c.w0 > 0.0 && c.a < 0.0));
    }

    #[test]
    fn cdh_and_h_agree_for_time_constant_effects() {
        let gd = GroupDistribution::new(4, vec![0.2, 0.3, 0.1], 0.4).unwrap();
        let tau_g = |g: &str| match g {
            "2" => 1.0,
            "3" => -2.0,
            "4" => 0.5,
            _ => 0.0,
        };
        let cdh = twfe_cdh_design(&gd).unwrap();
        let tau: Vec<f64> = cdh
            .cells()
            .iter()
            .map(|c| tau_g(c.label.trim_start_matches("g=").split(',').next().unwrap()))
            .collect();
        let h = twfe_h_design(&gd).unwrap();
        let tau_h: Vec<f64> = h.cells().iter().map(|c| tau_g(c.label.trim_start_matches("g="))).collect();
        let a = mu(&cdh.with_tau(&tau).unwrap()).unwrap();
        let b = mu(&h.with_tau(&tau_h).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}
