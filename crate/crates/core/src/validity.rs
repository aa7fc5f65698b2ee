//! Existence of causal representations and internal-validity measures.
//!
//! Two questions are answered for a design:
//!
//! * Is the estimand an average treatment effect over some regular
//!   subpopulation of `W0 = 1`, for every CATE function or for the given one?
//! * How large can that subpopulation be, as a share of `W0 = 1`?
//!
//! The uniform measure is `E[a | W0 = 1] / a_max`. The measure for a known
//! CATE trims the tail of `tau` above (or below) a threshold, with partial
//! inclusion of the threshold atom. It is computed three ways: the closed
//! form, the iterative mass-reduction algorithm, and a vertex enumeration
//! that serves as an independent oracle.

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::lp;
use crate::model::{self, normalize_sign, CellTable, SubpopulationRule, NEG_TOL, PROB_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub exists: bool,
    /// Largest P(W* = 1 | W0 = 1).
    pub p_internal: f64,
    /// Largest P(W* = 1).
    pub p_representative: f64,
    pub a_max: Option<f64>,
    pub inclusion: Option<SubpopulationRule>,
}

/// CATE values with their probability masses conditional on `W0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauSample {
    pub values: Vec<f64>,
    pub masses: Vec<f64>,
}

impl TauSample {
    pub fn new(values: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if values.len() != masses.len() {
            return Err(AuditError::DimensionMismatch { expected: values.len(), got: masses.len() });
        }
        if values.is_empty() {
            return Err(AuditError::InvalidInput("empty CATE sample".into()));
        }
        if masses.iter().any(|m| !(*m > 0.0)) || values.iter().any(|v| !v.is_finite()) {
            return Err(AuditError::InvalidInput("CATE masses must be positive and values finite".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(AuditError::InvalidInput(format!("CATE masses sum to {total}, not 1")));
        }
        Ok(TauSample { values, masses })
    }

    /// Equal-mass empirical distribution of draws.
    pub fn from_draws(values: Vec<f64>) -> Result<Self> {
        let n = values.len() as f64;
        let masses = vec![1.0 / n; values.len()];
        Self::new(values, masses)
    }

    /// CATEs of the base-population cells of a design.
    pub fn from_design(design: &CellTable) -> Result<(Self, Vec<usize>)> {
        let total = design.pop_w0();
        let mut values = Vec::new();
        let mut masses = Vec::new();
        let mut index = Vec::new();
        for (k, c) in design.cells().iter().enumerate() {
            if c.base_mass() > 0.0 {
                values.push(c.tau.ok_or_else(|| AuditError::MissingTau(c.label.clone()))?);
                masses.push(c.base_mass() / total);
                index.push(k);
            }
        }
        Ok((TauSample { values, masses }, index))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.masses).map(|(v, m)| v * m).sum()
    }

    fn tolerance(&self, mu0: f64) -> f64 {
        let scale = self.values.iter().fold(mu0.abs(), |s, v| s.max(v.abs()));
        1e-12 * scale.max(1.0)
    }

    /// Centered values `tau - mu0`, with values within tolerance snapped to 0.
    fn centered(&self, mu0: f64) -> Vec<f64> {
        let tol = self.tolerance(mu0);
        self.values
            .iter()
            .map(|v| {
                let t = v - mu0;
                if t.abs() <= tol {
                    0.0
                } else {
                    t
                }
            })
            .collect()
    }

    pub fn contains(&self, mu0: f64) -> bool {
        let t = self.centered(mu0);
        t.iter().any(|&v| v <= 0.0) && t.iter().any(|&v| v >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimDirection {
    /// Keep CATEs below the threshold.
    Below,
    /// Keep CATEs above the threshold.
    Above,
    /// Keep everybody.
    None,
    /// `mu0` outside the CATE hull; no subpopulation exists.
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimSolution {
    pub direction: TrimDirection,
    /// Threshold on `tau - mu0` (`alpha+` when trimming above, `alpha-` when
    /// trimming below).
    pub alpha: Option<f64>,
    pub kept_mass: f64,
    /// Inclusion probability of units exactly at the threshold.
    pub atom_fraction: f64,
    pub e0: f64,
}

fn base_cells(design: &CellTable) -> impl Iterator<Item = &model::Cell> {
    design.cells().iter().filter(|c| c.base_mass() > 0.0)
}

/// Nonnegative weights on the base population: a causal representation
/// exists for every CATE function.
pub fn check_uniform_existence(design: &CellTable) -> Result<bool> {
    let design = normalize_sign(design)?;
    let ok = base_cells(&design).all(|c| c.a >= -NEG_TOL);
    Ok(ok)
}

/// Same as [`check_uniform_existence`]: an estimand of this form is weakly
/// causal exactly when its weights are nonnegative.
pub fn check_weakly_causal(design: &CellTable) -> Result<bool> {
    check_uniform_existence(design)
}

/// Estimand under the adversarial CATE `tau(x) = 1(a(x) < 0)`.
///
/// Every true effect is nonnegative, yet the result is strictly negative as
/// soon as some weight is negative.
pub fn adversarial_sign_check(design: &CellTable) -> Result<f64> {
    let design = normalize_sign(design)?;
    let tau: Vec<f64> = design.cells().iter().map(|c| if c.a < -NEG_TOL { 1.0 } else { 0.0 }).collect();
    model::mu(&design.with_tau(&tau)?)
}

/// Whether `mu(a, tau)` lies in the range of the CATE over `W0 = 1`.
pub fn check_fixed_existence(design: &CellTable) -> Result<bool> {
    let mu0 = model::mu(design)?;
    let (sample, _) = TauSample::from_design(design)?;
    Ok(sample.contains(mu0))
}

/// Existence for CATEs linear in the covariate: the weighted barycenter
/// `E[a X | W0 = 1] / E[a | W0 = 1]` must lie in the convex hull of the
/// covariate support.
pub fn check_linear_cate_existence(design: &CellTable) -> Result<bool> {
    let design = normalize_sign(design)?;
    let mut points: Vec<&[f64]> = Vec::new();
    for c in base_cells(&design) {
        let x = c.coords.as_deref().ok_or_else(|| AuditError::MissingNumericLabels(c.label.clone()))?;
        if let Some(first) = points.first() {
            if first.len() != x.len() {
                return Err(AuditError::DimensionMismatch { expected: first.len(), got: x.len() });
            }
        }
        points.push(x);
    }
    let dim = points[0].len();
    let den: f64 = base_cells(&design).map(|c| c.a * c.base_mass()).sum();
    let mut center = vec![0.0; dim];
    for (c, x) in base_cells(&design).zip(&points) {
        let w = c.a * c.base_mass() / den;
        for (m, xi) in center.iter_mut().zip(x.iter()) {
            *m += w * xi;
        }
    }
    let scale = points.iter().flat_map(|p| p.iter()).fold(1.0_f64, |s, v| s.max(v.abs()));
    let tol = 1e-10 * scale;
    if dim == 1 {
        let lo = points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        return Ok(center[0] >= lo - tol && center[0] <= hi + tol);
    }
    let owned: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
    Ok(lp::in_convex_hull(&owned, &center, tol))
}

/// Existence for CATEs with differences bounded by `k_bound`. A zero bound
/// means a constant CATE, represented by any weights.
pub fn check_bounded_difference_existence(design: &CellTable, k_bound: f64) -> Result<bool> {
    if !(k_bound >= 0.0) {
        return Err(AuditError::NegativeBound(k_bound));
    }
    if k_bound == 0.0 {
        return Ok(true);
    }
    check_uniform_existence(design)
}

/// Sharp bound on the subpopulation size uniformly over CATE functions.
pub fn uniform_internal_validity(design: &CellTable) -> Result<ValidityReport> {
    let design = normalize_sign(design)?;
    let a_max = design.a_max();
    if !base_cells(&design).all(|c| c.a >= -NEG_TOL) {
        return Ok(ValidityReport {
            exists: false,
            p_internal: 0.0,
            p_representative: 0.0,
            a_max: Some(a_max),
            inclusion: None,
        });
    }
    if !(a_max > 0.0) {
        return Err(AuditError::DegenerateWeights);
    }
    let pop = design.pop_w0();
    let inclusion: Vec<f64> = design
        .cells()
        .iter()
        .map(|c| if c.base_mass() > 0.0 { (c.a.max(0.0) / a_max).min(1.0) } else { 0.0 })
        .collect();
    // Average the inclusion probabilities rather than dividing E[a] by a_max,
    // so that constant weights give exactly one.
    let kept: f64 = design.cells().iter().zip(&inclusion).map(|(c, w)| w * c.base_mass()).sum();
    let p_internal = (kept / pop).min(1.0);
    Ok(ValidityReport {
        exists: true,
        p_internal,
        p_representative: p_internal * pop,
        a_max: Some(a_max),
        inclusion: Some(SubpopulationRule { inclusion, seed: 0 }),
    })
}

/// Keep mass from the bottom of `t` until the kept mean of `t` is zero.
/// Requires `sum m t > 0`. Returns (kept mass, threshold, atom fraction,
/// inclusion per entry).
fn trim_from_top(t: &[f64], m: &[f64]) -> (f64, f64, f64, Vec<f64>) {
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.sort_by(|&i, &j| t[i].total_cmp(&t[j]).then(i.cmp(&j)));

    let mut running = 0.0;
    let mut below = 0.0;
    let mut pos = 0;
    let mut found = None;
    while pos < order.len() {
        let v = t[order[pos]];
        let mut end = pos;
        let mut atom = 0.0;
        while end < order.len() && t[order[end]] == v {
            atom += m[order[end]];
            end += 1;
        }
        running += v * atom;
        if v > 0.0 && running >= 0.0 {
            found = Some((v, atom, below));
            break;
        }
        below += atom;
        pos = end;
    }
    // The largest atom always satisfies the crossing when sum m t > 0.
    let (alpha, atom, below) = found.expect("positive total guarantees a crossing");
    let kept = below + atom - running / alpha;
    let fraction = (1.0 - running / (alpha * atom)).clamp(0.0, 1.0);
    let inclusion = t
        .iter()
        .map(|&v| match v.partial_cmp(&alpha) {
            Some(std::cmp::Ordering::Less) => 1.0,
            Some(std::cmp::Ordering::Equal) => fraction,
            _ => 0.0,
        })
        .collect();
    (kept, alpha, fraction, inclusion)
}

/// Closed-form sharp bound for a known CATE distribution.
///
/// Returns the report (with `pop_w0` used for representativeness), the trim
/// description, and the inclusion probability of each sample entry.
pub fn fixed_tau_from_sample(sample: &TauSample, mu0: f64, pop_w0: f64) -> (ValidityReport, TrimSolution, Vec<f64>) {
    let e0 = sample.mean();
    let k = sample.values.len();
    if !sample.contains(mu0) {
        let report = ValidityReport { exists: false, p_internal: 0.0, p_representative: 0.0, a_max: None, inclusion: None };
        let trim = TrimSolution { direction: TrimDirection::Infeasible, alpha: None, kept_mass: 0.0, atom_fraction: 0.0, e0 };
        return (report, trim, vec![0.0; k]);
    }
    let t = sample.centered(mu0);
    let gap: f64 = t.iter().zip(&sample.masses).map(|(t, m)| t * m).sum();
    let (direction, kept, alpha, fraction, inclusion) = if gap.abs() <= sample.tolerance(mu0) {
        (TrimDirection::None, 1.0, None, 1.0, vec![1.0; k])
    } else if gap > 0.0 {
        let (kept, alpha, fraction, inc) = trim_from_top(&t, &sample.masses);
        (TrimDirection::Below, kept, Some(alpha), fraction, inc)
    } else {
        let flipped: Vec<f64> = t.iter().map(|v| -v).collect();
        let (kept, alpha, fraction, inc) = trim_from_top(&flipped, &sample.masses);
        (TrimDirection::Above, kept, Some(-alpha), fraction, inc)
    };
    let kept = kept.clamp(0.0, 1.0);
    let report = ValidityReport {
        exists: true,
        p_internal: kept,
        p_representative: kept * pop_w0,
        a_max: None,
        inclusion: None,
    };
    let trim = TrimSolution { direction, alpha, kept_mass: kept, atom_fraction: fraction, e0 };
    (report, trim, inclusion)
}

/// Sharp bound on the subpopulation size given the design's CATE.
///
/// `mu0` defaults to the estimand `mu(a, tau)` itself.
pub fn fixed_tau_internal_validity(design: &CellTable, mu0: Option<f64>) -> Result<(ValidityReport, TrimSolution)> {
    let mu0 = match mu0 {
        Some(v) => v,
        None => model::mu(design)?,
    };
    let (sample, index) = TauSample::from_design(design)?;
    let (mut report, trim, inc) = fixed_tau_from_sample(&sample, mu0, design.pop_w0());
    if report.exists {
        let mut inclusion = vec![0.0; design.len()];
        for (&k, v) in index.iter().zip(inc) {
            inclusion[k] = v;
        }
        report.inclusion = Some(SubpopulationRule { inclusion, seed: 0 });
    }
    report.a_max = Some(design.a_max());
    Ok((report, trim))
}

fn lp_inputs(design: &CellTable, mu0: f64) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let (sample, _) = TauSample::from_design(design)?;
    let tol = sample.tolerance(mu0);
    let t = sample.values.iter().map(|v| v - mu0).collect();
    Ok((t, sample.masses, tol))
}

/// The iterative mass-reduction algorithm on CATE-sorted cells.
///
/// Starts from the whole base population and zeroes out (or partially
/// reduces) the cell with the most extreme CATE on the side that pushes
/// the average away from `mu0`, until the constraint holds.
pub fn fixed_tau_lp(design: &CellTable, mu0: f64) -> Result<f64> {
    let (t, q, tol) = lp_inputs(design, mu0)?;
    let hull_ok = t.iter().any(|&v| v <= tol) && t.iter().any(|&v| v >= -tol);
    if !hull_ok {
        return Err(AuditError::InfeasibleProgram(mu0));
    }
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.sort_by(|&i, &j| t[i].total_cmp(&t[j]).then(i.cmp(&j)));
    let t: Vec<f64> = order.iter().map(|&i| t[i]).collect();
    let q: Vec<f64> = order.iter().map(|&i| q[i]).collect();

    let k = t.len();
    let mut f = q.clone();
    let mut full = vec![true; k];
    for _ in 0..=k {
        let s: f64 = t.iter().zip(&f).map(|(t, f)| t * f).sum();
        if s.abs() <= tol {
            return Ok(f.iter().sum());
        }
        if s > 0.0 {
            let Some(star) = (0..k).rev().find(|&i| full[i]) else { break };
            let rest: f64 = (0..star).map(|i| t[i] * q[i]).sum();
            f[star] = (-rest / t[star]).max(0.0);
            full[star] = false;
        } else {
            let Some(star) = (0..k).find(|&i| full[i]) else { break };
            let rest: f64 = (star + 1..k).map(|i| t[i] * q[i]).sum();
            f[star] = (-rest / t[star]).max(0.0);
            full[star] = false;
        }
    }
    Err(AuditError::InfeasibleProgram(mu0))
}

/// Largest cell count accepted by [`fixed_tau_bruteforce`].
pub const BRUTEFORCE_MAX_CELLS: usize = 12;

/// Vertex enumeration of `max sum f` subject to `0 <= f <= q` and
/// `sum (tau - mu0) f = 0`.
///
/// A vertex of this polytope has at most one coordinate strictly between
/// its bounds, so it suffices to try every assignment of the other
/// coordinates to `{0, q_k}` and solve for the free one.
pub fn fixed_tau_bruteforce(design: &CellTable, mu0: f64) -> Result<f64> {
    let (t, q, tol) = lp_inputs(design, mu0)?;
    let k = t.len();
    if k > BRUTEFORCE_MAX_CELLS {
        return Err(AuditError::InstanceTooLarge { k, max: BRUTEFORCE_MAX_CELLS });
    }
    let mut best = 0.0_f64;
    for pattern in 0u32..(1 << k) {
        let on = |i: usize| pattern & (1 << i) != 0;
        let (mut lhs, mut total) = (0.0, 0.0);
        for i in (0..k).filter(|&i| on(i)) {
            lhs += t[i] * q[i];
            total += q[i];
        }
        if lhs.abs() <= tol {
            best = best.max(total);
        }
        // free coordinate j, currently at its lower bound in the pattern
        for j in (0..k).filter(|&j| !on(j)) {
            if t[j] == 0.0 {
                continue;
            }
            let fj = -lhs / t[j];
            if fj >= 0.0 && fj <= q[j] {
                best = best.max(total + fj);
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cell;

    fn uniform(a: &[f64], tau: Option<&[f64]>) -> CellTable {
        let k = a.len() as f64;
        let cells = a
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = Cell::new(format!("{i}"), 1.0 / k, v, 1.0);
                match tau {
                    Some(t) => c.with_tau(t[i]),
                    None => c,
                }
            })
            .collect();
        CellTable::new(cells).unwrap()
    }

    fn illustrative() -> CellTable {
        CellTable::new(vec![Cell::new("1", 0.2, 0.24, 1.0), Cell::new("2", 0.8, 0.09, 1.0)]).unwrap()
    }

    #[test]
    fn uniform_existence() {
        assert!(check_uniform_existence(&illustrative()).unwrap());
        assert!(!check_uniform_existence(&uniform(&[1.0, -1.0, 1.0], None)).unwrap());
        assert!(matches!(check_uniform_existence(&uniform(&[0.0, 0.0], None)), Err(AuditError::DegenerateWeights)));
        assert!(check_uniform_existence(&uniform(&[1.0, -1e-13], None)).unwrap());
    }

    #[test]
    fn adversarial_values() {
        assert!((adversarial_sign_check(&uniform(&[1.0, -1.0, 1.0], None)).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(adversarial_sign_check(&illustrative()).unwrap(), 0.0);
        assert!((adversarial_sign_check(&uniform(&[2.0, -1.0], None)).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_existence() {
        // a = (3, 1) gives mu = 0.25
        let d = uniform(&[1.0, 3.0], Some(&[1.0, 0.0]));
        assert!(check_fixed_existence(&d).unwrap());

        let d = uniform(&[1.0, -0.4, 2.0], Some(&[0.7, 0.7, 0.7]));
        assert!(check_fixed_existence(&d).unwrap());

        let d = uniform(&[3.0, -1.0], Some(&[1.0, 0.0]));
        assert!((model::mu(&d).unwrap() - 1.5).abs() < 1e-12);
        assert!(!check_fixed_existence(&d).unwrap());

        assert!(matches!(check_fixed_existence(&uniform(&[1.0, 1.0], None)), Err(AuditError::MissingTau(_))));
    }

    #[test]
    fn linear_cate_existence() {
        let d = uniform(&[1.0, -1.0, 1.0], None);
        assert!(check_linear_cate_existence(&d).unwrap());

        let d = CellTable::new(vec![Cell::new("0", 0.5, -1.0, 1.0), Cell::new("1", 0.5, 3.0, 1.0)]).unwrap();
        assert!(!check_linear_cate_existence(&d).unwrap());

        let d = illustrative();
        assert!(check_linear_cate_existence(&d).unwrap());

        let d = CellTable::new(vec![Cell::new("a", 0.5, 1.0, 1.0), Cell::new("b", 0.5, 1.0, 1.0)]).unwrap();
        assert!(matches!(check_linear_cate_existence(&d), Err(AuditError::MissingNumericLabels(_))));
    }

    #[test]
    fn linear_cate_existence_vector_labels() {
        let corners = ["0;0", "1;0", "0;1"];
        let inside = CellTable::new(corners.iter().map(|l| Cell::new(*l, 1.0 / 3.0, 1.0, 1.0)).collect()).unwrap();
        assert!(check_linear_cate_existence(&inside).unwrap());

        // heavy negative weight on the origin pushes the barycenter outside
        let a = [-1.0, 1.0, 1.0];
        let outside = CellTable::new(corners.iter().zip(a).map(|(l, a)| Cell::new(*l, 1.0 / 3.0, a, 1.0)).collect()).unwrap();
        assert!(!check_linear_cate_existence(&outside).unwrap());
    }

    #[test]
    fn bounded_differences() {
        let neg = uniform(&[1.0, -1.0, 1.0], None);
        assert!(check_bounded_difference_existence(&neg, 0.0).unwrap());
        assert!(!check_bounded_difference_existence(&neg, 1.0).unwrap());
        assert!(check_bounded_difference_existence(&illustrative(), 1.0).unwrap());
        assert!(matches!(check_bounded_difference_existence(&neg, -1.0), Err(AuditError::NegativeBound(_))));
    }

    #[test]
    fn uniform_measure() {
        let r = uniform_internal_validity(&illustrative()).unwrap();
        assert!(r.exists);
        assert!((r.p_internal - 0.5).abs() < 1e-12);
        let inc = r.inclusion.unwrap().inclusion;
        assert!((inc[0] - 1.0).abs() < 1e-12 && (inc[1] - 0.375).abs() < 1e-12);

        let r = uniform_internal_validity(&uniform(&[0.3, 0.3, 0.3], None)).unwrap();
        assert!((r.p_internal - 1.0).abs() < 1e-15);

        let r = uniform_internal_validity(&uniform(&[1.0, -1.0, 1.0], None)).unwrap();
        assert!(!r.exists && r.p_internal == 0.0 && r.inclusion.is_none());
    }

    #[test]
    fn fixed_measure_worked_case() {
        let d = uniform(&[1.0, 1.0], Some(&[0.0, 1.0]));
        let (r, trim) = fixed_tau_internal_validity(&d, Some(0.25)).unwrap();
        assert_eq!(trim.direction, TrimDirection::Below);
        assert!((trim.alpha.unwrap() - 0.75).abs() < 1e-12);
        assert!((r.p_internal - 2.0 / 3.0).abs() < 1e-12);
        let inc = r.inclusion.unwrap().inclusion;
        assert!((inc[0] - 1.0).abs() < 1e-12 && (inc[1] - 1.0 / 3.0).abs() < 1e-12);

        assert!((fixed_tau_lp(&d, 0.25).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((fixed_tau_bruteforce(&d, 0.25).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_measure_mirror() {
        let d = uniform(&[1.0, 1.0], Some(&[0.0, 1.0]));
        let (r, trim) = fixed_tau_internal_validity(&d, Some(0.75)).unwrap();
        assert_eq!(trim.direction, TrimDirection::Above);
        assert!((trim.alpha.unwrap() + 0.75).abs() < 1e-12);
        assert!((r.p_internal - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_measure_edge_cases() {
        let d = uniform(&[1.0, 1.0], Some(&[0.0, 1.0]));
        let (r, trim) = fixed_tau_internal_validity(&d, Some(0.5)).unwrap();
        assert_eq!(trim.direction, TrimDirection::None);
        assert_eq!(r.p_internal, 1.0);
        assert_eq!(fixed_tau_lp(&d, 0.5).unwrap(), 1.0);
        assert_eq!(fixed_tau_bruteforce(&d, 0.5).unwrap(), 1.0);

        let (r, trim) = fixed_tau_internal_validity(&d, Some(1.5)).unwrap();
        assert!(!r.exists && r.p_internal == 0.0);
        assert_eq!(trim.direction, TrimDirection::Infeasible);
        assert!(matches!(fixed_tau_lp(&d, 1.5), Err(AuditError::InfeasibleProgram(_))));
        assert_eq!(fixed_tau_bruteforce(&d, 1.5).unwrap(), 0.0);

        let single = CellTable::new(vec![Cell::new("x", 1.0, 1.0, 1.0).with_tau(2.0)]).unwrap();
        assert_eq!(fixed_tau_lp(&single, 2.0).unwrap(), 1.0);

        // mu0 at the bottom of the hull keeps only the bottom atom
        let (r, _) = fixed_tau_internal_validity(&d, Some(0.0)).unwrap();
        assert!((r.p_internal - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_cate_is_fully_representative() {
        let d = uniform(&[1.0, -2.0, 5.0], Some(&[0.3, 0.3, 0.3]));
        let (r, _) = fixed_tau_internal_validity(&d, None).unwrap();
        assert_eq!(r.p_internal, 1.0);
    }

    #[test]
    fn atom_gets_partial_inclusion() {
        // tau values 0, 1, 1 with masses 1/4, 1/4, 1/2 and mu0 = 0.5
        let d = CellTable::new(vec![
            Cell::new("a", 0.25, 1.0, 1.0).with_tau(0.0),
            Cell::new("b", 0.25, 1.0, 1.0).with_tau(1.0),
            Cell::new("c", 0.5, 1.0, 1.0).with_tau(1.0),
        ])
        .unwrap();
        let (r, trim) = fixed_tau_internal_validity(&d, Some(0.5)).unwrap();
        assert!(trim.atom_fraction > 0.0 && trim.atom_fraction < 1.0);
        let inc = r.inclusion.unwrap().inclusion;
        assert_eq!(inc[1], inc[2]);
        let (sample, _) = TauSample::from_design(&d).unwrap();
        let moment: f64 = sample.values.iter().zip(&sample.masses).zip(&inc).map(|((v, m), w)| (v - 0.5) * m * w).sum();
        assert!(moment.abs() < 1e-12);
        assert!((r.p_internal - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tau_sample_path() {
        let s = TauSample::from_draws(vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let (r, trim, _) = fixed_tau_from_sample(&s, 0.25, 1.0);
        assert!((r.p_internal - 2.0 / 3.0).abs() < 1e-12);
        assert!((trim.e0 - 0.5).abs() < 1e-15);
        assert!(TauSample::new(vec![1.0], vec![0.5]).is_err());
    }

    #[test]
    fn bruteforce_size_limit() {
        let a = vec![1.0; 13];
        let tau: Vec<f64> = (0..13).map(|i| i as f64).collect();
        let d = uniform(&a, Some(&tau));
        assert!(matches!(fixed_tau_bruteforce(&d, 3.0), Err(AuditError::InstanceTooLarge { .. })));
    }
}
