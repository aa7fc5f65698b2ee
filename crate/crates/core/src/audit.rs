//! End-to-end audit of a population design and the report it produces.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bounds::{self, Interval, SignDecomposition, SupportBounds};
use crate::error::{AuditError, Result};
use crate::model::{self, CellTable, MomentSummary};
use crate::validity::{self, TrimSolution, ValidityReport, BRUTEFORCE_MAX_CELLS};

pub const SCHEMA_VERSION: u32 = 1;

/// Agreement tolerance between the fixed-CATE solvers.
const SOLVER_TOL: f64 = 1e-9;

/// How a population design was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignFamily {
    /// A cell table given directly.
    Cells,
    OlsAte,
    OlsAtt,
    OlsAtu,
    Iv,
    Tsls,
    /// TWFE over group-period cells.
    TwfeCdh,
    /// TWFE with time-constant group effects.
    TwfeH,
}

impl DesignFamily {
    pub const ALL: [DesignFamily; 8] = [
        DesignFamily::Cells,
        DesignFamily::OlsAte,
        DesignFamily::OlsAtt,
        DesignFamily::OlsAtu,
        DesignFamily::Iv,
        DesignFamily::Tsls,
        DesignFamily::TwfeCdh,
        DesignFamily::TwfeH,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DesignFamily::Cells => "cells",
            DesignFamily::OlsAte => "ols_ate",
            DesignFamily::OlsAtt => "ols_att",
            DesignFamily::OlsAtu => "ols_atu",
            DesignFamily::Iv => "iv",
            DesignFamily::Tsls => "tsls",
            DesignFamily::TwfeCdh => "twfe_cdh",
            DesignFamily::TwfeH => "twfe_h",
        }
    }
}

impl std::fmt::Display for DesignFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DesignFamily {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        DesignFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| AuditError::InvalidInput(format!("unknown family `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    /// Target value for the fixed-CATE measure; defaults to the estimand.
    pub mu0: Option<f64>,
    pub support: Option<SupportBounds>,
    /// Bound on CATE differences for the bounded-difference existence check.
    pub difference_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub label: String,
    pub p: f64,
    pub a: f64,
    pub w0: f64,
    pub tau: Option<f64>,
    /// Implied weight `a w0 p / E[a w0]`.
    pub omega: f64,
    /// Inclusion probability of the largest uniform subpopulation.
    pub inclusion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExistenceReport {
    pub uniform: bool,
    pub weakly_causal: bool,
    /// Estimand under `tau = 1(a < 0)`; negative exactly when some weight is.
    pub adversarial_mu: f64,
    pub linear_cate: Option<bool>,
    pub bounded_difference: Option<bool>,
    pub fixed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverAgreement {
    pub closed_form: f64,
    pub mass_reduction: f64,
    /// `None` above the enumeration size limit.
    pub vertex_enumeration: Option<f64>,
    pub max_gap: f64,
    pub agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedReport {
    pub mu0: f64,
    pub validity: ValidityReport,
    pub trim: TrimSolution,
    pub solvers: Option<SolverAgreement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub support: SupportBounds,
    /// From the uniform measure; needs the estimand value and nonnegative
    /// weights.
    pub uniform: Option<Interval>,
    /// From the fixed-CATE measure.
    pub fixed: Option<Interval>,
    /// Valid whatever the sign of the weights.
    pub general: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub family: DesignFamily,
    pub cells: Vec<CellReport>,
    pub moments: MomentSummary,
    pub existence: ExistenceReport,
    pub uniform: ValidityReport,
    pub decomposition: SignDecomposition,
    pub fixed: Option<FixedReport>,
    pub bounds: Option<BoundsReport>,
    /// Warnings and reasons for null fields.
    pub diagnostics: Vec<String>,
}

pub fn run_audit(design: &CellTable, family: DesignFamily, opts: &AuditOptions) -> Result<AuditReport> {
    let mut diagnostics = Vec::new();
    let normalized = model::normalize_sign(design)?;
    if normalized.cells().iter().zip(design.cells()).any(|(n, d)| n.a != d.a) {
        diagnostics.push("weights were sign-flipped so that E[a | W0 = 1] > 0".into());
    }
    let design = normalized;
    let moments = model::moment_summary(&design)?;
    let omega = model::discrete_weights(&design)?;
    let uniform = validity::uniform_internal_validity(&design)?;
    let has_tau = moments.mu.is_some();

    let linear_cate = match validity::check_linear_cate_existence(&design) {
        Ok(v) => Some(v),
        Err(AuditError::MissingNumericLabels(_)) | Err(AuditError::DimensionMismatch { .. }) => {
            diagnostics.push("linear-CATE check skipped: cell labels are not numeric".into());
            None
        }
        Err(e) => return Err(e),
    };
    let bounded_difference = opts
        .difference_bound
        .map(|k| validity::check_bounded_difference_existence(&design, k))
        .transpose()?;

    let fixed = if has_tau {
        let mu0 = opts.mu0.or(moments.mu).expect("mu present with tau");
        let (report, trim) = validity::fixed_tau_internal_validity(&design, Some(mu0))?;
        let solvers = if report.exists {
            let mass_reduction = validity::fixed_tau_lp(&design, mu0)?;
            let vertex = if validity::TauSample::from_design(&design)?.0.values.len() <= BRUTEFORCE_MAX_CELLS {
                Some(validity::fixed_tau_bruteforce(&design, mu0)?)
            } else {
                diagnostics.push(format!("vertex enumeration skipped: more than {BRUTEFORCE_MAX_CELLS} cells"));
                None
            };
            let cf = report.p_internal;
            let max_gap = [Some(mass_reduction), vertex].iter().flatten().map(|v| (v - cf).abs()).fold(0.0, f64::max);
            let agree = max_gap <= SOLVER_TOL;
            if !agree {
                diagnostics.push(format!("fixed-CATE solvers disagree by {max_gap:e}"));
            }
            Some(SolverAgreement { closed_form: cf, mass_reduction, vertex_enumeration: vertex, max_gap, agree })
        } else {
            diagnostics.push(format!("mu0 = {mu0} lies outside the CATE range; no subpopulation given tau0"));
            None
        };
        Some(FixedReport { mu0, validity: report, trim, solvers })
    } else {
        diagnostics.push("no CATE values supplied; fixed-CATE measure and estimand value are null".into());
        None
    };
    let fixed_exists = fixed.as_ref().map(|f| f.validity.exists);

    if !uniform.exists {
        diagnostics.push("negative weights on W0 = 1: no causal representation uniformly in tau0".into());
    }

    let bounds = opts.support.map(|sb| -> Result<BoundsReport> {
        let mu = moments.mu;
        let uniform_iv = match mu {
            Some(mu) if uniform.exists => Some(bounds::ate_bounds_from_validity(mu, uniform.p_internal, sb)?),
            _ => None,
        };
        let fixed_iv = match (&fixed, mu) {
            (Some(f), Some(mu)) if f.validity.exists => {
                Some(bounds::ate_bounds_from_validity(mu, f.validity.p_internal, sb)?)
            }
            _ => None,
        };
        let general = mu.map(|mu| bounds::ate_bounds_general(&design, mu, sb)).transpose()?;
        Ok(BoundsReport { support: sb, uniform: uniform_iv, fixed: fixed_iv, general })
    });
    let bounds = bounds.transpose()?;
    if bounds.is_some() && !has_tau {
        diagnostics.push("bounds need the estimand value; supply CATE values".into());
    }

    let decomposition = bounds::decompose_negative_weights(&design)?;
    let inclusion = uniform.inclusion.as_ref().map(|r| r.inclusion.clone());
    let cells = design
        .cells()
        .iter()
        .enumerate()
        .map(|(k, c)| CellReport {
            label: c.label.clone(),
            p: c.p,
            a: c.a,
            w0: c.w0,
            tau: c.tau,
            omega: omega[k],
            inclusion: inclusion.as_ref().map(|v| v[k]),
        })
        .collect();

    Ok(AuditReport {
        schema_version: SCHEMA_VERSION,
        family,
        cells,
        existence: ExistenceReport {
            uniform: uniform.exists,
            weakly_causal: validity::check_weakly_causal(&design)?,
            adversarial_mu: validity::adversarial_sign_check(&design)?,
            linear_cate,
            bounded_difference,
            fixed: fixed_exists,
        },
        moments,
        uniform,
        decomposition,
        fixed,
        bounds,
        diagnostics,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl AuditReport {
    /// Plain-text summary: the two measures side by side, then details.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let fixed = self.fixed.as_ref().map(|f| &f.validity);
        let _ = writeln!(out, "Internal validity of the {} estimand", self.family);
        let _ = writeln!(out, "{:<16}{:>20}{:>14}", "", "uniformly in tau0", "given tau0");
        let _ = writeln!(
            out,
            "{:<16}{:>20}{:>14}",
            "P(W*=1)",
            cell(Some(self.uniform.p_representative)),
            cell(fixed.map(|f| f.p_representative))
        );
        let _ = writeln!(
            out,
            "{:<16}{:>20}{:>14}",
            "P(W*=1|W0=1)",
            cell(Some(self.uniform.p_internal)),
            cell(fixed.map(|f| f.p_internal))
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "causal representation uniformly in tau0: {}", self.existence.uniform);
        if let Some(f) = fixed {
            let _ = writeln!(out, "causal representation given tau0:       {}", f.exists);
        }
        if let Some(mu) = self.moments.mu {
            let _ = writeln!(out, "estimand mu = {mu:.6}");
        }
        if self.decomposition.omega_minus > 0.0 {
            let _ = writeln!(
                out,
                "negative weight share omega- = {:.4} (omega+ = {:.4})",
                self.decomposition.omega_minus, self.decomposition.omega_plus
            );
        }
        if let Some(b) = &self.bounds {
            let show = |name: &str, i: &Option<Interval>, out: &mut String| {
                if let Some(i) = i {
                    let _ = writeln!(out, "{name:<22}[{:.4}, {:.4}]  width {:.4}", i.lo, i.hi, i.width);
                }
            };
            let _ = writeln!(out, "bounds on the base-population ATE with support [{}, {}]:", b.support.b_lo, b.support.b_hi);
            show("  uniform measure", &b.uniform, &mut out);
            show("  given tau0", &b.fixed, &mut out);
            show("  any weight sign", &b.general, &mut out);
        }
        for d in &self.diagnostics {
            let _ = writeln!(out, "note: {d}");
        }
        out
    }
}

/// Per-cell data for the uniform picture: the covariate density in the base
/// population and its rescaling by `a / a_max`.
pub fn figure1_csv(design: &CellTable) -> Result<String> {
    let design = model::normalize_sign(design)?;
    let a_max = design.a_max();
    if !(a_max > 0.0) {
        return Err(AuditError::DegenerateWeights);
    }
    let pop = design.pop_w0();
    let mut out = String::from("x,f_x,a_f_x_over_a_max\n");
    for c in design.cells() {
        let f = c.base_mass() / pop;
        let _ = writeln!(out, "{},{},{}", c.label, f, c.a * f / a_max);
    }
    Ok(out)
}

/// Per-cell data for the trimming picture: CATE, mass, inclusion share and
/// the threshold on `tau - mu0`.
pub fn figure2_csv(design: &CellTable, mu0: Option<f64>) -> Result<String> {
    let (report, trim) = validity::fixed_tau_internal_validity(design, mu0)?;
    let pop = design.pop_w0();
    let inclusion = report.inclusion.map(|r| r.inclusion);
    let alpha = trim.alpha.map(|a| a.to_string()).unwrap_or_default();
    let mut out = String::from("tau,mass,kept,alpha\n");
    for (k, c) in design.cells().iter().enumerate() {
        if c.base_mass() <= 0.0 {
            continue;
        }
        let tau = c.tau.ok_or_else(|| AuditError::MissingTau(c.label.clone()))?;
        let kept = inclusion.as_ref().map_or(0.0, |v| v[k]);
        let _ = writeln!(out, "{},{},{},{}", tau, c.base_mass() / pop, kept, alpha);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cell;

    fn illustrative() -> CellTable {
        CellTable::new(vec![
            Cell::new("1", 0.2, 0.24, 1.0).with_tau(1.0),
            Cell::new("2", 0.8, 0.09, 1.0).with_tau(3.0),
        ])
        .unwrap()
    }

    #[test]
    fn report_fields() {
        let opts = AuditOptions { support: Some(SupportBounds::new(0.0, 5.0).unwrap()), ..Default::default() };
        let r = run_audit(&illustrative(), DesignFamily::OlsAte, &opts).unwrap();
        assert!((r.uniform.p_internal - 0.5).abs() < 1e-12);
        assert!((r.cells[0].omega - 0.4).abs() < 1e-12);
        assert!(r.fixed.as_ref().unwrap().solvers.as_ref().unwrap().agree);
        assert!(r.bounds.as_ref().unwrap().uniform.is_some());
        let table = r.render_table();
        assert!(table.contains("P(W*=1|W0=1)") && table.contains("0.5000"));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<AuditReport>(&json).unwrap(), r);
    }

    #[test]
    fn constant_weight_figure() {
        let d = CellTable::new(vec![Cell::new("1", 0.5, 2.0, 1.0), Cell::new("2", 0.5, 2.0, 1.0)]).unwrap();
        for line in figure1_csv(&d).unwrap().lines().skip(1) {
            let v: Vec<&str> = line.split(',').collect();
            assert_eq!(v[1], v[2]);
        }
    }

    #[test]
    fn trimming_figure() {
        let d = CellTable::new(vec![
            Cell::new("a", 0.5, 1.0, 1.0).with_tau(0.0),
            Cell::new("b", 0.5, 1.0, 1.0).with_tau(1.0),
        ])
        .unwrap();
        let csv = figure2_csv(&d, Some(0.25)).unwrap();
        let rows: Vec<Vec<f64>> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert!(rows.iter().all(|r| (r[3] - 0.75).abs() < 1e-12));
        assert_eq!(rows[0][2], 1.0);
        assert!((rows[1][2] - 1.0 / 3.0).abs() < 1e-12);

        let csv = figure2_csv(&d, Some(0.5)).unwrap();
        assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("1")));

        let no_tau = CellTable::new(vec![Cell::new("a", 1.0, 1.0, 1.0)]).unwrap();
        assert!(matches!(figure2_csv(&no_tau, None), Err(AuditError::MissingTau(_))));
    }
}
