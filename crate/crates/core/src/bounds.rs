//! Bounds on the target parameter implied by an estimand and its
//! internal validity.
//!
//! If a share `P` of the base population is characterized by the estimand
//! and treatment effects are supported in `[b_lo, b_hi]`, the remaining
//! share can contribute anything in that range, so the target lies in
//! `mu P + [b_lo, b_hi] (1 - P)`.

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::model::{self, normalize_sign, CellTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportBounds {
    pub b_lo: f64,
    pub b_hi: f64,
}

impl SupportBounds {
    pub fn new(b_lo: f64, b_hi: f64) -> Result<Self> {
        if !(b_lo <= b_hi) {
            return Err(AuditError::InvalidSupport { lo: b_lo, hi: b_hi });
        }
        Ok(SupportBounds { b_lo, b_hi })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
}

/// Split of the weight function into positive and negative parts,
/// `mu = omega_plus mu_plus - omega_minus mu_minus`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignDecomposition {
    pub omega_plus: f64,
    pub omega_minus: f64,
    /// `None` without CATE values.
    pub mu_plus: Option<f64>,
    /// `None` without CATE values or without negative weights.
    pub mu_minus: Option<f64>,
}

pub fn ate_bounds_from_validity(mu: f64, p_bar: f64, sb: SupportBounds) -> Result<Interval> {
    if !(sb.b_lo <= sb.b_hi) {
        return Err(AuditError::InvalidSupport { lo: sb.b_lo, hi: sb.b_hi });
    }
    if !(0.0..=1.0).contains(&p_bar) || !mu.is_finite() {
        return Err(AuditError::InvalidInput(format!("need finite mu and P in [0, 1], got mu = {mu}, P = {p_bar}")));
    }
    let slack = 1.0 - p_bar;
    Ok(Interval {
        lo: mu * p_bar + sb.b_lo * slack,
        hi: mu * p_bar + sb.b_hi * slack,
        width: (sb.b_hi - sb.b_lo) * slack,
    })
}

pub fn decompose_negative_weights(design: &CellTable) -> Result<SignDecomposition> {
    let design = normalize_sign(design)?;
    let total: f64 = design.cells().iter().map(|c| c.a * c.base_mass()).sum();
    let plus: Vec<f64> = design.cells().iter().map(|c| c.a.max(0.0)).collect();
    let minus: Vec<f64> = design.cells().iter().map(|c| (-c.a).max(0.0)).collect();
    let mass = |w: &[f64]| -> f64 { w.iter().zip(design.cells()).map(|(w, c)| w * c.base_mass()).sum() };
    let omega_plus = mass(&plus) / total;
    let omega_minus = mass(&minus) / total;

    let has_tau = design.cells().iter().all(|c| c.base_mass() == 0.0 || c.tau.is_some());
    let mu_plus = if has_tau { Some(model::mu(&design.with_weights(&plus)?)?) } else { None };
    let mu_minus = if has_tau && omega_minus > 0.0 {
        Some(model::mu(&design.with_weights(&minus)?)?)
    } else {
        None
    };
    Ok(SignDecomposition { omega_plus, omega_minus, mu_plus, mu_minus })
}

/// Bounds valid whatever the sign of the weights, using the share
/// `E[a | W0 = 1] / a_max` the estimand would characterize if its weights were
/// nonnegative.
pub fn ate_bounds_general(design: &CellTable, mu: f64, sb: SupportBounds) -> Result<Interval> {
    let design = normalize_sign(design)?;
    let a_max = design.a_max();
    if !(a_max > 0.0) {
        return Err(AuditError::DegenerateWeights);
    }
    let ratio = (design.mean_a_given_w0() / a_max).min(1.0);
    ate_bounds_from_validity(mu, ratio, sb)
}
