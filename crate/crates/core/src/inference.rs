//! Plug-in estimation of the uniform internal-validity measure and a
//! directional bootstrap confidence interval for it.
//!
//! Designs are estimated cell by cell from a micro sample with discrete
//! covariates. The first-stage vector is `theta = (a, w0, p)`. Because the
//! measure divides by `max a`, its limit law is a possibly nonlinear map of
//! the Gaussian limit of `theta`; the bootstrap composes resampled
//! first-stage fluctuations with an estimate of that map.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MicroSample;
use crate::error::{AuditError, Result};
use crate::model::{Cell, CellTable, NEG_TOL};
use crate::rng;

/// Estimand families that can be estimated from a micro sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    OlsAte,
    OlsAtt,
    OlsAtu,
    Iv,
    Tsls,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::OlsAte, Family::OlsAtt, Family::OlsAtu, Family::Iv, Family::Tsls];

    pub fn name(self) -> &'static str {
        match self {
            Family::OlsAte => "ols_ate",
            Family::OlsAtt => "ols_att",
            Family::OlsAtu => "ols_atu",
            Family::Iv => "iv",
            Family::Tsls => "tsls",
        }
    }

    pub fn needs_instrument(self) -> bool {
        matches!(self, Family::Iv | Family::Tsls)
    }

    fn formula(self) -> &'static str {
        match self {
            Family::OlsAte => "a = p(x)(1 - p(x)), w0 = 1; p(x) = share treated in cell",
            Family::OlsAtt => "a = 1 - p(x), w0 = p(x); p(x) = share treated in cell",
            Family::OlsAtu => "a = p(x), w0 = 1 - p(x); p(x) = share treated in cell",
            Family::Iv => "a = pz(x)(1 - pz(x)), w0 = P(D=1|Z=1,x) - P(D=1|Z=0,x) clamped to [0, 1]",
            Family::Tsls => "a = |cov(D, Z | x)|, w0 = P(D=1|Z=1,x) - P(D=1|Z=0,x) clamped to [0, 1]",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| AuditError::InvalidInput(format!("unknown family `{s}`")))
    }
}

/// First-stage vector, one entry per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub a: Vec<f64>,
    pub w0: Vec<f64>,
    pub p: Vec<f64>,
}

impl Theta {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct CellCounts {
    n: usize,
    d1: usize,
    z1: usize,
    z1_d1: usize,
    z0_d1: usize,
}

impl CellCounts {
    fn add(&mut self, code: u8, times: usize) {
        let d = code & 1 == 1;
        let z = code & 2 == 2;
        self.n += times;
        if d {
            self.d1 += times;
        }
        if z {
            self.z1 += times;
            if d {
                self.z1_d1 += times;
            }
        } else if d {
            self.z0_d1 += times;
        }
    }
}

fn theta_from_counts(family: Family, labels: &[String], counts: &[CellCounts], n: usize) -> Result<Theta> {
    let k = counts.len();
    let mut theta = Theta { a: Vec::with_capacity(k), w0: Vec::with_capacity(k), p: Vec::with_capacity(k) };
    let nf = n as f64;
    for (c, label) in counts.iter().zip(labels) {
        if c.n == 0 {
            return Err(AuditError::EmptyCellArm { label: label.clone(), arm: "any unit" });
        }
        let cn = c.n as f64;
        theta.p.push(cn / nf);
        if family.needs_instrument() {
            let z0 = c.n - c.z1;
            if c.z1 == 0 {
                return Err(AuditError::EmptyCellArm { label: label.clone(), arm: "Z = 1" });
            }
            if z0 == 0 {
                return Err(AuditError::EmptyCellArm { label: label.clone(), arm: "Z = 0" });
            }
            let pz = c.z1 as f64 / cn;
            let first_stage = c.z1_d1 as f64 / c.z1 as f64 - c.z0_d1 as f64 / z0 as f64;
            theta.w0.push(first_stage.clamp(0.0, 1.0));
            theta.a.push(match family {
                Family::Iv => pz * (1.0 - pz),
                _ => {
                    let cov = c.z1_d1 as f64 / cn - (c.d1 as f64 / cn) * pz;
                    cov.abs()
                }
            });
        } else {
            if c.d1 == 0 {
                return Err(AuditError::EmptyCellArm { label: label.clone(), arm: "D = 1" });
            }
            if c.d1 == c.n {
                return Err(AuditError::EmptyCellArm { label: label.clone(), arm: "D = 0" });
            }
            let p = c.d1 as f64 / cn;
            let (a, w0) = match family {
                Family::OlsAte => (p * (1.0 - p), 1.0),
                Family::OlsAtt => (1.0 - p, p),
                _ => (p, 1.0 - p),
            };
            theta.a.push(a);
            theta.w0.push(w0);
        }
    }
    Ok(theta)
}

/// A design estimated from a sample, with the counts behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedDesign {
    pub family: Family,
    pub design: CellTable,
    pub theta: Theta,
    pub counts: Vec<usize>,
    pub n: usize,
    /// Which cell-frequency formulas produced `a` and `w0`.
    pub provenance: String,
}

impl EstimatedDesign {
    /// Treat a population design as if it were estimated from `n` units
    /// with proportional counts.
    pub fn from_population(design: &CellTable, family: Family, n: usize) -> Self {
        let cells = design.cells();
        EstimatedDesign {
            family,
            design: design.clone(),
            theta: Theta {
                a: cells.iter().map(|c| c.a).collect(),
                w0: cells.iter().map(|c| c.w0).collect(),
                p: cells.iter().map(|c| c.p).collect(),
            },
            counts: cells.iter().map(|c| (c.p * n as f64).round() as usize).collect(),
            n,
            provenance: "population design".into(),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        self.design.cells().iter().map(|c| c.label.clone()).collect()
    }
}

/// Rows coded by cell index and `(d, z)` so resampling only touches integers.
struct CodedSample {
    labels: Vec<String>,
    cell: Vec<u32>,
    code: Vec<u8>,
}

impl CodedSample {
    fn new(sample: &MicroSample, family: Family) -> Result<Self> {
        if sample.is_empty() {
            return Err(AuditError::InvalidInput("sample has no rows".into()));
        }
        if family.needs_instrument() && !sample.has_instrument() {
            return Err(AuditError::Schema(format!("family `{family}` needs an instrument column `z`")));
        }
        let mut index: BTreeMap<&str, u32> = BTreeMap::new();
        for r in &sample.rows {
            index.entry(r.x.as_str()).or_insert(0);
        }
        for (i, v) in index.values_mut().enumerate() {
            *v = i as u32;
        }
        let labels = index.keys().map(|s| s.to_string()).collect();
        let cell = sample.rows.iter().map(|r| index[r.x.as_str()]).collect();
        let code = sample.rows.iter().map(|r| r.d | (r.z.unwrap_or(0) << 1)).collect();
        Ok(CodedSample { labels, cell, code })
    }

    fn n(&self) -> usize {
        self.cell.len()
    }

    fn counts(&self) -> Vec<CellCounts> {
        let mut out = vec![CellCounts::default(); self.labels.len()];
        for (&c, &code) in self.cell.iter().zip(&self.code) {
            out[c as usize].add(code, 1);
        }
        out
    }

    fn resample_counts<R: Rng>(&self, rng: &mut R, hist: &mut [usize]) -> Vec<CellCounts> {
        hist.iter_mut().for_each(|h| *h = 0);
        let n = self.n();
        for _ in 0..n {
            let i = rng.random_range(0..n);
            hist[self.cell[i] as usize * 4 + self.code[i] as usize] += 1;
        }
        let mut out = vec![CellCounts::default(); self.labels.len()];
        for (slot, &h) in hist.iter().enumerate() {
            if h > 0 {
                out[slot / 4].add((slot % 4) as u8, h);
            }
        }
        out
    }
}

fn build_design(labels: &[String], theta: &Theta) -> Result<CellTable> {
    if theta.w0.iter().zip(&theta.p).all(|(w, p)| w * p <= 0.0) {
        return Err(AuditError::NoCompliers);
    }
    let cells = labels
        .iter()
        .enumerate()
        .map(|(k, l)| Cell::new(l.clone(), theta.p[k], theta.a[k], theta.w0[k]))
        .collect();
    CellTable::new(cells)
}

/// Estimate `theta` cell by cell. Cells are ordered by label.
pub fn estimate_design(sample: &MicroSample, family: Family) -> Result<EstimatedDesign> {
    let coded = CodedSample::new(sample, family)?;
    let counts = coded.counts();
    let theta = theta_from_counts(family, &coded.labels, &counts, coded.n())?;
    let design = build_design(&coded.labels, &theta)?;
    Ok(EstimatedDesign {
        family,
        design,
        theta,
        counts: counts.iter().map(|c| c.n).collect(),
        n: coded.n(),
        provenance: family.formula().into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub b: usize,
    pub alpha: f64,
    pub c0: f64,
    pub xi0: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { b: 400, alpha: 0.05, c0: 0.5, xi0: 0.5, seed: 0 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(AuditError::InvalidInput("need at least one bootstrap replication".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AuditError::InvalidInput(format!("alpha = {} is not in (0, 1)", self.alpha)));
        }
        if !(self.c0 > 0.0 && self.c0.is_finite()) || !(self.xi0 > 0.0 && self.xi0.is_finite()) {
            return Err(AuditError::InvalidInput("c0 and xi0 must be positive".into()));
        }
        Ok(())
    }

    /// Trimming threshold for near-zero `w0` cells.
    pub fn c_n(&self, n: usize) -> f64 {
        self.c0 * (n as f64).powf(-1.0 / 3.0)
    }

    /// Slack defining the estimated set of maximizers.
    pub fn xi_n(&self, n: usize) -> f64 {
        self.xi0 * (n as f64).powf(-1.0 / 3.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformEstimate {
    /// Clipped to `[0, 1]`.
    pub p_hat: f64,
    pub p_hat_raw: f64,
    /// False when some retained cell has a negative estimated weight.
    pub exists: bool,
    pub a_max_hat: f64,
    pub c_n: f64,
    /// Cells with `w0 <= c_n`, excluded from the maximum.
    pub trimmed: Vec<usize>,
}

struct Moments {
    pop_w0: f64,
    mean_a: f64,
    a_max: f64,
    kept: Vec<bool>,
}

fn moments(theta: &Theta, c_n: f64) -> Result<Moments> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut a_max = f64::NEG_INFINITY;
    let mut kept = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        num += theta.a[k] * theta.w0[k] * theta.p[k];
        den += theta.w0[k] * theta.p[k];
        let keep = theta.w0[k] > c_n;
        if keep {
            a_max = a_max.max(theta.a[k]);
        }
        kept.push(keep);
    }
    if a_max == f64::NEG_INFINITY {
        return Err(AuditError::AllCellsTrimmed(c_n));
    }
    if !(den > 0.0) {
        return Err(AuditError::NoCompliers);
    }
    Ok(Moments { pop_w0: den, mean_a: num / den, a_max, kept })
}

fn uniform_from_theta(theta: &Theta, c_n: f64) -> Result<UniformEstimate> {
    let m = moments(theta, c_n)?;
    let exists = (0..theta.len()).all(|k| !(theta.w0[k] > 0.0 && theta.a[k] < -NEG_TOL));
    let raw = if exists && m.a_max > 0.0 { m.mean_a / m.a_max } else { 0.0 };
    Ok(UniformEstimate {
        p_hat: raw.clamp(0.0, 1.0),
        p_hat_raw: raw,
        exists,
        a_max_hat: m.a_max,
        c_n,
        trimmed: m.kept.iter().enumerate().filter(|(_, k)| !**k).map(|(i, _)| i).collect(),
    })
}

pub fn estimate_uniform_validity(ed: &EstimatedDesign, cfg: &BootstrapConfig) -> Result<UniformEstimate> {
    uniform_from_theta(&ed.theta, cfg.c_n(ed.n))
}

/// Plug-in estimate when the maximum of the weight function is known, as
/// for OLS with a propensity of one half in the support (`a_max = 1/4`).
pub fn estimate_with_known_max(ed: &EstimatedDesign, a_max: f64) -> Result<f64> {
    if !(a_max > 0.0) {
        return Err(AuditError::InvalidInput(format!("a_max = {a_max} must be positive")));
    }
    let m = moments(&ed.theta, f64::NEG_INFINITY)?;
    Ok(m.mean_a / a_max)
}

/// Linear coefficients of the limit functional plus the maximizer set that
/// drives its nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitFunctional {
    pub coef_a: Vec<f64>,
    /// Multiplies `max_{j in argmax} z_a(j)`, entering with a minus sign.
    pub coef_max: f64,
    pub argmax: Vec<usize>,
    pub coef_w0: Vec<f64>,
    pub coef_x: Vec<f64>,
}

impl LimitFunctional {
    fn build(theta: &Theta, pop_w0: f64, mean_a: f64, a_max: f64, argmax: Vec<usize>) -> Self {
        let scale = pop_w0 * a_max;
        let k = theta.len();
        LimitFunctional {
            coef_a: (0..k).map(|j| theta.w0[j] * theta.p[j] / scale).collect(),
            coef_max: mean_a / (a_max * a_max),
            argmax,
            coef_w0: (0..k).map(|j| (theta.a[j] - mean_a) * theta.p[j] / scale).collect(),
            coef_x: (0..k).map(|j| (theta.a[j] - mean_a) * theta.w0[j] / scale).collect(),
        }
    }

    /// The population functional, with the maximizer set taken over the
    /// base-population support.
    pub fn from_design(design: &CellTable) -> Result<Self> {
        let cells = design.cells();
        if cells.iter().any(|c| c.base_mass() > 0.0 && c.a < -NEG_TOL) {
            return Err(AuditError::InvalidInput("limit law requires nonnegative weights".into()));
        }
        let theta = Theta {
            a: cells.iter().map(|c| c.a).collect(),
            w0: cells.iter().map(|c| c.w0).collect(),
            p: cells.iter().map(|c| c.p).collect(),
        };
        let a_max = design.a_max();
        if !(a_max > 0.0) {
            return Err(AuditError::DegenerateWeights);
        }
        let tol = 1e-12 * a_max;
        let argmax = (0..theta.len())
            .filter(|&j| cells[j].base_mass() > 0.0 && theta.a[j] >= a_max - tol)
            .collect();
        Ok(Self::build(&theta, design.pop_w0(), design.mean_a_given_w0(), a_max, argmax))
    }

    pub fn dim(&self) -> usize {
        self.coef_a.len()
    }

    pub fn is_linear(&self) -> bool {
        self.argmax.len() == 1
    }
}

/// Evaluate the functional at `z = (z_a, z_w0, z_x)`.
pub fn psi_apply(lf: &LimitFunctional, z_a: &[f64], z_w0: &[f64], z_x: &[f64]) -> Result<f64> {
    let k = lf.dim();
    for len in [z_a.len(), z_w0.len(), z_x.len()] {
        if len != k {
            return Err(AuditError::DimensionMismatch { expected: k, got: len });
        }
    }
    let dot = |c: &[f64], z: &[f64]| -> f64 { c.iter().zip(z).map(|(c, z)| c * z).sum() };
    let max = lf.argmax.iter().map(|&j| z_a[j]).fold(f64::NEG_INFINITY, f64::max);
    Ok(dot(&lf.coef_a, z_a) - lf.coef_max * max + dot(&lf.coef_w0, z_w0) + dot(&lf.coef_x, z_x))
}

fn psi_hat_from_theta(theta: &Theta, c_n: f64, xi_n: f64) -> Result<LimitFunctional> {
    let m = moments(theta, c_n)?;
    if !(m.a_max > 0.0) {
        return Err(AuditError::DegenerateWeights);
    }
    // Only cells that survive trimming can be maximizers; a cell with
    // vanishing w0 lies outside the support the maximum is taken over.
    let argmax = (0..theta.len()).filter(|&k| m.kept[k] && theta.a[k] >= m.a_max - xi_n).collect();
    Ok(LimitFunctional::build(theta, m.pop_w0, m.mean_a, m.a_max, argmax))
}

pub fn psi_hat_build(ed: &EstimatedDesign, cfg: &BootstrapConfig) -> Result<LimitFunctional> {
    psi_hat_from_theta(&ed.theta, cfg.c_n(ed.n), cfg.xi_n(ed.n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapStatus {
    Completed,
    /// Estimated weights are negative somewhere, so the measure is zero and
    /// the limit theory does not apply.
    SkippedNegativeWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub status: BootstrapStatus,
    pub p_hat: f64,
    pub p_hat_raw: f64,
    pub n: usize,
    pub c_n: f64,
    pub xi_n: f64,
    pub argmax_hat: Vec<usize>,
    pub trimmed: Vec<usize>,
    /// `psi_hat(Z*)` per replication, in replication order.
    pub draws: Vec<f64>,
    pub q_alpha: Option<f64>,
    pub ci: [f64; 2],
    /// Resamples that could not be estimated and were drawn again.
    pub redraws: usize,
    /// Share of replications whose set of untrimmed cells differs from the
    /// full sample's.
    pub trim_instability: f64,
}

/// Per-replication retries before giving up.
const MAX_REDRAWS: usize = 1000;

/// Empirical `alpha` quantile: the smallest draw with at least a share
/// `alpha` of draws at or below it.
pub fn empirical_quantile(draws: &[f64], alpha: f64) -> f64 {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (alpha * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn bootstrap_ci(sample: &MicroSample, family: Family, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    cfg.validate()?;
    let coded = CodedSample::new(sample, family)?;
    let n = coded.n();
    let theta = theta_from_counts(family, &coded.labels, &coded.counts(), n)?;
    build_design(&coded.labels, &theta)?;
    let c_n = cfg.c_n(n);
    let xi_n = cfg.xi_n(n);
    let est = uniform_from_theta(&theta, c_n)?;
    if !est.exists {
        return Ok(BootstrapResult {
            status: BootstrapStatus::SkippedNegativeWeights,
            p_hat: 0.0,
            p_hat_raw: est.p_hat_raw,
            n,
            c_n,
            xi_n,
            argmax_hat: vec![],
            trimmed: est.trimmed,
            draws: vec![],
            q_alpha: None,
            ci: [0.0, 0.0],
            redraws: 0,
            trim_instability: 0.0,
        });
    }
    let lf = psi_hat_from_theta(&theta, c_n, xi_n)?;
    let root_n = (n as f64).sqrt();
    let k = theta.len();

    let reps: Vec<Result<(f64, usize, bool)>> = (0..cfg.b)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(cfg.seed, b as u64);
            let mut hist = vec![0usize; 4 * k];
            let mut failures = 0;
            loop {
                let counts = coded.resample_counts(&mut rng, &mut hist);
                match theta_from_counts(family, &coded.labels, &counts, n) {
                    Ok(star) => {
                        let z = |s: &[f64], t: &[f64]| -> Vec<f64> {
                            s.iter().zip(t).map(|(s, t)| root_n * (s - t)).collect()
                        };
                        let value = psi_apply(&lf, &z(&star.a, &theta.a), &z(&star.w0, &theta.w0), &z(&star.p, &theta.p))?;
                        let unstable = (0..k).any(|j| (star.w0[j] > c_n) != (theta.w0[j] > c_n));
                        return Ok((value, failures, unstable));
                    }
                    Err(AuditError::EmptyCellArm { .. }) => {
                        failures += 1;
                        if failures > MAX_REDRAWS {
                            return Err(AuditError::ResampleDegenerate { redraws: failures });
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
        })
        .collect();

    let mut draws = Vec::with_capacity(cfg.b);
    let mut redraws = 0;
    let mut unstable = 0;
    for r in reps {
        let (v, f, u) = r?;
        draws.push(v);
        redraws += f;
        unstable += usize::from(u);
    }
    let q = empirical_quantile(&draws, cfg.alpha);
    Ok(BootstrapResult {
        status: BootstrapStatus::Completed,
        p_hat: est.p_hat,
        p_hat_raw: est.p_hat_raw,
        n,
        c_n,
        xi_n,
        argmax_hat: lf.argmax.clone(),
        trimmed: est.trimmed,
        ci: [0.0, (est.p_hat_raw - q / root_n).clamp(0.0, 1.0)],
        q_alpha: Some(q),
        draws,
        redraws,
        trim_instability: unstable as f64 / cfg.b as f64,
    })
}
