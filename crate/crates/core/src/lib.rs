//! Diagnostics for weighted treatment-effect estimands.
//!
//! Many estimands can be written as `E[a(X) w0(X) tau(X)] / E[a(X) w0(X)]`,
//! a weighted average of conditional effects over a base population
//! `W0 = 1`. This crate asks whether such an estimand is the average effect
//! for some subpopulation, how large that subpopulation can be, and what
//! that implies for the population ATE. It covers OLS, IV and TWFE weight
//! functions, plug-in estimation with a bootstrap confidence interval, data
//! loading and a small simulator.

pub mod audit;
pub mod bounds;
pub mod data;
pub mod error;
pub mod inference;
pub mod lp;
pub mod model;
pub mod rng;
pub mod validity;
pub mod weights;

pub use audit::{run_audit, AuditOptions, AuditReport, DesignFamily};
pub use bounds::{Interval, SignDecomposition, SupportBounds};
pub use data::{DgpSpec, MicroRow, MicroSample, PanelData, PanelUnit, Simulated};
pub use error::{AuditError, Result};
pub use inference::{BootstrapConfig, BootstrapResult, EstimatedDesign, Family, LimitFunctional, Theta};
pub use model::{Cell, CellTable, MomentSummary, SubpopulationRule};
pub use validity::{TauSample, TrimDirection, TrimSolution, ValidityReport};
pub use weights::{Group, GroupDistribution, IvCell, IvCellTable, PropensityCell, PropensityTable};
