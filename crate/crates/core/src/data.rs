//! CSV ingestion, panel summaries and a seeded data simulator.
//!
//! Every CSV reader accepts `#` comment lines, matches columns by header
//! name and reports the offending line number on failure.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::model::{parse_coords, Cell, CellTable, PROB_TOL};
use crate::rng;
use crate::weights::{
    self, Group, GroupDistribution, IvCell, IvCellTable, PropensityCell, PropensityTable,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroRow {
    pub x: String,
    pub d: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MicroSample {
    pub rows: Vec<MicroRow>,
}

impl MicroSample {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_instrument(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.z.is_some())
    }

    pub fn has_outcome(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.y.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelUnit {
    pub id: String,
    pub g: Group,
    /// Outcomes for periods `1..=T`.
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    pub periods: usize,
    pub units: Vec<PanelUnit>,
}

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord, required: &[&str], optional: &[&str]) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, h) in headers.iter().enumerate() {
            let h = h.trim();
            if !required.contains(&h) && !optional.contains(&h) {
                return Err(AuditError::Schema(format!("unexpected column `{h}`")));
            }
            if index.insert(h.to_string(), i).is_some() {
                return Err(AuditError::Schema(format!("duplicate column `{h}`")));
            }
        }
        if let Some(missing) = required.iter().find(|c| !index.contains_key(**c)) {
            return Err(AuditError::Schema(format!("missing column `{missing}`")));
        }
        Ok(Columns { index })
    }

    fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> Option<&'r str> {
        self.index.get(name).and_then(|&i| rec.get(i)).map(str::trim)
    }
}

struct Row<'a> {
    rec: &'a csv::StringRecord,
    cols: &'a Columns,
    line: u64,
}

impl Row<'_> {
    fn err(&self, msg: impl Into<String>) -> AuditError {
        AuditError::Parse { line: self.line, msg: msg.into() }
    }

    fn text(&self, name: &str) -> Result<&str> {
        match self.cols.get(self.rec, name) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(self.err(format!("column `{name}` is empty"))),
        }
    }

    fn opt_text(&self, name: &str) -> Option<&str> {
        self.cols.get(self.rec, name).filter(|s| !s.is_empty())
    }

    fn num(&self, name: &str) -> Result<f64> {
        let s = self.text(name)?;
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(format!("`{s}` in column `{name}` is not a finite number")))
    }

    fn opt_num(&self, name: &str) -> Result<Option<f64>> {
        self.opt_text(name).map(|_| self.num(name)).transpose()
    }

    fn binary(&self, name: &str) -> Result<u8> {
        match self.text(name)? {
            "0" => Ok(0),
            "1" => Ok(1),
            s => Err(self.err(format!("`{s}` in column `{name}` is not 0 or 1"))),
        }
    }

    fn group(&self, name: &str) -> Result<Group> {
        self.text(name)?.parse().map_err(|e: AuditError| self.err(e.to_string()))
    }
}

fn for_each_row(
    input: impl Read,
    required: &[&str],
    optional: &[&str],
    mut f: impl FnMut(Row<'_>) -> Result<()>,
) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers().map_err(csv_error)?.clone();
    let cols = Columns::new(&headers, required, optional)?;
    for rec in reader.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        f(Row { rec: &rec, cols: &cols, line })?;
    }
    Ok(())
}

fn csv_error(e: csv::Error) -> AuditError {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(_) => AuditError::Io(std::io::Error::other(e.to_string())),
        _ => AuditError::Parse { line, msg: e.to_string() },
    }
}

/// Serialize records, quoting fields that contain separators or would be
/// read back as a comment.
fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().comment(Some(b'#')).from_writer(Vec::new());
    // writing to memory cannot fail
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("fields are UTF-8")
}

fn open(path: &Path) -> Result<std::fs::File> {
    Ok(std::fs::File::open(path)?)
}

pub fn read_cell_table(input: impl Read) -> Result<CellTable> {
    let mut cells = Vec::new();
    for_each_row(input, &["label", "p", "a", "w0"], &["tau"], |r| {
        let label = r.text("label")?.to_string();
        let mut cell = Cell::new(label, r.num("p")?, r.num("a")?, r.num("w0")?);
        cell.tau = r.opt_num("tau")?;
        cells.push(cell);
        Ok(())
    })?;
    CellTable::new(cells)
}

pub fn load_cell_table(path: impl AsRef<Path>) -> Result<CellTable> {
    read_cell_table(open(path.as_ref())?)
}

pub fn write_cell_table(design: &CellTable) -> String {
    to_csv(
        &["label", "p", "a", "w0", "tau"],
        design.cells().iter().map(|c| {
            let tau = c.tau.map(|t| t.to_string()).unwrap_or_default();
            vec![c.label.clone(), c.p.to_string(), c.a.to_string(), c.w0.to_string(), tau]
        }),
    )
}

pub fn read_propensity_table(input: impl Read) -> Result<PropensityTable> {
    let mut cells = Vec::new();
    for_each_row(input, &["label", "mass", "p"], &[], |r| {
        cells.push(PropensityCell { label: r.text("label")?.to_string(), mass: r.num("mass")?, p: r.num("p")? });
        Ok(())
    })?;
    PropensityTable::new(cells)
}

pub fn write_propensity_table(pt: &PropensityTable) -> String {
    to_csv(
        &["label", "mass", "p"],
        pt.cells.iter().map(|c| vec![c.label.clone(), c.mass.to_string(), c.p.to_string()]),
    )
}

pub fn read_iv_table(input: impl Read) -> Result<IvCellTable> {
    let mut cells = Vec::new();
    for_each_row(input, &["label", "mass", "pz", "cov_dz", "pc"], &[], |r| {
        cells.push(IvCell {
            label: r.text("label")?.to_string(),
            mass: r.num("mass")?,
            pz: r.num("pz")?,
            cov_dz: r.num("cov_dz")?,
            pc: r.num("pc")?,
        });
        Ok(())
    })?;
    IvCellTable::new(cells)
}

pub fn write_iv_table(iv: &IvCellTable) -> String {
    to_csv(
        &["label", "mass", "pz", "cov_dz", "pc"],
        iv.cells.iter().map(|c| {
            vec![c.label.clone(), c.mass.to_string(), c.pz.to_string(), c.cov_dz.to_string(), c.pc.to_string()]
        }),
    )
}

/// `g,share` rows; `T` is the largest finite group unless given.
pub fn read_group_distribution(input: impl Read, periods: Option<usize>) -> Result<GroupDistribution> {
    let mut pairs = Vec::new();
    for_each_row(input, &["g", "share"], &[], |r| {
        pairs.push((r.group("g")?, r.num("share")?));
        Ok(())
    })?;
    let max_g = pairs.iter().filter_map(|(g, _)| match g {
        Group::Period(t) => Some(*t),
        Group::Never => None,
    });
    let periods = periods.or_else(|| max_g.max()).unwrap_or(2);
    GroupDistribution::from_pairs(periods, &pairs)
}

pub fn write_group_distribution(gd: &GroupDistribution) -> String {
    to_csv(&["g", "share"], gd.pairs().into_iter().map(|(g, s)| vec![g.to_string(), s.to_string()]))
}

/// `label,tau` rows, keyed by cell label.
pub fn read_tau_map(input: impl Read) -> Result<HashMap<String, f64>> {
    let mut map = HashMap::new();
    for_each_row(input, &["label", "tau"], &[], |r| {
        let label = r.text("label")?.to_string();
        let tau = r.num("tau")?;
        if map.insert(label.clone(), tau).is_some() {
            return Err(r.err(format!("duplicate label `{label}`")));
        }
        Ok(())
    })?;
    Ok(map)
}

/// Attach CATE values to a design by label. Cells without an entry keep
/// whatever they had.
pub fn attach_tau(design: &CellTable, tau: &HashMap<String, f64>) -> Result<CellTable> {
    let values: Vec<f64> = design
        .cells()
        .iter()
        .map(|c| tau.get(&c.label).copied().or(c.tau).unwrap_or(f64::NAN))
        .collect();
    let mut cells = design.cells().to_vec();
    for (c, v) in cells.iter_mut().zip(values) {
        c.tau = if v.is_nan() { None } else { Some(v) };
    }
    CellTable::new(cells)
}

pub fn read_micro(input: impl Read) -> Result<MicroSample> {
    let mut rows = Vec::new();
    let mut cols_seen = None;
    for_each_row(input, &["x", "d"], &["z", "y"], |r| {
        let has = *cols_seen.get_or_insert((r.cols.has("z"), r.cols.has("y")));
        rows.push(MicroRow {
            x: r.text("x")?.to_string(),
            d: r.binary("d")?,
            z: if has.0 { Some(r.binary("z")?) } else { None },
            y: if has.1 { r.opt_num("y")? } else { None },
        });
        Ok(())
    })?;
    Ok(MicroSample { rows })
}

pub fn load_micro(path: impl AsRef<Path>) -> Result<MicroSample> {
    read_micro(open(path.as_ref())?)
}

pub fn write_micro(sample: &MicroSample) -> String {
    let with_z = sample.has_instrument();
    let with_y = sample.rows.iter().any(|r| r.y.is_some());
    let mut header = vec!["x", "d"];
    if with_z {
        header.push("z");
    }
    if with_y {
        header.push("y");
    }
    to_csv(
        &header,
        sample.rows.iter().map(|r| {
            let mut rec = vec![r.x.clone(), r.d.to_string()];
            if with_z {
                rec.push(r.z.unwrap_or(0).to_string());
            }
            if with_y {
                rec.push(r.y.map(|v| v.to_string()).unwrap_or_default());
            }
            rec
        }),
    )
}

/// Long-format panel: one `unit,period,g,y` row per unit and period.
pub fn read_panel(input: impl Read) -> Result<PanelData> {
    struct Partial {
        id: String,
        g: Group,
        y: HashMap<usize, f64>,
    }
    let mut units: Vec<Partial> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for_each_row(input, &["unit", "period", "g", "y"], &[], |r| {
        let id = r.text("unit")?.to_string();
        let period_text = r.text("period")?;
        let period: usize = period_text
            .parse()
            .ok()
            .filter(|&p| p >= 1)
            .ok_or_else(|| r.err(format!("period `{period_text}` is not a positive integer")))?;
        let g = r.group("g")?;
        if g == Group::Period(1) || g == Group::Period(0) {
            return Err(AuditError::Schema(format!("unit `{id}` is treated in the first period")));
        }
        let y = r.num("y")?;
        let k = *index.entry(id.clone()).or_insert_with(|| {
            units.push(Partial { id: id.clone(), g, y: HashMap::new() });
            units.len() - 1
        });
        let unit = &mut units[k];
        if unit.g != g {
            return Err(AuditError::Schema(format!("unit `{id}` has more than one adoption date")));
        }
        if unit.y.insert(period, y).is_some() {
            return Err(AuditError::Schema(format!("unit `{id}` has period {period} twice")));
        }
        Ok(())
    })?;
    let periods = units.iter().flat_map(|u| u.y.keys().copied()).max().unwrap_or(0);
    if periods < 2 {
        return Err(AuditError::Schema("panel needs at least two periods".into()));
    }
    let mut out = Vec::with_capacity(units.len());
    for u in units {
        if let Group::Period(g) = u.g {
            if g > periods {
                return Err(AuditError::Schema(format!(
                    "unit `{}` adopts in period {g}, after the last period {periods}",
                    u.id
                )));
            }
        }
        let y: Option<Vec<f64>> = (1..=periods).map(|t| u.y.get(&t).copied()).collect();
        let y = y.ok_or_else(|| AuditError::UnbalancedPanel(format!("unit `{}` is missing periods", u.id)))?;
        out.push(PanelUnit { id: u.id, g: u.g, y });
    }
    Ok(PanelData { periods, units: out })
}

pub fn load_panel(path: impl AsRef<Path>) -> Result<PanelData> {
    read_panel(open(path.as_ref())?)
}

pub fn write_panel(panel: &PanelData) -> String {
    to_csv(
        &["unit", "period", "g", "y"],
        panel.units.iter().flat_map(|u| {
            u.y.iter()
                .enumerate()
                .map(|(t, y)| vec![u.id.clone(), (t + 1).to_string(), u.g.to_string(), y.to_string()])
        }),
    )
}

/// Empirical distribution of adoption dates.
pub fn panel_to_group_distribution(pd: &PanelData) -> Result<GroupDistribution> {
    if pd.units.is_empty() {
        return Err(AuditError::InvalidInput("panel has no units".into()));
    }
    if let Some(u) = pd.units.iter().find(|u| u.y.len() != pd.periods) {
        return Err(AuditError::UnbalancedPanel(format!(
            "unit `{}` has {} periods, expected {}",
            u.id,
            u.y.len(),
            pd.periods
        )));
    }
    let n = pd.units.len() as f64;
    let mut counts: HashMap<Group, usize> = HashMap::new();
    for u in &pd.units {
        *counts.entry(u.g).or_default() += 1;
    }
    let mut pairs: Vec<(Group, f64)> = counts.into_iter().map(|(g, c)| (g, c as f64 / n)).collect();
    pairs.sort_by_key(|(g, _)| *g);
    GroupDistribution::from_pairs(pd.periods, &pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnconfoundedCell {
    pub label: String,
    pub mass: f64,
    /// P(D = 1 | X).
    pub p: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvDgpCell {
    pub label: String,
    pub mass: f64,
    pub pz: f64,
    /// Complier share.
    pub pc: f64,
    /// Always-taker share; never-takers make up the rest. No defiers.
    #[serde(default)]
    pub p_always: f64,
    /// Complier CATE.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDgp {
    pub g: Group,
    pub share: f64,
    /// Time-constant effect for the group; ignored for the never treated.
    #[serde(default)]
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DgpDesign {
    Unconfoundedness { cells: Vec<UnconfoundedCell> },
    Iv { cells: Vec<IvDgpCell> },
    StaggeredDid { periods: usize, groups: Vec<GroupDgp> },
}

/// A data-generating process whose identifying assumptions hold by
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    #[serde(flatten)]
    pub design: DgpDesign,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub enum Simulated {
    Micro(MicroSample),
    Panel(PanelData),
}

impl Simulated {
    pub fn to_csv(&self) -> String {
        match self {
            Simulated::Micro(s) => write_micro(s),
            Simulated::Panel(p) => write_panel(p),
        }
    }
}

fn check_prob(what: &str, v: f64, open: bool) -> Result<()> {
    let ok = if open { v > 0.0 && v < 1.0 } else { (0.0..=1.0).contains(&v) };
    if ok {
        Ok(())
    } else {
        Err(AuditError::InvalidSpec(format!("{what} = {v} is not a valid probability")))
    }
}

fn check_total(masses: impl Iterator<Item = f64>) -> Result<()> {
    let mut total = 0.0;
    for m in masses {
        if !(m > 0.0) {
            return Err(AuditError::InvalidSpec(format!("mass {m} must be positive")));
        }
        total += m;
    }
    if (total - 1.0).abs() > PROB_TOL {
        return Err(AuditError::InvalidSpec(format!("masses sum to {total}, not 1")));
    }
    Ok(())
}

impl DgpSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: DgpSpec = serde_json::from_str(text).map_err(|e| AuditError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(AuditError::InvalidSpec(format!("noise scale {} must be nonnegative", self.noise)));
        }
        match &self.design {
            DgpDesign::Unconfoundedness { cells } => {
                check_total(cells.iter().map(|c| c.mass))?;
                for c in cells {
                    check_prob("p", c.p, true)?;
                }
            }
            DgpDesign::Iv { cells } => {
                check_total(cells.iter().map(|c| c.mass))?;
                for c in cells {
                    check_prob("pz", c.pz, true)?;
                    check_prob("pc", c.pc, false)?;
                    check_prob("p_always", c.p_always, false)?;
                    check_prob("pc + p_always", c.pc + c.p_always, false)?;
                }
                if cells.iter().all(|c| c.pc == 0.0) {
                    return Err(AuditError::InvalidSpec("no compliers".into()));
                }
            }
            DgpDesign::StaggeredDid { periods, groups } => {
                let pairs: Vec<(Group, f64)> = groups.iter().map(|g| (g.g, g.share)).collect();
                let gd = GroupDistribution::from_pairs(*periods, &pairs).map_err(|e| AuditError::InvalidSpec(e.to_string()))?;
                if gd.support().iter().all(|g| *g == Group::Never) {
                    return Err(AuditError::InvalidSpec("no treated groups".into()));
                }
            }
        }
        Ok(())
    }

    pub fn propensity_table(&self) -> Option<PropensityTable> {
        match &self.design {
            DgpDesign::Unconfoundedness { cells } => Some(PropensityTable {
                cells: cells.iter().map(|c| PropensityCell { label: c.label.clone(), mass: c.mass, p: c.p }).collect(),
            }),
            _ => None,
        }
    }

    /// Instrument moments; `cov(D, Z | X) = pc var(Z | X)` without defiers.
    pub fn iv_table(&self) -> Option<IvCellTable> {
        match &self.design {
            DgpDesign::Iv { cells } => Some(IvCellTable {
                cells: cells
                    .iter()
                    .map(|c| IvCell {
                        label: c.label.clone(),
                        mass: c.mass,
                        pz: c.pz,
                        cov_dz: c.pc * c.pz * (1.0 - c.pz),
                        pc: c.pc,
                    })
                    .collect(),
            }),
            _ => None,
        }
    }

    pub fn group_distribution(&self) -> Option<GroupDistribution> {
        match &self.design {
            DgpDesign::StaggeredDid { periods, groups } => {
                let pairs: Vec<(Group, f64)> = groups.iter().map(|g| (g.g, g.share)).collect();
                GroupDistribution::from_pairs(*periods, &pairs).ok()
            }
            _ => None,
        }
    }

    /// Population design of the canonical estimand for this DGP, with the
    /// true CATEs attached: OLS for unconfoundedness, noninteracted IV for
    /// instruments, and time-constant TWFE for staggered adoption.
    pub fn true_design(&self) -> Result<CellTable> {
        let design = match &self.design {
            DgpDesign::Unconfoundedness { cells } => {
                let d = weights::ols_ate_design(&self.propensity_table().expect("unconfoundedness"))?;
                d.with_tau(&cells.iter().map(|c| c.tau).collect::<Vec<_>>())?
            }
            DgpDesign::Iv { cells } => {
                let d = weights::iv_design(&self.iv_table().expect("iv"))?;
                d.with_tau(&cells.iter().map(|c| c.tau).collect::<Vec<_>>())?
            }
            DgpDesign::StaggeredDid { groups, .. } => {
                let gd = self.group_distribution().ok_or_else(|| AuditError::InvalidSpec("bad groups".into()))?;
                let d = weights::twfe_h_design(&gd)?;
                let tau: Vec<f64> = d
                    .cells()
                    .iter()
                    .map(|c| {
                        groups
                            .iter()
                            .find(|g| format!("g={}", g.g) == c.label)
                            .map_or(0.0, |g| g.tau)
                    })
                    .collect();
                d.with_tau(&tau)?
            }
        };
        Ok(design)
    }
}

fn categorical<R: Rng>(rng: &mut R, cumulative: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

fn cumulative(masses: impl Iterator<Item = f64>) -> Vec<f64> {
    masses
        .scan(0.0, |acc, m| {
            *acc += m;
            Some(*acc)
        })
        .collect()
}

/// Draw `n` units. Unit `i` uses its own random stream, so results do not
/// depend on scheduling.
pub fn simulate(spec: &DgpSpec, n: usize) -> Result<Simulated> {
    spec.validate()?;
    let seed = spec.seed;
    let noise = spec.noise;
    let shock = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        noise * z
    };
    match &spec.design {
        DgpDesign::Unconfoundedness { cells } => {
            let cum = cumulative(cells.iter().map(|c| c.mass));
            let rows = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut rng = rng::stream(seed, i as u64);
                    let c = &cells[categorical(&mut rng, &cum)];
                    let d = u8::from(rng.random::<f64>() < c.p);
                    let y0 = shock(&mut rng);
                    let y = y0 + f64::from(d) * c.tau;
                    MicroRow { x: c.label.clone(), d, z: None, y: Some(y) }
                })
                .collect();
            Ok(Simulated::Micro(MicroSample { rows }))
        }
        DgpDesign::Iv { cells } => {
            let cum = cumulative(cells.iter().map(|c| c.mass));
            let rows = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut rng = rng::stream(seed, i as u64);
                    let c = &cells[categorical(&mut rng, &cum)];
                    let z = u8::from(rng.random::<f64>() < c.pz);
                    let u: f64 = rng.random();
                    let d = if u < c.pc {
                        z
                    } else if u < c.pc + c.p_always {
                        1
                    } else {
                        0
                    };
                    let y0 = shock(&mut rng);
                    let y = y0 + f64::from(d) * c.tau;
                    MicroRow { x: c.label.clone(), d, z: Some(z), y: Some(y) }
                })
                .collect();
            Ok(Simulated::Micro(MicroSample { rows }))
        }
        DgpDesign::StaggeredDid { periods, groups } => {
            let cum = cumulative(groups.iter().map(|g| g.share));
            let big_t = *periods;
            let units = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut rng = rng::stream(seed, i as u64);
                    let k = categorical(&mut rng, &cum);
                    let grp = &groups[k];
                    // common trend plus a group level keeps trends parallel
                    let level = 0.25 * k as f64;
                    let y = (1..=big_t)
                        .map(|t| {
                            let treated = matches!(grp.g, Group::Period(g) if g <= t);
                            0.1 * t as f64 + level + shock(&mut rng) + if treated { grp.tau } else { 0.0 }
                        })
                        .collect();
                    PanelUnit { id: format!("u{i}"), g: grp.g, y }
                })
                .collect();
            Ok(Simulated::Panel(PanelData { periods: big_t, units }))
        }
    }
}

/// Cell label values parsed as coordinates, if every label is numeric.
pub fn numeric_labels(design: &CellTable) -> Option<Vec<Vec<f64>>> {
    design.cells().iter().map(|c| parse_coords(&c.label)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_without_instrument() {
        let s = read_micro("# comment\nx,d,y\na,1,2.5\nb,0,-1\n".as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert!(!s.has_instrument());
        assert_eq!(s.rows[0].y, Some(2.5));
    }

    #[test]
    fn micro_errors_carry_lines() {
        let err = read_micro("x,d\na,1\nb,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, AuditError::Parse { line: 3, .. }), "{err:?}");
        assert!(matches!(read_micro("x,q\n".as_bytes()), Err(AuditError::Schema(_))));
        assert!(matches!(read_micro("x\n".as_bytes()), Err(AuditError::Schema(_))));
    }

    #[test]
    fn cell_table_csv() {
        let d = read_cell_table("label,p,a,w0,tau\n1,0.2,0.24,1,2\n2,0.8,0.09,1,\n".as_bytes()).unwrap();
        assert_eq!(d.cells()[0].tau, Some(2.0));
        assert_eq!(d.cells()[1].tau, None);
        assert_eq!(d.cells()[1].coords, Some(vec![2.0]));
        assert_eq!(read_cell_table(write_cell_table(&d).as_bytes()).unwrap(), d);
    }

    #[test]
    fn group_csv_with_inf() {
        let gd = read_group_distribution("g,share\n2,0.25\n3,0.25\ninf,0.5\n".as_bytes(), None).unwrap();
        assert_eq!(gd.periods(), 3);
        assert_eq!(gd.share(Group::Never), 0.5);
    }

    fn panel_rows(gs: &[&str], periods: usize) -> String {
        let mut s = String::from("unit,period,g,y\n");
        for (i, g) in gs.iter().enumerate() {
            for t in 1..=periods {
                s.push_str(&format!("u{i},{t},{g},{}\n", t as f64 * 0.5));
            }
        }
        s
    }

    #[test]
    fn panel_shares() {
        let text = panel_rows(&["2", "3", "3", "3", "3", "inf"], 3);
        let pd = read_panel(text.as_bytes()).unwrap();
        assert_eq!(pd.units[5].g, Group::Never);
        let gd = panel_to_group_distribution(&pd).unwrap();
        assert!((gd.share(Group::Period(2)) - 1.0 / 6.0).abs() < 1e-15);
        assert!((gd.share(Group::Period(3)) - 2.0 / 3.0).abs() < 1e-15);
        assert!((gd.share(Group::Never) - 1.0 / 6.0).abs() < 1e-15);

        let two = read_panel(panel_rows(&["2", "inf"], 2).as_bytes()).unwrap();
        let gd = panel_to_group_distribution(&two).unwrap();
        assert_eq!(gd.support(), vec![Group::Period(2), Group::Never]);

        let never = read_panel(panel_rows(&["inf", "inf"], 3).as_bytes()).unwrap();
        let gd = panel_to_group_distribution(&never).unwrap();
        assert!(matches!(weights::twfe_h_design(&gd), Err(AuditError::NoTreatedGroups)));
    }

    #[test]
    fn panel_schema_errors() {
        let dup = "unit,period,g,y\na,1,2,0\na,1,2,0\na,2,2,1\n";
        assert!(matches!(read_panel(dup.as_bytes()), Err(AuditError::Schema(_))));
        let two_dates = "unit,period,g,y\na,1,2,0\na,2,3,1\n";
        assert!(matches!(read_panel(two_dates.as_bytes()), Err(AuditError::Schema(_))));
        let missing = "unit,period,g,y\na,1,2,0\na,2,2,1\nb,1,inf,0\n";
        assert!(matches!(read_panel(missing.as_bytes()), Err(AuditError::UnbalancedPanel(_))));

        let ragged = PanelData {
            periods: 3,
            units: vec![PanelUnit { id: "a".into(), g: Group::Never, y: vec![0.0, 1.0] }],
        };
        assert!(matches!(panel_to_group_distribution(&ragged), Err(AuditError::UnbalancedPanel(_))));
    }

    #[test]
    fn spec_json() {
        let text = r#"{"family":"unconfoundedness","cells":[
            {"label":"1","mass":0.2,"p":0.4,"tau":2.0},
            {"label":"2","mass":0.8,"p":0.1,"tau":4.0}],"seed":3}"#;
        let spec = DgpSpec::from_json(text).unwrap();
        assert_eq!(spec.noise, 1.0);
        let d = spec.true_design().unwrap();
        let r = crate::validity::uniform_internal_validity(&d).unwrap();
        assert!((r.p_internal - 0.5).abs() < 1e-12);

        let bad = r#"{"family":"unconfoundedness","cells":[{"label":"1","mass":1.0,"p":1.0,"tau":0}]}"#;
        assert!(matches!(DgpSpec::from_json(bad), Err(AuditError::InvalidSpec(_))));
    }

    #[test]
    fn staggered_truth() {
        let text = r#"{"family":"staggered_did","periods":3,"groups":[
            {"g":2,"share":0.16666666666666666,"tau":1},
            {"g":3,"share":0.6666666666666666,"tau":2},
            {"g":"inf","share":0.16666666666666669}]}"#;
        let spec = DgpSpec::from_json(text).unwrap();
        let r = crate::validity::uniform_internal_validity(&spec.true_design().unwrap()).unwrap();
        assert!((r.p_internal - 1.0).abs() < 1e-12);
        let Simulated::Panel(p) = simulate(&spec, 50).unwrap() else { panic!("panel expected") };
        assert_eq!(p.units.len(), 50);
        assert!(p.units.iter().all(|u| u.y.len() == 3));
    }

    #[test]
    fn simulation_is_seeded() {
        let text = r#"{"family":"iv","cells":[{"label":"a","mass":1.0,"pz":0.5,"pc":0.6,"p_always":0.1,"tau":1}]}"#;
        let spec = DgpSpec::from_json(text).unwrap();
        let a = simulate(&spec, 200).unwrap();
        assert_eq!(a, simulate(&spec, 200).unwrap());
        let Simulated::Micro(s) = a else { panic!("micro expected") };
        assert!(s.has_instrument());
    }
}
