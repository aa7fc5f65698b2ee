use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use estimand_audit::audit::{self, AuditOptions, DesignFamily};
use estimand_audit::data::{self, DgpSpec};
use estimand_audit::inference::{self, BootstrapConfig, BootstrapResult, Family};
use estimand_audit::{bounds, model, validity, weights, AuditError, CellTable, Result, SupportBounds};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "audit", version, about = "Audit weighted treatment-effect estimands")]
struct Cli {
    /// Seed for every random step (bootstrap, simulation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write the machine-readable result to this file.
    #[arg(long, global = true, value_name = "PATH")]
    json: Option<PathBuf>,
    /// Print nothing on stdout except requested CSV output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DesignArgs {
    /// cells, ols_ate, ols_att, ols_atu, iv, tsls, twfe_cdh or twfe_h.
    #[arg(long)]
    family: DesignFamily,
    /// Table for the family: `label,p,a,w0,tau` for cells, `label,mass,p`
    /// for OLS, `label,mass,pz,cov_dz,pc` for IV, `g,share` for TWFE.
    #[arg(long, value_name = "CSV", required_unless_present = "panel")]
    input: Option<PathBuf>,
    /// Long panel `unit,period,g,y` for the TWFE families.
    #[arg(long, value_name = "CSV", conflicts_with = "input")]
    panel: Option<PathBuf>,
    /// CATE values by cell label (`label,tau`).
    #[arg(long, value_name = "CSV")]
    tau: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// ols_ate, ols_att, ols_atu, iv or tsls.
    #[arg(long)]
    family: Family,
    /// Micro data `x,d[,z][,y]`.
    #[arg(long, value_name = "CSV")]
    data: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    c0: f64,
    #[arg(long, default_value_t = 0.5)]
    xi0: f64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Existence checks, internal validity and optional bounds for a design.
    Audit {
        #[command(flatten)]
        design: DesignArgs,
        /// Target for the fixed-CATE measure; defaults to the estimand.
        #[arg(long, allow_hyphen_values = true)]
        mu0: Option<f64>,
        /// Support of treatment effects as `LO,HI`.
        #[arg(long, value_parser = parse_support, allow_hyphen_values = true)]
        support: Option<SupportBounds>,
        /// Bound on CATE differences for the bounded-difference check.
        #[arg(long)]
        difference_bound: Option<f64>,
    },
    /// Bounds on the base-population ATE.
    Bounds {
        #[command(flatten)]
        design: DesignArgs,
        /// Support of treatment effects as `LO,HI`.
        #[arg(long, value_parser = parse_support, allow_hyphen_values = true)]
        support: SupportBounds,
        /// Value of the estimand; computed from CATEs when omitted.
        #[arg(long, allow_hyphen_values = true)]
        mu: Option<f64>,
    },
    /// Plug-in estimate of internal validity from micro data.
    Estimate {
        #[command(flatten)]
        sample: SampleArgs,
        /// Bootstrap replications; 0 skips the confidence interval.
        #[arg(long, default_value_t = 0)]
        boot: usize,
    },
    /// One-sided bootstrap confidence interval with every draw.
    Bootstrap {
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long = "B", default_value_t = 400)]
        b: usize,
    },
    /// Simulate data from a JSON spec and print it as CSV.
    Simulate {
        #[arg(long, value_name = "JSON")]
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// CSV data for plotting the uniform (1) or trimming (2) picture.
    FigureData {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        figure: u8,
        #[command(flatten)]
        design: DesignArgs,
        #[arg(long, allow_hyphen_values = true)]
        mu0: Option<f64>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn parse_support(s: &str) -> std::result::Result<SupportBounds, String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    SupportBounds::new(lo, hi).map_err(|e| e.to_string())
}

fn need_input(args: &DesignArgs) -> Result<&Path> {
    args.input
        .as_deref()
        .ok_or_else(|| AuditError::InvalidInput(format!("family `{}` needs --input", args.family)))
}

fn load_design(args: &DesignArgs) -> Result<CellTable> {
    let open = |p: &Path| -> Result<fs::File> { Ok(fs::File::open(p)?) };
    let family = args.family;
    if args.panel.is_some() && !matches!(family, DesignFamily::TwfeCdh | DesignFamily::TwfeH) {
        return Err(AuditError::InvalidInput("--panel only applies to the TWFE families".into()));
    }
    let design = match family {
        DesignFamily::Cells => data::load_cell_table(need_input(args)?)?,
        DesignFamily::OlsAte | DesignFamily::OlsAtt | DesignFamily::OlsAtu => {
            let pt = data::read_propensity_table(open(need_input(args)?)?)?;
            match family {
                DesignFamily::OlsAte => weights::ols_ate_design(&pt)?,
                DesignFamily::OlsAtt => weights::ols_att_design(&pt)?,
                _ => weights::ols_atu_design(&pt)?,
            }
        }
        DesignFamily::Iv | DesignFamily::Tsls => {
            let iv = data::read_iv_table(open(need_input(args)?)?)?;
            if family == DesignFamily::Iv {
                weights::iv_design(&iv)?
            } else {
                weights::tsls_design(&iv)?
            }
        }
        DesignFamily::TwfeCdh | DesignFamily::TwfeH => {
            let gd = match &args.panel {
                Some(p) => data::panel_to_group_distribution(&data::load_panel(p)?)?,
                None => data::read_group_distribution(open(need_input(args)?)?, None)?,
            };
            if family == DesignFamily::TwfeCdh {
                weights::twfe_cdh_design(&gd)?
            } else {
                weights::twfe_h_design(&gd)?
            }
        }
    };
    match &args.tau {
        Some(p) => data::attach_tau(&design, &data::read_tau_map(open(p)?)?),
        None => Ok(design),
    }
}

struct Output {
    json: Option<PathBuf>,
    quiet: bool,
}

impl Output {
    fn text(&self, s: &str) {
        if !self.quiet {
            print!("{s}");
        }
    }

    fn write_json<T: Serialize>(&self, value: &T) -> Result<()> {
        if let Some(path) = &self.json {
            let mut text = serde_json::to_string_pretty(value)?;
            text.push('\n');
            fs::write(path, text)?;
        }
        Ok(())
    }

    /// CSV goes to `out` when given, else to stdout even with `--quiet`.
    fn csv(&self, out: &Option<PathBuf>, text: &str) -> Result<()> {
        match out {
            Some(p) => fs::write(p, text)?,
            None => std::io::stdout().write_all(text.as_bytes())?,
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct BoundsOutput {
    schema_version: u32,
    family: DesignFamily,
    mu: f64,
    support: SupportBounds,
    uniform_p: f64,
    uniform_exists: bool,
    uniform: Option<bounds::Interval>,
    general: bounds::Interval,
    decomposition: bounds::SignDecomposition,
}

#[derive(Serialize)]
struct DrawSummary {
    count: usize,
    mean: f64,
    sd: f64,
    min: f64,
    max: f64,
    q05: f64,
    q50: f64,
    q95: f64,
}

impl DrawSummary {
    fn new(draws: &[f64]) -> Option<Self> {
        if draws.is_empty() {
            return None;
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let q = |a| inference::empirical_quantile(draws, a);
        Some(DrawSummary {
            count: draws.len(),
            mean,
            sd: var.sqrt(),
            min: draws.iter().copied().fold(f64::INFINITY, f64::min),
            max: draws.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            q05: q(0.05),
            q50: q(0.5),
            q95: q(0.95),
        })
    }
}

#[derive(Serialize)]
struct BootstrapSummary {
    b: usize,
    alpha: f64,
    seed: u64,
    status: inference::BootstrapStatus,
    q_alpha: Option<f64>,
    ci: [f64; 2],
    redraws: usize,
    trim_instability: f64,
    argmax_hat: Vec<String>,
    psi_draws: Option<DrawSummary>,
}

#[derive(Serialize)]
struct EstimateOutput {
    schema_version: u32,
    family: Family,
    n: usize,
    cells: Vec<EstimatedCell>,
    provenance: String,
    exists: bool,
    p_hat: f64,
    p_hat_raw: f64,
    a_max_hat: f64,
    c_n: f64,
    trimmed: Vec<String>,
    bootstrap: Option<BootstrapSummary>,
}

#[derive(Serialize)]
struct EstimatedCell {
    label: String,
    count: usize,
    p: f64,
    a: f64,
    w0: f64,
}

fn config(sample: &SampleArgs, b: usize, seed: u64) -> BootstrapConfig {
    BootstrapConfig { b, alpha: sample.alpha, c0: sample.c0, xi0: sample.xi0, seed }
}

fn bootstrap_summary(res: &BootstrapResult, cfg: &BootstrapConfig, labels: &[String]) -> BootstrapSummary {
    BootstrapSummary {
        b: cfg.b,
        alpha: cfg.alpha,
        seed: cfg.seed,
        status: res.status,
        q_alpha: res.q_alpha,
        ci: res.ci,
        redraws: res.redraws,
        trim_instability: res.trim_instability,
        argmax_hat: res.argmax_hat.iter().map(|&k| labels[k].clone()).collect(),
        psi_draws: DrawSummary::new(&res.draws),
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = Output { json: cli.json.clone(), quiet: cli.quiet };
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Audit { design, mu0, support, difference_bound } => {
            let table = load_design(&design)?;
            let opts = AuditOptions { mu0, support, difference_bound };
            let report = audit::run_audit(&table, design.family, &opts)?;
            out.text(&report.render_table());
            out.write_json(&report)?;
        }
        Command::Bounds { design, support, mu } => {
            let table = load_design(&design)?;
            let mu = match mu {
                Some(v) => v,
                None => model::mu(&model::normalize_sign(&table)?)?,
            };
            let uniform = validity::uniform_internal_validity(&table)?;
            let from_uniform = uniform
                .exists
                .then(|| bounds::ate_bounds_from_validity(mu, uniform.p_internal, support))
                .transpose()?;
            let general = bounds::ate_bounds_general(&table, mu, support)?;
            let result = BoundsOutput {
                schema_version: audit::SCHEMA_VERSION,
                family: design.family,
                mu,
                support,
                uniform_p: uniform.p_internal,
                uniform_exists: uniform.exists,
                uniform: from_uniform,
                general,
                decomposition: bounds::decompose_negative_weights(&table)?,
            };
            let mut text = format!("mu = {mu:.6}, P = {:.6}\n", uniform.p_internal);
            match from_uniform {
                Some(i) => text += &format!("bounds from internal validity: [{:.6}, {:.6}] (width {:.6})\n", i.lo, i.hi, i.width),
                None => text += "bounds from internal validity: none (negative weights)\n",
            }
            text += &format!("bounds for any weight sign:    [{:.6}, {:.6}] (width {:.6})\n", general.lo, general.hi, general.width);
            out.text(&text);
            out.write_json(&result)?;
        }
        Command::Estimate { sample, boot } => {
            let micro = data::load_micro(&sample.data)?;
            let cfg = config(&sample, boot.max(1), seed);
            cfg.validate()?;
            let ed = inference::estimate_design(&micro, sample.family)?;
            let est = inference::estimate_uniform_validity(&ed, &cfg)?;
            let labels = ed.labels();
            let boot_summary = if boot > 0 {
                let res = inference::bootstrap_ci(&micro, sample.family, &cfg)?;
                Some(bootstrap_summary(&res, &cfg, &labels))
            } else {
                None
            };
            let mut text = format!(
                "P_hat = {:.6} (raw {:.6}) from n = {} over {} cells; c_n = {:.4}, {} trimmed\n",
                est.p_hat,
                est.p_hat_raw,
                ed.n,
                labels.len(),
                est.c_n,
                est.trimmed.len()
            );
            if !est.exists {
                text += "estimated weights are negative somewhere: no causal representation uniformly in tau0\n";
            }
            if let Some(b) = &boot_summary {
                match b.q_alpha {
                    Some(q) => {
                        text += &format!(
                            "one-sided {:.0}% interval [{:.6}, {:.6}], q_alpha = {q:.6}, {} redraws\n",
                            100.0 * (1.0 - b.alpha),
                            b.ci[0],
                            b.ci[1],
                            b.redraws
                        )
                    }
                    None => text += "bootstrap skipped\n",
                }
            }
            out.text(&text);
            let result = EstimateOutput {
                schema_version: audit::SCHEMA_VERSION,
                family: sample.family,
                n: ed.n,
                cells: labels
                    .iter()
                    .enumerate()
                    .map(|(k, l)| EstimatedCell {
                        label: l.clone(),
                        count: ed.counts[k],
                        p: ed.theta.p[k],
                        a: ed.theta.a[k],
                        w0: ed.theta.w0[k],
                    })
                    .collect(),
                provenance: ed.provenance.clone(),
                exists: est.exists,
                p_hat: est.p_hat,
                p_hat_raw: est.p_hat_raw,
                a_max_hat: est.a_max_hat,
                c_n: est.c_n,
                trimmed: est.trimmed.iter().map(|&k| labels[k].clone()).collect(),
                bootstrap: boot_summary,
            };
            out.write_json(&result)?;
        }
        Command::Bootstrap { sample, b } => {
            let micro = data::load_micro(&sample.data)?;
            let cfg = config(&sample, b, seed);
            let res = inference::bootstrap_ci(&micro, sample.family, &cfg)?;
            out.text(&format!(
                "P_hat = {:.6}, one-sided interval [{:.6}, {:.6}] from {} draws, q_alpha = {}\n",
                res.p_hat,
                res.ci[0],
                res.ci[1],
                res.draws.len(),
                res.q_alpha.map_or("n/a".into(), |q| format!("{q:.6}"))
            ));
            out.write_json(&res)?;
        }
        Command::Simulate { spec, n, out: path } => {
            let mut spec = DgpSpec::from_json(&fs::read_to_string(&spec)?)?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let sim = data::simulate(&spec, n)?;
            out.csv(&path, &sim.to_csv())?;
            if out.json.is_some() {
                let truth = spec.true_design()?;
                let report = validity::uniform_internal_validity(&truth)?;
                out.write_json(&serde_json::json!({
                    "schema_version": audit::SCHEMA_VERSION,
                    "n": n,
                    "seed": spec.seed,
                    "true_design": truth,
                    "true_internal_validity": report,
                }))?;
            }
        }
        Command::FigureData { figure, design, mu0, out: path } => {
            let table = load_design(&design)?;
            let csv = if figure == 1 { audit::figure1_csv(&table)? } else { audit::figure2_csv(&table, mu0)? };
            out.csv(&path, &csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
