//! Command-line front end: scenario runs, config files, seed sweeps, and
//! plot-data extraction on top of the `gstrack` library.
//!
//! Configuration precedence, lowest to highest: preset or config file,
//! then the `GS_TRACK_SEED` environment variable, then command-line flags.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gstrack::harness::{
    load_config, run_scenario, seed_from_env, write_reports, ConfigOverrides, PolicyKind,
    ScenarioConfig, ScenarioKind, TraceReport,
};

#[derive(Parser, Debug)]
#[command(
    name = "gstrack",
    version,
    about = "Tracking experiments for time-varying signals on graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the heat-source sensor-network scenario and write its reports.
    RunSensor(RunArgs),
    /// Run the opinion-dynamics social-network scenario and write its reports.
    RunSocial(RunArgs),
    /// Run the scenario described by a TOML config file.
    RunConfig(ConfigArgs),
    /// Run one scenario over consecutive seeds and aggregate per-step errors.
    Sweep(SweepArgs),
    /// Pivot a trace CSV into per-step error columns, one per policy.
    EmitPlotData(PlotArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML file with a `scenario` key and any field overrides.
    file: PathBuf,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Number of consecutive seeds to run, starting at the base seed.
    #[arg(long)]
    seeds: u64,
    /// Scenario preset to sweep.
    #[arg(long, default_value = "sensor", conflicts_with = "config")]
    scenario: ScenarioKind,
    /// Config file to sweep instead of a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Trace CSV produced by a run.
    report: PathBuf,
    /// Destination of the pivoted CSV.
    #[arg(long)]
    out: PathBuf,
}

/// Every scenario field as an optional flag, applied over the base config.
#[derive(Args, Debug, Default)]
struct OverrideArgs {
    /// Master random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of tracked steps.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    vertices: Option<usize>,
    /// Connection radius of the geometric graph.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    communities: Option<usize>,
    #[arg(long)]
    community_size: Option<usize>,
    #[arg(long)]
    p_intra: Option<f64>,
    #[arg(long)]
    p_inter: Option<f64>,
    /// Per-step edge activation probability of the social graph.
    #[arg(long)]
    edge_activation: Option<f64>,
    /// Bounded-confidence radius of the opinion update.
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    process_noise_var: Option<f64>,
    #[arg(long)]
    obs_noise_var: Option<f64>,
    /// Average per-step sampling budget.
    #[arg(long)]
    avg_budget: Option<usize>,
    /// Per-step budget cap.
    #[arg(long)]
    step_cap: Option<usize>,
    /// Weight of the second planned step in the two-step objective.
    #[arg(long)]
    discount: Option<f64>,
    #[arg(long)]
    translation_scale: Option<f64>,
    #[arg(long)]
    init_cov_scale: Option<f64>,
    /// Comma-separated policies: proposed, greedy-instant, info-gain, random.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<PolicyKind>>,
    /// Re-plan every step instead of every other step.
    #[arg(long)]
    recompute_each_step: Option<bool>,
    #[arg(long)]
    solver_max_iters: Option<usize>,
    #[arg(long)]
    solver_grad_tol: Option<f64>,
    /// Directory for trace and summary reports.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl OverrideArgs {
    fn to_overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            scenario: None,
            seed: self.seed,
            horizon: self.horizon,
            vertices: self.vertices,
            radius: self.radius,
            communities: self.communities,
            community_size: self.community_size,
            p_intra: self.p_intra,
            p_inter: self.p_inter,
            edge_activation: self.edge_activation,
            confidence: self.confidence,
            process_noise_var: self.process_noise_var,
            obs_noise_var: self.obs_noise_var,
            avg_budget: self.avg_budget,
            step_cap: self.step_cap,
            discount: self.discount,
            translation_scale: self.translation_scale,
            init_cov_scale: self.init_cov_scale,
            policies: self.policies.clone(),
            recompute_each_step: self.recompute_each_step,
            solver_max_iters: self.solver_max_iters,
            solver_grad_tol: self.solver_grad_tol,
            out_dir: self.out_dir.clone(),
        }
    }
}

/// Parses `argv` and executes one subcommand. Returns the process exit
/// code: 0 on success, 1 on runtime or validation errors, 2 on usage
/// errors (clap's convention).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::RunSensor(a) => run_one(ScenarioConfig::sensor(), &a.overrides),
        Command::RunSocial(a) => run_one(ScenarioConfig::social(), &a.overrides),
        Command::RunConfig(a) => {
            let base = load_config(&a.file)
                .with_context(|| format!("loading config {}", a.file.display()))?;
            run_one(base, &a.overrides)
        }
        Command::Sweep(a) => sweep(&a),
        Command::EmitPlotData(a) => emit_plot_data(&a.report, &a.out),
    }
}

/// Base config + environment seed + flag overrides, validated.
fn effective_config(mut base: ScenarioConfig, o: &OverrideArgs) -> Result<ScenarioConfig> {
    if let Some(seed) = seed_from_env()? {
        base.seed = seed;
    }
    base.apply_overrides(&o.to_overrides());
    base.validate()?;
    Ok(base)
}

fn run_one(base: ScenarioConfig, o: &OverrideArgs) -> Result<()> {
    let cfg = effective_config(base, o)?;
    let report = run_scenario(&cfg)?;
    let paths = write_reports(&report)?;
    println!("{}", paths.trace_csv.display());
    println!("{}", paths.summary_json.display());
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let base = match &a.config {
        Some(path) => {
            load_config(path).with_context(|| format!("loading config {}", path.display()))?
        }
        None => ScenarioConfig::preset(a.scenario),
    };
    let base = effective_config(base, &a.overrides)?;
    let mut reports = Vec::with_capacity(a.seeds as usize);
    for i in 0..a.seeds {
        let mut cfg = base.clone();
        cfg.seed = base.seed.checked_add(i).context("seed range overflow")?;
        cfg.validate()?;
        let report = run_scenario(&cfg)?;
        write_reports(&report)?;
        reports.push(report);
    }
    let aggregate = render_sweep_csv(&reports)?;
    fs::create_dir_all(&base.out_dir)
        .with_context(|| format!("creating {}", base.out_dir.display()))?;
    let path = base
        .out_dir
        .join(format!("{}-sweep-nmse.csv", base.scenario));
    fs::write(&path, aggregate).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    Ok(())
}

/// Long-to-wide aggregation of a seed sweep: one row per (step, policy),
/// one error column per seed.
fn render_sweep_csv(reports: &[TraceReport]) -> Result<String> {
    let first = reports.first().context("sweep produced no reports")?;
    let mut out = String::from("t,policy");
    for r in reports {
        out.push_str(&format!(",seed_{}", r.config.seed));
    }
    out.push('\n');
    let policies: Vec<PolicyKind> = first.traces.iter().map(|tr| tr.policy).collect();
    for t in 1..=first.config.horizon {
        for (k, policy) in policies.iter().enumerate() {
            out.push_str(&format!("{t},{policy}"));
            for r in reports {
                let trace = &r.traces[k];
                if trace.policy != *policy {
                    bail!("seed {} traces are ordered differently", r.config.seed);
                }
                let rec = trace
                    .records
                    .get(t - 1)
                    .with_context(|| format!("seed {} lacks step {t}", r.config.seed))?;
                out.push_str(&format!(",{}", rec.nmse));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Reads a trace CSV and writes a wide CSV with one per-step error column
/// per policy, ready for plotting.
fn emit_plot_data(report: &Path, out: &Path) -> Result<()> {
    let text =
        fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("trace CSV is empty")?;
    let mut cols = header.split(',');
    if cols.next() != Some("t") || cols.next() != Some("policy") || cols.next() != Some("nmse") {
        bail!(
            "{} does not look like a trace CSV (header {header:?})",
            report.display()
        );
    }
    let mut policies: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), String> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let (t, policy, nmse) = (fields.next(), fields.next(), fields.next());
        let (Some(t), Some(policy), Some(nmse)) = (t, policy, nmse) else {
            bail!("line {}: expected t,policy,nmse,...", lineno + 2);
        };
        let t: usize = t
            .parse()
            .with_context(|| format!("line {}: bad step {t:?}", lineno + 2))?;
        let col = match policies.iter().position(|p| p == policy) {
            Some(i) => i,
            None => {
                policies.push(policy.to_string());
                policies.len() - 1
            }
        };
        cells.insert((t, col), nmse.to_string());
    }
    if policies.is_empty() {
        bail!("{} has no data rows", report.display());
    }
    let mut rendered = String::from("t");
    for p in &policies {
        rendered.push(',');
        rendered.push_str(p);
    }
    rendered.push('\n');
    let steps: Vec<usize> = {
        let mut s: Vec<usize> = cells.keys().map(|&(t, _)| t).collect();
        s.dedup();
        s
    };
    for t in steps {
        rendered.push_str(&t.to_string());
        for col in 0..policies.len() {
            let cell = cells
                .get(&(t, col))
                .with_context(|| format!("policy {} has no record at step {t}", policies[col]))?;
            rendered.push(',');
            rendered.push_str(cell);
        }
        rendered.push('\n');
    }
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    fs::write(out, rendered).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", out.display());
    Ok(())
}
