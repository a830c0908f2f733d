//! `glyctube` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or malformed input, 2 safety violation,
//! 3 infeasible design.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glyctube::config::{parse_override, ControllerKind, Scenario};
use glyctube::feasibility::{assemble_inputs, check, synthesize_gains, FeasibilityReport};
use glyctube::metrics::{comparison_table, compute_report, GlycemicReport};
use glyctube::scenarios::{run_monte_carlo, threads_from_env};
use glyctube::sim::{check_invariance, InvarianceCheck, SimTrace};
use serde_json::json;

const EXIT_USAGE: u8 = 1;
const EXIT_UNSAFE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "glyctube",
    version,
    about = "Closed-loop insulin delivery simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the scenario once with its configured controller.
    Simulate(Common),
    /// Run a batch of randomized instances of the scenario.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        /// Number of runs, overriding `scenario.n_runs`.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Check the six feasibility conditions for the configured GSTC design.
    Feasibility(Common),
    /// Search gains and funnels that satisfy the feasibility conditions.
    Synthesize(Common),
    /// Run several controllers on the same scenario and seed.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated controller names (default: all).
        #[arg(long, value_delimiter = ',')]
        controllers: Option<Vec<String>>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario JSON file.
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dotted-key override, e.g. `--set sim.cgm_noise_sigma=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for the CGM noise and the Monte Carlo draws.
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Usage(String),
    Exit(u8),
}

impl From<glyctube::Error> for Failure {
    fn from(e: glyctube::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

impl Common {
    fn load(&self) -> Result<Scenario, Failure> {
        let mut overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<glyctube::Result<Vec<_>>>()?;
        if let Some(seed) = self.seed {
            overrides.push(("sim.seed".into(), seed.to_string()));
            overrides.push(("scenario.seed".into(), seed.to_string()));
        }
        let scenario = Scenario::load(&self.scenario, &overrides)?;
        fs::create_dir_all(&self.out)
            .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(scenario)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_trace(path: &Path, trace: &SimTrace) -> Outcome {
    trace.write_csv(BufWriter::new(File::create(path)?), false)?;
    Ok(())
}

fn invariance_lines(inv: &InvarianceCheck, band: (f64, f64)) -> String {
    format!(
        "glucose range [{:.2}, {:.2}] mg/dL, band [{}, {}]: {} violating steps\n\
         funnel violations: x {}, i {}; input violations {}\n",
        inv.min_g_abs,
        inv.max_g_abs,
        band.0,
        band.1,
        inv.glucose_violations,
        inv.funnel_x_violations,
        inv.funnel_i_violations,
        inv.input_violations
    )
}

fn evaluate_run(
    s: &Scenario,
    kind: ControllerKind,
) -> Result<(SimTrace, GlycemicReport, InvarianceCheck), Failure> {
    let trace = s.simulate(kind)?;
    let starts: Vec<f64> = s.protocol.events.iter().map(|e| e.start_time).collect();
    let report = compute_report(&trace, &starts, &s.thresholds)?;
    let (lo, hi) = s.safety_band();
    let u_bar = s
        .controller
        .resolved()
        .build(kind, &s.nominal, s.sim.ts_control)?
        .pump_limit();
    let inv = check_invariance(&trace, lo, hi, u_bar);
    Ok((trace, report, inv))
}

fn simulate(c: &Common) -> Outcome {
    let s = c.load()?;
    let kind = s.controller.kind;
    let (trace, report, inv) = evaluate_run(&s, kind)?;
    write_trace(&c.path("trace.csv"), &trace)?;
    write_json(&c.path("report.json"), &report)?;
    let summary = format!(
        "controller {kind}\n{}{}",
        report.table(),
        invariance_lines(&inv, s.safety_band())
    );
    fs::write(c.path("summary.txt"), &summary)?;
    print!("{summary}");
    if inv.glucose_safe() {
        Ok(())
    } else {
        eprintln!("safety violation: glucose or input left its bounds");
        Err(Failure::Exit(EXIT_UNSAFE))
    }
}

fn montecarlo(c: &Common, runs: Option<usize>) -> Outcome {
    let mut s = c.load()?;
    if let Some(n) = runs {
        s.scenario.n_runs = n;
        s.validate()?;
    }
    let (summary, outcomes) = run_monte_carlo(&s, threads_from_env())?;
    let dir = c.path("runs");
    fs::create_dir_all(&dir)?;
    for run in &outcomes {
        write_json(&dir.join(format!("run_{:04}.json", run.index)), run)?;
    }
    write_json(&c.path("summary.json"), &summary)?;
    let text = summary.table();
    fs::write(c.path("summary.txt"), &text)?;
    print!("{text}");
    if summary.all_safe() {
        Ok(())
    } else {
        eprintln!(
            "safety violation in {} of {} runs",
            summary.n_runs - summary.safe_runs,
            summary.n_runs
        );
        Err(Failure::Exit(EXIT_UNSAFE))
    }
}

fn verdict(report: &FeasibilityReport) -> Outcome {
    if report.pass {
        Ok(())
    } else {
        eprintln!("infeasible: binding condition {}", report.binding);
        Err(Failure::Exit(EXIT_INFEASIBLE))
    }
}

fn feasibility(c: &Common) -> Outcome {
    let s = c.load()?;
    let config = s.controller.resolved().gstc;
    let ctx = s.design_context(s.estimation_radii()?);
    let (inputs, rates) = assemble_inputs(&config, &ctx)?;
    let report = check(&inputs);
    write_json(&c.path("feasibility.json"), &report)?;
    write_json(
        &c.path("feasibility_audit.json"),
        &json!({ "inputs": inputs, "rates": rates }),
    )?;
    print!("{}", report.table());
    verdict(&report)
}

fn synthesize(c: &Common) -> Outcome {
    let mut s = c.load()?;
    let problem = s.synthesis_problem(s.estimation_radii()?);
    let result = synthesize_gains(&problem, &s.synthesis.grid)?;
    write_json(&c.path("gstc_config.json"), &result.config)?;
    write_json(&c.path("feasibility.json"), &result.report)?;
    s.controller.gstc = result.config;
    s.controller.u_bar = None;
    fs::write(c.path("scenario.json"), s.to_json_pretty()?)?;
    print!("{}", result.report.table());
    println!(
        "{} candidates evaluated, objective {:.6e}",
        result.evaluated, result.objective
    );
    verdict(&result.report)
}

fn compare(c: &Common, names: Option<&[String]>) -> Outcome {
    let kinds: Vec<ControllerKind> = match names {
        Some(names) => names
            .iter()
            .map(|n| n.trim().parse::<ControllerKind>())
            .collect::<glyctube::Result<_>>()?,
        None => ControllerKind::ALL.to_vec(),
    };
    let s = c.load()?;
    let mut results = Vec::new();
    for kind in &kinds {
        let (trace, report, inv) = evaluate_run(&s, *kind)?;
        write_trace(&c.path(&format!("trace_{kind}.csv")), &trace)?;
        results.push((kind.name(), report, inv));
    }
    let reports: serde_json::Map<String, serde_json::Value> = results
        .iter()
        .map(|(n, r, _)| Ok((n.to_string(), serde_json::to_value(r)?)))
        .collect::<Result<_, serde_json::Error>>()?;
    write_json(&c.path("reports.json"), &reports)?;
    let columns: Vec<(&str, &GlycemicReport)> = results.iter().map(|(n, r, _)| (*n, r)).collect();
    let mut text = comparison_table(&columns);
    for (name, _, inv) in &results {
        text.push_str(&format!(
            "{name}: {}",
            invariance_lines(inv, s.safety_band())
        ));
    }
    fs::write(c.path("comparison.txt"), &text)?;
    print!("{text}");
    let unsafe_names: Vec<&str> = results
        .iter()
        .filter(|r| !r.2.glucose_safe())
        .map(|r| r.0)
        .collect();
    if unsafe_names.is_empty() {
        Ok(())
    } else {
        eprintln!("safety violation: {}", unsafe_names.join(", "));
        Err(Failure::Exit(EXIT_UNSAFE))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Montecarlo { common, runs } => montecarlo(common, *runs),
        Command::Feasibility(c) => feasibility(c),
        Command::Synthesize(c) => synthesize(c),
        Command::Compare {
            common,
            controllers,
        } => compare(common, controllers.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Exit(code)) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
