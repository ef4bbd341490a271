//! Command-line driver: loads a scenario file, runs pipeline stages and
//! writes `report.json` plus CSV tables into an output directory.

pub mod report;
pub mod scenario;
pub mod stages;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use report::{write_file, RunReport, StageOutput};
use scenario::{Scenario, Stage};
use stages::System;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("io error at {path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema { .. } | CliError::Io { .. } => 2,
            CliError::Run(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "degbill", version, about = "Collision chains, their certificates and shadowing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory; defaults to `out/<scenario name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for parameter sweeps.
    #[arg(long)]
    jobs: Option<usize>,
    /// Seed for randomized starts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Chain solving and certification.
    Chain {
        #[command(subcommand)]
        action: ChainAction,
    },
    /// Billiard shadowing sweep over ε.
    Billiard {
        #[command(subcommand)]
        action: ShadowAction,
    },
    /// n-center shadowing sweep over μ.
    Ncenter {
        #[command(subcommand)]
        action: ShadowAction,
    },
    /// Three-body discrete Lagrangian table.
    Kepler {
        #[command(subcommand)]
        action: KeplerAction,
    },
    /// Collision graph entropy.
    Graph {
        #[command(subcommand)]
        action: GraphAction,
    },
    /// Run the pipeline listed in the scenario.
    Scenario {
        #[command(subcommand)]
        action: ScenarioAction,
    },
}

#[derive(Debug, Subcommand)]
enum ChainAction {
    Solve(Common),
    Certify(Common),
}

#[derive(Debug, Subcommand)]
enum ShadowAction {
    Shadow(Common),
}

#[derive(Debug, Subcommand)]
enum KeplerAction {
    Table(Common),
}

#[derive(Debug, Subcommand)]
enum GraphAction {
    Entropy(Common),
}

#[derive(Debug, Subcommand)]
enum ScenarioAction {
    Run(Common),
}

/// Parses arguments, runs, prints diagnostics and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (common, only) = match cli.command {
        Command::Chain { action: ChainAction::Solve(c) } => (c, Some(Stage::ChainSolve)),
        Command::Chain { action: ChainAction::Certify(c) } => (c, Some(Stage::ChainCertify)),
        Command::Billiard { action: ShadowAction::Shadow(c) } => (c, Some(Stage::BilliardShadow)),
        Command::Ncenter { action: ShadowAction::Shadow(c) } => (c, Some(Stage::NcenterShadow)),
        Command::Kepler { action: KeplerAction::Table(c) } => (c, Some(Stage::KeplerTable)),
        Command::Graph { action: GraphAction::Entropy(c) } => (c, Some(Stage::GraphEntropy)),
        Command::Scenario { action: ScenarioAction::Run(c) } => (c, None),
    };
    match execute(&common, only) {
        Ok(report) => {
            for g in &report.gates {
                println!("gate {}: {} (value {:e}, expected {})", g.name, if g.pass { "PASS" } else { "FAIL" }, g.value, g.expected);
            }
            if report.pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(common: &Common, only: Option<Stage>) -> Result<RunReport, CliError> {
    let mut sc = Scenario::load(&common.scenario)?;
    if let Some(stage) = only {
        sc.pipeline = vec![stage];
    }
    sc.validate()?;
    if sc.pipeline.is_empty() {
        return Err(CliError::Schema { path: "pipeline".into(), message: "no stages to run".into() });
    }
    let out = match (&common.out, &sc.output) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => PathBuf::from(o),
        (None, None) => Path::new("out").join(&sc.name),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Run(e.to_string()))?;
    pool.install(|| run_scenario(&sc, common.seed, &out))
}

/// Runs every stage of `sc.pipeline` and writes the results into `out`.
pub fn run_scenario(sc: &Scenario, seed: u64, out: &Path) -> Result<RunReport, CliError> {
    let sys = System::build(sc, seed)?;
    let mut report = RunReport { scenario: sc.name.clone(), seed, stages: Vec::new(), gates: Vec::new(), pass: true };
    for stage in &sc.pipeline {
        let o: StageOutput = match stage {
            Stage::ChainSolve => stages::chain_solve(&sys),
            Stage::ChainCertify => stages::chain_certify(&sys),
            Stage::BilliardShadow => stages::billiard_shadow(&sys),
            Stage::NcenterShadow => stages::ncenter_shadow(&sys),
            Stage::KeplerTable => stages::kepler_table(&sys),
            Stage::GraphEntropy => stages::graph_entropy(&sys),
        }
        .map_err(|e| match e {
            CliError::Run(m) => CliError::Run(format!("{}: {m}", stage.name())),
            other => other,
        })?;
        for t in &o.tables {
            write_file(out, &t.file, &t.render())?;
        }
        for (name, text) in &o.text {
            write_file(out, name, text)?;
        }
        report.pass &= o.gates.iter().all(|g| g.pass);
        report.gates.extend(o.gates);
        report.stages.push(o.report);
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Run(e.to_string()))?;
    write_file(out, "report.json", &(json + "\n"))?;
    Ok(report)
}
