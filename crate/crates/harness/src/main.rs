use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use torus_games::lattice_kernel::parse_count;
use torus_games::particle_sim::SimConfig;
use torus_games::Kernel;
use torus_harness::tools::{coalesce, simulate, CoalesceRules};
use torus_harness::{ExperimentKind, ExperimentSpec, HarnessError};

#[derive(Parser)]
#[command(
    name = "torus-games",
    version,
    about = "Spatial evolutionary games on the torus and their limits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    #[command(name = "regime2_convergence")]
    Regime2Convergence(ExperimentArgs),
    #[command(name = "tarnita_check")]
    TarnitaCheck(ExperimentArgs),
    #[command(name = "takeover_2x2")]
    Takeover2x2(ExperimentArgs),
    #[command(name = "coalescence_table")]
    CoalescenceTable(ExperimentArgs),
    #[command(name = "contact_fast_voting")]
    ContactFastVoting(ExperimentArgs),
    #[command(name = "census_decay")]
    CensusDecay(ExperimentArgs),
    #[command(name = "walk_mixing")]
    WalkMixing(ExperimentArgs),
    /// Estimate coalescence probabilities and print them as JSON.
    Coalesce(CoalesceArgs),
    /// Run replicates of a simulation configuration.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; defaults to the spec's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_count)]
    reps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Bd,
    Db,
    Both,
}

#[derive(Args)]
struct CoalesceArgs {
    /// Kernel preset name.
    #[arg(long, default_value = "nn")]
    kernel: String,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value = "1e4")]
    horizon: f64,
    #[arg(long, value_parser = parse_count, default_value = "1e5")]
    reps: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "both")]
    rule: RuleArg,
    /// Write the JSON document here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_count, default_value = "1")]
    reps: u64,
    #[arg(long)]
    out: PathBuf,
}

fn run_experiment(kind: ExperimentKind, args: ExperimentArgs) -> Result<bool, HarnessError> {
    let mut spec = ExperimentSpec::load(&args.spec)?;
    if spec.kind != kind {
        return Err(HarnessError::InvalidParameters {
            kind: kind.to_string(),
            detail: format!("spec file describes a {} experiment", spec.kind),
        });
    }
    if let Some(r) = args.reps {
        spec.replicates = r;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let out = args
        .out
        .or_else(|| spec.output_dir.clone())
        .ok_or_else(|| HarnessError::InvalidParameters {
            kind: kind.to_string(),
            detail: "no --out given and the spec has no output_dir".into(),
        })?;
    let report = torus_harness::run(&spec)?;
    report.write(&out)?;
    for c in &report.summary.checks {
        println!("{}", c.line());
    }
    println!("wrote {}", out.display());
    Ok(report.passed())
}

fn run_command(cmd: Command) -> Result<bool, HarnessError> {
    use Command::*;
    match cmd {
        Regime2Convergence(a) => run_experiment(ExperimentKind::Regime2Convergence, a),
        TarnitaCheck(a) => run_experiment(ExperimentKind::TarnitaCheck, a),
        Takeover2x2(a) => run_experiment(ExperimentKind::Takeover2x2, a),
        CoalescenceTable(a) => run_experiment(ExperimentKind::CoalescenceTable, a),
        ContactFastVoting(a) => run_experiment(ExperimentKind::ContactFastVoting, a),
        CensusDecay(a) => run_experiment(ExperimentKind::CensusDecay, a),
        WalkMixing(a) => run_experiment(ExperimentKind::WalkMixing, a),
        Coalesce(a) => {
            let kernel = Kernel::preset(&a.kernel, a.d)?;
            let rules = match a.rule {
                RuleArg::Bd => CoalesceRules::BirthDeath,
                RuleArg::Db => CoalesceRules::DeathBirth,
                RuleArg::Both => CoalesceRules::Both,
            };
            let doc = coalesce(&kernel, a.horizon, a.reps, a.seed, rules)?;
            let text = serde_json::to_string_pretty(&doc)?;
            match a.out {
                Some(p) => fs::write(p, text)?,
                None => println!("{text}"),
            }
            Ok(true)
        }
        Simulate(a) => {
            let config: SimConfig = serde_json::from_str(&fs::read_to_string(&a.config)?)?;
            let (table, manifest) = simulate(&config, a.reps)?;
            fs::create_dir_all(&a.out)?;
            fs::write(a.out.join("trajectories.csv"), table.to_csv()?)?;
            fs::write(
                a.out.join("manifest.json"),
                serde_json::to_string_pretty(&manifest)?,
            )?;
            println!("wrote {}", a.out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
