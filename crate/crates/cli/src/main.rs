use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rfpi_core::scenarios::{run_scenario, RunManifest, ScenarioConfig, EXIT_ERROR, EXIT_PASS};

#[derive(Parser)]
#[command(
    name = "rfpi",
    version,
    about = "Measurement-damped Schrodinger dynamics: scenarios, convergence sweeps and oracles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario named in the config.
    Run(Common),
    /// Product-formula convergence sweep.
    Converge(Common),
    /// Compare the sliced path-integral kernel against the propagator.
    OracleCompare(Common),
    /// Sampled certification of the configured weights.
    VerifyWeights(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Propagation backend: spectral_strang, mol_rk4 or dense_oracle.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path config override, KEY=VALUE (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn forced_scenario(cmd: &Command) -> Option<&'static str> {
    match cmd {
        Command::Run(_) => None,
        Command::Converge(_) => Some("convergence"),
        Command::OracleCompare(_) => Some("oracle_compare"),
        Command::VerifyWeights(_) => Some("verify_weights"),
    }
}

fn print_report(m: &RunManifest, out: &std::path::Path) {
    println!("scenario {} ({:.2} s)", m.scenario, m.wall_clock_seconds);
    for p in &m.properties {
        println!("{} {}: {}", if p.pass { "PASS" } else { "FAIL" }, p.name, p.detail);
    }
    let v = &m.validity;
    if let Some(b) = v.boundary_mass {
        println!(
            "{} boundary mass {b:.3e}",
            if v.boundary_ok { "VALID" } else { "INVALID" }
        );
    }
    if let Some(r) = &v.reference_description {
        println!("reference: {r}");
    }
    if v.reference_consistent == Some(false) {
        println!("INVALID reference: refinement gap too large");
    }
    for w in &m.warnings {
        println!("warning: {w}");
    }
    println!("results in {}", out.display());
}

fn execute(cmd: Command) -> Result<i32, String> {
    let forced = forced_scenario(&cmd);
    let (Command::Run(c) | Command::Converge(c) | Command::OracleCompare(c) | Command::VerifyWeights(c)) = cmd;
    let mut overrides = Vec::new();
    if let Some(s) = forced {
        overrides.push(format!("scenario={s}"));
    }
    if let Some(b) = &c.backend {
        let backend: rfpi_core::propagator::Backend = b.parse().map_err(|e| format!("{e}"))?;
        overrides.push(format!("backend={}", backend.name()));
    }
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(c.overrides.iter().cloned());
    let cfg = ScenarioConfig::load(&c.config, &overrides).map_err(|e| e.to_string())?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let manifest = run_scenario(&cfg, &out).map_err(|e| e.to_string())?;
    print_report(&manifest, &out);
    Ok(manifest.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                EXIT_ERROR as u8
            } else {
                EXIT_PASS as u8
            });
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
