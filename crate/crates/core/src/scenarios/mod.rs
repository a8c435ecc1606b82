//! Scenario configuration, drivers and result files.

pub mod config;
pub mod drivers;
pub mod output;

use std::path::Path;
use std::time::Instant;

pub use config::{ScenarioConfig, ScenarioKind};
pub use output::{RunManifest, EXIT_ERROR, EXIT_PASS, EXIT_PROPERTY_FAILURE};

use crate::error::Result;
use output::{write_manifest, OutputSink};

/// Runs the configured scenario, writing all results and `manifest.json`
/// into `out`.
pub fn run_scenario(cfg: &ScenarioConfig, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let mut sink = OutputSink::new(out)?;
    let r = match cfg.scenario {
        ScenarioKind::Corridor => drivers::run_corridor(cfg, &mut sink)?,
        ScenarioKind::Multislit => drivers::run_multislit(cfg, &mut sink)?,
        ScenarioKind::Zeno => drivers::run_zeno(cfg, &mut sink)?,
        ScenarioKind::AharonovBohm => drivers::run_aharonov_bohm(cfg, &mut sink)?,
        ScenarioKind::Convergence => drivers::run_convergence(cfg, &mut sink)?,
        ScenarioKind::OracleCompare => drivers::run_oracle_compare(cfg, &mut sink)?,
        ScenarioKind::VerifyWeights => drivers::run_verify_weights(cfg, &mut sink)?,
    };
    let mut files = sink.files().to_vec();
    files.push("manifest.json".into());
    let manifest = RunManifest {
        scenario: cfg.scenario.name().into(),
        artifact_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.resolved(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        validity: r.validity,
        properties: r.properties,
        warnings: r.warnings,
        files,
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}
