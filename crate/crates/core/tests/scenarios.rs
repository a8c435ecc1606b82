use std::fs;
use std::path::Path;

use rfpi_core::fields::Potential;
use rfpi_core::grid::{gaussian_packet, l2_norm, Grid};
use rfpi_core::propagator::{evolve_damped, evolve_unitary, PropagatorConfig, SpinTerm};
use rfpi_core::scenarios::{run_scenario, RunManifest, ScenarioConfig, EXIT_PASS};
use rfpi_core::weights::{corridor, Trajectory};
use rfpi_core::C64;

fn config(name: &str, overrides: &[&str]) -> ScenarioConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ScenarioConfig::load(&path, &o).unwrap()
}

fn run(cfg: &ScenarioConfig) -> (RunManifest, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let m = run_scenario(cfg, dir.path()).unwrap();
    (m, dir)
}

fn property<'a>(m: &'a RunManifest, needle: &str) -> &'a rfpi_core::scenarios::output::PropertyCheck {
    m.properties
        .iter()
        .find(|p| p.name.contains(needle))
        .unwrap_or_else(|| panic!("no property '{needle}' in {:?}", m.properties))
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            ScenarioConfig::load(&p, &[]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert_eq!(n, 7);
}

#[test]
fn corridor_run_writes_tables_and_passes() {
    let cfg = config(
        "corridor.json",
        &[
            "grid.points_per_axis=[128]",
            "time.t_final_time_units=1.0",
            "corridor.product_slices=16",
        ],
    );
    let (m, dir) = run(&cfg);
    assert_eq!(m.exit_code(), EXIT_PASS, "{:?}", m.properties);
    for f in ["timeseries.csv", "product.csv", "final_state.field", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let ts = fs::read_to_string(dir.path().join("timeseries.csv")).unwrap();
    assert!(!ts.starts_with('#'));
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.properties, m.properties);
}

#[test]
fn zero_weight_corridor_keeps_norm() {
    let cfg = config(
        "corridor.json",
        &[
            "weight={\"key\":\"zero\"}",
            "grid.points_per_axis=[128]",
            "time.t_final_time_units=1.0",
        ],
    );
    let (m, _dir) = run(&cfg);
    let p = property(&m, "constant");
    assert!(p.pass, "{}", p.detail);
    assert_eq!(m.exit_code(), EXIT_PASS);
}

#[test]
fn reruns_are_bit_identical() {
    let cfg = config(
        "corridor.json",
        &[
            "grid.points_per_axis=[64]",
            "time.t_final_time_units=0.5",
            "corridor.product_slices=8",
        ],
    );
    let (_, a) = run(&cfg);
    let (_, b) = run(&cfg);
    for f in ["timeseries.csv", "product.csv", "final_state.field"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn weak_corridor_is_nearly_unitary() {
    let g = Grid::line(-20.0, 20.0, 256).unwrap();
    let f = gaussian_packet(&g, 1, &[0.0], &[1.0], 1.0, &[C64::new(1.0, 0.0)], 1.0)
        .unwrap()
        .field;
    let p = Potential::free(1);
    let hs = SpinTerm::none(1);
    let cfg = PropagatorConfig::strang(0.01, 0.0, 1.0);
    let u = evolve_unitary(&f, &p, &hs, &cfg).unwrap();
    // γ = 1/(2δ²) = 5e-5
    let w = corridor(vec![Trajectory::Fixed([0.0, 0.0])], 100.0, 1.0).unwrap();
    let uw = evolve_damped(&f, &p, &hs, &w, &cfg).unwrap();
    assert!(l2_norm(&uw.difference(&u).unwrap()) < 1e-3);
}

#[test]
fn packet_following_its_record_survives_longer() {
    let g = Grid::line(-20.0, 20.0, 256).unwrap();
    let f = gaussian_packet(&g, 1, &[-2.0], &[1.0], 1.0, &[C64::new(1.0, 0.0)], 1.0)
        .unwrap()
        .field;
    let p = Potential::free(1);
    let hs = SpinTerm::none(1);
    let cfg = PropagatorConfig::strang(0.01, 0.0, 2.0);
    let own = corridor(
        vec![Trajectory::Linear {
            start: [-2.0, 0.0],
            velocity: [1.0, 0.0],
        }],
        1.0,
        2.0,
    )
    .unwrap();
    let far = corridor(
        vec![Trajectory::Linear {
            start: [2.0, 0.0],
            velocity: [-1.0, 0.0],
        }],
        1.0,
        2.0,
    )
    .unwrap();
    let a = l2_norm(&evolve_damped(&f, &p, &hs, &own, &cfg).unwrap());
    let b = l2_norm(&evolve_damped(&f, &p, &hs, &far, &cfg).unwrap());
    assert!(a > b, "own {a} far {b}");
    assert!(a < 1.0);
}

#[test]
fn zeno_losses_grow_with_strength() {
    let cfg = config("zeno.json", &["grid.points_per_axis=[128]", "time.dt_time_units=0.01"]);
    let (m, dir) = run(&cfg);
    assert!(property(&m, "monotone").pass, "{:?}", m.properties);
    assert_eq!(m.exit_code(), EXIT_PASS);
    assert!(dir.path().join("timeseries_n100.csv").exists());
}

#[test]
fn multislit_small() {
    let cfg = config(
        "multislit.json",
        &[
            "grid.points_per_axis=[128,128]",
            "time.dt_time_units=0.01",
            "multislit.strength_scales=[0.0,1.0]",
        ],
    );
    let (m, dir) = run(&cfg);
    assert!(property(&m, "zero mask").pass);
    assert!(property(&m, "n2_scale1: symmetric").pass);
    assert!(dir.path().join("visibility.csv").exists());
    assert!(dir.path().join("profile_n2_scale1_offset_corrected.csv").exists());
}

#[test]
fn multislit_rejects_packet_on_wall() {
    let cfg = config(
        "multislit.json",
        &[
            "grid.points_per_axis=[64,64]",
            "initial.0.center_length_units=[0.0,0.0]",
        ],
    );
    let dir = tempfile::tempdir().unwrap();
    assert!(run_scenario(&cfg, dir.path()).is_err());
}

#[test]
fn boundary_mass_marks_tables_invalid() {
    // A fast packet in a small box reaches the edge.
    let cfg = config(
        "corridor.json",
        &[
            "weight={\"key\":\"zero\"}",
            "grid.extent_length_units=[[-6.0,6.0]]",
            "grid.points_per_axis=[128]",
            "initial.0.momentum_hbar_per_length_units=[4.0]",
            "time.t_final_time_units=1.0",
        ],
    );
    let (m, dir) = run(&cfg);
    assert!(!m.validity.boundary_ok);
    assert_ne!(m.exit_code(), EXIT_PASS);
    assert!(fs::read_to_string(dir.path().join("timeseries.csv"))
        .unwrap()
        .starts_with("# status=INVALID\n"));
}

#[test]
fn aharonov_bohm_small() {
    let cfg = config(
        "aharonov_bohm.json",
        &[
            "grid.points_per_axis=[96,96]",
            "time.dt_time_units=0.01",
            "aharonov_bohm.flux_values_flux_units=[0.0,6.283185307179586]",
        ],
    );
    let (m, dir) = run(&cfg);
    assert!(property(&m, "zero flux").pass);
    assert!(property(&m, "periodicity").pass, "{:?}", m.properties);
    assert!(dir.path().join("fringe_shift.csv").exists());
}

#[test]
fn convergence_with_zero_weight_saturates() {
    let cfg = config(
        "convergence.json",
        &[
            "weight={\"key\":\"zero\"}",
            "convergence.nus=[8,16,32]",
            "grid.points_per_axis=[64]",
        ],
    );
    let (m, dir) = run(&cfg);
    assert_eq!(m.exit_code(), EXIT_PASS, "{:?}", m.properties);
    let csv = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert!(csv.trim_end().ends_with("saturated"), "{csv}");
}

#[test]
fn convergence_small_sweep() {
    let cfg = config(
        "convergence.json",
        &["convergence.nus=[8,16,32]", "grid.points_per_axis=[64]"],
    );
    let (m, _dir) = run(&cfg);
    assert!(property(&m, "fitted order").pass, "{:?}", m.properties);
    assert!(property(&m, "strictly decreasing").pass);
}

#[test]
fn oracle_compare_small() {
    let cfg = config(
        "oracle_compare.json",
        &[
            "oracle.nus=[1,2]",
            "grid.points_per_axis=[128]",
            "oracle.kernel.quad_points=256",
        ],
    );
    let (m, dir) = run(&cfg);
    assert!(dir.path().join("oracle.csv").exists());
    assert_eq!(m.exit_code(), EXIT_PASS, "{:?}", m.properties);
}

#[test]
fn verify_weights_small() {
    let cfg = config(
        "verify_weights.json",
        &["verify.lattice_points=16", "verify.stability_tolerance=10.0"],
    );
    let (m, dir) = run(&cfg);
    assert!(
        m.properties
            .iter()
            .filter(|p| p.name.contains("sampled"))
            .all(|p| p.pass),
        "{:?}",
        m.properties
    );
    let report = fs::read_to_string(dir.path().join("weights_report.txt")).unwrap();
    assert!(report.contains("c_growth_w_order1="));
}
