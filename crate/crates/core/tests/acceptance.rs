//! The twelve acceptance criteria. Each prints one PASS/FAIL line straight to
//! stdout (outside the test harness capture) with its measured figures.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfpi_core::fields::{gauge_transform, GaugeFunction, PathPolyline, Potential};
use rfpi_core::grid::{gaussian_packet, l2_norm, Grid, SpinorField};
use rfpi_core::linalg::operator_norm;
use rfpi_core::path_oracle::{
    insert_observables, ordered_factor_bound, ordered_weight_factor, scalar_observable, sliced_kernel_apply, Insertion,
    InsertionMode, SliceKernelConfig,
};
use rfpi_core::product::{
    convergence_study, interleaved_evolution, interleaved_evolution_observed, kappa_sensitivity, make_subdivision,
    FittedOrder, KappaScheme, OmegaSchedule, Problem, SweepSpec, TauScheme,
};
use rfpi_core::propagator::{evolve_damped, evolve_observed, evolve_unitary, Backend, PropagatorConfig, SpinTerm};
use rfpi_core::scenarios::{run_scenario, ScenarioConfig};
use rfpi_core::weights::{ball, constant, corridor, from_matrix_fn, zero, Trajectory, WeightSpec};
use rfpi_core::{CMat, C64};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion(id: usize, title: &str, limit_s: f64, body: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = body();
    let secs = start.elapsed().as_secs_f64();
    let line = format!(
        "{} {id:>2} {title}: {} ({secs:.1} s, budget {limit_s} s)\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    o.pass
}

fn config(name: &str) -> ScenarioConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ScenarioConfig::load(&path, &[]).unwrap()
}

fn problem(cfg: &ScenarioConfig) -> (Problem, PropagatorConfig) {
    let grid = cfg.build_grid().unwrap();
    let prob = Problem {
        f: cfg.build_initial(&grid).unwrap().0,
        p: cfg.build_potential().unwrap(),
        hs: cfg.build_spin_term().unwrap(),
        w: cfg.build_weight(&grid).unwrap(),
    };
    let pc = PropagatorConfig::new(cfg.backend, cfg.time.dt_time_units, 0.0, cfg.time.t_final_time_units);
    (prob, pc)
}

fn packet(lo: f64, hi: f64, n: usize, center: f64, momentum: f64) -> SpinorField {
    let g = Grid::line(lo, hi, n).unwrap();
    gaussian_packet(&g, 1, &[center], &[momentum], 1.0, &[C64::new(1.0, 0.0)], 1.0)
        .unwrap()
        .field
}

fn rel(a: &SpinorField, b: &SpinorField) -> f64 {
    l2_norm(&a.difference(b).unwrap()) / l2_norm(b)
}

fn unitarity() -> Outcome {
    let f = packet(-20.0, 20.0, 512, -2.0, 1.5);
    let n0 = l2_norm(&f);
    let cfg = PropagatorConfig::strang(1e-3, 0.0, 1.0);
    assert_eq!(cfg.steps().len(), 1000);
    let mut worst: f64 = 0.0;
    for p in [Potential::free(1), Potential::harmonic(1, 1.0, 1.0, [0.0, 0.0])] {
        let u = evolve_unitary(&f, &p, &SpinTerm::none(1), &cfg).unwrap();
        worst = worst.max((l2_norm(&u) - n0).abs() / n0);
    }
    outcome(worst <= 1e-10, format!("max relative drift {worst:.3e} (≤ 1e-10)"))
}

fn contraction() -> Outcome {
    let f = packet(-20.0, 20.0, 256, -1.0, 1.0);
    let p = Potential::free(1);
    let hs = SpinTerm::none(1);
    let g = f.grid().clone();
    let weights: Vec<WeightSpec> = vec![
        corridor(
            vec![Trajectory::Linear {
                start: [-1.0, 0.0],
                velocity: [1.0, 0.0],
            }],
            1.0,
            2.0,
        )
        .unwrap(),
        ball(vec![[0.0, 0.0]], vec![1.0], 10.0, &g).unwrap(),
        ball(vec![[0.0, 0.0]], vec![1.0], 100.0, &g).unwrap(),
    ];
    let mut worst = f64::NEG_INFINITY;
    let mut track = |prev: &mut f64, u: &SpinorField| {
        let n = l2_norm(u);
        worst = worst.max(n / *prev - 1.0);
        *prev = n;
    };
    let mut runs = 0;
    for w in &weights {
        let mut prev = l2_norm(&f);
        evolve_observed(
            &f,
            &p,
            &hs,
            w,
            &PropagatorConfig::strang(0.005, 0.0, 2.0),
            &mut |_, _, u| track(&mut prev, u),
        )
        .unwrap();
        runs += 1;
        for (nu, taus, kappas) in [
            (8, TauScheme::Uniform, KappaScheme::Left),
            (
                32,
                TauScheme::Jitter {
                    seed: 3,
                    amplitude: 0.5,
                },
                KappaScheme::Random { seed: 4 },
            ),
            (128, TauScheme::Uniform, KappaScheme::Midpoint),
        ] {
            let sub = make_subdivision(2.0, nu, taus, kappas).unwrap();
            let mut prev = l2_norm(&f);
            let prob = Problem {
                f: f.clone(),
                p: p.clone(),
                hs: hs.clone(),
                w: w.clone(),
            };
            interleaved_evolution_observed(
                &prob,
                &sub,
                None,
                &PropagatorConfig::strang(0.005, 0.0, 2.0),
                &mut |_, u| track(&mut prev, u),
            )
            .unwrap();
            runs += 1;
        }
    }
    outcome(
        worst <= 1e-10,
        format!("{runs} runs, largest per-step relative growth {worst:.3e} (≤ 1e-10)"),
    )
}

fn convergence() -> Outcome {
    let cfg = config("convergence.json");
    let (prob, pc) = problem(&cfg);
    let sweep = SweepSpec {
        t: cfg.time.t_final_time_units,
        nus: vec![8, 16, 32, 64, 128],
        tau_scheme: TauScheme::Uniform,
        kappa_scheme: KappaScheme::Left,
        omega: None,
        with_b1: false,
    };
    let study = convergence_study(&prob, &sweep, &pc).unwrap();
    let errs: Vec<String> = study.records.iter().map(|r| format!("{:.2e}", r.err_l2)).collect();
    let order_ok = matches!(study.fitted_order, FittedOrder::Order(o) if o >= 0.9);
    outcome(
        study.reference.description.starts_with("dense_oracle") && study.strictly_decreasing() && order_ok,
        format!(
            "errors [{}], order {}, reference {}",
            errs.join(" "),
            study.fitted_order,
            study.reference.description
        ),
    )
}

fn omega_variant() -> Outcome {
    let cfg = config("convergence.json");
    let (prob, pc) = problem(&cfg);
    let sweep = SweepSpec {
        t: cfg.time.t_final_time_units,
        nus: vec![8, 16, 32, 64, 128],
        tau_scheme: TauScheme::Uniform,
        kappa_scheme: KappaScheme::Left,
        omega: Some(OmegaSchedule::power(1.0).unwrap()),
        with_b1: false,
    };
    let study = convergence_study(&prob, &sweep, &pc).unwrap();
    let errs: Vec<String> = study.records.iter().map(|r| format!("{:.2e}", r.err_l2)).collect();
    let order_ok = matches!(study.fitted_order, FittedOrder::Order(o) if o >= 0.9);
    outcome(
        study.strictly_decreasing() && order_ok,
        format!("errors to unitary [{}], order {}", errs.join(" "), study.fitted_order),
    )
}

fn kappa_arbitrariness() -> Outcome {
    let cfg = config("convergence.json");
    let (prob, pc) = problem(&cfg);
    let schemes = [
        KappaScheme::Left,
        KappaScheme::Right,
        KappaScheme::Midpoint,
        KappaScheme::Random { seed: 7 },
    ];
    let t = cfg.time.t_final_time_units;
    let coarse = kappa_sensitivity(&prob, t, 16, &schemes, None, &pc)
        .unwrap()
        .max_distance;
    let fine = kappa_sensitivity(&prob, t, 128, &schemes, None, &pc)
        .unwrap()
        .max_distance;
    outcome(
        fine <= coarse / 3.0,
        format!(
            "max pairwise distance ν=16 {coarse:.3e}, ν=128 {fine:.3e}, ratio {:.3}",
            fine / coarse
        ),
    )
}

fn random_hermitian(rng: &mut ChaCha8Rng, l: usize, scale: f64) -> CMat {
    let a = CMat::from_fn(l, l, |_, _| {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    (&a + a.adjoint()) * C64::new(0.5 * scale, 0.0)
}

/// W = (w − C)I + P†P with P = M₀ + sin(k·x + ωt)M₁, so W ⪰ (w − C)I.
/// P = 0 in a third of the draws, where the bound is attained.
fn random_weight(rng: &mut ChaCha8Rng, l: usize) -> WeightSpec {
    let tight = if rng.random_bool(1.0 / 3.0) { 0.0 } else { 1.0 };
    let (m0, m1) = (random_hermitian(rng, l, tight), random_hermitian(rng, l, tight));
    let k: [f64; 2] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    let om = rng.random_range(-3.0..3.0);
    let (a, b) = (rng.random_range(-1.0..3.0), rng.random_range(0.0..2.0));
    let k2: [f64; 2] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    let om2 = rng.random_range(-5.0..5.0);
    let shift = rng.random_range(0.0..1.0);
    let lower = move |t: f64, x: &[f64]| {
        let ph: f64 = x.iter().zip(&k2).map(|(x, k)| x * k).sum::<f64>() + om2 * t;
        a + b * ph.cos()
    };
    from_matrix_fn(
        l,
        "random",
        move |t, x| {
            let ph: f64 = x.iter().zip(&k).map(|(x, k)| x * k).sum::<f64>() + om * t;
            let p = &m0 + &m1 * C64::new(ph.sin(), 0.0);
            p.adjoint() * p + CMat::identity(l, l) * C64::new(lower(t, x) - shift, 0.0)
        },
        lower,
        shift,
    )
}

fn ordered_factor_bound_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20261016);
    let trials = 10_000;
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let d = rng.random_range(1..=2usize);
        let l = rng.random_range(1..=3usize);
        let segs = rng.random_range(1..=4usize);
        let mut times = vec![rng.random_range(0.0..1.0)];
        for _ in 0..segs {
            let last = *times.last().unwrap();
            times.push(last + rng.random_range(0.05..0.5));
        }
        let vertices: Vec<[f64; 2]> = (0..=segs)
            .map(|_| {
                let mut v = [0.0; 2];
                for c in v.iter_mut().take(d) {
                    *c = rng.random_range(-3.0..3.0);
                }
                v
            })
            .collect();
        let path = PathPolyline::new(d, times.clone(), vertices).unwrap();
        let w = random_weight(&mut rng, l);
        let hs = if rng.random_bool(0.5) {
            let (h0, h1) = (random_hermitian(&mut rng, l, 2.0), random_hermitian(&mut rng, l, 2.0));
            SpinTerm::new(l, move |t, x| &h0 + &h1 * C64::new((t + x[0]).cos(), 0.0))
        } else {
            SpinTerm::none(l)
        };
        let (s, t) = (times[0], *times.last().unwrap());
        let f = ordered_weight_factor(&path, &w, &hs, s, t, 16).unwrap();
        let excess = operator_norm(&f.value) - ordered_factor_bound(&path, &w, s, t);
        worst = worst.max(excess);
        if excess > 1e-8 {
            violations += 1;
        }
    }
    outcome(
        violations == 0,
        format!("{trials} random paths/weights, {violations} violations, largest ‖F‖ − bound {worst:.3e}"),
    )
}

fn oracle_equivalence() -> Outcome {
    let t = 0.4;
    let f = packet(-10.0, 10.0, 256, -1.0, 1.0);
    let p = Potential::free(1);
    let hs = SpinTerm::none(1);
    let kcfg = SliceKernelConfig::default();
    let u = evolve_unitary(&f, &p, &hs, &PropagatorConfig::strang(0.01, 0.0, t)).unwrap();
    let mut free_errs = Vec::new();
    for nu in [1, 2, 4] {
        let sub = make_subdivision(t, nu, TauScheme::Uniform, KappaScheme::Left).unwrap();
        let k = sliced_kernel_apply(&f, &p, &zero(1), &hs, &sub, &kcfg).unwrap();
        free_errs.push(l2_norm(&k.difference(&u).unwrap()));
    }
    let w = corridor(
        vec![Trajectory::Linear {
            start: [-1.0, 0.0],
            velocity: [1.0, 0.0],
        }],
        1.0,
        t,
    )
    .unwrap();
    let r = evolve_damped(
        &f,
        &p,
        &hs,
        &w,
        &PropagatorConfig::new(Backend::DenseOracle, 0.01, 0.0, t),
    )
    .unwrap();
    let mut corr_errs = Vec::new();
    for nu in [1, 2, 4] {
        let sub = make_subdivision(t, nu, TauScheme::Uniform, KappaScheme::Left).unwrap();
        let k = sliced_kernel_apply(&f, &p, &w, &hs, &sub, &kcfg).unwrap();
        corr_errs.push(l2_norm(&k.difference(&r).unwrap()));
    }
    let free_ok = free_errs.iter().all(|e| *e <= 2e-3);
    let mono = corr_errs.windows(2).all(|w| w[1] < w[0]);
    let fmt = |v: &[f64]| v.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(" ");
    outcome(
        free_ok && mono,
        format!(
            "free ν=1,2,4: [{}] (≤ 2e-3); corridor: [{}] (decreasing)",
            fmt(&free_errs),
            fmt(&corr_errs)
        ),
    )
}

fn insertions() -> Outcome {
    let t = 0.4;
    let f = packet(-10.0, 10.0, 256, -1.0, 1.0);
    let p = Potential::harmonic(1, 1.0, 0.5, [0.0, 0.0]);
    let w = corridor(
        vec![Trajectory::Linear {
            start: [-1.0, 0.0],
            velocity: [1.0, 0.0],
        }],
        1.0,
        t,
    )
    .unwrap();
    let hs = SpinTerm::none(1);
    let sub = make_subdivision(t, 8, TauScheme::Uniform, KappaScheme::Left).unwrap();
    let z1 = |x: f64| 1.0 / (1.0 + x * x);
    let z2 = |x: f64| (0.5 * x).cos();
    let ins = [
        Insertion::new(0.1, scalar_observable(1, z1)),
        Insertion::new(0.25, scalar_observable(1, z2)),
    ];
    let got = insert_observables(
        &f,
        &p,
        &w,
        &hs,
        &sub,
        &ins,
        InsertionMode::Snap,
        &SliceKernelConfig::default(),
    )
    .unwrap();
    let dense = |a, b| PropagatorConfig::new(Backend::DenseOracle, 0.01, a, b);
    let mut u = evolve_damped(&f, &p, &hs, &w, &dense(0.0, 0.1)).unwrap();
    u.multiply_pointwise(|x| C64::new(z1(x[0]), 0.0));
    let mut u = evolve_damped(&u, &p, &hs, &w, &dense(0.1, 0.25)).unwrap();
    u.multiply_pointwise(|x| C64::new(z2(x[0]), 0.0));
    let u = evolve_damped(&u, &p, &hs, &w, &dense(0.25, t)).unwrap();
    let e = l2_norm(&got.difference(&u).unwrap());
    outcome(e <= 3e-3, format!("L² distance {e:.3e} (≤ 3e-3)"))
}

fn with_phase(f: &SpinorField, g: &GaugeFunction, t: f64, sign: f64) -> SpinorField {
    let mut o = f.clone();
    o.multiply_pointwise(|x| C64::from_polar(1.0, sign * g.value(t, x)));
    o
}

fn gauges() -> [GaugeFunction; 2] {
    [
        GaugeFunction::linear(0.3, [2.0 * PI / 10.0, 0.0]),
        GaugeFunction::new(
            |t, x| 0.05 * x[0] * x[0] + 0.2 * t * x[0],
            |_, x| 0.2 * x[0],
            |t, x| [0.1 * x[0] + 0.2 * t, 0.0],
        ),
    ]
}

fn gauge_covariance() -> Outcome {
    let t = 0.4;
    let p = Potential::harmonic(1, 1.0, 0.5, [0.0, 0.0]);
    let w = corridor(
        vec![Trajectory::Linear {
            start: [-1.0, 0.0],
            velocity: [1.0, 0.0],
        }],
        1.0,
        t,
    )
    .unwrap();
    let hs = SpinTerm::none(1);
    let mut prop_worst: f64 = 0.0;
    for (backend, n, dt) in [(Backend::DenseOracle, 128, 0.01), (Backend::MolRk4, 256, 5e-4)] {
        let f = packet(-10.0, 10.0, n, -1.0, 1.0);
        let cfg = PropagatorConfig::new(backend, dt, 0.0, t);
        let base = evolve_damped(&f, &p, &hs, &w, &cfg).unwrap();
        for g in gauges() {
            let pg = gauge_transform(&p, &g);
            let u = evolve_damped(&with_phase(&f, &g, 0.0, 1.0), &pg, &hs, &w, &cfg).unwrap();
            prop_worst = prop_worst.max(rel(&with_phase(&u, &g, t, -1.0), &base));
        }
    }
    let f = packet(-10.0, 10.0, 256, -1.0, 1.0);
    let sub = make_subdivision(t, 4, TauScheme::Uniform, KappaScheme::Left).unwrap();
    let kcfg = SliceKernelConfig::default();
    let base = sliced_kernel_apply(&f, &p, &w, &hs, &sub, &kcfg).unwrap();
    let mut oracle_worst: f64 = 0.0;
    for g in gauges() {
        let pg = gauge_transform(&p, &g);
        let k = sliced_kernel_apply(&with_phase(&f, &g, 0.0, 1.0), &pg, &w, &hs, &sub, &kcfg).unwrap();
        oracle_worst = oracle_worst.max(rel(&with_phase(&k, &g, t, -1.0), &base));
    }
    outcome(
        prop_worst <= 1e-6 && oracle_worst <= 1e-4,
        format!("propagator {prop_worst:.3e} (≤ 1e-6), sliced kernel {oracle_worst:.3e} (≤ 1e-4)"),
    )
}

fn weight_certifications() -> Outcome {
    let cfg = config("verify_weights.json");
    assert_eq!(cfg.verify.lattice_points, 64);
    let dir = tempfile::tempdir().unwrap();
    let m = run_scenario(&cfg, dir.path()).unwrap();
    let failed: Vec<&str> = m
        .properties
        .iter()
        .filter(|p| !p.pass)
        .map(|p| p.name.as_str())
        .collect();
    let stability = m
        .properties
        .iter()
        .filter(|p| p.name.contains("stable"))
        .map(|p| p.detail.rsplit(' ').next().unwrap_or("").to_string())
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        failed.is_empty(),
        format!(
            "{} checks, failing: [{}]; relative changes under doubling [{stability}]",
            m.properties.len(),
            failed.join(", ")
        ),
    )
}

fn aharonov_bohm() -> Outcome {
    let cfg = config("aharonov_bohm.json");
    let dir = tempfile::tempdir().unwrap();
    let m = run_scenario(&cfg, dir.path()).unwrap();
    let details: Vec<String> = m
        .properties
        .iter()
        .map(|p| format!("{}: {}", p.name, p.detail))
        .collect();
    outcome(
        m.all_pass(),
        format!(
            "{}; boundary mass {:.1e}",
            details.join("; "),
            m.validity.boundary_mass.unwrap_or(f64::NAN)
        ),
    )
}

fn constant_weight() -> Outcome {
    let (t, c) = (1.0, 0.7);
    let f = packet(-20.0, 20.0, 256, -1.0, 1.0);
    let p = Potential::free(1);
    let hs = SpinTerm::none(1);
    let w = constant(1, c);
    let cfg = PropagatorConfig::strang(0.01, 0.0, t);
    let expected = evolve_unitary(&f, &p, &hs, &cfg)
        .unwrap()
        .scaled(C64::new((-c * t).exp(), 0.0));
    let mut worst = rel(&evolve_damped(&f, &p, &hs, &w, &cfg).unwrap(), &expected);
    let prob = Problem { f, p, hs, w };
    let mut count = 1;
    for (nu, taus, kappas) in [
        (1, TauScheme::Uniform, KappaScheme::Left),
        (7, TauScheme::Uniform, KappaScheme::Midpoint),
        (
            32,
            TauScheme::Jitter {
                seed: 11,
                amplitude: 0.8,
            },
            KappaScheme::Random { seed: 12 },
        ),
        (128, TauScheme::Uniform, KappaScheme::Right),
    ] {
        let sub = make_subdivision(t, nu, taus, kappas).unwrap();
        worst = worst.max(rel(&interleaved_evolution(&prob, &sub, None, &cfg).unwrap(), &expected));
        count += 1;
    }
    outcome(
        worst <= 1e-10,
        format!("{count} evolutions, largest relative deviation {worst:.3e} (≤ 1e-10)"),
    )
}

#[test]
fn acceptance_criteria() {
    let _ = std::io::stdout().lock().write_all(b"\n");
    let results = [
        criterion(1, "unitarity", 5.0, unitarity),
        criterion(2, "contraction", 10.0, contraction),
        criterion(3, "product-formula convergence", 120.0, convergence),
        criterion(4, "superlinear exposure has no effect", 120.0, omega_variant),
        criterion(5, "evaluation-point arbitrariness", 180.0, kappa_arbitrariness),
        criterion(6, "ordered-factor norm bound", 30.0, ordered_factor_bound_check),
        criterion(7, "sliced-kernel oracle equivalence", 300.0, oracle_equivalence),
        criterion(8, "observable insertions", 180.0, insertions),
        criterion(9, "gauge covariance", 60.0, gauge_covariance),
        criterion(10, "weight certifications", 60.0, weight_certifications),
        criterion(11, "Aharonov-Bohm flux periodicity", 600.0, aharonov_bohm),
        criterion(12, "constant-weight exactness", 10.0, constant_weight),
    ];
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
