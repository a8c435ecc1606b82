//! Scenario drivers. Each returns its properties and validity flags; the
//! dispatcher in the parent module adds timing and writes the manifest.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{boundary_mass, l2_norm, Grid, SpinorField, BOUNDARY_MASS_LIMIT};
use crate::path_oracle::sliced_kernel_apply;
use crate::product::{
    convergence_study, interleaved_evolution, interleaved_evolution_observed, kappa_sensitivity, make_subdivision,
    KappaScheme, Problem, SweepSpec, TauScheme,
};
use crate::propagator::{evolve_damped, evolve_observed, evolve_unitary, survival_mass, Backend, PropagatorConfig};
use crate::weights::{verify_assumption_2d, AssumptionReport, MultislitWeight, Trajectory, WeightSpec};
use crate::C64;

use super::config::{PotentialConfig, ScenarioConfig, WeightConfig};
use super::output::{fmt_f, OutputSink, PlotSpec, PropertyCheck, Validity};

/// Shell fraction of the box used for the boundary-mass flag.
pub const BOUNDARY_FRACTION: f64 = 0.05;
/// Per-step norm growth allowed by the contraction check.
pub const CONTRACTION_SLACK: f64 = 1e-10;

pub struct DriverResult {
    pub validity: Validity,
    pub properties: Vec<PropertyCheck>,
    pub warnings: Vec<String>,
}

fn check(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> PropertyCheck {
    PropertyCheck {
        name: name.into(),
        pass,
        detail: detail.into(),
    }
}

/// Tracks the largest boundary mass across results.
struct BoundaryTracker {
    worst: f64,
}

impl BoundaryTracker {
    fn new() -> Self {
        BoundaryTracker { worst: 0.0 }
    }

    fn observe(&mut self, f: &SpinorField) {
        self.worst = self.worst.max(boundary_mass(f, BOUNDARY_FRACTION));
    }

    fn ok(&self) -> bool {
        self.worst <= BOUNDARY_MASS_LIMIT
    }

    fn validity(&self) -> Validity {
        Validity {
            boundary_mass: Some(self.worst),
            boundary_ok: self.ok(),
            ..Default::default()
        }
    }
}

fn prop_config(cfg: &ScenarioConfig) -> PropagatorConfig {
    PropagatorConfig::new(cfg.backend, cfg.time.dt_time_units, 0.0, cfg.time.t_final_time_units)
}

/// Time series rows (t, ‖u‖², survival) of a direct run, plus contraction.
struct Series {
    rows: Vec<Vec<f64>>,
    max_growth: f64,
}

fn observe_run(
    f: &SpinorField,
    prob: &Problem,
    cfg: &PropagatorConfig,
    region: &(dyn Fn(f64, &[f64]) -> bool + Sync),
) -> Result<(SpinorField, Series)> {
    let mut rows = Vec::new();
    let mut max_growth: f64 = 0.0;
    let mut prev: Option<f64> = None;
    let u = evolve_observed(f, &prob.p, &prob.hs, &prob.w, cfg, &mut |_, t, u| {
        let n = l2_norm(u);
        if let Some(p) = prev {
            max_growth = max_growth.max(n / p - 1.0);
        }
        prev = Some(n);
        rows.push(vec![t, n * n, survival_mass(u, |x| region(t, x))]);
    })?;
    Ok((u, Series { rows, max_growth }))
}

fn contraction_check(label: &str, s: &Series) -> PropertyCheck {
    check(
        format!("{label}: norm never increases"),
        s.max_growth <= CONTRACTION_SLACK,
        format!("max per-step relative growth {:.3e}", s.max_growth),
    )
}

fn constant_norm_check(label: &str, s: &Series) -> PropertyCheck {
    let dev = s.rows.iter().map(|r| (r[1].sqrt() - 1.0).abs()).fold(0.0, f64::max);
    check(
        format!("{label}: norm constant without weight"),
        dev <= 1e-10,
        format!("max |‖u‖ − 1| = {dev:.3e}"),
    )
}

fn series_plot(sink: &mut OutputSink, csv: &str, title: &str) -> Result<()> {
    sink.gnuplot(
        &csv.replace(".csv", ".gp"),
        &PlotSpec {
            title,
            xlabel: "t",
            ylabel: "mass",
            log: false,
            series: vec![(csv.into(), 2), (csv.into(), 3)],
        },
    )
}

fn problem(cfg: &ScenarioConfig, grid: &Grid, w: WeightSpec) -> Result<(Problem, Vec<String>)> {
    let (f, wide) = cfg.build_initial(grid)?;
    let mut warnings = Vec::new();
    if wide {
        warnings.push("initial packet is wide relative to the box".into());
    }
    Ok((
        Problem {
            f,
            p: cfg.build_potential()?,
            hs: cfg.build_spin_term()?,
            w,
        },
        warnings,
    ))
}

pub fn run_corridor(cfg: &ScenarioConfig, sink: &mut OutputSink) -> Result<DriverResult> {
    let grid = cfg.build_grid()?;
    let w = cfg.build_weight(&grid)?;
    let (prob, warnings) = problem(cfg, &grid, w)?;
    let pc = prop_config(cfg);
    let d = grid.dim();
    let anchor: Option<Trajectory> = match &cfg.weight {
        WeightConfig::Corridor { trajectories, .. } => Some(trajectories[0].build()?),
        _ => None,
    };
    let r = cfg.corridor.survival_radius_length_units;
    let region = move |t: f64, x: &[f64]| match &anchor {
        Some(tr) => {
            let a = tr.at(t);
            (0..d).map(|j| (x[j] - a[j]).powi(2)).sum::<f64>() < r * r
        }
        None => true,
    };
    let (u, series) = observe_run(&prob.f, &prob, &pc, &region)?;
    let mut bt = BoundaryTracker::new();
    bt.observe(&u);
    let sub = make_subdivision(
        cfg.time.t_final_time_units,
        cfg.corridor.product_slices,
        TauScheme::Uniform,
        KappaScheme::Left,
    )?;
    let up = interleaved_evolution(&prob, &sub, None, &pc)?;
    bt.observe(&up);
    let err = l2_norm(&up.difference(&u)?);
    if !bt.ok() {
        sink.mark_invalid();
    }
    sink.csv_f("timeseries.csv", &["t", "norm_sq", "survival_mass"], &series.rows)?;
    series_plot(sink, "timeseries.csv", "corridor: norm and survival")?;
    sink.csv(
        "product.csv",
        &["nu", "mesh", "err_l2"],
        &[vec![sub.nu().to_string(), fmt_f(sub.mesh()), fmt_f(err)]],
    )?;
    sink.field("final_state.field", &u)?;
    let mut properties = vec![contraction_check("direct run", &series)];
    if prob.w.is_zero {
        properties.push(constant_norm_check("direct run", &series));
    }
    Ok(DriverResult {
        validity: bt.validity(),
        properties,
        warnings,
    })
}

/// Σ_c |u_c|² along the line where axis `fixed_axis` is nearest `position`.
/// Returns (coordinates along the other axis, intensities).
pub fn screen_profile(u: &SpinorField, fixed_axis: usize, position: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = u.grid();
    if g.dim() != 2 {
        return Err(Error::UnsupportedDimension(g.dim()));
    }
    let (lo, hi) = g.extent(fixed_axis);
    if !(lo..hi).contains(&position) {
        return Err(Error::Config(format!(
            "screen position {position} outside [{lo}, {hi})"
        )));
    }
    let h = g.spacing(fixed_axis);
    let k = (((position - lo) / h).round() as usize).min(g.points(fixed_axis) - 1);
    let other = 1 - fixed_axis;
    let coords = g.axis_coordinates(other);
    let dens = u.density();
    let intens = (0..g.points(other))
        .map(|i| {
            let mut m = [0usize; crate::grid::MAX_DIM];
            m[fixed_axis] = k;
            m[other] = i;
            dens[g.flat_index(m)]
        })
        .collect();
    Ok((coords, intens))
}

/// (I_max − I_min)/(I_max + I_min) over |x| ≤ half_width.
pub fn visibility(coords: &[f64], intens: &[f64], half_width: f64) -> f64 {
    let sel: Vec<f64> = coords
        .iter()
        .zip(intens)
        .filter(|(x, _)| x.abs() <= half_width)
        .map(|(_, i)| *i)
        .collect();
    let max = sel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = sel.iter().cloned().fold(f64::INFINITY, f64::min);
    if sel.is_empty() || max + min <= 0.0 {
        return 0.0;
    }
    (max - min) / (max + min)
}

/// Lag (in samples) maximizing the circular cross-correlation Σ a_i b_{i+k},
/// refined by a three-point parabola through the peak.
pub fn fringe_lag(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let corr = |k: isize| -> f64 {
        (0..n)
            .map(|i| a[i] * b[((i as isize + k).rem_euclid(n as isize)) as usize])
            .sum()
    };
    let half = (n / 2) as isize;
    let mut best = 0isize;
    let mut best_v = f64::NEG_INFINITY;
    for k in -half..(n as isize - half) {
        let v = corr(k);
        if v > best_v {
            best_v = v;
            best = k;
        }
    }
    let (cm, c0, cp) = (corr(best - 1), best_v, corr(best + 1));
    let denom = cm - 2.0 * c0 + cp;
    let delta = if denom.abs() > 0.0 {
        0.5 * (cm - cp) / denom
    } else {
        0.0
    };
    best as f64 + delta
}

fn profile_distance(a: &[f64], b: &[f64], h: f64) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() * h).sqrt()
}

pub fn run_multislit(cfg: &ScenarioConfig, sink: &mut OutputSink) -> Result<DriverResult> {
    let grid = cfg.build_grid()?;
    let params = match &cfg.weight {
        WeightConfig::Multislit(m) => m.clone(),
        _ => return Err(Error::Config("multislit scenario needs weight.key = multislit".into())),
    };
    let base = params.build()?;
    let (prob0, warnings) = problem(cfg, &grid, crate::weights::zero(cfg.spin_components))?;
    if cfg.spin_components != 1 {
        return Err(Error::Config("multislit runs with spin_components = 1".into()));
    }
    let opts = &cfg.multislit;
    // Wall overlap of the incident packet.
    let overlap = survival_mass(&prob0.f, |x| base.k(x[1]) > 1e-6);
    if overlap > 1e-6 {
        return Err(Error::Config(format!(
            "initial packet overlaps the wall (mass {overlap:.3e} > 1e-6)"
        )));
    }
    let pc = prop_config(cfg);
    let t = cfg.time.t_final_time_units;
    let mut sets: Vec<Vec<f64>> = vec![params.holes_length_units.clone()];
    if opts.compare_single_slit && params.holes_length_units.len() > 1 {
        sets.push(vec![params.holes_length_units[0]]);
    }
    let (lo, hi) = grid.extent(0);
    let symmetric_box = (lo + hi).abs() <= 1e-12 * (hi - lo);
    let symmetric_incidence = cfg.initial.iter().all(|p| {
        p.center_length_units[0] == 0.0 && p.momentum_hbar_per_length_units.first().copied().unwrap_or(0.0) == 0.0
    });
    let mut bt = BoundaryTracker::new();
    let mut properties = Vec::new();
    let mut vis_rows = Vec::new();
    let h = grid.spacing(0);
    for &scale in &opts.strength_scales {
        let mut vis_by_n = Vec::new();
        for holes in &sets {
            let mut m = MultislitWeight::new(holes.clone(), base.hole_width, base.strength, base.wall)?;
            m.subtract_offset = base.subtract_offset;
            let w = m.spec(&grid)?.scaled(scale);
            let u = evolve_damped(&prob0.f, &prob0.p, &prob0.hs, &w, &pc)?;
            bt.observe(&u);
            let (xs, intens) = screen_profile(&u, 1, opts.screen_position_length_units)?;
            let nh = holes.len();
            let tag = format!("n{nh}_scale{scale}");
            let rows: Vec<Vec<f64>> = xs.iter().zip(&intens).map(|(x, i)| vec![*x, *i]).collect();
            if !bt.ok() {
                sink.mark_invalid();
            }
            let name = format!("profile_{tag}.csv");
            sink.csv_f(&name, &["coordinate", "intensity"], &rows)?;
            sink.gnuplot(
                &format!("profile_{tag}.gp"),
                &PlotSpec {
                    title: &format!("screen intensity, {nh} hole(s), n = {scale}"),
                    xlabel: "x'",
                    ylabel: "intensity",
                    log: false,
                    series: vec![(name.clone(), 2)],
                },
            )?;
            if !m.subtract_offset && nh > 1 {
                let factor = (nh as f64).powf(2.0 * t * scale);
                let corrected: Vec<Vec<f64>> = xs.iter().zip(&intens).map(|(x, i)| vec![*x, i * factor]).collect();
                sink.csv_f(
                    &format!("profile_{tag}_offset_corrected.csv"),
                    &["coordinate", "intensity"],
                    &corrected,
                )?;
            }
            let v = visibility(&xs, &intens, opts.central_window_length_units);
            vis_rows.push(vec![nh.to_string(), fmt_f(scale), fmt_f(v)]);
            vis_by_n.push((nh, v));
            if nh == params.holes_length_units.len() && symmetric_box && symmetric_incidence {
                let mut sorted = holes.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mirror_holes = sorted
                    .iter()
                    .zip(sorted.iter().rev())
                    .all(|(a, b)| (a + b).abs() <= 1e-12);
                if mirror_holes {
                    let n = intens.len();
                    let imax = intens.iter().cloned().fold(0.0, f64::max);
                    let asym = (0..n)
                        .map(|i| (intens[i] - intens[(n - i) % n]).abs())
                        .fold(0.0, f64::max);
                    properties.push(check(
                        format!("{tag}: symmetric profile"),
                        asym <= 1e-6 * imax,
                        format!("max |I(x) − I(−x)| / max I = {:.3e}", asym / imax),
                    ));
                }
            }
            if scale == 0.0 && nh == params.holes_length_units.len() {
                let free = evolve_unitary(&prob0.f, &prob0.p, &prob0.hs, &pc)?;
                let (_, fi) = screen_profile(&free, 1, opts.screen_position_length_units)?;
                let dist = profile_distance(&intens, &fi, h);
                properties.push(check(
                    format!("{tag}: zero mask equals free propagation"),
                    dist <= 1e-10,
                    format!("profile L2 distance {dist:.3e}"),
                ));
            }
        }
        if scale > 0.0 {
            if let (Some(&(_, vn)), Some(&(_, v1))) = (vis_by_n.first(), vis_by_n.iter().find(|(n, _)| *n == 1)) {
                if vis_by_n.len() > 1 {
                    properties.push(check(
                        format!("scale {scale}: single hole has lower visibility"),
                        v1 < vn,
                        format!("V(1) = {v1:.4}, V({}) = {vn:.4}", params.holes_length_units.len()),
                    ));
                }
            }
        }
    }
    sink.csv("visibility.csv", &["holes", "scale", "visibility"], &vis_rows)?;
    Ok(DriverResult {
        validity: bt.validity(),
        properties,
        warnings,
    })
}

pub fn run_zeno(cfg: &ScenarioConfig, sink: &mut OutputSink) -> Result<DriverResult> {
    let grid = cfg.build_grid()?;
    let (centers, radii) = match &cfg.weight {
        WeightConfig::Ball {
            centers_length_units,
            radii_length_units,
            ..
        } => (centers_length_units.clone(), radii_length_units.clone()),
        _ => return Err(Error::Config("zeno scenario needs weight.key = ball".into())),
    };
    let d = grid.dim();
    let (c0, r0) = (centers[0].clone(), radii[0]);
    for pk in &cfg.initial {
        let dist2: f64 = (0..d).map(|j| (pk.center_length_units[j] - c0[j]).powi(2)).sum();
        if dist2 >= r0 * r0 {
            return Err(Error::Config(
                "initial packet center lies outside the confinement ball".into(),
            ));
        }
    }
    let inside = move |_: f64, x: &[f64]| (0..d).map(|j| (x[j] - c0[j]).powi(2)).sum::<f64>() < r0 * r0;
    let pc = prop_config(cfg);
    let mut bt = BoundaryTracker::new();
    let mut properties = Vec::new();
    let mut warnings = Vec::new();
    let mut losses = Vec::new();
    for &n in &cfg.zeno.strengths {
        let wc = WeightConfig::Ball {
            centers_length_units: centers.clone(),
            radii_length_units: radii.clone(),
            strength: n,
        };
        let w = wc.build(cfg.spin_components, &grid, cfg.time.t_final_time_units)?;
        let (prob, wn) = problem(cfg, &grid, w)?;
        warnings.extend(wn);
        let (u, series) = observe_run(&prob.f, &prob, &pc, &inside)?;
        bt.observe(&u);
        let sub = make_subdivision(
            cfg.time.t_final_time_units,
            cfg.zeno.product_slices,
            TauScheme::Uniform,
            KappaScheme::Left,
        )?;
        let mut prod_rows = Vec::new();
        let up = interleaved_evolution_observed(&prob, &sub, None, &pc, &mut |j, u| {
            let n = l2_norm(u);
            prod_rows.push(vec![
                sub.taus[j.min(sub.nu())],
                n * n,
                survival_mass(u, |x| inside(0.0, x)),
            ]);
        })?;
        bt.observe(&up);
        if !bt.ok() {
            sink.mark_invalid();
        }
        let name = format!("timeseries_n{n}.csv");
        sink.csv_f(&name, &["t", "norm_sq", "survival_mass"], &series.rows)?;
        series_plot(sink, &name, &format!("Zeno confinement, n = {n}"))?;
        sink.csv_f(
            &format!("timeseries_product_n{n}.csv"),
            &["t", "norm_sq", "survival_mass"],
            &prod_rows,
        )?;
        properties.push(contraction_check(&format!("n = {n}"), &series));
        if n == 0.0 {
            properties.push(constant_norm_check(&format!("n = {n}"), &series));
        }
        let last = series.rows.last().map_or(1.0, |r| r[1]);
        losses.push((n, 1.0 - last));
    }
    if losses.len() > 1 {
        let mut sorted = losses.clone();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let monotone = sorted.windows(2).all(|w| w[1].1 >= w[0].1);
        let detail = sorted
            .iter()
            .map(|(n, l)| format!("n={n}: loss {l:.4e}"))
            .collect::<Vec<_>>()
            .join(", ");
        properties.push(check("norm loss monotone in n", monotone, detail));
    }
    Ok(DriverResult {
        validity: bt.validity(),
        properties,
        warnings,
    })
}

pub fn run_aharonov_bohm(cfg: &ScenarioConfig, sink: &mut OutputSink) -> Result<DriverResult> {
    let grid = cfg.build_grid()?;
    let w = cfg.build_weight(&grid)?;
    let (prob, warnings) = problem(cfg, &grid, w)?;
    let (core, center) = match &cfg.potential {
        PotentialConfig::Solenoid {
            core_radius_length_units,
            center_length_units,
            ..
        } => (*core_radius_length_units, center_length_units.clone()),
        _ => return Err(Error::Config("aharonov_bohm needs potential.key = solenoid".into())),
    };
    let opts = &cfg.aharonov_bohm;
    let mut fluxes = opts.flux_values_flux_units.clone();
    if !fluxes.contains(&0.0) {
        fluxes.insert(0, 0.0);
    }
    let pc = prop_config(cfg);
    let (q, hb) = (cfg.constants.charge_charge_units, cfg.constants.hbar_action_units);
    let period = 2.0 * PI * hb / q;
    let cut = opts.gauge_cut_angle;
    let cut_mass = survival_mass(&prob.f, |x| {
        let th = (x[1] - center[1]).atan2(x[0] - center[0]);
        let off = (th - cut + PI).rem_euclid(2.0 * PI) - PI;
        off.abs() < 0.25 && (x[0] - center[0]).hypot(x[1] - center[1]) > core
    });
    let mut warnings = warnings;
    if cut_mass > 1e-6 {
        warnings.push(format!("initial state has mass {cut_mass:.3e} near the gauge cut"));
    }
    let profiles: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = fluxes
        .iter()
        .map(|&alpha| {
            // Same physical initial state for every flux: A is locally the
            // gradient of αθ/2π away from the cut.
            let mut f = prob.f.clone();
            let n = grid.len();
            for i in 0..n {
                let x = grid.point(i);
                let th = (x[1] - center[1]).atan2(x[0] - center[0]);
                let phase = C64::from_polar(1.0, q * alpha * (th - cut).rem_euclid(2.0 * PI) / (2.0 * PI * hb));
                for c in 0..f.l() {
                    f.data_mut()[c * n + i] *= phase;
                }
            }
            let pot = PotentialConfig::Solenoid {
                flux_flux_units: alpha,
                core_radius_length_units: core,
                center_length_units: center.clone(),
            }
            .build(2, &cfg.constants)?;
            let u = evolve_damped(&f, &pot, &prob.hs, &prob.w, &pc)?;
            let (xs, intens) = screen_profile(&u, 0, opts.screen_position_length_units)?;
            Ok((xs, intens, boundary_mass(&u, BOUNDARY_FRACTION)))
        })
        .collect();
    let profiles: Vec<(Vec<f64>, Vec<f64>, f64)> = profiles.into_iter().collect::<Result<_>>()?;
    let worst = profiles.iter().map(|p| p.2).fold(0.0, f64::max);
    let validity = Validity {
        boundary_mass: Some(worst),
        boundary_ok: worst <= BOUNDARY_MASS_LIMIT,
        ..Default::default()
    };
    if !validity.boundary_ok {
        sink.mark_invalid();
    }
    let h = grid.spacing(1);
    let zero_idx = fluxes.iter().position(|&a| a == 0.0).unwrap();
    let zero_profile = &profiles[zero_idx].1;
    let mut shift_rows = Vec::new();
    let mut properties = Vec::new();
    for (i, (&alpha, (xs, intens, _))) in fluxes.iter().zip(&profiles).enumerate() {
        let rows: Vec<Vec<f64>> = xs.iter().zip(intens).map(|(x, v)| vec![*x, *v]).collect();
        let name = format!("profile_flux{i}.csv");
        sink.csv_f(&name, &["coordinate", "intensity"], &rows)?;
        let lag = fringe_lag(zero_profile, intens) * h;
        let predicted = (q * alpha / (2.0 * PI * hb)).rem_euclid(1.0);
        let dist = profile_distance(zero_profile, intens, h);
        shift_rows.push(vec![alpha, predicted, lag, dist]);
        if alpha == 0.0 {
            properties.push(check(
                "zero flux: fringe shift vanishes",
                lag.abs() < 0.5 * h,
                format!("estimated shift {lag:.3e}"),
            ));
        }
    }
    sink.csv_f(
        "fringe_shift.csv",
        &[
            "flux",
            "predicted_shift_fraction",
            "estimated_shift",
            "l2_distance_to_zero_flux",
        ],
        &shift_rows,
    )?;
    sink.gnuplot(
        "profiles.gp",
        &PlotSpec {
            title: "screen intensity by flux",
            xlabel: "x2",
            ylabel: "intensity",
            log: false,
            series: (0..fluxes.len()).map(|i| (format!("profile_flux{i}.csv"), 2)).collect(),
        },
    )?;
    for i in 0..fluxes.len() {
        for j in i + 1..fluxes.len() {
            let k = (fluxes[j] - fluxes[i]) / period;
            if k.round() != 0.0 && (k - k.round()).abs() < 1e-9 {
                let dist = profile_distance(&profiles[i].1, &profiles[j].1, h);
                properties.push(check(
                    format!("flux {} vs {}: periodicity", fluxes[i], fluxes[j]),
                    dist <= opts.periodicity_tolerance,
                    format!("profile L2 distance {dist:.3e}"),
                ));
            }
        }
    }
    Ok(DriverResult {
        validity,
        properties,
        warnings,
    })
}

pub fn run_convergence(cfg: &ScenarioConfig, sink: &mut OutputSink) -> Result<DriverResult> {
    let grid = cfg.build_grid()?;
    let w = cfg.build_weight(&grid)?;
    let (prob, warnings) = problem(cfg, &grid, w)?;
    let opts = &cfg.convergence;
    let sweep = SweepSpec {
        t: cfg.time.t_final_time_units,
        nus: opts.nus.clone(),
        tau_scheme: opts.tau_scheme.scheme(cfg.seed),
        kappa_scheme: opts.kappa_scheme.scheme(cfg.seed),
        omega: opts.omega,
        with_b1: opts.with_b1,
    };
    let pc = prop_config(cfg);
    let study = convergence_study(&prob, &sweep, &pc)?;
    let mut bt = BoundaryTracker::new();
    bt.observe(&prob.f);
    let mut validity = bt.validity();
    validity.reference_description = Some(study.reference.description.clone());
    validity.reference_consistent = Some(study.reference.valid);
    if !validity.boundary_ok || !study.reference.valid {
        sink.mark_invalid();
    }
    let mut csv = String::new();
    if sink.is_invalid() {
        csv.push_str("# status=INVALID\n");
    }
    csv.push_str(&study.to_csv());
    sink.text("convergence.csv", &csv)?;
    sink.gnuplot(
        "convergence.gp",
        &PlotSpec {
            title: "interleaved product error",
            xlabel: "nu",
            ylabel: "err_l2",
            log: true,
            series: vec![("convergence.csv".into(), 3)],
        },
    )?;
    let mut properties = Vec::new();
    match study.fitted_order {
        crate::product::FittedOrder::Saturated => {
            properties.push(check("fitted order", true, "errors saturated at round-off"));
        }
        crate::product::FittedOrder::Order(o) => {
            properties.push(check(
                "fitted order",
                o >= opts.minimum_order,
                format!("order {o:.4} (minimum {})", opts.minimum_order),
            ));
            properties.push(check(
                "errors strictly decreasing",
                study.strictly_decreasing(),
                study
                    .records
                    .iter()
                    .map(|r| format!("{:.3e}", r.err_l2))
                    .collect::<Vec<_>>()
                    .join(" "),
            ));
        }
    }
    if let Some([coarse, fine]) = opts.kappa_comparison {
        let schemes = [
            KappaScheme::Left,
            KappaScheme::Right,
            KappaScheme::Midpoint,
            KappaScheme::Random { seed: cfg.seed },
        ];
        let a = kappa_sensitivity(&prob, sweep.t, coarse, &schemes, opts.omega.as_ref(), &pc)?;
        let b = kappa_sensitivity(&prob, sweep.t, fine, &schemes, opts.omega.as_ref(), &pc)?;
        sink.csv(
            "kappa.csv",
            &["nu", "max_distance"],
            &[
                vec![coarse.to_string(), fmt_f(a.max_distance)],
                vec![fine.to_string(), fmt_f(b.max_distance)],
            ],
        )?;
        properties.push(check(
            "κ-scheme spread shrinks",
            b.max_distance <= a.max_distance / 3.0,
            format!("ν={coarse}: {:.3e}, ν={fine}: {:.3e}", a.max_distance, b.max_distance),
        ));
    }
    Ok(DriverResult {
        validity,
        properties,
        warnings,
    })
}

pub fn run_oracle_compare(cfg: &ScenarioConfig, sink: &mut OutputSink) -> Result<DriverResult> {
    let grid = cfg.build_grid()?;
    let w = cfg.build_weight(&grid)?;
    let (prob, warnings) = problem(cfg, &grid, w)?;
    let t = cfg.time.t_final_time_units;
    let dense_ok = grid.len() * cfg.spin_components <= crate::propagator::DENSE_MAX_UNKNOWNS;
    let backend = if dense_ok { Backend::DenseOracle } else { cfg.backend };
    let rc = PropagatorConfig::new(backend, cfg.time.dt_time_units, 0.0, t);
    let reference = evolve_damped(&prob.f, &prob.p, &prob.hs, &prob.w, &rc)?;
    let mut bt = BoundaryTracker::new();
    bt.observe(&reference);
    let mut rows = Vec::new();
    let mut errs = Vec::new();
    for &nu in &cfg.oracle.nus {
        let sub = make_subdivision(t, nu, TauScheme::Uniform, KappaScheme::Left)?;
        let k = sliced_kernel_apply(&prob.f, &prob.p, &prob.w, &prob.hs, &sub, &cfg.oracle.kernel)?;
        let e = l2_norm(&k.difference(&reference)?);
        rows.push(vec![nu.to_string(), fmt_f(sub.mesh()), fmt_f(e)]);
        errs.push(e);
    }
    let mut validity = bt.validity();
    validity.reference_description = Some(format!("{backend} evolution, dt = {:e}", cfg.time.dt_time_units));
    if !validity.boundary_ok {
        sink.mark_invalid();
    }
    sink.csv("oracle.csv", &["nu", "mesh", "err_l2"], &rows)?;
    let within = errs.iter().all(|&e| e <= cfg.oracle.tolerance);
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    let properties = vec![check(
        "sliced kernel agrees with the propagator",
        within || decreasing,
        format!(
            "errors {} (tolerance {:e}, decreasing: {decreasing})",
            errs.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(" "),
            cfg.oracle.tolerance
        ),
    )];
    Ok(DriverResult {
        validity,
        properties,
        warnings,
    })
}

fn relative_change(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale <= 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn report_row(label: &str, points: usize, r: &AssumptionReport) -> Vec<String> {
    vec![
        label.to_string(),
        points.to_string(),
        fmt_f(r.min_margin),
        fmt_f(r.c_growth_w[0]),
        fmt_f(r.c_growth_w[1]),
        fmt_f(r.c_growth_x[0]),
        fmt_f(r.c_growth_x[1]),
        r.pass.to_string(),
    ]
}

pub fn run_verify_weights(cfg: &ScenarioConfig, sink: &mut OutputSink) -> Result<DriverResult> {
    let opts = &cfg.verify;
    let ext: Vec<(f64, f64)> = cfg.grid.extent_length_units.iter().map(|e| (e[0], e[1])).collect();
    let d = ext.len();
    let coarse = Grid::new(d, &ext, &vec![opts.lattice_points; d])?;
    let fine = Grid::new(d, &ext, &vec![2 * opts.lattice_points; d])?;
    let mut all = vec![cfg.weight.clone()];
    all.extend(opts.extra_weights.iter().cloned());
    let mut rows = Vec::new();
    let mut text = String::new();
    let mut properties = Vec::new();
    for (i, wc) in all.iter().enumerate() {
        let label = format!("{}#{i}", wc.key());
        let wa = wc.build(cfg.spin_components, &coarse, cfg.time.t_final_time_units)?;
        let wb = wc.build(cfg.spin_components, &fine, cfg.time.t_final_time_units)?;
        let ra = verify_assumption_2d(&wa, &coarse, &opts.times_time_units, None);
        let rb = verify_assumption_2d(&wb, &fine, &opts.times_time_units, None);
        rows.push(report_row(&label, opts.lattice_points, &ra));
        rows.push(report_row(&label, 2 * opts.lattice_points, &rb));
        text.push_str(&format!(
            "[{label} lattice={}]\n{}",
            opts.lattice_points,
            ra.key_values()
        ));
        text.push_str(&format!(
            "[{label} lattice={}]\n{}",
            2 * opts.lattice_points,
            rb.key_values()
        ));
        properties.push(check(
            format!("{label}: sampled bounds"),
            ra.pass && rb.pass,
            ra.summary(),
        ));
        let mut worst: f64 = 0.0;
        for k in 0..2 {
            worst = worst.max(relative_change(ra.c_growth_w[k], rb.c_growth_w[k]));
            worst = worst.max(relative_change(ra.c_growth_x[k], rb.c_growth_x[k]));
        }
        let shift_change = relative_change(wa.shift, wb.shift);
        worst = worst.max(shift_change);
        if let WeightConfig::Multislit(mp) = wc {
            let m = mp.build()?;
            let ma = m.verify_bounds(&coarse, None)?;
            let mb = m.verify_bounds(&fine, None)?;
            text.push_str(&format!(
                "[{label} multislit lattice={}]\n{}",
                opts.lattice_points,
                ma.key_values()
            ));
            text.push_str(&format!(
                "[{label} multislit lattice={}]\n{}",
                2 * opts.lattice_points,
                mb.key_values()
            ));
            properties.push(check(format!("{label}: mask bounds"), ma.pass && mb.pass, ma.summary()));
            worst = worst.max(relative_change(ma.c_star, mb.c_star));
            for k in 0..2 {
                worst = worst.max(relative_change(ma.c_alpha_beta[k], mb.c_alpha_beta[k]));
            }
        }
        properties.push(check(
            format!("{label}: constants stable under lattice doubling"),
            worst <= opts.stability_tolerance,
            format!("largest relative change {worst:.3e}"),
        ));
    }
    sink.csv(
        "weights.csv",
        &[
            "weight",
            "lattice_points",
            "min_margin",
            "c_w_order1",
            "c_w_order2",
            "c_x_order1",
            "c_x_order2",
            "pass",
        ],
        &rows,
    )?;
    sink.text("weights_report.txt", &text)?;
    Ok(DriverResult {
        validity: Validity {
            boundary_ok: true,
            ..Default::default()
        },
        properties,
        warnings: Vec::new(),
    })
}
