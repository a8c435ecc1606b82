//! Interleaved unitary/damping product formulas and the drivers that
//! measure their convergence to the damped (or, for superlinear exposure,
//! the undamped) evolution.

use std::fmt;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::Potential;
use crate::grid::{l2_norm, sobolev_norm, SpinorField};
use crate::propagator::{evolve_damped, evolve_unitary, Backend, PropagatorConfig, SpinTerm, DENSE_MAX_UNKNOWNS};
use crate::weights::{apply_damping, WeightSpec};

/// 0 = τ₀ < … < τ_ν = t with evaluation points κ_j, κ'_j ∈ [τ_j, τ_{j+1}].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subdivision {
    pub t_end: f64,
    pub taus: Vec<f64>,
    pub kappas: Vec<f64>,
    pub kappa_primes: Vec<f64>,
}

impl Subdivision {
    pub fn new(taus: Vec<f64>, kappas: Vec<f64>, kappa_primes: Vec<f64>) -> Result<Self> {
        if taus.len() < 2 {
            return Err(Error::InvalidArgument("subdivision needs at least one interval".into()));
        }
        let nu = taus.len() - 1;
        if kappas.len() != nu || kappa_primes.len() != nu {
            return Err(Error::InvalidArgument(format!(
                "expected {nu} kappas and kappa primes, got {} and {}",
                kappas.len(),
                kappa_primes.len()
            )));
        }
        if taus.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument(
                "subdivision points must increase strictly".into(),
            ));
        }
        for j in 0..nu {
            let inside = |k: f64| taus[j] <= k && k <= taus[j + 1];
            if !inside(kappas[j]) || !inside(kappa_primes[j]) {
                return Err(Error::InvalidArgument(format!("evaluation point outside interval {j}")));
            }
        }
        Ok(Subdivision {
            t_end: *taus.last().unwrap(),
            taus,
            kappas,
            kappa_primes,
        })
    }

    pub fn nu(&self) -> usize {
        self.taus.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.taus[0]
    }

    /// max_j (τ_{j+1} − τ_j).
    pub fn mesh(&self) -> f64 {
        self.taus.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub fn min_width(&self) -> f64 {
        self.taus.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TauScheme {
    Uniform,
    /// Uniform points moved by up to ±amplitude/2 of a cell (amplitude < 1).
    Jitter {
        seed: u64,
        amplitude: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KappaScheme {
    Left,
    Right,
    Midpoint,
    Random { seed: u64 },
}

impl fmt::Display for KappaScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KappaScheme::Left => f.write_str("left"),
            KappaScheme::Right => f.write_str("right"),
            KappaScheme::Midpoint => f.write_str("midpoint"),
            KappaScheme::Random { seed } => write!(f, "random({seed})"),
        }
    }
}

/// Subdivision of [0, t] into ν intervals.
pub fn make_subdivision(t: f64, nu: usize, taus: TauScheme, kappas: KappaScheme) -> Result<Subdivision> {
    make_subdivision_on(0.0, t, nu, taus, kappas)
}

/// Subdivision of [t0, t1].
pub fn make_subdivision_on(t0: f64, t1: f64, nu: usize, taus: TauScheme, kappas: KappaScheme) -> Result<Subdivision> {
    if nu < 1 {
        return Err(Error::InvalidArgument("ν must be at least 1".into()));
    }
    if !(t1 > t0) {
        return Err(Error::InvalidArgument(format!("empty interval [{t0}, {t1}]")));
    }
    let h = (t1 - t0) / nu as f64;
    let mut tau: Vec<f64> = (0..=nu).map(|j| t0 + j as f64 * h).collect();
    tau[nu] = t1;
    if let TauScheme::Jitter { seed, amplitude } = taus {
        if !(0.0..1.0).contains(&amplitude) {
            return Err(Error::InvalidArgument("jitter amplitude must lie in [0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in tau.iter_mut().take(nu).skip(1) {
            *t += amplitude * h * (rng.random::<f64>() - 0.5);
        }
    }
    let (mut k, mut kp) = (Vec::with_capacity(nu), Vec::with_capacity(nu));
    let mut rng = match kappas {
        KappaScheme::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    for j in 0..nu {
        let (a, b) = (tau[j], tau[j + 1]);
        let (x, y) = match kappas {
            KappaScheme::Left => (a, a),
            KappaScheme::Right => (b, b),
            KappaScheme::Midpoint => (0.5 * (a + b), 0.5 * (a + b)),
            KappaScheme::Random { .. } => {
                let r = rng.as_mut().unwrap();
                (a + (b - a) * r.random::<f64>(), a + (b - a) * r.random::<f64>())
            }
        };
        k.push(x);
        kp.push(y);
    }
    Subdivision::new(tau, k, kp)
}

/// Exposure ρ̃ assigned to an interval of width ρ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OmegaSchedule {
    /// ω(ρ) = ρ.
    Linear,
    /// ω(ρ) = c·ρ^{1+σ}.
    Power { sigma: f64, coefficient: f64 },
}

impl OmegaSchedule {
    /// ρ^{1+σ} with unit coefficient.
    pub fn power(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("σ = {sigma} must be positive")));
        }
        Ok(OmegaSchedule::Power {
            sigma,
            coefficient: 1.0,
        })
    }

    pub fn value(&self, rho: f64) -> f64 {
        match *self {
            OmegaSchedule::Linear => rho,
            OmegaSchedule::Power { sigma, coefficient } => coefficient * rho.powf(1.0 + sigma),
        }
    }

    pub fn derivative(&self, rho: f64) -> f64 {
        match *self {
            OmegaSchedule::Linear => 1.0,
            OmegaSchedule::Power { sigma, coefficient } => coefficient * (1.0 + sigma) * rho.powf(sigma),
        }
    }

    /// Whether ω'(ρ) ≥ ρ holds on (0, rho_max], sampled.
    pub fn derivative_condition_holds(&self, rho_max: f64) -> bool {
        (1..=1000).all(|i| {
            let r = rho_max * i as f64 / 1000.0;
            self.derivative(r) >= r * (1.0 - 1e-12)
        })
    }
}

/// Everything that defines one evolution problem.
#[derive(Clone, Debug)]
pub struct Problem {
    pub f: SpinorField,
    pub p: Potential,
    pub hs: SpinTerm,
    pub w: WeightSpec,
}

/// Step used on the unitary legs: at most a quarter of the narrowest slice.
fn leg_config(sub: &Subdivision, cfg: &PropagatorConfig) -> PropagatorConfig {
    PropagatorConfig {
        dt: cfg.dt.min(sub.min_width() / 4.0),
        checkpoint: None,
        ..cfg.clone()
    }
}

/// Applies U(t,κ_{ν−1}) e^{−ρ̃_{ν−1}W(κ'_{ν−1})} … U(κ₁,κ₀) e^{−ρ̃₀W(κ'₀)} U(κ₀,0)
/// to f. `observer(j, u)` sees the state after each damping factor and at
/// the end (j = ν).
pub fn interleaved_evolution_observed(
    prob: &Problem,
    sub: &Subdivision,
    omega: Option<&OmegaSchedule>,
    cfg: &PropagatorConfig,
    observer: &mut dyn FnMut(usize, &SpinorField),
) -> Result<SpinorField> {
    let leg = leg_config(sub, cfg);
    let mut u = prob.f.clone();
    let mut t = sub.start();
    let unitary = |u: &SpinorField, a: f64, b: f64| -> Result<SpinorField> {
        if b - a <= 0.0 {
            return Ok(u.clone());
        }
        evolve_unitary(u, &prob.p, &prob.hs, &leg.with_interval(a, b))
    };
    for j in 0..sub.nu() {
        u = unitary(&u, t, sub.kappas[j])?;
        t = sub.kappas[j];
        let width = sub.taus[j + 1] - sub.taus[j];
        let rho = omega.map_or(width, |o| o.value(width));
        apply_damping(&mut u, &prob.w, sub.kappa_primes[j], rho)?;
        observer(j, &u);
    }
    u = unitary(&u, t, sub.t_end)?;
    observer(sub.nu(), &u);
    Ok(u)
}

pub fn interleaved_evolution(
    prob: &Problem,
    sub: &Subdivision,
    omega: Option<&OmegaSchedule>,
    cfg: &PropagatorConfig,
) -> Result<SpinorField> {
    interleaved_evolution_observed(prob, sub, omega, cfg, &mut |_, _| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub nu: usize,
    pub mesh: f64,
    pub err_l2: f64,
    pub err_b1: Option<f64>,
}

/// Least-squares slope of log err against log mesh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum FittedOrder {
    Order(f64),
    /// Errors at or below the noise floor; no slope is meaningful.
    Saturated,
}

impl fmt::Display for FittedOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FittedOrder::Order(v) => write!(f, "{v:.16e}"),
            FittedOrder::Saturated => f.write_str("saturated"),
        }
    }
}

/// Errors below this are treated as saturated.
pub const SATURATION_FLOOR: f64 = 1e-11;

/// Fit over the finest half of the records (at least two points).
pub fn fit_order(records: &[ConvergenceRecord]) -> FittedOrder {
    let mut rs: Vec<&ConvergenceRecord> = records.iter().collect();
    rs.sort_by(|a, b| b.mesh.partial_cmp(&a.mesh).unwrap());
    let take = (rs.len() / 2).max(2).min(rs.len());
    let tail = &rs[rs.len() - take..];
    if tail.len() < 2 || tail.iter().any(|r| r.err_l2 <= SATURATION_FLOOR) {
        return FittedOrder::Saturated;
    }
    let xs: Vec<f64> = tail.iter().map(|r| r.mesh.ln()).collect();
    let ys: Vec<f64> = tail.iter().map(|r| r.err_l2.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    FittedOrder::Order(sxy / sxx)
}

/// How the reference solution was obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceInfo {
    pub description: String,
    /// Distance between the two Strang references (fallback only).
    pub consistency_gap: Option<f64>,
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub records: Vec<ConvergenceRecord>,
    pub fitted_order: FittedOrder,
    pub reference: ReferenceInfo,
    pub kappa_scheme: KappaScheme,
    pub tau_scheme: TauScheme,
    pub omega: Option<OmegaSchedule>,
}

impl ConvergenceStudy {
    /// nu,mesh,err_l2,err_b1,fitted_order with the order on the last row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("nu,mesh,err_l2,err_b1,fitted_order\n");
        let n = self.records.len();
        for (i, r) in self.records.iter().enumerate() {
            let b1 = r.err_b1.map_or(String::new(), |v| format!("{v:.16e}"));
            let ord = if i + 1 == n {
                self.fitted_order.to_string()
            } else {
                String::new()
            };
            let _ = writeln!(s, "{},{:.16e},{:.16e},{},{}", r.nu, r.mesh, r.err_l2, b1, ord);
        }
        s
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.records.windows(2).all(|w| w[1].err_l2 < w[0].err_l2)
    }

    /// Nonincreasing up to a 10% allowance.
    pub fn nonincreasing_with_noise(&self) -> bool {
        self.records.windows(2).all(|w| w[1].err_l2 <= 1.1 * w[0].err_l2)
    }
}

/// Parameters of a convergence sweep.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub t: f64,
    pub nus: Vec<usize>,
    pub tau_scheme: TauScheme,
    pub kappa_scheme: KappaScheme,
    pub omega: Option<OmegaSchedule>,
    pub with_b1: bool,
}

/// Reference for the sweep: U_w(t,0)f, or U(t,0)f under a power schedule.
pub fn reference_solution(
    prob: &Problem,
    t: f64,
    min_mesh: f64,
    cfg: &PropagatorConfig,
) -> Result<(SpinorField, ReferenceInfo, Option<f64>)> {
    let undamped = crate::weights::zero(prob.f.l());
    let w = match cfg.backend {
        _ if prob.w.is_zero => &undamped,
        _ => &prob.w,
    };
    if w.is_zero && prob.p.scalar.is_none() && !prob.p.has_vector() && prob.hs.is_none() {
        // Free evolution: a single kinetic multiplier is exact.
        let u = evolve_unitary(&prob.f, &prob.p, &prob.hs, &PropagatorConfig::strang(t, 0.0, t))?;
        return Ok((
            u,
            ReferenceInfo {
                description: "exact free evolution (Fourier multiplier)".into(),
                consistency_gap: None,
                valid: true,
            },
            None,
        ));
    }
    let dense_ok = prob.f.grid().len() * prob.f.l() <= DENSE_MAX_UNKNOWNS;
    if dense_ok {
        let c = PropagatorConfig::new(Backend::DenseOracle, cfg.dt, 0.0, t);
        let u = evolve_damped(&prob.f, &prob.p, &prob.hs, w, &c)?;
        return Ok((
            u,
            ReferenceInfo {
                description: format!(
                    "dense_oracle, adaptive Dormand-Prince, local L2 error <= {:e}",
                    crate::propagator::DENSE_TOLERANCE
                ),
                consistency_gap: None,
                valid: true,
            },
            None,
        ));
    }
    let backend = if prob.p.has_vector() {
        Backend::MolRk4
    } else {
        Backend::SpectralStrang
    };
    let dt = min_mesh / 64.0;
    let a = evolve_damped(
        &prob.f,
        &prob.p,
        &prob.hs,
        w,
        &PropagatorConfig::new(backend, dt, 0.0, t),
    )?;
    let b = evolve_damped(
        &prob.f,
        &prob.p,
        &prob.hs,
        w,
        &PropagatorConfig::new(backend, dt / 2.0, 0.0, t),
    )?;
    let gap = l2_norm(&a.difference(&b)?);
    Ok((
        b,
        ReferenceInfo {
            description: format!("{backend}, dt = {:e} (checked against dt = {dt:e})", dt / 2.0),
            consistency_gap: Some(gap),
            valid: true,
        },
        Some(gap),
    ))
}

/// Runs the product formula for every ν (concurrently) and compares with
/// the reference.
pub fn convergence_study(prob: &Problem, sweep: &SweepSpec, cfg: &PropagatorConfig) -> Result<ConvergenceStudy> {
    if sweep.nus.is_empty() || sweep.nus.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("ν list must be nonempty and increasing".into()));
    }
    let subs: Vec<Subdivision> = sweep
        .nus
        .iter()
        .map(|&nu| make_subdivision(sweep.t, nu, sweep.tau_scheme, sweep.kappa_scheme))
        .collect::<Result<_>>()?;
    let min_mesh = subs.iter().map(Subdivision::mesh).fold(f64::INFINITY, f64::min);
    let ref_prob = match sweep.omega {
        Some(OmegaSchedule::Power { .. }) => Problem {
            w: crate::weights::zero(prob.f.l()),
            ..prob.clone()
        },
        _ => prob.clone(),
    };
    let (reference, mut info, gap) = reference_solution(&ref_prob, sweep.t, min_mesh, cfg)?;
    let results: Vec<Result<ConvergenceRecord>> = subs
        .par_iter()
        .map(|sub| {
            let u = interleaved_evolution(prob, sub, sweep.omega.as_ref(), cfg)?;
            let diff = u.difference(&reference)?;
            Ok(ConvergenceRecord {
                nu: sub.nu(),
                mesh: sub.mesh(),
                err_l2: l2_norm(&diff),
                err_b1: if sweep.with_b1 {
                    Some(sobolev_norm(&diff, 1)?)
                } else {
                    None
                },
            })
        })
        .collect();
    let records: Vec<ConvergenceRecord> = results.into_iter().collect::<Result<_>>()?;
    if let Some(g) = gap {
        let smallest = records.iter().map(|r| r.err_l2).fold(f64::INFINITY, f64::min);
        info.valid = g < 0.1 * smallest;
    }
    Ok(ConvergenceStudy {
        fitted_order: fit_order(&records),
        records,
        reference: info,
        kappa_scheme: sweep.kappa_scheme,
        tau_scheme: sweep.tau_scheme,
        omega: sweep.omega,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub nu: usize,
    pub schemes: Vec<String>,
    /// (i, j, ‖u_i − u_j‖) for every pair.
    pub pairs: Vec<(usize, usize, f64)>,
    pub max_distance: f64,
}

/// Max pairwise L² distance between product-formula results that differ
/// only in their κ, κ' choices.
pub fn kappa_sensitivity(
    prob: &Problem,
    t: f64,
    nu: usize,
    schemes: &[KappaScheme],
    omega: Option<&OmegaSchedule>,
    cfg: &PropagatorConfig,
) -> Result<KappaReport> {
    let outs: Vec<Result<SpinorField>> = schemes
        .par_iter()
        .map(|&k| {
            let sub = make_subdivision(t, nu, TauScheme::Uniform, k)?;
            interleaved_evolution(prob, &sub, omega, cfg)
        })
        .collect();
    let outs: Vec<SpinorField> = outs.into_iter().collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    let mut max_distance: f64 = 0.0;
    for i in 0..outs.len() {
        for j in i + 1..outs.len() {
            let d = l2_norm(&outs[i].difference(&outs[j])?);
            max_distance = max_distance.max(d);
            pairs.push((i, j, d));
        }
    }
    Ok(KappaReport {
        nu,
        schemes: schemes.iter().map(ToString::to_string).collect(),
        pairs,
        max_distance,
    })
}
