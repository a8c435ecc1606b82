//! Time evolution: the unitary propagator U(t,s), the damped propagator
//! U_w(t,s), and a dense small-system oracle.
//!
//! All three backends share the spectral derivative operators of
//! [`crate::grid`], so backend comparisons isolate time-integration error.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::Potential;
use crate::grid::{l2_norm, pairwise_sum, Grid, SpinorField, MAX_DIM};
use crate::linalg::{apply_pointwise, expm, hermitian_deviation};
use crate::weights::{self, WeightSpec};
use crate::{CMat, C64};

const I: C64 = C64::new(0.0, 1.0);
const ZERO: C64 = C64::new(0.0, 0.0);

/// Hermitian spin coupling H_s(t,x), in frequency units.
#[derive(Clone)]
pub struct SpinTerm {
    pub l: usize,
    eval: Option<Arc<dyn Fn(f64, &[f64]) -> CMat + Send + Sync>>,
    pub time_independent: bool,
}

impl fmt::Debug for SpinTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpinTerm")
            .field("l", &self.l)
            .field("present", &self.eval.is_some())
            .finish()
    }
}

impl SpinTerm {
    pub fn none(l: usize) -> Self {
        SpinTerm {
            l,
            eval: None,
            time_independent: true,
        }
    }

    pub fn new(l: usize, f: impl Fn(f64, &[f64]) -> CMat + Send + Sync + 'static) -> Self {
        SpinTerm {
            l,
            eval: Some(Arc::new(f)),
            time_independent: false,
        }
    }

    /// A constant matrix H_s.
    pub fn constant(m: CMat) -> Self {
        let l = m.nrows();
        SpinTerm {
            l,
            eval: Some(Arc::new(move |_, _| m.clone())),
            time_independent: true,
        }
    }

    pub fn is_none(&self) -> bool {
        self.eval.is_none()
    }

    pub fn matrix(&self, t: f64, x: &[f64]) -> CMat {
        match &self.eval {
            Some(f) => f(t, x),
            None => CMat::zeros(self.l, self.l),
        }
    }

    /// Samples Hermiticity on a grid.
    pub fn check_hermitian(&self, grid: &Grid, t: f64) -> Result<()> {
        if self.eval.is_none() {
            return Ok(());
        }
        let d = grid.dim();
        for p in 0..grid.len() {
            let x = grid.point(p);
            let dev = hermitian_deviation(&self.matrix(t, &x[..d]));
            if dev > 1e-12 {
                return Err(Error::NotHermitian { deviation: dev });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    SpectralStrang,
    MolRk4,
    DenseOracle,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::SpectralStrang => "spectral_strang",
            Backend::MolRk4 => "mol_rk4",
            Backend::DenseOracle => "dense_oracle",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral_strang" => Ok(Backend::SpectralStrang),
            "mol_rk4" => Ok(Backend::MolRk4),
            "dense_oracle" => Ok(Backend::DenseOracle),
            other => Err(Error::Config(format!(
                "unknown backend {other:?}; expected spectral_strang, mol_rk4 or dense_oracle"
            ))),
        }
    }
}

/// Field snapshots every `every` steps, written to `dir/step_NNNNNN.bin`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub every: usize,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagatorConfig {
    pub backend: Backend,
    pub dt: f64,
    pub t0: f64,
    pub t1: f64,
    pub checkpoint: Option<Checkpoint>,
}

/// Dense oracle limit on N·l.
pub const DENSE_MAX_UNKNOWNS: usize = 8192;
/// Local L² error target of the dense oracle's adaptive integrator.
pub const DENSE_TOLERANCE: f64 = 1e-10;

impl PropagatorConfig {
    pub fn new(backend: Backend, dt: f64, t0: f64, t1: f64) -> Self {
        PropagatorConfig {
            backend,
            dt,
            t0,
            t1,
            checkpoint: None,
        }
    }

    pub fn strang(dt: f64, t0: f64, t1: f64) -> Self {
        Self::new(Backend::SpectralStrang, dt, t0, t1)
    }

    pub fn with_interval(&self, t0: f64, t1: f64) -> Self {
        PropagatorConfig {
            t0,
            t1,
            checkpoint: None,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time step {} must be positive",
                self.dt
            )));
        }
        if !(self.t1 >= self.t0) {
            return Err(Error::InvalidArgument(format!(
                "interval [{}, {}] is reversed",
                self.t0, self.t1
            )));
        }
        Ok(())
    }

    /// Step sizes covering [t0, t1]: full steps then one shortened step.
    pub fn steps(&self) -> Vec<f64> {
        let span = self.t1 - self.t0;
        if span <= 0.0 {
            return Vec::new();
        }
        let full = (span / self.dt + 1e-9).floor() as usize;
        let mut v = vec![self.dt; full];
        let rest = span - full as f64 * self.dt;
        if rest > 1e-12 * span.max(self.dt) {
            v.push(rest);
        }
        v
    }
}

/// Explicit stability limit of the classical four-stage integrator on the
/// spectral Laplacian, per axis: 0.5·m·Δx²/ħ·(2/π²).
pub fn rk4_stability_limit(grid: &Grid, p: &Potential) -> f64 {
    let dx = grid.min_spacing();
    0.5 * p.mass * dx * dx / p.hbar * (2.0 / (std::f64::consts::PI * std::f64::consts::PI))
}

/// U(t1, t0) f.
pub fn evolve_unitary(f: &SpinorField, p: &Potential, hs: &SpinTerm, cfg: &PropagatorConfig) -> Result<SpinorField> {
    evolve_damped(f, p, hs, &weights::zero(f.l()), cfg)
}

/// U_w(t1, t0) f.
pub fn evolve_damped(
    f: &SpinorField,
    p: &Potential,
    hs: &SpinTerm,
    w: &WeightSpec,
    cfg: &PropagatorConfig,
) -> Result<SpinorField> {
    evolve_observed(f, p, hs, w, cfg, &mut |_, _, _| {})
}

/// Like [`evolve_damped`], calling `observer(step, t, u)` on the initial
/// state (step 0) and after every step. The dense oracle reports only the
/// initial and final states.
pub fn evolve_observed(
    f: &SpinorField,
    p: &Potential,
    hs: &SpinTerm,
    w: &WeightSpec,
    cfg: &PropagatorConfig,
    observer: &mut dyn FnMut(usize, f64, &SpinorField),
) -> Result<SpinorField> {
    cfg.validate()?;
    f.validate()?;
    let grid = f.grid();
    if w.l != f.l() || hs.l != f.l() {
        return Err(Error::Mismatch(format!(
            "field has l = {}, weight l = {}, spin term l = {}",
            f.l(),
            w.l,
            hs.l
        )));
    }
    if p.dim != grid.dim() {
        return Err(Error::Mismatch(format!(
            "potential is {}-dimensional, grid is {}-dimensional",
            p.dim,
            grid.dim()
        )));
    }
    observer(0, cfg.t0, f);
    let out = match cfg.backend {
        Backend::SpectralStrang => {
            if p.has_vector() {
                return Err(Error::UnsupportedBackend {
                    backend: "spectral_strang",
                    reason: "a nonzero vector potential needs mol_rk4 or dense_oracle".into(),
                });
            }
            Strang::new(grid, p, hs, w).run(f, cfg, observer)?
        }
        Backend::MolRk4 => Rk4::new(grid, p, hs, w, cfg)?.run(f, cfg, observer)?,
        Backend::DenseOracle => {
            let u = DenseOracle::new(grid, p, hs, w)?.run(f, cfg.t0, cfg.t1)?;
            observer(1, cfg.t1, &u);
            u
        }
    };
    out.validate()?;
    Ok(out)
}

fn checkpoint(cfg: &PropagatorConfig, step: usize, u: &SpinorField) -> Result<()> {
    if let Some(c) = &cfg.checkpoint {
        if c.every > 0 && step.is_multiple_of(c.every) {
            std::fs::create_dir_all(&c.dir)?;
            u.save(&c.dir.join(format!("step_{step:06}.bin")))?;
        }
    }
    Ok(())
}

/// Pointwise multiplier, component-major diagonal or one matrix per point.
enum PointFactor {
    Diagonal(Vec<C64>),
    Full(Vec<CMat>),
}

impl PointFactor {
    fn apply(&self, u: &mut SpinorField) {
        let n = u.grid().len();
        match self {
            PointFactor::Diagonal(d) => {
                u.data_mut().par_iter_mut().zip(d.par_iter()).for_each(|(v, m)| *v *= m);
            }
            PointFactor::Full(ms) => {
                let data = u.data_mut();
                for (p, m) in ms.iter().enumerate() {
                    apply_pointwise(m, data, n, p);
                }
            }
        }
    }
}

/// exp(−h·(i𝔮V/ħ + iH_s + W)) at every grid point, sampled at time t.
fn pointwise_factor(grid: &Grid, p: &Potential, hs: &SpinTerm, w: &WeightSpec, t: f64, h: f64) -> PointFactor {
    let n = grid.len();
    let d = grid.dim();
    let l = w.l;
    let qh = p.charge / p.hbar;
    if (hs.is_none() && (w.is_diagonal() || w.is_zero)) || l == 1 {
        let mut out = vec![ZERO; n * l];
        let vals: Vec<Vec<C64>> = (0..n)
            .into_par_iter()
            .map(|pt| {
                let x = grid.point(pt);
                let x = &x[..d];
                let v = qh * p.scalar_at(t, x);
                let mut wd = vec![0.0; l];
                if !w.is_zero && !w.diagonal_into(t, x, &mut wd) {
                    wd[0] = w.matrix(t, x)[(0, 0)].re;
                }
                let hsd = if hs.is_none() { 0.0 } else { hs.matrix(t, x)[(0, 0)].re };
                (0..l).map(|c| (-(I * (v + hsd) + wd[c]) * h).exp()).collect()
            })
            .collect();
        for (pt, v) in vals.into_iter().enumerate() {
            for c in 0..l {
                out[c * n + pt] = v[c];
            }
        }
        return PointFactor::Diagonal(out);
    }
    let mats = (0..n)
        .into_par_iter()
        .map(|pt| {
            let x = grid.point(pt);
            let x = &x[..d];
            let v = qh * p.scalar_at(t, x);
            let mut gen = hs.matrix(t, x) * I + w.matrix(t, x);
            for c in 0..l {
                gen[(c, c)] += I * v;
            }
            expm(&(gen * C64::new(-h, 0.0)))
        })
        .collect();
    PointFactor::Full(mats)
}

struct Strang<'a> {
    grid: &'a Grid,
    p: &'a Potential,
    hs: &'a SpinTerm,
    w: &'a WeightSpec,
    cache: Option<(f64, Arc<PointFactor>, Vec<C64>)>,
}

impl<'a> Strang<'a> {
    fn new(grid: &'a Grid, p: &'a Potential, hs: &'a SpinTerm, w: &'a WeightSpec) -> Self {
        Strang {
            grid,
            p,
            hs,
            w,
            cache: None,
        }
    }

    fn is_static(&self) -> bool {
        self.p.time_independent && self.hs.time_independent && (self.w.time_independent || self.w.is_zero)
    }

    fn kinetic(&self, h: f64) -> Vec<C64> {
        let c = self.p.hbar / (2.0 * self.p.mass);
        self.grid
            .k_squared()
            .iter()
            .map(|k2| C64::from_polar(1.0, -c * k2 * h))
            .collect()
    }

    fn step(&mut self, u: &mut SpinorField, t: f64, h: f64) {
        let half = 0.5 * h;
        let kin;
        let (first, second) = if self.is_static() {
            let hit = matches!(&self.cache, Some((ch, _, _)) if *ch == h);
            if !hit {
                let f = Arc::new(pointwise_factor(self.grid, self.p, self.hs, self.w, t, half));
                self.cache = Some((h, f, self.kinetic(h)));
            }
            let (_, f, k) = self.cache.as_ref().unwrap();
            kin = k.clone();
            (f.clone(), f.clone())
        } else {
            if !matches!(&self.cache, Some((ch, _, _)) if *ch == h) {
                self.cache = Some((h, Arc::new(PointFactor::Diagonal(Vec::new())), self.kinetic(h)));
            }
            kin = self.cache.as_ref().unwrap().2.clone();
            (
                Arc::new(pointwise_factor(self.grid, self.p, self.hs, self.w, t + 0.25 * h, half)),
                Arc::new(pointwise_factor(self.grid, self.p, self.hs, self.w, t + 0.75 * h, half)),
            )
        };
        first.apply(u);
        for c in 0..u.l() {
            self.grid.apply_multiplier(u.component_mut(c), &kin);
        }
        second.apply(u);
    }

    fn run(
        mut self,
        f: &SpinorField,
        cfg: &PropagatorConfig,
        observer: &mut dyn FnMut(usize, f64, &SpinorField),
    ) -> Result<SpinorField> {
        let mut u = f.clone();
        let mut t = cfg.t0;
        for (i, h) in cfg.steps().into_iter().enumerate() {
            self.step(&mut u, t, h);
            t += h;
            observer(i + 1, t, &u);
            checkpoint(cfg, i + 1, &u)?;
        }
        Ok(u)
    }
}

/// Pointwise coefficients of the right-hand side at one time.
struct PointData {
    avec: Option<Vec<[f64; MAX_DIM]>>,
    /// 𝔮V + 𝔮²|A|²/2m
    pot: Vec<f64>,
    gen: PointGen,
}

/// iH_s + W per point.
enum PointGen {
    None,
    /// Diagonal W only, stored component-major like the field data.
    Diagonal(Vec<f64>),
    Full(Vec<CMat>),
}

/// Spectral right-hand side −(i/ħ)(H + ħH_s)u − W u.
struct Rk4<'a> {
    grid: &'a Grid,
    p: &'a Potential,
    hs: &'a SpinTerm,
    w: &'a WeightSpec,
    d1: Vec<Vec<C64>>,
    lap: Vec<C64>,
    /// Coefficients evaluated once when nothing depends on time.
    frozen: Option<PointData>,
}

impl<'a> Rk4<'a> {
    fn new(
        grid: &'a Grid,
        p: &'a Potential,
        hs: &'a SpinTerm,
        w: &'a WeightSpec,
        cfg: &PropagatorConfig,
    ) -> Result<Self> {
        let limit = rk4_stability_limit(grid, p);
        if cfg.dt > limit {
            return Err(Error::StabilityLimit { dt: cfg.dt, limit });
        }
        let d = grid.dim();
        let d1 = (0..d)
            .map(|a| {
                let mut alpha = [0; MAX_DIM];
                alpha[a] = 1;
                grid.derivative_multiplier(alpha)
            })
            .collect();
        let lap = grid.k_squared().iter().map(|k2| C64::new(-k2, 0.0)).collect();
        let mut rk = Rk4 {
            grid,
            p,
            hs,
            w,
            d1,
            lap,
            frozen: None,
        };
        if p.time_independent && hs.time_independent && (w.time_independent || w.is_zero) {
            rk.frozen = Some(rk.point_data(cfg.t0));
        }
        Ok(rk)
    }

    fn point_data(&self, t: f64) -> PointData {
        let grid = self.grid;
        let (n, d, l) = (grid.len(), grid.dim(), self.w.l);
        let p = self.p;
        let (m, q) = (p.mass, p.charge);
        let xs: Vec<[f64; MAX_DIM]> = (0..n).map(|i| grid.point(i)).collect();
        let avec: Option<Vec<[f64; MAX_DIM]>> = p
            .vector
            .as_ref()
            .map(|_| xs.iter().map(|x| p.vector_at(t, &x[..d])).collect());
        let pot = (0..n)
            .map(|i| {
                let mut v = q * p.scalar_at(t, &xs[i][..d]);
                if let Some(a) = &avec {
                    let a2: f64 = a[i][..d].iter().map(|v| v * v).sum();
                    v += q * q * a2 / (2.0 * m);
                }
                v
            })
            .collect();
        let gen = if self.hs.is_none() && self.w.is_zero {
            PointGen::None
        } else if self.hs.is_none() && self.w.is_diagonal() {
            let mut diag = vec![0.0; n * l];
            let mut buf = vec![0.0; l];
            for (i, x) in xs.iter().enumerate() {
                self.w.diagonal_into(t, &x[..d], &mut buf);
                for (c, v) in buf.iter().enumerate() {
                    diag[c * n + i] = *v;
                }
            }
            PointGen::Diagonal(diag)
        } else {
            PointGen::Full(
                xs.iter()
                    .map(|x| {
                        let x = &x[..d];
                        let mut g = CMat::zeros(l, l);
                        if !self.hs.is_none() {
                            g += self.hs.matrix(t, x) * I;
                        }
                        if !self.w.is_zero {
                            g += self.w.matrix(t, x);
                        }
                        g
                    })
                    .collect(),
            )
        };
        PointData { avec, pot, gen }
    }

    fn rhs(&self, t: f64, u: &SpinorField) -> SpinorField {
        let grid = self.grid;
        let n = grid.len();
        let d = grid.dim();
        let l = u.l();
        let (m, q, hb) = (self.p.mass, self.p.charge, self.p.hbar);
        let fresh;
        let pd = match &self.frozen {
            Some(pd) => pd,
            None => {
                fresh = self.point_data(t);
                &fresh
            }
        };
        let inverse_of = |hat: &[C64], mult: &[C64]| -> Vec<C64> {
            let mut v: Vec<C64> = hat.iter().zip(mult).map(|(a, b)| a * b).collect();
            grid.fft_inverse(&mut v);
            v
        };
        let mut out = SpinorField::zeros(grid, l);
        for c in 0..l {
            let uc = u.component(c);
            let mut hat = uc.to_vec();
            grid.fft_forward(&mut hat);
            let mut hu: Vec<C64> = inverse_of(&hat, &self.lap)
                .iter()
                .map(|v| v * (-hb * hb / (2.0 * m)))
                .collect();
            if let Some(a) = &pd.avec {
                let coef = I * (hb * q / (2.0 * m));
                for ax in 0..d {
                    let mut au: Vec<C64> = uc.iter().zip(a).map(|(v, a)| v * a[ax]).collect();
                    grid.apply_multiplier(&mut au, &self.d1[ax]);
                    let du = inverse_of(&hat, &self.d1[ax]);
                    for i in 0..n {
                        hu[i] += coef * (au[i] + a[i][ax] * du[i]);
                    }
                }
            }
            let oc = out.component_mut(c);
            for i in 0..n {
                oc[i] = -I / hb * (hu[i] + pd.pot[i] * uc[i]);
            }
        }
        let data = out.data_mut();
        match &pd.gen {
            PointGen::None => {}
            PointGen::Diagonal(diag) => {
                for (o, (w, v)) in data.iter_mut().zip(diag.iter().zip(u.data())) {
                    *o -= *w * v;
                }
            }
            PointGen::Full(gens) => {
                for (i, g) in gens.iter().enumerate() {
                    for r in 0..l {
                        let mut s = ZERO;
                        for c in 0..l {
                            s += g[(r, c)] * u.value(i, c);
                        }
                        data[r * n + i] -= s;
                    }
                }
            }
        }
        out
    }

    fn run(
        self,
        f: &SpinorField,
        cfg: &PropagatorConfig,
        observer: &mut dyn FnMut(usize, f64, &SpinorField),
    ) -> Result<SpinorField> {
        let mut u = f.clone();
        let mut t = cfg.t0;
        let axpy = |a: &SpinorField, s: f64, b: &SpinorField| {
            let mut o = a.clone();
            for (x, y) in o.data_mut().iter_mut().zip(b.data()) {
                *x += y * s;
            }
            o
        };
        for (i, h) in cfg.steps().into_iter().enumerate() {
            let k1 = self.rhs(t, &u);
            let k2 = self.rhs(t + 0.5 * h, &axpy(&u, 0.5 * h, &k1));
            let k3 = self.rhs(t + 0.5 * h, &axpy(&u, 0.5 * h, &k2));
            let k4 = self.rhs(t + h, &axpy(&u, h, &k3));
            let data = u.data_mut();
            for j in 0..data.len() {
                data[j] += (k1.data()[j] + (k2.data()[j] + k3.data()[j]) * 2.0 + k4.data()[j]) * (h / 6.0);
            }
            t += h;
            observer(i + 1, t, &u);
            checkpoint(cfg, i + 1, &u)?;
        }
        Ok(u)
    }
}

/// Fully assembled discrete generator integrated by an adaptive
/// Dormand–Prince 5(4) pair.
pub struct DenseOracle<'a> {
    grid: &'a Grid,
    p: &'a Potential,
    hs: &'a SpinTerm,
    w: &'a WeightSpec,
    /// −(i/ħ)H on one component, assembled once when the potential is static.
    spatial: Option<DMatrix<C64>>,
    d1: Vec<DMatrix<C64>>,
    lap: DMatrix<C64>,
}

/// Matrix of a Fourier multiplier, built column by column from unit vectors.
fn operator_matrix(grid: &Grid, mult: &[C64]) -> DMatrix<C64> {
    let n = grid.len();
    let cols: Vec<Vec<C64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![ZERO; n];
            e[j] = C64::new(1.0, 0.0);
            grid.apply_multiplier(&mut e, mult);
            e
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| cols[j][i])
}

impl<'a> DenseOracle<'a> {
    pub fn new(grid: &'a Grid, p: &'a Potential, hs: &'a SpinTerm, w: &'a WeightSpec) -> Result<Self> {
        let unknowns = grid.len() * w.l;
        if unknowns > DENSE_MAX_UNKNOWNS {
            return Err(Error::OracleScale(format!(
                "{unknowns} unknowns exceed the dense oracle limit of {DENSE_MAX_UNKNOWNS}"
            )));
        }
        let d = grid.dim();
        let d1 = if p.has_vector() {
            (0..d)
                .map(|a| {
                    let mut alpha = [0; MAX_DIM];
                    alpha[a] = 1;
                    operator_matrix(grid, &grid.derivative_multiplier(alpha))
                })
                .collect()
        } else {
            Vec::new()
        };
        let lapm: Vec<C64> = grid.k_squared().iter().map(|k2| C64::new(-k2, 0.0)).collect();
        let lap = operator_matrix(grid, &lapm);
        let mut o = DenseOracle {
            grid,
            p,
            hs,
            w,
            spatial: None,
            d1,
            lap,
        };
        if p.time_independent {
            o.spatial = Some(o.assemble(0.0));
        }
        Ok(o)
    }

    fn assemble(&self, t: f64) -> DMatrix<C64> {
        let (m, q, hb) = (self.p.mass, self.p.charge, self.p.hbar);
        let n = self.grid.len();
        let d = self.grid.dim();
        let mut h = &self.lap * C64::new(-hb * hb / (2.0 * m), 0.0);
        let xs: Vec<[f64; MAX_DIM]> = (0..n).map(|i| self.grid.point(i)).collect();
        if self.p.has_vector() {
            let a: Vec<[f64; MAX_DIM]> = xs.iter().map(|x| self.p.vector_at(t, &x[..d])).collect();
            let coef = I * (hb * q / (2.0 * m));
            for ax in 0..d {
                let da = DVector::from_iterator(n, a.iter().map(|v| C64::new(v[ax], 0.0)));
                let dmat = &self.d1[ax];
                // D1·diag(A) + diag(A)·D1
                for i in 0..n {
                    for j in 0..n {
                        h[(i, j)] += coef * dmat[(i, j)] * (da[j] + da[i]);
                    }
                }
            }
            for i in 0..n {
                let a2: f64 = a[i][..d].iter().map(|v| v * v).sum();
                h[(i, i)] += q * q * a2 / (2.0 * m);
            }
        }
        for i in 0..n {
            h[(i, i)] += q * self.p.scalar_at(t, &xs[i][..d]);
        }
        h * (-I / hb)
    }

    fn rhs(&self, t: f64, u: &[C64]) -> Vec<C64> {
        let n = self.grid.len();
        let l = self.w.l;
        let d = self.grid.dim();
        let owned;
        let a = match &self.spatial {
            Some(a) => a,
            None => {
                owned = self.assemble(t);
                &owned
            }
        };
        let mut out = vec![ZERO; n * l];
        for c in 0..l {
            let v = DVector::from_column_slice(&u[c * n..(c + 1) * n]);
            let r = a * v;
            out[c * n..(c + 1) * n].copy_from_slice(r.as_slice());
        }
        if !self.hs.is_none() || !self.w.is_zero {
            for i in 0..n {
                let x = self.grid.point(i);
                let x = &x[..d];
                let mut gen = CMat::zeros(l, l);
                if !self.hs.is_none() {
                    gen += self.hs.matrix(t, x) * I;
                }
                if !self.w.is_zero {
                    gen += self.w.matrix(t, x);
                }
                for r in 0..l {
                    let mut s = ZERO;
                    for c in 0..l {
                        s += gen[(r, c)] * u[c * n + i];
                    }
                    out[r * n + i] -= s;
                }
            }
        }
        out
    }

    /// Integrates from t0 to t1 with local L² error ≤ [`DENSE_TOLERANCE`].
    pub fn run(&self, f: &SpinorField, t0: f64, t1: f64) -> Result<SpinorField> {
        let vol = self.grid.cell_volume();
        let mut u = f.data().to_vec();
        let mut t = t0;
        let span = t1 - t0;
        if span <= 0.0 {
            return Ok(f.clone());
        }
        let mut h = (span / 16.0).min(1e-3);
        let mut k1 = self.rhs(t, &u);
        let mut steps = 0usize;
        while t < t1 {
            if t + h > t1 {
                h = t1 - t;
            }
            let stage = |ks: &[(&Vec<C64>, f64)]| -> Vec<C64> {
                let mut y = u.clone();
                for (k, a) in ks {
                    if *a != 0.0 {
                        for (yi, ki) in y.iter_mut().zip(k.iter()) {
                            *yi += ki * (h * a);
                        }
                    }
                }
                y
            };
            let k2 = self.rhs(t + h / 5.0, &stage(&[(&k1, 1.0 / 5.0)]));
            let k3 = self.rhs(t + 3.0 * h / 10.0, &stage(&[(&k1, 3.0 / 40.0), (&k2, 9.0 / 40.0)]));
            let k4 = self.rhs(
                t + 4.0 * h / 5.0,
                &stage(&[(&k1, 44.0 / 45.0), (&k2, -56.0 / 15.0), (&k3, 32.0 / 9.0)]),
            );
            let k5 = self.rhs(
                t + 8.0 * h / 9.0,
                &stage(&[
                    (&k1, 19372.0 / 6561.0),
                    (&k2, -25360.0 / 2187.0),
                    (&k3, 64448.0 / 6561.0),
                    (&k4, -212.0 / 729.0),
                ]),
            );
            let k6 = self.rhs(
                t + h,
                &stage(&[
                    (&k1, 9017.0 / 3168.0),
                    (&k2, -355.0 / 33.0),
                    (&k3, 46732.0 / 5247.0),
                    (&k4, 49.0 / 176.0),
                    (&k5, -5103.0 / 18656.0),
                ]),
            );
            let y5 = stage(&[
                (&k1, 35.0 / 384.0),
                (&k3, 500.0 / 1113.0),
                (&k4, 125.0 / 192.0),
                (&k5, -2187.0 / 6784.0),
                (&k6, 11.0 / 84.0),
            ]);
            let k7 = self.rhs(t + h, &y5);
            let e = [
                71.0 / 57600.0,
                0.0,
                -71.0 / 16695.0,
                71.0 / 1920.0,
                -17253.0 / 339200.0,
                22.0 / 525.0,
                -1.0 / 40.0,
            ];
            let ks = [&k1, &k2, &k3, &k4, &k5, &k6, &k7];
            let errs: Vec<f64> = (0..u.len())
                .map(|i| {
                    let mut s = ZERO;
                    for (k, c) in ks.iter().zip(e.iter()) {
                        s += k[i] * *c;
                    }
                    (s * h).norm_sqr()
                })
                .collect();
            let err = (pairwise_sum(&errs) * vol).sqrt();
            if err <= DENSE_TOLERANCE {
                t += h;
                u = y5;
                k1 = k7;
                steps += 1;
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * (DENSE_TOLERANCE / err).powf(0.2)).clamp(0.2, 5.0)
            };
            h *= factor;
            if !(h > 1e-14 * span.max(1.0)) {
                return Err(Error::NonFinite("dense oracle step size underflow".into()));
            }
            if steps > 50_000_000 {
                return Err(Error::OracleScale("dense oracle exceeded its step budget".into()));
            }
        }
        SpinorField::from_data(self.grid, self.w.l, u)
    }
}

/// ⟨x⟩ = Σ x|f|² vol / ‖f‖².
pub fn expectation_position(f: &SpinorField) -> Result<Vec<f64>> {
    let grid = f.grid();
    let d = grid.dim();
    let dens = f.density();
    let total = pairwise_sum(&dens);
    if total == 0.0 {
        return Err(Error::ZeroField);
    }
    Ok((0..d)
        .map(|a| {
            let terms: Vec<f64> = dens.iter().enumerate().map(|(p, r)| grid.point(p)[a] * r).collect();
            pairwise_sum(&terms) / total
        })
        .collect())
}

/// Σ_{x ∈ region} |f(x)|² vol.
pub fn survival_mass(f: &SpinorField, region: impl Fn(&[f64]) -> bool) -> f64 {
    let grid = f.grid();
    let d = grid.dim();
    let dens = f.density();
    let terms: Vec<f64> = dens
        .iter()
        .enumerate()
        .map(|(p, r)| if region(&grid.point(p)[..d]) { *r } else { 0.0 })
        .collect();
    pairwise_sum(&terms) * grid.cell_volume()
}

/// ‖u‖ after every step, starting with the initial state.
pub fn norm_history(
    f: &SpinorField,
    p: &Potential,
    hs: &SpinTerm,
    w: &WeightSpec,
    cfg: &PropagatorConfig,
) -> Result<(SpinorField, Vec<(f64, f64)>)> {
    let mut hist = Vec::new();
    let u = evolve_observed(f, p, hs, w, cfg, &mut |_, t, u| hist.push((t, l2_norm(u))))?;
    Ok((u, hist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{gaussian_packet, inner_product};
    use crate::weights::{constant, corridor, Trajectory};

    fn packet(g: &Grid, c: f64, p0: f64, w: f64) -> SpinorField {
        gaussian_packet(g, 1, &[c], &[p0], w, &[C64::new(1.0, 0.0)], 1.0)
            .unwrap()
            .field
    }

    fn l2_dist(a: &SpinorField, b: &SpinorField) -> f64 {
        l2_norm(&a.difference(b).unwrap())
    }

    #[test]
    fn steps_cover_interval() {
        let c = PropagatorConfig::strang(0.3, 0.0, 1.0);
        let s = c.steps();
        assert_eq!(s.len(), 4);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(PropagatorConfig::strang(0.25, 0.0, 1.0).steps().len(), 4);
    }

    #[test]
    fn free_packet_drift_and_spreading() {
        let g = Grid::line(-20.0, 20.0, 512).unwrap();
        let (w0, p0, t) = (1.0, 1.5, 2.0);
        let f = packet(&g, -3.0, p0, w0);
        let p = Potential::free(1);
        let u = evolve_unitary(&f, &p, &SpinTerm::none(1), &PropagatorConfig::strang(0.01, 0.0, t)).unwrap();
        let x = expectation_position(&u).unwrap()[0];
        assert!((x - (-3.0 + p0 * t)).abs() < 1e-3 * g.spacing(0));
        let dens = u.density();
        let var: f64 = dens
            .iter()
            .enumerate()
            .map(|(i, r)| (g.point(i)[0] - x).powi(2) * r)
            .sum::<f64>()
            * g.cell_volume();
        // σ(t)² = w0² (1 + (ħ t / (2 m w0²))²)
        let expect = w0 * w0 * (1.0 + (t / (2.0 * w0 * w0)).powi(2));
        assert!((var - expect).abs() <= 1e-6 * expect, "{var} vs {expect}");
    }

    #[test]
    fn strang_is_unitary() {
        let g = Grid::line(-10.0, 10.0, 128).unwrap();
        let f = packet(&g, 0.5, 1.0, 0.8);
        let p = Potential::harmonic(1, 1.0, 1.0, [0.0, 0.0]);
        let hs = SpinTerm::none(1);
        let (_, hist) = norm_history(
            &f,
            &p,
            &hs,
            &weights::zero(1),
            &PropagatorConfig::strang(0.01, 0.0, 1.0),
        )
        .unwrap();
        for w in hist.windows(2) {
            assert!((w[1].1 - w[0].1).abs() <= 1e-12 * w[0].1);
        }
    }

    #[test]
    fn harmonic_matches_dense_oracle() {
        let g = Grid::line(-10.0, 10.0, 128).unwrap();
        let f = packet(&g, 1.0, 0.0, 1.0 / 2f64.sqrt());
        let p = Potential::harmonic(1, 1.0, 1.0, [0.0, 0.0]);
        let hs = SpinTerm::none(1);
        let dense = evolve_unitary(
            &f,
            &p,
            &hs,
            &PropagatorConfig::new(Backend::DenseOracle, 0.01, 0.0, 1.0),
        )
        .unwrap();
        let strang = evolve_unitary(&f, &p, &hs, &PropagatorConfig::strang(1e-3, 0.0, 1.0)).unwrap();
        let xd = expectation_position(&dense).unwrap()[0];
        let xs = expectation_position(&strang).unwrap()[0];
        assert!((xd - 1.0f64.cos()).abs() < 1e-6, "{xd}");
        assert!((xs - xd).abs() < 1e-6, "{xs} vs {xd}");
    }

    #[test]
    fn constant_weight_scales_unitary() {
        let g = Grid::line(-10.0, 10.0, 128).unwrap();
        let f = packet(&g, 0.0, 1.0, 0.8);
        let p = Potential::harmonic(1, 1.0, 0.7, [0.0, 0.0]);
        let hs = SpinTerm::none(1);
        let cfg = PropagatorConfig::strang(0.01, 0.0, 0.5);
        let u = evolve_unitary(&f, &p, &hs, &cfg).unwrap();
        let d = evolve_damped(&f, &p, &hs, &constant(1, 0.8), &cfg).unwrap();
        let expect = u.scaled(C64::new((-0.8f64 * 0.5).exp(), 0.0));
        assert!(l2_dist(&d, &expect) <= 1e-10 * l2_norm(&expect));
        let z = evolve_damped(&f, &p, &hs, &weights::zero(1), &cfg).unwrap();
        assert_eq!(z.data(), u.data());
    }

    #[test]
    fn corridor_strang_matches_dense() {
        let g = Grid::line(-10.0, 10.0, 128).unwrap();
        let f = packet(&g, 0.0, 1.0, 0.8);
        let p = Potential::free(1);
        let hs = SpinTerm::none(1);
        let w = corridor(
            vec![Trajectory::Linear {
                start: [0.0, 0.0],
                velocity: [1.0, 0.0],
            }],
            1.0,
            0.5,
        )
        .unwrap();
        let dense = evolve_damped(
            &f,
            &p,
            &hs,
            &w,
            &PropagatorConfig::new(Backend::DenseOracle, 0.01, 0.0, 0.5),
        )
        .unwrap();
        let strang = evolve_damped(&f, &p, &hs, &w, &PropagatorConfig::strang(2e-4, 0.0, 0.5)).unwrap();
        assert!(l2_dist(&dense, &strang) < 1e-6, "{}", l2_dist(&dense, &strang));
        assert!(l2_norm(&dense) < 1.0);
    }

    #[test]
    fn rk4_rejects_large_steps_and_strang_rejects_vector_potential() {
        let g = Grid::square(-5.0, 5.0, 32).unwrap();
        let f = gaussian_packet(&g, 1, &[0.0, 0.0], &[0.0, 0.0], 0.7, &[C64::new(1.0, 0.0)], 1.0)
            .unwrap()
            .field;
        let p = Potential::symmetric_gauge(0.5);
        let hs = SpinTerm::none(1);
        assert!(matches!(
            evolve_unitary(&f, &p, &hs, &PropagatorConfig::strang(0.01, 0.0, 0.1)),
            Err(Error::UnsupportedBackend { .. })
        ));
        assert!(matches!(
            evolve_unitary(&f, &p, &hs, &PropagatorConfig::new(Backend::MolRk4, 0.1, 0.0, 0.1)),
            Err(Error::StabilityLimit { .. })
        ));
    }

    #[test]
    fn rk4_magnetic_matches_dense() {
        let g = Grid::square(-6.0, 6.0, 32).unwrap();
        let f = gaussian_packet(&g, 1, &[0.5, 0.0], &[0.0, 1.0], 0.8, &[C64::new(1.0, 0.0)], 1.0)
            .unwrap()
            .field;
        let p = Potential::symmetric_gauge(0.8);
        let hs = SpinTerm::none(1);
        let dt = 0.5 * rk4_stability_limit(&g, &p);
        let rk = evolve_unitary(&f, &p, &hs, &PropagatorConfig::new(Backend::MolRk4, dt, 0.0, 0.5)).unwrap();
        let de = evolve_unitary(&f, &p, &hs, &PropagatorConfig::new(Backend::DenseOracle, dt, 0.0, 0.5)).unwrap();
        assert!(l2_dist(&rk, &de) < 1e-6, "{}", l2_dist(&rk, &de));
        assert!((l2_norm(&rk) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn spin_term_rotates_components() {
        // H_s = Ω σ_x mixes the two components; with no kinetic coupling
        // relevant to the spin part the populations oscillate as cos².
        let g = Grid::line(-10.0, 10.0, 64).unwrap();
        let f = gaussian_packet(&g, 2, &[0.0], &[0.0], 1.0, &[C64::new(1.0, 0.0), ZERO], 1.0)
            .unwrap()
            .field;
        let omega = 1.3;
        let sx = CMat::from_row_slice(2, 2, &[ZERO, C64::new(omega, 0.0), C64::new(omega, 0.0), ZERO]);
        let hs = SpinTerm::constant(sx);
        let t = 0.4;
        let u = evolve_unitary(&f, &Potential::free(1), &hs, &PropagatorConfig::strang(0.01, 0.0, t)).unwrap();
        let up: f64 = u.component(0).iter().map(|v| v.norm_sqr()).sum::<f64>() * g.cell_volume();
        assert!((up - (omega * t).cos().powi(2)).abs() < 1e-10);
    }

    #[test]
    fn composition_within_local_error() {
        let g = Grid::line(-10.0, 10.0, 128).unwrap();
        let f = packet(&g, 0.0, 1.0, 0.8);
        let p = Potential::harmonic(1, 1.0, 1.0, [0.0, 0.0]);
        let hs = SpinTerm::none(1);
        let w = corridor(
            vec![Trajectory::Linear {
                start: [0.0; 2],
                velocity: [0.5, 0.0],
            }],
            1.0,
            1.0,
        )
        .unwrap();
        let dt = 0.01;
        let full = evolve_damped(&f, &p, &hs, &w, &PropagatorConfig::strang(dt, 0.0, 0.6)).unwrap();
        let a = evolve_damped(&f, &p, &hs, &w, &PropagatorConfig::strang(dt, 0.0, 0.3)).unwrap();
        let b = evolve_damped(&a, &p, &hs, &w, &PropagatorConfig::strang(dt, 0.3, 0.6)).unwrap();
        let one = evolve_damped(&f, &p, &hs, &w, &PropagatorConfig::strang(dt, 0.0, dt)).unwrap();
        let fine = evolve_damped(&f, &p, &hs, &w, &PropagatorConfig::strang(dt / 16.0, 0.0, dt)).unwrap();
        let local = l2_dist(&one, &fine);
        assert!(l2_dist(&full, &b) <= 2.0 * local.max(1e-15));
    }

    #[test]
    fn diagnostics() {
        let g = Grid::line(-10.0, 10.0, 128).unwrap();
        let f = packet(&g, 0.0, 0.0, 1.0);
        assert!(expectation_position(&f).unwrap()[0].abs() < 1e-10);
        let n2 = inner_product(&f, &f).unwrap().re;
        assert!((survival_mass(&f, |_| true) - n2).abs() < 1e-14);
        // grid has a point at 0: weight it half on each side
        let left = survival_mass(&f, |x| x[0] < 0.0);
        let at0 = f.density()[64] * g.cell_volume();
        assert!((left + 0.5 * at0 - 0.5 * n2).abs() < 1e-10);
        assert!(matches!(
            expectation_position(&SpinorField::zeros(&g, 1)),
            Err(Error::ZeroField)
        ));
    }
}
