//! Desk-scale realization of the time-sliced restricted path integral in
//! d = 1: ordered weight factors along polylines, the one-step oscillatory
//! kernel, its iterates over a subdivision, and observable insertions.
//!
//! The kernel integral over the incoming point y keeps full weight on the
//! window |y − x| ≤ k·sqrt(ħρ/m), is blended smoothly to zero at twice that
//! distance, and is damped throughout by exp(−ε_c|y − x|²). The field is evaluated off
//! the grid by trigonometric interpolation, which is exact for the sampled
//! band-limited data.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{action_along, straight_path, PathPolyline, Potential};
use crate::grid::SpinorField;
use crate::linalg::{apply_pointwise, expm};
use crate::product::Subdivision;
use crate::propagator::SpinTerm;
use crate::quadrature::{gauss_legendre, gauss_legendre_on};
use crate::weights::{mollifier_f, WeightSpec};
use crate::{CMat, C64};

const I: C64 = C64::new(0.0, 1.0);
const ZERO: C64 = C64::new(0.0, 0.0);

/// Oracle size limits.
pub const MAX_SLICES: usize = 8;
pub const MAX_POINTS: usize = 512;

/// Time-ordered solution of dU/dθ = −(iH_s + W)(θ, q(θ)) U with U(s) = I.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderedFactor {
    pub value: CMat,
    pub substeps: usize,
}

/// Walks the cells of each segment's uniform lattice that meet [s, t],
/// yielding (overlap length, full cell bounds).
fn lattice_cells(path: &PathPolyline, s: f64, t: f64, substeps: usize, mut visit: impl FnMut(f64, f64, f64)) {
    let times = path.times();
    for j in 0..path.segments() {
        let (ta, tb) = (times[j], times[j + 1]);
        let a = s.max(ta);
        let b = t.min(tb);
        if !(b > a) {
            continue;
        }
        let h = (tb - ta) / substeps as f64;
        let mut k = (((a - ta) / h).floor() as usize).min(substeps - 1);
        while k < substeps {
            let c0 = ta + k as f64 * h;
            let c1 = if k + 1 == substeps { tb } else { ta + (k + 1) as f64 * h };
            if c0 >= b {
                break;
            }
            let len = c1.min(b) - c0.max(a);
            if len > 0.0 {
                visit(len, c0, c1);
            }
            k += 1;
        }
    }
}

/// Gauss–Legendre nodes per lattice cell for the averaged generator.
const CELL_NODES: usize = 4;

/// Product of cell exponentials exp(−|cell ∩ [s,t]|·Ḡ_cell) in time order,
/// Ḡ_cell the average of iH_s + W along the path over the full lattice cell.
/// The generator is piecewise constant on the lattice, so splitting at any
/// interior time composes exactly, and on whole cells the averaged weight
/// keeps the norm under exp(−∫(w − C_W)).
pub fn ordered_weight_factor(
    path: &PathPolyline,
    w: &WeightSpec,
    hs: &SpinTerm,
    s: f64,
    t: f64,
    substeps: usize,
) -> Result<OrderedFactor> {
    if !(s < t) || s < path.start() || t > path.end() {
        return Err(Error::InvalidArgument(format!(
            "interval [{s}, {t}] is not inside the path domain [{}, {}]",
            path.start(),
            path.end()
        )));
    }
    if substeps < 4 {
        return Err(Error::InvalidArgument(
            "at least 4 substeps per segment are required".into(),
        ));
    }
    if w.l != hs.l {
        return Err(Error::Mismatch("weight and spin term have different l".into()));
    }
    let l = w.l;
    let d = path.dim();
    if hs.is_none() && (w.is_diagonal() || w.is_zero) {
        let mut acc = vec![0.0; l];
        let mut diag = vec![0.0; l];
        if !w.is_zero {
            lattice_cells(path, s, t, substeps, |len, c0, c1| {
                let (nodes, weights) = gauss_legendre_on(CELL_NODES, c0, c1);
                let scale = len / (c1 - c0);
                for (th, wt) in nodes.iter().zip(&weights) {
                    let q = path.eval(*th);
                    w.diagonal_into(*th, &q[..d], &mut diag);
                    for (a, v) in acc.iter_mut().zip(&diag) {
                        *a += scale * wt * v;
                    }
                }
            });
        }
        let value = CMat::from_fn(l, l, |i, j| if i == j { C64::new((-acc[i]).exp(), 0.0) } else { ZERO });
        return Ok(OrderedFactor { value, substeps });
    }
    let mut value = CMat::identity(l, l);
    lattice_cells(path, s, t, substeps, |len, c0, c1| {
        let (nodes, weights) = gauss_legendre_on(CELL_NODES, c0, c1);
        let mut gen = CMat::zeros(l, l);
        for (th, wt) in nodes.iter().zip(&weights) {
            let q = path.eval(*th);
            gen += (hs.matrix(*th, &q[..d]) * I + w.matrix(*th, &q[..d])) * C64::new(*wt, 0.0);
        }
        value = expm(&(gen * C64::new(-len / (c1 - c0), 0.0))) * &value;
    });
    Ok(OrderedFactor { value, substeps })
}

/// exp(−∫ₛᵗ (w(θ,q(θ)) − C_W) dθ), the norm bound of the ordered factor,
/// integrated with 16-point Gauss–Legendre per segment piece.
pub fn ordered_factor_bound(path: &PathPolyline, w: &WeightSpec, s: f64, t: f64) -> f64 {
    let times = path.times();
    let d = path.dim();
    let mut integral = 0.0;
    for j in 0..path.segments() {
        let a = s.max(times[j]);
        let b = t.min(times[j + 1]);
        if b > a {
            let (nodes, weights) = gauss_legendre_on(16, a, b);
            for (th, wt) in nodes.iter().zip(&weights) {
                let q = path.eval(*th);
                integral += wt * (w.lower(*th, &q[..d]) - w.shift);
            }
        }
    }
    (-integral).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelQuadrature {
    /// Composite Gauss–Legendre on the regularized integrand.
    DampedGauss,
    /// Per-panel linearized phase with exact oscillatory moments.
    FilonGauss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceKernelConfig {
    pub quadrature: KernelQuadrature,
    /// ε_c in exp(−ε_c|y − x|²).
    pub cutoff_width: f64,
    /// Quadrature nodes per output point.
    pub quad_points: usize,
    /// Half-width of the untapered window in units of sqrt(ħρ/m); the
    /// integrand is blended to zero between one and two window widths.
    pub window: f64,
    /// Gauss–Legendre nodes per panel.
    pub panel_points: usize,
    /// Gauss–Legendre nodes for the action along each straight path.
    pub action_points: usize,
    /// Lattice cells for the ordered factor along each straight path.
    pub factor_substeps: usize,
}

impl Default for SliceKernelConfig {
    fn default() -> Self {
        SliceKernelConfig {
            quadrature: KernelQuadrature::DampedGauss,
            cutoff_width: 1e-3,
            quad_points: 512,
            window: 8.0,
            panel_points: 8,
            action_points: 8,
            factor_substeps: 16,
        }
    }
}

impl SliceKernelConfig {
    fn validate(&self) -> Result<()> {
        if self.quad_points < 16 {
            return Err(Error::InvalidArgument("quad_points must be at least 16".into()));
        }
        if self.window < 4.0 {
            return Err(Error::InvalidArgument("window must be at least 4".into()));
        }
        if self.panel_points < 2 || self.panel_points > 16 || !self.quad_points.is_multiple_of(self.panel_points) {
            return Err(Error::InvalidArgument(
                "panel_points must lie in 2..=16 and divide quad_points".into(),
            ));
        }
        if !(self.cutoff_width >= 0.0) {
            return Err(Error::InvalidArgument("cutoff_width must be nonnegative".into()));
        }
        if self.action_points < 1 || self.factor_substeps < 4 {
            return Err(Error::InvalidArgument(
                "action_points ≥ 1 and factor_substeps ≥ 4 required".into(),
            ));
        }
        Ok(())
    }
}

/// 1 for r ≤ r_in, 0 for r ≥ 2·r_in, with a mollifier blend in the
/// normalized transition variable.
fn taper(r: f64, r_in: f64) -> f64 {
    let u = (r - r_in) / r_in;
    if u <= 0.0 {
        return 1.0;
    }
    if u >= 1.0 {
        return 0.0;
    }
    let a = mollifier_f(1.0 - u);
    a / (a + mollifier_f(u))
}

/// Band-limited interpolant of a sampled 1D field.
struct TrigInterpolant {
    lo: f64,
    length: f64,
    n: usize,
    l: usize,
    /// Fourier coefficients divided by n, component-major.
    coef: Vec<C64>,
}

impl TrigInterpolant {
    fn new(f: &SpinorField) -> Self {
        let g = f.grid();
        let n = g.len();
        let (lo, hi) = g.extent(0);
        let mut coef = Vec::with_capacity(n * f.l());
        for c in 0..f.l() {
            let mut v = f.component(c).to_vec();
            g.fft_forward(&mut v);
            coef.extend(v.into_iter().map(|z| z / n as f64));
        }
        TrigInterpolant {
            lo,
            length: hi - lo,
            n,
            l: f.l(),
            coef,
        }
    }

    fn eval(&self, y: f64, out: &mut [C64]) {
        let n = self.n;
        let z = C64::from_polar(1.0, 2.0 * PI * (y - self.lo) / self.length);
        let zc = z.conj();
        let half = n / 2;
        for (c, o) in out.iter_mut().enumerate().take(self.l) {
            let cf = &self.coef[c * n..(c + 1) * n];
            let mut acc = cf[0];
            let mut zp = C64::new(1.0, 0.0);
            let mut zm = C64::new(1.0, 0.0);
            for m in 1..n.div_ceil(2) {
                zp *= z;
                zm *= zc;
                acc += cf[m] * zp + cf[n - m] * zm;
            }
            if n.is_multiple_of(2) {
                zp *= z;
                acc += cf[half] * zp.re;
            }
            *o = acc;
        }
    }
}

/// Spherical Bessel functions j_0..j_{m_max}(x), by Miller's backward
/// recurrence normalized with j_0, or the power series for small x.
fn spherical_bessel(m_max: usize, x: f64) -> Vec<f64> {
    let ax = x.abs();
    let mut out = vec![0.0; m_max + 1];
    if ax < 1e-3 {
        let mut df = 1.0;
        for (m, o) in out.iter_mut().enumerate() {
            if m > 0 {
                df *= (2 * m + 1) as f64;
            }
            *o = ax.powi(m as i32) / df * (1.0 - ax * ax / (2.0 * (2 * m + 3) as f64));
        }
    } else if ax > m_max as f64 {
        out[0] = ax.sin() / ax;
        if m_max >= 1 {
            out[1] = ax.sin() / (ax * ax) - ax.cos() / ax;
        }
        for m in 1..m_max {
            out[m + 1] = (2 * m + 1) as f64 / ax * out[m] - out[m - 1];
        }
    } else {
        let start = m_max + 20 + ax as usize;
        let mut jp1 = 0.0;
        let mut j = 1e-30;
        let mut vals = vec![0.0; start + 1];
        vals[start] = j;
        for m in (1..=start).rev() {
            let jm1 = (2 * m + 1) as f64 / ax * j - jp1;
            jp1 = j;
            j = jm1;
            vals[m - 1] = j;
        }
        let scale = (ax.sin() / ax) / vals[0];
        for m in 0..=m_max {
            out[m] = vals[m] * scale;
        }
    }
    if x < 0.0 {
        for (m, o) in out.iter_mut().enumerate() {
            if m % 2 == 1 {
                *o = -*o;
            }
        }
    }
    out
}

/// Weights W_j with ∫_{−1}^{1} p(u) e^{iκu} du = Σ_j W_j p(u_j) for every
/// polynomial p of degree < n, using the Legendre moments 2 iᵐ j_m(κ).
fn filon_weights(nodes: &[f64], gl_weights: &[f64], kappa: f64) -> Vec<C64> {
    let n = nodes.len();
    let jm = spherical_bessel(n, kappa);
    let mut im = C64::new(1.0, 0.0);
    let moments: Vec<C64> = (0..n)
        .map(|m| {
            let v = im * (2.0 * jm[m]);
            im *= I;
            v
        })
        .collect();
    nodes
        .iter()
        .zip(gl_weights)
        .map(|(&u, &wj)| {
            // Legendre polynomials at u
            let mut p0 = 1.0;
            let mut p1 = u;
            let mut s = moments[0] * 0.5 * p0;
            if n > 1 {
                s += moments[1] * 1.5 * p1;
            }
            for m in 2..n {
                let p2 = ((2 * m - 1) as f64 * u * p1 - (m - 1) as f64 * p0) / m as f64;
                p0 = p1;
                p1 = p2;
                s += moments[m] * ((2 * m + 1) as f64 * 0.5 * p2);
            }
            s * wj
        })
        .collect()
}

type ZFn = Arc<dyn Fn(&[f64]) -> CMat + Send + Sync>;

/// Extra matrix factors inside a slice: (time, Z) pairs, applied at the
/// straight-path position at that time.
struct SliceInsertions<'a> {
    items: &'a [(f64, ZFn)],
}

/// Integrand factor F along the straight path y → x, with optional
/// insertions Z(q(t_k)) splitting the ordered factor.
fn path_factor(
    p: &Potential,
    w: &WeightSpec,
    hs: &SpinTerm,
    s: f64,
    t: f64,
    x: f64,
    y: f64,
    cfg: &SliceKernelConfig,
    ins: Option<&SliceInsertions<'_>>,
) -> Result<(f64, CMat)> {
    let path = straight_path(t, s, &[x], &[y])?;
    let action = action_along(p, &path, cfg.action_points);
    let mut cuts = vec![s];
    if let Some(ins) = ins {
        cuts.extend(ins.items.iter().map(|(tk, _)| *tk));
    }
    cuts.push(t);
    let mut value = CMat::identity(w.l, w.l);
    for k in 0..cuts.len() - 1 {
        if cuts[k + 1] > cuts[k] {
            let f = ordered_weight_factor(&path, w, hs, cuts[k], cuts[k + 1], cfg.factor_substeps)?;
            value = f.value * value;
        }
        if let (Some(ins), true) = (ins, k + 1 < cuts.len() - 1) {
            let (tk, z) = &ins.items[k];
            let q = path.eval(*tk);
            value = z(&q[..1]) * value;
        }
    }
    Ok((action, value))
}

fn check_oracle_scale(f: &SpinorField) -> Result<()> {
    if f.grid().dim() != 1 {
        return Err(Error::UnsupportedDimension(f.grid().dim()));
    }
    if f.grid().len() > MAX_POINTS {
        return Err(Error::OracleScale(format!(
            "{} grid points exceed the oracle limit of {MAX_POINTS}",
            f.grid().len()
        )));
    }
    Ok(())
}

fn one_step(
    f: &SpinorField,
    p: &Potential,
    w: &WeightSpec,
    hs: &SpinTerm,
    s: f64,
    t: f64,
    cfg: &SliceKernelConfig,
    ins: Option<&SliceInsertions<'_>>,
) -> Result<SpinorField> {
    check_oracle_scale(f)?;
    cfg.validate()?;
    let rho = t - s;
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("slice width {rho} must be positive")));
    }
    if w.l != f.l() || hs.l != f.l() {
        return Err(Error::Mismatch("weight, spin term and field must share l".into()));
    }
    let grid = f.grid().clone();
    let l = f.l();
    let interp = TrigInterpolant::new(f);
    let (m, hb) = (p.mass, p.hbar);
    let window = cfg.window * (hb * rho / m).sqrt();
    let radius = 2.0 * window;
    let panels = cfg.quad_points / cfg.panel_points;
    let panel_w = 2.0 * radius / panels as f64;
    let (gn, gw) = gauss_legendre(cfg.panel_points);
    // √(m/(2πiħρ)) with the principal branch of √(1/i)
    let pref = C64::new(m / (2.0 * PI * hb * rho), 0.0).sqrt() * C64::from_polar(1.0, -PI / 4.0);
    let eps = cfg.cutoff_width;
    let rows: Vec<Result<Vec<C64>>> = (0..grid.len())
        .into_par_iter()
        .map(|pt| {
            let x = grid.point(pt)[0];
            let mut acc = vec![ZERO; l];
            let mut fy = vec![ZERO; l];
            let mut vals: Vec<Vec<C64>> = vec![vec![ZERO; l]; cfg.panel_points];
            let mut phases = vec![0.0; cfg.panel_points];
            for k in 0..panels {
                let a = x - radius + k as f64 * panel_w;
                let c = a + 0.5 * panel_w;
                let half = 0.5 * panel_w;
                for (j, u) in gn.iter().enumerate() {
                    let y = c + half * u;
                    let r = (y - x).abs();
                    let taper = taper(r, window) * (-eps * r * r).exp();
                    let (action, fw) = path_factor(p, w, hs, s, t, x, y, cfg, ins)?;
                    interp.eval(y, &mut fy);
                    for (row, v) in vals[j].iter_mut().enumerate() {
                        let mut sum = ZERO;
                        for (col, fv) in fy.iter().enumerate() {
                            sum += fw[(row, col)] * fv;
                        }
                        *v = sum * taper;
                    }
                    phases[j] = action / hb;
                }
                match cfg.quadrature {
                    KernelQuadrature::DampedGauss => {
                        for j in 0..cfg.panel_points {
                            let e = C64::from_polar(gw[j] * half, phases[j]);
                            for c2 in 0..l {
                                acc[c2] += e * vals[j][c2];
                            }
                        }
                    }
                    KernelQuadrature::FilonGauss => {
                        let (u0, u1) = (gn[0], gn[cfg.panel_points - 1]);
                        let slope = (phases[cfg.panel_points - 1] - phases[0]) / (half * (u1 - u0));
                        let fw = filon_weights(&gn, &gw, slope * half);
                        for j in 0..cfg.panel_points {
                            let y_off = half * gn[j];
                            let e = C64::from_polar(half, phases[j] - slope * y_off);
                            for c2 in 0..l {
                                acc[c2] += fw[j] * e * vals[j][c2];
                            }
                        }
                    }
                }
            }
            Ok(acc.into_iter().map(|v| v * pref).collect())
        })
        .collect();
    let n = grid.len();
    let mut out = SpinorField::zeros(&grid, l);
    for (pt, row) in rows.into_iter().enumerate() {
        let row = row?;
        for c in 0..l {
            out.data_mut()[c * n + pt] = row[c];
        }
    }
    Ok(out)
}

/// One application of the regularized one-step kernel over [s, t].
pub fn one_step_kernel_apply(
    f: &SpinorField,
    p: &Potential,
    w: &WeightSpec,
    hs: &SpinTerm,
    s: f64,
    t: f64,
    cfg: &SliceKernelConfig,
) -> Result<SpinorField> {
    one_step(f, p, w, hs, s, t, cfg, None)
}

fn check_slices(sub: &Subdivision) -> Result<()> {
    if sub.nu() > MAX_SLICES {
        return Err(Error::OracleScale(format!(
            "ν = {} exceeds the oracle limit of {MAX_SLICES}",
            sub.nu()
        )));
    }
    Ok(())
}

/// Iterates the one-step kernel over the subdivision.
pub fn sliced_kernel_apply(
    f: &SpinorField,
    p: &Potential,
    w: &WeightSpec,
    hs: &SpinTerm,
    sub: &Subdivision,
    cfg: &SliceKernelConfig,
) -> Result<SpinorField> {
    check_slices(sub)?;
    let mut u = f.clone();
    for j in 0..sub.nu() {
        u = one_step_kernel_apply(&u, p, w, hs, sub.taus[j], sub.taus[j + 1], cfg)?;
    }
    Ok(u)
}

/// A matrix-valued observable Z(x) inserted at time `time`.
#[derive(Clone)]
pub struct Insertion {
    pub time: f64,
    pub z: ZFn,
}

impl Insertion {
    pub fn new(time: f64, z: impl Fn(&[f64]) -> CMat + Send + Sync + 'static) -> Self {
        Insertion { time, z: Arc::new(z) }
    }
}

impl std::fmt::Debug for Insertion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Insertion(t = {})", self.time)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionMode {
    /// Move each insertion time to the nearest slice boundary.
    Snap,
    /// Keep interior times and split the slice's ordered factor there.
    WithinSlice,
}

fn multiply_pointwise_matrix(u: &mut SpinorField, z: &ZFn) {
    let grid = u.grid().clone();
    let n = grid.len();
    let d = grid.dim();
    let data = u.data_mut();
    for pt in 0..n {
        let x = grid.point(pt);
        apply_pointwise(&z(&x[..d]), data, n, pt);
    }
}

/// Sliced kernel with the observables Z_k(q(t_k)) inserted.
pub fn insert_observables(
    f: &SpinorField,
    p: &Potential,
    w: &WeightSpec,
    hs: &SpinTerm,
    sub: &Subdivision,
    insertions: &[Insertion],
    mode: InsertionMode,
    cfg: &SliceKernelConfig,
) -> Result<SpinorField> {
    check_slices(sub)?;
    let (t0, t1) = (sub.start(), sub.t_end);
    for (k, ins) in insertions.iter().enumerate() {
        if !(t0..=t1).contains(&ins.time) {
            return Err(Error::InvalidArgument(format!(
                "insertion time {} outside [{t0}, {t1}]",
                ins.time
            )));
        }
        if k > 0 && !(insertions[k - 1].time < ins.time) {
            return Err(Error::InvalidArgument("insertion times must increase strictly".into()));
        }
    }
    // slice boundary index → observables applied there; slice index → interior ones
    let nu = sub.nu();
    let mut at_boundary: Vec<Vec<ZFn>> = vec![Vec::new(); nu + 1];
    let mut interior: Vec<Vec<(f64, ZFn)>> = vec![Vec::new(); nu];
    for ins in insertions {
        let nearest = (0..=nu)
            .min_by(|&a, &b| {
                (sub.taus[a] - ins.time)
                    .abs()
                    .partial_cmp(&(sub.taus[b] - ins.time).abs())
                    .unwrap()
            })
            .unwrap();
        let on_boundary = (sub.taus[nearest] - ins.time).abs() <= 1e-12 * (t1 - t0);
        if mode == InsertionMode::Snap || on_boundary {
            at_boundary[nearest].push(ins.z.clone());
        } else {
            let j = sub.taus.partition_point(|&tau| tau <= ins.time) - 1;
            interior[j].push((ins.time, ins.z.clone()));
        }
    }
    let mut u = f.clone();
    for z in &at_boundary[0] {
        multiply_pointwise_matrix(&mut u, z);
    }
    for j in 0..nu {
        let ins = SliceInsertions { items: &interior[j] };
        let opt = if interior[j].is_empty() { None } else { Some(&ins) };
        u = one_step(&u, p, w, hs, sub.taus[j], sub.taus[j + 1], cfg, opt)?;
        for z in &at_boundary[j + 1] {
            multiply_pointwise_matrix(&mut u, z);
        }
    }
    Ok(u)
}

/// Scalar observable helper: Z(x) = z(x)·I_l.
pub fn scalar_observable(
    l: usize,
    z: impl Fn(f64) -> f64 + Send + Sync + 'static,
) -> impl Fn(&[f64]) -> CMat + Send + Sync + 'static {
    move |x: &[f64]| CMat::identity(l, l) * C64::new(z(x[0]), 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::grid::{gaussian_packet, l2_norm};
    use crate::product::{make_subdivision, KappaScheme, TauScheme};
    use crate::propagator::{evolve_unitary, PropagatorConfig};
    use crate::weights::{constant, from_matrix_fn, zero};

    fn poly(times: Vec<f64>, xs: Vec<f64>) -> PathPolyline {
        PathPolyline::new(1, times, xs.into_iter().map(|x| [x, 0.0]).collect()).unwrap()
    }

    fn varying_2x2() -> (WeightSpec, SpinTerm) {
        let w = from_matrix_fn(
            2,
            "varying",
            |t, x| {
                let a = 1.0 + x[0] * x[0];
                let b = C64::new(0.3 * t.sin(), 0.2 * x[0]);
                CMat::from_row_slice(2, 2, &[C64::new(a, 0.0), b, b.conj(), C64::new(0.5 + t, 0.0)])
            },
            |_, _| 0.0,
            1.0,
        );
        let hs = SpinTerm::new(2, |t, x| {
            CMat::from_row_slice(
                2,
                2,
                &[
                    C64::new(x[0], 0.0),
                    C64::new(0.7, t),
                    C64::new(0.7, -t),
                    C64::new(-x[0], 0.0),
                ],
            )
        });
        (w, hs)
    }

    // Classical four-stage integrator for dU/dθ = −G(θ)U.
    fn rk4_reference(path: &PathPolyline, w: &WeightSpec, hs: &SpinTerm, s: f64, t: f64, steps: usize) -> CMat {
        let g = |th: f64| {
            let q = path.eval(th);
            hs.matrix(th, &q[..1]) * I + w.matrix(th, &q[..1])
        };
        let h = (t - s) / steps as f64;
        let mut u = CMat::identity(w.l, w.l);
        for k in 0..steps {
            let th = s + k as f64 * h;
            let k1 = -(g(th) * &u);
            let k2 = -(g(th + 0.5 * h) * (&u + &k1 * C64::new(0.5 * h, 0.0)));
            let k3 = -(g(th + 0.5 * h) * (&u + &k2 * C64::new(0.5 * h, 0.0)));
            let k4 = -(g(th + h) * (&u + &k3 * C64::new(h, 0.0)));
            u += (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0);
        }
        u
    }

    #[test]
    fn factor_trivial_cases() {
        let path = poly(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, -0.5]);
        let f = ordered_weight_factor(&path, &zero(2), &SpinTerm::none(2), 0.0, 1.0, 8).unwrap();
        assert_eq!(f.value, CMat::identity(2, 2));
        let wbar = CMat::from_row_slice(
            2,
            2,
            &[
                C64::new(1.0, 0.0),
                C64::new(0.3, 0.0),
                C64::new(0.3, 0.0),
                C64::new(2.0, 0.0),
            ],
        );
        let hbar = CMat::from_row_slice(2, 2, &[C64::new(0.5, 0.0), ZERO, ZERO, C64::new(-0.5, 0.0)]);
        let wc = wbar.clone();
        let w = from_matrix_fn(2, "const", move |_, _| wc.clone(), |_, _| 0.0, 1.0);
        let f = ordered_weight_factor(&path, &w, &SpinTerm::constant(hbar.clone()), 0.2, 0.9, 8).unwrap();
        let expect = expm(&((hbar * I + wbar) * C64::new(-0.7, 0.0)));
        assert!((f.value - expect).norm() < 1e-10);
        assert!(ordered_weight_factor(&path, &w, &SpinTerm::none(2), 0.5, 0.5, 8).is_err());
        assert!(ordered_weight_factor(&path, &w, &SpinTerm::none(2), 0.0, 1.0, 2).is_err());
    }

    #[test]
    fn factor_second_order_against_rk4() {
        let path = poly(vec![0.0, 1.0], vec![-0.5, 0.8]);
        let (w, hs) = varying_2x2();
        let reference = rk4_reference(&path, &w, &hs, 0.0, 1.0, 2048 * 64);
        let err = |n| (ordered_weight_factor(&path, &w, &hs, 0.0, 1.0, n).unwrap().value - &reference).norm();
        let (e1, e2) = (err(64), err(128));
        assert!(e1 / e2 >= 3.5, "{e1} {e2}");
        let fine = err(4096);
        assert!(fine < 1e-8, "{fine}");
    }

    #[test]
    fn cocycle() {
        let path = poly(vec![0.0, 0.4, 1.0], vec![0.3, -0.2, 0.9]);
        let (w, hs) = varying_2x2();
        let full = ordered_weight_factor(&path, &w, &hs, 0.1, 0.95, 16).unwrap().value;
        for tp in [0.2, 0.4, 0.537, 0.9] {
            let a = ordered_weight_factor(&path, &w, &hs, 0.1, tp, 16).unwrap().value;
            let b = ordered_weight_factor(&path, &w, &hs, tp, 0.95, 16).unwrap().value;
            assert!((b * a - &full).norm() < 1e-10);
        }
    }

    #[test]
    fn spherical_bessel_values() {
        let j = spherical_bessel(3, 2.5);
        let x: f64 = 2.5;
        let j1 = x.sin() / (x * x) - x.cos() / x;
        let j2 = (3.0 / (x * x) - 1.0) * x.sin() / x - 3.0 * x.cos() / (x * x);
        assert!((j[1] - j1).abs() < 1e-13 && (j[2] - j2).abs() < 1e-13);
        let s = spherical_bessel(4, 1e-4);
        assert!((s[0] - 1.0).abs() < 1e-8 && (s[1] - 1e-4 / 3.0).abs() < 1e-12);
        let big = spherical_bessel(3, 40.0);
        assert!((big[0] - 40f64.sin() / 40.0).abs() < 1e-15);
    }

    #[test]
    fn filon_weights_integrate_exponential_polynomials() {
        let (n, w) = gauss_legendre(8);
        for kappa in [0.0, 0.7, 5.0, 30.0] {
            let fw = filon_weights(&n, &w, kappa);
            // ∫ u² e^{iκu} du on [−1, 1] by brute-force quadrature
            let (bn, bw) = gauss_legendre(200);
            let exact: C64 = bn
                .iter()
                .zip(&bw)
                .map(|(u, wt)| C64::from_polar(wt * u * u, kappa * u))
                .sum();
            let got: C64 = n.iter().zip(&fw).map(|(u, wt)| wt * u * u).sum();
            assert!((got - exact).norm() < 1e-12, "κ = {kappa}");
        }
    }

    #[test]
    fn trig_interpolation_is_exact_on_modes() {
        let g = Grid::line(-5.0, 5.0, 32).unwrap();
        let k = 2.0 * PI * 3.0 / 10.0;
        let f = SpinorField::from_fn(&g, 1, |x, _| {
            C64::from_polar(1.0, k * x[0]) + C64::new((2.0 * PI * 16.0 / 10.0 * (x[0] + 5.0)).cos(), 0.0)
        });
        let it = TrigInterpolant::new(&f);
        let mut out = [ZERO];
        for y in [-4.9, 0.123, 3.3] {
            it.eval(y, &mut out);
            let expect = C64::from_polar(1.0, k * y) + C64::new((2.0 * PI * 16.0 / 10.0 * (y + 5.0)).cos(), 0.0);
            assert!((out[0] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_weight_factors_out() {
        let g = Grid::line(-10.0, 10.0, 64).unwrap();
        let f = gaussian_packet(&g, 1, &[0.0], &[1.0], 1.0, &[C64::new(1.0, 0.0)], 1.0)
            .unwrap()
            .field;
        let p = Potential::free(1);
        let cfg = SliceKernelConfig {
            quad_points: 128,
            ..Default::default()
        };
        let a = one_step_kernel_apply(&f, &p, &zero(1), &SpinTerm::none(1), 0.0, 0.1, &cfg).unwrap();
        let b = one_step_kernel_apply(&f, &p, &constant(1, 0.7), &SpinTerm::none(1), 0.0, 0.1, &cfg).unwrap();
        let expect = a.scaled(C64::new((-0.07f64).exp(), 0.0));
        assert!(l2_norm(&b.difference(&expect).unwrap()) < 1e-8);
    }

    #[test]
    fn free_one_step_matches_spectral() {
        let g = Grid::line(-10.0, 10.0, 256).unwrap();
        let f = gaussian_packet(&g, 1, &[-1.0], &[1.0], 1.0, &[C64::new(1.0, 0.0)], 1.0)
            .unwrap()
            .field;
        let p = Potential::free(1);
        let cfg = SliceKernelConfig::default();
        let k = one_step_kernel_apply(&f, &p, &zero(1), &SpinTerm::none(1), 0.0, 0.1, &cfg).unwrap();
        let u = evolve_unitary(&f, &p, &SpinTerm::none(1), &PropagatorConfig::strang(0.1, 0.0, 0.1)).unwrap();
        let e = l2_norm(&k.difference(&u).unwrap());
        assert!(e <= 1e-3, "{e}");
        let filon = SliceKernelConfig {
            quadrature: KernelQuadrature::FilonGauss,
            ..cfg
        };
        let kf = one_step_kernel_apply(&f, &p, &zero(1), &SpinTerm::none(1), 0.0, 0.1, &filon).unwrap();
        let ef = l2_norm(&kf.difference(&u).unwrap());
        assert!(ef <= 1e-3, "{ef}");
    }

    #[test]
    fn nu_one_equals_one_step() {
        let g = Grid::line(-10.0, 10.0, 64).unwrap();
        let f = gaussian_packet(&g, 1, &[0.0], &[0.0], 1.0, &[C64::new(1.0, 0.0)], 1.0)
            .unwrap()
            .field;
        let p = Potential::free(1);
        let cfg = SliceKernelConfig {
            quad_points: 64,
            ..Default::default()
        };
        let sub = make_subdivision(0.2, 1, TauScheme::Uniform, KappaScheme::Left).unwrap();
        let a = sliced_kernel_apply(&f, &p, &zero(1), &SpinTerm::none(1), &sub, &cfg).unwrap();
        let b = one_step_kernel_apply(&f, &p, &zero(1), &SpinTerm::none(1), 0.0, 0.2, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
        let id = Insertion::new(0.1, scalar_observable(1, |_| 1.0));
        let c = insert_observables(
            &f,
            &p,
            &zero(1),
            &SpinTerm::none(1),
            &sub,
            &[id],
            InsertionMode::WithinSlice,
            &cfg,
        )
        .unwrap();
        assert!(l2_norm(&c.difference(&a).unwrap()) < 1e-14);
    }

    #[test]
    fn initial_insertion_multiplies_input() {
        let g = Grid::line(-10.0, 10.0, 64).unwrap();
        let f = gaussian_packet(&g, 1, &[0.5], &[0.0], 1.0, &[C64::new(1.0, 0.0)], 1.0)
            .unwrap()
            .field;
        let p = Potential::free(1);
        let cfg = SliceKernelConfig {
            quad_points: 64,
            ..Default::default()
        };
        let sub = make_subdivision(0.2, 2, TauScheme::Uniform, KappaScheme::Left).unwrap();
        let z = Insertion::new(0.0, scalar_observable(1, |x| x));
        let a = insert_observables(
            &f,
            &p,
            &zero(1),
            &SpinTerm::none(1),
            &sub,
            &[z],
            InsertionMode::Snap,
            &cfg,
        )
        .unwrap();
        let mut xf = f.clone();
        xf.multiply_pointwise(|x| C64::new(x[0], 0.0));
        let b = sliced_kernel_apply(&xf, &p, &zero(1), &SpinTerm::none(1), &sub, &cfg).unwrap();
        assert!(l2_norm(&a.difference(&b).unwrap()) < 1e-10);
    }

    #[test]
    fn scale_limits() {
        let g = Grid::square(-1.0, 1.0, 8).unwrap();
        let f = SpinorField::zeros(&g, 1);
        let cfg = SliceKernelConfig::default();
        assert!(matches!(
            one_step_kernel_apply(&f, &Potential::free(2), &zero(1), &SpinTerm::none(1), 0.0, 0.1, &cfg),
            Err(Error::UnsupportedDimension(2))
        ));
        let g = Grid::line(-1.0, 1.0, 16).unwrap();
        let f = SpinorField::zeros(&g, 1);
        let sub = make_subdivision(1.0, 9, TauScheme::Uniform, KappaScheme::Left).unwrap();
        assert!(matches!(
            sliced_kernel_apply(&f, &Potential::free(1), &zero(1), &SpinTerm::none(1), &sub, &cfg),
            Err(Error::OracleScale(_))
        ));
        assert!(one_step_kernel_apply(&f, &Potential::free(1), &zero(1), &SpinTerm::none(1), 0.1, 0.1, &cfg).is_err());
    }

    proptest::proptest! {
        #[test]
        fn factor_norm_within_bound(
            x0 in -3.0f64..3.0,
            x1 in -3.0f64..3.0,
            x2 in -3.0f64..3.0,
            t1 in 0.05f64..1.0,
            dt in 0.05f64..1.0,
        ) {
            let (w, hs) = varying_2x2();
            let path = poly(vec![0.0, t1, t1 + dt], vec![x0, x1, x2]);
            let f = ordered_weight_factor(&path, &w, &hs, 0.0, t1 + dt, 8).unwrap();
            let bound = ordered_factor_bound(&path, &w, 0.0, t1 + dt);
            proptest::prop_assert!(crate::linalg::operator_norm(&f.value) <= bound + 1e-12);
        }

        #[test]
        fn scalar_factor_attains_bound(x0 in -3.0f64..3.0, x1 in -3.0f64..3.0, t in 0.05f64..2.0) {
            let v = |t: f64, x: &[f64]| 0.3 + (x[0] - t).powi(2) + (2.0 * t).sin();
            let w = from_matrix_fn(1, "scalar", move |t, x| CMat::from_element(1, 1, C64::new(v(t, x), 0.0)), v, 0.0);
            let path = poly(vec![0.0, t], vec![x0, x1]);
            let f = ordered_weight_factor(&path, &w, &SpinTerm::none(1), 0.0, t, 16).unwrap();
            let bound = ordered_factor_bound(&path, &w, 0.0, t);
            proptest::prop_assert!((f.value[(0, 0)].re - bound).abs() <= 1e-9 * bound);
        }
    }
}
