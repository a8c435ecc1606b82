//! Measurement weight matrices W_s(t,x), their lower-bound scalars w(t,x)
//! and shifts C_W, the pointwise damping e^{−ρW_s}, and sampled
//! verification of the bounds a weight is required to satisfy.

use std::fmt;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, Point, SpinorField, MAX_DIM};
use crate::linalg::{apply_pointwise, hermitian_deviation, hermitian_eigenvalues, hermitian_function, operator_norm};
use crate::{CMat, C64};

pub type DiagFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
pub type MatFn = Arc<dyn Fn(f64, &[f64]) -> CMat + Send + Sync>;
pub type LowerFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type ModulusFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// How a weight is evaluated.
#[derive(Clone)]
pub enum WeightEval {
    /// Diagonal entries written into the output slice (length l).
    Diagonal(DiagFn),
    /// Full Hermitian matrix.
    Full(MatFn),
}

/// A Hermitian l×l weight field with lower bound w and shift C_W such that
/// W_s(t,x) ⪰ (w(t,x) − C_W) I.
#[derive(Clone)]
pub struct WeightSpec {
    pub l: usize,
    pub name: String,
    pub eval: WeightEval,
    pub lower_bound: LowerFn,
    pub shift: f64,
    /// σ(ϱ) bounding the variation of W in time, when known.
    pub time_modulus: Option<ModulusFn>,
    /// Identically zero; lets propagators skip the damping work.
    pub is_zero: bool,
    pub time_independent: bool,
}

impl fmt::Debug for WeightSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightSpec")
            .field("name", &self.name)
            .field("l", &self.l)
            .field("diagonal", &self.is_diagonal())
            .field("shift", &self.shift)
            .field("zero", &self.is_zero)
            .finish()
    }
}

/// Newtype for a Hermitian matrix value.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianMatrix(pub CMat);

impl HermitianMatrix {
    pub fn new(m: CMat, tol: f64) -> Result<Self> {
        crate::linalg::check_hermitian(&m, tol)?;
        Ok(HermitianMatrix(m))
    }

    pub fn matrix(&self) -> &CMat {
        &self.0
    }
}

impl WeightSpec {
    pub fn is_diagonal(&self) -> bool {
        matches!(self.eval, WeightEval::Diagonal(_))
    }

    /// W_s(t,x) as a dense matrix.
    pub fn matrix(&self, t: f64, x: &[f64]) -> CMat {
        match &self.eval {
            WeightEval::Diagonal(f) => {
                let mut d = vec![0.0; self.l];
                f(t, x, &mut d);
                CMat::from_fn(self.l, self.l, |i, j| {
                    if i == j {
                        C64::new(d[i], 0.0)
                    } else {
                        C64::new(0.0, 0.0)
                    }
                })
            }
            WeightEval::Full(f) => f(t, x),
        }
    }

    /// Writes the diagonal into `out` when the weight is diagonal.
    pub fn diagonal_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> bool {
        match &self.eval {
            WeightEval::Diagonal(f) => {
                f(t, x, out);
                true
            }
            WeightEval::Full(_) => false,
        }
    }

    /// Scalar value for l = 1 weights.
    pub fn scalar(&self, t: f64, x: &[f64]) -> f64 {
        assert_eq!(self.l, 1);
        match &self.eval {
            WeightEval::Diagonal(f) => {
                let mut d = [0.0];
                f(t, x, &mut d);
                d[0]
            }
            WeightEval::Full(f) => f(t, x)[(0, 0)].re,
        }
    }

    pub fn lower(&self, t: f64, x: &[f64]) -> f64 {
        (self.lower_bound)(t, x)
    }

    /// Multiplies every eigenvalue by `n`: n·W, n·w, n·C_W.
    pub fn scaled(&self, n: f64) -> WeightSpec {
        assert!(n >= 0.0);
        let eval = match &self.eval {
            WeightEval::Diagonal(f) => {
                let f = f.clone();
                WeightEval::Diagonal(Arc::new(move |t, x, out| {
                    f(t, x, out);
                    out.iter_mut().for_each(|v| *v *= n);
                }))
            }
            WeightEval::Full(f) => {
                let f = f.clone();
                WeightEval::Full(Arc::new(move |t, x| f(t, x) * C64::new(n, 0.0)))
            }
        };
        let lb = self.lower_bound.clone();
        WeightSpec {
            l: self.l,
            name: format!("{}x{}", n, self.name),
            eval,
            lower_bound: Arc::new(move |t, x| n * lb(t, x)),
            shift: n * self.shift,
            time_modulus: self
                .time_modulus
                .clone()
                .map(|s| -> ModulusFn { Arc::new(move |r| (n * s(r)).max(r)) }),
            is_zero: self.is_zero || n == 0.0,
            time_independent: self.time_independent,
        }
    }
}

/// A time-parametrized point a(t) ∈ ℝ^d.
#[derive(Clone)]
pub enum Trajectory {
    Fixed(Point),
    Linear {
        start: Point,
        velocity: Point,
    },
    /// a(t) = offset + amplitude·sin(ω t + φ).
    Sinusoid {
        offset: Point,
        amplitude: Point,
        omega: f64,
        phase: f64,
    },
    Custom {
        f: Arc<dyn Fn(f64) -> Point + Send + Sync>,
        lipschitz: f64,
    },
}

impl fmt::Debug for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trajectory::Fixed(p) => write!(f, "Fixed({p:?})"),
            Trajectory::Linear { start, velocity } => write!(f, "Linear({start:?}, {velocity:?})"),
            Trajectory::Sinusoid {
                offset,
                amplitude,
                omega,
                phase,
            } => {
                write!(f, "Sinusoid({offset:?}, {amplitude:?}, {omega}, {phase})")
            }
            Trajectory::Custom { lipschitz, .. } => write!(f, "Custom(L = {lipschitz})"),
        }
    }
}

impl Trajectory {
    pub fn at(&self, t: f64) -> Point {
        match self {
            Trajectory::Fixed(p) => *p,
            Trajectory::Linear { start, velocity } => [start[0] + t * velocity[0], start[1] + t * velocity[1]],
            Trajectory::Sinusoid {
                offset,
                amplitude,
                omega,
                phase,
            } => {
                let s = (omega * t + phase).sin();
                [offset[0] + amplitude[0] * s, offset[1] + amplitude[1] * s]
            }
            Trajectory::Custom { f, .. } => f(t),
        }
    }

    /// Lipschitz constant of t ↦ a(t).
    pub fn lipschitz(&self) -> f64 {
        match self {
            Trajectory::Fixed(_) => 0.0,
            Trajectory::Linear { velocity, .. } => velocity[0].hypot(velocity[1]),
            Trajectory::Sinusoid { amplitude, omega, .. } => amplitude[0].hypot(amplitude[1]) * omega.abs(),
            Trajectory::Custom { lipschitz, .. } => *lipschitz,
        }
    }

    /// max |a(t)| over [0, t_max], sampled.
    pub fn max_norm(&self, t_max: f64) -> f64 {
        let n = 1024;
        (0..=n)
            .map(|i| {
                let a = self.at(t_max * i as f64 / n as f64);
                a[0].hypot(a[1])
            })
            .fold(0.0, f64::max)
            + self.lipschitz() * t_max / n as f64
    }
}

fn dist2(x: &[f64], a: &Point) -> f64 {
    x.iter().zip(a.iter()).map(|(x, a)| (x - a).powi(2)).sum()
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Position-measurement corridor: w_jj = |x − a⁽ʲ⁾(t)|²/(2δ²), one
/// trajectory per spin component, valid on [0, t_max].
pub fn corridor(trajectories: Vec<Trajectory>, delta: f64, t_max: f64) -> Result<WeightSpec> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "corridor width δ = {delta} must be positive"
        )));
    }
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument("corridor needs at least one trajectory".into()));
    }
    let l = trajectories.len();
    let a_max = trajectories.iter().map(|a| a.max_norm(t_max)).fold(0.0, f64::max);
    let lip = trajectories.iter().map(Trajectory::lipschitz).fold(0.0, f64::max);
    let g = 1.0 / (2.0 * delta * delta);
    let trs = trajectories.clone();
    let eval: DiagFn = Arc::new(move |t, x, out| {
        for (o, a) in out.iter_mut().zip(&trs) {
            *o = g * dist2(x, &a.at(t));
        }
    });
    let c_modulus = (lip * (1.0 + a_max) / (delta * delta)).max(1.0);
    Ok(WeightSpec {
        l,
        name: "corridor".into(),
        eval: WeightEval::Diagonal(eval),
        lower_bound: Arc::new(move |_, x| norm2(x) / (4.0 * delta * delta)),
        shift: a_max * a_max / (delta * delta),
        time_modulus: Some(Arc::new(move |r| c_modulus * r)),
        is_zero: false,
        time_independent: lip == 0.0,
    })
}

/// f(t) = e^{−1/t} for t > 0 and 0 otherwise.
pub fn mollifier_f(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp()
    } else {
        0.0
    }
}

/// Smooth monotone step: 1 for r ≤ r_in, 0 for r ≥ r_out.
pub fn smooth_step(r: f64, r_in: f64, r_out: f64) -> f64 {
    let a = mollifier_f(r_out - r);
    let b = mollifier_f(r - r_in);
    a / (a + b)
}

/// Evaluates W on a lattice and returns max (w − λ_min(W))₊ · 1.1.
fn sampled_shift(eval: &WeightEval, l: usize, lower: &LowerFn, grid: &Grid, times: &[f64]) -> f64 {
    let spec = WeightSpec {
        l,
        name: String::new(),
        eval: eval.clone(),
        lower_bound: lower.clone(),
        shift: 0.0,
        time_modulus: None,
        is_zero: false,
        time_independent: true,
    };
    let d = grid.dim();
    let worst = times
        .iter()
        .flat_map(|&t| (0..grid.len()).map(move |p| (t, p)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(t, p)| {
            let x = grid.point(p);
            let m = spec.matrix(t, &x[..d]);
            let lmin = hermitian_eigenvalues(&m)[0];
            (spec.lower(t, &x[..d]) - lmin).max(0.0)
        })
        .reduce(|| 0.0, f64::max);
    1.1 * worst
}

/// Ball confinement: w_ii = n |x − a⁽ⁱ⁾|² f(|x − a⁽ⁱ⁾| − b_i). The shift is
/// sampled on `sample` against the lower bound n |x|² f(|x|)/2.
pub fn ball(centers: Vec<Point>, radii: Vec<f64>, n: f64, sample: &Grid) -> Result<WeightSpec> {
    if centers.len() != radii.len() || centers.is_empty() {
        return Err(Error::InvalidArgument("ball weight needs one radius per center".into()));
    }
    if radii.iter().any(|&b| !(b >= 0.0)) {
        return Err(Error::InvalidArgument("ball radii must be nonnegative".into()));
    }
    if !(n >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ball strength n = {n} must be nonnegative"
        )));
    }
    let l = centers.len();
    let (cs, rs) = (centers.clone(), radii.clone());
    let eval = WeightEval::Diagonal(Arc::new(move |_, x, out| {
        for i in 0..out.len() {
            let r2 = dist2(x, &cs[i]);
            out[i] = n * r2 * mollifier_f(r2.sqrt() - rs[i]);
        }
    }));
    let lower: LowerFn = Arc::new(move |_, x| {
        let r2 = norm2(x);
        0.5 * n * r2 * mollifier_f(r2.sqrt())
    });
    let shift = sampled_shift(&eval, l, &lower, sample, &[0.0]);
    Ok(WeightSpec {
        l,
        name: "ball".into(),
        eval,
        lower_bound: lower,
        shift,
        time_modulus: None,
        is_zero: n == 0.0,
        time_independent: true,
    })
}

/// h(y): |y|²/2 near the origin, |y| far away, with a smooth bridge on
/// 1 < |y| < 2.
pub fn slit_profile(y: f64) -> f64 {
    let r = y.abs();
    let s = smooth_step(r, 1.0, 2.0);
    s * 0.5 * r * r + (1.0 - s) * r
}

/// Wall profile along the propagation axis x_d.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WallProfile {
    /// k(x_d): smooth plateau equal to 1 on |x_d − c| ≤ half_width, 0 beyond
    /// half_width + ramp.
    Plateau { center: f64, half_width: f64, ramp: f64 },
    /// e^{−h2(x_d)} with h2(z) = h((z − c)/thickness).
    Exponential { center: f64, thickness: f64 },
}

impl WallProfile {
    pub fn value(&self, z: f64) -> f64 {
        match *self {
            WallProfile::Plateau {
                center,
                half_width,
                ramp,
            } => smooth_step((z - center).abs(), half_width, half_width + ramp),
            WallProfile::Exponential { .. } => (-self.h2(z)).exp(),
        }
    }

    fn h2(&self, z: f64) -> f64 {
        match *self {
            WallProfile::Exponential { center, thickness } => slit_profile((z - center) / thickness),
            WallProfile::Plateau { .. } => 0.0,
        }
    }
}

/// Multi-slit mask W(x) = log N − k(x_d) log Σ_j exp(−h1(x' − a'⁽ʲ⁾)) in
/// d = 2, with x' = x₁ the transverse and x_d = x₂ the propagation axis.
#[derive(Clone, Debug)]
pub struct MultislitWeight {
    pub holes: Vec<f64>,
    /// h1(y) = strength · h(y / hole_width).
    pub hole_width: f64,
    pub strength: f64,
    pub wall: WallProfile,
    pub subtract_offset: bool,
}

impl MultislitWeight {
    pub fn new(holes: Vec<f64>, hole_width: f64, strength: f64, wall: WallProfile) -> Result<Self> {
        if holes.is_empty() {
            return Err(Error::InvalidArgument("multislit needs at least one hole".into()));
        }
        if !(hole_width > 0.0) || !(strength >= 0.0) {
            return Err(Error::InvalidArgument(
                "hole width must be positive and strength nonnegative".into(),
            ));
        }
        if let WallProfile::Exponential { thickness, .. } = wall {
            if !(thickness > 0.0) {
                return Err(Error::InvalidArgument("wall thickness must be positive".into()));
            }
        }
        Ok(MultislitWeight {
            holes,
            hole_width,
            strength,
            wall,
            subtract_offset: false,
        })
    }

    pub fn h1(&self, y: f64) -> f64 {
        self.strength * slit_profile(y / self.hole_width)
    }

    pub fn k(&self, z: f64) -> f64 {
        self.wall.value(z)
    }

    /// min_j h1(x' − a'⁽ʲ⁾).
    pub fn min_h1(&self, xp: f64) -> f64 {
        self.holes.iter().map(|a| self.h1(xp - a)).fold(f64::INFINITY, f64::min)
    }

    /// log Σ_j e^{−h1_j}, shifted by the smallest h1 before exponentiating.
    pub fn log_sum_exp(&self, xp: f64) -> f64 {
        let m = self.min_h1(xp);
        let s: f64 = self.holes.iter().map(|a| (-(self.h1(xp - a) - m)).exp()).sum();
        s.ln() - m
    }

    /// The unshifted mask value.
    pub fn raw(&self, x: &[f64]) -> f64 {
        let n = self.holes.len() as f64;
        n.ln() - self.k(x[1]) * self.log_sum_exp(x[0])
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let w = self.raw(x);
        if self.subtract_offset {
            w - (self.holes.len() as f64).ln()
        } else {
            w
        }
    }

    /// C* with ⟨x'⟩ e^{−h2(x_d)} ≤ C*(1 + W) on the sample lattice, inflated
    /// by 10%.
    pub fn c_star(&self, sample: &Grid) -> f64 {
        let d = sample.dim();
        let worst = (0..sample.len())
            .into_par_iter()
            .map(|p| {
                let x = sample.point(p);
                let x = &x[..d];
                let bracket = (1.0 + x[0] * x[0]).sqrt();
                bracket * self.k(x[1]) / (1.0 + self.raw(x))
            })
            .reduce(|| 0.0, f64::max);
        1.1 * worst
    }

    /// The weight as a [`WeightSpec`]. With an exponential wall the lower
    /// bound is ⟨x'⟩e^{−h2}/C* and C_W = 1; with a plateau wall it is 0 and
    /// C_W = 0. The offset subtraction adds log N to C_W.
    pub fn spec(&self, sample: &Grid) -> Result<WeightSpec> {
        if sample.dim() != 2 {
            return Err(Error::UnsupportedDimension(sample.dim()));
        }
        let me = self.clone();
        let eval = WeightEval::Diagonal(Arc::new(move |_, x, out| out[0] = me.value(x)));
        let offset = if self.subtract_offset {
            (self.holes.len() as f64).ln()
        } else {
            0.0
        };
        let (lower, shift): (LowerFn, f64) = match self.wall {
            WallProfile::Exponential { .. } => {
                let c = self.c_star(sample);
                let me = self.clone();
                (
                    Arc::new(move |_, x| (1.0 + x[0] * x[0]).sqrt() * me.k(x[1]) / c),
                    1.0 + offset,
                )
            }
            WallProfile::Plateau { .. } => (Arc::new(|_, _| 0.0), offset),
        };
        Ok(WeightSpec {
            l: 1,
            name: format!("multislit{}", self.holes.len()),
            eval,
            lower_bound: lower,
            shift,
            time_modulus: None,
            is_zero: self.strength == 0.0 && self.holes.len() == 1,
            time_independent: true,
        })
    }
}

/// n·h_O(x) with h_O a radial smooth bump: 1 within `inner` of `center`, 0
/// beyond `outer`.
pub fn bump(center: Point, inner: f64, outer: f64, n: f64) -> Result<WeightSpec> {
    if !(0.0 <= inner && inner < outer) {
        return Err(Error::InvalidArgument(
            "bump radii must satisfy 0 ≤ inner < outer".into(),
        ));
    }
    if !(n >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bump strength n = {n} must be nonnegative"
        )));
    }
    Ok(WeightSpec {
        l: 1,
        name: "bump".into(),
        eval: WeightEval::Diagonal(Arc::new(move |_, x, out| {
            out[0] = n * smooth_step(dist2(x, &center).sqrt(), inner, outer);
        })),
        lower_bound: Arc::new(|_, _| 0.0),
        shift: 0.0,
        time_modulus: None,
        is_zero: n == 0.0,
        time_independent: true,
    })
}

pub fn zero(l: usize) -> WeightSpec {
    WeightSpec {
        l,
        name: "zero".into(),
        eval: WeightEval::Diagonal(Arc::new(|_, _, out| out.iter_mut().for_each(|v| *v = 0.0))),
        lower_bound: Arc::new(|_, _| 0.0),
        shift: 0.0,
        time_modulus: None,
        is_zero: true,
        time_independent: true,
    }
}

/// W_s = c I.
pub fn constant(l: usize, c: f64) -> WeightSpec {
    WeightSpec {
        l,
        name: format!("constant({c})"),
        eval: WeightEval::Diagonal(Arc::new(move |_, _, out| out.iter_mut().for_each(|v| *v = c))),
        lower_bound: Arc::new(move |_, _| c.max(0.0)),
        shift: (-c).max(0.0),
        time_modulus: None,
        is_zero: c == 0.0,
        time_independent: true,
    }
}

/// Arbitrary Hermitian matrix field, with caller-supplied bounds.
pub fn from_matrix_fn(
    l: usize,
    name: &str,
    f: impl Fn(f64, &[f64]) -> CMat + Send + Sync + 'static,
    lower_bound: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    shift: f64,
) -> WeightSpec {
    WeightSpec {
        l,
        name: name.into(),
        eval: WeightEval::Full(Arc::new(f)),
        lower_bound: Arc::new(lower_bound),
        shift,
        time_modulus: None,
        is_zero: false,
        time_independent: false,
    }
}

/// Pointwise sum; lower bounds and shifts add.
pub fn sum_weights(ws: &[WeightSpec]) -> Result<WeightSpec> {
    let first = ws
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty weight list".into()))?;
    if ws.len() == 1 {
        return Ok(first.clone());
    }
    let l = first.l;
    if ws.iter().any(|w| w.l != l) {
        return Err(Error::Mismatch("summed weights have different spin dimensions".into()));
    }
    let parts: Vec<WeightSpec> = ws.iter().filter(|w| !w.is_zero).cloned().collect();
    if parts.is_empty() {
        return Ok(zero(l));
    }
    let all_diag = parts.iter().all(WeightSpec::is_diagonal);
    let ps = parts.clone();
    let eval = if all_diag {
        WeightEval::Diagonal(Arc::new(move |t, x, out| {
            out.iter_mut().for_each(|v| *v = 0.0);
            let mut tmp = vec![0.0; out.len()];
            for w in &ps {
                w.diagonal_into(t, x, &mut tmp);
                for (o, v) in out.iter_mut().zip(&tmp) {
                    *o += v;
                }
            }
        }))
    } else {
        WeightEval::Full(Arc::new(move |t, x| {
            let mut m = CMat::zeros(l, l);
            for w in &ps {
                m += w.matrix(t, x);
            }
            m
        }))
    };
    let lbs: Vec<LowerFn> = ws.iter().map(|w| w.lower_bound.clone()).collect();
    let moduli: Vec<ModulusFn> = parts.iter().filter_map(|w| w.time_modulus.clone()).collect();
    let all_static = parts.iter().all(|w| w.time_independent);
    let time_modulus: Option<ModulusFn> = if moduli.is_empty() {
        None
    } else {
        Some(Arc::new(move |r| moduli.iter().map(|s| s(r)).sum::<f64>().max(r)))
    };
    Ok(WeightSpec {
        l,
        name: ws.iter().map(|w| w.name.as_str()).collect::<Vec<_>>().join("+"),
        eval,
        lower_bound: Arc::new(move |t, x| lbs.iter().map(|f| f(t, x)).sum()),
        shift: ws.iter().map(|w| w.shift).sum(),
        time_modulus,
        is_zero: false,
        time_independent: all_static,
    })
}

/// e^{−ρ W_s(t,x)} via Hermitian eigendecomposition.
pub fn damping_factor(w: &WeightSpec, t: f64, x: &[f64], rho: f64) -> Result<HermitianMatrix> {
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "exposure ρ = {rho} must be nonnegative"
        )));
    }
    let m = w.matrix(t, x);
    let dev = hermitian_deviation(&m);
    if dev > 1e-12 {
        return Err(Error::NotHermitian { deviation: dev });
    }
    Ok(HermitianMatrix(hermitian_function(&m, |lam| (-rho * lam).exp())))
}

/// Multiplies the field pointwise by e^{−ρ W_s(t,x)}.
pub fn apply_damping(f: &mut SpinorField, w: &WeightSpec, t: f64, rho: f64) -> Result<()> {
    if w.l != f.l() {
        return Err(Error::Mismatch(format!(
            "weight has l = {}, field has l = {}",
            w.l,
            f.l()
        )));
    }
    if w.is_zero || rho == 0.0 {
        return Ok(());
    }
    let grid = f.grid().clone();
    let n = grid.len();
    let d = grid.dim();
    let l = f.l();
    if w.is_diagonal() {
        let mut diag = vec![0.0; l];
        let data = f.data_mut();
        for p in 0..n {
            let x = grid.point(p);
            w.diagonal_into(t, &x[..d], &mut diag);
            for c in 0..l {
                data[c * n + p] *= (-rho * diag[c]).exp();
            }
        }
    } else {
        let data = f.data_mut();
        for p in 0..n {
            let x = grid.point(p);
            let m = damping_factor(w, t, &x[..d], rho)?;
            apply_pointwise(&m.0, data, n, p);
        }
    }
    Ok(())
}

/// Sampled check of W ⪰ (w − C_W) I and the derivative growth ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionReport {
    pub weight: String,
    pub samples: usize,
    /// min over samples of λ_min(W − (w − C_W) I).
    pub min_margin: f64,
    pub max_hermitian_deviation: f64,
    /// sup ‖∂^α W‖/(1 + w) for |α| = 1, 2.
    pub c_growth_w: [f64; 2],
    /// sup ‖∂^α W‖/⟨x⟩ for |α| = 1, 2.
    pub c_growth_x: [f64; 2],
    /// min over sampled (s, t) of σ(|t − s|) − ‖W(t) − W(s)‖/⟨x⟩²; None when
    /// the weight has no modulus or is static.
    pub time_modulus_margin: Option<f64>,
    pub pass: bool,
}

pub const MARGIN_TOLERANCE: f64 = 1e-8;

impl AssumptionReport {
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "weight={}", self.weight);
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "min_margin={:.16e}", self.min_margin);
        let _ = writeln!(s, "max_hermitian_deviation={:.16e}", self.max_hermitian_deviation);
        let _ = writeln!(s, "c_growth_w_order1={:.16e}", self.c_growth_w[0]);
        let _ = writeln!(s, "c_growth_w_order2={:.16e}", self.c_growth_w[1]);
        let _ = writeln!(s, "c_growth_x_order1={:.16e}", self.c_growth_x[0]);
        let _ = writeln!(s, "c_growth_x_order2={:.16e}", self.c_growth_x[1]);
        if let Some(m) = self.time_modulus_margin {
            let _ = writeln!(s, "time_modulus_margin={m:.16e}");
        }
        let _ = writeln!(s, "pass={}", self.pass);
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} over {} samples, lower-bound margin {:.3e}, derivative constants (vs 1+w) {:.3e}/{:.3e}, (vs <x>) {:.3e}/{:.3e}",
            self.weight,
            if self.pass { "PASS" } else { "FAIL" },
            self.samples,
            self.min_margin,
            self.c_growth_w[0],
            self.c_growth_w[1],
            self.c_growth_x[0],
            self.c_growth_x[1],
        )
    }
}

/// Centered finite-difference derivative matrices of order 1 and 2 at x.
fn derivative_norms(w: &WeightSpec, t: f64, x: &[f64], h: f64) -> [f64; 2] {
    let d = x.len();
    let at = |dx: &[(usize, f64)]| {
        let mut y = [0.0; MAX_DIM];
        y[..d].copy_from_slice(x);
        for &(j, s) in dx {
            y[j] += s;
        }
        w.matrix(t, &y[..d])
    };
    let center = w.matrix(t, x);
    let mut first: f64 = 0.0;
    let mut second: f64 = 0.0;
    for j in 0..d {
        let p = at(&[(j, h)]);
        let m = at(&[(j, -h)]);
        first = first.max(operator_norm(&((&p - &m) * C64::new(0.5 / h, 0.0))));
        second = second.max(operator_norm(
            &((&p - &center * C64::new(2.0, 0.0) + &m) * C64::new(1.0 / (h * h), 0.0)),
        ));
        for k in j + 1..d {
            let pp = at(&[(j, h), (k, h)]);
            let pm = at(&[(j, h), (k, -h)]);
            let mp = at(&[(j, -h), (k, h)]);
            let mm = at(&[(j, -h), (k, -h)]);
            let mixed = (pp - pm - mp + mm) * C64::new(0.25 / (h * h), 0.0);
            second = second.max(operator_norm(&mixed));
        }
    }
    [first, second]
}

/// Samples the lower-bound inequality, Hermiticity, and the growth ratios
/// of the first and second spatial derivatives over `grid` × `times`.
/// `fd_step` defaults to an eighth of the smallest spacing.
pub fn verify_assumption_2d(w: &WeightSpec, grid: &Grid, times: &[f64], fd_step: Option<f64>) -> AssumptionReport {
    let h = fd_step.unwrap_or(grid.min_spacing() / 8.0);
    let d = grid.dim();
    let samples: Vec<(f64, usize)> = times
        .iter()
        .flat_map(|&t| (0..grid.len()).map(move |p| (t, p)))
        .collect();
    let per_point: Vec<(f64, f64, [f64; 2], [f64; 2])> = samples
        .par_iter()
        .map(|&(t, p)| {
            let x = grid.point(p);
            let x = &x[..d];
            let m = w.matrix(t, x);
            let dev = hermitian_deviation(&m);
            let wl = w.lower(t, x);
            let margin = hermitian_eigenvalues(&m)[0] - (wl - w.shift);
            let dn = derivative_norms(w, t, x, h);
            let bracket = (1.0 + norm2(x)).sqrt();
            (
                margin,
                dev,
                [dn[0] / (1.0 + wl), dn[1] / (1.0 + wl)],
                [dn[0] / bracket, dn[1] / bracket],
            )
        })
        .collect();
    let mut min_margin = f64::INFINITY;
    let mut dev: f64 = 0.0;
    let mut cw = [0.0f64; 2];
    let mut cx = [0.0f64; 2];
    for (m, dv, a, b) in &per_point {
        min_margin = min_margin.min(*m);
        dev = dev.max(*dv);
        for k in 0..2 {
            cw[k] = cw[k].max(a[k]);
            cx[k] = cx[k].max(b[k]);
        }
    }
    if per_point.is_empty() {
        min_margin = 0.0;
    }
    let time_modulus_margin = match (&w.time_modulus, w.time_independent || times.len() < 2) {
        (Some(sigma), false) => {
            let mut worst = f64::INFINITY;
            for i in 0..times.len() {
                for j in i + 1..times.len() {
                    let (s, t) = (times[i], times[j]);
                    let bound = sigma((t - s).abs());
                    let sup = (0..grid.len())
                        .map(|p| {
                            let x = grid.point(p);
                            let x = &x[..d];
                            operator_norm(&(w.matrix(t, x) - w.matrix(s, x))) / (1.0 + norm2(x))
                        })
                        .fold(0.0, f64::max);
                    worst = worst.min(bound - sup);
                }
            }
            Some(worst)
        }
        _ => None,
    };
    let pass =
        min_margin >= -MARGIN_TOLERANCE && dev <= 1e-12 && time_modulus_margin.is_none_or(|m| m >= -MARGIN_TOLERANCE);
    AssumptionReport {
        weight: w.name.clone(),
        samples: samples.len(),
        min_margin,
        max_hermitian_deviation: dev,
        c_growth_w: cw,
        c_growth_x: cx,
        time_modulus_margin,
        pass,
    }
}

/// Sampled bounds specific to the multi-slit mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MultislitReport {
    pub samples: usize,
    /// min W (must be ≥ 0).
    pub min_w: f64,
    /// sup |∂^α W|/⟨x'⟩ for |α| = 1, 2.
    pub c_alpha_beta: [f64; 2],
    /// min of W − k(x_d)·min_j h1.
    pub min_h1_margin: f64,
    /// sup ⟨x'⟩ k(x_d)/(1 + W).
    pub c_star: f64,
    pub pass: bool,
}

impl MultislitReport {
    pub fn key_values(&self) -> String {
        format!(
            "samples={}\nmin_w={:.16e}\nc_alpha_beta_order1={:.16e}\nc_alpha_beta_order2={:.16e}\nmin_h1_margin={:.16e}\nc_star={:.16e}\npass={}\n",
            self.samples, self.min_w, self.c_alpha_beta[0], self.c_alpha_beta[1], self.min_h1_margin, self.c_star, self.pass
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "multislit: {} over {} samples, min W {:.3e}, min-h1 margin {:.3e}, C* {:.4}",
            if self.pass { "PASS" } else { "FAIL" },
            self.samples,
            self.min_w,
            self.min_h1_margin,
            self.c_star
        )
    }
}

impl MultislitWeight {
    /// Checks nonnegativity, derivative growth in x', the min-h1 lower bound
    /// and C* on the sample lattice. Uses the unshifted mask.
    pub fn verify_bounds(&self, grid: &Grid, fd_step: Option<f64>) -> Result<MultislitReport> {
        if grid.dim() != 2 {
            return Err(Error::UnsupportedDimension(grid.dim()));
        }
        let mut raw = self.clone();
        raw.subtract_offset = false;
        let h = fd_step.unwrap_or(grid.min_spacing() / 8.0);
        let f = |x: f64, z: f64| raw.raw(&[x, z]);
        let rows: Vec<(f64, [f64; 2], f64, f64)> = (0..grid.len())
            .into_par_iter()
            .map(|p| {
                let x = grid.point(p);
                let (a, b) = (x[0], x[1]);
                let w0 = f(a, b);
                let d1 = [
                    (f(a + h, b) - f(a - h, b)) / (2.0 * h),
                    (f(a, b + h) - f(a, b - h)) / (2.0 * h),
                ];
                let d2 = [
                    (f(a + h, b) - 2.0 * w0 + f(a - h, b)) / (h * h),
                    (f(a, b + h) - 2.0 * w0 + f(a, b - h)) / (h * h),
                    (f(a + h, b + h) - f(a + h, b - h) - f(a - h, b + h) + f(a - h, b - h)) / (4.0 * h * h),
                ];
                let bracket = (1.0 + a * a).sqrt();
                let g1 = d1.iter().fold(0.0f64, |m, v| m.max(v.abs())) / bracket;
                let g2 = d2.iter().fold(0.0f64, |m, v| m.max(v.abs())) / bracket;
                let k = raw.k(b);
                (w0, [g1, g2], w0 - k * raw.min_h1(a), bracket * k / (1.0 + w0))
            })
            .collect();
        let mut min_w = f64::INFINITY;
        let mut cab = [0.0f64; 2];
        let mut min_h1_margin = f64::INFINITY;
        let mut c_star: f64 = 0.0;
        for (w0, g, m, c) in &rows {
            min_w = min_w.min(*w0);
            cab[0] = cab[0].max(g[0]);
            cab[1] = cab[1].max(g[1]);
            min_h1_margin = min_h1_margin.min(*m);
            c_star = c_star.max(*c);
        }
        Ok(MultislitReport {
            samples: rows.len(),
            min_w,
            c_alpha_beta: cab,
            min_h1_margin,
            c_star,
            pass: min_w >= -1e-10 && min_h1_margin >= -MARGIN_TOLERANCE && c_star.is_finite(),
        })
    }
}
