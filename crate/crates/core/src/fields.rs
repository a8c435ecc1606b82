//! Electromagnetic potentials, the Lagrangian, polyline paths and the
//! classical action along them, and gauge transformations.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Grid, Point, MAX_DIM};
use crate::quadrature::gauss_legendre_on;

pub type ScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64, &[f64]) -> Point + Send + Sync>;

/// Scalar and vector potential together with the particle constants.
#[derive(Clone)]
pub struct Potential {
    pub dim: usize,
    pub scalar: Option<ScalarFn>,
    pub vector: Option<VectorFn>,
    pub mass: f64,
    pub charge: f64,
    pub hbar: f64,
    /// Characteristic time span; sets the finite-difference step in t.
    pub time_scale: f64,
    /// V and A do not depend on t; lets propagators cache pointwise factors.
    pub time_independent: bool,
    pub name: String,
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Potential")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("scalar", &self.scalar.is_some())
            .field("vector", &self.vector.is_some())
            .field("mass", &self.mass)
            .field("charge", &self.charge)
            .field("hbar", &self.hbar)
            .finish()
    }
}

impl Potential {
    /// V = 0, A = 0 with unit constants.
    pub fn free(dim: usize) -> Self {
        Potential {
            dim,
            scalar: None,
            vector: None,
            mass: 1.0,
            charge: 1.0,
            hbar: 1.0,
            time_scale: 1.0,
            time_independent: true,
            name: "free".into(),
        }
    }

    pub fn with_constants(mut self, mass: f64, charge: f64, hbar: f64) -> Self {
        self.mass = mass;
        self.charge = charge;
        self.hbar = hbar;
        self
    }

    /// Sets V. The potential is treated as time dependent until
    /// [`Potential::static_in_time`] says otherwise.
    pub fn with_scalar(mut self, v: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.scalar = Some(Arc::new(v));
        self.time_independent = false;
        self
    }

    pub fn with_vector(mut self, a: impl Fn(f64, &[f64]) -> Point + Send + Sync + 'static) -> Self {
        self.vector = Some(Arc::new(a));
        self.time_independent = false;
        self
    }

    /// Declares that V and A ignore their time argument.
    pub fn static_in_time(mut self) -> Self {
        self.time_independent = true;
        self
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    /// V = −E₀·x, whose field is the constant E₀.
    pub fn uniform_field(dim: usize, e0: Point) -> Self {
        Self::free(dim)
            .with_scalar(move |_, x| -x.iter().zip(e0.iter()).map(|(a, b)| a * b).sum::<f64>())
            .named("uniform_field")
            .static_in_time()
    }

    /// V = m ω² |x − c|² / 2 (the mass is read at evaluation time).
    pub fn harmonic(dim: usize, mass: f64, omega: f64, center: Point) -> Self {
        let k = mass * omega * omega;
        let mut p = Self::free(dim)
            .with_scalar(move |_, x| 0.5 * k * x.iter().zip(center.iter()).map(|(a, c)| (a - c).powi(2)).sum::<f64>())
            .named("harmonic")
            .static_in_time();
        p.mass = mass;
        p
    }

    /// A = B₀ (−x₂, x₁)/2, a uniform magnetic field B₁₂ = B₀ in d = 2.
    pub fn symmetric_gauge(b0: f64) -> Self {
        Self::free(2)
            .with_vector(move |_, x| [-0.5 * b0 * x[1], 0.5 * b0 * x[0]])
            .named("symmetric_gauge")
            .static_in_time()
    }

    /// Thin solenoid of flux α at `center`: A = (α/2π)(−y, x)/r² outside r₀,
    /// growing linearly inside so that B is uniform on the core and zero
    /// outside it.
    pub fn solenoid(flux: f64, core_radius: f64, center: Point) -> Self {
        let c = flux / (2.0 * PI);
        Self::free(2)
            .with_vector(move |_, x| {
                let (dx, dy) = (x[0] - center[0], x[1] - center[1]);
                let r2 = dx * dx + dy * dy;
                let s = if r2 >= core_radius * core_radius {
                    c / r2
                } else {
                    c / (core_radius * core_radius)
                };
                [-s * dy, s * dx]
            })
            .named("solenoid")
            .static_in_time()
    }

    pub fn has_vector(&self) -> bool {
        self.vector.is_some()
    }

    pub fn scalar_at(&self, t: f64, x: &[f64]) -> f64 {
        self.scalar.as_ref().map_or(0.0, |v| v(t, x))
    }

    pub fn vector_at(&self, t: f64, x: &[f64]) -> Point {
        self.vector.as_ref().map_or([0.0; MAX_DIM], |a| a(t, x))
    }

    /// Samples V and A on a grid and rejects non-finite values.
    pub fn check_finite(&self, grid: &Grid, t: f64) -> Result<()> {
        let d = grid.dim();
        for p in 0..grid.len() {
            let x = grid.point(p);
            let v = self.scalar_at(t, &x[..d]);
            let a = self.vector_at(t, &x[..d]);
            if !v.is_finite() || a.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!("potential {} at t = {t}", self.name)));
            }
        }
        Ok(())
    }
}

/// ℒ = m|v|²/2 + 𝔮 v·A(t,x) − 𝔮 V(t,x).
pub fn lagrangian(p: &Potential, t: f64, x: &[f64], v: &[f64]) -> f64 {
    let kin: f64 = v.iter().map(|c| c * c).sum::<f64>() * 0.5 * p.mass;
    let a = p.vector_at(t, x);
    let va: f64 = v.iter().zip(a.iter()).map(|(v, a)| v * a).sum();
    kin + p.charge * va - p.charge * p.scalar_at(t, x)
}

/// Five-point centered derivative of a scalar function of one variable.
fn richardson(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
}

const SPATIAL_FD_STEP: f64 = 1e-3;

/// Electric field and magnetic tensor at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldValue {
    pub e: Point,
    /// B₁₂ in d = 2; zero in d = 1.
    pub b12: f64,
}

/// E = −∂A/∂t − ∇V and B₁₂ = ∂₁A₂ − ∂₂A₁ at every grid point.
///
/// Derivatives are taken by finite differences on the potential callables,
/// which are not periodic on the box.
pub fn fields_from_potential(p: &Potential, grid: &Grid, t: f64) -> Vec<FieldValue> {
    let d = grid.dim();
    (0..grid.len())
        .map(|idx| field_at(p, t, &grid.point(idx)[..d]))
        .collect()
}

pub fn field_at(p: &Potential, t: f64, x: &[f64]) -> FieldValue {
    let d = x.len();
    let mut e = [0.0; MAX_DIM];
    let ht = 1e-6 * p.time_scale;
    for j in 0..d {
        let grad_v = if p.scalar.is_some() {
            richardson(
                |s| {
                    let mut y = [0.0; MAX_DIM];
                    y[..d].copy_from_slice(x);
                    y[j] = s;
                    p.scalar_at(t, &y[..d])
                },
                x[j],
                SPATIAL_FD_STEP,
            )
        } else {
            0.0
        };
        let da_dt = if p.vector.is_some() {
            (p.vector_at(t + ht, x)[j] - p.vector_at(t - ht, x)[j]) / (2.0 * ht)
        } else {
            0.0
        };
        e[j] = -da_dt - grad_v;
    }
    let b12 = if d == 2 && p.vector.is_some() {
        let d1a2 = richardson(|s| p.vector_at(t, &[s, x[1]])[1], x[0], SPATIAL_FD_STEP);
        let d2a1 = richardson(|s| p.vector_at(t, &[x[0], s])[0], x[1], SPATIAL_FD_STEP);
        d1a2 - d2a1
    } else {
        0.0
    };
    FieldValue { e, b12 }
}

/// Piecewise-linear path through (τ_j, x⁽ʲ⁾).
#[derive(Clone, Debug, PartialEq)]
pub struct PathPolyline {
    dim: usize,
    times: Vec<f64>,
    vertices: Vec<Point>,
}

impl PathPolyline {
    pub fn new(dim: usize, times: Vec<f64>, vertices: Vec<Point>) -> Result<Self> {
        if times.len() < 2 || times.len() != vertices.len() {
            return Err(Error::InvalidArgument(format!(
                "polyline needs matching times and vertices (≥ 2), got {} and {}",
                times.len(),
                vertices.len()
            )));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("polyline times must increase strictly".into()));
        }
        Ok(PathPolyline { dim, times, vertices })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn segments(&self) -> usize {
        self.times.len() - 1
    }

    fn segment_of(&self, theta: f64) -> usize {
        let k = self.times.partition_point(|&t| t <= theta);
        k.clamp(1, self.times.len() - 1) - 1
    }

    /// Linear interpolation within the containing segment.
    pub fn eval(&self, theta: f64) -> Point {
        let j = self.segment_of(theta);
        let (t0, t1) = (self.times[j], self.times[j + 1]);
        let (a, b) = (self.vertices[j], self.vertices[j + 1]);
        let s = (theta - t0) / (t1 - t0);
        let mut p = [0.0; MAX_DIM];
        for i in 0..self.dim {
            p[i] = a[i] + s * (b[i] - a[i]);
        }
        p
    }

    pub fn velocity(&self, theta: f64) -> Point {
        self.segment_velocity(self.segment_of(theta))
    }

    pub fn segment_velocity(&self, j: usize) -> Point {
        let dt = self.times[j + 1] - self.times[j];
        let mut v = [0.0; MAX_DIM];
        for i in 0..self.dim {
            v[i] = (self.vertices[j + 1][i] - self.vertices[j][i]) / dt;
        }
        v
    }

    /// Joins two paths sharing the end/start vertex.
    pub fn concat(&self, other: &PathPolyline) -> Result<Self> {
        if self.end() != other.start() || self.vertices.last() != other.vertices.first() {
            return Err(Error::InvalidArgument("paths do not share a vertex".into()));
        }
        let mut times = self.times.clone();
        let mut vertices = self.vertices.clone();
        times.extend_from_slice(&other.times[1..]);
        vertices.extend_from_slice(&other.vertices[1..]);
        PathPolyline::new(self.dim, times, vertices)
    }
}

/// The straight path from y at time s to x at time t.
pub fn straight_path(t: f64, s: f64, x: &[f64], y: &[f64]) -> Result<PathPolyline> {
    if !(s < t) {
        return Err(Error::InvalidArgument(format!(
            "straight path needs s < t, got s = {s}, t = {t}"
        )));
    }
    let d = x.len();
    let mut xe = [0.0; MAX_DIM];
    let mut ys = [0.0; MAX_DIM];
    xe[..d].copy_from_slice(x);
    ys[..d].copy_from_slice(y);
    PathPolyline::new(d, vec![s, t], vec![ys, xe])
}

/// ∫ ℒ dθ along the polyline, Gauss–Legendre with `quad_points` nodes per
/// segment.
pub fn action_along(p: &Potential, path: &PathPolyline, quad_points: usize) -> f64 {
    let d = path.dim();
    let mut total = 0.0;
    for j in 0..path.segments() {
        let (t0, t1) = (path.times[j], path.times[j + 1]);
        let v = path.segment_velocity(j);
        let (nodes, weights) = gauss_legendre_on(quad_points.max(1), t0, t1);
        let mut seg = 0.0;
        for (th, w) in nodes.iter().zip(&weights) {
            let q = path.eval_in_segment(j, *th);
            seg += w * lagrangian(p, *th, &q[..d], &v[..d]);
        }
        total += seg;
    }
    total
}

impl PathPolyline {
    fn eval_in_segment(&self, j: usize, theta: f64) -> Point {
        let (t0, t1) = (self.times[j], self.times[j + 1]);
        let (a, b) = (self.vertices[j], self.vertices[j + 1]);
        let s = (theta - t0) / (t1 - t0);
        let mut p = [0.0; MAX_DIM];
        for i in 0..self.dim {
            p[i] = a[i] + s * (b[i] - a[i]);
        }
        p
    }
}

/// A gauge function ψ(t, x) with its time derivative and gradient.
#[derive(Clone)]
pub struct GaugeFunction {
    pub psi: ScalarFn,
    pub dpsi_dt: ScalarFn,
    pub grad: VectorFn,
}

impl fmt::Debug for GaugeFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("GaugeFunction")
    }
}

impl GaugeFunction {
    pub fn new(
        psi: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        dpsi_dt: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, &[f64]) -> Point + Send + Sync + 'static,
    ) -> Self {
        GaugeFunction {
            psi: Arc::new(psi),
            dpsi_dt: Arc::new(dpsi_dt),
            grad: Arc::new(grad),
        }
    }

    /// Derivatives supplied by finite differences.
    pub fn numeric(psi: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        let psi: ScalarFn = Arc::new(psi);
        let (p1, p2) = (psi.clone(), psi.clone());
        GaugeFunction {
            psi,
            dpsi_dt: Arc::new(move |t, x| richardson(|s| p2(s, x), t, 1e-4)),
            grad: Arc::new(move |t, x| {
                let d = x.len();
                let mut g = [0.0; MAX_DIM];
                for j in 0..d {
                    g[j] = richardson(
                        |s| {
                            let mut y = [0.0; MAX_DIM];
                            y[..d].copy_from_slice(x);
                            y[j] = s;
                            p1(t, &y[..d])
                        },
                        x[j],
                        SPATIAL_FD_STEP,
                    );
                }
                g
            }),
        }
    }

    /// ψ = c t + β·x.
    pub fn linear(c: f64, beta: Point) -> Self {
        Self::new(
            move |t, x| c * t + x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>(),
            move |_, _| c,
            move |_, _| beta,
        )
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.psi)(t, x)
    }

    /// Largest relative mismatch between supplied derivatives and finite
    /// differences of ψ over the sample points.
    pub fn consistency(&self, points: &[(f64, Vec<f64>)]) -> f64 {
        let mut worst: f64 = 0.0;
        for (t, x) in points {
            let d = x.len();
            let dt_fd = richardson(|s| (self.psi)(s, x), *t, 1e-4);
            let dt = (self.dpsi_dt)(*t, x);
            worst = worst.max((dt - dt_fd).abs() / (1.0 + dt.abs()));
            let g = (self.grad)(*t, x);
            for j in 0..d {
                let gj = richardson(
                    |s| {
                        let mut y = x.clone();
                        y[j] = s;
                        (self.psi)(*t, &y)
                    },
                    x[j],
                    SPATIAL_FD_STEP,
                );
                worst = worst.max((g[j] - gj).abs() / (1.0 + g[j].abs()));
            }
        }
        worst
    }
}

/// V' = V − ∂ψ/∂t, A' = A + ∇ψ. The wavefunction picks up e^{i𝔮ψ/ħ}.
pub fn gauge_transform(p: &Potential, g: &GaugeFunction) -> Potential {
    let v0 = p.scalar.clone();
    let a0 = p.vector.clone();
    let dt = g.dpsi_dt.clone();
    let grad = g.grad.clone();
    let d = p.dim;
    Potential {
        scalar: Some(Arc::new(move |t, x| v0.as_ref().map_or(0.0, |v| v(t, x)) - dt(t, x))),
        vector: Some(Arc::new(move |t, x| {
            let mut a = a0.as_ref().map_or([0.0; MAX_DIM], |a| a(t, x));
            let gr = grad(t, x);
            for j in 0..d {
                a[j] += gr[j];
            }
            a
        })),
        name: format!("{}+gauge", p.name),
        time_independent: false,
        ..p.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lagrangian_examples() {
        let p = Potential::free(2);
        assert_eq!(lagrangian(&p, 0.0, &[0.3, 0.1], &[0.0, 0.0]), 0.0);
        let q = Potential::free(2)
            .with_constants(2.0, 1.0, 1.0)
            .with_vector(|_, _| [1.0, 0.0])
            .with_scalar(|_, _| 3.0);
        assert_eq!(lagrangian(&q, 0.0, &[0.0, 0.0], &[1.0, 0.0]), -1.0);
        let n = Potential::free(1)
            .with_constants(3.0, 0.0, 1.0)
            .with_scalar(|_, x| x[0]);
        assert_eq!(lagrangian(&n, 0.0, &[2.0], &[2.0]), 6.0);
    }

    #[test]
    fn field_examples() {
        let g = Grid::square(-2.0, 2.0, 8).unwrap();
        for f in fields_from_potential(&Potential::free(2), &g, 0.0) {
            assert_eq!(f.e, [0.0, 0.0]);
            assert_eq!(f.b12, 0.0);
        }
        let b0 = 1.7;
        for f in fields_from_potential(&Potential::symmetric_gauge(b0), &g, 0.3) {
            assert!((f.b12 - b0).abs() < 1e-8);
        }
        let lin = Potential::free(2).with_scalar(|_, x| x[0]);
        for f in fields_from_potential(&lin, &g, 0.0) {
            assert!((f.e[0] + 1.0).abs() < 1e-10 && f.e[1].abs() < 1e-12);
        }
    }

    #[test]
    fn solenoid_field_confined_to_core() {
        let p = Potential::solenoid(2.0, 0.5, [0.0, 0.0]);
        let outside = field_at(&p, 0.0, &[1.5, -0.7]);
        assert!(outside.b12.abs() < 1e-8);
        let inside = field_at(&p, 0.0, &[0.1, 0.05]);
        assert!((inside.b12 - 2.0 / (PI * 0.25)).abs() < 1e-6);
    }

    #[test]
    fn straight_path_endpoints() {
        let q = straight_path(2.0, 1.0, &[3.0], &[-1.0]).unwrap();
        assert_eq!(q.eval(1.0)[0], -1.0);
        assert_eq!(q.eval(2.0)[0], 3.0);
        assert_eq!(q.eval(1.5)[0], 1.0);
        assert!(straight_path(1.0, 1.0, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn action_examples() {
        let p = Potential::free(1);
        let q = straight_path(1.0, 0.0, &[1.0], &[0.0]).unwrap();
        assert!((action_along(&p, &q, 4) - 0.5).abs() < 1e-15);
        let c = Potential::free(1).with_scalar(|_, _| 2.5);
        let q = straight_path(0.7, 0.3, &[1.0], &[0.2]).unwrap();
        let kin = 0.5 * 0.8f64.powi(2) / 0.4;
        assert!((action_along(&c, &q, 4) - (kin - 2.5 * 0.4)).abs() < 1e-14);
    }

    #[test]
    fn action_quadratic_matches_dense_trapezoid() {
        let p = Potential::harmonic(1, 1.3, 2.0, [0.1, 0.0]);
        let q = straight_path(0.9, 0.1, &[1.4], &[-0.6]).unwrap();
        let gl = action_along(&p, &q, 4);
        let n = 10_000;
        let (s, t) = (0.1, 0.9);
        let h = (t - s) / n as f64;
        let v = q.velocity(0.5);
        let mut trap = 0.0;
        for i in 0..=n {
            let th = s + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            trap += w * lagrangian(&p, th, &q.eval(th)[..1], &v[..1]);
        }
        trap *= h;
        assert!((gl - trap).abs() <= 1e-8 * gl.abs(), "gl {gl} trap {trap}");
    }

    #[test]
    fn action_additive_over_concat() {
        let p = Potential::harmonic(1, 1.0, 1.0, [0.0, 0.0]).with_vector(|t, x| [t * x[0], 0.0]);
        let a = straight_path(0.5, 0.0, &[1.0], &[0.0]).unwrap();
        let b = straight_path(1.0, 0.5, &[-0.3], &[1.0]).unwrap();
        let ab = a.concat(&b).unwrap();
        let lhs = action_along(&p, &ab, 6);
        let rhs = action_along(&p, &a, 6) + action_along(&p, &b, 6);
        assert!((lhs - rhs).abs() <= 1e-15 * lhs.abs().max(1.0));
    }

    #[test]
    fn gauge_examples() {
        let base = Potential::harmonic(1, 1.0, 1.0, [0.0, 0.0]);
        let zero = gauge_transform(&base, &GaugeFunction::linear(0.0, [0.0, 0.0]));
        assert_eq!(zero.scalar_at(0.2, &[0.4]), base.scalar_at(0.2, &[0.4]));
        assert_eq!(zero.vector_at(0.2, &[0.4]), [0.0, 0.0]);
        let ct = gauge_transform(&base, &GaugeFunction::linear(0.8, [0.0, 0.0]));
        assert!((ct.scalar_at(0.0, &[1.0]) - (base.scalar_at(0.0, &[1.0]) - 0.8)).abs() < 1e-15);
        let x1 = gauge_transform(&base, &GaugeFunction::linear(0.0, [1.0, 0.0]));
        assert_eq!(x1.vector_at(0.0, &[0.3])[0], 1.0);
    }

    #[test]
    fn fields_are_gauge_invariant() {
        let p = Potential::symmetric_gauge(0.6).with_scalar(|t, x| t * x[0] * x[1]);
        let g = GaugeFunction::numeric(|t, x| (t * x[0]).sin() + 0.3 * x[1] * x[1]);
        assert!(g.consistency(&[(0.4, vec![0.2, -0.5]), (0.9, vec![1.0, 0.3])]) < 1e-6);
        let q = gauge_transform(&p, &g);
        for x in [[0.3, 0.4], [-1.0, 0.5]] {
            let a = field_at(&p, 0.5, &x);
            let b = field_at(&q, 0.5, &x);
            for j in 0..2 {
                assert!((a.e[j] - b.e[j]).abs() <= 1e-6 * (1.0 + a.e[j].abs()));
            }
            assert!((a.b12 - b.b12).abs() <= 1e-6 * (1.0 + a.b12.abs()));
        }
    }

    #[test]
    fn action_changes_by_boundary_gauge_terms() {
        let p = Potential::harmonic(1, 1.0, 2.0, [0.0, 0.0]);
        let g = GaugeFunction::new(
            |t, x| 0.5 * t * x[0] * x[0] + 0.2 * x[0],
            |_, x| 0.5 * x[0] * x[0],
            |t, x| [t * x[0] + 0.2, 0.0],
        );
        let q = gauge_transform(&p, &g);
        let path = straight_path(0.6, 0.0, &[0.9], &[-0.4])
            .unwrap()
            .concat(&straight_path(1.0, 0.6, &[0.1], &[0.9]).unwrap())
            .unwrap();
        let ds = action_along(&q, &path, 8) - action_along(&p, &path, 8);
        let expect = g.value(1.0, &[0.1]) - g.value(0.0, &[-0.4]);
        assert!((ds - expect).abs() < 1e-12);
    }
}
