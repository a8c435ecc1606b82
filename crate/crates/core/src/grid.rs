//! Regular periodic grids on ℝ^d (d ∈ {1, 2}) and the spinor fields sampled
//! on them.
//!
//! Fields are stored component-major so that every spin component is a
//! contiguous array the FFT can work on directly. The on-disk layout is
//! different (row-major grid, component fastest); see [`SpinorField::write_to`].

use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::C64;

pub const MAX_DIM: usize = 2;

/// A position in ℝ^d padded to [`MAX_DIM`] coordinates.
pub type Point = [f64; MAX_DIM];

struct Axis {
    lo: f64,
    hi: f64,
    n: usize,
    dx: f64,
    k: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

struct GridInner {
    axes: Vec<Axis>,
    len: usize,
    cell_volume: f64,
    k_squared: Vec<f64>,
}

/// Uniform periodic grid. Cheap to clone.
#[derive(Clone)]
pub struct Grid {
    inner: Arc<GridInner>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Grid");
        s.field("dim", &self.dim());
        for (i, a) in self.inner.axes.iter().enumerate() {
            s.field(&format!("axis{i}"), &(a.lo, a.hi, a.n));
        }
        s.finish()
    }
}

impl Grid {
    /// Builds a grid with `points[j]` samples on `[lo_j, hi_j)` per axis.
    pub fn new(dim: usize, extents: &[(f64, f64)], points: &[usize]) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::UnsupportedDimension(dim));
        }
        if extents.len() != dim || points.len() != dim {
            return Err(Error::InvalidGrid(format!(
                "expected {dim} extents and point counts, got {} and {}",
                extents.len(),
                points.len()
            )));
        }
        let mut planner = FftPlanner::new();
        let mut axes = Vec::with_capacity(dim);
        for (&(lo, hi), &n) in extents.iter().zip(points) {
            if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
                return Err(Error::InvalidGrid(format!("extent ({lo}, {hi}) must satisfy lo < hi")));
            }
            if n < 8 {
                return Err(Error::InvalidGrid(format!(
                    "at least 8 points per axis required, got {n}"
                )));
            }
            let length = hi - lo;
            let dk = 2.0 * std::f64::consts::PI / length;
            let k = (0..n)
                .map(|j| {
                    let m = if j <= (n - 1) / 2 {
                        j as f64
                    } else {
                        j as f64 - n as f64
                    };
                    m * dk
                })
                .collect();
            axes.push(Axis {
                lo,
                hi,
                n,
                dx: length / n as f64,
                k,
                fwd: planner.plan_fft_forward(n),
                inv: planner.plan_fft_inverse(n),
            });
        }
        let len = axes.iter().map(|a| a.n).product();
        let cell_volume = axes.iter().map(|a| a.dx).product();
        let mut inner = GridInner {
            axes,
            len,
            cell_volume,
            k_squared: Vec::new(),
        };
        let mut k2 = vec![0.0; len];
        for (idx, v) in k2.iter_mut().enumerate() {
            let m = multi_index(&inner, idx);
            *v = inner
                .axes
                .iter()
                .enumerate()
                .map(|(a, ax)| ax.k[m[a]] * ax.k[m[a]])
                .sum();
        }
        inner.k_squared = k2;
        Ok(Grid { inner: Arc::new(inner) })
    }

    /// One-dimensional convenience constructor.
    pub fn line(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(1, &[(lo, hi)], &[n])
    }

    /// Square two-dimensional convenience constructor.
    pub fn square(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(2, &[(lo, hi), (lo, hi)], &[n, n])
    }

    pub fn dim(&self) -> usize {
        self.inner.axes.len()
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.inner.len
    }

    pub fn is_empty(&self) -> bool {
        self.inner.len == 0
    }

    /// Quadrature weight of every grid point.
    pub fn cell_volume(&self) -> f64 {
        self.inner.cell_volume
    }

    pub fn extent(&self, axis: usize) -> (f64, f64) {
        let a = &self.inner.axes[axis];
        (a.lo, a.hi)
    }

    pub fn extents(&self) -> Vec<(f64, f64)> {
        (0..self.dim()).map(|a| self.extent(a)).collect()
    }

    pub fn points(&self, axis: usize) -> usize {
        self.inner.axes[axis].n
    }

    pub fn points_per_axis(&self) -> Vec<usize> {
        self.inner.axes.iter().map(|a| a.n).collect()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.inner.axes[axis].dx
    }

    pub fn min_spacing(&self) -> f64 {
        self.inner.axes.iter().map(|a| a.dx).fold(f64::INFINITY, f64::min)
    }

    /// Angular wavenumbers of the FFT ordering along `axis`.
    pub fn wavenumbers(&self, axis: usize) -> &[f64] {
        &self.inner.axes[axis].k
    }

    /// |k|² for every flattened Fourier index.
    pub fn k_squared(&self) -> &[f64] {
        &self.inner.k_squared
    }

    pub fn box_volume(&self) -> f64 {
        self.inner.axes.iter().map(|a| a.hi - a.lo).product()
    }

    /// Multi-index (axis 0 slowest) of a flattened index.
    pub fn multi_index(&self, idx: usize) -> [usize; MAX_DIM] {
        multi_index(&self.inner, idx)
    }

    pub fn flat_index(&self, m: [usize; MAX_DIM]) -> usize {
        let mut idx = 0;
        for (a, ax) in self.inner.axes.iter().enumerate() {
            idx = idx * ax.n + m[a];
        }
        idx
    }

    /// Coordinates of a grid point.
    pub fn point(&self, idx: usize) -> Point {
        let m = self.multi_index(idx);
        let mut p = [0.0; MAX_DIM];
        for (a, ax) in self.inner.axes.iter().enumerate() {
            p[a] = ax.lo + m[a] as f64 * ax.dx;
        }
        p
    }

    /// Coordinates along a single axis.
    pub fn axis_coordinates(&self, axis: usize) -> Vec<f64> {
        let a = &self.inner.axes[axis];
        (0..a.n).map(|j| a.lo + j as f64 * a.dx).collect()
    }

    /// True when both grids describe the same lattice.
    pub fn same_as(&self, other: &Grid) -> bool {
        if Arc::ptr_eq(&self.inner, &other.inner) {
            return true;
        }
        self.dim() == other.dim()
            && self
                .inner
                .axes
                .iter()
                .zip(&other.inner.axes)
                .all(|(a, b)| a.n == b.n && a.lo == b.lo && a.hi == b.hi)
    }

    /// In-place unnormalized forward FFT of one component array.
    pub fn fft_forward(&self, data: &mut [C64]) {
        self.transform(data, true);
    }

    /// In-place inverse FFT, normalized so that inverse(forward(f)) = f.
    pub fn fft_inverse(&self, data: &mut [C64]) {
        self.transform(data, false);
        let s = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }

    fn transform(&self, data: &mut [C64], forward: bool) {
        debug_assert_eq!(data.len(), self.len());
        let axes = &self.inner.axes;
        let plan = |a: &Axis| if forward { a.fwd.clone() } else { a.inv.clone() };
        match axes.len() {
            1 => plan(&axes[0]).process(data),
            2 => {
                let (n0, n1) = (axes[0].n, axes[1].n);
                plan(&axes[1]).process(data);
                let mut t = vec![C64::new(0.0, 0.0); data.len()];
                for i in 0..n0 {
                    for j in 0..n1 {
                        t[j * n0 + i] = data[i * n1 + j];
                    }
                }
                plan(&axes[0]).process(&mut t);
                for i in 0..n0 {
                    for j in 0..n1 {
                        data[i * n1 + j] = t[j * n0 + i];
                    }
                }
            }
            _ => unreachable!(),
        }
    }

    /// Fourier multiplier of ∂^α. Odd orders drop the Nyquist mode so that
    /// the discrete operator maps real data to real data.
    pub fn derivative_multiplier(&self, alpha: [usize; MAX_DIM]) -> Vec<C64> {
        let axes = &self.inner.axes;
        (0..self.len())
            .map(|idx| {
                let m = self.multi_index(idx);
                let mut v = C64::new(1.0, 0.0);
                for (a, ax) in axes.iter().enumerate() {
                    let order = alpha[a];
                    if order == 0 {
                        continue;
                    }
                    let nyquist = ax.n % 2 == 0 && m[a] == ax.n / 2;
                    if nyquist && order % 2 == 1 {
                        return C64::new(0.0, 0.0);
                    }
                    v *= C64::new(0.0, ax.k[m[a]]).powu(order as u32);
                }
                v
            })
            .collect()
    }

    /// Applies a Fourier multiplier to one component array in place.
    pub fn apply_multiplier(&self, data: &mut [C64], multiplier: &[C64]) {
        self.fft_forward(data);
        for (v, m) in data.iter_mut().zip(multiplier) {
            *v *= m;
        }
        self.fft_inverse(data);
    }

    /// Indices of points lying in the outer `fraction` of the box along any
    /// axis.
    pub fn outer_shell(&self, fraction: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&idx| {
                let p = self.point(idx);
                (0..self.dim()).any(|a| {
                    let (lo, hi) = self.extent(a);
                    let margin = fraction * (hi - lo);
                    p[a] < lo + margin || p[a] >= hi - margin
                })
            })
            .collect()
    }
}

fn multi_index(inner: &GridInner, mut idx: usize) -> [usize; MAX_DIM] {
    let mut m = [0usize; MAX_DIM];
    for a in (0..inner.axes.len()).rev() {
        let n = inner.axes[a].n;
        m[a] = idx % n;
        idx /= n;
    }
    m
}

/// Fixed-tree pairwise sum; the split points depend only on the length, so
/// repeated reductions are bit-identical.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn pairwise_sum_complex(xs: &[C64]) -> C64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum_complex(&xs[..mid]) + pairwise_sum_complex(&xs[mid..])
}

/// l-component complex wavefunction sampled on a [`Grid`].
#[derive(Clone)]
pub struct SpinorField {
    grid: Grid,
    l: usize,
    data: Vec<C64>,
}

impl fmt::Debug for SpinorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpinorField")
            .field("grid", &self.grid)
            .field("l", &self.l)
            .finish()
    }
}

impl SpinorField {
    pub fn zeros(grid: &Grid, l: usize) -> Self {
        assert!(l >= 1, "spin dimension must be at least 1");
        SpinorField {
            grid: grid.clone(),
            l,
            data: vec![C64::new(0.0, 0.0); l * grid.len()],
        }
    }

    /// Samples `f(x, component)` at every grid point.
    pub fn from_fn(grid: &Grid, l: usize, f: impl Fn(&[f64], usize) -> C64) -> Self {
        let mut out = Self::zeros(grid, l);
        let d = grid.dim();
        for c in 0..l {
            for p in 0..grid.len() {
                let x = grid.point(p);
                out.data[c * grid.len() + p] = f(&x[..d], c);
            }
        }
        out
    }

    /// Builds a field from component-major data.
    pub fn from_data(grid: &Grid, l: usize, data: Vec<C64>) -> Result<Self> {
        if l == 0 || data.len() != l * grid.len() {
            return Err(Error::Mismatch(format!(
                "data length {} does not match l = {l} times {} points",
                data.len(),
                grid.len()
            )));
        }
        let f = SpinorField {
            grid: grid.clone(),
            l,
            data,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn component(&self, c: usize) -> &[C64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [C64] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn value(&self, point: usize, c: usize) -> C64 {
        self.data[c * self.grid.len() + point]
    }

    pub fn set_value(&mut self, point: usize, c: usize, v: C64) {
        let n = self.grid.len();
        self.data[c * n + point] = v;
    }

    /// Rejects NaN and infinite entries.
    pub fn validate(&self) -> Result<()> {
        if self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("spinor field".into()))
        }
    }

    pub fn check_compatible(&self, other: &SpinorField) -> Result<()> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::Mismatch("fields live on different grids".into()));
        }
        if self.l != other.l {
            return Err(Error::Mismatch(format!(
                "spin dimensions differ: {} vs {}",
                self.l, other.l
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, s: C64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self − other`.
    pub fn difference(&self, other: &SpinorField) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(out)
    }

    /// Pointwise multiplication by a scalar function of position.
    pub fn multiply_pointwise(&mut self, f: impl Fn(&[f64]) -> C64) {
        let n = self.grid.len();
        let d = self.grid.dim();
        for p in 0..n {
            let x = self.grid.point(p);
            let s = f(&x[..d]);
            for c in 0..self.l {
                self.data[c * n + p] *= s;
            }
        }
    }

    /// |u(x)|² summed over components, per grid point.
    pub fn density(&self) -> Vec<f64> {
        let n = self.grid.len();
        (0..n)
            .map(|p| (0..self.l).map(|c| self.data[c * n + p].norm_sqr()).sum())
            .collect()
    }

    /// Spectral derivative ∂^α applied to every component.
    pub fn derivative(&self, alpha: [usize; MAX_DIM]) -> SpinorField {
        let mult = self.grid.derivative_multiplier(alpha);
        let mut out = self.clone();
        for c in 0..self.l {
            self.grid.apply_multiplier(out.component_mut(c), &mult);
        }
        out
    }

    /// Multiplication by the monomial x^α.
    pub fn moment(&self, alpha: [usize; MAX_DIM]) -> SpinorField {
        let mut out = self.clone();
        out.multiply_pointwise(|x| {
            let mut v = 1.0;
            for (a, xa) in x.iter().enumerate() {
                v *= xa.powi(alpha[a] as i32);
            }
            C64::new(v, 0.0)
        });
        out
    }
}

/// (f, g) = ∫ Σ_c f_c(x) conj(g_c(x)) dx, conjugating the second argument.
pub fn inner_product(f: &SpinorField, g: &SpinorField) -> Result<C64> {
    f.check_compatible(g)?;
    let terms: Vec<C64> = f.data.iter().zip(&g.data).map(|(a, b)| a * b.conj()).collect();
    Ok(pairwise_sum_complex(&terms) * f.grid.cell_volume())
}

pub fn l2_norm(f: &SpinorField) -> f64 {
    let terms: Vec<f64> = f.data.iter().map(|v| v.norm_sqr()).collect();
    (pairwise_sum(&terms) * f.grid.cell_volume()).sqrt()
}

pub fn l2_norm_component(f: &SpinorField, c: usize) -> f64 {
    let terms: Vec<f64> = f.component(c).iter().map(|v| v.norm_sqr()).collect();
    (pairwise_sum(&terms) * f.grid.cell_volume()).sqrt()
}

/// All multi-indices with |α| = order in dimension `dim`.
pub fn multi_indices(dim: usize, order: usize) -> Vec<[usize; MAX_DIM]> {
    match dim {
        1 => vec![[order, 0]],
        2 => (0..=order).rev().map(|i| [i, order - i]).collect(),
        _ => Vec::new(),
    }
}

/// Weighted Sobolev norm ‖f‖_a = ‖f‖ + Σ_{|α|=a}(‖x^α f‖ + ‖∂^α f‖),
/// combined over spin components as sqrt(Σ_c ‖f_c‖_a²).
pub fn sobolev_norm(f: &SpinorField, a: usize) -> Result<f64> {
    if a > 2 {
        return Err(Error::InvalidArgument(format!(
            "Sobolev order {a} unsupported; use 0, 1 or 2"
        )));
    }
    if a == 0 {
        return Ok(l2_norm(f));
    }
    let alphas = multi_indices(f.grid.dim(), a);
    let moments: Vec<SpinorField> = alphas.iter().map(|&al| f.moment(al)).collect();
    let derivs: Vec<SpinorField> = alphas.iter().map(|&al| f.derivative(al)).collect();
    let mut total = 0.0;
    for c in 0..f.l {
        let mut nc = l2_norm_component(f, c);
        for (m, d) in moments.iter().zip(&derivs) {
            nc += l2_norm_component(m, c) + l2_norm_component(d, c);
        }
        total += nc * nc;
    }
    Ok(total.sqrt())
}

/// Discrete B⁰, B¹ and B² norms of a field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub l2: f64,
    pub b1: f64,
    pub b2: Option<f64>,
}

pub fn norm_report(f: &SpinorField, with_b2: bool) -> NormReport {
    NormReport {
        l2: l2_norm(f),
        b1: sobolev_norm(f, 1).expect("order 1 is supported"),
        b2: with_b2.then(|| sobolev_norm(f, 2).expect("order 2 is supported")),
    }
}

/// A sampled Gaussian packet and whether its width risks periodic wrap.
#[derive(Clone, Debug)]
pub struct GaussianPacket {
    pub field: SpinorField,
    pub wide_warning: bool,
}

/// exp(−|x−c|²/(4 w²) + i p·x/ħ) distributed over spin components with the
/// given (not necessarily normalized) weights, normalized to unit L² norm.
pub fn gaussian_packet(
    grid: &Grid,
    l: usize,
    center: &[f64],
    momentum: &[f64],
    width: f64,
    component_weights: &[C64],
    hbar: f64,
) -> Result<GaussianPacket> {
    let d = grid.dim();
    if center.len() != d || momentum.len() != d {
        return Err(Error::Mismatch(format!("center/momentum must have {d} coordinates")));
    }
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("packet width {width} must be positive")));
    }
    if component_weights.len() != l {
        return Err(Error::Mismatch(format!(
            "{} component weights for l = {l}",
            component_weights.len()
        )));
    }
    let wnorm: f64 = component_weights.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if !(wnorm > 0.0) {
        return Err(Error::InvalidArgument("component weights are all zero".into()));
    }
    let mut field = SpinorField::from_fn(grid, l, |x, c| {
        let w = component_weights[c];
        if w == C64::new(0.0, 0.0) {
            return C64::new(0.0, 0.0);
        }
        let mut r2 = 0.0;
        let mut phase = 0.0;
        for a in 0..d {
            r2 += (x[a] - center[a]).powi(2);
            phase += momentum[a] * x[a] / hbar;
        }
        w / wnorm * C64::from_polar((-r2 / (4.0 * width * width)).exp(), phase)
    });
    let n = l2_norm(&field);
    if !(n > 0.0) {
        return Err(Error::InvalidArgument("packet vanishes on the grid".into()));
    }
    field.data.iter_mut().for_each(|v| *v /= n);
    let wide_warning = (0..d).any(|a| {
        let (lo, hi) = grid.extent(a);
        width > (hi - lo) / 3.0
    });
    Ok(GaussianPacket { field, wide_warning })
}

/// Probability mass in the outer `fraction` of the box.
pub fn boundary_mass(f: &SpinorField, fraction: f64) -> f64 {
    let shell = f.grid.outer_shell(fraction);
    let dens = f.density();
    let terms: Vec<f64> = shell.iter().map(|&p| dens[p]).collect();
    pairwise_sum(&terms) * f.grid.cell_volume()
}

/// Threshold for the boundary-mass validity flag.
pub const BOUNDARY_MASS_LIMIT: f64 = 1e-6;

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    format: String,
    version: u32,
    dim: usize,
    extents: Vec<(f64, f64)>,
    points: Vec<usize>,
    l: usize,
}

const FORMAT_TAG: &str = "spinor-field";

impl SpinorField {
    /// Writes a one-line JSON header followed by little-endian f64 pairs
    /// (re, im), grid row-major with the component index fastest.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = FieldHeader {
            format: FORMAT_TAG.into(),
            version: 1,
            dim: self.grid.dim(),
            extents: self.grid.extents(),
            points: self.grid.points_per_axis(),
            l: self.l,
        };
        let line = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        let n = self.grid.len();
        let mut buf = Vec::with_capacity(16 * n * self.l);
        for p in 0..n {
            for c in 0..self.l {
                let v = self.data[c * n + p];
                buf.extend_from_slice(&v.re.to_le_bytes());
                buf.extend_from_slice(&v.im.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<SpinorField> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: FieldHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(e.to_string()))?;
        if header.format != FORMAT_TAG || header.version != 1 {
            return Err(Error::Format(format!(
                "unexpected format {} v{}",
                header.format, header.version
            )));
        }
        let grid = Grid::new(header.dim, &header.extents, &header.points)?;
        let n = grid.len();
        let l = header.l;
        let mut bytes = vec![0u8; 16 * n * l];
        r.read_exact(&mut bytes)?;
        let mut data = vec![C64::new(0.0, 0.0); n * l];
        for p in 0..n {
            for c in 0..l {
                let off = 16 * (p * l + c);
                let re = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                let im = f64::from_le_bytes(bytes[off + 8..off + 16].try_into().unwrap());
                data[c * n + p] = C64::new(re, im);
            }
        }
        SpinorField::from_data(&grid, l, data)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<SpinorField> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
