//! Small dense complex matrix helpers: exponentials, Hermitian checks,
//! operator norms.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::{CMat, C64};

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn one_norm(a: &CMat) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn is_diagonal(a: &CMat) -> bool {
    let n = a.nrows();
    (0..n).all(|i| (0..n).all(|j| i == j || a[(i, j)] == C64::new(0.0, 0.0)))
}

/// Matrix exponential by scaling and squaring with the degree-13 Padé
/// approximant. Diagonal inputs take an exact elementwise path.
pub fn expm(a: &CMat) -> CMat {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    if is_diagonal(a) {
        return CMat::from_fn(n, n, |i, j| if i == j { a[(i, i)].exp() } else { C64::new(0.0, 0.0) });
    }
    let norm = one_norm(a);
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a * C64::new(2f64.powi(-s), 0.0);
    let id = CMat::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = |k: usize| C64::new(PADE13[k], 0.0);
    let u_inner = &a6 * (&a6 * b(13) + &a4 * b(11) + &a2 * b(9));
    let u = &a * (u_inner + &a6 * b(7) + &a4 * b(5) + &a2 * b(3) + &id * b(1));
    let v = &a6 * (&a6 * b(12) + &a4 * b(10) + &a2 * b(8)) + &a6 * b(6) + &a4 * b(4) + &a2 * b(2) + &id * b(0);
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).expect("Pade denominator is nonsingular");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// ‖A − A†‖ / max(‖A‖, tiny), Frobenius.
pub fn hermitian_deviation(a: &CMat) -> f64 {
    let d = (a - a.adjoint()).norm();
    let n = a.norm();
    if n == 0.0 {
        0.0
    } else {
        d / n
    }
}

pub fn check_hermitian(a: &CMat, tol: f64) -> Result<()> {
    let dev = hermitian_deviation(a);
    if dev > tol {
        Err(Error::NotHermitian { deviation: dev })
    } else {
        Ok(())
    }
}

/// Spectral norm (largest singular value).
pub fn operator_norm(a: &CMat) -> f64 {
    if a.nrows() == 1 && a.ncols() == 1 {
        return a[(0, 0)].norm();
    }
    a.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Eigenvalues of a Hermitian matrix in ascending order.
pub fn hermitian_eigenvalues(a: &CMat) -> Vec<f64> {
    let mut ev: Vec<f64> = if is_diagonal(a) {
        (0..a.nrows()).map(|i| a[(i, i)].re).collect()
    } else {
        SymmetricEigen::new(a.clone()).eigenvalues.iter().cloned().collect()
    };
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

/// f(A) for Hermitian A through its eigendecomposition.
pub fn hermitian_function(a: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let n = a.nrows();
    if is_diagonal(a) {
        return CMat::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(f(a[(i, i)].re), 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
    }
    let eig = SymmetricEigen::new(a.clone());
    let q = &eig.eigenvectors;
    let d = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            C64::new(f(eig.eigenvalues[i]), 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    q * d * q.adjoint()
}

/// Applies an l×l matrix to each point of a component-major field buffer.
pub fn apply_pointwise(m: &CMat, data: &mut [C64], n: usize, point: usize) {
    let l = m.nrows();
    let mut tmp = [C64::new(0.0, 0.0); 16];
    let mut heap;
    let v: &mut [C64] = if l <= 16 {
        &mut tmp[..l]
    } else {
        heap = vec![C64::new(0.0, 0.0); l];
        &mut heap
    };
    for (i, vi) in v.iter_mut().enumerate() {
        let mut s = C64::new(0.0, 0.0);
        for j in 0..l {
            s += m[(i, j)] * data[j * n + point];
        }
        *vi = s;
    }
    for (i, vi) in v.iter().enumerate() {
        data[i * n + point] = *vi;
    }
}
