//! Small dense helpers shared by the solvers.

use ndarray::{Array1, Array2, ArrayView1};
use ndarray_linalg::{Eig, Inverse};

use crate::error::{Error, Result};
use crate::field::C64;

pub fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

pub fn dotc(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm2(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

pub fn axpy(y: &mut [C64], a: C64, x: &[C64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

pub fn scale(x: &mut [C64], a: C64) {
    x.iter_mut().for_each(|v| *v *= a);
}

/// Orthogonalizes `w` against `basis` (two classical Gram-Schmidt passes) and
/// returns the projection coefficients and the remaining norm.
pub fn orthogonalize(basis: &[Vec<C64>], w: &mut [C64]) -> (Vec<C64>, f64) {
    let mut h = vec![zero(); basis.len()];
    for _ in 0..2 {
        let c: Vec<C64> = basis.iter().map(|b| dotc(b, w)).collect();
        for (b, ci) in basis.iter().zip(&c) {
            axpy(w, -*ci, b);
        }
        h.iter_mut().zip(&c).for_each(|(hi, ci)| *hi += ci);
    }
    (h, norm2(w))
}

/// Eigen-decomposition of a general complex matrix, sorted by descending modulus
/// (ties broken by argument) with unit-norm eigenvector columns.
pub fn eig_sorted(a: &Array2<C64>) -> Result<(Array1<C64>, Array2<C64>)> {
    let (vals, vecs) = a.eig()?;
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&i, &j| {
        let (a, b) = (vals[i], vals[j]);
        b.norm().total_cmp(&a.norm()).then(a.arg().total_cmp(&b.arg()))
    });
    let v = Array1::from_iter(idx.iter().map(|&i| vals[i]));
    let mut m = Array2::zeros(vecs.dim());
    for (c, &i) in idx.iter().enumerate() {
        let col = vecs.column(i);
        let n = col.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        m.column_mut(c).assign(&col.mapv(|x| x / n));
    }
    Ok((v, m))
}

pub fn inverse(a: &Array2<C64>) -> Result<Array2<C64>> {
    Ok(a.inv()?)
}

/// Hermitian-conjugate transpose.
pub fn adjoint(a: &Array2<C64>) -> Array2<C64> {
    a.t().mapv(|v| v.conj())
}

pub fn max_abs(a: &Array2<C64>) -> f64 {
    a.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

pub fn identity(n: usize) -> Array2<C64> {
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { C64::new(1.0, 0.0) } else { zero() })
}

pub fn col_norm(c: ArrayView1<C64>) -> f64 {
    c.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Smallest singular value of a small square matrix via the eigenvalues of AᴴA.
pub fn min_singular_value(a: &Array2<C64>) -> Result<f64> {
    let g = adjoint(a).dot(a);
    let (vals, _) = g.eig()?;
    Ok(vals.iter().map(|v| v.re.max(0.0)).fold(f64::INFINITY, f64::min).sqrt())
}

pub fn check_square(a: &Array2<C64>, what: &str) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::Dimension(format!("{what} must be square, got {r}x{c}")));
    }
    Ok(r)
}
