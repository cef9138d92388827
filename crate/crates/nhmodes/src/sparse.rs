//! Compressed-row complex matrices for Fock-space operators.

use ndarray::Array2;

use crate::field::C64;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<C64>,
}

impl CsrMatrix {
    pub fn zeros(n: usize) -> Self {
        CsrMatrix { n, indptr: vec![0; n + 1], indices: vec![], data: vec![] }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![C64::new(1.0, 0.0); n])
    }

    pub fn diagonal(d: &[C64]) -> Self {
        Self::from_triplets(d.len(), d.iter().enumerate().map(|(i, &v)| (i, i, v)))
    }

    /// Duplicates are summed; exact zeros are dropped.
    pub fn from_triplets(n: usize, t: impl IntoIterator<Item = (usize, usize, C64)>) -> Self {
        let mut rows: Vec<Vec<(usize, C64)>> = vec![Vec::new(); n];
        for (r, c, v) in t {
            assert!(r < n && c < n, "entry ({r},{c}) outside {n}x{n}");
            rows[r].push((c, v));
        }
        Self::from_rows(n, rows)
    }

    fn from_rows(n: usize, rows: Vec<Vec<(usize, C64)>>) -> Self {
        let mut m = CsrMatrix { n, indptr: Vec::with_capacity(n + 1), indices: vec![], data: vec![] };
        m.indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *m.data.last_mut().unwrap() += v;
                } else {
                    m.indices.push(c);
                    m.data.push(v);
                    last = Some(c);
                }
            }
            m.indptr.push(m.indices.len());
        }
        m.prune();
        m
    }

    fn prune(&mut self) {
        let mut indptr = vec![0];
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.n {
            for p in self.indptr[r]..self.indptr[r + 1] {
                if self.data[p] != C64::new(0.0, 0.0) {
                    indices.push(self.indices[p]);
                    data.push(self.data[p]);
                }
            }
            indptr.push(indices.len());
        }
        self.indptr = indptr;
        self.indices = indices;
        self.data = data;
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        (self.indptr[r]..self.indptr[r + 1]).map(move |p| (self.indices[p], self.data[p]))
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.row(r).find(|e| e.0 == c).map(|e| e.1).unwrap_or(C64::new(0.0, 0.0))
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        (0..self.n).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn scaled(&self, a: C64) -> Self {
        let mut m = self.clone();
        m.data.iter_mut().for_each(|v| *v *= a);
        m.prune();
        m
    }

    /// self + a·other
    pub fn add_scaled(&self, a: C64, other: &CsrMatrix) -> Self {
        assert_eq!(self.n, other.n);
        let rows = (0..self.n)
            .map(|r| self.row(r).chain(other.row(r).map(|(c, v)| (c, a * v))).collect())
            .collect();
        Self::from_rows(self.n, rows)
    }

    pub fn add(&self, other: &CsrMatrix) -> Self {
        self.add_scaled(C64::new(1.0, 0.0), other)
    }

    pub fn sub(&self, other: &CsrMatrix) -> Self {
        self.add_scaled(C64::new(-1.0, 0.0), other)
    }

    pub fn matmul(&self, other: &CsrMatrix) -> Self {
        assert_eq!(self.n, other.n);
        let mut acc = vec![C64::new(0.0, 0.0); self.n];
        let mut mark = vec![false; self.n];
        let mut rows = Vec::with_capacity(self.n);
        for r in 0..self.n {
            let mut touched = Vec::new();
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if !mark[c] {
                        mark[c] = true;
                        touched.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            let row: Vec<(usize, C64)> = touched
                .into_iter()
                .map(|c| {
                    mark[c] = false;
                    (c, std::mem::replace(&mut acc[c], C64::new(0.0, 0.0)))
                })
                .collect();
            rows.push(row);
        }
        Self::from_rows(self.n, rows)
    }

    pub fn adjoint(&self) -> Self {
        Self::from_triplets(
            self.n,
            (0..self.n).flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v.conj())).collect::<Vec<_>>()),
        )
    }

    pub fn commutator(&self, other: &CsrMatrix) -> Self {
        self.matmul(other).sub(&other.matmul(self))
    }

    pub fn to_dense(&self) -> Array2<C64> {
        let mut d = Array2::zeros((self.n, self.n));
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                d[[r, c]] = v;
            }
        }
        d
    }

    /// Largest |entry| among rows and columns both in `keep`.
    pub fn max_abs_on(&self, keep: &[bool]) -> f64 {
        let mut m: f64 = 0.0;
        for r in (0..self.n).filter(|&r| keep[r]) {
            for (c, v) in self.row(r) {
                if keep[c] {
                    m = m.max(v.norm());
                }
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_dense(n: usize, seed: &[f64]) -> Array2<C64> {
        Array2::from_shape_fn((n, n), |(i, j)| {
            let k = (i * n + j) % seed.len();
            let v = seed[k] * ((i + 2 * j) as f64).sin();
            if (i + j) % 3 == 0 { c(0.0, 0.0) } else { c(v, seed[(k + 1) % seed.len()]) }
        })
    }

    fn from_dense(a: &Array2<C64>) -> CsrMatrix {
        CsrMatrix::from_triplets(a.nrows(), a.indexed_iter().map(|((i, j), &v)| (i, j, v)))
    }

    #[test]
    fn duplicates_sum_and_zeros_drop() {
        let m = CsrMatrix::from_triplets(2, [(0, 1, c(1.0, 0.0)), (0, 1, c(2.0, 0.0)), (1, 0, c(0.0, 0.0))]);
        assert_eq!(m.get(0, 1), c(3.0, 0.0));
        assert_eq!(m.nnz(), 1);
    }

    proptest! {
        #[test]
        fn products_match_dense(seed in proptest::collection::vec(-1.0..1.0f64, 7..20)) {
            let a = random_dense(6, &seed);
            let b = random_dense(6, &seed[1..]);
            let (sa, sb) = (from_dense(&a), from_dense(&b));
            let p = sa.matmul(&sb).to_dense();
            let q = a.dot(&b);
            prop_assert!(p.iter().zip(q.iter()).all(|(x, y)| (x - y).norm() < 1e-12));
            let h = sa.adjoint().to_dense();
            prop_assert!(h.indexed_iter().all(|((i, j), v)| (v - a[[j, i]].conj()).norm() == 0.0));
            let x: Vec<C64> = seed.iter().take(6).map(|&s| c(s, -s)).collect();
            let y = sa.matvec(&x);
            let yd = a.dot(&ndarray::Array1::from(x.clone()));
            prop_assert!(y.iter().zip(yd.iter()).all(|(p, q)| (p - q).norm() < 1e-12));
        }
    }
}
