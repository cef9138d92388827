//! Dominant right eigenmodes of £ and adjoint modes of £†, paired and
//! biorthonormalized.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{inner_product, ComplexField, TransverseGrid, C64};
use crate::linalg::{self, axpy, dotc, norm2, orthogonalize, scale, zero};
use crate::optics::{dense_kernel, Direction, ResonatorSpec, RoundTripOperator};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const DEGENERACY_TOL: f64 = 1e-6;
pub const DEFECTIVE_TOL: f64 = 1e-6;

/// Anything that maps a flat sample vector linearly onto another of the same length.
pub trait LinearMap {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[C64]) -> Vec<C64>;

    fn to_dense(&self) -> Array2<C64> {
        let n = self.dim();
        let mut m = Array2::zeros((n, n));
        let mut e = vec![zero(); n];
        for j in 0..n {
            e[j] = C64::new(1.0, 0.0);
            for (i, v) in self.apply(&e).into_iter().enumerate() {
                m[[i, j]] = v;
            }
            e[j] = zero();
        }
        m
    }
}

impl LinearMap for RoundTripOperator {
    fn dim(&self) -> usize {
        self.grid.len()
    }
    fn apply(&self, x: &[C64]) -> Vec<C64> {
        self.apply_slice(x)
    }
    fn to_dense(&self) -> Array2<C64> {
        dense_kernel(self).expect("size checked by caller")
    }
}

impl LinearMap for Array2<C64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &[C64]) -> Vec<C64> {
        self.dot(&Array1::from(x.to_vec())).to_vec()
    }
    fn to_dense(&self) -> Array2<C64> {
        self.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Arnoldi,
    PowerDeflate,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarization {
    X,
    Y,
}

/// Eigenpairs of one operator, unit Euclidean norm vectors.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<C64>,
    pub vectors: Vec<Vec<C64>>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NhmMode {
    pub u: ComplexField,
    pub v: ComplexField,
    pub gamma: C64,
    /// Eigenvalue found for v under £†; equals conj(gamma) up to the solve tolerance.
    pub gamma_adjoint: C64,
    pub axial_index: u64,
    pub omega: f64,
    pub polarization: Polarization,
    pub transverse_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: SolveMethod,
    pub residuals_u: Vec<f64>,
    pub residuals_v: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeBasis {
    pub modes: Vec<NhmMode>,
    pub grid: TransverseGrid,
    pub spec: ResonatorSpec,
    pub solve_report: SolveReport,
}

impl ModeBasis {
    pub fn len(&self) -> usize {
        self.modes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
    pub fn gammas(&self) -> Vec<C64> {
        self.modes.iter().map(|m| m.gamma).collect()
    }
    /// Matrix of ⟨u_n, v_m⟩.
    pub fn cross_gram(&self) -> Result<Array2<C64>> {
        let n = self.len();
        let mut g = Array2::zeros((n, n));
        for (i, a) in self.modes.iter().enumerate() {
            for (j, b) in self.modes.iter().enumerate() {
                g[[i, j]] = inner_product(&a.u, &b.v)?;
            }
        }
        Ok(g)
    }
    pub fn biorthogonality_error(&self) -> Result<f64> {
        let g = self.cross_gram()?;
        Ok(linalg::max_abs(&(g - linalg::identity(self.len()))))
    }
}

fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
    let mut v: Vec<C64> =
        (0..n).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let s = norm2(&v);
    scale(&mut v, C64::new(1.0 / s, 0.0));
    v
}

fn direct_residual(op: &dyn LinearMap, lambda: C64, x: &[C64]) -> f64 {
    let mut r = op.apply(x);
    axpy(&mut r, -lambda, x);
    norm2(&r) / norm2(x)
}

/// Dense eigen-decomposition of the materialized operator.
pub fn dense_eigenpairs(op: &dyn LinearMap, count: usize) -> Result<EigenPairs> {
    let k = op.to_dense();
    let (vals, vecs) = linalg::eig_sorted(&k)?;
    let mut out = EigenPairs { values: vec![], vectors: vec![], residuals: vec![], iterations: 1 };
    for i in 0..count.min(vals.len()) {
        let x = vecs.column(i).to_vec();
        let r = direct_residual(&k, vals[i], &x);
        out.values.push(vals[i]);
        out.vectors.push(x);
        out.residuals.push(r);
    }
    Ok(out)
}

/// Krylov-Schur style restarted Arnoldi for the `count` largest-modulus eigenvalues.
pub fn arnoldi_eigenpairs(
    op: &dyn LinearMap,
    count: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<EigenPairs> {
    let n = op.dim();
    let m = (4 * count).max(count + 40).min(n - 1);
    let keep = (count + (m - count) / 2).min(m - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<C64>> = vec![random_unit(n, &mut rng)];
    let mut h = Array2::<C64>::zeros((m + 1, m));
    let mut k = 0usize;
    let mut best = vec![f64::INFINITY; count];
    let mut hscale = 0.0f64;

    for iter in 1..=max_iter {
        for j in k..m {
            let mut w = op.apply(&basis[j]);
            let (c, beta) = orthogonalize(&basis[..=j], &mut w);
            for (i, ci) in c.into_iter().enumerate() {
                h[[i, j]] = ci;
            }
            hscale = hscale.max(norm2(&op.apply(&basis[j])));
            if beta <= 1e-13 * hscale.max(1e-300) {
                // invariant subspace: continue with a fresh orthogonal direction
                w = random_unit(n, &mut rng);
                let (_, b) = orthogonalize(&basis[..=j], &mut w);
                scale(&mut w, C64::new(1.0 / b, 0.0));
                h[[j + 1, j]] = zero();
            } else {
                h[[j + 1, j]] = C64::new(beta, 0.0);
                scale(&mut w, C64::new(1.0 / beta, 0.0));
            }
            basis.push(w);
        }
        let hm = h.slice(ndarray::s![..m, ..m]).to_owned();
        let (theta, y) = linalg::eig_sorted(&hm)?;
        let last = h.row(m).to_owned();
        let est: Vec<f64> =
            (0..m).map(|i| last.iter().zip(y.column(i)).map(|(a, b)| a * b).sum::<C64>().norm()).collect();
        for i in 0..count {
            best[i] = best[i].min(est[i]);
        }
        if est[..count].iter().all(|&r| r <= tol * 0.1) || iter == max_iter {
            let mut out = EigenPairs { values: vec![], vectors: vec![], residuals: vec![], iterations: iter };
            for i in 0..count {
                let mut x = vec![zero(); n];
                for (b, c) in basis[..m].iter().zip(y.column(i)) {
                    axpy(&mut x, *c, b);
                }
                let s = norm2(&x);
                scale(&mut x, C64::new(1.0 / s, 0.0));
                out.residuals.push(direct_residual(op, theta[i], &x));
                out.values.push(theta[i]);
                out.vectors.push(x);
            }
            if out.residuals.iter().all(|&r| r <= tol) {
                return Ok(out);
            }
            if iter == max_iter {
                let worst = out.residuals.iter().cloned().fold(0.0, f64::max);
                return Err(Error::Convergence { iterations: iter, worst_residual: worst, residuals: out.residuals });
            }
        }
        // restart on the span of the `keep` leading Ritz vectors
        let mut q: Vec<Vec<C64>> = Vec::with_capacity(keep);
        for i in 0..keep {
            let mut c = y.column(i).to_vec();
            let (_, b) = orthogonalize(&q, &mut c);
            if b < 1e-10 {
                continue;
            }
            scale(&mut c, C64::new(1.0 / b, 0.0));
            q.push(c);
        }
        let kk = q.len();
        let qm = Array2::from_shape_fn((m, kk), |(r, c)| q[c][r]);
        let t = linalg::adjoint(&qm).dot(&hm).dot(&qm);
        let b = last.dot(&qm);
        let mut new_basis: Vec<Vec<C64>> = Vec::with_capacity(m + 1);
        for c in 0..kk {
            let mut x = vec![zero(); n];
            for (bv, coef) in basis[..m].iter().zip(qm.column(c)) {
                axpy(&mut x, *coef, bv);
            }
            new_basis.push(x);
        }
        new_basis.push(basis.swap_remove(m));
        basis = new_basis;
        h.fill(zero());
        h.slice_mut(ndarray::s![..kk, ..kk]).assign(&t);
        h.row_mut(kk).slice_mut(ndarray::s![..kk]).assign(&b);
        k = kk;
    }
    unreachable!("loop returns on the last iteration")
}

/// Block power iteration with orthogonal deflation and Rayleigh-Ritz extraction.
pub fn power_deflate_eigenpairs(
    op: &dyn LinearMap,
    count: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<EigenPairs> {
    let n = op.dim();
    let p = (count + 4).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<Vec<C64>> = Vec::with_capacity(p);
    while x.len() < p {
        let mut v = random_unit(n, &mut rng);
        let (_, b) = orthogonalize(&x, &mut v);
        scale(&mut v, C64::new(1.0 / b, 0.0));
        x.push(v);
    }
    let mut last_res = vec![f64::INFINITY; count];
    for iter in 1..=max_iter {
        let ax: Vec<Vec<C64>> = x.iter().map(|v| op.apply(v)).collect();
        let hm = Array2::from_shape_fn((p, p), |(i, j)| dotc(&x[i], &ax[j]));
        let (theta, z) = linalg::eig_sorted(&hm)?;
        let mut out = EigenPairs { values: vec![], vectors: vec![], residuals: vec![], iterations: iter };
        for i in 0..count {
            let mut u = vec![zero(); n];
            let mut au = vec![zero(); n];
            for j in 0..p {
                axpy(&mut u, z[[j, i]], &x[j]);
                axpy(&mut au, z[[j, i]], &ax[j]);
            }
            let s = norm2(&u);
            scale(&mut u, C64::new(1.0 / s, 0.0));
            scale(&mut au, C64::new(1.0 / s, 0.0));
            axpy(&mut au, -theta[i], &u);
            out.residuals.push(norm2(&au));
            out.values.push(theta[i]);
            out.vectors.push(u);
        }
        if out.residuals.iter().all(|&r| r <= tol) {
            return Ok(out);
        }
        last_res = out.residuals;
        let mut next: Vec<Vec<C64>> = Vec::with_capacity(p);
        for mut w in ax {
            let (_, b) = orthogonalize(&next, &mut w);
            if b <= 1e-14 {
                w = random_unit(n, &mut rng);
                let (_, b2) = orthogonalize(&next, &mut w);
                scale(&mut w, C64::new(1.0 / b2, 0.0));
            } else {
                scale(&mut w, C64::new(1.0 / b, 0.0));
            }
            next.push(w);
        }
        x = next;
    }
    let worst = last_res.iter().cloned().fold(0.0, f64::max);
    Err(Error::Convergence { iterations: max_iter, worst_residual: worst, residuals: last_res })
}

pub fn eigenpairs(
    op: &dyn LinearMap,
    count: usize,
    method: SolveMethod,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<EigenPairs> {
    match method {
        SolveMethod::Dense => dense_eigenpairs(op, count),
        SolveMethod::Arnoldi => arnoldi_eigenpairs(op, count, tol, max_iter, seed),
        SolveMethod::PowerDeflate => power_deflate_eigenpairs(op, count, tol, max_iter, seed),
    }
}

fn to_field(grid: TransverseGrid, x: Vec<C64>, z: f64) -> Result<ComplexField> {
    let mut f = ComplexField::from_vec(grid, x)?.with_z(z);
    let s = f.norm();
    f.scale_mut(C64::new(1.0 / s, 0.0));
    Ok(f)
}

/// Pairs each right eigenpair with the adjoint eigenpair whose eigenvalue is
/// closest to its conjugate; near-ties go to the largest |⟨u, v⟩|.
fn pair_modes(
    grid: TransverseGrid,
    z: f64,
    right: EigenPairs,
    left: EigenPairs,
    tol: f64,
) -> Result<Vec<(ComplexField, C64, f64, ComplexField, C64, f64)>> {
    let us: Vec<ComplexField> =
        right.vectors.into_iter().map(|x| to_field(grid, x, z)).collect::<Result<_>>()?;
    let vs: Vec<ComplexField> =
        left.vectors.into_iter().map(|x| to_field(grid, x, z)).collect::<Result<_>>()?;
    let mut used = vec![false; vs.len()];
    let mut out = Vec::with_capacity(us.len());
    for (i, u) in us.into_iter().enumerate() {
        let g = right.values[i];
        let target = g.conj();
        let dmin = (0..vs.len())
            .filter(|&j| !used[j])
            .map(|j| (left.values[j] - target).norm())
            .fold(f64::INFINITY, f64::min);
        let window = dmin + DEGENERACY_TOL * g.norm().max(1e-300);
        let mut pick = None;
        let mut best_ov = -1.0;
        for j in 0..vs.len() {
            if used[j] || (left.values[j] - target).norm() > window {
                continue;
            }
            let ov = inner_product(&u, &vs[j])?.norm();
            if ov > best_ov {
                best_ov = ov;
                pick = Some(j);
            }
        }
        let j = pick.ok_or_else(|| Error::Consistency("no adjoint mode left to pair".into()))?;
        let mismatch = (left.values[j] - target).norm();
        if mismatch > 100.0 * tol.max(1e-12) + DEGENERACY_TOL * g.norm() {
            return Err(Error::Consistency(format!(
                "adjoint eigenvalue {} does not match conj({g}) (mismatch {mismatch:.2e})",
                left.values[j]
            )));
        }
        used[j] = true;
        out.push((u, g, right.residuals[i], vs[j].clone(), left.values[j], left.residuals[j]));
    }
    Ok(out)
}

/// Leading `count` eigenpairs of £ and the matching eigenpairs of £†.
/// Fields come back with unit norm; call [`biorthonormalize`] next.
pub fn solve_modes(
    op: &RoundTripOperator,
    count: usize,
    method: SolveMethod,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<ModeBasis> {
    let n = op.grid.len();
    if count == 0 || count > n / 4 {
        return Err(Error::Validation {
            key: "count".into(),
            reason: format!("must lie in 1..={}", n / 4),
        });
    }
    if method == SolveMethod::Dense && n > crate::optics::DENSE_CAP {
        return Err(Error::Size(format!("dense solve of size {n} exceeds cap {}", crate::optics::DENSE_CAP)));
    }
    let fwd = op.with_direction(Direction::Forward);
    let adj = op.with_direction(Direction::Adjoint);
    let extra = (count + 2).min(n / 4).max(count);
    let right = eigenpairs(&fwd, count, method, tol, max_iter, seed)?;
    let left = eigenpairs(&adj, extra, method, tol, max_iter, seed.wrapping_add(1))?;
    let iterations = right.iterations.max(left.iterations);
    let z = op.spec.reference_plane_z;
    let pairs = pair_modes(op.grid, z, right, left, tol)?;
    let mut report =
        SolveReport { method, residuals_u: vec![], residuals_v: vec![], iterations };
    let modes = pairs
        .into_iter()
        .enumerate()
        .map(|(i, (u, g, ru, v, gv, rv))| {
            report.residuals_u.push(ru);
            report.residuals_v.push(rv);
            NhmMode {
                u,
                v,
                gamma: g,
                gamma_adjoint: gv,
                axial_index: 0,
                omega: 0.0,
                polarization: Polarization::X,
                transverse_index: i,
            }
        })
        .collect();
    Ok(ModeBasis { modes, grid: op.grid, spec: op.spec, solve_report: report })
}

/// Dense solve that keeps, for each reference field, the right eigenvector with
/// the largest overlap. Meant for lossless cavities where |γ| does not rank modes.
pub fn modes_matching(op: &RoundTripOperator, references: &[ComplexField]) -> Result<ModeBasis> {
    let n = op.grid.len();
    if n > crate::optics::DENSE_CAP {
        return Err(Error::Size(format!("dense solve of size {n} exceeds cap {}", crate::optics::DENSE_CAP)));
    }
    let fwd = op.with_direction(Direction::Forward);
    let adj = op.with_direction(Direction::Adjoint);
    let all_r = dense_eigenpairs(&fwd, n)?;
    let all_l = dense_eigenpairs(&adj, n)?;
    let z = op.spec.reference_plane_z;
    let mut right = EigenPairs { values: vec![], vectors: vec![], residuals: vec![], iterations: 1 };
    let mut left = right.clone();
    let mut taken_r = vec![false; n];
    let mut taken_l = vec![false; n];
    for r in references {
        let rv = r.to_vec();
        let pick = |vecs: &[Vec<C64>], taken: &[bool]| {
            (0..n)
                .filter(|&j| !taken[j])
                .max_by(|&a, &b| dotc(&rv, &vecs[a]).norm().total_cmp(&dotc(&rv, &vecs[b]).norm()))
                .expect("fewer references than samples")
        };
        let i = pick(&all_r.vectors, &taken_r);
        taken_r[i] = true;
        let j = pick(&all_l.vectors, &taken_l);
        taken_l[j] = true;
        right.values.push(all_r.values[i]);
        right.vectors.push(all_r.vectors[i].clone());
        right.residuals.push(all_r.residuals[i]);
        left.values.push(all_l.values[j]);
        left.vectors.push(all_l.vectors[j].clone());
        left.residuals.push(all_l.residuals[j]);
    }
    let pairs = pair_modes(op.grid, z, right, left, 1e-10)?;
    let mut report = SolveReport { method: SolveMethod::Dense, residuals_u: vec![], residuals_v: vec![], iterations: 1 };
    let modes = pairs
        .into_iter()
        .enumerate()
        .map(|(i, (u, g, ru, v, gv, rv))| {
            report.residuals_u.push(ru);
            report.residuals_v.push(rv);
            NhmMode {
                u,
                v,
                gamma: g,
                gamma_adjoint: gv,
                axial_index: 0,
                omega: 0.0,
                polarization: Polarization::X,
                transverse_index: i,
            }
        })
        .collect();
    Ok(ModeBasis { modes, grid: op.grid, spec: op.spec, solve_report: report })
}

fn clusters(gammas: &[C64]) -> Vec<Vec<usize>> {
    let n = gammas.len();
    let mut label: Vec<usize> = (0..n).collect();
    fn root(l: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while l[r] != r {
            r = l[r];
        }
        l[i] = r;
        r
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (gammas[i] - gammas[j]).norm() <= DEGENERACY_TOL * gammas[i].norm() {
                let (a, b) = (root(&mut label, i), root(&mut label, j));
                label[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut seen = std::collections::BTreeMap::new();
    for i in 0..n {
        let r = root(&mut label, i);
        let g = *seen.entry(r).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

/// Unit-norm u, ⟨u_n, v_m⟩ = δ_nm, max-modulus sample of u real positive.
pub fn biorthonormalize(basis: &ModeBasis) -> Result<ModeBasis> {
    let mut out = basis.clone();
    let gammas = basis.gammas();
    for group in clusters(&gammas) {
        for &i in &group {
            let m = &mut out.modes[i];
            let s = m.u.norm();
            m.u.scale_mut(C64::new(1.0 / s, 0.0));
            let t = m.v.norm();
            m.v.scale_mut(C64::new(1.0 / t, 0.0));
        }
        let p = group.len();
        let g = Array2::from_shape_fn((p, p), |(a, b)| {
            inner_product(&out.modes[group[a]].u, &out.modes[group[b]].v).unwrap()
        });
        if p == 1 {
            let s = g[[0, 0]];
            if s.norm() < DEFECTIVE_TOL {
                return Err(Error::NearDefective { index: group[0], overlap: s.norm() });
            }
            out.modes[group[0]].v.scale_mut(s.inv());
        } else {
            let smin = linalg::min_singular_value(&g)?;
            if smin < DEFECTIVE_TOL {
                return Err(Error::NearDefective { index: group[0], overlap: smin });
            }
            let x = linalg::inverse(&g)?;
            let old: Vec<ComplexField> = group.iter().map(|&i| out.modes[i].v.clone()).collect();
            for (b, &i) in group.iter().enumerate() {
                let mut acc = ComplexField::zeros(out.grid).with_z(old[0].z_label);
                for (a, f) in old.iter().enumerate() {
                    acc = acc.axpy(x[[a, b]], f)?;
                }
                out.modes[i].v = acc;
            }
        }
        for &i in &group {
            let m = &mut out.modes[i];
            let (_, peak) = m.u.argmax_abs();
            let ph = C64::from_polar(1.0, -peak.arg());
            m.u.scale_mut(ph);
            m.v.scale_mut(ph);
        }
    }
    Ok(out)
}

/// Stamps transverse rank θ_n, axial index, ω_n = c·N·π/l and polarization.
pub fn assign_labels(basis: &ModeBasis, l: f64, n_axial: u64, polarization: Polarization) -> ModeBasis {
    let mut out = basis.clone();
    let omega = n_axial as f64 * std::f64::consts::PI * SPEED_OF_LIGHT / l;
    for (i, m) in out.modes.iter_mut().enumerate() {
        m.transverse_index = i;
        m.axial_index = n_axial;
        m.omega = omega;
        m.polarization = polarization;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::hermite_gaussian;
    use crate::optics::ResonatorSpec;

    fn small_unstable() -> RoundTripOperator {
        let a = 1.0e-3;
        let lam = 1.0e-6;
        let l = 0.75 * a * a / (5.0 * lam);
        let spec = ResonatorSpec::confocal_unstable(2.0, l, a, lam);
        let grid = TransverseGrid::strip(256, 10.0 * a / 256.0, 0.15).unwrap();
        RoundTripOperator::new(spec, grid, Direction::Forward).unwrap()
    }

    #[test]
    fn arnoldi_matches_dense_on_small_strip() {
        let op = small_unstable();
        let d = dense_eigenpairs(&op, 4).unwrap();
        let a = arnoldi_eigenpairs(&op, 4, 1e-12, 200, 7).unwrap();
        for i in 0..4 {
            assert!((d.values[i] - a.values[i]).norm() < 1e-9, "{} {}", d.values[i], a.values[i]);
            assert!(a.residuals[i] <= 1e-12);
        }
    }

    #[test]
    fn power_deflate_finds_dominant_pair() {
        let op = small_unstable();
        let d = dense_eigenpairs(&op, 2).unwrap();
        let p = power_deflate_eigenpairs(&op, 2, 1e-9, 5000, 3).unwrap();
        for i in 0..2 {
            assert!((d.values[i] - p.values[i]).norm() < 1e-8);
        }
    }

    #[test]
    fn solved_modes_are_biorthonormal_and_deterministic() {
        let op = small_unstable();
        let raw = solve_modes(&op, 4, SolveMethod::Arnoldi, 1e-11, 300, 11).unwrap();
        let b = biorthonormalize(&raw).unwrap();
        assert!(b.biorthogonality_error().unwrap() <= 1e-8);
        for m in &b.modes {
            assert!((inner_product(&m.u, &m.u).unwrap() - 1.0).norm() < 1e-12);
            let (_, peak) = m.u.argmax_abs();
            assert!(peak.im.abs() < 1e-14 && peak.re > 0.0);
            assert!((m.gamma_adjoint - m.gamma.conj()).norm() < 1e-9);
            assert!(m.gamma.norm() < 1.0);
        }
        let again = biorthonormalize(&solve_modes(&op, 4, SolveMethod::Arnoldi, 1e-11, 300, 11).unwrap()).unwrap();
        assert_eq!(b.gammas(), again.gammas());
    }

    #[test]
    fn residuals_reverified_by_direct_application() {
        let op = small_unstable();
        let b = solve_modes(&op, 3, SolveMethod::Arnoldi, 1e-11, 300, 5).unwrap();
        for m in &b.modes {
            let lu = crate::optics::round_trip(&m.u, &op).unwrap();
            let r = lu.axpy(-m.gamma, &m.u).unwrap().norm() / m.u.norm();
            assert!(r <= 1e-11);
        }
    }

    #[test]
    fn jordan_block_is_near_defective() {
        // two-sample toy with £ = [[1, 1], [0, 1]]
        let grid = TransverseGrid::strip(2, 1.0, 0.0).unwrap();
        let j = Array2::from_shape_vec((2, 2), vec![C64::new(1.0, 0.0), C64::new(1.0, 0.0), zero(), C64::new(1.0, 0.0)]).unwrap();
        let d = dense_eigenpairs(&j, 1).unwrap();
        let lhs = linalg::adjoint(&j);
        let dl = dense_eigenpairs(&lhs, 1).unwrap();
        assert!(d.values[0].norm() > 0.99 && dl.values[0].norm() > 0.99);
        let spec = ResonatorSpec::half_symmetric_stable(1.0, 3.0, 1.0);
        let basis = ModeBasis {
            modes: vec![NhmMode {
                u: ComplexField::from_vec(grid, d.vectors[0].clone()).unwrap(),
                v: ComplexField::from_vec(grid, dl.vectors[0].clone()).unwrap(),
                gamma: d.values[0],
                gamma_adjoint: dl.values[0],
                axial_index: 0,
                omega: 0.0,
                polarization: Polarization::X,
                transverse_index: 0,
            }],
            grid,
            spec,
            solve_report: SolveReport { method: SolveMethod::Dense, residuals_u: vec![], residuals_v: vec![], iterations: 1 },
        };
        assert!(matches!(biorthonormalize(&basis), Err(Error::NearDefective { .. })));
    }

    #[test]
    fn degenerate_cluster_is_block_biorthonormalized() {
        // diagonal non-normal map with a doubly degenerate leading eigenvalue
        let grid = TransverseGrid::strip(8, 1.0, 0.0).unwrap();
        let mut a = Array2::<C64>::zeros((8, 8));
        for i in 0..8 {
            a[[i, i]] = C64::new(0.1 * i as f64, 0.0);
        }
        a[[0, 0]] = C64::new(0.9, 0.0);
        a[[1, 1]] = C64::new(0.9, 0.0);
        a[[0, 1]] = zero();
        a[[2, 0]] = C64::new(0.3, 0.0);
        let s = Array2::from_shape_fn((8, 8), |(i, j)| C64::new(if i == j { 1.0 } else { 0.1 / (1.0 + (i + j) as f64) }, 0.05 * (i as f64 - j as f64)));
        let m = s.dot(&a).dot(&linalg::inverse(&s).unwrap());
        let r = dense_eigenpairs(&m, 2).unwrap();
        let l = dense_eigenpairs(&linalg::adjoint(&m), 2).unwrap();
        let spec = ResonatorSpec::half_symmetric_stable(1.0, 3.0, 1.0);
        let mk = |i: usize| NhmMode {
            u: to_field(grid, r.vectors[i].clone(), 0.0).unwrap(),
            v: to_field(grid, l.vectors[1 - i].clone(), 0.0).unwrap(),
            gamma: r.values[i],
            gamma_adjoint: l.values[1 - i],
            axial_index: 0,
            omega: 0.0,
            polarization: Polarization::X,
            transverse_index: i,
        };
        let basis = ModeBasis {
            modes: vec![mk(0), mk(1)],
            grid,
            spec,
            solve_report: SolveReport { method: SolveMethod::Dense, residuals_u: vec![], residuals_v: vec![], iterations: 1 },
        };
        let b = biorthonormalize(&basis).unwrap();
        assert!(b.biorthogonality_error().unwrap() < 1e-10);
    }

    #[test]
    fn labels_follow_axial_formula() {
        let op = small_unstable();
        let b = solve_modes(&op, 2, SolveMethod::Dense, 1e-10, 1, 0).unwrap();
        let lab = assign_labels(&b, 1.0, 1_000_000, Polarization::Y);
        let expect = 1_000_000f64 * std::f64::consts::PI * SPEED_OF_LIGHT;
        assert_eq!(lab.modes[0].omega, expect);
        assert_eq!(lab.modes[0].omega, lab.modes[1].omega);
        assert_ne!(lab.modes[0].transverse_index, lab.modes[1].transverse_index);
        assert_eq!(lab.modes[1].polarization, Polarization::Y);
    }

    #[test]
    fn count_bounds_checked() {
        let op = small_unstable();
        assert!(solve_modes(&op, 0, SolveMethod::Dense, 1e-10, 1, 0).is_err());
        assert!(solve_modes(&op, 65, SolveMethod::Dense, 1e-10, 1, 0).is_err());
    }

    #[test]
    fn unitary_limit_gives_coincident_modes() {
        let lam = 1.0e-6;
        let l = 0.2;
        let spec = ResonatorSpec::half_symmetric_stable(l, 3.0 * l, lam);
        let zr = (l * (3.0 * l - l)).sqrt();
        let w0 = (2.0 * zr / spec.wavenumber).sqrt();
        let grid = TransverseGrid::strip(128, 20.0 * w0 / 128.0, 0.0).unwrap();
        let op = RoundTripOperator::new(spec, grid, Direction::Forward).unwrap();
        let d = dense_eigenpairs(&op, 128).unwrap();
        assert!(d.values.iter().all(|g| (g.norm() - 1.0).abs() < 1e-8));
        let refs: Vec<_> = (0..3).map(|o| hermite_gaussian(&grid, o, 0, w0).unwrap()).collect();
        let b = biorthonormalize(&modes_matching(&op, &refs).unwrap()).unwrap();
        for (m, r) in b.modes.iter().zip(&refs) {
            assert!(inner_product(r, &m.u).unwrap().norm() > 1.0 - 1e-6);
            assert!(m.u.max_abs_diff(&m.v).unwrap() < 1e-6);
        }
    }
}
