//! Truncated Fock spaces, NHM ladder operators built from true-mode operators,
//! and brute-force checks of their commutators, Hamiltonians and eigenstates.
//! ħ = 1 throughout.

use std::collections::HashMap;

use ndarray::Array2;
use ndarray_linalg::Eig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eigen::ModeBasis;
use crate::error::{Error, Result};
use crate::field::{inner_product, C64};
use crate::linalg;
use crate::sparse::CsrMatrix;

pub const FOCK_CAP: usize = 200_000;
pub const ALGEBRA_TOL: f64 = 1e-12;

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

fn binomial(n: u64, k: u64) -> u128 {
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

/// Occupation-number basis with total photons ≤ n_max. Modes 0..n_true_right are
/// the right-travelling k, the next n_true_left are their left partners k*.
#[derive(Debug, Clone)]
pub struct FockRep {
    pub n_true_right: usize,
    pub n_true_left: usize,
    pub n_max: usize,
    pub states: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
    lowering: Vec<CsrMatrix>,
    raising: Vec<CsrMatrix>,
}

impl FockRep {
    pub fn dim(&self) -> usize {
        self.states.len()
    }
    pub fn n_modes(&self) -> usize {
        self.n_true_right + self.n_true_left
    }
    pub fn photons(&self, i: usize) -> usize {
        self.states[i].iter().map(|&x| x as usize).sum()
    }
    pub fn state_index(&self, occ: &[u8]) -> Option<usize> {
        self.index.get(occ).copied()
    }
    /// States on which ladder commutators are exact.
    pub fn guarded(&self) -> Vec<bool> {
        self.below(self.n_max)
    }
    /// Mask of states with fewer than `p` photons.
    pub fn below(&self, p: usize) -> Vec<bool> {
        (0..self.dim()).map(|i| self.photons(i) < p).collect()
    }
    pub fn vacuum(&self) -> Vec<C64> {
        let mut v = vec![c(0.0); self.dim()];
        v[0] = c(1.0);
        v
    }
    /// a_k for right modes.
    pub fn a(&self, k: usize) -> &CsrMatrix {
        &self.lowering[k]
    }
    pub fn a_dag(&self, k: usize) -> &CsrMatrix {
        &self.raising[k]
    }
    /// a_{k*} for left modes.
    pub fn a_left(&self, k: usize) -> &CsrMatrix {
        &self.lowering[self.n_true_right + k]
    }
    pub fn a_left_dag(&self, k: usize) -> &CsrMatrix {
        &self.raising[self.n_true_right + k]
    }
}

pub fn fock_dimension(n_modes: usize, n_max: usize) -> u128 {
    binomial((n_modes + n_max) as u64, n_max as u64)
}

pub fn build_fock(n_true_right: usize, n_true_left: usize, n_max: usize) -> Result<FockRep> {
    build_fock_capped(n_true_right, n_true_left, n_max, FOCK_CAP)
}

pub fn build_fock_capped(n_true_right: usize, n_true_left: usize, n_max: usize, cap: usize) -> Result<FockRep> {
    if n_max < 2 {
        return Err(Error::Validation { key: "n_max".into(), reason: "must be at least 2".into() });
    }
    if n_max > u8::MAX as usize {
        return Err(Error::Validation { key: "n_max".into(), reason: "at most 255".into() });
    }
    let modes = n_true_right + n_true_left;
    if modes == 0 {
        return Err(Error::Validation { key: "n_true".into(), reason: "need at least one mode".into() });
    }
    let dim = fock_dimension(modes, n_max);
    if dim > cap as u128 {
        return Err(Error::Size(format!("Fock dimension {dim} exceeds cap {cap}")));
    }
    let mut states: Vec<Vec<u8>> = Vec::with_capacity(dim as usize);
    for total in 0..=n_max {
        fill(&mut vec![0u8; modes], 0, total, &mut states);
    }
    let index: HashMap<Vec<u8>, usize> = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let lowering: Vec<CsrMatrix> = (0..modes)
        .map(|k| {
            CsrMatrix::from_triplets(
                states.len(),
                states.iter().enumerate().filter(|(_, s)| s[k] > 0).map(|(j, s)| {
                    let mut t = s.clone();
                    t[k] -= 1;
                    (index[&t], j, c((s[k] as f64).sqrt()))
                }),
            )
        })
        .collect();
    let raising = lowering.iter().map(|a| a.adjoint()).collect();
    Ok(FockRep { n_true_right, n_true_left, n_max, states, index, lowering, raising })
}

/// All occupations of modes pos.. summing to exactly `left`, in descending lexicographic order.
fn fill(cur: &mut Vec<u8>, pos: usize, left: usize, out: &mut Vec<Vec<u8>>) {
    if pos == cur.len() - 1 {
        cur[pos] = left as u8;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for n in (0..=left).rev() {
        cur[pos] = n as u8;
        fill(cur, pos + 1, left - n, out);
    }
    cur[pos] = 0;
}

fn combo(coeffs: impl Iterator<Item = C64>, ops: impl Iterator<Item = CsrMatrix>, dim: usize) -> CsrMatrix {
    coeffs.zip(ops).fold(CsrMatrix::zeros(dim), |acc, (w, op)| acc.add_scaled(w, &op))
}

/// Families of NHM ladder operators, indexed [family][n].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    A,
    ASharp,
    B,
    BSharp,
    ADag,
    ASharpDag,
    BDag,
    BSharpDag,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::A,
        Family::ASharp,
        Family::B,
        Family::BSharp,
        Family::ADag,
        Family::ASharpDag,
        Family::BDag,
        Family::BSharpDag,
    ];
    pub fn symbol(self) -> &'static str {
        match self {
            Family::A => "A",
            Family::ASharp => "A#",
            Family::B => "B",
            Family::BSharp => "B#",
            Family::ADag => "A†",
            Family::ASharpDag => "A#†",
            Family::BDag => "B†",
            Family::BSharpDag => "B#†",
        }
    }
    fn is_a(self) -> bool {
        matches!(self, Family::A | Family::ASharp | Family::ADag | Family::ASharpDag)
    }
    fn lowers(self) -> bool {
        matches!(self, Family::A | Family::ASharpDag | Family::B | Family::BSharpDag)
    }
}

#[derive(Debug, Clone)]
pub struct NhmOperatorSet {
    pub gamma: Array2<C64>,
    pub lambda: Array2<C64>,
    pub omega: Vec<f64>,
    pub ops: HashMap<Family, Vec<CsrMatrix>>,
}

impl NhmOperatorSet {
    pub fn len(&self) -> usize {
        self.gamma.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn op(&self, f: Family, n: usize) -> &CsrMatrix {
        &self.ops[&f][n]
    }
    /// C = ΛΛ†, the Gram matrix of the u functions.
    pub fn c_matrix(&self) -> Array2<C64> {
        self.lambda.dot(&linalg::adjoint(&self.lambda))
    }
    /// D = ΓΓ†, the Gram matrix of the v functions.
    pub fn d_matrix(&self) -> Array2<C64> {
        self.gamma.dot(&linalg::adjoint(&self.gamma))
    }
}

/// Biorthogonality defect max|ΛΓ† − E|, plus max|Γ†Λ − E| when square.
pub fn biorthogonality_defect(gamma: &Array2<C64>, lambda: &Array2<C64>) -> f64 {
    let n = gamma.nrows();
    let mut d = linalg::max_abs(&(lambda.dot(&linalg::adjoint(gamma)) - linalg::identity(n)));
    if gamma.is_square() {
        d = d.max(linalg::max_abs(&(linalg::adjoint(gamma).dot(lambda) - linalg::identity(n))));
    }
    d
}

pub fn build_nhm_ops(fock: &FockRep, gamma: &Array2<C64>, lambda: &Array2<C64>, omega: &[f64]) -> Result<NhmOperatorSet> {
    let (n, kt) = gamma.dim();
    if lambda.dim() != (n, kt) || omega.len() != n {
        return Err(Error::Dimension(format!(
            "Γ {:?}, Λ {:?}, ω {} are inconsistent",
            gamma.dim(),
            lambda.dim(),
            omega.len()
        )));
    }
    if kt != fock.n_true_right || fock.n_true_left != fock.n_true_right {
        return Err(Error::Dimension(format!(
            "need {kt} right and {kt} left true modes, Fock space has {} and {}",
            fock.n_true_right, fock.n_true_left
        )));
    }
    let scale = (linalg::max_abs(gamma) * linalg::max_abs(lambda) * kt as f64).max(1.0);
    let defect = biorthogonality_defect(gamma, lambda);
    if defect > ALGEBRA_TOL * scale {
        return Err(Error::Algebra(format!("Γ†Λ differs from E by {defect:.3e}")));
    }
    let dim = fock.dim();
    let build = |coef: &dyn Fn(usize, usize) -> C64, op: &dyn Fn(usize) -> CsrMatrix| -> Vec<CsrMatrix> {
        (0..n).map(|i| combo((0..kt).map(|k| coef(i, k)), (0..kt).map(op), dim)).collect()
    };
    let g = |i: usize, k: usize| gamma[[i, k]];
    let gc = |i: usize, k: usize| gamma[[i, k]].conj();
    let l = |i: usize, k: usize| lambda[[i, k]];
    let lc = |i: usize, k: usize| lambda[[i, k]].conj();
    let a = |k: usize| fock.a(k).clone();
    let ad = |k: usize| fock.a_dag(k).clone();
    let al = |k: usize| fock.a_left(k).clone();
    let ald = |k: usize| fock.a_left_dag(k).clone();
    let mut ops = HashMap::new();
    ops.insert(Family::A, build(&g, &a));
    ops.insert(Family::ASharp, build(&lc, &ad));
    ops.insert(Family::B, build(&lc, &al));
    ops.insert(Family::BSharp, build(&g, &ald));
    ops.insert(Family::ASharpDag, build(&l, &a));
    ops.insert(Family::ADag, build(&gc, &ad));
    ops.insert(Family::BSharpDag, build(&gc, &al));
    ops.insert(Family::BDag, build(&l, &ald));
    Ok(NhmOperatorSet { gamma: gamma.clone(), lambda: lambda.clone(), omega: omega.to_vec(), ops })
}

/// Random well-conditioned Γ and Λ = (Γ†)⁻¹.
pub fn random_biorthogonal_pair(n: usize, seed: u64) -> Result<(Array2<C64>, Array2<C64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Array2::from_shape_fn((n, n), |(i, j)| {
        let z = C64::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
        if i == j { z + c(1.0) } else { z }
    });
    let lambda = linalg::inverse(&linalg::adjoint(&gamma))?;
    Ok((gamma, lambda))
}

/// Γ and Λ with true modes taken as an orthonormal basis of span{u_n}:
/// Λ_nk = ⟨u_n, e_k⟩ and Γ = (Λ⁻¹)†.
pub fn gamma_lambda_from_basis(basis: &ModeBasis) -> Result<(Array2<C64>, Array2<C64>)> {
    let n = basis.len();
    let mut e: Vec<crate::field::ComplexField> = Vec::with_capacity(n);
    for m in &basis.modes {
        let mut w = m.u.clone();
        for _ in 0..2 {
            for ek in &e {
                let p = inner_product(ek, &w)?;
                w = w.axpy(-p, ek)?;
            }
        }
        let s = w.norm();
        if s < 1e-10 {
            return Err(Error::Algebra("mode set is linearly dependent".into()));
        }
        e.push(w.scaled(c(1.0 / s)));
    }
    let mut lambda = Array2::zeros((n, n));
    for i in 0..n {
        for k in 0..n {
            lambda[[i, k]] = inner_product(&basis.modes[i].u, &e[k])?;
        }
    }
    let gamma = linalg::adjoint(&linalg::inverse(&lambda)?);
    Ok((gamma, lambda))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl IdentityCheck {
    fn new(name: impl Into<String>, max_deviation: f64, tolerance: f64) -> Self {
        IdentityCheck { name: name.into(), max_deviation, tolerance, pass: max_deviation <= tolerance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgebraReport {
    pub checks: Vec<IdentityCheck>,
    /// max |[A_n, A_m†] − (Γ†Γ)_nm|; differs from the ΓΓ† form unless Γ is normal.
    pub gamma_dag_gamma_deviation: Option<f64>,
    pub all_pass: bool,
}

/// Expected c-number value of [X_n, Y_m], from the NHM commutation table.
fn expected(x: Family, y: Family, n: usize, m: usize, cm: &Array2<C64>, dm: &Array2<C64>) -> C64 {
    use Family::*;
    let d = if n == m { c(1.0) } else { c(0.0) };
    match (x, y) {
        (A, ASharp) | (B, BSharp) | (ASharpDag, ADag) | (BSharpDag, BDag) => d,
        (ASharp, A) | (BSharp, B) | (ADag, ASharpDag) | (BDag, BSharpDag) => -d,
        (A, ADag) => dm[[n, m]],
        (ADag, A) => -dm[[m, n]],
        (BSharpDag, BSharp) => dm[[m, n]],
        (BSharp, BSharpDag) => -dm[[n, m]],
        (B, BDag) => cm[[m, n]],
        (BDag, B) => -cm[[n, m]],
        (ASharpDag, ASharp) => cm[[n, m]],
        (ASharp, ASharpDag) => -cm[[m, n]],
        _ => c(0.0),
    }
}

fn identity_name(x: Family, y: Family) -> String {
    if x.is_a() != y.is_a() {
        "A-type with B-type = 0".into()
    } else if x.lowers() == y.lowers() {
        "same ladder direction = 0".into()
    } else {
        let (p, q) = if x.lowers() { (x, y) } else { (y, x) };
        let rhs = match (p, q) {
            (Family::A, Family::ADag) => "D_nm",
            (Family::BSharpDag, Family::BSharp) => "D_mn",
            (Family::B, Family::BDag) => "C_mn",
            (Family::ASharpDag, Family::ASharp) => "C_nm",
            _ => "δ_nm",
        };
        format!("[{}_n, {}_m] = {rhs}", p.symbol(), q.symbol())
    }
}

/// Deviation of [X, Y] from t·1 on the guarded subspace.
fn commutator_deviation(x: &CsrMatrix, y: &CsrMatrix, t: C64, keep: &[bool]) -> f64 {
    x.commutator(y).sub(&CsrMatrix::identity(x.dim()).scaled(t)).max_abs_on(keep)
}

pub fn check_commutators(ops: &NhmOperatorSet, fock: &FockRep) -> AlgebraReport {
    let n = ops.len();
    let cm = ops.c_matrix();
    let dm = ops.d_matrix();
    let keep = fock.guarded();
    let mut worst: Vec<(String, f64)> = Vec::new();
    for &x in &Family::ALL {
        for &y in &Family::ALL {
            let name = identity_name(x, y);
            for i in 0..n {
                for j in 0..n {
                    let dev = commutator_deviation(ops.op(x, i), ops.op(y, j), expected(x, y, i, j, &cm, &dm), &keep);
                    match worst.iter_mut().find(|w| w.0 == name) {
                        Some(w) => w.1 = w.1.max(dev),
                        None => worst.push((name.clone(), dev)),
                    }
                }
            }
        }
    }
    let mut checks: Vec<IdentityCheck> =
        worst.into_iter().map(|(name, dev)| IdentityCheck::new(name, dev, ALGEBRA_TOL)).collect();
    // operator interrelations: A#†_n = Σ C_nm A_m, B†_n = Σ C_nm B#_m, A†_n = Σ D_mn A#_m, B#†_n = Σ D_mn B_m
    let rel = |lhs: Family, rhs: Family, w: &dyn Fn(usize, usize) -> C64| {
        (0..n)
            .map(|i| {
                let sum = combo((0..n).map(|j| w(i, j)), (0..n).map(|j| ops.op(rhs, j).clone()), fock.dim());
                ops.op(lhs, i).sub(&sum).max_abs()
            })
            .fold(0.0, f64::max)
    };
    let rel_dev = rel(Family::ASharpDag, Family::A, &|i, j| cm[[i, j]])
        .max(rel(Family::BDag, Family::BSharp, &|i, j| cm[[i, j]]))
        .max(rel(Family::ADag, Family::ASharp, &|i, j| dm[[j, i]]))
        .max(rel(Family::BSharpDag, Family::B, &|i, j| dm[[j, i]]));
    checks.push(IdentityCheck::new("operator interrelations via C, D", rel_dev, ALGEBRA_TOL * 10.0));
    let gamma_dag_gamma_deviation = if ops.gamma.is_square() {
        let gg = linalg::adjoint(&ops.gamma).dot(&ops.gamma);
        let mut dev: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                dev = dev.max(commutator_deviation(ops.op(Family::A, i), ops.op(Family::ADag, j), gg[[i, j]], &keep));
            }
        }
        Some(dev)
    } else {
        None
    };
    let all_pass = checks.iter().all(|c| c.pass);
    AlgebraReport { checks, gamma_dag_gamma_deviation, all_pass }
}

#[derive(Debug, Clone)]
pub struct Hamiltonians {
    pub h_c: CsrMatrix,
    pub h_e0: CsrMatrix,
    pub v_e: CsrMatrix,
    pub h_e: CsrMatrix,
}

/// H_C = Σ ω_n (A#A + B#B + 1); the same set in the external role gives
/// H_E⁰ (same form) and V_E = ½Σ ω (A†A#† + B†B#†) − ½Σ ω (A#A + B#B).
pub fn build_hamiltonians(ops: &NhmOperatorSet) -> Hamiltonians {
    let dim = ops.op(Family::A, 0).dim();
    let id = CsrMatrix::identity(dim);
    let mut number = CsrMatrix::zeros(dim);
    let mut dagger = CsrMatrix::zeros(dim);
    let mut h_c = CsrMatrix::zeros(dim);
    for (n, &w) in ops.omega.iter().enumerate() {
        let nab = ops
            .op(Family::ASharp, n)
            .matmul(ops.op(Family::A, n))
            .add(&ops.op(Family::BSharp, n).matmul(ops.op(Family::B, n)));
        let dab = ops
            .op(Family::ADag, n)
            .matmul(ops.op(Family::ASharpDag, n))
            .add(&ops.op(Family::BDag, n).matmul(ops.op(Family::BSharpDag, n)));
        h_c = h_c.add(&nab.add(&id).scaled(c(w)));
        number = number.add(&nab.scaled(c(w)));
        dagger = dagger.add(&dab.scaled(c(w)));
    }
    let h_e0 = h_c.clone();
    let v_e = dagger.scaled(c(0.5)).sub(&number.scaled(c(0.5)));
    let h_e = h_e0.add(&v_e);
    Hamiltonians { h_c, h_e0, v_e, h_e }
}

pub fn hermiticity_defect(h: &CsrMatrix) -> f64 {
    h.sub(&h.adjoint()).max_abs()
}

/// Σ_n ω_n (a_n†a_n + a_n*†a_n* + 1) on the same Fock space.
pub fn true_mode_hamiltonian(fock: &FockRep, omega: &[f64]) -> CsrMatrix {
    let dim = fock.dim();
    let mut h = CsrMatrix::zeros(dim);
    for (k, &w) in omega.iter().enumerate() {
        let n = fock.a_dag(k).matmul(fock.a(k)).add(&fock.a_left_dag(k).matmul(fock.a_left(k)));
        h = h.add(&n.add(&CsrMatrix::identity(dim)).scaled(c(w)));
    }
    h
}

/// Eigenvalues of `h` restricted to the states with fewer than `p` photons, sorted.
pub fn restricted_spectrum(h: &CsrMatrix, fock: &FockRep, p: usize) -> Result<Vec<C64>> {
    let idx: Vec<usize> = (0..fock.dim()).filter(|&i| fock.photons(i) < p).collect();
    let m = Array2::from_shape_fn((idx.len(), idx.len()), |(i, j)| h.get(idx[i], idx[j]));
    let (vals, _) = m.eig()?;
    let mut v = vals.to_vec();
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenstateReport {
    pub states: usize,
    pub max_photons: usize,
    pub vacuum_energy: f64,
    pub max_energy_residual: f64,
    pub max_left_energy_residual: f64,
    pub max_number_residual: f64,
    pub gram_error: f64,
    pub completeness_error: f64,
}

fn occupations(modes: usize, max_total: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for t in 0..=max_total {
        fill(&mut vec![0u8; modes], 0, t, &mut out);
    }
    out
}

fn factorial(n: u8) -> f64 {
    (1..=n as u64).product::<u64>() as f64
}

/// Right states Π(A#)ⁿ(B#)ᵐ|0⟩/√(n!m!) and left states ⟨0|ΠAⁿBᵐ/√(n!m!) with at most
/// `max_photons` photons; checks H|N⟩ = E|N⟩, E = Σ ω_n(n_n + m_n + 1), and (N|N') = δ.
pub fn check_eigenstates(h: &CsrMatrix, ops: &NhmOperatorSet, fock: &FockRep, max_photons: usize) -> Result<EigenstateReport> {
    if max_photons >= fock.n_max {
        return Err(Error::Validation {
            key: "max_photons".into(),
            reason: format!("must be below the cutoff {}", fock.n_max),
        });
    }
    let n = ops.len();
    let hd = h.adjoint();
    let occ = occupations(2 * n, max_photons);
    let mut rights = Vec::with_capacity(occ.len());
    let mut lefts = Vec::with_capacity(occ.len());
    let mut out = EigenstateReport {
        states: occ.len(),
        max_photons,
        vacuum_energy: ops.omega.iter().sum(),
        max_energy_residual: 0.0,
        max_left_energy_residual: 0.0,
        max_number_residual: 0.0,
        gram_error: 0.0,
        completeness_error: 0.0,
    };
    for o in &occ {
        let mut r = fock.vacuum();
        let mut l = fock.vacuum();
        let mut norm = 1.0;
        let mut energy = 0.0;
        for i in 0..n {
            let (na, nb) = (o[i], o[n + i]);
            for _ in 0..na {
                r = ops.op(Family::ASharp, i).matvec(&r);
                l = ops.op(Family::ADag, i).matvec(&l);
            }
            for _ in 0..nb {
                r = ops.op(Family::BSharp, i).matvec(&r);
                l = ops.op(Family::BDag, i).matvec(&l);
            }
            norm *= factorial(na) * factorial(nb);
            energy += ops.omega[i] * (na as f64 + nb as f64 + 1.0);
        }
        let s = c(1.0 / norm.sqrt());
        r.iter_mut().for_each(|x| *x *= s);
        l.iter_mut().for_each(|x| *x *= s);
        let rn = linalg::norm2(&r);
        let ln = linalg::norm2(&l);
        let mut hr = h.matvec(&r);
        linalg::axpy(&mut hr, c(-energy), &r);
        out.max_energy_residual = out.max_energy_residual.max(linalg::norm2(&hr) / rn);
        let mut hl = hd.matvec(&l);
        linalg::axpy(&mut hl, c(-energy), &l);
        out.max_left_energy_residual = out.max_left_energy_residual.max(linalg::norm2(&hl) / ln);
        for i in 0..n {
            for (fam_c, fam_a, count) in [(Family::ASharp, Family::A, o[i]), (Family::BSharp, Family::B, o[n + i])] {
                let mut nr = ops.op(fam_c, i).matvec(&ops.op(fam_a, i).matvec(&r));
                linalg::axpy(&mut nr, c(-(count as f64)), &r);
                out.max_number_residual = out.max_number_residual.max(linalg::norm2(&nr) / rn);
            }
        }
        rights.push(r);
        lefts.push(l);
    }
    for (i, l) in lefts.iter().enumerate() {
        for (j, r) in rights.iter().enumerate() {
            let g = linalg::dotc(l, r) - if i == j { c(1.0) } else { c(0.0) };
            out.gram_error = out.gram_error.max(g.norm());
        }
    }
    // Σ_N |N⟩(N| acts as the identity on states with ≤ max_photons photons
    let keep: Vec<usize> = (0..fock.dim()).filter(|&i| fock.photons(i) <= max_photons).collect();
    for &p in &keep {
        for &q in &keep {
            let s: C64 = rights.iter().zip(&lefts).map(|(r, l)| r[p] * l[q].conj()).sum();
            let d = s - if p == q { c(1.0) } else { c(0.0) };
            out.completeness_error = out.completeness_error.max(d.norm());
        }
    }
    Ok(out)
}

/// One-dimensional cavity/external split used to compare Fock-space
/// cross-region commutators with boundary (surface) terms.
///
/// True modes are right-travelling plane waves e^{ik_j z}/√L on a periodic box
/// of length L, j in a band of `n_true` around `carrier`. The cavity is
/// [0, z_b = L/2), the external region [z_b, L); each carries `n_modes`
/// orthonormal plane-wave modes (U = V) centred on the same carrier. c = ε₀ = ħ = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossRegionToy {
    pub n_grid: usize,
    pub length: f64,
    pub carrier: usize,
    pub n_true: usize,
    pub n_modes: usize,
}

impl Default for CrossRegionToy {
    fn default() -> Self {
        CrossRegionToy { n_grid: 8192, length: 1.0, carrier: 800, n_true: 21, n_modes: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommutatorEntry {
    pub name: String,
    pub fock_max: f64,
    pub surface_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossRegionReport {
    pub narrowband: bool,
    pub relative_bandwidth: f64,
    pub m_plus_n_error: f64,
    pub cavity_qp_error: f64,
    /// [Q_n, P_K†] from Fock operators, as [re, im] rows.
    pub fock_qp: Vec<Vec<[f64; 2]>>,
    /// iħL_nK from the boundary formula.
    pub surface_qp: Vec<Vec<[f64; 2]>>,
    /// Mean of Fock / surface over entries with non-negligible surface value.
    pub mean_ratio: [f64; 2],
    pub max_relative_difference: f64,
    pub table: Vec<CommutatorEntry>,
    pub warnings: Vec<String>,
}

fn quadrature(a: &[C64], b: &[C64], mask: &[bool], dz: f64) -> C64 {
    a.iter().zip(b).zip(mask).filter(|(_, &m)| m).map(|((x, y), _)| x.conj() * y).sum::<C64>() * dz
}

fn to_pairs(m: &Array2<C64>) -> Vec<Vec<[f64; 2]>> {
    m.rows().into_iter().map(|r| r.iter().map(|v| [v.re, v.im]).collect()).collect()
}

pub fn cross_region_check(toy: &CrossRegionToy) -> Result<CrossRegionReport> {
    let nt = toy.n_true;
    let nr = toy.n_modes;
    if nr == 0 || nt < nr || toy.carrier < nt || toy.n_grid < 4 * (toy.carrier + nt) {
        return Err(Error::Validation {
            key: "cross_region".into(),
            reason: "need 0 < n_modes ≤ n_true ≤ carrier and n_grid ≥ 4·(carrier + n_true)".into(),
        });
    }
    if !toy.carrier.is_multiple_of(2) {
        return Err(Error::Validation { key: "carrier".into(), reason: "must be even".into() });
    }
    let l = toy.length;
    let zb = l / 2.0;
    let dz = l / toy.n_grid as f64;
    let zs: Vec<f64> = (0..toy.n_grid).map(|i| i as f64 * dz).collect();
    let in_c: Vec<bool> = zs.iter().map(|&z| z < zb - 0.5 * dz).collect();
    let in_e: Vec<bool> = in_c.iter().map(|&b| !b).collect();
    let tau = 2.0 * std::f64::consts::PI;
    let plane = |k: f64, norm: f64, mask: Option<&[bool]>| -> Vec<C64> {
        zs.iter()
            .enumerate()
            .map(|(i, &z)| match mask {
                Some(m) if !m[i] => c(0.0),
                _ => C64::from_polar(1.0 / norm.sqrt(), k * z),
            })
            .collect()
    };
    let j0 = toy.carrier - nt / 2;
    let k_true: Vec<f64> = (0..nt).map(|j| tau * (j0 + j) as f64 / l).collect();
    // region modes: wavenumbers 2π·m/(L/2), centred on the same carrier
    let m0 = toy.carrier / 2 - nr / 2;
    let k_reg: Vec<f64> = (0..nr).map(|m| tau * (m0 + m) as f64 / zb).collect();
    let true_modes: Vec<Vec<C64>> = k_true.iter().map(|&k| plane(k, l, None)).collect();
    let cav: Vec<Vec<C64>> = k_reg.iter().map(|&k| plane(k, zb, Some(&in_c))).collect();
    let ext: Vec<Vec<C64>> = k_reg.iter().map(|&k| plane(k, l - zb, Some(&in_e))).collect();
    let mat = |rows: &[Vec<C64>], mask: &[bool]| {
        Array2::from_shape_fn((nr, nt), |(n, k)| quadrature(&rows[n], &true_modes[k], mask, dz))
    };
    let gamma = mat(&cav, &in_c);
    let phi = mat(&ext, &in_e);
    let mm = Array2::from_shape_fn((nt, nt), |(k, q)| quadrature(&true_modes[k], &true_modes[q], &in_c, dz));
    let nn = Array2::from_shape_fn((nt, nt), |(k, q)| quadrature(&true_modes[k], &true_modes[q], &in_e, dz));
    let m_plus_n_error = linalg::max_abs(&(&mm + &nn - linalg::identity(nt)));

    let fock = build_fock(nt, nt, 2)?;
    let dim = fock.dim();
    // q_k = (a_k + a_k*†)/(2λ_k), p_k = (a_k − a_k*†)/(2iμ_k), λ = √(ω/2), μ = 1/√(2ω)
    let q: Vec<CsrMatrix> = (0..nt)
        .map(|k| fock.a(k).add(fock.a_left_dag(k)).scaled(c(1.0 / (2.0 * (k_true[k] / 2.0).sqrt()))))
        .collect();
    let p: Vec<CsrMatrix> = (0..nt)
        .map(|k| {
            let mu = 1.0 / (2.0 * k_true[k]).sqrt();
            fock.a(k).sub(fock.a_left_dag(k)).scaled(C64::new(0.0, -1.0 / (2.0 * mu)))
        })
        .collect();
    let lin = |w: &Array2<C64>, ops: &[CsrMatrix]| -> Vec<CsrMatrix> {
        (0..nr).map(|i| combo((0..nt).map(|k| w[[i, k]]), ops.iter().cloned(), dim)).collect()
    };
    // Hermitean mode sets: Λ = Γ in the cavity, Φ = Δ outside
    let (lambda, delta) = (gamma.clone(), phi.clone());
    let q_c = lin(&gamma, &q);
    let r_c = lin(&lambda, &q);
    let p_c = lin(&lambda, &p);
    let s_c = lin(&gamma, &p);
    let q_e = lin(&delta, &q);
    let r_e = lin(&phi, &q);
    let p_e = lin(&phi, &p);
    let s_e = lin(&delta, &p);
    let keep = fock.guarded();
    let value = |x: &CsrMatrix, y: &CsrMatrix| -> (C64, f64) {
        let cm = x.commutator(y);
        let v = cm.get(0, 0);
        (v, cm.sub(&CsrMatrix::identity(dim).scaled(v)).max_abs_on(&keep))
    };
    let mut warnings = Vec::new();
    let mut not_scalar: f64 = 0.0;
    let mut cavity_qp_error: f64 = 0.0;
    for n in 0..nr {
        for m in 0..nr {
            let (v, dev) = value(&q_c[n], &p_c[m].adjoint());
            not_scalar = not_scalar.max(dev);
            let t = if n == m { C64::new(0.0, 1.0) } else { c(0.0) };
            cavity_qp_error = cavity_qp_error.max((v - t).norm());
        }
    }
    // boundary values V_n*(z_b) U_K(z_b), cavity functions continued to z_b
    let vb: Vec<C64> = k_reg.iter().map(|&k| C64::from_polar(1.0 / zb.sqrt(), k * zb)).collect();
    let ub: Vec<C64> = k_reg.iter().map(|&k| C64::from_polar(1.0 / (l - zb).sqrt(), k * zb)).collect();
    let surf = |kk: &dyn Fn(usize, usize) -> f64| {
        Array2::from_shape_fn((nr, nr), |(n, k)| vb[n].conj() * ub[k] / kk(n, k))
    };
    // [Q_n, P_K†] = (1/k_n) V_n*U_K; [P_n, Q_K†] = (i/k_K²)·ẑ·U_n*×(∇×V_K) = −U_n*V_K/k_K
    let s_cav = surf(&|n, _| k_reg[n]);
    let s_ext = surf(&|_, k| -k_reg[k]);
    let mut fock_qp = Array2::zeros((nr, nr));
    let pairs: [(&str, &[CsrMatrix], &[CsrMatrix], bool, Option<&Array2<C64>>); 12] = [
        ("[Q_n, P_K†]", &q_c, &p_e, true, Some(&s_cav)),
        ("[R_n, S_K†]", &r_c, &s_e, true, Some(&s_cav)),
        ("[Q_n, S_K†]", &q_c, &s_e, true, Some(&s_cav)),
        ("[R_n, P_K†]", &r_c, &p_e, true, Some(&s_cav)),
        ("[P_n, Q_K†]", &p_c, &q_e, true, Some(&s_ext)),
        ("[S_n, R_K†]", &s_c, &r_e, true, Some(&s_ext)),
        ("[P_n, R_K†]", &p_c, &r_e, true, Some(&s_ext)),
        ("[S_n, Q_K†]", &s_c, &q_e, true, Some(&s_ext)),
        ("[Q_n, P_K]", &q_c, &p_e, false, None),
        ("[R_n, S_K]", &r_c, &s_e, false, None),
        ("[Q_n, S_K]", &q_c, &s_e, false, None),
        ("[R_n, P_K]", &r_c, &p_e, false, None),
    ];
    let mut table = Vec::new();
    for (idx, (name, xs, ys, dag, s)) in pairs.iter().enumerate() {
        let mut mx: f64 = 0.0;
        for n in 0..nr {
            for k in 0..nr {
                let y = if *dag { ys[k].adjoint() } else { ys[k].clone() };
                let (v, dev) = value(&xs[n], &y);
                not_scalar = not_scalar.max(dev);
                mx = mx.max(v.norm());
                if idx == 0 {
                    fock_qp[[n, k]] = v;
                }
            }
        }
        table.push(CommutatorEntry {
            name: name.to_string(),
            fock_max: mx,
            surface_max: s.map(linalg::max_abs),
        });
    }
    if not_scalar > 1e-10 {
        warnings.push(format!("commutators deviate from c-numbers by {not_scalar:.2e}"));
    }
    let relative_bandwidth = nt as f64 / toy.carrier as f64;
    let narrowband = relative_bandwidth <= 0.05;
    if !narrowband {
        warnings.push(format!(
            "relative bandwidth {relative_bandwidth:.3} is not narrow; the monochromatic operator forms do not apply"
        ));
    }
    let mut sum = c(0.0);
    let mut count = 0usize;
    let mut max_rel: f64 = 0.0;
    let floor = 1e-3 * linalg::max_abs(&s_cav);
    for n in 0..nr {
        for k in 0..nr {
            let s = s_cav[[n, k]];
            if s.norm() > floor {
                sum += fock_qp[[n, k]] / s;
                count += 1;
                max_rel = max_rel.max((fock_qp[[n, k]] - s).norm() / s.norm());
            }
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { c(f64::NAN) };
    Ok(CrossRegionReport {
        narrowband,
        relative_bandwidth,
        m_plus_n_error,
        cavity_qp_error,
        fock_qp: to_pairs(&fock_qp),
        surface_qp: to_pairs(&s_cav),
        mean_ratio: [mean.re, mean.im],
        max_relative_difference: max_rel,
        table,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldCommutatorReport {
    pub mode_counts: Vec<usize>,
    /// Im[A(z), Π(z)] at a coincident cell, per mode count.
    pub coincident: Vec<f64>,
    /// max |[A(z), Π(z')]| over separated cells, per mode count.
    pub separated: Vec<f64>,
    pub cell_value: f64,
    pub cross_polarization: f64,
    pub monotone: bool,
}

/// [A(z), Π(z')] = i Σ_k (A_k(z)A_k*(z') + c.c.) from plane-wave mode sums on a
/// periodic grid, compared with i/Δz at coincident cells.
pub fn field_commutator_check(n_grid: usize, length: f64, mode_counts: &[usize]) -> FieldCommutatorReport {
    let dz = length / n_grid as f64;
    let tau = 2.0 * std::f64::consts::PI;
    let kernel = |m: usize, sep: usize| -> C64 {
        // right-travelling k_j = 2πj/L, j = 1..=m, plus the j = 0 mode counted once
        let s: f64 = (1..=m).map(|j| (tau * j as f64 * sep as f64 * dz / length).cos()).sum::<f64>();
        C64::new(0.0, (2.0 * s + 1.0) / length)
    };
    let mut coincident = Vec::new();
    let mut separated = Vec::new();
    for &m in mode_counts {
        coincident.push(kernel(m, 0).im);
        let worst = (1..n_grid).map(|s| kernel(m, s).norm()).fold(0.0, f64::max);
        separated.push(worst);
    }
    let cell_value = 1.0 / dz;
    let monotone = coincident.windows(2).all(|w| (cell_value - w[1]).abs() <= (cell_value - w[0]).abs());
    FieldCommutatorReport {
        mode_counts: mode_counts.to_vec(),
        coincident,
        separated,
        cell_value,
        cross_polarization: 0.0,
        monotone,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_mode_ladder() {
        assert!(matches!(build_fock(1, 0, 1), Err(Error::Validation { .. })));
        let f = build_fock_capped(1, 0, 3, 100).unwrap();
        assert_eq!(f.dim(), 4);
        let a = f.a(0).to_dense();
        for n in 1..4 {
            let from = f.state_index(&[n as u8]).unwrap();
            let to = f.state_index(&[n as u8 - 1]).unwrap();
            assert_eq!(a[[to, from]], c((n as f64).sqrt()));
        }
        let comm = f.a(0).commutator(f.a_dag(0));
        let keep = f.guarded();
        assert!(comm.sub(&CsrMatrix::identity(4)).max_abs_on(&keep) < 1e-14);
        // the top level is where truncation shows
        assert!(comm.sub(&CsrMatrix::identity(4)).max_abs() > 1.0);
    }

    #[test]
    fn stars_and_bars_dimension() {
        assert_eq!(build_fock(1, 1, 2).unwrap().dim(), 6);
        assert_eq!(build_fock(3, 3, 4).unwrap().dim(), 210);
        assert!(matches!(build_fock_capped(10, 10, 10, 1000), Err(Error::Size(_))));
    }

    #[test]
    fn identity_gamma_gives_true_operators() {
        let f = build_fock(2, 2, 3).unwrap();
        let e = linalg::identity(2);
        let ops = build_nhm_ops(&f, &e, &e, &[1.0, 1.0]).unwrap();
        assert_eq!(ops.op(Family::A, 1), f.a(1));
        assert_eq!(ops.op(Family::ASharp, 0), f.a_dag(0));
        let vac = f.vacuum();
        for n in 0..2 {
            assert!(linalg::norm2(&ops.op(Family::A, n).matvec(&vac)) == 0.0);
            assert!(linalg::norm2(&ops.op(Family::B, n).matvec(&vac)) == 0.0);
        }
        let r = check_commutators(&ops, &f);
        assert!(r.all_pass, "{:?}", r.checks);
    }

    #[test]
    fn biorthogonality_precondition_enforced() {
        let f = build_fock(2, 2, 2).unwrap();
        let (g, _) = random_biorthogonal_pair(2, 1).unwrap();
        assert!(matches!(build_nhm_ops(&f, &g, &g, &[1.0, 1.0]), Err(Error::Algebra(_))));
    }

    #[test]
    fn random_pair_commutation_table() {
        let f = build_fock(3, 3, 4).unwrap();
        let (g, l) = random_biorthogonal_pair(3, 42).unwrap();
        let ops = build_nhm_ops(&f, &g, &l, &[1.0, 1.3, 0.7]).unwrap();
        let r = check_commutators(&ops, &f);
        for ch in &r.checks {
            assert!(ch.pass, "{ch:?}");
        }
        // [A_1, A_2†] against an explicit ΓΓ† entry
        let d12: C64 = (0..3).map(|k| g[[0, k]] * g[[1, k]].conj()).sum();
        let comm = ops.op(Family::A, 0).commutator(ops.op(Family::ADag, 1));
        assert!((comm.get(0, 0) - d12).norm() < 1e-12);
        // Γ is not normal, so the transposed product differs
        assert!(r.gamma_dag_gamma_deviation.unwrap() > 1e-3);
    }

    #[test]
    fn single_mode_hamiltonian_is_oscillator_pair() {
        let f = build_fock(1, 1, 4).unwrap();
        let e = linalg::identity(1);
        let ops = build_nhm_ops(&f, &e, &e, &[2.5]).unwrap();
        let h = build_hamiltonians(&ops);
        let want = true_mode_hamiltonian(&f, &[2.5]);
        assert_eq!(h.h_c.sub(&want).max_abs(), 0.0);
        let rep = check_eigenstates(&h.h_c, &ops, &f, 3).unwrap();
        assert_eq!(rep.vacuum_energy, 2.5);
        assert!(rep.max_energy_residual < 1e-12);
        let one = ops.op(Family::ASharp, 0).matvec(&f.vacuum());
        let e1 = linalg::dotc(&one, &h.h_c.matvec(&one)).re;
        assert!((e1 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn external_hamiltonian_hermitean_parts_are_not() {
        let f = build_fock(2, 2, 3).unwrap();
        let (g, l) = random_biorthogonal_pair(2, 9).unwrap();
        let ops = build_nhm_ops(&f, &g, &l, &[1.0, 1.6]).unwrap();
        let h = build_hamiltonians(&ops);
        assert!(hermiticity_defect(&h.h_e) <= 1e-12);
        assert!(hermiticity_defect(&h.h_e0) > 1e-3);
        assert!(hermiticity_defect(&h.v_e) > 1e-3);
    }

    #[test]
    fn eigenstates_and_spectrum() {
        let f = build_fock(2, 2, 4).unwrap();
        let (g, l) = random_biorthogonal_pair(2, 5).unwrap();
        let w = [1.0, 1.7];
        let ops = build_nhm_ops(&f, &g, &l, &w).unwrap();
        let h = build_hamiltonians(&ops);
        let r = check_eigenstates(&h.h_c, &ops, &f, 3).unwrap();
        assert!(r.max_energy_residual <= 1e-10, "{r:?}");
        assert!(r.max_left_energy_residual <= 1e-10, "{r:?}");
        assert!(r.gram_error <= 1e-10 && r.completeness_error <= 1e-10, "{r:?}");
        assert!(r.max_number_residual <= 1e-10);
        let a = restricted_spectrum(&h.h_c, &f, 4).unwrap();
        let b = restricted_spectrum(&true_mode_hamiltonian(&f, &w), &f, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-9);
        }
    }

    #[test]
    fn solved_basis_gives_consistent_gamma() {
        let (spec, grid) = crate::optics::tests::strip_unstable();
        let op = crate::optics::RoundTripOperator::new(spec, grid, crate::optics::Direction::Forward).unwrap();
        let b = crate::eigen::biorthonormalize(
            &crate::eigen::solve_modes(&op, 2, crate::eigen::SolveMethod::Dense, 1e-10, 1, 0).unwrap(),
        )
        .unwrap();
        let (g, l) = gamma_lambda_from_basis(&b).unwrap();
        let m = crate::algebra::overlap_matrices(&b).unwrap();
        assert!(linalg::max_abs(&(l.dot(&linalg::adjoint(&l)) - &m.c)) < 1e-8);
        assert!(biorthogonality_defect(&g, &l) < 1e-12);
    }

    #[test]
    fn cross_region_quadrature_and_table() {
        let r = cross_region_check(&CrossRegionToy::default()).unwrap();
        assert!(r.m_plus_n_error < 1e-10);
        assert!(r.narrowband);
        assert!(r.table.iter().all(|e| e.fock_max.is_finite()));
    }

    #[test]
    fn field_commutator_converges_to_cell_value() {
        let r = field_commutator_check(64, 1.0, &[4, 8, 16, 31]);
        assert!(r.monotone);
        let last = *r.coincident.last().unwrap();
        assert!((last - r.cell_value).abs() / r.cell_value < 0.05);
        assert!(*r.separated.last().unwrap() <= 0.05 * r.cell_value + 1e-9);
        assert_eq!(r.cross_polarization, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn commutation_table_holds_for_random_pairs(seed in 0u64..10_000, n in 2usize..4) {
            let f = build_fock(n, n, 3).unwrap();
            let (g, l) = random_biorthogonal_pair(n, seed).unwrap();
            let w: Vec<f64> = (0..n).map(|i| 1.0 + 0.25 * i as f64).collect();
            let ops = build_nhm_ops(&f, &g, &l, &w).unwrap();
            let r = check_commutators(&ops, &f);
            prop_assert!(r.all_pass, "{:?}", r.checks);
        }
    }
}
