//! Spontaneous emission of a two-level atom into non-orthogonal cavity modes,
//! single-excitation (essential-state) dynamics. ħ = 1.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::algebra::OverlapMatrices;
use crate::eigen::{ModeBasis, Polarization, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::field::C64;
use crate::linalg;
use crate::sparse::CsrMatrix;

const TAU: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoLevelAtom {
    pub omega0: f64,
    /// Transverse (x, y) dipole components.
    pub dipole: [C64; 2],
    pub position: [f64; 3],
}

/// Couplings to a set of modes grouped into families of equal frequency.
/// C and D are block-diagonal over the groups.
#[derive(Debug, Clone)]
pub struct CouplingSet {
    pub g_a: Vec<C64>,
    pub g_b: Vec<C64>,
    /// δ_n = ω₀ − ω_n.
    pub detuning: Vec<f64>,
    pub group: Vec<usize>,
    pub c: CsrMatrix,
    pub d: CsrMatrix,
    /// Mode density per family near ω₀.
    pub rho: f64,
    /// ‖gB + D·conj(gA)‖ / ‖gB‖.
    pub consistency_residual: f64,
}

impl CouplingSet {
    pub fn len(&self) -> usize {
        self.g_a.len()
    }
    pub fn is_empty(&self) -> bool {
        self.g_a.is_empty()
    }

    /// Repeats one transverse family (couplings `g_a`, overlap block `d`) over
    /// `n_axial` equally spaced frequencies centred on ω₀, with gB = −D·conj(gA)
    /// and C = D⁻¹ in every block. ρ = 1/Δω.
    pub fn comb(g_a: &[C64], d: &Array2<C64>, n_axial: usize, delta_omega: f64) -> Result<CouplingSet> {
        let t = linalg::check_square(d, "D block")?;
        if t != g_a.len() {
            return Err(Error::Dimension(format!("{} couplings for a {t}x{t} block", g_a.len())));
        }
        if n_axial == 0 || delta_omega <= 0.0 {
            return Err(Error::Validation {
                key: "n_modes".into(),
                reason: "need at least one frequency and a positive spacing".into(),
            });
        }
        let c_block = linalg::inverse(d)?;
        let g_b: Vec<C64> = (0..t).map(|n| -(0..t).map(|m| d[[n, m]] * g_a[m].conj()).sum::<C64>()).collect();
        let half = (n_axial as f64 - 1.0) / 2.0;
        let mut ga = Vec::with_capacity(n_axial * t);
        let mut gb = Vec::with_capacity(n_axial * t);
        let mut det = Vec::with_capacity(n_axial * t);
        let mut group = Vec::with_capacity(n_axial * t);
        let mut ct = Vec::new();
        let mut dt = Vec::new();
        for j in 0..n_axial {
            let delta = (j as f64 - half) * delta_omega;
            for n in 0..t {
                ga.push(g_a[n]);
                gb.push(g_b[n]);
                det.push(delta);
                group.push(j);
                for m in 0..t {
                    ct.push((j * t + n, j * t + m, c_block[[n, m]]));
                    dt.push((j * t + n, j * t + m, d[[n, m]]));
                }
            }
        }
        let size = n_axial * t;
        Ok(CouplingSet {
            g_a: ga,
            g_b: gb,
            detuning: det,
            group,
            c: CsrMatrix::from_triplets(size, ct),
            d: CsrMatrix::from_triplets(size, dt),
            rho: 1.0 / delta_omega,
            consistency_residual: 0.0,
        })
    }
}

/// Flat comb with a single transverse mode of Petermann factor K, scaled so the
/// free-space (K = 1) rate is `gamma_free`.
pub fn synthetic_comb(petermann: f64, gamma_free: f64, n_modes: usize, delta_omega: f64) -> Result<CouplingSet> {
    if petermann < 1.0 {
        return Err(Error::Validation { key: "petermann".into(), reason: "must be at least 1".into() });
    }
    let g = (gamma_free * delta_omega / (4.0 * std::f64::consts::PI)).sqrt();
    CouplingSet::comb(&[C64::new(g, 0.0)], &Array2::from_elem((1, 1), C64::new(petermann, 0.0)), n_modes, delta_omega)
}

fn sample(field: &crate::field::ComplexField, ix: usize, iy: usize) -> C64 {
    field.values[[iy, ix]]
}

/// gA_n = −i g₀√(ω_n/ω₀)·d·U_n(R), gB_n = −i g₀√(ω_n/ω₀)·d·V_n*(R), with
/// U_n(R) = u_n(x, y)·e^{ik_n z}. The field is sampled at the nearest grid node.
/// g₀ carries the dimensional prefactor √(ω₀/2ħε₀) and the longitudinal normalization.
pub fn coupling_constants(basis: &ModeBasis, atom: &TwoLevelAtom, m: &OverlapMatrices, g0: f64) -> Result<CouplingSet> {
    if basis.is_empty() || m.len() != basis.len() {
        return Err(Error::Dimension(format!("{} modes, overlap matrices of size {}", basis.len(), m.len())));
    }
    let grid = &basis.grid;
    let [x, y, z] = atom.position;
    let ix = (x / grid.dx + (grid.nx as f64 - 1.0) / 2.0).round();
    let iy = if grid.is_strip() { 0.0 } else { (y / grid.dy + (grid.ny as f64 - 1.0) / 2.0).round() };
    if !(0.0..grid.nx as f64).contains(&ix) || !(0.0..grid.ny as f64).contains(&iy) {
        return Err(Error::Position(format!("({x}, {y}) lies outside the grid")));
    }
    let (ix, iy) = (ix as usize, iy as usize);
    if !grid.interior_mask()[[iy, ix]] {
        return Err(Error::Position(format!("({x}, {y}) lies in the absorbing guard band")));
    }
    if !(0.0..=basis.spec.cavity_length).contains(&z) {
        return Err(Error::Position(format!("z = {z} outside the cavity [0, {}]", basis.spec.cavity_length)));
    }
    let n = basis.len();
    let mut g_a = Vec::with_capacity(n);
    let mut g_b = Vec::with_capacity(n);
    let mut detuning = Vec::with_capacity(n);
    for mode in &basis.modes {
        let omega = if mode.omega > 0.0 { mode.omega } else { SPEED_OF_LIGHT * basis.spec.wavenumber };
        let d = match mode.polarization {
            Polarization::X => atom.dipole[0],
            Polarization::Y => atom.dipole[1],
        };
        let s = C64::new(0.0, -g0 * (omega / atom.omega0).sqrt());
        let phase = C64::from_polar(1.0, omega / SPEED_OF_LIGHT * z);
        g_a.push(s * d * sample(&mode.u, ix, iy) * phase);
        g_b.push(s * d * (sample(&mode.v, ix, iy) * phase).conj());
        detuning.push(atom.omega0 - omega);
    }
    let mut groups: Vec<(u64, Polarization)> = Vec::new();
    let group = m
        .labels
        .iter()
        .map(|l| match groups.iter().position(|g| g == l) {
            Some(i) => i,
            None => {
                groups.push(*l);
                groups.len() - 1
            }
        })
        .collect();
    let dense = |a: &Array2<C64>| CsrMatrix::from_triplets(n, a.indexed_iter().map(|((i, j), &v)| (i, j, v)));
    let d = dense(&m.d);
    let dga: Vec<C64> = d.matvec(&g_a.iter().map(|g| g.conj()).collect::<Vec<_>>());
    let diff: Vec<C64> = g_b.iter().zip(&dga).map(|(b, x)| b + x).collect();
    let nb = linalg::norm2(&g_b);
    let consistency_residual = if nb > 0.0 { linalg::norm2(&diff) / nb } else { linalg::norm2(&diff) };
    Ok(CouplingSet {
        g_a,
        g_b,
        detuning,
        group,
        c: dense(&m.c),
        d,
        rho: basis.spec.cavity_length / (std::f64::consts::PI * SPEED_OF_LIGHT),
        consistency_residual,
    })
}

/// K(τ) = Σ_n 2·gA_n·gB_n·e^{iδ_n τ}.
pub fn memory_kernel(c: &CouplingSet, taus: &[f64]) -> Vec<C64> {
    taus.iter()
        .map(|&t| {
            c.g_a
                .iter()
                .zip(&c.g_b)
                .zip(&c.detuning)
                .map(|((a, b), &d)| 2.0 * a * b * C64::from_polar(1.0, d * t))
                .sum()
        })
        .collect()
}

/// K̃(s) = Σ_n 2·gA_n·gB_n / (s − iδ_n); −2·Re K̃(ε) approaches the decay rate.
pub fn laplace_kernel(c: &CouplingSet, s: f64) -> C64 {
    c.g_a
        .iter()
        .zip(&c.g_b)
        .zip(&c.detuning)
        .map(|((a, b), &d)| 2.0 * a * b / C64::new(s, -d))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovRate {
    pub gamma_e: f64,
    pub gamma_free: f64,
    /// 4πρ Σ |gA_n|² K_n
    pub diagonal: f64,
    /// 4πρ Σ_{n≠m} gA_n D_nm gA_m*
    pub off_diagonal: f64,
    pub petermann: Vec<f64>,
    /// Kernel correlation time 2π / bandwidth.
    pub tau_c: f64,
    /// 1 / Γ_e.
    pub t_e: f64,
    pub markov_trusted: bool,
}

/// Closed-form rate from the family nearest resonance.
pub fn markov_rate(c: &CouplingSet) -> Result<MarkovRate> {
    if c.is_empty() {
        return Err(Error::Validation { key: "couplings".into(), reason: "empty coupling set".into() });
    }
    let nearest = (0..c.len()).min_by(|&i, &j| c.detuning[i].abs().total_cmp(&c.detuning[j].abs())).unwrap();
    let fam: Vec<usize> = (0..c.len()).filter(|&i| c.group[i] == c.group[nearest]).collect();
    let pref = 2.0 * TAU * c.rho;
    let mut diag = 0.0;
    let mut off = C64::new(0.0, 0.0);
    let mut free = 0.0;
    let mut petermann = Vec::with_capacity(fam.len());
    for &n in &fam {
        let k = c.d.get(n, n);
        petermann.push(k.re);
        diag += c.g_a[n].norm_sqr() * k.re;
        free += c.g_a[n].norm_sqr();
        for &m in &fam {
            if m != n {
                off += c.g_a[n] * c.d.get(n, m) * c.g_a[m].conj();
            }
        }
    }
    let scale = diag.abs().max(off.norm()).max(f64::MIN_POSITIVE);
    if off.im.abs() > 1e-10 * scale {
        return Err(Error::Consistency(format!("off-diagonal rate sum has imaginary part {:.3e}", off.im)));
    }
    let gamma_e = pref * (diag + off.re);
    if gamma_e < 0.0 {
        return Err(Error::Physicality(format!("negative decay rate {gamma_e:.3e}")));
    }
    let (lo, hi) = c.detuning.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
    let bandwidth = (hi - lo) + 1.0 / c.rho;
    let tau_c = TAU / bandwidth;
    let t_e = 1.0 / gamma_e;
    Ok(MarkovRate {
        gamma_e,
        gamma_free: pref * free,
        diagonal: pref * diag,
        off_diagonal: pref * off.re,
        petermann,
        tau_c,
        t_e,
        markov_trusted: t_e >= 10.0 * tau_c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayResult {
    pub times: Vec<f64>,
    pub c_e: Vec<C64>,
    pub gram_norm: Vec<f64>,
    pub c_a: Vec<C64>,
    pub c_b: Vec<C64>,
    pub dt: f64,
    pub max_gram_drift: f64,
    pub predicted_rate: Option<f64>,
    pub fitted_rate: Option<f64>,
}

impl DecayResult {
    pub fn excited_population(&self) -> Vec<f64> {
        self.c_e.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// |C_e|² + Σ C^A*_n C_nm C^A_m + Σ C^B*_n D_mn C^B_m.
pub fn gram_norm(c: &CouplingSet, ce: C64, ca: &[C64], cb: &[C64]) -> f64 {
    let a = linalg::dotc(ca, &c.c.matvec(ca));
    let cbc: Vec<C64> = cb.iter().map(|x| x.conj()).collect();
    let b: C64 = cb.iter().zip(c.d.matvec(&cbc)).map(|(x, y)| x * y).sum();
    ce.norm_sqr() + a.re + b.re
}

pub fn max_step(c: &CouplingSet) -> f64 {
    let dmax = c.detuning.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    let sa: f64 = c.g_a.iter().map(|g| g.norm()).sum();
    let sb: f64 = c.g_b.iter().map(|g| g.norm()).sum();
    0.1 / dmax.max(sa).max(sb)
}

fn derivative(c: &CouplingSet, t: f64, ce: C64, ca: &[C64], cb: &[C64], out: &mut [C64]) {
    let n = c.len();
    let i = C64::new(0.0, 1.0);
    let mut sum = C64::new(0.0, 0.0);
    for k in 0..n {
        let ph = C64::from_polar(1.0, c.detuning[k] * t);
        sum += ph * (c.g_a[k] * ca[k] + c.g_b[k] * cb[k]);
        out[1 + k] = -i * c.g_b[k] * ph.conj() * ce;
        out[1 + n + k] = -i * c.g_a[k] * ph.conj() * ce;
    }
    out[0] = i * sum;
}

/// Fixed-step RK4 from C_e = 1; samples every `stride` steps.
pub fn evolve_amplitudes(c: &CouplingSet, t_end: f64, dt: f64, stride: usize) -> Result<DecayResult> {
    let limit = max_step(c);
    if !(dt > 0.0 && dt <= limit * (1.0 + 1e-12)) {
        return Err(Error::StepSize(format!("dt = {dt:.3e} exceeds the stability limit {limit:.3e}")));
    }
    if t_end <= 0.0 {
        return Err(Error::Validation { key: "t_end".into(), reason: "must be positive".into() });
    }
    let n = c.len();
    let steps = (t_end / dt).round() as usize;
    let stride = stride.max(1);
    let mut y = vec![C64::new(0.0, 0.0); 1 + 2 * n];
    y[0] = C64::new(1.0, 0.0);
    let mut k = vec![vec![C64::new(0.0, 0.0); 1 + 2 * n]; 4];
    let mut tmp = y.clone();
    let mut out = DecayResult {
        times: vec![0.0],
        c_e: vec![y[0]],
        gram_norm: vec![1.0],
        c_a: vec![],
        c_b: vec![],
        dt,
        max_gram_drift: 0.0,
        predicted_rate: None,
        fitted_rate: None,
    };
    let split = |v: &[C64]| -> (C64, Vec<C64>, Vec<C64>) { (v[0], v[1..=n].to_vec(), v[n + 1..].to_vec()) };
    for s in 0..steps {
        let t = s as f64 * dt;
        for stage in 0..4 {
            let (tt, w) = match stage {
                0 => (t, 0.0),
                1 => (t + dt / 2.0, dt / 2.0),
                2 => (t + dt / 2.0, dt / 2.0),
                _ => (t + dt, dt),
            };
            for i in 0..y.len() {
                tmp[i] = if stage == 0 { y[i] } else { y[i] + k[stage - 1][i] * w };
            }
            let (ce, ca, cb) = (tmp[0], &tmp[1..=n], &tmp[n + 1..]);
            let mut d = std::mem::take(&mut k[stage]);
            derivative(c, tt, ce, ca, cb, &mut d);
            k[stage] = d;
        }
        for i in 0..y.len() {
            y[i] += (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]) * (dt / 6.0);
        }
        if (s + 1) % stride == 0 || s + 1 == steps {
            let (ce, ca, cb) = split(&y);
            let g = gram_norm(c, ce, &ca, &cb);
            out.times.push((s + 1) as f64 * dt);
            out.c_e.push(ce);
            out.gram_norm.push(g);
            out.max_gram_drift = out.max_gram_drift.max((g - 1.0).abs());
        }
    }
    let (_, ca, cb) = split(&y);
    out.c_a = ca;
    out.c_b = cb;
    out.predicted_rate = markov_rate(c).ok().map(|r| r.gamma_e);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub rate: f64,
    pub r_squared: f64,
    pub window: [f64; 2],
    pub points: usize,
    /// r² ≥ 0.99
    pub quality_ok: bool,
}

/// Least-squares slope of ln P_e(t) over `window`; rate = −slope.
pub fn fit_decay_rate(times: &[f64], population: &[f64], window: [f64; 2]) -> Result<DecayFit> {
    let [t1, t2] = window;
    if !(t2 > t1 && t1 >= 0.0) {
        return Err(Error::Validation { key: "fit_window".into(), reason: format!("[{t1}, {t2}] is not increasing") });
    }
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(population)
        .filter(|(&t, _)| t >= t1 && t <= t2)
        .map(|(&t, &p)| (t, p))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Validation { key: "fit_window".into(), reason: "fewer than 3 samples in window".into() });
    }
    if pts.iter().any(|&(_, p)| p <= 1e-12) {
        return Err(Error::Validation {
            key: "fit_window".into(),
            reason: "excited population drops below 1e-12 inside the window".into(),
        });
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1.ln() - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1.ln() - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(DecayFit { rate: -slope, r_squared, window, points: pts.len(), quality_ok: r_squared >= 0.99 })
}
