//! Overlap matrices, Petermann factors and the boundary couplings between
//! cavity and external mode sets.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::eigen::{ModeBasis, NhmMode, Polarization, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::field::{hermite_gaussian, inner_product, ComplexField, TransverseGrid, C64};
use crate::linalg;
use crate::optics::{fresnel_propagate, spectral_multiply};

pub const ASYMMETRY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrices {
    pub c: Array2<C64>,
    pub d: Array2<C64>,
    /// (axial index, polarization) of each row.
    pub labels: Vec<(u64, Polarization)>,
    pub asymmetry_c: f64,
    pub asymmetry_d: f64,
}

impl OverlapMatrices {
    pub fn len(&self) -> usize {
        self.c.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// ‖CD − E‖ and ‖DC − E‖ (max-abs).
    pub fn product_errors(&self) -> (f64, f64) {
        let e = linalg::identity(self.len());
        (linalg::max_abs(&(self.c.dot(&self.d) - &e)), linalg::max_abs(&(self.d.dot(&self.c) - &e)))
    }
}

fn hermitize(m: &Array2<C64>) -> (Array2<C64>, f64) {
    let h = linalg::adjoint(m);
    let asym = linalg::max_abs(&(m - &h));
    ((m + &h).mapv(|v| v * 0.5), asym)
}

fn gram(fields: &[&ComplexField], labels: &[(u64, Polarization)]) -> Result<Array2<C64>> {
    let n = fields.len();
    let mut g = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                g[[i, j]] = inner_product(fields[i], fields[j])?;
            }
        }
    }
    Ok(g)
}

/// C_nm = ⟨u_n, u_m⟩ and D_nm = ⟨v_n, v_m⟩, zero across (axial, polarization) blocks.
pub fn overlap_matrices(basis: &ModeBasis) -> Result<OverlapMatrices> {
    let labels: Vec<_> = basis.modes.iter().map(|m| (m.axial_index, m.polarization)).collect();
    let us: Vec<_> = basis.modes.iter().map(|m| &m.u).collect();
    let vs: Vec<_> = basis.modes.iter().map(|m| &m.v).collect();
    let (c, asymmetry_c) = hermitize(&gram(&us, &labels)?);
    let (d, asymmetry_d) = hermitize(&gram(&vs, &labels)?);
    if asymmetry_c > ASYMMETRY_TOL || asymmetry_d > ASYMMETRY_TOL {
        return Err(Error::Quadrature(format!(
            "overlap asymmetry C {asymmetry_c:.2e}, D {asymmetry_d:.2e}"
        )));
    }
    Ok(OverlapMatrices { c, d, labels, asymmetry_c, asymmetry_d })
}

/// K_n = Re D_nn.
pub fn petermann_factors(m: &OverlapMatrices) -> Result<Vec<f64>> {
    (0..m.len())
        .map(|n| {
            let dnn = m.d[[n, n]];
            if dnn.im.abs() > 1e-8 {
                Err(Error::Consistency(format!("Im D[{n},{n}] = {:.3e}", dnn.im)))
            } else {
                Ok(dnn.re)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterrelationResiduals {
    pub res_u: f64,
    pub res_v: f64,
}

/// How far U_n = Σ_m C_mn V_m and V_n = Σ_m D_mn U_m hold inside the computed span.
pub fn interrelation_residuals(basis: &ModeBasis, m: &OverlapMatrices) -> Result<InterrelationResiduals> {
    let n = basis.len();
    if m.len() != n {
        return Err(Error::Dimension(format!("basis has {n} modes, matrices {}", m.len())));
    }
    let mut res_u: f64 = 0.0;
    let mut res_v: f64 = 0.0;
    for i in 0..n {
        let mut ru = basis.modes[i].u.clone();
        let mut rv = basis.modes[i].v.clone();
        for j in 0..n {
            ru = ru.axpy(-m.c[[j, i]], &basis.modes[j].v)?;
            rv = rv.axpy(-m.d[[j, i]], &basis.modes[j].u)?;
        }
        res_u = res_u.max(ru.norm() / basis.modes[i].u.norm());
        res_v = res_v.max(rv.norm() / basis.modes[i].v.norm());
    }
    Ok(InterrelationResiduals { res_u, res_v })
}

/// Relative residual of f − Σ_n ⟨v_n, f⟩ u_n.
pub fn completeness_residual(basis: &ModeBasis, f: &ComplexField) -> Result<f64> {
    let mut r = f.clone();
    for m in &basis.modes {
        r = r.axpy(-inner_product(&m.v, f)?, &m.u)?;
    }
    Ok(r.norm() / f.norm())
}

/// One external mode sampled on the boundary plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalMode {
    pub u: ComplexField,
    pub v: ComplexField,
    pub k: f64,
    pub polarization: Polarization,
}

/// Orthonormal Hermite-Gaussian set with U_K = V_K, orders taken along x
/// (and y on a 2-D grid) in order of increasing total order.
pub fn hermite_gaussian_family(
    grid: &TransverseGrid,
    count: usize,
    waist: f64,
    k: f64,
    polarization: Polarization,
) -> Result<Vec<ExternalMode>> {
    let mut orders = Vec::new();
    let mut total = 0;
    while orders.len() < count {
        for ox in (0..=total).rev() {
            let oy = total - ox;
            if grid.is_strip() && oy > 0 {
                continue;
            }
            if orders.len() < count {
                orders.push((ox, oy));
            }
        }
        total += 1;
    }
    orders
        .into_iter()
        .map(|(ox, oy)| {
            let f = hermite_gaussian(grid, ox, oy, waist)?;
            Ok(ExternalMode { u: f.clone(), v: f, k, polarization })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceCouplings {
    pub i: Array2<C64>,
    pub j: Array2<C64>,
    pub k: Array2<C64>,
    pub l: Array2<C64>,
    pub script_i: Array2<C64>,
    pub script_j: Array2<C64>,
    pub script_k: Array2<C64>,
    pub script_l: Array2<C64>,
    pub z_b: f64,
}

impl SurfaceCouplings {
    pub fn max_magnitude(&self) -> f64 {
        [&self.i, &self.j, &self.k, &self.l, &self.script_i, &self.script_j, &self.script_k, &self.script_l]
            .iter()
            .map(|m| linalg::max_abs(m))
            .fold(0.0, f64::max)
    }
}

type Vec3 = [ComplexField; 3];

fn unit(p: Polarization) -> [f64; 3] {
    match p {
        Polarization::X => [1.0, 0.0, 0.0],
        Polarization::Y => [0.0, 1.0, 0.0],
    }
}

fn vector_field(f: &ComplexField, p: Polarization) -> Vec3 {
    let e = unit(p);
    [f.scaled(C64::new(e[0], 0.0)), f.scaled(C64::new(e[1], 0.0)), f.scaled(C64::new(e[2], 0.0))]
}

/// ∇×(α̂ f e^{ikz}) with the fast factor dropped and ∂_z acting only on it:
/// gradient (∂x f, ∂y f, ik f) crossed with α̂.
pub fn envelope_curl(f: &ComplexField, k: f64, p: Polarization) -> Vec3 {
    let gx = spectral_multiply(f, |kx, _| C64::new(0.0, kx));
    let gy = spectral_multiply(f, |_, ky| C64::new(0.0, ky));
    let gz = f.scaled(C64::new(0.0, k));
    let g = [gx, gy, gz];
    let a = unit(p);
    let term = |i: usize, j: usize, aj: f64, ai: f64| {
        g[i].scaled(C64::new(aj, 0.0)).axpy(C64::new(-ai, 0.0), &g[j]).expect("same grid")
    };
    // (g × a)_x = g_y a_z − g_z a_y, etc.
    [term(1, 2, a[2], a[1]), term(2, 0, a[0], a[2]), term(0, 1, a[1], a[0])]
}

/// ∫ ẑ·(a* × b) d²s.
fn z_triple(a: &Vec3, b: &Vec3) -> Result<C64> {
    Ok(inner_product(&a[0], &b[1])? - inner_product(&a[1], &b[0])?)
}

fn dot_vec(a: &Vec3, b: &Vec3) -> Result<C64> {
    Ok(inner_product(&a[0], &b[0])? + inner_product(&a[1], &b[1])? + inner_product(&a[2], &b[2])?)
}

fn mode_wavenumber(m: &NhmMode, fallback: f64) -> f64 {
    if m.omega > 0.0 {
        m.omega / SPEED_OF_LIGHT
    } else {
        fallback
    }
}

/// Boundary couplings between cavity modes (carried to plane `z_b`) and external modes; ħ = 1.
///
/// Entries follow the sign conventions iL = (1/k_n)∫V_n*·U_K and
/// −i𝒦 = (i/k_K²)∫ẑ·U_n*×(∇×V_K), with I, J, K and the other script entries alike.
pub fn surface_integrals(cavity: &ModeBasis, external: &[ExternalMode], z_b: f64) -> Result<SurfaceCouplings> {
    let nc = cavity.len();
    let ne = external.len();
    for e in external {
        if !e.u.grid.same_as(&cavity.grid) || !e.v.grid.same_as(&cavity.grid) {
            return Err(Error::Dimension("external mode grid differs from the cavity grid".into()));
        }
    }
    let kref = cavity.spec.wavenumber;
    let mut out = SurfaceCouplings {
        i: Array2::zeros((nc, ne)),
        j: Array2::zeros((nc, ne)),
        k: Array2::zeros((nc, ne)),
        l: Array2::zeros((nc, ne)),
        script_i: Array2::zeros((nc, ne)),
        script_j: Array2::zeros((nc, ne)),
        script_k: Array2::zeros((nc, ne)),
        script_l: Array2::zeros((nc, ne)),
        z_b,
    };
    let ext_curl: Vec<(Vec3, Vec3, Vec3, Vec3)> = external
        .iter()
        .map(|e| {
            (
                vector_field(&e.u, e.polarization),
                vector_field(&e.v, e.polarization),
                envelope_curl(&e.u, e.k, e.polarization),
                envelope_curl(&e.v, e.k, e.polarization),
            )
        })
        .collect();
    let minus_i = C64::new(0.0, -1.0);
    for (n, m) in cavity.modes.iter().enumerate() {
        let kn = mode_wavenumber(m, kref);
        let dz = z_b - m.u.z_label;
        let (u, v) = if dz == 0.0 {
            (m.u.clone(), m.v.clone())
        } else {
            (fresnel_propagate(&m.u, dz, kn)?, fresnel_propagate(&m.v, dz, kn)?)
        };
        let un = vector_field(&u, m.polarization);
        let vn = vector_field(&v, m.polarization);
        for (kk, e) in external.iter().enumerate() {
            let (ue, ve, cu, cv) = &ext_curl[kk];
            out.l[[n, kk]] = minus_i * dot_vec(&vn, ue)? / kn;
            out.k[[n, kk]] = minus_i * dot_vec(&un, ve)? / kn;
            out.j[[n, kk]] = minus_i * dot_vec(&vn, ve)? / kn;
            out.i[[n, kk]] = minus_i * dot_vec(&un, ue)? / kn;
            let s = -1.0 / (e.k * e.k);
            out.script_k[[n, kk]] = z_triple(&un, cv)? * s;
            out.script_l[[n, kk]] = z_triple(&vn, cu)? * s;
            out.script_i[[n, kk]] = z_triple(&un, cu)? * s;
            out.script_j[[n, kk]] = z_triple(&vn, cv)? * s;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaugeCorrection {
    pub z_component: ComplexField,
    pub divergence_before: f64,
    pub divergence_after: f64,
}

/// Longitudinal term (i/k)∇_T·U and the Coulomb-gauge residual with and without it.
/// The residual after correction is the paraxial estimate of ∂_z F_z.
pub fn gauge_correction(mode: &NhmMode, k: f64) -> GaugeCorrection {
    let axis = |kx: f64, ky: f64| match mode.polarization {
        Polarization::X => kx,
        Polarization::Y => ky,
    };
    let div = spectral_multiply(&mode.u, |kx, ky| C64::new(0.0, axis(kx, ky)));
    let z_component = div.scaled(C64::new(0.0, 1.0 / k));
    // ∂_z F_z = (i/k)∂_α ∂_z u with ∂_z u = (i/2k)∇²u
    let dzfz = spectral_multiply(&mode.u, |kx, ky| {
        let lap = -(kx * kx + ky * ky);
        C64::new(0.0, 1.0 / k) * C64::new(0.0, axis(kx, ky)) * C64::new(0.0, 1.0 / (2.0 * k)) * lap
    });
    GaugeCorrection { divergence_before: div.norm(), divergence_after: dzfz.norm(), z_component }
}
