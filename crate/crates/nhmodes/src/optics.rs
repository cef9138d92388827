//! Paraxial round-trip operator of a two-mirror resonator, built from FFT
//! Fresnel propagation, mirror phase screens and hard apertures.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField, TransverseGrid, C64};

pub const DENSE_CAP: usize = 4096;

/// One end mirror. `curvature_radius: None` is flat; `aperture_halfwidth: None` is unbounded.
/// Positive radius focuses (concave as seen from inside the cavity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mirror {
    #[serde(default)]
    pub curvature_radius: Option<f64>,
    #[serde(default)]
    pub aperture_halfwidth: Option<f64>,
}

impl Mirror {
    pub fn flat() -> Self {
        Mirror { curvature_radius: None, aperture_halfwidth: None }
    }
    pub fn curved(r: f64) -> Self {
        Mirror { curvature_radius: Some(r), aperture_halfwidth: None }
    }
    pub fn with_aperture(mut self, a: f64) -> Self {
        self.aperture_halfwidth = Some(a);
        self
    }
    fn g(&self, l: f64) -> f64 {
        match self.curvature_radius {
            Some(r) => 1.0 - l / r,
            None => 1.0,
        }
    }
}

/// Left mirror at z = 0, right mirror at z = l; the reference plane lies in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonatorSpec {
    pub cavity_length: f64,
    pub mirror_right: Mirror,
    pub mirror_left: Mirror,
    pub wavenumber: f64,
    #[serde(default)]
    pub reference_plane_z: f64,
}

impl ResonatorSpec {
    /// Positive-branch confocal unstable resonator: small convex output mirror
    /// (half-width `a`) on the right, large concave mirror on the left.
    pub fn confocal_unstable(magnification: f64, l: f64, a: f64, wavelength: f64) -> Self {
        let m = magnification;
        ResonatorSpec {
            cavity_length: l,
            mirror_right: Mirror::curved(-2.0 * l / (m - 1.0)).with_aperture(a),
            mirror_left: Mirror::curved(2.0 * m * l / (m - 1.0)),
            wavenumber: 2.0 * PI / wavelength,
            reference_plane_z: l / 2.0,
        }
    }

    /// Flat left mirror, concave right mirror of radius `r`, no apertures.
    pub fn half_symmetric_stable(l: f64, r: f64, wavelength: f64) -> Self {
        ResonatorSpec {
            cavity_length: l,
            mirror_right: Mirror::curved(r),
            mirror_left: Mirror::flat(),
            wavenumber: 2.0 * PI / wavelength,
            reference_plane_z: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Validation { key: key.into(), reason: reason.into() })
        };
        if !(self.cavity_length > 0.0 && self.cavity_length.is_finite()) {
            return bad("cavity_length", "must be positive");
        }
        if !(self.wavenumber > 0.0 && self.wavenumber.is_finite()) {
            return bad("wavenumber", "must be positive");
        }
        if !(0.0..=self.cavity_length).contains(&self.reference_plane_z) {
            return bad("reference_plane_z", "must lie between the mirrors");
        }
        for (name, m) in [("mirror_right", &self.mirror_right), ("mirror_left", &self.mirror_left)] {
            if let Some(a) = m.aperture_halfwidth {
                if !(a > 0.0) {
                    return bad(&format!("{name}.aperture_halfwidth"), "must be positive");
                }
            }
            if let Some(r) = m.curvature_radius {
                if r == 0.0 || !r.is_finite() {
                    return bad(&format!("{name}.curvature_radius"), "must be nonzero and finite");
                }
            }
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        2.0 * PI / self.wavenumber
    }

    pub fn g_product(&self) -> f64 {
        let l = self.cavity_length;
        self.mirror_left.g(l) * self.mirror_right.g(l)
    }

    /// Round-trip geometric magnification (1 for stable or marginal geometries).
    pub fn magnification(&self) -> f64 {
        let m = 2.0 * self.g_product() - 1.0;
        if m.abs() <= 1.0 {
            1.0
        } else {
            m.abs() + (m * m - 1.0).sqrt()
        }
    }

    pub fn is_unstable(&self) -> bool {
        self.magnification() > 1.0
    }

    /// Equivalent Fresnel number (M − 1/M)/2 · a²/(λ l) using the smallest aperture.
    pub fn equivalent_fresnel_number(&self) -> Option<f64> {
        let a = [self.mirror_right.aperture_halfwidth, self.mirror_left.aperture_halfwidth]
            .into_iter()
            .flatten()
            .fold(f64::INFINITY, f64::min);
        if !a.is_finite() {
            return None;
        }
        let m = self.magnification();
        Some(0.5 * (m - 1.0 / m) * a * a / (self.wavelength() * self.cavity_length))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Transpose,
    Adjoint,
}

#[derive(Clone)]
struct Fft2 {
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Option<Arc<dyn Fft<f64>>>,
    inv_y: Option<Arc<dyn Fft<f64>>>,
}

impl Fft2 {
    fn new(grid: &TransverseGrid) -> Self {
        let mut p = FftPlanner::new();
        let (fwd_y, inv_y) = if grid.is_strip() {
            (None, None)
        } else {
            (Some(p.plan_fft_forward(grid.ny)), Some(p.plan_fft_inverse(grid.ny)))
        };
        Fft2 { fwd_x: p.plan_fft_forward(grid.nx), inv_x: p.plan_fft_inverse(grid.nx), fwd_y, inv_y }
    }

    fn run(&self, a: &mut Array2<C64>, inverse: bool) {
        let (fx, fy) = if inverse { (&self.inv_x, &self.inv_y) } else { (&self.fwd_x, &self.fwd_y) };
        for mut row in a.axis_iter_mut(Axis(0)) {
            let mut buf: Vec<C64> = row.to_vec();
            fx.process(&mut buf);
            row.iter_mut().zip(buf).for_each(|(r, b)| *r = b);
        }
        if let Some(fy) = fy {
            for mut col in a.axis_iter_mut(Axis(1)) {
                let mut buf: Vec<C64> = col.to_vec();
                fy.process(&mut buf);
                col.iter_mut().zip(buf).for_each(|(c, b)| *c = b);
            }
        }
        if inverse {
            let s = 1.0 / a.len() as f64;
            a.mapv_inplace(|v| v * s);
        }
    }
}

fn freq(i: usize, n: usize, d: f64) -> f64 {
    let k = if i < n.div_ceil(2) { i as f64 } else { i as f64 - n as f64 };
    2.0 * PI * k / (n as f64 * d)
}

/// |κ|² on the FFT frequency grid.
fn kappa_sq(grid: &TransverseGrid) -> Array2<f64> {
    Array2::from_shape_fn(grid.shape(), |(iy, ix)| {
        let kx = freq(ix, grid.nx, grid.dx);
        let ky = if grid.is_strip() { 0.0 } else { freq(iy, grid.ny, grid.dy) };
        kx * kx + ky * ky
    })
}

/// Multiplies the spectrum of `f` by `m(kx, ky)`; no apodization, no sampling check.
/// The Nyquist bin is zeroed for odd symbols such as a first derivative.
pub fn spectral_multiply(f: &ComplexField, m: impl Fn(f64, f64) -> C64) -> ComplexField {
    let g = f.grid;
    let fft = Fft2::new(&g);
    let mut v = f.values.clone();
    fft.run(&mut v, false);
    for ((iy, ix), x) in v.indexed_iter_mut() {
        let nyq = (g.nx.is_multiple_of(2) && ix == g.nx / 2) || (!g.is_strip() && g.ny.is_multiple_of(2) && iy == g.ny / 2);
        let kx = freq(ix, g.nx, g.dx);
        let ky = if g.is_strip() { 0.0 } else { freq(iy, g.ny, g.dy) };
        let s = m(kx, ky);
        *x = if nyq && (m(-kx, -ky) - s).norm() > 1e-300 { C64::new(0.0, 0.0) } else { *x * s };
    }
    fft.run(&mut v, true);
    ComplexField { grid: g, values: v, z_label: f.z_label }
}

/// Longest distance for which the Fresnel transfer phase stays unaliased on `grid`.
pub fn max_fresnel_distance(grid: &TransverseGrid, k: f64) -> f64 {
    let lim = |n: usize, d: f64| k * n as f64 * d * d / (2.0 * PI);
    if grid.is_strip() {
        lim(grid.nx, grid.dx)
    } else {
        lim(grid.nx, grid.dx).min(lim(grid.ny, grid.dy))
    }
}

fn check_sampling(grid: &TransverseGrid, distance: f64, k: f64) -> Result<()> {
    let lim = max_fresnel_distance(grid, k);
    if distance.abs() > lim * (1.0 + 1e-12) {
        return Err(Error::Sampling(format!(
            "propagation distance {distance:e} exceeds the unaliased limit {lim:e} for this grid"
        )));
    }
    Ok(())
}

fn transfer(grid: &TransverseGrid, distance: f64, k: f64) -> Array2<C64> {
    kappa_sq(grid).mapv(|q| C64::from_polar(1.0, -distance * q / (2.0 * k)))
}

fn mirror_screen(grid: &TransverseGrid, m: &Mirror, k: f64) -> Result<Array2<C64>> {
    if let Some(a) = m.aperture_halfwidth {
        if a < 2.0 * grid.dx || (!grid.is_strip() && a < 2.0 * grid.dy) {
            return Err(Error::Resolution(format!("aperture {a:e} spans fewer than two cells")));
        }
    }
    let xs = grid.xs();
    let ys = grid.ys();
    Ok(Array2::from_shape_fn(grid.shape(), |(iy, ix)| {
        let s2 = xs[ix] * xs[ix] + ys[iy] * ys[iy];
        let inside = m.aperture_halfwidth.is_none_or(|a| s2.sqrt() < a);
        if !inside {
            return C64::new(0.0, 0.0);
        }
        match m.curvature_radius {
            Some(r) => C64::from_polar(1.0, -k * s2 / r),
            None => C64::new(1.0, 0.0),
        }
    }))
}

/// Fresnel propagation of the slowly varying envelope by `distance`, followed
/// by the guard-band apodization.
pub fn fresnel_propagate(f: &ComplexField, distance: f64, k: f64) -> Result<ComplexField> {
    if distance == 0.0 {
        return Err(Error::Sampling("propagation distance must be nonzero".into()));
    }
    check_sampling(&f.grid, distance, k)?;
    let fft = Fft2::new(&f.grid);
    let h = transfer(&f.grid, distance, k);
    let mut v = f.values.clone();
    fft.run(&mut v, false);
    v *= &h;
    fft.run(&mut v, true);
    if f.grid.guard_fraction > 0.0 {
        let w = f.grid.apodization();
        Zip::from(&mut v).and(&w).for_each(|a, &b| *a *= b);
    }
    Ok(ComplexField { grid: f.grid, values: v, z_label: f.z_label + distance })
}

/// Mirror phase exp(−ik|s|²/R) times the hard aperture indicator.
pub fn apply_mirror(f: &ComplexField, mirror: &Mirror, k: f64) -> Result<ComplexField> {
    let s = mirror_screen(&f.grid, mirror, k)?;
    Ok(ComplexField { grid: f.grid, values: &f.values * &s, z_label: f.z_label })
}

#[derive(Clone)]
enum Stage {
    Propagate(Array2<C64>),
    Screen(Array2<C64>),
}

/// Matrix-free £, £ᵀ or £† on a fixed grid.
#[derive(Clone)]
pub struct RoundTripOperator {
    pub spec: ResonatorSpec,
    pub grid: TransverseGrid,
    pub direction: Direction,
    stages: Vec<Stage>,
    apod: Option<Array2<f64>>,
    fft: Fft2,
}

impl fmt::Debug for RoundTripOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RoundTripOperator")
            .field("spec", &self.spec)
            .field("grid", &self.grid)
            .field("direction", &self.direction)
            .finish()
    }
}

impl RoundTripOperator {
    pub fn new(spec: ResonatorSpec, grid: TransverseGrid, direction: Direction) -> Result<Self> {
        spec.validate()?;
        grid.validate()?;
        let k = spec.wavenumber;
        let l = spec.cavity_length;
        let d_right = l - spec.reference_plane_z;
        let d_left = spec.reference_plane_z;
        let mut stages = Vec::new();
        let prop = |d: f64, stages: &mut Vec<Stage>| -> Result<()> {
            if d != 0.0 {
                check_sampling(&grid, d, k)?;
                stages.push(Stage::Propagate(transfer(&grid, d, k)));
            }
            Ok(())
        };
        prop(d_right, &mut stages)?;
        stages.push(Stage::Screen(mirror_screen(&grid, &spec.mirror_right, k)?));
        prop(l, &mut stages)?;
        stages.push(Stage::Screen(mirror_screen(&grid, &spec.mirror_left, k)?));
        prop(d_left, &mut stages)?;
        let apod = (grid.guard_fraction > 0.0).then(|| grid.apodization());
        Ok(RoundTripOperator { spec, grid, direction, stages, apod, fft: Fft2::new(&grid) })
    }

    pub fn with_direction(&self, direction: Direction) -> Self {
        let mut o = self.clone();
        o.direction = direction;
        o
    }

    fn apodize(&self, v: &mut Array2<C64>) {
        if let Some(w) = &self.apod {
            Zip::from(v).and(w).for_each(|a, &b| *a *= b);
        }
    }

    fn spectral(&self, v: &mut Array2<C64>, h: &Array2<C64>, conj: bool) {
        self.fft.run(v, false);
        if conj {
            Zip::from(&mut *v).and(h).for_each(|a, &b| *a *= b.conj());
        } else {
            *v *= h;
        }
        self.fft.run(v, true);
    }

    /// Applies the operator to raw sample values (shape ny × nx).
    pub fn apply_values(&self, v: &mut Array2<C64>) {
        match self.direction {
            Direction::Forward => {
                for s in &self.stages {
                    match s {
                        Stage::Propagate(h) => {
                            self.spectral(v, h, false);
                            self.apodize(v);
                        }
                        Stage::Screen(m) => *v *= m,
                    }
                }
            }
            Direction::Adjoint => {
                for s in self.stages.iter().rev() {
                    match s {
                        Stage::Propagate(h) => {
                            self.apodize(v);
                            self.spectral(v, h, true);
                        }
                        Stage::Screen(m) => Zip::from(&mut *v).and(m).for_each(|a, &b| *a *= b.conj()),
                    }
                }
            }
            Direction::Transpose => {
                for s in self.stages.iter().rev() {
                    match s {
                        Stage::Propagate(h) => {
                            self.apodize(v);
                            self.spectral(v, h, false);
                        }
                        Stage::Screen(m) => *v *= m,
                    }
                }
            }
        }
    }

    pub fn apply_slice(&self, x: &[C64]) -> Vec<C64> {
        let mut v = Array2::from_shape_vec(self.grid.shape(), x.to_vec()).expect("length nx*ny");
        self.apply_values(&mut v);
        v.into_iter().collect()
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }
}

pub fn round_trip(f: &ComplexField, op: &RoundTripOperator) -> Result<ComplexField> {
    if !f.grid.same_as(&op.grid) {
        return Err(Error::Dimension("field grid differs from operator grid".into()));
    }
    let mut v = f.values.clone();
    op.apply_values(&mut v);
    Ok(ComplexField { grid: f.grid, values: v, z_label: f.z_label })
}

/// Column j is the operator applied to the j-th unit sample.
pub fn dense_kernel(op: &RoundTripOperator) -> Result<Array2<C64>> {
    dense_kernel_capped(op, DENSE_CAP)
}

pub fn dense_kernel_capped(op: &RoundTripOperator, cap: usize) -> Result<Array2<C64>> {
    let n = op.dim();
    if n > cap {
        return Err(Error::Size(format!("dense kernel of size {n} exceeds cap {cap}")));
    }
    let mut k = Array2::zeros((n, n));
    let mut e = vec![C64::new(0.0, 0.0); n];
    for j in 0..n {
        e[j] = C64::new(1.0, 0.0);
        let col = op.apply_slice(&e);
        e[j] = C64::new(0.0, 0.0);
        k.column_mut(j).iter_mut().zip(col).for_each(|(a, b)| *a = b);
    }
    Ok(k)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::field::{hermite_gaussian, inner_product};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: TransverseGrid, rng: &mut ChaCha8Rng) -> ComplexField {
        let data = (0..grid.len()).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        ComplexField::from_vec(grid, data).unwrap()
    }

    pub(crate) fn strip_unstable() -> (ResonatorSpec, TransverseGrid) {
        let a = 1.0e-3;
        let lam = 1.0e-6;
        let l = 0.75 * a * a / (5.0 * lam);
        let spec = ResonatorSpec::confocal_unstable(2.0, l, a, lam);
        let grid = TransverseGrid::strip(256, 10.0 * a / 256.0, 0.15).unwrap();
        (spec, grid)
    }

    /// Second-moment radius w with |u|² ∝ exp(−2x²/w²), so w = 2·sqrt(<x²>).
    fn second_moment_width(f: &ComplexField) -> f64 {
        let xs = f.grid.xs();
        let p: f64 = f.values.iter().map(|v| v.norm_sqr()).sum();
        let m2: f64 = f.values.iter().zip(xs.iter()).map(|(v, x)| v.norm_sqr() * x * x).sum();
        2.0 * (m2 / p).sqrt()
    }

    #[test]
    fn gaussian_width_follows_beam_law() {
        let w0 = 0.2e-3;
        let lam = 1.0e-6;
        let k = 2.0 * PI / lam;
        let zr = k * w0 * w0 / 2.0;
        let grid = TransverseGrid::strip(512, 64.0 * w0 / 512.0, 0.1).unwrap();
        let g0 = hermite_gaussian(&grid, 0, 0, w0).unwrap();
        for &z in &[0.3 * zr, zr, 1.7 * zr] {
            let out = fresnel_propagate(&g0, z, k).unwrap();
            let w = second_moment_width(&out);
            let expect = w0 * (1.0 + (z / zr).powi(2)).sqrt();
            assert!((w / expect - 1.0).abs() < 5e-3, "z={z} w={w} expect={expect}");
        }
    }

    /// Analytic 1-D beam x^n q^{-(n+1/2)} exp(ikx²/(2q)), q = z − i z_R, for n = 0, 1.
    fn analytic_beam(grid: TransverseGrid, n: i32, w0: f64, k: f64, z: f64) -> ComplexField {
        let zr = k * w0 * w0 / 2.0;
        let q = C64::new(z, -zr);
        ComplexField::from_fn(grid, |x, _| {
            let pre = q.powf(-(n as f64 + 0.5)) * x.powi(n);
            pre * (C64::new(0.0, k * x * x / 2.0) / q).exp()
        })
    }

    fn overlap(a: &ComplexField, b: &ComplexField) -> f64 {
        inner_product(a, b).unwrap().norm() / (a.norm() * b.norm())
    }

    #[test]
    fn hg1_propagates_like_analytic_beam() {
        let w0 = 0.2e-3;
        let k = 2.0 * PI / 1.0e-6;
        let grid = TransverseGrid::strip(512, 64.0 * w0 / 512.0, 0.1).unwrap();
        let start = analytic_beam(grid, 1, w0, k, 0.0);
        let z = 0.2;
        let out = fresnel_propagate(&start, z, k).unwrap();
        let expect = analytic_beam(grid, 1, w0, k, z);
        assert!(overlap(&out, &expect) > 1.0 - 1e-6);
        // phase included, not only modulus
        let c = inner_product(&expect, &out).unwrap() / (out.norm() * expect.norm());
        let start_c = inner_product(&analytic_beam(grid, 1, w0, k, 0.0), &start).unwrap();
        assert!((c.arg() - start_c.arg()).abs() < 1e-4 || c.re > 0.999);
    }

    #[test]
    fn propagate_and_back() {
        let w0 = 0.4e-3;
        let k = 2.0 * PI / 1.0e-6;
        let grid = TransverseGrid::strip(512, 16.0 * w0 / 512.0 * 2.0, 0.1).unwrap();
        let g = hermite_gaussian(&grid, 2, 0, w0).unwrap();
        let there = fresnel_propagate(&g, 0.2, k).unwrap();
        let back = fresnel_propagate(&there, -0.2, k).unwrap();
        let mask = grid.interior_mask();
        let dev = back
            .values
            .iter()
            .zip(g.values.iter())
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(dev < 1e-10, "{dev}");
    }

    #[test]
    fn aliasing_distance_rejected() {
        let grid = TransverseGrid::strip(64, 1e-4, 0.1).unwrap();
        let k = 2.0 * PI / 1e-6;
        let f = ComplexField::zeros(grid);
        let lim = max_fresnel_distance(&grid, k);
        assert!(fresnel_propagate(&f, 0.9 * lim, k).is_ok());
        assert!(matches!(fresnel_propagate(&f, 1.1 * lim, k), Err(Error::Sampling(_))));
    }

    #[test]
    fn flat_open_mirror_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = TransverseGrid::new(16, 12, 0.1, 0.1, 0.0).unwrap();
        let f = random_field(grid, &mut rng);
        let out = apply_mirror(&f, &Mirror::flat(), 1e6).unwrap();
        assert_eq!(out.values, f.values);
    }

    #[test]
    fn aperture_keeps_only_inside_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = TransverseGrid::new(32, 32, 0.1, 0.1, 0.0).unwrap();
        let f = random_field(grid, &mut rng);
        let a = 0.9;
        let out = apply_mirror(&f, &Mirror::curved(3.0).with_aperture(a), 50.0).unwrap();
        let (xs, ys) = (grid.xs(), grid.ys());
        let mut inside = 0.0;
        for iy in 0..32 {
            for ix in 0..32 {
                if (xs[ix].powi(2) + ys[iy].powi(2)).sqrt() < a {
                    inside += f.values[[iy, ix]].norm_sqr() * grid.cell_area();
                }
            }
        }
        assert!((out.norm().powi(2) - inside).abs() < 1e-12 * inside);
        assert!(matches!(
            apply_mirror(&f, &Mirror::flat().with_aperture(0.15), 1.0),
            Err(Error::Resolution(_))
        ));
    }

    #[test]
    fn focusing_mirror_obeys_lens_law() {
        let w0 = 0.5e-3;
        let k = 2.0 * PI / 1.0e-6;
        let zr = k * w0 * w0 / 2.0;
        let grid = TransverseGrid::strip(512, 16.0 * w0 / 512.0, 0.0).unwrap();
        let z = 0.4;
        let r = 2.0;
        let before = analytic_beam(grid, 0, w0, k, z);
        let after = apply_mirror(&before, &Mirror::curved(r), k).unwrap();
        // 1/q_out = 1/q_in − 2/R, read off from the log-derivative of the field
        let q_in = C64::new(z, -zr);
        let inv_q_out = q_in.inv() - 2.0 / r;
        let xs = grid.xs();
        let i = 300;
        let (x1, x2) = (xs[i], xs[i + 1]);
        let ratio = after.values[[0, i + 1]] / after.values[[0, i]];
        let measured = ratio.ln() / C64::new(0.0, k * (x2 * x2 - x1 * x1) / 2.0);
        assert!((measured - inv_q_out).norm() < 1e-6 * inv_q_out.norm());
    }

    #[test]
    fn zero_in_zero_out_and_linearity() {
        let (spec, grid) = strip_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dir in [Direction::Forward, Direction::Adjoint, Direction::Transpose] {
            let op = RoundTripOperator::new(spec, grid, dir).unwrap();
            let z = round_trip(&ComplexField::zeros(grid), &op).unwrap();
            assert!(z.values.iter().all(|v| v.norm() == 0.0));
            let f = random_field(grid, &mut rng);
            let g = random_field(grid, &mut rng);
            let (a, b) = (C64::new(0.3, -1.2), C64::new(-0.7, 0.4));
            let lhs = round_trip(&f.scaled(a).axpy(b, &g).unwrap(), &op).unwrap();
            let rhs = round_trip(&f, &op).unwrap().scaled(a).axpy(b, &round_trip(&g, &op).unwrap()).unwrap();
            let scale = rhs.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
            assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12 * scale);
        }
    }

    #[test]
    fn adjoint_identity_and_passivity() {
        let (spec, grid) = strip_unstable();
        let fwd = RoundTripOperator::new(spec, grid, Direction::Forward).unwrap();
        let adj = fwd.with_direction(Direction::Adjoint);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let f = random_field(grid, &mut rng);
            let g = random_field(grid, &mut rng);
            let lf = round_trip(&f, &fwd).unwrap();
            let lhs = inner_product(&round_trip(&g, &adj).unwrap(), &f).unwrap();
            let rhs = inner_product(&g, &lf).unwrap();
            assert!((lhs - rhs).norm() <= 1e-10 * f.norm() * g.norm());
            assert!(lf.norm() <= f.norm() + 1e-9);
        }
    }

    #[test]
    fn dense_kernel_matches_matrix_free_and_transpose() {
        let (spec, _) = strip_unstable();
        let grid = TransverseGrid::strip(128, 10.0e-3 / 128.0, 0.15).unwrap();
        let fwd = RoundTripOperator::new(spec, grid, Direction::Forward).unwrap();
        let kf = dense_kernel(&fwd).unwrap();
        let kt = dense_kernel(&fwd.with_direction(Direction::Transpose)).unwrap();
        let ka = dense_kernel(&fwd.with_direction(Direction::Adjoint)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<C64> = (0..128).map(|_| C64::new(rng.random(), rng.random())).collect();
        let mf = fwd.apply_slice(&v);
        let dv = kf.dot(&ndarray::Array1::from(v.clone()));
        let dev = mf.iter().zip(dv.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(dev <= 1e-12);
        let t_dev = (&kt - &kf.t()).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(t_dev <= 1e-12, "{t_dev}");
        let a_dev = (&ka - &kf.t().mapv(|v| v.conj())).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(a_dev <= 1e-12);
    }

    #[test]
    fn dense_cap_enforced() {
        let grid = TransverseGrid::new(80, 80, 1e-4, 1e-4, 0.1).unwrap();
        let spec = ResonatorSpec::half_symmetric_stable(0.1, 0.3, 1e-6);
        let op = RoundTripOperator::new(spec, grid, Direction::Forward).unwrap();
        assert!(matches!(dense_kernel(&op), Err(Error::Size(_))));
    }

    #[test]
    fn geometry_derived_quantities() {
        let spec = ResonatorSpec::confocal_unstable(2.0, 1.0, 1e-3, 1e-7);
        assert!((spec.magnification() - 2.0).abs() < 1e-12);
        assert!(spec.is_unstable());
        let neq = spec.equivalent_fresnel_number().unwrap();
        assert!((neq - 0.75 * 1e-6 / 1e-7).abs() < 1e-9);
        let stable = ResonatorSpec::half_symmetric_stable(0.5, 1.5, 1e-6);
        assert_eq!(stable.magnification(), 1.0);
        let mut bad = stable;
        bad.cavity_length = -1.0;
        assert!(matches!(bad.validate(), Err(Error::Validation { key, .. }) if key == "cavity_length"));
    }
}
