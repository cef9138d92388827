//! Transverse grids, complex fields on them, and the NHMF binary field format.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Uniform Cartesian grid centred on the optical axis.
///
/// `ny == 1` is a strip (one transverse dimension); the strip constructor
/// fixes `dy = 1` so that integrals reduce to line integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransverseGrid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    #[serde(default)]
    pub guard_fraction: f64,
}

impl TransverseGrid {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64, guard_fraction: f64) -> Result<Self> {
        let g = TransverseGrid { nx, ny, dx, dy, guard_fraction };
        g.validate()?;
        Ok(g)
    }

    pub fn strip(nx: usize, dx: f64, guard_fraction: f64) -> Result<Self> {
        Self::new(nx, 1, dx, 1.0, guard_fraction)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Validation { key: key.into(), reason: reason.into() })
        };
        if self.nx < 2 {
            return bad("nx", "must be at least 2");
        }
        if self.ny == 0 {
            return bad("ny", "must be 1 (strip) or at least 2");
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return bad("dx", "must be positive");
        }
        if !(self.dy > 0.0 && self.dy.is_finite()) {
            return bad("dy", "must be positive");
        }
        if !(0.0..0.5).contains(&self.guard_fraction) {
            return bad("guard_fraction", "must lie in [0, 0.5)");
        }
        Ok(())
    }

    pub fn is_strip(&self) -> bool {
        self.ny == 1
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.nx as f64 * self.dx, self.ny as f64 * self.dy)
    }

    fn axis(n: usize, d: f64) -> Array1<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        Array1::from_shape_fn(n, |i| (i as f64 - c) * d)
    }

    pub fn xs(&self) -> Array1<f64> {
        Self::axis(self.nx, self.dx)
    }

    /// Strip grids report a single y = 0 sample.
    pub fn ys(&self) -> Array1<f64> {
        if self.is_strip() {
            Array1::zeros(1)
        } else {
            Self::axis(self.ny, self.dy)
        }
    }

    /// Number of samples in the guard band on each side of an axis of length `n`.
    pub fn guard_cells(&self, n: usize) -> usize {
        (self.guard_fraction * n as f64).round() as usize
    }

    fn axis_window(&self, n: usize) -> Array1<f64> {
        let g = self.guard_cells(n);
        Array1::from_shape_fn(n, |i| {
            let j = i.min(n - 1 - i);
            if j >= g {
                1.0
            } else {
                0.5 * (1.0 - (std::f64::consts::PI * (j as f64 + 0.5) / g as f64).cos())
            }
        })
    }

    /// Raised-cosine apodization over the guard band; ones in the interior.
    pub fn apodization(&self) -> Array2<f64> {
        let wx = self.axis_window(self.nx);
        let wy = if self.is_strip() { Array1::ones(1) } else { self.axis_window(self.ny) };
        Array2::from_shape_fn(self.shape(), |(iy, ix)| wy[iy] * wx[ix])
    }

    /// True on samples outside the guard band.
    pub fn interior_mask(&self) -> Array2<bool> {
        let gx = self.guard_cells(self.nx);
        let gy = if self.is_strip() { 0 } else { self.guard_cells(self.ny) };
        Array2::from_shape_fn(self.shape(), |(iy, ix)| {
            ix >= gx && ix < self.nx - gx && iy >= gy && iy < self.ny - gy
        })
    }

    pub fn same_as(&self, other: &TransverseGrid) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.dx == other.dx && self.dy == other.dy
    }
}

/// Complex envelope sampled on a grid, indexed `[iy, ix]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub grid: TransverseGrid,
    pub values: Array2<C64>,
    pub z_label: f64,
}

impl ComplexField {
    pub fn new(grid: TransverseGrid, values: Array2<C64>, z_label: f64) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(Error::Dimension(format!(
                "values shape {:?} does not match grid {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Format("field contains non-finite values".into()));
        }
        Ok(ComplexField { grid, values, z_label })
    }

    pub fn zeros(grid: TransverseGrid) -> Self {
        ComplexField { grid, values: Array2::zeros(grid.shape()), z_label: 0.0 }
    }

    pub fn from_fn(grid: TransverseGrid, f: impl Fn(f64, f64) -> C64) -> Self {
        let xs = grid.xs();
        let ys = grid.ys();
        let values = Array2::from_shape_fn(grid.shape(), |(iy, ix)| f(xs[ix], ys[iy]));
        ComplexField { grid, values, z_label: 0.0 }
    }

    /// Field from a flat row-major vector of length nx·ny.
    pub fn from_vec(grid: TransverseGrid, data: Vec<C64>) -> Result<Self> {
        let values = Array2::from_shape_vec(grid.shape(), data)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(ComplexField { grid, values, z_label: 0.0 })
    }

    pub fn to_vec(&self) -> Vec<C64> {
        self.values.iter().copied().collect()
    }

    pub fn with_z(mut self, z: f64) -> Self {
        self.z_label = z;
        self
    }

    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell_area()).sqrt()
    }

    pub fn scaled(&self, a: C64) -> Self {
        ComplexField { grid: self.grid, values: &self.values * a, z_label: self.z_label }
    }

    pub fn scale_mut(&mut self, a: C64) {
        self.values.mapv_inplace(|v| v * a);
    }

    pub fn conj(&self) -> Self {
        ComplexField { grid: self.grid, values: self.values.mapv(|v| v.conj()), z_label: self.z_label }
    }

    fn check_grid(&self, other: &ComplexField) -> Result<()> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::Dimension("fields live on different grids".into()))
        }
    }

    /// `self + a·other`
    pub fn axpy(&self, a: C64, other: &ComplexField) -> Result<Self> {
        self.check_grid(other)?;
        let mut out = self.clone();
        Zip::from(&mut out.values).and(&other.values).for_each(|o, &b| *o += a * b);
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &ComplexField) -> Result<f64> {
        self.check_grid(other)?;
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }

    /// Index and value of the largest-modulus sample.
    pub fn argmax_abs(&self) -> (usize, C64) {
        let mut best = (0, C64::new(0.0, 0.0));
        let mut bm = -1.0;
        for (i, v) in self.values.iter().enumerate() {
            let m = v.norm_sqr();
            if m > bm {
                bm = m;
                best = (i, *v);
            }
        }
        best
    }
}

/// Riemann-sum inner product Σ conj(f)·g·dx·dy.
pub fn inner_product(f: &ComplexField, g: &ComplexField) -> Result<C64> {
    f.check_grid(g)?;
    let s: C64 = f.values.iter().zip(g.values.iter()).map(|(a, b)| a.conj() * b).sum();
    Ok(s * f.grid.cell_area())
}

/// Normalized Hermite function of order n at t (orthonormal in t).
pub fn hermite_function(n: usize, t: f64) -> f64 {
    let mut p0 = std::f64::consts::PI.powf(-0.25) * (-0.5 * t * t).exp();
    if n == 0 {
        return p0;
    }
    let mut p1 = std::f64::consts::SQRT_2 * t * p0;
    for k in 1..n {
        let kf = k as f64;
        let p2 = (2.0 / (kf + 1.0)).sqrt() * t * p1 - (kf / (kf + 1.0)).sqrt() * p0;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// 1-D Hermite-Gaussian with 1/e field radius `waist`, unit L2 norm on the line.
pub fn hg_1d(n: usize, x: f64, waist: f64) -> f64 {
    let s = std::f64::consts::SQRT_2 / waist;
    s.sqrt() * hermite_function(n, s * x)
}

/// Unit-norm Hermite-Gaussian HG(order_x, order_y) at its waist, centred on the axis.
pub fn hermite_gaussian(
    grid: &TransverseGrid,
    order_x: usize,
    order_y: usize,
    waist: f64,
) -> Result<ComplexField> {
    if !(waist > 0.0) {
        return Err(Error::Resolution("waist must be positive".into()));
    }
    let (ex, ey) = grid.extent();
    if waist < 4.0 * grid.dx || waist > ex / 4.0 {
        return Err(Error::Resolution(format!(
            "waist {waist:e} not resolvable on x axis (dx {:e}, extent {ex:e})",
            grid.dx
        )));
    }
    if grid.is_strip() {
        if order_y != 0 {
            return Err(Error::Dimension("strip grids carry only order_y = 0".into()));
        }
    } else if waist < 4.0 * grid.dy || waist > ey / 4.0 {
        return Err(Error::Resolution(format!(
            "waist {waist:e} not resolvable on y axis (dy {:e}, extent {ey:e})",
            grid.dy
        )));
    }
    let strip = grid.is_strip();
    let mut f = ComplexField::from_fn(*grid, |x, y| {
        let fy = if strip { 1.0 } else { hg_1d(order_y, y, waist) };
        C64::new(hg_1d(order_x, x, waist) * fy, 0.0)
    });
    let n = f.norm();
    f.scale_mut(C64::new(1.0 / n, 0.0));
    Ok(f)
}

const NHMF_MAGIC: &[u8; 4] = b"NHMF";
pub const NHMF_VERSION: u32 = 1;

pub fn write_nhmf<W: Write>(mut w: W, f: &ComplexField) -> Result<()> {
    w.write_all(NHMF_MAGIC)?;
    w.write_all(&NHMF_VERSION.to_le_bytes())?;
    w.write_all(&(f.grid.nx as u32).to_le_bytes())?;
    w.write_all(&(f.grid.ny as u32).to_le_bytes())?;
    for v in [f.grid.dx, f.grid.dy, f.z_label] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(16 * f.grid.len());
    for v in f.values.iter() {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads an NHMF stream. The guard fraction is not stored and is supplied by the caller.
pub fn read_nhmf<R: Read>(mut r: R, guard_fraction: f64) -> Result<ComplexField> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != NHMF_MAGIC {
        return Err(Error::Format("bad NHMF magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    let mut u32_ = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4))
    };
    let version = u32_(&mut r)?;
    if version != NHMF_VERSION {
        return Err(Error::Format(format!("unsupported NHMF version {version}")));
    }
    let nx = u32_(&mut r)? as usize;
    let ny = u32_(&mut r)? as usize;
    let mut f64_ = |r: &mut R| -> Result<f64> {
        r.read_exact(&mut b8)?;
        Ok(f64::from_le_bytes(b8))
    };
    let dx = f64_(&mut r)?;
    let dy = f64_(&mut r)?;
    let z = f64_(&mut r)?;
    let grid = TransverseGrid::new(nx, ny, dx, dy, guard_fraction)?;
    let mut raw = vec![0u8; 16 * nx * ny];
    r.read_exact(&mut raw)?;
    let data: Vec<C64> = raw
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().unwrap());
            let im = f64::from_le_bytes(c[8..].try_into().unwrap());
            C64::new(re, im)
        })
        .collect();
    let f = ComplexField::from_vec(grid, data)?;
    ComplexField::new(f.grid, f.values, z)
}

pub fn save_nhmf(path: &Path, f: &ComplexField) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_nhmf(std::io::BufWriter::new(file), f)
}

pub fn load_nhmf(path: &Path, guard_fraction: f64) -> Result<ComplexField> {
    let file = std::fs::File::open(path)?;
    read_nhmf(std::io::BufReader::new(file), guard_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strip() -> TransverseGrid {
        TransverseGrid::strip(256, 0.05, 0.1).unwrap()
    }

    #[test]
    fn constant_strip_integral() {
        let g = TransverseGrid::strip(8, 0.5, 0.0).unwrap();
        let one = ComplexField::from_fn(g, |_, _| C64::new(1.0, 0.0));
        assert_eq!(inner_product(&one, &one).unwrap(), C64::new(4.0, 0.0));
    }

    #[test]
    fn gaussian_normalized_and_parity() {
        let g = strip();
        let h0 = hermite_gaussian(&g, 0, 0, 1.0).unwrap();
        let h1 = hermite_gaussian(&g, 1, 0, 1.0).unwrap();
        let h2 = hermite_gaussian(&g, 2, 0, 1.0).unwrap();
        assert!((inner_product(&h0, &h0).unwrap() - 1.0).norm() < 1e-10);
        assert!(inner_product(&h0, &h1).unwrap().norm() < 1e-12);
        assert!(inner_product(&h0, &h2).unwrap().norm() < 1e-10);
        let n = g.nx;
        for i in 0..n {
            let a = h1.values[[0, i]];
            let b = h1.values[[0, n - 1 - i]];
            assert!((a + b).norm() < 1e-15);
        }
    }

    #[test]
    fn hermite_function_matches_explicit_polynomials() {
        // H_3(t) = 8t^3 - 12t, normalization 1/sqrt(2^3 3! sqrt(pi))
        for &t in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let h3: f64 = 8.0 * t * t * t - 12.0 * t;
            let norm = 1.0 / (8.0 * 6.0 * std::f64::consts::PI.sqrt()).sqrt();
            let expect = norm * h3 * (-0.5 * t * t).exp();
            assert!((hermite_function(3, t) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn hg_gram_is_identity_2d() {
        let w = 1.0;
        let g = TransverseGrid::new(64, 64, w / 6.0, w / 6.0, 0.0).unwrap();
        let mut fams = Vec::new();
        for ox in 0..=6 {
            for oy in 0..=(6 - ox) {
                fams.push(hermite_gaussian(&g, ox, oy, w).unwrap());
            }
        }
        for (i, a) in fams.iter().enumerate() {
            for (j, b) in fams.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((inner_product(a, b).unwrap() - e).norm() < 1e-8, "{i} {j}");
            }
        }
    }

    #[test]
    fn unresolvable_waist_rejected() {
        let g = strip();
        assert!(matches!(hermite_gaussian(&g, 0, 0, 0.1), Err(Error::Resolution(_))));
        assert!(matches!(hermite_gaussian(&g, 0, 0, 5.0), Err(Error::Resolution(_))));
    }

    #[test]
    fn grid_mismatch_is_dimension_error() {
        let a = ComplexField::zeros(strip());
        let b = ComplexField::zeros(TransverseGrid::strip(128, 0.05, 0.1).unwrap());
        assert!(matches!(inner_product(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn guard_band_validation() {
        assert!(TransverseGrid::strip(16, 1.0, 0.5).is_err());
        assert!(TransverseGrid::new(1, 4, 1.0, 1.0, 0.0).is_err());
        let g = TransverseGrid::strip(100, 1.0, 0.2).unwrap();
        let w = g.apodization();
        assert_eq!(w[[0, 50]], 1.0);
        assert!(w[[0, 0]] < 0.01);
        assert_eq!(g.interior_mask().iter().filter(|&&m| m).count(), 60);
    }

    #[test]
    fn nhmf_round_trip() {
        let g = TransverseGrid::new(6, 4, 0.1, 0.2, 0.0).unwrap();
        let f = ComplexField::from_fn(g, |x, y| C64::new(x, -y * 3.0)).with_z(0.25);
        let mut buf = Vec::new();
        write_nhmf(&mut buf, &f).unwrap();
        assert_eq!(&buf[..4], b"NHMF");
        assert_eq!(buf.len(), 4 + 12 + 24 + 16 * 24);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 6);
        let back = read_nhmf(&buf[..], 0.0).unwrap();
        assert_eq!(back, f);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_nhmf(&bad[..], 0.0).is_err());
    }

    fn field_strategy(n: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), n)
    }

    proptest! {
        #[test]
        fn inner_product_sesquilinear(
            a in field_strategy(16), b in field_strategy(16),
            ar in -2.0..2.0f64, ai in -2.0..2.0f64,
        ) {
            let g = TransverseGrid::strip(16, 0.3, 0.0).unwrap();
            let f = ComplexField::from_vec(g, a.iter().map(|&(r, i)| C64::new(r, i)).collect()).unwrap();
            let h = ComplexField::from_vec(g, b.iter().map(|&(r, i)| C64::new(r, i)).collect()).unwrap();
            let alpha = C64::new(ar, ai);
            let lhs = inner_product(&f.scaled(alpha), &h).unwrap();
            let rhs = alpha.conj() * inner_product(&f, &h).unwrap();
            prop_assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
            let fg = inner_product(&f, &h).unwrap();
            let gf = inner_product(&h, &f).unwrap();
            prop_assert!((fg - gf.conj()).norm() <= 1e-14);
        }
    }
}
