//! TOML scenario files: strict keys, defaults, range validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eigen::{Polarization, SolveMethod};
use crate::error::{Error, Result};
use crate::field::TransverseGrid;
use crate::fock::CrossRegionToy;
use crate::optics::{Mirror, ResonatorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResonatorKind {
    ConfocalUnstable,
    HalfSymmetricStable,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonatorConfig {
    pub kind: ResonatorKind,
    pub cavity_length: f64,
    pub wavelength: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnification: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aperture_halfwidth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror_left: Option<Mirror>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror_right: Option<Mirror>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_plane_z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    #[serde(default = "one")]
    pub ny: usize,
    pub dx: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dy: Option<f64>,
    #[serde(default = "default_guard")]
    pub guard_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_method")]
    pub method: SolveMethod,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pol")]
    pub polarization: Polarization,
    /// Longitudinal order N used for ω = cNπ/l; 0 leaves modes unlabelled.
    #[serde(default)]
    pub axial_index: u64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            count: default_count(),
            method: default_method(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            seed: 0,
            polarization: default_pol(),
            axial_index: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalFamily {
    HermiteGaussian,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalModesConfig {
    #[serde(default = "default_family")]
    pub family: ExternalFamily,
    #[serde(default = "default_external_count")]
    pub count: usize,
    /// Waist of the Hermite-Gaussian family; defaults to a tenth of the grid width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waist: Option<f64>,
    /// NHMF files for the `file` family, one field per mode (u = v).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<PathBuf>,
    /// Boundary plane; defaults to the reference plane.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_b: Option<f64>,
}

impl Default for ExternalModesConfig {
    fn default() -> Self {
        ExternalModesConfig {
            family: default_family(),
            count: default_external_count(),
            waist: None,
            paths: vec![],
            z_b: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSource {
    Identity,
    Random,
    Basis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FockConfig {
    #[serde(default = "default_n_true")]
    pub n_true: usize,
    #[serde(default = "default_n_max", rename = "N_max")]
    pub n_max: usize,
    #[serde(default = "default_gamma_source")]
    pub gamma_source: GammaSource,
    #[serde(default = "default_max_photons")]
    pub max_photons: usize,
    #[serde(default)]
    pub cross_region: CrossRegionToy,
    #[serde(default = "default_field_counts")]
    pub field_mode_counts: Vec<usize>,
}

impl Default for FockConfig {
    fn default() -> Self {
        FockConfig {
            n_true: default_n_true(),
            n_max: default_n_max(),
            gamma_source: default_gamma_source(),
            max_photons: default_max_photons(),
            cross_region: CrossRegionToy::default(),
            field_mode_counts: default_field_counts(),
        }
    }
}

/// Times are in units of 1/Δω when `delta_omega` = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    /// Skip the optics and use single-mode combs with the `petermann` factors.
    #[serde(default)]
    pub synthetic: bool,
    #[serde(default = "default_petermann")]
    pub petermann: Vec<f64>,
    #[serde(default = "default_gamma_free")]
    pub gamma_free: f64,
    #[serde(default = "default_n_modes", rename = "N_modes")]
    pub n_modes: usize,
    #[serde(default = "one_f")]
    pub delta_omega: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "default_fit_window")]
    pub fit_window: [f64; 2],
    #[serde(default = "default_dipole")]
    pub dipole: [f64; 2],
    /// (x, y, z); defaults to the axis at mid-cavity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 3]>,
    /// Defaults to resonance with the solved modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega0: Option<f64>,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    /// Values of ε at which −2·Re K̃(ε) is reported next to the closed-form rate.
    #[serde(default = "default_epsilon")]
    pub epsilon: Vec<f64>,
}

fn default_epsilon() -> Vec<f64> {
    vec![0.1, 0.01]
}

impl Default for DecayConfig {
    fn default() -> Self {
        DecayConfig {
            synthetic: false,
            petermann: default_petermann(),
            gamma_free: default_gamma_free(),
            n_modes: default_n_modes(),
            delta_omega: 1.0,
            t_end: default_t_end(),
            dt: None,
            fit_window: default_fit_window(),
            dipole: default_dipole(),
            position: None,
            omega0: None,
            record_stride: default_stride(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { directory: default_dir(), formats: default_formats() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub resonator: ResonatorConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub external_modes: ExternalModesConfig,
    #[serde(default)]
    pub fock: FockConfig,
    #[serde(default)]
    pub decay: DecayConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_guard() -> f64 {
    0.15
}
fn default_count() -> usize {
    6
}
fn default_method() -> SolveMethod {
    SolveMethod::Arnoldi
}
fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    300
}
fn default_pol() -> Polarization {
    Polarization::X
}
fn default_family() -> ExternalFamily {
    ExternalFamily::HermiteGaussian
}
fn default_external_count() -> usize {
    4
}
fn default_n_true() -> usize {
    2
}
fn default_n_max() -> usize {
    4
}
fn default_gamma_source() -> GammaSource {
    GammaSource::Random
}
fn default_max_photons() -> usize {
    3
}
fn default_field_counts() -> Vec<usize> {
    vec![4, 8, 16, 31]
}
fn default_petermann() -> Vec<f64> {
    vec![1.0, 1.5, 2.5, 5.0]
}
fn default_gamma_free() -> f64 {
    0.5
}
fn default_n_modes() -> usize {
    401
}
fn default_t_end() -> f64 {
    5.0
}
fn default_fit_window() -> [f64; 2] {
    [0.5, 5.0]
}
fn default_dipole() -> [f64; 2] {
    [1.0, 0.0]
}
fn default_stride() -> usize {
    50
}
fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<Format> {
    vec![Format::Json, Format::Csv]
}

fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::Validation { key: key.into(), reason: reason.into() }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() { Ok(()) } else { Err(invalid(key, format!("must be positive, got {v}"))) }
}

impl ResonatorConfig {
    pub fn to_spec(&self) -> Result<ResonatorSpec> {
        positive("resonator.cavity_length", self.cavity_length)?;
        positive("resonator.wavelength", self.wavelength)?;
        let l = self.cavity_length;
        let mut spec = match self.kind {
            ResonatorKind::ConfocalUnstable => {
                let m = self.magnification.ok_or_else(|| invalid("resonator.magnification", "required"))?;
                if !(m > 1.0 && m.is_finite()) {
                    return Err(invalid("resonator.magnification", "must exceed 1"));
                }
                let a = self.aperture_halfwidth.ok_or_else(|| invalid("resonator.aperture_halfwidth", "required"))?;
                positive("resonator.aperture_halfwidth", a)?;
                ResonatorSpec::confocal_unstable(m, l, a, self.wavelength)
            }
            ResonatorKind::HalfSymmetricStable => {
                let r = self.curvature_radius.ok_or_else(|| invalid("resonator.curvature_radius", "required"))?;
                if !(r > l && r.is_finite()) {
                    return Err(invalid("resonator.curvature_radius", "must exceed cavity_length for a stable cavity"));
                }
                let mut s = ResonatorSpec::half_symmetric_stable(l, r, self.wavelength);
                if let Some(a) = self.aperture_halfwidth {
                    positive("resonator.aperture_halfwidth", a)?;
                    s.mirror_right = s.mirror_right.with_aperture(a);
                }
                s
            }
            ResonatorKind::Custom => {
                let left = self.mirror_left.ok_or_else(|| invalid("resonator.mirror_left", "required"))?;
                let right = self.mirror_right.ok_or_else(|| invalid("resonator.mirror_right", "required"))?;
                ResonatorSpec {
                    cavity_length: l,
                    mirror_left: left,
                    mirror_right: right,
                    wavenumber: 2.0 * std::f64::consts::PI / self.wavelength,
                    reference_plane_z: l / 2.0,
                }
            }
        };
        if let Some(z) = self.reference_plane_z {
            spec.reference_plane_z = z;
        }
        spec.validate().map_err(|e| match e {
            Error::Validation { key, reason } => invalid(&format!("resonator.{key}"), reason),
            other => other,
        })?;
        Ok(spec)
    }

    /// Fundamental waist on the flat mirror of a half-symmetric stable cavity.
    pub fn stable_waist(&self) -> Option<f64> {
        match (self.kind, self.curvature_radius) {
            (ResonatorKind::HalfSymmetricStable, Some(r)) if r > self.cavity_length => {
                let zr = (self.cavity_length * (r - self.cavity_length)).sqrt();
                Some((self.wavelength * zr / std::f64::consts::PI).sqrt())
            }
            _ => None,
        }
    }
}

impl GridConfig {
    pub fn to_grid(&self) -> Result<TransverseGrid> {
        if self.nx < 8 {
            return Err(invalid("grid.nx", "must be at least 8"));
        }
        if self.ny == 0 {
            return Err(invalid("grid.ny", "must be at least 1"));
        }
        positive("grid.dx", self.dx)?;
        if let Some(dy) = self.dy {
            positive("grid.dy", dy)?;
        }
        if !(0.0..0.5).contains(&self.guard_fraction) {
            return Err(invalid("grid.guard_fraction", "must lie in [0, 0.5)"));
        }
        if self.ny == 1 {
            TransverseGrid::strip(self.nx, self.dx, self.guard_fraction)
        } else {
            TransverseGrid::new(self.nx, self.ny, self.dx, self.dy.unwrap_or(self.dx), self.guard_fraction)
        }
    }
}

impl Scenario {
    pub fn validate(&self, base: &Path) -> Result<()> {
        let spec = self.resonator.to_spec()?;
        let grid = self.grid.to_grid()?;
        let s = &self.solve;
        if s.count == 0 || s.count > grid.len() / 4 {
            return Err(invalid("solve.count", format!("must lie in 1..={}", grid.len() / 4)));
        }
        if !(s.tol > 0.0 && s.tol < 1e-2) {
            return Err(invalid("solve.tol", "must lie in (0, 1e-2)"));
        }
        if s.max_iter == 0 {
            return Err(invalid("solve.max_iter", "must be positive"));
        }
        let e = &self.external_modes;
        if e.count == 0 {
            return Err(invalid("external_modes.count", "must be positive"));
        }
        if let Some(w) = e.waist {
            positive("external_modes.waist", w)?;
        }
        if let Some(z) = e.z_b {
            if !(0.0..=spec.cavity_length).contains(&z) {
                return Err(invalid("external_modes.z_b", "must lie between the mirrors"));
            }
        }
        if e.family == ExternalFamily::File {
            if e.paths.is_empty() {
                return Err(invalid("external_modes.paths", "required for the file family"));
            }
            for p in &e.paths {
                if !base.join(p).is_file() {
                    return Err(invalid("external_modes.paths", format!("{} does not exist", p.display())));
                }
            }
        }
        let f = &self.fock;
        if !(1..=4).contains(&f.n_true) {
            return Err(invalid("fock.n_true", "must lie in 1..=4"));
        }
        if !(2..=8).contains(&f.n_max) {
            return Err(invalid("fock.N_max", "must lie in 2..=8"));
        }
        if f.max_photons >= f.n_max {
            return Err(invalid("fock.max_photons", "must be below N_max"));
        }
        if f.gamma_source == GammaSource::Basis && f.n_true > s.count {
            return Err(invalid("fock.n_true", "exceeds solve.count for gamma_source = basis"));
        }
        if f.field_mode_counts.is_empty() {
            return Err(invalid("fock.field_mode_counts", "must not be empty"));
        }
        let d = &self.decay;
        if d.petermann.iter().any(|&k| !(k >= 1.0 && k.is_finite())) || d.petermann.is_empty() {
            return Err(invalid("decay.petermann", "factors must be finite and at least 1"));
        }
        positive("decay.gamma_free", d.gamma_free)?;
        positive("decay.delta_omega", d.delta_omega)?;
        positive("decay.t_end", d.t_end)?;
        if d.n_modes < 3 {
            return Err(invalid("decay.N_modes", "must be at least 3"));
        }
        if d.t_end >= 2.0 * std::f64::consts::PI / d.delta_omega {
            return Err(invalid("decay.t_end", "must stay below the recurrence time 2π/delta_omega"));
        }
        if let Some(dt) = d.dt {
            positive("decay.dt", dt)?;
        }
        let [t1, t2] = d.fit_window;
        if !(t1 >= 0.0 && t2 > t1 && t2 <= d.t_end) {
            return Err(invalid("decay.fit_window", "need 0 ≤ t1 < t2 ≤ t_end"));
        }
        if d.dipole == [0.0, 0.0] {
            return Err(invalid("decay.dipole", "must be nonzero"));
        }
        if let Some(w) = d.omega0 {
            positive("decay.omega0", w)?;
        }
        if d.record_stride == 0 {
            return Err(invalid("decay.record_stride", "must be positive"));
        }
        for &e in &d.epsilon {
            positive("decay.epsilon", e)?;
        }
        if self.output.formats.is_empty() {
            return Err(invalid("output.formats", "must not be empty"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn parse_scenario(text: &str, base: &Path) -> Result<Scenario> {
    let s: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    s.validate(base)?;
    Ok(s)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[resonator]
kind = "confocal_unstable"
cavity_length = 0.15
wavelength = 1e-6
magnification = 2.0
aperture_halfwidth = 1e-3

[grid]
nx = 256
dx = 3.90625e-5
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let s = parse_scenario(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(s.solve, SolveConfig::default());
        assert_eq!(s.grid.ny, 1);
        assert_eq!(s.fock.n_max, 4);
        assert_eq!(s.output.formats, vec![Format::Json, Format::Csv]);
        assert!(s.resonator.to_spec().unwrap().is_unstable());
    }

    #[test]
    fn negative_length_names_key() {
        let bad = MINIMAL.replace("cavity_length = 0.15", "cavity_length = -0.15");
        match parse_scenario(&bad, Path::new(".")) {
            Err(Error::Validation { key, .. }) => assert!(key.contains("cavity_length")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let bad = MINIMAL.replace("nx = 256", "nx = 256\nnz = 3");
        assert!(matches!(parse_scenario(&bad, Path::new(".")), Err(Error::Parse(_))));
        let bad = format!("{MINIMAL}\n[extras]\na = 1\n");
        assert!(matches!(parse_scenario(&bad, Path::new(".")), Err(Error::Parse(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let full = format!("{MINIMAL}\n[decay]\nposition = [0.0, 0.0, 0.05]\n[fock]\nN_max = 5\n");
        let a = parse_scenario(&full, Path::new(".")).unwrap();
        let b = parse_scenario(&a.to_toml().unwrap(), Path::new(".")).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.fock.n_max, 5);
    }

    #[test]
    fn missing_file_is_reported() {
        let bad = format!("{MINIMAL}\n[external_modes]\nfamily = \"file\"\npaths = [\"nope.nhmf\"]\n");
        match parse_scenario(&bad, Path::new(".")) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "external_modes.paths"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn recurrence_bound() {
        let bad = format!("{MINIMAL}\n[decay]\nt_end = 7.0\nfit_window = [0.5, 6.0]\n");
        match parse_scenario(&bad, Path::new(".")) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "decay.t_end"),
            other => panic!("{other:?}"),
        }
    }
}
