//! Stage orchestration, persistence of mode bases and JSON/CSV export.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::algebra::{
    gauge_correction, hermite_gaussian_family, interrelation_residuals, overlap_matrices, petermann_factors,
    surface_integrals, ExternalMode, InterrelationResiduals, OverlapMatrices,
};
use crate::decay::{self, CouplingSet, DecayFit, MarkovRate, TwoLevelAtom};
use crate::eigen::{
    assign_labels, biorthonormalize, modes_matching, solve_modes, ModeBasis, NhmMode, Polarization, SolveMethod,
    SolveReport, SPEED_OF_LIGHT,
};
use crate::error::{Error, Result};
use crate::field::{hermite_gaussian, load_nhmf, save_nhmf, TransverseGrid, C64};
use crate::fock::{self, AlgebraReport, CrossRegionReport, EigenstateReport, FieldCommutatorReport};
use crate::linalg;
use crate::optics::{Direction, ResonatorSpec, RoundTripOperator};
use crate::scenario::{ExternalFamily, Format, GammaSource, Scenario};

pub const SCHEMA_VERSION: &str = "1.0.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Modes,
    Algebra,
    Fock,
    Surface,
    Decay,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Modes, Stage::Algebra, Stage::Fock, Stage::Surface, Stage::Decay];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Modes => "modes",
            Stage::Algebra => "algebra",
            Stage::Fock => "fock",
            Stage::Surface => "surface",
            Stage::Decay => "decay",
        };
        f.write_str(s)
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.to_string() == s.trim())
            .ok_or_else(|| Error::Validation { key: "stages".into(), reason: format!("unknown stage `{s}`") })
    }
}

/// Comma-separated stage list, or `all`.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    if s.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let mut v = s.split(',').filter(|p| !p.trim().is_empty()).map(Stage::from_str).collect::<Result<Vec<_>>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

/// Adds the stages each requested stage needs, in execution order.
pub fn with_dependencies(stages: &[Stage], s: &Scenario) -> Vec<Stage> {
    let mut out: Vec<Stage> = stages.to_vec();
    for st in stages {
        match st {
            Stage::Algebra | Stage::Surface => out.push(Stage::Modes),
            Stage::Fock if s.fock.gamma_source == GammaSource::Basis => out.push(Stage::Modes),
            Stage::Decay if !s.decay.synthetic => out.extend([Stage::Modes, Stage::Algebra]),
            _ => {}
        }
    }
    out.sort();
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: StageStatus,
    pub message: Option<String>,
    pub hard_failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModesReport {
    pub count: usize,
    pub method: SolveMethod,
    pub matched_to_hermite_gaussians: bool,
    pub magnification: f64,
    pub equivalent_fresnel_number: Option<f64>,
    pub eigenvalues: Vec<[f64; 2]>,
    pub adjoint_eigenvalues: Vec<[f64; 2]>,
    pub residuals_u: Vec<f64>,
    pub residuals_v: Vec<f64>,
    pub iterations: usize,
    pub biorthogonality_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PetermannRow {
    pub theta: usize,
    pub polarization: Polarization,
    pub gamma_re: f64,
    pub gamma_im: f64,
    pub gamma_abs_sq: f64,
    pub k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgebraStageReport {
    pub petermann: Vec<PetermannRow>,
    pub cd_error: f64,
    pub dc_error: f64,
    pub asymmetry_c: f64,
    pub asymmetry_d: f64,
    pub interrelation: InterrelationResiduals,
    pub c: Vec<Vec<[f64; 2]>>,
    pub d: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FockStageReport {
    pub n_true: usize,
    pub n_max: usize,
    pub dimension: usize,
    pub gamma_source: GammaSource,
    pub commutators: AlgebraReport,
    pub hermiticity_h_e: f64,
    pub hermiticity_h_e0: f64,
    pub hermiticity_v_e: f64,
    pub eigenstates: EigenstateReport,
    pub spectrum_error: f64,
    pub cross_region: CrossRegionReport,
    pub field_commutator: FieldCommutatorReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeRow {
    pub theta: usize,
    pub divergence_before: f64,
    pub divergence_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceStageReport {
    pub z_b: f64,
    pub external_count: usize,
    /// Largest entry of each boundary coupling matrix.
    pub magnitudes: BTreeMap<String, f64>,
    pub gauge: Vec<GaugeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    pub c_e_re: Vec<f64>,
    pub c_e_im: Vec<f64>,
    pub p_e: Vec<f64>,
    pub gram_norm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRun {
    pub label: String,
    pub petermann: Vec<f64>,
    pub markov: MarkovRate,
    /// (ε, −2·Re K̃(ε))
    pub laplace_rates: Vec<[f64; 2]>,
    pub fit: DecayFit,
    /// Fitted rate over the first run's fitted rate.
    pub ratio_to_first: f64,
    pub max_gram_drift: f64,
    pub consistency_residual: f64,
    pub dt: f64,
    pub n_modes: usize,
    pub series: TimeSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayStageReport {
    pub synthetic: bool,
    pub runs: Vec<DecayRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub seed: u64,
    pub stages_requested: Vec<Stage>,
    pub outcomes: Vec<StageOutcome>,
    pub modes: Option<ModesReport>,
    pub algebra: Option<AlgebraStageReport>,
    pub fock: Option<FockStageReport>,
    pub surface: Option<SurfaceStageReport>,
    pub decay: Option<DecayStageReport>,
    pub warnings: Vec<String>,
}

impl RunReport {
    /// True when every stage ran and no hard invariant failed.
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.status == StageStatus::Ok && o.hard_failures.is_empty())
    }
}

/// In-memory products of a run.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub basis: Option<ModeBasis>,
    pub overlaps: Option<OverlapMatrices>,
}

fn pairs(m: &Array2<C64>) -> Vec<Vec<[f64; 2]>> {
    m.rows().into_iter().map(|r| r.iter().map(|v| [v.re, v.im]).collect()).collect()
}

fn check(failures: &mut Vec<String>, ok: bool, what: impl FnOnce() -> String) {
    if !ok {
        failures.push(what());
    }
}

pub fn solve_basis(s: &Scenario) -> Result<(ModeBasis, bool)> {
    let spec = s.resonator.to_spec()?;
    let grid = s.grid.to_grid()?;
    let op = RoundTripOperator::new(spec, grid, Direction::Forward)?;
    let closed = spec.mirror_left.aperture_halfwidth.is_none() && spec.mirror_right.aperture_halfwidth.is_none();
    let (raw, matched) = match s.resonator.stable_waist() {
        Some(w0) if closed => {
            let refs = (0..s.solve.count)
                .map(|o| hermite_gaussian(&grid, o, 0, w0))
                .collect::<Result<Vec<_>>>()?;
            (modes_matching(&op, &refs)?, true)
        }
        _ => (solve_modes(&op, s.solve.count, s.solve.method, s.solve.tol, s.solve.max_iter, s.solve.seed)?, false),
    };
    let mut basis = biorthonormalize(&raw)?;
    if s.solve.axial_index > 0 {
        basis = assign_labels(&basis, spec.cavity_length, s.solve.axial_index, s.solve.polarization);
    } else {
        basis.modes.iter_mut().for_each(|m| m.polarization = s.solve.polarization);
    }
    Ok((basis, matched))
}

fn modes_stage(s: &Scenario, art: &mut Artifacts, failures: &mut Vec<String>) -> Result<ModesReport> {
    let (basis, matched) = solve_basis(s)?;
    let bio = basis.biorthogonality_error()?;
    check(failures, bio <= 1e-8, || format!("biorthogonality error {bio:.3e} > 1e-8"));
    let spec = basis.spec;
    let r = ModesReport {
        count: basis.len(),
        method: basis.solve_report.method,
        matched_to_hermite_gaussians: matched,
        magnification: spec.magnification(),
        equivalent_fresnel_number: spec.equivalent_fresnel_number(),
        eigenvalues: basis.modes.iter().map(|m| [m.gamma.re, m.gamma.im]).collect(),
        adjoint_eigenvalues: basis.modes.iter().map(|m| [m.gamma_adjoint.re, m.gamma_adjoint.im]).collect(),
        residuals_u: basis.solve_report.residuals_u.clone(),
        residuals_v: basis.solve_report.residuals_v.clone(),
        iterations: basis.solve_report.iterations,
        biorthogonality_error: bio,
    };
    art.basis = Some(basis);
    Ok(r)
}

fn need_basis(art: &Artifacts) -> Result<&ModeBasis> {
    art.basis.as_ref().ok_or_else(|| Error::Validation { key: "stages".into(), reason: "needs a solved mode basis".into() })
}

fn algebra_stage(art: &mut Artifacts, failures: &mut Vec<String>, warnings: &mut Vec<String>) -> Result<AlgebraStageReport> {
    let basis = need_basis(art)?;
    let m = overlap_matrices(basis)?;
    let k = petermann_factors(&m)?;
    let (cd, dc) = m.product_errors();
    let inter = interrelation_residuals(basis, &m)?;
    if cd > 1e-5 || dc > 1e-5 {
        warnings.push(format!("truncated basis: ‖CD − E‖ = {cd:.3e}, ‖DC − E‖ = {dc:.3e}"));
    }
    check(failures, m.asymmetry_c <= 1e-8 && m.asymmetry_d <= 1e-8, || {
        format!("C/D asymmetry {:.3e}/{:.3e} > 1e-8", m.asymmetry_c, m.asymmetry_d)
    });
    let kmin = k.iter().cloned().fold(f64::INFINITY, f64::min);
    check(failures, kmin >= 1.0 - 1e-9, || format!("Petermann factor {kmin} below 1"));
    let petermann = basis
        .modes
        .iter()
        .zip(&k)
        .map(|(md, &kn)| PetermannRow {
            theta: md.transverse_index,
            polarization: md.polarization,
            gamma_re: md.gamma.re,
            gamma_im: md.gamma.im,
            gamma_abs_sq: md.gamma.norm_sqr(),
            k: kn,
        })
        .collect();
    let r = AlgebraStageReport {
        petermann,
        cd_error: cd,
        dc_error: dc,
        asymmetry_c: m.asymmetry_c,
        asymmetry_d: m.asymmetry_d,
        interrelation: inter,
        c: pairs(&m.c),
        d: pairs(&m.d),
    };
    art.overlaps = Some(m);
    Ok(r)
}

fn fock_stage(s: &Scenario, seed: u64, art: &Artifacts, failures: &mut Vec<String>, warnings: &mut Vec<String>) -> Result<FockStageReport> {
    let f = &s.fock;
    let n = f.n_true;
    let (gamma, lambda, omega) = match f.gamma_source {
        GammaSource::Identity => (linalg::identity(n), linalg::identity(n), (0..n).map(|i| 1.0 + 0.25 * i as f64).collect()),
        GammaSource::Random => {
            let (g, l) = fock::random_biorthogonal_pair(n, seed)?;
            (g, l, (0..n).map(|i| 1.0 + 0.25 * i as f64).collect())
        }
        GammaSource::Basis => {
            let mut b = need_basis(art)?.clone();
            b.modes.truncate(n);
            let (g, l) = fock::gamma_lambda_from_basis(&b)?;
            (g, l, vec![1.0; n])
        }
    };
    let space = fock::build_fock(n, n, f.n_max)?;
    let ops = fock::build_nhm_ops(&space, &gamma, &lambda, &omega)?;
    let commutators = fock::check_commutators(&ops, &space);
    for c in commutators.checks.iter().filter(|c| !c.pass) {
        failures.push(format!("{}: deviation {:.3e}", c.name, c.max_deviation));
    }
    let h = fock::build_hamiltonians(&ops);
    let he = fock::hermiticity_defect(&h.h_e);
    check(failures, he <= 1e-12, || format!("H_E not Hermitean: {he:.3e}"));
    let eig = fock::check_eigenstates(&h.h_c, &ops, &space, f.max_photons)?;
    check(failures, eig.max_energy_residual <= 1e-10 && eig.max_left_energy_residual <= 1e-10, || {
        format!("eigenstate residual {:.3e}", eig.max_energy_residual.max(eig.max_left_energy_residual))
    });
    check(failures, eig.gram_error <= 1e-10, || format!("left/right Gram error {:.3e}", eig.gram_error));
    let a = fock::restricted_spectrum(&h.h_c, &space, f.n_max)?;
    let b = fock::restricted_spectrum(&fock::true_mode_hamiltonian(&space, &omega), &space, f.n_max)?;
    let spectrum_error = a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    check(failures, spectrum_error <= 1e-8, || format!("H_C spectrum differs from true-mode form by {spectrum_error:.3e}"));
    let cross_region = fock::cross_region_check(&f.cross_region)?;
    warnings.extend(cross_region.warnings.iter().cloned());
    if cross_region.max_relative_difference > 0.05 {
        warnings.push(format!(
            "cross-region [Q, P†] differs from the boundary term by a factor {:.3e} (mean ratio {:.3e} + {:.3e}i)",
            cross_region.max_relative_difference, cross_region.mean_ratio[0], cross_region.mean_ratio[1]
        ));
    }
    let field_commutator = fock::field_commutator_check(256, 1.0, &f.field_mode_counts);
    Ok(FockStageReport {
        n_true: n,
        n_max: f.n_max,
        dimension: space.dim(),
        gamma_source: f.gamma_source,
        commutators,
        hermiticity_h_e: he,
        hermiticity_h_e0: fock::hermiticity_defect(&h.h_e0),
        hermiticity_v_e: fock::hermiticity_defect(&h.v_e),
        eigenstates: eig,
        spectrum_error,
        cross_region,
        field_commutator,
    })
}

fn external_modes(s: &Scenario, base: &Path, grid: &TransverseGrid, spec: &ResonatorSpec) -> Result<Vec<ExternalMode>> {
    let e = &s.external_modes;
    match e.family {
        ExternalFamily::HermiteGaussian => {
            let (wx, _) = grid.extent();
            let waist = e.waist.or(s.resonator.stable_waist()).unwrap_or(wx / 10.0);
            hermite_gaussian_family(grid, e.count, waist, spec.wavenumber, s.solve.polarization)
        }
        ExternalFamily::File => e
            .paths
            .iter()
            .take(e.count)
            .map(|p| {
                let f = load_nhmf(&base.join(p), grid.guard_fraction)?;
                Ok(ExternalMode { u: f.clone(), v: f, k: spec.wavenumber, polarization: s.solve.polarization })
            })
            .collect(),
    }
}

fn surface_stage(s: &Scenario, base: &Path, art: &Artifacts) -> Result<SurfaceStageReport> {
    let basis = need_basis(art)?;
    let ext = external_modes(s, base, &basis.grid, &basis.spec)?;
    let z_b = s.external_modes.z_b.unwrap_or(basis.spec.reference_plane_z);
    let sc = surface_integrals(basis, &ext, z_b)?;
    let mut magnitudes = BTreeMap::new();
    for (name, m) in [
        ("I", &sc.i),
        ("J", &sc.j),
        ("K", &sc.k),
        ("L", &sc.l),
        ("script_I", &sc.script_i),
        ("script_J", &sc.script_j),
        ("script_K", &sc.script_k),
        ("script_L", &sc.script_l),
    ] {
        magnitudes.insert(name.to_string(), linalg::max_abs(m));
    }
    let gauge = basis
        .modes
        .iter()
        .map(|m| {
            let g = gauge_correction(m, basis.spec.wavenumber);
            GaugeRow { theta: m.transverse_index, divergence_before: g.divergence_before, divergence_after: g.divergence_after }
        })
        .collect();
    Ok(SurfaceStageReport { z_b, external_count: ext.len(), magnitudes, gauge })
}

fn series(r: &decay::DecayResult) -> TimeSeries {
    TimeSeries {
        t: r.times.clone(),
        c_e_re: r.c_e.iter().map(|c| c.re).collect(),
        c_e_im: r.c_e.iter().map(|c| c.im).collect(),
        p_e: r.excited_population(),
        gram_norm: r.gram_norm.clone(),
    }
}

fn run_comb(label: String, cs: &CouplingSet, s: &Scenario, consistency: f64) -> Result<DecayRun> {
    let d = &s.decay;
    let markov = decay::markov_rate(cs)?;
    let dt = d.dt.unwrap_or_else(|| decay::max_step(cs));
    let r = decay::evolve_amplitudes(cs, d.t_end, dt, d.record_stride)?;
    // shrink the window for fast decays so the fit stays above the finite-comb floor
    let tau = 1.0 / markov.gamma_e.max(f64::MIN_POSITIVE);
    let window = [d.fit_window[0].min(tau), d.fit_window[1].min(10.0 * tau)];
    let fit = decay::fit_decay_rate(&r.times, &r.excited_population(), window)?;
    Ok(DecayRun {
        label,
        petermann: markov.petermann.clone(),
        laplace_rates: d.epsilon.iter().map(|&e| [e, -2.0 * decay::laplace_kernel(cs, e).re]).collect(),
        markov,
        fit,
        ratio_to_first: 1.0,
        max_gram_drift: r.max_gram_drift,
        consistency_residual: consistency,
        dt,
        n_modes: cs.len(),
        series: series(&r),
    })
}

fn decay_stage(s: &Scenario, art: &Artifacts, failures: &mut Vec<String>, warnings: &mut Vec<String>) -> Result<DecayStageReport> {
    let d = &s.decay;
    let mut runs = Vec::new();
    if d.synthetic {
        for &k in &d.petermann {
            let cs = decay::synthetic_comb(k, d.gamma_free, d.n_modes, d.delta_omega)?;
            runs.push(run_comb(format!("K={k}"), &cs, s, 0.0)?);
        }
    } else {
        let basis = need_basis(art)?;
        let m = art.overlaps.as_ref().ok_or_else(|| Error::Validation {
            key: "stages".into(),
            reason: "decay needs the algebra stage".into(),
        })?;
        let omega_mode = basis.modes.first().map(|md| if md.omega > 0.0 { md.omega } else { SPEED_OF_LIGHT * basis.spec.wavenumber });
        let atom = TwoLevelAtom {
            omega0: d.omega0.or(omega_mode).unwrap_or(1.0),
            dipole: [C64::new(d.dipole[0], 0.0), C64::new(d.dipole[1], 0.0)],
            position: d.position.unwrap_or([0.0, 0.0, basis.spec.cavity_length / 2.0]),
        };
        let phys = decay::coupling_constants(basis, &atom, m, 1.0)?;
        if phys.consistency_residual > 1e-6 {
            warnings.push(format!("truncated basis: gB differs from −D·conj(gA) by {:.3e}", phys.consistency_residual));
        }
        // keep the family of the first mode, rescale to the configured free rate
        let fam: Vec<usize> = (0..phys.len()).filter(|&i| phys.group[i] == phys.group[0]).collect();
        let norm: f64 = fam.iter().map(|&i| phys.g_a[i].norm_sqr()).sum();
        if norm == 0.0 {
            return Err(Error::Physicality("atom sits on a node of every mode".into()));
        }
        let scale = (d.gamma_free * d.delta_omega / (4.0 * std::f64::consts::PI) / norm).sqrt();
        let ga: Vec<C64> = fam.iter().map(|&i| phys.g_a[i] * scale).collect();
        let block = Array2::from_shape_fn((fam.len(), fam.len()), |(i, j)| m.d[[fam[i], fam[j]]]);
        let cs = CouplingSet::comb(&ga, &block, d.n_modes, d.delta_omega)?;
        runs.push(run_comb("basis".into(), &cs, s, phys.consistency_residual)?);
    }
    let first = runs[0].fit.rate;
    for r in &mut runs {
        r.ratio_to_first = r.fit.rate / first;
        check(failures, r.max_gram_drift <= 1e-8, || format!("{}: Gram-norm drift {:.3e} > 1e-8", r.label, r.max_gram_drift));
        if !r.fit.quality_ok {
            warnings.push(format!("{}: decay fit r² = {:.4}", r.label, r.fit.r_squared));
        }
        if !r.markov.markov_trusted {
            warnings.push(format!("{}: decay time shorter than ten correlation times", r.label));
        }
    }
    Ok(DecayStageReport { synthetic: d.synthetic, runs })
}

/// Runs `stages` (plus their prerequisites) and returns the report and in-memory products.
/// `base` resolves relative file references in the scenario.
pub fn run_stages(s: &Scenario, stages: &[Stage], base: &Path) -> (RunReport, Artifacts) {
    let order = with_dependencies(stages, s);
    let mut art = Artifacts::default();
    let mut report = RunReport {
        schema_version: SCHEMA_VERSION.into(),
        seed: s.solve.seed,
        stages_requested: order.clone(),
        outcomes: vec![],
        modes: None,
        algebra: None,
        fock: None,
        surface: None,
        decay: None,
        warnings: vec![],
    };
    for st in order {
        let mut failures = Vec::new();
        let mut warnings = Vec::new();
        let res: Result<()> = match st {
            Stage::Modes => modes_stage(s, &mut art, &mut failures).map(|r| report.modes = Some(r)),
            Stage::Algebra => algebra_stage(&mut art, &mut failures, &mut warnings).map(|r| report.algebra = Some(r)),
            Stage::Fock => fock_stage(s, s.solve.seed, &art, &mut failures, &mut warnings).map(|r| report.fock = Some(r)),
            Stage::Surface => surface_stage(s, base, &art).map(|r| report.surface = Some(r)),
            Stage::Decay => decay_stage(s, &art, &mut failures, &mut warnings).map(|r| report.decay = Some(r)),
        };
        report.warnings.extend(warnings.into_iter().map(|w| format!("{st}: {w}")));
        let (status, message) = match res {
            Ok(()) => (StageStatus::Ok, None),
            Err(e) => (StageStatus::Failed, Some(e.to_string())),
        };
        report.outcomes.push(StageOutcome { stage: st, status, message, hard_failures: failures });
    }
    (report, art)
}

/// Runs the pipeline and persists everything under `out`.
pub fn run_pipeline(s: &Scenario, stages: &[Stage], base: &Path, out: &Path) -> Result<RunReport> {
    let (report, art) = run_stages(s, stages, base);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved.toml"), s.to_toml()?)?;
    if let Some(b) = &art.basis {
        save_basis(b, &out.join("modes"))?;
    }
    for &f in &s.output.formats {
        export_results(&report, out, f)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModeEntry {
    theta: usize,
    gamma: [f64; 2],
    gamma_adjoint: [f64; 2],
    axial_index: u64,
    omega: f64,
    polarization: Polarization,
    u_file: String,
    v_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BasisManifest {
    schema_version: String,
    grid: TransverseGrid,
    spec: ResonatorSpec,
    solve_report: SolveReport,
    modes: Vec<ModeEntry>,
}

/// `manifest.json` plus one NHMF file per u and v field.
pub fn save_basis(b: &ModeBasis, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, m) in b.modes.iter().enumerate() {
        let (uf, vf) = (format!("u_{i:03}.nhmf"), format!("v_{i:03}.nhmf"));
        save_nhmf(&dir.join(&uf), &m.u)?;
        save_nhmf(&dir.join(&vf), &m.v)?;
        entries.push(ModeEntry {
            theta: m.transverse_index,
            gamma: [m.gamma.re, m.gamma.im],
            gamma_adjoint: [m.gamma_adjoint.re, m.gamma_adjoint.im],
            axial_index: m.axial_index,
            omega: m.omega,
            polarization: m.polarization,
            u_file: uf,
            v_file: vf,
        });
    }
    let manifest = BasisManifest {
        schema_version: SCHEMA_VERSION.into(),
        grid: b.grid,
        spec: b.spec,
        solve_report: b.solve_report.clone(),
        modes: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_basis(dir: &Path) -> Result<ModeBasis> {
    let manifest: BasisManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let g = manifest.grid.guard_fraction;
    let modes = manifest
        .modes
        .iter()
        .map(|e| {
            Ok(NhmMode {
                u: load_nhmf(&dir.join(&e.u_file), g)?,
                v: load_nhmf(&dir.join(&e.v_file), g)?,
                gamma: C64::new(e.gamma[0], e.gamma[1]),
                gamma_adjoint: C64::new(e.gamma_adjoint[0], e.gamma_adjoint[1]),
                axial_index: e.axial_index,
                omega: e.omega,
                polarization: e.polarization,
                transverse_index: e.theta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModeBasis { modes, grid: manifest.grid, spec: manifest.spec, solve_report: manifest.solve_report })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_matrix_csv(path: &Path, m: &[Vec<[f64; 2]>]) -> Result<()> {
    let rows = m.iter().enumerate().flat_map(|(i, r)| {
        r.iter().enumerate().map(move |(j, v)| vec![i.to_string(), j.to_string(), v[0].to_string(), v[1].to_string()])
    });
    write_csv(path, &["row", "col", "re", "im"], rows)
}

/// Reads a matrix written by the CSV export.
pub fn read_matrix_csv(path: &Path) -> Result<Array2<C64>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut entries = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Format(format!("short row in {}", path.display())));
        let parse_u = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(e.to_string()));
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(e.to_string()));
        entries.push((parse_u(field(0)?)?, parse_u(field(1)?)?, C64::new(parse_f(field(2)?)?, parse_f(field(3)?)?)));
    }
    let n = entries.iter().map(|e| e.0.max(e.1) + 1).max().unwrap_or(0);
    let mut m = Array2::zeros((n, n));
    for (i, j, v) in entries {
        m[[i, j]] = v;
    }
    Ok(m)
}

/// Writes `report.json`, or the CSV tables, into `dir`.
pub fn export_results(run: &RunReport, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        Format::Json => {
            let p = dir.join("report.json");
            std::fs::write(&p, serde_json::to_string_pretty(run)?)?;
            written.push(p);
        }
        Format::Csv => {
            if let Some(m) = &run.modes {
                let p = dir.join("eigenvalues.csv");
                let rows = (0..m.count).map(|i| {
                    vec![
                        i.to_string(),
                        m.eigenvalues[i][0].to_string(),
                        m.eigenvalues[i][1].to_string(),
                        m.adjoint_eigenvalues[i][0].to_string(),
                        m.adjoint_eigenvalues[i][1].to_string(),
                        m.residuals_u.get(i).map_or(String::new(), |r| r.to_string()),
                        m.residuals_v.get(i).map_or(String::new(), |r| r.to_string()),
                    ]
                });
                write_csv(&p, &["index", "re_gamma", "im_gamma", "re_gamma_adjoint", "im_gamma_adjoint", "residual_u", "residual_v"], rows)?;
                written.push(p);
            }
            if let Some(a) = &run.algebra {
                let p = dir.join("petermann.csv");
                let rows = a.petermann.iter().map(|r| {
                    let pol = match r.polarization {
                        Polarization::X => "x",
                        Polarization::Y => "y",
                    };
                    vec![
                        r.theta.to_string(),
                        pol.to_string(),
                        r.gamma_re.to_string(),
                        r.gamma_im.to_string(),
                        r.gamma_abs_sq.to_string(),
                        r.k.to_string(),
                    ]
                });
                write_csv(&p, &["theta", "polarization", "re_gamma", "im_gamma", "abs_gamma_sq", "K"], rows)?;
                written.push(p);
                for (name, m) in [("c_matrix.csv", &a.c), ("d_matrix.csv", &a.d)] {
                    let p = dir.join(name);
                    write_matrix_csv(&p, m)?;
                    written.push(p);
                }
            }
            if let Some(f) = &run.fock {
                let p = dir.join("commutators.csv");
                let rows = f.commutators.checks.iter().map(|c| {
                    vec![c.name.clone(), c.max_deviation.to_string(), c.tolerance.to_string(), c.pass.to_string()]
                });
                write_csv(&p, &["identity", "max_deviation", "tolerance", "pass"], rows)?;
                written.push(p);
            }
            if let Some(d) = &run.decay {
                let p = dir.join("decay_summary.csv");
                let rows = d.runs.iter().map(|r| {
                    vec![
                        r.label.clone(),
                        r.fit.rate.to_string(),
                        r.markov.gamma_e.to_string(),
                        r.markov.gamma_free.to_string(),
                        r.ratio_to_first.to_string(),
                        r.fit.r_squared.to_string(),
                        r.max_gram_drift.to_string(),
                    ]
                });
                write_csv(&p, &["run", "fitted_rate", "predicted_rate", "free_rate", "ratio_to_first", "r_squared", "max_gram_drift"], rows)?;
                written.push(p);
                for (i, r) in d.runs.iter().enumerate() {
                    let p = dir.join(format!("decay_{i:02}.csv"));
                    let s = &r.series;
                    let rows = (0..s.t.len()).map(|k| {
                        vec![
                            s.t[k].to_string(),
                            s.c_e_re[k].to_string(),
                            s.c_e_im[k].to_string(),
                            s.p_e[k].to_string(),
                            s.gram_norm[k].to_string(),
                        ]
                    });
                    write_csv(&p, &["t", "re_c_e", "im_c_e", "p_e", "gram_norm"], rows)?;
                    written.push(p);
                }
            }
        }
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    const STRIP: &str = r#"
[resonator]
kind = "confocal_unstable"
cavity_length = 0.15
wavelength = 1e-6
magnification = 2.0
aperture_halfwidth = 1e-3

[grid]
nx = 256
dx = 3.90625e-5

[solve]
count = 3
method = "dense"

[decay]
N_modes = 201
"#;

    #[test]
    fn stage_parsing_and_dependencies() {
        assert_eq!(parse_stages("decay,modes").unwrap(), vec![Stage::Modes, Stage::Decay]);
        assert_eq!(parse_stages("all").unwrap().len(), 5);
        assert!(parse_stages("modes,bogus").is_err());
        let s = parse_scenario(STRIP, Path::new(".")).unwrap();
        assert_eq!(with_dependencies(&[Stage::Decay], &s), vec![Stage::Modes, Stage::Algebra, Stage::Decay]);
        let mut syn = s.clone();
        syn.decay.synthetic = true;
        assert_eq!(with_dependencies(&[Stage::Decay], &syn), vec![Stage::Decay]);
    }

    #[test]
    fn modes_only_run_persists_basis() {
        let s = parse_scenario(STRIP, Path::new(".")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = run_pipeline(&s, &[Stage::Modes], Path::new("."), dir.path()).unwrap();
        assert!(r.passed(), "{:?}", r.outcomes);
        assert!(r.algebra.is_none() && r.decay.is_none());
        let b = load_basis(&dir.path().join("modes")).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.biorthogonality_error().unwrap() < 1e-8);
        assert!(dir.path().join("eigenvalues.csv").is_file());
        assert!(!dir.path().join("petermann.csv").exists());
    }

    #[test]
    fn matrices_round_trip_through_csv() {
        let s = parse_scenario(STRIP, Path::new(".")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (r, art) = run_stages(&s, &[Stage::Algebra], Path::new("."));
        export_results(&r, dir.path(), Format::Csv).unwrap();
        let m = art.overlaps.unwrap();
        let c = read_matrix_csv(&dir.path().join("c_matrix.csv")).unwrap();
        let d = read_matrix_csv(&dir.path().join("d_matrix.csv")).unwrap();
        assert!(linalg::max_abs(&(&c - &m.c)) <= 1e-15);
        assert!(linalg::max_abs(&(&d - &m.d)) <= 1e-15);
        let mut rd = csv::Reader::from_path(dir.path().join("petermann.csv")).unwrap();
        let h: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(h, ["theta", "polarization", "re_gamma", "im_gamma", "abs_gamma_sq", "K"]);
        assert_eq!(rd.records().count(), 3);
    }

    #[test]
    fn basis_decay_runs_on_solved_modes() {
        let s = parse_scenario(STRIP, Path::new(".")).unwrap();
        let (r, _) = run_stages(&s, &[Stage::Decay], Path::new("."));
        assert!(r.passed(), "{:?} {:?}", r.outcomes, r.warnings);
        let run = &r.decay.as_ref().unwrap().runs[0];
        let rel = (run.fit.rate - run.markov.gamma_e).abs() / run.markov.gamma_e;
        assert!(rel < 0.02, "{rel}");
    }

    #[test]
    fn failing_stage_is_recorded() {
        let mut s = parse_scenario(STRIP, Path::new(".")).unwrap();
        s.solve.max_iter = 1;
        s.solve.method = SolveMethod::PowerDeflate;
        let (r, _) = run_stages(&s, &[Stage::Algebra], Path::new("."));
        assert!(!r.passed());
        assert_eq!(r.outcomes[0].status, StageStatus::Failed);
        assert_eq!(r.outcomes[1].status, StageStatus::Failed);
    }
}
