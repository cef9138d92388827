use std::path::{Path, PathBuf};

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nhmodes::algebra::{overlap_matrices, petermann_factors};
use nhmodes::decay;
use nhmodes::eigen::{biorthonormalize, solve_modes as solve, ModeBasis, SolveMethod};
use nhmodes::error::Error;
use nhmodes::field::TransverseGrid;
use nhmodes::fock;
use nhmodes::optics::{Direction, ResonatorSpec, RoundTripOperator};
use nhmodes::pipeline;
use nhmodes::scenario::load_scenario;

fn err(e: Error) -> PyErr {
    match e {
        Error::Validation { .. } | Error::Parse(_) | Error::Dimension(_) | Error::Position(_) | Error::Sampling(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

type Matrix = Vec<Vec<Complex64>>;

fn rows(m: &ndarray::Array2<Complex64>) -> Matrix {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Biorthonormal set of right (u) and adjoint (v) round-trip eigenmodes.
#[pyclass(name = "Basis", module = "pynhmodes")]
struct PyBasis {
    inner: ModeBasis,
}

#[pymethods]
impl PyBasis {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Basis({} modes on a {}x{} grid)", self.inner.len(), self.inner.grid.ny, self.inner.grid.nx)
    }

    /// Round-trip eigenvalues γ_n.
    fn gammas(&self) -> Vec<Complex64> {
        self.inner.gammas()
    }

    fn adjoint_gammas(&self) -> Vec<Complex64> {
        self.inner.modes.iter().map(|m| m.gamma_adjoint).collect()
    }

    /// Samples of u_n, row-major over (y, x).
    fn u(&self, n: usize) -> PyResult<Vec<Complex64>> {
        self.inner.modes.get(n).map(|m| m.u.to_vec()).ok_or_else(|| PyValueError::new_err("mode index out of range"))
    }

    fn v(&self, n: usize) -> PyResult<Vec<Complex64>> {
        self.inner.modes.get(n).map(|m| m.v.to_vec()).ok_or_else(|| PyValueError::new_err("mode index out of range"))
    }

    fn xs(&self) -> Vec<f64> {
        self.inner.grid.xs().to_vec()
    }

    fn biorthogonality_error(&self) -> PyResult<f64> {
        self.inner.biorthogonality_error().map_err(err)
    }

    /// (C, D): Gram matrices of the u-set and the v-set.
    fn overlap_matrices(&self) -> PyResult<(Matrix, Matrix)> {
        let m = overlap_matrices(&self.inner).map_err(err)?;
        Ok((rows(&m.c), rows(&m.d)))
    }

    fn petermann(&self) -> PyResult<Vec<f64>> {
        let m = overlap_matrices(&self.inner).map_err(err)?;
        petermann_factors(&m).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        pipeline::save_basis(&self.inner, &dir).map_err(err)
    }
}

/// Solves the modes described by a scenario file.
#[pyfunction]
fn solve_scenario(config: PathBuf) -> PyResult<PyBasis> {
    let s = load_scenario(&config).map_err(err)?;
    let (inner, _) = pipeline::solve_basis(&s).map_err(err)?;
    Ok(PyBasis { inner })
}

/// Confocal unstable strip resonator; the grid spans nx·dx with a guard band.
#[pyfunction]
#[pyo3(signature = (magnification, length, aperture, wavelength, nx, dx, count=6, guard=0.15, method="arnoldi", seed=0))]
#[allow(clippy::too_many_arguments)]
fn confocal_strip_modes(
    magnification: f64,
    length: f64,
    aperture: f64,
    wavelength: f64,
    nx: usize,
    dx: f64,
    count: usize,
    guard: f64,
    method: &str,
    seed: u64,
) -> PyResult<PyBasis> {
    let method = match method {
        "arnoldi" => SolveMethod::Arnoldi,
        "dense" => SolveMethod::Dense,
        "power_deflate" => SolveMethod::PowerDeflate,
        other => return Err(PyValueError::new_err(format!("unknown method `{other}`"))),
    };
    let spec = ResonatorSpec::confocal_unstable(magnification, length, aperture, wavelength);
    let grid = TransverseGrid::strip(nx, dx, guard).map_err(err)?;
    let op = RoundTripOperator::new(spec, grid, Direction::Forward).map_err(err)?;
    let raw = solve(&op, count, method, 1e-12, 500, seed).map_err(err)?;
    Ok(PyBasis { inner: biorthonormalize(&raw).map_err(err)? })
}

#[pyfunction]
fn load_basis(dir: PathBuf) -> PyResult<PyBasis> {
    Ok(PyBasis { inner: pipeline::load_basis(&dir).map_err(err)? })
}

/// Runs the pipeline and returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (config, stages="all", out=None, seed=None))]
fn run<'py>(py: Python<'py>, config: PathBuf, stages: &str, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let mut s = load_scenario(&config).map_err(err)?;
    if let Some(seed) = seed {
        s.solve.seed = seed;
    }
    let st = pipeline::parse_stages(stages).map_err(err)?;
    let base = config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let report = match out {
        Some(o) => pipeline::run_pipeline(&s, &st, &base, &o).map_err(err)?,
        None => pipeline::run_stages(&s, &st, &base).0,
    };
    json_to_py(py, &report)
}

/// Commutator identities of the NHM operators for a random biorthogonal Γ.
#[pyfunction]
#[pyo3(signature = (n_true=2, n_max=4, seed=0))]
fn fock_identities<'py>(py: Python<'py>, n_true: usize, n_max: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let (g, l) = fock::random_biorthogonal_pair(n_true, seed).map_err(err)?;
    let space = fock::build_fock(n_true, n_true, n_max).map_err(err)?;
    let omega: Vec<f64> = (0..n_true).map(|i| 1.0 + 0.25 * i as f64).collect();
    let ops = fock::build_nhm_ops(&space, &g, &l, &omega).map_err(err)?;
    json_to_py(py, &fock::check_commutators(&ops, &space))
}

/// (‖H_E − H_E†‖, ‖H_E0 − H_E0†‖) for a random biorthogonal Γ.
#[pyfunction]
#[pyo3(signature = (n_true=2, n_max=4, seed=0))]
fn hamiltonian_hermiticity(n_true: usize, n_max: usize, seed: u64) -> PyResult<(f64, f64)> {
    let (g, l) = fock::random_biorthogonal_pair(n_true, seed).map_err(err)?;
    let space = fock::build_fock(n_true, n_true, n_max).map_err(err)?;
    let omega: Vec<f64> = (0..n_true).map(|i| 1.0 + 0.25 * i as f64).collect();
    let ops = fock::build_nhm_ops(&space, &g, &l, &omega).map_err(err)?;
    let h = fock::build_hamiltonians(&ops);
    Ok((fock::hermiticity_defect(&h.h_e), fock::hermiticity_defect(&h.h_e0)))
}

/// Decay of an excited atom into a comb of modes with Petermann factor K.
#[pyfunction]
#[pyo3(signature = (petermann, gamma_free=0.5, n_modes=401, delta_omega=1.0, t_end=5.0, window=(0.5, 5.0)))]
fn synthetic_decay<'py>(
    py: Python<'py>,
    petermann: f64,
    gamma_free: f64,
    n_modes: usize,
    delta_omega: f64,
    t_end: f64,
    window: (f64, f64),
) -> PyResult<Bound<'py, PyAny>> {
    let cs = decay::synthetic_comb(petermann, gamma_free, n_modes, delta_omega).map_err(err)?;
    let markov = decay::markov_rate(&cs).map_err(err)?;
    let r = decay::evolve_amplitudes(&cs, t_end, decay::max_step(&cs), 50).map_err(err)?;
    let fit = decay::fit_decay_rate(&r.times, &r.excited_population(), [window.0, window.1]).map_err(err)?;
    let out = serde_json::json!({
        "fitted_rate": fit.rate,
        "predicted_rate": markov.gamma_e,
        "free_rate": markov.gamma_free,
        "r_squared": fit.r_squared,
        "max_gram_drift": r.max_gram_drift,
        "times": r.times,
        "population": r.excited_population(),
    });
    json_to_py(py, &out)
}

#[pymodule]
fn pynhmodes(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBasis>()?;
    m.add_function(wrap_pyfunction!(solve_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(confocal_strip_modes, m)?)?;
    m.add_function(wrap_pyfunction!(load_basis, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(fock_identities, m)?)?;
    m.add_function(wrap_pyfunction!(hamiltonian_hermiticity, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_decay, m)?)?;
    m.add("SCHEMA_VERSION", pipeline::SCHEMA_VERSION)?;
    Ok(())
}
