//! Python bindings for the partially separable dynamic MRI pipeline.
//!
//! The module exposes the same building blocks as the CLI — phantom and
//! sampling generation, filter calibration, HQS reconstruction, and
//! quality metrics — on NumPy arrays. Complex volumes are Nx x Ny x Nt
//! complex128 arrays; coil maps are (coils, Nx, Ny).

use numpy::ndarray as nd;
use numpy::{IntoPyArray, PyArray1, PyArray3, PyArray4, PyReadonlyArray1, PyReadonlyArray3, PyReadonlyArray4};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use num_complex::Complex64;
use psrecon_core::hankel::{SpatialFilterBank, TemporalFilter};
use psrecon_core::hqs::{FilterBank, Hyperparams, SolverConfig, SolverMode};
use psrecon_core::metrics::PeakMode;
use psrecon_core::ps_model::{spatial_filter_default, PhantomConfig};
use psrecon_core::sampling::{CoilSet, SamplingMask};
use psrecon_core::volume::{ComplexVolume, Domain};

fn to_py_err(e: psrecon_core::Error) -> PyErr {
    match &e {
        psrecon_core::Error::Numerical(_)
        | psrecon_core::Error::SolverDiverged { .. }
        | psrecon_core::Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

// ndarray version bridging: the core uses one ndarray release, rust-numpy
// another; move data through a flat standard-layout vec.

fn volume_to_py<'py>(py: Python<'py>, v: &ComplexVolume) -> Bound<'py, PyArray3<Complex64>> {
    let dims = v.dims();
    let flat = v.data.as_standard_layout().to_owned().into_raw_vec();
    nd::Array3::from_shape_vec(dims, flat).unwrap().into_pyarray(py)
}

fn volume_from_py(a: &PyReadonlyArray3<Complex64>, domain: Domain) -> PyResult<ComplexVolume> {
    let view = a.as_array();
    let (nx, ny, nt) = view.dim();
    let data =
        ndarray::Array3::from_shape_fn((nx, ny, nt), |(i, j, t)| view[[i, j, t]]);
    Ok(ComplexVolume::new(data, domain))
}

fn mask_from_py(a: &PyReadonlyArray3<f64>) -> SamplingMask {
    let view = a.as_array();
    let (nx, ny, nt) = view.dim();
    let mask = ndarray::Array3::from_shape_fn((nx, ny, nt), |(i, j, t)| view[[i, j, t]]);
    let total = mask.len() as f64;
    let sampled: f64 = mask.sum();
    let acceleration = if sampled > 0.0 { total / sampled } else { f64::INFINITY };
    SamplingMask { mask, acceleration }
}

fn coils_from_py(a: &PyReadonlyArray3<Complex64>) -> PyResult<CoilSet> {
    let view = a.as_array();
    let (count, nx, ny) = view.dim();
    if count == 0 {
        return Err(PyValueError::new_err("coil array must have at least one coil"));
    }
    let maps = (0..count)
        .map(|c| ndarray::Array2::from_shape_fn((nx, ny), |(i, j)| view[[c, i, j]]))
        .collect();
    Ok(CoilSet { maps })
}

fn taps_from_py(a: &PyReadonlyArray1<Complex64>) -> PyResult<TemporalFilter> {
    TemporalFilter::new(a.as_array().to_vec()).map_err(to_py_err)
}

fn solver_config(
    taps: &PyReadonlyArray1<Complex64>,
    mode: &str,
    iters: usize,
    lambda1: f64,
    lambda2: f64,
    rho0: f64,
    rho1: f64,
    rho2: f64,
) -> PyResult<SolverConfig> {
    let mode = match mode {
        "paper" => SolverMode::Paper,
        "exact" => SolverMode::Exact,
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    };
    let hyper = Hyperparams { lambda1, lambda2, rho0, rho1, rho2 };
    hyper.validate().map_err(to_py_err)?;
    Ok(SolverConfig {
        mode,
        iterations: iters,
        hyper,
        filters: FilterBank {
            h_ps: taps_from_py(taps)?,
            h_s: SpatialFilterBank::shared(spatial_filter_default()),
        },
    })
}

/// Synthetic partially separable phantom. Returns (volume, roots).
#[pyfunction]
#[pyo3(signature = (seed, nx=64, ny=64, nt=16, order=3, noise=0.0))]
fn phantom<'py>(
    py: Python<'py>,
    seed: u64,
    nx: usize,
    ny: usize,
    nt: usize,
    order: usize,
    noise: f64,
) -> PyResult<(Bound<'py, PyArray3<Complex64>>, Vec<Complex64>)> {
    let cfg = PhantomConfig { seed, nx, ny, nt, order, noise_level: noise, ..Default::default() };
    let (vol, roots) = psrecon_core::ps_model::generate_phantom(&cfg).map_err(to_py_err)?;
    Ok((volume_to_py(py, &vol), roots))
}

/// Per-frame Cartesian undersampling mask (float 0/1 array).
#[pyfunction]
#[pyo3(signature = (seed, nx=64, ny=64, nt=16, accel=4.0, acs=4))]
fn mask<'py>(
    py: Python<'py>,
    seed: u64,
    nx: usize,
    ny: usize,
    nt: usize,
    accel: f64,
    acs: usize,
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let m = psrecon_core::sampling::make_mask(nx, ny, nt, accel, acs, seed).map_err(to_py_err)?;
    let flat = m.mask.as_standard_layout().to_owned().into_raw_vec();
    Ok(nd::Array3::from_shape_vec((nx, ny, nt), flat).unwrap().into_pyarray(py))
}

/// Sum-of-squares-normalized coil sensitivities, shape (count, nx, ny).
#[pyfunction]
#[pyo3(signature = (seed, nx=64, ny=64, count=1))]
fn coils<'py>(
    py: Python<'py>,
    seed: u64,
    nx: usize,
    ny: usize,
    count: usize,
) -> PyResult<Bound<'py, PyArray3<Complex64>>> {
    let cs = psrecon_core::sampling::make_coils(nx, ny, count, seed).map_err(to_py_err)?;
    let mut out = nd::Array3::zeros((count, nx, ny));
    for (c, map) in cs.maps.iter().enumerate() {
        for ((i, j), v) in map.indexed_iter() {
            out[[c, i, j]] = *v;
        }
    }
    Ok(out.into_pyarray(py))
}

/// Coil-weighted, Fourier-transformed, masked measurements,
/// shape (coils, nx, ny, nt).
#[pyfunction]
fn encode<'py>(
    py: Python<'py>,
    gamma: PyReadonlyArray3<'py, Complex64>,
    coil_maps: PyReadonlyArray3<'py, Complex64>,
    sampling: PyReadonlyArray3<'py, f64>,
) -> PyResult<Bound<'py, PyArray4<Complex64>>> {
    let g = volume_from_py(&gamma, Domain::Image)?;
    let cs = coils_from_py(&coil_maps)?;
    let m = mask_from_py(&sampling);
    let y = psrecon_core::sampling::encode(&g, &cs, &m).map_err(to_py_err)?;
    let (nx, ny, nt) = g.dims();
    let mut out = nd::Array4::zeros((y.len(), nx, ny, nt));
    for (c, yc) in y.iter().enumerate() {
        for ((i, j, t), v) in yc.data.indexed_iter() {
            out[[c, i, j, t]] = *v;
        }
    }
    Ok(out.into_pyarray(py))
}

/// SVD null-space calibration of a temporal annihilating filter from
/// training volumes. Returns (taps, singular_values, residual).
#[pyfunction]
fn calibrate<'py>(
    py: Python<'py>,
    volumes: Vec<PyReadonlyArray3<'py, Complex64>>,
    window: usize,
) -> PyResult<(Bound<'py, PyArray1<Complex64>>, Bound<'py, PyArray1<f64>>, f64)> {
    let vols: Vec<ComplexVolume> = volumes
        .iter()
        .map(|v| volume_from_py(v, Domain::Image))
        .collect::<PyResult<_>>()?;
    let r = psrecon_core::ps_model::calibrate_nullspace(&vols, window).map_err(to_py_err)?;
    Ok((
        r.filter.taps.into_pyarray(py),
        r.singular_values.into_pyarray(py),
        r.residual,
    ))
}

/// HQS reconstruction. `y` has shape (coils, nx, ny, nt); returns
/// (gamma, objective_totals) with one objective value per sweep.
#[pyfunction]
#[pyo3(signature = (y, sampling, coil_maps, taps, mode="paper", iters=10,
                    lambda1=1.0, lambda2=1.0, rho0=1.0, rho1=1.0, rho2=1.0))]
#[allow(clippy::too_many_arguments)]
fn reconstruct<'py>(
    py: Python<'py>,
    y: PyReadonlyArray4<'py, Complex64>,
    sampling: PyReadonlyArray3<'py, f64>,
    coil_maps: PyReadonlyArray3<'py, Complex64>,
    taps: PyReadonlyArray1<'py, Complex64>,
    mode: &str,
    iters: usize,
    lambda1: f64,
    lambda2: f64,
    rho0: f64,
    rho1: f64,
    rho2: f64,
) -> PyResult<(Bound<'py, PyArray3<Complex64>>, Vec<f64>)> {
    let yv = y.as_array();
    let (nc, nx, ny, nt) = yv.dim();
    let y_coils: Vec<ComplexVolume> = (0..nc)
        .map(|c| {
            let data = ndarray::Array3::from_shape_fn((nx, ny, nt), |(i, j, t)| {
                yv[[c, i, j, t]]
            });
            ComplexVolume::new(data, Domain::KSpace)
        })
        .collect();
    let m = mask_from_py(&sampling);
    let cs = coils_from_py(&coil_maps)?;
    let cfg = solver_config(&taps, mode, iters, lambda1, lambda2, rho0, rho1, rho2)?;
    let (gamma, log) =
        psrecon_core::hqs::reconstruct(&y_coils, &m, &cs, &cfg).map_err(to_py_err)?;
    Ok((volume_to_py(py, &gamma), log.iter().map(|o| o.total()).collect()))
}

/// MSE / PSNR / SSIM of a reconstruction against a reference.
#[pyfunction]
#[pyo3(signature = (out, reference, peak_mode="reference"))]
fn metrics<'py>(
    py: Python<'py>,
    out: PyReadonlyArray3<'py, Complex64>,
    reference: PyReadonlyArray3<'py, Complex64>,
    peak_mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let o = volume_from_py(&out, Domain::Image)?;
    let r = volume_from_py(&reference, Domain::Image)?;
    let pm = match peak_mode {
        "reference" => PeakMode::Reference,
        "output" => PeakMode::Output,
        other => return Err(PyValueError::new_err(format!("unknown peak_mode {other:?}"))),
    };
    let d = PyDict::new(py);
    d.set_item("mse", psrecon_core::metrics::mse(&o, &r).map_err(to_py_err)?)?;
    d.set_item("psnr_db", psrecon_core::metrics::psnr(&o, &r, pm).map_err(to_py_err)?)?;
    d.set_item("ssim", psrecon_core::metrics::ssim(&o, &r).map_err(to_py_err)?)?;
    Ok(d)
}

#[pymodule]
fn psrecon(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(mask, m)?)?;
    m.add_function(wrap_pyfunction!(coils, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
