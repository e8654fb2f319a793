//! Python bindings. Motions cross the boundary as nested lists:
//! dancer, then frame, then the 72 packed pose values (τ then θ).

use gchoreo_core::body::{mpjpe, pack_pose, unpack_pose, BodyShape, MotionSequence, Skeleton, DEFAULT_FPS};
use gchoreo_core::features::{synth_scenario, Pattern, SynthSpec};
use gchoreo_core::gradcheck::{run_suite, Suite};
use gchoreo_core::local_fit::{fit_local, initialize_motion, LocalFitConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Packed = Vec<Vec<f64>>;

fn py_err(e: gchoreo_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_motion(frames: &[Vec<f64>]) -> PyResult<MotionSequence> {
    let poses = frames.iter().map(|y| unpack_pose(y)).collect::<gchoreo_core::Result<_>>().map_err(py_err)?;
    MotionSequence::new(poses, BodyShape::default(), DEFAULT_FPS).map_err(py_err)
}

fn to_group(group: &[Packed]) -> PyResult<Vec<MotionSequence>> {
    group.iter().map(|m| to_motion(m)).collect()
}

fn packed(m: &MotionSequence) -> PyResult<Packed> {
    m.poses.iter().map(pack_pose).collect::<gchoreo_core::Result<_>>().map_err(py_err)
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Ground-truth motions and music features of a synthetic scene.
#[pyfunction]
#[pyo3(signature = (pattern, dancers, frames, seed = 0, noise_px = 0.0))]
fn synth<'py>(
    py: Python<'py>,
    pattern: &str,
    dancers: usize,
    frames: usize,
    seed: u64,
    noise_px: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let pattern: Pattern = pattern.parse().map_err(py_err)?;
    let spec = SynthSpec {
        pattern,
        dancers,
        frames,
        noise_px,
        seed,
    };
    let sc = synth_scenario(&spec, &Skeleton::default()).map_err(py_err)?;
    let motions = sc.motions.iter().map(packed).collect::<PyResult<Vec<_>>>()?;
    let features: Packed = (0..sc.features.frames()).map(|t| sc.features.data.row(t).to_vec()).collect();
    let out = PyDict::new(py);
    out.set_item("motions", motions)?;
    out.set_item("features", features)?;
    out.set_item("fps", DEFAULT_FPS)?;
    Ok(out)
}

/// Fits the first dancer of a synthetic scene from its own keypoints;
/// returns MPJPE against ground truth (metres) and the per-iteration totals.
#[pyfunction]
#[pyo3(signature = (pattern, frames = 30, seed = 1))]
fn fit_local_synthetic(py: Python<'_>, pattern: &str, frames: usize, seed: u64) -> PyResult<(f64, Vec<f64>)> {
    let pattern: Pattern = pattern.parse().map_err(py_err)?;
    py.detach(|| {
        let s = Skeleton::default();
        let spec = SynthSpec {
            pattern,
            dancers: 1,
            frames,
            noise_px: 0.0,
            seed,
        };
        let sc = synth_scenario(&spec, &s)?;
        let init = initialize_motion(&sc.tracks[0], &sc.camera, &s, DEFAULT_FPS)?;
        let r = fit_local(&sc.tracks[0], &sc.contacts[0], &sc.camera, &init, &LocalFitConfig::default(), &s)?;
        let e = mpjpe(&r.motion, &sc.motions[0], &s)?;
        Ok((e, r.trace.iter().map(|row| row.total).collect()))
    })
    .map_err(py_err)
}

#[pyfunction]
fn tif(group: Vec<Packed>) -> PyResult<f64> {
    gchoreo_core::metrics::tif(&to_group(&group)?, &Skeleton::default()).map_err(py_err)
}

#[pyfunction]
fn fid_kinetic(a: Vec<Packed>, b: Vec<Packed>) -> PyResult<f64> {
    gchoreo_core::metrics::fid_kinetic(&to_group(&a)?, &to_group(&b)?, &Skeleton::default()).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (kinematic_beats, music_beats, sigma = 0.1))]
fn mmc_from_beats(kinematic_beats: Vec<f64>, music_beats: Vec<f64>, sigma: f64) -> PyResult<f64> {
    gchoreo_core::metrics::mmc_from_beats(&kinematic_beats, &music_beats, sigma).map_err(py_err)
}

#[pyfunction]
fn spatial_encoding(a: [f64; 3], b: [f64; 3]) -> f64 {
    gchoreo_core::generator::spatial_encoding(a, b)
}

/// Rows of (module, term, max_rel_error, tolerance, passed).
#[pyfunction]
#[pyo3(signature = (suite = "all", seed = 0))]
fn gradcheck(py: Python<'_>, suite: &str, seed: u64) -> PyResult<Vec<(String, String, f64, f64, bool)>> {
    let suite: Suite = suite.parse().map_err(py_err)?;
    let rows = py.detach(|| run_suite(suite, seed)).map_err(py_err)?;
    Ok(rows
        .iter()
        .map(|r| (r.module.to_string(), r.term.to_string(), r.max_rel_error, r.tolerance, r.passed()))
        .collect())
}

#[pymodule]
fn gchoreo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(fit_local_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(tif, m)?)?;
    m.add_function(wrap_pyfunction!(fid_kinetic, m)?)?;
    m.add_function(wrap_pyfunction!(mmc_from_beats, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_encoding, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
