//! Python bindings: dataset simulation, pipeline runs, trajectory scoring and
//! the plane map.

use std::path::PathBuf;

use nalgebra::Vector3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use lvio_core::harness::{self, AteMode, HarnessError, PipelineConfig, SceneConfig};
use lvio_core::plane_map::{self, PlaneMapConfig};

fn to_py(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<AteMode> {
    match mode {
        "paper" => Ok(AteMode::Paper),
        "rmse" => Ok(AteMode::Rmse),
        other => Err(PyValueError::new_err(format!("unknown mode {other:?} (expected paper or rmse)"))),
    }
}

fn points(pts: Vec<[f64; 3]>) -> Vec<Vector3<f64>> {
    pts.into_iter().map(Vector3::from).collect()
}

/// Generate a dataset directory from a scene TOML file.
///
/// Returns the number of images, scans and IMU samples written.
#[pyfunction]
fn simulate(config: PathBuf, seed: u64, out: PathBuf) -> PyResult<(usize, usize, usize)> {
    let cfg = SceneConfig::load(&config).map_err(to_py)?;
    let data = harness::generate_scene(&cfg, seed).map_err(to_py)?;
    data.write(&out).map_err(to_py)?;
    Ok((data.images.len(), data.scans.len(), data.imu.len()))
}

/// Run the estimator on a dataset directory and export its results to `out`.
///
/// `ablation` is one of `hybrid`, `features-only`, `centroids-only`; it
/// overrides the config when given. Returns the paper-mode ATE.
#[pyfunction]
#[pyo3(signature = (data, config, out, ablation=None))]
fn run(data: PathBuf, config: PathBuf, out: PathBuf, ablation: Option<&str>) -> PyResult<f64> {
    let mut cfg = PipelineConfig::load(&config).map_err(to_py)?;
    if let Some(a) = ablation {
        cfg.ablation = a.parse().map_err(PyValueError::new_err)?;
    }
    let data = harness::ingest(&data).map_err(to_py)?;
    let result = harness::run_pipeline(&data, &cfg).map_err(to_py)?;
    let report = harness::evaluate_ate(&result.trajectory, &data.ground_truth, AteMode::Paper).map_err(to_py)?;
    harness::export(&result, Some(&report), &out).map_err(to_py)?;
    Ok(report.ate)
}

/// ATE between two trajectory files (`t x y z qx qy qz qw` per line).
#[pyfunction]
#[pyo3(signature = (est, gt, mode="paper"))]
fn evaluate_ate(est: PathBuf, gt: PathBuf, mode: &str) -> PyResult<f64> {
    let mode = parse_mode(mode)?;
    let est = harness::load_trajectory(&est).map_err(to_py)?;
    let gt = harness::load_trajectory(&gt).map_err(to_py)?;
    Ok(harness::evaluate_ate(&est, &gt, mode).map_err(to_py)?.ate)
}

/// Mean and N-normalized covariance of a point list.
#[pyfunction]
fn batch_stats(pts: Vec<[f64; 3]>) -> PyResult<([f64; 3], [[f64; 3]; 3])> {
    let s = plane_map::batch_stats(&points(pts)).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let cov = [0, 1, 2].map(|r| [0, 1, 2].map(|c| s.cov[(r, c)]));
    Ok((s.mean.into(), cov))
}

/// Run the `lvio` command line with `args` (without the program name).
/// Returns the exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    harness::cli::main_with_args(std::iter::once("lvio".to_string()).chain(args))
}

/// Voxel map with incremental plane extraction.
#[pyclass(name = "PlaneMap")]
struct PyPlaneMap {
    inner: plane_map::PlaneMap,
}

#[pymethods]
impl PyPlaneMap {
    #[new]
    #[pyo3(signature = (voxel_size=1.0, min_points=10, plane_threshold=0.01, mean_shift_threshold=0.1, min_update_batch=5))]
    fn new(
        voxel_size: f64,
        min_points: usize,
        plane_threshold: f64,
        mean_shift_threshold: f64,
        min_update_batch: usize,
    ) -> PyResult<Self> {
        let cfg = PlaneMapConfig {
            voxel_size,
            min_points,
            plane_threshold,
            mean_shift_threshold,
            min_update_batch,
            window_radius: None,
        };
        let inner = plane_map::PlaneMap::new(cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    /// Insert world-frame points; returns the number of voxels touched.
    fn insert(&mut self, pts: Vec<[f64; 3]>) -> usize {
        self.inner.insert_scan(&points(pts)).len()
    }

    /// `(position, normal)` per planar voxel or octree node.
    fn centroids(&self) -> Vec<([f64; 3], [f64; 3])> {
        self.inner
            .extract_centroids()
            .into_iter()
            .map(|c| (c.position.into(), c.normal.into()))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pymodule]
fn lvio(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_ate, m)?)?;
    m.add_function(wrap_pyfunction!(batch_stats, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add_class::<PyPlaneMap>()?;
    Ok(())
}
