//! Python module `neto`: analytic shapes, trained fields, datasets, training,
//! extraction and scoring.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use neto_core::capture::{generate_dataset, load_dataset, RigSpec};
use neto_core::config::RunConfig;
use neto_core::field::{checkpoint, init_sphere_with, AnalyticShape, Architecture, NeuralField, PrefitConfig, ScalarField};
use neto_core::geometry::{refract as refract_dir, Refraction, Vec3};
use neto_core::mesh::{evaluate as evaluate_meshes, marching_cubes, TriangleMesh};
use neto_core::tracer::scene_bound;
use neto_core::train;

fn v3(p: [f64; 3]) -> Vec3 {
    Vec3::new(p[0], p[1], p[2])
}

fn arr(v: Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn runtime<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Analytic signed-distance shape.
#[pyclass(name = "Shape", module = "neto", frozen)]
struct PyShape {
    inner: AnalyticShape,
    name: String,
}

#[pymethods]
impl PyShape {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        AnalyticShape::preset(name)
            .map(|inner| Self { inner, name: name.into() })
            .ok_or_else(|| PyValueError::new_err(format!("unknown shape '{name}'")))
    }

    #[staticmethod]
    fn presets() -> Vec<&'static str> {
        neto_core::field::analytic::PRESET_NAMES.to_vec()
    }

    fn values(&self, points: Vec<[f64; 3]>) -> Vec<f64> {
        let pts: Vec<Vec3> = points.into_iter().map(v3).collect();
        self.inner.values(&pts)
    }

    fn gradients(&self, points: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
        let pts: Vec<Vec3> = points.into_iter().map(v3).collect();
        self.inner.evaluate_batch(&pts).into_iter().map(|(_, g)| arr(g)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Shape('{}')", self.name)
    }
}

/// Trainable signed-distance network.
#[pyclass(name = "Field", module = "neto")]
struct PyField {
    inner: NeuralField,
}

#[pymethods]
impl PyField {
    /// Network pre-fitted to a sphere of `radius`.
    #[staticmethod]
    #[pyo3(signature = (radius=0.5, seed=1, depth=4, width=128, freqs=5, prefit_steps=2000))]
    fn sphere(radius: f64, seed: u64, depth: usize, width: usize, freqs: usize, prefit_steps: usize) -> PyResult<Self> {
        if !(radius > 0.0 && radius < 1.0) || depth == 0 || width == 0 {
            return Err(PyValueError::new_err("radius must lie in (0, 1) and the network must be non-empty"));
        }
        let cfg = PrefitConfig { steps: prefit_steps, ..PrefitConfig::default() };
        Ok(Self { inner: init_sphere_with(Architecture { depth, width, freqs }, seed, radius, cfg) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        checkpoint::load(&path).map(|inner| Self { inner }).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn values(&self, points: Vec<[f64; 3]>) -> Vec<f64> {
        let pts: Vec<Vec3> = points.into_iter().map(v3).collect();
        self.inner.eval_values(&pts)
    }

    fn gradients(&self, points: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
        let pts: Vec<Vec3> = points.into_iter().map(v3).collect();
        self.inner.eval_with_grad(&pts).into_iter().map(|(_, g)| arr(g)).collect()
    }

    #[getter]
    fn sharpness(&self) -> f64 {
        self.inner.sharpness()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Zero level set as `(vertices, triangles)`.
    #[pyo3(signature = (resolution=128))]
    fn mesh(&self, resolution: usize) -> PyResult<(Vec<[f64; 3]>, Vec<[u32; 3]>)> {
        let (lo, hi) = scene_bound();
        let m = marching_cubes(&self.inner, &lo, &hi, resolution).map_err(runtime)?;
        Ok((m.vertices.into_iter().map(arr).collect(), m.triangles))
    }
}

/// Simulated capture on disk.
#[pyclass(name = "Dataset", module = "neto", frozen)]
struct PyDataset {
    inner: neto_core::capture::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (shape, out_dir, views=8, res=64, seed=1, corrupt_multibounce_q=false))]
    fn generate(
        shape: &PyShape,
        out_dir: PathBuf,
        views: usize,
        res: u32,
        seed: u64,
        corrupt_multibounce_q: bool,
    ) -> PyResult<Self> {
        let rig = RigSpec { n_views: views, width: res, height: res, corrupt_multibounce_q, ..RigSpec::default() };
        generate_dataset(&shape.inner, &rig, seed, &out_dir).map(|inner| Self { inner }).map_err(runtime)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        load_dataset(&dir).map(|inner| Self { inner }).map_err(runtime)
    }

    /// Tag counts over all views.
    fn counts(&self) -> std::collections::BTreeMap<&'static str, usize> {
        let c = self.inner.counts();
        [("TwoBounce", c.two_bounce), ("MultiBounce", c.multi_bounce), ("TIR", c.tir), ("Background", c.background)]
            .into_iter()
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.records.iter().map(|r| r.len()).sum()
    }

    #[getter]
    fn views(&self) -> usize {
        self.inner.manifest.views.len()
    }
}

/// Refracts unit direction `d` at unit normal `n` (facing against `d`) with
/// index ratio `eta`; `None` on total internal reflection.
#[pyfunction]
fn refract(d: [f64; 3], n: [f64; 3], eta: f64) -> PyResult<Option<[f64; 3]>> {
    match refract_dir(&v3(d), &v3(n), eta) {
        Ok(Refraction::Transmitted(t)) => Ok(Some(arr(t))),
        Ok(Refraction::TotalInternalReflection) => Ok(None),
        Err(e) => Err(PyValueError::new_err(e.to_string())),
    }
}

/// Trains on `data_dir`, writing into `out_dir`. `config` holds run-config
/// keys as strings. Returns the final checkpoint path.
#[pyfunction]
#[pyo3(signature = (data_dir, out_dir, config=None, resume=false))]
fn train_field(
    py: Python<'_>,
    data_dir: PathBuf,
    out_dir: PathBuf,
    config: Option<std::collections::HashMap<String, String>>,
    resume: bool,
) -> PyResult<PathBuf> {
    let mut cfg = RunConfig::default();
    let mut keys: Vec<(String, String)> = config.unwrap_or_default().into_iter().collect();
    keys.sort();
    for (k, v) in keys {
        cfg.set(&k, &v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    }
    cfg.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    let ds = load_dataset(&data_dir).map_err(runtime)?;
    let summary = py.detach(|| train::run(&ds, cfg.train, &out_dir, resume, |_| {})).map_err(runtime)?;
    Ok(summary.final_checkpoint)
}

/// Scores `recon` against `gt` (OBJ paths); returns the metrics as JSON.
#[pyfunction]
#[pyo3(signature = (recon, gt, tau=0.01, samples=100_000, seed=1))]
fn evaluate(recon: PathBuf, gt: PathBuf, tau: f64, samples: usize, seed: u64) -> PyResult<String> {
    let r = TriangleMesh::read_obj(&recon).map_err(runtime)?;
    let g = TriangleMesh::read_obj(&gt).map_err(runtime)?;
    evaluate_meshes(&r, &g, tau, samples, seed).map(|m| m.to_json()).map_err(runtime)
}

#[pymodule]
fn neto(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyShape>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(refract, m)?)?;
    m.add_function(wrap_pyfunction!(train_field, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
