//! Python bindings: meshes, cameras, the model, scale search and the
//! verification suite. Points cross the boundary as lists of 3-tuples.

use std::path::PathBuf;

use meshdeform::fixtures::{synthetic_image, unit_cube_target, write_all};
use meshdeform::imageio::{load_image, load_mask};
use meshdeform::loss::LossReport;
use meshdeform::lss::{linear_scale_search, validate_grid, SilhouetteIou, DEFAULT_GRID};
use meshdeform::mesh::{bundled_template, unpool_mesh, Point3};
use meshdeform::model::{tdm_forward, ModelConfig, TdmModel};
use meshdeform::perception::Camera;
use meshdeform::pointcloud::PointCloud;
use meshdeform::train::{overfit_train, TrainConfig};
use meshdeform::Error;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Parse { .. } | Error::Image { .. } | Error::InvalidConfig(_) | Error::Empty(_) | Error::Contract(_) => {
            PyValueError::new_err(msg)
        }
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::Degenerate { .. } => PyArithmeticError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for meshdeform::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

#[pyclass(name = "TriMesh", module = "meshdeform", from_py_object)]
#[derive(Clone)]
struct PyTriMesh(meshdeform::mesh::TriMesh);

#[pymethods]
impl PyTriMesh {
    #[new]
    fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> PyResult<Self> {
        meshdeform::mesh::TriMesh::new(vertices, faces).py().map(Self)
    }

    #[staticmethod]
    fn from_obj(text: &str) -> PyResult<Self> {
        meshdeform::mesh::TriMesh::from_obj(text).py().map(Self)
    }

    #[staticmethod]
    fn read_obj(path: PathBuf) -> PyResult<Self> {
        meshdeform::obj::read_obj(&path).py().map(Self)
    }

    fn write_obj(&self, path: PathBuf) -> PyResult<()> {
        meshdeform::obj::write_obj_file(&path, &self.0).py()
    }

    fn to_obj(&self) -> String {
        self.0.to_obj()
    }

    #[getter]
    fn vertices(&self) -> Vec<Point3> {
        self.0.vertices().to_vec()
    }

    #[getter]
    fn faces(&self) -> Vec<[usize; 3]> {
        self.0.faces().to_vec()
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.0.num_vertices()
    }

    #[getter]
    fn num_faces(&self) -> usize {
        self.0.num_faces()
    }

    fn euler_characteristic(&self) -> i64 {
        self.0.euler_characteristic()
    }

    /// Splits every edge at its midpoint and every face into four.
    fn unpool(&self) -> Self {
        Self(unpool_mesh(&self.0))
    }

    fn __repr__(&self) -> String {
        format!("TriMesh({} vertices, {} faces)", self.0.num_vertices(), self.0.num_faces())
    }
}

#[pyclass(name = "Camera", module = "meshdeform", from_py_object)]
#[derive(Clone)]
struct PyCamera(Camera);

#[pymethods]
impl PyCamera {
    #[new]
    #[pyo3(signature = (focal=None, cx=None, cy=None, translation=None))]
    fn new(focal: Option<f64>, cx: Option<f64>, cy: Option<f64>, translation: Option<Point3>) -> PyResult<Self> {
        let d = Camera::default();
        let cam = Camera {
            focal: focal.unwrap_or(d.focal),
            cx: cx.unwrap_or(d.cx),
            cy: cy.unwrap_or(d.cy),
            translation: translation.unwrap_or(d.translation),
            ..d
        };
        cam.validate().py()?;
        Ok(Self(cam))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Camera::load(&path).py().map(Self)
    }

    fn to_config_string(&self) -> String {
        self.0.to_config_string()
    }

    /// Pixel coordinates of a model-space point, or None behind the camera.
    fn project(&self, p: Point3) -> Option<[f64; 2]> {
        self.0.project(&p)
    }

    #[getter]
    fn focal(&self) -> f64 {
        self.0.focal
    }
}

fn camera_or_default(c: Option<&PyCamera>) -> Camera {
    c.map(|c| c.0.clone()).unwrap_or_default()
}

fn meshes_out(meshes: Vec<meshdeform::mesh::TriMesh>) -> Vec<PyTriMesh> {
    meshes.into_iter().map(PyTriMesh).collect()
}

fn report_dict<'py>(py: Python<'py>, r: &LossReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("chamfer", r.chamfer)?;
    d.set_item("smooth", r.smooth)?;
    d.set_item("laplacian", r.laplacian)?;
    d.set_item("point_move", r.point_move)?;
    d.set_item("edge", r.edge)?;
    d.set_item("total", r.total)?;
    Ok(d)
}

#[pyclass(name = "Model", module = "meshdeform", unsendable)]
struct PyModel(TdmModel);

#[pymethods]
impl PyModel {
    /// A freshly initialized model; it returns the template and its
    /// midpoint subdivisions until trained.
    #[new]
    #[pyo3(signature = (width=16, seed=0))]
    fn new(width: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig {
            seed,
            ..ModelConfig::desk().with_width(width)
        };
        TdmModel::new(cfg).py().map(Self)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        TdmModel::load_checkpoint(&dir).py().map(Self)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.save_checkpoint(&dir).py()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.cfg.width
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.store.num_values()
    }

    /// The four stage meshes for a 224x224 image file, or for the seeded
    /// synthetic image when `image` is None.
    #[pyo3(signature = (image=None, camera=None, seed=0))]
    fn reconstruct(&self, image: Option<PathBuf>, camera: Option<&PyCamera>, seed: u64) -> PyResult<Vec<PyTriMesh>> {
        let img = match image {
            Some(p) => load_image(&p).py()?,
            None => synthetic_image(seed),
        };
        tdm_forward(&img, &camera_or_default(camera), &self.0, seed)
            .py()
            .map(meshes_out)
    }

    /// Border-scale search on an image and mask. Returns the report as a
    /// dict and the four meshes of the chosen candidate.
    #[pyo3(signature = (image, mask, camera=None, grid=None, seed=0, wide_grid=false))]
    #[allow(clippy::too_many_arguments)]
    fn search<'py>(
        &self,
        py: Python<'py>,
        image: PathBuf,
        mask: PathBuf,
        camera: Option<&PyCamera>,
        grid: Option<Vec<f64>>,
        seed: u64,
        wide_grid: bool,
    ) -> PyResult<(Bound<'py, PyDict>, Vec<PyTriMesh>)> {
        let grid = grid.unwrap_or_else(|| DEFAULT_GRID.to_vec());
        validate_grid(&grid, wide_grid).py()?;
        let img = load_image(&image).py()?;
        let mask = load_mask(&mask).py()?;
        let res = linear_scale_search(&img, &mask, &camera_or_default(camera), &self.0, &grid, seed, &SilhouetteIou).py()?;
        let report = res.report();
        let d = PyDict::new(py);
        d.set_item("chosen_s", report.chosen_s)?;
        d.set_item("chosen_p", report.chosen_p)?;
        d.set_item("best_score", report.best_score)?;
        d.set_item("vertex_counts", report.vertex_counts)?;
        let rows = report
            .candidates
            .iter()
            .map(|row| {
                let r = PyDict::new(py);
                r.set_item("s", row.s)?;
                r.set_item("p", row.p)?;
                r.set_item("score", row.score)?;
                r.set_item("error", row.error.clone())?;
                Ok(r)
            })
            .collect::<PyResult<Vec<_>>>()?;
        d.set_item("candidates", rows)?;
        Ok((d, meshes_out(res.meshes)))
    }
}

/// Fits a fresh model to a target point cloud (default: the seeded unit
/// cube) and returns (loss curve, final meshes, model).
#[pyfunction]
#[pyo3(signature = (steps=300, width=16, seed=0, lr=None, target=None))]
fn overfit<'py>(
    py: Python<'py>,
    steps: usize,
    width: usize,
    seed: u64,
    lr: Option<f64>,
    target: Option<PathBuf>,
) -> PyResult<(Vec<Bound<'py, PyDict>>, Vec<PyTriMesh>, PyModel)> {
    let cloud = match target {
        Some(p) => PointCloud::load(&p).py()?,
        None => unit_cube_target(seed),
    };
    let desk = TrainConfig::desk();
    let cfg = TrainConfig {
        model: ModelConfig {
            seed,
            ..desk.model.clone().with_width(width)
        },
        steps,
        lr: lr.unwrap_or(desk.lr),
        backbone_seed: seed,
        ..desk
    };
    let out = overfit_train(&cloud, &synthetic_image(seed), &Camera::default(), &cfg).py()?;
    let curve = out.curve.iter().map(|r| report_dict(py, r)).collect::<PyResult<Vec<_>>>()?;
    Ok((curve, meshes_out(out.meshes), PyModel(out.model)))
}

#[pyfunction]
fn template() -> PyTriMesh {
    PyTriMesh(bundled_template())
}

/// Vertex counts of the template and its three subdivisions.
#[pyfunction]
fn unpool_trace() -> Vec<usize> {
    let mut mesh = bundled_template();
    let mut counts = vec![mesh.num_vertices()];
    for _ in 0..3 {
        mesh = unpool_mesh(&mesh);
        counts.push(mesh.num_vertices());
    }
    counts
}

#[pyfunction]
fn chamfer_l1(p: Vec<Point3>, q: Vec<Point3>) -> PyResult<f64> {
    meshdeform::loss::chamfer_l1(&p, &q).py()
}

#[pyfunction]
fn knn_indices(points: Vec<Point3>, k: usize) -> PyResult<Vec<Vec<usize>>> {
    meshdeform::knn::knn_indices(&points, k).py()
}

/// (name, max relative error, coordinates checked) per block and loss.
#[pyfunction]
#[pyo3(signature = (width=16, seed=0))]
fn gradient_suite(width: usize, seed: u64) -> PyResult<Vec<(String, f64, usize)>> {
    Ok(meshdeform::verify::gradient_suite(width, seed)
        .py()?
        .into_iter()
        .map(|r| (r.name, r.max_rel_error, r.coords))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (dir, seed=0))]
fn write_fixtures(dir: PathBuf, seed: u64) -> PyResult<Vec<PathBuf>> {
    write_all(&dir, seed).py()
}

#[pymodule]
pub fn meshdeform_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTriMesh>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(overfit, m)?)?;
    m.add_function(wrap_pyfunction!(template, m)?)?;
    m.add_function(wrap_pyfunction!(unpool_trace, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_l1, m)?)?;
    m.add_function(wrap_pyfunction!(knn_indices, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    m.add_function(wrap_pyfunction!(write_fixtures, m)?)?;
    m.add("TOLERANCE", meshdeform::verify::TOLERANCE)?;
    Ok(())
}
