//! Python bindings: body model, matching, metrics, box updates, the
//! end-to-end pipeline and the self-test.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use crowdmesh::body_model::{self, BodyParams, Vec3};
use crowdmesh::camera::NormBox;
use crowdmesh::decoder;
use crowdmesh::matching::{self, Assignment, CostMatrix};
use crowdmesh::metrics;
use crowdmesh::pipeline;

fn py_err(e: crowdmesh::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn points(p: Vec<[f64; 3]>) -> Vec<Vec3> {
    p.into_iter().map(|[x, y, z]| Vec3::new(x, y, z)).collect()
}

fn arrays(p: &[Vec3]) -> Vec<[f64; 3]> {
    p.iter().map(|v| [v.x, v.y, v.z]).collect()
}

fn boxes(b: Vec<[f64; 4]>) -> Vec<NormBox> {
    b.into_iter().map(NormBox::from_array).collect()
}

type Mesh = (Vec<[f64; 3]>, Vec<[f64; 3]>);

type AssignmentTuple = (Vec<(usize, usize)>, Vec<usize>, Vec<usize>, f64);

fn assignment_tuple(a: Assignment) -> AssignmentTuple {
    (a.pairs, a.unmatched_preds, a.unmatched_gts, a.total_cost)
}

/// Parametric body model.
#[pyclass(name = "BodyModel", module = "crowdmesh_py")]
struct PyBodyModel {
    inner: body_model::BodyModelSpec,
}

#[pymethods]
impl PyBodyModel {
    /// Deterministic synthetic model with `vertices`, `joints` and `shapes`.
    #[staticmethod]
    #[pyo3(signature = (seed=7, vertices=240, joints=24, shapes=10))]
    fn toy(seed: u64, vertices: usize, joints: usize, shapes: usize) -> PyResult<Self> {
        Ok(Self {
            inner: body_model::make_toy_model(seed, vertices, joints, shapes).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: body_model::BodyModelSpec::load(path).map_err(py_err)?,
        })
    }

    #[getter]
    fn vertex_count(&self) -> usize {
        self.inner.vertex_count()
    }

    #[getter]
    fn joint_count(&self) -> usize {
        self.inner.joint_count()
    }

    #[getter]
    fn shape_count(&self) -> usize {
        self.inner.shape_count()
    }

    fn template(&self) -> Vec<[f64; 3]> {
        arrays(self.inner.template())
    }

    fn faces(&self) -> Vec<[usize; 3]> {
        self.inner.faces().to_vec()
    }

    /// Returns `(vertices, joints)` for per-joint axis-angle `pose` and `shape`.
    fn forward(&self, pose: Vec<[f64; 3]>, shape: Vec<f64>) -> PyResult<Mesh> {
        let params = BodyParams::new(pose, shape).map_err(py_err)?;
        let out = body_model::forward(&self.inner, &params).map_err(py_err)?;
        Ok((arrays(&out.vertices), arrays(&out.joints)))
    }
}

/// Optimal assignment of a rectangular cost matrix:
/// `(pairs, unmatched_preds, unmatched_gts, total_cost)`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<AssignmentTuple> {
    let c = CostMatrix::from_rows(&cost).map_err(py_err)?;
    Ok(assignment_tuple(matching::hungarian(&c)))
}

/// Exhaustive assignment for small matrices.
#[pyfunction]
fn brute_force_assign(cost: Vec<Vec<f64>>) -> PyResult<AssignmentTuple> {
    let c = CostMatrix::from_rows(&cost).map_err(py_err)?;
    matching::brute_force_assign(&c).map(assignment_tuple).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (p, gamma=2.0))]
fn confidence_cost(p: f64, gamma: f64) -> f64 {
    matching::confidence_cost(p, gamma).0
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    metrics::iou(&NormBox::from_array(a), &NormBox::from_array(b))
}

#[pyfunction]
fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    metrics::giou(&NormBox::from_array(a), &NormBox::from_array(b))
}

/// Point sets in meters, errors in millimeters.
#[pyfunction]
fn mpjpe(pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>) -> PyResult<f64> {
    metrics::mpjpe(&points(pred), &points(gt)).map_err(py_err)
}

#[pyfunction]
fn pa_mpjpe(pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>) -> PyResult<f64> {
    metrics::pa_mpjpe(&points(pred), &points(gt)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, thresh_mm=150.0))]
fn pck3d(pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>, thresh_mm: f64) -> PyResult<f64> {
    metrics::pck3d(&points(pred), &points(gt), thresh_mm).map_err(py_err)
}

/// Sigmoid-space reference-box update of a `(cx, cy, w, h)` box.
#[pyfunction]
fn update_ref_box(b: [f64; 4], delta: [f64; 4]) -> [f64; 4] {
    decoder::update_ref_box(&NormBox::from_array(b), delta).to_array()
}

/// `(human_index, environment_box)` pairs in emission order.
#[pyfunction]
fn enumerate_pairs(humans: Vec<[f64; 4]>, objects: Vec<[f64; 4]>) -> Vec<(usize, [f64; 4])> {
    decoder::enumerate_pairs(&boxes(humans), &boxes(objects))
        .into_iter()
        .map(|(i, b)| (i, b.to_array()))
        .collect()
}

/// Default run configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&pipeline::RunConfig::default()).map_err(json_err)
}

fn config_from(config_json: Option<&str>, seed: Option<u64>) -> PyResult<pipeline::RunConfig> {
    let mut cfg = match config_json {
        Some(s) => pipeline::RunConfig::from_json_str(s).map_err(py_err)?,
        None => pipeline::RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Generated scenes as JSON.
#[pyfunction]
#[pyo3(signature = (config_json=None, seed=None, count=None))]
fn gen_scenes(config_json: Option<&str>, seed: Option<u64>, count: Option<usize>) -> PyResult<String> {
    let cfg = config_from(config_json, seed)?;
    let scenes = pipeline::gen_scenes(&cfg, count.unwrap_or(cfg.scene_count)).map_err(py_err)?;
    serde_json::to_string(&scenes).map_err(json_err)
}

/// Generates scenes, runs the decoder and returns the evaluation report as JSON.
#[pyfunction]
#[pyo3(signature = (config_json=None, seed=None))]
fn run_eval(py: Python<'_>, config_json: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let cfg = config_from(config_json, seed)?;
    py.detach(|| {
        let model = cfg.body_model()?;
        let scenes = pipeline::gen_scenes(&cfg, cfg.scene_count)?;
        let weights = cfg.init_weights()?;
        let preds = pipeline::run_forward_all(&scenes, &weights, &model, &cfg)?;
        pipeline::evaluate(&scenes, &preds, &model, &cfg)?.to_json_string()
    })
    .map_err(py_err)
}

/// Runs the oracle suites; returns `(passed, report_json)`.
#[pyfunction]
#[pyo3(signature = (seed=0, fault=None))]
fn selftest(py: Python<'_>, seed: u64, fault: Option<&str>) -> PyResult<(bool, String)> {
    let fault = match fault {
        None => None,
        Some("mask_bit") => Some(pipeline::Fault::MaskBit),
        Some(other) => return Err(PyValueError::new_err(format!("unknown fault {other:?}"))),
    };
    let report = py.detach(|| pipeline::selftest(seed, fault));
    Ok((report.passed(), serde_json::to_string(&report).map_err(json_err)?))
}

#[pymodule]
fn crowdmesh_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBodyModel>()?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_assign, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_cost, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(mpjpe, m)?)?;
    m.add_function(wrap_pyfunction!(pa_mpjpe, m)?)?;
    m.add_function(wrap_pyfunction!(pck3d, m)?)?;
    m.add_function(wrap_pyfunction!(update_ref_box, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(run_eval, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        let p = vec![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]];
        assert_eq!(arrays(&points(p.clone())), p);
        let b = vec![[0.5, 0.5, 0.2, 0.3]];
        assert_eq!(boxes(b.clone())[0].to_array(), b[0]);
    }

    #[test]
    fn assignment_tuple_keeps_fields() {
        let c = CostMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0]]).unwrap();
        let (pairs, up, ug, cost) = assignment_tuple(matching::hungarian(&c));
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(up, vec![2]);
        assert!(ug.is_empty());
        assert_eq!(cost, 0.0);
    }
}
