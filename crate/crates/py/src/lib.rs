//! Python bindings: the core motion-model types and the main pipeline
//! operations (rollout, feasibility, dataset generation, training,
//! evaluation), exposed as the `kinpred_py` module.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use kinpred::autodiff::{read_checkpoint, write_checkpoint};
use kinpred::datagen;
use kinpred::evaluation;
use kinpred::geometry;
use kinpred::kinematics;
use kinpred::models::{HeadKind, Model, ModelConfig};
use kinpred::training::{self, TrainConfig};

fn err(e: kinpred::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Motion state (x, y, heading, speed) of one actor at one time step.
#[pyclass(name = "VehicleState", frozen, from_py_object)]
#[derive(Clone)]
struct PyVehicleState(kinematics::VehicleState);

#[pymethods]
impl PyVehicleState {
    #[new]
    fn new(x: f64, y: f64, psi: f64, v: f64) -> Self {
        Self(kinematics::VehicleState::new(x, y, psi, v))
    }

    #[getter]
    fn x(&self) -> f64 {
        self.0.x
    }
    #[getter]
    fn y(&self) -> f64 {
        self.0.y
    }
    #[getter]
    fn psi(&self) -> f64 {
        self.0.psi
    }
    #[getter]
    fn v(&self) -> f64 {
        self.0.v
    }

    fn as_tuple(&self) -> (f64, f64, f64, f64) {
        (self.0.x, self.0.y, self.0.psi, self.0.v)
    }

    fn __repr__(&self) -> String {
        format!("VehicleState(x={}, y={}, psi={}, v={})", self.0.x, self.0.y, self.0.psi, self.0.v)
    }
}

/// Per-actor kinematic parameters: axle distances, control limits, minimum
/// turning radius.
#[pyclass(name = "KinematicParams", frozen, from_py_object)]
#[derive(Clone)]
struct PyKinematicParams(kinematics::KinematicParams);

#[pymethods]
impl PyKinematicParams {
    #[new]
    fn new(l_r: f64, l_f: f64, a_max: f64, gamma_max: f64, r_min: f64) -> PyResult<Self> {
        kinematics::KinematicParams::new(l_r, l_f, a_max, gamma_max, r_min).map(Self).map_err(err)
    }

    #[staticmethod]
    fn midsize_sedan() -> Self {
        Self(kinematics::KinematicParams::midsize_sedan())
    }

    #[getter]
    fn l_r(&self) -> f64 {
        self.0.l_r
    }
    #[getter]
    fn l_f(&self) -> f64 {
        self.0.l_f
    }
    #[getter]
    fn a_max(&self) -> f64 {
        self.0.a_max
    }
    #[getter]
    fn gamma_max(&self) -> f64 {
        self.0.gamma_max
    }
    #[getter]
    fn r_min(&self) -> f64 {
        self.0.r_min
    }

    /// Continuous-model turning radius at a steering angle.
    fn turning_radius(&self, steer: f64) -> f64 {
        self.0.turning_radius(steer)
    }

    fn __repr__(&self) -> String {
        format!(
            "KinematicParams(l_r={}, l_f={}, a_max={}, gamma_max={}, r_min={})",
            self.0.l_r, self.0.l_f, self.0.a_max, self.0.gamma_max, self.0.r_min
        )
    }
}

/// Bicycle-model rollout of (accel, steer) controls from an initial state.
#[pyfunction]
fn rollout(
    initial: &PyVehicleState,
    controls: Vec<(f64, f64)>,
    params: &PyKinematicParams,
    dt: f64,
) -> PyResult<Vec<PyVehicleState>> {
    let cs: Vec<kinematics::ControlInput> =
        controls.iter().map(|&(a, g)| kinematics::ControlInput::new(a, g)).collect();
    let states = kinematics::rollout(&initial.0, &cs, &params.0, dt).map_err(err)?;
    Ok(states.into_iter().map(PyVehicleState).collect())
}

/// Constant-turn-rate-and-acceleration rollout.
#[pyfunction]
fn ctra_rollout(
    initial: &PyVehicleState,
    accel: f64,
    turn_rate: f64,
    horizon: usize,
    dt: f64,
) -> PyResult<Vec<PyVehicleState>> {
    let states = kinematics::ctra_rollout(&initial.0, accel, turn_rate, horizon, dt).map_err(err)?;
    Ok(states.into_iter().map(PyVehicleState).collect())
}

/// Classifies a position sequence: returns (feasible, min_radius,
/// violating_index) against the actor's minimum turning radius.
#[pyfunction]
fn check_feasibility(
    points: Vec<(f64, f64, f64, f64)>,
    dt: f64,
    params: &PyKinematicParams,
) -> PyResult<(bool, f64, Option<usize>)> {
    let states: Vec<kinematics::VehicleState> =
        points.iter().map(|&(x, y, psi, v)| kinematics::VehicleState::new(x, y, psi, v)).collect();
    let traj = geometry::Trajectory::new(dt, states).map_err(err)?;
    let rep = geometry::check_feasibility(&traj, &params.0);
    Ok((rep.feasible, rep.min_radius_observed, rep.violating_index))
}

/// Headings interpolated from positions by central differences, with the
/// stillness fallback.
#[pyfunction]
fn interpolate_headings(positions: Vec<(f64, f64)>, dt: f64, anchor_heading: f64) -> Vec<f64> {
    geometry::interpolate_headings(&positions, dt, anchor_heading)
}

/// Empirical 1-D Wasserstein-1 distance between two sample sets.
#[pyfunction]
fn wasserstein_1d(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    evaluation::wasserstein_1d(&a, &b).map_err(err)
}

/// Generates a dataset from a scenario-spec JSON string and writes it as
/// JSONL; returns the number of samples written.
#[pyfunction]
fn generate_dataset(spec_json: &str, count: usize, seed: u64, out_path: &str) -> PyResult<usize> {
    let spec: datagen::ScenarioSpec =
        serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let samples = datagen::generate(&spec, count, seed).map_err(err)?;
    datagen::write_dataset(&samples, std::path::Path::new(out_path)).map_err(err)?;
    Ok(samples.len())
}

/// Trains a model on a JSONL dataset and writes a checkpoint; returns the
/// final training loss.
#[pyfunction]
#[pyo3(signature = (data_path, config_json, ckpt_out, iters=None, seed=None))]
fn train_model(
    data_path: &str,
    config_json: &str,
    ckpt_out: &str,
    iters: Option<usize>,
    seed: Option<u64>,
) -> PyResult<f64> {
    let cfg: ModelConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut tc = TrainConfig::default();
    if let Some(i) = iters {
        tc.max_iters = i;
    }
    if let Some(s) = seed {
        tc.seed = s;
    }
    let data = datagen::read_dataset(std::path::Path::new(data_path)).map_err(err)?;
    let (train_set, val_set, _) = datagen::split(&data, tc.seed);
    let out = training::train(&cfg, &train_set, &val_set, &tc).map_err(err)?;
    let config_value = serde_json::to_value(&cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
    write_checkpoint(std::path::Path::new(ckpt_out), &out.model.params, Some(&out.adam), Some(&config_value))
        .map_err(err)?;
    Ok(out.rows.last().map(|r| r.loss_total).unwrap_or(f64::NAN))
}

/// Evaluates a checkpoint over a JSONL dataset; returns the metric report
/// as a dict.
#[pyfunction]
fn evaluate_checkpoint(py: Python<'_>, ckpt_path: &str, data_path: &str) -> PyResult<Py<PyDict>> {
    let ck = read_checkpoint(std::path::Path::new(ckpt_path)).map_err(err)?;
    let config_value = ck
        .model_config
        .clone()
        .ok_or_else(|| PyValueError::new_err("checkpoint carries no model_config"))?;
    let cfg: ModelConfig =
        serde_json::from_value(config_value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut model = Model::new(cfg, 0).map_err(err)?;
    ck.apply_params(&mut model.params).map_err(err)?;
    let data = datagen::read_dataset(std::path::Path::new(data_path)).map_err(err)?;
    let rep = evaluation::evaluate(&model, &data).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("method", rep.method)?;
    d.set_item("l2_3s_m", rep.l2_3s_m)?;
    d.set_item("l2_6s_m", rep.l2_6s_m)?;
    d.set_item("heading_3s_deg", rep.heading_3s_deg)?;
    d.set_item("heading_6s_deg", rep.heading_6s_deg)?;
    d.set_item("infeasible_pct", rep.infeasible_pct)?;
    d.set_item("w1_accel", rep.w1_accel)?;
    d.set_item("w1_turnrate", rep.w1_turnrate)?;
    Ok(d.into())
}

/// One decoded mode: (probability, [(x, y, psi, v), ...]).
type PyMode = (f64, Vec<(f64, f64, f64, f64)>);

/// Decodes a trained checkpoint for one actor history; returns a list of
/// (probability, [(x, y, psi, v), ...]) mode tuples.
#[pyfunction]
fn predict(
    ckpt_path: &str,
    past: Vec<(f64, f64, f64, f64)>,
    params: &PyKinematicParams,
) -> PyResult<Vec<PyMode>> {
    let ck = read_checkpoint(std::path::Path::new(ckpt_path)).map_err(err)?;
    let config_value =
        ck.model_config.clone().ok_or_else(|| PyValueError::new_err("checkpoint carries no model_config"))?;
    let cfg: ModelConfig =
        serde_json::from_value(config_value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut model = Model::new(cfg, 0).map_err(err)?;
    ck.apply_params(&mut model.params).map_err(err)?;
    let states: Vec<kinematics::VehicleState> =
        past.iter().map(|&(x, y, psi, v)| kinematics::VehicleState::new(x, y, psi, v)).collect();
    let pred = model.predict(&states, &params.0).map_err(err)?;
    Ok(pred
        .modes
        .iter()
        .map(|m| {
            (m.probability, m.trajectory.points.iter().map(|p| (p.x, p.y, p.psi, p.v)).collect())
        })
        .collect())
}

/// Names of the available decoder heads.
#[pyfunction]
fn head_names() -> Vec<&'static str> {
    [
        HeadKind::Um,
        HeadKind::UmVelo,
        HeadKind::UmHeading,
        HeadKind::Poly1,
        HeadKind::Poly2,
        HeadKind::Poly3,
        HeadKind::Ctra,
        HeadKind::Dkm,
    ]
    .iter()
    .map(|h| h.name())
    .collect()
}

#[pymodule]
fn kinpred_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVehicleState>()?;
    m.add_class::<PyKinematicParams>()?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(ctra_rollout, m)?)?;
    m.add_function(wrap_pyfunction!(check_feasibility, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate_headings, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein_1d, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(head_names, m)?)?;
    Ok(())
}
