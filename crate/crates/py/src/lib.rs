//! Python bindings for the `safeplan` planner.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use safeplan::geometry::{self, Point2};
use safeplan::mpc::Variant;
use safeplan::sim::{self, Outcome, RunOptions, TRACE_COLUMNS};
use safeplan::splines::{self, FrenetPose};
use safeplan::PlanError;

create_exception!(pysafeplan, PlanningError, PyException);

fn to_py(e: PlanError) -> PyErr {
    match e {
        PlanError::Scenario(msg) => PyValueError::new_err(msg),
        other => PlanningError::new_err(other.to_string()),
    }
}

fn points(raw: Vec<(f64, f64)>) -> Vec<Point2> {
    raw.into_iter().map(|(x, y)| Point2::new(x, y)).collect()
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name() == name.to_ascii_lowercase())
        .ok_or_else(|| PyValueError::new_err(format!("unknown variant {name:?}; expected one of mpc, re, hb, su, ss")))
}

/// A validated planning scenario.
#[pyclass(frozen, module = "pysafeplan")]
struct Scenario {
    inner: sim::Scenario,
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: sim::Scenario::from_toml(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self { inner: sim::Scenario::load(path).map_err(to_py)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn obstacle_count(&self) -> usize {
        self.inner.obstacles.len()
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?}, obstacles={})", self.inner.name, self.inner.obstacles.len())
    }
}

/// The closed-loop record of one simulated run.
#[pyclass(frozen, module = "pysafeplan")]
struct RunResult {
    inner: sim::RunResult,
}

#[pymethods]
impl RunResult {
    /// `"completed"`, `"halted_at_blockade"` or `"failed"`.
    #[getter]
    fn outcome(&self) -> &'static str {
        self.inner.outcome.name()
    }

    /// Outcome fields such as the halt position or failure reason.
    #[getter]
    fn outcome_detail<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("kind", self.inner.outcome.name())?;
        match &self.inner.outcome {
            Outcome::Completed => {}
            Outcome::HaltedAtBlockade { s, x, y, v, s_stop } => {
                for (k, val) in [("s", s), ("x", x), ("y", y), ("v", v), ("s_stop", s_stop)] {
                    d.set_item(k, *val)?;
                }
            }
            Outcome::Failed { tick, s, x, y, reason } => {
                d.set_item("tick", *tick)?;
                for (k, val) in [("s", s), ("x", x), ("y", y)] {
                    d.set_item(k, *val)?;
                }
                d.set_item("reason", reason)?;
            }
        }
        Ok(d)
    }

    #[getter]
    fn collision(&self) -> bool {
        self.inner.collision
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[getter]
    fn ticks(&self) -> usize {
        self.inner.trace.len()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = self.inner.stats();
        let d = PyDict::new(py);
        d.set_item("ticks", s.ticks)?;
        d.set_item("mean_ms", s.mean_ms)?;
        d.set_item("max_ms", s.max_ms)?;
        d.set_item("mean_iterations", s.mean_iterations)?;
        d.set_item("min_speed", s.min_speed)?;
        d.set_item("fallback_ticks", s.fallback_ticks)?;
        Ok(d)
    }

    /// One numeric trace column by name, e.g. `"v"` or `"s"`.
    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        let pick: fn(&sim::TraceRow) -> f64 = match name {
            "tick" => |r| r.tick as f64,
            "time" => |r| r.time,
            "u1" => |r| r.u1,
            "u2" => |r| r.u2,
            "x" => |r| r.x,
            "y" => |r| r.y,
            "heading" => |r| r.heading,
            "kappa" => |r| r.kappa,
            "v" => |r| r.v,
            "s" => |r| r.s,
            "d" => |r| r.d,
            "chi" => |r| r.chi,
            "zeta" => |r| r.zeta,
            "s_stop" => |r| r.s_stop,
            _ => return Err(PyValueError::new_err(format!("unknown or non-numeric column {name:?}"))),
        };
        Ok(self.inner.trace.iter().map(pick).collect())
    }

    fn trace_csv(&self) -> String {
        sim::trace_csv(&self.inner.trace)
    }

    fn summary_json(&self) -> String {
        sim::summary_json(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("RunResult({}, {}, ticks={})", self.inner.variant.name(), self.inner.outcome.name(), self.inner.trace.len())
    }
}

/// Runs `scenario` in closed loop with one controller variant.
#[pyfunction]
#[pyo3(signature = (scenario, variant = "mpc", *, ticks = None, seed = 0, iter_cap = None, homotopy_z = None))]
fn run(
    py: Python<'_>,
    scenario: &Scenario,
    variant: &str,
    ticks: Option<usize>,
    seed: u64,
    iter_cap: Option<usize>,
    homotopy_z: Option<usize>,
) -> PyResult<RunResult> {
    let variant = parse_variant(variant)?;
    let options = RunOptions { ticks, seed, iteration_cap: iter_cap, homotopy_z, ..RunOptions::default() };
    let result = py.detach(|| sim::run(&scenario.inner, variant, &options)).map_err(to_py)?;
    Ok(RunResult { inner: result })
}

/// Arc-length parameterized reference path through Cartesian points.
#[pyclass(frozen, module = "pysafeplan")]
struct Path {
    inner: splines::PathSpline2D,
}

#[pymethods]
impl Path {
    #[new]
    fn new(points_xy: Vec<(f64, f64)>) -> PyResult<Self> {
        Ok(Self { inner: splines::fit_path(&points(points_xy)).map_err(to_py)? })
    }

    #[getter]
    fn length(&self) -> f64 {
        self.inner.length()
    }

    fn position(&self, s: f64) -> (f64, f64) {
        let p = self.inner.position(s);
        (p.x, p.y)
    }

    fn curvature(&self, s: f64) -> PyResult<f64> {
        self.inner.curvature(s).map_err(to_py)
    }

    /// `(s, d)` of the closest point on the path.
    fn project(&self, x: f64, y: f64) -> PyResult<(f64, f64)> {
        let p = self.inner.project(Point2::new(x, y)).map_err(to_py)?;
        Ok((p.s, p.d))
    }

    /// Cartesian position and heading of a Frenet pose.
    #[pyo3(signature = (s, d, heading_diff = 0.0))]
    fn to_cartesian(&self, s: f64, d: f64, heading_diff: f64) -> PyResult<(f64, f64, f64)> {
        let (p, h) = self.inner.frenet_to_cartesian(FrenetPose { s, d, heading_diff }).map_err(to_py)?;
        Ok((p.x, p.y, h))
    }
}

/// Counter-clockwise convex hull of a point set.
#[pyfunction]
fn convex_hull(points_xy: Vec<(f64, f64)>) -> PyResult<Vec<(f64, f64)>> {
    let hull = geometry::convex_hull(&points(points_xy)).map_err(to_py)?;
    Ok(hull.vertices().iter().map(|p| (p.x, p.y)).collect())
}

#[pymodule]
fn pysafeplan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<RunResult>()?;
    m.add_class::<Path>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(convex_hull, m)?)?;
    m.add("PlanningError", m.py().get_type::<PlanningError>())?;
    m.add("TRACE_COLUMNS", TRACE_COLUMNS.to_vec())?;
    m.add("VARIANTS", Variant::ALL.map(|v| v.name()).to_vec())?;
    Ok(())
}
