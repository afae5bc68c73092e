//! Python bindings for the branch-shadowing laboratory.
//!
//! The module mirrors the CLI surface: assemble and run victim programs,
//! apply the branch-obfuscation pass, and drive attack campaigns and
//! countermeasure sweeps. Structured results cross as plain dicts/lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shadowlab::cli::{
    attack_campaign, balanced_probe_accuracy, build_config, sweep_flush, timing_table,
};
use shadowlab::harness::FlushPolicy;
use shadowlab::ir::{self, InputMap};
use shadowlab::uarch::{default_params, Channel};
use shadowlab::victims::{self, VICTIM_FUEL};
use shadowlab::zigzagger::{self, BranchesPerTrampoline, ZigzaggerConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    match v {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn serialize_to_py<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    json_to_py(py, &serde_json::to_value(v).map_err(runtime_err)?)
}

/// An assembled program image.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Program {
    inner: ir::Program,
}

#[pymethods]
impl Program {
    #[getter]
    fn base(&self) -> u64 {
        self.inner.base().0
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Assembly source that round-trips through `assemble`.
    fn source(&self) -> String {
        self.inner.print()
    }

    /// Label name -> address.
    fn labels(&self) -> std::collections::BTreeMap<String, u64> {
        self.inner
            .labels()
            .iter()
            .map(|(k, v)| (k.clone(), v.0))
            .collect()
    }

    /// `(address, kind)` for every static branch site.
    fn branches(&self) -> Vec<(u64, String)> {
        self.inner
            .branches()
            .into_iter()
            .map(|(a, k)| (a.0, format!("{k:?}").to_lowercase()))
            .collect()
    }

    fn uses_reserved_reg(&self) -> bool {
        self.inner.uses_reserved_reg()
    }

    fn __repr__(&self) -> String {
        format!(
            "Program(base=0x{:x}, len={})",
            self.inner.base().0,
            self.inner.len()
        )
    }
}

/// Parses assembly text into a `Program`.
#[pyfunction]
fn assemble(text: &str) -> PyResult<Program> {
    Ok(Program {
        inner: ir::assemble(text).map_err(value_err)?,
    })
}

/// Runs `program` architecturally and returns the trace summary:
/// final registers, cycle count, executed instructions, and the ordered
/// `(address, taken)` outcomes of its conditional branches.
#[pyfunction]
#[pyo3(signature = (program, inputs, fuel = VICTIM_FUEL))]
fn interpret(
    py: Python<'_>,
    program: &Program,
    inputs: InputMap,
    fuel: u64,
) -> PyResult<Py<PyAny>> {
    let trace =
        ir::interpret(&program.inner, program.inner.base(), &inputs, fuel).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("regs", trace.final_regs.to_vec())?;
    out.set_item("cycles", trace.cycles)?;
    out.set_item("instructions", trace.events.len())?;
    out.set_item("fuel_exhausted", trace.fuel_exhausted)?;
    out.set_item(
        "conditional_outcomes",
        trace
            .conditional_outcomes(&program.inner)
            .into_iter()
            .map(|(a, t)| (a.0, t))
            .collect::<Vec<_>>(),
    )?;
    out.into_py_any(py)
}

/// One member of the victim corpus.
#[pyclass(frozen, skip_from_py_object)]

struct Victim {
    inner: victims::VictimSpec,
}

#[pymethods]
impl Victim {
    #[getter]
    fn name(&self) -> &str {
        self.inner.name
    }

    #[getter]
    fn secret_schema(&self) -> &str {
        self.inner.secret_schema
    }

    #[getter]
    fn leak_description(&self) -> &str {
        self.inner.leak_description
    }

    #[getter]
    fn program(&self) -> Program {
        Program {
            inner: self.inner.program.clone(),
        }
    }

    /// Draws a random secret-bearing input.
    fn gen_input(&self, seed: u64) -> InputMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.inner.gen_input(&mut rng)
    }

    /// What a branch-trace observer can learn from this input.
    fn ground_truth(&self, py: Python<'_>, input: InputMap) -> PyResult<Py<PyAny>> {
        json_to_py(py, &self.inner.ground_truth(&input))
    }

    fn __repr__(&self) -> String {
        format!("Victim({:?})", self.inner.name)
    }
}

/// Names of the shipped victim corpus.
#[pyfunction]
fn victim_names() -> Vec<&'static str> {
    victims::all().iter().map(|v| v.name).collect()
}

/// Looks up one victim by name.
#[pyfunction]
fn victim(name: &str) -> PyResult<Victim> {
    victims::by_name(name)
        .map(|inner| Victim { inner })
        .ok_or_else(|| value_err(format!("unknown victim {name:?}")))
}

/// Applies the branch-obfuscation pass. `branches_per_trampoline` is
/// `"all"` or an integer >= 2. Returns `(transformed, report)`.
#[pyfunction]
#[pyo3(signature = (program, seed, branches_per_trampoline = "all"))]
fn zigzag(
    py: Python<'_>,
    program: &Program,
    seed: u64,
    branches_per_trampoline: &str,
) -> PyResult<(Program, Py<PyAny>)> {
    let k = BranchesPerTrampoline::parse(branches_per_trampoline)
        .ok_or_else(|| value_err("branches_per_trampoline must be \"all\" or an integer"))?;
    let cfg = ZigzaggerConfig {
        branches_per_trampoline: k,
        seed,
    };
    let (transformed, report) = zigzagger::transform(&program.inner, &cfg).map_err(value_err)?;
    Ok((
        Program { inner: transformed },
        serialize_to_py(py, &report)?,
    ))
}

/// True when the two inputs produce identical direct-branch event streams,
/// i.e. when a shadowing observer cannot tell them apart.
#[pyfunction]
#[pyo3(signature = (program, input_a, input_b, fuel = VICTIM_FUEL))]
fn leakage_check(
    program: &Program,
    input_a: InputMap,
    input_b: InputMap,
    fuel: u64,
) -> PyResult<bool> {
    zigzagger::leakage_check(&program.inner, &input_a, &input_b, fuel).map_err(value_err)
}

fn config_from_pairs(
    settings: std::collections::BTreeMap<String, String>,
) -> PyResult<shadowlab::cli::ExperimentConfig> {
    let pairs: Vec<(String, String)> = settings.into_iter().collect();
    build_config(&pairs, None).map_err(value_err)
}

/// Runs an attack campaign. `settings` takes the same keys as the CLI
/// config (`victim`, `trials`, `seed`, `flush`, `zigzag`, `interrupts`,
/// `predictor`, `channel`); `seed` is required.
#[pyfunction]
fn attack(
    py: Python<'_>,
    settings: std::collections::BTreeMap<String, String>,
) -> PyResult<Py<PyAny>> {
    let cfg = config_from_pairs(settings)?;
    serialize_to_py(py, &attack_campaign(&cfg).map_err(runtime_err)?)
}

/// Re-runs the campaign across periodic-flush periods; returns one
/// `{period, accuracy, mean_ipc}` row per period.
#[pyfunction]
fn flush_sweep(
    py: Python<'_>,
    settings: std::collections::BTreeMap<String, String>,
    periods: Vec<u64>,
) -> PyResult<Py<PyAny>> {
    let cfg = config_from_pairs(settings)?;
    serialize_to_py(py, &sweep_flush(&cfg, &periods).map_err(runtime_err)?)
}

/// Probe accuracy against a fair-coin branch under a flush policy
/// (`"none"`, `"on-switch"`, or `"periodic:N"`).
#[pyfunction]
fn balanced_accuracy(flush: &str, probes: u64, seed: u64) -> PyResult<f64> {
    let policy = match flush {
        "none" => FlushPolicy::None,
        "on-switch" => FlushPolicy::OnEnclaveSwitch,
        other => match other.strip_prefix("periodic:").and_then(|n| n.parse().ok()) {
            Some(period) if period > 0 => FlushPolicy::Periodic { period },
            _ => return Err(value_err(format!("bad flush policy {flush:?}"))),
        },
    };
    balanced_probe_accuracy(policy, probes, seed).map_err(runtime_err)
}

/// Empirical per-channel timing statistics, one row per
/// (channel, predicted-correctly) population.
#[pyfunction]
fn channel_table(py: Python<'_>, samples: u64, seed: u64) -> PyResult<Py<PyAny>> {
    serialize_to_py(py, &timing_table(samples, seed))
}

/// Decision boundary between the correct and mispredicted timing
/// populations of a channel (`"rdtscp"`, `"pt"`, or `"lbr"`).
#[pyfunction]
fn channel_threshold(channel: &str) -> PyResult<f64> {
    let channel =
        Channel::parse(channel).ok_or_else(|| value_err(format!("unknown channel {channel:?}")))?;
    let params = default_params(channel);
    Ok(shadowlab::attacker::derive_threshold(&params)
        .map_err(value_err)?
        .boundary)
}

#[pymodule]
fn shadowlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Program>()?;
    m.add_class::<Victim>()?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    m.add_function(wrap_pyfunction!(interpret, m)?)?;
    m.add_function(wrap_pyfunction!(victim_names, m)?)?;
    m.add_function(wrap_pyfunction!(victim, m)?)?;
    m.add_function(wrap_pyfunction!(zigzag, m)?)?;
    m.add_function(wrap_pyfunction!(leakage_check, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(flush_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(channel_table, m)?)?;
    m.add_function(wrap_pyfunction!(channel_threshold, m)?)?;
    Ok(())
}
